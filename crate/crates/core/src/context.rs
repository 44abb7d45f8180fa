use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};
use crate::span::TargetSpan;
use crate::tokens::{Token, TokenSeq};

/// Left and right context around a target span inside a fixed-length window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub left: TokenSeq,
    pub right: TokenSeq,
    pub span: TargetSpan,
}

impl Context {
    pub fn new(left: TokenSeq, right: TokenSeq, span: TargetSpan, window: usize) -> Result<Self> {
        span.check_within(window)?;
        if left.len() != span.start || left.len() + span.length + right.len() != window {
            return Err(ClsmError::InvalidSpan(format!(
                "context lengths {}+{}+{} do not match span {}:{} in a window of {window}",
                left.len(),
                span.length,
                right.len(),
                span.start,
                span.end()
            )));
        }
        if let Some(t) = left.iter().chain(&right).find(|t| !t.is_data()) {
            return Err(ClsmError::InvalidToken(t.symbol()));
        }
        Ok(Self { left, right, span })
    }

    /// Cut a full window into context around `span`.
    pub fn from_window(window: &[Token], span: TargetSpan) -> Result<Self> {
        span.check_within(window.len())?;
        Self::new(
            window[..span.start].to_vec(),
            window[span.end()..].to_vec(),
            span,
            window.len(),
        )
    }

    pub fn window_len(&self) -> usize {
        self.left.len() + self.span.length + self.right.len()
    }

    /// `left ⊕ target ⊕ right`. `target` may be shorter than the span; the
    /// missing tail is filled with rests.
    pub fn assemble(&self, target: &[Token]) -> TokenSeq {
        let mut out = self.left.clone();
        out.extend(target.iter().copied().take(self.span.length));
        out.extend(std::iter::repeat_n(Token::REST, self.span.length.saturating_sub(target.len())));
        out.extend(&self.right);
        out
    }

    /// Input of the prior: target positions replaced by the constraint symbol.
    pub fn prior_input(&self) -> TokenSeq {
        let mut out = self.left.clone();
        out.extend(std::iter::repeat_n(Token::CONSTRAINT, self.span.length));
        out.extend(&self.right);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::parse_seq;

    #[test]
    fn validates_lengths() {
        let l = parse_seq("60 __").unwrap();
        let r = parse_seq("R R").unwrap();
        let span = TargetSpan { start: 2, length: 4 };
        assert!(Context::new(l.clone(), r.clone(), span, 8).is_ok());
        assert!(Context::new(l.clone(), r.clone(), span, 9).is_err());
        assert!(Context::new(r.clone(), l.clone(), TargetSpan { start: 1, length: 4 }, 7).is_err());
    }

    #[test]
    fn assemble_and_prior_input() {
        let w = parse_seq("60 __ 62 __ R 64 __ __").unwrap();
        let c = Context::from_window(&w, TargetSpan { start: 2, length: 4 }).unwrap();
        assert_eq!(c.assemble(&w[2..6]), w);
        assert_eq!(crate::tokens::format_seq(&c.prior_input()), "60 __ p p p p __ __");
        assert_eq!(c.assemble(&[]).len(), 8);
    }
}
