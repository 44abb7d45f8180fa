use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::attention::mask_bias;
use crate::span::TargetSpan;

/// Decoder self-attention mask over `K + 1` positions: the start symbol at
/// position 0 and token `k` (0-based) at position `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Vec<Vec<bool>>,
}

impl AttentionMask {
    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row][col]
    }

    pub fn allowed(&self, row: usize) -> Vec<usize> {
        (0..self.allow.len()).filter(|&c| self.allow[row][c]).collect()
    }

    pub fn len(&self) -> usize {
        self.allow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.is_empty()
    }

    pub fn to_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        mask_bias(&self.allow, dtype, device)
    }
}

/// Rows holding `s` or context tokens see every non-target position; rows
/// holding target tokens additionally see target positions up to their own.
pub fn build_decoder_mask(span: &TargetSpan, seq_len: usize) -> AttentionMask {
    let n = seq_len + 1;
    let is_target = |pos: usize| pos >= span.start + 1 && pos <= span.end();
    let allow = (0..n)
        .map(|row| {
            (0..n)
                .map(|col| !is_target(col) || (is_target(row) && col <= row))
                .collect()
        })
        .collect();
    AttentionMask { allow }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_example() {
        let m = build_decoder_mask(&TargetSpan { start: 1, length: 2 }, 4);
        assert_eq!(m.allowed(0), vec![0, 1, 4]);
        assert_eq!(m.allowed(1), vec![0, 1, 4]);
        assert_eq!(m.allowed(2), vec![0, 1, 2, 4]);
        assert_eq!(m.allowed(3), vec![0, 1, 2, 3, 4]);
        assert_eq!(m.allowed(4), vec![0, 1, 4]);
    }

    #[test]
    fn whole_window_target() {
        let m = build_decoder_mask(&TargetSpan { start: 0, length: 4 }, 4);
        assert_eq!(m.allowed(0), vec![0]);
        for row in 1..=4 {
            assert_eq!(m.allowed(row), (0..=row).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn rules_hold(k in 2usize..40, a in 0usize..40, b in 1usize..40) {
            let start = a % k;
            let length = 1 + b % (k - start);
            let span = TargetSpan { start, length };
            let m = build_decoder_mask(&span, k);
            let target = |p: usize| p > start && p <= start + length;
            for row in 0..=k {
                prop_assert!(!m.allowed(row).is_empty());
                for col in 0..=k {
                    if target(row) && target(col) && col > row {
                        prop_assert!(!m.allows(row, col));
                    }
                    if !target(row) && target(col) {
                        prop_assert!(!m.allows(row, col));
                    }
                    if !target(col) {
                        prop_assert!(m.allows(row, col));
                    }
                }
            }
        }
    }
}
