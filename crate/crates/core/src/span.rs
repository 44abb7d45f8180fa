use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};

/// Bar-aligned layout of the target spans a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanGrid {
    /// Window length in steps.
    pub window: usize,
    /// Steps per bar; spans start and end on bar lines.
    pub bar: usize,
    /// Longest target in bars.
    pub max_bars: usize,
}

impl Default for SpanGrid {
    fn default() -> Self {
        Self { window: 128, bar: 16, max_bars: 4 }
    }
}

impl SpanGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bar == 0 || self.max_bars == 0 || self.window % self.bar != 0 {
            return Err(ClsmError::InvalidConfig(format!(
                "window {} must be a positive multiple of bar {}",
                self.window, self.bar
            )));
        }
        if self.bar * self.max_bars > self.window {
            return Err(ClsmError::InvalidConfig(
                "longest span exceeds the window".into(),
            ));
        }
        Ok(())
    }

    pub fn lengths(&self) -> Vec<usize> {
        (1..=self.max_bars).map(|b| b * self.bar).collect()
    }

    pub fn starts(&self, length: usize) -> Vec<usize> {
        (0..=(self.window - length) / self.bar)
            .map(|i| i * self.bar)
            .collect()
    }

    /// Every span of the grid, length-major.
    pub fn all_spans(&self) -> Vec<TargetSpan> {
        self.lengths()
            .into_iter()
            .flat_map(|len| {
                self.starts(len)
                    .into_iter()
                    .map(move |start| TargetSpan { start, length: len })
            })
            .collect()
    }

    /// Length uniform over the grid lengths, then start uniform over its bar offsets.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TargetSpan {
        let lengths = self.lengths();
        let length = lengths[rng.random_range(0..lengths.len())];
        let starts = self.starts(length);
        let start = starts[rng.random_range(0..starts.len())];
        TargetSpan { start, length }
    }

    /// A span that ends the window (no right context).
    pub fn sample_left_only<R: Rng + ?Sized>(&self, rng: &mut R) -> TargetSpan {
        let lengths = self.lengths();
        let length = lengths[rng.random_range(0..lengths.len())];
        TargetSpan { start: self.window - length, length }
    }
}

/// Contiguous target positions `start..start + length` inside a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetSpan {
    pub start: usize,
    pub length: usize,
}

impl TargetSpan {
    /// A span on the default 8-bar grid.
    pub fn new(start: usize, length: usize) -> Result<Self> {
        Self::on_grid(start, length, &SpanGrid::default())
    }

    pub fn on_grid(start: usize, length: usize, grid: &SpanGrid) -> Result<Self> {
        if length == 0 || length % grid.bar != 0 || length > grid.bar * grid.max_bars {
            return Err(ClsmError::InvalidSpan(format!(
                "length {length} must be 1..={} bars of {} steps",
                grid.max_bars, grid.bar
            )));
        }
        if start % grid.bar != 0 {
            return Err(ClsmError::InvalidSpan(format!(
                "start {start} is not on a bar line ({} steps)",
                grid.bar
            )));
        }
        if start + length > grid.window {
            return Err(ClsmError::InvalidSpan(format!(
                "span {start}..{} exceeds window of {}",
                start + length,
                grid.window
            )));
        }
        Ok(Self { start, length })
    }

    /// Bounds check only; used where a model of window `window` accepts any contiguous span.
    pub fn check_within(&self, window: usize) -> Result<()> {
        if self.length == 0 || self.start + self.length > window {
            return Err(ClsmError::InvalidSpan(format!(
                "span {}..{} does not fit a window of {window}",
                self.start,
                self.end()
            )));
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.start..self.end()).contains(&position)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn invariants_on_default_grid() {
        assert!(TargetSpan::new(0, 64).is_ok());
        assert!(TargetSpan::new(112, 16).is_ok());
        assert!(TargetSpan::new(3, 16).is_err());
        assert!(TargetSpan::new(0, 80).is_err());
        assert!(TargetSpan::new(0, 0).is_err());
        assert!(TargetSpan::new(96, 48).is_err());
    }

    #[test]
    fn start_counts() {
        let grid = SpanGrid::default();
        assert_eq!(grid.starts(64), vec![0, 16, 32, 48, 64]);
        assert_eq!(grid.starts(16).len(), (128 - 16) / 16 + 1);
        assert_eq!(grid.all_spans().len(), 8 + 7 + 6 + 5);
    }

    #[test]
    fn sampled_spans_are_valid() {
        let grid = SpanGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = grid.sample(&mut rng);
            TargetSpan::new(s.start, s.length).unwrap();
            let l = grid.sample_left_only(&mut rng);
            assert_eq!(l.end(), 128);
        }
    }
}
