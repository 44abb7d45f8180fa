//! Synthetic corpus of scale and arpeggio figures over short chord loops.
//!
//! Each identity is one 12-bar melody: a one-bar figure re-rooted on every
//! chord of a four-bar progression. Transposition augmentation and windowing
//! then turn ~44 identities into roughly 2000 windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Note, QuantizedTrack, Source, BAR_STEPS};
use crate::error::Result;
use crate::tokens::{MAX_PITCH, MIN_PITCH};

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];

const PROGRESSIONS: [[usize; 4]; 4] = [[0, 3, 4, 0], [0, 5, 3, 4], [0, 4, 5, 3], [5, 3, 0, 4]];

/// (scale degree relative to the chord root, duration in steps); `None` is a rest.
type Figure = &'static [(Option<i32>, usize)];

const FIGURES: [Figure; 6] = [
    // eighth-note scale run
    &[(Some(0), 2), (Some(1), 2), (Some(2), 2), (Some(3), 2), (Some(4), 2), (Some(3), 2), (Some(2), 2), (Some(1), 2)],
    // quarter-note arpeggio
    &[(Some(0), 4), (Some(2), 4), (Some(4), 4), (Some(7), 4)],
    // eighth-note arpeggio
    &[(Some(0), 2), (Some(2), 2), (Some(4), 2), (Some(7), 2), (Some(4), 2), (Some(2), 2), (Some(0), 2), (Some(2), 2)],
    // arpeggio with a held top and a rest
    &[(Some(0), 2), (Some(2), 2), (Some(4), 4), (Some(7), 4), (None, 4)],
    // descending quarter-note scale
    &[(Some(4), 4), (Some(3), 4), (Some(2), 4), (Some(1), 4)],
    // dotted rhythm
    &[(Some(0), 3), (Some(2), 1), (Some(4), 3), (Some(2), 1), (Some(0), 4), (None, 4)],
];

pub const TOY_IDENTITIES: usize = 44;
pub const TOY_BARS: usize = 12;

fn degree_to_semitone(degree: i32) -> i32 {
    let octave = degree.div_euclid(7);
    12 * octave + MAJOR[degree.rem_euclid(7) as usize]
}

/// One synthetic melody, placed at a random legal register.
pub fn toy_track<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> QuantizedTrack {
    let figure = FIGURES[rng.random_range(0..FIGURES.len())];
    let progression = PROGRESSIONS[rng.random_range(0..PROGRESSIONS.len())];
    let mut rel = Vec::new();
    for bar in 0..bars {
        let chord = progression[bar % progression.len()] as i32;
        let mut at = bar * BAR_STEPS;
        for &(degree, dur) in figure {
            if let Some(d) = degree {
                rel.push((at, dur, degree_to_semitone(chord + d)));
            }
            at += dur;
        }
    }
    let lo = rel.iter().map(|r| r.2).min().unwrap_or(0);
    let hi = rel.iter().map(|r| r.2).max().unwrap_or(0);
    let room = (MAX_PITCH as i32 - MIN_PITCH as i32) - (hi - lo);
    let base = MIN_PITCH as i32 - lo + rng.random_range(0..=room.max(0));
    let notes = rel
        .into_iter()
        .map(|(start, duration, semis)| Note { start, duration, pitch: (base + semis) as u8 })
        .collect();
    QuantizedTrack::new(bars * BAR_STEPS, notes).expect("figures are monophonic")
}

pub fn toy_sources(identities: usize, bars: usize, seed: u64) -> Vec<(String, Source)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..identities)
        .map(|i| (format!("toy{i:03}"), Source::Track(toy_track(&mut rng, bars))))
        .collect()
}

pub fn toy_corpus(seed: u64) -> Result<Corpus> {
    Corpus::build(toy_sources(TOY_IDENTITIES, TOY_BARS, seed), seed)
}
