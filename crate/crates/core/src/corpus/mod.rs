//! Monophonic track ingestion, tokenization, windowing, augmentation and the
//! identity-level five-way split.

pub mod midi;
pub mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};
use crate::span::{SpanGrid, TargetSpan};
use crate::tokens::{self, Token, TokenSeq, MAX_PITCH, MIN_PITCH};

pub const STEPS_PER_BEAT: usize = 4;
pub const BAR_STEPS: usize = 16;
pub const WINDOW_BARS: usize = 8;
pub const WINDOW_LEN: usize = BAR_STEPS * WINDOW_BARS;
/// Longest tolerated run of consecutive `"R"` steps inside a window.
pub const MAX_REST_RUN: usize = BAR_STEPS;
pub const MAX_TRANSPOSE: i32 = 11;

// ---------------------------------------------------------------------------
// Tracks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub start: usize,
    pub duration: usize,
    pub pitch: u8,
}

impl Note {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }
}

/// A monophonic note list on the 16th-note grid. Steps not covered by a note are rests.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantizedTrack {
    len: usize,
    notes: Vec<Note>,
}

impl QuantizedTrack {
    pub fn new(len: usize, notes: Vec<Note>) -> Result<Self> {
        let mut prev_end = 0;
        for n in &notes {
            if n.duration == 0 {
                return Err(ClsmError::InvalidInput(format!("zero-length note at {}", n.start)));
            }
            if n.start < prev_end {
                return Err(ClsmError::InvalidInput(format!(
                    "overlapping notes at step {} (track is not monophonic)",
                    n.start
                )));
            }
            prev_end = n.end();
        }
        if prev_end > len {
            return Err(ClsmError::InvalidInput(format!(
                "notes extend to step {prev_end} past track length {len}"
            )));
        }
        Ok(Self { len, notes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn pitch_range(&self) -> Option<(u8, u8)> {
        let lo = self.notes.iter().map(|n| n.pitch).min()?;
        let hi = self.notes.iter().map(|n| n.pitch).max()?;
        Some((lo, hi))
    }

    pub fn in_pitch_range(&self) -> bool {
        self.pitch_range()
            .is_none_or(|(lo, hi)| lo >= MIN_PITCH && hi <= MAX_PITCH)
    }

    fn transposed(&self, semitones: i32) -> Self {
        let notes = self
            .notes
            .iter()
            .map(|n| Note { pitch: (n.pitch as i32 + semitones) as u8, ..*n })
            .collect();
        Self { len: self.len, notes }
    }
}

/// One token per step: onset -> pitch, continuation -> `"__"`, silence -> `"R"`.
pub fn encode_track(track: &QuantizedTrack) -> Result<TokenSeq> {
    let mut out = vec![Token::REST; track.len];
    for note in &track.notes {
        out[note.start] = Token::pitch(note.pitch)?;
        for slot in &mut out[note.start + 1..note.end()] {
            *slot = Token::HOLD;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_track`]. A `"__"` with no sounding note (window start,
/// or after a rest) is read as silence.
pub fn decode_tokens(tokens: &[Token]) -> Result<QuantizedTrack> {
    let mut notes: Vec<Note> = Vec::new();
    let mut sounding = false;
    for (step, &tok) in tokens.iter().enumerate() {
        if let Some(pitch) = tok.as_pitch() {
            notes.push(Note { start: step, duration: 1, pitch });
            sounding = true;
        } else if tok == Token::HOLD {
            if sounding {
                notes.last_mut().expect("sounding implies a note").duration += 1;
            }
        } else if tok == Token::REST {
            sounding = false;
        } else {
            return Err(ClsmError::InvalidToken(tok.symbol()));
        }
    }
    QuantizedTrack::new(tokens.len(), notes)
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

pub fn max_rest_run(tokens: &[Token]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &t in tokens {
        if t == Token::REST {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Eight bars of data tokens with at most one bar of consecutive rests.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TokenSeq", into = "TokenSeq")]
pub struct Window(TokenSeq);

impl Window {
    pub fn new(tokens: TokenSeq) -> Result<Self> {
        if tokens.len() != WINDOW_LEN {
            return Err(ClsmError::InvalidInput(format!(
                "window has {} tokens, expected {WINDOW_LEN}",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| !t.is_data()) {
            return Err(ClsmError::InvalidToken(t.symbol()));
        }
        let run = max_rest_run(&tokens);
        if run > MAX_REST_RUN {
            return Err(ClsmError::InvalidInput(format!(
                "window has {run} consecutive rests"
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn into_tokens(self) -> TokenSeq {
        self.0
    }
}

impl TryFrom<TokenSeq> for Window {
    type Error = ClsmError;
    fn try_from(tokens: TokenSeq) -> Result<Self> {
        Window::new(tokens)
    }
}

impl From<Window> for TokenSeq {
    fn from(w: Window) -> TokenSeq {
        w.0
    }
}

impl AsRef<[Token]> for Window {
    fn as_ref(&self) -> &[Token] {
        &self.0
    }
}

/// 8-bar windows at a stride of one bar, dropping those with more than a bar of rests.
pub fn make_windows(track_tokens: &[Token]) -> Vec<Window> {
    if track_tokens.len() < WINDOW_LEN {
        return Vec::new();
    }
    (0..=(track_tokens.len() - WINDOW_LEN) / BAR_STEPS)
        .map(|i| &track_tokens[i * BAR_STEPS..i * BAR_STEPS + WINDOW_LEN])
        .filter(|w| max_rest_run(w) <= MAX_REST_RUN)
        .filter_map(|w| Window::new(w.to_vec()).ok())
        .collect()
}

/// Every transposition within +-11 semitones that keeps the track in [55, 84].
/// Shift 0 is always first; an empty track yields only itself.
pub fn augment_transpose(track: &QuantizedTrack) -> Vec<QuantizedTrack> {
    let Some((lo, hi)) = track.pitch_range() else {
        return vec![track.clone()];
    };
    let mut shifts = vec![0];
    shifts.extend((-MAX_TRANSPOSE..=MAX_TRANSPOSE).filter(|&s| s != 0));
    shifts
        .into_iter()
        .filter(|&s| lo as i32 + s >= MIN_PITCH as i32 && hi as i32 + s <= MAX_PITCH as i32)
        .map(|s| track.transposed(s))
        .collect()
}

pub fn sample_target_span<R: Rng + ?Sized>(rng: &mut R) -> TargetSpan {
    SpanGrid::default().sample(rng)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train1,
    Val1,
    Train2,
    Val2,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train1, Split::Val1, Split::Train2, Split::Val2, Split::Test];
    /// Identity-level proportions 11:1:6:1:1.
    pub const RATIO: [usize; 5] = [11, 1, 6, 1, 1];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train1 => "train1",
            Split::Val1 => "val1",
            Split::Train2 => "train2",
            Split::Val2 => "val2",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = ClsmError;
    fn from_str(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ClsmError::InvalidInput(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train1: Vec<String>,
    pub val1: Vec<String>,
    pub train2: Vec<String>,
    pub val2: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train1 => &self.train1,
            Split::Val1 => &self.val1,
            Split::Train2 => &self.train2,
            Split::Val2 => &self.val2,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train1 => &mut self.train1,
            Split::Val1 => &mut self.val1,
            Split::Train2 => &mut self.train2,
            Split::Val2 => &mut self.val2,
            Split::Test => &mut self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 5] {
        Split::ALL.map(|s| self.get(s).len())
    }

    pub fn split_of(&self, identity: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.get(s).iter().any(|i| i == identity))
    }
}

/// Deterministic identity-level split. Every split but train-1 receives
/// `max(1, floor(n * r / 20))` identities; the remainder goes to train-1.
pub fn split_corpus(identities: &[String], seed: u64) -> Result<CorpusSplit> {
    let unique: BTreeSet<&String> = identities.iter().collect();
    let n = unique.len();
    if n < Split::ALL.len() {
        return Err(ClsmError::InsufficientData(format!(
            "{n} identities cannot fill {} splits",
            Split::ALL.len()
        )));
    }
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total: usize = Split::RATIO.iter().sum();
    let mut sizes = Split::RATIO.map(|r| ((n * r) / total).max(1));
    sizes[0] = n - sizes[1..].iter().sum::<usize>();

    let mut out = CorpusSplit::default();
    let mut it = ids.into_iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        out.get_mut(split).extend(it.by_ref().take(size));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus + manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub split: Split,
    pub identity: String,
    #[serde(with = "token_text")]
    pub tokens: Window,
}

mod token_text {
    use super::Window;
    use crate::tokens;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &Window, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&tokens::format_seq(w.tokens()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Window, D::Error> {
        let text = String::deserialize(d)?;
        let seq = tokens::parse_seq(&text).map_err(serde::de::Error::custom)?;
        Window::new(seq).map_err(serde::de::Error::custom)
    }
}

/// Source material for one song identity.
#[derive(Clone, Debug)]
pub enum Source {
    Track(QuantizedTrack),
    /// Pre-windowed token text; bypasses augmentation and windowing.
    Windows(Vec<TokenSeq>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<WindowRecord>,
}

impl Corpus {
    /// Split identities, then augment, encode and window every source.
    pub fn build(sources: Vec<(String, Source)>, seed: u64) -> Result<Self> {
        let ids: Vec<String> = sources.iter().map(|(id, _)| id.clone()).collect();
        let split = split_corpus(&ids, seed)?;
        let mut records = Vec::new();
        for (identity, source) in sources {
            let which = split.split_of(&identity).expect("every identity is assigned");
            let windows = match source {
                Source::Track(track) => {
                    let mut ws = Vec::new();
                    for t in augment_transpose(&track) {
                        ws.extend(make_windows(&encode_track(&t)?));
                    }
                    ws
                }
                Source::Windows(lines) => lines
                    .into_iter()
                    .filter(|l| max_rest_run(l) <= MAX_REST_RUN)
                    .map(Window::new)
                    .collect::<Result<Vec<_>>>()?,
            };
            records.extend(windows.into_iter().map(|tokens| WindowRecord {
                split: which,
                identity: identity.clone(),
                tokens,
            }));
        }
        Ok(Self { records })
    }

    pub fn windows(&self, split: Split) -> Vec<Window> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.tokens.clone())
            .collect()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.identity.as_str())
            .collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let file = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }

    pub fn stats(&self) -> CorpusStats {
        let mut per_split = BTreeMap::new();
        for split in Split::ALL {
            per_split.insert(
                split,
                SplitStats {
                    identities: self.identities(split).len(),
                    windows: self.records.iter().filter(|r| r.split == split).count(),
                },
            );
        }
        let mut histogram = vec![0usize; tokens::DATA_VOCAB];
        for r in &self.records {
            for t in r.tokens.tokens() {
                histogram[t.index()] += 1;
            }
        }
        CorpusStats { per_split, token_histogram: histogram }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitStats {
    pub identities: usize,
    pub windows: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusStats {
    pub per_split: BTreeMap<Split, SplitStats>,
    pub token_histogram: Vec<usize>,
}

/// Token text: one window per line, whitespace-separated symbols.
pub fn read_token_text(text: &str) -> Result<Vec<TokenSeq>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(tokens::parse_seq)
        .collect()
}

pub fn write_token_text<'a>(out: &mut impl Write, seqs: impl IntoIterator<Item = &'a [Token]>) -> Result<()> {
    for s in seqs {
        writeln!(out, "{}", tokens::format_seq(s))?;
    }
    Ok(())
}
