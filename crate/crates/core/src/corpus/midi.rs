//! Standard MIDI File front-end: one candidate track per (track, channel)
//! part, quantized to 16th notes and filtered.

use std::collections::BTreeMap;

use midly::{MetaMessage, MidiMessage, Smf, Timing, TrackEventKind};
use serde::Serialize;

use super::{Note, QuantizedTrack, STEPS_PER_BEAT};
use crate::error::{ClsmError, Result};
use crate::tokens::{MAX_PITCH, MIN_PITCH};

const DRUM_CHANNEL: u8 = 9;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub files: usize,
    pub not_four_four: usize,
    pub parts: usize,
    pub accepted: usize,
    pub drum: usize,
    pub bass: usize,
    pub non_monophonic: usize,
    pub out_of_range: usize,
    pub empty: usize,
}

/// Maps absolute ticks to beats.
enum BeatClock {
    Metrical { ticks_per_beat: f64 },
    /// Absolute-time ticks; beats come from integrating the tempo map.
    Timecode { ticks_per_second: f64, tempo: Vec<(u64, f64)> },
}

impl BeatClock {
    fn beats(&self, tick: u64) -> f64 {
        match self {
            BeatClock::Metrical { ticks_per_beat } => tick as f64 / ticks_per_beat,
            BeatClock::Timecode { ticks_per_second, tempo } => {
                let mut beats = 0.0;
                let mut at = 0u64;
                let mut us_per_beat = 500_000.0;
                for &(change, us) in tempo {
                    if change >= tick {
                        break;
                    }
                    beats += (change - at) as f64 / ticks_per_second / (us_per_beat / 1e6);
                    at = change;
                    us_per_beat = us;
                }
                beats + (tick - at) as f64 / ticks_per_second / (us_per_beat / 1e6)
            }
        }
    }
}

fn snap(beats: f64) -> usize {
    (beats * STEPS_PER_BEAT as f64).round().max(0.0) as usize
}

/// Parse an SMF and return the monophonic, non-bass, non-drum parts whose
/// pitches all lie in [55, 84]. Files with any time signature other than
/// 4/4 yield nothing.
pub fn tracks_from_smf(bytes: &[u8], stats: &mut IngestStats) -> Result<Vec<QuantizedTrack>> {
    let smf = Smf::parse(bytes).map_err(|e| ClsmError::Midi(e.to_string()))?;
    stats.files += 1;

    // (absolute tick, track index, event)
    let mut events = Vec::new();
    let mut tempo = Vec::new();
    for (ti, track) in smf.tracks.iter().enumerate() {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, denom_pow, _, _)) => {
                    if num != 4 || denom_pow != 2 {
                        stats.not_four_four += 1;
                        return Ok(Vec::new());
                    }
                }
                TrackEventKind::Meta(MetaMessage::Tempo(us)) => {
                    tempo.push((tick, us.as_int() as f64));
                }
                TrackEventKind::Midi { channel, message } => {
                    events.push((tick, ti, channel.as_int(), message));
                }
                _ => {}
            }
        }
    }
    tempo.sort_by_key(|&(t, _)| t);
    let clock = match smf.header.timing {
        Timing::Metrical(tpb) => BeatClock::Metrical { ticks_per_beat: tpb.as_int().max(1) as f64 },
        Timing::Timecode(fps, sub) => BeatClock::Timecode {
            ticks_per_second: fps.as_f32() as f64 * sub.max(1) as f64,
            tempo,
        },
    };
    events.sort_by_key(|&(tick, ti, _, _)| (tick, ti));

    // part -> completed (start_tick, end_tick, key)
    let mut parts: BTreeMap<(usize, u8), Vec<(u64, u64, u8)>> = BTreeMap::new();
    let mut open: BTreeMap<(usize, u8, u8), Vec<u64>> = BTreeMap::new();
    for (tick, ti, ch, msg) in events {
        let (key, on) = match msg {
            MidiMessage::NoteOn { key, vel } => (key.as_int(), vel.as_int() > 0),
            MidiMessage::NoteOff { key, .. } => (key.as_int(), false),
            _ => continue,
        };
        parts.entry((ti, ch)).or_default();
        if on {
            open.entry((ti, ch, key)).or_default().push(tick);
        } else if let Some(starts) = open.get_mut(&(ti, ch, key)) {
            if !starts.is_empty() {
                let start = starts.remove(0);
                parts.get_mut(&(ti, ch)).unwrap().push((start, tick, key));
            }
        }
    }

    let mut out = Vec::new();
    for ((_, ch), raw) in parts {
        stats.parts += 1;
        if ch == DRUM_CHANNEL {
            stats.drum += 1;
            continue;
        }
        let mut notes: Vec<Note> = raw
            .iter()
            .filter_map(|&(s, e, key)| {
                let start = snap(clock.beats(s));
                let end = snap(clock.beats(e));
                (end > start).then_some(Note { start, duration: end - start, pitch: key })
            })
            .collect();
        if notes.is_empty() {
            stats.empty += 1;
            continue;
        }
        notes.sort_by_key(|n| (n.start, n.pitch));
        let mean = notes.iter().map(|n| n.pitch as f64).sum::<f64>() / notes.len() as f64;
        if mean < MIN_PITCH as f64 {
            stats.bass += 1;
            continue;
        }
        if notes.iter().any(|n| n.pitch < MIN_PITCH || n.pitch > MAX_PITCH) {
            stats.out_of_range += 1;
            continue;
        }
        let len = notes.iter().map(Note::end).max().unwrap_or(0);
        match QuantizedTrack::new(len, notes) {
            Ok(t) => {
                stats.accepted += 1;
                out.push(t);
            }
            Err(_) => stats.non_monophonic += 1,
        }
    }
    Ok(out)
}
