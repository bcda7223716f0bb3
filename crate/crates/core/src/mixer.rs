//! Timeline placement, resampling, summing and limiting of accepted stems, plus the local
//! post-processing actions used by refinement nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioArtifact, AudioError, DEFAULT_SAMPLE_RATE};
use crate::plan::AudioEvent;

pub const SUPPORTED_RATES: [u32; 5] = [16_000, 22_050, 24_000, 44_100, 48_000];
/// Peak ceiling of the uniform-scale limiter.
pub const LIMITER_CEILING: f64 = 0.99;
pub const DEFAULT_SILENCE_DB: f64 = -40.0;
pub const DEFAULT_SILENCE_WINDOW_MS: f64 = 10.0;
/// Trimming never shortens an artifact below this many seconds.
pub const MIN_KEEP_SECONDS: f64 = 0.1;
pub const GAIN_DB_RANGE: (f64, f64) = (-24.0, 12.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("parameter `{param}` = {value} out of range: {reason}")]
    ParamOutOfRange {
        param: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid stem for event {event_id}: {reason}")]
    InvalidStem { event_id: usize, reason: String },
    #[error("mixdown needs at least one stem")]
    NoStems,
    #[error("action `{0}` must run on an external tool")]
    NotLocal(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn out_of_range(param: &'static str, value: f64, reason: &'static str) -> MixError {
    MixError::ParamOutOfRange {
        param,
        value,
        reason,
    }
}

/// One event's accepted audio placed on the timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub event_id: usize,
    pub artifact: AudioArtifact,
    pub start_time: f64,
    pub gain: f64,
}

impl Stem {
    pub fn new(event_id: usize, artifact: AudioArtifact, start_time: f64, gain: f64) -> Result<Self, MixError> {
        if !(gain > 0.0 && gain <= 2.0) {
            return Err(MixError::InvalidStem {
                event_id,
                reason: format!("gain {gain} outside (0, 2]"),
            });
        }
        if !(start_time >= 0.0 && start_time.is_finite()) {
            return Err(MixError::InvalidStem {
                event_id,
                reason: format!("start_time {start_time} must be >= 0"),
            });
        }
        Ok(Stem {
            event_id,
            artifact,
            start_time,
            gain,
        })
    }

    /// Places `artifact` at the event's start with the event volume, truncated at the event end.
    pub fn for_event(event_id: usize, event: &AudioEvent, artifact: AudioArtifact) -> Result<Self, MixError> {
        let span = (event.duration() * artifact.sample_rate() as f64).round() as usize;
        let artifact = if artifact.frames() > span {
            artifact.slice_frames(0, span)
        } else {
            artifact
        };
        Stem::new(event_id, artifact, event.start_time, event.volume)
    }
}

/// A refinement step applied to a parent node's artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostProcessAction {
    TrimLeadingSilence {
        threshold_db: f64,
        min_window_ms: f64,
    },
    /// Either a fixed `gain_db`, or a gain toward `target_peak` capped at `max_gain_db`.
    ApplyGain {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gain_db: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_peak: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_gain_db: Option<f64>,
    },
    Fade {
        in_ms: f64,
        out_ms: f64,
    },
    External {
        tool_id: String,
        action: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
}

impl PostProcessAction {
    pub fn trim_default() -> Self {
        PostProcessAction::TrimLeadingSilence {
            threshold_db: DEFAULT_SILENCE_DB,
            min_window_ms: DEFAULT_SILENCE_WINDOW_MS,
        }
    }

    pub fn gain_db(gain_db: f64) -> Self {
        PostProcessAction::ApplyGain {
            gain_db: Some(gain_db),
            target_peak: None,
            max_gain_db: None,
        }
    }

    pub fn gain_toward_peak(target_peak: f64, max_gain_db: f64) -> Self {
        PostProcessAction::ApplyGain {
            gain_db: None,
            target_peak: Some(target_peak),
            max_gain_db: Some(max_gain_db),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            PostProcessAction::TrimLeadingSilence { .. } => "trim_leading_silence",
            PostProcessAction::ApplyGain { .. } => "apply_gain",
            PostProcessAction::Fade { .. } => "fade",
            PostProcessAction::External { action, .. } => action,
        }
    }

    /// Wire parameters for the tool `/v1/process` endpoint.
    pub fn wire_params(&self) -> BTreeMap<String, f64> {
        let mut p = BTreeMap::new();
        match self {
            PostProcessAction::TrimLeadingSilence {
                threshold_db,
                min_window_ms,
            } => {
                p.insert("threshold_db".into(), *threshold_db);
                p.insert("min_window_ms".into(), *min_window_ms);
            }
            PostProcessAction::ApplyGain {
                gain_db,
                target_peak,
                max_gain_db,
            } => {
                for (k, v) in [("gain_db", gain_db), ("target_peak", target_peak), ("max_gain_db", max_gain_db)] {
                    if let Some(v) = v {
                        p.insert(k.into(), *v);
                    }
                }
            }
            PostProcessAction::Fade { in_ms, out_ms } => {
                p.insert("in_ms".into(), *in_ms);
                p.insert("out_ms".into(), *out_ms);
            }
            PostProcessAction::External { params, .. } => p.extend(params.clone()),
        }
        p
    }

    /// Rebuilds a local action from its wire name and parameters.
    pub fn from_wire(action: &str, params: &BTreeMap<String, f64>) -> Option<Self> {
        let get = |k: &str| params.get(k).copied();
        match action {
            "trim_leading_silence" => Some(PostProcessAction::TrimLeadingSilence {
                threshold_db: get("threshold_db").unwrap_or(DEFAULT_SILENCE_DB),
                min_window_ms: get("min_window_ms").unwrap_or(DEFAULT_SILENCE_WINDOW_MS),
            }),
            "apply_gain" => Some(PostProcessAction::ApplyGain {
                gain_db: get("gain_db"),
                target_peak: get("target_peak"),
                max_gain_db: get("max_gain_db"),
            }),
            "fade" => Some(PostProcessAction::Fade {
                in_ms: get("in_ms").unwrap_or(0.0),
                out_ms: get("out_ms").unwrap_or(0.0),
            }),
            _ => None,
        }
    }
}

/// Runs a local action. External actions are rejected with [`MixError::NotLocal`].
pub fn apply_local_action(artifact: &AudioArtifact, action: &PostProcessAction) -> Result<AudioArtifact, MixError> {
    match action {
        PostProcessAction::TrimLeadingSilence {
            threshold_db,
            min_window_ms,
        } => trim_leading_silence(artifact, *threshold_db, *min_window_ms),
        PostProcessAction::ApplyGain {
            gain_db,
            target_peak,
            max_gain_db,
        } => {
            let db = match (gain_db, target_peak) {
                (Some(db), _) => *db,
                (None, Some(target)) => gain_toward_peak_db(artifact.peak() as f64, *target, *max_gain_db)?,
                (None, None) => return Err(out_of_range("gain_db", f64::NAN, "gain_db or target_peak required")),
            };
            apply_gain(artifact, db)
        }
        PostProcessAction::Fade { in_ms, out_ms } => fade(artifact, *in_ms, *out_ms),
        PostProcessAction::External { action, .. } => Err(MixError::NotLocal(action.clone())),
    }
}

fn gain_toward_peak_db(peak: f64, target: f64, max_gain_db: Option<f64>) -> Result<f64, MixError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(out_of_range("target_peak", target, "must be in (0, 1]"));
    }
    let (lo, hi) = GAIN_DB_RANGE;
    let cap = max_gain_db.unwrap_or(hi).min(hi);
    if peak <= 0.0 {
        return Ok(cap.max(lo));
    }
    Ok((20.0 * (target / peak).log10()).clamp(lo, cap.max(lo)))
}

pub fn check_rate(rate: u32) -> Result<(), MixError> {
    if SUPPORTED_RATES.contains(&rate) {
        Ok(())
    } else {
        Err(MixError::UnsupportedRate(rate))
    }
}

/// Linear-interpolation resampling, per channel.
pub fn resample(artifact: &AudioArtifact, target_rate: u32) -> Result<AudioArtifact, MixError> {
    check_rate(target_rate)?;
    let src_rate = artifact.sample_rate();
    if src_rate == target_rate {
        return Ok(artifact.clone());
    }
    let ch = artifact.channels() as usize;
    let frames_in = artifact.frames();
    let frames_out = (frames_in as f64 * target_rate as f64 / src_rate as f64).round() as usize;
    let step = src_rate as f64 / target_rate as f64;
    let input = artifact.samples();
    let mut out = Vec::with_capacity(frames_out * ch);
    for j in 0..frames_out {
        let pos = j as f64 * step;
        let i0 = (pos.floor() as usize).min(frames_in.saturating_sub(1));
        let i1 = (i0 + 1).min(frames_in - 1);
        let frac = (pos - i0 as f64).clamp(0.0, 1.0);
        for c in 0..ch {
            let a = input[i0 * ch + c] as f64;
            let b = input[i1 * ch + c] as f64;
            out.push((a + (b - a) * frac) as f32);
        }
    }
    Ok(AudioArtifact::new(out, target_rate, artifact.channels())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixOptions {
    pub target_rate: u32,
    /// Disabling the limiter is meant for linearity checks.
    pub limiter: bool,
}

impl Default for MixOptions {
    fn default() -> Self {
        MixOptions {
            target_rate: DEFAULT_SAMPLE_RATE,
            limiter: true,
        }
    }
}

/// Sums mono-converted, resampled, offset and gained stems. Summation order is by `event_id`.
pub fn mixdown(stems: &[Stem], options: MixOptions) -> Result<AudioArtifact, MixError> {
    if stems.is_empty() {
        return Err(MixError::NoStems);
    }
    let rate = options.target_rate;
    check_rate(rate)?;
    let mut ordered: Vec<&Stem> = stems.iter().collect();
    ordered.sort_by_key(|s| s.event_id);

    let mut placed = Vec::with_capacity(ordered.len());
    let mut length = 0usize;
    for stem in ordered {
        let mono = resample(&stem.artifact.to_mono(), rate)?;
        let offset = (stem.start_time * rate as f64).round() as usize;
        length = length.max(offset + mono.frames());
        placed.push((offset, mono, stem.gain));
    }

    let mut acc = vec![0.0f64; length];
    for (offset, mono, gain) in &placed {
        for (slot, &x) in acc[*offset..].iter_mut().zip(mono.samples()) {
            *slot += x as f64 * gain;
        }
    }
    if options.limiter {
        let peak = acc.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak > LIMITER_CEILING {
            let scale = LIMITER_CEILING / peak;
            acc.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(AudioArtifact::mono(acc.into_iter().map(|x| x as f32).collect(), rate)?)
}

/// Drops the leading span whose `min_window_ms` windows all have RMS below `threshold_db`.
pub fn trim_leading_silence(
    artifact: &AudioArtifact,
    threshold_db: f64,
    min_window_ms: f64,
) -> Result<AudioArtifact, MixError> {
    if threshold_db.is_nan() || threshold_db >= 0.0 {
        return Err(out_of_range("threshold_db", threshold_db, "must be negative"));
    }
    if !(min_window_ms > 0.0 && min_window_ms.is_finite()) {
        return Err(out_of_range("min_window_ms", min_window_ms, "must be positive"));
    }
    let rate = artifact.sample_rate() as f64;
    let frames = artifact.frames();
    let ch = artifact.channels() as usize;
    let window = ((rate * min_window_ms / 1000.0).round() as usize).max(1);
    let threshold = 10f64.powf(threshold_db / 20.0);
    let samples = artifact.samples();

    let mut cut = frames;
    for start in (0..frames).step_by(window) {
        let end = (start + window).min(frames);
        let chunk = &samples[start * ch..end * ch];
        let rms = (chunk.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / chunk.len() as f64).sqrt();
        if rms >= threshold {
            cut = start;
            break;
        }
    }
    let keep = ((MIN_KEEP_SECONDS * rate).round() as usize).min(frames);
    let cut = cut.min(frames - keep);
    Ok(artifact.slice_frames(cut, frames))
}

/// Multiplies by `10^(gain_db / 20)`.
pub fn apply_gain(artifact: &AudioArtifact, gain_db: f64) -> Result<AudioArtifact, MixError> {
    let (lo, hi) = GAIN_DB_RANGE;
    if !(gain_db >= lo && gain_db <= hi) {
        return Err(out_of_range("gain_db", gain_db, "must be within [-24, +12] dB"));
    }
    if gain_db == 0.0 {
        return Ok(artifact.clone());
    }
    let factor = 10f64.powf(gain_db / 20.0);
    let out = artifact.map_frames(|_, x| (x as f64 * factor) as f32);
    Ok(AudioArtifact::new(out.into_samples(), artifact.sample_rate(), artifact.channels())?)
}

/// Linear fade-in over the head and fade-out over the tail.
pub fn fade(artifact: &AudioArtifact, in_ms: f64, out_ms: f64) -> Result<AudioArtifact, MixError> {
    if !(in_ms >= 0.0 && in_ms.is_finite()) {
        return Err(out_of_range("in_ms", in_ms, "must be >= 0"));
    }
    if !(out_ms >= 0.0 && out_ms.is_finite()) {
        return Err(out_of_range("out_ms", out_ms, "must be >= 0"));
    }
    let duration_ms = artifact.duration_s() * 1000.0;
    if in_ms + out_ms > duration_ms + 1e-9 {
        return Err(out_of_range("in_ms", in_ms + out_ms, "fades exceed the artifact duration"));
    }
    let rate = artifact.sample_rate() as f64;
    let frames = artifact.frames();
    let n_in = (in_ms * rate / 1000.0).round() as usize;
    let n_out = ((out_ms * rate / 1000.0).round() as usize).min(frames);
    if n_in == 0 && n_out == 0 {
        return Ok(artifact.clone());
    }
    let out = artifact.map_frames(|i, x| {
        let mut g = 1.0f64;
        if i < n_in {
            g *= i as f64 / n_in as f64;
        }
        if i >= frames - n_out {
            g *= (frames - 1 - i) as f64 / n_out as f64;
        }
        (x as f64 * g) as f32
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, seconds: f64, rate: u32) -> AudioArtifact {
        let n = (seconds * rate as f64).round() as usize;
        let s = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioArtifact::mono(s, rate).unwrap()
    }

    fn constant(value: f32, frames: usize, rate: u32) -> AudioArtifact {
        AudioArtifact::mono(vec![value; frames], rate).unwrap()
    }

    #[test]
    fn resample_identity_and_constant() {
        let a = sine(440.0, 0.3, 0.25, 48_000);
        assert_eq!(resample(&a, 48_000).unwrap(), a);

        let c = resample(&constant(0.5, 24_000, 24_000), 48_000).unwrap();
        assert_eq!(c.frames(), 48_000);
        assert!(c.samples().iter().all(|&x| (x - 0.5).abs() <= 1e-6));
    }

    #[test]
    fn resample_preserves_duration() {
        let a = constant(0.1, 44_100, 44_100);
        let r = resample(&a, 48_000).unwrap();
        assert!((r.frames() as i64 - 48_000).abs() <= 1);
        assert_eq!(resample(&a, 8_000), Err(MixError::UnsupportedRate(8_000)));
    }

    #[test]
    fn resample_interpolates_a_ramp_linearly() {
        let ramp: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        let a = AudioArtifact::mono(ramp, 24_000).unwrap();
        let r = resample(&a, 48_000).unwrap();
        // Odd output frames land halfway between input frames.
        for j in (1..190).step_by(2) {
            let expected = (j as f64 / 2.0) / 100.0;
            assert!((r.samples()[j] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn single_stem_mix_is_identity() {
        let a = sine(300.0, 0.5, 0.5, 48_000);
        let mix = mixdown(&[Stem::new(0, a.clone(), 0.0, 1.0).unwrap()], MixOptions::default()).unwrap();
        assert_eq!(mix, a);
        assert_eq!(crate::audio::encode_wav(&mix), crate::audio::encode_wav(&a));
    }

    #[test]
    fn overlapping_stems_sum_sample_wise() {
        let rate = 48_000;
        let a = sine(220.0, 0.3, 1.0, rate);
        let b = sine(330.0, 0.3, 1.0, rate);
        let stems = [Stem::new(1, b.clone(), 0.5, 1.0).unwrap(), Stem::new(0, a.clone(), 0.0, 1.0).unwrap()];
        let mix = mixdown(&stems, MixOptions::default()).unwrap();
        assert_eq!(mix.frames(), 72_000);
        assert!((mix.duration_s() - 1.5).abs() < 1e-12);
        // Brute force: walk the timeline and add whatever stem covers each frame.
        for (t, &y) in mix.samples().iter().enumerate() {
            let mut expected = 0.0f64;
            if t < 48_000 {
                expected += a.samples()[t] as f64;
            }
            if (24_000..72_000).contains(&t) {
                expected += b.samples()[t - 24_000] as f64;
            }
            assert!((y as f64 - expected).abs() <= 1e-6, "frame {t}");
        }
    }

    #[test]
    fn limiter_scales_uniformly_to_ceiling() {
        let a = sine(100.0, 0.6, 0.2, 48_000);
        let peak_in = a.peak() as f64;
        let mix = mixdown(&[Stem::new(0, a.clone(), 0.0, 2.0).unwrap()], MixOptions::default()).unwrap();
        assert!((mix.peak() as f64 - 0.99).abs() <= 1e-6);
        let scale = 0.99 / (2.0 * peak_in);
        for (y, x) in mix.samples().iter().zip(a.samples()) {
            assert!((*y as f64 - *x as f64 * 2.0 * scale).abs() <= 1e-6);
        }
    }

    #[test]
    fn stems_are_converted_to_mono_and_resampled() {
        let stereo = AudioArtifact::new([0.2, 0.4].repeat(24_000), 24_000, 2).unwrap();
        let mix = mixdown(&[Stem::new(0, stereo, 0.25, 0.5).unwrap()], MixOptions::default()).unwrap();
        assert_eq!(mix.frames(), 12_000 + 48_000);
        assert!(mix.samples()[..12_000].iter().all(|&x| x == 0.0));
        assert!(mix.samples()[12_000..].iter().all(|&x| (x - 0.15).abs() < 1e-6));
    }

    #[test]
    fn mixdown_rejects_empty() {
        assert_eq!(mixdown(&[], MixOptions::default()), Err(MixError::NoStems));
    }

    #[test]
    fn stem_for_event_truncates_long_audio() {
        let event = AudioEvent {
            audio_type: crate::plan::AudioType::SoundEffect,
            object: "fireworks".into(),
            start_time: 2.0,
            end_time: 6.5,
            description: "bangs".into(),
            volume: 0.8,
        };
        let long = constant(0.1, 7 * 48_000, 48_000);
        let stem = Stem::for_event(1, &event, long).unwrap();
        assert_eq!(stem.artifact.frames(), 216_000);
        assert_eq!(stem.gain, 0.8);
        let short = constant(0.1, 48_000, 48_000);
        assert_eq!(Stem::for_event(1, &event, short).unwrap().artifact.frames(), 48_000);
        assert!(Stem::new(0, constant(0.1, 10, 48_000), 0.0, 0.0).is_err());
    }

    #[test]
    fn trim_removes_leading_zeros() {
        let rate = 48_000;
        let mut samples = vec![0.0f32; 24_000];
        samples.extend(sine(500.0, 0.5, 1.0, rate).samples());
        let a = AudioArtifact::mono(samples, rate).unwrap();
        let t = trim_leading_silence(&a, -40.0, 10.0).unwrap();
        let removed = a.frames() - t.frames();
        // Oracle: the tone starts at frame 24000 and windows are 480 frames.
        assert!(removed <= 24_000 && 24_000 - removed < 480, "removed {removed}");
    }

    #[test]
    fn trim_edge_cases() {
        let tone = sine(500.0, 0.5, 0.5, 48_000);
        let t = trim_leading_silence(&tone, -40.0, 10.0).unwrap();
        assert_eq!(t, tone);

        let silent = constant(0.0, 48_000, 48_000);
        let t = trim_leading_silence(&silent, -40.0, 10.0).unwrap();
        assert_eq!(t.frames(), 4_800);
        assert_eq!(trim_leading_silence(&t, -40.0, 10.0).unwrap(), t);

        assert!(trim_leading_silence(&tone, 0.0, 10.0).is_err());
    }

    #[test]
    fn gain_examples() {
        let a = constant(0.25, 100, 48_000);
        assert_eq!(apply_gain(&a, 0.0).unwrap(), a);
        let doubled = apply_gain(&a, 6.02).unwrap();
        assert!(doubled.samples().iter().all(|&x| (x - 0.5).abs() <= 1e-4));
        assert!(matches!(apply_gain(&a, 13.0), Err(MixError::ParamOutOfRange { param: "gain_db", .. })));
        assert!(apply_gain(&a, -24.5).is_err());
    }

    #[test]
    fn gain_toward_peak() {
        let quiet = constant(0.1, 100, 48_000);
        let boosted = apply_local_action(&quiet, &PostProcessAction::gain_toward_peak(0.95, 6.0)).unwrap();
        // Capped at +6 dB: 0.1 * 10^(6/20).
        assert!((boosted.peak() as f64 - 0.1 * 10f64.powf(0.3)).abs() < 1e-6);

        let hot = constant(1.5, 100, 48_000);
        let tamed = apply_local_action(&hot, &PostProcessAction::gain_toward_peak(0.95, 0.0)).unwrap();
        assert!((tamed.peak() - 0.95).abs() < 1e-5);
    }

    #[test]
    fn fade_examples() {
        let a = constant(1.0, 48_000, 48_000);
        let f = fade(&a, 100.0, 0.0).unwrap();
        // 50 ms into a 100 ms linear ramp.
        assert!((f.samples()[2_400] - 0.5).abs() < 1e-3);
        assert_eq!(f.samples()[0], 0.0);
        assert_eq!(f.samples()[4_800], 1.0);
        let g = fade(&a, 0.0, 100.0).unwrap();
        assert_eq!(*g.samples().last().unwrap(), 0.0);
        assert_eq!(fade(&a, 0.0, 0.0).unwrap(), a);
        assert!(fade(&a, 600.0, 500.0).is_err());
        assert!(fade(&a, -1.0, 0.0).is_err());
    }

    #[test]
    fn action_json_shape() {
        let trim = PostProcessAction::trim_default();
        assert_eq!(
            serde_json::to_value(&trim).unwrap(),
            serde_json::json!({"kind": "trim_leading_silence", "threshold_db": -40.0, "min_window_ms": 10.0})
        );
        let ext = PostProcessAction::External {
            tool_id: "AudioSR".into(),
            action: "super_resolution".into(),
            params: BTreeMap::new(),
        };
        assert!(matches!(apply_local_action(&constant(0.1, 10, 48_000), &ext), Err(MixError::NotLocal(_))));
        let back = PostProcessAction::from_wire(trim.name(), &trim.wire_params()).unwrap();
        assert_eq!(back, trim);
    }

    fn arb_stem(id: usize) -> impl Strategy<Value = Stem> {
        (
            prop::collection::vec(-0.5f32..0.5, 1..400),
            prop::sample::select(vec![24_000u32, 48_000]),
            0u32..200,
            1u32..=100,
        )
            .prop_map(move |(s, rate, start, gain)| {
                Stem::new(id, AudioArtifact::mono(s, rate).unwrap(), start as f64 / 1000.0, gain as f64 / 100.0)
                    .unwrap()
            })
    }

    proptest! {
        #[test]
        fn mixing_is_linear_without_limiter(a in arb_stem(0), b in arb_stem(1), c in 0.1f64..2.0) {
            let opts = MixOptions { limiter: false, ..Default::default() };
            let base = mixdown(&[a.clone(), b.clone()], opts).unwrap();
            let scaled: Vec<Stem> = [a, b].into_iter().map(|mut s| { s.gain *= c; s }).collect();
            let mixed = mixdown(&scaled, opts).unwrap();
            prop_assert_eq!(base.frames(), mixed.frames());
            for (x, y) in base.samples().iter().zip(mixed.samples()) {
                prop_assert!((*x as f64 * c - *y as f64).abs() <= 1e-6);
            }
        }

        #[test]
        fn mixing_is_permutation_invariant(a in arb_stem(0), b in arb_stem(1), d in arb_stem(2)) {
            let one = mixdown(&[a.clone(), b.clone(), d.clone()], MixOptions::default()).unwrap();
            let two = mixdown(&[d, a, b], MixOptions::default()).unwrap();
            prop_assert_eq!(crate::audio::encode_wav(&one), crate::audio::encode_wav(&two));
            prop_assert!(one.peak() as f64 <= LIMITER_CEILING + 1e-6);
        }
    }
}
