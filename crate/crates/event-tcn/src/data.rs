//! Feature sequences, annotations, window sampling and synthetic data.
//!
//! Feature files are binary (magic `FSEQ`), annotations are JSON lines.
//! The sampler draws training windows with a configurable background
//! probability and labels them either densely (one label per contiguous
//! second) or sparsely (one label for the window center). A synthetic
//! generator plants class-specific temporal patterns into noise so the
//! whole pipeline can be verified at desk scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Feature sequences
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: [u8; 4] = *b"FSEQ";
const FEATURE_VERSION: u8 = 0x01;

/// Precomputed per-frame features: `num_frames x feature_dim`, frame-major,
/// stored as f32 on disk and in memory so round trips are bit exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Vec<f32>,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub fps: f32,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(
        features: Vec<f32>,
        num_frames: usize,
        feature_dim: usize,
        fps: f32,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if num_frames == 0 || feature_dim == 0 {
            return Err(Error::Config("feature sequence must be non-empty".to_string()));
        }
        if features.len() != num_frames * feature_dim {
            return Err(Error::Shape(format!(
                "feature sequence: {} values for {} x {}",
                features.len(),
                num_frames,
                feature_dim
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".to_string()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", fps)));
        }
        Ok(Self {
            features,
            num_frames,
            feature_dim,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }
}

/// Binary layout: `FSEQ` + version byte, u32 num_frames, u32 feature_dim,
/// f32 fps, then `num_frames * feature_dim` f32 values, all little endian.
pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + seq.features.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    buf.extend_from_slice(&(seq.num_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&seq.fps.to_le_bytes());
    for v in &seq.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 13];
    file.read_exact(&mut header).map_err(|_| Error::Truncated {
        expected: 13,
        found: fs::metadata(path).map(|m| m.len() as usize).unwrap_or(0),
    })?;
    if header[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: [header[0], header[1], header[2], header[3]],
        });
    }
    if header[4] != FEATURE_VERSION {
        return Err(Error::Config(format!(
            "unsupported feature file version {}",
            header[4]
        )));
    }
    let num_frames = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let feature_dim = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut fps_bytes = [0u8; 4];
    file.read_exact(&mut fps_bytes).map_err(|_| Error::Truncated {
        expected: 17,
        found: 13,
    })?;
    let fps = f32::from_le_bytes(fps_bytes);
    let expected = num_frames * feature_dim * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let features: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("feature file {}", path.display())));
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(features, num_frames, feature_dim, fps, source_id)
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

/// One labeled event at one-second resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub second: u32,
    pub class_id: usize,
}

/// Second-resolution event labels for one sequence. Class 0 is always the
/// background class and never appears in `events`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTrack {
    pub events: Vec<EventRecord>,
    pub duration_sec: u32,
    pub class_names: Vec<String>,
}

impl AnnotationTrack {
    pub fn new(
        mut events: Vec<EventRecord>,
        duration_sec: u32,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if class_names.is_empty() || class_names[0] != "background" {
            return Err(Error::Annotation(
                "class list must start with \"background\"".to_string(),
            ));
        }
        events.sort_by_key(|e| (e.second, e.class_id));
        for pair in events.windows(2) {
            if pair[0].second == pair[1].second && pair[0].class_id == pair[1].class_id {
                return Err(Error::Annotation(format!(
                    "duplicate event: class {} at second {}",
                    class_names[pair[0].class_id], pair[0].second
                )));
            }
        }
        for e in &events {
            if e.class_id == 0 || e.class_id >= class_names.len() {
                return Err(Error::Annotation(format!(
                    "event class id {} out of range",
                    e.class_id
                )));
            }
            if e.second >= duration_sec {
                return Err(Error::Annotation(format!(
                    "event at second {} outside duration {}",
                    e.second, duration_sec
                )));
            }
        }
        Ok(Self {
            events,
            duration_sec,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Events annotated at the given second.
    pub fn events_at(&self, second: u32) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(move |e| e.second == second)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for e in &self.events {
            counts[e.class_id] += 1;
        }
        counts
    }

    /// The event class holding a strict majority of events, if any. Used as
    /// the default "dominant" class that consecutive-run suppression skips.
    pub fn dominant_class(&self) -> Option<usize> {
        let counts = self.class_counts();
        let total: usize = counts.iter().skip(1).sum();
        counts
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, &n)| 2 * n > total && total > 0)
            .map(|(i, _)| i)
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationHeader {
    duration_sec: u32,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    second: u32,
    label: String,
}

/// Text format: a JSON header line `{"duration_sec":..,"classes":[..]}`,
/// then one `{"second":..,"label":".."}` record per line. Unknown fields
/// are ignored.
pub fn save_annotations(path: &Path, track: &AnnotationTrack) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&AnnotationHeader {
        duration_sec: track.duration_sec,
        classes: track.class_names.clone(),
    })?);
    out.push('\n');
    for e in &track.events {
        out.push_str(&serde_json::to_string(&AnnotationLine {
            second: e.second,
            label: track.class_names[e.class_id].clone(),
        })?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<AnnotationTrack> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Annotation(format!("{}: empty file, header expected", path.display())))??;
    let header: AnnotationHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Annotation(format!("bad header: {}", e)))?;
    let mut events = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Annotation(format!("line {}: {}", lineno + 2, e)))?;
        let class_id = header
            .classes
            .iter()
            .position(|c| *c == rec.label)
            .ok_or_else(|| {
                Error::Annotation(format!(
                    "line {}: unknown class name {:?}",
                    lineno + 2,
                    rec.label
                ))
            })?;
        if class_id == 0 {
            return Err(Error::Annotation(format!(
                "line {}: events cannot be labeled background",
                lineno + 2
            )));
        }
        events.push(EventRecord {
            second: rec.second,
            class_id,
        });
    }
    AnnotationTrack::new(events, header.duration_sec, header.classes)
}

// ---------------------------------------------------------------------------
// Window sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// One label per contiguous second, `outputs` labels per window.
    Dense,
    /// One label: the class at the window center second.
    SparseCentered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of drawing an all-background window.
    pub p0: f64,
    pub seed: u64,
    /// Window length in frames.
    pub window_len: usize,
    /// Labeled positions per window.
    pub outputs: usize,
    pub mode: SamplingMode,
    /// Uniform shift applied to event windows in sparse mode, seconds.
    /// Zero disables the augmentation.
    pub shift_range_sec: f64,
}

impl SamplerConfig {
    pub fn validate(&self, fps: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::Config(format!("p0 must be in [0,1], got {}", self.p0)));
        }
        if self.window_len == 0 || self.outputs == 0 {
            return Err(Error::Config("window_len and outputs must be positive".to_string()));
        }
        if self.shift_range_sec < 0.0 {
            return Err(Error::Config("shift_range_sec must be >= 0".to_string()));
        }
        let window_sec = self.window_len as f64 / fps as f64;
        if window_sec + 1e-9 < self.outputs as f64 {
            return Err(Error::Config(format!(
                "window of {:.2}s cannot carry {} one-second labels",
                window_sec, self.outputs
            )));
        }
        Ok(())
    }

    /// Frames of context to the left of the first labeled second in dense
    /// mode; the remainder of the context sits on the right.
    pub fn context_left_frames(&self, fps: f32) -> usize {
        let labeled = ((self.outputs as f64) * fps as f64).round() as usize;
        self.window_len.saturating_sub(labeled) / 2
    }

    /// Whole seconds covered by the window.
    pub fn window_sec(&self, fps: f32) -> u32 {
        (self.window_len as f64 / fps as f64).round().max(1.0) as u32
    }

    /// Offset of the center second within a sparse window.
    pub fn center_offset_sec(&self, fps: f32) -> u32 {
        (self.window_sec(fps) - 1) / 2
    }
}

/// A set of (features, annotations) pairs sampled and evaluated together.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<(FeatureSequence, AnnotationTrack)>,
    events_index: Vec<(usize, EventRecord)>,
}

impl Dataset {
    pub fn new(pairs: Vec<(FeatureSequence, AnnotationTrack)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("dataset is empty".to_string()));
        }
        let dim = pairs[0].0.feature_dim;
        let fps = pairs[0].0.fps;
        let classes = &pairs[0].1.class_names;
        for (seq, track) in &pairs {
            if seq.feature_dim != dim {
                return Err(Error::Config("feature dims differ across sequences".to_string()));
            }
            if seq.fps != fps {
                return Err(Error::Config("fps differs across sequences".to_string()));
            }
            if &track.class_names != classes {
                return Err(Error::Config("class lists differ across sequences".to_string()));
            }
            let needed = (track.duration_sec as f64 * fps as f64).round() as usize;
            if seq.num_frames < needed {
                return Err(Error::Config(format!(
                    "{}: {} frames cannot cover {} annotated seconds at {} fps",
                    seq.source_id, seq.num_frames, track.duration_sec, fps
                )));
            }
        }
        let events_index = pairs
            .iter()
            .enumerate()
            .flat_map(|(i, (_, track))| track.events.iter().map(move |e| (i, *e)))
            .collect();
        Ok(Self { pairs, events_index })
    }

    pub fn feature_dim(&self) -> usize {
        self.pairs[0].0.feature_dim
    }

    pub fn fps(&self) -> f32 {
        self.pairs[0].0.fps
    }

    pub fn num_classes(&self) -> usize {
        self.pairs[0].1.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.pairs[0].1.class_names
    }

    pub fn num_events(&self) -> usize {
        self.events_index.len()
    }
}

/// Copy `window_len` frames starting at the clamped ideal frame into a
/// `[window_len, feature_dim]` tensor.
pub fn extract_window(seq: &FeatureSequence, ideal_start_frame: i64, window_len: usize) -> Result<Tensor> {
    if seq.num_frames < window_len {
        return Err(Error::Config(format!(
            "{}: sequence of {} frames shorter than one {}-frame window",
            seq.source_id, seq.num_frames, window_len
        )));
    }
    let start = ideal_start_frame.clamp(0, (seq.num_frames - window_len) as i64) as usize;
    let dim = seq.feature_dim;
    let mut out = Tensor::zeros(&[window_len, dim]);
    let data = out.data_mut();
    for t in 0..window_len {
        let frame = seq.frame(start + t);
        for (d, &v) in frame.iter().enumerate() {
            data[t * dim + d] = v as f64;
        }
    }
    Ok(out)
}

/// Frame index where the window for a dense labeled-second start `w` begins.
fn dense_start_frame(cfg: &SamplerConfig, fps: f32, window_start_sec: i64) -> i64 {
    (window_start_sec as f64 * fps as f64).round() as i64 - cfg.context_left_frames(fps) as i64
}

/// Pick the label for one second: background when nothing is annotated,
/// otherwise the rarest annotated class (a dominant class shares its second
/// with the overlapping rarer event and yields to it).
fn class_at_second(track: &AnnotationTrack, second: i64) -> usize {
    if second < 0 || second >= track.duration_sec as i64 {
        return 0;
    }
    let counts = track.class_counts();
    track
        .events_at(second as u32)
        .map(|e| e.class_id)
        .min_by_key(|&c| (counts[c], c))
        .unwrap_or(0)
}

/// Labels for a window: dense mode labels `outputs` contiguous seconds from
/// `window_start_sec`; sparse mode labels the single center second.
pub fn label_window(track: &AnnotationTrack, window_start_sec: i64, cfg: &SamplerConfig, fps: f32) -> Vec<usize> {
    match cfg.mode {
        SamplingMode::Dense => (0..cfg.outputs)
            .map(|i| class_at_second(track, window_start_sec + i as i64))
            .collect(),
        SamplingMode::SparseCentered => {
            vec![class_at_second(
                track,
                window_start_sec + cfg.center_offset_sec(fps) as i64,
            )]
        }
    }
}

/// Window start (in seconds, real-valued) for an event window shifted by a
/// uniform offset in `[-shift_range, shift_range]`, clamped into bounds.
/// With `shift_range` 0 the event sits exactly at the window center.
pub fn shift_augment(
    duration_sec: u32,
    window_sec: u32,
    event_second: u32,
    shift_range: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let base = event_second as f64 - ((window_sec - 1) / 2) as f64;
    let offset = if shift_range > 0.0 {
        rng.gen_range(-shift_range..=shift_range)
    } else {
        0.0
    };
    let max_start = (duration_sec.saturating_sub(window_sec)) as f64;
    (base + offset).clamp(0.0, max_start)
}

/// Draw one training window.
///
/// With probability `p0` the window is background: every labeled position
/// is class 0 (events may still sit in the unlabeled context frames). With
/// probability `1 - p0` an event is chosen uniformly over all events and
/// the window is positioned on it: dense mode places the event's second
/// uniformly among the labeled positions, sparse mode centers the window on
/// the event (plus the optional shift, which keeps the event's label).
///
/// Returns the `[window_len, feature_dim]` feature tensor and the labels.
pub fn sample_window(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let fps = ds.fps();
    cfg.validate(fps)?;
    let want_background = rng.gen_range(0.0..1.0) < cfg.p0;
    if want_background {
        if let Some(out) = try_background_window(ds, cfg, rng)? {
            return Ok(out);
        }
        if ds.num_events() > 0 {
            log::warn!("no background window found after retries; sampling an event window");
        } else {
            return Err(Error::Config(
                "dataset has neither background windows nor events".to_string(),
            ));
        }
    }
    if ds.num_events() == 0 {
        log::warn!("dataset has no events; sampling a background window");
        if let Some(out) = try_background_window(ds, cfg, rng)? {
            return Ok(out);
        }
        return Err(Error::Config(
            "dataset has neither background windows nor events".to_string(),
        ));
    }
    event_window(ds, cfg, rng)
}

fn try_background_window(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Tensor, Vec<usize>)>> {
    let fps = ds.fps();
    for _ in 0..100 {
        let pair_idx = rng.gen_range(0..ds.pairs.len());
        let (seq, track) = &ds.pairs[pair_idx];
        let (start, labels) = match cfg.mode {
            SamplingMode::Dense => {
                let max_w = track.duration_sec as i64 - cfg.outputs as i64;
                if max_w < 0 {
                    continue;
                }
                let w = rng.gen_range(0..=max_w);
                (dense_start_frame(cfg, fps, w), label_window(track, w, cfg, fps))
            }
            SamplingMode::SparseCentered => {
                let win = cfg.window_sec(fps);
                let max_w = track.duration_sec as i64 - win as i64;
                if max_w < 0 {
                    continue;
                }
                let w = rng.gen_range(0..=max_w);
                (
                    (w as f64 * fps as f64).round() as i64,
                    label_window(track, w, cfg, fps),
                )
            }
        };
        if labels.iter().all(|&l| l == 0) {
            let features = extract_window(seq, start, cfg.window_len)?;
            return Ok(Some((features, labels)));
        }
    }
    Ok(None)
}

fn event_window(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let fps = ds.fps();
    let (pair_idx, event) = ds.events_index[rng.gen_range(0..ds.num_events())];
    let (seq, track) = &ds.pairs[pair_idx];
    match cfg.mode {
        SamplingMode::Dense => {
            let position = rng.gen_range(0..cfg.outputs) as i64;
            let max_w = track.duration_sec as i64 - cfg.outputs as i64;
            let w = (event.second as i64 - position).clamp(0, max_w.max(0));
            let features = extract_window(seq, dense_start_frame(cfg, fps, w), cfg.window_len)?;
            Ok((features, label_window(track, w, cfg, fps)))
        }
        SamplingMode::SparseCentered => {
            let win = cfg.window_sec(fps);
            let w = shift_augment(track.duration_sec, win, event.second, cfg.shift_range_sec, rng);
            let start_frame = (w * fps as f64).round() as i64;
            let features = extract_window(seq, start_frame, cfg.window_len)?;
            // The sampled event names the label even under shift; the event
            // stays inside the window for any |offset| <= window/2.
            Ok((features, vec![event.class_id]))
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Recipe for planted-event data: background noise plus, per event, a
/// class-specific feature-space direction modulated by a half-sine envelope
/// of the class's characteristic duration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub duration_sec: u32,
    pub events_per_class: usize,
    /// One pattern duration (frames) per event class; must be distinct so
    /// the temporal scales actually differ.
    pub pattern_durations: Vec<usize>,
    /// Uniform frame jitter of the pattern start within the annotated
    /// second, mirroring coarse annotation.
    pub jitter_frames: usize,
    pub noise_sigma: f64,
    /// How far apart the class directions sit in feature space, in [0,1].
    /// Small values leave the pattern duration as the dominant cue between
    /// classes, so temporal scale actually has to be resolved; 1 gives
    /// each class an independent direction.
    pub direction_spread: f64,
    pub fps: f32,
    /// Drives noise and event placement; distinct per split.
    pub seed: u64,
    /// Drives the per-class feature directions; shared across the splits
    /// of one dataset so train and test events carry the same signal.
    pub pattern_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least background + 1 event class".to_string()));
        }
        if self.pattern_durations.len() != self.num_classes - 1 {
            return Err(Error::Config(format!(
                "{} pattern durations for {} event classes",
                self.pattern_durations.len(),
                self.num_classes - 1
            )));
        }
        let mut sorted = self.pattern_durations.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.pattern_durations.len() || sorted.iter().any(|&d| d == 0) {
            return Err(Error::Config(
                "pattern durations must be positive and distinct".to_string(),
            ));
        }
        if self.feature_dim == 0 || self.duration_sec == 0 || self.events_per_class == 0 {
            return Err(Error::Config("degenerate synthetic spec".to_string()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) || self.noise_sigma < 0.0 {
            return Err(Error::Config("bad fps or noise_sigma".to_string()));
        }
        if !(0.0..=1.0).contains(&self.direction_spread) {
            return Err(Error::Config("direction_spread must be in [0,1]".to_string()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        names.extend((1..self.num_classes).map(|i| format!("event{}", i)));
        names
    }
}

/// Standard normal via Box-Muller; two uniforms per draw keeps the stream
/// layout independent of any distribution-crate internals.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate one synthetic sequence with its annotation track.
/// Deterministic given the spec (including its seed).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(FeatureSequence, AnnotationTrack)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fps = spec.fps as f64;
    let frames = (spec.duration_sec as f64 * fps).round() as usize;
    let dim = spec.feature_dim;

    // Background noise first, in one fixed pass.
    let mut features: Vec<f64> = (0..frames * dim)
        .map(|_| spec.noise_sigma * standard_normal(&mut rng))
        .collect();

    // One unit direction in feature space per event class, drawn from the
    // shared pattern seed so every split plants the same signal. Class
    // directions mix a common base with a per-class component weighted by
    // direction_spread.
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let normalize = |v: Vec<f64>| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let base: Vec<f64> = normalize((0..dim).map(|_| standard_normal(&mut pattern_rng)).collect());
    let directions: Vec<Vec<f64>> = (1..spec.num_classes)
        .map(|_| {
            let own: Vec<f64> =
                normalize((0..dim).map(|_| standard_normal(&mut pattern_rng)).collect());
            normalize(
                base.iter()
                    .zip(&own)
                    .map(|(b, o)| (1.0 - spec.direction_spread) * b + spec.direction_spread * o)
                    .collect(),
            )
        })
        .collect();

    // Non-overlapping slots: each event owns a stretch of seconds wide
    // enough for the longest pattern plus jitter.
    let max_dur = *spec.pattern_durations.iter().max().unwrap();
    let slot_sec = (((max_dur + spec.jitter_frames) as f64 / fps).ceil() as u32 + 1).max(2);
    let total_events = spec.events_per_class * (spec.num_classes - 1);
    let last_start = spec.duration_sec.saturating_sub(slot_sec);
    let mut slots: Vec<u32> = (1..last_start).step_by(slot_sec as usize).collect();
    if slots.len() < total_events {
        return Err(Error::Config(format!(
            "{} events do not fit into {} non-overlapping slots of {}s",
            total_events,
            slots.len(),
            slot_sec
        )));
    }
    slots.shuffle(&mut rng);
    slots.truncate(total_events);

    let mut events = Vec::with_capacity(total_events);
    for (i, &second) in slots.iter().enumerate() {
        let class_id = 1 + i / spec.events_per_class;
        let dur = spec.pattern_durations[class_id - 1];
        let jitter = if spec.jitter_frames > 0 {
            rng.gen_range(0..=spec.jitter_frames)
        } else {
            0
        };
        let start = ((second as f64 * fps).round() as usize + jitter).min(frames - dur);
        for m in 0..dur {
            let env = (std::f64::consts::PI * (m as f64 + 0.5) / dur as f64).sin();
            let base = (start + m) * dim;
            for d in 0..dim {
                features[base + d] += env * directions[class_id - 1][d];
            }
        }
        events.push(EventRecord { second, class_id });
    }

    let seq = FeatureSequence::new(
        features.into_iter().map(|v| v as f32).collect(),
        frames,
        dim,
        spec.fps,
        format!("synthetic-{}", spec.seed),
    )?;
    let track = AnnotationTrack::new(events, spec.duration_sec, spec.class_names())?;
    Ok((seq, track))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            feature_dim: 6,
            duration_sec: 120,
            events_per_class: 8,
            pattern_durations: vec![3, 8, 15],
            jitter_frames: 4,
            noise_sigma: 0.2,
            direction_spread: 0.3,
            fps: 10.0,
            seed: 42,
            pattern_seed: 7,
        }
    }

    fn small_sampler(mode: SamplingMode) -> SamplerConfig {
        SamplerConfig {
            p0: 0.2,
            seed: 1,
            window_len: 30,
            outputs: if matches!(mode, SamplingMode::Dense) { 2 } else { 1 },
            mode,
            shift_range_sec: 0.0,
        }
    }

    #[test]
    fn feature_roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seq.fseq");
        let (seq, _) = gen_synthetic(&small_spec()).unwrap();
        save_features(&path, &seq).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.features, seq.features);
        assert_eq!(loaded.fps.to_bits(), seq.fps.to_bits());
        assert_eq!(loaded.num_frames, seq.num_frames);
        // Save again: files must match byte for byte.
        let path2 = dir.path().join("seq2.fseq");
        save_features(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn feature_header_arithmetic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.fseq");
        // T=10, l=4: 160 payload bytes.
        let seq = FeatureSequence::new(vec![0.5f32; 40], 10, 4, 10.0, "tiny").unwrap();
        save_features(&path, &seq).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 17 + 160);
        assert!(load_features(&path).is_ok());
    }

    #[test]
    fn feature_truncation_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.fseq");
        let seq = FeatureSequence::new(vec![0.5f32; 40], 10, 4, 10.0, "t").unwrap();
        save_features(&path, &seq).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_features(&path) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 160);
                assert_eq!(found, 152);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn feature_bad_magic_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fseq");
        fs::write(&path, b"NOPE\x01aaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(load_features(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn feature_nan_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.fseq");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FSEQ\x01");
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        buf.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, buf).unwrap();
        assert!(matches!(load_features(&path), Err(Error::NonFinite(_))));
    }

    #[test]
    fn annotations_roundtrip_and_sort() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.events");
        let track = AnnotationTrack::new(
            vec![
                EventRecord { second: 7, class_id: 2 },
                EventRecord { second: 3, class_id: 1 },
            ],
            20,
            vec!["background".into(), "a".into(), "b".into()],
        )
        .unwrap();
        save_annotations(&path, &track).unwrap();
        let loaded = load_annotations(&path).unwrap();
        assert_eq!(loaded, track);
        assert_eq!(loaded.events[0].second, 3);
    }

    #[test]
    fn annotations_empty_body_is_empty_track() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.events");
        fs::write(
            &path,
            "{\"duration_sec\":10,\"classes\":[\"background\",\"x\"]}\n",
        )
        .unwrap();
        let track = load_annotations(&path).unwrap();
        assert!(track.events.is_empty());
    }

    #[test]
    fn annotations_reject_bad_records() {
        let dir = tempdir().unwrap();
        let header = "{\"duration_sec\":10,\"classes\":[\"background\",\"x\"]}\n";
        let cases = [
            ("{\"second\":3,\"label\":\"nope\"}\n", "unknown class"),
            ("{\"second\":10,\"label\":\"x\"}\n", "out of range second"),
            (
                "{\"second\":3,\"label\":\"x\"}\n{\"second\":3,\"label\":\"x\"}\n",
                "duplicate",
            ),
        ];
        for (i, (body, what)) in cases.iter().enumerate() {
            let path = dir.path().join(format!("bad{i}.events"));
            fs::write(&path, format!("{header}{body}")).unwrap();
            assert!(load_annotations(&path).is_err(), "{what}");
        }
    }

    #[test]
    fn annotations_ignore_unknown_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("extra.events");
        fs::write(
            &path,
            "{\"duration_sec\":10,\"classes\":[\"background\",\"x\"],\"note\":\"hi\"}\n\
             {\"second\":3,\"label\":\"x\",\"confidence\":0.5}\n",
        )
        .unwrap();
        let track = load_annotations(&path).unwrap();
        assert_eq!(track.events.len(), 1);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = small_spec();
        let (a_seq, a_track) = gen_synthetic(&spec).unwrap();
        let (b_seq, b_track) = gen_synthetic(&spec).unwrap();
        assert_eq!(a_seq, b_seq);
        assert_eq!(a_track, b_track);
    }

    #[test]
    fn synthetic_event_count_matches_construction() {
        let spec = small_spec();
        let (_, track) = gen_synthetic(&spec).unwrap();
        assert_eq!(track.events.len(), 8 * 3);
        let counts = track.class_counts();
        assert_eq!(&counts[1..], &[8, 8, 8]);
    }

    #[test]
    fn noiseless_synthetic_is_zero_outside_patterns() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.events_per_class = 1;
        spec.num_classes = 2;
        spec.pattern_durations = vec![5];
        let (seq, track) = gen_synthetic(&spec).unwrap();
        let event = track.events[0];
        let fps = spec.fps as f64;
        let sec_start = (event.second as f64 * fps) as usize;
        let mut nonzero_frames: Vec<usize> = (0..seq.num_frames)
            .filter(|&t| seq.frame(t).iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(nonzero_frames.len(), 5);
        // The planted pattern starts within the annotated second's jitter.
        nonzero_frames.sort_unstable();
        assert!(nonzero_frames[0] >= sec_start);
        assert!(nonzero_frames[0] <= sec_start + spec.jitter_frames);
    }

    #[test]
    fn synthetic_rejects_overfull_duration() {
        let mut spec = small_spec();
        spec.duration_sec = 20;
        spec.events_per_class = 50;
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn sampled_windows_have_declared_shapes() {
        let (seq, track) = gen_synthetic(&small_spec()).unwrap();
        let ds = Dataset::new(vec![(seq, track)]).unwrap();
        let cfg = small_sampler(SamplingMode::Dense);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..50 {
            let (features, labels) = sample_window(&ds, &cfg, &mut rng).unwrap();
            assert_eq!(features.shape(), &[30, 6]);
            assert_eq!(labels.len(), 2);
            assert!(labels.iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn p0_one_yields_only_background() {
        let (seq, track) = gen_synthetic(&small_spec()).unwrap();
        let ds = Dataset::new(vec![(seq, track)]).unwrap();
        let mut cfg = small_sampler(SamplingMode::Dense);
        cfg.p0 = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (_, labels) = sample_window(&ds, &cfg, &mut rng).unwrap();
            assert!(labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn background_fraction_tracks_p0() {
        let (seq, track) = gen_synthetic(&small_spec()).unwrap();
        let ds = Dataset::new(vec![(seq, track)]).unwrap();
        let cfg = small_sampler(SamplingMode::Dense);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let draws = 10_000;
        let mut background = 0usize;
        for _ in 0..draws {
            let (_, labels) = sample_window(&ds, &cfg, &mut rng).unwrap();
            if labels.iter().all(|&l| l == 0) {
                background += 1;
            }
        }
        let frac = background as f64 / draws as f64;
        // Three binomial sigmas around p0 = 0.2.
        let sigma = (0.2f64 * 0.8 / draws as f64).sqrt();
        assert!(
            (frac - 0.2).abs() <= 3.0 * sigma,
            "background fraction {frac}"
        );
    }

    #[test]
    fn dense_event_windows_always_carry_an_event() {
        let (seq, track) = gen_synthetic(&small_spec()).unwrap();
        let ds = Dataset::new(vec![(seq, track)]).unwrap();
        let mut cfg = small_sampler(SamplingMode::Dense);
        cfg.p0 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (_, labels) = sample_window(&ds, &cfg, &mut rng).unwrap();
            assert!(labels.iter().any(|&l| l != 0));
        }
    }

    #[test]
    fn sparse_event_windows_center_the_event() {
        let mut spec = small_spec();
        spec.fps = 2.0;
        spec.duration_sec = 600;
        let (seq, track) = gen_synthetic(&spec).unwrap();
        let ds = Dataset::new(vec![(seq, track.clone())]).unwrap();
        let mut cfg = small_sampler(SamplingMode::SparseCentered);
        cfg.p0 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (_, labels) = sample_window(&ds, &cfg, &mut rng).unwrap();
            assert_eq!(labels.len(), 1);
            assert_ne!(labels[0], 0);
        }
        // Unshifted: label_window at the centered start names the event.
        let event = track.events[10];
        let w = event.second as i64 - cfg.center_offset_sec(2.0) as i64;
        assert_eq!(label_window(&track, w, &cfg, 2.0), vec![event.class_id]);
    }

    #[test]
    fn label_window_dense_cases() {
        let track = AnnotationTrack::new(
            vec![EventRecord { second: 5, class_id: 2 }],
            20,
            vec!["background".into(), "a".into(), "b".into()],
        )
        .unwrap();
        let cfg = small_sampler(SamplingMode::Dense);
        assert_eq!(label_window(&track, 10, &cfg, 10.0), vec![0, 0]);
        assert_eq!(label_window(&track, 5, &cfg, 10.0), vec![2, 0]);
        assert_eq!(label_window(&track, 4, &cfg, 10.0), vec![0, 2]);
    }

    #[test]
    fn label_window_prefers_rarer_class_on_shared_second() {
        // Class 1 is dominant (3 events), class 2 rare (1 event); they share
        // second 4.
        let track = AnnotationTrack::new(
            vec![
                EventRecord { second: 2, class_id: 1 },
                EventRecord { second: 4, class_id: 1 },
                EventRecord { second: 8, class_id: 1 },
                EventRecord { second: 4, class_id: 2 },
            ],
            20,
            vec!["background".into(), "common".into(), "rare".into()],
        )
        .unwrap();
        let cfg = small_sampler(SamplingMode::Dense);
        assert_eq!(label_window(&track, 4, &cfg, 10.0), vec![2, 0]);
        assert_eq!(track.dominant_class(), Some(1));
    }

    #[test]
    fn shift_zero_centers_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = shift_augment(600, 15, 100, 0.0, &mut rng);
        assert_eq!(w, 93.0);
    }

    #[test]
    fn shift_clamps_near_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = shift_augment(600, 15, 2, 7.5, &mut rng);
            assert!((0.0..=585.0).contains(&w));
        }
    }

    #[test]
    fn shift_offsets_are_uniform() {
        // Kolmogorov-Smirnov against U[-7.5, 7.5] at alpha = 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 2000usize;
        let mut offsets: Vec<f64> = (0..n)
            .map(|_| shift_augment(10_000, 15, 5000, 7.5, &mut rng) - (5000.0 - 7.0))
            .collect();
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d = 0.0f64;
        for (i, x) in offsets.iter().enumerate() {
            let cdf = (x + 7.5) / 15.0;
            d = d.max((cdf - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        let critical = 1.63 / (n as f64).sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    #[test]
    fn extract_window_rejects_short_sequences() {
        let seq = FeatureSequence::new(vec![0.0; 20], 10, 2, 10.0, "short").unwrap();
        assert!(extract_window(&seq, 0, 30).is_err());
    }
}
