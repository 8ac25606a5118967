//! Structured run configuration.
//!
//! One JSON document with a section per subsystem. Every key has a default;
//! unknown keys are rejected with the offending key named. Command-line
//! flags override file values after loading.

use crate::data::{SamplerConfig, SamplingMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::train::{Precision, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Stream ids partition one root seed between independent consumers.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Init = 1,
    Sampler = 2,
    Synth = 3,
    Probe = 4,
}

/// Seeded generator on a dedicated stream of the root seed.
pub fn derive_rng(root_seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mix a tag into a root seed (splitmix64 step). Used to give each
/// synthetic split its own generator while staying a pure function of the
/// root seed.
pub fn mix_seed(root_seed: u64, tag: u64) -> u64 {
    let mut z = root_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(tag.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn default_split_fractions() -> Vec<f64> {
    vec![0.7, 0.1, 0.2]
}

/// Synthetic data section: the generator recipe plus how to split the
/// output into train/val/test by contiguous time ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub duration_sec: u32,
    pub events_per_class: usize,
    pub pattern_durations: Vec<usize>,
    pub jitter_frames: usize,
    pub noise_sigma: f64,
    pub direction_spread: f64,
    pub fps: f32,
    pub split_fractions: Vec<f64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 16,
            duration_sec: 600,
            events_per_class: 50,
            pattern_durations: vec![3, 8, 15],
            jitter_frames: 4,
            noise_sigma: 0.25,
            direction_spread: 0.3,
            fps: 10.0,
            split_fractions: default_split_fractions(),
        }
    }
}

impl SynthSection {
    pub fn validate(&self) -> Result<()> {
        if self.split_fractions.len() != 3 {
            return Err(Error::Config(
                "split_fractions must list train, val, test".to_string(),
            ));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split_fractions sum to {}, expected 1",
                sum
            )));
        }
        if self.split_fractions.iter().any(|f| *f <= 0.0) {
            return Err(Error::Config("split fractions must be positive".to_string()));
        }
        Ok(())
    }

    /// Generator spec for one split: its share of the duration and events,
    /// with a split-specific placement seed mixed from the root and a
    /// pattern seed shared across all splits.
    pub fn split_spec(&self, split_idx: usize, root_seed: u64) -> SyntheticSpec {
        let frac = self.split_fractions[split_idx];
        SyntheticSpec {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            duration_sec: ((self.duration_sec as f64) * frac).round().max(1.0) as u32,
            events_per_class: allocate(self.events_per_class, &self.split_fractions)[split_idx],
            pattern_durations: self.pattern_durations.clone(),
            jitter_frames: self.jitter_frames,
            noise_sigma: self.noise_sigma,
            direction_spread: self.direction_spread,
            fps: self.fps,
            seed: mix_seed(root_seed, split_idx as u64),
            pattern_seed: mix_seed(root_seed, 0xfeed),
        }
    }
}

/// Largest-remainder allocation of `total` items over fractions; the
/// shares always sum to `total`.
pub fn allocate(total: usize, fractions: &[f64]) -> Vec<usize> {
    let mut shares: Vec<(usize, usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let exact = total as f64 * f;
            let floor = exact.floor() as usize;
            (i, floor, exact - exact.floor())
        })
        .collect();
    let assigned: usize = shares.iter().map(|s| s.1).sum();
    let mut remainder = total - assigned;
    shares.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    for share in shares.iter_mut() {
        if remainder == 0 {
            break;
        }
        share.1 += 1;
        remainder -= 1;
    }
    shares.sort_by_key(|s| s.0);
    shares.into_iter().map(|s| s.1).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub towers: Vec<String>,
    pub hidden_channels: usize,
    pub input_len: usize,
    pub average_head: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            towers: vec!["t1".into(), "t2".into(), "t3".into()],
            hidden_channels: 128,
            input_len: 30,
            average_head: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub p0: f64,
    pub window_len: usize,
    pub outputs: usize,
    pub mode: SamplingMode,
    pub shift_range_sec: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            p0: 0.2,
            window_len: 30,
            outputs: 2,
            mode: SamplingMode::Dense,
            shift_range_sec: 0.0,
        }
    }
}

impl SamplerSection {
    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            p0: self.p0,
            seed,
            window_len: self.window_len,
            outputs: self.outputs,
            mode: self.mode,
            shift_range_sec: self.shift_range_sec,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub class_weights: Vec<f64>,
    pub precision: Precision,
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            iterations: 5000,
            class_weights: vec![0.33, 1.0, 1.0, 1.0],
            precision: Precision::F32,
            eval_every: 500,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            iterations: self.iterations,
            class_weights: self.class_weights.clone(),
            seed,
            precision: self.precision,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub delta_sec: f64,
    pub postprocess: bool,
    /// Explicit rare-class ids for run suppression; empty selects every
    /// non-dominant event class automatically.
    pub rare_classes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            delta_sec: 1.0,
            postprocess: true,
            rare_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpotSection {
    pub threshold: f64,
    /// Tolerance grid as `start:end:step` in seconds.
    pub delta_grid: String,
}

impl Default for SpotSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            delta_grid: "5:60:5".to_string(),
        }
    }
}

/// The whole run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub network: NetworkSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub spot: SpotSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a `start:end:step` tolerance grid into ascending values, inclusive
/// of `end` when the step lands on it.
pub fn parse_delta_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "delta grid {:?} is not start:end:step",
            text
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number {:?} in delta grid", s)))
    };
    let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if step <= 0.0 || end < start || start < 0.0 {
        return Err(Error::Config(format!("bad delta grid {:?}", text)));
    }
    let mut grid = Vec::new();
    let mut v = start;
    while v <= end + 1e-9 {
        grid.push(v);
        v += step;
    }
    Ok(grid)
}
