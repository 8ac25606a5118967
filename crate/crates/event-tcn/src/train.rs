//! Training loop, checkpoints and the tower ablation runner.
//!
//! Training is deterministic: all stochasticity flows through one seeded
//! generator (parameter init uses its own derived seed), so a fixed
//! (seed, data, config) reproduces the loss trace bit for bit, including
//! across a checkpoint/resume boundary.

use crate::arch::{
    build_network, init_network_params, network_backward, network_forward_train, NetworkParams,
    NetworkSpec,
};
use crate::data::{sample_window, Dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::nn::weighted_cross_entropy;
use crate::optim::{adam_step, AdamParams, Parameter};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Config and trace
// ---------------------------------------------------------------------------

/// Storage width for parameters and statistics. Arithmetic always runs in
/// f64; 32-bit mode rounds stored values after every update so checkpoints
/// written as f32 stay lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        })
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(serde::de::Error::custom(format!(
                "precision must be 32 or 64, got {}",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub class_weights: Vec<f64>,
    pub seed: u64,
    pub precision: Precision,
    /// Invoke the eval hook every this many iterations (0 disables).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            iterations: 5000,
            class_weights: Vec::new(),
            seed: 0,
            precision: Precision::F32,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: u64,
    pub loss: f64,
    pub ms: u64,
}

/// Loss per iteration with elapsed wall-clock milliseconds.
#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    /// CSV rows `iteration,loss,ms`. Loss uses the shortest round-trip
    /// float formatting, so equal losses mean equal bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,ms\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.iteration, e.loss, e.ms));
        }
        out
    }

    pub fn mean_loss_of_final(&self, window: usize) -> f64 {
        let n = self.entries.len();
        let take = window.min(n);
        if take == 0 {
            return f64::NAN;
        }
        self.entries[n - take..].iter().map(|e| e.loss).sum::<f64>() / take as f64
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Derive the parameter-init seed from the root training seed. Sampling
/// uses the root seed itself on a separate generator.
fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn assemble_batch(
    ds: &Dataset,
    sampler: &SamplerConfig,
    batch_size: usize,
    window_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let dim = ds.feature_dim();
    let mut input = Tensor::zeros(&[batch_size, dim, window_len]);
    let mut targets = Vec::with_capacity(batch_size * sampler.outputs);
    for b in 0..batch_size {
        let (window, labels) = sample_window(ds, sampler, rng)?;
        let w = window.data();
        let x = input.data_mut();
        for t in 0..window_len {
            for d in 0..dim {
                x[(b * dim + d) * window_len + t] = w[t * dim + d];
            }
        }
        targets.extend(labels);
    }
    Ok((input, targets))
}

fn round_bn_stats_to_f32(params: &mut NetworkParams) {
    for tower in params.towers.iter_mut() {
        for block in tower.blocks.iter_mut() {
            if let Some(bn) = &mut block.bn {
                bn.running_mean.round_to_f32();
                bn.running_var.round_to_f32();
            }
        }
    }
}

/// Progress callbacks from the training loop.
pub enum TrainEvent<'a> {
    /// Fired every `eval_every` iterations and at the final iteration.
    Eval {
        iteration: u64,
        loss: f64,
        params: &'a NetworkParams,
    },
}

/// State needed to resume training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub iteration: u64,
    pub precision: Precision,
    pub params: NetworkParams,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

/// Run the training loop up to `cfg.iterations`, starting fresh or from a
/// checkpoint. Returns the trained parameters, the loss trace for the
/// iterations actually run, and the sampler generator state for
/// checkpointing.
pub fn train(
    spec: &NetworkSpec,
    ds: &Dataset,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut hook: impl FnMut(TrainEvent),
) -> Result<(NetworkParams, LossTrace, ChaCha8Rng)> {
    if cfg.class_weights.len() != spec.num_classes {
        return Err(Error::Config(format!(
            "{} class weights for {} classes",
            cfg.class_weights.len(),
            spec.num_classes
        )));
    }
    if cfg.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Config("class weights must be positive".to_string()));
    }
    if sampler.outputs != spec.output_len() {
        return Err(Error::Config(format!(
            "sampler emits {} labels per window, network {}",
            sampler.outputs,
            spec.output_len()
        )));
    }
    if sampler.window_len != spec.input_len {
        return Err(Error::Config(format!(
            "sampler window of {} frames, network expects {}",
            sampler.window_len, spec.input_len
        )));
    }

    let (mut params, mut rng, start_iter) = match resume {
        Some(ckpt) => {
            if ckpt.spec_hash != spec_hash(spec) {
                return Err(Error::Checkpoint(
                    "checkpoint was trained on a different network spec".to_string(),
                ));
            }
            let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
            rng.set_stream(ckpt.rng_stream);
            rng.set_word_pos(ckpt.rng_word_pos);
            (ckpt.params, rng, ckpt.iteration)
        }
        None => (
            init_network_params(spec, init_seed(cfg.seed)),
            ChaCha8Rng::seed_from_u64(cfg.seed),
            0,
        ),
    };
    let hp = AdamParams::with_lr(cfg.lr);
    let round_f32 = matches!(cfg.precision, Precision::F32);
    if round_f32 && start_iter == 0 {
        for p in params.parameters_mut() {
            p.value.round_to_f32();
        }
    }

    let mut trace = LossTrace::default();
    let started = Instant::now();
    for iteration in start_iter + 1..=cfg.iterations {
        let (input, targets) = assemble_batch(ds, sampler, cfg.batch_size, spec.input_len, &mut rng)?;
        let (_, logits, cache) = network_forward_train(spec, &mut params, &input)?;
        let (loss, grad_logits) = weighted_cross_entropy(&logits, &targets, &cfg.class_weights)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at iteration {}",
                iteration
            )));
        }
        let batch_weight: f64 = targets.iter().map(|&t| cfg.class_weights[t]).sum();
        if batch_weight > 0.0 {
            network_backward(spec, &mut params, &cache, &grad_logits)?;
            adam_step(params.parameters_mut(), &hp, round_f32)?;
        }
        if round_f32 {
            round_bn_stats_to_f32(&mut params);
        }
        trace.entries.push(TraceEntry {
            iteration,
            loss,
            ms: started.elapsed().as_millis() as u64,
        });
        if cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || iteration == cfg.iterations) {
            hook(TrainEvent::Eval {
                iteration,
                loss,
                params: &params,
            });
        }
    }
    Ok((params, trace, rng))
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"TTCK";
const CHECKPOINT_VERSION: u8 = 0x01;

/// Stable 64-bit hash of a network spec (first 8 bytes of the SHA-256 of
/// its canonical JSON form, little endian).
pub fn spec_hash(spec: &NetworkSpec) -> u64 {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let digest = Sha256::digest(json.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Checkpoint {
    pub fn new(
        spec: &NetworkSpec,
        iteration: u64,
        precision: Precision,
        params: NetworkParams,
        rng: &ChaCha8Rng,
    ) -> Self {
        Self {
            spec_hash: spec_hash(spec),
            iteration,
            precision,
            params,
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    pub fn sampler_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor, precision: Precision) {
    buf.extend_from_slice(&(t.numel() as u32).to_le_bytes());
    match precision {
        Precision::F64 => {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Precision::F32 => {
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

fn read_tensor(
    bytes: &[u8],
    offset: &mut usize,
    template: &Tensor,
    precision: Precision,
) -> Result<Tensor> {
    let fail = || Error::Checkpoint("truncated tensor payload".to_string());
    let len_bytes: [u8; 4] = bytes
        .get(*offset..*offset + 4)
        .ok_or_else(fail)?
        .try_into()
        .unwrap();
    *offset += 4;
    let n = u32::from_le_bytes(len_bytes) as usize;
    if n != template.numel() {
        return Err(Error::Checkpoint(format!(
            "tensor length {} does not match spec shape {:?}",
            n,
            template.shape()
        )));
    }
    let width = match precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    };
    let payload = bytes.get(*offset..*offset + n * width).ok_or_else(fail)?;
    *offset += n * width;
    let mut out = Tensor::zeros(template.shape());
    match precision {
        Precision::F64 => {
            for (i, chunk) in payload.chunks_exact(8).enumerate() {
                out.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Precision::F32 => {
            for (i, chunk) in payload.chunks_exact(4).enumerate() {
                out.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
    }
    Ok(out)
}

fn write_parameter(buf: &mut Vec<u8>, p: &Parameter, precision: Precision) {
    write_tensor(buf, &p.value, precision);
    write_tensor(buf, &p.adam_m, precision);
    write_tensor(buf, &p.adam_v, precision);
    buf.extend_from_slice(&p.step_count.to_le_bytes());
}

fn read_parameter(
    bytes: &[u8],
    offset: &mut usize,
    p: &mut Parameter,
    precision: Precision,
) -> Result<()> {
    p.value = read_tensor(bytes, offset, &p.value, precision)?;
    p.adam_m = read_tensor(bytes, offset, &p.adam_m, precision)?;
    p.adam_v = read_tensor(bytes, offset, &p.adam_v, precision)?;
    let step_bytes: [u8; 8] = bytes
        .get(*offset..*offset + 8)
        .ok_or_else(|| Error::Checkpoint("truncated step count".to_string()))?
        .try_into()
        .unwrap();
    *offset += 8;
    p.step_count = u64::from_le_bytes(step_bytes);
    p.grad = Tensor::zeros(p.value.shape());
    Ok(())
}

/// Binary layout: magic + version + precision byte, spec hash, iteration,
/// generator state (seed, stream, word position), then every parameter
/// (value, Adam moments, step count) and batch-norm running statistic in
/// declaration order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(match ckpt.precision {
        Precision::F32 => 32,
        Precision::F64 => 64,
    });
    buf.extend_from_slice(&ckpt.spec_hash.to_le_bytes());
    buf.extend_from_slice(&ckpt.iteration.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_seed);
    buf.extend_from_slice(&ckpt.rng_stream.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    for tower in &ckpt.params.towers {
        for block in &tower.blocks {
            write_parameter(&mut buf, &block.weight, ckpt.precision);
            write_parameter(&mut buf, &block.bias, ckpt.precision);
            if let Some(bn) = &block.bn {
                write_parameter(&mut buf, &bn.gamma, ckpt.precision);
                write_parameter(&mut buf, &bn.beta, ckpt.precision);
                write_tensor(&mut buf, &bn.running_mean, ckpt.precision);
                write_tensor(&mut buf, &bn.running_var, ckpt.precision);
            }
            if let Some(proj) = &block.skip_proj {
                write_parameter(&mut buf, &proj.weight, ckpt.precision);
                write_parameter(&mut buf, &proj.bias, ckpt.precision);
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint for the given spec. The stored spec hash must match.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 62 {
        return Err(Error::Checkpoint("file too short".to_string()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            bytes[4]
        )));
    }
    let precision = match bytes[5] {
        32 => Precision::F32,
        64 => Precision::F64,
        other => {
            return Err(Error::Checkpoint(format!(
                "bad precision byte {}",
                other
            )))
        }
    };
    let stored_hash = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let expected_hash = spec_hash(spec);
    if stored_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "spec hash mismatch: checkpoint {:016x}, network {:016x}",
            stored_hash, expected_hash
        )));
    }
    let iteration = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let rng_seed: [u8; 32] = bytes[22..54].try_into().unwrap();
    let rng_stream = u64::from_le_bytes(bytes[54..62].try_into().unwrap());
    let rng_word_pos = u128::from_le_bytes(
        bytes
            .get(62..78)
            .ok_or_else(|| Error::Checkpoint("truncated generator state".to_string()))?
            .try_into()
            .unwrap(),
    );
    let mut offset = 78;
    // Shapes come from a freshly initialized parameter set for this spec.
    let mut params = init_network_params(spec, 0);
    for tower in params.towers.iter_mut() {
        for block in tower.blocks.iter_mut() {
            read_parameter(&bytes, &mut offset, &mut block.weight, precision)?;
            read_parameter(&bytes, &mut offset, &mut block.bias, precision)?;
            if let Some(bn) = &mut block.bn {
                read_parameter(&bytes, &mut offset, &mut bn.gamma, precision)?;
                read_parameter(&bytes, &mut offset, &mut bn.beta, precision)?;
                bn.running_mean = read_tensor(&bytes, &mut offset, &bn.running_mean, precision)?;
                bn.running_var = read_tensor(&bytes, &mut offset, &bn.running_var, precision)?;
            }
            if let Some(proj) = &mut block.skip_proj {
                read_parameter(&bytes, &mut offset, &mut proj.weight, precision)?;
                read_parameter(&bytes, &mut offset, &mut proj.bias, precision)?;
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        spec_hash: stored_hash,
        iteration,
        precision,
        params,
        rng_seed,
        rng_stream,
        rng_word_pos,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub towers: Vec<String>,
}

impl AblationArm {
    /// Parse `"t1+t2+t3"` into an arm.
    pub fn parse(text: &str) -> Result<Self> {
        let towers: Vec<String> = text.split('+').map(|s| s.trim().to_string()).collect();
        if towers.iter().any(|t| t.is_empty()) {
            return Err(Error::Config(format!("bad tower combination {:?}", text)));
        }
        Ok(Self {
            name: text.trim().to_string(),
            towers,
        })
    }
}

/// The stock comparison set: each tower alone, each repeated three times,
/// and the mixed configuration.
pub fn default_ablation_arms() -> Vec<AblationArm> {
    [
        "t1", "t2", "t3", "t1+t1+t1", "t2+t2+t2", "t3+t3+t3", "t1+t2+t3",
    ]
    .iter()
    .map(|s| AblationArm::parse(s).expect("stock arms parse"))
    .collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub per_class_f1: Vec<f64>,
    pub avg_f1: f64,
    pub mean_final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub class_names: Vec<String>,
    /// Iterations averaged into `mean_final_loss`.
    pub loss_window: usize,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("network");
        for name in self.class_names.iter().skip(1) {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",avg_f1,mean_final_loss\n");
        for row in &self.rows {
            out.push_str(&row.name);
            for f1 in &row.per_class_f1 {
                out.push_str(&format!(",{:.4}", f1));
            }
            out.push_str(&format!(",{:.4},{:.6}\n", row.avg_f1, row.mean_final_loss));
        }
        out
    }
}

/// Train every arm with the same seed and data, then evaluate raw network
/// outputs (no duplicate merging, no suppression) on the eval split at the
/// given tolerance.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    arms: &[AblationArm],
    train_ds: &Dataset,
    eval_ds: &Dataset,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    hidden_channels: usize,
    delta: f64,
    loss_window: usize,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let spec = build_network(
            &arm.towers,
            sampler.window_len,
            train_ds.feature_dim(),
            train_ds.num_classes(),
            hidden_channels,
            false,
        )?;
        let (params, trace, _) = train(&spec, train_ds, sampler, cfg, None, |_| {})?;
        let report = eval_raw(&spec, &params, eval_ds, sampler, delta)?;
        rows.push(AblationRow {
            name: arm.name.clone(),
            per_class_f1: report.per_class.iter().map(|m| m.f1).collect(),
            avg_f1: report.macro_f1,
            mean_final_loss: trace.mean_loss_of_final(loss_window),
        });
        log::info!(
            "ablation arm {}: avg F1 {:.4}, mean final loss {:.4}",
            arm.name,
            rows.last().unwrap().avg_f1,
            rows.last().unwrap().mean_final_loss
        );
    }
    Ok(AblationTable {
        rows,
        class_names: train_ds.class_names().to_vec(),
        loss_window,
    })
}

/// Sliding-window evaluation without post-processing: raw per-second argmax
/// straight from the network outputs.
pub fn eval_raw(
    spec: &NetworkSpec,
    params: &NetworkParams,
    ds: &Dataset,
    sampler: &SamplerConfig,
    delta: f64,
) -> Result<crate::metrics::EvalReport> {
    eval_dataset(spec, params, ds, sampler, delta, false, None)
}

/// Full evaluation pipeline over every sequence of a dataset: sliding
/// windows, then (optionally) duplicate merging and consecutive-run
/// suppression, then tolerance matching. Predictions from all sequences
/// pool into one report; sequence boundaries shift seconds so events from
/// different sequences can never match each other.
pub fn eval_dataset(
    spec: &NetworkSpec,
    params: &NetworkParams,
    ds: &Dataset,
    sampler: &SamplerConfig,
    delta: f64,
    postprocess: bool,
    rare_classes: Option<&std::collections::BTreeSet<usize>>,
) -> Result<crate::metrics::EvalReport> {
    use crate::infer::{
        default_rare_classes, extract_predictions, sliding_window_predict, suppress_consecutive,
        Reduction,
    };
    let mut pooled_preds = Vec::new();
    let mut pooled_events = Vec::new();
    let mut offset = 0u32;
    let gap = (delta.ceil() as u32) + 1;
    for (seq, track) in &ds.pairs {
        let curve = sliding_window_predict(
            spec,
            params,
            seq,
            track.duration_sec as usize,
            sampler,
            if postprocess {
                Reduction::MergeDuplicates
            } else {
                Reduction::Raw
            },
        )?;
        let preds = extract_predictions(&curve);
        let preds = if postprocess {
            let rare = rare_classes
                .cloned()
                .unwrap_or_else(|| default_rare_classes(track));
            suppress_consecutive(&curve, &preds, &rare)
        } else {
            preds
        };
        for p in preds {
            if p.class_id != 0 {
                pooled_preds.push(crate::infer::EventPrediction {
                    second: p.second + offset as usize,
                    ..p
                });
            }
        }
        for e in &track.events {
            pooled_events.push(crate::data::EventRecord {
                second: e.second + offset,
                class_id: e.class_id,
            });
        }
        offset += track.duration_sec + gap;
    }
    let pooled_track = crate::data::AnnotationTrack::new(
        pooled_events,
        offset.max(1),
        ds.class_names().to_vec(),
    )?;
    crate::metrics::tolerance_f1(&pooled_preds, &pooled_track, delta)
}
