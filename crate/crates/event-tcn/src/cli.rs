//! Command implementations behind the `event-tcn` binary.
//!
//! Each function is a thin pipeline over the library: load data, run the
//! relevant stage, write CSV artifacts. Everything randomized flows from
//! the root seed in the run configuration.

use crate::arch::{
    build_network, output_length, probe_receptive_field, receptive_field, rf_tap_set, NetworkSpec,
    TowerSpec,
};
use crate::config::{parse_delta_grid, RunConfig};
use crate::data::{
    gen_synthetic, load_annotations, load_features, save_annotations, save_features, Dataset,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_all, GradCheckReport, DEFAULT_PERTURBATION};
use crate::infer::{
    sliding_window_predict, spots_to_csv, watershed_all_classes, Reduction, SpotCandidate,
};
use crate::metrics::{average_map, map_curve, pr_curve_spots};
use crate::train::{
    default_ablation_arms, eval_dataset, load_checkpoint, run_ablation, save_checkpoint,
    spec_hash, AblationArm, Checkpoint, TrainEvent,
};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn feature_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.fseq"))
}

fn annotation_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.events"))
}

/// Load one split as a single-sequence dataset.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let seq = load_features(&feature_path(dir, split))?;
    let track = load_annotations(&annotation_path(dir, split))?;
    Dataset::new(vec![(seq, track)])
}

/// Generate synthetic train/val/test splits into `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.synth.validate()?;
    fs::create_dir_all(out_dir)?;
    for (idx, split) in SPLITS.iter().enumerate() {
        let spec = cfg.synth.split_spec(idx, cfg.seed);
        let (seq, track) = gen_synthetic(&spec)?;
        save_features(&feature_path(out_dir, split), &seq)?;
        save_annotations(&annotation_path(out_dir, split), &track)?;
        println!(
            "{}: {}s, {} frames, {} events -> {}",
            split,
            track.duration_sec,
            seq.num_frames,
            track.events.len(),
            feature_path(out_dir, split).display()
        );
    }
    Ok(())
}

/// Build the configured network against the dimensions found in the data.
pub fn network_from_config(cfg: &RunConfig, ds: &Dataset) -> Result<NetworkSpec> {
    build_network(
        &cfg.network.towers,
        cfg.network.input_len,
        ds.feature_dim(),
        ds.num_classes(),
        cfg.network.hidden_channels,
        cfg.network.average_head,
    )
}

fn check_window_config(cfg: &RunConfig) -> Result<()> {
    if cfg.sampler.window_len != cfg.network.input_len {
        return Err(Error::Config(format!(
            "sampler.window_len {} != network.input_len {}",
            cfg.sampler.window_len, cfg.network.input_len
        )));
    }
    Ok(())
}

/// Train on the train split, reporting validation F1 periodically; writes
/// `checkpoint.ttck` and `loss_trace.csv` into `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    check_window_config(cfg)?;
    let train_ds = load_split(data_dir, "train")?;
    let val_ds = load_split(data_dir, "val")?;
    let spec = network_from_config(cfg, &train_ds)?;
    let sampler = cfg.sampler.to_config(cfg.seed);
    let train_cfg = cfg.train.to_config(cfg.seed);
    let resume_ckpt = match resume {
        Some(path) => Some(load_checkpoint(path, &spec)?),
        None => None,
    };
    fs::create_dir_all(out_dir)?;

    let delta = cfg.eval.delta_sec;
    let hook = |event: TrainEvent| {
        let TrainEvent::Eval {
            iteration,
            loss,
            params,
        } = event;
        match eval_dataset(&spec, params, &val_ds, &sampler, delta, false, None) {
            Ok(report) => println!(
                "iter {:>6}  loss {:.4}  val macro F1 {:.4}",
                iteration, loss, report.macro_f1
            ),
            Err(e) => println!("iter {:>6}  loss {:.4}  val eval failed: {}", iteration, loss, e),
        }
    };
    let (params, trace, rng) = crate::train::train(
        &spec,
        &train_ds,
        &sampler,
        &train_cfg,
        resume_ckpt,
        hook,
    )?;
    let ckpt = Checkpoint::new(
        &spec,
        train_cfg.iterations,
        train_cfg.precision,
        params,
        &rng,
    );
    save_checkpoint(&out_dir.join("checkpoint.ttck"), &ckpt)?;
    fs::write(out_dir.join("loss_trace.csv"), trace.to_csv())?;
    println!(
        "checkpoint written: {} (spec {:016x})",
        out_dir.join("checkpoint.ttck").display(),
        spec_hash(&spec)
    );
    Ok(())
}

/// Evaluate a checkpoint on one split with the detection pipeline; writes
/// `eval_report.csv` and `curve.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    split: &str,
) -> Result<()> {
    check_window_config(cfg)?;
    let ds = load_split(data_dir, split)?;
    let spec = network_from_config(cfg, &ds)?;
    let ckpt = load_checkpoint(checkpoint, &spec)?;
    let sampler = cfg.sampler.to_config(cfg.seed);
    let rare: Option<BTreeSet<usize>> = if cfg.eval.rare_classes.is_empty() {
        None
    } else {
        Some(cfg.eval.rare_classes.iter().copied().collect())
    };
    let report = eval_dataset(
        &spec,
        &ckpt.params,
        &ds,
        &sampler,
        cfg.eval.delta_sec,
        cfg.eval.postprocess,
        rare.as_ref(),
    )?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("eval_report.csv"), report.to_csv())?;
    // Per-second probability curve of the split's first sequence.
    let (seq, track) = &ds.pairs[0];
    let curve = sliding_window_predict(
        &spec,
        &ckpt.params,
        seq,
        track.duration_sec as usize,
        &sampler,
        if cfg.eval.postprocess {
            Reduction::MergeDuplicates
        } else {
            Reduction::Raw
        },
    )?;
    fs::write(out_dir.join("curve.csv"), curve.to_csv(ds.class_names()))?;
    print!("{}", report.to_csv());
    println!(
        "macro F1 {:.4} at delta {}s ({})",
        report.macro_f1,
        cfg.eval.delta_sec,
        if cfg.eval.postprocess {
            "with post-processing"
        } else {
            "raw outputs"
        }
    );
    Ok(())
}

/// Spot sparse events with a checkpoint: watershed proposals, mAP over the
/// tolerance grid, PR curves. Writes `spots.csv`, `map_vs_delta.csv`,
/// `pr_curve.csv` and `curve.csv`.
pub fn cmd_spot(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    split: &str,
) -> Result<()> {
    check_window_config(cfg)?;
    let ds = load_split(data_dir, split)?;
    let spec = network_from_config(cfg, &ds)?;
    let ckpt = load_checkpoint(checkpoint, &spec)?;
    let sampler = cfg.sampler.to_config(cfg.seed);
    let grid = parse_delta_grid(&cfg.spot.delta_grid)?;
    fs::create_dir_all(out_dir)?;

    let mut all_spots: Vec<SpotCandidate> = Vec::new();
    let mut curve_csv: Option<String> = None;
    // Spots pool across sequences with the same boundary shift the eval
    // pipeline uses, so one grid sweep covers the whole split.
    let mut offset = 0f64;
    let gap = grid.last().copied().unwrap_or(1.0).ceil() + 1.0;
    let mut pooled_events = Vec::new();
    for (seq, track) in &ds.pairs {
        let curve = sliding_window_predict(
            &spec,
            &ckpt.params,
            seq,
            track.duration_sec as usize,
            &sampler,
            Reduction::MergeDuplicates,
        )?;
        if curve_csv.is_none() {
            curve_csv = Some(curve.to_csv(ds.class_names()));
        }
        for spot in watershed_all_classes(&curve, cfg.spot.threshold)? {
            all_spots.push(SpotCandidate {
                center_sec: spot.center_sec + offset,
                start_sec: spot.start_sec + offset as usize,
                end_sec: spot.end_sec + offset as usize,
                ..spot
            });
        }
        for e in &track.events {
            pooled_events.push(crate::data::EventRecord {
                second: e.second + offset as u32,
                class_id: e.class_id,
            });
        }
        offset += track.duration_sec as f64 + gap;
    }
    let pooled_track = crate::data::AnnotationTrack::new(
        pooled_events,
        (offset as u32).max(1),
        ds.class_names().to_vec(),
    )?;

    fs::write(
        out_dir.join("spots.csv"),
        spots_to_csv(&all_spots, ds.class_names()),
    )?;
    if let Some(csv) = curve_csv {
        fs::write(out_dir.join("curve.csv"), csv)?;
    }

    let curve_points = map_curve(&all_spots, &pooled_track, &grid)?;
    let mut map_csv = String::from("delta,map\n");
    for (delta, map) in &curve_points {
        map_csv.push_str(&format!("{},{:.6}\n", delta, map));
    }
    fs::write(out_dir.join("map_vs_delta.csv"), map_csv)?;

    let pr_delta = *grid.last().expect("grid non-empty");
    let mut pr_csv = String::from("class,recall,precision\n");
    for class_id in 1..ds.num_classes() {
        for (recall, precision) in pr_curve_spots(&all_spots, &pooled_track, class_id, pr_delta) {
            pr_csv.push_str(&format!(
                "{},{:.6},{:.6}\n",
                ds.class_names()[class_id],
                recall,
                precision
            ));
        }
    }
    fs::write(out_dir.join("pr_curve.csv"), pr_csv)?;

    let avg = average_map(&all_spots, &pooled_track, &grid)?;
    for (delta, map) in &curve_points {
        println!("mAP at delta {:>5.1}s: {:.4}", delta, map);
    }
    println!("average mAP over the grid: {:.4} ({} spots)", avg, all_spots.len());
    Ok(())
}

/// Receptive-field report: per-layer output lengths and the analytic vs
/// probed field of every tower.
pub fn cmd_rf(cfg: &RunConfig) -> Result<String> {
    let spec = build_network(
        &cfg.network.towers,
        cfg.network.input_len,
        cfg.synth.feature_dim,
        cfg.synth.num_classes,
        cfg.network.hidden_channels.min(16),
        cfg.network.average_head,
    )?;
    let mut out = String::new();
    out.push_str(&format!(
        "input: {} frames, {} towers\n",
        spec.input_len,
        spec.towers.len()
    ));
    for (ti, tower) in spec.towers.iter().enumerate() {
        let lens = output_length(tower, spec.input_len)?;
        let info = receptive_field(tower);
        out.push_str(&format!(
            "tower {} ({}): lengths {} -> {:?}\n",
            ti, tower.name, spec.input_len, lens
        ));
        // Cumulative field after each layer.
        for depth in 1..=tower.layers.len() {
            let prefix = TowerSpec {
                name: tower.name.clone(),
                layers: tower.layers[..depth].to_vec(),
            };
            let cum = receptive_field(&prefix);
            let c = &tower.layers[depth - 1].conv;
            out.push_str(&format!(
                "  layer {} (k={}, s={}, d={}, p={}): rf {}, jump {}, left offset {}\n",
                depth - 1,
                c.kernel,
                c.stride,
                c.dilation,
                c.padding,
                cum.rf,
                cum.jump,
                cum.left_offset
            ));
        }
        let probed = probe_receptive_field(&spec, ti, cfg.seed)?;
        let mut agree = true;
        for (node, probe_set) in probed.iter().enumerate() {
            let analytic = rf_tap_set(tower, node, spec.input_len)?;
            if probe_set != &analytic {
                agree = false;
            }
        }
        out.push_str(&format!(
            "  full tower: rf {} frames, jump {}, left offset {}; probe agreement: {}\n",
            info.rf,
            info.jump,
            info.left_offset,
            if agree { "yes" } else { "NO" }
        ));
    }
    Ok(out)
}

/// Run every registered gradient check. Returns the rendered report and
/// whether all ops passed.
pub fn cmd_gradcheck(seed: u64) -> Result<(String, bool)> {
    let reports = run_all(seed, DEFAULT_PERTURBATION)?;
    let mut out = String::new();
    let mut all_ok = true;
    for GradCheckReport {
        op,
        max_rel_error,
        tolerance,
    } in &reports
    {
        let ok = max_rel_error < tolerance;
        all_ok &= ok;
        out.push_str(&format!(
            "{:<14} max rel error {:.3e} (tolerance {:.0e}) {}\n",
            op,
            max_rel_error,
            tolerance,
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    Ok((out, all_ok))
}

/// Tower-combination study: trains every arm with the shared seed and
/// writes `ablation.csv`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    arms_text: Option<&str>,
) -> Result<()> {
    check_window_config(cfg)?;
    let arms: Vec<AblationArm> = match arms_text {
        Some(text) => text
            .split(',')
            .map(AblationArm::parse)
            .collect::<Result<Vec<_>>>()?,
        None => default_ablation_arms(),
    };
    let train_ds = load_split(data_dir, "train")?;
    let eval_ds = load_split(data_dir, "test")?;
    let sampler = cfg.sampler.to_config(cfg.seed);
    let train_cfg = cfg.train.to_config(cfg.seed);
    let loss_window = 1000usize.min(train_cfg.iterations as usize).max(1);
    let table = run_ablation(
        &arms,
        &train_ds,
        &eval_ds,
        &sampler,
        &train_cfg,
        cfg.network.hidden_channels,
        cfg.eval.delta_sec,
        loss_window,
    )?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.synth.duration_sec = 160;
        cfg.synth.events_per_class = 8;
        cfg.synth.feature_dim = 6;
        cfg.network.hidden_channels = 8;
        cfg.train.iterations = 12;
        cfg.train.batch_size = 4;
        cfg.train.eval_every = 0;
        cfg
    }

    #[test]
    fn synth_train_eval_pipeline_runs() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        cmd_synth(&cfg, &data).unwrap();
        for split in SPLITS {
            assert!(feature_path(&data, split).exists());
            assert!(annotation_path(&data, split).exists());
        }
        cmd_train(&cfg, &data, &run, None).unwrap();
        assert!(run.join("checkpoint.ttck").exists());
        assert!(run.join("loss_trace.csv").exists());
        cmd_eval(&cfg, &run.join("checkpoint.ttck"), &data, &run, "test").unwrap();
        let report = fs::read_to_string(run.join("eval_report.csv")).unwrap();
        assert!(report.starts_with("class,precision,recall,f1,tp,fp,fn"));
        let lines: usize = report.lines().count();
        // Header + 3 event classes + average row.
        assert_eq!(lines, 5);
        let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
        assert!(curve.starts_with("second,background,event1,event2,event3"));
    }

    #[test]
    fn synth_is_byte_stable_across_runs() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        cmd_synth(&cfg, &a).unwrap();
        cmd_synth(&cfg, &b).unwrap();
        for split in SPLITS {
            assert_eq!(
                fs::read(feature_path(&a, split)).unwrap(),
                fs::read(feature_path(&b, split)).unwrap()
            );
            assert_eq!(
                fs::read(annotation_path(&a, split)).unwrap(),
                fs::read(annotation_path(&b, split)).unwrap()
            );
        }
    }

    #[test]
    fn synth_event_totals_follow_allocation() {
        let mut cfg = tiny_config();
        cfg.synth.duration_sec = 1200;
        cfg.synth.events_per_class = 50;
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_synth(&cfg, &data).unwrap();
        let mut total = 0;
        for split in SPLITS {
            total += load_annotations(&annotation_path(&data, split))
                .unwrap()
                .events
                .len();
        }
        assert_eq!(total, 150);
    }

    #[test]
    fn synth_rejects_bad_fractions() {
        let mut cfg = tiny_config();
        cfg.synth.split_fractions = vec![0.5, 0.5, 0.5];
        let dir = tempdir().unwrap();
        assert!(matches!(
            cmd_synth(&cfg, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rf_report_shows_stock_fields() {
        let cfg = tiny_config();
        let report = cmd_rf(&cfg).unwrap();
        assert!(report.contains("rf 27"), "{report}");
        assert!(report.contains("rf 20"), "{report}");
        assert!(report.contains("rf 18"), "{report}");
        // First-block rows carry the 3/5/2 fields.
        assert!(report.contains("layer 0 (k=3, s=3, d=1, p=0): rf 3"));
        assert!(report.contains("layer 0 (k=3, s=5, d=2, p=0): rf 5"));
        assert!(report.contains("layer 0 (k=2, s=2, d=1, p=0): rf 2"));
        assert_eq!(report.matches("probe agreement: yes").count(), 3);
    }

    #[test]
    fn rf_reports_named_layer_on_short_window() {
        let mut cfg = tiny_config();
        cfg.network.input_len = 4;
        match cmd_rf(&cfg) {
            Err(Error::WindowTooShort { layer, .. }) => {
                assert!(layer.starts_with("t1["), "{layer}")
            }
            other => panic!("expected WindowTooShort, got {other:?}"),
        }
    }

    #[test]
    fn gradcheck_command_reports_all_ops() {
        let (report, ok) = cmd_gradcheck(5).unwrap();
        assert!(ok);
        for op in crate::gradcheck::REGISTERED_OPS {
            assert!(report.contains(op), "missing {op} in:\n{report}");
        }
    }

    #[test]
    fn towers_flag_builds_repeated_configuration() {
        let mut cfg = tiny_config();
        cfg.network.towers = vec!["t2".into(), "t2".into(), "t2".into()];
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_synth(&cfg, &data).unwrap();
        let ds = load_split(&data, "train").unwrap();
        let spec = network_from_config(&cfg, &ds).unwrap();
        assert_eq!(spec.towers.len(), 3);
        assert!(spec.towers.iter().all(|t| t.name == "t2"));
    }
}
