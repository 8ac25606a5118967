//! Finite-difference verification of every backward pass.
//!
//! Each registered op builds a small random instance from a seed, computes
//! the analytic gradient of a scalar loss, and compares it entry by entry
//! against central differences. The harness is shipped (not test-only) so
//! the `gradcheck` subcommand can run the same checks in the field.

use crate::arch::{
    build_default_network, init_network_params, network_backward, network_forward_train,
    LayerSpec, NetworkParams, NetworkSpec, TowerSpec,
};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm1d_backward, batchnorm1d_forward_train, conv1d_backward, conv1d_forward,
    relu_backward, relu_forward, weighted_cross_entropy, BatchNormState, Conv1dSpec,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default central-difference step in 64-bit.
pub const DEFAULT_PERTURBATION: f64 = 1e-5;

/// Relative-error floor: below this magnitude the comparison is absolute.
const REL_FLOOR: f64 = 1e-3;

/// Ops the registry knows about, in report order.
pub const REGISTERED_OPS: [&str; 6] = [
    "conv1d",
    "batchnorm1d",
    "relu",
    "softmax_xent",
    "tconv_block",
    "network",
];

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare an analytic gradient against central differences of `f` at `x`.
/// Returns the maximum relative error over all entries.
pub fn central_diff_max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    perturbation: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        buf[i] = x[i] + perturbation;
        let fp = f(&buf);
        buf[i] = x[i] - perturbation;
        let fm = f(&buf);
        buf[i] = x[i];
        let numeric = (fp - fm) / (2.0 * perturbation);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// Per-op checks
// ---------------------------------------------------------------------------

/// conv1d on one geometry: perturbs input, weight and bias jointly.
pub fn check_conv1d_spec(
    spec: &Conv1dSpec,
    batch: usize,
    input_len: usize,
    seed: u64,
    perturbation: f64,
) -> Result<f64> {
    let mut r = rng(seed);
    let l_out = spec
        .output_len(input_len)
        .ok_or_else(|| Error::WindowTooShort {
            layer: "gradcheck conv1d".to_string(),
            input_len,
        })?;
    let n_in = batch * spec.in_channels * input_len;
    let n_w = spec.out_channels * spec.in_channels * spec.kernel;
    let n_b = spec.out_channels;
    let x0: Vec<f64> = rand_vec(n_in + n_w + n_b, &mut r);
    let probe = Tensor::new(
        vec![batch, spec.out_channels, l_out],
        rand_vec(batch * spec.out_channels * l_out, &mut r),
    )?;

    let split = |v: &[f64]| -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            Tensor::new(
                vec![batch, spec.in_channels, input_len],
                v[..n_in].to_vec(),
            )?,
            Tensor::new(
                vec![spec.out_channels, spec.in_channels, spec.kernel],
                v[n_in..n_in + n_w].to_vec(),
            )?,
            Tensor::new(vec![spec.out_channels], v[n_in + n_w..].to_vec())?,
        ))
    };

    let mut f = |v: &[f64]| -> f64 {
        let (input, weight, bias) = split(v).expect("shapes fixed");
        let out = conv1d_forward(&input, spec, &weight, &bias).expect("forward");
        out.data().iter().zip(probe.data()).map(|(o, p)| o * p).sum()
    };

    let (input, weight, _) = split(&x0)?;
    let (gi, gw, gb) = conv1d_backward(&input, spec, &weight, &probe)?;
    let mut analytic = Vec::with_capacity(x0.len());
    analytic.extend_from_slice(gi.data());
    analytic.extend_from_slice(gw.data());
    analytic.extend_from_slice(gb.data());
    Ok(central_diff_max_rel_error(&mut f, &x0, &analytic, perturbation))
}

fn check_conv1d(seed: u64, perturbation: f64) -> Result<f64> {
    let spec = Conv1dSpec::new(3, 2, 3, 2, 2, 1);
    check_conv1d_spec(&spec, 3, 7, seed, perturbation)
}

fn check_batchnorm(seed: u64, perturbation: f64) -> Result<f64> {
    let mut r = rng(seed);
    let (b, c, l) = (2usize, 3usize, 4usize);
    let n_x = b * c * l;
    let x0: Vec<f64> = {
        let mut v = rand_vec(n_x + 2 * c, &mut r);
        // Keep gamma away from zero so the affine path stays informative.
        for g in v[n_x..n_x + c].iter_mut() {
            *g += 1.5;
        }
        v
    };
    let probe = Tensor::new(vec![b, c, l], rand_vec(n_x, &mut r))?;

    let build = |v: &[f64]| -> (Tensor, BatchNormState) {
        let input = Tensor::new(vec![b, c, l], v[..n_x].to_vec()).expect("shape");
        let mut state = BatchNormState::new(c);
        state
            .gamma
            .value
            .data_mut()
            .copy_from_slice(&v[n_x..n_x + c]);
        state
            .beta
            .value
            .data_mut()
            .copy_from_slice(&v[n_x + c..n_x + 2 * c]);
        (input, state)
    };

    let mut f = |v: &[f64]| -> f64 {
        let (input, mut state) = build(v);
        let (out, _) = batchnorm1d_forward_train(&input, &mut state).expect("forward");
        out.data().iter().zip(probe.data()).map(|(o, p)| o * p).sum()
    };

    let (input, mut state) = build(&x0);
    let (_, cache) = batchnorm1d_forward_train(&input, &mut state)?;
    let (gi, gg, gb) = batchnorm1d_backward(&state, &cache, &probe)?;
    let mut analytic = Vec::with_capacity(x0.len());
    analytic.extend_from_slice(gi.data());
    analytic.extend_from_slice(gg.data());
    analytic.extend_from_slice(gb.data());
    Ok(central_diff_max_rel_error(&mut f, &x0, &analytic, perturbation))
}

fn check_relu(seed: u64, perturbation: f64) -> Result<f64> {
    let mut r = rng(seed);
    // Probe away from the kink: |x| > 1e-3 plus a margin wider than the step.
    let x0: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let probe = rand_vec(24, &mut r);
    let probe_t = Tensor::new(vec![24], probe)?;

    let mut f = |v: &[f64]| -> f64 {
        let input = Tensor::new(vec![24], v.to_vec()).expect("shape");
        let out = relu_forward(&input);
        out.data()
            .iter()
            .zip(probe_t.data())
            .map(|(o, p)| o * p)
            .sum()
    };

    let input = Tensor::new(vec![24], x0.clone())?;
    let gi = relu_backward(&input, &probe_t)?;
    Ok(central_diff_max_rel_error(
        &mut f,
        &x0,
        gi.data(),
        perturbation,
    ))
}

fn check_softmax_xent(seed: u64, perturbation: f64) -> Result<f64> {
    let mut r = rng(seed);
    let (b, t0, c) = (2usize, 2usize, 4usize);
    let x0 = rand_vec(b * t0 * c, &mut r);
    let targets: Vec<usize> = (0..b * t0).map(|_| r.gen_range(0..c)).collect();
    let weights: Vec<f64> = (0..c).map(|_| r.gen_range(0.05..2.0)).collect();

    let mut f = |v: &[f64]| -> f64 {
        let logits = Tensor::new(vec![b, t0, c], v.to_vec()).expect("shape");
        weighted_cross_entropy(&logits, &targets, &weights)
            .expect("loss")
            .0
    };

    let logits = Tensor::new(vec![b, t0, c], x0.clone())?;
    let (_, grad) = weighted_cross_entropy(&logits, &targets, &weights)?;
    Ok(central_diff_max_rel_error(
        &mut f,
        &x0,
        grad.data(),
        perturbation,
    ))
}

/// Flatten all parameter values of a network in declaration order.
fn flatten_params(params: &mut NetworkParams) -> Vec<f64> {
    params
        .parameters_mut()
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

fn write_params(params: &mut NetworkParams, flat: &[f64]) {
    let mut offset = 0;
    for p in params.parameters_mut() {
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    debug_assert_eq!(offset, flat.len());
}

fn flatten_grads(params: &mut NetworkParams) -> Vec<f64> {
    params
        .parameters_mut()
        .iter()
        .flat_map(|p| p.grad.data().iter().copied())
        .collect()
}

/// Gradient check of a whole network (parameters and input jointly) with a
/// weighted cross-entropy loss on top, batch norm in train mode.
fn check_network_spec(spec: &NetworkSpec, seed: u64, perturbation: f64) -> Result<f64> {
    let mut r = rng(seed);
    let mut params = init_network_params(spec, seed ^ 0x5ca1ab1e);
    let base = flatten_params(&mut params);
    let n_input = spec.input_dim * spec.input_len;
    let batch = 2usize;
    let mut x0 = base.clone();
    x0.extend(rand_vec(batch * n_input, &mut r));
    let t0 = spec.output_len();
    let targets: Vec<usize> = (0..batch * t0).map(|_| r.gen_range(0..spec.num_classes)).collect();
    let weights: Vec<f64> = (0..spec.num_classes).map(|_| r.gen_range(0.2..1.5)).collect();
    let n_params = base.len();

    let loss_of = |v: &[f64], out_params: &mut NetworkParams| -> Result<(f64, Tensor, crate::arch::NetCache)> {
        write_params(out_params, &v[..n_params]);
        let input = Tensor::new(
            vec![batch, spec.input_dim, spec.input_len],
            v[n_params..].to_vec(),
        )?;
        let (_, logits, cache) = network_forward_train(spec, out_params, &input)?;
        let (loss, grad_logits) = weighted_cross_entropy(&logits, &targets, &weights)?;
        Ok((loss, grad_logits, cache))
    };

    let mut scratch = params.clone();
    let mut f = |v: &[f64]| -> f64 {
        // Fresh BN running stats per evaluation keep the loss a pure
        // function of the perturbed vector.
        let mut p = params.clone();
        let (loss, _, _) = loss_of(v, &mut p).expect("loss");
        let _ = &mut scratch;
        loss
    };

    let mut work = params.clone();
    work.zero_grads();
    let (_, grad_logits, cache) = loss_of(&x0, &mut work)?;
    let grad_input = network_backward(spec, &mut work, &cache, &grad_logits)?;
    let mut analytic = flatten_grads(&mut work);
    analytic.extend_from_slice(grad_input.data());
    Ok(central_diff_max_rel_error(&mut f, &x0, &analytic, perturbation))
}

fn check_tconv_block(seed: u64, perturbation: f64) -> Result<f64> {
    // A single block with channel projection on the skip path, wrapped as a
    // one-layer network so the same flattening machinery applies.
    let layer = LayerSpec {
        conv: Conv1dSpec::new(3, 4, 3, 2, 1, 1),
        has_batchnorm: true,
        has_relu: true,
        has_residual: true,
    };
    let spec = NetworkSpec {
        towers: vec![TowerSpec {
            name: "block".to_string(),
            layers: vec![layer],
        }],
        input_len: 9,
        input_dim: 3,
        num_classes: 4,
        hidden_channels: 4,
        average_head: false,
    };
    check_network_spec(&spec, seed, perturbation)
}

fn check_network(seed: u64, perturbation: f64) -> Result<f64> {
    let spec = build_default_network(4, 3, 6);
    check_network_spec(&spec, seed, perturbation)
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Run one registered check by name.
pub fn finite_diff_check(op: &str, seed: u64, perturbation: f64) -> Result<GradCheckReport> {
    let (err, tol) = match op {
        "conv1d" => (check_conv1d(seed, perturbation)?, 1e-4),
        "batchnorm1d" => (check_batchnorm(seed, perturbation)?, 1e-4),
        "relu" => (check_relu(seed, perturbation)?, 1e-4),
        "softmax_xent" => (check_softmax_xent(seed, perturbation)?, 1e-4),
        "tconv_block" => (check_tconv_block(seed, perturbation)?, 1e-4),
        "network" => (check_network(seed, perturbation)?, 1e-3),
        other => return Err(Error::UnknownOp(other.to_string())),
    };
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: err,
        tolerance: tol,
    })
}

/// Run every registered check.
pub fn run_all(seed: u64, perturbation: f64) -> Result<Vec<GradCheckReport>> {
    REGISTERED_OPS
        .iter()
        .map(|op| finite_diff_check(op, seed, perturbation))
        .collect()
}

/// The conv geometry grid the acceptance suite sweeps: every stock tower
/// row plus stride/dilation/padding combinations around them.
pub fn conv_geometry_grid() -> Vec<Conv1dSpec> {
    let rows = [
        (3, 3, 1, 0),
        (3, 3, 1, 1),
        (3, 1, 1, 0),
        (3, 5, 2, 0),
        (2, 2, 1, 0),
        (3, 2, 1, 0),
        (1, 1, 1, 0),
        (2, 1, 2, 1),
        (4, 2, 2, 2),
    ];
    rows.iter()
        .map(|&(k, s, d, p)| Conv1dSpec::new(3, 2, k, s, d, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_ops_pass() {
        for report in run_all(17, DEFAULT_PERTURBATION).unwrap() {
            assert!(
                report.passed(),
                "{}: {} >= {}",
                report.op,
                report.max_rel_error,
                report.tolerance
            );
        }
    }

    #[test]
    fn conv_grid_passes() {
        for (i, spec) in conv_geometry_grid().iter().enumerate() {
            let err = check_conv1d_spec(spec, 2, 11, 100 + i as u64, DEFAULT_PERTURBATION).unwrap();
            assert!(err < 1e-4, "spec {:?}: {}", spec, err);
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(
            finite_diff_check("frobnicate", 1, DEFAULT_PERTURBATION),
            Err(Error::UnknownOp(_))
        ));
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // Negative control: a deliberately wrong analytic gradient must fail.
        let x = vec![0.3, -0.7, 1.1];
        let mut f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let mut bad = good.clone();
        bad[1] += 0.05;
        let good_err = central_diff_max_rel_error(&mut f, &x, &good, 1e-5);
        let bad_err = central_diff_max_rel_error(&mut f, &x, &bad, 1e-5);
        assert!(good_err < 1e-4);
        assert!(bad_err > 1e-4);
    }

    #[test]
    fn report_covers_every_registered_op() {
        let reports = run_all(3, DEFAULT_PERTURBATION).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
        assert_eq!(names, REGISTERED_OPS);
    }

    #[test]
    fn averaging_head_network_passes() {
        let mut spec = build_default_network(3, 3, 5);
        spec.average_head = true;
        let err = check_network_spec(&spec, 23, DEFAULT_PERTURBATION).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
