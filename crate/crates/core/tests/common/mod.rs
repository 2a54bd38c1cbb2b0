#![allow(dead_code)]

use hpff::config::Method;
use hpff::data::{synthetic, Batch, RawBatch, Split};
use hpff::nn::{build_preset, AuxHeadSpec};
use hpff::optim::{ParamRef, SgdConfig};
use hpff::tensor::ops::{mul, sum};
use hpff::tensor::Tensor;
use hpff::trainer::{LossWeights, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Coordinates checked per tensor; larger tensors are sampled.
pub const GRAD_SAMPLES: usize = 120;

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, so any output shape can be checked.
pub fn project(out: &Tensor<f64>) -> Tensor<f64> {
    if out.numel() == 1 {
        return out.clone();
    }
    let r = Tensor::new(uniform(out.numel(), 99), out.shape().clone()).unwrap();
    sum(&mul(out, &r).unwrap())
}

fn coords(n: usize, seed: u64) -> Vec<usize> {
    if n <= GRAD_SAMPLES {
        return (0..n).collect();
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..GRAD_SAMPLES).map(|_| r.gen_range(0..n)).collect()
}

/// ‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, 1e-12).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let d: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let a: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    d / (a + n).max(1e-12)
}

/// Worst relative error over all inputs of `f` against central differences.
pub fn check_inputs(f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>, inputs: &[(Vec<f64>, Vec<usize>)]) -> f64 {
    let leaves: Vec<_> = inputs.iter().map(|(v, s)| Tensor::leaf(v.clone(), s.clone()).unwrap()).collect();
    project(&f(&leaves)).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, (v, _)) in inputs.iter().enumerate() {
        let grad = leaves[i].grad().unwrap_or_else(|| vec![0.0; v.len()]);
        let at = |k: usize, delta: f64| {
            let ts: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(j, (vj, s))| {
                    let mut d = vj.clone();
                    if j == i {
                        d[k] += delta;
                    }
                    Tensor::new(d, s.clone()).unwrap()
                })
                .collect();
            project(&f(&ts)).item()
        };
        let ks = coords(v.len(), i as u64);
        let numeric: Vec<f64> = ks.iter().map(|&k| (at(k, GRAD_H) - at(k, -GRAD_H)) / (2.0 * GRAD_H)).collect();
        let analytic: Vec<f64> = ks.iter().map(|&k| grad[k]).collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check for parameters read inside `f`.
pub fn check_params(f: impl Fn() -> Tensor<f64>, params: &[ParamRef<f64>]) -> f64 {
    params.iter().for_each(|p| p.zero_grad());
    project(&f()).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.values();
        let at = |k: usize, delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            p.set_values(v).unwrap();
            let out = project(&f()).item();
            p.set_values(base.clone()).unwrap();
            out
        };
        let ks = coords(p.numel(), 1000 + i as u64);
        let numeric: Vec<f64> = ks.iter().map(|&k| (at(k, GRAD_H) - at(k, -GRAD_H)) / (2.0 * GRAD_H)).collect();
        let analytic: Vec<f64> = ks.iter().map(|&k| grad[k]).collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    params.iter().for_each(|p| p.zero_grad());
    worst
}

pub fn toy_batch(seed: u64, n: usize) -> Batch<f64> {
    let ds = synthetic(Split::Train, n, seed).unwrap();
    let idx: Vec<_> = (0..n).collect();
    Batch::from_raw(&RawBatch::gather(&ds, &idx), &ds.normalization).unwrap()
}

pub fn unit_weights() -> LossWeights {
    LossWeights {
        independent: 1.0,
        cascade: 1.0,
        final_loss: 1.0,
    }
}

pub fn small_aux() -> AuxHeadSpec {
    AuxHeadSpec {
        reduce_channels: 8,
        pooled_size: 2,
        hidden_dim: 16,
        num_classes: 10,
    }
}

/// miniresnet-8 on 3×16×16 inputs with a fixed init seed.
pub fn trainer(method: Method, k: usize, weights: LossWeights, seed: u64) -> Trainer<f64> {
    let model = build_preset("miniresnet-8", &[3, 16, 16], 10, seed).unwrap();
    Trainer::new(model, method, k, Some(2), 2, &small_aux(), weights, SgdConfig::default(), seed).unwrap()
}

pub fn grads(params: &[ParamRef<f64>]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect()
}

/// Every differentiable op and composite with its worst relative gradient error.
pub fn gradcheck_suite() -> Vec<(&'static str, f64)> {
    use hpff::nn::{build_aux_head, build_backbone, LayerKind, LayerSpec, Mode};
    use hpff::pff::fused_aux_forward;
    use hpff::tensor::conv::{conv2d_with, ConvAlgo};
    use hpff::tensor::norm::{batchnorm2d, BnMode, RunningStats};
    use hpff::tensor::ops::*;
    use hpff::tensor::pool::*;

    let v = |n: usize, s: u64| uniform(n, s);
    let x4 = |s: u64| (v(2 * 3 * 5 * 5, s), vec![2, 3, 5, 5]);
    let mut out = Vec::new();
    out.push(("add", check_inputs(|t| add(&t[0], &t[1]).unwrap(), &[(v(6, 1), vec![2, 3]), (v(6, 2), vec![2, 3])])));
    out.push(("mul", check_inputs(|t| mul(&t[0], &t[1]).unwrap(), &[(v(6, 3), vec![2, 3]), (v(6, 4), vec![2, 3])])));
    out.push(("scalar_mul", check_inputs(|t| scalar_mul(&t[0], -1.7), &[(v(6, 5), vec![2, 3])])));
    out.push(("sum", check_inputs(|t| sum(&t[0]), &[(v(6, 6), vec![2, 3])])));
    out.push(("mean", check_inputs(|t| mean(&t[0]), &[(v(6, 7), vec![2, 3])])));
    out.push(("relu", check_inputs(|t| relu(&t[0]), &[(v(12, 8), vec![3, 4])])));
    out.push(("matmul", check_inputs(|t| matmul(&t[0], &t[1]).unwrap(), &[(v(6, 9), vec![2, 3]), (v(12, 10), vec![3, 4])])));
    out.push((
        "linear",
        check_inputs(
            |t| linear(&t[0], &t[1], Some(&t[2])).unwrap(),
            &[(v(6, 11), vec![2, 3]), (v(12, 12), vec![4, 3]), (v(4, 13), vec![4])],
        ),
    ));
    out.push(("reshape", check_inputs(|t| reshape(&t[0], [3, 2]).unwrap(), &[(v(6, 14), vec![2, 3])])));
    out.push(("flatten", check_inputs(|t| flatten(&t[0]).unwrap(), &[x4(15)])));
    out.push((
        "softmax_cross_entropy",
        check_inputs(|t| softmax_cross_entropy(&t[0], &[1, 3]).unwrap(), &[(v(8, 16), vec![2, 4])]),
    ));
    out.push(("spatial_window", check_inputs(|t| spatial_window(&t[0], 2, 1, 3, 3).unwrap(), &[x4(17)])));
    for (name, algo) in [("conv2d_direct", ConvAlgo::Direct), ("conv2d_im2col", ConvAlgo::Im2col)] {
        out.push((
            name,
            check_inputs(
                |t| conv2d_with(&t[0], &t[1], Some(&t[2]), 2, 1, algo).unwrap(),
                &[x4(18), (v(4 * 3 * 3 * 3, 19), vec![4, 3, 3, 3]), (v(4, 20), vec![4])],
            ),
        ));
    }
    out.push(("avgpool2d", check_inputs(|t| avgpool2d(&t[0], 2, 2).unwrap(), &[x4(21)])));
    out.push(("adaptive_avgpool2d", check_inputs(|t| adaptive_avgpool2d(&t[0], 2).unwrap(), &[x4(22)])));
    out.push(("global_avgpool", check_inputs(|t| global_avgpool(&t[0]).unwrap(), &[x4(23)])));
    out.push(("maxpool2d", check_inputs(|t| maxpool2d(&t[0], 2, 2).unwrap(), &[x4(24)])));
    let stats = RunningStats::<f64>::new(3);
    out.push((
        "batchnorm2d",
        check_inputs(
            |t| batchnorm2d(&t[0], &t[1], &t[2], &stats, BnMode::Train { update_running: false }).unwrap(),
            &[x4(25), (v(3, 26), vec![3]), (v(3, 27), vec![3])],
        ),
    ));

    let aux = build_aux_head::<f64>(&small_aux(), &[6, 4, 4], "aux", 3).unwrap();
    let fx = (v(2 * 6 * 4 * 4, 28), vec![2, 6, 4, 4]);
    let fixed = Tensor::new(fx.0.clone(), fx.1.clone()).unwrap();
    out.push(("aux_head.input", check_inputs(|t| aux.forward(&t[0], Mode::REFORWARD).unwrap(), &[fx.clone()])));
    out.push(("aux_head.params", check_params(|| aux.forward(&fixed, Mode::REFORWARD).unwrap(), &aux.params())));
    out.push((
        "fused_pff_head.input",
        check_inputs(|t| fused_aux_forward(&aux, &t[0], 2, Mode::REFORWARD).unwrap(), &[fx.clone()]),
    ));
    out.push((
        "fused_pff_head.params",
        check_params(|| fused_aux_forward(&aux, &fixed, 2, Mode::REFORWARD).unwrap(), &aux.params()),
    ));

    let specs = [
        LayerSpec::new(LayerKind::ResidualBlock, 3, 4, 2),
        LayerSpec::new(LayerKind::GlobalPoolFc, 4, 10, 1),
    ];
    let block = build_backbone::<f64>("block", &specs, &[3, 6, 6], 10, 4).unwrap();
    let bx = (v(2 * 3 * 6 * 6, 29), vec![2, 3, 6, 6]);
    let bfixed = Tensor::new(bx.0.clone(), bx.1.clone()).unwrap();
    out.push((
        "residual_block.input",
        check_inputs(|t| block.forward_unit(0, &t[0], Mode::REFORWARD).unwrap(), &[bx]),
    ));
    out.push((
        "residual_block.params",
        check_params(|| block.forward_unit(0, &bfixed, Mode::REFORWARD).unwrap(), &block.unit_params(0)),
    ));
    out
}
