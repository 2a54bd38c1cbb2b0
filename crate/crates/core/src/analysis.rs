//! Frozen-feature analyses: per-layer linear probes, linear CKA against a
//! reference network, and CSV output for both.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{batch_indices, Batch, Dataset, RawBatch, NUM_CLASSES};
use crate::error::{ensure, Error, Result};
use crate::nn::{AuxNetwork, Mode, Model};
use crate::parallel;
use crate::partition::{balanced_sizes, Partition};
use crate::pff::{estimate_aux_memory, fused_aux_forward, measure_peak_activation, MemoryModel};
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::pool::global_avgpool;
use crate::tensor::{Element, Tensor};

/// Examples × features, row-major, for one layer of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub layer: usize,
    pub method: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(layer: usize, method: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(rows >= 2, "feature matrix needs at least 2 rows, got {rows}");
        ensure!(cols >= 1 && values.len() == rows * cols, "feature matrix shape mismatch");
        ensure!(values.iter().all(|v| v.is_finite()), "non-finite feature");
        Ok(Self {
            layer,
            method: method.into(),
            rows,
            cols,
            values,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

fn pooled<T: Element>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let t = if x.dims().len() == 4 { global_avgpool(x)? } else { x.clone() };
    Ok(t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
}

/// Global-average-pooled outputs of the given units for every example of
/// `ds`, in dataset order. Runs in eval mode and never touches parameters.
pub fn extract_features<T: Element>(
    model: &Model<T>,
    ds: &Dataset,
    layers: &[usize],
    method: &str,
    batch_size: usize,
) -> Result<Vec<FeatureMatrix>> {
    let units = model.num_units();
    for &l in layers {
        ensure!(l < units, "unknown layer {l}; the model has units 0..{units}");
    }
    ensure!(ds.shape().as_slice() == model.input_shape(), "dataset shape {:?} does not fit the model", ds.shape());
    let last = layers.iter().copied().max().map_or(0, |m| m + 1);
    let mut cols = vec![0; layers.len()];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    for idx in batch_indices(ds.len(), batch_size, None::<&mut rand_chacha::ChaCha8Rng>) {
        let b = Batch::<T>::from_raw(&RawBatch::gather(ds, &idx), &ds.normalization)?;
        let mut h = b.inputs;
        for u in 0..last {
            h = model.forward_unit(u, &h, Mode::EVAL)?;
            for (slot, _) in layers.iter().enumerate().filter(|(_, &l)| l == u) {
                let f = pooled(&h)?;
                cols[slot] = f.len() / idx.len();
                values[slot].extend(f);
            }
        }
    }
    layers
        .iter()
        .zip(cols)
        .zip(values)
        .map(|((&l, c), v)| FeatureMatrix::new(l, method, ds.len(), c, v))
        .collect()
}

/// Last unit of each of `k` balanced modules.
pub fn module_boundaries(num_units: usize, k: usize) -> Vec<usize> {
    balanced_sizes(num_units, k)
        .into_iter()
        .scan(0, |end, s| {
            *end += s;
            Some(*end - 1)
        })
        .collect()
}

/// Every unit except the classifier.
pub fn hidden_layers<T: Element>(model: &Model<T>) -> Vec<usize> {
    (0..model.num_units() - 1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
}

fn standardize(x: &FeatureMatrix, mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % x.cols]) / scale[i % x.cols])
        .collect()
}

fn logits(x: &[f64], rows: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let c = b.len();
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        for k in 0..c {
            out[r * c + k] = b[k] + (0..d).map(|j| x[r * d + j] * w[k * d + j]).sum::<f64>();
        }
    }
    out
}

fn accuracy(z: &[f64], labels: &[usize], c: usize) -> f64 {
    let hits = z
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Softmax regression on frozen features: per-column standardization from
/// the training rows, zero init, full-batch gradient descent with momentum.
pub fn linear_probe(
    train: &FeatureMatrix,
    train_labels: &[usize],
    test: &FeatureMatrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    ensure!(train.cols == test.cols, "train/test feature widths differ");
    ensure!(train_labels.len() == train.rows && test_labels.len() == test.rows, "label count mismatch");
    ensure!(train_labels.iter().chain(test_labels).all(|&y| y < NUM_CLASSES), "label out of range");
    let mut present = [false; NUM_CLASSES];
    train_labels.iter().for_each(|&y| present[y] = true);
    ensure!(present.iter().filter(|&&p| p).count() >= 2, "probe needs at least two classes");
    let (n, d, c) = (train.rows, train.cols, NUM_CLASSES);
    let mut mean = vec![0.0; d];
    for r in 0..n {
        train.row(r).iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            scale[j] += (train.row(r)[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = scale.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let xtr = standardize(train, &mean, &scale);
    let xte = standardize(test, &mean, &scale);
    let (mut w, mut b) = (vec![0.0; c * d], vec![0.0; c]);
    let (mut vw, mut vb) = (vec![0.0; c * d], vec![0.0; c]);
    for _ in 0..cfg.epochs {
        let mut z = logits(&xtr, n, d, &w, &b);
        for (row, &y) in z.chunks_exact_mut(c).zip(train_labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / s / n as f64);
            row[y] -= 1.0 / n as f64;
        }
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        for r in 0..n {
            for k in 0..c {
                let g = z[r * c + k];
                gb[k] += g;
                for j in 0..d {
                    gw[k * d + j] += g * xtr[r * d + j];
                }
            }
        }
        for (p, (v, g)) in w.iter_mut().zip(vw.iter_mut().zip(gw)) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
        for (p, (v, g)) in b.iter_mut().zip(vb.iter_mut().zip(gb)) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    }
    let train_accuracy = accuracy(&logits(&xtr, n, d, &w, &b), train_labels, c);
    let test_accuracy = accuracy(&logits(&xte, test.rows, d, &w, &b), test_labels, c);
    if !(train_accuracy.is_finite() && test_accuracy.is_finite()) {
        return Err(Error::Numeric("probe produced non-finite accuracy".into()));
    }
    Ok(ProbeResult {
        layer: train.layer,
        train_accuracy,
        test_accuracy,
        epochs: cfg.epochs,
    })
}

fn centered(x: &FeatureMatrix) -> Vec<f64> {
    let mut out = x.values.clone();
    for j in 0..x.cols {
        let m = (0..x.rows).map(|r| out[r * x.cols + j]).sum::<f64>() / x.rows as f64;
        (0..x.rows).for_each(|r| out[r * x.cols + j] -= m);
    }
    out
}

/// Squared Frobenius norm of AᵀB for row-major A (n×p) and B (n×q).
fn cross_norm_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = (0..n).map(|r| a[r * p + i] * b[r * q + j]).sum();
            total += s * s;
        }
    }
    total
}

/// Centered linear CKA.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    ensure!(x.rows == y.rows, "CKA needs matching rows ({} vs {})", x.rows, y.rows);
    let n = x.rows;
    let (xc, yc) = (centered(x), centered(y));
    let xx = cross_norm_sq(&xc, x.cols, &xc, x.cols, n).sqrt();
    let yy = cross_norm_sq(&yc, y.cols, &yc, y.cols, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Numeric("CKA of a zero-variance representation is undefined".into()));
    }
    let xy = cross_norm_sq(&xc, x.cols, &yc, y.cols, n);
    let v = xy / (xx * yy);
    match v {
        v if (0.0..=1.0).contains(&v) => Ok(v),
        v if (-1e-9..0.0).contains(&v) => Ok(0.0),
        v if v > 1.0 && v <= 1.0 + 1e-9 => Ok(1.0),
        v => Err(Error::Numeric(format!("CKA {v} outside [0, 1]"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaReport {
    pub layers: Vec<(usize, f64)>,
    pub mean: f64,
}

impl CkaReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer,cka\n");
        for (l, v) in &self.layers {
            writeln!(s, "{l},{v}").unwrap();
        }
        writeln!(s, "mean,{}", self.mean).unwrap();
        s
    }
}

/// Errors unless both models have the same architecture and parameter shapes.
pub fn check_same_architecture<T: Element>(a: &Model<T>, b: &Model<T>) -> Result<()> {
    let shapes = |m: &Model<T>| {
        m.params()
            .iter()
            .map(|p| (p.name().to_string(), p.shape().dims().to_vec()))
            .collect::<Vec<_>>()
    };
    if a.arch() != b.arch() || a.input_shape() != b.input_shape() || shapes(a) != shapes(b) {
        return Err(Error::contract(format!(
            "architecture mismatch: {} {:?} vs {} {:?}",
            a.arch(),
            a.input_shape(),
            b.arch(),
            b.input_shape()
        )));
    }
    Ok(())
}

/// Per-layer CKA between `model` and `reference` on `ds`, plus the mean.
pub fn layerwise_cka_report<T: Element>(
    model: &Model<T>,
    reference: &Model<T>,
    ds: &Dataset,
    layers: &[usize],
    batch_size: usize,
) -> Result<CkaReport> {
    check_same_architecture(model, reference)?;
    ensure!(!layers.is_empty(), "no layers to compare");
    let fa = extract_features(model, ds, layers, "a", batch_size)?;
    let fb = extract_features(reference, ds, layers, "b", batch_size)?;
    let values = parallel::map_collect(layers.len(), |i| linear_cka(&fa[i], &fb[i]));
    let layers: Vec<(usize, f64)> = layers
        .iter()
        .copied()
        .zip(values.into_iter().collect::<Result<Vec<_>>>()?)
        .collect();
    let mean = layers.iter().map(|(_, v)| v).sum::<f64>() / layers.len() as f64;
    Ok(CkaReport { layers, mean })
}

/// Linear probe at each layer, trained on `train` features, scored on `test`.
pub fn probe_layers<T: Element>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    layers: &[usize],
    cfg: &ProbeConfig,
    batch_size: usize,
) -> Result<Vec<ProbeResult>> {
    let ftr = extract_features(model, train, layers, model.arch(), batch_size)?;
    let fte = extract_features(model, test, layers, model.arch(), batch_size)?;
    let ytr: Vec<usize> = train.labels().iter().map(|&l| l as usize).collect();
    let yte: Vec<usize> = test.labels().iter().map(|&l| l as usize).collect();
    parallel::map_collect(layers.len(), |i| linear_probe(&ftr[i], &ytr, &fte[i], &yte, cfg))
        .into_iter()
        .collect()
}

pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut s = String::from("layer,acc,train_acc,epochs\n");
    for r in results {
        writeln!(s, "{},{},{},{}", r.layer, r.test_accuracy, r.train_accuracy, r.epochs).unwrap();
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Estimated and measured auxiliary-path activation bytes of one module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleMemory {
    pub module: usize,
    pub feature_shape: Vec<usize>,
    pub aux_params: usize,
    pub aux_layers: usize,
    pub plain_estimate_bytes: usize,
    pub pff_estimate_bytes: usize,
    pub measured_plain_bytes: usize,
    pub measured_pff_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub schema_version: u32,
    pub arch: String,
    pub batch_size: usize,
    pub element_size: usize,
    pub patch_n: usize,
    pub modules: Vec<ModuleMemory>,
}

/// Peak tracked bytes of one forward, loss and backward through `aux` on a
/// detached copy of `features`. Parameter buffers are not counted.
pub fn aux_path_peak<T: Element>(aux: &AuxNetwork<T>, features: &Tensor<T>, targets: &[usize], n: usize) -> Result<usize> {
    let x = features.detach_leaf();
    let (r, peak) = measure_peak_activation(|| -> Result<()> {
        let logits = fused_aux_forward(aux, &x, n, Mode::REFORWARD)?;
        softmax_cross_entropy(&logits, targets)?.backward()
    });
    r?;
    aux.params().iter().for_each(|p| p.zero_grad());
    Ok(peak)
}

/// Plain versus patch-fused memory of every independent head in `p`.
pub fn memory_report<T: Element>(p: &Partition<T>, x: &Tensor<T>, targets: &[usize], patch_n: usize) -> Result<MemoryReport> {
    let stem = p.forward_stem(x, Mode::EVAL, true)?;
    let element_size = std::mem::size_of::<T>();
    let mut modules = Vec::new();
    for (j, m) in p.modules.iter().enumerate() {
        let Some(aux) = &m.aux else { continue };
        let f = &stem.outputs[j];
        let model = MemoryModel {
            d: f.numel(),
            p: aux.num_params(),
            l: aux.num_layers(),
            n: patch_n,
        };
        modules.push(ModuleMemory {
            module: j + 1,
            feature_shape: f.dims().to_vec(),
            aux_params: model.p,
            aux_layers: model.l,
            plain_estimate_bytes: estimate_aux_memory(&model, element_size, false)?,
            pff_estimate_bytes: estimate_aux_memory(&model, element_size, true)?,
            measured_plain_bytes: aux_path_peak(aux, f, targets, 1)?,
            measured_pff_bytes: aux_path_peak(aux, f, targets, patch_n)?,
        });
    }
    Ok(MemoryReport {
        schema_version: 1,
        arch: p.model.arch().to_string(),
        batch_size: x.dims()[0],
        element_size,
        patch_n,
        modules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};
    use crate::nn::build_preset;

    fn fm(rows: usize, cols: usize, v: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix::new(0, "t", rows, cols, v).unwrap()
    }

    #[test]
    fn cka_swapped_columns_is_one() {
        let x = fm(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = fm(3, 2, vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_zero_variance_is_an_error() {
        let x = fm(3, 1, vec![2.0; 3]);
        let y = fm(3, 1, vec![1.0, 2.0, 3.0]);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Numeric(_))));
    }

    #[test]
    fn features_have_architecture_width_and_are_repeatable() {
        let ds = synthetic(Split::Test, 100, 4).unwrap();
        let m = build_preset::<f32>("miniresnet-8", &[3, 16, 16], 10, 2).unwrap();
        let a = extract_features(&m, &ds, &[3], "bp", 64).unwrap();
        assert_eq!((a[0].rows, a[0].cols), (100, 32));
        let b = extract_features(&m, &ds, &[3], "bp", 64).unwrap();
        assert_eq!(a, b);
        let first = a[0].values[0];
        assert!(a[0].values.iter().any(|&v| v != first));
        assert!(extract_features(&m, &ds, &[8], "bp", 64).is_err());
    }

    #[test]
    fn separable_clusters_probe_perfectly() {
        let make = |n: usize| {
            let mut v = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 2;
                v.extend([c as f64 * 4.0 + (i % 5) as f64 * 0.1, (i % 3) as f64 * 0.1]);
                y.push(c);
            }
            (fm(n, 2, v), y)
        };
        let (tr, ytr) = make(40);
        let (te, yte) = make(20);
        let r = linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        let single = vec![0; 40];
        assert!(linear_probe(&tr, &single, &te, &yte, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn memory_report_covers_every_head() {
        let m = build_preset::<f32>("miniresnet-8", &[3, 32, 32], 10, 2).unwrap();
        let p = Partition::new(m, 4, Some(2), &crate::nn::AuxHeadSpec::default(), 2).unwrap();
        let x = Tensor::new(vec![0.5f32; 4 * 3 * 32 * 32], [4, 3, 32, 32]).unwrap();
        let r = memory_report(&p, &x, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(r.modules.len(), 3);
        for m in &r.modules {
            assert!(m.measured_pff_bytes < m.measured_plain_bytes);
            assert!(m.pff_estimate_bytes < m.plain_estimate_bytes);
        }
        assert_eq!(r, memory_report(&p, &x, &[0, 1, 2, 3], 2).unwrap());
    }

    #[test]
    fn boundaries() {
        assert_eq!(module_boundaries(8, 4), vec![1, 3, 5, 7]);
        assert_eq!(module_boundaries(8, 3), vec![2, 5, 7]);
    }

    #[test]
    fn self_report_and_mismatch() {
        let ds = synthetic(Split::Test, 20, 1).unwrap();
        let m = build_preset::<f64>("miniresnet-8", &[3, 16, 16], 10, 2).unwrap();
        let r = layerwise_cka_report(&m, &m, &ds, &[0, 3, 6], 10).unwrap();
        assert!(r.layers.iter().all(|(_, v)| (v - 1.0).abs() < 1e-12));
        assert!(r.csv().starts_with("layer,cka\n0,"));
        let other = build_preset::<f64>("mlp-4", &[3, 16, 16], 10, 2).unwrap();
        assert!(matches!(
            layerwise_cka_report(&m, &other, &ds, &[0], 10),
            Err(Error::Contract(_))
        ));
    }
}
