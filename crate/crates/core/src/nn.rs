//! Backbones built from sliceable units, auxiliary heads and classifier heads.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::optim::{ParamRef, Parameter};
use crate::seed;
use crate::tensor::conv::conv2d;
use crate::tensor::norm::{batchnorm2d, BnMode, RunningStats};
use crate::tensor::ops::{add, flatten, linear, relu, reshape};
use crate::tensor::pool::{adaptive_avgpool2d, avgpool2d, global_avgpool};
use crate::tensor::{Element, Tensor};

/// How a forward pass treats parameters and batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub grad: bool,
    pub update_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        grad: true,
        update_stats: true,
    };
    /// Train-mode normalization without touching running statistics.
    pub const REFORWARD: Mode = Mode {
        train: true,
        grad: true,
        update_stats: false,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        grad: false,
        update_stats: false,
    };

    fn bn(&self) -> BnMode {
        if self.train {
            BnMode::Train {
                update_running: self.update_stats,
            }
        } else {
            BnMode::Eval
        }
    }

    fn p<T: Element>(&self, p: &ParamRef<T>) -> Tensor<T> {
        if self.grad {
            p.tensor()
        } else {
            p.frozen()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvBnRelu,
    ResidualBlock,
    Avgpool,
    GlobalPoolFc,
    /// Flatten, linear, relu; the output is viewed as `channels_out × spatial × spatial`.
    LinearRelu,
    /// Flatten then linear.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub spatial: usize,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn new(kind: LayerKind, channels_in: usize, channels_out: usize, stride: usize) -> Self {
        Self {
            kind,
            channels_in,
            channels_out,
            stride,
            spatial: 1,
        }
    }

    fn is_classifier(&self) -> bool {
        matches!(self.kind, LayerKind::GlobalPoolFc | LayerKind::Fc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxHeadSpec {
    pub reduce_channels: usize,
    pub pooled_size: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for AuxHeadSpec {
    fn default() -> Self {
        Self {
            reduce_channels: 32,
            pooled_size: 2,
            hidden_dim: 64,
            num_classes: 10,
        }
    }
}

impl AuxHeadSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.reduce_channels > 0, "aux head: reduce_channels must be positive");
        ensure!(self.pooled_size >= 1, "aux head: pooled_size must be >= 1");
        ensure!(self.num_classes >= 2, "aux head: num_classes must be >= 2");
        Ok(())
    }
}

fn uniform_param<T: Element>(name: String, shape: Vec<usize>, bound: f64, seed: u64) -> ParamRef<T> {
    let mut rng = seed::rng(seed, &name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Parameter::new(name, shape, data)
}

/// Kaiming-uniform (fan-in, relu gain) weight.
fn kaiming<T: Element>(name: String, shape: Vec<usize>, fan_in: usize, seed: u64) -> ParamRef<T> {
    uniform_param(name, shape, (6.0 / fan_in as f64).sqrt(), seed)
}

fn bias<T: Element>(name: String, len: usize, fan_in: usize, seed: u64) -> ParamRef<T> {
    uniform_param(name, vec![len], 1.0 / (fan_in as f64).sqrt(), seed)
}

#[derive(Debug, Clone)]
struct Conv<T: Element> {
    w: ParamRef<T>,
    b: Option<ParamRef<T>>,
    stride: usize,
    pad: usize,
}

impl<T: Element> Conv<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, with_bias: bool, seed: u64) -> Self {
        let fan_in = cin * k * k;
        Self {
            w: kaiming(format!("{prefix}.weight"), vec![cout, cin, k, k], fan_in, seed),
            b: with_bias.then(|| bias(format!("{prefix}.bias"), cout, fan_in, seed)),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let b = self.b.as_ref().map(|b| mode.p(b));
        conv2d(x, &mode.p(&self.w), b.as_ref(), self.stride, self.pad)
    }

    fn params(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.w.clone());
        out.extend(self.b.clone());
    }
}

#[derive(Debug, Clone)]
struct Bn<T: Element> {
    name: String,
    gamma: ParamRef<T>,
    beta: ParamRef<T>,
    stats: Arc<RunningStats<T>>,
}

impl<T: Element> Bn<T> {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            name: prefix.to_string(),
            gamma: Parameter::new(format!("{prefix}.weight"), [c], vec![T::one(); c]),
            beta: Parameter::new(format!("{prefix}.bias"), [c], vec![T::zero(); c]),
            stats: Arc::new(RunningStats::new(c)),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm2d(x, &mode.p(&self.gamma), &mode.p(&self.beta), &self.stats, mode.bn())
    }

    fn params(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

#[derive(Debug, Clone)]
struct Dense<T: Element> {
    w: ParamRef<T>,
    b: ParamRef<T>,
}

impl<T: Element> Dense<T> {
    fn new(prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        Self {
            w: kaiming(format!("{prefix}.weight"), vec![fan_out, fan_in], fan_in, seed),
            b: bias(format!("{prefix}.bias"), fan_out, fan_in, seed),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        linear(x, &mode.p(&self.w), Some(&mode.p(&self.b)))
    }

    fn params(&self, out: &mut Vec<ParamRef<T>>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

#[derive(Debug, Clone)]
enum HeadKind<T: Element> {
    Aux {
        conv: Conv<T>,
        pooled: usize,
        hidden: Option<Dense<T>>,
        fc: Dense<T>,
    },
    Final {
        pool: bool,
        fc: Dense<T>,
    },
}

/// A classifier head mapping a feature map to logits. Cloning shares the
/// underlying parameters.
#[derive(Debug, Clone)]
pub struct AuxNetwork<T: Element> {
    name: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    kind: HeadKind<T>,
}

impl<T: Element> AuxNetwork<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Per-example input shape the head was built for.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match &self.kind {
            HeadKind::Aux {
                conv,
                pooled,
                hidden,
                fc,
            } => {
                let h = relu(&conv.forward(x, mode)?);
                let mut h = flatten(&adaptive_avgpool2d(&h, *pooled)?)?;
                if let Some(hd) = hidden {
                    h = relu(&hd.forward(&h, mode)?);
                }
                fc.forward(&h, mode)
            }
            HeadKind::Final { pool, fc } => {
                let h = if *pool { global_avgpool(x)? } else { flatten(x)? };
                fc.forward(&h, mode)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        let mut out = Vec::new();
        match &self.kind {
            HeadKind::Aux {
                conv, hidden, fc, ..
            } => {
                conv.params(&mut out);
                if let Some(h) = hidden {
                    h.params(&mut out);
                }
                fc.params(&mut out);
            }
            HeadKind::Final { fc, .. } => fc.params(&mut out),
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Number of parameterized layers.
    pub fn num_layers(&self) -> usize {
        match &self.kind {
            HeadKind::Aux { hidden, .. } => 2 + hidden.is_some() as usize,
            HeadKind::Final { .. } => 1,
        }
    }
}

/// Auxiliary head: 1×1 conv → relu → adaptive avgpool → flatten →
/// (hidden linear → relu) → linear.
pub fn build_aux_head<T: Element>(
    spec: &AuxHeadSpec,
    input_shape: &[usize],
    name: &str,
    seed: u64,
) -> Result<AuxNetwork<T>> {
    spec.validate()?;
    ensure!(
        input_shape.len() == 3 && input_shape.iter().all(|&d| d >= 1),
        "aux head {name}: input shape {input_shape:?} is not C×H×W"
    );
    let cin = input_shape[0];
    let flat = spec.reduce_channels * spec.pooled_size * spec.pooled_size;
    let conv = Conv::new(&format!("{name}.conv"), cin, spec.reduce_channels, 1, 1, true, seed);
    let (hidden, fc_in) = if spec.hidden_dim > 0 {
        (
            Some(Dense::new(&format!("{name}.hidden"), flat, spec.hidden_dim, seed)),
            spec.hidden_dim,
        )
    } else {
        (None, flat)
    };
    Ok(AuxNetwork {
        name: name.to_string(),
        input_shape: input_shape.to_vec(),
        num_classes: spec.num_classes,
        kind: HeadKind::Aux {
            conv,
            pooled: spec.pooled_size,
            hidden,
            fc: Dense::new(&format!("{name}.fc"), fc_in, spec.num_classes, seed),
        },
    })
}

/// Global average pool → linear.
pub fn build_final_head<T: Element>(
    channels_in: usize,
    num_classes: usize,
    name: &str,
    seed: u64,
) -> Result<AuxNetwork<T>> {
    ensure!(channels_in > 0 && num_classes >= 2, "final head needs channels > 0 and >= 2 classes");
    Ok(AuxNetwork {
        name: name.to_string(),
        input_shape: vec![channels_in],
        num_classes,
        kind: HeadKind::Final {
            pool: true,
            fc: Dense::new(&format!("{name}.fc"), channels_in, num_classes, seed),
        },
    })
}

#[derive(Debug, Clone)]
enum Unit<T: Element> {
    ConvBnRelu {
        conv: Conv<T>,
        bn: Bn<T>,
    },
    Residual {
        conv1: Conv<T>,
        bn1: Bn<T>,
        conv2: Conv<T>,
        bn2: Bn<T>,
        shortcut: Option<(Conv<T>, Bn<T>)>,
    },
    AvgPool(usize),
    LinearRelu {
        fc: Dense<T>,
        view: [usize; 3],
    },
    Head(AuxNetwork<T>),
}

impl<T: Element> Unit<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Unit::ConvBnRelu { conv, bn } => Ok(relu(&bn.forward(&conv.forward(x, mode)?, mode)?)),
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = relu(&bn1.forward(&conv1.forward(x, mode)?, mode)?);
                let h = bn2.forward(&conv2.forward(&h, mode)?, mode)?;
                let skip = match shortcut {
                    Some((c, b)) => b.forward(&c.forward(x, mode)?, mode)?,
                    None => x.clone(),
                };
                Ok(relu(&add(&h, &skip)?))
            }
            Unit::AvgPool(k) => avgpool2d(x, *k, *k),
            Unit::LinearRelu { fc, view } => {
                let h = relu(&fc.forward(&flatten(x)?, mode)?);
                reshape(&h, [x.dims()[0], view[0], view[1], view[2]])
            }
            Unit::Head(h) => h.forward(x, mode),
        }
    }

    fn params(&self, out: &mut Vec<ParamRef<T>>) {
        match self {
            Unit::ConvBnRelu { conv, bn } => {
                conv.params(out);
                bn.params(out);
            }
            Unit::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                conv1.params(out);
                bn1.params(out);
                conv2.params(out);
                bn2.params(out);
                if let Some((c, b)) = shortcut {
                    c.params(out);
                    b.params(out);
                }
            }
            Unit::AvgPool(_) => {}
            Unit::LinearRelu { fc, .. } => fc.params(out),
            Unit::Head(h) => out.extend(h.params()),
        }
    }

    fn norms(&self, out: &mut Vec<Bn<T>>) {
        match self {
            Unit::ConvBnRelu { bn, .. } => out.push(bn.clone()),
            Unit::Residual {
                bn1, bn2, shortcut, ..
            } => {
                out.push(bn1.clone());
                out.push(bn2.clone());
                if let Some((_, b)) = shortcut {
                    out.push(b.clone());
                }
            }
            _ => {}
        }
    }
}

/// Running statistics of one batch-norm layer, addressable by name.
#[derive(Debug, Clone)]
pub struct NormStats<T: Element> {
    pub name: String,
    pub stats: Arc<RunningStats<T>>,
}

/// An ordered list of sliceable units ending in a classifier.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    arch: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    specs: Vec<LayerSpec>,
    units: Vec<Unit<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Model<T> {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Per-example output shape of unit `i` (0-based).
    pub fn unit_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn forward_unit(&self, i: usize, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ensure!(i < self.units.len(), "unit {i} out of range ({} units)", self.units.len());
        self.units[i].forward(x, mode)
    }

    pub fn forward_range(&self, range: std::ops::Range<usize>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for i in range {
            h = self.forward_unit(i, &h, mode)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ensure!(
            x.dims().len() == 1 + self.input_shape.len() && x.dims()[1..] == self.input_shape[..],
            "model {} expects input [B, {:?}], got {:?}",
            self.arch,
            self.input_shape,
            x.dims()
        );
        self.forward_range(0..self.units.len(), x, mode)
    }

    pub fn unit_params(&self, i: usize) -> Vec<ParamRef<T>> {
        let mut out = Vec::new();
        self.units[i].params(&mut out);
        out
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        (0..self.units.len()).flat_map(|i| self.unit_params(i)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn norm_stats(&self) -> Vec<NormStats<T>> {
        let mut bns = Vec::new();
        for u in &self.units {
            u.norms(&mut bns);
        }
        bns.into_iter()
            .map(|b| NormStats {
                name: b.name,
                stats: b.stats,
            })
            .collect()
    }
}

fn shape_err(i: usize, spec: &LayerSpec, got: &[usize]) -> Error {
    Error::contract(format!(
        "layer {i} ({:?}) expects {} input channels/features, previous output is {got:?}",
        spec.kind, spec.channels_in
    ))
}

/// Builds a backbone from unit specs. `input_shape` is the per-example C×H×W.
pub fn build_backbone<T: Element>(
    arch: &str,
    specs: &[LayerSpec],
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    ensure!(!specs.is_empty(), "empty depth spec");
    ensure!(
        specs.last().is_some_and(LayerSpec::is_classifier),
        "depth spec must end with a classifier unit"
    );
    ensure!(
        specs[..specs.len() - 1].iter().all(|s| !s.is_classifier()),
        "classifier units may only appear last"
    );
    ensure!(num_classes >= 2, "need at least 2 classes");
    ensure!(
        input_shape.len() == 3 && input_shape.iter().all(|&d| d > 0),
        "input shape {input_shape:?} is not C×H×W"
    );
    let mut shape = input_shape.to_vec();
    let mut units = Vec::with_capacity(specs.len());
    let mut shapes = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        ensure!(s.stride > 0 && s.channels_out > 0, "layer {i}: stride and channels must be positive");
        let p = format!("u{i}");
        let spatial_out = |k: usize, pad: usize, st: usize, e: usize| (e + 2 * pad - k) / st + 1;
        let (unit, out) = match s.kind {
            LayerKind::ConvBnRelu => {
                if shape.len() != 3 || shape[0] != s.channels_in {
                    return Err(shape_err(i, s, &shape));
                }
                let conv = Conv::new(&format!("{p}.conv"), s.channels_in, s.channels_out, 3, s.stride, false, seed);
                let out = vec![
                    s.channels_out,
                    spatial_out(3, 1, s.stride, shape[1]),
                    spatial_out(3, 1, s.stride, shape[2]),
                ];
                (
                    Unit::ConvBnRelu {
                        conv,
                        bn: Bn::new(&format!("{p}.bn"), s.channels_out),
                    },
                    out,
                )
            }
            LayerKind::ResidualBlock => {
                if shape.len() != 3 || shape[0] != s.channels_in {
                    return Err(shape_err(i, s, &shape));
                }
                let (ci, co) = (s.channels_in, s.channels_out);
                let shortcut = (s.stride > 1 || ci != co).then(|| {
                    (
                        Conv::new(&format!("{p}.proj"), ci, co, 1, s.stride, false, seed),
                        Bn::new(&format!("{p}.proj_bn"), co),
                    )
                });
                let out = vec![
                    co,
                    spatial_out(3, 1, s.stride, shape[1]),
                    spatial_out(3, 1, s.stride, shape[2]),
                ];
                (
                    Unit::Residual {
                        conv1: Conv::new(&format!("{p}.conv1"), ci, co, 3, s.stride, false, seed),
                        bn1: Bn::new(&format!("{p}.bn1"), co),
                        conv2: Conv::new(&format!("{p}.conv2"), co, co, 3, 1, false, seed),
                        bn2: Bn::new(&format!("{p}.bn2"), co),
                        shortcut,
                    },
                    out,
                )
            }
            LayerKind::Avgpool => {
                if shape.len() != 3 || shape[0] != s.channels_in || s.channels_out != s.channels_in {
                    return Err(shape_err(i, s, &shape));
                }
                ensure!(
                    shape[1] >= s.stride && shape[2] >= s.stride,
                    "layer {i}: pool {} exceeds {:?}",
                    s.stride,
                    shape
                );
                let out = vec![shape[0], shape[1] / s.stride, shape[2] / s.stride];
                (Unit::AvgPool(s.stride), out)
            }
            LayerKind::GlobalPoolFc => {
                if shape.len() != 3 || shape[0] != s.channels_in {
                    return Err(shape_err(i, s, &shape));
                }
                ensure!(s.channels_out == num_classes, "layer {i}: head width must equal num_classes");
                let head = build_final_head(s.channels_in, num_classes, &format!("{p}.head"), seed)?;
                (Unit::Head(head), vec![num_classes])
            }
            LayerKind::LinearRelu | LayerKind::Fc => {
                let fan_in: usize = shape.iter().product();
                if fan_in != s.channels_in {
                    return Err(shape_err(i, s, &shape));
                }
                if s.kind == LayerKind::Fc {
                    ensure!(s.channels_out == num_classes, "layer {i}: head width must equal num_classes");
                    let head = AuxNetwork {
                        name: format!("{p}.head"),
                        input_shape: shape.clone(),
                        num_classes,
                        kind: HeadKind::Final {
                            pool: false,
                            fc: Dense::new(&format!("{p}.head.fc"), fan_in, num_classes, seed),
                        },
                    };
                    (Unit::Head(head), vec![num_classes])
                } else {
                    let sp = s.spatial.max(1);
                    let view = [s.channels_out, sp, sp];
                    let fc = Dense::new(&format!("{p}.fc"), fan_in, s.channels_out * sp * sp, seed);
                    (Unit::LinearRelu { fc, view }, view.to_vec())
                }
            }
        };
        ensure!(out.iter().all(|&d| d > 0), "layer {i}: output shape {out:?} collapses");
        units.push(unit);
        shapes.push(out.clone());
        shape = out;
    }
    let model = Model {
        arch: arch.to_string(),
        input_shape: input_shape.to_vec(),
        num_classes,
        specs: specs.to_vec(),
        units,
        shapes,
    };
    let mut names = std::collections::HashSet::new();
    for p in model.params() {
        ensure!(names.insert(p.name().to_string()), "duplicate parameter name {}", p.name());
    }
    Ok(model)
}

pub const PRESETS: [&str; 2] = ["miniresnet-8", "mlp-4"];

/// Unit specs of a named architecture for the given input and class count.
pub fn preset_specs(arch: &str, input_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
    use LayerKind::*;
    ensure!(input_shape.len() == 3, "input shape {input_shape:?} is not C×H×W");
    match arch {
        "miniresnet-8" => Ok(vec![
            LayerSpec::new(ConvBnRelu, input_shape[0], 16, 1),
            LayerSpec::new(ResidualBlock, 16, 16, 1),
            LayerSpec::new(ResidualBlock, 16, 16, 1),
            LayerSpec::new(ResidualBlock, 16, 32, 2),
            LayerSpec::new(ResidualBlock, 32, 32, 1),
            LayerSpec::new(ResidualBlock, 32, 64, 2),
            LayerSpec::new(ResidualBlock, 64, 64, 1),
            LayerSpec::new(GlobalPoolFc, 64, num_classes, 1),
        ]),
        "mlp-4" => {
            let hidden = |cin| LayerSpec {
                kind: LinearRelu,
                channels_in: cin,
                channels_out: 4,
                stride: 1,
                spatial: 8,
            };
            Ok(vec![
                hidden(input_shape.iter().product()),
                hidden(256),
                hidden(256),
                LayerSpec::new(Fc, 256, num_classes, 1),
            ])
        }
        other => Err(Error::config(format!(
            "unknown architecture {other:?} (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

pub fn build_preset<T: Element>(arch: &str, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model<T>> {
    let specs = preset_specs(arch, input_shape, num_classes)?;
    build_backbone(arch, &specs, input_shape, num_classes, seed)
}
