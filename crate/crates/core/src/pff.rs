//! Patch feature fusion: an auxiliary head applied to each cell of an n×n
//! spatial grid, with the per-patch logits averaged.
//!
//! With a gradient, the fused forward is checkpointed. Each patch is run
//! without a graph and dropped once its logits are summed. The backward pass
//! re-runs one patch at a time with a graph, so at most one patch's
//! intermediates are alive in either direction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{AuxNetwork, Mode};
use crate::tensor::ops::spatial_window;
use crate::tensor::{measure_peak, Element, GradFn, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub n: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl PatchPlan {
    pub fn new(height: usize, width: usize, n: usize) -> Result<Self> {
        ensure!(n >= 1, "patch factor must be >= 1");
        ensure!(height > 0 && width > 0, "empty feature map");
        let (ph, pw) = (height.div_ceil(n), width.div_ceil(n));
        ensure!(
            (n - 1) * ph < height && (n - 1) * pw < width,
            "{height}x{width} cannot be split into {n}x{n} non-empty patches"
        );
        Ok(Self {
            n,
            patch_height: ph,
            patch_width: pw,
            pad_bottom: n * ph - height,
            pad_right: n * pw - width,
        })
    }

    /// Top-left corners in row-major patch order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|r| (0..self.n).map(move |c| (r * self.patch_height, c * self.patch_width)))
            .collect()
    }
}

fn plan_for<T: Element>(x: &Tensor<T>, n: usize) -> Result<(PatchPlan, (usize, usize, usize, usize))> {
    let dims = x.shape().nchw().ok_or_else(|| {
        crate::Error::contract(format!("patch split needs NCHW, got {:?}", x.shape()))
    })?;
    Ok((PatchPlan::new(dims.2, dims.3, n)?, dims))
}

/// The n² patches of `x`, each `B×C×⌈H/n⌉×⌈W/n⌉`, zero-padded at the
/// bottom/right edge. Patches stay connected to `x` in the graph.
pub fn split_patches<T: Element>(x: &Tensor<T>, n: usize) -> Result<Vec<Tensor<T>>> {
    let (plan, _) = plan_for(x, n)?;
    plan.origins()
        .into_iter()
        .map(|(t, l)| spatial_window(x, t, l, plan.patch_height, plan.patch_width))
        .collect()
}

/// Inverse of [`split_patches`]: tiles the patches and crops to `height×width`.
pub fn assemble_patches<T: Element>(patches: &[Tensor<T>], n: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let plan = PatchPlan::new(height, width, n)?;
    ensure!(patches.len() == n * n, "expected {} patches, got {}", n * n, patches.len());
    let (b, c, ph, pw) = patches[0]
        .shape()
        .nchw()
        .ok_or_else(|| crate::Error::contract("patches must be NCHW"))?;
    ensure!(
        ph == plan.patch_height && pw == plan.patch_width,
        "patch size {ph}x{pw} does not match plan {}x{}",
        plan.patch_height,
        plan.patch_width
    );
    let mut out = vec![T::zero(); b * c * height * width];
    for (patch, (top, left)) in patches.iter().zip(plan.origins()) {
        ensure!(patch.dims() == [b, c, ph, pw], "inconsistent patch shapes");
        let src = patch.data();
        for plane in 0..b * c {
            for y in 0..ph.min(height.saturating_sub(top)) {
                for xx in 0..pw.min(width.saturating_sub(left)) {
                    out[plane * height * width + (top + y) * width + left + xx] =
                        src[plane * ph * pw + y * pw + xx];
                }
            }
        }
    }
    Tensor::new(out, [b, c, height, width])
}

struct FusionFn<T: Element> {
    head: AuxNetwork<T>,
    plan: PatchPlan,
    dims: (usize, usize, usize, usize),
    mode: Mode,
}

impl<T: Element> GradFn<T> for FusionFn<T> {
    fn name(&self) -> &'static str {
        "patch_fusion"
    }

    fn backward(&self, g: &[T], parents: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = &parents[0];
        let (n, c, h, w) = self.dims;
        let (ph, pw) = (self.plan.patch_height, self.plan.patch_width);
        let scale = T::lit(1.0 / (self.plan.n * self.plan.n) as f64);
        let seed: Vec<T> = g.iter().map(|&v| v * scale).collect();
        let mut dx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let base = x.detach();
        let mode = Mode {
            update_stats: false,
            grad: true,
            ..self.mode
        };
        for (top, left) in self.plan.origins() {
            let window = spatial_window(&base, top, left, ph, pw)?;
            let window = if dx.is_some() { window.detach_leaf() } else { window };
            self.head.forward(&window, mode)?.backward_with_grad(seed.clone())?;
            if let (Some(dx), Some(gw)) = (dx.as_mut(), window.grad()) {
                for plane in 0..n * c {
                    for y in 0..ph.min(h - top) {
                        for xx in 0..pw.min(w - left) {
                            let d = plane * h * w + (top + y) * w + left + xx;
                            dx[d] = dx[d] + gw[plane * ph * pw + y * pw + xx];
                        }
                    }
                }
            }
        }
        let mut out = vec![dx];
        out.resize_with(parents.len(), || None);
        Ok(out)
    }
}

/// Mean of `aux` over the n² patches of `x`. `n = 1` is exactly `aux(x)`.
pub fn fused_aux_forward<T: Element>(aux: &AuxNetwork<T>, x: &Tensor<T>, n: usize, mode: Mode) -> Result<Tensor<T>> {
    ensure!(n >= 1, "patch factor must be >= 1");
    if n == 1 {
        return aux.forward(x, mode);
    }
    let (plan, dims) = plan_for(x, n)?;
    let base = x.detach();
    let frozen = Mode { grad: false, ..mode };
    let mut sum: Option<Vec<T>> = None;
    for (top, left) in plan.origins() {
        let window = spatial_window(&base, top, left, plan.patch_height, plan.patch_width)?;
        let logits = aux.forward(&window, frozen)?;
        match sum.as_mut() {
            None => sum = Some(logits.to_vec()),
            Some(s) => s.iter_mut().zip(logits.data()).for_each(|(a, &b)| *a = *a + b),
        }
    }
    let classes = aux.num_classes();
    let count = T::lit((n * n) as f64);
    let fused: Vec<T> = sum.expect("n >= 1").into_iter().map(|v| v / count).collect();
    let shape = Shape::new([dims.0, classes]);
    if !mode.grad {
        return Tensor::new(fused, shape);
    }
    let mut parents = vec![x.clone()];
    parents.extend(aux.params().iter().map(|p| p.tensor()));
    Ok(Tensor::from_op(
        fused,
        shape,
        parents,
        FusionFn {
            head: aux.clone(),
            plan,
            dims,
            mode,
        },
    ))
}

/// Inputs to the auxiliary-path activation memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Feature elements per example (C·H·W) times batch size.
    pub d: usize,
    /// Auxiliary parameter count.
    pub p: usize,
    /// Auxiliary layer count.
    pub l: usize,
    pub n: usize,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d > 0 && self.p > 0 && self.l > 0 && self.n > 0,
            "memory model fields must be positive: {self:?}"
        );
        Ok(())
    }
}

/// `element_size·(D/n² + P + L·D/n²)` with fusion, `element_size·(D + P + L·D)` without.
pub fn estimate_aux_memory(m: &MemoryModel, element_size: usize, pff: bool) -> Result<usize> {
    m.validate()?;
    let d = if pff { m.d.div_ceil(m.n * m.n) } else { m.d };
    Ok(element_size * (d + m.p + m.l * d))
}

/// High-water mark of tracked activation bytes allocated while `f` runs.
pub fn measure_peak_activation<R>(f: impl FnOnce() -> R) -> (R, usize) {
    measure_peak(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_aux_head, AuxHeadSpec};
    use rand::Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = crate::seed::rng(seed, "pff");
        let n = dims.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims).unwrap()
    }

    #[test]
    fn unit_tiling() {
        let x = Tensor::<f64>::new(vec![1., 2., 3., 4.], [1, 1, 2, 2]).unwrap();
        let p = split_patches(&x, 2).unwrap();
        let vals: Vec<_> = p.iter().map(|t| t.to_vec()).collect();
        assert_eq!(vals, vec![vec![1.], vec![2.], vec![3.], vec![4.]]);
        assert_eq!(split_patches(&x, 1).unwrap()[0].to_vec(), x.to_vec());
    }

    #[test]
    fn uneven_split_pads_and_reassembles() {
        let x = random([1, 1, 5, 5], 1);
        let p = split_patches(&x, 2).unwrap();
        assert!(p.iter().all(|t| t.dims() == [1, 1, 3, 3]));
        assert_eq!(p[3].data()[8], 0.0);
        let back = assemble_patches(&p, 2, 5, 5).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn impossible_split_is_rejected() {
        assert!(PatchPlan::new(2, 2, 3).is_err());
        assert!(PatchPlan::new(4, 4, 0).is_err());
    }

    #[test]
    fn n1_is_plain_forward() {
        let head = build_aux_head::<f64>(&AuxHeadSpec::default(), &[4, 6, 6], "a", 0).unwrap();
        let x = random([2, 4, 6, 6], 2);
        let a = fused_aux_forward(&head, &x, 1, Mode::TRAIN).unwrap();
        let b = head.forward(&x, Mode::TRAIN).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn estimates() {
        let m = MemoryModel {
            d: 4096,
            p: 1000,
            l: 3,
            n: 2,
        };
        assert_eq!(estimate_aux_memory(&m, 4, true).unwrap(), 20384);
        assert_eq!(estimate_aux_memory(&m, 4, false).unwrap(), 69536);
        let m1 = MemoryModel { n: 1, ..m };
        assert_eq!(
            estimate_aux_memory(&m1, 4, true).unwrap(),
            estimate_aux_memory(&m1, 4, false).unwrap()
        );
        let mut prev = usize::MAX;
        for n in 1..8 {
            let e = estimate_aux_memory(&MemoryModel { n, ..m }, 4, true).unwrap();
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn noop_measures_zero() {
        assert_eq!(measure_peak_activation(|| ()).1, 0);
    }
}
