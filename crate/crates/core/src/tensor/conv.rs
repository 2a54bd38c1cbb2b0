//! 2-D cross-correlation over NCHW tensors.
//!
//! Two kernels compute the same function: a direct nested-loop form that
//! serves as the reference, and an im2col + GEMM form used for training.
//! The im2col path recomputes the column matrix during backward instead of
//! keeping it alive between passes.

use super::{Element, GradFn, Shape, Tensor};
use crate::error::{ensure, Error, Result};
use crate::parallel;

/// Images handled per parallel task; fixed so reductions do not depend on
/// the thread count.
const IMAGES_PER_TASK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_image(&self) -> usize {
        self.cout * self.out_plane()
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }
}

fn geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let (Some((n, cin, h, wd)), Some((cout, cin2, kh, kw))) = (x.shape().nchw(), w.shape().nchw())
    else {
        return Err(Error::contract(format!(
            "conv2d needs x[N,C,H,W] and w[O,I,Kh,Kw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    ensure!(stride > 0, "conv2d: stride must be positive");
    ensure!(cin == cin2, "conv2d: input has {cin} channels, kernel expects {cin2}");
    ensure!(
        h + 2 * pad >= kh && wd + 2 * pad >= kw,
        "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
        h + 2 * pad,
        wd + 2 * pad
    );
    if let Some(b) = b {
        ensure!(b.dims() == [cout], "conv2d: bias shape {:?} for {cout} outputs", b.shape());
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_with(x, w, b, stride, padding, ConvAlgo::Im2col)
}

pub fn conv2d_with<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, b, stride, padding)?;
    let mut out = vec![T::zero(); g.n * g.out_image()];
    match algo {
        ConvAlgo::Im2col => forward_im2col(&g, x.data(), w.data(), &mut out),
        ConvAlgo::Direct => forward_direct(&g, x.data(), w.data(), &mut out),
    }
    if let Some(b) = b {
        for img in out.chunks_exact_mut(g.out_image()) {
            for (plane, &bv) in img.chunks_exact_mut(g.out_plane()).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    Ok(Tensor::from_op(
        out,
        Shape::new([g.n, g.cout, g.oh, g.ow]),
        parents,
        ConvFn { g, algo },
    ))
}

fn im2col<T: Element>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => drow.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match g.src(ox, kj, g.w) {
                                    Some(ix) => src[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            dst[iy * g.w + ix] = dst[iy * g.w + ix] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_im2col<T: Element>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (kdim, plane) = (g.kdim(), g.out_plane());
    parallel::for_each_chunk(out, g.out_image(), |b, dst| {
        let img = &x[b * g.in_image()..(b + 1) * g.in_image()];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            let mut c = vec![T::zero(); kdim * plane];
            im2col(g, img, &mut c);
            owned = c;
            &owned
        };
        T::gemm(
            g.cout,
            kdim,
            plane,
            T::one(),
            w,
            kdim as isize,
            1,
            cols,
            plane as isize,
            1,
            T::zero(),
            dst,
            plane as isize,
            1,
        );
    });
}

fn forward_direct<T: Element>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    parallel::for_each_chunk(out, g.out_image(), |b, dst| {
        let img = &x[b * g.in_image()..(b + 1) * g.in_image()];
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            let Some(iy) = g.src(oy, ki, g.h) else { continue };
                            for kj in 0..g.kw {
                                let Some(ix) = g.src(ox, kj, g.w) else { continue };
                                acc = acc
                                    + img[(ci * g.h + iy) * g.w + ix]
                                        * w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    dst[(co * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    });
}

struct ConvFn {
    g: Geometry,
    algo: ConvAlgo,
}

impl ConvFn {
    /// Returns (dx, dw) for images `range` of the batch.
    fn backward_images_im2col<T: Element>(
        &self,
        range: std::ops::Range<usize>,
        grad: &[T],
        x: &[T],
        w: &[T],
        want_dx: bool,
        want_dw: bool,
    ) -> (Vec<T>, Vec<T>) {
        let g = &self.g;
        let (kdim, plane) = (g.kdim(), g.out_plane());
        let mut dx = vec![T::zero(); if want_dx { range.len() * g.in_image() } else { 0 }];
        let mut dw = vec![T::zero(); if want_dw { g.cout * kdim } else { 0 }];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * plane }];
        let mut dcols = vec![T::zero(); if want_dx { kdim * plane } else { 0 }];
        for (slot, b) in range.enumerate() {
            let img = &x[b * g.in_image()..(b + 1) * g.in_image()];
            let gb = &grad[b * g.out_image()..(b + 1) * g.out_image()];
            if want_dw {
                let cols_ref: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, &mut cols);
                    &cols
                };
                // dW += G_b · colsᵀ
                T::gemm(
                    g.cout,
                    plane,
                    kdim,
                    T::one(),
                    gb,
                    plane as isize,
                    1,
                    cols_ref,
                    1,
                    plane as isize,
                    T::one(),
                    &mut dw,
                    kdim as isize,
                    1,
                );
            }
            if want_dx {
                // dcols = Wᵀ · G_b
                T::gemm(
                    kdim,
                    g.cout,
                    plane,
                    T::one(),
                    w,
                    1,
                    kdim as isize,
                    gb,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane as isize,
                    1,
                );
                let dst = &mut dx[slot * g.in_image()..(slot + 1) * g.in_image()];
                if g.is_pointwise() {
                    dst.copy_from_slice(&dcols);
                } else {
                    col2im_add(g, &dcols, dst);
                }
            }
        }
        (dx, dw)
    }

    fn backward_images_direct<T: Element>(
        &self,
        range: std::ops::Range<usize>,
        grad: &[T],
        x: &[T],
        w: &[T],
        want_dx: bool,
        want_dw: bool,
    ) -> (Vec<T>, Vec<T>) {
        let g = &self.g;
        let mut dx = vec![T::zero(); if want_dx { range.len() * g.in_image() } else { 0 }];
        let mut dw = vec![T::zero(); if want_dw { g.cout * g.kdim() } else { 0 }];
        for (slot, b) in range.enumerate() {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gv = grad[((b * g.cout + co) * g.oh + oy) * g.ow + ox];
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                let Some(iy) = g.src(oy, ki, g.h) else { continue };
                                for kj in 0..g.kw {
                                    let Some(ix) = g.src(ox, kj, g.w) else { continue };
                                    let wi = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                                    let xi = (ci * g.h + iy) * g.w + ix;
                                    if want_dw {
                                        dw[wi] = dw[wi] + gv * x[b * g.in_image() + xi];
                                    }
                                    if want_dx {
                                        let d = slot * g.in_image() + xi;
                                        dx[d] = dx[d] + gv * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}

impl<T: Element> GradFn<T> for ConvFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, grad: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = &self.g;
        let (x, w) = (&p[0], &p[1]);
        let (want_dx, want_dw) = (x.requires_grad(), w.requires_grad());
        let tasks = g.n.div_ceil(IMAGES_PER_TASK);
        let parts = parallel::map_collect(tasks, |t| {
            let range = t * IMAGES_PER_TASK..((t + 1) * IMAGES_PER_TASK).min(g.n);
            match self.algo {
                ConvAlgo::Im2col => {
                    self.backward_images_im2col(range, grad, x.data(), w.data(), want_dx, want_dw)
                }
                ConvAlgo::Direct => {
                    self.backward_images_direct(range, grad, x.data(), w.data(), want_dx, want_dw)
                }
            }
        });
        let mut dx = want_dx.then(|| Vec::with_capacity(g.n * g.in_image()));
        let mut dw = want_dw.then(|| vec![T::zero(); g.cout * g.kdim()]);
        for (pdx, pdw) in parts {
            if let Some(dx) = dx.as_mut() {
                dx.extend_from_slice(&pdx);
            }
            if let Some(dw) = dw.as_mut() {
                dw.iter_mut().zip(&pdw).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let mut grads = vec![dx, dw];
        if let Some(bias) = p.get(2) {
            grads.push(bias.requires_grad().then(|| {
                let mut db = vec![T::zero(); g.cout];
                for img in grad.chunks_exact(g.out_image()) {
                    for (d, plane) in db.iter_mut().zip(img.chunks_exact(g.out_plane())) {
                        *d = *d + plane.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                db
            }));
        }
        Ok(grads)
    }
}
