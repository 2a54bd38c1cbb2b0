//! Elementwise, linear-algebra, shape and loss operations.

use super::{gemm_nn, Element, GradFn, Shape, Tensor};
use crate::error::{ensure, Error, Result};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

struct AddFn;
impl<T: Element> GradFn<T> for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(p.iter()
            .map(|t| t.requires_grad().then(|| g.to_vec()))
            .collect())
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().clone(),
        vec![a.clone(), b.clone()],
        AddFn,
    ))
}

struct MulFn;
impl<T: Element> GradFn<T> for MulFn {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (a, b) = (&p[0], &p[1]);
        let ga = a.requires_grad().then(|| {
            g.iter()
                .zip(b.data())
                .map(|(&g, &y)| g * y)
                .collect::<Vec<_>>()
        });
        let gb = b.requires_grad().then(|| {
            g.iter()
                .zip(a.data())
                .map(|(&g, &x)| g * x)
                .collect::<Vec<_>>()
        });
        Ok(vec![ga, gb])
    }
}

/// Elementwise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().clone(),
        vec![a.clone(), b.clone()],
        MulFn,
    ))
}

struct ScaleFn<T>(T);
impl<T: Element> GradFn<T> for ScaleFn<T> {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.iter().map(|&v| v * self.0).collect())])
    }
}

pub fn scalar_mul<T: Element>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    let data = a.data().iter().map(|&x| x * s).collect();
    Tensor::from_op(data, a.shape().clone(), vec![a.clone()], ScaleFn(s))
}

struct SumFn(usize);
impl<T: Element> GradFn<T> for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(vec![g[0]; self.0])])
    }
}

/// Sum of all elements as a scalar.
pub fn sum<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    Tensor::from_op(vec![s], Shape::scalar(), vec![a.clone()], SumFn(a.numel()))
}

pub fn mean<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    scalar_mul(&sum(a), 1.0 / a.numel() as f64)
}

struct ReluFn;
impl<T: Element> GradFn<T> for ReluFn {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(
            g.iter()
                .zip(out)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect(),
        )])
    }
}

pub fn relu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    // NaN passes through.
    let data = a.data().iter().map(|&x| if x < T::zero() { T::zero() } else { x }).collect();
    Tensor::from_op(data, a.shape().clone(), vec![a.clone()], ReluFn)
}

struct MatmulFn {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Element> GradFn<T> for MatmulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (&p[0], &p[1]);
        // dA = G·Bᵀ, dB = Aᵀ·G
        let ga = a.requires_grad().then(|| {
            let mut out = vec![T::zero(); m * k];
            T::gemm(
                m,
                n,
                k,
                T::one(),
                g,
                n as isize,
                1,
                b.data(),
                1,
                n as isize,
                T::zero(),
                &mut out,
                k as isize,
                1,
            );
            out
        });
        let gb = b.requires_grad().then(|| {
            let mut out = vec![T::zero(); k * n];
            T::gemm(
                k,
                m,
                n,
                T::one(),
                a.data(),
                1,
                k as isize,
                g,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
            out
        });
        Ok(vec![ga, gb])
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.dims(), b.dims()) else {
        return Err(Error::contract(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    ensure!(k == k2, "matmul: inner dims {k} vs {k2}");
    let data = gemm_nn(m, k, n, a.data(), b.data());
    Ok(Tensor::from_op(
        data,
        Shape::new([m, n]),
        vec![a.clone(), b.clone()],
        MatmulFn { m, k, n },
    ))
}

struct LinearFn {
    batch: usize,
    fan_in: usize,
    fan_out: usize,
}
impl<T: Element> GradFn<T> for LinearFn {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, g: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (bsz, fi, fo) = (self.batch, self.fan_in, self.fan_out);
        let (x, w) = (&p[0], &p[1]);
        // y = x·wᵀ + b;  dx = g·w,  dw = gᵀ·x,  db = Σ_rows g
        let gx = x.requires_grad().then(|| gemm_nn(bsz, fo, fi, g, w.data()));
        let gw = w.requires_grad().then(|| {
            let mut out = vec![T::zero(); fo * fi];
            T::gemm(
                fo,
                bsz,
                fi,
                T::one(),
                g,
                1,
                fo as isize,
                x.data(),
                fi as isize,
                1,
                T::zero(),
                &mut out,
                fi as isize,
                1,
            );
            out
        });
        let gb = p.get(2).filter(|b| b.requires_grad()).map(|_| {
            let mut out = vec![T::zero(); fo];
            for row in g.chunks_exact(fo) {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
            }
            out
        });
        let mut grads = vec![gx, gw];
        if p.len() == 3 {
            grads.push(gb);
        }
        Ok(grads)
    }
}

/// Fully connected layer `x[B,in] · w[out,in]ᵀ + b[out]`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (&[bsz, fi], &[fo, fi2]) = (x.dims(), w.dims()) else {
        return Err(Error::contract(format!(
            "linear needs x[B,in] and w[out,in], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    ensure!(fi == fi2, "linear: input features {fi} vs weight {fi2}");
    let mut data = vec![T::zero(); bsz * fo];
    if let Some(b) = b {
        ensure!(b.dims() == [fo], "linear: bias shape {:?}", b.shape());
        for row in data.chunks_exact_mut(fo) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        bsz,
        fi,
        fo,
        T::one(),
        x.data(),
        fi as isize,
        1,
        w.data(),
        1,
        fi as isize,
        if b.is_some() { T::one() } else { T::zero() },
        &mut data,
        fo as isize,
        1,
    );
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    Ok(Tensor::from_op(
        data,
        Shape::new([bsz, fo]),
        parents,
        LinearFn {
            batch: bsz,
            fan_in: fi,
            fan_out: fo,
        },
    ))
}

struct ReshapeFn;
impl<T: Element> GradFn<T> for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

pub fn reshape<T: Element>(a: &Tensor<T>, shape: impl Into<Shape>) -> Result<Tensor<T>> {
    let shape = shape.into();
    ensure!(
        shape.numel() == a.numel(),
        "reshape {:?} -> {:?} changes element count",
        a.shape(),
        shape
    );
    Ok(Tensor::from_op(a.to_vec(), shape, vec![a.clone()], ReshapeFn))
}

/// `[B, ...] -> [B, prod(...)]`.
pub fn flatten<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let b = a.dims()[0];
    reshape(a, [b, a.numel() / b])
}

struct CrossEntropyFn {
    labels: Vec<usize>,
    probs: Vec<f64>,
    classes: usize,
}
impl<T: Element> GradFn<T> for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let scale = g[0].to_f64().unwrap_or(0.0) / self.labels.len() as f64;
        let mut out = Vec::with_capacity(self.probs.len());
        for (row, &y) in self.probs.chunks_exact(self.classes).zip(&self.labels) {
            for (c, &p) in row.iter().enumerate() {
                let d = if c == y { p - 1.0 } else { p };
                out.push(T::lit(d * scale));
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Mean softmax cross-entropy of `logits[B,C]` against class indices.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let &[b, c] = logits.dims() else {
        return Err(Error::contract(format!(
            "cross entropy needs logits[B,C], got {:?}",
            logits.shape()
        )));
    };
    ensure!(labels.len() == b, "cross entropy: {} labels for batch {b}", labels.len());
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = Vec::with_capacity(b * c);
    let mut total = 0.0f64;
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[y];
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    let loss = T::lit(total / b as f64);
    Ok(Tensor::from_op(
        vec![loss],
        Shape::scalar(),
        vec![logits.clone()],
        CrossEntropyFn {
            labels: labels.to_vec(),
            probs,
            classes: c,
        },
    ))
}

struct WindowFn {
    in_dims: (usize, usize, usize, usize),
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl WindowFn {
    /// Calls `f(src_index, dst_index)` for every in-bounds element.
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let (n, c, hh, ww) = self.in_dims;
        for plane in 0..n * c {
            for i in 0..self.h {
                let si = self.top + i;
                if si >= hh {
                    break;
                }
                for j in 0..self.w {
                    let sj = self.left + j;
                    if sj >= ww {
                        break;
                    }
                    f(plane * hh * ww + si * ww + sj, plane * self.h * self.w + i * self.w + j);
                }
            }
        }
    }
}

impl<T: Element> GradFn<T> for WindowFn {
    fn name(&self) -> &'static str {
        "spatial_window"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, c, hh, ww) = self.in_dims;
        let mut out = vec![T::zero(); n * c * hh * ww];
        self.visit(|s, d| out[s] = g[d]);
        Ok(vec![Some(out)])
    }
}

/// Extracts the `h×w` window at (`top`, `left`) of every NCHW plane, reading
/// zeros where the window extends past the bottom or right edge.
pub fn spatial_window<T: Element>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let Some(dims) = x.shape().nchw() else {
        return Err(Error::contract(format!(
            "spatial_window needs NCHW, got {:?}",
            x.shape()
        )));
    };
    ensure!(h > 0 && w > 0, "spatial_window: empty window");
    ensure!(
        top < dims.2 && left < dims.3,
        "spatial_window: origin ({top},{left}) outside {}x{}",
        dims.2,
        dims.3
    );
    let f = WindowFn {
        in_dims: dims,
        top,
        left,
        h,
        w,
    };
    let mut data = vec![T::zero(); dims.0 * dims.1 * h * w];
    let src = x.data();
    f.visit(|s, d| data[d] = src[s]);
    Ok(Tensor::from_op(
        data,
        Shape::new([dims.0, dims.1, h, w]),
        vec![x.clone()],
        f,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let logits = Tensor::<f64>::new(vec![0.0, 0.0], [1, 2]).unwrap();
        let l = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f64>::new(vec![0.0, 0.0], [1, 2]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn matmul_shape_contract() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2, 3]);
        assert!(matmul(&a, &b).is_err());
        let b = Tensor::<f64>::zeros([3, 4]);
        assert_eq!(matmul(&a, &b).unwrap().dims(), &[2, 4]);
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::<f64>::new(vec![1., 2., 3., 4., 5., 6.], [2, 3]).unwrap();
        let b = Tensor::<f64>::new(vec![1., 0., 0., 1., 1., 1.], [3, 2]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![4., 5., 10., 11.]);
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let x = Tensor::<f64>::new(vec![1., 2., 3., 4.], [2, 2]).unwrap();
        let w = Tensor::<f64>::new(vec![1., -1., 0.5, 2.], [2, 2]).unwrap();
        let b = Tensor::<f64>::new(vec![10., 20.], [2]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![9., 24.5, 9., 29.5]);
    }

    #[test]
    fn window_pads_with_zeros() {
        let x = Tensor::<f64>::new((1..=9).map(f64::from).collect(), [1, 1, 3, 3]).unwrap();
        let p = spatial_window(&x, 2, 2, 2, 2).unwrap();
        assert_eq!(p.to_vec(), vec![9., 0., 0., 0.]);
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let a = Tensor::<f64>::zeros([2]);
        let b = Tensor::<f64>::zeros([3]);
        assert!(add(&a, &b).is_err());
    }
}
