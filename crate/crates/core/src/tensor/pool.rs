use super::{Element, GradFn, Shape, Tensor};
use crate::error::{ensure, Error, Result};

/// Half-open input ranges pooled into each output row (or column).
type Bins = Vec<(usize, usize)>;

fn strided_bins(extent: usize, k: usize, s: usize) -> Bins {
    let out = (extent - k) / s + 1;
    (0..out).map(|o| (o * s, o * s + k)).collect()
}

fn adaptive_bins(extent: usize, out: usize) -> Bins {
    (0..out)
        .map(|o| ((o * extent) / out, ((o + 1) * extent).div_ceil(out)))
        .collect()
}

fn nchw<T: Element>(op: &str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    x.shape()
        .nchw()
        .ok_or_else(|| Error::contract(format!("{op} needs NCHW, got {:?}", x.shape())))
}

struct AvgFn {
    dims: (usize, usize, usize, usize),
    rows: Bins,
    cols: Bins,
}

impl<T: Element> GradFn<T> for AvgFn {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, c, h, w) = self.dims;
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut dx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(r0, r1)) in self.rows.iter().enumerate() {
                for (ox, &(c0, c1)) in self.cols.iter().enumerate() {
                    let share = g[plane * oh * ow + oy * ow + ox] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                    for y in r0..r1 {
                        for x in c0..c1 {
                            dst[y * w + x] = dst[y * w + x] + share;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

fn avg_bins<T: Element>(x: &Tensor<T>, rows: Bins, cols: Bins) -> Tensor<T> {
    let (n, c, h, w) = x.shape().nchw().expect("checked by caller");
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = T::zero();
                for y in r0..r1 {
                    for v in &plane[y * w + c0..y * w + c1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Tensor::from_op(
        out,
        Shape::new([n, c, oh, ow]),
        vec![x.clone()],
        AvgFn {
            dims: (n, c, h, w),
            rows,
            cols,
        },
    )
}

pub fn avgpool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = nchw("avgpool2d", x)?;
    ensure!(kernel > 0 && stride > 0, "avgpool2d: kernel and stride must be positive");
    ensure!(h >= kernel && w >= kernel, "avgpool2d: kernel {kernel} exceeds {h}x{w}");
    Ok(avg_bins(x, strided_bins(h, kernel, stride), strided_bins(w, kernel, stride)))
}

/// Average pool to a fixed `out×out` grid regardless of input size.
pub fn adaptive_avgpool2d<T: Element>(x: &Tensor<T>, out: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = nchw("adaptive_avgpool2d", x)?;
    ensure!(out > 0, "adaptive_avgpool2d: output size must be positive");
    Ok(avg_bins(x, adaptive_bins(h, out), adaptive_bins(w, out)))
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avgpool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, _, _) = nchw("global_avgpool", x)?;
    super::ops::reshape(&adaptive_avgpool2d(x, 1)?, [n, c])
}

struct MaxFn {
    in_len: usize,
    argmax: Vec<usize>,
}

impl<T: Element> GradFn<T> for MaxFn {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
    fn backward(&self, g: &[T], _: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); self.in_len];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            dx[src] = dx[src] + gv;
        }
        Ok(vec![Some(dx)])
    }
}

pub fn maxpool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("maxpool2d", x)?;
    ensure!(kernel > 0 && stride > 0, "maxpool2d: kernel and stride must be positive");
    ensure!(h >= kernel && w >= kernel, "maxpool2d: kernel {kernel} exceeds {h}x{w}");
    let rows = strided_bins(h, kernel, stride);
    let cols = strided_bins(w, kernel, stride);
    let mut out = Vec::with_capacity(n * c * rows.len() * cols.len());
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut best = base + r0 * w + c0;
                for y in r0..r1 {
                    for xx in c0..c1 {
                        let i = base + y * w + xx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        Shape::new([n, c, rows.len(), cols.len()]),
        vec![x.clone()],
        MaxFn {
            in_len: x.numel(),
            argmax,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Tensor<f64> {
        Tensor::new((1..=16).map(f64::from).collect(), [1, 1, 4, 4]).unwrap()
    }

    #[test]
    fn avgpool_values() {
        let y = avgpool2d(&grid(), 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn maxpool_values() {
        let y = maxpool2d(&grid(), 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![6., 8., 14., 16.]);
    }

    #[test]
    fn global_pool_is_mean() {
        let y = global_avgpool(&grid()).unwrap();
        assert_eq!(y.dims(), &[1, 1]);
        assert_eq!(y.item(), 8.5);
    }

    #[test]
    fn adaptive_handles_uneven_and_upsampling() {
        let x = Tensor::<f64>::new((0..9).map(f64::from).collect(), [1, 1, 3, 3]).unwrap();
        let y = adaptive_avgpool2d(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![2., 3., 5., 6.]);
        let one = Tensor::<f64>::new(vec![7.0], [1, 1, 1, 1]).unwrap();
        assert_eq!(adaptive_avgpool2d(&one, 2).unwrap().to_vec(), vec![7.0; 4]);
    }
}
