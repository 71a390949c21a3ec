use crate::error::{Error, Result};

/// Dense row-major real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, or 1 for a scalar.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Rows `[start, start + n)` along the leading dimension.
    pub fn slice_batch(&self, start: usize, n: usize) -> Tensor {
        let per = self.len() / self.batch().max(1);
        let mut shape = self.shape.clone();
        shape[0] = n;
        Tensor {
            shape,
            data: self.data[start * per..(start + n) * per].to_vec(),
        }
    }

    /// Gathers the given rows along the leading dimension.
    pub fn gather_batch(&self, rows: &[usize]) -> Tensor {
        let per = self.len() / self.batch().max(1);
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }
}

/// Geometry of a 2-D convolution. The "input" side (`h`, `w`) is the
/// high-resolution side; the "output" side (`ho`, `wo`) the strided one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(k: usize, stride: usize, pad: usize, h: usize, w: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        Ok(ConvGeom {
            k,
            stride,
            pad,
            h,
            w,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output positions `lo..hi` whose tap `t` lands inside `0..size`.
    fn valid(&self, t: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = t as isize - self.pad as isize;
        // need 0 <= o*s + off < size
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((size as isize - 1 - off).div_euclid(s) + 1).clamp(0, out as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

/// Unfolds image `b` of `x` into columns `b·P..(b+1)·P` of `col`, a
/// `[ci·k·k, batch·P]` matrix with `P = ho·wo`. Padding taps stay zero, so
/// `col` must start zeroed.
fn im2col(x: &[f64], b: usize, batch: usize, ci: usize, g: &ConvGeom, col: &mut [f64]) {
    let (p, ld) = (g.ho * g.wo, batch * g.ho * g.wo);
    let xs = ci * g.h * g.w;
    for i in 0..ci {
        let xc = &x[b * xs + i * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            let (rlo, rhi) = g.valid(kh, g.h, g.ho);
            for kw in 0..g.k {
                let (clo, chi) = g.valid(kw, g.w, g.wo);
                let row = &mut col[((i * g.k + kh) * g.k + kw) * ld + b * p..][..p];
                for oh in rlo..rhi {
                    let xrow = &xc[(oh * g.stride + kh - g.pad) * g.w..][..g.w];
                    let out = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    for ow in clo..chi {
                        out[ow] = xrow[ow * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column block `b` into image `b` of `x`.
fn col2im(col: &[f64], b: usize, batch: usize, ci: usize, g: &ConvGeom, x: &mut [f64]) {
    let (p, ld) = (g.ho * g.wo, batch * g.ho * g.wo);
    let xs = ci * g.h * g.w;
    for i in 0..ci {
        let xc = &mut x[b * xs + i * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            let (rlo, rhi) = g.valid(kh, g.h, g.ho);
            for kw in 0..g.k {
                let (clo, chi) = g.valid(kw, g.w, g.wo);
                let row = &col[((i * g.k + kh) * g.k + kw) * ld + b * p..][..p];
                for oh in rlo..rhi {
                    let xrow = &mut xc[(oh * g.stride + kh - g.pad) * g.w..][..g.w];
                    let src = &row[oh * g.wo..(oh + 1) * g.wo];
                    for ow in clo..chi {
                        xrow[ow * g.stride + kw - g.pad] += src[ow];
                    }
                }
            }
        }
    }
}

/// `[batch, co, P]` ↔ `[co, batch·P]`
fn batch_major_to_channel_major(y: &[f64], batch: usize, co: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..batch {
        for o in 0..co {
            out[o * batch * p + b * p..][..p].copy_from_slice(&y[(b * co + o) * p..][..p]);
        }
    }
    out
}

fn channel_major_to_batch_major(y: &[f64], batch: usize, co: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..batch {
        for o in 0..co {
            out[(b * co + o) * p..][..p].copy_from_slice(&y[o * batch * p + b * p..][..p]);
        }
    }
    out
}

fn unfold(x: &[f64], batch: usize, ci: usize, g: &ConvGeom) -> Vec<f64> {
    let mut col = vec![0.0; ci * g.k * g.k * batch * g.ho * g.wo];
    for b in 0..batch {
        im2col(x, b, batch, ci, g, &mut col);
    }
    col
}

/// `y[b,co,oh,ow] = Σ x[b,ci,oh*s+kh-p,ow*s+kw-p] · w[co,ci,kh,kw]`
pub fn conv2d(x: &[f64], w: &[f64], batch: usize, ci: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (p, r) = (g.ho * g.wo, ci * g.k * g.k);
    let ld = batch * p;
    let col = unfold(x, batch, ci, g);
    let mut y = vec![0.0; co * ld];
    for o in 0..co {
        let yrow = &mut y[o * ld..(o + 1) * ld];
        for (j, &wv) in w[o * r..(o + 1) * r].iter().enumerate() {
            for (yv, cv) in yrow.iter_mut().zip(&col[j * ld..(j + 1) * ld]) {
                *yv += wv * cv;
            }
        }
    }
    channel_major_to_batch_major(&y, batch, co, p)
}

/// Adjoint of [`conv2d`] in its first argument: maps the strided side back
/// to the high-resolution side.
pub fn conv2d_transpose(
    gy: &[f64],
    w: &[f64],
    batch: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (p, r) = (g.ho * g.wo, ci * g.k * g.k);
    let ld = batch * p;
    let gy = batch_major_to_channel_major(gy, batch, co, p);
    let mut col = vec![0.0; r * ld];
    for o in 0..co {
        let grow = &gy[o * ld..(o + 1) * ld];
        for (j, &wv) in w[o * r..(o + 1) * r].iter().enumerate() {
            for (cv, gv) in col[j * ld..(j + 1) * ld].iter_mut().zip(grow) {
                *cv += wv * gv;
            }
        }
    }
    let mut x = vec![0.0; batch * ci * g.h * g.w];
    for b in 0..batch {
        col2im(&col, b, batch, ci, g, &mut x);
    }
    x
}

/// Adjoint of [`conv2d`] in its second argument (the weight gradient).
pub fn conv2d_weight(
    x: &[f64],
    gy: &[f64],
    batch: usize,
    ci: usize,
    co: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (p, r) = (g.ho * g.wo, ci * g.k * g.k);
    let ld = batch * p;
    let col = unfold(x, batch, ci, g);
    let gy = batch_major_to_channel_major(gy, batch, co, p);
    let mut w = vec![0.0; co * r];
    for o in 0..co {
        let grow = &gy[o * ld..(o + 1) * ld];
        for (j, wv) in w[o * r..(o + 1) * r].iter_mut().enumerate() {
            *wv = grow
                .iter()
                .zip(&col[j * ld..(j + 1) * ld])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    w
}

/// `[m, k] × [k, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_halves_even_sizes() {
        let g = ConvGeom::new(4, 2, 1, 16, 16).unwrap();
        assert_eq!((g.ho, g.wo), (8, 8));
        let g = ConvGeom::new(4, 2, 1, 60, 60).unwrap();
        assert_eq!((g.ho, g.wo), (30, 30));
    }

    #[test]
    fn conv_adjoint_identities() {
        // <conv(x, w), y> = <x, convT(y, w)> = <w, wgrad(x, y)>
        let g = ConvGeom::new(3, 2, 1, 5, 6).unwrap();
        let (b, ci, co) = (2, 3, 2);
        let x: Vec<f64> = (0..b * ci * 30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..co * ci * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let y: Vec<f64> = (0..b * co * g.ho * g.wo)
            .map(|i| ((i * 3) % 5) as f64 - 2.0)
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&conv2d(&x, &w, b, ci, co, &g), &y);
        assert_eq!(lhs, dot(&x, &conv2d_transpose(&y, &w, b, ci, co, &g)));
        assert_eq!(lhs, dot(&w, &conv2d_weight(&x, &y, b, ci, co, &g)));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = ConvGeom::new(4, 2, 1, 6, 6).unwrap();
        let x: Vec<f64> = (0..36).map(|i| i as f64 * 0.1).collect();
        let w: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.05).collect();
        let y = conv2d(&x, &w, 1, 1, 1, &g);
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut acc = 0.0;
                for kh in 0..4 {
                    for kw in 0..4 {
                        let ih = (oh * 2 + kh) as isize - 1;
                        let iw = (ow * 2 + kw) as isize - 1;
                        if (0..6).contains(&ih) && (0..6).contains(&iw) {
                            acc += x[ih as usize * 6 + iw as usize] * w[kh * 4 + kw];
                        }
                    }
                }
                assert!((acc - y[oh * g.wo + ow]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_small() {
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
