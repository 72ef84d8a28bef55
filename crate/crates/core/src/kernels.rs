//! Forward and backward kernels that work directly on tensor buffers.
//!
//! Every loop here visits elements in a fixed order, so results are
//! reproducible bit for bit on a given machine.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: input.to_vec(),
                    reason: "input must be [N, Cin, H, W]".into(),
                })
            }
        };
        let (cout, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: kernel.to_vec(),
                    reason: "kernel must be [Cout, Cin, kh, kw]".into(),
                })
            }
        };
        if kc != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: kernel.to_vec(),
                reason: "kernel extents must be odd".into(),
            });
        }
        let oh = (h + 2 * pad) as isize - kh as isize + 1;
        let ow = (w + 2 * pad) as isize - kw as isize + 1;
        if oh < 1 || ow < 1 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: format!("non-positive output extent {oh}x{ow}"),
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            oh: oh as usize,
            ow: ow as usize,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns `ox` whose source column `ox + shift` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize, isize) {
        let shift = kx as isize - self.pad as isize;
        let lo = (-shift).clamp(0, self.ow as isize);
        let hi = (self.w as isize - shift).clamp(lo, self.ow as isize);
        (lo as usize, hi as usize, shift)
    }
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi, shift) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let s0 = (lo as isize + shift) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi, shift) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s0 = (lo as isize + shift) as usize;
                    for (d, &v) in dst[s0..s0 + (hi - lo)]
                        .iter_mut()
                        .zip(&src[oy * g.ow + lo..oy * g.ow + hi])
                    {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with symmetric zero padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.n {
        im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        T::gemm(g.cout, k, p, kernel.data(), false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad)?;
    let (need_input, need_kernel, need_bias) = need;
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut d_input = need_input.then(|| vec![T::zero(); g.n * in_len]);
    let mut d_kernel = need_kernel.then(|| vec![T::zero(); g.cout * k]);
    let mut d_bias = need_bias.then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
            T::gemm(g.cout, p, k, dy, false, &cols, true, dk, true);
        }
        if let Some(dx) = d_input.as_mut() {
            T::gemm(
                k,
                g.cout,
                p,
                kernel.data(),
                true,
                dy,
                false,
                &mut cols,
                false,
            );
            col2im(&cols, &g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
        if let Some(db) = d_bias.as_mut() {
            for (co, row) in dy.chunks(p).enumerate() {
                db[co] = row.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
    }
    Ok(ConvGrads {
        input: d_input
            .map(|d| Tensor::from_vec(input.shape(), d))
            .transpose()?,
        kernel: d_kernel
            .map(|d| Tensor::from_vec(kernel.shape(), d))
            .transpose()?,
        bias: d_bias.map(|d| Tensor::from_vec(&[g.cout], d)).transpose()?,
    })
}

/// Space-to-channel: `[N, C, H, W] -> [N, C·r², H/r, W/r]` with output channel
/// `c·r² + dy·r + dx` holding offset `(dy, dx)` of each `r×r` block.
pub fn desubpixel<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("desubpixel")?;
    if r == 0 {
        return Err(Error::Config("desubpixel ratio must be at least 1".into()));
    }
    for extent in [h, w] {
        if extent % r != 0 {
            return Err(Error::NotDivisible {
                op: "desubpixel",
                extent,
                divisor: r,
            });
        }
    }
    let (oh, ow) = (h / r, w / r);
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        let row = ((ni * c + ci) * h + y * r + dy) * w;
                        out.extend((0..ow).map(|xx| src[row + xx * r + dx]));
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c * r * r, oh, ow], out)
}

/// Channel-to-space, the exact inverse of [`desubpixel`].
pub fn subpixel<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("subpixel")?;
    if r == 0 {
        return Err(Error::Config("subpixel ratio must be at least 1".into()));
    }
    if c % (r * r) != 0 {
        return Err(Error::NotDivisible {
            op: "subpixel",
            extent: c,
            divisor: r * r,
        });
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let cin = co * r * r + dy * r + dx;
                    for y in 0..h {
                        let src_row = ((ni * c + cin) * h + y) * w;
                        let dst_row = ((ni * oc + co) * oh + y * r + dy) * ow;
                        for xx in 0..w {
                            out[dst_row + xx * r + dx] = src[src_row + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oc, oh, ow], out)
}

/// Index map of the non-overlapping `k×k` patch unroll: for every element of the
/// `[N, C·k², M]` output, the flat index of its source in `[N, C, H, W]`.
fn patch_index(shape: &[usize], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, c, h, w) = match *shape {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "patch_unroll",
                shape: shape.to_vec(),
                reason: "expected [N, C, H, W]".into(),
            })
        }
    };
    if k == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    for extent in [h, w] {
        if extent % k != 0 {
            return Err(Error::NotDivisible {
                op: "patch_unroll",
                extent,
                divisor: k,
            });
        }
    }
    let (ph, pw) = (h / k, w / k);
    let m = ph * pw;
    let mut index = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    for py in 0..ph {
                        for px in 0..pw {
                            index.push(((ni * c + ci) * h + py * k + ky) * w + px * k + kx);
                        }
                    }
                }
            }
        }
    }
    Ok((index, vec![n, c * k * k, m]))
}

/// `[N, C, H, W] -> [N, C·k², M]`: column `m` holds the `m`-th `k×k` patch in
/// raster order, rows ordered by `(channel, ky, kx)`.
pub fn patch_unroll<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (index, shape) = patch_index(x.shape(), k)?;
    let src = x.data();
    Tensor::from_vec(&shape, index.iter().map(|&i| src[i]).collect())
}

pub fn patch_fold<T: Scalar>(
    grad: &Tensor<T>,
    image_shape: &[usize],
    k: usize,
) -> Result<Tensor<T>> {
    let (index, _) = patch_index(image_shape, k)?;
    let mut out = vec![T::zero(); index.len()];
    for (&i, &g) in index.iter().zip(grad.data()) {
        out[i] = g;
    }
    Tensor::from_vec(image_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4("t").unwrap();
        let (cout, _, kh, kw) = k.dims4("t").unwrap();
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x.data()
                                            [((ni * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len)
                .map(|i| ((i * 7919) % 101) as f64 * scale - 0.5)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (shape, kshape, pad) in [
            ([2, 3, 5, 6], [4, 3, 3, 3], 1),
            ([1, 2, 4, 4], [3, 2, 1, 1], 0),
            ([1, 1, 6, 5], [2, 1, 5, 3], 2),
            ([1, 2, 3, 3], [1, 2, 3, 3], 0),
            ([1, 1, 2, 2], [1, 1, 3, 3], 2),
        ] {
            let x = ramp(&shape, 0.01);
            let k = ramp(&kshape, 0.013);
            let fast = conv2d_forward(&x, &k, None, pad).unwrap();
            let slow = naive_conv(&x, &k, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(
                fast.max_abs_diff(&slow) < 1e-12,
                "{shape:?} {kshape:?} pad {pad}"
            );
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 7, 7]), None, 1).is_err());
    }

    #[test]
    fn desubpixel_layout() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = desubpixel(&x, 2).unwrap();
        assert_eq!(d.shape(), &[1, 4, 1, 1]);
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(subpixel(&d, 2).unwrap(), x);
        assert!(matches!(
            desubpixel(&Tensor::<f32>::zeros(&[1, 1, 3, 4]), 2),
            Err(Error::NotDivisible {
                extent: 3,
                divisor: 2,
                ..
            })
        ));
        assert!(subpixel(&Tensor::<f32>::zeros(&[1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn patch_unroll_layout() {
        // 1×1×2×4, k=2 → two patches [[0,1],[4,5]] and [[2,3],[6,7]]
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], (0..8).map(f64::from).collect()).unwrap();
        let f = patch_unroll(&x, 2).unwrap();
        assert_eq!(f.shape(), &[1, 4, 2]);
        assert_eq!(f.data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
        assert_eq!(patch_fold(&f, x.shape(), 2).unwrap(), x);
    }
}
