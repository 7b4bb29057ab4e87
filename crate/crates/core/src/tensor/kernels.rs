// Raw slice kernels shared by the forward and backward passes.

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}

#[cfg(not(feature = "f64-accumulate"))]
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted by the caller.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(feature = "f64-accumulate")]
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                acc += av as f64 * bv as f64;
            }
            let dst = &mut c[i * n + j];
            *dst = if accumulate { *dst + acc as f32 } else { acc as f32 };
        }
    }
}

pub(crate) fn transpose_into(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Geometry of a square-kernel 2-D convolution over a channels-last image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { h, w, cin, k, stride, pad, h_out, w_out })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Calls `f(col_index, pixel_index)` for every in-bounds tap; padding taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let plen = self.patch_len();
        for oy in 0..self.h_out {
            for ox in 0..self.w_out {
                let row = (oy * self.w_out + ox) * plen;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = row + (ky * self.k + kx) * self.cin;
                        let pix = (iy as usize * self.w + ix as usize) * self.cin;
                        f(col, pix);
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let mut cols = vec![0.0; self.h_out * self.w_out * self.patch_len()];
        let cin = self.cin;
        self.for_each_tap(|col, pix| cols[col..col + cin].copy_from_slice(&x[pix..pix + cin]));
        cols
    }

    pub fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let mut x = vec![0.0; self.h * self.w * self.cin];
        let cin = self.cin;
        self.for_each_tap(|col, pix| {
            for (d, s) in x[pix..pix + cin].iter_mut().zip(&cols[col..col + cin]) {
                *d += s;
            }
        });
        x
    }
}

/// Linear interpolation taps along one axis (half-pixel centres, edge clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct Axis1d {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f32>,
}

pub fn bilinear_weights(src: usize, dst: usize) -> Axis1d {
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut w_hi = Vec::with_capacity(dst);
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        lo.push(i0);
        hi.push(i1);
        w_hi.push((pos - i0 as f64) as f32);
    }
    Axis1d { lo, hi, w_hi }
}

pub(crate) fn resize_forward(
    x: &[f32],
    (h, w, c): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f32> {
    let ay = bilinear_weights(h, ho);
    let ax = bilinear_weights(w, wo);
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.w_hi[oy]);
        for ox in 0..wo {
            let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.w_hi[ox]);
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&x[base..base + c]) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    g: &[f32],
    (h, w, c): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f32> {
    let ay = bilinear_weights(h, ho);
    let ax = bilinear_weights(w, wo);
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..ho {
        let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.w_hi[oy]);
        for ox in 0..wo {
            let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.w_hi[ox]);
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let src = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (base, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for (d, s) in dx[base..base + c].iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    dx
}

/// `e^x` by range reduction and a degree-6 polynomial; relative error below
/// 2e-7 on the normal range. Branch-free so loops over it vectorise.
#[inline]
pub(crate) fn exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    // The low mantissa bits of `m` hold round(x·log2 e) as an integer.
    let m = x * LOG2E + ROUND;
    let n = m - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
    p * f32::from_bits(m.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23)
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_C: f32 = 0.044_715;

/// Tanh-form GELU, written as `x·σ(2u)` since `(1 + tanh u)/2 = σ(2u)`.
pub(crate) fn gelu(x: f32) -> f32 {
    x * gelu_gate(x)
}

#[inline]
fn gelu_gate(x: f32) -> f32 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    1.0 / (1.0 + exp(-2.0 * u))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let s = gelu_gate(x);
    s + x * s * (1.0 - s) * 2.0 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    let e = exp(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
