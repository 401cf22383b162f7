//! 2-D cross-correlation lowered to GEMM through an im2col buffer.
//!
//! The im2col buffer for a whole batch is laid out `[Cin·k·k, N·Ho·Wo]`, so one
//! matrix product serves every image.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

pub(crate) fn geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [cout, wcin, kh, kw] = weight.dims4(OP)?;
    if wcin != cin {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "Cin",
            expected: cin,
            found: wcin,
        });
    }
    if kh != kw {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "kernel width",
            expected: kh,
            found: kw,
        });
    }
    if kh % 2 == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            reason: format!("kernel size {kh} is not odd"),
        });
    }
    if bias.shape() != [cout] {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "bias",
            expected: cout,
            found: bias.numel(),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            reason: "stride must be >= 1".into(),
        });
    }
    let out_dim = |size: usize, axis: &'static str| -> Result<usize> {
        let padded = size + 2 * padding;
        if padded < kh {
            return Err(TensorError::Dimension {
                op: OP,
                axis,
                expected: kh,
                found: padded,
            });
        }
        Ok((padded - kh) / stride + 1)
    };
    let ho = out_dim(h, "H")?;
    let wo = out_dim(w, "W")?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        stride,
        padding,
        ho,
        wo,
    })
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `koff`.
fn valid_range(out: usize, size: usize, koff: usize, g: &Geometry) -> (usize, usize) {
    // in = o·s + koff − p must satisfy 0 ≤ in < size
    let lo = if koff >= g.padding {
        0
    } else {
        (g.padding - koff).div_ceil(g.stride)
    };
    let limit = size + g.padding;
    let hi = if limit <= koff {
        0
    } else {
        ((limit - koff - 1) / g.stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.rows() * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut dst_row[b * plane + oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.padding;
                            dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = src_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g);
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let src = &src_row[b * plane + oy * g.wo..][..g.wo];
                        for ox in ox_lo..ox_hi {
                            dst[iy * g.w + ox * g.stride + kx - g.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c[m×n] = a·b` with explicit strides; `beta` scales the prior contents of `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &Geometry) -> Tensor {
    let cols = im2col(input.data(), g);
    let (rows, ncols, plane) = (g.rows(), g.cols(), g.ho * g.wo);
    let mut out_p = vec![0.0; g.cout * ncols];
    gemm(
        g.cout,
        rows,
        ncols,
        weight.data(),
        (rows, 1),
        &cols,
        (ncols, 1),
        0.0,
        &mut out_p,
    );
    let mut out = vec![0.0; g.n * g.cout * plane];
    let bias = bias.data();
    for b in 0..g.n {
        for co in 0..g.cout {
            let src = &out_p[co * ncols + b * plane..][..plane];
            let dst = &mut out[(b * g.cout + co) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[co];
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    want_input: bool,
) -> ConvGrads {
    let [n, cin, h, w] = input.dims4("conv2d").expect("validated on forward");
    let [cout, _, k, _] = weight.dims4("conv2d").expect("validated on forward");
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let g = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        padding,
        ho,
        wo,
    };
    let (rows, ncols, plane) = (g.rows(), g.cols(), ho * wo);

    let mut gp = vec![0.0; cout * ncols];
    let mut gbias = vec![0.0; cout];
    for b in 0..n {
        for co in 0..cout {
            let src = &grad_out[(b * cout + co) * plane..][..plane];
            gp[co * ncols + b * plane..][..plane].copy_from_slice(src);
            gbias[co] += src.iter().sum::<f64>();
        }
    }

    let cols = im2col(input.data(), &g);
    let mut gweight = vec![0.0; cout * rows];
    // dW = gp · colsᵀ
    gemm(cout, ncols, rows, &gp, (ncols, 1), &cols, (1, ncols), 0.0, &mut gweight);

    let ginput = want_input.then(|| {
        // dcols = Wᵀ · gp
        let mut dcols = vec![0.0; rows * ncols];
        gemm(
            rows,
            cout,
            ncols,
            weight.data(),
            (1, rows),
            &gp,
            (ncols, 1),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, &g)
    });

    ConvGrads {
        input: ginput,
        weight: gweight,
        bias: gbias,
    }
}
