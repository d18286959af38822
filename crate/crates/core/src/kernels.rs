//! Raw numeric kernels over flat row-major buffers.

/// `c = alpha·op(a)·op(b) + beta·c` with `op(a)` of size m×k and `op(b)` k×n.
///
/// `a_t` / `b_t` mark operands stored transposed (k×m and n×k respectively).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Rows of the unfolded column matrix (groups == 1).
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `[c·kh·kw, n·ho·wo]` column matrix.
pub fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let np = g.n * g.positions();
    let mut cols = vec![0.0; g.patch_len() * np];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        let base = n * g.positions() + oy * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                dst[base + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let np = g.n * g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        let base = n * g.positions() + oy * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                plane[iy * g.w + ix] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct grouped convolution (used for depthwise kernels).
pub fn grouped_conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let cg = g.c / g.groups;
    let kg = g.k / g.groups;
    let p = g.positions();
    for n in 0..g.n {
        for k in 0..g.k {
            let grp = k / kg;
            let dst = &mut out[(n * g.k + k) * p..][..p];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                let wk = &w[(k * cg + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = wk[i * g.kw + j];
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    dst[oy * g.wo + ox] += wv * plane[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`grouped_conv_forward`] with respect to input and weight.
pub fn grouped_conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let cg = g.c / g.groups;
    let kg = g.k / g.groups;
    let p = g.positions();
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        for k in 0..g.k {
            let grp = k / kg;
            let go = &gout[(n * g.k + k) * p..][..p];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let xoff = (n * g.c + c) * g.h * g.w;
                let woff = (k * cg + ci) * g.kh * g.kw;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = w[woff + i * g.kw + j];
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    let gv = go[oy * g.wo + ox];
                                    let xi = xoff + iy * g.w + ix;
                                    acc += gv * x[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] += gv * wv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[woff + i * g.kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
}
