//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that requires them.
//!
//! Broadcasting is limited to per-channel bias/affine terms; every other
//! binary op requires identical shapes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{apply_precision, Tensor};

/// Denominator offset of global response normalization.
pub const GRN_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        // unfolded input, kept only for groups == 1
        cols: Option<Vec<f64>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Grn {
        x: Var,
        gamma: Var,
        beta: Var,
        keep: Option<Arc<[bool]>>,
        gx: Vec<f64>,
        denom: Vec<f64>,
    },
    Gelu(Var),
    MaskSites {
        x: Var,
        keep: Arc<[bool]>,
    },
    FillMasked {
        x: Var,
        token: Var,
        keep: Arc<[bool]>,
    },
    ToPatches(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MseMean(Var, Var),
    MaskedMse {
        pred: Var,
        target: Var,
        masked: Arc<[bool]>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn nchw(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn expect_shape(op: &'static str, what: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::shape(
            op,
            format!("{what} has shape {:?}, expected {want:?}", t.shape()),
        ));
    }
    Ok(())
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn acc_buf(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        apply_precision(value.data_mut());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [K,C/groups,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = nchw("conv2d", self.value(x))?;
        let [k, cg, kh, kw] = match *self.value(w).shape() {
            [k, cg, kh, kw] => [k, cg, kh, kw],
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be [K,C/g,kh,kw], got {s:?}"),
                ))
            }
        };
        if groups == 0 || stride == 0 {
            return Err(Error::shape("conv2d", "groups and stride must be >= 1"));
        }
        if c % groups != 0 || k % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels C={c} / K={k} not divisible by groups={groups}"),
            ));
        }
        if cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight axis 1 is {cg}, input has C/groups = {}", c / groups),
            ));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            expect_shape("conv2d", "bias", self.value(b), &[k])?;
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let p = geom.positions();
        let mut out = vec![0.0; n * k * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let cols = if groups == 1 {
            let cols = kernels::im2col(&geom, xv);
            let mut mat = vec![0.0; k * n * p];
            kernels::gemm(k, geom.patch_len(), n * p, wv, false, &cols, false, &mut mat, 0.0);
            for ni in 0..n {
                for ki in 0..k {
                    out[(ni * k + ki) * p..][..p].copy_from_slice(&mat[ki * n * p + ni * p..][..p]);
                }
            }
            Some(cols)
        } else {
            kernels::grouped_conv_forward(&geom, xv, wv, &mut out);
            None
        };
        if let Some(b) = b {
            let bv = self.value(b).data();
            for ni in 0..n {
                for ki in 0..k {
                    out[(ni * k + ki) * p..][..p].iter_mut().for_each(|v| *v += bv[ki]);
                }
            }
        }
        let out = Tensor::new(&[n, k, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Layer normalization across channels at every spatial site.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::shape("layer_norm_channels", "eps must be > 0"));
        }
        let [n, c, h, w] = nchw("layer_norm_channels", self.value(x))?;
        expect_shape("layer_norm_channels", "gamma", self.value(gamma), &[c])?;
        expect_shape("layer_norm_channels", "beta", self.value(beta), &[c])?;
        let p = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * p];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            let base = ni * c * p;
            for s in 0..p {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xv[base + ci * p + s];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xv[base + ci * p + s] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[ni * p + s] = r;
                for ci in 0..c {
                    let i = base + ci * p + s;
                    let xh = (xv[i] - mean) * r;
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Global response normalization.
    ///
    /// Per sample and channel the L2 response is taken over spatial sites
    /// (only the kept sites when `keep` is given), divided by its channel mean,
    /// and applied as `gamma·(x·N) + beta + x`.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, keep: Option<Arc<[bool]>>) -> Result<Var> {
        let [n, c, h, w] = nchw("grn", self.value(x))?;
        expect_shape("grn", "gamma", self.value(gamma), &[c])?;
        expect_shape("grn", "beta", self.value(beta), &[c])?;
        let p = h * w;
        if let Some(k) = &keep {
            if k.len() != n * p {
                return Err(Error::shape(
                    "grn",
                    format!("site mask has {} entries, expected {}", k.len(), n * p),
                ));
            }
            if (0..n).any(|ni| !k[ni * p..(ni + 1) * p].iter().any(|&b| b)) {
                return Err(Error::NoVisibleSites { op: "grn" });
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut gx = vec![0.0; n * c];
        let mut denom = vec![0.0; n];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xv[(ni * c + ci) * p..][..p];
                let ss: f64 = match &keep {
                    Some(k) => plane
                        .iter()
                        .zip(&k[ni * p..(ni + 1) * p])
                        .filter(|(_, &kk)| kk)
                        .map(|(v, _)| v * v)
                        .sum(),
                    None => plane.iter().map(|v| v * v).sum(),
                };
                gx[ni * c + ci] = ss.sqrt();
            }
            denom[ni] = gx[ni * c..(ni + 1) * c].iter().sum::<f64>() / c as f64 + GRN_EPS;
        }
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let nx = gx[ni * c + ci] / denom[ni];
                let off = (ni * c + ci) * p;
                for s in 0..p {
                    let v = xv[off + s];
                    out[off + s] = gv[ci] * (v * nx) + bv[ci] + v;
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::Grn {
                x,
                gamma,
                beta,
                keep,
                gx,
                denom,
            },
            &[x, gamma, beta],
        ))
    }

    /// Zeroes every channel at sites where `keep` is false. `keep` indexes `[N,H,W]`.
    pub fn mask_sites(&mut self, x: Var, keep: Arc<[bool]>) -> Result<Var> {
        let [n, c, h, w] = nchw("mask_sites", self.value(x))?;
        let p = h * w;
        if keep.len() != n * p {
            return Err(Error::shape(
                "mask_sites",
                format!("site mask has {} entries, expected {}", keep.len(), n * p),
            ));
        }
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * p;
                for s in 0..p {
                    if !keep[ni * p + s] {
                        data[off + s] = 0.0;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaskSites { x, keep }, &[x]))
    }

    /// Replaces every site where `keep` is false by the per-channel `token`.
    pub fn fill_masked(&mut self, x: Var, token: Var, keep: Arc<[bool]>) -> Result<Var> {
        let [n, c, h, w] = nchw("fill_masked", self.value(x))?;
        expect_shape("fill_masked", "token", self.value(token), &[c])?;
        let p = h * w;
        if keep.len() != n * p {
            return Err(Error::shape(
                "fill_masked",
                format!("site mask has {} entries, expected {}", keep.len(), n * p),
            ));
        }
        let tv = self.value(token).data().to_vec();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for ni in 0..n {
            for (ci, &t) in tv.iter().enumerate() {
                let off = (ni * c + ci) * p;
                for s in 0..p {
                    if !keep[ni * p + s] {
                        data[off + s] = t;
                    }
                }
            }
        }
        Ok(self.push(out, Op::FillMasked { x, token, keep }, &[x, token]))
    }

    /// `[N,C,H,W] -> [N,H·W,C]`: one row of channel values per site.
    pub fn to_patches(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("to_patches", self.value(x))?;
        let p = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for s in 0..p {
                    out[(ni * p + s) * c + ci] = xv[(ni * c + ci) * p + s];
                }
            }
        }
        let out = Tensor::new(&[n, p, c], out)?;
        Ok(self.push(out, Op::ToPatches(x), &[x]))
    }

    /// `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, fin, fout) = match (xs, ws) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        if let Some(b) = b {
            expect_shape("linear", "bias", self.value(b), &[fout])?;
        }
        let mut out = vec![0.0; n * fout];
        kernels::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let out = Tensor::new(&[n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "mse_mean",
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(out, Op::MseMean(pred, target), &[pred, target]))
    }

    /// Mean over selected patches of the per-patch mean squared error.
    ///
    /// `pred` and `target` are `[N,G,D]`; `masked` indexes `[N,G]` and selects
    /// the patches that enter the average.
    pub fn masked_patch_mse(&mut self, pred: Var, target: Var, masked: Arc<[bool]>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.ndim() != 3 {
            return Err(Error::shape(
                "masked_patch_mse",
                format!("pred {:?} vs target {:?}", p.shape(), t.shape()),
            ));
        }
        let (n, g, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        if masked.len() != n * g {
            return Err(Error::shape(
                "masked_patch_mse",
                format!("patch mask has {} entries, expected {}", masked.len(), n * g),
            ));
        }
        let count = masked.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Mask("loss over an empty set of masked patches".into()));
        }
        let mut total = 0.0;
        for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
            let a = &p.data()[i * d..(i + 1) * d];
            let b = &t.data()[i * d..(i + 1) * d];
            let se: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += se / d as f64;
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::MaskedMse {
                pred,
                target,
                masked,
                count,
            },
            &[pred, target],
        ))
    }

    /// Reverse pass from a scalar `loss`, adding into every reachable node that
    /// requires gradients. Gradients from earlier calls are kept and summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            add_into(&mut self.nodes[id].grad, &g);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(&mut grads[a.0], &scaled);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.value(*a).len();
                    let buf = acc_buf(&mut grads[a.0], len);
                    buf.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xv = self.value(*a).data();
                    let local: Vec<f64> = xv.iter().zip(g).map(|(&x, &gg)| gg * gelu_grad(x)).collect();
                    add_into(&mut grads[a.0], &local);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols.as_deref(), g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let [n, c, h, w] = nchw("layer_norm_channels", self.value(*x)).expect("shape");
                let p = h * w;
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * p;
                            for s in 0..p {
                                dg[ci] += g[off + s] * xhat[off + s];
                                db[ci] += g[off + s];
                            }
                        }
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], &dg);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], &db);
                    }
                }
                if self.rg(*x) {
                    let buf = acc_buf(&mut grads[x.0], n * c * p);
                    for ni in 0..n {
                        for s in 0..p {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for ci in 0..c {
                                let i = (ni * c + ci) * p + s;
                                let dxh = g[i] * gv[ci];
                                m1 += dxh;
                                m2 += dxh * xhat[i];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            let r = rstd[ni * p + s];
                            for ci in 0..c {
                                let i = (ni * c + ci) * p + s;
                                let dxh = g[i] * gv[ci];
                                buf[i] += r * (dxh - m1 - xhat[i] * m2);
                            }
                        }
                    }
                }
            }
            Op::Grn {
                x,
                gamma,
                beta,
                keep,
                gx,
                denom,
            } => {
                let [n, c, h, w] = nchw("grn", self.value(*x)).expect("shape");
                let p = h * w;
                let xv = self.value(*x).data();
                let gmv = self.value(*gamma).data();
                // a[n,c] = sum_s g·gamma·x
                let mut a = vec![0.0; n * c];
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * p;
                        let mut gxsum = 0.0;
                        let mut gsum = 0.0;
                        for s in 0..p {
                            gxsum += g[off + s] * xv[off + s];
                            gsum += g[off + s];
                        }
                        a[ni * c + ci] = gxsum * gmv[ci];
                        dgam[ci] += gxsum * gx[ni * c + ci] / denom[ni];
                        dbet[ci] += gsum;
                    }
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], &dgam);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], &dbet);
                }
                if self.rg(*x) {
                    let buf = acc_buf(&mut grads[x.0], n * c * p);
                    for ni in 0..n {
                        let d = denom[ni];
                        let ag: f64 = (0..c).map(|ci| a[ni * c + ci] * gx[ni * c + ci]).sum();
                        for ci in 0..c {
                            let nx = gx[ni * c + ci] / d;
                            let off = (ni * c + ci) * p;
                            let scale = gmv[ci] * nx + 1.0;
                            let gnorm = gx[ni * c + ci];
                            let dg = a[ni * c + ci] / d - ag / (c as f64 * d * d);
                            for s in 0..p {
                                let mut v = g[off + s] * scale;
                                let visible = keep.as_ref().is_none_or(|k| k[ni * p + s]);
                                if visible && gnorm > 0.0 {
                                    v += dg * xv[off + s] / gnorm;
                                }
                                buf[off + s] += v;
                            }
                        }
                    }
                }
            }
            Op::MaskSites { x, keep } => {
                if self.rg(*x) {
                    let [n, c, h, w] = nchw("mask_sites", self.value(*x)).expect("shape");
                    let p = h * w;
                    let buf = acc_buf(&mut grads[x.0], n * c * p);
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * p;
                            for s in 0..p {
                                if keep[ni * p + s] {
                                    buf[off + s] += g[off + s];
                                }
                            }
                        }
                    }
                }
            }
            Op::FillMasked { x, token, keep } => {
                let [n, c, h, w] = nchw("fill_masked", self.value(*x)).expect("shape");
                let p = h * w;
                if self.rg(*x) {
                    let buf = acc_buf(&mut grads[x.0], n * c * p);
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * p;
                            for s in 0..p {
                                if keep[ni * p + s] {
                                    buf[off + s] += g[off + s];
                                }
                            }
                        }
                    }
                }
                if self.rg(*token) {
                    let mut dt = vec![0.0; c];
                    for ni in 0..n {
                        for (ci, d) in dt.iter_mut().enumerate() {
                            let off = (ni * c + ci) * p;
                            for s in 0..p {
                                if !keep[ni * p + s] {
                                    *d += g[off + s];
                                }
                            }
                        }
                    }
                    add_into(&mut grads[token.0], &dt);
                }
            }
            Op::ToPatches(x) => {
                if self.rg(*x) {
                    let [n, c, h, w] = nchw("to_patches", self.value(*x)).expect("shape");
                    let p = h * w;
                    let buf = acc_buf(&mut grads[x.0], n * c * p);
                    for ni in 0..n {
                        for ci in 0..c {
                            for s in 0..p {
                                buf[(ni * c + ci) * p + s] += g[(ni * p + s) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let buf = acc_buf(&mut grads[x.0], n * fin);
                    kernels::gemm(n, fout, fin, g, false, self.value(*w).data(), false, buf, 1.0);
                }
                if self.rg(*w) {
                    let buf = acc_buf(&mut grads[w.0], fout * fin);
                    kernels::gemm(fout, n, fin, g, true, self.value(*x).data(), false, buf, 1.0);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let buf = acc_buf(&mut grads[b.0], fout);
                    for row in g.chunks(fout) {
                        buf.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MseMean(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let k = 2.0 * g[0] / pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| k * (a - b)).collect();
                if self.rg(*p) {
                    add_into(&mut grads[p.0], &d);
                }
                if self.rg(*t) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    add_into(&mut grads[t.0], &neg);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                masked,
                count,
            } => {
                let pv = self.value(*pred);
                let tv = self.value(*target).data();
                let dd = pv.shape()[2];
                let k = 2.0 * g[0] / (*count as f64 * dd as f64);
                let mut d = vec![0.0; pv.len()];
                for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                    for j in i * dd..(i + 1) * dd {
                        d[j] = k * (pv.data()[j] - tv[j]);
                    }
                }
                if self.rg(*pred) {
                    add_into(&mut grads[pred.0], &d);
                }
                if self.rg(*target) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    add_into(&mut grads[target.0], &neg);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, k, p) = (geom.n, geom.k, geom.positions());
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![0.0; k];
            for ni in 0..n {
                for (ki, d) in db.iter_mut().enumerate() {
                    *d += g[(ni * k + ki) * p..][..p].iter().sum::<f64>();
                }
            }
            add_into(&mut grads[b.0], &db);
        }
        let wv = self.value(w).data();
        let wlen = wv.len();
        match cols {
            Some(cols) => {
                let np = n * p;
                let r = geom.patch_len();
                let mut gmat = vec![0.0; k * np];
                for ni in 0..n {
                    for ki in 0..k {
                        gmat[ki * np + ni * p..][..p].copy_from_slice(&g[(ni * k + ki) * p..][..p]);
                    }
                }
                if self.rg(w) {
                    let buf = acc_buf(&mut grads[w.0], wlen);
                    kernels::gemm(k, np, r, &gmat, false, cols, true, buf, 1.0);
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; r * np];
                    kernels::gemm(r, k, np, wv, true, &gmat, false, &mut dcols, 0.0);
                    let xlen = self.value(x).len();
                    let buf = acc_buf(&mut grads[x.0], xlen);
                    kernels::col2im(geom, &dcols, buf);
                }
            }
            None => {
                let xv = self.value(x).data();
                let mut dx = self.rg(x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(w).then(|| vec![0.0; wlen]);
                kernels::grouped_conv_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], &dw);
                }
            }
        }
    }
}
