//! Mask-preserving ("submanifold") convolution and normalization.
//!
//! Every op zeroes masked input sites before computing densely and re-zeroes
//! masked output sites afterwards, so values under the mask can neither reach
//! a visible site nor survive to the next layer. Biases and norm offsets are
//! therefore never present at masked sites.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskBatch;

#[derive(Clone, Debug)]
pub struct SparseActivation {
    pub dense: Var,
    pub mask: MaskBatch,
}

impl SparseActivation {
    /// Wraps `dense` and enforces the zero-at-masked-sites invariant.
    pub fn new(g: &mut Graph, dense: Var, mask: MaskBatch) -> Result<Self> {
        check_dims(g, dense, &mask)?;
        let dense = g.mask_sites(dense, mask.keep())?;
        Ok(Self { dense, mask })
    }
}

fn check_dims(g: &Graph, x: Var, mask: &MaskBatch) -> Result<()> {
    let s = g.value(x).shape();
    if s.len() != 4 || s[0] != mask.len() || s[2] != mask.h() || s[3] != mask.w() {
        return Err(Error::shape(
            "sparse",
            format!(
                "activation {s:?} does not match {} mask views of {}x{}",
                mask.len(),
                mask.h(),
                mask.w()
            ),
        ));
    }
    Ok(())
}

/// Output mask for a convolution producing `ho × wo` from the input mask.
fn output_mask(mask: &MaskBatch, ho: usize, wo: usize) -> Result<MaskBatch> {
    let (h, w) = (mask.h(), mask.w());
    if (ho, wo) == (h, w) {
        return Ok(mask.clone());
    }
    if ho > 0 && h % ho == 0 && w % wo == 0 && h / ho == w / wo {
        return mask.downsample_and(h / ho);
    }
    Err(Error::Mask(format!(
        "convolution output {ho}x{wo} is not stride-compatible with the {h}x{w} mask"
    )))
}

pub fn sparse_conv2d(
    g: &mut Graph,
    input: &SparseActivation,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<SparseActivation> {
    check_dims(g, input.dense, &input.mask)?;
    let x = g.mask_sites(input.dense, input.mask.keep())?;
    let y = g.conv2d(x, weight, bias, stride, padding, groups)?;
    let s = g.value(y).shape();
    let mask = output_mask(&input.mask, s[2], s[3])?;
    let dense = g.mask_sites(y, mask.keep())?;
    Ok(SparseActivation { dense, mask })
}

pub fn sparse_layer_norm(
    g: &mut Graph,
    input: &SparseActivation,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<SparseActivation> {
    check_dims(g, input.dense, &input.mask)?;
    let y = g.layer_norm_channels(input.dense, gamma, beta, eps)?;
    let dense = g.mask_sites(y, input.mask.keep())?;
    Ok(SparseActivation {
        dense,
        mask: input.mask.clone(),
    })
}

/// Global response normalization with statistics over visible sites only.
pub fn sparse_grn(
    g: &mut Graph,
    input: &SparseActivation,
    gamma: Var,
    beta: Var,
) -> Result<SparseActivation> {
    check_dims(g, input.dense, &input.mask)?;
    let y = g.grn(input.dense, gamma, beta, Some(input.mask.keep()))?;
    let dense = g.mask_sites(y, input.mask.keep())?;
    Ok(SparseActivation {
        dense,
        mask: input.mask.clone(),
    })
}

/// Non-overlapping `factor × factor` strided convolution that halves (or
/// otherwise reduces) resolution together with the mask.
pub fn downsample_conv(
    g: &mut Graph,
    input: &SparseActivation,
    weight: Var,
    bias: Option<Var>,
    factor: usize,
) -> Result<SparseActivation> {
    let ws = g.value(weight).shape();
    if ws.len() != 4 || ws[2] != factor || ws[3] != factor {
        return Err(Error::Mask(format!(
            "downsampling by {factor} needs a {factor}x{factor} kernel with equal stride, got weight {ws:?}"
        )));
    }
    for v in input.mask.views() {
        let (by, bx) = v.block();
        if by % factor != 0 || bx % factor != 0 {
            return Err(Error::Mask(format!(
                "mask blocks of {by}x{bx} are not divisible by downsampling factor {factor}"
            )));
        }
    }
    sparse_conv2d(g, input, weight, bias, factor, 0, 1)
}

pub fn sparse_gelu(g: &mut Graph, input: &SparseActivation) -> Result<SparseActivation> {
    let y = g.gelu(input.dense);
    let dense = g.mask_sites(y, input.mask.keep())?;
    Ok(SparseActivation {
        dense,
        mask: input.mask.clone(),
    })
}

pub fn sparse_add(g: &mut Graph, a: &SparseActivation, b: &SparseActivation) -> Result<SparseActivation> {
    if a.mask.keep() != b.mask.keep() {
        return Err(Error::Mask("residual add over different masks".into()));
    }
    let dense = g.add(a.dense, b.dense)?;
    Ok(SparseActivation {
        dense,
        mask: a.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskGrid;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn checker_mask(n: usize, h: usize, w: usize) -> MaskBatch {
        // 2x2 grid, cells (0,1) and (1,0) masked
        let grid = Arc::new(MaskGrid::parse_dump("MASK 2 2 0.5 0\n10\n01\n").unwrap());
        MaskBatch::at(&vec![grid; n], h, w).unwrap()
    }

    #[test]
    fn all_visible_conv_equals_dense() {
        let mut g = Graph::new();
        let x = g.constant(rnd(&[2, 3, 8, 8], 1));
        let w = g.constant(rnd(&[4, 3, 3, 3], 2));
        let b = g.constant(rnd(&[4], 3));
        let mask = MaskBatch::at(&[MaskGrid::all_visible(2, 2), MaskGrid::all_visible(2, 2)], 8, 8).unwrap();
        let sa = SparseActivation::new(&mut g, x, mask).unwrap();
        let s = sparse_conv2d(&mut g, &sa, w, Some(b), 1, 1, 1).unwrap();
        let d = g.conv2d(x, w, Some(b), 1, 1, 1).unwrap();
        assert!(g.value(s.dense).max_abs_diff(g.value(d)) <= 1e-12);
    }

    #[test]
    fn visible_outputs_sum_only_visible_neighbours() {
        let mut g = Graph::new();
        let xt = rnd(&[1, 1, 4, 4], 4);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let mask = checker_mask(1, 4, 4);
        let sa = SparseActivation::new(&mut g, x, mask.clone()).unwrap();
        let y = sparse_conv2d(&mut g, &sa, w, None, 1, 1, 1).unwrap();
        let out = g.value(y.dense).data();
        let vis = mask.views()[0].clone();
        for yy in 0..4usize {
            for xx in 0..4usize {
                let mut want = 0.0;
                if vis.is_visible(yy, xx) {
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let (sy, sx) = (yy as i32 + dy, xx as i32 + dx);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) && vis.is_visible(sy as usize, sx as usize) {
                                want += xt.data()[(sy * 4 + sx) as usize];
                            }
                        }
                    }
                }
                assert!((out[yy * 4 + xx] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corrupted_masked_sites_do_not_leak() {
        let mask = checker_mask(1, 4, 4);
        let run = |noise: f64| {
            let mut g = Graph::new();
            let mut xt = rnd(&[1, 2, 4, 4], 5);
            for c in 0..2 {
                for s in 0..16 {
                    if !mask.keep()[s] {
                        xt.data_mut()[c * 16 + s] += noise * (s as f64 + 1.0);
                    }
                }
            }
            let x = g.constant(xt);
            let w = g.constant(rnd(&[3, 2, 3, 3], 6));
            let gam = g.constant(rnd(&[3], 7));
            let bet = g.constant(rnd(&[3], 8));
            // corrupted input goes straight in without the constructor's zeroing
            let sa = SparseActivation { dense: x, mask: mask.clone() };
            let y = sparse_conv2d(&mut g, &sa, w, None, 1, 1, 1).unwrap();
            let y = sparse_layer_norm(&mut g, &y, gam, bet, 1e-6).unwrap();
            let y = sparse_grn(&mut g, &y, gam, bet).unwrap();
            g.value(y.dense).clone()
        };
        assert!(run(0.0).bit_eq(&run(37.5)));
    }

    #[test]
    fn masked_sites_are_zero_after_norms() {
        let mut g = Graph::new();
        let mask = checker_mask(1, 2, 2);
        let x = g.constant(Tensor::full(&[1, 3, 2, 2], 5.0));
        let gam = g.constant(Tensor::ones(&[3]));
        let bet = g.constant(Tensor::ones(&[3]));
        let sa = SparseActivation { dense: x, mask: mask.clone() };
        let ln = sparse_layer_norm(&mut g, &sa, gam, bet, 1e-6).unwrap();
        let grn = sparse_grn(&mut g, &sa, gam, bet).unwrap();
        for y in [ln, grn] {
            let v = g.value(y.dense).data();
            for c in 0..3 {
                for s in 0..4 {
                    if !mask.keep()[s] {
                        assert_eq!(v[c * 4 + s], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn restricted_grn_statistics_ignore_corruption() {
        let mask = checker_mask(1, 2, 2);
        let mut g = Graph::new();
        let mut xt = rnd(&[1, 2, 2, 2], 9);
        for c in 0..2 {
            xt.data_mut()[c * 4 + 1] = 100.0;
        }
        let x = g.constant(xt);
        let gam = g.constant(Tensor::ones(&[2]));
        let bet = g.constant(Tensor::zeros(&[2]));
        let sa = SparseActivation { dense: x, mask: mask.clone() };
        let restricted = sparse_grn(&mut g, &sa, gam, bet).unwrap();
        let unrestricted = g.grn(x, gam, bet, None).unwrap();
        let unrestricted = g.mask_sites(unrestricted, mask.keep()).unwrap();
        assert!(g.value(restricted.dense).max_abs_diff(g.value(unrestricted)) > 1e-3);

        let clean = SparseActivation::new(&mut g, x, mask.clone()).unwrap();
        let a = sparse_grn(&mut g, &clean, gam, bet).unwrap();
        let b = g.grn(clean.dense, gam, bet, None).unwrap();
        let b = g.mask_sites(b, mask.keep()).unwrap();
        assert!(g.value(a.dense).max_abs_diff(g.value(b)) <= 1e-12);
    }

    #[test]
    fn single_visible_site_grn_is_finite() {
        let grid = Arc::new(MaskGrid::parse_dump("MASK 2 2 0.75 0\n00\n01\n").unwrap());
        let mask = MaskBatch::at(&[grid], 2, 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rnd(&[1, 3, 2, 2], 10));
        let gam = g.constant(Tensor::ones(&[3]));
        let bet = g.constant(Tensor::ones(&[3]));
        let sa = SparseActivation::new(&mut g, x, mask).unwrap();
        let y = sparse_grn(&mut g, &sa, gam, bet).unwrap();
        let v = g.value(y.dense);
        assert!(v.all_finite());
        assert_eq!(v.data().iter().filter(|x| **x != 0.0).count(), 3);
    }

    #[test]
    fn downsample_matches_coarser_view() {
        let grid = Arc::new(MaskGrid::sample(7, 7, 0.75, 11).unwrap());
        let mask = MaskBatch::at(std::slice::from_ref(&grid), 56, 56).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rnd(&[1, 1, 56, 56], 12));
        let w = g.constant(rnd(&[2, 1, 2, 2], 13));
        let sa = SparseActivation::new(&mut g, x, mask).unwrap();
        let y = downsample_conv(&mut g, &sa, w, None, 2).unwrap();
        assert_eq!(y.mask.views()[0], grid.view_at(28, 28).unwrap());
        assert_eq!(g.value(y.dense).shape(), &[1, 2, 28, 28]);
    }

    #[test]
    fn downsample_rejects_overlap_and_bad_blocks() {
        let mask = checker_mask(1, 4, 4);
        let mut g = Graph::new();
        let x = g.constant(rnd(&[1, 1, 4, 4], 14));
        let sa = SparseActivation::new(&mut g, x, mask.clone()).unwrap();
        let w3 = g.constant(rnd(&[1, 1, 3, 3], 15));
        assert!(downsample_conv(&mut g, &sa, w3, None, 2).is_err());
        let w4 = g.constant(rnd(&[1, 1, 4, 4], 16));
        assert!(downsample_conv(&mut g, &sa, w4, None, 4).is_err());
    }

    #[test]
    fn stride_incompatible_with_mask_is_an_error() {
        let mask = checker_mask(1, 4, 4);
        let mut g = Graph::new();
        let x = g.constant(rnd(&[1, 1, 4, 4], 17));
        let w = g.constant(rnd(&[1, 1, 2, 2], 18));
        let sa = SparseActivation::new(&mut g, x, mask).unwrap();
        // 4x4 -> 3x3 cannot carry a block-constant mask
        assert!(sparse_conv2d(&mut g, &sa, w, None, 1, 0, 1).is_err());
    }
}
