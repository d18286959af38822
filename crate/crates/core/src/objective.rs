//! Reconstruction losses for a frame pair.
//!
//! `L_o` is the online branch's masked-patch error on frame 1 and `L_t` the
//! target branch's on frame 2. `L_c` compares the two reconstructions on the
//! masked patches, treating the target output as a constant. The target
//! branch carries no gradients at all, so `L_t` is monitored but never
//! back-propagated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskGrid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_online: f64,
    pub l_target: f64,
    pub l_consistency: f64,
    pub l_total: f64,
    pub gamma: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_online, self.l_target, self.l_consistency, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_total = L_o + L_t + γ·L_c`.
pub fn total_loss(l_online: f64, l_target: f64, l_consistency: f64, gamma: f64) -> LossReport {
    LossReport {
        l_online,
        l_target,
        l_consistency,
        l_total: l_online + l_target + gamma * l_consistency,
        gamma,
    }
}

/// Flattened `[N·G]` flags marking the masked patches of each sample.
pub fn masked_patches<G: AsRef<MaskGrid>>(masks: &[G]) -> Arc<[bool]> {
    masks
        .iter()
        .flat_map(|m| m.as_ref().visible().iter().map(|v| !v))
        .collect()
}

/// Masked patches shared by both frames. In symmetric mode the two masks
/// must be identical.
pub fn shared_masked<G: AsRef<MaskGrid>>(m1: &[G], m2: &[G], symmetric: bool) -> Result<Arc<[bool]>> {
    if m1.len() != m2.len() {
        return Err(Error::Mask(format!("{} vs {} masks", m1.len(), m2.len())));
    }
    let a = masked_patches(m1);
    let b = masked_patches(m2);
    if a.len() != b.len() {
        return Err(Error::Mask("mask grids differ in size".into()));
    }
    if symmetric {
        if a != b {
            return Err(Error::Mask("symmetric consistency loss given differing masks".into()));
        }
        return Ok(a);
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| *x && *y).collect())
}

/// Masked-patch MSE of the online reconstruction against its targets.
pub fn online_loss(g: &mut Graph, targets: Var, output: Var, masked: Arc<[bool]>) -> Result<Var> {
    g.masked_patch_mse(output, targets, masked)
}

/// Masked-patch MSE of the target reconstruction, with nothing recorded for
/// differentiation.
pub fn target_loss(targets: &Tensor, output: &Tensor, masked: Arc<[bool]>) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(targets.clone());
    let o = g.constant(output.clone());
    let l = g.masked_patch_mse(o, t, masked)?;
    Ok(g.value(l).item())
}

/// Masked-patch MSE between the online output and the (constant) target output.
pub fn consistency_loss(g: &mut Graph, online: Var, target: &Tensor, masked: Arc<[bool]>) -> Result<Var> {
    let t = g.constant(target.clone());
    g.masked_patch_mse(online, t, masked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_weighted_sum() {
        let r = total_loss(0.5, 0.4, 0.1, 1.0);
        assert_eq!(r.l_total, 0.5 + 0.4 + 0.1);
        assert!((r.l_total - 1.0).abs() < 1e-15);
        let r = total_loss(0.3, 0.7, 123.0, 0.0);
        assert_eq!(r.l_total, 0.3 + 0.7);
    }

    #[test]
    fn identical_outputs_have_zero_consistency() {
        let o = Tensor::from_fn(&[1, 4, 6], |i| (i as f64).sin());
        let m = Arc::new(MaskGrid::sample(2, 2, 0.5, 3).unwrap());
        let masked = masked_patches(&[m]);
        let mut g = Graph::new();
        let v = g.param(o.clone());
        let l = consistency_loss(&mut g, v, &o, masked.clone()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(target_loss(&o, &o, masked).unwrap(), 0.0);
    }

    #[test]
    fn constant_error_of_two_gives_four() {
        let m = MaskGrid::parse_dump("MASK 1 2 0.5 0\n10\n").unwrap();
        let masked = masked_patches(&[m]);
        let target = Tensor::zeros(&[1, 2, 3]);
        let out = Tensor::new(&[1, 2, 3], vec![9.0, 9.0, 9.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(target_loss(&target, &out, masked).unwrap(), 4.0);
    }

    #[test]
    fn symmetric_mode_rejects_different_masks() {
        let a = [MaskGrid::sample(4, 4, 0.75, 1).unwrap()];
        let b = [MaskGrid::sample(4, 4, 0.75, 2).unwrap()];
        assert!(shared_masked(&a, &b, true).is_err());
        let inter = shared_masked(&a, &b, false).unwrap();
        for (i, &m) in inter.iter().enumerate() {
            assert_eq!(m, !a[0].visible()[i] && !b[0].visible()[i]);
        }
        assert_eq!(shared_masked(&a, &a, true).unwrap(), masked_patches(&a));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = [MaskGrid::all_visible(2, 2)];
        let t = Tensor::zeros(&[1, 4, 3]);
        assert!(target_loss(&t, &t, masked_patches(&m)).is_err());
    }
}
