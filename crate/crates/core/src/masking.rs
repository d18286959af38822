//! Random patch masks at the coarsest feature grid and their per-stage views.
//!
//! A [`MaskGrid`] is sampled once per frame pair. Every finer resolution is
//! derived from it by nearest-neighbour upsampling, so all encoder stages see
//! the same masked regions by construction.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of masked cells for `ratio` over `cells` cells.
///
/// Rounds down; the small slack absorbs products such as `0.29 * 100` that
/// land a hair under an integer in binary floating point.
pub fn masked_count(ratio: f64, cells: usize) -> usize {
    (ratio * cells as f64 + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Mask(format!(
            "masking ratio must lie in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    grid_h: usize,
    grid_w: usize,
    visible: Vec<bool>,
    ratio: f64,
    seed: u64,
}

impl MaskGrid {
    /// Masks exactly `masked_count(ratio, h·w)` cells chosen uniformly at random.
    ///
    /// The cells are the head of a seeded Fisher-Yates shuffle of all cell indices.
    pub fn sample(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<Self> {
        check_ratio(ratio)?;
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Mask(format!(
                "grid dimensions must be >= 1, got {grid_h}x{grid_w}"
            )));
        }
        let cells = grid_h * grid_w;
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut visible = vec![true; cells];
        for &i in &order[..masked_count(ratio, cells)] {
            visible[i] = false;
        }
        Ok(Self {
            grid_h,
            grid_w,
            visible,
            ratio,
            seed,
        })
    }

    pub fn all_visible(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            visible: vec![true; grid_h * grid_w],
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.visible.len()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major visibility, one entry per cell.
    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.visible[y * self.grid_w + x]
    }

    pub fn num_masked(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }

    /// Block-constant view at `stage_h × stage_w`.
    pub fn view_at(&self, stage_h: usize, stage_w: usize) -> Result<MaskView> {
        if stage_h == 0
            || stage_w == 0
            || !stage_h.is_multiple_of(self.grid_h)
            || !stage_w.is_multiple_of(self.grid_w)
        {
            return Err(Error::Mask(format!(
                "view {stage_h}x{stage_w} is not an integer multiple of grid {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        let (fy, fx) = (stage_h / self.grid_h, stage_w / self.grid_w);
        let mut visible = Vec::with_capacity(stage_h * stage_w);
        for y in 0..stage_h {
            for x in 0..stage_w {
                visible.push(self.is_visible(y / fy, x / fx));
            }
        }
        Ok(MaskView {
            stage_h,
            stage_w,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            visible,
        })
    }

    /// Debug dump: a `MASK <h> <w> <ratio> <seed>` header followed by one line
    /// per grid row, `1` for visible and `0` for masked cells.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "MASK {} {} {} {}\n",
            self.grid_h, self.grid_w, self.ratio, self.seed
        );
        for row in self.visible.chunks(self.grid_w) {
            for &v in row {
                s.push(if v { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Mask(format!("malformed mask dump: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "MASK" {
            return Err(bad("header must be `MASK <h> <w> <ratio> <seed>`"));
        }
        let grid_h: usize = fields[1].parse().map_err(|_| bad("height"))?;
        let grid_w: usize = fields[2].parse().map_err(|_| bad("width"))?;
        let ratio: f64 = fields[3].parse().map_err(|_| bad("ratio"))?;
        let seed: u64 = fields[4].parse().map_err(|_| bad("seed"))?;
        let mut visible = Vec::with_capacity(grid_h * grid_w);
        for _ in 0..grid_h {
            let row = lines.next().ok_or_else(|| bad("missing row"))?;
            if row.len() != grid_w {
                return Err(bad("row length"));
            }
            for ch in row.chars() {
                visible.push(match ch {
                    '1' => true,
                    '0' => false,
                    _ => return Err(bad("cells must be 0 or 1")),
                });
            }
        }
        Ok(Self {
            grid_h,
            grid_w,
            visible,
            ratio,
            seed,
        })
    }
}

impl AsRef<MaskGrid> for MaskGrid {
    fn as_ref(&self) -> &MaskGrid {
        self
    }
}

/// Draws a mask whose shuffle seed comes from `rng`.
pub fn sample_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskGrid> {
    check_ratio(ratio)?;
    MaskGrid::sample(grid_h, grid_w, ratio, rng.random())
}

/// Two independent masks with the same ratio (ablation of symmetric masking).
pub fn asymmetric_pair<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<(MaskGrid, MaskGrid)> {
    let a = sample_mask(grid_h, grid_w, ratio, rng)?;
    let b = sample_mask(grid_h, grid_w, ratio, rng)?;
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskView {
    stage_h: usize,
    stage_w: usize,
    grid_h: usize,
    grid_w: usize,
    visible: Vec<bool>,
}

impl MaskView {
    pub fn stage_h(&self) -> usize {
        self.stage_h
    }

    pub fn stage_w(&self) -> usize {
        self.stage_w
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.visible[y * self.stage_w + x]
    }

    /// Side of the constant block each grid cell occupies in this view.
    pub fn block(&self) -> (usize, usize) {
        (self.stage_h / self.grid_h, self.stage_w / self.grid_w)
    }

    /// Reduces by `factor`, keeping a site visible only if its whole
    /// `factor × factor` block is visible.
    pub fn downsample_and(&self, factor: usize) -> Result<MaskView> {
        if factor == 0 || !self.stage_h.is_multiple_of(factor) || !self.stage_w.is_multiple_of(factor) {
            return Err(Error::Mask(format!(
                "cannot downsample {}x{} view by {factor}",
                self.stage_h, self.stage_w
            )));
        }
        let (h, w) = (self.stage_h / factor, self.stage_w / factor);
        if h % self.grid_h != 0 || w % self.grid_w != 0 {
            return Err(Error::Mask(format!(
                "downsampled view {h}x{w} would be coarser than the {}x{} mask grid",
                self.grid_h, self.grid_w
            )));
        }
        let mut visible = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let all = (0..factor)
                    .all(|i| (0..factor).all(|j| self.is_visible(y * factor + i, x * factor + j)));
                visible.push(all);
            }
        }
        Ok(MaskView {
            stage_h: h,
            stage_w: w,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            visible,
        })
    }
}

/// One view per sample of a batch, all at the same resolution, plus the
/// flattened `[N,H,W]` keep-mask consumed by graph ops.
#[derive(Clone, Debug)]
pub struct MaskBatch {
    views: Vec<MaskView>,
    keep: Arc<[bool]>,
}

impl MaskBatch {
    pub fn from_views(views: Vec<MaskView>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Mask("empty mask batch".into()))?;
        let dims = (first.stage_h, first.stage_w);
        if views.iter().any(|v| (v.stage_h, v.stage_w) != dims) {
            return Err(Error::Mask("mask views in a batch differ in size".into()));
        }
        let keep: Vec<bool> = views.iter().flat_map(|v| v.visible.iter().copied()).collect();
        Ok(Self {
            views,
            keep: keep.into(),
        })
    }

    pub fn at<G: AsRef<MaskGrid>>(grids: &[G], h: usize, w: usize) -> Result<Self> {
        let views = grids
            .iter()
            .map(|g| g.as_ref().view_at(h, w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_views(views)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn h(&self) -> usize {
        self.views[0].stage_h
    }

    pub fn w(&self) -> usize {
        self.views[0].stage_w
    }

    pub fn views(&self) -> &[MaskView] {
        &self.views
    }

    pub fn keep(&self) -> Arc<[bool]> {
        self.keep.clone()
    }

    pub fn all_visible(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn downsample_and(&self, factor: usize) -> Result<Self> {
        let views = self
            .views
            .iter()
            .map(|v| v.downsample_and(factor))
            .collect::<Result<Vec<_>>>()?;
        Self::from_views(views)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_counts() {
        let m = MaskGrid::sample(7, 7, 0.75, 1).unwrap();
        assert_eq!(m.num_masked(), 36);
        assert_eq!(m.cells() - m.num_masked(), 13);
        assert_eq!(MaskGrid::sample(4, 4, 0.75, 9).unwrap().num_masked(), 12);
        assert_eq!(MaskGrid::sample(7, 7, 0.0, 9).unwrap().num_masked(), 0);
    }

    #[test]
    fn counting_oracle_matches_floor() {
        for cells in 1..=64usize {
            for r in [0.0, 0.1, 0.25, 0.29, 0.5, 0.6, 0.65, 0.75, 0.85, 0.95, 0.99] {
                let brute = (0..=cells).filter(|k| (*k as f64) <= r * cells as f64 + 1e-9).count() - 1;
                assert_eq!(masked_count(r, cells), brute, "cells {cells} ratio {r}");
            }
        }
        assert_eq!(masked_count(0.29, 100), 29);
    }

    #[test]
    fn ratio_bounds() {
        assert!(MaskGrid::sample(4, 4, 1.0, 0).is_err());
        assert!(MaskGrid::sample(4, 4, -0.1, 0).is_err());
        assert!(MaskGrid::sample(0, 4, 0.5, 0).is_err());
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(
            MaskGrid::sample(7, 7, 0.75, 42).unwrap(),
            MaskGrid::sample(7, 7, 0.75, 42).unwrap()
        );
    }

    #[test]
    fn view_blocks_are_constant() {
        let m = MaskGrid::sample(7, 7, 0.75, 3).unwrap();
        let v = m.view_at(56, 56).unwrap();
        assert_eq!(v.block(), (8, 8));
        for y in 0..56 {
            for x in 0..56 {
                assert_eq!(v.is_visible(y, x), m.is_visible(y / 8, x / 8));
            }
        }
    }

    #[test]
    fn identity_view_and_round_trip() {
        let m = MaskGrid::sample(7, 7, 0.75, 4).unwrap();
        assert_eq!(m.view_at(7, 7).unwrap().visible(), m.visible());
        let down = m.view_at(14, 14).unwrap().downsample_and(2).unwrap();
        assert_eq!(down.visible(), m.visible());
        assert_eq!(
            m.view_at(56, 56).unwrap().downsample_and(2).unwrap(),
            m.view_at(28, 28).unwrap()
        );
    }

    #[test]
    fn non_integer_view_is_rejected() {
        let m = MaskGrid::sample(7, 7, 0.5, 4).unwrap();
        assert!(m.view_at(20, 20).is_err());
        assert!(m.view_at(7, 7).unwrap().downsample_and(2).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let m = MaskGrid::sample(3, 5, 0.6, 77).unwrap();
        let text = m.dump();
        assert!(text.starts_with("MASK 3 5 0.6 77\n"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(MaskGrid::parse_dump(&text).unwrap(), m);
        assert!(MaskGrid::parse_dump("MASK 2 2 0.5 1\n01\n2a\n").is_err());
    }

    #[test]
    fn asymmetric_draws_share_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = asymmetric_pair(7, 7, 0.75, &mut rng).unwrap();
        assert_eq!(a.num_masked(), b.num_masked());
        assert_ne!(a.visible(), b.visible());
        let (a, b) = asymmetric_pair(7, 7, 0.0, &mut rng).unwrap();
        assert_eq!(a.visible(), b.visible());
    }

    #[test]
    fn batch_keep_layout() {
        let a = Arc::new(MaskGrid::sample(2, 2, 0.5, 1).unwrap());
        let b = Arc::new(MaskGrid::sample(2, 2, 0.5, 2).unwrap());
        let batch = MaskBatch::at(&[a.clone(), b.clone()], 4, 4).unwrap();
        assert_eq!(batch.keep().len(), 32);
        assert_eq!(&batch.keep()[..16], a.view_at(4, 4).unwrap().visible());
        assert_eq!(&batch.keep()[16..], b.view_at(4, 4).unwrap().visible());
    }
}
