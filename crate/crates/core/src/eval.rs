//! Label propagation through a video with frozen encoder features.
//!
//! Frame-0 labels are pooled to feature resolution as soft distributions.
//! Every later frame takes, for each site, the `k` most similar sites in the
//! context window (frame 0 plus the previous `context_frames` predictions),
//! weights them by a softmax over similarity, and averages their label
//! distributions. Predictions are upsampled nearest-neighbour and scored by
//! IoU against ground truth.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataio::LabelMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationConfig {
    pub k: usize,
    pub temperature: f64,
    pub context_frames: usize,
    /// Zero-based encoder stage whose output is used.
    pub feature_stage: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k: 7,
            temperature: 0.07,
            context_frames: 3,
            feature_stage: 0,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.temperature > 0.0) {
            return Err(Error::Config("propagation needs k >= 1 and temperature > 0".into()));
        }
        Ok(())
    }
}

/// Per-site feature vectors in `[C, h, w]` layout with unit L2 norm.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    /// Normalizes every site of a `[C,h,w]` tensor. Zero vectors stay zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape()[..] else {
            return Err(Error::shape("features", format!("expected [C,h,w], got {:?}", t.shape())));
        };
        let mut data = t.data().to_vec();
        let p = h * w;
        for s in 0..p {
            let norm = (0..c).map(|ci| data[ci * p + s].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                (0..c).for_each(|ci| data[ci * p + s] /= norm);
            }
        }
        Ok(Self { channels: c, h, w, data })
    }

    pub fn sites(&self) -> usize {
        self.h * self.w
    }

    fn dot(&self, i: usize, other: &FeatureMap, j: usize) -> f64 {
        let (p, q) = (self.sites(), other.sites());
        (0..self.channels).map(|c| self.data[c * p + i] * other.data[c * q + j]).sum()
    }
}

/// Dense-export features of one `[3,H,W]` frame at `stage`.
pub fn extract_features(model: &Model, params: &ParamStore, frame: &Tensor, stage: usize) -> Result<FeatureMap> {
    let mut fs = extract_batch(model, params, std::slice::from_ref(frame), stage)?;
    Ok(fs.pop().expect("one frame"))
}

/// Features for several frames in one forward pass.
pub fn extract_batch(model: &Model, params: &ParamStore, frames: &[Tensor], stage: usize) -> Result<Vec<FeatureMap>> {
    if stage >= model.encoder.num_stages() {
        return Err(Error::Config(format!(
            "feature stage {stage} but the encoder has {} stages",
            model.encoder.num_stages()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::stack(frames)?);
    let outs = model.encode_dense(&mut g, &p, x)?;
    let t = g.value(outs[stage]);
    (0..frames.len()).map(|i| FeatureMap::from_tensor(&t.index0(i))).collect()
}

/// Soft label distributions `[sites][labels]` at feature resolution.
type Soft = Vec<Vec<f64>>;

/// Fraction of each label inside every feature cell. The label map must be
/// an integer multiple of the feature grid.
pub fn pool_labels(labels: &LabelMap, h: usize, w: usize, num_labels: usize) -> Result<Soft> {
    if !labels.height.is_multiple_of(h) || !labels.width.is_multiple_of(w) {
        return Err(Error::shape(
            "pool_labels",
            format!("{}x{} labels on a {h}x{w} grid", labels.height, labels.width),
        ));
    }
    let (by, bx) = (labels.height / h, labels.width / w);
    let mut out = vec![vec![0.0; num_labels]; h * w];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(y, x) as usize;
            if l >= num_labels {
                return Err(Error::Data(format!("label {l} exceeds {num_labels} classes")));
            }
            out[(y / by) * w + x / bx][l] += 1.0;
        }
    }
    let area = (by * bx) as f64;
    out.iter_mut().flatten().for_each(|v| *v /= area);
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

/// One propagation hop: soft labels for `target` from the context frames.
pub fn propagate_step(target: &FeatureMap, context: &[(&FeatureMap, &Soft)], cfg: &PropagationConfig) -> Soft {
    let num_labels = context[0].1[0].len();
    let mut out = Vec::with_capacity(target.sites());
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..target.sites() {
        cand.clear();
        for (ci, (f, _)) in context.iter().enumerate() {
            for j in 0..f.sites() {
                cand.push((target.dot(i, f, j), ci, j));
            }
        }
        // stable order: similarity descending, then context order
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let top = &cand[..cfg.k.min(cand.len())];
        let max = top[0].0;
        let weights: Vec<f64> = top.iter().map(|c| ((c.0 - max) / cfg.temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut dist = vec![0.0; num_labels];
        for (wgt, &(_, ci, j)) in weights.iter().zip(top) {
            for (d, l) in dist.iter_mut().zip(&context[ci].1[j]) {
                *d += wgt / z * l;
            }
        }
        out.push(dist);
    }
    out
}

/// Predicted label maps at frame resolution for frames `1..features.len()`.
pub fn propagate_labels(features: &[FeatureMap], first: &LabelMap, cfg: &PropagationConfig) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    if features.len() < 2 {
        return Err(Error::Data("propagation needs at least two frames".into()));
    }
    let (h, w) = (features[0].h, features[0].w);
    if features.iter().any(|f| (f.h, f.w) != (h, w)) {
        return Err(Error::shape("propagate_labels", "feature maps differ in size"));
    }
    let num_labels = first.max_label() as usize + 1;
    let mut soft: Vec<Soft> = vec![pool_labels(first, h, w, num_labels)?];
    let mut preds = Vec::with_capacity(features.len() - 1);
    for t in 1..features.len() {
        let mut ctx: Vec<(&FeatureMap, &Soft)> = vec![(&features[0], &soft[0])];
        for s in t.saturating_sub(cfg.context_frames).max(1)..t {
            ctx.push((&features[s], &soft[s]));
        }
        let next = propagate_step(&features[t], &ctx, cfg);
        preds.push(upsample(&next, h, w, first.height, first.width));
        soft.push(next);
    }
    Ok(preds)
}

fn upsample(soft: &Soft, h: usize, w: usize, out_h: usize, out_w: usize) -> LabelMap {
    let mut m = LabelMap::new(out_w, out_h);
    let (by, bx) = (out_h / h, out_w / w);
    for y in 0..out_h {
        for x in 0..out_w {
            m.data[y * out_w + x] = argmax(&soft[(y / by) * w + x / bx]) as u8;
        }
    }
    m
}

/// Intersection and union pixel counts per label id.
fn overlaps(pred: &LabelMap, truth: &LabelMap, labels: usize) -> Result<Vec<(usize, usize)>> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::shape("score_iou", "prediction and truth differ in size"));
    }
    let mut acc = vec![(0, 0); labels];
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        for l in 1..labels {
            let (a, b) = (p as usize == l, t as usize == l);
            if a && b {
                acc[l].0 += 1;
            }
            if a || b {
                acc[l].1 += 1;
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouScore {
    /// `(label, IoU)` for every nonzero label in the truth.
    pub per_label: Vec<(u8, f64)>,
    pub mean: f64,
}

/// IoU of each nonzero truth label and their mean.
pub fn score_iou(pred: &LabelMap, truth: &LabelMap) -> Result<IouScore> {
    let labels = truth.max_label().max(pred.max_label()) as usize + 1;
    let acc = overlaps(pred, truth, labels)?;
    let present: Vec<u8> = (1..labels as u8)
        .filter(|&l| truth.data.contains(&l))
        .collect();
    if present.is_empty() {
        return Err(Error::Data("truth has no foreground labels".into()));
    }
    let per_label: Vec<(u8, f64)> = present
        .iter()
        .map(|&l| (l, acc[l as usize].0 as f64 / acc[l as usize].1 as f64))
        .collect();
    let mean = per_label.iter().map(|p| p.1).sum::<f64>() / per_label.len() as f64;
    Ok(IouScore { per_label, mean })
}

/// Sequence score: for every label of the first frame, the mean IoU over
/// frames `1..` in which it appears in truth or prediction.
pub fn score_sequence(preds: &[LabelMap], truths: &[LabelMap]) -> Result<IouScore> {
    if preds.len() + 1 != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            truths.len()
        )));
    }
    let labels: Vec<u8> = (1..=truths[0].max_label())
        .filter(|l| truths[0].data.contains(l))
        .collect();
    if labels.is_empty() {
        return Err(Error::Data("first frame has no foreground labels".into()));
    }
    let n = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut sums = vec![(0.0, 0usize); n];
    for (p, t) in preds.iter().zip(&truths[1..]) {
        let width = n.max(p.max_label() as usize + 1).max(t.max_label() as usize + 1);
        let acc = overlaps(p, t, width)?;
        for &l in &labels {
            let (i, u) = acc[l as usize];
            if u > 0 {
                sums[l as usize].0 += i as f64 / u as f64;
                sums[l as usize].1 += 1;
            }
        }
    }
    let per_label: Vec<(u8, f64)> = labels
        .iter()
        .map(|&l| {
            let (s, c) = sums[l as usize];
            (l, if c == 0 { 1.0 } else { s / c as f64 })
        })
        .collect();
    let mean = per_label.iter().map(|p| p.1).sum::<f64>() / per_label.len() as f64;
    Ok(IouScore { per_label, mean })
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceResult {
    pub name: String,
    pub per_label_iou: BTreeMap<u8, f64>,
    pub mean_iou: f64,
}

/// Evaluates every sequence and returns per-sequence results plus the
/// dataset mean of sequence mean IoUs.
pub fn evaluate<'a>(
    model: &Model,
    params: &ParamStore,
    sequences: impl IntoIterator<Item = (&'a str, &'a [Tensor], &'a [LabelMap])>,
    cfg: &PropagationConfig,
) -> Result<(Vec<SequenceResult>, f64)> {
    let mut out = Vec::new();
    for (name, frames, labels) in sequences {
        let feats = extract_batch(model, params, frames, cfg.feature_stage)?;
        let preds = propagate_labels(&feats, &labels[0], cfg)?;
        let s = score_sequence(&preds, labels)?;
        out.push(SequenceResult {
            name: name.to_string(),
            per_label_iou: s.per_label.into_iter().collect(),
            mean_iou: s.mean,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    let mean = out.iter().map(|r| r.mean_iou).sum::<f64>() / out.len() as f64;
    Ok((out, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, data: &[u8]) -> LabelMap {
        LabelMap {
            width: w,
            height: h,
            data: data.to_vec(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = map(4, 1, &[1, 1, 0, 0]);
        assert_eq!(score_iou(&a, &a).unwrap().mean, 1.0);
        let b = map(4, 1, &[0, 0, 1, 1]);
        assert_eq!(score_iou(&b, &a).unwrap().mean, 0.0);
        let half = map(4, 1, &[0, 1, 1, 0]);
        assert_eq!(score_iou(&half, &a).unwrap().mean, 1.0 / 3.0);
        assert!(score_iou(&a, &map(4, 1, &[0; 4])).is_err());
    }

    #[test]
    fn single_site_copies_first_label() {
        let f = FeatureMap::from_tensor(&Tensor::new(&[2, 1, 1], vec![0.3, 0.4]).unwrap()).unwrap();
        let first = map(2, 2, &[2, 2, 2, 0]);
        let preds = propagate_labels(&[f.clone(), f.clone(), f], &first, &PropagationConfig::default()).unwrap();
        for p in preds {
            assert_eq!(p.data, vec![2; 4]);
        }
    }

    #[test]
    fn features_are_unit_norm_and_scale_free() {
        let t = Tensor::from_fn(&[5, 3, 3], |i| (i as f64 * 0.7).sin() + 0.1);
        let f = FeatureMap::from_tensor(&t).unwrap();
        for s in 0..9 {
            let n: f64 = (0..5).map(|c| f.data[c * 9 + s].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let g = FeatureMap::from_tensor(&t.map(|v| v * 37.5)).unwrap();
        for (a, b) in f.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
