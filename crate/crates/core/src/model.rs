//! Hierarchical sparse convolutional encoder and single-block dense decoder.
//!
//! The encoder runs a patchifying stem followed by stages of residual blocks,
//! halving resolution between stages. With a mask every layer is evaluated in
//! sparse form; without one the same weights run as ordinary dense layers,
//! which is how features are exported for downstream use. The decoder fills
//! masked grid cells with a learned token and predicts the pixels of every
//! patch.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{MaskBatch, MaskGrid};
use crate::params::{Bound, ParamStore};
use crate::sparse::{self, SparseActivation};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
const DW_KERNEL: usize = 7;
const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    ConvNextV2,
    ConvNextV1,
    BasicResidual,
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnext_v2" => Ok(Self::ConvNextV2),
            "convnext_v1" => Ok(Self::ConvNextV1),
            "basic_residual" => Ok(Self::BasicResidual),
            other => Err(Error::Config(format!("unknown block_kind `{other}`"))),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConvNextV2 => "convnext_v2",
            Self::ConvNextV1 => "convnext_v1",
            Self::BasicResidual => "basic_residual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stem_factor: usize,
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub block_kind: BlockKind,
    pub downsample_factor_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_factor: 4,
            stage_depths: vec![2, 2],
            stage_widths: vec![32, 64],
            block_kind: BlockKind::ConvNextV2,
            downsample_factor_per_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Input pixels per final-stage site along each axis.
    pub fn total_downsample(&self) -> usize {
        self.stem_factor
            * self
                .downsample_factor_per_stage
                .pow(self.num_stages().saturating_sub(1) as u32)
    }

    /// Downsampling from the input to the output of `stage`.
    pub fn stage_downsample(&self, stage: usize) -> usize {
        self.stem_factor * self.downsample_factor_per_stage.pow(stage as u32)
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_widths.len() {
            return Err(Error::Config(
                "stage_depths and stage_widths must be non-empty and of equal length".into(),
            ));
        }
        if self.stem_factor == 0 || self.downsample_factor_per_stage == 0 {
            return Err(Error::Config("downsampling factors must be >= 1".into()));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub patch_size: usize,
    pub out_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            width: 512,
            patch_size: 8,
            out_channels: 3,
        }
    }
}

impl DecoderConfig {
    /// Predicted values per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.out_channels
    }
}

/// Activation that is sparse when a mask is attached and dense otherwise.
#[derive(Clone, Debug)]
pub struct Act {
    pub x: Var,
    pub mask: Option<MaskBatch>,
}

impl Act {
    fn sparse(&self) -> Option<SparseActivation> {
        self.mask.as_ref().map(|m| SparseActivation {
            dense: self.x,
            mask: m.clone(),
        })
    }

    fn from_sparse(s: SparseActivation) -> Self {
        Act {
            x: s.dense,
            mask: Some(s.mask),
        }
    }
}

fn conv(g: &mut Graph, a: &Act, w: Var, b: Var, stride: usize, pad: usize, groups: usize) -> Result<Act> {
    match a.sparse() {
        Some(s) => sparse::sparse_conv2d(g, &s, w, Some(b), stride, pad, groups).map(Act::from_sparse),
        None => Ok(Act {
            x: g.conv2d(a.x, w, Some(b), stride, pad, groups)?,
            mask: None,
        }),
    }
}

fn downsample(g: &mut Graph, a: &Act, w: Var, b: Var, factor: usize) -> Result<Act> {
    match a.sparse() {
        Some(s) => sparse::downsample_conv(g, &s, w, Some(b), factor).map(Act::from_sparse),
        None => Ok(Act {
            x: g.conv2d(a.x, w, Some(b), factor, 0, 1)?,
            mask: None,
        }),
    }
}

fn norm(g: &mut Graph, a: &Act, gamma: Var, beta: Var) -> Result<Act> {
    match a.sparse() {
        Some(s) => sparse::sparse_layer_norm(g, &s, gamma, beta, NORM_EPS).map(Act::from_sparse),
        None => Ok(Act {
            x: g.layer_norm_channels(a.x, gamma, beta, NORM_EPS)?,
            mask: None,
        }),
    }
}

fn grn(g: &mut Graph, a: &Act, gamma: Var, beta: Var) -> Result<Act> {
    match a.sparse() {
        Some(s) => sparse::sparse_grn(g, &s, gamma, beta).map(Act::from_sparse),
        None => Ok(Act {
            x: g.grn(a.x, gamma, beta, None)?,
            mask: None,
        }),
    }
}

fn gelu(g: &mut Graph, a: &Act) -> Result<Act> {
    match a.sparse() {
        Some(s) => sparse::sparse_gelu(g, &s).map(Act::from_sparse),
        None => Ok(Act {
            x: g.gelu(a.x),
            mask: None,
        }),
    }
}

fn residual(g: &mut Graph, a: &Act, b: &Act) -> Result<Act> {
    match (a.sparse(), b.sparse()) {
        (Some(sa), Some(sb)) => sparse::sparse_add(g, &sa, &sb).map(Act::from_sparse),
        _ => Ok(Act {
            x: g.add(a.x, b.x)?,
            mask: None,
        }),
    }
}

fn init_block<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, kind: BlockKind, c: usize, rng: &mut R) {
    let tn = |shape: &[usize], rng: &mut R| Tensor::trunc_normal(shape, INIT_STD, rng);
    match kind {
        BlockKind::ConvNextV2 | BlockKind::ConvNextV1 => {
            let e = EXPANSION * c;
            p.insert(format!("{prefix}.dw.w"), tn(&[c, 1, DW_KERNEL, DW_KERNEL], rng));
            p.insert(format!("{prefix}.dw.b"), Tensor::zeros(&[c]));
            p.insert(format!("{prefix}.norm.gamma"), Tensor::ones(&[c]));
            p.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[c]));
            p.insert(format!("{prefix}.pw1.w"), tn(&[e, c, 1, 1], rng));
            p.insert(format!("{prefix}.pw1.b"), Tensor::zeros(&[e]));
            if kind == BlockKind::ConvNextV2 {
                p.insert(format!("{prefix}.grn.gamma"), Tensor::zeros(&[e]));
                p.insert(format!("{prefix}.grn.beta"), Tensor::zeros(&[e]));
            }
            p.insert(format!("{prefix}.pw2.w"), tn(&[c, e, 1, 1], rng));
            p.insert(format!("{prefix}.pw2.b"), Tensor::zeros(&[c]));
        }
        BlockKind::BasicResidual => {
            p.insert(format!("{prefix}.conv1.w"), tn(&[c, c, 3, 3], rng));
            p.insert(format!("{prefix}.conv1.b"), Tensor::zeros(&[c]));
            p.insert(format!("{prefix}.norm.gamma"), Tensor::ones(&[c]));
            p.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[c]));
            p.insert(format!("{prefix}.conv2.w"), tn(&[c, c, 3, 3], rng));
            p.insert(format!("{prefix}.conv2.b"), Tensor::zeros(&[c]));
        }
    }
}

fn block(g: &mut Graph, p: &Bound, prefix: &str, kind: BlockKind, x: &Act) -> Result<Act> {
    let v = |name: &str| p.get(&format!("{prefix}.{name}"));
    let y = match kind {
        BlockKind::ConvNextV2 | BlockKind::ConvNextV1 => {
            let c = g.value(x.x).shape()[1];
            let y = conv(g, x, v("dw.w")?, v("dw.b")?, 1, DW_KERNEL / 2, c)?;
            let y = norm(g, &y, v("norm.gamma")?, v("norm.beta")?)?;
            let y = conv(g, &y, v("pw1.w")?, v("pw1.b")?, 1, 0, 1)?;
            let mut y = gelu(g, &y)?;
            if kind == BlockKind::ConvNextV2 {
                y = grn(g, &y, v("grn.gamma")?, v("grn.beta")?)?;
            }
            conv(g, &y, v("pw2.w")?, v("pw2.b")?, 1, 0, 1)?
        }
        BlockKind::BasicResidual => {
            let y = conv(g, x, v("conv1.w")?, v("conv1.b")?, 1, 1, 1)?;
            let y = norm(g, &y, v("norm.gamma")?, v("norm.beta")?)?;
            let y = gelu(g, &y)?;
            conv(g, &y, v("conv2.w")?, v("conv2.b")?, 1, 1, 1)?
        }
    };
    residual(g, x, &y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Model {
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig) -> Result<Self> {
        encoder.validate()?;
        if decoder.depth == 0 || decoder.width == 0 || decoder.out_channels == 0 {
            return Err(Error::Config("decoder depth, width and out_channels must be >= 1".into()));
        }
        if decoder.patch_size != encoder.total_downsample() {
            return Err(Error::Config(format!(
                "patch_size {} must equal the encoder's total downsampling {}",
                decoder.patch_size,
                encoder.total_downsample()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn patch_size(&self) -> usize {
        self.decoder.patch_size
    }

    /// Mask grid for an `h × w` input.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size();
        if h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total downsampling {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let enc = &self.encoder;
        let s = enc.stem_factor;
        let w0 = enc.stage_widths[0];
        p.insert("enc.stem.w", Tensor::trunc_normal(&[w0, 3, s, s], INIT_STD, rng));
        p.insert("enc.stem.b", Tensor::zeros(&[w0]));
        p.insert("enc.stem.norm.gamma", Tensor::ones(&[w0]));
        p.insert("enc.stem.norm.beta", Tensor::zeros(&[w0]));
        for (i, (&depth, &width)) in enc.stage_depths.iter().zip(&enc.stage_widths).enumerate() {
            if i > 0 {
                let prev = enc.stage_widths[i - 1];
                let f = enc.downsample_factor_per_stage;
                p.insert(format!("enc.down{i}.norm.gamma"), Tensor::ones(&[prev]));
                p.insert(format!("enc.down{i}.norm.beta"), Tensor::zeros(&[prev]));
                p.insert(format!("enc.down{i}.w"), Tensor::trunc_normal(&[width, prev, f, f], INIT_STD, rng));
                p.insert(format!("enc.down{i}.b"), Tensor::zeros(&[width]));
            }
            for j in 0..depth {
                init_block(&mut p, &format!("enc.s{i}.b{j}"), enc.block_kind, width, rng);
            }
        }
        let dec = &self.decoder;
        let c = enc.out_channels();
        p.insert("dec.proj.w", Tensor::trunc_normal(&[dec.width, c, 1, 1], INIT_STD, rng));
        p.insert("dec.proj.b", Tensor::zeros(&[dec.width]));
        p.insert("dec.mask_token", Tensor::trunc_normal(&[dec.width], INIT_STD, rng));
        for j in 0..dec.depth {
            init_block(&mut p, &format!("dec.b{j}"), BlockKind::ConvNextV2, dec.width, rng);
        }
        p.insert(
            "dec.head.w",
            Tensor::trunc_normal(&[dec.patch_dim(), dec.width, 1, 1], INIT_STD, rng),
        );
        p.insert("dec.head.b", Tensor::zeros(&[dec.patch_dim()]));
        p
    }

    /// Output of every stage, sparse when `masks` is given (one grid per sample).
    pub fn encode_stages(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: Var,
        masks: Option<&[Arc<MaskGrid>]>,
    ) -> Result<Vec<Act>> {
        let shape = g.value(frames).shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape("encode", format!("frames must be [N,3,H,W], got {shape:?}")));
        };
        if c != 3 {
            return Err(Error::shape("encode", format!("expected 3 channels, got {c}")));
        }
        let (gh, gw) = self.grid_for(h, w)?;
        let enc = &self.encoder;
        let input = match masks {
            Some(m) => {
                if m.len() != n {
                    return Err(Error::Mask(format!("{} masks for a batch of {n}", m.len())));
                }
                if m.iter().any(|m| (m.grid_h(), m.grid_w()) != (gh, gw)) {
                    return Err(Error::Mask(format!("mask grid must be {gh}x{gw} for {h}x{w} input")));
                }
                let batch = MaskBatch::at(m, h, w)?;
                Act::from_sparse(SparseActivation::new(g, frames, batch)?)
            }
            None => Act { x: frames, mask: None },
        };
        let mut x = downsample(g, &input, p.get("enc.stem.w")?, p.get("enc.stem.b")?, enc.stem_factor)?;
        x = norm(g, &x, p.get("enc.stem.norm.gamma")?, p.get("enc.stem.norm.beta")?)?;
        let mut outs = Vec::with_capacity(enc.num_stages());
        for (i, &depth) in enc.stage_depths.iter().enumerate() {
            if i > 0 {
                let y = norm(g, &x, p.get(&format!("enc.down{i}.norm.gamma"))?, p.get(&format!("enc.down{i}.norm.beta"))?)?;
                x = downsample(
                    g,
                    &y,
                    p.get(&format!("enc.down{i}.w"))?,
                    p.get(&format!("enc.down{i}.b"))?,
                    enc.downsample_factor_per_stage,
                )?;
            }
            for j in 0..depth {
                x = block(g, p, &format!("enc.s{i}.b{j}"), enc.block_kind, &x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Sparse latent at the final stage.
    pub fn encode(&self, g: &mut Graph, p: &Bound, frames: Var, masks: &[Arc<MaskGrid>]) -> Result<SparseActivation> {
        let last = self.encode_stages(g, p, frames, Some(masks))?.pop().expect("at least one stage");
        last.sparse().ok_or_else(|| Error::Mask("encoder lost its mask".into()))
    }

    /// Dense export: the same weights evaluated as ordinary convolutions.
    pub fn encode_dense(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<Vec<Var>> {
        Ok(self.encode_stages(g, p, frames, None)?.into_iter().map(|a| a.x).collect())
    }

    /// Per-patch pixel predictions `[N, gh·gw, P²·C]` for every grid cell.
    pub fn decode(&self, g: &mut Graph, p: &Bound, z: &SparseActivation) -> Result<Var> {
        if z.mask.views().iter().any(|v| v.block() != (1, 1)) {
            return Err(Error::Mask("latent resolution must equal the mask grid".into()));
        }
        let x = g.conv2d(z.dense, p.get("dec.proj.w")?, Some(p.get("dec.proj.b")?), 1, 0, 1)?;
        let x = g.fill_masked(x, p.get("dec.mask_token")?, z.mask.keep())?;
        let mut x = Act { x, mask: None };
        for j in 0..self.decoder.depth {
            x = block(g, p, &format!("dec.b{j}"), BlockKind::ConvNextV2, &x)?;
        }
        let y = g.conv2d(x.x, p.get("dec.head.w")?, Some(p.get("dec.head.b")?), 1, 0, 1)?;
        g.to_patches(y)
    }

    /// Encode then decode.
    pub fn reconstruct(&self, g: &mut Graph, p: &Bound, frames: Var, masks: &[Arc<MaskGrid>]) -> Result<Var> {
        let z = self.encode(g, p, frames, masks)?;
        self.decode(g, p, &z)
    }
}

/// Splits `[N,C,H,W]` frames into `[N, (H/P)·(W/P), P·P·C]` patches ordered
/// row, column, channel within each patch. With `normalize`, each patch is
/// standardized by its own mean and `sqrt(var + eps)`.
pub fn patchify_targets(frames: &Tensor, patch: usize, normalize: bool, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = frames.shape()[..] else {
        return Err(Error::shape("patchify", format!("expected [N,C,H,W], got {:?}", frames.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let d = patch * patch * c;
    let src = frames.data();
    let mut out = vec![0.0; n * gh * gw * d];
    for ni in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let dst = &mut out[((ni * gh + gy) * gw + gx) * d..][..d];
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..c {
                            dst[(py * patch + px) * c + ci] =
                                src[((ni * c + ci) * h + gy * patch + py) * w + gx * patch + px];
                        }
                    }
                }
                if normalize {
                    let (mean, std) = moments(dst, eps);
                    dst.iter_mut().for_each(|v| *v = (*v - mean) / std);
                }
            }
        }
    }
    Tensor::new(&[n, gh * gw, d], out)
}

/// Mean and `sqrt(var + eps)` of one patch.
pub fn moments(values: &[f64], eps: f64) -> (f64, f64) {
    let len = values.len() as f64;
    let mean = values.iter().sum::<f64>() / len;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    (mean, (var + eps).sqrt())
}

/// Inverse of un-normalized [`patchify_targets`].
pub fn unpatchify(patches: &Tensor, patch: usize, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, gn, d] = patches.shape()[..] else {
        return Err(Error::shape("unpatchify", format!("expected [N,G,D], got {:?}", patches.shape())));
    };
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || gn != (h / patch) * (w / patch) || d != patch * patch * channels {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} does not tile a {channels}x{h}x{w} image with patch {patch}", patches.shape()),
        ));
    }
    let gw = w / patch;
    let src = patches.data();
    let mut out = vec![0.0; n * channels * h * w];
    for ni in 0..n {
        for gi in 0..gn {
            let (gy, gx) = (gi / gw, gi % gw);
            let p = &src[(ni * gn + gi) * d..][..d];
            for py in 0..patch {
                for px in 0..patch {
                    for ci in 0..channels {
                        out[((ni * channels + ci) * h + gy * patch + py) * w + gx * patch + px] =
                            p[(py * patch + px) * channels + ci];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, channels, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> Model {
        Model::new(EncoderConfig::default(), DecoderConfig::default()).unwrap()
    }

    #[test]
    fn desk_latent_shape() {
        let model = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = model.init_params(&mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
        let masks = vec![Arc::new(MaskGrid::sample(4, 4, 0.75, 1).unwrap()); 2];
        let z = model.encode(&mut g, &p, x, &masks).unwrap();
        assert_eq!(g.value(z.dense).shape(), &[2, 64, 4, 4]);
        let o = model.decode(&mut g, &p, &z).unwrap();
        assert_eq!(g.value(o).shape(), &[2, 16, 192]);
    }

    #[test]
    fn paper_scale_decoder_output_shape() {
        let model = Model::new(
            EncoderConfig {
                stem_factor: 4,
                stage_depths: vec![1, 1, 1, 1],
                stage_widths: vec![2, 2, 2, 2],
                block_kind: BlockKind::BasicResidual,
                downsample_factor_per_stage: 2,
            },
            DecoderConfig {
                depth: 1,
                width: 4,
                patch_size: 32,
                out_channels: 3,
            },
        )
        .unwrap();
        assert_eq!(model.grid_for(224, 224).unwrap(), (7, 7));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = model.init_params(&mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 224, 224]));
        let masks = vec![Arc::new(MaskGrid::sample(7, 7, 0.75, 1).unwrap())];
        let o = model.reconstruct(&mut g, &p, x, &masks).unwrap();
        assert_eq!(g.value(o).shape(), &[1, 49, 3072]);
    }

    #[test]
    fn config_invariants() {
        let mut dec = DecoderConfig::default();
        dec.patch_size = 16;
        assert!(Model::new(EncoderConfig::default(), dec).is_err());
        let mut dec = DecoderConfig::default();
        dec.depth = 0;
        assert!(Model::new(EncoderConfig::default(), dec).is_err());
        assert!(desk().grid_for(30, 32).is_err());
        assert_eq!("basic_residual".parse::<BlockKind>().unwrap(), BlockKind::BasicResidual);
        assert!("resnet".parse::<BlockKind>().is_err());
    }

    #[test]
    fn isotropic_stages_keep_resolution() {
        let enc = EncoderConfig {
            stem_factor: 8,
            stage_depths: vec![1, 1],
            stage_widths: vec![8, 8],
            block_kind: BlockKind::ConvNextV1,
            downsample_factor_per_stage: 1,
        };
        let model = Model::new(enc, DecoderConfig { width: 8, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = model.init_params(&mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let outs = model.encode_dense(&mut g, &p, x).unwrap();
        assert_eq!(g.value(outs[0]).shape(), &[1, 8, 4, 4]);
        assert_eq!(g.value(outs[1]).shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn zero_token_and_head_give_bias() {
        let model = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = model.init_params(&mut rng);
        params.get_mut("dec.mask_token").unwrap().data_mut().fill(0.0);
        params.get_mut("dec.head.w").unwrap().data_mut().fill(0.0);
        let bias = Tensor::from_fn(&[192], |i| i as f64 * 0.01);
        params.insert("dec.head.b", bias.clone());
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let masks = vec![Arc::new(MaskGrid::sample(4, 4, 0.75, 2).unwrap())];
        let o = model.reconstruct(&mut g, &p, x, &masks).unwrap();
        for patch in g.value(o).data().chunks(192) {
            assert_eq!(patch, bias.data());
        }
    }

    #[test]
    fn patchify_round_trip_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = Tensor::rand_uniform(&[2, 3, 16, 24], 0.0, 1.0, &mut rng);
        let p = patchify_targets(&frames, 8, false, 1e-6).unwrap();
        assert_eq!(p.shape(), &[2, 6, 192]);
        assert!(unpatchify(&p, 8, 3, 16, 24).unwrap().bit_eq(&frames));

        let normed = patchify_targets(&frames, 8, true, 1e-6).unwrap();
        for patch in normed.data().chunks(192) {
            let mean = patch.iter().sum::<f64>() / 192.0;
            let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 192.0;
            assert!(mean.abs() < 1e-10);
            // v / (v + eps) for raw variance v around 0.08
            assert!((var - 1.0).abs() < 1e-3);
        }
        let flat = Tensor::full(&[1, 3, 8, 8], 0.4);
        assert!(patchify_targets(&flat, 8, true, 1e-6).unwrap().data().iter().all(|v| v.abs() < 1e-9));
        assert!(patchify_targets(&frames, 7, false, 1e-6).is_err());
    }
}
