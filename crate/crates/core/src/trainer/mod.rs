//! Online/target training loop.
//!
//! Each step encodes frame 1 with the online network and frame 2 with the
//! EMA target network under the same mask, computes the three losses,
//! back-propagates through the online branch, applies AdamW and finally moves
//! the target towards the updated online weights.

pub mod config;
pub mod data;
pub mod optim;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use data::{augment_pair, sample_index, AugmentRecord, FramePair};
pub use optim::{ema_update, lr_at, AdamW};

use crate::dataio::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{asymmetric_pair, sample_mask, MaskGrid};
use crate::model::{patchify_targets, Model, NORM_EPS};
use crate::objective::{self, LossReport};
use crate::params::{Bound, ParamStore};
use crate::tensor::{set_precision, Tensor};

/// Stream of the data generator; parameter init uses stream 0 of the same seed.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DualParams {
    pub online: ParamStore,
    pub target: ParamStore,
    pub momentum: f64,
}

impl DualParams {
    /// Target starts as an exact copy of the online weights.
    pub fn new(online: ParamStore, momentum: f64) -> Self {
        Self {
            target: online.clone(),
            online,
            momentum,
        }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.momentum)
    }
}

/// A stacked minibatch of frame pairs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames1: Tensor,
    pub frames2: Tensor,
    pub masks1: Vec<Arc<MaskGrid>>,
    pub masks2: Vec<Arc<MaskGrid>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[FramePair]) -> Result<Self> {
        let f1: Vec<Tensor> = pairs.iter().map(|p| p.frame1.clone()).collect();
        let f2: Vec<Tensor> = pairs.iter().map(|p| p.frame2.clone()).collect();
        Ok(Self {
            frames1: Tensor::stack(&f1)?,
            frames2: Tensor::stack(&f2)?,
            masks1: pairs.iter().map(|p| p.mask1.clone()).collect(),
            masks2: pairs.iter().map(|p| p.mask2.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks1.is_empty()
    }
}

/// Static settings a step needs.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub gamma: f64,
    pub norm_pix: bool,
    pub symmetric: bool,
}

impl From<&TrainConfig> for StepSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            gamma: c.gamma,
            norm_pix: c.norm_pix,
            symmetric: c.symmetric_masking,
        }
    }
}

/// Both branches of one step on a single graph. Target parameters are bound
/// as constants, so no gradient can ever reach them, and the target output
/// enters the consistency loss as a detached copy.
pub struct PairGraph {
    pub graph: Graph,
    pub online: Bound,
    pub target: Bound,
    /// `L_o + γ·L_c`, the differentiated objective.
    pub loss: Var,
    pub report: LossReport,
}

pub fn build_pair_graph(model: &Model, dual: &DualParams, batch: &Batch, s: StepSettings) -> Result<PairGraph> {
    let mut g = Graph::new();
    let patch = model.patch_size();

    let tp = dual.target.bind(&mut g, false);
    let x2 = g.constant(batch.frames2.clone());
    let o2 = model.reconstruct(&mut g, &tp, x2, &batch.masks2)?;
    let o2 = g.value(o2).clone();
    let t2 = patchify_targets(&batch.frames2, patch, s.norm_pix, NORM_EPS)?;
    let l_t = objective::target_loss(&t2, &o2, objective::masked_patches(&batch.masks2))?;

    let op = dual.online.bind(&mut g, true);
    let x1 = g.constant(batch.frames1.clone());
    let o1 = model.reconstruct(&mut g, &op, x1, &batch.masks1)?;
    let t1 = g.constant(patchify_targets(&batch.frames1, patch, s.norm_pix, NORM_EPS)?);
    let l_o = objective::online_loss(&mut g, t1, o1, objective::masked_patches(&batch.masks1))?;
    let shared = objective::shared_masked(&batch.masks1, &batch.masks2, s.symmetric)?;
    let l_c = if shared.iter().any(|&m| m) {
        Some(objective::consistency_loss(&mut g, o1, &o2, shared)?)
    } else {
        None
    };
    let report = objective::total_loss(
        g.value(l_o).item(),
        l_t,
        l_c.map_or(0.0, |v| g.value(v).item()),
        s.gamma,
    );
    let loss = match l_c {
        Some(l_c) if s.gamma != 0.0 => {
            let weighted = g.scale(l_c, s.gamma);
            g.add(l_o, weighted)?
        }
        _ => l_o,
    };
    Ok(PairGraph {
        graph: g,
        online: op,
        target: tp,
        loss,
        report,
    })
}

/// Forward and backward of one step without touching any parameters.
/// Returns the loss report and the online gradients in parameter order.
pub fn losses_and_grads(
    model: &Model,
    dual: &DualParams,
    batch: &Batch,
    s: StepSettings,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut pg = build_pair_graph(model, dual, batch, s)?;
    if pg.report.is_finite() {
        pg.graph.backward(pg.loss)?;
    }
    Ok((pg.report, pg.online.grads(&pg.graph, &dual.online)))
}

/// One full update: losses, AdamW on the online weights, then EMA.
pub fn train_step(
    model: &Model,
    dual: &mut DualParams,
    opt: &mut AdamW,
    batch: &Batch,
    s: StepSettings,
    lr: f64,
    step: u64,
) -> Result<LossReport> {
    let (report, grads) = losses_and_grads(model, dual, batch, s)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{report:?}"),
        });
    }
    opt.step(&mut dual.online, &grads, lr).map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
        e => e,
    })?;
    dual.ema_update()?;
    Ok(report)
}

pub const CSV_HEADER: &str = "step,l_online,l_target,l_consistency,l_total,lr";

pub fn csv_row(step: u64, r: &LossReport, lr: f64) -> String {
    format!(
        "{step},{},{},{},{},{lr}",
        r.l_online, r.l_target, r.l_consistency, r.l_total
    )
}

/// Owns the parameters, optimizer, data and generator for a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub dual: DualParams,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: u64,
    data: Vec<Vec<Tensor>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<Vec<Tensor>>) -> Result<Self> {
        config.validate()?;
        let model = config.model()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let online = model.init_params(&mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Self::assemble(config, model, DualParams::new(online, 0.0), None, rng, 0, data)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: Vec<Vec<Tensor>>) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config)?;
        let model = config.model()?;
        let fresh = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        fresh
            .check_congruent(&ckpt.online)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the config: {e}")))?;
        let dual = DualParams {
            online: ckpt.online.clone(),
            target: ckpt.target.clone(),
            momentum: config.momentum,
        };
        let mut opt = AdamW::new(&dual.online, config.betas, config.weight_decay);
        opt.m = ckpt.adam_m.clone();
        opt.v = ckpt.adam_v.clone();
        opt.t = ckpt.adam_t;
        Self::assemble(config, model, dual, Some(opt), ckpt.rng.restore(), ckpt.step, data)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        mut dual: DualParams,
        opt: Option<AdamW>,
        rng: ChaCha8Rng,
        step: u64,
        data: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        dual.momentum = config.momentum;
        let lengths: Vec<usize> = data.iter().map(Vec::len).collect();
        for i in data::short_sequences(&lengths, config.frame_gap) {
            log::warn!("sequence {i} has {} frames, too short for gap {}; skipped", lengths[i], config.frame_gap);
        }
        sample_index(&lengths, config.frame_gap, &mut ChaCha8Rng::seed_from_u64(0))?;
        for seq in &data {
            for f in seq {
                if f.ndim() != 3 || f.shape()[0] != 3 {
                    return Err(Error::Data(format!("frames must be [3,H,W], got {:?}", f.shape())));
                }
            }
        }
        let opt = opt.unwrap_or_else(|| AdamW::new(&dual.online, config.betas, config.weight_decay));
        Ok(Self {
            config,
            model,
            dual,
            opt,
            rng,
            step,
            data,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps() as u64
    }

    /// Learning rate used by the update that completes step `step` (1-based).
    pub fn lr_for(&self, step: u64) -> f64 {
        let c = &self.config;
        lr_at(step as usize, c.lr, c.min_lr, c.warmup_steps(), c.total_steps())
    }

    pub fn sample_pair(&mut self) -> Result<FramePair> {
        let c = &self.config;
        let lengths: Vec<usize> = self.data.iter().map(Vec::len).collect();
        let (seq, t) = sample_index(&lengths, c.frame_gap, &mut self.rng)?;
        let (f1, f2) = (&self.data[seq][t], &self.data[seq][t + c.frame_gap]);
        let (frame1, frame2, record1, record2) =
            augment_pair(f1, f2, c.image_size, c.same_augmentation, c.color_jitter, &mut self.rng)?;
        let (gh, gw) = self.model.grid_for(c.image_size, c.image_size)?;
        let (mask1, mask2) = if c.symmetric_masking {
            let m = Arc::new(sample_mask(gh, gw, c.mask_ratio, &mut self.rng)?);
            (m.clone(), m)
        } else {
            let (a, b) = asymmetric_pair(gh, gw, c.mask_ratio, &mut self.rng)?;
            (Arc::new(a), Arc::new(b))
        };
        Ok(FramePair {
            frame1,
            frame2,
            seq,
            t,
            gap: c.frame_gap,
            record1,
            record2,
            mask1,
            mask2,
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let pairs = (0..self.config.batch_size)
            .map(|_| self.sample_pair())
            .collect::<Result<Vec<_>>>()?;
        Batch::from_pairs(&pairs)
    }

    /// Runs one step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<(LossReport, f64)> {
        set_precision(self.config.precision);
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// Runs one step on a given batch.
    pub fn step_on(&mut self, batch: &Batch) -> Result<(LossReport, f64)> {
        set_precision(self.config.precision);
        let next = self.step + 1;
        let lr = self.lr_for(next);
        let settings = StepSettings::from(&self.config);
        let report = train_step(&self.model, &mut self.dual, &mut self.opt, batch, settings, lr, next)?;
        self.step = next;
        Ok((report, lr))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_text(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            adam_t: self.opt.t,
            online: self.dual.online.clone(),
            target: self.dual.target.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    /// Runs until `until` steps are complete, reporting every step.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&Trainer, &LossReport, f64) -> Result<()>) -> Result<()> {
        while self.step < until {
            let (report, lr) = self.step()?;
            on_step(self, &report, lr)?;
        }
        Ok(())
    }
}

/// Draws `n` fixed pairs (frame `t`, `t + gap`) without augmentation and with
/// one fixed symmetric mask each, for overfitting checks.
pub fn fixed_batch<R: Rng + ?Sized>(
    data: &[Vec<Tensor>],
    n: usize,
    gap: usize,
    model: &Model,
    ratio: f64,
    rng: &mut R,
) -> Result<Batch> {
    let lengths: Vec<usize> = data.iter().map(Vec::len).collect();
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (seq, t) = sample_index(&lengths, gap, rng)?;
        let f1 = data[seq][t].clone();
        let (h, w) = (f1.shape()[1], f1.shape()[2]);
        let (gh, gw) = model.grid_for(h, w)?;
        let m = Arc::new(sample_mask(gh, gw, ratio, rng)?);
        pairs.push(FramePair {
            frame1: f1,
            frame2: data[seq][t + gap].clone(),
            seq,
            t,
            gap,
            record1: AugmentRecord::identity(h, w),
            record2: AugmentRecord::identity(h, w),
            mask1: m.clone(),
            mask2: m,
        });
    }
    Batch::from_pairs(&pairs)
}
