use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use maskvid::dataio::{self, Checkpoint, SequenceStore};
use maskvid::eval::{self, PropagationConfig};
use maskvid::masking::MaskGrid;
use maskvid::model::{moments, patchify_targets, unpatchify, NORM_EPS};
use maskvid::trainer::{self, TrainConfig, Trainer};
use maskvid::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::{display, git_blob_hash, unix_now, RunManifest};
use crate::{EvalArgs, GenDataArgs, PretrainArgs, ReconstructArgs};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub err: anyhow::Error,
}

type CmdResult<T> = Result<T, Failure>;

fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MissingKey(_) | Error::Mask(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Parse { .. } | Error::Truncated { .. } | Error::Checkpoint(_) => EXIT_DATA,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

trait Code<T> {
    /// Tags an error with an exit code.
    fn code(self, code: u8) -> CmdResult<T>;
    /// Exit code from the engine error kind.
    fn classified(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, err: e.into() })
    }

    fn classified(self) -> CmdResult<T> {
        self.map_err(|e| {
            let err = e.into();
            let code = err.downcast_ref::<Error>().map_or(EXIT_FAILURE, classify);
            Failure { code, err }
        })
    }
}

fn fail(code: u8, msg: String) -> Failure {
    Failure { code, err: anyhow!(msg) }
}

/// Refuses to reuse a non-empty output directory unless forced.
fn prepare_dir(dir: &Path, force: bool) -> CmdResult<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
        if occupied && !force {
            return Err(fail(
                EXIT_CONFIG,
                format!("{} already exists and is not empty; pass --force to overwrite", dir.display()),
            ));
        }
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .code(EXIT_FAILURE)
}

fn prepare_file(path: &Path, force: bool) -> CmdResult<()> {
    if path.exists() && !force {
        return Err(fail(
            EXIT_CONFIG,
            format!("{} already exists; pass --force to overwrite", path.display()),
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).code(EXIT_FAILURE)?;
    }
    Ok(())
}

fn read_config(path: &Path) -> CmdResult<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .code(EXIT_CONFIG)?;
    TrainConfig::parse(&text)
        .with_context(|| format!("config {}", path.display()))
        .code(EXIT_CONFIG)
}

fn load_checkpoint(path: &Path) -> CmdResult<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .code(EXIT_DATA)?;
    let cfg = TrainConfig::parse(&ckpt.config)
        .context("config stored in checkpoint")
        .code(EXIT_CONFIG)?;
    Ok((ckpt, cfg))
}

pub fn pretrain(a: &PretrainArgs) -> CmdResult<()> {
    let start_unix = unix_now();
    let cfg = read_config(&a.config)?;
    let store = SequenceStore::open(&a.data).code(EXIT_DATA)?;
    let data = store.load_all().code(EXIT_DATA)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let (ckpt, stored) = load_checkpoint(path)?;
            if stored != cfg {
                return Err(fail(
                    EXIT_CONFIG,
                    format!("{} was written with a different config than {}", path.display(), a.config.display()),
                ));
            }
            Trainer::from_checkpoint(&ckpt, data).classified()?
        }
        None => Trainer::new(cfg.clone(), data).classified()?,
    };
    prepare_dir(&a.out, a.force)?;
    let start_step = trainer.step;
    let total = trainer.total_steps();
    let csv_path = a.out.join("loss.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).code(EXIT_FAILURE)?);
    writeln!(csv, "{}", trainer::CSV_HEADER).code(EXIT_FAILURE)?;
    let mut checkpoints = Vec::new();
    let every = cfg.checkpoint_every as u64;
    let per_epoch = cfg.steps_per_epoch() as u64;
    log::info!(
        "training {} steps ({} per epoch) from step {start_step} on {} sequences",
        total,
        per_epoch,
        store.len()
    );
    let out = a.out.clone();
    let result = trainer.run(total, |t, report, lr| {
        writeln!(csv, "{}", trainer::csv_row(t.step, report, lr))?;
        if every > 0 && t.step % every == 0 && t.step < total {
            let path = out.join(format!("ckpt_{:06}.vmc", t.step));
            t.checkpoint().save(&path)?;
            checkpoints.push(display(&path));
        }
        if t.step % per_epoch == 0 {
            log::info!(
                "epoch {} step {} l_online {:.4} l_total {:.4}",
                t.step / per_epoch,
                t.step,
                report.l_online,
                report.l_total
            );
        }
        Ok(())
    });
    csv.flush().code(EXIT_FAILURE)?;
    result.classified()?;
    let final_path = a.out.join("final.vmc");
    trainer.checkpoint().save(&final_path).code(EXIT_FAILURE)?;
    let config = cfg.to_text();
    let manifest = RunManifest {
        config_hash: git_blob_hash(&config),
        config,
        seed: cfg.seed,
        start_unix,
        end_unix: unix_now(),
        resumed_from: a.resume.as_deref().map(display),
        start_step,
        end_step: trainer.step,
        loss_csv: display(&csv_path),
        checkpoints,
        final_checkpoint: display(&final_path),
    };
    let text = serde_json::to_string_pretty(&manifest).code(EXIT_FAILURE)?;
    fs::write(a.out.join("manifest.json"), text + "\n").code(EXIT_FAILURE)?;
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs) -> CmdResult<()> {
    if !(0.0..1.0).contains(&a.ratio) {
        return Err(fail(EXIT_CONFIG, format!("--ratio must lie in [0, 1), got {}", a.ratio)));
    }
    let (ckpt, cfg) = load_checkpoint(&a.ckpt)?;
    let model = cfg.model().code(EXIT_CONFIG)?;
    let f1 = dataio::read_frame(&a.pair[0]).code(EXIT_DATA)?;
    let f2 = dataio::read_frame(&a.pair[1]).code(EXIT_DATA)?;
    if f1.shape() != f2.shape() {
        return Err(fail(EXIT_DATA, "the two frames differ in size".into()));
    }
    let (h, w) = (f1.shape()[1], f1.shape()[2]);
    let (gh, gw) = model.grid_for(h, w).code(EXIT_DATA)?;
    let mask = Arc::new(MaskGrid::sample(gh, gw, a.ratio, a.seed).code(EXIT_CONFIG)?);
    prepare_dir(&a.out, a.force)?;

    let frames = Tensor::stack(&[f1, f2]).code(EXIT_FAILURE)?;
    let mut g = Graph::new();
    let p = ckpt.online.bind(&mut g, false);
    let x = g.constant(frames.clone());
    let pred = model
        .reconstruct(&mut g, &p, x, &[mask.clone(), mask.clone()])
        .classified()?;
    let pred = g.value(pred).clone();
    let patch = model.patch_size();
    let raw = patchify_targets(&frames, patch, false, NORM_EPS).code(EXIT_FAILURE)?;
    let d = patch * patch * 3;
    let mut recon = raw.data().to_vec();
    let mut masked = raw.data().to_vec();
    for (i, visible) in mask.visible().iter().cycle().take(2 * gh * gw).enumerate() {
        if *visible {
            continue;
        }
        let cell = i * d..(i + 1) * d;
        let out = &pred.data()[cell.clone()];
        let (mean, std) = if cfg.norm_pix {
            moments(&raw.data()[cell.clone()], NORM_EPS)
        } else {
            (0.0, 1.0)
        };
        for (r, o) in recon[cell.clone()].iter_mut().zip(out) {
            *r = o * std + mean;
        }
        masked[cell].iter_mut().for_each(|v| *v = 0.5);
    }
    let shape = raw.shape().to_vec();
    let recon = unpatchify(&Tensor::new(&shape, recon).code(EXIT_FAILURE)?, patch, 3, h, w).code(EXIT_FAILURE)?;
    let masked = unpatchify(&Tensor::new(&shape, masked).code(EXIT_FAILURE)?, patch, 3, h, w).code(EXIT_FAILURE)?;
    for i in 0..2 {
        dataio::write_frame(&a.out.join(format!("frame{}_masked.ppm", i + 1)), &masked.index0(i)).code(EXIT_FAILURE)?;
        dataio::write_frame(&a.out.join(format!("frame{}_recon.ppm", i + 1)), &recon.index0(i)).code(EXIT_FAILURE)?;
    }
    fs::write(a.out.join("mask.txt"), mask.dump()).code(EXIT_FAILURE)?;
    log::info!(
        "masked {} of {} patches, outputs in {}",
        mask.num_masked(),
        mask.cells(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult<()> {
    let (cfg, params) = match &a.ckpt {
        Some(path) => {
            let (ckpt, cfg) = load_checkpoint(path)?;
            let params = if a.target { ckpt.target } else { ckpt.online };
            (cfg, params)
        }
        None => {
            let cfg = match &a.config {
                Some(p) => read_config(p)?,
                None => TrainConfig::default(),
            };
            let model = cfg.model().code(EXIT_CONFIG)?;
            let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            (cfg, params)
        }
    };
    let model = cfg.model().code(EXIT_CONFIG)?;
    let pcfg = PropagationConfig {
        k: a.k,
        temperature: a.temperature,
        context_frames: a.context,
        feature_stage: a.stage,
    };
    pcfg.validate().code(EXIT_CONFIG)?;
    let store = SequenceStore::open(&a.data).code(EXIT_DATA)?;
    let mut frames = Vec::with_capacity(store.len());
    let mut labels = Vec::with_capacity(store.len());
    for i in 0..store.len() {
        let f = store.load_frames(i).code(EXIT_DATA)?;
        let l = store.load_labels(i).code(EXIT_DATA)?;
        if l.len() != f.len() {
            return Err(fail(
                EXIT_DATA,
                format!("{}: {} frames but {} label maps", store.sequences[i].name, f.len(), l.len()),
            ));
        }
        frames.push(f);
        labels.push(l);
    }
    prepare_file(&a.out, a.force)?;
    let items = store
        .sequences
        .iter()
        .zip(frames.iter().zip(&labels))
        .map(|(s, (f, l))| (s.name.as_str(), f.as_slice(), l.as_slice()));
    let (results, mean) = eval::evaluate(&model, &params, items, &pcfg).classified()?;
    let mut out = BufWriter::new(File::create(&a.out).code(EXIT_FAILURE)?);
    for r in &results {
        writeln!(out, "{}", serde_json::to_string(r).code(EXIT_FAILURE)?).code(EXIT_FAILURE)?;
    }
    let summary = json!({ "summary": true, "sequences": results.len(), "mean_iou": mean });
    writeln!(out, "{summary}").code(EXIT_FAILURE)?;
    out.flush().code(EXIT_FAILURE)?;
    log::info!("mean IoU {mean:.4} over {} sequences", results.len());
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult<()> {
    let seqs = dataio::generate(a.seed, a.sequences, a.frames, a.size, a.patch_size).code(EXIT_CONFIG)?;
    prepare_dir(&a.out, a.force)?;
    dataio::write_sequences(&a.out, &seqs).code(EXIT_FAILURE)?;
    log::info!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}
