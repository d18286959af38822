//! On-disk frame sequences: `root/<seq>/<%05d>.ppm` with optional
//! `root/<seq>/labels/<%05d>.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{self, LabelMap};
use super::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
}

/// Index of a dataset directory. Frames are loaded on demand.
#[derive(Clone, Debug)]
pub struct SequenceStore {
    pub root: PathBuf,
    pub sequences: Vec<SequenceEntry>,
    pub height: usize,
    pub width: usize,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

impl SequenceStore {
    /// Scans `root`, checking that every frame shares one resolution.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", root.display())));
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut sequences = Vec::new();
        let mut dims = None;
        for dir in dirs {
            let frames = sorted_files(&dir, "ppm")?;
            if frames.is_empty() {
                continue;
            }
            let label_dir = dir.join("labels");
            let labels = if label_dir.is_dir() {
                sorted_files(&label_dir, "pgm")?
            } else {
                Vec::new()
            };
            for f in &frames {
                let r = pnm::read_raster(f)?;
                match dims {
                    None => dims = Some((r.height, r.width)),
                    Some(d) if d != (r.height, r.width) => {
                        return Err(Error::Data(format!(
                            "{}: {}x{} frame in a {}x{} dataset",
                            f.display(),
                            r.height,
                            r.width,
                            d.0,
                            d.1
                        )));
                    }
                    _ => {}
                }
            }
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            sequences.push(SequenceEntry { name, frames, labels });
        }
        let (height, width) = dims.ok_or_else(|| Error::Data(format!("no frames under {}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            sequences,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn load_frames(&self, seq: usize) -> Result<Vec<Tensor>> {
        self.sequences[seq].frames.iter().map(|p| pnm::read_frame(p)).collect()
    }

    pub fn load_labels(&self, seq: usize) -> Result<Vec<LabelMap>> {
        self.sequences[seq].labels.iter().map(|p| pnm::read_labels(p)).collect()
    }

    /// Every sequence's frames in memory.
    pub fn load_all(&self) -> Result<Vec<Vec<Tensor>>> {
        (0..self.len()).map(|i| self.load_frames(i)).collect()
    }
}

pub fn frame_name(i: usize) -> String {
    format!("{i:05}.ppm")
}

pub fn label_name(i: usize) -> String {
    format!("{i:05}.pgm")
}

/// Writes synthetic sequences under `root` in the store layout.
pub fn write_sequences(root: &Path, seqs: &[SyntheticSequence]) -> Result<()> {
    for s in seqs {
        let dir = root.join(&s.name);
        fs::create_dir_all(dir.join("labels"))?;
        for (i, (f, l)) in s.frames.iter().zip(&s.labels).enumerate() {
            fs::write(dir.join(frame_name(i)), pnm::encode(f))?;
            pnm::write_labels(&dir.join("labels").join(label_name(i)), l)?;
        }
    }
    Ok(())
}
