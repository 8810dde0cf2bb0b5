//! On-disk dataset layout:
//!
//! ```text
//! root/sequences/<id>/frames/<%06d>.png   8-bit grayscale or 24-bit RGB
//! root/sequences/<id>/masks/<%06d>.png    8-bit, 0 = background, 255 = freespace
//! root/sequences/<id>/timestamps.txt      one decimal seconds value per line
//! root/splits.json                        {"train": [ids], "test": [ids]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::synthetic::{generate_sequence, split_counts, SyntheticSpec};
use super::{DataError, Frame, SequenceClip};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Layout(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub sequences: usize,
    pub frames: usize,
    pub train: usize,
    pub test: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one sequence under `root/sequences/<id>/`.
pub fn write_sequence(root: &Path, seq: &SequenceClip) -> Result<(), DataError> {
    let dir = root.join("sequences").join(&seq.sequence_id);
    let (frames_dir, masks_dir) = (dir.join("frames"), dir.join("masks"));
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;
    let mut stamps = String::new();
    for (i, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let (c, h, w) = (frame.channels(), frame.height(), frame.width());
        let path = frames_dir.join(format!("{i:06}.png"));
        let px = frame.image.data();
        let img = if c == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u8(px[y as usize * w + x as usize])])
            }))
        } else {
            DynamicImage::ImageRgb8(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |ch: usize| to_u8(px[(ch * h + y as usize) * w + x as usize]);
                image::Rgb([at(0), at(1), at(2)])
            }))
        };
        img.save(&path).map_err(|e| image_err(&path, e))?;
        write_mask(&masks_dir.join(format!("{i:06}.png")), mask)?;
        stamps.push_str(&format!("{}\n", frame.timestamp));
    }
    let tpath = dir.join("timestamps.txt");
    fs::write(&tpath, stamps).map_err(io_err(&tpath))
}

/// Render the synthetic dataset to `out_dir` in the layout above.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetSummary, DataError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (n_train, _) = split_counts(spec.n_sequences);
    let mut splits = Splits::default();
    let mut frames = 0;
    for i in 0..spec.n_sequences {
        let seq = generate_sequence(spec, i)?;
        write_sequence(out_dir, &seq)?;
        frames += seq.len();
        if i < n_train {
            splits.train.push(seq.sequence_id);
        } else {
            splits.test.push(seq.sequence_id);
        }
    }
    write_splits(out_dir, &splits)?;
    Ok(DatasetSummary {
        sequences: spec.n_sequences,
        frames,
        train: splits.train.len(),
        test: splits.test.len(),
    })
}

pub(crate) fn write_splits(root: &Path, splits: &Splits) -> Result<(), DataError> {
    let path = root.join("splits.json");
    let text = serde_json::to_string_pretty(splits).expect("splits serialise");
    fs::write(&path, text).map_err(io_err(&path))
}

fn read_splits(root: &Path) -> Result<Splits, DataError> {
    let path = root.join("splits.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let splits: Splits = serde_json::from_str(&text)
        .map_err(|e| DataError::Layout(format!("{}: {e}", path.display())))?;
    if let Some(id) = splits.train.iter().find(|id| splits.test.contains(id)) {
        return Err(DataError::Layout(format!("sequence `{id}` is in both splits")));
    }
    Ok(splits)
}

fn indexed_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Ok(idx) = stem.parse::<usize>() {
            out.push((idx, path));
        }
    }
    out.sort();
    Ok(out)
}

fn load_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = match img {
        DynamicImage::ImageLuma8(g) => {
            Tensor::new(&[1, h, w], g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        other => {
            let rgb = other.to_rgb8();
            let raw = rgb.as_raw();
            Tensor::new(&[3, h, w], (0..3 * h * w).map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raw[p * 3 + c] as f32 / 255.0
            }).collect())
        }
    };
    t.map_err(|e| image_err(path, e))
}

fn load_mask(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[h, w], data).map_err(|e| image_err(path, e))
}

/// Write a binary mask as an 8-bit PNG (0 / 255).
pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<(), DataError> {
    let (h, w) = (mask.dim(0), mask.dim(1));
    let md = mask.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if md[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }]))
        .save(path)
        .map_err(|e| image_err(path, e))
}

fn load_frames_indexed(dir: &Path, id: &str) -> Result<Vec<(usize, Frame)>, DataError> {
    let frame_files = indexed_pngs(&dir.join("frames"))?;
    if frame_files.is_empty() {
        return Err(DataError::Layout(format!("sequence `{id}` has no frames")));
    }
    let tpath = dir.join("timestamps.txt");
    let text = fs::read_to_string(&tpath).map_err(io_err(&tpath))?;
    let stamps: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Layout(format!("{}: {e}", tpath.display())))?;
    if stamps.len() != frame_files.len() {
        return Err(DataError::Layout(format!(
            "sequence `{id}`: {} timestamps for {} frames",
            stamps.len(),
            frame_files.len()
        )));
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    for (k, (idx, path)) in frame_files.iter().enumerate() {
        if k > 0 && stamps[k] <= stamps[k - 1] {
            return Err(DataError::NonMonotonicTimestamps { sequence: id.to_string(), index: *idx });
        }
        frames.push((*idx, Frame { image: load_image(path)?, timestamp: stamps[k] }));
    }
    Ok(frames)
}

/// Load only the frames and timestamps of a sequence directory; masks may be absent.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Frame>, DataError> {
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("sequence").to_string();
    Ok(load_frames_indexed(dir, &id)?.into_iter().map(|(_, f)| f).collect())
}

/// Load one sequence directory (`frames/`, `masks/`, `timestamps.txt`).
pub fn load_sequence_dir(dir: &Path, id: &str) -> Result<SequenceClip, DataError> {
    let indexed = load_frames_indexed(dir, id)?;
    let mut frames = Vec::with_capacity(indexed.len());
    let mut masks = Vec::with_capacity(indexed.len());
    for (idx, frame) in indexed {
        let mpath = dir.join("masks").join(format!("{idx:06}.png"));
        if !mpath.exists() {
            return Err(DataError::MissingMask { sequence: id.to_string(), index: idx });
        }
        let mask = load_mask(&mpath)?;
        if mask.shape() != &frame.image.shape()[1..] {
            return Err(DataError::Layout(format!(
                "sequence `{id}` frame {idx}: mask {:?} vs image {:?}",
                mask.shape(),
                frame.image.shape()
            )));
        }
        frames.push(frame);
        masks.push(mask);
    }
    Ok(SequenceClip { sequence_id: id.to_string(), frames, masks, is_training_clip: false })
}

/// Load the sequences listed under `split` in `root/splits.json`.
pub fn load_sequences(root: &Path, split: Split) -> Result<Vec<SequenceClip>, DataError> {
    let splits = read_splits(root)?;
    let ids = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    ids.iter()
        .map(|id| {
            let dir = root.join("sequences").join(id);
            if !dir.is_dir() {
                return Err(DataError::UnknownSequence(id.clone()));
            }
            let mut seq = load_sequence_dir(&dir, id)?;
            seq.is_training_clip = split == Split::Train;
            Ok(seq)
        })
        .collect()
}
