//! Dataset layout, frame decoding and clip windows.
//!
//! Layout:
//!
//! ```text
//! root/training/frames/<video>/<frame>.<ext>
//! root/testing/frames/<video>/<frame>.<ext>
//! root/testing/labels/<video>.txt        one 0/1 per frame
//! root/testing/labels/<video>.intervals  "start-end" per line, 1-based inclusive
//! ```
//!
//! Videos and frames are ordered lexicographically by file name.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const FRAME_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Training,
    Testing,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Testing => "testing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// Per-frame labels, 1 = anomalous. Present for the test split.
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

impl DatasetIndex {
    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    /// Human-readable counts, one line per video.
    pub fn report(&self) -> String {
        let mut s = format!("{} videos, {} frames\n", self.videos.len(), self.frame_count());
        for v in &self.videos {
            let anomalous = v.labels.as_ref().map(|l| l.iter().filter(|&&x| x == 1).count());
            match anomalous {
                Some(a) => s += &format!("  {}: {} frames, {a} anomalous\n", v.name, v.frames.len()),
                None => s += &format!("  {}: {} frames\n", v.name, v.frames.len()),
            }
        }
        s
    }
}

/// Decode, bilinear-resize to `size × size` and map `x ↦ 2x/255 − 1`.
/// Grayscale input is replicated to three channels.
pub fn load_frame(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let data = rgb.into_raw().into_iter().map(|b| 2.0 * (b as f32 / 255.0) - 1.0).collect();
    Tensor::new(&[size, size, 3], data)
}

/// Forward differences `frames[j+1] − frames[j]`.
pub fn rgb_difference(frames: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    if frames.len() < 2 {
        return Err(Error::Config(format!("differences need at least 2 frames, got {}", frames.len())));
    }
    frames
        .windows(2)
        .map(|w| {
            if w[0].shape() != w[1].shape() {
                return Err(Error::shape("rgb_difference", "frames differ in shape"));
            }
            let d = w[1].data().iter().zip(w[0].data()).map(|(a, b)| a - b).collect();
            Tensor::new(w[0].shape(), d)
        })
        .collect()
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut out = Vec::new();
    for e in rd {
        let p = e.map_err(|e| Error::file(dir, e))?.path();
        if want_dirs && p.is_dir() {
            out.push(p);
        } else if !want_dirs && p.is_file() {
            let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
            if ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
                out.push(p);
            }
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Per-line `0`/`1` labels; blank lines ignored.
pub fn parse_labels(text: &str, frames: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(frames);
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "" => {}
            "0" => out.push(0),
            "1" => out.push(1),
            other => return Err(Error::Data(format!("label line {}: expected 0 or 1, got '{other}'", i + 1))),
        }
    }
    if out.len() != frames {
        return Err(Error::Data(format!("{} labels for {frames} frames", out.len())));
    }
    Ok(out)
}

/// `start-end` lines, 1-based inclusive, expanded to per-frame labels.
pub fn parse_intervals(text: &str, frames: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("interval line {}: expected 'start-end', got '{line}'", i + 1));
        let (a, b) = line.split_once('-').ok_or_else(bad)?;
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || a > b || b > frames {
            return Err(Error::Data(format!(
                "interval {a}-{b} on line {} is outside 1..={frames}",
                i + 1
            )));
        }
        out[a - 1..b].iter_mut().for_each(|v| *v = 1);
    }
    Ok(out)
}

/// Index one split. Test videos must have a label or interval file.
pub fn index_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let frames_dir = root.join(split.dir_name()).join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::file(&frames_dir, "missing frames directory"));
    }
    let mut videos = Vec::new();
    for vdir in sorted_entries(&frames_dir, true)? {
        let name = vdir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let frames = sorted_entries(&vdir, false)?;
        if frames.is_empty() {
            return Err(Error::file(&vdir, "video folder holds no frames"));
        }
        let labels = match split {
            Split::Training => None,
            Split::Testing => Some(load_labels(root, &name, frames.len())?),
        };
        videos.push(VideoEntry { name, frames, labels });
    }
    if videos.is_empty() {
        return Err(Error::file(&frames_dir, "no video folders"));
    }
    Ok(DatasetIndex { split, videos })
}

fn load_labels(root: &Path, video: &str, frames: usize) -> Result<Vec<u8>> {
    let dir = root.join(Split::Testing.dir_name()).join("labels");
    let txt = dir.join(format!("{video}.txt"));
    let iv = dir.join(format!("{video}.intervals"));
    let with_path = |p: &Path, r: Result<Vec<u8>>| r.map_err(|e| Error::file(p, e));
    if txt.is_file() {
        with_path(&txt, parse_labels(&fs::read_to_string(&txt)?, frames))
    } else if iv.is_file() {
        with_path(&iv, parse_intervals(&fs::read_to_string(&iv)?, frames))
    } else {
        Err(Error::Data(format!("test video '{video}' has no label file in {}", dir.display())))
    }
}

/// Decoded frames of one video.
#[derive(Clone, Debug)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    pub labels: Option<Vec<u8>>,
}

/// Decode every frame; order is fixed by the index before any parallel read.
pub fn load_videos(index: &DatasetIndex, size: usize) -> Result<Vec<Video>> {
    index
        .videos
        .iter()
        .map(|v| {
            let frames = par::map_slice(&v.frames, |p| load_frame(p, size)).into_iter().collect::<Result<Vec<_>>>()?;
            Ok(Video {
                name: v.name.clone(),
                frames,
                labels: v.labels.clone(),
            })
        })
        .collect()
}

/// One unlabeled frame folder as a video named after the folder.
pub fn load_frame_folder(dir: &Path, size: usize) -> Result<(Video, Vec<PathBuf>)> {
    let paths = sorted_entries(dir, false)?;
    if paths.is_empty() {
        return Err(Error::file(dir, "folder holds no frames"));
    }
    let frames = par::map_slice(&paths, |p| load_frame(p, size)).into_iter().collect::<Result<Vec<_>>>()?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("frames").to_string();
    Ok((
        Video {
            name,
            frames,
            labels: None,
        },
        paths,
    ))
}

/// Number of `k`-frame windows with a following target frame.
pub fn window_count(frames: usize, k: usize) -> usize {
    frames.saturating_sub(k)
}

/// Input frames `t−k+1..=t`, their differences, and target `t+1`.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub frames: Vec<Tensor<f32>>,
    pub diffs: Vec<Tensor<f32>>,
    pub target: Tensor<f32>,
    pub video: usize,
    /// Index of the target within its video.
    pub target_index: usize,
}

impl ClipSample {
    /// Window `w` of `video` (targets start at frame index `k`).
    pub fn from_video(video: &Video, video_id: usize, w: usize, k: usize) -> Result<Self> {
        let t = w + k;
        if t >= video.frames.len() {
            return Err(Error::Data(format!(
                "window {w} of '{}' needs frame {t}, video has {}",
                video.name,
                video.frames.len()
            )));
        }
        let frames = video.frames[w..t].to_vec();
        let diffs = rgb_difference(&frames)?;
        let clip = ClipSample {
            frames,
            diffs,
            target: video.frames[t].clone(),
            video: video_id,
            target_index: t,
        };
        debug_assert!(clip.check().is_ok());
        Ok(clip)
    }

    /// Differences match their frames exactly and all maps share a shape.
    pub fn check(&self) -> Result<()> {
        let shape = self.target.shape();
        if self.frames.iter().chain(&self.diffs).any(|f| f.shape() != shape) || self.diffs.len() + 1 != self.frames.len() {
            return Err(Error::Data("clip maps differ in shape or count".into()));
        }
        for (j, d) in self.diffs.iter().enumerate() {
            let (a, b) = (&self.frames[j + 1], &self.frames[j]);
            if d.data().iter().zip(a.data().iter().zip(b.data())).any(|(&d, (&x, &y))| d != x - y) {
                return Err(Error::Data(format!("difference {j} does not match its frames")));
            }
        }
        Ok(())
    }

    /// Frames stacked along channels: `H × W × 3k`.
    pub fn stacked_frames(&self) -> Tensor<f32> {
        stack_channels(&self.frames)
    }

    /// Differences stacked along channels: `H × W × 3(k−1)`.
    pub fn stacked_diffs(&self) -> Tensor<f32> {
        stack_channels(&self.diffs)
    }

    pub fn label(&self, videos: &[Video]) -> Option<u8> {
        videos[self.video].labels.as_ref().map(|l| l[self.target_index])
    }
}

/// Concatenate `H × W × c` maps along channels.
pub fn stack_channels(maps: &[Tensor<f32>]) -> Tensor<f32> {
    let shape = maps[0].shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w * c * maps.len());
    for p in 0..h * w {
        for m in maps {
            out.extend_from_slice(&m.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_parts(vec![h, w, c * maps.len()], out)
}

/// `(video, window)` pairs over all videos, video-major.
pub fn all_windows(videos: &[Video], k: usize) -> Vec<(usize, usize)> {
    videos
        .iter()
        .enumerate()
        .flat_map(|(v, vid)| (0..window_count(vid.frames.len(), k)).map(move |w| (v, w)))
        .collect()
}
