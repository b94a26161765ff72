//! Deterministic moving-sprite videos in the standard dataset layout.
//!
//! Normal content: anti-aliased circles translating at speeds in
//! `[v_max/2, v_max]` and bouncing off the borders, over one static
//! low-frequency background shared by every video. Each test video holds one
//! anomalous interval in which object 0 changes behavior. Every anomaly keeps
//! the number and area of sprites fixed, so raw image statistics alone do
//! not reveal it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::par;

/// Supersampling per pixel axis.
const SUBSAMPLES: usize = 4;

pub const METADATA_FILE: &str = "synth_metadata.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Object 0 moves at `fast_factor × v` .
    Fast,
    /// Object 0 becomes a spinning square of equal area.
    Square,
    /// Object 0 vanishes and reappears at a random place every frame.
    Teleport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub objects: usize,
    pub radius: f64,
    pub v_max: f64,
    pub fast_factor: f64,
    pub anomaly_len: usize,
    /// Cycled over test videos; empty means no anomalies.
    pub anomalies: Vec<AnomalyKind>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            train_videos: 8,
            test_videos: 4,
            frames: 60,
            objects: 2,
            radius: 5.0,
            v_max: 1.5,
            fast_factor: 4.0,
            anomaly_len: 15,
            anomalies: vec![AnomalyKind::Fast, AnomalyKind::Square, AnomalyKind::Teleport],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.frames < 2 || self.objects == 0 {
            return Err(Error::Config("synthetic spec needs size ≥ 16, ≥ 2 frames and ≥ 1 object".into()));
        }
        if !(self.radius > 0.0 && 2.0 * self.radius + 2.0 < self.size as f64) {
            return Err(Error::Config(format!("radius {} does not fit a {} frame", self.radius, self.size)));
        }
        if !self.anomalies.is_empty() && self.test_videos > 0 && self.anomaly_len + 2 > self.frames {
            return Err(Error::Config("anomaly interval longer than the video".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub fx: f64,
    pub fy: f64,
    pub phase: f64,
    pub amp: [f64; 3],
}

/// Static background `base + Σ amp·sin(2π(fx·x + fy·y)/size + phase)`, in `[0,1]` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let base = [rng.random_range(0.2..0.3), rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)];
        let waves = (0..3)
            .map(|_| Wave {
                fx: rng.random_range(1..=3) as f64,
                fy: rng.random_range(0..=2) as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: [rng.random_range(0.01..0.04), rng.random_range(0.01..0.04), rng.random_range(0.01..0.04)],
            })
            .collect();
        Background { base, waves }
    }

    fn at(&self, x: f64, y: f64, size: usize) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (2.0 * PI * (w.fx * x + w.fy * y) / size as f64 + w.phase).sin();
            for ch in 0..3 {
                c[ch] += w.amp[ch] * s;
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Circle { radius: f64 },
    /// Side `radius·√π` (same area as the circle), rotated by `angle`.
    Square { radius: f64, angle: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub x: f64,
    pub y: f64,
    pub shape: Shape,
    pub color: [f64; 3],
}

impl Sprite {
    fn coverage(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.shape {
            Shape::Circle { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Square { radius, angle } => {
                let half = 0.5 * radius * PI.sqrt();
                let (s, c) = angle.sin_cos();
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                u.abs() <= half && v.abs() <= half
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub kind: AnomalyKind,
    /// 0-based inclusive frame range.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub split: String,
    pub name: String,
    pub anomaly: Option<AnomalyInterval>,
    /// Sprites per frame, in draw order.
    pub frames: Vec<Vec<Sprite>>,
}

impl VideoMeta {
    pub fn labels(&self) -> Vec<u8> {
        (0..self.frames.len())
            .map(|f| self.anomaly.is_some_and(|a| f >= a.start && f <= a.end) as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub spec: SynthSpec,
    pub seed: u64,
    pub background: Background,
    pub videos: Vec<VideoMeta>,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.85, 0.2],
    [0.2, 0.9, 0.95],
    [0.95, 0.3, 0.8],
    [0.4, 0.95, 0.35],
    [0.95, 0.55, 0.2],
    [0.85, 0.85, 0.95],
];

/// Draws the frame as 8-bit RGB.
pub fn render_frame(bg: &Background, sprites: &[Sprite], size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 3);
    let n = (SUBSAMPLES * SUBSAMPLES) as f64;
    for y in 0..size {
        for x in 0..size {
            let base = bg.at(x as f64 + 0.5, y as f64 + 0.5, size);
            let mut acc = [0.0; 3];
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let px = x as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
                    let c = sprites.iter().rev().find(|s| s.coverage(px, py)).map_or(base, |s| s.color);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for a in acc {
                out.push(((a / n).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
}

fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = -*v;
    }
    if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -*v;
    }
    *p = p.clamp(lo, hi);
}

fn simulate(spec: &SynthSpec, rng: &mut ChaCha8Rng, anomaly: Option<AnomalyInterval>) -> Vec<Vec<Sprite>> {
    let (lo, hi) = (spec.radius + 1.0, spec.size as f64 - spec.radius - 1.0);
    let mut movers: Vec<Mover> = (0..spec.objects)
        .map(|i| {
            let speed = rng.random_range(0.5..=1.0) * spec.v_max;
            let dir = rng.random_range(0.0..2.0 * PI);
            Mover {
                x: rng.random_range(lo..hi),
                y: rng.random_range(lo..hi),
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
                color: PALETTE[(i + rng.random_range(0..PALETTE.len())) % PALETTE.len()],
            }
        })
        .collect();
    let spin0 = rng.random_range(0.0..PI);
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let active = anomaly.filter(|a| f >= a.start && f <= a.end);
        if f > 0 {
            for (i, m) in movers.iter_mut().enumerate() {
                match active {
                    Some(a) if i == 0 && a.kind == AnomalyKind::Teleport => {
                        m.x = rng.random_range(lo..hi);
                        m.y = rng.random_range(lo..hi);
                    }
                    Some(a) if i == 0 && a.kind == AnomalyKind::Fast => {
                        let (mut vx, mut vy) = (m.vx * spec.fast_factor, m.vy * spec.fast_factor);
                        m.x += vx;
                        m.y += vy;
                        bounce(&mut m.x, &mut vx, lo, hi);
                        bounce(&mut m.y, &mut vy, lo, hi);
                        m.vx = vx / spec.fast_factor;
                        m.vy = vy / spec.fast_factor;
                    }
                    _ => {
                        m.x += m.vx;
                        m.y += m.vy;
                        bounce(&mut m.x, &mut m.vx, lo, hi);
                        bounce(&mut m.y, &mut m.vy, lo, hi);
                    }
                }
            }
        }
        frames.push(
            movers
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let shape = match active {
                        Some(a) if i == 0 && a.kind == AnomalyKind::Square => Shape::Square {
                            radius: spec.radius,
                            angle: spin0 + 0.35 * f as f64,
                        },
                        _ => Shape::Circle { radius: spec.radius },
                    };
                    Sprite {
                        x: m.x,
                        y: m.y,
                        shape,
                        color: m.color,
                    }
                })
                .collect(),
        );
    }
    frames
}

/// Trajectories for every video; no files touched.
pub fn plan_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthMetadata> {
    spec.validate()?;
    let background = Background::sample(&mut seeded_rng(seed, 0));
    let mut videos = Vec::new();
    for (split, count, stream_base) in [("training", spec.train_videos, 1_000u64), ("testing", spec.test_videos, 2_000)] {
        for v in 0..count {
            let mut rng = seeded_rng(seed, stream_base + v as u64);
            let anomaly = (split == "testing" && !spec.anomalies.is_empty()).then(|| {
                let kind = spec.anomalies[v % spec.anomalies.len()];
                let lo = spec.frames / 4;
                let hi = (spec.frames - spec.anomaly_len - 1).max(lo + 1);
                let start = rng.random_range(lo..hi);
                AnomalyInterval {
                    kind,
                    start,
                    end: start + spec.anomaly_len - 1,
                }
            });
            videos.push(VideoMeta {
                split: split.to_string(),
                name: format!("video_{v:02}"),
                anomaly,
                frames: simulate(spec, &mut rng, anomaly),
            });
        }
    }
    Ok(SynthMetadata {
        spec: spec.clone(),
        seed,
        background,
        videos,
    })
}

fn encode_png(rgb: Vec<u8>, size: usize) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb).ok_or_else(|| Error::Data("frame buffer size".into()))?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Render and write the dataset under `root` (which should be empty).
pub fn synthesize_dataset(root: &Path, spec: &SynthSpec, seed: u64) -> Result<SynthMetadata> {
    let meta = plan_dataset(spec, seed)?;
    for v in &meta.videos {
        let dir = root.join(&v.split).join("frames").join(&v.name);
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let pngs = par::map_slice(&v.frames, |sprites| encode_png(render_frame(&meta.background, sprites, spec.size), spec.size));
        for (f, png) in pngs.into_iter().enumerate() {
            let p = dir.join(format!("{f:04}.png"));
            fs::write(&p, png?).map_err(|e| Error::file(&p, e))?;
        }
        if v.split == "testing" {
            let ldir = root.join("testing").join("labels");
            fs::create_dir_all(&ldir).map_err(|e| Error::file(&ldir, e))?;
            let labels: String = v.labels().iter().map(|l| format!("{l}\n")).collect();
            fs::write(ldir.join(format!("{}.txt", v.name)), labels)?;
            let intervals = v.anomaly.map_or(String::new(), |a| format!("{}-{}\n", a.start + 1, a.end + 1));
            fs::write(ldir.join(format!("{}.intervals", v.name)), intervals)?;
        }
    }
    let p = root.join(METADATA_FILE);
    fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::file(&p, e))?;
    Ok(meta)
}

/// Re-render every frame from saved metadata and compare to the files on disk.
pub fn verify_dataset(root: &Path) -> Result<SynthMetadata> {
    let meta: SynthMetadata = serde_json::from_str(&fs::read_to_string(root.join(METADATA_FILE))?)?;
    for v in &meta.videos {
        for (f, sprites) in v.frames.iter().enumerate() {
            let p = root.join(&v.split).join("frames").join(&v.name).join(format!("{f:04}.png"));
            let disk = image::open(&p).map_err(|e| Error::file(&p, e))?.to_rgb8().into_raw();
            if disk != render_frame(&meta.background, sprites, meta.spec.size) {
                return Err(Error::file(&p, "frame does not match its recorded trajectory"));
            }
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            size: 32,
            train_videos: 1,
            test_videos: 3,
            frames: 24,
            anomaly_len: 6,
            radius: 4.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn normal_motion_bounded() {
        let meta = plan_dataset(&small(), 3).unwrap();
        let v_max = small().v_max;
        for v in &meta.videos {
            let labels = v.labels();
            for f in 1..v.frames.len() {
                for (i, (a, b)) in v.frames[f - 1].iter().zip(&v.frames[f]).enumerate() {
                    let step = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                    if labels[f] == 0 || i > 0 {
                        assert!(step <= v_max + 1e-9, "{} frame {f}: step {step}", v.name);
                    }
                }
            }
        }
        let kinds: Vec<_> = meta.videos.iter().filter_map(|v| v.anomaly.map(|a| a.kind)).collect();
        assert_eq!(kinds, [AnomalyKind::Fast, AnomalyKind::Square, AnomalyKind::Teleport]);
    }

    #[test]
    fn equal_area_square() {
        let c = Sprite {
            x: 16.0,
            y: 16.0,
            shape: Shape::Circle { radius: 6.0 },
            color: [1.0; 3],
        };
        let s = Sprite {
            shape: Shape::Square { radius: 6.0, angle: 0.3 },
            ..c
        };
        let count = |sp: &Sprite| {
            (0..320 * 320)
                .filter(|i| sp.coverage((i % 320) as f64 / 10.0, (i / 320) as f64 / 10.0))
                .count() as f64
        };
        assert!((count(&c) / count(&s) - 1.0).abs() < 0.02);
    }
}
