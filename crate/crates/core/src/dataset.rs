//! The Shape-Moving benchmark: one object moving toward one of the four frame
//! boundaries. The label is the motion direction, which no single frame decides.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::video::{read_video, write_video, Video};

pub const NUM_CLASSES: usize = 4;
/// Smallest total displacement that makes the label unambiguous.
pub const MIN_DISPLACEMENT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Direction::ALL.get(i).copied().ok_or(Error::ClassIndex { index: i, classes: NUM_CLASSES })
    }

    /// Unit step `(drow, dcol)` in image coordinates (row grows downward).
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    /// Label of a displacement: the dominant axis, with its sign. Ties and zero motion are ambiguous.
    pub fn from_displacement(drow: f64, dcol: f64) -> Option<Self> {
        if drow.abs() > dcol.abs() {
            Some(if drow < 0.0 { Direction::Up } else { Direction::Down })
        } else if dcol.abs() > drow.abs() {
            Some(if dcol < 0.0 { Direction::Left } else { Direction::Right })
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ColorMode {
    /// One color for every sample.
    Fixed { rgb: [f32; 3] },
    /// Uniform draw from the six saturated primaries and secondaries.
    Palette,
}

pub const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeMovingConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    pub size: usize,
    /// Pixels per frame.
    pub speed: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub color: ColorMode,
    /// Minimum distance in pixels between the object and every boundary at frame 0.
    pub start_margin: usize,
}

impl Default for ShapeMovingConfig {
    fn default() -> Self {
        ShapeMovingConfig {
            frames: 8,
            channels: 3,
            height: 32,
            width: 32,
            shape: ShapeKind::Square,
            size: 6,
            speed: 2,
            train_per_class: 2000,
            test_per_class: 500,
            seed: 0,
            color: ColorMode::Palette,
            start_margin: 0,
        }
    }
}

impl ShapeMovingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("frames", "need at least 2 frames"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", "must be 1 or 3"));
        }
        if self.size == 0 {
            return Err(Error::config("size", "must be positive"));
        }
        if self.speed == 0 {
            return Err(Error::config("speed", "must be positive"));
        }
        if self.speed * (self.frames - 1) < MIN_DISPLACEMENT {
            return Err(Error::config(
                "speed",
                format!("speed x (frames - 1) must be at least {MIN_DISPLACEMENT} pixels"),
            ));
        }
        let need = self.size + 2 * self.start_margin + MIN_DISPLACEMENT;
        for (field, extent) in [("height", self.height), ("width", self.width)] {
            if extent < need {
                return Err(Error::config(
                    field,
                    format!("{extent} px cannot hold a {} px object with margin {} and room to move", self.size, self.start_margin),
                ));
            }
        }
        if let ColorMode::Fixed { rgb } = &self.color {
            if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) || rgb.iter().all(|&v| v == 0.0) {
                return Err(Error::config("color.rgb", "components must lie in [0, 1] and not all be zero"));
            }
        }
        Ok(())
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Everything needed to re-render one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub label: usize,
    /// Top-left corner `(row, col)` of the object's bounding box at frame 0.
    pub start: [usize; 2],
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub label: usize,
    pub start: [usize; 2],
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: ShapeMovingConfig,
    pub seed: u64,
    pub split: Split,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    pub samples: Vec<(Video, usize)>,
    pub manifest: DatasetManifest,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn videos(&self) -> impl Iterator<Item = &Video> {
        self.samples.iter().map(|(v, _)| v)
    }

    /// Writes `<dir>/<split>/<index>.bvid` files and `<dir>/<split>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let sub = dir.join(self.split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for ((video, _), rec) in self.samples.iter().zip(&self.manifest.records) {
            write_video(&dir.join(&rec.file), video)?;
        }
        let path = dir.join(format!("{}.json", self.split.name()));
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(format!("{}.json", split.name()));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                if r.label >= NUM_CLASSES {
                    return Err(Error::ClassIndex { index: r.label, classes: NUM_CLASSES });
                }
                Ok((read_video(&dir.join(&r.file))?, r.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset { split, samples, manifest })
    }
}

/// Top-left position of the object at frame `k`, clamped at the boundary.
pub fn position_at(cfg: &ShapeMovingConfig, spec: &SampleSpec, k: usize) -> [usize; 2] {
    let dir = Direction::ALL[spec.label];
    let (dr, dc) = dir.step();
    let travel = (cfg.speed * k) as isize;
    let max_r = (cfg.height - cfg.size) as isize;
    let max_c = (cfg.width - cfg.size) as isize;
    let r = (spec.start[0] as isize + dr * travel).clamp(0, max_r);
    let c = (spec.start[1] as isize + dc * travel).clamp(0, max_c);
    [r as usize, c as usize]
}

/// Paints the object with its top-left corner at `pos` into a black `[c, h, w]` frame.
pub fn render_frame(cfg: &ShapeMovingConfig, pos: [usize; 2], color: [f32; 3]) -> Vec<f32> {
    let (h, w, s) = (cfg.height, cfg.width, cfg.size);
    let mut out = vec![0.0f32; cfg.channels * h * w];
    let rad = s as f64 / 2.0;
    let center = (s as f64 - 1.0) / 2.0;
    for dy in 0..s {
        for dx in 0..s {
            let inside = match cfg.shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let (y, x) = (dy as f64 - center, dx as f64 - center);
                    y * y + x * x <= rad * rad
                }
            };
            if !inside {
                continue;
            }
            let (y, x) = (pos[0] + dy, pos[1] + dx);
            if cfg.channels == 1 {
                out[y * w + x] = color.iter().cloned().fold(0.0, f32::max);
            } else {
                for (ch, &v) in color.iter().enumerate() {
                    out[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    out
}

pub fn render_sample(cfg: &ShapeMovingConfig, spec: &SampleSpec) -> Result<Video> {
    let mut data = Vec::with_capacity(cfg.frames * cfg.channels * cfg.height * cfg.width);
    for k in 0..cfg.frames {
        data.extend(render_frame(cfg, position_at(cfg, spec, k), spec.color));
    }
    Video::new(cfg.frames, cfg.channels, cfg.height, cfg.width, data)
}

/// Draws the label, start position, and color of sample `index`.
pub fn sample_spec(cfg: &ShapeMovingConfig, split: Split, index: usize) -> SampleSpec {
    let mut rng = derived_rng(cfg.seed, &format!("shape-moving/{}", split.name()), index as u64);
    let label = index % NUM_CLASSES;
    let (dr, dc) = Direction::ALL[label].step();
    let m = cfg.start_margin;
    let range = |extent: usize, d: isize| -> (usize, usize) {
        let (mut lo, mut hi) = (m, extent - cfg.size - m);
        // leave room for at least MIN_DISPLACEMENT pixels of travel
        if d < 0 {
            lo = lo.max(MIN_DISPLACEMENT);
        } else if d > 0 {
            hi = hi.min(extent - cfg.size - MIN_DISPLACEMENT);
        }
        (lo, hi)
    };
    let (r0, r1) = range(cfg.height, dr);
    let (c0, c1) = range(cfg.width, dc);
    let start = [rng.gen_range(r0..=r1), rng.gen_range(c0..=c1)];
    let color = match &cfg.color {
        ColorMode::Fixed { rgb } => *rgb,
        ColorMode::Palette => PALETTE[rng.gen_range(0..PALETTE.len())],
    };
    SampleSpec { label, start, color }
}

/// Balanced split with `classes × per_class` samples; sample `i` has label `i mod 4`.
pub fn generate_shape_moving(cfg: &ShapeMovingConfig, split: Split) -> Result<LabeledDataset> {
    cfg.validate()?;
    let count = cfg.per_class(split) * NUM_CLASSES;
    let built: Vec<(Video, SampleRecord)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = sample_spec(cfg, split, i);
            let video = render_sample(cfg, &spec)?;
            let rec = SampleRecord {
                file: format!("{}/{i:06}.bvid", split.name()),
                label: spec.label,
                start: spec.start,
                color: spec.color,
            };
            Ok((video, rec))
        })
        .collect::<Result<_>>()?;
    let (videos, records): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let samples = videos.into_iter().zip(records.iter().map(|r| r.label)).collect();
    Ok(LabeledDataset {
        split,
        samples,
        manifest: DatasetManifest { config: cfg.clone(), seed: cfg.seed, split, records },
    })
}

/// Intensity-weighted centroid `(row, col)` of one frame, summed over channels.
pub fn centroid(x: &Video, frame: usize) -> Option<(f64, f64)> {
    let [_, c, h, w] = x.dims();
    let (mut m, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = x.at(frame, ch, r, col) as f64;
                m += v;
                sr += v * r as f64;
                sc += v * col as f64;
            }
        }
    }
    (m > 0.0).then(|| (sr / m, sc / m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapeMovingConfig {
        ShapeMovingConfig { train_per_class: 5, test_per_class: 2, ..Default::default() }
    }

    #[test]
    fn center_object_moving_up_is_labeled_up() {
        let cfg = small();
        let spec = SampleSpec { label: Direction::Up.index(), start: [13, 13], color: [1.0, 0.0, 0.0] };
        let v = render_sample(&cfg, &spec).unwrap();
        let (r0, c0) = centroid(&v, 0).unwrap();
        let (r1, c1) = centroid(&v, 1).unwrap();
        assert_eq!((r1 - r0, c1 - c0), (-2.0, 0.0));
        assert_eq!(Direction::from_displacement(r1 - r0, c1 - c0), Some(Direction::Up));
    }

    #[test]
    fn validation_names_fields() {
        let bad = ShapeMovingConfig { speed: 0, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "speed"));
        let bad = ShapeMovingConfig { size: 31, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "height"));
        let bad = ShapeMovingConfig { frames: 2, speed: 1, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn motion_clamps_at_boundary() {
        let cfg = small();
        let spec = SampleSpec { label: Direction::Left.index(), start: [5, 3], color: [0.0, 1.0, 0.0] };
        assert_eq!(position_at(&cfg, &spec, 1), [5, 1]);
        assert_eq!(position_at(&cfg, &spec, 7), [5, 0]);
    }

    #[test]
    fn circle_fits_inside_its_box() {
        let cfg = ShapeMovingConfig { shape: ShapeKind::Circle, ..small() };
        let f = render_frame(&cfg, [0, 0], [1.0, 1.0, 1.0]);
        let lit = f.iter().filter(|&&v| v > 0.0).count();
        assert!(lit > 0 && lit < 3 * 36);
    }
}
