//! Synthetic moving-shape videos with template captions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::text::{write_jsonl, CaptionRecord, Split};
use crate::video::VideoClip;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Purple,
    Orange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Membership of the unit-box point `(u, v)`.
    fn contains(self, u: f64, v: f64) -> bool {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Purple => [0.5, 0.0, 0.5],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

impl Motion {
    pub fn word(self) -> Option<&'static str> {
        match self {
            Motion::Left => Some("left"),
            Motion::Right => Some("right"),
            Motion::Up => Some("up"),
            Motion::Down => Some("down"),
            Motion::Static => None,
        }
    }

    /// Unit displacement `(dx, dy)` in image coordinates.
    fn direction(self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Static => (0.0, 0.0),
        }
    }
}

const MOVING_TEMPLATES: [&str; 3] = [
    "a {color} {shape} moves {direction}",
    "{color} {shape} moving {direction}",
    "the {color} {shape} slides {direction}",
];
const STATIC_TEMPLATES: [&str; 3] = [
    "a {color} {shape} stays still",
    "{color} {shape} staying still",
    "the {color} {shape} rests",
];

/// Largest supported `templates` value.
pub const MAX_TEMPLATES: usize = MOVING_TEMPLATES.len();

/// Anti-aliasing subsamples per pixel axis.
const SUPERSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub motions: Vec<Motion>,
    /// Fraction of the timeline, from the start, in which nothing moves.
    pub static_prefix: f64,
    /// Captions per video, each from a different template.
    pub templates: usize,
    pub seed: u64,
    /// Videos assigned to the validation and test splits; the rest train.
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            videos: 16,
            frames: 16,
            height: 16,
            width: 16,
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle],
            colors: vec![Color::Red, Color::Green, Color::Blue],
            motions: vec![Motion::Left, Motion::Right, Motion::Up, Motion::Down],
            static_prefix: 0.5,
            templates: 1,
            seed: 0,
            val: 0,
            test: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.videos == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("video count, frames and resolution must be >= 1".into());
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.motions.is_empty() {
            return bad("shape, color and motion sets must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.static_prefix) {
            return bad(format!(
                "static_prefix {} outside [0, 1)",
                self.static_prefix
            ));
        }
        if self.templates == 0 || self.templates > MAX_TEMPLATES {
            return bad(format!(
                "templates must be in 1..={MAX_TEMPLATES}, got {}",
                self.templates
            ));
        }
        if self.val + self.test >= self.videos {
            return bad(format!(
                "{} val + {} test videos leave no training videos",
                self.val, self.test
            ));
        }
        Ok(())
    }

    /// First frame of the motion segment.
    pub fn motion_start(&self) -> usize {
        ((self.static_prefix * self.frames as f64).round() as usize).min(self.frames - 1)
    }

    fn shape_size(&self) -> f64 {
        (self.height.min(self.width) as f64 * 0.375).max(2.0)
    }
}

/// Everything needed to render one video and caption it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoPlan {
    pub id: String,
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    /// Top-left corner of the shape box during the static prefix.
    pub origin: (f64, f64),
    /// Distance covered by the end of the clip.
    pub travel: f64,
    pub split: Split,
}

impl VideoPlan {
    pub fn captions(&self, templates: usize) -> Vec<String> {
        let table = if self.motion == Motion::Static {
            &STATIC_TEMPLATES
        } else {
            &MOVING_TEMPLATES
        };
        table[..templates]
            .iter()
            .map(|t| {
                t.replace("{color}", self.color.word())
                    .replace("{shape}", self.shape.word())
                    .replace("{direction}", self.motion.word().unwrap_or(""))
            })
            .collect()
    }

    pub fn record(&self, templates: usize) -> CaptionRecord {
        CaptionRecord {
            id: self.id.clone(),
            video: format!("videos/{}.vvid", self.id),
            captions: self.captions(templates),
            split: self.split,
        }
    }
}

/// Assigns a (shape, color, motion) and a trajectory to every video.
///
/// Combinations are shuffled once and dealt in order, so the first
/// `shapes·colors·motions` videos are pairwise distinct.
pub fn plan_dataset(spec: &SyntheticSpec) -> Result<Vec<VideoPlan>> {
    spec.validate()?;
    let mut combos = Vec::new();
    for &shape in &spec.shapes {
        for &color in &spec.colors {
            for &motion in &spec.motions {
                combos.push((shape, color, motion));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    combos.shuffle(&mut rng);
    let size = spec.shape_size();
    let train = spec.videos - spec.val - spec.test;
    let digits = (spec.videos - 1).to_string().len().max(4);
    Ok((0..spec.videos)
        .map(|i| {
            let (shape, color, motion) = combos[i % combos.len()];
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
            r.set_stream(i as u64 + 1);
            let (dx, dy) = motion.direction();
            let span_x = spec.width as f64 - size;
            let span_y = spec.height as f64 - size;
            let reach = if dx != 0.0 { span_x } else { span_y };
            let travel = if motion == Motion::Static {
                0.0
            } else {
                reach * r.random_range(0.6..=1.0)
            };
            // the full trajectory stays inside the frame
            let mut free = |span: f64, d: f64| {
                let lo = if d < 0.0 { travel } else { 0.0 };
                let hi = if d > 0.0 { span - travel } else { span };
                lo + (hi - lo).max(0.0) * r.random::<f64>()
            };
            let x = free(span_x, dx);
            let y = free(span_y, dy);
            let split = if i < train {
                Split::Train
            } else if i < train + spec.val {
                Split::Val
            } else {
                Split::Test
            };
            VideoPlan {
                id: format!("v{i:0digits$}"),
                shape,
                color,
                motion,
                origin: (x, y),
                travel,
                split,
            }
        })
        .collect())
}

/// Renders the plan: black background, one anti-aliased shape.
pub fn render_video(spec: &SyntheticSpec, plan: &VideoPlan) -> VideoClip {
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut clip = VideoClip::zeros(t_len, h, w, 3);
    let size = spec.shape_size();
    let start = spec.motion_start();
    let moving = t_len - start;
    let (dx, dy) = plan.motion.direction();
    let rgb = plan.color.rgb();
    let step = 1.0 / SUPERSAMPLE as f64;
    for t in 0..t_len {
        let progress = if t < start {
            0.0
        } else {
            (t - start + 1) as f64 / moving as f64
        };
        let x0 = plan.origin.0 + dx * plan.travel * progress;
        let y0 = plan.origin.1 + dy * plan.travel * progress;
        let frame = clip.frame_mut(t);
        for py in 0..h {
            for px in 0..w {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let v = (py as f64 + (sy as f64 + 0.5) * step - y0) / size;
                    for sx in 0..SUPERSAMPLE {
                        let u = (px as f64 + (sx as f64 + 0.5) * step - x0) / size;
                        hits += usize::from(plan.shape.contains(u, v));
                    }
                }
                if hits > 0 {
                    let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                    let at = (py * w + px) * 3;
                    for c in 0..3 {
                        frame[at + c] = rgb[c] * cover;
                    }
                }
            }
        }
    }
    clip
}

/// Writes `videos/*.vvid`, `corpus.jsonl`, one JSONL file per split and the
/// spec echo `spec.json` under `out`. Returns the corpus.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out: &Path) -> Result<Vec<CaptionRecord>> {
    let plans = plan_dataset(spec)?;
    let videos = out.join("videos");
    fs::create_dir_all(&videos)?;
    plans
        .par_iter()
        .try_for_each(|p| render_video(spec, p).save(videos.join(format!("{}.vvid", p.id))))?;
    let records: Vec<CaptionRecord> = plans.iter().map(|p| p.record(spec.templates)).collect();
    write_jsonl(out.join("corpus.jsonl"), &records)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let part: Vec<&CaptionRecord> = records.iter().filter(|r| r.split == split).collect();
        write_jsonl(out.join(format!("{split}.jsonl")), &part)?;
    }
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(records)
}
