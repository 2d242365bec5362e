//! Scene and detection files, and the synthetic scene generator.
//!
//! Scenes are stored one JSON object per line:
//!
//! ```text
//! {"scene_id":"train-000001","width":640.0,"height":480.0,
//!  "ground_truth":[[x,y,w,h,difficult],...],
//!  "candidates":[[x,y,w,h,d1,...,dD],...],
//!  "global":[g1,...]}
//! ```
//!
//! `global` is the optional scene-level descriptor consumed by the grid
//! model. Detections are `scene_id,x,y,w,h,score` lines with six-decimal
//! scores; box coordinates are written in shortest round-trip form.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{aspect_filter, iou, BoundingBox, CanvasTransform, CANVAS, NUM_CELLS};

/// Descriptor layout: appearance cue, normalized x-center, normalized
/// y-center, log relative size, then noise dimensions.
pub const CUE: usize = 0;
pub const MIN_DESCRIPTOR_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub bbox: BoundingBox,
    pub descriptor: Vec<f64>,
}

/// One image: ground truth, candidate boxes with descriptors, and the
/// optional scene-level descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub ground_truth: Vec<GroundTruth>,
    pub candidates: Vec<Candidate>,
    pub global: Vec<f64>,
}

impl SceneRecord {
    pub fn candidate_boxes(&self) -> Vec<BoundingBox> {
        self.candidates.iter().map(|c| c.bbox).collect()
    }

    pub fn canvas_transform(&self) -> CanvasTransform {
        CanvasTransform::for_image(self.width, self.height)
    }

    /// Best IoU of each candidate with any ground-truth box (0 without truth).
    pub fn candidate_overlaps(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| {
                self.ground_truth
                    .iter()
                    .map(|g| iou(&c.bbox, &g.bbox))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::InvalidScene {
            scene_id: self.scene_id.clone(),
            message: message.into(),
        }
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() || self.scene_id.contains([',', '\n', '\r']) {
            return Err(self.invalid("scene id must be non-empty and free of commas and newlines"));
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(self.invalid("image size must be positive"));
        }
        for (i, g) in self.ground_truth.iter().enumerate() {
            if !g.bbox.is_valid() {
                return Err(self.invalid(format!("ground truth {i} has an invalid box")));
            }
        }
        let dim = self.candidates.first().map(|c| c.descriptor.len());
        for (i, c) in self.candidates.iter().enumerate() {
            if !c.bbox.is_valid() {
                return Err(self.invalid(format!("candidate {i} has an invalid box")));
            }
            if !aspect_filter(&c.bbox) {
                return Err(self.invalid(format!("candidate {i} fails the aspect filter")));
            }
            if Some(c.descriptor.len()) != dim {
                return Err(self.invalid(format!("candidate {i} descriptor dimension differs")));
            }
            if c.descriptor.iter().any(|v| !v.is_finite()) {
                return Err(self.invalid(format!("candidate {i} descriptor is not finite")));
            }
        }
        if self.global.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("scene descriptor is not finite"));
        }
        Ok(())
    }
}

/// Dataset-level invariants: unique ids, shared descriptor dimensions.
pub fn validate_dataset(scenes: &[SceneRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    let mut dim: Option<usize> = None;
    let mut gdim: Option<usize> = None;
    for s in scenes {
        s.validate()?;
        if !ids.insert(s.scene_id.as_str()) {
            return Err(s.invalid("duplicate scene id"));
        }
        if let Some(c) = s.candidates.first() {
            match dim {
                None => dim = Some(c.descriptor.len()),
                Some(d) if d != c.descriptor.len() => {
                    return Err(s.invalid(format!(
                        "descriptor dimension {} differs from dataset dimension {d}",
                        c.descriptor.len()
                    )))
                }
                _ => {}
            }
        }
        match gdim {
            None => gdim = Some(s.global.len()),
            Some(d) if d != s.global.len() => {
                return Err(s.invalid("scene descriptor dimension differs across the dataset"))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_id: String,
    width: f64,
    height: f64,
    ground_truth: Vec<(f64, f64, f64, f64, bool)>,
    candidates: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    global: Vec<f64>,
}

impl SceneLine {
    fn from_record(s: &SceneRecord) -> Self {
        Self {
            scene_id: s.scene_id.clone(),
            width: s.width,
            height: s.height,
            ground_truth: s
                .ground_truth
                .iter()
                .map(|g| (g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h, g.difficult))
                .collect(),
            candidates: s
                .candidates
                .iter()
                .map(|c| {
                    let mut v = vec![c.bbox.x, c.bbox.y, c.bbox.w, c.bbox.h];
                    v.extend_from_slice(&c.descriptor);
                    v
                })
                .collect(),
            global: s.global.clone(),
        }
    }

    fn into_record(self, line: usize) -> Result<SceneRecord> {
        let mut candidates = Vec::with_capacity(self.candidates.len());
        for (i, v) in self.candidates.into_iter().enumerate() {
            if v.len() < 4 {
                return Err(Error::Parse {
                    line,
                    message: format!("candidate {i} has {} fields, need at least 4", v.len()),
                });
            }
            candidates.push(Candidate {
                bbox: BoundingBox::new(v[0], v[1], v[2], v[3]),
                descriptor: v[4..].to_vec(),
            });
        }
        Ok(SceneRecord {
            scene_id: self.scene_id,
            width: self.width,
            height: self.height,
            ground_truth: self
                .ground_truth
                .into_iter()
                .map(|(x, y, w, h, difficult)| GroundTruth {
                    bbox: BoundingBox::new(x, y, w, h),
                    difficult,
                })
                .collect(),
            candidates,
            global: self.global,
        })
    }
}

pub fn scene_to_line(scene: &SceneRecord) -> String {
    serde_json::to_string(&SceneLine::from_record(scene)).expect("scene serializes")
}

/// Parses scene lines (blank lines are skipped) and validates every invariant.
pub fn parse_scenes(text: &str) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parsed.into_record(i + 1)?);
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenes(&text)
}

pub fn save_scenes(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let mut text = String::new();
    for s in scenes {
        text.push_str(&scene_to_line(s));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scored boxes of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub scene_id: String,
    pub detections: Vec<(BoundingBox, f64)>,
}

/// Descending score, ties in box-lexicographic order.
pub fn sort_detections(dets: &mut [(BoundingBox, f64)]) {
    dets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.lex_cmp(&b.0)));
}

/// Rounds a score to the six decimals kept in detection files.
pub fn quantize_score(s: f64) -> f64 {
    format!("{s:.6}").parse().expect("formatted float parses")
}

/// Writes detections ordered by scene id, then descending score.
pub fn save_detections(path: &Path, detections: &[SceneDetections]) -> Result<()> {
    let mut scenes: Vec<&SceneDetections> = detections.iter().collect();
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let mut text = String::new();
    for s in scenes {
        let mut dets = s.detections.clone();
        if let Some(d) = dets.iter().find(|d| !d.1.is_finite()) {
            return Err(Error::NonFinite {
                what: "detection score",
                location: format!("scene {} box {:?}", s.scene_id, d.0),
            });
        }
        sort_detections(&mut dets);
        for (b, score) in dets {
            writeln!(text, "{},{},{},{},{},{:.6}", s.scene_id, b.x, b.y, b.w, b.h, score).unwrap();
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a detections file, grouping consecutive lines by scene id.
pub fn load_detections(path: &Path) -> Result<Vec<SceneDetections>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<SceneDetections> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("field {}: {e}", k + 1),
            })
        };
        let det = (BoundingBox::new(num(1)?, num(2)?, num(3)?, num(4)?), num(5)?);
        match out.last_mut() {
            Some(s) if s.scene_id == fields[0] => s.detections.push(det),
            _ => out.push(SceneDetections {
                scene_id: fields[0].to_string(),
                detections: vec![det],
            }),
        }
    }
    Ok(out)
}

/// Writes `scene_id` followed by the per-cell scores, six decimals each.
pub fn save_global_scores(path: &Path, scores: &[(String, Vec<f64>)]) -> Result<()> {
    let mut text = String::new();
    for (id, s) in scores {
        if s.len() != NUM_CELLS {
            return Err(Error::DimensionMismatch {
                expected: NUM_CELLS,
                actual: s.len(),
                context: "global scores",
            });
        }
        text.push_str(id);
        for v in s {
            write!(text, ",{v:.6}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_global_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let vals: std::result::Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if vals.len() != NUM_CELLS {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {NUM_CELLS} scores, found {}", vals.len()),
            });
        }
        out.push((id, vals));
    }
    Ok(out)
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_scenes: usize,
    pub validation_scenes: usize,
    pub test_scenes: usize,
    /// Inclusive range of heads per scene.
    pub heads_per_scene: (usize, usize),
    pub descriptor_dim: usize,
    /// Fraction of each class whose appearance cue falls in the shared range.
    pub ambiguity_rate: f64,
    /// Mean vertical position of the head row, as a fraction of image height.
    pub horizon_band: f64,
    /// Per-scene uniform offset of the head row around `horizon_band`.
    pub band_spread: f64,
    /// Relative size change per unit of vertical offset (in image heights).
    pub scale_gradient: f64,
    /// Head size range as a fraction of image height.
    pub head_size: (f64, f64),
    /// Inclusive range of jittered candidates per head.
    pub jitters_per_head: (usize, usize),
    /// Inclusive range of background candidates per scene.
    pub background_per_scene: (usize, usize),
    /// Heads smaller than this many pixels are marked difficult.
    pub difficult_size: f64,
    /// Noise level of the scene-level descriptor.
    pub global_noise: f64,
    /// Maximum number of spurious blobs in the scene-level descriptor.
    pub global_clutter: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            validation_scenes: 500,
            test_scenes: 500,
            heads_per_scene: (1, 6),
            descriptor_dim: 8,
            ambiguity_rate: 0.3,
            horizon_band: 0.5,
            band_spread: 0.2,
            scale_gradient: 2.0,
            head_size: (0.1, 0.22),
            jitters_per_head: (2, 4),
            background_per_scene: (40, 80),
            difficult_size: 40.0,
            global_noise: 0.25,
            global_clutter: 3,
            rng_seed: 7,
        }
    }
}

/// Maximum vertical offset of a head from the scene's row, in image heights.
const ROW_DEVIATION: f64 = 0.04;
/// Multiplicative per-head size noise bound.
const SIZE_NOISE: f64 = 0.05;
/// Head aspect is `exp(U[-HEAD_ASPECT, HEAD_ASPECT])`.
const HEAD_ASPECT: f64 = 0.1;
/// Spatial bins per axis and size bins of the scene-level descriptor.
pub const GLOBAL_BINS: usize = 7;
pub const GLOBAL_SIZE_BINS: [f64; 2] = [24.0, 48.0];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads_per_scene.0 > self.heads_per_scene.1 {
            return bad("heads_per_scene range is empty");
        }
        if self.jitters_per_head.0 == 0 || self.jitters_per_head.0 > self.jitters_per_head.1 {
            return bad("jitters_per_head range must be non-empty and start at 1 or more");
        }
        if self.background_per_scene.0 > self.background_per_scene.1 {
            return bad("background_per_scene range is empty");
        }
        if self.descriptor_dim < MIN_DESCRIPTOR_DIM {
            return bad("descriptor_dim must be at least 4");
        }
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return bad("ambiguity_rate must lie in [0, 1)");
        }
        if !(self.head_size.0 > 0.0 && self.head_size.0 <= self.head_size.1 && self.head_size.1 < 0.5) {
            return bad("head_size must satisfy 0 < min <= max < 0.5");
        }
        let lo = self.horizon_band - self.band_spread;
        let hi = self.horizon_band + self.band_spread;
        if !(self.band_spread >= 0.0 && lo >= 0.1 && hi <= 0.9) {
            return bad("horizon_band +/- band_spread must stay within [0.1, 0.9]");
        }
        if !(self.scale_gradient >= 0.0 && self.scale_gradient * ROW_DEVIATION < 0.5) {
            return bad("scale_gradient must lie in [0, 12.5)");
        }
        if !(self.global_noise >= 0.0 && self.difficult_size >= 0.0) {
            return bad("global_noise and difficult_size must be non-negative");
        }
        Ok(())
    }

    /// Upper bound on the ratio of [`BoundingBox::size`] between any two heads
    /// in one scene. The aspect jitter scales the mean side by at most
    /// `cosh(HEAD_ASPECT)`.
    pub fn max_size_ratio(&self) -> f64 {
        let g = self.scale_gradient * ROW_DEVIATION;
        ((1.0 + g) * (1.0 + SIZE_NOISE) * HEAD_ASPECT.cosh()) / ((1.0 - g) * (1.0 - SIZE_NOISE))
    }

    /// Length of the scene-level descriptor.
    pub fn global_dim() -> usize {
        GLOBAL_BINS * GLOBAL_BINS * (GLOBAL_SIZE_BINS.len() + 1)
    }
}

/// The three generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: Vec<SceneRecord>,
    pub validation: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Appearance cue of a candidate. Heads draw from `U[1-a, 2-a]`, background
/// from `U[0, 1]`, so exactly a fraction `a` of each class lands in the
/// shared interval `[1-a, 1]`. `u` is the uniform draw in `[0, 1)`.
pub fn appearance_cue(is_head: bool, u: f64, ambiguity_rate: f64) -> f64 {
    if is_head {
        1.0 - ambiguity_rate + u
    } else {
        u
    }
}

/// Box whose IoU with `truth` is `target` (to bisection precision), displaced
/// in a random direction after a random rescale.
fn jitter_box<R: Rng>(truth: &BoundingBox, target: f64, rng: &mut R) -> BoundingBox {
    loop {
        // keep max achievable IoU (at zero displacement) above the target
        let max_log = 0.5 * (1.0 / target).ln() * 0.8;
        let r = rng.random_range(-max_log..=max_log).exp();
        let aspect = rng.random_range(-0.08f64..0.08).exp();
        let (w, h) = (truth.w * r * aspect, truth.h * r / aspect);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = truth.center();
        let size = truth.size();
        let at = |d: f64| {
            BoundingBox::new(
                cx + d * size * angle.cos() - w / 2.0,
                cy + d * size * angle.sin() - h / 2.0,
                w,
                h,
            )
        };
        let candidate = at(0.0);
        if !aspect_filter(&candidate) || iou(&candidate, truth) < target {
            continue;
        }
        let (mut lo, mut hi) = (0.0, 3.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if iou(&at(mid), truth) >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return at(lo);
    }
}

fn descriptor<R: Rng>(b: &BoundingBox, cue: f64, width: f64, height: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    let (cx, cy) = b.center();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut d = vec![cue, cx / width, cy / height, (b.size() / height).ln()];
    d.extend((MIN_DESCRIPTOR_DIM..dim).map(|_| normal.sample(rng)));
    d
}

/// Coarse occupancy of the head layout on the padded canvas: per spatial bin
/// and size bin, the number of heads whose center falls there, plus noise and
/// a few spurious blobs.
fn scene_descriptor<R: Rng>(scene: &SceneRecord, cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let nsize = GLOBAL_SIZE_BINS.len() + 1;
    let mut g = vec![0.0; SynthConfig::global_dim()];
    let bin = |v: f64| ((v / CANVAS * GLOBAL_BINS as f64).floor().max(0.0) as usize).min(GLOBAL_BINS - 1);
    let t = scene.canvas_transform();
    for truth in &scene.ground_truth {
        let m = t.apply(&truth.bbox);
        let (cx, cy) = m.center();
        let sb = GLOBAL_SIZE_BINS.iter().filter(|&&edge| m.size() >= edge).count();
        g[(bin(cy) * GLOBAL_BINS + bin(cx)) * nsize + sb] += 1.0;
    }
    let clutter = rng.random_range(0..=cfg.global_clutter);
    for _ in 0..clutter {
        let k = rng.random_range(0..g.len());
        g[k] += rng.random_range(0.5..1.0);
    }
    if cfg.global_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.global_noise).unwrap();
        g.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    g
}

fn generate_scene<R: Rng>(scene_id: String, cfg: &SynthConfig, rng: &mut R) -> SceneRecord {
    let height = rng.random_range(360.0f64..540.0).round();
    let width = rng.random_range(480.0f64..720.0).round();
    let row = height * (cfg.horizon_band + rng.random_range(-cfg.band_spread..=cfg.band_spread));
    let base = height * rng.random_range(cfg.head_size.0..=cfg.head_size.1);
    let k = rng.random_range(cfg.heads_per_scene.0..=cfg.heads_per_scene.1);

    // Heads sit on one row, similar in scale, side by side without horizontal overlap.
    let mut heads: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let dy = rng.random_range(-ROW_DEVIATION..=ROW_DEVIATION) * height;
            let size = base
                * (1.0 + cfg.scale_gradient * dy / height)
                * (1.0 + rng.random_range(-SIZE_NOISE..=SIZE_NOISE));
            let aspect = rng.random_range(-HEAD_ASPECT..HEAD_ASPECT).exp();
            (size * aspect, size / aspect, row + dy)
        })
        .collect();
    while heads.iter().map(|h| h.0).sum::<f64>() > width * 0.95 {
        heads.pop();
    }
    let free = width - heads.iter().map(|h| h.0).sum::<f64>();
    let mut cuts: Vec<f64> = (0..heads.len()).map(|_| rng.random_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut ground_truth = Vec::with_capacity(heads.len());
    let mut used = 0.0;
    for (i, &(w, h, cy)) in heads.iter().enumerate() {
        let x = cuts[i] + used;
        used += w;
        let bbox = BoundingBox::new(x, cy - h / 2.0, w, h);
        ground_truth.push(GroundTruth {
            bbox,
            difficult: bbox.size() < cfg.difficult_size,
        });
    }

    let a = cfg.ambiguity_rate;
    let mut candidates = Vec::new();
    for truth in &ground_truth {
        // One shared draw per head: its well-localized candidates are
        // ambiguous together or not at all.
        let head_u: f64 = rng.random();
        let n = rng.random_range(cfg.jitters_per_head.0..=cfg.jitters_per_head.1);
        for j in 0..n {
            let target = if j == 0 {
                rng.random_range(0.6..=0.95)
            } else {
                rng.random_range(0.4..=0.95)
            };
            let bbox = jitter_box(&truth.bbox, target, rng);
            let o = ground_truth.iter().map(|g| iou(&g.bbox, &bbox)).fold(0.0, f64::max);
            let cue = if o > 0.5 {
                appearance_cue(true, head_u, a)
            } else {
                appearance_cue(false, rng.random(), a)
            };
            let descriptor = descriptor(&bbox, cue, width, height, cfg.descriptor_dim, rng);
            candidates.push(Candidate { bbox, descriptor });
        }
    }
    let n_bg = rng.random_range(cfg.background_per_scene.0..=cfg.background_per_scene.1);
    for _ in 0..n_bg {
        let mut bbox = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        for _ in 0..100 {
            let size = height * rng.random_range(cfg.head_size.0..=cfg.head_size.1);
            let aspect = rng.random_range(-0.15f64..0.15).exp();
            let (w, h) = (size * aspect, size / aspect);
            bbox = BoundingBox::new(
                rng.random_range(0.0..(width - w).max(1.0)),
                rng.random_range(0.0..(height - h).max(1.0)),
                w,
                h,
            );
            if ground_truth.iter().all(|g| iou(&g.bbox, &bbox) < 0.3) {
                break;
            }
        }
        let cue = appearance_cue(false, rng.random(), a);
        let descriptor = descriptor(&bbox, cue, width, height, cfg.descriptor_dim, rng);
        candidates.push(Candidate { bbox, descriptor });
    }
    // Interleave heads and background so file order carries no label signal.
    for i in (1..candidates.len()).rev() {
        let j = rng.random_range(0..=i);
        candidates.swap(i, j);
    }

    let mut scene = SceneRecord {
        scene_id,
        width,
        height,
        ground_truth,
        candidates,
        global: Vec::new(),
    };
    scene.global = scene_descriptor(&scene, cfg, rng);
    scene
}

/// Generates train, validation and test splits, deterministic in `rng_seed`.
/// Each split has its own generator stream so split sizes do not affect one
/// another.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSplits> {
    cfg.validate()?;
    let split = |name: &str, n: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| generate_scene(format!("{name}-{i:06}"), cfg, &mut rng))
            .collect::<Vec<_>>()
    };
    Ok(SyntheticSplits {
        train: split("train", cfg.train_scenes, 1),
        validation: split("val", cfg.validation_scenes, 2),
        test: split("test", cfg.test_scenes, 3),
    })
}

/// Writes `<dir>/{train,val,test}.jsonl`.
pub fn save_splits(dir: &Path, splits: &SyntheticSplits) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_scenes(&dir.join("train.jsonl"), &splits.train)?;
    save_scenes(&dir.join("val.jsonl"), &splits.validation)?;
    save_scenes(&dir.join("test.jsonl"), &splits.test)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            train_scenes: 20,
            validation_scenes: 5,
            test_scenes: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_scenes("").unwrap().is_empty());
    }

    #[test]
    fn one_record_round_trips() {
        let splits = generate_synthetic(&small_cfg()).unwrap();
        let s = &splits.train[0];
        let parsed = parse_scenes(&scene_to_line(s)).unwrap();
        assert_eq!(parsed, vec![s.clone()]);
    }

    #[test]
    fn zero_width_candidate_names_the_scene() {
        let line = r#"{"scene_id":"bad-1","width":100,"height":100,"ground_truth":[],"candidates":[[0,0,0,10,1.0]]}"#;
        match parse_scenes(line) {
            Err(Error::InvalidScene { scene_id, .. }) => assert_eq!(scene_id, "bad-1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"scene_id":"a","width":100,"height":100,"ground_truth":[],"candidates":[]}"#;
        let text = format!("{good}\n{{not json\n");
        assert!(matches!(parse_scenes(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let good = r#"{"scene_id":"a","width":100,"height":100,"ground_truth":[],"candidates":[]}"#;
        let text = format!("{good}\n{good}\n");
        assert!(matches!(parse_scenes(&text), Err(Error::InvalidScene { .. })));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg();
        other.rng_seed += 1;
        assert_ne!(generate_synthetic(&other).unwrap().train, a.train);
    }

    #[test]
    fn generated_scenes_are_valid() {
        let cfg = small_cfg();
        let s = generate_synthetic(&cfg).unwrap();
        for split in [&s.train, &s.validation, &s.test] {
            validate_dataset(split).unwrap();
            for scene in split {
                assert_eq!(scene.global.len(), SynthConfig::global_dim());
                assert!(scene.candidates.iter().all(|c| c.descriptor.len() == cfg.descriptor_dim));
            }
        }
    }

    #[test]
    fn jitter_hits_target_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = BoundingBox::new(100.0, 80.0, 40.0, 44.0);
        for _ in 0..200 {
            let target = rng.random_range(0.4..0.95);
            let b = jitter_box(&truth, target, &mut rng);
            assert!((iou(&b, &truth) - target).abs() < 1e-6);
            assert!(aspect_filter(&b));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = small_cfg();
        c.ambiguity_rate = 1.0;
        assert!(generate_synthetic(&c).is_err());
        let mut c = small_cfg();
        c.heads_per_scene = (3, 2);
        assert!(c.validate().is_err());
    }
}
