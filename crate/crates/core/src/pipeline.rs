//! Detection modes: per-scene model outputs, their combination into final
//! candidate scores, final suppression, and a fast AP evaluator used by
//! calibration.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{SceneDetections, SceneRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, pr_curve, Outcome, MATCH_IOU};
use crate::geom::{iou, nms_with_overlaps, overlap_matrix, BoundingBox, GridSpec, NMS_THRESHOLD};
use crate::globalmodel::{
    candidate_cell_scores, combine_local_pairwise, combine_with_global, filter_candidates, restrict_candidates, CombineParams,
    GlobalModel,
};
use crate::inference::{candidate_scores, InferenceMethod};
use crate::local::LocalModel;
use crate::structloss::{pairwise_forward, prepare_scene, PairwiseModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectMode {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "local+global")]
    LocalGlobal,
    #[serde(rename = "local+pairwise")]
    LocalPairwise,
    #[serde(rename = "full")]
    Full,
}

impl DetectMode {
    pub const ALL: [DetectMode; 4] = [
        DetectMode::Local,
        DetectMode::LocalGlobal,
        DetectMode::LocalPairwise,
        DetectMode::Full,
    ];

    pub fn uses_pairwise(self) -> bool {
        matches!(self, DetectMode::LocalPairwise | DetectMode::Full)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, DetectMode::LocalGlobal | DetectMode::Full)
    }
}

impl fmt::Display for DetectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectMode::Local => "local",
            DetectMode::LocalGlobal => "local+global",
            DetectMode::LocalPairwise => "local+pairwise",
            DetectMode::Full => "full",
        })
    }
}

impl FromStr for DetectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (local, local+global, local+pairwise, full)")))
    }
}

/// The trained models available to a detection run.
#[derive(Debug, Clone)]
pub struct Models {
    pub local: LocalModel,
    pub global: Option<GlobalModel>,
    pub pairwise: Option<PairwiseModelParams>,
}

impl Models {
    /// Fails when `mode` needs a model that is absent or dimensionally
    /// incompatible with the local model.
    pub fn check(&self, mode: DetectMode) -> Result<()> {
        if mode.uses_pairwise() {
            let p = self
                .pairwise
                .as_ref()
                .ok_or_else(|| Error::Model(format!("mode {mode} needs a pairwise model")))?;
            if p.input.dim() != self.local.descriptor_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.local.descriptor_dim(),
                    actual: p.input.dim(),
                    context: "pairwise model descriptor",
                });
            }
        }
        if mode.uses_global() && self.global.is_none() {
            return Err(Error::Model(format!("mode {mode} needs a global model")));
        }
        Ok(())
    }
}

/// Raw per-candidate outputs of each model on one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutputs {
    pub local: Vec<f64>,
    /// Joint-model score for the selected candidates, `None` elsewhere.
    pub pairwise: Vec<Option<f64>>,
    /// Score of each candidate's matched grid cell (empty without a global model).
    pub global: Vec<f64>,
}

fn check_descriptors(scene: &SceneRecord, dim: usize) -> Result<()> {
    if let Some(c) = scene.candidates.iter().find(|c| c.descriptor.len() != dim) {
        return Err(Error::InvalidScene {
            scene_id: scene.scene_id.clone(),
            message: format!("descriptor dimension {} but the model expects {dim}", c.descriptor.len()),
        });
    }
    Ok(())
}

/// Runs the models `mode` needs on one scene.
pub fn score_scene(
    scene: &SceneRecord,
    models: &Models,
    grid: &GridSpec,
    mode: DetectMode,
    method: InferenceMethod,
) -> Result<SceneOutputs> {
    check_descriptors(scene, models.local.descriptor_dim())?;
    let local = models.local.scene_scores(scene)?;
    let mut pairwise = vec![None; local.len()];
    if mode.uses_pairwise() {
        let params = models.pairwise.as_ref().ok_or_else(|| Error::Model("pairwise model missing".into()))?;
        let prepared = prepare_scene(scene, &local, params)?;
        let (pots, _) = pairwise_forward(params, &prepared.graph, &prepared.inputs, None)?;
        let scores = candidate_scores(&prepared.graph, &pots, method)?;
        for (&c, s) in prepared.graph.nodes.iter().zip(scores.scores) {
            pairwise[c] = Some(s);
        }
    }
    let global = if mode.uses_global() {
        let g = models.global.as_ref().ok_or_else(|| Error::Model("global model missing".into()))?;
        candidate_cell_scores(scene, grid, &g.cell_scores(scene).map_err(|e| match e {
            Error::DimensionMismatch { expected, actual, .. } => Error::InvalidScene {
                scene_id: scene.scene_id.clone(),
                message: format!("scene descriptor dimension {actual} but the global model expects {expected}"),
            },
            e => e,
        })?)
    } else {
        Vec::new()
    };
    Ok(SceneOutputs { local, pairwise, global })
}

/// Scores every scene; per-scene work runs in parallel, results keep scene order.
pub fn score_scenes(
    scenes: &[SceneRecord],
    models: &Models,
    grid: &GridSpec,
    mode: DetectMode,
    method: InferenceMethod,
) -> Result<Vec<SceneOutputs>> {
    models.check(mode)?;
    scenes
        .par_iter()
        .map(|s| score_scene(s, models, grid, mode, method))
        .collect()
}

/// Final candidate scores under `mode`.
pub fn final_scores(out: &SceneOutputs, mode: DetectMode, p: &CombineParams) -> Vec<f64> {
    (0..out.local.len())
        .map(|i| {
            let s_lp = if mode.uses_pairwise() {
                combine_local_pairwise(out.local[i], out.pairwise[i], p)
            } else {
                out.local[i]
            };
            if mode.uses_global() {
                combine_with_global(s_lp, out.global[i], p)
            } else {
                s_lp
            }
        })
        .collect()
}

/// Candidates surviving suppression at 0.3 on the final scores.
pub fn scene_detections(scene: &SceneRecord, scores: &[f64]) -> Vec<(BoundingBox, f64)> {
    let scored: Vec<(BoundingBox, f64)> = scene.candidates.iter().map(|c| c.bbox).zip(scores.iter().copied()).collect();
    crate::geom::nms(&scored, NMS_THRESHOLD)
        .into_iter()
        .map(|i| scored[i])
        .collect()
}

/// Detections of every scene from precomputed outputs.
pub fn detections_from_outputs(
    scenes: &[SceneRecord],
    outputs: &[SceneOutputs],
    mode: DetectMode,
    p: &CombineParams,
) -> Vec<SceneDetections> {
    scenes
        .iter()
        .zip(outputs)
        .map(|(s, o)| SceneDetections {
            scene_id: s.scene_id.clone(),
            detections: scene_detections(s, &final_scores(o, mode, p)),
        })
        .collect()
}

pub fn detect(
    scenes: &[SceneRecord],
    models: &Models,
    grid: &GridSpec,
    mode: DetectMode,
    p: &CombineParams,
    method: InferenceMethod,
) -> Result<Vec<SceneDetections>> {
    p.validate()?;
    let outputs = score_scenes(scenes, models, grid, mode, method)?;
    Ok(detections_from_outputs(scenes, &outputs, mode, p))
}

struct EvalScene {
    boxes: Vec<BoundingBox>,
    overlaps: Vec<Vec<bool>>,
    /// IoU of every candidate with every ground-truth box.
    gt_iou: Vec<Vec<f64>>,
    difficult: Vec<bool>,
    id_rank: usize,
}

/// AP of final candidate scores, with the same suppression, matching and
/// global ranking as writing detections and evaluating them, but with the
/// geometry precomputed once. Built for calibration's many evaluations.
pub struct ApEvaluator {
    scenes: Vec<EvalScene>,
    n_positives: usize,
}

impl ApEvaluator {
    pub fn new(scenes: &[SceneRecord]) -> Result<Self> {
        let mut ids: Vec<(&str, usize)> = scenes.iter().enumerate().map(|(k, s)| (s.scene_id.as_str(), k)).collect();
        ids.sort();
        let mut rank = vec![0; scenes.len()];
        for (r, (_, k)) in ids.into_iter().enumerate() {
            rank[k] = r;
        }
        let n_positives = scenes
            .iter()
            .flat_map(|s| &s.ground_truth)
            .filter(|g| !g.difficult)
            .count();
        if n_positives == 0 {
            return Err(Error::NoPositives);
        }
        let scenes = scenes
            .iter()
            .zip(rank)
            .map(|(s, id_rank)| {
                let boxes = s.candidate_boxes();
                EvalScene {
                    overlaps: overlap_matrix(&boxes, NMS_THRESHOLD),
                    gt_iou: boxes
                        .iter()
                        .map(|b| s.ground_truth.iter().map(|g| iou(b, &g.bbox)).collect())
                        .collect(),
                    difficult: s.ground_truth.iter().map(|g| g.difficult).collect(),
                    boxes,
                    id_rank,
                }
            })
            .collect();
        Ok(Self { scenes, n_positives })
    }

    /// AP of per-scene final scores (one vector per scene, candidate order).
    pub fn ap(&self, scores: &[Vec<f64>]) -> f64 {
        let mut ranked: Vec<(f64, usize, usize, Outcome)> = Vec::new();
        for (k, (sc, s)) in self.scenes.iter().zip(scores).enumerate() {
            let mut kept = nms_with_overlaps(s, &sc.overlaps);
            kept.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(sc.boxes[a].lex_cmp(&sc.boxes[b])));
            let mut matched = vec![false; sc.difficult.len()];
            for i in kept {
                let mut best: Option<(usize, f64)> = None;
                for (g, &o) in sc.gt_iou[i].iter().enumerate() {
                    if !sc.difficult[g] && matched[g] {
                        continue;
                    }
                    if o > MATCH_IOU && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((g, o));
                    }
                }
                let outcome = match best {
                    Some((g, _)) if sc.difficult[g] => Outcome::Ignored,
                    Some((g, _)) => {
                        matched[g] = true;
                        Outcome::TruePositive
                    }
                    None => Outcome::FalsePositive,
                };
                ranked.push((s[i], k, i, outcome));
            }
        }
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(self.scenes[a.1].boxes[a.2].lex_cmp(&self.scenes[b.1].boxes[b.2]))
                .then(self.scenes[a.1].id_rank.cmp(&self.scenes[b.1].id_rank))
        });
        let pairs: Vec<(f64, Outcome)> = ranked.iter().map(|r| (r.0, r.3)).collect();
        pr_curve(&pairs, self.n_positives).map(|c| c.ap).unwrap_or(0.0)
    }

    /// AP of `mode` under `p`.
    pub fn ap_of(&self, outputs: &[SceneOutputs], mode: DetectMode, p: &CombineParams) -> f64 {
        let scores: Vec<Vec<f64>> = outputs.iter().map(|o| final_scores(o, mode, p)).collect();
        self.ap(&scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub keep_fraction: f64,
    /// Candidates left across all scenes.
    pub candidates: usize,
    pub ap: f64,
}

/// For each fraction: keep the candidates whose matched cells score best,
/// then detect with the local model and evaluate.
pub fn filter_bench(
    scenes: &[SceneRecord],
    models: &Models,
    grid: &GridSpec,
    fractions: &[f64],
) -> Result<Vec<FilterRow>> {
    models.check(DetectMode::LocalGlobal)?;
    let global = models.global.as_ref().expect("checked");
    let cells: Vec<Vec<f64>> = scenes.par_iter().map(|s| global.cell_scores(s)).collect::<Result<_>>()?;
    fractions
        .iter()
        .map(|&f| {
            let kept: Vec<SceneRecord> = scenes
                .iter()
                .zip(&cells)
                .map(|(s, c)| Ok(restrict_candidates(s, &filter_candidates(s, grid, c, f)?)))
                .collect::<Result<_>>()?;
            let dets = detect(&kept, models, grid, DetectMode::Local, &CombineParams::default(), InferenceMethod::Cascade)?;
            Ok(FilterRow {
                keep_fraction: f,
                candidates: kept.iter().map(|s| s.candidates.len()).sum(),
                ap: evaluate(&kept, &dets)?.curve.ap,
            })
        })
        .collect()
}

pub fn filter_csv(rows: &[FilterRow]) -> String {
    let mut s = String::from("keep_fraction,candidates,ap\n");
    for r in rows {
        s.push_str(&format!("{:.2},{},{:.6}\n", r.keep_fraction, r.candidates, r.ap));
    }
    s
}

/// Grid of combination parameters searched by calibration.
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

pub fn beta_grid() -> impl Iterator<Item = f64> {
    (0..=200).map(|j| (j as f64 - 100.0) / 10.0)
}

pub fn gamma_grid() -> impl Iterator<Item = f64> {
    alpha_grid()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CombineParams,
    pub ap: f64,
    pub evaluations: usize,
}

/// Grid search for the combination parameters of `mode` maximizing validation
/// AP. Only strict improvements replace the incumbent, and the grid is walked
/// in increasing order, so ties keep the lexicographically smallest setting.
/// In full mode `alpha` and `beta` are fixed first with `gamma = 1`, then
/// `gamma` is searched.
pub fn calibrate(scenes: &[SceneRecord], outputs: &[SceneOutputs], mode: DetectMode) -> Result<Calibration> {
    if scenes.len() != outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: scenes.len(),
            actual: outputs.len(),
            context: "calibration outputs",
        });
    }
    let ev = ApEvaluator::new(scenes)?;
    let mut evaluations = 0;
    let mut search = |mode: DetectMode, grid: &mut dyn Iterator<Item = CombineParams>| {
        let grid: Vec<CombineParams> = grid.collect();
        let aps: Vec<f64> = grid.par_iter().map(|p| ev.ap_of(outputs, mode, p)).collect();
        evaluations += grid.len();
        let mut best: Option<(CombineParams, f64)> = None;
        for (p, ap) in grid.into_iter().zip(aps) {
            if best.is_none_or(|(_, b)| ap > b) {
                best = Some((p, ap));
            }
        }
        best.expect("non-empty grid")
    };
    let (params, ap) = match mode {
        DetectMode::Local => {
            let p = CombineParams::default();
            (p, search(mode, &mut std::iter::once(p)).1)
        }
        DetectMode::LocalGlobal => search(
            mode,
            &mut gamma_grid().map(|gamma| CombineParams { gamma, ..CombineParams::default() }),
        ),
        DetectMode::LocalPairwise | DetectMode::Full => {
            let mut lp = alpha_grid().flat_map(|alpha| beta_grid().map(move |beta| CombineParams { alpha, beta, gamma: 1.0 }));
            let (p, ap) = search(DetectMode::LocalPairwise, &mut lp);
            if mode == DetectMode::Full {
                search(mode, &mut gamma_grid().map(|gamma| CombineParams { gamma, ..p }))
            } else {
                (p, ap)
            }
        }
    };
    Ok(Calibration { params, ap, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, quantize_score, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mode_names_round_trip() {
        for m in DetectMode::ALL {
            assert_eq!(m.to_string().parse::<DetectMode>().unwrap(), m);
        }
        assert!("bogus".parse::<DetectMode>().is_err());
    }

    #[test]
    fn fast_ap_equals_file_evaluation() {
        let data = generate_synthetic(&SynthConfig {
            train_scenes: 0,
            validation_scenes: 60,
            test_scenes: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let scenes = data.validation;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ev = ApEvaluator::new(&scenes).unwrap();
        for _ in 0..5 {
            // quantized so that ties occur and file rounding changes nothing
            let scores: Vec<Vec<f64>> = scenes
                .iter()
                .map(|s| {
                    let o = s.candidate_overlaps();
                    o.iter().map(|&v| quantize_score(v + rng.random_range(-0.3..0.3))).collect()
                })
                .collect();
            let dets: Vec<SceneDetections> = scenes
                .iter()
                .zip(&scores)
                .map(|(s, sc)| SceneDetections {
                    scene_id: s.scene_id.clone(),
                    detections: scene_detections(s, sc),
                })
                .collect();
            let reference = evaluate(&scenes, &dets).unwrap().curve.ap;
            assert_eq!(ev.ap(&scores), reference);
        }
    }

    fn one_scene(boxes: &[(f64, f64)], truth: &[(f64, f64)]) -> SceneRecord {
        use crate::dataio::{Candidate, GroundTruth};
        SceneRecord {
            scene_id: "s".into(),
            width: 400.0,
            height: 300.0,
            ground_truth: truth
                .iter()
                .map(|&(x, y)| GroundTruth {
                    bbox: BoundingBox::new(x, y, 20.0, 20.0),
                    difficult: false,
                })
                .collect(),
            candidates: boxes
                .iter()
                .map(|&(x, y)| Candidate {
                    bbox: BoundingBox::new(x, y, 20.0, 20.0),
                    descriptor: vec![0.0; 4],
                })
                .collect(),
            global: Vec::new(),
        }
    }

    #[test]
    fn identical_pairwise_scores_calibrate_to_alpha_zero() {
        let scene = one_scene(&[(0.0, 0.0), (100.0, 0.0), (200.0, 0.0)], &[(0.0, 0.0), (200.0, 0.0)]);
        let local = vec![2.0, 1.0, 0.5];
        let out = SceneOutputs {
            pairwise: local.iter().map(|&s| Some(s)).collect(),
            local,
            global: Vec::new(),
        };
        let c = calibrate(&[scene], &[out], DetectMode::LocalPairwise).unwrap();
        assert_eq!(c.params.alpha, 0.0);
        assert_eq!(c.params.beta, -10.0);
        assert_eq!(c.evaluations, 101 * 201);
    }

    #[test]
    fn single_candidate_returns_smallest_setting() {
        let scene = one_scene(&[(0.0, 0.0)], &[(0.0, 0.0)]);
        let out = SceneOutputs {
            local: vec![0.3],
            pairwise: vec![Some(-1.0)],
            global: vec![0.7],
        };
        let c = calibrate(&[scene], &[out], DetectMode::Full).unwrap();
        assert_eq!(c.params, CombineParams { alpha: 0.0, beta: -10.0, gamma: 0.0 });
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn informative_pairwise_scores_get_weight() {
        // the local model ranks two false positives first, the joint model fixes it
        let scene = one_scene(&[(0.0, 0.0), (100.0, 0.0), (200.0, 0.0), (300.0, 0.0)], &[(0.0, 0.0), (200.0, 0.0)]);
        let out = SceneOutputs {
            local: vec![1.0, 2.0, 1.1, 1.5],
            pairwise: vec![Some(3.0), Some(-3.0), Some(3.0), Some(-3.0)],
            global: Vec::new(),
        };
        let c = calibrate(&[scene], &[out], DetectMode::LocalPairwise).unwrap();
        assert!(c.params.alpha < 0.5, "{:?}", c.params);
        assert_eq!(c.ap, 1.0);
    }
}
