//! Whole-image grid scorer, score combination, calibration and
//! candidate filtering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::SceneRecord;
use crate::error::{Error, Result};
use crate::geom::{iou, match_to_cell, rank_by_score, GridSpec, NUM_CELLS};
use crate::nets::{sgd_step, DenseNet, Mode, ModelArchive, SgdConfig, SgdState, Standardizer, TracePoint};
use crate::structloss::pair_log_loss;

/// A cell is positive when it overlaps some ground-truth box by more than this.
pub const CELL_IOU: f64 = 0.3;

/// Cell labels: `true` iff the cell's IoU with some ground-truth box
/// (mapped onto the canvas) exceeds 0.3.
pub fn label_cells(scene: &SceneRecord, grid: &GridSpec) -> Vec<bool> {
    let t = scene.canvas_transform();
    let mapped: Vec<_> = scene.ground_truth.iter().map(|g| t.apply(&g.bbox)).collect();
    grid.cells
        .iter()
        .map(|c| mapped.iter().any(|b| iou(c, b) > CELL_IOU))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalTrainConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub sgd: SgdConfig,
}

impl Default for GlobalTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.5,
            sgd: SgdConfig::global(),
        }
    }
}

/// Two outputs per cell (background, head) from the scene descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub net: DenseNet,
    pub input: Standardizer,
}

impl GlobalModel {
    pub fn descriptor_dim(&self) -> usize {
        self.input.dim()
    }

    /// Per-cell head output minus background output, in grid order.
    pub fn cell_scores(&self, scene: &SceneRecord) -> Result<Vec<f64>> {
        if scene.global.len() != self.input.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input.dim(),
                actual: scene.global.len(),
                context: "scene descriptor",
            });
        }
        let out = self.net.predict(&self.input.apply(&scene.global)?)?;
        Ok(out.chunks_exact(2).map(|c| c[1] - c[0]).collect())
    }

    pub fn to_archive(&self) -> ModelArchive {
        ModelArchive::new("global")
            .with_net("net", self.net.clone())
            .with_array("input", self.input.to_flat())
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        if a.kind != "global" {
            return Err(Error::Model(format!("expected a global model, found '{}'", a.kind)));
        }
        let m = Self {
            net: a.net("net")?.clone(),
            input: Standardizer::from_flat(a.array("input")?)?,
        };
        if m.net.input_dim() != m.input.dim() || m.net.output_dim() != 2 * NUM_CELLS {
            return Err(Error::Model("global model dimensions are inconsistent".into()));
        }
        Ok(m)
    }
}

/// Sum over cells of the two-output log-loss, averaged over batches of
/// scenes.
pub fn train_global(scenes: &[SceneRecord], grid: &GridSpec, cfg: &GlobalTrainConfig) -> Result<(GlobalModel, Vec<TracePoint>)> {
    cfg.sgd.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("global training scenes"));
    }
    if let Some(s) = scenes.iter().find(|s| s.global.is_empty()) {
        return Err(Error::InvalidScene {
            scene_id: s.scene_id.clone(),
            message: "scene descriptor missing".into(),
        });
    }
    let input = Standardizer::fit(scenes.iter().map(|s| s.global.as_slice()))?;
    let xs: Vec<Vec<f64>> = scenes.iter().map(|s| input.apply(&s.global)).collect::<Result<_>>()?;
    let ys: Vec<Vec<bool>> = scenes.iter().map(|s| label_cells(s, grid)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.rng_seed);
    let mut net = DenseNet::mlp(&[input.dim(), cfg.hidden, 2 * grid.len()], cfg.dropout, &mut rng)?;
    let mut state = SgdState::new(net.num_params());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut trace = Vec::new();
    let mut grads = vec![0.0; net.num_params()];
    let mut dout = vec![0.0; 2 * grid.len()];
    for epoch in 0..cfg.sgd.epochs {
        let lr = cfg.sgd.rate_at_epoch(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.sgd.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &k in batch {
                let (out, tape) = net.forward(&xs[k], Mode::Train(&mut rng))?;
                for (c, &y) in ys[k].iter().enumerate() {
                    let (l, d) = pair_log_loss(&out[2 * c..2 * c + 2], y);
                    loss += l * scale;
                    dout[2 * c] = d[0] * scale;
                    dout[2 * c + 1] = d[1] * scale;
                }
                net.backward_into(&tape, &dout, &mut grads)?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "global training loss",
                    location: format!("step {}", trace.len()),
                });
            }
            let mut p = net.params().to_vec();
            sgd_step(&mut p, &grads, &mut state, lr, cfg.sgd.momentum, cfg.sgd.weight_decay)?;
            net.set_params(&p)?;
            trace.push(TracePoint {
                step: trace.len(),
                loss,
                learning_rate: lr,
            });
        }
    }
    Ok((GlobalModel { net, input }, trace))
}

/// Affine score combination weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombineParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CombineParams {
    /// Local scores passed through unchanged.
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 1.0,
        }
    }
}

impl CombineParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(-10.0..=10.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "combination parameters out of range: alpha {} beta {} gamma {}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// `alpha * s_l + (1 - alpha) * s_p + beta`, or `s_l` without a joint-model score.
pub fn combine_local_pairwise(s_l: f64, s_p: Option<f64>, p: &CombineParams) -> f64 {
    match s_p {
        Some(s_p) => p.alpha * s_l + (1.0 - p.alpha) * s_p + p.beta,
        None => s_l,
    }
}

/// `gamma * s_lp + (1 - gamma) * s_g`.
pub fn combine_with_global(s_lp: f64, s_g: f64, p: &CombineParams) -> f64 {
    p.gamma * s_lp + (1.0 - p.gamma) * s_g
}

/// Score of the grid cell each candidate is matched to.
pub fn candidate_cell_scores(scene: &SceneRecord, grid: &GridSpec, cell_scores: &[f64]) -> Vec<f64> {
    let t = scene.canvas_transform();
    scene
        .candidates
        .iter()
        .map(|c| cell_scores[match_to_cell(&c.bbox, grid, &t)])
        .collect()
}

/// `ceil(fraction * n)`, robust to the representation error of `fraction`.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).min(n)
}

/// Indices (ascending) of the top `ceil(keep_fraction * n)` candidates by the
/// score of their matched cell; ties go to the smaller index.
pub fn filter_candidates(scene: &SceneRecord, grid: &GridSpec, cell_scores: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let scores = candidate_cell_scores(scene, grid, cell_scores);
    let mut kept = rank_by_score(&scores);
    kept.truncate(keep_count(keep_fraction, scores.len()));
    kept.sort_unstable();
    Ok(kept)
}

/// The scene restricted to the given candidate indices.
pub fn restrict_candidates(scene: &SceneRecord, keep: &[usize]) -> SceneRecord {
    SceneRecord {
        candidates: keep.iter().map(|&i| scene.candidates[i].clone()).collect(),
        ..scene.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Candidate, GroundTruth, SynthConfig};
    use crate::geom::{build_grid, BoundingBox};

    fn scene_with(gt: Vec<BoundingBox>) -> SceneRecord {
        SceneRecord {
            scene_id: "s".into(),
            width: 224.0,
            height: 224.0,
            ground_truth: gt
                .into_iter()
                .map(|bbox| GroundTruth { bbox, difficult: false })
                .collect(),
            candidates: vec![],
            global: vec![],
        }
    }

    #[test]
    fn cell_labels() {
        let grid = build_grid();
        assert!(label_cells(&scene_with(vec![]), &grid).iter().all(|l| !l));
        let labels = label_cells(&scene_with(vec![grid.cells[5]]), &grid);
        assert!(labels[5]);
    }

    #[test]
    fn cell_labels_match_brute_force_scan() {
        let grid = build_grid();
        let data = generate_synthetic(&SynthConfig {
            train_scenes: 30,
            validation_scenes: 0,
            test_scenes: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        for s in &data.train {
            let t = s.canvas_transform();
            let mut expected = vec![false; grid.len()];
            for c in 0..grid.len() {
                for g in &s.ground_truth {
                    let m = t.apply(&g.bbox);
                    let ix = (grid.cells[c].right().min(m.right()) - grid.cells[c].x.max(m.x)).max(0.0);
                    let iy = (grid.cells[c].bottom().min(m.bottom()) - grid.cells[c].y.max(m.y)).max(0.0);
                    let inter = ix * iy;
                    let union = grid.cells[c].area() + m.area() - inter;
                    if inter / union > 0.3 {
                        expected[c] = true;
                    }
                }
            }
            assert_eq!(label_cells(s, &grid), expected);
        }
    }

    #[test]
    fn combine_examples() {
        let p = CombineParams {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.25,
        };
        assert_eq!(combine_local_pairwise(2.0, Some(4.0), &p), 4.0);
        assert_eq!(combine_local_pairwise(2.0, None, &p), 2.0);
        assert_eq!(combine_local_pairwise(2.0, Some(9.0), &CombineParams::default()), 2.0);
        assert_eq!(combine_with_global(0.0, 4.0, &p), 3.0);
        let g1 = CombineParams { gamma: 1.0, ..p };
        assert_eq!(combine_with_global(7.0, 4.0, &g1), 7.0);
        let g0 = CombineParams { gamma: 0.0, ..p };
        assert_eq!(combine_with_global(7.0, 4.0, &g0), 4.0);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(0.5, 4), 2);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(0.3, 11), 4);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.01, 7), 1);
    }

    #[test]
    fn filtering_examples() {
        let grid = build_grid();
        let mut s = scene_with(vec![]);
        s.candidates = (0..4)
            .map(|i| Candidate {
                bbox: BoundingBox::new(i as f64 * 56.0, 0.0, 56.0, 56.0),
                descriptor: vec![0.0],
            })
            .collect();
        let scores: Vec<f64> = (0..NUM_CELLS).map(|c| c as f64 * 0.01).collect();
        assert_eq!(filter_candidates(&s, &grid, &scores, 1.0).unwrap(), vec![0, 1, 2, 3]);
        // cell scores grow with the cell index, so the right-most boxes win
        assert_eq!(filter_candidates(&s, &grid, &scores, 0.5).unwrap(), vec![2, 3]);
        assert!(filter_candidates(&s, &grid, &scores, 0.0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let grid = build_grid();
        let data = generate_synthetic(&SynthConfig {
            train_scenes: 12,
            validation_scenes: 0,
            test_scenes: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = GlobalTrainConfig::default();
        cfg.sgd.learning_rate = 0.0;
        cfg.sgd.epochs = 1;
        let (m, trace) = train_global(&data.train, &grid, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.rng_seed);
        let init = DenseNet::mlp(&[m.descriptor_dim(), cfg.hidden, 2 * NUM_CELLS], cfg.dropout, &mut rng).unwrap();
        assert_eq!(m.net, init);
        // untrained outputs are near zero, so each cell costs about 2 ln 2
        let per_cell = trace[0].loss / NUM_CELLS as f64;
        assert!((per_cell - 2.0 * std::f64::consts::LN_2).abs() < 0.05, "{per_cell}");
    }

    #[test]
    fn all_background_training_scores_every_cell_negative() {
        let grid = build_grid();
        let mut cfg = SynthConfig {
            train_scenes: 40,
            validation_scenes: 10,
            test_scenes: 0,
            ..SynthConfig::default()
        };
        cfg.heads_per_scene = (0, 0);
        let data = generate_synthetic(&cfg).unwrap();
        let mut tc = GlobalTrainConfig::default();
        tc.sgd.epochs = 5;
        tc.sgd.learning_rate = 0.01;
        let (m, _) = train_global(&data.train, &grid, &tc).unwrap();
        for s in &data.validation {
            assert!(m.cell_scores(s).unwrap().iter().all(|v| *v < 0.0));
        }
    }
}
