//! Self-check suites: gradient fidelity, inference agreement against
//! enumeration, and evaluation fixtures with hand-computed answers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{generate_synthetic, GroundTruth, SceneDetections, SceneRecord, SynthConfig, CUE};
use crate::error::{Error, Result};
use crate::evalkit::{eq_pr_threshold, evaluate, match_detections, pr_curve, Outcome};
use crate::geom::BoundingBox;
use crate::graph::{edge_features, fit_kmeans, oriented_pairs, select_candidates, Edge, SceneGraph};
use crate::inference::{candidate_scores, qpbo_labels, InferenceMethod, Labeling, PartialLabel, Potentials};
use crate::nets::{check_gradient, grad_check, Activation, DenseNet, FdConfig, LayerSpec, Standardizer};
use crate::structloss::{
    is_smooth_point, pair_log_loss, prepare_scene, scene_loss, surrogate_loss, tie_margin, LossSpec, PairwiseModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradcheck,
    InferenceOracle,
    EvalFixtures,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradcheck, Suite::InferenceOracle, Suite::EvalFixtures];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::InferenceOracle => "inference-oracle",
            Suite::EvalFixtures => "eval-fixtures",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}' (gradcheck, inference-oracle, eval-fixtures)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {}/{}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.detail
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub inference_instances: usize,
    pub inference_max_nodes: usize,
    pub surrogate_instances: usize,
    pub surrogate_nodes: usize,
    pub end_to_end_scenes: usize,
    pub tolerance: f64,
    /// Adds 1 to this entry of every analytic end-to-end parameter gradient,
    /// to demonstrate that the check catches a wrong gradient.
    pub corrupt_parameter: Option<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            inference_instances: 1000,
            inference_max_nodes: 16,
            surrogate_instances: 100,
            surrogate_nodes: 8,
            end_to_end_scenes: 50,
            tolerance: 1e-4,
            corrupt_parameter: None,
        }
    }
}

/// Smallest tie margin accepted for a finite-difference point; a step of
/// 1e-5 moves every labeling score by far less.
const TIE: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 10_000;

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => vec![
            local_net_check(cfg)?,
            surrogate_check(cfg)?,
            end_to_end_check(cfg)?,
        ],
        Suite::InferenceOracle => inference_checks(cfg)?,
        Suite::EvalFixtures => eval_checks()?,
    };
    Ok(SuiteReport { suite, checks })
}

fn fd(cfg: &VerifyConfig) -> FdConfig {
    FdConfig {
        tolerance: cfg.tolerance,
        ..FdConfig::default()
    }
}

/// Random graph on `n` nodes: each pair joined with probability `density`.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, density: f64, clusters: usize) -> SceneGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(density) {
                edges.push(Edge {
                    i,
                    j,
                    cluster: rng.random_range(0..clusters),
                });
            }
        }
    }
    SceneGraph {
        nodes: (0..n).collect(),
        edges,
        num_clusters: clusters,
        labels: None,
    }
}

/// Potentials drawn uniformly in [-5, 5].
pub fn random_potentials<R: Rng + ?Sized>(rng: &mut R, g: &SceneGraph) -> Potentials {
    Potentials {
        unary: (0..g.len()).map(|_| rng.random_range(-5.0..=5.0)).collect(),
        pairwise: (0..g.edges.len()).map(|_| rng.random_range(-5.0..=5.0)).collect(),
    }
}

fn local_net_check(cfg: &VerifyConfig) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..MAX_ATTEMPTS {
        if checked == 10 {
            break;
        }
        let net = DenseNet::mlp(&[6, 12, 2], 0.0, &mut rng)?;
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = rng.random_bool(0.5);
        let r = match grad_check(&net, |o| {
            let (l, d) = pair_log_loss(o, label);
            (l, d.to_vec())
        }, &x, fd(cfg)) {
            Ok(r) => r,
            Err(Error::PersistentKink(_)) => continue,
            Err(e) => return Err(e),
        };
        checked += 1;
        if !r.passed {
            return Ok(Check::new("classifier-net", false, r.describe(|i| format!("param[{i}]"))));
        }
        worst = worst.max(r.max_rel_error);
    }
    if checked < 10 {
        return Err(Error::PersistentKink(MAX_ATTEMPTS));
    }
    Ok(Check::new("classifier-net", true, format!("10 networks, max rel error {worst:.3e}")))
}

fn surrogate_check(cfg: &VerifyConfig) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = cfg.surrogate_nodes;
    let (mut checked, mut attempts, mut worst) = (0, 0, 0.0f64);
    while checked < cfg.surrogate_instances {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::PersistentKink(MAX_ATTEMPTS));
        }
        let g = SceneGraph::complete(n, 1, |_, _| 0);
        let p = random_potentials(&mut rng, &g);
        let truth = Labeling((0..n).map(|_| rng.random_bool(0.5)).collect());
        if tie_margin(&g, &p)? < TIE {
            continue;
        }
        checked += 1;
        let (_, d) = surrogate_loss(&g, &p, &truth)?;
        let mut x = p.unary.clone();
        x.extend_from_slice(&p.pairwise);
        let mut analytic = d.unary.clone();
        analytic.extend_from_slice(&d.pairwise);
        let r = check_gradient(
            |x| {
                let q = Potentials {
                    unary: x[..n].to_vec(),
                    pairwise: x[n..].to_vec(),
                };
                surrogate_loss(&g, &q, &truth).map(|v| v.0).unwrap_or(f64::NAN)
            },
            &x,
            &analytic,
            fd(cfg),
        );
        if !r.passed {
            let name = |i: usize| if i < n { format!("unary[{i}]") } else { format!("pairwise[{}]", i - n) };
            return Ok(Check::new("surrogate-loss", false, format!("instance {checked}: {}", r.describe(name))));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(Check::new(
        "surrogate-loss",
        true,
        format!("{checked} instances with {n} nodes, max rel error {worst:.3e}"),
    ))
}

/// Small random joint model over synthetic scenes, with clusters fitted on the
/// scenes' own edge features.
fn random_joint_model(rng: &mut ChaCha8Rng, scenes: &[SceneRecord], nodes: usize) -> Result<PairwiseModelParams> {
    let d = scenes[0].candidates[0].descriptor.len();
    let (h, k) = (6, 4);
    let mut feats = Vec::new();
    for s in scenes {
        let boxes = s.candidate_boxes();
        let cue: Vec<f64> = s.candidates.iter().map(|c| c.descriptor[CUE]).collect();
        let sel = select_candidates(&boxes, &cue, nodes);
        for (a, b) in oriented_pairs(&boxes, &sel) {
            feats.push(edge_features(&boxes[a], &boxes[b]));
        }
    }
    let clusters = fit_kmeans(&feats, k, rng.random())?.model;
    let layer = |input, output, activation| LayerSpec {
        input,
        output,
        activation,
        dropout: 0.0,
    };
    Ok(PairwiseModelParams {
        fe: DenseNet::gaussian(vec![layer(d, h, Activation::Relu)], 0.5, rng)?,
        un: DenseNet::gaussian(vec![layer(h, 1, Activation::Identity)], 0.5, rng)?,
        pn: DenseNet::gaussian(vec![layer(2 * h, k, Activation::Identity)], 0.5, rng)?,
        clusters,
        input: Standardizer::fit(scenes.iter().flat_map(|s| s.candidates.iter().map(|c| c.descriptor.as_slice())))?,
        nodes,
        loss: LossSpec::ScoreSurrogate,
    })
}

fn end_to_end_check(cfg: &VerifyConfig) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let data = generate_synthetic(&SynthConfig {
        train_scenes: 0,
        validation_scenes: 0,
        test_scenes: cfg.end_to_end_scenes.max(1) * 4,
        rng_seed: cfg.seed,
        ..SynthConfig::default()
    })?;
    let params = random_joint_model(&mut rng, &data.test, 8)?;
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..MAX_ATTEMPTS {
        if checked == cfg.end_to_end_scenes {
            break;
        }
        let mut p = params.clone();
        let jitter: Vec<f64> = p.flat_params().iter().map(|w| w + rng.random_range(-0.1..0.1)).collect();
        p.set_flat_params(&jitter)?;
        let scene = &data.test[rng.random_range(0..data.test.len())];
        let local: Vec<f64> = scene.candidates.iter().map(|c| c.descriptor[CUE]).collect();
        let prepared = prepare_scene(scene, &local, &p)?;
        if prepared.graph.len() < 2 || !is_smooth_point(&p, &prepared, TIE)? {
            continue;
        }
        checked += 1;
        let (_, mut analytic) = scene_loss(&p, &prepared, None)?;
        if let Some(i) = cfg.corrupt_parameter {
            let slot = analytic.get_mut(i).ok_or_else(|| {
                Error::Config(format!("corrupted parameter {i} out of range (model has {})", p.num_params()))
            })?;
            *slot += 1.0;
        }
        let mut probe = p.clone();
        let r = check_gradient(
            |x| {
                probe.set_flat_params(x).expect("same length");
                scene_loss(&probe, &prepared, None).map(|v| v.0).unwrap_or(f64::NAN)
            },
            &p.flat_params(),
            &analytic,
            fd(cfg),
        );
        if !r.passed {
            return Ok(Check::new(
                "end-to-end",
                false,
                format!("scene {}: {}", prepared.scene_id, r.describe(|i| p.param_name(i))),
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    if checked < cfg.end_to_end_scenes {
        return Err(Error::PersistentKink(MAX_ATTEMPTS));
    }
    Ok(Check::new(
        "end-to-end",
        true,
        format!(
            "{checked} scenes, {} parameters, max rel error {worst:.3e}",
            params.num_params()
        ),
    ))
}

fn inference_checks(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let (mut mismatch, mut persistency) = (None, None);
    let mut determined = 0usize;
    for k in 0..cfg.inference_instances {
        let n = rng.random_range(1..=cfg.inference_max_nodes);
        let density = rng.random_range(0.2..=1.0);
        let g = random_graph(&mut rng, n, density, 3);
        let p = random_potentials(&mut rng, &g);
        let exact = candidate_scores(&g, &p, InferenceMethod::Exhaustive)?;
        let cascade = candidate_scores(&g, &p, InferenceMethod::Cascade)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mm = |c: &crate::inference::CandidateScores| {
            c.max_marginals.values.iter().flat_map(|v| v.iter().map(|x| x.to_bits())).collect::<Vec<_>>()
        };
        if mismatch.is_none() && (bits(&exact.scores) != bits(&cascade.scores) || mm(&exact) != mm(&cascade)) {
            mismatch = Some(k);
        }
        for (i, l) in qpbo_labels(&g, &p)?.into_iter().enumerate() {
            let label = match l {
                PartialLabel::Zero => 0,
                PartialLabel::One => 1,
                PartialLabel::Unknown => continue,
            };
            determined += 1;
            let v = exact.max_marginals.values[i];
            if v[label] < v[1 - label] && persistency.is_none() {
                persistency = Some((k, i));
            }
        }
    }
    let n = cfg.inference_instances;
    Ok(vec![
        Check::new(
            "cascade-equals-exhaustive",
            mismatch.is_none(),
            match mismatch {
                None => format!("{n} instances, scores and max-marginals bit-equal"),
                Some(k) => format!("instance {k} differs"),
            },
        ),
        Check::new(
            "qpbo-persistency",
            persistency.is_none(),
            match persistency {
                None => format!("{determined} determined labels, all attained by an exact maximizer"),
                Some((k, i)) => format!("instance {k}, node {i}: determined label not optimal"),
            },
        ),
    ])
}

fn bx(x: f64) -> BoundingBox {
    BoundingBox::new(x, 0.0, 10.0, 10.0)
}

fn fixture_scene(truth: Vec<GroundTruth>) -> SceneRecord {
    SceneRecord {
        scene_id: "fixture".into(),
        width: 200.0,
        height: 100.0,
        ground_truth: truth,
        candidates: Vec::new(),
        global: Vec::new(),
    }
}

fn fixture_ap(truth: Vec<GroundTruth>, dets: Vec<(BoundingBox, f64)>) -> Result<(f64, usize)> {
    let scene = fixture_scene(truth);
    let e = evaluate(
        &[scene],
        &[SceneDetections {
            scene_id: "fixture".into(),
            detections: dets,
        }],
    )?;
    Ok((e.curve.ap, e.ignored))
}

fn gt(x: f64, difficult: bool) -> GroundTruth {
    GroundTruth { bbox: bx(x), difficult }
}

fn eval_checks() -> Result<Vec<Check>> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let mut out = Vec::new();

    let (ap, _) = fixture_ap(
        vec![gt(0.0, false), gt(50.0, false)],
        vec![(bx(0.0), 0.9), (bx(100.0), 0.8), (bx(50.0), 0.7)],
    )?;
    out.push(Check::new("tp-fp-tp", close(ap, 5.0 / 6.0), format!("AP {ap:.6}, expected 0.833333")));

    let (ap, ignored) = fixture_ap(
        vec![gt(0.0, false), gt(50.0, true)],
        vec![(bx(50.0), 0.9), (bx(0.0), 0.8)],
    )?;
    out.push(Check::new(
        "difficult-ignored",
        ignored == 1 && close(ap, 1.0),
        format!("{ignored} ignored, AP {ap:.6}, expected 1 ignored and AP 1"),
    ));

    let m = match_detections(&[(bx(0.0), 0.9), (bx(0.0), 0.8)], &[gt(0.0, false)]);
    out.push(Check::new(
        "duplicate-is-false-positive",
        m.outcomes == [Outcome::TruePositive, Outcome::FalsePositive],
        format!("{:?}", m.outcomes),
    ));

    let (ap, _) = fixture_ap(vec![gt(0.0, false), gt(50.0, false)], vec![(bx(0.0), 0.5), (bx(50.0), 0.4)])?;
    out.push(Check::new("perfect", close(ap, 1.0), format!("AP {ap:.6}")));

    let (ap, _) = fixture_ap(vec![gt(0.0, false)], vec![(bx(100.0), 0.5), (bx(150.0), 0.4)])?;
    out.push(Check::new("all-false", ap == 0.0, format!("AP {ap:.6}")));

    // TP FP TP FP FP with 3 positives; precision and recall by hand:
    // (1, 1/3) (1/2, 1/3) (2/3, 2/3) (1/2, 2/3) (2/5, 2/3); |P - R| is smallest
    // (0) at rank 3
    let ranked: Vec<(f64, Outcome)> = [0.9, 0.8, 0.7, 0.6, 0.5]
        .into_iter()
        .zip([
            Outcome::TruePositive,
            Outcome::FalsePositive,
            Outcome::TruePositive,
            Outcome::FalsePositive,
            Outcome::FalsePositive,
        ])
        .collect();
    let t = eq_pr_threshold(&pr_curve(&ranked, 3)?)?;
    out.push(Check::new("equal-precision-recall", t == 0.7, format!("threshold {t}, expected 0.7")));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            inference_instances: 100,
            inference_max_nodes: 10,
            surrogate_instances: 10,
            end_to_end_scenes: 3,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn suites_pass() {
        for s in Suite::ALL {
            let r = run_suite(s, &small()).unwrap();
            assert!(r.passed(), "{}", r.render());
        }
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let cfg = VerifyConfig {
            corrupt_parameter: Some(3),
            ..small()
        };
        let r = run_suite(Suite::Gradcheck, &cfg).unwrap();
        assert!(!r.passed());
        let failed = r.checks.iter().find(|c| !c.passed).unwrap();
        assert_eq!(failed.name, "end-to-end");
        assert!(failed.detail.contains("fe[3]"), "{}", failed.detail);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
    }
}
