//! Structured losses over the joint model and its training loop.
//!
//! The joint model maps each selected candidate's descriptor through a feature
//! extractor `FE`, reads unary potentials off a unary network `UN` and, for
//! each oriented edge, picks the cluster's component of a pairwise network
//! `PN` applied to the concatenated endpoint features. Training minimizes
//! either the score surrogate (a logistic penalty on every max-marginal
//! difference) or a margin-rescaled structured hinge with weighted Hamming
//! loss.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::SceneRecord;
use crate::error::{Error, Result};
use crate::graph::{
    build_scene_graph, fit_kmeans, oriented_pairs, edge_features, select_candidates, EdgeClusterModel, SceneGraph,
    DEFAULT_CLUSTERS, DEFAULT_NODES,
};
use crate::inference::{exhaustive_max_marginals, joint_score, map_labeling, Labeling, Potentials};
use crate::local::LocalModel;
use crate::nets::{
    sgd_step, Activation, DenseNet, LayerSpec, Mode, ModelArchive, SgdConfig, SgdState, Standardizer, Tape,
    TracePoint, INIT_STD,
};

/// `v(t) = ln(1 + exp(-t))`, stable for any finite `t`.
pub fn v(t: f64) -> f64 {
    if t >= 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

/// `v'(t) = -1 / (1 + exp(t))`.
pub fn v_prime(t: f64) -> f64 {
    if t >= 0.0 {
        let e = (-t).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + t.exp())
    }
}

/// Two-output log-loss: the output for the true class is pushed up and the
/// other one down, `v(f_true) + v(-f_other)`. Outputs are ordered
/// (background, head). Returns the loss and its gradient.
pub fn pair_log_loss(out: &[f64], head: bool) -> (f64, [f64; 2]) {
    let t = usize::from(head);
    let o = 1 - t;
    let mut g = [0.0; 2];
    g[t] = v_prime(out[t]);
    g[o] = -v_prime(-out[o]);
    (v(out[t]) + v(-out[o]), g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum LossSpec {
    /// Logistic penalty on each max-marginal difference, signed by the label.
    #[default]
    ScoreSurrogate,
    /// Structured hinge with class-weighted Hamming margin: mislabeling a
    /// true background candidate costs `weight_negative`, a true head
    /// `weight_positive`.
    SsvmHamming { weight_negative: f64, weight_positive: f64 },
}


impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::SsvmHamming {
            weight_negative,
            weight_positive,
        } = self
        {
            if !(*weight_negative >= 0.0 && *weight_positive >= 0.0) {
                return Err(Error::Config("margin weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

fn check_truth(graph: &SceneGraph, truth: &Labeling) -> Result<()> {
    if truth.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            actual: truth.len(),
            context: "ground-truth labeling",
        });
    }
    Ok(())
}

/// Surrogate loss `sum_{y_i=1} v(s_i) + sum_{y_i=0} v(-s_i)` on the
/// max-marginal differences and its gradient with respect to the potentials.
pub fn surrogate_loss(graph: &SceneGraph, pots: &Potentials, truth: &Labeling) -> Result<(f64, Potentials)> {
    check_truth(graph, truth)?;
    let mm = exhaustive_max_marginals(graph, pots)?;
    let mut loss = 0.0;
    let mut grad = Potentials::zeros(graph);
    for (i, s) in mm.differences().into_iter().enumerate() {
        let dl_ds = if truth.0[i] {
            loss += v(s);
            v_prime(s)
        } else {
            loss += v(-s);
            -v_prime(-s)
        };
        if dl_ds == 0.0 {
            continue;
        }
        let [y0, y1] = &mm.argmax[i];
        for p in 0..graph.len() {
            grad.unary[p] += dl_ds * (f64::from(u8::from(y1.0[p])) - f64::from(u8::from(y0.0[p])));
        }
        for (e, edge) in graph.edges.iter().enumerate() {
            let on1 = y1.0[edge.i] && y1.0[edge.j];
            let on0 = y0.0[edge.i] && y0.0[edge.j];
            grad.pairwise[e] += dl_ds * (f64::from(u8::from(on1)) - f64::from(u8::from(on0)));
        }
    }
    Ok((loss, grad))
}

/// Weighted Hamming distance between two labelings.
pub fn hamming(y: &Labeling, truth: &Labeling, weight_negative: f64, weight_positive: f64) -> f64 {
    y.0.iter()
        .zip(&truth.0)
        .filter(|(a, b)| a != b)
        .map(|(_, &t)| if t { weight_positive } else { weight_negative })
        .sum()
}

/// Structured hinge `max_y [S(y) + h(y, truth)] - S(truth)` and its
/// subgradient: indicator vector of the loss-augmented argmax minus that of
/// the truth. The Hamming term folds into the unaries, so the augmented
/// maximization is an ordinary MAP problem.
pub fn ssvm_loss(
    graph: &SceneGraph,
    pots: &Potentials,
    truth: &Labeling,
    weight_negative: f64,
    weight_positive: f64,
) -> Result<(f64, Potentials, Labeling)> {
    check_truth(graph, truth)?;
    let mut augmented = pots.clone();
    for (u, &t) in augmented.unary.iter_mut().zip(&truth.0) {
        *u += if t { -weight_positive } else { weight_negative };
    }
    let mut y = map_labeling(graph, &augmented)?;
    let mut best = joint_score(graph, pots, &y) + hamming(&y, truth, weight_negative, weight_positive);
    let truth_score = joint_score(graph, pots, truth);
    // The enumeration accumulates scores incrementally; on a near-tie with
    // the truth, settle the comparison with the canonical scores.
    if best < truth_score {
        y = truth.clone();
        best = truth_score;
    }
    let loss = best - truth_score;
    let mut grad = Potentials::zeros(graph);
    for p in 0..graph.len() {
        grad.unary[p] = f64::from(u8::from(y.0[p])) - f64::from(u8::from(truth.0[p]));
    }
    for (e, edge) in graph.edges.iter().enumerate() {
        let a = y.0[edge.i] && y.0[edge.j];
        let b = truth.0[edge.i] && truth.0[edge.j];
        grad.pairwise[e] = f64::from(u8::from(a)) - f64::from(u8::from(b));
    }
    Ok((loss, grad, y))
}

/// Loss and potential gradient for either loss kind.
pub fn structured_loss(graph: &SceneGraph, pots: &Potentials, truth: &Labeling, spec: &LossSpec) -> Result<(f64, Potentials)> {
    match *spec {
        LossSpec::ScoreSurrogate => surrogate_loss(graph, pots, truth),
        LossSpec::SsvmHamming {
            weight_negative,
            weight_positive,
        } => ssvm_loss(graph, pots, truth, weight_negative, weight_positive).map(|(l, g, _)| (l, g)),
    }
}

/// Joint-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseModelParams {
    pub fe: DenseNet,
    pub un: DenseNet,
    pub pn: DenseNet,
    pub clusters: EdgeClusterModel,
    pub input: Standardizer,
    /// Candidates per scene kept for the joint model.
    pub nodes: usize,
    pub loss: LossSpec,
}

/// Joint-model construction and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseTrainConfig {
    pub nodes: usize,
    pub clusters: usize,
    pub kmeans_seed: u64,
    /// Dropout inside the feature extractor during training (0 disables it).
    pub fe_dropout: f64,
    pub init_std: f64,
    pub loss: LossSpec,
    pub sgd: SgdConfig,
}

impl Default for PairwiseTrainConfig {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            clusters: DEFAULT_CLUSTERS,
            kmeans_seed: 11,
            fe_dropout: 0.0,
            init_std: INIT_STD,
            loss: LossSpec::ScoreSurrogate,
            sgd: SgdConfig::pairwise(),
        }
    }
}

impl PairwiseModelParams {
    /// Feature extractor copied from the local model; unary and pairwise
    /// networks Gaussian-initialized.
    pub fn initialize(
        local: &LocalModel,
        clusters: EdgeClusterModel,
        cfg: &PairwiseTrainConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.loss.validate()?;
        let mut fe = local.feature_extractor()?;
        fe.set_dropout(cfg.fe_dropout);
        let h = fe.output_dim();
        let k = clusters.k();
        let linear = |input, output| LayerSpec {
            input,
            output,
            activation: Activation::Identity,
            dropout: 0.0,
        };
        let un = DenseNet::gaussian(vec![linear(h, 1)], cfg.init_std, rng)?;
        let pn = DenseNet::gaussian(vec![linear(2 * h, k)], cfg.init_std, rng)?;
        let p = Self {
            fe,
            un,
            pn,
            clusters,
            input: local.input.clone(),
            nodes: cfg.nodes,
            loss: cfg.loss,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.fe.output_dim();
        let check = |expected: usize, actual: usize, context| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected,
                    actual,
                    context,
                })
            }
        };
        check(h, self.un.input_dim(), "unary network input")?;
        check(1, self.un.output_dim(), "unary network output")?;
        check(2 * h, self.pn.input_dim(), "pairwise network input")?;
        check(self.clusters.k(), self.pn.output_dim(), "pairwise network output")?;
        check(self.fe.input_dim(), self.input.dim(), "feature extractor input")?;
        if self.nodes == 0 || self.nodes > crate::inference::MAX_NODES {
            return Err(Error::Config(format!("nodes must lie in 1..={}", crate::inference::MAX_NODES)));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.fe.num_params() + self.un.num_params() + self.pn.num_params()
    }

    /// `FE | UN | PN` parameters in one vector.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.fe.params());
        v.extend_from_slice(self.un.params());
        v.extend_from_slice(self.pn.params());
        v
    }

    pub fn set_flat_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: v.len(),
                context: "joint model parameters",
            });
        }
        let (a, b) = (self.fe.num_params(), self.fe.num_params() + self.un.num_params());
        self.fe.set_params(&v[..a])?;
        self.un.set_params(&v[a..b])?;
        self.pn.set_params(&v[b..])
    }

    /// Names a flat parameter index, for gradient-check reports.
    pub fn param_name(&self, idx: usize) -> String {
        let (a, b) = (self.fe.num_params(), self.fe.num_params() + self.un.num_params());
        if idx < a {
            format!("fe[{idx}]")
        } else if idx < b {
            format!("un[{}]", idx - a)
        } else {
            format!("pn[{}]", idx - b)
        }
    }

    pub fn to_archive(&self) -> ModelArchive {
        let mut a = ModelArchive::new("pairwise")
            .with_net("fe", self.fe.clone())
            .with_net("un", self.un.clone())
            .with_net("pn", self.pn.clone())
            .with_array("clusters", self.clusters.to_flat())
            .with_array("input", self.input.to_flat());
        a.meta = serde_json::json!({ "nodes": self.nodes, "loss": self.loss });
        a
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        if a.kind != "pairwise" {
            return Err(Error::Model(format!("expected a pairwise model, found '{}'", a.kind)));
        }
        let nodes = a.meta["nodes"]
            .as_u64()
            .ok_or_else(|| Error::Model("pairwise model lacks 'nodes'".into()))? as usize;
        let loss: LossSpec =
            serde_json::from_value(a.meta["loss"].clone()).map_err(|e| Error::Model(format!("loss spec: {e}")))?;
        let p = Self {
            fe: a.net("fe")?.clone(),
            un: a.net("un")?.clone(),
            pn: a.net("pn")?.clone(),
            clusters: EdgeClusterModel::from_flat(a.array("clusters")?)?,
            input: Standardizer::from_flat(a.array("input")?)?,
            nodes,
            loss,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Smallest gap, over every node and clamped label, between the best and the
/// second-best labeling score. A small gap means a max-marginal argmax can
/// switch under a tiny perturbation of the potentials. Enumerates all
/// labelings, so meant for small diagnostic graphs.
pub fn tie_margin(graph: &SceneGraph, pots: &Potentials) -> Result<f64> {
    pots.check(graph)?;
    let n = graph.len();
    if n > crate::inference::MAX_NODES {
        return Err(Error::TooManyNodes(n));
    }
    let mut top = vec![[[f64::NEG_INFINITY; 2]; 2]; n];
    for code in 0..(1u32 << n) {
        let y = Labeling::from_code(code, n);
        let s = joint_score(graph, pots, &y);
        for (i, &yi) in y.0.iter().enumerate() {
            let t = &mut top[i][usize::from(yi)];
            if s > t[0] {
                t[1] = t[0];
                t[0] = s;
            } else if s > t[1] {
                t[1] = s;
            }
        }
    }
    Ok(top
        .iter()
        .flat_map(|node| node.iter())
        .filter(|t| t[1].is_finite())
        .map(|t| t[0] - t[1])
        .fold(f64::INFINITY, f64::min))
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct PairwiseTape {
    pub features: Vec<Vec<f64>>,
    fe: Vec<Tape>,
    un: Vec<Tape>,
    pn: Vec<Tape>,
}

impl PairwiseTape {
    /// Distance of the feature extractor's relu inputs from their kink.
    pub fn kink_distance(&self, params: &PairwiseModelParams) -> f64 {
        self.fe.iter().map(|t| t.kink_distance(&params.fe)).fold(f64::INFINITY, f64::min)
    }
}

/// True when finite differences around `params` are trustworthy for this
/// scene: no relu within `KINK_MARGIN` of its kink and no max-marginal argmax
/// within `tie` of switching.
pub fn is_smooth_point(params: &PairwiseModelParams, scene: &PairwiseScene, tie: f64) -> Result<bool> {
    let (pots, tape) = pairwise_forward(params, &scene.graph, &scene.inputs, None)?;
    Ok(tape.kink_distance(params) >= crate::nets::KINK_MARGIN && tie_margin(&scene.graph, &pots)? >= tie)
}

/// Potentials of `graph` from standardized node inputs (one per graph node).
/// With an `rng` the feature extractor runs in training mode (dropout).
pub fn pairwise_forward(
    params: &PairwiseModelParams,
    graph: &SceneGraph,
    inputs: &[Vec<f64>],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Potentials, PairwiseTape)> {
    if inputs.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            actual: inputs.len(),
            context: "node inputs",
        });
    }
    let mut features = Vec::with_capacity(inputs.len());
    let mut fe_tapes = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mode = match rng.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let (f, t) = params.fe.forward(x, mode)?;
        features.push(f);
        fe_tapes.push(t);
    }
    let mut unary = Vec::with_capacity(inputs.len());
    let mut un_tapes = Vec::with_capacity(inputs.len());
    for f in &features {
        let (u, t) = params.un.forward(f, Mode::Eval)?;
        unary.push(u[0]);
        un_tapes.push(t);
    }
    let mut pairwise = Vec::with_capacity(graph.edges.len());
    let mut pn_tapes = Vec::with_capacity(graph.edges.len());
    let mut joint = Vec::with_capacity(2 * params.fe.output_dim());
    for e in &graph.edges {
        if e.cluster >= params.pn.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.pn.output_dim(),
                actual: e.cluster + 1,
                context: "edge cluster",
            });
        }
        joint.clear();
        joint.extend_from_slice(&features[e.i]);
        joint.extend_from_slice(&features[e.j]);
        let (out, t) = params.pn.forward(&joint, Mode::Eval)?;
        pairwise.push(out[e.cluster]);
        pn_tapes.push(t);
    }
    Ok((
        Potentials { unary, pairwise },
        PairwiseTape {
            features,
            fe: fe_tapes,
            un: un_tapes,
            pn: pn_tapes,
        },
    ))
}

/// Parameter gradients of the three networks and the loss gradient with
/// respect to each node's features.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseGrads {
    pub fe: Vec<f64>,
    pub un: Vec<f64>,
    pub pn: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl PairwiseGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.fe.len() + self.un.len() + self.pn.len());
        v.extend_from_slice(&self.fe);
        v.extend_from_slice(&self.un);
        v.extend_from_slice(&self.pn);
        v
    }
}

/// Back-propagates potential gradients: through `UN` per node, through the
/// selected `PN` component per edge (splitting the input gradient between
/// both endpoints), then through `FE` per node.
pub fn pairwise_backward(
    params: &PairwiseModelParams,
    graph: &SceneGraph,
    tape: &PairwiseTape,
    dpots: &Potentials,
) -> Result<PairwiseGrads> {
    dpots.check(graph)?;
    if tape.fe.len() != graph.len() || tape.pn.len() != graph.edges.len() {
        return Err(Error::StaleTape);
    }
    let h = params.fe.output_dim();
    let mut g = PairwiseGrads {
        fe: vec![0.0; params.fe.num_params()],
        un: vec![0.0; params.un.num_params()],
        pn: vec![0.0; params.pn.num_params()],
        features: vec![vec![0.0; h]; graph.len()],
    };
    for (i, t) in tape.un.iter().enumerate() {
        let d = dpots.unary[i];
        if d == 0.0 {
            continue;
        }
        let df = params.un.backward_into(t, &[d], &mut g.un)?;
        g.features[i].iter_mut().zip(&df).for_each(|(a, b)| *a += b);
    }
    let mut og = vec![0.0; params.pn.output_dim()];
    for ((e, t), &d) in graph.edges.iter().zip(&tape.pn).zip(&dpots.pairwise) {
        if d == 0.0 {
            continue;
        }
        og.iter_mut().for_each(|v| *v = 0.0);
        og[e.cluster] = d;
        let dj = params.pn.backward_into(t, &og, &mut g.pn)?;
        g.features[e.i].iter_mut().zip(&dj[..h]).for_each(|(a, b)| *a += b);
        g.features[e.j].iter_mut().zip(&dj[h..]).for_each(|(a, b)| *a += b);
    }
    for (t, df) in tape.fe.iter().zip(&g.features) {
        if df.iter().all(|v| *v == 0.0) {
            continue;
        }
        params.fe.backward_into(t, df, &mut g.fe)?;
    }
    Ok(g)
}

/// A scene prepared for the joint model: its candidate graph, standardized
/// node inputs and node labels (overlap with the truth of at least 0.5).
#[derive(Debug, Clone)]
pub struct PairwiseScene {
    pub scene_id: String,
    pub graph: SceneGraph,
    pub inputs: Vec<Vec<f64>>,
    pub truth: Labeling,
}

/// Overlap with the truth at which a selected candidate counts as a head.
pub const PAIRWISE_POSITIVE_IOU: f64 = 0.5;

pub fn prepare_scene(scene: &SceneRecord, local_scores: &[f64], params: &PairwiseModelParams) -> Result<PairwiseScene> {
    let boxes = scene.candidate_boxes();
    let nodes = select_candidates(&boxes, local_scores, params.nodes);
    let mut graph = build_scene_graph(&boxes, &nodes, &params.clusters);
    let overlaps = scene.candidate_overlaps();
    let truth = Labeling(nodes.iter().map(|&c| overlaps[c] >= PAIRWISE_POSITIVE_IOU).collect());
    graph.labels = Some(truth.0.clone());
    let inputs = nodes
        .iter()
        .map(|&c| params.input.apply(&scene.candidates[c].descriptor))
        .collect::<Result<_>>()?;
    Ok(PairwiseScene {
        scene_id: scene.scene_id.clone(),
        graph,
        inputs,
        truth,
    })
}

/// End-to-end loss of one prepared scene and its flat parameter gradient.
pub fn scene_loss(params: &PairwiseModelParams, scene: &PairwiseScene, rng: Option<&mut dyn RngCore>) -> Result<(f64, Vec<f64>)> {
    let (pots, tape) = pairwise_forward(params, &scene.graph, &scene.inputs, rng)?;
    let (loss, dpots) = structured_loss(&scene.graph, &pots, &scene.truth, &params.loss)?;
    let g = pairwise_backward(params, &scene.graph, &tape, &dpots)?;
    Ok((loss, g.flat()))
}

/// Raw layout features of every oriented edge among each scene's selected
/// candidates.
pub fn edge_feature_sample(scenes: &[SceneRecord], local: &LocalModel, nodes: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for s in scenes {
        let boxes = s.candidate_boxes();
        let sel = select_candidates(&boxes, &local.scene_scores(s)?, nodes);
        for (i, j) in oriented_pairs(&boxes, &sel) {
            out.push(edge_features(&boxes[sel[i]], &boxes[sel[j]]));
        }
    }
    Ok(out)
}

/// Fits the edge clusters on the training scenes and initializes the networks.
pub fn initialize_pairwise(scenes: &[SceneRecord], local: &LocalModel, cfg: &PairwiseTrainConfig) -> Result<PairwiseModelParams> {
    let features = edge_feature_sample(scenes, local, cfg.nodes)?;
    let fit = fit_kmeans(&features, cfg.clusters, cfg.kmeans_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.rng_seed);
    rng.set_stream(1);
    PairwiseModelParams::initialize(local, fit.model, cfg, &mut rng)
}

/// Momentum SGD over batches of `sgd.batch_size` scenes, each contributing
/// its summed per-candidate loss. Scene order is reshuffled every epoch.
pub fn train_pairwise(
    scenes: &[SceneRecord],
    local: &LocalModel,
    mut params: PairwiseModelParams,
    sgd: &SgdConfig,
) -> Result<(PairwiseModelParams, Vec<TracePoint>)> {
    sgd.validate()?;
    params.validate()?;
    if local.descriptor_dim() != params.input.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input.dim(),
            actual: local.descriptor_dim(),
            context: "local model descriptor",
        });
    }
    let mut prepared = Vec::with_capacity(scenes.len());
    for s in scenes {
        let p = prepare_scene(s, &local.scene_scores(s)?, &params)?;
        if !p.graph.is_empty() {
            prepared.push(p);
        }
    }
    if prepared.is_empty() {
        return Err(Error::Empty("pairwise training scenes with candidates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sgd.rng_seed);
    let train_dropout = params.fe.layers().iter().any(|l| l.dropout > 0.0);
    let mut state = SgdState::new(params.num_params());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::new();
    for epoch in 0..sgd.epochs {
        let lr = sgd.rate_at_epoch(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(sgd.batch_size) {
            let mut grads = vec![0.0; params.num_params()];
            let mut loss = 0.0;
            for &k in batch {
                let scene = &prepared[k];
                let r: Option<&mut dyn RngCore> = if train_dropout { Some(&mut rng) } else { None };
                let (l, g) = scene_loss(&params, scene, r)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        what: "pairwise loss",
                        location: format!("scene {}", scene.scene_id),
                    });
                }
                loss += l;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let mut p = params.flat_params();
            sgd_step(&mut p, &grads, &mut state, lr, sgd.momentum, sgd.weight_decay)?;
            params.set_flat_params(&p)?;
            trace.push(TracePoint {
                step: trace.len(),
                loss,
                learning_rate: lr,
            });
        }
    }
    Ok((params, trace))
}
