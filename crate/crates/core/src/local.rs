//! The per-candidate classifier: a one-hidden-layer network on standardized
//! candidate descriptors with a two-output log-loss head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::SceneRecord;
use crate::error::{Error, Result};
use crate::nets::{sgd_step, DenseNet, Mode, ModelArchive, SgdConfig, SgdState, Standardizer, TracePoint};
use crate::structloss::pair_log_loss;

/// Candidates above this overlap with the truth are positives.
pub const POSITIVE_IOU: f64 = 0.6;
/// Candidates below this overlap are negatives; those in between are unused.
pub const NEGATIVE_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub sgd: SgdConfig,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.5,
            sgd: SgdConfig::local(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub net: DenseNet,
    pub input: Standardizer,
}

impl LocalModel {
    pub fn descriptor_dim(&self) -> usize {
        self.input.dim()
    }

    /// Head-class output minus background-class output.
    pub fn score(&self, descriptor: &[f64]) -> Result<f64> {
        let out = self.net.predict(&self.input.apply(descriptor)?)?;
        Ok(out[1] - out[0])
    }

    pub fn scene_scores(&self, scene: &SceneRecord) -> Result<Vec<f64>> {
        scene.candidates.iter().map(|c| self.score(&c.descriptor)).collect()
    }

    /// The hidden layer, used to initialize the joint model's feature extractor.
    pub fn feature_extractor(&self) -> Result<DenseNet> {
        self.net.truncated(self.net.layers().len() - 1)
    }

    pub fn to_archive(&self) -> ModelArchive {
        ModelArchive::new("local")
            .with_net("net", self.net.clone())
            .with_array("input", self.input.to_flat())
    }

    pub fn from_archive(a: &ModelArchive) -> Result<Self> {
        if a.kind != "local" {
            return Err(Error::Model(format!("expected a local model, found '{}'", a.kind)));
        }
        let model = Self {
            net: a.net("net")?.clone(),
            input: Standardizer::from_flat(a.array("input")?)?,
        };
        if model.net.input_dim() != model.input.dim() || model.net.output_dim() != 2 {
            return Err(Error::Model("local model dimensions are inconsistent".into()));
        }
        Ok(model)
    }
}

/// Labeled training candidates: overlap above 0.6 positive, below 0.5
/// negative, the rest dropped.
pub fn training_candidates(scenes: &[SceneRecord]) -> (Vec<&[f64]>, Vec<&[f64]>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in scenes {
        for (c, o) in s.candidates.iter().zip(s.candidate_overlaps()) {
            if o > POSITIVE_IOU {
                pos.push(c.descriptor.as_slice());
            } else if o < NEGATIVE_IOU {
                neg.push(c.descriptor.as_slice());
            }
        }
    }
    (pos, neg)
}

/// Trains on class-balanced batches (half positives, half negatives, each
/// class cycled in a reshuffled order), minimizing the batch-mean log-loss.
/// One epoch is as many batches as it takes to cover every labeled candidate
/// once.
pub fn train_local(scenes: &[SceneRecord], cfg: &LocalTrainConfig) -> Result<(LocalModel, Vec<TracePoint>)> {
    cfg.sgd.validate()?;
    let (pos, neg) = training_candidates(scenes);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("local training needs both positive and negative candidates"));
    }
    let input = Standardizer::fit(pos.iter().chain(&neg).copied())?;
    let pos: Vec<Vec<f64>> = pos.iter().map(|x| input.apply(x)).collect::<Result<_>>()?;
    let neg: Vec<Vec<f64>> = neg.iter().map(|x| input.apply(x)).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.rng_seed);
    let mut net = DenseNet::mlp(&[input.dim(), cfg.hidden, 2], cfg.dropout, &mut rng)?;
    let mut state = SgdState::new(net.num_params());
    let batch = cfg.sgd.batch_size;
    let n_pos = batch.div_ceil(2);
    let steps_per_epoch = (pos.len() + neg.len()).div_ceil(batch);
    let mut pos_order: Vec<usize> = (0..pos.len()).collect();
    let mut neg_order: Vec<usize> = (0..neg.len()).collect();
    pos_order.shuffle(&mut rng);
    neg_order.shuffle(&mut rng);
    let (mut pi, mut ni) = (0usize, 0usize);
    let mut trace = Vec::with_capacity(steps_per_epoch * cfg.sgd.epochs);
    let mut grads = vec![0.0; net.num_params()];
    for epoch in 0..cfg.sgd.epochs {
        let lr = cfg.sgd.rate_at_epoch(epoch);
        for _ in 0..steps_per_epoch {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for k in 0..batch {
                let (x, label) = if k < n_pos {
                    if pi == pos_order.len() {
                        pos_order.shuffle(&mut rng);
                        pi = 0;
                    }
                    pi += 1;
                    (&pos[pos_order[pi - 1]], true)
                } else {
                    if ni == neg_order.len() {
                        neg_order.shuffle(&mut rng);
                        ni = 0;
                    }
                    ni += 1;
                    (&neg[neg_order[ni - 1]], false)
                };
                let (out, tape) = net.forward(x, Mode::Train(&mut rng))?;
                let (l, d) = pair_log_loss(&out, label);
                loss += l;
                net.backward_into(&tape, &[d[0] / batch as f64, d[1] / batch as f64], &mut grads)?;
            }
            loss /= batch as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "local training loss",
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
    Ok((LocalModel { net, input }, trace))
}
