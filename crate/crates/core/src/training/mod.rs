//! Losses, pseudo-supervised pair generation, and the training loop.

mod synth;


pub use synth::{synth_dataset, SynthConfig};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with_params, EvalInstance};
use crate::kgraph::{normalize_adjacency, ConceptGraph};
use crate::model::{
    forward_nodes, save_model, CheckpointMeta, ConceptBank, ForwardNodes, ModelConfig, ModelParams,
};
use crate::proposal::{propose_for_video, MomentSpan, ProposalConfig};
use crate::pseudoquery::{top_k_objects, PseudoQuery, Vocabulary};
use crate::tensor::{NodeId, OptimizerKind, OptimizerState, Tape, Tensor};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

/// Training hyperparameters. Every random choice in a run flows from `seed`;
/// the proposal stage gets a stream derived from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the temporal-attention loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerChoice,
    pub proposal: ProposalConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.7,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            optimizer: OptimizerChoice::Adam,
            proposal: ProposalConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        self.model.validate()
    }

    /// Proposal config with its stream re-derived from the master seed.
    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig { rng_seed: derive_seed(self.seed, "proposal"), ..self.proposal.clone() }
    }
}

/// One pseudo-supervised example: pseudo-query, target span, frame mask.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub video_id: String,
    pub query: PseudoQuery,
    pub target: MomentSpan,
    /// Per-frame indicator of membership in the target span.
    pub mask: Vec<f64>,
}

/// Generated pairs plus the feature tensors they reference.
#[derive(Debug)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    pub features: BTreeMap<String, crate::proposal::FrameFeatures>,
    /// Candidate spans dropped because no detection fell inside them.
    pub dropped_empty: usize,
}

/// Composes moment proposal and pseudo-query generation over every video.
pub fn generate_pairs(
    manifest: &DatasetManifest,
    base: &Path,
    proposal_cfg: &ProposalConfig,
    k: usize,
) -> Result<PairSet> {
    let mut pairs = Vec::new();
    let mut features = BTreeMap::new();
    let mut dropped = 0usize;
    for v in &manifest.videos {
        let frames = crate::data::read_features(&base.join(&v.features_path), &v.video_id)?;
        let detections = crate::data::read_detections(&base.join(&v.detections_path))?;
        let t = frames.frames();
        let spans = propose_for_video(&frames, proposal_cfg)?;
        for span in spans {
            match top_k_objects(&detections, span, k, t) {
                Ok(query) => {
                    let mask = span.frame_mask(t);
                    debug_assert!(mask.iter().any(|&g| g > 0.0));
                    pairs.push(TrainingPair {
                        video_id: v.video_id.clone(),
                        query,
                        target: span,
                        mask,
                    });
                }
                Err(Error::EmptyQuery(_, _)) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        features.insert(v.video_id.clone(), frames);
    }
    Ok(PairSet { pairs, features, dropped_empty: dropped })
}

/// Temporal-attention loss: `-(sum_i g_i log a_i) / sum_i g_i`, evaluated only
/// at in-mask frames so saturated out-of-mask attention cannot poison it.
pub fn loss_ta(tape: &mut Tape, attention: NodeId, mask: &[f64]) -> Result<NodeId> {
    let (t, cols) = tape.shape(attention);
    if cols != 1 || t != mask.len() {
        return Err(Error::shape(format!(
            "attention is {t}x{cols}, mask has {} entries",
            mask.len()
        )));
    }
    let in_mask: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &g)| g > 0.5).map(|(i, _)| i).collect();
    if in_mask.is_empty() {
        return Err(Error::contract("attention mask selects no frames"));
    }
    let count = in_mask.len() as f64;
    let picked = tape.gather(attention, &in_mask)?;
    let logs = tape.log(picked)?;
    let total = tape.sum(logs)?;
    tape.scale(total, -1.0 / count)
}

/// Span-regression loss: smooth-l1 on both endpoints of the raw prediction.
pub fn loss_treg(tape: &mut Tape, span_raw: NodeId, target: MomentSpan) -> Result<NodeId> {
    let (r, c) = tape.shape(span_raw);
    if (r, c) != (1, 2) {
        return Err(Error::shape(format!("span prediction is {r}x{c}, expected 1x2")));
    }
    let l = tape.smooth_l1(span_raw, &[target.start(), target.end()])?;
    tape.sum(l)
}

/// Per-pair objective: `loss_treg + lambda * loss_ta`.
pub fn pair_loss(
    tape: &mut Tape,
    nodes: &ForwardNodes,
    target: MomentSpan,
    mask: &[f64],
    lambda: f64,
) -> Result<NodeId> {
    let treg = loss_treg(tape, nodes.span_raw, target)?;
    let ta = loss_ta(tape, nodes.attention, mask)?;
    let weighted = tape.scale(ta, lambda)?;
    tape.add(treg, weighted)
}

/// One metrics-log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(rename = "train_mIoU")]
    pub train_miou: Option<f64>,
}

/// Artifacts written by a training run.
pub struct TrainOutputs {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_bin: PathBuf,
    pub checkpoint_json: PathBuf,
    pub metrics_path: PathBuf,
}

/// Runs the full pseudo-supervised loop and writes a checkpoint plus a
/// JSON-lines metrics log under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    manifest_path: &Path,
    graph: &ConceptGraph,
    out_dir: &Path,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let (manifest, base) = DatasetManifest::load(manifest_path)?;

    let graph = if graph.adjacency.is_some() {
        graph.clone()
    } else {
        normalize_adjacency(graph.clone())
    };
    let relations: Vec<String> = graph
        .relational_counts
        .as_ref()
        .map(|s| s.iter().map(|(r, _)| r.clone()).collect())
        .unwrap_or_default();
    let bank = ConceptBank::new(graph.clone())?;

    let pair_set = generate_pairs(&manifest, &base, &cfg.proposal_config(), cfg.model.k)?;
    if pair_set.pairs.is_empty() {
        return Err(Error::config("no training pairs were generated"));
    }
    let PairSet { pairs, features, .. } = pair_set;

    // Shape checks against the data.
    let mut d_in = None;
    for f in features.values() {
        if f.frames() != cfg.model.frames {
            return Err(Error::config(format!(
                "video {} has {} frames, model expects {}",
                f.video_id,
                f.frames(),
                cfg.model.frames
            )));
        }
        match d_in {
            None => d_in = Some(f.dim()),
            Some(d) if d != f.dim() => {
                return Err(Error::config("videos disagree on feature dimension"));
            }
            _ => {}
        }
    }
    let d_in = d_in.expect("at least one video");

    let vocab = Vocabulary::build(pairs.iter().flat_map(|p| p.query.tokens.iter()));
    let instances: Vec<EvalInstance> = manifest
        .videos
        .iter()
        .filter(|v| !v.eval_annotations.is_empty())
        .map(|v| EvalInstance {
            video_id: v.video_id.clone(),
            frames: features[&v.video_id].clone(),
            annotations: v.eval_annotations.clone(),
        })
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut params = ModelParams::init(
        &cfg.model,
        vocab.len(),
        d_in,
        graph.n_concepts(),
        &relations,
        &mut init_rng,
    )?;

    let kind = match cfg.optimizer {
        OptimizerChoice::Adam => OptimizerKind::Adam,
        OptimizerChoice::Sgd => OptimizerKind::Sgd,
    };
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut optimizer = match kind {
        OptimizerKind::Adam => OptimizerState::adam(cfg.lr, &sizes),
        OptimizerKind::Sgd => OptimizerState::sgd(cfg.lr, &sizes),
    };

    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        d_in,
        vocab: vocab.tokens().to_vec(),
        concepts: graph.concepts.clone(),
        relations: relations.clone(),
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    };
    let checkpoint_bin = out_dir.join("checkpoint.bin");
    let checkpoint_json = out_dir.join("checkpoint.json");
    let metrics_path = out_dir.join("metrics.jsonl");

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            params.register_all(&mut tape)?;
            let mut total: Option<NodeId> = None;
            for &pi in chunk {
                let pair = &pairs[pi];
                let frames = &features[&pair.video_id];
                let ids = vocab.encode(&pair.query.tokens);
                let nodes = forward_nodes(&mut tape, &params, &cfg.model, frames, &ids, &bank)?;
                let l = pair_loss(&mut tape, &nodes, pair.target, &pair.mask, cfg.lambda)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let loss_value = tape.scalar_value(batch_loss)?;
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss_value * chunk.len() as f64;

            let grads = tape.backward(batch_loss)?;
            params.pull_grads(&tape, &grads)?;
            let mut named = params.named_tensors_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            optimizer.step(&mut refs)?;
        }

        let train_miou = if instances.is_empty() {
            None
        } else {
            Some(
                evaluate_with_params(&mut params, &cfg.model, &vocab, &bank, &instances, false)?
                    .miou,
            )
        };
        metrics.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            train_miou,
        });
        save_model(&checkpoint_bin, &checkpoint_json, &params, &meta)?;
    }

    let config_value = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    crate::data::write_jsonl(&metrics_path, &config_value, &metrics)?;
    Ok(TrainOutputs { metrics, checkpoint_bin, checkpoint_json, metrics_path })
}
