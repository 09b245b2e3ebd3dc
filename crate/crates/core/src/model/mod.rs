//! Neural localizer: video/query encoders, graph-convolutional concept
//! encoder, commonsense enhancement, cross-modal fusion, and span regression.

mod concept;
mod encoder;
mod forward;
mod fusion;

#[cfg(test)]
mod tests;

pub use concept::{gcn_encode, rgcn_encode, ConceptBank};
pub use encoder::{encode_query, encode_video, QueryEncoding};
pub use forward::{clamp_span, forward, forward_nodes, regress_span, ForwardNodes, ForwardOutput};
pub use fusion::{cross_modal_fuse, enhance, EnhanceNodes};

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Grads, Tape, Tensor};
use crate::util::atomic_write;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which modality the commonsense enhancement touches, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhancementMode {
    /// Separate enhancement flows for video and query.
    #[serde(rename = "V+Q")]
    Separate,
    #[serde(rename = "V")]
    VideoOnly,
    #[serde(rename = "Q")]
    QueryOnly,
    /// One shared projection triple for both modalities.
    #[serde(rename = "VQ-shared")]
    Shared,
    /// No enhancement; encoded concepts are appended to the query tokens.
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "none")]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStage {
    #[serde(rename = "pre")]
    Pre,
    #[serde(rename = "post")]
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    #[serde(rename = "weighted")]
    Weighted,
    #[serde(rename = "relational")]
    Relational,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Common hidden dimension for video, query, and concept features.
    pub d: usize,
    pub d_emb: usize,
    /// Graph convolution layer count.
    #[serde(rename = "L")]
    pub layers: usize,
    pub enhancement_mode: EnhancementMode,
    pub fusion_stage: FusionStage,
    pub graph_mode: GraphMode,
    /// Maximum query token count.
    pub k: usize,
    /// Frame count every video is sampled to.
    #[serde(rename = "T")]
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_emb: 32,
            layers: 2,
            enhancement_mode: EnhancementMode::Separate,
            fusion_stage: FusionStage::Pre,
            graph_mode: GraphMode::Weighted,
            k: 5,
            frames: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::config(format!("d must be positive and even, got {}", self.d)));
        }
        if self.d_emb == 0 || self.layers == 0 || self.k == 0 {
            return Err(Error::config("d_emb, L, and k must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("T must be at least 2"));
        }
        if self.enhancement_mode == EnhancementMode::Concat
            && self.fusion_stage == FusionStage::Post
        {
            return Err(Error::config(
                "concat enhancement replaces query tokens and cannot run post-fusion",
            ));
        }
        Ok(())
    }
}

/// Gate weights for one recurrent direction.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_xz: Tensor,
    pub w_hz: Tensor,
    pub b_z: Tensor,
    pub w_xr: Tensor,
    pub w_hr: Tensor,
    pub b_r: Tensor,
    pub w_xh: Tensor,
    pub w_hh: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            w_xz: Tensor::init_uniform(input_dim, hidden, input_dim, rng),
            w_hz: Tensor::init_uniform(hidden, hidden, hidden, rng),
            b_z: Tensor::init_uniform(1, hidden, hidden, rng),
            w_xr: Tensor::init_uniform(input_dim, hidden, input_dim, rng),
            w_hr: Tensor::init_uniform(hidden, hidden, hidden, rng),
            b_r: Tensor::init_uniform(1, hidden, hidden, rng),
            w_xh: Tensor::init_uniform(input_dim, hidden, input_dim, rng),
            w_hh: Tensor::init_uniform(hidden, hidden, hidden, rng),
            b_h: Tensor::init_uniform(1, hidden, hidden, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hz.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_xz.rows()
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (n, t) in [
            ("w_xz", &self.w_xz),
            ("w_hz", &self.w_hz),
            ("b_z", &self.b_z),
            ("w_xr", &self.w_xr),
            ("w_hr", &self.w_hr),
            ("b_r", &self.b_r),
            ("w_xh", &self.w_xh),
            ("w_hh", &self.w_hh),
            ("b_h", &self.b_h),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (n, t) in [
            ("w_xz", &mut self.w_xz),
            ("w_hz", &mut self.w_hz),
            ("b_z", &mut self.b_z),
            ("w_xr", &mut self.w_xr),
            ("w_hr", &mut self.w_hr),
            ("b_r", &mut self.b_r),
            ("w_xh", &mut self.w_xh),
            ("w_hh", &mut self.w_hh),
            ("b_h", &mut self.b_h),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }
}

/// Query/key/value projections for one cross-attention flow.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTriple {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttnTriple {
    fn init(d: usize, rng: &mut impl Rng) -> Self {
        AttnTriple {
            w_q: Tensor::init_uniform(d, d, d, rng),
            w_k: Tensor::init_uniform(d, d, d, rng),
            w_v: Tensor::init_uniform(d, d, d, rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
    }
}

/// Dynamic-filter generators plus the final cross-attention triple.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// Attention vector pooling the query tokens (d x 1).
    pub query_pool: Tensor,
    /// Filter generator applied to the pooled query (d x d).
    pub video_filter: Tensor,
    /// Attention vector pooling the video frames (d x 1).
    pub video_pool: Tensor,
    /// Filter generator applied to the pooled video (d x d).
    pub query_filter: Tensor,
    pub cross: AttnTriple,
}

/// Attention-guided span regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams {
    /// Frame-attention weights (d x 1).
    pub w1: Tensor,
    /// Frame-attention bias (1 x 1).
    pub b1: Tensor,
    /// Span head (2 x d), applied transposed.
    pub w2: Tensor,
    /// Span bias (1 x 2).
    pub b2: Tensor,
}

/// Every trainable tensor, grouped for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub video_encoder: GruParams,
    pub query_forward: GruParams,
    pub query_backward: GruParams,
    pub concept_init: Tensor,
    pub gcn_layers: Vec<Tensor>,
    /// Per layer, per relation (name, weight) pairs; relation order is fixed.
    pub rgcn_layers: Vec<Vec<(String, Tensor)>>,
    pub cem_video: Option<AttnTriple>,
    pub cem_query: Option<AttnTriple>,
    pub cem_shared: Option<AttnTriple>,
    pub fusion: FusionParams,
    pub regressor: RegressorParams,
}

impl ModelParams {
    /// Seeded initialization consistent with `cfg`. `relations` supplies the
    /// per-relation weight names for relational graph mode.
    pub fn init(
        cfg: &ModelConfig,
        vocab_size: usize,
        d_in: usize,
        n_concepts: usize,
        relations: &[String],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 2 {
            return Err(Error::config("vocabulary must include PAD and UNK"));
        }
        if cfg.graph_mode == GraphMode::Relational && relations.is_empty() {
            return Err(Error::config("relational graph mode requires at least one relation"));
        }
        let d = cfg.d;
        let half = d / 2;

        let embedding = Tensor::init_uniform(vocab_size, cfg.d_emb, cfg.d_emb, rng);
        let video_encoder = GruParams::init(d_in, d, rng);
        let query_forward = GruParams::init(cfg.d_emb, half, rng);
        let query_backward = GruParams::init(cfg.d_emb, half, rng);
        let concept_init = Tensor::init_uniform(n_concepts, d, d, rng);

        let (gcn_layers, rgcn_layers) = match cfg.graph_mode {
            GraphMode::Weighted => {
                ((0..cfg.layers).map(|_| Tensor::init_uniform(d, d, d, rng)).collect(), Vec::new())
            }
            GraphMode::Relational => {
                let stack = (0..cfg.layers)
                    .map(|_| {
                        relations
                            .iter()
                            .map(|r| (r.clone(), Tensor::init_uniform(d, d, d, rng)))
                            .collect()
                    })
                    .collect();
                (Vec::new(), stack)
            }
        };

        let (cem_video, cem_query, cem_shared) = match cfg.enhancement_mode {
            EnhancementMode::Separate => {
                (Some(AttnTriple::init(d, rng)), Some(AttnTriple::init(d, rng)), None)
            }
            EnhancementMode::VideoOnly => (Some(AttnTriple::init(d, rng)), None, None),
            EnhancementMode::QueryOnly => (None, Some(AttnTriple::init(d, rng)), None),
            EnhancementMode::Shared => (None, None, Some(AttnTriple::init(d, rng))),
            EnhancementMode::Concat | EnhancementMode::None => (None, None, None),
        };

        let fusion = FusionParams {
            query_pool: Tensor::init_uniform(d, 1, d, rng),
            video_filter: Tensor::init_uniform(d, d, d, rng),
            video_pool: Tensor::init_uniform(d, 1, d, rng),
            query_filter: Tensor::init_uniform(d, d, d, rng),
            cross: AttnTriple::init(d, rng),
        };
        let regressor = RegressorParams {
            w1: Tensor::init_uniform(d, 1, d, rng),
            b1: Tensor::init_uniform(1, 1, d, rng),
            w2: Tensor::init_uniform(2, d, d, rng),
            b2: Tensor::init_uniform(1, 2, d, rng),
        };

        Ok(ModelParams {
            embedding,
            video_encoder,
            query_forward,
            query_backward,
            concept_init,
            gcn_layers,
            rgcn_layers,
            cem_video,
            cem_query,
            cem_shared,
            fusion,
            regressor,
        })
    }

    /// Named tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &self.embedding));
        self.video_encoder.visit("video_enc", &mut out);
        self.query_forward.visit("query_fwd", &mut out);
        self.query_backward.visit("query_bwd", &mut out);
        out.push(("concepts.c0".to_string(), &self.concept_init));
        for (l, w) in self.gcn_layers.iter().enumerate() {
            out.push((format!("gcn.{l}.w"), w));
        }
        for (l, layer) in self.rgcn_layers.iter().enumerate() {
            for (rel, w) in layer {
                out.push((format!("rgcn.{l}.{rel}.w"), w));
            }
        }
        if let Some(t) = &self.cem_video {
            t.visit("cem.video", &mut out);
        }
        if let Some(t) = &self.cem_query {
            t.visit("cem.query", &mut out);
        }
        if let Some(t) = &self.cem_shared {
            t.visit("cem.shared", &mut out);
        }
        out.push(("fusion.query_pool".to_string(), &self.fusion.query_pool));
        out.push(("fusion.video_filter".to_string(), &self.fusion.video_filter));
        out.push(("fusion.video_pool".to_string(), &self.fusion.video_pool));
        out.push(("fusion.query_filter".to_string(), &self.fusion.query_filter));
        self.fusion.cross.visit("fusion.cross", &mut out);
        out.push(("regressor.w1".to_string(), &self.regressor.w1));
        out.push(("regressor.b1".to_string(), &self.regressor.b1));
        out.push(("regressor.w2".to_string(), &self.regressor.w2));
        out.push(("regressor.b2".to_string(), &self.regressor.b2));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &mut self.embedding));
        self.video_encoder.visit_mut("video_enc", &mut out);
        self.query_forward.visit_mut("query_fwd", &mut out);
        self.query_backward.visit_mut("query_bwd", &mut out);
        out.push(("concepts.c0".to_string(), &mut self.concept_init));
        for (l, w) in self.gcn_layers.iter_mut().enumerate() {
            out.push((format!("gcn.{l}.w"), w));
        }
        for (l, layer) in self.rgcn_layers.iter_mut().enumerate() {
            for (rel, w) in layer {
                out.push((format!("rgcn.{l}.{}.w", rel), w));
            }
        }
        if let Some(t) = &mut self.cem_video {
            t.visit_mut("cem.video", &mut out);
        }
        if let Some(t) = &mut self.cem_query {
            t.visit_mut("cem.query", &mut out);
        }
        if let Some(t) = &mut self.cem_shared {
            t.visit_mut("cem.shared", &mut out);
        }
        out.push(("fusion.query_pool".to_string(), &mut self.fusion.query_pool));
        out.push(("fusion.video_filter".to_string(), &mut self.fusion.video_filter));
        out.push(("fusion.video_pool".to_string(), &mut self.fusion.video_pool));
        out.push(("fusion.query_filter".to_string(), &mut self.fusion.query_filter));
        self.fusion.cross.visit_mut("fusion.cross", &mut out);
        out.push(("regressor.w1".to_string(), &mut self.regressor.w1));
        out.push(("regressor.b1".to_string(), &mut self.regressor.b1));
        out.push(("regressor.w2".to_string(), &mut self.regressor.w2));
        out.push(("regressor.b2".to_string(), &mut self.regressor.b2));
        out
    }

    /// Registers every tensor on the tape (setting node ids).
    pub fn register_all(&mut self, tape: &mut Tape) -> Result<()> {
        for (_, t) in self.named_tensors_mut() {
            tape.param(t)?;
        }
        Ok(())
    }

    /// Copies tape gradients into each tensor's grad buffer.
    pub fn pull_grads(&mut self, tape: &Tape, grads: &Grads) -> Result<()> {
        for (_, t) in self.named_tensors_mut() {
            tape.pull_grad(grads, t)?;
        }
        Ok(())
    }

    /// Accumulates tape gradients into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, grads: &Grads) -> Result<()> {
        for (name, t) in self.named_tensors_mut() {
            let id = t
                .node_id()
                .ok_or_else(|| Error::contract(format!("{name} not registered on tape")))?;
            let g = grads.grad(id);
            if t.grad().is_none() {
                t.zero_grad();
            }
            let mut buf = t.grad().unwrap().to_vec();
            for (acc, v) in buf.iter_mut().zip(g) {
                *acc += v;
            }
            t.set_grad(buf)?;
        }
        Ok(())
    }

    /// Flat clone of every tensor, in checkpoint order.
    pub fn tensor_list(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Overwrites every tensor from a flat list in checkpoint order.
    pub fn assign_from(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut slots = self.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), src) in slots.iter_mut().zip(tensors) {
            if slot.shape() != src.shape() {
                return Err(Error::shape(format!(
                    "{name}: shape {:?} cannot be assigned {:?}",
                    slot.shape(),
                    src.shape()
                )));
            }
            **slot = src.clone();
        }
        Ok(())
    }

    /// Gradient buffers per parameter, aligned with `tensor_list` order.
    pub fn grads_in_order(&self, grads: &Grads) -> Result<Vec<Vec<f64>>> {
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let id = t
                    .node_id()
                    .ok_or_else(|| Error::contract(format!("{name} not registered on tape")))?;
                Ok(grads.grad(id).to_vec())
            })
            .collect()
    }

    pub fn zero_all_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }
}

/// Sidecar metadata that makes a checkpoint self-describing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub d_in: usize,
    /// Non-reserved vocabulary tokens in id order.
    pub vocab: Vec<String>,
    /// Concept tokens the parameters were built for.
    pub concepts: Vec<String>,
    /// Relation names for relational graph mode (empty otherwise).
    pub relations: Vec<String>,
    /// Full provenance of the producing run.
    pub config: serde_json::Value,
}

/// Writes `<stem>.bin` (tensor records) and `<stem>.json` (metadata).
pub fn save_model(bin_path: &Path, json_path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let named = params.named_tensors();
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_checkpoint(bin_path, &refs)?;
    let json = serde_json::to_vec_pretty(meta)
        .map_err(|e| Error::json(json_path.display().to_string(), e))?;
    atomic_write(json_path, &json)
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model(bin_path: &Path, json_path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let display = json_path.display().to_string();
    let bytes = std::fs::read(json_path).map_err(|e| Error::io(&display, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(&display, e))?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(
        &meta.model,
        meta.vocab.len() + 2,
        meta.d_in,
        meta.concepts.len(),
        &meta.relations,
        &mut rng,
    )?;

    let records = read_checkpoint(bin_path)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = records.into_iter().collect();
    for (name, slot) in params.named_tensors_mut() {
        let tensor = by_name.remove(&name).ok_or_else(|| {
            Error::config(format!("{}: missing record '{name}'", bin_path.display()))
        })?;
        if tensor.shape() != slot.shape() {
            return Err(Error::shape(format!(
                "{name}: checkpoint shape {:?} does not match expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::config(format!(
            "{}: unexpected record '{extra}'",
            bin_path.display()
        )));
    }
    Ok((params, meta))
}

