//! Full localization pass: encoders, concept enhancement dispatch, fusion,
//! and attention-guided span regression.

use super::concept::{gcn_encode, rgcn_encode, ConceptBank};
use super::encoder::{encode_query, encode_video};
use super::fusion::{cross_modal_fuse, enhance};
use super::{AttnTriple, EnhancementMode, FusionStage, GraphMode, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::proposal::{FrameFeatures, MomentSpan};
use crate::tensor::{NodeId, Tape};

/// Tape handles to the quantities the losses consume.
pub struct ForwardNodes {
    /// T x 1 per-frame attention in (0, 1).
    pub attention: NodeId,
    /// 1 x 2 unclamped span prediction.
    pub span_raw: NodeId,
}

/// Eager view of one forward pass.
pub struct ForwardOutput {
    pub attention: Vec<f64>,
    pub span_raw: (f64, f64),
    pub span: MomentSpan,
}

/// Per-frame sigmoid attention, attention-pooled feature, and the raw span
/// head output.
pub fn regress_span(
    tape: &mut Tape,
    params: &ModelParams,
    video_loc: NodeId,
) -> Result<ForwardNodes> {
    let get = |t: &crate::tensor::Tensor, name: &str| {
        t.node_id().ok_or_else(|| Error::contract(format!("{name} not registered on tape")))
    };
    let w1 = get(&params.regressor.w1, "regressor.w1")?;
    let b1 = get(&params.regressor.b1, "regressor.b1")?;
    let w2 = get(&params.regressor.w2, "regressor.w2")?;
    let b2 = get(&params.regressor.b2, "regressor.b2")?;

    let scores = tape.matmul(video_loc, w1)?; // T x 1
    let shifted = tape.add_rows(scores, b1)?;
    let attention = tape.sigmoid(shifted)?;

    let weights = tape.transpose(attention)?; // 1 x T
    let pooled = tape.matmul(weights, video_loc)?; // 1 x d

    let w2_t = tape.transpose(w2)?; // d x 2
    let head = tape.matmul(pooled, w2_t)?;
    let span_raw = tape.add(head, b2)?;
    Ok(ForwardNodes { attention, span_raw })
}

/// Clamps a raw prediction into a valid span: both ends into [0, 1], then the
/// end pulled up to the start.
pub fn clamp_span(raw: (f64, f64)) -> MomentSpan {
    let s = raw.0.clamp(0.0, 1.0);
    let e = raw.1.clamp(0.0, 1.0).max(s);
    MomentSpan::new(s, e).expect("clamped span is valid")
}

fn enhance_out(
    tape: &mut Tape,
    source: NodeId,
    concepts: NodeId,
    triple: Option<&AttnTriple>,
    what: &str,
) -> Result<NodeId> {
    let triple = triple.ok_or_else(|| {
        Error::config(format!("enhancement mode needs the {what} projection triple"))
    })?;
    Ok(enhance(tape, source, concepts, triple)?.out)
}

/// Builds the whole localization graph on the tape and returns the loss-facing
/// nodes. Parameters must already be registered on this tape.
pub fn forward_nodes(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &FrameFeatures,
    token_ids: &[u32],
    bank: &ConceptBank,
) -> Result<ForwardNodes> {
    cfg.validate()?;
    let video = encode_video(tape, params, frames)?;
    let query = encode_query(tape, params, token_ids, cfg.k)?;

    let concepts = match cfg.graph_mode {
        GraphMode::Weighted => gcn_encode(tape, params, bank)?,
        GraphMode::Relational => rgcn_encode(tape, params, bank)?,
    };

    let mut pad_mask = query.pad_mask;
    let (video_in, query_in) = match (cfg.fusion_stage, cfg.enhancement_mode) {
        (_, EnhancementMode::None) | (FusionStage::Post, _) => (video, query.node),
        (FusionStage::Pre, EnhancementMode::Separate) => (
            enhance_out(tape, video, concepts, params.cem_video.as_ref(), "video")?,
            enhance_out(tape, query.node, concepts, params.cem_query.as_ref(), "query")?,
        ),
        (FusionStage::Pre, EnhancementMode::VideoOnly) => (
            enhance_out(tape, video, concepts, params.cem_video.as_ref(), "video")?,
            query.node,
        ),
        (FusionStage::Pre, EnhancementMode::QueryOnly) => (
            video,
            enhance_out(tape, query.node, concepts, params.cem_query.as_ref(), "query")?,
        ),
        (FusionStage::Pre, EnhancementMode::Shared) => (
            enhance_out(tape, video, concepts, params.cem_shared.as_ref(), "shared")?,
            enhance_out(tape, query.node, concepts, params.cem_shared.as_ref(), "shared")?,
        ),
        (FusionStage::Pre, EnhancementMode::Concat) => {
            let extended = tape.concat_rows(&[query.node, concepts])?;
            pad_mask.extend(std::iter::repeat(0.0).take(bank.n_concepts()));
            (video, extended)
        }
    };

    let fused = cross_modal_fuse(tape, video_in, query_in, &params.fusion, &pad_mask)?;

    let video_loc = if cfg.fusion_stage == FusionStage::Post {
        match cfg.enhancement_mode {
            EnhancementMode::None => fused,
            EnhancementMode::Separate | EnhancementMode::VideoOnly => {
                enhance_out(tape, fused, concepts, params.cem_video.as_ref(), "video")?
            }
            EnhancementMode::QueryOnly => {
                enhance_out(tape, fused, concepts, params.cem_query.as_ref(), "query")?
            }
            EnhancementMode::Shared => {
                enhance_out(tape, fused, concepts, params.cem_shared.as_ref(), "shared")?
            }
            EnhancementMode::Concat => unreachable!("rejected by validate"),
        }
    } else {
        fused
    };

    regress_span(tape, params, video_loc)
}

/// One-shot forward pass on a fresh tape, returning eager outputs.
pub fn forward(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    frames: &FrameFeatures,
    token_ids: &[u32],
    bank: &ConceptBank,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    params.register_all(&mut tape)?;
    let nodes = forward_nodes(&mut tape, params, cfg, frames, token_ids, bank)?;
    let attention = tape.value(nodes.attention).to_vec();
    let raw = tape.value(nodes.span_raw);
    let span_raw = (raw[0], raw[1]);
    Ok(ForwardOutput { attention, span_raw, span: clamp_span(span_raw) })
}
