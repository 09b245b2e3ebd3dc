//! Commonsense enhancement (residual cross-attention onto concept vectors)
//! and the two-stage dynamic-filter cross-modal fusion.

use super::AttnTriple;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub(super) fn triple_nodes(t: &AttnTriple) -> Result<(NodeId, NodeId, NodeId)> {
    let get = |x: &Tensor| {
        x.node_id().ok_or_else(|| Error::contract("attention triple not registered on tape"))
    };
    Ok((get(&t.w_q)?, get(&t.w_k)?, get(&t.w_v)?))
}

/// Enhancement output with the attention matrix exposed for inspection.
pub struct EnhanceNodes {
    pub out: NodeId,
    /// n x n_C row-stochastic attention.
    pub attention: NodeId,
}

/// Residual cross-attention of source rows onto concept rows:
/// `S + softmax(S Wq (C Wk)^T / sqrt(d)) C Wv`.
pub fn enhance(
    tape: &mut Tape,
    source: NodeId,
    concepts: NodeId,
    triple: &AttnTriple,
) -> Result<EnhanceNodes> {
    let (w_q, w_k, w_v) = triple_nodes(triple)?;
    let (_, d_s) = tape.shape(source);
    let (_, d_c) = tape.shape(concepts);
    let d = tape.shape(w_q).0;
    if d_s != d || d_c != tape.shape(w_k).0 {
        return Err(Error::shape(format!(
            "enhance: source dim {d_s} / concept dim {d_c} incompatible with projections of dim {d}"
        )));
    }
    let q = tape.matmul(source, w_q)?;
    let k = tape.matmul(concepts, w_k)?;
    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, k_t)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attention = tape.softmax_rows(scaled)?;
    let values = tape.matmul(concepts, w_v)?;
    let delta = tape.matmul(attention, values)?;
    let out = tape.add(source, delta)?;
    Ok(EnhanceNodes { out, attention })
}

/// Pools rows of `x` with a learned score vector, softmax over rows.
/// `mask` is an optional 1 x n additive logit row (PAD masking).
fn attention_pool(
    tape: &mut Tape,
    x: NodeId,
    score_vec: NodeId,
    mask: Option<&[f64]>,
) -> Result<NodeId> {
    let scores = tape.matmul(x, score_vec)?; // n x 1
    let mut logits = tape.transpose(scores)?; // 1 x n
    if let Some(mask) = mask {
        let m = tape.leaf(&Tensor::matrix(1, mask.len(), mask.to_vec())?)?;
        logits = tape.add(logits, m)?;
    }
    let weights = tape.softmax_rows(logits)?;
    tape.matmul(weights, x) // 1 x d
}

/// Two dynamic-filter stages plus a final cross-attention:
///
/// 1. query-guided video filter: `V' = V + V .* tanh(pool(Q) Wf)`
/// 2. video-guided query filter: `Q' = Q + Q .* tanh(pool(V) Wg)`
/// 3. `V_loc = V' + softmax(V' Wq (Q' Wk)^T / sqrt(d) + mask) Q' Wv`
pub fn cross_modal_fuse(
    tape: &mut Tape,
    video: NodeId,
    query: NodeId,
    fusion: &super::FusionParams,
    query_pad_mask: &[f64],
) -> Result<NodeId> {
    let (k_rows, _) = tape.shape(query);
    if query_pad_mask.len() != k_rows {
        return Err(Error::shape(format!(
            "pad mask has {} entries for {k_rows} query rows",
            query_pad_mask.len()
        )));
    }
    let get = |x: &Tensor, name: &str| {
        x.node_id().ok_or_else(|| Error::contract(format!("{name} not registered on tape")))
    };
    let query_pool = get(&fusion.query_pool, "fusion.query_pool")?;
    let video_filter = get(&fusion.video_filter, "fusion.video_filter")?;
    let video_pool = get(&fusion.video_pool, "fusion.video_pool")?;
    let query_filter = get(&fusion.query_filter, "fusion.query_filter")?;

    // Stage 1: query-guided video attention.
    let pooled_q = attention_pool(tape, query, query_pool, Some(query_pad_mask))?;
    let f_video_in = tape.matmul(pooled_q, video_filter)?;
    let f_video = tape.tanh(f_video_in)?;
    let v_gated = tape.mul_rows(video, f_video)?;
    let v_prime = tape.add(video, v_gated)?;

    // Stage 2: video-guided query attention.
    let pooled_v = attention_pool(tape, video, video_pool, None)?;
    let f_query_in = tape.matmul(pooled_v, query_filter)?;
    let f_query = tape.tanh(f_query_in)?;
    let q_gated = tape.mul_rows(query, f_query)?;
    let q_prime = tape.add(query, q_gated)?;

    // Stage 3: cross-attention from filtered video onto filtered query.
    let (w_q, w_k, w_v) = triple_nodes(&fusion.cross)?;
    let d = tape.shape(w_q).0;
    let q_proj = tape.matmul(v_prime, w_q)?;
    let k_proj = tape.matmul(q_prime, w_k)?;
    let k_t = tape.transpose(k_proj)?;
    let scores = tape.matmul(q_proj, k_t)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let mask_row = tape.leaf(&Tensor::matrix(1, k_rows, query_pad_mask.to_vec())?)?;
    let masked = tape.add_rows(scaled, mask_row)?;
    let attention = tape.softmax_rows(masked)?;
    let values = tape.matmul(q_prime, w_v)?;
    let delta = tape.matmul(attention, values)?;
    tape.add(v_prime, delta)
}
