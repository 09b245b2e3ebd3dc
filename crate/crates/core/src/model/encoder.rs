//! Gated recurrent encoders for frame features and query tokens.

use super::{GruParams, ModelParams};
use crate::error::{Error, Result};
use crate::proposal::FrameFeatures;
use crate::pseudoquery::PAD_ID;
use crate::tensor::{NodeId, Tape, Tensor};

/// Additive logit applied to padded attention positions.
pub const PAD_MASK_LOGIT: f64 = -1e9;

struct GruNodes {
    w_xz: NodeId,
    w_hz: NodeId,
    b_z: NodeId,
    w_xr: NodeId,
    w_hr: NodeId,
    b_r: NodeId,
    w_xh: NodeId,
    w_hh: NodeId,
    b_h: NodeId,
}

fn gru_nodes(p: &GruParams) -> Result<GruNodes> {
    let get = |t: &Tensor, name: &str| {
        t.node_id().ok_or_else(|| Error::contract(format!("{name} not registered on tape")))
    };
    Ok(GruNodes {
        w_xz: get(&p.w_xz, "gru.w_xz")?,
        w_hz: get(&p.w_hz, "gru.w_hz")?,
        b_z: get(&p.b_z, "gru.b_z")?,
        w_xr: get(&p.w_xr, "gru.w_xr")?,
        w_hr: get(&p.w_hr, "gru.w_hr")?,
        b_r: get(&p.b_r, "gru.b_r")?,
        w_xh: get(&p.w_xh, "gru.w_xh")?,
        w_hh: get(&p.w_hh, "gru.w_hh")?,
        b_h: get(&p.b_h, "gru.b_h")?,
    })
}

/// One recurrence step: returns the new hidden state (1 x hidden).
fn gru_step(tape: &mut Tape, g: &GruNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let zx = tape.matmul(x, g.w_xz)?;
    let zh = tape.matmul(h, g.w_hz)?;
    let z_sum = tape.add(zx, zh)?;
    let z_in = tape.add_rows(z_sum, g.b_z)?;
    let z = tape.sigmoid(z_in)?;

    let rx = tape.matmul(x, g.w_xr)?;
    let rh = tape.matmul(h, g.w_hr)?;
    let r_sum = tape.add(rx, rh)?;
    let r_in = tape.add_rows(r_sum, g.b_r)?;
    let r = tape.sigmoid(r_in)?;

    let gated = tape.mul(r, h)?;
    let cx = tape.matmul(x, g.w_xh)?;
    let ch = tape.matmul(gated, g.w_hh)?;
    let c_sum = tape.add(cx, ch)?;
    let c_in = tape.add_rows(c_sum, g.b_h)?;
    let candidate = tape.tanh(c_in)?;

    // h' = (1 - z) * h + z * candidate
    let zh_old = tape.mul(z, h)?;
    let keep = tape.sub(h, zh_old)?;
    let update = tape.mul(z, candidate)?;
    tape.add(keep, update)
}

/// Runs one direction over the given input rows, in order.
fn gru_sequence(
    tape: &mut Tape,
    g: &GruNodes,
    inputs: &[NodeId],
    hidden: usize,
) -> Result<Vec<NodeId>> {
    let mut h = tape.leaf(&Tensor::zeros(vec![1, hidden]))?;
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_step(tape, g, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Contextually encodes T frame rows into T x d hidden states.
pub fn encode_video(
    tape: &mut Tape,
    params: &ModelParams,
    frames: &FrameFeatures,
) -> Result<NodeId> {
    if frames.dim() != params.video_encoder.input_dim() {
        return Err(Error::shape(format!(
            "video features have dim {}, encoder expects {}",
            frames.dim(),
            params.video_encoder.input_dim()
        )));
    }
    let g = gru_nodes(&params.video_encoder)?;
    let input = tape.leaf(frames.matrix())?;
    let rows: Vec<NodeId> =
        (0..frames.frames()).map(|i| tape.row(input, i)).collect::<Result<_>>()?;
    let states = gru_sequence(tape, &g, &rows, params.video_encoder.hidden_dim())?;
    tape.concat_rows(&states)
}

/// Query encoding: k x d hidden states plus the additive PAD mask row.
pub struct QueryEncoding {
    pub node: NodeId,
    /// 1 x k additive attention mask (0 for real tokens, large-negative for PAD).
    pub pad_mask: Vec<f64>,
}

/// Embeds up to k token ids (PAD-extended), runs both recurrent directions at
/// d/2, and concatenates them per position.
pub fn encode_query(
    tape: &mut Tape,
    params: &ModelParams,
    token_ids: &[u32],
    k: usize,
) -> Result<QueryEncoding> {
    if token_ids.len() > k {
        return Err(Error::contract(format!(
            "query has {} tokens, maximum is {k}",
            token_ids.len()
        )));
    }
    let vocab = params.embedding.rows() as u32;
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mut padded: Vec<u32> = token_ids.to_vec();
    padded.resize(k, PAD_ID);
    let pad_mask: Vec<f64> =
        (0..k).map(|i| if i < token_ids.len() { 0.0 } else { PAD_MASK_LOGIT }).collect();

    let emb_table = params
        .embedding
        .node_id()
        .ok_or_else(|| Error::contract("embedding not registered on tape"))?;
    let indices: Vec<usize> = padded.iter().map(|&id| id as usize).collect();
    let embedded = tape.gather(emb_table, &indices)?;
    let rows: Vec<NodeId> = (0..k).map(|i| tape.row(embedded, i)).collect::<Result<_>>()?;

    let half = params.query_forward.hidden_dim();
    let fwd_nodes = gru_nodes(&params.query_forward)?;
    let fwd = gru_sequence(tape, &fwd_nodes, &rows, half)?;

    let bwd_nodes = gru_nodes(&params.query_backward)?;
    let reversed: Vec<NodeId> = rows.iter().rev().copied().collect();
    let mut bwd = gru_sequence(tape, &bwd_nodes, &reversed, half)?;
    bwd.reverse();

    let fwd_cat = tape.concat_rows(&fwd)?;
    let bwd_cat = tape.concat_rows(&bwd)?;
    let node = tape.concat_cols(fwd_cat, bwd_cat)?;
    Ok(QueryEncoding { node, pad_mask })
}
