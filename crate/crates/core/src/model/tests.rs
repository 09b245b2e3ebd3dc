use super::*;
use crate::kgraph::{normalize_adjacency, ConceptGraph};
use crate::proposal::FrameFeatures;
use crate::tensor::{grad_check, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_config(mode: EnhancementMode, stage: FusionStage, graph: GraphMode) -> ModelConfig {
    ModelConfig {
        d: 6,
        d_emb: 4,
        layers: 2,
        enhancement_mode: mode,
        fusion_stage: stage,
        graph_mode: graph,
        k: 2,
        frames: 4,
    }
}

fn toy_graph(relational: bool) -> ConceptGraph {
    let counts = vec![
        0, 2, 1, //
        1, 0, 0, //
        0, 0, 0,
    ];
    let relational_counts = relational.then(|| {
        vec![
            ("AtLocation".to_string(), vec![0, 2, 0, 1, 0, 0, 0, 0, 0]),
            ("UsedFor".to_string(), vec![0, 0, 1, 0, 0, 0, 0, 0, 0]),
        ]
    });
    normalize_adjacency(ConceptGraph {
        concepts: vec!["book".into(), "shelf".into(), "cup".into()],
        relation_set: "F".into(),
        counts,
        adjacency: None,
        relational_counts,
        relational_adjacency: None,
    })
}

fn toy_setup(
    mode: EnhancementMode,
    stage: FusionStage,
    graph_mode: GraphMode,
    seed: u64,
) -> (ModelConfig, ModelParams, ConceptBank, FrameFeatures, Vec<u32>) {
    let cfg = toy_config(mode, stage, graph_mode);
    let graph = toy_graph(graph_mode == GraphMode::Relational);
    let relations: Vec<String> = graph
        .relational_counts
        .as_ref()
        .map(|s| s.iter().map(|(r, _)| r.clone()).collect())
        .unwrap_or_default();
    let mut r = rng(seed);
    let params = ModelParams::init(&cfg, 4, 3, 3, &relations, &mut r).unwrap();
    let bank = ConceptBank::new(graph).unwrap();
    let frames_data: Vec<Vec<f64>> =
        (0..cfg.frames).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let frames =
        FrameFeatures::new("toy", crate::tensor::Tensor::from_rows(&frames_data).unwrap()).unwrap();
    (cfg, params, bank, frames, vec![2, 3])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-f64 GRU step used as the hand-unrolled oracle.
fn gru_step_oracle(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let d = p.hidden_dim();
    let lin = |w_x: &Tensor, w_h: &Tensor, b: &Tensor, gate_h: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| {
                let mut s = b.data()[j];
                for (i, &xi) in x.iter().enumerate() {
                    s += xi * w_x.at(i, j);
                }
                for (i, &hi) in gate_h.iter().enumerate() {
                    s += hi * w_h.at(i, j);
                }
                s
            })
            .collect()
    };
    let z: Vec<f64> = lin(&p.w_xz, &p.w_hz, &p.b_z, h).iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = lin(&p.w_xr, &p.w_hr, &p.b_r, h).iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = lin(&p.w_xh, &p.w_hh, &p.b_h, &rh).iter().map(|&v| v.tanh()).collect();
    (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect()
}

#[test]
fn encode_video_shape_contract() {
    let (cfg, mut params, _, frames, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        31,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let v = encode_video(&mut tape, &params, &frames).unwrap();
    assert_eq!(tape.shape(v), (cfg.frames, cfg.d));
}

#[test]
fn encode_video_zero_weights_give_zero_outputs() {
    let (_, mut params, _, frames, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        32,
    );
    for (name, t) in params.named_tensors_mut() {
        if name.starts_with("video_enc") {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let v = encode_video(&mut tape, &params, &frames).unwrap();
    assert!(tape.value(v).iter().all(|&x| x == 0.0));
}

#[test]
fn encode_video_matches_hand_unrolled_recurrence() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        33,
    );
    let rows = vec![vec![0.3, -0.7, 0.2], vec![-0.1, 0.5, 0.9], vec![0.8, 0.0, -0.4]];
    let frames = FrameFeatures::new("v", Tensor::from_rows(&rows).unwrap()).unwrap();

    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let v = encode_video(&mut tape, &params, &frames).unwrap();

    let mut h = vec![0.0; 6];
    for (t, x) in rows.iter().enumerate() {
        h = gru_step_oracle(&params.video_encoder, x, &h);
        for j in 0..6 {
            assert!(
                (tape.value(v)[t * 6 + j] - h[j]).abs() < 1e-12,
                "frame {t} dim {j}"
            );
        }
    }
}

#[test]
fn encode_video_rejects_wrong_feature_dim() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        34,
    );
    let frames =
        FrameFeatures::new("v", Tensor::from_rows(&[vec![0.0; 5], vec![1.0; 5]]).unwrap()).unwrap();
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    assert!(matches!(
        encode_video(&mut tape, &params, &frames),
        Err(crate::error::Error::Shape(_))
    ));
}

#[test]
fn encode_query_shape_and_pad_mask() {
    let (cfg, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        35,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let q = encode_query(&mut tape, &params, &[3], cfg.k).unwrap();
    assert_eq!(tape.shape(q.node), (cfg.k, cfg.d));
    assert_eq!(q.pad_mask[0], 0.0);
    assert!(q.pad_mask[1] < -1e8);
}

#[test]
fn encode_query_rejects_out_of_vocab_ids() {
    let (cfg, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        36,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    assert!(matches!(
        encode_query(&mut tape, &params, &[9], cfg.k),
        Err(crate::error::Error::Contract(_))
    ));
}

#[test]
fn encode_query_matches_hand_unrolled_bidirectional_recurrence() {
    let (cfg, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        37,
    );
    let ids = [2u32, 3u32];
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let q = encode_query(&mut tape, &params, &ids, cfg.k).unwrap();

    let emb = |id: u32| -> Vec<f64> {
        (0..cfg.d_emb).map(|j| params.embedding.at(id as usize, j)).collect()
    };
    let x: Vec<Vec<f64>> = ids.iter().map(|&i| emb(i)).collect();

    let mut fwd = Vec::new();
    let mut h = vec![0.0; 3];
    for xi in &x {
        h = gru_step_oracle(&params.query_forward, xi, &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![vec![]; 2];
    let mut hb = vec![0.0; 3];
    for (pos, xi) in x.iter().enumerate().rev() {
        hb = gru_step_oracle(&params.query_backward, xi, &hb);
        bwd[pos] = hb.clone();
    }
    for pos in 0..2 {
        for j in 0..3 {
            assert!((tape.value(q.node)[pos * 6 + j] - fwd[pos][j]).abs() < 1e-12);
            assert!((tape.value(q.node)[pos * 6 + 3 + j] - bwd[pos][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_query_palindrome_with_tied_directions_is_position_symmetric() {
    let (cfg, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        38,
    );
    params.query_backward = params.query_forward.clone();
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    // Palindromic token sequence of length k = 2: both positions equal.
    let q = encode_query(&mut tape, &params, &[3, 3], cfg.k).unwrap();
    let v = tape.value(q.node);
    let (half, d) = (3, 6);
    for j in 0..half {
        // out[i] = [f_i ; f_{k-1-i}] under tied weights on a palindrome.
        assert!((v[j] - v[d + half + j]).abs() < 1e-12);
        assert!((v[half + j] - v[d + j]).abs() < 1e-12);
    }
}

#[test]
fn gcn_identity_case_returns_initial_features() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        39,
    );
    // Single layer with identity weights over an identity adjacency.
    params.gcn_layers = vec![Tensor::matrix(
        6,
        6,
        (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()];
    let graph = normalize_adjacency(ConceptGraph {
        concepts: vec!["a".into(), "b".into(), "c".into()],
        relation_set: String::new(),
        counts: vec![0; 9],
        adjacency: None,
        relational_counts: None,
        relational_adjacency: None,
    });
    let bank = ConceptBank::new(graph).unwrap();
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let c = gcn_encode(&mut tape, &params, &bank).unwrap();
    assert_eq!(tape.value(c), params.concept_init.data());
}

#[test]
fn gcn_preserves_constant_rows_under_row_stochastic_mixing() {
    let (_, mut params, bank, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        40,
    );
    params.concept_init = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.7, 0.1, -0.5, 0.9]; 3]).unwrap();
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let c = gcn_encode(&mut tape, &params, &bank).unwrap();
    let v = tape.value(c);
    for row in 1..3 {
        for j in 0..6 {
            assert!((v[row * 6 + j] - v[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn gcn_matches_direct_recomputation() {
    let (_, mut params, bank, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        41,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let c = gcn_encode(&mut tape, &params, &bank).unwrap();

    let a = bank.graph.adjacency().unwrap();
    let matmul = |x: &[f64], y: &Tensor, m: usize, k: usize| -> Vec<f64> {
        let n = y.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += x[i * k + p] * y.at(p, j);
                }
            }
        }
        out
    };
    let mut h: Vec<f64> = params.concept_init.data().to_vec();
    for (l, w) in params.gcn_layers.iter().enumerate() {
        // A (3x3) . h (3x6)
        let mut mixed = vec![0.0; 18];
        for i in 0..3 {
            for p in 0..3 {
                for j in 0..6 {
                    mixed[i * 6 + j] += a.at(i, p) * h[p * 6 + j];
                }
            }
        }
        h = matmul(&mixed, w, 3, 6);
        if l == 0 {
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    for (got, want) in tape.value(c).iter().zip(&h) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn rgcn_single_relation_equals_gcn_exactly() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        42,
    );
    // One relation whose counts are the whole graph.
    let counts = vec![0, 2, 1, 1, 0, 0, 0, 0, 0];
    let graph = normalize_adjacency(ConceptGraph {
        concepts: vec!["a".into(), "b".into(), "c".into()],
        relation_set: String::new(),
        counts: counts.clone(),
        adjacency: None,
        relational_counts: Some(vec![("OnlyRel".to_string(), counts)]),
        relational_adjacency: None,
    });
    let bank = ConceptBank::new(graph).unwrap();

    let mut relational = params.clone();
    relational.rgcn_layers = params
        .gcn_layers
        .iter()
        .map(|w| vec![("OnlyRel".to_string(), w.clone())])
        .collect();
    relational.gcn_layers.clear();

    let mut tape_a = Tape::new();
    params.register_all(&mut tape_a).unwrap();
    let via_gcn = gcn_encode(&mut tape_a, &params, &bank).unwrap();

    let mut tape_b = Tape::new();
    relational.register_all(&mut tape_b).unwrap();
    let via_rgcn = rgcn_encode(&mut tape_b, &relational, &bank).unwrap();

    assert_eq!(tape_a.value(via_gcn), tape_b.value(via_rgcn));
}

#[test]
fn rgcn_zero_weights_give_zero_output() {
    let (_, mut params, bank, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Relational,
        43,
    );
    for layer in params.rgcn_layers.iter_mut() {
        for (_, w) in layer.iter_mut() {
            *w = Tensor::zeros(w.shape().to_vec());
        }
    }
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let c = rgcn_encode(&mut tape, &params, &bank).unwrap();
    assert!(tape.value(c).iter().all(|&x| x == 0.0));
}

#[test]
fn rgcn_matches_direct_recomputation() {
    let (_, mut params, bank, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Relational,
        44,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let c = rgcn_encode(&mut tape, &params, &bank).unwrap();

    let stack = bank.graph.relational_adjacency.as_ref().unwrap();
    let mut h: Vec<f64> = params.concept_init.data().to_vec();
    for (l, layer) in params.rgcn_layers.iter().enumerate() {
        let mut acc = vec![0.0; 18];
        for (rel, w) in layer {
            let a = &stack.iter().find(|(r, _)| r == rel).unwrap().1;
            let mut mixed = vec![0.0; 18];
            for i in 0..3 {
                for p in 0..3 {
                    for j in 0..6 {
                        mixed[i * 6 + j] += a.at(i, p) * h[p * 6 + j];
                    }
                }
            }
            for i in 0..3 {
                for p in 0..6 {
                    for j in 0..6 {
                        acc[i * 6 + j] += mixed[i * 6 + p] * w.at(p, j);
                    }
                }
            }
        }
        h = acc;
        if l + 1 < params.rgcn_layers.len() {
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    for (got, want) in tape.value(c).iter().zip(&h) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn rgcn_on_weighted_graph_is_a_config_error() {
    let (_, mut params, bank, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        45,
    );
    params.rgcn_layers = vec![vec![("X".to_string(), Tensor::zeros(vec![6, 6]))]];
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    assert!(matches!(
        rgcn_encode(&mut tape, &params, &bank),
        Err(crate::error::Error::Config(_))
    ));
}

#[test]
fn enhance_with_zero_values_is_an_exact_identity() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        46,
    );
    params.cem_video.as_mut().unwrap().w_v = Tensor::zeros(vec![6, 6]);
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(99);
    let source = Tensor::matrix(4, 6, (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let concepts = Tensor::matrix(3, 6, (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let s = tape.leaf(&source).unwrap();
    let c = tape.leaf(&concepts).unwrap();
    let e = enhance(&mut tape, s, c, params.cem_video.as_ref().unwrap()).unwrap();
    assert_eq!(tape.value(e.out), source.data());
}

#[test]
fn enhance_singleton_concept_broadcasts_one_value_row() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        47,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(100);
    let source = Tensor::matrix(3, 6, (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let concept = Tensor::matrix(1, 6, (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let s = tape.leaf(&source).unwrap();
    let c = tape.leaf(&concept).unwrap();
    let triple = params.cem_video.as_ref().unwrap();
    let e = enhance(&mut tape, s, c, triple).unwrap();

    // softmax over one concept is 1, so out = S + (c . Wv) on every row.
    let mut cv = vec![0.0; 6];
    for j in 0..6 {
        for p in 0..6 {
            cv[j] += concept.data()[p] * triple.w_v.at(p, j);
        }
    }
    for i in 0..3 {
        for j in 0..6 {
            let want = source.at(i, j) + cv[j];
            assert!((tape.value(e.out)[i * 6 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn enhance_matches_direct_recomputation_and_attention_rows_sum_to_one() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        48,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(101);
    let source = Tensor::matrix(2, 6, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let concepts = Tensor::matrix(3, 6, (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let s = tape.leaf(&source).unwrap();
    let c = tape.leaf(&concepts).unwrap();
    let triple = params.cem_video.as_ref().unwrap();
    let e = enhance(&mut tape, s, c, triple).unwrap();

    let proj = |x: &Tensor, w: &Tensor| -> Vec<f64> {
        let (m, k) = (x.rows(), x.cols());
        let n = w.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += x.at(i, p) * w.at(p, j);
                }
            }
        }
        out
    };
    let q = proj(&source, &triple.w_q);
    let key = proj(&concepts, &triple.w_k);
    let val = proj(&concepts, &triple.w_v);
    for i in 0..2 {
        let logits: Vec<f64> = (0..3)
            .map(|j| {
                (0..6).map(|p| q[i * 6 + p] * key[j * 6 + p]).sum::<f64>() / 6.0_f64.sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let attn: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let got_attn = &tape.value(e.attention)[i * 3..(i + 1) * 3];
        assert!((got_attn.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((got_attn[j] - attn[j]).abs() < 1e-12);
        }
        for j in 0..6 {
            let delta: f64 = (0..3).map(|p| attn[p] * val[p * 6 + j]).sum();
            let want = source.at(i, j) + delta;
            assert!((tape.value(e.out)[i * 6 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_with_zero_filters_and_zero_values_passes_video_through() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        49,
    );
    params.fusion.video_filter = Tensor::zeros(vec![6, 6]);
    params.fusion.query_filter = Tensor::zeros(vec![6, 6]);
    params.fusion.cross.w_v = Tensor::zeros(vec![6, 6]);
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(102);
    let video = Tensor::matrix(4, 6, (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let query = Tensor::matrix(2, 6, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let v = tape.leaf(&video).unwrap();
    let q = tape.leaf(&query).unwrap();
    let out = cross_modal_fuse(&mut tape, v, q, &params.fusion, &[0.0, 0.0]).unwrap();
    assert_eq!(tape.value(out), video.data());
}

#[test]
fn fusion_matches_direct_recomputation_of_the_three_stages() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        50,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(103);
    let t_frames = 3;
    let k = 2;
    let video =
        Tensor::matrix(t_frames, 6, (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let query = Tensor::matrix(k, 6, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mask = vec![0.0, -1e9];
    let v = tape.leaf(&video).unwrap();
    let q = tape.leaf(&query).unwrap();
    let out = cross_modal_fuse(&mut tape, v, q, &params.fusion, &mask).unwrap();

    let f = &params.fusion;
    let softmax = |logits: &[f64]| -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    };
    let matvec = |x: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..x.cols())
            .map(|j| (0..x.rows()).map(|i| v[i] * x.at(i, j)).sum())
            .collect()
    };

    // Stage 1.
    let q_scores: Vec<f64> = (0..k)
        .map(|i| (0..6).map(|j| query.at(i, j) * f.query_pool.at(j, 0)).sum::<f64>() + mask[i])
        .collect();
    let q_weights = softmax(&q_scores);
    let pooled_q: Vec<f64> =
        (0..6).map(|j| (0..k).map(|i| q_weights[i] * query.at(i, j)).sum()).collect();
    let f_video: Vec<f64> = matvec(&f.video_filter, &pooled_q).iter().map(|x| x.tanh()).collect();
    let v1: Vec<f64> = (0..t_frames * 6)
        .map(|idx| video.data()[idx] * (1.0 + f_video[idx % 6]))
        .collect();

    // Stage 2.
    let v_scores: Vec<f64> = (0..t_frames)
        .map(|i| (0..6).map(|j| video.at(i, j) * f.video_pool.at(j, 0)).sum())
        .collect();
    let v_weights = softmax(&v_scores);
    let pooled_v: Vec<f64> =
        (0..6).map(|j| (0..t_frames).map(|i| v_weights[i] * video.at(i, j)).sum()).collect();
    let f_query: Vec<f64> = matvec(&f.query_filter, &pooled_v).iter().map(|x| x.tanh()).collect();
    let q1: Vec<f64> =
        (0..k * 6).map(|idx| query.data()[idx] * (1.0 + f_query[idx % 6])).collect();

    // Stage 3.
    let proj = |x: &[f64], rows: usize, w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; rows * 6];
        for i in 0..rows {
            for p in 0..6 {
                for j in 0..6 {
                    out[i * 6 + j] += x[i * 6 + p] * w.at(p, j);
                }
            }
        }
        out
    };
    let qp = proj(&v1, t_frames, &f.cross.w_q);
    let kp = proj(&q1, k, &f.cross.w_k);
    let vp = proj(&q1, k, &f.cross.w_v);
    for i in 0..t_frames {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                (0..6).map(|p| qp[i * 6 + p] * kp[j * 6 + p]).sum::<f64>() / 6.0_f64.sqrt()
                    + mask[j]
            })
            .collect();
        let attn = softmax(&logits);
        for j in 0..6 {
            let delta: f64 = (0..k).map(|p| attn[p] * vp[p * 6 + j]).sum();
            let want = v1[i * 6 + j] + delta;
            assert!(
                (tape.value(out)[i * 6 + j] - want).abs() < 1e-12,
                "frame {i} dim {j}"
            );
        }
    }
}

#[test]
fn regress_span_zero_head_returns_the_bias() {
    let (_, mut params, bank, frames, ids) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        51,
    );
    params.regressor.w2 = Tensor::zeros(vec![2, 6]);
    params.regressor.b2 = Tensor::matrix(1, 2, vec![0.125, 0.875]).unwrap();
    let cfg = toy_config(EnhancementMode::Separate, FusionStage::Pre, GraphMode::Weighted);
    let out = forward(&mut params, &cfg, &frames, &ids, &bank).unwrap();
    assert_eq!(out.span_raw, (0.125, 0.875));
    assert!(out.attention.iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn regress_span_matches_direct_recomputation() {
    let (_, mut params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        52,
    );
    let mut tape = Tape::new();
    params.register_all(&mut tape).unwrap();
    let mut r = rng(104);
    let v_loc = Tensor::matrix(4, 6, (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let v = tape.leaf(&v_loc).unwrap();
    let nodes = regress_span(&mut tape, &params, v).unwrap();

    let reg = &params.regressor;
    let a: Vec<f64> = (0..4)
        .map(|i| {
            sigmoid(
                (0..6).map(|j| v_loc.at(i, j) * reg.w1.at(j, 0)).sum::<f64>() + reg.b1.data()[0],
            )
        })
        .collect();
    let pooled: Vec<f64> =
        (0..6).map(|j| (0..4).map(|i| a[i] * v_loc.at(i, j)).sum()).collect();
    for (got, want) in tape.value(nodes.attention).iter().zip(&a) {
        assert!((got - want).abs() < 1e-12);
    }
    for e in 0..2 {
        let want: f64 =
            (0..6).map(|j| pooled[j] * reg.w2.at(e, j)).sum::<f64>() + reg.b2.data()[e];
        assert!((tape.value(nodes.span_raw)[e] - want).abs() < 1e-12);
    }
}

#[test]
fn clamp_span_orders_and_bounds_endpoints() {
    let s = clamp_span((-0.5, 0.3));
    assert_eq!((s.start(), s.end()), (0.0, 0.3));
    let s2 = clamp_span((0.8, 0.2));
    assert_eq!((s2.start(), s2.end()), (0.8, 0.8));
    let s3 = clamp_span((0.4, 1.7));
    assert_eq!((s3.start(), s3.end()), (0.4, 1.0));
}

#[test]
fn forward_none_mode_equals_separate_mode_with_zero_value_projections() {
    let (cfg_sep, mut params, bank, frames, ids) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        53,
    );
    params.cem_video.as_mut().unwrap().w_v = Tensor::zeros(vec![6, 6]);
    params.cem_query.as_mut().unwrap().w_v = Tensor::zeros(vec![6, 6]);
    let zeroed = forward(&mut params, &cfg_sep, &frames, &ids, &bank).unwrap();

    let cfg_none = toy_config(EnhancementMode::None, FusionStage::Pre, GraphMode::Weighted);
    let plain = forward(&mut params, &cfg_none, &frames, &ids, &bank).unwrap();
    assert_eq!(zeroed.span_raw, plain.span_raw);
    assert_eq!(zeroed.attention, plain.attention);
}

#[test]
fn forward_shared_equals_separate_with_tied_triples() {
    let (cfg, mut params, bank, frames, ids) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        54,
    );
    let tied = params.cem_video.clone();
    params.cem_query = tied.clone();
    let separate = forward(&mut params, &cfg, &frames, &ids, &bank).unwrap();

    let mut shared_params = params.clone();
    shared_params.cem_shared = tied;
    shared_params.cem_video = None;
    shared_params.cem_query = None;
    let cfg_shared = toy_config(EnhancementMode::Shared, FusionStage::Pre, GraphMode::Weighted);
    let shared = forward(&mut shared_params, &cfg_shared, &frames, &ids, &bank).unwrap();
    assert_eq!(separate.span_raw, shared.span_raw);
    assert_eq!(separate.attention, shared.attention);
}

#[test]
fn every_mode_combination_runs_and_returns_finite_outputs() {
    let cases = [
        (EnhancementMode::Separate, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::VideoOnly, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::QueryOnly, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::Shared, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::Concat, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::None, FusionStage::Pre, GraphMode::Weighted),
        (EnhancementMode::Separate, FusionStage::Post, GraphMode::Weighted),
        (EnhancementMode::Separate, FusionStage::Pre, GraphMode::Relational),
        (EnhancementMode::Separate, FusionStage::Post, GraphMode::Relational),
    ];
    for (i, &(mode, stage, graph)) in cases.iter().enumerate() {
        let (cfg, mut params, bank, frames, ids) = toy_setup(mode, stage, graph, 60 + i as u64);
        let out = forward(&mut params, &cfg, &frames, &ids, &bank).unwrap();
        assert!(out.attention.iter().all(|a| a.is_finite()));
        assert!(out.span_raw.0.is_finite() && out.span_raw.1.is_finite());
        assert!(out.span.start() <= out.span.end());
    }
}

#[test]
fn concat_with_post_fusion_is_a_config_error() {
    let cfg = toy_config(EnhancementMode::Concat, FusionStage::Post, GraphMode::Weighted);
    assert!(matches!(cfg.validate(), Err(crate::error::Error::Config(_))));
}

#[test]
fn full_forward_gradients_match_finite_differences_on_a_two_frame_input() {
    let (cfg, params, bank, _, ids) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        55,
    );
    let mut r = rng(105);
    let frames = FrameFeatures::new(
        "fd",
        Tensor::from_rows(&[
            (0..3).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
            (0..3).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        ])
        .unwrap(),
    )
    .unwrap();
    let target = [0.2, 0.7];
    let template = params.clone();
    let flat = params.tensor_list();

    let report = grad_check(&flat, 1e-5, |ts| {
        let mut p = template.clone();
        p.assign_from(ts)?;
        let mut tape = Tape::new();
        p.register_all(&mut tape)?;
        let nodes = forward_nodes(&mut tape, &p, &cfg, &frames, &ids, &bank)?;
        let l1 = tape.smooth_l1(nodes.span_raw, &target)?;
        let treg = tape.sum(l1)?;
        let log_a = tape.log(nodes.attention)?;
        let ta_sum = tape.sum(log_a)?;
        let ta = tape.scale(ta_sum, -0.35)?;
        let loss = tape.add(treg, ta)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar_value(loss)?, p.grads_in_order(&grads)?))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn checkpoint_roundtrip_restores_every_parameter() {
    let (cfg, params, _, _, _) = toy_setup(
        EnhancementMode::Separate,
        FusionStage::Pre,
        GraphMode::Weighted,
        56,
    );
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("model.bin");
    let json = dir.path().join("model.json");
    let meta = CheckpointMeta {
        model: cfg,
        d_in: 3,
        vocab: vec!["cup".into(), "table".into()],
        concepts: vec!["book".into(), "shelf".into(), "cup".into()],
        relations: vec![],
        config: serde_json::json!({"seed": 1}),
    };
    save_model(&bin, &json, &params, &meta).unwrap();
    let (loaded, meta_back) = load_model(&bin, &json).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(meta_back.vocab, meta.vocab);
}
