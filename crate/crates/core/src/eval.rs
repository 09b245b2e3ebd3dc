//! Temporal IoU, recall-at-threshold aggregation, and the inference path over
//! annotated evaluation data.

use crate::data::{DatasetManifest, EvalAnnotation};
use crate::error::{Error, Result};
use crate::kgraph::ConceptGraph;
use crate::model::{forward, CheckpointMeta, ConceptBank, ModelParams};
use crate::proposal::{FrameFeatures, MomentSpan};
use crate::pseudoquery::{simplify_query, Vocabulary, UNK_ID};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two spans. Two identical degenerate spans rate
/// 1; a degenerate span only matches an equal degenerate prediction.
pub fn temporal_iou(p: MomentSpan, g: MomentSpan) -> f64 {
    let inter = (p.end().min(g.end()) - p.start().max(g.start())).max(0.0);
    let union = p.duration() + g.duration() - inter;
    if union <= 0.0 {
        return if p == g { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Aggregated localization quality. Percentages are in [0, 100].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_video: Option<Vec<PerVideoRow>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerVideoRow {
    pub video_id: String,
    pub query: String,
    pub predicted: MomentSpan,
    pub target: MomentSpan,
    pub iou: f64,
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

/// Computes R@k (inclusive, `iou >= k`) and mean IoU over the given list.
pub fn aggregate(ious: &[f64], thresholds: &[f64]) -> Result<EvalReport> {
    if ious.is_empty() {
        return Err(Error::contract("aggregate requires at least one IoU value"));
    }
    let n = ious.len();
    let mut r_at = BTreeMap::new();
    for &t in thresholds {
        let hits = ious.iter().filter(|&&x| x >= t).count();
        r_at.insert(threshold_key(t), 100.0 * hits as f64 / n as f64);
    }
    let miou = 100.0 * (ious.iter().sum::<f64>() / n as f64);
    Ok(EvalReport { r_at, miou, n, per_video: None })
}

/// One video's evaluation inputs.
pub struct EvalInstance {
    pub video_id: String,
    pub frames: FrameFeatures,
    pub annotations: Vec<EvalAnnotation>,
}

/// Loads evaluation instances from a dataset manifest.
pub fn load_eval_instances(manifest_path: &Path) -> Result<Vec<EvalInstance>> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    let mut out = Vec::new();
    for v in &manifest.videos {
        let frames = crate::data::read_features(&base.join(&v.features_path), &v.video_id)?;
        out.push(EvalInstance {
            video_id: v.video_id.clone(),
            frames,
            annotations: v.eval_annotations.clone(),
        });
    }
    Ok(out)
}

/// Runs inference over every annotation with in-memory parameters: simplify
/// the query against the vocabulary, localize, and score against the target.
pub fn evaluate_with_params(
    params: &mut ModelParams,
    meta_model: &crate::model::ModelConfig,
    vocab: &Vocabulary,
    bank: &ConceptBank,
    instances: &[EvalInstance],
    keep_rows: bool,
) -> Result<EvalReport> {
    let lexicon: std::collections::BTreeSet<String> =
        vocab.tokens().iter().cloned().collect();
    let mut ious = Vec::new();
    let mut rows = Vec::new();
    for inst in instances {
        if inst.frames.frames() != meta_model.frames {
            return Err(Error::config(format!(
                "video {} has {} frames, model expects {}",
                inst.video_id,
                inst.frames.frames(),
                meta_model.frames
            )));
        }
        for ann in &inst.annotations {
            let tokens = simplify_query(&ann.query_text, &lexicon, meta_model.k);
            let mut ids = vocab.encode(&tokens);
            if ids.is_empty() {
                ids = vec![UNK_ID];
            }
            let out = forward(params, meta_model, &inst.frames, &ids, bank)?;
            let iou = temporal_iou(out.span, ann.span);
            ious.push(iou);
            if keep_rows {
                rows.push(PerVideoRow {
                    video_id: inst.video_id.clone(),
                    query: ann.query_text.clone(),
                    predicted: out.span,
                    target: ann.span,
                    iou,
                });
            }
        }
    }
    let mut report = aggregate(&ious, &DEFAULT_THRESHOLDS)?;
    if keep_rows {
        report.per_video = Some(rows);
    }
    Ok(report)
}

/// Full file-level evaluation: checkpoint + dataset manifest + concept graph.
pub fn evaluate(
    checkpoint_bin: &Path,
    checkpoint_json: &Path,
    manifest_path: &Path,
    graph: &ConceptGraph,
    keep_rows: bool,
) -> Result<(EvalReport, CheckpointMeta)> {
    let (mut params, meta) = crate::model::load_model(checkpoint_bin, checkpoint_json)?;
    if meta.concepts != graph.concepts {
        return Err(Error::config(format!(
            "checkpoint was built for {} concepts, graph has {}",
            meta.concepts.len(),
            graph.n_concepts()
        )));
    }
    let vocab = Vocabulary::build(meta.vocab.iter().map(|s| s.as_str()));
    if vocab.len() != params.embedding.rows() {
        return Err(Error::config(format!(
            "checkpoint vocabulary of {} does not match embedding rows {}",
            vocab.len(),
            params.embedding.rows()
        )));
    }
    let bank = ConceptBank::new(graph.clone())?;
    let instances = load_eval_instances(manifest_path)?;
    let report = evaluate_with_params(&mut params, &meta.model, &vocab, &bank, &instances, keep_rows)?;
    Ok((report, meta))
}

/// Serializes per-video rows as CSV.
pub fn rows_to_csv(rows: &[PerVideoRow]) -> String {
    let mut out = String::from("video_id,query,pred_start,pred_end,target_start,target_end,iou\n");
    for r in rows {
        let query = r.query.replace('"', "\"\"");
        out.push_str(&format!(
            "{},\"{}\",{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.video_id,
            query,
            r.predicted.start(),
            r.predicted.end(),
            r.target.start(),
            r.target.end(),
            r.iou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: f64, e: f64) -> MomentSpan {
        MomentSpan::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(span(0.1, 0.7), span(0.1, 0.7)), 1.0);
        assert_eq!(temporal_iou(span(0.0, 0.2), span(0.5, 0.9)), 0.0);
        let v = temporal_iou(span(0.2, 0.6), span(0.4, 0.8));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_spans() {
        assert_eq!(temporal_iou(span(0.5, 0.5), span(0.5, 0.5)), 1.0);
        assert_eq!(temporal_iou(span(0.5, 0.5), span(0.4, 0.4)), 0.0);
        // A point inside an interval still rates zero.
        assert_eq!(temporal_iou(span(0.5, 0.5), span(0.3, 0.9)), 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut vals = vec![0.0, 0.17, 0.33, 0.5, 0.66, 0.8, 1.0];
        let mut spans = Vec::new();
        vals.sort_by(f64::total_cmp);
        for &a in &vals {
            for &b in &vals {
                if a <= b {
                    spans.push(span(a, b));
                }
            }
        }
        for &p in &spans {
            for &g in &spans {
                let x = temporal_iou(p, g);
                let y = temporal_iou(g, p);
                assert_eq!(x, y);
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let all_ones = vec![1.0; 4];
        let r = aggregate(&all_ones, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.miou, 100.0);
        for v in r.r_at.values() {
            assert_eq!(*v, 100.0);
        }

        // Inclusive boundary: iou exactly at the threshold counts.
        let r2 = aggregate(&[0.3], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r2.r_at["0.3"], 100.0);
        assert_eq!(r2.r_at["0.5"], 0.0);

        assert!(matches!(
            aggregate(&[], &DEFAULT_THRESHOLDS),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn aggregate_matches_brute_force_on_random_span_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut ious = Vec::new();
        for _ in 0..100 {
            let mut a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let mut b = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            ious.push(temporal_iou(span(a[0], a[1]), span(b[0], b[1])));
        }
        let report = aggregate(&ious, &DEFAULT_THRESHOLDS).unwrap();

        // Brute-force recomputation.
        for &t in &DEFAULT_THRESHOLDS {
            let mut hits = 0usize;
            for &x in &ious {
                if x >= t {
                    hits += 1;
                }
            }
            assert_eq!(report.r_at[&threshold_key(t)], 100.0 * hits as f64 / 100.0);
        }
        let mean: f64 = ious.iter().sum::<f64>() / 100.0;
        assert_eq!(report.miou, 100.0 * mean);
        assert_eq!(report.n, 100);
    }

    #[test]
    fn recall_is_monotone_non_increasing_in_the_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(78);
        let ious: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let report = aggregate(&ious, &DEFAULT_THRESHOLDS).unwrap();
        assert!(report.r_at["0.3"] >= report.r_at["0.5"]);
        assert!(report.r_at["0.5"] >= report.r_at["0.7"]);
    }

    #[test]
    fn removing_a_zero_iou_prediction_never_decreases_miou() {
        let with_zero = vec![0.0, 0.4, 0.9];
        let without = vec![0.4, 0.9];
        let a = aggregate(&with_zero, &DEFAULT_THRESHOLDS).unwrap();
        let b = aggregate(&without, &DEFAULT_THRESHOLDS).unwrap();
        assert!(b.miou >= a.miou);
    }
}
