//! Desk-scale synthetic dataset: each video plants one contiguous event whose
//! frames share a feature prototype and carry high-confidence event labels;
//! background frames use a disjoint prototype and low-confidence distractors.

use crate::data::{DatasetManifest, EvalAnnotation, VideoEntry};
use crate::error::{Error, Result};
use crate::proposal::{FrameFeatures, MomentSpan};
use crate::pseudoquery::Detection;
use crate::tensor::Tensor;
use crate::util::derive_seed_n;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const ADJECTIVES: [&str; 16] = [
    "red", "blue", "old", "small", "wooden", "round", "green", "shiny", "tall", "soft", "heavy",
    "plastic", "broken", "bright", "dark", "clean",
];
const NOUNS: [&str; 16] = [
    "cup", "book", "lamp", "door", "chair", "plate", "bottle", "towel", "pillow", "ball", "shoe",
    "clock", "phone", "glass", "bowl", "brush",
];

/// Labels per video: up to 3 event labels plus 4 distractors.
const LABELS_PER_VIDEO: usize = 7;
const FEATURE_NOISE_SIGMA: f64 = 0.1;

fn label(index: usize) -> String {
    let adj = ADJECTIVES[index % ADJECTIVES.len()];
    let noun = NOUNS[(index / ADJECTIVES.len()) % NOUNS.len()];
    let round = index / (ADJECTIVES.len() * NOUNS.len());
    if round == 0 {
        format!("{adj}_{noun}")
    } else {
        format!("{adj}_{noun}_{round}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub dim: usize,
    pub seed: u64,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A second unit vector orthogonal to `base`.
fn orthogonal_unit(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = unit_vector(base.len(), rng);
        let dot: f64 = v.iter().zip(base).map(|(a, b)| a * b).sum();
        let adjusted: Vec<f64> = v.iter().zip(base).map(|(a, b)| a - dot * b).collect();
        let norm = adjusted.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return adjusted.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates feature files, detection manifests, and the dataset manifest
/// under `out_dir`. Returns the manifest path. Byte-identical per seed.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    if cfg.frames < 8 {
        return Err(Error::contract("synthetic videos need at least 8 frames"));
    }
    if cfg.videos == 0 || cfg.dim < 2 {
        return Err(Error::config("need at least one video and dim >= 2"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let noise = Normal::new(0.0, FEATURE_NOISE_SIGMA).expect("valid sigma");
    let mut videos = Vec::with_capacity(cfg.videos);

    for v in 0..cfg.videos {
        let video_id = format!("synth-{v:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(cfg.seed, v as u64));

        let n_event = rng.random_range(1..=3usize);
        let base = v * LABELS_PER_VIDEO;
        let event_labels: Vec<String> = (0..n_event).map(|i| label(base + i)).collect();
        let distractors: Vec<String> = (3..LABELS_PER_VIDEO).map(|i| label(base + i)).collect();

        let min_len = (cfg.frames / 4).max(2);
        let max_len = cfg.frames / 2;
        let event_len = rng.random_range(min_len..=max_len);
        let event_start = rng.random_range(0..=cfg.frames - event_len);
        let event_end = event_start + event_len; // exclusive

        let event_proto = unit_vector(cfg.dim, &mut rng);
        let background_proto = orthogonal_unit(&event_proto, &mut rng);

        let mut rows = Vec::with_capacity(cfg.frames);
        for i in 0..cfg.frames {
            let proto =
                if i >= event_start && i < event_end { &event_proto } else { &background_proto };
            rows.push(
                proto.iter().map(|&p| p + noise.sample(&mut rng)).collect::<Vec<f64>>(),
            );
        }
        let frames = FrameFeatures::new(&video_id, Tensor::from_rows(&rows)?)?;
        let features_path = format!("{video_id}.feat");
        crate::data::write_features(&out_dir.join(&features_path), &frames)?;

        let mut detections = Vec::new();
        for i in 0..cfg.frames {
            if i >= event_start && i < event_end {
                // Disjoint descending confidence bands keep the event labels
                // in sentence order under max-confidence ranking.
                for (rank, l) in event_labels.iter().enumerate() {
                    let base = 0.96 - 0.05 * rank as f64;
                    detections.push(Detection {
                        video_id: video_id.clone(),
                        frame_index: i,
                        label: l.clone(),
                        confidence: base + rng.random_range(0.0..0.03),
                    });
                }
            } else {
                let n = rng.random_range(1..=2usize);
                for _ in 0..n {
                    let l = &distractors[rng.random_range(0..distractors.len())];
                    detections.push(Detection {
                        video_id: video_id.clone(),
                        frame_index: i,
                        label: l.clone(),
                        confidence: rng.random_range(0.05..0.4),
                    });
                }
            }
        }
        let detections_path = format!("{video_id}.det.jsonl");
        crate::data::write_detections(&out_dir.join(&detections_path), &detections)?;

        let span = MomentSpan::new(
            event_start as f64 / cfg.frames as f64,
            event_end as f64 / cfg.frames as f64,
        )?;
        let query_text = match event_labels.len() {
            1 => format!("a person uses the {} in the room", event_labels[0]),
            2 => format!(
                "a person uses the {} near the {} in the room",
                event_labels[0], event_labels[1]
            ),
            _ => format!(
                "a person uses the {} near the {} beside the {} in the room",
                event_labels[0], event_labels[1], event_labels[2]
            ),
        };
        videos.push(VideoEntry {
            video_id,
            features_path,
            detections_path,
            eval_annotations: vec![EvalAnnotation { query_text, span }],
        });
    }

    let manifest = DatasetManifest {
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
        videos,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}
