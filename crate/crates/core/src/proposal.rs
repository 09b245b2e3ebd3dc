//! Dynamic video moment proposal: frame-similarity features, seeded k-means
//! over them, and atomic/composite candidate spans.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derive_seed, derive_seed_n};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const KMEANS_MAX_ITERS: usize = 100;

/// Raw per-frame feature rows for one video.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    features: Tensor,
    pub video_id: String,
}

impl FrameFeatures {
    pub fn new(video_id: impl Into<String>, features: Tensor) -> Result<Self> {
        if !features.is_matrix() || features.rows() < 2 {
            return Err(Error::contract(format!(
                "frame features must be a TxD matrix with T >= 2, got {:?}",
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(Error::numeric("frame features contain non-finite values"));
        }
        Ok(FrameFeatures { features, video_id: video_id.into() })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.features
    }
}

/// Normalized (start, end) fractions of the video duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpan")]
pub struct MomentSpan {
    #[serde(rename = "t_s")]
    start: f64,
    #[serde(rename = "t_e")]
    end: f64,
}

#[derive(Deserialize)]
struct RawSpan {
    t_s: f64,
    t_e: f64,
}

impl TryFrom<RawSpan> for MomentSpan {
    type Error = String;

    fn try_from(raw: RawSpan) -> std::result::Result<Self, String> {
        MomentSpan::new(raw.t_s, raw.t_e).map_err(|e| e.to_string())
    }
}

impl MomentSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::contract(format!(
                "invalid span ({start}, {end}): need 0 <= start <= end <= 1"
            )));
        }
        Ok(MomentSpan { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Whether frame `i` of `t` has its center inside the span.
    pub fn covers_frame(&self, i: usize, t: usize) -> bool {
        let center = (i as f64 + 0.5) / t as f64;
        center >= self.start && center <= self.end
    }

    /// Binary frame mask over `t` frames.
    pub fn frame_mask(&self, t: usize) -> Vec<f64> {
        (0..t).map(|i| if self.covers_frame(i, t) { 1.0 } else { 0.0 }).collect()
    }
}

/// Proposal hyperparameters. `rng_seed` feeds every random choice; per-video
/// streams are derived from it and the video id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub k_range: (usize, usize),
    pub gamma: f64,
    pub max_merge: usize,
    pub n_proposals: usize,
    pub rng_seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig { k_range: (4, 8), gamma: 1.0, max_merge: 3, n_proposals: 5, rng_seed: 0 }
    }
}

impl ProposalConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.k_range.0 < 2 || self.k_range.0 > self.k_range.1 {
            return Err(Error::config(format!("invalid k_range {:?}", self.k_range)));
        }
        if self.k_range.0 > t {
            return Err(Error::config(format!(
                "k_range {:?} exceeds frame count {t}",
                self.k_range
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma must be non-negative"));
        }
        if self.max_merge == 0 || self.n_proposals == 0 {
            return Err(Error::config("max_merge and n_proposals must be positive"));
        }
        Ok(())
    }
}

/// Builds the TxT frame-similarity feature block plus a weighted index column.
///
/// Row i holds column i of the pairwise cosine matrix with
/// `gamma * i/(T-1)` appended.
pub fn similarity_features(frames: &FrameFeatures, gamma: f64) -> Result<Tensor> {
    let t = frames.frames();
    let d = frames.dim();
    let x = frames.matrix().data();

    let mut norms = Vec::with_capacity(t);
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm feature row at frame {i}")));
        }
        norms.push(norm);
    }

    let mut cosine = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let a = &x[i * d..(i + 1) * d];
            let b = &x[j * d..(j + 1) * d];
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let c = dot / (norms[i] * norms[j]);
            cosine[i * t + j] = c;
            cosine[j * t + i] = c;
        }
    }

    let mut out = vec![0.0; t * (t + 1)];
    for i in 0..t {
        for j in 0..t {
            out[i * (t + 1) + j] = cosine[j * t + i];
        }
        out[i * (t + 1) + t] = gamma * i as f64 / (t - 1) as f64;
    }
    Tensor::matrix(t, t + 1, out)
}

/// Labels plus the inertia measured after each assignment pass.
#[derive(Clone, Debug)]
pub struct KmeansRun {
    pub labels: Vec<usize>,
    pub inertia_trace: Vec<f64>,
}

/// Seeded k-means++ with Lloyd iterations to an assignment fixpoint.
pub fn kmeans(points: &Tensor, k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans_run(points, k, iters, seed)?.labels)
}

/// As [`kmeans`] but also reports the per-iteration inertia trace.
pub fn kmeans_run(points: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KmeansRun> {
    let t = points.rows();
    let p = points.cols();
    if k < 2 || k > t {
        return Err(Error::contract(format!("k = {k} outside [2, {t}]")));
    }
    let x = points.data();
    let row = |i: usize| &x[i * p..(i + 1) * p];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(row(rng.random_range(0..t)).to_vec());
    let mut best_d2 = vec![f64::INFINITY; t];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        for i in 0..t {
            best_d2[i] = best_d2[i].min(dist2(row(i), last));
        }
        let total: f64 = best_d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = t - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..t)
        };
        centroids.push(row(next).to_vec());
    }

    let mut labels = vec![0usize; t];
    let mut trace = Vec::new();
    for _ in 0..iters.max(1) {
        // Assignment.
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..t {
            let mut best = 0;
            let mut best_d = dist2(row(i), &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(row(i), centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            inertia += best_d;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed && trace.len() > 1 {
            break;
        }

        // Update.
        let mut sums = vec![vec![0.0; p]; k];
        let mut sizes = vec![0usize; k];
        for i in 0..t {
            sizes[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= sizes[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
        // Empty clusters restart from the point farthest from its centroid.
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..t)
                    .max_by(|&a, &b| {
                        dist2(row(a), &centroids[labels[a]])
                            .total_cmp(&dist2(row(b), &centroids[labels[b]]))
                    })
                    .unwrap();
                centroids[c] = row(far).to_vec();
            }
        }
    }
    Ok(KmeansRun { labels, inertia_trace: trace })
}

/// Maximal runs of equal labels, as spans over [0, 1].
pub fn atomic_moments(labels: &[usize]) -> Vec<MomentSpan> {
    let t = labels.len();
    let mut spans = Vec::new();
    let mut run_start = 0usize;
    for i in 1..=t {
        if i == t || labels[i] != labels[run_start] {
            spans.push(MomentSpan {
                start: run_start as f64 / t as f64,
                end: i as f64 / t as f64,
            });
            run_start = i;
        }
    }
    spans
}

/// Unions of up to `max_merge` consecutive atomic moments, sampled uniformly
/// without replacement down to `n_proposals` candidates.
pub fn composite_moments(
    atomics: &[MomentSpan],
    max_merge: usize,
    n_proposals: usize,
    rng: &mut impl Rng,
) -> Vec<MomentSpan> {
    let a = atomics.len();
    let mut candidates = Vec::new();
    for m in 1..=max_merge.min(a) {
        for s in 0..=(a - m) {
            candidates.push(MomentSpan { start: atomics[s].start, end: atomics[s + m - 1].end });
        }
    }
    if candidates.len() <= n_proposals {
        return candidates;
    }
    // Partial Fisher-Yates over index positions, then restore candidate order.
    let mut indices: Vec<usize> = (0..candidates.len()).collect();
    for i in 0..n_proposals {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut picked: Vec<usize> = indices[..n_proposals].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// Full per-video proposal pipeline: similarity features, a per-video cluster
/// count drawn from `k_range`, k-means, and sampled composite moments.
pub fn propose_for_video(frames: &FrameFeatures, cfg: &ProposalConfig) -> Result<Vec<MomentSpan>> {
    let t = frames.frames();
    cfg.validate(t)?;
    let video_seed = derive_seed(cfg.rng_seed, &frames.video_id);
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let k_hi = cfg.k_range.1.min(t);
    let k = rng.random_range(cfg.k_range.0..=k_hi);

    let sim = similarity_features(frames, cfg.gamma)?;
    let labels = kmeans(&sim, k, KMEANS_MAX_ITERS, derive_seed_n(video_seed, 1))?;
    let atomics = atomic_moments(&labels);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed_n(video_seed, 2));
    Ok(composite_moments(&atomics, cfg.max_merge, cfg.n_proposals, &mut sample_rng))
}
