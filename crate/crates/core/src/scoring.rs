//! Frame-level acquisition scores.
//!
//! Every score here is "higher means select first". Ties are always broken by
//! ascending frame id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, ClassId, FrameId, FrameRecord};
use crate::rng::stream_seed;

/// Tolerance for the equal-mass (maximum entropy) condition.
pub const MAX_ENTROPY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Random,
    Entropy,
    Margin,
    Coreset,
    #[serde(rename = "gradnorm")]
    GradNorm,
    Olc,
    Crb,
    OpenCrb,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::Random,
        Policy::Entropy,
        Policy::Margin,
        Policy::Coreset,
        Policy::GradNorm,
        Policy::Olc,
        Policy::Crb,
        Policy::OpenCrb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Entropy => "entropy",
            Policy::Margin => "margin",
            Policy::Coreset => "coreset",
            Policy::GradNorm => "gradnorm",
            Policy::Olc => "olc",
            Policy::Crb => "crb",
            Policy::OpenCrb => "open-crb",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// (C_eff + 1)-way label distribution of one frame. The last component is
/// the unknown mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub class_ids: Vec<ClassId>,
    pub components: Vec<f64>,
    pub n_boxes: usize,
}

impl LabelDistribution {
    pub fn known(&self) -> &[f64] {
        &self.components[..self.class_ids.len()]
    }

    pub fn unknown(&self) -> f64 {
        self.components[self.class_ids.len()]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.components)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub frame_id: FrameId,
    pub score: f64,
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
}

impl ScoredFrame {
    fn new(frame_id: &str, score: f64, policy: Policy) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            score,
            policy,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn check_labels(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<Vec<usize>> {
    let ids = catalog.effective_ids();
    frame
        .boxes
        .iter()
        .map(|b| {
            ids.iter().position(|&id| id == b.label).ok_or(Error::UnknownLabel {
                frame_id: frame.frame_id.clone(),
                label: b.label,
            })
        })
        .collect()
}

/// Known components `Σ 1(ŷ=c)·ỹ / N_B` and unknown component `Σ (1-ỹ) / N_B`.
/// A frame without boxes gets all mass on the unknown slot.
pub fn label_distribution(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<LabelDistribution> {
    let slots = check_labels(frame, catalog)?;
    let class_ids = catalog.effective_ids();
    let c = class_ids.len();
    let mut components = vec![0.0; c + 1];
    let n = frame.boxes.len();
    if n == 0 {
        components[c] = 1.0;
    } else {
        let nb = n as f64;
        for (b, &slot) in frame.boxes.iter().zip(&slots) {
            components[slot] += b.confidence / nb;
            components[c] += (1.0 - b.confidence) / nb;
        }
    }
    Ok(LabelDistribution {
        class_ids,
        components,
        n_boxes: n,
    })
}

/// Open Label Conciseness: entropy of the unknown-aware label distribution.
pub fn olc_score(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<ScoredFrame> {
    let dist = label_distribution(frame, catalog)?;
    let mut scored = ScoredFrame::new(&frame.frame_id, dist.entropy(), Policy::Olc);
    for (id, p) in dist.class_ids.iter().zip(dist.known()) {
        scored.diagnostics.insert(format!("p_{id}"), *p);
    }
    scored.diagnostics.insert("p_unknown".into(), dist.unknown());
    scored.diagnostics.insert("n_boxes".into(), dist.n_boxes as f64);
    Ok(scored)
}

/// Closed-world label entropy: the known components renormalized, unknown slot dropped.
pub fn entropy_score(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<ScoredFrame> {
    let dist = label_distribution(frame, catalog)?;
    let known = dist.known();
    let mass: f64 = known.iter().sum();
    let score = if mass > 0.0 {
        let renorm: Vec<f64> = known.iter().map(|p| p / mass).collect();
        entropy(&renorm)
    } else {
        0.0
    };
    Ok(ScoredFrame::new(&frame.frame_id, score, Policy::Entropy))
}

/// Per-class box counts and mean confidences behind the harmonic and inverse
/// relationships of the OLC maximum. Never used for selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipDiagnostics {
    pub counts: BTreeMap<ClassId, usize>,
    pub mean_confidence: BTreeMap<ClassId, f64>,
    /// `2 p̄1 p̄2 / (p̄1 + p̄2)`; only for two effective classes, both present.
    pub harmonic_mean: Option<f64>,
    /// All C_eff + 1 components equal within [`MAX_ENTROPY_TOL`].
    pub max_entropy_condition: bool,
}

impl RelationshipDiagnostics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut map = BTreeMap::new();
        for (id, n) in &self.counts {
            map.insert(format!("n_{id}"), *n as f64);
        }
        for (id, p) in &self.mean_confidence {
            map.insert(format!("mean_conf_{id}"), *p);
        }
        if let Some(h) = self.harmonic_mean {
            map.insert("harmonic_mean".into(), h);
        }
        map.insert(
            "max_entropy_condition".into(),
            if self.max_entropy_condition { 1.0 } else { 0.0 },
        );
        map
    }
}

pub fn relationship_diagnostics(dist: &LabelDistribution, frame: &FrameRecord) -> Result<RelationshipDiagnostics> {
    if dist.n_boxes == 0 {
        return Err(Error::InvalidFrame {
            frame_id: frame.frame_id.clone(),
            reason: "relationship diagnostics need at least one box".into(),
        });
    }
    let nb = dist.n_boxes as f64;
    let mut counts = BTreeMap::new();
    let mut mean_confidence = BTreeMap::new();
    for (slot, id) in dist.class_ids.iter().enumerate() {
        let n = frame.boxes.iter().filter(|b| b.label == *id).count();
        if n > 0 {
            counts.insert(*id, n);
            mean_confidence.insert(*id, dist.components[slot] * nb / n as f64);
        }
    }
    let harmonic_mean = match dist.class_ids.as_slice() {
        [a, b] => match (mean_confidence.get(a), mean_confidence.get(b)) {
            (Some(p1), Some(p2)) if p1 + p2 > 0.0 => Some(2.0 * p1 * p2 / (p1 + p2)),
            _ => None,
        },
        _ => None,
    };
    let target = 1.0 / dist.components.len() as f64;
    let max_entropy_condition = dist
        .components
        .iter()
        .all(|p| (p - target).abs() <= MAX_ENTROPY_TOL);
    Ok(RelationshipDiagnostics {
        counts,
        mean_confidence,
        harmonic_mean,
        max_entropy_condition,
    })
}

fn scores_of<'a>(frame: &'a FrameRecord, catalog: &ClassCatalog) -> Result<Vec<&'a [f64]>> {
    check_labels(frame, catalog)?;
    let c = catalog.effective_count();
    frame
        .boxes
        .iter()
        .map(|b| {
            let s = b
                .scores
                .as_deref()
                .ok_or_else(|| Error::MissingScores(frame.frame_id.clone()))?;
            if s.len() != c {
                return Err(Error::InvalidFrame {
                    frame_id: frame.frame_id.clone(),
                    reason: format!("scores vector has {} entries, expected {c}", s.len()),
                });
            }
            Ok(s)
        })
        .collect()
}

/// Score given to box-free frames by the GradNorm surrogate (above every
/// non-empty frame, whose scores are ≤ 0).
pub const GRADNORM_EMPTY_SCORE: f64 = 1.0;

/// Closed-form stand-in for GradNorm: per box `Σ_c |s_c - 1/C_eff|`, averaged
/// over the frame and negated so that near-uniform outputs rank first.
pub fn gradnorm_surrogate_score(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<ScoredFrame> {
    let scores = scores_of(frame, catalog)?;
    if scores.is_empty() {
        return Ok(ScoredFrame::new(&frame.frame_id, GRADNORM_EMPTY_SCORE, Policy::GradNorm));
    }
    let uniform = 1.0 / catalog.effective_count() as f64;
    let mean = scores
        .iter()
        .map(|s| s.iter().map(|x| (x - uniform).abs()).sum::<f64>())
        .sum::<f64>()
        / scores.len() as f64;
    Ok(ScoredFrame::new(&frame.frame_id, -mean, Policy::GradNorm))
}

/// Score given to box-free frames by margin sampling (the least uncertain value).
pub const MARGIN_EMPTY_SCORE: f64 = -1.0;

/// Mean top-1 minus top-2 score gap over boxes, negated.
pub fn confidence_margin_score(frame: &FrameRecord, catalog: &ClassCatalog) -> Result<ScoredFrame> {
    let scores = scores_of(frame, catalog)?;
    if scores.is_empty() {
        return Ok(ScoredFrame::new(&frame.frame_id, MARGIN_EMPTY_SCORE, Policy::Margin));
    }
    let mean = scores
        .iter()
        .map(|s| {
            let (mut top1, mut top2) = (f64::NEG_INFINITY, 0.0_f64);
            for &x in s.iter() {
                if x > top1 {
                    top2 = top1.max(0.0);
                    top1 = x;
                } else if x > top2 {
                    top2 = x;
                }
            }
            top1 - top2
        })
        .sum::<f64>()
        / scores.len() as f64;
    Ok(ScoredFrame::new(&frame.frame_id, -mean, Policy::Margin))
}

/// Uniform draw in [0, 1) that depends only on `(seed, frame_id)`.
pub fn random_score(frame: &FrameRecord, seed: u64) -> ScoredFrame {
    let mut rng = ChaCha8Rng::from_seed(stream_seed(seed, &["random-policy", &frame.frame_id]));
    ScoredFrame::new(&frame.frame_id, rng.random::<f64>(), Policy::Random)
}

/// Descending score, ties by ascending frame id.
pub fn rank(scored: &[ScoredFrame]) -> Vec<&ScoredFrame> {
    let mut order: Vec<&ScoredFrame> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.frame_id.cmp(&b.frame_id))
    });
    order
}

pub fn select_top_k(scored: &[ScoredFrame], k: usize) -> Result<Vec<FrameId>> {
    if k > scored.len() {
        return Err(Error::TooMany {
            requested: k,
            available: scored.len(),
        });
    }
    Ok(rank(scored)
        .into_iter()
        .take(k)
        .map(|s| s.frame_id.clone())
        .collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy furthest-first (k-center) selection over frame embeddings.
///
/// Frames whose id is in `labeled` act as fixed centers; the rest are
/// candidates. Each step takes the candidate with the largest minimum distance
/// to the centers picked so far. With no labeled frames the first pick is the
/// lowest frame id.
pub fn coreset_select(frames: &[FrameRecord], labeled: &BTreeSet<FrameId>, k: usize) -> Result<Vec<FrameId>> {
    crate::model::validate_pool_frames(frames)?;
    let mut candidates: Vec<(&str, &[f64])> = Vec::new();
    let mut centers: Vec<&[f64]> = Vec::new();
    for frame in frames {
        let e = frame.embedding()?;
        if labeled.contains(&frame.frame_id) {
            centers.push(e);
        } else {
            candidates.push((&frame.frame_id, e));
        }
    }
    if k > candidates.len() {
        return Err(Error::TooMany {
            requested: k,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.0.cmp(b.0));

    let mut min_dist: Vec<f64> = candidates
        .iter()
        .map(|(_, e)| {
            centers
                .iter()
                .map(|c| euclidean(e, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; candidates.len()];
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in (0..candidates.len()).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let Some(pick) = best else { break };
        taken[pick] = true;
        picks.push(candidates[pick].0.to_string());
        let picked = candidates[pick].1;
        for (i, (_, e)) in candidates.iter().enumerate() {
            if !taken[i] {
                min_dist[i] = min_dist[i].min(euclidean(e, picked));
            }
        }
    }
    Ok(picks)
}
