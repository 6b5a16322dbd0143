//! The three-stage CRB filter (label-concise, representative, geometrically
//! balanced) and the Open-CRB round driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_pool_frames, ClassCatalog, FrameId, FrameRecord, PredictedBox};
use crate::scoring::{entropy_score, euclidean, olc_score, select_top_k, ScoredFrame};

/// Number of geometry dimensions balanced by stage 3: l, w, h, heading.
pub const GEOMETRY_DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    Uniform,
    EmpiricalUnlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrbConfig {
    pub k1: usize,
    pub k2: usize,
    pub n_r: usize,
    pub geometry_bins: [usize; GEOMETRY_DIMS],
    pub prior_source: PriorSource,
    pub smoothing: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    /// Use OLC in every round instead of only the first (ablation).
    pub olc_every_round: bool,
}

impl Default for CrbConfig {
    fn default() -> Self {
        Self {
            k1: 500,
            k2: 200,
            n_r: 100,
            geometry_bins: [10; GEOMETRY_DIMS],
            prior_source: PriorSource::EmpiricalUnlabeled,
            smoothing: 1e-6,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            olc_every_round: false,
        }
    }
}

impl CrbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_r <= self.k2 && self.k2 <= self.k1) {
            return Err(Error::Config(format!(
                "crb sizes must satisfy n_r <= k2 <= k1 (got n_r={}, k2={}, k1={})",
                self.n_r, self.k2, self.k1
            )));
        }
        if self.geometry_bins.contains(&0) {
            return Err(Error::Config("crb.geometry_bins entries must be positive".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("crb.smoothing must be positive and finite".into()));
        }
        Ok(())
    }
}

fn geometry(b: &PredictedBox) -> [f64; GEOMETRY_DIMS] {
    [b.size[0], b.size[1], b.size[2], b.heading]
}

/// Fixed-edge binning of one geometry dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl BinEdges {
    pub fn bin(&self, v: f64) -> usize {
        let span = self.max - self.min;
        if span <= 0.0 || v <= self.min {
            return 0;
        }
        (((v - self.min) / span * self.bins as f64) as usize).min(self.bins - 1)
    }
}

/// Per-dimension normalized histograms over (l, w, h, heading).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryHistogram {
    pub edges: [BinEdges; GEOMETRY_DIMS],
    pub probs: [Vec<f64>; GEOMETRY_DIMS],
    pub epsilon: f64,
}

/// Raw bin counts that stage 3 grows one candidate at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryCounts {
    pub counts: [Vec<f64>; GEOMETRY_DIMS],
}

impl GeometryCounts {
    pub fn zeros(edges: &[BinEdges; GEOMETRY_DIMS]) -> Self {
        Self {
            counts: std::array::from_fn(|d| vec![0.0; edges[d].bins]),
        }
    }

    pub fn of_boxes<'a>(edges: &[BinEdges; GEOMETRY_DIMS], boxes: impl IntoIterator<Item = &'a PredictedBox>) -> Self {
        let mut counts = Self::zeros(edges);
        for b in boxes {
            for (d, v) in geometry(b).into_iter().enumerate() {
                counts.counts[d][edges[d].bin(v)] += 1.0;
            }
        }
        counts
    }

    pub fn add(&mut self, other: &GeometryCounts) {
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            mine.iter_mut().zip(theirs).for_each(|(a, b)| *a += b);
        }
    }
}

/// Adds `epsilon` to every bin, then normalizes. Empty counts give the
/// uniform histogram.
fn smooth(counts: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + epsilon * counts.len() as f64;
    counts.iter().map(|c| (c + epsilon) / total).collect()
}

/// `Σ p ln(p / q)`; both arguments strictly positive.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

impl GeometryHistogram {
    /// Min/max ranges of each dimension over `boxes`; `(0, 1)` when empty.
    pub fn edges_from_boxes<'a>(
        boxes: impl IntoIterator<Item = &'a PredictedBox>,
        bins: [usize; GEOMETRY_DIMS],
    ) -> [BinEdges; GEOMETRY_DIMS] {
        let mut lo = [f64::INFINITY; GEOMETRY_DIMS];
        let mut hi = [f64::NEG_INFINITY; GEOMETRY_DIMS];
        for b in boxes {
            for (d, v) in geometry(b).into_iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        std::array::from_fn(|d| {
            if lo[d].is_finite() {
                BinEdges { min: lo[d], max: hi[d], bins: bins[d] }
            } else {
                BinEdges { min: 0.0, max: 1.0, bins: bins[d] }
            }
        })
    }

    pub fn from_counts(edges: [BinEdges; GEOMETRY_DIMS], counts: &GeometryCounts, epsilon: f64) -> Self {
        Self {
            edges,
            probs: std::array::from_fn(|d| smooth(&counts.counts[d], epsilon)),
            epsilon,
        }
    }

    pub fn from_boxes<'a>(
        edges: [BinEdges; GEOMETRY_DIMS],
        boxes: impl IntoIterator<Item = &'a PredictedBox>,
        epsilon: f64,
    ) -> Self {
        let counts = GeometryCounts::of_boxes(&edges, boxes);
        Self::from_counts(edges, &counts, epsilon)
    }

    pub fn uniform(edges: [BinEdges; GEOMETRY_DIMS], epsilon: f64) -> Self {
        Self::from_counts(edges, &GeometryCounts::zeros(&edges), epsilon)
    }

    /// Sum over the four dimensions of `KL(self || prior)`.
    pub fn kl_to(&self, prior: &GeometryHistogram) -> f64 {
        self.probs
            .iter()
            .zip(&prior.probs)
            .map(|(p, q)| kl_divergence(p, q))
            .sum()
    }

    /// KL to `self` (as prior) of the smoothed histogram of `counts`.
    /// Infinite when `counts` holds no boxes: an empty selection has no
    /// geometry to compare.
    pub fn kl_of_counts(&self, counts: &GeometryCounts) -> f64 {
        if counts.counts[0].iter().sum::<f64>() == 0.0 {
            return f64::INFINITY;
        }
        counts
            .counts
            .iter()
            .zip(&self.probs)
            .map(|(c, q)| kl_divergence(&smooth(c, self.epsilon), q))
            .sum()
    }
}

/// Stage 1: top-`k1` frames by closed-world label entropy.
pub fn stage1_concise(frames: &[FrameRecord], catalog: &ClassCatalog, k1: usize) -> Result<Vec<FrameId>> {
    let scored = frames
        .iter()
        .map(|f| entropy_score(f, catalog))
        .collect::<Result<Vec<ScoredFrame>>>()?;
    select_top_k(&scored, k1)
}

/// Furthest-first seeding over `points` (already sorted by frame id): the
/// first seed is index 0, then the point farthest from all seeds so far.
fn farthest_first(points: &[&[f64]], k: usize) -> Vec<usize> {
    let mut seeds = Vec::with_capacity(k);
    if k == 0 || points.is_empty() {
        return seeds;
    }
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut next = 0;
    for _ in 0..k {
        seeds.push(next);
        taken[next] = true;
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if taken[i] {
                continue;
            }
            min_dist[i] = min_dist[i].min(euclidean(points[i], points[next]));
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => next = b,
            None => break,
        }
    }
    seeds
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = euclidean(point, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Lloyd iterations from farthest-first seeds. Returns the final centers.
pub fn kmeans(points: &[&[f64]], k: usize, max_iter: usize, tol: f64) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = farthest_first(points, k).into_iter().map(|i| points[i].to_vec()).collect();
    let dim = points.first().map_or(0, |p| p.len());
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut sizes = vec![0usize; centers.len()];
        for p in points {
            let j = nearest(p, &centers);
            sizes[j] += 1;
            sums[j].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        let mut shift = 0.0_f64;
        for (j, center) in centers.iter_mut().enumerate() {
            // empty clusters keep their center
            if sizes[j] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            shift = shift.max(euclidean(center, &updated));
            *center = updated;
        }
        if shift < tol {
            break;
        }
    }
    centers
}

/// Stage 2: k-means with `k2` centers on frame embeddings; returns the frame
/// nearest each center, taking the next-nearest when a frame is already used.
pub fn stage2_prototypes(frames: &[&FrameRecord], k2: usize, config: &CrbConfig) -> Result<Vec<FrameId>> {
    if k2 > frames.len() {
        return Err(Error::TooMany {
            requested: k2,
            available: frames.len(),
        });
    }
    let mut sorted: Vec<&FrameRecord> = frames.to_vec();
    sorted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let points = sorted.iter().map(|f| f.embedding()).collect::<Result<Vec<&[f64]>>>()?;
    if let Some(first) = points.first() {
        for (f, p) in sorted.iter().zip(&points) {
            if p.len() != first.len() {
                return Err(Error::EmbeddingDimension {
                    frame_id: f.frame_id.clone(),
                    expected: first.len(),
                    got: p.len(),
                });
            }
        }
    }
    let centers = kmeans(&points, k2, config.kmeans_max_iter, config.kmeans_tol);
    let mut used = vec![false; points.len()];
    let mut picks = Vec::with_capacity(k2);
    for center in &centers {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = euclidean(p, center);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            picks.push(sorted[i].frame_id.clone());
        }
    }
    Ok(picks)
}

/// One accepted greedy step of stage 3.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStep {
    pub frame_id: FrameId,
    pub kl: f64,
    /// Smallest KL among the candidates rejected at this step.
    pub best_rejected: Option<f64>,
}

/// Stage 3 with the full greedy trace.
pub fn stage3_greedy_balance_traced(
    candidates: &[&FrameRecord],
    prior: &GeometryHistogram,
    n_r: usize,
) -> Result<Vec<BalanceStep>> {
    if n_r > candidates.len() {
        return Err(Error::TooMany {
            requested: n_r,
            available: candidates.len(),
        });
    }
    let mut sorted: Vec<&FrameRecord> = candidates.to_vec();
    sorted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let per_frame: Vec<GeometryCounts> = sorted
        .iter()
        .map(|f| GeometryCounts::of_boxes(&prior.edges, &f.boxes))
        .collect();

    let mut selected = GeometryCounts::zeros(&prior.edges);
    let mut taken = vec![false; sorted.len()];
    let mut steps = Vec::with_capacity(n_r);
    for _ in 0..n_r {
        let mut kls: Vec<(usize, f64)> = Vec::new();
        for (i, counts) in per_frame.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mut tentative = selected.clone();
            tentative.add(counts);
            kls.push((i, prior.kl_of_counts(&tentative)));
        }
        let (pick, kl) = kls
            .iter()
            .copied()
            .fold(None, |best: Option<(usize, f64)>, (i, kl)| match best {
                Some((_, bkl)) if bkl <= kl => best,
                _ => Some((i, kl)),
            })
            .expect("n_r <= candidates");
        let best_rejected = kls
            .iter()
            .filter(|(i, _)| *i != pick)
            .map(|(_, kl)| *kl)
            .reduce(f64::min);
        assert!(best_rejected.is_none_or(|r| kl <= r), "greedy step is not minimal");
        taken[pick] = true;
        selected.add(&per_frame[pick]);
        steps.push(BalanceStep {
            frame_id: sorted[pick].frame_id.clone(),
            kl,
            best_rejected,
        });
    }
    Ok(steps)
}

/// Stage 3: greedily add the candidate whose boxes bring the selected
/// geometry histogram closest (in summed KL) to the prior.
pub fn stage3_greedy_balance(candidates: &[&FrameRecord], prior: &GeometryHistogram, n_r: usize) -> Result<Vec<FrameId>> {
    Ok(stage3_greedy_balance_traced(candidates, prior, n_r)?
        .into_iter()
        .map(|s| s.frame_id)
        .collect())
}

/// Prior over geometry built from the predicted boxes of `pool`.
pub fn geometry_prior(pool: &[FrameRecord], config: &CrbConfig) -> GeometryHistogram {
    let boxes = pool.iter().flat_map(|f| f.boxes.iter());
    let edges = GeometryHistogram::edges_from_boxes(boxes.clone(), config.geometry_bins);
    match config.prior_source {
        PriorSource::Uniform => GeometryHistogram::uniform(edges, config.smoothing),
        PriorSource::EmpiricalUnlabeled => GeometryHistogram::from_boxes(edges, boxes, config.smoothing),
    }
}

/// Survivors of each CRB stage, for containment checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CrbSelection {
    pub stage1: Vec<FrameId>,
    pub stage2: Vec<FrameId>,
    pub stage3: Vec<FrameId>,
}

/// Runs the three CRB stages over `unlabeled`. `k1` and `k2` are clamped to
/// the pool size (never below `n_r`).
pub fn crb_select(unlabeled: &[FrameRecord], catalog: &ClassCatalog, config: &CrbConfig) -> Result<CrbSelection> {
    validate_pool_frames(unlabeled)?;
    let n = unlabeled.len();
    if config.n_r > n {
        return Err(Error::TooMany {
            requested: config.n_r,
            available: n,
        });
    }
    let k1 = config.k1.min(n).max(config.n_r);
    let k2 = config.k2.min(k1).max(config.n_r);

    let stage1 = stage1_concise(unlabeled, catalog, k1)?;
    let by_id = |ids: &[FrameId]| -> Vec<&FrameRecord> {
        ids.iter()
            .map(|id| unlabeled.iter().find(|f| &f.frame_id == id).expect("survivor comes from pool"))
            .collect()
    };
    let stage2 = stage2_prototypes(&by_id(&stage1), k2, config)?;
    let prior = geometry_prior(unlabeled, config);
    let stage3 = stage3_greedy_balance(&by_id(&stage2), &prior, config.n_r)?;
    Ok(CrbSelection { stage1, stage2, stage3 })
}

/// OLC top-`n_r` over the unlabeled pool.
pub fn olc_select(unlabeled: &[FrameRecord], catalog: &ClassCatalog, n_r: usize) -> Result<Vec<FrameId>> {
    let scored = unlabeled
        .iter()
        .map(|f| olc_score(f, catalog))
        .collect::<Result<Vec<_>>>()?;
    select_top_k(&scored, n_r)
}

/// One Open-CRB round: OLC while selecting from the open-world pool (round 1),
/// CRB afterwards.
pub fn open_crb_round(
    unlabeled: &[FrameRecord],
    catalog: &ClassCatalog,
    config: &CrbConfig,
    round: usize,
) -> Result<Vec<FrameId>> {
    if round == 0 {
        return Err(Error::Config("rounds are numbered from 1".into()));
    }
    if config.n_r > unlabeled.len() {
        return Err(Error::TooMany {
            requested: config.n_r,
            available: unlabeled.len(),
        });
    }
    if round == 1 || config.olc_every_round {
        olc_select(unlabeled, catalog, config.n_r)
    } else {
        Ok(crb_select(unlabeled, catalog, config)?.stage3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(label: u32, confidence: f64, size: [f64; 3], heading: f64) -> PredictedBox {
        PredictedBox {
            label,
            confidence,
            center: [0.0; 3],
            size,
            heading,
            scores: None,
        }
    }

    fn emb(id: &str, e: &[f64]) -> FrameRecord {
        FrameRecord::new(id, vec![]).with_embedding(e.to_vec())
    }

    #[test]
    fn stage1_examples() {
        let c = ClassCatalog::new(vec![1, 2], vec![]).unwrap();
        let a = FrameRecord::new("a", vec![bx(1, 0.9, [1.0; 3], 0.0); 2]);
        let b = FrameRecord::new("b", vec![bx(1, 0.9, [1.0; 3], 0.0), bx(2, 0.9, [1.0; 3], 0.0)]);
        assert_eq!(stage1_concise(&[a.clone(), b.clone()], &c, 1).unwrap(), vec!["b"]);
        assert_eq!(stage1_concise(&[a, b], &c, 2).unwrap(), vec!["b", "a"]);
        let empties: Vec<_> = ["z", "x", "y"].iter().map(|id| FrameRecord::new(*id, vec![])).collect();
        assert_eq!(stage1_concise(&empties, &c, 3).unwrap(), vec!["x", "y", "z"]);
    }

    #[test]
    fn stage2_examples() {
        let cfg = CrbConfig::default();
        let frames = [emb("a", &[0.0]), emb("b", &[0.1]), emb("c", &[9.9]), emb("d", &[10.0])];
        let refs: Vec<&FrameRecord> = frames.iter().collect();
        let picks = stage2_prototypes(&refs, 2, &cfg).unwrap();
        assert_eq!(picks.len(), 2);
        let low = picks.iter().filter(|id| ["a", "b"].contains(&id.as_str())).count();
        assert_eq!(low, 1, "{picks:?}");

        let mut all = stage2_prototypes(&refs, 4, &cfg).unwrap();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c", "d"]);

        let same = [emb("q", &[1.0, 1.0]), emb("p", &[1.0, 1.0]), emb("r", &[1.0, 1.0])];
        let refs: Vec<&FrameRecord> = same.iter().collect();
        assert_eq!(stage2_prototypes(&refs, 2, &cfg).unwrap(), vec!["p", "q"]);

        let missing = [FrameRecord::new("m", vec![])];
        let refs: Vec<&FrameRecord> = missing.iter().collect();
        assert!(matches!(stage2_prototypes(&refs, 1, &cfg), Err(Error::MissingEmbedding(_))));
    }

    fn size_prior() -> GeometryHistogram {
        // two length bins over [1, 3]; every other dimension degenerate
        let edges = [
            BinEdges { min: 1.0, max: 3.0, bins: 2 },
            BinEdges { min: 1.0, max: 1.0, bins: 1 },
            BinEdges { min: 1.0, max: 1.0, bins: 1 },
            BinEdges { min: 0.0, max: 0.0, bins: 1 },
        ];
        GeometryHistogram::uniform(edges, 1e-6)
    }

    #[test]
    fn stage3_examples() {
        let prior = size_prior();
        let a = FrameRecord::new("A", vec![bx(1, 0.9, [1.0, 1.0, 1.0], 0.0); 3]);
        let b = FrameRecord::new("B", vec![bx(1, 0.9, [3.0, 1.0, 1.0], 0.0); 3]);
        let c = FrameRecord::new("C", vec![bx(1, 0.9, [1.0, 1.0, 1.0], 0.0); 3]);
        let steps = stage3_greedy_balance_traced(&[&a, &b, &c], &prior, 2).unwrap();
        assert_eq!(steps[0].frame_id, "A");
        assert_eq!(steps[1].frame_id, "B");
        assert!(steps[1].kl < 1e-9);
        assert_eq!(stage3_greedy_balance(&[&c], &prior, 1).unwrap(), vec!["C"]);
        let same: Vec<FrameRecord> = ["c", "a", "b"]
            .iter()
            .map(|id| FrameRecord::new(*id, vec![bx(1, 0.5, [2.0, 1.0, 1.0], 0.1)]))
            .collect();
        let refs: Vec<&FrameRecord> = same.iter().collect();
        assert_eq!(stage3_greedy_balance(&refs, &prior, 2).unwrap(), vec!["a", "b"]);
        assert!(stage3_greedy_balance(&refs, &prior, 4).is_err());
    }

    #[test]
    fn smoothed_histograms_are_distributions() {
        let p = smooth(&[3.0, 0.0, 1.0], 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
        assert_eq!(p[1], 1e-6 / (4.0 + 3e-6));
        assert_eq!(smooth(&[0.0, 0.0], 1e-6), vec![0.5, 0.5]);
        let h = size_prior();
        assert!(h.kl_to(&h).abs() < 1e-15);
    }

    #[test]
    fn bin_edges_clamp() {
        let e = BinEdges { min: 0.0, max: 10.0, bins: 10 };
        assert_eq!(e.bin(-1.0), 0);
        assert_eq!(e.bin(0.0), 0);
        assert_eq!(e.bin(9.99), 9);
        assert_eq!(e.bin(10.0), 9);
        assert_eq!(e.bin(5.0), 5);
    }

    #[test]
    fn config_validation() {
        let bad = CrbConfig { k1: 10, k2: 20, n_r: 5, ..CrbConfig::default() };
        assert!(bad.validate().is_err());
        assert!(CrbConfig::default().validate().is_ok());
    }

    #[test]
    fn round_zero_and_oversized_rejected() {
        let c = ClassCatalog::new(vec![1], vec![]).unwrap();
        let frames = vec![emb("a", &[0.0])];
        let cfg = CrbConfig { k1: 1, k2: 1, n_r: 1, ..CrbConfig::default() };
        assert!(open_crb_round(&frames, &c, &cfg, 0).is_err());
        let cfg = CrbConfig { k1: 2, k2: 2, n_r: 2, ..CrbConfig::default() };
        assert!(matches!(open_crb_round(&frames, &c, &cfg, 2), Err(Error::TooMany { .. })));
    }
}
