//! Domain types shared by every module: class catalog, boxes, frames, the pool
//! and the annotation-cost ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type FrameId = String;

/// Known classes seen at pre-training plus the unknown classes hidden in the
/// open pool. Unknown classes join the effective known set once annotated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCatalog {
    pub known_ids: Vec<ClassId>,
    #[serde(default)]
    pub unknown_ids: Vec<ClassId>,
    #[serde(default)]
    pub discovered: BTreeSet<ClassId>,
}

impl ClassCatalog {
    pub fn new(known_ids: Vec<ClassId>, unknown_ids: Vec<ClassId>) -> Result<Self> {
        let catalog = Self {
            known_ids,
            unknown_ids,
            discovered: BTreeSet::new(),
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Catalog with classes `1..=known` known and the next `unknown` ids unknown.
    pub fn with_counts(known: u32, unknown: u32) -> Result<Self> {
        Self::new((1..=known).collect(), (known + 1..=known + unknown).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.known_ids.is_empty() {
            return Err(Error::Catalog("at least one known class is required".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.known_ids.iter().chain(&self.unknown_ids) {
            if !seen.insert(*id) {
                return Err(Error::Catalog(format!("class id {id} listed twice")));
            }
        }
        if let Some(id) = self.discovered.iter().find(|id| !self.unknown_ids.contains(id)) {
            return Err(Error::Catalog(format!(
                "discovered class {id} is not an unknown class"
            )));
        }
        Ok(())
    }

    /// Known ids followed by discovered unknown ids, in catalog order. This is
    /// the index order of label distributions and score vectors.
    pub fn effective_ids(&self) -> Vec<ClassId> {
        self.known_ids
            .iter()
            .chain(self.unknown_ids.iter().filter(|id| self.discovered.contains(id)))
            .copied()
            .collect()
    }

    pub fn effective_count(&self) -> usize {
        self.known_ids.len() + self.discovered.len()
    }

    /// Position of `label` in [`Self::effective_ids`].
    pub fn effective_index(&self, label: ClassId) -> Option<usize> {
        self.effective_ids().iter().position(|&id| id == label)
    }

    pub fn is_effective(&self, label: ClassId) -> bool {
        self.known_ids.contains(&label) || self.discovered.contains(&label)
    }

    pub fn is_original_known(&self, label: ClassId) -> bool {
        self.known_ids.contains(&label)
    }

    pub fn is_original_unknown(&self, label: ClassId) -> bool {
        self.unknown_ids.contains(&label)
    }

    pub fn all_ids(&self) -> Vec<ClassId> {
        self.known_ids.iter().chain(&self.unknown_ids).copied().collect()
    }
}

/// Axis-aligned bird's-eye-view footprint: center (x, y), length along x and
/// width along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevRect {
    pub x: f64,
    pub y: f64,
    pub l: f64,
    pub w: f64,
}

/// One detection as delivered by the detector (after its own thresholding/NMS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedBox {
    pub label: ClassId,
    pub confidence: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl PredictedBox {
    pub fn bev(&self) -> BevRect {
        bev_of(&self.center, &self.size)
    }

    /// Schema checks that do not depend on a catalog.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        validate_geometry(&self.center, &self.size, self.heading)?;
        if let Some(scores) = &self.scores {
            if scores.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
                return Err("scores entries must lie in [0, 1]".into());
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if (max - self.confidence).abs() > 1e-6 {
                return Err(format!(
                    "confidence {} differs from max score {max}",
                    self.confidence
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    pub label: ClassId,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
}

impl GroundTruthBox {
    pub fn bev(&self) -> BevRect {
        bev_of(&self.center, &self.size)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        validate_geometry(&self.center, &self.size, self.heading)
    }
}

fn bev_of(center: &[f64; 3], size: &[f64; 3]) -> BevRect {
    BevRect {
        x: center[0],
        y: center[1],
        l: size[0],
        w: size[1],
    }
}

fn validate_geometry(center: &[f64; 3], size: &[f64; 3], heading: f64) -> std::result::Result<(), String> {
    if center.iter().any(|c| !c.is_finite()) {
        return Err("center must be finite".into());
    }
    if size.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err("size components must be positive".into());
    }
    if !heading.is_finite() || !(-PI..PI).contains(&heading) {
        return Err(format!("heading {heading} outside [-pi, pi)"));
    }
    Ok(())
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_heading(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped >= PI {
        -PI
    } else {
        wrapped
    }
}

/// Detector output for one point-cloud frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: FrameId,
    #[serde(default)]
    pub boxes: Vec<PredictedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl FrameRecord {
    pub fn new(frame_id: impl Into<FrameId>, boxes: Vec<PredictedBox>) -> Self {
        Self {
            frame_id: frame_id.into(),
            boxes,
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn embedding(&self) -> Result<&[f64]> {
        self.embedding
            .as_deref()
            .ok_or_else(|| Error::MissingEmbedding(self.frame_id.clone()))
    }
}

/// Checks frame-id uniqueness and a shared embedding dimension across a pool.
pub fn validate_pool_frames(frames: &[FrameRecord]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut dim = None;
    for frame in frames {
        if !ids.insert(frame.frame_id.as_str()) {
            return Err(Error::DuplicateFrame(frame.frame_id.clone()));
        }
        if let Some(e) = &frame.embedding {
            match dim {
                None => dim = Some(e.len()),
                Some(d) if d != e.len() => {
                    return Err(Error::EmbeddingDimension {
                        frame_id: frame.frame_id.clone(),
                        expected: d,
                        got: e.len(),
                    })
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Labeled and unlabeled frame ids plus the oracle-held ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeSet<FrameId>,
    pub unlabeled: BTreeSet<FrameId>,
    #[serde(skip)]
    pub truth: BTreeMap<FrameId, Vec<GroundTruthBox>>,
}

impl PoolState {
    /// Every frame of `truth` starts unlabeled.
    pub fn new(truth: BTreeMap<FrameId, Vec<GroundTruthBox>>) -> Self {
        Self {
            labeled: BTreeSet::new(),
            unlabeled: truth.keys().cloned().collect(),
            truth,
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truth_of(&self, frame_id: &str) -> &[GroundTruthBox] {
        self.truth.get(frame_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    Frames,
    Boxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCap {
    pub mode: BudgetMode,
    pub cap: usize,
}

/// Boxes annotated in one selection round, split by whether their class was
/// effectively known when the round started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: usize,
    pub frames: usize,
    pub known_boxes: usize,
    pub unknown_boxes: usize,
}

impl RoundEntry {
    pub fn cost(&self) -> usize {
        self.known_boxes + self.unknown_boxes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub rounds: Vec<RoundEntry>,
    pub budget: Option<BudgetCap>,
}

impl BudgetLedger {
    pub fn with_budget(budget: BudgetCap) -> Self {
        Self {
            rounds: Vec::new(),
            budget: Some(budget),
        }
    }

    pub fn total_frames(&self) -> usize {
        self.rounds.iter().map(|r| r.frames).sum()
    }

    pub fn total_known(&self) -> usize {
        self.rounds.iter().map(|r| r.known_boxes).sum()
    }

    pub fn total_unknown(&self) -> usize {
        self.rounds.iter().map(|r| r.unknown_boxes).sum()
    }

    pub fn total_cost(&self) -> usize {
        self.total_known() + self.total_unknown()
    }

    pub fn last_round(&self) -> usize {
        self.rounds.last().map_or(0, |r| r.round)
    }

    /// Appends a round, refusing entries that would exceed the cap.
    pub fn record(&mut self, entry: RoundEntry) -> Result<()> {
        if let Some(budget) = self.budget {
            let spent = match budget.mode {
                BudgetMode::Frames => self.total_frames() + entry.frames,
                BudgetMode::Boxes => self.total_cost() + entry.cost(),
            };
            if spent > budget.cap {
                return Err(Error::Budget(format!(
                    "round {} would spend {spent} against a cap of {}",
                    entry.round, budget.cap
                )));
            }
        }
        self.rounds.push(entry);
        Ok(())
    }

    /// `Σ N_r = B` once every round has been recorded under a frame cap.
    pub fn is_exhausted(&self) -> bool {
        match self.budget {
            Some(BudgetCap { mode: BudgetMode::Frames, cap }) => self.total_frames() == cap,
            Some(BudgetCap { mode: BudgetMode::Boxes, cap }) => self.total_cost() >= cap,
            None => false,
        }
    }
}

/// Result of handing a selection to the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub pool: PoolState,
    pub catalog: ClassCatalog,
    pub entry: RoundEntry,
}

/// Moves `selected` from unlabeled to labeled and counts their ground-truth
/// boxes. The oracle labels every object in a selected frame. Unknown classes
/// seen here become discovered in the returned catalog.
pub fn annotate(
    pool: &PoolState,
    catalog: &ClassCatalog,
    selected: &[FrameId],
    round: usize,
) -> Result<Annotation> {
    let mut seen = BTreeSet::new();
    for id in selected {
        if !pool.unlabeled.contains(id) {
            return Err(Error::NotUnlabeled(id.clone()));
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateSelection(id.clone()));
        }
    }

    let mut next_pool = pool.clone();
    let mut next_catalog = catalog.clone();
    let mut entry = RoundEntry {
        round,
        frames: selected.len(),
        known_boxes: 0,
        unknown_boxes: 0,
    };
    for id in selected {
        next_pool.unlabeled.remove(id);
        next_pool.labeled.insert(id.clone());
        for gt in pool.truth_of(id) {
            if catalog.is_effective(gt.label) {
                entry.known_boxes += 1;
            } else {
                entry.unknown_boxes += 1;
                if catalog.is_original_unknown(gt.label) {
                    next_catalog.discovered.insert(gt.label);
                }
            }
        }
    }
    Ok(Annotation {
        pool: next_pool,
        catalog: next_catalog,
        entry,
    })
}

/// Annotated unknown boxes over annotated known boxes for rounds `1..=upto_round`.
/// Returns `+inf` when only unknown boxes were annotated and 0 when nothing was.
pub fn unknown_to_known_ratio(ledger: &BudgetLedger, upto_round: usize) -> Result<f64> {
    let last = ledger.last_round();
    if upto_round > last {
        return Err(Error::RoundOutOfRange {
            requested: upto_round,
            last,
        });
    }
    let (known, unknown) = ledger
        .rounds
        .iter()
        .filter(|r| r.round <= upto_round)
        .fold((0usize, 0usize), |(k, u), r| (k + r.known_boxes, u + r.unknown_boxes));
    Ok(match (known, unknown) {
        (0, 0) => 0.0,
        (0, _) => f64::INFINITY,
        (k, u) => u as f64 / k as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(label: ClassId) -> GroundTruthBox {
        GroundTruthBox {
            label,
            center: [0.0; 3],
            size: [1.0; 3],
            heading: 0.0,
        }
    }

    fn pool() -> PoolState {
        let mut truth = BTreeMap::new();
        truth.insert("f1".to_string(), vec![gt(1), gt(1), gt(2)]);
        truth.insert("f2".to_string(), vec![gt(2)]);
        truth.insert("f3".to_string(), vec![]);
        PoolState::new(truth)
    }

    fn ids(v: &[&str]) -> Vec<FrameId> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn annotate_counts_and_discovers() {
        // car = 1 known, barrier = 2 unknown
        let catalog = ClassCatalog::new(vec![1], vec![2]).unwrap();
        let out = annotate(&pool(), &catalog, &ids(&["f1"]), 1).unwrap();
        assert!(out.pool.labeled.contains("f1"));
        assert!(!out.pool.unlabeled.contains("f1"));
        assert_eq!((out.entry.known_boxes, out.entry.unknown_boxes), (2, 1));
        assert_eq!(out.catalog.discovered, BTreeSet::from([2]));
        assert_eq!(out.catalog.effective_ids(), vec![1, 2]);
    }

    #[test]
    fn annotate_empty_selection() {
        let catalog = ClassCatalog::new(vec![1], vec![2]).unwrap();
        let p = pool();
        let out = annotate(&p, &catalog, &[], 1).unwrap();
        assert_eq!(out.pool, p);
        assert_eq!(out.entry, RoundEntry { round: 1, frames: 0, known_boxes: 0, unknown_boxes: 0 });
    }

    #[test]
    fn annotate_rejects_absent_and_duplicates() {
        let catalog = ClassCatalog::new(vec![1], vec![2]).unwrap();
        let err = annotate(&pool(), &catalog, &ids(&["f_absent"]), 1).unwrap_err();
        assert!(err.to_string().contains("not in unlabeled pool"));
        assert!(err.to_string().contains("f_absent"));
        let err = annotate(&pool(), &catalog, &ids(&["f2", "f2"]), 1).unwrap_err();
        assert!(matches!(err, Error::DuplicateSelection(id) if id == "f2"));
        let once = annotate(&pool(), &catalog, &ids(&["f2"]), 1).unwrap();
        let err = annotate(&once.pool, &once.catalog, &ids(&["f2"]), 2).unwrap_err();
        assert!(matches!(err, Error::NotUnlabeled(_)));
    }

    #[test]
    fn discovered_class_counts_as_known_afterwards() {
        let catalog = ClassCatalog::new(vec![1], vec![2]).unwrap();
        let first = annotate(&pool(), &catalog, &ids(&["f1"]), 1).unwrap();
        let second = annotate(&first.pool, &first.catalog, &ids(&["f2"]), 2).unwrap();
        assert_eq!((second.entry.known_boxes, second.entry.unknown_boxes), (1, 0));
    }

    #[test]
    fn ratio_examples() {
        let mut ledger = BudgetLedger::default();
        ledger
            .record(RoundEntry { round: 1, frames: 3, known_boxes: 100, unknown_boxes: 50 })
            .unwrap();
        assert_eq!(unknown_to_known_ratio(&ledger, 1).unwrap(), 0.5);
        assert!(unknown_to_known_ratio(&ledger, 2).is_err());

        let mut empty = BudgetLedger::default();
        empty
            .record(RoundEntry { round: 1, frames: 0, known_boxes: 0, unknown_boxes: 0 })
            .unwrap();
        assert_eq!(unknown_to_known_ratio(&empty, 1).unwrap(), 0.0);

        let mut only_unknown = BudgetLedger::default();
        only_unknown
            .record(RoundEntry { round: 1, frames: 1, known_boxes: 0, unknown_boxes: 4 })
            .unwrap();
        assert!(unknown_to_known_ratio(&only_unknown, 1).unwrap().is_infinite());

        // 19,232 boxes at a 0.83 ratio split into 10,509 known and 8,723 unknown.
        let mut reference = BudgetLedger::default();
        reference
            .record(RoundEntry { round: 1, frames: 0, known_boxes: 10509, unknown_boxes: 8723 })
            .unwrap();
        let r = unknown_to_known_ratio(&reference, 1).unwrap();
        assert!((r - 0.83).abs() < 0.005, "{r}");
    }

    #[test]
    fn frame_cap_enforced() {
        let mut ledger = BudgetLedger::with_budget(BudgetCap { mode: BudgetMode::Frames, cap: 4 });
        ledger.record(RoundEntry { round: 1, frames: 2, known_boxes: 1, unknown_boxes: 0 }).unwrap();
        ledger.record(RoundEntry { round: 2, frames: 2, known_boxes: 1, unknown_boxes: 0 }).unwrap();
        assert!(ledger.is_exhausted());
        let err = ledger
            .record(RoundEntry { round: 3, frames: 1, known_boxes: 0, unknown_boxes: 0 })
            .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn catalog_validation() {
        assert!(ClassCatalog::new(vec![], vec![1]).is_err());
        assert!(ClassCatalog::new(vec![1, 2], vec![2]).is_err());
        let mut c = ClassCatalog::new(vec![1], vec![]).unwrap();
        c.discovered.insert(5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn heading_wrap() {
        assert_eq!(wrap_heading(PI), -PI);
        assert!((wrap_heading(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_heading(0.25), 0.25);
    }
}
