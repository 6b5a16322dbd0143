//! Detection evaluation: BEV IoU matching, 40-recall-point AP, mAP over
//! unknown and known classes, their harmonic mean, and cost curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{BevRect, ClassCatalog, ClassId, FrameId, FrameRecord, GroundTruthBox};

pub const RECALL_POINTS: usize = 40;

/// Intersection over union of two axis-aligned BEV rectangles.
pub fn bev_iou(a: BevRect, b: BevRect) -> f64 {
    let overlap = |c1: f64, s1: f64, c2: f64, s2: f64| {
        let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
        let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.x, a.l, b.x, b.l) * overlap(a.y, a.w, b.y, b.w);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One detection of the class under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_id: FrameId,
    /// Position of the box within its frame; second tie-break key.
    pub index: usize,
    pub confidence: f64,
    pub bev: BevRect,
}

/// Sorts detections by descending confidence (ties by frame id, then box
/// index) and greedily matches each to the unmatched ground truth of highest
/// IoU in its frame. Returns the sorted detections with their TP flags.
pub fn match_detections<'a>(
    detections: &'a [Detection],
    truth: &BTreeMap<FrameId, Vec<BevRect>>,
    tau: f64,
) -> Vec<(&'a Detection, bool)> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.frame_id.cmp(&b.frame_id))
            .then_with(|| a.index.cmp(&b.index))
    });
    let mut matched: BTreeMap<&str, Vec<bool>> = truth
        .iter()
        .map(|(id, gts)| (id.as_str(), vec![false; gts.len()]))
        .collect();
    order
        .into_iter()
        .map(|det| {
            let tp = match (truth.get(&det.frame_id), matched.get_mut(det.frame_id.as_str())) {
                (Some(gts), Some(used)) => {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, gt) in gts.iter().enumerate() {
                        if used[j] {
                            continue;
                        }
                        let iou = bev_iou(det.bev, *gt);
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((j, iou));
                        }
                    }
                    match best {
                        Some((j, iou)) if iou >= tau => {
                            used[j] = true;
                            true
                        }
                        _ => false,
                    }
                }
                _ => false,
            };
            (det, tp)
        })
        .collect()
}

/// Interpolated AP over recall thresholds 1/40, 2/40, ..., 1. Zero when the
/// class has no ground truth.
pub fn average_precision(detections: &[Detection], truth: &BTreeMap<FrameId, Vec<BevRect>>, tau: f64) -> f64 {
    let n_gt: usize = truth.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let flags = match_detections(detections, truth, tau);
    // (true positives so far, precision) after each detection
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, (_, is_tp)) in flags.iter().enumerate() {
        tp += usize::from(*is_tp);
        curve.push((tp, tp as f64 / (i + 1) as f64));
    }
    // running max of precision from the tail
    let mut best_from = vec![0.0_f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_from[i] = best_from[i + 1].max(curve[i].1);
    }
    let mut sum = 0.0;
    let mut cursor = 0;
    for t in 1..=RECALL_POINTS {
        // recall ≥ t/40  <=>  40·tp ≥ t·n_gt
        while cursor < curve.len() && curve[cursor].0 * RECALL_POINTS < t * n_gt {
            cursor += 1;
        }
        if cursor < curve.len() {
            sum += best_from[cursor];
        }
    }
    sum / RECALL_POINTS as f64
}

/// `2 / (1/a + 1/b)`, zero when either input is zero.
pub fn harmonic_map(map_unk: f64, map_k: f64) -> f64 {
    if map_unk <= 0.0 || map_k <= 0.0 {
        0.0
    } else {
        2.0 / (1.0 / map_unk + 1.0 / map_k)
    }
}

/// IoU thresholds: one default plus per-class overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_tau")]
    pub default_tau: f64,
    #[serde(default)]
    pub per_class: BTreeMap<ClassId, f64>,
}

fn default_tau() -> f64 {
    0.5
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            default_tau: default_tau(),
            per_class: BTreeMap::new(),
        }
    }
}

impl Thresholds {
    pub fn tau(&self, class: ClassId) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default_tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub round: usize,
    pub per_class_ap: BTreeMap<ClassId, f64>,
    /// Classes without test ground truth; excluded from every mean.
    pub absent_classes: Vec<ClassId>,
    pub map_unk: f64,
    pub map_k: f64,
    pub map_h: f64,
    pub known_cost: usize,
    pub unknown_cost: usize,
}

impl MetricReport {
    pub fn cost(&self) -> usize {
        self.known_cost + self.unknown_cost
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-class AP for every catalog class, then the three means. mAP_unk and
/// mAP_k average over the original unknown and known classes respectively.
pub fn evaluate(
    predictions: &[FrameRecord],
    truth: &BTreeMap<FrameId, Vec<GroundTruthBox>>,
    catalog: &ClassCatalog,
    thresholds: &Thresholds,
) -> MetricReport {
    let mut per_class_ap = BTreeMap::new();
    let mut absent_classes = Vec::new();
    for class in catalog.all_ids() {
        let class_truth: BTreeMap<FrameId, Vec<BevRect>> = truth
            .iter()
            .map(|(id, gts)| {
                (
                    id.clone(),
                    gts.iter().filter(|g| g.label == class).map(GroundTruthBox::bev).collect(),
                )
            })
            .collect();
        if class_truth.values().all(Vec::is_empty) {
            absent_classes.push(class);
            continue;
        }
        let detections: Vec<Detection> = predictions
            .iter()
            .flat_map(|f| {
                f.boxes
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.label == class)
                    .map(|(index, b)| Detection {
                        frame_id: f.frame_id.clone(),
                        index,
                        confidence: b.confidence,
                        bev: b.bev(),
                    })
            })
            .collect();
        per_class_ap.insert(class, average_precision(&detections, &class_truth, thresholds.tau(class)));
    }
    let collect = |ids: &[ClassId]| -> Vec<f64> { ids.iter().filter_map(|id| per_class_ap.get(id).copied()).collect() };
    let map_unk = mean(&collect(&catalog.unknown_ids));
    let map_k = mean(&collect(&catalog.known_ids));
    MetricReport {
        round: 0,
        per_class_ap,
        absent_classes,
        map_unk,
        map_k,
        map_h: harmonic_map(map_unk, map_k),
        known_cost: 0,
        unknown_cost: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub round: usize,
    pub cumulative_boxes: usize,
    pub map_unk: f64,
    pub map_k: f64,
    pub map_h: f64,
}

pub fn cost_curve(reports: &[MetricReport]) -> Vec<CostRow> {
    reports
        .iter()
        .map(|r| CostRow {
            round: r.round,
            cumulative_boxes: r.cost(),
            map_unk: r.map_unk,
            map_k: r.map_k,
            map_h: r.map_h,
        })
        .collect()
}

/// Piecewise-linear value of `field` at `cost`, held constant beyond the
/// first and last rows.
pub fn interpolate_at(curve: &[CostRow], cost: f64, field: impl Fn(&CostRow) -> f64) -> f64 {
    let Some(first) = curve.first() else { return 0.0 };
    if cost <= first.cumulative_boxes as f64 {
        return field(first);
    }
    for pair in curve.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (x0, x1) = (a.cumulative_boxes as f64, b.cumulative_boxes as f64);
        if cost <= x1 {
            if x1 == x0 {
                return field(b);
            }
            let w = (cost - x0) / (x1 - x0);
            return field(a) + w * (field(b) - field(a));
        }
    }
    field(curve.last().expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictedBox;

    fn rect(x: f64, y: f64) -> BevRect {
        BevRect { x, y, l: 1.0, w: 1.0 }
    }

    fn det(frame: &str, index: usize, confidence: f64, bev: BevRect) -> Detection {
        Detection {
            frame_id: frame.into(),
            index,
            confidence,
            bev,
        }
    }

    fn truth(frame: &str, boxes: Vec<BevRect>) -> BTreeMap<FrameId, Vec<BevRect>> {
        BTreeMap::from([(frame.to_string(), boxes)])
    }

    #[test]
    fn iou_examples() {
        assert_eq!(bev_iou(rect(0.0, 0.0), rect(0.0, 0.0)), 1.0);
        assert_eq!(bev_iou(rect(0.0, 0.0), rect(5.0, 0.0)), 0.0);
        assert!((bev_iou(rect(0.0, 0.0), rect(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges have zero area in common
        assert_eq!(bev_iou(rect(0.0, 0.0), rect(1.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_matches_monte_carlo_area() {
        use rand::{Rng, SeedableRng};
        let a = BevRect { x: 0.3, y: -0.2, l: 2.0, w: 1.5 };
        let b = BevRect { x: 1.1, y: 0.4, l: 1.2, w: 2.2 };
        let inside = |r: BevRect, x: f64, y: f64| (x - r.x).abs() <= r.l / 2.0 && (y - r.y).abs() <= r.w / 2.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (mut both, mut any) = (0u32, 0u32);
        for _ in 0..200_000 {
            let x = rng.random_range(-1.0..2.0);
            let y = rng.random_range(-1.5..2.0);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += u32::from(ia && ib);
            any += u32::from(ia || ib);
        }
        let mc = both as f64 / any as f64;
        assert!((bev_iou(a, b) - mc).abs() < 0.01, "{} vs {mc}", bev_iou(a, b));
    }

    #[test]
    fn ap_examples() {
        let t = truth("f", vec![rect(0.0, 0.0)]);
        assert_eq!(average_precision(&[det("f", 0, 0.9, rect(0.0, 0.0))], &t, 0.5), 1.0);
        let dets = [det("f", 0, 0.9, rect(9.0, 9.0)), det("f", 1, 0.8, rect(0.0, 0.0))];
        assert!((average_precision(&dets, &t, 0.5) - 0.5).abs() < 1e-12);
        let none = truth("f", vec![]);
        assert_eq!(average_precision(&dets, &none, 0.5), 0.0);
        assert_eq!(average_precision(&[], &t, 0.5), 0.0);
    }

    #[test]
    fn ap_half_recall() {
        // two GT, one found: recall reaches 1/2, so 20 of 40 thresholds score 1
        let t = truth("f", vec![rect(0.0, 0.0), rect(5.0, 5.0)]);
        let ap = average_precision(&[det("f", 0, 0.7, rect(0.0, 0.0))], &t, 0.5);
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_never_double_matches() {
        let t = truth("f", vec![rect(0.0, 0.0)]);
        let dets = [det("f", 0, 0.9, rect(0.0, 0.0)), det("f", 1, 0.8, rect(0.0, 0.0))];
        let flags = match_detections(&dets, &t, 0.5);
        assert_eq!(flags.iter().filter(|(_, tp)| *tp).count(), 1);
        assert!(flags[0].1);
    }

    #[test]
    fn confidence_ties_break_by_frame_then_index() {
        let t = BTreeMap::from([("a".to_string(), vec![rect(0.0, 0.0)]), ("b".to_string(), vec![])]);
        let dets = [det("b", 0, 0.5, rect(0.0, 0.0)), det("a", 1, 0.5, rect(0.0, 0.0)), det("a", 0, 0.5, rect(7.0, 0.0))];
        let order: Vec<(String, usize)> = match_detections(&dets, &t, 0.5)
            .iter()
            .map(|(d, _)| (d.frame_id.clone(), d.index))
            .collect();
        assert_eq!(order, vec![("a".into(), 0), ("a".into(), 1), ("b".into(), 0)]);
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_map(0.2, 0.6) - 0.3).abs() < 1e-12);
        assert!((harmonic_map(0.37, 0.37) - 0.37).abs() < 1e-12);
        assert_eq!(harmonic_map(0.0, 0.9), 0.0);
    }

    fn gt(label: ClassId, x: f64) -> GroundTruthBox {
        GroundTruthBox { label, center: [x, 0.0, 0.0], size: [1.0; 3], heading: 0.0 }
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let catalog = ClassCatalog::new(vec![1, 2], vec![3, 4]).unwrap();
        let truth = BTreeMap::from([
            ("f1".to_string(), vec![gt(1, 0.0), gt(3, 5.0)]),
            ("f2".to_string(), vec![gt(2, 0.0), gt(1, 9.0)]),
        ]);
        let preds: Vec<FrameRecord> = truth
            .iter()
            .map(|(id, gts)| {
                FrameRecord::new(
                    id.clone(),
                    gts.iter()
                        .map(|g| PredictedBox {
                            label: g.label,
                            confidence: 1.0,
                            center: g.center,
                            size: g.size,
                            heading: g.heading,
                            scores: None,
                        })
                        .collect(),
                )
            })
            .collect();
        let report = evaluate(&preds, &truth, &catalog, &Thresholds::default());
        assert_eq!(report.absent_classes, vec![4]);
        assert!(report.per_class_ap.values().all(|&ap| ap == 1.0));
        assert_eq!((report.map_unk, report.map_k, report.map_h), (1.0, 1.0, 1.0));

        let nothing = evaluate(&[], &truth, &catalog, &Thresholds::default());
        assert_eq!(nothing.map_h, 0.0);
        assert_eq!(nothing.per_class_ap.len(), 3);
    }

    #[test]
    fn cost_curve_and_interpolation() {
        let report = |round, known_cost, map_h| MetricReport {
            round,
            per_class_ap: BTreeMap::new(),
            absent_classes: vec![],
            map_unk: map_h,
            map_k: map_h,
            map_h,
            known_cost,
            unknown_cost: 0,
        };
        let curve = cost_curve(&[report(0, 0, 0.1), report(1, 100, 0.3), report(2, 300, 0.5)]);
        assert_eq!(curve.len(), 3);
        assert!(curve.windows(2).all(|w| w[0].cumulative_boxes <= w[1].cumulative_boxes));
        assert!((interpolate_at(&curve, 50.0, |r| r.map_h) - 0.2).abs() < 1e-12);
        assert!((interpolate_at(&curve, 200.0, |r| r.map_h) - 0.4).abs() < 1e-12);
        assert_eq!(interpolate_at(&curve, 1000.0, |r| r.map_h), 0.5);
        assert_eq!(cost_curve(&[report(1, 5, 0.2)]).len(), 1);
    }
}
