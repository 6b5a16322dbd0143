//! Output files. Every file is written to a temporary sibling and renamed
//! into place.
//!
//! | file | columns |
//! |---|---|
//! | `metrics.csv` | round, cumulative_boxes, known_boxes, unknown_boxes, map_unk, map_k, map_h |
//! | `selections.csv` | round, rank, frame_id, used_olc, n_pred_boxes, olc_score, p_unknown, gt_known, gt_unknown |
//! | `scores.csv` | frame_id, score, n_boxes, p_unknown, then with diagnostics: n_<id>, mean_conf_<id> per class, harmonic_mean, max_entropy_condition |
//! | selection list | rank, frame_id |
//! | evaluation | metric, class_id, value |
//!
//! Floats are printed in the shortest form that parses back to the same value.

use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{ClassCatalog, FrameId};
use crate::scoring::ScoredFrame;
use crate::sim::Trace;

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn metrics_csv(reports: &[MetricReport]) -> Result<Vec<u8>> {
    csv_bytes(
        &header(&["round", "cumulative_boxes", "known_boxes", "unknown_boxes", "map_unk", "map_k", "map_h"]),
        reports.iter().map(|r| {
            vec![
                r.round.to_string(),
                r.cost().to_string(),
                r.known_cost.to_string(),
                r.unknown_cost.to_string(),
                num(r.map_unk),
                num(r.map_k),
                num(r.map_h),
            ]
        }),
    )
}

pub fn selections_csv(trace: &Trace) -> Result<Vec<u8>> {
    csv_bytes(
        &header(&[
            "round",
            "rank",
            "frame_id",
            "used_olc",
            "n_pred_boxes",
            "olc_score",
            "p_unknown",
            "gt_known",
            "gt_unknown",
        ]),
        trace.rounds.iter().flat_map(|r| {
            r.selected.iter().enumerate().map(move |(rank, s)| {
                vec![
                    r.round.to_string(),
                    (rank + 1).to_string(),
                    s.frame_id.clone(),
                    r.used_olc.to_string(),
                    s.n_pred_boxes.to_string(),
                    num(s.olc_score),
                    num(s.p_unknown),
                    s.gt_known.to_string(),
                    s.gt_unknown.to_string(),
                ]
            })
        }),
    )
}

pub fn trace_json(trace: &Trace) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(trace)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// One scored frame with the extra columns of `scores.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub scored: ScoredFrame,
    pub n_boxes: usize,
    pub p_unknown: f64,
}

/// Rows must already be in output order. With `diagnostics`, the per-class
/// columns follow the catalog's effective class order; missing values are
/// left empty.
pub fn scores_csv(rows: &[ScoreRow], catalog: &ClassCatalog, diagnostics: bool) -> Result<Vec<u8>> {
    let mut names = header(&["frame_id", "score", "n_boxes", "p_unknown"]);
    let mut keys = Vec::new();
    if diagnostics {
        let ids = catalog.effective_ids();
        keys.extend(ids.iter().map(|id| format!("n_{id}")));
        keys.extend(ids.iter().map(|id| format!("mean_conf_{id}")));
        keys.push("harmonic_mean".into());
        keys.push("max_entropy_condition".into());
        names.extend(keys.iter().cloned());
    }
    csv_bytes(
        &names,
        rows.iter().map(|r| {
            let mut row = vec![
                r.scored.frame_id.clone(),
                num(r.scored.score),
                r.n_boxes.to_string(),
                num(r.p_unknown),
            ];
            row.extend(keys.iter().map(|k| r.scored.diagnostics.get(k).map(|v| num(*v)).unwrap_or_default()));
            row
        }),
    )
}

pub fn selection_list_csv(ids: &[FrameId]) -> Result<Vec<u8>> {
    csv_bytes(
        &header(&["rank", "frame_id"]),
        ids.iter().enumerate().map(|(i, id)| vec![(i + 1).to_string(), id.clone()]),
    )
}

/// Per-class AP rows (absent classes have an empty value), then the three
/// means.
pub fn evaluation_csv(report: &MetricReport, catalog: &ClassCatalog) -> Result<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = catalog
        .all_ids()
        .into_iter()
        .map(|id| {
            let ap = report.per_class_ap.get(&id).map(|v| num(*v)).unwrap_or_default();
            vec!["ap".into(), id.to_string(), ap]
        })
        .collect();
    for (name, value) in [("map_unk", report.map_unk), ("map_k", report.map_k), ("map_h", report.map_h)] {
        rows.push(vec![name.into(), String::new(), num(value)]);
    }
    csv_bytes(&header(&["metric", "class_id", "value"]), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(round: usize, known: usize, unknown: usize, h: f64) -> MetricReport {
        MetricReport {
            round,
            per_class_ap: BTreeMap::from([(1, 0.5), (2, 0.25)]),
            absent_classes: vec![3],
            map_unk: 0.25,
            map_k: 0.5,
            map_h: h,
            known_cost: known,
            unknown_cost: unknown,
        }
    }

    #[test]
    fn metrics_rows() {
        let text = String::from_utf8(metrics_csv(&[report(0, 0, 0, 0.0), report(1, 10, 5, 1.0 / 3.0)]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,cumulative_boxes,known_boxes,unknown_boxes,map_unk,map_k,map_h");
        assert_eq!(lines[1], "0,0,0,0,0.25,0.5,0");
        assert_eq!(lines[2], "1,15,10,5,0.25,0.5,0.3333333333333333");
        assert_eq!(lines[2].rsplit(',').next().unwrap().parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn evaluation_rows_cover_catalog() {
        let catalog = ClassCatalog::new(vec![1, 2], vec![3]).unwrap();
        let text = String::from_utf8(evaluation_csv(&report(0, 0, 0, 0.3), &catalog).unwrap()).unwrap();
        assert_eq!(
            text,
            "metric,class_id,value\nap,1,0.5\nap,2,0.25\nap,3,\nmap_unk,,0.25\nmap_k,,0.5\nmap_h,,0.3\n"
        );
    }

    #[test]
    fn frame_ids_are_quoted_when_needed() {
        let text = String::from_utf8(selection_list_csv(&["a,b".into(), "c".into()]).unwrap()).unwrap();
        assert_eq!(text, "rank,frame_id\n1,\"a,b\"\n2,c\n");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
