//! JSON Lines prediction and truth dumps: one frame object per line.
//!
//! Prediction rows:
//!
//! ```json
//! {"frame_id": "000123", "boxes": [{"label": 1, "confidence": 0.82, "center": [10.0, -2.5, 0.8],
//!   "size": [3.9, 1.6, 1.5], "heading": 0.3, "scores": [0.82, 0.09, 0.09]}], "embedding": [0.1, 2.0]}
//! ```
//!
//! `scores` and `embedding` are optional. Truth rows use the same layout;
//! `confidence` and `scores` are accepted there and ignored. Blank lines are
//! skipped. Errors carry the 1-based line number.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, FrameId, FrameRecord, GroundTruthBox};

fn lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| Ok((i + 1, line?)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads a prediction dump, validating every box and the shared embedding
/// dimension.
pub fn read_predictions(reader: impl BufRead) -> Result<Vec<FrameRecord>> {
    let mut frames = Vec::new();
    let mut ids = BTreeSet::new();
    let mut dim: Option<usize> = None;
    for item in lines(reader) {
        let (line, text) = item?;
        let frame: FrameRecord = serde_json::from_str(&text).map_err(|e| parse_error(line, e.to_string()))?;
        for (i, b) in frame.boxes.iter().enumerate() {
            b.validate()
                .map_err(|reason| parse_error(line, format!("frame `{}` box {i}: {reason}", frame.frame_id)))?;
        }
        if let Some(e) = &frame.embedding {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(parse_error(line, format!("frame `{}`: embedding must be finite", frame.frame_id)));
            }
            match dim {
                Some(d) if d != e.len() => {
                    return Err(parse_error(
                        line,
                        format!("frame `{}`: embedding dimension {} differs from {d}", frame.frame_id, e.len()),
                    ))
                }
                _ => dim = Some(e.len()),
            }
        }
        if !ids.insert(frame.frame_id.clone()) {
            return Err(parse_error(line, format!("duplicate frame id `{}`", frame.frame_id)));
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthBoxRow {
    label: u32,
    center: [f64; 3],
    size: [f64; 3],
    heading: f64,
    #[serde(default)]
    #[allow(dead_code)]
    confidence: Option<f64>,
    #[serde(default)]
    #[allow(dead_code)]
    scores: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRow {
    frame_id: FrameId,
    #[serde(default)]
    boxes: Vec<TruthBoxRow>,
    #[serde(default)]
    #[allow(dead_code)]
    embedding: Option<Vec<f64>>,
}

/// Reads a ground-truth dump keyed by frame id.
pub fn read_truth(reader: impl BufRead) -> Result<BTreeMap<FrameId, Vec<GroundTruthBox>>> {
    let mut truth = BTreeMap::new();
    for item in lines(reader) {
        let (line, text) = item?;
        let row: TruthRow = serde_json::from_str(&text).map_err(|e| parse_error(line, e.to_string()))?;
        let boxes = row
            .boxes
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                let gt = GroundTruthBox {
                    label: b.label,
                    center: b.center,
                    size: b.size,
                    heading: b.heading,
                };
                gt.validate()
                    .map(|_| gt)
                    .map_err(|reason| parse_error(line, format!("frame `{}` box {i}: {reason}", row.frame_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        if truth.insert(row.frame_id.clone(), boxes).is_some() {
            return Err(parse_error(line, format!("duplicate frame id `{}`", row.frame_id)));
        }
    }
    Ok(truth)
}

/// Writes one JSON object per frame. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_predictions(mut writer: impl Write, frames: &[FrameRecord]) -> Result<()> {
    for frame in frames {
        serde_json::to_writer(&mut writer, frame)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Checks that every box label is an effective known class of `catalog`.
pub fn check_labels(frames: &[FrameRecord], catalog: &ClassCatalog) -> Result<()> {
    for frame in frames {
        if let Some(b) = frame.boxes.iter().find(|b| !catalog.is_effective(b.label)) {
            return Err(Error::UnknownLabel {
                frame_id: frame.frame_id.clone(),
                label: b.label,
            });
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(std::io::BufReader::new(file))
}

pub fn load_predictions(path: &Path) -> Result<Vec<FrameRecord>> {
    read_predictions(open(path)?)
}

pub fn load_truth(path: &Path) -> Result<BTreeMap<FrameId, Vec<GroundTruthBox>>> {
    read_truth(open(path)?)
}

pub fn load_catalog(path: &Path) -> Result<ClassCatalog> {
    let catalog: ClassCatalog =
        serde_json::from_reader(open(path)?).map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))?;
    catalog.validate()?;
    Ok(catalog)
}

/// One frame id per line; blank lines skipped.
pub fn load_ids(path: &Path) -> Result<BTreeSet<FrameId>> {
    let mut ids = BTreeSet::new();
    for item in lines(open(path)?) {
        let (_, text) = item?;
        ids.insert(text.trim().to_string());
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictedBox;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<FrameRecord>> {
        read_predictions(text.as_bytes())
    }

    const BOX: &str = r#"{"label":1,"confidence":0.5,"center":[0,0,0],"size":[1,1,1],"heading":0.0}"#;

    #[test]
    fn parses_rows_and_skips_blank_lines() {
        let text = format!("{{\"frame_id\":\"a\",\"boxes\":[{BOX}]}}\n\n{{\"frame_id\":\"b\",\"boxes\":[]}}\n");
        let frames = parse(&text).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].boxes[0].confidence, 0.5);
        assert!(parse("").unwrap().is_empty());
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_line() {
        let ok = format!("{{\"frame_id\":\"a\",\"boxes\":[{BOX}]}}");
        let bad_rows = [
            r#"{"frame_id":"b","boxes":[{"label":1,"confidence":NaN,"center":[0,0,0],"size":[1,1,1],"heading":0}]}"#.to_string(),
            r#"{"frame_id":"b","boxes":[{"label":1,"confidence":1.5,"center":[0,0,0],"size":[1,1,1],"heading":0}]}"#.to_string(),
            r#"{"frame_id":"b","boxes":[{"label":1,"confidence":0.5,"center":[0,0,0],"size":[1,1,1],"heading":4.0}]}"#.to_string(),
            r#"{"frame_id":"b","boxes":[{"label":1,"confidence":0.5,"center":[0,0,0],"size":[0,1,1],"heading":0}]}"#.to_string(),
            r#"{"frame_id":"b","boxes":[],"extra":1}"#.to_string(),
            r#"{"frame_id":"a","boxes":[]}"#.to_string(),
            "not json".to_string(),
        ];
        for bad in bad_rows {
            let text = format!("{ok}\n\n{bad}\n");
            assert_eq!(line_of(parse(&text).unwrap_err()), 3, "{bad}");
        }
        let dims = "{\"frame_id\":\"a\",\"embedding\":[1,2]}\n{\"frame_id\":\"b\",\"embedding\":[1]}";
        assert_eq!(line_of(parse(dims).unwrap_err()), 2);
    }

    #[test]
    fn truth_rows_accept_confidence() {
        let text = format!("{{\"frame_id\":\"a\",\"boxes\":[{BOX}]}}\n");
        let truth = read_truth(text.as_bytes()).unwrap();
        assert_eq!(truth["a"][0].label, 1);
        let bad = r#"{"frame_id":"a","boxes":[{"label":1,"center":[0,0,0],"size":[1,-1,1],"heading":0}]}"#;
        assert!(matches!(read_truth(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unlisted_label_names_class() {
        let frames = parse(&format!("{{\"frame_id\":\"a\",\"boxes\":[{}]}}", BOX.replace("\"label\":1", "\"label\":9"))).unwrap();
        let catalog = ClassCatalog::new(vec![1, 2], vec![]).unwrap();
        let err = check_labels(&frames, &catalog).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e6f64..1e6
    }

    prop_compose! {
        fn arb_box()(label in 1u32..5, confidence in 0.0f64..=1.0, center in [finite(), finite(), finite()],
                     size in [1e-3f64..50.0, 1e-3f64..50.0, 1e-3f64..50.0],
                     heading in -std::f64::consts::PI..std::f64::consts::PI) -> PredictedBox {
            PredictedBox { label, confidence, center, size, heading, scores: None }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(boxes in prop::collection::vec(arb_box(), 0..6),
                                  embedding in prop::option::of(prop::collection::vec(finite(), 3))) {
            let frame = FrameRecord { frame_id: "f".into(), boxes, embedding };
            let mut out = Vec::new();
            write_predictions(&mut out, std::slice::from_ref(&frame)).unwrap();
            let back = read_predictions(out.as_slice()).unwrap();
            prop_assert_eq!(&back, &vec![frame]);
            let mut again = Vec::new();
            write_predictions(&mut again, &back).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
