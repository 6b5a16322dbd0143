//! Command implementations behind the `owal` binary. Each command is a pure
//! function of its inputs and returns the bytes it would print or write.

use std::collections::BTreeSet;
use std::path::Path;

use owal::crb::{crb_select, open_crb_round, CrbConfig};
use owal::io::config::ExperimentConfig;
use owal::io::dump::{check_labels, load_catalog, load_ids, load_predictions, load_truth};
use owal::io::output::{
    evaluation_csv, metrics_csv, scores_csv, selection_list_csv, selections_csv, trace_json, write_atomic, ScoreRow,
};
use owal::metrics::{evaluate as evaluate_report, Thresholds};
use owal::scoring::{
    confidence_margin_score, entropy_score, gradnorm_surrogate_score, label_distribution, olc_score, random_score,
    relationship_diagnostics, select_top_k, coreset_select,
};
use owal::sim::{generate_world, run_experiment, Trace};
use owal::{ClassCatalog, Error, FrameId, FrameRecord, Policy, Result, ScoredFrame};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_DATA
    }
}

/// Runs the configured experiment and writes `trace.json`, `metrics.csv`, and
/// `selections.csv` into `out`.
pub fn simulate(config: &Path, out: &Path, seed_override: Option<&str>) -> Result<Trace> {
    let config = ExperimentConfig::load(config)?.with_seed_override(seed_override)?;
    let world = generate_world(&config.world)?;
    let trace = run_experiment(&world, &config.setup())?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("trace.json"), &trace_json(&trace)?)?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&trace.reports)?)?;
    write_atomic(&out.join("selections.csv"), &selections_csv(&trace)?)?;
    Ok(trace)
}

fn require_per_frame(policy: Policy) -> Result<()> {
    match policy {
        Policy::Olc | Policy::Entropy | Policy::Margin | Policy::GradNorm | Policy::Random => Ok(()),
        other => Err(Error::Config(format!(
            "policy `{other}` selects sets of frames and has no per-frame score; use `select`"
        ))),
    }
}

fn per_frame_score(policy: Policy, frame: &FrameRecord, catalog: &ClassCatalog, seed: u64) -> Result<ScoredFrame> {
    require_per_frame(policy)?;
    match policy {
        Policy::Olc => olc_score(frame, catalog),
        Policy::Entropy => entropy_score(frame, catalog),
        Policy::Margin => confidence_margin_score(frame, catalog),
        Policy::GradNorm => gradnorm_surrogate_score(frame, catalog),
        _ => Ok(random_score(frame, seed)),
    }
}

/// Scores every frame of a dump; rows come out in descending score order.
pub fn score(policy: Policy, dump: &Path, catalog: &Path, diagnostics: bool, seed: u64) -> Result<Vec<u8>> {
    require_per_frame(policy)?;
    let catalog = load_catalog(catalog)?;
    let frames = load_predictions(dump)?;
    check_labels(&frames, &catalog)?;
    let mut rows = Vec::with_capacity(frames.len());
    for frame in &frames {
        let dist = label_distribution(frame, &catalog)?;
        let mut scored = per_frame_score(policy, frame, &catalog, seed)?;
        if diagnostics && !frame.boxes.is_empty() {
            scored
                .diagnostics
                .extend(relationship_diagnostics(&dist, frame)?.to_map());
        }
        rows.push(ScoreRow {
            scored,
            n_boxes: frame.boxes.len(),
            p_unknown: dist.unknown(),
        });
    }
    rows.sort_by(|a, b| {
        b.scored
            .score
            .total_cmp(&a.scored.score)
            .then_with(|| a.scored.frame_id.cmp(&b.scored.frame_id))
    });
    scores_csv(&rows, &catalog, diagnostics)
}

/// Inputs of `select`.
#[derive(Debug, Clone)]
pub struct SelectArgs<'a> {
    pub policy: Policy,
    pub dump: &'a Path,
    pub k: usize,
    pub labeled: Option<&'a Path>,
    pub catalog: Option<&'a Path>,
    pub seed: u64,
    pub round: usize,
}

/// Picks `k` unlabeled frames with the named policy and returns the ranked
/// list as CSV.
pub fn select(args: &SelectArgs) -> Result<Vec<u8>> {
    let frames = load_predictions(args.dump)?;
    let labeled = match args.labeled {
        Some(path) => load_ids(path)?,
        None => BTreeSet::new(),
    };
    let catalog = match (args.catalog, args.policy) {
        (Some(path), _) => {
            let catalog = load_catalog(path)?;
            check_labels(&frames, &catalog)?;
            Some(catalog)
        }
        (None, Policy::Random | Policy::Coreset) => None,
        (None, policy) => return Err(Error::Config(format!("policy `{policy}` needs --catalog"))),
    };
    let unlabeled: Vec<FrameRecord> = frames.iter().filter(|f| !labeled.contains(&f.frame_id)).cloned().collect();
    let picks = pick(args, &frames, &unlabeled, &labeled, catalog.as_ref())?;
    selection_list_csv(&picks)
}

fn pick(
    args: &SelectArgs,
    frames: &[FrameRecord],
    unlabeled: &[FrameRecord],
    labeled: &BTreeSet<FrameId>,
    catalog: Option<&ClassCatalog>,
) -> Result<Vec<FrameId>> {
    let crb = CrbConfig {
        n_r: args.k,
        ..CrbConfig::default()
    };
    match (args.policy, catalog) {
        (Policy::Coreset, _) => {
            let present: BTreeSet<&str> = frames.iter().map(|f| f.frame_id.as_str()).collect();
            if let Some(missing) = labeled.iter().find(|id| !present.contains(id.as_str())) {
                return Err(Error::MissingEmbedding(missing.clone()));
            }
            let mut sorted = frames.to_vec();
            sorted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
            coreset_select(&sorted, labeled, args.k)
        }
        (Policy::Random, _) => {
            let scored: Vec<ScoredFrame> = unlabeled.iter().map(|f| random_score(f, args.seed)).collect();
            select_top_k(&scored, args.k)
        }
        (Policy::OpenCrb, Some(catalog)) => open_crb_round(unlabeled, catalog, &crb, args.round),
        (Policy::Crb, Some(catalog)) => Ok(crb_select(unlabeled, catalog, &crb)?.stage3),
        (_, None) => Err(Error::Config(format!("policy `{}` needs --catalog", args.policy))),
        (policy, Some(catalog)) => {
            let scored = unlabeled
                .iter()
                .map(|f| per_frame_score(policy, f, catalog, args.seed))
                .collect::<Result<Vec<_>>>()?;
            select_top_k(&scored, args.k)
        }
    }
}

/// Evaluates a prediction dump against truth. Without a catalog every class
/// seen in either dump counts as known.
pub fn evaluate(pred: &Path, truth: &Path, tau: f64, catalog: Option<&Path>) -> Result<Vec<u8>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("--tau must lie in (0, 1), got {tau}")));
    }
    let predictions = load_predictions(pred)?;
    let truth = load_truth(truth)?;
    let catalog = match catalog {
        Some(path) => load_catalog(path)?,
        None => {
            let ids: BTreeSet<u32> = truth
                .values()
                .flatten()
                .map(|b| b.label)
                .chain(predictions.iter().flat_map(|f| f.boxes.iter().map(|b| b.label)))
                .collect();
            ClassCatalog::new(ids.into_iter().collect(), vec![])?
        }
    };
    let all: BTreeSet<u32> = catalog.all_ids().into_iter().collect();
    for frame in &predictions {
        if let Some(b) = frame.boxes.iter().find(|b| !all.contains(&b.label)) {
            return Err(Error::UnknownLabel {
                frame_id: frame.frame_id.clone(),
                label: b.label,
            });
        }
    }
    let thresholds = Thresholds {
        default_tau: tau,
        ..Thresholds::default()
    };
    let report = evaluate_report(&predictions, &truth, &catalog, &thresholds);
    evaluation_csv(&report, &catalog)
}
