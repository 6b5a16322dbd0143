use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crb::{crb_select, olc_select, CrbConfig, PriorSource};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, Thresholds};
use crate::model::{
    annotate, BudgetCap, BudgetLedger, BudgetMode, ClassCatalog, ClassId, FrameId, FrameRecord, RoundEntry,
};
use crate::rng::stream;
use crate::scoring::{
    confidence_margin_score, coreset_select, entropy_score, gradnorm_surrogate_score, label_distribution,
    olc_score, random_score, select_top_k, Policy, ScoredFrame,
};

use super::surrogate::{DetectorSurrogate, SurrogateConfig};
use super::world::World;

/// Active-learning protocol: `m` pre-training frames, `n_r` picks per round,
/// `rounds` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub m: usize,
    pub n_r: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            m: 100,
            n_r: 100,
            rounds: 4,
            seed: 7,
        }
    }
}

/// Which policy runs each round; `olc_first_round` swaps round 1 for OLC
/// (implied by `open-crb`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: Policy,
    #[serde(default)]
    pub olc_first_round: bool,
}

impl PolicySpec {
    pub fn plain(name: Policy) -> Self {
        Self {
            name,
            olc_first_round: false,
        }
    }

    pub fn with_olc_first_round(name: Policy) -> Self {
        Self {
            name,
            olc_first_round: true,
        }
    }

    fn uses_olc(&self, round: usize) -> bool {
        self.name == Policy::Olc || (round == 1 && (self.olc_first_round || self.name == Policy::OpenCrb))
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self::plain(Policy::OpenCrb)
    }
}

/// Per-frame diagnostics for one selected frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFrame {
    pub frame_id: FrameId,
    pub n_pred_boxes: usize,
    pub olc_score: f64,
    pub p_unknown: f64,
    pub gt_known: usize,
    pub gt_unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub used_olc: bool,
    pub selected: Vec<SelectedFrame>,
    pub entry: RoundEntry,
    pub discovered: Vec<ClassId>,
    pub competence: BTreeMap<ClassId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub frames: Vec<FrameId>,
    pub known_boxes: usize,
    /// Unknown-class objects present in pre-training frames but left unlabeled.
    pub unlabeled_unknown_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub policy: PolicySpec,
    pub protocol: Protocol,
    pub pretrain: PretrainRecord,
    pub rounds: Vec<RoundTrace>,
    pub ledger: BudgetLedger,
    /// Test-set evaluation after pre-training (round 0) and after each round.
    pub reports: Vec<MetricReport>,
}

impl Trace {
    pub fn final_report(&self) -> &MetricReport {
        self.reports.last().expect("round 0 is always evaluated")
    }
}

/// Everything besides the world that an experiment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub protocol: Protocol,
    pub policy: PolicySpec,
    pub surrogate: SurrogateConfig,
    pub crb: CrbConfig,
    pub thresholds: Thresholds,
}

impl Default for ExperimentSetup {
    fn default() -> Self {
        Self {
            protocol: Protocol::default(),
            policy: PolicySpec::default(),
            surrogate: SurrogateConfig::default(),
            crb: simulation_crb(),
            thresholds: Thresholds::default(),
        }
    }
}

/// CRB settings for the default simulated pool: tight stage-1/2 budgets
/// around `n_r = 100` and a uniform geometry prior.
pub fn simulation_crb() -> CrbConfig {
    CrbConfig {
        k1: 130,
        k2: 110,
        prior_source: PriorSource::Uniform,
        ..CrbConfig::default()
    }
}

fn predict_frames(
    world: &World,
    surrogate: &DetectorSurrogate,
    catalog: &ClassCatalog,
    ids: &[FrameId],
    split: &str,
    seed: u64,
    round: usize,
) -> Vec<FrameRecord> {
    let round_key = round.to_string();
    ids.iter()
        .map(|id| {
            let truth = match split {
                "test" => world.test.get(id).map(Vec::as_slice).unwrap_or(&[]),
                _ => world.pool.truth_of(id),
            };
            let mut rng = stream(seed, &[split, id, &round_key]);
            let mut frame = surrogate.predict(id, truth, catalog, &mut rng);
            frame.embedding = world.embeddings.get(id).cloned();
            frame
        })
        .collect()
}

fn scored_top_k(
    frames: &[FrameRecord],
    k: usize,
    score: impl Fn(&FrameRecord) -> Result<ScoredFrame>,
) -> Result<Vec<FrameId>> {
    let scored = frames.iter().map(score).collect::<Result<Vec<_>>>()?;
    select_top_k(&scored, k)
}

fn select(
    spec: &PolicySpec,
    round: usize,
    unlabeled: &[FrameRecord],
    labeled: &BTreeSet<FrameId>,
    world: &World,
    catalog: &ClassCatalog,
    setup: &ExperimentSetup,
) -> Result<Vec<FrameId>> {
    let k = setup.protocol.n_r;
    if spec.uses_olc(round) {
        return olc_select(unlabeled, catalog, k);
    }
    match spec.name {
        Policy::Random => {
            let round_seed: u64 = stream(setup.protocol.seed, &["random-policy-round", &round.to_string()]).random();
            scored_top_k(unlabeled, k, |f| Ok(random_score(f, round_seed)))
        }
        Policy::Entropy => scored_top_k(unlabeled, k, |f| entropy_score(f, catalog)),
        Policy::Margin => scored_top_k(unlabeled, k, |f| confidence_margin_score(f, catalog)),
        Policy::GradNorm => scored_top_k(unlabeled, k, |f| gradnorm_surrogate_score(f, catalog)),
        Policy::Olc => olc_select(unlabeled, catalog, k),
        Policy::Coreset => {
            let mut frames: Vec<FrameRecord> = unlabeled.to_vec();
            for id in labeled {
                let mut f = FrameRecord::new(id.clone(), vec![]);
                f.embedding = world.embeddings.get(id).cloned();
                frames.push(f);
            }
            coreset_select(&frames, labeled, k)
        }
        Policy::Crb | Policy::OpenCrb => {
            let config = CrbConfig { n_r: k, ..setup.crb.clone() };
            Ok(crb_select(unlabeled, catalog, &config)?.stage3)
        }
    }
}

/// Pre-trains on `m` random frames (known-class boxes only), then alternates
/// predict / select / annotate / retrain / evaluate for the protocol's rounds.
pub fn run_experiment(world: &World, setup: &ExperimentSetup) -> Result<Trace> {
    let protocol = setup.protocol;
    let needed = protocol.m + protocol.rounds * protocol.n_r;
    if needed > world.pool.len() {
        return Err(Error::Budget(format!(
            "m + rounds * n_r = {needed} exceeds the pool of {} frames",
            world.pool.len()
        )));
    }
    setup.surrogate.validate()?;
    let seed = protocol.seed;

    let mut ids: Vec<FrameId> = world.pool.unlabeled.iter().cloned().collect();
    ids.shuffle(&mut stream(seed, &["pretrain"]));
    let mut pretrain_ids: Vec<FrameId> = ids.into_iter().take(protocol.m).collect();
    pretrain_ids.sort();

    let mut catalog = world.catalog.clone();
    let mut pool = world.pool.clone();
    for id in &pretrain_ids {
        pool.unlabeled.remove(id);
        pool.labeled.insert(id.clone());
    }
    let pretrain_boxes = pretrain_ids.iter().flat_map(|id| world.pool.truth_of(id));
    let mut surrogate = DetectorSurrogate::new(setup.surrogate.clone(), &world.config).retrain(pretrain_boxes.clone(), &catalog);
    let pretrain = PretrainRecord {
        frames: pretrain_ids.clone(),
        known_boxes: pretrain_boxes.clone().filter(|b| catalog.is_original_known(b.label)).count(),
        unlabeled_unknown_boxes: pretrain_boxes.filter(|b| !catalog.is_original_known(b.label)).count(),
    };

    let test_ids: Vec<FrameId> = world.test.keys().cloned().collect();
    let evaluate_round = |surrogate: &DetectorSurrogate, catalog: &ClassCatalog, round: usize, ledger: &BudgetLedger| {
        let preds = predict_frames(world, surrogate, catalog, &test_ids, "test", seed, round);
        let mut report = evaluate(&preds, &world.test, catalog, &setup.thresholds);
        report.round = round;
        report.known_cost = ledger.total_known();
        report.unknown_cost = ledger.total_unknown();
        report
    };

    let mut ledger = BudgetLedger::with_budget(BudgetCap {
        mode: BudgetMode::Frames,
        cap: protocol.rounds * protocol.n_r,
    });
    let mut reports = vec![evaluate_round(&surrogate, &catalog, 0, &ledger)];
    let mut rounds = Vec::with_capacity(protocol.rounds);

    for round in 1..=protocol.rounds {
        let unlabeled_ids: Vec<FrameId> = pool.unlabeled.iter().cloned().collect();
        let unlabeled = predict_frames(world, &surrogate, &catalog, &unlabeled_ids, "pool", seed, round);
        let picks = select(&setup.policy, round, &unlabeled, &pool.labeled, world, &catalog, setup)?;

        let by_id: BTreeMap<&str, &FrameRecord> = unlabeled.iter().map(|f| (f.frame_id.as_str(), f)).collect();
        let selected = picks
            .iter()
            .map(|id| {
                let frame = by_id[id.as_str()];
                let dist = label_distribution(frame, &catalog)?;
                let truth = world.pool.truth_of(id);
                let gt_known = truth.iter().filter(|b| catalog.is_effective(b.label)).count();
                Ok(SelectedFrame {
                    frame_id: id.clone(),
                    n_pred_boxes: frame.boxes.len(),
                    olc_score: olc_score(frame, &catalog)?.score,
                    p_unknown: dist.unknown(),
                    gt_known,
                    gt_unknown: truth.len() - gt_known,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let annotation = annotate(&pool, &catalog, &picks, round)?;
        ledger.record(annotation.entry)?;
        pool = annotation.pool;
        catalog = annotation.catalog;
        surrogate = surrogate.retrain(picks.iter().flat_map(|id| world.pool.truth_of(id)), &catalog);

        reports.push(evaluate_round(&surrogate, &catalog, round, &ledger));
        rounds.push(RoundTrace {
            round,
            used_olc: setup.policy.uses_olc(round),
            selected,
            entry: annotation.entry,
            discovered: catalog.discovered.iter().copied().collect(),
            competence: catalog
                .all_ids()
                .into_iter()
                .map(|c| (c, surrogate.competence(c, &catalog)))
                .collect(),
        });
    }

    Ok(Trace {
        policy: setup.policy,
        protocol,
        pretrain,
        rounds,
        ledger,
        reports,
    })
}
