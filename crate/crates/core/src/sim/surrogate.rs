use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap_heading, ClassCatalog, ClassId, FrameRecord, GroundTruthBox, PredictedBox};

use super::world::{WorldConfig, MIN_EXTENT};

/// Tunable behaviour of the detector stand-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Labeled boxes at which a class reaches competence 0.5.
    pub half_saturation: f64,
    pub confidence_noise: f64,
    /// Localization noise (meters) of a class with zero competence.
    pub localization_noise: f64,
    /// Chance that an object of an untrained class fires a spurious box.
    pub spurious_rate: f64,
    /// Poisson mean of pure false positives per frame.
    pub false_positive_rate: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            half_saturation: 4.0,
            confidence_noise: 0.03,
            localization_noise: 6.0,
            spurious_rate: 0.3,
            false_positive_rate: 0.05,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("surrogate.{field} out of range")))
            }
        };
        check(self.half_saturation > 0.0, "half_saturation")?;
        check(self.confidence_noise >= 0.0, "confidence_noise")?;
        check(self.localization_noise >= 0.0, "localization_noise")?;
        check((0.0..=1.0).contains(&self.spurious_rate), "spurious_rate")?;
        check(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite(), "false_positive_rate")
    }
}

/// Size and placement prior used for pure false positives of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub size_mean: [f64; 3],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
}

/// Stochastic map from ground truth to detections whose per-class competence
/// `κ = n / (n + h)` grows with the labeled box count `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSurrogate {
    pub config: SurrogateConfig,
    pub labeled_boxes: BTreeMap<ClassId, usize>,
    pub shapes: BTreeMap<ClassId, ClassShape>,
}

impl DetectorSurrogate {
    pub fn new(config: SurrogateConfig, world: &WorldConfig) -> Self {
        let shapes = world
            .classes
            .iter()
            .map(|c| {
                (
                    c.id,
                    ClassShape {
                        size_mean: c.size_mean,
                        x_range: c.x_range,
                        y_range: c.y_range,
                    },
                )
            })
            .collect();
        Self {
            config,
            labeled_boxes: BTreeMap::new(),
            shapes,
        }
    }

    /// Competence of `class`; zero for classes outside the effective catalog.
    pub fn competence(&self, class: ClassId, catalog: &ClassCatalog) -> f64 {
        if !catalog.is_effective(class) {
            return 0.0;
        }
        let n = self.labeled_boxes.get(&class).copied().unwrap_or(0) as f64;
        n / (n + self.config.half_saturation)
    }

    /// Adds newly labeled boxes of effective classes to the counts.
    pub fn retrain<'a>(&self, labeled: impl IntoIterator<Item = &'a GroundTruthBox>, catalog: &ClassCatalog) -> Self {
        let mut next = self.clone();
        for b in labeled {
            if catalog.is_effective(b.label) {
                *next.labeled_boxes.entry(b.label).or_insert(0) += 1;
            }
        }
        next
    }

    fn shape(&self, class: ClassId) -> ClassShape {
        self.shapes.get(&class).cloned().unwrap_or(ClassShape {
            size_mean: [1.0; 3],
            x_range: [0.0, 70.0],
            y_range: [-40.0, 40.0],
        })
    }

    /// Runs the detector on one frame. Every object (and the false-positive
    /// block) draws from its own child stream of `rng`, so changing the
    /// outcome for one object never shifts the randomness of another.
    pub fn predict(
        &self,
        frame_id: &str,
        truth: &[GroundTruthBox],
        catalog: &ClassCatalog,
        rng: &mut ChaCha8Rng,
    ) -> FrameRecord {
        let trained = catalog.effective_ids();
        let c_eff = trained.len();
        let mut boxes = Vec::new();
        for gt in truth {
            let mut obj = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let u_emit: f64 = obj.random();
            let u_label: f64 = obj.random();
            let alt_label = trained[obj.random_range(0..c_eff)];
            let z_conf: f64 = obj.sample(rand_distr::StandardNormal);
            let z_geom: [f64; 6] = std::array::from_fn(|_| obj.sample(rand_distr::StandardNormal));
            let spurious_conf: f64 = Beta::new(2.0, 5.0).expect("valid").sample(&mut obj) * 0.5;

            if catalog.is_effective(gt.label) {
                let kappa = self.competence(gt.label, catalog);
                if u_emit >= 0.5 + 0.5 * kappa {
                    continue;
                }
                let label = if u_label < kappa.max(1.0 / c_eff as f64) { gt.label } else { alt_label };
                let confidence = (0.2 + 0.7 * kappa + self.config.confidence_noise * z_conf).clamp(0.01, 0.99);
                boxes.push(self.noisy_box(gt, label, confidence, 1.0 - kappa, &z_geom, &trained));
            } else if u_emit < self.config.spurious_rate {
                let confidence = spurious_conf.max(1e-3);
                boxes.push(self.noisy_box(gt, alt_label, confidence, 1.0, &z_geom, &trained));
            }
        }

        let mut fp = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let n_fp = if self.config.false_positive_rate > 0.0 {
            Poisson::new(self.config.false_positive_rate).expect("validated").sample(&mut fp) as usize
        } else {
            0
        };
        let fp_conf = Beta::<f64>::new(2.0, 8.0).expect("valid");
        for _ in 0..n_fp {
            let label = trained[fp.random_range(0..c_eff)];
            let shape = self.shape(label);
            let x = fp.random_range(shape.x_range[0]..=shape.x_range[1]);
            let y = fp.random_range(shape.y_range[0]..=shape.y_range[1]);
            let heading = fp.random_range(-PI..PI);
            let confidence = fp_conf.sample(&mut fp).clamp(1e-3, 0.99);
            boxes.push(PredictedBox {
                label,
                confidence,
                center: [x, y, shape.size_mean[2] / 2.0],
                size: shape.size_mean,
                heading,
                scores: Some(score_vector(label, confidence, &trained)),
            });
        }
        FrameRecord::new(frame_id, boxes)
    }

    fn noisy_box(
        &self,
        gt: &GroundTruthBox,
        label: ClassId,
        confidence: f64,
        noise_scale: f64,
        z: &[f64; 6],
        trained: &[ClassId],
    ) -> PredictedBox {
        let sigma = self.config.localization_noise * noise_scale;
        PredictedBox {
            label,
            confidence,
            center: std::array::from_fn(|d| gt.center[d] + sigma * z[d]),
            size: std::array::from_fn(|d| (gt.size[d] + sigma * z[3 + d]).max(MIN_EXTENT)),
            heading: wrap_heading(gt.heading),
            scores: Some(score_vector(label, confidence, trained)),
        }
    }
}

/// One-hot on `label` smoothed toward uniform by `1 - confidence`; the other
/// entries are capped at `confidence` so the label stays the argmax.
pub fn score_vector(label: ClassId, confidence: f64, trained: &[ClassId]) -> Vec<f64> {
    let rest = ((1.0 - confidence) / trained.len() as f64).min(confidence);
    trained
        .iter()
        .map(|&id| if id == label { confidence } else { rest })
        .collect()
}
