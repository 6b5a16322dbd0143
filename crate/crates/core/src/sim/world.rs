use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, ClassId, FrameId, GroundTruthBox, PoolState};
use crate::rng::stream;

/// Minimum box extent produced by any sampler, in meters.
pub const MIN_EXTENT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: ClassId,
    pub name: String,
    /// Present in the pre-training labels.
    pub known: bool,
    pub frequency: f64,
    /// Frequency weight inside site frames; defaults to `frequency`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_frequency: Option<f64>,
    pub size_mean: [f64; 3],
    pub size_std: [f64; 3],
    #[serde(default = "default_x_range")]
    pub x_range: [f64; 2],
    #[serde(default = "default_y_range")]
    pub y_range: [f64; 2],
}

fn default_x_range() -> [f64; 2] {
    [0.0, 70.0]
}

fn default_y_range() -> [f64; 2] {
    [-40.0, 40.0]
}

impl ClassSpec {
    fn new(id: ClassId, name: &str, known: bool, frequency: f64, size_mean: [f64; 3], size_std: [f64; 3]) -> Self {
        Self {
            id,
            name: name.into(),
            known,
            frequency,
            site_frequency: None,
            size_mean,
            size_std,
            x_range: default_x_range(),
            y_range: default_y_range(),
        }
    }

    fn at_sites(self, site_frequency: f64) -> Self {
        Self { site_frequency: Some(site_frequency), ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_frames: usize,
    pub n_test: usize,
    pub objects_per_frame: f64,
    /// Fraction of frames drawn with the `site_frequency` class weights.
    pub site_fraction: f64,
    pub classes: Vec<ClassSpec>,
    /// Standard deviation of the Gaussian noise added to class-count embeddings.
    pub embedding_noise: f64,
    /// Scale applied to the count dimensions of classes absent from pre-training.
    pub unknown_embedding_weight: f64,
    /// Pure-noise dimensions appended after the per-class counts.
    pub embedding_extra_dims: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_frames: 2000,
            n_test: 200,
            objects_per_frame: 6.0,
            site_fraction: 0.2,
            classes: vec![
                ClassSpec::new(1, "car", true, 6.0, [3.9, 1.6, 1.56], [0.4, 0.1, 0.1]).at_sites(1.0),
                ClassSpec::new(2, "pedestrian", true, 1.5, [0.8, 0.6, 1.73], [0.15, 0.1, 0.1]).at_sites(1.0),
                ClassSpec::new(3, "cyclist", true, 1.0, [1.76, 0.6, 1.73], [0.2, 0.1, 0.1]).at_sites(1.0),
                ClassSpec::new(4, "barrier", false, 0.2, [0.5, 2.5, 1.0], [0.1, 0.3, 0.1]).at_sites(1.5),
                ClassSpec::new(5, "traffic_cone", false, 0.2, [0.4, 0.4, 1.0], [0.05, 0.05, 0.1]).at_sites(1.5),
            ],
            embedding_noise: 0.3,
            unknown_embedding_weight: 0.1,
            embedding_extra_dims: 0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("world.classes must not be empty".into()));
        }
        if !self.classes.iter().any(|c| c.known) {
            return Err(Error::Config("world.classes needs at least one known class".into()));
        }
        for c in &self.classes {
            if !(c.frequency > 0.0 && c.frequency.is_finite()) {
                return Err(Error::Config(format!("world.classes[{}].frequency must be positive", c.id)));
            }
            if c.site_frequency.is_some_and(|f| !(f >= 0.0 && f.is_finite())) {
                return Err(Error::Config(format!("world.classes[{}].site_frequency must be non-negative", c.id)));
            }
            if c.size_std.iter().any(|s| !(*s > 0.0)) || c.size_mean.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config(format!("world.classes[{}] size priors must be positive", c.id)));
            }
            if c.x_range[0] > c.x_range[1] || c.y_range[0] > c.y_range[1] {
                return Err(Error::Config(format!("world.classes[{}] position range is inverted", c.id)));
            }
        }
        if !(self.objects_per_frame >= 0.0 && self.objects_per_frame.is_finite()) {
            return Err(Error::Config("world.objects_per_frame must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.site_fraction) {
            return Err(Error::Config("world.site_fraction must lie in [0, 1]".into()));
        }
        if !(self.embedding_noise >= 0.0) {
            return Err(Error::Config("world.embedding_noise must be non-negative".into()));
        }
        if !(self.unknown_embedding_weight >= 0.0 && self.unknown_embedding_weight.is_finite()) {
            return Err(Error::Config("world.unknown_embedding_weight must be non-negative".into()));
        }
        self.catalog().map(|_| ())
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        let known = self.classes.iter().filter(|c| c.known).map(|c| c.id).collect();
        let unknown = self.classes.iter().filter(|c| !c.known).map(|c| c.id).collect();
        ClassCatalog::new(known, unknown)
    }

    pub fn embedding_dim(&self) -> usize {
        self.classes.len() + self.embedding_extra_dims
    }
}

/// A generated pool plus held-out test frames.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub catalog: ClassCatalog,
    pub pool: PoolState,
    pub test: BTreeMap<FrameId, Vec<GroundTruthBox>>,
    pub embeddings: BTreeMap<FrameId, Vec<f64>>,
}

pub fn pool_frame_id(i: usize) -> FrameId {
    format!("pool-{i:06}")
}

pub fn test_frame_id(i: usize) -> FrameId {
    format!("test-{i:06}")
}

/// Class mixtures for ordinary frames and for site frames.
struct ClassMix {
    ordinary: WeightedIndex<f64>,
    site: Option<WeightedIndex<f64>>,
}

impl ClassMix {
    fn new(config: &WorldConfig) -> Result<Self> {
        let err = |e: rand::distr::weighted::Error| Error::Config(format!("world.classes frequencies: {e}"));
        let ordinary = WeightedIndex::new(config.classes.iter().map(|c| c.frequency)).map_err(err)?;
        let site = if config.site_fraction > 0.0 {
            Some(
                WeightedIndex::new(config.classes.iter().map(|c| c.site_frequency.unwrap_or(c.frequency)))
                    .map_err(err)?,
            )
        } else {
            None
        };
        Ok(Self { ordinary, site })
    }
}

fn sample_frame<R: Rng>(rng: &mut R, config: &WorldConfig, mix: &ClassMix) -> Vec<GroundTruthBox> {
    let is_site = rng.random::<f64>() < config.site_fraction;
    let classes = match (&mix.site, is_site) {
        (Some(site), true) => site,
        _ => &mix.ordinary,
    };
    let n = if config.objects_per_frame > 0.0 {
        Poisson::new(config.objects_per_frame).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    (0..n)
        .map(|_| {
            let spec = &config.classes[classes.sample(rng)];
            let size: [f64; 3] = std::array::from_fn(|d| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (spec.size_mean[d] + spec.size_std[d] * z).max(MIN_EXTENT)
            });
            let x = rng.random_range(spec.x_range[0]..=spec.x_range[1]);
            let y = rng.random_range(spec.y_range[0]..=spec.y_range[1]);
            let heading = rng.random_range(-PI..PI);
            GroundTruthBox {
                label: spec.id,
                center: [x, y, size[2] / 2.0],
                size,
                heading,
            }
        })
        .collect()
}

/// Per-class object counts (unknown classes scaled) plus Gaussian noise, then
/// noise-only dimensions.
fn embed<R: Rng>(rng: &mut R, config: &WorldConfig, boxes: &[GroundTruthBox]) -> Vec<f64> {
    let noise = Normal::new(0.0, config.embedding_noise).expect("validated");
    let mut e: Vec<f64> = config
        .classes
        .iter()
        .map(|c| {
            let w = if c.known { 1.0 } else { config.unknown_embedding_weight };
            w * boxes.iter().filter(|b| b.label == c.id).count() as f64
        })
        .collect();
    e.extend(std::iter::repeat_n(0.0, config.embedding_extra_dims));
    e.iter_mut().for_each(|x| *x += noise.sample(rng));
    e
}

/// Samples the pool and test frames. Each frame draws from its own stream
/// keyed by `(seed, frame id)`.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let weights = ClassMix::new(config)?;

    let mut truth = BTreeMap::new();
    let mut embeddings = BTreeMap::new();
    for i in 0..config.n_frames {
        let id = pool_frame_id(i);
        let mut rng = stream(config.seed, &["world", &id]);
        let boxes = sample_frame(&mut rng, config, &weights);
        embeddings.insert(id.clone(), embed(&mut rng, config, &boxes));
        truth.insert(id, boxes);
    }
    let test = (0..config.n_test)
        .map(|i| {
            let id = test_frame_id(i);
            let mut rng = stream(config.seed, &["world", &id]);
            let boxes = sample_frame(&mut rng, config, &weights);
            (id, boxes)
        })
        .collect();
    Ok(World {
        config: config.clone(),
        catalog: config.catalog()?,
        pool: PoolState::new(truth),
        test,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_frames: 50,
            n_test: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let json = |w: &World| serde_json::to_string(&(&w.pool.truth, &w.test, &w.embeddings)).unwrap();
        assert_eq!(json(&a), json(&b));
        let c = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.pool.truth, c.pool.truth);
    }

    #[test]
    fn frequency_ratio_matches_weights() {
        let config = WorldConfig {
            n_frames: 2500,
            n_test: 0,
            objects_per_frame: 6.0,
            site_fraction: 0.0,
            classes: vec![
                ClassSpec::new(1, "car", true, 9.0, [3.9, 1.6, 1.5], [0.1; 3]),
                ClassSpec::new(2, "barrier", false, 1.0, [0.5, 2.5, 1.0], [0.1; 3]),
            ],
            ..WorldConfig::default()
        };
        let world = generate_world(&config).unwrap();
        let all: Vec<&GroundTruthBox> = world.pool.truth.values().flatten().collect();
        let n = all.len() as f64;
        assert!(n >= 1e4, "{n}");
        let cars = all.iter().filter(|b| b.label == 1).count() as f64;
        // binomial with p = 0.9: within 3 sigma
        let sigma = (n * 0.9 * 0.1).sqrt();
        assert!((cars - 0.9 * n).abs() <= 3.0 * sigma, "cars {cars} of {n}");
    }

    #[test]
    fn zero_mean_gives_empty_frames() {
        let world = generate_world(&WorldConfig { objects_per_frame: 0.0, ..small() }).unwrap();
        assert!(world.pool.truth.values().all(Vec::is_empty));
        assert!(world.test.values().all(Vec::is_empty));
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(generate_world(&WorldConfig { classes: vec![], ..small() }).is_err());
        let mut bad = small();
        bad.classes[0].frequency = 0.0;
        assert!(generate_world(&bad).is_err());
        let mut bad = small();
        bad.classes[1].size_std[0] = 0.0;
        assert!(generate_world(&bad).is_err());
    }

    #[test]
    fn boxes_and_embeddings_are_well_formed() {
        let world = generate_world(&small()).unwrap();
        for b in world.pool.truth.values().flatten() {
            assert!(b.validate().is_ok());
        }
        assert!(world.embeddings.values().all(|e| e.len() == small().embedding_dim()));
        assert_eq!(world.pool.unlabeled.len(), 50);
    }
}
