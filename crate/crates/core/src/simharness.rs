//! Synthetic ground truth and noisy synthetic detectors.
//!
//! Everything is driven by explicit seeds through ChaCha8, so a scenario is
//! reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::PseudoLabelSet;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::io::{self, ModelRegistryFile, RegistryEntry, GROUND_TRUTH_MODEL};
use crate::types::{CategoryId, CategoryTable, Detection, ImageId, ImageRef, ModelId};

pub const IMAGE_WIDTH: u32 = 640;
pub const IMAGE_HEIGHT: u32 = 480;

/// Seed of the reference three-detector scenario.
pub const DESK_SCENARIO_SEED: u64 = 20_211_018;

// object sides as a fraction of the image side
const MIN_SIDE: f64 = 0.08;
const MAX_SIDE: f64 = 0.35;

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let (iw, ih) = (width as f64, height as f64);
    let w = rng.random_range(MIN_SIDE..MAX_SIDE) * iw;
    let h = rng.random_range(MIN_SIDE..MAX_SIDE) * ih;
    let x = rng.random_range(0.0..(iw - w));
    let y = rng.random_range(0.0..(ih - h));
    BBox::new(x, y, w, h).expect("sides are positive")
}

/// Ground truth: `n_images` images of `objects_per_image` boxes each, with
/// categories drawn uniformly from `categories`.
pub fn generate_scenes(
    seed: u64,
    n_images: usize,
    categories: &CategoryTable,
    objects_per_image: usize,
) -> Result<PseudoLabelSet> {
    if n_images == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    if categories.is_empty() && objects_per_image > 0 {
        return Err(Error::Config("cannot place objects without categories".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = ModelId::new(GROUND_TRUTH_MODEL);
    let mut images = Vec::with_capacity(n_images);
    let mut detections = Vec::with_capacity(n_images * objects_per_image);
    for i in 1..=n_images as u64 {
        let image = ImageRef::new(ImageId(i), IMAGE_WIDTH, IMAGE_HEIGHT, Some(format!("scene_{i:06}.png")))?;
        for _ in 0..objects_per_image {
            let category = CategoryId(rng.random_range(1..=categories.len() as u32));
            detections.push(Detection {
                image: image.id,
                bbox: random_box(&mut rng, image.width, image.height),
                category,
                score: 1.0,
                model: truth.clone(),
            });
        }
        images.push(image);
    }
    Ok(PseudoLabelSet {
        images,
        detections,
        categories: categories.clone(),
    })
}

/// Noise applied by a synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Std-dev of box perturbation, as a fraction of the box size.
    pub jitter: f64,
    /// Probability that a true object is not reported.
    pub miss_rate: f64,
    /// Expected spurious boxes per image (Bernoulli per image).
    pub fp_rate: f64,
    /// Uniform score range for true detections.
    pub tp_score: (f64, f64),
    /// Uniform score range for spurious detections.
    pub fp_score: (f64, f64),
    pub seed: u64,
}

impl NoiseModel {
    pub const DEFAULT_TP_SCORE: (f64, f64) = (0.6, 1.0);
    pub const DEFAULT_FP_SCORE: (f64, f64) = (0.1, 0.6);

    pub fn new(jitter: f64, miss_rate: f64, fp_rate: f64, seed: u64) -> Result<Self> {
        let n = NoiseModel {
            jitter,
            miss_rate,
            fp_rate,
            tp_score: Self::DEFAULT_TP_SCORE,
            fp_score: Self::DEFAULT_FP_SCORE,
            seed,
        };
        n.validate()?;
        Ok(n)
    }

    /// Perfect detector reporting every supported object at score 1.
    pub fn noiseless(seed: u64) -> Self {
        NoiseModel {
            jitter: 0.0,
            miss_rate: 0.0,
            fp_rate: 0.0,
            tp_score: (1.0, 1.0),
            fp_score: Self::DEFAULT_FP_SCORE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter {} must be >= 0", self.jitter)));
        }
        if !unit(self.miss_rate) || !unit(self.fp_rate) {
            return Err(Error::Config("miss and false-positive rates must lie in [0, 1]".into()));
        }
        for (lo, hi) in [self.tp_score, self.fp_score] {
            if !(unit(lo) && unit(hi) && lo <= hi) {
                return Err(Error::Config(format!("bad score range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn draw_score(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64, image: &ImageRef) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let mut n = || -> f64 { rng.sample(StandardNormal) };
    let w = (b.width() * (1.0 + jitter * n())).max(1.0);
    let h = (b.height() * (1.0 + jitter * n())).max(1.0);
    let (iw, ih) = (image.width as f64, image.height as f64);
    let x = (b.x() + jitter * b.width() * n()).clamp(0.0, (iw - w).max(0.0));
    let y = (b.y() + jitter * b.height() * n()).clamp(0.0, (ih - h).max(0.0));
    BBox::new(x, y, w.min(iw), h.min(ih)).expect("clamped box is valid")
}

/// Emits noisy copies of the ground-truth objects whose category `model`
/// supports, plus uncorrelated spurious boxes.
pub fn synth_detector(
    gt: &PseudoLabelSet,
    model: &ModelId,
    categories: &BTreeSet<CategoryId>,
    noise: &NoiseModel,
) -> Result<Vec<Detection>> {
    noise.validate()?;
    if categories.is_empty() {
        return Err(Error::Config(format!("detector `{model}` supports no categories")));
    }
    if let Some(c) = categories.iter().find(|c| !gt.categories.contains(**c)) {
        return Err(Error::Config(format!("detector `{model}` category {c} not in ground truth")));
    }
    let supported: Vec<CategoryId> = categories.iter().copied().collect();
    let mut by_image: BTreeMap<ImageId, Vec<&Detection>> = BTreeMap::new();
    for d in &gt.detections {
        by_image.entry(d.image).or_default().push(d);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = Vec::new();
    for image in &gt.images {
        for truth in by_image.get(&image.id).into_iter().flatten() {
            if !categories.contains(&truth.category) {
                continue;
            }
            if noise.miss_rate > 0.0 && rng.random_bool(noise.miss_rate) {
                continue;
            }
            out.push(Detection {
                image: image.id,
                bbox: jitter_box(&mut rng, &truth.bbox, noise.jitter, image),
                category: truth.category,
                score: draw_score(&mut rng, noise.tp_score),
                model: model.clone(),
            });
        }
        if noise.fp_rate > 0.0 && rng.random_bool(noise.fp_rate) {
            let category = supported[rng.random_range(0..supported.len())];
            out.push(Detection {
                image: image.id,
                bbox: random_box(&mut rng, image.width, image.height),
                category,
                score: draw_score(&mut rng, noise.fp_score),
                model: model.clone(),
            });
        }
    }
    Ok(out)
}

/// A synthetic detector as described in a simulation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub id: String,
    pub categories: Vec<String>,
    pub noise: NoiseModel,
}

/// A full synthetic scenario: scenes plus detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub seed: u64,
    pub images: usize,
    pub categories: Vec<String>,
    pub objects_per_image: usize,
    pub detectors: Vec<DetectorSpec>,
}

const DESK_CORE: [&str; 20] = [
    "person", "bicycle", "car", "motorcycle", "bus", "truck", "traffic light", "stop sign", "bench", "bird",
    "cat", "dog", "horse", "sheep", "cow", "bottle", "cup", "chair", "couch", "tv",
];

impl SimulationSpec {
    /// Three detectors over 500 images with partially overlapping category
    /// sets: a shared core of 20 categories, `boat` known to two detectors and
    /// `teddy bear` to one. Noise: jitter 0.05, miss rate 0.1, 0.5 spurious
    /// boxes per image, independent seeds.
    pub fn desk() -> Self {
        let mut categories: Vec<String> = DESK_CORE.iter().map(|s| s.to_string()).collect();
        categories.extend(["boat".to_string(), "teddy bear".to_string()]);
        let with = |extra: &str| {
            let mut c: Vec<String> = DESK_CORE.iter().map(|s| s.to_string()).collect();
            c.push(extra.to_string());
            c
        };
        let noise = |k: u64| NoiseModel::new(0.05, 0.1, 0.5, DESK_SCENARIO_SEED + k).expect("valid noise");
        SimulationSpec {
            seed: DESK_SCENARIO_SEED,
            images: 500,
            categories,
            objects_per_image: 4,
            detectors: vec![
                DetectorSpec { id: "det-a".into(), categories: with("boat"), noise: noise(1) },
                DetectorSpec { id: "det-b".into(), categories: with("boat"), noise: noise(2) },
                DetectorSpec { id: "det-c".into(), categories: with("teddy bear"), noise: noise(3) },
            ],
        }
    }
}

/// In-memory result of a simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub ground_truth: PseudoLabelSet,
    pub registry: ModelRegistryFile,
    /// Predictions per detector, in registry order.
    pub predictions: Vec<Vec<Detection>>,
}

pub fn simulate(spec: &SimulationSpec) -> Result<Simulation> {
    let table = CategoryTable::from_names(spec.categories.iter().cloned())?;
    let ground_truth = generate_scenes(spec.seed, spec.images, &table, spec.objects_per_image)?;
    let mut entries = Vec::new();
    let mut predictions = Vec::new();
    for d in &spec.detectors {
        let cats = d
            .categories
            .iter()
            .map(|n| {
                table
                    .id_of(n)
                    .ok_or_else(|| Error::Config(format!("detector `{}`: unknown category `{n}`", d.id)))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        predictions.push(synth_detector(&ground_truth, &ModelId::new(&d.id), &cats, &d.noise)?);
        entries.push(RegistryEntry {
            id: d.id.clone(),
            categories: d.categories.clone(),
            endpoint: None,
            predictions: Some(PathBuf::from(format!("{}.json", d.id))),
        });
    }
    Ok(Simulation {
        ground_truth,
        registry: ModelRegistryFile { models: entries },
        predictions,
    })
}

/// Paths written by [`write_simulation`].
#[derive(Debug, Clone)]
pub struct SimulationFiles {
    pub ground_truth: PathBuf,
    pub corpus: PathBuf,
    pub registry: PathBuf,
    pub predictions: Vec<PathBuf>,
}

/// Writes `ground_truth.json`, `corpus.json` (images only), `registry.json`
/// and one predictions file per detector into `dir`.
pub fn write_simulation(sim: &Simulation, dir: &Path) -> Result<SimulationFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gt = &sim.ground_truth;
    let ground_truth = dir.join("ground_truth.json");
    io::write_coco(gt, &ground_truth)?;
    let corpus = dir.join("corpus.json");
    io::write_coco(
        &PseudoLabelSet {
            images: gt.images.clone(),
            detections: Vec::new(),
            categories: gt.categories.clone(),
        },
        &corpus,
    )?;
    let mut predictions = Vec::new();
    for (entry, dets) in sim.registry.models.iter().zip(&sim.predictions) {
        let path = dir.join(entry.predictions.as_ref().expect("simulated entries carry a path"));
        io::write_coco(
            &PseudoLabelSet {
                images: gt.images.clone(),
                detections: dets.clone(),
                categories: gt.categories.clone(),
            },
            &path,
        )?;
        predictions.push(path);
    }
    let registry = dir.join("registry.json");
    io::write_registry(&sim.registry, &registry)?;
    Ok(SimulationFiles {
        ground_truth,
        corpus,
        registry,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::mean_ap;

    fn table(n: usize) -> CategoryTable {
        CategoryTable::from_names((0..n).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let a = generate_scenes(7, 20, &table(3), 5).unwrap();
        assert_eq!(a, generate_scenes(7, 20, &table(3), 5).unwrap());
        assert_ne!(a, generate_scenes(8, 20, &table(3), 5).unwrap());
        assert_eq!(a.detections.len(), 100);
        for d in &a.detections {
            assert!(d.bbox.x() >= 0.0 && d.bbox.right() <= IMAGE_WIDTH as f64);
            assert!(d.bbox.y() >= 0.0 && d.bbox.bottom() <= IMAGE_HEIGHT as f64);
        }
    }

    #[test]
    fn empty_scenes_and_zero_images() {
        let s = generate_scenes(1, 3, &table(2), 0).unwrap();
        assert_eq!(s.images.len(), 3);
        assert!(s.detections.is_empty());
        assert!(generate_scenes(1, 0, &table(2), 1).is_err());
    }

    #[test]
    fn histogram_covers_all_categories() {
        let s = generate_scenes(3, 100, &table(10), 4).unwrap();
        let seen: BTreeSet<_> = s.detections.iter().map(|d| d.category).collect();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn noiseless_detector_reproduces_truth_subset() {
        let gt = generate_scenes(5, 30, &table(4), 3).unwrap();
        let cats: BTreeSet<_> = [CategoryId(1), CategoryId(3)].into();
        let m = ModelId::new("m");
        let preds = synth_detector(&gt, &m, &cats, &NoiseModel::noiseless(9)).unwrap();
        let expected: Vec<_> = gt
            .detections
            .iter()
            .filter(|d| cats.contains(&d.category))
            .map(|d| Detection { model: m.clone(), ..d.clone() })
            .collect();
        assert_eq!(preds, expected);

        let all: BTreeSet<_> = gt.categories.ids().collect();
        let full = synth_detector(&gt, &m, &all, &NoiseModel::noiseless(9)).unwrap();
        assert_eq!(mean_ap(&full, &gt.detections).unwrap().map_5095, 1.0);
    }

    #[test]
    fn full_miss_rate_yields_nothing() {
        let gt = generate_scenes(5, 10, &table(2), 3).unwrap();
        let cats: BTreeSet<_> = gt.categories.ids().collect();
        let noise = NoiseModel::new(0.0, 1.0, 0.0, 1).unwrap();
        assert!(synth_detector(&gt, &ModelId::new("m"), &cats, &noise).unwrap().is_empty());
    }

    #[test]
    fn noisy_detector_is_reproducible_and_imperfect() {
        let gt = generate_scenes(11, 200, &table(5), 3).unwrap();
        let cats: BTreeSet<_> = gt.categories.ids().collect();
        let noise = NoiseModel::new(0.05, 0.1, 0.5, 42).unwrap();
        let m = ModelId::new("m");
        let a = synth_detector(&gt, &m, &cats, &noise).unwrap();
        assert_eq!(a, synth_detector(&gt, &m, &cats, &noise).unwrap());
        let map = mean_ap(&a, &gt.detections).unwrap().map_5095;
        assert!(map < 1.0 && map > 0.2, "mAP {map}");
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseModel::new(-0.1, 0.0, 0.0, 1).is_err());
        assert!(NoiseModel::new(0.0, 1.1, 0.0, 1).is_err());
        assert!(NoiseModel::new(0.0, 0.0, 2.0, 1).is_err());
        let gt = generate_scenes(5, 2, &table(2), 1).unwrap();
        let foreign: BTreeSet<_> = [CategoryId(9)].into();
        assert!(synth_detector(&gt, &ModelId::new("m"), &foreign, &NoiseModel::noiseless(1)).is_err());
    }

    #[test]
    fn desk_spec_has_partial_overlap() {
        let spec = SimulationSpec::desk();
        assert_eq!(spec.detectors.len(), 3);
        let sim = simulate(&SimulationSpec { images: 5, ..spec }).unwrap();
        let reg = sim.registry.to_registry().unwrap();
        let t = reg.categories();
        let n = |name| crate::aggregation::eligible_model_count(t.id_of(name).unwrap(), reg.models()).unwrap();
        assert_eq!((n("car"), n("boat"), n("teddy bear")), (3, 2, 1));
    }
}
