//! Consensus aggregation of detections from several models.
//!
//! The flow per image is: bucket all models' detections by image, cluster
//! same-category detections whose boxes overlap into object groups, keep or
//! delete each group by how many distinct models voted for it, and run
//! Soft-NMS inside every surviving group.

mod soft_nms;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::bbox::iou;
use crate::error::{Error, Result};
use crate::types::{CategoryId, CategoryTable, Detection, ImageId, ImageRef, ModelSpec, Registry};

pub use soft_nms::{soft_nms, SoftNmsConfig, SoftNmsMethod};

/// Default IoU above which two same-category detections are the same object.
pub const DEFAULT_GROUP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationStrategy {
    /// Keep a group only when every eligible model contributed.
    Unanimous,
    /// Keep a group when at least half of the eligible models contributed.
    Consensus,
    /// Keep every group.
    Affirmative,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 3] = [
        AggregationStrategy::Unanimous,
        AggregationStrategy::Consensus,
        AggregationStrategy::Affirmative,
    ];
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unanimous" => Ok(AggregationStrategy::Unanimous),
            "consensus" => Ok(AggregationStrategy::Consensus),
            "affirmative" => Ok(AggregationStrategy::Affirmative),
            other => Err(Error::Config(format!("unknown aggregation strategy `{other}`"))),
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationStrategy::Unanimous => "unanimous",
            AggregationStrategy::Consensus => "consensus",
            AggregationStrategy::Affirmative => "affirmative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Delete,
}

/// Detections from one or more models clustered as a single physical object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGroup {
    image: ImageId,
    category: CategoryId,
    members: Vec<Detection>,
    distinct_models: usize,
    eligible_models: usize,
}

impl ObjectGroup {
    pub fn image(&self) -> ImageId {
        self.image
    }

    pub fn category(&self) -> CategoryId {
        self.category
    }

    /// Members in their original input order.
    pub fn members(&self) -> &[Detection] {
        &self.members
    }

    /// Number of distinct models contributing a member (K).
    pub fn distinct_models(&self) -> usize {
        self.distinct_models
    }

    /// Number of registered models able to emit this category (N_eligible).
    pub fn eligible_models(&self) -> usize {
        self.eligible_models
    }
}

/// The aggregated pseudo-label dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub images: Vec<ImageRef>,
    pub detections: Vec<Detection>,
    pub categories: CategoryTable,
}

/// Per-stage counts of one aggregation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AggregationStats {
    pub input_detections: usize,
    pub groups: usize,
    pub kept_groups: usize,
    pub deleted_groups: usize,
    pub kept_detections: usize,
    pub post_nms_detections: usize,
}

impl std::ops::AddAssign for AggregationStats {
    fn add_assign(&mut self, o: Self) {
        self.input_detections += o.input_detections;
        self.groups += o.groups;
        self.kept_groups += o.kept_groups;
        self.deleted_groups += o.deleted_groups;
        self.kept_detections += o.kept_detections;
        self.post_nms_detections += o.post_nms_detections;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub strategy: AggregationStrategy,
    pub group_iou: f64,
    pub nms: SoftNmsConfig,
}

impl AggregationConfig {
    pub fn new(strategy: AggregationStrategy, group_iou: f64, nms: SoftNmsConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&group_iou) {
            return Err(Error::Config(format!("grouping IoU {group_iou} outside [0, 1]")));
        }
        Ok(AggregationConfig {
            strategy,
            group_iou,
            nms,
        })
    }
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            strategy: AggregationStrategy::Consensus,
            group_iou: DEFAULT_GROUP_IOU,
            nms: SoftNmsConfig::default(),
        }
    }
}

/// Buckets every model's detections by image, in corpus order.
///
/// Within a bucket detections keep model order, then per-model input order.
pub fn group_by_image(
    predictions: &[Vec<Detection>],
    corpus: &[ImageRef],
) -> Result<Vec<Vec<Detection>>> {
    let slot: HashMap<ImageId, usize> = corpus.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut buckets = vec![Vec::new(); corpus.len()];
    for per_model in predictions {
        for (index, det) in per_model.iter().enumerate() {
            let &i = slot.get(&det.image).ok_or_else(|| Error::UnknownImage {
                index,
                model: det.model.to_string(),
                image: det.image.0,
            })?;
            buckets[i].push(det.clone());
        }
    }
    Ok(buckets)
}

/// Number of registered models whose category set contains `category`.
pub fn eligible_model_count(category: CategoryId, models: &[ModelSpec]) -> Result<usize> {
    match models.iter().filter(|m| m.supports(category)).count() {
        0 => Err(Error::UnsupportedCategory(category.to_string())),
        n => Ok(n),
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller root wins so that roots are the first member of a component
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Clusters the detections of one image into object groups.
///
/// Two detections are linked when they share a category and their IoU is at
/// least `iou_threshold`; groups are the connected components of that graph.
/// Groups are ordered by their first member, members keep input order.
pub fn group_by_object(
    detections: &[Detection],
    iou_threshold: f64,
    registry: &Registry,
) -> Result<Vec<ObjectGroup>> {
    let n = detections.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&detections[i], &detections[j]);
            if a.category == b.category && iou(&a.bbox, &b.bbox) >= iou_threshold {
                sets.union(i, j);
            }
        }
    }

    let mut slot_of_root: HashMap<usize, usize> = HashMap::new();
    let mut members: Vec<Vec<Detection>> = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        let root = sets.find(i);
        let slot = *slot_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(det.clone());
    }

    members
        .into_iter()
        .map(|members| {
            let first = &members[0];
            let distinct_models = members.iter().map(|d| &d.model).collect::<BTreeSet<_>>().len();
            let eligible_models = eligible_model_count(first.category, registry.models())
                .map_err(|_| Error::UnsupportedCategory(registry.categories().label(first.category)))?;
            Ok(ObjectGroup {
                image: first.image,
                category: first.category,
                distinct_models,
                eligible_models,
                members,
            })
        })
        .collect()
}

/// Keep/delete decision for one group.
pub fn apply_strategy(group: &ObjectGroup, strategy: AggregationStrategy) -> Verdict {
    let k = group.distinct_models;
    let n = group.eligible_models;
    let keep = match strategy {
        AggregationStrategy::Unanimous => k >= n,
        // K >= N/2, evaluated without rounding
        AggregationStrategy::Consensus => 2 * k >= n,
        AggregationStrategy::Affirmative => true,
    };
    if keep {
        Verdict::Keep
    } else {
        Verdict::Delete
    }
}

fn aggregate_image(
    detections: &[Detection],
    registry: &Registry,
    cfg: &AggregationConfig,
) -> Result<(Vec<Detection>, AggregationStats)> {
    let groups = group_by_object(detections, cfg.group_iou, registry)?;
    let mut stats = AggregationStats {
        input_detections: detections.len(),
        groups: groups.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for group in &groups {
        match apply_strategy(group, cfg.strategy) {
            Verdict::Delete => stats.deleted_groups += 1,
            Verdict::Keep => {
                stats.kept_groups += 1;
                stats.kept_detections += group.members.len();
                let survivors = soft_nms(group, &cfg.nms);
                stats.post_nms_detections += survivors.len();
                out.extend(survivors);
            }
        }
    }
    Ok((out, stats))
}

/// Full aggregation over a corpus. See [`aggregate_with_stats`].
pub fn aggregate(
    predictions: &[Vec<Detection>],
    registry: &Registry,
    corpus: &[ImageRef],
    cfg: &AggregationConfig,
) -> Result<PseudoLabelSet> {
    aggregate_with_stats(predictions, registry, corpus, cfg).map(|(set, _)| set)
}

/// Groups by image, clusters by object, votes, and applies Soft-NMS.
///
/// Images are processed in parallel; output is assembled in corpus order, so
/// the result does not depend on scheduling.
pub fn aggregate_with_stats(
    predictions: &[Vec<Detection>],
    registry: &Registry,
    corpus: &[ImageRef],
    cfg: &AggregationConfig,
) -> Result<(PseudoLabelSet, AggregationStats)> {
    for det in predictions.iter().flatten() {
        registry.validate(det)?;
    }
    let buckets = group_by_image(predictions, corpus)?;
    let per_image = buckets
        .par_iter()
        .map(|dets| aggregate_image(dets, registry, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut stats = AggregationStats::default();
    let mut detections = Vec::new();
    for (dets, s) in per_image {
        stats += s;
        detections.extend(dets);
    }
    let set = PseudoLabelSet {
        images: corpus.to_vec(),
        detections,
        categories: registry.categories().clone(),
    };
    Ok((set, stats))
}
