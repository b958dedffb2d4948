//! Independent reimplementations used as oracles by the acceptance suite.
//!
//! Nothing here calls into the library's aggregation or evaluation code; the
//! library types are only used as plain data containers.

use std::collections::{BTreeMap, BTreeSet};

use plcompose::aggregation::AggregationStrategy;
use plcompose::{BBox, CategoryId, Detection, ImageId, ImageRef, ModelId, Registry};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub registry: Registry,
    pub corpus: Vec<ImageRef>,
    pub predictions: Vec<Vec<Detection>>,
}

const POOL: [&str; 4] = ["car", "bus", "dog", "cup"];

/// Random small instance on an integer grid, so exact IoU ties and duplicate
/// boxes are common. `disjoint` splits the category pool between two models.
pub fn random_instance(rng: &mut ChaCha8Rng, max_models: usize, max_images: u64, max_boxes: usize, disjoint: bool) -> Instance {
    let n_models = if disjoint { 2 } else { rng.random_range(1..=max_models) };
    let mut cat_sets: Vec<Vec<&str>> = Vec::new();
    if disjoint {
        let split = rng.random_range(1..POOL.len());
        cat_sets.push(POOL[..split].to_vec());
        cat_sets.push(POOL[split..].to_vec());
    } else {
        for _ in 0..n_models {
            let mut s: Vec<&str> = POOL.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
            if s.is_empty() {
                s.push(*POOL.choose(rng).unwrap());
            }
            cat_sets.push(s);
        }
    }
    let names: Vec<String> = (0..n_models).map(|i| format!("m{i}")).collect();
    let registry = Registry::from_names(names.iter().map(String::as_str).zip(cat_sets.clone())).unwrap();

    let n_images = rng.random_range(1..=max_images);
    let corpus: Vec<ImageRef> = (1..=n_images)
        .map(|i| ImageRef::new(ImageId(i * 10), 64, 64, None).unwrap())
        .collect();
    let mut predictions = vec![Vec::new(); n_models];
    let anchors = [(0.0, 0.0), (6.0, 4.0), (30.0, 30.0)];
    let sides = [6.0, 8.0, 10.0];
    let tied = [0.2, 0.5, 0.5, 0.8, 0.95];
    for im in &corpus {
        for _ in 0..rng.random_range(0..=max_boxes) {
            let m = rng.random_range(0..n_models);
            let cat = registry.categories().id_of(cat_sets[m].choose(rng).unwrap()).unwrap();
            let (ax, ay) = *anchors.choose(rng).unwrap();
            let bbox = BBox::new(
                ax + rng.random_range(0..=4) as f64,
                ay + rng.random_range(0..=4) as f64,
                *sides.choose(rng).unwrap(),
                *sides.choose(rng).unwrap(),
            )
            .unwrap();
            let score = if rng.random_bool(0.5) {
                *tied.choose(rng).unwrap()
            } else {
                rng.random_range(0.0005..1.0)
            };
            predictions[m].push(Detection::new(im.id, bbox, cat, score, ModelId::new(&names[m])).unwrap());
        }
    }
    // shuffle image order inside each model's list
    for p in &mut predictions {
        for i in (1..p.len()).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
    }
    Instance {
        registry,
        corpus,
        predictions,
    }
}

pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay, aw, ah) = (a.x(), a.y(), a.width(), a.height());
    let (bx, by, bw, bh) = (b.x(), b.y(), b.width(), b.height());
    let w = (ax + aw).min(bx + bw) - ax.max(bx);
    let h = (ay + ah).min(by + bh) - ay.max(by);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    (inter / (aw * ah + bw * bh - inter)).min(1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct NmsParams {
    pub gaussian: bool,
    pub sigma: f64,
    pub cut: f64,
    pub prune: f64,
}

pub fn nms(members: &[Detection], p: &NmsParams) -> Vec<Detection> {
    let mut left: Vec<(usize, f64)> = members.iter().map(|d| d.score).enumerate().collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (i, s) = left[k];
            let (bi, bs) = left[best];
            let better = s > bs
                || (s == bs && (members[i].model < members[bi].model || (members[i].model == members[bi].model && i < bi)));
            if better {
                best = k;
            }
        }
        let (bi, bs) = left.remove(best);
        let mut kept = Vec::new();
        for (i, s) in left {
            let o = overlap(&members[bi].bbox, &members[i].bbox);
            let f = if p.gaussian {
                (-(o * o) / p.sigma).exp()
            } else if o > p.cut {
                1.0 - o
            } else {
                1.0
            };
            let s = s * f;
            if s >= p.prune {
                kept.push((i, s));
            }
        }
        left = kept;
        let mut d = members[bi].clone();
        d.score = bs;
        out.push(d);
    }
    out
}

/// Connected components by label propagation; components ordered by their
/// lowest index, members ascending.
pub fn components(dets: &[Detection], thr: f64) -> Vec<Vec<usize>> {
    let n = dets.len();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j
                    && dets[i].category == dets[j].category
                    && overlap(&dets[i].bbox, &dets[j].bbox) >= thr
                    && label[j] < label[i]
                {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in label.into_iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    by_label.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub input: usize,
    pub groups: usize,
    pub kept_groups: usize,
    pub deleted_groups: usize,
    pub kept_detections: usize,
    pub post_nms: usize,
}

pub fn keeps(strategy: AggregationStrategy, k: usize, n: usize) -> bool {
    match strategy {
        AggregationStrategy::Unanimous => k == n,
        AggregationStrategy::Consensus => k as f64 >= n as f64 / 2.0,
        AggregationStrategy::Affirmative => true,
    }
}

pub fn brute_aggregate(
    inst: &Instance,
    strategy: AggregationStrategy,
    thr: f64,
    p: &NmsParams,
) -> (Vec<Detection>, Counts) {
    let mut out = Vec::new();
    let mut c = Counts::default();
    for im in &inst.corpus {
        let dets: Vec<Detection> = inst
            .predictions
            .iter()
            .flat_map(|m| m.iter().filter(|d| d.image == im.id).cloned())
            .collect();
        c.input += dets.len();
        for comp in components(&dets, thr) {
            c.groups += 1;
            let members: Vec<Detection> = comp.iter().map(|&i| dets[i].clone()).collect();
            let k = members.iter().map(|d| d.model.clone()).collect::<BTreeSet<_>>().len();
            let n = inst
                .registry
                .models()
                .iter()
                .filter(|m| m.categories.contains(&members[0].category))
                .count();
            if keeps(strategy, k, n) {
                c.kept_groups += 1;
                c.kept_detections += members.len();
                let s = nms(&members, p);
                c.post_nms += s.len();
                out.extend(s);
            } else {
                c.deleted_groups += 1;
            }
        }
    }
    (out, c)
}

fn ap_101(mut ranked: Vec<(f64, bool)>, n_truth: usize) -> f64 {
    // stable: equal scores keep image order
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    for (_, hit) in ranked {
        if hit {
            tp += 1.0
        } else {
            fp += 1.0
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / n_truth as f64);
    }
    for i in (1..prec.len()).rev() {
        if prec[i] > prec[i - 1] {
            prec[i - 1] = prec[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 * 0.01;
        if let Some(i) = rec.iter().position(|&x| x >= r) {
            sum += prec[i];
        }
    }
    sum / 101.0
}

/// COCO-style mAP@[.50:.95], written from the published evaluation recipe.
pub fn reference_map(preds: &[Detection], truths: &[Detection]) -> f64 {
    let cats: BTreeSet<CategoryId> = truths.iter().map(|t| t.category).collect();
    let images: BTreeSet<ImageId> = truths.iter().chain(preds).map(|d| d.image).collect();
    let mut per_thr = Vec::new();
    for step in 0..10 {
        let thr = 0.5 + 0.05 * step as f64;
        let mut aps = Vec::new();
        for &c in &cats {
            let mut ranked = Vec::new();
            let mut n_truth = 0;
            for &im in &images {
                let gt: Vec<&Detection> = truths.iter().filter(|t| t.image == im && t.category == c).collect();
                n_truth += gt.len();
                let mut dt: Vec<&Detection> = preds.iter().filter(|d| d.image == im && d.category == c).collect();
                dt.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let mut taken = vec![false; gt.len()];
                for d in dt {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, g) in gt.iter().enumerate() {
                        if taken[j] {
                            continue;
                        }
                        let o = overlap(&d.bbox, &g.bbox);
                        if o >= thr && best.is_none_or(|(_, b)| o > b) {
                            best = Some((j, o));
                        }
                    }
                    if let Some((j, _)) = best {
                        taken[j] = true;
                    }
                    ranked.push((d.score, best.is_some()));
                }
            }
            aps.push(ap_101(ranked, n_truth));
        }
        per_thr.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    per_thr.iter().sum::<f64>() / 10.0
}
