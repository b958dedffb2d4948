//! Majority voting for image classification pseudo-labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filtering::{entropy, ProbVector};
use crate::types::{CategoryId, ImageId, ImageRef, ModelId};

/// A model's class distribution, with the category each entry refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    labels: Vec<CategoryId>,
    probs: ProbVector,
}

impl ClassProbs {
    pub fn new(labels: Vec<CategoryId>, probs: ProbVector) -> Result<Self> {
        if labels.len() != probs.len() {
            return Err(Error::InvalidProbs(format!(
                "{} probabilities for {} categories",
                probs.len(),
                labels.len()
            )));
        }
        Ok(ClassProbs { labels, probs })
    }

    pub fn labels(&self) -> &[CategoryId] {
        &self.labels
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }

    /// Probability mass on `category`; 0 for categories outside the model's set.
    pub fn prob_of(&self, category: CategoryId) -> f64 {
        self.labels
            .iter()
            .position(|&c| c == category)
            .map_or(0.0, |i| self.probs.as_slice()[i])
    }
}

/// One model's top-1 label for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLabel {
    pub image: ImageId,
    pub category: CategoryId,
    pub model: ModelId,
    pub probs: Option<ClassProbs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub model: ModelId,
    pub category: CategoryId,
    pub probs: Option<ClassProbs>,
}

/// All votes cast for one image. Nonempty, at most one vote per model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVote {
    image: ImageId,
    votes: Vec<Vote>,
}

impl ClassVote {
    pub fn new(image: ImageId, votes: Vec<Vote>) -> Result<Self> {
        if votes.is_empty() {
            return Err(Error::Config(format!("image {image} has no votes")));
        }
        let mut seen = BTreeSet::new();
        if let Some(v) = votes.iter().find(|v| !seen.insert(&v.model)) {
            return Err(Error::Config(format!(
                "model `{}` voted twice on image {image}",
                v.model
            )));
        }
        Ok(ClassVote { image, votes })
    }

    pub fn image(&self) -> ImageId {
        self.image
    }

    pub fn votes(&self) -> &[Vote] {
        &self.votes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Emit no label when several categories share the top count.
    #[default]
    Abstain,
    /// Among tied categories pick the one with the highest mean probability
    /// across the voters that report distributions; abstain if that ties too.
    MeanProb,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abstain" => Ok(TieBreak::Abstain),
            "mean-prob" => Ok(TieBreak::MeanProb),
            other => Err(Error::Config(format!("unknown tie rule `{other}`"))),
        }
    }
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieBreak::Abstain => "abstain",
            TieBreak::MeanProb => "mean-prob",
        })
    }
}

/// Category with strictly the most votes, or `None` (abstain).
pub fn majority_vote(vote: &ClassVote, tie: TieBreak) -> Option<CategoryId> {
    let mut counts: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for v in &vote.votes {
        *counts.entry(v.category).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let leaders: Vec<CategoryId> = counts
        .iter()
        .filter(|&(_, &n)| n == top)
        .map(|(&c, _)| c)
        .collect();
    if let [winner] = leaders[..] {
        return Some(winner);
    }
    match tie {
        TieBreak::Abstain => None,
        TieBreak::MeanProb => break_by_mean_prob(vote, &leaders),
    }
}

fn break_by_mean_prob(vote: &ClassVote, leaders: &[CategoryId]) -> Option<CategoryId> {
    let dists: Vec<&ClassProbs> = vote.votes.iter().filter_map(|v| v.probs.as_ref()).collect();
    if dists.is_empty() {
        return None;
    }
    let mean = |c: CategoryId| dists.iter().map(|p| p.prob_of(c)).sum::<f64>() / dists.len() as f64;
    let scored: Vec<(CategoryId, f64)> = leaders.iter().map(|&c| (c, mean(c))).collect();
    let best = scored.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    let mut at_best = scored.iter().filter(|&&(_, m)| m == best);
    match (at_best.next(), at_best.next()) {
        (Some(&(c, _)), None) => Some(c),
        _ => None,
    }
}

/// Keeps labels whose distribution has entropy at most `tau`. Labels that
/// carry no distribution cannot be scored and are kept.
pub fn filter_labels_by_entropy(labels: Vec<ClassLabel>, tau: f64) -> Vec<ClassLabel> {
    labels
        .into_iter()
        .filter(|l| l.probs.as_ref().is_none_or(|p| entropy(p.probs()) <= tau))
        .collect()
}

/// Outcome of voting over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    /// One entry per corpus image, in corpus order; `None` means abstained.
    pub decisions: Vec<(ImageId, Option<CategoryId>)>,
}

impl ClassificationResult {
    /// The pseudo-labels, abstentions excluded.
    pub fn labels(&self) -> impl Iterator<Item = (ImageId, CategoryId)> + '_ {
        self.decisions.iter().filter_map(|&(i, c)| c.map(|c| (i, c)))
    }

    pub fn abstained(&self) -> usize {
        self.decisions.iter().filter(|(_, c)| c.is_none()).count()
    }
}

/// Votes per image over a corpus. Images nobody labeled count as abstained.
pub fn aggregate_votes(
    predictions: &[Vec<ClassLabel>],
    corpus: &[ImageRef],
    tie: TieBreak,
) -> Result<ClassificationResult> {
    let slot: HashMap<ImageId, usize> = corpus.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut per_image: Vec<Vec<Vote>> = vec![Vec::new(); corpus.len()];
    for per_model in predictions {
        for (index, label) in per_model.iter().enumerate() {
            let &i = slot.get(&label.image).ok_or_else(|| Error::UnknownImage {
                index,
                model: label.model.to_string(),
                image: label.image.0,
            })?;
            per_image[i].push(Vote {
                model: label.model.clone(),
                category: label.category,
                probs: label.probs.clone(),
            });
        }
    }
    let decisions = corpus
        .iter()
        .zip(per_image)
        .map(|(im, votes)| {
            if votes.is_empty() {
                return Ok((im.id, None));
            }
            let vote = ClassVote::new(im.id, votes)?;
            Ok((im.id, majority_vote(&vote, tie)))
        })
        .collect::<Result<_>>()?;
    Ok(ClassificationResult { decisions })
}
