//! Utterance mining: select records by predicted label or by cluster
//! membership, draw random baselines, mix in anchor-group data, and
//! size-match competing manifests.
//!
//! When more records match than requested, the most confident ones win:
//! highest predicted probability for label mining, smallest distance to the
//! centroid for cluster mining. Fewer matches than requested is not an
//! error; the result carries a shortfall flag.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::cluster::{assign, CentroidSet};
use crate::corpus::LabeledCorpus;
use crate::encoder::{embed_corpus, forward, record_input, TrainedModel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// What to mine for: records the classifier places in a group, or records
/// assigned to a centroid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MineSource {
    SupervisedLabel(String),
    Cluster(usize),
}

impl fmt::Display for MineSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MineSource::SupervisedLabel(g) => write!(f, "label:{g}"),
            MineSource::Cluster(i) => write!(f, "cluster:{i}"),
        }
    }
}

impl FromStr for MineSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(g) = s.strip_prefix("label:") {
            if g.is_empty() {
                return Err(Error::validation("label source needs a group name"));
            }
            return Ok(MineSource::SupervisedLabel(g.to_string()));
        }
        if let Some(i) = s.strip_prefix("cluster:") {
            let idx = i.parse::<usize>().map_err(|_| {
                Error::validation(format!("cluster source needs an index, got {i:?}"))
            })?;
            return Ok(MineSource::Cluster(idx));
        }
        Err(Error::validation(format!(
            "unknown mine source {s:?}, expected \"label:<group>\" or \"cluster:<index>\""
        )))
    }
}

/// A mining job: what to look for and how many records to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningPlan {
    pub source: MineSource,
    pub target_size: usize,
    pub seed: u64,
}

/// Frozen model artifacts that drive the selection. Cluster mining needs
/// the encoder too: records are embedded with it before assignment.
pub enum MineArtifacts<'a> {
    Classifier(&'a TrainedModel),
    Clustered {
        model: &'a TrainedModel,
        centroids: &'a CentroidSet,
    },
}

/// Mining output: the selected records plus bookkeeping about supply.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub corpus: LabeledCorpus,
    /// Records that matched the source before any truncation.
    pub matched: usize,
    /// True when fewer records matched than the plan asked for.
    pub shortfall: bool,
}

/// Selects records from `corpus` per the plan. Matching records beyond
/// `target_size` are dropped least-confident-first; the output preserves
/// corpus order and is always a subset of the input.
pub fn mine(
    corpus: &LabeledCorpus,
    plan: &MiningPlan,
    artifacts: &MineArtifacts<'_>,
) -> Result<MiningResult> {
    if plan.target_size == 0 {
        return Err(Error::validation("target_size must be at least 1"));
    }

    // candidate indices with a confidence key; lower key = keep first
    let mut candidates: Vec<(usize, f64)> = match (&plan.source, artifacts) {
        (MineSource::SupervisedLabel(group), MineArtifacts::Classifier(model)) => {
            let class = model
                .groups
                .iter()
                .position(|g| g == group)
                .ok_or_else(|| {
                    Error::validation(format!(
                        "group {group:?} unknown to the model (classes: {})",
                        model.groups.join(", ")
                    ))
                })?;
            let mut out = Vec::new();
            for (i, rec) in corpus.records().iter().enumerate() {
                let x = record_input(rec, model.pool)?;
                let (probs, _) = forward(&x, &model.params)?;
                let argmax = probs
                    .iter()
                    .enumerate()
                    .fold(0usize, |best, (j, p)| if *p > probs[best] { j } else { best });
                if argmax == class {
                    // negate so that higher probability sorts first
                    out.push((i, -probs[class]));
                }
            }
            out
        }
        (MineSource::Cluster(idx), MineArtifacts::Clustered { model, centroids }) => {
            if *idx >= centroids.k() {
                return Err(Error::validation(format!(
                    "cluster {idx} unknown, centroid set has k = {}",
                    centroids.k()
                )));
            }
            let embeddings = embed_corpus(corpus, &model.params, model.pool)?;
            let assignment = assign(&embeddings, centroids)?;
            assignment
                .labels
                .iter()
                .zip(&assignment.distances)
                .enumerate()
                .filter(|(_, (&l, _))| l == *idx)
                .map(|(i, (_, &d))| (i, d))
                .collect()
        }
        (MineSource::SupervisedLabel(_), MineArtifacts::Clustered { .. }) => {
            return Err(Error::validation(
                "label mining takes classifier artifacts, not centroids",
            ))
        }
        (MineSource::Cluster(_), MineArtifacts::Classifier(_)) => {
            return Err(Error::validation(
                "cluster mining needs centroid artifacts alongside the model",
            ))
        }
    };

    let matched = candidates.len();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    candidates.truncate(plan.target_size);
    let mut keep: Vec<usize> = candidates.into_iter().map(|(i, _)| i).collect();
    keep.sort_unstable();

    Ok(MiningResult {
        corpus: corpus.subset(&keep),
        matched,
        shortfall: matched < plan.target_size,
    })
}

/// Uniform sample of `n` records without replacement, optionally excluding
/// one group. The output order is the (seeded) draw order.
pub fn random_sample(
    corpus: &LabeledCorpus,
    n: usize,
    seed: u64,
    exclude_group: Option<&str>,
) -> Result<LabeledCorpus> {
    let eligible: Vec<usize> = corpus
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| match exclude_group {
            Some(g) => r.group.as_deref() != Some(g),
            None => true,
        })
        .map(|(i, _)| i)
        .collect();
    if n > eligible.len() {
        return Err(Error::validation(format!(
            "cannot sample {n} records, only {} eligible",
            eligible.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let picks = rng.sample_indices(eligible.len(), n);
    let indices: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();
    Ok(corpus.subset(&indices))
}

/// Concatenates `mined` with `anchor_count` records drawn uniformly from
/// `anchor`, then shuffles deterministically. Any utt_id shared between the
/// two inputs is rejected up front, so the outcome never depends on which
/// anchor records the seed picks.
pub fn mix_with_anchor(
    mined: &LabeledCorpus,
    anchor: &LabeledCorpus,
    anchor_count: usize,
    seed: u64,
) -> Result<LabeledCorpus> {
    if anchor_count > anchor.len() {
        return Err(Error::validation(format!(
            "anchor_count {anchor_count} exceeds the {} anchor records",
            anchor.len()
        )));
    }
    let mined_ids: HashSet<&str> = mined.records().iter().map(|r| r.utt_id.as_str()).collect();
    if let Some(dup) = anchor
        .records()
        .iter()
        .find(|r| mined_ids.contains(r.utt_id.as_str()))
    {
        return Err(Error::validation(format!(
            "utt_id {:?} appears in both the mined set and the anchor corpus",
            dup.utt_id
        )));
    }

    let root = SeededRng::new(seed);
    let mut pick_rng = root.derive(0);
    let picks = pick_rng.sample_indices(anchor.len(), anchor_count);
    let mut records: Vec<_> = mined.records().to_vec();
    records.extend(picks.into_iter().map(|i| anchor.records()[i].clone()));
    let mut shuffle_rng = root.derive(1);
    shuffle_rng.shuffle(&mut records);
    LabeledCorpus::new(records)
}

/// Downsamples every corpus uniformly (seeded, one substream each) to the
/// size of the smallest, so all outputs have exactly equal sizes.
pub fn size_match(corpora: &[LabeledCorpus], seed: u64) -> Result<Vec<LabeledCorpus>> {
    if corpora.is_empty() {
        return Err(Error::validation("size_match needs at least one corpus"));
    }
    if let Some(i) = corpora.iter().position(|c| c.is_empty()) {
        return Err(Error::validation(format!("corpus {i} is empty")));
    }
    let target = corpora.iter().map(|c| c.len()).min().unwrap();
    let root = SeededRng::new(seed);
    corpora
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = root.derive(i as u64);
            let picks = rng.sample_indices(c.len(), target);
            Ok(c.subset(&picks))
        })
        .collect()
}

/// Per-group record count in a mined manifest; `group` is None for
/// unlabeled records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCount {
    pub group: Option<String>,
    pub count: usize,
}

/// JSON summary of a mining run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MineSummary {
    pub source: String,
    pub requested: usize,
    pub matched: usize,
    pub shortfall: bool,
    pub anchor_added: usize,
    pub total: usize,
    pub composition: Vec<GroupCount>,
}

/// Builds the summary for a final mined corpus. `composition` counts the
/// output's records per group, unlabeled records first, then sorted by
/// label.
pub fn summarize(
    source: &str,
    requested: usize,
    matched: usize,
    shortfall: bool,
    anchor_added: usize,
    output: &LabeledCorpus,
) -> MineSummary {
    let mut counts: BTreeMap<Option<&str>, usize> = BTreeMap::new();
    for rec in output.records() {
        *counts.entry(rec.group.as_deref()).or_insert(0) += 1;
    }
    MineSummary {
        source: source.to_string(),
        requested,
        matched,
        shortfall,
        anchor_added,
        total: output.len(),
        composition: counts
            .into_iter()
            .map(|(group, count)| GroupCount {
                group: group.map(|g| g.to_string()),
                count,
            })
            .collect(),
    }
}
