//! Mini-batch training loops for the three objectives: ERM, equal-per-group
//! sampling (EQ), and online group DRO.
//!
//! DRO keeps a distribution q over groups, nudged each step toward groups
//! with high smoothed loss, and scales the batch loss by q. The per-step
//! order is: sample batch, compute per-group batch losses, update q, weight
//! the loss with the updated q, take the gradient step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::encoder::{grad_from_input, record_input, ClassifierParams, PoolMethod};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Erm,
    Eq,
    Dro,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Erm => write!(f, "erm"),
            Objective::Eq => write!(f, "eq"),
            Objective::Dro => write!(f, "dro"),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Objective::Erm),
            "eq" => Ok(Objective::Eq),
            "dro" => Ok(Objective::Dro),
            other => Err(Error::validation(format!(
                "unknown objective {other:?}, expected \"erm\", \"eq\", or \"dro\""
            ))),
        }
    }
}

fn default_eta_q() -> f64 {
    0.01
}

fn default_loss_ema_beta() -> f64 {
    0.1
}

/// DRO hyperparameters: group-weight step size and the smoothing constant of
/// the per-group loss EMA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroConfig {
    #[serde(default = "default_eta_q")]
    pub eta_q: f64,
    #[serde(default = "default_loss_ema_beta")]
    pub loss_ema_beta: f64,
}

impl Default for DroConfig {
    fn default() -> Self {
        DroConfig {
            eta_q: default_eta_q(),
            loss_ema_beta: default_loss_ema_beta(),
        }
    }
}

impl DroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_q > 0.0) || !self.eta_q.is_finite() {
            return Err(Error::validation("dro.eta_q must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.loss_ema_beta) {
            return Err(Error::validation("dro.loss_ema_beta must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Online DRO state: the group-weight distribution and the smoothed
/// per-group losses that drive it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroState {
    pub q: Vec<f64>,
    pub eta_q: f64,
    pub ema_group_loss: Vec<f64>,
    pub loss_ema_beta: f64,
}

impl DroState {
    /// Uniform q, zero loss history.
    pub fn new(n_groups: usize, cfg: DroConfig) -> Result<Self> {
        cfg.validate()?;
        if n_groups == 0 {
            return Err(Error::validation("DRO needs at least one group"));
        }
        Ok(DroState {
            q: vec![1.0 / n_groups as f64; n_groups],
            eta_q: cfg.eta_q,
            ema_group_loss: vec![0.0; n_groups],
            loss_ema_beta: cfg.loss_ema_beta,
        })
    }
}

/// One EMA-and-reweight step. For groups marked in `mask`, the loss EMA
/// absorbs the batch loss; then every group's weight is scaled by
/// exp(eta_q * ema) and the result is renormalized. The update runs in log
/// space so large loss histories cannot overflow.
pub fn update_group_weights(
    state: &DroState,
    batch_group_losses: &[f64],
    mask: &[bool],
) -> Result<DroState> {
    let g = state.q.len();
    if batch_group_losses.len() != g || mask.len() != g {
        return Err(Error::shape(format!(
            "expected {g} group losses and mask entries, got {} and {}",
            batch_group_losses.len(),
            mask.len()
        )));
    }
    let mut ema = state.ema_group_loss.clone();
    for i in 0..g {
        if mask[i] {
            let loss = batch_group_losses[i];
            if !loss.is_finite() || loss < 0.0 {
                return Err(Error::validation(format!(
                    "group {i} batch loss {loss} must be finite and non-negative"
                )));
            }
            ema[i] = state.loss_ema_beta * ema[i] + (1.0 - state.loss_ema_beta) * loss;
        }
    }
    let log_q: Vec<f64> = state
        .q
        .iter()
        .zip(&ema)
        .map(|(q, e)| q.ln() + state.eta_q * e)
        .collect();
    let max = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_q.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(DroState {
        q: exps.iter().map(|e| e / total).collect(),
        eta_q: state.eta_q,
        ema_group_loss: ema,
        loss_ema_beta: state.loss_ema_beta,
    })
}

/// Batch loss under the group weights, renormalized over the groups present
/// in the batch: sum of q_g * loss_g over present g, divided by the present
/// q mass.
pub fn dro_batch_loss(
    state: &DroState,
    per_group_mean_losses: &[f64],
    mask: &[bool],
) -> Result<f64> {
    let g = state.q.len();
    if per_group_mean_losses.len() != g || mask.len() != g {
        return Err(Error::shape(format!(
            "expected {g} group losses and mask entries, got {} and {}",
            per_group_mean_losses.len(),
            mask.len()
        )));
    }
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for i in 0..g {
        if mask[i] {
            weighted += state.q[i] * per_group_mean_losses[i];
            mass += state.q[i];
        }
    }
    if mass <= 0.0 {
        return Err(Error::validation("no group present in the batch"));
    }
    Ok(weighted / mass)
}

/// Record indices per vocabulary group, in vocabulary order.
fn group_record_indices(corpus: &LabeledCorpus) -> Vec<Vec<usize>> {
    let mut by_group = vec![Vec::new(); corpus.groups().len()];
    let lookup: HashMap<&str, usize> = corpus
        .groups()
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    for (i, rec) in corpus.records().iter().enumerate() {
        if let Some(g) = &rec.group {
            by_group[lookup[g.as_str()]].push(i);
        }
    }
    by_group
}

fn sample_batch_inner(
    by_group: &[Vec<usize>],
    labels: &[String],
    n_records: usize,
    objective: Objective,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be positive"));
    }
    if n_records == 0 {
        return Err(Error::validation("cannot sample from an empty corpus"));
    }
    match objective {
        Objective::Erm => Ok((0..batch_size).map(|_| rng.next_index(n_records)).collect()),
        Objective::Eq | Objective::Dro => {
            if by_group.is_empty() {
                return Err(Error::validation("corpus has no groups to balance over"));
            }
            if let Some(gi) = by_group.iter().position(|g| g.is_empty()) {
                return Err(Error::validation(format!(
                    "group {:?} has no records; group-balanced sampling needs every group populated",
                    labels[gi]
                )));
            }
            Ok((0..batch_size)
                .map(|_| {
                    let g = &by_group[rng.next_index(by_group.len())];
                    g[rng.next_index(g.len())]
                })
                .collect())
        }
    }
}

/// Draws a batch of record indices. ERM samples records uniformly; EQ and
/// DRO first draw a group uniformly, then a record within it, independently
/// per slot. Sampling is with replacement.
pub fn sample_batch(
    corpus: &LabeledCorpus,
    objective: Objective,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let by_group = group_record_indices(corpus);
    sample_batch_inner(
        &by_group,
        corpus.groups(),
        corpus.len(),
        objective,
        batch_size,
        rng,
    )
}

/// Training hyperparameters. `dro` must be set exactly when the objective
/// is DRO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pool: PoolMethod,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dro: Option<DroConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("lr must be a positive finite number"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::validation("hidden_dim must be positive"));
        }
        match (self.objective, &self.dro) {
            (Objective::Dro, None) => Err(Error::validation(
                "objective \"dro\" requires the dro config block",
            )),
            (Objective::Dro, Some(dro)) => dro.validate(),
            (_, Some(_)) => Err(Error::validation(format!(
                "objective \"{}\" must not set the dro config block",
                self.objective
            ))),
            (_, None) => Ok(()),
        }
    }
}

/// One trace row: batch-level losses at a training step (0-based).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub mean_loss: f64,
    pub worst_group_loss: f64,
}

/// Outcome of a training run. The trace has one row per step; `final_q` is
/// present only under DRO.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    #[serde(skip)]
    pub params: ClassifierParams,
    pub objective: Objective,
    pub steps: usize,
    pub trace: Vec<TracePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_q: Option<Vec<f64>>,
}

/// Runs `cfg.steps` mini-batch SGD steps on `corpus`. Deterministic given
/// (corpus, cfg): initialization and sampling read separate substreams of
/// cfg.seed, and batch gradients reduce in slot order.
pub fn train(corpus: &LabeledCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::validation("cannot train on an empty corpus"));
    }
    if !corpus.fully_labeled() {
        return Err(Error::validation(
            "training corpus must have a group on every record",
        ));
    }
    let n_groups = corpus.groups().len();

    let inputs: Vec<Vec<f64>> = corpus
        .records()
        .iter()
        .map(|r| record_input(r, cfg.pool))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = corpus
        .records()
        .iter()
        .map(|r| corpus.group_index(r.group.as_deref().unwrap()).unwrap())
        .collect();
    let input_dim = inputs[0].len();
    if let Some(i) = inputs.iter().position(|x| x.len() != input_dim) {
        return Err(Error::shape(format!(
            "record {:?} has input dim {}, expected {input_dim}",
            corpus.records()[i].utt_id,
            inputs[i].len()
        )));
    }

    let root = SeededRng::new(cfg.seed);
    let mut init_rng = root.derive(0);
    let mut sample_rng = root.derive(1);
    let mut params = ClassifierParams::init(input_dim, cfg.hidden_dim, n_groups, &mut init_rng)?;

    let by_group = group_record_indices(corpus);
    let mut dro_state = match cfg.objective {
        Objective::Dro => Some(DroState::new(n_groups, cfg.dro.unwrap())?),
        _ => None,
    };

    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch_inner(
            &by_group,
            corpus.groups(),
            corpus.len(),
            cfg.objective,
            cfg.batch_size,
            &mut sample_rng,
        )?;

        // forward/backward per slot, in slot order
        let mut grads = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (g, loss, _) = grad_from_input(&inputs[i], labels[i], &params)?;
            grads.push(g);
            losses.push(loss);
        }

        let mut group_loss_sum = vec![0.0f64; n_groups];
        let mut group_count = vec![0usize; n_groups];
        for (&i, &loss) in batch.iter().zip(&losses) {
            group_loss_sum[labels[i]] += loss;
            group_count[labels[i]] += 1;
        }
        let mask: Vec<bool> = group_count.iter().map(|&c| c > 0).collect();
        let group_mean: Vec<f64> = group_loss_sum
            .iter()
            .zip(&group_count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();

        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let worst = group_mean
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);

        // per-slot gradient weights; they sum to 1 for every objective
        let weights: Vec<f64> = match &mut dro_state {
            None => vec![1.0 / batch.len() as f64; batch.len()],
            Some(state) => {
                *state = update_group_weights(state, &group_mean, &mask)?;
                let mass: f64 = state
                    .q
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &m)| m)
                    .map(|(q, _)| q)
                    .sum();
                batch
                    .iter()
                    .map(|&i| {
                        let g = labels[i];
                        state.q[g] / (mass * group_count[g] as f64)
                    })
                    .collect()
            }
        };

        for (g, w) in grads.iter().zip(&weights) {
            params.axpy(-cfg.lr * w, g);
        }
        trace.push(TracePoint {
            step,
            mean_loss,
            worst_group_loss: worst,
        });
    }

    Ok(TrainReport {
        params,
        objective: cfg.objective,
        steps: cfg.steps,
        trace,
        final_q: dro_state.map(|s| s.q),
    })
}

/// Mean cross-entropy per group over the whole corpus; returns the worst
/// group (ties broken toward the lexicographically smallest label) and its
/// loss. Groups without records are skipped.
pub fn worst_group_loss(
    params: &ClassifierParams,
    corpus: &LabeledCorpus,
    pool: PoolMethod,
) -> Result<(String, f64)> {
    if corpus.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    let n_groups = corpus.groups().len();
    let mut sums = vec![0.0f64; n_groups];
    let mut counts = vec![0usize; n_groups];
    for rec in corpus.records() {
        let Some(g) = &rec.group else { continue };
        let gi = corpus
            .group_index(g)
            .ok_or_else(|| Error::validation(format!("group {g:?} missing from vocabulary")))?;
        let x = record_input(rec, pool)?;
        let (probs, _) = crate::encoder::forward(&x, params)?;
        sums[gi] += crate::encoder::cross_entropy(&probs, gi)?;
        counts[gi] += 1;
    }
    let mut best: Option<(&str, f64)> = None;
    for gi in 0..n_groups {
        if counts[gi] == 0 {
            continue;
        }
        let mean = sums[gi] / counts[gi] as f64;
        let label = corpus.groups()[gi].as_str();
        best = match best {
            None => Some((label, mean)),
            Some((bl, bm)) => {
                if mean > bm || (mean == bm && label < bl) {
                    Some((label, mean))
                } else {
                    Some((bl, bm))
                }
            }
        };
    }
    best.map(|(l, m)| (l.to_string(), m))
        .ok_or_else(|| Error::validation("corpus has no labeled records"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, Features, GroupMixSpec, GroupSpec, UtteranceRecord};
    use crate::encoder::{cross_entropy, forward};

    fn two_group_corpus(n_a: usize, n_b: usize) -> LabeledCorpus {
        let mut records = Vec::new();
        for i in 0..n_a {
            records.push(UtteranceRecord {
                utt_id: format!("a-{i}"),
                group: Some("a".into()),
                features: Features::Embedding(vec![1.0, 0.0]),
            });
        }
        for i in 0..n_b {
            records.push(UtteranceRecord {
                utt_id: format!("b-{i}"),
                group: Some("b".into()),
                features: Features::Embedding(vec![0.0, 1.0]),
            });
        }
        LabeledCorpus::new(records).unwrap()
    }

    fn dro_state(q: Vec<f64>, ema: Vec<f64>, eta_q: f64, beta: f64) -> DroState {
        DroState {
            q,
            eta_q,
            ema_group_loss: ema,
            loss_ema_beta: beta,
        }
    }

    #[test]
    fn hand_computed_weight_update() {
        let state = dro_state(vec![0.5, 0.5], vec![0.0, 0.0], 2.0f64.ln(), 0.0);
        let next = update_group_weights(&state, &[1.0, 0.0], &[true, true]).unwrap();
        assert!((next.q[0] - 2.0 / 3.0).abs() < 1e-12, "{:?}", next.q);
        assert!((next.q[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(next.ema_group_loss, vec![1.0, 0.0]);
    }

    #[test]
    fn equal_losses_leave_q_unchanged() {
        let state = dro_state(vec![0.3, 0.7], vec![0.0, 0.0], 0.5, 0.0);
        let next = update_group_weights(&state, &[2.5, 2.5], &[true, true]).unwrap();
        assert!((next.q[0] - 0.3).abs() < 1e-12);
        assert!((next.q[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn tiny_eta_leaves_q_unchanged() {
        let state = dro_state(vec![0.25, 0.75], vec![0.0, 0.0], 1e-12, 0.0);
        let next = update_group_weights(&state, &[3.0, 1.0], &[true, true]).unwrap();
        assert!((next.q[0] - 0.25).abs() < 1e-9);
        assert!((next.q[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn absent_group_keeps_ema_but_still_normalizes() {
        let state = dro_state(vec![0.5, 0.5], vec![5.0, 7.0], 0.01, 0.5);
        let next = update_group_weights(&state, &[1.0, 99.0], &[true, false]).unwrap();
        assert!((next.ema_group_loss[0] - 3.0).abs() < 1e-12);
        assert_eq!(next.ema_group_loss[1], 7.0);
        let total: f64 = next.q.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // the absent group still got exponentiated with its stale ema
        assert!(next.q[1] > next.q[0]);
    }

    #[test]
    fn shift_in_losses_cancels_in_normalization() {
        let state = dro_state(vec![0.2, 0.3, 0.5], vec![0.0, 0.0, 0.0], 0.7, 0.0);
        let a = update_group_weights(&state, &[1.0, 2.0, 0.5], &[true, true, true]).unwrap();
        let b = update_group_weights(&state, &[11.0, 12.0, 10.5], &[true, true, true]).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strictly_largest_loss_strictly_raises_q() {
        let state = dro_state(vec![1.0 / 3.0; 3], vec![0.0; 3], 0.1, 0.0);
        let next = update_group_weights(&state, &[0.2, 0.9, 0.2], &[true; 3]).unwrap();
        assert!(next.q[1] > 1.0 / 3.0);
        assert!(next.q[0] < 1.0 / 3.0);
    }

    #[test]
    fn q_stays_valid_under_random_updates() {
        let mut state = DroState::new(4, DroConfig::default()).unwrap();
        let mut rng = SeededRng::new(77);
        for _ in 0..10_000 {
            let losses: Vec<f64> = (0..4).map(|_| rng.next_f64() * 5.0).collect();
            let mask: Vec<bool> = (0..4).map(|_| rng.next_f64() < 0.7).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            state = update_group_weights(&state, &losses, &mask).unwrap();
            let total: f64 = state.q.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(state.q.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn non_finite_loss_rejected() {
        let state = DroState::new(2, DroConfig::default()).unwrap();
        let err = update_group_weights(&state, &[f64::NAN, 0.0], &[true, true]).unwrap_err();
        assert!(err.to_string().contains("finite"), "{err}");
    }

    #[test]
    fn dro_loss_uniform_q_is_mean() {
        let state = DroState::new(4, DroConfig::default()).unwrap();
        let loss = dro_batch_loss(&state, &[1.0, 2.0, 3.0, 4.0], &[true; 4]).unwrap();
        assert!((loss - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dro_loss_degenerate_weighting() {
        let eps = 1e-9;
        let state = dro_state(vec![1.0 - eps, eps], vec![0.0, 0.0], 0.01, 0.1);
        let loss = dro_batch_loss(&state, &[0.4, 100.0], &[true, true]).unwrap();
        assert!((loss - 0.4).abs() < 1e-6);
    }

    #[test]
    fn dro_loss_hand_value() {
        let state = dro_state(vec![2.0 / 3.0, 1.0 / 3.0], vec![0.0, 0.0], 0.01, 0.1);
        let loss = dro_batch_loss(&state, &[0.3, 0.9], &[true, true]).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dro_loss_renormalizes_over_present() {
        let state = dro_state(vec![0.5, 0.25, 0.25], vec![0.0; 3], 0.01, 0.1);
        let loss = dro_batch_loss(&state, &[1.0, 3.0, 99.0], &[true, true, false]).unwrap();
        // (0.5*1 + 0.25*3) / 0.75
        assert!((loss - (0.5 + 0.75) / 0.75).abs() < 1e-12);
    }

    #[test]
    fn dro_loss_empty_mask_errors() {
        let state = DroState::new(2, DroConfig::default()).unwrap();
        let err = dro_batch_loss(&state, &[1.0, 2.0], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("no group present"), "{err}");
    }

    #[test]
    fn single_group_sampling_hits_that_group() {
        let records = (0..5)
            .map(|i| UtteranceRecord {
                utt_id: format!("u{i}"),
                group: Some("only".into()),
                features: Features::Embedding(vec![0.0]),
            })
            .collect();
        let corpus = LabeledCorpus::new(records).unwrap();
        for objective in [Objective::Erm, Objective::Eq, Objective::Dro] {
            let mut rng = SeededRng::new(1);
            let batch = sample_batch(&corpus, objective, 20, &mut rng).unwrap();
            assert_eq!(batch.len(), 20);
            assert!(batch
                .iter()
                .all(|&i| corpus.records()[i].group.as_deref() == Some("only")));
        }
    }

    #[test]
    fn eq_sampling_balances_unbalanced_groups() {
        let corpus = two_group_corpus(900, 100);
        let mut rng = SeededRng::new(3);
        let batch = sample_batch(&corpus, Objective::Eq, 10_000, &mut rng).unwrap();
        let share_a = batch.iter().filter(|&&i| i < 900).count() as f64 / 10_000.0;
        assert!((share_a - 0.5).abs() < 0.02, "share_a = {share_a}");
    }

    #[test]
    fn erm_sampling_follows_record_mass() {
        let corpus = two_group_corpus(900, 100);
        let mut rng = SeededRng::new(4);
        let batch = sample_batch(&corpus, Objective::Erm, 10_000, &mut rng).unwrap();
        let share_a = batch.iter().filter(|&&i| i < 900).count() as f64 / 10_000.0;
        assert!((share_a - 0.9).abs() < 0.02, "share_a = {share_a}");
    }

    #[test]
    fn empty_group_under_eq_names_the_group() {
        let corpus = two_group_corpus(3, 2);
        let reordered = corpus
            .with_groups(&["a".to_string(), "b".to_string(), "ghost".to_string()])
            .unwrap();
        let mut rng = SeededRng::new(5);
        let err = sample_batch(&reordered, Objective::Eq, 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    fn separable_spec() -> GroupMixSpec {
        GroupMixSpec {
            dim: 4,
            frames_per_utt: 1,
            groups: vec![
                GroupSpec {
                    label: "pos".into(),
                    count: 60,
                    mean: vec![3.0; 4],
                    stdev: 0.5,
                },
                GroupSpec {
                    label: "neg".into(),
                    count: 60,
                    mean: vec![-3.0; 4],
                    stdev: 0.5,
                },
            ],
        }
    }

    fn train_accuracy(report: &TrainReport, corpus: &LabeledCorpus, pool: PoolMethod) -> f64 {
        let mut hits = 0usize;
        for rec in corpus.records() {
            let x = record_input(rec, pool).unwrap();
            let (probs, _) = forward(&x, &report.params).unwrap();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == corpus.group_index(rec.group.as_deref().unwrap()).unwrap() {
                hits += 1;
            }
        }
        hits as f64 / corpus.len() as f64
    }

    #[test]
    fn separable_gaussians_reach_high_accuracy() {
        let corpus = generate_synthetic_corpus(&separable_spec(), 21).unwrap();
        for objective in [Objective::Erm, Objective::Eq, Objective::Dro] {
            let cfg = TrainConfig {
                objective,
                batch_size: 16,
                steps: 500,
                lr: 0.05,
                seed: 7,
                pool: PoolMethod::Average,
                hidden_dim: 8,
                dro: (objective == Objective::Dro).then(DroConfig::default),
            };
            let report = train(&corpus, &cfg).unwrap();
            let acc = train_accuracy(&report, &corpus, cfg.pool);
            assert!(acc >= 0.95, "{objective}: accuracy {acc}");
            assert_eq!(report.trace.len(), 500);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = generate_synthetic_corpus(&separable_spec(), 2).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Erm,
            batch_size: 8,
            steps: 0,
            lr: 0.1,
            seed: 99,
            pool: PoolMethod::Average,
            hidden_dim: 4,
            dro: None,
        };
        let report = train(&corpus, &cfg).unwrap();
        assert!(report.trace.is_empty());
        let root = SeededRng::new(99);
        let mut init_rng = root.derive(0);
        let expected = ClassifierParams::init(4, 4, 2, &mut init_rng).unwrap();
        assert_eq!(report.params, expected);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let corpus = generate_synthetic_corpus(&separable_spec(), 5).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Dro,
            batch_size: 8,
            steps: 50,
            lr: 0.05,
            seed: 13,
            pool: PoolMethod::Average,
            hidden_dim: 6,
            dro: Some(DroConfig::default()),
        };
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dro_without_block_rejected_and_vice_versa() {
        let cfg = TrainConfig {
            objective: Objective::Dro,
            batch_size: 8,
            steps: 1,
            lr: 0.1,
            seed: 0,
            pool: PoolMethod::Average,
            hidden_dim: 4,
            dro: None,
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("requires"));
        let cfg = TrainConfig {
            objective: Objective::Erm,
            dro: Some(DroConfig::default()),
            ..cfg
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("must not"));
    }

    #[test]
    fn erm_report_serializes_without_q() {
        let corpus = generate_synthetic_corpus(&separable_spec(), 3).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Erm,
            batch_size: 4,
            steps: 2,
            lr: 0.05,
            seed: 1,
            pool: PoolMethod::Average,
            hidden_dim: 4,
            dro: None,
        };
        let report = train(&corpus, &cfg).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("final_q"), "{json}");
        assert!(json.contains("\"trace\""));
    }

    #[test]
    fn dro_final_q_is_valid_distribution() {
        let corpus = two_group_corpus(50, 10);
        let cfg = TrainConfig {
            objective: Objective::Dro,
            batch_size: 8,
            steps: 40,
            lr: 0.05,
            seed: 3,
            pool: PoolMethod::Average,
            hidden_dim: 4,
            dro: Some(DroConfig {
                eta_q: 0.1,
                loss_ema_beta: 0.5,
            }),
        };
        let report = train(&corpus, &cfg).unwrap();
        let q = report.final_q.unwrap();
        assert_eq!(q.len(), 2);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(q.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn worst_group_single_group() {
        let corpus = two_group_corpus(5, 0);
        let params = ClassifierParams::zeros(2, 2, 2);
        let (label, _) = worst_group_loss(&params, &corpus, PoolMethod::Average).unwrap();
        assert_eq!(label, "a");
    }

    #[test]
    fn worst_group_degenerate_case() {
        // predictor is perfect on group "a" (class 0), uniform on the rest
        let mut params = ClassifierParams::zeros(2, 2, 4);
        params.w1[0][0] = 10.0;
        params.w2[0][0] = 100.0;
        let records = vec![
            UtteranceRecord {
                utt_id: "a0".into(),
                group: Some("a".into()),
                features: Features::Embedding(vec![1.0, 0.0]),
            },
            UtteranceRecord {
                utt_id: "b0".into(),
                group: Some("b".into()),
                features: Features::Embedding(vec![0.0, 0.0]),
            },
            UtteranceRecord {
                utt_id: "c0".into(),
                group: Some("c".into()),
                features: Features::Embedding(vec![0.0, 0.0]),
            },
            UtteranceRecord {
                utt_id: "d0".into(),
                group: Some("d".into()),
                features: Features::Embedding(vec![0.0, 0.0]),
            },
        ];
        let corpus = LabeledCorpus::new(records).unwrap();
        let (label, loss) = worst_group_loss(&params, &corpus, PoolMethod::Average).unwrap();
        // groups b, c, d tie at ln 4; lexicographic tie-break picks b
        assert_eq!(label, "b");
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn worst_group_matches_brute_force() {
        let spec = GroupMixSpec {
            dim: 3,
            frames_per_utt: 2,
            groups: vec![
                GroupSpec {
                    label: "x".into(),
                    count: 7,
                    mean: vec![1.0, 0.0, 0.0],
                    stdev: 1.0,
                },
                GroupSpec {
                    label: "y".into(),
                    count: 5,
                    mean: vec![0.0, 1.0, 0.0],
                    stdev: 1.0,
                },
                GroupSpec {
                    label: "z".into(),
                    count: 9,
                    mean: vec![0.0, 0.0, 1.0],
                    stdev: 1.0,
                },
            ],
        };
        let corpus = generate_synthetic_corpus(&spec, 31).unwrap();
        let mut rng = SeededRng::new(8);
        let params = ClassifierParams::init(3, 5, 3, &mut rng).unwrap();

        let (label, loss) = worst_group_loss(&params, &corpus, PoolMethod::Average).unwrap();

        let mut by_group: HashMap<String, (f64, usize)> = HashMap::new();
        for rec in corpus.records() {
            let x = record_input(rec, PoolMethod::Average).unwrap();
            let (probs, _) = forward(&x, &params).unwrap();
            let gi = corpus.group_index(rec.group.as_deref().unwrap()).unwrap();
            let ce = cross_entropy(&probs, gi).unwrap();
            let entry = by_group.entry(rec.group.clone().unwrap()).or_insert((0.0, 0));
            entry.0 += ce;
            entry.1 += 1;
        }
        let (expect_label, expect_loss) = by_group
            .iter()
            .map(|(g, (s, c))| (g.clone(), s / *c as f64))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!(label, expect_label);
        assert!((loss - expect_loss).abs() < 1e-12);
    }
}
