//! Fairness evaluation: per-group accuracy, unweighted cross-group mean and
//! population standard deviation, the confusion matrix, and a deterministic
//! 2-D PCA projection of embeddings.
//!
//! The headline mean is unweighted across groups so small groups count as
//! much as large ones; the corpus-weighted mean is exported alongside it.
//! The stdev uses divisor G (population form).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::LabeledCorpus;
use crate::encoder::{forward, record_input, ClassifierParams, PoolMethod};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Per-group evaluation summary. `confusion` is indexed by `groups`: rows
/// are true groups, columns are predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub groups: Vec<String>,
    pub per_group_accuracy: BTreeMap<String, f64>,
    pub mean: f64,
    pub stdev: f64,
    pub weighted_mean: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl GroupReport {
    pub fn validate(&self) -> Result<()> {
        let g = self.groups.len();
        if g == 0 {
            return Err(Error::validation("report must cover at least one group"));
        }
        if self.confusion.len() != g || self.confusion.iter().any(|r| r.len() != g) {
            return Err(Error::shape(format!("confusion must be {g} x {g}")));
        }
        if self.per_group_accuracy.len() != g
            || !self.groups.iter().all(|x| self.per_group_accuracy.contains_key(x))
        {
            return Err(Error::shape(
                "per_group_accuracy must have exactly one entry per group",
            ));
        }
        let mean: f64 = self.per_group_accuracy.values().sum::<f64>() / g as f64;
        if (mean - self.mean).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "mean {} disagrees with per-group accuracies (expected {mean})",
                self.mean
            )));
        }
        if self.confusion.iter().flatten().sum::<u64>() == 0 {
            return Err(Error::validation("confusion matrix has no counts"));
        }
        Ok(())
    }
}

/// Argmax with ties broken toward the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores `params` on a labeled corpus. The corpus vocabulary must line up
/// with the classifier's classes: index i of `corpus.groups()` is class i.
/// Every group needs at least one record, otherwise its accuracy would be
/// undefined.
pub fn evaluate(
    params: &ClassifierParams,
    corpus: &LabeledCorpus,
    pool: PoolMethod,
) -> Result<GroupReport> {
    params.validate()?;
    if corpus.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty corpus"));
    }
    if !corpus.fully_labeled() {
        return Err(Error::validation(
            "evaluation corpus must have a group on every record",
        ));
    }
    let groups = corpus.groups().to_vec();
    let g = groups.len();
    if g != params.n_groups() {
        return Err(Error::shape(format!(
            "corpus has {g} groups but the classifier predicts {} classes",
            params.n_groups()
        )));
    }
    let counts = corpus.group_counts();
    let missing: Vec<&str> = groups
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c == 0)
        .map(|(l, _)| l.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "groups without records, accuracy undefined: {}",
            missing.join(", ")
        )));
    }

    let mut confusion = vec![vec![0u64; g]; g];
    for rec in corpus.records() {
        let truth = corpus.group_index(rec.group.as_deref().unwrap()).unwrap();
        let x = record_input(rec, pool)?;
        let (probs, _) = forward(&x, params)?;
        confusion[truth][argmax(&probs)] += 1;
    }

    let mut per_group_accuracy = BTreeMap::new();
    let mut acc_sum = 0.0;
    let mut correct_total = 0u64;
    for (i, label) in groups.iter().enumerate() {
        let row_total: u64 = confusion[i].iter().sum();
        let acc = confusion[i][i] as f64 / row_total as f64;
        per_group_accuracy.insert(label.clone(), acc);
        acc_sum += acc;
        correct_total += confusion[i][i];
    }
    let mean = acc_sum / g as f64;
    let variance = per_group_accuracy
        .values()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / g as f64;
    Ok(GroupReport {
        groups,
        per_group_accuracy,
        mean,
        stdev: variance.sqrt(),
        weighted_mean: correct_total as f64 / corpus.len() as f64,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// PCA projection
// ---------------------------------------------------------------------------

const POWER_ITER_MAX: usize = 500;
const POWER_ITER_TOL: f64 = 1e-13;

/// Top-2 principal decomposition of a point cloud: the mean, two unit
/// directions, and their eigenvalues (covariance with divisor n).
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Flips `v` so that its largest-magnitude coordinate (lowest index on
/// ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Power iteration on `cov`, keeping the iterate orthogonal to `against`.
/// Returns None when the residual spectrum is numerically zero.
fn power_iterate(
    cov: &[Vec<f64>],
    against: Option<&[f64]>,
    rng: &mut SeededRng,
    scale: f64,
) -> Option<(Vec<f64>, f64)> {
    let d = cov.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    if let Some(prev) = against {
        let proj = dot(&v, prev);
        for (x, p) in v.iter_mut().zip(prev) {
            *x -= proj * p;
        }
    }
    let n = norm(&v);
    if n == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);

    for _ in 0..POWER_ITER_MAX {
        let mut next = mat_vec(cov, &v);
        if let Some(prev) = against {
            let proj = dot(&next, prev);
            for (x, p) in next.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let len = norm(&next);
        if len <= POWER_ITER_TOL * scale.max(1e-300) {
            return None;
        }
        next.iter_mut().for_each(|x| *x /= len);
        // eigenvalues of a (deflated) covariance are non-negative, so the
        // iterate cannot alternate sign; component-wise change measures
        // eigenvector convergence directly
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v = next;
        if delta <= 1e-14 {
            break;
        }
    }
    let eigenvalue = dot(&v, &mat_vec(cov, &v));
    Some((v, eigenvalue))
}

/// Deterministic unit vector orthogonal to `against`, used when the data
/// has no variance left for a second direction.
fn orthogonal_completion(d: usize, against: &[f64]) -> Vec<f64> {
    for i in 0..d {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        let proj = dot(&v, against);
        for (x, p) in v.iter_mut().zip(against) {
            *x -= proj * p;
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
    unreachable!("a unit vector in R^d with d >= 2 always has an orthogonal complement");
}

impl Pca2 {
    /// Fits the top-2 decomposition by power iteration with deflation. The
    /// iteration seed is a fixed constant, so the result depends only on
    /// the input.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::validation("PCA needs at least 2 points"));
        }
        let d = points[0].len();
        if d < 2 {
            return Err(Error::validation("PCA needs dimension of at least 2"));
        }
        if let Some(i) = points.iter().position(|p| p.len() != d) {
            return Err(Error::shape(format!(
                "point {i} has dim {}, expected {d}",
                points[i].len()
            )));
        }
        let n = points.len() as f64;
        let mut mean = vec![0.0f64; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);

        let mut cov = vec![vec![0.0f64; d]; d];
        for p in points {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i][j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= n;
                cov[j][i] = cov[i][j];
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
        if trace <= 0.0 {
            return Err(Error::validation(
                "points have zero variance, no principal direction exists",
            ));
        }

        let mut rng = SeededRng::new(0x9ca2);
        let (mut v1, e1) = power_iterate(&cov, None, &mut rng, trace)
            .ok_or_else(|| Error::validation("points have zero variance"))?;
        fix_sign(&mut v1);

        // deflate and repeat for the second direction
        let mut deflated = cov.clone();
        for i in 0..d {
            for j in 0..d {
                deflated[i][j] -= e1 * v1[i] * v1[j];
            }
        }
        let (mut v2, e2) = match power_iterate(&deflated, Some(&v1), &mut rng, trace) {
            Some((v, e)) => (v, e.max(0.0)),
            // rank-1 data: any orthogonal direction carries zero variance
            None => (orthogonal_completion(d, &v1), 0.0),
        };
        fix_sign(&mut v2);

        Ok(Pca2 {
            mean,
            directions: [v1, v2],
            eigenvalues: [e1, e2],
        })
    }

    /// Projects a point onto the two principal directions.
    pub fn project(&self, point: &[f64]) -> Result<[f64; 2]> {
        if point.len() != self.mean.len() {
            return Err(Error::shape(format!(
                "point has dim {}, PCA was fit on dim {}",
                point.len(),
                self.mean.len()
            )));
        }
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok([
            dot(&centered, &self.directions[0]),
            dot(&centered, &self.directions[1]),
        ])
    }
}

/// Mean-centered projection of every point onto the top-2 principal
/// directions, deterministic for a given input.
pub fn pca_project(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let pca = Pca2::fit(points)?;
    points.iter().map(|p| pca.project(p)).collect()
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Quotes a CSV field when it contains a comma, quote, or newline.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Path of the confusion CSV written next to a report: `report.json` gets
/// `report.confusion.csv`.
pub fn confusion_csv_path(report_path: &Path) -> PathBuf {
    let stem = report_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".to_string());
    report_path.with_file_name(format!("{stem}.confusion.csv"))
}

/// Writes the report as JSON at `path` and the confusion matrix as a CSV
/// sibling (see [`confusion_csv_path`]). The CSV has a `truth` header
/// column; row and column order follow `report.groups`.
pub fn export_report(report: &GroupReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    report.validate()?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::data(format!("{}: serialize: {e}", path.display())))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;

    let mut csv = String::from("truth");
    for g in &report.groups {
        csv.push(',');
        csv.push_str(&csv_field(g));
    }
    csv.push('\n');
    for (i, g) in report.groups.iter().enumerate() {
        csv.push_str(&csv_field(g));
        for c in &report.confusion[i] {
            csv.push(',');
            csv.push_str(&c.to_string());
        }
        csv.push('\n');
    }
    let csv_path = confusion_csv_path(path);
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}
