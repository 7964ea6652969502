//! Online K-means over encoder embeddings: K-means++ seeding,
//! nearest-centroid assignment, and EMA centroid updates.
//!
//! Distances are squared Euclidean throughout. The online loop shuffles
//! points each epoch and folds mini-batches into the centroids with
//! c <- alpha * c + (1 - alpha) * batch_mean; empty clusters keep their
//! previous centroid. Everything is deterministic given the caller's rng.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::corpus::{load_embeddings, save_embeddings};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Default EMA weight for online centroid updates.
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
/// Default mini-batch size for the online loop.
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Default number of passes over the points.
pub const DEFAULT_EPOCHS: usize = 10;

/// K centroid locations plus the EMA weight used to move them.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, |c| c.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.is_empty() {
            return Err(Error::validation("centroid set must have k >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(format!(
                "alpha {} must lie in [0, 1]",
                self.alpha
            )));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::shape("centroids must be non-empty vectors"));
        }
        for (i, c) in self.centroids.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::shape(format!(
                    "centroid {i} has dim {}, expected {dim}",
                    c.len()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "centroid {i} has a non-finite entry"
                )));
            }
        }
        Ok(())
    }
}

/// Per-point cluster labels and squared distances to the assigned centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub distances: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::validation("point set must be non-empty"))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::shape("points must be non-empty vectors"));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::shape(format!(
                "point {i} has dim {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!("point {i} has a non-finite entry")));
        }
    }
    Ok(dim)
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for p in points {
        seen.insert(p.iter().map(|x| x.to_bits()).collect());
    }
    seen.len()
}

/// K-means++ seeding: first centroid uniform over the points, each next one
/// drawn with probability proportional to the squared distance to its
/// nearest existing centroid. Every centroid is one of the input points.
/// The returned set carries [`DEFAULT_EMA_ALPHA`].
pub fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Result<CentroidSet> {
    check_points(points)?;
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::validation(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.next_index(points.len());
    centroids.push(points[first].clone());

    let mut min_d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let pick = rng.choose_weighted(&min_d2).ok_or_else(|| {
            Error::validation("all remaining points coincide with existing centroids")
        })?;
        centroids.push(points[pick].clone());
        let newest = centroids.last().unwrap();
        for (d, p) in min_d2.iter_mut().zip(points) {
            let cand = sq_dist(p, newest);
            if cand < *d {
                *d = cand;
            }
        }
    }
    Ok(CentroidSet {
        centroids,
        alpha: DEFAULT_EMA_ALPHA,
    })
}

/// Maps each point to its nearest centroid; ties go to the lowest index.
pub fn assign(points: &[Vec<f64>], centroids: &CentroidSet) -> Result<Assignment> {
    centroids.validate()?;
    let dim = check_points(points)?;
    if dim != centroids.dim() {
        return Err(Error::shape(format!(
            "points have dim {dim}, centroids have dim {}",
            centroids.dim()
        )));
    }
    let mut labels = Vec::with_capacity(points.len());
    let mut distances = Vec::with_capacity(points.len());
    for p in points {
        let mut best = 0usize;
        let mut best_d = sq_dist(p, &centroids.centroids[0]);
        for (i, c) in centroids.centroids.iter().enumerate().skip(1) {
            let d = sq_dist(p, c);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        labels.push(best);
        distances.push(best_d);
    }
    Ok(Assignment { labels, distances })
}

/// Moves each non-empty cluster's centroid toward the mean of its assigned
/// points: alpha * old + (1 - alpha) * mean. Empty clusters are untouched.
/// The endpoints alpha = 0 and alpha = 1 reproduce the mean and the old
/// centroid bitwise.
pub fn ema_update(
    centroids: &CentroidSet,
    points: &[Vec<f64>],
    assignment: &Assignment,
) -> Result<CentroidSet> {
    centroids.validate()?;
    if assignment.labels.len() != points.len() {
        return Err(Error::shape(format!(
            "{} labels for {} points",
            assignment.labels.len(),
            points.len()
        )));
    }
    if let Some(&bad) = assignment.labels.iter().find(|&&l| l >= centroids.k()) {
        return Err(Error::shape(format!(
            "label {bad} out of range for k = {}",
            centroids.k()
        )));
    }
    let dim = centroids.dim();
    let mut sums = vec![vec![0.0f64; dim]; centroids.k()];
    let mut counts = vec![0usize; centroids.k()];
    for (p, &l) in points.iter().zip(&assignment.labels) {
        if p.len() != dim {
            return Err(Error::shape(format!(
                "point has dim {}, centroids have dim {dim}",
                p.len()
            )));
        }
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
        counts[l] += 1;
    }
    let alpha = centroids.alpha;
    let new_centroids = centroids
        .centroids
        .iter()
        .enumerate()
        .map(|(i, old)| {
            if counts[i] == 0 {
                return old.clone();
            }
            let n = counts[i] as f64;
            let mean: Vec<f64> = sums[i].iter().map(|s| s / n).collect();
            if alpha == 0.0 {
                mean
            } else if alpha == 1.0 {
                old.clone()
            } else {
                old.iter()
                    .zip(&mean)
                    .map(|(o, m)| alpha * o + (1.0 - alpha) * m)
                    .collect()
            }
        })
        .collect();
    Ok(CentroidSet {
        centroids: new_centroids,
        alpha,
    })
}

/// Full online run: K-means++ seeding, then `epochs` passes where the
/// shuffled points are folded in batches of `batch_size` (assign, then EMA
/// update). Returns the final centroids and the assignment of all points in
/// their original order.
pub fn run_online_kmeans(
    points: &[Vec<f64>],
    k: usize,
    alpha: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut SeededRng,
) -> Result<(CentroidSet, Assignment)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} must lie in [0, 1]")));
    }
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be positive"));
    }
    let mut centroids = kmeanspp_init(points, k, rng)?;
    centroids.alpha = alpha;

    let mut order: Vec<usize> = (0..points.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| points[i].clone()).collect();
            let batch_assignment = assign(&batch, &centroids)?;
            centroids = ema_update(&centroids, &batch, &batch_assignment)?;
        }
    }
    let final_assignment = assign(points, &centroids)?;
    Ok((centroids, final_assignment))
}

/// Majority-group map for each cluster plus the overall purity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGroupMatch {
    /// Cluster index to its majority ground-truth label. Clusters with no
    /// points are absent.
    pub majority: BTreeMap<usize, String>,
    /// Fraction of points whose cluster majority equals their own label.
    pub purity: f64,
}

/// Maps each cluster to its majority ground-truth label (ties broken toward
/// the lexicographically smallest label) and scores purity over all points.
pub fn match_clusters_to_groups(
    assignment: &Assignment,
    labels: &[String],
) -> Result<ClusterGroupMatch> {
    if assignment.labels.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} assignments for {} labels",
            assignment.labels.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("cannot match an empty assignment"));
    }
    let mut per_cluster: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for (&cluster, label) in assignment.labels.iter().zip(labels) {
        *per_cluster
            .entry(cluster)
            .or_default()
            .entry(label.as_str())
            .or_insert(0) += 1;
    }
    let mut majority = BTreeMap::new();
    for (&cluster, counts) in &per_cluster {
        // BTreeMap iterates labels in order, so a strict > keeps the
        // lexicographically smallest label on ties
        let (best, _) = counts
            .iter()
            .fold(("", 0usize), |(bl, bc), (&l, &c)| {
                if c > bc {
                    (l, c)
                } else {
                    (bl, bc)
                }
            });
        majority.insert(cluster, best.to_string());
    }
    let correct = assignment
        .labels
        .iter()
        .zip(labels)
        .filter(|(c, l)| majority[c] == **l)
        .count();
    Ok(ClusterGroupMatch {
        majority,
        purity: correct as f64 / labels.len() as f64,
    })
}

/// Writes centroid locations to a binary embedding file (ids are indices).
pub fn save_centroids(path: impl AsRef<Path>, centroids: &CentroidSet) -> Result<()> {
    centroids.validate()?;
    let entries: Vec<(String, Vec<f32>)> = centroids
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i.to_string(), c.iter().map(|x| *x as f32).collect()))
        .collect();
    save_embeddings(path, &entries)
}

/// Reads centroid locations written by [`save_centroids`]. The file stores
/// locations only; `alpha` is supplied by the caller.
pub fn load_centroids(path: impl AsRef<Path>, alpha: f64) -> Result<CentroidSet> {
    let path = path.as_ref();
    let entries = load_embeddings(path)?;
    if entries.is_empty() {
        return Err(Error::data(format!(
            "{}: centroid file has no rows",
            path.display()
        )));
    }
    let set = CentroidSet {
        centroids: entries
            .into_iter()
            .map(|(_, v)| v.into_iter().map(|x| x as f64).collect())
            .collect(),
        alpha,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_1d(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.next_gaussian() * 2.0).collect())
            .collect()
    }

    #[test]
    fn two_distinct_points_both_become_centroids() {
        let points = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let set = kmeanspp_init(&points, 2, &mut rng).unwrap();
            let mut got: Vec<Vec<f64>> = set.centroids.clone();
            got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(got, points);
        }
    }

    #[test]
    fn k1_draws_each_point_eventually() {
        let points = points_1d(&[0.0, 1.0, 2.0, 3.0]);
        let mut seen = HashSet::new();
        for seed in 0..200 {
            let mut rng = SeededRng::new(seed);
            let set = kmeanspp_init(&points, 1, &mut rng).unwrap();
            seen.insert(set.centroids[0][0] as i64);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn collinear_second_pick_follows_distance_squared() {
        // given first pick 0, the second is 10 with probability 100/101
        let points = points_1d(&[0.0, 1.0, 10.0]);
        let trials = 2000usize;
        let mut conditioned = 0usize;
        let mut picked_ten = 0usize;
        let root = SeededRng::new(42);
        for t in 0..trials {
            let mut rng = root.derive(t as u64);
            let set = kmeanspp_init(&points, 2, &mut rng).unwrap();
            if set.centroids[0][0] == 0.0 {
                conditioned += 1;
                if set.centroids[1][0] == 10.0 {
                    picked_ten += 1;
                }
            }
        }
        assert!(conditioned > 400, "conditioned {conditioned}");
        let p = 100.0 / 101.0;
        let share = picked_ten as f64 / conditioned as f64;
        let sigma = (p * (1.0 - p) / conditioned as f64).sqrt();
        assert!(
            (share - p).abs() < 3.0 * sigma + 1e-9,
            "share {share}, expected {p} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn k_beyond_distinct_points_errors() {
        let points = points_1d(&[1.0, 1.0, 2.0]);
        let mut rng = SeededRng::new(0);
        let err = kmeanspp_init(&points, 3, &mut rng).unwrap_err();
        assert!(err.to_string().contains("distinct"), "{err}");
        assert!(kmeanspp_init(&points, 2, &mut rng).is_ok());
    }

    #[test]
    fn assign_known_labels() {
        let points = points_1d(&[0.0, 1.0, 9.0]);
        let centroids = CentroidSet {
            centroids: points_1d(&[0.0, 10.0]),
            alpha: 0.9,
        };
        let a = assign(&points, &centroids).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1]);
        assert_eq!(a.distances, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn assign_tie_goes_to_lowest_index() {
        let points = points_1d(&[5.0]);
        let centroids = CentroidSet {
            centroids: points_1d(&[0.0, 10.0]),
            alpha: 0.9,
        };
        let a = assign(&points, &centroids).unwrap();
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn assign_matches_brute_force() {
        let points = random_points(50, 3, 7);
        let centroids = CentroidSet {
            centroids: random_points(4, 3, 8),
            alpha: 0.5,
        };
        let a = assign(&points, &centroids).unwrap();
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            assert_eq!(a.labels[i], best);
            assert_eq!(a.distances[i], best_d);
        }
    }

    #[test]
    fn assign_dim_mismatch_is_shape_error() {
        let points = vec![vec![1.0, 2.0]];
        let centroids = CentroidSet {
            centroids: points_1d(&[0.0]),
            alpha: 0.9,
        };
        assert_eq!(assign(&points, &centroids).unwrap_err().kind(), "shape");
    }

    #[test]
    fn ema_formula_endpoints() {
        let points = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        let assignment = Assignment {
            labels: vec![0, 0],
            distances: vec![0.0, 0.0],
        };
        let at = |alpha: f64| {
            let set = CentroidSet {
                centroids: vec![vec![0.0, 0.0]],
                alpha,
            };
            ema_update(&set, &points, &assignment).unwrap().centroids[0].clone()
        };
        assert_eq!(at(0.5), vec![1.0, 1.0]);
        assert_eq!(at(0.0), vec![2.0, 2.0]);
        assert_eq!(at(1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn ema_hand_value() {
        let set = CentroidSet {
            centroids: vec![vec![1.0]],
            alpha: 0.9,
        };
        let points = points_1d(&[3.0, 5.0]);
        let assignment = Assignment {
            labels: vec![0, 0],
            distances: vec![4.0, 16.0],
        };
        let updated = ema_update(&set, &points, &assignment).unwrap();
        assert!((updated.centroids[0][0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn ema_empty_cluster_keeps_old_centroid() {
        let set = CentroidSet {
            centroids: vec![vec![0.0], vec![100.0]],
            alpha: 0.5,
        };
        let points = points_1d(&[1.0]);
        let assignment = Assignment {
            labels: vec![0],
            distances: vec![1.0],
        };
        let updated = ema_update(&set, &points, &assignment).unwrap();
        assert_eq!(updated.centroids[1], vec![100.0]);
    }

    #[test]
    fn lloyd_step_bitwise_on_integer_inputs() {
        let points = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![8.0, 0.0]];
        let set = CentroidSet {
            centroids: vec![vec![2.0, 5.0], vec![8.0, 1.0]],
            alpha: 0.0,
        };
        let assignment = assign(&points, &set).unwrap();
        assert_eq!(assignment.labels, vec![0, 0, 1]);
        let updated = ema_update(&set, &points, &assignment).unwrap();
        assert_eq!(updated.centroids[0], vec![2.0, 4.0]);
        assert_eq!(updated.centroids[1], vec![8.0, 0.0]);
    }

    #[test]
    fn lloyd_step_never_increases_cost() {
        for seed in 0..20u64 {
            let points = random_points(40, 2, seed);
            let mut rng = SeededRng::new(1000 + seed);
            let mut set = kmeanspp_init(&points, 4, &mut rng).unwrap();
            set.alpha = 0.0;
            let assignment = assign(&points, &set).unwrap();
            let before: f64 = assignment.distances.iter().sum();
            let updated = ema_update(&set, &points, &assignment).unwrap();
            // cost under the previous assignment with the new centroids
            let after: f64 = points
                .iter()
                .zip(&assignment.labels)
                .map(|(p, &l)| sq_dist(p, &updated.centroids[l]))
                .sum();
            assert!(after <= before + 1e-9, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn distinct_locations_are_a_fixed_point() {
        let points = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let mut rng = SeededRng::new(5);
        let (set, assignment) =
            run_online_kmeans(&points, 3, 0.0, 2, 1, &mut rng).unwrap();
        let mut got = set.centroids.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = points.clone();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, expected);
        assert_eq!(assignment.distances, vec![0.0, 0.0, 0.0]);
        let mut labels = assignment.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn planted_gaussians_recovered() {
        let mut rng = SeededRng::new(99);
        let means = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (gi, mean) in means.iter().enumerate() {
            for _ in 0..100 {
                points.push(vec![
                    mean[0] + rng.next_gaussian(),
                    mean[1] + rng.next_gaussian(),
                ]);
                truth.push(format!("g{gi}"));
            }
        }
        let mut km_rng = SeededRng::new(7);
        let (_, assignment) = run_online_kmeans(
            &points,
            3,
            DEFAULT_EMA_ALPHA,
            DEFAULT_BATCH_SIZE,
            DEFAULT_EPOCHS,
            &mut km_rng,
        )
        .unwrap();
        let matched = match_clusters_to_groups(&assignment, &truth).unwrap();
        assert!(matched.purity >= 0.95, "purity {}", matched.purity);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let points = random_points(30, 2, 3);
        let mut rng_a = SeededRng::new(8);
        let init = kmeanspp_init(&points, 3, &mut rng_a).unwrap();
        let mut rng_b = SeededRng::new(8);
        let (set, assignment) = run_online_kmeans(&points, 3, 0.9, 10, 0, &mut rng_b).unwrap();
        assert_eq!(set.centroids, init.centroids);
        assert_eq!(assignment, assign(&points, &set).unwrap());
    }

    #[test]
    fn online_kmeans_deterministic() {
        let points = random_points(80, 3, 17);
        let mut rng_a = SeededRng::new(4);
        let mut rng_b = SeededRng::new(4);
        let a = run_online_kmeans(&points, 4, 0.8, 16, 5, &mut rng_a).unwrap();
        let b = run_online_kmeans(&points, 4, 0.8, 16, 5, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_partition_has_purity_one() {
        let assignment = Assignment {
            labels: vec![0, 0, 1, 1],
            distances: vec![0.0; 4],
        };
        let labels = vec!["a".to_string(), "a".into(), "b".into(), "b".into()];
        let matched = match_clusters_to_groups(&assignment, &labels).unwrap();
        assert_eq!(matched.purity, 1.0);
        assert_eq!(matched.majority[&0], "a");
        assert_eq!(matched.majority[&1], "b");
    }

    #[test]
    fn majority_counts_by_hand() {
        let assignment = Assignment {
            labels: vec![0, 0, 0, 0],
            distances: vec![0.0; 4],
        };
        let labels = vec!["a".to_string(), "a".into(), "a".into(), "b".into()];
        let matched = match_clusters_to_groups(&assignment, &labels).unwrap();
        assert_eq!(matched.majority[&0], "a");
        assert_eq!(matched.purity, 0.75);
    }

    #[test]
    fn single_cluster_two_equal_groups() {
        let assignment = Assignment {
            labels: vec![0, 0, 0, 0],
            distances: vec![0.0; 4],
        };
        let labels = vec!["b".to_string(), "a".into(), "b".into(), "a".into()];
        let matched = match_clusters_to_groups(&assignment, &labels).unwrap();
        // tie between a and b resolves to the lexicographically smallest
        assert_eq!(matched.majority[&0], "a");
        assert_eq!(matched.purity, 0.5);
    }

    #[test]
    fn match_length_mismatch_errors() {
        let assignment = Assignment {
            labels: vec![0],
            distances: vec![0.0],
        };
        let err = match_clusters_to_groups(&assignment, &[]).unwrap_err();
        assert_eq!(err.kind(), "shape");
    }

    #[test]
    fn centroid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centroids.emb");
        let set = CentroidSet {
            centroids: vec![vec![1.5, -2.25], vec![0.125, 3.0]],
            alpha: 0.7,
        };
        save_centroids(&path, &set).unwrap();
        let loaded = load_centroids(&path, 0.7).unwrap();
        // the chosen values are exact in f32, so the round trip is exact
        assert_eq!(loaded, set);
    }
}
