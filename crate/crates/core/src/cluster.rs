//! Robust K-means over raw projection vectors, rejection of far-away
//! projections and per-cluster averaging.
//!
//! Distances are `l_r` quasi-norms. With `r = 1` the centroid minimizing the
//! within-cluster cost is the element-wise median, which keeps centroids from
//! being dragged by the few foreign projections that land in a cluster.

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{canonicalize_angle, Projection, ProjectionSet, RngSeed};

/// Cluster membership of one projection. Discarded projections remember the
/// cluster they were assigned to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Member(usize),
    Discarded(usize),
}

impl Assignment {
    pub fn cluster(self) -> usize {
        match self {
            Assignment::Member(j) | Assignment::Discarded(j) => j,
        }
    }

    pub fn is_discarded(self) -> bool {
        matches!(self, Assignment::Discarded(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<Assignment>,
    pub centroids: Vec<Projection>,
    pub discarded_count: usize,
    /// Clustering objective after every Lloyd round.
    pub objective_trace: Vec<f64>,
}

impl Clustering {
    pub fn members(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().enumerate().filter(move |(_, a)| **a == Assignment::Member(j)).map(|(i, _)| i)
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for a in &self.assignments {
            if let Assignment::Member(j) = a {
                counts[*j] += 1;
            }
        }
        counts
    }
}

/// Default number of clusters: one per hundred projections.
pub fn default_k(count: usize) -> usize {
    (count / 100).max(1)
}

/// `l_r` distance; for `r = 1` this is the `l_1` norm of the difference.
pub fn lr_distance(a: &[f64], b: &[f64], r: f64) -> f64 {
    if r == 1.0 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(r)).sum::<f64>().powf(1.0 / r)
    }
}

/// Monotone surrogate of `lr_distance` used for comparisons, with early exit
/// once `bound` is exceeded.
#[inline]
fn lr_cost_bounded(a: &[f64], b: &[f64], r: f64, bound: f64) -> f64 {
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        if r == 1.0 {
            acc += ca.iter().zip(cb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        } else {
            acc += ca.iter().zip(cb).map(|(x, y)| (x - y).abs().powf(r)).sum::<f64>();
        }
        if acc > bound {
            return acc;
        }
    }
    acc
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How initial centroids are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Seeding {
    /// `k` distinct projections drawn uniformly.
    #[default]
    Random,
    /// K-means++ under squared `l_2` distance. Far-away outliers are favoured
    /// as seeds and tend to keep centroids of their own.
    PlusPlus,
}

impl FromStr for Seeding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Seeding::Random),
            "kmeans++" | "plusplus" => Ok(Seeding::PlusPlus),
            other => Err(Error::invalid(format!("unknown seeding `{other}`"))),
        }
    }
}

impl std::fmt::Display for Seeding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Seeding::Random => "random",
            Seeding::PlusPlus => "kmeans++",
        })
    }
}

fn seed_centroids(data: &[&[f64]], k: usize, seeding: Seeding, seed: RngSeed) -> Vec<Vec<f64>> {
    let mut rng = seed.rng();
    if seeding == Seeding::Random {
        return rand::seq::index::sample(&mut rng, data.len(), k).into_iter().map(|i| data[i].to_vec()).collect();
    }
    let n = data.len();
    let first = rng.gen_range(0..n);
    let mut centroids = vec![data[first].to_vec()];
    let mut d2: Vec<f64> = data.par_iter().map(|p| squared_l2(p, data[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = data[pick].to_vec();
        let updated: Vec<f64> = data.par_iter().zip(&d2).map(|(p, &d)| d.min(squared_l2(p, &c))).collect();
        d2 = updated;
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>], r: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = lr_cost_bounded(p, c, r, best.1);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn element_wise_median(data: &[&[f64]], members: &[usize], len: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(members.len());
    (0..len)
        .map(|b| {
            buf.clear();
            buf.extend(members.iter().map(|&i| data[i][b]));
            median_in_place(&mut buf)
        })
        .collect()
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// [`robust_kmeans_with`] using the default seeding.
pub fn robust_kmeans(ps: &ProjectionSet, k: usize, r: f64, iters: usize, seed: RngSeed) -> Result<Clustering> {
    robust_kmeans_with(ps, k, r, iters, Seeding::default(), seed)
}

/// Lloyd iterations with `l_r` assignment and element-wise median centroids.
///
/// Empty clusters are reseeded with the projection farthest from its centroid.
pub fn robust_kmeans_with(
    ps: &ProjectionSet,
    k: usize,
    r: f64,
    iters: usize,
    seeding: Seeding,
    seed: RngSeed,
) -> Result<Clustering> {
    let n = ps.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {n}]")));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("r = {r} must lie in (0, 1]")));
    }
    let len = ps.bins();
    let data: Vec<&[f64]> = ps.projections().iter().map(Projection::bins).collect();
    let mut centroids = seed_centroids(&data, k, seeding, seed);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..iters.max(1) {
        let assigned: Vec<(usize, f64)> = data.par_iter().map(|p| nearest(p, &centroids, r)).collect();
        let changed = assigned.iter().zip(&labels).filter(|((j, _), l)| j != *l).count();
        for (l, (j, _)) in labels.iter_mut().zip(&assigned) {
            *l = *j;
        }
        if changed == 0 {
            break;
        }

        let mut members = vec![Vec::new(); k];
        for (i, &j) in labels.iter().enumerate() {
            members[j].push(i);
        }
        // reseed empty clusters from the worst-fit projections
        while let Some(empty) = members.iter().position(Vec::is_empty) {
            let (far, _) = (0..n)
                .filter(|&i| members[labels[i]].len() > 1)
                .map(|i| (i, lr_distance(data[i], &centroids[labels[i]], r)))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far == usize::MAX {
                break;
            }
            let old = labels[far];
            members[old].retain(|&i| i != far);
            members[empty].push(far);
            labels[far] = empty;
        }
        centroids = members
            .par_iter()
            .enumerate()
            .map(|(j, m)| if m.is_empty() { centroids[j].clone() } else { element_wise_median(&data, m, len) })
            .collect();
        trace.push(objective(&data, &labels, &centroids, r));
    }

    Ok(Clustering {
        k,
        assignments: labels.into_iter().map(Assignment::Member).collect(),
        centroids: centroids.into_iter().map(Projection::from_raw_unchecked).collect(),
        discarded_count: 0,
        objective_trace: trace,
    })
}

fn objective(data: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>], r: f64) -> f64 {
    let per: Vec<f64> = data.par_iter().zip(labels).map(|(p, &j)| lr_distance(p, &centroids[j], r)).collect();
    per.iter().sum()
}

/// Sum over projections of the `l_r` distance to their cluster centroid,
/// counting discarded projections too.
pub fn clustering_objective(ps: &ProjectionSet, c: &Clustering, r: f64) -> f64 {
    let data: Vec<&[f64]> = ps.projections().iter().map(Projection::bins).collect();
    let labels: Vec<usize> = c.assignments.iter().map(|a| a.cluster()).collect();
    let centroids: Vec<Vec<f64>> = c.centroids.iter().map(|p| p.bins().to_vec()).collect();
    objective(&data, &labels, &centroids, r)
}

/// Marks the `round(f_pct% * count)` projections farthest (in `l_2`) from every
/// centroid as discarded. Ties go to the lower index.
pub fn remove_class1(ps: &ProjectionSet, c: &Clustering, f_pct: f64) -> Result<Clustering> {
    if !(0.0..100.0).contains(&f_pct) {
        return Err(Error::invalid(format!("discard percentage {f_pct} must lie in [0, 100)")));
    }
    if ps.len() != c.assignments.len() {
        return Err(Error::invalid("clustering does not match the projection set"));
    }
    let n = ps.len();
    let count = (n as f64 * f_pct / 100.0).round() as usize;
    let dist: Vec<f64> = ps
        .projections()
        .par_iter()
        .map(|p| c.centroids.iter().map(|ctr| squared_l2(p.bins(), ctr.bins())).fold(f64::INFINITY, f64::min))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut out = c.clone();
    for a in &mut out.assignments {
        *a = Assignment::Member(a.cluster());
    }
    for &i in &order[..count] {
        out.assignments[i] = Assignment::Discarded(out.assignments[i].cluster());
    }
    out.discarded_count = count;
    Ok(out)
}

/// Mean of the surviving members of each cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAverages {
    pub projections: Vec<Projection>,
    /// Originating cluster index of each average.
    pub cluster_ids: Vec<usize>,
    pub member_counts: Vec<usize>,
    /// Clusters whose members were all discarded.
    pub dropped: Vec<usize>,
}

pub fn average_clusters(ps: &ProjectionSet, c: &Clustering) -> Result<ClusterAverages> {
    if ps.len() != c.assignments.len() {
        return Err(Error::invalid("clustering does not match the projection set"));
    }
    let len = ps.bins();
    let mut sums = vec![vec![0.0; len]; c.k];
    let mut counts = vec![0usize; c.k];
    for (p, a) in ps.projections().iter().zip(&c.assignments) {
        if let Assignment::Member(j) = *a {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.bins()) {
                *s += v;
            }
        }
    }
    let mut out = ClusterAverages {
        projections: Vec::new(),
        cluster_ids: Vec::new(),
        member_counts: Vec::new(),
        dropped: Vec::new(),
    };
    for (j, (sum, &n)) in sums.into_iter().zip(&counts).enumerate() {
        if n == 0 {
            out.dropped.push(j);
            continue;
        }
        let inv = 1.0 / n as f64;
        out.projections.push(Projection::from_raw_unchecked(sum.into_iter().map(|v| v * inv).collect()));
        out.cluster_ids.push(j);
        out.member_counts.push(n);
    }
    Ok(out)
}

/// Mean of angles on the circle of period pi (doubled-angle circular mean).
pub fn circular_mean_pi(angles: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for a in angles {
        s += (2.0 * a).sin();
        c += (2.0 * a).cos();
        n += 1;
    }
    if n == 0 {
        return None;
    }
    canonicalize_angle(0.5 * s.atan2(c)).ok()
}

fn surviving_truth(ps: &ProjectionSet, c: &Clustering, j: usize) -> Result<Vec<usize>> {
    if ps.truth().is_none() {
        return Err(Error::Unsupported("projection set carries no ground truth".into()));
    }
    if j >= c.k {
        return Err(Error::invalid(format!("cluster {j} out of range")));
    }
    let m: Vec<usize> = c.members(j).collect();
    if m.is_empty() {
        return Err(Error::invalid(format!("cluster {j} has no surviving members")));
    }
    Ok(m)
}

/// Ground-truth angle of a cluster: circular mean (mod pi) of its surviving members.
pub fn cluster_truth_angle(ps: &ProjectionSet, c: &Clustering, j: usize) -> Result<f64> {
    let members = surviving_truth(ps, c, j)?;
    let truth = ps.truth().expect("checked");
    Ok(circular_mean_pi(members.iter().map(|&i| truth[i].angle)).expect("non-empty"))
}

/// Ground-truth shift of a cluster: mean shift of its surviving members.
pub fn cluster_truth_shift(ps: &ProjectionSet, c: &Clustering, j: usize) -> Result<f64> {
    let members = surviving_truth(ps, c, j)?;
    let truth = ps.truth().expect("checked");
    Ok(members.iter().map(|&i| truth[i].shift).sum::<f64>() / members.len() as f64)
}
