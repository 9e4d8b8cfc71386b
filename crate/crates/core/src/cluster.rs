//! Hierarchical k-means over trajectory embeddings: pseudo labels,
//! prototypes and concentration (density) estimates per level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Requested cluster count per hierarchy level.
    pub levels: Vec<usize>,
    pub max_iters: usize,
    pub restarts: usize,
    /// Smoothing factor in the density denominator.
    pub alpha: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            levels: vec![20, 50, 100],
            max_iters: 100,
            restarts: 3,
            alpha: 10.0,
        }
    }
}

impl ClusterConfig {
    /// Coarser hierarchy and a single restart for small runs.
    pub fn desk() -> Self {
        Self {
            levels: vec![10, 20, 40],
            max_iters: 30,
            restarts: 1,
            alpha: 10.0,
        }
    }

    /// Level sizes actually used for `n` samples: `max(2, min(N_m, n / 5))`.
    pub fn effective_levels(&self, n: usize) -> Vec<usize> {
        self.levels
            .iter()
            .map(|&k| k.min(n / 5).max(2).min(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("levels", "at least one level is required"));
        }
        if self.levels.iter().any(|&k| k < 2) {
            return Err(Error::config("levels", "every level needs at least 2 clusters"));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::config("restarts/max_iters", "must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct KMeansResult<T> {
    pub centroids: Tensor<T>,
    pub assignments: Vec<usize>,
    pub inertia: T,
    /// Inertia after every Lloyd update of the winning restart.
    pub history: Vec<T>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Squared distances from every row of `x` to every row of `c` via
/// `|x|^2 + |c|^2 - 2 x.c`; used only to pick the nearest centroid.
fn all_sq_dists<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>) -> Vec<T> {
    let (n, d, k) = (x.rows(), x.cols(), c.rows());
    let mut cross = vec![T::zero(); n * k];
    T::gemm(
        n,
        d,
        k,
        T::lit(-2.0),
        x.data(),
        d as isize,
        1,
        c.data(),
        1,
        d as isize,
        T::zero(),
        &mut cross,
        k as isize,
        1,
    );
    let cn: Vec<T> = (0..k).map(|j| c.row(j).iter().map(|&v| v * v).sum()).collect();
    for i in 0..n {
        let xn: T = x.row(i).iter().map(|&v| v * v).sum();
        for j in 0..k {
            cross[i * k + j] += xn + cn[j];
        }
    }
    cross
}

fn assign<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, out: &mut [usize]) -> bool {
    let k = c.rows();
    let d2 = all_sq_dists(x, c);
    let mut changed = false;
    for (i, slot) in out.iter_mut().enumerate() {
        let row = &d2[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] < row[best] {
                best = j;
            }
        }
        if *slot != best {
            *slot = best;
            changed = true;
        }
    }
    changed
}

fn inertia_of<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, a: &[usize]) -> T {
    a.iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(x.row(i), c.row(j)))
        .sum()
}

fn kmeans_pp<T: Scalar, R: Rng>(x: &Tensor<T>, k: usize, rng: &mut R) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut c = Tensor::zeros(&[k, d]);
    let first = rng.random_range(0..n);
    c.row_mut(0).copy_from_slice(x.row(first));
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), c.row(0)).to_f64_lossy())
        .collect();
    for j in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        c.row_mut(j).copy_from_slice(x.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            let dn = sq_dist(x.row(i), c.row(j)).to_f64_lossy();
            if dn < *b {
                *b = dn;
            }
        }
    }
    c
}

fn lloyd<T: Scalar>(x: &Tensor<T>, mut c: Tensor<T>, max_iters: usize) -> KMeansResult<T> {
    let (n, d, k) = (x.rows(), x.cols(), c.rows());
    let mut a = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let changed = assign(x, &c, &mut a);
        if !changed && !history.is_empty() {
            break;
        }
        let mut sums = Tensor::<T>::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for (i, &j) in a.iter().enumerate() {
            counts[j] += 1;
            for (s, &v) in sums.row_mut(j).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let cnt = T::from_usize_lossy(counts[j]);
                for (cv, &s) in c.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *cv = s / cnt;
                }
            }
        }
        // Empty clusters move onto the point farthest from its own centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&p, &q| {
                        sq_dist(x.row(p), c.row(a[p]))
                            .partial_cmp(&sq_dist(x.row(q), c.row(a[q])))
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("n >= 1");
                let row = x.row(far).to_vec();
                c.row_mut(j).copy_from_slice(&row);
            }
        }
        history.push(inertia_of(x, &c, &a));
    }
    let inertia = inertia_of(x, &c, &a);
    KMeansResult {
        centroids: c,
        assignments: a,
        inertia,
        history,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia restart wins.
/// Restart `r` draws from a generator seeded with `(seed, r)`.
pub fn kmeans<T: Scalar>(
    features: &Tensor<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansResult<T>> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::config("k", format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    if !features.is_finite() {
        return Err(Error::Numeric("kmeans input contains non-finite values".into()));
    }
    let mut best: Option<KMeansResult<T>> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let init = kmeans_pp(features, k, &mut rng);
        let res = lloyd(features, init, max_iters.max(1));
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Pre-clamp density `sum_z |v_z - c| / (Z ln(Z + alpha))`.
pub fn density<T: Scalar>(members: &[&[T]], prototype: &[T], alpha: T) -> T {
    let z = members.len();
    if z == 0 {
        return T::zero();
    }
    let total: T = members.iter().map(|m| sq_dist(m, prototype).sqrt()).sum();
    let zt = T::from_usize_lossy(z);
    total / (zt * (zt + alpha).ln())
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> T {
    let mut v: Vec<T> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if v.is_empty() {
        return T::zero();
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Clamps one level's densities into its `[p10, p90]` range. A non-positive
/// lower bound (many singleton clusters) is lifted to the smallest positive
/// density, or 1 when every cluster is degenerate.
pub fn clamp_densities<T: Scalar>(raw: &[T]) -> Vec<T> {
    let mut lo = percentile(raw, 10.0);
    let mut hi = percentile(raw, 90.0);
    if lo <= T::zero() {
        lo = raw
            .iter()
            .copied()
            .filter(|&d| d > T::zero())
            .fold(None, |m: Option<T>, d| Some(m.map_or(d, |m| m.min(d))))
            .unwrap_or(T::one());
    }
    if hi < lo {
        hi = lo;
    }
    raw.iter().map(|&d| d.max(lo).min(hi)).collect()
}

/// Mean feature per cluster; empty clusters get a zero prototype.
pub fn prototypes<T: Scalar>(features: &Tensor<T>, assignments: &[usize], k: usize) -> (Tensor<T>, Vec<usize>) {
    let d = features.cols();
    let mut sums = Tensor::zeros(&[k, d]);
    let mut counts = vec![0usize; k];
    for (i, &j) in assignments.iter().enumerate() {
        counts[j] += 1;
        for (s, &v) in sums.row_mut(j).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (j, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            let c = T::from_usize_lossy(cnt);
            for s in sums.row_mut(j) {
                *s /= c;
            }
        }
    }
    (sums, counts)
}

/// Raw (pre-clamp) densities of every cluster at one level.
pub fn level_densities<T: Scalar>(
    features: &Tensor<T>,
    assignments: &[usize],
    protos: &Tensor<T>,
    alpha: T,
) -> Vec<T> {
    let k = protos.rows();
    let mut members: Vec<Vec<&[T]>> = vec![Vec::new(); k];
    for (i, &j) in assignments.iter().enumerate() {
        members[j].push(features.row(i));
    }
    (0..k)
        .map(|j| density(&members[j], protos.row(j), alpha))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ClusterLevel<T> {
    pub n_clusters: usize,
    pub centroids: Tensor<T>,
    /// Cluster per sample, aligned with [`ClusterModel::sample_ids`].
    pub assignments: Vec<usize>,
    pub prototypes: Tensor<T>,
    pub counts: Vec<usize>,
    pub raw_densities: Vec<T>,
    pub densities: Vec<T>,
    pub inertia: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ClusterModel<T> {
    pub sample_ids: Vec<u64>,
    pub levels: Vec<ClusterLevel<T>>,
}

impl<T: Scalar> ClusterModel<T> {
    pub fn finest_level(&self) -> Option<usize> {
        self.levels
            .iter()
            .enumerate()
            .max_by_key(|(i, l)| (l.n_clusters, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
    }

    /// `sample_id,level,cluster` rows, level-major.
    pub fn assignments_csv(&self) -> String {
        let mut s = String::from("sample_id,level,cluster\n");
        for (m, level) in self.levels.iter().enumerate() {
            for (id, c) in self.sample_ids.iter().zip(&level.assignments) {
                s.push_str(&format!("{id},{m},{c}\n"));
            }
        }
        s
    }
}

/// Seed for a level depends on its cluster count only, so permuting the
/// level list leaves every level's result unchanged.
fn level_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Independent k-means per level, with prototypes and clamped densities.
pub fn build_hierarchy<T: Scalar>(
    features: &Tensor<T>,
    sample_ids: &[u64],
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterModel<T>> {
    cfg.validate()?;
    let n = features.rows();
    if sample_ids.len() != n {
        return Err(Error::Contract(format!(
            "{} sample ids for {n} feature rows",
            sample_ids.len()
        )));
    }
    let alpha = T::lit(cfg.alpha);
    let mut levels = Vec::new();
    for k in cfg.effective_levels(n) {
        let km = kmeans(features, k, level_seed(seed, k), cfg.max_iters, cfg.restarts)?;
        let (protos, counts) = prototypes(features, &km.assignments, k);
        let raw = level_densities(features, &km.assignments, &protos, alpha);
        let densities = clamp_densities(&raw);
        levels.push(ClusterLevel {
            n_clusters: k,
            centroids: km.centroids,
            assignments: km.assignments,
            prototypes: protos,
            counts,
            raw_densities: raw,
            densities,
            inertia: km.inertia,
        });
    }
    Ok(ClusterModel {
        sample_ids: sample_ids.to_vec(),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn k1_gives_global_mean() {
        let x = rows(&[[0.0, 0.0], [2.0, 4.0], [4.0, -1.0]]);
        let r = kmeans(&x, 1, 0, 50, 2).unwrap();
        assert!((r.centroids.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((r.centroids.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let x = rows(&[[0.0, 0.0], [2.0, 4.0], [4.0, -1.0], [9.0, 9.0]]);
        let r = kmeans(&x, 4, 1, 50, 3).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn k_above_n_is_config_error() {
        let x = rows(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&x, 2, 0, 10, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn density_values() {
        let proto = [0.0f64, 0.0];
        let single = [[0.0f64, 0.0]];
        let members: Vec<&[f64]> = single.iter().map(|r| r.as_slice()).collect();
        assert_eq!(density(&members, &proto, 10.0), 0.0);

        let ring: Vec<[f64; 2]> = (0..10)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 10.0;
                [a.cos(), a.sin()]
            })
            .collect();
        let members: Vec<&[f64]> = ring.iter().map(|r| r.as_slice()).collect();
        let phi = density(&members, &proto, 10.0);
        assert!((phi - 1.0 / 20f64.ln()).abs() < 1e-12);

        let doubled: Vec<[f64; 2]> = ring.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let members2: Vec<&[f64]> = doubled.iter().map(|r| r.as_slice()).collect();
        assert!((density(&members2, &proto, 10.0) - 2.0 * phi).abs() < 1e-12);
    }

    #[test]
    fn clamp_lifts_singletons() {
        let raw = vec![0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 5.0];
        let c = clamp_densities(&raw);
        assert!(c.iter().all(|&d| d > 0.0));
        assert!(c[9] < 5.0);
    }

    #[test]
    fn effective_levels_scale_down() {
        let cfg = ClusterConfig::default();
        assert_eq!(cfg.effective_levels(200), vec![20, 40, 40]);
        assert_eq!(cfg.effective_levels(10_000), vec![20, 50, 100]);
    }
}
