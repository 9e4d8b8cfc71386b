//! Displacement metrics, the hardest-sample bucket protocol, FDE CDFs and
//! embedding separation diagnostics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::predictor::{PredictionSet, PredictorParams};
use crate::scalar::Scalar;
use crate::trajdata::{denormalize, Point, TrajectorySample};

fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `(minADE, minFDE)`, each minimized over heads independently.
pub fn min_ade_fde<T: Scalar>(pred: &PredictionSet<T>, gt: &[Point<T>]) -> Result<(T, T)> {
    if pred.heads.is_empty() || gt.is_empty() {
        return Err(Error::Contract("min_ade_fde needs at least one head and one step".into()));
    }
    let mut best_ade = T::infinity();
    let mut best_fde = T::infinity();
    for h in &pred.heads {
        if h.len() != gt.len() {
            return Err(Error::Contract(format!(
                "head of {} steps against ground truth of {}",
                h.len(),
                gt.len()
            )));
        }
        let ade = h.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<T>() / T::from_usize_lossy(gt.len());
        let fde = dist(h[h.len() - 1], gt[gt.len() - 1]);
        if ade < best_ade {
            best_ade = ade;
        }
        if fde < best_fde {
            best_fde = fde;
        }
    }
    Ok((best_ade, best_fde))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SampleMetrics<T> {
    pub sample_id: u64,
    pub min_ade: T,
    pub min_fde: T,
}

/// Per-sample metrics in raw coordinates.
pub fn evaluate_predictions<T: Scalar>(
    samples: &[TrajectorySample<T>],
    preds: &[PredictionSet<T>],
) -> Result<Vec<SampleMetrics<T>>> {
    if samples.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let raw = PredictionSet {
                heads: p.heads.iter().map(|h| denormalize(s, h)).collect(),
            };
            let (min_ade, min_fde) = min_ade_fde(&raw, &s.raw_fut())?;
            Ok(SampleMetrics {
                sample_id: s.sample_id,
                min_ade,
                min_fde,
            })
        })
        .collect()
}

/// Runs the predictor over `samples` in chunks and scores it.
pub fn evaluate_model<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[TrajectorySample<T>],
) -> Result<Vec<SampleMetrics<T>>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&TrajectorySample<T>> = chunk.iter().collect();
        let t_pred = chunk[0].fut.len();
        let preds = params.predict(&refs, t_pred)?;
        out.extend(evaluate_predictions(chunk, &preds)?);
    }
    Ok(out)
}

pub const TOP_PERCENTS: [usize; 5] = [1, 2, 3, 4, 5];

/// Sample ids per bucket, derived from baseline scores only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketIndices {
    /// All ids ranked by baseline score, hardest first (ties by id).
    pub ranked: Vec<u64>,
    /// `top[p]` holds the `ceil((p + 1) n / 100)` hardest ids.
    pub top: [Vec<u64>; 5],
    pub rest: Vec<u64>,
}

/// Ranks samples by a per-sample baseline score, largest first.
pub fn bucket_indices<T: Scalar>(baseline: &[(u64, T)]) -> Result<BucketIndices> {
    let mut seen = HashSet::with_capacity(baseline.len());
    for (id, v) in baseline {
        if !seen.insert(*id) {
            return Err(Error::Contract(format!("sample {id} appears twice in baseline scores")));
        }
        if v.is_nan() {
            return Err(Error::Numeric(format!("baseline score of sample {id} is NaN")));
        }
    }
    let mut ranked: Vec<(T, u64)> = baseline.iter().map(|&(id, v)| (v, id)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("no NaN").then(a.1.cmp(&b.1)));
    let ranked: Vec<u64> = ranked.into_iter().map(|(_, id)| id).collect();
    let n = ranked.len();
    let take = |p: usize| ranked[..(p * n).div_ceil(100)].to_vec();
    let top = TOP_PERCENTS.map(take);
    let rest = ranked[top[4].len()..].to_vec();
    Ok(BucketIndices { ranked, top, rest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub name: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub n_samples: usize,
}

/// Mean metrics per bucket: top1..top5, rest, all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub buckets: Vec<BucketStats>,
}

pub const BUCKET_NAMES: [&str; 7] = ["top1", "top2", "top3", "top4", "top5", "rest", "all"];

impl BucketReport {
    pub fn get(&self, name: &str) -> Option<&BucketStats> {
        self.buckets.iter().find(|b| b.name == name)
    }

    pub fn top5_fde(&self) -> f64 {
        self.get("top5").map_or(f64::NAN, |b| b.min_fde)
    }

    pub fn all_ade(&self) -> f64 {
        self.get("all").map_or(f64::NAN, |b| b.min_ade)
    }
}

/// Divides the test samples by the baseline's scores and reports the
/// evaluated model's mean metrics per bucket.
pub fn bucket_by_baseline<T: Scalar>(
    baseline: &[(u64, T)],
    model: &[SampleMetrics<T>],
) -> Result<BucketReport> {
    let idx = bucket_indices(baseline)?;
    let by_id: HashMap<u64, &SampleMetrics<T>> = model.iter().map(|m| (m.sample_id, m)).collect();
    if by_id.len() != model.len() || model.len() != baseline.len() || baseline.iter().any(|(id, _)| !by_id.contains_key(id)) {
        return Err(Error::Contract("baseline and model cover different sample sets".into()));
    }
    let stats = |name: &str, ids: &[u64]| {
        let n = ids.len();
        let (mut a, mut f) = (0.0, 0.0);
        for id in ids {
            let m = by_id[id];
            a += m.min_ade.to_f64_lossy();
            f += m.min_fde.to_f64_lossy();
        }
        let d = if n == 0 { f64::NAN } else { n as f64 };
        BucketStats {
            name: name.to_string(),
            min_ade: a / d,
            min_fde: f / d,
            n_samples: n,
        }
    };
    let mut buckets: Vec<BucketStats> = idx
        .top
        .iter()
        .zip(BUCKET_NAMES)
        .map(|(ids, name)| stats(name, ids))
        .collect();
    buckets.push(stats("rest", &idx.rest));
    buckets.push(stats("all", &idx.ranked));
    Ok(BucketReport { buckets })
}

/// Baseline scores (per-sample minFDE) in the form the bucketing expects.
pub fn fde_scores<T: Scalar>(metrics: &[SampleMetrics<T>]) -> Vec<(u64, T)> {
    metrics.iter().map(|m| (m.sample_id, m.min_fde)).collect()
}

/// Table with one row per method and `ADE/FDE` cells.
pub fn report_csv(rows: &[(&str, &BucketReport)]) -> String {
    let mut s = String::from("method,Top 1%,Top 2%,Top 3%,Top 4%,Top 5%,Rest,All\n");
    for (name, r) in rows {
        s.push_str(name);
        for b in &r.buckets {
            let _ = write!(s, ",{:.3}/{:.3}", b.min_ade, b.min_fde);
        }
        s.push('\n');
    }
    s
}

/// `model - baseline` per bucket.
pub fn diff_csv(baseline: &BucketReport, model: &BucketReport) -> String {
    let mut s = String::from("bucket,n,baseline_ade,baseline_fde,model_ade,model_fde,delta_ade,delta_fde\n");
    for (b, m) in baseline.buckets.iter().zip(&model.buckets) {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:+.4},{:+.4}",
            b.name,
            b.n_samples,
            b.min_ade,
            b.min_fde,
            m.min_ade,
            m.min_fde,
            m.min_ade - b.min_ade,
            m.min_fde - b.min_fde
        );
    }
    s
}

/// Empirical CDF sampled at `n_bins` equally spaced values in `[0, max]`.
pub fn fde_cdf<T: Scalar>(fdes: &[T], n_bins: usize) -> Result<Vec<(f64, f64)>> {
    if fdes.is_empty() {
        return Err(Error::Contract("fde_cdf needs at least one value".into()));
    }
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be at least 1"));
    }
    let mut sorted: Vec<f64> = fdes.iter().map(|v| v.to_f64_lossy()).collect();
    if sorted.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN FDE".into()));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let max = sorted[sorted.len() - 1];
    let n = sorted.len() as f64;
    Ok((0..n_bins)
        .map(|i| {
            let x = if n_bins == 1 || i == n_bins - 1 {
                max
            } else {
                max * i as f64 / (n_bins - 1) as f64
            };
            let count = sorted.partition_point(|&v| v <= x);
            (x, count as f64 / n)
        })
        .collect())
}

/// Two whitespace-separated columns, `fde cdf`.
pub fn cdf_table(cdf: &[(f64, f64)]) -> String {
    let mut s = String::from("# fde cdf\n");
    for (x, y) in cdf {
        let _ = writeln!(s, "{x:.6} {y:.6}");
    }
    s
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterSeparation {
    pub label: usize,
    pub n: usize,
    /// Mean distance of members to their cluster mean.
    pub intra_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationStats {
    pub clusters: Vec<ClusterSeparation>,
    /// Mean pairwise distance between cluster means.
    pub inter_mean: f64,
    /// Mean of the per-cluster intra distances.
    pub intra_mean: f64,
    /// `inter_mean / intra_mean`; `+inf` when every cluster is a point.
    #[serde(serialize_with = "ser_ratio")]
    pub ratio: f64,
    pub silhouette: f64,
}

fn row_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over all points (singleton clusters score 0).
pub fn silhouette<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    let distinct: Vec<usize> = {
        let mut v: Vec<usize> = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if distinct.len() < 2 {
        return Err(Error::Contract("silhouette needs at least 2 distinct labels".into()));
    }
    let slot: HashMap<usize, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut counts = vec![0usize; distinct.len()];
    for l in labels {
        counts[slot[l]] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; distinct.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot[&labels[j]]] += row_dist(features.row(i), features.row(j));
            }
        }
        let own = slot[&labels[i]];
        if counts[own] < 2 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..distinct.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

pub fn separation_stats<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<SeparationStats> {
    let silhouette = silhouette(features, labels)?;
    let d = features.cols();
    let mut groups: Vec<usize> = labels.to_vec();
    groups.sort_unstable();
    groups.dedup();
    let mut means = Vec::with_capacity(groups.len());
    let mut clusters = Vec::with_capacity(groups.len());
    for &g in &groups {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
        let mut mean = vec![T::zero(); d];
        for &r in &rows {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        let cnt = T::from_usize_lossy(rows.len());
        mean.iter_mut().for_each(|m| *m /= cnt);
        let intra = rows.iter().map(|&r| row_dist(features.row(r), &mean)).sum::<f64>() / rows.len() as f64;
        clusters.push(ClusterSeparation {
            label: g,
            n: rows.len(),
            intra_mean: intra,
        });
        means.push(mean);
    }
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            inter += row_dist(&means[a], &means[b]);
            pairs += 1;
        }
    }
    let inter_mean = inter / pairs as f64;
    let intra_mean = clusters.iter().map(|c| c.intra_mean).sum::<f64>() / clusters.len() as f64;
    let ratio = if intra_mean > 0.0 {
        inter_mean / intra_mean
    } else {
        f64::INFINITY
    };
    Ok(SeparationStats {
        clusters,
        inter_mean,
        intra_mean,
        ratio,
        silhouette,
    })
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract("labelings differ in length".into()));
    }
    let n = a.len();
    let comb2 = |x: usize| (x as f64) * (x as f64 - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let sa: f64 = ra.values().map(|&v| comb2(v)).sum();
    let sb: f64 = rb.values().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Projection onto the top two principal axes (power iteration with
/// deflation from a fixed start), `[n x 2]`.
pub fn pca_2d<T: Scalar>(features: &Tensor<T>) -> Tensor<f64> {
    let (n, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|r| features.row(r).iter().zip(&mean).map(|(v, m)| v.to_f64_lossy() - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            for a in &axes {
                let p: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        axes.push(v);
    }
    let mut out = Tensor::zeros(&[n, 2]);
    for (r, row) in centered.iter().enumerate() {
        for (c, a) in axes.iter().enumerate() {
            out.set(r, c, row.iter().zip(a).map(|(x, y)| x * y).sum());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_head_gives_zero() {
        let gt = vec![[1.0f64, 2.0], [3.0, 4.0]];
        let pred = PredictionSet {
            heads: vec![vec![[0.0, 0.0], [0.0, 0.0]], gt.clone()],
        };
        assert_eq!(min_ade_fde(&pred, &gt).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offset() {
        let gt = vec![[0.0f64, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let pred = PredictionSet {
            heads: vec![gt.iter().map(|p| [p[0], p[1] + 0.7]).collect()],
        };
        let (a, f) = min_ade_fde(&pred, &gt).unwrap();
        assert!((a - 0.7).abs() < 1e-12 && (f - 0.7).abs() < 1e-12);
    }

    #[test]
    fn top1_of_100_is_one_sample() {
        let scores: Vec<(u64, f64)> = (0..100).map(|i| (i, i as f64)).collect();
        let idx = bucket_indices(&scores).unwrap();
        assert_eq!(idx.top[0], vec![99]);
        assert_eq!(idx.top[4].len(), 5);
        assert_eq!(idx.rest.len(), 95);
    }

    #[test]
    fn identical_features_infinite_ratio() {
        let f = Tensor::<f64>::zeros(&[4, 3]);
        let s = separation_stats(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.intra_mean, 0.0);
        assert!(s.ratio.is_infinite());
        assert!(serde_json::to_string(&s).unwrap().contains("\"inf\""));
    }

    #[test]
    fn single_label_rejected() {
        let f = Tensor::<f64>::zeros(&[3, 2]);
        assert!(separation_stats(&f, &[1, 1, 1]).is_err());
    }

    #[test]
    fn ari_identical_and_permuted() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [5, 5, 3, 3, 9, 9];
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
