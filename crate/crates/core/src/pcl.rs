//! Prototypical contrastive loss over projected embeddings, driven by fixed
//! pseudo labels and a momentum feature bank.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{clamp_densities, level_densities, prototypes, ClusterModel};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PCLConfig {
    /// Instance-term temperature.
    pub tau: f64,
    /// EMA coefficient of the feature bank.
    pub momentum_beta: f64,
    /// Epochs between prototype/density refreshes.
    pub refresh_every: usize,
    pub alpha: f64,
}

impl Default for PCLConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            momentum_beta: 0.9,
            refresh_every: 1,
            alpha: 10.0,
        }
    }
}

impl PCLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::config("momentum_beta", "must lie in [0, 1)"));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("refresh_every", "must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Prototypes and densities of one clustering level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ProtoLevel<T> {
    pub prototypes: Tensor<T>,
    pub densities: Vec<T>,
}

/// Instance-wise term. For every active instance `i` with at least one
/// active same-cluster partner `i+ != i` in the batch:
/// `-(1/N_i) sum_{i+} log( exp(v_i.v_{i+}/tau) / sum_{j=1..r} exp(v_i.v_j/tau) )`.
/// The denominator runs over the whole batch, `j = i` and inactive rows
/// included. Summed over instances.
pub fn loss_instance<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    cluster_ids: &[usize],
    active: &[bool],
    tau: T,
) -> Result<Var> {
    let r = tape.value(feats).rows();
    if r < 2 {
        return Err(Error::Contract(format!("instance term needs a batch of at least 2, got {r}")));
    }
    if cluster_ids.len() != r || active.len() != r {
        return Err(Error::Contract(format!(
            "batch of {r} rows with {} cluster ids and {} gate flags",
            cluster_ids.len(),
            active.len()
        )));
    }
    let mut pos_w = Tensor::zeros(&[r, r]);
    let mut lse_w = vec![T::zero(); r];
    for i in 0..r {
        if !active[i] {
            continue;
        }
        let positives: Vec<usize> = (0..r)
            .filter(|&j| j != i && active[j] && cluster_ids[j] == cluster_ids[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let w = T::one() / T::from_usize_lossy(positives.len());
        for j in positives {
            pos_w.set(i, j, w);
        }
        lse_w[i] = T::one();
    }
    let sim = tape.matmul_nt(feats, feats)?;
    let logits = tape.scale(sim, T::one() / tau);
    let lse = tape.logsumexp_rows(logits);
    let denom = tape.weighted_sum(lse, Tensor::vector(lse_w))?;
    let numer = tape.weighted_sum(logits, pos_w)?;
    tape.sub(denom, numer)
}

/// Instance-prototype term:
/// `-(1/M) sum_i sum_m log( exp(v_i.c_s/phi_s) / sum_j exp(v_i.c_j/phi_j) )`
/// over active instances. `assignments[m][i]` is row `i`'s cluster at level `m`.
pub fn loss_proto<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    assignments: &[Vec<usize>],
    levels: &[ProtoLevel<T>],
    active: &[bool],
) -> Result<Var> {
    let r = tape.value(feats).rows();
    if assignments.len() != levels.len() {
        return Err(Error::Contract(format!(
            "{} assignment levels for {} prototype levels",
            assignments.len(),
            levels.len()
        )));
    }
    if active.len() != r {
        return Err(Error::Contract("gate flags do not match batch".into()));
    }
    if levels.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let m_inv = T::one() / T::from_usize_lossy(levels.len());
    let mut total: Option<Var> = None;
    for (assign, level) in assignments.iter().zip(levels) {
        let k = level.prototypes.rows();
        if assign.len() != r {
            return Err(Error::Contract(format!(
                "missing assignment: {} of {r} batch rows assigned",
                assign.len()
            )));
        }
        if level.densities.len() != k {
            return Err(Error::Contract("density count differs from prototype count".into()));
        }
        if let Some(&bad) = assign.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("cluster {bad} out of range for {k} prototypes")));
        }
        let protos = tape.constant(level.prototypes.clone());
        let dots = tape.matmul_nt(feats, protos)?;
        let mut inv_phi = Tensor::zeros(&[r, k]);
        for i in 0..r {
            for (j, &phi) in level.densities.iter().enumerate() {
                inv_phi.set(i, j, T::one() / phi);
            }
        }
        let logits = tape.mul_const(dots, inv_phi)?;
        let lse = tape.logsumexp_rows(logits);
        let lse_w: Vec<T> = active
            .iter()
            .map(|&a| if a { T::one() } else { T::zero() })
            .collect();
        let mut pick = Tensor::zeros(&[r, k]);
        for i in 0..r {
            if active[i] {
                pick.set(i, assign[i], T::one());
            }
        }
        let denom = tape.weighted_sum(lse, Tensor::vector(lse_w))?;
        let numer = tape.weighted_sum(logits, pick)?;
        let level_loss = tape.sub(denom, numer)?;
        total = Some(match total {
            None => level_loss,
            Some(t) => tape.add(t, level_loss)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty levels"), m_inv))
}

/// Pseudo-label information for one batch.
#[derive(Clone, Debug)]
pub struct PclBatch {
    /// Cluster ids at the finest level (positives for the instance term).
    pub finest: Vec<usize>,
    /// Per level, per row cluster ids.
    pub levels: Vec<Vec<usize>>,
    /// Gate flags; inactive rows only serve as negatives.
    pub active: Vec<bool>,
}

/// Full contrastive loss: instance term plus prototype term.
pub fn protonce<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    batch: &PclBatch,
    levels: &[ProtoLevel<T>],
    tau: T,
) -> Result<Var> {
    let ins = loss_instance(tape, feats, &batch.finest, &batch.active, tau)?;
    let proto = loss_proto(tape, feats, &batch.levels, levels, &batch.active)?;
    tape.add(ins, proto)
}

/// Value-only evaluation of the instance term with every row active.
pub fn loss_instance_value<T: Scalar>(feats: &Tensor<T>, cluster_ids: &[usize], tau: T) -> Result<T> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let active = vec![true; feats.rows()];
    let l = loss_instance(&mut tape, f, cluster_ids, &active, tau)?;
    Ok(tape.scalar(l))
}

/// Value-only evaluation of the prototype term with every row active.
pub fn loss_proto_value<T: Scalar>(
    feats: &Tensor<T>,
    assignments: &[Vec<usize>],
    levels: &[ProtoLevel<T>],
) -> Result<T> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let active = vec![true; feats.rows()];
    let l = loss_proto(&mut tape, f, assignments, levels, &active)?;
    Ok(tape.scalar(l))
}

fn normalize_row<T: Scalar>(row: &mut [T]) {
    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n > T::zero() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
}

/// Momentum-averaged unit features for every training sample, plus the
/// per-level prototypes and densities recomputed from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct FeatureBank<T> {
    ids: Vec<u64>,
    #[serde(skip)]
    index: HashMap<u64, usize>,
    feats: Tensor<T>,
    /// Per level, cluster of each bank row.
    assignments: Vec<Vec<usize>>,
    n_clusters: Vec<usize>,
    levels: Vec<ProtoLevel<T>>,
    beta: T,
    alpha: T,
}

impl<T: Scalar> FeatureBank<T> {
    /// Builds the bank from initial features (rows aligned with `ids`) and the
    /// pseudo labels of `clusters`, which must cover exactly the same ids.
    pub fn new(
        ids: &[u64],
        feats: Tensor<T>,
        clusters: &ClusterModel<T>,
        cfg: &PCLConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if feats.rows() != ids.len() {
            return Err(Error::Contract(format!(
                "{} bank rows for {} ids",
                feats.rows(),
                ids.len()
            )));
        }
        let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() || clusters.sample_ids.len() != ids.len() {
            return Err(Error::Contract("bank must cover exactly the clustered samples".into()));
        }
        let cluster_pos: HashMap<u64, usize> = clusters
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut assignments = Vec::new();
        let mut n_clusters = Vec::new();
        for level in &clusters.levels {
            let mut a = Vec::with_capacity(ids.len());
            for id in ids {
                let p = cluster_pos.get(id).ok_or_else(|| {
                    Error::Contract(format!("sample {id} has no cluster assignment"))
                })?;
                a.push(level.assignments[*p]);
            }
            assignments.push(a);
            n_clusters.push(level.n_clusters);
        }
        let mut feats = feats;
        for r in 0..feats.rows() {
            normalize_row(feats.row_mut(r));
        }
        let mut bank = Self {
            ids: ids.to_vec(),
            index,
            feats,
            assignments,
            n_clusters,
            levels: Vec::new(),
            beta: T::lit(cfg.momentum_beta),
            alpha: T::lit(cfg.alpha),
        };
        bank.refresh();
        Ok(bank)
    }

    /// Rebuilds the id index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.feats
    }

    pub fn levels(&self) -> &[ProtoLevel<T>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn feature(&self, id: u64) -> Option<&[T]> {
        self.index.get(&id).map(|&i| self.feats.row(i))
    }

    /// Recomputes prototypes (member means) and clamped densities per level.
    pub fn refresh(&mut self) {
        self.levels = self
            .assignments
            .iter()
            .zip(&self.n_clusters)
            .map(|(a, &k)| {
                let (protos, _) = prototypes(&self.feats, a, k);
                let raw = level_densities(&self.feats, a, &protos, self.alpha);
                ProtoLevel {
                    prototypes: protos,
                    densities: clamp_densities(&raw),
                }
            })
            .collect();
    }

    /// `v' <- normalize(beta v' + (1 - beta) v_new)` for each listed id.
    pub fn update(&mut self, ids: &[u64], new_feats: &Tensor<T>) -> Result<()> {
        if new_feats.rows() != ids.len() || new_feats.cols() != self.feats.cols() {
            return Err(Error::Contract(format!(
                "bank update with {} ids and features {:?}",
                ids.len(),
                new_feats.shape()
            )));
        }
        let beta = self.beta;
        for (r, id) in ids.iter().enumerate() {
            let &i = self
                .index
                .get(id)
                .ok_or_else(|| Error::Contract(format!("sample {id} is not in the bank")))?;
            let row = self.feats.row_mut(i);
            for (v, &n) in row.iter_mut().zip(new_feats.row(r)) {
                *v = beta * *v + (T::one() - beta) * n;
            }
            normalize_row(row);
        }
        Ok(())
    }

    /// Pseudo labels for a batch of ids: per-level clusters and the finest level.
    pub fn batch_labels(&self, ids: &[u64], finest_level: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
        let rows: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("sample {id} has no assignment")))
            })
            .collect::<Result<_>>()?;
        let per_level: Vec<Vec<usize>> = self
            .assignments
            .iter()
            .map(|a| rows.iter().map(|&r| a[r]).collect())
            .collect();
        let finest = per_level
            .get(finest_level)
            .cloned()
            .unwrap_or_else(|| vec![0; ids.len()]);
        Ok((per_level, finest))
    }

    /// `sample_id,f0..f{D-1}` CSV of the momentum features.
    pub fn to_csv(&self) -> String {
        let d = self.feats.cols();
        let mut s = String::from("sample_id");
        for j in 0..d {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(&id.to_string());
            for v in self.feats.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}
