//! Full training schedule: EWTA warm-up, gate freeze, gated contrastive
//! learning on the predictor's projected features, EWTA stage evolution and
//! exponential learning-rate decay.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{build_hierarchy, ClusterConfig, ClusterModel};
use crate::error::{Error, Result};
use crate::eval::{bucket_by_baseline, evaluate_model, BucketReport};
use crate::extractor::{extract_all, ExtractorParams, TrackSpan};
use crate::kalman::{kalman_scores_for, KalmanConfig};
use crate::numeric::{clip_grad_norm, Adam, Tape, Tensor, Var};
use crate::pcl::{protonce, FeatureBank, PCLConfig, PclBatch};
use crate::predictor::{ewta_loss_batch, Bound, ObsBatch, PredictorConfig, PredictorParams};
use crate::scalar::Scalar;
use crate::trajdata::{DatasetSplit, Point, TrajectorySample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per optimizer step: `lr_t = lr (1 - lr_decay)^t`.
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub a_initial: f64,
    pub a_late: f64,
    /// Counted in post-warm-up epochs.
    pub a_switch_epoch: usize,
    pub theta: f64,
    pub seed: u64,
    pub use_pcl: bool,
    pub use_hyper: bool,
    pub future_enhanced: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Epochs between validation reports in the run log; 0 disables.
    pub val_every: usize,
    pub predictor: PredictorConfig,
    pub pcl: PCLConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 256,
            lr: 0.01,
            lr_decay: 0.001,
            warmup_epochs: 300,
            a_initial: 50.0,
            a_late: 0.2,
            a_switch_epoch: 100,
            theta: 0.2,
            seed: 0,
            use_pcl: true,
            use_hyper: true,
            future_enhanced: true,
            grad_clip: 0.0,
            val_every: 0,
            predictor: PredictorConfig::default(),
            pcl: PCLConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule for a single-core run on about ten thousand samples: the
    /// warm-up and switch epochs keep the default ratios, batches are smaller
    /// and gradients are clipped.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            warmup_epochs: 20,
            a_switch_epoch: 6,
            grad_clip: 1.0,
            predictor: PredictorConfig::desk(),
            ..Self::default()
        }
    }

    /// Turns off the contrastive branch and the hypernetwork.
    pub fn baseline(&self) -> Self {
        Self {
            use_pcl: false,
            use_hyper: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::config("lr_decay", "must lie in [0, 1)"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        if !(self.a_initial >= 0.0) || !(self.a_late >= 0.0) {
            return Err(Error::config("a_initial/a_late", "must be non-negative"));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::config("theta", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        self.predictor.validate()?;
        if self.predictor.use_hyper != self.use_hyper {
            return Err(Error::config("use_hyper", "differs from predictor.use_hyper"));
        }
        if self.use_pcl {
            self.pcl.validate()?;
        }
        Ok(())
    }

    /// Predictor config with the hypernetwork switch applied.
    pub fn synced(mut self) -> Self {
        self.predictor.use_hyper = self.use_hyper;
        self
    }

    /// Contrastive weight `a` for the given post-warm-up epoch.
    pub fn a_schedule(&self, pcl_epoch: usize) -> f64 {
        if pcl_epoch < self.a_switch_epoch {
            self.a_initial
        } else {
            self.a_late
        }
    }

    /// Number of EWTA stages: halve from K to 1.
    pub fn ewta_stages(&self) -> usize {
        let k = self.predictor.heads.max(1);
        (usize::BITS - (k - 1).leading_zeros()) as usize + 1
    }

    /// Winners penalized at `epoch`: `max(1, K >> stage)` with equal-length stages.
    pub fn k_winners(&self, epoch: usize) -> usize {
        let stages = self.ewta_stages();
        let len = (self.epochs / stages).max(1);
        let stage = (epoch / len).min(stages - 1);
        (self.predictor.heads >> stage).max(1)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * (1.0 - self.lr_decay).powf(step as f64)
    }
}

/// Per-sample gate, frozen at warm-up end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateMask {
    pub theta: f64,
    pub k_winners: usize,
    pub ids: Vec<u64>,
    pub losses: Vec<f64>,
    pub active: Vec<bool>,
}

impl GateMask {
    pub fn lookup(&self) -> HashMap<u64, bool> {
        self.ids.iter().copied().zip(self.active.iter().copied()).collect()
    }

    pub fn active_fraction(&self, ids: &[u64]) -> f64 {
        let map = self.lookup();
        let hits = ids.iter().filter(|id| map.get(id).copied().unwrap_or(false)).count();
        hits as f64 / ids.len().max(1) as f64
    }

    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.ids.hash(&mut h);
        self.active.hash(&mut h);
        h.finish()
    }
}

/// Per-sample EWTA losses of `params` over `samples`.
pub fn sample_losses<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[TrajectorySample<T>],
    k_winners: usize,
) -> Result<Vec<T>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&TrajectorySample<T>> = chunk.iter().collect();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let obs = ObsBatch::from_samples(&refs)?;
        let t_pred = chunk[0].fut.len();
        let v = params.encode_batch(&mut tape, &b, &obs)?;
        let pos = params.decode_batch(&mut tape, &b, v, t_pred)?;
        let gt: Vec<&[Point<T>]> = chunk.iter().map(|s| s.fut.as_slice()).collect();
        let (_, per) = ewta_loss_batch(&mut tape, &pos, &gt, params.cfg.heads, k_winners)?;
        out.extend(per);
    }
    Ok(out)
}

/// Gate: a sample is active iff its current EWTA loss exceeds `theta`.
pub fn compute_gate<T: Scalar>(
    samples: &[TrajectorySample<T>],
    params: &PredictorParams<T>,
    theta: f64,
    k_winners: usize,
) -> Result<GateMask> {
    let losses: Vec<f64> = sample_losses(params, samples, k_winners)?
        .into_iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    Ok(GateMask {
        theta,
        k_winners,
        ids: samples.iter().map(|s| s.sample_id).collect(),
        active: losses.iter().map(|&l| l > theta).collect(),
        losses,
    })
}

/// Values of the two loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ewta: f64,
    /// Batch-mean contrastive loss before weighting by `a`.
    pub pcl: f64,
    pub a: f64,
}

/// Contrastive context handed to [`total_loss`] after warm-up.
pub struct PclContext<'a, T> {
    pub bank: &'a FeatureBank<T>,
    pub finest_level: usize,
    pub mask: &'a HashMap<u64, bool>,
    pub a: f64,
    pub tau: f64,
}

/// Batch loss `mean EWTA + a * protonce / r`. Without a contrastive context
/// (warm-up, or the branch switched off) only the EWTA term is used.
/// Returns the loss, the projected features and the component values.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &PredictorParams<T>,
    bound: &Bound,
    batch: &[&TrajectorySample<T>],
    k_winners: usize,
    pcl: Option<&PclContext<'_, T>>,
) -> Result<(Var, Var, LossParts)> {
    let obs = ObsBatch::from_samples(batch)?;
    let t_pred = batch[0].fut.len();
    let out = params.forward(tape, bound, &obs, t_pred)?;
    let gt: Vec<&[Point<T>]> = batch.iter().map(|s| s.fut.as_slice()).collect();
    let (ewta, _) = ewta_loss_batch(tape, &out.positions, &gt, params.cfg.heads, k_winners)?;
    let mut parts = LossParts {
        ewta: tape.scalar(ewta).to_f64_lossy(),
        pcl: 0.0,
        a: 0.0,
    };
    let Some(ctx) = pcl else {
        return Ok((ewta, out.proj, parts));
    };
    let active: Vec<bool> = batch
        .iter()
        .map(|s| ctx.mask.get(&s.sample_id).copied().unwrap_or(false))
        .collect();
    if batch.len() < 2 || !active.iter().any(|&a| a) || ctx.a == 0.0 {
        return Ok((ewta, out.proj, parts));
    }
    let ids: Vec<u64> = batch.iter().map(|s| s.sample_id).collect();
    let (levels, finest) = ctx.bank.batch_labels(&ids, ctx.finest_level)?;
    let pb = PclBatch {
        finest,
        levels,
        active,
    };
    let p = protonce(tape, out.proj, &pb, ctx.bank.levels(), T::lit(ctx.tau))?;
    let p = tape.scale(p, T::one() / T::from_usize_lossy(batch.len()));
    parts.pcl = tape.scalar(p).to_f64_lossy();
    parts.a = ctx.a;
    let weighted = tape.scale(p, T::lit(ctx.a));
    let loss = tape.add(ewta, weighted)?;
    Ok((loss, out.proj, parts))
}

/// One run-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub ewta_loss: f64,
    pub pcl_loss: f64,
    pub a: f64,
    pub lr: f64,
    pub k_winners: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_digest: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_active_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<BucketReport>,
}

pub struct TrainOutput<T> {
    pub params: PredictorParams<T>,
    pub log: Vec<EpochRecord>,
    pub gate: Option<GateMask>,
    /// Parameters at the end of warm-up.
    pub warmup_params: PredictorParams<T>,
}

/// JSON-lines run log.
pub fn log_to_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Pseudo labels: hierarchical k-means over unit-normalized extractor
/// embeddings of the training samples (full trajectories, or history only).
pub fn pseudo_labels<T: Scalar>(
    split: &DatasetSplit<T>,
    extractor: &ExtractorParams<T>,
    future_enhanced: bool,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterModel<T>> {
    let span = if future_enhanced {
        TrackSpan::Full
    } else {
        TrackSpan::History
    };
    let mut feats = extract_all(extractor, &split.train, span)?;
    for r in 0..feats.rows() {
        let row = feats.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let ids: Vec<u64> = split.train.iter().map(|s| s.sample_id).collect();
    build_hierarchy(&feats, &ids, cfg, seed)
}

fn validation<T: Scalar>(
    params: &PredictorParams<T>,
    split: &DatasetSplit<T>,
    scores: &[(u64, T)],
) -> Result<Option<BucketReport>> {
    if split.test.is_empty() {
        return Ok(None);
    }
    let metrics = evaluate_model(params, &split.test)?;
    Ok(Some(bucket_by_baseline(scores, &metrics)?))
}

/// Trains the predictor with the full schedule. `clusters` must be built
/// over the same training samples and is required when `use_pcl` is set.
pub fn train_fend<T: Scalar>(
    split: &DatasetSplit<T>,
    clusters: Option<&ClusterModel<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    split.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("train", "training split is empty"));
    }
    if cfg.use_pcl {
        let Some(c) = clusters else {
            return Err(Error::config("use_pcl", "contrastive training needs a cluster model"));
        };
        let mut a: Vec<u64> = c.sample_ids.clone();
        let mut b: Vec<u64> = split.train.iter().map(|s| s.sample_id).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::config("clusters", "cluster model covers different samples than the training split"));
        }
    }
    let mut params = PredictorParams::new(cfg.predictor.clone(), cfg.seed)?;
    let mut opt = Adam::new(&params.set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF3ED);
    let n = split.train.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let val_scores = if cfg.val_every > 0 {
        let kcfg = KalmanConfig {
            dt: split.dt.to_f64_lossy(),
            ..KalmanConfig::default()
        };
        kalman_scores_for(&split.test, &kcfg)?
    } else {
        Vec::new()
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut gate: Option<GateMask> = None;
    let mut gate_map: HashMap<u64, bool> = HashMap::new();
    let mut bank: Option<FeatureBank<T>> = None;
    let mut warmup_params = params.clone();
    let finest = clusters.and_then(ClusterModel::finest_level).unwrap_or(0);

    for epoch in 0..cfg.epochs {
        let k = cfg.k_winners(epoch);
        let in_warmup = epoch < cfg.warmup_epochs;
        if epoch == cfg.warmup_epochs {
            warmup_params = params.clone();
            if cfg.use_pcl {
                let mask = compute_gate(&split.train, &params, cfg.theta, cfg.k_winners(epoch - 1))?;
                gate_map = mask.lookup();
                gate = Some(mask);
                let refs: Vec<&TrajectorySample<T>> = split.train.iter().collect();
                let feats = projections_chunked(&params, &refs)?;
                let ids: Vec<u64> = split.train.iter().map(|s| s.sample_id).collect();
                bank = Some(FeatureBank::new(&ids, feats, clusters.expect("checked"), &cfg.pcl)?);
            }
        }
        let pcl_epoch = epoch.saturating_sub(cfg.warmup_epochs);
        let a = if in_warmup || !cfg.use_pcl { 0.0 } else { cfg.a_schedule(pcl_epoch) };
        order.shuffle(&mut rng);
        let (mut ewta_sum, mut pcl_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut lr = cfg.lr_at(opt.steps_taken());
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&TrajectorySample<T>> = chunk.iter().map(|&i| &split.train[i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let ctx = match (&bank, in_warmup) {
                (Some(bank), false) => Some(PclContext {
                    bank,
                    finest_level: finest,
                    mask: &gate_map,
                    a,
                    tau: cfg.pcl.tau,
                }),
                _ => None,
            };
            let (loss, proj, parts) = total_loss(&mut tape, &params, &bound, &batch, k, ctx.as_ref())?;
            let grads = tape.backward(loss).map_err(|e| {
                Error::Numeric(format!(
                    "epoch {epoch} batch {bi}: {e} (ewta {}, pcl {}, a {})",
                    parts.ewta, parts.pcl, parts.a
                ))
            })?;
            let mut g = tape.param_grads(&grads, &params.set);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut g, T::lit(cfg.grad_clip));
            }
            lr = cfg.lr_at(opt.steps_taken());
            opt.step(&mut params.set, &g, T::lit(lr));
            if !params.set.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch} batch {bi}: parameters became non-finite")));
            }
            if let (Some(bank), false) = (&mut bank, in_warmup) {
                let ids: Vec<u64> = batch.iter().map(|s| s.sample_id).collect();
                bank.update(&ids, tape.value(proj))?;
            }
            ewta_sum += parts.ewta;
            pcl_sum += parts.pcl;
            batches += 1;
        }
        if let (Some(bank), false) = (&mut bank, in_warmup) {
            if (pcl_epoch + 1) % cfg.pcl.refresh_every == 0 {
                bank.refresh();
            }
        }
        let val = if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
            validation(&params, split, &val_scores)?
        } else {
            None
        };
        log.push(EpochRecord {
            epoch,
            phase: if in_warmup { "warmup" } else { "main" }.to_string(),
            ewta_loss: ewta_sum / batches as f64,
            pcl_loss: pcl_sum / batches as f64,
            a,
            lr,
            k_winners: k,
            gate_digest: gate.as_ref().map(GateMask::digest),
            gate_active_fraction: gate.as_ref().map(|g| g.active.iter().filter(|&&a| a).count() as f64 / g.active.len() as f64),
            val,
        });
    }
    Ok(TrainOutput {
        params,
        log,
        gate,
        warmup_params,
    })
}

/// Projected features in chunks, `[n x proj_dim]`.
pub fn projections_chunked<T: Scalar>(
    params: &PredictorParams<T>,
    samples: &[&TrajectorySample<T>],
) -> Result<Tensor<T>> {
    const CHUNK: usize = 512;
    let mut data = Vec::with_capacity(samples.len() * params.cfg.proj_dim);
    for chunk in samples.chunks(CHUNK) {
        data.extend(params.projections(chunk)?.into_data());
    }
    Tensor::new(vec![samples.len(), params.cfg.proj_dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.a_schedule(c.a_switch_epoch - 1), 50.0);
        assert_eq!(c.a_schedule(c.a_switch_epoch), 0.2);
    }

    #[test]
    fn ewta_stages_for_twenty_heads() {
        let c = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        assert_eq!(c.ewta_stages(), 6);
        let ks: Vec<usize> = (0..60).step_by(10).map(|e| c.k_winners(e)).collect();
        assert_eq!(ks, vec![20, 10, 5, 2, 1, 1]);
        assert_eq!(c.k_winners(59), 1);
    }

    #[test]
    fn warmup_must_precede_end() {
        let c = TrainConfig {
            warmup_epochs: 40,
            ..TrainConfig::desk()
        };
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }
}
