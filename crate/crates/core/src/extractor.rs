//! Offline trajectory feature extractor: a width-3 temporal convolution over
//! per-step displacements, an LSTM encoder whose final hidden state is the
//! embedding, and an LSTM decoder that reconstructs positions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{build_hierarchy, ClusterConfig};
use crate::error::{Error, Result};
use crate::numeric::init::glorot;
use crate::numeric::{Adam, ParamId, ParamSet, Tape, Tensor, Var};
use crate::pcl::{protonce, PCLConfig, PclBatch, ProtoLevel};
use crate::predictor::PROJECT_EPS;
use crate::scalar::Scalar;
use crate::trajdata::{DatasetSplit, Point, TrajectorySample};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per optimizer step: `lr_t = learning_rate (1 - lr_decay)^t`.
    pub lr_decay: f64,
    pub pcl_aux_weight: f64,
    pub cluster: ClusterConfig,
    pub pcl: PCLConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            conv_channels: 16,
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay: 0.0,
            pcl_aux_weight: 0.1,
            cluster: ClusterConfig::default(),
            pcl: PCLConfig::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            epochs: 5,
            batch_size: 256,
            cluster: ClusterConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "must be at least 2"));
        }
        if self.conv_channels == 0 {
            return Err(Error::config("conv_channels", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::config("lr_decay", "must lie in [0, 1)"));
        }
        if !(self.pcl_aux_weight >= 0.0) {
            return Err(Error::config("pcl_aux_weight", "must be non-negative"));
        }
        if self.pcl_aux_weight > 0.0 {
            self.cluster.validate()?;
            self.pcl.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Ids {
    conv_w: ParamId,
    conv_b: ParamId,
    enc_wx: ParamId,
    enc_wh: ParamId,
    enc_b: ParamId,
    dec_wx: ParamId,
    dec_wh: ParamId,
    dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

const NAMES: [&str; 10] = [
    "conv.w", "conv.b", "enc.w_x", "enc.w_h", "enc.b", "dec.w_x", "dec.w_h", "dec.b", "out.w", "out.b",
];

impl Ids {
    fn resolve<T: Scalar>(set: &ParamSet<T>) -> Result<Self> {
        let mut found = Vec::with_capacity(NAMES.len());
        for n in NAMES {
            found.push(
                set.id(n)
                    .ok_or_else(|| Error::Contract(format!("extractor parameter {n} missing")))?,
            );
        }
        Ok(Self {
            conv_w: found[0],
            conv_b: found[1],
            enc_wx: found[2],
            enc_wh: found[3],
            enc_b: found[4],
            dec_wx: found[5],
            dec_wh: found[6],
            dec_b: found[7],
            out_w: found[8],
            out_b: found[9],
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ExtractorParams<T> {
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub set: ParamSet<T>,
    #[serde(skip)]
    ids: Option<Ids>,
}

impl<T: Scalar> PartialEq for ExtractorParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.embed_dim == other.embed_dim
            && self.conv_channels == other.conv_channels
            && self.set == other.set
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorEpoch {
    pub epoch: usize,
    pub recon_loss: f64,
    pub pcl_loss: f64,
}

fn lstm_bias<T: Scalar>(h: usize) -> Tensor<T> {
    let mut b = Tensor::zeros(&[4 * h]);
    for v in &mut b.data_mut()[2 * h..3 * h] {
        *v = T::one();
    }
    b
}

fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    xw: Var,
    h: Var,
    m: Var,
    wh: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let hw = tape.matmul(h, wh)?;
    let pre = tape.add(xw, hw)?;
    let gi = tape.slice_cols(pre, 0, hidden)?;
    let gg = tape.slice_cols(pre, hidden, hidden)?;
    let gf = tape.slice_cols(pre, 2 * hidden, hidden)?;
    let go = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(gi);
    let g = tape.tanh(gg);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let keep = tape.mul(f, m)?;
    let write = tape.mul(i, g)?;
    let m = tape.add(keep, write)?;
    let tm = tape.tanh(m);
    let h = tape.mul(o, tm)?;
    Ok((h, m))
}

/// Same-padded width-3 windows of per-step displacements (a zero
/// displacement is prepended), one `[B x 6]` matrix per timestep.
fn conv_windows<T: Scalar>(tracks: &[&[Point<T>]]) -> Result<Vec<Tensor<T>>> {
    let b = tracks.len();
    let t = tracks.first().map_or(0, |s| s.len());
    if b == 0 || t == 0 {
        return Err(Error::Contract("extractor needs a non-empty batch of non-empty tracks".into()));
    }
    if tracks.iter().any(|s| s.len() != t) {
        return Err(Error::Contract("track lengths differ within batch".into()));
    }
    for s in tracks {
        if s.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Numeric("non-finite extractor input".into()));
        }
    }
    let disp = |s: &[Point<T>], k: isize| -> Point<T> {
        if k <= 0 || k as usize >= t {
            [T::zero(), T::zero()]
        } else {
            let k = k as usize;
            [s[k][0] - s[k - 1][0], s[k][1] - s[k - 1][1]]
        }
    };
    let half = (KERNEL / 2) as isize;
    Ok((0..t as isize)
        .map(|k| {
            let mut data = Vec::with_capacity(b * 2 * KERNEL);
            for s in tracks {
                for off in -half..=half {
                    let d = disp(s, k + off);
                    data.extend_from_slice(&d);
                }
            }
            Tensor::new(vec![b, 2 * KERNEL], data).expect("window shape")
        })
        .collect())
}

impl<T: Scalar> ExtractorParams<T> {
    pub fn new(cfg: &ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, c) = (cfg.embed_dim, cfg.conv_channels);
        let mut set = ParamSet::new();
        set.add("conv.w", glorot(&mut rng, 2 * KERNEL, c));
        set.add("conv.b", Tensor::zeros(&[c]));
        set.add("enc.w_x", glorot(&mut rng, c, 4 * e));
        set.add("enc.w_h", glorot(&mut rng, e, 4 * e));
        set.add("enc.b", lstm_bias(e));
        set.add("dec.w_x", glorot(&mut rng, e, 4 * e));
        set.add("dec.w_h", glorot(&mut rng, e, 4 * e));
        set.add("dec.b", lstm_bias(e));
        set.add("out.w", glorot(&mut rng, e, 2));
        set.add("out.b", Tensor::zeros(&[2]));
        let ids = Some(Ids::resolve(&set)?);
        Ok(Self {
            embed_dim: e,
            conv_channels: c,
            set,
            ids,
        })
    }

    /// Re-resolves parameter handles after deserialization.
    pub fn restore(mut self) -> Result<Self> {
        let reference = Self::new(
            &ExtractorConfig {
                embed_dim: self.embed_dim,
                conv_channels: self.conv_channels,
                ..ExtractorConfig::default()
            },
            0,
        )?;
        for id in reference.set.ids() {
            let name = reference.set.name(id);
            let other = self
                .set
                .id(name)
                .ok_or_else(|| Error::Contract(format!("extractor parameter {name} missing")))?;
            if self.set.get(other).shape() != reference.set.get(id).shape() {
                return Err(Error::Contract(format!("extractor parameter {name} has wrong shape")));
            }
        }
        self.ids = Some(Ids::resolve(&self.set)?);
        Ok(self)
    }

    fn ids(&self) -> &Ids {
        self.ids.as_ref().expect("ids resolved at construction")
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.set.tensors_mut() {
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
        out
    }

    /// Embeddings `[B x embed_dim]` of a batch of tracks on the tape.
    pub fn embed_batch(&self, tape: &mut Tape<T>, vars: &[Var], tracks: &[&[Point<T>]]) -> Result<Var> {
        let ids = self.ids();
        let e = self.embed_dim;
        let windows = conv_windows(tracks)?;
        let b = tracks.len();
        let mut h = tape.constant(Tensor::zeros(&[b, e]));
        let mut m = tape.constant(Tensor::zeros(&[b, e]));
        for w in windows {
            let x = tape.constant(w);
            let conv = tape.linear(x, vars[ids.conv_w.0], vars[ids.conv_b.0])?;
            let act = tape.tanh(conv);
            let xw = tape.linear(act, vars[ids.enc_wx.0], vars[ids.enc_b.0])?;
            (h, m) = lstm_step(tape, xw, h, m, vars[ids.enc_wh.0], e)?;
        }
        Ok(h)
    }

    /// Decoder seeded with the embedding as initial hidden state and as the
    /// input at every step. The readout is a per-step displacement; returns
    /// the running sums, one `[B x 2]` position per step.
    pub fn reconstruct_batch(&self, tape: &mut Tape<T>, vars: &[Var], emb: Var, len: usize) -> Result<Vec<Var>> {
        let ids = self.ids();
        let e = self.embed_dim;
        let b = tape.value(emb).rows();
        let xw = tape.linear(emb, vars[ids.dec_wx.0], vars[ids.dec_b.0])?;
        let mut h = emb;
        let mut m = tape.constant(Tensor::zeros(&[b, e]));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            (h, m) = lstm_step(tape, xw, h, m, vars[ids.dec_wh.0], e)?;
            let d = tape.linear(h, vars[ids.out_w.0], vars[ids.out_b.0])?;
            let p = match out.last() {
                None => d,
                Some(&prev) => tape.add(prev, d)?,
            };
            out.push(p);
        }
        Ok(out)
    }

    /// Mean over samples and steps of the squared reconstruction distance.
    pub fn recon_loss(&self, tape: &mut Tape<T>, vars: &[Var], tracks: &[&[Point<T>]]) -> Result<(Var, Var)> {
        let emb = self.embed_batch(tape, vars, tracks)?;
        let len = tracks[0].len();
        let rec = self.reconstruct_batch(tape, vars, emb, len)?;
        let b = tracks.len();
        let w = T::one() / T::from_usize_lossy(b * len);
        let mut total: Option<Var> = None;
        for (t, &r) in rec.iter().enumerate() {
            let mut target = Vec::with_capacity(2 * b);
            for s in tracks {
                target.extend_from_slice(&s[t]);
            }
            let target = tape.constant(Tensor::new(vec![b, 2], target)?);
            let d = tape.sub(r, target)?;
            let sq = tape.square(d);
            let s = tape.weighted_sum(sq, Tensor::full(&[b, 2], w))?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok((total.expect("len >= 1"), emb))
    }

    /// Embedding of one track (positions in the normalized frame).
    pub fn extract_track(&self, track: &[Point<T>]) -> Result<Vec<T>> {
        Ok(self.extract_tracks(&[track])?.into_data())
    }

    /// Embedding of the full (observed + future) trajectory.
    pub fn extract(&self, sample: &TrajectorySample<T>) -> Result<Vec<T>> {
        self.extract_track(&sample.full())
    }

    /// Batched embeddings, one row per track.
    pub fn extract_tracks(&self, tracks: &[&[Point<T>]]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.set);
        let emb = self.embed_batch(&mut tape, &vars, tracks)?;
        Ok(tape.value(emb).clone())
    }

    pub fn reconstruct(&self, embedding: &[T], len: usize) -> Result<Vec<Point<T>>> {
        if embedding.len() != self.embed_dim {
            return Err(Error::Dimension(format!(
                "embedding of width {} for extractor of width {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&self.set);
        let emb = tape.constant(Tensor::new(vec![1, self.embed_dim], embedding.to_vec())?);
        let rec = self.reconstruct_batch(&mut tape, &vars, emb, len)?;
        Ok(rec
            .iter()
            .map(|&r| {
                let v = tape.value(r);
                [v.get(0, 0), v.get(0, 1)]
            })
            .collect())
    }
}

/// Which part of each sample is embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackSpan {
    /// Observed history followed by the future.
    Full,
    /// Observed history only.
    History,
}

impl TrackSpan {
    pub fn track<T: Scalar>(self, s: &TrajectorySample<T>) -> Vec<Point<T>> {
        match self {
            TrackSpan::Full => s.full(),
            TrackSpan::History => s.obs.clone(),
        }
    }
}

/// Embeddings of many samples, `[n x embed_dim]`, computed in chunks.
pub fn extract_all<T: Scalar>(
    params: &ExtractorParams<T>,
    samples: &[TrajectorySample<T>],
    span: TrackSpan,
) -> Result<Tensor<T>> {
    const CHUNK: usize = 512;
    let mut data = Vec::with_capacity(samples.len() * params.embed_dim);
    for chunk in samples.chunks(CHUNK) {
        let tracks: Vec<Vec<Point<T>>> = chunk.iter().map(|s| span.track(s)).collect();
        let refs: Vec<&[Point<T>]> = tracks.iter().map(Vec::as_slice).collect();
        data.extend(params.extract_tracks(&refs)?.into_data());
    }
    Tensor::new(vec![samples.len(), params.embed_dim], data)
}

/// `sample_id,f0..f{D-1}` CSV.
pub fn embeddings_csv<T: Scalar>(ids: &[u64], feats: &Tensor<T>) -> String {
    let mut s = String::from("sample_id");
    for j in 0..feats.cols() {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for (r, id) in ids.iter().enumerate() {
        s.push_str(&id.to_string());
        for v in feats.row(r) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn unit_rows<T: Scalar>(mut t: Tensor<T>) -> Tensor<T> {
    let eps = T::lit(PROJECT_EPS);
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = (row.iter().map(|&v| v * v).sum::<T>() + eps * eps).sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    t
}

/// Autoencoder training on full trajectories.
pub fn train_extractor<T: Scalar>(
    split: &DatasetSplit<T>,
    cfg: &ExtractorConfig,
    seed: u64,
) -> Result<ExtractorParams<T>> {
    Ok(train_extractor_logged(split, cfg, seed)?.0)
}

/// As [`train_extractor`], also returning per-epoch losses.
///
/// With a positive `pcl_aux_weight`, every epoch starts with an E-step:
/// all training embeddings are extracted, projected to the unit sphere and
/// clustered; the resulting assignments, prototypes and densities drive the
/// contrastive term (batch mean) for the rest of the epoch.
pub fn train_extractor_logged<T: Scalar>(
    split: &DatasetSplit<T>,
    cfg: &ExtractorConfig,
    seed: u64,
) -> Result<(ExtractorParams<T>, Vec<ExtractorEpoch>)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("train", "training split is empty"));
    }
    let mut params = ExtractorParams::new(cfg, seed)?;
    let mut opt = Adam::new(&params.set);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let tracks: Vec<Vec<Point<T>>> = split.train.iter().map(TrajectorySample::full).collect();
    let ids: Vec<u64> = split.train.iter().map(|s| s.sample_id).collect();
    let n = tracks.len();
    let bs = cfg.batch_size.min(n);
    let use_pcl = cfg.pcl_aux_weight > 0.0 && n >= 2;
    let tau = T::lit(cfg.pcl.tau);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let em = if use_pcl {
            let feats = unit_rows(extract_all(&params, &split.train, TrackSpan::Full)?);
            let model = build_hierarchy(&feats, &ids, &cfg.cluster, seed.wrapping_add(epoch as u64))?;
            let finest = model.finest_level().unwrap_or(0);
            let levels: Vec<ProtoLevel<T>> = model
                .levels
                .iter()
                .map(|l| ProtoLevel {
                    prototypes: l.prototypes.clone(),
                    densities: l.densities.clone(),
                })
                .collect();
            Some((model, finest, levels))
        } else {
            None
        };
        order.shuffle(&mut rng);
        let (mut rec_sum, mut pcl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<&[Point<T>]> = chunk.iter().map(|&i| tracks[i].as_slice()).collect();
            let mut tape = Tape::new();
            let vars = tape.bind(&params.set);
            let (rec, emb) = params.recon_loss(&mut tape, &vars, &batch)?;
            let mut loss = rec;
            if let Some((model, finest, levels)) = &em {
                if chunk.len() >= 2 {
                    let proj = tape.l2_normalize(emb, T::lit(PROJECT_EPS));
                    let per_level: Vec<Vec<usize>> = model
                        .levels
                        .iter()
                        .map(|l| chunk.iter().map(|&i| l.assignments[i]).collect())
                        .collect();
                    let pb = PclBatch {
                        finest: per_level[*finest].clone(),
                        levels: per_level,
                        active: vec![true; chunk.len()],
                    };
                    let p = protonce(&mut tape, proj, &pb, levels, tau)?;
                    let p = tape.scale(p, T::one() / T::from_usize_lossy(chunk.len()));
                    pcl_sum += tape.scalar(p).to_f64_lossy();
                    let weighted = tape.scale(p, T::lit(cfg.pcl_aux_weight));
                    loss = tape.add(loss, weighted)?;
                }
            }
            rec_sum += tape.scalar(rec).to_f64_lossy();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g = tape.param_grads(&grads, &params.set);
            let lr = cfg.learning_rate * (1.0 - cfg.lr_decay).powf(opt.steps_taken() as f64);
            opt.step(&mut params.set, &g, T::lit(lr));
        }
        if !params.set.is_finite() {
            return Err(Error::Numeric(format!("extractor parameters became non-finite in epoch {epoch}")));
        }
        log.push(ExtractorEpoch {
            epoch,
            recon_loss: rec_sum / batches as f64,
            pcl_loss: pcl_sum / batches as f64,
        });
    }
    Ok((params, log))
}
