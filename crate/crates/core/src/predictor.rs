//! Prediction network: recurrent encoder over observed displacements, a
//! projection head for the contrastive loss, a shallow hypernetwork, a
//! layer-normalized HyperLSTM decoder and K displacement heads.
//!
//! Gate blocks are laid out as `[i | g | f | o]` along the column axis, each
//! `dec_hidden` wide. Weight matrices are stored `fan_in x fan_out` so a
//! batch of row vectors multiplies from the left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::init::{glorot, uniform};
use crate::numeric::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::trajdata::{Point, TrajectorySample};

/// Norm floor used when projecting to the unit sphere.
pub const PROJECT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub dec_input: usize,
    pub hyper_hidden: usize,
    /// Width of each hypernetwork output (`z_h`, `z_x`, and each `z_b^y`).
    pub z_dim: usize,
    pub heads: usize,
    pub proj_dim: usize,
    /// When false the decoder is a plain layer-normalized LSTM with bias `b_0`.
    pub use_hyper: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            enc_hidden: 128,
            dec_hidden: 128,
            dec_input: 32,
            hyper_hidden: 128,
            z_dim: 16,
            heads: 20,
            proj_dim: 64,
            use_hyper: true,
        }
    }
}

impl PredictorConfig {
    /// Narrow network for single-core runs.
    pub fn desk() -> Self {
        Self {
            enc_hidden: 32,
            dec_hidden: 32,
            dec_input: 16,
            hyper_hidden: 32,
            z_dim: 8,
            heads: 20,
            proj_dim: 32,
            use_hyper: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("dec_input", self.dec_input),
            ("hyper_hidden", self.hyper_hidden),
            ("z_dim", self.z_dim),
            ("heads", self.heads),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.dec_hidden < 2 {
            return Err(Error::config("dec_hidden", "layer norm needs at least 2 units"));
        }
        Ok(())
    }
}

pub const GATES: [&str; 4] = ["i", "g", "f", "o"];

/// Parameter handles, resolved by name.
#[derive(Clone, Debug)]
struct Ids {
    enc_wx: ParamId,
    enc_wh: ParamId,
    enc_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    hyp_w1: ParamId,
    hyp_b1: ParamId,
    hyp_w2: ParamId,
    hyp_b2: ParamId,
    dec_wh: ParamId,
    dec_wx: ParamId,
    dec_whz: ParamId,
    dec_wxz: ParamId,
    dec_wbz: [ParamId; 4],
    dec_b0: ParamId,
    seed_wx: ParamId,
    seed_bx: ParamId,
    seed_wh: ParamId,
    seed_bh: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Ids {
    fn resolve<T: Scalar>(set: &ParamSet<T>) -> Result<Self> {
        let get = |n: &str| {
            set.id(n)
                .ok_or_else(|| Error::Contract(format!("predictor parameter {n} missing")))
        };
        Ok(Self {
            enc_wx: get("enc.w_x")?,
            enc_wh: get("enc.w_h")?,
            enc_b: get("enc.b")?,
            proj_w: get("proj.w")?,
            proj_b: get("proj.b")?,
            hyp_w1: get("hyper.w1")?,
            hyp_b1: get("hyper.b1")?,
            hyp_w2: get("hyper.w2")?,
            hyp_b2: get("hyper.b2")?,
            dec_wh: get("dec.w_h")?,
            dec_wx: get("dec.w_x")?,
            dec_whz: get("dec.w_hz")?,
            dec_wxz: get("dec.w_xz")?,
            dec_wbz: [
                get("dec.w_bz.i")?,
                get("dec.w_bz.g")?,
                get("dec.w_bz.f")?,
                get("dec.w_bz.o")?,
            ],
            dec_b0: get("dec.b0")?,
            seed_wx: get("seed.w_x")?,
            seed_bx: get("seed.b_x")?,
            seed_wh: get("seed.w_h")?,
            seed_bh: get("seed.b_h")?,
            head_w: get("heads.w")?,
            head_b: get("heads.b")?,
        })
    }
}

/// Weights of the prediction network.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PredictorParams<T> {
    pub cfg: PredictorConfig,
    pub set: ParamSet<T>,
    #[serde(skip)]
    ids: Option<Ids>,
}

impl<T: Scalar> PartialEq for PredictorParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.set == other.set
    }
}

/// Hypernetwork outputs for one instance: `z_h`, `z_x` and one `z_b` per gate.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperEmbedding<T> {
    pub z_h: Vec<T>,
    pub z_x: Vec<T>,
    pub z_b: [Vec<T>; 4],
}

/// K predicted futures for one sample, in the normalized frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PredictionSet<T> {
    pub heads: Vec<Vec<Point<T>>>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn is_finite(&self) -> bool {
        self.heads
            .iter()
            .flatten()
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Tape handles for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Batched observation input: per-step displacement matrices `[B x 2]`.
pub struct ObsBatch<T> {
    pub steps: Vec<Tensor<T>>,
    pub len: usize,
}

impl<T: Scalar> ObsBatch<T> {
    pub fn from_tracks(tracks: &[&[Point<T>]]) -> Result<Self> {
        let b = tracks.len();
        let t = tracks.first().map_or(0, |o| o.len());
        if t < 2 {
            return Err(Error::Contract("observation needs at least 2 points".into()));
        }
        if tracks.iter().any(|o| o.len() != t) {
            return Err(Error::Contract("observation lengths differ within batch".into()));
        }
        let steps = (1..t)
            .map(|k| {
                let mut data = Vec::with_capacity(b * 2);
                for o in tracks {
                    data.push(o[k][0] - o[k - 1][0]);
                    data.push(o[k][1] - o[k - 1][1]);
                }
                Tensor::new(vec![b, 2], data).expect("b x 2")
            })
            .collect();
        Ok(Self { steps, len: b })
    }

    pub fn from_samples(samples: &[&TrajectorySample<T>]) -> Result<Self> {
        let tracks: Vec<&[Point<T>]> = samples.iter().map(|s| s.obs.as_slice()).collect();
        Self::from_tracks(&tracks)
    }
}

/// Everything the losses need from a batched forward pass.
pub struct ForwardOut {
    /// Encoder feature `[B x enc_hidden]` (decoder input).
    pub v: Var,
    /// Unit-norm projection `[B x proj_dim]` (contrastive input).
    pub proj: Var,
    /// Cumulative positions per future step, `[B x 2K]`; head `k` owns
    /// columns `2k, 2k + 1`.
    pub positions: Vec<Var>,
}

/// Per-sequence decoder terms that stay fixed across timesteps.
pub struct DecoderContext {
    d_h: Option<Var>,
    const_part: Var,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (he, n, nx, hh, z, k, dp) = (
            cfg.enc_hidden,
            cfg.dec_hidden,
            cfg.dec_input,
            cfg.hyper_hidden,
            cfg.z_dim,
            cfg.heads,
            cfg.proj_dim,
        );
        let mut set = ParamSet::new();
        let lstm_bias = |h: usize| {
            // forget-gate bias starts at 1
            let mut b = Tensor::zeros(&[4 * h]);
            for v in &mut b.data_mut()[2 * h..3 * h] {
                *v = T::one();
            }
            b
        };
        set.add("enc.w_x", glorot(&mut rng, 2, 4 * he));
        set.add("enc.w_h", glorot(&mut rng, he, 4 * he));
        set.add("enc.b", lstm_bias(he));
        set.add("proj.w", glorot(&mut rng, he, dp));
        set.add("proj.b", Tensor::zeros(&[dp]));
        set.add("hyper.w1", glorot(&mut rng, he, hh));
        set.add("hyper.b1", Tensor::zeros(&[hh]));
        set.add("hyper.w2", uniform(&mut rng, &[hh, 6 * z], 0.01));
        // z_h and z_x start at one so the weight-adjusting vectors start near 1.
        let mut b2 = Tensor::zeros(&[6 * z]);
        for v in &mut b2.data_mut()[..2 * z] {
            *v = T::one();
        }
        set.add("hyper.b2", b2);
        set.add("dec.w_h", glorot(&mut rng, n, 4 * n));
        set.add("dec.w_x", glorot(&mut rng, nx, 4 * n));
        let near_mean = |rng: &mut ChaCha8Rng| {
            uniform::<T, _>(rng, &[z, 4 * n], 0.01).map(|v| v + T::one() / T::from_usize_lossy(z))
        };
        set.add("dec.w_hz", near_mean(&mut rng));
        set.add("dec.w_xz", near_mean(&mut rng));
        for g in GATES {
            set.add(format!("dec.w_bz.{g}"), uniform(&mut rng, &[z, n], 0.01));
        }
        set.add("dec.b0", lstm_bias(n));
        set.add("seed.w_x", glorot(&mut rng, he, nx));
        set.add("seed.b_x", Tensor::zeros(&[nx]));
        set.add("seed.w_h", glorot(&mut rng, he, n));
        set.add("seed.b_h", Tensor::zeros(&[n]));
        set.add("heads.w", glorot(&mut rng, n, 2 * k));
        set.add("heads.b", Tensor::zeros(&[2 * k]));
        let ids = Some(Ids::resolve(&set)?);
        Ok(Self { cfg, set, ids })
    }

    /// Rebuilds name lookups after deserialization and checks every shape.
    pub fn from_parts(cfg: PredictorConfig, set: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let reference = Self::new(cfg.clone(), 0)?;
        if reference.set.len() != set.len() {
            return Err(Error::Contract(format!(
                "expected {} predictor tensors, found {}",
                reference.set.len(),
                set.len()
            )));
        }
        for id in reference.set.ids() {
            let name = reference.set.name(id);
            let other = set
                .id(name)
                .ok_or_else(|| Error::Contract(format!("predictor parameter {name} missing")))?;
            if set.get(other).shape() != reference.set.get(id).shape() {
                return Err(Error::Contract(format!("predictor parameter {name} has wrong shape")));
            }
        }
        let ids = Some(Ids::resolve(&set)?);
        Ok(Self { cfg, set, ids })
    }

    /// Re-resolves parameter handles after deserialization.
    pub fn restore(self) -> Result<Self> {
        Self::from_parts(self.cfg, self.set)
    }

    fn ids(&self) -> &Ids {
        self.ids.as_ref().expect("ids resolved at construction")
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: tape.bind(&self.set),
        }
    }

    /// Same network, all parameters zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.set.tensors_mut() {
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
        out
    }

    pub fn with_params(&self, set: ParamSet<T>) -> Self {
        Self {
            cfg: self.cfg.clone(),
            set,
            ids: self.ids.clone(),
        }
    }

    /// Standard LSTM over per-step displacements; final hidden state is `v`.
    pub fn encode_batch(&self, tape: &mut Tape<T>, b: &Bound, obs: &ObsBatch<T>) -> Result<Var> {
        let ids = self.ids();
        let he = self.cfg.enc_hidden;
        let mut h = tape.constant(Tensor::zeros(&[obs.len, he]));
        let mut m = tape.constant(Tensor::zeros(&[obs.len, he]));
        let (wx, wh, bias) = (b.get(ids.enc_wx), b.get(ids.enc_wh), b.get(ids.enc_b));
        for step in &obs.steps {
            let x = tape.constant(step.clone());
            let xw = tape.linear(x, wx, bias)?;
            let hw = tape.matmul(h, wh)?;
            let pre = tape.add(xw, hw)?;
            (h, m) = lstm_cell(tape, pre, m, he, false)?;
        }
        Ok(h)
    }

    /// Affine map then projection to the unit sphere.
    pub fn project_batch(&self, tape: &mut Tape<T>, b: &Bound, v: Var) -> Result<Var> {
        let ids = self.ids();
        let a = tape.linear(v, b.get(ids.proj_w), b.get(ids.proj_b))?;
        Ok(tape.l2_normalize(a, T::lit(PROJECT_EPS)))
    }

    /// Two-layer hypernetwork; returns `[B x 6 z_dim]` laid out as
    /// `z_h | z_x | z_b^i | z_b^g | z_b^f | z_b^o`.
    pub fn hyper_batch(&self, tape: &mut Tape<T>, b: &Bound, v: Var) -> Result<Var> {
        let ids = self.ids();
        let hdn = tape.linear(v, b.get(ids.hyp_w1), b.get(ids.hyp_b1))?;
        let act = tape.tanh(hdn);
        tape.linear(act, b.get(ids.hyp_w2), b.get(ids.hyp_b2))
    }

    /// Terms that do not change across decode steps: `d_h` and
    /// `d_x * (W_x x) + b` (hyper) or `W_x x + b_0` (plain).
    pub fn decoder_context(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        z: Option<Var>,
        x: Var,
    ) -> Result<DecoderContext> {
        let ids = self.ids();
        let zd = self.cfg.z_dim;
        let xw = tape.matmul(x, b.get(ids.dec_wx))?;
        match z {
            None => {
                let const_part = tape.add_row(xw, b.get(ids.dec_b0))?;
                Ok(DecoderContext {
                    d_h: None,
                    const_part,
                })
            }
            Some(z) => {
                let z_h = tape.slice_cols(z, 0, zd)?;
                let z_x = tape.slice_cols(z, zd, zd)?;
                let d_h = tape.matmul(z_h, b.get(ids.dec_whz))?;
                let d_x = tape.matmul(z_x, b.get(ids.dec_wxz))?;
                let x_part = tape.mul(d_x, xw)?;
                let mut bias_parts = Vec::with_capacity(4);
                for (gate, &wbz) in ids.dec_wbz.iter().enumerate() {
                    let z_b = tape.slice_cols(z, (2 + gate) * zd, zd)?;
                    bias_parts.push(tape.matmul(z_b, b.get(wbz))?);
                }
                let bias = tape.concat_cols(&bias_parts)?;
                let bias = tape.add_row(bias, b.get(ids.dec_b0))?;
                let const_part = tape.add(x_part, bias)?;
                Ok(DecoderContext {
                    d_h: Some(d_h),
                    const_part,
                })
            }
        }
    }

    /// One HyperLSTM step: per gate `LN(d_h * W_h h + d_x * W_x x + b)`,
    /// then the usual cell and hidden updates.
    pub fn decoder_step(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        ctx: &DecoderContext,
        h: Var,
        m: Var,
    ) -> Result<(Var, Var)> {
        let hw = tape.matmul(h, b.get(self.ids().dec_wh))?;
        let rec = match ctx.d_h {
            Some(d) => tape.mul(d, hw)?,
            None => hw,
        };
        let pre = tape.add(rec, ctx.const_part)?;
        lstm_cell(tape, pre, m, self.cfg.dec_hidden, true)
    }

    /// Runs the decoder from encoder features and returns the cumulative
    /// per-step positions of all heads.
    pub fn decode_batch(&self, tape: &mut Tape<T>, b: &Bound, v: Var, t_pred: usize) -> Result<Vec<Var>> {
        let ids = self.ids();
        let rows = tape.value(v).rows();
        let x1 = tape.linear(v, b.get(ids.seed_wx), b.get(ids.seed_bx))?;
        let mut h = tape.linear(v, b.get(ids.seed_wh), b.get(ids.seed_bh))?;
        let mut m = tape.constant(Tensor::zeros(&[rows, self.cfg.dec_hidden]));
        let z = if self.cfg.use_hyper {
            Some(self.hyper_batch(tape, b, v)?)
        } else {
            None
        };
        let ctx = self.decoder_context(tape, b, z, x1)?;
        let mut pos: Option<Var> = None;
        let mut out = Vec::with_capacity(t_pred);
        for _ in 0..t_pred {
            (h, m) = self.decoder_step(tape, b, &ctx, h, m)?;
            let disp = tape.linear(h, b.get(ids.head_w), b.get(ids.head_b))?;
            let p = match pos {
                None => disp,
                Some(prev) => tape.add(prev, disp)?,
            };
            pos = Some(p);
            out.push(p);
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        obs: &ObsBatch<T>,
        t_pred: usize,
    ) -> Result<ForwardOut> {
        let v = self.encode_batch(tape, b, obs)?;
        let proj = self.project_batch(tape, b, v)?;
        let positions = self.decode_batch(tape, b, v, t_pred)?;
        Ok(ForwardOut { v, proj, positions })
    }

    /// Encoder feature and its projection for one observation.
    pub fn encode(&self, obs: &[Point<T>]) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let batch = ObsBatch::from_tracks(&[obs])?;
        let v = self.encode_batch(&mut tape, &b, &batch)?;
        let p = self.project_batch(&mut tape, &b, v)?;
        Ok((tape.value(v).data().to_vec(), tape.value(p).data().to_vec()))
    }

    pub fn project(&self, v: &[T]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let vv = tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
        let p = self.project_batch(&mut tape, &b, vv)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn hyper_embed(&self, v: &[T]) -> Result<HyperEmbedding<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let vv = tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
        let z = self.hyper_batch(&mut tape, &b, vv)?;
        let zd = self.cfg.z_dim;
        let all = tape.value(z).data();
        let part = |i: usize| all[i * zd..(i + 1) * zd].to_vec();
        Ok(HyperEmbedding {
            z_h: part(0),
            z_x: part(1),
            z_b: [part(2), part(3), part(4), part(5)],
        })
    }

    /// One decoder step for a single instance with explicit hypernetwork
    /// outputs (the hypernetwork path is used regardless of `use_hyper`).
    pub fn hyperlstm_step(
        &self,
        z: &HyperEmbedding<T>,
        x: &[T],
        h: &[T],
        m: &[T],
    ) -> Result<(Vec<T>, Vec<T>)> {
        let zd = self.cfg.z_dim;
        let n = self.cfg.dec_hidden;
        if z.z_h.len() != zd || z.z_x.len() != zd || z.z_b.iter().any(|v| v.len() != zd) {
            return Err(Error::Dimension("hyper embedding width differs from z_dim".into()));
        }
        if x.len() != self.cfg.dec_input || h.len() != n || m.len() != n {
            return Err(Error::Dimension("decoder step input widths".into()));
        }
        let mut zflat = Vec::with_capacity(6 * zd);
        zflat.extend_from_slice(&z.z_h);
        zflat.extend_from_slice(&z.z_x);
        for zb in &z.z_b {
            zflat.extend_from_slice(zb);
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zv = tape.constant(Tensor::new(vec![1, 6 * zd], zflat)?);
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let hv = tape.constant(Tensor::new(vec![1, n], h.to_vec())?);
        let mv = tape.constant(Tensor::new(vec![1, n], m.to_vec())?);
        let ctx = self.decoder_context(&mut tape, &b, Some(zv), xv)?;
        let (h1, m1) = self.decoder_step(&mut tape, &b, &ctx, hv, mv)?;
        Ok((tape.value(h1).data().to_vec(), tape.value(m1).data().to_vec()))
    }

    /// K futures from an encoder feature.
    pub fn decode(&self, v: &[T], t_pred: usize) -> Result<PredictionSet<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let vv = tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
        let pos = self.decode_batch(&mut tape, &b, vv, t_pred)?;
        let vals: Vec<Tensor<T>> = pos.iter().map(|&p| tape.value(p).clone()).collect();
        Ok(unpack_predictions(&vals, self.cfg.heads).remove(0))
    }

    /// Batched inference; one [`PredictionSet`] per sample.
    pub fn predict(&self, samples: &[&TrajectorySample<T>], t_pred: usize) -> Result<Vec<PredictionSet<T>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let batch = ObsBatch::from_samples(samples)?;
        let v = self.encode_batch(&mut tape, &b, &batch)?;
        let pos = self.decode_batch(&mut tape, &b, v, t_pred)?;
        let vals: Vec<Tensor<T>> = pos.iter().map(|&p| tape.value(p).clone()).collect();
        Ok(unpack_predictions(&vals, self.cfg.heads))
    }

    /// Projected (unit-norm) features for a batch of samples, `[B x proj_dim]`.
    pub fn projections(&self, samples: &[&TrajectorySample<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let batch = ObsBatch::from_samples(samples)?;
        let v = self.encode_batch(&mut tape, &b, &batch)?;
        let p = self.project_batch(&mut tape, &b, v)?;
        Ok(tape.value(p).clone())
    }
}

/// Layer-normalized (optional) LSTM cell on stacked `[i | g | f | o]`
/// preactivations.
fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    pre: Var,
    m_prev: Var,
    hidden: usize,
    layer_norm: bool,
) -> Result<(Var, Var)> {
    let mut gates = [pre; 4];
    for (k, g) in gates.iter_mut().enumerate() {
        let s = tape.slice_cols(pre, k * hidden, hidden)?;
        *g = if layer_norm { tape.layer_norm(s)? } else { s };
    }
    let i = tape.sigmoid(gates[0]);
    let g = tape.tanh(gates[1]);
    let f = tape.sigmoid(gates[2]);
    let o = tape.sigmoid(gates[3]);
    let keep = tape.mul(f, m_prev)?;
    let write = tape.mul(i, g)?;
    let m = tape.add(keep, write)?;
    let tm = tape.tanh(m);
    let h = tape.mul(o, tm)?;
    Ok((h, m))
}

/// Splits `[B x 2K]` step matrices into per-sample prediction sets.
pub fn unpack_predictions<T: Scalar>(steps: &[Tensor<T>], heads: usize) -> Vec<PredictionSet<T>> {
    let rows = steps.first().map_or(0, Tensor::rows);
    (0..rows)
        .map(|r| PredictionSet {
            heads: (0..heads)
                .map(|k| {
                    steps
                        .iter()
                        .map(|s| [s.get(r, 2 * k), s.get(r, 2 * k + 1)])
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Mean L2 distance of one head's trajectory to the ground truth.
pub fn head_ade<T: Scalar>(head: &[Point<T>], gt: &[Point<T>]) -> T {
    let n = T::from_usize_lossy(gt.len().max(1));
    head.iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum::<T>()
        / n
}

/// Mean over steps of the squared Euclidean error of one head.
pub fn head_mse<T: Scalar>(head: &[Point<T>], gt: &[Point<T>]) -> T {
    let n = T::from_usize_lossy(gt.len().max(1));
    head.iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2))
        .sum::<T>()
        / n
}

/// Indices of the `k` heads with lowest ADE (ties broken by head index).
pub fn winners<T: Scalar>(pred: &PredictionSet<T>, gt: &[Point<T>], k: usize) -> Vec<usize> {
    let mut order: Vec<(T, usize)> = pred
        .heads
        .iter()
        .enumerate()
        .map(|(i, h)| (head_ade(h, gt), i))
        .collect();
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Evolving winner-take-all loss of one sample: the mean MSE of the
/// `k_winners` heads with lowest ADE.
pub fn ewta_loss<T: Scalar>(pred: &PredictionSet<T>, gt: &[Point<T>], k_winners: usize) -> Result<T> {
    let k = pred.num_heads();
    if k_winners == 0 || k_winners > k {
        return Err(Error::Contract(format!("k_winners {k_winners} outside 1..={k}")));
    }
    if pred.heads.iter().any(|h| h.len() != gt.len()) {
        return Err(Error::Contract("prediction and ground-truth lengths differ".into()));
    }
    let w = winners(pred, gt, k_winners);
    Ok(w.iter().map(|&i| head_mse(&pred.heads[i], gt)).sum::<T>() / T::from_usize_lossy(k_winners))
}

/// Batched EWTA on the tape. Returns the batch-mean loss and each sample's
/// own loss value. Winners are chosen from the current values, so gradients
/// reach only the winning heads.
pub fn ewta_loss_batch<T: Scalar>(
    tape: &mut Tape<T>,
    positions: &[Var],
    gt: &[&[Point<T>]],
    heads: usize,
    k_winners: usize,
) -> Result<(Var, Vec<T>)> {
    if k_winners == 0 || k_winners > heads {
        return Err(Error::Contract(format!("k_winners {k_winners} outside 1..={heads}")));
    }
    let t_pred = positions.len();
    let rows = gt.len();
    if t_pred == 0 || gt.iter().any(|g| g.len() != t_pred) {
        return Err(Error::Contract("ground-truth length differs from prediction".into()));
    }
    let vals: Vec<Tensor<T>> = positions.iter().map(|&p| tape.value(p).clone()).collect();
    let preds = unpack_predictions(&vals, heads);

    let mut sse: Option<Var> = None;
    for (t, &p) in positions.iter().enumerate() {
        let mut tiled = Vec::with_capacity(rows * 2 * heads);
        for g in gt {
            for _ in 0..heads {
                tiled.push(g[t][0]);
                tiled.push(g[t][1]);
            }
        }
        let target = tape.constant(Tensor::new(vec![rows, 2 * heads], tiled)?);
        let diff = tape.sub(p, target)?;
        let sq = tape.square(diff);
        sse = Some(match sse {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let sse = sse.expect("t_pred >= 1");

    let mut weights = Tensor::zeros(&[rows, 2 * heads]);
    let mut per_sample = Vec::with_capacity(rows);
    let w = T::one() / (T::from_usize_lossy(k_winners * t_pred));
    for (r, (pred, g)) in preds.iter().zip(gt).enumerate() {
        let win = winners(pred, g, k_winners);
        per_sample.push(
            win.iter().map(|&i| head_mse(&pred.heads[i], g)).sum::<T>()
                / T::from_usize_lossy(k_winners),
        );
        for i in win {
            weights.set(r, 2 * i, w);
            weights.set(r, 2 * i + 1, w);
        }
    }
    let total = tape.weighted_sum(sse, weights)?;
    let mean = tape.scale(total, T::one() / T::from_usize_lossy(rows.max(1)));
    Ok((mean, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PredictorConfig {
        PredictorConfig {
            enc_hidden: 6,
            dec_hidden: 5,
            dec_input: 3,
            hyper_hidden: 4,
            z_dim: 2,
            heads: 3,
            proj_dim: 4,
            use_hyper: true,
        }
    }

    #[test]
    fn default_shapes() {
        let p = PredictorParams::<f64>::new(PredictorConfig::default(), 1).unwrap();
        let obs: Vec<[f64; 2]> = (0..8).map(|k| [0.4 * k as f64 - 2.8, 0.0]).collect();
        let (v, proj) = p.encode(&obs).unwrap();
        assert_eq!(v.len(), 128);
        assert_eq!(proj.len(), 64);
        let pred = p.decode(&v, 12).unwrap();
        assert_eq!(pred.heads.len(), 20);
        assert!(pred.heads.iter().all(|h| h.len() == 12));
    }

    #[test]
    fn zero_params_predict_origin() {
        let p = PredictorParams::<f64>::new(small(), 2).unwrap().zeroed();
        let pred = p.decode(&[0.3, -0.1, 0.5, 0.9, 0.0, 1.0], 4).unwrap();
        assert!(pred.heads.iter().flatten().all(|q| *q == [0.0, 0.0]));
    }

    #[test]
    fn zero_hyper_weights_give_zero_z() {
        let mut p = PredictorParams::<f64>::new(small(), 3).unwrap();
        for name in ["hyper.w1", "hyper.b1", "hyper.w2", "hyper.b2"] {
            let id = p.set.id(name).unwrap();
            for v in p.set.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let z = p.hyper_embed(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(z.z_h.iter().chain(&z.z_x).chain(z.z_b.iter().flatten()).all(|&v| v == 0.0));
        assert_eq!(z.z_h.len(), 2);
    }

    #[test]
    fn ewta_k_bounds() {
        let pred = PredictionSet {
            heads: vec![vec![[0.0f64, 0.0]]; 2],
        };
        assert!(ewta_loss(&pred, &[[1.0, 0.0]], 0).is_err());
        assert!(ewta_loss(&pred, &[[1.0, 0.0]], 3).is_err());
    }

    #[test]
    fn ewta_winner_exact_is_zero() {
        let pred = PredictionSet {
            heads: vec![vec![[1.0f64, 1.0], [2.0, 2.0]], vec![vec![[5.0f64, 0.0], [6.0, 0.0]]].remove(0)],
        };
        assert_eq!(ewta_loss(&pred, &[[1.0, 1.0], [2.0, 2.0]], 1).unwrap(), 0.0);
    }
}
