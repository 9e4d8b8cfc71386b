//! Brute-force reference implementations shared by the integration tests.
//! Everything here works on plain `f64` slices with explicit loops.

#![allow(dead_code)]

use fend_core::numeric::Tensor;
use fend_core::predictor::PredictionSet;
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn unit_rows(rows: &mut [Vec<f64>]) {
    for r in rows {
        let n = dot(r, r).sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Instance term with explicit exponentials.
pub fn instance_loss(v: &[Vec<f64>], labels: &[usize], active: &[bool], tau: f64) -> f64 {
    let r = v.len();
    let mut total = 0.0;
    for i in 0..r {
        if !active[i] {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..r {
            denom += (dot(&v[i], &v[j]) / tau).exp();
        }
        let mut sum = 0.0;
        let mut count = 0;
        for p in 0..r {
            if p == i || !active[p] || labels[p] != labels[i] {
                continue;
            }
            sum += ((dot(&v[i], &v[p]) / tau).exp() / denom).ln();
            count += 1;
        }
        if count > 0 {
            total -= sum / count as f64;
        }
    }
    total
}

/// Prototype term with explicit exponentials. `assign[m][i]`.
pub fn proto_loss(
    v: &[Vec<f64>],
    assign: &[Vec<usize>],
    protos: &[Vec<Vec<f64>>],
    phis: &[Vec<f64>],
    active: &[bool],
) -> f64 {
    let m = protos.len();
    let mut total = 0.0;
    for i in 0..v.len() {
        if !active[i] {
            continue;
        }
        for l in 0..m {
            let mut denom = 0.0;
            for (c, phi) in protos[l].iter().zip(&phis[l]) {
                denom += (dot(&v[i], c) / phi).exp();
            }
            let s = assign[l][i];
            let num = (dot(&v[i], &protos[l][s]) / phis[l][s]).exp();
            total -= (num / denom).ln();
        }
    }
    total / m as f64
}

pub fn density(members: &[Vec<f64>], proto: &[f64], alpha: f64) -> f64 {
    let z = members.len() as f64;
    let mut s = 0.0;
    for m in members {
        s += dist(m, proto);
    }
    s / (z * (z + alpha).ln())
}

/// EWTA by exhaustive ranking: every head's ADE, stable sort, mean MSE of the best `k`.
pub fn ewta(pred: &[Vec<[f64; 2]>], gt: &[[f64; 2]], k: usize) -> f64 {
    let t = gt.len() as f64;
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (h, head) in pred.iter().enumerate() {
        let mut ade = 0.0;
        for (p, g) in head.iter().zip(gt) {
            ade += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        }
        scored.push((ade / t, h));
    }
    for a in 0..scored.len() {
        for b in 0..scored.len() - 1 - a {
            let (x, y) = (scored[b], scored[b + 1]);
            if x.0 > y.0 || (x.0 == y.0 && x.1 > y.1) {
                scored.swap(b, b + 1);
            }
        }
    }
    let mut total = 0.0;
    for &(_, h) in scored.iter().take(k) {
        let mut mse = 0.0;
        for (p, g) in pred[h].iter().zip(gt) {
            mse += (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
        }
        total += mse / t;
    }
    total / k as f64
}

pub fn min_ade_fde(pred: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> (f64, f64) {
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for head in pred {
        let d: Vec<f64> = head
            .iter()
            .zip(gt)
            .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .collect();
        best_ade = best_ade.min(d.iter().sum::<f64>() / d.len() as f64);
        best_fde = best_fde.min(*d.last().unwrap());
    }
    (best_ade, best_fde)
}

pub fn random_prediction<R: Rng>(rng: &mut R, k: usize, t: usize) -> (PredictionSet<f64>, Vec<[f64; 2]>) {
    let pt = |rng: &mut R| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let heads = (0..k).map(|_| (0..t).map(|_| pt(rng)).collect()).collect();
    let gt = (0..t).map(|_| pt(rng)).collect();
    (PredictionSet { heads }, gt)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layer norm without gain or bias.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

/// Row vector times a row-major `[rows x cols]` matrix.
pub fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w[r * cols + c];
        }
    }
    out
}

/// Plain LSTM step with every gate preactivation layer-normalized.
/// Gates are stacked `[i | g | f | o]` in `w_x`, `w_h` and `b`.
pub fn ln_lstm_step(
    w_x: &[f64],
    w_h: &[f64],
    b: &[f64],
    x: &[f64],
    h: &[f64],
    m: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let xw = vec_mat(x, w_x, 4 * n);
    let hw = vec_mat(h, w_h, 4 * n);
    let pre: Vec<f64> = (0..4 * n).map(|j| xw[j] + hw[j] + b[j]).collect();
    let gate = |k: usize| layer_norm(&pre[k * n..(k + 1) * n], eps);
    let (i, g, f, o) = (gate(0), gate(1), gate(2), gate(3));
    let mut m1 = vec![0.0; n];
    let mut h1 = vec![0.0; n];
    for j in 0..n {
        m1[j] = sigmoid(f[j]) * m[j] + sigmoid(i[j]) * g[j].tanh();
        h1[j] = sigmoid(o[j]) * m1[j].tanh();
    }
    (h1, m1)
}
