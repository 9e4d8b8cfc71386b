//! Constant-velocity Kalman baseline and the hardness scores derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajdata::{DatasetSplit, Point, TrajectorySample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// White-noise acceleration spectral density (m/s² equivalent).
    pub process_noise_sigma: f64,
    /// Position measurement noise (m).
    pub obs_noise_sigma: f64,
    /// Seconds between consecutive points.
    pub dt: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            process_noise_sigma: 0.5,
            obs_noise_sigma: 0.05,
            dt: 0.4,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.process_noise_sigma > 0.0) {
            return Err(Error::config("process_noise_sigma", "must be positive"));
        }
        if !(self.obs_noise_sigma > 0.0) {
            return Err(Error::config("obs_noise_sigma", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        Ok(())
    }
}

type M4<T> = [[T; 4]; 4];

fn mat_mul<T: Scalar>(a: &M4<T>, b: &M4<T>) -> M4<T> {
    let mut out = [[T::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose<T: Scalar>(a: &M4<T>) -> M4<T> {
    let mut out = [[T::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[j][i] = a[i][j];
        }
    }
    out
}

/// Filters the observations with a 4-state `(x, y, vx, vy)` constant-velocity
/// model, then rolls the motion model forward `t_pred` steps.
///
/// The state starts at the second observed point with the finite-difference
/// velocity of the first two points and unit diagonal covariance; the
/// remaining observations are incorporated as position measurements.
pub fn kalman_predict<T: Scalar>(
    obs: &[Point<T>],
    t_pred: usize,
    cfg: &KalmanConfig,
) -> Result<Vec<Point<T>>> {
    if obs.len() < 2 {
        return Err(Error::Contract(format!(
            "kalman_predict needs at least 2 observed points, got {}",
            obs.len()
        )));
    }
    cfg.validate()?;
    let dt = T::lit(cfg.dt);
    let (zero, one) = (T::zero(), T::one());

    let f: M4<T> = [
        [one, zero, dt, zero],
        [zero, one, zero, dt],
        [zero, zero, one, zero],
        [zero, zero, zero, one],
    ];
    let ft = transpose(&f);
    let q_scale = T::lit(cfg.process_noise_sigma * cfg.process_noise_sigma);
    let (dt2, dt3, dt4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    let (q_pp, q_pv, q_vv) = (
        q_scale * dt4 / T::lit(4.0),
        q_scale * dt3 / T::lit(2.0),
        q_scale * dt2,
    );
    let q: M4<T> = [
        [q_pp, zero, q_pv, zero],
        [zero, q_pp, zero, q_pv],
        [q_pv, zero, q_vv, zero],
        [zero, q_pv, zero, q_vv],
    ];
    let r = T::lit(cfg.obs_noise_sigma * cfg.obs_noise_sigma);

    let mut x = [
        obs[1][0],
        obs[1][1],
        (obs[1][0] - obs[0][0]) / dt,
        (obs[1][1] - obs[0][1]) / dt,
    ];
    let mut p: M4<T> = [[zero; 4]; 4];
    for (i, row) in p.iter_mut().enumerate() {
        row[i] = one;
    }

    let predict = |x: &[T; 4]| -> [T; 4] {
        [x[0] + dt * x[2], x[1] + dt * x[3], x[2], x[3]]
    };

    for z in &obs[2..] {
        x = predict(&x);
        p = mat_mul(&mat_mul(&f, &p), &ft);
        for i in 0..4 {
            for j in 0..4 {
                p[i][j] += q[i][j];
            }
        }
        // H selects the position block, so S = P[0..2][0..2] + R.
        let s = [[p[0][0] + r, p[0][1]], [p[1][0], p[1][1] + r]];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let s_inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let mut k = [[zero; 2]; 4];
        for i in 0..4 {
            for j in 0..2 {
                k[i][j] = p[i][0] * s_inv[0][j] + p[i][1] * s_inv[1][j];
            }
        }
        let innov = [z[0] - x[0], z[1] - x[1]];
        for i in 0..4 {
            x[i] += k[i][0] * innov[0] + k[i][1] * innov[1];
        }
        let mut np = p;
        for i in 0..4 {
            for j in 0..4 {
                np[i][j] = p[i][j] - (k[i][0] * p[0][j] + k[i][1] * p[1][j]);
            }
        }
        p = np;
    }

    let mut out = Vec::with_capacity(t_pred);
    for _ in 0..t_pred {
        x = predict(&x);
        out.push([x[0], x[1]]);
    }
    Ok(out)
}

/// Final displacement error of the Kalman forecast, in raw coordinates.
pub fn kalman_fde<T: Scalar>(sample: &TrajectorySample<T>, cfg: &KalmanConfig) -> Result<T> {
    let obs = sample.raw_obs();
    let fut = sample.raw_fut();
    let pred = kalman_predict(&obs, fut.len(), cfg)?;
    let (Some(p), Some(g)) = (pred.last(), fut.last()) else {
        return Ok(T::zero());
    };
    Ok(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
}

/// Per-sample Kalman FDE, `(sample_id, fde)`, in the given order.
pub fn kalman_scores_for<T: Scalar>(
    samples: &[TrajectorySample<T>],
    cfg: &KalmanConfig,
) -> Result<Vec<(u64, T)>> {
    samples
        .iter()
        .map(|s| Ok((s.sample_id, kalman_fde(s, cfg)?)))
        .collect()
}

/// Scores for every sample of the split, train first then test.
/// The split's own time step overrides `cfg.dt`.
pub fn kalman_scores<T: Scalar>(split: &DatasetSplit<T>, cfg: &KalmanConfig) -> Result<Vec<(u64, T)>> {
    let cfg = KalmanConfig {
        dt: split.dt.to_f64_lossy(),
        ..cfg.clone()
    };
    let mut out = kalman_scores_for(&split.train, &cfg)?;
    out.extend(kalman_scores_for(&split.test, &cfg)?);
    Ok(out)
}

/// `sample_id,kalman_fde` CSV.
pub fn scores_to_csv<T: Scalar>(scores: &[(u64, T)]) -> String {
    let mut s = String::from("sample_id,kalman_fde\n");
    for (id, v) in scores {
        s.push_str(&format!("{id},{v}\n"));
    }
    s
}
