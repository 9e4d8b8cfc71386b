use fend_core::kalman::{kalman_fde, kalman_predict, kalman_scores, KalmanConfig};
use fend_core::trajdata::{normalize, synth_longtail, DatasetSplit, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn constant_velocity_is_exact() {
    let cfg = KalmanConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in 0..200 {
        let p0 = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let pt = |t: usize| [p0[0] + v[0] * cfg.dt * t as f64, p0[1] + v[1] * cfg.dt * t as f64];
        let obs: Vec<[f64; 2]> = (0..8).map(pt).collect();
        let fut: Vec<[f64; 2]> = (8..20).map(pt).collect();
        let s = normalize(id, &obs, &fut, Some(0)).unwrap();
        let fde = kalman_fde(&s, &cfg).unwrap();
        assert!(fde < 1e-9, "sample {id}: {fde}");
    }
}

#[test]
fn forecast_has_requested_length() {
    let obs = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
    let cfg = KalmanConfig::default();
    assert_eq!(kalman_predict(&obs, 5, &cfg).unwrap().len(), 5);
    assert!(kalman_predict(&obs[..1], 5, &cfg).is_err());
}

fn mean_by_tail(split: &DatasetSplit<f64>) -> (f64, f64) {
    let scores = kalman_scores(split, &KalmanConfig::default()).unwrap();
    let tail: std::collections::HashMap<u64, bool> = split.all().map(|s| (s.sample_id, s.is_tail())).collect();
    let (mut st, mut nt, mut sh, mut nh) = (0.0, 0, 0.0, 0);
    for (id, f) in scores {
        if tail[&id] {
            st += f;
            nt += 1;
        } else {
            sh += f;
            nh += 1;
        }
    }
    (st / nt as f64, sh / nh as f64)
}

#[test]
fn tail_samples_are_harder_for_the_filter() {
    for seed in 1..=5 {
        let split: DatasetSplit<f64> = synth_longtail(&SynthConfig {
            n: 10_000,
            tail_fraction: 0.1,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let (tail, head) = mean_by_tail(&split);
        assert!(tail > head, "seed {seed}: tail {tail} head {head}");
    }
}
