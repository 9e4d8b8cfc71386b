use fend_core::cluster::{build_hierarchy, clamp_densities, density, kmeans, ClusterConfig};
use fend_core::eval::adjusted_rand_index;
use fend_core::numeric::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Four isotropic blobs, centers 20 sigma apart; returns features and true labels.
fn blobs(seed: u64, per: usize) -> (Tensor<f64>, Vec<usize>) {
    let centers = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per * 4 {
        let c = i % 4;
        rows.push(vec![centers[c][0] + noise.sample(&mut rng), centers[c][1] + noise.sample(&mut rng)]);
        labels.push(c);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn separated_blobs_are_recovered_exactly() {
    for seed in 1..=5 {
        let (x, truth) = blobs(seed, 50);
        let km = kmeans(&x, 4, seed, 100, 3).unwrap();
        let ari = adjusted_rand_index(&km.assignments, &truth).unwrap();
        assert_eq!(ari, 1.0, "seed {seed}");
    }
}

#[test]
fn lloyd_inertia_never_increases() {
    for seed in 0..5 {
        let (x, _) = blobs(100 + seed, 30);
        for k in [2, 3, 5, 8] {
            let km = kmeans(&x, k, seed, 50, 1).unwrap();
            assert!(!km.history.is_empty());
            for w in km.history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed} k {k}: {:?}", km.history);
            }
            assert_eq!(*km.history.last().unwrap(), km.inertia);
        }
    }
}

#[test]
fn density_of_ten_unit_members() {
    let proto = [0.0, 0.0];
    let members: Vec<[f64; 2]> = (0..10)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 10.0;
            [a.cos(), a.sin()]
        })
        .collect();
    let refs: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
    let d = density(&refs, &proto, 10.0);
    assert!((d - 1.0 / 20f64.ln()).abs() <= 1e-12, "{d}");
}

#[test]
fn clamped_densities_stay_in_percentile_range() {
    let raw: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let c = clamp_densities(&raw);
    assert!((c[0] - 2.9).abs() < 1e-12);
    assert!((c[19] - 18.1).abs() < 1e-12);
    assert_eq!(c[10], 11.0);
    let degenerate = clamp_densities(&[0.0, 0.0, 0.0]);
    assert!(degenerate.iter().all(|&d| d == 1.0));
}

#[test]
fn hierarchy_levels_do_not_depend_on_order() {
    let (x, _) = blobs(3, 40);
    let ids: Vec<u64> = (0..x.rows() as u64).collect();
    let a = build_hierarchy(&x, &ids, &ClusterConfig { levels: vec![4, 8], ..ClusterConfig::default() }, 5).unwrap();
    let b = build_hierarchy(&x, &ids, &ClusterConfig { levels: vec![8, 4], ..ClusterConfig::default() }, 5).unwrap();
    assert_eq!(a.levels[0], b.levels[1]);
    assert_eq!(a.levels[1], b.levels[0]);
    assert_eq!(a.finest_level(), Some(1));
    for level in &a.levels {
        assert_eq!(level.counts.iter().sum::<usize>(), x.rows());
        assert_eq!(level.densities.len(), level.n_clusters);
    }
}

#[test]
fn kmeans_rejects_bad_inputs() {
    let x = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert!(kmeans(&x, 3, 0, 10, 1).is_err());
    assert!(kmeans(&x, 0, 0, 10, 1).is_err());
    let bad = Tensor::from_rows(&[vec![f64::NAN], vec![1.0]]).unwrap();
    assert!(kmeans(&bad, 1, 0, 10, 1).is_err());
}
