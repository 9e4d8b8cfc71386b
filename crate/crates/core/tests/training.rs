use fend_core::cluster::{ClusterConfig, ClusterModel};
use fend_core::extractor::{train_extractor, ExtractorConfig};
use fend_core::predictor::{PredictorConfig, PredictorParams};
use fend_core::trajdata::{synth_longtail, DatasetSplit, SynthConfig};
use fend_core::training::{compute_gate, pseudo_labels, train_fend, TrainConfig};
use fend_core::Error;

fn split() -> DatasetSplit<f64> {
    synth_longtail(&SynthConfig {
        n: 240,
        tail_fraction: 0.25,
        seed: 12,
        t_obs: 5,
        t_pred: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_predictor() -> PredictorConfig {
    PredictorConfig {
        enc_hidden: 8,
        dec_hidden: 8,
        dec_input: 4,
        hyper_hidden: 8,
        z_dim: 3,
        heads: 4,
        proj_dim: 6,
        use_hyper: true,
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        warmup_epochs: 3,
        a_switch_epoch: 2,
        batch_size: 32,
        seed: 5,
        grad_clip: 1.0,
        predictor: small_predictor(),
        ..TrainConfig::default()
    }
}

fn clusters(split: &DatasetSplit<f64>) -> ClusterModel<f64> {
    let ecfg = ExtractorConfig {
        embed_dim: 6,
        conv_channels: 4,
        epochs: 1,
        batch_size: 64,
        cluster: ClusterConfig {
            levels: vec![4, 8],
            ..ClusterConfig::desk()
        },
        ..ExtractorConfig::default()
    };
    let ext = train_extractor(split, &ecfg, 1).unwrap();
    pseudo_labels(split, &ext, true, &ecfg.cluster, 1).unwrap()
}

#[test]
fn gate_extremes_are_exact() {
    let split = split();
    let params: PredictorParams<f64> = PredictorParams::new(small_predictor(), 3).unwrap();
    let all = compute_gate(&split.train, &params, 0.0, 2).unwrap();
    assert!(all.active.iter().all(|&a| a));
    assert_eq!(all.active_fraction(&all.ids), 1.0);
    let none = compute_gate(&split.train, &params, 1e6, 2).unwrap();
    assert!(none.active.iter().all(|&a| !a));
    assert_eq!(none.active_fraction(&none.ids), 0.0);
    for (l, a) in all.losses.iter().zip(&all.active) {
        assert_eq!(*a, *l > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let split = split();
    let c = clusters(&split);
    let cfg = small_train();
    let a = train_fend(&split, Some(&c), &cfg).unwrap();
    let b = train_fend(&split, Some(&c), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.gate, b.gate);
}

#[test]
fn warmup_ignores_the_contrastive_switch() {
    let split = split();
    let c = clusters(&split);
    let on = train_fend(&split, Some(&c), &small_train()).unwrap();
    let off_cfg = TrainConfig {
        use_pcl: false,
        ..small_train()
    };
    let off = train_fend(&split, None, &off_cfg).unwrap();
    assert_eq!(on.warmup_params, off.warmup_params);
    assert_eq!(on.log[..3], off.log[..3]);
    assert_ne!(on.params, off.params);
    assert!(off.gate.is_none());
}

#[test]
fn log_follows_the_schedule() {
    let split = split();
    let c = clusters(&split);
    let cfg = small_train();
    let out = train_fend(&split, Some(&c), &cfg).unwrap();
    assert_eq!(out.log.len(), cfg.epochs);
    let gate = out.gate.as_ref().unwrap();
    for r in &out.log {
        let post = r.epoch >= cfg.warmup_epochs;
        assert_eq!(r.k_winners, cfg.k_winners(r.epoch));
        assert_eq!(r.gate_digest.is_some(), post);
        if post {
            assert_eq!(r.gate_digest, Some(gate.digest()));
            assert_eq!(r.a, cfg.a_schedule(r.epoch - cfg.warmup_epochs));
            assert!(r.pcl_loss > 0.0);
        } else {
            assert_eq!(r.pcl_loss, 0.0);
        }
    }
    assert_eq!(gate.k_winners, cfg.k_winners(cfg.warmup_epochs - 1));
}

#[test]
fn contrastive_training_needs_matching_clusters() {
    let split = split();
    let err = train_fend(&split, None, &small_train()).err().unwrap();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    let mut c = clusters(&split);
    c.sample_ids[0] = 999_999;
    assert!(train_fend(&split, Some(&c), &small_train()).is_err());
}

#[test]
fn invalid_schedules_are_config_errors() {
    let split = split();
    let bad = [
        TrainConfig { warmup_epochs: 6, ..small_train() },
        TrainConfig { lr: 0.0, ..small_train() },
        TrainConfig { use_hyper: false, ..small_train() },
    ];
    for cfg in bad {
        let err = train_fend(&split, None, &cfg).err().unwrap();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }
}
