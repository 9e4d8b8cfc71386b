use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fend_core::checkpoint::{self, Checkpoint};
use fend_core::cluster::ClusterModel;
use fend_core::eval::{
    bucket_by_baseline, cdf_table, diff_csv, evaluate_model, fde_cdf, fde_scores, pca_2d, report_csv,
    separation_stats, SampleMetrics,
};
use fend_core::extractor::{train_extractor_logged, ExtractorEpoch, ExtractorParams};
use fend_core::kalman::{kalman_scores_for, scores_to_csv};
use fend_core::numeric::Tensor;
use fend_core::predictor::PredictorParams;
use fend_core::trajdata::{load_dataset, DatasetSplit, TrajectorySample};
use fend_core::training::{log_to_jsonl, projections_chunked, pseudo_labels, train_fend, EpochRecord, GateMask};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageHashes};
use crate::UsageError;

#[derive(Serialize, Deserialize)]
struct ExtractorStage {
    params: ExtractorParams<f64>,
    log: Vec<ExtractorEpoch>,
}

#[derive(Serialize, Deserialize)]
pub struct TrainedStage {
    pub params: PredictorParams<f64>,
    pub gate: Option<GateMask>,
    pub log: Vec<EpochRecord>,
}

pub struct Run {
    pub cfg: RunConfig,
    pub hashes: StageHashes,
    pub dir: PathBuf,
    pub force: bool,
}

impl Run {
    pub fn new(cfg: RunConfig, run_dir: Option<PathBuf>, force: bool) -> Result<Self> {
        let hashes = StageHashes::new(&cfg)?;
        let dir = run_dir.unwrap_or_else(|| hashes.run_dir(&cfg));
        Ok(Self {
            cfg,
            hashes,
            dir,
            force,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.json"))
    }

    /// Loads a matching checkpoint or computes and saves the stage.
    fn stage<P, F>(&self, name: &str, hash: &str, compute: F) -> Result<P>
    where
        P: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<P>,
    {
        let path = self.path(name);
        if path.exists() {
            let ck: Checkpoint<P> = checkpoint::load(&path, name).with_context(|| format!("stage {name}"))?;
            if ck.config_hash == hash {
                eprintln!("[{name}] resumed from {}", path.display());
                return Ok(ck.payload);
            }
            if !self.force {
                return Err(UsageError(format!(
                    "stale checkpoint {} (config hash changed); rerun with --force to overwrite",
                    path.display()
                ))
                .into());
            }
            eprintln!("[{name}] overwriting stale checkpoint");
        }
        eprintln!("[{name}] running");
        let payload = compute().with_context(|| format!("stage {name} failed"))?;
        checkpoint::save(&path, &Checkpoint::new(name, hash, &payload)).with_context(|| format!("stage {name}"))?;
        Ok(payload)
    }

    fn load_split(&self) -> Result<DatasetSplit<f64>> {
        load_dataset(&self.cfg.dataset).context("stage dataset failed")
    }

    pub fn pipeline(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        fs::write(self.dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        let split = self.load_split()?;
        let clusters = if self.cfg.train.use_pcl {
            let ext: ExtractorStage = self.stage("extractor", &self.hashes.extractor, || {
                let (params, log) = train_extractor_logged(&split, &self.cfg.extractor, self.cfg.seed)?;
                Ok(ExtractorStage { params, log })
            })?;
            let ext = ext.params.restore()?;
            let model: ClusterModel<f64> = self.stage("clusters", &self.hashes.clusters, || {
                Ok(pseudo_labels(&split, &ext, self.cfg.train.future_enhanced, &self.cfg.cluster, self.cfg.seed)?)
            })?;
            fs::write(self.dir.join("clusters.csv"), model.assignments_csv())?;
            Some(model)
        } else {
            None
        };
        let base: TrainedStage = self.stage("baseline", &self.hashes.baseline, || {
            let out = train_fend(&split, None, &self.cfg.train.baseline().synced())?;
            Ok(TrainedStage {
                params: out.params,
                gate: out.gate,
                log: out.log,
            })
        })?;
        fs::write(self.dir.join("baseline_log.jsonl"), log_to_jsonl(&base.log)?)?;
        let fend: TrainedStage = self.stage("fend", &self.hashes.fend, || {
            let out = train_fend(&split, clusters.as_ref(), &self.cfg.train)?;
            Ok(TrainedStage {
                params: out.params,
                gate: out.gate,
                log: out.log,
            })
        })?;
        fs::write(self.dir.join("fend_log.jsonl"), log_to_jsonl(&fend.log)?)?;
        self.evaluate(&split, base, fend, clusters.as_ref())
    }

    pub fn eval_only(&self) -> Result<()> {
        let load = |name: &str, hash: &str| -> Result<TrainedStage> {
            let path = self.path(name);
            if !path.exists() {
                bail!("missing checkpoint {}", path.display());
            }
            let ck: Checkpoint<TrainedStage> = checkpoint::load(&path, name)?;
            if ck.config_hash != hash && !self.force {
                return Err(UsageError(format!("stale checkpoint {}; rerun with --force", path.display())).into());
            }
            Ok(ck.payload)
        };
        let base = load("baseline", &self.hashes.baseline)?;
        let fend = load("fend", &self.hashes.fend)?;
        let clusters = if self.path("clusters").exists() {
            Some(checkpoint::load::<ClusterModel<f64>>(&self.path("clusters"), "clusters")?.payload)
        } else {
            None
        };
        let split = self.load_split()?;
        self.evaluate(&split, base, fend, clusters.as_ref())
    }

    fn evaluate(
        &self,
        split: &DatasetSplit<f64>,
        base: TrainedStage,
        fend: TrainedStage,
        clusters: Option<&ClusterModel<f64>>,
    ) -> Result<()> {
        let reports = self.dir.join("reports");
        fs::create_dir_all(&reports)?;
        let base_params = base.params.restore()?;
        let fend_params = fend.params.restore()?;
        let base_m = evaluate_model(&base_params, &split.test).context("stage eval failed")?;
        let fend_m = evaluate_model(&fend_params, &split.test).context("stage eval failed")?;
        let scores = fde_scores(&base_m);
        let rb = bucket_by_baseline(&scores, &base_m)?;
        let rf = bucket_by_baseline(&scores, &fend_m)?;
        fs::write(reports.join("table.csv"), report_csv(&[("baseline", &rb), ("fend", &rf)]))?;
        fs::write(reports.join("diff.csv"), diff_csv(&rb, &rf))?;

        let kcfg = fend_core::kalman::KalmanConfig {
            dt: split.dt,
            ..self.cfg.kalman.clone()
        };
        let kscores = kalman_scores_for(&split.test, &kcfg)?;
        fs::write(reports.join("kalman_scores.csv"), scores_to_csv(&kscores))?;
        let kb = bucket_by_baseline(&kscores, &base_m)?;
        let kf = bucket_by_baseline(&kscores, &fend_m)?;
        fs::write(reports.join("table_kalman.csv"), report_csv(&[("baseline", &kb), ("fend", &kf)]))?;

        for (name, m) in [("baseline", &base_m), ("fend", &fend_m)] {
            let fdes: Vec<f64> = m.iter().map(|x| x.min_fde).collect();
            fs::write(reports.join(format!("cdf_{name}.txt")), cdf_table(&fde_cdf(&fdes, self.cfg.eval.cdf_bins)?))?;
            fs::write(reports.join(format!("metrics_{name}.csv")), metrics_csv(m))?;
        }

        if let Some(c) = clusters {
            let (samples, labels) = separation_subset(split, c, self.cfg.eval.max_separation_samples);
            if labels.iter().any(|&l| l != labels[0]) {
                let mut out = serde_json::Map::new();
                for (name, p) in [("baseline", &base_params), ("fend", &fend_params)] {
                    let feats = projections_chunked(p, &samples)?;
                    out.insert(name.to_string(), serde_json::to_value(separation_stats(&feats, &labels)?)?);
                    if name == "fend" {
                        let ids: Vec<u64> = samples.iter().map(|s| s.sample_id).collect();
                        fs::write(reports.join("pca_fend.csv"), pca_csv(&ids, &pca_2d(&feats)))?;
                    }
                }
                fs::write(reports.join("separation.json"), serde_json::to_string_pretty(&out)? + "\n")?;
            }
        }
        print!("{}", report_csv(&[("baseline", &rb), ("fend", &rf)]));
        eprintln!("reports written to {}", reports.display());
        Ok(())
    }
}

/// Training samples used for separation diagnostics: the tail-pattern
/// samples when labels exist, otherwise all, capped at `cap`; paired with
/// their finest-level pseudo labels.
fn separation_subset<'a>(
    split: &'a DatasetSplit<f64>,
    clusters: &ClusterModel<f64>,
    cap: usize,
) -> (Vec<&'a TrajectorySample<f64>>, Vec<usize>) {
    let finest = clusters.finest_level().unwrap_or(0);
    let pos: std::collections::HashMap<u64, usize> =
        clusters.sample_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let labelled = split.train.iter().any(|s| s.pattern_label.is_some());
    let samples: Vec<&TrajectorySample<f64>> = split
        .train
        .iter()
        .filter(|s| !labelled || s.is_tail())
        .filter(|s| pos.contains_key(&s.sample_id))
        .take(cap)
        .collect();
    let labels = samples
        .iter()
        .map(|s| clusters.levels[finest].assignments[pos[&s.sample_id]])
        .collect();
    (samples, labels)
}

fn metrics_csv(m: &[SampleMetrics<f64>]) -> String {
    let mut s = String::from("sample_id,min_ade,min_fde\n");
    for x in m {
        s.push_str(&format!("{},{},{}\n", x.sample_id, x.min_ade, x.min_fde));
    }
    s
}

fn pca_csv(ids: &[u64], pts: &Tensor<f64>) -> String {
    let mut s = String::from("sample_id,pc1,pc2\n");
    for (r, id) in ids.iter().enumerate() {
        s.push_str(&format!("{id},{},{}\n", pts.get(r, 0), pts.get(r, 1)));
    }
    s
}

pub fn write_new(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(UsageError(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
