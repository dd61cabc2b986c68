use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, knn_baseline, train, EvalReport, Result, Summary, TrainConfig, TrainError};
use crate::fingerprint::FingerprintDataset;
use crate::vit::ModelSpec;

/// Paired reports from runs that differ only in the stochastic DAM stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamAblation {
    pub with_dam: EvalReport,
    pub without_dam: EvalReport,
}

pub fn ablate_dam(
    train_set: &FingerprintDataset,
    test_set: &FingerprintDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<DamAblation> {
    let run = |c: &TrainConfig| evaluate(&train(train_set, spec, c)?.bundle, test_set);
    Ok(DamAblation {
        with_dam: run(config)?,
        without_dam: run(&config.without_dam())?,
    })
}

/// Base-device records split into train/test, plus every record of the
/// held-out devices.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub train: FingerprintDataset,
    pub base_test: FingerprintDataset,
    pub extended: FingerprintDataset,
}

pub fn held_out_split(
    dataset: &FingerprintDataset,
    base_devices: &[String],
    extended_devices: &[String],
    train_ratio: f64,
    seed: u64,
) -> Result<HeldOut> {
    if extended_devices.is_empty() {
        return Err(TrainError::Config("no extended devices to evaluate".into()));
    }
    if base_devices.is_empty() {
        return Err(TrainError::Config("no base devices to train on".into()));
    }
    let base: BTreeSet<&str> = base_devices.iter().map(String::as_str).collect();
    let ext: BTreeSet<&str> = extended_devices.iter().map(String::as_str).collect();
    if let Some(d) = base.intersection(&ext).next() {
        return Err(TrainError::Config(format!(
            "device {d} is listed as both base and extended"
        )));
    }
    let known: BTreeSet<String> = dataset.devices().into_iter().collect();
    if let Some(d) = base.union(&ext).find(|d| !known.contains(**d)) {
        return Err(TrainError::Config(format!("device {d} has no records")));
    }
    let (train, base_test) = dataset
        .filter(|r| base.contains(r.device_id.as_str()))
        .split(train_ratio, seed)?;
    Ok(HeldOut {
        train,
        base_test,
        extended: dataset.filter(|r| ext.contains(r.device_id.as_str())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    /// Held-back records of the training devices.
    pub base: EvalReport,
    /// Every record of the devices never seen in training.
    pub extended: EvalReport,
}

/// Trains on base devices only and scores both the base test split and the
/// extended devices.
pub fn extended_device_eval(
    dataset: &FingerprintDataset,
    base_devices: &[String],
    extended_devices: &[String],
    train_ratio: f64,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<HeldOutReport> {
    let split = held_out_split(
        dataset,
        base_devices,
        extended_devices,
        train_ratio,
        config.seed,
    )?;
    let bundle = train(&split.train, spec, config)?.bundle;
    Ok(HeldOutReport {
        base: evaluate(&bundle, &split.base_test)?,
        extended: evaluate(&bundle, &split.extended)?,
    })
}

/// KNN counterpart of [`extended_device_eval`] on the same split.
pub fn extended_device_knn(split: &HeldOut, k: usize) -> Result<HeldOutReport> {
    Ok(HeldOutReport {
        base: knn_baseline(&split.train, &split.base_test, k)?,
        extended: knn_baseline(&split.train, &split.extended, k)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub image_sizes: Vec<usize>,
    pub patch_sizes: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Number of hidden layers in the classification head.
    pub head_mlp_layers: Vec<usize>,
    #[serde(default = "default_head_width")]
    pub head_mlp_width: usize,
}

fn default_head_width() -> usize {
    128
}

impl SweepGrid {
    /// Points in canonical order: image size, patch size, heads, head layers.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &image_size in &self.image_sizes {
            for &patch_size in &self.patch_sizes {
                for &num_heads in &self.num_heads {
                    for &head_mlp_layers in &self.head_mlp_layers {
                        out.push(SweepPoint {
                            image_size,
                            patch_size,
                            num_heads,
                            head_mlp_layers,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub head_mlp_layers: usize,
}

impl SweepPoint {
    /// The base configs with this point's hyperparameters substituted.
    pub fn apply(
        &self,
        spec: &ModelSpec,
        config: &TrainConfig,
        head_width: usize,
    ) -> (ModelSpec, TrainConfig) {
        let mut s = spec.clone();
        s.image_size = self.image_size;
        s.patch_size = self.patch_size;
        s.num_heads = self.num_heads;
        s.head_hidden_dims = vec![head_width; self.head_mlp_layers];
        let mut c = config.clone();
        c.dam.image_size = self.image_size;
        (s, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub result: std::result::Result<Summary, String>,
}

/// One train + evaluate per grid point, `jobs` at a time. A failing point
/// is recorded in its row and does not stop the others.
pub fn sweep(
    train_set: &FingerprintDataset,
    test_set: &FingerprintDataset,
    grid: &SweepGrid,
    spec: &ModelSpec,
    config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if jobs == 0 {
        return Err(TrainError::Config("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let points = grid.points();
    Ok(pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let (s, c) = p.apply(spec, config, grid.head_mlp_width);
                let result = train(train_set, &s, &c)
                    .and_then(|out| evaluate(&out.bundle, test_set))
                    .map(|r| r.overall)
                    .map_err(|e| e.to_string());
                SweepRow { point: *p, result }
            })
            .collect()
    }))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image_size",
        "patch_size",
        "num_heads",
        "head_mlp_layers",
        "status",
        "count",
        "min_error_m",
        "mean_error_m",
        "max_error_m",
        "accuracy",
        "error",
    ])
    .expect("in-memory write");
    for row in rows {
        let p = row.point;
        let mut fields = vec![
            p.image_size.to_string(),
            p.patch_size.to_string(),
            p.num_heads.to_string(),
            p.head_mlp_layers.to_string(),
        ];
        match &row.result {
            Ok(s) => fields.extend([
                "ok".into(),
                s.count.to_string(),
                s.min_error_m.to_string(),
                s.mean_error_m.to_string(),
                s.max_error_m.to_string(),
                s.accuracy.to_string(),
                String::new(),
            ]),
            Err(e) => {
                fields.push("invalid".into());
                fields.extend(std::iter::repeat_n(String::new(), 5));
                fields.push(e.clone());
            }
        }
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
