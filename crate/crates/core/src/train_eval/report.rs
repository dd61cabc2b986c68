use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelBundle, Result, TrainError};
use crate::fingerprint::{FingerprintDataset, ReferencePoint};

/// Outcome for one test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub building_id: u32,
    pub device_id: String,
    pub true_rp: u32,
    pub predicted_rp: u32,
    /// Distance between the predicted and true RP coordinates, metres.
    pub error_m: f64,
}

impl Prediction {
    pub fn new(device_id: &str, truth: &ReferencePoint, predicted: &ReferencePoint) -> Self {
        Self {
            building_id: truth.building_id,
            device_id: device_id.to_string(),
            true_rp: truth.rp_id,
            predicted_rp: predicted.rp_id,
            error_m: truth.distance(predicted),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.true_rp == self.predicted_rp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min_error_m: f64,
    pub mean_error_m: f64,
    pub max_error_m: f64,
    pub accuracy: f64,
}

impl Summary {
    fn of<'a>(preds: impl IntoIterator<Item = &'a Prediction>) -> Option<Self> {
        let mut count = 0;
        let (mut min, mut max, mut sum, mut hits) = (f64::INFINITY, 0.0f64, 0.0, 0);
        for p in preds {
            count += 1;
            min = min.min(p.error_m);
            max = max.max(p.error_m);
            sum += p.error_m;
            hits += usize::from(p.is_correct());
        }
        (count > 0).then(|| Summary {
            count,
            min_error_m: min,
            // Clamp guards the mean against rounding past the extremes.
            mean_error_m: (sum / count as f64).clamp(min, max),
            max_error_m: max,
            accuracy: hits as f64 / count as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub building_id: u32,
    pub device_id: String,
    #[serde(flatten)]
    pub stats: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// `vital` or `knn`.
    pub method: String,
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    /// One cell per (building, device), sorted.
    pub cells: Vec<CellStats>,
    /// Per device, pooled over buildings.
    pub devices: BTreeMap<String, Summary>,
    pub overall: Summary,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[Prediction], metadata: ReportMetadata) -> Result<Self> {
        let overall = Summary::of(predictions)
            .ok_or_else(|| TrainError::Eval("no test records to evaluate".into()))?;
        let mut groups: BTreeMap<(u32, &str), Vec<&Prediction>> = BTreeMap::new();
        let mut by_device: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
        for p in predictions {
            groups
                .entry((p.building_id, &p.device_id))
                .or_default()
                .push(p);
            by_device.entry(&p.device_id).or_default().push(p);
        }
        let cells = groups
            .into_iter()
            .filter_map(|((building_id, device), ps)| {
                Some(CellStats {
                    building_id,
                    device_id: device.to_string(),
                    stats: Summary::of(ps)?,
                })
            })
            .collect();
        let devices = by_device
            .into_iter()
            .filter_map(|(d, ps)| Some((d.to_string(), Summary::of(ps)?)))
            .collect();
        Ok(Self {
            metadata,
            cells,
            devices,
            overall,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per (building, device) cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "building_id,device_id,count,min_error_m,mean_error_m,max_error_m,accuracy\n",
        );
        for c in &self.cells {
            let s = &c.stats;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.building_id,
                c.device_id,
                s.count,
                s.min_error_m,
                s.mean_error_m,
                s.max_error_m,
                s.accuracy
            ));
        }
        out
    }
}

/// Predicts every record of `test` with the matching model.
pub fn predictions_for(bundle: &ModelBundle, test: &FingerprintDataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(test.len());
    for model in &bundle.models {
        let records: Vec<_> = test
            .records()
            .iter()
            .filter(|r| model.covers(r.building_id))
            .collect();
        if records.is_empty() {
            continue;
        }
        let images = records
            .iter()
            .map(|r| model.image(r))
            .collect::<Result<Vec<_>>>()?;
        let classes = model.classify(&images)?;
        for (r, class) in records.iter().zip(classes) {
            let truth = test.reference_point(r.key()).ok_or_else(|| {
                TrainError::Eval(format!("unknown reference point {:?}", r.key()))
            })?;
            out.push(Prediction::new(&r.device_id, truth, &model.classes[class]));
        }
    }
    if out.len() != test.len() {
        let missing = test
            .records()
            .iter()
            .find(|r| bundle.model_for(r.building_id).is_none())
            .map_or(0, |r| r.building_id);
        return Err(TrainError::Eval(format!(
            "no model covers building {missing}"
        )));
    }
    Ok(out)
}

pub(crate) fn config_hash<T: Serialize>(value: &T) -> String {
    crate::io::sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

/// Localization report of a trained bundle on `test`.
pub fn evaluate(bundle: &ModelBundle, test: &FingerprintDataset) -> Result<EvalReport> {
    let predictions = predictions_for(bundle, test)?;
    EvalReport::from_predictions(
        &predictions,
        ReportMetadata {
            method: "vital".into(),
            config_hash: config_hash(&(&bundle.spec, &bundle.train_config)),
            seed: bundle.train_config.seed,
        },
    )
}
