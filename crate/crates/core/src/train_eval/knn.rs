use std::collections::BTreeMap;

use super::report::config_hash;
use super::{EvalReport, Prediction, ReportMetadata, Result, TrainError};
use crate::dam::normalize;
use crate::fingerprint::{
    project_to_1d_image, ApIndex, FingerprintDataset, FingerprintRecord, RpKey,
};

/// Majority label among the `k` nearest rows (Euclidean). Vote ties go to
/// the label with the smaller summed distance, then the smaller label.
/// Equidistant neighbours are taken in input order.
pub fn knn_predict<L: Ord + Copy>(train: &[(Vec<f64>, L)], query: &[f64], k: usize) -> Option<L> {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, (v, _))| {
            let d2: f64 = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<L, (usize, f64)> = BTreeMap::new();
    for &(d, i) in dist.iter().take(k) {
        let e = votes.entry(train[i].1).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    votes
        .into_iter()
        .min_by(|(la, a), (lb, b)| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then(la.cmp(lb)))
        .map(|(l, _)| l)
}

fn vector(record: &FingerprintRecord, index: &ApIndex) -> Result<Vec<f64>> {
    Ok(normalize(&project_to_1d_image(&record.reduce()?, index)).flatten())
}

/// k-nearest-neighbour localization on normalized 1-D fingerprints,
/// searched within the test record's building.
pub fn knn_baseline(
    train: &FingerprintDataset,
    test: &FingerprintDataset,
    k: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(TrainError::Config("k must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut predictions = Vec::with_capacity(test.len());
    for building in test.buildings() {
        let queries: Vec<&FingerprintRecord> = test
            .records()
            .iter()
            .filter(|r| r.building_id == building)
            .collect();
        if queries.is_empty() {
            continue;
        }
        let index = train.building_ap_index(building);
        let rows = train
            .records()
            .iter()
            .filter(|r| r.building_id == building)
            .map(|r| Ok((vector(r, &index)?, r.key())))
            .collect::<Result<Vec<(Vec<f64>, RpKey)>>>()?;
        if rows.is_empty() {
            return Err(TrainError::Eval(format!(
                "no training records for building {building}"
            )));
        }
        for q in queries {
            let key = knn_predict(&rows, &vector(q, &index)?, k).expect("rows is non-empty");
            let lookup = |key: RpKey| {
                test.reference_point(key)
                    .or_else(|| train.reference_point(key))
                    .ok_or_else(|| TrainError::Eval(format!("unknown reference point {key:?}")))
            };
            predictions.push(Prediction::new(
                &q.device_id,
                lookup(q.key())?,
                lookup(key)?,
            ));
        }
    }
    EvalReport::from_predictions(
        &predictions,
        ReportMetadata {
            method: "knn".into(),
            config_hash: config_hash(&serde_json::json!({ "k": k })),
            seed: 0,
        },
    )
}
