use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FingerprintDataset, FingerprintError, Result, RpKey};

/// Number of training records taken from a group of `n`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits every reference point's records independently, so each RP
/// appears on both sides. Groups are visited in key order and shuffled with
/// one seeded stream, which makes the result a pure function of
/// `(dataset, ratio, seed)`.
pub fn stratified_split(
    dataset: &FingerprintDataset,
    ratio: f64,
    seed: u64,
) -> Result<(FingerprintDataset, FingerprintDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FingerprintError::InvalidRatio(ratio));
    }
    let mut groups: BTreeMap<RpKey, Vec<usize>> = BTreeMap::new();
    for (i, rec) in dataset.records().iter().enumerate() {
        groups.entry(rec.key()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (key, mut members) in groups {
        if members.len() < 2 {
            return Err(FingerprintError::TooFewRecords {
                building: key.building_id,
                rp: key.rp_id,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let k = train_count(members.len(), ratio);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    let pick = |idx: &[usize]| {
        dataset.with_records(idx.iter().map(|&i| dataset.records()[i].clone()).collect())
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((pick(&train), pick(&test)))
}
