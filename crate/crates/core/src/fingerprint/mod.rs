//! Fingerprint data model: reference points, per-device RSSI scans, the
//! access-point index, min/max/mean sample reduction and 1-D RSSI images.

mod csv_io;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_dataset, read_dataset, save_dataset, write_dataset};

/// RSSI value (dB) that marks an access point as not observed.
pub const NOT_VISIBLE_DB: f64 = -100.0;
/// Strongest representable RSSI (dB).
pub const MAX_RSSI_DB: f64 = 0.0;
pub const DEFAULT_SAMPLES_PER_RECORD: usize = 5;

pub type ApId = Arc<str>;

#[derive(Debug, thiserror::Error)]
pub enum FingerprintError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("line {line}: RSSI {value} for AP {ap} outside [-100, 0]")]
    RssiOutOfRange { line: u64, ap: String, value: f64 },
    #[error("line {line}: duplicate sample (building {building}, rp {rp}, device {device}, sample {sample})")]
    DuplicateSample {
        line: u64,
        building: u32,
        rp: u32,
        device: String,
        sample: u32,
    },
    #[error(
        "line {line}: reference point (building {building}, rp {rp}) has conflicting coordinates"
    )]
    ConflictingCoordinates { line: u64, building: u32, rp: u32 },
    #[error("record (building {building}, rp {rp}, device {device}) has {found} samples, expected {expected}")]
    SampleCount {
        building: u32,
        rp: u32,
        device: String,
        found: usize,
        expected: usize,
    },
    #[error("cannot reduce an empty sample sequence")]
    EmptySamples,
    #[error("RSSI {0} outside [-100, 0]")]
    OutOfRange(f64),
    #[error("access point {0} is not in the index")]
    UnknownAp(String),
    #[error("reference point (building {building}, rp {rp}) has {count} record(s); at least 2 are needed to stratify")]
    TooFewRecords {
        building: u32,
        rp: u32,
        count: usize,
    },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FingerprintError>;

/// Identity of a reference point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RpKey {
    pub building_id: u32,
    pub rp_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub building_id: u32,
    pub rp_id: u32,
    pub x: f64,
    pub y: f64,
}

impl ReferencePoint {
    pub fn key(&self) -> RpKey {
        RpKey {
            building_id: self.building_id,
            rp_id: self.rp_id,
        }
    }

    pub fn distance(&self, other: &ReferencePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Raw samples of one access point.
#[derive(Clone, Debug, PartialEq)]
pub struct ApReadings {
    pub ap: ApId,
    pub samples: Vec<f64>,
}

/// All scans taken by one device at one reference point.
///
/// Only access points seen in at least one sample are listed; every other AP
/// is implicitly at [`NOT_VISIBLE_DB`].
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintRecord {
    pub building_id: u32,
    pub rp_id: u32,
    pub device_id: String,
    /// Scan identifiers, one per sample, in sample order.
    pub sample_ids: Vec<u32>,
    pub readings: Vec<ApReadings>,
}

impl FingerprintRecord {
    pub fn key(&self) -> RpKey {
        RpKey {
            building_id: self.building_id,
            rp_id: self.rp_id,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    /// Collapses each AP's samples to (min, max, mean).
    pub fn reduce(&self) -> Result<ReducedFingerprint> {
        let channels = self
            .readings
            .iter()
            .map(|r| Ok((r.ap.clone(), reduce_samples(&r.samples)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReducedFingerprint {
            building_id: self.building_id,
            rp_id: self.rp_id,
            device_id: self.device_id.clone(),
            channels,
        })
    }
}

/// Per-AP (min, max, mean) triple in dB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Channels {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Channels {
    pub const NOT_VISIBLE: Channels = Channels {
        min: NOT_VISIBLE_DB,
        max: NOT_VISIBLE_DB,
        mean: NOT_VISIBLE_DB,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.min, self.max, self.mean]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedFingerprint {
    pub building_id: u32,
    pub rp_id: u32,
    pub device_id: String,
    pub channels: Vec<(ApId, Channels)>,
}

pub fn check_rssi(value: f64) -> Result<f64> {
    if value.is_finite() && (NOT_VISIBLE_DB..=MAX_RSSI_DB).contains(&value) {
        Ok(value)
    } else {
        Err(FingerprintError::OutOfRange(value))
    }
}

/// Reduces a sequence of RSSI samples to its (min, max, mean).
pub fn reduce_samples(samples: &[f64]) -> Result<Channels> {
    if samples.is_empty() {
        return Err(FingerprintError::EmptySamples);
    }
    for &s in samples {
        check_rssi(s)?;
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (samples.iter().sum::<f64>() / samples.len() as f64).clamp(min, max);
    Ok(Channels { min, max, mean })
}

/// Bijection between access-point identifiers and pixel positions `0..A`,
/// ordered lexicographically by identifier.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ApIndex {
    ids: Vec<ApId>,
    positions: HashMap<ApId, usize>,
}

impl ApIndex {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ApId>,
    {
        let set: BTreeSet<ApId> = ids.into_iter().map(Into::into).collect();
        let ids: Vec<ApId> = set.into_iter().collect();
        let positions = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { ids, positions }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, ap: &str) -> Option<usize> {
        self.positions.get(ap).copied()
    }

    pub fn ids(&self) -> &[ApId] {
        &self.ids
    }

    pub fn contains(&self, ap: &str) -> bool {
        self.positions.contains_key(ap)
    }
}

/// One-dimensional RSSI image: one pixel per AP, three channels
/// (min, max, mean). Values are in dB until normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct RssiImage {
    pub pixels: Vec<[f64; 3]>,
}

impl RssiImage {
    pub fn width(&self) -> usize {
        self.pixels.len()
    }

    /// Channels flattened pixel-major: `[p0.min, p0.max, p0.mean, p1.min, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.pixels.iter().flatten().copied().collect()
    }
}

/// Places each AP's channels at its index position; unlisted APs stay at the
/// not-visible sentinel.
pub fn to_1d_image(fingerprint: &ReducedFingerprint, index: &ApIndex) -> Result<RssiImage> {
    let mut pixels = vec![Channels::NOT_VISIBLE.as_array(); index.len()];
    for (ap, ch) in &fingerprint.channels {
        let pos = index
            .position(ap)
            .ok_or_else(|| FingerprintError::UnknownAp(ap.to_string()))?;
        pixels[pos] = ch.as_array();
    }
    Ok(RssiImage { pixels })
}

/// Like [`to_1d_image`], but access points outside `index` are dropped. Used
/// at inference, where a device may report APs the model never saw.
pub fn project_to_1d_image(fingerprint: &ReducedFingerprint, index: &ApIndex) -> RssiImage {
    let mut pixels = vec![Channels::NOT_VISIBLE.as_array(); index.len()];
    for (ap, ch) in &fingerprint.channels {
        if let Some(pos) = index.position(ap) {
            pixels[pos] = ch.as_array();
        }
    }
    RssiImage { pixels }
}

/// A validated collection of fingerprint records.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintDataset {
    records: Vec<FingerprintRecord>,
    reference_points: BTreeMap<RpKey, ReferencePoint>,
    ap_index: ApIndex,
}

impl FingerprintDataset {
    /// Builds a dataset, sorting records canonically by
    /// (building, rp, device) and checking every invariant.
    pub fn new(
        mut records: Vec<FingerprintRecord>,
        reference_points: impl IntoIterator<Item = ReferencePoint>,
        ap_index: ApIndex,
    ) -> Result<Self> {
        let mut rps = BTreeMap::new();
        for rp in reference_points {
            if !(rp.x.is_finite() && rp.y.is_finite()) {
                return Err(FingerprintError::Invalid(format!(
                    "reference point {:?} has non-finite coordinates",
                    rp.key()
                )));
            }
            if rps.insert(rp.key(), rp).is_some_and(|old| old != rp) {
                return Err(FingerprintError::Invalid(format!(
                    "reference point {:?} listed twice",
                    rp.key()
                )));
            }
        }
        records.sort_by(|a, b| {
            (a.building_id, a.rp_id, &a.device_id).cmp(&(b.building_id, b.rp_id, &b.device_id))
        });
        for pair in records.windows(2) {
            if (pair[0].key(), &pair[0].device_id) == (pair[1].key(), &pair[1].device_id) {
                return Err(FingerprintError::Invalid(format!(
                    "two records for {:?} device {}",
                    pair[0].key(),
                    pair[0].device_id
                )));
            }
        }
        for rec in &records {
            if !rps.contains_key(&rec.key()) {
                return Err(FingerprintError::Invalid(format!(
                    "record references unknown reference point {:?}",
                    rec.key()
                )));
            }
            if rec.sample_ids.is_empty() {
                return Err(FingerprintError::EmptySamples);
            }
            for r in &rec.readings {
                if !ap_index.contains(&r.ap) {
                    return Err(FingerprintError::UnknownAp(r.ap.to_string()));
                }
                if r.samples.len() != rec.sample_ids.len() {
                    return Err(FingerprintError::Invalid(format!(
                        "AP {} of {:?}/{} has {} samples, record has {}",
                        r.ap,
                        rec.key(),
                        rec.device_id,
                        r.samples.len(),
                        rec.sample_ids.len()
                    )));
                }
                for &s in &r.samples {
                    check_rssi(s)?;
                }
            }
        }
        Ok(Self {
            records,
            reference_points: rps,
            ap_index,
        })
    }

    pub fn records(&self) -> &[FingerprintRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ap_index(&self) -> &ApIndex {
        &self.ap_index
    }

    pub fn reference_points(&self) -> impl Iterator<Item = &ReferencePoint> {
        self.reference_points.values()
    }

    pub fn reference_point(&self, key: RpKey) -> Option<&ReferencePoint> {
        self.reference_points.get(&key)
    }

    /// Distinct device identifiers, sorted.
    pub fn devices(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().map(|r| &r.device_id).collect();
        set.into_iter().cloned().collect()
    }

    /// Distinct building identifiers, sorted.
    pub fn buildings(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .reference_points
            .keys()
            .map(|k| k.building_id)
            .collect();
        set.into_iter().collect()
    }

    /// Every record has exactly `expected` samples.
    pub fn check_sample_count(&self, expected: usize) -> Result<()> {
        for rec in &self.records {
            if rec.sample_count() != expected {
                return Err(FingerprintError::SampleCount {
                    building: rec.building_id,
                    rp: rec.rp_id,
                    device: rec.device_id.clone(),
                    found: rec.sample_count(),
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Records accepted by `keep`; reference points and AP index are shared.
    pub fn filter(&self, keep: impl Fn(&FingerprintRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            reference_points: self.reference_points.clone(),
            ap_index: self.ap_index.clone(),
        }
    }

    /// APs seen at least once in the given building.
    pub fn building_ap_index(&self, building_id: u32) -> ApIndex {
        ApIndex::new(
            self.records
                .iter()
                .filter(|r| r.building_id == building_id)
                .flat_map(|r| r.readings.iter().map(|x| x.ap.clone())),
        )
    }

    /// Deterministic stratified train/test split; see [`split::stratified_split`].
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Self, Self)> {
        split::stratified_split(self, ratio, seed)
    }

    pub(crate) fn with_records(&self, records: Vec<FingerprintRecord>) -> Self {
        Self {
            records,
            reference_points: self.reference_points.clone(),
            ap_index: self.ap_index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(readings: &[(&str, Vec<f64>)]) -> FingerprintRecord {
        FingerprintRecord {
            building_id: 0,
            rp_id: 0,
            device_id: "d".into(),
            sample_ids: (0..readings.first().map_or(1, |r| r.1.len()) as u32).collect(),
            readings: readings
                .iter()
                .map(|(ap, s)| ApReadings {
                    ap: (*ap).into(),
                    samples: s.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn reduce_cases() {
        let c = reduce_samples(&[-50.0, -52.0, -48.0, -51.0, -49.0]).unwrap();
        assert_eq!((c.min, c.max, c.mean), (-52.0, -48.0, -50.0));
        let c = reduce_samples(&[-70.0; 5]).unwrap();
        assert_eq!((c.min, c.max, c.mean), (-70.0, -70.0, -70.0));
        assert!(matches!(
            reduce_samples(&[]),
            Err(FingerprintError::EmptySamples)
        ));
        assert!(reduce_samples(&[-20.0, 3.0]).is_err());
    }

    #[test]
    fn five_samples_become_three_channels() {
        let rec = record(&[("a", vec![-60.0, -62.0, -61.0, -59.0, -58.0])]);
        let reduced = rec.reduce().unwrap();
        assert_eq!(reduced.channels.len(), 1);
        assert_eq!(reduced.channels[0].1.as_array().len(), 3);
    }

    #[test]
    fn image_places_aps_by_index() {
        let index = ApIndex::new(["ap0", "ap1", "ap2"]);
        let rec = record(&[("ap0", vec![-60.0; 5])]);
        let img = to_1d_image(&rec.reduce().unwrap(), &index).unwrap();
        assert_eq!(img.pixels[0], [-60.0; 3]);
        assert_eq!(img.pixels[1], [-100.0; 3]);
        assert_eq!(img.pixels[2], [-100.0; 3]);

        let empty = record(&[]);
        let img = to_1d_image(&empty.reduce().unwrap(), &index).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [-100.0; 3]));
    }

    #[test]
    fn image_rejects_unknown_ap_but_projection_drops_it() {
        let index = ApIndex::new(["a"]);
        let rec = record(&[("zz", vec![-40.0])]).reduce().unwrap();
        assert!(matches!(
            to_1d_image(&rec, &index),
            Err(FingerprintError::UnknownAp(_))
        ));
        assert_eq!(project_to_1d_image(&rec, &index).pixels, vec![[-100.0; 3]]);
    }

    #[test]
    fn ap_index_is_lexicographic() {
        let index = ApIndex::new(["b", "a", "c", "a"]);
        assert_eq!(index.len(), 3);
        assert_eq!(index.position("a"), Some(0));
        assert_eq!(index.position("c"), Some(2));
    }
}
