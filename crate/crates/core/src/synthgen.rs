//! Synthetic multi-device RSSI fingerprints.
//!
//! Each building has an L-shaped walking path with reference points every
//! metre and access points scattered over the floor. Signal strength follows
//! a log-distance path-loss model with Gaussian shadowing; each device then
//! applies its own gain skew, detection threshold and random misses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fingerprint::{
    ApIndex, ApReadings, FingerprintDataset, FingerprintError, FingerprintRecord, ReferencePoint,
    MAX_RSSI_DB, NOT_VISIBLE_DB,
};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] FingerprintError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Distance (m) at which `tx_power` is measured.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;
/// Clearance between the walking path and the edge of the floor plan.
const FLOOR_MARGIN_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingSpec {
    pub building_id: u32,
    pub path_length: f64,
    pub num_aps: usize,
    #[serde(default = "default_exponent")]
    pub pathloss_exponent: f64,
    #[serde(default = "default_shadowing")]
    pub shadowing_sigma: f64,
    #[serde(default = "default_tx_power")]
    pub tx_power: f64,
    /// Explicit AP coordinates; generated from the seed when empty.
    #[serde(default)]
    pub ap_positions: Vec<Point>,
}

fn default_exponent() -> f64 {
    2.5
}
fn default_shadowing() -> f64 {
    2.0
}
fn default_tx_power() -> f64 {
    -40.0
}

impl BuildingSpec {
    pub fn new(building_id: u32, path_length: f64, num_aps: usize) -> Self {
        Self {
            building_id,
            path_length,
            num_aps,
            pathloss_exponent: default_exponent(),
            shadowing_sigma: default_shadowing(),
            tx_power: default_tx_power(),
            ap_positions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(SynthError::Invalid(format!(
                "building {}: {m}",
                self.building_id
            )))
        };
        if !(self.path_length.is_finite() && self.path_length >= 1.0) {
            return bad(format!(
                "path_length {} must be at least 1 m",
                self.path_length
            ));
        }
        if self.path_length > 100_000.0 {
            return bad("path_length is unreasonably large".into());
        }
        if self.num_aps == 0 || self.num_aps > 100_000 {
            return bad(format!("num_aps {} out of range", self.num_aps));
        }
        if !(self.shadowing_sigma.is_finite() && self.shadowing_sigma >= 0.0) {
            return bad("shadowing_sigma must be non-negative".into());
        }
        if !(self.pathloss_exponent.is_finite() && self.pathloss_exponent > 0.0) {
            return bad("pathloss_exponent must be positive".into());
        }
        if !(self.tx_power.is_finite() && (NOT_VISIBLE_DB..=MAX_RSSI_DB).contains(&self.tx_power)) {
            return bad("tx_power must lie in [-100, 0]".into());
        }
        if !self.ap_positions.is_empty() {
            if self.ap_positions.len() != self.num_aps {
                return bad(format!(
                    "{} AP positions given for {} APs",
                    self.ap_positions.len(),
                    self.num_aps
                ));
            }
            if self
                .ap_positions
                .iter()
                .any(|p| !(p.x.is_finite() && p.y.is_finite()))
            {
                return bad("AP positions must be finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device_id: String,
    pub gain_offset: f64,
    pub scale: f64,
    pub detection_threshold: f64,
    #[serde(default)]
    pub extra_miss_prob: f64,
}

impl DeviceProfile {
    /// Reports exactly what it receives.
    pub fn identity(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            gain_offset: 0.0,
            scale: 1.0,
            detection_threshold: NOT_VISIBLE_DB,
            extra_miss_prob: 0.0,
        }
    }

    fn new(id: &str, gain_offset: f64, scale: f64, detection_threshold: f64, miss: f64) -> Self {
        Self {
            device_id: id.into(),
            gain_offset,
            scale,
            detection_threshold,
            extra_miss_prob: miss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(SynthError::Invalid(format!(
                "device {}: {m}",
                self.device_id
            )))
        };
        if self.device_id.trim().is_empty() || self.device_id.contains([',', '"', '\n', '\r']) {
            return bad("device_id must be non-empty and free of CSV delimiters");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("scale must be positive");
        }
        if !self.gain_offset.is_finite() {
            return bad("gain_offset must be finite");
        }
        if !(NOT_VISIBLE_DB..=MAX_RSSI_DB).contains(&self.detection_threshold) {
            return bad("detection_threshold must lie in [-100, 0]");
        }
        if !(0.0..1.0).contains(&self.extra_miss_prob) {
            return bad("extra_miss_prob must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Six training devices spread over ±6 dB offset, 0.9–1.1 scale and
/// −95..−85 dB thresholds.
pub fn default_base_devices() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile::new("base0", -6.0, 1.00, -95.0, 0.00),
        DeviceProfile::new("base1", -3.0, 0.95, -90.0, 0.01),
        DeviceProfile::new("base2", -1.0, 1.05, -93.0, 0.00),
        DeviceProfile::new("base3", 1.0, 0.90, -88.0, 0.02),
        DeviceProfile::new("base4", 3.0, 1.10, -85.0, 0.01),
        DeviceProfile::new("base5", 6.0, 1.00, -92.0, 0.00),
    ]
}

/// Three held-out devices. Their combined skew (offset plus the shift that
/// `scale` causes around −60 dB) and sensitivity stay inside the range the
/// base devices span, but each pairs them differently and misses more APs.
pub fn default_extended_devices() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile::new("ext0", -2.0, 1.05, -88.0, 0.06),
        DeviceProfile::new("ext1", 2.0, 0.95, -93.0, 0.08),
        DeviceProfile::new("ext2", -3.0, 0.97, -87.0, 0.05),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub buildings: Vec<BuildingSpec>,
    pub base_devices: Vec<DeviceProfile>,
    pub extended_devices: Vec<DeviceProfile>,
    pub samples_per_rp_per_device: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::with_ap_counts([120, 150, 180, 206])
    }
}

impl GenConfig {
    /// Four buildings with 62, 71, 80 and 88 m paths and the given AP counts.
    pub fn with_ap_counts(ap_counts: [usize; 4]) -> Self {
        let lengths = [62.0, 71.0, 80.0, 88.0];
        Self {
            buildings: lengths
                .iter()
                .zip(ap_counts)
                .enumerate()
                .map(|(i, (&len, aps))| BuildingSpec::new(i as u32, len, aps))
                .collect(),
            base_devices: default_base_devices(),
            extended_devices: default_extended_devices(),
            samples_per_rp_per_device: 5,
            seed: 0,
        }
    }

    /// Same buildings and devices with AP counts that fit a 64-pixel image.
    pub fn scaled() -> Self {
        Self::with_ap_counts([40, 48, 56, 64])
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.base_devices.iter().chain(&self.extended_devices)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buildings.is_empty() {
            return Err(SynthError::Invalid("no buildings".into()));
        }
        if self.base_devices.is_empty() && self.extended_devices.is_empty() {
            return Err(SynthError::Invalid("no devices".into()));
        }
        if self.samples_per_rp_per_device == 0 || self.samples_per_rp_per_device > 10_000 {
            return Err(SynthError::Invalid(
                "samples_per_rp_per_device must lie in 1..=10000".into(),
            ));
        }
        let mut ids = std::collections::BTreeSet::new();
        for b in &self.buildings {
            b.validate()?;
            if !ids.insert(b.building_id) {
                return Err(SynthError::Invalid(format!(
                    "building id {} repeated",
                    b.building_id
                )));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for d in self.devices() {
            d.validate()?;
            if !names.insert(d.device_id.as_str()) {
                return Err(SynthError::Invalid(format!(
                    "device id {} repeated",
                    d.device_id
                )));
            }
        }
        Ok(())
    }
}

/// Concrete geometry of one building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingLayout {
    pub building_id: u32,
    pub reference_points: Vec<Point>,
    pub ap_ids: Vec<String>,
    pub ap_positions: Vec<Point>,
}

/// Point at arc length `s` along an L-shaped path whose first leg runs
/// along x for 60% of the total length, then turns along y.
fn path_point(s: f64, length: f64) -> Point {
    let leg = (0.6 * length).round();
    if s <= leg {
        Point { x: s, y: 0.0 }
    } else {
        Point { x: leg, y: s - leg }
    }
}

pub fn ap_id(building_id: u32, index: usize) -> String {
    format!(
        "02:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
        (building_id >> 8) & 0xff,
        building_id & 0xff,
        (index >> 16) & 0xff,
        (index >> 8) & 0xff,
        index & 0xff
    )
}

/// Reference points every metre along the path (`floor(L) + 1` of them)
/// and AP positions uniform over the path's bounding box plus a margin.
pub fn gen_building(spec: &BuildingSpec, rng: &mut impl Rng) -> Result<BuildingLayout> {
    spec.validate()?;
    let count = spec.path_length.floor() as usize + 1;
    let reference_points: Vec<Point> = (0..count)
        .map(|i| path_point(i as f64, spec.path_length))
        .collect();
    let ap_positions = if spec.ap_positions.is_empty() {
        let max_x = reference_points.iter().map(|p| p.x).fold(0.0, f64::max);
        let max_y = reference_points.iter().map(|p| p.y).fold(0.0, f64::max);
        let xs = Uniform::new_inclusive(-FLOOR_MARGIN_M, max_x + FLOOR_MARGIN_M);
        let ys = Uniform::new_inclusive(-FLOOR_MARGIN_M, max_y + FLOOR_MARGIN_M);
        (0..spec.num_aps)
            .map(|_| Point {
                x: xs.sample(rng),
                y: ys.sample(rng),
            })
            .collect()
    } else {
        spec.ap_positions.clone()
    };
    Ok(BuildingLayout {
        building_id: spec.building_id,
        reference_points,
        ap_ids: (0..spec.num_aps)
            .map(|i| ap_id(spec.building_id, i))
            .collect(),
        ap_positions,
    })
}

/// Log-distance path loss plus one shadowing draw, clamped to `[-100, 0]`.
pub fn true_rssi(ap: Point, rp: Point, spec: &BuildingSpec, rng: &mut impl Rng) -> f64 {
    let d = ap.distance(&rp).max(REFERENCE_DISTANCE_M);
    let mean = spec.tx_power - 10.0 * spec.pathloss_exponent * (d / REFERENCE_DISTANCE_M).log10();
    let noise = if spec.shadowing_sigma > 0.0 {
        Normal::new(0.0, spec.shadowing_sigma)
            .expect("validated sigma")
            .sample(rng)
    } else {
        0.0
    };
    (mean + noise).clamp(NOT_VISIBLE_DB, MAX_RSSI_DB)
}

/// Device response: affine skew, clamp, then the detection threshold and a
/// random miss both map to exactly −100.
pub fn apply_device(rssi: f64, profile: &DeviceProfile, rng: &mut impl Rng) -> f64 {
    let v = (profile.scale * rssi + profile.gain_offset).clamp(NOT_VISIBLE_DB, MAX_RSSI_DB);
    let missed = rng.gen::<f64>() < profile.extra_miss_prob;
    if v < profile.detection_threshold || missed {
        NOT_VISIBLE_DB
    } else {
        v
    }
}

fn device_records(
    spec: &BuildingSpec,
    layout: &BuildingLayout,
    profile: &DeviceProfile,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<FingerprintRecord> {
    let ids: Vec<crate::fingerprint::ApId> =
        layout.ap_ids.iter().map(|s| s.as_str().into()).collect();
    layout
        .reference_points
        .iter()
        .enumerate()
        .map(|(rp_id, rp)| {
            let mut values = vec![vec![0.0; samples]; layout.ap_positions.len()];
            for s in 0..samples {
                for (a, ap) in layout.ap_positions.iter().enumerate() {
                    let r = true_rssi(*ap, *rp, spec, rng);
                    values[a][s] = apply_device(r, profile, rng);
                }
            }
            let readings = values
                .into_iter()
                .zip(&ids)
                .filter(|(v, _)| v.iter().any(|&x| x != NOT_VISIBLE_DB))
                .map(|(samples, ap)| ApReadings {
                    ap: ap.clone(),
                    samples,
                })
                .collect();
            FingerprintRecord {
                building_id: spec.building_id,
                rp_id: rp_id as u32,
                device_id: profile.device_id.clone(),
                sample_ids: (0..samples as u32).collect(),
                readings,
            }
        })
        .collect()
}

const GEOMETRY_LABEL: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: FingerprintDataset,
    pub layouts: Vec<BuildingLayout>,
}

/// Builds the full dataset. Every (building, device) pair draws from its own
/// stream derived from the master seed, so the output does not depend on
/// scheduling.
pub fn generate(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let layouts = config
        .buildings
        .iter()
        .map(|b| {
            let mut rng = seed::stream(config.seed, &[b.building_id as u64, GEOMETRY_LABEL]);
            gen_building(b, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let devices: Vec<&DeviceProfile> = config.devices().collect();
    let tasks: Vec<(usize, usize)> = (0..config.buildings.len())
        .flat_map(|b| (0..devices.len()).map(move |d| (b, d)))
        .collect();
    let records: Vec<FingerprintRecord> = tasks
        .par_iter()
        .map(|&(b, d)| {
            let spec = &config.buildings[b];
            let mut rng = seed::stream(config.seed, &[spec.building_id as u64, d as u64]);
            device_records(
                spec,
                &layouts[b],
                devices[d],
                config.samples_per_rp_per_device,
                &mut rng,
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let points = layouts.iter().flat_map(|l| {
        l.reference_points
            .iter()
            .enumerate()
            .map(move |(i, p)| ReferencePoint {
                building_id: l.building_id,
                rp_id: i as u32,
                x: p.x,
                y: p.y,
            })
    });
    let index = ApIndex::new(
        layouts
            .iter()
            .flat_map(|l| l.ap_ids.iter().map(String::as_str)),
    );
    let dataset = FingerprintDataset::new(records, points, index)?;
    Ok(Generated { dataset, layouts })
}

/// Everything needed to reproduce a generated dataset.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileManifest<'a> {
    pub config: &'a GenConfig,
    pub layouts: &'a [BuildingLayout],
}

pub fn profile_manifest<'a>(
    config: &'a GenConfig,
    generated: &'a Generated,
) -> ProfileManifest<'a> {
    ProfileManifest {
        config,
        layouts: &generated.layouts,
    }
}
