//! Fingerprint CSV format.
//!
//! Header: `building_id,rp_id,x_m,y_m,device_id,sample_idx,ap_<ID>,...`,
//! one row per scan sample, an unobserved AP written as `-100`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    check_rssi, ApId, ApIndex, ApReadings, FingerprintDataset, FingerprintError, FingerprintRecord,
    ReferencePoint, Result, RpKey, NOT_VISIBLE_DB,
};

const FIXED_COLUMNS: [&str; 6] = [
    "building_id",
    "rp_id",
    "x_m",
    "y_m",
    "device_id",
    "sample_idx",
];
const AP_PREFIX: &str = "ap_";

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FingerprintDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_dataset(dataset: &FingerprintDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

struct PendingRecord {
    samples: Vec<(u32, Vec<f64>)>,
}

pub fn read_dataset(reader: impl Read) -> Result<FingerprintDataset> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = csv.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() {
        return Err(FingerprintError::Header(format!(
            "expected at least {} columns, found {}",
            FIXED_COLUMNS.len(),
            header.len()
        )));
    }
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        if &header[i] != *want {
            return Err(FingerprintError::Header(format!(
                "column {} should be `{want}`, found `{}`",
                i + 1,
                &header[i]
            )));
        }
    }
    let mut ap_ids: Vec<ApId> = Vec::with_capacity(header.len() - FIXED_COLUMNS.len());
    for name in header.iter().skip(FIXED_COLUMNS.len()) {
        match name.strip_prefix(AP_PREFIX) {
            Some(id) if !id.is_empty() => ap_ids.push(id.into()),
            _ => {
                return Err(FingerprintError::Header(format!(
                    "AP column `{name}` must look like `ap_<ID>`"
                )))
            }
        }
    }
    let index = ApIndex::new(ap_ids.iter().cloned());
    if index.len() != ap_ids.len() {
        return Err(FingerprintError::Header("duplicate AP column".into()));
    }
    // Readings follow index order, whatever the column order in the file.
    let column_of: Vec<usize> = index
        .ids()
        .iter()
        .map(|id| ap_ids.iter().position(|a| a == id).expect("id came from header"))
        .collect();

    let mut rps: BTreeMap<RpKey, ReferencePoint> = BTreeMap::new();
    let mut pending: BTreeMap<(u32, u32, String), PendingRecord> = BTreeMap::new();
    let mut row = csv::StringRecord::new();
    loop {
        let more = csv.read_record(&mut row).map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths {
                pos,
                expected_len,
                len,
            } => FingerprintError::MalformedRow {
                line: pos.as_ref().map_or(0, |p| p.line()),
                message: format!("expected {expected_len} fields, found {len}"),
            },
            _ => FingerprintError::Csv(e),
        })?;
        if !more {
            break;
        }
        let line = row.position().map_or(0, |p| p.line());
        let malformed = |message: String| FingerprintError::MalformedRow { line, message };
        let int = |i: usize| -> Result<u32> {
            row[i].trim().parse::<u32>().map_err(|_| {
                malformed(format!(
                    "`{}` = `{}` is not a non-negative integer",
                    FIXED_COLUMNS[i], &row[i]
                ))
            })
        };
        let float = |i: usize| -> Result<f64> {
            row[i]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    malformed(format!(
                        "`{}` = `{}` is not a finite number",
                        header.get(i).unwrap_or("?"),
                        &row[i]
                    ))
                })
        };
        let building = int(0)?;
        let rp = int(1)?;
        let (x, y) = (float(2)?, float(3)?);
        let device = row[4].trim().to_string();
        if device.is_empty() {
            return Err(malformed("empty device_id".into()));
        }
        let sample = int(5)?;

        let key = RpKey {
            building_id: building,
            rp_id: rp,
        };
        let point = ReferencePoint {
            building_id: building,
            rp_id: rp,
            x,
            y,
        };
        match rps.entry(key) {
            Entry::Vacant(v) => {
                v.insert(point);
            }
            Entry::Occupied(o) if *o.get() != point => {
                return Err(FingerprintError::ConflictingCoordinates { line, building, rp })
            }
            Entry::Occupied(_) => {}
        }

        let mut values = Vec::with_capacity(ap_ids.len());
        for (j, ap) in ap_ids.iter().enumerate() {
            let v = float(FIXED_COLUMNS.len() + j)?;
            check_rssi(v).map_err(|_| FingerprintError::RssiOutOfRange {
                line,
                ap: ap.to_string(),
                value: v,
            })?;
            values.push(v);
        }
        let rec = pending
            .entry((building, rp, device.clone()))
            .or_insert_with(|| PendingRecord {
                samples: Vec::new(),
            });
        if rec.samples.iter().any(|(s, _)| *s == sample) {
            return Err(FingerprintError::DuplicateSample {
                line,
                building,
                rp,
                device,
                sample,
            });
        }
        rec.samples.push((sample, values));
    }

    let records = pending
        .into_iter()
        .map(|((building_id, rp_id, device_id), mut p)| {
            p.samples.sort_by_key(|(s, _)| *s);
            let readings = index
                .ids()
                .iter()
                .zip(&column_of)
                .filter(|(_, &j)| p.samples.iter().any(|(_, v)| v[j] != NOT_VISIBLE_DB))
                .map(|(ap, &j)| ApReadings {
                    ap: ap.clone(),
                    samples: p.samples.iter().map(|(_, v)| v[j]).collect(),
                })
                .collect();
            FingerprintRecord {
                building_id,
                rp_id,
                device_id,
                sample_ids: p.samples.iter().map(|(s, _)| *s).collect(),
                readings,
            }
        })
        .collect();
    FingerprintDataset::new(records, rps.into_values(), index)
}

pub fn write_dataset(dataset: &FingerprintDataset, writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let index = dataset.ap_index();
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(index.ids().iter().map(|id| format!("{AP_PREFIX}{id}")));
    csv.write_record(&header)?;

    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for rec in dataset.records() {
        let rp = dataset
            .reference_point(rec.key())
            .expect("dataset invariant: every record has a reference point");
        let positions: Vec<usize> = rec
            .readings
            .iter()
            .map(|r| {
                index
                    .position(&r.ap)
                    .expect("dataset invariant: AP in index")
            })
            .collect();
        for (s, sample_id) in rec.sample_ids.iter().enumerate() {
            let mut values = vec![NOT_VISIBLE_DB; index.len()];
            for (r, &pos) in rec.readings.iter().zip(&positions) {
                values[pos] = r.samples[s];
            }
            fields.clear();
            fields.push(rec.building_id.to_string());
            fields.push(rec.rp_id.to_string());
            fields.push(rp.x.to_string());
            fields.push(rp.y.to_string());
            fields.push(rec.device_id.clone());
            fields.push(sample_id.to_string());
            fields.extend(values.iter().map(|v| v.to_string()));
            csv.write_record(&fields)?;
        }
    }
    csv.flush()?;
    Ok(())
}
