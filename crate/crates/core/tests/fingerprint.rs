use std::collections::BTreeSet;

use proptest::prelude::*;
use vital::fingerprint::{
    project_to_1d_image, read_dataset, reduce_samples, to_1d_image, write_dataset, ApIndex,
    ApReadings, Channels, FingerprintDataset, FingerprintError, FingerprintRecord,
    ReducedFingerprint, ReferencePoint,
};

const HEADER: &str = "building_id,rp_id,x_m,y_m,device_id,sample_idx";

fn parse(text: &str) -> Result<FingerprintDataset, FingerprintError> {
    read_dataset(text.as_bytes())
}

fn small_dataset(devices: usize, rps: u32) -> FingerprintDataset {
    let mut records = Vec::new();
    let mut points = Vec::new();
    for rp in 0..rps {
        points.push(ReferencePoint {
            building_id: 1,
            rp_id: rp,
            x: rp as f64 * 1.5,
            y: 0.25,
        });
        for d in 0..devices {
            let base = -40.0 - rp as f64 - d as f64;
            records.push(FingerprintRecord {
                building_id: 1,
                rp_id: rp,
                device_id: format!("dev{d}"),
                sample_ids: vec![0, 1, 2],
                readings: vec![
                    ApReadings {
                        ap: "aa".into(),
                        samples: vec![base, base - 1.5, -100.0],
                    },
                    ApReadings {
                        ap: "cc".into(),
                        samples: vec![-77.0, -78.0, -79.0],
                    },
                ],
            });
        }
    }
    FingerprintDataset::new(records, points, ApIndex::new(["aa", "bb", "cc"])).unwrap()
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = small_dataset(3, 4);
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    let back = read_dataset(bytes.as_slice()).unwrap();
    assert_eq!(back, ds);
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn column_order_does_not_matter() {
    let a = parse(&format!("{HEADER},ap_b,ap_a\n0,0,0,0,p,0,-70,-60\n")).unwrap();
    let b = parse(&format!("{HEADER},ap_a,ap_b\n0,0,0,0,p,0,-60,-70\n")).unwrap();
    assert_eq!(a, b);
    let aps: Vec<&str> = a.records()[0].readings.iter().map(|r| r.ap.as_ref()).collect();
    assert_eq!(aps, ["a", "b"]);
}

#[test]
fn one_record_two_aps() {
    let text =
        format!("{HEADER},ap_a,ap_b\n0,0,1.0,2.0,phone,0,-60,-100\n0,0,1.0,2.0,phone,1,-62,-100\n");
    let ds = parse(&text).unwrap();
    assert_eq!(ds.ap_index().len(), 2);
    assert_eq!(ds.len(), 1);
    let rec = &ds.records()[0];
    assert_eq!(rec.sample_count(), 2);
    // AP `b` was never seen, so only `a` is listed.
    assert_eq!(rec.readings.len(), 1);
    let img = to_1d_image(&rec.reduce().unwrap(), ds.ap_index()).unwrap();
    assert_eq!(img.pixels, vec![[-62.0, -60.0, -61.0], [-100.0; 3]]);
}

#[test]
fn rejects_bad_headers() {
    for text in [
        "building,rp_id,x_m,y_m,device_id,sample_idx,ap_a\n",
        "building_id,rp_id,x_m,y_m,device_id\n",
        "building_id,rp_id,x_m,y_m,device_id,sample_idx,a\n",
        "building_id,rp_id,x_m,y_m,device_id,sample_idx,ap_\n",
        "building_id,rp_id,x_m,y_m,device_id,sample_idx,ap_a,ap_a\n",
    ] {
        assert!(
            matches!(parse(text), Err(FingerprintError::Header(_))),
            "{text}"
        );
    }
}

#[test]
fn rejects_out_of_range_rssi() {
    for v in ["-101", "0.5", "NaN", "inf"] {
        let text = format!("{HEADER},ap_a\n0,0,0,0,d,0,{v}\n");
        let err = parse(&text).unwrap_err();
        assert!(
            matches!(
                err,
                FingerprintError::RssiOutOfRange { line: 2, .. }
                    | FingerprintError::MalformedRow { line: 2, .. }
            ),
            "{v}: {err}"
        );
    }
    let text = format!("{HEADER},ap_a\n0,0,0,0,d,0,-101\n");
    assert!(matches!(
        parse(&text),
        Err(FingerprintError::RssiOutOfRange { line: 2, .. })
    ));
}

#[test]
fn rejects_malformed_rows() {
    let cases = [
        format!("{HEADER},ap_a\n0,0,0,0,d,0\n"),
        format!("{HEADER},ap_a\nx,0,0,0,d,0,-50\n"),
        format!("{HEADER},ap_a\n0,-1,0,0,d,0,-50\n"),
        format!("{HEADER},ap_a\n0,0,zz,0,d,0,-50\n"),
        format!("{HEADER},ap_a\n0,0,0,0,,0,-50\n"),
        format!("{HEADER},ap_a\n0,0,0,0,d,0,loud\n"),
    ];
    for text in &cases {
        assert!(
            matches!(
                parse(text),
                Err(FingerprintError::MalformedRow { line: 2, .. })
            ),
            "{text}"
        );
    }
}

#[test]
fn rejects_duplicates_and_conflicts() {
    let dup = format!("{HEADER},ap_a\n0,0,0,0,d,0,-50\n0,0,0,0,d,0,-51\n");
    assert!(matches!(
        parse(&dup),
        Err(FingerprintError::DuplicateSample {
            line: 3,
            sample: 0,
            ..
        })
    ));
    let moved = format!("{HEADER},ap_a\n0,0,0,0,d,0,-50\n0,0,1,0,e,0,-51\n");
    assert!(matches!(
        parse(&moved),
        Err(FingerprintError::ConflictingCoordinates { line: 3, .. })
    ));
}

#[test]
fn header_only_file_is_an_empty_dataset() {
    let ds = parse(&format!("{HEADER},ap_a\n")).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.ap_index().len(), 1);
}

#[test]
fn sample_count_check() {
    let ds = small_dataset(2, 2);
    assert!(ds.check_sample_count(3).is_ok());
    assert!(matches!(
        ds.check_sample_count(5),
        Err(FingerprintError::SampleCount {
            found: 3,
            expected: 5,
            ..
        })
    ));
}

#[test]
fn ten_records_split_eight_two() {
    let ds = small_dataset(10, 1);
    let (train, test) = ds.split(0.8, 7).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    let (train2, test2) = ds.split(0.8, 7).unwrap();
    assert_eq!(train, train2);
    assert_eq!(test, test2);
}

#[test]
fn split_rejects_singletons_and_bad_ratio() {
    let ds = small_dataset(1, 3);
    assert!(matches!(
        ds.split(0.8, 0),
        Err(FingerprintError::TooFewRecords { count: 1, .. })
    ));
    let ds = small_dataset(4, 1);
    for r in [0.0, 1.0, -0.5, f64::NAN] {
        assert!(matches!(
            ds.split(r, 0),
            Err(FingerprintError::InvalidRatio(_))
        ));
    }
}

#[test]
fn building_index_lists_only_seen_aps() {
    let ds = small_dataset(2, 2);
    let idx = ds.building_ap_index(1);
    assert_eq!(
        idx.ids().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        ["aa", "cc"]
    );
    assert!(ds.building_ap_index(9).is_empty());
}

fn reduced(entries: &[(&str, [f64; 3])]) -> ReducedFingerprint {
    ReducedFingerprint {
        building_id: 0,
        rp_id: 0,
        device_id: "d".into(),
        channels: entries
            .iter()
            .map(|(ap, c)| ((*ap).into(), channels(c)))
            .collect(),
    }
}

fn channels(c: &[f64; 3]) -> Channels {
    Channels {
        min: c[0],
        max: c[1],
        mean: c[2],
    }
}

#[test]
fn projection_matches_strict_image_on_known_aps() {
    let index = ApIndex::new(["a", "b", "c"]);
    let fp = reduced(&[("c", [-70.0, -60.0, -65.0]), ("a", [-50.0; 3])]);
    let strict = to_1d_image(&fp, &index).unwrap();
    assert_eq!(project_to_1d_image(&fp, &index), strict);
}

proptest! {
    #[test]
    fn reduction_matches_sorted_oracle(samples in prop::collection::vec(-100.0f64..=0.0, 1..12)) {
        let c = reduce_samples(&samples).unwrap();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(c.min, sorted[0]);
        prop_assert_eq!(c.max, *sorted.last().unwrap());
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        prop_assert!((c.mean - mean).abs() < 1e-12);
        prop_assert!(c.min <= c.mean && c.mean <= c.max);
    }

    #[test]
    fn image_is_independent_of_listing_order(
        values in prop::collection::vec(-100.0f64..=0.0, 1..20),
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..values.len()).map(|i| format!("ap{i:03}")).collect();
        let index = ApIndex::new(ids.iter().map(String::as_str));
        let channels: Vec<(String, [f64; 3])> =
            ids.iter().zip(&values).map(|(id, &v)| (id.clone(), [v - 1.0, v, v - 0.5])).collect();
        let mut shuffled = channels.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let as_fp = |c: &[(String, [f64; 3])]| {
            reduced(&c.iter().map(|(a, v)| (a.as_str(), *v)).collect::<Vec<_>>())
        };
        let img = to_1d_image(&as_fp(&channels), &index).unwrap();
        let img2 = to_1d_image(&as_fp(&shuffled), &index).unwrap();
        prop_assert_eq!(&img, &img2);
        // Linear-scan oracle: pixel i belongs to the i-th smallest identifier.
        let mut sorted_ids = ids.clone();
        sorted_ids.sort();
        for (i, id) in sorted_ids.iter().enumerate() {
            let want = channels.iter().find(|(a, _)| a == id).unwrap().1;
            prop_assert_eq!(img.pixels[i], want);
        }
    }

    #[test]
    fn split_partitions_every_reference_point(
        devices in 2usize..9,
        rps in 1u32..6,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let ds = small_dataset(devices, rps);
        let (train, test) = ds.split(ratio, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), ds.len());
        let key = |r: &FingerprintRecord| (r.rp_id, r.device_id.clone());
        let a: BTreeSet<_> = train.records().iter().map(key).collect();
        let b: BTreeSet<_> = test.records().iter().map(key).collect();
        prop_assert!(a.is_disjoint(&b));
        for rp in 0..rps {
            prop_assert!(train.records().iter().any(|r| r.rp_id == rp));
            prop_assert!(test.records().iter().any(|r| r.rp_id == rp));
        }
    }
}
