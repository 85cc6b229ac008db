use geodin::bench::{DetectionReport, DetectionRow, ScoreName, ShiftKind};
use geodin::persistence::*;
use geodin::trainer::{ArchConfig, TrainConfig};
use geodin::{GeodinError, HeadVariant, Model};
use proptest::prelude::*;

fn arch_strategy() -> impl Strategy<Value = (usize, Vec<usize>, usize, usize, usize, bool, u64)> {
    (
        1usize..6,
        prop::collection::vec(1usize..6, 0..3),
        1usize..5,
        2usize..5,
        0usize..4,
        any::<bool>(),
        any::<u64>(),
    )
}

fn build(input: usize, hidden: Vec<usize>, d: usize, m: usize, v: usize, normalize: bool, seed: u64) -> Model {
    let cfg = TrainConfig {
        seed,
        variant: HeadVariant::ALL[v],
        arch: ArchConfig {
            hidden,
            feature_dim: d,
            normalize_input: normalize,
        },
        ..TrainConfig::default()
    };
    let mut model = Model::init(input, m, &cfg).unwrap();
    model.meta.trained = seed.is_multiple_of(2);
    model.meta.provenance = format!("seed {seed} ✓");
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoints_round_trip_bit_exactly((input, hidden, d, m, v, normalize, seed) in arch_strategy()) {
        let model = build(input, hidden, d, m, v, normalize, seed);
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        prop_assert_eq!(model_to_bytes(&back), bytes);
        for (a, b) in model.param_groups().iter().zip(back.param_groups()) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back, model);
    }

    #[test]
    fn any_flipped_payload_bit_is_caught(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let model = build(3, vec![4], 2, 3, 3, true, 1);
        let mut bytes = model_to_bytes(&model);
        let payload = 16..bytes.len() - 8;
        let i = payload.start + pos.index(payload.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(matches!(model_from_bytes(&bytes), Err(GeodinError::Integrity(_))));
    }
}

#[test]
fn header_fields_are_little_endian() {
    let model = build(2, vec![3], 2, 2, 0, false, 0);
    let bytes = model_to_bytes(&model);
    assert_eq!(&bytes[..4], b"GODN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + len + 8);
    let sum = u64::from_le_bytes(bytes[16 + len..].try_into().unwrap());
    assert_eq!(sum, fnv1a64(&bytes[16..16 + len]));
    // input dim, hidden count, the one width, feature dim, classes
    let dims: Vec<u32> = (0..5)
        .map(|k| u32::from_le_bytes(bytes[16 + 4 * k..20 + 4 * k].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![2, 1, 3, 2, 2]);
}

#[test]
fn fnv_reference_values() {
    assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
}

#[test]
fn files_round_trip_and_report_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.godn");
    let model = build(4, vec![5, 3], 3, 4, 2, true, 9);
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
    let missing = dir.path().join("absent.godn");
    let err = load_model(&missing).unwrap_err();
    assert!(err.to_string().contains("absent.godn"), "{err}");
}

#[test]
fn embedding_files_parse_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.txt");
    std::fs::write(&path, "cat 0.1 0.2 0.3\ndog 0.4 0.5 0.6\ncat 9 9 9\n").unwrap();
    let e = parse_embeddings(&path).unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!(e.get("cat").unwrap(), &[0.1, 0.2, 0.3][..]);
    std::fs::write(&path, "cat 0.1 0.2 0.3\ndog 0.4 0.5\n").unwrap();
    match parse_embeddings(&path) {
        Err(GeodinError::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

fn sample_report() -> DetectionReport {
    DetectionReport {
        rows: vec![
            DetectionRow {
                score: ScoreName::G,
                shift_kind: ShiftKind::GaussianNoise,
                severity: 3,
                auroc: 0.123456789,
                tnr_at_tpr95: 1.0 / 3.0,
                n_id: 640,
                n_ood: 640,
                seed: 7,
            },
            DetectionRow {
                score: ScoreName::Energy,
                shift_kind: ShiftKind::ConceptSplit,
                severity: 0,
                auroc: 0.5,
                tnr_at_tpr95: 0.0,
                n_id: 640,
                n_ood: 320,
                seed: 7,
            },
        ],
        config: Some(serde_json::json!({"task": {"seed": 7}})),
    }
}

#[test]
fn reports_round_trip_at_six_significant_digits() {
    let report = sample_report();
    let csv = report_to_csv(&report).unwrap();
    assert!(csv.starts_with("score,shift_kind,severity,auroc,tnr_at_tpr95,n_id,n_ood,seed\n"));
    assert!(csv.contains("g,gaussian_noise,3,0.123457,0.333333,640,640,7"), "{csv}");
    let back = report_from_csv(&csv).unwrap();
    assert_eq!(back.rows[0].auroc, 0.123457);
    assert_eq!(back.rows[1], report.rows[1]);

    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("r.json");
    write_report(&report, &json_path, ReportFormat::Json).unwrap();
    let from_json = read_report(&json_path).unwrap();
    assert_eq!(from_json.config, report.config);
    assert_eq!(from_json.rows, back.rows);
    let csv_path = dir.path().join("r.csv");
    write_report(&report, &csv_path, ReportFormat::Csv).unwrap();
    assert_eq!(read_report(&csv_path).unwrap().rows, back.rows);
}
