use rfcn_core::config::ExperimentConfig;
use rfcn_core::data_io::{decode_weights, encode_weights, load_dataset, load_model, save_dataset, save_model};
use rfcn_core::gradcheck::miniature_network;
use rfcn_core::phantom::{generate_dataset, normalize_intensity, PhantomSpec};
use rfcn_core::Error;

fn spec(exams: usize, prevalence: f64) -> PhantomSpec {
    PhantomSpec {
        side: 64,
        exams,
        prevalence,
        ..PhantomSpec::default()
    }
}

#[test]
fn zero_prevalence_means_no_malignant_breast() {
    let data = generate_dataset(&spec(40, 0.0), 1).unwrap();
    assert!(data.iter().all(|e| e.exam.labels.values().all(|&l| !l)));
    assert!(data.iter().flat_map(|e| &e.images).flat_map(|i| &i.findings).all(|f| f.1 != rfcn_core::FindingClass::Malignant));
}

#[test]
fn malignant_count_within_three_sigma() {
    let data = generate_dataset(&spec(200, 0.5), 2).unwrap();
    let n = data.iter().flat_map(|e| e.exam.labels.values()).count();
    let k = data.iter().flat_map(|e| e.exam.labels.values()).filter(|&&l| l).count();
    let (mean, sd) = (n as f64 * 0.5, (n as f64 * 0.25).sqrt());
    assert!((k as f64 - mean).abs() <= 3.0 * sd, "{k} of {n}");
    // Labels follow the rendered lesions.
    for e in &data {
        for im in &e.images {
            let malignant = im.findings.iter().any(|f| f.1 == rfcn_core::FindingClass::Malignant);
            assert_eq!(malignant, e.exam.labels[&im.id.laterality]);
        }
    }
}

#[test]
fn device_luts_equalize_intensities() {
    // Same tissue through two devices with different response curves.
    let a = PhantomSpec {
        device_gammas: vec![1.0, 1.0],
        ..spec(6, 0.5)
    };
    let b = PhantomSpec {
        device_gammas: vec![0.6, 0.6],
        ..a.clone()
    };
    let (da, db) = (generate_dataset(&a, 3).unwrap(), generate_dataset(&b, 3).unwrap());
    for (ea, eb) in da.iter().zip(&db) {
        for (ia, ib) in ea.images.iter().zip(&eb.images) {
            assert_ne!(ia.raw, ib.raw);
            let na = normalize_intensity(&ia.raw, &a.lut(ea.device).unwrap()).unwrap();
            let nb = normalize_intensity(&ib.raw, &b.lut(eb.device).unwrap()).unwrap();
            let mean = |t: &rfcn_core::Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            let (ma, mb) = (mean(&na), mean(&nb));
            assert!((ma - mb).abs() <= 0.01 * ma, "{ma} vs {mb}");
        }
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&spec(5, 0.5), 4).unwrap();
    save_dataset(dir.path(), &data).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
}

#[test]
fn misspelled_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let mut text = ExperimentConfig::default().to_toml().unwrap();
    text = text.replace("momentum", "momentun");
    std::fs::write(&path, text).unwrap();
    let err = ExperimentConfig::load(&path, &[]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("momentun") && !msg.contains('\n'), "{msg}");
}

#[test]
fn corrupted_weights_report_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.weights");
    let (_, params) = miniature_network().unwrap();
    save_model(&path, &params).unwrap();
    assert_eq!(load_model(&path).unwrap(), params);

    let bytes = encode_weights(&params);
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"NOTWTS\0\0");
    assert!(matches!(decode_weights(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(decode_weights(&bad), Err(Error::Version { found: 9, .. })));
    let cut = bytes.len() - 5;
    match decode_weights(&bytes[..cut]) {
        Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_weights(&trailing), Err(Error::Format { .. })));
}
