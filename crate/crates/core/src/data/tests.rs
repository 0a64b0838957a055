use super::*;
use ndarray::Array1;

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        classes: 3,
        per_class: 6,
        test_normal: 4,
        test_anomalous: 6,
        image: (64, 64),
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn corpus_counts() {
    let cfg = SyntheticConfig {
        per_class: 200,
        test_normal: 50,
        test_anomalous: 50,
        image: (32, 32),
        ..small(1)
    };
    let (train, test) = gen_synthetic(&cfg).unwrap();
    assert_eq!(train.len(), 600);
    assert_eq!(test.len(), 300);
    assert_eq!(train.len() + test.len(), 900);
    assert_eq!(test.iter().filter(|s| s.is_anomalous).count(), 150);
}

#[test]
fn anomaly_areas_and_flags() {
    let (train, test) = gen_synthetic(&SyntheticConfig {
        test_anomalous: 30,
        ..small(2)
    })
    .unwrap();
    assert!(train.iter().all(|s| !s.is_anomalous && s.mask.is_none()));
    let mut kinds = std::collections::BTreeSet::new();
    for s in &test {
        assert!(s.is_consistent());
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if let Some(m) = &s.mask {
            let frac = m.iter().filter(|&&v| v > 0).count() as f64 / m.len() as f64;
            assert!((0.01..=0.10).contains(&frac), "area fraction {frac}");
            kinds.insert(s.defect.clone().unwrap());
        }
    }
    assert_eq!(kinds.len(), 3);
}

#[test]
fn generation_is_deterministic() {
    let a = gen_synthetic(&small(3)).unwrap();
    let b = gen_synthetic(&small(3)).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic(&small(4)).unwrap();
    assert_ne!(a.0[0].image, c.0[0].image);
}

#[test]
fn config_errors() {
    assert!(matches!(
        gen_synthetic(&SyntheticConfig {
            classes: 1,
            ..small(0)
        }),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        gen_synthetic(&SyntheticConfig {
            image: (40, 64),
            ..small(0)
        }),
        Err(Error::Config(_))
    ));
    assert_eq!("blob".parse::<AnomalyKind>().unwrap(), AnomalyKind::Blob);
    assert!("dent".parse::<AnomalyKind>().is_err());
}

#[test]
fn extract_shapes() {
    let stub = BackboneStub::new(16, 8, 0);
    let grid = stub
        .extract(&Array3::from_elem((224, 224, 3), 0.3))
        .unwrap();
    assert_eq!(grid.dim(), (196, 16));
    assert!(matches!(
        stub.extract(&Array3::zeros((20, 32, 3))),
        Err(Error::Input(_))
    ));
    assert_eq!(BackboneStub::grid(224, 224), (14, 14));
}

#[test]
fn zero_image_gives_bias_response() {
    let stub = BackboneStub::new(12, 6, 1);
    let grid = stub.extract(&Array3::zeros((32, 48, 3))).unwrap();
    let expected = stub.bias_response();
    for row in grid.rows() {
        for (a, b) in row.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sixteen_pixel_shift_moves_tokens_one_column() {
    let family = TextureFamily::new(5, 0, 3);
    let mut rng = class_rng(5, 0, 9);
    let wide = family.render(64, 96, 0.0, &mut rng);
    let left = wide.slice(s![.., 0..80, ..]).to_owned();
    let right = wide.slice(s![.., 16..96, ..]).to_owned();
    let stub = BackboneStub::new(8, 4, 2);
    let (a, b) = (stub.extract(&left).unwrap(), stub.extract(&right).unwrap());
    let (gh, gw) = BackboneStub::grid(64, 80);
    for y in 0..gh {
        for x in 0..gw - 1 {
            assert_eq!(a.row(y * gw + x + 1), b.row(y * gw + x));
        }
    }
}

#[test]
fn classes_separable_by_nearest_mean() {
    let cfg = SyntheticConfig {
        per_class: 20,
        test_normal: 20,
        test_anomalous: 0,
        ..small(6)
    };
    let (train, test) = gen_synthetic(&cfg).unwrap();
    let stub = BackboneStub::new(16, 8, 3);
    let pooled = |s: &LabeledSample| stub.extract(&s.image).unwrap().mean_axis(Axis(0)).unwrap();
    let mut means = vec![Array1::<f64>::zeros(16); 3];
    for s in &train {
        means[s.class_id] += &(pooled(s) / cfg.per_class as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let p = pooled(s);
            let d: Vec<f64> = means
                .iter()
                .map(|m| (&p - m).mapv(|v| v * v).sum())
                .collect();
            let best = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            best == s.class_id
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.95);
}

#[test]
fn mvtec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_synthetic(&small(7)).unwrap();
    write_mvtec_style(dir.path(), &train, &test).unwrap();
    let corpus = load_mvtec_style(dir.path(), (64, 64)).unwrap();
    assert_eq!(corpus.class_names, vec!["class_00", "class_01", "class_02"]);
    assert_eq!(corpus.train.len(), train.len());
    assert_eq!(corpus.test.len(), test.len());
    assert!(corpus.train.iter().all(|s| !s.is_anomalous));
    for s in &corpus.test {
        assert!(s.is_consistent());
        if s.is_anomalous {
            assert!(s.mask.as_ref().unwrap().iter().any(|&v| v == 1));
        } else {
            assert!(s.mask.is_none());
        }
    }
    // masks survive exactly; pixels up to 8-bit quantization
    let a = test
        .iter()
        .find(|s| s.is_anomalous && s.class_id == 0 && s.defect.as_deref() == Some("blob"))
        .unwrap();
    let b = corpus
        .test
        .iter()
        .find(|s| s.is_anomalous && s.class_id == 0 && s.defect.as_deref() == Some("blob"))
        .unwrap();
    assert_eq!(a.mask, b.mask);
    assert!(a
        .image
        .iter()
        .zip(b.image.iter())
        .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));

    let resized = load_mvtec_style(dir.path(), (32, 32)).unwrap();
    assert_eq!(resized.test[0].dims(), (32, 32));
}

#[test]
fn loader_rejects_anomalies_in_train_and_tolerates_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_synthetic(&small(8)).unwrap();
    write_mvtec_style(dir.path(), &train, &test).unwrap();
    let gt = dir
        .path()
        .join("class_01")
        .join("ground_truth")
        .join("scramble");
    let first = std::fs::read_dir(&gt)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::remove_file(&first).unwrap();
    let corpus = load_mvtec_style(dir.path(), (64, 64)).unwrap();
    let unmasked: Vec<_> = corpus
        .test
        .iter()
        .filter(|s| s.is_anomalous && s.mask.is_none())
        .collect();
    assert_eq!(unmasked.len(), 1);

    let bad = dir.path().join("class_00").join("train").join("crack");
    std::fs::create_dir_all(&bad).unwrap();
    assert!(matches!(
        load_mvtec_style(dir.path(), (64, 64)),
        Err(Error::Input(_))
    ));
}

#[test]
fn writer_rejects_anomalous_training_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = gen_synthetic(&small(9)).unwrap();
    let bad: Vec<_> = test
        .into_iter()
        .filter(|s| s.is_anomalous)
        .take(1)
        .collect();
    assert!(write_mvtec_style(dir.path(), &bad, &[]).is_err());
}

#[test]
fn normalizer_standardizes() {
    let x = ndarray::array![[1.0, 10.0], [3.0, 10.0]];
    let n = TokenNormalizer::fit(&x).unwrap();
    let y = n.apply(&x);
    assert_eq!(y, ndarray::array![[-1.0, 0.0], [1.0, 0.0]]);
}
