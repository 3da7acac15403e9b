use melafuse::data::*;
use melafuse::tensor::SeededRng;
use proptest::prelude::*;

/// Pairwise-count AUC, written independently of the metrics module.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

#[test]
fn logistic_on_darkness_and_age_separates_synthetic_classes() {
    let ds = Dataset::synthetic(&SynthConfig::new(500, 0.2, 32, 11)).unwrap();
    let feats: Vec<[f64; 2]> = ds
        .records
        .iter()
        .zip(&ds.images)
        .map(|(r, im)| {
            let l = im.luma();
            let dark = 1.0 - l.iter().sum::<f64>() / l.len() as f64;
            [dark, r.age_approx.unwrap_or(50.0) / 90.0]
        })
        .collect();
    let labels = ds.labels();
    let mean = |k: usize| feats.iter().map(|f| f[k]).sum::<f64>() / feats.len() as f64;
    let sd = |k: usize, m: f64| (feats.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / feats.len() as f64).sqrt();
    let (m0, m1) = (mean(0), mean(1));
    let (s0, s1) = (sd(0, m0), sd(1, m1));
    let x: Vec<[f64; 2]> = feats.iter().map(|f| [(f[0] - m0) / s0, (f[1] - m1) / s1]).collect();
    let mut w = [0.0; 3];
    for _ in 0..500 {
        let mut g = [0.0; 3];
        for (xi, &y) in x.iter().zip(&labels) {
            let p = 1.0 / (1.0 + (-(w[0] * xi[0] + w[1] * xi[1] + w[2])).exp());
            let e = p - f64::from(y);
            g[0] += e * xi[0];
            g[1] += e * xi[1];
            g[2] += e;
        }
        for k in 0..3 {
            w[k] -= 0.5 * g[k] / x.len() as f64;
        }
    }
    let scores: Vec<f64> = x.iter().map(|xi| w[0] * xi[0] + w[1] * xi[1]).collect();
    let auc = pairwise_auc(&scores, &labels);
    assert!(auc > 0.8, "sanity AUC {auc}");
    assert!(w[0] > 0.0 && w[1] > 0.0);
}

#[test]
fn hair_removal_moves_hairy_lesions_toward_clean_originals() {
    for seed in 0..32 {
        let (clean, hairy) = synth_lesion_pair(seed, seed % 2 == 0, 64);
        let k = default_hair_kernel(64);
        let fixed = remove_hair(&hairy, k, HAIR_THRESHOLD).unwrap();
        let (before, after) = (hairy.mean_abs_diff(&clean), fixed.mean_abs_diff(&clean));
        assert!(after < before, "seed {seed}: {after} !< {before}");
        let twice = remove_hair(&fixed, k, HAIR_THRESHOLD).unwrap();
        assert!(twice.mean_abs_diff(&fixed) < 1e-3, "seed {seed}: not idempotent");
    }
}

#[test]
fn dataset_round_trips_through_disk_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::synthetic(&SynthConfig::new(12, 0.25, 16, 4)).unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(&dir.path().join("metadata.csv"), &dir.path().join("images")).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.images, ds.images);

    let rows: Vec<ManifestRow> = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| ManifestRow {
            image_name: r.image_name.clone(),
            patient_id: r.patient_id.clone(),
            target: r.target,
            provenance: if i % 3 == 0 { Provenance::Copy { copy: 1, seed: i as u64 } } else { Provenance::Original },
            fold: i % 5,
            feature_width: 12,
        })
        .collect();
    let mut buf = Vec::new();
    write_manifest(&mut buf, &rows).unwrap();
    assert_eq!(read_manifest(buf.as_slice()).unwrap(), rows);
}

fn arb_image() -> impl Strategy<Value = Image> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |d| Image::new(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn augment_stays_in_unit_range_and_is_seeded(img in arb_image(), seed in any::<u64>(), gray in 0.0f64..=1.0) {
        let s = img.height().min(img.width());
        let policy = AugmentPolicy { p_gray: gray, brightness: (0.5, 1.8), ..AugmentPolicy::train(s) };
        let a = augment(&img, &policy, &mut SeededRng::new(seed)).unwrap();
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &augment(&img, &policy, &mut SeededRng::new(seed)).unwrap());
        let id = augment(&img, &AugmentPolicy::identity(img.height().min(img.width())), &mut SeededRng::new(seed));
        if img.height() == img.width() {
            prop_assert_eq!(id.unwrap(), img);
        }
    }

    #[test]
    fn remove_hair_stays_in_unit_range(img in arb_image(), k in prop::sample::select(vec![3usize, 5, 7])) {
        let out = remove_hair(&img, k, HAIR_THRESHOLD).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn oversample_keeps_originals_and_reaches_ratio(
        labels in proptest::collection::vec(0u8..=1, 2..80),
        ratio in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let draws = oversample_indices(&labels, ratio, &mut SeededRng::new(seed)).unwrap();
        for (i, d) in draws.iter().take(labels.len()).enumerate() {
            prop_assert_eq!(d.source, i);
            prop_assert_eq!(d.provenance, Provenance::Original);
        }
        let p = draws.iter().filter(|d| labels[d.source] == 1).count();
        let n = draws.len() - p;
        prop_assert!(p.min(n) as f64 / p.max(n) as f64 >= ratio - 1e-12);
        let minority = u8::from(pos <= labels.len() - pos);
        prop_assert!(draws[labels.len()..].iter().all(|d| labels[d.source] == minority));
    }

    #[test]
    fn encoding_width_is_schema_width(
        sex in 0usize..3, age in proptest::option::of(0u32..19), site in proptest::option::of(0usize..7),
    ) {
        let schema = FeatureSchema::new(SITES.iter().map(|s| s.to_string()).collect());
        let record = MetadataRecord {
            image_name: "x".into(),
            patient_id: "p".into(),
            sex: [Sex::Female, Sex::Male, Sex::Unknown][sex],
            age_approx: age.map(|a| f64::from(a * 5)),
            anatom_site: site.map(|s| if s < 6 { SITES[s].to_string() } else { "elsewhere".into() }),
            diagnosis: None,
            benign_malignant: Label::Benign,
            target: 0,
        };
        let f = encode_features(&record, &schema);
        prop_assert_eq!(f.len(), schema.width());
        prop_assert!((f[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((f[5..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
