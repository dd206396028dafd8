use proptest::prelude::*;
use segbias::errorsim::{boundaries, downsampling_bias_curve, error_effect, perturb, ErrorKind, ErrorModel};
use segbias::phantom::{generate_cohort, CohortSpec, PhantomSpec};
use segbias::volume::{LabelMap, VoxelGeometry};

fn kind() -> impl Strategy<Value = ErrorKind> {
    prop::sample::select(vec![
        ErrorKind::RandomBalanced,
        ErrorKind::SystematicDilate,
        ErrorKind::SystematicErode,
    ])
}

/// Random blob of labels 1 and 2 on a small 3D grid.
fn blob() -> impl Strategy<Value = LabelMap> {
    (prop::collection::vec(3usize..8, 3), any::<u64>()).prop_map(|(d, seed)| {
        let g = VoxelGeometry::isotropic(&d, 1.0).unwrap();
        let mut s = seed | 1;
        let mut m = LabelMap::from_fn(g.clone(), |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            match s % 5 {
                0 | 1 => 1,
                2 => 2,
                _ => 0,
            }
        })
        .unwrap();
        if m.foreground_count() == 0 {
            m = LabelMap::from_fn(g, |i| (i[0] == 0) as u32).unwrap();
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn zero_strength_is_identity(m in blob(), k in kind(), seed in any::<u64>()) {
        prop_assert_eq!(perturb(&m, &ErrorModel::new(k, 0.0, seed).unwrap()).unwrap(), m);
    }

    #[test]
    fn perturb_is_seeded(m in blob(), k in kind(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let model = ErrorModel::new(k, p, seed).unwrap();
        prop_assert_eq!(perturb(&m, &model).unwrap(), perturb(&m, &model).unwrap());
    }

    #[test]
    fn labels_stay_in_table(m in blob(), k in kind(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let out = perturb(&m, &ErrorModel::new(k, p, seed).unwrap()).unwrap();
        prop_assert_eq!(out.label_table(), m.label_table());
        prop_assert!(out.labels().iter().all(|l| m.label_table().contains_key(l)));
    }

    /// Single-label maps, where boundaries are not disturbed by other labels.
    #[test]
    fn single_label_moves_stay_on_the_boundary(m in blob(), k in kind(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = m.with_labels(m.labels().iter().map(|&l| (l == 1) as u32).collect()).unwrap();
        prop_assume!(m.count(1) > 0);
        let (inner, outer) = boundaries(&m, 1);
        let out = perturb(&m, &ErrorModel::new(k, p, seed).unwrap()).unwrap();
        let mut removed = 0;
        let mut added = 0;
        for (i, (&a, &b)) in m.labels().iter().zip(out.labels()).enumerate() {
            if a == b {
                continue;
            }
            if a == 1 {
                prop_assert!(inner.binary_search(&i).is_ok());
                removed += 1;
            } else {
                prop_assert!(outer.binary_search(&i).is_ok());
                added += 1;
            }
        }
        match k {
            ErrorKind::RandomBalanced => prop_assert_eq!(removed, added),
            ErrorKind::SystematicDilate => prop_assert_eq!(removed, 0),
            ErrorKind::SystematicErode => prop_assert_eq!(added, 0),
        }
    }

    #[test]
    fn systematic_volume_is_monotone_in_strength(m in blob(), seed in any::<u64>(), p in 0.0f64..0.5, dp in 0.0f64..0.5) {
        for (k, sign) in [(ErrorKind::SystematicDilate, 1i64), (ErrorKind::SystematicErode, -1)] {
            let a = perturb(&m, &ErrorModel::new(k, p, seed).unwrap()).unwrap().foreground_count() as i64;
            let b = perturb(&m, &ErrorModel::new(k, p + dp, seed).unwrap()).unwrap().foreground_count() as i64;
            prop_assert!(sign * (b - a) >= 0);
        }
    }

    #[test]
    fn native_resolution_curve_is_identity(m in blob()) {
        let c = downsampling_bias_curve(&m, &[1.0]).unwrap();
        prop_assert_eq!(c, vec![(1.0, m.foreground_volume())]);
    }
}

#[test]
fn finer_resolutions_are_rejected() {
    let g = VoxelGeometry::isotropic(&[4, 4, 4], 1.0).unwrap();
    let m = LabelMap::from_fn(g, |i| (i[0] > 1) as u32).unwrap();
    assert!(downsampling_bias_curve(&m, &[0.5]).is_err());
    assert!(downsampling_bias_curve(&m, &[]).is_err());
}

#[test]
fn empty_foreground_is_an_error() {
    let g = VoxelGeometry::isotropic(&[3, 3, 3], 1.0).unwrap();
    let m = LabelMap::from_fn(g, |_| 0).unwrap();
    let model = ErrorModel::new(ErrorKind::SystematicDilate, 0.5, 0).unwrap();
    assert!(matches!(perturb(&m, &model), Err(segbias::Error::EmptyForeground)));
}

#[test]
fn cohort_level_biases_follow_error_kind() {
    let spec = PhantomSpec::default_ribbon();
    let cohort = generate_cohort(&spec, &CohortSpec { n_per_group: 10, ..Default::default() }).unwrap();
    let refs: Vec<LabelMap> = cohort.subjects.iter().map(|s| s.reference.clone()).collect();
    let mut last = [0.0f64; 2];
    for p in [0.2, 0.5, 0.8] {
        let r = error_effect(&refs, 1, ErrorKind::RandomBalanced, p, 3).unwrap();
        assert_eq!(r.median_bias, 0.0);
        let d = error_effect(&refs, 1, ErrorKind::SystematicDilate, p, 3).unwrap();
        let e = error_effect(&refs, 1, ErrorKind::SystematicErode, p, 3).unwrap();
        assert!(d.median_bias > last[0], "dilate at {p}: {}", d.median_bias);
        assert!(e.median_bias < last[1], "erode at {p}: {}", e.median_bias);
        last = [d.median_bias, e.median_bias];
    }
}
