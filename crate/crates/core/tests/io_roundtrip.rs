use proptest::prelude::*;

use ttmkit::io::{self, FileKind, Metadata};
use ttmkit::spin_boson::{ExpFit, ExpTerm};
use ttmkit::superop::{KernelKind, KernelSeries, MapTrajectory, Op2, Superoperator, C64};

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
    ]
}

fn superop() -> impl Strategy<Value = Superoperator> {
    proptest::collection::vec((any_f64(), any_f64()), 16)
        .prop_map(|v| Superoperator::from_fn(|r, c| C64::new(v[4 * r + c].0, v[4 * r + c].1)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maps_round_trip_bit_identical(maps in proptest::collection::vec(superop(), 1..6), dt in 1e-4f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut all = vec![Superoperator::identity()];
        all.extend(maps);
        let traj = MapTrajectory::from_raw(dt, all).unwrap();
        io::write_trajectory(&p, &traj, &Metadata::new(FileKind::Maps, dt, "prop")).unwrap();
        let (back, meta) = io::read_trajectory(&p).unwrap();
        prop_assert_eq!(back, traj);
        prop_assert_eq!(meta.dt.to_bits(), dt.to_bits());
    }

    #[test]
    fn kernels_round_trip_bit_identical(ks in proptest::collection::vec(superop(), 1..6), half in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        let kind = if half { KernelKind::ContinuousHalf } else { KernelKind::Discrete };
        let series = KernelSeries::new(0.05, kind, ks).unwrap();
        io::write_kernels(&p, &series, &Metadata::new(FileKind::Discrete, 0.05, "prop")).unwrap();
        let (back, _) = io::read_kernels(&p).unwrap();
        prop_assert_eq!(back, series);
    }

    #[test]
    fn states_round_trip_bit_identical(v in proptest::collection::vec((any_f64(), any_f64()), 4..20)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let states: Vec<Op2> = v
            .chunks_exact(4)
            .map(|c| Op2::new(C64::new(c[0].0, c[0].1), C64::new(c[1].0, c[1].1), C64::new(c[2].0, c[2].1), C64::new(c[3].0, c[3].1)))
            .collect();
        io::write_states(&p, 0.1, &states, &Metadata::new(FileKind::States, 0.1, "prop")).unwrap();
        let (back, _) = io::read_states(&p).unwrap();
        prop_assert_eq!(back, states);
    }

    #[test]
    fn bath_round_trip_bit_identical(v in proptest::collection::vec((any_f64(), any_f64(), 1e-6f64..1e3, any_f64()), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bath.csv");
        let fit = ExpFit::new(v.iter().map(|t| ExpTerm { alpha: C64::new(t.0, t.1), nu: C64::new(t.2, t.3) }).collect()).unwrap();
        io::write_bath(&p, &fit).unwrap();
        let back = io::read_bath(&p).unwrap();
        prop_assert_eq!(back.terms(), fit.terms());
    }
}

#[test]
fn bath_file_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bath.csv");
    let fit = ExpFit::new(vec![ExpTerm { alpha: C64::new(0.5, -0.25), nu: C64::new(2.0, 1.0) }]).unwrap();
    io::write_bath(&p, &fit).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("re_alpha,im_alpha,re_nu,im_nu\n"));
    std::fs::write(&p, "0.5,0,1,0\n0.25,0.1,3,-2\n").unwrap();
    assert_eq!(io::read_bath(&p).unwrap().len(), 2);
    std::fs::write(&p, "0.5,0,-1,0\n").unwrap();
    assert!(io::read_bath(&p).is_err());
}

#[test]
fn series_header_lists_row_major_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let traj = MapTrajectory::new(0.1, vec![Superoperator::identity()]).unwrap();
    io::write_trajectory(&p, &traj, &Metadata::new(FileKind::Maps, 0.1, "t")).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t_index,t,re_00,im_00,re_01,im_01,re_02"));
    assert!(header.ends_with("re_33,im_33"));
    assert!(dir.path().join("m.json").exists());
}
