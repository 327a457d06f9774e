use ctxalign::data::{
    chrono_split, few_shot_subset, make_windows, read_csv, synth_generate, write_csv, CsvOptions, MissingPolicy,
    MultivariateSeries, SynthKind, SynthParams,
};
use ctxalign::Error;
use proptest::prelude::*;

fn ramp(t: usize, d: usize) -> MultivariateSeries {
    MultivariateSeries {
        name: "ramp".into(),
        timestamps: None,
        columns: (0..d).map(|i| format!("c{i}")).collect(),
        values: (0..t).map(|i| (0..d).map(|c| (i * 10 + c) as f64).collect()).collect(),
        frequency: None,
    }
}

proptest! {
    #[test]
    fn windows_follow_the_count_formula(t in 10usize..200, t_in in 1usize..20, h in 1usize..10, stride in 1usize..6, d in 1usize..4) {
        prop_assume!(t >= t_in + h);
        let w = make_windows(&ramp(t, d), t_in, h, stride).unwrap();
        prop_assert_eq!(w.len(), d * ((t - t_in - h) / stride + 1));
        for s in &w {
            prop_assert_eq!(s.input.len(), t_in);
            prop_assert_eq!(s.target.len(), h);
            // target continues the input
            prop_assert_eq!(s.target[0], ((s.origin + t_in) * 10 + s.channel_id) as f64);
        }
    }

    #[test]
    fn chronological_splits_do_not_overlap(
        t in 60usize..300,
        stride in 1usize..4,
        d in 1usize..3,
        a in 0.3f64..0.8,
        b in 0.05f64..0.15,
    ) {
        let w = make_windows(&ramp(t, d), 12, 4, stride).unwrap();
        let total = w.len();
        let split = chrono_split(w, (a, b, 1.0 - a - b)).unwrap();
        prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), total);
        let max = |v: &[ctxalign::data::WindowSample]| v.iter().map(|s| s.origin).max().unwrap();
        let min = |v: &[ctxalign::data::WindowSample]| v.iter().map(|s| s.origin).min().unwrap();
        prop_assert!(max(&split.train) < min(&split.val));
        prop_assert!(max(&split.val) < min(&split.test));
    }

    #[test]
    fn few_shot_takes_a_prefix(n in 1usize..100, ratio in 0.01f64..1.0) {
        let v: Vec<usize> = (0..n).collect();
        let sub = few_shot_subset(&v, ratio).unwrap();
        prop_assert_eq!(sub.len(), ((ratio * n as f64) - 1e-9).ceil() as usize);
        prop_assert_eq!(&v[..sub.len()], &sub[..]);
    }
}

#[test]
fn bad_split_fractions_are_rejected() {
    let w = make_windows(&ramp(50, 1), 5, 1, 1).unwrap();
    assert!(chrono_split(w.clone(), (0.5, 0.5, 0.5)).is_err());
    assert!(chrono_split(w, (1.0, 0.0, 0.0)).is_err());
    assert!(few_shot_subset(&[1, 2], 0.0).is_err());
}

#[test]
fn csv_round_trip() {
    let s = synth_generate(
        SynthKind::Ar2,
        50,
        3,
        &SynthParams {
            channels: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    write_csv(&s, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), &CsvOptions::default()).unwrap();
    assert_eq!(back.values, s.values);
    assert_eq!(back.columns, s.columns);
    assert_eq!(back.timestamps, s.timestamps);
}

#[test]
fn csv_errors_name_the_line() {
    let text = "date,a,b\n0,1,2\n1,x,3\n";
    match read_csv(text.as_bytes(), &CsvOptions::default()) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    let ragged = "date,a,b\n0,1,2\n1,3\n";
    assert!(matches!(read_csv(ragged.as_bytes(), &CsvOptions::default()), Err(Error::Parse { row: 3, .. })));
}

#[test]
fn missing_cells_follow_the_policy() {
    let text = "date,a\n0,1.5\n1,\n2,3\n";
    assert!(matches!(read_csv(text.as_bytes(), &CsvOptions::default()), Err(Error::Parse { row: 3, .. })));
    let opts = CsvOptions {
        missing: MissingPolicy::ForwardFill,
        ..Default::default()
    };
    let s = read_csv(text.as_bytes(), &opts).unwrap();
    assert_eq!(s.channel(0), vec![1.5, 1.5, 3.0]);
    // nothing to fill from on the first row
    assert!(read_csv("date,a\n0,\n".as_bytes(), &opts).is_err());
}

#[test]
fn synthetic_series_are_seeded() {
    let p = SynthParams::default();
    for kind in [SynthKind::SineMix, SynthKind::Ar2, SynthKind::TrendSeasonal] {
        let a = synth_generate(kind, 300, 9, &p).unwrap();
        assert_eq!(a, synth_generate(kind, 300, 9, &p).unwrap());
        assert_ne!(a.values, synth_generate(kind, 300, 10, &p).unwrap().values);
        assert!(a.values.iter().flatten().all(|v| v.is_finite()));
    }
}
