use seu::montecarlo::*;
use seu::urn::Trajectory;
use seu::*;

fn bern(p: &[f64]) -> ResponseModel {
    ResponseModel::bernoulli(p).unwrap()
}

fn entries(p: [f64; 2]) -> Vec<CompareEntry> {
    vec![
        CompareEntry {
            label: "seu-target".into(),
            design: rpw_target_design(),
            model: bern(&p),
        },
        CompareEntry {
            label: "classic".into(),
            design: classic_rpw_design(),
            model: bern(&p),
        },
    ]
}

#[test]
fn compare_at_07_05_lists_both_closed_forms() {
    let t = compare_designs(&entries([0.7, 0.5]), &ReportOptions::default(), None).unwrap();
    let seu = t.rows[0].lambda_sharp_diag.as_ref().unwrap()[0];
    let rpw = t.rows[1].lambda_sharp_diag.as_ref().unwrap()[0];
    assert!((seu - 2.34375).abs() < 1e-6);
    assert!((rpw - 1.328125).abs() < 1e-6);
    let mut csv = Vec::new();
    t.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(
        csv.contains("2.34375000000") && csv.contains("1.32812500000"),
        "{csv}"
    );
}

#[test]
fn compare_at_08_08_marks_rpw_not_applicable() {
    let t = compare_designs(&entries([0.8, 0.8]), &ReportOptions::default(), None).unwrap();
    assert_eq!(t.rpw_reference, Some(RpwReference::NotApplicable));
    assert!(t.rows[1].lambda_sharp_diag.is_none());
    assert!((t.rows[0].lambda_sharp_diag.as_ref().unwrap()[0] - 6.25).abs() < 1e-6);
    assert!(t.render().contains("not-applicable"));
}

#[test]
fn compare_identical_configs_give_identical_rows() {
    let e = vec![
        entries([0.7, 0.5])[0].clone(),
        entries([0.7, 0.5])[0].clone(),
    ];
    let sim = CompareSimulation {
        horizon: 200,
        replications: 100,
        master_seed: 1,
        threads: None,
    };
    let t = compare_designs(&e, &ReportOptions::default(), Some(&sim)).unwrap();
    assert_eq!(
        serde_json::to_string(&t.rows[0])
            .unwrap()
            .replace("seu-target", ""),
        serde_json::to_string(&t.rows[1])
            .unwrap()
            .replace("seu-target", "")
    );
}

#[test]
fn compare_rejects_mismatched_models() {
    let mut e = entries([0.7, 0.5]);
    e[1].model = bern(&[0.7, 0.4]);
    assert!(compare_designs(&e, &ReportOptions::default(), None).is_err());
}

fn ensemble(d: &Design, p: &[f64], n: u64, reps: u64) -> (Vec<Trajectory>, Vec<u64>) {
    let stages = log_spaced_stages(n, 4);
    let m = bern(p);
    let trajs = (0..reps)
        .map(|i| {
            let mut rng = RngStream::new(77, i);
            run_trial(init_state(d.k(), 1.0).unwrap(), d, &m, n, &mut rng, &stages).unwrap()
        })
        .collect();
    (trajs, stages)
}

#[test]
fn lln_slope_for_constant_additions_is_about_minus_half() {
    let d = target_design_from_expr("1, 1").unwrap();
    let (trajs, _) = ensemble(&d, &[0.5, 0.5], 20_000, 100);
    let diag = lln_diagnostic_ensemble(&trajs, &[0.5, 0.5]);
    let slope = diag.slope.unwrap();
    assert!(diag.reliable);
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn lln_slope_for_example3_is_healthy() {
    let (trajs, _) = ensemble(&rpw_target_design(), &[0.7, 0.5], 20_000, 100);
    let diag = lln_diagnostic_ensemble(&trajs, &[0.625, 0.375]);
    assert!(diag.slope.unwrap() <= -0.4, "slope {:?}", diag.slope);
    let single = lln_diagnostic(&trajs[0], &[0.625, 0.375]);
    assert_eq!(single.stages, diag.stages);
    assert!(single.reliable);
}

#[test]
fn clt_check_refuses_invalid_designs() {
    let d = bhs_design(2).unwrap();
    let m = bern(&[0.9, 0.8]);
    let r = full_report(&d, &m, &ReportOptions::default()).unwrap();
    let s = run_batch(&BatchConfig::new(d, m, 50, 20, 1)).unwrap();
    match clt_check(&s, &r, &CltTolerances::default()) {
        Err(SeuError::CltInvalid { lambda }) => assert!((lambda - 0.7).abs() < 1e-10),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn clt_check_table_for_example3() {
    let d = rpw_target_design();
    let m = bern(&[0.7, 0.5]);
    let r = full_report(&d, &m, &ReportOptions::default()).unwrap();
    let s = run_batch(&BatchConfig::new(d, m, 1000, 3000, 4)).unwrap();
    let t = clt_check(
        &s,
        &r,
        &CltTolerances {
            diagonal: 0.3,
            ..Default::default()
        },
    )
    .unwrap();
    let theta = t.find("theta_clt", "1,1").unwrap();
    assert!((theta.predicted - 0.336).abs() < 1e-9);
    assert!(theta.pass.unwrap(), "{}", t.render());
    let n = t.find("Lambda_sharp", "1,1").unwrap();
    assert!((n.predicted - 2.34375).abs() < 1e-6);
    assert_eq!(n.error_kind, ErrorKind::Relative);
    let mut csv = Vec::new();
    write_comparison_csv(&t.rows, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.lines().count() == t.rows.len() + 1);
}

#[test]
fn replication_errors_name_the_stream() {
    // A design that rejects the model's responses fails on the first stage.
    let d = bhs_design(2).unwrap();
    let m = ResponseModel::new(vec![
        ArmDistribution::Normal { mean: 0.5, sd: 1.0 },
        ArmDistribution::Normal { mean: 0.5, sd: 1.0 },
    ])
    .unwrap();
    let mut cfg = BatchConfig::new(d, m, 10, 5, 1);
    cfg.threads = Some(1);
    match run_batch(&cfg) {
        Err(SeuError::Replication { stream_index, .. }) => assert_eq!(stream_index, 0),
        other => panic!("expected replication error, got {:?}", other.map(|_| ())),
    }
}
