use ratchet_core::experiments::{
    apply_overrides, read_meta, registry, run_scenario, run_spec, scenario, RunContext, ScenarioKind,
};
use ratchet_core::Error;

fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn every_scenario_names_its_figure() {
    for s in registry() {
        assert!(!s.figure.is_empty() && !s.description.is_empty(), "{}", s.name);
        for a in s.axes() {
            assert!(a.points <= 41, "{} is not desk scale", s.name);
        }
        if matches!(s.kind, ScenarioKind::Buildup | ScenarioKind::Compare { .. }) {
            assert!(s.sweep.n_cycles <= 100);
        }
    }
}

#[test]
fn output_directory_contract() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_scenario("fig2a", &ov(&[("sweep.n_cycles", "2")]), &RunContext::default()).unwrap();
    let out = r.write_to(dir.path()).unwrap();
    assert_eq!(out.parent().unwrap(), dir.path().join("fig2a"));
    let csv = std::fs::read_to_string(out.join("data.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["t_ms", "B_mT", "pol_H", "pol_NV", "pol_P1", "cycle_index", "event_tag"]);
    assert_eq!(csv.lines().count(), r.rows.len() + 1);

    let meta = read_meta(&out.join("meta.json")).unwrap();
    assert_eq!(meta.columns, header);
    assert_eq!(meta.figure, "2a");
    assert_eq!(meta.config_hash.len(), 64);
    assert!(meta.derived.contains_key("B_match_mT"));

    // the embedded spec reproduces the data
    let again = run_spec(&meta.spec, &RunContext::default()).unwrap();
    assert_eq!(again.csv_string().unwrap(), csv);
    assert_eq!(again.meta.config_hash, meta.config_hash);

    // a second write does not clobber the first
    let other = r.write_to(dir.path()).unwrap();
    assert_ne!(other, out);
}

#[test]
fn unknown_scenario_lists_registry() {
    let e = run_scenario("fig9z", &[], &RunContext::default()).unwrap_err();
    match e {
        Error::UnknownScenario { known, .. } => assert!(known.contains("fig2a") && known.contains("figS8")),
        other => panic!("{other}"),
    }
}

#[test]
fn overrides_are_validated() {
    let s = scenario("fig2a").unwrap();
    let e = apply_overrides(&s, &ov(&[("sweep.beta_up_mT_per_ms", "-1")])).unwrap_err();
    assert!(e.to_string().contains("beta_up_mT_per_ms"));
    let e = apply_overrides(&s, &ov(&[("sweep.beta_up", "3")])).unwrap_err();
    assert!(e.to_string().contains("sweep.beta_up"));
}

#[test]
fn single_sweeps_have_both_directions() {
    let r = run_scenario("fig1e", &ov(&[("sweep.samples_per_sweep", "3")]), &RunContext::default()).unwrap();
    assert_eq!(r.filter("direction", "up").unwrap().len(), 1 + 3 + 1);
    assert_eq!(r.filter("direction", "down").unwrap().len(), 1 + 3 + 1);
    assert!(r.meta.derived.contains_key("final_pol_H_up"));
}

#[test]
fn tm_buildup_reports_regime() {
    let r = run_scenario("fig3f", &[], &RunContext::default()).unwrap();
    let d = &r.meta.derived;
    assert_eq!(d["strong_dephasing_regime"], serde_json::Value::Bool(true));
    let tau = d["tau_LZ_us"].as_f64().unwrap();
    assert!(tau > 0.1 && tau < 10.0, "{tau}");
    assert_eq!(r.filter("variant", "t1").unwrap().len(), 101);
    assert_eq!(r.columns().len(), 12);
}

#[test]
fn closed_form_map_contrast() {
    let r = run_scenario("figS7", &ov(&[("kind.p1.points", "3")]), &RunContext::default()).unwrap();
    let last = |variant: &str| {
        let rows = r.filter("variant", variant).unwrap();
        let row = rows
            .iter()
            .find(|row| row[1].as_f64() == Some(1.0) && row[2].as_f64() == Some(100.0))
            .unwrap();
        row[3].as_f64().unwrap()
    };
    // p1 = 1 is fully non-adiabatic on the narrow gap: no polarization either way
    assert!(last("t1").abs() < 1e-12 && last("no_t1").abs() < 1e-12);
}

#[test]
fn matching_curve_rows() {
    let r = run_scenario("fig4c", &ov(&[("kind.theta_deg.points", "5")]), &RunContext::default()).unwrap();
    let b = r.column_f64("B_m_mT").unwrap();
    assert_eq!(b.len(), 5);
    assert!((b[0] - 51.16).abs() < 0.05);
    assert!(b.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn cycle_coherence_rows() {
    let r = run_scenario(
        "figS2",
        &ov(&[("sweep.n_cycles", "4"), ("kind.l_values", "[1, 2]")]),
        &RunContext::default(),
    )
    .unwrap();
    assert_eq!(r.rows.len(), 2 * 2 * 4);
}
