use std::collections::BTreeMap;

use proptest::prelude::*;
use vertisim_core::cellsim::{run_sweep, Axis, CellConditions, GridAxis, MacConfig, Placement, SweepGrid};
use vertisim_core::channel::{
    CiModelParams, ChannelConfig, ExtraLossConfig, LosModel, PathLossModel, RadioConfig, PENETRATION_TINTED_GLASS_DB,
};
use vertisim_core::distfit::{fit_dataset, Family, FitPlan, Kpi};
use vertisim_core::orchestrator::PacketLogRecord;
use vertisim_core::surrogate::{RegressorKind, SurrogateSet};
use vertisim_core::traffic::{Regime, TrafficProfile};
use vertisim_core::validate::*;

/// Indoor sensors at the cell edge: low SNR, light load, one packet per device.
fn edge_cell() -> CellConditions {
    let channel = ChannelConfig {
        los: LosModel::Fixed { p_los: 1.0 },
        rice_k_db: 20.0,
        los_path_loss: PathLossModel::Ci(CiModelParams::anchored(28e9, 1.0, 2.1, 3.0).unwrap()),
        extra: ExtraLossConfig { penetration_loss: PENETRATION_TINTED_GLASS_DB, ..Default::default() },
        ..Default::default()
    };
    CellConditions {
        device_counts: BTreeMap::from([("sensor".to_string(), 100)]),
        profiles: vec![TrafficProfile::new("sensor", 1.0, 120, Regime::PeriodicAsync)],
        cell_radius_m: 230.0,
        radio: RadioConfig { tx_power_dbm: 3.0, ..Default::default() },
        channel,
        mac: MacConfig {
            placement: Placement::FixedDistance { distance_m: 230.0 },
            outage_threshold_db: -30.0,
            ..Default::default()
        },
    }
}

fn trained(grid: &SweepGrid) -> SurrogateSet {
    let ds = run_sweep(grid, 1.0, None).unwrap();
    let plan = FitPlan {
        delay: vec![Family::LogNormal, Family::Gamma],
        throughput: vec![Family::LogNormal, Family::Gamma],
        ..FitPlan::default()
    };
    let (table, skipped) = fit_dataset(&ds, &plan).unwrap();
    assert!(skipped.is_empty());
    SurrogateSet::train_all(&table, RegressorKind::MultilinearInterp).unwrap()
}

fn grid() -> SweepGrid {
    SweepGrid {
        base: edge_cell(),
        axes: vec![GridAxis { axis: Axis::TxPower, values: vec![0.0, 3.0, 6.0] }],
        replications: 100,
        seed_base: 1,
    }
}

fn reference() -> ReferenceRun {
    ReferenceRun { duration_s: 1.0, replications: 100, seed: 77 }
}

#[test]
fn self_consistency_at_a_training_point() {
    let models = trained(&grid());
    let cases = vec![ValidationCase { name: "knot".into(), conditions: edge_cell(), external: None }];
    let rep = cross_validate(&cases, &models, &reference(), 10_000, Tolerances::default());
    assert_eq!(rep.entries.len(), 3);
    for e in &rep.entries {
        assert!(e.ks_distance.unwrap() < 0.03, "{e:?}");
        assert!(e.reference_samples >= 10_000);
    }
    assert!(rep.global_pass);
}

#[test]
fn wrong_surrogate_fails() {
    let mut models = trained(&grid());
    for m in &mut models.models {
        if m.kpi == Kpi::Delay {
            let mut table = m.regressors[0].regressor.clone();
            if let vertisim_core::surrogate::Regressor::Multilinear { values, .. } = &mut table {
                values.iter_mut().for_each(|v| *v *= 2.0);
            }
            m.regressors[0].regressor = table;
        }
    }
    let cases = vec![ValidationCase { name: "knot".into(), conditions: edge_cell(), external: None }];
    let rep = cross_validate(&cases, &models, &reference(), 10_000, Tolerances::default());
    assert!(!rep.global_pass);
    let d = rep.entries.iter().find(|e| e.kpi == Kpi::Delay).unwrap();
    assert!(!d.pass);
}

#[test]
fn empty_batch_passes_vacuously() {
    let rep = cross_validate(&[], &trained(&grid()), &reference(), 100, Tolerances::default());
    assert!(rep.entries.is_empty());
    assert!(rep.global_pass);
}

#[test]
fn failing_case_does_not_abort_batch() {
    let models = trained(&grid());
    let mut broken = edge_cell();
    broken.cell_radius_m = 0.0;
    let cases = vec![
        ValidationCase { name: "broken".into(), conditions: broken, external: None },
        ValidationCase { name: "ok".into(), conditions: edge_cell(), external: None },
    ];
    let rep = cross_validate(&cases, &models, &reference(), 10_000, Tolerances::default());
    assert_eq!(rep.entries.len(), 6);
    assert!(rep.entries[..3].iter().all(|e| !e.pass && e.error.is_some()));
    assert!(rep.entries[3..].iter().all(|e| e.pass));
    assert!(!rep.global_pass);
    let back = ValidationReport::from_json(&rep.to_json().unwrap()).unwrap();
    assert_eq!(back, rep);
    assert_eq!(rep.to_csv().lines().count(), 7);
}

#[test]
fn external_reference_replaces_simulation() {
    let models = trained(&grid());
    // a measured trace whose every packet was lost
    let log: Vec<PacketLogRecord> = (0..500)
        .map(|i| PacketLogRecord {
            cell_id: 1,
            entity_id: format!("m{i}"),
            profile: "sensor".into(),
            timestamp_s: i as f64,
            delay_ms: None,
            dropped: true,
            throughput_bps: 0.0,
        })
        .collect();
    let cases = vec![ValidationCase { name: "field".into(), conditions: edge_cell(), external: Some(log) }];
    let rep = cross_validate(&cases, &models, &reference(), 1000, Tolerances::default());
    let drop = rep.entries.iter().find(|e| e.kpi == Kpi::DropProbability).unwrap();
    assert_eq!(drop.reference_samples, 500);
    assert!(!drop.pass);
    // no delivered packets to compare delays with
    let delay = rep.entries.iter().find(|e| e.kpi == Kpi::Delay).unwrap();
    assert!(delay.error.is_some() && !delay.pass);
}

proptest! {
    #[test]
    fn sample_against_itself_is_identical(v in prop::collection::vec(0.1..100.0f64, 1..300)) {
        let e = compare_samples("c", Kpi::Delay, Family::LogNormal, &v, &v, Tolerances::default());
        prop_assert_eq!(e.ks_distance, Some(0.0));
        prop_assert_eq!(e.mean_error, Some(0.0));
        prop_assert!(e.pass);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(a in prop::collection::vec(0.0..10.0f64, 1..200), b in prop::collection::vec(0.0..10.0f64, 1..200)) {
        let fam = Family::Gamma;
        let x = compare_samples("c", Kpi::Throughput, fam, &a, &b, Tolerances::default());
        let y = compare_samples("c", Kpi::Throughput, fam, &b, &a, Tolerances::default());
        prop_assert_eq!(x.ks_distance, y.ks_distance);
        let d = x.ks_distance.unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn report_round_trips(ks in prop::collection::vec(prop::option::of(0.0..1.0f64), 0..20), tol in 0.001..0.5f64) {
        let entries = ks
            .iter()
            .enumerate()
            .map(|(i, &d)| ValidationEntry {
                case: format!("p{i}"),
                kpi: Kpi::ALL[i % 3],
                ks_distance: d,
                mean_error: d.map(|x| x / 3.0),
                reference_samples: i,
                surrogate_samples: 2 * i,
                pass: d.is_some_and(|x| x < tol),
                error: d.is_none().then(|| "no samples".to_string()),
            })
            .collect();
        let rep = ValidationReport::new(entries, Tolerances { ks: tol, mean: tol });
        prop_assert_eq!(rep.global_pass, rep.entries.iter().all(|e| e.pass));
        prop_assert_eq!(ValidationReport::from_json(&rep.to_json().unwrap()).unwrap(), rep);
    }
}
