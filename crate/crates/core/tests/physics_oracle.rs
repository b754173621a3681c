//! Physics layer against frozen arbitrary-precision evaluations
//! (generator: tests/oracles/physics_oracle.py).

use std::collections::BTreeMap;

use fedcrowd::environment::{distance_to_mcsp, mean_gain};
use fedcrowd::model::*;
use serde::Deserialize;

const TOLERANCE: f64 = 1e-12;

#[derive(Deserialize)]
struct Case {
    #[serde(rename = "in")]
    input: Vec<f64>,
    out: Vec<f64>,
}

fn fixture() -> BTreeMap<String, Vec<Case>> {
    let text = include_str!("fixtures/physics_oracle.json");
    serde_json::from_str(text).expect("fixture parses")
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Evaluates one operation; returns its outputs in fixture order.
fn evaluate(op: &str, x: &[f64]) -> Vec<f64> {
    match op {
        "difficulty" => {
            let params = ScenarioParams {
                step_duration: x[3],
                size_weight: x[4],
                deadline_weight: x[5],
                ..Default::default()
            };
            vec![compute_difficulty(x[0], x[1], &params, x[2]).unwrap()]
        }
        "budget" => vec![compute_budget(x[0], x[1])],
        "transmission_time" => vec![transmission_time(x[0], x[1], x[2], x[3], x[4]).unwrap()],
        "computing_time" => vec![computing_time(x[0], x[1], x[2]).unwrap()],
        "compute_energy" => vec![compute_energy(x[0], x[1], x[2], x[3])],
        "total_effort" => {
            let params = ScenarioParams {
                bandwidth: x[6],
                noise_power: x[7],
                proposal_bits: x[8],
                ..Default::default()
            };
            let task = TaskSpec {
                index: 0,
                step: 0,
                result_size: x[0],
                raw_size: x[1],
                deadline: 10.0,
                roi: Region::WholeArea,
                task_type: 0,
                complexity: x[2],
                difficulty: 1.0,
                budget: 10.0,
            };
            let profile = MuProfile {
                index: 0,
                battery_capacity: 8.0,
                mean_sensing_time: x[10],
                mean_sensing_power: x[11],
                max_transmit_power: 0.2,
                max_compute_rate: 4e8,
                compute_energy_coeff: x[9],
            };
            let choice = ResourceChoice {
                compute_rate: x[3],
                transmit_power: x[4],
            };
            let sensing = SensingDraw {
                time: x[10],
                power: x[11],
            };
            let e = total_effort(&task, &profile, &choice, x[5], sensing, &params).unwrap();
            vec![
                e.e_proposal,
                e.e_sense,
                e.e_compute,
                e.e_transmit,
                e.t_sense,
                e.t_compute,
                e.t_transmit,
                payment_request(&e, x[12]),
            ]
        }
        "battery_update" => vec![battery_update(x[0], x[1], x[2], x[3]).unwrap()],
        "mean_gain" => {
            let params = ScenarioParams {
                pathloss_exponent: x[1],
                ..Default::default()
            };
            vec![mean_gain(x[0], &params)]
        }
        "distance_to_mcsp" => {
            let params = ScenarioParams {
                area_side_m: x[2],
                min_distance_m: x[3],
                max_distance_m: x[4],
                ..Default::default()
            };
            vec![distance_to_mcsp((x[0], x[1]), &params)]
        }
        other => panic!("fixture names unknown operation {other}"),
    }
}

/// Worst relative error over every fixture case, or the first case that
/// exceeds the tolerance.
pub fn check_fixture() -> Result<f64, String> {
    let fixture = fixture();
    if fixture.len() != 9 {
        return Err(format!(
            "fixture has {} operations, expected 9",
            fixture.len()
        ));
    }
    let mut worst = 0.0f64;
    for (op, cases) in &fixture {
        if cases.len() != 1000 {
            return Err(format!("{op}: {} cases", cases.len()));
        }
        for (i, case) in cases.iter().enumerate() {
            let got = evaluate(op, &case.input);
            if got.len() != case.out.len() {
                return Err(format!(
                    "{op} case {i}: {} outputs, want {}",
                    got.len(),
                    case.out.len()
                ));
            }
            for (g, w) in got.iter().zip(&case.out) {
                let e = rel_err(*g, *w);
                if e > TOLERANCE {
                    return Err(format!(
                        "{op} case {i}: got {g:e}, want {w:e} (rel err {e:e})"
                    ));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

#[test]
fn every_operation_matches_high_precision_evaluation() {
    let worst = check_fixture().unwrap();
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn table_midpoint_golden_record() {
    // Midpoints of the scenario ranges, evaluated by the same oracle.
    let x = [
        4.5e6, 5.85e6, 250.0, 3e8, 0.1, 1e-9, 1e6, 1e-16, 1000.0, 1e-26, 0.5, 0.1, 5.0,
    ];
    let got = evaluate("total_effort", &x);
    let want = [
        5.017166231245267e-6,
        0.05,
        1.3162500000000001,
        0.022577248040603702,
        0.5,
        4.875,
        0.225772480406037,
        6.944161326034175,
    ];
    for (g, w) in got.iter().zip(want) {
        assert!(rel_err(*g, w) <= TOLERANCE, "got {g:e}, want {w:e}");
    }
}
