//! Flexibility activation engine for three-phase unbalanced low-voltage feeders.
//!
//! The pipeline: load a feeder model and device profiles ([`netmodel`]), solve
//! the unbalanced power flow over the horizon ([`powerflow`]), estimate nodal
//! voltage and loading sensitivities by perturb-and-observe ([`sensitivity`]),
//! synthesize droop-based flexibility activation signals ([`fas`]), dispatch
//! flexible and curtailable resources with a successive-linear-programming
//! optimizer ([`activation`]), and evaluate unbalance metrics and gain tuning
//! sweeps ([`metrics`]).

pub mod activation;
pub mod fas;
pub mod lp;
pub mod metrics;
pub mod netmodel;
pub mod phase;
pub mod powerflow;
pub mod sensitivity;

pub use num_complex::Complex64;
pub use phase::Phase;

#[cfg(test)]
pub(crate) mod testnet {
    use crate::netmodel::NetworkModel;

    /// Radial chain 0 -> 1 -> ... -> n-1, all phases, coupled impedances,
    /// one single-phase device per (bus, phase) in `devices`.
    pub fn chain(n: usize, devices: &[(u32, char)]) -> NetworkModel {
        let buses: Vec<String> = (0..n)
            .map(|i| {
                format!(
                    r#"{{"id": {i}, "phases": "ABC", "slack": {}, "v_base_v": 1000.0}}"#,
                    i == 0
                )
            })
            .collect();
        let branches: Vec<String> = (1..n)
            .map(|i| {
                format!(
                    r#"{{"from": {}, "to": {i},
  "r_ohm": [[0.02,0.004,0.004],[0.004,0.02,0.004],[0.004,0.004,0.02]],
  "x_ohm": [[0.006,0.002,0.002],[0.002,0.006,0.002],[0.002,0.002,0.006]],
  "ampacity_a": 500.0, "s_max_kva": 50.0}}"#,
                    i - 1
                )
            })
            .collect();
        let devs: Vec<String> = devices
            .iter()
            .enumerate()
            .map(|(k, (bus, ph))| {
                format!(
                    r#"{{"id": "d{k}", "bus": {bus}, "phase": "{ph}", "kind": "load", "pv_kwp": 0.0}}"#
                )
            })
            .collect();
        let json = format!(
            r#"{{"buses": [{}], "branches": [{}], "devices": [{}]}}"#,
            buses.join(","),
            branches.join(","),
            devs.join(",")
        );
        NetworkModel::from_json_str(&json, 1000.0).unwrap()
    }

    /// Two electrically identical laterals hanging off bus 1, devices on
    /// phase A of both lateral ends (buses 2 and 3).
    pub fn symmetric_y() -> NetworkModel {
        let json = r#"{
  "buses": [
    {"id": 0, "phases": "ABC", "slack": true, "v_base_v": 1000.0},
    {"id": 1, "phases": "ABC", "v_base_v": 1000.0},
    {"id": 2, "phases": "ABC", "v_base_v": 1000.0},
    {"id": 3, "phases": "ABC", "v_base_v": 1000.0}
  ],
  "branches": [
    {"from": 0, "to": 1,
     "r_ohm": [[0.02,0.004,0.004],[0.004,0.02,0.004],[0.004,0.004,0.02]],
     "x_ohm": [[0.006,0.002,0.002],[0.002,0.006,0.002],[0.002,0.002,0.006]],
     "ampacity_a": 500.0, "s_max_kva": 50.0},
    {"from": 1, "to": 2,
     "r_ohm": [[0.03,0.005,0.005],[0.005,0.03,0.005],[0.005,0.005,0.03]],
     "x_ohm": [[0.009,0.003,0.003],[0.003,0.009,0.003],[0.003,0.003,0.009]],
     "ampacity_a": 300.0, "s_max_kva": 30.0},
    {"from": 1, "to": 3,
     "r_ohm": [[0.03,0.005,0.005],[0.005,0.03,0.005],[0.005,0.005,0.03]],
     "x_ohm": [[0.009,0.003,0.003],[0.003,0.009,0.003],[0.003,0.003,0.009]],
     "ampacity_a": 300.0, "s_max_kva": 30.0}
  ],
  "devices": [
    {"id": "da", "bus": 2, "phase": "A", "kind": "load", "pv_kwp": 0.0},
    {"id": "db", "bus": 3, "phase": "A", "kind": "load", "pv_kwp": 0.0}
  ]
}"#;
        NetworkModel::from_json_str(json, 1000.0).unwrap()
    }
}
