//! Sequence-component unbalance metrics and imbalance-gain tuning.
//!
//! The voltage unbalance factor is the true definition: the ratio of the
//! negative- to positive-sequence voltage magnitude from the complex
//! phasors. The gain sweep re-runs the whole dispatch per candidate gain
//! and a reproducible knee rule picks the smallest gain capturing most of
//! the attainable reduction.

use num_complex::Complex64;

use crate::activation::{solve_horizon, ActivationOutcome, DispatchInputs};
use crate::netmodel::NetworkModel;
use crate::phase::Phase;
use crate::powerflow::GridState;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("gain grid must be non-empty and strictly ascending")]
    BadGrid,
    #[error("knee selection needs at least 3 sweep points, got {0}")]
    TooFewPoints(usize),
    #[error("knee selection needs at least 3 successful sweep points, got {0}")]
    TooFewSuccessful(usize),
}

/// Voltage unbalance factor per (node, time), percent.
#[derive(Clone, Debug)]
pub struct VufSeries {
    t_len: usize,
    n_bus: usize,
    /// NaN where a node lacks three phases; INFINITY where degenerate.
    vuf: Vec<f64>,
    /// Positive-sequence magnitude collapsed (excluded from aggregates).
    pub degenerate: Vec<bool>,
    /// Network-wide max per step.
    pub per_step_max: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

impl VufSeries {
    pub fn vuf(&self, t: usize, bus: usize) -> f64 {
        self.vuf[t * self.n_bus + bus]
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }
}

/// Fortescue decomposition of one phasor triple (zero, positive, negative).
pub fn sequence_components(v: [Complex64; 3]) -> [Complex64; 3] {
    let a = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0);
    let a2 = a * a;
    let third = 1.0 / 3.0;
    [
        (v[0] + v[1] + v[2]) * third,
        (v[0] + a * v[1] + a2 * v[2]) * third,
        (v[0] + a2 * v[1] + a * v[2]) * third,
    ]
}

/// VUF of one phasor triple, percent; None when the positive sequence is
/// degenerate.
pub fn vuf_of(v: [Complex64; 3]) -> Option<f64> {
    let [_, pos, neg] = sequence_components(v);
    if pos.norm() < 1e-9 {
        None
    } else {
        Some(100.0 * neg.norm() / pos.norm())
    }
}

/// Computes the VUF series of a solved horizon over all three-phase nodes.
pub fn compute_vuf(model: &NetworkModel, state: &GridState) -> VufSeries {
    let t_len = state.t_len();
    let n_bus = model.n_buses();
    let mut series = VufSeries {
        t_len,
        n_bus,
        vuf: vec![f64::NAN; t_len * n_bus],
        degenerate: vec![false; t_len * n_bus],
        per_step_max: vec![0.0; t_len],
        mean: 0.0,
        max: 0.0,
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        let mut step_max = 0.0f64;
        for (b, bus) in model.buses().iter().enumerate() {
            if !bus.phases.is_full() {
                continue;
            }
            let v = [
                state.phasor(t, b, Phase::A),
                state.phasor(t, b, Phase::B),
                state.phasor(t, b, Phase::C),
            ];
            match vuf_of(v) {
                Some(vuf) => {
                    series.vuf[t * n_bus + b] = vuf;
                    sum += vuf;
                    count += 1;
                    step_max = step_max.max(vuf);
                }
                None => {
                    series.vuf[t * n_bus + b] = f64::INFINITY;
                    series.degenerate[t * n_bus + b] = true;
                }
            }
        }
        series.per_step_max[t] = step_max;
    }
    if count > 0 {
        series.mean = sum / count as f64;
        series.max = series
            .vuf
            .iter()
            .zip(&series.degenerate)
            .filter(|(v, d)| !**d && v.is_finite())
            .fold(0.0f64, |m, (v, _)| m.max(*v));
    }
    series
}

/// One point of the imbalance-gain sweep.
#[derive(Clone, Debug)]
pub struct ParetoPoint {
    pub gv: f64,
    pub objective: f64,
    pub mean_vuf: f64,
    pub max_vuf: f64,
    pub hard_incidents: u64,
    /// Dispatch failure for this gain, when any; the sweep continues.
    pub error: Option<String>,
}

/// Runs a full dispatch per gain value. The grid must be strictly
/// ascending; failed points are recorded and skipped by the knee rule.
pub fn pareto_sweep(
    inputs: &DispatchInputs<'_>,
    grid: &[f64],
) -> Result<Vec<ParetoPoint>, MetricsError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::BadGrid);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &gv in grid {
        let mut cfg = inputs.cfg;
        cfg.gv = gv;
        let point_inputs = DispatchInputs { cfg, ..*inputs };
        match solve_horizon(&point_inputs) {
            Ok(outcome) => points.push(point_from_outcome(inputs, gv, &outcome)),
            Err(e) => points.push(ParetoPoint {
                gv,
                objective: f64::NAN,
                mean_vuf: f64::NAN,
                max_vuf: f64::NAN,
                hard_incidents: u64::MAX,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(points)
}

fn point_from_outcome(
    inputs: &DispatchInputs<'_>,
    gv: f64,
    outcome: &ActivationOutcome,
) -> ParetoPoint {
    let vuf = compute_vuf(inputs.model, &outcome.state);
    let report = crate::powerflow::scan_incidents(&outcome.state, inputs.limits, inputs.model);
    ParetoPoint {
        gv,
        objective: outcome.total_objective,
        mean_vuf: vuf.mean,
        max_vuf: vuf.max,
        hard_incidents: report.hard_total(),
        error: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KneeStatus {
    Ok,
    /// No point reduced the mean VUF; the smallest gain is returned.
    FlatSweep,
    /// Reduction still improving at the largest grid point.
    KneeNotReached,
}

/// Smallest gain achieving at least `threshold` (e.g. 0.8) of the best
/// observed mean-VUF reduction relative to the first successful point.
pub fn select_knee(points: &[ParetoPoint], threshold: f64) -> Result<(f64, KneeStatus), MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints(points.len()));
    }
    let ok: Vec<&ParetoPoint> = points.iter().filter(|p| p.error.is_none()).collect();
    if ok.len() < 3 {
        return Err(MetricsError::TooFewSuccessful(ok.len()));
    }
    let baseline = ok[0].mean_vuf;
    let max_reduction = ok
        .iter()
        .map(|p| baseline - p.mean_vuf)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_reduction <= 1e-12 {
        return Ok((ok[0].gv, KneeStatus::FlatSweep));
    }
    let cut = threshold * max_reduction;
    let chosen = ok
        .iter()
        .find(|p| baseline - p.mean_vuf >= cut)
        .expect("max reduction point always qualifies");
    let status = if chosen.gv == ok.last().unwrap().gv {
        KneeStatus::KneeNotReached
    } else {
        KneeStatus::Ok
    };
    Ok((chosen.gv, status))
}
