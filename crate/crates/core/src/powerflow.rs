//! Three-phase unbalanced power flow on a radial feeder.
//!
//! The solver is a backward/forward sweep with full 3x3 coupled branch
//! impedance matrices: nodal currents are computed from the latest voltage
//! estimate, accumulated leaf-to-root, and voltages propagated root-to-leaf
//! through the coupled series drops. A damped fixed-point pass is retried
//! when the plain sweep fails to settle.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::netmodel::{BranchIdx, BusIdx, NetworkModel, OperatingLimits, ProfileSet};
use crate::phase::Phase;

#[derive(Debug, thiserror::Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (worst mismatch {mismatch:.3e} pu)")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("step {t}: {source}")]
    Step {
        t: usize,
        #[source]
        source: Box<PowerFlowError>,
    },
    #[error("injections contain a non-finite value at bus index {bus} phase {phase}")]
    NonFiniteInjection { bus: BusIdx, phase: Phase },
}

#[derive(Clone, Copy, Debug)]
pub struct PowerFlowConfig {
    /// Convergence tolerance on nodal complex-power mismatch, pu.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowConfig {
    fn default() -> Self {
        PowerFlowConfig {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Phasor solution of one time step.
#[derive(Clone, Debug)]
pub struct StepSolution {
    /// Voltage phasor per (bus, phase), per unit.
    pub v: Vec<[Complex64; 3]>,
    /// Branch current phasor per (branch, phase), oriented parent -> child.
    pub i_branch: Vec<[Complex64; 3]>,
    pub iterations: usize,
    pub mismatch: f64,
}

impl StepSolution {
    /// Sending-end apparent power of a branch phase, pu.
    pub fn s_from(&self, model: &NetworkModel, br: BranchIdx, ph: Phase) -> Complex64 {
        let branch = &model.branches()[br];
        self.v[branch.from][ph.index()] * self.i_branch[br][ph.index()].conj()
    }

    /// Receiving-end apparent power of a branch phase, pu.
    pub fn s_to(&self, model: &NetworkModel, br: BranchIdx, ph: Phase) -> Complex64 {
        let branch = &model.branches()[br];
        self.v[branch.to][ph.index()] * self.i_branch[br][ph.index()].conj()
    }

    /// Total series losses, pu (real part is resistive loss).
    pub fn losses(&self, model: &NetworkModel) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for br in 0..model.n_branches() {
            for ph in model.branches()[br].phases.iter() {
                total += self.s_from(model, br, ph) - self.s_to(model, br, ph);
            }
        }
        total
    }

    /// Complex power leaving the slack bus into the feeder, pu.
    pub fn slack_injection(&self, model: &NetworkModel) -> Complex64 {
        let slack = model.slack();
        let mut total = Complex64::new(0.0, 0.0);
        for &(_, br) in model.children(slack) {
            for ph in model.branches()[br].phases.iter() {
                total += self.s_from(model, br, ph);
            }
        }
        total
    }
}

fn slack_phasor(ph: Phase) -> Complex64 {
    Complex64::from_polar(1.0, ph.nominal_angle())
}

/// Solves one time step given consumption-positive complex injections, pu.
pub fn solve_timestep(
    model: &NetworkModel,
    injections: &[[Complex64; 3]],
    cfg: &PowerFlowConfig,
) -> Result<StepSolution, PowerFlowError> {
    for (b, inj) in injections.iter().enumerate() {
        for ph in Phase::ALL {
            let s = inj[ph.index()];
            if !s.re.is_finite() || !s.im.is_finite() {
                return Err(PowerFlowError::NonFiniteInjection { bus: b, phase: ph });
            }
        }
    }
    // Plain sweep first, then a damped retry for stressed cases.
    match sweep(model, injections, cfg, 1.0) {
        Ok(sol) => Ok(sol),
        Err(_) => sweep(model, injections, cfg, 0.5),
    }
}

fn sweep(
    model: &NetworkModel,
    injections: &[[Complex64; 3]],
    cfg: &PowerFlowConfig,
    relaxation: f64,
) -> Result<StepSolution, PowerFlowError> {
    let n = model.n_buses();
    let slack = model.slack();
    let mut v: Vec<[Complex64; 3]> = vec![
        [
            slack_phasor(Phase::A),
            slack_phasor(Phase::B),
            slack_phasor(Phase::C),
        ];
        n
    ];
    let mut i_draw = vec![[Complex64::new(0.0, 0.0); 3]; n];
    let mut i_branch = vec![[Complex64::new(0.0, 0.0); 3]; model.n_branches()];
    let order = model.bfs_order();
    let max_iter = if relaxation < 1.0 {
        cfg.max_iter * 3
    } else {
        cfg.max_iter
    };

    let mut worst = f64::INFINITY;
    for iter in 1..=max_iter {
        // Nodal currents from the present voltage estimate. Consumption-
        // positive power S drawn at a node pulls current I = conj(S/V).
        for b in 0..n {
            if b == slack {
                i_draw[b] = [Complex64::new(0.0, 0.0); 3];
                continue;
            }
            for ph in model.buses()[b].phases.iter() {
                let s = injections[b][ph.index()];
                let vb = v[b][ph.index()];
                i_draw[b][ph.index()] = if vb.norm() > 1e-12 {
                    (s / vb).conj()
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
        }

        // Backward: accumulate branch currents from the leaves up.
        for &b in order.iter().rev() {
            if let Some((_, pb)) = model.parent(b) {
                let mut acc = i_draw[b];
                for &(_, cb) in model.children(b) {
                    for k in 0..3 {
                        acc[k] += i_branch[cb][k];
                    }
                }
                i_branch[pb] = acc;
            }
        }

        // Forward: propagate coupled series drops from the root down.
        let mut max_dv: f64 = 0.0;
        for &b in order.iter() {
            if let Some((p, pb)) = model.parent(b) {
                let z = &model.branches()[pb].z_pu;
                let cur = &i_branch[pb];
                for ph in model.buses()[b].phases.iter() {
                    let r = ph.index();
                    let drop = z[r][0] * cur[0] + z[r][1] * cur[1] + z[r][2] * cur[2];
                    let target = v[p][r] - drop;
                    let next = if relaxation < 1.0 {
                        v[b][r] * (1.0 - relaxation) + target * relaxation
                    } else {
                        target
                    };
                    max_dv = max_dv.max((next - v[b][r]).norm());
                    v[b][r] = next;
                }
            }
        }

        // Mismatch: specified power vs. power implied by the currents the
        // sweep actually used, evaluated at the new voltages.
        worst = 0.0;
        for b in 0..n {
            if b == slack {
                continue;
            }
            for ph in model.buses()[b].phases.iter() {
                let k = ph.index();
                let s_real = v[b][k] * i_draw[b][k].conj();
                worst = worst.max((injections[b][k] - s_real).norm());
            }
        }
        if worst < cfg.tol && (relaxation >= 1.0 || max_dv < cfg.tol) {
            if relaxation < 1.0 {
                // Final undamped forward pass so Ohm's law holds exactly for
                // the reported (v, i_branch) pair.
                for &b in order.iter() {
                    if let Some((p, pb)) = model.parent(b) {
                        let z = &model.branches()[pb].z_pu;
                        let cur = &i_branch[pb];
                        for ph in model.buses()[b].phases.iter() {
                            let r = ph.index();
                            let drop = z[r][0] * cur[0] + z[r][1] * cur[1] + z[r][2] * cur[2];
                            v[b][r] = v[p][r] - drop;
                        }
                    }
                }
            }
            return Ok(StepSolution {
                v,
                i_branch,
                iterations: iter,
                mismatch: worst,
            });
        }
        if !worst.is_finite() {
            break;
        }
    }
    Err(PowerFlowError::NonConvergence {
        iterations: max_iter,
        mismatch: worst,
    })
}

/// Horizon of per-step solutions, dense over (phase, node/branch, time).
#[derive(Clone, Debug)]
pub struct GridState {
    t_len: usize,
    n_bus: usize,
    n_branch: usize,
    v_mag: Vec<f64>,
    v_ang: Vec<f64>,
    i_branch: Vec<Complex64>,
    /// Signed loading percent: flow-convention sign, |S|/s_max magnitude.
    loading_pct: Vec<f64>,
    pub converged: Vec<bool>,
    pub mismatch: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl GridState {
    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_buses(&self) -> usize {
        self.n_bus
    }

    pub fn n_branches(&self) -> usize {
        self.n_branch
    }

    #[inline]
    fn vi(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    #[inline]
    fn bi(&self, t: usize, br: BranchIdx, ph: Phase) -> usize {
        (t * self.n_branch + br) * 3 + ph.index()
    }

    pub fn v(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.v_mag[self.vi(t, bus, ph)]
    }

    pub fn angle(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.v_ang[self.vi(t, bus, ph)]
    }

    pub fn phasor(&self, t: usize, bus: BusIdx, ph: Phase) -> Complex64 {
        Complex64::from_polar(self.v(t, bus, ph), self.angle(t, bus, ph))
    }

    pub fn branch_current(&self, t: usize, br: BranchIdx, ph: Phase) -> Complex64 {
        self.i_branch[self.bi(t, br, ph)]
    }

    /// Signed loading percent of a branch phase.
    pub fn loading(&self, t: usize, br: BranchIdx, ph: Phase) -> f64 {
        self.loading_pct[self.bi(t, br, ph)]
    }

    pub fn from_steps(model: &NetworkModel, steps: &[StepSolution]) -> GridState {
        let t_len = steps.len();
        let n_bus = model.n_buses();
        let n_branch = model.n_branches();
        let mut state = GridState {
            t_len,
            n_bus,
            n_branch,
            v_mag: vec![0.0; t_len * n_bus * 3],
            v_ang: vec![0.0; t_len * n_bus * 3],
            i_branch: vec![Complex64::new(0.0, 0.0); t_len * n_branch * 3],
            loading_pct: vec![0.0; t_len * n_branch * 3],
            converged: vec![true; t_len],
            mismatch: vec![0.0; t_len],
            iterations: vec![0; t_len],
        };
        for (t, sol) in steps.iter().enumerate() {
            state.store_step(model, t, sol);
        }
        state
    }

    pub fn store_step(&mut self, model: &NetworkModel, t: usize, sol: &StepSolution) {
        for b in 0..self.n_bus {
            for ph in Phase::ALL {
                let i = self.vi(t, b, ph);
                let phasor = sol.v[b][ph.index()];
                self.v_mag[i] = phasor.norm();
                self.v_ang[i] = phasor.arg();
            }
        }
        for br in 0..self.n_branch {
            let branch = &model.branches()[br];
            for ph in Phase::ALL {
                let i = self.bi(t, br, ph);
                self.i_branch[i] = sol.i_branch[br][ph.index()];
                if branch.phases.contains(ph) {
                    let s = sol.s_from(model, br, ph).norm();
                    let pct = 100.0 * s / branch.s_max_pu;
                    let zeta = flow_sign(
                        sol.v[branch.from][ph.index()].norm(),
                        sol.v[branch.to][ph.index()].norm(),
                    );
                    self.loading_pct[i] = zeta as f64 * pct;
                }
            }
        }
        self.mismatch[t] = sol.mismatch;
        self.iterations[t] = sol.iterations;
        self.converged[t] = true;
    }
}

/// Flow convention: +1 when the sending-end voltage magnitude is at least
/// the receiving-end magnitude (power flowing leafward), -1 on reversal.
pub fn flow_sign(v_from: f64, v_to: f64) -> i8 {
    if v_from >= v_to {
        1
    } else {
        -1
    }
}

/// Solves every step of the horizon. Steps are independent and run in
/// parallel; failures carry the offending step index.
pub fn solve_horizon(
    model: &NetworkModel,
    profiles: &ProfileSet,
    cfg: &PowerFlowConfig,
) -> Result<GridState, PowerFlowError> {
    let steps: Vec<Result<StepSolution, PowerFlowError>> = (0..profiles.t_len())
        .into_par_iter()
        .map(|t| {
            let inj = model.injections_at(profiles, t);
            solve_timestep(model, &inj, cfg).map_err(|e| PowerFlowError::Step {
                t,
                source: Box::new(e),
            })
        })
        .collect();
    let mut out = Vec::with_capacity(steps.len());
    for s in steps {
        out.push(s?);
    }
    Ok(GridState::from_steps(model, &out))
}

/// Violation tallies over the horizon, in counts and as a share of all
/// (phase, node, time) instances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IncidentCount {
    pub count: u64,
    pub pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncidentReport {
    pub under_voltage: IncidentCount,
    pub below_soft: IncidentCount,
    pub over_voltage: IncidentCount,
    pub above_soft: IncidentCount,
    pub thermal_overload: IncidentCount,
    /// (phase, node) instances times horizon length.
    pub denominator: u64,
}

impl IncidentReport {
    pub fn hard_total(&self) -> u64 {
        self.under_voltage.count + self.over_voltage.count + self.thermal_overload.count
    }
}

/// Counts voltage-band and thermal violations of a solved horizon.
pub fn scan_incidents(
    state: &GridState,
    limits: &OperatingLimits,
    model: &NetworkModel,
) -> IncidentReport {
    let mut under = 0u64;
    let mut below = 0u64;
    let mut over = 0u64;
    let mut above = 0u64;
    let mut thermal = 0u64;
    let mut denom = 0u64;
    for t in 0..state.t_len() {
        for (b, bus) in model.buses().iter().enumerate() {
            for ph in bus.phases.iter() {
                denom += 1;
                let v = state.v(t, b, ph);
                if v < limits.v_min {
                    under += 1;
                }
                if v < limits.soft_low_edge() {
                    below += 1;
                }
                if v > limits.v_max {
                    over += 1;
                }
                if v > limits.soft_high_edge() {
                    above += 1;
                }
            }
        }
        for (br, branch) in model.branches().iter().enumerate() {
            for ph in branch.phases.iter() {
                if state.loading(t, br, ph).abs() > 100.0 {
                    thermal += 1;
                }
            }
        }
    }
    let pct = |c: u64| {
        if denom == 0 {
            0.0
        } else {
            100.0 * c as f64 / denom as f64
        }
    };
    IncidentReport {
        under_voltage: IncidentCount {
            count: under,
            pct: pct(under),
        },
        below_soft: IncidentCount {
            count: below,
            pct: pct(below),
        },
        over_voltage: IncidentCount {
            count: over,
            pct: pct(over),
        },
        above_soft: IncidentCount {
            count: above,
            pct: pct(above),
        },
        thermal_overload: IncidentCount {
            count: thermal,
            pct: pct(thermal),
        },
        denominator: denom,
    }
}

/// Active-power balance residual of one solved step:
/// |slack import - net consumption - losses|, pu.
pub fn power_balance_residual(
    model: &NetworkModel,
    injections: &[[Complex64; 3]],
    sol: &StepSolution,
) -> f64 {
    let slack_p = sol.slack_injection(model).re;
    let losses_p = sol.losses(model).re;
    let net_load: f64 = injections
        .iter()
        .enumerate()
        .filter(|(b, _)| *b != model.slack())
        .map(|(_, s)| s[0].re + s[1].re + s[2].re)
        .sum();
    (slack_p - net_load - losses_p).abs()
}
