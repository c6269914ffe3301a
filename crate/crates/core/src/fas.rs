//! Flexibility activation signals: nodal projection of branch quantities,
//! voltage/current imbalance indicators, droop-shaped voltage and thermal
//! components bounded by sensitivity-derived saturation levels, and their
//! combination into the per-channel activation signal field.
//!
//! Channel conventions follow the droop orientation throughout: the `p_up`
//! channel prices ramp-down flexibility (net load reduction, `dP+ >= 0`) and
//! is non-negative for the voltage component; `p_dn` prices ramp-up
//! flexibility (`dP- <= 0`) and is non-positive for the voltage component.
//! Reactive channels mirror the active design with capacitive injection
//! incentivized under low voltage.

use crate::netmodel::{BusIdx, NetworkModel, OperatingLimits};
use crate::phase::Phase;
use crate::powerflow::GridState;
use crate::sensitivity::SensitivityTable;

#[derive(Debug, thiserror::Error)]
pub enum FasError {
    #[error("all active-power sensitivities are zero; saturation levels undefined")]
    AllZeroSensitivity,
    #[error("nodal projection over branches with zero total rating")]
    ZeroRating,
    #[error("nodal projection requires at least one incident branch")]
    NoBranches,
    #[error("component fields disagree in shape: {0}")]
    IndexMismatch(&'static str),
}

/// Gains and switches for signal synthesis.
#[derive(Clone, Copy, Debug)]
pub struct FasConfig {
    /// Scale of the voltage-component saturation levels.
    pub kappa_v: f64,
    /// Scale of the thermal-component saturation levels.
    pub kappa_t: f64,
    /// Use the rating-weighted current projection instead of the plain
    /// signed sum.
    pub weighted_current: bool,
    /// Flip the current-imbalance terms so each channel keeps its canonical
    /// sign instead of the literal cross-channel placement.
    pub imb_sign_normalized: bool,
    /// Mean projected current below which current imbalance is degenerate.
    pub i_mean_eps: f64,
}

impl Default for FasConfig {
    fn default() -> Self {
        FasConfig {
            kappa_v: 1.0,
            kappa_t: 1.0,
            weighted_current: false,
            imb_sign_normalized: false,
            i_mean_eps: 1e-6,
        }
    }
}

/// Flow convention indicator: +1 when power flows from the substation side
/// toward the feeder end (sending magnitude >= receiving magnitude), -1 on
/// reversal. Equal magnitudes count as forward.
pub fn flow_direction(v_from: f64, v_to: f64) -> i8 {
    if v_from >= v_to {
        1
    } else {
        -1
    }
}

/// Rating-weighted signed average of branch loadings at a node, percent.
/// Entries are (loading percent magnitude, flow indicator, rating).
pub fn project_loading(branches: &[(f64, i8, f64)]) -> Result<f64, FasError> {
    if branches.is_empty() {
        return Err(FasError::NoBranches);
    }
    let total: f64 = branches.iter().map(|(_, _, r)| r).sum();
    if total <= 0.0 {
        return Err(FasError::ZeroRating);
    }
    let weighted: f64 = branches.iter().map(|(l, z, r)| l * (*z as f64) * r).sum();
    Ok(weighted / total)
}

/// Signed sum of branch current magnitudes at a node, per unit.
pub fn project_current(branches: &[(f64, i8)]) -> f64 {
    branches.iter().map(|(i, z)| i * (*z as f64)).sum()
}

/// Rating-weighted variant of the current projection.
pub fn project_current_weighted(branches: &[(f64, i8, f64)]) -> Result<f64, FasError> {
    if branches.is_empty() {
        return Err(FasError::NoBranches);
    }
    let total: f64 = branches.iter().map(|(_, _, r)| r).sum();
    if total <= 0.0 {
        return Err(FasError::ZeroRating);
    }
    Ok(branches
        .iter()
        .map(|(i, z, r)| i * (*z as f64) * r)
        .sum::<f64>()
        / total)
}

/// Branch quantities projected onto nodes for every (phase, node, time).
#[derive(Clone, Debug)]
pub struct NodalProjection {
    n_bus: usize,
    n_branch: usize,
    /// Signed percent loading projected per (phase, node, time).
    t_proj: Vec<f64>,
    /// Signed per-unit current projected per (phase, node, time).
    i_proj: Vec<f64>,
    /// Flow indicator per (phase, branch, time).
    zeta: Vec<i8>,
}

impl NodalProjection {
    #[inline]
    fn ni(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    pub fn loading(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.t_proj[self.ni(t, bus, ph)]
    }

    pub fn current(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.i_proj[self.ni(t, bus, ph)]
    }

    pub fn zeta(&self, t: usize, br: usize, ph: Phase) -> i8 {
        self.zeta[(t * self.n_branch + br) * 3 + ph.index()]
    }
}

/// Projects signed branch loadings and currents onto nodes (flow-convention
/// weighted averages / sums over all incident branches).
pub fn compute_projections(
    model: &NetworkModel,
    state: &GridState,
    weighted_current: bool,
) -> NodalProjection {
    let t_len = state.t_len();
    let n_bus = model.n_buses();
    let n_branch = model.n_branches();
    let mut proj = NodalProjection {
        n_bus,
        n_branch,
        t_proj: vec![0.0; t_len * n_bus * 3],
        i_proj: vec![0.0; t_len * n_bus * 3],
        zeta: vec![1; t_len * n_branch * 3],
    };
    for t in 0..t_len {
        for (br, branch) in model.branches().iter().enumerate() {
            for ph in branch.phases.iter() {
                let z = flow_direction(state.v(t, branch.from, ph), state.v(t, branch.to, ph));
                proj.zeta[(t * n_branch + br) * 3 + ph.index()] = z;
            }
        }
        for b in 0..n_bus {
            for ph in model.buses()[b].phases.iter() {
                let mut loadings: Vec<(f64, i8, f64)> = Vec::new();
                let mut currents: Vec<(f64, i8)> = Vec::new();
                let mut currents_w: Vec<(f64, i8, f64)> = Vec::new();
                for &br in model.incident_branches(b) {
                    let branch = &model.branches()[br];
                    if !branch.phases.contains(ph) {
                        continue;
                    }
                    let z = proj.zeta[(t * n_branch + br) * 3 + ph.index()];
                    let pct = state.loading(t, br, ph).abs();
                    let amps = state.branch_current(t, br, ph).norm();
                    loadings.push((pct, z, branch.s_max_pu));
                    currents.push((amps, z));
                    currents_w.push((amps, z, branch.s_max_pu));
                }
                if loadings.is_empty() {
                    continue;
                }
                let i = proj.ni(t, b, ph);
                proj.t_proj[i] = project_loading(&loadings).unwrap_or(0.0);
                proj.i_proj[i] = if weighted_current {
                    project_current_weighted(&currents_w).unwrap_or(0.0)
                } else {
                    project_current(&currents)
                };
            }
        }
    }
    proj
}

/// Normalized voltage/current imbalance per (phase, node, time).
#[derive(Clone, Debug)]
pub struct ImbalanceField {
    n_bus: usize,
    u_v: Vec<f64>,
    u_i: Vec<f64>,
    pvur: Vec<f64>,
    npcur: Vec<f64>,
    /// Mean projected current too small to normalize, per (node, time).
    pub degenerate_i: Vec<bool>,
    /// Bus carries all three phases.
    pub three_phase: Vec<bool>,
}

impl ImbalanceField {
    #[inline]
    fn ni(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    pub fn u_v(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.u_v[self.ni(t, bus, ph)]
    }

    pub fn u_i(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.u_i[self.ni(t, bus, ph)]
    }

    pub fn pvur(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.pvur[self.ni(t, bus, ph)]
    }

    pub fn npcur(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.npcur[self.ni(t, bus, ph)]
    }
}

/// Phase voltage/current unbalance rates and the derived normalized
/// imbalances, per (phase, node, time). Defined only where a node carries
/// all three phases; the normalized imbalances of a node sum to zero.
pub fn imbalance_metrics(
    model: &NetworkModel,
    state: &GridState,
    proj: &NodalProjection,
    cfg: &FasConfig,
) -> ImbalanceField {
    let t_len = state.t_len();
    let n_bus = model.n_buses();
    let n = t_len * n_bus * 3;
    let mut field = ImbalanceField {
        n_bus,
        u_v: vec![0.0; n],
        u_i: vec![0.0; n],
        pvur: vec![0.0; n],
        npcur: vec![0.0; n],
        degenerate_i: vec![false; t_len * n_bus],
        three_phase: model.buses().iter().map(|b| b.phases.is_full()).collect(),
    };
    for t in 0..t_len {
        for b in 0..n_bus {
            if !field.three_phase[b] {
                continue;
            }
            let vs = [
                state.v(t, b, Phase::A),
                state.v(t, b, Phase::B),
                state.v(t, b, Phase::C),
            ];
            let v_mean = (vs[0] + vs[1] + vs[2]) / 3.0;
            let is = [
                proj.current(t, b, Phase::A),
                proj.current(t, b, Phase::B),
                proj.current(t, b, Phase::C),
            ];
            let i_mean = (is[0] + is[1] + is[2]) / 3.0;
            let i_degenerate = i_mean.abs() < cfg.i_mean_eps;
            if i_degenerate {
                field.degenerate_i[t * n_bus + b] = true;
            }
            // Imbalances below numeric noise are not signals; snap them to
            // an exact zero so downstream indicator gating stays clean.
            let snap = |u: f64| if u.abs() < 1e-12 { 0.0 } else { u };
            for ph in Phase::ALL {
                let k = field.ni(t, b, ph);
                if v_mean.abs() > 1e-9 {
                    let pvur = vs[ph.index()] / v_mean;
                    field.pvur[k] = pvur;
                    field.u_v[k] = snap(1.0 - pvur);
                }
                if !i_degenerate {
                    let npcur = is[ph.index()] / i_mean;
                    field.npcur[k] = npcur;
                    field.u_i[k] = snap(1.0 - npcur);
                }
            }
        }
    }
    field
}

/// Saturation levels of the droop components per (phase, node), scaled
/// linearly with the magnitude of the node's own sensitivity relative to
/// the network maximum. Zero where no device attaches.
#[derive(Clone, Debug)]
pub struct SaturationLevels {
    pub(crate) vc_p: Vec<f64>,
    pub(crate) tc_p: Vec<f64>,
    pub(crate) vc_q: Vec<f64>,
    pub(crate) tc_q: Vec<f64>,
}

impl SaturationLevels {
    #[inline]
    fn ni(&self, bus: BusIdx, ph: Phase) -> usize {
        bus * 3 + ph.index()
    }

    pub fn vc_p(&self, bus: BusIdx, ph: Phase) -> f64 {
        self.vc_p[self.ni(bus, ph)]
    }

    pub fn tc_p(&self, bus: BusIdx, ph: Phase) -> f64 {
        self.tc_p[self.ni(bus, ph)]
    }

    pub fn vc_q(&self, bus: BusIdx, ph: Phase) -> f64 {
        self.vc_q[self.ni(bus, ph)]
    }

    pub fn tc_q(&self, bus: BusIdx, ph: Phase) -> f64 {
        self.tc_q[self.ni(bus, ph)]
    }

    pub fn max_level(&self) -> f64 {
        self.vc_p
            .iter()
            .chain(&self.tc_p)
            .chain(&self.vc_q)
            .chain(&self.tc_q)
            .fold(0.0f64, |m, &v| m.max(v))
    }
}

pub fn saturation_levels(
    nvs: &SensitivityTable,
    cfg: &FasConfig,
) -> Result<SaturationLevels, FasError> {
    let n_bus = nvs.n_buses();
    let mut sat = SaturationLevels {
        vc_p: vec![0.0; n_bus * 3],
        tc_p: vec![0.0; n_bus * 3],
        vc_q: vec![0.0; n_bus * 3],
        tc_q: vec![0.0; n_bus * 3],
    };
    let max_p = (0..nvs.targets.len())
        .map(|k| nvs.own_p(k).abs())
        .fold(0.0f64, f64::max);
    if max_p <= 0.0 {
        return Err(FasError::AllZeroSensitivity);
    }
    let max_q = (0..nvs.targets.len())
        .map(|k| nvs.own_q(k).abs())
        .fold(0.0f64, f64::max);
    for (k, &(bus, ph)) in nvs.targets.iter().enumerate() {
        let i = sat.ni(bus, ph);
        let rel_p = nvs.own_p(k).abs() / max_p;
        sat.vc_p[i] = cfg.kappa_v * rel_p;
        sat.tc_p[i] = cfg.kappa_t * rel_p;
        if max_q > 0.0 {
            let rel_q = nvs.own_q(k).abs() / max_q;
            sat.vc_q[i] = cfg.kappa_v * rel_q;
            sat.tc_q[i] = cfg.kappa_t * rel_q;
        }
    }
    Ok(sat)
}

/// Voltage droop: zero inside the deadband, linear ramps toward the hard
/// limits, saturated at `sat` beyond them. Returns (up, down) prices; `up`
/// activates below nominal, `down` (non-positive) above.
pub fn voltage_droop(v: f64, limits: &OperatingLimits, sat: f64) -> (f64, f64) {
    let lo_edge = limits.soft_low_edge();
    let hi_edge = limits.soft_high_edge();
    if v <= limits.v_min {
        (sat, 0.0)
    } else if v < lo_edge {
        (sat * (v - lo_edge) / (limits.v_min - lo_edge), 0.0)
    } else if v <= hi_edge {
        (0.0, 0.0)
    } else if v < limits.v_max {
        (0.0, -sat * (v - hi_edge) / (limits.v_max - hi_edge))
    } else {
        (0.0, -sat)
    }
}

/// Active-power voltage component (ramp-down price, ramp-up price).
pub fn voltage_component_p(v: f64, limits: &OperatingLimits, vc_max: f64) -> (f64, f64) {
    voltage_droop(v, limits, vc_max)
}

/// Reactive voltage component: capacitive injection priced under low
/// voltage, inductive consumption under high voltage. Same droop shape.
pub fn voltage_component_q(v: f64, limits: &OperatingLimits, vc_max: f64) -> (f64, f64) {
    voltage_droop(v, limits, vc_max)
}

/// Thermal droop over the signed projected loading. Forward congestion
/// prices both channels with opposite signs saturating at (+sat, -sat) at
/// 100 percent; reverse loading mirrors with signs flipped (odd symmetry).
pub fn thermal_droop(t_pct: f64, limits: &OperatingLimits, sat: f64) -> (f64, f64) {
    let magnitude = t_pct.abs();
    if magnitude <= limits.dt_perm {
        return (0.0, 0.0);
    }
    let ramp = if magnitude >= 100.0 {
        sat
    } else {
        sat * (magnitude - limits.dt_perm) / (100.0 - limits.dt_perm)
    };
    if t_pct > 0.0 {
        (ramp, -ramp)
    } else {
        (-ramp, ramp)
    }
}

pub fn thermal_component_p(t_pct: f64, limits: &OperatingLimits, tc_max: f64) -> (f64, f64) {
    thermal_droop(t_pct, limits, tc_max)
}

pub fn thermal_component_q(t_pct: f64, limits: &OperatingLimits, tc_max: f64) -> (f64, f64) {
    thermal_droop(t_pct, limits, tc_max)
}

/// Imbalance component per channel: (p_up, p_dn, q_up, q_dn).
///
/// The literal placement puts a positive voltage imbalance on the ramp-down
/// channel and a positive current imbalance on the ramp-up channel; with
/// `normalized` the current terms are flipped so every channel keeps the
/// sign convention of the other components.
pub fn imbalance_component(u_v: f64, u_i: f64, normalized: bool) -> [f64; 4] {
    let uv_pos = if u_v > 0.0 { u_v } else { 0.0 };
    let uv_neg = if u_v < 0.0 { u_v } else { 0.0 };
    let ui_pos = if u_i > 0.0 { u_i } else { 0.0 };
    let ui_neg = if u_i < 0.0 { u_i } else { 0.0 };
    if normalized {
        [uv_pos - ui_neg, uv_neg - ui_pos, uv_pos, uv_neg]
    } else {
        [uv_pos + ui_neg, uv_neg + ui_pos, uv_pos, uv_neg]
    }
}

/// One activation-signal channel split into its three contributions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FasChannel {
    pub voltage: f64,
    pub thermal: f64,
    pub imbalance: f64,
}

impl FasChannel {
    pub fn total(&self) -> f64 {
        self.voltage + self.thermal + self.imbalance
    }
}

/// Per-channel component values over the whole grid, one component family.
#[derive(Clone, Debug)]
pub struct ComponentField {
    t_len: usize,
    n_bus: usize,
    /// [channel 0..4][(t, bus, ph)] with channels p_up, p_dn, q_up, q_dn.
    values: [Vec<f64>; 4],
}

impl ComponentField {
    pub fn zeros(t_len: usize, n_bus: usize) -> ComponentField {
        let n = t_len * n_bus * 3;
        ComponentField {
            t_len,
            n_bus,
            values: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    #[inline]
    fn ni(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    pub fn set(&mut self, t: usize, bus: BusIdx, ph: Phase, channels: [f64; 4]) {
        let i = self.ni(t, bus, ph);
        for (c, v) in channels.into_iter().enumerate() {
            self.values[c][i] = v;
        }
    }

    pub fn get(&self, t: usize, bus: BusIdx, ph: Phase) -> [f64; 4] {
        let i = self.ni(t, bus, ph);
        [
            self.values[0][i],
            self.values[1][i],
            self.values[2][i],
            self.values[3][i],
        ]
    }
}

/// The combined activation-signal field with component breakdown retained.
#[derive(Clone, Debug)]
pub struct FasField {
    t_len: usize,
    n_bus: usize,
    p_up: Vec<FasChannel>,
    p_dn: Vec<FasChannel>,
    q_up: Vec<FasChannel>,
    q_dn: Vec<FasChannel>,
    pub saturation: SaturationLevels,
}

impl FasField {
    #[inline]
    fn ni(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_buses(&self) -> usize {
        self.n_bus
    }

    pub fn p_up(&self, t: usize, bus: BusIdx, ph: Phase) -> &FasChannel {
        &self.p_up[self.ni(t, bus, ph)]
    }

    pub fn p_dn(&self, t: usize, bus: BusIdx, ph: Phase) -> &FasChannel {
        &self.p_dn[self.ni(t, bus, ph)]
    }

    pub fn q_up(&self, t: usize, bus: BusIdx, ph: Phase) -> &FasChannel {
        &self.q_up[self.ni(t, bus, ph)]
    }

    pub fn q_dn(&self, t: usize, bus: BusIdx, ph: Phase) -> &FasChannel {
        &self.q_dn[self.ni(t, bus, ph)]
    }

    pub fn lam_p_up(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.p_up(t, bus, ph).total()
    }

    pub fn lam_p_dn(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.p_dn(t, bus, ph).total()
    }

    pub fn lam_q_up(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.q_up(t, bus, ph).total()
    }

    pub fn lam_q_dn(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.q_dn(t, bus, ph).total()
    }

    /// Largest activation-signal magnitude over the whole field.
    pub fn max_abs(&self) -> f64 {
        self.p_up
            .iter()
            .chain(&self.p_dn)
            .chain(&self.q_up)
            .chain(&self.q_dn)
            .fold(0.0f64, |m, c| m.max(c.total().abs()))
    }
}

/// Elementwise combination of the three component families.
pub fn combine(
    voltage: &ComponentField,
    thermal: &ComponentField,
    imbalance: &ComponentField,
    saturation: SaturationLevels,
) -> Result<FasField, FasError> {
    if voltage.t_len != thermal.t_len || voltage.t_len != imbalance.t_len {
        return Err(FasError::IndexMismatch("horizon length"));
    }
    if voltage.n_bus != thermal.n_bus || voltage.n_bus != imbalance.n_bus {
        return Err(FasError::IndexMismatch("bus count"));
    }
    let n = voltage.t_len * voltage.n_bus * 3;
    let mut field = FasField {
        t_len: voltage.t_len,
        n_bus: voltage.n_bus,
        p_up: vec![FasChannel::default(); n],
        p_dn: vec![FasChannel::default(); n],
        q_up: vec![FasChannel::default(); n],
        q_dn: vec![FasChannel::default(); n],
        saturation,
    };
    for i in 0..n {
        for (c, slot) in [
            &mut field.p_up,
            &mut field.p_dn,
            &mut field.q_up,
            &mut field.q_dn,
        ]
        .into_iter()
        .enumerate()
        {
            slot[i] = FasChannel {
                voltage: voltage.values[c][i],
                thermal: thermal.values[c][i],
                imbalance: imbalance.values[c][i],
            };
        }
    }
    Ok(field)
}

/// Synthesizes the full signal field from a solved horizon: saturation
/// levels from sensitivities, projections, imbalance metrics, droop
/// components at device phase-nodes, combined per channel.
pub fn synthesize(
    model: &NetworkModel,
    state: &GridState,
    nvs: &SensitivityTable,
    limits: &OperatingLimits,
    cfg: &FasConfig,
) -> Result<FasField, FasError> {
    let saturation = saturation_levels(nvs, cfg)?;
    let proj = compute_projections(model, state, cfg.weighted_current);
    let imbalance = imbalance_metrics(model, state, &proj, cfg);

    let t_len = state.t_len();
    let n_bus = model.n_buses();
    let mut volt = ComponentField::zeros(t_len, n_bus);
    let mut thermal = ComponentField::zeros(t_len, n_bus);
    let mut imb = ComponentField::zeros(t_len, n_bus);

    for &(bus, ph) in &nvs.targets {
        for t in 0..t_len {
            let v = state.v(t, bus, ph);
            let (vp_up, vp_dn) = voltage_component_p(v, limits, saturation.vc_p(bus, ph));
            let (vq_up, vq_dn) = voltage_component_q(v, limits, saturation.vc_q(bus, ph));
            volt.set(t, bus, ph, [vp_up, vp_dn, vq_up, vq_dn]);

            let t_pct = proj.loading(t, bus, ph);
            let (tp_up, tp_dn) = thermal_component_p(t_pct, limits, saturation.tc_p(bus, ph));
            let (tq_up, tq_dn) = thermal_component_q(t_pct, limits, saturation.tc_q(bus, ph));
            thermal.set(t, bus, ph, [tp_up, tp_dn, tq_up, tq_dn]);

            if imbalance.three_phase[bus] {
                let channels = imbalance_component(
                    imbalance.u_v(t, bus, ph),
                    imbalance.u_i(t, bus, ph),
                    cfg.imb_sign_normalized,
                );
                imb.set(t, bus, ph, channels);
            }
        }
    }
    combine(&volt, &thermal, &imb, saturation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::{solve_timestep, GridState, PowerFlowConfig, StepSolution};
    use crate::sensitivity::SensitivityTable;
    use crate::testnet;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn limits() -> OperatingLimits {
        OperatingLimits::default()
    }

    #[test]
    fn flow_direction_cases() {
        assert_eq!(flow_direction(1.02, 1.00), 1);
        assert_eq!(flow_direction(0.99, 1.01), -1);
        assert_eq!(flow_direction(1.00, 1.00), 1);
    }

    #[test]
    fn project_loading_cases() {
        assert_eq!(project_loading(&[(90.0, 1, 100.0)]).unwrap(), 90.0);
        // (0.5*200 - 1.0*100) / 300 of rating: exactly zero.
        let mixed = project_loading(&[(50.0, 1, 200.0), (100.0, -1, 100.0)]).unwrap();
        assert!(mixed.abs() < 1e-12);
        let reversed = project_loading(&[(40.0, -1, 100.0), (70.0, -1, 50.0)]).unwrap();
        assert!(reversed < 0.0);
        assert!(matches!(
            project_loading(&[(40.0, 1, 0.0)]),
            Err(FasError::ZeroRating)
        ));
        assert!(matches!(project_loading(&[]), Err(FasError::NoBranches)));
    }

    #[test]
    fn project_current_cases() {
        assert_eq!(project_current(&[(0.4, 1)]), 0.4);
        assert_eq!(project_current(&[(0.2, 1), (0.3, 1)]), 0.5);
        assert!((project_current(&[(0.5, 1), (0.2, -1)]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn saturation_normalization() {
        let targets = vec![(1usize, Phase::A), (3usize, Phase::A)];
        let table = SensitivityTable::synthetic(4, targets, &[-0.02, -0.05], &[-0.01, -0.03]);
        let sat = saturation_levels(&table, &FasConfig::default()).unwrap();
        // Node with the largest own sensitivity sits exactly at kappa.
        assert_eq!(sat.vc_p(3, Phase::A), 1.0);
        assert_eq!(sat.tc_p(3, Phase::A), 1.0);
        assert!((sat.vc_p(1, Phase::A) - 0.4).abs() < 1e-12);
        assert!(sat.vc_p(3, Phase::A) > sat.vc_p(1, Phase::A));
        // No device, no saturation.
        assert_eq!(sat.vc_p(2, Phase::A), 0.0);

        let zeroed = saturation_levels(
            &table,
            &FasConfig {
                kappa_v: 0.0,
                kappa_t: 0.0,
                ..FasConfig::default()
            },
        )
        .unwrap();
        assert_eq!(zeroed.max_level(), 0.0);

        let empty = SensitivityTable::synthetic(4, vec![(1, Phase::A)], &[0.0], &[0.0]);
        assert!(matches!(
            saturation_levels(&empty, &FasConfig::default()),
            Err(FasError::AllZeroSensitivity)
        ));
    }

    #[test]
    fn voltage_droop_frozen_points() {
        let l = limits();
        assert_eq!(voltage_component_p(1.00, &l, 1.0), (0.0, 0.0));
        assert_eq!(voltage_component_p(0.90, &l, 1.0), (1.0, 0.0));
        // Midpoint of the lower ramp: (0.93 - 0.96)/(0.90 - 0.96) = 0.5.
        let (up, dn) = voltage_component_p(0.93, &l, 1.0);
        assert!((up - 0.5).abs() < 1e-12);
        assert_eq!(dn, 0.0);
        // Beyond the hard limits droops stay saturated.
        assert_eq!(voltage_component_p(0.85, &l, 1.0), (1.0, 0.0));
        assert_eq!(voltage_component_p(1.10, &l, 1.0), (0.0, -1.0));
        assert_eq!(voltage_component_p(1.15, &l, 1.0), (0.0, -1.0));
        // Deadband edges are exactly zero.
        assert_eq!(voltage_component_p(0.96, &l, 1.0), (0.0, 0.0));
        assert_eq!(voltage_component_p(1.03, &l, 1.0), (0.0, 0.0));
    }

    #[test]
    fn thermal_droop_frozen_points() {
        let l = limits();
        assert_eq!(thermal_component_p(80.0, &l, 1.0), (0.0, 0.0));
        assert_eq!(thermal_component_p(100.0, &l, 1.0), (1.0, -1.0));
        let (up, dn) = thermal_component_p(90.0, &l, 1.0);
        assert!((up - 0.5).abs() < 1e-12);
        assert!((dn + 0.5).abs() < 1e-12);
        // Reverse flow mirrors with flipped signs.
        assert_eq!(thermal_component_p(-100.0, &l, 1.0), (-1.0, 1.0));
        let (up, dn) = thermal_component_p(-90.0, &l, 1.0);
        assert!((up + 0.5).abs() < 1e-12);
        assert!((dn - 0.5).abs() < 1e-12);
        // Saturated past the rating.
        assert_eq!(thermal_component_p(140.0, &l, 1.0), (1.0, -1.0));
    }

    fn state_with_voltages(model: &crate::netmodel::NetworkModel, mags: &[[f64; 3]]) -> GridState {
        let sol = StepSolution {
            v: mags
                .iter()
                .map(|m| {
                    [
                        Complex64::from_polar(m[0], Phase::A.nominal_angle()),
                        Complex64::from_polar(m[1], Phase::B.nominal_angle()),
                        Complex64::from_polar(m[2], Phase::C.nominal_angle()),
                    ]
                })
                .collect(),
            i_branch: vec![[Complex64::new(0.0, 0.0); 3]; model.n_branches()],
            iterations: 1,
            mismatch: 0.0,
        };
        GridState::from_steps(model, &[sol])
    }

    /// Worked example: voltages (1.1, 1.05, 1.03) give normalized voltage
    /// imbalances (-0.04, 0.01, 0.03)/1.06.
    #[test]
    fn imbalance_metrics_worked_example() {
        let model = testnet::chain(2, &[(1, 'A')]);
        let state = state_with_voltages(&model, &[[1.0; 3], [1.1, 1.05, 1.03]]);
        let proj = compute_projections(&model, &state, false);
        let field = imbalance_metrics(&model, &state, &proj, &FasConfig::default());
        let u = [
            field.u_v(0, 1, Phase::A),
            field.u_v(0, 1, Phase::B),
            field.u_v(0, 1, Phase::C),
        ];
        assert!((u[0] - (-0.0377)).abs() < 5e-5, "{}", u[0]);
        assert!((u[1] - 0.0094).abs() < 5e-5, "{}", u[1]);
        assert!((u[2] - 0.0283).abs() < 5e-5, "{}", u[2]);
        assert!((u[0] + u[1] + u[2]).abs() < 1e-12);
        // Currents are zero here: degenerate, flagged, no current term.
        assert!(field.degenerate_i[1]);
        assert_eq!(field.u_i(0, 1, Phase::A), 0.0);
    }

    #[test]
    fn imbalance_component_directions() {
        // Paper's phase A: ramp-up activation on the negative channel.
        let [p_up, p_dn, q_up, q_dn] = imbalance_component(-0.0377, 0.0, false);
        assert_eq!(p_up, 0.0);
        assert!((p_dn + 0.0377).abs() < 1e-15);
        assert_eq!(q_up, 0.0);
        assert!((q_dn + 0.0377).abs() < 1e-15);
        // Literal placement: positive current imbalance lands on the
        // ramp-down channel with its own (positive) sign.
        let [p_up, p_dn, _, _] = imbalance_component(0.0, 0.1, false);
        assert_eq!(p_up, 0.0);
        assert!((p_dn - 0.1).abs() < 1e-15);
        // Normalized placement keeps the channel sign convention.
        let [p_up, p_dn, _, _] = imbalance_component(0.0, 0.1, true);
        assert_eq!(p_up, 0.0);
        assert!((p_dn + 0.1).abs() < 1e-15);
        // Q channels never see current imbalance.
        let [_, _, q_up, q_dn] = imbalance_component(0.0, 0.5, false);
        assert_eq!((q_up, q_dn), (0.0, 0.0));
        assert_eq!(imbalance_component(0.0, 0.0, false), [0.0; 4]);
    }

    #[test]
    fn combine_adds_components_elementwise() {
        let sat = SaturationLevels {
            vc_p: vec![0.0; 6],
            tc_p: vec![0.0; 6],
            vc_q: vec![0.0; 6],
            tc_q: vec![0.0; 6],
        };
        let mut volt = ComponentField::zeros(1, 2);
        let mut therm = ComponentField::zeros(1, 2);
        let mut imb = ComponentField::zeros(1, 2);
        volt.set(0, 1, Phase::A, [0.5, 0.0, 0.0, 0.0]);
        therm.set(0, 1, Phase::A, [0.2, -0.2, 0.0, 0.0]);
        imb.set(0, 1, Phase::A, [0.03, 0.0, 0.0, 0.0]);
        let field = combine(&volt, &therm, &imb, sat.clone()).unwrap();
        assert!((field.lam_p_up(0, 1, Phase::A) - 0.73).abs() < 1e-12);
        assert!((field.lam_p_dn(0, 1, Phase::A) + 0.2).abs() < 1e-12);
        assert_eq!(field.lam_p_up(0, 0, Phase::B), 0.0);
        let breakdown = field.p_up(0, 1, Phase::A);
        assert_eq!(breakdown.voltage, 0.5);
        assert_eq!(breakdown.thermal, 0.2);
        assert_eq!(breakdown.imbalance, 0.03);

        let mismatched = ComponentField::zeros(2, 2);
        assert!(matches!(
            combine(&volt, &therm, &mismatched, sat),
            Err(FasError::IndexMismatch(_))
        ));
    }

    /// A flat, balanced, unloaded network inside every deadband yields an
    /// exactly zero field.
    #[test]
    fn quiet_network_gives_zero_field() {
        let model = testnet::chain(4, &[(2, 'B'), (3, 'A')]);
        let inj = vec![[Complex64::new(0.0, 0.0); 3]; model.n_buses()];
        let sol = solve_timestep(&model, &inj, &PowerFlowConfig::default()).unwrap();
        let state = GridState::from_steps(&model, &[sol]);
        let nvs = SensitivityTable::synthetic(
            4,
            vec![(2, Phase::B), (3, Phase::A)],
            &[-0.02, -0.04],
            &[-0.01, -0.02],
        );
        let field = synthesize(&model, &state, &nvs, &limits(), &FasConfig::default()).unwrap();
        assert_eq!(field.max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn voltage_droop_properties(
            v in 0.70f64..1.30,
            v_min in 0.80f64..0.94,
            dv_lo in 0.005f64..0.05,
            dv_hi in 0.005f64..0.05,
            v_max_pad in 0.01f64..0.2,
            sat in 0.05f64..2.0,
        ) {
            let l = OperatingLimits {
                v_min,
                v_max: 1.0 + dv_hi + v_max_pad,
                dv_perm_lo: dv_lo.min((1.0 - v_min) * 0.8),
                dv_perm_hi: dv_hi,
                dt_perm: 80.0,
                curt_price_p: None,
                curt_price_g: None,
            };
            prop_assume!(l.validate().is_ok());
            let (up, dn) = voltage_droop(v, &l, sat);
            prop_assert!(up >= 0.0 && dn <= 0.0);
            prop_assert!(up <= sat + 1e-12 && dn >= -sat - 1e-12);
            prop_assert!(!(up != 0.0 && dn != 0.0));
            if v >= l.soft_low_edge() && v <= l.soft_high_edge() {
                prop_assert_eq!((up, dn), (0.0, 0.0));
            }
            // Saturation exactly at and beyond the hard limits.
            if v <= l.v_min {
                prop_assert_eq!(up, sat);
            }
            if v >= l.v_max {
                prop_assert_eq!(dn, -sat);
            }
            // Droop midpoint equals half saturation.
            let mid = 0.5 * (l.v_min + l.soft_low_edge());
            let (mid_up, _) = voltage_droop(mid, &l, sat);
            prop_assert!((mid_up - 0.5 * sat).abs() < 1e-9);
            // Monotone non-increasing in v on both channels.
            let (up2, dn2) = voltage_droop(v + 0.01, &l, sat);
            prop_assert!(up2 <= up + 1e-12);
            prop_assert!(dn2 <= dn + 1e-12);
        }

        #[test]
        fn thermal_droop_properties(
            t in -160.0f64..160.0,
            dt in 40.0f64..95.0,
            sat in 0.05f64..2.0,
        ) {
            let l = OperatingLimits { dt_perm: dt, ..OperatingLimits::default() };
            let (up, dn) = thermal_droop(t, &l, sat);
            prop_assert!((up + dn).abs() < 1e-12);
            prop_assert!(up.abs() <= sat + 1e-12);
            if t.abs() <= dt {
                prop_assert_eq!((up, dn), (0.0, 0.0));
            }
            if t.abs() >= 100.0 {
                prop_assert_eq!(up.abs(), sat);
            }
            // Odd symmetry.
            let (up_m, dn_m) = thermal_droop(-t, &l, sat);
            prop_assert!((up_m + up).abs() < 1e-12);
            prop_assert!((dn_m + dn).abs() < 1e-12);
        }

        #[test]
        fn normalized_imbalances_sum_to_zero(
            va in 0.9f64..1.1,
            vb in 0.9f64..1.1,
            vc in 0.9f64..1.1,
            ia in -0.5f64..0.5,
            ib in -0.5f64..0.5,
            ic in -0.5f64..0.5,
        ) {
            let v_mean = (va + vb + vc) / 3.0;
            let u: f64 = [va, vb, vc].iter().map(|v| 1.0 - v / v_mean).sum();
            prop_assert!(u.abs() < 1e-12);
            let i_mean = (ia + ib + ic) / 3.0;
            prop_assume!(i_mean.abs() > 1e-6);
            let ui: f64 = [ia, ib, ic].iter().map(|i| 1.0 - i / i_mean).sum();
            prop_assert!(ui.abs() < 1e-9);
        }
    }
}
