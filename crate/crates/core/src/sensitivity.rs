//! Perturb-and-observe sensitivities.
//!
//! For every device phase-node a small active (reactive) power perturbation
//! is applied on top of the base injections, the power flow re-solved, and
//! the voltage / projected-loading responses divided by the perturbation
//! size. Tables are averaged over several perturbation levels to reduce the
//! impact of the level choice. The sign convention is consumption-positive:
//! a positive perturbation adds load.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::fas;
use crate::netmodel::{BusIdx, NetworkModel};
use crate::phase::Phase;
use crate::powerflow::{solve_timestep, GridState, PowerFlowConfig, PowerFlowError};

#[derive(Debug, thiserror::Error)]
pub enum SensitivityError {
    #[error("perturbation level list is empty")]
    EmptyLevels,
    #[error("base power flow failed: {0}")]
    BaseDiverged(#[source] PowerFlowError),
    #[error("every perturbation level diverged for target bus index {bus} phase {phase}")]
    AllLevelsDiverged { bus: BusIdx, phase: Phase },
    #[error("model has no device phase-nodes to perturb")]
    NoTargets,
}

/// Voltage response per unit power, per (observed phase-node, target).
#[derive(Clone, Debug)]
pub struct SensitivityTable {
    /// Perturbed device phase-nodes, ordered by (bus, phase).
    pub targets: Vec<(BusIdx, Phase)>,
    /// Perturbation sizes actually used, pu.
    pub levels: Vec<f64>,
    pub warnings: Vec<String>,
    n_bus: usize,
    /// [(bus * 3 + phase) * n_targets + k]
    nvs_p: Vec<f64>,
    nvs_q: Vec<f64>,
}

impl SensitivityTable {
    pub fn n_buses(&self) -> usize {
        self.n_bus
    }

    #[inline]
    fn oi(&self, bus: BusIdx, ph: Phase, k: usize) -> usize {
        (bus * 3 + ph.index()) * self.targets.len() + k
    }

    /// dV(observed) / dP(target k), pu voltage per pu added load.
    pub fn nvs_p(&self, obs_bus: BusIdx, obs_ph: Phase, k: usize) -> f64 {
        self.nvs_p[self.oi(obs_bus, obs_ph, k)]
    }

    pub fn nvs_q(&self, obs_bus: BusIdx, obs_ph: Phase, k: usize) -> f64 {
        self.nvs_q[self.oi(obs_bus, obs_ph, k)]
    }

    /// Own-node sensitivity of target k (observed at the perturbed node).
    pub fn own_p(&self, k: usize) -> f64 {
        let (bus, ph) = self.targets[k];
        self.nvs_p(bus, ph, k)
    }

    pub fn own_q(&self, k: usize) -> f64 {
        let (bus, ph) = self.targets[k];
        self.nvs_q(bus, ph, k)
    }

    pub fn target_index(&self, bus: BusIdx, ph: Phase) -> Option<usize> {
        self.targets.iter().position(|&t| t == (bus, ph))
    }
}

/// Projected-loading response per unit power, same target indexing as
/// [`SensitivityTable`]. Branch-level loading responses are carried along
/// for the dispatch linearization.
#[derive(Clone, Debug)]
pub struct ThermalSensitivityTable {
    pub targets: Vec<(BusIdx, Phase)>,
    pub levels: Vec<f64>,
    pub warnings: Vec<String>,
    n_bus: usize,
    n_branch: usize,
    /// d(projected nodal loading %)/dP, [(bus*3+ph) * n_targets + k].
    proj_p: Vec<f64>,
    proj_q: Vec<f64>,
    /// d(signed branch loading %)/dP, [(branch*3+ph) * n_targets + k].
    branch_p: Vec<f64>,
    branch_q: Vec<f64>,
}

impl ThermalSensitivityTable {
    pub fn n_buses(&self) -> usize {
        self.n_bus
    }

    pub fn n_branches(&self) -> usize {
        self.n_branch
    }

    pub fn proj_p(&self, bus: BusIdx, ph: Phase, k: usize) -> f64 {
        self.proj_p[(bus * 3 + ph.index()) * self.targets.len() + k]
    }

    pub fn proj_q(&self, bus: BusIdx, ph: Phase, k: usize) -> f64 {
        self.proj_q[(bus * 3 + ph.index()) * self.targets.len() + k]
    }

    pub fn branch_p(&self, br: usize, ph: Phase, k: usize) -> f64 {
        self.branch_p[(br * 3 + ph.index()) * self.targets.len() + k]
    }

    pub fn branch_q(&self, br: usize, ph: Phase, k: usize) -> f64 {
        self.branch_q[(br * 3 + ph.index()) * self.targets.len() + k]
    }
}

/// Which quantity a perturbation disturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Quantity {
    ActivePower,
    ReactivePower,
}

/// One observed network response: voltages, projected loadings, branch
/// loadings, flattened dense.
struct Observation {
    v: Vec<f64>,
    proj: Vec<f64>,
    branch: Vec<f64>,
}

fn observe(model: &NetworkModel, injections: &[[Complex64; 3]], cfg: &PowerFlowConfig)
    -> Result<Observation, PowerFlowError>
{
    let sol = solve_timestep(model, injections, cfg)?;
    let state = GridState::from_steps(model, std::slice::from_ref(&sol));
    let proj = fas::compute_projections(model, &state, false);
    let n_bus = model.n_buses();
    let n_branch = model.n_branches();
    let mut v = vec![0.0; n_bus * 3];
    let mut p = vec![0.0; n_bus * 3];
    for b in 0..n_bus {
        for ph in Phase::ALL {
            v[b * 3 + ph.index()] = state.v(0, b, ph);
            p[b * 3 + ph.index()] = proj.loading(0, b, ph);
        }
    }
    let mut l = vec![0.0; n_branch * 3];
    for br in 0..n_branch {
        for ph in Phase::ALL {
            l[br * 3 + ph.index()] = state.loading(0, br, ph);
        }
    }
    Ok(Observation {
        v,
        proj: p,
        branch: l,
    })
}

/// Raw per-level response of all targets against one base case.
struct PerturbRun {
    targets: Vec<(BusIdx, Phase)>,
    levels: Vec<f64>,
    warnings: Vec<String>,
    /// [quantity][level][target] -> per-observation derivative vectors.
    /// Dropped (diverged) levels stay empty and are skipped when averaging.
    dv: Vec<Vec<Vec<Vec<f64>>>>,
    dproj: Vec<Vec<Vec<Vec<f64>>>>,
    dbranch: Vec<Vec<Vec<Vec<f64>>>>,
}

fn run_perturbations(
    model: &NetworkModel,
    base_injections: &[[Complex64; 3]],
    levels: &[f64],
    cfg: &PowerFlowConfig,
) -> Result<PerturbRun, SensitivityError> {
    if levels.is_empty() {
        return Err(SensitivityError::EmptyLevels);
    }
    let targets = model.device_phase_nodes();
    if targets.is_empty() {
        return Err(SensitivityError::NoTargets);
    }
    let base = observe(model, base_injections, cfg).map_err(SensitivityError::BaseDiverged)?;

    let quantities = [Quantity::ActivePower, Quantity::ReactivePower];
    // (quantity, level, target) jobs are independent power flows.
    let n_targets = targets.len();
    let jobs: Vec<(usize, usize, usize)> = (0..2)
        .flat_map(|qi| {
            (0..levels.len()).flat_map(move |li| (0..n_targets).map(move |ki| (qi, li, ki)))
        })
        .collect();
    let results: Vec<((usize, usize, usize), Option<Observation>)> = jobs
        .into_par_iter()
        .map(|(qi, li, ki)| {
            let (bus, ph) = targets[ki];
            let h = levels[li];
            let mut injections = base_injections.to_vec();
            match quantities[qi] {
                Quantity::ActivePower => injections[bus][ph.index()] += Complex64::new(h, 0.0),
                Quantity::ReactivePower => injections[bus][ph.index()] += Complex64::new(0.0, h),
            }
            let obs = observe(model, &injections, cfg).ok();
            ((qi, li, ki), obs)
        })
        .collect();

    let n_obs = base.v.len();
    let n_proj = base.proj.len();
    let n_branch = base.branch.len();
    let mut dv = vec![vec![vec![Vec::new(); targets.len()]; levels.len()]; 2];
    let mut dproj = vec![vec![vec![Vec::new(); targets.len()]; levels.len()]; 2];
    let mut dbranch = vec![vec![vec![Vec::new(); targets.len()]; levels.len()]; 2];
    let mut ok: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); targets.len()]; 2];
    let mut warnings = Vec::new();
    for ((qi, li, ki), obs) in results {
        match obs {
            Some(o) => {
                let h = levels[li];
                dv[qi][li][ki] = (0..n_obs).map(|i| (o.v[i] - base.v[i]) / h).collect();
                dproj[qi][li][ki] = (0..n_proj).map(|i| (o.proj[i] - base.proj[i]) / h).collect();
                dbranch[qi][li][ki] = (0..n_branch)
                    .map(|i| (o.branch[i] - base.branch[i]) / h)
                    .collect();
                ok[qi][ki].push(li);
            }
            None => {
                let (bus, ph) = targets[ki];
                warnings.push(format!(
                    "perturbation {} pu ({}) at bus index {bus} phase {ph} diverged; level dropped",
                    levels[li],
                    if qi == 0 { "P" } else { "Q" },
                ));
            }
        }
    }
    for per_target in ok.iter() {
        for (ki, lvls) in per_target.iter().enumerate() {
            if lvls.is_empty() {
                let (bus, ph) = targets[ki];
                return Err(SensitivityError::AllLevelsDiverged { bus, phase: ph });
            }
        }
    }
    warnings.sort();
    Ok(PerturbRun {
        targets,
        levels: levels.to_vec(),
        warnings,
        dv,
        dproj,
        dbranch,
    })
}

fn average(
    per_level: &[Vec<Vec<Vec<f64>>>],
    qi: usize,
    n_targets: usize,
    n_obs: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n_obs * n_targets];
    for ki in 0..n_targets {
        let series: Vec<&Vec<f64>> = per_level[qi]
            .iter()
            .map(|lvl| &lvl[ki])
            .filter(|v| !v.is_empty())
            .collect();
        let count = series.len() as f64;
        for (i, slot) in out.chunks_exact_mut(n_targets).enumerate() {
            slot[ki] = series.iter().map(|v| v[i]).sum::<f64>() / count;
        }
    }
    out
}

/// Computes voltage sensitivities averaged over the perturbation levels.
pub fn compute_nvs(
    model: &NetworkModel,
    base_injections: &[[Complex64; 3]],
    levels: &[f64],
    cfg: &PowerFlowConfig,
) -> Result<SensitivityTable, SensitivityError> {
    let run = run_perturbations(model, base_injections, levels, cfg)?;
    Ok(nvs_from_run(model, &run))
}

fn nvs_from_run(model: &NetworkModel, run: &PerturbRun) -> SensitivityTable {
    let n_obs = model.n_buses() * 3;
    SensitivityTable {
        targets: run.targets.clone(),
        levels: run.levels.clone(),
        warnings: run.warnings.clone(),
        n_bus: model.n_buses(),
        nvs_p: average(&run.dv, 0, run.targets.len(), n_obs),
        nvs_q: average(&run.dv, 1, run.targets.len(), n_obs),
    }
}

/// Computes projected-loading (and branch-loading) sensitivities.
pub fn compute_thermal_sensitivity(
    model: &NetworkModel,
    base_injections: &[[Complex64; 3]],
    levels: &[f64],
    cfg: &PowerFlowConfig,
) -> Result<ThermalSensitivityTable, SensitivityError> {
    let run = run_perturbations(model, base_injections, levels, cfg)?;
    Ok(thermal_from_run(model, &run))
}

fn thermal_from_run(model: &NetworkModel, run: &PerturbRun) -> ThermalSensitivityTable {
    let n_obs = model.n_buses() * 3;
    let n_branch_obs = model.n_branches() * 3;
    ThermalSensitivityTable {
        targets: run.targets.clone(),
        levels: run.levels.clone(),
        warnings: run.warnings.clone(),
        n_bus: model.n_buses(),
        n_branch: model.n_branches(),
        proj_p: average(&run.dproj, 0, run.targets.len(), n_obs),
        proj_q: average(&run.dproj, 1, run.targets.len(), n_obs),
        branch_p: average(&run.dbranch, 0, run.targets.len(), n_branch_obs),
        branch_q: average(&run.dbranch, 1, run.targets.len(), n_branch_obs),
    }
}

/// Computes both tables from a single set of perturbation solves.
pub fn compute_all(
    model: &NetworkModel,
    base_injections: &[[Complex64; 3]],
    levels: &[f64],
    cfg: &PowerFlowConfig,
) -> Result<(SensitivityTable, ThermalSensitivityTable), SensitivityError> {
    let run = run_perturbations(model, base_injections, levels, cfg)?;
    Ok((nvs_from_run(model, &run), thermal_from_run(model, &run)))
}

/// Horizon-mean injections: the default base case for one-shot tables.
pub fn mean_injections(
    model: &NetworkModel,
    profiles: &crate::netmodel::ProfileSet,
) -> Vec<[Complex64; 3]> {
    let t_len = profiles.t_len().max(1);
    let mut acc = vec![[Complex64::new(0.0, 0.0); 3]; model.n_buses()];
    for t in 0..profiles.t_len() {
        let inj = model.injections_at(profiles, t);
        for (a, b) in acc.iter_mut().zip(inj) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
    for a in acc.iter_mut() {
        for k in 0..3 {
            a[k] /= t_len as f64;
        }
    }
    acc
}

#[cfg(test)]
impl SensitivityTable {
    /// Builds a synthetic table with specified own-node entries, everything
    /// else zero.
    pub(crate) fn synthetic(
        n_bus: usize,
        targets: Vec<(BusIdx, Phase)>,
        own_p: &[f64],
        own_q: &[f64],
    ) -> SensitivityTable {
        let n_t = targets.len();
        let mut table = SensitivityTable {
            targets: targets.clone(),
            levels: vec![0.001],
            warnings: Vec::new(),
            n_bus,
            nvs_p: vec![0.0; n_bus * 3 * n_t],
            nvs_q: vec![0.0; n_bus * 3 * n_t],
        };
        for (k, &(bus, ph)) in targets.iter().enumerate() {
            let i = (bus * 3 + ph.index()) * n_t + k;
            table.nvs_p[i] = own_p[k];
            table.nvs_q[i] = own_q[k];
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::PowerFlowConfig;
    use crate::testnet;

    fn zero_base(model: &NetworkModel) -> Vec<[Complex64; 3]> {
        vec![[Complex64::new(0.0, 0.0); 3]; model.n_buses()]
    }

    fn loaded_base(model: &NetworkModel) -> Vec<[Complex64; 3]> {
        let mut base = zero_base(model);
        for d in model.devices() {
            for ph in d.connection.phases().iter() {
                base[d.bus][ph.index()] += Complex64::new(0.02, 0.005);
            }
        }
        base
    }

    #[test]
    fn own_entries_negative_and_deeper_is_stronger() {
        let model = testnet::chain(6, &[(1, 'A'), (5, 'A')]);
        let table = compute_nvs(
            &model,
            &loaded_base(&model),
            &[0.001, 0.002],
            &PowerFlowConfig::default(),
        )
        .unwrap();
        let near = table.target_index(1, Phase::A).unwrap();
        let far = table.target_index(5, Phase::A).unwrap();
        assert!(table.own_p(near) < 0.0);
        assert!(table.own_p(far) < 0.0);
        assert!(
            table.own_p(far).abs() > table.own_p(near).abs(),
            "feeder end {} vs near slack {}",
            table.own_p(far),
            table.own_p(near)
        );
    }

    #[test]
    fn slack_rows_are_zero_and_cross_phase_nonzero() {
        let model = testnet::chain(4, &[(3, 'A')]);
        let table = compute_nvs(
            &model,
            &loaded_base(&model),
            &[0.001],
            &PowerFlowConfig::default(),
        )
        .unwrap();
        let k = table.target_index(3, Phase::A).unwrap();
        for ph in Phase::ALL {
            assert_eq!(table.nvs_p(model.slack(), ph, k), 0.0);
        }
        // Mutual coupling must push the other phases measurably.
        assert!(table.nvs_p(3, Phase::B, k).abs() > 1e-6);
        assert!(table.nvs_p(3, Phase::C, k).abs() > 1e-6);
    }

    #[test]
    fn halving_the_level_changes_entries_under_five_percent() {
        let model = testnet::chain(5, &[(2, 'B'), (4, 'C')]);
        let base = loaded_base(&model);
        let cfg = PowerFlowConfig::default();
        let coarse = compute_nvs(&model, &base, &[0.002], &cfg).unwrap();
        let fine = compute_nvs(&model, &base, &[0.001], &cfg).unwrap();
        for k in 0..coarse.targets.len() {
            for b in 0..model.n_buses() {
                for ph in Phase::ALL {
                    let a = coarse.nvs_p(b, ph, k);
                    let f = fine.nvs_p(b, ph, k);
                    if f.abs() > 1e-9 {
                        assert!(
                            ((a - f) / f).abs() < 0.05,
                            "entry ({b},{ph},{k}): {a} vs {f}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn averaging_is_exact_mean_of_levels() {
        let model = testnet::chain(4, &[(3, 'A')]);
        let base = loaded_base(&model);
        let cfg = PowerFlowConfig::default();
        let both = compute_nvs(&model, &base, &[0.001, 0.004], &cfg).unwrap();
        let lo = compute_nvs(&model, &base, &[0.001], &cfg).unwrap();
        let hi = compute_nvs(&model, &base, &[0.004], &cfg).unwrap();
        for k in 0..both.targets.len() {
            for b in 0..model.n_buses() {
                for ph in Phase::ALL {
                    let mean = 0.5 * (lo.nvs_p(b, ph, k) + hi.nvs_p(b, ph, k));
                    assert_eq!(both.nvs_p(b, ph, k), mean);
                }
            }
        }
    }

    #[test]
    fn symmetric_laterals_have_equal_sensitivities() {
        let model = testnet::symmetric_y();
        let table = compute_nvs(
            &model,
            &loaded_base(&model),
            &[0.001, 0.002],
            &PowerFlowConfig::default(),
        )
        .unwrap();
        let a = table.target_index(2, Phase::A).unwrap();
        let b = table.target_index(3, Phase::A).unwrap();
        assert!((table.own_p(a) - table.own_p(b)).abs() < 1e-6);
        assert!((table.own_q(a) - table.own_q(b)).abs() < 1e-6);
    }

    #[test]
    fn empty_levels_is_an_error() {
        let model = testnet::chain(3, &[(2, 'A')]);
        let err = compute_nvs(
            &model,
            &zero_base(&model),
            &[],
            &PowerFlowConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SensitivityError::EmptyLevels));
    }

    #[test]
    fn thermal_downstream_load_raises_forward_loading() {
        let model = testnet::chain(4, &[(3, 'A')]);
        let table = compute_thermal_sensitivity(
            &model,
            &loaded_base(&model),
            &[0.001],
            &PowerFlowConfig::default(),
        )
        .unwrap();
        let k = table.targets.iter().position(|&t| t == (3, Phase::A)).unwrap();
        // Every trunk branch carries the extra load forward.
        for br in 0..model.n_branches() {
            assert!(
                table.branch_p(br, Phase::A, k) > 0.0,
                "branch {br}: {}",
                table.branch_p(br, Phase::A, k)
            );
        }
        // Leaf projection equals its only branch, so also positive.
        assert!(table.proj_p(3, Phase::A, k) > 0.0);
    }

    #[test]
    fn thermal_sign_consistent_on_reverse_flow() {
        let model = testnet::chain(4, &[(3, 'A')]);
        // Strong injection at the feeder end reverses the trunk flow.
        let mut base = zero_base(&model);
        base[3][0] = Complex64::new(-0.08, 0.0);
        let table = compute_thermal_sensitivity(
            &model,
            &base,
            &[0.001],
            &PowerFlowConfig::default(),
        )
        .unwrap();
        let k = table.targets.iter().position(|&t| t == (3, Phase::A)).unwrap();
        // Added consumption relieves reverse flow: signed loading rises
        // toward zero, so the derivative stays positive; equivalently an
        // extra injection (negative perturbation) deepens |loading|.
        assert!(table.branch_p(0, Phase::A, k) > 0.0);
    }
}
