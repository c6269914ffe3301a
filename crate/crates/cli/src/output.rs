//! Deterministic CSV artifacts. Rows are ordered by step, public bus id,
//! then phase; floats are rounded to 9 significant digits and printed in
//! the shortest form that round-trips the rounded value.

use std::path::Path;

use fasgrid::activation::ActivationOutcome;
use fasgrid::fas::FasField;
use fasgrid::metrics::{ParetoPoint, VufSeries};
use fasgrid::netmodel::{NetworkModel, OperatingLimits};
use fasgrid::phase::Phase;
use fasgrid::powerflow::{GridState, IncidentReport};
use fasgrid::sensitivity::SensitivityTable;

use crate::CliError;

/// Rounds to 9 significant digits and prints the shortest round-trip form.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(8 - exp);
    let rounded = (x * scale).round() / scale;
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_text(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    write_file(dir, name, content)
}

fn csv(header: &str, rows: Vec<String>) -> String {
    let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Buses sorted by their public id for stable row order.
fn sorted_buses(model: &NetworkModel) -> Vec<(u32, usize)> {
    let mut ids: Vec<(u32, usize)> = model
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    ids.sort_unstable();
    ids
}

fn sorted_branches(model: &NetworkModel) -> Vec<usize> {
    let mut order: Vec<usize> = (0..model.n_branches()).collect();
    order.sort_by_key(|&br| {
        let b = &model.branches()[br];
        (model.buses()[b.from].id, model.buses()[b.to].id)
    });
    order
}

pub fn write_voltages(
    dir: &Path,
    name: &str,
    model: &NetworkModel,
    state: &GridState,
) -> Result<(), CliError> {
    let buses = sorted_buses(model);
    let mut rows = Vec::new();
    for t in 0..state.t_len() {
        for &(id, b) in &buses {
            for ph in model.buses()[b].phases.iter() {
                rows.push(format!(
                    "{t},{id},{ph},{},{}",
                    fmt9(state.v(t, b, ph)),
                    fmt9(state.angle(t, b, ph))
                ));
            }
        }
    }
    write_file(dir, name, &csv("t,bus,phase,v_pu,theta_rad", rows))
}

pub fn write_loadings(
    dir: &Path,
    name: &str,
    model: &NetworkModel,
    state: &GridState,
) -> Result<(), CliError> {
    let order = sorted_branches(model);
    let mut rows = Vec::new();
    for t in 0..state.t_len() {
        for &br in &order {
            let branch = &model.branches()[br];
            for ph in branch.phases.iter() {
                rows.push(format!(
                    "{t},{},{},{ph},{},{}",
                    model.buses()[branch.from].id,
                    model.buses()[branch.to].id,
                    fmt9(state.loading(t, br, ph)),
                    fmt9(state.branch_current(t, br, ph).norm())
                ));
            }
        }
    }
    write_file(
        dir,
        name,
        &csv("t,from_bus,to_bus,phase,loading_pct,i_pu", rows),
    )
}

pub fn write_incidents(
    dir: &Path,
    name: &str,
    limits: &OperatingLimits,
    report: &IncidentReport,
) -> Result<(), CliError> {
    let rows = vec![
        format!(
            "under_voltage,{},{}",
            report.under_voltage.count,
            fmt9(report.under_voltage.pct)
        ),
        format!(
            "voltage_below_{},{},{}",
            fmt9(limits.soft_low_edge()),
            report.below_soft.count,
            fmt9(report.below_soft.pct)
        ),
        format!(
            "over_voltage,{},{}",
            report.over_voltage.count,
            fmt9(report.over_voltage.pct)
        ),
        format!(
            "voltage_above_{},{},{}",
            fmt9(limits.soft_high_edge()),
            report.above_soft.count,
            fmt9(report.above_soft.pct)
        ),
        format!(
            "thermal_overload,{},{}",
            report.thermal_overload.count,
            fmt9(report.thermal_overload.pct)
        ),
        format!("instances,{},100", report.denominator),
    ];
    write_file(dir, name, &csv("incident,count,pct", rows))
}

pub fn write_nvs(
    dir: &Path,
    name: &str,
    model: &NetworkModel,
    table: &SensitivityTable,
) -> Result<(), CliError> {
    let buses = sorted_buses(model);
    // Targets are already in (bus, phase) order; re-key by public id.
    let mut targets: Vec<(u32, Phase, usize)> = table
        .targets
        .iter()
        .enumerate()
        .map(|(k, &(bus, ph))| (model.buses()[bus].id, ph, k))
        .collect();
    targets.sort_by_key(|&(id, ph, _)| (id, ph));
    let mut rows = Vec::new();
    for &(obs_id, obs) in &buses {
        for obs_ph in model.buses()[obs].phases.iter() {
            for &(pert_id, pert_ph, k) in &targets {
                rows.push(format!(
                    "{obs_id},{obs_ph},{pert_id},{pert_ph},{},{}",
                    fmt9(table.nvs_p(obs, obs_ph, k)),
                    fmt9(table.nvs_q(obs, obs_ph, k))
                ));
            }
        }
    }
    write_file(
        dir,
        name,
        &csv("obs_bus,obs_phase,pert_bus,pert_phase,nvs_p,nvs_q", rows),
    )
}

pub fn write_fas(
    dir: &Path,
    name: &str,
    model: &NetworkModel,
    fas: &FasField,
) -> Result<(), CliError> {
    let buses = sorted_buses(model);
    let mut rows = Vec::new();
    for t in 0..fas.t_len() {
        for &(id, b) in &buses {
            for ph in model.buses()[b].phases.iter() {
                let up = fas.p_up(t, b, ph);
                let dn = fas.p_dn(t, b, ph);
                rows.push(format!(
                    "{t},{id},{ph},{},{},{},{},{},{},{}",
                    fmt9(up.total()),
                    fmt9(dn.total()),
                    fmt9(fas.lam_q_up(t, b, ph)),
                    fmt9(fas.lam_q_dn(t, b, ph)),
                    fmt9(up.voltage + dn.voltage),
                    fmt9(up.thermal),
                    fmt9(up.imbalance + dn.imbalance)
                ));
            }
        }
    }
    write_file(
        dir,
        name,
        &csv(
            "t,bus,phase,lam_p_up,lam_p_dn,lam_q_up,lam_q_dn,volt_comp,th_comp,imb_comp",
            rows,
        ),
    )
}

pub fn write_activation(
    dir: &Path,
    name: &str,
    model: &NetworkModel,
    outcome: &ActivationOutcome,
) -> Result<(), CliError> {
    let buses = sorted_buses(model);
    let to_kw = model.s_base_kva();
    let mut rows = Vec::new();
    for step in &outcome.steps {
        for &(id, b) in &buses {
            for ph in model.buses()[b].phases.iter() {
                let i = step.dispatch.idx(b, ph);
                let values = [
                    step.dispatch.dp_up[i],
                    step.dispatch.dp_dn[i],
                    step.dispatch.dq_up[i],
                    step.dispatch.dq_dn[i],
                    step.dispatch.p_curt[i],
                    step.dispatch.g_curt[i],
                ];
                if values.iter().all(|v| v.abs() < 1e-12) {
                    continue;
                }
                rows.push(format!(
                    "{},{id},{ph},{},{},{},{},{},{}",
                    step.t,
                    fmt9(values[0] * to_kw),
                    fmt9(values[1] * to_kw),
                    fmt9(values[2] * to_kw),
                    fmt9(values[3] * to_kw),
                    fmt9(values[4] * to_kw),
                    fmt9(values[5] * to_kw)
                ));
            }
        }
    }
    write_file(
        dir,
        name,
        &csv("t,bus,phase,dp_up,dp_dn,dq_up,dq_dn,p_curt,g_curt", rows),
    )
}

pub fn write_pareto(dir: &Path, name: &str, points: &[ParetoPoint]) -> Result<(), CliError> {
    let rows = points
        .iter()
        .map(|p| {
            let incidents = if p.error.is_some() {
                "nan".to_string()
            } else {
                p.hard_incidents.to_string()
            };
            format!(
                "{},{},{},{},{incidents}",
                fmt9(p.gv),
                fmt9(p.objective),
                fmt9(p.mean_vuf),
                fmt9(p.max_vuf)
            )
        })
        .collect();
    write_file(
        dir,
        name,
        &csv("gv,objective,mean_vuf,max_vuf,incidents", rows),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn write_summary(
    dir: &Path,
    name: &str,
    limits: &OperatingLimits,
    before: &IncidentReport,
    after: &IncidentReport,
    vuf_before: &VufSeries,
    vuf_after: &VufSeries,
) -> Result<(), CliError> {
    let pair = |label: String,
                b: &fasgrid::powerflow::IncidentCount,
                a: &fasgrid::powerflow::IncidentCount| {
        format!(
            "{label},{},{},{},{}",
            b.count,
            fmt9(b.pct),
            a.count,
            fmt9(a.pct)
        )
    };
    let rows = vec![
        pair(
            "under_voltage".to_string(),
            &before.under_voltage,
            &after.under_voltage,
        ),
        pair(
            format!("voltage_below_{}", fmt9(limits.soft_low_edge())),
            &before.below_soft,
            &after.below_soft,
        ),
        pair(
            "over_voltage".to_string(),
            &before.over_voltage,
            &after.over_voltage,
        ),
        pair(
            format!("voltage_above_{}", fmt9(limits.soft_high_edge())),
            &before.above_soft,
            &after.above_soft,
        ),
        pair(
            "thermal_overload".to_string(),
            &before.thermal_overload,
            &after.thermal_overload,
        ),
        format!(
            "mean_vuf,{},-,{},-",
            fmt9(vuf_before.mean),
            fmt9(vuf_after.mean)
        ),
        format!(
            "max_vuf,{},-,{},-",
            fmt9(vuf_before.max),
            fmt9(vuf_after.max)
        ),
        format!("instances,{},100,{},100", before.denominator, after.denominator),
    ];
    write_file(
        dir,
        name,
        &csv(
            "incident,uncorrected_count,uncorrected_pct,corrected_count,corrected_pct",
            rows,
        ),
    )
}

pub fn write_vuf_series(
    dir: &Path,
    name: &str,
    before: &VufSeries,
    after: &VufSeries,
) -> Result<(), CliError> {
    let rows = (0..before.t_len())
        .map(|t| {
            format!(
                "{t},{},{}",
                fmt9(before.per_step_max[t]),
                fmt9(after.per_step_max.get(t).copied().unwrap_or(f64::NAN))
            )
        })
        .collect();
    write_file(
        dir,
        name,
        &csv("t,uncorrected_max_vuf,corrected_max_vuf", rows),
    )
}
