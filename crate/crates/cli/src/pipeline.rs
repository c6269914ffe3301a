//! Lazy assembly of the analysis stages shared by the subcommands.

use std::cell::OnceCell;
use std::path::Path;

use fasgrid::activation::{
    gate_limits, price_check, resolve_prices, solve_horizon, ActivationError, ActivationOutcome,
    DispatchInputs,
};
use fasgrid::fas::FasField;
use fasgrid::metrics::ParetoPoint;
use fasgrid::netmodel::{load_flex_limits, load_profiles_with_step, NetworkModel, ProfileSet};
use fasgrid::powerflow::{scan_incidents, solve_horizon as pf_horizon, GridState, IncidentReport};
use fasgrid::sensitivity::{
    compute_all, mean_injections, SensitivityTable, ThermalSensitivityTable,
};

use crate::config::RunConfig;
use crate::CliError;

pub struct Pipeline {
    pub model: NetworkModel,
    pub profiles: ProfileSet,
    pub cfg: RunConfig,
    state: OnceCell<GridState>,
    tables: OnceCell<(SensitivityTable, ThermalSensitivityTable)>,
    fas: OnceCell<FasField>,
}

impl Pipeline {
    pub fn load(network: &Path, profiles: &Path, cfg: &RunConfig) -> Result<Pipeline, CliError> {
        let model = NetworkModel::from_file_with_base(network, cfg.s_base_kva)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let profiles = load_profiles_with_step(profiles, &model, cfg.step_minutes)
            .map_err(|e| CliError::Config(e.to_string()))?;
        for w in &profiles.warnings {
            eprintln!("warning: {w}");
        }
        Ok(Pipeline {
            model,
            profiles,
            cfg: cfg.clone(),
            state: OnceCell::new(),
            tables: OnceCell::new(),
            fas: OnceCell::new(),
        })
    }

    pub fn uncorrected(&self) -> Result<&GridState, CliError> {
        if let Some(state) = self.state.get() {
            return Ok(state);
        }
        let state = pf_horizon(&self.model, &self.profiles, &self.cfg.pf())
            .map_err(|e| CliError::Solver(e.to_string()))?;
        Ok(self.state.get_or_init(|| state))
    }

    pub fn sensitivities(
        &self,
    ) -> Result<&(SensitivityTable, ThermalSensitivityTable), CliError> {
        if let Some(tables) = self.tables.get() {
            return Ok(tables);
        }
        let base = mean_injections(&self.model, &self.profiles);
        let tables = compute_all(
            &self.model,
            &base,
            &self.cfg.perturbation_levels,
            &self.cfg.pf(),
        )
        .map_err(|e| CliError::Solver(e.to_string()))?;
        for w in &tables.0.warnings {
            eprintln!("warning: {w}");
        }
        Ok(self.tables.get_or_init(|| tables))
    }

    pub fn fas(&self) -> Result<&FasField, CliError> {
        if let Some(fas) = self.fas.get() {
            return Ok(fas);
        }
        let state = self.uncorrected()?;
        let (nvs, _) = self.sensitivities()?;
        let field = fasgrid::fas::synthesize(
            &self.model,
            state,
            nvs,
            &self.cfg.limits(),
            &self.cfg.fas(),
        )
        .map_err(|e| CliError::Solver(e.to_string()))?;
        Ok(self.fas.get_or_init(|| field))
    }

    pub fn incidents(&self, state: &GridState) -> IncidentReport {
        scan_incidents(state, &self.cfg.limits(), &self.model)
    }

    fn dispatch_parts(
        &self,
        flex_path: &Path,
    ) -> Result<
        (
            fasgrid::activation::GatedLimits,
            fasgrid::activation::CurtailmentPrices,
        ),
        CliError,
    > {
        let raw = load_flex_limits(flex_path, &self.model, &self.profiles)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let fas = self.fas()?;
        let gated = gate_limits(fas, &raw).map_err(|e| CliError::Config(e.to_string()))?;
        let limits = self.cfg.limits();
        let prices = resolve_prices(&limits, fas);
        if let Err(violations) = price_check(fas, &prices) {
            let worst = violations
                .iter()
                .map(|v| v.signal)
                .fold(f64::NEG_INFINITY, f64::max);
            return Err(CliError::Config(format!(
                "curtailment prices below activation signals at {} instances \
                 (worst signal {worst}, prices {}/{})",
                violations.len(),
                prices.load,
                prices.generation
            )));
        }
        Ok((gated, prices))
    }

    pub fn activate(&self, flex_path: &Path) -> Result<ActivationOutcome, CliError> {
        let (gated, prices) = self.dispatch_parts(flex_path)?;
        let (nvs, thermal) = self.sensitivities()?;
        let limits = self.cfg.limits();
        let inputs = DispatchInputs {
            model: &self.model,
            profiles: &self.profiles,
            fas: self.fas()?,
            gated: &gated,
            limits: &limits,
            nvs,
            thermal,
            prices,
            pf_cfg: self.cfg.pf(),
            cfg: self.cfg.activation(),
        };
        solve_horizon(&inputs).map_err(activation_error)
    }

    pub fn pareto(&self, flex_path: &Path, grid: &[f64]) -> Result<Vec<ParetoPoint>, CliError> {
        let (gated, prices) = self.dispatch_parts(flex_path)?;
        let (nvs, thermal) = self.sensitivities()?;
        let limits = self.cfg.limits();
        let inputs = DispatchInputs {
            model: &self.model,
            profiles: &self.profiles,
            fas: self.fas()?,
            gated: &gated,
            limits: &limits,
            nvs,
            thermal,
            prices,
            pf_cfg: self.cfg.pf(),
            cfg: self.cfg.activation(),
        };
        fasgrid::metrics::pareto_sweep(&inputs, grid).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn activation_error(e: ActivationError) -> CliError {
    match e {
        ActivationError::PowerFlow { .. } => CliError::Solver(e.to_string()),
        ActivationError::PriceHierarchy(_) => CliError::Config(e.to_string()),
        ActivationError::ShapeMismatch => CliError::Config(e.to_string()),
        ActivationError::Lp { .. } | ActivationError::Infeasible { .. } => {
            CliError::Infeasible(e.to_string())
        }
    }
}
