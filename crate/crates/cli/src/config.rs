//! Run configuration: defaults, optional JSON config file, CLI overrides.

use serde::Deserialize;
use std::path::Path;

use fasgrid::activation::ActivationConfig;
use fasgrid::fas::FasConfig;
use fasgrid::netmodel::OperatingLimits;
use fasgrid::powerflow::PowerFlowConfig;

use crate::{CliError, FasFlags, FlexArgs};

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    s_base_kva: Option<f64>,
    step_minutes: Option<f64>,
    v_min: Option<f64>,
    v_max: Option<f64>,
    dv_perm_lo: Option<f64>,
    dv_perm_hi: Option<f64>,
    dt_perm: Option<f64>,
    curt_price_p: Option<f64>,
    curt_price_g: Option<f64>,
    tol_pf: Option<f64>,
    max_iter_pf: Option<usize>,
    perturbation_levels: Option<Vec<f64>>,
    kappa_v: Option<f64>,
    kappa_t: Option<f64>,
    gv: Option<f64>,
    trust: Option<f64>,
    max_slp_iter: Option<usize>,
    knee_threshold: Option<f64>,
    weighted_current: Option<bool>,
    imb_sign_normalized: Option<bool>,
}

/// Fully resolved configuration for one invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub s_base_kva: f64,
    pub step_minutes: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub dv_perm_lo: f64,
    pub dv_perm_hi: f64,
    pub dt_perm: f64,
    pub curt_price_p: Option<f64>,
    pub curt_price_g: Option<f64>,
    pub tol_pf: f64,
    pub max_iter_pf: usize,
    pub perturbation_levels: Vec<f64>,
    pub kappa_v: f64,
    pub kappa_t: f64,
    pub gv: f64,
    pub trust: f64,
    pub max_slp_iter: usize,
    pub knee_threshold: f64,
    pub weighted_current: bool,
    pub imb_sign_normalized: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let limits = OperatingLimits::default();
        let pf = PowerFlowConfig::default();
        let act = ActivationConfig::default();
        RunConfig {
            s_base_kva: fasgrid::netmodel::DEFAULT_S_BASE_KVA,
            step_minutes: 60.0,
            v_min: limits.v_min,
            v_max: limits.v_max,
            dv_perm_lo: limits.dv_perm_lo,
            dv_perm_hi: limits.dv_perm_hi,
            dt_perm: limits.dt_perm,
            curt_price_p: None,
            curt_price_g: None,
            tol_pf: pf.tol,
            max_iter_pf: pf.max_iter,
            perturbation_levels: vec![0.001, 0.002, 0.005],
            kappa_v: 1.0,
            kappa_t: 1.0,
            gv: act.gv,
            trust: act.trust,
            max_slp_iter: act.max_iterations,
            knee_threshold: 0.8,
            weighted_current: false,
            imb_sign_normalized: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let file: ConfigFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))?;
            macro_rules! take {
                ($($field:ident),*) => {
                    $(if let Some(v) = file.$field { cfg.$field = v; })*
                };
            }
            take!(
                s_base_kva,
                step_minutes,
                v_min,
                v_max,
                dv_perm_lo,
                dv_perm_hi,
                dt_perm,
                tol_pf,
                max_iter_pf,
                perturbation_levels,
                kappa_v,
                kappa_t,
                gv,
                trust,
                max_slp_iter,
                knee_threshold,
                weighted_current,
                imb_sign_normalized
            );
            cfg.curt_price_p = file.curt_price_p.or(cfg.curt_price_p);
            cfg.curt_price_g = file.curt_price_g.or(cfg.curt_price_g);
        }
        cfg.limits()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.perturbation_levels.is_empty() {
            return Err(CliError::Config("perturbation_levels is empty".into()));
        }
        Ok(cfg)
    }

    pub fn with_fas_flags(mut self, flags: &crate::FasFlags) -> RunConfig {
        let FasFlags {
            weighted_current,
            imb_sign_normalized,
        } = flags;
        self.weighted_current |= weighted_current;
        self.imb_sign_normalized |= imb_sign_normalized;
        self
    }

    pub fn with_flex_args(mut self, args: &FlexArgs) -> RunConfig {
        if let Some(gv) = args.gv {
            self.gv = gv;
        }
        if let Some(trust) = args.trust {
            self.trust = trust;
        }
        if let Some(max_iter) = args.max_iter {
            self.max_slp_iter = max_iter;
        }
        self
    }

    pub fn limits(&self) -> OperatingLimits {
        OperatingLimits {
            v_min: self.v_min,
            v_max: self.v_max,
            dv_perm_lo: self.dv_perm_lo,
            dv_perm_hi: self.dv_perm_hi,
            dt_perm: self.dt_perm,
            curt_price_p: self.curt_price_p,
            curt_price_g: self.curt_price_g,
        }
    }

    pub fn pf(&self) -> PowerFlowConfig {
        PowerFlowConfig {
            tol: self.tol_pf,
            max_iter: self.max_iter_pf,
        }
    }

    pub fn fas(&self) -> FasConfig {
        FasConfig {
            kappa_v: self.kappa_v,
            kappa_t: self.kappa_t,
            weighted_current: self.weighted_current,
            imb_sign_normalized: self.imb_sign_normalized,
            ..FasConfig::default()
        }
    }

    pub fn activation(&self) -> ActivationConfig {
        ActivationConfig {
            gv: self.gv,
            trust: self.trust,
            max_iterations: self.max_slp_iter,
            ..ActivationConfig::default()
        }
    }
}
