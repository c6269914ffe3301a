//! Feeder description: buses, coupled branch impedances, devices, profiles,
//! operating limits and flexibility ranges.
//!
//! The network file is a JSON document with `buses` / `branches` / `devices`
//! sections; impedances are 3x3 real and imaginary arrays in ohms. Profiles
//! and flexibility ranges are long-format CSV keyed by profile id. Per-unit
//! conversion happens once at load: voltage base is the slack bus `v_base_v`,
//! power base is `s_base_kva` per phase (default 100 kVA).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::phase::{Phase, PhaseSet};

pub type BusIdx = usize;
pub type BranchIdx = usize;
pub type DeviceIdx = usize;

pub const DEFAULT_S_BASE_KVA: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("duplicate device id {0:?}")]
    DuplicateDevice(String),
    #[error("bus {0} declares an empty phase set")]
    EmptyPhaseSet(u32),
    #[error("no slack bus declared")]
    NoSlack,
    #[error("multiple slack buses declared ({0} and {1})")]
    MultipleSlack(u32, u32),
    #[error("branch {from}-{to} references unknown bus {missing}")]
    UnknownBus { from: u32, to: u32, missing: u32 },
    #[error("branch {from}-{to}: impedance matrix is not symmetric")]
    AsymmetricImpedance { from: u32, to: u32 },
    #[error("branch {from}-{to}: non-positive series resistance on phase {phase}")]
    NonPositiveResistance { from: u32, to: u32, phase: Phase },
    #[error("branch {from}-{to}: ampacity and s_max must be positive")]
    NonPositiveRating { from: u32, to: u32 },
    #[error("device {device:?} references unknown bus {bus}")]
    DeviceUnknownBus { device: String, bus: u32 },
    #[error("device {device:?} is connected to phase {phase} absent at bus {bus}")]
    DeviceOnAbsentPhase {
        device: String,
        bus: u32,
        phase: Phase,
    },
    #[error("device {device:?}: three-phase connection requires all phases at bus {bus}")]
    ThreePhaseOnPartialBus { device: String, bus: u32 },
    #[error("device {device:?}: pv_kwp must be non-negative")]
    NegativePv { device: String },
    #[error("network is not radial: expected {expected} branches for {buses} buses, found {found}")]
    NotRadial {
        buses: usize,
        expected: usize,
        found: usize,
    },
    #[error("network contains a cycle through bus {0}")]
    Cycle(u32),
    #[error("bus {0} is not connected to the slack bus")]
    Islanded(u32),
    #[error("slack bus v_base_v must be positive")]
    BadVoltageBase,
    #[error("s_base_kva must be positive")]
    BadPowerBase,
    #[error("pv_profile contains a non-finite value at index {0}")]
    BadPvProfile(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path} row {row}: {message}")]
    Malformed {
        path: String,
        row: usize,
        message: String,
    },
    #[error("device {device:?}: no profile named {profile:?}")]
    MissingProfile { device: String, profile: String },
    #[error("profile {profile:?} has {got} entries, expected {expected}")]
    LengthMismatch {
        profile: String,
        expected: usize,
        got: usize,
    },
    #[error("profile {profile:?} has a non-finite value at step {t}")]
    NonFinite { profile: String, t: usize },
    #[error("profile {profile:?} has duplicate or non-contiguous steps near t={t}")]
    BadSteps { profile: String, t: usize },
    #[error("profile file {0} is empty")]
    Empty(String),
    #[error("pv_profile length {got} does not match horizon {expected}")]
    PvLengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum LimitsError {
    #[error("voltage band invalid: require 0 < v_min < 1-dv_perm_lo < 1 < 1+dv_perm_hi < v_max")]
    BadVoltageBand,
    #[error("dt_perm must lie strictly between 0 and 100 percent")]
    BadThermalBand,
    #[error("curtailment prices must be positive")]
    BadPrice,
}

#[derive(Debug, thiserror::Error)]
pub enum FlexError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path} row {row}: {message}")]
    Malformed {
        path: String,
        row: usize,
        message: String,
    },
    #[error("flex limits reference unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {device:?} flex bounds violate sign conventions at step {t}")]
    BadSign { device: String, t: usize },
    #[error("device {device:?} flex series has {got} steps, expected {expected}")]
    LengthMismatch {
        device: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite flex bound for device {device:?} at step {t}")]
    NonFinite { device: String, t: usize },
}

/// A network node. Phase-level quantities are indexed by [`Phase`].
#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub phases: PhaseSet,
    pub is_slack: bool,
    /// Line-to-neutral voltage base, volts.
    pub v_base_v: f64,
}

/// A series element with mutually coupled 3x3 impedance.
///
/// Rows and columns are ordered A, B, C; entries for absent phases are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: BusIdx,
    pub to: BusIdx,
    /// Raw input impedance in ohms.
    pub z_ohm: [[Complex64; 3]; 3],
    /// Impedance in per unit on the network base.
    pub z_pu: [[Complex64; 3]; 3],
    pub ampacity_a: f64,
    /// Apparent-power rating per phase, kVA.
    pub s_max_kva: f64,
    pub s_max_pu: f64,
    pub ampacity_pu: f64,
    /// Phases carried by both endpoints.
    pub phases: PhaseSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    Single(Phase),
    ThreePhase,
}

impl Connection {
    pub fn phases(self) -> PhaseSet {
        match self {
            Connection::Single(ph) => PhaseSet::single(ph),
            Connection::ThreePhase => PhaseSet::all(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceKind {
    Load,
    Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Device {
    pub id: String,
    pub bus: BusIdx,
    pub connection: Connection,
    pub kind: DeviceKind,
    pub p_profile: String,
    pub q_profile: String,
    /// Installed PV capacity, kWp (0 when none).
    pub pv_kwp: f64,
}

/// Immutable feeder model. Construction validates all structural invariants;
/// the model is safe to share across worker threads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    devices: Vec<Device>,
    slack: BusIdx,
    /// Normalized PV availability per step (empty when unused).
    pv_profile: Vec<f64>,
    s_base_kva: f64,
    v_base_v: f64,
    z_base_ohm: f64,
    i_base_a: f64,
    parent: Vec<Option<(BusIdx, BranchIdx)>>,
    children: Vec<Vec<(BusIdx, BranchIdx)>>,
    /// Buses in breadth-first order from the slack.
    order: Vec<BusIdx>,
    incident: Vec<Vec<BranchIdx>>,
    bus_index: HashMap<u32, BusIdx>,
    device_index: HashMap<String, DeviceIdx>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default)]
    name: String,
    buses: Vec<BusEntry>,
    branches: Vec<BranchEntry>,
    devices: Vec<DeviceEntry>,
    #[serde(default)]
    pv_profile: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BusEntry {
    id: u32,
    phases: String,
    #[serde(default)]
    slack: bool,
    v_base_v: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BranchEntry {
    from: u32,
    to: u32,
    r_ohm: [[f64; 3]; 3],
    x_ohm: [[f64; 3]; 3],
    ampacity_a: f64,
    s_max_kva: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DeviceEntry {
    id: String,
    bus: u32,
    phase: String,
    kind: String,
    #[serde(default)]
    p_profile: Option<String>,
    #[serde(default)]
    q_profile: Option<String>,
    #[serde(default)]
    pv_kwp: f64,
}

impl NetworkModel {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_file_with_base(path, DEFAULT_S_BASE_KVA)
    }

    pub fn from_file_with_base(
        path: impl AsRef<Path>,
        s_base_kva: f64,
    ) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, s_base_kva).map_err(|e| match e {
            ModelError::Parse { source, .. } => ModelError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json_str(text: &str, s_base_kva: f64) -> Result<Self, ModelError> {
        let file: NetworkFile = serde_json::from_str(text).map_err(|source| ModelError::Parse {
            path: "<string>".to_string(),
            source,
        })?;
        Self::from_parts(file, s_base_kva)
    }

    fn from_parts(file: NetworkFile, s_base_kva: f64) -> Result<Self, ModelError> {
        if !(s_base_kva > 0.0) {
            return Err(ModelError::BadPowerBase);
        }

        let mut bus_index: HashMap<u32, BusIdx> = HashMap::new();
        let mut buses: Vec<Bus> = Vec::with_capacity(file.buses.len());
        let mut slack: Option<BusIdx> = None;
        for entry in &file.buses {
            if bus_index.contains_key(&entry.id) {
                return Err(ModelError::DuplicateBus(entry.id));
            }
            let phases =
                PhaseSet::parse(&entry.phases).ok_or(ModelError::EmptyPhaseSet(entry.id))?;
            if entry.slack {
                if let Some(prev) = slack {
                    return Err(ModelError::MultipleSlack(buses[prev].id, entry.id));
                }
                slack = Some(buses.len());
            }
            bus_index.insert(entry.id, buses.len());
            buses.push(Bus {
                id: entry.id,
                phases,
                is_slack: entry.slack,
                v_base_v: entry.v_base_v,
            });
        }
        let slack = slack.ok_or(ModelError::NoSlack)?;
        let v_base_v = buses[slack].v_base_v;
        if !(v_base_v > 0.0) {
            return Err(ModelError::BadVoltageBase);
        }
        let z_base_ohm = v_base_v * v_base_v / (s_base_kva * 1e3);
        let i_base_a = s_base_kva * 1e3 / v_base_v;

        let mut branches = Vec::with_capacity(file.branches.len());
        for entry in &file.branches {
            let from = *bus_index
                .get(&entry.from)
                .ok_or(ModelError::UnknownBus {
                    from: entry.from,
                    to: entry.to,
                    missing: entry.from,
                })?;
            let to = *bus_index.get(&entry.to).ok_or(ModelError::UnknownBus {
                from: entry.from,
                to: entry.to,
                missing: entry.to,
            })?;
            let mut z_ohm = [[Complex64::new(0.0, 0.0); 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    z_ohm[r][c] = Complex64::new(entry.r_ohm[r][c], entry.x_ohm[r][c]);
                }
            }
            for r in 0..3 {
                for c in (r + 1)..3 {
                    if (z_ohm[r][c] - z_ohm[c][r]).norm() > 1e-12 {
                        return Err(ModelError::AsymmetricImpedance {
                            from: entry.from,
                            to: entry.to,
                        });
                    }
                }
            }
            let phases = buses[from].phases.intersection(buses[to].phases);
            for ph in phases.iter() {
                if z_ohm[ph.index()][ph.index()].re <= 0.0 {
                    return Err(ModelError::NonPositiveResistance {
                        from: entry.from,
                        to: entry.to,
                        phase: ph,
                    });
                }
            }
            if entry.ampacity_a <= 0.0 || entry.s_max_kva <= 0.0 {
                return Err(ModelError::NonPositiveRating {
                    from: entry.from,
                    to: entry.to,
                });
            }
            let mut z_pu = [[Complex64::new(0.0, 0.0); 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    z_pu[r][c] = z_ohm[r][c] / z_base_ohm;
                }
            }
            branches.push(Branch {
                from,
                to,
                z_ohm,
                z_pu,
                ampacity_a: entry.ampacity_a,
                s_max_kva: entry.s_max_kva,
                s_max_pu: entry.s_max_kva / s_base_kva,
                ampacity_pu: entry.ampacity_a / i_base_a,
                phases,
            });
        }

        let mut device_index: HashMap<String, DeviceIdx> = HashMap::new();
        let mut devices = Vec::with_capacity(file.devices.len());
        for entry in &file.devices {
            if device_index.contains_key(&entry.id) {
                return Err(ModelError::DuplicateDevice(entry.id.clone()));
            }
            let bus = *bus_index
                .get(&entry.bus)
                .ok_or_else(|| ModelError::DeviceUnknownBus {
                    device: entry.id.clone(),
                    bus: entry.bus,
                })?;
            let connection = match entry.phase.trim() {
                "ABC" | "abc" => Connection::ThreePhase,
                s => Connection::Single(Phase::parse(s).ok_or_else(|| {
                    ModelError::DeviceOnAbsentPhase {
                        device: entry.id.clone(),
                        bus: entry.bus,
                        phase: Phase::A,
                    }
                })?),
            };
            match connection {
                Connection::Single(ph) => {
                    if !buses[bus].phases.contains(ph) {
                        return Err(ModelError::DeviceOnAbsentPhase {
                            device: entry.id.clone(),
                            bus: entry.bus,
                            phase: ph,
                        });
                    }
                }
                Connection::ThreePhase => {
                    if !buses[bus].phases.is_full() {
                        return Err(ModelError::ThreePhaseOnPartialBus {
                            device: entry.id.clone(),
                            bus: entry.bus,
                        });
                    }
                }
            }
            let kind = match entry.kind.trim() {
                "generator" | "gen" => DeviceKind::Generator,
                _ => DeviceKind::Load,
            };
            if entry.pv_kwp < 0.0 {
                return Err(ModelError::NegativePv {
                    device: entry.id.clone(),
                });
            }
            device_index.insert(entry.id.clone(), devices.len());
            devices.push(Device {
                id: entry.id.clone(),
                bus,
                connection,
                kind,
                p_profile: entry.p_profile.clone().unwrap_or_else(|| entry.id.clone()),
                q_profile: entry.q_profile.clone().unwrap_or_else(|| entry.id.clone()),
                pv_kwp: entry.pv_kwp,
            });
        }

        for (i, v) in file.pv_profile.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::BadPvProfile(i));
            }
        }

        // Radial topology: BFS from the slack assigns one parent per bus.
        let n = buses.len();
        if branches.len() != n.saturating_sub(1) {
            return Err(ModelError::NotRadial {
                buses: n,
                expected: n.saturating_sub(1),
                found: branches.len(),
            });
        }
        let mut incident: Vec<Vec<BranchIdx>> = vec![Vec::new(); n];
        for (bi, br) in branches.iter().enumerate() {
            incident[br.from].push(bi);
            incident[br.to].push(bi);
        }
        let mut parent: Vec<Option<(BusIdx, BranchIdx)>> = vec![None; n];
        let mut children: Vec<Vec<(BusIdx, BranchIdx)>> = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        visited[slack] = true;
        queue.push_back(slack);
        while let Some(b) = queue.pop_front() {
            order.push(b);
            for &bi in &incident[b] {
                let br = &branches[bi];
                let other = if br.from == b { br.to } else { br.from };
                if other == b {
                    return Err(ModelError::Cycle(buses[b].id));
                }
                if visited[other] {
                    if parent[b].map(|(p, _)| p) != Some(other) {
                        return Err(ModelError::Cycle(buses[other].id));
                    }
                    continue;
                }
                visited[other] = true;
                parent[other] = Some((b, bi));
                children[b].push((other, bi));
                queue.push_back(other);
            }
        }
        if let Some(b) = (0..n).find(|&b| !visited[b]) {
            return Err(ModelError::Islanded(buses[b].id));
        }

        // Orient every branch parent -> child so currents accumulate leafward.
        for (bi, br) in branches.iter_mut().enumerate() {
            if let Some((p, pb)) = parent[br.to] {
                if p == br.from && pb == bi {
                    continue;
                }
            }
            std::mem::swap(&mut br.from, &mut br.to);
        }

        Ok(NetworkModel {
            name: file.name,
            buses,
            branches,
            devices,
            slack,
            pv_profile: file.pv_profile,
            s_base_kva,
            v_base_v,
            z_base_ohm,
            i_base_a,
            parent,
            children,
            order,
            incident,
            bus_index,
            device_index,
        })
    }

    /// Serializes the model back to its file form (raw ohm/kVA values).
    pub fn to_json_string(&self) -> String {
        let file = NetworkFile {
            name: self.name.clone(),
            buses: self
                .buses
                .iter()
                .map(|b| BusEntry {
                    id: b.id,
                    phases: b.phases.to_string(),
                    slack: b.is_slack,
                    v_base_v: b.v_base_v,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| {
                    let mut r = [[0.0; 3]; 3];
                    let mut x = [[0.0; 3]; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            r[i][j] = br.z_ohm[i][j].re;
                            x[i][j] = br.z_ohm[i][j].im;
                        }
                    }
                    BranchEntry {
                        from: self.buses[br.from].id,
                        to: self.buses[br.to].id,
                        r_ohm: r,
                        x_ohm: x,
                        ampacity_a: br.ampacity_a,
                        s_max_kva: br.s_max_kva,
                    }
                })
                .collect(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceEntry {
                    id: d.id.clone(),
                    bus: self.buses[d.bus].id,
                    phase: match d.connection {
                        Connection::Single(ph) => ph.letter().to_string(),
                        Connection::ThreePhase => "ABC".to_string(),
                    },
                    kind: match d.kind {
                        DeviceKind::Load => "load".to_string(),
                        DeviceKind::Generator => "generator".to_string(),
                    },
                    p_profile: Some(d.p_profile.clone()),
                    q_profile: Some(d.q_profile.clone()),
                    pv_kwp: d.pv_kwp,
                })
                .collect(),
            pv_profile: self.pv_profile.clone(),
        };
        serde_json::to_string_pretty(&file).expect("network file serialization")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn slack(&self) -> BusIdx {
        self.slack
    }

    pub fn s_base_kva(&self) -> f64 {
        self.s_base_kva
    }

    pub fn v_base_v(&self) -> f64 {
        self.v_base_v
    }

    pub fn z_base_ohm(&self) -> f64 {
        self.z_base_ohm
    }

    pub fn pv_profile(&self) -> &[f64] {
        &self.pv_profile
    }

    pub fn bus_idx(&self, id: u32) -> Option<BusIdx> {
        self.bus_index.get(&id).copied()
    }

    pub fn device_idx(&self, id: &str) -> Option<DeviceIdx> {
        self.device_index.get(id).copied()
    }

    pub fn parent(&self, bus: BusIdx) -> Option<(BusIdx, BranchIdx)> {
        self.parent[bus]
    }

    pub fn children(&self, bus: BusIdx) -> &[(BusIdx, BranchIdx)] {
        &self.children[bus]
    }

    pub fn bfs_order(&self) -> &[BusIdx] {
        &self.order
    }

    pub fn incident_branches(&self, bus: BusIdx) -> &[BranchIdx] {
        &self.incident[bus]
    }

    /// Phase-node pairs hosting at least one device, in (bus, phase) order.
    pub fn device_phase_nodes(&self) -> Vec<(BusIdx, Phase)> {
        let mut present = vec![false; self.buses.len() * 3];
        for d in &self.devices {
            for ph in d.connection.phases().iter() {
                present[d.bus * 3 + ph.index()] = true;
            }
        }
        let mut out = Vec::new();
        for b in 0..self.buses.len() {
            for ph in Phase::ALL {
                if present[b * 3 + ph.index()] {
                    out.push((b, ph));
                }
            }
        }
        out
    }

    /// Kilowatts to per unit on the network power base.
    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }

    /// Net complex injections (consumption-positive, per unit) at step `t`.
    pub fn injections_at(&self, profiles: &ProfileSet, t: usize) -> Vec<[Complex64; 3]> {
        let mut inj = vec![[Complex64::new(0.0, 0.0); 3]; self.buses.len()];
        for (di, d) in self.devices.iter().enumerate() {
            let p = self.kw_to_pu(profiles.p_kw(di, t));
            let q = self.kw_to_pu(profiles.q_kvar(di, t));
            match d.connection {
                Connection::Single(ph) => {
                    inj[d.bus][ph.index()] += Complex64::new(p, q);
                }
                Connection::ThreePhase => {
                    let share = Complex64::new(p / 3.0, q / 3.0);
                    for ph in Phase::ALL {
                        inj[d.bus][ph.index()] += share;
                    }
                }
            }
        }
        inj
    }

    /// Gross load and generation split per (bus, phase) at step `t`, per unit.
    ///
    /// The net profile is consumption-positive; PV output reconstructed from
    /// `pv_kwp` and the normalized PV availability series backs out the gross
    /// load so curtailment bounds can be enforced separately.
    pub fn gross_at(&self, profiles: &ProfileSet, t: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let avail = self.pv_profile.get(t).copied().unwrap_or(0.0);
        let mut load = vec![[0.0; 3]; self.buses.len()];
        let mut gen = vec![[0.0; 3]; self.buses.len()];
        for (di, d) in self.devices.iter().enumerate() {
            let net = self.kw_to_pu(profiles.p_kw(di, t));
            let pv = self.kw_to_pu(d.pv_kwp) * avail;
            match d.connection {
                Connection::Single(ph) => {
                    let l = (net + pv).max(0.0);
                    load[d.bus][ph.index()] += l;
                    gen[d.bus][ph.index()] += l - net;
                }
                Connection::ThreePhase => {
                    let l = (net / 3.0 + pv / 3.0).max(0.0);
                    for ph in Phase::ALL {
                        load[d.bus][ph.index()] += l;
                        gen[d.bus][ph.index()] += l - net / 3.0;
                    }
                }
            }
        }
        (load, gen)
    }
}

/// Horizon of device P/Q series, kilowatts, consumption-positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSet {
    t_len: usize,
    pub step_minutes: f64,
    /// [device][t]
    p_kw: Vec<Vec<f64>>,
    q_kvar: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl ProfileSet {
    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn p_kw(&self, device: DeviceIdx, t: usize) -> f64 {
        self.p_kw[device][t]
    }

    pub fn q_kvar(&self, device: DeviceIdx, t: usize) -> f64 {
        self.q_kvar[device][t]
    }

    pub fn series_p(&self, device: DeviceIdx) -> &[f64] {
        &self.p_kw[device]
    }

    pub fn series_q(&self, device: DeviceIdx) -> &[f64] {
        &self.q_kvar[device]
    }

    /// Builds a set directly from per-device series (tests and tooling).
    pub fn from_series(
        model: &NetworkModel,
        p_kw: Vec<Vec<f64>>,
        q_kvar: Vec<Vec<f64>>,
        step_minutes: f64,
    ) -> ProfileSet {
        assert_eq!(p_kw.len(), model.n_devices());
        assert_eq!(q_kvar.len(), model.n_devices());
        let t_len = p_kw.first().map(|s| s.len()).unwrap_or(0);
        ProfileSet {
            t_len,
            step_minutes,
            p_kw,
            q_kvar,
            warnings: Vec::new(),
        }
    }
}

/// Loads long-format profile CSV (`device_id,t,p_kw,q_kvar`).
///
/// Validates that every referenced profile exists, covers a contiguous
/// horizon of equal length everywhere, and contains only finite values.
/// Profiles not referenced by any device are skipped with a warning.
pub fn load_profiles(
    path: impl AsRef<Path>,
    model: &NetworkModel,
) -> Result<ProfileSet, ProfileError> {
    load_profiles_with_step(path, model, 60.0)
}

pub fn load_profiles_with_step(
    path: impl AsRef<Path>,
    model: &NetworkModel,
    step_minutes: f64,
) -> Result<ProfileSet, ProfileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_profiles_str(&text, model, step_minutes, &path.display().to_string())
}

pub fn load_profiles_str(
    text: &str,
    model: &NetworkModel,
    step_minutes: f64,
    origin: &str,
) -> Result<ProfileSet, ProfileError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    // (t, p, q) triples per profile id, in file order.
    let mut raw: HashMap<String, Vec<(usize, f64, f64)>> = HashMap::new();
    let mut any = false;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ProfileError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: e.to_string(),
        })?;
        let field = |i: usize| -> Result<&str, ProfileError> {
            record.get(i).ok_or_else(|| ProfileError::Malformed {
                path: origin.to_string(),
                row: row + 2,
                message: format!("missing column {i}"),
            })
        };
        let id = field(0)?.to_string();
        let t: usize = field(1)?.parse().map_err(|e| ProfileError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: format!("bad step index: {e}"),
        })?;
        let p: f64 = field(2)?.parse().map_err(|e| ProfileError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: format!("bad p_kw: {e}"),
        })?;
        let q: f64 = field(3)?.parse().map_err(|e| ProfileError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: format!("bad q_kvar: {e}"),
        })?;
        raw.entry(id).or_default().push((t, p, q));
        any = true;
    }
    if !any {
        return Err(ProfileError::Empty(origin.to_string()));
    }

    let mut series: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (id, mut rows) in raw {
        rows.sort_by_key(|r| r.0);
        let mut p = Vec::with_capacity(rows.len());
        let mut q = Vec::with_capacity(rows.len());
        for (i, (t, pv, qv)) in rows.iter().enumerate() {
            if *t != i {
                return Err(ProfileError::BadSteps {
                    profile: id.clone(),
                    t: *t,
                });
            }
            if !pv.is_finite() || !qv.is_finite() {
                return Err(ProfileError::NonFinite {
                    profile: id.clone(),
                    t: *t,
                });
            }
            p.push(*pv);
            q.push(*qv);
        }
        series.insert(id, (p, q));
    }

    // Horizon length comes from the first referenced profile.
    let mut t_len: Option<usize> = None;
    let mut referenced: std::collections::HashSet<&str> = std::collections::HashSet::new();
    let mut p_out = Vec::with_capacity(model.n_devices());
    let mut q_out = Vec::with_capacity(model.n_devices());
    for d in model.devices() {
        let (p, _) = series
            .get(&d.p_profile)
            .ok_or_else(|| ProfileError::MissingProfile {
                device: d.id.clone(),
                profile: d.p_profile.clone(),
            })?;
        let (_, q) = series
            .get(&d.q_profile)
            .ok_or_else(|| ProfileError::MissingProfile {
                device: d.id.clone(),
                profile: d.q_profile.clone(),
            })?;
        let expected = *t_len.get_or_insert(p.len());
        if p.len() != expected {
            return Err(ProfileError::LengthMismatch {
                profile: d.p_profile.clone(),
                expected,
                got: p.len(),
            });
        }
        if q.len() != expected {
            return Err(ProfileError::LengthMismatch {
                profile: d.q_profile.clone(),
                expected,
                got: q.len(),
            });
        }
        referenced.insert(d.p_profile.as_str());
        referenced.insert(d.q_profile.as_str());
        p_out.push(p.clone());
        q_out.push(q.clone());
    }
    let t_len = t_len.unwrap_or(0);

    let mut warnings: Vec<String> = series
        .keys()
        .filter(|k| !referenced.contains(k.as_str()))
        .map(|k| format!("profile {k:?} is not referenced by any device; ignored"))
        .collect();
    warnings.sort();

    if !model.pv_profile().is_empty() && model.pv_profile().len() != t_len {
        return Err(ProfileError::PvLengthMismatch {
            expected: t_len,
            got: model.pv_profile().len(),
        });
    }

    Ok(ProfileSet {
        t_len,
        step_minutes,
        p_kw: p_out,
        q_kvar: q_out,
        warnings,
    })
}

/// Voltage and thermal deadbands plus curtailment prices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingLimits {
    /// Hard lower voltage bound, per unit.
    pub v_min: f64,
    /// Hard upper voltage bound, per unit.
    pub v_max: f64,
    /// Deadband half-width below 1.0 pu.
    pub dv_perm_lo: f64,
    /// Deadband half-width above 1.0 pu.
    pub dv_perm_hi: f64,
    /// Permissible thermal loading, percent of rating.
    pub dt_perm: f64,
    /// Load curtailment price; derived from saturation levels when None.
    pub curt_price_p: Option<f64>,
    /// Generation curtailment price; derived when None.
    pub curt_price_g: Option<f64>,
}

impl Default for OperatingLimits {
    fn default() -> Self {
        OperatingLimits {
            v_min: 0.90,
            v_max: 1.10,
            dv_perm_lo: 0.04,
            dv_perm_hi: 0.03,
            dt_perm: 80.0,
            curt_price_p: None,
            curt_price_g: None,
        }
    }
}

impl OperatingLimits {
    pub fn validate(&self) -> Result<(), LimitsError> {
        let lo_edge = 1.0 - self.dv_perm_lo;
        let hi_edge = 1.0 + self.dv_perm_hi;
        if !(self.v_min > 0.0 && self.v_min < lo_edge && lo_edge < 1.0 && 1.0 < hi_edge
            && hi_edge < self.v_max)
        {
            return Err(LimitsError::BadVoltageBand);
        }
        if !(self.dt_perm > 0.0 && self.dt_perm < 100.0) {
            return Err(LimitsError::BadThermalBand);
        }
        for p in [self.curt_price_p, self.curt_price_g].into_iter().flatten() {
            if !(p > 0.0) {
                return Err(LimitsError::BadPrice);
            }
        }
        Ok(())
    }

    pub fn soft_low_edge(&self) -> f64 {
        1.0 - self.dv_perm_lo
    }

    pub fn soft_high_edge(&self) -> f64 {
        1.0 + self.dv_perm_hi
    }
}

/// Flexibility ranges per (phase, node, time), per unit, dense over the grid.
///
/// Sign conventions: `p_max`/`q_max` >= 0 bound the ramp-down (injection)
/// direction, `p_min`/`q_min` <= 0 bound the ramp-up (consumption) direction.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexLimits {
    t_len: usize,
    n_bus: usize,
    p_max: Vec<f64>,
    p_min: Vec<f64>,
    q_max: Vec<f64>,
    q_min: Vec<f64>,
}

impl FlexLimits {
    pub fn zeros(t_len: usize, n_bus: usize) -> FlexLimits {
        let n = t_len * n_bus * 3;
        FlexLimits {
            t_len,
            n_bus,
            p_max: vec![0.0; n],
            p_min: vec![0.0; n],
            q_max: vec![0.0; n],
            q_min: vec![0.0; n],
        }
    }

    #[inline]
    fn at(&self, t: usize, bus: BusIdx, ph: Phase) -> usize {
        (t * self.n_bus + bus) * 3 + ph.index()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn p_max(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.p_max[self.at(t, bus, ph)]
    }

    pub fn p_min(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.p_min[self.at(t, bus, ph)]
    }

    pub fn q_max(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.q_max[self.at(t, bus, ph)]
    }

    pub fn q_min(&self, t: usize, bus: BusIdx, ph: Phase) -> f64 {
        self.q_min[self.at(t, bus, ph)]
    }

    pub fn add(&mut self, t: usize, bus: BusIdx, ph: Phase, pmax: f64, pmin: f64, qmax: f64, qmin: f64) {
        let i = self.at(t, bus, ph);
        self.p_max[i] += pmax;
        self.p_min[i] += pmin;
        self.q_max[i] += qmax;
        self.q_min[i] += qmin;
    }

    /// Scales every bound uniformly (bound-monotonicity experiments).
    pub fn scaled(&self, factor: f64) -> FlexLimits {
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect();
        FlexLimits {
            t_len: self.t_len,
            n_bus: self.n_bus,
            p_max: scale(&self.p_max),
            p_min: scale(&self.p_min),
            q_max: scale(&self.q_max),
            q_min: scale(&self.q_min),
        }
    }
}

/// Loads flexibility ranges from long-format CSV
/// (`device_id,t,p_max_kw,p_min_kw,q_max_kvar,q_min_kvar`).
pub fn load_flex_limits(
    path: impl AsRef<Path>,
    model: &NetworkModel,
    profiles: &ProfileSet,
) -> Result<FlexLimits, FlexError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| FlexError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_flex_limits_str(&text, model, profiles, &path.display().to_string())
}

pub fn load_flex_limits_str(
    text: &str,
    model: &NetworkModel,
    profiles: &ProfileSet,
    origin: &str,
) -> Result<FlexLimits, FlexError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let t_len = profiles.t_len();
    let mut per_device: HashMap<DeviceIdx, Vec<(usize, [f64; 4])>> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FlexError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: e.to_string(),
        })?;
        let get = |i: usize| -> Result<&str, FlexError> {
            record.get(i).ok_or_else(|| FlexError::Malformed {
                path: origin.to_string(),
                row: row + 2,
                message: format!("missing column {i}"),
            })
        };
        let id = get(0)?;
        let di = model
            .device_idx(id)
            .ok_or_else(|| FlexError::UnknownDevice(id.to_string()))?;
        let parse = |s: &str, what: &str| -> Result<f64, FlexError> {
            s.parse().map_err(|e| FlexError::Malformed {
                path: origin.to_string(),
                row: row + 2,
                message: format!("bad {what}: {e}"),
            })
        };
        let t: usize = get(1)?.parse().map_err(|e| FlexError::Malformed {
            path: origin.to_string(),
            row: row + 2,
            message: format!("bad step index: {e}"),
        })?;
        let vals = [
            parse(get(2)?, "p_max_kw")?,
            parse(get(3)?, "p_min_kw")?,
            parse(get(4)?, "q_max_kvar")?,
            parse(get(5)?, "q_min_kvar")?,
        ];
        per_device.entry(di).or_default().push((t, vals));
    }

    let mut flex = FlexLimits::zeros(t_len, model.n_buses());
    let mut device_ids: Vec<DeviceIdx> = per_device.keys().copied().collect();
    device_ids.sort_unstable();
    for di in device_ids {
        let mut rows = per_device.remove(&di).unwrap();
        rows.sort_by_key(|r| r.0);
        let device = &model.devices()[di];
        if rows.len() != t_len {
            return Err(FlexError::LengthMismatch {
                device: device.id.clone(),
                expected: t_len,
                got: rows.len(),
            });
        }
        for (i, (t, vals)) in rows.iter().enumerate() {
            if *t != i {
                return Err(FlexError::LengthMismatch {
                    device: device.id.clone(),
                    expected: t_len,
                    got: rows.len(),
                });
            }
            let [pmax, pmin, qmax, qmin] = *vals;
            if !(pmax.is_finite() && pmin.is_finite() && qmax.is_finite() && qmin.is_finite()) {
                return Err(FlexError::NonFinite {
                    device: device.id.clone(),
                    t: *t,
                });
            }
            if pmax < 0.0 || pmin > 0.0 || qmax < 0.0 || qmin > 0.0 {
                return Err(FlexError::BadSign {
                    device: device.id.clone(),
                    t: *t,
                });
            }
            let to_pu = |kw: f64| model.kw_to_pu(kw);
            match device.connection {
                Connection::Single(ph) => flex.add(
                    *t,
                    device.bus,
                    ph,
                    to_pu(pmax),
                    to_pu(pmin),
                    to_pu(qmax),
                    to_pu(qmin),
                ),
                Connection::ThreePhase => {
                    for ph in Phase::ALL {
                        flex.add(
                            *t,
                            device.bus,
                            ph,
                            to_pu(pmax) / 3.0,
                            to_pu(pmin) / 3.0,
                            to_pu(qmax) / 3.0,
                            to_pu(qmin) / 3.0,
                        );
                    }
                }
            }
        }
    }
    Ok(flex)
}

impl fmt::Display for NetworkModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} buses, {} branches, {} devices)",
            if self.name.is_empty() { "network" } else { &self.name },
            self.buses.len(),
            self.branches.len(),
            self.devices.len()
        )
    }
}
