//! Per-unit radial network model and backward-forward sweep power flow.
//!
//! Buses carry constant-power loads; prosumer injections are unity power
//! factor active power. The slack bus is held at 1.0 pu, 0 rad and supplies
//! whatever mismatch remains.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bus {}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Load,
}

fn default_nominal_kv() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    #[serde(default)]
    pub p_load_kw: f64,
    #[serde(default)]
    pub q_load_kvar: f64,
    #[serde(default = "default_nominal_kv")]
    pub nominal_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default)]
    pub name: String,
    pub base_kva: f64,
    pub base_kv: f64,
    #[serde(rename = "bus", default)]
    pub buses: Vec<Bus>,
    #[serde(rename = "branch", default)]
    pub branches: Vec<Branch>,
}

impl NetworkModel {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Base impedance in ohms.
    pub fn base_ohm(&self) -> f64 {
        self.base_kv * self.base_kv * 1000.0 / self.base_kva
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid network base: {0}")]
    InvalidBase(String),
    #[error("{0} defined more than once")]
    DuplicateBus(BusId),
    #[error("{0} has a negative or non-finite load")]
    InvalidLoad(BusId),
    #[error("network has no slack bus")]
    NoSlack,
    #[error("network has several slack buses: {0:?}")]
    MultipleSlack(Vec<BusId>),
    #[error("branch {from}-{to} references unknown {bus}")]
    UnknownBranchBus { from: BusId, to: BusId, bus: BusId },
    #[error("branch {from}-{to} connects a bus to itself")]
    SelfLoop { from: BusId, to: BusId },
    #[error("branch {from}-{to} has negative or non-finite impedance")]
    InvalidImpedance { from: BusId, to: BusId },
    #[error("branch {from}-{to} has zero impedance")]
    ZeroImpedance { from: BusId, to: BusId },
    #[error("branch {from}-{to} closes a loop; the network must be radial")]
    Cycle { from: BusId, to: BusId },
    #[error("{0} is not connected to the slack bus")]
    Disconnected(BusId),
    #[error("injection references unknown {0}")]
    UnknownBus(BusId),
    #[error("the slack {0} cannot carry a fixed injection or demand")]
    SlackInjection(BusId),
    #[error("{bus}: injected or demanded power {value} kW is invalid")]
    InvalidInjection { bus: BusId, value: f64 },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error("power flow did not converge in {iterations} iterations (last voltage change {last_change:.3e} pu)")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        last: Box<PowerFlowSolution>,
    },
}

/// A network that passed topology checks, with its traversal order from the
/// slack cached. Immutable and shareable between solves.
#[derive(Debug, Clone)]
pub struct ValidatedNetwork {
    model: NetworkModel,
    index: BTreeMap<BusId, usize>,
    slack: usize,
    /// Bus indices in breadth-first order from the slack.
    order: Vec<usize>,
    /// For every non-slack bus: (parent bus index, branch index).
    parent: Vec<Option<(usize, usize)>>,
    z_pu: Vec<Complex64>,
}

/// Checks that the network is a tree rooted at a single slack bus.
pub fn validate_network(network: &NetworkModel) -> Result<ValidatedNetwork, GridError> {
    ValidatedNetwork::new(network.clone())
}

impl ValidatedNetwork {
    pub fn new(model: NetworkModel) -> Result<Self, GridError> {
        if !(model.base_kva.is_finite() && model.base_kva > 0.0) {
            return Err(GridError::InvalidBase(format!("base_kva = {}", model.base_kva)));
        }
        if !(model.base_kv.is_finite() && model.base_kv > 0.0) {
            return Err(GridError::InvalidBase(format!("base_kv = {}", model.base_kv)));
        }

        let mut index = BTreeMap::new();
        for (i, bus) in model.buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return Err(GridError::DuplicateBus(bus.id));
            }
            let load_ok = |v: f64| v.is_finite() && v >= 0.0;
            if !load_ok(bus.p_load_kw) || !load_ok(bus.q_load_kvar) {
                return Err(GridError::InvalidLoad(bus.id));
            }
        }
        let slacks: Vec<BusId> = model
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        let slack = match slacks.as_slice() {
            [] => return Err(GridError::NoSlack),
            [only] => index[only],
            _ => return Err(GridError::MultipleSlack(slacks)),
        };

        let n = model.buses.len();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let base_ohm = model.base_ohm();
        let mut z_pu = Vec::with_capacity(model.branches.len());
        for (k, br) in model.branches.iter().enumerate() {
            let (from, to) = (br.from, br.to);
            let lookup = |bus: BusId| {
                index
                    .get(&bus)
                    .copied()
                    .ok_or(GridError::UnknownBranchBus { from, to, bus })
            };
            let (a, b) = (lookup(from)?, lookup(to)?);
            if a == b {
                return Err(GridError::SelfLoop { from, to });
            }
            let valid = |v: f64| v.is_finite() && v >= 0.0;
            if !valid(br.r_ohm) || !valid(br.x_ohm) {
                return Err(GridError::InvalidImpedance { from, to });
            }
            if br.r_ohm == 0.0 && br.x_ohm == 0.0 {
                return Err(GridError::ZeroImpedance { from, to });
            }
            z_pu.push(Complex64::new(br.r_ohm, br.x_ohm) / base_ohm);
            adjacency[a].push((b, k));
            adjacency[b].push((a, k));
        }

        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([slack]);
        visited[slack] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let via = parent[u].map(|(_, k)| k);
            for &(v, k) in &adjacency[u] {
                if Some(k) == via {
                    continue;
                }
                if visited[v] {
                    let br = &model.branches[k];
                    return Err(GridError::Cycle { from: br.from, to: br.to });
                }
                visited[v] = true;
                parent[v] = Some((u, k));
                queue.push_back(v);
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(GridError::Disconnected(model.buses[i].id));
        }

        Ok(Self {
            model,
            index,
            slack,
            order,
            parent,
            z_pu,
        })
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn slack_bus(&self) -> BusId {
        self.model.buses[self.slack].id
    }

    pub fn contains(&self, bus: BusId) -> bool {
        self.index.contains_key(&bus)
    }

    pub fn bus_count(&self) -> usize {
        self.model.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.model.branches.len()
    }

    /// Bus ids in breadth-first order from the slack.
    pub fn traversal_order(&self) -> impl Iterator<Item = BusId> + '_ {
        self.order.iter().map(|&i| self.model.buses[i].id)
    }

    /// Upstream neighbour of `bus`, `None` for the slack or unknown buses.
    pub fn parent_of(&self, bus: BusId) -> Option<BusId> {
        let i = *self.index.get(&bus)?;
        self.parent[i].map(|(p, _)| self.model.buses[p].id)
    }

    /// Buses from `bus` up to and including the slack.
    pub fn path_to_slack(&self, bus: BusId) -> Vec<BusId> {
        let mut path = Vec::new();
        let mut cur = self.index.get(&bus).copied();
        while let Some(i) = cur {
            path.push(self.model.buses[i].id);
            cur = self.parent[i].map(|(p, _)| p);
        }
        path
    }

    /// Sum of branch resistances (ohm) on the tree path between two buses.
    pub fn path_resistance(&self, a: BusId, b: BusId) -> Option<f64> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        let up_a = self.path_to_slack(a);
        let up_b = self.path_to_slack(b);
        let common = up_a.iter().find(|x| up_b.contains(x))?;
        let resistance_to = |path: &[BusId]| -> f64 {
            path.iter()
                .take_while(|x| *x != common)
                .map(|x| {
                    let (_, k) = self.parent[self.index[x]].expect("non-root has parent");
                    self.model.branches[k].r_ohm
                })
                .sum()
        };
        Some(resistance_to(&up_a) + resistance_to(&up_b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Convergence threshold on the largest per-iteration voltage change, pu.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

impl SolverSettings {
    pub fn new(tolerance: f64, max_iterations: usize) -> Result<Self, GridError> {
        let settings = Self {
            tolerance,
            max_iterations,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(GridError::InvalidSettings(format!(
                "tolerance {} must be positive",
                self.tolerance
            )));
        }
        if self.max_iterations < 1 {
            return Err(GridError::InvalidSettings(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Active power added on top of the network's base loads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InjectionSet {
    /// Generation fed into the network, kW.
    pub injections_kw: BTreeMap<BusId, f64>,
    /// Extra demand, kW.
    pub added_demand_kw: BTreeMap<BusId, f64>,
}

impl InjectionSet {
    pub fn inject(&mut self, bus: BusId, kw: f64) {
        *self.injections_kw.entry(bus).or_default() += kw;
    }

    pub fn demand(&mut self, bus: BusId, kw: f64) {
        *self.added_demand_kw.entry(bus).or_default() += kw;
    }

    pub fn total_injection(&self) -> f64 {
        self.injections_kw.values().sum()
    }

    pub fn total_demand(&self) -> f64 {
        self.added_demand_kw.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.injections_kw.is_empty() && self.added_demand_kw.is_empty()
    }

    /// Copy with every injection multiplied by `factor`; demands untouched.
    pub fn with_injections_scaled(&self, factor: f64) -> Self {
        Self {
            injections_kw: self
                .injections_kw
                .iter()
                .map(|(b, p)| (*b, p * factor))
                .collect(),
            added_demand_kw: self.added_demand_kw.clone(),
        }
    }

    /// Copy with injections and demands both multiplied by `factor`, i.e.
    /// every trade scaled.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |m: &BTreeMap<BusId, f64>| m.iter().map(|(b, p)| (*b, p * factor)).collect();
        Self {
            injections_kw: scale(&self.injections_kw),
            added_demand_kw: scale(&self.added_demand_kw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub slack_bus: BusId,
    pub v_mag: BTreeMap<BusId, f64>,
    pub v_ang: BTreeMap<BusId, f64>,
    /// Active power entering each branch at its upstream end, kW, in the
    /// network's branch order.
    pub branch_p_kw: Vec<f64>,
    pub branch_q_kvar: Vec<f64>,
    /// Active power drawn from the upstream grid, kW (negative on reverse flow).
    pub slack_import_kw: f64,
    pub total_losses_kw: f64,
    /// Base loads plus added demand, kW.
    pub total_load_kw: f64,
    pub total_injection_kw: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PowerFlowSolution {
    /// `slack_import + injections - loads - losses`, zero for an exact solve.
    pub fn power_balance_residual(&self) -> f64 {
        self.slack_import_kw + self.total_injection_kw - self.total_load_kw - self.total_losses_kw
    }

    /// Highest voltage among non-slack buses.
    pub fn max_voltage(&self) -> Option<(BusId, f64)> {
        self.v_mag
            .iter()
            .filter(|(b, _)| **b != self.slack_bus)
            .map(|(b, v)| (*b, *v))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn min_voltage(&self) -> Option<(BusId, f64)> {
        self.v_mag
            .iter()
            .filter(|(b, _)| **b != self.slack_bus)
            .map(|(b, v)| (*b, *v))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn check_injections(net: &ValidatedNetwork, injections: &InjectionSet) -> Result<(), GridError> {
    let slack = net.slack_bus();
    for (map, allow_negative) in [
        (&injections.injections_kw, true),
        (&injections.added_demand_kw, false),
    ] {
        for (&bus, &value) in map {
            if !net.contains(bus) {
                return Err(GridError::UnknownBus(bus));
            }
            if bus == slack {
                return Err(GridError::SlackInjection(bus));
            }
            if !value.is_finite() || (!allow_negative && value < 0.0) {
                return Err(GridError::InvalidInjection { bus, value });
            }
        }
    }
    Ok(())
}

/// Solves the steady-state AC power flow of a radial network.
///
/// Each sweep computes load currents from the present voltages, accumulates
/// branch currents from the leaves towards the slack, then walks back out
/// updating voltages as `V_child = V_parent - Z * I_branch`. Iteration
/// stops once no bus voltage moves by `settings.tolerance` or more.
pub fn power_flow(
    net: &ValidatedNetwork,
    injections: &InjectionSet,
    settings: &SolverSettings,
) -> Result<PowerFlowSolution, GridError> {
    settings.validate()?;
    check_injections(net, injections)?;

    let model = &net.model;
    let n = model.buses.len();
    let base = model.base_kva;

    // Net complex load per bus in pu, consumption positive.
    let mut load = vec![Complex64::new(0.0, 0.0); n];
    for (i, bus) in model.buses.iter().enumerate() {
        if i != net.slack {
            load[i] = Complex64::new(bus.p_load_kw, bus.q_load_kvar);
        }
    }
    for (bus, kw) in &injections.added_demand_kw {
        load[net.index[bus]].re += kw;
    }
    for (bus, kw) in &injections.injections_kw {
        load[net.index[bus]].re -= kw;
    }
    for s in &mut load {
        *s /= base;
    }

    let mut voltage = vec![Complex64::new(1.0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    let mut converged = false;

    while iterations < settings.max_iterations {
        iterations += 1;
        net.branch_currents(&load, &voltage, &mut current);
        last_change = 0.0;
        for &i in &net.order[1..] {
            let (p, k) = net.parent[i].expect("non-root bus has a parent");
            let updated = voltage[p] - net.z_pu[k] * current[i];
            last_change = last_change.max((updated - voltage[i]).norm());
            voltage[i] = updated;
        }
        if !last_change.is_finite() {
            break;
        }
        if last_change < settings.tolerance {
            converged = true;
            break;
        }
    }

    net.branch_currents(&load, &voltage, &mut current);
    let mut branch_p = vec![0.0; model.branches.len()];
    let mut branch_q = vec![0.0; model.branches.len()];
    let mut losses = 0.0;
    let mut slack_import = 0.0;
    for &i in &net.order[1..] {
        let (p, k) = net.parent[i].expect("non-root bus has a parent");
        let sending = voltage[p] * current[i].conj() * base;
        branch_p[k] = sending.re;
        branch_q[k] = sending.im;
        losses += current[i].norm_sqr() * net.z_pu[k].re * base;
        if p == net.slack {
            slack_import += sending.re;
        }
    }

    let total_base_load: f64 = model
        .buses
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != net.slack)
        .map(|(_, b)| b.p_load_kw)
        .sum();
    let solution = PowerFlowSolution {
        slack_bus: net.slack_bus(),
        v_mag: model
            .buses
            .iter()
            .zip(&voltage)
            .map(|(b, v)| (b.id, v.norm()))
            .collect(),
        v_ang: model
            .buses
            .iter()
            .zip(&voltage)
            .map(|(b, v)| (b.id, v.arg()))
            .collect(),
        branch_p_kw: branch_p,
        branch_q_kvar: branch_q,
        slack_import_kw: slack_import,
        total_losses_kw: losses,
        total_load_kw: total_base_load + injections.total_demand(),
        total_injection_kw: injections.total_injection(),
        converged,
        iterations,
    };

    if converged {
        Ok(solution)
    } else {
        Err(GridError::NonConvergence {
            iterations,
            last_change,
            last: Box::new(solution),
        })
    }
}

impl ValidatedNetwork {
    /// Backward sweep: `current[i]` becomes the current flowing into bus `i`
    /// from its parent, i.e. the load current of the whole subtree.
    fn branch_currents(&self, load: &[Complex64], voltage: &[Complex64], current: &mut [Complex64]) {
        for (c, (s, v)) in current.iter_mut().zip(load.iter().zip(voltage)) {
            *c = (s / v).conj();
        }
        for &i in self.order[1..].iter().rev() {
            let (p, _) = self.parent[i].expect("non-root bus has a parent");
            let downstream = current[i];
            current[p] += downstream;
        }
    }
}
