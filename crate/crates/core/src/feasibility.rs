//! Physical checks on a cleared market: voltage limits, inverter
//! curtailment and the extra grid import caused by the trades.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{power_flow, BusId, GridError, InjectionSet, PowerFlowSolution, SolverSettings, ValidatedNetwork};
use crate::market::{MarketResult, ProsumerId};
use crate::settlement::TariffSchedule;
use crate::EPS;

/// Default curtailment decrement, kW.
pub const DEFAULT_CURTAIL_STEP_KW: f64 = 0.1;

/// Which power-flow study an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyCase {
    /// Base loads only, no P2P trades.
    WithoutTrades,
    /// Base loads plus the traded injections and demands.
    WithTrades,
    Curtailment,
}

impl fmt::Display for StudyCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyCase::WithoutTrades => "case I (no trades)",
            StudyCase::WithTrades => "case II (with trades)",
            StudyCase::Curtailment => "curtailment",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeasibilityError {
    #[error("prosumer {0} has no bus placement")]
    Placement(ProsumerId),
    #[error("{case}: {source}")]
    Grid {
        case: StudyCase,
        #[source]
        source: GridError,
    },
    #[error("voltage limits need a converged solution")]
    NotConverged,
    #[error("invalid voltage limits: {0}")]
    InvalidLimits(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("over-voltage persists with every injection curtailed ({} violations left)", residual.len())]
    Unresolvable {
        residual: Vec<Violation>,
        curtailed: BTreeMap<BusId, f64>,
    },
}

impl FeasibilityError {
    fn grid(case: StudyCase) -> impl FnOnce(GridError) -> Self {
        move |source| FeasibilityError::Grid { case, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub lower: f64,
    pub upper: f64,
}

impl Default for VoltageLimits {
    fn default() -> Self {
        Self {
            lower: 0.94,
            upper: 1.10,
        }
    }
}

impl VoltageLimits {
    pub fn new(lower: f64, upper: f64) -> Result<Self, FeasibilityError> {
        let limits = Self { lower, upper };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        if 0.0 < self.lower && self.lower < 1.0 && 1.0 < self.upper && self.upper.is_finite() {
            Ok(())
        } else {
            Err(FeasibilityError::InvalidLimits(format!(
                "need 0 < lower < 1 < upper, got {} / {}",
                self.lower, self.upper
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub bus: BusId,
    pub v_mag: f64,
    pub limit: LimitKind,
    /// Distance beyond the limit, pu.
    pub severity: f64,
}

/// A trade expressed directly as bus-to-bus power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusTrade {
    pub seller_bus: BusId,
    pub buyer_bus: BusId,
    pub power_kw: f64,
}

/// Traded power as network injections: sellers' totals at their buses,
/// buyers' totals as added demand.
pub fn map_transactions_to_injections(
    market: &MarketResult,
    placement: &BTreeMap<ProsumerId, BusId>,
) -> Result<InjectionSet, FeasibilityError> {
    let locate = |id: &ProsumerId| {
        placement
            .get(id)
            .copied()
            .ok_or_else(|| FeasibilityError::Placement(id.clone()))
    };
    let mut set = InjectionSet::default();
    for txn in &market.transactions {
        set.inject(locate(&txn.seller)?, txn.power);
        set.demand(locate(&txn.buyer)?, txn.power);
    }
    Ok(set)
}

pub fn injections_from_trades(trades: &[BusTrade]) -> InjectionSet {
    let mut set = InjectionSet::default();
    for t in trades {
        set.inject(t.seller_bus, t.power_kw);
        set.demand(t.buyer_bus, t.power_kw);
    }
    set
}

/// Non-slack buses outside the limits, most severe first.
pub fn check_voltage_limits(
    solution: &PowerFlowSolution,
    limits: &VoltageLimits,
) -> Result<Vec<Violation>, FeasibilityError> {
    if !solution.converged {
        return Err(FeasibilityError::NotConverged);
    }
    let mut violations: Vec<Violation> = solution
        .v_mag
        .iter()
        .filter(|(bus, _)| **bus != solution.slack_bus)
        .filter_map(|(&bus, &v_mag)| {
            if v_mag > limits.upper {
                Some(Violation {
                    bus,
                    v_mag,
                    limit: LimitKind::Upper,
                    severity: v_mag - limits.upper,
                })
            } else if v_mag < limits.lower {
                Some(Violation {
                    bus,
                    v_mag,
                    limit: LimitKind::Lower,
                    severity: limits.lower - v_mag,
                })
            } else {
                None
            }
        })
        .collect();
    violations.sort_by(|a, b| b.severity.total_cmp(&a.severity).then(a.bus.cmp(&b.bus)));
    Ok(violations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAssessment {
    pub p_g_case1: f64,
    pub p_g_case2: f64,
    pub transaction_losses_kw: f64,
    pub case1: PowerFlowSolution,
    pub case2: PowerFlowSolution,
}

/// Grid import with and without the traded injections and demands. Both
/// sides of every trade are left out of the first study, so the import
/// difference is the extra network loss the trades cause.
pub fn losses_for_injections(
    net: &ValidatedNetwork,
    injections: &InjectionSet,
    settings: &SolverSettings,
) -> Result<LossAssessment, FeasibilityError> {
    let case1 = power_flow(net, &InjectionSet::default(), settings)
        .map_err(FeasibilityError::grid(StudyCase::WithoutTrades))?;
    let case2 = power_flow(net, injections, settings)
        .map_err(FeasibilityError::grid(StudyCase::WithTrades))?;
    Ok(LossAssessment {
        p_g_case1: case1.slack_import_kw,
        p_g_case2: case2.slack_import_kw,
        transaction_losses_kw: case2.slack_import_kw - case1.slack_import_kw,
        case1,
        case2,
    })
}

pub fn compute_transaction_losses(
    net: &ValidatedNetwork,
    market: &MarketResult,
    placement: &BTreeMap<ProsumerId, BusId>,
    settings: &SolverSettings,
) -> Result<LossAssessment, FeasibilityError> {
    let injections = map_transactions_to_injections(market, placement)?;
    losses_for_injections(net, &injections, settings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curtailment {
    pub injections: InjectionSet,
    pub curtailed: BTreeMap<BusId, f64>,
    pub solution: PowerFlowSolution,
    pub steps: usize,
}

/// Mimics inverter volt-watt response: while any bus sits above the upper
/// limit, take `step_kw` off the injection at the worst bus (or, if that
/// bus injects nothing, at the highest-voltage injecting bus) and re-solve.
pub fn curtail_for_voltage(
    net: &ValidatedNetwork,
    injections: &InjectionSet,
    limits: &VoltageLimits,
    settings: &SolverSettings,
    step_kw: f64,
) -> Result<Curtailment, FeasibilityError> {
    limits.validate()?;
    if !(step_kw.is_finite() && step_kw > 0.0) {
        return Err(FeasibilityError::InvalidInput(format!(
            "curtailment step {step_kw} kW must be positive"
        )));
    }
    let mut current = injections.clone();
    let mut curtailed: BTreeMap<BusId, f64> = BTreeMap::new();
    let mut steps = 0;

    loop {
        let solution = power_flow(net, &current, settings)
            .map_err(FeasibilityError::grid(StudyCase::Curtailment))?;
        let upper: Vec<Violation> = check_voltage_limits(&solution, limits)?
            .into_iter()
            .filter(|v| v.limit == LimitKind::Upper)
            .collect();
        let Some(worst) = upper.first() else {
            return Ok(Curtailment {
                injections: current,
                curtailed,
                solution,
                steps,
            });
        };

        let injecting = |bus: &BusId| current.injections_kw.get(bus).is_some_and(|p| *p > EPS);
        let target = if injecting(&worst.bus) {
            Some(worst.bus)
        } else {
            current
                .injections_kw
                .keys()
                .filter(|b| injecting(b))
                .max_by(|a, b| solution.v_mag[a].total_cmp(&solution.v_mag[b]).then(b.cmp(a)))
                .copied()
        };
        let Some(bus) = target else {
            return Err(FeasibilityError::Unresolvable {
                residual: upper,
                curtailed,
            });
        };

        let remaining = current.injections_kw.get_mut(&bus).expect("target injects");
        let mut cut = remaining.min(step_kw);
        *remaining -= cut;
        if *remaining <= EPS {
            cut += *remaining;
            current.injections_kw.remove(&bus);
        }
        *curtailed.entry(bus).or_default() += cut;
        steps += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnualizedLosses {
    /// Sum of the per-interval loss over the year, kW.
    pub cumulative_kw: f64,
    pub energy_mwh: f64,
    /// Cost at the off-peak rate, $.
    pub cost_low: f64,
    /// Cost at the on-peak rate, $.
    pub cost_high: f64,
}

impl AnnualizedLosses {
    pub fn cumulative_mw(&self) -> f64 {
        self.cumulative_kw / 1000.0
    }
}

/// Extrapolates one interval's transaction loss to a year of identical
/// intervals, priced between the off-peak and on-peak retail rates.
pub fn annualize_losses(
    loss_kw: f64,
    intervals_per_year: u64,
    tariffs: &TariffSchedule,
    interval_hours: f64,
) -> Result<AnnualizedLosses, FeasibilityError> {
    if !(loss_kw.is_finite() && loss_kw >= 0.0) {
        return Err(FeasibilityError::InvalidInput(format!(
            "loss {loss_kw} kW must be non-negative"
        )));
    }
    if !(interval_hours.is_finite() && interval_hours > 0.0) {
        return Err(FeasibilityError::InvalidInput(format!(
            "interval length {interval_hours} h must be positive"
        )));
    }
    let cumulative_kw = loss_kw * intervals_per_year as f64;
    let energy_kwh = cumulative_kw * interval_hours;
    Ok(AnnualizedLosses {
        cumulative_kw,
        energy_mwh: energy_kwh / 1000.0,
        cost_low: energy_kwh * tariffs.off_peak / 100.0,
        cost_high: energy_kwh * tariffs.on_peak / 100.0,
    })
}

/// Physical outcome of one trading interval.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Violations with every trade executed as cleared.
    pub violations: Vec<Violation>,
    pub transaction_losses_kw: f64,
    pub p_g_case1: f64,
    pub p_g_case2: f64,
    pub curtailment_applied: BTreeMap<BusId, f64>,
    /// Upper violations still present when curtailment ran out of injection.
    pub unresolved: Vec<Violation>,
    /// Bus voltages with trades executed, pu.
    pub voltages: BTreeMap<BusId, f64>,
    pub annualized: Option<AnnualizedLosses>,
}

impl FeasibilityReport {
    pub fn has_violation(&self) -> bool {
        !self.violations.is_empty()
    }

    pub fn worst_voltage(&self) -> Option<(BusId, f64)> {
        self.voltages
            .iter()
            .map(|(b, v)| (*b, *v))
            .max_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
    }
}

/// Runs both loss studies and the voltage check for one injection set,
/// curtailing when `curtail_step_kw` is given and an upper limit is crossed.
pub fn assess_injections(
    net: &ValidatedNetwork,
    injections: &InjectionSet,
    limits: &VoltageLimits,
    settings: &SolverSettings,
    curtail_step_kw: Option<f64>,
) -> Result<FeasibilityReport, FeasibilityError> {
    limits.validate()?;
    let losses = losses_for_injections(net, injections, settings)?;
    let violations = check_voltage_limits(&losses.case2, limits)?;
    let mut report = FeasibilityReport {
        transaction_losses_kw: losses.transaction_losses_kw,
        p_g_case1: losses.p_g_case1,
        p_g_case2: losses.p_g_case2,
        voltages: losses.case2.v_mag.clone(),
        ..Default::default()
    };
    let over = violations.iter().any(|v| v.limit == LimitKind::Upper);
    report.violations = violations;

    if let (true, Some(step)) = (over, curtail_step_kw) {
        match curtail_for_voltage(net, injections, limits, settings, step) {
            Ok(c) => report.curtailment_applied = c.curtailed,
            Err(FeasibilityError::Unresolvable {
                residual,
                curtailed,
            }) => {
                report.curtailment_applied = curtailed;
                report.unresolved = residual;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
