//! Scenario ingestion and the day-long interval driver.
//!
//! A scenario is a TOML file naming a network file and a profile CSV, plus
//! tariffs, voltage limits, solver settings and the prosumer roster. Every
//! interval is cleared, settled and checked against the network on its own;
//! the day report is assembled in interval order afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feasibility::{
    assess_injections, map_transactions_to_injections, BusTrade, FeasibilityError, FeasibilityReport,
    VoltageLimits, DEFAULT_CURTAIL_STEP_KW,
};
use crate::grid::{BusId, GridError, NetworkModel, SolverSettings, ValidatedNetwork};
use crate::market::{clear_market, Bid, MarketResult, Offer, ProsumerId};
use crate::settlement::{
    grid_price_at, settle_day, ClockTime, SettlementError, SettlementReport, TariffSchedule,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {source}")]
    Toml {
        what: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("{what}: {source}")]
    Csv {
        what: String,
        #[source]
        source: csv::Error,
    },
    #[error("network: {0}")]
    Network(GridError),
    #[error("solver settings: {0}")]
    Settings(GridError),
    #[error("tariffs: {0}")]
    Tariff(#[from] SettlementError),
    #[error("limits: {0}")]
    Limits(FeasibilityError),
    #[error("prosumer {prosumer} is placed at {bus}, which is not in the network")]
    UnknownBus { prosumer: ProsumerId, bus: BusId },
    #[error("prosumer {prosumer} cannot be placed at the slack {bus}")]
    SlackPlacement { prosumer: ProsumerId, bus: BusId },
    #[error("prosumer {0} is declared twice")]
    DuplicateProsumer(ProsumerId),
    #[error("prosumers {first} and {second} share registration order {bcro}")]
    DuplicateBcro {
        bcro: u32,
        first: ProsumerId,
        second: ProsumerId,
    },
    #[error("prosumer {prosumer}: {field} = {value} is invalid")]
    InvalidField {
        prosumer: ProsumerId,
        field: &'static str,
        value: f64,
    },
    #[error("profiles line {line}: unknown prosumer {prosumer}")]
    UnknownProsumer { line: u64, prosumer: ProsumerId },
    #[error("profiles line {line}: {time} is not the start of a trading interval")]
    Misaligned { line: u64, time: ClockTime },
    #[error("profiles line {line}: second sample for {prosumer} at {time}")]
    DuplicateSample {
        line: u64,
        prosumer: ProsumerId,
        time: ClockTime,
    },
    #[error("profiles line {line}: {field} must be finite")]
    NonFinite { line: u64, field: &'static str },
    #[error("prosumer {prosumer} has {have} of {need} profile samples")]
    IncompleteProfile {
        prosumer: ProsumerId,
        have: usize,
        need: usize,
    },
    #[error("curtailment step {0} kW must be positive")]
    CurtailStep(f64),
}

fn default_curtail_step() -> f64 {
    DEFAULT_CURTAIL_STEP_KW
}

/// Roster entry as written in the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerConfig {
    pub id: ProsumerId,
    #[serde(default)]
    pub label: String,
    pub bus: BusId,
    pub declared_price: f64,
    pub bcro: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// Network file, relative to the scenario file.
    pub network: PathBuf,
    /// Profile CSV, relative to the scenario file.
    pub profiles: PathBuf,
    pub tariffs: TariffSchedule,
    #[serde(default)]
    pub limits: VoltageLimits,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default = "default_curtail_step")]
    pub curtail_step_kw: f64,
    #[serde(rename = "prosumer", default)]
    pub prosumers: Vec<ProsumerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerProfile {
    pub prosumer: ProsumerId,
    pub label: String,
    pub bus: BusId,
    pub declared_price: f64,
    pub bcro: u32,
    /// Demand minus generation per interval, kW. Negative is surplus.
    pub net_load: Vec<f64>,
    /// Per-interval declared price overriding `declared_price`, ¢/kWh.
    pub price_override: Vec<Option<f64>>,
}

impl ProsumerProfile {
    pub fn price_at(&self, t: usize) -> f64 {
        self.price_override
            .get(t)
            .copied()
            .flatten()
            .unwrap_or(self.declared_price)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: ValidatedNetwork,
    pub profiles: Vec<ProsumerProfile>,
    pub tariffs: TariffSchedule,
    pub limits: VoltageLimits,
    pub settings: SolverSettings,
    pub curtail_step_kw: f64,
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    interval_start: ClockTime,
    prosumer_id: ProsumerId,
    net_load_kw: f64,
    #[serde(default)]
    price_ckwh: Option<f64>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads a scenario file together with the network and profile files it
/// names.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = read(path)?;
    let config: ScenarioConfig = toml::from_str(&text).map_err(|source| ScenarioError::Toml {
        what: path.display().to_string(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let network_path = dir.join(&config.network);
    let profiles_path = dir.join(&config.profiles);
    let network = NetworkModel::from_toml(&read(&network_path)?).map_err(|source| {
        ScenarioError::Toml {
            what: network_path.display().to_string(),
            source,
        }
    })?;
    let profiles = read(&profiles_path)?;
    Scenario::build(config, network, &profiles, &profiles_path.display().to_string())
}

impl Scenario {
    /// Builds a scenario from in-memory file contents. File references in
    /// the scenario text are ignored.
    pub fn from_strs(scenario: &str, network: &str, profiles: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = toml::from_str(scenario).map_err(|source| ScenarioError::Toml {
            what: "scenario".into(),
            source,
        })?;
        let network = NetworkModel::from_toml(network).map_err(|source| ScenarioError::Toml {
            what: "network".into(),
            source,
        })?;
        Self::build(config, network, profiles, "profiles")
    }

    pub fn build(
        config: ScenarioConfig,
        network: NetworkModel,
        profiles_csv: &str,
        profiles_label: &str,
    ) -> Result<Self, ScenarioError> {
        let network = ValidatedNetwork::new(network).map_err(ScenarioError::Network)?;
        config.tariffs.validate()?;
        config.limits.validate().map_err(ScenarioError::Limits)?;
        config.solver.validate().map_err(ScenarioError::Settings)?;
        if !(config.curtail_step_kw.is_finite() && config.curtail_step_kw > 0.0) {
            return Err(ScenarioError::CurtailStep(config.curtail_step_kw));
        }

        let intervals = config.tariffs.intervals_per_day();
        let mut by_id: BTreeMap<ProsumerId, ProsumerProfile> = BTreeMap::new();
        let mut by_bcro: BTreeMap<u32, ProsumerId> = BTreeMap::new();
        for p in &config.prosumers {
            if !network.contains(p.bus) {
                return Err(ScenarioError::UnknownBus {
                    prosumer: p.id.clone(),
                    bus: p.bus,
                });
            }
            if p.bus == network.slack_bus() {
                return Err(ScenarioError::SlackPlacement {
                    prosumer: p.id.clone(),
                    bus: p.bus,
                });
            }
            if !(p.declared_price.is_finite() && p.declared_price >= 0.0) {
                return Err(ScenarioError::InvalidField {
                    prosumer: p.id.clone(),
                    field: "declared_price",
                    value: p.declared_price,
                });
            }
            if p.bcro < 1 {
                return Err(ScenarioError::InvalidField {
                    prosumer: p.id.clone(),
                    field: "bcro",
                    value: f64::from(p.bcro),
                });
            }
            if let Some(first) = by_bcro.insert(p.bcro, p.id.clone()) {
                return Err(ScenarioError::DuplicateBcro {
                    bcro: p.bcro,
                    first,
                    second: p.id.clone(),
                });
            }
            let profile = ProsumerProfile {
                prosumer: p.id.clone(),
                label: p.label.clone(),
                bus: p.bus,
                declared_price: p.declared_price,
                bcro: p.bcro,
                net_load: vec![0.0; intervals],
                price_override: vec![None; intervals],
            };
            if by_id.insert(p.id.clone(), profile).is_some() {
                return Err(ScenarioError::DuplicateProsumer(p.id.clone()));
            }
        }

        let csv_err = |source| ScenarioError::Csv {
            what: profiles_label.to_owned(),
            source,
        };
        let interval_minutes = config.tariffs.interval_hours * 60.0;
        let mut seen: BTreeMap<ProsumerId, BTreeSet<usize>> = BTreeMap::new();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(profiles_csv.as_bytes());
        let headers = reader.headers().map_err(csv_err)?.clone();
        let mut raw = csv::StringRecord::new();
        while reader.read_record(&mut raw).map_err(csv_err)? {
            let line = raw.position().map_or(0, csv::Position::line);
            let row: ProfileRow = raw.deserialize(Some(&headers)).map_err(csv_err)?;
            let Some(profile) = by_id.get_mut(&row.prosumer_id) else {
                return Err(ScenarioError::UnknownProsumer {
                    line,
                    prosumer: row.prosumer_id,
                });
            };
            let slot = f64::from(row.interval_start.minutes()) / interval_minutes;
            if (slot - slot.round()).abs() > 1e-9 || slot.round() as usize >= intervals {
                return Err(ScenarioError::Misaligned {
                    line,
                    time: row.interval_start,
                });
            }
            let t = slot.round() as usize;
            if !seen.entry(row.prosumer_id.clone()).or_default().insert(t) {
                return Err(ScenarioError::DuplicateSample {
                    line,
                    prosumer: row.prosumer_id,
                    time: row.interval_start,
                });
            }
            if !row.net_load_kw.is_finite() {
                return Err(ScenarioError::NonFinite {
                    line,
                    field: "net_load_kw",
                });
            }
            if let Some(price) = row.price_ckwh {
                if !(price.is_finite() && price >= 0.0) {
                    return Err(ScenarioError::NonFinite {
                        line,
                        field: "price_ckwh",
                    });
                }
            }
            profile.net_load[t] = row.net_load_kw;
            profile.price_override[t] = row.price_ckwh;
        }

        for id in by_id.keys() {
            let have = seen.get(id).map_or(0, BTreeSet::len);
            if have != intervals {
                return Err(ScenarioError::IncompleteProfile {
                    prosumer: id.clone(),
                    have,
                    need: intervals,
                });
            }
        }

        let mut profiles: Vec<ProsumerProfile> = by_id.into_values().collect();
        profiles.sort_by_key(|p| p.bcro);
        Ok(Self {
            name: config.name,
            network,
            profiles,
            tariffs: config.tariffs,
            limits: config.limits,
            settings: config.solver,
            curtail_step_kw: config.curtail_step_kw,
        })
    }

    pub fn intervals(&self) -> usize {
        self.tariffs.intervals_per_day()
    }

    pub fn placement(&self) -> BTreeMap<ProsumerId, BusId> {
        self.profiles
            .iter()
            .map(|p| (p.prosumer.clone(), p.bus))
            .collect()
    }
}

/// Splits prosumers into sellers (surplus) and buyers (deficit) for
/// interval `t`; prosumers with zero net load sit the interval out.
pub fn derive_interval_market(profiles: &[ProsumerProfile], t: usize) -> (Vec<Offer>, Vec<Bid>) {
    let mut offers = Vec::new();
    let mut bids = Vec::new();
    for p in profiles {
        let net = p.net_load.get(t).copied().unwrap_or(0.0);
        let price = p.price_at(t);
        if net < 0.0 {
            offers.push(Offer::new(p.prosumer.clone(), price, -net, p.bcro));
        } else if net > 0.0 {
            bids.push(Bid::new(p.prosumer.clone(), price, net, p.bcro));
        }
    }
    (offers, bids)
}

/// Offers and bids for a single interval, as read by the `clear` command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketInput {
    #[serde(rename = "offer", default)]
    pub offers: Vec<Offer>,
    #[serde(rename = "bid", default)]
    pub bids: Vec<Bid>,
}

impl MarketInput {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|source| ScenarioError::Toml {
            what: "market".into(),
            source,
        })
    }
}

/// Parses `seller_bus,buyer_bus,power_kw` rows.
pub fn parse_bus_trades(text: &str) -> Result<Vec<BusTrade>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize::<BusTrade>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| ScenarioError::Csv {
            what: "trades".into(),
            source,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Input,
    NonConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: usize,
    pub start: ClockTime,
    /// ¢/kWh
    pub grid_price: f64,
    pub market: MarketResult,
    pub feasibility: Option<FeasibilityReport>,
    pub error: Option<IntervalError>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DaySummary {
    pub intervals: usize,
    pub any_voltage_violation: bool,
    pub total_traded_kwh: f64,
    pub total_transaction_losses_kwh: f64,
    pub interval_errors: usize,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub interval_hours: f64,
    /// ¢/kWh, for plotting alongside P2P prices.
    pub fit: f64,
    pub intervals: Vec<IntervalRecord>,
    pub settlement: SettlementReport,
    pub summary: DaySummary,
}

impl RunReport {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub feasibility: bool,
    pub curtail: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            feasibility: true,
            curtail: true,
        }
    }
}

fn feasibility_error(e: FeasibilityError) -> IntervalError {
    let kind = match &e {
        FeasibilityError::Grid {
            source: GridError::NonConvergence { .. },
            ..
        } => ErrorKind::NonConvergence,
        _ => ErrorKind::Input,
    };
    IntervalError {
        stage: "feasibility".into(),
        kind,
        message: e.to_string(),
    }
}

/// Clears, and optionally checks against the network, a single interval.
pub fn run_interval(scenario: &Scenario, t: usize, options: RunOptions) -> IntervalRecord {
    let start = ClockTime::from_minutes(scenario.tariffs.interval_start_minutes(t).round() as u32)
        .unwrap_or(ClockTime::from_minutes(0).expect("midnight"));
    let mut record = IntervalRecord {
        interval: t,
        start,
        grid_price: 0.0,
        market: MarketResult::default(),
        feasibility: None,
        error: None,
    };
    match grid_price_at(t, &scenario.tariffs) {
        Ok(price) => record.grid_price = price,
        Err(e) => {
            record.error = Some(IntervalError {
                stage: "market".into(),
                kind: ErrorKind::Input,
                message: e.to_string(),
            });
            return record;
        }
    }
    let (offers, bids) = derive_interval_market(&scenario.profiles, t);
    match clear_market(&offers, &bids) {
        Ok(m) => record.market = m,
        Err(e) => {
            record.error = Some(IntervalError {
                stage: "market".into(),
                kind: ErrorKind::Input,
                message: e.to_string(),
            });
            return record;
        }
    }
    if !options.feasibility {
        return record;
    }
    let step = options.curtail.then_some(scenario.curtail_step_kw);
    let assessed = map_transactions_to_injections(&record.market, &scenario.placement()).and_then(|inj| {
        assess_injections(
            &scenario.network,
            &inj,
            &scenario.limits,
            &scenario.settings,
            step,
        )
    });
    match assessed {
        Ok(report) => record.feasibility = Some(report),
        Err(e) => record.error = Some(feasibility_error(e)),
    }
    record
}

/// Orders interval records and derives settlement and day totals.
pub fn assemble_report(
    scenario: &Scenario,
    mut records: Vec<IntervalRecord>,
) -> Result<RunReport, ScenarioError> {
    records.sort_by_key(|r| r.interval);
    let cleared: Vec<(usize, MarketResult)> = records
        .iter()
        .filter(|r| r.error.is_none() || r.error.as_ref().is_some_and(|e| e.stage != "market"))
        .map(|r| (r.interval, r.market.clone()))
        .collect();
    let settlement = settle_day(&cleared, &scenario.tariffs)?;

    let h = scenario.tariffs.interval_hours;
    let interval_errors = records.iter().filter(|r| r.error.is_some()).count();
    let summary = DaySummary {
        intervals: records.len(),
        any_voltage_violation: records
            .iter()
            .filter_map(|r| r.feasibility.as_ref())
            .any(FeasibilityReport::has_violation),
        total_traded_kwh: records.iter().map(|r| r.market.traded_power() * h).sum(),
        total_transaction_losses_kwh: records
            .iter()
            .filter_map(|r| r.feasibility.as_ref())
            .map(|f| f.transaction_losses_kw * h)
            .sum(),
        interval_errors,
        partial: interval_errors > 0,
    };
    Ok(RunReport {
        scenario: scenario.name.clone(),
        interval_hours: h,
        fit: scenario.tariffs.fit,
        intervals: records,
        settlement,
        summary,
    })
}

/// Runs every interval of the day.
pub fn run_day(scenario: &Scenario, options: RunOptions) -> Result<RunReport, ScenarioError> {
    let records = (0..scenario.intervals())
        .map(|t| run_interval(scenario, t, options))
        .collect();
    assemble_report(scenario, records)
}
