//! WebAssembly bindings for the browser demo. Each export takes plain
//! values, runs against the bundled 27-bus feeder where a network is
//! needed, and returns a JSON string for the page to render.
//!
//! The `*_json` functions are ordinary Rust and carry the logic; the
//! `#[wasm_bindgen]` wrappers only turn their errors into JS exceptions.

use std::collections::BTreeMap;

use p2pgrid::feasibility::{
    annualize_losses, check_voltage_limits, curtail_for_voltage, injections_from_trades, losses_for_injections,
    BusTrade, LimitKind, Violation, VoltageLimits, DEFAULT_CURTAIL_STEP_KW,
};
use p2pgrid::grid::{BusId, NetworkModel, SolverSettings, ValidatedNetwork};
use p2pgrid::market::{clear_market, Bid, MarketResult, Offer};
use p2pgrid::scenario::parse_bus_trades;
use p2pgrid::settlement::TariffSchedule;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

pub const NETWORK_TOML: &str = include_str!("../../core/data/network27.toml");

/// The bundled feeder, parsed and validated.
pub fn feeder() -> ValidatedNetwork {
    let model = NetworkModel::from_toml(NETWORK_TOML).expect("bundled network parses");
    ValidatedNetwork::new(model).expect("bundled network is radial")
}

#[derive(Debug, Deserialize)]
pub struct MarketRequest {
    #[serde(default)]
    pub offers: Vec<Offer>,
    #[serde(default)]
    pub bids: Vec<Bid>,
}

#[derive(Debug, Serialize)]
pub struct MarketResponse {
    pub result: MarketResult,
    pub traded_kw: f64,
    pub weighted_price: Option<f64>,
}

/// Clears `{"offers": [...], "bids": [...]}`.
pub fn clear_json(request: &str) -> Result<String, String> {
    let req: MarketRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let result = clear_market(&req.offers, &req.bids).map_err(|e| e.to_string())?;
    let response = MarketResponse {
        traded_kw: result.traded_power(),
        weighted_price: result.weighted_price(),
        result,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct ProfileResponse {
    /// Bus voltages with every trade as given, pu.
    pub voltages: BTreeMap<BusId, f64>,
    pub violations: Vec<Violation>,
    pub transaction_losses_kw: f64,
    /// Voltages after curtailment; absent when nothing was curtailed.
    pub curtailed_voltages: Option<BTreeMap<BusId, f64>>,
    pub curtailed_kw: BTreeMap<BusId, f64>,
    pub unresolved: bool,
}

/// Voltage profile of the feeder for `seller_bus,buyer_bus,power_kw` rows,
/// every trade scaled by `scale`, with optional curtailment.
pub fn profile_json(trades_csv: &str, scale: f64, lower: f64, upper: f64, curtail: bool) -> Result<String, String> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(format!("scale {scale} must be a non-negative number"));
    }
    let limits = VoltageLimits::new(lower, upper).map_err(|e| e.to_string())?;
    let trades = parse_bus_trades(trades_csv).map_err(|e| e.to_string())?;
    let net = feeder();
    let settings = SolverSettings::default();
    let injections = injections_from_trades(&trades).scaled(scale);

    let losses = losses_for_injections(&net, &injections, &settings).map_err(|e| e.to_string())?;
    let violations = check_voltage_limits(&losses.case2, &limits).map_err(|e| e.to_string())?;
    let mut response = ProfileResponse {
        voltages: losses.case2.v_mag.clone(),
        transaction_losses_kw: losses.transaction_losses_kw,
        curtailed_voltages: None,
        curtailed_kw: BTreeMap::new(),
        unresolved: false,
        violations,
    };
    let over = response.violations.iter().any(|v| v.limit == LimitKind::Upper);
    if curtail && over {
        match curtail_for_voltage(&net, &injections, &limits, &settings, DEFAULT_CURTAIL_STEP_KW) {
            Ok(c) => {
                response.curtailed_voltages = Some(c.solution.v_mag);
                response.curtailed_kw = c.curtailed;
            }
            Err(p2pgrid::FeasibilityError::Unresolvable { curtailed, .. }) => {
                response.curtailed_kw = curtailed;
                response.unresolved = true;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct LossResponse {
    pub transaction_losses_kw: f64,
    pub path_resistance_ohm: f64,
    /// Yearly energy if this loss recurred every 15 minutes, MWh.
    pub yearly_mwh: f64,
    pub yearly_cost_low: f64,
    pub yearly_cost_high: f64,
}

/// Extra network loss of a single trade between two buses of the feeder.
pub fn losses_json(seller_bus: u32, buyer_bus: u32, power_kw: f64) -> Result<String, String> {
    if !(power_kw.is_finite() && power_kw > 0.0) {
        return Err(format!("power {power_kw} kW must be positive"));
    }
    let net = feeder();
    let (s, b) = (BusId(seller_bus), BusId(buyer_bus));
    let trade = BusTrade {
        seller_bus: s,
        buyer_bus: b,
        power_kw,
    };
    let losses = losses_for_injections(&net, &injections_from_trades(&[trade]), &SolverSettings::default())
        .map_err(|e| e.to_string())?;
    let path_resistance_ohm = net
        .path_resistance(s, b)
        .ok_or_else(|| format!("no path between {s} and {b}"))?;
    let tariffs = TariffSchedule::queensland_default();
    let yearly = annualize_losses(
        losses.transaction_losses_kw.max(0.0),
        365 * tariffs.intervals_per_day() as u64,
        &tariffs,
        tariffs.interval_hours,
    )
    .map_err(|e| e.to_string())?;
    serde_json::to_string(&LossResponse {
        transaction_losses_kw: losses.transaction_losses_kw,
        path_resistance_ohm,
        yearly_mwh: yearly.energy_mwh,
        yearly_cost_low: yearly.cost_low,
        yearly_cost_high: yearly.cost_high,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = clearMarket)]
pub fn clear_market_js(request: &str) -> Result<String, JsError> {
    clear_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = voltageProfile)]
pub fn voltage_profile_js(trades_csv: &str, scale: f64, lower: f64, upper: f64, curtail: bool) -> Result<String, JsError> {
    profile_json(trades_csv, scale, lower, upper, curtail).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = tradeLosses)]
pub fn trade_losses_js(seller_bus: u32, buyer_bus: u32, power_kw: f64) -> Result<String, JsError> {
    losses_json(seller_bus, buyer_bus, power_kw).map_err(|e| JsError::new(&e))
}
