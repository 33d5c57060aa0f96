//! Daily settlement of P2P trades against the retail tariffs a prosumer
//! would otherwise face.
//!
//! A seller's benefit is what it earns above the feed-in tariff, a buyer's
//! is what it saves below the time-of-use retail price in force for the
//! interval. All money is carried in cents; dollars only appear at the
//! reporting edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{MarketResult, ProsumerId};

const MINUTES_PER_DAY: u32 = 24 * 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SettlementError {
    #[error("invalid tariff configuration: {0}")]
    InvalidTariff(String),
    #[error("interval {t} outside the day (0..{intervals})")]
    IntervalOutOfRange { t: usize, intervals: usize },
    #[error("interval {0} settled twice")]
    DuplicateInterval(usize),
    #[error("invalid clock time {0:?}, expected HH:MM")]
    BadClockTime(String),
}

/// Time of day with minute resolution. `24:00` is accepted as an end bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClockTime(u32);

impl ClockTime {
    pub fn from_minutes(minutes: u32) -> Option<Self> {
        (minutes <= MINUTES_PER_DAY).then_some(Self(minutes))
    }

    pub fn minutes(self) -> u32 {
        self.0
    }

    pub fn hours(self) -> f64 {
        f64::from(self.0) / 60.0
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl FromStr for ClockTime {
    type Err = SettlementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SettlementError::BadClockTime(s.to_owned());
        let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        if m >= 60 {
            return Err(bad());
        }
        Self::from_minutes(h * 60 + m).ok_or_else(bad)
    }
}

impl TryFrom<String> for ClockTime {
    type Error = SettlementError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ClockTime> for String {
    fn from(t: ClockTime) -> Self {
        t.to_string()
    }
}

/// Half-open `[start, end)` window in which the on-peak rate applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakWindow {
    pub start: ClockTime,
    pub end: ClockTime,
}

impl PeakWindow {
    fn contains(&self, minute: f64) -> bool {
        f64::from(self.start.minutes()) <= minute && minute < f64::from(self.end.minutes())
    }
}

fn default_interval_hours() -> f64 {
    0.25
}

/// Feed-in and time-of-use rates in ¢/kWh plus the trading interval length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSchedule {
    pub fit: f64,
    pub on_peak: f64,
    pub off_peak: f64,
    #[serde(default)]
    pub peak_windows: Vec<PeakWindow>,
    #[serde(default = "default_interval_hours")]
    pub interval_hours: f64,
}

impl TariffSchedule {
    /// Queensland retail figures: 11 ¢ feed-in, 20.3 ¢ off-peak and 25.6 ¢
    /// on-peak, with a 16:00-20:00 peak window and 15-minute intervals.
    /// The window itself is an assumption, not a published tariff.
    pub fn queensland_default() -> Self {
        Self {
            fit: 11.0,
            on_peak: 25.6,
            off_peak: 20.3,
            peak_windows: vec![PeakWindow {
                start: ClockTime(16 * 60),
                end: ClockTime(20 * 60),
            }],
            interval_hours: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), SettlementError> {
        let bad = |msg: String| Err(SettlementError::InvalidTariff(msg));
        for (name, v) in [
            ("fit", self.fit),
            ("on_peak", self.on_peak),
            ("off_peak", self.off_peak),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.fit < self.off_peak && self.off_peak <= self.on_peak) {
            return bad(format!(
                "expected fit < off_peak <= on_peak, got {} / {} / {}",
                self.fit, self.off_peak, self.on_peak
            ));
        }
        if !(self.interval_hours.is_finite() && self.interval_hours > 0.0) {
            return bad(format!("interval_hours = {} must be positive", self.interval_hours));
        }
        let per_day = 24.0 / self.interval_hours;
        if (per_day - per_day.round()).abs() > 1e-9 {
            return bad(format!(
                "interval_hours = {} does not divide the day evenly",
                self.interval_hours
            ));
        }
        let mut windows = self.peak_windows.clone();
        windows.sort_by_key(|w| w.start);
        for w in &windows {
            if w.start >= w.end {
                return bad(format!("peak window {}-{} is empty", w.start, w.end));
            }
        }
        if let Some(pair) = windows.windows(2).find(|p| p[1].start < p[0].end) {
            return bad(format!(
                "peak windows {}-{} and {}-{} overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            ));
        }
        Ok(())
    }

    pub fn intervals_per_day(&self) -> usize {
        (24.0 / self.interval_hours).round() as usize
    }

    /// Start of interval `t` as minutes after midnight.
    pub fn interval_start_minutes(&self, t: usize) -> f64 {
        t as f64 * self.interval_hours * 60.0
    }

    pub fn is_peak(&self, t: usize) -> bool {
        let start = self.interval_start_minutes(t);
        self.peak_windows.iter().any(|w| w.contains(start))
    }
}

/// Retail price in ¢/kWh for interval `t`, decided by the interval's start
/// time.
pub fn grid_price_at(t: usize, tariffs: &TariffSchedule) -> Result<f64, SettlementError> {
    let intervals = tariffs.intervals_per_day();
    if t >= intervals {
        return Err(SettlementError::IntervalOutOfRange { t, intervals });
    }
    Ok(if tariffs.is_peak(t) {
        tariffs.on_peak
    } else {
        tariffs.off_peak
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Seller,
    Buyer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementRow {
    pub interval: usize,
    pub participant: ProsumerId,
    pub role: Role,
    pub amount_cents: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SettlementReport {
    pub seller_profit_cents: BTreeMap<ProsumerId, f64>,
    pub buyer_savings_cents: BTreeMap<ProsumerId, f64>,
    pub rows: Vec<SettlementRow>,
}

impl SettlementReport {
    pub fn seller_profit_dollars(&self, id: &ProsumerId) -> f64 {
        self.seller_profit_cents.get(id).copied().unwrap_or(0.0) / 100.0
    }

    pub fn buyer_savings_dollars(&self, id: &ProsumerId) -> f64 {
        self.buyer_savings_cents.get(id).copied().unwrap_or(0.0) / 100.0
    }
}

/// Seller profit and buyer savings over a set of cleared intervals.
pub fn settle_day(
    per_interval: &[(usize, MarketResult)],
    tariffs: &TariffSchedule,
) -> Result<SettlementReport, SettlementError> {
    tariffs.validate()?;
    let mut seen = BTreeSet::new();
    let mut cells: BTreeMap<(usize, Role, ProsumerId), f64> = BTreeMap::new();

    for (t, market) in per_interval {
        if !seen.insert(*t) {
            return Err(SettlementError::DuplicateInterval(*t));
        }
        let grid_price = grid_price_at(*t, tariffs)?;
        for txn in &market.transactions {
            let energy = txn.power * tariffs.interval_hours;
            *cells.entry((*t, Role::Seller, txn.seller.clone())).or_default() +=
                (txn.price - tariffs.fit) * energy;
            *cells.entry((*t, Role::Buyer, txn.buyer.clone())).or_default() +=
                (grid_price - txn.price) * energy;
        }
    }

    let mut report = SettlementReport::default();
    for ((interval, role, participant), amount_cents) in cells {
        let totals = match role {
            Role::Seller => &mut report.seller_profit_cents,
            Role::Buyer => &mut report.buyer_savings_cents,
        };
        *totals.entry(participant.clone()).or_default() += amount_cents;
        report.rows.push(SettlementRow {
            interval,
            participant,
            role,
            amount_cents,
        });
    }
    Ok(report)
}
