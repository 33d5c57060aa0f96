//! Rule-based P2P market clearing for a single trading interval.
//!
//! Sellers are ranked by declared price, buyers by their registration order.
//! Supply and demand are then balanced by trimming the most expensive seller
//! or the last registered buyer, and every buyer in turn purchases from the
//! cheapest seller that still has power left. Each purchase is priced at the
//! mid-market rate of the two declared prices.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::EPS;

/// Opaque prosumer identifier, unique within a scenario.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProsumerId(String);

impl ProsumerId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProsumerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&self.0)
    }
}

impl From<&str> for ProsumerId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ProsumerId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("participant {0} appears more than once")]
    DuplicateParticipant(ProsumerId),
    #[error("buyers {first} and {second} share registration order {bcro}")]
    DuplicateBuyerOrder {
        bcro: u32,
        first: ProsumerId,
        second: ProsumerId,
    },
    #[error("participant {0} cannot sell and buy in the same interval")]
    RoleConflict(ProsumerId),
    #[error("{who}: price {price} must be finite and non-negative")]
    InvalidPrice { who: String, price: f64 },
    #[error("{who}: quantity {quantity} must be finite and positive")]
    InvalidQuantity { who: ProsumerId, quantity: f64 },
    #[error("{0}: registration order must be at least 1")]
    InvalidOrder(ProsumerId),
}

/// A seller's offer: declared price in ¢/kWh and surplus power in kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub seller: ProsumerId,
    pub price: f64,
    pub quantity: f64,
    pub bcro: u32,
}

/// A buyer's bid: declared price in ¢/kWh and demand in kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub buyer: ProsumerId,
    pub price: f64,
    pub quantity: f64,
    pub bcro: u32,
}

impl Offer {
    pub fn new(seller: impl Into<ProsumerId>, price: f64, quantity: f64, bcro: u32) -> Self {
        Self {
            seller: seller.into(),
            price,
            quantity,
            bcro,
        }
    }
}

impl Bid {
    pub fn new(buyer: impl Into<ProsumerId>, price: f64, quantity: f64, bcro: u32) -> Self {
        Self {
            buyer: buyer.into(),
            price,
            quantity,
            bcro,
        }
    }
}

/// Common view over offers and bids used by validation and balancing.
trait Participant {
    fn id(&self) -> &ProsumerId;
    fn price(&self) -> f64;
    fn bcro(&self) -> u32;
    fn quantity_mut(&mut self) -> &mut f64;

    fn validate(&mut self) -> Result<(), MarketError> {
        let price = self.price();
        if !price.is_finite() || price < 0.0 {
            return Err(MarketError::InvalidPrice {
                who: self.id().to_string(),
                price,
            });
        }
        let quantity = *self.quantity_mut();
        if !quantity.is_finite() || quantity <= 0.0 {
            return Err(MarketError::InvalidQuantity {
                who: self.id().clone(),
                quantity,
            });
        }
        if self.bcro() < 1 {
            return Err(MarketError::InvalidOrder(self.id().clone()));
        }
        Ok(())
    }
}

impl Participant for Offer {
    fn id(&self) -> &ProsumerId {
        &self.seller
    }
    fn price(&self) -> f64 {
        self.price
    }
    fn bcro(&self) -> u32 {
        self.bcro
    }
    fn quantity_mut(&mut self) -> &mut f64 {
        &mut self.quantity
    }
}

impl Participant for Bid {
    fn id(&self) -> &ProsumerId {
        &self.buyer
    }
    fn price(&self) -> f64 {
        self.price
    }
    fn bcro(&self) -> u32 {
        self.bcro
    }
    fn quantity_mut(&mut self) -> &mut f64 {
        &mut self.quantity
    }
}

fn validate_all<P: Participant>(items: &mut [P]) -> Result<(), MarketError> {
    let mut seen = BTreeSet::new();
    for item in items.iter_mut() {
        item.validate()?;
        if !seen.insert(item.id().clone()) {
            return Err(MarketError::DuplicateParticipant(item.id().clone()));
        }
    }
    Ok(())
}

/// One matched trade between a seller and a buyer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    /// 1-based emission index within the interval.
    pub index: usize,
    pub seller: ProsumerId,
    pub buyer: ProsumerId,
    /// kW
    pub power: f64,
    /// ¢/kWh
    pub price: f64,
}

/// Supply and demand after the balancing step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BalancedMarket {
    pub offers: Vec<Offer>,
    pub bids: Vec<Bid>,
    pub seller_curtailed: BTreeMap<ProsumerId, f64>,
    pub buyer_curtailed: BTreeMap<ProsumerId, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketResult {
    pub transactions: Vec<Transaction>,
    /// kW removed from each seller's offer while balancing; sellers that were
    /// not curtailed are absent.
    pub seller_curtailed: BTreeMap<ProsumerId, f64>,
    pub buyer_curtailed: BTreeMap<ProsumerId, f64>,
    /// Unweighted mean transaction price per seller, ¢/kWh.
    pub avg_seller_price: BTreeMap<ProsumerId, f64>,
    pub avg_buyer_price: BTreeMap<ProsumerId, f64>,
    pub txn_count_per_seller: BTreeMap<ProsumerId, usize>,
    pub txn_count_per_buyer: BTreeMap<ProsumerId, usize>,
}

impl MarketResult {
    /// Total traded power in kW.
    pub fn traded_power(&self) -> f64 {
        self.transactions.iter().map(|t| t.power).sum()
    }

    pub fn sold_by(&self, seller: &ProsumerId) -> f64 {
        self.transactions
            .iter()
            .filter(|t| &t.seller == seller)
            .map(|t| t.power)
            .sum()
    }

    pub fn bought_by(&self, buyer: &ProsumerId) -> f64 {
        self.transactions
            .iter()
            .filter(|t| &t.buyer == buyer)
            .map(|t| t.power)
            .sum()
    }

    /// Power-weighted mean transaction price, or `None` with no trades.
    pub fn weighted_price(&self) -> Option<f64> {
        let power = self.traded_power();
        (power > EPS).then(|| {
            self.transactions
                .iter()
                .map(|t| t.price * t.power)
                .sum::<f64>()
                / power
        })
    }
}

/// Mid-market rate: the midpoint of the seller's and buyer's declared prices.
pub fn mmr_price(seller_price: f64, buyer_price: f64) -> Result<f64, MarketError> {
    for (who, price) in [("seller price", seller_price), ("buyer price", buyer_price)] {
        if !price.is_finite() || price < 0.0 {
            return Err(MarketError::InvalidPrice {
                who: who.to_owned(),
                price,
            });
        }
    }
    Ok((seller_price + buyer_price) / 2.0)
}

/// Orders sellers by ascending declared price. Ties fall back to
/// registration order and then to the prosumer id.
pub fn sort_sellers(offers: &[Offer]) -> Result<Vec<Offer>, MarketError> {
    let mut sorted = offers.to_vec();
    validate_all(&mut sorted)?;
    sorted.sort_by(|a, b| {
        a.price
            .total_cmp(&b.price)
            .then(a.bcro.cmp(&b.bcro))
            .then_with(|| a.seller.cmp(&b.seller))
    });
    Ok(sorted)
}

/// Orders buyers by registration order, which must be unique.
pub fn sort_buyers(bids: &[Bid]) -> Result<Vec<Bid>, MarketError> {
    let mut sorted = bids.to_vec();
    validate_all(&mut sorted)?;
    sorted.sort_by_key(|b| b.bcro);
    if let Some(pair) = sorted.windows(2).find(|w| w[0].bcro == w[1].bcro) {
        return Err(MarketError::DuplicateBuyerOrder {
            bcro: pair[0].bcro,
            first: pair[0].buyer.clone(),
            second: pair[1].buyer.clone(),
        });
    }
    Ok(sorted)
}

/// Removes `gap` kW starting from the back of `items`. The marginal
/// participant is reduced partially; exhausted ones are dropped.
fn curtail_from_back<P: Participant>(
    items: &mut Vec<P>,
    mut gap: f64,
    records: &mut BTreeMap<ProsumerId, f64>,
) {
    while gap > EPS {
        let Some(last) = items.last_mut() else { break };
        let quantity = last.quantity_mut();
        let cut = quantity.min(gap);
        *quantity -= cut;
        gap -= cut;
        let leftover = *quantity;
        let id = last.id().clone();
        let record = records.entry(id).or_insert(0.0);
        *record += cut;
        if leftover <= EPS {
            *record += leftover;
            items.pop();
        }
    }
}

/// Balances total supply against total demand. Excess supply is removed
/// from the most expensive sellers, excess demand from the last registered
/// buyers. Inputs must already be sorted.
pub fn balance_power(sorted_offers: Vec<Offer>, sorted_bids: Vec<Bid>) -> BalancedMarket {
    let mut market = BalancedMarket {
        offers: sorted_offers,
        bids: sorted_bids,
        ..Default::default()
    };
    let supply: f64 = market.offers.iter().map(|o| o.quantity).sum();
    let demand: f64 = market.bids.iter().map(|b| b.quantity).sum();

    match supply.partial_cmp(&demand) {
        Some(Ordering::Greater) => curtail_from_back(
            &mut market.offers,
            supply - demand,
            &mut market.seller_curtailed,
        ),
        Some(Ordering::Less) => curtail_from_back(
            &mut market.bids,
            demand - supply,
            &mut market.buyer_curtailed,
        ),
        _ => {}
    }
    market
}

/// Clears one trading interval.
pub fn clear_market(offers: &[Offer], bids: &[Bid]) -> Result<MarketResult, MarketError> {
    let sellers: BTreeSet<&ProsumerId> = offers.iter().map(|o| &o.seller).collect();
    if let Some(b) = bids.iter().find(|b| sellers.contains(&b.buyer)) {
        return Err(MarketError::RoleConflict(b.buyer.clone()));
    }

    let balanced = balance_power(sort_sellers(offers)?, sort_buyers(bids)?);

    let mut remaining: Vec<f64> = balanced.offers.iter().map(|o| o.quantity).collect();
    let mut cursor = 0;
    let mut transactions = Vec::new();

    for bid in &balanced.bids {
        let mut need = bid.quantity;
        while need > EPS {
            while cursor < remaining.len() && remaining[cursor] <= EPS {
                cursor += 1;
            }
            let Some(offer) = balanced.offers.get(cursor) else {
                break;
            };
            let power = need.min(remaining[cursor]);
            transactions.push(Transaction {
                index: transactions.len() + 1,
                seller: offer.seller.clone(),
                buyer: bid.buyer.clone(),
                power,
                price: mmr_price(offer.price, bid.price)?,
            });
            remaining[cursor] -= power;
            need -= power;
        }
    }

    let mut seller_acc: BTreeMap<ProsumerId, (f64, usize)> = BTreeMap::new();
    let mut buyer_acc: BTreeMap<ProsumerId, (f64, usize)> = BTreeMap::new();
    for t in &transactions {
        let s = seller_acc.entry(t.seller.clone()).or_default();
        s.0 += t.price;
        s.1 += 1;
        let b = buyer_acc.entry(t.buyer.clone()).or_default();
        b.0 += t.price;
        b.1 += 1;
    }
    let averages = |acc: &BTreeMap<ProsumerId, (f64, usize)>| {
        acc.iter()
            .map(|(id, (sum, n))| (id.clone(), sum / *n as f64))
            .collect()
    };
    let counts = |acc: &BTreeMap<ProsumerId, (f64, usize)>| {
        acc.iter().map(|(id, (_, n))| (id.clone(), *n)).collect()
    };

    Ok(MarketResult {
        avg_seller_price: averages(&seller_acc),
        avg_buyer_price: averages(&buyer_acc),
        txn_count_per_seller: counts(&seller_acc),
        txn_count_per_buyer: counts(&buyer_acc),
        transactions,
        seller_curtailed: balanced.seller_curtailed,
        buyer_curtailed: balanced.buyer_curtailed,
    })
}
