//! Test-only reference implementations and fixtures. Nothing here calls
//! into the solver or the clearing engine it is used to check.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use p2pgrid::grid::{Branch, Bus, BusId, BusKind, InjectionSet, NetworkModel};
use p2pgrid::market::{Bid, Offer};
use rand::Rng;

/// Shipped data directory, whichever crate's tests include this module.
pub fn data_dir() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let own = here.join("data");
    if own.join("network27.toml").is_file() {
        own
    } else {
        here.join("../core/data")
    }
}

pub fn shipped_network() -> NetworkModel {
    let text = std::fs::read_to_string(data_dir().join("network27.toml")).unwrap();
    NetworkModel::from_toml(&text).unwrap()
}

/// (seller, buyer, power kW, price ¢/kWh)
pub type Trade = (String, String, f64, f64);

/// Straight-line transcription of the clearing loop: sort, balance with a
/// while loop, then let each buyer purchase from the cheapest seller.
pub fn market_oracle(offers: &[Offer], bids: &[Bid]) -> Vec<Trade> {
    // Step 1: selection sort on explicit keys.
    let mut s: Vec<(String, f64, f64, u32)> = offers
        .iter()
        .map(|o| (o.seller.to_string(), o.price, o.quantity, o.bcro))
        .collect();
    for i in 0..s.len() {
        let mut best = i;
        for j in i + 1..s.len() {
            let (a, b) = (&s[j], &s[best]);
            let better = a.1 < b.1
                || (a.1 == b.1 && a.3 < b.3)
                || (a.1 == b.1 && a.3 == b.3 && a.0 < b.0);
            if better {
                best = j;
            }
        }
        s.swap(i, best);
    }
    let mut b: Vec<(String, f64, f64, u32)> = bids
        .iter()
        .map(|x| (x.buyer.to_string(), x.price, x.quantity, x.bcro))
        .collect();
    for i in 0..b.len() {
        let mut best = i;
        for j in i + 1..b.len() {
            if b[j].3 < b[best].3 {
                best = j;
            }
        }
        b.swap(i, best);
    }

    // Step 2: trim the tail of the longer side until both sums agree.
    loop {
        let supply: f64 = s.iter().map(|x| x.2).sum();
        let demand: f64 = b.iter().map(|x| x.2).sum();
        let diff = supply - demand;
        if diff.abs() <= 1e-9 {
            break;
        }
        let side = if diff > 0.0 { &mut s } else { &mut b };
        let Some(last) = side.last_mut() else { break };
        if last.2 > diff.abs() + 1e-9 {
            last.2 -= diff.abs();
        } else {
            side.pop();
        }
    }

    // Step 3.
    let mut out = Vec::new();
    for buyer in &b {
        let mut got = 0.0;
        while buyer.2 - got > 1e-9 {
            let Some(seller) = s.iter_mut().find(|x| x.2 > 1e-9) else {
                break;
            };
            let amount = (buyer.2 - got).min(seller.2);
            out.push((
                seller.0.clone(),
                buyer.0.clone(),
                amount,
                (seller.1 + buyer.1) / 2.0,
            ));
            seller.2 -= amount;
            got += amount;
        }
    }
    out
}

/// Receiving-end voltage magnitude of a single line feeding a constant-power
/// load from a 1.0 pu source, from the biquadratic
/// `V^4 + (2(PR + QX) - 1) V^2 + (P^2 + Q^2)(R^2 + X^2) = 0`.
pub fn two_bus_voltage(p: f64, q: f64, r: f64, x: f64) -> f64 {
    let b = 2.0 * (p * r + q * x) - 1.0;
    let c = (p * p + q * q) * (r * r + x * x);
    ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
}

/// Line loss (pu) for the two-bus case: |I|^2 R with |I| = |S| / V.
pub fn two_bus_loss(p: f64, q: f64, r: f64, x: f64) -> f64 {
    let v = two_bus_voltage(p, q, r, x);
    (p * p + q * q) / (v * v) * r
}

/// Full nonlinear solve by fixed-point iteration on the bus admittance
/// equations: `V_L = Y_LL^-1 (conj(S_L / V_L) - Y_L0 V_0)`. Works for any
/// topology. Returns complex voltages in pu keyed by bus.
pub fn ybus_fixed_point(net: &NetworkModel, inj: &InjectionSet) -> BTreeMap<BusId, Complex64> {
    let n = net.buses.len();
    let pos: BTreeMap<BusId, usize> = net.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let slack = net.buses.iter().position(|b| b.kind == BusKind::Slack).unwrap();
    let zbase = net.base_kv * net.base_kv * 1000.0 / net.base_kva;

    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in &net.branches {
        let (a, b) = (pos[&br.from], pos[&br.to]);
        let yb = Complex64::new(1.0, 0.0) / (Complex64::new(br.r_ohm, br.x_ohm) / zbase);
        y[(a, a)] += yb;
        y[(b, b)] += yb;
        y[(a, b)] -= yb;
        y[(b, a)] -= yb;
    }

    // Injected complex power per bus (generation positive).
    let mut s_inj = vec![Complex64::new(0.0, 0.0); n];
    for (i, bus) in net.buses.iter().enumerate() {
        s_inj[i] = -Complex64::new(bus.p_load_kw, bus.q_load_kvar) / net.base_kva;
    }
    for (b, p) in &inj.injections_kw {
        s_inj[pos[b]] += Complex64::new(p / net.base_kva, 0.0);
    }
    for (b, p) in &inj.added_demand_kw {
        s_inj[pos[b]] -= Complex64::new(p / net.base_kva, 0.0);
    }

    let others: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = others.len();
    let mut yll = DMatrix::<Complex64>::zeros(m, m);
    let mut yl0 = DVector::<Complex64>::zeros(m);
    for (r, &i) in others.iter().enumerate() {
        yl0[r] = y[(i, slack)];
        for (c, &j) in others.iter().enumerate() {
            yll[(r, c)] = y[(i, j)];
        }
    }
    let lu = yll.lu();
    let v0 = Complex64::new(1.0, 0.0);
    let mut v = DVector::<Complex64>::from_element(m, v0);
    for _ in 0..10_000 {
        let mut rhs = DVector::<Complex64>::zeros(m);
        for (r, &i) in others.iter().enumerate() {
            rhs[r] = (s_inj[i] / v[r]).conj() - yl0[r] * v0;
        }
        let next = lu.solve(&rhs).unwrap();
        let change = (&next - &v).iter().map(|d| d.norm()).fold(0.0, f64::max);
        v = next;
        if change < 1e-14 {
            break;
        }
    }

    let mut out = BTreeMap::new();
    out.insert(net.buses[slack].id, v0);
    for (r, &i) in others.iter().enumerate() {
        out.insert(net.buses[i].id, v[r]);
    }
    out
}

/// Random radial network: bus 1 is the slack, every later bus hangs off a
/// uniformly chosen earlier one.
pub fn random_radial<R: Rng>(rng: &mut R, buses: usize, max_load_kw: f64) -> NetworkModel {
    let mut model = NetworkModel {
        name: "random".into(),
        base_kva: 100.0,
        base_kv: 0.4,
        buses: vec![Bus {
            id: BusId(1),
            kind: BusKind::Slack,
            p_load_kw: 0.0,
            q_load_kvar: 0.0,
            nominal_kv: 0.4,
        }],
        branches: Vec::new(),
    };
    for k in 2..=buses as u32 {
        let p = rng.gen_range(0.0..max_load_kw);
        model.buses.push(Bus {
            id: BusId(k),
            kind: BusKind::Load,
            p_load_kw: p,
            q_load_kvar: p * rng.gen_range(0.0..0.5),
            nominal_kv: 0.4,
        });
        let parent = rng.gen_range(1..k);
        let r = rng.gen_range(0.01..0.3);
        model.branches.push(Branch {
            from: BusId(parent),
            to: BusId(k),
            r_ohm: r,
            x_ohm: r * rng.gen_range(0.05..0.6),
        });
    }
    model
}

/// Random offers and bids with distinct ids and buyer registration orders.
pub fn random_market<R: Rng>(rng: &mut R, max_sellers: usize, max_buyers: usize) -> (Vec<Offer>, Vec<Bid>) {
    let sellers = rng.gen_range(0..=max_sellers);
    let buyers = rng.gen_range(0..=max_buyers);
    // Coarse grids make price ties and exact balances likely.
    let price = |rng: &mut R| f64::from(rng.gen_range(22..=60u32)) / 2.0;
    let qty = |rng: &mut R| f64::from(rng.gen_range(1..=80u32)) / 10.0;
    let mut orders: Vec<u32> = (1..=(sellers + buyers) as u32).collect();
    for i in (1..orders.len()).rev() {
        let j = rng.gen_range(0..=i);
        orders.swap(i, j);
    }
    let offers = (0..sellers)
        .map(|i| Offer::new(format!("s{i}"), price(rng), qty(rng), orders[i]))
        .collect();
    let bids = (0..buyers)
        .map(|i| Bid::new(format!("b{i}"), price(rng), qty(rng), orders[sellers + i]))
        .collect();
    (offers, bids)
}
