//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the PASS/FAIL lines always reach the console.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use p2pgrid::feasibility::{
    annualize_losses, check_voltage_limits, curtail_for_voltage, injections_from_trades, losses_for_injections,
    map_transactions_to_injections, BusTrade, LimitKind, VoltageLimits,
};
use p2pgrid::grid::{power_flow, Branch, Bus, BusId, BusKind, InjectionSet, NetworkModel, SolverSettings, ValidatedNetwork};
use p2pgrid::market::{clear_market, mmr_price, Bid, Offer};
use p2pgrid::scenario::{derive_interval_market, load_scenario, parse_bus_trades};
use p2pgrid::settlement::{grid_price_at, settle_day, TariffSchedule};
use p2pgrid::PowerFlowSolution;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn net() -> ValidatedNetwork {
    ValidatedNetwork::new(support::shipped_network()).unwrap()
}

fn trade(s: u32, b: u32, kw: f64) -> BusTrade {
    BusTrade { seller_bus: BusId(s), buyer_bus: BusId(b), power_kw: kw }
}

fn cleared_trace() -> Outcome {
    let offers = vec![
        Offer::new("S1", 17.0, 3.7, 4),
        Offer::new("S2", 15.0, 4.2, 5),
        Offer::new("S3", 16.0, 3.5, 3),
    ];
    let bids = vec![Bid::new("B1", 15.0, 6.4, 2), Bid::new("B2", 14.0, 5.0, 1)];
    let mut best = Duration::MAX;
    let mut result = None;
    for _ in 0..20 {
        let start = Instant::now();
        let r = clear_market(&offers, &bids).map_err(|e| e.to_string())?;
        best = best.min(start.elapsed());
        result = Some(r);
    }
    let r = result.unwrap();
    let got: Vec<(&str, &str, f64, f64)> =
        r.transactions.iter().map(|t| (t.seller.as_str(), t.buyer.as_str(), t.power, t.price)).collect();
    let want = [("S2", "B2", 4.2, 14.5), ("S3", "B2", 0.8, 15.0), ("S3", "B1", 2.7, 15.5), ("S1", "B1", 3.7, 16.0)];
    check(got.len() == 4, || format!("{} transactions", got.len()))?;
    for (g, w) in got.iter().zip(want) {
        check(g.0 == w.0 && g.1 == w.1 && g.3 == w.3 && (g.2 - w.2).abs() < 1e-12, || format!("{g:?} != {w:?}"))?;
    }
    let b2 = r.avg_buyer_price[&"B2".into()];
    let s3 = r.avg_seller_price[&"S3".into()];
    check(b2 == 14.75 && s3 == 15.25, || format!("averages {b2} / {s3}"))?;
    check(best < Duration::from_millis(1), || format!("took {best:?}"))?;
    Ok(format!("4 transactions, B2 avg {b2}, S3 avg {s3}, {best:?}"))
}

fn mmr_pairs() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..10_000 {
        let (s, b) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
        let p = mmr_price(s, b).map_err(|e| e.to_string())?;
        check(p == (s + b) / 2.0, || format!("mmr({s}, {b}) = {p}"))?;
        check(s.min(b) <= p && p <= s.max(b), || format!("mmr({s}, {b}) = {p} outside"))?;
    }
    Ok("10000 pairs".into())
}

fn benefit_sign() -> Outcome {
    let tariffs = TariffSchedule::queensland_default();
    let mut rng = StdRng::seed_from_u64(2);
    let mut trades = 0;
    for day in 0..1000 {
        let mut cleared = Vec::new();
        for t in 0..tariffs.intervals_per_day() {
            if !rng.gen_bool(0.3) {
                continue;
            }
            let grid = grid_price_at(t, &tariffs).map_err(|e| e.to_string())?;
            let price = |rng: &mut StdRng| rng.gen_range(tariffs.fit + 0.01..grid - 0.01);
            let (n_s, n_b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let offers: Vec<Offer> =
                (0..n_s).map(|i| Offer::new(format!("s{i}"), price(&mut rng), rng.gen_range(0.1..6.0), 100 + i)).collect();
            let bids: Vec<Bid> =
                (0..n_b).map(|i| Bid::new(format!("b{i}"), price(&mut rng), rng.gen_range(0.1..6.0), 1 + i)).collect();
            let m = clear_market(&offers, &bids).map_err(|e| e.to_string())?;
            trades += m.transactions.len();
            cleared.push((t, m));
        }
        let report = settle_day(&cleared, &tariffs).map_err(|e| e.to_string())?;
        for (id, v) in report.seller_profit_cents.iter().chain(&report.buyer_savings_cents) {
            check(*v > 0.0, || format!("day {day}: {id} gets {v}"))?;
        }
    }
    Ok(format!("1000 days, {trades} transactions"))
}

fn annualization() -> Outcome {
    let t = TariffSchedule::queensland_default();
    let a = annualize_losses(1.21, 35040, &t, 0.25).map_err(|e| e.to_string())?;
    let mw = a.cumulative_mw();
    check((mw - 42.40).abs() <= 0.05, || format!("{mw} MW"))?;
    check(a.cost_low <= 2700.0 && a.cost_high >= 2200.0, || format!("${} to ${}", a.cost_low, a.cost_high))?;
    Ok(format!("{mw:.4} MW, {:.4} MWh, ${:.2} to ${:.2}", a.energy_mwh, a.cost_low, a.cost_high))
}

fn two_bus(p: f64, q: f64, r: f64, x: f64) -> NetworkModel {
    NetworkModel {
        name: "two-bus".into(),
        base_kva: 100.0,
        base_kv: 0.4,
        buses: vec![
            Bus { id: BusId(1), kind: BusKind::Slack, p_load_kw: 0.0, q_load_kvar: 0.0, nominal_kv: 0.4 },
            Bus { id: BusId(2), kind: BusKind::Load, p_load_kw: p, q_load_kvar: q, nominal_kv: 0.4 },
        ],
        branches: vec![Branch { from: BusId(1), to: BusId(2), r_ohm: r, x_ohm: x }],
    }
}

/// Every converged solution produced by the acceptance run, for the
/// conservation check.
struct Solves(Vec<(String, PowerFlowSolution, f64)>);

impl Solves {
    fn solve(&mut self, label: &str, model: NetworkModel, inj: &InjectionSet) -> Result<PowerFlowSolution, String> {
        let base = model.base_kva;
        let net = ValidatedNetwork::new(model).map_err(|e| e.to_string())?;
        let sol = power_flow(&net, inj, &SolverSettings::default()).map_err(|e| format!("{label}: {e}"))?;
        self.0.push((label.to_owned(), sol.clone(), base));
        Ok(sol)
    }
}

fn power_flow_oracle(solves: &mut Solves) -> Outcome {
    let start = Instant::now();
    let mut worst_two = 0.0f64;
    for (p, q, r, x) in [(10.0, 3.0, 0.1, 0.05), (50.0, 20.0, 0.2, 0.1), (1.0, 0.0, 0.5, 0.0), (80.0, 40.0, 0.05, 0.2)] {
        let sol = solves.solve("two-bus", two_bus(p, q, r, x), &InjectionSet::default())?;
        let v = support::two_bus_voltage(p / 100.0, q / 100.0, r / 1.6, x / 1.6);
        worst_two = worst_two.max((sol.v_mag[&BusId(2)] - v).abs());
    }
    check(worst_two < 1e-8, || format!("two-bus error {worst_two:e}"))?;

    let mut rng = StdRng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let buses = rng.gen_range(2..=4);
        let model = support::random_radial(&mut rng, buses, 40.0);
        let mut inj = InjectionSet::default();
        if rng.gen_bool(0.5) {
            inj.inject(BusId(buses as u32), rng.gen_range(0.0..30.0));
        }
        let oracle = support::ybus_fixed_point(&model, &inj);
        let sol = solves.solve("random", model, &inj)?;
        for (bus, v) in &oracle {
            worst = worst.max((sol.v_mag[bus] - v.norm()).abs());
        }
    }
    let took = start.elapsed();
    check(worst < 1e-7, || format!("random-network error {worst:e}"))?;
    check(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!("two-bus {worst_two:.1e} pu, 100 random {worst:.1e} pu, {took:?}"))
}

fn conservation(solves: &mut Solves) -> Outcome {
    // Add the shipped feeder's studies: base case, loss batch, each interval
    // of the example day.
    let model = support::shipped_network();
    solves.solve("base", model.clone(), &InjectionSet::default())?;
    let text = std::fs::read_to_string(support::data_dir().join("batch_trades.csv")).map_err(|e| e.to_string())?;
    let batch = parse_bus_trades(&text).map_err(|e| e.to_string())?;
    solves.solve("loss batch", model.clone(), &injections_from_trades(&batch))?;
    let scenario = load_scenario(&support::data_dir().join("scenario.toml")).map_err(|e| e.to_string())?;
    for t in 0..scenario.intervals() {
        let (offers, bids) = derive_interval_market(&scenario.profiles, t);
        let market = clear_market(&offers, &bids).map_err(|e| e.to_string())?;
        let inj = map_transactions_to_injections(&market, &scenario.placement()).map_err(|e| e.to_string())?;
        solves.solve(&format!("interval {t}"), model.clone(), &inj)?;
    }
    let mut worst = 0.0f64;
    for (label, sol, base) in &solves.0 {
        let r = sol.power_balance_residual().abs();
        check(r < 1e-6 * base, || format!("{label}: residual {r:e} kW"))?;
        worst = worst.max(r);
    }
    Ok(format!("{} solves, worst residual {worst:.1e} kW", solves.0.len()))
}

fn over_voltage_and_curtailment() -> Outcome {
    let n = net();
    let limits = VoltageLimits::default();
    let settings = SolverSettings::default();
    let example = injections_from_trades(&[trade(2, 3, 2.8), trade(2, 6, 1.4), trade(5, 14, 3.7), trade(4, 19, 3.5)]);
    let stressed = example.scaled(2.5);
    let sol = power_flow(&n, &stressed, &settings).map_err(|e| e.to_string())?;
    let upper: Vec<_> = check_voltage_limits(&sol, &limits)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|v| v.limit == LimitKind::Upper)
        .collect();
    check(!upper.is_empty(), || "no upper violation at 2.5x".into())?;
    let c = curtail_for_voltage(&n, &stressed, &limits, &settings, 0.1).map_err(|e| e.to_string())?;
    let after = check_voltage_limits(&c.solution, &limits).map_err(|e| e.to_string())?;
    check(after.iter().all(|v| v.limit != LimitKind::Upper), || format!("still violated: {after:?}"))?;
    let cut: f64 = c.curtailed.values().sum();
    Ok(format!(
        "{} at {:.4} pu; {cut:.1} kW curtailed in {} steps, max now {:.4} pu",
        upper[0].bus,
        upper[0].v_mag,
        c.steps,
        c.solution.max_voltage().map_or(1.0, |m| m.1)
    ))
}

fn adjacent_versus_cross() -> Outcome {
    let n = net();
    let s = SolverSettings::default();
    let loss = |t: BusTrade| {
        losses_for_injections(&n, &injections_from_trades(&[t]), &s)
            .map(|l| l.transaction_losses_kw)
            .map_err(|e| e.to_string())
    };
    let adjacent = loss(trade(26, 27, 5.0))?;
    let cross = loss(trade(6, 27, 5.0))?;
    check(adjacent < cross, || format!("{adjacent} >= {cross}"))?;
    check((adjacent - 0.016151579287).abs() < 1e-6, || format!("adjacent {adjacent}"))?;
    check((cross - 0.293694894314).abs() < 1e-6, || format!("cross {cross}"))?;
    Ok(format!("26->27 {adjacent:.6} kW < 6->27 {cross:.6} kW"))
}

fn market_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    let mut total = 0;
    for i in 0..1000 {
        let (offers, bids) = support::random_market(&mut rng, 6, 6);
        let engine = clear_market(&offers, &bids).map_err(|e| e.to_string())?;
        let oracle = support::market_oracle(&offers, &bids);
        check(engine.transactions.len() == oracle.len(), || format!("instance {i}: length"))?;
        for (t, (s, b, p, price)) in engine.transactions.iter().zip(&oracle) {
            let same = t.seller.as_str() == s && t.buyer.as_str() == b && (t.power - p).abs() < 1e-9 && t.price == *price;
            check(same, || format!("instance {i}: {t:?} vs {s} {b} {p} {price}"))?;
        }
        total += oracle.len();
    }
    Ok(format!("1000 instances, {total} transactions"))
}

fn determinism() -> Outcome {
    let scenario = support::data_dir().join("scenario.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_p2pgrid"))
            .args(["simulate", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        std::fs::read(Path::new(&out).join("report.json")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    check(a == b, || "reports differ".into())?;
    Ok(format!("report.json identical ({} bytes)", a.len()))
}

fn main() -> ExitCode {
    let mut solves = Solves(Vec::new());
    let results: Vec<(&str, Outcome)> = vec![
        ("1 clearing trace", cleared_trace()),
        ("2 mid-market price", mmr_pairs()),
        ("3 benefit sign", benefit_sign()),
        ("4 annualization", annualization()),
        ("5 power-flow oracle", power_flow_oracle(&mut solves)),
        ("6 conservation", conservation(&mut solves)),
        ("7 over-voltage and curtailment", over_voltage_and_curtailment()),
        ("8 adjacent vs cross-feeder losses", adjacent_versus_cross()),
        ("9 market oracle", market_oracle()),
        ("10 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
