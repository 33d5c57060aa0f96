use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use p2pgrid::feasibility::{annualize_losses, assess_injections, injections_from_trades, map_transactions_to_injections, BusTrade};
use p2pgrid::grid::{BusId, GridError, NetworkModel, SolverSettings, ValidatedNetwork};
use p2pgrid::market::{clear_market, Bid, MarketResult, Offer};
use p2pgrid::report::{emit_reports, fmt_sig, ReportFormat};
use p2pgrid::scenario::{derive_interval_market, load_scenario, parse_bus_trades, run_day, MarketInput, RunOptions, Scenario};
use p2pgrid::settlement::TariffSchedule;
use p2pgrid::VoltageLimits;

const EXIT_INPUT: u8 = 1;
const EXIT_NON_CONVERGENCE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "p2pgrid", version, about = "Peer-to-peer energy market and LV feeder simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear one interval's offers and bids.
    Clear(ClearArgs),
    /// Run a whole day: market, settlement and network checks.
    Simulate(SimulateArgs),
    /// Voltage and loss study for a set of bus-to-bus trades.
    Feasibility(FeasibilityArgs),
    /// Extrapolate one interval's transaction loss to a year.
    LossesAnnualize(AnnualizeArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Voltage limits in pu, e.g. 0.94,1.10.
    #[arg(long, value_parser = parse_limits)]
    limits: Option<VoltageLimits>,
    /// Power-flow convergence tolerance, pu.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Report files to write: json, summary, plot (comma separated).
    #[arg(long, value_delimiter = ',')]
    format: Vec<ReportFormat>,
}

#[derive(Args)]
struct ClearArgs {
    #[command(flatten)]
    common: Common,
    /// Offer as ID,PRICE,KW,BCRO. Repeatable.
    #[arg(long = "offer", value_parser = parse_offer)]
    offers: Vec<Offer>,
    /// Bid as ID,PRICE,KW,BCRO. Repeatable.
    #[arg(long = "bid", value_parser = parse_bid)]
    bids: Vec<Bid>,
    /// TOML file with [[offer]] and [[bid]] tables.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Take offers and bids from this interval of --scenario.
    #[arg(long)]
    interval: Option<usize>,
    /// Print the result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Skip the network studies.
    #[arg(long)]
    no_feasibility: bool,
    /// Report voltages but do not curtail.
    #[arg(long)]
    no_curtail: bool,
    /// Interval for the bus-voltage plot series (default: highest voltage).
    #[arg(long)]
    voltage_interval: Option<usize>,
}

#[derive(Args)]
struct FeasibilityArgs {
    #[command(flatten)]
    common: Common,
    /// Network TOML file, when not taken from --scenario.
    #[arg(long)]
    network: Option<PathBuf>,
    /// CSV of seller_bus,buyer_bus,power_kw rows.
    #[arg(long)]
    trades: Option<PathBuf>,
    /// Trade as SELLER_BUS:BUYER_BUS:KW. Repeatable.
    #[arg(long = "trade", value_parser = parse_trade)]
    trade: Vec<BusTrade>,
    /// Use the cleared market of this interval of --scenario.
    #[arg(long)]
    interval: Option<usize>,
    /// Scale every trade (injection and demand) by this factor.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Report voltages but do not curtail.
    #[arg(long)]
    no_curtail: bool,
    /// Curtailment step, kW.
    #[arg(long)]
    step: Option<f64>,
    /// Intervals per year for the loss extrapolation.
    #[arg(long, default_value_t = 35040)]
    intervals_per_year: u64,
    /// Print the study as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnnualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Transaction loss of one interval, kW.
    #[arg(long, allow_negative_numbers = true)]
    loss_kw: f64,
    /// Number of intervals in the year.
    #[arg(long, default_value_t = 35040)]
    intervals: u64,
    /// Interval length, hours (default from the scenario, else 0.25).
    #[arg(long)]
    interval_hours: Option<f64>,
    /// Off-peak retail price, c/kWh.
    #[arg(long)]
    off_peak: Option<f64>,
    /// On-peak retail price, c/kWh.
    #[arg(long)]
    on_peak: Option<f64>,
    /// Print the figures as JSON
    #[arg(long)]
    json: bool,
}

fn split4(s: &str) -> Result<(String, f64, f64, u32), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [id, price, kw, bcro] = parts[..] else {
        return Err(format!("expected ID,PRICE,KW,BCRO, got {s:?}"));
    };
    let num = |x: &str| x.parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let bcro = bcro.parse::<u32>().map_err(|e| format!("{bcro:?}: {e}"))?;
    Ok((id.to_owned(), num(price)?, num(kw)?, bcro))
}

fn parse_offer(s: &str) -> Result<Offer, String> {
    let (id, price, kw, bcro) = split4(s)?;
    Ok(Offer::new(id, price, kw, bcro))
}

fn parse_bid(s: &str) -> Result<Bid, String> {
    let (id, price, kw, bcro) = split4(s)?;
    Ok(Bid::new(id, price, kw, bcro))
}

fn parse_trade(s: &str) -> Result<BusTrade, String> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    let [seller, buyer, kw] = parts[..] else {
        return Err(format!("expected SELLER_BUS:BUYER_BUS:KW, got {s:?}"));
    };
    let bus = |x: &str| x.parse::<u32>().map(BusId).map_err(|e| format!("{x:?}: {e}"));
    Ok(BusTrade {
        seller_bus: bus(seller)?,
        buyer_bus: bus(buyer)?,
        power_kw: kw.parse().map_err(|e| format!("{kw:?}: {e}"))?,
    })
}

fn parse_limits(s: &str) -> Result<VoltageLimits, String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LOWER,UPPER, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    VoltageLimits::new(lo, hi).map_err(|e| e.to_string())
}

fn load(common: &Common) -> Result<Option<Scenario>> {
    let Some(path) = &common.scenario else {
        return Ok(None);
    };
    let mut scenario = load_scenario(path)?;
    if let Some(limits) = common.limits {
        scenario.limits = limits;
    }
    if let Some(tol) = common.tolerance {
        scenario.settings = SolverSettings::new(tol, scenario.settings.max_iterations)?;
    }
    Ok(Some(scenario))
}

fn require_scenario(common: &Common) -> Result<Scenario> {
    load(common)?.context("--scenario is required")
}

fn write_json(out: &Option<PathBuf>, name: &str, json: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        let path = dir.join(name);
        fs::write(&path, json).with_context(|| path.display().to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_market(m: &MarketResult) {
    println!("{:>3}  {:<10} {:<10} {:>10} {:>12}", "#", "seller", "buyer", "kW", "price c/kWh");
    for t in &m.transactions {
        println!(
            "{:>3}  {:<10} {:<10} {:>10} {:>12}",
            t.index,
            t.seller,
            t.buyer,
            fmt_sig(t.power),
            fmt_sig(t.price)
        );
    }
    println!("traded {} kW", fmt_sig(m.traded_power()));
    for (id, p) in &m.avg_seller_price {
        println!("seller {id}: average {} c/kWh over {} trades", fmt_sig(*p), m.txn_count_per_seller[id]);
    }
    for (id, p) in &m.avg_buyer_price {
        println!("buyer {id}: average {} c/kWh over {} trades", fmt_sig(*p), m.txn_count_per_buyer[id]);
    }
    for (id, kw) in m.seller_curtailed.iter().chain(&m.buyer_curtailed) {
        println!("{id}: {} kW not traded", fmt_sig(*kw));
    }
}

fn clear(args: ClearArgs) -> Result<u8> {
    let mut offers = args.offers;
    let mut bids = args.bids;
    if let Some(path) = &args.file {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let input = MarketInput::from_toml(&text)?;
        offers.extend(input.offers);
        bids.extend(input.bids);
    }
    if let Some(t) = args.interval {
        let scenario = require_scenario(&args.common)?;
        if t >= scenario.intervals() {
            bail!("interval {t} out of range (0..{})", scenario.intervals());
        }
        let (o, b) = derive_interval_market(&scenario.profiles, t);
        offers.extend(o);
        bids.extend(b);
    }
    let result = clear_market(&offers, &bids)?;
    let json = serde_json::to_string_pretty(&result)? + "\n";
    if args.json {
        print!("{json}");
    } else {
        print_market(&result);
    }
    write_json(&args.common.out, "market.json", &json)?;
    Ok(0)
}

fn simulate(args: SimulateArgs) -> Result<u8> {
    let scenario = require_scenario(&args.common)?;
    let options = RunOptions {
        feasibility: !args.no_feasibility,
        curtail: !args.no_curtail,
    };
    let report = run_day(&scenario, options)?;
    let formats = if args.common.format.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        args.common.format.clone()
    };
    let out = args.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let written = emit_reports(&report, &out, &formats, args.voltage_interval)?;

    let s = &report.summary;
    println!("scenario {}: {} intervals", report.scenario, s.intervals);
    println!("traded {} kWh", fmt_sig(s.total_traded_kwh));
    if options.feasibility {
        println!("transaction losses {} kWh", fmt_sig(s.total_transaction_losses_kwh));
        println!("voltage violation: {}", if s.any_voltage_violation { "yes" } else { "no" });
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    for rec in &report.intervals {
        if let Some(e) = &rec.error {
            eprintln!("interval {} ({}): {}: {}", rec.interval, rec.start, e.stage, e.message);
        }
    }
    Ok(if s.partial { EXIT_PARTIAL } else { 0 })
}

fn network_from(path: &Path) -> Result<ValidatedNetwork> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let model = NetworkModel::from_toml(&text).with_context(|| path.display().to_string())?;
    Ok(ValidatedNetwork::new(model)?)
}

fn feasibility(args: FeasibilityArgs) -> Result<u8> {
    let scenario = load(&args.common)?;
    let network = match (&args.network, &scenario) {
        (Some(path), _) => network_from(path)?,
        (None, Some(s)) => s.network.clone(),
        (None, None) => bail!("give --network or --scenario"),
    };
    let limits = args
        .common
        .limits
        .or(scenario.as_ref().map(|s| s.limits))
        .unwrap_or_default();
    let mut settings = scenario.as_ref().map(|s| s.settings).unwrap_or_default();
    if let Some(tol) = args.common.tolerance {
        settings = SolverSettings::new(tol, settings.max_iterations)?;
    }
    let tariffs = scenario
        .as_ref()
        .map(|s| s.tariffs.clone())
        .unwrap_or_else(TariffSchedule::queensland_default);
    let step = args
        .step
        .or(scenario.as_ref().map(|s| s.curtail_step_kw))
        .unwrap_or(p2pgrid::feasibility::DEFAULT_CURTAIL_STEP_KW);

    let mut trades = args.trade.clone();
    if let Some(path) = &args.trades {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        trades.extend(parse_bus_trades(&text)?);
    }
    let mut injections = injections_from_trades(&trades);
    if let Some(t) = args.interval {
        let s = scenario.as_ref().context("--interval needs --scenario")?;
        if t >= s.intervals() {
            bail!("interval {t} out of range (0..{})", s.intervals());
        }
        let (offers, bids) = derive_interval_market(&s.profiles, t);
        let market = clear_market(&offers, &bids)?;
        let from_market = map_transactions_to_injections(&market, &s.placement())?;
        for (bus, kw) in from_market.injections_kw {
            injections.inject(bus, kw);
        }
        for (bus, kw) in from_market.added_demand_kw {
            injections.demand(bus, kw);
        }
    }
    if injections.is_empty() && trades.is_empty() && args.interval.is_none() {
        bail!("no trades given (use --trade, --trades or --interval)");
    }
    if !(args.scale.is_finite() && args.scale >= 0.0) {
        bail!("--scale must be a non-negative number");
    }
    let injections = injections.scaled(args.scale);

    let curtail = (!args.no_curtail).then_some(step);
    let mut report = assess_injections(&network, &injections, &limits, &settings, curtail)?;
    // Trades that reduce network losses have nothing to extrapolate.
    if report.transaction_losses_kw >= 0.0 {
        report.annualized = Some(annualize_losses(
            report.transaction_losses_kw,
            args.intervals_per_year,
            &tariffs,
            tariffs.interval_hours,
        )?);
    }

    let json = serde_json::to_string_pretty(&report)? + "\n";
    if args.json {
        print!("{json}");
    } else {
        println!("grid import without trades {} kW", fmt_sig(report.p_g_case1));
        println!("grid import with trades    {} kW", fmt_sig(report.p_g_case2));
        println!("transaction losses         {} kW", fmt_sig(report.transaction_losses_kw));
        if let Some((bus, v)) = report.worst_voltage() {
            println!("furthest from nominal: {bus} at {} pu", fmt_sig(v));
        }
        for v in &report.violations {
            println!(
                "violation: {} at {} pu ({:?} limit, by {} pu)",
                v.bus,
                fmt_sig(v.v_mag),
                v.limit,
                fmt_sig(v.severity)
            );
        }
        for (bus, kw) in &report.curtailment_applied {
            println!("curtailed {} kW at {bus}", fmt_sig(*kw));
        }
        for v in &report.unresolved {
            println!("unresolved: {} at {} pu", v.bus, fmt_sig(v.v_mag));
        }
        if let Some(a) = &report.annualized {
            println!(
                "per year: {} MW cumulative, {} MWh, ${} to ${}",
                fmt_sig(a.cumulative_mw()),
                fmt_sig(a.energy_mwh),
                fmt_sig(a.cost_low),
                fmt_sig(a.cost_high)
            );
        }
    }
    write_json(&args.common.out, "feasibility.json", &json)?;
    Ok(0)
}

fn losses_annualize(args: AnnualizeArgs) -> Result<u8> {
    let scenario = load(&args.common)?;
    let mut tariffs = scenario
        .map(|s| s.tariffs)
        .unwrap_or_else(TariffSchedule::queensland_default);
    if let Some(p) = args.off_peak {
        tariffs.off_peak = p;
    }
    if let Some(p) = args.on_peak {
        tariffs.on_peak = p;
    }
    if let Some(h) = args.interval_hours {
        tariffs.interval_hours = h;
    }
    tariffs.validate()?;
    let a = annualize_losses(args.loss_kw, args.intervals, &tariffs, tariffs.interval_hours)?;
    let json = serde_json::to_string_pretty(&a)? + "\n";
    if args.json {
        print!("{json}");
    } else {
        println!("cumulative {} MW", fmt_sig(a.cumulative_mw()));
        println!("energy     {} MWh", fmt_sig(a.energy_mwh));
        println!("cost       ${} to ${}", fmt_sig(a.cost_low), fmt_sig(a.cost_high));
    }
    write_json(&args.common.out, "annualized.json", &json)?;
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err
        .chain()
        .any(|c| matches!(c.downcast_ref::<GridError>(), Some(GridError::NonConvergence { .. })));
    if diverged {
        EXIT_NON_CONVERGENCE
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    // Bad arguments are input errors; clap's own code 2 means divergence here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Clear(a) => clear(a),
        Command::Simulate(a) => simulate(a),
        Command::Feasibility(a) => feasibility(a),
        Command::LossesAnnualize(a) => losses_annualize(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
