use std::error::Error;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdfleet::dp::{bdp_solve, plvfa_train, InitialState, LearningRate, PlvfaConfig, SlopeTable, ValueTable};
use crowdfleet::eval::{evaluate, sweep_rows, write_summary_csv, write_sweep_csv, write_trajectory_csv, EvalOptions, Policy};
use crowdfleet::fluid::{service_level, unmatched_cd_shares, OpsModel};
use crowdfleet::instance::{DemandCurve, Instance};
use crowdfleet::mdp::FleetState;
use crowdfleet::sim::{derive_routing, fluid_bound_check, simulate, RoutingMatrix, ServiceTime, SimConfig, SimStats};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "crowdfleet", version, about = "Workforce planning for hybrid crowdsourced delivery fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the operational fluid model for one fleet.
    OpsCost(OpsCostArgs),
    /// Exact backward induction; writes a value table.
    Bdp(BdpArgs),
    /// Train PL-VFA slopes; writes a slope table and per-episode traces.
    Train(TrainArgs),
    /// Roll out a policy on common random numbers.
    Evaluate(EvaluateArgs),
    /// Re-run an evaluation over a parameter grid.
    Sweep(SweepArgs),
    /// Queueing simulation of one fleet against its fluid bound.
    Simulate(SimulateArgs),
    /// Load and validate an instance file.
    ValidateInstance(ValidateArgs),
}

#[derive(Args)]
struct InstanceArg {
    /// Instance file or `builtin:grubhub18`.
    #[arg(long, default_value = "builtin:grubhub18")]
    instance: String,
}

impl InstanceArg {
    fn load(&self) -> Result<Instance> {
        Ok(Instance::resolve(&self.instance)?)
    }
}

#[derive(Args)]
struct FleetArgs {
    #[arg(long)]
    nfd: u32,
    #[arg(long)]
    ngw: u32,
    #[arg(long)]
    nod: u32,
    /// Strategic period; defaults to the horizon.
    #[arg(long)]
    t: Option<usize>,
}

#[derive(Args)]
struct OpsCostArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[command(flatten)]
    fleet: FleetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BdpArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rate {
    Constant,
    Harmonic,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[arg(long)]
    episodes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long, default_value_t = Rate::Constant, value_enum)]
    learning_rate: Rate,
    #[arg(long, default_value_t = 100)]
    k_gw: u32,
    #[arg(long, default_value_t = 100)]
    k_od: u32,
    /// Initial exploration probability; 0 gives the pure greedy algorithm.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Start every episode at the instance's initial fleet instead of a uniform draw.
    #[arg(long)]
    point_start: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCommon {
    /// `myopic`, `fd-only`, `never-hire`, `bdp:<file>` or `plvfa:<file>`.
    #[arg(long)]
    policy: String,
    #[arg(long)]
    rollouts: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Initial fleet as `fd,gw,od`; defaults to the instance's initial fleet.
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    compare_myopic: bool,
    #[arg(long)]
    compare_fd_only: bool,
    #[arg(long)]
    hiring_gap: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[command(flatten)]
    eval: EvalCommon,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    instance: InstanceArg,
    /// Parameter name, e.g. `q_gw`, `p_od`, `c_fix_per_hour`, `demand_scale`.
    #[arg(long)]
    param: String,
    /// `start:end:step` or a comma-separated list.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    eval: EvalCommon,
    /// Train a fresh PL-VFA policy per grid value with this many episodes (policy `plvfa`).
    #[arg(long, default_value_t = 0)]
    episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Routing {
    Fluid,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Service {
    Deterministic,
    Exponential,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[command(flatten)]
    fleet: FleetArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replications: u64,
    #[arg(long, default_value_t = 40.0)]
    hours: f64,
    #[arg(long, default_value_t = 1.0)]
    slot_minutes: f64,
    #[arg(long, default_value_t = 1)]
    cd_lifetime_slots: usize,
    #[arg(long, default_value_t = Routing::Fluid, value_enum)]
    routing: Routing,
    #[arg(long, default_value_t = Service::Deterministic, value_enum)]
    service: Service,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    instance: InstanceArg,
    /// Also write the normalized instance to this file.
    #[arg(long)]
    write: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::OpsCost(a) => cmd_ops_cost(a),
        Command::Bdp(a) => cmd_bdp(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ValidateInstance(a) => cmd_validate(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn period(inst: &Instance, t: Option<usize>) -> Result<usize> {
    let t = t.unwrap_or(inst.strategic.horizon);
    if t > inst.strategic.horizon {
        return Err(format!("period {t} is beyond the horizon {}", inst.strategic.horizon).into());
    }
    Ok(t)
}

fn cmd_ops_cost(a: OpsCostArgs) -> Result<()> {
    let inst = a.instance.load()?;
    let t = period(&inst, a.fleet.t)?;
    let ops = OpsModel::new(&inst)?;
    let (n_fd, n_gw, n_od) = (a.fleet.nfd, a.fleet.ngw, a.fleet.nod);
    let sol = ops.solve(n_fd, n_gw, n_od, t)?;
    let step = ops.ops_cost(n_fd, n_gw, n_od, t)?;
    let level = service_level(&sol, &sol.lambda, &inst.request_pattern);
    let (un_gw, un_od) = unmatched_cd_shares(&inst, &sol);

    let mut w = csv::Writer::from_writer(create(&a.out, "ops_solution.csv")?);
    w.write_record(["origin", "destination", "lambda", "a_fd", "a_gw", "a_od", "a_null", "e", "f", "gw_slack", "od_slack"])?;
    for i in 0..inst.zones {
        for j in 0..inst.zones {
            w.write_record([
                i.to_string(),
                j.to_string(),
                (sol.lambda[i] * inst.request_pattern[i][j]).to_string(),
                sol.a_fd[i].to_string(),
                sol.a_gw[i][j].to_string(),
                sol.a_od[i][j].to_string(),
                sol.a_null[i][j].to_string(),
                sol.e[i][j].to_string(),
                sol.f[i][j].to_string(),
                sol.gw_slack[i][j].to_string(),
                sol.od_slack[i][j].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let r = sol.rates;
    let summary = [
        ("n_fd", n_fd as f64),
        ("n_gw", n_gw as f64),
        ("n_od", n_od as f64),
        ("t", t as f64),
        ("cost_rate", sol.cost_rate),
        ("c_ops", step),
        ("fd_serving", r.fd_serving),
        ("fd_relocation", r.fd_relocation),
        ("gw", r.gw),
        ("od", r.od),
        ("penalty", r.penalty),
        ("service_level", level),
        ("unmatched_gw", un_gw),
        ("unmatched_od", un_od),
        ("n_fd_full_service", ops.min_fd_full_service(n_gw, n_od, t)? as f64),
    ];
    let mut w = csv::Writer::from_writer(create(&a.out, "ops_summary.csv")?);
    w.write_record(["metric", "value"])?;
    for (k, v) in summary {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    println!("cost_rate {} $/h, C_ops {step}, service level {level}", sol.cost_rate);
    Ok(())
}

fn cmd_bdp(a: BdpArgs) -> Result<()> {
    let inst = a.instance.load()?;
    let ops = OpsModel::new(&inst)?;
    let table = bdp_solve(&ops)?;
    fs::create_dir_all(&a.out)?;
    table.save(&a.out.join("value_table.json"))?;
    let init = inst.strategic.initial;
    let s0 = FleetState::new(init.fd, init.gw, init.od, 0);
    match table.value(s0) {
        Some(v) => println!("V_0{:?} = {v}", (init.fd, init.gw, init.od)),
        None => println!("initial fleet lies outside the caps"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let inst = a.instance.load()?;
    let ops = OpsModel::new(&inst)?;
    let mut cfg = PlvfaConfig::new(a.episodes, a.seed);
    cfg.alpha = a.alpha;
    cfg.k_gw = a.k_gw;
    cfg.k_od = a.k_od;
    cfg.epsilon = a.epsilon;
    cfg.learning_rate = match a.learning_rate {
        Rate::Constant => LearningRate::Constant,
        Rate::Harmonic => LearningRate::Harmonic,
    };
    if a.point_start {
        let i = inst.strategic.initial;
        cfg.initial = InitialState::Point { n_fd: i.fd, n_gw: i.gw, n_od: i.od };
    }
    let out = plvfa_train(&ops, &cfg)?;
    fs::create_dir_all(&a.out)?;
    out.table.save(&a.out.join("slope_table.json"))?;
    let mut w = csv::Writer::from_writer(create(&a.out, "training_trace.csv")?);
    w.write_record(["episode", "n_fd_0", "n_gw_0", "n_od_0", "cost", "n_fd_T", "n_gw_T", "n_od_T", "violations"])?;
    for tr in &out.traces {
        w.write_record([
            tr.episode.to_string(),
            tr.initial.n_fd.to_string(),
            tr.initial.n_gw.to_string(),
            tr.initial.n_od.to_string(),
            tr.cost.to_string(),
            tr.final_state.n_fd.to_string(),
            tr.final_state.n_gw.to_string(),
            tr.final_state.n_od.to_string(),
            tr.violations.to_string(),
        ])?;
    }
    w.flush()?;
    println!("trained {} episodes, {} slope vectors", a.episodes, out.table.slopes.len());
    Ok(())
}

fn parse_policy(spec: &str) -> Result<Policy> {
    Ok(match spec.split_once(':') {
        Some(("bdp", file)) => Policy::BdpTable(ValueTable::load(Path::new(file))?),
        Some(("plvfa", file)) => Policy::Plvfa(SlopeTable::load(Path::new(file))?),
        None if spec == "myopic" => Policy::Myopic,
        None if spec == "fd-only" => Policy::FdOnlyMyopic,
        None if spec == "never-hire" => Policy::NeverHire,
        _ => return Err(format!("unknown policy `{spec}`").into()),
    })
}

fn start_state(inst: &Instance, start: Option<&str>) -> Result<FleetState> {
    let Some(text) = start else {
        let i = inst.strategic.initial;
        return Ok(FleetState::new(i.fd, i.gw, i.od, 0));
    };
    let parts: Vec<u32> = text.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [f, g, o] => Ok(FleetState::new(f, g, o, 0)),
        _ => Err(format!("--start expects `fd,gw,od`, got `{text}`").into()),
    }
}

fn eval_options(c: &EvalCommon, policy: &Policy, s0: FleetState) -> EvalOptions {
    let oracle = match policy {
        Policy::BdpTable(table) => table.value(s0),
        _ => None,
    };
    EvalOptions { oracle, compare_myopic: c.compare_myopic, compare_fd_only: c.compare_fd_only, hiring_gap: c.hiring_gap, jobs: c.jobs }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let inst = a.instance.load()?;
    let ops = OpsModel::new(&inst)?;
    let policy = parse_policy(&a.eval.policy)?;
    let s0 = start_state(&inst, a.eval.start.as_deref())?;
    let opts = eval_options(&a.eval, &policy, s0);
    let ev = evaluate(&ops, &policy, s0, a.eval.rollouts, a.eval.seed, &opts)?;
    write_summary_csv(create(&a.out, "summary.csv")?, std::slice::from_ref(&ev.report))?;
    write_trajectory_csv(create(&a.out, "trajectories.csv")?, &ev.trajectories)?;
    let r = &ev.report;
    println!("{}: mean cost {} (std {}) over {} rollouts", r.policy, r.mean_cost, r.std_cost, r.rollouts);
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if let [start, end, step] = parts[..] {
        let (start, end, step): (f64, f64, f64) = (start.parse()?, end.parse()?, step.parse()?);
        if step <= 0.0 || end < start {
            return Err(format!("bad grid `{text}`").into());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|k| start + k as f64 * step).collect());
    }
    Ok(text.split(',').map(|v| v.trim().parse()).collect::<std::result::Result<_, _>>()?)
}

fn set_param(inst: &mut Instance, name: &str, v: f64) -> Result<()> {
    match name {
        "q_gw" => inst.turnover.q_gw = v,
        "q_od" => inst.turnover.q_od = v,
        "p_fd" => inst.turnover.p_fd = v,
        "p_gw" => inst.turnover.p_gw = v,
        "p_od" => inst.turnover.p_od = v,
        "p_high" => inst.turnover.p_high = v,
        "p_low" => inst.turnover.p_low = v,
        "gw_active_share" => inst.gw.active_share = v,
        "od_active_share" => inst.od.active_share = v,
        "fd_per_km" => inst.costs.fd_per_km = v,
        "gw_per_km" => inst.costs.gw_per_km = v,
        "od_per_request" => inst.costs.od_per_request = v,
        "penalty_per_request" => inst.costs.penalty_per_request = v,
        "c_fix_per_hour" => inst.strategic.c_fix_per_hour = v,
        "c_sev" => inst.strategic.c_sev = v,
        "gamma" => inst.strategic.gamma = v,
        "demand_scale" => *inst = inst.with_demand_scaled(v),
        "demand_growth" => match &mut inst.demand {
            DemandCurve::Geometric { growth, .. } => *growth = v,
            _ => return Err("demand_growth needs a geometric demand curve".into()),
        },
        _ => return Err(format!("unknown sweep parameter `{name}`").into()),
    }
    inst.validate()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = a.instance.load()?;
    let values = parse_values(&a.values)?;
    let mut rows = Vec::new();
    for &v in &values {
        let mut inst = base.clone();
        set_param(&mut inst, &a.param, v)?;
        let ops = OpsModel::new(&inst)?;
        let policy = if a.eval.policy == "plvfa" {
            let mut cfg = PlvfaConfig::new(a.episodes, a.eval.seed);
            cfg.alpha = a.alpha;
            Policy::Plvfa(plvfa_train(&ops, &cfg)?.table)
        } else {
            parse_policy(&a.eval.policy)?
        };
        let s0 = start_state(&inst, a.eval.start.as_deref())?;
        let opts = eval_options(&a.eval, &policy, s0);
        let ev = evaluate(&ops, &policy, s0, a.eval.rollouts, a.eval.seed, &opts)?;
        println!("{} = {v}: mean cost {}", a.param, ev.report.mean_cost);
        rows.extend(sweep_rows(&a.param, v, &ev));
    }
    write_sweep_csv(create(&a.out, "sweep.csv")?, &rows)?;
    Ok(())
}

fn run_replications(inst: &Instance, a: &SimulateArgs, t: usize, routing: &RoutingMatrix, cfg: &SimConfig) -> Result<Vec<SimStats>> {
    let run = |k: u64| {
        simulate(inst, a.fleet.nfd, a.fleet.ngw, a.fleet.nod, t, routing, cfg, &mut ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(k)))
    };
    let n = a.replications;
    let jobs = (a.jobs as u64).clamp(1, n.max(1));
    let mut out: Vec<Option<SimStats>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let run = &run;
                scope.spawn(move || (w..n).step_by(jobs as usize).map(|k| (k, run(k))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("simulation worker panicked") {
                out[k as usize] = Some(r?);
            }
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|s| s.expect("every replication ran")).collect())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let inst = a.instance.load()?;
    let t = period(&inst, a.fleet.t)?;
    let ops = OpsModel::new(&inst)?;
    let sol = ops.solve(a.fleet.nfd, a.fleet.ngw, a.fleet.nod, t)?;
    let routing = match a.routing {
        Routing::Fluid => derive_routing(&inst, &sol),
        Routing::Identity => RoutingMatrix::identity(inst.zones),
    };
    let cfg = SimConfig {
        hours: a.hours,
        slot_minutes: a.slot_minutes,
        cd_lifetime_slots: a.cd_lifetime_slots,
        service: match a.service {
            Service::Deterministic => ServiceTime::Deterministic,
            Service::Exponential => ServiceTime::Exponential,
        },
        ..Default::default()
    };
    let stats = run_replications(&inst, &a, t, &routing, &cfg)?;

    let mut w = csv::Writer::from_writer(create(&a.out, "sim_summary.csv")?);
    w.write_record(["replication", "seed", "cost_rate", "half_width", "lp_rate", "bound_holds", "margin", "relocation_km"])?;
    for (k, s) in stats.iter().enumerate() {
        let (holds, margin) = fluid_bound_check(s.cost_rate, s.half_width, sol.cost_rate);
        w.write_record([
            k.to_string(),
            a.seed.wrapping_add(k as u64).to_string(),
            s.cost_rate.to_string(),
            s.half_width.to_string(),
            sol.cost_rate.to_string(),
            holds.to_string(),
            margin.to_string(),
            s.relocation_km.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&a.out, "sim_routes.csv")?);
    w.write_record(["replication", "origin", "destination", "arrivals", "served_fd", "served_gw", "served_od", "penalized"])?;
    for (k, s) in stats.iter().enumerate() {
        for i in 0..inst.zones {
            for j in 0..inst.zones {
                w.write_record([
                    k.to_string(),
                    i.to_string(),
                    j.to_string(),
                    s.arrivals[i][j].to_string(),
                    s.served_fd[i][j].to_string(),
                    s.served_gw[i][j].to_string(),
                    s.served_od[i][j].to_string(),
                    s.penalized[i][j].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mean = stats.iter().map(|s| s.cost_rate).sum::<f64>() / stats.len() as f64;
    let half = stats.iter().map(|s| s.half_width).sum::<f64>() / stats.len() as f64;
    let (holds, margin) = fluid_bound_check(mean, half, sol.cost_rate);
    println!(
        "simulated {mean} $/h (±{half}), fluid bound {} $/h, margin {margin}, bound {}",
        sol.cost_rate,
        if holds { "holds" } else { "violated" }
    );
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let inst = a.instance.load()?;
    inst.validate()?;
    if let Some(path) = &a.write {
        let mut f = File::create(path)?;
        f.write_all(inst.to_toml_string().as_bytes())?;
    }
    let c = inst.strategic.caps;
    println!(
        "{}: {} zones, horizon {}, caps fd {} gw {} od {}, demand at horizon {:.2}/h",
        inst.name,
        inst.zones,
        inst.strategic.horizon,
        c.fd,
        c.gw,
        c.od,
        inst.demand_total(inst.strategic.horizon)?
    );
    Ok(())
}
