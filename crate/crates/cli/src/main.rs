//! `wppg` — training runs, tabular theory experiments, gradient checks and
//! checkpoint evaluation.
//!
//! Every subcommand resolves its parameters from (lowest to highest
//! precedence) built-in defaults, a flat `key = value` file given with
//! `--config`, dedicated flags, and repeated `--set key=value`. The fully
//! resolved parameters are echoed next to the outputs in the same format, so
//! `--config <echo>` reproduces a run byte for byte.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{CliError, KvMap};
use wppg_core::agent::{self, curve_csv, Algo, Checkpoint, TrainConfig, TRAIN_KEYS};
use wppg_core::envs::EnvKind;
use wppg_core::gradcheck::run_gradcheck;
use wppg_core::theory_lab::{contraction_fit, wppg_iterate, FiniteMdp, ProxConfig, ProxSolver, StepMode, TabularPolicy};
use wppg_core::Rng;

#[derive(Parser, Debug)]
#[command(name = "wppg", version, about = "Wasserstein-proximal policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent and write its learning curve, config echo and checkpoint.
    Train(TrainArgs),
    /// Iterate the tabular proximal update and write the trajectory as JSON.
    Theory(TheoryArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated seeds, run concurrently with isolated outputs.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    buffer: Option<String>,
    #[arg(long)]
    learning_starts: Option<String>,
    #[arg(long)]
    total_steps: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    eval_episodes: Option<String>,
    /// Suppress per-evaluation progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[command(flatten)]
    common: Common,
    /// `builtin3` or `random:<states>:<actions>:<gamma>`.
    #[arg(long)]
    mdp: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// `exact` or `split`.
    #[arg(long)]
    mode: Option<String>,
    /// `shooting` or `mirror` (exact mode only).
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Layers the config file, the given flag values and `--set` entries.
fn gather(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<KvMap, CliError> {
    let mut kv = match &common.config {
        Some(path) => KvMap::from_file(path)?,
        None => KvMap::default(),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            kv.insert(key, v);
        }
    }
    for entry in &common.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    if let Some(out) = &common.out {
        kv.insert("out", &out.to_string_lossy());
    }
    Ok(kv)
}

fn prepare_out(dir: &str) -> Result<PathBuf, CliError> {
    let path = PathBuf::from(dir);
    fs::create_dir_all(&path).map_err(|e| CliError::Config(format!("out: cannot create {dir:?}: {e}")))?;
    Ok(path)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

struct TrainJob {
    env: EnvKind,
    algo: Algo,
    seed: u64,
    cfg: TrainConfig,
    out: PathBuf,
    quiet: bool,
}

impl TrainJob {
    fn stem(&self) -> String {
        format!("{}_{}_seed{}", self.env.name(), self.algo.name(), self.seed)
    }

    fn echo(&self) -> String {
        let mut out = String::new();
        out.push_str("command = train\n");
        out.push_str(&format!("env = {}\n", self.env.name()));
        out.push_str(&format!("algo = {}\n", self.algo.name()));
        out.push_str(&format!("seed = {}\n", self.seed));
        for (k, v) in self.cfg.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn run(&self) -> anyhow::Result<()> {
        let stem = self.stem();
        write(&self.out.join(format!("{stem}.config")), self.echo())?;
        let env = self.env.build();
        let seed = self.seed;
        let quiet = self.quiet;
        let outcome = agent::train(env.as_ref(), self.algo, &self.cfg, seed, &mut |row| {
            if !quiet {
                eprintln!("[seed {seed}] step {} return {:.3} ± {:.3}", row.step, row.mean_return, row.std_return);
            }
        })
        .with_context(|| format!("training {stem}"))?;
        write(&self.out.join(format!("{stem}.csv")), curve_csv(&outcome.curve))?;
        write(&self.out.join(format!("{stem}.ckpt")), outcome.checkpoint.to_bytes())?;
        if let Some(last) = outcome.curve.last() {
            println!("{stem}: final mean_return {} std_return {} ({} updates)", last.mean_return, last.std_return, outcome.updates);
        }
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, CliError> {
    let kv = gather(
        &a.common,
        &[
            ("env", &a.env),
            ("algo", &a.algo),
            ("seed", &a.seed),
            ("seeds", &a.seeds),
            ("tau", &a.tau),
            ("eta", &a.eta),
            ("k", &a.k),
            ("gamma", &a.gamma),
            ("batch", &a.batch),
            ("buffer", &a.buffer),
            ("learning_starts", &a.learning_starts),
            ("total_steps", &a.total_steps),
            ("eval_interval", &a.eval_interval),
            ("eval_episodes", &a.eval_episodes),
        ],
    )?;
    kv.expect_command("train")?;
    let mut allowed: Vec<&str> = vec!["command", "env", "algo", "seed", "seeds", "out"];
    allowed.extend_from_slice(TRAIN_KEYS);
    kv.check_keys(&allowed)?;

    let env: EnvKind = kv.parse_or("env", EnvKind::PointMass)?;
    let algo: Algo = kv.parse_or("algo", Algo::Wppg)?;
    let seeds: Vec<u64> = match (kv.get("seeds"), kv.get("seed")) {
        (Some(_), Some(_)) => return Err(CliError::Config("seeds: give either seed or seeds, not both".into())),
        (Some(list), None) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("seeds: not a seed list: {list:?}"))))
            .collect::<Result<_, _>>()?,
        (None, Some(_)) => vec![kv.parse_req::<u64>("seed")?],
        (None, None) => return Err(CliError::Config("seed: required (no wall-clock seeding)".into())),
    };
    let mut cfg = TrainConfig::default();
    for key in TRAIN_KEYS {
        if let Some(v) = kv.get(key) {
            cfg.set(key, v).map_err(CliError::from_core)?;
        }
    }
    cfg.validate().map_err(CliError::from_core)?;
    let out = prepare_out(kv.get("out").unwrap_or("runs"))?;

    let jobs: Vec<TrainJob> = seeds
        .iter()
        .map(|&seed| TrainJob {
            env,
            algo,
            seed,
            cfg: cfg.clone(),
            out: out.clone(),
            quiet: a.quiet,
        })
        .collect();
    let results: Vec<anyhow::Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|job| scope.spawn(move || job.run())).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("training thread panicked"))))
            .collect()
    });
    for r in results {
        r.map_err(CliError::Runtime)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_mdp(spec: &str, seed: u64) -> Result<FiniteMdp, CliError> {
    if spec == "builtin3" {
        return Ok(FiniteMdp::builtin3());
    }
    let bad = || CliError::Config(format!("mdp: expected builtin3 or random:<states>:<actions>:<gamma>, got {spec:?}"));
    let rest = spec.strip_prefix("random:").ok_or_else(bad)?;
    let parts: Vec<&str> = rest.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let states: usize = parts[0].parse().map_err(|_| bad())?;
    let actions: usize = parts[1].parse().map_err(|_| bad())?;
    let gamma: f64 = parts[2].parse().map_err(|_| bad())?;
    let mut rng = Rng::new(seed).substream("mdp");
    FiniteMdp::random(states, actions, gamma, &mut rng).map_err(CliError::from_core)
}

const THEORY_KEYS: &[&str] = &["command", "mdp", "tau", "eta", "steps", "mode", "solver", "seed", "init", "prox_tol", "out"];

fn cmd_theory(a: TheoryArgs) -> Result<ExitCode, CliError> {
    let kv = gather(
        &a.common,
        &[
            ("mdp", &a.mdp),
            ("tau", &a.tau),
            ("eta", &a.eta),
            ("steps", &a.steps),
            ("mode", &a.mode),
            ("solver", &a.solver),
            ("seed", &a.seed),
        ],
    )?;
    kv.expect_command("theory")?;
    kv.check_keys(THEORY_KEYS)?;
    let mdp_name = kv.get("mdp").unwrap_or("builtin3").to_string();
    let tau: f64 = kv.parse_or("tau", 0.1)?;
    let eta: f64 = kv.parse_or("eta", 0.5)?;
    let steps: usize = kv.parse_or("steps", 60)?;
    let mode: StepMode = kv.parse_or("mode", StepMode::Exact)?;
    let solver: ProxSolver = kv.parse_or("solver", ProxSolver::Shooting)?;
    let seed: u64 = kv.parse_or("seed", 0)?;
    let prox_tol: f64 = kv.parse_or("prox_tol", 1e-6)?;
    let init = kv.get("init").unwrap_or("uniform").to_string();
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    let not_positive = |x: f64| !(x > 0.0);
    if not_positive(tau) {
        return Err(CliError::Config("tau: must be positive".into()));
    }
    if not_positive(eta) {
        return Err(CliError::Config("eta: must be positive".into()));
    }
    if not_positive(prox_tol) {
        return Err(CliError::Config("prox_tol: must be positive".into()));
    }
    let mdp = parse_mdp(&mdp_name, seed)?;
    let pi0 = match init.as_str() {
        "uniform" => TabularPolicy::uniform(&mdp),
        "random" => TabularPolicy::random(&mdp, 1.0, &mut Rng::new(seed).substream("init")),
        other => return Err(CliError::Config(format!("init: expected uniform or random, got {other:?}"))),
    };
    let out = prepare_out(kv.get("out").unwrap_or("runs"))?;
    let prox = ProxConfig {
        solver,
        tol: prox_tol,
        ..ProxConfig::default()
    };

    let stem = format!("theory_{}_{}_seed{seed}", mdp_name.replace(':', "-"), mode.name());
    let echo = format!(
        "command = theory\nmdp = {mdp_name}\ntau = {tau}\neta = {eta}\nsteps = {steps}\nmode = {}\nsolver = {}\nseed = {seed}\ninit = {init}\nprox_tol = {prox_tol}\n",
        mode.name(),
        solver.name()
    );
    let run = || -> anyhow::Result<()> {
        write(&out.join(format!("{stem}.config")), &echo)?;
        let traj = wppg_iterate(&mdp, &pi0, tau, eta, steps, mode, &prox)?;
        let fit = contraction_fit(&traj, mdp.gamma(), tau, eta);
        let j_nondecreasing = traj.records.windows(2).all(|w| w[1].j >= w[0].j - 1e-10);
        let doc = json!({
            "mdp": mdp_name,
            "states": mdp.num_states(),
            "actions": mdp.num_actions(),
            "gamma": mdp.gamma(),
            "tau": tau,
            "eta": eta,
            "mode": mode.name(),
            "solver": solver.name(),
            "seed": seed,
            "j_star": traj.j_star,
            "nu_star": traj.nu_star,
            "j_nondecreasing": j_nondecreasing,
            "contraction": fit,
            "records": traj.records,
        });
        let text = serde_json::to_string_pretty(&doc)?;
        write(&out.join(format!("{stem}.json")), text + "\n")?;
        let last = traj.records.last().expect("at least the initial record");
        println!("{stem}: J* - J_{} = {:e}, J nondecreasing: {j_nondecreasing}", last.k, traj.j_star - last.j);
        Ok(())
    };
    run().map_err(CliError::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode, CliError> {
    let report = run_gradcheck(a.seed).map_err(|e| CliError::Runtime(e.into()))?;
    for s in &report.suites {
        println!("{:<28} instances {:>3} coords {:>6} max_rel_err {:.3e}", s.name, s.instances, s.coordinates, s.max_rel_err);
    }
    println!("max relative error {:.3e} ({})", report.max_rel_err(), if report.passed() { "pass" } else { "FAIL" });
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, CliError> {
    let ckpt_flag = a.checkpoint.as_ref().map(|p| p.to_string_lossy().into_owned());
    let kv = gather(&a.common, &[("checkpoint", &ckpt_flag), ("env", &a.env), ("episodes", &a.episodes), ("seed", &a.seed)])?;
    kv.expect_command("eval")?;
    kv.check_keys(&["command", "checkpoint", "env", "episodes", "seed", "out"])?;
    let path = kv
        .get("checkpoint")
        .ok_or_else(|| CliError::Config("checkpoint: required".into()))?
        .to_string();
    let env: EnvKind = kv.parse_req("env")?;
    let episodes: usize = kv.parse_or("episodes", 10)?;
    if episodes == 0 {
        return Err(CliError::Config("episodes: must be positive".into()));
    }
    let seed: u64 = kv.parse_req("seed")?;
    let bytes = fs::read(&path).map_err(|e| CliError::Config(format!("checkpoint: cannot read {path:?}: {e}")))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Config(format!("checkpoint: {e}")))?;
    let out = kv.get("out").map(prepare_out).transpose()?;
    let built = env.build();
    let spec = built.spec();
    if spec.state_dim != ck.state_dim || spec.action_box != ck.action_box {
        return Err(CliError::Config(format!(
            "env: {} does not match the checkpoint (state width {}, action width {})",
            env.name(),
            ck.state_dim,
            ck.action_box.dim()
        )));
    }
    let run = || -> anyhow::Result<()> {
        let actor = ck.actor()?;
        let (mean, std) = actor.evaluate(built.as_ref(), episodes, seed)?;
        let doc = json!({
            "checkpoint": path,
            "algo": ck.algo.name(),
            "env": env.name(),
            "episodes": episodes,
            "seed": seed,
            "mean_return": mean,
            "std_return": std,
        });
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        print!("{text}");
        if let Some(dir) = &out {
            let stem = format!("eval_{}_{}_seed{seed}", env.name(), ck.algo.name());
            write(&dir.join(format!("{stem}.json")), &text)?;
            write(
                &dir.join(format!("{stem}.config")),
                format!("command = eval\ncheckpoint = {path}\nenv = {}\nepisodes = {episodes}\nseed = {seed}\n", env.name()),
            )?;
        }
        Ok(())
    };
    run().map_err(CliError::Runtime)?;
    Ok(ExitCode::SUCCESS)
}
