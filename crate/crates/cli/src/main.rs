//! `windex`: train index networks, run scheduling scenarios, check the
//! tabular oracle and time inference.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a
//! verification check failed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use windex_core::config::{parse_config, Config, VerifyConfig};
use windex_core::env::ServiceClass;
use windex_core::metrics::{ExportFormat, MetricsReport};
use windex_core::net::WhittleNetwork;
use windex_core::oracle::sweep::{sweep, verify_value_tables, SweepReport};
use windex_core::oracle::{index_table, TabularMdp, ValueTable};
use windex_core::scheduler::{
    bench_inference, run_scenario_traced, ModelSet, Policy, SchedulerKind, SliceConfig,
};
use windex_core::trainer::{
    train, write_log_csv, SingleUeEnv, TabularEnv, TrainConfig, TrainError, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(name = "windex", version, about = "Whittle-index MAC scheduling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Common {
    /// Base seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one index network.
    Train {
        #[arg(long)]
        class: Option<ServiceClass>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file; defaults to `output.model` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log CSV; defaults to `output.log` of the config.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override `train.episodes_total`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override `train.episode_len`.
        #[arg(long)]
        episode_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a scenario under one policy and write a metrics report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// windex, oracle, maxweight, maxcqi, pf or rr. With --slices it
        /// replaces every slice's scheduler.
        #[arg(long)]
        policy: Option<SchedulerKind>,
        #[arg(long)]
        slices: Option<PathBuf>,
        /// Directory with `<class>.model` files for windex.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Report path; `.csv` writes CSV, anything else JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent seeds `seed..seed+runs`, merged into one report.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long)]
        horizon: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Check concavity, threshold structure and indexability of tabular models.
    VerifyOracle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON `{ "mdp": .., "tables": [..] }` of pre-solved value tables to
        /// check instead of solving.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time forward passes.
    BenchInference {
        #[arg(long, default_value_t = 20)]
        ues: usize,
        #[arg(long, default_value_t = 2)]
        threads: usize,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Whittle indices of one tabular model as `state,index` CSV.
    IndexTable {
        /// Take the model from `train.tabular` of this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        max_queue: usize,
        #[arg(long, default_value_t = 0)]
        r0: usize,
        #[arg(long, default_value_t = 1)]
        r1: usize,
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        mu_r: f64,
        #[arg(long, default_value_t = 0.0)]
        mu_l: f64,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 50.0)]
        hi: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for uniformity; the computation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train {
            class,
            config,
            out,
            log,
            episodes,
            episode_len,
            common,
        } => cmd_train(class, config, out, log, episodes, episode_len, common),
        Command::Run {
            scenario,
            policy,
            slices,
            models,
            out,
            runs,
            horizon,
            common,
        } => cmd_run(&scenario, policy, slices, models, out, runs, horizon, common),
        Command::VerifyOracle {
            config,
            tables,
            out,
            common,
        } => cmd_verify(config, tables, out, common),
        Command::BenchInference {
            ues,
            threads,
            iters,
            out,
            seed,
        } => cmd_bench(ues, threads, iters, out, seed.unwrap_or(0)),
        Command::IndexTable {
            config,
            max_queue,
            r0,
            r1,
            beta,
            gamma,
            mu_r,
            mu_l,
            lo,
            hi,
            tol,
            out,
            seed: _,
        } => {
            let mdp = TabularMdp {
                max_queue,
                r0,
                r1,
                beta,
                gamma,
                mu_r,
                mu_l,
            };
            cmd_index_table(config, mdp, (lo, hi), tol, out)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(e) => eprintln!("error: {}", chain(e)),
                Failure::Runtime(e) => eprintln!("runtime error: {}", chain(e)),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Error chain with causes already quoted by their parent left out.
fn chain(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn load(path: &Path) -> Result<Config, Failure> {
    parse_config(path).map_err(invalid)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

fn cmd_train(
    class: Option<ServiceClass>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    episodes: Option<usize>,
    episode_len: Option<usize>,
    common: Common,
) -> Outcome {
    let cfg = match &config {
        Some(p) => load(p)?,
        None => Config::default(),
    };
    let mut tc = match (&cfg.train, class) {
        (Some(t), Some(c)) => TrainConfig { class: c, ..t.clone() },
        (Some(t), None) => t.clone(),
        (None, Some(c)) => TrainConfig::new(c),
        (None, None) => {
            return Err(invalid(anyhow!(
                "no class: pass --class or a config with a [train] section"
            )))
        }
    };
    if let Some(s) = common.seed.or(cfg.seed) {
        tc.seed = s;
    }
    if common.jobs > 1 {
        tc.jobs = common.jobs;
    }
    if let Some(e) = episodes {
        tc.episodes_total = e;
    }
    if let Some(t) = episode_len {
        tc.episode_len = t;
    }
    tc.validate().map_err(invalid)?;
    let model_path = out
        .or_else(|| cfg.output.model.as_ref().map(|p| cfg.resolve(p)))
        .ok_or_else(|| invalid(anyhow!("no output path: pass --out or set output.model")))?;
    let log_path = log.or_else(|| cfg.output.log.as_ref().map(|p| cfg.resolve(p)));

    let result = match tc.tabular {
        Some(mdp) => train(&tc, &TabularEnv::new(mdp), |_| {}),
        None => {
            let env = SingleUeEnv::from_config(&tc, &cfg.base_dir).map_err(invalid)?;
            train(&tc, &env, |_| {})
        }
    };
    let TrainOutcome { net, log } = match result {
        Ok(o) => o,
        Err(TrainError::Diverged {
            batch,
            reason,
            last_good,
        }) => {
            let keep = model_path.with_extension("last_good");
            last_good.save(&keep, true).map_err(runtime)?;
            return Err(runtime(anyhow!(
                "diverged in batch {batch}: {reason}; last good parameters in {}",
                keep.display()
            )));
        }
        Err(e) => return Err(runtime(e)),
    };
    let mut w = create(&model_path)?;
    net.write_to(&mut w, true)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", model_path.display()))
        .map_err(runtime)?;
    if let Some(p) = &log_path {
        write_log_csv(&log, create(p)?)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(runtime)?;
    }
    let last = log.last();
    println!(
        "trained {} for {} batches (seed {}): final mean return {:.6}, model {}",
        tc.class,
        log.len(),
        tc.seed,
        last.map_or(f64::NAN, |l| l.mean_return),
        model_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario: &Path,
    policy: Option<SchedulerKind>,
    slices: Option<PathBuf>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    runs: u64,
    horizon: Option<u64>,
    common: Common,
) -> Outcome {
    let cfg = load(scenario)?;
    let mut spec = cfg
        .scenario
        .clone()
        .ok_or_else(|| invalid(anyhow!("{} has no [scenario] section", scenario.display())))?;
    if let Some(h) = horizon {
        spec.horizon = h;
    }
    let policy = match (slices, policy) {
        (Some(p), inner) => {
            let sc = load(&p)?;
            let mut sl: SliceConfig = sc
                .slicing
                .ok_or_else(|| invalid(anyhow!("{} has no [slicing] section", p.display())))?;
            if let Some(k) = inner {
                sl.slices.iter_mut().for_each(|s| s.scheduler = k);
            }
            sl.validate(&spec).map_err(invalid)?;
            Policy::Sliced(sl)
        }
        (None, Some(k)) => Policy::Unsliced(k),
        (None, None) => return Err(invalid(anyhow!("--policy is required without --slices"))),
    };
    let needs_models = match &policy {
        Policy::Unsliced(k) => *k == SchedulerKind::Windex,
        Policy::Sliced(sl) => sl.slices.iter().any(|s| s.scheduler == SchedulerKind::Windex),
    };
    let model_set = if !needs_models {
        ModelSet::default()
    } else if let Some(dir) = &models {
        let mut nets = Vec::new();
        for u in spec.expand() {
            let path = dir.join(format!("{}.model", u.service.class));
            nets.push(Some(
                WhittleNetwork::load(&path)
                    .with_context(|| format!("loading {}", path.display()))
                    .map_err(invalid)?,
            ));
        }
        ModelSet { nets }
    } else {
        ModelSet::load(&spec, &cfg.base_dir).map_err(invalid)?
    };

    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let seeds: Vec<u64> = (0..runs.max(1)).map(|k| seed.wrapping_add(k)).collect();
    let jobs = common.jobs.max(1);
    let one = |s: u64, inner_jobs: usize| {
        run_scenario_traced(&spec, &policy, &model_set, s, &cfg.base_dir, inner_jobs, |_| {})
    };
    let reports: Vec<MetricsReport> = if seeds.len() > 1 && jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(runtime)?;
        pool.install(|| seeds.par_iter().map(|&s| one(s, 1)).collect::<Result<_, _>>())
    } else {
        seeds.iter().map(|&s| one(s, jobs)).collect::<Result<_, _>>()
    }
    .map_err(|e| match e {
        windex_core::scheduler::SchedError::Invalid { .. }
        | windex_core::scheduler::SchedError::MissingModel { .. }
        | windex_core::scheduler::SchedError::ModelClassMismatch { .. } => invalid(e),
        other => runtime(other),
    })?;
    let mut report = reports[0].clone();
    for r in &reports[1..] {
        report = report.merge(r).map_err(runtime)?;
    }

    println!("policy {}  seeds {:?}  horizon {}", report.policy, report.seeds, report.horizon);
    println!("{:>4} {:>6} {:>10} {:>9} {:>9} {:>8}", "ue", "class", "tpt_mbps", "tpt_viol", "tsls_viol", "max_tsls");
    for u in &report.ues {
        println!(
            "{:>4} {:>6} {:>10.3} {:>9.4} {:>9.4} {:>8}",
            u.ue_id, u.class, u.mean_tpt_mbps, u.tpt_violation_frac, u.tsls_violation_frac, u.max_tsls
        );
    }
    println!("summed violation fraction {:.6}", report.summed_violation_frac());
    let out = out.or_else(|| cfg.output.report.as_ref().map(|p| cfg.resolve(p)));
    if let Some(p) = out {
        report
            .export(&p, ExportFormat::from_path(&p))
            .map_err(runtime)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TableFixture {
    mdp: TabularMdp,
    tables: Vec<ValueTable>,
}

fn cmd_verify(
    config: Option<PathBuf>,
    tables: Option<PathBuf>,
    out: Option<PathBuf>,
    common: Common,
) -> Outcome {
    let cfg = match &config {
        Some(p) => load(p)?,
        None => Config::default(),
    };
    let report = if let Some(p) = tables {
        let text = std::fs::read_to_string(&p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(invalid)?;
        let fx: TableFixture = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", p.display()))
            .map_err(invalid)?;
        SweepReport {
            instances: vec![verify_value_tables(&fx.mdp, &fx.tables)],
        }
    } else {
        let vc = cfg.verify.clone().unwrap_or_else(VerifyConfig::default);
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        let instances = vc.all_instances(seed);
        let grid = vc.lambda.values();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.jobs.max(1))
            .build()
            .map_err(runtime)?;
        pool.install(|| sweep(&instances, &grid)).map_err(invalid)?
    };

    let failed: Vec<_> = report.failed().collect();
    println!(
        "{} instances checked, {} failed, max DV excess {:.3e}",
        report.instances.len(),
        failed.len(),
        report.max_dv_excess()
    );
    for f in &failed {
        for (lemma, lambda) in &f.failures {
            println!("FAIL {lemma} at lambda {lambda} on {:?}", f.mdp);
        }
    }
    if let Some(p) = out {
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &report)
            .map_err(anyhow::Error::from)
            .and_then(|_| w.flush().map_err(anyhow::Error::from))
            .map_err(runtime)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<String> = failed
            .iter()
            .flat_map(|f| f.failures.iter().map(|(l, _)| l.to_string()))
            .collect();
        Err(Failure::Verification(format!(
            "{} instance(s) failed: {}",
            failed.len(),
            names.join(", ")
        )))
    }
}

fn cmd_bench(ues: usize, threads: usize, iters: usize, out: Option<PathBuf>, seed: u64) -> Outcome {
    if ues == 0 || threads == 0 || iters == 0 {
        return Err(invalid(anyhow!("--ues, --threads and --iters must be positive")));
    }
    let r = bench_inference(ues, threads, iters, seed).map_err(runtime)?;
    println!("{iters} iterations, {ues} UEs, {threads} threads");
    for (name, p) in [("single forward", r.single), ("all UEs", r.batch)] {
        println!(
            "{name:>15}: p50 {:.2} us  p90 {:.2} us  p99 {:.2} us  max {:.2} us",
            p.p50_us, p.p90_us, p.p99_us, p.max_us
        );
    }
    if let Some(p) = out {
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &r)
            .map_err(anyhow::Error::from)
            .and_then(|_| w.flush().map_err(anyhow::Error::from))
            .map_err(runtime)?;
    }
    Ok(())
}

fn cmd_index_table(
    config: Option<PathBuf>,
    mut mdp: TabularMdp,
    bracket: (f64, f64),
    tol: f64,
    out: Option<PathBuf>,
) -> Outcome {
    if let Some(p) = config {
        let cfg = load(&p)?;
        mdp = cfg
            .train
            .and_then(|t| t.tabular)
            .ok_or_else(|| invalid(anyhow!("{} has no [train.tabular] section", p.display())))?;
    }
    let table = index_table(&mdp, bracket, tol).map_err(invalid)?;
    match out {
        Some(p) => {
            let mut w = create(&p)?;
            table
                .write_csv(&mut w)
                .and_then(|_| w.flush())
                .with_context(|| format!("writing {}", p.display()))
                .map_err(runtime)?;
        }
        None => {
            let stdout = std::io::stdout();
            table.write_csv(stdout.lock()).map_err(runtime)?;
        }
    }
    Ok(())
}
