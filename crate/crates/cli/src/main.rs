use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cromac::attacks::{AttackKind, AttackSpec};
use cromac::bounds::BoundReportWriter;
use cromac::diffcore::Checkpoint;
use cromac::harness::{fgsm_schedule, load_model, run_evaluation_with, run_training, table_attacks, Method, RunConfig};
use cromac::verify::{run_suite, SUITES};
use cromac::Error;

#[derive(Parser)]
#[command(name = "cromac", version, about = "Robust multi-agent communication: training, attacks and certification checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv, manifest.json and checkpoint.bin.
    Train {
        #[arg(long)]
        env: String,
        /// Flat `key = value` overrides on top of the environment preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// cromac, no-robust, no-adv or ame.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint under one attack.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "natural")]
        attack: String,
        /// Attack budget; defaults to the training ε.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Optional CSV of fused-latent bounds for the first seed.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Run a randomised property oracle and print PASS or FAIL.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Win rates of a checkpoint under the eight standard attack settings, as CSV.
    Table1 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

/// Exit status 1: a check failed. Exit status 2: the request was malformed.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) | Error::Checkpoint(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

fn train(env: &str, config: Option<PathBuf>, seed: u64, method: Option<String>, out: PathBuf) -> Result<(), Failure> {
    let mut text = match &config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let names_env = text.lines().any(|l| l.split('#').next().unwrap_or("").split('=').next().map(str::trim) == Some("env"));
    if names_env {
        let named = RunConfig::parse(&text)?.env;
        if named != RunConfig::preset(env)?.env {
            return Err(Failure::Usage(format!("config is for {named}, not {env}")));
        }
    } else {
        text = format!("env = {env}\n{text}");
    }
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(m) = method {
        cfg = cfg.with_method(Method::parse(&m)?)?;
    }
    cfg.seed = seed;
    cfg.validate()?;
    let outcome = run_training(&cfg, Some(&out))?;
    let wins = outcome.metrics.iter().rev().take(100).filter(|r| r.win).count();
    let recent = outcome.metrics.len().min(100);
    println!(
        "trained {} ({}) seed {seed}: {} env steps, {} episodes, {} updates; last {recent} rollouts won {wins}",
        cfg.env,
        cfg.method.as_str(),
        outcome.env_steps,
        outcome.episodes,
        outcome.trainer_steps
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn attack_from(kind: &str, epsilon: f64) -> Result<AttackSpec, Failure> {
    let kind = AttackKind::parse(kind)?;
    Ok(match kind {
        AttackKind::Natural => AttackSpec::natural(),
        AttackKind::Random => AttackSpec::random(epsilon)?,
        AttackKind::Fgsm => AttackSpec::fgsm(epsilon)?,
        AttackKind::Pgd => AttackSpec::pgd(epsilon)?,
    })
}

fn eval(
    checkpoint: PathBuf,
    attack: &str,
    epsilon: Option<f64>,
    episodes: usize,
    seeds: &[u64],
    latents: Option<PathBuf>,
) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let (config, model, _) = load_model(&ckpt)?;
    let spec = attack_from(attack, epsilon.unwrap_or(config.epsilon))?;
    let mut writer = match latents {
        Some(p) => Some(BoundReportWriter::new(BufWriter::new(File::create(&p).map_err(Error::from)?), model.dims.z_dim)?),
        None => None,
    };
    let r = run_evaluation_with(&ckpt, None, &spec, episodes, seeds, writer.as_mut())?;
    for (s, w) in seeds.iter().zip(&r.per_seed) {
        println!("seed {s}: win rate {w:.4}");
    }
    println!(
        "{} eps={} over {} x {} episodes: {:.4} ± {:.4} (mean return {:.4}, max message deviation {:e})",
        spec.kind.as_str(),
        spec.budget(),
        seeds.len(),
        episodes,
        r.mean,
        r.std,
        r.mean_return,
        r.max_deviation
    );
    if r.max_deviation > spec.budget() {
        return Err(Failure::Check(format!("message deviation {} exceeds budget {}", r.max_deviation, spec.budget())));
    }
    Ok(())
}

fn verify(suite: &str, cases: usize, seed: u64) -> Result<(), Failure> {
    if !SUITES.contains(&suite) {
        return Err(Failure::Usage(format!("unknown suite {suite:?}; expected one of {}", SUITES.join(", "))));
    }
    let r = run_suite(suite, cases, seed)?;
    println!("{r}");
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("suite {suite} failed")))
    }
}

fn table1(checkpoint: PathBuf, env: &str, episodes: usize, seeds: &[u64]) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let (config, _, _) = load_model(&ckpt)?;
    let columns = table_attacks(config.epsilon, fgsm_schedule(env, config.epsilon))?;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for (_, spec) in &columns {
        let r = run_evaluation_with::<Vec<u8>>(&ckpt, Some(env), spec, episodes, seeds, None)?;
        means.push(format!("{:.4}", r.mean));
        stds.push(format!("{:.4}", r.std));
    }
    let header: Vec<String> = columns.iter().map(|(n, s)| format!("{n}({})", s.budget())).collect();
    println!("stat,{}", header.join(","));
    println!("mean,{}", means.join(","));
    println!("std,{}", stds.join(","));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { env, config, seed, method, out } => train(&env, config, seed, method, out),
        Command::Eval { checkpoint, attack, epsilon, episodes, seeds, latents } => {
            eval(checkpoint, &attack, epsilon, episodes, &seeds, latents)
        }
        Command::Verify { suite, cases, seed } => verify(&suite, cases, seed),
        Command::Table1 { checkpoint, env, episodes, seeds } => table1(checkpoint, &env, episodes, &seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}
