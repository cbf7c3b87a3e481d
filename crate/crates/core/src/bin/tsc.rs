use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tsc_core::checkpoint::Checkpoint;
use tsc_core::harness::{
    ablate, evaluate, plot_series, summary_table, sweep, write_csv, write_json, write_plotdata, ControllerKind,
    RunConfig, RunManifest,
};
use tsc_core::ppo::{train, write_curve_csv};
use tsc_core::refine::{BackendKind, FakeMode, FakeServer};
use tsc_core::sim::ScenarioConfig;

#[derive(Parser)]
#[command(name = "tsc", version, about = "Signal-control training, evaluation and refinement experiments")]
struct Cli {
    /// Run document (TOML). Flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PPO backbone on routine traffic and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate controllers over seeds; writes CSV and JSON manifests.
    Eval(EvalArgs),
    /// Evaluate over a range of emergency-vehicle counts.
    Sweep(SweepArgs),
    /// Compare prompt-component configurations of the refinement layer.
    Ablate(EvalArgs),
    /// Serve the remote-evaluator test double until interrupted.
    ServeFakeBackend(FakeArgs),
    /// Print the effective run document.
    PrintConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional learning-curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    controllers: Option<Vec<ControllerKind>>,
    /// Seeds as `1-10` or `1,4,7`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Emergency vehicles spawned per seed.
    #[arg(long)]
    emv_count: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Remote evaluator URL; falls back to TSC_BACKEND_ENDPOINT.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    attempts: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    max_count: Option<usize>,
}

#[derive(Args)]
struct FakeArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    #[arg(long, value_enum, default_value = "rule")]
    mode: FakeMode,
    /// Reply delay for `timeout` mode.
    #[arg(long, default_value_t = 5000)]
    delay_ms: u64,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let bad = |_| format!("bad seed list {s:?}");
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',').map(|x| x.trim().parse().map_err(bad)).collect::<std::result::Result<_, _>>().map(SeedList)
}

fn load_scenario(cfg: &mut RunConfig, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        cfg.scenario = ScenarioConfig::load(p).with_context(|| format!("reading scenario {}", p.display()))?;
    }
    Ok(())
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        load_scenario(cfg, &self.scenario)?;
        if let Some(c) = &self.checkpoint {
            cfg.train.checkpoint = c.clone();
        }
        if let Some(c) = &self.controllers {
            cfg.eval.controllers = c.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.eval.seeds = s.0.clone();
        }
        if let Some(d) = &self.out_dir {
            cfg.eval.out_dir = d.clone();
        }
        if let Some(n) = self.emv_count {
            cfg.eval.emergencies.get_or_insert_with(Default::default).count = n;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = b;
        }
        if let Some(e) = &self.endpoint {
            cfg.backend.endpoint = Some(e.clone());
        }
        if let Some(k) = self.attempts {
            cfg.backend.k = k;
        }
        if let Some(t) = self.timeout_ms {
            cfg.backend.timeout_ms = t;
        }
        Ok(())
    }
}

fn load_params(cfg: &RunConfig) -> Result<Option<tsc_core::nn::PolicyParams>> {
    if !cfg.eval.controllers.iter().any(|c| c.needs_params()) {
        return Ok(None);
    }
    let path = &cfg.train.checkpoint;
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Some(ck.params))
}

fn export(m: &RunManifest, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(m, dir.join(format!("{stem}.csv")))?;
    write_json(m, dir.join(format!("{stem}.json")))?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };

    match cli.command {
        Command::Train(a) => {
            load_scenario(&mut cfg, &a.scenario)?;
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.ppo.seed = s;
            }
            if let Some(o) = a.out {
                cfg.train.checkpoint = o;
            }
            let start = Instant::now();
            let out = train(&cfg.scenario, &cfg.ppo, cfg.train.steps, |row| {
                if row.update_idx % 10 == 0 {
                    eprintln!(
                        "update {:>4}  reward {:>8.3}  value loss {:>8.4}  entropy {:.3}",
                        row.update_idx, row.mean_reward, row.value_loss, row.entropy
                    );
                }
            })?;
            Checkpoint { config: cfg.ppo.clone(), params: out.params }.save(&cfg.train.checkpoint)?;
            if let Some(c) = a.curve {
                write_curve_csv(&out.curve, c)?;
            }
            println!(
                "trained {} steps in {:.1} s -> {}",
                cfg.train.steps,
                start.elapsed().as_secs_f64(),
                cfg.train.checkpoint.display()
            );
        }
        Command::Eval(a) => {
            a.apply(&mut cfg)?;
            let params = load_params(&cfg)?;
            let m = evaluate(&cfg.eval_spec(), params.as_ref())?;
            export(&m, &cfg.eval.out_dir, &cfg.eval.name)?;
            print!("{}", summary_table(&m));
        }
        Command::Sweep(a) => {
            a.eval.apply(&mut cfg)?;
            if let Some(n) = a.min_count {
                cfg.sweep.min_count = n;
            }
            if let Some(n) = a.max_count {
                cfg.sweep.max_count = n;
            }
            if cfg.sweep.min_count > cfg.sweep.max_count {
                bail!("sweep min_count exceeds max_count");
            }
            let params = load_params(&cfg)?;
            let counts: Vec<usize> = (cfg.sweep.min_count..=cfg.sweep.max_count).collect();
            let runs = sweep(&cfg.eval_spec(), &counts, params.as_ref())?;
            for (count, m) in &runs {
                export(m, &cfg.eval.out_dir, &m.scenario)?;
                println!("emergency vehicles: {count}");
                print!("{}", summary_table(m));
            }
            for &c in &cfg.eval.controllers {
                let pts = plot_series(&runs, c);
                write_plotdata(&pts, cfg.eval.out_dir.join(format!("sweep-{}.csv", c.name())))?;
            }
        }
        Command::Ablate(a) => {
            a.apply(&mut cfg)?;
            cfg.eval.controllers = vec![ControllerKind::Reasonlight];
            let params = load_params(&cfg)?.expect("reasonlight needs params");
            for (label, m) in ablate(&cfg.eval_spec(), &params)? {
                export(&m, &cfg.eval.out_dir, &m.scenario)?;
                let row = &m.summary[0];
                println!(
                    "{label:<24} AEWT {:>7.2} ± {:<6.2} AWT {:>7.2} ± {:.2}",
                    row.aewt.mean, row.aewt.std, row.awt.mean, row.awt.std
                );
            }
        }
        Command::ServeFakeBackend(a) => {
            let server = FakeServer::start(&a.addr, a.mode, Duration::from_millis(a.delay_ms))?;
            println!("fake evaluator ({:?}) listening on {}", a.mode, server.url());
            server.join();
        }
        Command::PrintConfig => print!("{}", cfg.to_toml_string()?),
    }
    Ok(())
}
