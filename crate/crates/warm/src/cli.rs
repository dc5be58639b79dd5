//! `warm` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use warm_core::episode::{Benchmark, Episode, GeneratorConfig};
use warm_core::trainer::{eval_episodes, Clock, NoClock};
use warm_core::warm::Variant;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::error::{AppError, AppResult};
use crate::experiments::{self, thread_pool};
use crate::format::{read_episode_set, write_episode_set};
use crate::sidecar::{content_hash, Sidecar};
use crate::tables::{self, Table};

#[derive(Debug, Parser)]
#[command(name = "warm", version, about = "Few-shot point-cloud prototype experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed the command varies.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds, starting at `--seed` (or 0).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Directory of episode files written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate evaluation episodes over the novel classes.
    Gen(Common),
    /// Train the configured method and write a checkpoint and training log.
    Train(Common),
    /// Evaluate a checkpoint (or the FPS baseline) and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FPS + nearest-prototype baseline over many sampling seeds.
    SweepFps(Common),
    /// Train and evaluate every alignment variant.
    Ablate(Common),
    /// Train and evaluate across token counts.
    TokenSweep(Common),
    /// Summarize the CSV outputs of a directory.
    Report(Common),
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn elapsed_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub experiment: ExperimentConfig,
    pub data: Option<PathBuf>,
    pub data_sha256: Option<String>,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    common: Common,
}

impl Ctx {
    fn new(common: &Common) -> AppResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &common.out {
            cfg.out_dir = o.clone();
        }
        if let Some(n) = common.seeds {
            if n == 0 {
                return Err(AppError::Usage("--seeds must be at least 1".into()));
            }
            let start = common.seed.unwrap_or(0);
            cfg.seeds = (start..start + n as u64).collect();
        }
        fs::create_dir_all(&cfg.out_dir).map_err(|e| AppError::io(&cfg.out_dir, e))?;
        Ok(Self { out: cfg.out_dir.clone(), cfg, common: common.clone() })
    }

    fn bench(&self) -> AppResult<Benchmark> {
        Ok(Benchmark::new(self.cfg.generator.clone())?)
    }

    /// Episodes from `--data`, or freshly generated novel-class episodes.
    fn episodes(&self, bench: &Benchmark) -> AppResult<Vec<Episode>> {
        match &self.common.data {
            Some(dir) => {
                let eps = read_episode_set(dir)?;
                let d = self.cfg.generator.feature_dim;
                if let Some(bad) = eps.iter().find(|e| e.dim() != d) {
                    return Err(AppError::Format {
                        path: dir.clone(),
                        offset: 26,
                        msg: format!("episode has D={}, config expects D={d}", bad.dim()),
                    });
                }
                Ok(eps)
            }
            None => Ok(eval_episodes(bench, self.cfg.eval_episodes, self.cfg.eval_seed)?),
        }
    }

    fn record(&self, command: &str, name: &str) -> AppResult<()> {
        let data_sha256 = match &self.common.data {
            Some(dir) => {
                let side = dir.join("generator.json");
                Some(Sidecar::<GeneratorConfig>::read(&side)?.config_sha256)
            }
            None => None,
        };
        let rec = RunRecord {
            command: command.into(),
            experiment: self.cfg.clone(),
            data: self.common.data.clone(),
            data_sha256,
        };
        Sidecar::new(rec).write(&self.out.join(name))
    }
}

fn say(msg: impl AsRef<str>) {
    println!("{}", msg.as_ref());
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Gen(c) => cmd_gen(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint),
        Command::SweepFps(c) => cmd_sweep_fps(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::TokenSweep(c) => cmd_token_sweep(&c),
        Command::Report(c) => cmd_report(&c),
    }
}

fn cmd_gen(c: &Common) -> AppResult<()> {
    let mut ctx = Ctx::new(c)?;
    if let Some(s) = c.seed {
        ctx.cfg.eval_seed = s;
    }
    let bench = ctx.bench()?;
    let eps = eval_episodes(&bench, ctx.cfg.eval_episodes, ctx.cfg.eval_seed)?;
    let dir = ctx.out.join("episodes");
    let paths = write_episode_set(&dir, &eps, &Sidecar::new(ctx.cfg.generator.clone()))?;
    ctx.record("gen", "gen.json")?;
    say(format!("wrote {} episodes to {}", paths.len(), dir.display()));
    Ok(())
}

fn cmd_train(c: &Common) -> AppResult<()> {
    let mut ctx = Ctx::new(c)?;
    if let Some(s) = c.seed {
        ctx.cfg.train.seed = s;
    }
    let variant = ctx
        .cfg
        .method
        .variant()
        .ok_or_else(|| AppError::Usage("the fps-min-dist method has nothing to train".into()))?;
    ctx.cfg.train.variant = variant;
    let bench = ctx.bench()?;
    let wall = WallClock(Instant::now());
    let clock: &dyn Clock = if ctx.cfg.record_wall_time { &wall } else { &NoClock };
    let out = experiments::train_with(&ctx.cfg.train, &bench, clock)?;
    let hash = content_hash(&(&ctx.cfg.generator, &ctx.cfg.train));
    Checkpoint::new(&out.params, variant, ctx.cfg.train.seed, hash).save(&ctx.out.join("checkpoint.json"))?;
    tables::train_log_table(&out.log).write(&ctx.out.join("train_log.csv"))?;
    ctx.record("train", "train.json")?;
    if let (Some(a), Some(b)) = (out.log.first(), out.log.last()) {
        say(format!("trained {} episodes: loss {:.4} -> {:.4}", out.log.len(), a.loss_total, b.loss_total));
    } else {
        say("no training episodes; checkpoint holds the initial parameters");
    }
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: Option<PathBuf>) -> AppResult<()> {
    let mut ctx = Ctx::new(c)?;
    let bench = ctx.bench()?;
    let eps = ctx.episodes(&bench)?;
    let row = match ctx.cfg.method {
        Method::FpsMinDist => {
            let seed = c.seed.unwrap_or(ctx.cfg.seeds.first().copied().unwrap_or(0));
            experiments::fps_metrics(&eps, ctx.cfg.fps_samples, seed)?
        }
        Method::Learned(_) => {
            let path = checkpoint.unwrap_or_else(|| ctx.out.join("checkpoint.json"));
            let dim = eps[0].dim();
            let (ck, params) = Checkpoint::load_params(&path, dim)?;
            ctx.cfg.method = Method::Learned(ck.variant);
            experiments::learned_metrics(&params, ck.variant, ctx.cfg.train.eps, &eps)?
        }
    };
    tables::metrics_table(std::slice::from_ref(&row)).write(&ctx.out.join("metrics.csv"))?;
    ctx.record("eval", "eval.json")?;
    say(format!("{} on {} episodes: mIoU {:.4}", ctx.cfg.method, eps.len(), row.miou));
    Ok(())
}

fn cmd_sweep_fps(c: &Common) -> AppResult<()> {
    let ctx = Ctx::new(c)?;
    if ctx.cfg.seeds.is_empty() {
        return Err(AppError::Usage("the FPS sweep needs at least one seed".into()));
    }
    let bench = ctx.bench()?;
    let eps = ctx.episodes(&bench)?;
    let sweep = experiments::fps_sweep(&thread_pool()?, &eps, ctx.cfg.fps_samples, &ctx.cfg.seeds)?;
    tables::fps_sweep_table(&sweep).write(&ctx.out.join("fps_sweep.csv"))?;
    ctx.record("sweep-fps", "sweep_fps.json")?;
    say(format!(
        "{} seeds: best {:.4} worst {:.4} mean {:.4} stdev {:.4}",
        sweep.per_seed.len(),
        sweep.max,
        sweep.min,
        sweep.mean,
        sweep.stdev
    ));
    Ok(())
}

fn cmd_ablate(c: &Common) -> AppResult<()> {
    let ctx = Ctx::new(c)?;
    let bench = ctx.bench()?;
    let eps = ctx.episodes(&bench)?;
    let rows = experiments::ablation(&thread_pool()?, &ctx.cfg.train, &bench, &eps, &Variant::ABLATION_GRID, &ctx.cfg.seeds)?;
    tables::ablation_table(&rows).write(&ctx.out.join("ablation.csv"))?;
    tables::ablation_runs_table(&rows).write(&ctx.out.join("ablation_runs.csv"))?;
    ctx.record("ablate", "ablate.json")?;
    for r in &rows {
        say(format!("{:<18} Dist(Q,K) {:>9.4}  mIoU {:.4}", r.variant.to_string(), r.dist_qk, r.miou));
    }
    Ok(())
}

fn cmd_token_sweep(c: &Common) -> AppResult<()> {
    let ctx = Ctx::new(c)?;
    let bench = ctx.bench()?;
    let eps = ctx.episodes(&bench)?;
    let mut train = ctx.cfg.train.clone();
    if let Some(v) = ctx.cfg.method.variant() {
        train.variant = v;
    }
    let rows = experiments::token_sweep(&thread_pool()?, &train, &bench, &eps, &ctx.cfg.token_counts, &ctx.cfg.seeds)?;
    tables::token_sweep_table(&rows).write(&ctx.out.join("token_sweep.csv"))?;
    ctx.record("token-sweep", "token_sweep.json")?;
    for r in &rows {
        say(format!("M={:<4} mIoU {:.4} ± {:.4}", r.tokens, r.miou_mean, r.miou_std));
    }
    Ok(())
}

const REPORT_INPUTS: [(&str, &str); 5] = [
    ("metrics.csv", "Evaluation"),
    ("fps_sweep.csv", "FPS seed sweep"),
    ("ablation.csv", "Alignment ablation"),
    ("token_sweep.csv", "Token count sweep"),
    ("train_log.csv", "Training log (last rows)"),
];

fn markdown(t: &Table, tail: Option<usize>) -> String {
    let mut s = format!("| {} |\n|{}\n", t.header.join(" | "), "---|".repeat(t.header.len()));
    let skip = tail.map_or(0, |n| t.rows.len().saturating_sub(n));
    for r in &t.rows[skip..] {
        s += &format!("| {} |\n", r.join(" | "));
    }
    s
}

/// Collects the tables present in `dir` into `report.md`.
pub fn build_report(dir: &Path) -> AppResult<String> {
    let mut out = String::from("# Experiment report\n");
    let mut found = 0;
    for (file, title) in REPORT_INPUTS {
        let p = dir.join(file);
        if !p.exists() {
            continue;
        }
        let t = Table::read(&p)?;
        let tail = (file == "train_log.csv").then_some(5);
        out += &format!("\n## {title}\n\n{}", markdown(&t, tail));
        found += 1;
    }
    if found == 0 {
        return Err(AppError::Usage(format!("no result tables in {}", dir.display())));
    }
    Ok(out)
}

fn cmd_report(c: &Common) -> AppResult<()> {
    let ctx = Ctx::new(c)?;
    let text = build_report(&ctx.out)?;
    crate::sidecar::write_atomic(&ctx.out.join("report.md"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
