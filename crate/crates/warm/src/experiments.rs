//! Experiment drivers shared by the command line and the test suites.
//!
//! Independent runs fan out over a rayon pool; results are always collected
//! in job order so outputs do not depend on scheduling.

use rayon::prelude::*;
use warm_core::episode::{Benchmark, Episode};
use warm_core::eval::{evaluate, evaluate_fps, mean_std, SeedSweep};
use warm_core::metrics::{dispersion_metrics, Dispersion, DispersionSample, IouReport};
use warm_core::trainer::{train, Clock, NoClock, TrainConfig, TrainOutcome};
use warm_core::warm::{Variant, WarmParams};
use warm_core::{Matrix, Rng};

use crate::error::{AppError, AppResult};

/// Worker pool capped by `WARM_THREADS` when set.
pub fn thread_pool() -> AppResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("WARM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| AppError::Usage(format!("WARM_THREADS must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| AppError::Usage(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub miou: f64,
    pub per_class: Vec<(u32, f64)>,
    pub d_intra: Option<f64>,
    pub d_inter: Option<f64>,
    pub d_instance: f64,
    pub attn_entropy: Option<f64>,
    pub attn_diversity: Option<f64>,
    pub qk_dist: Option<f64>,
}

impl MetricsRow {
    fn new(iou: IouReport, disp: Dispersion) -> Self {
        Self {
            miou: iou.miou,
            per_class: iou.per_class,
            d_intra: disp.d_intra,
            d_inter: disp.d_inter,
            d_instance: disp.d_instance,
            attn_entropy: None,
            attn_diversity: None,
            qk_dist: None,
        }
    }
}

/// Dispersion of every foreground instance (support and query) of `episodes`.
pub fn episode_dispersion(episodes: &[Episode]) -> AppResult<Dispersion> {
    let mut parts: Vec<(u32, Matrix)> = Vec::new();
    for ep in episodes {
        for cloud in ep.support.iter().chain(&ep.query) {
            for (way, &class_id) in ep.class_ids.iter().enumerate() {
                let rows: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.labels[i] == way as u32 + 1).collect();
                if !rows.is_empty() {
                    parts.push((class_id, cloud.features.select_rows(&rows)));
                }
            }
        }
    }
    let samples: Vec<DispersionSample<'_>> =
        parts.iter().map(|(c, f)| DispersionSample { class_id: *c, features: f }).collect();
    Ok(dispersion_metrics(&samples)?)
}

pub fn learned_metrics(params: &WarmParams, variant: Variant, eps: f64, episodes: &[Episode]) -> AppResult<MetricsRow> {
    let r = evaluate(params, variant, eps, episodes)?;
    let mut row = MetricsRow::new(r.iou, episode_dispersion(episodes)?);
    row.attn_entropy = Some(r.attn_entropy);
    row.attn_diversity = Some(r.attn_diversity);
    row.qk_dist = Some(r.qk_dist);
    Ok(row)
}

pub fn fps_metrics(episodes: &[Episode], samples: usize, seed: u64) -> AppResult<MetricsRow> {
    let iou = evaluate_fps(episodes, samples, &mut Rng::new(seed))?;
    Ok(MetricsRow::new(iou, episode_dispersion(episodes)?))
}

/// FPS baseline once per seed on the same episodes.
pub fn fps_sweep(pool: &rayon::ThreadPool, episodes: &[Episode], samples: usize, seeds: &[u64]) -> AppResult<SeedSweep> {
    let per_seed = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| evaluate_fps(episodes, samples, &mut Rng::new(s)).map(|r| (s, r)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(SeedSweep::from_results(per_seed)?)
}

pub fn train_with(cfg: &TrainConfig, bench: &Benchmark, clock: &dyn Clock) -> AppResult<TrainOutcome> {
    Ok(train(cfg, bench, clock)?)
}

/// One trained (variant, seed) pair of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub miou: f64,
    pub dist_qk: f64,
    pub attn_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean over seeds.
    pub dist_qk: f64,
    pub miou: f64,
    pub miou_std: f64,
    /// Seeds on which this variant had the highest mIoU of the grid.
    pub top_seeds: usize,
    pub runs: Vec<AblationRun>,
}

/// Trains every variant of `variants` on every seed with otherwise identical
/// settings and evaluates each on `episodes`.
pub fn ablation(
    pool: &rayon::ThreadPool,
    base: &TrainConfig,
    bench: &Benchmark,
    episodes: &[Episode],
    variants: &[Variant],
    seeds: &[u64],
) -> AppResult<Vec<AblationRow>> {
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(vi, seed)| {
                let v = variants[vi];
                let cfg = TrainConfig { variant: v, seed, ..base.clone() };
                let out = train(&cfg, bench, &NoClock)?;
                let r = evaluate(&out.params, v, cfg.eps, episodes)?;
                Ok(AblationRun { seed, miou: r.iou.miou, dist_qk: r.qk_dist, attn_entropy: r.attn_entropy })
            })
            .collect::<Result<Vec<_>, warm_core::Error>>()
    })?;
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let rs: Vec<AblationRun> =
                jobs.iter().zip(&runs).filter(|(j, _)| j.0 == vi).map(|(_, r)| r.clone()).collect();
            let (miou, miou_std) = mean_std(&rs.iter().map(|r| r.miou).collect::<Vec<_>>());
            let dist_qk = rs.iter().map(|r| r.dist_qk).sum::<f64>() / rs.len() as f64;
            AblationRow { variant, dist_qk, miou, miou_std, top_seeds: 0, runs: rs }
        })
        .collect();
    for si in 0..seeds.len() {
        // first variant wins exact ties
        let mut best = 0;
        for vi in 1..rows.len() {
            if rows[vi].runs[si].miou > rows[best].runs[si].miou {
                best = vi;
            }
        }
        rows[best].top_seeds += 1;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub tokens: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub per_seed: Vec<f64>,
}

/// mIoU against the number of tokens per class, over shared seeds.
pub fn token_sweep(
    pool: &rayon::ThreadPool,
    base: &TrainConfig,
    bench: &Benchmark,
    episodes: &[Episode],
    counts: &[usize],
    seeds: &[u64],
) -> AppResult<Vec<TokenRow>> {
    let jobs: Vec<(usize, u64)> = counts.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let mious = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| {
                let cfg = TrainConfig { tokens_per_class: m, seed, ..base.clone() };
                let out = train(&cfg, bench, &NoClock)?;
                Ok(evaluate(&out.params, cfg.variant, cfg.eps, episodes)?.iou.miou)
            })
            .collect::<Result<Vec<f64>, warm_core::Error>>()
    })?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let per_seed = mious[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let (miou_mean, miou_std) = mean_std(&per_seed);
            TokenRow { tokens: m, miou_mean, miou_std, per_seed }
        })
        .collect())
}
