//! Evaluation of prototype generators on held-out episodes.
//!
//! Confusion counts are accumulated over all episodes per global class (the
//! background shares one key) before IoUs are taken.

use alloc::format;
use alloc::vec::Vec;

use crate::episode::{split_fg_bg, Episode};
use crate::error::{Error, Result};
use crate::fps::{farthest_point_sampling, min_dist_classify};
use crate::losses::{point_distances, predict};
use crate::matrix::Matrix;
use crate::metrics::{attention_diversity, attention_entropy, qk_distance, IouAccumulator, IouReport};
use crate::rng::Rng;
use crate::warm::{EpisodeForward, PrototypeSet, Provenance, Variant, WarmParams};

/// Accumulator key of background points.
pub const BG_KEY: u32 = u32::MAX;

/// Local label → accumulator key for one episode.
pub fn label_map(episode: &Episode) -> Vec<u32> {
    core::iter::once(BG_KEY).chain(episode.class_ids.iter().copied()).collect()
}

fn accumulate(acc: &mut IouAccumulator, episode: &Episode, protos: &PrototypeSet) -> Result<()> {
    let map = label_map(episode);
    for q in &episode.query {
        let pred = predict(&point_distances(&q.features, protos)?);
        acc.add_mapped(&pred, &q.labels, &map)?;
    }
    Ok(())
}

/// Aggregate IoU for prototypes produced by `make` on every episode.
pub fn evaluate_prototypes<F>(episodes: &[Episode], mut make: F) -> Result<IouReport>
where
    F: FnMut(usize, &Episode) -> Result<PrototypeSet>,
{
    let mut acc = IouAccumulator::new();
    for (i, ep) in episodes.iter().enumerate() {
        let protos = make(i, ep)?;
        accumulate(&mut acc, ep, &protos)?;
    }
    acc.report()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: IouReport,
    pub episodes: usize,
    /// Mean normalized entropy over all attention maps.
    pub attn_entropy: f64,
    /// Mean diversity over all attention maps.
    pub attn_diversity: f64,
    /// Mean query-key distance over all (support cloud, class) pairs.
    pub qk_dist: f64,
}

/// Frozen-parameter evaluation of one variant, with attention diagnostics.
pub fn evaluate(params: &WarmParams, variant: Variant, eps: f64, episodes: &[Episode]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation episodes".into()));
    }
    let mut acc = IouAccumulator::new();
    let (mut ent, mut div, mut qk, mut maps, mut pairs) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for ep in episodes {
        let fwd = EpisodeForward::run(params, ep, variant, eps)?;
        accumulate(&mut acc, ep, &fwd.prototypes)?;
        for a in fwd.attention_maps() {
            ent += attention_entropy(a)?.value;
            div += attention_diversity(a)?;
            maps += 1;
        }
        for t in &fwd.clouds {
            for c in &t.classes {
                qk += qk_distance(&params.pool(c.class()), c.aligned_keys(), params)?;
                pairs += 1;
            }
        }
    }
    Ok(EvalReport {
        iou: acc.report()?,
        episodes: episodes.len(),
        attn_entropy: ent / maps as f64,
        attn_diversity: div / maps as f64,
        qk_dist: qk / pairs as f64,
    })
}

/// Farthest-point subsets of every support class. Each class keeps
/// `min(count, L_c)` rows per support cloud; subsets of the same class from
/// different clouds are stacked.
pub fn fps_prototypes(episode: &Episode, count: usize, rng: &mut Rng) -> Result<PrototypeSet> {
    if count == 0 {
        return Err(Error::Argument("FPS needs at least one sample per class".into()));
    }
    let mut bg = Vec::new();
    let mut fg: Vec<Vec<Matrix>> = (0..episode.n_way).map(|_| Vec::new()).collect();
    for way in 0..episode.n_way {
        for shot in 0..episode.k_shot {
            let s = split_fg_bg(episode.support_cloud(way, shot), way as u32 + 1)?;
            fg[way].push(farthest_point_sampling(&s.fg, count.min(s.fg.rows()), rng)?.subset);
            if !s.bg_is_empty() {
                bg.push(farthest_point_sampling(&s.bg, count.min(s.bg.rows()), rng)?.subset);
            }
        }
    }
    if bg.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    let stack = |parts: &[Matrix]| Matrix::vstack(&parts.iter().collect::<Vec<_>>());
    let mut classes = Vec::with_capacity(episode.n_way + 1);
    classes.push(stack(&bg)?);
    for parts in &fg {
        classes.push(stack(parts)?);
    }
    Ok(PrototypeSet { classes, provenance: Provenance::Fps })
}

/// FPS + nearest-prototype baseline over all episodes with one random stream.
pub fn evaluate_fps(episodes: &[Episode], count: usize, rng: &mut Rng) -> Result<IouReport> {
    let mut acc = IouAccumulator::new();
    for ep in episodes {
        let protos = fps_prototypes(ep, count, rng)?;
        let map = label_map(ep);
        for q in &ep.query {
            let pred = min_dist_classify(&q.features, &protos.classes)?;
            acc.add_mapped(&pred, &q.labels, &map)?;
        }
    }
    acc.report()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSweep {
    pub per_seed: Vec<(u64, IouReport)>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (divisor `n − 1`); 0 for a single seed.
    pub stdev: f64,
}

impl SeedSweep {
    pub fn from_results(per_seed: Vec<(u64, IouReport)>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Argument("seed sweep without seeds".into()));
        }
        let values: Vec<f64> = per_seed.iter().map(|(_, r)| r.miou).collect();
        let (mean, stdev) = mean_std(&values);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { per_seed, mean, min, max, stdev })
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

/// Mean and sample standard deviation; the deviation of fewer than two
/// values is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var))
}

/// Re-evaluates the FPS baseline on the same episodes once per seed; only the
/// sampling stream changes between runs.
pub fn fps_seed_sweep(episodes: &[Episode], count: usize, seeds: &[u64]) -> Result<SeedSweep> {
    if seeds.len() < 2 {
        return Err(Error::Argument(format!("a seed sweep needs at least 2 seeds, got {}", seeds.len())));
    }
    let per_seed = seeds
        .iter()
        .map(|&s| evaluate_fps(episodes, count, &mut Rng::new(s)).map(|r| (s, r)))
        .collect::<Result<Vec<_>>>()?;
    SeedSweep::from_results(per_seed)
}
