//! CSV outputs.

use std::path::Path;

use warm_core::eval::{SeedSweep, BG_KEY};
use warm_core::trainer::TrainLogRecord;

use crate::error::{AppError, AppResult};
use crate::experiments::{AblationRow, MetricsRow, TokenRow};
use crate::sidecar::write_atomic;

pub const TRAIN_LOG_COLUMNS: [&str; 7] =
    ["episode_idx", "loss_margin", "loss_sim", "loss_total", "grad_norm", "lr", "wall_ms"];
pub const TOKEN_SWEEP_COLUMNS: [&str; 3] = ["M", "miou_mean", "miou_std"];

/// Header name of a per-class IoU column.
pub fn iou_column(class: u32) -> String {
    if class == BG_KEY {
        "iou_bg".into()
    } else {
        format!("iou_{class}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// An in-memory table serialized through the csv writer.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: ToString>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(|s| s.to_string()).collect();
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Format { path: path.to_path_buf(), offset: 0, msg: format!("{other:?}") },
    }
}

pub fn train_log_table(log: &[TrainLogRecord]) -> Table {
    let mut t = Table::new(TRAIN_LOG_COLUMNS);
    for r in log {
        t.push([
            r.episode_idx.to_string(),
            r.loss_margin.to_string(),
            r.loss_sim.to_string(),
            r.loss_total.to_string(),
            r.grad_norm.to_string(),
            r.lr.to_string(),
            r.wall_ms.to_string(),
        ]);
    }
    t
}

/// One row per metrics report; attention columns stay empty for FPS.
pub fn metrics_table(rows: &[MetricsRow]) -> Table {
    let mut classes: Vec<u32> = rows.iter().flat_map(|r| r.per_class.iter().map(|c| c.0)).collect();
    classes.sort_by_key(|&c| (c != BG_KEY, c));
    classes.dedup();
    let mut header = vec!["miou".to_string()];
    header.extend(classes.iter().map(|&c| iou_column(c)));
    header.extend(["d_intra", "d_inter", "d_instance", "attn_entropy", "attn_diversity", "qk_dist"].map(String::from));
    let mut t = Table::new(header);
    for r in rows {
        let mut row = vec![r.miou.to_string()];
        row.extend(classes.iter().map(|c| opt(r.per_class.iter().find(|x| x.0 == *c).map(|x| x.1))));
        row.extend([
            opt(r.d_intra),
            opt(r.d_inter),
            r.d_instance.to_string(),
            opt(r.attn_entropy),
            opt(r.attn_diversity),
            opt(r.qk_dist),
        ]);
        t.push(row);
    }
    t
}

/// Per-seed rows followed by `best`, `worst`, `mean` and `stdev` rows.
pub fn fps_sweep_table(sweep: &SeedSweep) -> Table {
    let mut classes: Vec<u32> = sweep.per_seed.iter().flat_map(|(_, r)| r.per_class.iter().map(|c| c.0)).collect();
    classes.sort_by_key(|&c| (c != BG_KEY, c));
    classes.dedup();
    let mut header = vec!["seed".to_string(), "mean_miou".to_string()];
    header.extend(classes.iter().map(|&c| iou_column(c)));
    let mut t = Table::new(header);
    let class_iou = |r: &warm_core::metrics::IouReport, c: u32| r.per_class.iter().find(|x| x.0 == c).map(|x| x.1);
    for (seed, r) in &sweep.per_seed {
        let mut row = vec![seed.to_string(), r.miou.to_string()];
        row.extend(classes.iter().map(|&c| opt(class_iou(r, c))));
        t.push(row);
    }
    let pick = |target: f64| sweep.per_seed.iter().find(|(_, r)| r.miou == target).map(|(_, r)| r).unwrap();
    for (label, r) in [("best", pick(sweep.max)), ("worst", pick(sweep.min))] {
        let mut row = vec![label.to_string(), r.miou.to_string()];
        row.extend(classes.iter().map(|&c| opt(class_iou(r, c))));
        t.push(row);
    }
    let stats: Vec<(f64, f64)> = classes
        .iter()
        .map(|&c| {
            let v: Vec<f64> = sweep.per_seed.iter().filter_map(|(_, r)| class_iou(r, c)).collect();
            warm_core::eval::mean_std(&v)
        })
        .collect();
    let mut mean = vec!["mean".to_string(), sweep.mean.to_string()];
    mean.extend(stats.iter().map(|s| s.0.to_string()));
    t.push(mean);
    let mut sd = vec!["stdev".to_string(), sweep.stdev.to_string()];
    sd.extend(stats.iter().map(|s| s.1.to_string()));
    t.push(sd);
    t
}

/// One row per variant: `row, variant, dist_qk, miou, miou_std, top_seeds`.
pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new(["row", "variant", "dist_qk", "miou", "miou_std", "top_seeds"]);
    for (i, r) in rows.iter().enumerate() {
        let label = char::from(b'a' + i as u8);
        t.push([
            label.to_string(),
            r.variant.to_string(),
            r.dist_qk.to_string(),
            r.miou.to_string(),
            r.miou_std.to_string(),
            r.top_seeds.to_string(),
        ]);
    }
    t
}

/// Every (seed, variant) run of an ablation.
pub fn ablation_runs_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new(["seed", "variant", "dist_qk", "miou", "attn_entropy"]);
    for r in rows {
        for run in &r.runs {
            t.push([
                run.seed.to_string(),
                r.variant.to_string(),
                run.dist_qk.to_string(),
                run.miou.to_string(),
                run.attn_entropy.to_string(),
            ]);
        }
    }
    t
}

pub fn token_sweep_table(rows: &[TokenRow]) -> Table {
    let mut t = Table::new(TOKEN_SWEEP_COLUMNS);
    for r in rows {
        t.push([r.tokens.to_string(), r.miou_mean.to_string(), r.miou_std.to_string()]);
    }
    t
}
