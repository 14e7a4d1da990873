//! Ablation runner and CSV table.
//!
//! CSV columns, in order: `row`, `label`, `seed`, `objects`, `top1`,
//! `mean_top5_recall`, `final_loss`, `steps`, `wall_clock_s`, `dataset_hash`.
//! One line per (row, seed); with more than one seed each row is followed by
//! a line whose `seed` is `median` holding the per-column medians.

use std::io::Write;
use std::time::Instant;

use inavit::interaction::InteractionVariant;
use inavit::model::{InAViTConfig, TokenSubset};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::Example;
use crate::error::{HarnessError, Result};
use crate::train::train_examples;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub model: InAViTConfig,
}

impl AblationRow {
    pub fn new(model: InAViTConfig) -> Self {
        Self { name: model.label(), model }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Baseline, SCA with each CI/ICV combination, SOT and UB with CI (with
    /// and without ICV), and SCA hand-only/object-only: 11 rows.
    Default,
    /// Every variant with each CI/ICV combination, the baseline and both SCA subsets: 15 rows.
    Full,
    /// SCA+CI+ICV with 1, 2 and 3 object slots.
    Objects,
}

impl std::str::FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "full" => Ok(Preset::Full),
            "objects" => Ok(Preset::Objects),
            _ => Err(HarnessError::Config(format!("unknown preset `{s}` (default, full, objects)"))),
        }
    }
}

fn variant(base: &InAViTConfig, v: Option<InteractionVariant>, ci: bool, icv: bool, subset: TokenSubset) -> InAViTConfig {
    InAViTConfig { interaction: v, context_infusion: ci, icv, subset, ..base.clone() }
}

pub fn preset_rows(preset: Preset, base: &InAViTConfig) -> Vec<AblationRow> {
    use InteractionVariant::{Sca, Sot, Ub};
    let all = TokenSubset::All;
    let configs = match preset {
        Preset::Default => {
            let mut v = vec![variant(base, None, false, false, all)];
            for (ci, icv) in [(false, false), (true, false), (false, true), (true, true)] {
                v.push(variant(base, Some(Sca), ci, icv, all));
            }
            for x in [Sot, Ub] {
                v.push(variant(base, Some(x), true, false, all));
                v.push(variant(base, Some(x), true, true, all));
            }
            v.push(variant(base, Some(Sca), true, true, TokenSubset::HandOnly));
            v.push(variant(base, Some(Sca), true, true, TokenSubset::ObjectOnly));
            v
        }
        Preset::Full => {
            let mut v = vec![variant(base, None, false, false, all)];
            for x in [Sca, Sot, Ub] {
                for (ci, icv) in [(false, false), (true, false), (false, true), (true, true)] {
                    v.push(variant(base, Some(x), ci, icv, all));
                }
            }
            v.push(variant(base, Some(Sca), true, true, TokenSubset::HandOnly));
            v.push(variant(base, Some(Sca), true, true, TokenSubset::ObjectOnly));
            v
        }
        Preset::Objects => (1..=3)
            .map(|n| InAViTConfig { objects: n, ..variant(base, Some(Sca), true, true, all) })
            .collect(),
    };
    configs
        .into_iter()
        .map(|m| {
            let mut row = AblationRow::new(m);
            if preset == Preset::Objects {
                row.name = format!("{} N={}", row.name, row.model.objects);
            }
            row
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: String,
    pub label: String,
    pub seed: String,
    pub objects: usize,
    pub top1: f64,
    pub mean_top5_recall: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub wall_clock_s: f64,
    pub dataset_hash: String,
}

/// Examples for one row's model config (region selection depends on it).
pub type ExampleSource<'a> = dyn Fn(&InAViTConfig) -> Result<(Vec<Example>, Vec<Example>)> + Sync + 'a;

/// Trains every `(row, seed)` pair; runs are independent and executed in parallel.
pub fn run_ablation(
    base: &RunConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    examples: &ExampleSource<'_>,
    dataset_hash: &str,
) -> Result<Vec<AblationResult>> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Empty("ablation"));
    }
    let prepared: Vec<(Vec<Example>, Vec<Example>)> = rows.iter().map(|r| examples(&r.model)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    jobs.par_iter()
        .map(|&(r, seed)| {
            let row = &rows[r];
            let cfg = RunConfig { seed: Some(seed), model: row.model.clone(), ..base.clone() };
            let start = Instant::now();
            let (train, eval) = &prepared[r];
            let out = train_examples(&cfg, train, eval, &mut std::io::sink())?;
            let report = out.eval.ok_or(HarnessError::Empty("evaluation split"))?;
            Ok(AblationResult {
                row: row.name.clone(),
                label: row.model.label(),
                seed: seed.to_string(),
                objects: row.model.objects,
                top1: report.top1,
                mean_top5_recall: report.mean_top5_recall,
                final_loss: out.losses.last().copied().unwrap_or(f32::NAN) as f64,
                steps: cfg.steps,
                wall_clock_s: start.elapsed().as_secs_f64(),
                dataset_hash: dataset_hash.to_string(),
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-row medians over seeds, in first-appearance row order.
pub fn medians(results: &[AblationResult]) -> Vec<AblationResult> {
    let mut rows: Vec<&str> = Vec::new();
    for r in results {
        if !rows.contains(&r.row.as_str()) {
            rows.push(&r.row);
        }
    }
    rows.iter()
        .map(|name| {
            let of: Vec<&AblationResult> = results.iter().filter(|r| r.row == *name).collect();
            let col = |f: fn(&AblationResult) -> f64| median(&of.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationResult {
                seed: "median".into(),
                top1: col(|r| r.top1),
                mean_top5_recall: col(|r| r.mean_top5_recall),
                final_loss: col(|r| r.final_loss),
                wall_clock_s: col(|r| r.wall_clock_s),
                ..of[0].clone()
            }
        })
        .collect()
}

/// Writes the table; median lines follow each row's seeds when there is more than one seed.
pub fn write_csv(results: &[AblationResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let meds = medians(results);
    for m in &meds {
        let of: Vec<&AblationResult> = results.iter().filter(|r| r.row == m.row).collect();
        for r in &of {
            w.serialize(r)?;
        }
        if of.len() > 1 {
            w.serialize(m)?;
        }
    }
    w.flush().map_err(crate::error::io_err("csv"))?;
    Ok(())
}
