//! Training and evaluation loops.

use std::io::Write;
use std::time::Instant;

use inavit::model::InAViT;
use inavit::numerics::{adamw_step, OptimizerState, ParamStore};
use inavit::synthdata::Split;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, RunConfig};
use crate::dataset::{Dataset, Example};
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::MetricsReport;

/// Log line for one optimizer step.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
}

/// Log line for one evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct EvalLog {
    pub step: u64,
    pub eval_top1: f64,
    pub eval_mean_top5_recall: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per step.
    pub losses: Vec<f32>,
    pub eval: Option<MetricsReport>,
    pub wall_clock_s: f64,
}

fn write_line<T: Serialize>(log: &mut dyn Write, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("log line serializes");
    line.push(b'\n');
    log.write_all(&line).map_err(io_err("log"))
}

/// Deterministic batch order: a fresh seeded permutation per epoch.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
        Self { rng, order: (0..n).collect(), pos: n, size: size.min(n) }
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean loss and gradient over `batch`. Per-example passes run in parallel;
/// the reduction is sequential in batch order, so the result does not depend
/// on the thread count.
pub fn batch_gradient(
    model: &InAViT,
    params: &ParamStore<f32>,
    examples: &[Example],
    batch: &[usize],
) -> inavit::Result<(f32, ParamStore<f32>)> {
    let parts: Vec<(f32, ParamStore<f32>)> = batch
        .par_iter()
        .map(|&i| {
            let e = &examples[i];
            model.loss_and_grads(params, &e.input, e.label).map(|(l, _, g)| (l, g))
        })
        .collect::<inavit::Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += *l;
        grads.accumulate(g)?;
    }
    let scale = 1.0 / batch.len() as f32;
    grads.scale(scale);
    Ok((loss * scale, grads))
}

/// Trains on in-memory examples, writing JSONL to `log`. Evaluates on `eval`
/// every `eval_every` steps and once at the end when `eval` is nonempty.
pub fn train_examples(cfg: &RunConfig, train: &[Example], eval: &[Example], log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    if train.is_empty() {
        return Err(HarnessError::Empty("training set"));
    }
    let start = Instant::now();
    let model = InAViT::new(cfg.model.clone())?;
    let mut params: ParamStore<f32> = model.init_params(seed)?;
    let mut state = OptimizerState::new(&params, cfg.optimizer);
    let mut batches = Batches::new(train.len(), cfg.batch_size, seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = batches.next();
        let (loss, grads) = batch_gradient(&model, &params, train, &batch).map_err(|e| match e {
            inavit::Error::NonFinite { op, label } => {
                HarnessError::NonFiniteLoss { step, detail: format!("{op} in `{label}`") }
            }
            other => other.into(),
        })?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFiniteLoss { step, detail: format!("loss {loss}") });
        }
        let lr = cfg.lr_at(step);
        state.hyper.lr = lr;
        adamw_step(&mut params, &grads, &mut state)?;
        write_line(log, &StepLog { step, loss, lr })?;
        losses.push(loss);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps && !eval.is_empty() {
            let r = evaluate_examples(&model, &params, eval)?;
            write_line(log, &EvalLog { step: step + 1, eval_top1: r.top1, eval_mean_top5_recall: r.mean_top5_recall, eval_loss: r.loss })?;
        }
    }
    let report = if eval.is_empty() {
        None
    } else {
        let r = evaluate_examples(&model, &params, eval)?;
        write_line(log, &EvalLog { step: cfg.steps, eval_top1: r.top1, eval_mean_top5_recall: r.mean_top5_recall, eval_loss: r.loss })?;
        Some(r)
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.model.clone(), cfg.steps, params),
        losses,
        eval: report,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads `cfg.dataset`, trains, and writes `log.jsonl`, `checkpoint.bin` and
/// `metrics.json` under `cfg.output`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = Dataset::load(&cfg.dataset)?;
    cfg.check_dataset(&data.manifest)?;
    let train = data.examples(&cfg.model, Split::Train)?;
    let eval = data.examples(&cfg.model, Split::Eval)?;
    std::fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let log_path = cfg.output.join("log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let outcome = train_examples(cfg, &train, &eval, &mut log)?;
    log.flush().map_err(io_err(&log_path))?;
    outcome.checkpoint.save(&cfg.output.join("checkpoint.bin"))?;
    if let Some(r) = &outcome.eval {
        let p = cfg.output.join("metrics.json");
        std::fs::write(&p, serde_json::to_vec_pretty(r).expect("report serializes")).map_err(io_err(&p))?;
    }
    Ok(outcome)
}

/// Logits for every example, in order.
pub fn predict(model: &InAViT, params: &ParamStore<f32>, examples: &[Example]) -> Result<Vec<Vec<f32>>> {
    Ok(examples.par_iter().map(|e| model.logits(params, &e.input)).collect::<inavit::Result<_>>()?)
}

pub fn evaluate_examples(model: &InAViT, params: &ParamStore<f32>, examples: &[Example]) -> Result<MetricsReport> {
    let start = Instant::now();
    let logits = predict(model, params, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    MetricsReport::from_logits(&logits, &labels, &config_hash(&model.cfg), start.elapsed().as_secs_f64())
}

/// Evaluates `checkpoint` on one split. With `expected_hash`, the
/// checkpoint's config hash must match it.
pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset, split: Split, expected_hash: Option<&str>) -> Result<MetricsReport> {
    let hash = checkpoint.config_hash();
    if let Some(want) = expected_hash.filter(|w| *w != hash) {
        return Err(HarnessError::HashMismatch { checkpoint: hash, expected: want.to_string() });
    }
    let model = InAViT::new(checkpoint.config.clone())?;
    model.check_params(&checkpoint.params)?;
    let examples = data.examples(&checkpoint.config, split)?;
    if examples.is_empty() {
        return Err(HarnessError::Empty("evaluation split"));
    }
    evaluate_examples(&model, &checkpoint.params, &examples)
}
