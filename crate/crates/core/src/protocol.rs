//! Leave-one-domain-out experiments: training-domain validation splits, the
//! training loop, hyperparameter grid search and multi-trial reports.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, argmax_rows, BlockProbe, ConfusionMatrix, DatasetProbe, OVERLAP_FORMULA,
};
use crate::autodiff::{AdamWConfig, AdamWState, Tape, Tensor};
use crate::data::DomainDataset;
use crate::distill::{sdvit_loss, BlockSelection, DistillConfig};
use crate::error::{Error, Result};
use crate::vit::{ForwardTrace, ViTConfig, ViTModel};

/// Inference batch size for evaluation passes.
pub const EVAL_CHUNK: usize = 128;

/// Fraction of every source domain held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

/// Independent RNG streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub selector: u64,
    pub split: u64,
}

impl Seeds {
    /// `init = s, data = s + 1, selector = s + 2, split = s + 3`.
    pub fn from_base(s: u64) -> Self {
        Self {
            init: s,
            data: s.wrapping_add(1),
            selector: s.wrapping_add(2),
            split: s.wrapping_add(3),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Validate every this many steps (and always after the last one).
    pub eval_interval: usize,
    pub distill: DistillConfig,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            steps: 2000,
            eval_interval: 200,
            distill: DistillConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        self.optimizer.validate()?;
        self.distill.validate(num_blocks)?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "steps, batch_size and eval_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub domain: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target: usize,
    pub sources: Vec<SourceSplit>,
}

impl SplitPlan {
    /// `(domain, index)` pairs of every source training example.
    pub fn pooled_train(&self) -> Vec<(usize, usize)> {
        self.sources
            .iter()
            .flat_map(|s| s.train.iter().map(move |&i| (s.domain, i)))
            .collect()
    }

    /// `(domain, index)` pairs of the pooled validation set.
    pub fn pooled_val(&self) -> Vec<(usize, usize)> {
        self.sources
            .iter()
            .flat_map(|s| s.val.iter().map(move |&i| (s.domain, i)))
            .collect()
    }

    fn check(&self, domains: &[DomainDataset]) -> Result<()> {
        for s in &self.sources {
            let ds = domains
                .get(s.domain)
                .ok_or_else(|| Error::Input(format!("plan names missing domain {}", s.domain)))?;
            if s.domain == self.target {
                return Err(Error::Input("target domain appears among sources".into()));
            }
            if s.train.iter().chain(&s.val).any(|&i| i >= ds.len()) {
                return Err(Error::Input(format!(
                    "plan index out of range for {}",
                    ds.domain
                )));
            }
        }
        Ok(())
    }
}

/// Shuffled 80/20 split of every domain except `target`. The validation
/// share of a domain with `n` examples is `floor(0.2 n)`.
pub fn make_splits(domain_sizes: &[usize], target: usize, trial_seed: u64) -> Result<SplitPlan> {
    if domain_sizes.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 domains, got {}",
            domain_sizes.len()
        )));
    }
    if target >= domain_sizes.len() {
        return Err(Error::Input(format!(
            "target {target} out of range for {} domains",
            domain_sizes.len()
        )));
    }
    let sources = domain_sizes
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != target)
        .map(|(d, &n)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(trial_seed.wrapping_mul(31).wrapping_add(d as u64));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
            let val = order[..n_val].to_vec();
            let train = order[n_val..].to_vec();
            SourceSplit {
                domain: d,
                train,
                val,
            }
        })
        .collect();
    Ok(SplitPlan { target, sources })
}

pub(crate) fn check_compatible(model: &ViTModel, ds: &DomainDataset) -> Result<()> {
    let c = model.config();
    if ds.channels != c.channels || ds.height != c.image_size || ds.width != c.image_size {
        return Err(Error::Shape(format!(
            "{} images are {}x{}x{}, model expects {}x{}x{}",
            ds.domain, ds.channels, ds.height, ds.width, c.channels, c.image_size, c.image_size
        )));
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= c.num_classes) {
        return Err(Error::Shape(format!(
            "label {y} exceeds the model's {} classes",
            c.num_classes
        )));
    }
    Ok(())
}

/// Runs inference over `indices` in chunks, handing each trace to `f` with
/// the indices it covers.
pub fn forward_in_chunks<F>(
    model: &ViTModel,
    ds: &DomainDataset,
    indices: &[usize],
    chunk: usize,
    mut f: F,
) -> Result<()>
where
    F: FnMut(&ForwardTrace<'_>, &[usize]) -> Result<()>,
{
    for idx in indices.chunks(chunk.max(1)) {
        let tape = Tape::inference();
        let trace = model.forward(&tape, &ds.batch(idx)?)?;
        f(&trace, idx)?;
    }
    Ok(())
}

fn predict(model: &ViTModel, ds: &DomainDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let classes = model.config().num_classes;
    let mut out = Vec::with_capacity(indices.len());
    forward_in_chunks(model, ds, indices, EVAL_CHUNK, |trace, _| {
        out.extend(argmax_rows(trace.logits.value().data(), classes));
        Ok(())
    })?;
    Ok(out)
}

/// Top-1 accuracy of the full model; the lowest class id wins ties.
pub fn evaluate(model: &ViTModel, ds: &DomainDataset) -> Result<f64> {
    check_compatible(model, ds)?;
    if ds.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    Ok(analysis::top1(&ds.labels, &predict(model, ds, &indices)?))
}

fn pooled_accuracy(model: &ViTModel, domains: &[DomainDataset], plan: &SplitPlan) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &plan.sources {
        let ds = &domains[s.domain];
        let preds = predict(model, ds, &s.val)?;
        correct += s
            .val
            .iter()
            .zip(&preds)
            .filter(|(&i, &p)| ds.labels[i] == p)
            .count();
        total += s.val.len();
    }
    if total == 0 {
        return Err(Error::Input("empty validation pool".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn pooled_batch(
    domains: &[DomainDataset],
    pairs: &[(usize, usize)],
) -> Result<(Tensor, Vec<usize>)> {
    let first = &domains[pairs[0].0];
    let n = first.image_len();
    let mut data = Vec::with_capacity(pairs.len() * n);
    let mut labels = Vec::with_capacity(pairs.len());
    for &(d, i) in pairs {
        let ds = &domains[d];
        ds.push_input(i, &mut data);
        labels.push(ds.labels[i]);
    }
    let t = Tensor::new(
        vec![pairs.len(), first.channels, first.height, first.width],
        data,
    )?;
    Ok((t, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub val_accuracy: f64,
    /// Mean training loss since the previous point.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation step.
    pub model: ViTModel,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub curve: Vec<CurvePoint>,
    /// Time spent in optimization steps, validation excluded.
    pub train_secs: f64,
    pub wall_secs: f64,
}

/// Mini-batch training on the pooled source-train examples of `plan`. Only
/// source domains are read. Returns the checkpoint with the best pooled
/// validation accuracy; ties go to the earliest step.
pub fn train(
    model: ViTModel,
    domains: &[DomainDataset],
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let wall = Instant::now();
    let mut model = model;
    cfg.validate(model.config().num_blocks)?;
    plan.check(domains)?;
    for s in &plan.sources {
        check_compatible(&model, &domains[s.domain])?;
    }
    let mut pool = plan.pooled_train();
    if pool.is_empty() {
        return Err(Error::Input("empty training pool".into()));
    }
    if cfg.batch_size > pool.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} pooled training examples",
            cfg.batch_size,
            pool.len()
        )));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let mut selector_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.selector);
    let mut opt = AdamWState::new(cfg.optimizer.clone(), model.params());
    pool.shuffle(&mut data_rng);
    let mut cursor = 0;

    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, ViTModel)> = None;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut train_secs = 0.0;
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        if cursor + cfg.batch_size > pool.len() {
            pool.shuffle(&mut data_rng);
            cursor = 0;
        }
        let pairs = &pool[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let (batch, labels) = pooled_batch(domains, pairs)?;
        let grads = {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let trace = bound.forward(&batch)?;
            let (loss, parts) = sdvit_loss(&trace, &labels, &cfg.distill, &mut selector_rng)?;
            if !parts.total.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite loss at step {step}: {parts:?}"
                )));
            }
            loss_sum += parts.total;
            loss_count += 1;
            let g = tape.backward(loss)?;
            bound.gradients(&g)
        };
        opt.step(model.params_mut(), &grads)?;
        train_secs += t0.elapsed().as_secs_f64();

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let val = pooled_accuracy(&model, domains, plan)?;
            let point = CurvePoint {
                step,
                val_accuracy: val,
                train_loss: loss_sum / loss_count as f64,
            };
            log::debug!("step {step}: loss {:.4} val {:.4}", point.train_loss, val);
            curve.push(point);
            loss_sum = 0.0;
            loss_count = 0;
            if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
                best = Some((step, val, model.clone()));
            }
        }
    }
    let (best_step, best_val_accuracy, model) = best.expect("at least one validation point");
    Ok(TrainOutcome {
        model,
        best_step,
        best_val_accuracy,
        curve,
        train_secs,
        wall_secs: wall.elapsed().as_secs_f64(),
    })
}

/// `(lambda, tau)` grid searched per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 0.2, 0.5],
            taus: vec![3.0, 5.0],
        }
    }
}

impl Grid {
    pub fn single(lambda: f64, tau: f64) -> Self {
        Self {
            lambdas: vec![lambda],
            taus: vec![tau],
        }
    }

    /// Cells in lambda-major order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lambdas
            .iter()
            .flat_map(|&l| self.taus.iter().map(move |&t| (l, t)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub lambda: f64,
    pub tau: f64,
    pub best_step: usize,
    pub val_accuracy: f64,
    pub train_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    /// Winning cell.
    pub lambda: f64,
    pub tau: f64,
    pub best_step: usize,
    pub val_accuracy: f64,
    pub target_accuracy: f64,
    pub curve: Vec<CurvePoint>,
    pub cells: Vec<CellResult>,
    /// Per-block accuracy on the target domain.
    pub block_probe: BlockProbe,
    pub overlap: f64,
    pub confusion: ConfusionMatrix,
    /// Mean share of final-block class attention on target foreground.
    pub foreground_ratio: f64,
    /// Optimization time of the winning cell.
    pub train_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub target: String,
    pub sources: Vec<String>,
    pub selection: BlockSelection,
    pub detach_teacher: bool,
    pub steps: usize,
    pub grid: Grid,
    /// Winning cell of the first trial.
    pub lambda: f64,
    pub tau: f64,
    /// Mean and population standard deviation of target accuracy over trials.
    pub mean: f64,
    pub std: f64,
    pub overlap_formula: String,
    pub trials: Vec<TrialReport>,
}

/// One row per `(target, trial, lambda, tau)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub method: String,
    pub target: String,
    pub trial: usize,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub val_accuracy: f64,
    pub best_step: usize,
    pub selected: bool,
    pub target_accuracy: Option<f64>,
}

impl RunReport {
    /// Copy with every wall-clock field zeroed, for byte comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for t in &mut r.trials {
            t.train_secs = 0.0;
            for c in &mut t.cells {
                c.train_secs = 0.0;
            }
        }
        r
    }

    pub fn mean_train_secs(&self) -> f64 {
        self.trials.iter().map(|t| t.train_secs).sum::<f64>() / self.trials.len() as f64
    }

    pub fn rows(&self) -> Vec<CellRow> {
        let mut rows = Vec::new();
        for t in &self.trials {
            for c in &t.cells {
                let selected = c.lambda == t.lambda && c.tau == t.tau;
                rows.push(CellRow {
                    method: self.method.clone(),
                    target: self.target.clone(),
                    trial: t.trial,
                    seed: t.seed,
                    lambda: c.lambda,
                    tau: c.tau,
                    val_accuracy: c.val_accuracy,
                    best_step: c.best_step,
                    selected,
                    target_accuracy: selected.then_some(t.target_accuracy),
                });
            }
        }
        rows
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-trial seed: trial `t` of a run with base seed `s` uses `s + 100 t`.
pub fn trial_seeds(base: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64)
        .map(|t| base.wrapping_add(100 * t))
        .collect()
}

pub struct GridOutcome {
    pub report: RunReport,
    /// Selected model of each trial.
    pub models: Vec<ViTModel>,
}

/// For every trial seed, trains every grid cell, keeps the cell with the
/// best pooled validation accuracy and only then evaluates it on the target.
/// With `BlockSelection::None` the grid collapses to a single ERM cell.
/// `cfg.seeds` is replaced by [`Seeds::from_base`] of each trial seed.
/// Cells run on up to `jobs` threads.
pub fn grid_search(
    domains: &[DomainDataset],
    target: usize,
    grid: &Grid,
    trial_seeds: &[u64],
    model_cfg: &ViTConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<GridOutcome> {
    model_cfg.validate()?;
    if trial_seeds.is_empty() {
        return Err(Error::Config("no trials".into()));
    }
    let erm = cfg.distill.selection == BlockSelection::None;
    let cells = if erm {
        vec![(0.0, cfg.distill.tau)]
    } else {
        grid.cells()
    };
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let sizes: Vec<usize> = domains.iter().map(DomainDataset::len).collect();
    let plans = trial_seeds
        .iter()
        .map(|&s| make_splits(&sizes, target, Seeds::from_base(s).split))
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, usize)> = (0..trial_seeds.len())
        .flat_map(|t| (0..cells.len()).map(move |c| (t, c)))
        .collect();
    let run_task = |&(t, c): &(usize, usize)| -> Result<TrainOutcome> {
        let seeds = Seeds::from_base(trial_seeds[t]);
        let (lambda, tau) = cells[c];
        let mut cell_cfg = cfg.clone();
        cell_cfg.seeds = seeds;
        cell_cfg.distill.lambda = lambda;
        cell_cfg.distill.tau = tau;
        log::info!(
            "{}: trial {t} cell lambda={lambda} tau={tau}",
            domains[target].domain
        );
        let model = ViTModel::init(model_cfg.clone(), seeds.init)?;
        train(model, domains, &plans[t], &cell_cfg)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<TrainOutcome> =
        pool.install(|| tasks.par_iter().map(run_task).collect::<Result<Vec<_>>>())?;

    let source_probes = domains
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != target)
        .map(|(_, ds)| ds);
    let source_sets: Vec<&DomainDataset> = source_probes.collect();
    let mut trials = Vec::with_capacity(trial_seeds.len());
    let mut models = Vec::with_capacity(trial_seeds.len());
    for (t, &seed) in trial_seeds.iter().enumerate() {
        let outs = &outcomes[t * cells.len()..(t + 1) * cells.len()];
        let mut win = 0;
        for (c, o) in outs.iter().enumerate() {
            if o.best_val_accuracy > outs[win].best_val_accuracy {
                win = c;
            }
        }
        let chosen = &outs[win];
        // the target domain is touched only from here on
        let probe = DatasetProbe::run(&chosen.model, &domains[target])?;
        let sources = source_sets
            .iter()
            .map(|ds| DatasetProbe::run(&chosen.model, ds))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DatasetProbe> = sources.iter().collect();
        let overlap = analysis::overlap_from_probes(&refs, &probe)?;
        trials.push(TrialReport {
            trial: t,
            seed,
            lambda: cells[win].0,
            tau: cells[win].1,
            best_step: chosen.best_step,
            val_accuracy: chosen.best_val_accuracy,
            target_accuracy: probe.accuracy(),
            curve: chosen.curve.clone(),
            cells: outs
                .iter()
                .zip(&cells)
                .map(|(o, &(lambda, tau))| CellResult {
                    lambda,
                    tau,
                    best_step: o.best_step,
                    val_accuracy: o.best_val_accuracy,
                    train_secs: o.train_secs,
                })
                .collect(),
            block_probe: probe.block_probe(),
            overlap: overlap.cosine,
            confusion: probe.confusion(model_cfg.num_classes)?,
            foreground_ratio: probe.foreground_ratio,
            train_secs: chosen.train_secs,
        });
        models.push(chosen.model.clone());
    }
    let accs: Vec<f64> = trials.iter().map(|t| t.target_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = RunReport {
        method: if erm { "ERM-ViT" } else { "ERM-SDViT" }.to_string(),
        target: domains[target].domain.clone(),
        sources: source_sets.iter().map(|d| d.domain.clone()).collect(),
        selection: cfg.distill.selection,
        detach_teacher: cfg.distill.detach_teacher,
        steps: cfg.steps,
        grid: if erm {
            Grid::single(0.0, cfg.distill.tau)
        } else {
            grid.clone()
        },
        lambda: trials[0].lambda,
        tau: trials[0].tau,
        mean,
        std,
        overlap_formula: OVERLAP_FORMULA.to_string(),
        trials,
    };
    Ok(GridOutcome { report, models })
}
