//! Alternating learning and pruning stages.
//!
//! A learning stage trains until the validation loss has not improved for
//! `pwe` epochs in a row and hands back the best snapshot seen. A pruning
//! stage then removes every parameter below the largest threshold that keeps
//! the validation loss within `(1 + twt)·L̂`. The run ends when a pruning
//! stage removes nothing or the epoch budget is spent.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow, MetricsSink, StageKind};
use crate::model::{Evaluation, Model};
use crate::prune::{apply_threshold, loss_boundary, search_threshold, SearchConfig, ThresholdSearch};
use crate::reg::{DecayMode, Optimizer, RegularizerConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// η
    pub lr: f64,
    /// λ
    pub lambda: f64,
    /// β
    pub momentum: f64,
    pub decay_mode: DecayMode,
    pub variant: Variant,
    /// Plateau waiting epochs.
    pub pwe: usize,
    /// Thresholding worsening tolerance.
    pub twt: f64,
    pub batch_size: usize,
    /// Total learning epochs across all stages.
    pub max_epochs: usize,
    pub seed: u64,
    /// Training samples held out for validation.
    pub val_size: usize,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lambda: 1e-4,
            momentum: 0.0,
            decay_mode: DecayMode::Decoupled,
            variant: Variant::Lobster,
            pwe: 20,
            twt: 0.05,
            batch_size: 100,
            max_epochs: 3000,
            seed: 0,
            val_size: 5000,
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            variant: self.variant,
            lambda: self.lambda,
            lr: self.lr,
            momentum: self.momentum,
            decay_mode: self.decay_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regularizer().validate()?;
        if self.pwe == 0 {
            return Err(Error::Config("pwe must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.twt >= 0.0 && self.twt.is_finite()) {
            return Err(Error::Config(format!("twt must be a finite value ≥ 0, got {}", self.twt)));
        }
        // Negated so that NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.search.relative_resolution > 0.0) {
            return Err(Error::Config("search resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Bookkeeping of one learning stage.
#[derive(Debug, Clone)]
pub struct StageState {
    /// Epochs executed so far in the whole run.
    pub epoch: usize,
    /// `L̂`
    pub best_loss: f64,
    /// `N̂`
    pub best: Model,
    /// Consecutive non-improving epochs.
    pub plateau: usize,
}

impl StageState {
    pub fn new(model: &Model, loss: f64, epoch: usize) -> Self {
        Self {
            epoch,
            best_loss: loss,
            best: model.clone(),
            plateau: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageEnd {
    Plateau,
    Budget,
}

/// Runs epochs until a plateau of `pwe` epochs or until `epochs_left` is
/// spent. `run_epoch` trains `model` for one epoch and reports its losses.
pub fn learning_stage<F>(
    model: &mut Model,
    state: &mut StageState,
    pwe: usize,
    epochs_left: usize,
    mut run_epoch: F,
) -> Result<StageEnd>
where
    F: FnMut(&mut Model, &StageState) -> Result<EpochReport>,
{
    for _ in 0..epochs_left {
        let report = run_epoch(model, state)?;
        state.epoch += 1;
        if report.val_loss < state.best_loss {
            state.best_loss = report.val_loss;
            state.best = model.clone();
            state.plateau = 0;
        } else {
            state.plateau += 1;
        }
        if state.plateau >= pwe {
            return Ok(StageEnd::Plateau);
        }
    }
    Ok(StageEnd::Budget)
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: Model,
    pub pruned: usize,
    pub search: ThresholdSearch,
}

/// Boundary, search and application on `snapshot`, with the loss supplied
/// by `loss_of`.
pub fn pruning_stage_with<F>(
    snapshot: &Model,
    best_loss: f64,
    twt: f64,
    search: &SearchConfig,
    loss_of: F,
) -> Result<PruneOutcome>
where
    F: FnMut(&Model) -> Result<f64>,
{
    let boundary = loss_boundary(best_loss, twt)?;
    let found = search_threshold(snapshot, boundary, search, loss_of)?;
    let mut model = snapshot.clone();
    let pruned = apply_threshold(&mut model, found.threshold);
    Ok(PruneOutcome {
        model,
        pruned,
        search: found,
    })
}

pub fn pruning_stage(
    snapshot: &Model,
    best_loss: f64,
    validation: &Dataset,
    cfg: &TrainConfig,
) -> Result<PruneOutcome> {
    pruning_stage_with(snapshot, best_loss, cfg.twt, &cfg.search, |m| {
        Ok(m.evaluate(validation)?.loss)
    })
}

/// Train / validation / test data for one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub sparsity_pct: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub stage: usize,
    /// Epochs executed in the learning stage.
    pub epochs: usize,
    pub end: StageEnd,
    /// `L̂` at the end of the learning stage.
    pub best_loss: f64,
    pub boundary: f64,
    pub threshold: f64,
    pub pruned: usize,
    /// Validation loss of the pruned model.
    pub pruned_loss: f64,
    pub probes: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    pub stages: Vec<StageTrace>,
    pub test: Option<Evaluation>,
    pub budget_exhausted: bool,
    pub wall_secs: f64,
}

impl RunResult {
    pub fn sparsity_pct(&self) -> f64 {
        metrics::sparsity(&self.model).sparsity_pct()
    }
}

/// One pass over `train` in a freshly shuffled order; the last partial
/// batch is included. Returns the sample-weighted mean training loss.
pub fn train_epoch(
    model: &mut Model,
    train: &Dataset,
    opt: &mut Optimizer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let (x, labels) = train.batch(chunk)?;
        let (loss, grads) = model.loss_and_gradients(x, &labels)?;
        opt.step(model, &grads)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// [`train_with`] without a per-epoch observer.
pub fn train(
    model: Model,
    data: &Splits,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<RunResult> {
    train_with(model, data, cfg, sink, |_, _| Ok(()))
}

/// Full run. `observe` sees the model after every training epoch and after
/// every pruning stage.
pub fn train_with<O>(
    mut model: Model,
    data: &Splits,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
    mut observe: O,
) -> Result<RunResult>
where
    O: FnMut(&Model, StageKind) -> Result<()>,
{
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_e90c);
    let mut epochs = Vec::new();
    let mut stages = Vec::new();
    let mut epoch = 0usize;
    let mut budget_exhausted = false;
    let mut current_loss = model.evaluate(&data.validation)?.loss;

    for stage in 0.. {
        let mut opt = Optimizer::new(cfg.regularizer())?;
        let mut state = StageState::new(&model, current_loss, epoch);
        let stage_start = epoch;
        let end = learning_stage(
            &mut model,
            &mut state,
            cfg.pwe,
            cfg.max_epochs - epoch,
            |m, st| {
                let t0 = Instant::now();
                let train_loss = train_epoch(m, &data.train, &mut opt, cfg.batch_size, &mut rng)?;
                let val_loss = m.evaluate(&data.validation)?.loss;
                let n = st.epoch + 1;
                let mut row = MetricsRow::for_model(m, n, StageKind::Learn, stage, val_loss)?;
                row.train_loss = Some(train_loss);
                sink.record(&row)?;
                observe(m, StageKind::Learn)?;
                debug!("epoch {n}: train {train_loss:.6} val {val_loss:.6}");
                epochs.push(EpochLog {
                    epoch: n,
                    stage,
                    train_loss,
                    val_loss,
                    sparsity_pct: row.sparsity_pct,
                    wall_secs: t0.elapsed().as_secs_f64(),
                });
                Ok(EpochReport {
                    train_loss,
                    val_loss,
                })
            },
        )?;
        epoch = state.epoch;
        if end == StageEnd::Budget {
            budget_exhausted = true;
        }

        let outcome = pruning_stage(&state.best, state.best_loss, &data.validation, cfg)?;
        model = outcome.model;
        current_loss = model.evaluate(&data.validation)?.loss;
        let last = outcome.pruned == 0 || budget_exhausted;
        let mut row = MetricsRow::for_model(&model, epoch, StageKind::Prune, stage, current_loss)?;
        row.threshold = Some(outcome.search.threshold);
        let test = match (&data.test, last) {
            (Some(test), true) => Some(model.evaluate(test)?),
            _ => None,
        };
        row.test_top1 = test.map(|t| 100.0 * t.top1_error);
        sink.record(&row)?;
        observe(&model, StageKind::Prune)?;
        info!(
            "stage {stage}: {} epochs, L̂ {:.6}, T {:e}, pruned {}, sparsity {:.3}%",
            epoch - stage_start,
            state.best_loss,
            outcome.search.threshold,
            outcome.pruned,
            row.sparsity_pct
        );
        stages.push(StageTrace {
            stage,
            epochs: epoch - stage_start,
            end,
            best_loss: state.best_loss,
            boundary: outcome.search.boundary,
            threshold: outcome.search.threshold,
            pruned: outcome.pruned,
            pruned_loss: current_loss,
            probes: outcome.search.probes.len(),
        });
        if last {
            return Ok(RunResult {
                model,
                epochs,
                stages,
                test,
                budget_exhausted,
                wall_secs: started.elapsed().as_secs_f64(),
            });
        }
    }
    unreachable!("the stage loop only exits by returning")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_train_val, synthetic_blobs};
    use crate::metrics::VecSink;
    use crate::model::build_mlp;
    use crate::tensor::Tensor;

    /// Feeds a scripted sequence of validation losses; each epoch bumps the
    /// first weight so snapshots are distinguishable.
    fn scripted(losses: &[f64], pwe: usize, budget: usize) -> (StageEnd, StageState, usize) {
        let mut model = build_mlp(1, &[], 2, 0).unwrap();
        model.params_mut()[0].value.data_mut()[0] = 0.0;
        let mut state = StageState::new(&model, 2.0, 0);
        let mut it = losses.iter();
        let end = learning_stage(&mut model, &mut state, pwe, budget, |m, _| {
            m.params_mut()[0].value.data_mut()[0] += 1.0;
            Ok(EpochReport {
                train_loss: 0.0,
                val_loss: *it.next().expect("script too short"),
            })
        })
        .unwrap();
        let marker = state.best.params()[0].value.data()[0] as usize;
        (end, state, marker)
    }

    #[test]
    fn plateau_after_two_bad_epochs() {
        let (end, state, marker) = scripted(&[1.0, 0.9, 0.95, 0.92], 2, 100);
        assert_eq!(end, StageEnd::Plateau);
        assert_eq!(state.epoch, 4);
        assert_eq!(state.best_loss, 0.9);
        assert_eq!(marker, 2);
    }

    #[test]
    fn immediate_plateau_keeps_initial_snapshot() {
        let (end, state, marker) = scripted(&[2.5, 3.0], 1, 100);
        assert_eq!(end, StageEnd::Plateau);
        assert_eq!(state.epoch, 1);
        assert_eq!(marker, 0);
    }

    #[test]
    fn no_plateau_runs_to_budget() {
        let (end, state, marker) = scripted(&[1.0, 0.8, 0.6, 0.4, 0.2], 2, 5);
        assert_eq!(end, StageEnd::Budget);
        assert_eq!(state.epoch, 5);
        assert_eq!(marker, 5);
        assert_eq!(state.best_loss, 0.2);
    }

    /// 10 weights feeding from inputs that are always zero cannot affect
    /// the loss.
    #[test]
    fn dead_weights_are_pruned_in_one_stage() {
        let mut m = build_mlp(12, &[], 2, 1).unwrap();
        let mut w = m.params()[0].value.data().to_vec();
        // rows 2..7 (inputs 2..6) are dead: 5 inputs × 2 outputs = 10 weights
        for v in &mut w[4..14] {
            *v = 1e-3;
        }
        for (i, v) in w.iter_mut().enumerate() {
            if !(4..14).contains(&i) {
                *v = v.signum() * (v.abs() + 1.0);
            }
        }
        m.params_mut()[0].value = Tensor::new(vec![12, 2], w).unwrap();
        m.params_mut()[1].value = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            for j in 0..12 {
                let live = !(2..7).contains(&j);
                pixels.push(if live { ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5 } else { 0.0 });
            }
            labels.push(i % 2);
        }
        let val = Dataset::new(
            Tensor::new(vec![40, 12], pixels).unwrap(),
            labels,
            crate::data::Split::Validation,
        )
        .unwrap();
        // cross-entropy cannot see the dead weights; the penalty makes every
        // live one costly to remove, so admissibility is monotone
        let loss_of = |x: &Model| -> Result<f64> {
            let live: f64 = x
                .params()
                .iter()
                .flat_map(|p| p.value.data().iter().enumerate().map(move |(i, w)| (p.name.as_str(), i, w)))
                .filter(|&(name, i, _)| name != "fc1.weight" || !(4..14).contains(&i))
                .map(|(_, _, w)| 10.0 / (1.0 + w.abs()))
                .sum();
            Ok(x.evaluate(&val)?.loss + live)
        };
        let base = loss_of(&m).unwrap();
        let out = pruning_stage_with(&m, base, 0.0, &SearchConfig::default(), loss_of).unwrap();
        assert_eq!(out.pruned, 10);
        let mask = &out.model.params()[0].mask;
        assert!((4..14).all(|i| !mask.is_alive(i)));
        assert_eq!(out.model.evaluate(&val).unwrap().loss, m.evaluate(&val).unwrap().loss);
        // fixed point: nothing more to prune with unchanged L̂
        let again = pruning_stage_with(&out.model, base, 0.0, &SearchConfig::default(), loss_of).unwrap();
        assert_eq!(again.pruned, 0);
    }

    #[test]
    fn zero_tolerance_with_sensitive_weights_prunes_nothing() {
        let mut m = build_mlp(2, &[], 2, 3).unwrap();
        m.params_mut()[1].value = Tensor::new(vec![2], vec![0.3, -0.3]).unwrap();
        // strictly monotone in every weight: removing any raises the loss
        let loss_of = |m: &Model| -> Result<f64> {
            Ok(m.params().iter().flat_map(|p| p.value.data()).map(|w| 1.0 / (1.0 + w.abs())).sum())
        };
        let base = loss_of(&m).unwrap();
        let out = pruning_stage_with(&m, base, 0.0, &SearchConfig::default(), loss_of).unwrap();
        assert_eq!(out.pruned, 0);
    }

    fn blob_splits(seed: u64) -> Splits {
        let all = synthetic_blobs(60, 3, 8, 6.0, seed).unwrap();
        let (train, validation) = split_train_val(&all, 45, seed).unwrap();
        Splits {
            train,
            validation,
            test: None,
        }
    }

    #[test]
    fn degenerate_config_stops_after_first_prune() {
        let data = blob_splits(4);
        let cfg = TrainConfig {
            lambda: 0.0,
            twt: 0.0,
            pwe: 2,
            batch_size: 16,
            max_epochs: 40,
            ..TrainConfig::default()
        };
        let mut sink = VecSink::default();
        let model = build_mlp(8, &[16], 3, 4).unwrap();
        let run = train(model, &data, &cfg, &mut sink).unwrap();
        assert_eq!(run.stages.len(), 1);
        assert_eq!(run.epochs.len(), run.stages[0].epochs);
        assert_eq!(sink.rows.len(), run.epochs.len() + 1);
    }

    #[test]
    fn run_trace_invariants() {
        let data = blob_splits(5);
        let cfg = TrainConfig {
            pwe: 3,
            batch_size: 16,
            max_epochs: 120,
            twt: 0.1,
            ..TrainConfig::default()
        };
        let mut sink = VecSink::default();
        let model = build_mlp(8, &[16], 3, 5).unwrap();
        let run = train(model, &data, &cfg, &mut sink).unwrap();
        assert!(run.epochs.len() <= cfg.max_epochs);
        let mut prev = 0.0;
        for row in &sink.rows {
            assert!(row.sparsity_pct >= prev);
            prev = row.sparsity_pct;
        }
        for s in &run.stages {
            assert!(s.pruned_loss <= s.boundary);
            let learn: Vec<f64> = run
                .epochs
                .iter()
                .filter(|e| e.stage == s.stage)
                .map(|e| e.val_loss)
                .collect();
            let min = learn.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(s.best_loss <= min);
        }
        assert!(run.sparsity_pct() > 0.0);
    }
}
