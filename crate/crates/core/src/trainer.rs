//! Training steps for end-to-end backpropagation, plain local learning,
//! hierarchical (independent + cascade) supervision and its patch-fused
//! variant, and the epoch loop around them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{Method, Schedule, TrainConfig};
use crate::data::{augment, batch_indices, Batch, Dataset, RawBatch};
use crate::error::{ensure, Error, Result};
use crate::nn::{build_preset, AuxHeadSpec, Mode, Model};
use crate::optim::{cosine_lr, sgd_step, ParamRef, SgdConfig};
use crate::parallel;
use crate::partition::{Partition, StemTrace};
use crate::seed::{self, SeedPlan};
use crate::tensor::ops::{scalar_mul, softmax_cross_entropy, add};
use crate::tensor::{with_tracker, Element, MemTracker, Tensor};

/// Weight of each loss term in the summed objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub independent: f64,
    pub cascade: f64,
    pub final_loss: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let l = &cfg.loss;
        match l.alpha {
            Some(a) => Self {
                independent: a,
                cascade: 1.0 - a,
                final_loss: l.lr_main,
            },
            None => Self {
                independent: l.lr_independent,
                cascade: l.lr_cascade,
                final_loss: l.lr_main,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Independent(usize),
    Cascade(usize),
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossValues {
    pub final_loss: f64,
    pub independent: Vec<f64>,
    pub cascade: Vec<f64>,
}

impl LossValues {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.final_loss)
            .chain(self.independent.iter().copied())
            .chain(self.cascade.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub losses: LossValues,
    pub lr: f64,
    pub wall_time_s: f64,
    pub peak_activation_bytes: usize,
    /// Correct final-head predictions in the batch.
    pub correct: usize,
    pub batch_size: usize,
}

/// A partitioned model together with its loss weighting and optimizer.
#[derive(Debug)]
pub struct Trainer<T: Element> {
    pub partition: Partition<T>,
    pub method: Method,
    pub patch_n: usize,
    pub weights: LossWeights,
    pub sgd: SgdConfig,
    lr_groups: Vec<(Vec<ParamRef<T>>, f64)>,
}

impl<T: Element> Trainer<T> {
    pub fn new(
        model: Model<T>,
        method: Method,
        modules: usize,
        cascade_k: Option<usize>,
        patch_n: usize,
        aux: &AuxHeadSpec,
        weights: LossWeights,
        sgd: SgdConfig,
        seed: u64,
    ) -> Result<Self> {
        let modules = if method.is_local() { modules } else { 1 };
        let cascade_k = if method.has_cascade() && modules > 1 { cascade_k } else { None };
        if method.has_cascade() && modules > 1 {
            ensure!(cascade_k.is_some(), "{method} needs a cascade width");
        }
        let patch_n = if method == Method::Hpff { patch_n } else { 1 };
        let partition = Partition::new(model, modules, cascade_k, aux, seed)?;
        if method.has_cascade() && partition.num_modules() > 1 && partition.groups.is_empty() {
            return Err(Error::config(format!(
                "{method} with K = {} builds no cascade groups",
                partition.num_modules()
            )));
        }
        let mut trainer = Self {
            partition,
            method,
            patch_n,
            weights,
            sgd,
            lr_groups: Vec::new(),
        };
        trainer.set_lr_multipliers(1.0, 1.0);
        Ok(trainer)
    }

    pub fn from_config(cfg: &TrainConfig, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedPlan::from_master(cfg.run.seed);
        let model = build_preset(&cfg.run.arch, input_shape, num_classes, seeds.init)?;
        let mut t = Self::new(
            model,
            cfg.run.method,
            cfg.effective_modules(),
            cfg.effective_cascade(),
            cfg.effective_patch_n(),
            &cfg.aux_spec(num_classes),
            LossWeights::from_config(cfg),
            cfg.sgd(),
            seeds.init,
        )?;
        t.set_lr_multipliers(cfg.loss.lr_aux, cfg.loss.lr_module);
        Ok(t)
    }

    /// Step-size multipliers for independent heads (γ) and modules 1..K-1.
    pub fn set_lr_multipliers(&mut self, aux: f64, module: f64) {
        let p = &self.partition;
        let k = p.num_modules();
        let mut groups = Vec::new();
        let thetas: Vec<_> = (1..k).flat_map(|j| p.module_params(j)).collect();
        let gammas: Vec<_> = (1..k).flat_map(|j| p.independent_params(j)).collect();
        let rest: Vec<_> = p
            .module_params(k)
            .into_iter()
            .chain((1..=p.groups.len()).flat_map(|i| p.cascade_params(i)))
            .collect();
        for (ps, m) in [(thetas, module), (gammas, aux), (rest, 1.0)] {
            if !ps.is_empty() {
                groups.push((ps, m));
            }
        }
        self.lr_groups = groups;
    }

    pub fn terms(&self) -> Vec<Term> {
        let k = self.partition.num_modules();
        let mut t: Vec<Term> = (1..k).map(Term::Independent).collect();
        t.extend((1..=self.partition.groups.len()).map(Term::Cascade));
        t.push(Term::Final);
        t
    }

    fn weight(&self, t: Term) -> f64 {
        match t {
            Term::Independent(_) => self.weights.independent,
            Term::Cascade(_) => self.weights.cascade,
            Term::Final => self.weights.final_loss,
        }
    }

    /// Logits of one loss term given the stem trace.
    pub fn term_logits(&self, t: Term, stem: &StemTrace<T>, mode: Mode) -> Result<Tensor<T>> {
        match t {
            Term::Independent(j) => self.partition.independent_logits(j, stem, mode, self.patch_n),
            Term::Cascade(i) => self.partition.forward_cascade(
                i,
                stem,
                Mode {
                    update_stats: false,
                    ..mode
                },
                self.patch_n,
            ),
            Term::Final => Ok(stem.logits().clone()),
        }
    }

    pub fn stem(&self, x: &Tensor<T>, mode: Mode) -> Result<StemTrace<T>> {
        self.partition.forward_stem(x, mode, self.method.is_local())
    }

    fn evaluate_term(&self, t: Term, stem: &StemTrace<T>, targets: &[usize]) -> Result<(Tensor<T>, usize)> {
        let logits = self.term_logits(t, stem, Mode::TRAIN)?;
        let correct = if t == Term::Final { count_correct(&logits, targets) } else { 0 };
        let loss = softmax_cross_entropy(&logits, targets)?;
        Ok((loss, correct))
    }

    /// Forward and backward for one batch; gradients accumulate into the
    /// parameters, nothing is updated.
    pub fn accumulate_gradients(&self, batch: &Batch<T>, schedule: Schedule) -> Result<StepReport> {
        let start = Instant::now();
        for p in self.partition.all_params() {
            p.zero_grad();
        }
        let tracker = MemTracker::new();
        let terms = self.terms();
        let outcome: Result<Vec<(f64, usize)>> = with_tracker(tracker.clone(), || {
            let stem = self.stem(&batch.inputs, Mode::TRAIN)?;
            match schedule {
                Schedule::Serial => {
                    let mut total: Option<Tensor<T>> = None;
                    let mut values = Vec::with_capacity(terms.len());
                    for &t in &terms {
                        let (loss, correct) = self.evaluate_term(t, &stem, &batch.targets)?;
                        values.push((to_f64(loss.item()), correct));
                        let weighted = scalar_mul(&loss, self.weight(t));
                        total = Some(match total {
                            None => weighted,
                            Some(acc) => add(&acc, &weighted)?,
                        });
                    }
                    check_finite(&values)?;
                    total.expect("final term always present").backward()?;
                    Ok(values)
                }
                Schedule::Parallel => {
                    let results = parallel::map_collect(terms.len(), |ti| {
                        with_tracker(tracker.clone(), || {
                            let t = terms[ti];
                            let (loss, correct) = self.evaluate_term(t, &stem, &batch.targets)?;
                            let value = to_f64(loss.item());
                            if value.is_finite() {
                                scalar_mul(&loss, self.weight(t)).backward()?;
                            }
                            Ok((value, correct))
                        })
                    });
                    let values = results.into_iter().collect::<Result<Vec<_>>>()?;
                    check_finite(&values)?;
                    Ok(values)
                }
            }
        });
        let values = outcome?;
        let mut losses = LossValues {
            final_loss: 0.0,
            independent: Vec::new(),
            cascade: Vec::new(),
        };
        let mut correct = 0;
        for (&t, &(v, c)) in terms.iter().zip(&values) {
            match t {
                Term::Independent(_) => losses.independent.push(v),
                Term::Cascade(_) => losses.cascade.push(v),
                Term::Final => {
                    losses.final_loss = v;
                    correct = c;
                }
            }
        }
        Ok(StepReport {
            losses,
            lr: 0.0,
            wall_time_s: start.elapsed().as_secs_f64(),
            peak_activation_bytes: tracker.peak(),
            correct,
            batch_size: batch.targets.len(),
        })
    }

    /// One SGD update at learning rate `lr` with the accumulated gradients.
    pub fn apply_update(&self, lr: f64) -> Result<()> {
        let scale = lr / self.sgd.base_lr;
        for (ps, m) in &self.lr_groups {
            sgd_step(ps, &self.sgd, scale * m)?;
        }
        Ok(())
    }

    pub fn step(&self, batch: &Batch<T>, lr: f64, schedule: Schedule) -> Result<StepReport> {
        let mut r = self.accumulate_gradients(batch, schedule)?;
        self.apply_update(lr)?;
        r.lr = lr;
        Ok(r)
    }

    /// Mean final-head loss and accuracy over `ds` in eval mode.
    pub fn evaluate(&self, ds: &Dataset, batch_size: usize) -> Result<(f64, f64, usize)> {
        let tracker = MemTracker::new();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        with_tracker(tracker.clone(), || -> Result<()> {
            for idx in batch_indices(ds.len(), batch_size, None::<&mut rand_chacha::ChaCha8Rng>) {
                let b = Batch::<T>::from_raw(&RawBatch::gather(ds, &idx), &ds.normalization)?;
                let logits = self.partition.model.forward(&b.inputs, Mode::EVAL)?;
                correct += count_correct(&logits, &b.targets);
                loss_sum += to_f64(softmax_cross_entropy(&logits, &b.targets)?.item()) * idx.len() as f64;
            }
            Ok(())
        })?;
        let n = ds.len().max(1) as f64;
        Ok((loss_sum / n, correct as f64 / n, tracker.peak()))
    }
}

fn to_f64<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn check_finite(values: &[(f64, usize)]) -> Result<()> {
    if let Some((v, _)) = values.iter().find(|(v, _)| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(())
}

pub fn count_correct<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> usize {
    let classes = logits.dims()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == t
        })
        .count()
}

fn require(t: &Trainer<impl Element>, ok: bool, op: &str) -> Result<()> {
    ensure!(ok, "{op} called on a {} trainer", t.method);
    Ok(())
}

/// Single loss at the final head, one backward, one update.
pub fn train_step_bp<T: Element>(t: &Trainer<T>, batch: &Batch<T>, lr: f64) -> Result<StepReport> {
    require(t, t.method == Method::Bp, "train_step_bp")?;
    t.step(batch, lr, Schedule::Serial)
}

/// Detached stem, independent auxiliary losses and the final loss.
pub fn train_step_local<T: Element>(t: &Trainer<T>, batch: &Batch<T>, lr: f64) -> Result<StepReport> {
    require(t, t.method == Method::Local, "train_step_local")?;
    t.step(batch, lr, Schedule::Serial)
}

/// Independent, cascade and final losses in one weighted backward.
pub fn train_step_hilo<T: Element>(t: &Trainer<T>, batch: &Batch<T>, lr: f64) -> Result<StepReport> {
    require(t, t.method.has_cascade(), "train_step_hilo")?;
    t.step(batch, lr, Schedule::Serial)
}

/// Post-stem loss terms and their backwards as concurrent tasks.
pub fn parallel_schedule<T: Element>(t: &Trainer<T>, batch: &Batch<T>, lr: f64) -> Result<StepReport> {
    let schedule = if t.method.is_local() { Schedule::Parallel } else { Schedule::Serial };
    t.step(batch, lr, schedule)
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,peak_activation_bytes";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub peak_activation_bytes: usize,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.accuracy, self.lr, self.peak_activation_bytes
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub epochs_completed: usize,
    pub interrupted: bool,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub best_test_accuracy: f64,
    pub metrics: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a TrainConfig,
    config_hash: String,
    seeds: SeedPlan,
    build_id: String,
    start_unix_s: f64,
    end_unix_s: f64,
    wall_time_s: f64,
    input_shape: Vec<usize>,
    train_examples: usize,
    test_examples: usize,
    artifacts: Vec<PathBuf>,
    result: ManifestResult,
}

#[derive(Debug, Serialize)]
struct ManifestResult {
    epochs_completed: usize,
    interrupted: bool,
    final_test_accuracy: f64,
    best_test_accuracy: f64,
}

pub fn build_id() -> String {
    format!(
        "{} {} ({})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        option_env!("HPFF_BUILD_ID").unwrap_or("local build")
    )
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Epoch loop with cosine learning rate, metrics, checkpoints and manifest,
/// all written under `cfg.run.out_dir`. `extra_artifacts` are listed in the
/// manifest (they must already exist). A set `cancel` flag stops the run
/// after the current step.
pub fn fit(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    extra_artifacts: &[PathBuf],
    cancel: Option<&AtomicBool>,
) -> Result<RunResult> {
    cfg.validate()?;
    ensure!(train.shape() == test.shape(), "train/test image shapes differ");
    ensure!(!train.is_empty() && !test.is_empty(), "empty dataset");
    let started = unix_now();
    let clock = Instant::now();
    let out = &cfg.run.out_dir;
    create_dir(out)?;
    let seeds = SeedPlan::from_master(cfg.run.seed);
    let input_shape = train.shape().to_vec();
    let trainer = Trainer::<f32>::from_config(cfg, &input_shape, crate::data::NUM_CLASSES)?;
    let partition_path = out.join("partition.json");
    write_file(
        &partition_path,
        serde_json::to_string_pretty(&trainer.partition.summary()).expect("summary serializes"),
    )?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let schedule = cfg.cosine();
    let policy = if cfg.data.augment {
        cfg.data.dataset.default_augment()
    } else {
        crate::data::AugmentPolicy::none()
    };
    let header = |epoch| CheckpointHeader {
        arch: cfg.run.arch.clone(),
        input_shape: input_shape.clone(),
        num_classes: crate::data::NUM_CLASSES,
        method: cfg.run.method.to_string(),
        modules: trainer.partition.num_modules(),
        config_hash: cfg.hash(),
        epoch,
    };
    let best_path = out.join("best.ckpt");
    let final_path = out.join("final.ckpt");
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut last_test = (f64::NAN, 0.0);
    let mut epochs_done = 0;
    let mut interrupted = false;
    let cancelled = || cancel.is_some_and(|c| c.load(Ordering::Relaxed));
    'epochs: for epoch in 0..cfg.run.epochs {
        let lr = cosine_lr(&schedule, epoch)?;
        let mut shuffle = seed::rng(seeds.shuffle, &format!("epoch{epoch}"));
        let mut aug_rng = seed::rng(seeds.augment, &format!("epoch{epoch}"));
        let (mut loss_sum, mut correct, mut peak) = (0.0, 0usize, 0usize);
        for idx in batch_indices(train.len(), cfg.run.batch_size, Some(&mut shuffle)) {
            if cancelled() {
                interrupted = true;
                break 'epochs;
            }
            let raw = RawBatch::gather(train, &idx);
            let raw = augment(&raw, &policy, &mut aug_rng);
            let batch = Batch::<f32>::from_raw(&raw, &train.normalization)?;
            let r = trainer.step(&batch, lr, cfg.run.schedule)?;
            loss_sum += r.losses.final_loss * idx.len() as f64;
            correct += r.correct;
            peak = peak.max(r.peak_activation_bytes);
        }
        let n = train.len() as f64;
        let (test_loss, test_acc, test_peak) = trainer.evaluate(test, cfg.run.eval_batch_size)?;
        if !test_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite test loss at epoch {epoch}")));
        }
        let epoch_rows = [
            MetricsRow {
                epoch,
                split: "train",
                loss: loss_sum / n,
                accuracy: correct as f64 / n,
                lr,
                peak_activation_bytes: peak,
            },
            MetricsRow {
                epoch,
                split: "test",
                loss: test_loss,
                accuracy: test_acc,
                lr,
                peak_activation_bytes: test_peak,
            },
        ];
        for r in epoch_rows {
            writeln!(metrics_file, "{}", r.csv()).map_err(|e| Error::io(&metrics_path, e))?;
            rows.push(r);
        }
        if test_acc > best {
            best = test_acc;
            Checkpoint::from_partition(&trainer.partition, header(epoch)).save(&best_path)?;
        }
        last_test = (test_loss, test_acc);
        epochs_done = epoch + 1;
    }
    metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(metrics_file);
    Checkpoint::from_partition(&trainer.partition, header(epochs_done)).save(&final_path)?;
    let mut checkpoints = vec![final_path];
    if best_path.exists() {
        checkpoints.push(best_path);
    }
    let manifest_path = out.join("manifest.json");
    let mut artifacts = vec![metrics_path.clone(), partition_path];
    artifacts.extend(checkpoints.iter().cloned());
    artifacts.extend(extra_artifacts.iter().cloned());
    for a in &artifacts {
        ensure!(a.exists(), "artifact {} missing at manifest time", a.display());
    }
    let manifest = Manifest {
        config: cfg,
        config_hash: cfg.hash(),
        seeds,
        build_id: build_id(),
        start_unix_s: started,
        end_unix_s: unix_now(),
        wall_time_s: clock.elapsed().as_secs_f64(),
        input_shape,
        train_examples: train.len(),
        test_examples: test.len(),
        artifacts,
        result: ManifestResult {
            epochs_completed: epochs_done,
            interrupted,
            final_test_accuracy: last_test.1,
            best_test_accuracy: best.max(0.0),
        },
    };
    write_file(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(RunResult {
        epochs_completed: epochs_done,
        interrupted,
        final_test_accuracy: last_test.1,
        final_test_loss: last_test.0,
        best_test_accuracy: best.max(0.0),
        metrics: rows,
        metrics_path,
        checkpoints,
        manifest_path,
    })
}

/// Shared handle to a cancellation flag.
pub type CancelFlag = Arc<AtomicBool>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};

    fn toy_batch(seed: u64, n: usize) -> Batch<f64> {
        let ds = synthetic(Split::Train, n, seed).unwrap();
        let idx: Vec<_> = (0..n).collect();
        Batch::from_raw(&RawBatch::gather(&ds, &idx), &ds.normalization).unwrap()
    }

    fn trainer(method: Method, k: usize) -> Trainer<f64> {
        let model = build_preset("miniresnet-8", &[3, 16, 16], 10, 1).unwrap();
        Trainer::new(
            model,
            method,
            k,
            Some(2),
            2,
            &AuxHeadSpec::default(),
            LossWeights {
                independent: 1.0,
                cascade: 1.0,
                final_loss: 1.0,
            },
            SgdConfig::default(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn term_layout() {
        let t = trainer(Method::Hilo, 4);
        assert_eq!(
            t.terms(),
            vec![
                Term::Independent(1),
                Term::Independent(2),
                Term::Independent(3),
                Term::Cascade(1),
                Term::Cascade(2),
                Term::Final
            ]
        );
        assert_eq!(trainer(Method::Bp, 4).terms(), vec![Term::Final]);
    }

    #[test]
    fn hpff_step_reports_all_losses() {
        let t = trainer(Method::Hpff, 4);
        let r = train_step_hilo(&t, &toy_batch(0, 8), 0.05).unwrap();
        assert_eq!(r.losses.independent.len(), 3);
        assert_eq!(r.losses.cascade.len(), 2);
        assert!(r.losses.all().all(f64::is_finite));
        assert!(r.peak_activation_bytes > 0);
        assert!(t.partition.all_params().iter().all(|p| !p.has_grad()));
    }

    #[test]
    fn wrong_step_function_is_rejected() {
        let t = trainer(Method::Local, 2);
        assert!(train_step_bp(&t, &toy_batch(0, 4), 0.1).is_err());
    }

    #[test]
    fn count_correct_argmax() {
        let l = Tensor::<f64>::new(vec![0.1, 0.9, 0.8, 0.2], [2, 2]).unwrap();
        assert_eq!(count_correct(&l, &[1, 1]), 1);
    }
}
