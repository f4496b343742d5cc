//! Adversarial kernel-inducing-point distillation.
//!
//! Each meta-epoch samples a target batch, perturbs it with PGD against the
//! kernel machine fit on the current support, and takes one optimizer step on
//! the support examples (and optionally labels) using the full meta-gradient
//! evaluated at the perturbed targets. The support snapshot with the best
//! validation robust accuracy is returned.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attacks::{accuracy, fgsm, pgd, AttackConfig, Norm, Scorer};
use crate::data::{sample_balanced, Dataset};
use crate::error::{Error, Result};
use crate::krr::{mean_row_norm, support_grad, KernelMachine, LossKind, MetaBatch, Ridge};
use crate::ntk::KernelSpec;
use crate::seed::{self, example_seed, stream_seed};

/// Extra ridge attempts (each 10× larger) after a failed factorization.
const RIDGE_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent; used to check the outer gradient direction.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    #[serde(default = "default_meta_lr")]
    pub meta_lr: f64,
    pub inner: AttackConfig,
    /// Attack used for validation; defaults to `inner`.
    #[serde(default)]
    pub validation: Option<AttackConfig>,
    #[serde(default = "default_outer_loss")]
    pub outer_loss: LossKind,
    #[serde(default = "default_true")]
    pub optimize_labels: bool,
    /// Targets per epoch; defaults to 10% of the training pool.
    #[serde(default)]
    pub target_batch: Option<usize>,
    pub support_size: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Validation passes without improvement before stopping; `None` never stops early.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

fn default_meta_lr() -> f64 {
    1e-3
}

fn default_outer_loss() -> LossKind {
    LossKind::Ce
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_optimizer() -> Optimizer {
    Optimizer::Adam
}

impl DistillConfig {
    /// Defaults for every optional field.
    pub fn new(epochs: usize, support_size: usize, inner: AttackConfig) -> Self {
        Self {
            epochs,
            meta_lr: default_meta_lr(),
            inner,
            validation: None,
            outer_loss: default_outer_loss(),
            optimize_labels: true,
            target_batch: None,
            support_size,
            eval_every: 1,
            patience: None,
            seed: 0,
            ridge: Ridge::default(),
            optimizer: Optimizer::Adam,
        }
    }

    pub fn validation_attack(&self) -> &AttackConfig {
        self.validation.as_ref().unwrap_or(&self.inner)
    }

    pub fn validate(&self, train: &Dataset) -> Result<()> {
        self.inner.validate()?;
        self.validation_attack().validate()?;
        self.outer_loss.validate(train.class_count())?;
        self.inner.loss.validate(train.class_count())?;
        let k = train.class_count();
        if self.support_size < k || self.support_size % k != 0 {
            return Err(Error::config(format!(
                "support_size {} must be a positive multiple of the class count {k}",
                self.support_size
            )));
        }
        if self.target_batch(train.len()) == 0 || self.target_batch(train.len()) > train.len() {
            return Err(Error::config(
                "target_batch must lie in 1..=training pool size",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::config("meta_lr must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn target_batch(&self, pool: usize) -> usize {
        self.target_batch.unwrap_or((pool / 10).max(1))
    }
}

/// Adam moments for the support examples and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_x: Array2<f64>,
    pub v_x: Array2<f64>,
    pub m_y: Array2<f64>,
    pub v_y: Array2<f64>,
    pub t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn zeros(x_shape: (usize, usize), y_shape: (usize, usize)) -> Self {
        Self {
            m_x: Array2::zeros(x_shape),
            v_x: Array2::zeros(x_shape),
            m_y: Array2::zeros(y_shape),
            v_y: Array2::zeros(y_shape),
            t: 0,
        }
    }

    fn update(
        m: &mut Array2<f64>,
        v: &mut Array2<f64>,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        t: u64,
    ) {
        let c1 = 1.0 - Self::BETA1.powi(t as i32);
        let c2 = 1.0 - Self::BETA2.powi(t as i32);
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            });
    }
}

/// One validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub clean_acc: f64,
    /// `NaN` when the validation attack is not ℓ∞.
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    /// Mean per-example input-gradient norm on clean validation points.
    pub grad_norm: f64,
}

/// Mutable meta-optimization state.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub support: Dataset,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<HistoryRecord>,
    /// Ridge actually used at the last fit (after retries).
    pub ridge: Ridge,
}

/// Result of one meta-step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub outer_loss: f64,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

/// Fits with up to three 10× ridge escalations on conditioning failures.
pub fn fit_with_retries(
    spec: &KernelSpec,
    support: &Dataset,
    ridge: Ridge,
) -> Result<(KernelMachine, Ridge)> {
    let mut r = ridge;
    let mut last = None;
    for _ in 0..=RIDGE_RETRIES {
        match KernelMachine::fit(spec, support, r) {
            Ok(km) => return Ok((km, r)),
            Err(e @ Error::Conditioning { .. }) => {
                last = Some(e);
                r = r.scaled(10.0);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

impl DistillState {
    /// Balanced one-hot initialization drawn from `train`.
    pub fn init(train: &Dataset, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate(train)?;
        let per_class = cfg.support_size / train.class_count();
        let support = sample_balanced(train, per_class, stream_seed(cfg.seed, "init"))?
            .renamed(format!("{}-distilled", train.name()));
        Ok(Self::from_support(support, cfg))
    }

    pub fn from_support(support: Dataset, cfg: &DistillConfig) -> Self {
        let adam = AdamState::zeros(support.examples().dim(), support.labels().dim());
        Self {
            support,
            adam,
            epoch: 0,
            history: Vec::new(),
            ridge: cfg.ridge,
        }
    }

    /// Targets of meta-epoch `epoch` (sampled without replacement).
    pub fn sample_targets(train: &Dataset, cfg: &DistillConfig, epoch: usize) -> Result<Dataset> {
        let stream = stream_seed(cfg.seed, "targets");
        let mut rng = seed::rng(example_seed(stream, epoch));
        let count = cfg.target_batch(train.len());
        let mut idx = sample(&mut rng, train.len(), count).into_vec();
        idx.sort_unstable();
        train.select(&idx, "targets")
    }

    /// One outer step on the given (clean) targets.
    pub fn step_on(
        &mut self,
        spec: &KernelSpec,
        targets: &Dataset,
        cfg: &DistillConfig,
    ) -> Result<StepReport> {
        let (km, ridge) = fit_with_retries(spec, &self.support, self.ridge)?;
        self.ridge = ridge;
        let stream = stream_seed(cfg.seed, "inner");
        let inner = cfg
            .inner
            .clone()
            .with_seed(example_seed(stream, self.epoch));
        let perturbed = if inner.steps == 0 {
            targets.examples().clone()
        } else {
            pgd(
                &km,
                targets.examples().view(),
                targets.labels().view(),
                &inner,
            )?
        };
        let batch = MetaBatch {
            examples: perturbed.view(),
            clean: Some(targets.examples().view()),
            labels: targets.labels().view(),
        };
        let g = support_grad(
            spec,
            self.support.examples().view(),
            self.support.labels().view(),
            ridge,
            &cfg.outer_loss,
            batch,
        )?;
        if !g.loss.is_finite()
            || g.examples
                .iter()
                .chain(g.labels.iter())
                .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("meta-gradient"));
        }
        self.apply(&g.examples, &g.labels, cfg)?;
        Ok(StepReport {
            outer_loss: g.loss,
            grad_x: g.examples,
            grad_y: g.labels,
        })
    }

    /// Samples targets for the next epoch and steps.
    pub fn step(
        &mut self,
        spec: &KernelSpec,
        train: &Dataset,
        cfg: &DistillConfig,
    ) -> Result<StepReport> {
        let targets = Self::sample_targets(train, cfg, self.epoch + 1)?;
        self.step_on(spec, &targets, cfg)
    }

    fn apply(
        &mut self,
        grad_x: &Array2<f64>,
        grad_y: &Array2<f64>,
        cfg: &DistillConfig,
    ) -> Result<()> {
        self.epoch += 1;
        let (bounds, labels_free) = (self.support.bounds(), self.support.labels_free());
        let name = self.support.name().to_string();
        let (mut x, mut y) = self.support.clone().into_parts();
        match cfg.optimizer {
            Optimizer::Adam => {
                self.adam.t += 1;
                let t = self.adam.t;
                AdamState::update(
                    &mut self.adam.m_x,
                    &mut self.adam.v_x,
                    &mut x,
                    grad_x,
                    cfg.meta_lr,
                    t,
                );
                if cfg.optimize_labels {
                    AdamState::update(
                        &mut self.adam.m_y,
                        &mut self.adam.v_y,
                        &mut y,
                        grad_y,
                        cfg.meta_lr,
                        t,
                    );
                }
            }
            Optimizer::Sgd => {
                x.scaled_add(-cfg.meta_lr, grad_x);
                if cfg.optimize_labels {
                    y.scaled_add(-cfg.meta_lr, grad_y);
                }
            }
        }
        x.mapv_inplace(|v| v.clamp(bounds.0, bounds.1));
        let free = labels_free || (cfg.optimize_labels && cfg.meta_lr > 0.0);
        self.support = Dataset::new(x, y, bounds, free, name)?;
        Ok(())
    }

    /// Validation metrics of the current support.
    pub fn evaluate(
        &self,
        spec: &KernelSpec,
        val: &Dataset,
        cfg: &DistillConfig,
    ) -> Result<HistoryRecord> {
        let (km, _) = fit_with_retries(spec, &self.support, self.ridge)?;
        evaluate_machine(&km, val, cfg.validation_attack(), self.epoch)
    }
}

/// Clean, FGSM and PGD accuracy plus the clean input-gradient norm.
pub fn evaluate_machine(
    km: &KernelMachine,
    val: &Dataset,
    attack: &AttackConfig,
    epoch: usize,
) -> Result<HistoryRecord> {
    let x = val.examples().view();
    let y = val.labels().view();
    let clean_acc = accuracy(km.scores(x)?.view(), y);
    let fgsm_acc = if attack.norm == Norm::Linf {
        let adv = fgsm(km, x, y, attack)?;
        accuracy(km.scores(adv.view())?.view(), y)
    } else {
        f64::NAN
    };
    let pgd_acc = if attack.steps == 0 {
        clean_acc
    } else {
        let adv = pgd(km, x, y, attack)?;
        accuracy(km.scores(adv.view())?.view(), y)
    };
    let grads = km.input_gradients(x, y, &attack.loss)?;
    Ok(HistoryRecord {
        epoch,
        clean_acc,
        fgsm_acc,
        pgd_acc,
        grad_norm: mean_row_norm(&grads),
    })
}

/// Output of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Support snapshot with the best validation robust accuracy.
    pub dataset: Dataset,
    pub best_epoch: usize,
    pub history: Vec<HistoryRecord>,
    pub epochs_run: usize,
    /// Ridge in effect at the end of the run.
    pub ridge: Ridge,
}

/// Runs the full meta-optimization with validation-driven early stopping.
pub fn distill(
    train: &Dataset,
    val: &Dataset,
    spec: &KernelSpec,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    distill_observed(train, val, spec, cfg, &mut |_| {})
}

/// As [`distill`], calling `observe` after every validation pass.
pub fn distill_observed(
    train: &Dataset,
    val: &Dataset,
    spec: &KernelSpec,
    cfg: &DistillConfig,
    observe: &mut dyn FnMut(&HistoryRecord),
) -> Result<DistillOutcome> {
    spec.validate()?;
    if val.dim() != train.dim() || val.class_count() != train.class_count() {
        return Err(Error::dims(
            "validation set does not match the training pool",
        ));
    }
    let mut state = DistillState::init(train, cfg)?;
    let first = state.evaluate(spec, val, cfg)?;
    observe(&first);
    state.history.push(first.clone());
    let mut best = (first.pgd_acc, 0usize, state.support.clone());
    let mut stale = 0usize;
    for _ in 0..cfg.epochs {
        state.step(spec, train, cfg)?;
        if state.epoch % cfg.eval_every != 0 {
            continue;
        }
        let rec = state.evaluate(spec, val, cfg)?;
        observe(&rec);
        state.history.push(rec.clone());
        if rec.pgd_acc > best.0 {
            best = (rec.pgd_acc, state.epoch, state.support.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(DistillOutcome {
        dataset: best.2,
        best_epoch: best.1,
        epochs_run: state.epoch,
        history: state.history,
        ridge: state.ridge,
    })
}

/// Clean KIP: the same loop with the inner attack disabled. Validation still
/// uses the configured attack.
pub fn kip_baseline(
    train: &Dataset,
    val: &Dataset,
    spec: &KernelSpec,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    distill(train, val, spec, &kip_config(cfg))
}

/// `cfg` with zero inner steps and the original attack kept for validation.
pub fn kip_config(cfg: &DistillConfig) -> DistillConfig {
    let mut c = cfg.clone();
    c.validation = Some(cfg.validation_attack().clone());
    c.inner.steps = 0;
    c
}

/// `(epoch, mean ‖∇ₓL‖₂)` per validation pass.
pub fn grad_norm_trace(history: &[HistoryRecord]) -> Vec<(usize, f64)> {
    history.iter().map(|r| (r.epoch, r.grad_norm)).collect()
}

pub const HISTORY_HEADER: &str = "epoch,clean_acc,fgsm_acc,pgd_acc,grad_norm";

pub fn write_history_csv(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.clean_acc, r.fgsm_acc, r.pgd_acc, r.grad_norm
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format("history CSV header mismatch"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format(format!("bad history row: {l}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::format(format!("{s}: {e}")))
            };
            Ok(HistoryRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|e| Error::format(format!("{}: {e}", f[0])))?,
                clean_acc: num(f[1])?,
                fgsm_acc: num(f[2])?,
                pgd_acc: num(f[3])?,
                grad_norm: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussians;
    use ndarray::array;

    fn small_cfg() -> DistillConfig {
        let mut cfg = DistillConfig::new(3, 4, AttackConfig::linf(0.1, 0.05, 2));
        cfg.target_batch = Some(6);
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let train = synth_gaussians(10, 2, 4, 0.6, 1).unwrap();
        let val = synth_gaussians(5, 2, 4, 0.6, 2).unwrap();
        let mut cfg = small_cfg();
        cfg.meta_lr = 0.0;
        let spec = KernelSpec::fc(2);
        let out = distill(&train, &val, &spec, &cfg).unwrap();
        let init = DistillState::init(&train, &cfg).unwrap();
        assert_eq!(out.dataset.examples(), init.support.examples());
        assert_eq!(out.dataset.labels(), init.support.labels());
        let trace = grad_norm_trace(&out.history);
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|&(_, g)| g == trace[0].1));
    }

    #[test]
    fn frozen_labels_stay_bitwise() {
        let train = synth_gaussians(10, 2, 4, 0.6, 1).unwrap();
        let mut cfg = small_cfg();
        cfg.optimize_labels = false;
        let spec = KernelSpec::fc(3);
        let mut state = DistillState::init(&train, &cfg).unwrap();
        let labels = state.support.labels().clone();
        for _ in 0..3 {
            state.step(&spec, &train, &cfg).unwrap();
            assert_eq!(state.support.labels(), &labels);
            assert!(state
                .support
                .examples()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(state.adam.t, 3);
    }

    #[test]
    fn single_adam_step_by_hand() {
        let support = Dataset::from_class_indices(
            array![[0.2, 0.5, 0.7], [0.8, 0.4, 0.1]],
            &[0, 1],
            2,
            (0.0, 1.0),
            "s",
        )
        .unwrap();
        let target =
            Dataset::from_class_indices(array![[0.4, 0.6, 0.3]], &[1], 2, (0.0, 1.0), "t").unwrap();
        let mut cfg = DistillConfig::new(1, 2, AttackConfig::linf(0.1, 0.1, 0));
        cfg.outer_loss = LossKind::Mse;
        cfg.ridge = Ridge::Fixed(0.0);
        let spec = KernelSpec::fc(2);
        let mut state = DistillState::from_support(support.clone(), &cfg);
        let rep = state.step_on(&spec, &target, &cfg).unwrap();
        // first Adam step: m̂ = g, v̂ = g², update = -lr g/(|g| + eps)
        for (new, (old, g)) in state
            .support
            .labels()
            .iter()
            .zip(support.labels().iter().zip(rep.grad_y.iter()))
        {
            let expected = old - 1e-3 * g / (g.abs() + AdamState::EPS);
            assert!((new - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let h = vec![HistoryRecord {
            epoch: 3,
            clean_acc: 0.5,
            fgsm_acc: f64::NAN,
            pgd_acc: 0.125,
            grad_norm: 1.0 / 3.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(&h, &p).unwrap();
        let back = read_history_csv(&p).unwrap();
        assert_eq!(back[0].epoch, 3);
        assert!(back[0].fgsm_acc.is_nan());
        assert_eq!(back[0].grad_norm, 1.0 / 3.0);
    }
}
