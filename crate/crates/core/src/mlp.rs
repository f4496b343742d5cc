//! Finite-width fully connected ReLU networks with exact backpropagation.
//!
//! Two parameterizations are supported. `Standard` draws `W ~ N(0, 2/fan_in)`
//! (He) and uses the weights directly. `Ntk` draws `W ~ N(0, 1)` and scales
//! each layer's product by `√(σ²/fan_in)` with `σ² = 1` on the input layer and
//! `σ² = 2` after a ReLU, and biases by `√β²`; at infinite width its tangent
//! kernel is the closed form in [`crate::ntk`].

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{accuracy, pgd, Attack, AttackConfig, Scorer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::krr::{loss, loss_rows, LossKind};
use crate::seed::{self, example_seed, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    #[default]
    Standard,
    Ntk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MlpOptimizer {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl MlpOptimizer {
    pub fn lr(&self) -> f64 {
        match *self {
            MlpOptimizer::Sgd { lr } | MlpOptimizer::Adam { lr } => lr,
        }
    }

    pub fn with_lr(&self, lr: f64) -> Self {
        match self {
            MlpOptimizer::Sgd { .. } => MlpOptimizer::Sgd { lr },
            MlpOptimizer::Adam { .. } => MlpOptimizer::Adam { lr },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// `β²` of the NTK parameterization (ignored by `Standard`).
    #[serde(default)]
    pub bias_variance: f64,
    pub optimizer: MlpOptimizer,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Attack whose validation accuracy selects the returned snapshot;
    /// `None` selects by clean validation accuracy.
    #[serde(default)]
    pub selection: Option<AttackConfig>,
    #[serde(default = "default_one")]
    pub eval_every: usize,
}

fn default_loss() -> LossKind {
    LossKind::Ce
}

fn default_one() -> usize {
    1
}

impl MlpConfig {
    pub fn new(
        hidden: Vec<usize>,
        optimizer: MlpOptimizer,
        batch_size: usize,
        epochs: usize,
    ) -> Self {
        Self {
            hidden,
            parameterization: Parameterization::Standard,
            bias_variance: 0.0,
            optimizer,
            batch_size,
            epochs,
            seed: 0,
            loss: LossKind::Ce,
            selection: None,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be >= 1"));
        }
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if !(self.bias_variance >= 0.0 && self.bias_variance.is_finite()) {
            return Err(Error::config("bias_variance must be finite and >= 0"));
        }
        Ok(())
    }

    fn widths(&self, d: usize, k: usize) -> Vec<usize> {
        let mut w = vec![d];
        w.extend(&self.hidden);
        w.push(k);
        w
    }
}

/// Weights (`fan_out × fan_in`) and biases per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub parameterization: Parameterization,
    pub bias_variance: f64,
    pub seed: u64,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

struct Forward {
    /// Layer inputs: `acts[0] = x`, `acts[l]` = ReLU output feeding layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl MlpParams {
    /// Random initialization under `parameterization`.
    pub fn init(
        widths: &[usize],
        parameterization: Parameterization,
        bias_variance: f64,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(
                "need at least input and output widths, all >= 1",
            ));
        }
        let mut rng = seed::rng(stream_seed(seed, "mlp-init"));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = match parameterization {
                Parameterization::Standard => (2.0 / fan_in as f64).sqrt(),
                Parameterization::Ntk => 1.0,
            };
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            }));
            biases.push(match parameterization {
                Parameterization::Standard => Array1::zeros(fan_out),
                Parameterization::Ntk => {
                    Array1::from_shape_fn(fan_out, |_| StandardNormal.sample(&mut rng))
                }
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            parameterization,
            bias_variance,
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// `(weight multiplier, bias multiplier)` of layer `l`.
    fn multipliers(&self, l: usize) -> (f64, f64) {
        match self.parameterization {
            Parameterization::Standard => (1.0, 1.0),
            Parameterization::Ntk => {
                let sigma2 = if l == 0 { 1.0 } else { 2.0 };
                (
                    (sigma2 / self.widths[l] as f64).sqrt(),
                    self.bias_variance.sqrt(),
                )
            }
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.widths[0] {
            return Err(Error::dims(format!(
                "input has {} columns, network {}",
                x.ncols(),
                self.widths[0]
            )));
        }
        let mut acts = vec![x.to_owned()];
        let mut pre = Vec::new();
        let last = self.depth() - 1;
        for l in 0..self.depth() {
            let (mw, mb) = self.multipliers(l);
            let mut z = acts[l].dot(&self.weights[l].t());
            if mw != 1.0 {
                z *= mw;
            }
            z += &(&self.biases[l] * mb);
            if l == last {
                return Ok(Forward { acts, pre, out: z });
            }
            acts.push(z.mapv(|v| v.max(0.0)));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.out)
    }

    /// Backpropagates the score adjoint `g`; returns parameter and input gradients.
    fn backward(&self, f: &Forward, g: Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let depth = self.depth();
        let mut gw = vec![Array2::zeros((0, 0)); depth];
        let mut gb = vec![Array1::zeros(0); depth];
        let mut delta = g;
        for l in (0..depth).rev() {
            let (mw, mb) = self.multipliers(l);
            gw[l] = delta.t().dot(&f.acts[l]) * mw;
            gb[l] = delta.sum_axis(Axis(0)) * mb;
            let mut back = delta.dot(&self.weights[l]);
            if mw != 1.0 {
                back *= mw;
            }
            if l > 0 {
                ndarray::Zip::from(&mut back)
                    .and(&f.pre[l - 1])
                    .for_each(|b, &z| {
                        if z <= 0.0 {
                            *b = 0.0;
                        }
                    });
            }
            delta = back;
        }
        (
            MlpGrads {
                weights: gw,
                biases: gb,
            },
            delta,
        )
    }

    /// Mean loss over the batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        kind: &LossKind,
    ) -> Result<(f64, MlpGrads)> {
        let f = self.forward(x)?;
        let e = loss(kind, f.out.view(), targets)?;
        let (grads, _) = self.backward(&f, e.grad);
        Ok((e.value, grads))
    }

    /// Per-example input gradients of the row losses.
    pub fn input_grads(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        kind: &LossKind,
    ) -> Result<Array2<f64>> {
        let f = self.forward(x)?;
        let (_, g) = loss_rows(kind, f.out.view(), targets)?;
        Ok(self.backward(&f, g).1)
    }

    /// Parameter gradient of output `index` at a single input, flattened.
    pub fn output_jacobian(&self, x: ArrayView1<'_, f64>, index: usize) -> Result<Array1<f64>> {
        let k = *self.widths.last().expect("non-empty");
        if index >= k {
            return Err(Error::dims(format!(
                "output index {index} out of range for {k} outputs"
            )));
        }
        let xs = x.insert_axis(Axis(0));
        let f = self.forward(xs)?;
        let mut g = Array2::zeros((1, k));
        g[[0, index]] = 1.0;
        let (grads, _) = self.backward(&f, g);
        Ok(grads.flatten())
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        Array1::from(out)
    }
}

impl Scorer for MlpParams {
    fn class_count(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predict(x)
    }

    fn has_gradients(&self) -> bool {
        true
    }

    fn input_gradients(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: &LossKind,
    ) -> Result<Array2<f64>> {
        self.input_grads(x, targets, loss)
    }
}

/// `∇_θ f_c(x) · ∇_θ f_c(x')` at the current parameters.
pub fn empirical_ntk(
    params: &MlpParams,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    index: usize,
) -> Result<f64> {
    let a = params.output_jacobian(x, index)?;
    let b = params.output_jacobian(y, index)?;
    Ok(a.dot(&b))
}

enum OptState {
    Sgd,
    Adam { m: MlpGrads, v: MlpGrads, t: i32 },
}

impl OptState {
    fn new(opt: &MlpOptimizer, params: &MlpParams) -> Self {
        match opt {
            MlpOptimizer::Sgd { .. } => OptState::Sgd,
            MlpOptimizer::Adam { .. } => {
                let zeros = MlpGrads {
                    weights: params
                        .weights
                        .iter()
                        .map(|w| Array2::zeros(w.dim()))
                        .collect(),
                    biases: params
                        .biases
                        .iter()
                        .map(|b| Array1::zeros(b.len()))
                        .collect(),
                };
                OptState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, params: &mut MlpParams, g: &MlpGrads, lr: f64) {
        match self {
            OptState::Sgd => {
                for (w, gw) in params.weights.iter_mut().zip(&g.weights) {
                    w.scaled_add(-lr, gw);
                }
                for (b, gb) in params.biases.iter_mut().zip(&g.biases) {
                    b.scaled_add(-lr, gb);
                }
            }
            OptState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                };
                for l in 0..params.weights.len() {
                    ndarray::Zip::from(&mut params.weights[l])
                        .and(&mut m.weights[l])
                        .and(&mut v.weights[l])
                        .and(&g.weights[l])
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                    ndarray::Zip::from(&mut params.biases[l])
                        .and(&mut m.biases[l])
                        .and(&mut v.biases[l])
                        .and(&g.biases[l])
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                }
            }
        }
    }
}

/// Per-evaluation training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEpoch {
    pub epoch: usize,
    /// Mean minibatch loss of the epoch (`NaN` at epoch 0).
    pub train_loss: f64,
    pub val_clean: f64,
    /// `NaN` without a selection attack.
    pub val_robust: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best selection accuracy.
    pub params: MlpParams,
    pub best_epoch: usize,
    pub history: Vec<MlpEpoch>,
    /// Set when a non-finite loss stopped training.
    pub diverged: bool,
}

fn evaluate(
    params: &MlpParams,
    val: &Dataset,
    selection: Option<&AttackConfig>,
) -> Result<(f64, f64)> {
    let x = val.examples().view();
    let y = val.labels().view();
    let clean = accuracy(params.predict(x)?.view(), y);
    let robust = match selection {
        Some(a) => {
            let adv = pgd(params, x, y, a)?;
            accuracy(params.predict(adv.view())?.view(), y)
        }
        None => f64::NAN,
    };
    Ok((clean, robust))
}

fn run_training(
    cfg: &MlpConfig,
    ds: &Dataset,
    val: &Dataset,
    attack: Option<&AttackConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.loss.validate(ds.class_count())?;
    if val.dim() != ds.dim() || val.class_count() != ds.class_count() {
        return Err(Error::dims(
            "validation set does not match the training set",
        ));
    }
    let widths = cfg.widths(ds.dim(), ds.class_count());
    let mut params = MlpParams::init(&widths, cfg.parameterization, cfg.bias_variance, cfg.seed)?;
    let mut opt = OptState::new(&cfg.optimizer, &params);
    let lr = cfg.optimizer.lr();
    let selection = cfg.selection.as_ref();
    let score = |c: f64, r: f64| if selection.is_some() { r } else { c };

    let (c0, r0) = evaluate(&params, val, selection)?;
    let mut history = vec![MlpEpoch {
        epoch: 0,
        train_loss: f64::NAN,
        val_clean: c0,
        val_robust: r0,
    }];
    let mut best = (score(c0, r0), 0usize, params.clone());
    let shuffle_stream = stream_seed(cfg.seed, "mlp-shuffle");
    let attack_stream = stream_seed(cfg.seed, "mlp-adv");
    let n = ds.len();
    let mut diverged = false;
    let mut global_step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(example_seed(shuffle_stream, epoch)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = ds.examples().select(Axis(0), chunk);
            let yb = ds.labels().select(Axis(0), chunk);
            let xb = match attack {
                Some(a) => {
                    let a = a
                        .clone()
                        .with_seed(example_seed(attack_stream, global_step));
                    pgd(&params, xb.view(), yb.view(), &a)?
                }
                None => xb,
            };
            global_step += 1;
            let (value, grads) = params.loss_and_grads(xb.view(), yb.view(), &cfg.loss)?;
            if !value.is_finite() {
                diverged = true;
                break 'epochs;
            }
            opt.step(&mut params, &grads, lr);
            if !params.all_finite() {
                diverged = true;
                break 'epochs;
            }
            total += value;
            batches += 1;
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let (c, r) = evaluate(&params, val, selection)?;
        history.push(MlpEpoch {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_clean: c,
            val_robust: r,
        });
        if score(c, r) > best.0 {
            best = (score(c, r), epoch, params.clone());
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        history,
        diverged,
    })
}

/// Minibatch training; returns the best validation snapshot.
pub fn train(cfg: &MlpConfig, ds: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    run_training(cfg, ds, val, None)
}

/// Adversarial training: every minibatch is replaced by its PGD perturbation.
pub fn adv_train(
    cfg: &MlpConfig,
    ds: &Dataset,
    val: &Dataset,
    attack: &AttackConfig,
) -> Result<TrainOutcome> {
    attack.validate()?;
    run_training(cfg, ds, val, Some(attack))
}

/// Learning rates tried by [`transfer_eval`].
pub const TRANSFER_LR_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub lr: f64,
    pub params: MlpParams,
    pub history: Vec<MlpEpoch>,
    /// `(attack name, test accuracy)` in request order.
    pub accuracies: Vec<(String, f64)>,
}

/// Trains on `distilled` for each learning rate in the grid, keeps the best
/// validation run, and evaluates it on `test` under each attack.
pub fn transfer_eval(
    distilled: &Dataset,
    cfg: &MlpConfig,
    val: &Dataset,
    test: &Dataset,
    attacks: &[Attack],
) -> Result<TransferReport> {
    let mut best: Option<(f64, f64, TrainOutcome)> = None;
    for lr in TRANSFER_LR_GRID {
        let c = MlpConfig {
            optimizer: cfg.optimizer.with_lr(lr),
            ..cfg.clone()
        };
        let out = train(&c, distilled, val)?;
        let rec = &out.history[out
            .history
            .iter()
            .position(|h| h.epoch == out.best_epoch)
            .unwrap_or(0)];
        let score = if cfg.selection.is_some() {
            rec.val_robust
        } else {
            rec.val_clean
        };
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, lr, out));
        }
    }
    let (_, lr, out) = best.expect("grid is non-empty");
    let mut accuracies = Vec::new();
    for a in attacks {
        accuracies.push((
            a.name(),
            crate::attacks::robust_accuracy(&out.params, test, a)?,
        ));
    }
    Ok(TransferReport {
        lr,
        params: out.params,
        history: out.history,
        accuracies,
    })
}

const RKMP_MAGIC: &[u8; 4] = b"RKMP";
const RKMP_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RkmpHeader {
    widths: Vec<usize>,
    seed: u64,
    parameterization: Parameterization,
    bias_variance: f64,
}

/// `magic | version | u32-LE header length | JSON header | per layer: W row-major, then b (f64 LE)`.
pub fn encode_params(p: &MlpParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&RkmpHeader {
        widths: p.widths.clone(),
        seed: p.seed,
        parameterization: p.parameterization,
        bias_variance: p.bias_variance,
    })?;
    let mut out = Vec::with_capacity(9 + header.len() + 8 * p.parameter_count());
    out.extend_from_slice(RKMP_MAGIC);
    out.push(RKMP_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (w, b) in p.weights.iter().zip(&p.biases) {
        for v in w.iter().chain(b.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<MlpParams> {
    if bytes.len() < 9 || &bytes[..4] != RKMP_MAGIC {
        return Err(Error::format("missing RKMP magic"));
    }
    if bytes[4] != RKMP_VERSION {
        return Err(Error::UnsupportedVersion {
            found: bytes[4],
            expected: RKMP_VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(9..9 + len)
        .ok_or_else(|| Error::format("truncated RKMP header"))?;
    let h: RkmpHeader = serde_json::from_slice(body)?;
    if h.widths.len() < 2 || h.widths.contains(&0) {
        return Err(Error::format("invalid RKMP widths"));
    }
    let payload = &bytes[9 + len..];
    let expected: usize = h.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if payload.len() != expected * 8 {
        return Err(Error::format(format!(
            "RKMP payload has {} bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in h.widths.windows(2) {
        let w: Vec<f64> = vals.by_ref().take(pair[0] * pair[1]).collect();
        weights.push(Array2::from_shape_vec((pair[1], pair[0]), w).expect("sized above"));
        biases.push(vals.by_ref().take(pair[1]).collect());
    }
    Ok(MlpParams {
        widths: h.widths,
        weights,
        biases,
        parameterization: h.parameterization,
        bias_variance: h.bias_variance,
        seed: h.seed,
    })
}

pub fn save_params(p: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_params(p)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

/// Accuracy of `params` on the first `limit` rows of `ds` (all rows when `None`).
pub fn clean_accuracy(params: &MlpParams, ds: &Dataset, limit: Option<usize>) -> Result<f64> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let x = ds.examples().slice(s![..n, ..]);
    let y = ds.labels().slice(s![..n, ..]);
    Ok(accuracy(params.predict(x)?.view(), y))
}
