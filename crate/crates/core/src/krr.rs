//! Kernel ridge regression on the NTK, classification losses on its scores,
//! and exact gradients with respect to query inputs and to the support set.
//!
//! The support-set gradient differentiates through the Cholesky solve: with
//! `A = K_SS + λI`, `B = A⁻¹Y_S` and scores `F = K_TS B`, an upstream score
//! adjoint `G` yields
//!
//! ```text
//! Ȳ_S  = A⁻¹ K_TSᵀ G
//! Ā    = -Ȳ_S Bᵀ            (symmetrized, A is symmetric)
//! K̄_TS = G Bᵀ
//! ```
//!
//! and `Ā`, `K̄_TS` are pulled back to the support rows through the kernel.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::attacks::{Patch, ScoreSession, Scorer};
use crate::data::{argmax_rows, Dataset};
use crate::error::{Error, Result};
use crate::ntk::{
    ntk_block, ntk_block_with_grad, ntk_from_inner, ntk_self_block, ntk_self_block_with_grad,
    KernelSpec,
};

/// Denominator floor of the DLR loss.
const DLR_FLOOR: f64 = 1e-12;

/// Ridge added to the support Gram matrix before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Ridge {
    /// Absolute `λ`.
    Fixed(f64),
    /// `λ = c · mean(diag K_SS)`; scale-aware jitter.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            Ridge::Fixed(v) | Ridge::Relative(v) => v,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "ridge must be finite and >= 0, got {v}"
            )))
        }
    }

    fn resolve(&self, gram: &Array2<f64>) -> f64 {
        match *self {
            Ridge::Fixed(v) => v,
            Ridge::Relative(c) => c * gram.diag().mean().unwrap_or(0.0),
        }
    }

    /// Multiplies the ridge by `factor` (used when retrying a failed factorization).
    pub fn scaled(&self, factor: f64) -> Ridge {
        match *self {
            Ridge::Fixed(v) => Ridge::Fixed(if v == 0.0 { 1e-10 * factor } else { v * factor }),
            Ridge::Relative(c) => {
                Ridge::Relative(if c == 0.0 { 1e-10 * factor } else { c * factor })
            }
        }
    }
}

/// Classification losses on score matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    /// Squared error summed over classes.
    Mse,
    /// Softmax cross entropy (targets may be soft).
    Ce,
    /// Difference of logits ratio; needs at least three classes.
    Dlr,
    /// `base(clean) + λ · KL(softmax(clean) ‖ softmax(perturbed))`.
    Trades { lambda: f64, base: Box<LossKind> },
}

impl LossKind {
    pub fn trades(lambda: f64, base: LossKind) -> Self {
        LossKind::Trades {
            lambda,
            base: Box::new(base),
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        match self {
            LossKind::Dlr if class_count < 3 => Err(Error::Unsupported(format!(
                "DLR loss needs at least 3 classes, got {class_count}"
            ))),
            LossKind::Trades { lambda, base } => {
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return Err(Error::config("TRADES lambda must be finite and >= 0"));
                }
                if matches!(**base, LossKind::Trades { .. }) {
                    return Err(Error::config("TRADES base loss cannot itself be TRADES"));
                }
                base.validate(class_count)
            }
            _ => Ok(()),
        }
    }
}

/// Mean loss and its gradient with respect to the scores.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Mean paired loss and gradients with respect to clean and perturbed scores.
#[derive(Debug, Clone)]
pub struct PairLossEval {
    pub value: f64,
    pub grad_clean: Array2<f64>,
    pub grad_perturbed: Array2<f64>,
}

pub(crate) fn softmax_row(z: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn log_softmax_row(z: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

fn check_shapes(scores: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<()> {
    if scores.dim() != targets.dim() {
        return Err(Error::dims(format!(
            "scores {:?} vs targets {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    Ok(())
}

/// Per-row loss values and per-row score gradients `∂ℓᵢ/∂zᵢ` (not averaged).
pub fn loss_rows(
    kind: &LossKind,
    scores: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    pair_rows(kind, scores, scores, targets).map(|(v, gc, gp)| (v, gc + gp))
}

/// Per-row paired losses: clean scores enter only through TRADES.
fn pair_rows(
    kind: &LossKind,
    clean: ArrayView2<'_, f64>,
    perturbed: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    check_shapes(perturbed, targets)?;
    check_shapes(clean, targets)?;
    kind.validate(targets.ncols())?;
    let (m, k) = perturbed.dim();
    let mut values = Array1::zeros(m);
    let mut grad_clean = Array2::zeros((m, k));
    let mut grad_pert = Array2::zeros((m, k));
    match kind {
        LossKind::Mse => {
            for i in 0..m {
                let diff = &perturbed.row(i) - &targets.row(i);
                values[i] = diff.dot(&diff);
                grad_pert.row_mut(i).assign(&(diff * 2.0));
            }
        }
        LossKind::Ce => {
            for i in 0..m {
                let z = perturbed.row(i);
                let y = targets.row(i);
                let logp = log_softmax_row(z);
                values[i] = -y.dot(&logp);
                let mass = y.sum();
                let p = logp.mapv(f64::exp);
                grad_pert.row_mut(i).assign(&(p * mass - &y));
            }
        }
        LossKind::Dlr => {
            let labels = argmax_rows(targets);
            for i in 0..m {
                let z = perturbed.row(i);
                let y = labels[i];
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
                let other = order.iter().copied().find(|&j| j != y).expect("k >= 3");
                let margin = z[y] - z[other];
                let (top, third) = (order[0], order[2]);
                let raw = z[top] - z[third];
                let den = raw.max(DLR_FLOOR);
                values[i] = -margin / den;
                let mut g = grad_pert.row_mut(i);
                g[y] -= 1.0 / den;
                g[other] += 1.0 / den;
                if raw > DLR_FLOOR {
                    g[top] += margin / (den * den);
                    g[third] -= margin / (den * den);
                }
            }
        }
        LossKind::Trades { lambda, base } => {
            let (base_vals, base_gc, base_gp) = pair_rows(base, clean, clean, targets)?;
            values += &base_vals;
            grad_clean += &(base_gc + base_gp);
            for i in 0..m {
                let lc = log_softmax_row(clean.row(i));
                let lp = log_softmax_row(perturbed.row(i));
                let pc = lc.mapv(f64::exp);
                let pp = lp.mapv(f64::exp);
                let u = &lc - &lp;
                values[i] += lambda * pc.dot(&u);
                let mean_u = pc.dot(&u);
                let gc = &pc * &(u - mean_u);
                grad_clean.row_mut(i).scaled_add(*lambda, &gc);
                grad_pert.row_mut(i).scaled_add(*lambda, &(pp - &pc));
            }
        }
    }
    Ok((values, grad_clean, grad_pert))
}

/// Mean loss over rows and its gradient with respect to `scores`.
pub fn loss(
    kind: &LossKind,
    scores: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<LossEval> {
    let (values, grad) = loss_rows(kind, scores, targets)?;
    let m = values.len().max(1) as f64;
    Ok(LossEval {
        value: values.sum() / m,
        grad: grad / m,
    })
}

/// Mean paired loss; for kinds other than TRADES only `perturbed` matters.
pub fn loss_pair(
    kind: &LossKind,
    clean: ArrayView2<'_, f64>,
    perturbed: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<PairLossEval> {
    let (values, gc, gp) = pair_rows(kind, clean, perturbed, targets)?;
    let m = values.len().max(1) as f64;
    Ok(PairLossEval {
        value: values.sum() / m,
        grad_clean: gc / m,
        grad_perturbed: gp / m,
    })
}

pub(crate) mod linalg {
    use ndarray::{Array2, ArrayView2};

    /// Lower Cholesky factor, or `(index, pivot)` of the first non-positive pivot.
    pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, (usize, f64)> {
        let n = a.nrows();
        let max_diag = a.diag().iter().cloned().fold(0.0_f64, f64::max);
        let tol = 10.0 * n as f64 * f64::EPSILON * max_diag;
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let d = {
                let row_j = l.row(j);
                let lj = row_j.as_slice().expect("standard layout");
                a[[j, j]] - lj[..j].iter().map(|v| v * v).sum::<f64>()
            };
            if !(d > tol) {
                return Err((j, d));
            }
            let pivot = d.sqrt();
            l[[j, j]] = pivot;
            for i in j + 1..n {
                let s = {
                    let li = l.row(i);
                    let lj = l.row(j);
                    let li = li.as_slice().expect("standard layout");
                    let lj = lj.as_slice().expect("standard layout");
                    li[..j]
                        .iter()
                        .zip(&lj[..j])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                };
                l[[i, j]] = (a[[i, j]] - s) / pivot;
            }
        }
        Ok(l)
    }

    /// Solves `L Lᵀ X = B`.
    pub fn cho_solve(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = l.nrows();
        let k = b.ncols();
        let mut x = b.to_owned();
        // forward: L y = b
        for i in 0..n {
            for c in 0..k {
                let mut s = x[[i, c]];
                for j in 0..i {
                    s -= l[[i, j]] * x[[j, c]];
                }
                x[[i, c]] = s / l[[i, i]];
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for c in 0..k {
                let mut s = x[[i, c]];
                for j in i + 1..n {
                    s -= l[[j, i]] * x[[j, c]];
                }
                x[[i, c]] = s / l[[i, i]];
            }
        }
        x
    }
}

fn factorize(gram: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let mut a = gram.clone();
    a.diag_mut().mapv_inplace(|v| v + ridge);
    linalg::cholesky(&a).map_err(|(index, pivot)| Error::Conditioning {
        pivot,
        index,
        ridge,
    })
}

/// Kernel regressor fit to a support set.
#[derive(Debug, Clone)]
pub struct KernelMachine {
    spec: KernelSpec,
    support: Dataset,
    factor: Array2<f64>,
    coefficients: Array2<f64>,
    ridge: f64,
}

impl KernelMachine {
    /// Factorizes `K_SS + λI` and solves for `α = (K_SS + λI)⁻¹ Y_S`.
    pub fn fit(spec: &KernelSpec, support: &Dataset, ridge: Ridge) -> Result<Self> {
        ridge.validate()?;
        let gram = ntk_self_block(spec, support.examples().view())?.ntk;
        let lambda = ridge.resolve(&gram);
        let factor = factorize(&gram, lambda)?;
        let coefficients = linalg::cho_solve(&factor, support.labels().view());
        Ok(Self {
            spec: *spec,
            support: support.clone(),
            factor,
            coefficients,
            ridge: lambda,
        })
    }

    /// `K(X_q, X_S) α`.
    pub fn predict(&self, queries: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if queries.ncols() != self.support.dim() {
            return Err(Error::dims(format!(
                "queries have {} columns, support {}",
                queries.ncols(),
                self.support.dim()
            )));
        }
        if queries.nrows() == 0 {
            return Ok(Array2::zeros((0, self.support.class_count())));
        }
        let k = ntk_block(&self.spec, queries, self.support.examples().view())?.ntk;
        Ok(k.dot(&self.coefficients))
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn support(&self) -> &Dataset {
        &self.support
    }

    /// Lower-triangular Cholesky factor of `K_SS + λI`.
    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        &self.coefficients
    }

    /// The resolved ridge `λ`.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Per-row loss gradients with respect to the queries; `α` is held fixed.
    fn query_gradients(
        &self,
        kind: &LossKind,
        queries: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        per_row: bool,
    ) -> Result<Array2<f64>> {
        let support = self.support.examples().view();
        let block = ntk_block_with_grad(&self.spec, queries, support)?;
        let scores = block.ntk.dot(&self.coefficients);
        let (_, mut g) = loss_rows(kind, scores.view(), targets)?;
        if !per_row {
            g /= queries.nrows().max(1) as f64;
        }
        let adj = g.dot(&self.coefficients.t());
        block.pullback_first(adj.view(), queries, support)
    }
}

pub fn fit(spec: &KernelSpec, support: &Dataset, ridge: Ridge) -> Result<KernelMachine> {
    KernelMachine::fit(spec, support, ridge)
}

/// Gradient of the mean loss of `predict(queries)` with respect to the queries.
pub fn input_grad(
    km: &KernelMachine,
    kind: &LossKind,
    queries: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    km.query_gradients(kind, queries, targets, false)
}

impl Scorer for KernelMachine {
    fn class_count(&self) -> usize {
        self.support.class_count()
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
        self.query_gradients(loss, x, targets, true)
    }

    fn session<'s>(&'s self, x: Array2<f64>) -> Result<Box<dyn ScoreSession + 's>> {
        KernelSession::new(self, x).map(|s| Box::new(s) as Box<dyn ScoreSession + 's>)
    }
}

/// Caches `X X_Sᵀ` and squared norms so a patch costs `O(|patch| · n_S)`.
struct KernelSession<'a> {
    km: &'a KernelMachine,
    scale: f64,
    x: Array2<f64>,
    cross: Array2<f64>,
    norms: Array1<f64>,
    support_norms: Array1<f64>,
    scores: Array2<f64>,
}

impl<'a> KernelSession<'a> {
    fn new(km: &'a KernelMachine, x: Array2<f64>) -> Result<Self> {
        let scores = km.predict(x.view())?;
        let support = km.support.examples();
        Ok(Self {
            km,
            scale: km.spec.scale_for(support.ncols()),
            cross: x.dot(&support.t()),
            norms: x.rows().into_iter().map(|r| r.dot(&r)).collect(),
            support_norms: support.rows().into_iter().map(|r| r.dot(&r)).collect(),
            scores,
            x,
        })
    }

    fn patched(&self, patch: &Patch) -> (Array1<f64>, f64) {
        let support = self.km.support.examples();
        let row = self.x.row(patch.row);
        let mut cross = self.cross.row(patch.row).to_owned();
        let mut norm = self.norms[patch.row];
        for (&j, &v) in patch.cols.iter().zip(&patch.values) {
            let delta = v - row[j];
            if delta != 0.0 {
                cross.scaled_add(delta, &support.column(j));
                norm += v * v - row[j] * row[j];
            }
        }
        (cross, norm)
    }

    fn row_scores(&self, cross: &Array1<f64>, norm: f64) -> Array1<f64> {
        let spec = &self.km.spec;
        let k: Array1<f64> = cross
            .iter()
            .zip(&self.support_norms)
            .map(|(&c, &r)| ntk_from_inner(spec, self.scale, c, norm, r))
            .collect();
        k.dot(&self.km.coefficients)
    }
}

impl ScoreSession for KernelSession<'_> {
    fn current(&self) -> &Array2<f64> {
        &self.x
    }

    fn current_scores(&self) -> &Array2<f64> {
        &self.scores
    }

    fn evaluate(&self, patches: &[Patch]) -> Result<Array2<f64>> {
        let rows: Vec<Array1<f64>> = patches
            .par_iter()
            .map(|p| {
                let (cross, norm) = self.patched(p);
                self.row_scores(&cross, norm)
            })
            .collect();
        let mut out = Array2::zeros((patches.len(), self.km.support.class_count()));
        for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&r);
        }
        Ok(out)
    }

    fn commit(&mut self, patch: &Patch, scores: ndarray::ArrayView1<'_, f64>) {
        let (cross, norm) = self.patched(patch);
        self.cross.row_mut(patch.row).assign(&cross);
        self.norms[patch.row] = norm;
        for (&j, &v) in patch.cols.iter().zip(&patch.values) {
            self.x[[patch.row, j]] = v;
        }
        self.scores.row_mut(patch.row).assign(&scores);
    }
}

/// Target batch of a meta-step.
#[derive(Debug, Clone, Copy)]
pub struct MetaBatch<'a> {
    /// Targets the loss is evaluated at (perturbed in adversarial distillation).
    pub examples: ArrayView2<'a, f64>,
    /// Unperturbed targets, required by TRADES.
    pub clean: Option<ArrayView2<'a, f64>>,
    pub labels: ArrayView2<'a, f64>,
}

/// Outer loss and its gradients with respect to the support set.
#[derive(Debug, Clone)]
pub struct SupportGradient {
    pub loss: f64,
    pub examples: Array2<f64>,
    pub labels: Array2<f64>,
    /// Resolved ridge used for the solve.
    pub ridge: f64,
}

/// Full meta-gradient of the outer loss through the kernel solve.
///
/// With a relative ridge, `λ` itself depends on the support diagonal and is
/// differentiated as well.
pub fn support_grad(
    spec: &KernelSpec,
    support_x: ArrayView2<'_, f64>,
    support_y: ArrayView2<'_, f64>,
    ridge: Ridge,
    kind: &LossKind,
    batch: MetaBatch<'_>,
) -> Result<SupportGradient> {
    ridge.validate()?;
    let n = support_x.nrows();
    if support_y.nrows() != n || n == 0 {
        return Err(Error::dims("support examples and labels disagree"));
    }
    if batch.labels.ncols() != support_y.ncols() || batch.labels.nrows() != batch.examples.nrows() {
        return Err(Error::dims("target labels do not match"));
    }
    let trades = matches!(kind, LossKind::Trades { .. });
    if trades && batch.clean.is_none() {
        return Err(Error::config("TRADES outer loss needs the clean targets"));
    }

    let kss = ntk_self_block_with_grad(spec, support_x)?;
    let lambda = ridge.resolve(&kss.ntk);
    let factor = factorize(&kss.ntk, lambda)?;
    let coeffs = linalg::cho_solve(&factor, support_y);

    let kts = ntk_block_with_grad(spec, batch.examples, support_x)?;
    let scores = kts.ntk.dot(&coeffs);
    let clean_block = match (trades, batch.clean) {
        (true, Some(clean)) => Some(ntk_block_with_grad(spec, clean, support_x)?),
        _ => None,
    };
    let (value, g_pert, g_clean) = match &clean_block {
        Some(cb) => {
            let clean_scores = cb.ntk.dot(&coeffs);
            let e = loss_pair(kind, clean_scores.view(), scores.view(), batch.labels)?;
            (e.value, e.grad_perturbed, Some(e.grad_clean))
        }
        None => {
            let e = loss(kind, scores.view(), batch.labels)?;
            (e.value, e.grad, None)
        }
    };

    let mut coeff_adj = kts.ntk.t().dot(&g_pert);
    if let (Some(cb), Some(gc)) = (&clean_block, &g_clean) {
        coeff_adj += &cb.ntk.t().dot(gc);
    }
    let label_grad = linalg::cho_solve(&factor, coeff_adj.view());

    let a_adj = -label_grad.dot(&coeffs.t());
    let mut kss_adj = (&a_adj + &a_adj.t()) * 0.5;
    if let Ridge::Relative(c) = ridge {
        let trace = a_adj.diag().sum();
        kss_adj
            .diag_mut()
            .mapv_inplace(|v| v + trace * c / n as f64);
    }

    let mut grad_x = kss.pullback_first(kss_adj.view(), support_x, support_x)?;
    grad_x += &kss.pullback_second(kss_adj.view(), support_x, support_x)?;
    let kts_adj = g_pert.dot(&coeffs.t());
    grad_x += &kts.pullback_second(kts_adj.view(), batch.examples, support_x)?;
    if let (Some(cb), Some(gc), Some(clean)) = (&clean_block, &g_clean, batch.clean) {
        let adj = gc.dot(&coeffs.t());
        grad_x += &cb.pullback_second(adj.view(), clean, support_x)?;
    }

    Ok(SupportGradient {
        loss: value,
        examples: grad_x,
        labels: label_grad,
        ridge: lambda,
    })
}

/// Outer loss only (no gradients); used by line searches and tests.
pub fn support_loss(
    spec: &KernelSpec,
    support_x: ArrayView2<'_, f64>,
    support_y: ArrayView2<'_, f64>,
    ridge: Ridge,
    kind: &LossKind,
    batch: MetaBatch<'_>,
) -> Result<f64> {
    ridge.validate()?;
    let kss = ntk_self_block(spec, support_x)?;
    let lambda = ridge.resolve(&kss.ntk);
    let factor = factorize(&kss.ntk, lambda)?;
    let coeffs = linalg::cho_solve(&factor, support_y);
    let scores = ntk_block(spec, batch.examples, support_x)?.ntk.dot(&coeffs);
    match (kind, batch.clean) {
        (LossKind::Trades { .. }, Some(clean)) => {
            let clean_scores = ntk_block(spec, clean, support_x)?.ntk.dot(&coeffs);
            Ok(loss_pair(kind, clean_scores.view(), scores.view(), batch.labels)?.value)
        }
        (LossKind::Trades { .. }, None) => {
            Err(Error::config("TRADES outer loss needs the clean targets"))
        }
        _ => Ok(loss(kind, scores.view(), batch.labels)?.value),
    }
}

/// Mean over rows of `‖∂ℓᵢ/∂xᵢ‖₂`.
pub fn mean_row_norm(g: &Array2<f64>) -> f64 {
    if g.nrows() == 0 {
        return 0.0;
    }
    g.map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .mean()
        .unwrap_or(0.0)
}
