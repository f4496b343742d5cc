//! Closed-form NNGP / NTK of infinitely wide fully connected ReLU networks.
//!
//! Depth convention: `depth = D` counts weight layers, so the network has
//! `D - 1` ReLU nonlinearities and `depth = 1` is a linear kernel. The ReLU
//! layers use the He coefficient `c_σ = 2`, which keeps the diagonal NNGP
//! constant across layers (up to the bias variance).
//!
//! With `Σ₀(x, x') = xᵀx'/s + β²`, every hidden layer maps the previous
//! covariances `(q, q_x, q_x')` to
//!
//! ```text
//! θ   = arccos(clamp(q / √(q_x q_x'), -1, 1))
//! Σ   = √(q_x q_x') / π · (sin θ + (π - θ) cos θ) + β²
//! Σ̇   = (π - θ) / π
//! ```
//!
//! and the tangent kernel accumulates as `Θ⁽¹⁾ = Σ₀`,
//! `Θ⁽ʰ⁾ = Σ_{h-1} + Σ̇_{h-1} Θ⁽ʰ⁻¹⁾`.
//!
//! A kernel entry only depends on the inputs through the three inner products
//! `xᵀx'`, `xᵀx` and `x'ᵀx'`, so gradients are carried as partial derivatives
//! with respect to those scalars and then contracted against the inputs with
//! matrix products.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `sin θ` the `Σ̇` path contributes no derivative.
const SIN_FLOOR: f64 = 1e-12;

/// Architecture of the fully connected ReLU network whose kernel is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Number of weight layers (`FCd` has `depth = d`).
    pub depth: usize,
    #[serde(default)]
    pub bias_variance: f64,
    /// Divisor of the base inner product; `None` means the input dimension.
    #[serde(default)]
    pub input_scale: Option<f64>,
}

impl KernelSpec {
    pub fn fc(depth: usize) -> Self {
        Self {
            depth,
            bias_variance: 0.0,
            input_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("kernel depth must be at least 1"));
        }
        if !(self.bias_variance >= 0.0 && self.bias_variance.is_finite()) {
            return Err(Error::config(
                "bias_variance must be a finite non-negative number",
            ));
        }
        if let Some(s) = self.input_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("input_scale must be positive"));
            }
        }
        Ok(())
    }

    pub fn scale_for(&self, dim: usize) -> f64 {
        self.input_scale.unwrap_or(dim as f64)
    }
}

/// Which argument of `Θ(x, x')` to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
}

/// One kernel entry, optionally with partial derivatives of `Θ` with respect
/// to the base covariances `Σ₀(x,x')`, `Σ₀(x,x)`, `Σ₀(x',x')`.
#[derive(Debug, Clone, Copy)]
struct Entry {
    ntk: f64,
    nngp: f64,
    d_cross: f64,
    d_left: f64,
    d_right: f64,
}

/// Per-layer values kept for the reverse sweep.
#[derive(Default)]
struct Trace {
    cross: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    theta: Vec<f64>,
    sdot: Vec<f64>,
    tangent: Vec<f64>,
}

impl Trace {
    fn clear(&mut self) {
        self.cross.clear();
        self.left.clear();
        self.right.clear();
        self.theta.clear();
        self.sdot.clear();
        self.tangent.clear();
    }
}

/// Angle between the two feature maps; `diagonal` pins it to zero.
fn layer_angle(p: f64, pa: f64, pb: f64, diagonal: bool) -> (f64, f64, bool) {
    if diagonal {
        return (0.0, 1.0, true);
    }
    let norm = (pa * pb).sqrt();
    if norm <= 0.0 {
        // zero feature vector: orthogonal by convention
        return (PI / 2.0, 0.0, true);
    }
    let raw = p / norm;
    let c = raw.clamp(-1.0, 1.0);
    (c.acos(), c, raw != c)
}

fn evaluate(
    depth: usize,
    beta2: f64,
    s0: f64,
    l0: f64,
    r0: f64,
    diagonal: bool,
    trace: Option<&mut Trace>,
) -> Entry {
    let mut tr = trace;
    if let Some(t) = tr.as_deref_mut() {
        t.clear();
        t.cross.push(s0);
        t.left.push(l0);
        t.right.push(r0);
        t.tangent.push(s0);
    }
    let (mut p, mut pa, mut pb) = (s0, l0, r0);
    let mut tangent = s0;
    for _ in 1..depth {
        let (theta, cos, _) = layer_angle(p, pa, pb, diagonal);
        let next_p = if diagonal {
            pa + beta2
        } else {
            let norm = (pa * pb).sqrt();
            norm / PI * (theta.sin() + (PI - theta) * cos) + beta2
        };
        let sdot = (PI - theta) / PI;
        tangent = next_p + sdot * tangent;
        pa += beta2;
        pb += beta2;
        p = next_p;
        if let Some(t) = tr.as_deref_mut() {
            t.theta.push(theta);
            t.sdot.push(sdot);
            t.cross.push(p);
            t.left.push(pa);
            t.right.push(pb);
            t.tangent.push(tangent);
        }
    }
    let mut entry = Entry {
        ntk: tangent,
        nngp: p,
        d_cross: 0.0,
        d_left: 0.0,
        d_right: 0.0,
    };
    if let Some(t) = tr {
        backward(&mut entry, t, diagonal);
    }
    entry
}

/// Reverse sweep through the recursion stored in `t`.
fn backward(entry: &mut Entry, t: &Trace, diagonal: bool) {
    let layers = t.theta.len();
    let mut g_tangent = 1.0;
    let (mut g_p, mut g_pa, mut g_pb) = (0.0, 0.0, 0.0);
    for h in (1..=layers).rev() {
        // Θ⁽ʰ⁺¹⁾ = Σ_h + Σ̇_h Θ⁽ʰ⁾
        let sdot = t.sdot[h - 1];
        g_p += g_tangent;
        let g_sdot = g_tangent * t.tangent[h - 1];
        g_tangent *= sdot;

        // layer h consumes the covariances of layer h-1
        let (p, pa, pb) = (t.cross[h - 1], t.left[h - 1], t.right[h - 1]);
        let theta = t.theta[h - 1];
        let (mut np, mut npa, mut npb) = (0.0, g_pa, g_pb);
        if diagonal {
            // Σ_h = q + β², Σ̇_h = 1
            np += g_p;
        } else {
            let norm = (pa * pb).sqrt();
            if norm > 0.0 {
                let sin = theta.sin();
                let j = sin + (PI - theta) * theta.cos();
                np += g_p * (PI - theta) / PI;
                let shared = norm * j - (PI - theta) * p;
                npa += g_p * shared / (2.0 * PI * pa);
                npb += g_p * shared / (2.0 * PI * pb);
                if sin > SIN_FLOOR && (p / norm).abs() <= 1.0 {
                    let c = p / norm;
                    let dsdot_dc = 1.0 / (PI * sin);
                    np += g_sdot * dsdot_dc / norm;
                    npa -= g_sdot * dsdot_dc * c / (2.0 * pa);
                    npb -= g_sdot * dsdot_dc * c / (2.0 * pb);
                }
            }
        }
        g_p = np;
        g_pa = npa;
        g_pb = npb;
    }
    // Θ⁽¹⁾ = Σ₀
    g_p += g_tangent;
    entry.d_cross = g_p;
    entry.d_left = g_pa;
    entry.d_right = g_pb;
}

fn check_finite(v: ArrayView1<'_, f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn base(spec: &KernelSpec, q: f64, scale: f64) -> f64 {
    q / scale + spec.bias_variance
}

/// `Θ` from raw inner products `xᵀx'`, `xᵀx`, `x'ᵀx'` (before scaling).
pub(crate) fn ntk_from_inner(
    spec: &KernelSpec,
    scale: f64,
    cross: f64,
    left: f64,
    right: f64,
) -> f64 {
    evaluate(
        spec.depth,
        spec.bias_variance,
        base(spec, cross, scale),
        base(spec, left, scale),
        base(spec, right, scale),
        false,
        None,
    )
    .ntk
}

/// `(Θ(x, x'), Σ_{D-1}(x, x'))` for a single pair.
pub fn ntk_pair(
    spec: &KernelSpec,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<(f64, f64)> {
    spec.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dims(format!(
            "pair lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    check_finite(x, "kernel input")?;
    check_finite(y, "kernel input")?;
    let s = spec.scale_for(x.len());
    let e = evaluate(
        spec.depth,
        spec.bias_variance,
        base(spec, x.dot(&y), s),
        base(spec, x.dot(&x), s),
        base(spec, y.dot(&y), s),
        false,
        None,
    );
    Ok((e.ntk, e.nngp))
}

/// Exact gradient of `Θ(x, x')` with respect to one argument.
///
/// At collinear inputs the `Σ̇` factor is not differentiable; its contribution
/// is dropped there, so the result is always finite.
pub fn ntk_grad(
    spec: &KernelSpec,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    wrt: Wrt,
) -> Result<Array1<f64>> {
    spec.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dims(format!(
            "pair lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    check_finite(x, "kernel input")?;
    check_finite(y, "kernel input")?;
    let s = spec.scale_for(x.len());
    let mut trace = Trace::default();
    let e = evaluate(
        spec.depth,
        spec.bias_variance,
        base(spec, x.dot(&y), s),
        base(spec, x.dot(&x), s),
        base(spec, y.dot(&y), s),
        false,
        Some(&mut trace),
    );
    Ok(match wrt {
        Wrt::First => (&y * (e.d_cross / s)) + (&x * (2.0 * e.d_left / s)),
        Wrt::Second => (&x * (e.d_cross / s)) + (&y * (2.0 * e.d_right / s)),
    })
}

/// Partial derivatives of every block entry with respect to the raw inner
/// products `xᵢᵀxⱼ`, `xᵢᵀxᵢ`, `xⱼᵀxⱼ`.
#[derive(Debug, Clone)]
struct BlockPartials {
    cross: Array2<f64>,
    left: Array2<f64>,
    right: Array2<f64>,
}

/// Kernel matrices between two example sets.
#[derive(Debug, Clone)]
pub struct KernelBlock {
    pub ntk: Array2<f64>,
    pub nngp: Array2<f64>,
    partials: Option<BlockPartials>,
}

impl KernelBlock {
    pub fn has_partials(&self) -> bool {
        self.partials.is_some()
    }

    fn partials(&self) -> Result<&BlockPartials> {
        self.partials
            .as_ref()
            .ok_or_else(|| Error::config("kernel block was computed without gradient trace"))
    }

    /// Gradient of `Σᵢⱼ adjᵢⱼ Θ(aᵢ, bⱼ)` with respect to the rows of `a`.
    pub fn pullback_first(
        &self,
        adj: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let p = self.partials()?;
        if adj.dim() != self.ntk.dim() {
            return Err(Error::dims("adjoint shape differs from block"));
        }
        let weighted = &adj * &p.cross;
        let mut out = weighted.dot(&b);
        let diag = (&adj * &p.left).sum_axis(Axis(1));
        Zip::from(out.rows_mut())
            .and(a.rows())
            .and(&diag)
            .for_each(|mut o, ar, &w| o.scaled_add(2.0 * w, &ar));
        Ok(out)
    }

    /// Gradient of `Σᵢⱼ adjᵢⱼ Θ(aᵢ, bⱼ)` with respect to the rows of `b`.
    pub fn pullback_second(
        &self,
        adj: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let p = self.partials()?;
        if adj.dim() != self.ntk.dim() {
            return Err(Error::dims("adjoint shape differs from block"));
        }
        let weighted = &adj * &p.cross;
        let mut out = weighted.t().dot(&a);
        let diag = (&adj * &p.right).sum_axis(Axis(0));
        Zip::from(out.rows_mut())
            .and(b.rows())
            .and(&diag)
            .for_each(|mut o, br, &w| o.scaled_add(2.0 * w, &br));
        Ok(out)
    }
}

fn check_inputs(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims(format!(
            "kernel inputs have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.ncols() == 0 {
        return Err(Error::dims("kernel inputs have no columns"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input"));
    }
    Ok(())
}

fn row_norms(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.rows().into_iter().map(|r| r.dot(&r)).collect()
}

struct RowOut {
    ntk: Vec<f64>,
    nngp: Vec<f64>,
    partials: Option<[Vec<f64>; 3]>,
}

fn compute_row(
    spec: &KernelSpec,
    scale: f64,
    gram_row: ArrayView1<'_, f64>,
    left_norm: f64,
    right_norms: &Array1<f64>,
    diag_index: Option<usize>,
    columns: usize,
    with_grad: bool,
) -> RowOut {
    let mut out = RowOut {
        ntk: Vec::with_capacity(columns),
        nngp: Vec::with_capacity(columns),
        partials: with_grad.then(|| {
            [
                Vec::with_capacity(columns),
                Vec::with_capacity(columns),
                Vec::with_capacity(columns),
            ]
        }),
    };
    let mut trace = Trace::default();
    let l0 = base(spec, left_norm, scale);
    for j in 0..columns {
        let diagonal = diag_index == Some(j);
        let (s0, r0) = if diagonal {
            (l0, l0)
        } else {
            (
                base(spec, gram_row[j], scale),
                base(spec, right_norms[j], scale),
            )
        };
        let e = evaluate(
            spec.depth,
            spec.bias_variance,
            s0,
            l0,
            r0,
            diagonal,
            with_grad.then_some(&mut trace),
        );
        out.ntk.push(e.ntk);
        out.nngp.push(e.nngp);
        if let Some(p) = out.partials.as_mut() {
            p[0].push(e.d_cross / scale);
            p[1].push(e.d_left / scale);
            p[2].push(e.d_right / scale);
        }
    }
    out
}

fn assemble(rows: Vec<RowOut>, m: usize, n: usize) -> KernelBlock {
    let mut ntk = Array2::zeros((m, n));
    let mut nngp = Array2::zeros((m, n));
    let with_grad = rows.first().is_some_and(|r| r.partials.is_some());
    let mut partials = with_grad.then(|| BlockPartials {
        cross: Array2::zeros((m, n)),
        left: Array2::zeros((m, n)),
        right: Array2::zeros((m, n)),
    });
    for (i, row) in rows.into_iter().enumerate() {
        for j in 0..row.ntk.len() {
            ntk[[i, j]] = row.ntk[j];
            nngp[[i, j]] = row.nngp[j];
        }
        if let (Some(p), Some(rp)) = (partials.as_mut(), row.partials) {
            for j in 0..rp[0].len() {
                p.cross[[i, j]] = rp[0][j];
                p.left[[i, j]] = rp[1][j];
                p.right[[i, j]] = rp[2][j];
            }
        }
    }
    KernelBlock {
        ntk,
        nngp,
        partials,
    }
}

fn cross_block(
    spec: &KernelSpec,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    with_grad: bool,
) -> Result<KernelBlock> {
    spec.validate()?;
    check_inputs(a, b)?;
    let scale = spec.scale_for(a.ncols());
    let gram = a.dot(&b.t());
    let left = row_norms(a);
    let right = row_norms(b);
    let n = b.nrows();
    let rows: Vec<RowOut> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            compute_row(
                spec,
                scale,
                gram.row(i),
                left[i],
                &right,
                None,
                n,
                with_grad,
            )
        })
        .collect();
    Ok(assemble(rows, a.nrows(), n))
}

fn self_block(spec: &KernelSpec, x: ArrayView2<'_, f64>, with_grad: bool) -> Result<KernelBlock> {
    spec.validate()?;
    check_inputs(x, x)?;
    let scale = spec.scale_for(x.ncols());
    let gram = x.dot(&x.t());
    let norms = gram.diag().to_owned();
    let n = x.nrows();
    // lower triangle including the diagonal, mirrored below
    let rows: Vec<RowOut> = (0..n)
        .into_par_iter()
        .map(|i| {
            compute_row(
                spec,
                scale,
                gram.row(i),
                norms[i],
                &norms,
                Some(i),
                i + 1,
                with_grad,
            )
        })
        .collect();
    let mut block = assemble(rows, n, n);
    for i in 0..n {
        for j in 0..i {
            block.ntk[[j, i]] = block.ntk[[i, j]];
            block.nngp[[j, i]] = block.nngp[[i, j]];
            if let Some(p) = block.partials.as_mut() {
                p.cross[[j, i]] = p.cross[[i, j]];
                p.left[[j, i]] = p.right[[i, j]];
                p.right[[j, i]] = p.left[[i, j]];
            }
        }
    }
    Ok(block)
}

/// `Θ(aᵢ, bⱼ)` and `Σ(aᵢ, bⱼ)` for all row pairs.
pub fn ntk_block(
    spec: &KernelSpec,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<KernelBlock> {
    cross_block(spec, a, b, false)
}

/// As [`ntk_block`], additionally retaining the derivative trace for pullbacks.
pub fn ntk_block_with_grad(
    spec: &KernelSpec,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<KernelBlock> {
    cross_block(spec, a, b, true)
}

/// Symmetric block of a set against itself; each unordered pair is evaluated once.
pub fn ntk_self_block(spec: &KernelSpec, x: ArrayView2<'_, f64>) -> Result<KernelBlock> {
    self_block(spec, x, false)
}

pub fn ntk_self_block_with_grad(spec: &KernelSpec, x: ArrayView2<'_, f64>) -> Result<KernelBlock> {
    self_block(spec, x, true)
}
