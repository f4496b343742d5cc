//! Adversarial example generation: FGSM, ℓ∞/ℓ2 PGD and a gradient-free
//! square search.
//!
//! Projection order for every gradient step: step, project onto the ε-ball
//! around the clean point, then clip to the data box. `sign(0) = 0`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{argmax_rows, Dataset};
use crate::error::{Error, Result};
use crate::krr::LossKind;
use crate::seed::{self, example_seed, stream_seed};

/// Rows processed per gradient call; bounds kernel-block memory.
const CHUNK_ROWS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Threat model and step schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_clip")]
    pub clip: (f64, f64),
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_loss() -> LossKind {
    LossKind::Ce
}

fn default_clip() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackConfig {
    /// ℓ∞ attack with CE loss on the unit box.
    pub fn linf(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            alpha,
            steps,
            loss: LossKind::Ce,
            clip: (0.0, 1.0),
            random_start: false,
            seed: 0,
        }
    }

    pub fn l2(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            norm: Norm::L2,
            ..Self::linf(epsilon, alpha, steps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.clip.0 < self.clip.1) {
            return Err(Error::config("clip box must satisfy lo < hi"));
        }
        Ok(())
    }
}

/// Parameters of the square search beyond the threat model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareConfig {
    pub iterations: usize,
    #[serde(default = "default_p_init")]
    pub p_init: f64,
    /// `(channels, height, width)` when examples are flattened images.
    #[serde(default)]
    pub image: Option<(usize, usize, usize)>,
}

fn default_p_init() -> f64 {
    0.8
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            p_init: default_p_init(),
            image: None,
        }
    }
}

/// Replacement of a subset of coordinates of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl Patch {
    fn apply(&self, mut row: ndarray::ArrayViewMut1<'_, f64>) {
        for (&c, &v) in self.cols.iter().zip(&self.values) {
            row[c] = v;
        }
    }
}

/// Mutable batch of inputs whose scores can be probed under patches.
pub trait ScoreSession {
    fn current(&self) -> &Array2<f64>;
    fn current_scores(&self) -> &Array2<f64>;
    /// Scores of each patched row, one output row per patch.
    fn evaluate(&self, patches: &[Patch]) -> Result<Array2<f64>>;
    /// Applies a patch whose scores were returned by [`ScoreSession::evaluate`].
    fn commit(&mut self, patch: &Patch, scores: ArrayView1<'_, f64>);
}

/// Anything that maps inputs to class scores.
pub trait Scorer: Sync {
    fn class_count(&self) -> usize;

    fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    fn has_gradients(&self) -> bool {
        false
    }

    /// Per-example gradients `∂ℓᵢ/∂xᵢ` of the row losses.
    fn input_gradients(
        &self,
        _x: ArrayView2<'_, f64>,
        _targets: ArrayView2<'_, f64>,
        _loss: &LossKind,
    ) -> Result<Array2<f64>> {
        Err(Error::NoGradient)
    }

    /// Session used by patch-based searches; the default rescores whole rows.
    fn session<'s>(&'s self, x: Array2<f64>) -> Result<Box<dyn ScoreSession + 's>> {
        let scores = self.scores(x.view())?;
        Ok(Box::new(FullSession {
            scorer: self,
            x,
            scores,
        }))
    }
}

struct FullSession<'s, S: Scorer + ?Sized> {
    scorer: &'s S,
    x: Array2<f64>,
    scores: Array2<f64>,
}

impl<S: Scorer + ?Sized> ScoreSession for FullSession<'_, S> {
    fn current(&self) -> &Array2<f64> {
        &self.x
    }

    fn current_scores(&self) -> &Array2<f64> {
        &self.scores
    }

    fn evaluate(&self, patches: &[Patch]) -> Result<Array2<f64>> {
        let mut rows = Array2::zeros((patches.len(), self.x.ncols()));
        for (mut dst, p) in rows.rows_mut().into_iter().zip(patches) {
            dst.assign(&self.x.row(p.row));
            p.apply(dst);
        }
        self.scorer.scores(rows.view())
    }

    fn commit(&mut self, patch: &Patch, scores: ArrayView1<'_, f64>) {
        patch.apply(self.x.row_mut(patch.row));
        self.scores.row_mut(patch.row).assign(&scores);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::dims(format!(
            "{} inputs vs {} label rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if y.ncols() != scorer.class_count() {
        return Err(Error::dims(format!(
            "labels have {} columns, scorer {} classes",
            y.ncols(),
            scorer.class_count()
        )));
    }
    Ok(())
}

fn gradients<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    loss: &LossKind,
) -> Result<Array2<f64>> {
    if !scorer.has_gradients() {
        return Err(Error::NoGradient);
    }
    let g = scorer.input_gradients(x, y, loss)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack input gradients"));
    }
    Ok(g)
}

/// Single signed-gradient step of size ε.
pub fn fgsm<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &AttackConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if cfg.norm != Norm::Linf {
        return Err(Error::Unsupported(
            "FGSM is defined for the l-infinity norm".into(),
        ));
    }
    check_batch(scorer, x, y)?;
    let mut out = x.to_owned();
    for start in (0..x.nrows()).step_by(CHUNK_ROWS) {
        let end = (start + CHUNK_ROWS).min(x.nrows());
        let g = gradients(
            scorer,
            x.slice(s![start..end, ..]),
            y.slice(s![start..end, ..]),
            &cfg.loss,
        )?;
        let mut chunk = out.slice_mut(s![start..end, ..]);
        ndarray::Zip::from(&mut chunk)
            .and(&g)
            .for_each(|v, &gv| *v = (*v + cfg.epsilon * sign(gv)).clamp(cfg.clip.0, cfg.clip.1));
    }
    Ok(out)
}

fn project_row(
    mut row: ndarray::ArrayViewMut1<'_, f64>,
    origin: ArrayView1<'_, f64>,
    cfg: &AttackConfig,
) {
    match cfg.norm {
        Norm::Linf => {
            for (v, &o) in row.iter_mut().zip(origin) {
                *v = v.clamp(o - cfg.epsilon, o + cfg.epsilon);
            }
        }
        Norm::L2 => {
            let dist = row
                .iter()
                .zip(origin)
                .map(|(v, o)| (v - o) * (v - o))
                .sum::<f64>()
                .sqrt();
            if dist > cfg.epsilon {
                let f = cfg.epsilon / dist;
                for (v, &o) in row.iter_mut().zip(origin) {
                    *v = o + (*v - o) * f;
                }
            }
        }
    }
    row.mapv_inplace(|v| v.clamp(cfg.clip.0, cfg.clip.1));
}

fn random_start_row(
    mut row: ndarray::ArrayViewMut1<'_, f64>,
    origin: ArrayView1<'_, f64>,
    cfg: &AttackConfig,
    seed: u64,
) {
    let mut rng = seed::rng(seed);
    match cfg.norm {
        Norm::Linf => {
            for (v, &o) in row.iter_mut().zip(origin) {
                *v = o + rng.random_range(-1.0..=1.0) * cfg.epsilon;
            }
        }
        Norm::L2 => {
            let dir: Vec<f64> = (0..row.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let radius = cfg.epsilon * rng.random::<f64>().powf(1.0 / row.len() as f64);
            for ((v, &o), d) in row.iter_mut().zip(origin).zip(&dir) {
                *v = o + d / len * radius;
            }
        }
    }
    project_row(row, origin, cfg);
}

/// Projected gradient ascent on the loss inside the ε-ball.
pub fn pgd<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &AttackConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_batch(scorer, x, y)?;
    let mut out = x.to_owned();
    if cfg.random_start {
        let stream = stream_seed(cfg.seed, "pgd-start");
        for (i, row) in out.rows_mut().into_iter().enumerate() {
            random_start_row(row, x.row(i), cfg, example_seed(stream, i));
        }
    }
    for start in (0..x.nrows()).step_by(CHUNK_ROWS) {
        let end = (start + CHUNK_ROWS).min(x.nrows());
        let origin = x.slice(s![start..end, ..]);
        let targets = y.slice(s![start..end, ..]);
        for _ in 0..cfg.steps {
            let g = gradients(scorer, out.slice(s![start..end, ..]), targets, &cfg.loss)?;
            let mut chunk = out.slice_mut(s![start..end, ..]);
            for (i, (mut row, grow)) in chunk.rows_mut().into_iter().zip(g.rows()).enumerate() {
                match cfg.norm {
                    Norm::Linf => row.zip_mut_with(&grow, |v, &gv| *v += cfg.alpha * sign(gv)),
                    Norm::L2 => {
                        let len = grow.dot(&grow).sqrt().max(1e-12);
                        row.scaled_add(cfg.alpha / len, &grow);
                    }
                }
                project_row(row, origin.row(i), cfg);
            }
        }
    }
    Ok(out)
}

/// `z_y − max_{i≠y} z_i` per row; negative means misclassified.
pub fn margins(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Array1<f64> {
    scores
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(z, &y)| {
            let other = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            z[y] - other
        })
        .collect()
}

/// Fraction of `p_init` used at iteration `it` out of `total`.
fn square_fraction(p_init: f64, it: usize, total: usize) -> f64 {
    let it = if total == 0 { 0 } else { it * 10_000 / total };
    let halvings = [10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000]
        .iter()
        .filter(|&&b| it > b)
        .count();
    p_init / f64::powi(2.0, halvings as i32)
}

fn correct_rows(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Vec<bool> {
    argmax_rows(scores)
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect()
}

/// Result of a square search, with per-example margin trajectories.
#[derive(Debug, Clone)]
pub struct SquareOutcome {
    pub adversarial: Array2<f64>,
    /// Margin after initialization and after every iteration (non-increasing).
    pub margins: Vec<Array1<f64>>,
}

/// Gradient-free ℓ∞ random search on the margin.
pub fn square_attack<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &AttackConfig,
    search: &SquareConfig,
) -> Result<Array2<f64>> {
    square_attack_traced(scorer, x, y, cfg, search, false).map(|o| o.adversarial)
}

/// As [`square_attack`], optionally recording the margin sequence.
pub fn square_attack_traced<S: Scorer + ?Sized>(
    scorer: &S,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &AttackConfig,
    search: &SquareConfig,
    record: bool,
) -> Result<SquareOutcome> {
    cfg.validate()?;
    check_batch(scorer, x, y)?;
    if cfg.norm != Norm::Linf {
        return Err(Error::Unsupported(
            "square search is implemented for the l-infinity norm".into(),
        ));
    }
    let (m, d) = x.dim();
    if let Some((c, h, w)) = search.image {
        if c * h * w != d || h < 2 || w < 2 {
            return Err(Error::dims(format!(
                "image shape {c}x{h}x{w} does not match dimension {d}"
            )));
        }
    }
    if !(search.p_init > 0.0 && search.p_init <= 1.0) {
        return Err(Error::config("p_init must lie in (0, 1]"));
    }
    let labels = argmax_rows(y);
    let mut trace = Vec::new();
    if search.iterations == 0 || cfg.epsilon == 0.0 || m == 0 {
        return Ok(SquareOutcome {
            adversarial: x.to_owned(),
            margins: trace,
        });
    }

    let stream = stream_seed(cfg.seed, "square");
    let mut rngs: Vec<seed::Rng> = (0..m).map(|i| seed::rng(example_seed(stream, i))).collect();
    let (lo, hi) = cfg.clip;
    let eps = cfg.epsilon;
    let shifted = |origin: f64, s: f64| (origin + s * eps).clamp(lo, hi);

    let mut session = scorer.session(x.to_owned())?;
    let mut best = margins(session.current_scores().view(), &labels);

    // initialization: stripes of ±ε (per column and channel for images)
    let init: Vec<Patch> = (0..m)
        .map(|i| {
            let rng = &mut rngs[i];
            let values = match search.image {
                Some((c, h, w)) => {
                    let signs: Vec<f64> = (0..c * w)
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect();
                    (0..d)
                        .map(|j| {
                            let (ch, col) = (j / (h * w), j % w);
                            shifted(x[[i, j]], signs[ch * w + col])
                        })
                        .collect()
                }
                None => (0..d)
                    .map(|j| shifted(x[[i, j]], if rng.random::<bool>() { 1.0 } else { -1.0 }))
                    .collect(),
            };
            Patch {
                row: i,
                cols: (0..d).collect(),
                values,
            }
        })
        .collect();
    accept_improving(session.as_mut(), &init, &labels, &mut best)?;
    if record {
        trace.push(best.clone());
    }

    for it in 0..search.iterations {
        let active: Vec<usize> = {
            let correct = correct_rows(session.current_scores().view(), &labels);
            (0..m).filter(|&i| correct[i]).collect()
        };
        if active.is_empty() {
            if record {
                trace.push(best.clone());
            }
            continue;
        }
        let p = square_fraction(search.p_init, it, search.iterations);
        let current = session.current();
        let patches: Vec<Patch> = active
            .iter()
            .map(|&i| {
                propose(
                    &mut rngs[i],
                    i,
                    x.row(i),
                    current.row(i),
                    p,
                    search.image,
                    &shifted,
                )
            })
            .collect();
        accept_improving(session.as_mut(), &patches, &labels, &mut best)?;
        if record {
            trace.push(best.clone());
        }
    }
    Ok(SquareOutcome {
        adversarial: session.current().clone(),
        margins: trace,
    })
}

fn accept_improving(
    session: &mut dyn ScoreSession,
    patches: &[Patch],
    labels: &[usize],
    best: &mut Array1<f64>,
) -> Result<()> {
    if patches.is_empty() {
        return Ok(());
    }
    let scores = session.evaluate(patches)?;
    let rows: Vec<usize> = patches.iter().map(|p| labels[p.row]).collect();
    let proposed = margins(scores.view(), &rows);
    for (k, patch) in patches.iter().enumerate() {
        if proposed[k] < best[patch.row] {
            best[patch.row] = proposed[k];
            session.commit(patch, scores.row(k));
        }
    }
    Ok(())
}

/// Random ±ε window; resampled a few times to avoid proposing the current values.
fn propose(
    rng: &mut seed::Rng,
    row: usize,
    origin: ArrayView1<'_, f64>,
    current: ArrayView1<'_, f64>,
    p: f64,
    image: Option<(usize, usize, usize)>,
    shifted: &dyn Fn(f64, f64) -> f64,
) -> Patch {
    let d = origin.len();
    let mut patch = Patch {
        row,
        cols: Vec::new(),
        values: Vec::new(),
    };
    for _ in 0..10 {
        patch.cols.clear();
        patch.values.clear();
        match image {
            Some((c, h, w)) => {
                let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w) - 1);
                let r0 = rng.random_range(0..=h - side);
                let c0 = rng.random_range(0..=w - side);
                for ch in 0..c {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    for r in r0..r0 + side {
                        for col in c0..c0 + side {
                            let j = ch * h * w + r * w + col;
                            patch.cols.push(j);
                            patch.values.push(shifted(origin[j], s));
                        }
                    }
                }
            }
            None => {
                let len = ((p * d as f64).round() as usize).clamp(1, d);
                let start = rng.random_range(0..=d - len);
                for j in start..start + len {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    patch.cols.push(j);
                    patch.values.push(shifted(origin[j], s));
                }
            }
        }
        let changed = patch
            .cols
            .iter()
            .zip(&patch.values)
            .any(|(&j, &v)| (current[j] - v).abs() > 1e-12);
        if changed {
            break;
        }
    }
    patch
}

/// Evaluation-time attack selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    Clean,
    Fgsm {
        config: AttackConfig,
    },
    Pgd {
        config: AttackConfig,
    },
    Square {
        config: AttackConfig,
        #[serde(default)]
        search: SquareConfig,
    },
}

impl Attack {
    /// Short label used as report key, e.g. `pgd40`.
    pub fn name(&self) -> String {
        match self {
            Attack::Clean => "clean".into(),
            Attack::Fgsm { .. } => "fgsm".into(),
            Attack::Pgd { config } => format!("pgd{}", config.steps),
            Attack::Square { search, .. } => format!("square{}", search.iterations),
        }
    }

    pub fn needs_gradients(&self) -> bool {
        matches!(self, Attack::Fgsm { .. } | Attack::Pgd { .. })
    }

    pub fn config(&self) -> Option<&AttackConfig> {
        match self {
            Attack::Clean => None,
            Attack::Fgsm { config } | Attack::Pgd { config } | Attack::Square { config, .. } => {
                Some(config)
            }
        }
    }

    pub fn run<S: Scorer + ?Sized>(
        &self,
        scorer: &S,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        match self {
            Attack::Clean => Ok(x.to_owned()),
            Attack::Fgsm { config } => fgsm(scorer, x, y, config),
            Attack::Pgd { config } => pgd(scorer, x, y, config),
            Attack::Square { config, search } => square_attack(scorer, x, y, config, search),
        }
    }
}

/// Fraction of rows whose predicted class matches the label argmax.
pub fn accuracy(scores: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> f64 {
    if scores.nrows() == 0 {
        return 0.0;
    }
    let pred = argmax_rows(scores);
    let truth = argmax_rows(targets);
    pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / scores.nrows() as f64
}

/// Accuracy on `ds` after `attack`.
pub fn robust_accuracy<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &Dataset,
    attack: &Attack,
) -> Result<f64> {
    let adv = attack.run(scorer, ds.examples().view(), ds.labels().view())?;
    adversarial_accuracy(scorer, adv.view(), ds.labels().view())
}

/// Accuracy of `scorer` on precomputed (adversarial) inputs.
pub fn adversarial_accuracy<S: Scorer + ?Sized>(
    scorer: &S,
    adv: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..adv.nrows()).step_by(CHUNK_ROWS) {
        let end = (start + CHUNK_ROWS).min(adv.nrows());
        let scores = scorer.scores(adv.slice(s![start..end, ..]))?;
        let pred = argmax_rows(scores.view());
        let truth = argmax_rows(targets.slice(s![start..end, ..]));
        correct += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / adv.nrows().max(1) as f64)
}

/// Largest per-row perturbation size under `norm`.
pub fn max_perturbation(adv: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, norm: Norm) -> f64 {
    let diff = &adv - &x;
    diff.map_axis(Axis(1), |r| match norm {
        Norm::Linf => r.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        Norm::L2 => r.dot(&r).sqrt(),
    })
    .iter()
    .cloned()
    .fold(0.0, f64::max)
}
