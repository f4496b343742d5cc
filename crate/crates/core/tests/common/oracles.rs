//! Finite-difference oracles; each returns the worst relative error seen.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use robust_kip::data::Dataset;
use robust_kip::krr::{self, KernelMachine, LossKind, MetaBatch, Ridge};
use robust_kip::ntk::{ntk_grad, ntk_pair, KernelSpec, Wrt};
use robust_kip::seed;

use super::{fd_matrix, fd_vector, one_hot_labels, rel_err, uniform};

pub const H: f64 = 1e-5;

pub fn all_losses() -> Vec<LossKind> {
    vec![
        LossKind::Mse,
        LossKind::Ce,
        LossKind::Dlr,
        LossKind::trades(0.7, LossKind::Ce),
        LossKind::trades(1.5, LossKind::Mse),
    ]
}

fn random_spec(rng: &mut seed::Rng, depth: usize) -> KernelSpec {
    KernelSpec {
        depth,
        bias_variance: if rng.random::<bool>() { 0.0 } else { 0.1 },
        input_scale: None,
    }
}

/// `ntk_grad` against central differences, depths cycling through 1..=7.
pub fn ntk_grad_error(draws: usize, master: u64) -> f64 {
    let mut rng = seed::rng(seed::stream_seed(master, "oracle-ntk"));
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let spec = random_spec(&mut rng, 1 + i % 7);
        let d = rng.random_range(2..8);
        let x: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for wrt in [Wrt::First, Wrt::Second] {
            let g = ntk_grad(&spec, x.view(), y.view(), wrt).unwrap();
            let fd = match wrt {
                Wrt::First => fd_vector(&|p| ntk_pair(&spec, p.view(), y.view()).unwrap().0, &x, H),
                Wrt::Second => {
                    fd_vector(&|p| ntk_pair(&spec, x.view(), p.view()).unwrap().0, &y, H)
                }
            };
            worst = worst.max(rel_err(&g, &fd));
        }
    }
    worst
}

/// Random support whose labels cover every class (tied zero scores make DLR non-smooth).
fn support_set(rng: &mut seed::Rng, n: usize, d: usize, k: usize) -> (Array2<f64>, Array2<f64>) {
    let mut y = Array2::zeros((n, k));
    for i in 0..n {
        let c = if i < k { i } else { rng.random_range(0..k) };
        y[[i, c]] = 1.0;
    }
    (uniform(rng, n, d, 0.05, 0.95), y)
}

/// `krr::input_grad` against differences of `loss ∘ predict`.
pub fn input_grad_error(draws_per_loss: usize, master: u64) -> f64 {
    let mut rng = seed::rng(seed::stream_seed(master, "oracle-input"));
    let mut worst: f64 = 0.0;
    for kind in all_losses() {
        for i in 0..draws_per_loss {
            let spec = random_spec(&mut rng, 1 + i % 7);
            let (xs, ys) = support_set(&mut rng, 5, 4, 3);
            let ds = Dataset::new(xs, ys, (0.0, 1.0), false, "s").unwrap();
            let km = KernelMachine::fit(&spec, &ds, Ridge::Fixed(1e-3)).unwrap();
            let xq = uniform(&mut rng, 3, 4, 0.0, 1.0);
            let yq = one_hot_labels(&mut rng, 3, 3);
            let g = krr::input_grad(&km, &kind, xq.view(), yq.view()).unwrap();
            let f = |p: &Array2<f64>| {
                let z = km.predict(p.view()).unwrap();
                krr::loss(&kind, z.view(), yq.view()).unwrap().value
            };
            let e = rel_err(&g, &fd_matrix(&f, &xq, H));
            worst = worst.max(e);
        }
    }
    worst
}

/// `krr::support_grad` (examples and labels) against differences of the outer loss.
pub fn support_grad_error(draws_per_loss: usize, master: u64) -> f64 {
    let mut rng = seed::rng(seed::stream_seed(master, "oracle-support"));
    let mut worst: f64 = 0.0;
    for kind in all_losses() {
        for i in 0..draws_per_loss {
            let spec = random_spec(&mut rng, if i == 0 { 2 } else { 1 + i % 7 });
            let ridge = if i % 2 == 0 {
                Ridge::Relative(1e-3)
            } else {
                Ridge::Fixed(1e-4)
            };
            let (xs, ys) = support_set(&mut rng, 4, 5, 3);
            let xt_clean = uniform(&mut rng, 3, 5, 0.0, 1.0);
            let xt = &xt_clean + &uniform(&mut rng, 3, 5, -0.1, 0.1);
            let yt = one_hot_labels(&mut rng, 3, 3);
            let batch = MetaBatch {
                examples: xt.view(),
                clean: Some(xt_clean.view()),
                labels: yt.view(),
            };
            let g = krr::support_grad(&spec, xs.view(), ys.view(), ridge, &kind, batch).unwrap();
            let fx = |p: &Array2<f64>| {
                krr::support_loss(&spec, p.view(), ys.view(), ridge, &kind, batch).unwrap()
            };
            let fy = |p: &Array2<f64>| {
                krr::support_loss(&spec, xs.view(), p.view(), ridge, &kind, batch).unwrap()
            };
            let ex = rel_err(&g.examples, &fd_matrix(&fx, &xs, H));
            let ey = rel_err(&g.labels, &fd_matrix(&fy, &ys, H));
            worst = worst.max(ex).max(ey);
        }
    }
    worst
}

/// Smallest `|pre-activation|` over hidden units; near zero a difference stencil straddles a ReLU kink.
fn min_preactivation(p: &robust_kip::mlp::MlpParams, x: &Array2<f64>) -> f64 {
    let mut smallest = f64::INFINITY;
    for l in 1..p.depth() {
        let mut head = p.clone();
        head.weights.truncate(l);
        head.biases.truncate(l);
        head.widths.truncate(l + 1);
        let a = head.predict(x.view()).unwrap();
        smallest = a.iter().fold(smallest, |m, v| m.min(v.abs()));
    }
    smallest
}

/// MLP parameter and input gradients against central differences
/// (widths `[4, 8, 8, 3]`, both parameterizations).
pub fn mlp_grad_error(draws_per_loss: usize, master: u64) -> f64 {
    use robust_kip::mlp::{MlpParams, Parameterization};
    let mut rng = seed::rng(seed::stream_seed(master, "oracle-mlp"));
    let mut worst: f64 = 0.0;
    for kind in all_losses() {
        for i in 0..draws_per_loss {
            let param = if i % 2 == 0 {
                Parameterization::Standard
            } else {
                Parameterization::Ntk
            };
            let p = MlpParams::init(&[4, 8, 8, 3], param, 0.1, rng.random()).unwrap();
            let mut x = uniform(&mut rng, 3, 4, 0.0, 1.0);
            while min_preactivation(&p, &x) < 1e-3 {
                x = uniform(&mut rng, 3, 4, 0.0, 1.0);
            }
            let y = one_hot_labels(&mut rng, 3, 3);
            let (_, g) = p.loss_and_grads(x.view(), y.view(), &kind).unwrap();
            let flat = g.flatten();
            let mut fd = Vec::with_capacity(flat.len());
            for l in 0..p.depth() {
                let wf = |w: &Array2<f64>| {
                    let mut q = p.clone();
                    q.weights[l] = w.clone();
                    let z = q.predict(x.view()).unwrap();
                    krr::loss(&kind, z.view(), y.view()).unwrap().value
                };
                fd.extend(fd_matrix(&wf, &p.weights[l], H));
                let bf = |b: &Array1<f64>| {
                    let mut q = p.clone();
                    q.biases[l] = b.clone();
                    let z = q.predict(x.view()).unwrap();
                    krr::loss(&kind, z.view(), y.view()).unwrap().value
                };
                fd.extend(fd_vector(&bf, &p.biases[l], H));
            }
            worst = worst.max(rel_err(&flat, &fd));

            let gx = p.input_grads(x.view(), y.view(), &kind).unwrap();
            let xf = |q: &Array2<f64>| {
                let z = p.predict(q.view()).unwrap();
                krr::loss_rows(&kind, z.view(), y.view()).unwrap().0.sum()
            };
            worst = worst.max(rel_err(&gx, &fd_matrix(&xf, &x, H)));
        }
    }
    worst
}
