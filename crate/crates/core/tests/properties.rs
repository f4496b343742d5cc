mod common;

use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng as _;
use robust_kip::attacks::{self, AttackConfig, Norm, SquareConfig};
use robust_kip::data::{decode_distilled, encode_distilled, Dataset};
use robust_kip::eval::{self, Decomposition};
use robust_kip::krr::{KernelMachine, Ridge};
use robust_kip::mlp::{decode_params, encode_params, MlpParams, Parameterization};
use robust_kip::ntk::{ntk_self_block, KernelSpec};
use robust_kip::seed;

use common::{one_hot_labels, symmetric_eigenvalues, uniform};

fn spec(depth: usize, bias: bool) -> KernelSpec {
    KernelSpec {
        depth,
        bias_variance: if bias { 0.1 } else { 0.0 },
        input_scale: None,
    }
}

fn machine(rng: &mut seed::Rng, n: usize, d: usize, k: usize, ridge: f64) -> KernelMachine {
    let mut y = Array2::zeros((n, k));
    for i in 0..n {
        y[[i, if i < k { i } else { rng.random_range(0..k) }]] = 1.0;
    }
    let ds = Dataset::new(uniform(rng, n, d, 0.0, 1.0), y, (0.0, 1.0), false, "s").unwrap();
    KernelMachine::fit(&KernelSpec::fc(3), &ds, Ridge::Fixed(ridge)).unwrap()
}

#[test]
fn jacobi_oracle_recovers_known_spectrum() {
    let mut ev = symmetric_eigenvalues(&array![[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
    ev.sort_by(f64::total_cmp);
    for (a, b) in ev.iter().zip([1.0, 3.0, 5.0]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_matrices_are_symmetric_psd(s in any::<u64>(), n in 2usize..9, d in 2usize..7, depth in 1usize..8, bias in any::<bool>()) {
        let mut rng = seed::rng(s);
        let x = uniform(&mut rng, n, d, 0.0, 1.0);
        let block = ntk_self_block(&spec(depth, bias), x.view()).unwrap();
        for m in [&block.ntk, &block.nngp] {
            let scale = m.diag().iter().cloned().fold(0.0, f64::max);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((m[[i, j]] - m[[j, i]]).abs() <= 1e-12 * scale);
                }
            }
            let low = symmetric_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min);
            prop_assert!(low >= -1e-9 * scale, "eigenvalue {low}");
        }
    }

    #[test]
    fn gradient_attacks_stay_feasible(s in any::<u64>(), eps in 0.0f64..0.5, steps in 1usize..6, l2 in any::<bool>(), start in any::<bool>()) {
        let mut rng = seed::rng(s);
        let km = machine(&mut rng, 6, 5, 3, 1e-3);
        let x = uniform(&mut rng, 4, 5, 0.0, 1.0);
        let y = one_hot_labels(&mut rng, 4, 3);
        let mut cfg = if l2 { AttackConfig::l2(eps, eps / 2.0, steps) } else { AttackConfig::linf(eps, eps / 2.0, steps) };
        cfg.random_start = start;
        cfg.seed = s;
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let mut outputs = vec![attacks::pgd(&km, x.view(), y.view(), &cfg).unwrap()];
        if !l2 {
            outputs.push(attacks::fgsm(&km, x.view(), y.view(), &cfg).unwrap());
        }
        for adv in outputs {
            prop_assert!(attacks::max_perturbation(adv.view(), x.view(), norm) <= eps + 1e-12);
            prop_assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn square_search_is_feasible_and_monotone(s in any::<u64>(), eps in 0.01f64..0.5, image in any::<bool>()) {
        let mut rng = seed::rng(s);
        let km = machine(&mut rng, 6, 16, 3, 1e-3);
        let x = uniform(&mut rng, 4, 16, 0.0, 1.0);
        let y = one_hot_labels(&mut rng, 4, 3);
        let mut cfg = AttackConfig::linf(eps, eps, 0);
        cfg.seed = s;
        let search = SquareConfig { iterations: 30, p_init: 0.8, image: image.then_some((1, 4, 4)) };
        let out = attacks::square_attack_traced(&km, x.view(), y.view(), &cfg, &search, true).unwrap();
        prop_assert!(attacks::max_perturbation(out.adversarial.view(), x.view(), Norm::Linf) <= eps + 1e-12);
        prop_assert!(out.adversarial.iter().all(|v| (0.0..=1.0).contains(v)));
        for pair in out.margins.windows(2) {
            for (a, b) in pair[0].iter().zip(pair[1].iter()) {
                prop_assert!(b <= a);
            }
        }
    }

    #[test]
    fn one_full_step_pgd_is_fgsm(s in any::<u64>(), eps in 0.0f64..0.5) {
        let mut rng = seed::rng(s);
        let km = machine(&mut rng, 6, 5, 3, 1e-3);
        let x = uniform(&mut rng, 4, 5, 0.0, 1.0);
        let y = one_hot_labels(&mut rng, 4, 3);
        let cfg = AttackConfig::linf(eps, eps, 1);
        prop_assert_eq!(attacks::pgd(&km, x.view(), y.view(), &cfg).unwrap(), attacks::fgsm(&km, x.view(), y.view(), &cfg).unwrap());
    }

    #[test]
    fn training_residual_grows_with_ridge(s in any::<u64>(), lo in 1e-6f64..1.0, factor in 1.0f64..100.0) {
        let mut rng = seed::rng(s);
        let x = uniform(&mut rng, 7, 4, 0.0, 1.0);
        let y = one_hot_labels(&mut rng, 7, 3);
        let ds = Dataset::new(x.clone(), y.clone(), (0.0, 1.0), false, "s").unwrap();
        let residual = |r: f64| {
            let km = KernelMachine::fit(&KernelSpec::fc(2), &ds, Ridge::Fixed(r)).unwrap();
            let z = km.predict(x.view()).unwrap() - &y;
            z.iter().map(|v| v * v).sum::<f64>()
        };
        let (a, b) = (residual(lo), residual(lo * factor));
        prop_assert!(b >= a - 1e-9 * a.max(1e-12), "{a} > {b}");
    }

    #[test]
    fn rkds_round_trips_bitwise(s in any::<u64>(), n in 1usize..20, d in 1usize..10, k in 2usize..6, free in any::<bool>()) {
        let mut rng = seed::rng(s);
        let x = uniform(&mut rng, n, d, -1.0, 2.0);
        let y = if free { uniform(&mut rng, n, k, -3.0, 3.0) } else { one_hot_labels(&mut rng, n, k) };
        let ds = Dataset::new(x, y, (-1.0, 2.0), free, format!("set-{s}")).unwrap();
        let bytes = encode_distilled(&ds).unwrap();
        let back = decode_distilled(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_distilled(&back).unwrap(), bytes);
    }

    #[test]
    fn rkmp_round_trips_bitwise(s in any::<u64>(), hidden in proptest::collection::vec(1usize..6, 0..3), ntk in any::<bool>()) {
        let mut widths = vec![3];
        widths.extend(hidden);
        widths.push(2);
        let param = if ntk { Parameterization::Ntk } else { Parameterization::Standard };
        let p = MlpParams::init(&widths, param, 0.1, s).unwrap();
        let bytes = encode_params(&p).unwrap();
        let back = decode_params(&bytes).unwrap();
        prop_assert_eq!(encode_params(&back).unwrap(), bytes);
        let x = Array2::from_elem((2, 3), 0.5);
        prop_assert_eq!(back.predict(x.view()).unwrap(), p.predict(x.view()).unwrap());
    }

    #[test]
    fn refining_bins_never_lowers_ece(s in any::<u64>(), n in 1usize..200, bins in 1usize..20) {
        let mut rng = seed::rng(s);
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..=1.0)).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let (_, coarse) = eval::reliability(&conf, &correct, bins);
        let (_, fine) = eval::reliability(&conf, &correct, 2 * bins);
        prop_assert!(fine >= coarse - 1e-12);
        prop_assert!((0.0..=1.0).contains(&coarse));
    }

    #[test]
    fn decomposition_recombines_exactly(s in any::<u64>(), n in 1usize..100) {
        let mut rng = seed::rng(s);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let c: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let d = Decomposition::new(&v, &c);
        let part = |m: eval::SubsetMean| if m.count == 0 { 0.0 } else { m.count as f64 * m.mean };
        prop_assert_eq!(d.correct.count + d.incorrect.count, n);
        prop_assert!((part(d.correct) + part(d.incorrect) - part(d.all)).abs() <= 1e-12 * part(d.all).max(1.0));
    }
}
