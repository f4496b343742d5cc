use robust_kip::attacks::AttackConfig;
use robust_kip::data::{synth_gaussians, Dataset};
use robust_kip::distill::{self, grad_norm_trace, DistillConfig};
use robust_kip::krr::LossKind;
use robust_kip::ntk::KernelSpec;

fn blobs(seed: u64) -> (Dataset, Dataset) {
    (
        synth_gaussians(40, 3, 6, 0.3, seed).unwrap(),
        synth_gaussians(20, 3, 6, 0.3, seed + 100).unwrap(),
    )
}

fn config(epochs: usize) -> DistillConfig {
    let mut cfg = DistillConfig::new(epochs, 9, AttackConfig::linf(0.1, 0.05, 3));
    cfg.target_batch = Some(30);
    cfg.meta_lr = 1e-2;
    cfg.outer_loss = LossKind::Mse;
    cfg.seed = 5;
    cfg
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn kip_baseline_is_zero_step_distillation() {
    let (train, val) = blobs(1);
    let cfg = config(5);
    let kip = distill::kip_baseline(&train, &val, &KernelSpec::fc(2), &cfg).unwrap();
    let mut manual = cfg.clone();
    manual.validation = Some(cfg.inner.clone());
    manual.inner.steps = 0;
    let direct = distill::distill(&train, &val, &KernelSpec::fc(2), &manual).unwrap();
    assert_eq!(kip.dataset, direct.dataset);
    assert_eq!(kip.history, direct.history);
}

#[test]
fn kip_does_not_lose_clean_accuracy_on_blobs() {
    let (train, val) = blobs(2);
    let mut cfg = config(100);
    cfg.eval_every = 10;
    let out = distill::kip_baseline(&train, &val, &KernelSpec::fc(2), &cfg).unwrap();
    let start = &out.history[0];
    let best = out
        .history
        .iter()
        .find(|r| r.epoch == out.best_epoch)
        .unwrap();
    assert!(
        best.clean_acc >= start.clean_acc,
        "{} < {}",
        best.clean_acc,
        start.clean_acc
    );
}

#[test]
fn frozen_support_gives_constant_trace() {
    let (train, val) = blobs(3);
    let mut cfg = config(6);
    cfg.meta_lr = 0.0;
    cfg.eval_every = 2;
    let out = distill::distill(&train, &val, &KernelSpec::fc(3), &cfg).unwrap();
    let trace = grad_norm_trace(&out.history);
    assert_eq!(trace.len(), 4);
    assert_eq!(
        trace.iter().map(|t| t.0).collect::<Vec<_>>(),
        vec![0, 2, 4, 6]
    );
    assert!(trace.iter().all(|t| t.1.to_bits() == trace[0].1.to_bits()));
}

#[test]
fn early_stopping_respects_patience() {
    let (train, val) = blobs(4);
    let mut cfg = config(60);
    cfg.eval_every = 3;
    cfg.patience = Some(2);
    let out = distill::distill(&train, &val, &KernelSpec::fc(2), &cfg).unwrap();
    assert!(
        out.epochs_run <= out.best_epoch + 2 * 3,
        "ran {} epochs, best {}",
        out.epochs_run,
        out.best_epoch
    );
    assert_eq!(out.history.last().unwrap().epoch, out.epochs_run);
}

#[test]
fn distillation_is_independent_of_thread_count() {
    let (train, val) = blobs(5);
    let cfg = config(4);
    let one = in_pool(1, || {
        distill::distill(&train, &val, &KernelSpec::fc(3), &cfg).unwrap()
    });
    let three = in_pool(3, || {
        distill::distill(&train, &val, &KernelSpec::fc(3), &cfg).unwrap()
    });
    assert_eq!(one.dataset, three.dataset);
    assert_eq!(one.history, three.history);
    assert_eq!(one.best_epoch, three.best_epoch);
}

#[test]
fn support_must_be_balanced() {
    let (train, val) = blobs(6);
    let mut cfg = config(1);
    cfg.support_size = 10;
    assert!(distill::distill(&train, &val, &KernelSpec::fc(2), &cfg).is_err());
}
