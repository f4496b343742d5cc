use robust_kip::attacks::{robust_accuracy, Attack, AttackConfig};
use robust_kip::data::{load_mnist, synth_gaussians, SplitSpec};
use robust_kip::krr::LossKind;
use robust_kip::mlp::{self, clean_accuracy, MlpConfig, MlpOptimizer, TRANSFER_LR_GRID};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn separable_blobs_are_fit() {
    let train = synth_gaussians(50, 2, 6, 0.5, 1).unwrap();
    let val = synth_gaussians(20, 2, 6, 0.5, 2).unwrap();
    let cfg = MlpConfig::new(vec![32], MlpOptimizer::Adam { lr: 1e-2 }, 20, 200);
    let out = mlp::train(&cfg, &train, &val).unwrap();
    assert!(clean_accuracy(&out.params, &train, None).unwrap() >= 0.99);
    assert!(!out.diverged);
}

#[test]
fn zero_budget_adversarial_training_is_plain_training() {
    let train = synth_gaussians(30, 3, 6, 0.3, 3).unwrap();
    let val = synth_gaussians(10, 3, 6, 0.3, 4).unwrap();
    let mut cfg = MlpConfig::new(vec![16, 16], MlpOptimizer::Sgd { lr: 0.05 }, 16, 10);
    cfg.seed = 9;
    let plain = mlp::train(&cfg, &train, &val).unwrap();
    let adv = mlp::adv_train(&cfg, &train, &val, &AttackConfig::linf(0.0, 0.01, 3)).unwrap();
    assert_eq!(plain.params, adv.params);
    assert_eq!(format!("{:?}", plain.history), format!("{:?}", adv.history));
}

#[test]
fn training_is_independent_of_thread_count() {
    let train = synth_gaussians(40, 2, 8, 0.3, 5).unwrap();
    let val = synth_gaussians(10, 2, 8, 0.3, 6).unwrap();
    let cfg = MlpConfig::new(vec![64, 64], MlpOptimizer::Adam { lr: 1e-3 }, 16, 5);
    let attack = AttackConfig::linf(0.05, 0.02, 3);
    let one = in_pool(1, || mlp::adv_train(&cfg, &train, &val, &attack).unwrap());
    let three = in_pool(3, || mlp::adv_train(&cfg, &train, &val, &attack).unwrap());
    assert_eq!(one.params, three.params);
}

#[test]
fn transfer_matches_manual_grid_search() {
    let train = synth_gaussians(30, 2, 6, 0.2, 7).unwrap();
    let val = synth_gaussians(20, 2, 6, 0.2, 8).unwrap();
    let test = synth_gaussians(20, 2, 6, 0.2, 9).unwrap();
    let mut cfg = MlpConfig::new(vec![16], MlpOptimizer::Adam { lr: 1.0 }, 10, 15);
    cfg.eval_every = 5;
    let attacks = [
        Attack::Clean,
        Attack::Pgd {
            config: AttackConfig::linf(0.05, 0.02, 5),
        },
    ];
    let rep = mlp::transfer_eval(&train, &cfg, &val, &test, &attacks).unwrap();
    assert_eq!(rep.accuracies.len(), attacks.len());
    assert!(TRANSFER_LR_GRID.contains(&rep.lr));

    let manual = MlpConfig {
        optimizer: MlpOptimizer::Adam { lr: rep.lr },
        ..cfg.clone()
    };
    let out = mlp::train(&manual, &train, &val).unwrap();
    assert_eq!(out.params, rep.params);
    for (a, (name, acc)) in attacks.iter().zip(&rep.accuracies) {
        assert_eq!(&a.name(), name);
        assert_eq!(robust_accuracy(&out.params, &test, a).unwrap(), *acc);
    }
}

#[test]
fn adversarial_training_beats_plain_training_on_mnist() {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let all = load_mnist(
        dir.join("mnist5k-images-idx3-ubyte.gz"),
        dir.join("mnist5k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let (rest, val) = SplitSpec {
        train_fraction: 1.0,
        validation_count: 200,
        seed: 0,
    }
    .split(&all)
    .unwrap();
    let train = rest
        .select(&(0..1000).collect::<Vec<_>>(), "mnist-1000")
        .unwrap();
    let attack = AttackConfig::linf(0.1, 0.025, 5);
    let mut cfg = MlpConfig::new(vec![128], MlpOptimizer::Adam { lr: 1e-3 }, 50, 10);
    cfg.loss = LossKind::Ce;
    cfg.selection = Some(attack.clone());
    cfg.eval_every = 5;
    let plain = mlp::train(&cfg, &train, &val).unwrap();
    let adv = mlp::adv_train(&cfg, &train, &val, &attack).unwrap();
    let best = |o: &mlp::TrainOutcome| {
        o.history
            .iter()
            .find(|h| h.epoch == o.best_epoch)
            .unwrap()
            .val_robust
    };
    assert!(
        best(&adv) >= best(&plain),
        "adv {} < plain {}",
        best(&adv),
        best(&plain)
    );
}
