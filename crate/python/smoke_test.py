"""Smoke test for the robust_kip extension module.

Run after `maturin develop -m crates/py/Cargo.toml`, or directly against a
cargo build (`cargo build -p robust-kip-py --release`), in which case the
shared library is loaded from target/release.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_module():
    try:
        import robust_kip

        return robust_kip
    except ImportError:
        pass
    for name in ("librobust_kip_py.so", "librobust_kip_py.dylib", "robust_kip_py.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("robust_kip", str(path))
            spec = importlib.util.spec_from_file_location("robust_kip", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["robust_kip"] = module
            return module
    sys.exit("robust_kip not found: build it with cargo build -p robust-kip-py --release")


def main():
    rk = load_module()
    print("robust_kip", rk.__version__)

    data = rk.Dataset.synth(40, 3, 8, 0.8, 7)
    assert len(data) == 120 and data.dim == 8 and data.class_count == 3
    rest, test = data.split(30, 1)
    rest, val = rest.split(30, 2)
    support = rest.sample_balanced(5, 3)
    print(support)

    k, nngp = rk.ntk(support.examples[:4], support.examples[:4], depth=3)
    for i in range(4):
        for j in range(4):
            assert math.isclose(k[i][j], k[j][i], rel_tol=1e-12)
        assert k[i][i] >= nngp[i][i] > 0

    machine = rk.KernelMachine(support, depth=3)
    clean = machine.accuracy(test)
    pgd = json.dumps(
        {"kind": "pgd", "config": {"norm": "linf", "epsilon": 0.1, "alpha": 0.03, "steps": 10}}
    )
    robust = machine.robust_accuracy(test, pgd)
    assert 0.0 <= robust <= clean <= 1.0
    adv = machine.attack(test, pgd)
    worst = max(abs(a - x) for ra, rx in zip(adv, test.examples) for a, x in zip(ra, rx))
    assert worst <= 0.1 + 1e-12
    print(f"kernel: clean {clean:.3f}, pgd {robust:.3f}, max perturbation {worst:.3f}")

    config = json.dumps(
        {
            "epochs": 10,
            "support_size": 15,
            "meta_lr": 1e-2,
            "eval_every": 5,
            "inner": {"norm": "linf", "epsilon": 0.1, "alpha": 0.03, "steps": 3},
            "seed": 0,
        }
    )
    distilled, best, history = rk.distill(rest, val, config)
    assert len(distilled) == 15 and history[0][0] == 0
    print(f"distill: best epoch {best}, history {[(e, round(p, 3)) for e, _, _, p, _ in history]}")

    report = rk.KernelMachine(distilled).diagnose(test, json.dumps([json.loads(pgd)]))
    assert report["n"] == len(test)
    assert math.isclose(sum(report["confidence_histogram"]), len(test))
    print(f"report: clean {report['clean_accuracy']:.3f}, ece {report['ece']:.3f}")

    assert rk.ece([0.9, 0.9], [True, False], 10) == 0.4

    with tempfile.TemporaryDirectory() as tmp:
        path = str(pathlib.Path(tmp) / "support.rkds")
        distilled.save(path)
        back = rk.Dataset.load(path)
        assert back.examples == distilled.examples and back.labels == distilled.labels

    try:
        rk.Dataset.load("/nonexistent/file.rkds")
    except OSError:
        pass
    else:
        raise AssertionError("missing file must raise OSError")
    try:
        machine.robust_accuracy(test, '{"kind": "pgd", "config": {"norm": "linf", "epsilon": -1, "alpha": 0.1, "steps": 1}}')
    except ValueError:
        pass
    else:
        raise AssertionError("invalid attack must raise ValueError")

    print("smoke test OK")


if __name__ == "__main__":
    main()
