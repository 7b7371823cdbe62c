"""Timing comparison of the two fused-kernel backends.

Checks that numpy and numba produce the same losses and gradients on a
reference workload, then times the eval kernel, the train-step kernel,
and a short end-to-end training run under each backend.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --batch 32 256 1024 --repeats 7

Backends are selected explicitly here; the WIFIMODE_NUMBA environment
flag only governs the default dispatch and is ignored by this script.
"""

import argparse
import timeit

import numpy as np

from wifimode import kernels, nn
from wifimode.model import ArchitectureSpec, Model, ModelConfig, init_params
from wifimode.trainer import TrainConfig, train_supervised

ARCH = ArchitectureSpec.from_name("ResNet34")
CONFIG = ModelConfig.from_name("c10")


def make_workload(batch: int, seed: int = 0):
    p = init_params(ARCH, CONFIG.hidden_nodes, seed)
    rng = np.random.default_rng(seed + 1)
    X = rng.random((batch, 15))
    y = np.ascontiguousarray(rng.integers(0, 3, batch), dtype=np.int64)
    return p, X, y


def eval_call(backend, p, X):
    return backend.forward_eval(X, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta,
                                p.run_mean, p.run_var, p.Wo, p.bo,
                                ARCH.layers_per_block, CONFIG.use_batchnorm, True)


def step_call(backend, p, X, y):
    masks = np.empty((0, X.shape[0], p.Wh.shape[1]))
    return backend.forward_backward(
        X, y, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta, p.run_mean, p.run_var,
        p.Wo, p.bo, ARCH.layers_per_block, CONFIG.use_batchnorm, True,
        False, nn.BN_MOMENTUM, masks, 1.0, False)


def check_agreement() -> None:
    p, X, y = make_workload(64)
    results = {}
    for name in kernels.available_backends():
        pc = p.copy()
        res = step_call(kernels._BACKENDS[name], pc, X, y)
        results[name] = res
    if len(results) < 2:
        print("numba unavailable, nothing to compare")
        raise SystemExit(1)
    a, b = results["numpy"], results["numba"]
    assert abs(a[0] - b[0]) <= 1e-12 * abs(a[0]), "loss mismatch"
    assert a[1] == b[1]
    for ga, gb in zip(a[2:], b[2:]):
        np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)
    print(f"backends agree on the reference workload (loss {a[0]:.6f})")


def best_ms(fn, repeats: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeats, number=number)) / number * 1e3


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, nargs="+", default=[32, 256])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--number", type=int, default=20,
                    help="kernel calls per timed sample")
    ap.add_argument("--train-rows", type=int, default=300)
    ap.add_argument("--train-epochs", type=int, default=20)
    args = ap.parse_args()

    check_agreement()

    names = kernels.available_backends()
    rows = []
    for batch in args.batch:
        p, X, y = make_workload(batch)
        for label, call in (("forward_eval", lambda be, pc: eval_call(be, pc, X)),
                            ("train_step", lambda be, pc: step_call(be, pc, X, y))):
            ms = {}
            for name in names:
                be = kernels._BACKENDS[name]
                pc = p.copy()
                call(be, pc)  # numba compiles on first use
                ms[name] = best_ms(lambda: call(be, pc), args.repeats, args.number)
            rows.append((f"{label} batch={batch}", ms))

    rng = np.random.default_rng(7)
    Xt = rng.random((args.train_rows, 15))
    yt = rng.integers(0, 3, args.train_rows)
    tc = TrainConfig(epochs=args.train_epochs, batch_size=32, seed=0)
    ms = {}
    for name in names:
        with kernels.use_backend(name):
            train_supervised(Model.build(CONFIG, ARCH, seed=0), Xt, yt, tc)  # warm
            t0 = timeit.default_timer()
            train_supervised(Model.build(CONFIG, ARCH, seed=0), Xt, yt, tc)
            ms[name] = (timeit.default_timer() - t0) * 1e3
    rows.append((f"train {args.train_epochs} epochs x {args.train_rows} rows", ms))

    width = max(len(r[0]) for r in rows)
    print(f"\nResNet34-c10, per-call milliseconds (best of {args.repeats})")
    header = f"{'workload':<{width}}  " + "".join(f"{n:>12}" for n in names)
    print(header + "     speedup" if len(names) == 2 else header)
    for label, ms in rows:
        line = f"{label:<{width}}  " + "".join(f"{ms[n]:>12.3f}" for n in names)
        if len(names) == 2:
            line += f"{ms['numpy'] / ms['numba']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
