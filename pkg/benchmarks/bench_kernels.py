"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--epoch]

Each kernel is run on shapes that occur in desk-scale training (batch 32
to 1000 rows, 4 to 784 columns). ``--epoch`` also times one full training
epoch per backend, which shows how much of a run the kernels account for
(matrix products go through BLAS on both paths).
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fomo import _kernels


def cases(rng):
    logits = rng.normal(size=(1000, 10)).astype(np.float32)
    labels = rng.integers(0, 10, size=1000)
    q = rng.normal(size=(1000, 10)).astype(np.float32)
    delta = rng.normal(size=(1000, 784)).astype(np.float32)
    param = rng.normal(size=(784, 256)).astype(np.float32)
    grad = rng.normal(size=(784, 256)).astype(np.float32)
    vel = np.zeros_like(param)
    images = rng.uniform(size=(256, 28, 28)).astype(np.float32)
    return {
        "xent_rows 1000x10": lambda: _kernels.xent_rows(logits, labels),
        "kl_rows 1000x10": lambda: _kernels.kl_rows(logits, q),
        "project_l2_rows 1000x784": lambda: _kernels.project_l2_rows(delta, 0.5),
        "normalize_rows 1000x784": lambda: _kernels.normalize_rows(delta),
        "sgd_update 784x256": lambda: _kernels.sgd_update(param, grad, vel, 0.01, 0.9, 5e-4),
        "box_blur 256x28x28 k=5": lambda: _kernels.box_blur(images, 5),
    }


def time_backend(name, fn, repeat):
    _kernels.set_backend(name)
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def epoch_seconds(backend: str) -> float:
    from fomo.attacks import AttackConfig
    from fomo.data import make_synthetic
    from fomo.train import TrainConfig, new_state, train_epoch

    _kernels.set_backend(backend)
    data = make_synthetic("blobs", 1800, 4, 0.2, np.random.default_rng(0), spread=0.15, dim=64)
    cfg = TrainConfig(epochs=2, batch_size=32, lr=0.05, lr_decay_epochs=(), weight_decay=0.0, mode="pgd-at",
                      schedule=None, attack=AttackConfig(epsilon=0.01, step_size=0.0025, steps=10), hidden=(512, 512))
    st = new_state(cfg, data.dim, 4)
    train_epoch(st.model, None, data.subset(np.arange(64)), cfg, 1, st.rng, st.velocity)  # warm-up
    t0 = timeit.default_timer()
    train_epoch(st.model, None, data, cfg, 2, st.rng, st.velocity)
    return timeit.default_timer() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true", help="also time one desk-scale training epoch per backend")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    original = _kernels.get_backend()
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    try:
        for label, fn in cases(np.random.default_rng(0)).items():
            nb = time_backend("numba", fn, args.repeat)
            npy = time_backend("numpy", fn, args.repeat)
            print(f"{label:28s} {nb * 1e3:10.3f} {npy * 1e3:10.3f} {npy / nb:7.2f}x")
        if args.epoch:
            nb, npy = epoch_seconds("numba"), epoch_seconds("numpy")
            print(f"{'train epoch (64-512-512-4)':28s} {nb * 1e3:10.1f} {npy * 1e3:10.1f} {npy / nb:7.2f}x")
    finally:
        _kernels.set_backend(original)


if __name__ == "__main__":
    main()
