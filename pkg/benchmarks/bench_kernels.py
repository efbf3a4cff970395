"""Time every hot kernel under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Inputs are sized like one training batch of the default model (k_max=40,
batch 16, 32-wide ECC layers).  Numba compile time is excluded by a warm-up
call.  A final row times one full training epoch with each backend.
"""
from __future__ import annotations

import argparse
import itertools
import json
import platform
import timeit

import numpy as np

from rsg import _accel


def kernel_inputs(rng: np.random.Generator) -> dict[str, tuple]:
    n, ne, d = 16 * 40, 16 * 300, 32
    src, dst = rng.integers(0, n, ne), rng.integers(0, n, ne)
    inv = 1.0 / np.maximum(np.bincount(dst, minlength=n), 1).astype(float)
    W, X = rng.normal(size=(ne, d, d)), rng.normal(size=(n, d))
    G = rng.normal(size=(n, d))
    x = rng.normal(size=(16, 4, 64, 64))
    w = rng.normal(size=(8, 4, 3, 3))
    g = rng.normal(size=(16, 8, 32, 32))
    p = rng.normal(size=200_000)
    poly = np.array([[0, 0], [40, 0], [45, 20], [20, 35], [0, 25.0]])
    M = rng.integers(0, 40, size=(6, 6))
    return {
        "edge_matvec_fwd": (W, X, src, dst, inv, n),
        "edge_matvec_bwd": (G, W, X, src, dst, inv),
        "conv2d_fwd": (x, w, 2, 1),
        "conv2d_bwd": (g, x, w, 2, 1),
        "adam_update": (p, rng.normal(size=p.size), np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8),
        "points_in_polygon": (rng.uniform(-5, 50, 50_000), rng.uniform(-5, 40, 50_000), poly),
        "min_perm_code": (M, np.array(list(itertools.permutations(range(6))))),
    }


def _copy(args):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)


def _time(fn, args, repeat: int) -> float:
    fn(*_copy(args))  # warm-up / compile
    # adam_update mutates in place; each call gets fresh copies.
    return min(timeit.repeat(lambda: fn(*_copy(args)), number=1, repeat=repeat))


def _outputs(fn, args) -> list[np.ndarray]:
    """Returned arrays, or the mutated array arguments for in-place kernels."""
    args = _copy(args)
    res = fn(*args)
    if res is None:
        return [a for a in args if isinstance(a, np.ndarray)]
    return list(res) if isinstance(res, tuple) else [res]


def bench_training(repeat: int) -> dict[str, float]:
    from rsg.graph import RoadSceneGraph
    from rsg.model import VGAE, ModelConfig
    from rsg.roadmap import build_map
    from rsg.rules import extract_scene
    from rsg.sim import ScenarioConfig, simulate
    from rsg.train import TrainConfig, build_samples, fit_standardizer, train

    m = build_map({"preset": "four_way"})
    scenes: list[list[RoadSceneGraph]] = [extract_scene(simulate(m, ScenarioConfig(seed=s, duration=8.0)), m)
                                          for s in range(2)]
    samples = build_samples(scenes, "RSGRN")
    cfg = ModelConfig(k_max=32)
    out = {}
    for name, flag in (("numba", True), ("numpy", False)):
        _accel.set_backend(flag)

        def once():
            model = VGAE.create(cfg, standardizer=fit_standardizer(samples, cfg))
            train(model, samples, TrainConfig(epochs=1, batch_size=16))

        once()
        out[name] = min(timeit.repeat(once, number=1, repeat=max(1, repeat // 5)))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results as JSON")
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    inputs = kernel_inputs(np.random.default_rng(0))
    rows = []
    for name, (nb, py) in _accel.KERNELS.items():
        a = inputs[name]
        t_nb, t_np = _time(nb, a, args.repeat), _time(py, a, args.repeat)
        agree = all(np.allclose(u, v, atol=1e-8) for u, v in zip(_outputs(nb, a), _outputs(py, a)))
        rows.append({"kernel": name, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                     "speedup": t_np / t_nb, "agree": bool(agree)})
    if not args.skip_training:
        t = bench_training(args.repeat)
        rows.append({"kernel": "train_epoch (end to end)", "numba_ms": 1e3 * t["numba"],
                     "numpy_ms": 1e3 * t["numpy"], "speedup": t["numpy"] / t["numba"], "agree": True})
    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  agree")
    for r in rows:
        print(f"{r['kernel']:<26}{r['numba_ms']:>12.3f}{r['numpy_ms']:>12.3f}{r['speedup']:>9.2f}x  {r['agree']}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"python": platform.python_version(), "numpy": np.__version__,
                       "rows": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
