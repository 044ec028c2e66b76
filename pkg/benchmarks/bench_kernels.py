"""Compare the compiled kernels against the numpy fallback.

Times each hot kernel on both backends at one problem size, checks that the
two agree, and prints one row per kernel::

    python benchmarks/bench_kernels.py [--scale 1.0] [--repeat 3] [--json out.json]
"""

import argparse
import json
import sys
import time

import numpy as np

from lgrnet import kernels
from lgrnet.lgr import GridSpec, voxel_coordinates


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(scale, rng):
    n = max(64, int(4096 * scale))
    m = max(8, int(512 * scale))
    coords = rng.uniform(-1, 1, (n, 3))
    cents = coords[:m].copy()
    lc = rng.uniform(-1, 1, (m, 32, 3))
    feats = rng.normal(size=(m, 32, 8))
    grid = GridSpec()
    vox = np.ascontiguousarray(voxel_coordinates(grid).reshape(-1, 3))
    agg = kernels.AGG_INTERPOLATION

    def render_bwd(be):
        vals, wsum = be.render_forward(lc, feats, vox, grid.r, 1.0, agg)
        g = np.ones_like(vals)
        return lambda: be.render_backward(lc, feats, vox, grid.r, 1.0, agg, vals, wsum, g, True)

    x = rng.normal(size=(m // 4, 5, 5, 5, 16))

    def im2col(be):
        out = np.empty((x.shape[0] * 125, 27 * 16))
        return lambda: (be.im2col3d(x, 3, 1, out), out.copy())[1]

    return {
        "fps": lambda be: (lambda: be.fps(coords, m, 0)),
        "query": lambda be: (lambda: be.query(coords, cents, 0.2, 32, 7,
                                              kernels.METRIC_CHEBYSHEV)),
        "render_forward": lambda be: (lambda: be.render_forward(lc, feats, vox, grid.r, 1.0, agg)),
        "render_backward": render_bwd,
        "im2col3d": im2col,
    }


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-12)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    p.add_argument("--repeat", type=int, default=3, help="timed runs per kernel (best kept)")
    p.add_argument("--json", help="also write the results here")
    args = p.parse_args(argv)
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; only the numpy fallback is available",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = {}
    print(f"{'kernel':<16} {'python s':>10} {'compiled s':>11} {'speedup':>8}  agree")
    for name, make in cases(args.scale, rng).items():
        t_py, out_py = best_time(make(kernels.get_backend("python")), args.repeat)
        t_c, out_c = best_time(make(kernels.get_backend("compiled")), args.repeat)
        ok = agree(out_py, out_c)
        rows[name] = {"python": t_py, "compiled": t_c, "speedup": t_py / t_c, "agree": ok}
        print(f"{name:<16} {t_py:>10.4f} {t_c:>11.4f} {t_py / t_c:>7.1f}x  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
    return 0 if all(r["agree"] for r in rows.values()) else 2


if __name__ == "__main__":
    sys.exit(main())
