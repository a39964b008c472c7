"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--res 128] [--samples 64] [--repeat 3]

Each case runs once to warm up, then ``--repeat`` times; the best time is
reported. Outputs of the two implementations are compared as a sanity check.
"""
import argparse
import time

import numpy as np

from hybridrender import assets as A
from hybridrender import kernels
from hybridrender import raster as R
from hybridrender.brdf import BrdfParams
from hybridrender.shade import ShadingPoints, shade_mc

NAMES = ("raster_tile", "soft_mask_forward", "soft_mask_backward", "mc_shade")


def use(impl):
    for n in NAMES:
        setattr(kernels, n, getattr(impl, n))


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(res, samples):
    mesh = A.icosphere(4)
    cam = R.Camera.from_degrees([0.3, 0.4, 3.0], [0, 0, 0], [0, 1, 0], 40, res, res)
    g = R.rasterize(mesh, cam, 1e-3)
    pts = ShadingPoints.from_gbuffer(g)
    env = A.sky_env(256, 128, sun_size=0.2)
    params = BrdfParams.constant([0.6, 0.4, 0.3], 0.5, 0.3, 0.2)
    gm = np.random.default_rng(0).standard_normal(g.soft_mask.shape)
    return {
        "rasterize (sigma 1e-9)": lambda: R.rasterize(mesh, cam, 1e-9, 1).barycentrics,
        "soft silhouette": lambda: R.soft_silhouette(mesh, cam, 1e-3),
        "soft mask backward": lambda: R.raster_backward(mesh, g, g_soft_mask=gm)["vertices"],
        f"mc shade ({samples} spp)": lambda: shade_mc(pts, env, params, samples, 0, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=128)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    compiled = kernels._impl
    pure = kernels.python_kernels()
    if compiled is pure:
        print("compiled kernels unavailable; only the numpy fallback can be timed")
    print(f"resolution {args.res}x{args.res}, best of {args.repeat}")
    print(f"{'case':<26} {'cython s':>10} {'numpy s':>10} {'speedup':>8}  max |diff|")
    for name, fn in cases(args.res, args.samples).items():
        use(compiled)
        tc, oc = best_of(fn, args.repeat)
        use(pure)
        tp, op = best_of(fn, args.repeat)
        diff = float(np.max(np.abs(np.asarray(oc, dtype=np.float64) - np.asarray(op, dtype=np.float64))))
        print(f"{name:<26} {tc:>10.4f} {tp:>10.4f} {tp / tc:>7.1f}x  {diff:.2e}")
    use(compiled)


if __name__ == "__main__":
    main()
