"""Command-line entry point: ``hybridrender <subcommand> ...``.

Exit codes: 0 success, 1 failure (bad input, I/O, usage), 2 a gradient
check outside tolerance.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import assets as A
from . import diffgrad as D
from . import invopt as I
from . import kernels
from . import sgalg as sg
from .raster import rasterize
from .shade import default_threads, render

log = logging.getLogger("hybridrender")

EXIT_OK, EXIT_FAIL, EXIT_TOLERANCE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _common_flags(p, threads_default, verbose_default):
    # accepted both before and after the subcommand
    p.add_argument("--threads", type=_positive_int, default=threads_default,
                   help="worker threads (default: $HYBRIDRENDER_THREADS or all cores); never changes results")
    p.add_argument("-v", "--verbose", action="store_true", default=verbose_default, help="log progress to stderr")


def build_parser():
    p = _Parser(prog="hybridrender", description=__doc__.splitlines()[0])
    _common_flags(p, None, False)
    common = _Parser(add_help=False)
    _common_flags(common, argparse.SUPPRESS, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", parents=[common], help="render a scene to PNG and PFM")
    r.add_argument("scene", help="scene file")
    r.add_argument("--out", required=True, help="output prefix; writes <out>.png and <out>.pfm")
    r.add_argument("--backend", choices=("mc", "sg"), help="override the scene's shading backend")
    r.add_argument("--samples", type=_positive_int, help="override the MC sample count")
    r.add_argument("--seed", type=int, help="override the MC seed")
    r.add_argument("--mask", help="also write the soft silhouette to this PFM path")

    f = sub.add_parser("fit-env", parents=[common], help="fit an SG mixture to an HDR environment map")
    f.add_argument("hdr", help="equirectangular map (.pfm or .hdr)")
    f.add_argument("--k", type=_positive_int, default=A.SCENE_DEFAULT_K, help="number of lobes")
    f.add_argument("--iters", type=int, default=500, help="Adam iterations")
    f.add_argument("--lr", type=_positive_float, default=0.05, help="Adam learning rate")
    f.add_argument("--out", required=True, help="output prefix; writes <out>.sg, <out>_preview.pfm, <out>_trace.csv")
    f.add_argument("--preview-width", type=_positive_int, default=None, help="preview width (default: input width)")

    o = sub.add_parser("optimize", parents=[common], help="fit scene parameters to target views")
    o.add_argument("task", help="task file: scene sections plus [targets], [free], [opt], [loss]")
    o.add_argument("--out", required=True, help="output directory")
    o.add_argument("--steps", type=int, help="override the step count")

    c = sub.add_parser("compare", parents=[common], help="compare two images, masks or environment maps")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--metric", choices=("all", "l1", "iou", "ncc"), default="all", help="metric to report")
    c.add_argument("--csv", help="also write the metrics as CSV to this path")

    g = sub.add_parser("gbuffer", parents=[common], help="dump G-buffer channels as PFM layers")
    g.add_argument("scene", help="scene file")
    g.add_argument("--out", required=True, help="output directory")

    k = sub.add_parser("check-grad", parents=[common], help="compare analytic and finite-difference gradients")
    k.add_argument("scene", help="scene file")
    k.add_argument("--backend", choices=("mc", "sg"), help="override the scene's shading backend")
    k.add_argument("--selector", required=True,
                   help="parameter pattern, e.g. 'albedo[0,0,*]', 'roughness', 'sg_axis[0,t1]', 'vertices[3,?]'")
    k.add_argument("--eps", type=_positive_float, default=1e-4, help="central-difference step")
    k.add_argument("--tol", type=_positive_float, default=1e-4, help="relative error tolerance")
    k.add_argument("--limit", type=_positive_int, default=None, help="check at most this many parameters")
    k.add_argument("--seed", type=int, default=0, help="seed of the random linear probe")
    k.add_argument("--csv", help="also write the report as CSV to this path")
    return p


def _print_config(pairs):
    for key, value in pairs:
        print(f"{key} = {value}")
    sys.stdout.flush()


def _fmt(x):
    return repr(float(x))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def cmd_render(args, threads):
    scene = A.parse_scene(args.scene)
    cfg = scene.config
    backend = args.backend or cfg.backend
    samples = args.samples or cfg.samples
    seed = cfg.seed if args.seed is None else args.seed
    _print_config([
        ("command", "render"), ("scene", args.scene), ("backend", backend), ("samples", samples),
        ("seed", seed), ("sigma", cfg.sigma), ("resolution", f"{scene.camera.width}x{scene.camera.height}"),
        ("threads", threads), ("kernels", kernels.BACKEND), ("out", args.out),
    ])
    t0 = time.perf_counter()
    out = render(scene, backend, threads, samples=samples, seed=seed)
    dt = time.perf_counter() - t0
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    A.write_image(out.image, f"{prefix}.png")
    A.write_image(out.image, f"{prefix}.pfm")
    if args.mask:
        A.write_pfm(out.mask, args.mask)
    shaded = out.samples[out.gbuffer.visibility]
    print(f"render time: {dt:.3f} s")
    if backend == "mc" and shaded.size:
        print(f"samples per pixel: min {shaded.min()} max {shaded.max()} mean {shaded.mean():.1f} "
              f"over {shaded.size} shaded pixels")
    else:
        print(f"samples per pixel: 0 (closed form) over {int(out.gbuffer.visibility.sum())} shaded pixels")
    print(f"wrote {prefix}.png {prefix}.pfm" + (f" {args.mask}" if args.mask else ""))
    return EXIT_OK


def cmd_fit_env(args, threads):
    if args.iters < 0:
        raise UsageError("fit-env: --iters must be >= 0")
    env = A.load_hdr(args.hdr)
    _print_config([
        ("command", "fit-env"), ("hdr", args.hdr), ("size", f"{env.width}x{env.height}"), ("k", args.k),
        ("iters", args.iters), ("lr", args.lr), ("out", args.out),
    ])
    trace = []
    init_loss = sg.fit_loss(sg.fit_env_sg(env, args.k, 0), env)[0]
    light = sg.fit_env_sg(env, args.k, args.iters, args.lr, trace=trace)
    final, rel = sg.fit_loss(light, env)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    _write_text(f"{prefix}.sg", A.format_sg_light(light))
    pw = args.preview_width or env.width
    ph = max(1, pw // 2) if args.preview_width else env.height
    A.write_pfm(sg.sg_env_to_equirect(light, pw, ph).pixels, f"{prefix}_preview.pfm")
    rows = [(i, _fmt(v)) for i, v in enumerate(trace)]
    _write_text(f"{prefix}_trace.csv", _csv_text(("iteration", "loss"), rows))
    print(f"parameters: {light.parameter_count} (dense map: {sg.equirect_param_count(env.width, env.height)})")
    print(f"initial loss: {init_loss:.6g}")
    print(f"final loss: {final:.6g} (relative L2 {rel:.4g})")
    print(f"wrote {prefix}.sg {prefix}_preview.pfm {prefix}_trace.csv")
    return EXIT_OK


def cmd_optimize(args, threads):
    scene, task = I.parse_task(args.task)
    if args.steps is not None:
        task.steps = args.steps
    task.threads = threads
    _print_config([
        ("command", "optimize"), ("task", args.task), ("backend", task.backend), ("views", len(task.targets)),
        ("free", ",".join(task.free) or "(none)"), ("steps", task.steps), ("samples", task.samples),
        ("seed", task.seed), ("subsample", task.subsample),
        ("weights", f"im={task.weights.im} msk={task.weights.msk} per={task.weights.effective().per} "
                    f"lap={task.weights.lap}"),
        ("lr", ",".join(f"{k}={v}" for k, v in sorted(task.lr.items())) or "defaults"),
        ("threads", threads), ("out", args.out),
    ])
    task.validate()
    t0 = time.perf_counter()
    res = I.optimize(task, scene)
    dt = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    A.save_scene(res.scene, out / "fitted.scene")
    rows = [(r["step"], _fmt(r["loss"]), _fmt(r["l_im"]), _fmt(r["l_msk"]), _fmt(r["l_lap"])) for r in res.trace]
    _write_text(out / "trace.csv", _csv_text(("step", "loss", "l_im", "l_msk", "l_lap"), rows))
    for k, (b, a) in enumerate(zip(res.before, res.after)):
        A.write_image(b, out / f"before_{k}.png")
        A.write_image(a, out / f"after_{k}.png")
    losses = res.losses
    b = res.scene.brdf
    print(f"optimize time: {dt:.3f} s")
    print(f"loss: initial {losses[0]:.6g} final {losses[-1]:.6g} best {min(losses):.6g}")
    print(f"material: specular {b.specular:.6g} roughness {b.roughness:.6g} metalness {b.metalness:.6g}")
    print(f"wrote {out / 'fitted.scene'} {out / 'trace.csv'} and {2 * len(res.before)} PNGs")
    return EXIT_OK


def _load_any(path):
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix in (".pfm", ".hdr"):
        data = A.load_hdr(p).pixels if suffix == ".hdr" else A.read_pfm(p)
    else:
        data = A.read_image(p)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    return data


def cmd_compare(args, threads):
    a, b = _load_any(args.a), _load_any(args.b)
    _print_config([("command", "compare"), ("a", args.a), ("b", args.b), ("metric", args.metric)])
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    rows = []
    want = ("l1", "iou", "ncc") if args.metric == "all" else (args.metric,)
    is_mask = a.ndim == 2 and b.ndim == 2
    for name in want:
        if name == "l1":
            rows.append(("l1", I.loss_image_l1(a, b)))
        elif name == "iou":
            ma = a if is_mask else a.mean(axis=-1)
            mb = b if is_mask else b.mean(axis=-1)
            if is_mask or args.metric == "iou":
                rows.append(("iou", I.loss_iou(np.clip(ma, 0, 1), np.clip(mb, 0, 1))))
        elif name == "ncc":
            try:
                rows.append(("ncc", I.metric_ncc(np.maximum(a, 0), np.maximum(b, 0))))
            except ValueError as exc:
                if args.metric == "ncc":
                    raise
                log.warning("ncc skipped: %s", exc)
    width = max(len(r[0]) for r in rows)
    for name, v in rows:
        print(f"{name.upper():<{width}}  {v:.9g}")
    text = _csv_text(("metric", "value"), [(n, _fmt(v)) for n, v in rows])
    print(text, end="")
    if args.csv:
        _write_text(args.csv, text)
    return EXIT_OK


def cmd_gbuffer(args, threads):
    scene = A.parse_scene(args.scene)
    _print_config([
        ("command", "gbuffer"), ("scene", args.scene), ("sigma", scene.config.sigma),
        ("resolution", f"{scene.camera.width}x{scene.camera.height}"), ("out", args.out),
    ])
    g = rasterize(scene.mesh, scene.camera, scene.config.sigma, threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for name, layer in g.channels().items():
        A.write_pfm(layer, out / f"{name}.pfm")
        names.append(f"{name}.pfm")
    print(f"covered pixels: {int(g.visibility.sum())}")
    print("wrote " + " ".join(names))
    return EXIT_OK


def cmd_check_grad(args, threads):
    scene = A.parse_scene(args.scene)
    backend = args.backend or scene.config.backend
    _print_config([
        ("command", "check-grad"), ("scene", args.scene), ("backend", backend), ("selector", args.selector),
        ("eps", args.eps), ("tol", args.tol), ("samples", scene.config.samples), ("seed", args.seed),
        ("threads", threads),
    ])
    probe = D.LinearObjective.random(scene.camera, args.seed)
    try:
        reports = D.finite_diff_check(scene, backend, args.selector, args.eps, probe, args.tol, threads, args.limit)
    except KeyError as exc:
        raise ValueError(str(exc).strip("'\"")) from None
    print(D.format_reports(reports))
    rows = [(r.label, _fmt(r.analytic), _fmt(r.numeric), _fmt(r.rel_error), int(r.passed)) for r in reports]
    text = _csv_text(("parameter", "analytic", "numeric", "rel_error", "passed"), rows)
    if args.csv:
        _write_text(args.csv, text)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} within tolerance {args.tol:g}")
    return EXIT_TOLERANCE if failed else EXIT_OK


COMMANDS = {
    "render": cmd_render,
    "fit-env": cmd_fit_env,
    "optimize": cmd_optimize,
    "compare": cmd_compare,
    "gbuffer": cmd_gbuffer,
    "check-grad": cmd_check_grad,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or default_threads()
    try:
        return COMMANDS[args.command](args, threads)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (A.AssetError, ValueError, OSError, I.OptimizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
