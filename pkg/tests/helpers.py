"""Small scene builders shared by the test modules."""
import numpy as np

from hybridrender import assets as A
from hybridrender import mathkit as mk
from hybridrender import sgalg as sg
from hybridrender.brdf import BrdfParams
from hybridrender.raster import Camera


def random_light(k, seed=0, lam=(2.0, 10.0), amp=(0.2, 1.5)):
    rng = np.random.default_rng(seed)
    return sg.SgEnvLight(mk.normalize(rng.normal(size=(k, 3))), rng.uniform(*lam, k), rng.uniform(*amp, (k, 3)))


def sphere_scene(backend="sg", res=24, k=3, env=False, seed=0, samples=64, sigma=1e-3,
                 material=(0.5, 0.3, 0.2), tex_shape=(4, 8), subdivisions=2, eye=(0.2, 0.3, 3.0)):
    rng = np.random.default_rng(seed)
    mesh = A.icosphere(subdivisions)
    cam = Camera.from_degrees(eye, [0, 0, 0], [0, 1, 0], 45, res, res)
    tex = rng.uniform(0.2, 0.8, tex_shape + (3,))
    brdf = BrdfParams(tex, *material)
    if env:
        light = A.EquirectImage(rng.uniform(0.1, 2.0, (8, 16, 3)))
    else:
        light = random_light(k, seed)
    return A.Scene(mesh, cam, brdf, light, np.array([0.1, 0.2, 0.3]), A.RenderConfig(backend, samples, 0, sigma))


def write_scene_file(path, mesh="icosphere", res=32, backend="sg", samples=16, env_path=None,
                     roughness=0.3, specular=0.5, metalness=0.2, extra=""):
    lines = [
        "[mesh]", "primitive = icosphere", "subdivisions = 2",
        "[camera]", "eye = 0 0.3 3", "lookat = 0 0 0", "up = 0 1 0", "fov_deg = 40",
        f"width = {res}", f"height = {res}",
        "[brdf]", "albedo = 0.6 0.4 0.3", f"specular = {specular}", f"roughness = {roughness}",
        f"metalness = {metalness}",
    ]
    if env_path:
        lines += ["[envmap]", f"path = {env_path}"]
    else:
        lines += ["[sg_light]", "count = 2",
                  "axis.0 = 0 1 0", "sharpness.0 = 4", "amplitude.0 = 1 0.9 0.8",
                  "axis.1 = 0.6 0 0.8", "sharpness.1 = 12", "amplitude.1 = 3 3 3"]
    lines += ["[render]", f"backend = {backend}", f"samples = {samples}"]
    path.write_text("\n".join(lines) + "\n" + extra)
    return path


def write_task_dir(root, free="beta, s", steps=5, backend="sg", res=16, views=2, samples=8):
    """Targets rendered from a known material plus a task file starting elsewhere."""
    from dataclasses import replace

    from hybridrender.shade import render

    root.mkdir(parents=True, exist_ok=True)
    eyes = [(0.0, 0.3, 3.0), (2.5, 0.5, 1.5), (-2.0, 1.0, 2.0), (0.5, -1.0, -2.8)][:views]
    light = ["[sg_light]", "count = 2", "axis.0 = 0 1 0", "sharpness.0 = 4", "amplitude.0 = 1 0.9 0.8",
             "axis.1 = 0.6 0 0.8", "sharpness.1 = 12", "amplitude.1 = 3 3 3"]
    head = ["[mesh]", "primitive = icosphere", "subdivisions = 2",
            "[camera]", "eye = 0 0.3 3", "lookat = 0 0 0", "up = 0 1 0", "fov_deg = 45",
            f"width = {res}", f"height = {res}"]
    truth_path = root / "truth.scene"
    truth_path.write_text("\n".join(head + ["[brdf]", "albedo = 0.6 0.4 0.3", "specular = 0.5", "roughness = 0.1"]
                                    + light + ["[render]", f"backend = {backend}", f"samples = {samples}"]) + "\n")
    truth = A.parse_scene(truth_path)
    lines = head + ["[brdf]", "albedo = 0.6 0.4 0.3", "specular = 0.2", "roughness = 0.4"] + light
    lines += ["[render]", f"backend = {backend}", f"samples = {samples}", "[targets]"]
    for k, eye in enumerate(eyes):
        cam = Camera(eye, [0, 0, 0], [0, 1, 0], truth.camera.fov, res, res)
        out = render(replace(truth, camera=cam), backend, 1)
        A.write_pfm(out.image, root / f"img{k}.pfm")
        A.write_pfm(out.mask, root / f"mask{k}.pfm")
        lines += [f"image.{k} = img{k}.pfm", f"mask.{k} = mask{k}.pfm", "eye.%d = %g %g %g" % ((k,) + eye)]
    if free is not None:
        lines += ["[free]", f"params = {free}"]
    lines += ["[opt]", f"steps = {steps}", "lr.material = 0.05"]
    path = root / "fit.task"
    path.write_text("\n".join(lines) + "\n")
    return path


def cli_outputs(root, threads):
    """Run every subcommand into ``root`` and return ``{relative path: bytes}``."""
    root.mkdir(parents=True, exist_ok=True)
    inputs = root.parent / "inputs"
    if not inputs.exists():
        inputs.mkdir()
        write_scene_file(inputs / "s.scene", res=24)
        write_scene_file(inputs / "mc.scene", res=24, backend="mc", samples=8)
        A.write_pfm(A.sky_env(32, 16).pixels, inputs / "sky.pfm")
        write_task_dir(inputs / "task", steps=3)
    from hybridrender import cli

    t = ["--threads", threads]
    cmds = [
        ["render", inputs / "s.scene", "--out", root / "sg", "--mask", root / "sg_mask.pfm"],
        ["render", inputs / "mc.scene", "--out", root / "mc"],
        ["fit-env", inputs / "sky.pfm", "--k", 4, "--iters", 10, "--out", root / "env"],
        ["optimize", inputs / "task" / "fit.task", "--out", root / "opt"],
        ["compare", root / "sg.pfm", root / "mc.pfm", "--csv", root / "cmp.csv"],
        ["gbuffer", inputs / "s.scene", "--out", root / "gb"],
        ["check-grad", inputs / "s.scene", "--selector", "sg_amplitude[*]", "--csv", root / "grad.csv"],
    ]
    for c in cmds:
        assert cli.main([str(x) for x in c + t]) == 0, c
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
