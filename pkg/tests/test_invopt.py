from dataclasses import replace

import numpy as np
import pytest

from hybridrender import assets as A
from hybridrender import diffgrad as D
from hybridrender import invopt as O
from hybridrender.brdf import BrdfParams
from hybridrender.optim import AdamState, adam_step
from hybridrender.shade import render, subsample_pixels
from helpers import sphere_scene


def test_l1_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(6, 5, 3))
    assert O.loss_image_l1(t, t) == 0.0
    assert O.loss_image_l1(t + 0.1, t) == pytest.approx(0.1, abs=1e-15)
    img = rng.uniform(size=(6, 5, 3))
    mask = np.zeros((6, 5))
    mask[1:5, 1:4] = 1
    pix = subsample_pixels(mask, 0.5, 3)
    explicit = 0.0
    for p in pix:
        r, c = divmod(int(p), 5)
        for ch in range(3):
            explicit += abs(img[r, c, ch] - t[r, c, ch])
    assert O.loss_image_l1(img, t, pix) == pytest.approx(explicit / (3 * len(pix)), rel=1e-14)
    with pytest.raises(ValueError):
        O.loss_image_l1(img, t[:5])


def test_l1_gradient():
    rng = np.random.default_rng(1)
    img, t = rng.uniform(size=(2, 4, 4, 3))
    pix = np.array([0, 5, 5, 9])
    _, g = O.loss_image_l1(img, t, pix, grad=True)
    eps = 1e-7
    for idx in [(0, 0, 1), (1, 1, 2), (2, 1, 0), (3, 3, 0)]:
        p, m = img.copy(), img.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (O.loss_image_l1(p, t, pix) - O.loss_image_l1(m, t, pix)) / (2 * eps)
        assert g[idx] == pytest.approx(num, abs=1e-7)


def test_iou_examples():
    a = (np.random.default_rng(2).uniform(size=(8, 8)) > 0.5).astype(float)
    assert O.loss_iou(a, a) == 0.0
    b = np.zeros((4, 4))
    b[:, :2] = 1
    assert O.loss_iou(b, 1 - b) == 1.0
    assert O.loss_iou(b, np.ones((4, 4))) == 1 - 8 / 16 == 0.5
    with pytest.raises(ValueError):
        O.loss_iou(b, np.ones((3, 4)))


def test_iou_gradient_fd():
    rng = np.random.default_rng(3)
    v, t = rng.uniform(size=(2, 5, 5))
    _, g = O.loss_iou(v, t, grad=True)
    eps = 1e-6
    for idx in [(0, 0), (2, 3), (4, 1)]:
        p, m = v.copy(), v.copy()
        p[idx] += eps
        m[idx] -= eps
        assert g[idx] == pytest.approx((O.loss_iou(p, t) - O.loss_iou(m, t)) / (2 * eps), rel=1e-6)


def test_laplacian_examples():
    mesh = A.icosphere(2)
    assert O.loss_laplacian(mesh, mesh) == 0.0
    assert O.loss_laplacian(mesh.with_vertices(mesh.vertices + [0.3, -1.2, 2.0]), mesh) < 1e-28

    def moved(d):
        v = mesh.vertices.copy()
        v[7] += d * mesh.normals[7]
        return O.loss_laplacian(mesh.with_vertices(v), mesh)

    l1, l2 = moved(1e-3), moved(2e-3)
    assert l1 > 0
    assert l2 / l1 == pytest.approx(4.0, rel=1e-9)
    with pytest.raises(ValueError):
        O.loss_laplacian(A.icosphere(1), mesh)


def test_laplacian_gradient_fd():
    mesh = A.icosphere(1)
    rng = np.random.default_rng(4)
    cur = mesh.with_vertices(mesh.vertices + 0.05 * rng.normal(size=mesh.vertices.shape))
    _, g = O.loss_laplacian(cur, mesh, grad=True)
    eps = 1e-6
    for i, j in [(0, 0), (5, 2), (11, 1)]:
        vp, vm = cur.vertices.copy(), cur.vertices.copy()
        vp[i, j] += eps
        vm[i, j] -= eps
        num = (O.loss_laplacian(cur.with_vertices(vp), mesh) - O.loss_laplacian(cur.with_vertices(vm), mesh)) / (2 * eps)
        assert g[i, j] == pytest.approx(num, rel=1e-6)


def test_ncc_examples():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 3, (16, 32, 3))
    assert O.metric_ncc(a, a) == 0.0
    assert O.metric_ncc(a, 2 * a) == 0.0
    assert O.metric_ncc(0.25 * a, a) == 0.0
    assert O.metric_ncc(a, 3.7 * a) == pytest.approx(0.0, abs=1e-15)
    b = np.zeros_like(a)
    c = np.zeros_like(a)
    b[:8] = a[:8]
    c[8:] = a[8:]
    assert O.metric_ncc(b, c) == 1.0
    assert 0.0 <= O.metric_ncc(a, rng.uniform(size=a.shape)) <= 1.0
    with pytest.raises(ValueError):
        O.metric_ncc(np.zeros_like(a), a)
    sel = np.zeros((16, 32), dtype=bool)
    sel[:8] = True
    assert O.metric_ncc(b, a, sel) == 0.0


def test_default_weights():
    w = O.LossWeights()
    assert (w.im, w.msk, w.per, w.lap) == (20, 5, 0.5, 5)
    O.clear_perceptual()
    assert w.effective().per == 0.0
    with pytest.raises(ValueError):
        O.LossWeights(im=-1)


def _hard_views(scene, cams):
    outs, targets = [], []
    for cam in cams:
        out = render(replace(scene, camera=cam), "sg", 1)
        outs.append(out)
        targets.append(O.Target(out.image, out.mask, cam))
    return outs, targets


def _cams(res=16):
    from hybridrender.raster import Camera

    return [Camera.from_degrees(e, [0, 0, 0], [0, 1, 0], 45, res, res) for e in ([0, 0.3, 3], [2.5, 0.5, 1.5])]


def test_total_loss_weighted_sum():
    scene = sphere_scene("sg", sigma=1e-14)
    outs, targets = _hard_views(scene, _cams())
    assert set(np.unique(outs[0].mask)) <= {0.0, 1.0}
    v, terms, _ = O.total_loss(scene, outs, targets, O.LossWeights(20, 5, 0, 5), scene.mesh)
    assert v == 0.0 and all(x == 0.0 for x in terms.values())
    shifted = [O.Target(t.image - 0.1, t.mask, t.camera) for t in targets]
    v, terms, _ = O.total_loss(scene, outs, shifted, O.LossWeights(20, 5, 0, 5), scene.mesh)
    assert terms["l_im"] == pytest.approx(0.1, abs=1e-12) and terms["l_msk"] == 0.0
    assert v == pytest.approx(2.0, abs=1e-10)


def test_total_loss_amplitude_gradient_fd():
    truth = sphere_scene("sg", k=3, seed=0)
    cams = _cams()
    _, targets = _hard_views(truth, cams)
    light = truth.lighting
    scene = replace(truth, lighting=type(light)(light.axes, light.sharpness, 1.3 * light.amplitude + 0.05))

    def evaluate(sc):
        outs = [render(replace(sc, camera=c), "sg", 1) for c in cams]
        return O.total_loss(sc, outs, targets, initial_mesh=truth.mesh)

    _, _, grad = evaluate(scene)
    params = D.ParamSet.from_scene(scene)
    eps = 1e-4
    for idx in [(0, 0), (1, 2), (2, 1)]:
        vp = evaluate(params.perturbed("sg_amplitude", idx, eps).apply(scene))[0]
        vm = evaluate(params.perturbed("sg_amplitude", idx, -eps).apply(scene))[0]
        assert grad.lookup("sg_amplitude", idx) == pytest.approx((vp - vm) / (2 * eps), rel=1e-4)


def test_perceptual_plugin_enters_with_weight():
    scene = sphere_scene("sg", sigma=1e-14)
    outs, targets = _hard_views(scene, _cams()[:1])
    O.register_perceptual(lambda img, tgt: (0.4, np.zeros_like(img)))
    try:
        v, terms, _ = O.total_loss(scene, outs, targets)
        assert terms["l_per"] == 0.4 and v == pytest.approx(0.5 * 0.4)
    finally:
        O.clear_perceptual()


def test_adam_zero_gradient():
    p = {"x": np.array([1.0, -2.0])}
    st = AdamState()
    new, st = adam_step(p, {"x": np.zeros(2)}, st, 0.1)
    np.testing.assert_array_equal(new["x"], p["x"])
    assert st.t == 1


def test_adam_first_step_by_hand():
    g = np.array([0.5, -2.0, 1e-3])
    st = AdamState()
    new, _ = adam_step({"x": np.zeros(3)}, {"x": g}, st, 0.1)
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    np.testing.assert_allclose(m_hat, g, rtol=1e-15)
    np.testing.assert_allclose(new["x"], -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-15)
    np.testing.assert_allclose(new["x"], -0.1 * np.sign(g), rtol=1e-5)
    with pytest.raises(ValueError):
        adam_step({"x": np.zeros(3)}, {"x": np.zeros(2)}, AdamState(), 0.1)


def test_adam_unit_step_under_constant_gradient():
    x = {"x": np.array([0.0])}
    st = AdamState()
    xs = [0.0]
    for _ in range(100):
        x, st = adam_step(x, {"x": np.array([3.0])}, st, 0.01)
        xs.append(float(x["x"][0]))
    steps = -np.diff(xs)
    assert np.all(steps > 0)
    np.testing.assert_allclose(steps[10:], 0.01, rtol=1e-6)


def _task(free, steps=5, lr=None, backend="sg", **kw):
    truth = sphere_scene(backend, res=16, material=(0.5, 0.1, 0.0), env=(backend == "mc"))
    _, targets = _hard_views(truth, _cams()) if backend == "sg" else (None, [
        O.Target(o.image, o.mask, c) for o, c in
        ((render(replace(truth, camera=c), "mc", 1), c) for c in _cams())])
    init = replace(truth, brdf=BrdfParams(truth.brdf.albedo_texture, 0.2, 0.4, 0.0))
    task = O.OptimizeTask(targets, free, steps=steps, lr=lr or {}, backend=backend, threads=1, **kw)
    return init, task


def test_optimize_lr_zero_is_bitwise_identity():
    init, task = _task(("roughness", "specular", "lighting"), steps=4, lr={"material": 0.0, "lighting": 0.0})
    res = O.optimize(task, init)
    assert res.scene.brdf.roughness == init.brdf.roughness
    assert res.scene.brdf.specular == init.brdf.specular
    np.testing.assert_array_equal(res.scene.lighting.amplitude, init.lighting.amplitude)
    np.testing.assert_array_equal(res.scene.lighting.axes, init.lighting.axes)
    assert len(set(res.losses)) == 1


def test_optimize_reduces_loss_and_keeps_feasible():
    init, task = _task(("beta", "s"), steps=100, lr={"material": 0.05})
    res = O.optimize(task, init)
    assert len(res.trace) == 101 and res.trace[0]["step"] == 0
    assert min(res.losses) <= res.losses[0]
    # the soft-mask term keeps the loss above 0 even at the truth
    assert res.scene.brdf.roughness == pytest.approx(0.1, abs=0.01)
    assert res.scene.brdf.specular == pytest.approx(0.5, abs=0.02)
    assert 0 < res.scene.brdf.roughness < 1 and 0 < res.scene.brdf.specular < 1
    assert len(res.before) == len(res.after) == 2


def test_optimize_mc_subsampled_runs():
    init, task = _task(("beta",), steps=3, backend="mc", samples=4, subsample=0.1)
    res = O.optimize(task, init)
    assert all(np.isfinite(res.losses))


def test_task_validation():
    init, task = _task((), steps=1)
    with pytest.raises(ValueError, match="empty"):
        O.optimize(task, init)
    init, task = _task(("nosuch",), steps=1)
    with pytest.raises(ValueError):
        O.optimize(task, init)
    init, task = _task(("env",), steps=1)
    with pytest.raises(ValueError):
        O.optimize(task, init)


def test_non_finite_loss_names_step():
    init, task = _task(("beta",), steps=3)
    O.register_perceptual(lambda img, tgt: (float("nan"), np.zeros_like(img)))
    try:
        with pytest.raises(O.OptimizationError, match="step 0"):
            O.optimize(task, init)
    finally:
        O.clear_perceptual()


def test_parse_task_file(tmp_path):
    truth = sphere_scene("sg", res=16)
    cams = _cams()
    _, targets = _hard_views(truth, cams)
    lines = ["[mesh]", "primitive = icosphere", "subdivisions = 2",
             "[camera]", "eye = 0 0.3 3", "lookat = 0 0 0", "up = 0 1 0", "fov_deg = 45", "width = 16", "height = 16",
             "[envmap]", "color = 1 1 1", "[targets]"]
    for k, (t, c) in enumerate(zip(targets, cams)):
        A.write_pfm(t.image, tmp_path / f"img{k}.pfm")
        A.write_pfm(np.repeat(t.mask[..., None], 3, axis=2), tmp_path / f"msk{k}.pfm")
        lines += [f"image.{k} = img{k}.pfm", f"mask.{k} = msk{k}.pfm", f"eye.{k} = {' '.join(map(str, c.eye))}"]
    lines += ["[free]", "params = beta, s", "[opt]", "steps = 7", "lr.roughness = 0.02", "[loss]", "lap = 0"]
    p = tmp_path / "t.task"
    p.write_text("\n".join(lines) + "\n")
    scene, task = O.parse_task(p)
    assert task.steps == 7 and task.free == ("beta", "s") and len(task.targets) == 2
    assert task.learning_rate("roughness") == 0.02 and task.learning_rate("specular") == 0.005
    assert task.learning_rate("sg_amplitude") == 0.01
    assert task.weights.lap == 0 and task.weights.im == 20
    np.testing.assert_allclose(task.targets[1].camera.eye, cams[1].eye)
    np.testing.assert_allclose(task.targets[0].image, targets[0].image, rtol=1e-6)
    (tmp_path / "bad.task").write_text(p.read_text() + "[opt]\nbogus = 1\n")
    with pytest.raises(A.AssetError):
        O.parse_task(tmp_path / "bad.task")


def test_lit_texels_cover_reflections():
    scene = sphere_scene("mc", res=16, env=True)
    seen = O.lit_texels(scene, [c for c in _cams()], 32, 16)
    assert seen.shape == (16, 32) and 0 < seen.sum() < seen.size


def test_optimize_leaves_fixed_blocks_bitwise():
    init, task = _task(("beta",), steps=3, lr={"material": 0.05})
    res = O.optimize(task, init)
    assert res.scene.brdf.roughness != init.brdf.roughness
    assert res.scene.brdf.metalness == init.brdf.metalness == 0.0
    assert res.scene.brdf.specular == init.brdf.specular
    np.testing.assert_array_equal(res.scene.brdf.albedo_texture, init.brdf.albedo_texture)
    assert res.scene.lighting is init.lighting
