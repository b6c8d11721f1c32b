import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from fedring.datagen import make_blobimg, make_gauss2d
from fedring.models import discriminator_spec, generator_spec
from fedring.numerics import ParamVector
from fedring.perceptual import PerceptualDistance
from fedring.pp_gan import (
    GanTrainConfig,
    ModeCollapseError,
    discriminator_grads,
    discriminator_loss_from_probs,
    dumps_gan_state,
    generator_grads,
    generator_loss_from_probs,
    load_gan_state,
    loads_gan_state,
    loss_discriminator,
    loss_generator,
    loss_privacy,
    privacy_term_and_grad,
    sample_buffer,
    save_gan_state,
    train_gan,
    write_log_csv,
)
from fedring.transport.wire import WireError

from helpers import directional_rel_error, fd_coords, fd_rel_error

IMG = (1, 16, 16)
LN2 = math.log(2)


# closed forms ----------------------------------------------------------------


def test_discriminator_loss_closed_forms():
    assert abs(discriminator_loss_from_probs([0.5] * 4, [0.5] * 4) - 2 * LN2) < 1e-12
    assert abs(discriminator_loss_from_probs([0.9] * 3, [0.1] * 3) - 0.21072103131565253) < 1e-12
    assert abs(discriminator_loss_from_probs([1.0], [0.0]) - 2e-7) < 1e-12


def test_generator_loss_closed_forms():
    assert generator_loss_from_probs([0.5] * 8) == -0.5
    assert abs(generator_loss_from_probs([1.0]) + 1) < 1e-6
    assert abs(generator_loss_from_probs([0.2, 0.8]) + 0.5) < 1e-12
    assert abs(generator_loss_from_probs([0.5], "nonsaturating_log") - LN2) < 1e-12


@pytest.mark.parametrize("shape", [(2,), IMG])
def test_network_losses_at_constant_half(shape):
    g_spec, d_spec = generator_spec(shape), discriminator_spec(shape)
    d0 = ParamVector.zeros(d_spec.layout)
    g = g_spec.init_params(0)
    rng = np.random.default_rng(0)
    real = rng.uniform(-1, 1, (6,) + shape)
    z = rng.standard_normal((6, 16))
    y = rng.integers(2, size=6)
    assert abs(loss_discriminator(d_spec, d0, g_spec, g, real, y, z) - 2 * LN2) < 1e-6
    assert abs(loss_generator(d_spec, d0, g_spec, g, z, y) + 0.5) < 1e-6
    with pytest.raises(ValueError):
        loss_discriminator(d_spec, d0, g_spec, g, real[:5], y[:5], z)


@pytest.mark.parametrize("kind", ["pixel_l2", "feature_lpips_like"])
def test_privacy_loss_constant_distance(kind):
    dist = PerceptualDistance(IMG, kind)
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (1,) + IMG).astype(np.float32)
    s = rng.uniform(-1, 1, (1,) + IMG).astype(np.float32)
    d0 = dist.distance(a[0], s[0])
    assert d0 > 0
    value = loss_privacy(np.concatenate([a, a]), np.concatenate([s, s]), dist)
    assert abs(value - 2 * d0) < 1e-6
    assert loss_privacy(a, a, dist) == 0


def test_privacy_loss_checks_sizes():
    dist = PerceptualDistance((2,))
    with pytest.raises(ValueError):
        loss_privacy(np.zeros((2, 2)), np.zeros((3, 2)), dist)


@given(st.integers(1, 5), st.integers(0, 10_000), st.sampled_from(["pixel_l2", "feature_lpips_like"]))
@settings(max_examples=30, deadline=None)
def test_privacy_loss_is_pair_sum_and_order_free(b, seed, kind):
    dist = PerceptualDistance((2,), kind)
    rng = np.random.default_rng(seed)
    real = rng.uniform(-1, 1, (b, 2))
    synth = rng.uniform(-1, 1, (b, 2))
    value = loss_privacy(real, synth, dist)
    manual = sum(dist.distance(r, s) for r in real for s in synth) / b
    assert abs(value - manual) < 1e-9
    perm = rng.permutation(b)
    assert abs(loss_privacy(real[perm], synth[rng.permutation(b)], dist) - value) < 1e-9
    # with b == 1 there is a single pair; moving further along the same ray raises it
    if b == 1 and kind == "pixel_l2":
        far = synth + 0.5 * (synth - real)
        assert loss_privacy(real, far, dist) > value


# perceptual distance -----------------------------------------------------------


@given(st.integers(0, 10_000), st.sampled_from([(2,), IMG]))
@settings(max_examples=30, deadline=None)
def test_perceptual_metric_axioms(seed, shape):
    dist = PerceptualDistance(shape)
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, shape)
    b = rng.uniform(-1, 1, shape)
    assert dist.distance(a, a) == 0
    dab, dba = dist.distance(a, b), dist.distance(b, a)
    assert dab >= 0 and abs(dab - dba) < 1e-12
    assert dab <= 4 + 1e-9


def test_perceptual_shape_mismatch():
    dist = PerceptualDistance(IMG)
    with pytest.raises(ValueError):
        dist.distance(np.zeros(IMG), np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        PerceptualDistance(IMG, "vgg")


def test_perceptual_tracks_pixel_distance_on_ladder():
    x, _ = make_blobimg(0, 10)
    rng = np.random.default_rng(0)
    feat, pix = PerceptualDistance(IMG), PerceptualDistance(IMG, "pixel_l2")
    mags = np.linspace(0.02, 0.6, 12)
    df, dp = [], []
    for img in x[:6]:
        noise = rng.standard_normal(img.shape)
        for m in mags:
            other = np.clip(img + m * noise, -1, 1).astype(np.float32)
            df.append(feat.distance(img, other))
            dp.append(pix.distance(img, other))
    rho = spearmanr(df, dp).statistic
    assert rho > 0.7


# gradients -----------------------------------------------------------------------


def _gan64(shape, seed):
    g_spec, d_spec = generator_spec(shape), discriminator_spec(shape)
    return g_spec, d_spec, g_spec.init_params(seed).astype(np.float64), d_spec.init_params(seed + 1).astype(np.float64)


@pytest.mark.parametrize("shape", [(2,), IMG])
@pytest.mark.parametrize("seed", range(5))
def test_discriminator_loss_gradient(shape, seed):
    g_spec, d_spec, g, d = _gan64(shape, seed)
    rng = np.random.default_rng(seed)
    real = rng.uniform(-1, 1, (4,) + shape)
    fake = rng.uniform(-1, 1, (4,) + shape)
    ry, fy = rng.integers(2, size=4), rng.integers(2, size=4)
    _, grad = discriminator_grads(d_spec, d, real, ry, fake, fy)

    def f(theta):
        return discriminator_grads(d_spec, d.with_values(theta), real, ry, fake, fy)[0]

    assert fd_rel_error(f, d.values, grad, fd_coords(grad, rng)) < 1e-4


@pytest.mark.parametrize("shape", [(2,), IMG])
@pytest.mark.parametrize("kind", ["as_written", "nonsaturating_log"])
@pytest.mark.parametrize("seed", range(5))
def test_generator_loss_gradient(shape, kind, seed):
    g_spec, d_spec, g, d = _gan64(shape, seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 16))
    y = rng.integers(2, size=4)
    _, _, grad = generator_grads(g_spec, g, d_spec, d, z, y, kind)

    def f(theta):
        return generator_grads(g_spec, g.with_values(theta), d_spec, d, z, y, kind)[0]

    assert fd_rel_error(f, g.values, grad, fd_coords(grad, rng)) < 1e-4


@pytest.mark.parametrize("shape", [(2,), IMG])
@pytest.mark.parametrize("seed", range(5))
def test_privacy_objective_gradient(shape, seed):
    g_spec, d_spec, g, d = _gan64(shape, seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 16))
    y = rng.integers(2, size=3)
    real = rng.uniform(-1, 1, (3,) + shape)
    dist, lam = PerceptualDistance(shape), 0.3
    _, _, grad = generator_grads(g_spec, g, d_spec, d, z, y, "as_written", (real, dist, lam))

    def f(theta):
        lg, lpp, _ = generator_grads(g_spec, g.with_values(theta), d_spec, d, z, y, "as_written", (real, dist, lam))
        return lg - lam * lpp

    assert fd_rel_error(f, g.values, grad, fd_coords(grad, rng)) < 1e-3


@pytest.mark.parametrize("kind", ["feature_lpips_like", "pixel_l2"])
@pytest.mark.parametrize("shape", [(2,), IMG])
@pytest.mark.parametrize("seed", range(3))
def test_perceptual_input_gradients(kind, shape, seed):
    dist = PerceptualDistance(shape, kind)
    rng = np.random.default_rng(seed)
    real = rng.uniform(-1, 1, (3,) + shape)
    synth = rng.uniform(-1, 1, (3,) + shape)
    value, grad = privacy_term_and_grad(real, synth, dist)
    assert abs(value - loss_privacy(real, synth, dist)) < 1e-9

    def f(flat):
        return loss_privacy(real, flat.reshape(synth.shape), dist)

    assert directional_rel_error(f, synth.reshape(-1), grad.reshape(-1), rng) < 1e-3
    d, gp = dist.paired_and_grad(real, synth)
    assert np.allclose(d, dist.paired(real, synth))

    def fp(flat):
        return dist.paired(real, flat.reshape(synth.shape)).sum()

    assert directional_rel_error(fp, synth.reshape(-1), gp.reshape(-1), rng) < 1e-3


# training ----------------------------------------------------------------------------


def test_zero_iterations_returns_init():
    x, y = make_gauss2d(0, 2, 10)
    res = train_gan(x, y, GanTrainConfig(phase1_iters=0, phase2_iters=0), seed=3)
    assert res.log == []
    assert res.g_params == generator_spec((2,)).init_params(3)


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(lambda_pp=-1)
    with pytest.raises(ValueError):
        GanTrainConfig(generator_loss="wasserstein")
    x, y = make_gauss2d(0, 2, 10)
    with pytest.raises(ValueError):
        train_gan(x[y == 0], y[y == 0], GanTrainConfig(), seed=0)


@pytest.fixture(scope="module")
def gauss():
    return make_gauss2d(0, 2, 200)


def test_generated_class_means_match(gauss):
    x, y = gauss
    res = train_gan(x, y, GanTrainConfig(phase1_iters=2000, phase2_iters=0), seed=0)
    buf = sample_buffer(res.g_spec, res.g_params, 2000, seed=1)
    for c in (0, 1):
        assert np.linalg.norm(buf.x[buf.y == c].mean(0) - x[y == c].mean(0)) < 0.5


def test_large_lambda_pushes_samples_away(gauss):
    x, y = gauss
    dist = PerceptualDistance((2,))
    mins = {}
    for lam in (0.0, 10.0):
        cfg = GanTrainConfig(phase1_iters=1000, phase2_iters=300, lambda_pp=lam)
        res = train_gan(x, y, cfg, seed=0, dist=dist)
        buf = sample_buffer(res.g_spec, res.g_params, 200, seed=1)
        mins[lam] = dist.pairwise(x, buf.x).min()
    assert mins[10.0] > mins[0.0]


def test_phase_one_never_touches_privacy_term(gauss, tmp_path):
    x, y = gauss
    cfg = GanTrainConfig(phase1_iters=60, phase2_iters=40, log_every=20)
    res = train_gan(x, y, cfg, seed=0)
    assert res.pp_calls == 40
    assert [r["iter"] for r in res.log] == [20, 40, 60, 80, 100]
    assert all(r["loss_pp"] is None for r in res.log[:3])
    assert all(r["loss_pp"] is not None for r in res.log[3:])
    no_pp = train_gan(x, y, GanTrainConfig(phase1_iters=100, phase2_iters=0), seed=0)
    assert no_pp.pp_calls == 0
    path = tmp_path / "log.csv"
    write_log_csv(res.log, path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["iter", "loss_d", "loss_g", "loss_pp"]
    assert rows[0]["loss_pp"] == "" and rows[-1]["loss_pp"] != ""


def test_training_is_deterministic(gauss):
    x, y = gauss
    cfg = GanTrainConfig(phase1_iters=30, phase2_iters=10)
    a = train_gan(x, y, cfg, seed=4)
    b = train_gan(x, y, cfg, seed=4)
    assert a.g_params == b.g_params and a.d_params == b.d_params
    assert not (train_gan(x, y, cfg, seed=5).g_params == a.g_params)


@pytest.mark.parametrize("family", ["gauss2d", "blobimg"])
def test_resume_from_phase_one_checkpoint(tmp_path, family):
    if family == "gauss2d":
        x, y = make_gauss2d(1, 2, 50)
    else:
        x, y = make_blobimg(1, 8)
    cfg = GanTrainConfig(phase1_iters=30, phase2_iters=15, batch_size=8)
    full = train_gan(x, y, cfg, seed=2)
    assert full.phase1 is not None and full.phase1.iteration == 30
    part = train_gan(x, y, cfg, seed=2, stop_at=30)
    path = tmp_path / "p1.fdgc"
    save_gan_state(part.state, path, extra={"note": "phase1"})
    state, extra = load_gan_state(path)
    assert extra == {"note": "phase1"}
    resumed = train_gan(x, y, cfg, seed=99, resume=state)
    assert resumed.g_params == full.g_params
    assert resumed.d_params == full.d_params
    assert resumed.state.g_opt.step == full.state.g_opt.step == 45


def test_checkpoint_roundtrip_and_corruption():
    x, y = make_gauss2d(1, 2, 20)
    res = train_gan(x, y, GanTrainConfig(phase1_iters=5, phase2_iters=0), seed=0)
    raw = dumps_gan_state(res.state)
    state, _ = loads_gan_state(raw)
    assert state.g_params == res.g_params and state.d_params == res.d_params
    assert np.array_equal(state.g_opt.m, res.state.g_opt.m) and state.g_opt.step == res.state.g_opt.step
    assert dumps_gan_state(state) == raw
    with pytest.raises(WireError):
        loads_gan_state(raw[:-9])
    bad = bytearray(raw)
    bad[20] ^= 1
    with pytest.raises(WireError):
        loads_gan_state(bytes(bad))


def test_mode_collapse_guard(gauss):
    x, y = gauss
    cfg = GanTrainConfig(phase1_iters=200, phase2_iters=0, collapse_var=1e9, collapse_window=100,
                         collapse_check_every=50)
    with pytest.raises(ModeCollapseError, match="variance"):
        train_gan(x, y, cfg, seed=0)


# buffers ---------------------------------------------------------------------------


def test_sample_buffer_contract():
    g_spec = generator_spec((2,))
    g = g_spec.init_params(0)
    assert sample_buffer(g_spec, g, 0).size == 0
    buf = sample_buffer(g_spec, g, 512, class_balance=True, seed=3, origin_node=1)
    assert np.bincount(buf.y).tolist() == [256, 256]
    assert buf.origin_node == 1 and buf.x.shape == (512, 2)
    again = sample_buffer(g_spec, g, 512, class_balance=True, seed=3, origin_node=1)
    assert buf == again
    assert not (sample_buffer(g_spec, g, 512, seed=4, origin_node=1) == buf)
    with pytest.raises(ValueError):
        sample_buffer(g_spec, g, -1)


def test_buffer_holds_generator_outputs_not_reals():
    x, y = make_blobimg(0, 8)
    res = train_gan(x, y, GanTrainConfig(phase1_iters=10, phase2_iters=0, batch_size=8), seed=0)
    buf = sample_buffer(res.g_spec, res.g_params, 64, seed=0)
    reals = {r.tobytes() for r in x}
    assert not any(s.tobytes() in reals for s in buf.x)
