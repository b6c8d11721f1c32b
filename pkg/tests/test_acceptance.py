"""Exit criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in the terminal summary. The directional experiments share module fixtures so
each federation is trained once.
"""

import math
import socket
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import chisquare

import helpers
from fedring.audit import ProjectionConfig, compare_reports, feature_scale, project
from fedring.datagen import make_blobimg, make_federation
from fedring.federation import FedConfig, agreement, metrics_csv, plan_round, run_variant
from fedring.models import classifier_spec, discriminator_spec, generator_forward, generator_spec
from fedring.numerics import ParamVector, forward_backward
from fedring.perceptual import PerceptualDistance
from fedring.pp_gan import (
    GanTrainConfig,
    discriminator_grads,
    generator_grads,
    loss_discriminator,
    loss_generator,
    loss_privacy,
    train_gan,
)
from fedring.replay import replay_grads, replay_loss
from fedring.transport.wire import decode_frame, envelope_frame, frame_to_envelope

from helpers import fd_coords, fd_rel_error
from test_numerics import ZOO, _inputs, _targets
from test_pp_gan import _gan64
from test_transport import _assert_same, _random_envelope

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
IMG = (1, 16, 16)


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    helpers.ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# 1 ------------------------------------------------------------------------------------


def _fd_cases():
    """(name, tolerance, callable(seed) -> relative error) for every model x loss pair."""

    def zoo(spec, loss):
        def run(seed):
            rng = np.random.default_rng(seed)
            params = spec.init_params(seed).astype(np.float64)
            x = _inputs(spec, rng)
            t = _targets(spec, loss, spec.network.output_shape, rng)
            _, g = forward_backward(spec.network, params, x, t, loss)
            return fd_rel_error(lambda th: forward_backward(spec.network, params.with_values(th), x, t, loss)[0],
                                params.values, g.values, fd_coords(g.values, rng))
        return run

    def disc(shape):
        def run(seed):
            _, d_spec, _, d = _gan64(shape, seed)
            rng = np.random.default_rng(seed)
            real, fake = rng.uniform(-1, 1, (4,) + shape), rng.uniform(-1, 1, (4,) + shape)
            ry, fy = rng.integers(2, size=4), rng.integers(2, size=4)
            _, g = discriminator_grads(d_spec, d, real, ry, fake, fy)
            return fd_rel_error(lambda th: discriminator_grads(d_spec, d.with_values(th), real, ry, fake, fy)[0],
                                d.values, g, fd_coords(g, rng))
        return run

    def gen(shape, kind):
        def run(seed):
            g_spec, d_spec, g, d = _gan64(shape, seed)
            rng = np.random.default_rng(seed)
            z, y = rng.standard_normal((4, 16)), rng.integers(2, size=4)
            _, _, grad = generator_grads(g_spec, g, d_spec, d, z, y, kind)
            return fd_rel_error(lambda th: generator_grads(g_spec, g.with_values(th), d_spec, d, z, y, kind)[0],
                                g.values, grad, fd_coords(grad, rng))
        return run

    def privacy(shape):
        def run(seed):
            g_spec, d_spec, g, d = _gan64(shape, seed)
            rng = np.random.default_rng(seed)
            z, y = rng.standard_normal((3, 16)), rng.integers(2, size=3)
            pp = (rng.uniform(-1, 1, (3,) + shape), PerceptualDistance(shape), 0.3)
            _, _, grad = generator_grads(g_spec, g, d_spec, d, z, y, "as_written", pp)

            def f(th):
                lg, lpp, _ = generator_grads(g_spec, g.with_values(th), d_spec, d, z, y, "as_written", pp)
                return lg - pp[2] * lpp

            return fd_rel_error(f, g.values, grad, fd_coords(grad, rng))
        return run

    def replay(shape):
        spec = classifier_spec(shape)

        def run(seed):
            rng = np.random.default_rng(seed)
            params = spec.init_params(seed).astype(np.float64)
            lx, bx = rng.uniform(-1, 1, (4,) + shape), rng.uniform(-1, 1, (3,) + shape)
            ly, by = rng.integers(2, size=4), rng.integers(2, size=3)
            _, g = replay_grads(spec, params, lx, ly, bx, by)
            return fd_rel_error(lambda th: replay_loss(spec, params.with_values(th), lx, ly, bx, by),
                                params.values, g, fd_coords(g, rng))
        return run

    cases = [(f"{s.kind}{len(s.input_shape)}d/{loss}", 1e-4, zoo(s, loss)) for s, loss in ZOO]
    for shape in ((2,), IMG):
        tag = "img" if len(shape) == 3 else "vec"
        cases.append((f"L_D/{tag}", 1e-4, disc(shape)))
        cases += [(f"L_G:{k}/{tag}", 1e-4, gen(shape, k)) for k in ("as_written", "nonsaturating_log")]
        cases.append((f"L_G-lam*L_PP/{tag}", 1e-3, privacy(shape)))
        cases.append((f"replay/{tag}", 1e-4, replay(shape)))
    return cases


def test_criterion_01_gradients(capsys):
    worst, failed = {}, []
    for name, tol, run in _fd_cases():
        errs = [run(seed) for seed in range(20)]
        worst[name] = max(errs)
        if worst[name] >= tol:
            failed.append(name)
    top = max(worst, key=worst.get)
    verdict(capsys, 1, not failed,
            f"{len(worst)} model/loss pairs x 20 seeds; worst {top} rel err {worst[top]:.2e}"
            + (f"; over tolerance: {failed}" if failed else ""))


# 2 ------------------------------------------------------------------------------------


def test_criterion_02_closed_forms(capsys):
    rng = np.random.default_rng(0)
    errs = {}
    for shape in ((2,), IMG):
        g_spec, d_spec = generator_spec(shape), discriminator_spec(shape)
        d0, g = ParamVector.zeros(d_spec.layout), g_spec.init_params(0)
        real, z, y = rng.uniform(-1, 1, (6,) + shape), rng.standard_normal((6, 16)), rng.integers(2, size=6)
        errs[f"L_D {shape}"] = abs(loss_discriminator(d_spec, d0, g_spec, g, real, y, z) - 2 * math.log(2))
        errs[f"L_G {shape}"] = abs(loss_generator(d_spec, d0, g_spec, g, z, y) + 0.5)
        dist = PerceptualDistance(shape)
        a, s = rng.uniform(-1, 1, (1,) + shape), rng.uniform(-1, 1, (1,) + shape)
        d_0 = dist.distance(a[0], s[0])
        errs[f"L_PP {shape}"] = abs(loss_privacy(np.concatenate([a, a]), np.concatenate([s, s]), dist) - 2 * d_0)
        spec = classifier_spec(shape)
        x = rng.uniform(-1, 1, (5,) + shape)
        errs[f"replay {shape}"] = abs(replay_loss(spec, ParamVector.zeros(spec.layout), x[:3], [0, 1, 1], x[3:], [1, 0])
                                      - 2 * math.log(2))
    top = max(errs, key=errs.get)
    verdict(capsys, 2, errs[top] < 1e-6, f"{len(errs)} closed forms; worst {top} off by {errs[top]:.1e} (tol 1e-6)")


# 3-6: two-node non-iid gauss2d ----------------------------------------------------------

NONIID_GAN = GanTrainConfig(phase1_iters=2000, phase2_iters=500, lambda_pp=0.07)
NONIID_VARIANTS = [("standard", 256), ("model_only", 0), ("union_baseline", 0), ("centralized_synthetic", 256),
                   ("synthetic_only_training", 256), ("buffer_only_sharing", 256)]


@pytest.fixture(scope="module")
def noniid():
    """Per variant, per seed: (final accuracy by node, mean, mean std at round 3, at round 30)."""
    out = {v: [] for v, _ in NONIID_VARIANTS}
    circulation_ok = True
    for seed in SEEDS:
        # node B: rotated 90 degrees by default, 5x fewer samples
        fd = make_federation("gauss2d", "non_iid", 2, 300, seed, size_factors=[1, 0.2], sigma=1.0)
        gens = {}
        for i, node in enumerate(fd.nodes):
            r = train_gan(node.train_x, node.train_y, NONIID_GAN, seed=seed * 10 + i)
            gens[i] = (r.g_spec, r.g_params)
        for v, b in NONIID_VARIANTS:
            res = run_variant(fd, FedConfig(rounds=30, epochs=5, buffer_size=b, variant=v, seed=seed, lr=1e-4), gens)
            std3 = np.mean([s for _, s in agreement(res.records, 3).values()])
            std30 = np.mean([s for _, s in agreement(res.records, 30).values()])
            out[v].append((res.final_accuracy(), res.mean_final_accuracy(), std3, std30))
            if res.circulation:
                circulation_ok &= all(sorted(ids) == [0, 1] for ids in res.circulation)
    assert circulation_ok
    return out


def _mean(rows, k):
    return float(np.mean([r[k] for r in rows]))


def test_criterion_03_replay_benefit(noniid, capsys):
    std = float(np.mean([r[0][1] for r in noniid["standard"]]))
    mo = float(np.mean([r[0][1] for r in noniid["model_only"]]))
    gap = 100 * (std - mo)
    verdict(capsys, 3, gap >= 5, f"node B accuracy standard {std:.3f} vs model_only {mo:.3f}: +{gap:.1f} points (need >= 5)")


def test_criterion_04_convergence(noniid, capsys):
    s3, s30 = _mean(noniid["standard"], 2), _mean(noniid["standard"], 3)
    verdict(capsys, 4, s30 <= 0.5 * s3, f"agreement std round 3 {s3:.4f} -> round 30 {s30:.4f} (ratio {s30 / s3:.2f}, need <= 0.5)")


def test_criterion_05_baseline_ordering(noniid, capsys):
    u, s, c = (_mean(noniid[v], 1) for v in ("union_baseline", "standard", "centralized_synthetic"))
    ok = u >= s - 0.01 and s >= c
    verdict(capsys, 5, ok, f"union {u:.3f} >= standard {s:.3f} (1 point tie allowed) >= centralized_synthetic {c:.3f}")


def test_criterion_06_privacy_variants(noniid, capsys):
    s, so, bo = (_mean(noniid[v], 1) for v in ("standard", "synthetic_only_training", "buffer_only_sharing"))
    ok = s - so >= 0.05 and abs(bo - s) <= 0.08
    verdict(capsys, 6, ok, f"synthetic_only trails by {100 * (s - so):.1f} points (need >= 5); "
                           f"buffer_only differs by {100 * (bo - s):+.1f} (need within 8)")


# 7 ------------------------------------------------------------------------------------


def test_criterion_07_privacy_audit(capsys):
    seed = 0
    x, y = make_blobimg(seed, 32)
    base = dict(phase1_iters=1500, phase2_iters=500, generator_loss="nonsaturating_log")
    vanilla = train_gan(x, y, GanTrainConfig(lambda_pp=0.0, **base), seed=seed)
    private = train_gan(x, y, GanTrainConfig(lambda_pp=0.1, **base), seed=seed)
    rep = compare_reports((vanilla.g_spec, vanilla.g_params), (private.g_spec, private.g_params), x[:16], y[:16],
                          ProjectionConfig(steps=200, restarts=2))
    scale = feature_scale(x)
    w0 = np.random.default_rng(1).standard_normal(private.g_spec.latent_dim).astype(np.float32)
    target = generator_forward(private.g_spec, private.g_params, w0[None], [1])[0]
    planted = project(private.g_spec, private.g_params, target, 1, ProjectionConfig())
    ok = rep["ratio"] >= 1.5 and planted.distance <= 0.05 * scale
    verdict(capsys, 7, ok, f"mean projection distance private {rep['private'].mean:.3f} / vanilla "
                           f"{rep['vanilla'].mean:.3f} = {rep['ratio']:.2f} (need >= 1.5); planted target "
                           f"{planted.distance:.1e} vs 0.05 x scale {0.05 * scale:.1e}")


# 8-9: iid gauss2d ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def iid():
    gcfg = GanTrainConfig(phase1_iters=2000, phase2_iters=500, lambda_pp=0.07)
    out = {}
    for seed in SEEDS:
        for n in (2, 4, 8):
            # 400 per class in total, split evenly
            fd = make_federation("gauss2d", "iid", n, 400, seed, sigma=1.0)
            gens = {}
            for i, node in enumerate(fd.nodes):
                r = train_gan(node.train_x, node.train_y, gcfg, seed=seed * 10 + i)
                gens[i] = (r.g_spec, r.g_params)
            for v in ["standard"] + (["fedavg", "union_baseline"] if n == 2 else []):
                res = run_variant(fd, FedConfig(rounds=30, epochs=5, buffer_size=256, variant=v, seed=seed), gens)
                out.setdefault((n, v), []).append(res.mean_final_accuracy())
    return {k: float(np.mean(v)) for k, v in out.items()}


def test_criterion_08_scaling(iid, capsys):
    a2, a4, a8 = (iid[(n, "standard")] for n in (2, 4, 8))
    drop = 100 * (a2 - a8)
    verdict(capsys, 8, drop <= 5, f"standard accuracy 2/4/8 nodes {a2:.3f}/{a4:.3f}/{a8:.3f}; drop {drop:+.1f} points (need <= 5)")


def test_criterion_09_fedavg_parity(iid, capsys):
    s, f, u = iid[(2, "standard")], iid[(2, "fedavg")], iid[(2, "union_baseline")]
    ok = abs(s - f) <= 0.05 and abs(s - u) <= 0.10 and abs(f - u) <= 0.10
    verdict(capsys, 9, ok, f"standard {s:.3f}, fedavg {f:.3f}, union {u:.3f} "
                           "(need |s-f| <= 5 points, both within 10 of union)")


# 10 -----------------------------------------------------------------------------------

PROTOCOL = dict(rounds=5, epochs=1, buffer_size=16, batch_size=16, lr=1e-3)


def test_criterion_10_protocol(small_fed, small_gens, capsys):
    res = run_variant(small_fed, FedConfig(variant="standard", **PROTOCOL), small_gens)
    conserved = len(res.circulation) == 5 and all(sorted(ids) == [0, 1, 2] for ids in res.circulation)
    n, rounds = 8, 10_000
    counts = np.zeros((n, n))
    derangements = True
    for t in range(rounds):
        succ = plan_round(11, t, n).successors()
        derangements &= all(j != i for i, j in enumerate(succ))
        # a single cycle: walking successors from 0 visits every node
        seen, k = {0}, succ[0]
        while k != 0:
            seen.add(k)
            k = succ[k]
        derangements &= len(seen) == n
        for i, j in enumerate(succ):
            counts[i, j] += 1
    p = chisquare(counts[~np.eye(n, dtype=bool)]).pvalue
    csvs = {w: metrics_csv(run_variant(small_fed, FedConfig(variant="standard", workers=w, **PROTOCOL),
                                       small_gens).records) for w in (1, 2, 4)}
    same = len(set(csvs.values())) == 1
    verdict(capsys, 10, conserved and derangements and p > 0.01 and same,
            f"conservation {conserved}; 1e4 plans single-cycle derangements {derangements}, chi2 p={p:.3f}; "
            f"1/2/4-worker CSVs identical {same}")


# 11 -----------------------------------------------------------------------------------


def _free_ports(k):
    socks = [socket.create_server(("127.0.0.1", 0)) for _ in range(k)]
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def _fedring(*args, cwd):
    return subprocess.run([sys.executable, "-m", "fedring.cli", *map(str, args)], cwd=cwd, capture_output=True,
                          text=True, timeout=300)


def test_criterion_11_wire(small_fed, small_gens, tmp_path, capsys):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        env = _random_envelope(rng)
        _assert_same(env, frame_to_envelope(decode_frame(envelope_frame(env))))

    # two processes on loopback against the in-process run, standard variant with buffers
    assert _fedring("data", "gen", "--nodes", 2, "--n-per-class", 30, "--seed", 3, "--out", "d.fdrd", cwd=tmp_path).returncode == 0
    assert _fedring("gan", "train", "--data", "d.fdrd", "--phase1", 40, "--phase2", 10, "--out-dir", "g",
                    cwd=tmp_path).returncode == 0
    run = ["--rounds", 3, "--epochs", 1, "--buffer", 16, "--batch-size", 16, "--lr", "1e-3", "--seed", 3]
    ports = _free_ports(2)
    procs = [subprocess.Popen([sys.executable, "-m", "fedring.cli", "net", "serve", "--data", "d.fdrd", "--gan-dir", "g",
                               "--node", str(i), "--listen", f"127.0.0.1:{ports[i]}",
                               "--peer", f"{1 - i}=127.0.0.1:{ports[1 - i]}", *map(str, run), "--out-dir", "net"],
                              cwd=tmp_path, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
             for i in range(2)]
    codes = [p.wait(timeout=300) for p in procs]
    assert codes == [0, 0], [p.stderr.read() for p in procs]
    assert _fedring("net", "merge", "net/metrics_node0.csv", "net/metrics_node1.csv", "--out", "merged.csv",
                    cwd=tmp_path).returncode == 0
    assert _fedring("fed", "run", "--data", "d.fdrd", "--gan-dir", "g", *run, "--out-dir", "local",
                    cwd=tmp_path).returncode == 0
    loopback = (tmp_path / "merged.csv").read_bytes() == (tmp_path / "local" / "metrics_standard_s3.csv").read_bytes()

    res = run_variant(small_fed, FedConfig(variant="buffer_only_sharing", wire_roundtrip=True, **PROTOCOL), small_gens)
    shipped = [frame_to_envelope(decode_frame(raw)) for raw in res.captured_frames]
    params = sum(e.model is not None for e in shipped)
    verdict(capsys, 11, loopback and params == 0 and len(shipped) == 15,
            f"1000 envelopes round-trip bitwise; 2-process loopback CSV identical {loopback}; "
            f"buffer_only capture has {params} classifier ParamVectors in {len(shipped)} frames")
