"""Command-line entry point: ``fedring <group> <command>``.

Settings come from dataclass defaults, then an optional JSON config file,
then flags (flags win). Every artifact carries the resolved RunConfig and a
build id, either inline (JSON, checkpoints, PGM comments) or in a
``<file>.meta.json`` sidecar (CSV, dataset containers).

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

from . import __version__

log = logging.getLogger("fedring")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@functools.lru_cache(maxsize=1)
def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"fedring-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"fedring-{__version__}"


# run config --------------------------------------------------------------------


@dataclass
class RunConfig:
    family: str = "gauss2d"
    regime: str = "non_iid"
    nodes: int = 2
    n_per_class: int = 300
    sigma: float = 0.5
    size_factors: list[float] | None = None
    rounds: int = 100
    epochs: int = 100
    buffer: int = 512
    variant: str = "standard"
    lr: float = 1e-4
    batch_size: int = 32
    lambda_pp: float = 0.1
    generator_loss: str = "as_written"
    phase1: int = 20_000
    phase2: int = 5_000
    gan_batch: int = 32
    audit_steps: int = 500
    audit_restarts: int = 8
    audit_lr: float = 0.05
    seeds: list[int] = field(default_factory=lambda: [0])
    workers: int = 1
    out_dir: str = "."

    def validate(self) -> RunConfig:
        from .datagen import FAMILIES, REGIMES
        from .federation import VARIANTS
        from .pp_gan import GENERATOR_LOSSES

        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.family in FAMILIES, f"family must be one of {FAMILIES}")
        need(self.regime in REGIMES, f"regime must be one of {REGIMES}")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        need(self.generator_loss in GENERATOR_LOSSES, f"generator_loss must be one of {GENERATOR_LOSSES}")
        need(self.nodes >= 2, "a federation needs at least 2 nodes")
        need(self.n_per_class >= 4, "n_per_class must be >= 4")
        need(self.sigma > 0, "sigma must be > 0")
        need(self.size_factors is None or len(self.size_factors) == self.nodes, "need one size factor per node")
        need(self.size_factors is None or all(f > 0 for f in self.size_factors), "size factors must be > 0")
        for name in ("rounds", "epochs", "buffer", "phase1", "phase2", "audit_steps"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("batch_size", "gan_batch", "audit_restarts", "workers"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.lr > 0 and self.audit_lr > 0, "learning rates must be > 0")
        need(self.lambda_pp >= 0, "lambda_pp must be >= 0")
        need(len(self.seeds) > 0 and all(s >= 0 for s in self.seeds), "seeds must be a non-empty list of ints >= 0")
        return self


_FIELDS = {f.name for f in fields(RunConfig)}
_REGIME_ALIASES = {"noniid": "non_iid", "non-iid": "non_iid", "non_iid": "non_iid", "iid": "iid"}


def _int_list(text):
    if text is None or isinstance(text, list):
        return text
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated ints, got {text!r}") from None


def _float_list(text):
    if text is None or isinstance(text, list):
        return text
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def resolve_config(config_path: str | None, **flags) -> RunConfig:
    """Defaults < JSON config file < flags; FEDRING_SEED fills in missing seeds."""
    values: dict = {}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {config_path}: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - _FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in flags.items() if v is not None})
    if "seeds" not in values and os.environ.get("FEDRING_SEED"):
        values["seeds"] = os.environ["FEDRING_SEED"]
    if "regime" in values:
        regime = str(values["regime"]).lower()
        if regime not in _REGIME_ALIASES:
            raise ConfigError(f"unknown regime {values['regime']!r}")
        values["regime"] = _REGIME_ALIASES[regime]
    for key in ("seeds",):
        if key in values:
            values[key] = _int_list(values[key])
    if "size_factors" in values:
        values["size_factors"] = _float_list(values["size_factors"])
    try:
        cfg = RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    return cfg.validate()


def artifact_meta(cfg: RunConfig, **extra) -> dict:
    return {"build_id": build_id(), "run_config": asdict(cfg), **extra}


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path, cfg: RunConfig, **extra) -> None:
    _write_json(artifact_meta(cfg, artifact=Path(path).name, **extra), f"{path}.meta.json")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# click plumbing ------------------------------------------------------------------


class _Group(click.Group):
    """Maps config errors to exit 2 and other failures to exit 1 with a one-line message."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except ConfigError as err:
            raise click.UsageError(str(err)) from None
        except Exception as err:
            log.debug("command failed", exc_info=True)
            raise click.ClickException(f"{type(err).__name__}: {err}") from None


def _opt(*names, **kw):
    kw.setdefault("default", None)
    return click.option(*names, **kw)


config_opt = _opt("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="JSON RunConfig; flags override its values.")
seeds_opt = _opt("--seed", "--seeds", "seeds", help="Seed or comma-separated seeds (fallback: FEDRING_SEED, then 0).")
out_opt = _opt("--out-dir", "out_dir", help="Output directory (default: current directory).")
data_opt = click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False),
                        help="Dataset container written by `data gen`.")


def _fed_options(f):
    for deco in reversed([
        _opt("--rounds", type=int, help="Rounds T (default 100)."),
        _opt("--epochs", type=int, help="Local epochs E per round (default 100)."),
        _opt("--buffer", type=int, help="Buffer size B (default 512)."),
        _opt("--lr", type=float, help="Classifier Adam learning rate (default 1e-4)."),
        _opt("--batch-size", "batch_size", type=int, help="Classifier batch size (default 32)."),
    ]):
        f = deco(f)
    return f


def _audit_options(f):
    for deco in reversed([
        _opt("--steps", "audit_steps", type=int, help="Projection steps (default 500)."),
        _opt("--restarts", "audit_restarts", type=int, help="Projection restarts (default 8)."),
        _opt("--proj-lr", "audit_lr", type=float, help="Projection Adam learning rate (default 0.05)."),
    ]):
        f = deco(f)
    return f


@click.group(cls=_Group)
@click.version_option(__version__, prog_name="fedring")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def cli(verbose: int) -> None:
    """Decentralized ring federation with privacy-preserving synthetic replay."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# data ------------------------------------------------------------------------------


@cli.group()
def data() -> None:
    """Generate and inspect federated datasets."""


@data.command("gen")
@config_opt
@_opt("--family", help="gauss2d or blobimg.")
@_opt("--regime", help="iid or noniid.")
@_opt("--nodes", type=int, help="Number of nodes (default 2).")
@_opt("--n-per-class", "n_per_class", type=int, help="Samples per class (per node for noniid, total for iid).")
@_opt("--sigma", type=float, help="gauss2d class spread (default 0.5).")
@_opt("--size-factors", "size_factors", help="Per-node size multipliers, e.g. 1,0.2 (noniid).")
@seeds_opt
@click.option("--out", "out_path", default="data.fdrd", show_default=True, type=click.Path(dir_okay=False))
def data_gen(config_path, out_path, **flags) -> None:
    """Write a dataset container and print its summary."""
    from .datagen import make_federation, save_dataset

    cfg = resolve_config(config_path, **flags)
    fd = make_federation(cfg.family, cfg.regime, cfg.nodes, cfg.n_per_class, cfg.seeds[0],
                         size_factors=cfg.size_factors, sigma=cfg.sigma)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(fd, out_path)
    _sidecar(out_path, cfg, summary=fd.summary())
    _print_summary(fd)
    click.echo(f"wrote {out_path}")


def _print_summary(fd) -> None:
    click.echo(f"family={fd.family} regime={fd.regime} classes={fd.num_classes} nodes={len(fd.nodes)}")
    click.echo(f"{'node':>4} {'train':>6} {'test':>5}  class counts (train)")
    for n in fd.nodes:
        counts = np.bincount(n.train_y, minlength=fd.num_classes).tolist()
        click.echo(f"{n.node_id:>4} {len(n.train_y):>6} {len(n.test_y):>5}  {counts}")


@data.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the summary as JSON.")
def data_inspect(path, as_json) -> None:
    """Show node sizes and class balance of a dataset container."""
    from .datagen import load_dataset

    fd = load_dataset(path)
    if as_json:
        click.echo(json.dumps(fd.summary(), indent=2, sort_keys=True))
    else:
        _print_summary(fd)


# gan -------------------------------------------------------------------------------


def _gan_seed(seed: int, node: int) -> int:
    from .numerics import seeded_rng

    return int(seeded_rng(seed, "gan-node", node).integers(2**31))


def gan_paths(gan_dir, node: int) -> dict[str, Path]:
    base = Path(gan_dir)
    return {"final": base / f"node{node}.fdgc", "phase1": base / f"node{node}_phase1.fdgc",
            "log": base / f"node{node}_log.csv"}


def load_generators(gan_dir, nodes) -> dict:
    from .pp_gan import load_gan_state

    out = {}
    for i in nodes:
        path = gan_paths(gan_dir, i)["final"]
        if not path.exists():
            raise ConfigError(f"missing generator checkpoint {path}")
        state, _ = load_gan_state(path)
        out[i] = (state.g_spec, state.g_params)
    return out


@cli.group()
def gan() -> None:
    """Train per-node conditional GANs."""


@gan.command("train")
@config_opt
@data_opt
@_opt("--phase1", type=int, help="Phase-1 iterations, no privacy term (default 20000).")
@_opt("--phase2", type=int, help="Phase-2 iterations with the privacy term (default 5000).")
@_opt("--lambda-pp", "lambda_pp", type=float, help="Privacy term weight (default 0.1; 0 disables it).")
@_opt("--generator-loss", "generator_loss", help="as_written or nonsaturating_log.")
@_opt("--gan-batch", "gan_batch", type=int, help="GAN batch size (default 32).")
@_opt("--node", "only_nodes", multiple=True, type=int, help="Train only these nodes (repeatable).")
@_opt("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False),
      help="Resume a checkpoint (needs exactly one --node).")
@seeds_opt
@out_opt
def gan_train(config_path, data_path, only_nodes, resume_path, **flags) -> None:
    """Write post-phase-1 and final checkpoints plus a loss log per node."""
    from .datagen import load_dataset
    from .pp_gan import GanTrainConfig, load_gan_state, save_gan_state, train_gan, write_log_csv

    cfg = resolve_config(config_path, **flags)
    fd = load_dataset(data_path)
    nodes = sorted(set(only_nodes)) if only_nodes else list(range(len(fd.nodes)))
    if any(i < 0 or i >= len(fd.nodes) for i in nodes):
        raise ConfigError(f"node ids must be in [0, {len(fd.nodes)})")
    if resume_path and len(nodes) != 1:
        raise ConfigError("--resume needs exactly one --node")
    gcfg = GanTrainConfig(phase1_iters=cfg.phase1, phase2_iters=cfg.phase2, batch_size=cfg.gan_batch,
                          lambda_pp=cfg.lambda_pp, generator_loss=cfg.generator_loss)
    out = _out_dir(cfg)
    for i in nodes:
        node = fd.nodes[i]
        resume = load_gan_state(resume_path)[0] if resume_path else None
        res = train_gan(node.train_x, node.train_y, gcfg, _gan_seed(cfg.seeds[0], i), fd.num_classes, resume=resume)
        paths = gan_paths(out, i)
        meta = artifact_meta(cfg, node=i, gan_config=asdict(gcfg), data=str(data_path))
        if res.phase1 is not None:
            save_gan_state(res.phase1, paths["phase1"], meta)
        save_gan_state(res.state, paths["final"], meta)
        write_log_csv(res.log, paths["log"])
        _sidecar(paths["log"], cfg, node=i)
        click.echo(f"node {i}: {res.state.iteration} iterations -> {paths['final']}")


# fed -------------------------------------------------------------------------------


def _needs_generators(variant: str, buffer: int) -> bool:
    from .federation.engine import BUFFER_VARIANTS

    return variant == "synthetic_only_training" or (variant in BUFFER_VARIANTS and buffer > 0)


def _fed_config(cfg: RunConfig, variant: str, seed: int, **kw):
    from .federation import FedConfig

    return FedConfig(rounds=cfg.rounds, epochs=cfg.epochs, buffer_size=cfg.buffer, variant=variant, seed=seed,
                     batch_size=cfg.batch_size, lr=cfg.lr, workers=cfg.workers, **kw)


def _run_one(fd, cfg: RunConfig, variant: str, seed: int, gan_dir, wire: bool = False):
    from .federation import run_variant

    gens = None
    if _needs_generators(variant, cfg.buffer):
        if gan_dir is None:
            raise ConfigError(f"variant {variant!r} needs --gan-dir with per-node generator checkpoints")
        gens = load_generators(gan_dir, range(len(fd.nodes)))
    return run_variant(fd, _fed_config(cfg, variant, seed, wire_roundtrip=wire), gens)


@cli.group()
def fed() -> None:
    """Run federations and experiment grids."""


@fed.command("run")
@config_opt
@data_opt
@_opt("--gan-dir", "gan_dir", type=click.Path(exists=True, file_okay=False), help="Directory of node checkpoints.")
@_opt("--variant", "variants", multiple=True, help="Variant (repeatable for a paired comparison).")
@_fed_options
@_opt("--workers", type=int, help="Worker threads for node updates.")
@click.option("--wire-roundtrip", is_flag=True, help="Pass every envelope through the wire codec.")
@seeds_opt
@out_opt
def fed_run(config_path, data_path, gan_dir, variants, wire_roundtrip, **flags) -> None:
    """Write a metrics CSV and summary JSON per (variant, seed)."""
    from .datagen import load_dataset
    from .federation import summary, write_metrics_csv

    variants = list(variants)
    cfg = resolve_config(config_path, variant=variants[0] if variants else None, **flags)
    variants = variants or [cfg.variant]
    for v in variants:
        resolve_config(config_path, **{**flags, "variant": v})
    fd = load_dataset(data_path)
    out = _out_dir(cfg)
    table: dict[str, dict[int, float]] = {}
    for v in variants:
        for seed in cfg.seeds:
            res = _run_one(fd, cfg, v, seed, gan_dir, wire_roundtrip)
            stem = f"{v}_s{seed}"
            write_metrics_csv(res.records, out / f"metrics_{stem}.csv")
            _sidecar(out / f"metrics_{stem}.csv", cfg, variant=v, seed=seed, data=str(data_path))
            summ = summary(res, asdict(cfg), build_id())
            summ.update(seed=seed, data=str(data_path))
            _write_json(summ, out / f"summary_{stem}.json")
            table.setdefault(v, {})[seed] = summ["mean_final_accuracy"]
            click.echo(f"{v} seed={seed} mean_final_accuracy={summ['mean_final_accuracy']:.4f}")
            click.echo(f"  ({res.wall_clock:.2f}s)", err=True)
    if len(variants) > 1:
        ref = variants[0]
        comp = {v: {"per_seed": {str(s): a for s, a in table[v].items()},
                    "mean": float(np.mean(list(table[v].values()))),
                    "paired_diff_vs_" + ref: float(np.mean([table[v][s] - table[ref][s] for s in cfg.seeds]))}
                for v in variants}
        _write_json(artifact_meta(cfg, data=str(data_path), comparison=comp), out / "comparison.json")
        click.echo(f"wrote {out / 'comparison.json'}")


@fed.command("grid")
@config_opt
@data_opt
@_opt("--gan-dir", "gan_dir", type=click.Path(exists=True, file_okay=False))
@_opt("--variant", help="Variant (default standard).")
@click.option("--rounds", "rounds_list", default="10,30", show_default=True, help="Comma-separated T values.")
@click.option("--epochs", "epochs_list", default="1,5,20", show_default=True, help="Comma-separated E values.")
@_opt("--buffer", type=int)
@_opt("--lr", type=float)
@_opt("--batch-size", "batch_size", type=int)
@_opt("--workers", type=int)
@seeds_opt
@out_opt
def fed_grid(config_path, data_path, gan_dir, rounds_list, epochs_list, **flags) -> None:
    """T x E grid: mean and std over seeds of final accuracy and model agreement."""
    from .datagen import load_dataset
    from .federation import agreement

    cfg = resolve_config(config_path, **flags)
    rounds, epochs = _int_list(rounds_list), _int_list(epochs_list)
    if not rounds or not epochs or min(rounds) < 1 or min(epochs) < 0:
        raise ConfigError("grid needs rounds >= 1 and epochs >= 0")
    fd = load_dataset(data_path)
    out = _out_dir(cfg)
    cells = []
    for t in rounds:
        for e in epochs:
            sub = RunConfig(**{**asdict(cfg), "rounds": t, "epochs": e})
            accs, stds = [], []
            for seed in cfg.seeds:
                res = _run_one(fd, sub, cfg.variant, seed, gan_dir)
                accs.append(res.mean_final_accuracy())
                stds.append(float(np.mean([s for _, s in agreement(res.records, t).values()])))
            cells.append({"rounds": t, "epochs": e, "accuracy_mean": float(np.mean(accs)),
                          "accuracy_std": float(np.std(accs)), "agreement_std_mean": float(np.mean(stds)),
                          "per_seed": accs})
            click.echo(f"T={t:<4} E={e:<4} acc={np.mean(accs):.4f} +- {np.std(accs):.4f}  agreement std={np.mean(stds):.4f}")
    _write_json(artifact_meta(cfg, data=str(data_path), grid=cells), out / "grid.json")
    lines = ["rounds,epochs,accuracy_mean,accuracy_std,agreement_std_mean"]
    lines += [f"{c['rounds']},{c['epochs']},{c['accuracy_mean']:.6f},{c['accuracy_std']:.6f},{c['agreement_std_mean']:.6f}"
              for c in cells]
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    _sidecar(out / "grid.csv", cfg, data=str(data_path))


# audit -----------------------------------------------------------------------------


def _load_generator(path):
    from .pp_gan import load_gan_state

    state, _ = load_gan_state(path)
    return state.g_spec, state.g_params


def _audit_samples(fd, node: int, samples: int | None):
    if node < 0 or node >= len(fd.nodes):
        raise ConfigError(f"node must be in [0, {len(fd.nodes)})")
    n = fd.nodes[node]
    k = len(n.train_y) if samples is None else min(samples, len(n.train_y))
    return n.train_x[:k], n.train_y[:k]


@cli.group()
def audit() -> None:
    """Latent projection privacy audits."""


@audit.command("project")
@config_opt
@data_opt
@click.option("--gan", "gan_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Checkpoint of the audited (privacy-trained) GAN.")
@click.option("--gan-baseline", "baseline_path", type=click.Path(exists=True, dir_okay=False),
              help="Checkpoint of a vanilla GAN for a paired report.")
@click.option("--node", default=0, show_default=True, help="Node whose training samples are projected.")
@click.option("--samples", type=int, default=None, help="Project only the first N training samples.")
@_audit_options
@_opt("--workers", type=int)
@seeds_opt
@out_opt
def audit_project(config_path, data_path, gan_path, baseline_path, node, samples, **flags) -> None:
    """Project training samples and write a histogram report plus per-sample CSVs."""
    from .audit import ProjectionConfig, compare_reports, privacy_histogram, write_projection_csv
    from .datagen import load_dataset

    cfg = resolve_config(config_path, **flags)
    fd = load_dataset(data_path)
    x, y = _audit_samples(fd, node, samples)
    pcfg = ProjectionConfig(cfg.audit_steps, cfg.audit_restarts, cfg.audit_lr, cfg.seeds[0])
    out = _out_dir(cfg)
    private = _load_generator(gan_path)
    inputs = {"data": str(data_path), "gan": str(gan_path), "gan_baseline": baseline_path, "node": node}
    if baseline_path:
        rep = compare_reports(_load_generator(baseline_path), private, x, y, pcfg, workers=cfg.workers)
        reports = {"private": rep["private"], "vanilla": rep["vanilla"]}
        body = {k: r.to_dict() for k, r in reports.items()}
        body["ratio"] = rep["ratio"]
    else:
        reports = {"private": privacy_histogram(*private, x, y, pcfg, workers=cfg.workers)}
        body = {"private": reports["private"].to_dict()}
    for name, r in reports.items():
        write_projection_csv(r.results, out / f"projections_{name}.csv")
        _sidecar(out / f"projections_{name}.csv", cfg, **inputs)
        click.echo(f"{name}: n={r.n_samples} mean={r.mean:.4f} median={r.median:.4f} min={r.min:.4f} errors={len(r.errors)}")
    if "ratio" in body:
        click.echo(f"ratio private/vanilla = {body['ratio']:.3f}")
    _write_json(artifact_meta(cfg, inputs=inputs, report=body), out / "privacy_report.json")


@audit.command("mosaic")
@config_opt
@data_opt
@click.option("--gan", "gan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gan-baseline", "baseline_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--node", default=0, show_default=True)
@click.option("--samples", default=5, show_default=True, help="Number of columns.")
@click.option("--out", "out_path", default="mosaic.pgm", show_default=True, type=click.Path(dir_okay=False))
@_audit_options
@seeds_opt
def audit_mosaic(config_path, data_path, gan_path, baseline_path, node, samples, out_path, **flags) -> None:
    """Write a P5 mosaic: real / vanilla projection / private projection rows."""
    from .audit import ProjectionConfig, nearest_match_report
    from .datagen import load_dataset

    cfg = resolve_config(config_path, **flags)
    fd = load_dataset(data_path)
    if fd.family != "blobimg":
        raise ConfigError("mosaics need image data (blobimg)")
    x, y = _audit_samples(fd, node, samples)
    pcfg = ProjectionConfig(cfg.audit_steps, cfg.audit_restarts, cfg.audit_lr, cfg.seeds[0])
    comment = json.dumps(artifact_meta(cfg, data=str(data_path), gan=str(gan_path), gan_baseline=str(baseline_path)),
                         sort_keys=True)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    rep = nearest_match_report(_load_generator(baseline_path), _load_generator(gan_path), x, y, pcfg, out_path,
                               comment=comment)
    click.echo(f"wrote {out_path} ({rep['shape'][0]}x{rep['shape'][1]})")


# net -------------------------------------------------------------------------------


@cli.group()
def net() -> None:
    """Networked (one process per node) federation."""


def _parse_peers(items) -> dict[int, tuple[str, int]]:
    from .transport.peer import parse_address

    peers = {}
    for item in items:
        node, sep, addr = item.partition("=")
        if not sep or not node.isdigit():
            raise ConfigError(f"--peer expects id=host:port, got {item!r}")
        try:
            peers[int(node)] = parse_address(addr)
        except ValueError as err:
            raise ConfigError(str(err)) from None
    return peers


@net.command("serve")
@config_opt
@data_opt
@click.option("--node", "node_id", required=True, type=int, help="This process's node id.")
@click.option("--listen", required=True, help="host:port to listen on.")
@click.option("--peer", "peer_items", multiple=True, help="id=host:port of another node (repeatable).")
@_opt("--gan-dir", "gan_dir", type=click.Path(exists=True, file_okay=False))
@_opt("--variant", help="standard or model_only.")
@_fed_options
@click.option("--retries", default=5, show_default=True, help="Connection attempts per frame.")
@click.option("--ack-timeout", default=30.0, show_default=True, help="Seconds to wait for an ACK.")
@seeds_opt
@out_opt
def net_serve(config_path, data_path, node_id, listen, peer_items, gan_dir, retries, ack_timeout, **flags) -> None:
    """Run one node of a networked ring and write its metrics rows."""
    from .datagen import load_dataset
    from .federation import write_metrics_csv
    from .transport.peer import PeerConfig, RingNode, parse_address, peer_session

    cfg = resolve_config(config_path, **flags)
    if cfg.variant not in ("standard", "model_only"):
        raise ConfigError("networked mode runs the ring variants (standard, model_only)")
    fd = load_dataset(data_path)
    n = len(fd.nodes)
    if not 0 <= node_id < n:
        raise ConfigError(f"node must be in [0, {n})")
    try:
        listen_addr = parse_address(listen)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    peers = _parse_peers(peer_items)
    gens = None
    if _needs_generators(cfg.variant, cfg.buffer):
        if gan_dir is None:
            raise ConfigError(f"variant {cfg.variant!r} needs --gan-dir")
        gens = load_generators(gan_dir, [node_id])
    seed = cfg.seeds[0]
    hooks = RingNode(fd, _fed_config(cfg, cfg.variant, seed), node_id, gens)
    pcfg = PeerConfig(node_id, listen_addr, peers, retries=retries, ack_timeout=ack_timeout)
    res = peer_session(pcfg, hooks, cfg.rounds, seed, n)
    out = _out_dir(cfg)
    path = out / f"metrics_node{node_id}.csv"
    write_metrics_csv(hooks.records, path)
    _sidecar(path, cfg, node=node_id, data=str(data_path), listen=listen, peers=list(peer_items))
    click.echo(f"node {node_id}: {res.rounds} rounds -> {path}")


@net.command("merge")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default="metrics.csv", show_default=True, type=click.Path(dir_okay=False))
def net_merge(paths, out_path) -> None:
    """Merge per-node metrics CSVs into one canonical metrics CSV."""
    from .federation import read_metrics_csv, write_metrics_csv

    records = [r for p in paths for r in read_metrics_csv(p)]
    write_metrics_csv(records, out_path)
    click.echo(f"wrote {out_path} ({len(records)} rows)")


def main(argv=None) -> None:
    cli.main(args=argv, prog_name="fedring")


if __name__ == "__main__":
    main()
