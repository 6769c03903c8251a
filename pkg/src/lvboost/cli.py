"""Command-line front end: simulate data, fit, re-score a saved fit, export density grids.

Every command prints one JSON summary line on stdout. Failures print a JSON error
record on stderr and exit nonzero. Floats are written with ``repr``, the shortest
decimal string (at most 17 significant digits) that parses back to the same double.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.linalg import solve_triangular
from threadpoolctl import threadpool_info, threadpool_limits

from lvboost import __version__
from lvboost import boosting as bo
from lvboost import mixture as mx
from lvboost import models as md
from lvboost import sparse_chol as sc
from lvboost.mixture import MixtureApproximation
from lvboost.optimizer import SGAConfig, SGADivergence

log = logging.getLogger("lvboost")

PANEL_KINDS = ("random_effects_logistic", "gaussian_random_effects")
EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGENCE, EXIT_IO, EXIT_INTERNAL = 2, 3, 4, 5, 1
MANIFEST_FORMAT = "lvboost-run-manifest"


class CLIError(Exception):
    """An error reported as a structured record with a fixed exit code."""

    def __init__(self, kind: str, message: str, code: int = EXIT_INPUT, **extra):
        super().__init__(message)
        self.kind, self.message, self.code, self.extra = kind, message, code, extra

    def record(self) -> dict:
        return {"error": {"type": self.kind, "message": self.message, **self.extra}}


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class DataSource:
    """A CSV path, or the seed used to simulate a synthetic dataset."""

    path: str | None = None
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: md.ModelConfig
    data: DataSource = field(default_factory=DataSource)
    sga: SGAConfig = field(default_factory=SGAConfig)
    boost: bo.BoostConfig = field(default_factory=bo.BoostConfig)
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        boost = {f.name: getattr(self.boost, f.name) for f in dataclasses.fields(self.boost)}
        boost["diagnostics"] = dataclasses.asdict(self.boost.diagnostics)
        boost["init"] = dataclasses.asdict(self.boost.init)
        return {"seed": self.seed, "out": self.out, "model": model_to_dict(self.model),
                "data": dataclasses.asdict(self.data), "optimizer": dataclasses.asdict(self.sga),
                "boosting": boost}

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data or {})
        _no_unknown(data, {"seed", "out", "model", "data", "optimizer", "boosting"}, "config")
        if "model" not in data:
            raise CLIError("invalid_config", "config needs a 'model' section")
        src = dict(data.get("data") or {})
        _no_unknown(src, {"path", "seed"}, "data")
        path = src.get("path")
        if path is not None:
            p = Path(path)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if not p.exists():
                raise CLIError("missing_file", f"data file not found: {p}", path=str(p))
            path = str(p)
        boost = dict(data.get("boosting") or {})
        try:
            diag = bo.DiagnosticsConfig(**_section(boost.pop("diagnostics", None), bo.DiagnosticsConfig))
            init = bo.InitConfig(**_section(boost.pop("init", None), bo.InitConfig))
            return cls(model=model_from_dict(data["model"]),
                       data=DataSource(path, int(src.get("seed", 0))),
                       sga=SGAConfig(**_section(data.get("optimizer"), SGAConfig)),
                       boost=bo.BoostConfig(diagnostics=diag, init=init, **_section(boost, bo.BoostConfig)),
                       seed=int(data.get("seed", 0)), out=str(data.get("out", "runs")))
        except (TypeError, ValueError) as exc:
            raise CLIError("invalid_config", str(exc)) from None

    def with_overrides(self, seed=None, out=None, psis=None) -> "RunConfig":
        boost = self.boost if psis is None else dataclasses.replace(self.boost, psis=psis)
        return dataclasses.replace(self, seed=self.seed if seed is None else seed,
                                   out=self.out if out is None else out, boost=boost)


def _no_unknown(data: dict, allowed: set, where: str):
    extra = sorted(set(data) - allowed)
    if extra:
        raise CLIError("invalid_config", f"unknown keys in {where}: {', '.join(extra)}")


def _section(data, kind) -> dict:
    data = dict(data or {})
    _no_unknown(data, {f.name for f in dataclasses.fields(kind)}, kind.__name__)
    return data


def _planted(spec) -> tuple:
    if isinstance(spec, dict):
        _no_unknown(spec, {"start", "stop"}, "planted")
        return tuple(range(int(spec.get("start", 0)), int(spec["stop"])))
    return tuple(int(i) for i in (spec or ()))


def model_from_dict(data: dict) -> md.ModelConfig:
    data = dict(data)
    _no_unknown(data, {f.name for f in dataclasses.fields(md.ModelConfig)}, "model")
    try:
        for key in ("planted_prior", "default_prior"):
            if key in data:
                data[key] = md.prior_from_dict(data[key])
        if "planted" in data:
            data["planted"] = _planted(data["planted"])
        if data.get("beta") is not None:
            data["beta"] = tuple(float(v) for v in data["beta"])
        return md.ModelConfig(**data)
    except (TypeError, ValueError, KeyError) as exc:
        raise CLIError("invalid_config", f"model: {exc}") from None


def model_to_dict(cfg: md.ModelConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if hasattr(v, "to_dict"):
            v = v.to_dict()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise CLIError("missing_file", f"config file not found: {path}", path=str(path))
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise CLIError("invalid_config", f"{path}: {exc}", path=str(path)) from None
    if not isinstance(data, dict):
        raise CLIError("invalid_config", f"{path}: top level must be a mapping", path=str(path))
    return RunConfig.from_dict(data, path.parent)


# ---------------------------------------------------------------------------
# data

def load_data(cfg: RunConfig, path=None):
    """Read the CSV named by ``path`` or the config, or simulate from the data seed."""
    path = path or cfg.data.path
    panel = cfg.model.kind in PANEL_KINDS
    if path is None:
        data, _ = md.simulate(cfg.model, np.random.default_rng(cfg.data.seed))
        return data
    if not Path(path).exists():
        raise CLIError("missing_file", f"data file not found: {path}", path=str(path))
    try:
        data = md.read_panel_csv(path) if panel else md.read_series_csv(path)
    except ValueError as exc:
        raise CLIError("invalid_data", str(exc), path=str(path)) from None
    check_shapes(cfg.model, data)
    return data


def check_shapes(model_cfg: md.ModelConfig, data) -> None:
    if data.n != model_cfg.n:
        raise CLIError("shape_mismatch", f"model expects n={model_cfg.n} latents, data has {data.n}")
    if model_cfg.kind == "random_effects_logistic" and data.p != model_cfg.p:
        raise CLIError("shape_mismatch", f"model expects p={model_cfg.p} covariates, data has {data.p}")


# ---------------------------------------------------------------------------
# run manifest

def _elbo_dict(e):
    return None if e is None else {"value": e.value, "std_error": e.std_error, "S": e.S}


def _floats(a) -> list | None:
    return None if a is None else np.asarray(a, float).tolist()


@dataclass(frozen=True)
class RunManifest:
    """Everything a fit produced: config echo, per-boost records, per-K reports, mixtures."""

    version: str
    seed: int
    config: dict
    records: list
    reports: list
    mixtures: list
    optimal_K: int
    wall_time: float

    @classmethod
    def from_result(cls, cfg: RunConfig, result: bo.BoostingResult, wall_time: float) -> "RunManifest":
        records = [{"K": r.K, "move": r.move, "indices": list(r.indices), "s_tilde": r.s_tilde,
                    "elbo_before": _elbo_dict(r.elbo_before), "elbo_after": _elbo_dict(r.elbo_after),
                    "trace": [list(map(float, row)) for row in r.trace],
                    "fell_back": r.fell_back, "wall_time": r.wall_time} for r in result.records]
        reports = [{"K": k + 1, "s_tilde": rep.s_tilde, "s": _floats(rep.s),
                    "ranking": rep.ranking.tolist(), "khat": _floats(rep.khat)}
                   for k, rep in enumerate(result.reports)]
        return cls(__version__, cfg.seed, cfg.to_dict(), records, reports,
                   [m.to_dict() for m in result.mixtures], result.optimal_K, wall_time)

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, **dataclasses.asdict(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        if not isinstance(data, dict) or data.pop("format", None) != MANIFEST_FORMAT:
            raise ValueError("not a run manifest")
        return cls(**data)

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def mixture(self, K: int | None = None) -> MixtureApproximation:
        """The fitted mixture with ``K`` components (default: the last one fitted)."""
        if K is None:
            return MixtureApproximation.from_dict(self.mixtures[-1])
        for m in self.mixtures:
            if len(m["components"]) == K:
                return MixtureApproximation.from_dict(m)
        raise CLIError("index_out_of_range", f"no fitted mixture with K={K}")


def read_manifest(path) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise CLIError("missing_file", f"manifest not found: {path}", path=str(path))
    try:
        return RunManifest.loads(path.read_text())
    except (ValueError, TypeError) as exc:
        raise CLIError("invalid_manifest", f"{path}: {exc}", path=str(path)) from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError("io_error", f"cannot create output directory {out}: {exc.strerror}",
                       EXIT_IO, path=str(out)) from None
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CLIError("io_error", f"cannot write {path}: {exc.strerror}", EXIT_IO, path=str(path)) from None


# ---------------------------------------------------------------------------
# density export

@dataclass(frozen=True)
class Target:
    kind: str   # "b" latent, "g" global coordinate
    index: int

    @property
    def label(self) -> str:
        return f"{self.kind}{self.index}"


def parse_targets(spec: str, pattern: sc.BlockPattern) -> list[Target]:
    out = []
    for tok in (t.strip() for t in spec.split(",")):
        if len(tok) < 2 or tok[0] not in "bg" or not tok[1:].isdigit():
            raise CLIError("invalid_argument", f"bad target {tok!r}; use b<i> or g<j>", EXIT_USAGE)
        t = Target(tok[0], int(tok[1:]))
        size = pattern.n if t.kind == "b" else pattern.global_dim
        if t.index >= size:
            raise CLIError("index_out_of_range", f"target {tok} out of range (size {size})", target=tok)
        out.append(t)
    return out


def _normal_pdf(x, m, sd):
    return np.exp(-0.5 * ((x - m) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


def _draw_globals(mix: MixtureApproximation, rng, size: int) -> np.ndarray:
    ks = rng.choice(mix.K, size=size, p=mix.weights)
    out = np.empty((size, mix.pattern.global_dim))
    for k, c in enumerate(mix.components):
        sel = ks == k
        eps = rng.standard_normal((int(sel.sum()), mix.pattern.global_dim))
        out[sel] = c.mean.global_part + solve_triangular(c.factor.gblock, eps.T, lower=True, trans="T").T
    return out


def _latent_given_global(c: mx.Component, i: int, theta_g) -> tuple[np.ndarray, float]:
    """Per-component moments of ``b_i | theta_G`` for a scalar latent, over a batch of draws."""
    pattern = c.pattern
    if pattern.kind == sc.HIERARCHICAL:
        m = sc.conditional_latent_means(c.mean, c.factor, theta_g)[..., i]
        return m, 1.0 / c.factor.diag_band[0][i]
    gains, covs = c.chain_marginals
    m = c.mean.part(i)[0] + (theta_g - c.mean.global_part) @ gains[i][0]
    return m, float(np.sqrt(covs[i][0, 0]))


def latent_density_terms(mix: MixtureApproximation, i: int, rng, samples: int):
    """Weights, means and sds (each ``(S, K)``) of ``q(b_i | theta_G)`` at draws of ``theta_G``."""
    if not mix.pattern.scalar_latents:
        raise CLIError("unsupported", "density export needs scalar latent blocks")
    if mix.pattern.global_dim == 0:
        tg = np.zeros((1, 0))
        w = mix.weights[None, :]
    else:
        tg = _draw_globals(mix, rng, samples)
        w = np.exp(mx.global_conditional_weights(mix, tg))
    ms, sds = zip(*(_latent_given_global(c, i, tg) for c in mix.components))
    means = np.stack([np.broadcast_to(m, (tg.shape[0],)) for m in ms], axis=-1)
    sds = np.broadcast_to(np.array(sds), means.shape)
    return w, means, sds


def global_marginal_terms(mix: MixtureApproximation, j: int):
    means, sds = [], []
    for c in mix.components:
        m, cov = sc.marginal_global_moments(c.mean, c.factor)
        means.append(m[j])
        sds.append(np.sqrt(cov[j, j]))
    return mix.weights[None, :], np.array(means)[None, :], np.array(sds)[None, :]


def default_grid(means, sds, size: int = 401, span: float = 8.0) -> np.ndarray:
    return np.linspace(float(np.min(means - span * sds)), float(np.max(means + span * sds)), size)


def mixture_density(grid, w, means, sds) -> np.ndarray:
    """``mean_s sum_k w[s, k] N(x; means[s, k], sds[s, k])`` at every grid point."""
    dens = np.zeros_like(grid)
    for s in range(w.shape[0]):
        dens += _normal_pdf(grid[:, None], means[s], sds[s]) @ w[s]
    return dens / w.shape[0]


def export_density(mix: MixtureApproximation, targets, grid_spec, rng, samples: int) -> list:
    """Rows ``(target, x, density)``; latent marginals mix the conditionals over ``theta_G`` draws."""
    rows = []
    for t in targets:
        if t.kind == "g":
            terms = global_marginal_terms(mix, t.index)
        else:
            terms = latent_density_terms(mix, t.index, rng, samples)
        grid = (np.linspace(*grid_spec[:2], int(grid_spec[2])) if grid_spec is not None
                else default_grid(terms[1], terms[2]))
        dens = mixture_density(grid, *terms)
        rows.extend((t.label, x, d) for x, d in zip(grid, dens))
    return rows


def _parse_grid(spec: str | None):
    if spec is None:
        return None
    try:
        lo, hi, size = spec.split(",")
        lo, hi, size = float(lo), float(hi), int(size)
    except ValueError:
        raise CLIError("invalid_argument", f"bad grid {spec!r}; use lo,hi,size", EXIT_USAGE) from None
    if not (hi > lo and size >= 2):
        raise CLIError("invalid_argument", "grid needs hi > lo and size >= 2", EXIT_USAGE)
    return lo, hi, size


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise CLIError("io_error", f"cannot write {path}: {exc.strerror}", EXIT_IO, path=str(path)) from None


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> dict:
    cfg = load_config(args.config)
    seed = cfg.data.seed if args.seed is None else args.seed
    out = _out_dir(args.out or cfg.out)
    data, truth = md.simulate(cfg.model, np.random.default_rng(seed))
    data_path = out / "data.csv"
    try:
        rows = (md.write_panel_csv(data_path, data) if cfg.model.kind in PANEL_KINDS
                else md.write_series_csv(data_path, data))
    except OSError as exc:
        raise CLIError("io_error", f"cannot write {data_path}: {exc.strerror}", EXIT_IO,
                       path=str(data_path)) from None
    truth_path = out / "truth.json"
    sidecar = {"version": __version__, "seed": seed, "kind": cfg.model.kind,
               "planted": list(cfg.model.planted), "model": model_to_dict(cfg.model),
               "truth": truth.tolist()}
    _write_text(truth_path, json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return {"command": "simulate", "data": str(data_path), "truth": str(truth_path), "rows": rows}


def _progress(rec):
    log.info("K=%d move=%s s_tilde=%.6g elbo=%.6g (%.1fs)", rec.K, rec.move, rec.s_tilde,
             rec.elbo_after.value, rec.wall_time)


def cmd_fit(args) -> dict:
    cfg = load_config(args.config).with_overrides(args.seed, args.out, True if args.psis else None)
    data = load_data(cfg, args.data)
    model = cfg.model.build()
    out = _out_dir(cfg.out)
    t0 = time.perf_counter()
    result = bo.run_boosting(model, data, cfg.sga, cfg.boost, np.random.default_rng(cfg.seed), _progress)
    manifest = RunManifest.from_result(cfg, result, time.perf_counter() - t0)
    path = out / "manifest.json"
    _write_text(path, manifest.dumps())
    return {"command": "fit", "manifest": str(path), "K": result.mixture.K,
            "optimal_K": result.optimal_K, "s_tilde": result.s_tilde.tolist()}


def _manifest_model(manifest: RunManifest, data_path):
    cfg = manifest.run_config
    data = load_data(cfg, data_path)
    check_shapes(cfg.model, data)
    model = cfg.model.build()
    return cfg, model, data


def cmd_diagnose(args) -> dict:
    manifest = read_manifest(args.manifest)
    cfg, model, data = _manifest_model(manifest, args.data)
    mix = manifest.mixture(args.K)
    if mix.pattern != model.pattern:
        raise CLIError("shape_mismatch", "manifest pattern does not match the model and data")
    if args.psis and model.pattern.kind != sc.HIERARCHICAL:
        raise CLIError("unsupported", "PSIS diagnostics need a hierarchical model")
    rng = np.random.default_rng(manifest.seed if args.seed is None else args.seed)
    report = bo.score_latents(mix, model, data, cfg.boost.diagnostics, rng)
    if args.psis:
        report = report.with_khat(bo.psis_khats(mix, model, data, cfg.boost.psis_L, None, rng,
                                                cfg.boost.psis_method))
    out = _out_dir(args.out or Path(args.manifest).parent)
    rank = np.empty_like(report.ranking)
    rank[report.ranking] = np.arange(report.ranking.size)
    header = ["index", "s", "rank"] + (["khat"] if args.psis else [])
    rows = [[i, float(report.s[i]), int(rank[i])] + ([float(report.khat[i])] if args.psis else [])
            for i in range(report.s.size)]
    path = out / "diagnostics.csv"
    _write_csv(path, header, rows)
    return {"command": "diagnose", "diagnostics": str(path), "K": mix.K, "s_tilde": report.s_tilde,
            "top": report.ranking[:10].tolist()}


def cmd_export_density(args) -> dict:
    manifest = read_manifest(args.manifest)
    mix = manifest.mixture(args.K)
    targets = parse_targets(args.targets, mix.pattern)
    rng = np.random.default_rng(manifest.seed if args.seed is None else args.seed)
    rows = export_density(mix, targets, _parse_grid(args.grid), rng, args.samples)
    out = _out_dir(args.out or Path(args.manifest).parent)
    path = out / "density.csv"
    _write_csv(path, ["target", "x", "density"], rows)
    return {"command": "export-density", "density": str(path), "targets": [t.label for t in targets],
            "rows": len(rows)}


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvboost", description="Boosted Gaussian-mixture variational inference.")
    p.add_argument("--version", action="version", version=f"lvboost {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=None,
                   help="upper bound on BLAS threads (OPENBLAS_NUM_THREADS sets the startup count)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a dataset and its ground truth")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    f = sub.add_parser("fit", help="fit by boosting and write a run manifest")
    f.add_argument("--config", required=True)
    f.add_argument("--data", help="CSV data file (overrides the config)")
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.add_argument("--psis", action="store_true", help="compute PSIS k-hat at every K")

    d = sub.add_parser("diagnose", help="re-score the latents of a saved fit")
    d.add_argument("--manifest", required=True)
    d.add_argument("--data")
    d.add_argument("--K", type=int, help="mixture size to score (default: last)")
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.add_argument("--psis", action="store_true", help="add a PSIS k-hat column")

    e = sub.add_parser("export-density", help="write marginal density grids")
    e.add_argument("--manifest", required=True)
    e.add_argument("--targets", required=True, help="comma list of b<i> and g<j>")
    e.add_argument("--grid", help="lo,hi,size (default: per-target automatic range)")
    e.add_argument("--samples", type=int, default=2000, help="theta_G draws for latent marginals")
    e.add_argument("--K", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    for sp in (s, f, d, e):
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose,
            "export-density": cmd_export_density}


def thread_limit(requested: int | None) -> int | None:
    """Cap BLAS threads at ``requested`` without raising them above the startup count.

    OpenBLAS sizes its buffers when it loads, and raising the count afterwards can
    crash it; set ``OPENBLAS_NUM_THREADS`` before launch to allow more threads.
    """
    if requested is None:
        return None
    started = [int(lib["num_threads"]) for lib in threadpool_info()]
    return min([requested] + started)


def _run(args) -> dict:
    if args.threads is not None and args.threads < 1:
        raise CLIError("invalid_argument", "--threads must be positive", EXIT_USAGE)
    if getattr(args, "samples", 1) < 1:
        raise CLIError("invalid_argument", "--samples must be positive", EXIT_USAGE)
    with threadpool_limits(limits=thread_limit(args.threads)):
        return COMMANDS[args.command](args)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        summary = _run(args)
    except CLIError as exc:
        print(json.dumps(exc.record()), file=sys.stderr)
        return exc.code
    except SGADivergence as exc:
        print(json.dumps(CLIError("divergence", str(exc)).record()), file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, IndexError) as exc:
        print(json.dumps(CLIError(type(exc).__name__, str(exc)).record()), file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
