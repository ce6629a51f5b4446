"""Configuration parsing, experiment subcommands, and output formats.

Subcommands:

- ``run --config F --out DIR [--seed S]``: full sampling run; writes
  samples.csv, iterations.ndjson, summary.json, marginals.csv.
- ``oracle --config F --out DIR --resolution R``: grid-quadrature reference
  posterior on the same synthesized data; writes cells.csv and meta.json.
- ``stats --samples F``: summary statistics of a samples file.
- ``compare --samples F --oracle DIR``: mean/spread deltas and a mode-match
  report of samples against an oracle grid.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (with a
checkpoint of whatever the run produced).

All floats in CSV output carry 17 significant digits, so equal runs produce
byte-identical files (the ``wall_ms`` timing field of iterations.ndjson is
the one genuinely clock-dependent value).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray

from .forward import BimodalToyModel, Heat2dModel, Poisson2dModel
from .mixture import elbow_select_k, kmeans
from .oracle import (
    GridPosterior,
    forward_discrepancy,
    grid_moments,
    grid_posterior,
)
from .pipeline import PipelineResult, PipelineSettings, run_ilues_agpr, substream
from .problem import (
    BoxPrior,
    EvaluationArchive,
    ForwardCounter,
    InputError,
    ProblemSpec,
    synthesize_data,
)

Array = NDArray[np.float64]

_STREAM_DATA = 0
_STREAM_GATE = 6

HEAT2D_ORACLE_DX = 0.05
HEAT2D_ORACLE_DT = 5e-4
ORACLE_GATE_TOL = 0.02


class ConfigError(ValueError):
    """A configuration file violates the documented schema."""


@dataclass
class ProblemConfig:
    kind: str = "toy"
    truth: Optional[list[float]] = None
    noise_percent: Optional[float] = None
    noise_rule: str = "shared_mean"
    d_obs: Optional[list[float]] = None
    noise_std: Optional[list[float]] = None
    # heat2d solver parameters
    dx: float = 0.025
    dt: float = 1.25e-4
    final_time: float = 0.04
    # poisson2d solver parameters
    n_nodes: int = 33
    # toy target parameters
    center_a: list[float] = field(default_factory=lambda: [-1.5, 0.0])
    center_b: list[float] = field(default_factory=lambda: [1.5, 0.0])
    cov_scale: float = 0.09
    box_lower: Optional[list[float]] = None
    box_upper: Optional[list[float]] = None


@dataclass
class IluesConfig:
    ensemble_size: int = 80
    initial_iters: int = 1
    alpha: float = 0.1


@dataclass
class GpConfig:
    jitter: float = 0.0
    optimizer_iters: int = 60


@dataclass
class McmcConfig:
    chain_length: int = 10_000
    burn_in_fraction: float = 0.2
    epsilon: float = 1e-6


@dataclass
class ConvergenceConfig:
    delta_kl: float = 0.05
    n_kl_max: int = 2
    n_max: int = 10


@dataclass
class RunConfig:
    problem: ProblemConfig
    ilues: IluesConfig
    gp: GpConfig
    mcmc: McmcConfig
    convergence: ConvergenceConfig
    kmax: int = 6
    seed: int = 0

    def settings(self) -> PipelineSettings:
        return PipelineSettings(
            n_members=self.ilues.ensemble_size,
            initial_iters=self.ilues.initial_iters,
            alpha=self.ilues.alpha,
            gp_jitter=self.gp.jitter,
            gp_opt_iters=self.gp.optimizer_iters,
            chain_length=self.mcmc.chain_length,
            burn_in_fraction=self.mcmc.burn_in_fraction,
            epsilon_scale=self.mcmc.epsilon,
            delta_kl=self.convergence.delta_kl,
            n_kl_max=self.convergence.n_kl_max,
            n_max=self.convergence.n_max,
            k_max=self.kmax,
        )


_SECTION_TYPES = {
    "problem": ProblemConfig,
    "ilues": IluesConfig,
    "gp": GpConfig,
    "mcmc": McmcConfig,
    "convergence": ConvergenceConfig,
}

_SCALAR_FIELDS = {"kmax": int, "seed": int}


def _coerce(section: str, key: str, expected, value):
    name = f"{section}.{key}" if section else key
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def _parse_section(section: str, cls, data: dict) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    obj = cls()
    for key, value in data.items():
        if key not in cls.__dataclass_fields__:
            raise ConfigError(f"{section}.{key}: unknown key")
        current = getattr(obj, key)
        if isinstance(current, bool) or current is None or isinstance(current, list):
            setattr(obj, key, value)
        elif isinstance(current, int) and not isinstance(current, bool):
            setattr(obj, key, _coerce(section, key, int, value))
        elif isinstance(current, float):
            setattr(obj, key, _coerce(section, key, float, value))
        elif isinstance(current, str):
            setattr(obj, key, _coerce(section, key, str, value))
        else:
            setattr(obj, key, value)
    return obj


def _validate(cfg: RunConfig) -> None:
    p = cfg.problem
    if p.kind not in ("heat2d", "poisson2d", "toy"):
        raise ConfigError(f"problem.kind: must be heat2d, poisson2d or toy, got {p.kind!r}")
    if p.noise_rule not in ("shared_mean", "per_observation"):
        raise ConfigError(
            f"problem.noise_rule: must be shared_mean or per_observation, got {p.noise_rule!r}"
        )
    if p.kind != "toy":
        synth = p.truth is not None and p.noise_percent is not None
        explicit = p.d_obs is not None and p.noise_std is not None
        if synth == explicit:
            raise ConfigError(
                "problem: provide either truth + noise_percent or d_obs + noise_std"
            )
        if p.noise_percent is not None and p.noise_percent < 0:
            raise ConfigError("problem.noise_percent: must be >= 0")
    if cfg.ilues.ensemble_size < 2:
        raise ConfigError("ilues.ensemble_size: must be >= 2")
    if cfg.ilues.initial_iters < 1:
        raise ConfigError("ilues.initial_iters: must be >= 1")
    if not 0.0 < cfg.ilues.alpha <= 1.0:
        raise ConfigError("ilues.alpha: must lie in (0, 1]")
    if cfg.gp.jitter < 0:
        raise ConfigError("gp.jitter: must be >= 0")
    if cfg.gp.optimizer_iters < 1:
        raise ConfigError("gp.optimizer_iters: must be >= 1")
    if cfg.mcmc.chain_length < 1:
        raise ConfigError("mcmc.chain_length: must be >= 1")
    if not 0.0 <= cfg.mcmc.burn_in_fraction < 1.0:
        raise ConfigError("mcmc.burn_in_fraction: must lie in [0, 1)")
    if cfg.mcmc.epsilon <= 0:
        raise ConfigError("mcmc.epsilon: must be > 0")
    if cfg.convergence.delta_kl < 0 and not np.isinf(cfg.convergence.delta_kl):
        raise ConfigError("convergence.delta_kl: must be >= 0")
    if cfg.convergence.n_kl_max < 1:
        raise ConfigError("convergence.n_kl_max: must be >= 1")
    if cfg.convergence.n_max < 0:
        raise ConfigError("convergence.n_max: must be >= 0")
    if cfg.kmax < 1:
        raise ConfigError("kmax: must be >= 1")


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration, applying defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    sections: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            sections[key] = _parse_section(key, _SECTION_TYPES[key], value)
        elif key in _SCALAR_FIELDS:
            sections[key] = _coerce("", key, _SCALAR_FIELDS[key], value)
        else:
            raise ConfigError(f"{key}: unknown key")
    if "problem" not in sections:
        raise ConfigError("problem: section is required")
    if "seed" not in sections:
        raise ConfigError("seed: key is required")
    cfg = RunConfig(
        problem=sections["problem"],
        ilues=sections.get("ilues", IluesConfig()),
        gp=sections.get("gp", GpConfig()),
        mcmc=sections.get("mcmc", McmcConfig()),
        convergence=sections.get("convergence", ConvergenceConfig()),
        kmax=sections.get("kmax", 6),
        seed=sections["seed"],
    )
    _validate(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical JSON form of a config; parse(serialize(c)) == c."""
    payload = {
        "problem": asdict(cfg.problem),
        "ilues": asdict(cfg.ilues),
        "gp": asdict(cfg.gp),
        "mcmc": asdict(cfg.mcmc),
        "convergence": asdict(cfg.convergence),
        "kmax": cfg.kmax,
        "seed": cfg.seed,
    }
    payload["problem"] = {k: v for k, v in payload["problem"].items() if v is not None}
    return json.dumps(payload, indent=2)


def _toy_model(p: ProblemConfig) -> BimodalToyModel:
    dim = len(p.center_a)
    return BimodalToyModel(
        center_a=np.asarray(p.center_a, dtype=float),
        center_b=np.asarray(p.center_b, dtype=float),
        cov=p.cov_scale * np.eye(dim),
    )


def _toy_box(p: ProblemConfig) -> BoxPrior:
    if p.box_lower is not None and p.box_upper is not None:
        return BoxPrior(np.asarray(p.box_lower, float), np.asarray(p.box_upper, float))
    centers = np.stack([np.asarray(p.center_a, float), np.asarray(p.center_b, float)])
    margin = 6.0 * np.sqrt(p.cov_scale)
    return BoxPrior(centers.min(axis=0) - margin, centers.max(axis=0) + margin)


def build_problem(cfg: RunConfig, oracle_forward: bool = False) -> ProblemSpec:
    """Assemble the problem named by the config, synthesizing data if needed.

    ``oracle_forward=True`` swaps in the coarsened heat solver used by the
    grid oracle, after checking it against the fine solver on a handful of
    reference points.
    """
    p = cfg.problem
    if p.kind == "toy":
        model = _toy_model(p)
        return model.problem_spec(_toy_box(p))

    if p.kind == "heat2d":
        fine = Heat2dModel(dx=p.dx, dt=p.dt, final_time=p.final_time)
        prior = BoxPrior(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        forward = fine
        if oracle_forward:
            coarse = Heat2dModel(
                dx=HEAT2D_ORACLE_DX, dt=HEAT2D_ORACLE_DT, final_time=p.final_time
            )
            gate_rng = substream(cfg.seed, _STREAM_GATE)
            points = prior.sample(gate_rng, 4)
            if p.truth is not None:
                points = np.vstack([np.asarray(p.truth, float), points])
            gap = forward_discrepancy(fine, coarse, points)
            if gap >= ORACLE_GATE_TOL:
                raise InputError(
                    f"coarse heat solver deviates {gap:.3%} from the fine one; oracle untrusted"
                )
            forward = coarse
    elif p.kind == "poisson2d":
        forward = Poisson2dModel(n_nodes=p.n_nodes)
        prior = BoxPrior(np.array([0.0, 0.0, -2.0]), np.array([1.0, 1.0, 2.0]))
    else:  # pragma: no cover - guarded by _validate
        raise ConfigError(f"unsupported problem kind {p.kind!r}")

    if p.d_obs is not None:
        d_obs = np.asarray(p.d_obs, dtype=float)
        std = np.asarray(p.noise_std, dtype=float)
        if std.size == 1:
            std = np.full(d_obs.size, float(std))
        noise_cov = np.diag(std**2)
    else:
        data_model = fine if p.kind == "heat2d" else forward
        d_obs, noise_cov = synthesize_data(
            data_model,
            prior,
            np.asarray(p.truth, dtype=float),
            float(p.noise_percent),
            substream(cfg.seed, _STREAM_DATA),
            rule=p.noise_rule,
        )
    return ProblemSpec(
        prior=prior,
        forward=forward,
        d_obs=d_obs,
        noise_cov=noise_cov,
        counter=ForwardCounter(),
    )


def summarize_samples(samples: Array, k_max: int = 6, seed: int = 0) -> dict:
    """Per-coordinate mean and spread plus k-means cluster centers and weights.

    The spread is the mean squared deviation about the sample mean (the
    population variance of the sample, computed per coordinate).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1:
        raise InputError("need at least one sample")
    mean = samples.mean(axis=0)
    mse = np.mean((samples - mean) ** 2, axis=0)
    rng = substream(seed, 7)
    if samples.shape[0] >= 2:
        k = elbow_select_k(samples, min(k_max, samples.shape[0]), rng)
        clustering = kmeans(samples, k, rng)
        sizes = clustering.sizes()
        clusters = [
            {
                "center": [float(c) for c in clustering.centroids[i]],
                "weight": float(sizes[i] / samples.shape[0]),
            }
            for i in range(k)
        ]
    else:
        clusters = [{"center": [float(c) for c in samples[0]], "weight": 1.0}]
    return {
        "mean": [float(v) for v in mean],
        "mse": [float(v) for v in mse],
        "clusters": clusters,
    }


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_samples_csv(path: Path, samples: Array, log_posts: Array) -> None:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dim = samples.shape[1]
    header = ",".join([f"theta_{i + 1}" for i in range(dim)] + ["log_post"])
    lines = [header]
    for row, lp in zip(samples, np.asarray(log_posts, dtype=float)):
        lines.append(",".join([_fmt(v) for v in row] + [_fmt(lp)]))
    path.write_text("\n".join(lines) + "\n")


def read_samples_csv(path: Path) -> tuple[Array, Array]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    dim = len(header) - 1
    rows = [list(map(float, line.split(","))) for line in lines[1:]]
    data = np.asarray(rows, dtype=float)
    return data[:, :dim], data[:, dim]


def write_iterations_ndjson(path: Path, records) -> None:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "n": r.n,
                    "kl": r.kl,
                    "accept_rate": r.accept_rate,
                    "k_clusters": r.k_clusters,
                    "forward_calls": r.forward_calls,
                    "wall_ms": round(r.wall_ms, 3),
                }
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_iterations_ndjson(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().strip().splitlines() if line]


def write_summary_json(path: Path, summary: dict) -> None:
    path.write_text(json.dumps(summary, indent=2) + "\n")


def write_marginals_csv(
    path: Path, samples: Array, lower: Array, upper: Array, bins: int = 40
) -> None:
    """1-d and pairwise 2-d histogram masses over the prior box, plot-ready."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dim = samples.shape[1]
    n = samples.shape[0]
    lines = ["kind,dims,bin_lo_1,bin_hi_1,bin_lo_2,bin_hi_2,mass"]
    for d in range(dim):
        edges = np.linspace(lower[d], upper[d], bins + 1)
        hist, _ = np.histogram(samples[:, d], bins=edges)
        for b in range(bins):
            lines.append(
                f"1d,{d},{_fmt(edges[b])},{_fmt(edges[b + 1])},,,{_fmt(hist[b] / n)}"
            )
    for d1 in range(dim):
        for d2 in range(d1 + 1, dim):
            e1 = np.linspace(lower[d1], upper[d1], bins + 1)
            e2 = np.linspace(lower[d2], upper[d2], bins + 1)
            hist, _, _ = np.histogram2d(samples[:, d1], samples[:, d2], bins=[e1, e2])
            nz = np.argwhere(hist > 0)
            for i, j in nz:
                lines.append(
                    f"2d,\"{d1},{d2}\",{_fmt(e1[i])},{_fmt(e1[i + 1])},"
                    f"{_fmt(e2[j])},{_fmt(e2[j + 1])},{_fmt(hist[i, j] / n)}"
                )
    path.write_text("\n".join(lines) + "\n")


def write_oracle(out_dir: Path, gp: GridPosterior) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "resolutions": list(gp.resolutions),
        "lower": [float(v) for v in gp.lower],
        "upper": [float(v) for v in gp.upper],
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    header = ",".join([f"theta_{d + 1}" for d in range(gp.dim)] + ["log_post"])
    lines = [header]
    for index in np.ndindex(*gp.resolutions):
        theta = gp.cell_center(index)
        lines.append(",".join([_fmt(v) for v in theta] + [_fmt(gp.log_post[index])]))
    (out_dir / "cells.csv").write_text("\n".join(lines) + "\n")


def read_oracle(out_dir: Path) -> GridPosterior:
    meta = json.loads((out_dir / "meta.json").read_text())
    resolutions = tuple(meta["resolutions"])
    lower = np.asarray(meta["lower"], dtype=float)
    upper = np.asarray(meta["upper"], dtype=float)
    dim = len(resolutions)
    axes = tuple(
        lower[d] + (upper[d] - lower[d]) / resolutions[d] * (np.arange(resolutions[d]) + 0.5)
        for d in range(dim)
    )
    lines = (out_dir / "cells.csv").read_text().strip().splitlines()[1:]
    log_post = np.array([float(line.split(",")[-1]) for line in lines]).reshape(resolutions)
    flat = log_post.ravel()
    m = float(np.max(flat))
    masses = np.exp(flat - m)
    masses = (masses / masses.sum()).reshape(resolutions)
    return GridPosterior(
        axes=axes, log_post=log_post, masses=masses, lower=lower, upper=upper
    )


def write_run_outputs(out_dir: Path, cfg: RunConfig, spec: ProblemSpec, result: PipelineResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_samples_csv(out_dir / "samples.csv", result.samples, result.sample_log_targets)
    write_iterations_ndjson(out_dir / "iterations.ndjson", result.records)
    summary = summarize_samples(result.samples, k_max=cfg.kmax, seed=cfg.seed)
    summary["forward_calls_total"] = spec.counter.count
    summary["seed"] = cfg.seed
    write_summary_json(out_dir / "summary.json", summary)
    write_marginals_csv(
        out_dir / "marginals.csv", result.samples, spec.prior.lower, spec.prior.upper
    )


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config).read_text())
    if args.seed is not None:
        cfg.seed = args.seed
        _validate(cfg)
    out_dir = Path(args.out)
    spec = build_problem(cfg)

    def checkpoint(archive: EvaluationArchive, records) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if len(archive):
            write_samples_csv(
                out_dir / "checkpoint_archive.csv", archive.thetas, archive.log_posts
            )
        write_iterations_ndjson(out_dir / "iterations.ndjson", records)

    try:
        result = run_ilues_agpr(spec, cfg.settings(), cfg.seed, checkpoint=checkpoint)
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    write_run_outputs(out_dir, cfg, spec, result)
    print(
        f"run complete: {result.samples.shape[0]} samples, "
        f"{spec.counter.count} forward calls, "
        f"{'converged' if result.converged else 'iteration limit reached'}"
    )
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config).read_text())
    spec = build_problem(cfg, oracle_forward=True)
    mirror = 2 if cfg.problem.kind == "poisson2d" else None
    try:
        gp = grid_posterior(spec, args.resolution, mirror_axis=mirror)
    except Exception as exc:
        print(f"oracle failed: {exc}", file=sys.stderr)
        return 2
    write_oracle(Path(args.out), gp)
    moments = grid_moments(gp)
    print(
        f"oracle complete: {np.prod(gp.resolutions)} cells, "
        f"{len(moments.modes)} modes, mean {np.array2string(moments.mean, precision=4)}"
    )
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    samples, _ = read_samples_csv(Path(args.samples))
    print(json.dumps(summarize_samples(samples), indent=2))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    samples, _ = read_samples_csv(Path(args.samples))
    gp = read_oracle(Path(args.oracle))
    moments = grid_moments(gp)
    summary = summarize_samples(samples)
    mean = np.asarray(summary["mean"])
    mse = np.asarray(summary["mse"])
    report = {
        "sample_mean": summary["mean"],
        "oracle_mean": [float(v) for v in moments.mean],
        "mean_delta": [float(v) for v in mean - moments.mean],
        "sample_mse": summary["mse"],
        "oracle_mse": [float(v) for v in moments.mse],
        "mse_rel_delta": [
            float((a - b) / b) if b > 0 else float("nan")
            for a, b in zip(mse, moments.mse)
        ],
        "oracle_modes": [
            {"theta": [float(v) for v in m["theta"]], "mass": m["mass"]}
            for m in moments.modes
        ],
        "sample_clusters": summary["clusters"],
    }
    matches = []
    for cluster in summary["clusters"]:
        center = np.asarray(cluster["center"])
        if moments.modes:
            dists = [
                float(np.linalg.norm(center - np.asarray(m["theta"])))
                for m in moments.modes
            ]
            matches.append(
                {"cluster_center": cluster["center"], "nearest_mode_distance": min(dists)}
            )
    report["mode_match"] = matches
    print(json.dumps(report, indent=2))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="modalgp",
        description="Sample multimodal Bayesian inverse problems with "
        "ensemble-seeded adaptive GP surrogates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full sampling run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(fn=_cmd_run)

    p_oracle = sub.add_parser("oracle", help="grid-quadrature reference posterior")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--out", required=True)
    p_oracle.add_argument("--resolution", type=int, required=True)
    p_oracle.set_defaults(fn=_cmd_oracle)

    p_stats = sub.add_parser("stats", help="summary statistics of a samples file")
    p_stats.add_argument("--samples", required=True)
    p_stats.set_defaults(fn=_cmd_stats)

    p_compare = sub.add_parser("compare", help="compare samples against an oracle grid")
    p_compare.add_argument("--samples", required=True)
    p_compare.add_argument("--oracle", required=True)
    p_compare.set_defaults(fn=_cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
