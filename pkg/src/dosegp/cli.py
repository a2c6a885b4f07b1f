"""Command-line entry point: ``dosegp {generate,fit,evaluate,active,semisynth}``.

Options come from an optional JSON config (or a previous run's manifest)
and are overridden by flags. Every artifact carries the master seed and the
resolved config, and ``manifest.json`` alone is enough to reproduce a run:
``dosegp <command> --config out/manifest.json --out elsewhere``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import traceback
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__, baselines
from .active import run_active_loop
from .affine import DEFAULT_BURN_IN, DEFAULT_ITERATIONS, DEFAULT_THIN, posterior_summary, run_mcmc
from .backdoor import build_dose_response_prior, fit_observational_model
from .data import (DoseGrid, InterventionalDataset, read_observational_csv, read_table, standardize,
                   write_interventional_csv, write_observational_csv, write_table)
from .errors import DoseGPError, InputError, MetricError
from .evaluation import DEGREE_CODES, StudyConfig, run_study
from .rng import child_seed
from .semisynth import (fit_semisynthetic_truth, make_stratified_table, run_semisynthetic_study,
                        simulate_trial, summarize_semisynthetic)
from .synth import drop_confounders, generate_problem, sample_interventional, true_dose_response

logger = logging.getLogger("dosegp")

COMMANDS = ("generate", "fit", "evaluate", "active", "semisynth")
SCALES = ("desk", "paper")
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2

REQUIRED = object()
_num = (int, float)
_opt_str = (str, type(None))
_opt_list = (list, type(None))

_COMMON = {"seed": (int, 0), "threads": (int, 1), "scale": (str, "desk")}
_MCMC = {"iterations": (int, DEFAULT_ITERATIONS), "burn_in": (int, DEFAULT_BURN_IN), "thin": (int, DEFAULT_THIN)}
_COLUMNS = {"outcome": (str, "y"), "treatment": (str, "x"), "covariates": (_opt_list, None)}
_STUDY = {
    "degree": (str, "Q"), "range_fraction": (_num, 0.5), "drop_mode": (str, "random"), "M": (int, 40),
    "N": (int, None), "p": (int, None), "drop": (int, None), "T": (int, 20),
}
_SEMI = {
    "observational": (_opt_str, None), **_COLUMNS, "stratum": (_opt_str, "stratum"),
    "grid_start": (_num, 0.0), "grid_stop": (_num, 450.0), "grid_step": (_num, 25.0),
    "gp_restarts": (int, 5), **_MCMC,
}

SCHEMAS = {
    "generate": {**_COMMON, **_STUDY},
    "fit": {
        **_COMMON, "observational": (str, REQUIRED), "interventional": (_opt_str, None), "grid": (_opt_str, None),
        "T": (int, 20), **_COLUMNS, "stratum": (_opt_str, None), "method": (str, "ours"), "gp_restarts": (int, 5),
        **_MCMC,
    },
    "evaluate": {**_COMMON, **_STUDY, "replications": (int, None), "gp_restarts": (int, 5),
                 "methods": (list, list(baselines.METHODS)), **_MCMC},
    "semisynth": {**_COMMON, **_SEMI, "replicates": (int, 10), "runs": (int, 20)},
    "active": {**_COMMON, **_SEMI, "budget": (int, None), "update_iterations": (int, 600),
               "update_burn_in": (int, 100), "update_thin": (int, 5), "refresh_every": (int, 5)},
}
_PATH_KEYS = ("observational", "interventional", "grid")
_SCALE_DEFAULTS = {
    "desk": {"N": 300, "p": 10, "drop": 6, "replications": 20},
    "paper": {"N": 1000, "p": 25, "drop": 10, "replications": 50},
}


class UsageError(InputError):
    """Bad command line or configuration."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    options: dict
    out: Path

    @property
    def seed(self) -> int:
        return self.options["seed"]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict:
    """Read a JSON config; a manifest is unwrapped to its ``config``."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_bytes().decode("utf-8", errors="replace")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise UsageError(f"malformed JSON in {path} at byte offset {offset} "
                         f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "manifest_version" in data:
        return dict(data.get("config", {})), data.get("command")
    return data, None


def parse_config(command: str, file_options: Optional[dict] = None, overrides: Optional[dict] = None,
                 out="dosegp_out", base_dir=None) -> RunConfig:
    """Validate, default, and resolve the options for ``command``.

    ``overrides`` (from flags) win over ``file_options``. Relative paths are
    resolved against ``base_dir`` (default: current directory).
    """
    if command not in SCHEMAS:
        raise UsageError(f"unknown command {command!r}; choose from {list(COMMANDS)}")
    schema = SCHEMAS[command]
    merged = dict(file_options or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r} for {command}")
    opts = {}
    for key, (types, default) in schema.items():
        if key in merged:
            value = merged[key]
            if isinstance(value, bool) or not isinstance(value, types):
                # integral floats are fine for int fields written by hand
                if types is int and isinstance(value, float) and value.is_integer():
                    value = int(value)
                else:
                    raise UsageError(f"config field {key!r} has invalid value {value!r}")
            opts[key] = value
        elif default is REQUIRED:
            raise UsageError(f"missing required config field {key!r} for {command}")
        else:
            opts[key] = default
    if opts["scale"] not in SCALES:
        raise UsageError(f"config field 'scale' must be one of {list(SCALES)}")
    if opts["threads"] < 1:
        raise UsageError("config field 'threads' must be >= 1")
    for key, value in _SCALE_DEFAULTS[opts["scale"]].items():
        if key in opts and opts[key] is None:
            opts[key] = value
    if "range_fraction" in opts:
        opts["range_fraction"] = float(opts["range_fraction"])
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for key in _PATH_KEYS:
        if opts.get(key) is not None:
            p = Path(opts[key])
            p = p if p.is_absolute() else (base / p)
            if not p.exists():
                raise UsageError(f"config field {key!r}: no such file {p}")
            opts[key] = str(p.resolve())
    _check_conflicts(command, opts)
    return RunConfig(command, opts, Path(out))


def _check_conflicts(command: str, opts: dict) -> None:
    if command == "fit":
        if opts["method"] not in baselines.METHODS:
            raise UsageError(f"config field 'method' must be one of {list(baselines.METHODS)}")
        if opts["method"] == "III" and opts["interventional"] is None:
            raise UsageError("config field 'interventional' is required for method III")
    if command in ("generate", "evaluate"):
        if opts["degree"] not in DEGREE_CODES:
            raise UsageError(f"config field 'degree' must be one of {list(DEGREE_CODES)}")
        if opts["drop"] >= opts["p"]:
            raise UsageError("config field 'drop' must be smaller than 'p'")
    if command in ("semisynth", "active") and opts["grid_step"] <= 0:
        raise UsageError("config field 'grid_step' must be positive")
    if command in ("semisynth", "active") and opts["observational"] is None and opts["stratum"] != "stratum":
        raise UsageError("config field 'stratum' conflicts with the built-in table (its column is 'stratum')")


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


class Artifacts:
    """Writes result files stamped with seed and config, then the manifest."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.files = []
        config.out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> list:
        return [f"seed: {self.config.seed}", f"config: {json.dumps(self.config.options, sort_keys=True)}"]

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.config.out / name

    def table(self, name, header, rows):
        write_table(self.path(name), header, rows, self.stamp)

    def json(self, name, payload: dict):
        body = {"seed": self.config.seed, "config": self.config.options, **payload}
        self.path(name).write_text(json.dumps(body, indent=1, sort_keys=True, default=_jsonable) + "\n")

    def manifest(self, started: float, status: str = "ok"):
        digests = {n: hashlib.sha256((self.config.out / n).read_bytes()).hexdigest() for n in self.files}
        body = {
            "manifest_version": 1,
            "command": self.config.command,
            "seed": self.config.seed,
            "config": self.config.options,
            "status": status,
            "versions": {"dosegp": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "wall_time_seconds": round(time.perf_counter() - started, 3),
            "outputs": digests,
        }
        (self.config.out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _grid_from(opts) -> DoseGrid:
    n = int(round((opts["grid_stop"] - opts["grid_start"]) / opts["grid_step"])) + 1
    if n < 2:
        raise UsageError("grid_start/grid_stop/grid_step give fewer than two doses")
    return DoseGrid(opts["grid_start"] + opts["grid_step"] * np.arange(n))


def _observational(opts, art: Optional[Artifacts] = None):
    if opts["observational"] is None:
        obs = make_stratified_table(seed=child_seed(opts["seed"], 0))
        if art is not None:
            write_observational_csv(art.path("observational.csv"), obs, comments=art.stamp)
        return obs
    return read_observational_csv(opts["observational"], opts["outcome"], opts["treatment"],
                                  opts["covariates"], opts["stratum"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(config: RunConfig, art: Artifacts) -> None:
    o = config.options
    seed = o["seed"]
    if o["M"] % o["T"]:
        raise UsageError(f"config field 'M' must be a multiple of T={o['T']}")
    alpha = StudyConfig(range_fraction=o["range_fraction"]).alpha
    problem, obs = generate_problem(o["p"], o["N"], DEGREE_CODES[o["degree"]], alpha, seed=child_seed(seed, 0))
    kept, dropped = drop_confounders(problem, obs, o["drop_mode"], o["drop"], rng=child_seed(seed, 1))
    grid = DoseGrid.evenly_spaced(float(obs.x.min()), float(obs.x.max()), o["T"])
    intv = sample_interventional(problem, grid.levels, o["M"] // o["T"], child_seed(seed, 2))
    write_observational_csv(art.path("observational.csv"), kept, comments=art.stamp)
    write_observational_csv(art.path("observational_full.csv"), obs, comments=art.stamp)
    write_interventional_csv(art.path("interventional.csv"), intv, comments=art.stamp)
    art.table("grid.csv", ["dose"], ((d,) for d in grid.levels))
    art.table("truth.csv", ["dose", "f"], zip(grid.levels, true_dose_response(problem, grid.levels)))
    art.json("problem.json", {"problem": problem.to_dict(), "dropped": [int(i) for i in dropped]})


def _read_grid(path) -> DoseGrid:
    header, rows = read_table(path)
    if "dose" not in header:
        raise InputError(f"{path} needs a 'dose' column")
    j = header.index("dose")
    try:
        return DoseGrid(np.array([float(r[j]) for r in rows]))
    except ValueError as exc:
        raise InputError(f"non-numeric dose in {path}") from exc


def _read_interventional(path, opts, labels):
    """Interventional rows keyed by stratum (``None`` when unstratified)."""
    header, rows = read_table(path)
    cols = {}
    for key in ("outcome", "treatment"):
        if opts[key] not in header:
            raise InputError(f"column {opts[key]!r} not found in {path}")
        cols[key] = header.index(opts[key])
    try:
        y = np.array([float(r[cols["outcome"]]) for r in rows])
        x = np.array([float(r[cols["treatment"]]) for r in rows])
    except ValueError as exc:
        raise InputError(f"non-numeric value in {path}") from exc
    if opts["stratum"] is None:
        return {None: InterventionalDataset(y, x)}
    if opts["stratum"] not in header:
        raise InputError(f"column {opts['stratum']!r} not found in {path}")
    s = np.array([r[header.index(opts["stratum"])] for r in rows])
    return {lb: InterventionalDataset(y[s == lb], x[s == lb]) for lb in labels}


def cmd_fit(config: RunConfig, art: Artifacts) -> None:
    o = config.options
    obs = read_observational_csv(o["observational"], o["outcome"], o["treatment"], o["covariates"], o["stratum"])
    if o["grid"] is not None:
        grid = _read_grid(o["grid"])
    else:
        grid = DoseGrid.evenly_spaced(float(obs.x.min()), float(obs.x.max()), o["T"])
    if o["stratum"] is None:
        groups = {None: obs}
    else:
        groups = {lb: obs.subset(np.flatnonzero(obs.strata == lb)) for lb in sorted(set(obs.strata.tolist()))}
    if o["interventional"] is not None:
        intv = _read_interventional(o["interventional"], o, list(groups))
    else:
        intv = {lb: InterventionalDataset.empty() for lb in groups}

    out_rows, fits = [], {}
    for k, (label, group) in enumerate(groups.items()):
        obs_s, int_s, moments = standardize(group, intv[label])
        grid_s = DoseGrid(moments.x_forward(grid.levels))
        fit = _fit_method(o, obs_s, int_s, grid_s, child_seed(o["seed"], k))
        mean = moments.y_inverse(fit.mean)
        var = moments.var_inverse(fit.variance)
        for d, m, v in zip(grid.levels, mean, var):
            out_rows.append((label if label is not None else "", d, m, v))
        fits[str(label)] = {"hyper": fit.hyper, "moments": moments.to_dict()}
    art.table("summary.csv", ["stratum", "dose", "mean", "variance"], out_rows)
    art.json("fit.json", {"method": o["method"], "strata": fits})


def _fit_method(o, obs_s, int_s, grid_s, seed):
    method = o["method"]
    mcmc = dict(iterations=o["iterations"], burn_in=o["burn_in"], thin=o["thin"])
    if method == "III":
        return baselines.fit_competitor_III(int_s, grid_s, seed=child_seed(seed, 1))
    if method == "IV":
        return baselines.fit_competitor_IV(obs_s, grid_s, seed=child_seed(seed, 1))
    model = fit_observational_model(obs_s, restarts=o["gp_restarts"], seed=child_seed(seed, 0))
    prior = build_dose_response_prior(model, obs_s, grid_s)
    if method == "ours":
        return baselines.fit_affine_model(prior, int_s, seed=child_seed(seed, 1), **mcmc)
    if method == "V":
        return baselines.fit_competitor_V(prior, int_s, seed=child_seed(seed, 1), **mcmc)
    if method == "I":
        return baselines.fit_competitor_I(prior, int_s)
    return baselines.fit_competitor_II(prior, int_s, seed=child_seed(seed, 1))


def study_config(opts: dict) -> StudyConfig:
    names = {f.name for f in fields(StudyConfig)}
    kwargs = {k: v for k, v in opts.items() if k in names}
    kwargs["methods"] = tuple(opts["methods"])
    try:
        return StudyConfig(**kwargs)
    except InputError as exc:
        raise UsageError(str(exc)) from exc


def cmd_evaluate(config: RunConfig, art: Artifacts) -> None:
    study = study_config(config.options)
    result = run_study(study)
    rows = []
    for r in result.rows:
        for metric in ("E", "L"):
            rows.append((r["replication"], r["method"], metric, r[metric]))
    art.table("results.csv", ["replication", "method", "metric", "value"], rows)
    art.json("summary.json", {"summary": result.summary(), "metadata": result.metadata,
                              "failures": result.failures})


def cmd_semisynth(config: RunConfig, art: Artifacts) -> None:
    o = config.options
    obs = _observational(o, art)
    truths = fit_semisynthetic_truth(obs, _grid_from(o), stratified=obs.strata is not None,
                                     restarts=o["gp_restarts"], seed=child_seed(o["seed"], 1))
    rows = run_semisynthetic_study(truths, o["replicates"], o["runs"], seed=child_seed(o["seed"], 2),
                                   iterations=o["iterations"], burn_in=o["burn_in"], thin=o["thin"],
                                   gp_restarts=o["gp_restarts"])
    art.json("truth.json", {"truths": {str(k): t.to_dict() for k, t in truths.items()}})
    art.table("results.csv", ["run", "stratum", "method", "E", "L"],
              ((r["run"], r["stratum"] if r["stratum"] is not None else "", r["method"], r["E"], r["L"])
               for r in rows))
    art.json("summary.json", {"summary": summarize_semisynthetic(rows)})


def cmd_active(config: RunConfig, art: Artifacts) -> None:
    o = config.options
    obs = _observational(o, art)
    truths = fit_semisynthetic_truth(obs, _grid_from(o), stratified=obs.strata is not None,
                                     restarts=o["gp_restarts"], seed=child_seed(o["seed"], 1))
    T = len(next(iter(truths.values())).grid)
    budget = 5 * T if o["budget"] is None else o["budget"]
    priors = {label: t.prior() for label, t in truths.items()}

    def oracle(label, dose, rng):
        return simulate_trial(truths[label], [dose], 1, rng).y[0]

    result = run_active_loop(priors, oracle, budget, seed=child_seed(o["seed"], 2),
                             iterations=o["iterations"], burn_in=o["burn_in"], thin=o["thin"],
                             update_iterations=o["update_iterations"], update_burn_in=o["update_burn_in"],
                             update_thin=o["update_thin"], refresh_every=o["refresh_every"])
    _write_active(art, truths, result, budget)


def _write_active(art, truths, result, budget):
    def raw_dose(label, dose):
        return float(truths[label].moments.x_inverse(dose))

    def name(label):
        return label if label is not None else ""

    art.table("history.csv", ["step", "stratum", "dose", "y", "refresh"],
              ((h["step"], name(h["stratum"]), raw_dose(h["stratum"], h["dose"]), h["y"], int(h["refresh"]))
               for h in result.history))
    rows = []
    for label, samples in result.samples.items():
        mean, var = posterior_summary(samples)
        counts = np.bincount(truths[label].grid.index_of(result.data[label].x), minlength=len(mean))
        for j, d in enumerate(truths[label].raw_grid.levels):
            rows.append((name(label), d, mean[j], var[j], truths[label].mean[j], int(counts[j])))
    art.table("posterior.csv", ["stratum", "dose", "mean", "variance", "truth", "n"], rows)
    endpoints = sum(h["dose_index"] in (0, len(truths[h["stratum"]].grid) - 1) for h in result.history)
    art.json("summary.json", {"budget": budget, "selections": len(result.history),
                              "per_stratum": {str(k): v for k, v in result.counts().items()},
                              "endpoint_fraction": endpoints / len(result.history) if result.history else None})


HANDLERS = {"generate": cmd_generate, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "semisynth": cmd_semisynth, "active": cmd_active}


def execute(config: RunConfig) -> int:
    started = time.perf_counter()
    art = Artifacts(config)
    HANDLERS[config.command](config, art)
    art.manifest(started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argv
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dosegp", description="Dose-response estimation from observational and interventional data.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config or a previous run's manifest.json")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out", default="dosegp_out", help="output directory")
    parser.add_argument("--threads", type=int, help="worker threads for replicated studies")
    parser.add_argument("--scale", choices=SCALES, help="study size defaults (desk or paper)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field; VALUE is parsed as JSON when possible")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _parse_sets(items) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _provenance(exc: BaseException) -> str:
    module = "dosegp"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("dosegp"):
            module = name
    return module


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        file_options, base_dir = {}, None
        if args.config:
            file_options, manifest_command = load_config_file(args.config)
            if manifest_command is not None and manifest_command != args.command:
                raise UsageError(f"manifest is for command {manifest_command!r}, not {args.command!r}")
        overrides = {"seed": args.seed, "threads": args.threads, "scale": args.scale, **_parse_sets(args.set)}
        config = parse_config(args.command, file_options, overrides, out=args.out, base_dir=base_dir)
        return execute(config)
    except (InputError, MetricError) as exc:
        print(f"error [{_provenance(exc)}] input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DoseGPError as exc:
        print(f"error [{_provenance(exc)}] numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArithmeticError, MemoryError, np.linalg.LinAlgError) as exc:
        print(f"error [{_provenance(exc)}] numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
