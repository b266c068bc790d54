"""Command-line entry point: ``robustq simulate | fit | report``.

A JSON config file supplies settings; command-line flags override it. The
resolved config is echoed into every output together with its SHA-256 hash
and the library version. Exit codes: 0 success, 2 config or input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .bootstrap import MULTIPLIER_KINDS
from .data import Dataset, ModelSet, read_trajectory_csv
from .estimator import RobustQLearner
from .exceptions import (ConfigurationError, NumericalError, ReplicationError,
                         SingularityError)
from .inference import FLAVORS
from .nuisance import as_learner
from .selection import SELECTOR_KINDS, SelectorSpec
from .simulation import SCENARIOS, SimConfig, run_replications, scenario

log = logging.getLogger("robustq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MODES = ("simulate", "fit", "report")
NUISANCES = ("propensity2", "outcome2", "propensity1", "outcome1")


class ConfigError(ConfigurationError):
    """Schema violation, reported with the offending field."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    """Validated run settings; see ``README.md`` for the JSON schema."""

    mode: str
    seed: int
    scenario: list = field(default_factory=lambda: ["C"])
    n: list = field(default_factory=lambda: [500])
    input: str | None = None
    output: str = "robustq-out"
    reps: int = 10
    B: int = 1000
    K: int = 5
    alpha: float = 0.05
    p1: int = 10
    selector: str = "forward-stepwise"
    size: int = 5
    hierarchy: bool = False
    model1: list | None = None
    model2: list | None = None
    C1: int = 6
    C2: int = 6
    learners: dict = field(default_factory=lambda: {k: "linear" for k in NUISANCES})
    multiplier: str = "exponential"
    eps: float = 0.01
    mc_n: int = 1_000_000
    mc_seed: int = 0
    stage2_input: str = "x2"
    interactions: bool = False
    n_jobs: int = 1
    dump_draws: bool = False

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def hash(self) -> str:
        """SHA-256 of the settings that determine results (not output path or workers)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("n_jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_FIELDS = set(RunConfig.__dataclass_fields__)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _require(cond, name, msg):
    if not cond:
        raise ConfigError(name, msg)


def validate_config(raw: dict) -> RunConfig:
    """Check types and ranges field by field and build a :class:`RunConfig`."""
    unknown = sorted(set(raw) - _FIELDS)
    _require(not unknown, unknown[0] if unknown else "", "unknown key")
    _require("mode" in raw, "mode", "required")
    _require(raw["mode"] in MODES, "mode", f"must be one of {MODES}")
    if raw["mode"] == "report":
        raw = {"seed": 0, **raw}
    _require("seed" in raw, "seed", "required (no implicit entropy)")
    _require(_is_int(raw["seed"]) and 0 <= raw["seed"] < 2**64, "seed",
             "must be an integer in [0, 2^64)")
    d = dict(raw)
    for key in ("scenario", "n"):
        if key in d and not isinstance(d[key], list):
            d[key] = [d[key]]
    cfg = RunConfig(**d)
    for s in cfg.scenario:
        _require(s in SCENARIOS, "scenario", f"unknown scenario {s!r}")
    _require(len(cfg.scenario) > 0, "scenario", "must not be empty")
    for v in cfg.n:
        _require(_is_int(v) and v >= 2, "n", "must be integers >= 2")
    for name, lo in (("reps", 1), ("B", 100), ("K", 2), ("p1", 5), ("size", 0), ("C1", 1),
                     ("C2", 1), ("mc_n", 100_000), ("n_jobs", 1), ("mc_seed", 0)):
        v = getattr(cfg, name)
        _require(_is_int(v) and v >= lo, name, f"must be an integer >= {lo}")
    _require(isinstance(cfg.alpha, (int, float)) and not isinstance(cfg.alpha, bool)
             and 0.0 < cfg.alpha < 1.0, "alpha", "must lie in (0, 1)")
    _require(isinstance(cfg.eps, (int, float)) and 0.0 < cfg.eps < 0.5, "eps",
             "must lie in (0, 0.5)")
    _require(cfg.selector in SELECTOR_KINDS, "selector", f"must be one of {SELECTOR_KINDS}")
    _require(cfg.multiplier in MULTIPLIER_KINDS, "multiplier",
             f"must be one of {MULTIPLIER_KINDS}")
    _require(cfg.stage2_input in ("x2", "history"), "stage2_input", "must be 'x2' or 'history'")
    for name in ("hierarchy", "interactions", "dump_draws"):
        _require(isinstance(getattr(cfg, name), bool), name, "must be true or false")
    if cfg.selector == "fixed":
        for name in ("model1", "model2"):
            v = getattr(cfg, name)
            _require(isinstance(v, list) and v and all(_is_int(i) and i >= 1 for i in v),
                     name, "fixed selector needs a list of 1-based indices")
    _require(isinstance(cfg.learners, dict), "learners", "must be an object")
    bad = sorted(set(cfg.learners) - set(NUISANCES))
    _require(not bad, f"learners.{bad[0]}" if bad else "learners", "unknown nuisance")
    learners = {k: "linear" for k in NUISANCES}
    learners.update(cfg.learners)
    for k, v in learners.items():
        if cfg.mode == "simulate" and v == "oracle":
            continue
        try:
            spec = as_learner(v)
        except (ConfigurationError, TypeError) as exc:
            raise ConfigError(f"learners.{k}", str(exc)) from None
        _require(spec.kind != "oracle", f"learners.{k}", "oracle learners only in simulate mode")
    cfg.learners = learners
    try:
        cfg_selectors(cfg)
    except ConfigurationError as exc:
        raise ConfigError("selector", str(exc)) from None
    if cfg.mode in ("fit", "report"):
        _require(isinstance(cfg.input, str) and cfg.input, "input", f"required in {cfg.mode} mode")
    return cfg


def cfg_selectors(cfg: RunConfig):
    def one(model, cap):
        m = None if model is None else tuple(i - 1 for i in model)
        return SelectorSpec(kind=cfg.selector, size=cfg.size, model=m,
                            hierarchy=cfg.hierarchy, cap=cap)
    return one(cfg.model2, cfg.C2), one(cfg.model1, cfg.C1)


def _flag_overrides(args) -> dict:
    out = {}
    simple = ("seed", "input", "output", "reps", "B", "K", "alpha", "p1", "selector", "size",
              "C1", "C2", "multiplier", "eps", "mc_n", "mc_seed", "stage2_input", "n_jobs")
    for name in simple:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    if getattr(args, "scenario", None):
        out["scenario"] = args.scenario
    if getattr(args, "n", None):
        out["n"] = args.n
    for name in ("hierarchy", "interactions", "dump_draws"):
        if getattr(args, name, False):
            out[name] = True
    for k in NUISANCES:
        v = getattr(args, k, None)
        if v is not None:
            out.setdefault("learners", {})[k] = v
    return out


def parse_config(argv_or_args) -> RunConfig:
    """Merge the JSON config file (if any) with flag overrides and validate."""
    args = argv_or_args if isinstance(argv_or_args, argparse.Namespace) \
        else build_parser().parse_args(argv_or_args)
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"file {path} does not exist")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    if "mode" in raw and raw["mode"] != args.command:
        raise ConfigError("mode", f"config says {raw['mode']!r} but command is {args.command!r}")
    raw["mode"] = args.command
    flags = _flag_overrides(args)
    if "learners" in flags and isinstance(raw.get("learners"), dict):
        flags["learners"] = {**raw["learners"], **flags["learners"]}
    raw.update(flags)
    return validate_config(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"robustq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for mode in MODES:
        s = sub.add_parser(mode)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--output", "-o")
        s.add_argument("--input", "-i")
        s.add_argument("--verbose", "-v", action="store_true")
        if mode == "report":
            continue
        s.add_argument("--B", type=int)
        s.add_argument("--K", type=int)
        s.add_argument("--alpha", type=float)
        s.add_argument("--selector", choices=SELECTOR_KINDS)
        s.add_argument("--size", type=int)
        s.add_argument("--C1", type=int)
        s.add_argument("--C2", type=int)
        s.add_argument("--hierarchy", action="store_true")
        s.add_argument("--interactions", action="store_true")
        s.add_argument("--multiplier", choices=MULTIPLIER_KINDS)
        s.add_argument("--eps", type=float)
        s.add_argument("--stage2-input", dest="stage2_input", choices=("x2", "history"))
        s.add_argument("--dump-draws", dest="dump_draws", action="store_true")
        for k in NUISANCES:
            s.add_argument(f"--{k}", choices=("linear", "knn", "kernel", "oracle"))
        if mode == "simulate":
            s.add_argument("--scenario", nargs="+")
            s.add_argument("--n", type=int, nargs="+")
            s.add_argument("--reps", type=int)
            s.add_argument("--p1", type=int)
            s.add_argument("--mc-n", dest="mc_n", type=int)
            s.add_argument("--mc-seed", dest="mc_seed", type=int)
            s.add_argument("--n-jobs", dest="n_jobs", type=int)
    return p


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def _provenance(cfg: RunConfig) -> dict:
    return {"version": __version__, "config_hash": cfg.hash(), "config": cfg.to_dict()}


def _write_csv(path: Path, cfg: RunConfig, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# robustq {__version__} config_sha256={cfg.hash()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    sel2, sel1 = cfg_selectors(cfg)
    per_rep, metrics, agg = [], [], []
    for label in cfg.scenario:
        for n in cfg.n:
            spec = scenario(label, p1=cfg.p1, n=n)
            sim = SimConfig(n=n, B=cfg.B, alpha=cfg.alpha, K=cfg.K, learners=dict(cfg.learners),
                            selector2=sel2, selector1=sel1, law=cfg.multiplier, mc_n=cfg.mc_n,
                            mc_seed=cfg.mc_seed, eps=cfg.eps, stage2_input=cfg.stage2_input)
            log.info("scenario %s, n=%d, %d reps", label, n, cfg.reps)
            m, results = run_replications(spec, cfg.reps, sim, seed=cfg.seed, n_jobs=cfg.n_jobs)
            metrics.append(m.to_dict())
            for r in results:
                for row in r["rows"]:
                    per_rep.append({"scenario": label, "n": n, "seed": str(r["seed"]), **row})
            for stage_key, by_flavor in m.median_length.items():
                for flavor, med in by_flavor.items():
                    agg.append({"scenario": label, "n": n, "method": flavor,
                                "stage": int(stage_key[-1]),
                                "fcr": m.fcr.get(stage_key, {}).get(flavor),
                                "median_length": med,
                                "rejection_rate": m.rejection_rate[stage_key]})
    _write_csv(out / "per_rep.csv", cfg,
               ["scenario", "n", "rep", "seed", "stage", "flavor", "coordinate", "center",
                "half_length", "target", "covered", "selected_model"], per_rep)
    _write_csv(out / "aggregated.csv", cfg,
               ["scenario", "n", "method", "stage", "fcr", "median_length", "rejection_rate"],
               agg)
    _write_json(out / "metrics.json", {**_provenance(cfg), "metrics": metrics})
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    x1, a1, x2, a2, y = read_trajectory_csv(cfg.input)
    ds = Dataset.from_arrays(x1, a1, x2, a2, y, stage2_input=cfg.stage2_input,
                             interactions=cfg.interactions)
    if cfg.K > ds.n:
        raise ConfigError("K", f"K={cfg.K} exceeds the number of trajectories n={ds.n}")
    est = estimator_from_config(cfg).fit_dataset(ds)
    out.mkdir(parents=True, exist_ok=True)
    report = est.fit_.to_report(ds)
    for s in (1, 2):
        report["stages"][str(s)]["radii"] = est.radii(s)
        report["stages"][str(s)]["null_test"] = est.null_test(s)
    report["bootstrap"] = {"B": est.draws_.B, "rejected": list(est.draws_.rejected),
                           "law": est.draws_.law}
    _write_json(out / "twostagefit.json", {**_provenance(cfg), "fit": report})
    header = (["stage", "coordinate", "term", "center"]
              + [f"half_length_{f}" for f in FLAVORS] + ["null_test"])
    _write_csv(out / "intervals.csv", cfg, header, est.summary())
    if cfg.dump_draws:
        est.draws_.to_csv(out / "bootstrap_draws.csv")
    return EXIT_OK


def estimator_from_config(cfg: RunConfig) -> RobustQLearner:
    to0 = (lambda m: None if m is None else [i - 1 for i in m])
    return RobustQLearner(
        propensity2=cfg.learners["propensity2"], outcome2=cfg.learners["outcome2"],
        propensity1=cfg.learners["propensity1"], outcome1=cfg.learners["outcome1"],
        K=cfg.K, selector=cfg.selector, size=cfg.size, cap2=cfg.C2, cap1=cfg.C1,
        hierarchy=cfg.hierarchy, model2=to0(cfg.model2), model1=to0(cfg.model1), B=cfg.B,
        multiplier=cfg.multiplier, alpha=cfg.alpha, eps=cfg.eps,
        stage2_input=cfg.stage2_input, interactions=cfg.interactions,
        random_state=cfg.seed)


def cmd_report(cfg: RunConfig) -> int:
    """Print a plain-text table from a ``metrics.json`` (file or directory)."""
    path = Path(cfg.input)
    if path.is_dir():
        path = path / "metrics.json"
    if not path.is_file():
        raise ConfigError("input", f"{path} not found")
    payload = json.loads(path.read_text(encoding="utf-8"))
    print(f"robustq {payload.get('version')} config {payload.get('config_hash', '')[:12]}")
    print(f"{'scen':>4} {'n':>6} {'stage':>5} {'method':<28} {'fcr':>7} {'median_len':>10}")
    for m in payload["metrics"]:
        for stage_key, by_flavor in m["median_length"].items():
            for flavor, med in by_flavor.items():
                fcr = m["fcr"].get(stage_key, {}).get(flavor)
                fcr_s = "   -   " if fcr is None else f"{fcr:7.4f}"
                print(f"{m['scenario']:>4} {m['n']:>6} {stage_key[-1]:>5} {flavor:<28} "
                      f"{fcr_s} {med:10.4f}")
        print(f"{'':>4} null-test rejection: {m['rejection_rate']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args)
        return {"simulate": cmd_simulate, "fit": cmd_fit, "report": cmd_report}[cfg.mode](cfg)
    except ReplicationError as exc:
        print(f"error: {exc} (replay with rep={exc.rep}, seed={exc.seed})", file=sys.stderr)
        cause = exc.__cause__
        return EXIT_NUMERIC if isinstance(cause, (NumericalError, SingularityError)) \
            else EXIT_CONFIG
    except SingularityError as exc:
        model = None if exc.model is None else ModelSet.of(exc.model, exc.stage or 1).one_based()
        print(f"numerical error: singular stage-{exc.stage} submodel {model}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        line = getattr(exc, "line", None)
        where = f" (line {line})" if line else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
