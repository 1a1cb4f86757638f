"""Command-line entry point: ``popdynrec <command> [options]``.

Commands: preprocess, popdyn, train, eval, transfer, interpolate, leakage,
params-report, synth.

Option values resolve as: command-line flag, then ``PDREC_<NAME>``
environment variable, then the JSON ``--config`` file (top-level keys, then a
section named after the command), then the built-in defaults below. Every
command that writes artifacts writes them into one run directory together with
a ``manifest-<command>.json`` describing the resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, PopDynError
from .evaluation import (EvalConfig, EvalReport, evaluate, interpolate, leakage_audit, load_score_file,
                         mostpop_baseline, write_score_file, zero_shot)
from .ingest import build_split, load_dataset, parse_log, save_dataset
from .model import ModelConfig, count_params, git_describe, load_checkpoint, param_shapes, save_checkpoint
from .popdyn import TimeBucketing, build_popularity, load_popularity, save_popularity
from .synth import SynthSpec, synth_generate
from .train import LR_GRID, TrainConfig, fit, summarize_runs

log = logging.getLogger("popdynrec")

ENV_PREFIX = "PDREC_"

COMMON = {"seed": (int, 0), "threads": (int, 1), "run_root": (str, "runs"), "out": (str, None)}

# name -> (type, built-in default) per command
DEFAULTS = {
    "preprocess": {"input": (str, None), "format": (str, "csv"), "columns": (str, "user=0,item=1,timestamp=2"),
                   "header": (bool, False), "delimiter": (str, None), "cache_format": (str, "binary")},
    "popdyn": {"dataset": (str, None), "gamma": (float, 0.5), "fine_days": (float, 7.0),
               "coarse_fine_ratio": (int, 4), "calendar": (bool, False), "k": (int, 11), "m": (int, 12),
               "n": (int, 4), "include_inactive": (bool, False), "exclude_holdout": (bool, False)},
    "train": {"dataset": (str, None), "popcache": (str, None), "seeds": (int, 1), "epochs": (int, 80),
              "lr": (float, 1e-3), "lr_grid": (bool, False), "batch_size": (int, 128),
              "weight_decay": (float, 1e-5), "patience": (int, 10), "negatives": (int, 1),
              "loss": (str, "bce"), "d": (int, 50), "heads": (int, 2), "layers": (int, 2),
              "max_len": (int, 200), "dropout": (float, 0.3), "offset": (int, 1), "eval_k": (int, 10)},
    "eval": {"dataset": (str, None), "popcache": (str, None), "checkpoint": (list, None),
             "baseline": (str, None), "split": (str, "test"), "k": (list, [10, 20]),
             "eval_negatives": (int, 100), "write_scores": (bool, False)},
    "transfer": {"dataset": (str, None), "popcache": (str, None), "checkpoint": (str, None),
                 "split": (str, "test"), "k": (list, [10, 20]), "eval_negatives": (int, 100)},
    "interpolate": {"ours": (str, None), "external": (str, None), "alpha": (float, 0.5)},
    "leakage": {"dataset": (str, None)},
    "params-report": {"d": (int, 50), "heads": (int, 2), "layers": (int, 2), "max_len": (int, 200),
                      "k": (int, 11), "m": (int, 12), "n": (int, 4), "dataset": (list, None)},
    "synth": {"users": (int, 2000), "items": (int, 500), "horizon_days": (int, 728),
              "events_per_user": (float, 20.0), "trend_strength": (float, 0.8), "id_prefix": (str, ""),
              "cache_format": (str, "binary"), "csv": (bool, False)},
}

# commands that only print to stdout
NO_ARTIFACTS = {"params-report"}


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_seconds: float = 0.0
    version: str = __version__
    git_describe: str = ""
    created_utc: str = ""

    def write(self, run_dir: Path) -> Path:
        path = run_dir / f"manifest-{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------

def _coerce(kind, value, name: str):
    if value is None:
        return None
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off", ""):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is list:
            if isinstance(value, str):
                return [v for v in value.replace(",", " ").split()]
            return list(value) if isinstance(value, (list, tuple)) else [value]
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve(command: str, args: argparse.Namespace, environ=None) -> dict:
    """Merge flags, environment, config file and defaults for ``command``."""
    environ = os.environ if environ is None else environ
    file_cfg = load_config_file(getattr(args, "config", None))
    section = file_cfg.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {command!r} must be an object")
    top = {k: v for k, v in file_cfg.items() if not isinstance(v, dict)}
    unknown = (set(top) | set(section)) - set(COMMON) - set().union(*(set(d) for d in DEFAULTS.values()))
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for name, (kind, default) in {**COMMON, **DEFAULTS[command]}.items():
        flag = getattr(args, name, None)
        env = environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
        if flag is not None:
            value = flag
        elif env is not None:
            value = env
        elif name in section:
            value = section[name]
        elif name in top:
            value = top[name]
        else:
            value = default
        out[name] = _coerce(kind, value, name)
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k not in ("out", "run_root")}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def run_directory(command: str, cfg: dict) -> Path:
    if cfg.get("out"):
        path = Path(cfg["out"])
    else:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = Path(cfg["run_root"]) / f"{stamp}-{command}-{config_hash(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if not cfg.get(n)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _dataset_ext(fmt: str) -> str:
    if fmt not in ("binary", "ndjson"):
        raise ConfigError(f"cache format must be 'binary' or 'ndjson', got {fmt!r}")
    return "pdr" if fmt == "binary" else "ndjson"


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _table_for(ds, cfg: dict, signature: dict | None = None):
    """Load ``--popcache`` if given, else build one for ``ds``."""
    if cfg.get("popcache"):
        table = load_popularity(cfg["popcache"])
        if table.item_ids != ds.item_ids:
            raise DataError("popularity cache was built for a different item catalog")
        return table
    sig = signature or {}
    if sig:
        tb = TimeBucketing(int(ds.timestamps.min()), int(sig["fine_len"]), int(sig["coarse_len"]),
                           bool(sig.get("calendar", False)))
        return build_popularity(ds, tb, gamma=sig["gamma"], k=sig["k"], m=sig["m"], n=sig["n"],
                                include_inactive=bool(sig.get("include_inactive", False)))
    log.info("no --popcache given; building popularity with default settings")
    return build_popularity(ds)


def _k_list(cfg: dict) -> tuple:
    return tuple(_coerce(int, k, "k") for k in cfg["k"])


# ---------------------------------------------------------------------------
# commands; each returns (outputs, inputs, seeds) for the manifest
# ---------------------------------------------------------------------------

def cmd_preprocess(cfg: dict, run_dir: Path):
    _require(cfg, "input")
    columns = {}
    for part in cfg["columns"].split(","):
        key, _, col = part.partition("=")
        if not col:
            raise ConfigError(f"--columns entries look like name=column, got {part!r}")
        columns[key.strip()] = int(col) if col.strip().isdigit() else col.strip()
    ds = parse_log(cfg["input"], cfg["format"], columns, cfg["delimiter"], cfg["header"])
    ds = build_split(ds)
    out = run_dir / f"dataset.{_dataset_ext(cfg['cache_format'])}"
    save_dataset(ds, out, cfg["cache_format"])
    stats = ds.stats()
    stats["skipped_rows"] = len(ds.parse_errors)
    for err in ds.parse_errors[:5]:
        log.warning("skipped line %d: %s", err.line, err.message)
    _print_json(stats)
    return [out], {cfg["input"]: file_digest(cfg["input"])}, []


def cmd_popdyn(cfg: dict, run_dir: Path):
    _require(cfg, "dataset")
    ds = load_dataset(cfg["dataset"])
    tb = TimeBucketing.for_dataset(ds, cfg["fine_days"], cfg["coarse_fine_ratio"], cfg["calendar"])
    table = build_popularity(ds, tb, gamma=cfg["gamma"], k=cfg["k"], m=cfg["m"], n=cfg["n"],
                             include_inactive=cfg["include_inactive"], exclude_holdout=cfg["exclude_holdout"])
    out = run_dir / "popularity.pdp"
    save_popularity(table, out)
    _print_json({"items": table.n_items, "fine_periods": table.n_fine, "coarse_periods": table.n_coarse,
                 **table.signature()})
    return [out], {cfg["dataset"]: file_digest(cfg["dataset"])}, []


def cmd_train(cfg: dict, run_dir: Path):
    _require(cfg, "dataset")
    ds = load_dataset(cfg["dataset"])
    table = _table_for(ds, cfg)
    if cfg["seeds"] < 1:
        raise ConfigError("--seeds must be >= 1")
    mcfg = ModelConfig(d=cfg["d"], h=cfg["heads"], layers=cfg["layers"], L=cfg["max_len"],
                       k=table.k, m=table.m, n=table.n, dropout=cfg["dropout"], gamma=table.gamma,
                       offset=cfg["offset"])
    grid = LR_GRID if cfg["lr_grid"] else (cfg["lr"],)
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    outputs, runs = [], []
    ecfg_k = (cfg["eval_k"],)
    for seed in seeds:
        best = None
        tried = {}
        for lr in grid:
            tcfg = TrainConfig(batch_size=cfg["batch_size"], max_epochs=cfg["epochs"], lr=lr,
                               weight_decay=cfg["weight_decay"], negatives_per_positive=cfg["negatives"],
                               patience=cfg["patience"], seed=seed, loss=cfg["loss"])
            res = fit(ds, table, mcfg, tcfg, eval_k=cfg["eval_k"])
            tried[str(lr)] = res.best_val_ndcg
            if best is None or res.best_val_ndcg > best[1].best_val_ndcg:
                best = (lr, res)
        lr, res = best
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        ckpt = seed_dir / "model.ckpt"
        save_checkpoint(ckpt, res.model, seed=seed, dataset_fingerprint=ds.fingerprint(),
                        popularity=table.signature(), extra={"lr": lr, "best_epoch": res.best_epoch})
        curve = seed_dir / "curve.json"
        curve.write_text(json.dumps(res.curve, indent=1) + "\n", encoding="utf-8")
        test = evaluate(res.model, ds, table, EvalConfig(k_list=ecfg_k, seed=seed, offset=mcfg.offset))
        runs.append({"seed": seed, "lr": lr, "lr_search": tried, "best_epoch": res.best_epoch,
                     "best_val_ndcg": res.best_val_ndcg, "test": test.summary(),
                     "digest": res.model.digest()})
        outputs += [ckpt, curve]
    k = cfg["eval_k"]
    summary = {"runs": runs,
               f"test_R@{k}": summarize_runs([r["test"][f"R@{k}"] for r in runs]),
               f"test_N@{k}": summarize_runs([r["test"][f"N@{k}"] for r in runs]),
               "model": mcfg.to_dict(), "parameters": count_params(mcfg)}
    out = run_dir / "train_summary.json"
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print_json({key: summary[key] for key in (f"test_R@{k}", f"test_N@{k}")})
    inputs = {cfg["dataset"]: file_digest(cfg["dataset"])}
    if cfg.get("popcache"):
        inputs[cfg["popcache"]] = file_digest(cfg["popcache"])
    return outputs + [out], inputs, seeds


def _report_outputs(report: EvalReport, run_dir: Path, stem: str, write_scores: bool) -> list:
    path = run_dir / f"{stem}.ndjson"
    report.save(path)
    outs = [path]
    if write_scores:
        spath = run_dir / f"{stem}-scores.ndjson"
        write_score_file(report, spath)
        outs.append(spath)
    return outs


def cmd_eval(cfg: dict, run_dir: Path):
    _require(cfg, "dataset")
    if not cfg["checkpoint"] and not cfg["baseline"]:
        raise ConfigError("eval needs --checkpoint or --baseline mostpop")
    if cfg["baseline"] not in (None, "mostpop"):
        raise ConfigError(f"unknown baseline {cfg['baseline']!r}")
    ds = load_dataset(cfg["dataset"])
    inputs = {cfg["dataset"]: file_digest(cfg["dataset"])}
    outputs, summaries = [], {}
    k_list = _k_list(cfg)
    if cfg["baseline"]:
        ecfg = EvalConfig(k_list=k_list, negatives=cfg["eval_negatives"], seed=cfg["seed"])
        report = mostpop_baseline(ds, ecfg, cfg["split"])
        outputs += _report_outputs(report, run_dir, "report-mostpop", cfg["write_scores"])
        summaries["mostpop"] = report.summary()
    ckpts = cfg["checkpoint"] or []
    for i, path in enumerate(ckpts):
        model, header = load_checkpoint(path)
        inputs[path] = file_digest(path)
        table = _table_for(ds, cfg, header.get("popularity"))
        ecfg = EvalConfig(k_list=k_list, negatives=cfg["eval_negatives"], seed=cfg["seed"],
                          offset=model.cfg.offset)
        report = evaluate(model, ds, table, ecfg, cfg["split"])
        stem = "report" if len(ckpts) == 1 else f"report-{i}"
        outputs += _report_outputs(report, run_dir, stem, cfg["write_scores"])
        summaries[path] = report.summary()
    if len(ckpts) > 1:
        model_rows = [summaries[p] for p in ckpts]
        summaries["mean_std"] = {key: summarize_runs([r[key] for r in model_rows])
                                 for key in model_rows[0] if key != "users"}
    if cfg.get("popcache"):
        inputs[cfg["popcache"]] = file_digest(cfg["popcache"])
    _print_json(summaries)
    return outputs, inputs, [cfg["seed"]]


def cmd_transfer(cfg: dict, run_dir: Path):
    _require(cfg, "dataset", "checkpoint")
    ds = load_dataset(cfg["dataset"])
    model, header = load_checkpoint(cfg["checkpoint"])
    table = _table_for(ds, cfg, header.get("popularity"))
    ecfg = EvalConfig(k_list=_k_list(cfg), negatives=cfg["eval_negatives"], seed=cfg["seed"],
                      offset=model.cfg.offset)
    report = zero_shot(model, header, ds, table, ecfg, cfg["split"])
    out = run_dir / "transfer-report.ndjson"
    report.save(out)
    _print_json({"summary": report.summary(), "digest_unchanged": report.metadata["digest_before"]
                 == report.metadata["digest_after"]})
    inputs = {p: file_digest(p) for p in (cfg["dataset"], cfg["checkpoint"], cfg.get("popcache")) if p}
    return [out], inputs, [cfg["seed"]]


def _load_external(path: str):
    """An evaluation report or a plain score file, whichever ``path`` holds."""
    text = Path(path).read_text(encoding="utf-8")
    first = next((json.loads(line) for line in text.splitlines() if line.strip()), None)
    if first is None:
        raise DataError(f"{path} is empty")
    if "score" in first and "candidate" in first:
        return load_score_file(path)
    return EvalReport.from_ndjson(text)


def cmd_interpolate(cfg: dict, run_dir: Path):
    _require(cfg, "ours", "external")
    try:
        ours = EvalReport.load(cfg["ours"])
        external = _load_external(cfg["external"])
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"malformed report or score file: {exc}") from exc
    report = interpolate(ours, external, cfg["alpha"])
    out = run_dir / "interpolated-report.ndjson"
    report.save(out)
    _print_json(report.summary())
    return [out], {p: file_digest(p) for p in (cfg["ours"], cfg["external"])}, []


def cmd_leakage(cfg: dict, run_dir: Path):
    _require(cfg, "dataset")
    ds = load_dataset(cfg["dataset"])
    audit = leakage_audit(ds)
    out = run_dir / "leakage.json"
    out.write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print_json(audit)
    return [out], {cfg["dataset"]: file_digest(cfg["dataset"])}, []


def cmd_params_report(cfg: dict, run_dir):
    mcfg = ModelConfig(d=cfg["d"], h=cfg["heads"], layers=cfg["layers"], L=cfg["max_len"],
                       k=cfg["k"], m=cfg["m"], n=cfg["n"])
    shapes = param_shapes(mcfg)
    report = {"total": count_params(mcfg), "config": mcfg.to_dict(),
              "tensors": {name: {"shape": list(s), "count": int(np.prod(s))} for name, s in shapes.items()}}
    if cfg["dataset"]:
        # the count never depends on the catalog; show it next to each dataset's size
        report["datasets"] = [{"path": p, "items": load_dataset(p).n_items, "parameters": report["total"]}
                              for p in cfg["dataset"]]
    _print_json(report)
    return [], {}, []


def cmd_synth(cfg: dict, run_dir: Path):
    spec = SynthSpec(n_users=cfg["users"], n_items=cfg["items"], horizon_days=cfg["horizon_days"],
                     events_per_user=cfg["events_per_user"], trend_strength=cfg["trend_strength"],
                     id_prefix=cfg["id_prefix"])
    ds = build_split(synth_generate(spec, cfg["seed"]))
    out = run_dir / f"dataset.{_dataset_ext(cfg['cache_format'])}"
    save_dataset(ds, out, cfg["cache_format"])
    outputs = [out]
    if cfg["csv"]:
        csv_path = run_dir / "interactions.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            for it in ds.interactions():
                fh.write(f"{it.user},{it.item},{it.timestamp}\n")
        outputs.append(csv_path)
    _print_json(ds.stats())
    return outputs, {}, [cfg["seed"]]


COMMANDS = {"preprocess": cmd_preprocess, "popdyn": cmd_popdyn, "train": cmd_train, "eval": cmd_eval,
            "transfer": cmd_transfer, "interpolate": cmd_interpolate, "leakage": cmd_leakage,
            "params-report": cmd_params_report, "synth": cmd_synth}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _flag(p, name: str, kind, help: str = "", **kw):
    opt = "--" + name.replace("_", "-")
    if kind is bool:
        p.add_argument(opt, dest=name, action="store_const", const=True, default=None, help=help)
    elif kind is list:
        p.add_argument(opt, dest=name, nargs="+", default=None, help=help, **kw)
    else:
        p.add_argument(opt, dest=name, type=kind, default=None, help=help, **kw)


HELP = {
    "input": "raw interaction log", "format": "log format (csv or tsv)",
    "columns": "column mapping, e.g. user=0,item=1,timestamp=2 or header names",
    "header": "first row holds column names", "cache_format": "binary (default) or ndjson",
    "dataset": "dataset cache written by preprocess or synth", "popcache": "popularity cache from popdyn",
    "gamma": "discount on past coarse-period counts, in [0, 1]", "fine_days": "fine period length in days",
    "coarse_fine_ratio": "fine periods per coarse period", "calendar": "ISO weeks and calendar months",
    "seeds": "number of runs with consecutive seeds", "lr_grid": f"pick lr from {LR_GRID} by validation NDCG",
    "loss": "bce or paper-literal", "max_len": "maximum sequence length L", "offset": "fine periods skipped before a query",
    "checkpoint": "checkpoint file(s)", "baseline": "score with a baseline (mostpop)",
    "k": "cutoffs for R@k and N@k", "eval_negatives": "sampled negatives per test item",
    "ours": "evaluation report from eval", "external": "external score file or report",
    "alpha": "weight on our scores", "split": "valid or test",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popdynrec",
                                     description="Popularity-dynamics sequential recommender")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in DEFAULTS.items():
        p = sub.add_parser(command, help=COMMANDS[command].__name__.replace("cmd_", "").replace("_", "-"))
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for name, (kind, _) in COMMON.items():
            if command in NO_ARTIFACTS and name in ("out", "run_root"):
                continue
            _flag(p, name, kind, {"out": "explicit run directory", "threads": "BLAS threads",
                                  "run_root": "parent of timestamped run directories"}.get(name, ""))
        for name, (kind, _) in opts.items():
            extra = {}
            if name == "format":
                extra["choices"] = ["csv", "tsv"]
            elif name == "split":
                extra["choices"] = ["valid", "test"]
            elif name == "loss":
                extra["choices"] = ["bce", "paper-literal"]
            _flag(p, name, kind, HELP.get(name, ""), **extra)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    command = args.command
    cfg = resolve(command, args)
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    t0 = time.perf_counter()
    with threadpool_limits(limits=cfg["threads"]):
        run_dir = None if command in NO_ARTIFACTS else run_directory(command, cfg)
        outputs, inputs, seeds = COMMANDS[command](cfg, run_dir)
    if run_dir is not None:
        manifest = RunManifest(command=command, config=cfg, seeds=seeds, inputs=inputs,
                               outputs=[str(p) for p in outputs],
                               wall_seconds=round(time.perf_counter() - t0, 3), git_describe=git_describe(),
                               created_utc=datetime.datetime.now(datetime.timezone.utc).isoformat())
        path = manifest.write(run_dir)
        print(f"run directory: {run_dir}", file=sys.stderr)
        log.debug("manifest written to %s", path)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except PopDynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
