"""Command-line driver: generate, train, evaluate, analyze, ablate.

Configuration is flat ``key=value`` text; lines starting with ``#`` are
comments.  Values are layered as built-in defaults, then ``preset``, then the
config file, then command-line flags.  Every run directory gets the merged config as
``config.txt``, which is enough to repeat the run bit for bit.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, TimeSlicedDataset, ingest, parse_time, slice_by_time
from .diffcore import NonFiniteError
from .evaluation import (ModelScorer, evaluate, popularity_groups, shift_series,
                         write_series_csv)
from .meta import SMALL_SCALE, NumericalError, TrainConfig, deployment_context, train
from .model import config_hash, load_checkpoint, save_checkpoint
from .synthetic import drifting_spec, generate_synthetic, write_synthetic

log = logging.getLogger("leaprec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "LEAPREC_OUTPUT_ROOT"
DIMENSION_GRID = ((128, 0), (121, 40), (91, 91), (40, 121), (0, 128))
STEP_GRID = (1, 5, 10, 20)
GRANULARITY_GRID = (1, 2, 3)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    """Training hyperparameters plus data, split and evaluation settings."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    delimiter: str = "\t"
    header: str = "auto"
    cut: str = ""
    val_months: int = 6
    eval_seed: int = 0
    record_slice_params: bool = False
    preset: str = ""

    EXTRA = ("data", "delimiter", "header", "cut", "val_months", "eval_seed",
             "record_slice_params", "preset")

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out.update({k: getattr(self, k) for k in self.EXTRA})
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(self.to_dict().items()):
            if k == "delimiter":
                v = v.encode("unicode_escape").decode("ascii")
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def dataset(self) -> TimeSlicedDataset:
        if not self.data:
            raise ConfigError("no data file configured (set data=... or pass --data)")
        if not self.cut:
            raise ConfigError("no cut time configured (set cut=YYYY-MM or pass --cut)")
        if not Path(self.data).is_file():
            raise ConfigError(f"data file not found: {self.data}")
        header = {"auto": None, "true": True, "false": False}.get(self.header.lower())
        if header is None and self.header.lower() != "auto":
            raise ConfigError(f"header must be auto, true or false, not {self.header!r}")
        log_ = ingest(self.data, delimiter=self.delimiter, header=header)
        return slice_by_time(log_, self.train.granularity_months, parse_time(self.cut),
                             val_window_months=self.val_months)


def _field_types() -> dict[str, type]:
    types = {f.name: type(f.default) for f in fields(TrainConfig)}
    for f in fields(RunConfig):
        if f.name != "train":
            types[f.name] = type(f.default)
    return types


def _convert(key: str, raw, types) -> object:
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    if not isinstance(raw, str):
        return raw
    if key == "delimiter":
        # a literal tab or space is a valid delimiter, so only strip around visible text
        text = raw.strip() or raw
        return text.encode("ascii").decode("unicode_escape") if "\\" in text else text
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < preset < file values < overrides."""
    types = _field_types()
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            merged[k] = _convert(k, v, types)
    preset = merged.get("preset", "") or ""
    if preset not in ("", "small"):
        raise ConfigError(f"unknown preset {preset!r}")
    train_values = dict(SMALL_SCALE) if preset == "small" else {}
    train_values.update({k: v for k, v in merged.items() if k not in RunConfig.EXTRA})
    try:
        train_cfg = TrainConfig(**train_values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    extra = {k: v for k, v in merged.items() if k in RunConfig.EXTRA}
    if extra.get("data"):
        extra["data"] = str(Path(extra["data"]).resolve())
    return RunConfig(train=train_cfg, **extra)


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    if values.get("data") and not Path(values["data"]).is_absolute():
        values["data"] = str(path.parent / values["data"])
    return values


# --------------------------------------------------------------- arguments

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    group = parser.add_argument_group("config overrides")
    for name, kind in _field_types().items():
        if kind is bool:
            group.add_argument(_flag(name), dest=f"cfg_{name}", action="store_const", const=True,
                               default=None)
        elif name == "meta_mode":
            group.add_argument(_flag(name), dest=f"cfg_{name}", choices=("leap", "fomaml"))
        elif name == "meta_optimizer":
            group.add_argument(_flag(name), dest=f"cfg_{name}", choices=("sgd", "adam"))
        else:
            group.add_argument(_flag(name), dest=f"cfg_{name}", type=str, metavar=name.upper())


def config_from_args(args) -> RunConfig:
    file_values = load_config(args.config) if args.config else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    return build_config(file_values, overrides)


def output_dir(args, command: str, cfg: RunConfig | None = None) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        tag = cfg.hash if cfg is not None else "run"
        path = root / f"{command}-{tag}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(cfg: RunConfig, directory: Path) -> None:
    (directory / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec = drifting_spec(seed=args.seed, num_users=args.num_users, num_items=args.num_items,
                         train_slices=args.train_slices, eval_slices=args.eval_slices,
                         onset=args.onset, interactions_per_slice=args.interactions_per_slice,
                         drift=args.profile)
    data = generate_synthetic(spec)
    write_synthetic(data, out)
    cut = datetime.fromtimestamp(data.month_starts[args.train_slices], timezone.utc).strftime("%Y-%m")
    cfg_text = (f"data={out.name}\ncut={cut}\nval_months=1\ngranularity_months=1\n"
                f"preset=small\nseed={args.seed}\n")
    if args.num_items <= 2 * 99:
        # small catalogues cannot always supply 99 unobserved items per user
        cfg_text += "allow_short_negatives=true\n"
    out.with_suffix(".config.txt").write_text(cfg_text, encoding="utf-8")
    print(f"wrote {len(data.log)} interactions to {out} "
          f"({data.log.num_users} users, {data.log.num_items} items, cut={cut})")
    return EXIT_OK


def _save_slice_params(directory: Path, slice_params, cfg: RunConfig, dataset) -> None:
    sdir = directory / "slices"
    sdir.mkdir(exist_ok=True)
    for t, params in enumerate(slice_params, 1):
        save_checkpoint(sdir / f"slice_{t:03d}.ckpt", params, cfg.to_dict(), kind="slice",
                        extra={"slice": t, "start": int(dataset.slices[t - 1].start)})


def run_training(cfg: RunConfig, directory: Path, dataset=None):
    dataset = dataset if dataset is not None else cfg.dataset()
    result = train(dataset, cfg.train, record_slice_params=cfg.record_slice_params)
    _write_config(cfg, directory)
    save_checkpoint(directory / "deployment.ckpt", result.deployment, cfg.to_dict(),
                    kind="deployment", extra={"best_epoch": result.best_epoch})
    meta = {b: result.deployment[b].replace(getattr(result.meta_state, b)) for b in ("gtl", "otl")}
    save_checkpoint(directory / "meta.ckpt", meta, cfg.to_dict(), kind="meta",
                    extra={"epoch": result.meta_state.epoch})
    with open(directory / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "slice", "step", "loss"])
        for epoch, t, k, loss in result.loss_records:
            w.writerow([epoch, t + 1, k + 1, repr(loss)])
    with open(directory / "path_length.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["meta_mode", "epoch", "slice", "branch", "d2"])
        for epoch, t, b, d2 in result.path_records:
            w.writerow([cfg.train.meta_mode, epoch, t + 1, b, repr(d2)])
    with open(directory / "validation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "NDCG@5"])
        for epoch, v in result.val_history:
            w.writerow([epoch, repr(v)])
    if cfg.record_slice_params:
        _save_slice_params(directory, result.slice_params, cfg, dataset)
    return result, dataset


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    directory = output_dir(args, "train", cfg)
    result, _ = run_training(cfg, directory)
    print(f"trained {result.epochs_run} epochs (best {result.best_epoch}) -> {directory}")
    return EXIT_OK


def evaluate_checkpoint(checkpoint, cfg: RunConfig, dataset=None, part: str = "test",
                        seed: int | None = None) -> dict:
    branches, header = load_checkpoint(checkpoint)
    dataset = dataset if dataset is not None else cfg.dataset()
    for name, ps in branches.items():
        if (ps.dims.num_users, ps.dims.num_items) != (dataset.num_users, dataset.num_items):
            raise DataError(
                f"checkpoint branch {name!r} has {ps.dims.num_users} users x {ps.dims.num_items} "
                f"items but the data has {dataset.num_users} users x {dataset.num_items} items")
    users, items, _ = dataset.part(part)
    if len(users) == 0:
        raise DataError(f"the {part} period has no interactions")
    seed = cfg.eval_seed if seed is None else seed
    scorer = ModelScorer(branches["gtl"], branches["otl"], deployment_context(dataset, cfg.train),
                         cfg.train.options())
    report = evaluate(scorer, users, items, dataset.all_keys(), dataset.num_items, seed=seed,
                      num_negatives=cfg.train.eval_negatives,
                      allow_short=cfg.train.allow_short_negatives)
    return {"metrics": report.metrics, "seed": seed, "config_hash": header["config_hash"],
            "part": part, "n_evaluated": report.n_evaluated,
            "negatives_per_positive": report.negatives_per_positive, **report.extra}


def cmd_evaluate(args) -> int:
    if args.run:
        run = Path(args.run)
        checkpoint = Path(args.checkpoint) if args.checkpoint else run / "deployment.ckpt"
        file_values = load_config(run / "config.txt")
    elif args.checkpoint:
        checkpoint = Path(args.checkpoint)
        file_values = {}
    else:
        raise ConfigError("evaluate needs --run DIR or --checkpoint FILE")
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    if not file_values:
        _, header = load_checkpoint(checkpoint)
        file_values = dict(header["config"])
    if args.config:
        file_values.update(load_config(args.config))
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = build_config(file_values, overrides)
    result = evaluate_checkpoint(checkpoint, cfg, part=args.part)
    text = json.dumps(result, indent=2, sort_keys=True)
    out = Path(args.out) if args.out else checkpoint.parent / f"eval_{args.part}.json"
    out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def read_groups_file(path, dataset: TimeSlicedDataset) -> dict[str, np.ndarray]:
    index = {raw: k for k, raw in enumerate(dataset.log.item_ids)}
    groups: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                continue
            if parts[0] in index:
                groups.setdefault(parts[1], []).append(index[parts[0]])
    return {g: np.array(sorted(v), dtype=np.int64) for g, v in sorted(groups.items())}


def cmd_analyze(args) -> int:
    run = Path(args.run)
    cfg = build_config(load_config(run / "config.txt"))
    ckpts = sorted((run / "slices").glob("slice_*.ckpt")) if (run / "slices").is_dir() else []
    if not ckpts:
        raise ConfigError(f"{run} has no recorded slice parameters; "
                          "train with --record-slice-params")
    dataset = cfg.dataset()
    slice_params = [load_checkpoint(p)[0] for p in ckpts]
    pop = popularity_groups(dataset, top_n=args.top_n)
    if args.groups:
        groups = read_groups_file(args.groups, dataset)
    else:
        groups = {f"peak{t + 1}": members for t, members in pop.groups.items()}
    directory = Path(args.out) if args.out else run
    directory.mkdir(parents=True, exist_ok=True)
    for b in ("gtl", "otl"):
        if slice_params[0][b].unused:
            rows = []
        else:
            series = shift_series([p[b] for p in slice_params], groups)
            rows = [(g, t + 1, repr(v)) for g, vals in series.items() for t, v in vals]
        write_series_csv(directory / f"shift_{b}.csv", rows)
    rows = [(f"peak{t + 1}", s + 1, repr(float(v)))
            for t, rel in pop.relative.items() for s, v in enumerate(rel)]
    write_series_csv(directory / "popularity.csv", rows)
    print(f"wrote shift_gtl.csv, shift_otl.csv and popularity.csv to {directory}")
    return EXIT_OK


def scaled_grid(total_dim: int) -> list[tuple[int, int]]:
    """The reference dimension splits rescaled so the one-branch ends use ``total_dim``."""
    scale = total_dim / 128.0
    out = []
    for g, o in DIMENSION_GRID:
        pair = (int(round(g * scale)), int(round(o * scale)))
        if pair not in out and sum(pair) > 0:
            out.append(pair)
    return out


def monotonicity(values) -> str:
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    if len(diffs) == 0 or np.all(diffs == 0):
        return "constant"
    if np.all(diffs >= 0):
        return "non-decreasing"
    if np.all(diffs <= 0):
        return "non-increasing"
    return "non-monotone"


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    sweeps = [s.strip() for s in args.sweep.split(",") if s.strip()]
    unknown = set(sweeps) - {"dims", "steps", "granularity"}
    if unknown:
        raise ConfigError(f"unknown sweep(s): {', '.join(sorted(unknown))}")
    directory = output_dir(args, "ablate", base)
    _write_config(base, directory)
    total = args.total_dim or (base.train.d_gtl + base.train.d_otl)
    plan = []
    if "dims" in sweeps:
        plan += [("dims", f"{g}/{o}", {"d_gtl": g, "d_otl": o}) for g, o in scaled_grid(total)]
    if "steps" in sweeps:
        plan += [("steps", str(k), {"inner_steps": k}) for k in args.steps]
    if "granularity" in sweeps:
        plan += [("granularity", str(g), {"granularity_months": g}) for g in args.granularities]

    datasets: dict[int, TimeSlicedDataset] = {}
    rows = []
    for sweep, label, change in plan:
        values = {**base.train.to_dict(), **change}
        cfg = RunConfig(train=TrainConfig(**values),
                        **{k: getattr(base, k) for k in RunConfig.EXTRA})
        g = cfg.train.granularity_months
        if g not in datasets:
            datasets[g] = cfg.dataset()
        result = train(datasets[g], cfg.train)
        scorer = ModelScorer(result.deployment["gtl"], result.deployment["otl"],
                             deployment_context(datasets[g], cfg.train), cfg.train.options())
        users, items, _ = datasets[g].part("test")
        report = evaluate(scorer, users, items, datasets[g].all_keys(), datasets[g].num_items,
                          seed=cfg.eval_seed, num_negatives=cfg.train.eval_negatives,
                          allow_short=cfg.train.allow_short_negatives)
        m = report.metrics
        rows.append({"sweep": sweep, "setting": label, "d_gtl": cfg.train.d_gtl,
                     "d_otl": cfg.train.d_otl, "inner_steps": cfg.train.inner_steps,
                     "granularity_months": g, "num_slices": datasets[g].num_slices,
                     "best_epoch": result.best_epoch, "HR@5": m["HR@5"], "NDCG@5": m["NDCG@5"],
                     "MRR": m["MRR"]})
        log.info("%s %s: NDCG@5 %.4f", sweep, label, m["NDCG@5"])

    with open(directory / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["sweep"])
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    report = {}
    for sweep in ("steps", "granularity"):
        sub = [r for r in rows if r["sweep"] == sweep]
        if sub:
            report[sweep] = {"settings": [r["setting"] for r in sub],
                             "NDCG@5": [r["NDCG@5"] for r in sub],
                             "trend": monotonicity([r["NDCG@5"] for r in sub])}
    (directory / "monotonicity.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    for sweep, info in report.items():
        print(f"{sweep}: {info['trend']} "
              + " ".join(f"{s}={v:.4f}" for s, v in zip(info["settings"], info["NDCG@5"])))
    print(f"wrote {len(rows)} rows to {directory / 'ablation.csv'}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leaprec", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic interaction log")
    p.add_argument("--out", required=True, help="interaction file to write")
    p.add_argument("--profile", choices=("drifting", "stationary"), default="drifting")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-users", type=int, default=300)
    p.add_argument("--num-items", type=int, default=200)
    p.add_argument("--train-slices", type=int, default=6)
    p.add_argument("--eval-slices", type=int, default=3)
    p.add_argument("--onset", type=int, default=4, help="1-based slice where the trend starts")
    p.add_argument("--interactions-per-slice", type=int, default=1000)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train and write checkpoints and curves")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default: $%s/train-<hash>)" % OUTPUT_ROOT_ENV)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out interactions")
    _add_config_flags(p)
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--checkpoint", help="checkpoint file (default: <run>/deployment.ckpt)")
    p.add_argument("--part", choices=("val", "test"), default="test")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="embedding shift and popularity series")
    p.add_argument("--run", required=True, help="run directory trained with --record-slice-params")
    p.add_argument("--groups", help="item<TAB>group file (default: peak-slice popularity groups)")
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="dimension split, inner-step and granularity sweeps")
    _add_config_flags(p)
    p.add_argument("--sweep", default="dims,steps,granularity",
                   help="comma-separated subset of dims, steps, granularity")
    p.add_argument("--total-dim", type=int, default=0,
                   help="dimension of the one-branch grid ends (default d_gtl + d_otl)")
    p.add_argument("--steps", type=_int_list, default=list(STEP_GRID))
    p.add_argument("--granularities", type=_int_list, default=list(GRANULARITY_GRID))
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # non-finite values are reported by the tape itself
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
