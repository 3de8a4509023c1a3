"""Command line entry point: ``bmcl <subcommand> [options]``.

Every RunConfig field is exposed as a flag (``--epochs``, ``--gen.rho``,
``--btg.strategy`` ...).  ``--config FILE`` loads a (possibly partial) JSON
config first; explicit flags are applied on top of it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path


from . import model as mdl
from .synthdata import generate, load_dataset
from .harness.config import METHODS, ConfigError, Method, RunConfig
from .harness.experiments import BALANCES, LADDER, LEARNERS, DatasetMismatch, run_ablation, run_balance_comparison
from .harness.heatmaps import export_attention_heatmaps
from .harness.metrics import top1_accuracy
from .harness.training import NumericFailure, run_training, write_datasets

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SECTIONS = ("gen", "model", "btg", "meta", "mixup")
_SKIP_TOP = {"gen", "model", "btg", "meta", "mixup", "method", "output_dir"}

log = logging.getLogger("bmcl")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _flag_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (mirrors RunConfig)")
    group.add_argument("--config", type=Path, help="JSON config file, applied before the flags below")
    group.add_argument("--method", choices=sorted(METHODS), help="method preset")
    base = RunConfig()
    for f in fields(RunConfig):
        if f.name in _SKIP_TOP:
            continue
        default = getattr(base, f.name)
        group.add_argument(f"--{f.name}", dest=f.name, type=_flag_type(default), default=None,
                           metavar=type(default).__name__.upper())
    for section in SECTIONS:
        sub = getattr(base, section)
        for f in fields(sub):
            default = getattr(sub, f.name)
            group.add_argument(f"--{section}.{f.name}", dest=f"{section}.{f.name}", type=_flag_type(default),
                               default=None, metavar=type(default).__name__.upper())


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    d = RunConfig().to_dict()
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        d = _merge(d, loaded)
    for key, value in vars(args).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name and section in SECTIONS:
            d[section][name] = value
        elif key in {f.name for f in fields(RunConfig)} - _SKIP_TOP:
            d[key] = value
    cfg = RunConfig.from_dict(_sync_method(d, getattr(args, "method", None)))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _sync_method(d: dict, method_name: str | None) -> dict:
    if method_name is not None:
        method = METHODS[method_name]
    else:
        try:
            method = Method(**d["method"])
        except TypeError as exc:
            raise ConfigError(f"bad method block: {exc}") from exc
    d = dict(d)
    d["method"] = {f.name: getattr(method, f.name) for f in fields(Method)}
    d["model"] = dict(d["model"], use_gate=method.use_gate)
    if method.partition == "learned":
        d["btg"] = dict(d["btg"], strategy=method.balance)
    return d


def _load_split_files(directory: Path):
    out = []
    for role in ("train", "val", "test"):
        path = directory / f"{role}.bmclds"
        if not path.exists():
            raise FileNotFoundError(f"dataset file {path} not found")
        out.append(load_dataset(path))
    return tuple(out)


def _data_for(cfg: RunConfig, data_dir: Path | None):
    if data_dir is None:
        return generate(cfg.gen)
    data = _load_split_files(data_dir)
    if data[0].config_hash != cfg.gen.config_hash():
        raise DatasetMismatch(f"{data_dir} was generated with config {data[0].config_hash}, "
                              f"run expects {cfg.gen.config_hash()}")
    return data


# -- subcommands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = build_config(args)
    paths = write_datasets(cfg, args.out)
    cfg.save(Path(args.out) / "config.json")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = replace(build_config(args), output_dir=str(args.out))
    art = run_training(cfg, _data_for(cfg, args.data), progress=args.verbose)
    print(json.dumps(art.final, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _, extra = mdl.load_checkpoint(args.checkpoint)
    data = _load_split_files(args.data)
    expected = extra.get("dataset_hash")
    if expected and data[0].config_hash != expected:
        raise DatasetMismatch(f"checkpoint trained on dataset {expected}, files are {data[0].config_hash}")
    report = {"checkpoint": str(args.checkpoint), "dataset_hash": data[0].config_hash}
    for ds in data:
        res = top1_accuracy(mdl.predict_numpy(ds.features, params, args.head), ds.classes)
        report[f"{ds.role}_acc"] = res.accuracy
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    report = run_ablation(build_config(args), args.seeds, args.out, methods=args.methods)
    print(report.format(), end="")
    return EXIT_OK


def cmd_balance_compare(args) -> int:
    report = run_balance_comparison(build_config(args), args.seeds, args.out, learners=args.learners,
                                    balances=args.balances)
    print(report.format(), end="")
    return EXIT_OK


def cmd_heatmaps(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    if args.data is not None:
        data = {ds.role: ds for ds in _load_split_files(args.data)}
    else:
        data = {ds.role: ds for ds in generate(build_config(args).gen)}
    summary = export_attention_heatmaps(args.checkpoint, data[args.role], args.out, args.samples_per_class)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test dataset files")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method and write run artifacts")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, help="directory with saved dataset files (default: generate)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on saved dataset files")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--head", default="task", choices=mdl.HEADS)
    p.add_argument("--out", type=Path, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    for name, func, extra in (("ablate", cmd_ablate, "methods"), ("balance-compare", cmd_balance_compare, None)):
        p = sub.add_parser(name, help="ablation ladder" if extra else "balancing-strategy grid")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
        if extra:
            p.add_argument("--methods", nargs="+", default=list(LADDER), choices=sorted(METHODS))
        else:
            p.add_argument("--learners", nargs="+", default=list(LEARNERS), choices=LEARNERS)
            p.add_argument("--balances", nargs="+", default=list(BALANCES), choices=BALANCES)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("heatmaps", help="export attention-gate strips for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, help="saved dataset directory (default: generate from config)")
    p.add_argument("--role", default="test", choices=("train", "val", "test"))
    p.add_argument("--samples-per-class", type=int, default=16)
    _add_config_flags(p)
    p.set_defaults(func=cmd_heatmaps)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed files surface as ValueError from the loaders
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
