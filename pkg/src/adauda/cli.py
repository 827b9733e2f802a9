"""Command-line entry point: ``adauda <command> [options]``.

Commands map onto the pipeline stages: gen-synth, train, predict, cooccur,
refine, ensemble, eval. Settings resolve as built-in defaults, then the
``--config`` TOML file, then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import data as D
from . import inference as I
from . import model as M
from .training import EpochReport, TrainConfig, fit

logger = logging.getLogger("adauda")

SECTIONS = {"synth": D.SynthConfig, "train": TrainConfig}
PATH_KEYS = {
    "source_features", "source_labels", "target_features", "target_labels",
    "checkpoint", "features", "labels", "predictions", "cooccur", "out", "log",
}

SYNTH_FILES = {
    "source_features": "source_features.adaf",
    "source_labels": "source_labels.csv",
    "target_features": "target_features.adaf",
    "target_labels": "target_labels.csv",
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def read_config(path: Optional[str]) -> dict[str, dict[str, Any]]:
    """Parse a TOML config into ``{"synth": {...}, "train": {...}, "paths": {...}}``."""
    out: dict[str, dict[str, Any]] = {"synth": {}, "train": {}, "paths": {}}
    if not path:
        return out
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for section, body in raw.items():
        if section not in out:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        allowed = PATH_KEYS if section == "paths" else {f.name for f in dataclasses.fields(SECTIONS[section])}
        for key, value in body.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][key] = value
    return out


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, dest_prefix: str, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        kind = {bool: _bool, int: int, float: float, str: str}.get(type(f.default), _int_list)
        parser.add_argument(_flag(f.name), dest=f"{dest_prefix}{f.name}", type=kind, default=None,
                            metavar=f.name.upper())


def _resolve(cls, section: str, cfg_file: dict, args: argparse.Namespace, prefix: str, aliases=None):
    values = dict(cfg_file.get(section, {}))
    for f in dataclasses.fields(cls):
        v = getattr(args, f"{prefix}{f.name}", None)
        if v is not None:
            values[f.name] = v
    for attr, field_name in (aliases or {}).items():
        v = getattr(args, attr, None)
        if v is not None:
            values[field_name] = v
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _path(args, cfg_file, key: str, required: bool = True) -> Optional[str]:
    v = getattr(args, key, None)
    if v is None:
        v = cfg_file["paths"].get(key)
    if v is None and required:
        raise ConfigError(f"missing required path {_flag(key)}")
    return v


# ---------------------------------------------------------------- output


class Outputs:
    """Stage output files as temporaries; publish all of them only on success."""

    def __init__(self):
        self._staged: list[tuple[str, str]] = []

    def add(self, dest: str, payload: bytes) -> None:
        dest = os.path.abspath(dest)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=os.path.dirname(dest))
        self._staged.append((tmp, dest))
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            published = []
            try:
                for tmp, dest in self._staged:
                    os.replace(tmp, dest)
                    published.append(dest)
            except OSError:
                # all-or-nothing: withdraw what this command already published
                for dest in published:
                    os.remove(dest)
                self._discard()
                raise
        else:
            self._discard()
        return False

    def _discard(self) -> None:
        for tmp, _ in self._staged:
            if os.path.exists(tmp):
                os.remove(tmp)


def _emit(out: Optional[str], payload: bytes) -> None:
    if out is None:
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()
        return
    with Outputs() as o:
        o.add(out, payload)


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args, cfg_file) -> None:
    synth = _resolve(D.SynthConfig, "synth", cfg_file, args, "synth_",
                     {"seed": "rng_seed", "shift": "domain_shift_magnitude"})
    out_dir = _path(args, cfg_file, "out")
    ds = D.generate_synthetic(synth)
    with Outputs() as o:
        o.add(os.path.join(out_dir, SYNTH_FILES["source_features"]), D.dump_features(ds.source.features))
        o.add(os.path.join(out_dir, SYNTH_FILES["source_labels"]), D.dump_labels(ds.source.labels).encode())
        o.add(os.path.join(out_dir, SYNTH_FILES["target_features"]), D.dump_features(ds.target.features))
        o.add(os.path.join(out_dir, SYNTH_FILES["target_labels"]), D.dump_labels(ds.target.labels).encode())
    logger.info("wrote %d source / %d target videos to %s", len(ds.source.features), len(ds.target.features), out_dir)


def cmd_train(args, cfg_file) -> None:
    cfg = _resolve(TrainConfig, "train", cfg_file, args, "train_", {"seed": "rng_seed", "mode": "run_mode"})
    cfg.validate()
    src = D.load_features(_path(args, cfg_file, "source_features"), "source")
    src_labels = D.load_labels(_path(args, cfg_file, "source_labels"))
    tgt_path = _path(args, cfg_file, "target_features", required=False)
    tgt = D.load_features(tgt_path, "target") if tgt_path else None
    tgt_labels_path = _path(args, cfg_file, "target_labels", required=False)
    tgt_labels = D.load_labels(tgt_labels_path) if tgt_labels_path else None
    out = _path(args, cfg_file, "out")
    log_path = _path(args, cfg_file, "log", required=False)

    effective = {
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()},
        "paths": {
            "source_features": _path(args, cfg_file, "source_features"),
            "source_labels": _path(args, cfg_file, "source_labels"),
            "target_features": tgt_path,
            "target_labels": tgt_labels_path,
        },
    }
    lines = [json.dumps({"config": effective}, sort_keys=True) + "\n"]

    def on_epoch(r: EpochReport) -> None:
        lines.append(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        logger.info("epoch %d lr=%.3g cls=%.4f dom=%.4f src_acc=%.3f tgt_acc=%s",
                    r.epoch, r.lr, r.cls_loss, r.domain_loss, r.source_acc, r.target_acc)

    t0 = time.perf_counter()
    params, _ = fit(src, src_labels, tgt, cfg, tgt_labels, on_epoch=on_epoch)
    logger.info("training finished in %.1fs", time.perf_counter() - t0)
    with Outputs() as o:
        o.add(out, M.save_checkpoint(params))
        if log_path:
            o.add(log_path, "".join(lines).encode())


def cmd_predict(args, cfg_file) -> None:
    params = M.load_checkpoint(Path(_path(args, cfg_file, "checkpoint")).read_bytes())
    feats = D.load_features(_path(args, cfg_file, "features"), "target")
    preds = I.predict(params, feats)
    _emit(_path(args, cfg_file, "out", required=False), I.dump_predictions(preds).encode())


def cmd_cooccur(args, cfg_file) -> None:
    labels = D.load_labels(_path(args, cfg_file, "labels"))
    cooc = D.build_cooccurrence(labels)
    _emit(_path(args, cfg_file, "out", required=False), D.dump_cooccurrence(cooc).encode())


def cmd_refine(args, cfg_file) -> None:
    preds = I.load_predictions(_path(args, cfg_file, "predictions"))
    cooc = D.load_cooccurrence(_path(args, cfg_file, "cooccur"), args.epsilon)
    refined = I.refine_predictions(preds, I.mask(cooc))
    _emit(_path(args, cfg_file, "out", required=False), I.dump_predictions(refined).encode())


def cmd_ensemble(args, cfg_file) -> None:
    sets = [I.load_predictions(p) for p in args.inputs]
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    cooc_path = _path(args, cfg_file, "cooccur", required=False)
    action_mask = I.mask(D.load_cooccurrence(cooc_path, args.epsilon)) if cooc_path else None
    merged = I.ensemble(sets, weights, action_mask, refine_first=not args.average_then_refine)
    _emit(_path(args, cfg_file, "out", required=False), I.dump_predictions(merged).encode())


def cmd_eval(args, cfg_file) -> None:
    preds = I.load_predictions(_path(args, cfg_file, "predictions"))
    labels = D.load_labels(_path(args, cfg_file, "labels"))
    report = I.topk_metrics(preds, labels, use_refined=args.refined)
    _emit(_path(args, cfg_file, "out", required=False), (json.dumps(report.to_dict(), sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adauda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output path (stdout when omitted, where allowed)")
        p.set_defaults(func=func)
        return p

    p = command("gen-synth", cmd_gen_synth, "write synthetic source/target feature and label files")
    p.add_argument("--seed", type=int)
    p.add_argument("--shift", type=float, help="alias for --domain-shift-magnitude")
    _add_dataclass_flags(p, D.SynthConfig, "synth_", skip=("rng_seed",))

    p = command("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--source-features", dest="source_features")
    p.add_argument("--source-labels", dest="source_labels")
    p.add_argument("--target-features", dest="target_features")
    p.add_argument("--target-labels", dest="target_labels", help="only used for per-epoch evaluation")
    p.add_argument("--log", help="JSON-lines metrics log")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=M.RUN_MODES)
    _add_dataclass_flags(p, TrainConfig, "train_", skip=("rng_seed", "run_mode"))

    p = command("predict", cmd_predict, "write verb/noun probabilities for a feature file")
    p.add_argument("--checkpoint")
    p.add_argument("--features")

    p = command("cooccur", cmd_cooccur, "export the verb-noun co-occurrence counts as TSV")
    p.add_argument("--labels")

    p = command("refine", cmd_refine, "mask action probabilities with the co-occurrence prior")
    p.add_argument("--predictions")
    p.add_argument("--cooccur")
    p.add_argument("--epsilon", type=float, default=0.01)

    p = command("ensemble", cmd_ensemble, "average action probabilities across prediction files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--weights", help="comma-separated non-negative weights")
    p.add_argument("--cooccur", help="refine each input with this co-occurrence TSV")
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--average-then-refine", action="store_true")

    p = command("eval", cmd_eval, "top-1/top-5 verb, noun and action accuracy")
    p.add_argument("--predictions")
    p.add_argument("--labels")
    p.add_argument("--refined", type=_bool, default=False, metavar="BOOL")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg_file = read_config(args.config)
        args.func(args, cfg_file)
    except (ValueError, KeyError, IndexError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"adauda {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
