"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config validation error,
3 runtime failure. A failing command removes whatever it had written.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, VariantSpec, config_from_dict, load_config
from .imageops import clip01, read_ppm, write_ppm
from .lifelong import SUITES, TABLE_COLUMNS, _train_split, run_ablation, run_sequence
from .rehearser import REHEARSER_KINDS, train_rehearser, transfer
from .reid import extract_features
from .schema import validate_metrics
from .synthbench import load_domains, save_domains, standard_benchmark

log = logging.getLogger("dask_lreid")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
RESOLVED_CONFIG = "config.resolved.json"


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# output bookkeeping
# --------------------------------------------------------------------------

class Outputs:
    """Tracks created paths so a failed command can remove them."""

    def __init__(self):
        self.created: list[Path] = []

    def dir(self, path) -> Path:
        path = Path(path)
        if path.exists() and not path.is_dir():
            raise ValidationError(f"{path} exists and is not a directory")
        missing = [p for p in [path, *path.parents] if not p.exists()]
        path.mkdir(parents=True, exist_ok=True)
        # remember the outermost directory we created
        if missing:
            self.created.append(missing[-1])
        return path

    def file(self, path) -> Path:
        path = Path(path)
        if path.parent != Path(""):
            self.dir(path.parent)
        self.created.append(path)
        return path

    def cleanup(self):
        for path in reversed(self.created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()
            tmp = path.with_name(path.name + ".tmp")
            if tmp.exists():
                tmp.unlink()


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if overrides:
        data = cfg.to_dict()
        for key, value in overrides.items():
            node = data
            *path, last = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section in override {key!r}")
                node = node[part]
            if last not in node:
                raise ConfigError(f"unknown config key in override {key!r}")
            node[last] = value
        cfg = config_from_dict(data)
    return cfg


def _load_data(path):
    directory = Path(path)
    if not (directory / "manifest.json").is_file():
        raise ValidationError(f"{directory} has no manifest.json (create it with gen-data)")
    try:
        return load_domains(directory)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed dataset manifest in {directory}: {exc}") from exc


def _benchmark(cfg: ExperimentConfig):
    b = cfg.benchmark
    return standard_benchmark(cfg.data_seed, b.n_seen, b.n_unseen, b.n_ids, b.views_per_id, b.size)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, out: Outputs):
    cfg = _config(args)
    seen, unseen = _benchmark(cfg)
    directory = out.dir(args.out)
    for ds in seen + unseen:
        out.created.append(directory / ds.domain_id)
    out.created.append(directory / "manifest.json")
    save_domains(directory, seen, unseen)
    write_json(out.file(directory / RESOLVED_CONFIG), cfg.to_dict())
    print(f"wrote {len(seen)} seen and {len(unseen)} unseen domains to {directory}")


def cmd_train_rehearser(args, out: Outputs):
    cfg = _config(args)
    seen, unseen = _load_data(args.data)
    domains = {ds.domain_id: ds for ds in seen + unseen}
    name = args.domain or seen[0].domain_id
    if name not in domains:
        raise ValidationError(f"unknown domain {name!r}; available: {sorted(domains)}")
    images, _, _ = _train_split(domains[name])
    net = train_rehearser(images, cfg.rehearser, np.random.default_rng(cfg.seed), kind=args.kind, seed=cfg.seed)
    path = out.file(args.out)
    save_checkpoint(net, path, cfg.hash())
    write_json(out.file(path.with_name(path.name + ".config.json")), cfg.to_dict())
    print(f"trained {args.kind} rehearser on {name} -> {path}")


def cmd_transfer(args, out: Outputs):
    net, meta = load_checkpoint(args.rehearser)
    if meta["kind"] not in REHEARSER_KINDS:
        raise ValidationError(f"{args.rehearser} holds a {meta['kind']!r} model, not a rehearser")
    img = read_ppm(args.input)
    write_ppm(out.file(args.out), clip01(transfer(net, img)))


def _write_embeddings(path: Path, model, domains) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "identity", "split"] + [f"f{i}" for i in range(model.dim)])
        for ds in domains:
            keep = [i for i, s in enumerate(ds.splits) if s != "train"]
            feats = extract_features(model, [ds.images[i] for i in keep])
            for i, row in zip(keep, feats):
                writer.writerow([ds.domain_id, int(ds.labels[i]), ds.splits[i]] + [repr(float(v)) for v in row])


def cmd_run(args, out: Outputs):
    cfg = _config(args)
    seen, unseen = _load_data(args.data) if args.data else _benchmark(cfg)
    directory = out.dir(args.out)
    ckpt_dir = out.dir(directory / "checkpoints")
    write_json(out.file(directory / RESOLVED_CONFIG), cfg.to_dict())

    def on_step(state):
        save_checkpoint(state.model, out.file(ckpt_dir / f"step{state.t}_reid.ckpt"), cfg.hash())
        for j, net in enumerate(state.rehearsers):
            save_checkpoint(net, out.file(ckpt_dir / f"step{state.t}_rehearser{j}.ckpt"), cfg.hash())

    report, state = run_sequence(seen, unseen, cfg, cfg.variant, cfg.seed, on_step=on_step)
    doc = report.to_json()
    doc["variant"] = cfg.variant.label
    validate_metrics(doc)
    write_json(out.file(directory / "metrics.json"), doc)
    _write_embeddings(out.file(directory / "embeddings.csv"), state.model, seen + unseen)
    print(f"seen-avg mAP {report.seen_avg['mAP']:.4f}")
    if report.unseen_avg["mAP"] is not None:
        print(f"unseen-avg mAP {report.unseen_avg['mAP']:.4f}")


def _suite(spec: str):
    if spec in SUITES:
        return SUITES[spec]
    path = Path(spec)
    if not path.is_file():
        raise ValidationError(f"unknown suite {spec!r}; use one of {sorted(SUITES)} or a JSON file")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"suite file {path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"suite file {path} must hold a non-empty list of variants")
    try:
        return [VariantSpec(**e) for e in entries]
    except TypeError as exc:
        raise ValidationError(f"bad variant in {path}: {exc}") from exc


def cmd_ablate(args, out: Outputs):
    cfg = _config(args)
    suite = _suite(args.suite)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    benchmark = _load_data(args.data) if args.data else None
    directory = out.dir(args.out)
    write_json(out.file(directory / RESOLVED_CONFIG), cfg.to_dict())
    rows = run_ablation(suite, cfg, seeds=range(cfg.seed, cfg.seed + args.seeds), benchmark=benchmark)
    write_json(out.file(directory / "table.json"), {"suite": args.suite, "config_hash": cfg.hash(), "rows": rows})
    with out.file(directory / "table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", *TABLE_COLUMNS])
        for row in rows:
            writer.writerow([row["variant"]] + ["" if row[c] is None else f"{row[c]:.6f}" for c in TABLE_COLUMNS])
    for row in rows:
        print(f"{row['variant']:>14s}  seen mAP {row['seen_avg_mAP']:.4f}")


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dask-lreid", description="Lifelong person ReID with distribution rehearsal on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.beta=0 (repeatable)")
        return sp

    g = with_config(sub.add_parser("gen-data", help="render the synthetic benchmark to PPM files"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train-rehearser", help="train one rehearser on a domain"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--domain", help="domain id (default: first seen domain)")
    t.add_argument("--kind", choices=REHEARSER_KINDS, default="akpnet")
    t.set_defaults(func=cmd_train_rehearser)

    x = sub.add_parser("transfer", help="restyle one PPM image with a rehearser checkpoint")
    x.add_argument("--rehearser", required=True)
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_transfer)

    r = with_config(sub.add_parser("run", help="train the full lifelong sequence and evaluate"))
    r.add_argument("--data", help="dataset directory from gen-data (default: render in memory)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = with_config(sub.add_parser("ablate", help="run a comparison suite"))
    a.add_argument("--suite", required=True, help=f"one of {sorted(SUITES)} or a JSON list of variants")
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from config.seed")
    a.add_argument("--data", help="dataset directory (default: render in memory)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args, out)
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except (ValidationError, ConfigError, CheckpointError, jsonschema.ValidationError) as exc:
        code, msg = EXIT_INVALID, f"invalid input: {getattr(exc, 'message', exc)}"
    except (FileNotFoundError, IsADirectoryError) as exc:
        code, msg = EXIT_INVALID, f"invalid input: {exc}"
    except ValueError as exc:
        code, msg = EXIT_INVALID, f"invalid input: {exc}"
    except Exception as exc:  # noqa: BLE001
        code, msg = EXIT_RUNTIME, f"runtime failure: {type(exc).__name__}: {exc}"
    out.cleanup()
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
