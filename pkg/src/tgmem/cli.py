"""Command-line interface: train, eval, ablate, longterm, synth.

Every run writes a manifest (resolved config, seed, content hashes of the
inputs) next to its outputs; rerunning from the manifest reproduces the
metrics file bit-identically when wall-clock timing is disabled.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    NumericError,
    OrderingError,
    ParseError,
    TgmemError,
    UndefinedMetricError,
)
from .events import parse_events
from .model import TrainConfig
from .params import load_checkpoint, save_checkpoint
from .synth import noisy_periodic, periodic_bipartite, reoccurrence_heavy, write_jodie_csv
from .training import (
    MetricsRow,
    longterm_experiment,
    run_ablations,
    train,
    write_metrics_csv,
)

OUT_ROOT_ENV = "TGMEM_OUT_ROOT"
VARIANTS = ("SM", "GRE", "IA", "ReO")


def _config_defaults_text() -> str:
    lines = ["config keys (flat key=value file, overridable with --set):"]
    for f in fields(TrainConfig):
        lines.append(f"  {f.name} = {f.default}")
    return "\n".join(lines)


def _coerce(name: str, raw: str):
    ftypes = {f.name: f.type for f in fields(TrainConfig)}
    if name not in ftypes:
        raise ConfigError(f"unknown config key: {name}")
    t = ftypes[name]
    if t == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"boolean config key {name} got {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def load_config(path: str | None, overrides, seed: int | None) -> TrainConfig:
    values: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value")
                k, v = (s.strip() for s in line.split("=", 1))
                values[k] = _coerce(k, v)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values[k] = _coerce(k, v)
    if seed is not None:
        values["seed"] = seed
    return TrainConfig(**values)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_out(out: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, command: str, cfg: TrainConfig, args):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
        "inputs": {},
    }
    if getattr(args, "data", None):
        manifest["inputs"]["data"] = {
            "path": str(args.data),
            "sha256": sha256_file(args.data),
            "format": args.format,
        }
    if getattr(args, "config", None):
        manifest["inputs"]["config"] = {
            "path": str(args.config),
            "sha256": sha256_file(args.config),
        }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_from_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = TrainConfig(**manifest["config"])
    data = manifest["inputs"]["data"]
    return cfg, data["path"], data.get("format", "jodie-csv")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tgmem",
        description="Continuous-time dynamic graph model with gated memory, "
                    "chunked attention and re-occurrence features.",
        epilog=_config_defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data_required=True):
        sp.add_argument("--data", required=data_required, help="event stream file")
        sp.add_argument("--format", default="jodie-csv",
                        choices=["jodie-csv", "jsonl"])
        sp.add_argument("--config", default=None, help="flat key=value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory "
                        f"(relative paths resolve under ${OUT_ROOT_ENV})")

    sp = sub.add_parser("train", help="self-supervised link-prediction training")
    common(sp, data_required=False)
    sp.add_argument("--from-manifest", default=None,
                    help="rerun a previous run from its manifest")
    sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("ablate", help="train the full model plus ablations")
    common(sp)
    sp.add_argument("--variants", default=",".join(VARIANTS),
                    help="comma list from SM,GRE,IA,ReO (empty = full only)")

    sp = sub.add_parser("longterm", help="frequency-subgraph chi-square experiment")
    common(sp)
    sp.add_argument("--checkpoint", default=None,
                    help="reuse a trained checkpoint instead of training")
    sp.add_argument("--fractions", default="1.0,0.8,0.6,0.4,0.2,0.1")

    sp = sub.add_parser("synth", help="generate a synthetic stream")
    sp.add_argument("--kind", required=True,
                    choices=["periodic-bipartite", "reoccurrence-heavy", "noisy"])
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--users", type=int, default=20)
    sp.add_argument("--items", type=int, default=10)
    sp.add_argument("--events", type=int, default=2000)
    sp.add_argument("--rho", type=float, default=0.8)
    sp.add_argument("--eta", type=float, default=0.3)
    sp.add_argument("--cycle", type=int, default=2)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--labeled", action="store_true")
    return p


def cmd_train(args) -> int:
    if args.from_manifest:
        cfg, data_path, fmt = _load_from_manifest(args.from_manifest)
        args.data, args.format = data_path, fmt
    else:
        if not args.data:
            print("error: --data is required (or --from-manifest)", file=sys.stderr)
            return 1
        cfg = load_config(args.config, args.set, args.seed)
    out_dir = resolve_out(args.out)
    stream = parse_events(args.data, args.format)
    write_manifest(out_dir, "train", cfg, args)
    log = None if args.quiet else print
    result = train(stream, cfg, log=log)
    write_metrics_csv(result.rows, out_dir / "metrics.csv")
    save_checkpoint(out_dir / "model.ckpt", result.best_state)
    print(f"best epoch {result.best_epoch}; test AP {result.test_ap:.4f}"
          + (f"; inductive AP {result.inductive_ap:.4f}"
             if result.inductive_ap is not None else ""))
    return 0


def cmd_eval(args) -> int:
    from .events import split_temporal
    from .model import Model
    from .training import (dst_universe, negative_sample, replay_split, warm_memory)

    cfg = load_config(args.config, args.set, args.seed)
    out_dir = resolve_out(args.out)
    stream = parse_events(args.data, args.format)
    write_manifest(out_dir, "eval", cfg, args)
    model = Model(cfg, stream.num_nodes, stream.edge_dim)
    model.store.load_state_dict(load_checkpoint(args.checkpoint))
    splits = split_temporal(stream, inductive_fraction=cfg.inductive_fraction,
                            seed=cfg.seed)
    model.reset_state()
    warm_memory(model, stream, splits.train_indices,
                np.random.default_rng([cfg.seed, 4000]))
    warm_memory(model, stream, np.arange(*splits.val_range),
                np.random.default_rng([cfg.seed, 4001]))
    test_idx = np.arange(*splits.test_range)
    negs = negative_sample(np.random.default_rng([cfg.seed, 3001]),
                           dst_universe(stream, test_idx), len(test_idx))
    stats = replay_split(model, stream, test_idx, negs)
    row = stats.row(0, "test", cfg.timing)
    write_metrics_csv([row], out_dir / "metrics.csv")
    print(f"test AP {row.ap:.4f} AUC {row.auc:.4f} skip {row.skip_rate:.2%}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out_dir = resolve_out(args.out)
    stream = parse_events(args.data, args.format)
    write_manifest(out_dir, "ablate", cfg, args)
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
    results = run_ablations(stream, cfg, variants)
    lines = ["variant,split,ap"]
    for name, res in results:
        for row in res.rows:
            if row.ap is not None and row.split in ("val", "test", "test_inductive"):
                lines.append(f"{name},{row.split},{row.ap!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, res in results:
        print(f"{name}: test AP {res.test_ap:.4f}")
    return 0


def cmd_longterm(args) -> int:
    from .model import Model
    from .params import load_checkpoint as load_ck

    cfg = load_config(args.config, args.set, args.seed)
    out_dir = resolve_out(args.out)
    stream = parse_events(args.data, args.format)
    write_manifest(out_dir, "longterm", cfg, args)
    if args.checkpoint:
        model = Model(cfg, stream.num_nodes, stream.edge_dim)
        model.store.load_state_dict(load_ck(args.checkpoint))
    else:
        model = train(stream, cfg).model
    fractions = tuple(float(x) for x in args.fractions.split(","))
    results, pvalue, dropped = longterm_experiment(model, stream, fractions,
                                                   seed=cfg.seed)
    lines = ["fraction,events,successes,failures,ap"]
    for r in results:
        lines.append(f"{r.fraction!r},{r.events},{r.successes},{r.failures},{r.ap!r}")
    lines.append(f"# chi_square_pvalue = {pvalue!r}")
    if dropped:
        lines.append(f"# dropped_fractions = {dropped}")
    (out_dir / "longterm.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"chi-square p-value {pvalue:.4f}"
          + (f" (dropped {dropped})" if dropped else ""))
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "periodic-bipartite":
        stream = periodic_bipartite(args.users, args.items, args.events,
                                    cycle=args.cycle, seed=args.seed,
                                    labeled=args.labeled)
    elif args.kind == "reoccurrence-heavy":
        stream = reoccurrence_heavy(args.users, args.items, args.events,
                                    rho=args.rho, seed=args.seed)
    else:
        stream = noisy_periodic(args.users, args.items, args.events,
                                eta=args.eta, cycle=args.cycle, seed=args.seed)
    write_jodie_csv(stream, out, num_users=args.users)
    print(f"wrote {len(stream)} events to {out}")
    return 0


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; --help exits 0
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "longterm":
            return cmd_longterm(args)
        if args.command == "synth":
            return cmd_synth(args)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ParseError, OrderingError, UndefinedMetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TgmemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
