"""Command-line entry point: ``spectune <command> [options]``.

Config precedence, lowest first: built-in defaults, ``--config`` file (or the
config stored in ``--manifest``), ``--set key=value`` overrides, then the
dedicated flags such as ``--adapter-r``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import BASES, MODES, ExperimentConfig, format_config, parse_config_text, set_key
from .errors import ConfigError, SpectuneError
from .ordering import METHODS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

FLAG_KEYS = {
    "adapter_r": "adapter.r",
    "adapter_s": "adapter.s",
    "groups_k": "ordering.k",
    "ordering": "ordering.method",
    "basis": "adapter.basis",
}


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="plain-text 'key = value' config file")
    g.add_argument("--manifest", help="rerun with the config, data and checkpoint recorded in a run manifest")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set optim.lr=0.1 (repeatable)")
    g.add_argument("--adapter-r", type=int)
    g.add_argument("--adapter-s", type=float)
    g.add_argument("--groups-k", type=int)
    g.add_argument("--ordering", choices=METHODS)
    g.add_argument("--basis", choices=BASES)
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--seed", type=int, help="sets both dataset.seed and optim.seed")
    g.add_argument("--epochs", type=int,
                   help="optim.pretrain_epochs for 'pretrain', optim.epochs otherwise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic source/target datasets")
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("pretrain", help="train every parameter on the source classes")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("tune", help="fine-tune a frozen checkpoint on the target classes")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-spectral", metavar="DIR", help="write W, L, U and eigenvalues of the first sample")
    _config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("ablate", help="run tune over a parameter grid")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="swept key (aliases: r, s, k, basis, ordering); repeat for a product grid")
    _config_flags(p)

    p = sub.add_parser("selfcheck", help="run the spectral invariant suite")
    p.add_argument("--corrupt-basis", action="store_true",
                   help="fault injection: flip one entry of the synthesis basis")
    p.add_argument("--count", type=int, default=100, help="random clouds in the spectral suite")
    p.add_argument("--dump-spectral", metavar="DIR", help="also dump one random cloud's graphs")
    _config_flags(p)
    return parser


def _read_manifest(path: str) -> dict:
    mpath = Path(path)
    if not mpath.exists():
        raise ConfigError(f"manifest {mpath} does not exist")
    return json.loads(mpath.read_text())


def resolve_config(args: argparse.Namespace, manifest: dict | None = None) -> ExperimentConfig:
    if manifest is not None:
        cfg = ExperimentConfig.from_dict(manifest["config"])
    else:
        cfg = ExperimentConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for key, value in parse_config_text(path.read_text(), str(path)).items():
            set_key(cfg, key, value)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            set_key(cfg, key, value)
    if args.mode is not None:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.dataset.seed = cfg.optim.seed = args.seed
    if args.epochs is not None:
        set_key(cfg, "optim.pretrain_epochs" if args.command == "pretrain" else "optim.epochs", args.epochs)
    return cfg.validate()


def _need(value, flag: str, manifest: dict | None, key: str):
    if value is None and manifest is not None:
        value = manifest.get(key)
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _dump_first(directory: str, data_dir: str, cfg: ExperimentConfig) -> None:
    from .data import load_split, prepare
    from .graph import dump_spectral
    from .ordering import sort_keypoints

    raw = load_split(data_dir, "target", "train")
    prep = prepare(raw.clouds[:1], raw.classes, cfg.model.n, cfg.model.g)
    kp = prep.keypoints[0]
    dump_spectral(directory, kp, sort_keypoints(kp, cfg.ordering.method, cfg.ordering.k, seed=cfg.optim.seed))


def _print_final(records) -> None:
    last = records[-1]
    print(f"epoch {last.epoch}: loss {last.loss:.6f} train_acc {last.train_acc:.4f} "
          f"test_acc {last.test_acc:.4f} trainable {last.trainable}/{last.total} "
          f"({100 * last.trainable_ratio:.2f}%)")


def run(args: argparse.Namespace) -> int:
    from . import train
    from .data import gen_synthetic

    if args.command == "eval":
        print(json.dumps(train.run_eval(args.checkpoint, args.data, args.split), sort_keys=True))
        return EXIT_OK

    manifest = _read_manifest(args.manifest) if args.manifest else None
    cfg = resolve_config(args, manifest)

    if args.command == "gen-data":
        out = gen_synthetic(cfg, args.out)
        print(f"dataset written to {out}")
        return EXIT_OK

    if args.command == "selfcheck":
        from .selfcheck import run_selfcheck

        results = run_selfcheck(cfg, corrupt_basis=args.corrupt_basis, count=args.count)
        for r in results:
            print(r.line())
        if args.dump_spectral:
            import numpy as np

            from .graph import dump_spectral
            from .ordering import sort_keypoints

            kp = np.random.default_rng(cfg.dataset.seed).normal(size=(cfg.model.n, 3))
            dump_spectral(args.dump_spectral, kp, sort_keypoints(kp, cfg.ordering.method, cfg.ordering.k))
        failed = [r.name for r in results if not r.ok]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return EXIT_FAIL if failed else EXIT_OK

    data = _need(args.data, "--data", manifest, "data")
    if args.command == "pretrain":
        _, records = train.run_pretrain(cfg, data, args.out)
        _print_final(records)
        return EXIT_OK

    ckpt = _need(args.checkpoint, "--checkpoint", manifest, "checkpoint")
    ckpt_path = str(Path(ckpt).resolve())
    if args.command == "tune":
        if args.dump_spectral:
            _dump_first(args.dump_spectral, data, cfg)
        _, records = train.run_tune(cfg, ckpt, data, args.out, checkpoint_path=ckpt_path)
        _print_final(records)
        return EXIT_OK

    if args.command == "ablate":
        if args.grid:
            grid = train.parse_grid(args.grid)
        elif manifest is not None and "grid" in manifest:
            grid = manifest["grid"]
        else:
            raise ConfigError("--grid is required")
        rows = train.run_ablation(cfg, grid, ckpt, data, args.out, checkpoint_path=ckpt_path)
        print((Path(args.out) / "ablation.tsv").read_text(), end="")
        print(f"{len(rows)} cells written to {args.out}")
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpectuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
