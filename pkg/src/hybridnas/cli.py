"""Command-line entry point: ``hybridnas <command> [flags]``.

Exit codes: 0 success, 1 invalid input or failed check, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import HybridNASError, ValidationError

log = logging.getLogger("hybridnas")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _thread_limit():
    value = os.environ.get("SSHNN_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise ValidationError(f"SSHNN_THREADS must be a positive integer, got {value!r}") from exc
    if n < 1:
        raise ValidationError(f"SSHNN_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    from .data import gen_toy_dataset
    m = gen_toy_dataset(args.seed, args.labeled, args.unlabeled, args.size, args.out, args.patch_size)
    print(f"wrote {len(m.labeled)} labeled and {len(m.unlabeled)} unlabeled samples to {m.root}")
    return 0


def cmd_search(args) -> int:
    from .trainer import load_config, run_search
    cfg, run = load_config(args.config)
    if args.manifest:
        run.manifest = args.manifest
    if args.out:
        run.out_dir = args.out
    if args.config and run.manifest and not Path(run.manifest).is_absolute():
        # relative manifest paths are taken relative to the config file
        cand = Path(args.config).parent / run.manifest
        if cand.exists():
            run.manifest = str(cand)

    def progress(rec):
        print(f"epoch {rec['epoch']:3d}  L_s {rec['L_s']:.4f}  L_c {rec['L_c']:.4f}  "
              f"lambda1 {rec['lambda1']:.3f}  val dice {rec['val_dice']:.4f}", flush=True)

    res = run_search(cfg, run, resume=args.resume, progress=None if args.quiet else progress)
    print(f"best val dice {res.best_val_dice:.4f}; outputs in {res.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .config import SupernetConfig
    from .data import InMemoryDataset, read_manifest
    from .trainer import SearchRun, load_checkpoint
    manifest = read_manifest(args.manifest)
    classes = SupernetConfig.from_dict(load_checkpoint(args.checkpoint).config["supernet"]).num_classes
    if classes != manifest.classes:
        raise ValidationError(f"checkpoint predicts {classes} classes but the manifest declares "
                              f"{manifest.classes}")
    run = SearchRun.from_checkpoint(args.checkpoint, InMemoryDataset.load(manifest))
    ids = (manifest.labeled if args.split == "all" else run.split_ids(args.split))
    rep = run.evaluate(ids, args.model)
    _print_json({"split": args.split, "model": args.model, "samples": len(ids), **rep.to_dict()})
    return 0


def cmd_derive(args) -> int:
    from .trainer import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    Path(args.out).write_text(json.dumps(ckpt.genotype, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    def show(res):
        flag = "ok" if res.passed else "FAIL"
        print(f"{res.name:32s} max rel err {res.max_rel_error:.3e}  {flag}  ({res.seconds:.1f}s)", flush=True)

    results = run_suite(composites=not args.primitives_only, seed=args.seed, report=show)
    worst = max(r.max_rel_error for r in results)
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if all(r.passed for r in results) else 1


def cmd_info(args) -> int:
    from .config import SupernetConfig
    from .network import count_parameters
    from .trainer import load_checkpoint, load_config
    if args.checkpoint:
        cfg = SupernetConfig.from_dict(load_checkpoint(args.checkpoint).config["supernet"])
    elif args.config:
        cfg = load_config(args.config)[0]
    else:
        cfg = SupernetConfig()
    _print_json({"config": cfg.to_dict(), "parameters": count_parameters(cfg)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridnas", description="Semi-supervised hybrid architecture search for segmentation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled", type=int, default=8)
    g.add_argument("--unlabeled", type=int, default=16)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--patch-size", type=int, default=8)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search", help="run the architecture search")
    s.add_argument("--config", required=True, help='JSON {"supernet": {...}, "run": {...}}')
    s.add_argument("--resume", action="store_true", help="continue from <out_dir>/last")
    s.add_argument("--manifest", help="override run.manifest")
    s.add_argument("--out", help="override run.out_dir")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="val", choices=["val", "train", "l_A", "l_B", "all"])
    e.add_argument("--model", default="teacher", choices=["teacher", "student"])
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("derive", help="export the discrete genotype of a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_derive)

    c = sub.add_parser("gradcheck", help="finite-difference check of every autodiff primitive")
    c.add_argument("--primitives-only", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("info", help="parameter counts by group")
    i.add_argument("--checkpoint")
    i.add_argument("--config")
    i.set_defaults(func=cmd_info)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except HybridNASError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
