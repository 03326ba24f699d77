"""Command-line entry point: ``essl {gen-data,pretrain,evaluate,gradcheck,defaults}``.

Exit status is 0 on success, 1 for validation or assertion failures (bad
config, non-finite loss, schema mismatch, failed gradient check) and 2 for IO
or file-format errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import config as configmod
from . import gradcheck
from .data import Dataset, FormatError, PairEntry, gen_pair, save_flow_bin, save_point_bin, write_manifest
from .evaluate import evaluate
from .net import SchemaError, init_params
from .rng import stream
from .train import CheckpointError, NonFiniteLoss, load_checkpoint, pretrain

log = logging.getLogger("essl")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
SEQUENCE = "synthetic"


def _init_theta(cfg: configmod.RunConfig):
    return init_params(stream(cfg.train.seed, "init"), n_classes=cfg.train.augment.n_rotation_classes)


def _dataset(path) -> Dataset:
    if path is None:
        raise configmod.ConfigError("no dataset given (use --data or paths.*_data in the config)")
    return Dataset(path)


def cmd_gen_data(args) -> int:
    cfg = configmod.load(args.config).with_overrides(seed=args.seed)
    if args.pairs < 0:
        raise configmod.ConfigError("--pairs must be non-negative")
    out = Path(args.out)
    (out / SEQUENCE).mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    entries = []
    for i in range(args.pairs):
        pair = gen_pair(cfg.synth, stream(cfg.synth.seed, "pair", i))
        stem = f"{SEQUENCE}/{i:06d}"
        entry = PairEntry(f"{stem}.prev.bin", f"{stem}.curr.bin", f"{stem}.flow.bin")
        save_point_bin(out / entry.prev, pair.prev)
        save_point_bin(out / entry.curr, pair.curr)
        save_flow_bin(out / entry.flow, pair.flow)
        entries.append(entry)
    write_manifest(out, {SEQUENCE: entries} if entries else {})
    log.info("wrote %d pairs to %s", len(entries), out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = configmod.load(args.config).with_overrides(steps=args.steps, seed=args.seed)
    data = _dataset(args.data or cfg.paths.train_data)
    if len(data) == 0:
        raise configmod.ConfigError(f"{data.root}: dataset has no pairs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)

    def report(m):
        if m.step % 10 == 0 or m.step == cfg.train.total_steps - 1:
            log.info(
                "step %d lr %.3g total %.5g (pnce %.4g ce %.4g flow %.4g)",
                m.step, m.lr, m.total, m.l_pnce, m.l_ce, m.l_flow,
            )

    try:
        pretrain(cfg.train, data, out, _init_theta(cfg), on_step=report)
    except NonFiniteLoss as e:
        log.error("aborting: %s", e)
        return EXIT_INVALID
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt_path = Path(args.ckpt)
    cfg_path = args.config
    if cfg_path is None and (ckpt_path.parent / "config.json").is_file():
        cfg_path = ckpt_path.parent / "config.json"
    cfg = configmod.load(cfg_path)
    data = _dataset(args.data or cfg.paths.eval_data)
    seed = cfg.eval.seed if args.seed is None else args.seed
    ckpt = load_checkpoint(ckpt_path, expected=_init_theta(cfg))
    pairs = [data[i] for i in range(len(data))]
    report = evaluate(ckpt.theta, ckpt.xi, pairs, cfg.train, seed, cfg.eval.views_per_pair)
    report["checkpoint_step"] = ckpt.step
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    log.info("rotation_accuracy %.4f over %d views", report["rotation_accuracy"], report["rotation_total"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = None
    if args.corrupt_gradient is not None:
        corrupt = gradcheck.scale_gradient(args.corrupt_gradient, 1.01)
    result = gradcheck.run(args.seed, corrupt)
    for line in result.lines():
        print(line)
    if not result.ok:
        worst = max(result.results, key=lambda r: r.max_rel_error)
        print(f"gradient check FAILED: worst parameter {worst.worst_param}{list(worst.worst_index)}"
              f" in {worst.term}")
        return EXIT_INVALID
    print("gradient check passed")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(configmod.RunConfig().to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="essl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--config", help="run config JSON (defaults if omitted)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, help="overrides synth.seed")
    g.add_argument("--pairs", type=int, required=True, help="number of frame pairs")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="self-supervised pre-training")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (overrides paths.train_data)")
    t.add_argument("--out", required=True, help="run directory for metrics.csv and checkpoints")
    t.add_argument("--steps", type=int, help="overrides train.total_steps")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("evaluate", help="probe a checkpoint on held-out pairs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset directory (overrides paths.eval_data)")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--config", help="defaults to config.json beside the checkpoint")
    e.add_argument("--seed", type=int, help="overrides eval.seed")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    c.add_argument("--seed", type=int, default=0)
    # negative control: perturbs one parameter's analytic gradient by 1%
    c.add_argument("--corrupt-gradient", metavar="PARAM", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("defaults", help="print the default run config")
    d.set_defaults(func=cmd_defaults)
    return p


def _configure_threads() -> None:
    raw = os.environ.get("ESSL_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise configmod.ConfigError(f"ESSL_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        return args.func(args)
    except (FormatError, CheckpointError, OSError) as e:
        log.error("%s", e)
        return EXIT_IO
    except (configmod.ConfigError, SchemaError) as e:
        log.error("%s", e)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
