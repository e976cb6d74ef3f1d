"""Command-line interface.

Subcommands: gen-data, train, eval, infer, sweep, gradcheck. Exit codes:
0 success, 1 internal or assertion failure, 2 user/input error, 3 numerical
divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import pathlib
import sys
import traceback

import numpy as np

from . import config as run_config
from . import metrics
from .checkpoint import read_checkpoint
from .data import ShapesConfig, gen_shapes_dataset, load_dataset, save_dataset
from .errors import DataError, CheckpointError, ConfigurationError, NumericsError, SegGanError
from .gradcheck import run_suite
from .trainer import lambda_sweep

DEFAULT_LAMBDA_GRID = (0.005, 0.01, 0.02, 0.05)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="seggan",
        description="Adversarial semantic segmentation with a CRF-refined discriminator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=250, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size, divisible by 32")

    p = sub.add_parser("train", help="train on a JSON run config")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="run directory for artifacts")
    p.add_argument("--lambda", dest="lambda_adv", type=float, default=None,
                   help="override the adversarial weight from the config")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--report", default=None,
                   help="per-class report CSV path (default: eval_report.csv next to the checkpoint)")

    p = sub.add_parser("infer", help="predict a label map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input RGB PNG")
    p.add_argument("--out", required=True, help="output label PNG")

    p = sub.add_parser("sweep", help="train once per lambda and tabulate best MIoU")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", default=",".join(str(v) for v in DEFAULT_LAMBDA_GRID),
                   help="comma-separated lambda values")
    p.add_argument("--out", required=True, help="sweep output directory")

    p = sub.add_parser("gradcheck", help="finite-difference self-test of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="deliberately corrupt one op's analytic gradient (negative control)")
    return parser


def cmd_gen_data(args):
    cfg = ShapesConfig(num_samples=args.count, image_size=args.size, seed=args.seed)
    ds = gen_shapes_dataset(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train + {len(ds.val)} val samples to {args.out}")
    return 0


def _load_run_config(args):
    cfg = run_config.load_run_config(args.config)
    if getattr(args, "lambda_adv", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, lambda_adv=args.lambda_adv)
        cfg.loss = dataclasses.replace(cfg.loss, lambda_adv=args.lambda_adv)
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def cmd_train(args):
    cfg = _load_run_config(args)
    out = pathlib.Path(args.out)
    run_config.write_resolved_config(cfg, out)
    dataset = cfg.make_dataset()
    trainer = cfg.build_trainer(dataset, run_dir=out)
    summary = trainer.run(log=print)
    if dataset.val:
        _write_eval_report(trainer, "val", out / "eval_report.csv")
    print(f"best_miou={summary['best_miou']!r} at iteration {summary['best_iteration']}")
    print(f"final checkpoint: {summary['final_checkpoint']}")
    return 0


def _trainer_from_checkpoint(ckpt_path, dataset=None):
    header, buffers = read_checkpoint(ckpt_path)
    cfg = run_config.parse_run_config(header.get("config") or {})
    if dataset is None:
        dataset = cfg.make_dataset()
    trainer = cfg.build_trainer(dataset)
    trainer.restore(header, buffers)
    return trainer, cfg


def _write_eval_report(trainer, split, path):
    miou, iou, defined = trainer.evaluate(split)
    with open(path, "w") as f:
        f.write("class,iou\n")
        for c, (v, d) in enumerate(zip(iou, defined)):
            f.write(f"{c},{float(v)!r}\n" if d else f"{c},undefined\n")
        f.write(f"miou,{miou!r}\n")
    return miou


def cmd_eval(args):
    dataset = load_dataset(args.data)
    trainer, _ = _trainer_from_checkpoint(args.checkpoint, dataset)
    report = args.report or str(pathlib.Path(args.checkpoint).parent / "eval_report.csv")
    miou = _write_eval_report(trainer, args.split, report)
    print(f"wrote {report}")
    print(f"miou={miou!r}")
    return 0


def cmd_infer(args):
    from PIL import Image, UnidentifiedImageError

    trainer, cfg = _trainer_from_checkpoint(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ConfigurationError(f"cannot read image {args.image}: {e}") from e
    image = rgb.astype(np.float64).transpose(2, 0, 1)[None] / 255.0
    prob, _, _ = trainer.segnet.forward(image.astype(trainer.cfg.dtype), "eval")
    pred = metrics.predict_labels(prob)[0].astype(np.uint8)
    Image.fromarray(pred, mode="L").save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args):
    cfg = run_config.load_run_config(args.config)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"bad --lambdas value {args.lambdas!r}: {e}") from e
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config.write_resolved_config(cfg, out)
    dataset = cfg.make_dataset()
    rows = lambda_sweep(cfg.segnet, cfg.discriminator, cfg.train, cfg.loss,
                        dataset, lambdas, out_dir=out, log=print)
    for lam, miou, it in rows:
        print(f"lambda={lam:g} best_miou={miou!r} best_iteration={it}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed, fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.error:12.3e}  tol {r.tol:.0e}  {status}")
        ok &= r.passed
    print("all checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    except SegGanError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 1
    except AssertionError:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
