"""Command-line front end: ``slsdeep {train,eval,infer,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Any config key can
be overridden as ``--section.key=value``; overrides beat the ``--config``
file, which beats the defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import checks
from . import data as data_mod
from .checkpoint import load_checkpoint
from .config import RunConfig
from .metrics import binarize
from .network import ConfigError, build
from .tensor import Tensor
from .trainer import NonFiniteError, model_from_checkpoint, train, validate

logger = logging.getLogger("slsdeep")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
RESOLVED_NAME = "config.resolved.txt"
OVERLAY_COLOUR = (255, 0, 0)

_OVERRIDE = re.compile(r"^--([A-Za-z_]\w*)\.([A-Za-z_]\w*)=(.*)$", re.S)


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="flat 'section.key = value' config file")
    common.add_argument("--out", help="output directory (same as --paths.out)")
    common.add_argument("--seed", type=int, help="sets train.seed and augment.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slsdeep", description="SLSDeep skin lesion segmentation",
                                     allow_abbrev=False,
                                     epilog="Override any config key with --section.key=value.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model from a manifest", allow_abbrev=False)
    sub.add_parser("eval", parents=[common], help="score a checkpoint on a labelled manifest", allow_abbrev=False)
    p = sub.add_parser("infer", parents=[common], help="write mask PNGs for images", allow_abbrev=False)
    p.add_argument("images", nargs="+", help="input image files")
    p.add_argument("--overlay", action="store_true", help="also write the mask boundary drawn on the input")
    p = sub.add_parser("gradcheck", parents=[common], help="run finite-difference gradient suites",
                       allow_abbrev=False)
    p.add_argument("--scope", default="all", help="operator name, 'ops', 'network' or 'all'")
    return parser


def _overrides(args, extras: Sequence[str]) -> list:
    items = []
    if args.seed is not None:
        items += [("train", "seed", str(args.seed)), ("augment", "seed", str(args.seed))]
    if args.out is not None:
        items.append(("paths", "out", args.out))
    for token in extras:
        m = _OVERRIDE.match(token)
        if not m:
            raise UsageError(f"unrecognised argument {token!r} (overrides take the form --section.key=value)")
        items.append(m.groups())
    return items


def _require_file(value: Optional[str], flag: str, what: str) -> Path:
    if not value:
        raise UsageError(f"{what} required: pass {flag}=<path>")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path} (from {flag})")
    return path


def _write_provenance(run: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(run.to_text(), encoding="utf-8")


def _absolute_paths(run: RunConfig) -> None:
    # Provenance copies must work from any directory.
    for key in ("train_manifest", "val_manifest", "eval_manifest", "checkpoint"):
        value = getattr(run.paths, key)
        if value:
            setattr(run.paths, key, str(Path(value).resolve()))


def cmd_train(run: RunConfig) -> int:
    train_path = _require_file(run.paths.train_manifest, "--paths.train_manifest", "training manifest")
    val_path = None
    if run.paths.val_manifest:
        val_path = _require_file(run.paths.val_manifest, "--paths.val_manifest", "validation manifest")
    out = Path(run.paths.out)
    _write_provenance(run, out)

    size = run.network.input_size
    train_ds = data_mod.ManifestDataset(data_mod.load_manifest(train_path, "train"), size)
    val_ds = data_mod.ManifestDataset(data_mod.load_manifest(val_path, "val"), size) if val_path else None
    if len(train_ds) == 0:
        raise UsageError(f"training manifest {train_path} has no records")
    model = build(run.network, init_seed=run.train.seed)
    logger.info("training %d parameters on %d images", model.num_parameters(), len(train_ds))

    def progress(record):
        logger.debug("iter %d l_total %.6f", record["iter"], record["l_total"])

    result = train(model, train_ds, run.train, val_dataset=val_ds, augment_config=run.augment,
                   out_dir=out, callbacks=[progress])
    report = validate(model, val_ds if val_ds is not None else train_ds)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    last = result.log[-1]
    print(f"trained {len(result.log)} iterations; final l_total={last['l_total']:.6f}; "
          f"JAC={report.jac:.4f}; checkpoint {result.final_checkpoint}")
    return EXIT_OK


def _load_model(run: RunConfig):
    ckpt_path = _require_file(run.paths.checkpoint, "--paths.checkpoint", "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    # An explicitly configured network must match the checkpoint tensor by tensor.
    return model_from_checkpoint(ckpt, run.network if run.network_explicit() else None)


def cmd_eval(run: RunConfig) -> int:
    manifest = run.paths.eval_manifest or run.paths.val_manifest
    flag = "--paths.eval_manifest" if run.paths.eval_manifest or not run.paths.val_manifest else "--paths.val_manifest"
    path = _require_file(manifest, flag, "evaluation manifest")
    model = _load_model(run)
    out = Path(run.paths.out)
    _write_provenance(run, out)
    ds = data_mod.ManifestDataset(data_mod.load_manifest(path, "eval"), model.config.input_size)
    if len(ds) == 0:
        raise UsageError(f"evaluation manifest {path} has no records")
    report = validate(model, ds)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    print("  ".join(f"{k}={v:.4f}" for k, v in report.scores().items()))
    return EXIT_OK


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of a boolean mask that touch the background (4-neighbourhood)."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def cmd_infer(run: RunConfig, images: Sequence[str], overlay: bool) -> int:
    model = _load_model(run)
    out = Path(run.paths.out)
    _write_provenance(run, out)
    size = model.config.input_size
    failures = 0
    used = set()
    for src in images:
        try:
            im = data_mod.read_image(src)
            probs = model.forward(Tensor(data_mod.image_to_array(im, size)), training=False)
            small = Image.fromarray(binarize(probs)[0, 0] * np.uint8(255), "L")
            mask = small.resize(im.size, Image.NEAREST)
            stem = Path(src).stem
            while stem in used:
                stem += "_"
            used.add(stem)
            mask.save(out / f"{stem}_mask.png")
            if overlay:
                canvas = np.array(im)
                canvas[boundary(np.asarray(mask) > 0)] = OVERLAY_COLOUR
                Image.fromarray(canvas, "RGB").save(out / f"{stem}_overlay.png")
            print(f"{src} -> {out / f'{stem}_mask.png'}")
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"error: {src}: {exc}", file=sys.stderr)
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_gradcheck(scope: str, seed: int) -> int:
    if scope not in checks.SCOPES:
        raise UsageError(f"unknown scope {scope!r}; valid scopes: {', '.join(checks.SCOPES)}")
    ok = True
    for name, report in checks.run_scope(scope, seed=seed):
        ok &= report.passed
        print(f"{'PASS' if report.passed else 'FAIL'}  {name}  max_rel_err={report.max_rel_err:.3e}")
        if not report.passed:
            for line in report.lines():
                print(f"    {line}")
    return EXIT_OK if ok else EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = RunConfig.resolve(args.config, _overrides(args, extras))
        _absolute_paths(run)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "eval":
            return cmd_eval(run)
        if args.command == "infer":
            return cmd_infer(run, args.images, args.overlay)
        return cmd_gradcheck(args.scope, run.train.seed)
    except (UsageError, ConfigError) as exc:
        print(f"slsdeep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, NonFiniteError) as exc:
        print(f"slsdeep {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
