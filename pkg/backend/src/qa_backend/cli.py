"""Command-line bridge: features | scores | train.

`features` and `scores` follow the caller convention of
`backend_cli.py <mode> --manifest <json> --out <json>`: read the canvas
manifest, run the network, write the reply.  `train` fits the scoring model
on a labelled training manifest and saves a checkpoint.

Exit codes: 0 success, 2 usage/configuration error, 3 one or more canvases
could not be processed (a reply with per-entry error records is still
written), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bridge import read_manifest, write_reply
from .errors import QABackendError
from .model import (
    EXTRACTOR_ID,
    ScoringModel,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .runner import extract_features, score_canvases
from .train import BackendConfig, read_train_manifest, train_model


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backend_cli", description=__doc__)
    # Callers that append "<mode> --manifest ... --out ..." to a fixed command
    # prefix can only place extra flags before the mode, so --init/--seed live
    # on the top-level parser; the subcommands accept them too (SUPPRESS keeps
    # a post-mode flag from being clobbered by a default).
    p.add_argument(
        "--init",
        choices=("imagenet", "random"),
        default="imagenet",
        help="backbone weight source when no checkpoint is involved",
    )
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="mode", required=True)

    def common(sp):
        sp.add_argument("--manifest", required=True, help="canvas manifest JSON")
        sp.add_argument("--out", required=True, help="reply JSON to write")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument(
            "--init", choices=("imagenet", "random"), default=argparse.SUPPRESS
        )

    sp = sub.add_parser("features", help="pooled backbone features per canvas")
    common(sp)

    sp = sub.add_parser("scores", help="quality score per canvas")
    common(sp)
    sp.add_argument(
        "--checkpoint",
        default=None,
        help="trained model file (default: checkpoint.pt beside this script)",
    )

    sp = sub.add_parser("train", help="fit the scoring model on labelled canvases")
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--out", required=True, help="checkpoint file to write")
    sp.add_argument("--init", choices=("imagenet", "random"), default=argparse.SUPPRESS)
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--hidden", type=int, default=128)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument(
        "--freeze-backbone",
        action="store_true",
        help="cache backbone features and train only the head",
    )
    return p


def _write_run_reply(result: dict, out: str) -> int:
    write_reply(
        out,
        extractor_id=result["extractor_id"],
        dim=result["dim"],
        entries=result["entries"],
        gflops=result["gflops"],
        params_m=result["params_m"],
    )
    if result["failures"]:
        print(
            "failed to process canvases: " + ", ".join(result["failures"]),
            file=sys.stderr,
        )
        return 3
    return 0


def _cmd_features(args) -> int:
    manifest = read_manifest(args.manifest)
    backbone, _ = build_backbone(args.init, seed=args.seed)
    backbone.eval()
    return _write_run_reply(extract_features(backbone, manifest), args.out)


def _cmd_scores(args) -> int:
    manifest = read_manifest(args.manifest)
    ckpt = args.checkpoint
    if ckpt is None:
        ckpt = Path(sys.argv[0]).resolve().parent / "checkpoint.pt"
        if not Path(ckpt).exists():
            raise QABackendError(
                f"no trained model at {ckpt}; pass --checkpoint or run train first"
            )
    model, _meta = load_checkpoint(ckpt)
    return _write_run_reply(score_canvases(model, manifest), args.out)


def _cmd_train(args) -> int:
    items = read_train_manifest(args.train_manifest)
    cfg = BackendConfig(
        init=args.init,
        batch_size=args.batch_size,
        lr=args.lr,
        epochs=args.epochs,
        hidden=args.hidden,
        seed=args.seed,
        freeze_backbone=args.freeze_backbone,
        max_steps=args.max_steps,
        val_fraction=args.val_fraction,
    )
    model, report = train_model(items, cfg)
    save_checkpoint(model, args.out, init_tag=cfg.init)
    print(
        json.dumps(
            {
                "extractor_id": EXTRACTOR_ID,
                "items": len(items),
                "epochs_run": len(report.val_losses),
                "steps": report.steps,
                "best_epoch": report.best_epoch,
                "best_val_loss": report.best_val_loss,
                "checkpoint": str(args.out),
            }
        )
    )
    return 0


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.mode == "features":
            return _cmd_features(args)
        if args.mode == "scores":
            return _cmd_scores(args)
        return _cmd_train(args)
    except QABackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # keep the bridge contract: fail loudly, not silently
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
