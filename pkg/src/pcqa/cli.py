"""Command line: train / predict / ensemble / evaluate / report, plus synth and serve.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .datamodel import denormalize_mos, load_manifest
from .errors import ConfigError, DataError, PCQAError
from .evaluation import (ensemble_blend, evaluate_against, predict, read_predictions,
                         write_predictions)
from .training import TrainConfig, train

log = logging.getLogger("pcqa")


def _write_sidecar(out: Path, record: dict) -> None:
    Path(str(out) + ".run.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def resolve_config(path) -> TrainConfig:
    cfg = TrainConfig.load(path)
    seed = os.environ.get("PCQA_SEED")
    if seed:
        try:
            cfg.seed = int(seed)
        except ValueError:
            raise ConfigError(f"PCQA_SEED must be an integer, got {seed!r}") from None
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    train_set = load_manifest(args.train)
    val_set = load_manifest(args.val) if args.val else None
    result = train(cfg, train_set, val_set, out_dir=args.out)
    best = result.metrics[result.best_epoch - 1] if result.best_epoch else None
    if best is not None:
        print(f"best epoch {best.epoch}: srcc {best.val_srcc:.4f} plcc {best.val_plcc:.4f} "
              f"val_score {best.val_score:.4f}")
    print(f"wrote {Path(args.out) / 'best.ckpt'}")
    return 0


def run_predict(checkpoint_path, manifest, tta=False):
    model, cfg, stats = checkpoint.load_checkpoint(checkpoint_path)
    samples = load_manifest(manifest)
    preds = predict(model, samples, cfg.resolution, cfg.max_frames, tta=tta, batch_size=cfg.batch_size)
    if stats is not None:
        preds = preds.map(lambda z: denormalize_mos(z, stats))
    return preds


def cmd_predict(args) -> int:
    preds = run_predict(args.checkpoint, args.manifest, args.tta)
    out = Path(args.out)
    write_predictions(preds, out)
    _write_sidecar(out, {"command": "predict", "checkpoint": str(args.checkpoint),
                         "manifest": str(args.manifest), "tta": bool(args.tta)})
    return 0


def _split_list(value: str) -> list[str]:
    return [v for v in (s.strip() for s in value.split(",")) if v]


def cmd_ensemble(args) -> int:
    inputs = _split_list(args.inputs)
    if not inputs:
        raise DataError("no input prediction files")
    sets = [read_predictions(p) for p in inputs]
    blended = ensemble_blend(sets)
    out = Path(args.out)
    write_predictions(blended, out)
    members = []
    for p in inputs:
        side = Path(p + ".run.json")
        members.append(json.loads(side.read_text()) if side.is_file() else {"file": p})
    _write_sidecar(out, {"command": "ensemble", "inputs": inputs, "members": members})
    return 0


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.pred)
    samples = load_manifest(args.manifest, check_media=False)
    s, p, v = evaluate_against(preds, samples)
    print(f"{s!r},{p!r},{v!r}")
    if args.save:
        side = Path(args.pred + ".run.json")
        origin = json.loads(side.read_text()) if side.is_file() else {}
        record = {"pred": str(args.pred), "manifest": str(args.manifest),
                  "srcc": s, "plcc": p, "val_score": v, "origin": origin}
        Path(args.pred + ".eval.json").write_text(json.dumps(record, indent=2) + "\n")
    return 0


REPORT_COLUMNS = ["run", "kind", "backbone", "text_encoders", "n_text_encoders", "mixer",
                  "tta", "ensemble_members", "epoch", "srcc", "plcc", "val_score"]


def _prediction_axes(origin: dict) -> tuple[bool, int]:
    if origin.get("command") == "ensemble":
        members = origin.get("members", [])
        return any(m.get("tta") for m in members), len(members)
    return bool(origin.get("tta")), 1


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        d = Path(d)
        cfg_path, metrics_path = d / "config.txt", d / "metrics.csv"
        if not cfg_path.is_file() or not metrics_path.is_file():
            raise DataError(f"{d} is not a training run directory")
        cfg = TrainConfig.load(cfg_path)
        base = {"run": str(d), "backbone": f"{cfg.vision_encoder}:{cfg.vision_dim}",
                "text_encoders": cfg.text_encoders,
                "n_text_encoders": len(_split_list(cfg.text_encoders)),
                "mixer": cfg.mixer_kind}
        with open(metrics_path, newline="") as fh:
            epochs = list(csv.DictReader(fh))
        if epochs:
            best = max(epochs, key=lambda r: float(r["val_score"]))
            rows.append({**base, "kind": "train", "tta": False, "ensemble_members": 1,
                         "epoch": best["epoch"], "srcc": best["val_srcc"],
                         "plcc": best["val_plcc"], "val_score": best["val_score"]})
        for ev in sorted(glob.glob(str(d / "*.eval.json"))):
            rec = json.loads(Path(ev).read_text())
            tta, k = _prediction_axes(rec.get("origin", {}))
            rows.append({**base, "kind": Path(rec["pred"]).name, "tta": tta, "ensemble_members": k,
                         "epoch": "", "srcc": rec["srcc"], "plcc": rec["plcc"],
                         "val_score": rec["val_score"]})
    return rows


def cmd_report(args) -> int:
    rows = report_rows(_split_list(args.runs))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_synthetic, split
    from .datamodel import write_manifest

    h, w = (int(v) for v in args.size.lower().split("x"))
    samples = make_synthetic(args.out, args.n, seed=args.seed, size=(h, w), frames=args.frames)
    tr, te = split(samples, args.holdout, args.seed)
    write_manifest(tr, Path(args.out) / "train.csv")
    write_manifest(te, Path(args.out) / "val.csv")
    print(f"wrote {len(tr)} train / {len(te)} val samples under {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service.app import create_app

    uvicorn.run(create_app(args.checkpoint), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcqa", description="Prompt-conditioned quality assessment")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true", help="average with horizontally flipped input")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="normalized average blending of prediction files")
    p.add_argument("--inputs", required=True, help="comma-separated prediction files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="print srcc,plcc,val_score")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--save", action="store_true", help="also write <pred>.eval.json for `report`")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="ablation table over run directories")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the procedural synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x96")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--holdout", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="run the HTTP scoring service")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PCQAError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
