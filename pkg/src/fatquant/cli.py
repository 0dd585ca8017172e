"""Command-line pipeline: make-demo, transform, calibrate, finetune, compile, eval.

Stages communicate through files in a working directory:

    data/                   IDX images + labels (make-demo)
    model/model.json        float model
    model_transformed/      after fold-bn / dws-rescale
    transform_report.json
    calib_stats.json        per-site calibration statistics
    quant_params.json       tuned thresholds (+ pointwise scales)
    train_log.jsonl         one JSON line per training step
    model.fatq              compiled integer model
    eval_report.json

Every artifact embeds the hash of the flag set that produced it; reruns with
the same flags are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import engine, quant, transforms, tune, zoo
from .data import Dataset, load_dataset, select_calibration, write_idx
from .errors import FatQuantError, MissingPrerequisite
from .model import Graph, load_model, save_model
from .simulate import PointwiseScales, QuantizedNet

MODES = {"sym": "symmetric", "asym": "asymmetric"}


def _hash_config(args: argparse.Namespace, keys: list[str]) -> str:
    doc = {k: getattr(args, k) for k in keys}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(
            f"{path.name} not found in {path.parent}; run `fatquant {stage}` first")
    return path


def _load_float_model(workdir: Path) -> Graph:
    path = workdir / "model" / "model.json"
    return load_model(_need(path, "make-demo"))


def _load_stage_model(workdir: Path) -> Graph:
    """The model later stages consume: transformed if available, else float."""
    transformed = workdir / "model_transformed" / "model.json"
    if transformed.exists():
        return load_model(transformed)
    return _load_float_model(workdir)


def _load_train_images(workdir: Path) -> Dataset:
    path = _need(workdir / "data" / "train-images.idx", "make-demo")
    return load_dataset(path)


def _quant_config(args) -> quant.QuantConfig:
    return quant.QuantConfig(bits=args.bits, mode=MODES[args.mode],
                             granularity=args.granularity)


def cmd_make_demo(args) -> None:
    workdir = Path(args.workdir)
    (workdir / "data").mkdir(parents=True, exist_ok=True)
    train = zoo.make_digits(args.train_size, seed=args.seed, noise=args.noise)
    test = zoo.make_digits(args.test_size, seed=args.seed + 1, noise=args.noise)
    for name, ds in (("train", train), ("test", test)):
        imgs = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
        write_idx(workdir / "data" / f"{name}-images.idx", imgs)
        write_idx(workdir / "data" / f"{name}-labels.idx",
                  ds.labels.astype(np.uint8))

    g = zoo.toy_cnn(seed=args.seed)
    zoo.train_float(g, train, epochs=args.epochs, lr=args.lr, seed=args.seed)
    save_model(g, workdir / "model" / "model.json")
    acc = zoo.accuracy(g.forward, test)
    _write_json(workdir / "demo_info.json", {
        "config_hash": _hash_config(args, ["seed", "train_size", "test_size",
                                           "noise", "epochs", "lr"]),
        "float_test_accuracy": acc,
    })
    print(f"wrote demo data + float model (test accuracy {acc:.4f})")


def cmd_transform(args) -> None:
    workdir = Path(args.workdir)
    g = _load_float_model(workdir)
    report: dict = {"config_hash": _hash_config(
        args, ["fold_bn", "dws_rescale", "calib_size", "seed"])}
    if args.fold_bn:
        g = transforms.fold_batch_norm(g)
        report["fold_bn"] = True
    if args.dws_rescale:
        train = _load_train_images(workdir)
        calib = select_calibration(train, args.calib_size, seed=args.seed)
        g, rr = transforms.dws_rescale(g, calib)
        report["dws_rescale"] = rr.to_dict()
    save_model(g, workdir / "model_transformed" / "model.json")
    _write_json(workdir / "transform_report.json", report)
    print("wrote model_transformed/ and transform_report.json")


def cmd_calibrate(args) -> None:
    workdir = Path(args.workdir)
    g = _load_stage_model(workdir)
    train = _load_train_images(workdir)
    calib = select_calibration(train, args.calib_size, seed=args.seed)
    stats = quant.calibrate(g, calib, batch_size=args.batch)
    _write_json(workdir / "calib_stats.json", {
        "config_hash": _hash_config(args, ["calib_size", "seed", "batch"]),
        "activations": stats.activations,
        "weights": stats.weights,
    })
    print(f"wrote calib_stats.json ({len(stats.activations)} activation sites)")


def _stats_from_file(path: Path) -> quant.CalibStats:
    doc = json.loads(path.read_text())
    return quant.CalibStats(activations=doc["activations"], weights=doc["weights"])


def cmd_finetune(args) -> None:
    workdir = Path(args.workdir)
    g = _load_stage_model(workdir)
    stats = _stats_from_file(_need(workdir / "calib_stats.json", "calibrate"))
    cfg = _quant_config(args)
    params = quant.params_from_stats(g, stats, cfg)

    train = _load_train_images(workdir)
    k = max(1, int(len(train) * args.tune_fraction))
    tune_data = select_calibration(train, k, seed=args.seed + 1)

    scales = None
    if args.train in (tune.GROUP_POINTWISE, tune.GROUP_BOTH):
        scales = PointwiseScales.init_for(g)
    tcfg = tune.TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr,
                            seed=args.seed, train_groups=args.train)
    params, scales, log = tune.finetune(g, params, scales, tune_data, tcfg)

    doc = {
        "config_hash": _hash_config(args, ["mode", "granularity", "bits", "train",
                                           "epochs", "batch", "lr", "seed",
                                           "tune_fraction"]),
        "quant_config": {"bits": cfg.bits, "mode": cfg.mode,
                         "granularity": cfg.granularity},
        "sites": quant.params_to_dict(params),
        "pointwise": None,
    }
    if scales is not None:
        doc["pointwise"] = {
            "weight": {k: v.tolist() for k, v in scales.weight.items()},
            "bias": {k: v.tolist() for k, v in scales.bias.items()},
        }
    _write_json(workdir / "quant_params.json", doc)
    with open(workdir / "train_log.jsonl", "w") as f:
        for rec in log["steps"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    final = log["epochs"][-1]["mean_loss"] if log["epochs"] else float("nan")
    print(f"wrote quant_params.json and train_log.jsonl "
          f"(final epoch loss {final:.5f})")


def _load_params_and_scales(workdir: Path, g: Graph, args):
    """Tuned params if present, else calibration-only params from stats."""
    pfile = workdir / "quant_params.json"
    if pfile.exists():
        doc = json.loads(pfile.read_text())
        params = quant.params_from_dict(doc["sites"])
        scales = None
        if doc.get("pointwise"):
            scales = PointwiseScales(
                weight={k: np.asarray(v) for k, v in doc["pointwise"]["weight"].items()},
                bias={k: np.asarray(v) for k, v in doc["pointwise"]["bias"].items()})
        return params, scales, doc["config_hash"]
    stats = _stats_from_file(_need(workdir / "calib_stats.json", "calibrate"))
    params = quant.params_from_stats(g, stats, _quant_config(args))
    return params, None, ""


def cmd_compile(args) -> None:
    workdir = Path(args.workdir)
    g = _load_stage_model(workdir)
    params, scales, upstream = _load_params_and_scales(workdir, g, args)
    chash = _hash_config(args, ["mode", "granularity", "bits"]) + (
        f"+{upstream}" if upstream else "")
    qm = engine.compile_model(g, params, scales, config_hash=chash)
    engine.save_fatq(qm, workdir / "model.fatq")
    size = (workdir / "model.fatq").stat().st_size
    print(f"wrote model.fatq ({size} bytes)")


def cmd_eval(args) -> None:
    workdir = Path(args.workdir)
    data_dir = workdir / "data"
    test = load_dataset(_need(data_dir / "test-images.idx", "make-demo"),
                        data_dir / "test-labels.idx")
    g_float = _load_float_model(workdir)
    g = _load_stage_model(workdir)
    qm = engine.load_fatq(_need(workdir / "model.fatq", "compile"))
    params, scales, _ = _load_params_and_scales(workdir, g, args)
    sim = QuantizedNet(g, params, scales)

    def batched(fn):
        outs = [fn(test.images[s : s + args.batch])
                for s in range(0, len(test), args.batch)]
        return np.concatenate(outs)

    z_float = batched(g_float.forward)
    z_sim = batched(lambda x: sim.forward(x).logits)
    z_int = batched(lambda x: engine.run_int8(qm, x))
    labels = test.labels

    def top1(z):
        return float((np.argmax(z, axis=1) == labels).mean())

    report = {
        "config_hash": _hash_config(args, ["mode", "granularity", "bits", "batch"]),
        "float": {"top1": top1(z_float), "rmse_vs_float": 0.0},
        "fake_quant": {"top1": top1(z_sim),
                       "rmse_vs_float": tune.distillation_loss(z_float, z_sim)},
        "int8": {"top1": top1(z_int),
                 "rmse_vs_float": tune.distillation_loss(z_float, z_int)},
    }
    _write_json(workdir / "eval_report.json", report)
    print(f"{'path':<12}{'top-1':>8}{'RMSE vs float':>16}")
    for name in ("float", "fake_quant", "int8"):
        r = report[name]
        print(f"{name:<12}{r['top1']:>8.4f}{r['rmse_vs_float']:>16.6f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fatquant",
                                 description="int8 quantization pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workdir", required=True, help="pipeline working directory")
        p.add_argument("--seed", type=int, default=0)

    def quant_flags(p):
        p.add_argument("--mode", choices=("sym", "asym"), default="sym")
        p.add_argument("--granularity", choices=("scalar", "vector"), default="vector")
        p.add_argument("--bits", type=int, default=8)

    p = sub.add_parser("make-demo", help="generate synthetic data + float model")
    common(p)
    p.add_argument("--train-size", type=int, default=4000)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.18)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=3e-3)
    p.set_defaults(fn=cmd_make_demo)

    p = sub.add_parser("transform", help="fold batch norm / rescale DWS chains")
    common(p)
    p.add_argument("--fold-bn", action="store_true")
    p.add_argument("--dws-rescale", action="store_true")
    p.add_argument("--calib-size", type=int, default=100)
    p.set_defaults(fn=cmd_transform)

    p = sub.add_parser("calibrate", help="collect per-site ranges")
    common(p)
    p.add_argument("--calib-size", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("finetune", help="train thresholds / pointwise scales")
    common(p)
    quant_flags(p)
    p.add_argument("--train", choices=(tune.GROUP_THRESHOLDS, tune.GROUP_POINTWISE,
                                       tune.GROUP_BOTH),
                   default=tune.GROUP_THRESHOLDS)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tune-fraction", type=float, default=0.1,
                   help="fraction of train images used (unlabeled)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("compile", help="emit the integer model (.fatq)")
    common(p)
    quant_flags(p)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("eval", help="compare float / fake-quant / int8")
    common(p)
    quant_flags(p)
    p.add_argument("--batch", type=int, default=256)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except FatQuantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
