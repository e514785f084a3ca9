"""ddx command line: dataset generation, training, evaluation and reporting.

Exit codes: 0 success, 1 operational error, 2 metric undefined (NaN).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from ddx import dataset as ds
from ddx import detector as det
from ddx import evalmap as ev
from ddx.distortions import DistortionClass, DistortionSpec, apply
from ddx.imgcore import load_image, rng_stream, save_image, to_normalized, to_uint8
from ddx.kernels import BACKEND, default_threads

log = logging.getLogger("ddx")


class CliError(Exception):
    pass


class UndefinedMetric(Exception):
    pass


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return vals


def _threads(args) -> int:
    return args.threads if args.threads and args.threads > 0 else default_threads()


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _records(manifest: Path, split: str | None, task: str) -> list[ds.ManifestRecord]:
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    recs = [r for r in ds.read_manifest(manifest) if split in (None, "all") or r.split == split]
    if any(r.task != task for r in recs):
        raise CliError(f"{manifest} is not a {task} manifest")
    return recs


def _load_model(path) -> det.PatchClassifierModel:
    if not Path(path).is_file():
        raise CliError(f"model not found: {path}")
    return det.load_model(path)


def detect_records(model, records, base: Path, stride, threshold, nms, threads) -> dict[str, list]:
    def work(rec):
        img = to_normalized(load_image(base / rec.file))
        return rec.file, det.detect(model, img, stride=stride, threshold=threshold, nms_iou=nms)
    return dict(_pmap(work, records, threads))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_class(args) -> int:
    refs = Path(args.refs)
    if not refs.is_dir():
        raise CliError(f"reference directory not found: {refs}")
    split = ds.SplitSpec.classification(unit=args.split_unit)
    records = ds.build_classification_dataset(refs, args.out, split, args.seed, _threads(args))
    manifest = Path(args.out) / ds.MANIFEST_NAME
    print(f"{len(records)} records")
    print("splits: " + " ".join(f"{k}={v}" for k, v in ds.split_histogram(records).items()))
    print(f"manifest {manifest} sha256 {ds.file_sha256(manifest)}")
    return 0


def cmd_gen_detect(args) -> int:
    refs = Path(args.refs)
    if not refs.is_dir():
        raise CliError(f"reference directory not found: {refs}")
    split = ds.SplitSpec.detection(unit=args.split_unit)
    records = ds.build_detection_dataset(refs, args.out, args.variant, args.per_ref, split,
                                         args.seed, _threads(args))
    out = Path(args.out)
    report = (out / "report.txt").read_text(encoding="utf-8")
    for line in report.splitlines():
        if line.startswith("skipped "):
            print(f"warning: {line}", file=sys.stderr)
    manifest = out / ds.MANIFEST_NAME
    print(f"{len(records)} records (variant {args.variant})")
    print("splits: " + " ".join(f"{k}={v}" for k, v in ds.split_histogram(records).items()))
    print(f"manifest {manifest} sha256 {ds.file_sha256(manifest)}")
    return 0


def cmd_train(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    cfg = det.TrainConfig(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                          epochs=args.epochs, patches_per_image=args.patches_per_image,
                          seed=args.seed, flip=args.flip)
    model, tlog = det.train(manifest, cfg)
    det.save_model(model, args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    tlog.write_csv(log_path)
    first, last = tlog.rows[0], tlog.rows[-1]
    print(f"trained {cfg.epochs} epochs: loss {first[1]:.4f} -> {last[1]:.4f}")
    print(f"model {args.out} sha256 {ds.file_sha256(args.out)}")
    print(f"training log {log_path}")
    return 0


def cmd_eval_class(args) -> int:
    model = _load_model(args.model)
    manifest = Path(args.manifest)
    recs = _records(manifest, args.split, "classification")
    if not recs:
        raise UndefinedMetric(f"no {args.split} records in {manifest}")

    def work(rec):
        return rec.file, det.classify_image(model, to_normalized(load_image(manifest.parent / rec.file)))
    preds = dict(_pmap(work, recs, _threads(args)))
    acc, cm = ev.classification_accuracy([r.spec.cls for r in recs], [preds[r.file][0] for r in recs])
    if args.predictions_out:
        ev.write_class_predictions(preds, args.predictions_out)
    print(ev.format_table(["Method", "accuracy"], [[Path(args.model).stem, acc]]))
    print()
    print(ev.confusion_table(cm))
    if math.isnan(acc):
        raise UndefinedMetric("accuracy undefined")
    return 0


def _detection_preds(args, manifest: Path, recs) -> dict[str, list]:
    if args.predictions:
        return ev.read_detection_predictions(args.predictions)
    if not args.model:
        raise CliError("either --model or --predictions is required")
    model = _load_model(args.model)
    return detect_records(model, recs, manifest.parent, args.stride, args.threshold, args.nms, _threads(args))


def _check_defined(values) -> None:
    if any(math.isnan(v) for v in values):
        raise UndefinedMetric("metric undefined (NaN)")


def cmd_eval_detect(args) -> int:
    manifest = Path(args.manifest)
    recs = _records(manifest, args.split, "detection")
    gts = {r.file: r.regions for r in recs}
    if not any(gts.values()):
        raise UndefinedMetric(f"no ground-truth regions in {args.split} split of {manifest}")
    preds = _detection_preds(args, manifest, recs)
    if args.predictions_out:
        ev.write_detection_predictions(preds, args.predictions_out)
    res = ev.mean_ap(gts, preds, args.iou)
    name = Path(args.model).stem if args.model else Path(args.predictions).stem
    print("mAP (all-point interpolated AP, unweighted mean over classes present in ground truth)")
    print(ev.map_table([(name, res.row())], args.iou))
    if res.excluded:
        print("excluded (absent from ground truth): " + ", ".join(c.name for c in res.excluded))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("method," + ",".join(f"map@{t:g}" for t in args.iou) + "\n")
            fh.write(name + "," + ",".join(f"{v:.6f}" for v in res.row()) + "\n")
    _check_defined(res.row())
    return 0


def cmd_transfer(args) -> int:
    models = {"basic": _load_model(args.model_basic), "difficult": _load_model(args.model_difficult)}
    test_sets, lookup = {}, {}
    for variant, path in (("basic", args.manifest_basic), ("difficult", args.manifest_difficult)):
        manifest = Path(path)
        recs = _records(manifest, args.split, "detection")
        ids = [f"{variant}:{r.file}" for r in recs]
        test_sets[variant] = ({i: r.regions for i, r in zip(ids, recs)}, ids)
        for i, r in zip(ids, recs):
            lookup[i] = manifest.parent / r.file
    threads = _threads(args)

    def predictor(model):
        def run(image_id):
            img = to_normalized(load_image(lookup[image_id]))
            return det.detect(model, img, stride=args.stride, threshold=args.threshold, nms_iou=args.nms)
        return run

    # precompute in parallel, then hand cached results to the pure evaluator
    cache = {}
    for v, model in models.items():
        ids = list(lookup)
        cache[v] = dict(zip(ids, _pmap(predictor(model), ids, threads)))
    table = ev.transfer_matrix({v: cache[v].__getitem__ for v in models}, test_sets, args.iou)
    print("Transfer (mAP)")
    print(ev.transfer_table(table, args.iou))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("train,test," + ",".join(f"map@{t:g}" for t in args.iou) + "\n")
            for i, tr in enumerate(ev.VARIANT_ORDER):
                for j, te in enumerate(ev.VARIANT_ORDER):
                    fh.write(f"{tr},{te}," + ",".join(f"{v:.6f}" for v in table[i, j]) + "\n")
    _check_defined(table.ravel())
    return 0


def cmd_report(args) -> int:
    manifest = Path(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = ds.read_manifest(manifest)
    recs = [r for r in recs if args.split in (None, "all") or r.split == args.split]
    sections = []
    values = []
    if args.predictions:
        det_recs = [r for r in recs if r.task == "detection"]
        gts = {r.file: r.regions for r in det_recs}
        sizes = {r.file: r.image_size for r in det_recs}
        preds = ev.read_detection_predictions(args.predictions)
        res = ev.mean_ap(gts, preds, args.iou)
        values += res.row()
        sections.append("mAP\n" + ev.map_table([(Path(args.predictions).stem, res.row())], args.iou))
        buckets = ev.size_bucketed_recall(gts, preds, sizes, args.size_iou, args.edges)
        csv_text = ev.size_recall_csv(buckets)
        (out / "size_recall.csv").write_text(csv_text, encoding="utf-8")
        rows = [[f"[{b.lo:g}, {b.hi:g})", str(b.n_gt), "absent" if b.recall is None else f"{b.recall:.3f}"]
                for b in buckets]
        sections.append(f"recall by region size @IoU {args.size_iou:g}\n"
                        + ev.format_table(["sqrt(area)/size", "regions", "recall"], rows))
        with open(out / "map.csv", "w", encoding="utf-8") as fh:
            fh.write(",".join(f"map@{t:g}" for t in args.iou) + "\n")
            fh.write(",".join(f"{v:.6f}" for v in res.row()) + "\n")
    if args.class_predictions:
        cls_recs = [r for r in recs if r.task == "classification"]
        preds = ev.read_class_predictions(args.class_predictions)
        missing = [r.file for r in cls_recs if r.file not in preds]
        if missing:
            raise CliError(f"{len(missing)} images have no classification prediction, e.g. {missing[0]}")
        acc, cm = ev.classification_accuracy([r.spec.cls for r in cls_recs], [preds[r.file][0] for r in cls_recs])
        values.append(acc)
        sections.append("classification\n" + ev.format_table(["Method", "accuracy"], [["model", acc]])
                        + "\n\n" + ev.confusion_table(cm))
        with open(out / "accuracy.csv", "w", encoding="utf-8") as fh:
            fh.write(f"accuracy\n{acc:.6f}\n")
    if not sections:
        raise CliError("nothing to report: pass --predictions and/or --class-predictions")
    text = "\n\n".join(sections) + "\n"
    (out / "tables.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    _check_defined(values)
    return 0


def cmd_distort(args) -> int:
    cls = DistortionClass.parse(args.type)
    if cls is DistortionClass.Pristine:
        raise CliError("choose one of the eight distortion types")
    if (args.level is None) == (args.param is None):
        raise CliError("give exactly one of --level or --param")
    spec = DistortionSpec.at_level(cls, args.level) if args.level else DistortionSpec(cls, args.param)
    img = to_normalized(load_image(args.input))
    out = apply(img, spec, rng_stream(args.seed, "distort"))
    fmt = "jpeg" if Path(args.output).suffix.lower() in (".jpg", ".jpeg") else "png"
    save_image(to_uint8(out), args.output, format=fmt)
    print(f"{cls.name} param={spec.param} -> {args.output}")
    return 0


def cmd_verify(args) -> int:
    if not Path(args.manifest).is_file():
        raise CliError(f"manifest not found: {args.manifest}")
    report = ds.verify_manifest(args.manifest)
    print(json.dumps(report, indent=2))
    return 0 if report["ok"] else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--threads", type=int, default=0,
                        help="worker threads, 0 = DDX_THREADS or one per CPU")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging, repeatable")

    p = argparse.ArgumentParser(prog="ddx", description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"ddx 0.1.0 (kernels: {BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    def detect_flags(sp):
        sp.add_argument("--stride", type=int, default=8, help="window stride in pixels")
        sp.add_argument("--threshold", type=float, default=0.5, help="class probability threshold")
        sp.add_argument("--nms", type=float, default=0.45, help="cross-class NMS IoU")
        sp.add_argument("--iou", type=_thresholds, default=ev.DEFAULT_THRESHOLDS,
                        help="comma-separated IoU thresholds")

    sp = add("gen-class", cmd_gen_class, "build the classification dataset (24 images per reference)")
    sp.add_argument("--refs", required=True, help="directory of PNG/JPEG reference images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--split-unit", choices=["reference", "image"], default="reference",
                    help="assign splits per reference image or per generated image")

    sp = add("gen-detect", cmd_gen_detect, "build a detection dataset of locally distorted 300x300 images")
    sp.add_argument("--refs", required=True, help="directory of PNG/JPEG reference images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--variant", choices=["basic", "difficult"], default="basic", help="region-layout preset")
    sp.add_argument("--per-ref", type=int, default=20, help="images per reference")
    sp.add_argument("--split-unit", choices=["reference", "image"], default="reference",
                    help="assign splits per reference image or per generated image")

    sp = add("train", cmd_train, "train the patch classifier on a manifest's train split")
    sp.add_argument("--manifest", required=True, help="dataset manifest; its train split is used")
    sp.add_argument("--out", required=True, help="model file (DDM1)")
    sp.add_argument("--log", default=None, help="training-curve CSV; None writes it next to the model")
    d = det.TrainConfig()
    sp.add_argument("--epochs", type=int, default=d.epochs, help="passes over the sampled patches")
    sp.add_argument("--lr", type=float, default=d.lr, help="SGD learning rate")
    sp.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    sp.add_argument("--batch-size", type=int, default=d.batch_size, help="patches per SGD step")
    sp.add_argument("--patches-per-image", type=int, default=d.patches_per_image, help="patches drawn per image each epoch")
    sp.add_argument("--flip", action=argparse.BooleanOptionalAction, default=d.flip,
                    help="horizontal-flip augmentation")

    sp = add("eval-class", cmd_eval_class, "classification accuracy and confusion matrix")
    sp.add_argument("--model", required=True, help="model file (DDM1)")
    sp.add_argument("--manifest", required=True, help="classification manifest")
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"], help="records to score")
    sp.add_argument("--predictions-out", default=None, help="write per-image predictions (JSON lines)")

    sp = add("eval-detect", cmd_eval_detect, "detection mAP at several IoU thresholds")
    sp.add_argument("--manifest", required=True, help="detection manifest")
    sp.add_argument("--model", default=None, help="model file (DDM1) to run")
    sp.add_argument("--predictions", default=None, help="score an existing predictions file instead of a model")
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"], help="records to score")
    sp.add_argument("--predictions-out", default=None, help="write per-image boxes (JSON lines)")
    sp.add_argument("--csv", default=None, help="also write the mAP row as CSV")
    detect_flags(sp)

    sp = add("transfer", cmd_transfer, "basic/difficult train x test mAP matrix")
    sp.add_argument("--model-basic", required=True, help="model trained on the basic variant")
    sp.add_argument("--model-difficult", required=True, help="model trained on the difficult variant")
    sp.add_argument("--manifest-basic", required=True, help="basic-variant detection manifest")
    sp.add_argument("--manifest-difficult", required=True, help="difficult-variant detection manifest")
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"], help="records to score")
    sp.add_argument("--csv", default=None, help="also write the table as CSV")
    detect_flags(sp)

    sp = add("report", cmd_report, "mAP / accuracy tables and the size-recall CSV from prediction files")
    sp.add_argument("--manifest", required=True, help="manifest the predictions refer to")
    sp.add_argument("--predictions", default=None, help="detection predictions (JSON lines)")
    sp.add_argument("--class-predictions", default=None, help="classification predictions (JSON lines)")
    sp.add_argument("--out-dir", required=True, help="directory for CSV files and tables.txt")
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"], help="records to score")
    sp.add_argument("--iou", type=_thresholds, default=ev.DEFAULT_THRESHOLDS, help="comma-separated IoU thresholds")
    sp.add_argument("--size-iou", type=float, default=0.9, help="IoU threshold for the size-recall curve")
    sp.add_argument("--edges", type=_thresholds, default=ev.DEFAULT_SIZE_EDGES,
                    help="size-bucket edges on sqrt(area)/image_size")

    sp = add("distort", cmd_distort, "apply one distortion to a single image")
    sp.add_argument("--input", required=True, help="PNG or JPEG image")
    sp.add_argument("--output", required=True, help="output path; .jpg/.jpeg saves JPEG, anything else PNG")
    sp.add_argument("--type", required=True, help="distortion slug",
                    choices=[c.slug for c in DistortionClass if c is not DistortionClass.Pristine])
    sp.add_argument("--level", type=int, choices=[1, 2, 3], default=None, help="grid level, 3 = strongest")
    sp.add_argument("--param", type=float, default=None, help="explicit parameter inside the grid range")

    sp = add("verify", cmd_verify, "check a manifest against its images")
    sp.add_argument("--manifest", required=True, help="manifest to check")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 0:
        parser.error("--threads must be >= 0")
    try:
        return args.func(args)
    except UndefinedMetric as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
