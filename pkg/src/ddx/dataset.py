"""Classification and detection dataset builders, manifests and verification.

A manifest is a ``manifest.jsonl`` file: one JSON object per line, written in
deterministic (ref_id, item) order. Images live under ``images/<ref_id>/``
next to the manifest and paths in records are relative to the manifest.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ddx.distortions import DISTORTIONS, DistortionClass, DistortionSpec, apply, level_grid
from ddx.imgcore import Rect, load_image, rng_stream, save_image, to_normalized, to_uint8
from ddx.regiongen import RegionAnnotation, preset, synthesize_detection_image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TASKS = ("classification", "detection")
VARIANTS = ("basic", "difficult")
REF_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    """Malformed manifest content; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class SplitSpec:
    train: float
    val: float
    test: float
    unit: str = "reference"
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")
        if self.unit not in ("reference", "image"):
            raise ValueError(f"split unit must be 'reference' or 'image', got {self.unit!r}")

    @classmethod
    def classification(cls, unit: str = "reference", seed: int = 0) -> "SplitSpec":
        return cls(0.6, 0.2, 0.2, unit, seed)

    @classmethod
    def detection(cls, unit: str = "reference", seed: int = 0) -> "SplitSpec":
        return cls(0.8, 0.0, 0.2, unit, seed)

    def counts(self, n: int) -> tuple[int, int, int]:
        """Largest-remainder apportionment of ``n`` units (ties go to earlier splits)."""
        raw = [f * n for f in (self.train, self.val, self.test)]
        base = [math.floor(r + 1e-9) for r in raw]
        rest = n - sum(base)
        order = sorted(range(3), key=lambda i: (-(raw[i] - base[i]), i))
        for i in order[:rest]:
            base[i] += 1
        return tuple(base)

    def assign(self, keys: list[str], master_seed: int) -> dict[str, str]:
        """Map each key to a split name; deterministic in (keys, seeds)."""
        keys = sorted(keys)
        perm = rng_stream(master_seed, "split", self.seed, self.unit).permutation(len(keys))
        n_train, n_val, _ = self.counts(len(keys))
        out = {}
        for rank, idx in enumerate(perm):
            out[keys[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        return out


@dataclass
class ManifestRecord:
    file: str
    ref_id: str
    split: str
    task: str
    spec: DistortionSpec | None = None
    level_index: int | None = None
    variant: str | None = None
    image_size: int | None = None
    regions: list[RegionAnnotation] = field(default_factory=list)

    def to_json(self) -> dict:
        d = {"file": self.file, "ref_id": self.ref_id, "split": self.split, "task": self.task}
        if self.task == "classification":
            d["spec"] = spec_to_json(self.spec)
            d["level_index"] = self.level_index
        else:
            d["variant"] = self.variant
            d["image_size"] = self.image_size
            d["regions"] = [region_to_json(r) for r in self.regions]
        return d


def spec_to_json(spec: DistortionSpec) -> dict:
    return {"class": spec.cls.name, "code": int(spec.cls), "param": spec.param}


def region_to_json(region: RegionAnnotation) -> dict:
    r = region.rect
    return {"x": r.x, "y": r.y, "w": r.w, "h": r.h, **spec_to_json(region.spec)}


def _parse_spec(d: dict, line: int) -> DistortionSpec:
    try:
        cls = DistortionClass.parse(d["class"])
    except (KeyError, ValueError):
        raise ManifestError(f"unknown class {d.get('class')!r}", line) from None
    if "code" in d and d["code"] != int(cls):
        raise ManifestError(f"class code {d['code']} does not match {cls.name}", line)
    try:
        return DistortionSpec(cls, d.get("param"))
    except ValueError as exc:
        raise ManifestError(str(exc), line) from None


def record_from_json(d: dict, line: int) -> ManifestRecord:
    if not isinstance(d, dict):
        raise ManifestError("record is not an object", line)
    for key in ("file", "ref_id", "split", "task"):
        if not isinstance(d.get(key), str):
            raise ManifestError(f"missing or non-string field {key!r}", line)
    if d["split"] not in SPLITS:
        raise ManifestError(f"unknown split {d['split']!r}", line)
    task = d["task"]
    if task == "classification":
        if not isinstance(d.get("spec"), dict):
            raise ManifestError("classification record needs a 'spec' object", line)
        level = d.get("level_index")
        if level not in (0, 1, 2):
            raise ManifestError(f"level_index must be 0, 1 or 2, got {level!r}", line)
        return ManifestRecord(d["file"], d["ref_id"], d["split"], task,
                              spec=_parse_spec(d["spec"], line), level_index=level)
    if task == "detection":
        if d.get("variant") not in VARIANTS:
            raise ManifestError(f"unknown variant {d.get('variant')!r}", line)
        size = d.get("image_size")
        if not isinstance(size, int) or size < 1:
            raise ManifestError(f"bad image_size {size!r}", line)
        regions = []
        for reg in d.get("regions") or []:
            try:
                rect = Rect(int(reg["x"]), int(reg["y"]), int(reg["w"]), int(reg["h"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"bad region rect: {exc}", line) from None
            spec = _parse_spec(reg, line)
            if spec.cls is DistortionClass.Pristine:
                raise ManifestError("region class cannot be Pristine", line)
            regions.append(RegionAnnotation(rect, spec))
        return ManifestRecord(d["file"], d["ref_id"], d["split"], task,
                              variant=d["variant"], image_size=size, regions=regions)
    raise ManifestError(f"unknown task {task!r}", line)


def write_manifest(records: list[ManifestRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from None
            records.append(record_from_json(d, lineno))
    return records


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_manifest(path: str | os.PathLike, split_tolerance: float = 0.05) -> dict:
    """Check a manifest against its images and schema.

    Returns ``{"ok", "records", "errors", "warnings", "splits"}``; each error
    is ``{"line", "message"}``. Parse errors stop at the first bad line.
    """
    path = Path(path)
    base = path.parent
    report = {"ok": True, "records": 0, "errors": [], "warnings": [], "splits": {}}

    def err(line, msg):
        report["errors"].append({"line": line, "message": msg})

    lines = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                err(lineno, f"invalid JSON: {exc.msg}")
                continue
            # rect bounds are checked here so that they are reported even when parsing succeeds
            try:
                rec = record_from_json(d, lineno)
            except ManifestError as exc:
                err(lineno, str(exc).split(": ", 1)[-1])
                continue
            lines.append((lineno, rec))

    if not lines and not report["errors"]:
        report["warnings"].append("no records")
    counts = {s: 0 for s in SPLITS}
    ref_splits: dict[str, set] = {}
    for lineno, rec in lines:
        counts[rec.split] += 1
        ref_splits.setdefault(rec.ref_id, set()).add(rec.split)
        img_path = base / rec.file
        if not img_path.is_file():
            err(lineno, f"missing image file {rec.file}")
        if rec.task == "detection":
            if not rec.regions:
                err(lineno, "detection record has no regions")
            for reg in rec.regions:
                if not reg.rect.inside(rec.image_size, rec.image_size):
                    err(lineno, f"rect out of bounds: {reg.rect.as_tuple()} in {rec.image_size}x{rec.image_size}")
            for i, a in enumerate(rec.regions):
                for b in rec.regions[i + 1:]:
                    if a.rect.intersection_area(b.rect):
                        err(lineno, f"overlapping rects {a.rect.as_tuple()} and {b.rect.as_tuple()}")
    report["records"] = len(lines)
    report["splits"] = counts
    leaked = sorted(r for r, s in ref_splits.items() if len(s) > 1)
    if leaked:
        report["warnings"].append(f"{len(leaked)} ref_ids appear in more than one split")
    if lines:
        tasks = {rec.task for _, rec in lines}
        expected = SplitSpec.classification() if tasks == {"classification"} else SplitSpec.detection()
        n = len(lines)
        for name, frac in zip(SPLITS, (expected.train, expected.val, expected.test)):
            if abs(counts[name] / n - frac) > split_tolerance and n >= 20:
                report["warnings"].append(f"split {name} holds {counts[name] / n:.3f} of records, expected {frac}")
    report["ok"] = not report["errors"]
    return report


# ---------------------------------------------------------------------------
# builders


def list_references(refs_dir: str | os.PathLike) -> list[Path]:
    refs_dir = Path(refs_dir)
    if not refs_dir.is_dir():
        raise FileNotFoundError(f"reference directory not found: {refs_dir}")
    refs = sorted(p for p in refs_dir.iterdir() if p.suffix.lower() in REF_SUFFIXES and p.is_file())
    if not refs:
        raise ValueError(f"no PNG/JPEG references in {refs_dir}")
    stems = [p.stem for p in refs]
    if len(set(stems)) != len(stems):
        raise ValueError(f"duplicate reference ids in {refs_dir}")
    return refs


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _prepare_out(out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out}")
    return out


def build_classification_dataset(refs_dir, out_dir, split: SplitSpec | None = None,
                                 master_seed: int = 0, threads: int = 1) -> list[ManifestRecord]:
    """24 globally distorted PNGs per reference (8 classes x 3 levels)."""
    split = split or SplitSpec.classification()
    refs = list_references(refs_dir)
    out = _prepare_out(out_dir)
    ref_ids = [p.stem for p in refs]
    jobs = []
    for ref_path in refs:
        for cls in DISTORTIONS:
            for level in range(3):
                jobs.append((ref_path, cls, level, int(cls) * 3 + level))
    if split.unit == "reference":
        assignment = split.assign(ref_ids, master_seed)
        split_of = lambda ref_id, item: assignment[ref_id]  # noqa: E731
    else:
        assignment = split.assign([f"{p.stem}/{item:03d}" for p, _, _, item in jobs], master_seed)
        split_of = lambda ref_id, item: assignment[f"{ref_id}/{item:03d}"]  # noqa: E731

    cache: dict[Path, np.ndarray] = {p: to_normalized(load_image(p)) for p in refs}

    def work(job):
        ref_path, cls, level, item = job
        ref_id = ref_path.stem
        spec = DistortionSpec(cls, level_grid(cls)[0][level])
        img = apply(cache[ref_path], spec, rng_stream(master_seed, "classification", ref_id, item))
        rel = f"images/{ref_id}/{item:03d}.png"
        (out / "images" / ref_id).mkdir(parents=True, exist_ok=True)
        save_image(to_uint8(img), out / rel)
        return ManifestRecord(rel, ref_id, split_of(ref_id, item), "classification",
                              spec=spec, level_index=level)

    records = _pool_map(work, jobs, threads)
    write_manifest(records, out / MANIFEST_NAME)
    return records


def build_detection_dataset(refs_dir, out_dir, variant: str = "basic", per_ref: int = 20,
                            split: SplitSpec | None = None, master_seed: int = 0,
                            threads: int = 1) -> list[ManifestRecord]:
    """``per_ref`` locally distorted 300x300 images per reference.

    References smaller than the crop size are skipped with a warning and
    listed in ``report.txt`` next to the manifest.
    """
    if per_ref < 1:
        raise ValueError(f"per_ref must be >= 1, got {per_ref}")
    cfg = preset(variant)
    split = split or SplitSpec.detection()
    refs = list_references(refs_dir)
    out = _prepare_out(out_dir)
    size = cfg.image_size

    usable, skipped = [], []
    cache = {}
    for p in refs:
        img = load_image(p)
        if img.shape[0] < size or img.shape[1] < size:
            msg = f"skipped {p.name}: {img.shape[1]}x{img.shape[0]} is smaller than {size}x{size}"
            log.warning(msg)
            skipped.append(msg)
            continue
        usable.append(p)
        cache[p] = to_normalized(img)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(f"variant: {variant}\nreferences: {len(refs)}\nused: {len(usable)}\nskipped: {len(skipped)}\n")
        for line in skipped:
            fh.write(line + "\n")
    if not usable:
        raise ValueError(f"no reference in {refs_dir} is at least {size}x{size}")

    jobs = [(p, item) for p in usable for item in range(per_ref)]
    if split.unit == "reference":
        assignment = split.assign([p.stem for p in usable], master_seed)
        split_of = lambda ref_id, item: assignment[ref_id]  # noqa: E731
    else:
        assignment = split.assign([f"{p.stem}/{i:03d}" for p, i in jobs], master_seed)
        split_of = lambda ref_id, item: assignment[f"{ref_id}/{item:03d}"]  # noqa: E731

    def work(job):
        ref_path, item = job
        ref_id = ref_path.stem
        rng = rng_stream(master_seed, "detection", variant, ref_id, item)
        img, regions = synthesize_detection_image(cache[ref_path], cfg, rng)
        rel = f"images/{ref_id}/{item:03d}.png"
        (out / "images" / ref_id).mkdir(parents=True, exist_ok=True)
        save_image(to_uint8(img), out / rel)
        return ManifestRecord(rel, ref_id, split_of(ref_id, item), "detection",
                              variant=variant, image_size=size, regions=regions)

    records = _pool_map(work, jobs, threads)
    write_manifest(records, out / MANIFEST_NAME)
    return records


def split_histogram(records: list[ManifestRecord]) -> dict[str, int]:
    hist = {s: 0 for s in SPLITS}
    for r in records:
        hist[r.split] += 1
    return hist
