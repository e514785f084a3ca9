"""Small convolutional patch classifier and sliding-window distortion detector.

Network: conv 7x7 -> ReLU -> 2x2 max-pool -> conv 3x3 -> ReLU -> global
average pool -> affine -> softmax over the 9 classes (8 distortions plus
Pristine). Convolutions are "valid" with stride 1. Training arithmetic is
float64; parameters are stored as float32.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from ddx.dataset import ManifestRecord, read_manifest
from ddx.distortions import DistortionClass
from ddx.imgcore import Rect, as_rgb, check_image, load_image, rng_stream, to_normalized

log = logging.getLogger(__name__)

PATCH = 32
NUM_CLASSES = len(DistortionClass)
CLASS_NAMES = [c.name for c in DistortionClass]
PRISTINE = int(DistortionClass.Pristine)
MAGIC = b"DDM1"
FORMAT_VERSION = 1
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def param_shapes(c1: int = 16, c2: int = 32, k1: int = 7, k2: int = 3) -> dict[str, tuple[int, ...]]:
    return {
        "conv1_w": (k1, k1, 3, c1),
        "conv1_b": (c1,),
        "conv2_w": (k2, k2, c1, c2),
        "conv2_b": (c2,),
        "fc_w": (c2, NUM_CLASSES),
        "fc_b": (NUM_CLASSES,),
    }


@dataclass
class PatchClassifierModel:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.meta.setdefault("patch_size", PATCH)
        self.meta.setdefault("classes", CLASS_NAMES)
        w1, w2 = self.params["conv1_w"], self.params["conv2_w"]
        expected = param_shapes(w1.shape[3], w2.shape[3], w1.shape[0], w2.shape[0])
        for name in PARAM_ORDER:
            p = self.params.get(name)
            if p is None or p.shape != expected[name]:
                raise ValueError(f"parameter {name} has shape {getattr(p, 'shape', None)}, expected {expected[name]}")
            if not np.all(np.isfinite(p)):
                raise ValueError(f"parameter {name} has non-finite values")
        self.params = {k: np.asarray(self.params[k], dtype=np.float64) for k in PARAM_ORDER}

    @property
    def patch_size(self) -> int:
        return int(self.meta["patch_size"])

    def architecture(self) -> list[dict]:
        return [{"name": k, "shape": list(self.params[k].shape)} for k in PARAM_ORDER]

    def copy(self) -> "PatchClassifierModel":
        return PatchClassifierModel({k: v.copy() for k, v in self.params.items()}, dict(self.meta))


def init_model(seed: int = 0, c1: int = 16, c2: int = 32, patch_size: int = PATCH) -> PatchClassifierModel:
    """He-normal convolutions, small random classifier, zero biases."""
    rng = rng_stream(seed, "init")
    shapes = param_shapes(c1, c2)
    params = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        elif name == "fc_w":
            params[name] = rng.normal(0.0, 0.01, size=shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return PatchClassifierModel(params, {"patch_size": patch_size, "seed": seed})


def zero_model(c1: int = 16, c2: int = 32, patch_size: int = PATCH) -> PatchClassifierModel:
    return PatchClassifierModel({k: np.zeros(s) for k, s in param_shapes(c1, c2).items()},
                                {"patch_size": patch_size})


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (N, H, W, C) -> (N, H-k+1, W-k+1, k*k*C) with (kh, kw, c) ordering
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    n, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, k * k * c)


def _col2im(dcols: np.ndarray, k: int, c: int, shape: tuple[int, ...]) -> np.ndarray:
    n, ho, wo, _ = dcols.shape
    d = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros(shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += d[:, :, :, i, j, :]
    return dx


def _pool_views(a: np.ndarray) -> list[np.ndarray]:
    # the four corners of each 2x2 block, in raster order; odd trailing rows/columns are dropped
    h, w = a.shape[1] // 2 * 2, a.shape[2] // 2 * 2
    return [a[:, dy:h:2, dx:w:2] for dy in (0, 1) for dx in (0, 1)]


def _forward(params: dict, x: np.ndarray):
    w1, b1 = params["conv1_w"], params["conv1_b"]
    w2, b2 = params["conv2_w"], params["conv2_b"]
    k1, c1, k2, c2 = w1.shape[0], w1.shape[3], w2.shape[0], w2.shape[3]
    cols1 = _im2col(x, k1)
    z1 = cols1 @ w1.reshape(-1, c1) + b1
    a1 = np.maximum(z1, 0.0)
    pooled = _pool_views(a1)
    pooled = np.maximum(np.maximum(pooled[0], pooled[1]), np.maximum(pooled[2], pooled[3]))
    cols2 = _im2col(pooled, k2)
    z2 = cols2 @ w2.reshape(-1, c2) + b2
    a2 = np.maximum(z2, 0.0)
    g = a2.mean(axis=(1, 2))
    logits = g @ params["fc_w"] + params["fc_b"]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    cache = (x, cols1, z1, a1, pooled, cols2, z2, g)
    return probs, cache


def _prep(model: PatchClassifierModel, patches: np.ndarray, dtype=np.float64) -> np.ndarray:
    x = np.asarray(patches, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    p = model.patch_size
    if x.ndim != 4 or x.shape[1:] != (p, p, 3):
        raise ValueError(f"expected patches of shape ({p}, {p}, 3), got {x.shape[1:] if x.ndim == 4 else x.shape}")
    return x - dtype(0.5)


def _cast(params: dict, dtype) -> dict:
    return params if dtype == np.float64 else {k: v.astype(dtype) for k, v in params.items()}


def forward_batch(model: PatchClassifierModel, patches: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Softmax outputs for a batch. ``dtype=np.float32`` trades ~1e-6 accuracy for speed."""
    return _forward(_cast(model.params, dtype), _prep(model, patches, dtype))[0].astype(np.float64)


def forward(model: PatchClassifierModel, patch: np.ndarray) -> np.ndarray:
    """Class probabilities (length 9) for one normalized RGB patch."""
    if np.asarray(patch).ndim != 3:
        raise ValueError(f"expected a single (H, W, 3) patch, got shape {np.shape(patch)}")
    return forward_batch(model, patch)[0]


def backward(model: PatchClassifierModel, batch: np.ndarray, labels,
             dtype=np.float64) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Gradients come back as float64 whatever ``dtype`` the arithmetic used.
    """
    params = _cast(model.params, dtype)
    x = _prep(model, batch, dtype)
    labels = np.asarray(labels, dtype=np.intp)
    n = x.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    probs, (x, cols1, z1, a1, pooled, cols2, z2, g) = _forward(params, x)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked.astype(np.float64), 1e-300))))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")

    w1, w2 = params["conv1_w"], params["conv2_w"]
    c1, k2, c2 = w1.shape[3], w2.shape[0], w2.shape[3]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = {"fc_w": g.T @ dlogits, "fc_b": dlogits.sum(axis=0)}
    dg = dlogits @ params["fc_w"].T
    ho2, wo2 = z2.shape[1], z2.shape[2]
    dz2 = np.broadcast_to(dg[:, None, None, :] / (ho2 * wo2), z2.shape) * (z2 > 0)
    grads["conv2_w"] = (cols2.reshape(-1, cols2.shape[-1]).T @ dz2.reshape(-1, c2)).reshape(w2.shape)
    grads["conv2_b"] = dz2.sum(axis=(0, 1, 2))
    dcols2 = dz2 @ w2.reshape(-1, c2).T
    dpooled = _col2im(dcols2, k2, c1, pooled.shape)
    # route each pooled gradient to the first maximum in raster order
    da1 = np.zeros_like(a1)
    taken = np.zeros(pooled.shape, dtype=bool)
    for view, dview in zip(_pool_views(a1), _pool_views(da1)):
        hit = (view == pooled) & ~taken
        dview[...] = dpooled * hit
        taken |= hit
    dz1 = da1 * (z1 > 0)
    grads["conv1_w"] = (cols1.reshape(-1, cols1.shape[-1]).T @ dz1.reshape(-1, c1)).reshape(w1.shape)
    grads["conv1_b"] = dz1.sum(axis=(0, 1, 2))
    return loss, {k: v.astype(np.float64) for k, v in grads.items()}


def sgd_step(model: PatchClassifierModel, grads: dict, lr: float, momentum: float = 0.0,
             velocity: dict | None = None) -> tuple[PatchClassifierModel, dict]:
    """Classical momentum: ``v = momentum * v - lr * g``; ``p = p + v``."""
    velocity = velocity or {k: np.zeros_like(v) for k, v in model.params.items()}
    new_v, new_p = {}, {}
    for k in PARAM_ORDER:
        if grads[k].shape != model.params[k].shape:
            raise ValueError(f"gradient {k} has shape {grads[k].shape}, expected {model.params[k].shape}")
        new_v[k] = momentum * velocity[k] - lr * grads[k]
        new_p[k] = model.params[k] + new_v[k]
    return PatchClassifierModel(new_p, dict(model.meta)), new_v


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 16
    patches_per_image: int = 32
    seed: int = 0
    flip: bool = True

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patches_per_image < 1:
            raise ValueError("batch_size, epochs and patches_per_image must be positive")


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, loss, accuracy

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_accuracy"])
            for epoch, loss, acc in self.rows:
                w.writerow([epoch, f"{loss:.6f}", f"{acc:.6f}"])


def patch_label(rec: ManifestRecord, x: int, y: int, size: int = PATCH) -> int | None:
    """Label of the patch with top-left (x, y); None for straddling patches."""
    if rec.task == "classification":
        return int(rec.spec.cls)
    cx, cy = x + size // 2, y + size // 2
    window = Rect(x, y, size, size)
    for reg in rec.regions:
        r = reg.rect
        if r.x <= cx < r.x1 and r.y <= cy < r.y1:
            return int(reg.spec.cls)
    if any(window.intersection_area(reg.rect) for reg in rec.regions):
        return None
    return PRISTINE


def sample_patches(rec: ManifestRecord, img: np.ndarray, n: int, rng: np.random.Generator,
                   size: int = PATCH) -> tuple[list[tuple[int, int]], list[int]]:
    """Patch corners and labels for one image.

    Detection images draw half of the patches centered inside a random region
    and half uniformly; straddling draws are discarded (up to 4n tries).
    """
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {rec.file} is smaller than the {size}px patch")
    corners, labels = [], []
    for attempt in range(4 * n):
        if len(corners) == n:
            break
        if rec.task == "detection" and rec.regions and attempt % 2 == 0:
            r = rec.regions[int(rng.integers(len(rec.regions)))].rect
            cx = int(rng.integers(r.x, r.x1))
            cy = int(rng.integers(r.y, r.y1))
            x = min(max(cx - size // 2, 0), w - size)
            y = min(max(cy - size // 2, 0), h - size)
        else:
            x = int(rng.integers(0, w - size + 1))
            y = int(rng.integers(0, h - size + 1))
        label = patch_label(rec, x, y, size)
        if label is not None:
            corners.append((x, y))
            labels.append(label)
    return corners, labels


def _load_rgb(base: Path, rec: ManifestRecord) -> np.ndarray:
    return as_rgb(to_normalized(load_image(base / rec.file))).astype(np.float32)


def epoch_stream(records: list[ManifestRecord], images: list[np.ndarray], cfg: TrainConfig,
                 epoch: int, size: int = PATCH) -> tuple[np.ndarray, np.ndarray]:
    """All (patch, label) pairs of one epoch, shuffled. With ``cfg.flip`` every
    sampled patch is followed into the pool by its horizontal mirror."""
    xs, ys = [], []
    for i, (rec, img) in enumerate(zip(records, images)):
        corners, labels = sample_patches(rec, img, cfg.patches_per_image,
                                         rng_stream(cfg.seed, "patches", epoch, i), size)
        for (x, y), lab in zip(corners, labels):
            p = img[y:y + size, x:x + size]
            xs.append(p)
            ys.append(lab)
            if cfg.flip:
                xs.append(p[:, ::-1])
                ys.append(lab)
    if not xs:
        raise ValueError("no trainable patches in the training split")
    X = np.stack(xs)
    Y = np.asarray(ys, dtype=np.intp)
    order = rng_stream(cfg.seed, "shuffle", epoch).permutation(len(Y))
    return X[order], Y[order]


def _quantize32(model: PatchClassifierModel) -> PatchClassifierModel:
    return PatchClassifierModel({k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()},
                                dict(model.meta))


def train_records(records: list[ManifestRecord], base_dir: str | os.PathLike, cfg: TrainConfig,
                  model: PatchClassifierModel | None = None) -> tuple[PatchClassifierModel, TrainLog]:
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("manifest has no train split records")
    base = Path(base_dir)
    images = [_load_rgb(base, r) for r in train]
    model = model or init_model(cfg.seed)
    size = model.patch_size
    velocity = None
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        X, Y = epoch_stream(train, images, cfg, epoch, size)
        if epoch == 1:
            probs = np.concatenate([forward_batch(model, X[i:i + 256], np.float32) for i in range(0, len(Y), 256)])
            loss0 = float(-np.mean(np.log(np.maximum(probs[np.arange(len(Y)), Y], 1e-300))))
            tlog.rows.append((0, loss0, float(np.mean(probs.argmax(1) == Y))))
        losses, correct = [], 0
        for start in range(0, len(Y), cfg.batch_size):
            xb, yb = X[start:start + cfg.batch_size], Y[start:start + cfg.batch_size]
            try:
                loss, grads = backward(model, xb, yb, np.float32)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}; try a smaller --lr") from None
            model, velocity = sgd_step(model, grads, cfg.lr, cfg.momentum, velocity)
            losses.append(loss * len(yb))
            if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite; try a smaller --lr")
        # accuracy from a forward pass of the updated model on the epoch's first batch
        probs = forward_batch(model, X[:256], np.float32)
        correct = float(np.mean(probs.argmax(1) == Y[:256]))
        tlog.rows.append((epoch, float(sum(losses) / len(Y)), correct))
        log.info("epoch %d loss %.4f acc %.3f", epoch, tlog.rows[-1][1], correct)
    model = _quantize32(model)
    task = train[0].task
    model.meta.update({"seed": cfg.seed, "epochs": cfg.epochs, "task": task, "train_config": asdict(cfg)})
    if task == "detection":
        model.meta["variant"] = train[0].variant
    return model, tlog


def train(manifest: str | os.PathLike, cfg: TrainConfig) -> tuple[PatchClassifierModel, TrainLog]:
    manifest = Path(manifest)
    return train_records(read_manifest(manifest), manifest.parent, cfg)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class ScoredBox:
    rect: Rect
    cls: DistortionClass
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if DistortionClass.parse(self.cls) is DistortionClass.Pristine:
            raise ValueError("a detection cannot be Pristine")


def _as_model_input(img: np.ndarray) -> np.ndarray:
    check_image(img)
    return as_rgb(to_normalized(img))


def classify_image(model: PatchClassifierModel, img: np.ndarray) -> tuple[DistortionClass, float]:
    """Average a 5x5 grid of patch predictions; ties go to the lowest class code."""
    x = _as_model_input(img)
    size = model.patch_size
    h, w = x.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than the {size}px patch")
    ys = np.round(np.linspace(0, h - size, 5)).astype(int)
    xs = np.round(np.linspace(0, w - size, 5)).astype(int)
    patches = np.stack([x[y:y + size, xx:xx + size] for y in ys for xx in xs])
    mean = forward_batch(model, patches, np.float32).mean(axis=0)
    k = int(np.argmax(mean))
    return DistortionClass(k), float(mean[k])


def window_probabilities(model: PatchClassifierModel, img: np.ndarray, stride: int = 8) -> np.ndarray:
    """Class probabilities of windows centered on each ``stride`` cell.

    Returns ``(ceil(H/stride), ceil(W/stride), 9)``. Window centers sit at
    ``k * stride + stride // 2``; windows reaching past the border see a
    reflect-padded image.
    """
    x = _as_model_input(img)
    size = model.patch_size
    h, w = x.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than the {size}px patch")
    if stride < 1:
        raise ValueError("stride must be positive")
    ny, nx = -(-h // stride), -(-w // stride)
    pad = size + stride
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    off = pad + stride // 2 - size // 2
    win = sliding_window_view(padded, (size, size), axis=(0, 1))  # Y, X, C, s, s
    tops = off + stride * np.arange(ny)
    lefts = off + stride * np.arange(nx)
    out = np.empty((ny, nx, NUM_CLASSES))
    for i, top in enumerate(tops):
        row = win[top, lefts].transpose(0, 2, 3, 1)
        out[i] = forward_batch(model, row, np.float32)
    return out


def _iou(a: Rect, b: Rect) -> float:
    inter = a.intersection_area(b)
    return inter / (a.area + b.area - inter)


def _edge(pm: np.ndarray, mask: np.ndarray, stride: int, threshold: float, side: int, limit: int) -> float:
    """Median over rows of the threshold crossing at one horizontal end of ``mask``.

    The crossing is interpolated linearly between the outermost component
    window center and its outside neighbour; a component touching the map
    border extends to the image border.
    """
    vals = []
    for r in np.flatnonzero(mask.any(axis=1)):
        cols = np.flatnonzero(mask[r])
        j = cols[0] if side < 0 else cols[-1]
        o = j + side
        if o < 0 or o >= mask.shape[1]:
            vals.append(0.0 if side < 0 else float(limit))
            continue
        p_in, p_out = pm[r, j], pm[r, o]
        f = (p_in - threshold) / (p_in - p_out) if p_in > p_out else 0.5
        vals.append(j * stride + stride // 2 + side * stride * min(max(f, 0.0), 1.0))
    return float(np.median(vals))


def boxes_from_maps(prob_maps: np.ndarray, width: int, height: int, stride: int = 8,
                    threshold: float = 0.5, nms_iou: float = 0.45) -> list[ScoredBox]:
    """Connected components of thresholded class maps -> boxes, then cross-class NMS.

    Each box edge sits where the class probability crosses ``threshold``
    between window centers (median over the component's rows or columns),
    clipped to the image. The score is the mean class probability over the
    component.
    """
    structure = np.ones((3, 3), dtype=bool)
    candidates: list[ScoredBox] = []
    for c in range(NUM_CLASSES):
        if c == PRISTINE:
            continue
        pm = prob_maps[:, :, c]
        labels, n = ndimage.label(pm >= threshold, structure=structure)
        for k in range(1, n + 1):
            mask = labels == k
            x0 = int(round(min(max(_edge(pm, mask, stride, threshold, -1, width), 0.0), width - 1)))
            x1 = int(round(min(max(_edge(pm, mask, stride, threshold, 1, width), x0 + 1), width)))
            y0 = int(round(min(max(_edge(pm.T, mask.T, stride, threshold, -1, height), 0.0), height - 1)))
            y1 = int(round(min(max(_edge(pm.T, mask.T, stride, threshold, 1, height), y0 + 1), height)))
            score = float(pm[mask].mean())
            candidates.append(ScoredBox(Rect(x0, y0, x1 - x0, y1 - y0), DistortionClass(c), min(score, 1.0)))
    candidates.sort(key=lambda b: -b.score)  # stable: ties keep class order
    kept: list[ScoredBox] = []
    for b in candidates:
        if all(_iou(b.rect, k.rect) < nms_iou for k in kept):
            kept.append(b)
    return kept


def detect(model: PatchClassifierModel, img: np.ndarray, stride: int = 8, threshold: float = 0.5,
           nms_iou: float = 0.45) -> list[ScoredBox]:
    h, w = img.shape[:2]
    maps = window_probabilities(model, img, stride)
    return boxes_from_maps(maps, w, h, stride, threshold, nms_iou)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: PatchClassifierModel, path: str | os.PathLike) -> None:
    """``DDM1`` container: magic, version, JSON metadata, shape table, float32 data (LE)."""
    meta = json.dumps(model.meta, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(meta))
    out += meta
    out += struct.pack("<I", len(PARAM_ORDER))
    for name in PARAM_ORDER:
        shape = model.params[name].shape
        out += struct.pack("<B", len(name)) + name.encode("ascii")
        out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    for name in PARAM_ORDER:
        out += model.params[name].astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_model(path: str | os.PathLike) -> PatchClassifierModel:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"truncated model file while reading {what}: "
                                   f"expected at least {pos + n} bytes, got {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic: not a DDM1 model file")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack("<B", take(1, "shape table"))
        name = take(nlen, "shape table").decode("ascii", errors="replace")
        (ndim,) = struct.unpack("<B", take(1, "shape table"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape table"))
        table.append((name, shape))
    if [n for n, _ in table] != list(PARAM_ORDER):
        raise ModelFormatError(f"unexpected tensor table {[n for n, _ in table]}")
    expected = pos + 4 * sum(int(np.prod(s)) for _, s in table)
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise ModelFormatError(f"{kind} model file: expected {expected} bytes, got {len(data)}")
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
    try:
        return PatchClassifierModel(params, meta)
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent shapes: {exc}") from None
