"""Dataset readers, checkpoint files, PPM export and labelled-subset splits.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"SITCKPT\\0"
    version    u32       currently 1
    length     u64       payload byte count
    crc32      u32       zlib.crc32 of the payload
    payload:
      meta_len u32, meta JSON (utf-8)   config, counters, rng state, optimizer scalars
      count    u32                       number of tensors
      per tensor:
        name_len u32, name (utf-8), ndim u32, dims u32 * ndim,
        float32 little-endian values (C order)

Tensors are the model parameters (their own names), uncertainty
log-variances (``uncertainty.s*``) and Adam moments (``adam.m.<name>``,
``adam.v.<name>``).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ShapeError

CIFAR10_RECORD = 1 + 3072
CIFAR100_RECORD = 2 + 3072
STL10_IMAGE = 3 * 96 * 96

CKPT_MAGIC = b"SITCKPT\0"
CKPT_VERSION = 1

METRICS_HEADER = ["step", "epoch", "l_rec", "l_rot", "l_con", "w1", "w2", "w3", "total", "lr", "ms"]


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


class CheckpointError(ValueError):
    """Checkpoint is corrupt, from another version, or incompatible."""


@dataclass
class Dataset:
    images: np.ndarray  # M×C×H×W float32 in [0, 1]
    labels: np.ndarray | None
    class_count: int
    name: str

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ValueError(f"labels of {self.name!r} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.class_count, name or self.name)


# -- CIFAR / STL ---------------------------------------------------------


def _to_unit(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def decode_cifar(buf: bytes, variant: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Decode raw CIFAR binary records into ``(images N×3×32×32, labels)``.

    CIFAR-10 records are 1 label byte + 3072 pixel bytes (R, G, B planes,
    each 32×32 row-major). CIFAR-100 records carry a coarse then a fine label
    byte; the fine label is returned.
    """
    rec = {10: CIFAR10_RECORD, 100: CIFAR100_RECORD}.get(variant)
    if rec is None:
        raise ValueError(f"variant must be 10 or 100, got {variant}")
    if len(buf) == 0 or len(buf) % rec:
        raise FormatError(f"{len(buf)} bytes is not a positive multiple of the {rec}-byte CIFAR-{variant} record")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, rec - 3073].astype(np.int64)
    images = arr[:, rec - 3072 :].reshape(-1, 3, 32, 32)
    return _to_unit(images), labels


def _cifar_files(path: Path, variant: int, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    if variant == 10:
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        subdir = "cifar-10-batches-bin"
    else:
        names = ["train.bin"] if split == "train" else ["test.bin"]
        subdir = "cifar-100-binary"
    if (path / subdir).is_dir():
        path = path / subdir
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-{variant} files: {missing}")
    return files


def load_cifar(path, variant: int = 10, split: str = "train") -> Dataset:
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    files = _cifar_files(Path(path), variant, split)
    parts = [decode_cifar(f.read_bytes(), variant) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, variant, f"cifar{variant}-{split}")


def decode_stl10_images(buf: bytes) -> np.ndarray:
    """STL-10 images are 3×96×96 bytes each, column-major inside a channel."""
    if len(buf) == 0 or len(buf) % STL10_IMAGE:
        raise FormatError(f"{len(buf)} bytes is not a positive multiple of {STL10_IMAGE}")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3, 96, 96)
    return _to_unit(arr.transpose(0, 1, 3, 2))


def decode_stl10_labels(buf: bytes) -> np.ndarray:
    labels = np.frombuffer(buf, dtype=np.uint8).astype(np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > 10):
        raise FormatError("STL-10 labels must be 1..10 on disk")
    return labels - 1


def load_stl10(path, split: str = "train") -> Dataset:
    if split not in ("train", "test", "unlabeled"):
        raise ValueError(f"split must be train, test or unlabeled, got {split!r}")
    path = Path(path)
    if (path / "stl10_binary").is_dir():
        path = path / "stl10_binary"
    images = decode_stl10_images((path / f"{split}_X.bin").read_bytes())
    labels = None
    if split != "unlabeled":
        labels = decode_stl10_labels((path / f"{split}_y.bin").read_bytes())
        if len(labels) != len(images):
            raise FormatError(f"STL-10 {split}: {len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, 10, f"stl10-{split}")


# -- synthetic -------------------------------------------------------------


def _glyph_mask(kind: int, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    """Binary mask of glyph ``kind`` (mod 8). Every glyph has a canonical "up"."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy  # u right, v down
    au, av = np.abs(u), np.abs(v)
    w = 0.38 * r
    box = (au <= r) & (av <= r)
    kind %= 8
    if kind == 0:  # triangle, apex up
        return (v <= r) & (v >= -r + 2.0 * au)
    if kind == 1:  # T
        return box & ((v <= -r + 2 * w) | (au <= w / 2 + 0.1 * r))
    if kind == 2:  # L
        return box & ((u <= -r + 2 * w) | (v >= r - 2 * w))
    if kind == 3:  # cup / U
        return box & ((au >= r - 1.6 * w) | (v >= r - 2 * w))
    if kind == 4:  # half disc, flat side down
        return (u**2 + (v - 0.5 * r) ** 2 <= (1.2 * r) ** 2) & (v <= 0.5 * r) & (v >= -r)
    if kind == 5:  # arrow up
        head = (v <= 0) & (v >= -r + 1.6 * au)
        return head | ((au <= w / 2 + 0.05 * r) & (v >= 0) & (v <= r))
    if kind == 6:  # F
        return box & ((u <= -r + w) | (v <= -r + w) | ((av <= w / 2) & (u <= 0.4 * r)))
    # house: square body with a roof
    return ((au <= 0.75 * r) & (v >= 0) & (v <= r)) | ((v < 0) & (v >= -r + 1.3 * au))


def synthetic_dataset(
    n: int,
    classes: int = 4,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.05,
    tint: float = 0.25,
    grey: bool = False,
) -> Dataset:
    """Class-dependent glyphs on random backgrounds.

    Class ``k`` draws glyph ``k mod 8`` (triangle, T, L, cup, half disc,
    arrow, F, house), all upright up to a small random tilt, at random
    position and scale. Foregrounds are light and backgrounds dark with random
    hues; ``tint`` shifts both colours in a class-specific direction so the
    per-channel pixel mean carries class signal (``tint=0`` removes it).

    ``grey=True`` draws grey levels instead of hues, so the only per-image
    nuisance factors are position, scale, tilt and intensity.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if classes < 1:
        raise ValueError("classes must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        bg = rng.uniform(0.0, 0.35, size=1 if grey else 3) * np.ones(3)
        fg = rng.uniform(0.55, 0.9, size=1 if grey else 3) * np.ones(3)
        phase = 2 * np.pi * k / classes
        shift = tint * np.array([np.cos(phase), np.sin(phase), -np.cos(phase)])
        fg = np.clip(fg + shift, 0, 1)
        bg = np.clip(bg + shift, 0, 1)
        r = rng.uniform(0.25, 0.4) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        angle = rng.uniform(-0.2, 0.2)
        mask = _glyph_mask(int(k), size, cy, cx, r, angle)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes, f"synthetic-{classes}c-{size}px-s{seed}")


def resize_dataset(ds: Dataset, size: int) -> Dataset:
    from .pretext import resize_bilinear

    if ds.images.shape[-1] == size and ds.images.shape[-2] == size:
        return ds
    imgs = np.stack([resize_bilinear(im, size, size) for im in ds.images]).astype(np.float32)
    return Dataset(imgs, ds.labels, ds.class_count, ds.name)


# -- few-shot split -----------------------------------------------------------


def few_shot_split(ds: Dataset, percent: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified ``percent``% subset and its complement.

    Per class, ``max(1, floor(count · percent / 100))`` images are drawn
    without replacement.
    """
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in (0, 100], got {percent}")
    if ds.labels is None:
        raise ValueError("few_shot_split needs labels")
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size == 0:
            continue
        take = max(1, int(np.floor(idx.size * percent / 100 + 1e-9)))
        chosen.append(rng.permutation(idx)[:take])
    subset = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(ds)), subset)
    sub = ds.subset(subset, f"{ds.name}[{percent:g}%]")
    if rest.size == 0:
        return sub, None
    return sub, ds.subset(rest, f"{ds.name}[rest]")


# -- PPM ---------------------------------------------------------------------


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with clamping and round-half-up."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    if c == 1:
        image = np.repeat(image, 3, axis=0)
    elif c != 3:
        raise ValueError(f"PPM needs 1 or 3 channels, got {c}")
    body = to_bytes(image).transpose(1, 2, 0).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


def write_image_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back as ``3×H×W`` uint8."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise FormatError("only P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    arr = np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8)
    if arr.size != 3 * w * h:
        raise FormatError("truncated PPM")
    return arr.reshape(h, w, 3).transpose(2, 0, 1)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.meta["model_config"]

    @property
    def counters(self) -> dict:
        return self.meta.get("counters", {})

    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(("adam.", "uncertainty."))}

    @property
    def checkpoint_id(self) -> str:
        return self.meta.get("id", "")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
        bname = name.encode("utf-8")
        out.write(struct.pack("<I", len(bname)))
        out.write(bname)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = out.getvalue()
    header = CKPT_MAGIC + struct.pack("<IQI", CKPT_VERSION, len(payload), zlib.crc32(payload))
    return header + payload


def decode_checkpoint(data: bytes) -> Checkpoint:
    hsize = len(CKPT_MAGIC) + 16
    if len(data) < hsize or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, length, crc = struct.unpack("<IQI", data[len(CKPT_MAGIC) : hsize])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    payload = data[hsize:]
    if len(payload) != length:
        raise CheckpointError(f"payload length {len(payload)} != recorded {length}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        chunk = payload[pos : pos + n]
        if len(chunk) != n:
            raise CheckpointError("truncated payload")
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    return Checkpoint(meta, tensors)


def save_checkpoint(path, model, optim=None, rng_state=None, counters=None, uncertainty=None, extra=None) -> Checkpoint:
    """Persist model (+ optional optimizer, uncertainty weights, rng state).

    Written atomically via a temp file and rename.
    """
    tensors = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
    meta = {
        "model_config": model.config.to_dict(),
        "head_classes": int(model["rot_head.bias"].shape[0]),
        "counters": counters or {},
        "rng_state": rng_state,
    }
    if uncertainty is not None:
        tensors.update({k: v.astype(np.float32) for k, v in uncertainty.state_dict().items()})
    if optim is not None:
        meta["optimizer"] = optim.hyperparams()
        for k in optim.m:
            tensors[f"adam.m.{k}"] = optim.m[k].astype(np.float32)
            tensors[f"adam.v.{k}"] = optim.v[k].astype(np.float32)
    if extra:
        meta.update(extra)
    ckpt = Checkpoint(meta, tensors)
    body = encode_checkpoint(ckpt)
    meta["id"] = f"{zlib.crc32(body):08x}"
    body = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def restore_model(ckpt: Checkpoint, config=None):
    """Build a model from the checkpoint config and load its weights.

    When ``config`` is given the weights are loaded into that architecture;
    a shape disagreement raises :class:`ShapeError` naming the parameter.
    """
    from .model import ModelConfig, build_model, replace_task_heads

    cfg = config or ModelConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    heads = ckpt.meta.get("head_classes", cfg.rotation_classes)
    if heads != cfg.rotation_classes:
        model = replace_task_heads(model, heads, seed=0)
    state = ckpt.model_state()
    missing = [k for k in model.params if k not in state]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    model.load_state_dict(state)
    return model


def restore_optimizer(ckpt: Checkpoint):
    from .optim import AdamState

    if "optimizer" not in ckpt.meta:
        return None
    state = AdamState.from_hyperparams(ckpt.meta["optimizer"])
    for k, v in ckpt.tensors.items():
        if k.startswith("adam.m."):
            state.m[k[len("adam.m.") :]] = v.copy()
        elif k.startswith("adam.v."):
            state.v[k[len("adam.v.") :]] = v.copy()
    return state


# -- metrics ----------------------------------------------------------------


class MetricsWriter:
    """Append-only CSV with the fixed :data:`METRICS_HEADER`."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        self.last_step = -1
        if resume and self.path.exists():
            rows = read_metrics(self.path)
            self.last_step = int(rows[-1]["step"]) if rows else -1
        else:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def append(self, row: dict) -> None:
        if row["step"] <= self.last_step:
            raise ValueError(f"metrics step {row['step']} is not after {self.last_step}")
        self.last_step = row["step"]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row[k]) for k in METRICS_HEADER])


def truncate_metrics(path, last_step: int) -> None:
    """Drop rows after ``last_step`` (used when resuming from an earlier checkpoint)."""
    rows = [r for r in read_metrics(path) if int(r["step"]) <= last_step]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        w.writeheader()
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)
