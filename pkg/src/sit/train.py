"""Pretraining, finetuning and the evaluation protocols."""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError
from .data import (
    Checkpoint,
    Dataset,
    MetricsWriter,
    few_shot_split,
    load_checkpoint,
    resize_dataset,
    restore_model,
    restore_optimizer,
    save_checkpoint,
    truncate_metrics,
    write_image_ppm,
)
from .losses import (
    UncertaintyWeights,
    cross_entropy,
    fixed_weighted_total,
    l1_reconstruction,
    nt_xent,
    rotation_ce,
    uncertainty_total,
)
from .model import ModelConfig, SiTModel, build_model, replace_task_heads
from .optim import AdamState, Schedule, adam_step
from .pretext import (
    IDENTITY_AUGMENT,
    AugmentParams,
    CorruptionParams,
    augment_view,
    corrupt,
    make_pretext_batch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tasks:
    reconstruction: bool = True
    rotation: bool = True
    contrastive: bool = True

    def __post_init__(self):
        if not (self.reconstruction or self.rotation or self.contrastive):
            raise ValueError("at least one pretext task must be enabled")

    @property
    def label(self) -> str:
        on = [n for n, f in (("recon", self.reconstruction), ("rot", self.rotation), ("contr", self.contrastive)) if f]
        return "+".join(on)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05
    floor_lr: float = 1e-6
    schedule: str = "cosine"
    max_grad_norm: float | None = None

    def make_state(self, total_steps: int) -> AdamState:
        sched = Schedule(
            kind=self.schedule,
            base_lr=self.lr,
            warmup_steps=int(round(self.warmup_frac * total_steps)),
            total_steps=total_steps,
            floor_lr=self.floor_lr,
        )
        return AdamState(
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            schedule=sched,
            max_grad_norm=self.max_grad_norm,
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything a pretraining run depends on."""

    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: Tasks = field(default_factory=Tasks)
    weighting: str = "uncertainty"  # or "fixed"
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    temperature: float = 0.5
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    dataset: str = "synthetic:n=512,classes=4,size=32,seed=0"
    epochs: int = 1
    batch_size: int = 32
    max_steps: int | None = None
    seed: int = 0
    out_dir: str = "runs/pretrain"
    checkpoint_every: int | None = None
    workers: int = 0

    def __post_init__(self):
        if self.weighting not in ("uncertainty", "fixed"):
            raise ValueError(f"weighting must be 'uncertainty' or 'fixed', got {self.weighting!r}")
        if self.tasks.contrastive and 2 * self.batch_size < 4:
            raise ValueError("contrastive learning needs at least 4 views (batch_size >= 2)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.corruption.patch_size != self.model.patch_size:
            object.__setattr__(self, "corruption", dataclasses.replace(self.corruption, patch_size=self.model.patch_size))


@dataclass
class EvalReport:
    protocol: str
    dataset: str
    accuracy: float
    sample_count: int
    checkpoint_id: str = ""
    label_fraction: float = 1.0
    source_dataset: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    CSV_HEADER = "protocol,dataset,source_dataset,accuracy,sample_count,checkpoint_id,label_fraction"

    def csv_row(self) -> str:
        return (
            f"{self.protocol},{self.dataset},{self.source_dataset},{self.accuracy:.6f},"
            f"{self.sample_count},{self.checkpoint_id},{self.label_fraction:g}"
        )

    def summary(self) -> str:
        src = f" (pretrained on {self.source_dataset})" if self.source_dataset else ""
        return (
            f"{self.protocol} on {self.dataset}{src}: top-1 {100 * self.accuracy:.2f}% "
            f"over {self.sample_count} images, labels {100 * self.label_fraction:g}%, ckpt {self.checkpoint_id or '-'}"
        )


@dataclass
class PretrainResult:
    model: SiTModel
    uncertainty: UncertaintyWeights
    optim: AdamState
    metrics: list[dict]
    checkpoint: Path | None
    step: int


# -- pretraining -----------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def _batches(ds: Dataset, cfg: RunConfig, start: int, total: int, spe: int):
    """Yield ``(step, epoch, PretextBatch)``; each step owns an RNG derived from (seed, step)."""
    order, order_epoch = None, -1
    for step in range(start, total):
        epoch = step // spe
        if epoch != order_epoch:
            order, order_epoch = epoch_order(cfg.seed, epoch, len(ds)), epoch
        k = step % spe
        idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        batch = make_pretext_batch(
            ds.images[idx],
            cfg.augment,
            cfg.corruption,
            step_rng(cfg.seed, step),
            out_size=cfg.model.image_size,
            rotate=cfg.tasks.rotation,
        )
        yield step, epoch, batch


def _prefetched(gen, depth: int):
    """Run ``gen`` on a worker thread feeding a bounded queue (order preserved)."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in gen:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as e:  # surfaced on the consumer side
            q.put(e)
        q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def compute_losses(model: SiTModel, batch, cfg: RunConfig, uncertainty: UncertaintyWeights):
    """Forward one pretext batch and combine the enabled losses per the weighting scheme."""
    recon, rot, con = model(batch.corrupted_views)
    t = cfg.tasks
    l_rec = l1_reconstruction(batch.clean_targets, recon) if t.reconstruction else None
    l_rot = rotation_ce(rot, batch.rotation_labels) if t.rotation else None
    l_con = nt_xent(con, batch.pair_index, cfg.temperature) if t.contrastive else None
    for name, l in (("reconstruction", l_rec), ("rotation", l_rot), ("contrastive", l_con)):
        if l is not None and not np.isfinite(l.item()):
            raise FloatingPointError(f"non-finite {name} loss ({l.item()})")
    if cfg.weighting == "uncertainty":
        return uncertainty_total(l_rec, l_rot, l_con, uncertainty)
    return fixed_weighted_total(l_rec, l_rot, l_con, cfg.alphas)


def load_dataset_ref(ref: str, split: str = "train") -> Dataset:
    """Resolve ``kind:args`` dataset references.

    ``synthetic:n=..,classes=..,size=..,seed=..`` (also ``noise``, ``tint``,
    ``grey=true|false``), ``cifar10:<dir>``,
    ``cifar100:<dir>``, ``stl10:<dir>`` (``split`` may be unlabeled for STL-10).
    A ``|limit=K`` suffix keeps the first K images.
    """
    from .data import load_cifar, load_stl10, synthetic_dataset

    limit = None
    if "|limit=" in ref:
        ref, lim = ref.split("|limit=")
        limit = int(lim)
    kind, _, arg = ref.partition(":")
    if kind == "synthetic":
        kw = dict(p.split("=") for p in arg.split(",") if p)
        conv = {"noise": float, "tint": float, "grey": lambda v: v.lower() in ("1", "true", "yes")}
        kw = {k: conv.get(k, int)(v) for k, v in kw.items()}
        if split == "test":
            kw["seed"] = kw.get("seed", 0) + 10_000
            kw["n"] = kw.get("n", 512) // 2
        ds = synthetic_dataset(**kw)
    elif kind in ("cifar10", "cifar100"):
        ds = load_cifar(arg, int(kind[5:]), "test" if split == "test" else "train")
    elif kind == "stl10":
        ds = load_stl10(arg, split)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    return ds


def pretrain(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    resume_from=None,
    stop_at_step: int | None = None,
    write_files: bool = True,
) -> PretrainResult:
    """Self-supervised pretraining.

    ``stop_at_step`` ends the run early (used to produce mid-run checkpoints).
    Resuming from a checkpoint continues the exact step sequence.
    """
    ds = dataset if dataset is not None else load_dataset_ref(cfg.dataset)
    if ds.images.shape[-1] != cfg.model.image_size and cfg.augment.crop_scale == (1.0, 1.0):
        ds = resize_dataset(ds, cfg.model.image_size)
    spe = max(1, len(ds) // cfg.batch_size)
    total = cfg.epochs * spe if cfg.max_steps is None else cfg.max_steps
    out = Path(cfg.out_dir)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        model = restore_model(ckpt, cfg.model)
        optim = restore_optimizer(ckpt)
        uncertainty = UncertaintyWeights()
        uncertainty.load_state_dict(ckpt.tensors)
        start = int(ckpt.counters["step"])
    else:
        model = build_model(cfg.model)
        optim = cfg.optim.make_state(total)
        uncertainty = UncertaintyWeights()
        start = 0

    params = model.parameters()
    if cfg.weighting == "uncertainty":
        params = params + uncertainty.parameters()
    writer = None
    if write_files:
        mpath = out / "metrics.csv"
        if resume_from is not None and mpath.exists():
            truncate_metrics(mpath, start)
        writer = MetricsWriter(mpath, resume=resume_from is not None)

    end = total if stop_at_step is None else min(total, stop_at_step)
    gen = _batches(ds, cfg, start, end, spe)
    if cfg.workers > 0:
        gen = _prefetched(gen, 2 * cfg.workers)

    metrics: list[dict] = []
    last_ckpt = None
    step = start
    for step, epoch, batch in gen:
        t0 = time.perf_counter()
        for p in params:
            p.zero_grad()
        br = compute_losses(model, batch, cfg, uncertainty)
        if not np.isfinite(br.total):
            raise FloatingPointError(f"non-finite total loss at step {step}")
        ag.backward(br.total_tensor)
        lr = adam_step(params, optim)
        row = {
            "step": step + 1,
            "epoch": epoch,
            "l_rec": br.recons,
            "l_rot": br.rotation,
            "l_con": br.contrastive,
            "w1": br.effective_weights[0],
            "w2": br.effective_weights[1],
            "w3": br.effective_weights[2],
            "total": br.total,
            "lr": lr,
            "ms": round(1000 * (time.perf_counter() - t0), 3),
        }
        metrics.append(row)
        if writer is not None:
            writer.append(row)
        done = step + 1
        epoch_end = done % spe == 0
        periodic = cfg.checkpoint_every is not None and done % cfg.checkpoint_every == 0
        if write_files and (epoch_end or periodic or done == end):
            last_ckpt = out / ("final.sitc" if done == total else "latest.sitc")
            save_checkpoint(
                last_ckpt,
                model,
                optim,
                rng_state=step_rng(cfg.seed, done).bit_generator.state,
                counters={"step": done, "epoch": done // spe},
                uncertainty=uncertainty,
                extra={"dataset": ds.name, "tasks": cfg.tasks.label, "seed": cfg.seed},
            )
            if periodic:
                save_checkpoint(
                    out / f"step_{done:06d}.sitc",
                    model,
                    optim,
                    rng_state=step_rng(cfg.seed, done).bit_generator.state,
                    counters={"step": done, "epoch": done // spe},
                    uncertainty=uncertainty,
                    extra={"dataset": ds.name, "tasks": cfg.tasks.label, "seed": cfg.seed},
                )
        step = done
    return PretrainResult(model, uncertainty, optim, metrics, last_ckpt, step)


# -- supervised pieces ---------------------------------------------------------


def _as_model(source) -> tuple[SiTModel, str]:
    if isinstance(source, SiTModel):
        return source, ""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    return restore_model(ckpt), ckpt.checkpoint_id


def train_linear_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    steps: int = 300,
    lr: float = 1e-2,
    weight_decay: float = 1e-4,
    seed: int = 0,
):
    """Full-batch Adam on a softmax-regression layer; returns ``(W, b, mean, std)``.

    Features are standardised with training-set statistics.
    """
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-6
    x = ag.Tensor(((features - mu) / sd).astype(np.float32))
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    w = ag.Parameter((rng.standard_normal((d, n_classes)) * 0.01).astype(np.float32), "probe.weight")
    b = ag.Parameter(np.zeros(n_classes, dtype=np.float32), "probe.bias")
    state = AdamState(weight_decay=weight_decay, schedule=Schedule(kind="constant", base_lr=lr))
    for _ in range(steps):
        w.zero_grad()
        b.zero_grad()
        loss = cross_entropy(ag.matmul(x, w) + b, labels)
        ag.backward(loss)
        adam_step([w, b], state)
    return w.data.copy(), b.data.copy(), mu, sd


def _probe_accuracy(probe, features: np.ndarray, labels: np.ndarray) -> float:
    w, b, mu, sd = probe
    logits = ((features - mu) / sd) @ w + b
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0


def linear_probe(
    source,
    train: Dataset,
    test: Dataset | None = None,
    cfg: ProbeConfig = ProbeConfig(),
    protocol: str = "linear",
    source_dataset: str = "",
) -> EvalReport:
    """Train a linear classifier on frozen features and report top-1 on ``test``.

    Features are the final rotation and contrastive token embeddings,
    concatenated. The backbone is never modified. Inputs are resized to the
    model's resolution when they differ.
    """
    model, ckpt_id = _as_model(source)
    size = model.config.image_size
    if train.images.shape[1] != model.config.channels:
        raise ContractError(f"dataset has {train.images.shape[1]} channels, model expects {model.config.channels}")
    if train.labels is None:
        raise ContractError("linear probe needs labels")
    train = resize_dataset(train, size)
    test = resize_dataset(test, size) if test is not None else train
    ftr = model.features(train.images)
    fte = ftr if test is train else model.features(test.images)
    probe = train_linear_classifier(ftr, train.labels, train.class_count, cfg.steps, cfg.lr, cfg.weight_decay, cfg.seed)
    acc = _probe_accuracy(probe, fte, test.labels)
    return EvalReport(protocol, test.name, acc, len(test), ckpt_id, 1.0, source_dataset)


def domain_transfer(source, target_train: Dataset, target_test: Dataset | None = None, cfg: ProbeConfig = ProbeConfig(), source_dataset: str = "") -> EvalReport:
    """Linear evaluation of a backbone pretrained on one dataset on another."""
    if not source_dataset and not isinstance(source, SiTModel):
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        source_dataset = ckpt.meta.get("dataset", "")
        source = ckpt
    return linear_probe(source, target_train, target_test, cfg, protocol="transfer", source_dataset=source_dataset)


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 32
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=5e-4, warmup_frac=0.05))
    augment: AugmentParams = field(
        default_factory=lambda: AugmentParams(crop_scale=(0.7, 1.0), hflip_prob=0.5, brightness=0.0, contrast=0.0, saturation=0.0)
    )
    mixup: float = 0.0  # Beta(a, a) mixing; 0 disables
    auto_augment: bool = False
    seed: int = 0


def auto_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Two ops drawn from a small fixed policy (contrast, brightness, solarize, posterize, sharpen)."""
    from .pretext import adjust_brightness, adjust_contrast, gaussian_blur

    out = img
    for op in rng.choice(5, size=2, replace=False):
        mag = rng.uniform(0.1, 0.5)
        if op == 0:
            out = adjust_contrast(out, 1 + rng.choice([-1, 1]) * mag)
        elif op == 1:
            out = adjust_brightness(out, 1 + rng.choice([-1, 1]) * mag)
        elif op == 2:
            thr = 1.0 - mag
            out = np.where(out >= thr, 1.0 - out, out)
        elif op == 3:
            levels = 2 ** int(8 - round(mag * 8))
            out = np.floor(out * (levels - 1) + 0.5) / (levels - 1)
        else:
            out = out + mag * (out - gaussian_blur(out, 1.0, 3))
    return np.clip(out, 0, 1).astype(img.dtype)


def predict(model: SiTModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Average of the two heads' softmax outputs."""
    probs = []
    with ag.no_grad():
        for s in range(0, len(images), batch_size):
            _, a, b = model(images[s : s + batch_size])
            pa = ag.softmax(a, axis=-1).data
            pb = ag.softmax(b, axis=-1).data
            probs.append(0.5 * (pa + pb))
    return np.concatenate(probs)


def finetune(
    source,
    train: Dataset,
    n_classes: int,
    cfg: FinetuneConfig = FinetuneConfig(),
    test: Dataset | None = None,
    protocol: str = "finetune",
    label_fraction: float = 1.0,
    out_path=None,
) -> tuple[SiTModel, EvalReport]:
    """Replace both task heads with ``D -> n_classes`` layers and train everything.

    The loss is the mean of the two heads' cross-entropies. Accuracy is
    measured on ``test`` (or on ``train`` when absent) using averaged softmax.
    """
    if train.labels is None:
        raise ContractError("finetuning needs labels")
    if n_classes != train.class_count:
        raise ContractError(f"n_classes {n_classes} != dataset class count {train.class_count}")
    base, ckpt_id = _as_model(source)
    size = base.config.image_size
    train = resize_dataset(train, size)
    model = replace_task_heads(base, n_classes, seed=cfg.seed + 7919)
    params = model.parameters()
    optim = cfg.optim.make_state(cfg.steps)
    n = len(train)
    bs = min(cfg.batch_size, n)
    spe = max(1, n // bs)
    order = None
    for step in range(cfg.steps):
        epoch, k = divmod(step, spe)
        if k == 0:
            order = epoch_order(cfg.seed, epoch, n)
        idx = order[k * bs : (k + 1) * bs]
        rng = np.random.default_rng([cfg.seed, 2, step])
        imgs = np.stack([augment_view(train.images[i], cfg.augment, rng, size) for i in idx])
        if cfg.auto_augment:
            imgs = np.stack([auto_augment(im, rng) for im in imgs])
        targets = np.zeros((len(idx), n_classes), dtype=np.float32)
        targets[np.arange(len(idx)), train.labels[idx]] = 1.0
        if cfg.mixup > 0:
            lam = float(rng.beta(cfg.mixup, cfg.mixup))
            perm = rng.permutation(len(idx))
            imgs = (lam * imgs + (1 - lam) * imgs[perm]).astype(np.float32)
            targets = lam * targets + (1 - lam) * targets[perm]
        for p in params:
            p.zero_grad()
        _, a, b = model(imgs)
        loss = (cross_entropy(a, soft_targets=targets) + cross_entropy(b, soft_targets=targets)) * 0.5
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite finetune loss at step {step}")
        ag.backward(loss)
        adam_step(params, optim)
    evalset = resize_dataset(test, size) if test is not None else train
    acc = float(np.mean(np.argmax(predict(model, evalset.images), axis=1) == evalset.labels))
    if out_path is not None:
        save_checkpoint(out_path, model, counters={"step": cfg.steps}, extra={"dataset": train.name, "protocol": protocol})
    return model, EvalReport(protocol, evalset.name, acc, len(evalset), ckpt_id, label_fraction)


def few_shot_protocol(
    source,
    train: Dataset,
    test: Dataset,
    percent: float,
    cfg: FinetuneConfig = FinetuneConfig(),
    probe: ProbeConfig = ProbeConfig(),
    split_seed: int = 0,
) -> tuple[EvalReport | None, EvalReport]:
    """Finetune on a stratified ``percent``% of labels, then probe on all labels.

    ``percent == 0`` means no finetuning: the first report is ``None`` and the
    second is a plain linear probe of the pretrained backbone.
    """
    if percent == 0:
        return None, linear_probe(source, train, test, probe)
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in [0, 100], got {percent}")
    model, ckpt_id = _as_model(source)
    subset, _ = few_shot_split(train, percent, split_seed) if percent < 100 else (train, None)
    tuned, r1 = finetune(model, subset, train.class_count, cfg, test, protocol="fewshot", label_fraction=percent / 100)
    r2 = linear_probe(tuned, train, test, probe, protocol="fewshot+linear")
    r1.checkpoint_id = r2.checkpoint_id = ckpt_id
    r2.label_fraction = percent / 100
    return r1, r2


def reconstruct_preview(
    source,
    images: np.ndarray,
    out_dir,
    corruption: CorruptionParams | None = None,
    seed: int = 0,
) -> list[Path]:
    """Write ``NNN_original/corrupted/reconstructed.ppm`` for each input image.

    Replacement patches come from the next image in ``images`` (cyclically).
    Reconstructions are clamped to [0, 1] for export only.
    """
    model, _ = _as_model(source)
    cfg = model.config
    corruption = corruption or CorruptionParams(patch_size=cfg.patch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.float32)
    if images.shape[-1] != cfg.image_size:
        from .pretext import resize_bilinear

        images = np.stack([resize_bilinear(im, cfg.image_size, cfg.image_size) for im in images])
    corrupted = np.empty_like(images)
    for i in range(len(images)):
        rng = np.random.default_rng([seed, 3, i])
        corrupted[i], _ = corrupt(images[i], corruption, rng, images[(i + 1) % len(images)])
    with ag.no_grad():
        recon = model(corrupted)[0].data
    written = []
    for i in range(len(images)):
        for tag, img in (("original", images[i]), ("corrupted", corrupted[i]), ("reconstructed", np.clip(recon[i], 0, 1))):
            path = out / f"{i:03d}_{tag}.ppm"
            write_image_ppm(path, img)
            written.append(path)
    return written


def corrupt_preview(images: np.ndarray, out_dir, corruption: CorruptionParams, augment: AugmentParams = IDENTITY_AUGMENT, seed: int = 0) -> list[Path]:
    """Write original/corrupted pairs without a model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(images):
        rng = np.random.default_rng([seed, 4, i])
        view = augment_view(img, augment, rng)
        bad, _ = corrupt(view, corruption, rng, images[(i + 1) % len(images)])
        for tag, im in (("original", view), ("corrupted", bad)):
            path = out / f"{i:03d}_{tag}.ppm"
            write_image_ppm(path, im)
            written.append(path)
    return written
