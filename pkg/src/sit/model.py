"""Class-token-free vision transformer with rotation and contrastive tokens.

Token layout is ``[rot_token, contr_token, patch_0, ..., patch_{T-1}]``.
Positional embeddings are added to patch tokens only. Blocks are pre-norm
(LN -> MHA -> residual, LN -> MLP -> residual) followed by a final LN.
Three linear heads read the final sequence: per-patch pixels from the patch
tokens, 4 rotation logits from the rotation token, and a contrastive
embedding from the contrastive token.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor

ROTATION_CLASSES = 4


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    contrastive_dim: int = 32
    rotation_classes: int = ROTATION_CLASSES
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.rotation_classes != ROTATION_CLASSES:
            raise ValueError("rotation_classes must be 4")
        if self.contrastive_dim < 1:
            raise ValueError("contrastive_dim must be >= 1")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.depth, self.num_heads) < 1:
            raise ValueError("config extents must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


PRESETS: dict[str, ModelConfig] = {
    "tiny-cifar": ModelConfig(image_size=32, patch_size=4, embed_dim=64, depth=4, num_heads=4, contrastive_dim=32),
    "tiny-stl": ModelConfig(image_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4, contrastive_dim=32),
    "vitb-paper": ModelConfig(
        image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12, contrastive_dim=512
    ),
}


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in W for ``cfg``.

    patch embed P²C·D + D, positional T·D, two task tokens 2D, per block
    two LNs 4D + q/k/v/o 4D² + 3D + MLP 2·D·M + M + D, final LN 2D, heads
    (D + 1)·P²C + (D + 1)·4 + (D + 1)·contrastive_dim.
    """
    D, M, T, Pd = cfg.embed_dim, cfg.mlp_dim, cfg.num_patches, cfg.patch_dim
    block = 4 * D + 4 * D * D + 3 * D + 2 * D * M + M + D
    heads = (D + 1) * Pd + (D + 1) * cfg.rotation_classes + (D + 1) * cfg.contrastive_dim
    return Pd * D + D + T * D + 2 * D + cfg.depth * block + 2 * D + heads


# -- patch grid ----------------------------------------------------------


def patchify(images, patch_size: int):
    """``N×C×H×W -> N×(H/P·W/P)×(C·P·P)``.

    Patches are enumerated row-major over the grid; inside a patch the vector
    is ordered by (channel, row, col). Works on arrays and Tensors.
    """
    n, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(n, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * p * p)


def unpatchify(patches, height: int, width: int, patch_size: int, channels: int = 3):
    """Exact inverse of :func:`patchify`."""
    n, t, d = patches.shape
    p = patch_size
    if height % p or width % p or t * p * p != height * width or d != channels * p * p:
        raise ShapeError(f"cannot unpatchify {patches.shape} into {channels}x{height}x{width} with P={p}")
    gh, gw = height // p, width // p
    x = patches.reshape(n, gh, gw, channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, channels, height, width)


# -- layers --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ag.matmul(x, weight) + bias


def multi_head_attention(x: Tensor, p: dict[str, Tensor], num_heads: int) -> Tensor:
    """Global softmax(QKᵀ/√d)V attention over all tokens, per head.

    ``p`` holds ``wq, bq, wk, wv, bv, wo, bo`` with weights stored as D×D
    (input dim first). Keys carry no bias: a key bias adds the same amount
    to every score of a query row, which softmax cancels, so it could never
    affect the output or receive a gradient.
    """
    n, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(z: Tensor) -> Tensor:
        return z.reshape(n, t, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, p["wq"], p["bq"]))
    k = heads(ag.matmul(x, p["wk"]))
    v = heads(linear(x, p["wv"], p["bv"]))
    scores = ag.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = ag.softmax(scores, axis=-1)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return linear(out, p["wo"], p["bo"])


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # resample anything beyond two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class SiTModel:
    """Parameter container plus forward pass.

    Parameters live in an ordered dict keyed by their dotted names; that order
    is the checkpoint order.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    # -- parameter access ------------------------------------------------
    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "SiTModel":
        """Copy with every parameter cast (used for float64 gradient checks)."""
        params = {k: Parameter(v.data.astype(dtype), k) for k, v in self.params.items()}
        return SiTModel(self.config, params)

    def copy(self) -> "SiTModel":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None
        if strict:
            extra = sorted(set(state) - set(self.params))
            if extra:
                raise KeyError(f"unexpected parameters in state: {extra}")

    def block_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- forward -----------------------------------------------------------
    def encode(self, images) -> Tensor:
        """Final (post-LN) token sequence, shape ``N×(2+T)×D``."""
        cfg = self.config
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected N×{cfg.channels}×{cfg.image_size}×{cfg.image_size} input, got {images.shape}"
            )
        n = images.shape[0]
        patches = Tensor(patchify(images, cfg.patch_size).astype(self.dtype, copy=False))
        p = self.params
        x = linear(patches, p["patch_embed.weight"], p["patch_embed.bias"]) + p["pos_embed"]
        d = cfg.embed_dim
        ones = Tensor(np.ones((n, 1, 1), dtype=self.dtype))
        rot = ones * p["rot_token"].reshape(1, 1, d)
        con = ones * p["contr_token"].reshape(1, 1, d)
        x = ag.concat([rot, con, x], axis=1)
        for i in range(cfg.depth):
            x = self._block(x, i)
        return ag.layer_norm(x, p["norm.gamma"], p["norm.beta"])

    def _block(self, x: Tensor, i: int) -> Tensor:
        b = self.block_params(i)
        h = ag.layer_norm(x, b["norm1.gamma"], b["norm1.beta"])
        attn = {k.split(".", 1)[1]: v for k, v in b.items() if k.startswith("attn.")}
        x = x + multi_head_attention(h, attn, self.config.num_heads)
        h = ag.layer_norm(x, b["norm2.gamma"], b["norm2.beta"])
        h = ag.gelu(linear(h, b["mlp.fc1.weight"], b["mlp.fc1.bias"]))
        return x + linear(h, b["mlp.fc2.weight"], b["mlp.fc2.bias"])

    def forward(self, images) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(recon N×C×H×W, rot_logits N×4, contr_embed N×contrastive_dim)``."""
        cfg = self.config
        p = self.params
        h = self.encode(images)
        recon = linear(h[:, 2:, :], p["recon_head.weight"], p["recon_head.bias"])
        recon = unpatchify(recon, cfg.image_size, cfg.image_size, cfg.patch_size, cfg.channels)
        rot = linear(h[:, 0, :], p["rot_head.weight"], p["rot_head.bias"])
        con = linear(h[:, 1, :], p["contr_head.weight"], p["contr_head.bias"])
        return recon, rot, con

    __call__ = forward

    def features(self, images, batch_size: int = 256) -> np.ndarray:
        """Frozen probe features: concatenated final rotation and contrastive tokens (2D)."""
        out = []
        with ag.no_grad():
            for s in range(0, len(images), batch_size):
                h = self.encode(images[s : s + batch_size]).data
                out.append(np.concatenate([h[:, 0, :], h[:, 1, :]], axis=1))
        return np.concatenate(out, axis=0)


def build_model(config: ModelConfig) -> SiTModel:
    """Deterministically initialise W from ``config.seed``.

    Linear weights are Xavier-uniform, biases zero, LayerNorm (1, 0); the
    positional embedding and both task tokens are truncated-normal (std 0.02).
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    D, M, Pd = cfg.embed_dim, cfg.mlp_dim, cfg.patch_dim
    dtype = np.float32
    raw: dict[str, np.ndarray] = {}

    def lin(name: str, fan_in: int, fan_out: int) -> None:
        raw[f"{name}.weight"] = _xavier_uniform(rng, fan_in, fan_out)
        raw[f"{name}.bias"] = np.zeros(fan_out)

    lin("patch_embed", Pd, D)
    raw["pos_embed"] = _trunc_normal(rng, (cfg.num_patches, D))
    raw["rot_token"] = _trunc_normal(rng, (D,))
    raw["contr_token"] = _trunc_normal(rng, (D,))
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        raw[pre + "norm1.gamma"] = np.ones(D)
        raw[pre + "norm1.beta"] = np.zeros(D)
        for proj in ("q", "k", "v", "o"):
            raw[pre + f"attn.w{proj}"] = _xavier_uniform(rng, D, D)
            if proj != "k":
                raw[pre + f"attn.b{proj}"] = np.zeros(D)
        raw[pre + "norm2.gamma"] = np.ones(D)
        raw[pre + "norm2.beta"] = np.zeros(D)
        lin(pre + "mlp.fc1", D, M)
        lin(pre + "mlp.fc2", M, D)
    raw["norm.gamma"] = np.ones(D)
    raw["norm.beta"] = np.zeros(D)
    lin("recon_head", D, Pd)
    lin("rot_head", D, cfg.rotation_classes)
    lin("contr_head", D, cfg.contrastive_dim)
    params = {k: Parameter(v.astype(dtype), k) for k, v in raw.items()}
    return SiTModel(cfg, params)


def replace_task_heads(model: SiTModel, n_classes: int, seed: int) -> SiTModel:
    """Swap the rotation and contrastive heads for fresh ``D -> n_classes`` layers.

    Every other parameter is carried over unchanged (as a copy).
    """
    rng = np.random.default_rng(seed)
    D = model.config.embed_dim
    params = {k: Parameter(v.data.copy(), k) for k, v in model.params.items()}
    for head in ("rot_head", "contr_head"):
        params[f"{head}.weight"] = Parameter(_xavier_uniform(rng, D, n_classes).astype(model.dtype), f"{head}.weight")
        params[f"{head}.bias"] = Parameter(np.zeros(n_classes, dtype=model.dtype), f"{head}.bias")
    return SiTModel(model.config, params)


def is_decayed(name: str) -> bool:
    """Weight decay applies to linear weight matrices only.

    Attention projections are ``attn.w{q,k,v,o}``; other linear weights end
    in ``.weight``. Biases, norms, tokens, positional embeddings and
    uncertainty log-variances are excluded.
    """
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "weight" or (".attn." in name and leaf in ("wq", "wk", "wv", "wo"))
