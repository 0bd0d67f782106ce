"""Toy image/text transformers standing in for a frozen pre-aligned pair, plus the
trainable CNN branch.

The two transformers can be contrastively pre-aligned on the synthetic set
(:func:`pretrain_align`) and are frozen afterwards.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, checkpoint, Tensor, backward, nn, no_grad, ops
from .autodiff.nn import Linear, LayerNorm, Module, MultiheadAttention, Parameter
from .text import EOS, PAD

log = logging.getLogger(__name__)

TEMPERATURE = 0.07


class VocabularyError(ValueError):
    pass


class ContrastiveDegenerateError(ValueError):
    pass


@dataclass
class VitConfig:
    image_size: int = 256
    patch_size: int = 32
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2


@dataclass
class TextConfig:
    vocab_size: int = 64
    context_length: int = 32
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4


@dataclass
class CnnConfig:
    stem: int = 32
    c8: int = 32
    c16: int = 64
    c32: int = 128


@dataclass
class CnnPyramid:
    f8: Tensor
    f16: Tensor
    f32s: Tensor

    def levels(self) -> list[Tensor]:
        return [self.f8, self.f16, self.f32s]


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadAttention(dim, dim, dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def __call__(self, x: Tensor, key_valid: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = ops.add(x, self.attn(h, h, key_valid))
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.ln2(x)))))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, _, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch * patch))


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_size ** 2, d, rng)
        self.pos = Parameter(rng.normal(0, 0.5, (cfg.num_tokens, d)))
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(d)

    def __call__(self, images) -> Tensor:
        """``[b, 1, H, W]`` -> patch tokens ``[b, N_v, D_v]`` (no class token)."""
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (self.cfg.image_size,) * 2:
            raise ShapeError(f"ViT expects [b,1,{self.cfg.image_size},{self.cfg.image_size}], got {arr.shape}")
        patches = Tensor(patchify(arr.astype(self.pos.dtype, copy=False), self.cfg.patch_size))
        x = ops.add(self.patch_embed(patches), self.pos)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x)


class TextTransformer(Module):
    def __init__(self, cfg: TextConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = Parameter(rng.normal(0, 1.0, (cfg.vocab_size, d)))
        self.pos = Parameter(rng.normal(0, 0.5, (cfg.context_length, d)))
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(d)

    def __call__(self, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """``[b, L]`` ids -> (``[b, L, D_t]`` features, ``[b, L]`` non-PAD mask)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.cfg.context_length:
            raise ShapeError(f"expected {self.cfg.context_length} tokens, got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise VocabularyError(f"token id outside [0, {self.cfg.vocab_size})")
        valid = ids != PAD
        x = ops.add(ops.embedding(self.tok, ids), self.pos)
        for blk in self.blocks:
            x = blk(x, valid)
        return self.ln_out(x), valid


class FrozenEncoders(Module):
    def __init__(self, vit_cfg: VitConfig, txt_cfg: TextConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vit = VisionTransformer(vit_cfg, rng)
        self.txt = TextTransformer(txt_cfg, rng)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """``[b, c, h, w]`` -> ``[b, c*r*r, h/r, w/r]`` (space-to-depth)."""
    b, c, h, w = x.shape
    x = ops.reshape(x, (b, c, h // r, r, w // r, r))
    return ops.reshape(ops.transpose(x, (0, 1, 3, 5, 2, 4)), (b, c * r * r, h // r, w // r))


class CnnEncoder(Module):
    """4x space-to-depth stem, then conv/ReLU/pool stages down to 1/32."""

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = nn.Conv2d(16, cfg.stem, 3, rng)
        self.conv8 = nn.Conv2d(cfg.stem, cfg.c8, 3, rng)
        self.conv16 = nn.Conv2d(cfg.c8, cfg.c16, 3, rng)
        self.conv32 = nn.Conv2d(cfg.c16, cfg.c32, 3, rng)

    def __call__(self, images) -> CnnPyramid:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"CNN input sides must be divisible by 32, got {h}x{w}")
        x = ops.avg_pool2d(ops.relu(self.stem(pixel_unshuffle(x, 4))))
        f8 = ops.relu(self.conv8(x))
        f16 = ops.relu(self.conv16(ops.avg_pool2d(f8)))
        f32 = ops.relu(self.conv32(ops.avg_pool2d(f16)))
        return CnnPyramid(f8, f16, f32)


def encode_image_vit(encoders: FrozenEncoders, image: np.ndarray) -> Tensor:
    """Single ``[1, H, W]`` image -> ``[N_v, D_v]``."""
    out = encoders.vit(np.asarray(image)[None])
    return ops.reshape(out, out.shape[1:])


def encode_text(encoders: FrozenEncoders, ids: np.ndarray) -> Tensor:
    """Single ``[L]`` id sequence -> ``[L, D_t]``."""
    out, _ = encoders.txt(np.asarray(ids)[None])
    return ops.reshape(out, out.shape[1:])


def encode_cnn(cnn: CnnEncoder, image: np.ndarray) -> CnnPyramid:
    pyr = cnn(np.asarray(image, dtype=np.float32)[None])
    return CnnPyramid(*(ops.reshape(t, t.shape[1:]) for t in pyr.levels()))


# ---------------------------------------------------------------------------
# contrastive pre-alignment


def pooled_embeddings(enc: FrozenEncoders, images: np.ndarray, ids: np.ndarray) -> tuple[Tensor, Tensor]:
    """Unit-norm pooled image (patch mean) and text (EOS token) embeddings."""
    img = ops.normalize(ops.mean(enc.vit(images), axis=1))
    feats, _ = enc.txt(ids)
    eos = np.argmax(ids == EOS, axis=1)
    txt = ops.normalize(ops.index(feats, (np.arange(len(ids)), eos)))
    return img, txt


def contrastive_loss(img: Tensor, txt: Tensor, temperature: float = TEMPERATURE) -> Tensor:
    n = img.shape[0]
    if n < 2:
        raise ContrastiveDegenerateError("contrastive loss needs a batch of at least 2 pairs")
    logits = ops.scale(ops.matmul(img, ops.transpose(txt, (1, 0))), 1.0 / temperature)
    target = np.arange(n)
    return ops.scale(ops.add(ops.cross_entropy(logits, target),
                             ops.cross_entropy(ops.transpose(logits, (1, 0)), target)), 0.5)


def pretrain_align(images: np.ndarray, ids: np.ndarray, steps: int, seed: int,
                   vit_cfg: VitConfig | None = None, txt_cfg: TextConfig | None = None,
                   batch: int = 32, lr: float = 1e-3) -> FrozenEncoders:
    """Contrastively align the two transformers on (image, primary ids) pairs, then freeze.

    ``images`` is ``[n, 1, H, W]`` and ``ids`` is ``[n, L]``. With ``steps=0``
    this returns the random initialization, frozen.
    """
    if batch < 2:
        raise ContrastiveDegenerateError("batch size must be at least 2")
    enc = FrozenEncoders(vit_cfg or VitConfig(), txt_cfg or TextConfig(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = nn.Adam(enc.parameters(), lr=lr)
    n = len(images)
    for step in range(steps):
        sel = np.sort(rng.choice(n, size=min(batch, n), replace=False))
        opt.zero_grad()
        loss = contrastive_loss(*pooled_embeddings(enc, images[sel], ids[sel]))
        backward(loss)
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    return enc.freeze()


def matched_vs_mismatched(enc: FrozenEncoders, images: np.ndarray, ids: np.ndarray) -> tuple[float, float]:
    """Mean cosine of matched pairs and of all mismatched pairs."""
    with no_grad():
        img, txt = pooled_embeddings(enc, images, ids)
    sim = img.data @ txt.data.T
    n = len(sim)
    off = ~np.eye(n, dtype=bool)
    return float(np.mean(np.diag(sim))), float(np.mean(sim[off]))


def config_dict(vit_cfg: VitConfig, txt_cfg: TextConfig) -> dict:
    return {"vit": asdict(vit_cfg), "text": asdict(txt_cfg)}


def vit_config(d: dict) -> VitConfig:
    return VitConfig(**d)


def text_config(d: dict) -> TextConfig:
    return TextConfig(**d)


def stack_records(records: Sequence) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([r.image for r in records]).astype(np.float32)
    ids = np.stack([r.prompts.primary_ids for r in records])
    return images, ids


def save_encoders(enc: FrozenEncoders, path: str | Path) -> None:
    """Weights as a tensor checkpoint plus a ``.json`` sidecar with both configs."""
    path = Path(path)
    checkpoint.save(path, enc.state_dict())
    path.with_suffix(".json").write_text(
        json.dumps(config_dict(enc.vit.cfg, enc.txt.cfg), indent=2, sort_keys=True))


def load_encoders(path: str | Path) -> FrozenEncoders:
    path = Path(path)
    cfgs = json.loads(path.with_suffix(".json").read_text())
    enc = FrozenEncoders(vit_config(cfgs["vit"]), text_config(cfgs["text"]))
    enc.load_state_dict(checkpoint.load(path))
    return enc.freeze()
