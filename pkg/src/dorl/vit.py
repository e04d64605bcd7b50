"""Patch-token vision transformer pieces shared by the segmenter and the autoencoder."""
from dataclasses import dataclass, replace

import numpy as np

from .core import autograd as ag
from .core.autograd import Tensor
from .core.params import ParamStore
from .core.rng import stream
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def with_depth(self, depth):
        return replace(self, depth=depth)


# "tiny" and "bench" exist for tests and the ablation benchmark; "desk" and
# "full" are the user-facing profiles.
PROFILES = {
    "tiny": ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=2, heads=2),
    "bench": ViTConfig(image_size=56, patch_size=7, embed_dim=32, depth=4, heads=2),
    "desk": ViTConfig(),
    "full": ViTConfig(embed_dim=768, depth=12, heads=12),
}


@dataclass
class TokenGrid:
    tokens: Tensor          # [T, D] or [B, T, D]
    grid: tuple
    positional: bool = True

    @property
    def num_tokens(self):
        return self.tokens.shape[-2]

    @property
    def dim(self):
        return self.tokens.shape[-1]

    def sample(self, i):
        return TokenGrid(Tensor(self.tokens.data[i]), self.grid, self.positional)


def patchify(images, patch_size):
    """[H, W, C] or [B, H, W, C] pixels -> [(B,) T, patch_size**2 * C] patches.

    Patches are taken row-major over the grid; each patch is flattened in
    (row, col, channel) order.
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"patchify expects [B,H,W,C] images, got shape {x.shape}")
    b, h, w, c = x.shape
    if h != w or h % patch_size:
        raise ShapeError(f"image {h}x{w} cannot be tiled by {patch_size}-pixel patches")
    g = h // patch_size
    x = x.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    out = x.reshape(b, g * g, patch_size * patch_size * c)
    return out[0] if single else out


def unpatchify(tokens, patch_size, channels):
    """Inverse of :func:`patchify` for a [B, T, p*p*C] tensor (differentiable)."""
    b, t, _ = tokens.shape
    g = int(round(np.sqrt(t)))
    if g * g != t:
        raise ShapeError(f"{t} tokens do not form a square grid")
    x = tokens.reshape(b, g, g, patch_size, patch_size, channels)
    x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b, g * patch_size, g * patch_size, channels)


# ---------------------------------------------------------------- parameters

def _xavier(rng, fan_out, fan_in, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def add_linear(store, name, fan_in, fan_out, rng, dtype, frozen=False, bias=True):
    store.add(f"{name}.weight", Tensor(_xavier(rng, fan_out, fan_in, dtype)), frozen=frozen)
    if bias:
        store.add(f"{name}.bias", Tensor(np.zeros(fan_out, dtype=dtype)), frozen=frozen)


def add_layer_norm(store, name, dim, dtype, frozen=False):
    store.add(f"{name}.weight", Tensor(np.ones(dim, dtype=dtype)), frozen=frozen)
    store.add(f"{name}.bias", Tensor(np.zeros(dim, dtype=dtype)), frozen=frozen)


def init_block(store, prefix, dim, hidden, rng, dtype=np.float32, frozen=False, residual_scale=1.0):
    """Block weights; ``residual_scale`` shrinks the two branch output projections."""
    add_layer_norm(store, f"{prefix}.ln1", dim, dtype, frozen)
    add_linear(store, f"{prefix}.qkv", dim, 3 * dim, rng, dtype, frozen)
    add_linear(store, f"{prefix}.proj", dim, dim, rng, dtype, frozen)
    add_layer_norm(store, f"{prefix}.ln2", dim, dtype, frozen)
    add_linear(store, f"{prefix}.mlp1", dim, hidden, rng, dtype, frozen)
    add_linear(store, f"{prefix}.mlp2", hidden, dim, rng, dtype, frozen)
    if residual_scale != 1.0:
        for name in ("proj", "mlp2"):
            w = store[f"{prefix}.{name}.weight"]
            w.data = (w.data * residual_scale).astype(dtype)


RESIDUAL_INIT = True


def init_vit(cfg, seed, prefix="vit", dtype=np.float32, frozen=False):
    """Patch embedding, learned positional table, ``cfg.depth`` blocks and a final norm.

    Branch output projections are scaled by 1/sqrt(2*depth) so the residual
    stream of a deep random network stays dominated by the patch embedding.
    """
    store = ParamStore()
    rng = stream(seed, f"{prefix}.init")
    d = cfg.embed_dim
    add_linear(store, f"{prefix}.patch_embed", cfg.patch_dim, d, rng, dtype, frozen)
    store.add(f"{prefix}.pos_embed",
              Tensor((0.02 * rng.standard_normal((cfg.num_tokens, d))).astype(dtype)),
              frozen=frozen)
    scale = 1.0 / np.sqrt(2.0 * cfg.depth) if RESIDUAL_INIT else 1.0
    for i in range(cfg.depth):
        init_block(store, f"{prefix}.block{i}", d, cfg.hidden_dim, rng, dtype, frozen, scale)
    add_layer_norm(store, f"{prefix}.norm", d, dtype, frozen)
    return store


# ---------------------------------------------------------------- forward

def _lin(x, params, name):
    return ag.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _ln(x, params, name):
    return ag.layer_norm(x, params[f"{name}.weight"], params[f"{name}.bias"])


def split_heads(x, heads):
    b, t, d = x.shape
    return ag.transpose(x.reshape(b, t, heads, d // heads), (0, 2, 1, 3))


def merge_heads(x):
    b, h, t, dh = x.shape
    return ag.transpose(x, (0, 2, 1, 3)).reshape(b, t, h * dh)


def attend(q, k, v):
    """Scaled dot-product attention over [B, H, T, dh] tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = ag.matmul(q, ag.transpose(k)) * scale
    return ag.matmul(ag.softmax(scores, axis=-1), v)


def self_attention(x, params, prefix, heads, lora=None):
    d = x.shape[-1]
    qkv = _lin(x, params, f"{prefix}.qkv")
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    if lora is not None:
        q = q + lora("q", x)
        v = v + lora("v", x)
    out = attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    return _lin(merge_heads(out), params, f"{prefix}.proj")


def block_forward(x, params, prefix, heads, lora=None):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)) with GELU.

    ``x`` is [B, T, D] (a [T, D] input is treated as a batch of one).
    ``lora`` optionally maps ("q" | "v", normed input) to an additive update.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    d = params[f"{prefix}.ln1.weight"].shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"{prefix}: token dim {x.shape[-1]} != block dim {d}")
    x = x + self_attention(_ln(x, params, f"{prefix}.ln1"), params, prefix, heads, lora)
    h = ag.gelu(_lin(_ln(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp1"))
    x = x + _lin(h, params, f"{prefix}.mlp2")
    return x.reshape(*x.shape[1:]) if squeeze else x


def embed_patches(images, cfg, params, prefix="vit"):
    """Linear patch projection plus positional table -> [B, T, D]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"image shape {x.shape[1:]} does not match config "
            f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    w = params[f"{prefix}.patch_embed.weight"]
    patches = Tensor(patchify(x, cfg.patch_size).astype(w.dtype, copy=False))
    tokens = _lin(patches, params, f"{prefix}.patch_embed")
    return tokens + params[f"{prefix}.pos_embed"]


def encode_image(images, cfg, params, prefix="vit", lora_for_block=None):
    """Image(s) -> embedding token grid [B, T, D] (or [T, D] for one image)."""
    single = np.asarray(images).ndim == 3
    x = embed_patches(images, cfg, params, prefix)
    for i in range(cfg.depth):
        lora = lora_for_block(i) if lora_for_block is not None else None
        x = block_forward(x, params, f"{prefix}.block{i}", cfg.heads, lora)
    x = _ln(x, params, f"{prefix}.norm")
    if single:
        x = x.reshape(*x.shape[1:])
    return TokenGrid(x, cfg.grid, positional=True)
