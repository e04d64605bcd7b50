"""Frozen ViT backbone + low-rank adapters + a small query-token mask decoder.

The segmenter yields two things per image: the adapted embedding token grid
and a per-pixel cell probability.  :func:`postprocess` turns the thresholded
mask into the "segmented" image, with everything outside the mask painted a
flat mid-gray (128/255).
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import autograd as ag
from .core.autograd import Tensor, no_grad
from .core.checkpoint import load_params, save_params
from .core.optim import OptimState, ScheduleConfig, adamw_step, lr_at
from .core.rng import stream
from .errors import ConfigError, DataError, ModelStateError, ShapeError
from .vit import (TokenGrid, ViTConfig, add_layer_norm, add_linear, attend, encode_image, init_vit,
                  merge_heads, split_heads)

FILL_VALUE = 128.0 / 255.0
MASK_THRESHOLD = 0.5
HYPER_DIM = 8


@dataclass
class LoRAdapter:
    A: Tensor               # [r, C_in]
    B: Tensor               # [C_out, r]
    rank: int
    scale: float = 1.0
    target: str = ""

    def delta(self, x):
        return ag.linear(ag.linear(x, self.A), self.B) * self.scale


def init_lora(r, c_in, c_out, seed, scale=1.0, target="", dtype=np.float64):
    """A ~ N(0, 1/c_in), B = 0, so the adapter starts as an exact no-op."""
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    if r > min(c_in, c_out) / 4:
        raise ConfigError(f"LoRA rank {r} too large for a {c_out}x{c_in} weight "
                          f"(limit {min(c_in, c_out) // 4})")
    rng = stream(seed, "lora.init", c_in, c_out, r)
    a = rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(r, c_in)).astype(dtype)
    b = np.zeros((c_out, r), dtype=dtype)
    return LoRAdapter(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), r, scale, target)


def lora_forward(x, W, adapter):
    """(W + s*B*A) x computed as W x + s*B (A x); works on vectors or row batches."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    W = np.asarray(W.data if isinstance(W, Tensor) else W)
    A, B = adapter.A.data, adapter.B.data
    if W.shape[1] != x.shape[-1] or A.shape[1] != x.shape[-1] or B.shape[0] != W.shape[0] \
            or B.shape[1] != A.shape[0]:
        raise ShapeError(f"lora_forward: incompatible shapes x{x.shape} W{W.shape} "
                         f"A{A.shape} B{B.shape}")
    return x @ W.T + adapter.scale * ((x @ A.T) @ B.T)


# ---------------------------------------------------------------- model

@dataclass
class SegModel:
    cfg: object
    params: object          # ParamStore: vit.* frozen, seg.* trainable
    rank: int = 4
    scale: float = 1.0
    upsample: int = 4       # logits per patch side before bilinear upsampling
    trace: list = field(default_factory=list)

    def adapter(self, block, kind):
        pre = f"seg.adapter.block{block}.{kind}"
        return LoRAdapter(self.params[f"{pre}.A"], self.params[f"{pre}.B"],
                          self.rank, self.scale, f"vit.block{block}.qkv")

    def lora_for_block(self, i):
        adapters = {k: self.adapter(i, k) for k in ("q", "v")}
        return lambda kind, x: adapters[kind].delta(x)

    def frozen_snapshot(self):
        return self.params.snapshot(self.params.frozen())


def init_seg_model(cfg, seed, rank=4, scale=1.0, upsample=4, dtype=np.float32,
                   backbone_seed=None):
    """Random frozen backbone (seeded by ``backbone_seed``), fresh adapters and decoder."""
    backbone_seed = seed if backbone_seed is None else backbone_seed
    params = init_vit(cfg, backbone_seed, prefix="vit", dtype=dtype, frozen=True)
    d = cfg.embed_dim
    for i in range(cfg.depth):
        for kind in ("q", "v"):
            ad = init_lora(rank, d, d, seed * 1000 + i * 2 + (kind == "v"), scale, dtype=dtype)
            params.add(f"seg.adapter.block{i}.{kind}.A", ad.A)
            params.add(f"seg.adapter.block{i}.{kind}.B", ad.B)
    rng = stream(seed, "seg.decoder.init")
    params.add("seg.decoder.query",
               Tensor((0.02 * rng.standard_normal((1, d))).astype(dtype)))
    for b in range(2):
        pre = f"seg.decoder.block{b}"
        add_layer_norm(params, f"{pre}.ln_q", d, dtype)
        add_layer_norm(params, f"{pre}.ln_kv", d, dtype)
        for name in ("wq", "wk", "wv", "wo"):
            add_linear(params, f"{pre}.{name}", d, d, rng, dtype)
        add_layer_norm(params, f"{pre}.ln_mlp", d, dtype)
        add_linear(params, f"{pre}.mlp1", d, 2 * d, rng, dtype)
        add_linear(params, f"{pre}.mlp2", 2 * d, d, rng, dtype)
    add_layer_norm(params, "seg.decoder.head_ln", d, dtype)
    add_linear(params, "seg.decoder.head1", d, d, rng, dtype)
    add_linear(params, "seg.decoder.head2", d, upsample * upsample * HYPER_DIM, rng, dtype)
    add_linear(params, "seg.decoder.hyper", d, HYPER_DIM, rng, dtype)
    params.add("seg.decoder.logit_bias", Tensor(np.zeros(1, dtype=dtype)))
    return SegModel(cfg, params, rank, scale, upsample)


def bilinear_matrix(n_in, n_out, dtype=np.float32):
    """[n_out, n_in] interpolation weights (half-pixel centres, edge clamped)."""
    U = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        U[i, lo] += 1.0 - frac
        U[i, hi] += frac
    return U.astype(dtype)


def _lin(x, p, name):
    return ag.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _ln(x, p, name):
    return ag.layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])


def decode_mask_logits(tokens, model):
    """Image tokens [B, T, D] -> pixel logits [B, H, W]."""
    p, cfg = model.params, model.cfg
    if not all(n in p for n in ("seg.decoder.query", "seg.decoder.hyper.weight")):
        raise ModelStateError("segmentation decoder parameters are missing")
    b, t, d = tokens.shape
    heads = cfg.heads
    query = ag.broadcast_to(p["seg.decoder.query"], (b, 1, d))
    for i in range(2):
        pre = f"seg.decoder.block{i}"
        qn = _ln(query, p, f"{pre}.ln_q")
        kv = _ln(tokens, p, f"{pre}.ln_kv")
        att = attend(split_heads(_lin(qn, p, f"{pre}.wq"), heads),
                     split_heads(_lin(kv, p, f"{pre}.wk"), heads),
                     split_heads(_lin(kv, p, f"{pre}.wv"), heads))
        query = query + _lin(merge_heads(att), p, f"{pre}.wo")
        h = ag.gelu(_lin(_ln(query, p, f"{pre}.ln_mlp"), p, f"{pre}.mlp1"))
        query = query + _lin(h, p, f"{pre}.mlp2")

    k = model.upsample
    feats = ag.gelu(_lin(_ln(tokens, p, "seg.decoder.head_ln"), p, "seg.decoder.head1"))
    feats = _lin(feats, p, "seg.decoder.head2").reshape(b, t * k * k, HYPER_DIM)
    hyper = _lin(query, p, "seg.decoder.hyper")                       # [B, 1, c]
    logits = ag.matmul(feats, ag.transpose(hyper)).reshape(b, t, k * k)
    logits = logits + p["seg.decoder.logit_bias"]
    g = cfg.image_size // cfg.patch_size
    grid = ag.transpose(logits.reshape(b, g, g, k, k), (0, 1, 3, 2, 4)).reshape(b, g * k, g * k)
    U = Tensor(bilinear_matrix(g * k, cfg.image_size, dtype=tokens.dtype))
    return ag.matmul(ag.matmul(U, grid), ag.transpose(U))


@dataclass
class SegOutput:
    embedding: TokenGrid
    probs: np.ndarray       # [B, H, W] or [H, W]
    mask: np.ndarray        # bool, same shape as probs


def forward_seg(images, model):
    """Differentiable pass: returns (embedding tokens [B,T,D], probs [B,H,W])."""
    cfg = model.cfg
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.size and (x.min() < 0 or x.max() > 1):
        raise DataError("image values must lie in [0, 1]")
    grid = encode_image(x, cfg, model.params, prefix="vit", lora_for_block=model.lora_for_block)
    probs = ag.sigmoid(decode_mask_logits(grid.tokens, model))
    return grid.tokens, probs


def segment(images, model, batch_size=16):
    """Inference: embedding e_i, mask probabilities and the 0.5-thresholded mask."""
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    toks, probs = [], []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            e, pr = forward_seg(x[lo:lo + batch_size], model)
            toks.append(e.data)
            probs.append(pr.data)
    tokens = np.concatenate(toks)
    probs = np.concatenate(probs)
    if single:
        tokens, probs = tokens[0], probs[0]
    return SegOutput(TokenGrid(Tensor(tokens), model.cfg.grid), probs, probs >= MASK_THRESHOLD)


def backbone_embedding(images, model):
    """Embedding of the frozen backbone alone (adapters bypassed)."""
    with no_grad():
        return encode_image(np.asarray(images), model.cfg, model.params, prefix="vit").tokens.data


def postprocess(image, mask):
    """Keep pixels under the mask; paint the rest 128/255 in every channel."""
    image = np.asarray(image)
    mask = np.asarray(mask).astype(bool)
    if image.shape[:-1] != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != image spatial shape {image.shape[:-1]}")
    return np.where(mask[..., None], image, np.asarray(FILL_VALUE, dtype=image.dtype))


def seg_loss(probs, truth, smooth=1.0, eps=1e-7):
    """Mean of pixel BCE and soft-Dice loss; per-image Dice averaged over the batch."""
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    truth = np.asarray(truth, dtype=probs.dtype)
    if probs.shape != truth.shape:
        raise ShapeError(f"probs {probs.shape} vs truth {truth.shape}")
    if probs.data.min() < 0 or probs.data.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    y = Tensor(truth)
    p = ag.clip(probs, eps, 1.0 - eps)
    bce = -ag.mean(y * ag.log(p) + (1.0 - y) * ag.log(1.0 - p))
    axes = tuple(range(probs.ndim))[-2:]
    inter = ag.sum_(probs * y, axis=axes)
    total = ag.sum_(probs, axis=axes) + ag.sum_(y, axis=axes)
    dice_loss = ag.mean(1.0 - (2.0 * inter + smooth) / (total + smooth))
    return (bce + dice_loss) * 0.5


def dice(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    denom = pred.sum() + truth.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(pred, truth).sum() / denom


def annotated_count(n_samples, fraction):
    return max(1, math.ceil(fraction * n_samples - 1e-9))


def choose_annotated(candidates, k, seed):
    """Deterministic choice of ``k`` annotated samples among ``candidates``."""
    order = stream(seed, "seg.annotated").permutation(len(candidates))[:k]
    return [candidates[i] for i in np.sort(order)]


def _dihedral(x, code):
    """One of the 8 flips/rotations of the two leading spatial axes."""
    x = np.rot90(x, code % 4, axes=(0, 1))
    return x[:, ::-1] if code >= 4 else x


def train_seg(images, masks, cfg, annotated_fraction=0.01, epochs=85, lr=3e-3,
              weight_decay=0.05, batch_size=1, seed=0, backbone_seed=None, rank=4,
              augment=True, model=None, log=None):
    """Fine-tune adapters + decoder on a ``annotated_fraction`` subset with masks.

    ``masks`` may contain ``None`` for unannotated samples.  With ``augment`` each
    drawn sample gets a random flip/rotation.  Returns the model;
    ``model.trace`` holds the mean training loss of every epoch.
    """
    avail = [i for i, m in enumerate(masks) if m is not None]
    if not avail:
        raise DataError("no samples carry ground-truth masks")
    k = annotated_count(len(masks), annotated_fraction)
    if len(avail) < k:
        raise DataError(f"need masks for {k} samples, only {len(avail)} available")
    picked = choose_annotated(avail, k, seed)
    x = np.stack([images[i] for i in picked]).astype(np.float32)
    y = np.stack([masks[i] for i in picked]).astype(np.float32)

    if model is None:
        model = init_seg_model(cfg, seed, rank=rank, backbone_seed=backbone_seed)
    params = model.params
    steps_per_epoch = math.ceil(len(x) / batch_size)
    total = max(2, steps_per_epoch * epochs)
    sched = ScheduleConfig.with_default_warmup(lr, total)
    state = OptimState(lr=lr, weight_decay=weight_decay)
    step = 0
    for epoch in range(epochs):
        rng = stream(seed, "seg.shuffle", epoch)
        order = rng.permutation(len(x))
        codes = rng.integers(0, 8, size=len(x)) if augment else np.zeros(len(x), dtype=int)
        losses = []
        for lo in range(0, len(x), batch_size):
            idx = order[lo:lo + batch_size]
            xb = np.stack([_dihedral(x[i], codes[i]) for i in idx]).astype(np.float32)
            yb = np.stack([_dihedral(y[i], c) for i, c in zip(idx, codes[idx])])
            params.zero_grad()
            _, probs = forward_seg(xb, model)
            loss = seg_loss(probs, yb)
            loss.backward()
            state.lr = lr_at(min(step + 1, total), sched)
            adamw_step(params, params.grads(), state)
            losses.append(float(loss.data) * len(idx))
            step += 1
        model.trace.append(sum(losses) / len(x))
        if log is not None:
            log(f"seg epoch {epoch + 1}/{epochs} loss {model.trace[-1]:.4f}")
    params.zero_grad()
    return model


def save_seg(path, model):
    meta = {"kind": "seg", "config": asdict(model.cfg), "rank": model.rank,
            "scale": model.scale, "upsample": model.upsample, "trace": list(model.trace)}
    return save_params(path, model.params, meta)


def load_seg(path):
    params, meta = load_params(path)
    if meta.get("kind") != "seg":
        raise DataError(f"{path} is not a segmentation checkpoint")
    return SegModel(ViTConfig(**meta["config"]), params, meta["rank"], meta["scale"],
                    meta["upsample"], list(meta["trace"]))
