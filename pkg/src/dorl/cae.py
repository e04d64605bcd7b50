"""Cross-domain masked autoencoder over segmenter embeddings.

The encoder sees only the visible 25% of embedding tokens.  A feature decoder
(with a learned mask token) reconstructs the full embedding grid ``m``; a
per-token linear image decoder maps ``m`` to the segmented image.  Training
minimises

    total = L_ssim + lam * (beta * L_rec + L_mmd)

where L_mmd is a linear-kernel MMD between projected, pooled ``m`` of a
source and a target half-batch.  After training, ``extract_features`` runs
the encoder unmasked and average-pools its tokens.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import autograd as ag
from .core.autograd import Tensor, no_grad
from .core.checkpoint import load_params, save_params
from .core.optim import OptimState, ScheduleConfig, adamw_step, lr_at
from .core.params import ParamStore
from .core.rng import stream
from .errors import ConfigError, DataError, ModelStateError, ShapeError
from .vit import add_layer_norm, add_linear, block_forward, init_block, patchify, unpatchify

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
TERMS = ("ssim", "rec", "mmd")


@dataclass(frozen=True)
class CAEConfig:
    embed_dim: int = 192
    grid: tuple = (14, 14)
    patch_size: int = 16
    channels: int = 3
    enc_depth: int = 12
    dec_depth: int = 4
    heads: int = 3
    mlp_ratio: float = 4.0
    proj_dim: int = 64
    mask_ratio: float = 0.75
    beta: float = 0.5
    lam: float = 2.0
    terms: tuple = TERMS        # loss terms switched on (ablation variants drop some)
    rec_masked_only: bool = False
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio {self.mask_ratio} outside [0, 1)")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even number >= 2")
        bad = set(self.terms) - set(TERMS)
        if bad:
            raise ConfigError(f"unknown loss terms {sorted(bad)}")

    @property
    def num_tokens(self):
        return self.grid[0] * self.grid[1]

    @property
    def image_size(self):
        return self.grid[0] * self.patch_size

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @classmethod
    def from_vit(cls, vit_cfg, **kw):
        return cls(embed_dim=vit_cfg.embed_dim, grid=vit_cfg.grid, patch_size=vit_cfg.patch_size,
                   channels=vit_cfg.channels, heads=vit_cfg.heads, mlp_ratio=vit_cfg.mlp_ratio,
                   **kw)


# encoder / decoder depths per profile; "bench" trades depth for the CPU budget
PROFILE_DEPTHS = {"tiny": (2, 1), "bench": (4, 2), "desk": (12, 4), "full": (12, 4)}


@dataclass
class MaskedBatch:
    visible: np.ndarray         # [B, V, D] visible embedding tokens
    visible_idx: np.ndarray     # [B, V] original grid positions, ascending
    masked_idx: np.ndarray      # [B, M]
    ratio: float
    grid: tuple

    @property
    def num_tokens(self):
        return self.visible_idx.shape[1] + self.masked_idx.shape[1]


@dataclass
class LossBreakdown:
    l_rec: float
    l_mmd: float
    l_ssim: float
    l_rmmd: float
    total: float
    beta: float
    lam: float


@dataclass
class CAEModel:
    cfg: CAEConfig
    params: ParamStore
    trained: bool = False
    trace: list = field(default_factory=list)   # per-epoch LossBreakdown
    steps: list = field(default_factory=list)   # per-step LossBreakdown


def init_cae(cfg, seed, dtype=np.float32):
    p = ParamStore()
    rng = stream(seed, "cae.init")
    d, t = cfg.embed_dim, cfg.num_tokens
    p.add("cae.enc.pos_embed", Tensor((0.02 * rng.standard_normal((t, d))).astype(dtype)))
    for i in range(cfg.enc_depth):
        init_block(p, f"cae.enc.block{i}", d, cfg.hidden_dim, rng, dtype,
                   residual_scale=1.0 / math.sqrt(2.0 * cfg.enc_depth))
    add_layer_norm(p, "cae.enc.norm", d, dtype)
    p.add("cae.mask_token.weight", Tensor((0.02 * rng.standard_normal(d)).astype(dtype)))
    p.add("cae.dec_feat.pos_embed", Tensor((0.02 * rng.standard_normal((t, d))).astype(dtype)))
    for i in range(cfg.dec_depth):
        init_block(p, f"cae.dec_feat.block{i}", d, cfg.hidden_dim, rng, dtype,
                   residual_scale=1.0 / math.sqrt(2.0 * cfg.dec_depth))
    add_layer_norm(p, "cae.dec_feat.norm", d, dtype)
    add_linear(p, "cae.dec_feat.head", d, d, rng, dtype)
    add_linear(p, "cae.dec_img", d, cfg.patch_size ** 2 * cfg.channels, rng, dtype)
    add_linear(p, "cae.proj", d, cfg.proj_dim, rng, dtype)
    return CAEModel(cfg, p)


# ---------------------------------------------------------------- masking

def _tokens(e):
    data = e.tokens.data if hasattr(e, "tokens") else (e.data if isinstance(e, Tensor) else e)
    return np.asarray(data)


def mask_patches(e, ratio, seed, sample_ids=None, epoch=0):
    """Random ``round(ratio*T)`` masked positions per sample, keyed by (seed, sample id, epoch)."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1)")
    x = _tokens(e)
    single = x.ndim == 2
    if single:
        x = x[None]
    b, t, _ = x.shape
    if sample_ids is None:
        sample_ids = list(range(b))
    if len(sample_ids) != b:
        raise ShapeError(f"{len(sample_ids)} sample ids for a batch of {b}")
    n_mask = int(round(ratio * t))
    vis = np.empty((b, t - n_mask), dtype=np.int64)
    msk = np.empty((b, n_mask), dtype=np.int64)
    for i, sid in enumerate(sample_ids):
        perm = stream(seed, f"cae.mask:{sid}", epoch).permutation(t)
        msk[i] = np.sort(perm[:n_mask])
        vis[i] = np.sort(perm[n_mask:])
    visible = np.take_along_axis(x, vis[..., None], axis=1)
    grid = getattr(e, "grid", (int(math.isqrt(t)), int(math.isqrt(t))))
    if single:
        return MaskedBatch(visible[0], vis[0], msk[0], ratio, grid)
    return MaskedBatch(visible, vis, msk, ratio, grid)


def _batched(batch):
    if np.ndim(batch.visible) == 3:
        return batch, False
    return MaskedBatch(np.asarray(batch.visible)[None], np.asarray(batch.visible_idx)[None],
                       np.asarray(batch.masked_idx)[None], batch.ratio, batch.grid), True


# ---------------------------------------------------------------- forward

def _ln(x, p, name):
    return ag.layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _lin(x, p, name):
    return ag.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def encode(batch, model):
    """Encoder over visible tokens only: [B, V, D] -> z [B, V, D] (or [V, D] -> [V, D])."""
    cfg, p = model.cfg, model.params
    batch, single = _batched(batch)
    vis = np.asarray(batch.visible)
    if vis.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"token dim {vis.shape[-1]} != encoder width {cfg.embed_dim}")
    b, v, d = vis.shape
    pos = ag.gather(ag.broadcast_to(p["cae.enc.pos_embed"], (b, cfg.num_tokens, d)),
                    batch.visible_idx[..., None], axis=1, unique=True)
    x = Tensor(vis.astype(p["cae.enc.pos_embed"].dtype, copy=False)) + pos
    for i in range(cfg.enc_depth):
        x = block_forward(x, p, f"cae.enc.block{i}", cfg.heads)
    z = _ln(x, p, "cae.enc.norm")
    return z.reshape(*z.shape[1:]) if single else z


def decode_features(z, batch, model):
    """Interleave mask tokens at the masked slots, restore grid order, decode -> m [B, T, D]."""
    cfg, p = model.cfg, model.params
    batch, single = _batched(batch)
    if single:
        z = z.reshape(1, *z.shape)
    b, v, d = z.shape
    t = cfg.num_tokens
    m_idx = np.asarray(batch.masked_idx)
    if v + m_idx.shape[1] != t:
        raise ShapeError(f"{v} visible + {m_idx.shape[1]} masked tokens != grid of {t}")
    order = np.concatenate([batch.visible_idx, m_idx], axis=1)
    if order.size and (order.min() < 0 or order.max() >= t):
        raise ShapeError("token index out of range")
    restore = np.argsort(order, axis=1, kind="stable")
    x = z
    if m_idx.shape[1]:
        mask_tok = ag.broadcast_to(p["cae.mask_token.weight"], (b, m_idx.shape[1], d))
        x = ag.concat([z, mask_tok], axis=1)
    x = ag.gather(x, restore[..., None], axis=1, unique=True)
    x = x + p["cae.dec_feat.pos_embed"]
    for i in range(cfg.dec_depth):
        x = block_forward(x, p, f"cae.dec_feat.block{i}", cfg.heads)
    m = _lin(_ln(x, p, "cae.dec_feat.norm"), p, "cae.dec_feat.head")
    return m.reshape(*m.shape[1:]) if single else m


def decode_patches(m, model):
    """Per-token pixel probabilities [B, T, p*p*C] before reassembly."""
    return ag.sigmoid(_lin(m, model.params, "cae.dec_img"))


def decode_image(m, model):
    """Per-token linear map to patch pixels, reassembled row-major, sigmoid -> [B, H, W, C]."""
    cfg = model.cfg
    w = model.params["cae.dec_img.weight"]
    if m.shape[-1] != w.shape[1]:
        raise ShapeError(f"feature dim {m.shape[-1]} != image decoder input {w.shape[1]}")
    squeeze = m.ndim == 2
    if squeeze:
        m = m.reshape(1, *m.shape)
    patches = _lin(m, model.params, "cae.dec_img")
    h = ag.sigmoid(unpatchify(patches, cfg.patch_size, cfg.channels))
    return h.reshape(*h.shape[1:]) if squeeze else h


# ---------------------------------------------------------------- losses

def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_rec(e, m, token_mask=None):
    """Mean squared error between target embedding ``e`` (constant) and ``m``.

    ``token_mask`` ([B, T] bool) restricts the mean to the selected tokens.
    """
    m = _as_tensor(m)
    target = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=m.dtype)
    if target.shape != m.shape:
        raise ShapeError(f"loss_rec: {target.shape} vs {m.shape}")
    diff2 = ag.square(m - Tensor(target))
    if token_mask is None:
        return ag.mean(diff2)
    w = np.asarray(token_mask, dtype=m.dtype)[..., None]
    denom = max(w.sum() * m.shape[-1], 1.0)
    return ag.sum_(diff2 * Tensor(w)) * (1.0 / denom)


def project(m, params, name="cae.proj"):
    """GAP over tokens then linear projection: [n, T, D] -> [n, P]."""
    return ag.linear(ag.mean(m, axis=-2), params[f"{name}.weight"], params[f"{name}.bias"])


def loss_mmd(m_source, m_target, params=None, name="cae.proj"):
    """Squared norm of the difference of mean projected features.

    With ``params=None`` the inputs are taken as already projected [n, P] rows.
    """
    src, tgt = _as_tensor(m_source), _as_tensor(m_target)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise DataError("loss_mmd needs at least one source and one target sample")
    if params is not None:
        src, tgt = project(src, params, name), project(tgt, params, name)
    diff = ag.mean(src, axis=0) - ag.mean(tgt, axis=0)
    return ag.sum_(ag.square(diff))


def _ssim_op(h, c):
    """Fused global SSIM over pixels laid out as [B, N, C] (any pixel order).

    Returns per-(sample, channel) SSIM [B, C]; the gradient w.r.t. ``h`` is analytic.
    """
    hd, cd = h.data, np.asarray(c, dtype=h.dtype)
    n = hd.shape[-2]
    mu_h, mu_c = hd.mean(axis=-2), cd.mean(axis=-2)
    dh, dc = hd - mu_h[..., None, :], cd - mu_c[..., None, :]
    var_h, var_c = (dh * dh).mean(axis=-2), (dc * dc).mean(axis=-2)
    cov = (dh * dc).mean(axis=-2)
    a1, a2 = 2.0 * mu_h * mu_c + SSIM_C1, 2.0 * cov + SSIM_C2
    b1, b2 = mu_h * mu_h + mu_c * mu_c + SSIM_C1, var_h + var_c + SSIM_C2
    s = (a1 * a2) / (b1 * b2)

    def backward(g):
        # dS/dh_i = [2 mu_c a2 + 2 (c_i - mu_c) a1] / (n b1 b2) - S [2 mu_h / b1 + 2 (h_i - mu_h) / b2] / n
        k = g / (n * b1 * b2)
        const = k * 2.0 * mu_c * a2 - g * s * 2.0 * mu_h / (n * b1)
        grad = dc * (k * 2.0 * a1)[..., None, :] - dh * (g * s * 2.0 / (n * b2))[..., None, :]
        grad += const[..., None, :]
        return (grad.astype(hd.dtype, copy=False),)

    return ag.custom_op(s, "ssim", (h,), backward, flops=8 * hd.size)


def _check_unit(x, name):
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    if d.size and (d.min() < 0 or d.max() > 1):
        raise ValueError(f"SSIM {name} values must lie in [0, 1]")


def ssim_global(h, c):
    """Per-sample SSIM with global per-channel statistics, averaged over channels.

    Inputs are [H, W, C] or [B, H, W, C] images; returns a [B] (or scalar) tensor.
    """
    h = _as_tensor(h)
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    if h.shape != c.shape:
        raise ShapeError(f"loss_ssim: {h.shape} vs {c.shape}")
    _check_unit(h, "input")
    _check_unit(c, "target")
    single = h.ndim == 3
    ch = h.shape[-1]
    lead = () if single else (h.shape[0],)
    flat_h = h.reshape(*lead, -1, ch) if lead else h.reshape(1, -1, ch)
    flat_c = c.reshape(*lead, -1, ch) if lead else c.reshape(1, -1, ch)
    s = ag.mean(_ssim_op(flat_h, flat_c), axis=-1)
    return s.reshape(()) if single else s


def loss_ssim(h, c):
    """1 - SSIM, averaged over the batch."""
    return 1.0 - ag.mean(ssim_global(h, c))


def loss_ssim_patches(patch_probs, target_patches, channels):
    """``loss_ssim`` evaluated on patch-layout pixels [B, T, p*p*C] (no reassembly needed)."""
    b = patch_probs.shape[0]
    s = _ssim_op(patch_probs.reshape(b, -1, channels), target_patches.reshape(b, -1, channels))
    return 1.0 - ag.mean(s)


def total_loss(l_ssim, l_rec, l_mmd, beta=0.5, lam=2.0):
    if beta < 0 or lam < 0:
        raise ConfigError("loss weights must be >= 0")
    l_ssim, l_rec, l_mmd = float(l_ssim), float(l_rec), float(l_mmd)
    l_rmmd = beta * l_rec + l_mmd
    return LossBreakdown(l_rec, l_mmd, l_ssim, l_rmmd, l_ssim + lam * l_rmmd, beta, lam)


# ---------------------------------------------------------------- training

@dataclass
class CAEDomain:
    """Cached inputs for one domain: embeddings e_i and segmented images c_i."""
    name: str
    embeddings: np.ndarray      # [N, T, D]
    segmented: np.ndarray       # [N, H, W, C], uint8 or float in [0, 1]
    sample_ids: list

    def __post_init__(self):
        if self.segmented is None:
            raise DataError(f"domain {self.name}: segmented images are missing")
        if len(self.embeddings) != len(self.segmented) or len(self.embeddings) != len(self.sample_ids):
            raise DataError(f"domain {self.name}: embeddings, segmented images and ids differ in length")
        if len(self.embeddings) == 0:
            raise DataError(f"domain {self.name}: no samples")

    def images(self, idx):
        c = self.segmented[idx]
        return c.astype(np.float32) / 255.0 if c.dtype == np.uint8 else c.astype(np.float32)


class _Cycler:
    """Endless shuffled pass over one domain, reshuffled every cycle."""

    def __init__(self, n, seed, label):
        self.n, self.seed, self.label = n, seed, label
        self.cycle, self.pos = 0, 0
        self.order = stream(seed, label, 0).permutation(n)

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.cycle += 1
                self.pos = 0
                self.order = stream(self.seed, self.label, self.cycle).permutation(self.n)
            j = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + j])
            self.pos += j
        return np.asarray(out)


def domain_pairs(n):
    return [(a, b) for a in range(n) for b in range(a + 1, n)]


def cae_step_losses(model, e, c, batch, n_source):
    """All three losses for one mixed batch; returns (objective tensor, LossBreakdown)."""
    cfg = model.cfg
    z = encode(batch, model)
    m = decode_features(z, batch, model)
    terms = set(cfg.terms)
    token_mask = None
    if cfg.rec_masked_only:
        token_mask = np.zeros(e.shape[:2], dtype=bool)
        np.put_along_axis(token_mask, batch.masked_idx, True, axis=1)
    l_rec = loss_rec(e, m, token_mask)
    l_mmd = loss_mmd(m[:n_source], m[n_source:], model.params)
    c_patches = patchify(c, cfg.patch_size)
    if "ssim" in terms:
        l_ssim = loss_ssim_patches(decode_patches(m, model), c_patches, cfg.channels)
    else:
        with no_grad():
            l_ssim = loss_ssim_patches(decode_patches(Tensor(m.data), model), c_patches,
                                       cfg.channels)
    w = {k: (1.0 if k in terms else 0.0) for k in TERMS}
    objective = None
    for weight, term in ((w["ssim"], l_ssim), (cfg.lam * cfg.beta * w["rec"], l_rec),
                         (cfg.lam * w["mmd"], l_mmd)):
        if weight and term.requires_grad:
            objective = term * weight if objective is None else objective + term * weight
    br = total_loss(w["ssim"] * float(l_ssim.data), w["rec"] * float(l_rec.data),
                    w["mmd"] * float(l_mmd.data), cfg.beta, cfg.lam)
    return objective, br


def _mean_breakdown(items, beta, lam):
    return total_loss(np.mean([b.l_ssim for b in items]), np.mean([b.l_rec for b in items]),
                      np.mean([b.l_mmd for b in items]), beta, lam)


def train_cae(domains, cfg, seed=0, model=None, log=None):
    """Unsupervised training over >= 2 domains with round-robin (source, target) pairs.

    Each step draws half a batch from each domain of the current pair.  Loss
    components of disabled terms (``cfg.terms``) are logged as 0.
    """
    if len(domains) < 2:
        raise ConfigError("train_cae needs at least two domains (MMD is undefined otherwise)")
    t = domains[0].embeddings.shape[1]
    for dom in domains:
        if dom.embeddings.shape[1:] != (cfg.num_tokens, cfg.embed_dim):
            raise ShapeError(f"domain {dom.name}: embeddings {dom.embeddings.shape[1:]} do not "
                             f"match config {(cfg.num_tokens, cfg.embed_dim)}")
        if dom.segmented.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(f"domain {dom.name}: segmented images have shape "
                             f"{dom.segmented.shape[1:]}")
    del t
    if model is None:
        model = init_cae(cfg, seed)
    half = cfg.batch_size // 2
    n_total = sum(len(d.embeddings) for d in domains)
    steps_per_epoch = max(1, math.ceil(n_total / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    sched = ScheduleConfig.with_default_warmup(cfg.lr, max(total, 2))
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    cyclers = [_Cycler(len(d.embeddings), seed, f"cae.order.{i}") for i, d in enumerate(domains)]
    pairs = domain_pairs(len(domains))
    params = model.params
    step = 0
    for epoch in range(cfg.epochs):
        logged = []
        for _ in range(steps_per_epoch):
            a, b = pairs[step % len(pairs)]
            ia, ib = cyclers[a].take(half), cyclers[b].take(half)
            e = np.concatenate([domains[a].embeddings[ia], domains[b].embeddings[ib]])
            c = np.concatenate([domains[a].images(ia), domains[b].images(ib)])
            ids = [f"{domains[a].name}/{domains[a].sample_ids[i]}" for i in ia] + \
                  [f"{domains[b].name}/{domains[b].sample_ids[i]}" for i in ib]
            batch = mask_patches(e, cfg.mask_ratio, seed, ids, epoch)
            params.zero_grad()
            objective, br = cae_step_losses(model, e.astype(np.float32, copy=False), c, batch, half)
            if objective is not None:
                objective.backward()
            state.lr = lr_at(step + 1, sched)
            adamw_step(params, params.grads(), state)
            logged.append(br)
            model.steps.append(br)
            step += 1
        model.trace.append(_mean_breakdown(logged, cfg.beta, cfg.lam))
        if log is not None:
            tb = model.trace[-1]
            log(f"cae epoch {epoch + 1}/{cfg.epochs} total {tb.total:.4f} ssim {tb.l_ssim:.4f} "
                f"rec {tb.l_rec:.4f} mmd {tb.l_mmd:.5f}")
    params.zero_grad()
    model.trained = True
    return model


# ---------------------------------------------------------------- inference

def extract_features(e, model, batch_size=64):
    """Unmasked encoder pass, averaged over tokens: s_i of width D."""
    if not model.trained:
        raise ModelStateError("CAE encoder is untrained; train it or load a checkpoint first")
    x = _tokens(e)
    single = x.ndim == 2
    if single:
        x = x[None]
    cfg = model.cfg
    if x.shape[1:] != (cfg.num_tokens, cfg.embed_dim):
        raise ShapeError(f"embedding shape {x.shape[1:]} does not match encoder "
                         f"{(cfg.num_tokens, cfg.embed_dim)}")
    out = []
    idx_all = np.arange(cfg.num_tokens)
    with no_grad():
        for lo in range(0, len(x), batch_size):
            chunk = x[lo:lo + batch_size]
            b = len(chunk)
            batch = MaskedBatch(chunk, np.broadcast_to(idx_all, (b, cfg.num_tokens)),
                                np.zeros((b, 0), dtype=np.int64), 0.0, cfg.grid)
            out.append(ag.mean(encode(batch, model), axis=1).data)
    s = np.concatenate(out).astype(np.float32)
    return s[0] if single else s


def reconstruct(e, model, seed=0, sample_ids=None):
    """Masked reconstruction (m, h) for inspection."""
    with no_grad():
        x = _tokens(e)
        batch = mask_patches(x, model.cfg.mask_ratio, seed, sample_ids)
        m = decode_features(encode(batch, model), batch, model)
        return m.data, decode_image(m, model).data


# ---------------------------------------------------------------- persistence

def save_cae(path, model):
    meta = {"kind": "cae", "config": asdict(model.cfg), "trained": model.trained}
    return save_params(path, model.params, meta)


def load_cae(path):
    params, meta = load_params(path)
    if meta.get("kind") != "cae":
        raise DataError(f"{path} is not a CAE checkpoint")
    cfg = dict(meta["config"])
    cfg["grid"] = tuple(cfg["grid"])
    cfg["terms"] = tuple(cfg["terms"])
    return CAEModel(CAEConfig(**cfg), params, trained=bool(meta.get("trained", True)))


@dataclass
class FeatureSet:
    features: np.ndarray        # [N, D] float32
    labels: np.ndarray          # [N] int64
    dataset_ids: list
    sample_ids: list
    domains: list

    def __len__(self):
        return len(self.labels)


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_features(path, fs):
    """Binary records plus ``<path>.json`` manifest with dim and count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(fs.features, dtype="<f4")
    with open(path, "wb") as fh:
        for i in range(len(fs)):
            fh.write(_pack_str(fs.dataset_ids[i]) + _pack_str(fs.sample_ids[i]))
            fh.write(struct.pack("<i", int(fs.labels[i])))
            fh.write(_pack_str(fs.domains[i]))
            fh.write(feats[i].tobytes())
    manifest = {"version": 1, "dim": int(feats.shape[1]) if feats.ndim == 2 else 0,
                "count": len(fs), "dtype": "<f4"}
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def read_features(path):
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise DataError(f"feature manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    dim, count = manifest["dim"], manifest["count"]
    raw = path.read_bytes()
    pos = 0

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<H", raw, pos)
        s = raw[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        return s

    feats = np.empty((count, dim), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    ds_ids, s_ids, doms = [], [], []
    try:
        for i in range(count):
            ds_ids.append(read_str())
            s_ids.append(read_str())
            (labels[i],) = struct.unpack_from("<i", raw, pos)
            pos += 4
            doms.append(read_str())
            feats[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated feature file ({exc})") from None
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after {count} records")
    return FeatureSet(feats, labels, ds_ids, s_ids, doms)


def with_terms(cfg, terms):
    return replace(cfg, terms=tuple(terms))
