"""Synthetic multi-domain "blood cell" images with exact masks.

Each sample is one cell on a background.  Cell geometry (size, shape, nucleus
lobes, granules) is drawn from a stream keyed only by (seed, class, index), so
sample k of class c has identical geometry in every domain.  Rendering
(background tint, illumination ramp, stain hue rotation, sensor noise and
background artifacts) is keyed by the domain as well.  Artifacts are
composited only where the cell mask is zero.

On-disk format (see :func:`save_dataset`)::

    <dir>/dataset.json      {"version": 1, "domain": ..., "classes": [...]}
    <dir>/manifest.jsonl    one JSON record per sample:
                            {"id", "label", "class_name", "domain", "image", "mask"}
    <dir>/images/<id>.png   8-bit RGB
    <dir>/masks/<id>.png    8-bit L (0 / 255); "mask" is null when absent
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core.rng import stream
from .errors import ConfigError, DataError, ParseError

IMAGE_SIZE = 224
LUMA = np.array([0.299, 0.587, 0.114])
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    radius: tuple = (50.0, 60.0)        # cell radius range in pixels at 224 px
    lobes: int = 1
    nucleus_ratio: float = 0.5          # nucleus area / cell area
    eccentricity: float = 0.1
    cytoplasm: tuple = (0.85, 0.70, 0.80)
    nucleus: tuple = (0.45, 0.25, 0.55)
    granules: int = 0


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    tint: tuple = (0.95, 0.90, 0.92)
    illumination: float = 0.1
    hue_shift: float = 0.0              # radians about the gray axis
    noise: float = 0.02
    p_scale_bar: float = 0.0
    p_smudge: float = 0.0
    p_vignette: float = 0.0
    p_rbc: float = 0.0

    def validate(self):
        for name in ("p_scale_bar", "p_smudge", "p_vignette", "p_rbc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{self.domain_id}: {name}={v} outside [0, 1]")
        if len(self.tint) != 3 or not all(0.0 <= t <= 1.0 for t in self.tint):
            raise ConfigError(f"{self.domain_id}: tint channels must lie in [0, 1]")
        if self.noise < 0 or not 0.0 <= self.illumination <= 1.0:
            raise ConfigError(f"{self.domain_id}: noise must be >= 0 and illumination in [0, 1]")


_BASE_CLASSES = [
    # name, radius, lobes, nucleus ratio, eccentricity, cytoplasm, nucleus, granules
    ("lymphocyte", (38, 46), 1, 0.75, 0.05, (0.62, 0.68, 0.90), (0.30, 0.20, 0.50), 0),
    ("monocyte", (62, 74), 2, 0.45, 0.25, (0.66, 0.62, 0.84), (0.45, 0.32, 0.60), 0),
    ("neutrophil", (50, 58), 4, 0.35, 0.10, (0.80, 0.62, 0.84), (0.40, 0.22, 0.52), 25),
    ("eosinophil", (52, 60), 2, 0.30, 0.10, (0.95, 0.55, 0.35), (0.38, 0.20, 0.50), 70),
    ("basophil", (44, 52), 2, 0.50, 0.15, (0.58, 0.46, 0.76), (0.22, 0.12, 0.38), 90),
    ("erythroblast", (34, 40), 1, 0.55, 0.05, (0.56, 0.54, 0.74), (0.18, 0.10, 0.30), 0),
    ("myeloblast", (66, 78), 1, 0.70, 0.20, (0.56, 0.62, 0.86), (0.52, 0.40, 0.66), 10),
    ("platelet_clump", (28, 34), 3, 0.25, 0.45, (0.70, 0.56, 0.84), (0.50, 0.30, 0.62), 40),
]


def default_classes(n=8):
    """``n`` class specs (2 <= n <= 13); the first 8 are hand-tuned, the rest derived."""
    if not 2 <= n <= 13:
        raise ConfigError("class count must lie in [2, 13]")
    specs = []
    for i in range(n):
        if i < len(_BASE_CLASSES):
            name, rad, lobes, ratio, ecc, cyto, nuc, gran = _BASE_CLASSES[i]
        else:
            j = i - len(_BASE_CLASSES)
            name = f"class{i}"
            rad = (30 + 9 * j, 38 + 9 * j)
            lobes = 1 + (j % 4)
            ratio = 0.3 + 0.1 * (j % 5)
            ecc = 0.05 + 0.08 * j
            cyto = (0.60 + 0.06 * j, 0.58, 0.85 - 0.05 * j)
            nuc = (0.30 + 0.05 * j, 0.20, 0.45)
            gran = 15 * j
        specs.append(ClassSpec(i, name, tuple(map(float, rad)), lobes, ratio, ecc,
                               cyto, nuc, gran))
    return specs


def default_domains(n=3):
    doms = [
        DomainSpec("lab_a", tint=(0.95, 0.90, 0.92), illumination=0.05, hue_shift=0.0,
                   noise=0.01, p_scale_bar=0.0, p_smudge=0.1, p_vignette=0.0, p_rbc=0.5),
        DomainSpec("lab_b", tint=(0.91, 0.89, 0.96), illumination=0.12, hue_shift=0.1,
                   noise=0.03, p_scale_bar=0.6, p_smudge=0.2, p_vignette=0.2, p_rbc=0.3),
        DomainSpec("lab_c", tint=(0.97, 0.91, 0.86), illumination=0.1, hue_shift=-0.08,
                   noise=0.04, p_scale_bar=0.1, p_smudge=0.4, p_vignette=0.5, p_rbc=0.8),
    ]
    if not 1 <= n <= len(doms):
        raise ConfigError(f"at most {len(doms)} default domains")
    return doms[:n]


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    images: np.ndarray                  # uint8 [N, H, W, 3]
    masks: np.ndarray                   # bool [N, H, W]
    has_mask: np.ndarray                # bool [N]
    labels: np.ndarray                  # int64 [N]
    domain: str
    sample_ids: list
    class_names: list
    artifact_masks: np.ndarray = None   # bool [N, H, W] (generator only)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def pixels(self, idx=None):
        """Float32 pixels in [0, 1]."""
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / 255.0

    def mask_list(self):
        return [m if h else None for m, h in zip(self.masks, self.has_mask)]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx], self.has_mask[idx], self.labels[idx],
                       self.domain, [self.sample_ids[i] for i in idx], list(self.class_names),
                       None if self.artifact_masks is None else self.artifact_masks[idx],
                       dict(self.meta))


# ---------------------------------------------------------------- rendering

def _hue_rotation(angle):
    """Rotation about the (1,1,1) gray axis (Rodrigues)."""
    k = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _stain(color, domain):
    c = _hue_rotation(domain.hue_shift) @ np.asarray(color, dtype=np.float64)
    return np.clip(c, 0.0, 1.0)


def _geometry(cls, seed, k, size):
    """Domain-independent geometry of sample ``k`` of class ``cls``."""
    rng = stream(seed, "synthcells.geometry", cls.class_id, k)
    r = rng.uniform(*cls.radius) * size / IMAGE_SIZE
    margin = r * (1 + cls.eccentricity) + 4
    cx = rng.uniform(margin, size - margin) if size - 2 * margin > 0 else size / 2
    cy = rng.uniform(margin, size - margin) if size - 2 * margin > 0 else size / 2
    theta = rng.uniform(0, np.pi)
    ecc = cls.eccentricity * rng.uniform(0.7, 1.3)
    nuc_r = r * np.sqrt(cls.nucleus_ratio / max(cls.lobes, 1) ** 0.5)
    lobe_r = nuc_r / max(cls.lobes, 1) ** 0.35
    spread = 0.0 if cls.lobes == 1 else r * 0.45
    phase = rng.uniform(0, 2 * np.pi)
    lobes = []
    for j in range(cls.lobes):
        a = phase + 2 * np.pi * j / cls.lobes
        jitter = rng.normal(0, 0.05 * r, size=2)
        lobes.append((cx + spread * np.cos(a) + jitter[0], cy + spread * np.sin(a) + jitter[1],
                      lobe_r * rng.uniform(0.85, 1.15)))
    granules = []
    for _ in range(cls.granules):
        rad = r * np.sqrt(rng.uniform(0, 0.8))
        ang = rng.uniform(0, 2 * np.pi)
        granules.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang),
                         rng.uniform(1.2, 2.2) * size / IMAGE_SIZE))
    return dict(cx=cx, cy=cy, r=r, theta=theta, ecc=ecc, lobes=lobes, granules=granules)


def _cell_masks(geom, yy, xx):
    dx, dy = xx - geom["cx"], yy - geom["cy"]
    c, s = np.cos(geom["theta"]), np.sin(geom["theta"])
    u, v = c * dx + s * dy, -s * dx + c * dy
    a, b = geom["r"] * (1 + geom["ecc"]), geom["r"] * (1 - geom["ecc"])
    rho = (u / a) ** 2 + (v / b) ** 2
    cell = rho <= 1.0
    nucleus = np.zeros_like(cell)
    for lx, ly, lr in geom["lobes"]:
        nucleus |= (xx - lx) ** 2 + (yy - ly) ** 2 <= lr * lr
    granule = np.zeros_like(cell)
    for gx, gy, gr in geom["granules"]:
        granule |= (xx - gx) ** 2 + (yy - gy) ** 2 <= gr * gr
    rim = cell & (rho > (1.0 - 3.0 / geom["r"]) ** 2)
    return cell, nucleus & cell, granule & cell & ~nucleus, rim


def render_sample(cls, domain, seed, k, size=IMAGE_SIZE):
    """Return (rgb float [H,W,3] in [0,1], cell mask, artifact mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    geom = _geometry(cls, seed, k, size)
    cell, nucleus, granule, rim = _cell_masks(geom, yy, xx)
    rng = stream(seed, "synthcells.render." + domain.domain_id, cls.class_id, k)

    tint = np.asarray(domain.tint, dtype=np.float64)
    img = np.broadcast_to(tint, (size, size, 3)).copy()
    artifact = np.zeros((size, size), dtype=bool)
    background = ~cell

    def paint(region, color, alpha=1.0):
        region = region & background
        w = (alpha * region)[..., None] if np.ndim(alpha) else (region.astype(np.float64) * alpha)[..., None]
        img[:] = img * (1 - w) + w * np.asarray(color)
        artifact[region] = True

    if rng.random() < domain.p_rbc:
        for _ in range(rng.integers(2, 6)):
            rx, ry = rng.uniform(0, size, size=2)
            rr = rng.uniform(14, 22) * size / IMAGE_SIZE
            disc = (xx - rx) ** 2 + (yy - ry) ** 2 <= rr * rr
            paint(disc, _stain((0.92, 0.55, 0.52), domain), 0.8)
    if rng.random() < domain.p_smudge:
        sx, sy = rng.uniform(0, size, size=2)
        sr = rng.uniform(18, 40) * size / IMAGE_SIZE
        d2 = ((xx - sx) ** 2 + (yy - sy) ** 2) / (sr * sr)
        blob = np.exp(-d2)
        paint(blob > 0.05, _stain((0.45, 0.30, 0.50), domain), 0.6 * blob)
    if rng.random() < domain.p_vignette:
        rr = np.sqrt((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (size / 2)
        strength = np.clip(rr - 0.8, 0, None) * 1.5
        paint(strength > 0, (0.15, 0.12, 0.15), np.clip(strength, 0, 0.6))
    if rng.random() < domain.p_scale_bar:
        h = max(2, int(round(5 * size / IMAGE_SIZE)))
        w = max(4, int(round(rng.uniform(35, 55) * size / IMAGE_SIZE)))
        y0 = size - 3 * h - int(rng.integers(0, 3 * h))
        x0 = size - w - 2 * h - int(rng.integers(0, 3 * h))
        bar = np.zeros((size, size), dtype=bool)
        bar[y0:y0 + h, x0:x0 + w] = True
        paint(bar, (0.05, 0.05, 0.05))

    cyto = _stain(cls.cytoplasm, domain) * tint
    nuc = _stain(cls.nucleus, domain) * tint
    gran = _stain(np.asarray(cls.nucleus) * 0.8, domain) * tint
    img[cell] = cyto
    img[rim] = cyto * 0.8
    img[granule] = gran
    img[nucleus] = nuc

    # illumination ramp and sensor noise affect the whole frame
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * (xx - size / 2) + np.sin(ang) * (yy - size / 2)) / size + 0.5
    img *= (1.0 - domain.illumination * np.clip(ramp, 0, 1))[..., None]
    if domain.noise > 0:
        img += rng.normal(0, domain.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), cell, artifact


def gen_domain(domain, classes, n_per_class, seed, size=IMAGE_SIZE):
    """Render ``n_per_class`` samples of every class in one domain."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    if len(classes) < 2:
        raise ConfigError("need at least 2 classes")
    domain.validate()
    for c in classes:
        if c.radius[0] <= 0 or c.radius[0] > c.radius[1] or c.lobes < 1 \
                or not 0 < c.nucleus_ratio < 1 or not 0 <= c.eccentricity < 1:
            raise ConfigError(f"invalid class spec {c.name}")
    n = n_per_class * len(classes)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    masks = np.empty((n, size, size), dtype=bool)
    arts = np.empty((n, size, size), dtype=bool)
    labels = np.empty(n, dtype=np.int64)
    ids = []
    i = 0
    for c in classes:
        for k in range(n_per_class):
            img, cell, art = render_sample(c, domain, seed, k, size)
            images[i] = np.round(img * 255.0).astype(np.uint8)
            masks[i], arts[i], labels[i] = cell, art, c.class_id
            ids.append(f"{domain.domain_id}-{c.class_id:02d}-{k:05d}")
            i += 1
    return Dataset(images, masks, np.ones(n, dtype=bool), labels, domain.domain_id, ids,
                   [c.name for c in classes], arts, {"seed": seed})


def gen_benchmark(n_domains=3, n_classes=8, n_per_class=150, seed=0, size=IMAGE_SIZE):
    classes = default_classes(n_classes)
    return [gen_domain(d, classes, n_per_class, seed, size) for d in default_domains(n_domains)]


def resize_dataset(dataset, size):
    """Area-downsample images (and majority-vote masks) to ``size`` x ``size``.

    Integer factors use exact block means; anything else goes through PIL box
    filtering.  Artifact masks mark a low-res pixel if any covered pixel was an
    artifact.
    """
    n, h, w = dataset.images.shape[:3]
    if (h, w) == (size, size):
        return dataset
    if h % size == 0 and w % size == 0:
        f = h // size

        def blocks(a):
            return a.reshape(n, size, f, size, f, *a.shape[3:])
        images = np.round(blocks(dataset.images.astype(np.float64)).mean(axis=(2, 4)))
        images = images.astype(np.uint8)
        masks = blocks(dataset.masks).mean(axis=(2, 4)) >= 0.5
        arts = None if dataset.artifact_masks is None else \
            blocks(dataset.artifact_masks).any(axis=(2, 4))
    else:
        images = np.stack([np.asarray(Image.fromarray(im).resize((size, size), Image.BOX))
                           for im in dataset.images])
        masks = np.stack([np.asarray(Image.fromarray(m.astype(np.uint8) * 255)
                                     .resize((size, size), Image.BOX)) >= 128
                          for m in dataset.masks])
        arts = None if dataset.artifact_masks is None else np.stack(
            [np.asarray(Image.fromarray(m.astype(np.uint8) * 255)
                        .resize((size, size), Image.BOX)) > 0 for m in dataset.artifact_masks])
    out = Dataset(images, masks & (~arts if arts is not None else True), dataset.has_mask.copy(),
                  dataset.labels.copy(), dataset.domain, list(dataset.sample_ids),
                  list(dataset.class_names), arts, dict(dataset.meta))
    out.meta["resized_from"] = [int(h), int(w)]
    return out


# ---------------------------------------------------------------- diagnostics

def luminance(images):
    """Rec.601 luma of uint8 or [0,1] float images, on a 0..255 scale."""
    x = np.asarray(images, dtype=np.float64)
    if np.asarray(images).dtype != np.uint8:
        x = x * 255.0
    return x @ LUMA


def grayscale_histogram(dataset, bins=256):
    """Luminance histogram summed over every image of the dataset."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset)
    if len(images) == 0:
        raise DataError("empty dataset")
    counts = np.zeros(bins, dtype=np.int64)
    for lo in range(0, len(images), 64):
        lum = luminance(images[lo:lo + 64])
        idx = np.clip(np.floor(lum / 256.0 * bins).astype(np.int64), 0, bins - 1)
        counts += np.bincount(idx.ravel(), minlength=bins)
    return counts


def histogram_mean(counts):
    """Mean gray level (0..255) implied by histogram bin centres."""
    bins = len(counts)
    centres = (np.arange(bins) + 0.5) * 256.0 / bins
    return float((counts * centres).sum() / counts.sum())


# ---------------------------------------------------------------- file format

def save_dataset(dataset, path):
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    header = {"version": FORMAT_VERSION, "domain": dataset.domain,
              "classes": list(dataset.class_names)}
    (path / "dataset.json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    lines = []
    for i, sid in enumerate(dataset.sample_ids):
        img_rel = f"images/{sid}.png"
        Image.fromarray(dataset.images[i], mode="RGB").save(path / img_rel)
        mask_rel = None
        if dataset.has_mask[i]:
            mask_rel = f"masks/{sid}.png"
            Image.fromarray(dataset.masks[i].astype(np.uint8) * 255, mode="L").save(path / mask_rel)
        label = int(dataset.labels[i])
        lines.append(json.dumps({"id": sid, "label": label,
                                 "class_name": dataset.class_names[label],
                                 "domain": dataset.domain, "image": img_rel,
                                 "mask": mask_rel}, sort_keys=True))
    (path / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return path


def _read_image(path, size, mode):
    img = Image.open(path).convert(mode)
    if size is not None and img.size != (size, size):
        if mode == "L":
            resample = Image.NEAREST
        else:
            resample = Image.BOX if img.size[0] > size else Image.BILINEAR
        img = img.resize((size, size), resample)
    return np.asarray(img)


def load_dataset(path, size=None):
    """Read a dataset directory written by :func:`save_dataset`.

    A directory without ``manifest.jsonl`` is read as ``<class>/<image>`` folders
    (no masks).  ``size`` resizes images that do not already match.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory {path} not found")
    manifest = path / "manifest.jsonl"
    if not manifest.exists():
        return _load_folder_layout(path, size)
    header_file = path / "dataset.json"
    header = json.loads(header_file.read_text()) if header_file.exists() else {}
    classes = list(header.get("classes", []))
    declared = bool(classes)
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"{manifest}:{lineno}: invalid JSON ({exc})") from None
        for key in ("id", "label", "image"):
            if key not in rec:
                raise ParseError(f"{manifest}:{lineno}: missing field '{key}'")
        label = rec["label"]
        if isinstance(label, str):
            if label not in classes:
                if declared:
                    raise ParseError(f"{manifest}:{lineno}: unknown label '{label}'")
                classes.append(label)
            label = classes.index(label)
        elif not isinstance(label, int) or label < 0 or (declared and label >= len(classes)):
            raise ParseError(f"{manifest}:{lineno}: label {label!r} out of range")
        name = rec.get("class_name")
        if declared and name is not None and name not in classes:
            raise ParseError(f"{manifest}:{lineno}: unknown label '{name}'")
        if declared and name is not None and classes.index(name) != label:
            raise ParseError(f"{manifest}:{lineno}: class_name '{name}' disagrees with label {label}")
        if not (path / rec["image"]).exists():
            raise ParseError(f"{manifest}:{lineno}: image file '{rec['image']}' not found")
        mask_rel = rec.get("mask")
        if mask_rel is not None and not (path / mask_rel).exists():
            raise ParseError(f"{manifest}:{lineno}: mask file '{mask_rel}' not found")
        records.append((rec["id"], label, rec.get("domain", header.get("domain", path.name)),
                        rec["image"], mask_rel))
    if not records:
        raise ParseError(f"{manifest}: no samples")
    if not classes:
        classes = [str(i) for i in range(max(r[1] for r in records) + 1)]
    imgs = [_read_image(path / r[3], size, "RGB") for r in records]
    shape = imgs[0].shape
    images = np.stack(imgs).astype(np.uint8)
    masks = np.zeros((len(records),) + shape[:2], dtype=bool)
    has_mask = np.zeros(len(records), dtype=bool)
    for i, r in enumerate(records):
        if r[4] is not None:
            masks[i] = _read_image(path / r[4], size, "L") > 127
            has_mask[i] = True
    return Dataset(images, masks, has_mask, np.array([r[1] for r in records], dtype=np.int64),
                   records[0][2], [r[0] for r in records], classes)


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _load_folder_layout(path, size):
    classes = sorted(p.name for p in path.iterdir() if p.is_dir())
    files = [(f, ci) for ci, c in enumerate(classes)
             for f in sorted((path / c).iterdir()) if f.suffix.lower() in _IMAGE_SUFFIXES]
    if not files:
        raise DataError(f"{path}: no manifest.jsonl and no class folders with images")
    imgs = np.stack([_read_image(f, size, "RGB") for f, _ in files]).astype(np.uint8)
    n = len(files)
    return Dataset(imgs, np.zeros(imgs.shape[:3], dtype=bool), np.zeros(n, dtype=bool),
                   np.array([ci for _, ci in files], dtype=np.int64), path.name,
                   [f"{classes[ci]}/{f.stem}" for f, ci in files], classes)
