"""Experiment configuration and its flat ``key = value`` file format.

A config file starts with the header line ``dorl-config 1``.  Blank lines and
``#`` comments are ignored.  Lists are comma separated; per-domain dataset
paths use ``data.<domain> = <dir>``.  Unknown keys are an error so typos do not
silently fall back to defaults.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..vit import PROFILES

HEADER = "dorl-config"
VERSION = 1
VARIANTS = ("M1", "M2", "M3", "M4", "M5", "full")
VARIANT_TERMS = {
    "M1": None,
    "M2": ("rec",),
    "M3": ("rec", "mmd"),
    "M4": ("rec", "ssim"),
    "M5": ("ssim", "rec", "mmd"),
    "full": ("ssim", "rec", "mmd"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    data: dict = field(default_factory=dict)      # domain name -> dataset dir
    train_domains: tuple = ()                     # empty: every domain
    # synthetic benchmark, used when ``data`` is empty
    n_domains: int = 3
    n_classes: int = 8
    n_per_class: int = 150
    # representation learning
    annotated_fraction: float = 0.01
    seg_epochs: int = 85
    seg_lr: float = 3e-3
    seg_batch_size: int = 1
    lora_rank: int = 4
    beta: float = 0.5
    lam: float = 2.0
    mask_ratio: float = 0.75
    cae_epochs: int = 10
    cae_lr: float = 5e-4
    cae_batch_size: int = 32
    enc_depth: int = 0                            # 0: profile default
    dec_depth: int = 0
    variant: str = "full"
    # protocol
    test_fraction: float = 0.2
    folds: int = 5
    classifiers: tuple = ("rf", "gbt", "svm_poly", "svm_linear", "logreg", "mlp")
    check_leakage: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        from ..classifiers import ALGORITHMS
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile '{self.profile}' (choose from {', '.join(PROFILES)})")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (choose from {', '.join(VARIANTS)})")
        for name in self.classifiers:
            if name not in ALGORITHMS:
                raise ConfigError(f"unknown classifier '{name}'")
        if not self.classifiers:
            raise ConfigError("classifier list is empty")
        n_dom = len(self.data) if self.data else self.n_domains
        if n_dom < 2:
            raise ConfigError("at least 2 domains are needed for cross-domain training")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lam must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0.0 < self.annotated_fraction <= 1.0:
            raise ConfigError("annotated_fraction must lie in (0, 1]")
        for k in ("seg_epochs", "cae_epochs", "seg_batch_size", "cae_batch_size", "n_per_class"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")

    @property
    def domain_names(self):
        if self.data:
            return list(self.data)
        from ..synthcells import default_domains
        return [d.domain_id for d in default_domains(self.n_domains)]

    @property
    def sources(self):
        names = self.domain_names
        if not self.train_domains:
            return names
        for d in self.train_domains:
            if d not in names:
                raise ConfigError(f"train domain '{d}' is not among {names}")
        return list(self.train_domains)

    @property
    def terms(self):
        return VARIANT_TERMS[self.variant]

    def with_(self, **kw):
        return replace(self, **kw)

    def snapshot(self):
        out = asdict(self)
        out["data"] = {k: str(v) for k, v in sorted(self.data.items())}
        out["train_domains"] = list(self.train_domains)
        out["classifiers"] = list(self.classifiers)
        return out


def _coerce(name, kind, raw):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for '{name}': {raw!r}") from None


_TYPES = {"profile": str, "seed": int, "train_domains": tuple, "n_domains": int,
          "n_classes": int, "n_per_class": int, "annotated_fraction": float,
          "seg_epochs": int, "seg_lr": float, "seg_batch_size": int, "lora_rank": int,
          "beta": float, "lam": float, "mask_ratio": float, "cae_epochs": int,
          "cae_lr": float, "cae_batch_size": int, "enc_depth": int, "dec_depth": int,
          "variant": str, "test_fraction": float, "folds": int, "classifiers": tuple,
          "check_leakage": bool}
assert set(_TYPES) | {"data"} == {f.name for f in fields(ExperimentConfig)}


def parse_config(text, source="<config>"):
    lines = text.splitlines()
    body = [(i, ln.strip()) for i, ln in enumerate(lines, 1)
            if ln.strip() and not ln.strip().startswith("#")]
    if not body:
        raise ConfigError(f"{source}: empty config (expected '{HEADER} {VERSION}' header)")
    lineno, first = body[0]
    parts = first.split()
    if len(parts) != 2 or parts[0] != HEADER:
        raise ConfigError(f"{source}:{lineno}: expected header '{HEADER} {VERSION}'")
    if parts[1] != str(VERSION):
        raise ConfigError(f"{source}:{lineno}: unsupported config version {parts[1]}")
    kw, data = {}, {}
    for lineno, ln in body[1:]:
        if "=" not in ln:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in ln.split("=", 1))
        if key.startswith("data."):
            data[key[5:]] = val
        elif key in _TYPES:
            kw[key] = _coerce(key, _TYPES[key], val)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
    if data:
        kw["data"] = data
    return ExperimentConfig(**kw)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg):
    out = [f"{HEADER} {VERSION}"]
    for name, kind in _TYPES.items():
        val = getattr(cfg, name)
        if kind is tuple:
            val = ",".join(val)
        elif kind is bool:
            val = "true" if val else "false"
        out.append(f"{name} = {val}")
    for dom, path in cfg.data.items():
        out.append(f"data.{dom} = {path}")
    return "\n".join(out) + "\n"
