"""Staged experiment pipeline: data -> seg -> embed -> cae -> features -> classify -> report.

Every stage writes its artifacts into ``<out>/cache/<stage>-<key>/`` and marks
completion with a ``DONE`` file; the key hashes exactly the configuration
fields the stage depends on, so reruns reuse what is still valid and a stage
that failed midway is redone from scratch.
"""
import hashlib
import json
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import cae as cae_mod
from .. import classifiers
from .. import lora_seg
from .. import synthcells
from ..core.rng import derive_seed
from ..errors import ConfigError, ContractError, DataError, DorlError, StageError
from ..vit import PROFILES
from .config import ExperimentConfig
from .splits import stratified_kfold, stratified_split

REPORT_FORMAT = "dorl-report"
REPORT_VERSION = 1


def _key(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def canonical_json(obj):
    """Sorted keys, no whitespace, shortest round-trip float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


class Stage:
    """One cached unit of work; ``build(fn)`` runs ``fn`` only when no finished copy exists."""

    def __init__(self, root, name, key, log=None):
        self.name = name
        self.dir = Path(root) / "cache" / f"{name}-{key}"
        self.log = log

    @property
    def done(self):
        return (self.dir / "DONE").exists()

    def build(self, fn):
        if self.done:
            if self.log:
                self.log(f"[{self.name}] cached")
            return
        if self.dir.exists():
            shutil.rmtree(self.dir)
        tmp = self.dir.with_name(self.dir.name + ".partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        t0 = time.time()
        try:
            fn(tmp)
        except DorlError as exc:
            raise StageError(self.name, exc) from exc
        except (ValueError, OSError, FloatingPointError, MemoryError) as exc:
            raise StageError(self.name, exc) from exc
        (tmp / "DONE").write_text(f"{time.time() - t0:.3f}\n")
        tmp.rename(self.dir)
        if self.log:
            self.log(f"[{self.name}] built in {time.time() - t0:.1f}s")


# ---------------------------------------------------------------- data

def _save_arrays(path, ds):
    np.save(path / "images.npy", ds.images)
    np.save(path / "masks.npy", ds.masks)
    np.save(path / "has_mask.npy", ds.has_mask)
    np.save(path / "labels.npy", ds.labels)
    (path / "meta.json").write_text(json.dumps(
        {"domain": ds.domain, "sample_ids": ds.sample_ids, "class_names": ds.class_names,
         "meta": ds.meta}, sort_keys=True))


def _load_arrays(path):
    meta = json.loads((path / "meta.json").read_text())
    return synthcells.Dataset(np.load(path / "images.npy"), np.load(path / "masks.npy"),
                              np.load(path / "has_mask.npy"), np.load(path / "labels.npy"),
                              meta["domain"], meta["sample_ids"], meta["class_names"],
                              None, meta["meta"])


def _harmonise(datasets):
    """Restrict every dataset to the class names all of them share, with shared ids."""
    names = [list(d.class_names) for d in datasets]
    if all(n == names[0] for n in names):
        return datasets, names[0], False
    common = [c for c in names[0] if all(c in n for n in names[1:])]
    if len(common) < 2:
        raise DataError("datasets share fewer than 2 class names")
    out = []
    for d in datasets:
        remap = {d.class_names.index(c): i for i, c in enumerate(common)}
        keep = np.array([int(y) in remap for y in d.labels])
        sub = d.subset(np.flatnonzero(keep))
        sub.labels = np.array([remap[int(y)] for y in sub.labels], dtype=np.int64)
        sub.class_names = list(common)
        out.append(sub)
    return out, common, True


def load_datasets(cfg, out, log=None):
    vit = PROFILES[cfg.profile]
    if cfg.data:
        key = _key("data", cfg.data, vit.image_size)
    else:
        key = _key("synthetic", cfg.n_domains, cfg.n_classes, cfg.n_per_class, cfg.seed,
                   vit.image_size)
    st = Stage(out, "data", key, log)

    def build(tmp):
        if cfg.data:
            sets = [synthcells.load_dataset(p, size=vit.image_size) for p in cfg.data.values()]
            for name, d in zip(cfg.data, sets):
                d.domain = name
        else:
            sets = synthcells.gen_benchmark(cfg.n_domains, cfg.n_classes, cfg.n_per_class,
                                            seed=cfg.seed)
            sets = [synthcells.resize_dataset(d, vit.image_size) for d in sets]
        for i, d in enumerate(sets):
            sub = tmp / f"{i:02d}"
            sub.mkdir()
            _save_arrays(sub, d)

    st.build(build)
    sets = [_load_arrays(p) for p in sorted(st.dir.iterdir()) if p.is_dir()]
    return _harmonise(sets)


# ---------------------------------------------------------------- representation stages

def _seg_stage(cfg, out, source, train_ds, data_key, log):
    vit = PROFILES[cfg.profile]
    key = _key("seg", data_key, source, cfg.seed, asdict(vit), cfg.annotated_fraction,
               cfg.seg_epochs, cfg.seg_lr, cfg.seg_batch_size, cfg.lora_rank)
    st = Stage(out, f"seg-{source}", key, log)

    def build(tmp):
        masks = [m if h else None for m, h in zip(train_ds.masks, train_ds.has_mask)]
        model = lora_seg.train_seg(list(train_ds.pixels()), masks, vit,
                                   annotated_fraction=cfg.annotated_fraction,
                                   epochs=cfg.seg_epochs, lr=cfg.seg_lr,
                                   batch_size=cfg.seg_batch_size, seed=cfg.seed,
                                   rank=cfg.lora_rank)
        lora_seg.save_seg(tmp / "seg.ckpt", model)

    st.build(build)
    return st, key


def _embed_stage(cfg, out, source, seg_st, seg_key, datasets, log):
    st = Stage(out, f"embed-{source}", _key("embed", seg_key), log)

    def build(tmp):
        model = lora_seg.load_seg(seg_st.dir / "seg.ckpt")
        for i, d in enumerate(datasets):
            e = np.empty((len(d),) + (model.cfg.num_tokens, model.cfg.embed_dim), np.float32)
            c = np.empty_like(d.images)
            for lo in range(0, len(d), 64):
                o = lora_seg.segment(d.pixels(slice(lo, lo + 64)), model, batch_size=64)
                e[lo:lo + 64] = o.embedding.tokens.data
                c[lo:lo + 64] = np.where(o.mask[..., None], d.images[lo:lo + 64], np.uint8(128))
            np.save(tmp / f"e{i:02d}.npy", e)
            np.save(tmp / f"c{i:02d}.npy", c)

    st.build(build)
    E = [np.load(st.dir / f"e{i:02d}.npy", mmap_mode="r") for i in range(len(datasets))]
    C = [np.load(st.dir / f"c{i:02d}.npy", mmap_mode="r") for i in range(len(datasets))]
    return E, C, st


def cae_config(cfg, terms):
    vit = PROFILES[cfg.profile]
    enc, dec = cae_mod.PROFILE_DEPTHS[cfg.profile]
    return cae_mod.CAEConfig.from_vit(
        vit, enc_depth=cfg.enc_depth or enc, dec_depth=cfg.dec_depth or dec, terms=terms,
        mask_ratio=cfg.mask_ratio, beta=cfg.beta, lam=cfg.lam, epochs=cfg.cae_epochs,
        batch_size=cfg.cae_batch_size, lr=cfg.cae_lr)


def _cae_stage(cfg, out, source, s_idx, train_idx, datasets, E, C, embed_st, log):
    ccfg = cae_config(cfg, cfg.terms)
    key = _key("cae", embed_st.dir.name, asdict(ccfg), cfg.seed, train_idx.tolist())
    st = Stage(out, f"cae-{source}", key, log)

    def build(tmp):
        doms = []
        for i, d in enumerate(datasets):
            idx = train_idx if i == s_idx else np.arange(len(d))
            doms.append(cae_mod.CAEDomain(d.domain, E[i][idx], C[i][idx],
                                          [d.sample_ids[j] for j in idx]))
        model = cae_mod.train_cae(doms, ccfg, seed=cfg.seed, log=log)
        cae_mod.save_cae(tmp / "cae.ckpt", model)
        (tmp / "trace.json").write_text(json.dumps(
            [asdict(b) for b in model.trace], sort_keys=True))

    st.build(build)
    return st


def _features_stage(cfg, out, source, datasets, E, upstream, log):
    st = Stage(out, f"features-{source}", _key("features", upstream.dir.name, cfg.variant == "M1"),
               log)

    def build(tmp):
        model = None if cfg.variant == "M1" else cae_mod.load_cae(upstream.dir / "cae.ckpt")
        for i, d in enumerate(datasets):
            if model is None:
                feats = np.concatenate([np.asarray(E[i][lo:lo + 256]).mean(axis=1)
                                        for lo in range(0, len(d), 256)]).astype(np.float32)
            else:
                feats = cae_mod.extract_features(E[i], model)
            fs = cae_mod.FeatureSet(feats, d.labels, [d.meta.get("dataset_id", d.domain)] * len(d),
                                    list(d.sample_ids), [d.domain] * len(d))
            cae_mod.write_features(tmp / f"features{i:02d}.bin", fs)

    st.build(build)
    return [cae_mod.read_features(st.dir / f"features{i:02d}.bin") for i in range(len(datasets))]


# ---------------------------------------------------------------- classification

def check_no_leakage(fit_ids, held_out_ids):
    clash = set(fit_ids) & set(held_out_ids)
    if clash:
        raise ContractError(f"{len(clash)} held-out sample ids reached a classifier fit, "
                            f"e.g. {sorted(clash)[0]}")


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "folds": [float(x) for x in v]}


def classify_source(cfg, feats, s_idx, train_idx, test_idx, log=None):
    """Per-fold fits on the source training split; accuracies on every evaluation set.

    Returns {classifier: {"cells": {domain: [acc per fold]}, "validation": [...]}}.
    """
    src = feats[s_idx]
    folds = stratified_kfold(src.labels[train_idx], cfg.folds, seed=cfg.seed)
    n_classes = int(max(int(f.labels.max()) for f in feats) + 1)
    results = {}
    for name in cfg.classifiers:
        cells = {f.domains[0]: [] for f in feats}
        val_acc = []
        for k, (fit_part, val_part) in enumerate(folds):
            fit_idx, val_idx = train_idx[fit_part], train_idx[val_part]
            if cfg.check_leakage:
                fit_ids = [src.sample_ids[i] for i in fit_idx]
                check_no_leakage(fit_ids, [src.sample_ids[i] for i in test_idx])
                check_no_leakage(fit_ids, [src.sample_ids[i] for i in val_idx])
                for j, f in enumerate(feats):
                    if j != s_idx:
                        check_no_leakage(fit_ids, f.sample_ids)
            model = classifiers.fit(name, src.features[fit_idx], src.labels[fit_idx],
                                    seed=derive_seed(cfg.seed, "fold", k), n_classes=n_classes)
            val_acc.append(classifiers.top1_accuracy(model.predict(src.features[val_idx]),
                                                     src.labels[val_idx]))
            for j, f in enumerate(feats):
                X, y = (src.features[test_idx], src.labels[test_idx]) if j == s_idx \
                    else (f.features, f.labels)
                cells[f.domains[0]].append(classifiers.top1_accuracy(model.predict(X), y))
        results[name] = {"cells": cells, "validation": val_acc}
        if log:
            log(f"  {name}: " + " ".join(f"{d}={np.mean(v):.3f}" for d, v in cells.items()))
    return results


def _assemble(cfg, domains, sources, per_source, class_names, intersected):
    matrix, validation, cross, overall = {}, {}, {}, {}
    for name in cfg.classifiers:
        matrix[name] = {s: {t: _summary(per_source[s][name]["cells"][t]) for t in domains}
                        for s in sources}
        validation[name] = {s: _summary(per_source[s][name]["validation"]) for s in sources}
        off = [matrix[name][s][t]["mean"] for s in sources for t in domains if t != s]
        every = [matrix[name][s][t]["mean"] for s in sources for t in domains]
        cross[name] = float(np.mean(off)) if off else None
        overall[name] = float(np.mean(every))
    cross_vals = [v for v in cross.values() if v is not None]
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "domains": list(domains),
        "train_domains": list(sources),
        "classifiers": list(cfg.classifiers),
        "class_names": list(class_names),
        "label_space": "intersection" if intersected else "shared",
        "matrix": matrix,
        "validation": validation,
        "cross_domain_average": cross,
        "overall_average": overall,
        "mean_cross_domain_average": float(np.mean(cross_vals)) if cross_vals else None,
        "mean_overall_average": float(np.mean(list(overall.values()))),
    }


def recompute_aggregates(report):
    """Rebuild every aggregate from the per-fold raw accuracies (for audits)."""
    out = {"cross_domain_average": {}, "overall_average": {}}
    for name, rows in report["matrix"].items():
        off, every = [], []
        for s, cols in rows.items():
            for t, cell in cols.items():
                m = float(np.mean(cell["folds"]))
                every.append(m)
                if s != t:
                    off.append(m)
        out["cross_domain_average"][name] = float(np.mean(off)) if off else None
        out["overall_average"][name] = float(np.mean(every))
    return out


def write_report(report, rep_dir):
    rep_dir = Path(rep_dir)
    rep_dir.mkdir(parents=True, exist_ok=True)
    path = rep_dir / "report.json"
    path.write_text(canonical_json(report))
    for name, rows in report["matrix"].items():
        lines = ["train\\test," + ",".join(report["domains"])]
        for s in report["train_domains"]:
            lines.append(s + "," + ",".join(f"{rows[s][t]['mean']:.6f}" for t in report["domains"]))
        (rep_dir / f"matrix_{name}.csv").write_text("\n".join(lines) + "\n")
    return path


def run_pipeline(cfg: ExperimentConfig, out, log=None, write=True, report_dir=None):
    """Run (or resume) every stage for ``cfg`` and return the report dict.

    Stage artifacts live under ``out/cache``; the report goes to ``report_dir``
    (default ``out/report``).
    """
    out = Path(out)
    t0 = time.time()
    datasets, class_names, intersected = load_datasets(cfg, out, log)
    data_key = _key("data", [d.domain for d in datasets], [d.sample_ids[:3] for d in datasets],
                    cfg.data or (cfg.n_domains, cfg.n_classes, cfg.n_per_class, cfg.seed),
                    PROFILES[cfg.profile].image_size)
    domains = [d.domain for d in datasets]
    sources = list(cfg.train_domains) or domains
    for s in sources:
        if s not in domains:
            raise StageError("data", DataError(f"train domain '{s}' not among {domains}"))
    per_source = {}
    for source in sources:
        s_idx = domains.index(source)
        train_idx, test_idx = stratified_split(datasets[s_idx], cfg.test_fraction, seed=cfg.seed)
        if log:
            log(f"source {source}: {len(train_idx)} train / {len(test_idx)} hold-out")
        seg_st, seg_key = _seg_stage(cfg, out, source, datasets[s_idx].subset(train_idx),
                                     data_key, log)
        E, C, embed_st = _embed_stage(cfg, out, source, seg_st, seg_key, datasets, log)
        upstream = embed_st if cfg.variant == "M1" else \
            _cae_stage(cfg, out, source, s_idx, train_idx, datasets, E, C, embed_st, log)
        feats = _features_stage(cfg, out, source, datasets, E, upstream, log)
        try:
            per_source[source] = classify_source(cfg, feats, s_idx, train_idx, test_idx, log)
        except DorlError as exc:
            raise StageError(f"classify-{source}", exc) from exc
    report = _assemble(cfg, domains, sources, per_source, class_names, intersected)
    if write:
        rep_dir = Path(report_dir) if report_dir else out / "report"
        write_report(report, rep_dir)
        (rep_dir / "run_meta.json").write_text(json.dumps(
            {"wall_clock_seconds": round(time.time() - t0, 3)}, sort_keys=True) + "\n")
    return report


def run_ablation(cfg, variant, out, log=None, write=True):
    """One ablation variant: M1 (raw embedding, no CAE) .. M5 (full objective).

    Variants share the data/seg/embed caches; reports go to ``out/ablation/<variant>``.
    """
    if variant not in ("M1", "M2", "M3", "M4", "M5"):
        raise ConfigError(f"unknown ablation variant '{variant}'")
    cfg = cfg.with_(variant=variant)
    out = Path(out)
    return run_pipeline(cfg, out, log=log, write=write, report_dir=out / "ablation" / variant)
