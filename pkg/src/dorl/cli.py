"""Command-line entry point: ``dorl <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import cae, classifiers, lora_seg, synthcells
from .errors import ConfigError, DataError, DorlError
from .harness import (DEFAULT_BETAS, DEFAULT_LAMS, ExperimentConfig, canonical_json, load_config,
                      run_ablation, run_pipeline, sweep)
from .vit import PROFILES


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.profile is not None:
        over["profile"] = args.profile
    return cfg.with_(**over) if over else cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- embedding bundles

def _save_bundle(path, ds, e, c):
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "embeddings.npy", e)
    np.save(path / "segmented.npy", c)
    np.save(path / "labels.npy", ds.labels)
    (path / "bundle.json").write_text(json.dumps(
        {"domain": ds.domain, "sample_ids": ds.sample_ids, "class_names": ds.class_names},
        sort_keys=True))


def _load_bundle(path):
    path = Path(path)
    if not (path / "bundle.json").exists():
        raise DataError(f"{path} is not an embedding directory (run 'dorl embed' first)")
    meta = json.loads((path / "bundle.json").read_text())
    return (meta, np.load(path / "embeddings.npy", mmap_mode="r"),
            np.load(path / "segmented.npy", mmap_mode="r"), np.load(path / "labels.npy"))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args)
    sets = synthcells.gen_benchmark(args.domains or cfg.n_domains, args.classes or cfg.n_classes,
                                    args.per_class or cfg.n_per_class, seed=cfg.seed,
                                    size=args.size)
    for d in sets:
        synthcells.save_dataset(d, out / d.domain)
        _log(f"wrote {len(d)} samples to {out / d.domain}")
    return 0


def cmd_train_seg(args):
    cfg = _config(args)
    out = _out(args)
    vit = PROFILES[cfg.profile]
    ds = synthcells.load_dataset(args.data, size=vit.image_size)
    masks = [m if h else None for m, h in zip(ds.masks, ds.has_mask)]
    model = lora_seg.train_seg(list(ds.pixels()), masks, vit,
                               annotated_fraction=cfg.annotated_fraction, epochs=cfg.seg_epochs,
                               lr=cfg.seg_lr, batch_size=cfg.seg_batch_size, seed=cfg.seed,
                               rank=cfg.lora_rank, log=_log)
    path = lora_seg.save_seg(out / "seg.ckpt", model)
    _log(f"saved {path}")
    return 0


def cmd_embed(args):
    out = _out(args)
    model = lora_seg.load_seg(args.seg)
    for data in args.data:
        ds = synthcells.load_dataset(data, size=model.cfg.image_size)
        o = lora_seg.segment(ds.pixels(), model, batch_size=32)
        c = np.where(o.mask[..., None], ds.images, np.uint8(128))
        _save_bundle(out / ds.domain, ds, o.embedding.tokens.data.astype(np.float32), c)
        if ds.has_mask.any():
            dice = np.mean([lora_seg.dice(p, t) for p, t, h in zip(o.mask, ds.masks, ds.has_mask) if h])
            _log(f"{ds.domain}: mean Dice {dice:.4f} over {int(ds.has_mask.sum())} masked samples")
        _log(f"wrote embeddings for {len(ds)} samples to {out / ds.domain}")
    return 0


def cmd_train_cae(args):
    cfg = _config(args)
    if args.variant:
        cfg = cfg.with_(variant=args.variant)
    if cfg.terms is None:
        raise ConfigError("variant M1 has no CAE to train")
    out = _out(args)
    if len(args.embeddings) < 2:
        raise ConfigError("train-cae needs embeddings from at least 2 domains")
    doms = []
    for path in args.embeddings:
        meta, e, c, _ = _load_bundle(path)
        doms.append(cae.CAEDomain(meta["domain"], e, c, meta["sample_ids"]))
    from .harness.pipeline import cae_config
    model = cae.train_cae(doms, cae_config(cfg, cfg.terms), seed=cfg.seed, log=_log)
    path = cae.save_cae(out / "cae.ckpt", model)
    (out / "cae_trace.json").write_text(canonical_json([vars(b) for b in model.trace]))
    _log(f"saved {path}")
    return 0


def cmd_extract(args):
    out = _out(args)
    model = cae.load_cae(args.cae)
    for path in args.embeddings:
        meta, e, c, labels = _load_bundle(path)
        feats = cae.extract_features(e, model)
        n = len(labels)
        fs = cae.FeatureSet(feats, labels, [meta["domain"]] * n, meta["sample_ids"],
                            [meta["domain"]] * n)
        dest = cae.write_features(out / f"{meta['domain']}.features", fs)
        _log(f"wrote {n} x {feats.shape[1]} features to {dest}")
        k = min(args.reconstructions, n)
        if k:
            rdir = out / "reconstructions" / meta["domain"]
            rdir.mkdir(parents=True, exist_ok=True)
            _, h = cae.reconstruct(np.asarray(e[:k]), model, seed=args.seed or 0,
                                   sample_ids=meta["sample_ids"][:k])
            for i in range(k):
                sid = meta["sample_ids"][i]
                Image.fromarray(np.asarray(c[i])).save(rdir / f"{sid}_segmented.png")
                Image.fromarray(np.round(h[i] * 255).astype(np.uint8)).save(rdir / f"{sid}_reconstructed.png")
    return 0


def cmd_classify(args):
    cfg = _config(args)
    out = _out(args)
    train = cae.read_features(args.train)
    model = classifiers.fit(args.algorithm, train.features, train.labels, seed=cfg.seed)
    classifiers.save_model(out / f"{args.algorithm}.model", model)
    summary = {"algorithm": args.algorithm, "train": str(args.train), "accuracy": {}}
    for path in args.test:
        fs = cae.read_features(path)
        pred, scores = classifiers.predict(model, fs.features)
        name = Path(path).stem
        classifiers.write_predictions(out / f"predictions_{name}.csv", fs.sample_ids, fs.labels,
                                      pred, scores)
        summary["accuracy"][name] = classifiers.top1_accuracy(pred, fs.labels)
    (out / "classify.json").write_text(canonical_json(summary))
    print(json.dumps(summary["accuracy"], sort_keys=True))
    return 0


def _print_matrix(report):
    doms = report["domains"]
    for name in report["classifiers"]:
        print(f"{name}: cross-domain {report['cross_domain_average'][name]:.4f}  "
              f"overall {report['overall_average'][name]:.4f}")
        for s in report["train_domains"]:
            cells = report["matrix"][name][s]
            print("  " + s + ": " + "  ".join(f"{t}={cells[t]['mean']:.3f}±{cells[t]['std']:.3f}"
                                            for t in doms))


def cmd_evaluate(args):
    cfg = _config(args)
    if args.variant:
        cfg = cfg.with_(variant=args.variant)
    report = run_pipeline(cfg, _out(args), log=_log)
    _print_matrix(report)
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    variants = args.variants.split(",")
    table = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            rep = run_ablation(cfg.with_(seed=seed), v, out / f"seed{seed}", log=_log)
            table[v].append(rep["mean_cross_domain_average"])
    summary = {"seeds": seeds, "mean_cross_domain_average":
               {v: {"per_seed": vals, "mean": float(np.mean(vals))} for v, vals in table.items()}}
    (out / "ablation_summary.json").write_text(canonical_json(summary))
    for v in variants:
        print(f"{v}: {np.mean(table[v]):.4f}  (" + ", ".join(f"{x:.4f}" for x in table[v]) + ")")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    betas = _floats(args.betas) if args.betas else DEFAULT_BETAS
    lams = _floats(args.lams) if args.lams else DEFAULT_LAMS
    _, best = sweep(cfg, betas, lams, out=_out(args), log=_log)
    print(f"best beta={best['beta']:g} lam={best['lam']:g} "
          f"mean overall accuracy {best['mean_overall_average']:.4f}")
    return 0


def cmd_histogram(args):
    out = _out(args)
    rows = []
    for data in args.data:
        ds = synthcells.load_dataset(data)
        counts = synthcells.grayscale_histogram(ds, bins=args.bins)
        mean = synthcells.histogram_mean(counts)
        rows.append((ds.domain, counts, mean))
        print(f"{ds.domain}: mean gray level {mean:.2f}")
    with open(out / "histogram.csv", "w") as fh:
        fh.write("bin," + ",".join(r[0] for r in rows) + "\n")
        for b in range(args.bins):
            fh.write(f"{b}," + ",".join(str(int(r[1][b])) for r in rows) + "\n")
    return 0


# ---------------------------------------------------------------- parser

def _global_flags(parser, suppress):
    # subcommand copies must not overwrite values given before the subcommand
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=dflt(None), help="global seed (overrides config)")
    parser.add_argument("--profile", choices=sorted(PROFILES), default=dflt(None),
                        help="model profile; desk and full are the user-facing ones")
    parser.add_argument("--config", default=dflt(None), help="flat key=value config file")
    parser.add_argument("--out", default=dflt("runs"), help="output directory")
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), suppress=True)
    p = _global_flags(argparse.ArgumentParser(prog="dorl", description=__doc__.splitlines()[0]),
                      suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write the synthetic multi-domain benchmark")
    sp.add_argument("--domains", type=int, default=None)
    sp.add_argument("--classes", type=int, default=None)
    sp.add_argument("--per-class", type=int, default=None)
    sp.add_argument("--size", type=int, default=synthcells.IMAGE_SIZE)

    sp = add("train-seg", cmd_train_seg, "fine-tune adapters + mask decoder on one dataset")
    sp.add_argument("--data", required=True)

    sp = add("embed", cmd_embed, "embeddings e_i and segmented images c_i for datasets")
    sp.add_argument("--seg", required=True, help="segmentation checkpoint")
    sp.add_argument("--data", nargs="+", required=True)

    sp = add("train-cae", cmd_train_cae, "train the cross-domain autoencoder")
    sp.add_argument("--embeddings", nargs="+", required=True, help="embedding directories")
    sp.add_argument("--variant", choices=["M2", "M3", "M4", "M5", "full"], default=None)

    sp = add("extract", cmd_extract, "domain-invariant features from a trained CAE")
    sp.add_argument("--cae", required=True)
    sp.add_argument("--embeddings", nargs="+", required=True)
    sp.add_argument("--reconstructions", type=int, default=0,
                    help="write this many segmented/reconstructed image pairs per domain")

    sp = add("classify", cmd_classify, "fit one classifier on features, score test sets")
    sp.add_argument("--algorithm", choices=sorted(classifiers.ALGORITHMS), required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", nargs="*", default=[])

    sp = add("evaluate", cmd_evaluate, "full pipeline and cross-domain report")
    sp.add_argument("--variant", choices=["M1", "M2", "M3", "M4", "M5", "full"], default=None)

    sp = add("ablate", cmd_ablate, "ablation variants M1-M5")
    sp.add_argument("--variants", default="M1,M2,M3,M4,M5")
    sp.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")

    sp = add("sweep", cmd_sweep, "beta/lambda grid sweep")
    sp.add_argument("--betas", default=None)
    sp.add_argument("--lams", default=None)

    sp = add("histogram", cmd_histogram, "grayscale histograms of datasets")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--bins", type=int, default=256)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DorlError as exc:
        print(f"dorl {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
