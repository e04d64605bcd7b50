"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``[acceptance] criterion N ...: PASS|FAIL`` line straight
to the terminal (bypassing capture) before asserting.  The desk segmentation
runs (criteria 2 and 5) and the bench ablation (criterion 6) dominate the
runtime: roughly 15 and 50 minutes on one CPU core.
"""
import json
import sys
import time

import numpy as np
import pytest

from dorl import cae, classifiers, cli, lora_seg, synthcells
from dorl.core.gradcheck import REGISTERED_OPS, grad_check
from dorl.harness import ExperimentConfig, run_ablation, stratified_kfold, stratified_split
from dorl.vit import PROFILES
from oracles import (TINY_CAE, XOR4_X, XOR4_Y, composed_loss_gradcheck, encoder_flops,
                     linear_separator_exists, separable_blobs, xor_grid)

SEEDS = (0, 1, 2)
# classifiers averaged in the ablation; the tree ensembles and the kernel SVM
# would push one seed past the 30 minute budget on a single core
ABLATION_CLASSIFIERS = ("logreg", "svm_linear", "mlp")
VARIANTS = ("M1", "M2", "M3", "M4", "M5")


def verdict(capsys, n, name, ok, detail):
    with capsys.disabled():
        sys.stdout.write(f"\n[acceptance] criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})\n")
        sys.stdout.flush()
    assert ok, f"criterion {n} ({name}) failed: {detail}"


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.process_time()
    worst_op, worst = None, 0.0
    for op in REGISTERED_OPS:
        for shape in ((3,), (2, 4), (3, 2, 3)):
            if op in ("matmul", "transpose") and len(shape) == 1:
                shape = (2, 3)
            if op == "cross_entropy":
                shape = (3, 4)
            err = grad_check(op, shape, seed=len(shape)).max_rel_err
            if err >= worst:
                worst_op, worst = op, err
    composed = max(composed_loss_gradcheck(seed=s) for s in range(3))
    cpu = time.process_time() - t0
    ok = worst <= 1e-4 and composed <= 1e-3 and cpu < 120
    verdict(capsys, 1, "gradient fidelity", ok,
            f"{len(REGISTERED_OPS)} ops, worst rel err {worst:.2e} ({worst_op}) <= 1e-4; "
            f"composed CAE loss {composed:.2e} <= 1e-3; {cpu:.1f}s CPU < 120s")


# ---------------------------------------------------------------- 2 and 5

@pytest.fixture(scope="module")
def desk_seg_runs():
    """Three full desk segmentation runs: 1% of 1200 images annotated, 85 epochs."""
    cfg = PROFILES["desk"]
    runs = []
    for seed in SEEDS:
        train = synthcells.gen_benchmark(n_per_class=50, seed=seed)
        held = synthcells.gen_benchmark(n_per_class=10, seed=10_000 + seed)
        images = np.concatenate([d.pixels() for d in train])
        masks = np.concatenate([d.masks for d in train])
        t0 = time.perf_counter()
        model = lora_seg.init_seg_model(cfg, seed)
        before = model.frozen_snapshot()
        lora_seg.train_seg(list(images), list(masks), cfg, annotated_fraction=0.01, epochs=85,
                           seed=seed, model=model)
        after = model.frozen_snapshot()
        dices = []
        for d in held:
            out = lora_seg.segment(d.pixels(), model)
            dices.extend(lora_seg.dice(p, t) for p, t in zip(out.mask, d.masks))
        seconds = time.perf_counter() - t0
        frozen_same = before.keys() == after.keys() and all(
            before[k].tobytes() == after[k].tobytes() for k in before)
        runs.append({"seed": seed, "dice": float(np.mean(dices)), "seconds": seconds,
                     "frozen_same": frozen_same, "n_frozen": len(before),
                     "annotated": lora_seg.annotated_count(len(images), 0.01)})
    return runs


def test_criterion_2_lora_freeze_contract(capsys, desk_seg_runs):
    cfg = PROFILES["desk"]
    fresh = lora_seg.init_seg_model(cfg, seed=7)
    x = synthcells.gen_benchmark(n_domains=1, n_classes=4, n_per_class=1, seed=5)[0].pixels()
    adapted = lora_seg.segment(x, fresh).embedding.tokens.data
    frozen = lora_seg.backbone_embedding(x, fresh)
    bit_identical = adapted.dtype == frozen.dtype and adapted.tobytes() == frozen.tobytes()
    untouched = all(r["frozen_same"] for r in desk_seg_runs)
    ok = bit_identical and untouched
    verdict(capsys, 2, "LoRA/freeze contract", ok,
            f"frozen bytes identical after {len(desk_seg_runs)} desk runs: {untouched} "
            f"({desk_seg_runs[0]['n_frozen']} tensors); fresh-adapter embedding bit-identical: "
            f"{bit_identical}")


def test_criterion_5_desk_segmentation(capsys, desk_seg_runs):
    dice = [r["dice"] for r in desk_seg_runs]
    secs = [r["seconds"] for r in desk_seg_runs]
    ok = float(np.mean(dice)) >= 0.85 and max(secs) <= 600
    verdict(capsys, 5, "desk segmentation", ok,
            f"mean Dice {np.mean(dice):.4f} >= 0.85 over seeds {list(SEEDS)} "
            f"(per seed {', '.join(f'{d:.4f}' for d in dice)}; "
            f"{desk_seg_runs[0]['annotated']} annotated images); "
            f"slowest run {max(secs):.0f}s <= 600s")


# ---------------------------------------------------------------- 3

def test_criterion_3_loss_identities(capsys):
    g = np.random.default_rng(0)
    X = g.standard_normal((32, 64))
    model = cae.init_cae(TINY_CAE, 0, dtype=np.float64)
    E = g.standard_normal((8, TINY_CAE.num_tokens, TINY_CAE.embed_dim))
    mmd = max(float(cae.loss_mmd(X, X).data), float(cae.loss_mmd(E, E, model.params).data))
    img = g.uniform(size=(4, 56, 56, 3))
    ssim = float(cae.loss_ssim(img, img).data)
    rec = float(cae.loss_rec(E, E).data)
    doms = [cae.CAEDomain(n, (g.standard_normal((12, 4, 8)) + k).astype(np.float32),
                          g.integers(0, 256, size=(12, 8, 8, 3), dtype=np.uint8),
                          [f"{n}{i}" for i in range(12)])
            for k, n in enumerate("abc")]
    trained = cae.train_cae(doms, cae.with_terms(TINY_CAE, cae.TERMS), seed=0)
    gap = max(abs(b.total - (b.l_ssim + b.lam * (b.beta * b.l_rec + b.l_mmd)))
              for b in trained.steps)
    example = cae.total_loss(0.4, 0.2, 0.1, beta=0.5, lam=2.0).total
    ok = mmd <= 1e-12 and ssim <= 1e-9 and rec == 0.0 and gap <= 1e-12 and example == 0.8
    verdict(capsys, 3, "loss identities", ok,
            f"l_mmd(X,X)={mmd:.1e}; loss_ssim(x,x)={ssim:.1e}; loss_rec(e,e)={rec}; "
            f"max |total - composition| over {len(trained.steps)} steps {gap:.1e}; "
            f"(0.4,0.2,0.1,0.5,2.0) -> {example!r}")


# ---------------------------------------------------------------- 4

def test_criterion_4_masking_contract(capsys):
    e = np.zeros((16, 196, 1), dtype=np.float32)
    counts = set()
    for draw in range(50):
        b = cae.mask_patches(e, 0.75, draw, [f"s{i}" for i in range(16)], epoch=draw)
        counts.add((b.masked_idx.shape[1], b.visible_idx.shape[1]))
        for v, m in zip(b.visible_idx, b.masked_idx):
            assert len(np.union1d(v, m)) == 196
    desk = cae.CAEConfig()
    pts = [encoder_flops(desk, r, batch=1) for r in (0.75, 0.5, 0.25)]
    (v1, f1), (v2, f2), (v3, f3) = pts
    a, b = np.linalg.solve([[v1, v1 * v1], [v2, v2 * v2]], [f1, f2])
    fits = abs(a * v3 + b * v3 * v3 - f3) <= 1e-9 * f3
    ok = counts == {(147, 49)} and fits and v1 == 49
    verdict(capsys, 4, "masking contract", ok,
            f"masked/visible counts over 800 draws {sorted(counts)}; desk encoder flops follow "
            f"a*V + b*V^2 exactly with V in {[v1, v2, v3]}: {fits}")


# ---------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    table, seconds = {v: [] for v in VARIANTS}, []
    for seed in SEEDS:
        cfg = ExperimentConfig(profile="bench", seed=seed, classifiers=ABLATION_CLASSIFIERS)
        t0 = time.perf_counter()
        for v in VARIANTS:
            rep = run_ablation(cfg, v, root / f"seed{seed}")
            table[v].append(rep["mean_cross_domain_average"])
        seconds.append(time.perf_counter() - t0)
    return table, seconds


def test_criterion_6_adaptation_trend(capsys, ablation):
    table, seconds = ablation
    mean = {v: float(np.mean(vals)) for v, vals in table.items()}
    ok = mean["M5"] - mean["M1"] >= 0.05 and mean["M5"] >= mean["M2"] and max(seconds) <= 1800
    verdict(capsys, 6, "adaptation trend", ok,
            "mean cross-domain accuracy " + ", ".join(f"{v} {mean[v]:.4f}" for v in VARIANTS)
            + f"; M5 - M1 = {100 * (mean['M5'] - mean['M1']):.2f}pp >= 5pp; M5 >= M2; "
            f"slowest seed {max(seconds) / 60:.1f} min <= 30 min")


# ---------------------------------------------------------------- 7

def test_criterion_7_protocol_determinism(capsys, tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("dorl-config 1\nprofile = tiny\nn_classes = 4\nn_per_class = 15\n"
                        "seg_epochs = 3\ncae_epochs = 2\ncae_batch_size = 8\n"
                        "classifiers = logreg,svm_linear,rf\n")
    reports = []
    for run in ("a", "b"):
        assert cli.main(["evaluate", "--config", str(cfg_file), "--seed", "3",
                         "--out", str(tmp_path / run)]) == 0
        reports.append((tmp_path / run / "report" / "report.json").read_bytes())
    identical = reports[0] == reports[1]
    json.loads(reports[0])

    g = np.random.default_rng(2024)
    bad = 0
    for _ in range(100):
        counts = g.integers(5, 40, size=g.integers(2, 9))
        y = g.permutation(np.repeat(np.arange(len(counts)), counts))
        seed = int(g.integers(2**31 - 1))
        tr, te = stratified_split(y, 0.2, seed)
        ok_split = (len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == len(y)
                    and all(abs((y[te] == c).sum() - 0.2 * n) <= 0.5 + 1e-9
                            for c, n in enumerate(counts)))
        folds = stratified_kfold(y, 5, seed)
        vals = [v for _, v in folds]
        ok_folds = (np.array_equal(np.sort(np.concatenate(vals)), np.arange(len(y)))
                    and all(len(np.intersect1d(t, v)) == 0 for t, v in folds)
                    and all(np.ptp([(y[v] == c).sum() for v in vals]) <= 1
                            for c in range(len(counts))))
        bad += not (ok_split and ok_folds)
    ok = identical and bad == 0
    verdict(capsys, 7, "protocol determinism", ok,
            f"two cold evaluate runs byte-identical: {identical} ({len(reports[0])} bytes); "
            f"partition/stratification violations on 100 random datasets: {bad}")


# ---------------------------------------------------------------- 8

def test_criterion_8_classifier_oracles(capsys):
    X, y = separable_blobs()
    lin = {a: classifiers.top1_accuracy(classifiers.fit(a, X, y).predict(X), y)
           for a in ("logreg", "svm_linear")}
    Xtr, ytr = xor_grid(0)
    Xte, yte = xor_grid(1)
    nonlin = {a: classifiers.top1_accuracy(classifiers.fit(a, Xtr, ytr).predict(Xte), yte)
              for a in ("rf", "mlp", "gbt")}
    poly = classifiers.fit("svm_poly", XOR4_X, XOR4_Y, degree=2)
    poly_acc = classifiers.top1_accuracy(poly.predict(XOR4_X), XOR4_Y)
    lsvm = classifiers.fit("svm_linear", XOR4_X, XOR4_Y)
    lsvm_acc = classifiers.top1_accuracy(lsvm.predict(XOR4_X), XOR4_Y)
    no_separator = not linear_separator_exists(XOR4_X, XOR4_Y)
    ok = (all(v == 1.0 for v in lin.values()) and all(v >= 0.95 for v in nonlin.values())
          and poly_acc == 1.0 and no_separator and lsvm_acc < 1.0)
    verdict(capsys, 8, "classifier oracles", ok,
            f"blobs train acc {lin}; XOR grid held-out {nonlin} (>= 0.95); poly-SVM on 4-point "
            f"XOR {poly_acc}; brute force finds no linear separator: {no_separator}; "
            f"linear SVM {lsvm_acc}")


# ---------------------------------------------------------------- 9

def test_criterion_9_benchmark_validity(capsys):
    sets = synthcells.gen_benchmark()
    means = {d.domain: synthcells.histogram_mean(synthcells.grayscale_histogram(d)) for d in sets}
    names = list(means)
    gap = abs(means[names[0]] - means[names[1]])
    overlap = sum(int(np.logical_and(d.artifact_masks, d.masks).sum()) for d in sets)
    pixels = sum(d.masks.size for d in sets)
    ok = gap > 5 and overlap == 0
    verdict(capsys, 9, "benchmark validity", ok,
            "histogram means " + ", ".join(f"{k} {v:.2f}" for k, v in means.items())
            + f"; |{names[0]} - {names[1]}| = {gap:.2f} > 5; artifact/mask overlap {overlap} "
            f"of {pixels} pixels checked")
