import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dorl.errors import ConfigError, ContractError, StageError, StratificationError
from dorl.harness import (ExperimentConfig, check_no_leakage, dump_config, load_config,
                          parse_config, recompute_aggregates, run_ablation, run_pipeline,
                          stratified_kfold, stratified_split, sweep)

labels_st = st.lists(st.integers(5, 30), min_size=2, max_size=6).flatmap(
    lambda counts: st.permutations(np.repeat(np.arange(len(counts)), counts).tolist()))


@given(labels_st, st.floats(0.05, 0.5), st.integers(0, 2**31 - 1))
def test_holdout_partition_and_stratification(labels, frac, seed):
    y = np.asarray(labels)
    tr, te = stratified_split(y, frac, seed)
    assert len(np.intersect1d(tr, te)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(len(y)))
    for c, n in Counter(labels).items():
        k = int((y[te] == c).sum())
        assert 1 <= k <= n - 1
        assert k == min(max(int(np.floor(frac * n + 0.5)), 1), n - 1)
        if 1 < k < n - 1:
            assert abs(k - frac * n) <= 0.5 + 1e-9
    tr2, te2 = stratified_split(y, frac, seed)
    np.testing.assert_array_equal(te, te2)


@given(labels_st, st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_kfold_partition_and_stratification(labels, k, seed):
    y = np.asarray(labels)
    folds = stratified_kfold(y, k, seed)
    assert len(folds) == k
    vals = [v for _, v in folds]
    np.testing.assert_array_equal(np.sort(np.concatenate(vals)), np.arange(len(y)))
    for tr, v in folds:
        assert len(np.intersect1d(tr, v)) == 0 and len(tr) + len(v) == len(y)
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for c in set(labels):
        per = [int((y[v] == c).sum()) for v in vals]
        assert max(per) - min(per) <= 1


def test_split_errors_name_class():
    with pytest.raises(StratificationError, match="class '1'"):
        stratified_split([0, 0, 0, 1], 0.2)
    with pytest.raises(StratificationError, match="need >= 5"):
        stratified_kfold([0] * 10 + [1] * 3, 5)


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = ExperimentConfig(profile="tiny", seed=9, beta=0.25, lam=1.5, classifiers=("rf", "mlp"),
                           train_domains=("lab_b",), check_leakage=False,
                           data={"x": "/d/x", "y": "/d/y"})
    assert parse_config(dump_config(cfg)) == cfg


@given(st.floats(0, 10, allow_nan=False), st.floats(0, 10, allow_nan=False), st.integers(0, 10**6))
def test_config_round_trip_numbers(beta, lam, seed):
    cfg = ExperimentConfig(beta=beta, lam=lam, seed=seed)
    assert parse_config(dump_config(cfg)) == cfg


def test_config_errors_carry_line_numbers(tmp_path):
    with pytest.raises(ConfigError, match=r"<config>:3: unknown key 'betta'"):
        parse_config("dorl-config 1\nseed = 1\nbetta = 2\n")
    with pytest.raises(ConfigError, match="header"):
        parse_config("seed = 1\n")
    with pytest.raises(ConfigError, match="version"):
        parse_config("dorl-config 7\n")
    with pytest.raises(ConfigError, match="bad value for 'seed'"):
        parse_config("dorl-config 1\nseed = one\n")
    with pytest.raises(ConfigError, match="unknown profile"):
        parse_config("# comment\ndorl-config 1\nprofile = huge\n")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.cfg")


def test_config_validation():
    for bad in ({"variant": "M9"}, {"classifiers": ("knn",)}, {"n_domains": 1},
                {"mask_ratio": 1.0}, {"beta": -1.0}, {"folds": 1}, {"test_fraction": 0.0}):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig(train_domains=("nowhere",)).sources


def test_variant_terms():
    assert ExperimentConfig(variant="M1").terms is None
    assert set(ExperimentConfig(variant="M4").terms) == {"rec", "ssim"}
    assert set(ExperimentConfig(variant="M5").terms) == {"rec", "ssim", "mmd"}


def test_leakage_check():
    check_no_leakage(["a", "b"], ["c"])
    with pytest.raises(ContractError, match="held-out"):
        check_no_leakage(["a", "b"], ["b"])


# ---------------------------------------------------------------- pipeline (tiny profile)

def tiny_config(**kw):
    base = dict(profile="tiny", seed=2, n_classes=3, n_per_class=10, seg_epochs=2, cae_epochs=1,
                cae_batch_size=8, classifiers=("logreg", "svm_linear"), folds=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config()
    log = []
    rep_a = run_pipeline(cfg, root / "a")
    rep_b = run_pipeline(cfg, root / "b")
    rep_again = run_pipeline(cfg, root / "a", log=log.append)
    return root, cfg, rep_a, rep_b, rep_again, log


def test_cold_runs_are_byte_identical(runs):
    root = runs[0]
    a = (root / "a" / "report" / "report.json").read_bytes()
    b = (root / "b" / "report" / "report.json").read_bytes()
    assert a == b
    assert (root / "a" / "report" / "run_meta.json").exists()


def test_report_structure(runs):
    _, cfg, rep, *_ = runs
    assert rep["domains"] == ["lab_a", "lab_b", "lab_c"] and rep["train_domains"] == rep["domains"]
    for name in cfg.classifiers:
        for s in rep["domains"]:
            for t in rep["domains"]:
                cell = rep["matrix"][name][s][t]
                assert len(cell["folds"]) == cfg.folds
                assert cell["mean"] == pytest.approx(np.mean(cell["folds"]))
                assert 0.0 <= cell["mean"] <= 1.0
    assert recompute_aggregates(rep) == {"cross_domain_average": rep["cross_domain_average"],
                                         "overall_average": rep["overall_average"]}
    csv = (runs[0] / "a" / "report" / "matrix_logreg.csv").read_text().splitlines()
    assert csv[0] == "train\\test,lab_a,lab_b,lab_c" and len(csv) == 4


def test_cross_domain_average_is_off_diagonal_mean(runs):
    rep = runs[2]
    m = rep["matrix"]["logreg"]
    off = [m[s][t]["mean"] for s in m for t in m[s] if s != t]
    assert rep["cross_domain_average"]["logreg"] == pytest.approx(np.mean(off))


def test_rerun_reuses_every_stage(runs):
    *_, rep_a, _, rep_again, log = runs
    built = [line for line in log if "built" in line]
    assert not built and any("cached" in line for line in log)
    assert json.dumps(rep_again, sort_keys=True) == json.dumps(rep_a, sort_keys=True)


def test_changed_parameter_rebuilds_only_downstream(runs):
    root, cfg = runs[0], runs[1]
    log = []
    run_pipeline(cfg.with_(beta=0.25), root / "a", log=log.append)
    built = {line.split("]")[0].strip("[") for line in log if "built" in line}
    assert built and all(name.startswith(("cae-", "features-")) for name in built)


def test_m1_ablation_skips_cae(runs, tmp_path):
    cfg = runs[1]
    log = []
    rep = run_ablation(cfg, "M1", tmp_path, log=log.append)
    assert rep["variant"] == "M1"
    assert not list((tmp_path / "cache").glob("cae-*"))
    assert (tmp_path / "ablation" / "M1" / "report.json").exists()
    with pytest.raises(ConfigError):
        run_ablation(cfg, "M7", tmp_path)


def test_single_cell_sweep_matches_pipeline(runs, tmp_path):
    root, cfg, rep = runs[0], runs[1], runs[2]
    rows, best = sweep(cfg, [cfg.beta], [cfg.lam], out=root / "a")
    swept = (root / "a" / "sweep" / "beta0p5_lam2" / "report.json").read_bytes()
    assert swept == (root / "b" / "report" / "report.json").read_bytes()
    assert best["beta"] == cfg.beta and best["lam"] == cfg.lam
    assert len(rows) == len(cfg.classifiers)
    assert (root / "a" / "sweep" / "grid_logreg.csv").exists()


def test_unknown_train_domain_is_a_stage_error(tmp_path):
    with pytest.raises(StageError) as exc:
        run_pipeline(tiny_config(train_domains=("lab_z",), n_per_class=5), tmp_path)
    assert exc.value.exit_code == 3


def test_too_few_samples_fail_the_classify_stage(tmp_path):
    with pytest.raises(StageError) as exc:
        run_pipeline(tiny_config(n_per_class=3, folds=5, classifiers=("logreg",)), tmp_path)
    assert isinstance(exc.value.cause, StratificationError)
