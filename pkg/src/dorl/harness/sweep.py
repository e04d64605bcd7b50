"""beta / lambda grid sweep over full pipeline runs."""
import csv
from pathlib import Path

from ..errors import ConfigError
from .pipeline import canonical_json, run_pipeline

DEFAULT_BETAS = (0.1, 0.5, 1.0, 2.0)
DEFAULT_LAMS = (0.5, 1.0, 2.0, 4.0)


def _tag(x):
    return f"{x:g}".replace(".", "p")


def sweep(cfg, betas=DEFAULT_BETAS, lams=DEFAULT_LAMS, out="runs", log=None):
    """One pipeline run per (beta, lam) cell with shared seeds.

    Writes ``sweep.csv`` (one row per cell and classifier), ``grid_<clf>.csv``
    (beta rows x lam columns) and ``best.json``; returns (rows, best).
    """
    betas, lams = list(betas), list(lams)
    if not betas or not lams:
        raise ConfigError("sweep grids must be non-empty")
    out = Path(out)
    rows, cells = [], {}
    for b in betas:
        for lam in lams:
            c = cfg.with_(beta=float(b), lam=float(lam), variant="full")
            if log:
                log(f"sweep cell beta={b:g} lam={lam:g}")
            rep = run_pipeline(c, out, log=log,
                               report_dir=out / "sweep" / f"beta{_tag(b)}_lam{_tag(lam)}")
            cells[(b, lam)] = rep
            for name in cfg.classifiers:
                rows.append({"beta": float(b), "lam": float(lam), "classifier": name,
                             "overall_average": rep["overall_average"][name],
                             "cross_domain_average": rep["cross_domain_average"][name]})
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k not in ("beta", "lam") else v)
                        for k, v in r.items()})
    for name in cfg.classifiers:
        with open(sweep_dir / f"grid_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta\\lam"] + [f"{lam:g}" for lam in lams])
            for b in betas:
                w.writerow([f"{b:g}"] + [f"{cells[(b, lam)]['overall_average'][name]:.6f}"
                                         for lam in lams])
    score = {k: v["mean_overall_average"] for k, v in cells.items()}
    b_best, l_best = max(score, key=lambda k: (score[k], -betas.index(k[0]), -lams.index(k[1])))
    per_clf = {}
    for name in cfg.classifiers:
        mine = [r for r in rows if r["classifier"] == name]
        top = max(mine, key=lambda r: r["overall_average"])
        per_clf[name] = {"beta": top["beta"], "lam": top["lam"], "overall_average": top["overall_average"]}
    best = {"beta": float(b_best), "lam": float(l_best), "mean_overall_average": score[(b_best, l_best)],
            "per_classifier": per_clf}
    (sweep_dir / "best.json").write_text(canonical_json(best))
    return rows, best
