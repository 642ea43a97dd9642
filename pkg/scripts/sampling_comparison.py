"""Compare geometry-aware masks with budget-matched random masks.

Runs the pipeline for one or more seeds and reports, per seed, the mean
localization error of each strategy and a one-sided sign test of
"geometric mask beats its random counterpart".

    python3 scripts/sampling_comparison.py --seeds 0 1 --out runs/compare
"""
import argparse
from pathlib import Path

import numpy as np
from scipy import stats

from nlosloc.cli import main, read_estimates

STAGES = ("synth", "train", "sample", "reconstruct", "localize")


def sign_test(geo: np.ndarray, rand: np.ndarray) -> tuple[int, int, float]:
    wins, losses = int((geo < rand).sum()), int((geo > rand).sum())
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return wins, losses, float(p)


def run_seed(config: str, out: Path, seed: int, extra: list[str]) -> dict[str, dict[str, float]]:
    for stage in STAGES:
        if main([stage, "--config", config, "--out", str(out), "--seed", str(seed), *extra]) != 0:
            raise SystemExit(f"stage {stage} failed")
    le: dict[str, dict[str, float]] = {}
    for e in read_estimates(out / "estimates.csv"):
        tag, name = e["method"].split("/")
        if name == "argmax" and e["le_m"]:
            le.setdefault(tag, {})[e["scene_id"]] = float(e["le_m"])
    return le


def main_cli() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).with_name("pipeline.ini")))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--set", action="append", default=[], help="forwarded config override")
    args = ap.parse_args()
    extra = [x for s in args.set for x in ("--set", s)]
    extra += ["--set", "localize.estimators=argmax", "--set", "evaluate.le_estimator=argmax"]
    for seed in args.seeds:
        le = run_seed(args.config, Path(args.out) / f"seed{seed}", seed, extra)
        for geo in ("edge", "vertex"):
            ref = f"budget_matched_random@{geo}"
            if geo not in le or ref not in le:
                continue
            ids = sorted(le[geo])
            g = np.array([le[geo][i] for i in ids])
            r = np.array([le[ref][i] for i in ids])
            wins, losses, p = sign_test(g, r)
            print(f"seed {seed} {geo:6s} mean LE {g.mean():7.3f} m   random {r.mean():7.3f} m   "
                  f"wins {wins:2d} losses {losses:2d}   sign-test p = {p:.3f}")


if __name__ == "__main__":
    main_cli()
