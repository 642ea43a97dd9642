"""Command-line pipeline: synth -> sample -> train -> reconstruct -> localize -> evaluate.

Every stage reads its inputs from and writes its outputs under ``run.out``.
Outputs are written to a temporary name and renamed into place, and each
invocation appends one JSON line to ``run_manifest.jsonl``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .config import MAP_ESTIMATORS, ExperimentConfig, load_config
from .dataio import (SceneRecord, generate_synthetic_scene, load_scene, read_manifest, save_gain_map,
                     split_manifest, write_scenes)
from .diffusion import (DiffusionSchedule, OracleDenoiser, RidgeDenoiserModel, interpolate_measurements,
                        reconstruct_rm, train_ridge_denoiser)
from .errors import ConfigInvalid, NlosLocError, UpstreamArtifactMissing
from .geometry import extract_edges, extract_vertices
from .localization import (Estimate, PathlossModel, argmax_localize, awls_localize, ensemble_localize,
                           largest_blob_centroid, ls_localize, mbe_localize, nls_localize,
                           threshold_region_center, topk_weighted_centroid)
from .metrics import EvalReport, localization_error, nmse, psnr, rmse, ssim
from .propagation import DYNAMIC_RANGE_DB, PropagationParams, RadioMap, fisher_information, \
    greedy_probe_placement, kirchhoff_matrix, uniform_edge
from .sampling import (MeasurementSet, SamplingMask, build_condition_tensor, load_mask_txt, make_mask,
                       normalize_rss, sample_rss, save_mask_txt)

COMMANDS = ("synth", "sample", "train", "reconstruct", "localize", "evaluate", "analyze-sampling")
ESTIMATE_COLUMNS = ("scene_id", "method", "row", "col", "le_m", "runtime_ms")

# stream ids keep per-stage random draws independent of each other
_SCENES, _MASKS, _NOISE, _RECON, _TRAIN = range(1, 6)


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Output helpers


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    tmp.replace(path)


def atomic_save_npy(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    tmp.replace(path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


def _versions() -> dict:
    import numba
    import scipy
    return {"nlosloc": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def append_manifest(cfg: ExperimentConfig, command: str, outputs: list[str]) -> None:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    entry = {"command": command, "config_hash": cfg.config_hash(), "seed": cfg.run.seed,
             "workers": cfg.run.workers, "versions": _versions(), "outputs": outputs,
             "finished_unix": round(time.time(), 3)}
    with open(out / "run_manifest.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _map(cfg: ExperimentConfig, fn, items):
    """Order-preserving map over scenes, in worker processes when asked."""
    items = list(items)
    if cfg.run.workers <= 1 or len(items) <= 1:
        return [fn(cfg, it) for it in items]
    with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
        return list(pool.map(fn, [cfg] * len(items), items))


# --------------------------------------------------------------------------
# Scene and artifact access


def _scene_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.run.out) if cfg.scenes.source == "synthetic" else Path(cfg.scenes.source)


def _manifest_rows(cfg: ExperimentConfig, split: str | None = None) -> list[dict]:
    root = _scene_root(cfg)
    if not (root / "manifest.csv").exists():
        raise UpstreamArtifactMissing(f"{root / 'manifest.csv'} missing; run `synth` first")
    rows = read_manifest(root)
    return [r for r in rows if split is None or r["split"] == split]


def _load(cfg: ExperimentConfig, row: dict) -> SceneRecord:
    return load_scene(_scene_root(cfg), row, split=cfg.scenes.split)


def _truth_db(rec: SceneRecord) -> RadioMap:
    if rec.ground_truth is None:
        raise UpstreamArtifactMissing(f"scene {rec.scene_id} has no dB ground-truth map")
    return rec.ground_truth


def _truth_norm(rec: SceneRecord) -> np.ndarray:
    return rec.normalized_truth(DYNAMIC_RANGE_DB).values


def _tag_dir(tag: str) -> str:
    return tag.replace("@", "-")


def _mask_path(cfg, tag, scene_id) -> Path:
    return Path(cfg.run.out) / "samples" / _tag_dir(tag) / f"{scene_id}.mask.txt"


def _meas_path(cfg, tag, scene_id) -> Path:
    return Path(cfg.run.out) / "samples" / _tag_dir(tag) / f"{scene_id}.rss.csv"


def _recon_path(cfg, tag, scene_id) -> Path:
    return Path(cfg.run.out) / "recon" / _tag_dir(tag) / f"{scene_id}.npy"


def _model_path(cfg) -> Path:
    return Path(cfg.model.path) if cfg.model.path else Path(cfg.run.out) / "model" / "ridge.bin"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise UpstreamArtifactMissing(f"{path} missing; run `{stage}` first")
    return path


def build_mask(rec: SceneRecord, tag: str, seed: int, cfg: ExperimentConfig) -> SamplingMask:
    if "@" in tag:
        base, ref = tag.split("@", 1)
        return make_mask(rec.env, base, budget=cfg.sampling.budget, seed=seed,
                         random_fraction=cfg.sampling.random_fraction, reference=ref)
    return make_mask(rec.env, tag, budget=cfg.sampling.budget, seed=seed,
                     random_fraction=cfg.sampling.random_fraction)


def _condition(rec: SceneRecord, m: MeasurementSet) -> np.ndarray:
    if len(m) == 0:
        n = rec.env.n
        return np.stack([rec.env.occupancy.astype(float), np.zeros((n, n)), np.zeros((n, n))])
    return build_condition_tensor(rec.env, normalize_rss(m))


def load_measurements(cfg, tag, scene_id) -> MeasurementSet:
    mask = load_mask_txt(_require(_mask_path(cfg, tag, scene_id), "sample"), tag)
    path = _require(_meas_path(cfg, tag, scene_id), "sample")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = np.array([float(r["rss_db"]) for r in rows])
    return MeasurementSet(mask, raw, cfg.sampling.noise_std)


# --------------------------------------------------------------------------
# synth


def _synth_one(cfg: ExperimentConfig, i: int) -> SceneRecord:
    s = cfg.scenes
    return generate_synthetic_scene(s.grid_size, (s.buildings_min, s.buildings_max),
                                    seed=derive_seed(cfg.run.seed, _SCENES, i), split=s.split,
                                    scene_id=f"scene{i:04d}")


def cmd_synth(cfg: ExperimentConfig) -> list[str]:
    if cfg.scenes.source != "synthetic":
        return []
    total = cfg.scenes.train_count + cfg.scenes.test_count
    records = _map(cfg, _synth_one, range(total))
    train, test = split_manifest(records, cfg.scenes.train_count, cfg.scenes.test_count, cfg.run.seed)
    splits = {r.scene_id: "train" for r in train} | {r.scene_id: "test" for r in test}
    path = write_scenes(cfg.run.out, records, splits)
    return [str(path)]


# --------------------------------------------------------------------------
# sample


def _sample_one(cfg: ExperimentConfig, item):
    idx, row = item
    rec = _load(cfg, row)
    out = []
    for j, tag in enumerate(cfg.sampling.strategies):
        mask = build_mask(rec, tag, derive_seed(cfg.run.seed, _MASKS, idx, j), cfg)
        m = sample_rss(_truth_db(rec), mask, cfg.sampling.noise_std, derive_seed(cfg.run.seed, _NOISE, idx, j))
        out.append((tag, rec.scene_id, mask, m))
    return out


def cmd_sample(cfg: ExperimentConfig) -> list[str]:
    rows = _manifest_rows(cfg, "test")
    written = []
    for batch in _map(cfg, _sample_one, list(enumerate(rows))):
        for tag, scene_id, mask, m in batch:
            mp = _mask_path(cfg, tag, scene_id)
            mp.parent.mkdir(parents=True, exist_ok=True)
            tmp = mp.with_name(mp.name + ".tmp")
            save_mask_txt(mask, tmp)
            tmp.replace(mp)
            body = [(r, c, repr(float(v))) for (r, c), v in zip(mask.points, m.raw)]
            atomic_write_text(_meas_path(cfg, tag, scene_id), csv_text(("row", "col", "rss_db"), body))
            written += [str(mp), str(_meas_path(cfg, tag, scene_id))]
    return written


# --------------------------------------------------------------------------
# train


def _train_pairs(cfg: ExperimentConfig, item):
    idx, row = item
    rec = _load(cfg, row)
    x0 = _truth_norm(rec)
    pairs = []
    for j, tag in enumerate(cfg.model.train_masks):
        mask = build_mask(rec, tag, derive_seed(cfg.run.seed, _TRAIN, idx, j), cfg)
        if len(mask) == 0:
            continue
        m = sample_rss(_truth_db(rec), mask, cfg.sampling.noise_std,
                       derive_seed(cfg.run.seed, _TRAIN, idx, j, 1))
        pairs.append((_condition(rec, m), x0))
    return pairs


def cmd_train(cfg: ExperimentConfig) -> list[str]:
    rows = _manifest_rows(cfg, "train")
    if not rows:
        raise UpstreamArtifactMissing("manifest has no training scenes")
    data = [p for batch in _map(cfg, _train_pairs, list(enumerate(rows))) for p in batch]
    m = cfg.model
    model = train_ridge_denoiser(data, DiffusionSchedule(m.steps), m.patch_radius, m.ridge_lambda,
                                 seed=derive_seed(cfg.run.seed, _TRAIN), pixels_per_sample=m.pixels_per_sample,
                                 draws=m.draws)
    path = Path(cfg.run.out) / "model" / "ridge.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    return [str(path)]


# --------------------------------------------------------------------------
# reconstruct


def reconstruct_scene(cfg: ExperimentConfig, rec: SceneRecord, m: MeasurementSet, seed: int,
                      model: RidgeDenoiserModel | None) -> np.ndarray:
    """(K, N, N) stack of reconstructed normalised maps."""
    cond = _condition(rec, m)
    kind = cfg.model.denoiser
    if kind == "none":
        return interpolate_measurements(cond).values[None]
    den = OracleDenoiser(_truth_norm(rec)) if kind == "oracle" else model
    maps = reconstruct_rm(cond, den, DiffusionSchedule(cfg.model.steps), cfg.model.ensemble, seed)
    stack = np.stack([rm.values for rm in maps])
    stack[:, rec.env.occupancy.astype(bool)] = 0.0
    return stack


def _recon_one(cfg: ExperimentConfig, item):
    idx, row = item
    rec = _load(cfg, row)
    model = RidgeDenoiserModel.load(_model_path(cfg)) if cfg.model.denoiser == "ridge" else None
    out = []
    for j, tag in enumerate(cfg.sampling.strategies):
        m = load_measurements(cfg, tag, rec.scene_id)
        out.append((tag, rec.scene_id, reconstruct_scene(cfg, rec, m, derive_seed(cfg.run.seed, _RECON, idx, j), model)))
    return out


def cmd_reconstruct(cfg: ExperimentConfig) -> list[str]:
    if cfg.model.denoiser == "ridge":
        _require(_model_path(cfg), "train")
    rows = _manifest_rows(cfg, "test")
    written = []
    for batch in _map(cfg, _recon_one, list(enumerate(rows))):
        for tag, scene_id, stack in batch:
            path = _recon_path(cfg, tag, scene_id)
            atomic_save_npy(path, stack)
            save_gain_map(RadioMap(stack.mean(0), None, normalized=True), path.with_suffix(".png"))
            written += [str(path), str(path.with_suffix(".png"))]
    return written


# --------------------------------------------------------------------------
# localize


def _map_estimate(name: str, values: np.ndarray, region: np.ndarray, cfg: ExperimentConfig) -> Estimate:
    if name == "argmax":
        return argmax_localize(values, region)
    # the remaining map estimators read the whole map; cells outside the
    # restricted region are zeroed so they cannot attract the estimate
    masked = np.where(region, values, 0.0)
    if name == "topk_wc":
        return topk_weighted_centroid(masked, cfg.localize.topk)
    if name == "trc":
        return threshold_region_center(masked, cfg.localize.percentile)
    return largest_blob_centroid(masked, cfg.localize.alpha)


def _classical_estimate(name: str, rec: SceneRecord, m: MeasurementSet, cfg: ExperimentConfig) -> Estimate:
    params = PropagationParams()
    model = PathlossModel(params.tx_power_dbm - params.reference_loss_db, params.pathloss_exponent)
    cs = rec.env.cell_size
    if name == "ls":
        return ls_localize(m, model, cs)
    if name == "awls":
        return awls_localize(m, model, cs)
    if name == "mbe":
        cands = np.argwhere(_region(rec))
        return mbe_localize(m, model, cands, max(cfg.sampling.noise_std, 1.0), cs)
    return nls_localize(m, model, rec.env.occupancy.shape, rec.env.sensing_mask, cs)


def _region(rec: SceneRecord) -> np.ndarray:
    r = rec.env.restricted_mask.astype(bool)
    return r if r.any() else rec.env.free


def localize_scene(cfg: ExperimentConfig, rec: SceneRecord, tag: str, m: MeasurementSet,
                   stack: np.ndarray | None) -> list[tuple[str, Estimate | None, float]]:
    """``(estimator, estimate or None on failure, runtime_ms)`` per estimator."""
    out = []
    region = _region(rec)
    for name in cfg.localize.estimators:
        t0 = time.perf_counter()
        try:
            if name in MAP_ESTIMATORS:
                ests = [_map_estimate(name, v, region, cfg) for v in stack]
                est = ests[0] if len(ests) == 1 else ensemble_localize(ests)
            else:
                est = _classical_estimate(name, rec, m, cfg)
        except NlosLocError:
            est = None
        out.append((name, est, 1000.0 * (time.perf_counter() - t0)))
    return out


def _localize_one(cfg: ExperimentConfig, item):
    idx, row = item
    rec = _load(cfg, row)
    rows = []
    need_maps = any(e in MAP_ESTIMATORS for e in cfg.localize.estimators)
    for tag in cfg.sampling.strategies:
        m = load_measurements(cfg, tag, rec.scene_id)
        stack = np.load(_require(_recon_path(cfg, tag, rec.scene_id), "reconstruct")) if need_maps else None
        for name, est, ms in localize_scene(cfg, rec, tag, m, stack):
            le = localization_error(est, rec.tx, rec.env.cell_size) if est is not None else None
            rows.append((rec.scene_id, f"{tag}/{name}", _num(est.row if est else None),
                         _num(est.col if est else None), _num(le), _num(ms) if cfg.run.timing else ""))
    return rows


def cmd_localize(cfg: ExperimentConfig) -> list[str]:
    rows = _manifest_rows(cfg, "test")
    body = [r for batch in _map(cfg, _localize_one, list(enumerate(rows))) for r in batch]
    path = Path(cfg.run.out) / "estimates.csv"
    atomic_write_text(path, csv_text(ESTIMATE_COLUMNS, body))
    return [str(path)]


def read_estimates(path) -> list[dict]:
    with open(_require(Path(path), "localize"), newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: ExperimentConfig) -> list[str]:
    out = Path(cfg.run.out)
    estimates = read_estimates(out / "estimates.csv")
    lookup = {(e["scene_id"], e["method"]): e for e in estimates}
    report = EvalReport()
    for row in _manifest_rows(cfg, "test"):
        rec = _load(cfg, row)
        truth = _truth_norm(rec)
        for tag in cfg.sampling.strategies:
            mask = load_mask_txt(_require(_mask_path(cfg, tag, rec.scene_id), "sample"), tag)
            stack = np.load(_require(_recon_path(cfg, tag, rec.scene_id), "reconstruct"))
            pred = stack.mean(0)
            report.add(rec.scene_id, tag, "NMSE", nmse(pred, truth))
            report.add(rec.scene_id, tag, "RMSE", rmse(pred, truth))
            report.add(rec.scene_id, tag, "SSIM", ssim(pred, truth))
            report.add(rec.scene_id, tag, "PSNR", psnr(pred, truth))
            report.add(rec.scene_id, tag, "Sampling Ratio", mask.ratio(rec.env))
            for name in cfg.localize.estimators:
                e = lookup.get((rec.scene_id, f"{tag}/{name}"))
                if e is None:
                    raise UpstreamArtifactMissing(f"no estimate for {rec.scene_id} {tag}/{name}")
                if e["le_m"] == "":
                    continue
                metric = "LE" if name == cfg.evaluate.le_estimator else f"LE[{name}]"
                report.add(rec.scene_id, tag, metric, float(e["le_m"]))
    report.write_csv(out / "report.csv")
    atomic_write_text(out / "summary.txt", report.summary_table())
    return [str(out / "report.csv"), str(out / "summary.txt")]


# --------------------------------------------------------------------------
# analyze-sampling


def face_candidates(rec: SceneRecord, depth: int):
    """Top faces of each building with the free sensing cells in front of them.

    Yields ``(label, face_cols, row0, probes)`` where ``probes`` are (row, col)
    cells up to ``depth`` rows above the face, two columns past either end.
    """
    labels, count = ndimage.label(rec.env.occupancy)
    n = rec.env.n
    for lab in range(1, count + 1):
        rr, cc = np.nonzero(labels == lab)
        r0 = int(rr.min())
        cols = np.sort(cc[rr == r0])
        probes = [(r0 - a, c) for a in range(1, depth + 1) for c in range(cols[0] - 2, cols[-1] + 3)
                  if 0 <= r0 - a and 0 <= c < n and rec.env.sensing_mask[r0 - a, c]]
        yield lab, cols, r0, probes


def _analyze_one(cfg: ExperimentConfig, item):
    _, row = item
    rec = _load(cfg, row)
    a = cfg.analysis
    edges, verts = extract_edges(rec.env), extract_vertices(rec.env)
    faces = [f for f in face_candidates(rec, a.depth) if len(f[3]) >= a.budget]
    faces.sort(key=lambda f: (-len(f[3]), f[0]))
    cs = rec.env.cell_size
    lam = PropagationParams().wavelength
    fisher_rows, greedy_rows = [], []
    for lab, cols, r0, probes in faces[:a.max_faces]:
        centre = 0.5 * (cols[0] + cols[-1])
        pts = np.array([((c - centre) * cs, (r0 - 0.5 - r) * cs) for r, c in probes])
        half = 0.5 * (cols[-1] - cols[0] + 1) * cs
        disc = uniform_edge(half, len(cols), pts, lam, sigma=a.sigma)
        J = fisher_information(kirchhoff_matrix(disc), a.sigma)
        for j, s in enumerate(disc.positions):
            fisher_rows.append((rec.scene_id, lab, j, repr(float(s)), repr(float(J[j, j].real))))
        chosen, trace = greedy_probe_placement(disc, a.budget)
        for step, (k, mi) in enumerate(zip(chosen, trace)):
            p = probes[k]
            greedy_rows.append((rec.scene_id, lab, step, p[0], p[1], repr(float(mi)),
                                int(p in edges), int(p in verts)))
    return fisher_rows, greedy_rows


def cmd_analyze_sampling(cfg: ExperimentConfig) -> list[str]:
    rows = _manifest_rows(cfg, "test")
    results = _map(cfg, _analyze_one, list(enumerate(rows)))
    out = Path(cfg.run.out)
    fisher = [r for f, _ in results for r in f]
    greedy = [r for _, g in results for r in g]
    atomic_write_text(out / "analysis_fisher.csv",
                      csv_text(("scene_id", "building", "segment", "s_m", "fisher_jj"), fisher))
    atomic_write_text(out / "analysis_greedy.csv",
                      csv_text(("scene_id", "building", "step", "row", "col", "mi_nats", "is_edge", "is_vertex"),
                               greedy))
    return [str(out / "analysis_fisher.csv"), str(out / "analysis_greedy.csv")]


HANDLERS = {"synth": cmd_synth, "sample": cmd_sample, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "localize": cmd_localize, "evaluate": cmd_evaluate, "analyze-sampling": cmd_analyze_sampling}


# --------------------------------------------------------------------------
# entry point


def _parse_set(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigInvalid(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlosloc", description="Emitter localization experiment pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    return p


def run(command: str, cfg: ExperimentConfig) -> list[str]:
    outputs = HANDLERS[command](cfg)
    append_manifest(cfg, command, outputs)
    return outputs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _parse_set(args.set)
        flags = {k: str(v) for k, v in (("seed", args.seed), ("workers", args.workers), ("out", args.out))
                 if v is not None}
        if flags:
            overrides.setdefault("run", {}).update(flags)
        cfg = load_config(args.config, overrides)
        outputs = run(args.command, cfg)
    except (NlosLocError, FileNotFoundError, OSError) as exc:
        print(f"nlosloc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"nlosloc {args.command}: wrote {len(outputs)} file(s) under {cfg.run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
