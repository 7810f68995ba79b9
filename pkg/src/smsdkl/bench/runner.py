"""Experiment runner: matched-seed runs, aggregate tables, convergence data, plots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..acquisition import RunHistory, sms_dkl_run
from ..baselines import gp_bo_run, parego_run, random_run
from ..core import RunConfig, SequenceDataset
from .config import ExperimentConfig, load_config
from .inner import make_inner_task
from .synth import DriftProfile, QuadraticFamily, default_space, synth_dataset, synth_family

log = logging.getLogger(__name__)

SINGLE_MODEL = ("gp", "parego", "random")


def variants(algorithms) -> list[str]:
    """Reported columns: SMS-DKL natively stepwise, the others single plus WISE."""
    out = []
    for a in algorithms:
        out.append(a)
        if a in SINGLE_MODEL:
            out.append(f"{a}_wise")
    return out


@dataclass
class Instance:
    problem: object
    dataset: SequenceDataset


def build_instance(cfg: ExperimentConfig, seed: int) -> Instance:
    p, d = cfg.problem, cfg.dataset
    if p.kind == "inner":
        task = make_inner_task(seed, p.T, d.drift, I=d.instances, d=d.features)
        return Instance(task, task.train)
    if p.kind == "quadratic":
        problem = QuadraticFamily(tuple(p.centers), p.lo, p.hi)
    else:
        problem = synth_family(seed, p.T, p.rho, default_space(p.dims), p.J, p.noise_sd)
    ds = synth_dataset(seed, problem.T, DriftProfile(d.drift, shift=d.shift), I=d.instances, d=d.features, ar=d.ar)
    return Instance(problem, ds)


def run_config_for(cfg: ExperimentConfig, algorithm: str, seed: int) -> RunConfig:
    b = cfg.budget
    if algorithm == "sms_dkl":
        return RunConfig(n_init=b.n_init, n_iters=b.n_iters, seed=seed, **cfg.sms_dkl.model_dump())
    return RunConfig(n_init=b.n_init, n_iters=b.n_iters, seed=seed, candidate_pool=cfg.gp.candidate_pool)


def run_one(cfg: ExperimentConfig, algorithm: str, seed: int) -> RunHistory:
    inst = build_instance(cfg, seed)
    rc = run_config_for(cfg, algorithm, seed)
    if algorithm == "sms_dkl":
        return sms_dkl_run(inst.problem, inst.dataset, rc)
    if algorithm == "gp":
        return gp_bo_run(inst.problem, rc, cfg.gp.restarts, cfg.gp.maxiter)
    if algorithm == "parego":
        return parego_run(inst.problem, rc, restarts=cfg.gp.restarts, maxiter=cfg.gp.maxiter)
    if algorithm == "random":
        return random_run(inst.problem, rc)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# --------------------------------------------------------------------------- #
# incumbent curves


def _row_at(history: RunHistory, iteration: int) -> int:
    """Index of the last record acquired at or before ``iteration``."""
    iters = np.array([r.iter for r in history.records])
    return int(np.searchsorted(iters, iteration, side="right")) - 1


def incumbent_points_curve(history: RunHistory, variant: str) -> np.ndarray:
    """Row index of the incumbent for each step after each record, shape (n, T)."""
    Y = history.Y
    n = len(Y)
    if variant in SINGLE_MODEL:
        best = np.zeros(n, dtype=int)
        for k in range(1, n):
            best[k] = k if Y[k].sum() > Y[best[k - 1]].sum() else best[k - 1]
        return np.repeat(best[:, None], history.T, axis=1)
    idx = np.zeros((n, history.T), dtype=int)
    for k in range(1, n):
        better = Y[k] > Y[idx[k - 1], np.arange(history.T)]
        idx[k] = np.where(better, k, idx[k - 1])
    return idx


def score_curve(history: RunHistory, variant: str, problem=None) -> np.ndarray:
    """Per-record mean-over-steps incumbent score, or regret when ``problem`` has an oracle."""
    idx = incumbent_points_curve(history, variant)
    T = np.arange(history.T)
    if problem is None:
        return history.Y[idx, T].mean(axis=1)
    F = problem.values(history.X)
    return (problem.opt_value[None, :] - F[idx, T]).mean(axis=1)


def _base(variant: str) -> str:
    return variant[:-5] if variant.endswith("_wise") else variant


def _iteration_grid(n_iters: int) -> np.ndarray:
    return np.arange(0, n_iters + 1)


def _stats(values: np.ndarray) -> tuple[float, float]:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    return mean, se


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


# --------------------------------------------------------------------------- #
# atomic file output


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _history_text(history: RunHistory, timing: bool) -> str:
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "h.csv"
        history.to_csv(p, timing=timing)
        return p.read_text()


def _table(name: str, keys: list[str], grid, curves: dict, seeds) -> str:
    header = [name] + [f"{v}_{s}" for v in keys for s in ("mean", "stderr")]
    rows = []
    for g in grid:
        row = [int(g)]
        for v in keys:
            vals = np.array([curves[v][s][g] if s in curves[v] else np.nan for s in seeds])
            m, se = _stats(vals)
            row += [_fmt(m), _fmt(se)]
        rows.append(row)
    return _csv_text(header, rows)


# --------------------------------------------------------------------------- #


def _task(args):
    cfg, algorithm, seed = args
    try:
        return algorithm, seed, run_one(cfg, algorithm, seed), None
    except Exception as err:  # noqa: BLE001 - recorded in the manifest
        log.exception("run %s seed %d failed", algorithm, seed)
        return algorithm, seed, None, repr(err)


def run_experiment(config: ExperimentConfig | str | Path, out_dir: str | Path) -> dict:
    """Execute every (algorithm, seed) run and write the result bundle.

    Returns the manifest.  Failed runs are listed there; the bundle is still
    written from the runs that succeeded.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, a, s) for s in cfg.seeds for a in cfg.algorithms]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_task, jobs))
    else:
        results = [_task(j) for j in jobs]

    files: dict[str, str] = {}

    def emit(rel: str, text: str) -> None:
        atomic_write(out / rel, text)
        files[rel] = hashlib.sha256(text.encode()).hexdigest()

    emit("config.json", json.dumps(cfg.model_dump(), indent=2, sort_keys=True) + "\n")
    runs, errors = [], []
    histories: dict[tuple[str, int], RunHistory] = {}
    for algorithm, seed, hist, err in results:
        if hist is None:
            errors.append({"algorithm": algorithm, "seed": seed, "error": err})
            continue
        histories[algorithm, seed] = hist
        rel = f"runs/{algorithm}_seed{seed}.csv"
        emit(rel, _history_text(hist, cfg.record_timing))
        entry = {"algorithm": algorithm, "seed": seed, "history": rel, "rows": len(hist),
                 "failures": hist.failures}
        z = hist.extras.get("embeddings")
        if z is not None:
            zrel = f"runs/{algorithm}_seed{seed}_embeddings.csv"
            emit(zrel, _csv_text(["t"] + [f"z_{k + 1}" for k in range(z.shape[1])],
                                 [[t + 1] + [repr(float(v)) for v in z[t]] for t in range(len(z))]))
            entry["embeddings"] = zrel
        runs.append(entry)

    keys = variants(cfg.algorithms)
    grid = _iteration_grid(cfg.budget.n_iters)
    checkpoints = sorted({c for c in cfg.budget.checkpoints if c <= cfg.budget.n_iters}) or [cfg.budget.n_iters]
    oracle = cfg.problem.kind in ("synth", "quadratic")
    measures = [("score", None)] + ([("regret", True)] if oracle else [])
    for measure, use_oracle in measures:
        curves: dict[str, dict[int, np.ndarray]] = {v: {} for v in keys}
        for (algorithm, seed), hist in histories.items():
            problem = build_instance(cfg, seed).problem if use_oracle else None
            for v in keys:
                if _base(v) != algorithm:
                    continue
                per_record = score_curve(hist, v, problem)
                rows = np.array([_row_at(hist, g) for g in grid])
                curves[v][seed] = np.where(rows >= 0, per_record[np.maximum(rows, 0)], np.nan)
        suffix = "" if measure == "score" else "_regret"
        emit(f"aggregate{suffix}.csv", _table("checkpoint", keys, checkpoints, curves, cfg.seeds))
        emit(f"convergence/{cfg.name}{suffix}.csv", _table("iteration", keys, grid, curves, cfg.seeds))

    manifest = {"name": cfg.name, "variants": keys, "checkpoints": checkpoints, "runs": runs,
                "errors": errors, "files": dict(sorted(files.items()))}
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------- #
# plots


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) if v else np.nan for v in r] for r in rows[1:]])
    return header, data.reshape(-1, len(header))


def plot_bundle(bundle: str | Path) -> list[Path]:
    """Write one SVG convergence plot per convergence table in the bundle."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bundle = Path(bundle)
    tables = sorted((bundle / "convergence").glob("*.csv"))
    if not tables:
        raise FileNotFoundError(f"no convergence tables under {bundle}")
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "smsdkl", "svg.fonttype": "none"}):
        for path in tables:
            header, data = read_table(path)
            it = data[:, 0]
            fig, ax = plt.subplots(figsize=(6, 4))
            for k in range(1, len(header), 2):
                name = header[k][: -len("_mean")]
                m, se = data[:, k], np.nan_to_num(data[:, k + 1])
                (line,) = ax.plot(it, m, label=name)
                ax.fill_between(it, m - se, m + se, color=line.get_color(), alpha=0.2, linewidth=0)
            ax.set_xlabel("BO iteration")
            ax.set_ylabel("mean per-step regret" if path.stem.endswith("_regret") else "mean per-step incumbent")
            ax.set_title(path.stem)
            ax.legend(frameon=False)
            fig.tight_layout()
            target = bundle / "plots" / f"{path.stem}.svg"
            target.parent.mkdir(exist_ok=True)
            buf = io.StringIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
            plt.close(fig)
            atomic_write(target, buf.getvalue())
            written.append(target)
    return written
