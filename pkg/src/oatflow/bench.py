"""2-D benchmark: dataset samplers, W2 / normalised path energy metrics, and the trial runner."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache, partial

import numpy as np

from .flows import Phase1Config, train_phase1
from .oatfm import RefineConfig, refine
from .ode import Trajectory, integrate_dopri5, integrate_rk4, path_energy
from .otcore import empirical_w2

DATASETS = ("gaussian", "8gaussians", "moons", "scurve")
_ALIASES = {"n": "gaussian", "normal": "gaussian", "8gs": "8gaussians"}
_SHORT = {"gaussian": "N", "8gaussians": "8gs", "moons": "moons", "scurve": "scurve"}

EIGHT_GAUSSIAN_SCALE = 5.0
EIGHT_GAUSSIAN_STD = math.sqrt(0.1)
MOONS_NOISE = 0.2
MOONS_SCALE = 3.0
SCURVE_SCALE = 1.5
SCURVE_NOISE = 0.05


def canonical_kind(kind: str) -> str:
    k = kind.strip().lower()
    k = _ALIASES.get(k, k)
    if k not in DATASETS:
        raise ValueError(f"unknown dataset {kind!r}; expected one of {DATASETS}")
    return k


def eight_gaussian_centers() -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4)
    return EIGHT_GAUSSIAN_SCALE * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample_dataset(kind: str, n: int, seed) -> np.ndarray:
    """``n`` points from a 2-D toy distribution; ``seed`` is an int or a numpy Generator."""
    if n < 1:
        raise ValueError("n must be at least 1")
    kind = canonical_kind(kind)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if kind == "gaussian":
        return rng.standard_normal((n, 2))
    if kind == "8gaussians":
        idx = rng.integers(0, 8, size=n)
        return eight_gaussian_centers()[idx] + EIGHT_GAUSSIAN_STD * rng.standard_normal((n, 2))
    if kind == "moons":
        upper = rng.random(n) < 0.5
        theta = np.pi * rng.random(n)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        # the unscaled pair of moons is centred at (0.5, 0.25)
        pts = np.stack([x - 0.5, y - 0.25], axis=1) + MOONS_NOISE * rng.standard_normal((n, 2))
        return MOONS_SCALE * pts
    t = 3.0 * np.pi * (rng.random(n) - 0.5)
    pts = np.stack([np.sin(t), np.sign(t) * (np.cos(t) - 1.0)], axis=1)
    return SCURVE_SCALE * pts + SCURVE_NOISE * rng.standard_normal((n, 2))


def sampler(kind: str):
    """A ``(n, rng) -> array`` sampler for the trainers."""
    return partial(_draw, canonical_kind(kind))


def _draw(kind, n, rng):
    return sample_dataset(kind, n, rng)


@dataclass(frozen=True)
class TaskSpec:
    source: str
    target: str
    name: str = ""
    allow_identity: bool = False

    def __post_init__(self):
        src, tgt = canonical_kind(self.source), canonical_kind(self.target)
        if src == tgt and not self.allow_identity:
            raise ValueError("source and target coincide; pass allow_identity=True to permit it")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        if not self.name:
            object.__setattr__(self, "name", f"{_SHORT[src]}->{_SHORT[tgt]}")

    @classmethod
    def parse(cls, text: str) -> TaskSpec:
        """Parse ``"8gs->moons"`` (``→`` also accepted)."""
        parts = text.replace("→", "->").split("->")
        if len(parts) != 2:
            raise ValueError(f"task {text!r} is not of the form SOURCE->TARGET")
        return cls(parts[0], parts[1])


TABLE1_TASKS = tuple(
    TaskSpec.parse(s) for s in ("N->8gs", "8gs->moons", "N->moons", "N->scurve", "moons->8gs")
)


@dataclass(frozen=True)
class EvalConfig:
    n_test: int = 1024
    n_steps: int = 100
    solver: str = "rk4"
    atol: float = 1e-6
    rtol: float = 1e-6
    gt_samples: int = 4096

    def __post_init__(self):
        if self.solver not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.solver!r}")


def generate(field, X0, config: EvalConfig = EvalConfig()) -> Trajectory:
    if config.solver == "rk4":
        return integrate_rk4(field, X0, config.n_steps)
    grid = np.linspace(0.0, 1.0, config.n_steps + 1)
    return integrate_dopri5(field, X0, atol=config.atol, rtol=config.rtol, t_eval=grid)


@lru_cache(maxsize=64)
def ground_truth_w2(task: TaskSpec, n: int, seed: int) -> float:
    """Reference W2^2 between the task's source and target from ``n`` samples each."""
    rng = np.random.default_rng([seed, 0x6774])
    X = sample_dataset(task.source, n, rng)
    Y = sample_dataset(task.target, n, rng)
    return empirical_w2(X, Y)


def _eval_samples(task: TaskSpec, n: int, seed: int):
    rng = np.random.default_rng([seed, 0x6576])
    return sample_dataset(task.source, n, rng), sample_dataset(task.target, n, rng)


def straightness_score(traj: Trajectory) -> float:
    """Mean over samples of the largest distance to the chord ``x(0) -> x(1)``, relative to chord length."""
    S = traj.states
    if S.shape[0] < 3:
        raise ValueError("need at least three time points")
    start, end = S[0], S[-1]
    chord = end - start
    length = np.linalg.norm(chord, axis=-1)
    ok = length >= 1e-9
    if not np.any(ok):
        return 0.0
    e = chord[ok] / length[ok, None]
    rel = S[:, ok] - start[ok]
    along = np.sum(rel * e, axis=-1, keepdims=True)
    dist = np.linalg.norm(rel - along * e, axis=-1)
    return float(np.mean(dist.max(axis=0) / length[ok]))


def evaluate(field, task: TaskSpec, n_test: int = 1024, seed: int = 0, config: EvalConfig | None = None, gt_seed: int | None = None) -> dict:
    """W2^2 to fresh target samples, NPE against the reference W2^2, straightness, and NFE."""
    config = config or replace(EvalConfig(), n_test=n_test)
    X0, Y = _eval_samples(task, config.n_test, seed)
    traj = generate(field, X0, config)
    w2 = empirical_w2(traj.final, Y)
    gt = ground_truth_w2(task, config.gt_samples, seed if gt_seed is None else gt_seed)
    if gt < 1e-9:
        raise ValueError(f"degenerate task {task.name}: reference W2^2 is {gt:.3g}")
    pe = path_energy(traj)
    out = {
        "w2": w2,
        "npe": abs(pe - gt) / gt,
        "pe": pe,
        "w2_ref": gt,
        "straightness": straightness_score(traj),
        "n_test": config.n_test,
        "seed": seed,
    }
    if config.solver == "dopri5":
        out["nfe"] = traj.nfe
    return out


def eval_w2(field, task: TaskSpec, n_test: int = 1024, seed: int = 0) -> float:
    X0, Y = _eval_samples(task, n_test, seed)
    return empirical_w2(integrate_rk4(field, X0, 100, record_velocities=False).final, Y)


def eval_npe(field, task: TaskSpec, n_test: int = 1024, seed: int = 0, gt_samples: int = 4096) -> float:
    gt = ground_truth_w2(task, gt_samples, seed)
    if gt < 1e-9:
        raise ValueError(f"degenerate task {task.name}: reference W2^2 is {gt:.3g}")
    X0, _ = _eval_samples(task, n_test, seed)
    return abs(path_energy(integrate_rk4(field, X0, 100)) - gt) / gt


PHASES = ("phase1", "refined", "control")
METRICS = ("w2", "npe", "straightness")


@dataclass(frozen=True)
class BenchConfig:
    phase1: Phase1Config = Phase1Config()
    refine: RefineConfig = RefineConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    workers: int = 1


@dataclass
class BenchmarkReport:
    """Per-trial metrics plus (task, method, phase) aggregates."""

    trials: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        groups: dict = {}
        for rec in self.trials:
            groups.setdefault((rec["task"], rec["method"], rec["phase"]), []).append(rec)
        out = []
        for (task, method, phase), recs in groups.items():
            row = {"task": task, "method": method, "phase": phase, "n_trials": len(recs)}
            for m in METRICS:
                vals = np.array([r[m] for r in recs])
                row[f"{m}_mean"] = float(vals.mean())
                row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) >= 2 else 0.0
            out.append(row)
        return out

    def values(self, task: str, method: str, phase: str, metric: str) -> np.ndarray:
        recs = [r for r in self.trials if (r["task"], r["method"], r["phase"]) == (task, method, phase)]
        return np.array([r[metric] for r in sorted(recs, key=lambda r: r["trial"])])

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows(), "trials": self.trials}, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "method", "phase", "metric", "mean", "std", "n_trials"])
        for row in self.rows():
            for m in METRICS:
                w.writerow([row["task"], row["method"], row["phase"], m, repr(row[f"{m}_mean"]), repr(row[f"{m}_std"]), row["n_trials"]])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> BenchmarkReport:
        return cls(trials=json.loads(text)["trials"])


def trial_seeds(seed: int, task_index: int, trial: int) -> dict:
    """Sub-seeds for one benchmark cell, derived from ``(seed, task_index, trial)``."""
    ss = np.random.SeedSequence([seed, task_index, trial])
    a, b, c = ss.generate_state(3)
    return {"phase1": int(a), "refine": int(b), "eval": int(c)}


def run_trial(task: TaskSpec, task_index: int, method: str, trial: int, config: BenchConfig) -> list[dict]:
    """Train phase 1 for 2N batches (snapshot at N), refine the N-batch model for its own budget, evaluate all three."""
    seeds = trial_seeds(config.seed, task_index, trial)
    n1 = config.phase1.n_batches
    p1 = replace(config.phase1, method=method, seed=seeds["phase1"], n_batches=2 * n1)
    src, tgt = sampler(task.source), sampler(task.target)
    control, snaps = train_phase1(p1, src, tgt, snapshots=(n1,))
    phase1 = snaps[n1]
    refined = refine(phase1, replace(config.refine, seed=seeds["refine"]), src, tgt)
    gt_seed = int(np.random.SeedSequence([config.seed, task_index]).generate_state(1)[0])
    out = []
    for phase, f in (("phase1", phase1), ("refined", refined), ("control", control)):
        m = evaluate(f, task, seed=seeds["eval"], config=config.eval, gt_seed=gt_seed)
        out.append({"task": task.name, "method": method, "phase": phase, "trial": trial, **{k: m[k] for k in ("w2", "npe", "straightness", "pe", "w2_ref")}})
    return out


def run_benchmark(tasks, methods, trials: int, config: BenchConfig = BenchConfig()) -> BenchmarkReport:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    cells = [(task, ti, m, k) for ti, task in enumerate(tasks) for m in methods for k in range(trials)]
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(lambda c: run_trial(*c, config), cells))
    else:
        results = [run_trial(*c, config) for c in cells]
    return BenchmarkReport(trials=[r for res in results for r in res])
