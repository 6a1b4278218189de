"""Performance oracle: swarm datasets, synthetic log-linear truths and CSV IO."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text, canonical_json, fmt_float
from .domains import DomainSet, Mixture
from .errors import DimensionMismatch, SchemaError, SimplexViolation, UnknownDomainColumn, ValidationError
from .objective import LogLinearObjective
from .optimize import Exact, SolveSpec, objective_value, solve_exact

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SwarmDataset:
    """Paired mixtures ``X`` (K x m) and per-task scores ``Y`` (K x n)."""

    domains: DomainSet
    tasks: tuple
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, ndmin=2)
        Y = np.array(self.Y, dtype=np.float64, ndmin=2)
        tasks = tuple(self.tasks)
        if len(tasks) < 1:
            raise ValidationError("a swarm dataset needs at least one task")
        if X.shape[0] < 1:
            raise ValidationError("a swarm dataset needs at least one record")
        if X.shape[1] != len(self.domains):
            raise DimensionMismatch(f"mixtures have {X.shape[1]} columns for {len(self.domains)} domains")
        if Y.shape != (X.shape[0], len(tasks)):
            raise DimensionMismatch(f"scores shape {Y.shape} does not match {X.shape[0]} records x {len(tasks)} tasks")
        if not np.all(np.isfinite(Y)) or not np.all(np.isfinite(X)):
            raise ValidationError("scores and weights must be finite")
        if np.any(X < -1e-12) or np.any(np.abs(X.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise SimplexViolation("swarm mixtures must lie on the simplex")
        X = np.maximum(X, 0.0)
        X = X / X.sum(axis=1, keepdims=True)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "tasks", tasks)

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def records(self):
        return [(Mixture.over(self.domains, x), y) for x, y in zip(self.X, self.Y)]

    def task_index(self, task) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise ValidationError(f"unknown task {task!r}") from None

    def scores(self, task) -> np.ndarray:
        return self.Y[:, self.task_index(task)]

    def subset(self, rows) -> "SwarmDataset":
        rows = np.asarray(rows)
        return SwarmDataset(self.domains, self.tasks, self.X[rows], self.Y[rows])

    def with_scores(self, tasks, Y) -> "SwarmDataset":
        return SwarmDataset(self.domains, tuple(tasks), self.X, Y)

    def concat(self, other: "SwarmDataset") -> "SwarmDataset":
        if other.domains.ids != self.domains.ids or other.tasks != self.tasks:
            raise DimensionMismatch("datasets differ in domains or tasks")
        return SwarmDataset(self.domains, self.tasks, np.vstack([self.X, other.X]), np.vstack([self.Y, other.Y]))


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    """Per-task log-linear truth ``c_i + exp(A_i . p)`` plus Gaussian noise."""

    ids: tuple
    tasks: tuple
    c: np.ndarray
    A: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        c = np.array(self.c, dtype=np.float64).reshape(-1)
        A = np.array(self.A, dtype=np.float64, ndmin=2)
        ids, tasks = tuple(self.ids), tuple(self.tasks)
        if A.shape != (len(tasks), len(ids)) or c.shape != (len(tasks),):
            raise DimensionMismatch(f"A {A.shape} and c {c.shape} disagree with {len(tasks)} tasks x {len(ids)} domains")
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise ValidationError("truth offsets must be positive and finite")
        if not np.all(np.isfinite(A)):
            raise ValidationError("truth slopes must be finite")
        if not (self.noise_sd >= 0):
            raise ValidationError("noise_sd must be nonnegative")
        c.setflags(write=False)
        A.setflags(write=False)
        for k, v in (("ids", ids), ("tasks", tasks), ("c", c), ("A", A), ("noise_sd", float(self.noise_sd))):
            object.__setattr__(self, k, v)

    @property
    def n(self):
        return len(self.tasks)

    @property
    def m(self):
        return len(self.ids)

    @classmethod
    def random(cls, ids, n_tasks: int, seed: int, noise_sd: float = 0.0, tasks=None) -> "GroundTruthModel":
        """Random truth with ``c ~ U(0.2, 1)`` and ``A ~ N(0, 1) / sqrt(m)``."""
        ids = tuple(ids)
        m = len(ids)
        rng = np.random.default_rng(seed)
        c = rng.uniform(0.2, 1.0, size=n_tasks)
        A = rng.normal(size=(n_tasks, m)) / np.sqrt(m)
        tasks = tuple(tasks) if tasks is not None else tuple(f"t{i}" for i in range(n_tasks))
        return cls(ids, tasks, c, A, noise_sd)

    def restrict(self, ids) -> "GroundTruthModel":
        """Truth over a subset of domains (absent domains are weight zero)."""
        pos = {d: k for k, d in enumerate(self.ids)}
        missing = [d for d in ids if d not in pos]
        if missing:
            raise ValidationError(f"truth has no slope for domains {missing}")
        cols = [pos[d] for d in ids]
        return GroundTruthModel(tuple(ids), self.tasks, self.c, self.A[:, cols], self.noise_sd)

    def noiseless(self) -> "GroundTruthModel":
        return GroundTruthModel(self.ids, self.tasks, self.c, self.A, 0.0)

    def objective(self, weights=None) -> LogLinearObjective:
        return LogLinearObjective(self.c, self.A, weights)

    def _aligned(self, p):
        if isinstance(p, Mixture):
            if p.ids != self.ids:
                if set(p.ids) != set(self.ids):
                    raise DimensionMismatch("mixture and truth are over different domains")
                p = p.restrict(self.ids)
            return p.weights
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != self.m:
            raise DimensionMismatch(f"mixture has {p.shape[-1]} weights for {self.m} domains")
        return p

    def mean(self, p) -> np.ndarray:
        """Noiseless scores; ``p`` may be a single mixture or a K x m array."""
        P = self._aligned(p)
        return self.c + np.exp(np.atleast_2d(P) @ self.A.T) if P.ndim == 2 else self.c + np.exp(self.A @ P)

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "tasks": list(self.tasks),
            "c": self.c.tolist(),
            "A": self.A.tolist(),
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, obj) -> "GroundTruthModel":
        try:
            return cls(tuple(obj["ids"]), tuple(obj["tasks"]), obj["c"], obj["A"], float(obj.get("noise_sd", 0.0)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad truth document: {exc}") from None

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def evaluate_truth(g: GroundTruthModel, p, seed=None) -> np.ndarray:
    """Scores ``c + exp(A p) + eps`` with ``eps ~ N(0, noise_sd^2)`` drawn from ``seed``.

    ``p`` may be a Mixture, a weight vector or a K x m matrix of weights.
    """
    y = g.mean(p)
    if g.noise_sd > 0:
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, g.noise_sd, size=y.shape)
    return y


def oracle_dataset(g: GroundTruthModel, d: DomainSet, mixes, seed=None) -> SwarmDataset:
    """Evaluate ``g`` on swarm ``mixes`` over ``d`` (truth restricted to ``d``)."""
    X = np.array([m.weights if isinstance(m, Mixture) else m for m in mixes], dtype=np.float64, ndmin=2)
    gd = g if g.ids == d.ids else g.restrict(d.ids)
    return SwarmDataset(d, g.tasks, X, evaluate_truth(gd, X, seed))


def simplex_grid(m: int, step: float) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``step``."""
    n = int(round(1.0 / step))
    pts = []
    for cuts in itertools.combinations(range(n + m - 1), m - 1):
        prev, row = -1, []
        for cpos in cuts:
            row.append(cpos - prev - 1)
            prev = cpos
        row.append(n + m - 2 - prev)
        pts.append(row)
    return np.array(pts, dtype=np.float64) / n


def grid_optimum(g: GroundTruthModel, caps, lam, p0, step=0.01):
    """Best grid point of the capped simplex for the noiseless truth objective."""
    P = simplex_grid(g.m, step)
    if caps is not None:
        P = P[np.all(P <= np.asarray(caps) + 1e-12, axis=1)]
    if P.shape[0] == 0:
        raise ValidationError("no grid point satisfies the caps")
    obj = g.objective()
    p0w = p0.weights if isinstance(p0, Mixture) else np.asarray(p0)
    vals = np.array([objective_value(obj, p, p0w, lam) for p in P])
    return P[int(np.argmin(vals))]


def truth_optimum(g: GroundTruthModel, caps=None, lam: float = 0.0, p0: Mixture | None = None, *, tol=1e-10, verify=False) -> Mixture:
    """Minimiser of the mean noiseless truth plus ``lam * KL(p || p0)`` on the capped simplex.

    With ``verify`` and ``m <= 3`` the result is cross-checked against a grid
    of step 0.01 and a ValidationError raised if they differ by more than 0.02
    in total variation.
    """
    if p0 is None:
        p0 = Mixture(g.ids, np.full(g.m, 1.0 / g.m))
    spec = SolveSpec(p0, lam, None if caps is None else np.asarray(caps, dtype=np.float64), Exact(tol=tol))
    res = solve_exact(g.objective(), spec)
    if verify and g.m <= 3:
        best = grid_optimum(g, caps, lam, p0)
        tv = 0.5 * np.abs(best - res.weights).sum()
        if tv > 0.02:
            raise ValidationError(f"solver and grid optimum differ by TV {tv:.4f}")
    return res.mixture


# --- CSV -------------------------------------------------------------------


def results_to_csv(ds: SwarmDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"mix:{i}" for i in ds.domains.ids] + [f"task:{t}" for t in ds.tasks])
    for x, y in zip(ds.X, ds.Y):
        w.writerow([fmt_float(v) for v in x] + [fmt_float(v) for v in y])
    return buf.getvalue()


def write_results(path, ds: SwarmDataset):
    return atomic_write_text(path, results_to_csv(ds))


def parse_results(text: str, domains: DomainSet | None = None) -> SwarmDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty results file")
    header = [h.strip() for h in rows[0]]
    mix_cols, task_cols = [], []
    for k, h in enumerate(header):
        if h.startswith("mix:") and len(h) > 4:
            mix_cols.append((h[4:], k))
        elif h.startswith("task:") and len(h) > 5:
            task_cols.append((h[5:], k))
        else:
            raise SchemaError(f"column {h!r} is neither mix:<id> nor task:<id>")
    if not mix_cols or not task_cols:
        raise SchemaError("results need at least one mix: and one task: column")
    names = [i for i, _ in mix_cols]
    if len(set(names)) != len(names) or len({t for t, _ in task_cols}) != len(task_cols):
        raise SchemaError("duplicate columns")
    if domains is None:
        domains = DomainSet(tuple((i, 1) for i in names))
    else:
        unknown = sorted(set(names) - set(domains.ids))
        if unknown:
            raise UnknownDomainColumn(f"columns for unknown domains: {unknown}")
        missing = sorted(set(domains.ids) - set(names))
        if missing:
            raise SchemaError(f"no mix: column for domains {missing}")
    col = dict(mix_cols)
    order = [col[i] for i in domains.ids]
    tcols = [k for _, k in task_cols]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not body:
        raise SchemaError("results file has no data rows")
    X = np.empty((len(body), len(order)))
    Y = np.empty((len(body), len(tcols)))
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise SchemaError(f"row {r + 2} has {len(row)} cells, expected {len(header)}")
        try:
            X[r] = [float(row[k]) for k in order]
            Y[r] = [float(row[k]) for k in tcols]
        except ValueError as exc:
            raise SchemaError(f"row {r + 2}: {exc}") from None
        if np.any(X[r] < 0) or abs(X[r].sum() - 1.0) > ROW_SUM_TOL:
            raise SimplexViolation(f"row {r + 2} weights sum to {X[r].sum()!r}")
    if not np.all(np.isfinite(Y)):
        raise SchemaError("non-finite score")
    return SwarmDataset(domains, tuple(t for t, _ in task_cols), X, Y)


def ingest_results(path, domains: DomainSet | None = None) -> SwarmDataset:
    """Read a swarm-results CSV (``mix:<id>`` and ``task:<id>`` columns)."""
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_results(fh.read(), domains)
