"""Convergence-rate experiments on strongly convex federated quadratics.

Each client k holds ``F_k(w) = 0.5 * ||A_k w - b_k||^2`` and the global
objective is ``F = sum_k p_k F_k``. In theorem mode, FedBAT runs without
warm-up and without step-size learning: at every local step the update
``m = w_local - w_global`` is binarized with ``alpha = max|m_i|`` before the
gradient is taken, and the final update is binarized the same way before
upload. The learning rate decays as ``2 / (mu (gamma + t))``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .binarizer import binarize_theory_variant
from .fed_engine import RoundPlan, sample_clients
from .tensor import SeededRng, ordered_sum

DIVERGENCE_GAP = 1e10


class DivergenceError(RuntimeError):
    def __init__(self, round_: int, gap: float):
        super().__init__(f"optimality gap {gap:.3g} at round {round_} exceeds {DIVERGENCE_GAP:g}")
        self.round = round_
        self.gap = gap


class NonPositiveGapError(ValueError):
    pass


class QuadraticObjective:
    """Least-squares client objective usable as a model architecture.

    ``forward``/``backward`` follow the same protocol as :class:`fedbat.nn.MLP`
    with ``params = [w]`` and ``batch = (A_rows, b_rows, scale)``.
    """

    def __init__(self, dim: int):
        self.dim = dim

    @property
    def layer_sizes(self) -> list[int]:
        return [self.dim]

    def forward(self, params, batch):
        A, b, scale = batch
        r = A @ params[0] - b
        return 0.5 * scale * float(r @ r), (A, r, scale)

    def backward(self, cache):
        A, r, scale = cache
        return [scale * (A.T @ r)]

    def batches(self, data, batch_size: int | None, rng: SeededRng):
        A, b = data
        rows = A.shape[0]
        if batch_size is None or batch_size >= rows:
            while True:
                yield A, b, 1.0
        while True:
            idx = rng.choice(rows, batch_size)
            yield A[idx], b[idx], rows / batch_size


@dataclass
class QuadraticProblem:
    A: list[np.ndarray]
    b: list[np.ndarray]
    p: np.ndarray
    w_star: np.ndarray
    f_star: float
    client_f_star: np.ndarray
    mu: float
    L: float

    @property
    def n_clients(self) -> int:
        return len(self.A)

    @property
    def dim(self) -> int:
        return self.w_star.size

    @property
    def heterogeneity_gap(self) -> float:
        """F* minus the weighted sum of the clients' own minima."""
        return self.f_star - float(self.p @ self.client_f_star)

    def client_loss(self, k: int, w: np.ndarray) -> float:
        r = self.A[k] @ w - self.b[k]
        return 0.5 * float(r @ r)

    def client_grad(self, k: int, w: np.ndarray) -> np.ndarray:
        return self.A[k].T @ (self.A[k] @ w - self.b[k])

    def loss(self, w: np.ndarray) -> float:
        return ordered_sum(np.array([pk * self.client_loss(k, w) for k, pk in enumerate(self.p)]))

    def grad(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        for k, pk in enumerate(self.p):
            g += pk * self.client_grad(k, w)
        return g


def _orthogonal(rng: SeededRng, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal_array((dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_problem(n_clients: int, dim: int, heterogeneity: float, seed: int,
                 *, singular_range: tuple[float, float] = (1.0, 2.0),
                 min_curvature: float = 1e-6) -> QuadraticProblem:
    """Seeded strongly convex federated least-squares problem.

    Each ``A_k`` is square with singular values drawn from ``singular_range``;
    ``b_k = A_k w_shared + heterogeneity * delta_k``, so with zero
    heterogeneity every client is minimized by ``w_shared``.
    """
    if dim < 1 or n_clients < 1:
        raise ValueError("dim and n_clients must be positive")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be nonnegative")
    rng = SeededRng(seed).split("quadratic")
    lo, hi = singular_range
    w_shared = rng.split("w_shared").normal_array(dim)
    A, b, fk = [], [], []
    for k in range(n_clients):
        crng = rng.split(("client", k))
        s = lo + (hi - lo) * crng.uniform(dim)
        Ak = _orthogonal(crng.split("U"), dim) @ np.diag(s) @ _orthogonal(crng.split("V"), dim).T
        delta = crng.split("delta").normal_array(dim)
        bk = Ak @ w_shared + heterogeneity * delta
        wk, *_ = np.linalg.lstsq(Ak, bk, rcond=None)
        rk = Ak @ wk - bk
        A.append(Ak)
        b.append(bk)
        fk.append(0.5 * float(rk @ rk))
    p = np.full(n_clients, 1.0 / n_clients)
    H = sum(pk * Ak.T @ Ak for pk, Ak in zip(p, A))
    c = sum(pk * Ak.T @ bk for pk, Ak, bk in zip(p, A, b))
    eig = np.linalg.eigvalsh(H)
    if eig[0] < min_curvature * max(eig[-1], 1.0):
        raise ValueError(f"global curvature {eig[0]:.3g} below conditioning floor")
    w_star = np.linalg.solve(H, c)
    prob = QuadraticProblem(A, b, p, w_star, 0.0, np.array(fk), float(eig[0]), float(eig[-1]))
    prob.f_star = prob.loss(w_star)
    return prob


def lr_schedule_theorem(mu: float, L: float, tau: int, t: int) -> float:
    """``2 / (mu (gamma + t))`` with ``gamma = max(8 L / mu, tau) - 1``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    gamma = max(8.0 * L / mu, tau) - 1.0
    return 2.0 / (mu * (gamma + t))


@dataclass
class RateFit:
    gaps: np.ndarray
    slope: float
    halfwidth: float
    window: float
    rounds: tuple[int, int]  # first and last round (1-based) in the fitted tail

    def within(self, lo: float = -1.3, hi: float = -0.7) -> bool:
        return lo <= self.slope <= hi


def fit_rate(gaps, window: float = 0.9, confidence: float = 0.95) -> RateFit:
    """Least-squares slope of log(gap) against log(round) over the tail ``window``.

    ``gaps[i]`` is the gap after round ``i + 1``.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if not 0 < window <= 1:
        raise ValueError("window must lie in (0, 1]")
    n = gaps.size
    start = n - max(2, int(round(window * n)))
    tail = gaps[start:]
    if np.any(~(tail > 0)):
        raise NonPositiveGapError("gaps in the fitted window must be positive")
    t = np.arange(start + 1, n + 1, dtype=np.float64)
    res = stats.linregress(np.log(t), np.log(tail))
    dof = tail.size - 2
    half = float(stats.t.ppf(0.5 + confidence / 2, dof) * res.stderr) if dof > 0 else float("inf")
    return RateFit(gaps=gaps, slope=float(res.slope), halfwidth=half, window=window,
                   rounds=(start + 1, n))


@dataclass
class TheoryRun:
    per_seed: np.ndarray  # (seeds, rounds) optimality gaps
    mean_gaps: np.ndarray
    fit: RateFit
    control: bool
    participation: int | None
    local_steps: list[int] = field(default_factory=list)

    def summary(self, band=(-1.3, -0.7)) -> dict:
        return {
            "slope": self.fit.slope,
            "halfwidth": self.fit.halfwidth,
            "window_rounds": list(self.fit.rounds),
            "final_gap": float(self.mean_gaps[-1]),
            "seeds": int(self.per_seed.shape[0]),
            "rounds": int(self.per_seed.shape[1]),
            "control": self.control,
            "participation": "full" if self.participation is None else self.participation,
            "band": list(band),
            "passed": bool(self.fit.within(*band)),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "mean_gap"] + [f"seed_{i}" for i in range(self.per_seed.shape[0])])
        for r in range(self.per_seed.shape[1]):
            w.writerow([r + 1, repr(float(self.mean_gaps[r]))] + [repr(float(g)) for g in self.per_seed[:, r]])
        return buf.getvalue()


def _identity(m, rng):
    return m


def theorem_mode_gaps(problem: QuadraticProblem, tau: int, rounds: int, seed: int, *,
                      participation: int | None = None, control: bool = False,
                      lr_scale: float = 1.0, batch_size: int | None = None,
                      w0: np.ndarray | None = None, trajectory: list | None = None,
                      local_steps: list | None = None) -> np.ndarray:
    """Optimality gap after each round for one seeded run.

    ``participation=None`` averages all clients with their weights ``p_k``;
    an integer K samples K clients per round and renormalizes their weights.
    ``control=True`` skips binarization (plain FedAvg with the same schedule).
    """
    binarize = _identity if control else binarize_theory_variant
    root = SeededRng(seed).split("theorem")
    obj = QuadraticObjective(problem.dim)
    w = np.zeros(problem.dim) if w0 is None else np.array(w0, dtype=np.float64)
    gaps = np.empty(rounds)
    N = problem.n_clients
    for r in range(rounds):
        if participation is None or participation == N:
            # K = N selects every client, so the renormalized weights are p_k
            plan = RoundPlan(r, tuple(range(N)))
            weights = {k: problem.p[k] for k in plan.clients}
        else:
            plan = sample_clients(N, participation, root.split(("sample", r)), r)
            total = ordered_sum(problem.p[list(plan.clients)])
            weights = {k: problem.p[k] / total for k in plan.clients}
        delta = np.zeros_like(w)
        for k in plan.clients:
            crng = root.split(("client", r, k))
            brng = crng.split("binarize")
            batches = obj.batches((problem.A[k], problem.b[k]), batch_size, crng.split("batches"))
            wk = w.copy()
            n_steps = 0
            for s in range(tau):
                t = r * tau + s
                eta = lr_scale * lr_schedule_theorem(problem.mu, problem.L, tau, t)
                x = w + binarize(wk - w, brng)
                _, cache = obj.forward([x], next(batches))
                wk = wk - eta * obj.backward(cache)[0]
                n_steps += 1
            if local_steps is not None:
                local_steps.append(n_steps)
            delta += weights[k] * binarize(wk - w, brng)
        w = w + delta
        if trajectory is not None:
            trajectory.append(w.copy())
        gap = problem.loss(w) - problem.f_star
        if not math.isfinite(gap) or gap > DIVERGENCE_GAP:
            raise DivergenceError(r + 1, gap)
        gaps[r] = gap
    return gaps


def run_theorem_mode(problem: QuadraticProblem, tau: int, rounds: int, *, seeds: int = 10,
                     participation: int | None = None, control: bool = False, seed: int = 0,
                     lr_scale: float = 1.0, batch_size: int | None = None,
                     window: float = 0.9) -> TheoryRun:
    """Seed-averaged theorem-mode gaps and their tail log-log slope."""
    if rounds < 100:
        raise ValueError("rate fits need at least 100 rounds")
    if seeds < 1:
        raise ValueError("need at least one seed")
    per_seed = np.stack([
        theorem_mode_gaps(problem, tau, rounds, seed + i, participation=participation, control=control,
                          lr_scale=lr_scale, batch_size=batch_size)
        for i in range(seeds)
    ])
    mean = per_seed.mean(axis=0)
    return TheoryRun(per_seed, mean, fit_rate(mean, window), control, participation)


def summary_json(run: TheoryRun, band=(-1.3, -0.7)) -> str:
    return json.dumps(run.summary(band), indent=2, sort_keys=True)
