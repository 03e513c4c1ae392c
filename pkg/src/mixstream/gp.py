"""One-dimensional Gaussian-process regression and UCB search over a ratio in [0, 1]."""

from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import IllConditionedGramError, ObjectiveError
from .quantizer import objective as combine_objective

NOISE_FLOOR = 1e-8
INITIAL_DESIGN = (0.0, 0.05, 0.2, 1.0)
GRID_STEP = 1e-3


@dataclass(frozen=True)
class GPState:
    x: tuple[float, ...] = ()
    y: tuple[float, ...] = ()
    length_scale: float = 0.1
    signal: float = 1.0
    noise: float = NOISE_FLOOR

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same length")
        if any(not 0.0 <= v <= 1.0 for v in self.x):
            raise ValueError("sample inputs must lie in [0, 1]")
        if self.length_scale <= 0 or self.signal <= 0:
            raise ValueError("length scale and signal amplitude must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def effective_noise(self) -> float:
        return max(self.noise, NOISE_FLOOR)

    def add(self, x: float, y: float) -> "GPState":
        return replace(self, x=self.x + (float(x),), y=self.y + (float(y),))


def kernel_eval(x, x2, length_scale: float = 0.1, signal: float = 1.0):
    """Squared-exponential covariance; broadcasts over arrays."""
    d = np.subtract(x, x2, dtype=np.float64)
    return signal ** 2 * np.exp(-(d * d) / (2.0 * length_scale ** 2))


def _factor(state: GPState) -> np.ndarray:
    x = np.asarray(state.x, dtype=np.float64)
    gram = kernel_eval(x[:, None], x[None, :], state.length_scale, state.signal)
    gram[np.diag_indices_from(gram)] += state.effective_noise ** 2
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise IllConditionedGramError(state.effective_noise) from None


def posterior(state: GPState, x):
    """Posterior mean and variance at ``x`` (scalar or array) under a zero prior mean."""
    q = np.atleast_1d(np.asarray(x, dtype=np.float64))
    prior = state.signal ** 2
    if not state.x:
        mean, var = np.zeros_like(q), np.full_like(q, prior)
    else:
        chol = _factor(state)
        xs = np.asarray(state.x, dtype=np.float64)
        cross = kernel_eval(xs[:, None], q[None, :], state.length_scale, state.signal)
        v = np.linalg.solve(chol, cross)
        w = np.linalg.solve(chol, np.asarray(state.y, dtype=np.float64))
        mean = v.T @ w
        var = np.clip(prior - np.einsum("ij,ij->j", v, v), 0.0, prior)
    if np.ndim(x) == 0:
        return float(mean[0]), float(var[0])
    return mean, var


def ucb(state: GPState, x, omega: float = 2.0):
    if omega < 0:
        raise ValueError("omega must be >= 0")
    mean, var = posterior(state, x)
    return mean + omega * np.sqrt(var)


def omega_schedule(t: int, delta: float = 0.1) -> float:
    """Exploration weight that grows slowly with the iteration count ``t >= 1``."""
    return math.sqrt(2.0 * math.log(t * t * math.pi ** 2 / (6.0 * delta)))


def grid(step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


@dataclass(frozen=True)
class TraceRow:
    iter: int
    p: float
    L: float
    mean: float   # posterior prediction at p before it was sampled (nan for the initial design)
    var: float
    ucb: float


@dataclass
class GPResult:
    best_p: float
    best_L: float
    trace: list[TraceRow] = field(default_factory=list)
    state: GPState | None = None


def _standardize(y: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(y, dtype=np.float64)
    mu = float(arr.mean())
    sd = float(arr.std()) if arr.size >= 2 else 1.0
    return mu, sd if sd > 0 else 1.0


def optimize(objective: Callable[[float], float], n_iter: int = 30, seed: int = 0, *,
             length_scale: float = 0.1, signal: float = 1.0, noise: float = 1e-3,
             omega: float | None = 2.0, initial: Sequence[float] = INITIAL_DESIGN,
             random_initial: int = 0, step: float = GRID_STEP) -> GPResult:
    """Maximize ``objective`` over [0, 1].

    ``n_iter`` counts every objective evaluation including the initial design.
    ``omega=None`` switches to :func:`omega_schedule`.  ``seed`` only drives the
    optional ``random_initial`` extra starting points; the rest is deterministic.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    rng = np.random.default_rng(seed)
    starts = [float(p) for p in initial]
    starts += [float(round(v / step) * step) for v in rng.random(random_initial)]
    candidates = grid(step)
    raw = GPState(length_scale=length_scale, signal=signal, noise=noise)
    trace: list[TraceRow] = []

    def sample(p, mean, var, acq):
        try:
            value = float(objective(p))
        except ObjectiveError as exc:
            raise ObjectiveError(str(exc), list(trace)) from exc
        except Exception as exc:
            raise ObjectiveError(f"objective failed at p={p:g}: {exc}", list(trace)) from exc
        if not math.isfinite(value):
            raise ObjectiveError(f"objective returned {value} at p={p:g}", list(trace))
        trace.append(TraceRow(len(trace) + 1, p, value, mean, var, acq))
        return value

    nan = float("nan")
    for p in starts[:n_iter]:
        raw = raw.add(p, sample(p, nan, nan, nan))

    while len(trace) < n_iter:
        t = len(trace) + 1
        w = omega_schedule(t) if omega is None else omega
        mu, sd = _standardize(raw.y)
        fitted = replace(raw, y=tuple((v - mu) / sd for v in raw.y))
        m, s = posterior(fitted, candidates)
        acq = m + w * np.sqrt(s)
        j = int(np.argmax(acq))  # first maximum = smallest p
        p = float(candidates[j])
        mean, var = mu + sd * float(m[j]), sd * sd * float(s[j])
        raw = raw.add(p, sample(p, mean, var, mean + w * math.sqrt(var)))

    best = max(trace, key=lambda r: (r.L, -r.p))
    return GPResult(best.p, best.L, trace, raw)


def iterations_to_reach(trace: Sequence[TraceRow], target_p: float, tol: float = 0.02) -> int | None:
    """First iteration whose best-so-far sample lies within ``tol`` of ``target_p``."""
    best = None
    for row in trace:
        if best is None or (row.L, -row.p) > (best.L, -best.p):
            best = row
        if abs(best.p - target_p) <= tol + 1e-12:
            return row.iter
    return None


def synthetic_objective(a_inf: float, c: float, k: float, gamma: float = 0.01,
                        n_i: int = 1, n_total: int = 1) -> Callable[[float], float]:
    """Saturating accuracy curve plus the weighted compression rate."""
    from .quantizer import compression_rate

    def f(p: float) -> float:
        return combine_objective(a_inf - c * math.exp(-k * p), compression_rate(p, n_i, n_total), gamma)

    return f


def grid_argmax(f: Callable[[float], float], step: float = GRID_STEP) -> float:
    g = grid(step)
    vals = np.array([f(float(p)) for p in g])
    return float(g[int(np.argmax(vals))])


class CommandObjective:
    """Runs an external command per sample: ``p`` on stdin, ``L`` or ``mAP C`` on stdout."""

    def __init__(self, command: str | Sequence[str], gamma: float = 0.01, timeout: float | None = None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.gamma = gamma
        self.timeout = timeout

    def __call__(self, p: float) -> float:
        try:
            proc = subprocess.run(self.argv, input=f"{p!r}\n", capture_output=True, text=True,
                                  timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ObjectiveError(f"objective command failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ObjectiveError(
                f"objective command exited {proc.returncode} at p={p!r}: {proc.stderr.strip()}")
        fields = proc.stdout.split()
        try:
            nums = [float(v) for v in fields]
        except ValueError:
            nums = []
        if len(nums) == 1:
            return nums[0]
        if len(nums) == 2:
            return combine_objective(nums[0], nums[1], self.gamma)
        raise ObjectiveError(f"objective command printed {proc.stdout.strip()!r}, expected 'L' or 'mAP C'")
