"""Dense convex QP representation and a batch interior-point solver.

Inequalities are read as A_ineq x <= b_ineq and handled through a relaxed log
barrier on the slack h = b_ineq - A_ineq x (feasible <=> h >= 0; the barrier is
defined for all real h, so infeasible iterates are penalized rather than
forbidden). The equality-constrained barrier subproblem is solved with Newton
steps whose search direction comes from an LDL^T factorization of the KKT
matrix [[hess, A_eq^T], [A_eq, 0]].
"""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import get_lapack_funcs

KKT_REGULARIZATION = 1e-10
PIVOT_TOLERANCE = 1e-12
MAX_BACKTRACKS = 40

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERS = "max_iters"
STATUS_NUMERICAL_FAILURE = "numerical_failure"


class QpError(ValueError):
    """Raised for malformed problems or batch dimension mismatches."""


@dataclass
class QpProblem:
    """min 0.5 x^T H x + g^T x  s.t.  A_eq x = b_eq,  A_ineq x <= b_ineq."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise QpError(f"H must be {n}x{n}, got {self.H.shape}")
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_ineq = _as_matrix(self.A_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq, self.A_ineq.shape[0], "b_ineq")

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def m(self) -> int:
        return self.A_eq.shape[0]

    @property
    def p(self) -> int:
        return self.A_ineq.shape[0]

    def dimensions(self) -> tuple[int, int, int]:
        return self.n, self.m, self.p

    def validate(self, check_definite: bool = False) -> None:
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.g)):
            raise QpError("non-finite objective data")
        if np.linalg.norm(self.H - self.H.T) > 1e-10:
            raise QpError("H is not symmetric within 1e-10")
        for arr, name in ((self.A_eq, "A_eq"), (self.b_eq, "b_eq"),
                          (self.A_ineq, "A_ineq"), (self.b_ineq, "b_ineq")):
            if not np.all(np.isfinite(arr)):
                raise QpError(f"non-finite entries in {name}")
        if check_definite:
            w = np.linalg.eigvalsh(0.5 * (self.H + self.H.T))
            if w.min() <= 0.0:
                raise QpError(f"H is not positive definite (min eig {w.min():.3e})")

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def constraint_violation(self, x: np.ndarray) -> float:
        """Most violated constraint margin; positive means violated, 0 if unconstrained."""
        worst = 0.0 if (self.m == 0 and self.p == 0) else -np.inf
        if self.p:
            worst = max(worst, float(np.max(self.A_ineq @ x - self.b_ineq)))
        if self.m:
            worst = max(worst, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        return worst


def _as_matrix(a, n: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != n:
        raise QpError(f"constraint matrix must have {n} columns, got {a.shape}")
    return a

def _as_vector(b, rows: int, name: str) -> np.ndarray:
    if b is None:
        b = np.zeros(0)
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != rows:
        raise QpError(f"{name} must have {rows} entries, got {b.shape[0]}")
    return b


@dataclass(frozen=True)
class BarrierConfig:
    """Relaxed-barrier schedule and Newton loop parameters.

    The barrier weight decreases geometrically from mu_init to mu_final; delta is
    the slack below which the log barrier hands over to its quadratic extension.
    Keep delta <= mu_final / lambda_max for the expected multiplier scale: an active
    constraint pushed into the quadratic branch is violated by about
    lambda * delta^2 / mu.
    """

    mu_init: float = 1e-2
    mu_final: float = 1e-6
    mu_decrease_factor: float = 0.1
    delta: float = 1e-6
    max_newton_iters: int = 50
    kkt_tolerance: float = 1e-8
    line_search_backtrack_factor: float = 0.5
    armijo_constant: float = 1e-4
    polish: bool = True

    def __post_init__(self):
        if self.mu_final > self.mu_init:
            raise QpError("mu_final must not exceed mu_init")
        if self.delta <= 0.0:
            raise QpError("delta must be positive")
        if not 0.0 < self.line_search_backtrack_factor < 1.0:
            raise QpError("backtrack factor must lie in (0, 1)")

    def mu_schedule(self) -> list[float]:
        mus = [self.mu_init]
        while mus[-1] > self.mu_final * (1.0 + 1e-12):
            mus.append(max(mus[-1] * self.mu_decrease_factor, self.mu_final))
        mus[-1] = self.mu_final  # land exactly on the terminal weight
        return mus


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    kkt_residual: float
    newton_iterations: int
    max_constraint_violation: float
    objective: float = np.nan
    outer_objectives: tuple[float, ...] = field(default_factory=tuple)


def relaxed_barrier(h, mu: float, delta: float):
    """Relaxed log barrier: -mu*ln(h) for h >= delta, quadratic extension below.

    Returns (value, first derivative, second derivative), elementwise for array h.
    Defined for all real h; the two branches meet at h = delta with matching value
    and derivatives.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim and bool(np.all(h >= delta)):  # pure log branch (common in the loop)
        value = -mu * np.log(h)
        d1 = -mu / h
        return value, d1, -d1 / h
    log_side = h >= delta
    hs = np.where(log_side, h, 1.0)  # guard log/division on the quadratic side
    t = (h - 2.0 * delta) / delta
    value = np.where(log_side, -mu * np.log(hs), 0.5 * mu * (t * t - 1.0) - mu * np.log(delta))
    d1 = np.where(log_side, -mu / hs, mu * t / delta)
    d2 = np.where(log_side, mu / (hs * hs), mu / (delta * delta))
    if value.ndim == 0:
        return float(value), float(d1), float(d2)
    return value, d1, d2


def _barrier_value(h: np.ndarray, mu: float, delta: float) -> float:
    if bool(np.all(h >= delta)):
        return float(-mu * np.sum(np.log(h)))
    log_side = h >= delta
    hs = np.where(log_side, h, 1.0)
    t = (h - 2.0 * delta) / delta
    vals = np.where(log_side, -mu * np.log(hs), 0.5 * mu * (t * t - 1.0) - mu * np.log(delta))
    return float(np.sum(vals))


_LAPACK_CACHE: dict[str, tuple] = {}


def _min_pivot(ldu: np.ndarray, ipiv: np.ndarray) -> float:
    """Smallest pivot magnitude of a sytrf factorization; 2x2 blocks (negative
    ipiv entries) are measured by their smaller eigenvalue magnitude."""
    d = np.diag(ldu)
    if np.all(ipiv >= 0):  # all 1x1 pivots (definite systems)
        return float(np.min(np.abs(d))) if d.size else np.inf
    smallest = np.inf
    i = 0
    k = d.shape[0]
    while i < k:
        if ipiv[i] >= 0:
            smallest = min(smallest, abs(d[i]))
            i += 1
        else:
            off = ldu[i + 1, i]
            det = d[i] * d[i + 1] - off * off
            big = 0.5 * abs(d[i] + d[i + 1]) + np.hypot(0.5 * (d[i] - d[i + 1]), off)
            smallest = min(smallest, abs(det) / big if big > 0.0 else 0.0)
            i += 2
    return float(smallest)


def _ldl_solve(kkt: np.ndarray, rhs: np.ndarray, n: int) -> np.ndarray | None:
    """Solve the symmetric-indefinite KKT system via LDL^T (LAPACK sytrf/sytrs).

    Pivots below PIVOT_TOLERANCE trigger a one-shot regularization of the (1,1)
    block; returns None if the factorization cannot be made finite.
    """
    funcs = _LAPACK_CACHE.get(kkt.dtype.str)
    if funcs is None:
        funcs = get_lapack_funcs(("sytrf", "sytrs"), (kkt,))
        _LAPACK_CACHE[kkt.dtype.str] = funcs
    sytrf, sytrs = funcs
    mat = kkt
    for attempt in range(2):
        ldu, ipiv, info = sytrf(mat, lower=1)
        ok = info == 0 and np.all(np.isfinite(ldu)) and _min_pivot(ldu, ipiv) >= PIVOT_TOLERANCE
        if ok:
            x, info = sytrs(ldu, ipiv, rhs, lower=1)
            if info == 0 and np.all(np.isfinite(x)):
                return x
        if attempt == 0:
            mat = kkt.copy()
            mat[np.arange(n), np.arange(n)] += KKT_REGULARIZATION
    return None


def solve(
    problem: QpProblem,
    config: BarrierConfig | None = None,
    warm_start: np.ndarray | None = None,
) -> QpSolution:
    """Interior-point solve: outer loop decreases mu geometrically, inner loop runs
    Newton on the equality-constrained barrier problem with Armijo backtracking."""
    cfg = config or BarrierConfig()
    problem.validate()
    n, m, p = problem.dimensions()
    H, g = problem.H, problem.g
    A_eq, b_eq = problem.A_eq, problem.b_eq
    A_in, b_in = problem.A_ineq, problem.b_ineq

    x = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    if x.shape != (n,) or not np.all(np.isfinite(x)):
        x = np.zeros(n)
    if m:
        # land on the equality manifold so Newton steps stay on it
        x += np.linalg.lstsq(A_eq, b_eq - A_eq @ x, rcond=None)[0]

    kkt = np.zeros((n + m, n + m))
    if m:
        kkt[n:, :n] = A_eq
        kkt[:n, n:] = A_eq.T
    rhs = np.zeros(n + m)

    total_newton = 0
    residual = np.inf
    failed = False
    converged = False
    outer_objectives = []

    for mu in cfg.mu_schedule():
        converged = False
        for _ in range(cfg.max_newton_iters):
            h = b_in - A_in @ x if p else np.zeros(0)
            _, d1, d2 = relaxed_barrier(h, mu, cfg.delta) if p else (0.0, np.zeros(0), np.zeros(0))
            grad = H @ x + g
            if p:
                grad -= A_in.T @ d1
            if not np.all(np.isfinite(grad)):
                failed = True
                break

            if m == 0:
                residual = float(np.max(np.abs(grad))) if n else 0.0
                if residual <= cfg.kkt_tolerance:
                    converged = True
                    break

            hess = H + (A_in.T * d2) @ A_in if p else H
            kkt[:n, :n] = hess
            rhs[:n] = -grad
            if m:
                rhs[n:] = b_eq - A_eq @ x
            step = _ldl_solve(kkt, rhs, n)
            if step is None:
                failed = True
                break
            dx, nu = step[:n], step[n:]

            if m:
                residual = float(np.max(np.abs(grad + A_eq.T @ nu)))
                if residual <= cfg.kkt_tolerance and float(np.max(np.abs(rhs[n:]), initial=0.0)) <= cfg.kkt_tolerance:
                    converged = True
                    break

            # Armijo backtracking on the barrier-augmented merit
            slope = float(grad @ dx)
            merit0 = problem.objective(x) + (_barrier_value(h, mu, cfg.delta) if p else 0.0)
            a_dx = A_in @ dx if p else None
            alpha = 1.0
            stalled = False
            for _ in range(MAX_BACKTRACKS):
                x_new = x + alpha * dx
                merit = problem.objective(x_new)
                if p:
                    merit += _barrier_value(h - alpha * a_dx, mu, cfg.delta)
                if np.isfinite(merit) and merit <= merit0 + cfg.armijo_constant * alpha * slope:
                    break
                alpha *= cfg.line_search_backtrack_factor
            else:
                stalled = True  # at the numerical floor; residual decides status
            total_newton += 1
            if stalled:
                break
            x = x_new
        if failed:
            break
        outer_objectives.append(problem.objective(x))

    status = STATUS_NUMERICAL_FAILURE if failed else (
        STATUS_CONVERGED if converged else STATUS_MAX_ITERS
    )

    if cfg.polish and not failed:
        polished = _polish(problem, x, cfg)
        if polished is not None:
            x, residual = polished
            status = STATUS_CONVERGED

    return QpSolution(
        x=x,
        status=status,
        kkt_residual=residual,
        newton_iterations=total_newton,
        max_constraint_violation=problem.constraint_violation(x),
        objective=problem.objective(x),
        outer_objectives=tuple(outer_objectives),
    )


def _polish(problem: QpProblem, x: np.ndarray, cfg: BarrierConfig) -> tuple[np.ndarray, float] | None:
    """Active-set refinement of the barrier iterate.

    The barrier path identifies the active set (slack below its multiplier); one
    equality-constrained KKT solve per adjustment round removes the O(mu) barrier
    bias. Returns None (keep the barrier iterate) if no primal/dual feasible
    refinement is found.
    """
    n, m, p = problem.dimensions()
    H, g = problem.H, problem.g
    A_eq, b_eq = problem.A_eq, problem.b_eq
    A_in, b_in = problem.A_ineq, problem.b_ineq

    if p:
        h = b_in - A_in @ x
        lam = -relaxed_barrier(h, cfg.mu_final, cfg.delta)[1]
        active = lam > h
    else:
        active = np.zeros(0, dtype=bool)

    feas_tol = 1e-9
    for _ in range(max(2 * p, 2) + 2):
        idx = np.flatnonzero(active)
        A_act = A_in[idx]
        k = m + idx.size
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = H
        if m:
            kkt[n:n + m, :n] = A_eq
            kkt[:n, n:n + m] = A_eq.T
        if idx.size:
            kkt[n + m:, :n] = A_act
            kkt[:n, n + m:] = A_act.T
        rhs = np.concatenate([-g, b_eq, b_in[idx]])
        sol = _ldl_solve(kkt, rhs, n)
        if sol is None:
            return None
        x_new, lam_act = sol[:n], sol[n + m:]

        neg = np.flatnonzero(lam_act < -feas_tol)
        if neg.size:
            active[idx[neg[np.argmin(lam_act[neg])]]] = False
            continue
        if p:
            slack = b_in - A_in @ x_new
            violated = np.flatnonzero(~active & (slack < -feas_tol))
            if violated.size:
                active[violated[np.argmin(slack[violated])]] = True
                continue
        grad = H @ x_new + g
        if m:
            grad += A_eq.T @ sol[n:n + m]
        if idx.size:
            grad += A_act.T @ lam_act
        residual = float(np.max(np.abs(grad))) if n else 0.0
        if residual > max(cfg.kkt_tolerance, 1e-8) or not np.all(np.isfinite(x_new)):
            return None
        return x_new, residual
    return None


def solve_batch(
    problems: Sequence[QpProblem],
    config: BarrierConfig | None = None,
    warm_starts: Sequence[np.ndarray] | None = None,
    workers: int | None = None,
) -> list[QpSolution]:
    """Solve independent problems with identical dimensions; elementwise identical
    to per-problem solve. workers > 1 distributes across a process pool (the
    per-problem work is too fine-grained for threads under the GIL)."""
    problems = list(problems)
    if not problems:
        return []
    dims = problems[0].dimensions()
    for prob in problems[1:]:
        if prob.dimensions() != dims:
            raise QpError(f"batch dimension mismatch: {prob.dimensions()} != {dims}")
    if warm_starts is None:
        starts: Sequence = [None] * len(problems)
    else:
        if len(warm_starts) != len(problems):
            raise QpError("warm_starts length must match batch size")
        starts = warm_starts
    if workers is None or workers <= 1:
        return [solve(prob, config, ws) for prob, ws in zip(problems, starts)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(solve, prob, config, ws) for prob, ws in zip(problems, starts)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# problem dump/load (offline debugging and oracle comparison)
# ---------------------------------------------------------------------------

def dump_problem(problem: QpProblem) -> str:
    out = io.StringIO()
    n, m, p = problem.dimensions()
    out.write(f"qpdump 1\nn {n} m {m} p {p}\n")
    for name, arr in (("H", problem.H), ("g", problem.g), ("A_eq", problem.A_eq),
                      ("b_eq", problem.b_eq), ("A_ineq", problem.A_ineq),
                      ("b_ineq", problem.b_ineq)):
        out.write(name + "\n")
        rows = np.atleast_2d(arr)
        for row in rows:
            if row.size:
                out.write(" ".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def load_problem(text: str) -> QpProblem:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("qpdump"):
        raise QpError("not a qpdump document")
    header = lines[1].split()
    try:
        n, m, p = int(header[1]), int(header[3]), int(header[5])
    except (IndexError, ValueError):
        raise QpError(f"malformed qpdump header: {lines[1]!r}") from None
    sections: dict[str, list[list[float]]] = {}
    current: list[list[float]] | None = None
    for ln in lines[2:]:
        if ln in ("H", "g", "A_eq", "b_eq", "A_ineq", "b_ineq"):
            current = sections.setdefault(ln, [])
        elif current is not None:
            current.append([float(v) for v in ln.split()])
        else:
            raise QpError(f"unexpected line in qpdump: {ln!r}")

    def grab(name: str, shape: tuple[int, ...]) -> np.ndarray:
        rows = sections.get(name, [])
        arr = np.array(rows, dtype=float) if rows else np.zeros((0, shape[-1] if len(shape) > 1 else 0))
        arr = arr.reshape(shape) if arr.size else np.zeros(shape)
        return arr

    return QpProblem(
        H=grab("H", (n, n)),
        g=grab("g", (n,)),
        A_eq=grab("A_eq", (m, n)),
        b_eq=grab("b_eq", (m,)),
        A_ineq=grab("A_ineq", (p, n)),
        b_ineq=grab("b_ineq", (p,)),
    )


def save_problem(problem: QpProblem, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_problem(problem))


def load_problem_file(path) -> QpProblem:
    with open(path) as fh:
        return load_problem(fh.read())
