"""Dense operator-splitting (ADMM) solver for convex quadratic programs.

Problem form::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

The iteration follows the usual OSQP-style splitting: Ruiz equilibration,
over-relaxation, a per-row penalty vector re-balanced from the primal/dual
residual ratio, and a final polish. The polish runs a few primal-dual
active-set corrections on the KKT system, seeded with the active set implied
by the ADMM multipliers.

``AdmmSolver`` keeps the scaling and matrix factorizations for a fixed (P, A)
pair so that a receding-horizon controller only pays for them once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .errors import MaxIterations, NumericalFailure

INF = 1e20

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass
class QuadraticProgram:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.q.size)
        self.l = np.maximum(np.asarray(self.l, dtype=float).ravel(), -INF)
        self.u = np.minimum(np.asarray(self.u, dtype=float).ravel(), INF)
        n, m = self.q.size, self.A.shape[0]
        if self.P.shape != (n, n) or self.l.size != m or self.u.size != m:
            raise ValueError("inconsistent QP dimensions")
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSettings:
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    scaling_iter: int = 10
    check_interval: int = 10
    eps_pinf: float = 1e-6
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 3
    polish_rounds: int = 4
    polish_interval: int = 50
    polish_start: float = 1e-2
    tighten_steps: int = 3
    accept_ratio: float = 0.5
    warm_polish: bool = True


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    objective: float
    polished: bool = False
    residuals: dict = field(default_factory=dict)


def kkt_residuals(qp: QuadraticProgram, x, y):
    """Infinity norms of stationarity, primal infeasibility and complementarity.

    ``y`` follows the sign convention ``y > 0`` on active upper bounds and
    ``y < 0`` on active lower bounds. A multiplier pushing against an infinite
    bound counts fully as a complementarity violation.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Ax = qp.A @ x
    stat = qp.P @ x + qp.q + qp.A.T @ y
    prim = np.maximum(Ax - qp.u, 0) + np.maximum(qp.l - Ax, 0)
    yp = np.maximum(y, 0)
    yn = np.maximum(-y, 0)
    comp_u = np.where(qp.u >= INF, yp, yp * np.abs(qp.u - Ax))
    comp_l = np.where(qp.l <= -INF, yn, yn * np.abs(Ax - qp.l))
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(np.max(prim, initial=0.0)),
        "complementarity": float(np.max(comp_u + comp_l, initial=0.0)),
    }


def _ruiz(P, A, q, iters):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col = np.maximum(np.max(np.abs(Ps), axis=0), np.max(np.abs(As), axis=0, initial=0.0))
        row = np.max(np.abs(As), axis=1, initial=0.0)
        dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        qs = dD * qs
        D *= dD
        E *= dE
        gamma = max(np.mean(np.max(np.abs(Ps), axis=0)), np.max(np.abs(qs), initial=0.0))
        gamma = 1.0 / np.clip(gamma, 1e-4, 1e4)
        Ps *= gamma
        qs *= gamma
        c *= gamma
    return Ps, As, D, E, c


class AdmmSolver:
    """ADMM for a fixed (P, A) pair; ``solve`` takes the vectors that change.

    A solve is accepted once the KKT residuals of the unscaled problem are
    below ``accept_ratio * eps_abs``. When neither the ADMM iterate nor its polish gets
    there, the iteration resumes with a tenfold tighter tolerance (at most
    ``tighten_steps`` times).
    """

    def __init__(self, P, A, settings: QpSettings | None = None, q_hint=None):
        self.s = settings or QpSettings()
        self.P_orig = np.atleast_2d(np.asarray(P, dtype=float))
        self.A_orig = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.P_orig.shape[0]
        q_hint = np.zeros(n) if q_hint is None else np.asarray(q_hint, dtype=float)
        P_s, A_s, self.D, self.E, self.c = _ruiz(self.P_orig, self.A_orig, q_hint, self.s.scaling_iter)
        self.P_dense, self.A_dense = P_s, A_s
        self.P, self.A, self.At = _maybe_sparse(P_s), _maybe_sparse(A_s), _maybe_sparse(A_s.T)
        self.rho = self.s.rho
        self._factor_cache = {}
        self._bound_rows = _simple_bound_rows(self.A_orig)

    # -- linear algebra -------------------------------------------------------
    def _rho_vector(self, rho, eq, loose):
        vec = np.full(self.A_dense.shape[0], rho)
        vec[eq] = 1e3 * rho
        vec[loose] = 1e-6
        return vec

    def _kinv(self, rho, eq, loose):
        key = (rho, eq.tobytes(), loose.tobytes())
        hit = self._factor_cache.get(key)
        if hit is not None:
            return hit
        vec = self._rho_vector(rho, eq, loose)
        A = self.A_dense
        K = self.P_dense + self.s.sigma * np.eye(A.shape[1]) + A.T @ (vec[:, None] * A)
        try:
            f = cho_factor(K, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"ADMM linear system is not positive definite: {exc}") from None
        Kinv = cho_solve(f, np.eye(K.shape[0]), check_finite=False)
        if len(self._factor_cache) > 16:
            self._factor_cache.clear()
        self._factor_cache[key] = (vec, Kinv)
        return vec, Kinv

    # -- main loop ------------------------------------------------------------
    def solve(self, q, l, u, warm_x=None, warm_y=None, raise_on_max_iter=False) -> QpResult:
        s = self.s
        qp = QuadraticProgram(self.P_orig, q, self.A_orig, l, u)
        qs = self.c * self.D * qp.q
        ls = np.where(qp.l <= -INF, -INF, qp.l * self.E)
        us = np.where(qp.u >= INF, INF, qp.u * self.E)
        eq = (qp.u - qp.l) < 1e-8
        loose = (qp.l <= -INF) & (qp.u >= INF)
        x = np.zeros(qp.n) if warm_x is None else np.asarray(warm_x, float) / self.D
        y = np.zeros(qp.m) if warm_y is None else np.asarray(warm_y, float) * self.c / self.E
        result, total = None, 0
        if warm_y is not None and s.polish and s.warm_polish:
            # A shifted receding-horizon solution often has the right active set already.
            result = self._finish(qp, x, y, MAX_ITER)
            if result.polished and _worst(result.residuals) <= s.accept_ratio * s.eps_abs:
                result.status = OPTIMAL
                return result
        ea, er = s.eps_abs, s.eps_rel
        for _ in range(1 + (s.tighten_steps if s.polish else 0)):
            status, x, y, it, probed = self._iterate(qs, ls, us, eq, loose, x, y, ea, er, s.max_iter - total, qp)
            total += it
            cand = probed if probed is not None else self._finish(qp, x, y, status)
            if result is None or _worst(cand.residuals) < _worst(result.residuals):
                result = cand
            done = _worst(result.residuals) <= s.accept_ratio * s.eps_abs
            if status == INFEASIBLE or done or total >= s.max_iter:
                break
            ea, er = ea * 0.1, er * 0.1
        result.iterations = total
        if result.status != INFEASIBLE:
            result.status = OPTIMAL if _worst(result.residuals) <= s.eps_abs or status == OPTIMAL else MAX_ITER
        if result.status == MAX_ITER and raise_on_max_iter:
            raise MaxIterations(result)
        return result

    def _iterate(self, qs, ls, us, eq, loose, x, y, eps_abs, eps_rel, max_iter, qp=None):
        """Run ADMM; with ``qp`` given, probe the polish along the way.

        Returns ``(status, x, y, iterations, probed)`` where ``probed`` is a
        polished result that already meets the tolerance, or None.
        """
        s = self.s
        A, At, P = self.A, self.At, self.P
        rho = self.rho
        vec, Kinv = self._kinv(rho, eq, loose)
        inv_vec = 1.0 / vec
        mv_A, mv_At = _matvec(A), _matvec(At)
        x = np.array(x, dtype=float)
        z = np.minimum(np.maximum(A @ x, ls), us)
        Einv = 1.0 / self.E
        Dinv = 1.0 / self.D
        alpha, sigma = s.alpha, s.sigma
        status = MAX_ITER
        it = 0
        y_prev = y
        probed = None
        last_key = None
        probe = qp is not None and s.polish
        for it in range(1, max(max_iter, 1) + 1):
            check = it % s.check_interval == 0 or it == max_iter
            if check:
                y_prev = y
            w = vec * z
            w -= y
            r = mv_At(w)
            r += sigma * x
            r -= qs
            x_t = Kinv @ r
            z_relax = mv_A(x_t)
            z_relax *= alpha
            z_relax += (1 - alpha) * z
            x *= 1 - alpha
            x += alpha * x_t
            z_new = y * inv_vec
            z_new += z_relax
            np.maximum(z_new, ls, out=z_new)
            np.minimum(z_new, us, out=z_new)
            z_relax -= z_new
            z_relax *= vec
            y = y + z_relax
            z = z_new
            if not check:
                continue
            if not np.all(np.isfinite(x)):
                raise NumericalFailure("ADMM iterate became non-finite")
            Ax = A @ x
            Px = P @ x
            Aty = At @ y
            r_prim = np.max(np.abs(Einv * (Ax - z)), initial=0.0)
            r_dual = np.max(np.abs(Dinv * (Px + qs + Aty))) / self.c
            n_prim = max(np.max(np.abs(Einv * Ax), initial=0.0), np.max(np.abs(Einv * z), initial=0.0))
            n_dual = max(np.max(np.abs(Dinv * Px)), np.max(np.abs(Dinv * Aty)), np.max(np.abs(Dinv * qs))) / self.c
            if r_prim <= eps_abs + eps_rel * n_prim and r_dual <= eps_abs + eps_rel * n_dual:
                status = OPTIMAL
                break
            if (probe and it % s.polish_interval == 0 and r_prim <= s.polish_start * (1 + n_prim)
                    and r_dual <= s.polish_start * (1 + n_dual)):
                # Only worth a KKT solve when the suggested active set moved.
                lower, upper = _guess_active(qp, self.D * x, self.E * y / self.c, eq)
                key = lower.tobytes() + upper.tobytes()
                if key != last_key:
                    last_key = key
                    cand = self._finish(qp, x, y, MAX_ITER)
                    if cand.polished and _worst(cand.residuals) <= s.accept_ratio * s.eps_abs:
                        cand.status = status = OPTIMAL
                        probed = cand
                        break
            if self._primal_infeasible(y - y_prev, ls, us):
                status = INFEASIBLE
                break
            if it % s.adaptive_rho_interval == 0:
                ratio = math.sqrt((r_prim / max(n_prim, 1e-10)) / max(r_dual / max(n_dual, 1e-10), 1e-10))
                new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                if new_rho > rho * s.adaptive_rho_tolerance or new_rho < rho / s.adaptive_rho_tolerance:
                    rho = new_rho
                    vec, Kinv = self._kinv(rho, eq, loose)
                    inv_vec = 1.0 / vec
        self.rho = rho
        return status, x, y, it, probed

    def _primal_infeasible(self, dy, ls, us):
        norm = np.max(np.abs(self.E * dy), initial=0.0)
        if norm < 1e-12:
            return False
        At_dy = np.max(np.abs((self.At @ dy) / self.D), initial=0.0)
        up = np.where(us >= INF, np.where(dy > 0, INF, 0.0), us * np.maximum(dy, 0))
        lo = np.where(ls <= -INF, np.where(dy < 0, INF, 0.0), ls * np.minimum(dy, 0))
        support = float(np.sum(up) + np.sum(lo))
        eps = self.s.eps_pinf * norm
        return At_dy <= eps and support <= -eps

    def _finish(self, qp, x, y, status, rounds=None):
        x_u = self.D * x
        y_u = self.E * y / self.c
        result = QpResult(x=x_u, y=y_u, status=status, iterations=0, objective=qp.objective(x_u))
        result.residuals = kkt_residuals(qp, x_u, y_u)
        if status == INFEASIBLE or not self.s.polish:
            return result
        polished = polish(qp, x_u, y_u, self.s, self._bound_rows, rounds)
        if polished is not None and _worst(polished[2]) < _worst(result.residuals):
            xp, yp, res_p = polished
            result.x, result.y, result.polished = xp, yp, True
            result.objective = qp.objective(xp)
            result.residuals = res_p
        return result


def _worst(res):
    return max(res.values())


def _matvec(M):
    """Matrix-vector product without the sparse-matrix dispatch overhead."""
    if not sp.issparse(M):
        return M.dot
    rows, cols = M.shape
    indptr, indices, data = M.indptr, M.indices, M.data
    kernel = sp._sparsetools.csr_matvec

    def mv(v):
        out = np.zeros(rows)
        kernel(rows, cols, indptr, indices, data, v, out)
        return out
    return mv


def _maybe_sparse(M):
    return sp.csr_matrix(M) if np.count_nonzero(M) < 0.3 * M.size else M


def _simple_bound_rows(A):
    """Column index for rows with a single nonzero entry, -1 elsewhere."""
    nz = A != 0
    col = np.where(nz.sum(axis=1) == 1, np.argmax(nz, axis=1), -1)
    return col


def _solve_active(qp, lower, upper, delta, refine, bound_rows=None):
    """Equality-constrained QP on the given active set.

    Active single-entry rows fix their variable and are eliminated before the
    KKT system is formed; their multipliers are recovered afterwards.
    """
    act = lower | upper
    target = np.where(lower, qp.l, qp.u)
    n = qp.n
    if bound_rows is None:
        bound_rows = -np.ones(qp.m, dtype=int)
    fixed_rows = np.where(act & (bound_rows >= 0))[0]
    x = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    fix_row = np.full(n, -1)
    for r in fixed_rows:
        j = bound_rows[r]
        if fixed[j]:
            continue  # duplicate bound on the same variable; keep the first
        fixed[j] = True
        fix_row[j] = r
        x[j] = target[r] / qp.A[r, j]
    free = ~fixed
    gen = act & (bound_rows < 0)
    Ag = qp.A[np.ix_(gen, free)]
    bg = target[gen] - qp.A[gen][:, fixed] @ x[fixed]
    Pff = qp.P[np.ix_(free, free)]
    rhs_x = -qp.q[free] - qp.P[np.ix_(free, fixed)] @ x[fixed]
    nf, na = int(free.sum()), int(gen.sum())
    K = np.zeros((nf + na, nf + na))
    K[:nf, :nf] = Pff
    K[:nf, nf:] = Ag.T
    K[nf:, :nf] = Ag
    Kreg = K.copy()
    Kreg[np.diag_indices(nf)] += delta
    idx = np.arange(nf, nf + na)
    Kreg[idx, idx] -= delta
    rhs = np.concatenate([rhs_x, bg])
    try:
        lu = lu_factor(Kreg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = lu_solve(lu, rhs, check_finite=False)
    for _ in range(refine):
        sol = sol + lu_solve(lu, rhs - K @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    x[free] = sol[:nf]
    y = np.zeros(qp.m)
    y[gen] = sol[nf:]
    # Multipliers of the eliminated bounds from the fixed rows of stationarity.
    grad = qp.P @ x + qp.q + qp.A.T @ y
    _split_degenerate(qp, lower, upper, gen, free, fix_row, y, grad)
    js = np.where(fixed)[0]
    y[fix_row[js]] = -grad[js] / qp.A[fix_row[js], js]
    return x, y


def _split_degenerate(qp, lower, upper, gen, free, fix_row, y, grad):
    """Pick multipliers for active rows whose variables are all fixed by bounds.

    Such a row is linearly dependent on the bound rows, so its multiplier is
    not determined by the KKT solve. Choose the value closest to zero that
    keeps its own sign and the signs of the affected bound multipliers right;
    ``y`` and ``grad`` are updated in place.
    """
    rows = np.where(gen & ~np.any(qp.A[:, free] != 0, axis=1))[0]
    for r in rows:
        cols = np.nonzero(qp.A[r])[0]
        t_lo = 0.0 if upper[r] else -np.inf
        t_hi = 0.0 if lower[r] and not upper[r] else np.inf
        if lower[r] and upper[r]:
            t_lo, t_hi = -np.inf, np.inf
        g0 = grad - qp.A[r] * y[r]
        for j in cols:
            b = fix_row[j]
            # bound multiplier as a function of t: (-g0_j - a_rj t) / a_bj
            c0, c1 = -g0[j] / qp.A[b, j], -qp.A[r, j] / qp.A[b, j]
            need = 0 if (lower[b] and upper[b]) else (1 if upper[b] else -1)
            if need == 0 or c1 == 0:
                continue
            bound = -c0 / c1
            if (need > 0) == (c1 > 0):
                t_lo = max(t_lo, bound)
            else:
                t_hi = min(t_hi, bound)
        if t_lo > t_hi:
            continue
        t = min(max(0.0, t_lo), t_hi)
        grad += qp.A[r] * (t - y[r])
        y[r] = t


def _guess_active(qp, x, y, eq):
    Ax = qp.A @ x
    lower = (qp.l > -INF) & ((Ax - qp.l < -y) | eq)
    upper = (qp.u < INF) & (qp.u - Ax < y) & ~lower
    return lower, upper


def polish(qp: QuadraticProgram, x, y, s: QpSettings, bound_rows=None, rounds=None):
    """Solve the KKT system on the active set suggested by an approximate solution.

    A few primal-dual active-set corrections follow when the first guess is
    off. Returns ``(x, y, residuals)`` for the best candidate, or ``None``.
    """
    eq = (qp.u - qp.l) < 1e-8
    lower, upper = _guess_active(qp, x, y, eq)
    best = None
    seen = set()
    for _ in range(max(s.polish_rounds if rounds is None else rounds, 1)):
        key = (lower.tobytes(), upper.tobytes())
        if key in seen:
            break
        seen.add(key)
        sol = _solve_active(qp, lower, upper, s.polish_delta, s.polish_refine, bound_rows)
        if sol is None:
            break
        xp, yp = sol
        res = kkt_residuals(qp, xp, yp)
        if best is None or _worst(res) < _worst(best[2]):
            best = (xp, yp, res)
        if _worst(res) <= s.eps_abs * 1e-2:
            break
        lower, upper = _guess_active(qp, xp, yp, eq)
    return best


def solve_qp(qp: QuadraticProgram, settings: QpSettings | None = None, warm_x=None, warm_y=None,
             raise_on_max_iter=False) -> QpResult:
    """One-shot solve; see ``AdmmSolver`` for repeated solves with fixed (P, A)."""
    solver = AdmmSolver(qp.P, qp.A, settings, q_hint=qp.q)
    return solver.solve(qp.q, qp.l, qp.u, warm_x, warm_y, raise_on_max_iter)
