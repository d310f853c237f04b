"""Template training: penalized linear and logistic regression on spline
coefficients, generalized cross-validation for picking the penalty weights,
and the A-E template zoo (average, unregularized, ridge, smoothing,
combined).

The linear normal equations and the Newton step share one symmetric
positive-definite solve; problems above a size threshold switch from a
direct factorization to diagonally preconditioned conjugate gradients.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .bsplines import SplineGrid, SplineTemplate, project_to_basis
from .regularizers import (
    DiffusionWeights,
    RegularizerMatrix,
    build_R_r2,
    build_R_se2,
)

DIRECT_SOLVE_MAX = 5000

LAMBDA_GRID = np.concatenate([[0.0], np.logspace(-10, 2, 25)])
MU_GRID = np.concatenate([[0.0], np.logspace(-8, 2, 25)])


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when the normal equations are singular; never silently
    falls back to a least-norm solution."""


@dataclass
class PatchRecord:
    image_id: str
    center: tuple
    label: int


@dataclass
class TrainingSet:
    """Sampling matrix with labels and provenance.

    positive_patch_mean is the running pixel-domain mean of the positive
    patches; it is all the average-template construction needs.
    """

    S: np.ndarray
    y: np.ndarray
    grid: SplineGrid
    provenance: list = field(default_factory=list)
    positive_patch_mean: np.ndarray = None

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.S.shape[0] != self.y.size:
            raise ValueError("label count does not match sample count")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise ValueError("labels must be 0 or 1")

    @property
    def n_samples(self) -> int:
        return self.S.shape[0]


@dataclass
class NewtonTrace:
    objectives: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    grad_inf: float = np.inf


@dataclass(frozen=True)
class RegressionConfig:
    loss: str = "linear"  # "linear" | "logistic"
    lam: float = 0.0
    mu: float = 0.0
    weights: DiffusionWeights = DiffusionWeights()
    max_iter: int = 100
    tol: float = 1e-8
    clamp: float = 1e-9


@dataclass(frozen=True)
class GcvWeights:
    """Diagonal sample weights for the cross-validation score."""

    preset: str = "identity"  # "identity" | "positives_only"

    def diagonal(self, y: np.ndarray) -> np.ndarray:
        if self.preset == "identity":
            return np.ones_like(y)
        if self.preset == "positives_only":
            return np.asarray(y, dtype=float)
        raise ValueError(f"unknown preset {self.preset!r}")


def _penalty_matrix(R, lam, mu, ncoef):
    M = sp.identity(ncoef, format="csr") * mu
    if lam != 0.0:
        if R is None:
            raise ValueError("smoothing weight set but no penalty matrix given")
        M = M + lam * R.matrix
    return M


def _solve_spd(S, R, lam, mu, rhs):
    """Solve (S'S + lam R + mu I) x = rhs for one or more right-hand sides."""
    n = S.shape[1]
    K = _penalty_matrix(R, lam, mu, n)
    rhs = np.asarray(rhs, dtype=float)
    if n <= DIRECT_SOLVE_MAX:
        M = S.T @ S + K.toarray()
        try:
            factor = cho_factor(M)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("normal equations are singular") from exc
        x = cho_solve(factor, rhs)
    else:
        diag = np.einsum("ij,ij->j", S, S) + K.diagonal()
        diag[diag <= 0] = 1.0
        precond = spla.LinearOperator((n, n), matvec=lambda v: v / diag)
        op = spla.LinearOperator(
            (n, n), matvec=lambda v: S.T @ (S @ v) + K @ v)
        cols = rhs.reshape(n, -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            x_j, info = spla.cg(op, cols[:, j], rtol=1e-12, atol=0.0,
                                maxiter=20 * n, M=precond)
            if info != 0:
                raise SingularSystemError(
                    f"conjugate gradients did not converge (info={info})")
            out[:, j] = x_j
        x = out.reshape(rhs.shape)
    return x


def _verify_residual(S, R, lam, mu, x, rhs, limit=1e-8):
    K = _penalty_matrix(R, lam, mu, S.shape[1])
    resid = S.T @ (S @ x) + K @ x - rhs
    denom = np.linalg.norm(rhs)
    if denom == 0:
        return
    if np.linalg.norm(resid) / denom > limit:
        raise SingularSystemError(
            "solution residual exceeds tolerance; system is singular or "
            "severely ill-conditioned")


def solve_linear(ts: TrainingSet, R: RegularizerMatrix, lam: float,
                 mu: float) -> np.ndarray:
    """Minimize ||S c - y||^2 + lam c'Rc + mu |c|^2 via the normal equations."""
    if lam < 0 or mu < 0:
        raise ValueError("penalty weights must be non-negative")
    rhs = ts.S.T @ ts.y
    c = _solve_spd(ts.S, R, lam, mu, rhs)
    _verify_residual(ts.S, R, lam, mu, c, rhs)
    return c


def _penalized_loglik(S, y, R, lam, mu, c):
    eta = S @ c
    ll = float(y @ eta - np.logaddexp(0.0, eta).sum())
    if lam != 0.0:
        ll -= 0.5 * lam * float(c @ (R.matrix @ c))
    if mu != 0.0:
        ll -= 0.5 * mu * float(c @ c)
    return ll


def _logistic_gradient(S, y, R, lam, mu, c):
    p = expit(S @ c)
    g = S.T @ (y - p)
    if lam != 0.0:
        g = g - lam * (R.matrix @ c)
    if mu != 0.0:
        g = g - mu * c
    return g


def solve_logistic(ts: TrainingSet, R: RegularizerMatrix, lam: float,
                   mu: float, config: RegressionConfig = RegressionConfig()):
    """Penalized logistic regression via damped Newton iterations.

    Starts at c = 0 and halves the step whenever the penalized
    log-likelihood would decrease; stops on relative coefficient change
    below tol or after max_iter sweeps. Probabilities are clamped away
    from 0 and 1 before the working response is formed. Returns the
    coefficients and an iteration trace (with a failure flag instead of
    an exception on non-convergence).
    """
    S, y = ts.S, ts.y
    n = S.shape[1]
    c = np.zeros(n)
    trace = NewtonTrace()
    trace.objectives.append(_penalized_loglik(S, y, R, lam, mu, c))
    eps = config.clamp
    for it in range(config.max_iter):
        p = np.clip(expit(S @ c), eps, 1.0 - eps)
        w = p * (1.0 - p)
        z = S @ c + (y - p) / w
        sw = S * w[:, None]
        rhs = sw.T @ z
        K = _penalty_matrix(R, lam, mu, n)
        if n <= DIRECT_SOLVE_MAX:
            M = S.T @ sw + K.toarray()
            try:
                c_full = cho_solve(cho_factor(M), rhs)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(
                    "Newton system is singular; add ridge or smoothing") from exc
        else:
            diag = np.einsum("ij,ij->j", S, sw) + K.diagonal()
            diag[diag <= 0] = 1.0
            op = spla.LinearOperator(
                (n, n), matvec=lambda v: S.T @ (sw @ v) + K @ v)
            precond = spla.LinearOperator((n, n), matvec=lambda v: v / diag)
            c_full, info = spla.cg(op, rhs, rtol=1e-12, atol=0.0,
                                   maxiter=20 * n, M=precond)
            if info != 0:
                raise SingularSystemError(
                    f"conjugate gradients did not converge (info={info})")
        delta = c_full - c
        obj_old = trace.objectives[-1]
        step = 1.0
        c_try = c_full
        obj_new = _penalized_loglik(S, y, R, lam, mu, c_try)
        while obj_new < obj_old and step > 1e-12:
            step *= 0.5
            c_try = c + step * delta
            obj_new = _penalized_loglik(S, y, R, lam, mu, c_try)
        trace.objectives.append(obj_new)
        trace.steps.append(step)
        change = np.linalg.norm(step * delta) / max(np.linalg.norm(c_try), 1e-300)
        c = c_try
        trace.n_iter = it + 1
        if change <= config.tol:
            trace.converged = True
            break
    trace.grad_inf = float(np.max(np.abs(
        _logistic_gradient(S, y, R, lam, mu, c))))
    return c, trace


def _gcv_from_arrays(S, y, R, lam, mu, omega_diag):
    """Closed-form cross-validation score from the smoother matrix."""
    n = S.shape[0]
    if lam == 0.0 and mu == 0.0:
        # unpenalized smoother is the projector onto the row space of S
        u, s, _ = np.linalg.svd(S, full_matrices=False)
        rank = int(np.sum(s > s[0] * max(S.shape) * np.finfo(float).eps)) \
            if s.size else 0
        if rank >= n:
            return np.inf
        u = u[:, :rank]
        fitted = u @ (u.T @ y)
        tr = float(rank)
    else:
        x = _solve_spd(S, R, lam, mu, S.T)
        a = S @ x
        tr = float(np.trace(a))
        if tr >= n:
            return np.inf
        fitted = a @ y
    resid = omega_diag * (y - fitted)
    return float((resid @ resid) / n) / (1.0 - tr / n) ** 2


def gcv_value(ts: TrainingSet, R: RegularizerMatrix, lam: float, mu: float,
              omega: GcvWeights = GcvWeights()) -> float:
    """Generalized cross-validation value of the linear smoother.

    Returns +inf when the effective degrees of freedom reach the sample
    count (divergent denominator), rather than raising.
    """
    return _gcv_from_arrays(ts.S, ts.y, R, lam, mu, omega.diagonal(ts.y))


def _gcv_logistic(ts, R, lam, mu, omega, config):
    """Cross-validation on the quadratic model at the converged Newton
    step: the design and response are reweighted by sqrt(W)."""
    c, trace = solve_logistic(ts, R, lam, mu, config)
    eps = config.clamp
    p = np.clip(expit(ts.S @ c), eps, 1.0 - eps)
    w = p * (1.0 - p)
    sqw = np.sqrt(w)
    s_tilde = ts.S * sqw[:, None]
    z_tilde = sqw * (ts.S @ c + (ts.y - p) / w)
    return _gcv_from_arrays(s_tilde, z_tilde, R, lam, mu,
                            omega.diagonal(ts.y))


@dataclass
class ParamSearch:
    lambda_star: float
    mu_star: float
    per_type: dict
    mu_line: list      # (mu, gcv) pairs at lam = 0
    lambda_line: list  # (lam, gcv) pairs at mu = 0


def _scan(values, evaluate):
    """Minimize over a grid; ties go to the stronger regularization and a
    singular grid point scores +inf instead of aborting the scan."""
    line = []
    best_v, best_g = float(values[-1]), np.inf
    for v in values[::-1]:  # strongest first so ties keep it
        try:
            g = evaluate(v)
        except SingularSystemError:
            g = np.inf
        line.append((float(v), float(g)))
        if g < best_g:
            best_v, best_g = float(v), g
    return line[::-1], best_v


def optimize_params(ts: TrainingSet, R: RegularizerMatrix, loss: str,
                    omega: GcvWeights = GcvWeights(),
                    config: RegressionConfig = RegressionConfig()) -> ParamSearch:
    """Pick ridge and smoothing weights by scanning the two grid lines the
    template zoo needs: mu with lam = 0, and lam with mu = 0."""
    if loss == "linear":
        def eval_mu(m):
            return gcv_value(ts, R, 0.0, m, omega)

        def eval_lam(l):
            return gcv_value(ts, R, l, 0.0, omega)
    elif loss == "logistic":
        def eval_mu(m):
            return _gcv_logistic(ts, R, 0.0, m, omega, config)

        def eval_lam(l):
            return _gcv_logistic(ts, R, l, 0.0, omega, config)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    mu_line, mu_star = _scan(MU_GRID, eval_mu)
    lambda_line, lambda_star = _scan(LAMBDA_GRID, eval_lam)
    per_type = {
        "C": (0.0, mu_star),
        "D": (lambda_star, 0.0),
        "E": (0.5 * lambda_star, 0.5 * mu_star),
    }
    return ParamSearch(lambda_star, mu_star, per_type, mu_line, lambda_line)


def _smoothing_matrix(grid: SplineGrid, weights: DiffusionWeights):
    if grid.domain == "r2":
        return build_R_r2(grid)
    return build_R_se2(grid, weights)


def train_template(template_type: str, loss: str, ts: TrainingSet,
                   grid: SplineGrid, weights: DiffusionWeights = DiffusionWeights(),
                   omega: GcvWeights = GcvWeights(),
                   config: RegressionConfig = RegressionConfig(),
                   search: ParamSearch = None) -> SplineTemplate:
    """Train one template of the A-E zoo.

    A averages the positive patches (normalized under the matching
    window) and projects onto the basis; B fits with no penalty; C, D
    and E fit with cross-validated ridge, smoothing, or both at half
    strength. Pass a precomputed ParamSearch to share one grid scan
    across types.
    """
    template_type = template_type.upper()
    if template_type == "A":
        if ts.positive_patch_mean is None:
            raise ValueError("average template needs positive patches")
        from .matching import build_window, normalize_patch
        radius = grid.shape_pixels[0] / 2.0
        window = build_window(radius, 8)
        normalized = normalize_patch(ts.positive_patch_mean, window)
        t = project_to_basis(normalized, grid)
        t.loss = "average"
        return t

    if template_type == "B":
        lam, mu = 0.0, 0.0
        R = None
    else:
        R = _smoothing_matrix(grid, weights)
        if search is None:
            search = optimize_params(ts, R, loss, omega, config)
        try:
            lam, mu = search.per_type[template_type]
        except KeyError:
            raise ValueError(f"unknown template type {template_type!r}")

    if loss == "linear":
        coef = solve_linear(ts, R, lam, mu)
    elif loss == "logistic":
        coef, trace = solve_logistic(ts, R, lam, mu, config)
        if not trace.converged:
            raise RuntimeError(
                f"logistic training did not converge for type {template_type}")
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return SplineTemplate(grid, coef, loss=loss)


def write_training_report(path, search: ParamSearch, loss: str,
                          trace: NewtonTrace = None) -> None:
    """CSV report: the scanned grid values, the chosen weights, and the
    Newton trace when the loss was logistic."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "lambda", "mu", "gcv"])
        for mu, g in search.mu_line:
            writer.writerow(["mu_line", repr(0.0), repr(mu), repr(g)])
        for lam, g in search.lambda_line:
            writer.writerow(["lambda_line", repr(lam), repr(0.0), repr(g)])
        writer.writerow(["chosen", repr(search.lambda_star),
                         repr(search.mu_star), ""])
        writer.writerow(["loss", loss, "", ""])
        if trace is not None:
            writer.writerow(["newton_converged", str(trace.converged),
                             str(trace.n_iter), repr(trace.grad_inf)])
            for i, (obj, step) in enumerate(zip(trace.objectives[1:],
                                                trace.steps)):
                writer.writerow([f"newton_iter_{i}", repr(step), "", repr(obj)])
