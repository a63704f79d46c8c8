"""ADCG solver for the TV + group-TV de-mixing program.

The unknown is a small set of atoms, each a 4-D location tuple
(mobile, scatter) with one complex weight per base station. The solver
alternates: greedy atom selection on the residual gradient (coarse 4-D grid
plus continuous refinement), a sparse-group proximal solve for the weights,
support pruning, and joint gradient descent on all atom locations.

Objective (Lasso form):

    sum_j ||Y_j - sum_k w[k,j] B_j(atom_k)||_F^2
        + lambda1 * sum_jk |w[k,j]| + lambda2 * sum_k ||w[k,:]||_2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import DegenerateGeometry, EmptyCandidate
from .geometry import Location, Rect
from .signal_model import MeasurementSet, SystemConfig

__all__ = [
    "AtomParams",
    "CandidateSolution",
    "SolverConfig",
    "LocalDescentConfig",
    "WeightSolverConfig",
    "WeightsResult",
    "AdcgResult",
    "loss",
    "residual_gradients",
    "select_next_source",
    "solve_weights",
    "prune",
    "analytic_param_gradient",
    "local_improve",
    "adcg_solve",
    "resolve_lambdas",
]


@dataclass(frozen=True)
class AtomParams:
    """Support point of one atom: mobile and scatter locations."""

    mobile: Location
    scatter: Location

    def as_array(self) -> np.ndarray:
        return np.array([self.mobile.x, self.mobile.y, self.scatter.x, self.scatter.y])

    @classmethod
    def from_array(cls, p) -> "AtomParams":
        return cls(mobile=Location(float(p[0]), float(p[1])),
                   scatter=Location(float(p[2]), float(p[3])))


@dataclass
class CandidateSolution:
    """Atom list plus the (num_atoms x J) complex weight matrix."""

    atoms: list[AtomParams]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=complex)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.atoms):
            raise ValueError(f"weights must be (num_atoms, J), got {self.weights.shape} "
                             f"for {len(self.atoms)} atoms")

    @classmethod
    def empty(cls, num_bs: int) -> "CandidateSolution":
        return cls(atoms=[], weights=np.zeros((0, num_bs), dtype=complex))

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bs(self) -> int:
        return self.weights.shape[1]

    def group_norms(self) -> np.ndarray:
        """Per-atom l2 norm of the cross-BS weight vector."""
        return np.linalg.norm(self.weights, axis=1)

    def tv_per_bs(self) -> np.ndarray:
        """Per-BS total-variation value: sum of weight magnitudes."""
        return np.abs(self.weights).sum(axis=0)

    def gtv(self) -> float:
        """Group total-variation value: sum of per-atom group norms."""
        return float(self.group_norms().sum())

    def params_matrix(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 4))
        return np.stack([a.as_array() for a in self.atoms])

    def copy(self) -> "CandidateSolution":
        return CandidateSolution(atoms=list(self.atoms), weights=self.weights.copy())


@dataclass
class LocalDescentConfig:
    max_steps: int = 600
    step_init: float = 25.0      # metres covered by the first trial step
    armijo_c: float = 1e-4
    tol: float = 1e-12           # relative objective improvement floor
    max_backtracks: int = 40


@dataclass
class WeightSolverConfig:
    max_iters: int = 8000
    tol: float = 1e-12           # relative objective change
    xtol: float = 1e-12          # relative iterate / fixed-point residual


@dataclass
class SolverConfig:
    """Tuning knobs for the ADCG solver.

    ``lambda1``/``lambda2`` default to ``lambda_scale`` times the stacked
    Frobenius norm of the measurements; ``prune_threshold`` defaults to
    ``prune_scale`` times the largest group norm at each prune. ``scene``
    defaults to the bounding box of the BS positions.
    """

    lambda1: Optional[float] = None
    lambda2: Optional[float] = None
    lambda_scale: float = 0.01
    lambda_noise_mult: float = 0.7
    prune_threshold: Optional[float] = None
    prune_scale: float = 0.1
    max_outer_iters: int = 9
    coarse_grid_points_per_axis: int = 20
    local_descent: LocalDescentConfig = field(default_factory=LocalDescentConfig)
    weight_solver: WeightSolverConfig = field(default_factory=WeightSolverConfig)
    stop_tol: float = 1e-6
    scene: Optional[Rect] = None
    bs_exclusion_m: float = 1.0
    final_polish: bool = True

    def validate(self):
        for name in ("lambda1", "lambda2", "prune_threshold"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_scale < 0 or self.prune_scale < 0 or self.lambda_noise_mult < 0:
            raise ValueError("lambda_scale, lambda_noise_mult and prune_scale must be >= 0")
        if self.max_outer_iters < 1 or self.coarse_grid_points_per_axis < 2:
            raise ValueError("max_outer_iters >= 1 and coarse_grid_points_per_axis >= 2 required")
        if self.stop_tol < 0 or self.bs_exclusion_m < 0:
            raise ValueError("stop_tol and bs_exclusion_m must be >= 0")
        if self.local_descent.max_steps < 0 or self.local_descent.step_init <= 0:
            raise ValueError("local_descent: max_steps >= 0 and step_init > 0 required")
        if not 0 < self.local_descent.armijo_c < 1:
            raise ValueError("local_descent.armijo_c must lie in (0, 1)")
        if self.weight_solver.max_iters < 1 or self.weight_solver.tol < 0:
            raise ValueError("weight_solver: max_iters >= 1 and tol >= 0 required")


class WeightsResult(NamedTuple):
    gamma: np.ndarray
    converged: bool
    n_iters: int
    objective: float


class AdcgResult(NamedTuple):
    candidate: CandidateSolution
    converged: bool
    loss_history: list
    residual_history: list
    n_iters: int


_NOISE_BIAS_CACHE: dict = {}


def _tail_sigma_bias(shape: tuple[int, int]) -> float:
    """Small-sample bias of the trailing-singular-value noise estimator.

    Calibrated once per matrix shape on fixed-seed white noise so the
    estimate stays deterministic.
    """
    cached = _NOISE_BIAS_CACHE.get(shape)
    if cached is not None:
        return cached
    rng = np.random.default_rng(20240); raws = []
    for _ in range(12):
        w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
        s = np.linalg.svd(w, compute_uv=False)
        tail = s[len(s) // 2:]
        raws.append(np.sum(tail ** 2) / (len(tail) * shape[1]))
    bias = float(np.mean(raws))
    _NOISE_BIAS_CACHE[shape] = bias
    return bias


def _noise_sigma(measurements: MeasurementSet) -> float:
    """Per-entry complex noise level, from the trailing singular values.

    The signal part of each measurement is a sum of a few rank-1 atoms, so
    the lower half of the spectrum is essentially pure noise.
    """
    raws = []
    shape = None
    for y in measurements.per_bs:
        shape = y.shape
        s = np.linalg.svd(y, compute_uv=False)
        tail = s[len(s) // 2:]
        raws.append(np.sum(tail ** 2) / (len(tail) * y.shape[1]))
    return math.sqrt(float(np.mean(raws)) / _tail_sigma_bias(shape))


def resolve_lambdas(measurements: MeasurementSet, scfg: SolverConfig) -> tuple[float, float]:
    """Concrete (lambda1, lambda2) with the data-driven default.

    The automatic value is the larger of a universal-threshold term (the
    estimated noise level times the root log-size of the selection grid,
    matched to the scale of atom/residual inner products) and a small
    fraction of the stacked measurement norm, which keeps the penalties
    meaningful on clean data.
    """
    auto = None
    if scfg.lambda1 is None or scfg.lambda2 is None:
        stacked = math.sqrt(sum(float(np.sum(np.abs(y) ** 2)) for y in measurements.per_bs))
        atom_sq = measurements.per_bs[0].size if measurements.per_bs else 1
        cells = max(scfg.coarse_grid_points_per_axis ** 4, 2)
        noise_term = (scfg.lambda_noise_mult * _noise_sigma(measurements)
                      * math.sqrt(2.0 * atom_sq * math.log(cells)))
        auto = max(scfg.lambda_scale * stacked, noise_term)
    lam1 = auto if scfg.lambda1 is None else scfg.lambda1
    lam2 = auto if scfg.lambda2 is None else scfg.lambda2
    return lam1, lam2


def _scene_or_default(cfg: SystemConfig, scfg: SolverConfig) -> Rect:
    if scfg.scene is not None:
        return scfg.scene
    xs = [p.x for p in cfg.bs_positions]
    ys = [p.y for p in cfg.bs_positions]
    if min(xs) == max(xs) or min(ys) == max(ys):
        raise ValueError("cannot infer a search scene from degenerate BS positions; set SolverConfig.scene")
    return Rect(min(xs), min(ys), max(xs), max(ys))


# ---------------------------------------------------------------------------
# Vectorised forward core
# ---------------------------------------------------------------------------

def _bs_array(cfg: SystemConfig) -> np.ndarray:
    return np.array([[p.x, p.y] for p in cfg.bs_positions])


def _forward_parts(params: np.ndarray, cfg: SystemConfig, with_partials: bool = False):
    """Steering/delay factors for all (atom, BS) pairs at once.

    ``params`` is (K, 4) rows of (tx, ty, sx, sy). Returns a dict with
    ``a`` (K,J,N_R), ``b`` (K,J,N) and, when requested, the angle/delay
    factors ``da`` and ``db`` plus the real partials ``dtheta`` and
    ``dtau`` of shape (K,J,4).
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    K = params.shape[0]
    q = _bs_array(cfg)                                     # (J, 2)
    J = q.shape[0]
    lt = params[:, 0:2]                                    # (K, 2)
    ls = params[:, 2:4]

    diff_ts = lt - ls                                      # (K, 2)
    d_ts = np.linalg.norm(diff_ts, axis=1)                 # (K,)
    diff_sb = ls[:, None, :] - q[None, :, :]               # (K, J, 2)
    d_sb = np.linalg.norm(diff_sb, axis=2)                 # (K, J)
    if np.any(d_sb <= 0.0):
        raise DegenerateGeometry("atom scatter coincides with a base station")

    c = cfg.speed_of_light
    tau = (d_ts[:, None] + d_sb) / c                       # (K, J)
    theta = np.arctan2(diff_sb[:, :, 0], diff_sb[:, :, 1])  # (K, J)

    m = np.arange(cfg.num_antennas)
    n = np.arange(cfg.num_subcarriers)
    beta = 2.0 * np.pi / cfg.wavelength * cfg.element_spacing
    omega = 2.0 * np.pi * cfg.subcarrier_spacing * n       # (N,)

    a = np.exp(1j * beta * np.sin(theta)[:, :, None] * m)  # (K, J, N_R)
    b = cfg.symbols * np.exp(-1j * omega * tau[:, :, None])  # (K, J, N)

    out = {"a": a, "b": b, "tau": tau, "theta": theta, "K": K, "J": J}
    if not with_partials:
        return out

    # d a / d theta and d b / d tau
    out["da"] = (1j * beta * np.cos(theta)[:, :, None] * m) * a
    out["db"] = (-1j * omega) * b

    # real partials of tau and theta w.r.t. (tx, ty, sx, sy); the zero-distance
    # direction (virtual scatter sitting exactly on the mobile) takes the zero
    # subgradient of the Euclidean norm
    safe_ts = np.where(d_ts > 0.0, d_ts, 1.0)
    unit_ts = np.where(d_ts[:, None] > 0.0, diff_ts / safe_ts[:, None], 0.0)
    unit_sb = diff_sb / d_sb[:, :, None]                   # (K, J, 2)

    dtau = np.zeros((K, J, 4))
    dtau[:, :, 0] = unit_ts[:, None, 0] / c
    dtau[:, :, 1] = unit_ts[:, None, 1] / c
    dtau[:, :, 2] = (-unit_ts[:, None, 0] + unit_sb[:, :, 0]) / c
    dtau[:, :, 3] = (-unit_ts[:, None, 1] + unit_sb[:, :, 1]) / c

    dtheta = np.zeros((K, J, 4))
    d_sb2 = d_sb ** 2
    dtheta[:, :, 2] = diff_sb[:, :, 1] / d_sb2
    dtheta[:, :, 3] = -diff_sb[:, :, 0] / d_sb2
    out["dtau"], out["dtheta"] = dtau, dtheta
    return out


def _atoms_tensor(params: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """All atoms at all BSs, shape (K, J, N_R, N)."""
    parts = _forward_parts(params, cfg)
    return parts["a"][:, :, :, None] * parts["b"][:, :, None, :]


def _model_matrices(params: np.ndarray, weights: np.ndarray, cfg: SystemConfig) -> list[np.ndarray]:
    """Per-BS model sum_k w[k,j] B_j(atom_k)."""
    J = cfg.num_bs
    shape = (cfg.num_antennas, cfg.num_subcarriers)
    if params.shape[0] == 0:
        return [np.zeros(shape, dtype=complex) for _ in range(J)]
    atoms = _atoms_tensor(params, cfg)                     # (K, J, N_R, N)
    model = np.einsum("kj,kjmn->jmn", weights, atoms)
    return [model[j] for j in range(J)]


def _residuals(candidate: CandidateSolution, measurements: MeasurementSet,
               cfg: SystemConfig) -> list[np.ndarray]:
    model = _model_matrices(candidate.params_matrix(), candidate.weights, cfg)
    return [model[j] - measurements.per_bs[j] for j in range(cfg.num_bs)]


def _data_fit(params: np.ndarray, weights: np.ndarray, measurements: MeasurementSet,
              cfg: SystemConfig) -> float:
    model = _model_matrices(params, weights, cfg)
    return sum(float(np.sum(np.abs(model[j] - measurements.per_bs[j]) ** 2))
               for j in range(cfg.num_bs))


def loss(candidate: CandidateSolution, measurements: MeasurementSet,
         cfg: SystemConfig, scfg: SolverConfig) -> float:
    """Regularised objective: data fit + lambda1 * TV + lambda2 * GTV."""
    lam1, lam2 = resolve_lambdas(measurements, scfg)
    fit = _data_fit(candidate.params_matrix(), candidate.weights, measurements, cfg)
    return fit + lam1 * float(candidate.tv_per_bs().sum()) + lam2 * candidate.gtv()


def residual_gradients(candidate: CandidateSolution, measurements: MeasurementSet,
                       cfg: SystemConfig) -> list[np.ndarray]:
    """Gradient of the data fit w.r.t. each model matrix: 2 * (model - Y_j)."""
    return [2.0 * r for r in _residuals(candidate, measurements, cfg)]


def _param_gradient_arrays(params: np.ndarray, weights: np.ndarray,
                           residuals: list[np.ndarray], cfg: SystemConfig) -> np.ndarray:
    """Gradient of the data fit w.r.t. each atom's (tx, ty, sx, sy), shape (K, 4)."""
    parts = _forward_parts(params, cfg, with_partials=True)
    R = np.conj(np.stack(residuals))                       # (J, N_R, N)
    u = np.einsum("kjm,jmn->kjn", parts["a"], R)           # a^T conj(r)
    du = np.einsum("kjm,jmn->kjn", parts["da"], R)
    T_theta = np.einsum("kjn,kjn->kj", du, parts["b"])     # <da/dtheta b^T, r>
    T_tau = np.einsum("kjn,kjn->kj", u, parts["db"])       # <a db/dtau^T, r>
    coef_theta = 2.0 * np.real(weights * T_theta)
    coef_tau = 2.0 * np.real(weights * T_tau)
    return (np.einsum("kj,kjp->kp", coef_theta, parts["dtheta"])
            + np.einsum("kj,kjp->kp", coef_tau, parts["dtau"]))


def analytic_param_gradient(candidate: CandidateSolution, measurements: MeasurementSet,
                            cfg: SystemConfig) -> np.ndarray:
    """Exact gradient of the data-fit term w.r.t. atom locations.

    Row k holds (d/dtx, d/dty, d/dsx, d/dsy) for atom k. The mobile
    coordinates act on the loss only through the path delay; the scatter
    coordinates act through both the delay and the arrival angle.
    """
    if candidate.num_atoms == 0:
        return np.zeros((0, 4))
    res = _residuals(candidate, measurements, cfg)
    return _param_gradient_arrays(candidate.params_matrix(), candidate.weights, res, cfg)


# ---------------------------------------------------------------------------
# Projected descent engine (Armijo backtracking, Barzilai-Borwein trial step)
# ---------------------------------------------------------------------------

def _project_params(params: np.ndarray, scene: Rect, bs: np.ndarray, excl: float) -> np.ndarray:
    """Clip locations to the scene; push scatters out of the BS exclusion discs."""
    p = params.reshape(-1, 4).copy()
    for col in range(4):
        lo, hi = (scene.xmin, scene.xmax) if col % 2 == 0 else (scene.ymin, scene.ymax)
        np.clip(p[:, col], lo, hi, out=p[:, col])
    if excl > 0.0:
        centre = np.array([(scene.xmin + scene.xmax) / 2.0, (scene.ymin + scene.ymax) / 2.0])
        for q in bs:
            d = np.linalg.norm(p[:, 2:4] - q, axis=1)
            for k in np.nonzero(d < excl)[0]:
                direction = p[k, 2:4] - q
                nrm = np.linalg.norm(direction)
                if nrm == 0.0:
                    direction, nrm = centre - q, np.linalg.norm(centre - q)
                p[k, 2:4] = q + direction / nrm * excl
    return p.reshape(params.shape)


def _armijo_descent(fun, grad, x0: np.ndarray, project, ld: LocalDescentConfig):
    """Monotone projected gradient descent; returns (x, f(x)).

    Each iteration tries a Barzilai-Borwein step first (initially a step
    moving at most ``step_init`` in any coordinate) and backtracks until the
    Armijo sufficient-decrease test passes.
    """
    x = project(x0)
    f = fun(x)
    g = grad(x)
    floor = ld.tol * (abs(f) + 1e-30)    # improvement floor vs the starting scale
    prev_x = prev_g = None
    step = None
    for _ in range(ld.max_steps):
        gnorm2 = float(np.sum(g * g))
        if gnorm2 == 0.0 or not np.isfinite(gnorm2):
            break
        if prev_x is not None:
            dx = x - prev_x
            dg = g - prev_g
            denom = float(np.sum(dx * dg))
            step = float(np.sum(dx * dx)) / denom if denom > 0 else None
        if step is None or not np.isfinite(step) or step <= 0:
            step = ld.step_init / math.sqrt(gnorm2)
        t = step
        accepted = False
        for _ in range(ld.max_backtracks):
            cand = project(x - t * g)
            fc = fun(cand)
            moved = x - cand
            decrease = float(np.sum(g * moved))
            if fc <= f - ld.armijo_c * max(decrease, 0.0) and fc < f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        improvement = f - fc
        prev_x, prev_g = x, g
        x, f = cand, fc
        g = grad(x)
        step = t
        if improvement <= floor:
            break
    return x, f


# ---------------------------------------------------------------------------
# Next-source selection: coarse 4-D grid sweep + continuous refinement
# ---------------------------------------------------------------------------

_GRID_CACHE: dict = {}
_GRID_CACHE_MAX = 4


class _SelectionGrid(NamedTuple):
    pts: np.ndarray          # (G2, 2) cell centres, shared by mobile and scatter axes
    u: np.ndarray            # (G2_s, G2_t, N) mobile-scatter delay phases
    steer: np.ndarray        # (J, G2_s, N_R) per-BS steering at each scatter cell
    w: np.ndarray            # (J, G2_s, N) symbols * scatter-BS delay phases
    s_ok: np.ndarray         # (G2_s,) scatter cells outside every exclusion disc


def _grid_key(scene: Rect, cfg: SystemConfig, scfg: SolverConfig):
    return (scene.xmin, scene.ymin, scene.xmax, scene.ymax,
            scfg.coarse_grid_points_per_axis, scfg.bs_exclusion_m,
            cfg.num_antennas, cfg.num_subcarriers, cfg.subcarrier_spacing,
            cfg.carrier_freq, cfg.element_spacing, cfg.speed_of_light,
            tuple((p.x, p.y) for p in cfg.bs_positions),
            cfg.symbols.tobytes())


def _selection_grid(scene: Rect, cfg: SystemConfig, scfg: SolverConfig) -> _SelectionGrid:
    key = _grid_key(scene, cfg, scfg)
    cached = _GRID_CACHE.get(key)
    if cached is not None:
        return cached
    G = scfg.coarse_grid_points_per_axis
    hx = scene.width / G
    hy = scene.height / G
    xs = scene.xmin + hx * (np.arange(G) + 0.5)
    ys = scene.ymin + hy * (np.arange(G) + 0.5)
    # row-major over (x, y): index = ix * G + iy
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)

    q = _bs_array(cfg)
    d_ts = np.linalg.norm(pts[None, :, :] - pts[:, None, :], axis=2)   # (s, t) == (t, s) symmetric
    d_sb = np.linalg.norm(pts[:, None, :] - q[None, :, :], axis=2)     # (s, J)

    n = np.arange(cfg.num_subcarriers)
    k_n = 2.0 * np.pi * cfg.subcarrier_spacing * n / cfg.speed_of_light
    u = np.exp(-1j * d_ts[:, :, None] * k_n)                            # (s, t, N)

    theta = np.arctan2(pts[:, None, 0] - q[None, :, 0], pts[:, None, 1] - q[None, :, 1])  # (s, J)
    m = np.arange(cfg.num_antennas)
    beta = 2.0 * np.pi / cfg.wavelength * cfg.element_spacing
    steer = np.exp(1j * beta * np.sin(theta).T[:, :, None] * m)         # (J, s, N_R)
    w = cfg.symbols * np.exp(-1j * d_sb.T[:, :, None] * k_n)            # (J, s, N)

    s_ok = np.all(d_sb > max(scfg.bs_exclusion_m, 1e-9), axis=1)

    grid = _SelectionGrid(pts=pts, u=u, steer=steer, w=w, s_ok=s_ok)
    if len(_GRID_CACHE) >= _GRID_CACHE_MAX:
        _GRID_CACHE.pop(next(iter(_GRID_CACHE)))
    _GRID_CACHE[key] = grid
    return grid


def _selection_inner(params: np.ndarray, gradients: list[np.ndarray], cfg: SystemConfig,
                     with_grad: bool = False):
    """Per-BS inner products <B_j(params), g_j> for a single 4-D point."""
    parts = _forward_parts(params[None, :], cfg, with_partials=with_grad)
    Gc = np.conj(np.stack(gradients))                      # (J, N_R, N)
    u = np.einsum("jm,jmn->jn", parts["a"][0], Gc)
    s_j = np.einsum("jn,jn->j", u, parts["b"][0])          # <B_j, g_j>
    if not with_grad:
        return s_j, None
    du = np.einsum("jm,jmn->jn", parts["da"][0], Gc)
    t_theta = np.einsum("jn,jn->j", du, parts["b"][0])
    t_tau = np.einsum("jn,jn->j", u, parts["db"][0])
    ds_dp = (t_theta[:, None] * parts["dtheta"][0]
             + t_tau[:, None] * parts["dtau"][0])          # (J, 4) complex
    return s_j, ds_dp


def _selection_objective(params: np.ndarray, gradients: list[np.ndarray], cfg: SystemConfig):
    s_j, _ = _selection_inner(params, gradients, cfg)
    return -float(np.sum(np.abs(s_j)))


def _selection_objective_grad(params: np.ndarray, gradients: list[np.ndarray], cfg: SystemConfig):
    s_j, ds_dp = _selection_inner(params, gradients, cfg, with_grad=True)
    mags = np.abs(s_j)
    safe = np.where(mags > 0.0, mags, 1.0)
    coef = np.where(mags > 0.0, 1.0 / safe, 0.0)
    return -np.real(np.conj(s_j)[:, None] * ds_dp * coef[:, None]).sum(axis=0)


def select_next_source(gradients: list[np.ndarray], cfg: SystemConfig,
                       scfg: SolverConfig) -> AtomParams:
    """Best new atom for the linearised objective.

    Sweeps a coarse grid over (mobile, scatter) in the scene, scoring each
    cell by the sum over BSs of |<B_j, g_j>| (the weight phases are free, so
    the magnitude is the attainable linearised decrease), then refines the
    best cell continuously with analytic gradients. Ties on the grid break
    to the first index; the refined objective never exceeds the grid's.
    """
    scene = _scene_or_default(cfg, scfg)
    grid = _selection_grid(scene, cfg, scfg)

    score = None
    for j in range(cfg.num_bs):
        coeff = (grid.steer[j] @ np.conj(gradients[j])) * grid.w[j]     # (s, N)
        s_val = np.abs(np.matmul(grid.u, coeff[:, :, None])[:, :, 0])   # (s, t)
        score = s_val if score is None else score + s_val
    score[~grid.s_ok, :] = -np.inf
    flat = score.T.reshape(-1)                    # t-major then s: first-index tie break
    best = int(np.argmax(flat))
    t_idx, s_idx = divmod(best, grid.pts.shape[0])
    p0 = np.concatenate([grid.pts[t_idx], grid.pts[s_idx]])

    bs = _bs_array(cfg)
    project = lambda p: _project_params(p, scene, bs, scfg.bs_exclusion_m)
    refined, _ = _armijo_descent(
        lambda p: _selection_objective(p, gradients, cfg),
        lambda p: _selection_objective_grad(p, gradients, cfg),
        p0, project, scfg.local_descent)
    return AtomParams.from_array(refined)


# ---------------------------------------------------------------------------
# Sparse-group weights subproblem (FISTA with restart)
# ---------------------------------------------------------------------------

def _design_matrices(atoms: list[AtomParams], cfg: SystemConfig) -> list[np.ndarray]:
    params = np.stack([a.as_array() for a in atoms])
    tensor = _atoms_tensor(params, cfg)                    # (K, J, N_R, N)
    K = len(atoms)
    return [tensor[:, j].reshape(K, -1).T for j in range(cfg.num_bs)]   # (N_R*N, K)


class _WeightsProblem(NamedTuple):
    """Quadratic form of the per-BS least squares: gram (J,K,K), dty (K,J), y2."""

    gram: np.ndarray
    dty: np.ndarray
    y2: float

    @classmethod
    def build(cls, atoms, measurements, cfg) -> "_WeightsProblem":
        params = np.stack([a.as_array() for a in atoms])
        return cls.from_tensor(_atoms_tensor(params, cfg), measurements)

    @classmethod
    def from_tensor(cls, tensor: np.ndarray, measurements: MeasurementSet) -> "_WeightsProblem":
        K, J = tensor.shape[0], tensor.shape[1]
        flat = tensor.reshape(K, J, -1)
        ys = np.stack([y.reshape(-1) for y in measurements.per_bs])        # (J, NR*N)
        gram = np.einsum("kjx,ljx->jkl", np.conj(flat), flat)
        dty = np.einsum("kjx,jx->kj", np.conj(flat), ys)
        y2 = float(np.sum(np.abs(ys) ** 2))
        return cls(gram=gram, dty=dty, y2=y2)

    def fit_grad(self, gamma: np.ndarray) -> np.ndarray:
        return 2.0 * (np.einsum("jkl,lj->kj", self.gram, gamma) - self.dty)

    def objective(self, gamma: np.ndarray, lam1: float, lam2: float) -> float:
        gx = np.einsum("jkl,lj->kj", self.gram, gamma)
        fit = float(np.real(np.einsum("kj,kj->", np.conj(gamma), gx))
                    - 2.0 * np.real(np.einsum("kj,kj->", np.conj(gamma), self.dty)) + self.y2)
        return (fit + lam1 * float(np.abs(gamma).sum())
                + lam2 * float(np.linalg.norm(gamma, axis=1).sum()))


def _sparse_group_prox(z: np.ndarray, t1: float, t2: float) -> np.ndarray:
    """Complex soft-threshold by t1 (entrywise), then row group shrinkage by t2."""
    mags = np.abs(z)
    out = z * (np.maximum(mags - t1, 0.0) / np.where(mags > 0.0, mags, 1.0))
    if t2 > 0.0:
        norms = np.linalg.norm(out, axis=1)
        gscale = np.maximum(norms - t2, 0.0) / np.where(norms > 0.0, norms, 1.0)
        out = out * gscale[:, None]
    return out


def solve_weights(atoms: list[AtomParams], measurements: MeasurementSet,
                  cfg: SystemConfig, scfg: SolverConfig,
                  init: Optional[np.ndarray] = None) -> WeightsResult:
    """Per-BS gains for a fixed atom set by accelerated proximal gradient.

    Minimises the group-sparse least squares over the (num_atoms x J)
    complex weight matrix: smooth gradient step, then the composition of the
    entrywise complex soft-threshold (l1) and the row-wise group shrinkage
    (l2,1). Returns the best iterate seen; ``converged`` is False when the
    relative objective change was still above tolerance at ``max_iters``.
    """
    if len(atoms) == 0:
        raise EmptyCandidate("solve_weights requires at least one atom")
    lam1, lam2 = resolve_lambdas(measurements, scfg)
    problem = _WeightsProblem.build(atoms, measurements, cfg)
    return _solve_weights_problem(problem, len(atoms), cfg.num_bs, lam1, lam2,
                                  scfg.weight_solver, init)


def _solve_weights_problem(problem: _WeightsProblem, K: int, J: int, lam1: float,
                           lam2: float, wcfg: WeightSolverConfig,
                           init: Optional[np.ndarray] = None) -> WeightsResult:
    lip = 2.0 * float(np.linalg.eigvalsh(problem.gram)[:, -1].max())
    if lip <= 0.0:
        zero = np.zeros((K, J), dtype=complex)
        return WeightsResult(zero, True, 0, problem.objective(zero, lam1, lam2))
    step = 1.0 / lip
    scale = problem.y2 + 1.0
    slack = 1e-12 * scale        # cancellation noise floor of the quadratic form

    x = np.zeros((K, J), dtype=complex) if init is None else np.asarray(init, dtype=complex).copy()
    y = x.copy()
    t_mom = 1.0
    obj = problem.objective(x, lam1, lam2)
    best_x, best_obj = x.copy(), obj
    converged = False
    it = 0
    for it in range(1, wcfg.max_iters + 1):
        x_new = _sparse_group_prox(y - step * problem.fit_grad(y), step * lam1, step * lam2)
        obj_new = problem.objective(x_new, lam1, lam2)
        if obj_new > obj + slack:    # function restart keeps the sequence stable
            y = x.copy()
            t_mom = 1.0
            x_new = _sparse_group_prox(y - step * problem.fit_grad(y), step * lam1, step * lam2)
            obj_new = problem.objective(x_new, lam1, lam2)
        t_new = (1.0 + math.sqrt(1.0 + 4.0 * t_mom ** 2)) / 2.0
        y = x_new + ((t_mom - 1.0) / t_new) * (x_new - x)
        rel_change = abs(obj - obj_new) / max(abs(obj), slack)
        x_change = float(np.linalg.norm(x_new - x)) / max(float(np.linalg.norm(x_new)), 1e-30)
        x, obj, t_mom = x_new, obj_new, t_new
        if obj < best_obj + slack:   # ties prefer the newest iterate
            best_x, best_obj = x.copy(), min(obj, best_obj)
        if rel_change < wcfg.tol and x_change < wcfg.xtol:
            # momentum makes per-iteration changes oscillate, so confirm with
            # the prox fixed-point residual at the iterate itself
            fixed = _sparse_group_prox(x - step * problem.fit_grad(x), step * lam1, step * lam2)
            fp_res = float(np.linalg.norm(fixed - x)) / max(float(np.linalg.norm(x)), 1e-30)
            obj_fixed = problem.objective(fixed, lam1, lam2)
            if obj_fixed < best_obj + slack:
                best_x, best_obj = fixed.copy(), min(obj_fixed, best_obj)
            if fp_res < wcfg.xtol:
                converged = True
                break
            y = fixed.copy()         # restart from the cleaned iterate
            x, obj, t_mom = fixed, obj_fixed, 1.0
    return WeightsResult(best_x, converged, it, best_obj)


def _merge_coherent_atoms(candidate: CandidateSolution, cfg: SystemConfig,
                          threshold: float = 0.9, param_tol: float = 20.0) -> CandidateSolution:
    """Coalesce atoms that duplicate one support point.

    Two atoms count as duplicates when their stacked responses are nearly
    collinear, or when their scatters and path-length radii agree within
    ``param_tol`` metres (close parameters can still show middling stacked
    coherence while being collinear at individual BSs, which is exactly what
    lets an unregularised refit blow the pair up with cancelling signs).
    The weaker atom's weights are folded into the stronger one; the caller
    re-solves weights afterwards.
    """
    K = candidate.num_atoms
    if K <= 1:
        return candidate
    flat = _atoms_tensor(candidate.params_matrix(), cfg).reshape(K, -1)
    norms = np.linalg.norm(flat, axis=1)
    coh = np.abs(flat @ flat.conj().T) / np.outer(norms, norms)
    params = candidate.params_matrix()
    ls = params[:, 2:4]
    radii = np.linalg.norm(params[:, 0:2] - ls, axis=1)
    ls_dist = np.linalg.norm(ls[:, None, :] - ls[None, :, :], axis=2)
    radius_gap = np.abs(radii[:, None] - radii[None, :])
    duplicate = (coh >= threshold) | ((ls_dist <= param_tol) & (radius_gap <= param_tol))
    strength = candidate.group_norms()
    order = list(np.argsort(-strength, kind="stable"))
    keep: list[int] = []
    absorbed: dict[int, int] = {}
    for k in order:
        owner = next((m for m in keep if duplicate[k, m]), None)
        if owner is None:
            keep.append(k)
        else:
            absorbed[k] = owner
    if not absorbed:
        return candidate
    keep.sort()
    weights = candidate.weights[keep].copy()
    index_of = {k: i for i, k in enumerate(keep)}
    for k, owner in absorbed.items():
        weights[index_of[owner]] += candidate.weights[k]
    return CandidateSolution(atoms=[candidate.atoms[k] for k in keep], weights=weights)


def prune(candidate: CandidateSolution, scfg: SolverConfig) -> CandidateSolution:
    """Drop every atom whose cross-BS weight norm is at or below threshold.

    With ``prune_threshold`` unset the threshold adapts to ``prune_scale``
    times the largest group norm, so it tracks the measurement scale.
    """
    if candidate.num_atoms == 0:
        return candidate.copy()
    norms = candidate.group_norms()
    thr = scfg.prune_threshold
    if thr is None:
        thr = scfg.prune_scale * float(norms.max())
    keep = norms > thr
    return CandidateSolution(atoms=[a for a, k in zip(candidate.atoms, keep) if k],
                             weights=candidate.weights[keep])


# ---------------------------------------------------------------------------
# Local improvement and the outer ADCG loop
# ---------------------------------------------------------------------------

def local_improve(candidate: CandidateSolution, measurements: MeasurementSet,
                  cfg: SystemConfig, scfg: SolverConfig) -> CandidateSolution:
    """Joint Armijo gradient descent on all atom locations.

    Weights are held fixed within each backtracking line search and re-solved
    (warm-started) after every accepted location update, so the step follows
    the profiled objective in the locations alone. The regularised loss is
    non-increasing throughout; the input comes back unchanged when no
    improving step exists.
    """
    if candidate.num_atoms == 0:
        return candidate.copy()
    scene = _scene_or_default(cfg, scfg)
    bs = _bs_array(cfg)
    lam1, lam2 = resolve_lambdas(measurements, scfg)
    ld = scfg.local_descent
    K = candidate.num_atoms
    J = cfg.num_bs
    ys = np.stack([y for y in measurements.per_bs])
    # the per-step re-solves only track the moving locations; a short budget
    # on the warm-started prox solver keeps them cheap without losing the
    # monotone-descent guarantee
    inner = WeightSolverConfig(max_iters=min(12, scfg.weight_solver.max_iters),
                               tol=scfg.weight_solver.tol)

    def penalty(w):
        return lam1 * float(np.abs(w).sum()) + lam2 * float(np.linalg.norm(w, axis=1).sum())

    def fit_only(pflat, w):
        tensor = _atoms_tensor(pflat.reshape(K, 4), cfg)
        model = np.einsum("kj,kjmn->jmn", w, tensor)
        return float(np.sum(np.abs(model - ys) ** 2))

    def forward(pflat):
        parts = _forward_parts(pflat.reshape(K, 4), cfg, with_partials=True)
        tensor = parts["a"][:, :, :, None] * parts["b"][:, :, None, :]
        return parts, tensor

    def fit_grad(parts, tensor, w):
        res = np.einsum("kj,kjmn->jmn", w, tensor) - ys
        fit = float(np.sum(np.abs(res) ** 2))
        R = np.conj(res)
        u = np.einsum("kjm,jmn->kjn", parts["a"], R)
        du = np.einsum("kjm,jmn->kjn", parts["da"], R)
        t_theta = np.einsum("kjn,kjn->kj", du, parts["b"])
        t_tau = np.einsum("kjn,kjn->kj", u, parts["db"])
        grad = (np.einsum("kj,kjp->kp", 2.0 * np.real(w * t_theta), parts["dtheta"])
                + np.einsum("kj,kjp->kp", 2.0 * np.real(w * t_tau), parts["dtau"]))
        return fit, grad.reshape(-1)

    def project(pflat):
        return _project_params(pflat.reshape(K, 4), scene, bs, scfg.bs_exclusion_m).reshape(-1)

    x = project(candidate.params_matrix().reshape(-1))
    w = candidate.weights.copy()
    parts, tensor = forward(x)
    fit, g = fit_grad(parts, tensor, w)
    f = fit + penalty(w)
    floor = ld.tol * (abs(f) + 1e-30)
    prev_x = prev_g = None
    step = None
    for _ in range(ld.max_steps):
        gnorm2 = float(np.sum(g * g))
        if gnorm2 == 0.0 or not np.isfinite(gnorm2):
            break
        if prev_x is not None:
            dx = x - prev_x
            dg = g - prev_g
            denom = float(np.sum(dx * dg))
            step = float(np.sum(dx * dx)) / denom if denom > 0 else None
        if step is None or not np.isfinite(step) or step <= 0:
            step = ld.step_init / math.sqrt(gnorm2)
        pen = penalty(w)
        t = step
        accepted = False
        for _ in range(ld.max_backtracks):
            cand = project(x - t * g)
            fc = fit_only(cand, w) + pen
            decrease = float(np.sum(g * (x - cand)))
            if fc <= f - ld.armijo_c * max(decrease, 0.0) and fc < f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        prev_x, prev_g = x, g
        x, step = cand, t
        parts, tensor = forward(x)
        problem = _WeightsProblem.from_tensor(tensor, measurements)
        res = _solve_weights_problem(problem, K, J, lam1, lam2, inner, init=w)
        if res.objective <= fc:
            w = res.gamma
        fit, g = fit_grad(parts, tensor, w)
        f_new = min(fc, fit + penalty(w))
        improvement = f - f_new
        f = f_new
        if improvement <= floor:
            break
    final = solve_weights([AtomParams.from_array(x.reshape(K, 4)[k]) for k in range(K)],
                          measurements, cfg, scfg, init=w)
    return CandidateSolution(atoms=[AtomParams.from_array(x.reshape(K, 4)[k]) for k in range(K)],
                             weights=final.gamma)


def _residual_norm2(candidate: CandidateSolution, measurements: MeasurementSet,
                    cfg: SystemConfig) -> float:
    return sum(float(np.sum(np.abs(r) ** 2)) for r in _residuals(candidate, measurements, cfg))


def _fisher_scales(cfg: SystemConfig, scene: Rect) -> tuple[float, float]:
    """Delay-limited vs angle-limited position scales of one atom, metres.

    The root curvature of the data fit along a path-length change is set by
    the rms subcarrier index, and along a transverse scatter move by the rms
    antenna index at a typical range; their ratio says how much sharper a
    DoA-derived position is than a delay-derived one.
    """
    n = np.arange(cfg.num_subcarriers)
    n_rms = max(float(np.sqrt(np.mean(n ** 2))), 1e-9)
    delay_scale = cfg.speed_of_light / (2.0 * np.pi * cfg.subcarrier_spacing * n_rms)
    m = np.arange(cfg.num_antennas)
    m_rms = max(float(np.sqrt(np.mean(m ** 2))), 1e-9)
    r_typ = 0.5 * math.hypot(scene.width, scene.height)
    angle_scale = r_typ * cfg.wavelength / (2.0 * np.pi * cfg.element_spacing * m_rms)
    return delay_scale, angle_scale


def _align_mobiles(candidate: CandidateSolution, scene: Rect, cfg: SystemConfig,
                   noise_sigma: Optional[float] = None, rounds: int = 40) -> CandidateSolution:
    """Rotate each atom's mobile onto a consensus point of all mobile rings.

    Every measurement matrix sees an atom's mobile only through the scalar
    ``||l_t - l_s||``, so the mobile component of a scattered atom is free on
    a circle around its scatter and the loss cannot break the tie. This step
    picks the in-scene point minimising the weighted squared ring misfit
    (coarse scan plus fixed-point refinement) and moves each mobile to its
    ring's nearest point; radii are preserved exactly, so the loss is
    unchanged up to rounding. Atoms heard at a single BS get their scatter
    re-projected along the arrival ray to the consensus-consistent spot,
    which is the one family member their own measurements cannot pick.

    When ``noise_sigma`` is given, atoms whose fitted radius is consistent
    with zero at three sigma of the delay-limited radius noise are treated
    as virtual scatters sitting on the mobile: their radius snaps to zero
    and their (much sharper, DoA-derived) centres vote as point anchors with
    the delay-to-angle Fisher ratio as extra weight.
    """
    if candidate.num_atoms == 0:
        return candidate
    params = candidate.params_matrix()
    lt = params[:, 0:2]
    ls = params[:, 2:4]
    radii = np.linalg.norm(lt - ls, axis=1)
    w = candidate.group_norms()
    if w.sum() <= 0.0:
        w = np.ones(len(radii))

    # a single informative BS leaves the scatter free to slide along its
    # arrival ray, making the ring radius arbitrary: such atoms carry no
    # information about the mobile and must not vote in the consensus
    mags = np.abs(candidate.weights)
    peak = mags.max(axis=1, keepdims=True)
    informative = (mags > 0.05 * np.where(peak > 0.0, peak, 1.0)).sum(axis=1)
    vote = w * (informative >= 2)
    if vote.sum() <= 0.0:
        vote = w.copy()

    delay_scale, angle_scale = _fisher_scales(cfg, scene)
    # per-ring misfit saturation: a single atom with a garbage radius (e.g. a
    # chimera fitting different paths at different BSs) must not veto the
    # true consensus basin
    caps = np.full(candidate.num_atoms, 0.1 * delay_scale)
    if noise_sigma is not None and noise_sigma > 0.0:
        entries = cfg.num_antennas * cfg.num_subcarriers
        snr_matched = np.maximum(w * np.sqrt(entries) / (2.0 * noise_sigma), 1.0)
        sigma_radius = delay_scale * np.sqrt(2.0) / snr_matched
        caps = np.clip(3.0 * sigma_radius, 0.1 * delay_scale, delay_scale)
        snap_radius = np.clip(3.0 * sigma_radius, 1.0, 0.3 * delay_scale)
        # weak atoms have loose radius statistics and are often spurious, so
        # only solidly-weighted multi-BS atoms may claim to be virtual
        anchors = (radii < snap_radius) & (informative >= 2) & (w >= 0.5 * w.max())
        if anchors.any():
            radii = np.where(anchors, 0.0, radii)
            ratio = min(max((delay_scale / angle_scale) ** 2, 1.0), 1.0e4)
            vote = np.where(anchors, vote * ratio, vote)

    G = 48
    gx = np.linspace(scene.xmin + scene.width / (2 * G), scene.xmax - scene.width / (2 * G), G)
    gy = np.linspace(scene.ymin + scene.height / (2 * G), scene.ymax - scene.height / (2 * G), G)
    cells = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)

    def ring_points(centre):
        d = centre[None, :] - ls
        nrm = np.linalg.norm(d, axis=1)
        unit = np.where(nrm[:, None] > 0.0, d / np.where(nrm[:, None] > 0.0, nrm[:, None], 1.0), 0.0)
        pts = ls + radii[:, None] * unit
        degenerate = nrm == 0.0
        if degenerate.any():
            pts[degenerate] = lt[degenerate]
        return pts

    # global coarse scan of the ring-consistency objective (misfits saturate
    # at each ring's cap); the fixed point below only refines within the
    # chosen basin, re-weighting outlier rings down IRLS-style
    dist = np.linalg.norm(cells[:, None, :] - ls[None, :, :], axis=2)
    misfit2 = np.minimum((dist - radii[None, :]) ** 2, caps[None, :] ** 2)
    m = cells[int(np.argmin((misfit2 * vote[None, :]).sum(axis=1)))]
    for _ in range(rounds):
        miss = np.abs(np.linalg.norm(m[None, :] - ls, axis=1) - radii)
        eff = vote * np.minimum(1.0, (caps / np.maximum(miss, 1e-12)) ** 2)
        if eff.sum() <= 0.0:
            eff = vote
        proj = ring_points(m)
        new = (eff[:, None] * proj).sum(axis=0) / eff.sum()
        new = np.array(scene.clip(new[0], new[1]))
        if np.linalg.norm(new - m) < 1e-9:
            m = new
            break
        m = new

    for k in range(candidate.num_atoms):
        new_ls = _slide_single_bs_scatter(ls[k], radii[k], mags[k], m, cfg, scene)
        if new_ls is not None:
            ls[k] = new_ls
            radii[k] = np.linalg.norm(m - new_ls)
    proj = ring_points(m)
    if noise_sigma is not None:
        # final alignment: the search domain is the scene, so a ring point
        # sticking outside gets clipped even at the cost of exact radius
        # preservation (the in-loop call stays loss-neutral instead)
        proj = np.array([scene.clip(p[0], p[1]) for p in proj])
    atoms = [AtomParams(mobile=Location(float(proj[k, 0]), float(proj[k, 1])),
                        scatter=Location(float(ls[k, 0]), float(ls[k, 1])))
             for k in range(candidate.num_atoms)]
    return CandidateSolution(atoms=atoms, weights=candidate.weights.copy())


def _slide_single_bs_scatter(ls_k: np.ndarray, radius: float, mags_k: np.ndarray,
                             m: np.ndarray, cfg: SystemConfig, scene: Rect):
    """Consensus-consistent scatter for an atom heard at one BS only.

    Such an atom constrains just the arrival ray and the total path length
    at its dominant BS; the scatter can slide along the ray with the mobile
    ring radius compensating, and no measurement breaks the tie. Sliding to
    make the ring pass through the consensus mobile is a monotone 1-D root
    find. Returns None when the atom is multi-BS or no in-scene root exists.
    """
    order = np.argsort(mags_k)[::-1]
    if mags_k[order[0]] <= 0.0:
        return None
    if len(order) > 1 and mags_k[order[1]] > 0.05 * mags_k[order[0]]:
        return None
    q = np.array([cfg.bs_positions[order[0]].x, cfg.bs_positions[order[0]].y])
    rel = ls_k - q
    r0 = np.linalg.norm(rel)
    if r0 <= 0.0:
        return None
    u = rel / r0
    total = radius + r0                      # c * tau at the dominant BS
    g = lambda r: r + np.linalg.norm(m - q - r * u) - total
    lo, hi = 1e-6, total
    if g(lo) > 0.0 or g(hi) < 0.0:
        return None
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if g(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
    root = 0.5 * (lo + hi)
    cand = q + root * u
    if not scene.contains(Location(float(cand[0]), float(cand[1])), margin=1e-9):
        return None
    return cand


def _polish(candidate: CandidateSolution, measurements: MeasurementSet,
            cfg: SystemConfig, scfg: SolverConfig, rounds: int = 2) -> CandidateSolution:
    """Debias the final support: near-unregularised weight refit plus descent.

    The shrinkage of the weights leaves a residual aligned with the recovered
    atoms that biases their locations; refitting with the penalties (almost)
    off and re-descending removes it. A 2% remnant of the group penalty stays
    on so that a pair of nearly collinear atoms cannot blow up with huge
    cancelling weights. Runs on a fixed support (with one prune pass in
    between) and never touches the solver's logged iteration history.
    """
    if candidate.num_atoms == 0:
        return candidate
    _, lam2 = resolve_lambdas(measurements, scfg)
    ls_cfg = replace(scfg, lambda1=0.0, lambda2=0.02 * lam2)
    out = candidate
    for r in range(rounds):
        out = _merge_coherent_atoms(out, cfg)
        w = solve_weights(out.atoms, measurements, cfg, ls_cfg, init=out.weights)
        out = CandidateSolution(atoms=out.atoms, weights=w.gamma)
        out = local_improve(out, measurements, cfg, ls_cfg)
        if r == 0:
            pruned = prune(out, scfg)
            if 0 < pruned.num_atoms < out.num_atoms:
                out = pruned
            if out.num_atoms == 0:
                return out
    merged = _merge_coherent_atoms(out, cfg)
    if merged.num_atoms < out.num_atoms:
        w = solve_weights(merged.atoms, measurements, cfg, ls_cfg, init=merged.weights)
        out = CandidateSolution(atoms=merged.atoms, weights=w.gamma)
    return _align_mobiles(out, _scene_or_default(cfg, scfg), cfg,
                          noise_sigma=_noise_sigma(measurements))


def adcg_solve(measurements: MeasurementSet, cfg: SystemConfig,
               scfg: Optional[SolverConfig] = None) -> AdcgResult:
    """Full ADCG loop: select, re-weight, prune, locally improve, repeat.

    Stops when the relative residual decrease falls below ``stop_tol``, when
    an iteration cannot improve the regularised loss (the iterate is then
    rolled back), or at ``max_outer_iters`` (flagged as not converged).
    ``loss_history`` records the regularised loss at the end of every
    accepted iteration and is non-increasing by construction.
    """
    scfg = scfg or SolverConfig()
    scfg.validate()
    lam1, lam2 = resolve_lambdas(measurements, scfg)
    scfg = replace(scfg, lambda1=lam1, lambda2=lam2)    # freeze so inner calls agree
    J = cfg.num_bs
    candidate = CandidateSolution.empty(J)
    prev_loss = loss(candidate, measurements, cfg, scfg)
    prev_resid = _residual_norm2(candidate, measurements, cfg)
    loss_history: list[float] = []
    residual_history: list[float] = []
    converged = False
    n_iters = 0
    for n_iters in range(1, scfg.max_outer_iters + 1):
        grads = residual_gradients(candidate, measurements, cfg)
        new_atom = select_next_source(grads, cfg, scfg)
        # zero-weight optimality gate: if even the best atom cannot enter the
        # sparse-group support, the candidate is already optimal over the continuum
        v, _ = _selection_inner(new_atom.as_array(), grads, cfg)
        entry = float(np.linalg.norm(np.maximum(np.abs(v) - lam1, 0.0)))
        if candidate.num_atoms > 0 and entry <= lam2 * (1.0 + 1e-9):
            converged = True
            n_iters -= 1
            break
        atoms = candidate.atoms + [new_atom]
        warm = np.vstack([candidate.weights, np.zeros((1, J), dtype=complex)])
        w = solve_weights(atoms, measurements, cfg, scfg, init=warm)
        trial = CandidateSolution(atoms=atoms, weights=w.gamma)
        trial = _merge_coherent_atoms(trial, cfg)
        trial = prune(trial, scfg)
        if trial.num_atoms > 0:
            w2 = solve_weights(trial.atoms, measurements, cfg, scfg, init=trial.weights)
            trial = CandidateSolution(atoms=trial.atoms, weights=w2.gamma)
            trial = local_improve(trial, measurements, cfg, scfg)
            trial = _align_mobiles(trial, _scene_or_default(cfg, scfg), cfg)
        trial_loss = loss(trial, measurements, cfg, scfg)
        if trial_loss > prev_loss * (1.0 + 1e-12) + 1e-30:
            converged = True            # no further improvement available
            n_iters -= 1
            break
        candidate = trial
        resid = _residual_norm2(candidate, measurements, cfg)
        loss_history.append(trial_loss)
        residual_history.append(resid)
        rel_drop = (prev_resid - resid) / max(prev_resid, 1e-30)
        prev_loss, prev_resid = trial_loss, resid
        if rel_drop < scfg.stop_tol:
            converged = True
            break

    if scfg.final_polish:
        candidate = _polish(candidate, measurements, cfg, scfg)
    return AdcgResult(candidate=candidate, converged=converged,
                      loss_history=loss_history, residual_history=residual_history,
                      n_iters=n_iters)
