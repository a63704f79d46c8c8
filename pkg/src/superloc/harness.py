"""Scenario generation, estimate-to-truth scoring, and Monte Carlo sweeps.

The condition taxonomy follows the usual multi-BS convention:

* ``los``   - every BS sees the mobile directly, no scatterers;
* ``nlos``  - every BS has a direct path plus scattered paths;
* ``olos``  - every path at every BS is scattered;
* ``mixed`` - each BS is independently dealt an nlos-style or olos-style
  path set.

Scatterers are shared across base stations (one physical reflector sends a
path to every BS that uses it); direct paths carry a virtual scatter placed
at the mobile itself during canonicalisation.
"""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import EmptyCandidate, InvalidCondition
from .geometry import Location, Rect, canonicalise_virtual_scatter
from .signal_model import SystemConfig, add_awgn, synthesize
from .solver import AdcgResult, CandidateSolution, SolverConfig, adcg_solve

__all__ = [
    "Condition",
    "Path",
    "Scenario",
    "TrialResult",
    "SweepPoint",
    "MonteCarloResult",
    "MsEstimate",
    "Association",
    "generate_scenario",
    "canonicalise_scenario",
    "truth_scatters",
    "extract_ms",
    "associate_scatters",
    "rmse",
    "error_breakdown",
    "run_trial",
    "run_monte_carlo",
    "default_scene",
]

AMBIGUITY_SPREAD_M = 10.0
BS_CLEARANCE_M = 20.0


class Condition(enum.Enum):
    LOS = "los"
    OLOS = "olos"
    NLOS = "nlos"
    MIXED = "mixed"

    @classmethod
    def parse(cls, text: str) -> "Condition":
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise InvalidCondition(f"unknown condition {text!r}; expected one of "
                                   f"{[c.value for c in cls]}") from None


class Path(NamedTuple):
    """One propagation path at one BS: optional scatter plus complex gain."""

    scatter: Optional[Location]
    gain: complex


@dataclass
class Scenario:
    """Ground truth: mobile position and per-BS path lists."""

    mobile: Location
    per_bs_paths: list[list[Path]]
    condition: Condition
    seed: Optional[int] = None

    @property
    def num_bs(self) -> int:
        return len(self.per_bs_paths)


def default_scene(cfg: SystemConfig) -> Rect:
    """Bounding box of the BS positions, the conventional deployment area."""
    xs = [p.x for p in cfg.bs_positions]
    ys = [p.y for p in cfg.bs_positions]
    return Rect(min(xs), min(ys), max(xs), max(ys))


def _sample_point(rng: np.random.Generator, scene: Rect, keep_away: Sequence[tuple[Location, float]],
                  max_tries: int = 10000) -> Location:
    for _ in range(max_tries):
        p = Location(rng.uniform(scene.xmin, scene.xmax), rng.uniform(scene.ymin, scene.ymax))
        if all(p.distance_to(q) >= r for q, r in keep_away):
            return p
    raise InvalidCondition("could not place a point satisfying the clearance constraints")


def _gain(rng: np.random.Generator, gain_model: str) -> complex:
    if gain_model == "unit":
        return 1.0 + 0.0j
    if gain_model == "random-phase":
        return complex(np.exp(1j * rng.uniform(0.0, 2.0 * np.pi)))
    raise InvalidCondition(f"unknown gain model {gain_model!r}")


def generate_scenario(condition, num_scatterers: Optional[int] = None,
                      scene: Optional[Rect] = None, gain_model: str = "random-phase",
                      seed: int = 0, cfg: Optional[SystemConfig] = None,
                      bs_clearance_m: float = BS_CLEARANCE_M,
                      min_separation_m: float = 0.0) -> Scenario:
    """Random scenario for one condition; deterministic given ``seed``.

    Mobile and scatterers are uniform over the scene with ``bs_clearance_m``
    of clearance from every BS (so no path degenerates onto an array);
    ``min_separation_m`` additionally keeps the mobile and all scatterers
    apart from each other, for tests needing well-separated atoms. Gains are
    drawn per (BS, path): unit modulus with seeded uniform phase by default,
    or exactly 1 under the ``unit`` model. Default scatterer counts are 0
    (los), 1 (nlos), 2 (olos, mixed).
    """
    cfg = cfg or SystemConfig.default_4bs()
    condition = condition if isinstance(condition, Condition) else Condition.parse(condition)
    scene = scene or default_scene(cfg)
    defaults = {Condition.LOS: 0, Condition.NLOS: 1, Condition.OLOS: 2, Condition.MIXED: 2}
    n_scat = defaults[condition] if num_scatterers is None else int(num_scatterers)

    if condition is Condition.LOS and n_scat != 0:
        raise InvalidCondition("los condition takes no scatterers")
    if condition is not Condition.LOS and n_scat < 1:
        raise InvalidCondition(f"{condition.value} condition requires at least one scatterer")

    rng = np.random.default_rng(seed)
    clearance = [(q, bs_clearance_m) for q in cfg.bs_positions]
    mobile = _sample_point(rng, scene, clearance)
    scatters: list[Location] = []
    for _ in range(n_scat):
        away = list(clearance)
        if min_separation_m > 0.0:
            away += [(mobile, min_separation_m)] + [(s, min_separation_m) for s in scatters]
        scatters.append(_sample_point(rng, scene, away))

    if condition is Condition.MIXED:
        styles = rng.integers(0, 2, size=cfg.num_bs)   # 1 = nlos-style, 0 = olos-style
    per_bs: list[list[Path]] = []
    for j in range(cfg.num_bs):
        if condition is Condition.LOS:
            skeleton: list[Optional[Location]] = [None]
        elif condition is Condition.NLOS:
            skeleton = [None] + list(scatters)
        elif condition is Condition.OLOS:
            skeleton = list(scatters)
        else:
            # mixed: the coin flip decides whether this BS keeps its direct
            # path; the scatterers reflect towards every BS either way
            skeleton = ([None] if styles[j] else []) + list(scatters)
        per_bs.append([Path(s, _gain(rng, gain_model)) for s in skeleton])
    return Scenario(mobile=mobile, per_bs_paths=per_bs, condition=condition, seed=seed)


def canonicalise_scenario(scenario: Scenario) -> Scenario:
    """Scenario with every direct path given its virtual scatter at the mobile."""
    per_bs = [[Path(canonicalise_virtual_scatter(scenario.mobile, p.scatter), p.gain)
               for p in paths] for paths in scenario.per_bs_paths]
    return Scenario(mobile=scenario.mobile, per_bs_paths=per_bs,
                    condition=scenario.condition, seed=scenario.seed)


def truth_scatters(scenario: Scenario) -> list[Location]:
    """Distinct canonical scatter positions, in first-appearance order.

    Virtual scatters of direct paths collapse onto the mobile, so an nlos
    scenario contributes the mobile itself plus every physical reflector.
    """
    seen: dict[tuple[float, float], Location] = {}
    for paths in scenario.per_bs_paths:
        for p in paths:
            s = canonicalise_virtual_scatter(scenario.mobile, p.scatter)
            seen.setdefault(s.as_tuple(), s)
    return list(seen.values())


class MsEstimate(NamedTuple):
    location: Location
    ambiguous: bool
    spread_m: float


def extract_ms(candidate: CandidateSolution) -> MsEstimate:
    """Single mobile estimate from a candidate's atoms.

    Weighted centroid of the atoms' mobile components, each weighted by its
    cross-BS gain norm; the trial is flagged ambiguous when the mobile
    components spread over more than 10 m.
    """
    if candidate.num_atoms == 0:
        raise EmptyCandidate("cannot extract a mobile estimate from an empty candidate")
    pts = np.array([[a.mobile.x, a.mobile.y] for a in candidate.atoms])
    w = candidate.group_norms()
    if w.sum() <= 0.0:
        w = np.ones(len(pts))
    centre = (w[:, None] * pts).sum(axis=0) / w.sum()
    spread = 0.0
    for i in range(len(pts)):
        for k in range(i + 1, len(pts)):
            spread = max(spread, float(np.linalg.norm(pts[i] - pts[k])))
    return MsEstimate(Location(float(centre[0]), float(centre[1])),
                      spread > AMBIGUITY_SPREAD_M, spread)


class Association(NamedTuple):
    pairs: list[tuple[int, int]]
    unmatched_est: list[int]
    unmatched_truth: list[int]


def associate_scatters(estimated: Sequence[Location], truth: Sequence[Location],
                       weights: Optional[Sequence[float]] = None) -> Association:
    """Greedy nearest-neighbour pairing of estimates to ground truth.

    Estimates are visited in descending weight order (input order when no
    weights are given); each takes the nearest still-unmatched truth
    scatter. Leftovers on either side are returned unmatched.
    """
    order = list(range(len(estimated)))
    if weights is not None:
        order = list(np.argsort(-np.asarray(weights, dtype=float), kind="stable"))
    remaining = list(range(len(truth)))
    pairs: list[tuple[int, int]] = []
    unmatched_est: list[int] = []
    for ei in order:
        if not remaining:
            unmatched_est.append(ei)
            continue
        dists = [estimated[ei].distance_to(truth[ti]) for ti in remaining]
        best = int(np.argmin(dists))
        pairs.append((ei, remaining.pop(best)))
    return Association(pairs=pairs, unmatched_est=unmatched_est, unmatched_truth=remaining)


def error_breakdown(estimated_ms: Location, estimated_scatters: Sequence[Location],
                    truth: Scenario, weights: Optional[Sequence[float]] = None):
    """Per-point location errors against the canonical truth.

    Returns ``(ms_error, per_scatter_errors, matched_only)`` where
    ``per_scatter_errors`` is aligned with :func:`truth_scatters`. A truth
    scatter left unmatched falls back to its distance to the nearest
    estimate of any kind (including the mobile estimate), keeping the metric
    defined when the solver returns too few scatters; ``matched_only``
    averages over actually matched pairs plus the mobile.
    """
    truths = truth_scatters(truth)
    ms_error = estimated_ms.distance_to(truth.mobile)
    assoc = associate_scatters(estimated_scatters, truths, weights)
    errors = [math.nan] * len(truths)
    matched = []
    for ei, ti in assoc.pairs:
        errors[ti] = estimated_scatters[ei].distance_to(truths[ti])
        matched.append(errors[ti])
    fallback_pool = list(estimated_scatters) + [estimated_ms]
    for ti in assoc.unmatched_truth:
        errors[ti] = min(truths[ti].distance_to(p) for p in fallback_pool)
    matched_only = (sum(matched) + ms_error) / (len(matched) + 1)
    return ms_error, errors, matched_only


def rmse(estimated_ms: Location, estimated_scatters: Sequence[Location],
         truth: Scenario, weights: Optional[Sequence[float]] = None) -> float:
    """Mean location error over the K truth scatters plus the mobile, metres."""
    ms_error, per_scatter, _ = error_breakdown(estimated_ms, estimated_scatters, truth, weights)
    return (sum(per_scatter) + ms_error) / (len(per_scatter) + 1)


@dataclass
class TrialResult:
    """Scored outcome of one generate/synthesize/solve round trip."""

    condition: str
    snr_db: Optional[float]
    trial: int
    rmse_m: float
    ms_error_m: float
    per_scatter_errors_m: list[float]
    matched_only_rmse_m: float
    converged: bool
    ambiguous: bool
    runtime_s: float
    num_atoms: int
    loss_history: list[float] = field(default_factory=list)


@dataclass
class SweepPoint:
    condition: str
    snr_db: Optional[float]
    mean_rmse_m: float
    std_rmse_m: float
    trials: int
    ambiguous_count: int


class MonteCarloResult(NamedTuple):
    points: list[SweepPoint]
    trials: list[TrialResult]


def _trial_seeds(master_seed: int, condition: Condition, snr_index: int, trial: int) -> tuple[int, int]:
    cond_code = list(Condition).index(condition)
    ss = np.random.SeedSequence([int(master_seed), cond_code, snr_index, trial])
    state = ss.generate_state(2)
    return int(state[0]), int(state[1])


def run_trial(condition: Condition, snr_db: Optional[float], scenario_seed: int,
              noise_seed: int, cfg: SystemConfig, scfg: SolverConfig,
              scene: Rect, trial_index: int = 0,
              num_scatterers: Optional[int] = None,
              gain_model: str = "random-phase") -> TrialResult:
    """One Monte Carlo trial: generate, synthesize, corrupt, solve, score.

    Never raises on solver trouble: an empty candidate falls back to the
    scene centre as a degenerate estimate so the sweep always aggregates.
    """
    t0 = time.perf_counter()
    scenario = generate_scenario(condition, num_scatterers=num_scatterers, scene=scene,
                                 gain_model=gain_model, seed=scenario_seed, cfg=cfg)
    scenario = canonicalise_scenario(scenario)
    clean = synthesize(scenario, cfg)
    noisy = add_awgn(clean, snr_db, noise_seed)
    result: AdcgResult = adcg_solve(noisy, cfg, scfg)
    cand = result.candidate
    ambiguous = False
    if cand.num_atoms == 0:
        centre = Location((scene.xmin + scene.xmax) / 2.0, (scene.ymin + scene.ymax) / 2.0)
        ms_est, est_scatters, est_weights = centre, [centre], [1.0]
        ambiguous = True
    else:
        ms = extract_ms(cand)
        ms_est, ambiguous = ms.location, ms.ambiguous
        est_scatters = [a.scatter for a in cand.atoms]
        est_weights = list(cand.group_norms())
    ms_error, per_scatter, matched_only = error_breakdown(ms_est, est_scatters, scenario, est_weights)
    total = (sum(per_scatter) + ms_error) / (len(per_scatter) + 1)
    return TrialResult(
        condition=scenario.condition.value,
        snr_db=None if snr_db is None or np.isinf(snr_db) else float(snr_db),
        trial=trial_index,
        rmse_m=total,
        ms_error_m=ms_error,
        per_scatter_errors_m=per_scatter,
        matched_only_rmse_m=matched_only,
        converged=result.converged,
        ambiguous=ambiguous,
        runtime_s=time.perf_counter() - t0,
        num_atoms=cand.num_atoms,
        loss_history=list(result.loss_history),
    )


def run_monte_carlo(condition, snr_grid_db: Sequence[Optional[float]], trials: int,
                    cfg: Optional[SystemConfig] = None, scfg: Optional[SolverConfig] = None,
                    seed: int = 0, scene: Optional[Rect] = None,
                    num_scatterers: Optional[int] = None, gain_model: str = "random-phase",
                    threads: int = 1) -> MonteCarloResult:
    """RMSE sweep over an SNR grid; bit-reproducible for a given seed.

    Every trial derives its own seeds from (seed, condition, SNR index,
    trial index), so any execution order - including threaded - yields the
    same table after index-ordered aggregation. Solver flags are carried in
    the per-trial records; the sweep itself never aborts.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = cfg or SystemConfig.default_4bs()
    scfg = scfg or SolverConfig()
    condition = condition if isinstance(condition, Condition) else Condition.parse(condition)
    scene = scene or default_scene(cfg)
    scfg = replace(scfg, scene=scene)

    jobs = []
    for si, snr in enumerate(snr_grid_db):
        for t in range(trials):
            scen_seed, noise_seed = _trial_seeds(seed, condition, si, t)
            jobs.append((si, snr, t, scen_seed, noise_seed))

    def work(job):
        si, snr, t, scen_seed, noise_seed = job
        return si, run_trial(condition, snr, scen_seed, noise_seed, cfg, scfg, scene,
                             trial_index=t, num_scatterers=num_scatterers, gain_model=gain_model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]

    points: list[SweepPoint] = []
    all_trials: list[TrialResult] = []
    for si, snr in enumerate(snr_grid_db):
        rows = [r for s, r in outcomes if s == si]
        rows.sort(key=lambda r: r.trial)
        all_trials.extend(rows)
        vals = np.array([r.rmse_m for r in rows])
        points.append(SweepPoint(
            condition=condition.value,
            snr_db=None if snr is None or np.isinf(snr) else float(snr),
            mean_rmse_m=float(vals.mean()),
            std_rmse_m=float(vals.std()),
            trials=len(rows),
            ambiguous_count=sum(r.ambiguous for r in rows),
        ))
    return MonteCarloResult(points=points, trials=all_trials)
