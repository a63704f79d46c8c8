import numpy as np
import pytest

from superloc.geometry import Location, Rect
from superloc.harness import canonicalise_scenario, extract_ms, generate_scenario, truth_scatters
from superloc.signal_model import MeasurementSet, add_awgn, synthesize
from superloc.solver import (
    AtomParams,
    CandidateSolution,
    SolverConfig,
    adcg_solve,
    local_improve,
    loss,
    solve_weights,
)

SCENE = Rect(0, 0, 1000, 1000)


def solved_scenario(cfg, seed, condition="nlos", separation=50.0, snr_db=None, scfg=None):
    scen = generate_scenario(condition, seed=seed, cfg=cfg, min_separation_m=separation)
    scen = canonicalise_scenario(scen)
    meas = synthesize(scen, cfg)
    if snr_db is not None:
        meas = add_awgn(meas, snr_db, seed=seed + 1000)
    result = adcg_solve(meas, cfg, scfg or SolverConfig(scene=SCENE))
    return scen, meas, result


def test_noiseless_roundtrip_recovers_mobile_and_scatters(cfg):
    scen, _, result = solved_scenario(cfg, seed=11)
    ms = extract_ms(result.candidate)
    assert ms.location.distance_to(scen.mobile) < 0.1
    truths = truth_scatters(scen)
    for atom in result.candidate.atoms:
        assert min(atom.scatter.distance_to(t) for t in truths) < 0.5


def test_noiseless_recovery_of_all_atom_locations(cfg):
    # both coordinates pairs of every surviving atom land on the truth
    scen, _, result = solved_scenario(cfg, seed=21)
    truths = truth_scatters(scen)
    assert result.candidate.num_atoms == len(truths)
    for atom in result.candidate.atoms:
        assert atom.mobile.distance_to(scen.mobile) < 0.5
        assert min(atom.scatter.distance_to(t) for t in truths) < 0.5


def test_zero_measurement_empty_candidate(cfg):
    zeros = MeasurementSet([np.zeros((cfg.num_antennas, cfg.num_subcarriers))] * cfg.num_bs)
    result = adcg_solve(zeros, cfg, SolverConfig(scene=SCENE))
    assert result.candidate.num_atoms == 0
    assert result.converged


def test_loss_history_non_increasing(cfg):
    for seed in (3, 4):
        _, _, result = solved_scenario(cfg, seed=seed, snr_db=0.0)
        hist = result.loss_history
        assert len(hist) >= 1
        for earlier, later in zip(hist, hist[1:]):
            assert later <= earlier * (1 + 1e-12) + 1e-30


def test_support_invariant_under_common_scaling(cfg):
    scen = canonicalise_scenario(generate_scenario("nlos", seed=7, cfg=cfg, min_separation_m=50.0))
    meas = synthesize(scen, cfg)
    base_cfg = SolverConfig(scene=SCENE, lambda1=2.0, lambda2=2.0, prune_threshold=0.2)
    r1 = adcg_solve(meas, cfg, base_cfg)
    alpha = 7.0
    scaled = MeasurementSet([alpha * y for y in meas.per_bs])
    scaled_cfg = SolverConfig(scene=SCENE, lambda1=2.0 * alpha, lambda2=2.0 * alpha,
                              prune_threshold=0.2 * alpha)
    r2 = adcg_solve(scaled, cfg, scaled_cfg)
    assert r1.candidate.num_atoms == r2.candidate.num_atoms
    p1 = sorted(tuple(np.round(a.as_array(), 1)) for a in r1.candidate.atoms)
    p2 = sorted(tuple(np.round(a.as_array(), 1)) for a in r2.candidate.atoms)
    for a, b in zip(p1, p2):
        assert np.allclose(a, b, atol=1.0)


def test_local_improve_never_increases_loss(cfg):
    rng = np.random.default_rng(0)
    scen = canonicalise_scenario(generate_scenario("nlos", seed=9, cfg=cfg, min_separation_m=50.0))
    meas = add_awgn(synthesize(scen, cfg), 5.0, seed=1)
    scfg = SolverConfig(scene=SCENE)
    atoms = [AtomParams(Location(rng.uniform(100, 900), rng.uniform(100, 900)),
                        Location(rng.uniform(100, 900), rng.uniform(100, 900)))
             for _ in range(3)]
    w = solve_weights(atoms, meas, cfg, scfg)
    cand = CandidateSolution(atoms, w.gamma)
    before = loss(cand, meas, cfg, scfg)
    after = loss(local_improve(cand, meas, cfg, scfg), meas, cfg, scfg)
    assert after <= before * (1 + 1e-12)


def test_local_improve_unchanged_at_ground_truth(cfg):
    scen = canonicalise_scenario(generate_scenario("nlos", seed=13, cfg=cfg, min_separation_m=50.0))
    meas = synthesize(scen, cfg)
    atoms, rows, seen = [], [], {}
    for j, paths in enumerate(scen.per_bs_paths):
        for p in paths:
            key = p.scatter.as_tuple()
            if key not in seen:
                seen[key] = len(atoms)
                atoms.append(AtomParams(scen.mobile, p.scatter))
                rows.append(np.zeros(cfg.num_bs, dtype=complex))
            rows[seen[key]][j] = p.gain
    scfg = SolverConfig(scene=SCENE, lambda1=0.0, lambda2=0.0)
    cand = CandidateSolution(atoms, np.stack(rows))
    out = local_improve(cand, meas, cfg, scfg)
    for a, b in zip(cand.atoms, out.atoms):
        assert a.mobile.distance_to(b.mobile) < 1e-3
        assert a.scatter.distance_to(b.scatter) < 1e-3


def test_local_improve_descends_from_5m_perturbation(cfg):
    rng = np.random.default_rng(1)
    scen = canonicalise_scenario(generate_scenario("los", seed=15, cfg=cfg))
    meas = synthesize(scen, cfg)
    truth = scen.mobile

    def pert(p):
        return Location(p.x + rng.uniform(-5, 5), p.y + rng.uniform(-5, 5))

    scfg = SolverConfig(scene=SCENE, lambda1=0.0, lambda2=0.0)
    atoms = [AtomParams(pert(truth), pert(truth))]
    w = solve_weights(atoms, meas, cfg, scfg)
    out = local_improve(CandidateSolution(atoms, w.gamma), meas, cfg, scfg)
    assert out.atoms[0].scatter.distance_to(truth) < 0.1
    assert out.atoms[0].mobile.distance_to(truth) < 0.1


def test_adcg_converged_flag_and_histories(cfg):
    _, _, result = solved_scenario(cfg, seed=17)
    assert result.converged
    assert len(result.loss_history) == len(result.residual_history) == result.n_iters
