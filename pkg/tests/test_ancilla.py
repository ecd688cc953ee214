import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efsim.ancilla import (
    AncillaNoiseParams,
    control_location_count,
    ef_advantage,
    fault_locations,
    fit_power_law,
    full_fault_simulation,
    hierarchy_ratio_bound,
    infidelity_model,
    optimal_T,
    perturbative_expansion,
    phase_flip_penalty,
    single_control_model,
    single_control_threshold,
)
from efsim.channels import identity_channel, make_standard_channel, unitary_channel
from efsim.engine import EfConfig, build_ef_circuit, run_exact
from efsim.linalg import I2, KET0, KET_PLUS, random_state, random_unitary


def _cfg(ch, log_T=1, **kw):
    return EfConfig(log_T, KET_PLUS, KET0, I2, ch, **kw)


def _gap_count(cfg):
    # oracle: a flip matters only between the first and last controlled SWAP, and
    # every interval between consecutive controlled SWAPs is a distinct location
    names = [g.name for g in build_ef_circuit(cfg)]
    swaps = [i for i, n in enumerate(names) if n == "MCSWAP"]
    return (len(swaps) - 1) * cfg.log_T


def test_three_locations_for_T2():
    locs = fault_locations(_cfg(identity_channel()), include_memory=False)
    assert [f.label for f in locs] == ["control[0]:mid(0)", "control[0]:post(0)", "control[0]:mid(1)"]


def test_flag_doubles_locations():
    cfg = _cfg(identity_channel(), flag_qubits=True)
    locs = fault_locations(cfg, include_memory=False)
    assert len(locs) == 6
    assert sum(f.segment == "flag" for f in locs) == 3


@pytest.mark.parametrize("log_T", [1, 2, 3])
def test_location_count_matches_gate_walk(log_T):
    cfg = _cfg(identity_channel(), log_T=log_T)
    n = len(fault_locations(cfg, include_memory=False))
    assert n == _gap_count(cfg) == control_location_count(2**log_T)
    assert len(fault_locations(cfg)) == n + 2**log_T * cfg.memory_qubits


def test_zero_eps_reproduces_no_fault():
    ch = make_standard_channel("dephasing", p=0.05)
    cfg = _cfg(ch, log_T=2)
    rep = perturbative_expansion(cfg, AncillaNoiseParams(eps_prime=0.0), ("X", "Z"))
    base = run_exact(cfg)
    assert abs(rep.infidelity_first_order - base.infidelity) < 1e-14
    assert abs(rep.fail_prob_first_order - base.fail_prob) < 1e-14


@pytest.mark.parametrize("pauli", ["X", "Z"])
def test_first_order_close_to_full(pauli):
    eps = 1e-3
    ch = make_standard_channel("dephasing", p=0.01)
    cfg = _cfg(ch)
    rep = perturbative_expansion(cfg, AncillaNoiseParams(eps_prime=eps), (pauli,))
    full = full_fault_simulation(cfg, eps, (pauli,))
    assert abs(rep.infidelity_first_order - full.infidelity) <= 1e-5
    assert abs(rep.fail_prob_first_order - full.fail_prob) <= 50 * eps**2
    assert abs(rep.infidelity_first_order - full.infidelity) <= 50 * eps**2


def test_z_faults_first_order():
    eps = 1e-3
    ch = make_standard_channel("dephasing", p=1e-3)
    cfg = _cfg(ch, log_T=2)
    rep = perturbative_expansion(cfg, AncillaNoiseParams(eps_prime=eps), ("Z",))
    assert abs(rep.infidelity_first_order - rep.base_infidelity) <= 50 * eps**2
    assert rep.fail_prob_first_order > rep.base_fail_prob


def test_linear_form_and_csv():
    ch = make_standard_channel("depolarizing", p=0.02)
    rep = perturbative_expansion(_cfg(ch), AncillaNoiseParams(eps_prime=1e-3), ("X",))
    # both forms agree to first order
    assert abs(rep.infidelity_linear - rep.infidelity_first_order) < 1e-5
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "location_id,pauli,delta_F,delta_P"
    assert len(lines) == 1 + rep.n_locations
    inf, fail = rep.at(0.0)
    assert abs(inf - rep.base_infidelity) < 1e-14


def test_large_weight_warns():
    with pytest.warns(RuntimeWarning):
        perturbative_expansion(_cfg(identity_channel(), log_T=2), AncillaNoiseParams(eps_prime=0.05), ("X",))


def test_infidelity_model_examples():
    assert infidelity_model(0.99, 4, AncillaNoiseParams()) == pytest.approx(0.01 / 4)
    noise = AncillaNoiseParams(eps_bf=1e-4)
    assert infidelity_model(0.99, 2, noise) == pytest.approx(0.0052, abs=1e-15)
    assert infidelity_model(0.99, 1, noise) == pytest.approx(0.01)


def test_hierarchy_bound_examples():
    assert hierarchy_ratio_bound(2) == 0.25
    assert hierarchy_ratio_bound(4) == 3 / 32
    T = 2**12
    assert hierarchy_ratio_bound(T) * T * 12 == pytest.approx(1, rel=1e-3)


def test_hierarchy_bound_is_break_even():
    F0 = 0.98
    for T in (2, 4, 8, 16):
        r = hierarchy_ratio_bound(T)
        at = AncillaNoiseParams(eps_bf=r * (1 - F0))
        assert infidelity_model(F0, T, at) == pytest.approx(1 - F0, rel=1e-12)


def test_optimal_T_examples():
    assert optimal_T(0.99, AncillaNoiseParams(), 64)[0] == 64
    assert optimal_T(0.99, AncillaNoiseParams(eps_bf=0.5), 64)[0] == 1
    F0, noise = 0.9, AncillaNoiseParams(eps_bf=1e-3)
    best, curve = optimal_T(F0, noise, 64)
    # exhaustive scan oracle of the same formula
    scan = {T: (1 - F0) / T + 1e-3 * T * math.log2(T) if T > 1 else 1 - F0 for T in (1, 2, 4, 8, 16, 32, 64)}
    assert best == min(scan, key=scan.get)
    assert 1 < best < 64
    adv = ef_advantage(curve)
    assert adv[best] and not adv[2 * best]


def test_phase_flip_penalty():
    assert phase_flip_penalty(4, AncillaNoiseParams()) == 0
    assert phase_flip_penalty(2, AncillaNoiseParams(eps_pf=1e-3)) == pytest.approx(2e-3)


@pytest.mark.parametrize("log_T", [1, 2])
def test_phase_flip_loss_per_location(log_T):
    # with a noiseless apparatus every Z fault is rejected, so the first-order
    # failure is eps' times the number of control locations
    eps = 1e-3
    cfg = _cfg(identity_channel(), log_T=log_T)
    rep = perturbative_expansion(cfg, AncillaNoiseParams(eps_pf=eps), ("Z",))
    T = 2**log_T
    assert rep.fail_prob_first_order == pytest.approx(eps * control_location_count(T), abs=1e-14)
    # the T log T model counts one location per call and is smaller by (2T-1)/T
    ratio = rep.fail_prob_first_order / phase_flip_penalty(T, AncillaNoiseParams(eps_pf=eps))
    assert ratio == pytest.approx((2 * T - 1) / T)


def test_single_control_threshold():
    assert single_control_threshold(0.99, 3) == pytest.approx(0.01 / 6)
    assert single_control_threshold(1.0, 3) == 0
    assert single_control_threshold(0.98, 3) == pytest.approx(2 * single_control_threshold(0.99, 3))
    thr = single_control_threshold(0.99, 3)
    assert single_control_model(0.99, 3, thr) == pytest.approx(0.01, rel=1e-2)


def test_flag_suppression_is_quadratic():
    rng = np.random.default_rng(3)
    u = random_unitary(2, rng)
    psi = random_state(2, rng).amplitudes
    eps = np.geomspace(1e-3, 1e-2, 5)
    for flags, want in ((True, 2.0), (False, 1.0)):
        cfg = EfConfig(1, psi, KET0, u, unitary_channel(u), flag_qubits=flags)
        inf = [full_fault_simulation(cfg, e, ("X",)).infidelity for e in eps]
        assert abs(fit_power_law(eps, inf)[0] - want) <= 0.3


def test_noise_params_validation():
    with pytest.raises(ValueError):
        AncillaNoiseParams(eps_bf=1.5)
    with pytest.raises(ValueError):
        AncillaNoiseParams(tau_U=0)
    n = AncillaNoiseParams(eps_bf=1e-3, eps_pf=2e-3, tau_U=5)
    assert n.per_location("X") == pytest.approx(5e-3)
    assert n.per_location("Z") == pytest.approx(1e-2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 0.999), st.floats(1e-6, 1e-2))
def test_model_shape(F0, eps_bf):
    Ts = [1, 2, 4, 8, 16, 32, 64, 128, 256]
    clean = [infidelity_model(F0, T, AncillaNoiseParams()) for T in Ts]
    assert all(b < a for a, b in zip(clean, clean[1:]))
    noisy = [infidelity_model(F0, T, AncillaNoiseParams(eps_bf=eps_bf)) for T in Ts]
    big = infidelity_model(F0, 2**20, AncillaNoiseParams(eps_bf=eps_bf))
    assert big > min(noisy)
