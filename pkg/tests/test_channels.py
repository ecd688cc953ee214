import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efsim.channels import (
    ChannelError,
    KrausChannel,
    TwoUnitaryModel,
    apply_channel,
    channel_fidelity,
    commuting,
    compose,
    dominant_kraus_decomposition,
    identity_channel,
    kraus_from_superoperator,
    lift_to_system,
    make_standard_channel,
    overlap_angles,
    pseudo_vacuum_check,
    random_channel,
    random_mixed_unitary,
    unitary_channel,
    validate_cptp,
)
from efsim.linalg import (
    H,
    I2,
    KET0,
    KET1,
    KET_MINUS,
    KET_PLUS,
    X,
    Y,
    Z,
    DensityMatrix,
    QubitLayout,
    partial_trace,
    random_density,
    random_state,
    random_unitary,
)

STANDARD = [
    ("dephasing", {"p": 0.2}),
    ("bitflip", {"p": 0.3}),
    ("depolarizing", {"p": 0.1}),
    ("depolarizing", {"p": 0.05, "num_qubits": 2}),
    ("amplitude_damping", {"gamma": 0.4}),
    ("identity", {"num_qubits": 2}),
]


def test_dephasing_zero_is_identity():
    ch = make_standard_channel("dephasing", p=0.0)
    assert len(ch.ops) == 1
    assert np.allclose(ch.ops[0], I2)


def test_dephasing_kraus_form():
    ch = make_standard_channel("dephasing", p=0.1)
    assert np.allclose(ch.ops[0], np.sqrt(0.9) * I2)
    assert np.allclose(ch.ops[1], np.sqrt(0.1) * Z)
    assert validate_cptp(ch).passed


@pytest.mark.parametrize("p", [0.0, 0.03, 0.3])
def test_depolarizing_on_zero(p):
    ch = make_standard_channel("depolarizing", p=p)
    out = apply_channel(ch, DensityMatrix(np.outer(KET0, KET0)))
    # (1-p)|0><0| + p/3 (X|0><0|X + Y|0><0|Y + Z|0><0|Z) = (1 - 2p/3)|0><0| + 2p/3 |1><1|
    assert abs(out.expectation(KET0) - (1 - 2 * p / 3)) < 1e-14
    assert abs(channel_fidelity(ch, I2, KET0) - (1 - 2 * p / 3)) < 1e-14
    # with the replacement form (1-q) rho + q I/2 the fidelity is 1 - q/2; same channel at q = 4p/3
    q = 4 * p / 3
    assert abs(channel_fidelity(ch, I2, KET0) - (1 - q / 2)) < 1e-14


def test_cptp_reports():
    assert validate_cptp(identity_channel()).deviation == 0
    assert validate_cptp([np.sqrt(0.5) * I2, np.sqrt(0.5) * X]).deviation < 1e-15
    rep = validate_cptp([I2, X])
    assert abs(rep.deviation - 1.0) < 1e-14
    assert not rep.passed
    with pytest.raises(ChannelError):
        KrausChannel((I2, X))


def test_identity_channel_leaves_state():
    rho = random_density(1, np.random.default_rng(0))
    assert np.allclose(apply_channel(identity_channel(), rho).entries, rho.entries)


def test_full_dephasing_of_plus():
    ch = make_standard_channel("dephasing", p=1.0)
    rho = DensityMatrix(np.outer(KET_PLUS, KET_PLUS))
    # oracle 1/2 (rho + Z rho Z) at p = 1/2 is I/2; at p = 1 the state is Z|+> = |->
    assert np.allclose(apply_channel(ch, rho).entries, np.outer(KET_MINUS, KET_MINUS))
    half = make_standard_channel("dephasing", p=0.5)
    assert np.allclose(apply_channel(half, rho).entries, I2 / 2)


def test_depolarizing_preserves_trace_random():
    rng = np.random.default_rng(5)
    ch = make_standard_channel("depolarizing", p=0.2, num_qubits=2)
    for _ in range(5):
        rho = random_density(2, rng)
        direct = sum(k @ rho.entries @ k.conj().T for k in ch.ops)
        out = apply_channel(ch, rho)
        assert abs(out.trace() - 1) < 1e-12
        assert np.allclose(out.entries, direct)


def test_channel_fidelity_examples():
    rng = np.random.default_rng(9)
    psi = random_state(2, rng).amplitudes
    assert abs(channel_fidelity(identity_channel(), I2, psi) - 1) < 1e-14
    for p in (0.01, 0.2):
        deph = make_standard_channel("dephasing", p=p)
        assert abs(channel_fidelity(deph, I2, KET_PLUS) - (1 - p)) < 1e-14


def test_dominant_decomposition_examples():
    u = random_unitary(2, np.random.default_rng(1))
    assert dominant_kraus_decomposition(unitary_channel(u), u).epsilon < 1e-12
    p = 0.07
    v = random_unitary(2, np.random.default_rng(2))
    ch = TwoUnitaryModel(p, u, v).to_channel()
    dec = dominant_kraus_decomposition(ch, u)
    assert dec.index == 0
    assert abs(dec.epsilon - (1 - np.sqrt(1 - p))) < 1e-12
    deph = dominant_kraus_decomposition(make_standard_channel("dephasing", p=0.01), I2)
    assert deph.index == 0
    assert abs(deph.epsilon - 0.005012562893380035) < 1e-12


def test_lift_identity_and_commutation():
    lay = QubitLayout.build(control=1, memory=1, active=1)
    lifted = lift_to_system(identity_channel(), lay, "active")
    assert np.allclose(lifted.ops[0], np.eye(8))
    deph = lift_to_system(make_standard_channel("dephasing", p=0.3), lay, "active")
    u_ctrl = np.kron(random_unitary(2, np.random.default_rng(4)), np.eye(4))
    for k in deph.ops:
        assert np.abs(k @ u_ctrl - u_ctrl @ k).max() <= 1e-12


def test_lifted_fidelity_matches_unlifted():
    rng = np.random.default_rng(6)
    ch = random_channel(2, rng, 0.7)
    lay = QubitLayout.build(control=1, active=1)
    lifted = lift_to_system(ch, lay, "active")
    psi = random_state(2, rng).amplitudes
    rho = DensityMatrix(np.kron(np.outer(KET0, KET0), np.outer(psi, psi.conj())), lay)
    out = apply_channel(lifted, rho)
    red = partial_trace(out, ["active"])
    assert abs(red.expectation(psi) - channel_fidelity(ch, I2, psi)) < 1e-12


def test_pseudo_vacuum_examples():
    p = 0.2
    deph = make_standard_channel("dephasing", p=p)
    cert = pseudo_vacuum_check(deph, KET0)
    assert cert.valid
    assert np.allclose(cert.probs, (1 - p, p))
    assert not pseudo_vacuum_check(make_standard_channel("bitflip", p=p), KET0).valid
    bad = pseudo_vacuum_check(deph, KET_PLUS)
    assert not bad.valid
    # normalized residual of Z|+> against any multiple of |+> is 1
    assert abs(bad.residuals[1] / np.sqrt(bad.probs[1]) - 1) < 1e-12


def test_pseudo_vacuum_keeps_phase():
    ch = TwoUnitaryModel(0.1, I2, np.diag([1j, 1.0])).to_channel()
    cert = pseudo_vacuum_check(ch, KET0)
    assert cert.valid
    assert abs(cert.phases[1] - np.pi / 2) < 1e-12


def test_serialization_roundtrip():
    for kind, params in STANDARD:
        ch = make_standard_channel(kind, **params)
        back = KrausChannel.loads(ch.dumps())
        assert all(np.allclose(a, b) for a, b in zip(ch.ops, back.ops))
    ch = random_channel(2, np.random.default_rng(3), 0.4)
    back = KrausChannel.loads(ch.dumps())
    assert all(np.allclose(a, b) for a, b in zip(ch.ops, back.ops))


def test_superoperator_roundtrip():
    ch = random_channel(4, np.random.default_rng(8), 0.9, env_dim=3)
    back = kraus_from_superoperator(ch.superoperator())
    assert np.allclose(back.superoperator(), ch.superoperator(), atol=1e-12)
    assert len(back.ops) <= 3


def test_compose_order():
    a = unitary_channel(H)
    b = unitary_channel(X)
    c = compose(a, b)
    assert np.allclose(c.ops[0], X @ H)


def test_overlap_angles():
    th, nu = overlap_angles(KET0, KET1)
    assert abs(th - np.pi / 2) < 1e-15 and nu == 0.0
    th, nu = overlap_angles(KET_PLUS, np.diag([1, np.exp(0.6j)]) @ KET_PLUS)
    assert abs(th - 0.3) < 1e-12 and abs(nu - 0.3) < 1e-12


def test_commuting():
    assert commuting(make_standard_channel("bitflip", p=0.1))
    assert not commuting(make_standard_channel("depolarizing", p=0.1))


@pytest.mark.parametrize("kind,params", STANDARD)
def test_standard_channels_are_cptp(kind, params):
    assert validate_cptp(make_standard_channel(kind, **params), 1e-10).passed


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.0, 3.0))
def test_random_channels_cptp(seed, s):
    rng = np.random.default_rng(seed)
    assert validate_cptp(random_channel(2, rng, s), 1e-10).passed
    assert validate_cptp(random_mixed_unitary(4, rng, min(s / 3, 1.0), 2), 1e-10).passed


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.0, 2.0))
def test_fidelity_matches_apply(seed, s):
    rng = np.random.default_rng(seed)
    ch = random_channel(2, rng, s)
    u = random_unitary(2, rng)
    psi = random_state(2, rng).amplitudes
    out = apply_channel(ch, DensityMatrix(np.outer(psi, psi.conj())))
    assert abs(out.expectation(u @ psi) - channel_fidelity(ch, u, psi)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.0, 2.0))
def test_decomposition_reconstructs(seed, s):
    rng = np.random.default_rng(seed)
    u = random_unitary(2, rng)
    ch = random_channel(2, rng, s, ideal=u)
    dec = dominant_kraus_decomposition(ch, u)
    assert np.allclose(dec.reconstruct(), ch.ops[dec.index], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_unitary_channel_fidelity_is_overlap(seed):
    rng = np.random.default_rng(seed)
    u, v = random_unitary(2, rng), random_unitary(2, rng)
    psi = random_state(2, rng).amplitudes
    expected = abs(np.vdot(psi, u.conj().T @ v @ psi)) ** 2
    assert abs(channel_fidelity(unitary_channel(v), u, psi) - expected) < 1e-12
