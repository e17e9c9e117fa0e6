import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdfsim.algebra import dagger, orthonormality_error
from tdfsim.errors import (
    ConditionsViolated,
    DerivativeUnavailable,
    DimensionChangeCrossed,
    EigenconditionViolated,
)
from tdfsim.lindblad import IntegratorConfig, JumpChannel, LindbladModel, evaluate, integrate, pure_state
from tdfsim.models import (
    SqueezedChannelSpec,
    _stacked_constraint,
    five_level_model,
    squeezed_channel,
    xi_ladder,
    xi_model,
)
from tdfsim.tdfs import (
    SubspaceTrajectory,
    check_eigencondition,
    check_invariance,
    effective_hamiltonian,
    frame_propagate,
    frame_unitary,
    gauge_operator,
    kernel_segment,
    static_subspace,
    synthesize_control,
    verify_tdfs,
)

TWO_PI = 2 * math.pi


@pytest.fixture(scope="module")
def xi_synth():
    return xi_model(1.0, 1.0, 1.0, "synthesized")


@pytest.fixture(scope="module")
def xi_free():
    return xi_model(1.0, 1.0, 1.0, "none")


@pytest.fixture(scope="module")
def five_step():
    return five_level_model(transition="step", mode="synthesized")


def _frame_columns(sub, t):
    seg = sub.segment(t)
    return np.hstack([evaluate(seg.basis, [t])[0], evaluate(seg.complement, [t])[0]])


def _rotated_dark_basis(bundle, angle, t=0.0):
    seg = bundle.subspace.segment(t)
    dark = evaluate(seg.basis, [t])[0][:, 0]
    perp = evaluate(seg.complement, [t])[0]
    v = math.cos(angle) * dark + math.sin(angle) * perp[:, 0]
    w = -math.sin(angle) * dark + math.cos(angle) * perp[:, 0]
    return v, np.column_stack([w, perp[:, 1]]), perp[:, 0]


# --- subspace trajectories ----------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.3, 1.7, 5.9])
def test_frames_are_orthonormal(xi_synth, five_step, t):
    for b in (xi_synth, five_step):
        assert orthonormality_error(_frame_columns(b.subspace, t)) <= 1e-12


def test_five_level_dimension_schedule(five_step):
    sub = five_step.subspace
    assert sub.breakpoints == (math.pi,)
    assert sub.dimension_at(1.0) == 1 and sub.dimension_at(math.pi) == 1 and sub.dimension_at(4.0) == 2


def test_frame_basis_is_periodic(xi_synth):
    t = np.array([0.2, 1.1, 3.0])
    a = evaluate(xi_synth.subspace.segments[0].basis, t)
    b = evaluate(xi_synth.subspace.segments[0].basis, t + TWO_PI)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_analytic_basis_derivative_matches_central_difference(xi_synth, five_step):
    for sub, t in ((xi_synth.subspace, 0.9), (five_step.subspace, 4.2)):
        seg = sub.segment(t)
        h = 1e-5
        fd = (evaluate(seg.basis, [t + h])[0] - evaluate(seg.basis, [t - h])[0]) / (2 * h)
        np.testing.assert_allclose(evaluate(seg.basis_derivative, [t])[0], fd, atol=1e-8)
        fd = (evaluate(seg.complement, [t + h])[0] - evaluate(seg.complement, [t - h])[0]) / (2 * h)
        np.testing.assert_allclose(evaluate(seg.complement_derivative, [t])[0], fd, atol=1e-8)


# --- frame_unitary --------------------------------------------------------------


def test_frame_unitary_identity_cases(xi_synth):
    np.testing.assert_allclose(frame_unitary(xi_synth.subspace, 0.0), np.eye(3), atol=1e-15)
    static = static_subspace([1, 0, 0])
    np.testing.assert_allclose(frame_unitary(static, 12.3), np.eye(3), atol=1e-15)


def test_frame_unitary_direct_assembly(xi_synth):
    t = math.pi / 2
    e0, et = _frame_columns(xi_synth.subspace, 0.0), _frame_columns(xi_synth.subspace, t)
    direct = sum(np.outer(e0[:, k], et[:, k].conj()) for k in range(3))
    u = frame_unitary(xi_synth.subspace, t)
    np.testing.assert_allclose(u, direct, atol=1e-15)
    assert np.max(np.abs(u.conj().T @ u - np.eye(3))) <= 1e-12


def test_frame_unitary_refuses_dimension_change(five_step):
    with pytest.raises(DimensionChangeCrossed):
        frame_unitary(five_step.subspace, 4.0, anchor=0.0)
    u = frame_unitary(five_step.subspace, 4.0, anchor=3.5)
    assert np.max(np.abs(u.conj().T @ u - np.eye(5))) <= 1e-12


# --- gauge_operator -------------------------------------------------------------


def test_gauge_static_is_zero():
    g = gauge_operator(static_subspace([0, 1, 0]), np.linspace(0, 5, 4))
    np.testing.assert_array_equal(g, np.zeros((4, 3, 3)))


def test_gauge_hermitian_in_fd_mode(xi_synth, five_step):
    for sub, t in ((xi_synth.subspace, 0.4), (five_step.subspace, 2.0), (five_step.subspace, 5.0)):
        g = gauge_operator(sub.with_finite_differences(1e-5), t)
        assert np.max(np.abs(g - g.conj().T)) <= 1e-8


def test_gauge_fd_converges_second_order(xi_synth):
    exact = gauge_operator(xi_synth.subspace, 2.2)
    errs = [np.max(np.abs(gauge_operator(xi_synth.subspace.with_finite_differences(h), 2.2) - exact)) for h in (4e-3, 2e-3, 1e-3)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 <= r <= 4.5 for r in ratios)


def test_gauge_fd_refuses_segment_edges(five_step):
    sub = five_step.subspace.with_finite_differences(1e-5)
    with pytest.raises(DerivativeUnavailable):
        gauge_operator(sub, math.pi - 1e-7)
    with pytest.raises(DerivativeUnavailable):
        gauge_operator(sub, math.pi + 1e-7)


def test_gauge_without_derivative_source():
    constraint, _ = _stacked_constraint(xi_model(1.0, 1.0).model.channels)
    seg = kernel_segment(constraint, None, 3, 0.0)
    sub = SubspaceTrajectory(3, (seg,))
    with pytest.raises(DerivativeUnavailable):
        gauge_operator(sub, 1.0)
    g = gauge_operator(sub.with_finite_differences(1e-5), 1.0)
    np.testing.assert_allclose(g, gauge_operator(xi_model(1.0, 1.0).subspace, 1.0), atol=1e-8)


# --- effective_hamiltonian ------------------------------------------------------


def test_effective_hamiltonian_static_no_channels():
    h = np.array([[1, 2j, 0], [-2j, 0, 1], [0, 1, -1]], dtype=complex)
    model = LindbladModel(3, lambda t: h)
    out = effective_hamiltonian(model, static_subspace([1, 0, 0]), 0.7, c=np.zeros(0))
    np.testing.assert_array_equal(out, h)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.05, 5.0), st.floats(0, 30), st.sampled_from(["none", "paper", "synthesized"]))
def test_effective_hamiltonian_hermitian(r, w, t, mode):
    b = xi_model(r, w, 1.0, mode)
    h = effective_hamiltonian(b.model, b.subspace, t)
    assert np.max(np.abs(h - h.conj().T)) <= 1e-8
    u = frame_unitary(b.subspace, t)
    assert np.max(np.abs(u.conj().T @ u - np.eye(3))) <= 1e-10


def test_effective_hamiltonian_synthesized_blocks(xi_synth):
    h = effective_hamiltonian(xi_synth.model, xi_synth.subspace, 1.0)
    seg = xi_synth.subspace.segment(1.0)
    phi, comp = evaluate(seg.basis, [1.0])[0], evaluate(seg.complement, [1.0])[0]
    assert np.max(np.abs(comp.conj().T @ h @ phi)) <= 1e-12


# --- check_eigencondition -------------------------------------------------------


def test_eigencondition_xi_dark_state(xi_synth):
    res = check_eigencondition(xi_synth.model, xi_synth.subspace, 0.0)
    assert np.max(np.abs(res.eigenvalues)) <= 1e-12 and res.residual <= 1e-12


def test_eigencondition_five_level_pair(five_step):
    res = check_eigencondition(five_step.model, five_step.subspace, np.array([1.0, 4.0, 5.5]))
    assert np.max(np.abs(res.eigenvalues)) <= 1e-12
    assert np.max(res.spread) <= 1e-12 and np.max(res.residual) <= 1e-12


def test_eigencondition_rotated_basis(xi_free):
    v, comp, perp = _rotated_dark_basis(xi_free, 0.1)
    sub = static_subspace(v, comp)
    res = check_eigencondition(xi_free.model, sub, 0.0)
    f = xi_free.model.jumps([0.0])[0, 0]
    c = np.vdot(v, f @ v)
    assert res.eigenvalues[0] == pytest.approx(c, abs=1e-15)
    assert res.residual == pytest.approx(np.linalg.norm(f @ v - c * v), rel=1e-12)
    # first-order estimate sin(0.1) ||F perp||
    assert res.residual == pytest.approx(math.sin(0.1) * np.linalg.norm(f @ perp), rel=0.05)
    assert res.residual > 1e-9


# --- check_invariance -----------------------------------------------------------


@pytest.mark.parametrize("r", [0.5, 1.0, 1.5])
def test_invariance_uncompensated_gauge(r):
    b = xi_model(r, 1.0, 1.0, "none")
    res = check_invariance(b.model, b.subspace, np.linspace(0.1, 6.0, 7))
    # the dark state rotates at rate omega0 * sinh r cosh r / cosh 2r
    np.testing.assert_allclose(res, 0.5 * math.tanh(2 * r), rtol=1e-9)


def test_invariance_static_phase():
    ch = squeezed_channel(SqueezedChannelSpec(xi_ladder(), 1.0, 0.0, 1.0))
    constraint, dconstraint = _stacked_constraint([ch])
    sub = SubspaceTrajectory(3, (kernel_segment(constraint, dconstraint, 3, 0.0),))
    model = LindbladModel(3, lambda t: np.zeros((3, 3)), [ch])
    assert np.max(check_invariance(model, sub, np.linspace(0, 10, 5))) <= 1e-12


# --- synthesize_control ---------------------------------------------------------


def test_synthesize_static_is_zero():
    f = np.diag([0.0, 1.0, 2.0]).astype(complex)
    channels = [JumpChannel(lambda t: f, 1.0)]
    h = synthesize_control(channels, static_subspace([1, 0, 0]), np.array([0.0, 2.0]))
    np.testing.assert_array_equal(h, np.zeros((2, 3, 3)))


def test_synthesize_xi_invariance_100_times(xi_synth, rng):
    times = rng.uniform(0, 4 * math.pi, 100)
    h = synthesize_control(xi_synth.model.channels, xi_synth.subspace, times)
    assert np.max(np.abs(h - dagger(h))) <= 1e-14
    assert np.max(check_invariance(xi_synth.model, xi_synth.subspace, times)) <= 1e-12


def test_synthesize_intra_block_readout(five_step):
    t = np.array([3.5, 4.5, 6.0])
    h = evaluate(five_step.model.hamiltonian, t)
    kets = evaluate(five_step.dark_kets, t)
    np.testing.assert_allclose(np.einsum("tn,tnm,tm->t", kets[..., 0].conj(), h, kets[..., 1]), 1.0, atol=1e-12)
    assert np.max(check_invariance(five_step.model, five_step.subspace, t)) <= 1e-12
    # before the step the intra-subspace block vanishes
    early = np.array([0.5, 2.0, 3.0])
    h = evaluate(five_step.model.hamiltonian, early)
    kets = evaluate(five_step.dark_kets, early)
    np.testing.assert_allclose(np.einsum("tn,tnm,tm->t", kets[..., 0].conj(), h, kets[..., 1]), 0.0, atol=1e-12)


def test_synthesize_with_explicit_intra_block(five_step):
    sub = five_step.subspace
    block = np.array([[0.3, 0.1j], [-0.1j, -0.2]])
    h = synthesize_control(five_step.model.channels, sub, 4.0, intra_block=block)
    phi = evaluate(sub.segment(4.0).basis, [4.0])[0]
    np.testing.assert_allclose(phi.conj().T @ h @ phi, block, atol=1e-12)


def test_synthesize_rejects_non_eigenbasis(xi_free):
    v, comp, _ = _rotated_dark_basis(xi_free, 0.1)
    with pytest.raises(EigenconditionViolated):
        synthesize_control(xi_free.model.channels, static_subspace(v, comp), 0.0)


# --- frame_propagate ------------------------------------------------------------


def test_frame_propagate_keeps_purity(xi_synth):
    cfg = IntegratorConfig(dt=1e-3, record_every=50)
    traj = frame_propagate(xi_synth.model, xi_synth.subspace, xi_synth.initial_state(), 0.0, TWO_PI, cfg)
    assert np.max(np.abs(traj.observables["purity"] - 1)) <= 1e-12
    # the state follows the dark state
    np.testing.assert_allclose(traj.populations(xi_synth.dark_kets), 1.0, atol=1e-9)


def test_frame_propagate_five_level_step(five_step):
    cfg = IntegratorConfig(dt=1e-3, record_every=20)
    traj = frame_propagate(five_step.model, five_step.subspace, five_step.initial_state(), 0.0, TWO_PI, cfg)
    kets = evaluate(five_step.dark_kets, traj.times)
    p2 = np.einsum("tn,tnm,tm->t", kets[..., 1].conj(), traj.states, kets[..., 1]).real
    p1 = np.einsum("tn,tnm,tm->t", kets[..., 0].conj(), traj.states, kets[..., 0]).real
    assert np.max(np.abs(p2[traj.times <= math.pi])) <= 1e-8
    assert np.max(np.abs(p1 + p2 - 1)) <= 1e-9
    assert np.max(p2) > 0.5  # the transition does move population after the step


def test_frame_propagate_matches_cadence_of_integrate(xi_synth):
    cfg = IntegratorConfig(dt=0.01, record_every=7)
    a = integrate(xi_synth.model, xi_synth.initial_state(), 0.0, 1.234, cfg)
    b = frame_propagate(xi_synth.model, xi_synth.subspace, xi_synth.initial_state(), 0.0, 1.234, cfg)
    np.testing.assert_array_equal(a.times, b.times)


def test_frame_propagate_rejects_violations(xi_free, xi_synth):
    cfg = IntegratorConfig(dt=1e-2)
    with pytest.raises(ConditionsViolated):
        frame_propagate(xi_free.model, xi_free.subspace, xi_free.initial_state(), 0.0, 1.0, cfg)
    with pytest.raises(ConditionsViolated):
        frame_propagate(xi_synth.model, xi_synth.subspace, pure_state([0, 1, 0]), 0.0, 1.0, cfg)


# --- verify_tdfs / DfsReport ----------------------------------------------------


def test_verify_synthesized_xi(xi_synth):
    grid = (np.arange(200) + 0.5) * (4 * math.pi / 200)
    report = verify_tdfs(xi_synth.model, xi_synth.subspace, grid, 1e-9)
    assert report.verdict and report.eigencondition_ok and report.invariance_ok
    assert max(report.gauge_hermiticity) <= 1e-12


def test_verify_slow_xi_example():
    b = xi_model(1.0, 0.1, 1.0, "synthesized")
    grid = np.linspace(0.01, 4 * math.pi / 0.1, 200)
    assert verify_tdfs(b.model, b.subspace, grid, 1e-9).verdict


def test_verify_uncontrolled_fast_xi():
    b = xi_model(1.0, 10.0, 1.0, "none")
    report = verify_tdfs(b.model, b.subspace, np.linspace(0.01, 1.0, 50), 1e-9)
    assert report.eigencondition_ok and not report.invariance_ok and not report.verdict


def test_verify_five_level_always_on_early():
    b = five_level_model(transition="always", mode="synthesized")
    report = verify_tdfs(b.model, b.subspace, np.linspace(0.05, math.pi / 2 - 0.05, 40), 1e-9)
    assert report.eigencondition_ok and not report.invariance_ok
    # the leak out of the subspace is exactly the uncompensated DF1-DF2 coupling of strength Omega
    t = 0.7
    h = effective_hamiltonian(b.model, b.subspace, t)
    seg = b.subspace.segment(t)
    phi, comp = evaluate(seg.basis, [t])[0], evaluate(seg.complement, [t])[0]
    assert np.linalg.norm(comp.conj().T @ h @ phi) == pytest.approx(1.0, abs=1e-9)


def test_verify_per_segment_verdicts(five_step):
    grid = np.linspace(0.1, 6.0, 60)
    report = verify_tdfs(five_step.model, five_step.subspace, grid, 1e-9)
    assert [s["dimension"] for s in report.segments] == [1, 2]
    assert all(s["verdict"] for s in report.segments)
    assert sum(s["samples"] for s in report.segments) == grid.size


def test_report_json_round_trip(xi_synth):
    report = verify_tdfs(xi_synth.model, xi_synth.subspace, np.linspace(0.1, 1.0, 5))
    data = json.loads(report.to_json())
    for key in (
        "times",
        "eigenvalues",
        "eigen_residual",
        "eigen_spread",
        "invariance_residual",
        "gauge_hermiticity",
        "tol",
        "eigencondition_ok",
        "invariance_ok",
        "verdict",
    ):
        assert key in data
    assert len(data["eigenvalues"]) == 5 and len(data["eigenvalues"][0][0]) == 2
    assert all(x >= 0 for x in data["eigen_residual"] + data["invariance_residual"])
    assert report.summary()["verdict"] is True
