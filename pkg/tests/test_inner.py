import math

import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from beamwkb import inner, outer
from beamwkb.inner import T_MAT, T_POWERS
from beamwkb.model import CoefficientSet


@pytest.fixture(scope="module")
def uphase(uniform_artifact):
    return uniform_artifact.phase


@pytest.fixture(scope="module")
def vphase(variable_artifact):
    return variable_artifact.phase


class PolyVec:
    """Stand-in coefficient with exact polynomial components (tests only)."""

    def __init__(self, phase, polys):
        self.phase = phase
        self.polys = [np.atleast_1d(np.asarray(p, float)) for p in polys]

    def f_values(self, r=0):
        out = []
        for p in self.polys:
            d = P.polyder(p, r) if r > 0 and p.size > r else \
                (p if r == 0 else np.zeros(1))
            out.append(P.polyval(self.phase.nodes, d))
        return np.stack(out)


# ---------------------------------------------------------------------------
# structure matrices and fundamental matrix
# ---------------------------------------------------------------------------

def test_t_matrix_identities():
    assert np.array_equal(T_MAT.T, T_POWERS[3])
    assert np.array_equal(T_POWERS[3] @ T_MAT, np.eye(4))
    assert np.array_equal(T_MAT @ T_MAT @ T_MAT @ T_MAT, np.eye(4))


def test_eikonal_residual(uphase, vphase):
    assert uphase.eikonal_residual() < 1e-12
    assert vphase.eikonal_residual() < 1e-12


def test_phase_closed_forms(uniform_artifact, beam_root):
    ph = uniform_artifact.phase
    lam0, lam1 = ph.lam0, ph.lam1
    assert ph.S1 == pytest.approx(2.0 * lam0 ** 0.25, rel=1e-12)
    assert ph.S1 == pytest.approx(2.0 * beam_root, rel=1e-8)
    assert ph.alpha1 == pytest.approx(lam1 / (2.0 * lam0 ** 0.75), rel=1e-12)
    eta, theta = ph.A_entries(ph.nodes)
    assert np.max(np.abs(eta)) == 0.0
    assert np.allclose(theta, lam1 / (4.0 * lam0 ** 0.75), rtol=1e-13)


def test_fundamental_matrix_ode(vphase):
    n = vphase.nodes.size
    D = inner.cheb_diff_matrix(n)
    Phi = vphase.phi_matrices()
    dPhi = np.einsum("ij,jkl->ikl", D, Phi)
    A = vphase.A_matrices(vphase.nodes)
    res = dPhi - np.einsum("nij,njk->nik", A, Phi)
    assert np.max(np.abs(res)) < 1e-10


def test_det_phi_closed_form(vphase):
    det = np.linalg.det(vphase.phi_matrices())
    qv = vphase.coeffs.q_at(vphase.nodes)
    expect = qv ** -1.5 * np.exp(-vphase.alpha1)
    np.testing.assert_allclose(det, expect, rtol=1e-12)


def test_phi_transpose_trace_identity(vphase):
    # Phi^t(xi) N(xi, S/eps) = q^-3/8 N(xi, gamma_eps) at every node
    Phi = vphase.phi_matrices()
    qv = vphase.coeffs.q_at(vphase.nodes)
    for eps in (0.2, 0.07):
        N = vphase.N_of_S(eps)
        lhs = np.einsum("nij,jn->in", np.transpose(Phi, (0, 2, 1)), N)
        gam = vphase.gamma_values(eps)
        g1 = vphase.gamma1(eps)
        rhs = qv ** -0.375 * np.stack([np.cos(gam), np.sin(gam),
                                       np.exp(-gam), np.exp(gam - g1)])
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_t_phi_commutes(vphase):
    Phi = vphase.phi_matrices()
    lhs = np.einsum("ij,njk->nik", T_MAT, np.transpose(Phi, (0, 2, 1)))
    rhs = np.einsum("nij,jk->nik", np.transpose(Phi, (0, 2, 1)), T_MAT)
    assert np.max(np.abs(lhs - rhs)) < 1e-14


# ---------------------------------------------------------------------------
# boundary system and quantization
# ---------------------------------------------------------------------------

def test_det_g_closed_form_random():
    rng = np.random.default_rng(0)
    gs = rng.uniform(1.0, 50.0, 100)
    dets = np.array([np.linalg.det(inner.g_matrix(g)) for g in gs])
    expect = inner.det_g_closed_form(gs)
    assert np.max(np.abs(dets - expect) / np.abs(expect)) < 1e-12


@pytest.mark.parametrize("delta", [0.0, 0.3, 1.0])
def test_det_g_delta(delta):
    det = np.linalg.det(inner.g_delta_matrix(delta))
    assert abs(det + 2.0 * math.cos(delta)) < 1e-14


def test_g_delta_degenerates_at_guard_poles():
    assert abs(np.linalg.det(inner.g_delta_matrix(math.pi / 2))) < 1e-14


def test_quantization_identity(uniform_artifact):
    ph = uniform_artifact.phase
    quant = inner.quantize(ph, 0.3, (1, 60))
    ls = sorted(quant.epsilons)
    assert ls[0] == quant.l0
    eps = np.array([quant.eps(l) for l in ls])
    assert np.all(np.diff(eps) < 0.0)
    for l in ls[:31]:
        gam = ph.gamma1(quant.eps(l))
        assert abs(gam - (0.3 + 2.0 * math.pi * l)) < 1e-12


def test_quantize_l0_rule(uniform_artifact):
    ph = uniform_artifact.phase
    quant = inner.quantize(ph, 0.0, (1, 10))
    l0 = quant.l0
    assert 0.0 + 2 * math.pi * l0 - ph.alpha1 > 0.0
    assert 0.0 + 2 * math.pi * (l0 - 1) - ph.alpha1 <= 0.0


def test_quantize_guard_and_empty_range(uniform_artifact):
    ph = uniform_artifact.phase
    with pytest.raises(inner.GuardBandError):
        inner.quantize(ph, math.pi / 2 + 0.05, (1, 10))
    with pytest.raises(ValueError, match="empty quantized range"):
        inner.quantize(ph, 0.0, (1, 1))     # l0 = 2 for the uniform beam


# ---------------------------------------------------------------------------
# leading coefficient and transport solves
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("delta", [0.0, 0.3, 1.0, 2.0])
def test_beta0_closed_form(uniform_artifact, delta):
    ph = uniform_artifact.phase
    s = uniform_artifact.mode.vpp_minus0
    f0 = inner.solve_f0(ph, delta, s)
    np.testing.assert_allclose(f0.beta, inner.beta0_closed_form(ph, delta, s),
                               atol=1e-12 * abs(s))


def test_beta0_delta_zero_pattern(uniform_artifact):
    ph = uniform_artifact.phase
    s = uniform_artifact.mode.vpp_minus0
    f0 = inner.solve_f0(ph, 0.0, s)
    c = 0.5 * ph.q_38_at(-1) * ph.sprime_at(-1) ** -2 * s
    np.testing.assert_allclose(f0.beta, c * np.array([-1.0, -1.0, 1.0, -1.0]),
                               rtol=1e-12)


def test_f0_zero_for_zero_kink(uniform_artifact):
    f0 = inner.solve_f0(uniform_artifact.phase, 0.3, 0.0)
    assert np.max(np.abs(f0.f_values(0))) == 0.0


def test_f0_boundary_system_residual(uniform_artifact):
    ph = uniform_artifact.phase
    s = uniform_artifact.mode.vpp_minus0
    f0 = inner.solve_f0(ph, 0.3, s)
    g = np.array([ph.q_38_at(-1) * ph.sprime_at(-1) ** -2 * s, 0.0, 0.0, 0.0])
    res = inner.g_delta_matrix(0.3) @ f0.beta - g
    assert np.max(np.abs(res)) < 1e-12 * abs(s)


def test_transport_residuals_all_orders(variable_artifact):
    art = variable_artifact
    ph = art.phase
    D = inner.cheb_diff_matrix(ph.nodes.size)
    A = ph.A_matrices(ph.nodes)
    for f in art.f_terms:
        fv = f.f_values(0)
        res = (D @ fv.T).T - np.einsum("nij,jn->in", A, fv) - f.w_values(0)
        scale = max(np.max(np.abs(fv)), 1.0)
        assert np.max(np.abs(res)) < 1e-9 * scale
        assert np.max(np.abs(f.h[:, 0])) == 0.0      # h(-1) = 0


def test_derivative_stacks_match_spectral(variable_artifact):
    art = variable_artifact
    ph = art.phase
    D = inner.cheb_diff_matrix(ph.nodes.size)
    for f in art.f_terms[:3]:
        fv = f.f_values(0)
        np.testing.assert_allclose(f.f_values(1), (D @ fv.T).T,
                                   atol=1e-8 * max(1.0, np.max(np.abs(fv))))


def test_transport_general_path_reproduces_f0(uniform_artifact):
    art = uniform_artifact
    ph = art.phase
    s = art.mode.vpp_minus0
    f0 = inner.solve_f0(ph, 0.0, s)
    sigma = np.array([ph.sprime_at(-1) ** -2 * s, 0.0, 0.0, 0.0])
    y = inner.transport_solve(ph, 0.0, 0, sigma, w_stack=None)
    np.testing.assert_allclose(y.beta, f0.beta, rtol=1e-13)
    np.testing.assert_allclose(y.f_values(0), f0.f_values(0), atol=1e-13)


def test_transport_zero_data_zero_solution(uniform_artifact):
    y = inner.transport_solve(uniform_artifact.phase, 0.7, 0, np.zeros(4))
    assert np.max(np.abs(y.f_values(0))) == 0.0


def test_principal_solution_exponential_estimate(uniform_artifact):
    # synthetic smooth right-hand side and trace data: the full solves
    # approach the principal solution exponentially in 1/eps
    ph = uniform_artifact.phase
    xs = ph.nodes
    wvals = np.stack([1.0 + xs ** 2 / 3.0, np.cos(xs),
                      0.5 * np.sin(2.0 * xs) + 0.1, 0.5 * xs - 0.2])
    w_stack = lambda r: wvals if r == 0 else None
    sigma = np.array([0.7, -0.3, 0.4, 1.1])
    delta = 0.3
    ystar = inner.transport_solve(ph, delta, -1, sigma, w_stack=w_stack)
    ys = ystar.f_values(0)
    A = ph.A_matrices(xs)
    gaps, gammas = [], []
    for l in range(1, 8):
        yl = inner.transport_solve_full(ph, delta, l, sigma, w_stack=w_stack)
        yv = yl.f_values(0)
        dd = np.einsum("nij,jn->in", A, yv - ys)     # (y_l - y*)' = A (y_l - y*)
        gaps.append(np.max(np.abs(yv - ys)) + np.max(np.abs(dd)))
        gammas.append(delta + 2.0 * math.pi * l)
    gaps = np.array(gaps)
    keep = gaps > 1e-13 * gaps.max()
    assert keep.sum() >= 4
    corr = np.corrcoef(np.array(gammas)[keep], np.log(gaps[keep]))[0, 1]
    assert corr < -0.99
    assert gaps[3] < 1e-6 * gaps[0]


# ---------------------------------------------------------------------------
# graded operator expansion and chi assembly
# ---------------------------------------------------------------------------

def test_order_operator_matches_explicit_formulas(vphase):
    # multiplication piece: k0^(j)(0)/j! S'^4 xi^j; first-order piece:
    # k0(0) (4 S'^3 d/dxi + 6 S'^2 S'') T
    ph = vphase
    xs = ph.nodes
    k00 = ph.coeffs.k0_at(0.0)
    k0p = ph.coeffs.k0_at(0.0, 1)
    sp = ph.Sp(xs)
    spp = ph.Sp.deriv()(xs)
    terms1 = {(k, t): coef(xs) for (_p, coef, k, t) in
              inner.order_operator(ph, 1)}
    np.testing.assert_allclose(terms1[(0, 0)], k0p * sp ** 4 * xs, rtol=1e-12)
    np.testing.assert_allclose(terms1[(1, 1)], 4.0 * k00 * sp ** 3, rtol=1e-12)
    np.testing.assert_allclose(terms1[(0, 1)], 6.0 * k00 * sp ** 2 * spp,
                               rtol=1e-12)


def test_eikonal_cancellation_generic(vphase):
    # O_0 f - lam0 q f vanishes identically for any smooth f
    stub = PolyVec(vphase, [[0.3, 1.0, -0.5], [1.0], [0.0, 0.0, 2.0], [0.7, -1.0]])
    out = inner.apply_order_operator(vphase, 0, stub)
    qv = vphase.coeffs.q_at(vphase.nodes)
    out = out - vphase.lam0 * qv[None, :] * stub.f_values(0)
    assert np.max(np.abs(out)) < 1e-9


def test_transport_operator_annihilates_f0(uniform_artifact):
    # (O_1 - lam1 q) f_0 = chi_1 = 0
    art = uniform_artifact
    ph = art.phase
    f0 = art.f_terms[0]
    out = inner.apply_order_operator(ph, 1, f0)
    qv = ph.coeffs.q_at(ph.nodes)
    out = out - art.lambdas[1] * qv[None, :] * f0.f_values(0)
    assert np.max(np.abs(out)) < 1e-9 * np.max(np.abs(f0.f_values(0))) * art.lambdas[1]


def test_chi_zero_below_two(uniform_artifact):
    art = uniform_artifact
    for s in (0, 1):
        chi = inner.assemble_chi(art.phase, s, art.f_terms, art.lambdas)
        assert np.max(np.abs(chi)) == 0.0


def test_chi_constant_coefficient_hand_expansion(uniform_artifact):
    # constant data: O_2 = 6 mu^2 T^2 d^2, O_3 = 4 mu^3 T d, O_4 = d^4,
    # with mu = S' = lam0^(1/4); checked at five spot nodes
    art = uniform_artifact
    ph = art.phase
    n = ph.nodes.size
    D = inner.cheb_diff_matrix(n)
    f0, f1 = art.f_terms[0], art.f_terms[1]
    lam = art.lambdas + [4621.0]          # synthetic lambda_3 for the check
    mu = art.lambdas[0] ** 0.25
    chi3 = inner.assemble_chi(ph, 3, art.f_terms, lam)
    d1_f0 = (D @ f0.f_values(0).T).T
    d2_f1 = (D @ (D @ f1.f_values(0).T)).T
    hand = -(6.0 * mu ** 2 * (T_POWERS[2] @ d2_f1) - lam[2] * f1.f_values(0)
             + 4.0 * mu ** 3 * (T_POWERS[1] @ d1_f0) - lam[3] * f0.f_values(0))
    idx = [7, 31, 63, 95, 119]
    np.testing.assert_allclose(chi3[:, idx], hand[:, idx],
                               atol=2e-6 * np.max(np.abs(hand)))


def test_order_operator_vanishes_beyond_taylor_depth(vphase):
    # polynomial coefficients carry complete Taylor data: high orders are
    # exactly zero rather than an error
    deg = max(len(vphase.coeffs.k0), len(vphase.coeffs.k1) + 2,
              len(vphase.coeffs.k2) + 4)
    assert inner.order_operator(vphase, deg + 4) == []


def test_chi_needs_lower_terms(uniform_artifact):
    art = uniform_artifact
    with pytest.raises(inner.MissingDataError):
        inner.assemble_chi(art.phase, 4, art.f_terms[:1], art.lambdas)


# ---------------------------------------------------------------------------
# interface quantities
# ---------------------------------------------------------------------------

def _tables(art):
    mode, corr = art.mode, art.corrections
    return {-1: [mode.endpoint_minus] + [t.endpoint_minus for t in corr],
            +1: [mode.endpoint_plus] + [t.endpoint_plus for t in corr]}


def test_interface_quantities_low_orders(uniform_artifact):
    art = uniform_artifact
    ph = art.phase
    iq0 = inner.interface_quantities(ph, 0, art.f_terms, _tables(art))
    for key, val in iq0.items():
        assert np.max(np.abs(np.atleast_1d(val))) == 0.0
    iq1 = inner.interface_quantities(ph, 1, art.f_terms, _tables(art))
    assert iq1["F_minus"] == 0.0 and iq1["F_plus"] == 0.0
    # D_1 = 2 S' T^3 f0' + S'' T^3 f0 at both traces
    f0 = art.f_terms[0]
    for side, key in ((-1, "D_minus"), (+1, "D_plus")):
        idx = 0 if side == -1 else -1
        sp = ph.sprime_at(side)
        spp = float(ph.Sp.deriv()(np.array([float(side)]))[0])
        hand = 2.0 * sp * (T_POWERS[3] @ f0.f_values(1)[:, idx]) + \
            spp * (T_POWERS[3] @ f0.f_values(0)[:, idx])
        np.testing.assert_allclose(iq1[key], hand, atol=1e-10)


def test_f2_interface_is_third_derivative(uniform_artifact):
    art = uniform_artifact
    iq2 = inner.interface_quantities(art.phase, 2, art.f_terms, _tables(art))
    assert iq2["F_minus"] == pytest.approx(art.mode.vppp_minus0, rel=1e-12)


def test_phi_coords_of_f0_is_beta(variable_artifact):
    # h = 0 for the homogeneous leading problem, so the fundamental-matrix
    # coordinates at -1 are beta itself; feeds the order-4 interface sums
    art = variable_artifact
    f0 = art.f_terms[0]
    np.testing.assert_allclose(f0.phi_coords(0, -1), f0.beta, rtol=1e-14)
    qm = art.phase.q_m38_at(-1)
    inner_V4 = qm * float(np.dot(f0.beta, inner.N_MINUS))
    bd = outer.boundary_data(4, art.mode, art.corrections, art.phase,
                             art.f_terms, art.delta)
    # the inner trace enters V_4(-0) on top of the outer Taylor shift
    tabs = _tables(art)[-1]
    taylor = sum((-1.0) ** j / math.factorial(j) * tabs[4 - j].deriv(j)
                 for j in range(1, 5))
    assert bd["V_minus"] == pytest.approx(inner_V4 - taylor, rel=1e-10)


def test_boundary_data_range_check(uniform_artifact):
    art = uniform_artifact
    with pytest.raises(outer.SolvabilityError, match="has not been computed"):
        outer.boundary_data(4, art.mode, art.corrections, art.phase,
                            art.f_terms, art.delta)


# ---------------------------------------------------------------------------
# inner evaluation
# ---------------------------------------------------------------------------

def test_trace_vectors_at_quantized_eps(uniform_artifact):
    art = uniform_artifact
    ph = art.phase
    quant = inner.quantize(ph, art.delta, (2, 40))
    eps = quant.eps(12)
    N = ph.N_of_S(eps, np.array([-1.0, 1.0]))
    np.testing.assert_allclose(N[:, 0], [1.0, 0.0, 1.0, 0.0], atol=1e-10)
    g1 = ph.gamma1(eps)
    expect = [math.cos(art.delta), math.sin(art.delta), 0.0, 1.0]
    # N carries S/eps, not gamma: rotate by alpha(1) via the identity instead
    gam = g1
    np.testing.assert_allclose(
        [math.cos(gam), math.sin(gam), 0.0, 1.0], expect, atol=1e-9)


def test_evaluate_inner_scaling_and_safety(uniform_artifact):
    art = uniform_artifact
    ph = art.phase
    xi = np.linspace(-1.0, 1.0, 301)
    for eps in (0.15, 0.08):
        vals = inner.evaluate_inner(ph, art.f_terms, eps, xi, n_terms=1)
        scale = np.max(np.abs(vals)) / eps ** 4
        assert 0.05 < scale < 50.0
        N = ph.N_of_S(eps, xi)
        assert np.max(N[2:]) <= 1.0 + 1e-12      # shifted exponents stay <= 0


def test_evaluate_inner_matches_direct_form(uniform_artifact):
    # production path (coordinates + gamma) against the literal
    # sum eps^4 sum eps^i <Phi c_i, N(xi, S/eps)>
    art = uniform_artifact
    ph = art.phase
    xi = np.linspace(-0.99, 0.99, 57)
    eps = 0.09
    direct = np.zeros_like(xi)
    N = ph.N_of_S(eps, xi)
    for i, f in enumerate(art.f_terms):
        c = f.beta[:, None] + inner.barycentric_eval(ph.nodes, f.h, xi)
        fv = ph.phi_apply(c, xi)
        direct += eps ** (4 + i) * np.einsum("in,in->n", fv, N)
    vals = inner.evaluate_inner(ph, art.f_terms, eps, xi)
    np.testing.assert_allclose(vals, direct, atol=1e-13 * eps ** 4)
