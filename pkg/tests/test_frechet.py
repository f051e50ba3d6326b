import numpy as np
import pytest

from hps.frechet import (ForwardState, Receivers, SineBasisSpec, basis_adjoint, basis_apply,
                         forward_map, gauss_newton, history_csv, jvp, make_inverse_problem,
                         project_onto_basis, vjp, warm_start)


@pytest.fixture(scope="module")
def small():
    # cheap configuration for unit checks; the acceptance suite runs the full one
    ip = make_inverse_problem(gamma=3, k=8, p=10, L=2, n_receivers=24)
    return ip, ForwardState(ip.theta_star, ip)


def test_basis_layout():
    b = SineBasisSpec(5)
    assert b.N_theta == 15
    assert b.modes[:3] == [(1, 1), (1, 2), (1, 3)]
    assert b.matrix(np.zeros((1, 2)))[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert b.lowest(3) == [0, 1, 4]  # (1,1), then the tie (1,2) before (2,1)
    assert np.abs(b.matrix(np.array([[1.0, 0.3], [-0.2, -1.0]]))).max() < 1e-14


def test_basis_orthonormal_projection():
    b = SineBasisSpec(5)
    for j in (0, 7, 14):
        c = project_onto_basis(b, lambda x: b.matrix(x)[:, j])
        assert np.abs(c - np.eye(15)[j]).max() < 1e-12


def test_basis_adjoint_identity():
    rng = np.random.default_rng(0)
    b = SineBasisSpec(5)
    pts = rng.uniform(-1, 1, (200, 2))
    w = rng.uniform(0.1, 1, 200)
    th = rng.standard_normal(15)
    s = rng.standard_normal(200)
    lhs = np.sum(w * s * basis_apply(b, th, pts))
    assert abs(lhs - th @ basis_adjoint(b, s, w, pts)) < 1e-12 * abs(lhs)
    with pytest.raises(ValueError):
        basis_apply(b, np.zeros(14), pts)


def test_receivers_validated():
    with pytest.raises(ValueError):
        Receivers(np.array([[1.2, 0.0]]))
    r = Receivers.ring(8, 0.5)
    assert len(r) == 8 and np.allclose(np.hypot(*r.centers.T), 0.5)


def test_zero_potential_scatters_nothing(small):
    ip, _ = small
    assert np.abs(forward_map(np.zeros(ip.basis.N_theta), ip)).max() < 1e-13


def test_jvp_linear_and_matches_fd(small):
    ip, st = small
    rng = np.random.default_rng(1)
    v, w = rng.standard_normal((2, ip.basis.N_theta))
    assert np.allclose(st.jvp(2 * v - w), 2 * st.jvp(v) - st.jvp(w), atol=1e-12)
    e = 1e-5
    fd = (forward_map(ip.theta_star + e * v, ip) - forward_map(ip.theta_star - e * v, ip)) / (2 * e)
    j = jvp(ip.theta_star, v, ip, state=st)
    assert np.linalg.norm(fd - j) < 1e-6 * np.linalg.norm(j)


def test_adjoint_identity(small):
    ip, st = small
    rng = np.random.default_rng(2)
    for _ in range(5):
        v = rng.standard_normal(ip.basis.N_theta)
        f = rng.standard_normal(len(ip.receivers)) + 1j * rng.standard_normal(len(ip.receivers))
        a = np.vdot(f, st.jvp(v))
        b = np.vdot(vjp(ip.theta_star, f, ip, state=st), v)
        assert abs(a - b) < 1e-10 * abs(a)
    with pytest.raises(ValueError):
        vjp(ip.theta_star, np.zeros(3), ip, state=st)


def test_gauss_newton_at_truth_stops(small):
    ip, _ = small
    theta, hist = gauss_newton(ip, ip.theta_star)
    assert len(hist) == 1 and hist[0].residual == 0.0
    assert np.array_equal(theta, ip.theta_star)
    assert history_csv(hist, "k=8").startswith("# k=8\niter,")


def test_warm_start_sets_lowest_modes(small):
    ip, _ = small
    th = warm_start(ip, 2)
    idx = ip.basis.lowest(2)
    assert np.array_equal(th[idx], ip.theta_star[idx])
    assert np.count_nonzero(th) <= 2
