import numpy as np
import pytest

from spatial_sir.densities import UniformDensity
from spatial_sir.grid import SpatialGrid, lattice
from spatial_sir.kernels import (
    DomainError,
    Kernel,
    KernelError,
    empirical_denominator,
    estimate_c_hat,
    kernel_eval,
    limit_denominator,
    omega_n_holds,
    phi_trunc,
)

CONST = Kernel("constant", {"k": 1.0})
TOPHAT = Kernel("top_hat", {"radius": 0.3, "k": 1.0}, allow_discontinuous=True)
GAUSS = Kernel("gaussian_bump", {"sigma": 0.2, "floor": 0.0})
EXPK = Kernel("exp_decay", {"sigma": 0.3, "floor": 0.1})


def test_kernel_values():
    assert kernel_eval(CONST, [0.1, 0.9], [0.7, 0.2]) == 1.0
    assert kernel_eval(TOPHAT, [0, 0], [0.2, 0]) == 1.0
    assert kernel_eval(TOPHAT, [0, 0], [0.5, 0]) == 0.0
    assert kernel_eval(GAUSS, [0.3, 0.3], [0.3, 0.3]) == 1.0
    r = np.linspace(0, 1.4, 50)
    assert np.all(np.diff(GAUSS.profile(r)) < 0)
    assert GAUSS.profile(0.2) == pytest.approx(np.exp(-0.5))
    assert EXPK.profile(0.3) == pytest.approx(0.1 + 0.9 * np.exp(-1))


@pytest.mark.parametrize("k", [CONST, TOPHAT, GAUSS, EXPK])
def test_symmetric_and_in_unit_interval(k, rng):
    x, y = rng.random((200, 2)), rng.random((200, 2))
    m = k.matrix(x, y)
    assert np.array_equal(m, k.matrix(y, x).T)
    assert np.all((m >= 0) & (m <= 1))
    assert np.allclose(m, k(x[:, None, :], y[None, :, :]), atol=1e-15)


def test_outside_domain():
    with pytest.raises(DomainError):
        kernel_eval(GAUSS, [1.2, 0.5], [0.5, 0.5])


def test_bad_kernel_params():
    with pytest.raises(KernelError):
        Kernel("gaussian_bump", {"sigma": -1, "floor": 0})
    with pytest.raises(KernelError):
        Kernel("top_hat", {"radius": 0.3})
    with pytest.raises(KernelError):
        Kernel("cosine", {})


def test_empirical_denominator_basic(rng):
    pos = rng.random((37, 2))
    assert np.all(empirical_denominator(CONST, pos, rng.random((5, 2))) == 1.0)
    z = np.array([[0.1, 0.2], [0.6, 0.9]])
    y = np.array([0.4, 0.4])
    assert empirical_denominator(GAUSS, z, y) == pytest.approx((GAUSS(z[0], y) + GAUSS(z[1], y)) / 2, rel=1e-15)


def test_empirical_vs_limit_denominator(rng):
    n = 1000
    pos = rng.random((n, 2))
    grid = SpatialGrid.uniform(128)
    y = lattice(5)
    emp = empirical_denominator(GAUSS, pos, y)
    lim = limit_denominator(GAUSS, UniformDensity(), grid, y)
    assert np.max(np.abs(emp - lim)) < 5 / np.sqrt(n)


def test_limit_denominator_gaussian_closed_form():
    # product of one-dimensional erf integrals for the uniform density
    grid = SpatialGrid.uniform(256)
    assert limit_denominator(GAUSS, UniformDensity(), grid, [0.5, 0.5]) == pytest.approx(0.24512354050042545, abs=1e-6)
    assert limit_denominator(GAUSS, UniformDensity(), grid, [0.0, 0.0]) == pytest.approx(0.06283178102841873, abs=1e-6)


def test_limit_denominator_top_hat_disc_area():
    coarse = limit_denominator(TOPHAT, UniformDensity(), SpatialGrid.uniform(256), [0.5, 0.5])
    fine = limit_denominator(TOPHAT, UniformDensity(), SpatialGrid.uniform(1024), [0.5, 0.5])
    exact = np.pi * 0.09
    assert exact == pytest.approx(0.28274, abs=1e-5)
    assert abs(fine - exact) < 1e-3
    assert abs(coarse - exact) < 3e-3


def test_limit_denominator_constant_kernel():
    grid = SpatialGrid.uniform(16)
    assert limit_denominator(CONST, UniformDensity(), grid, [0.3, 0.8]) == pytest.approx(1.0, abs=1e-14)


def test_limit_denominator_refinement_converges():
    y = np.array([0.13, 0.71])
    vals = [limit_denominator(GAUSS, UniformDensity(), SpatialGrid.uniform(n), y) for n in (8, 16, 32, 64)]
    gaps = np.abs(np.diff(vals))
    assert np.all(np.diff(gaps) < 0)


def test_lower_bound_from_kernel_floor_near_diagonal():
    r = 0.1
    c_low = GAUSS.profile(r)
    grid = SpatialGrid.uniform(64)
    y = lattice(11)
    d = limit_denominator(GAUSS, UniformDensity(), grid, y)
    # the intersection of B(y, r) with the unit square has area at least a quarter disc
    assert np.all(d >= c_low * 1.0 * np.pi * r * r / 4)


def test_phi_trunc():
    assert phi_trunc(0.1, 0.4, 1.0) == pytest.approx(0.2)
    assert phi_trunc(0.9, 0.4, 0.5) == pytest.approx(0.94868, abs=1e-5)
    assert phi_trunc(np.array([0.0, 0.3, 5.0]), 0.4, 0.0).tolist() == [1.0, 1.0, 1.0]
    x = np.linspace(0, 2, 101)
    assert np.all(np.diff(phi_trunc(x, 0.4, 0.7)) >= 0)
    above = x[x >= 0.2]
    assert np.array_equal(phi_trunc(above, 0.4, 0.7), above ** 0.7)


def test_decomposition_identity(rng):
    n = 250
    pos = rng.random((n, 2))
    d = empirical_denominator(GAUSS, pos, pos)
    for j in (0, 17, 249):
        others = np.delete(np.arange(n), j)
        rest = np.mean(GAUSS(pos[others], pos[j]))
        assert d[j] == pytest.approx(GAUSS(pos[j], pos[j]) / n + (1 - 1 / n) * rest, rel=1e-14)


def test_estimate_c_hat():
    grid = SpatialGrid.uniform(64)
    field = estimate_c_hat(GAUSS, UniformDensity(), grid)
    assert field.c_hat <= field.values.min()
    # the infimum sits in a corner of the square
    assert field.c_hat == pytest.approx(0.06283178102841873, abs=1e-4)
    assert estimate_c_hat(CONST, UniformDensity(), SpatialGrid.uniform(8)).c_hat == pytest.approx(1.0)


def test_denominator_field_csv(tmp_path):
    field = estimate_c_hat(GAUSS, UniformDensity(), SpatialGrid.uniform(16), probes_per_axis=5)
    field.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "# schema: denominator v1"
    assert lines[1] == "y1,y2,d"
    assert len(lines) == 2 + field.values.size


def test_omega_n(rng):
    probe = lattice(11)
    assert omega_n_holds(CONST, rng.random((3, 2)), 1.0, probe)
    narrow = Kernel("gaussian_bump", {"sigma": 0.05, "floor": 0.0})
    c_hat = estimate_c_hat(narrow, UniformDensity(), SpatialGrid.uniform(64)).c_hat
    single = np.array([[0.05, 0.05]])
    assert narrow(single[0], [1.0, 1.0]) < c_hat / 2
    assert not omega_n_holds(narrow, single, c_hat, probe)
