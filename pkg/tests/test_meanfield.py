import numpy as np
import pytest

from spatial_sir.densities import GaussianMixtureDensity
from spatial_sir.grid import SpatialGrid
from spatial_sir.infectivity import InfectivityModel
from spatial_sir.kernels import Kernel
from spatial_sir.measures import constant, monomial
from spatial_sir.meanfield import (
    NonConvergenceError,
    check_apriori_bounds,
    classical_sir,
    final_size,
    homogeneous_oracle,
    pair_meanfield,
    solve_picard,
    solve_stepping,
)
from spatial_sir.model import ConfigError, InitialCondition

from conftest import make_config

GAUSS = Kernel("gaussian_bump", {"sigma": 0.2, "floor": 0.0})
CORNER = GaussianMixtureDensity((1.0,), ((0.15, 0.15),), (0.1,))
HUMP = InfectivityModel("hump", {"a": 1.5, "p": 1.0, "h_min": 2.0, "h_max": 4.0})


def spatial(gamma=1.0, horizon=4.0, grid=12, dt=0.02, **kw):
    ic = InitialCondition(0.95, 0.05, 0.0, density_I=CORNER)
    return make_config(kernel=GAUSS, law=HUMP, initial=ic, gamma=gamma, horizon=horizon, grid=grid, dt=dt, **kw)


def test_no_infectives_means_no_dynamics():
    cfg = make_config(frac_S=0.9, frac_I=0.0, frac_R=0.1, horizon=5.0, grid=6, dt=0.05)
    sol = solve_stepping(cfg, store_every=1)
    assert np.all(sol.F == 0)
    assert np.all(sol.S == sol.S[0])
    assert np.all(sol.R == sol.R[0])


def test_zero_infectivity_closed_form():
    zero = InfectivityModel("markov", {"a": 0.0, "rho": 0.5})
    cfg = make_config(law=zero, frac_S=0.7, frac_I=0.2, frac_R=0.1, horizon=6.0, grid=5, dt=0.05)
    sol = solve_stepping(cfg, store_every=1)
    assert np.all(sol.Gamma == 0)
    surv0 = np.exp(-0.5 * sol.times)[:, None]
    assert np.allclose(sol.I, 0.2 * surv0, atol=1e-15)
    assert np.allclose(sol.R, 0.1 + 0.2 * (1 - surv0), atol=1e-15)


def test_homogeneous_markov_matches_sir_ode():
    cfg = make_config(horizon=40.0, grid=2, dt=1e-3)
    sol = solve_stepping(cfg, store_every=100)
    ode = classical_sir(0.5, 0.25, 0.99, 0.01, 0.0, sol.times)
    one = constant()
    for c in "SIR":
        got = np.array([pair_meanfield(sol, t, c, one) for t in sol.times])
        assert np.max(np.abs(got - getattr(ode, c))) <= 5e-3
    # spatially constant
    assert np.ptp(sol.S, axis=1).max() == 0.0


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0])
def test_gamma_irrelevant_for_unit_constant_kernel(gamma):
    ref = solve_stepping(make_config(horizon=5.0, grid=3, dt=0.01, gamma=1.0), store_every=10)
    sol = solve_stepping(make_config(horizon=5.0, grid=3, dt=0.01, gamma=gamma), store_every=10)
    assert np.allclose(sol.S, ref.S, rtol=0, atol=1e-15)


def test_scalar_oracle_matches_ode():
    cfg = make_config(horizon=20.0, dt=0.01)
    orc = homogeneous_oracle(cfg)
    ode = classical_sir(0.5, 0.25, 0.99, 0.01, 0.0, orc.times[::50])
    assert np.max(np.abs(orc.S[::50] - ode.S)) < 1e-6
    assert np.max(np.abs(orc.I[::50] - ode.I)) < 1e-6
    assert np.max(np.abs(orc.R[::50] - ode.R)) < 1e-6


def test_scalar_oracle_without_transmission():
    zero = InfectivityModel("markov", {"a": 0.0, "rho": 0.25})
    orc = homogeneous_oracle(make_config(law=zero, horizon=8.0, dt=0.01))
    assert np.all(orc.S == 0.99)
    assert np.allclose(orc.I, 0.01 * np.exp(-0.25 * orc.times), atol=1e-15)


def test_scalar_oracle_non_markov_against_grid_solver():
    cfg = make_config(law=HUMP, horizon=10.0, grid=2, dt=0.002, frac_S=0.95, frac_I=0.05)
    sol = solve_stepping(cfg, store_every=50)
    orc = homogeneous_oracle(cfg, dt=0.0005)
    at = orc.at(sol.times)
    one = constant()
    for c in "SIR":
        got = np.array([sol.pair(t, c, one) for t in sol.times])
        assert np.max(np.abs(got - at[c])) < 5e-3


def test_oracle_needs_constant_kernel():
    with pytest.raises(ConfigError):
        homogeneous_oracle(spatial())


def test_final_size_fixed_point():
    assert final_size(1.0, 0.0, 2.0) == pytest.approx(0.7968121300200202, abs=1e-12)
    assert final_size(0.99, 0.0, 2.0) == pytest.approx(0.8002039676767991, abs=1e-12)
    ode = classical_sir(0.5, 0.25, 0.99, 0.01, 0.0, [0.0, 300.0])
    assert ode.R[-1] == pytest.approx(final_size(0.99, 0.0, 2.0), abs=1e-7)


def test_conservation_and_positivity():
    sol = solve_stepping(spatial(), store_every=1)
    assert sol.conservation_residual() < 1e-12
    for c in ("S", "F", "I", "R", "Gamma"):
        assert np.all(sol.density(c) >= 0)
    assert np.all(np.diff(sol.S, axis=0) <= 0)


def test_exponential_formula():
    sol = solve_stepping(spatial(), store_every=1)
    expected = sol.S[0] * np.exp(-sol.cum_gamma)
    assert np.allclose(sol.S, expected, rtol=1e-12, atol=0)
    # trapezoidal re-integration of the stored hazard agrees to O(dt)
    trap = np.concatenate([np.zeros((1, sol.S.shape[1])),
                           np.cumsum(0.5 * sol.dt * (sol.Gamma[1:] + sol.Gamma[:-1]), axis=0)])
    gap = np.max(np.abs(sol.S - sol.S[0] * np.exp(-trap)))
    assert gap < 5 * sol.dt * np.max(sol.Gamma) * np.max(sol.S[0])


def test_step_halving_first_order():
    # smooth infectivity and kernel; sup-norm gap between dt and dt/2 shrinks by about 2
    cfg = spatial(horizon=3.0, grid=8)
    sols = [solve_stepping(cfg, dt=dt, store_every=int(round(3.0 / dt))) for dt in (0.04, 0.02, 0.01, 0.005)]
    gaps = []
    for a, b in zip(sols, sols[1:]):
        gaps.append(max(np.max(np.abs(a.density(c)[-1] - b.density(c)[-1])) for c in "SFIR"))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all(ratios >= 1.8)


def test_grid_refinement_quadrature_order():
    cfg = spatial(horizon=2.0, dt=0.02)
    one, x1 = constant(), monomial((1, 0))
    vals = []
    for n in (8, 16, 32):
        sol = solve_stepping(cfg, grid=SpatialGrid.uniform(n), store_every=100)
        vals.append([sol.pair(2.0, "S", phi) for phi in (one, x1)])
    vals = np.array(vals)
    d1 = np.abs(vals[1] - vals[0])
    d2 = np.abs(vals[2] - vals[1])
    # midpoint rule: halving h divides the change by about 4
    assert np.all(d2 < d1 / 3)


def test_picard_agrees_with_stepping():
    cfg = spatial(horizon=3.0, grid=8, dt=0.02)
    step = solve_stepping(cfg, store_every=1)
    pic = solve_picard(cfg, tol=1e-10)
    assert pic.iterations > 1
    assert np.max(np.abs(pic.S - step.S)) < 1e-9
    assert np.max(np.abs(pic.F - step.F)) < 1e-9
    assert all(f < 1 for f in pic.contraction)


def test_picard_from_stepping_converges_immediately():
    cfg = spatial(horizon=3.0, grid=8, dt=0.02)
    step = solve_stepping(cfg, store_every=1)
    pic = solve_picard(cfg, tol=1e-8, initial_guess=step)
    assert pic.iterations <= 2
    assert pic.residuals[-1] < 1e-8


def test_picard_uniqueness_two_guesses():
    cfg = spatial(horizon=3.0, grid=8, dt=0.02)
    a = solve_picard(cfg, tol=1e-8, initial_guess="zero")
    b = solve_picard(cfg, tol=1e-8, initial_guess="max")
    assert max(np.max(np.abs(a.S - b.S)), np.max(np.abs(a.F - b.F))) <= 1e-7


def test_picard_trivial_and_failure():
    cfg = make_config(frac_S=1.0, frac_I=0.0, horizon=2.0, grid=3, dt=0.05)
    assert solve_picard(cfg).iterations == 1
    with pytest.raises(NonConvergenceError) as info:
        solve_picard(spatial(horizon=3.0, grid=6, dt=0.05), max_iter=2)
    assert info.value.residual > 0


def test_apriori_bounds_worked_config():
    cfg = make_config(kernel=GAUSS, horizon=10.0, grid=16, dt=0.02)
    sol = solve_stepping(cfg, store_every=1)
    rep = check_apriori_bounds(sol, cfg)
    assert rep.passed
    assert rep.monotone_violations == 0
    assert rep.sup_F < rep.F_bound


def test_apriori_with_zero_infectivity():
    zero = InfectivityModel("markov", {"a": 0.0, "rho": 0.5})
    cfg = make_config(law=zero, law0=InfectivityModel("markov", {"a": 0.3, "rho": 0.5}), horizon=4.0, grid=4, dt=0.05)
    sol = solve_stepping(cfg, store_every=1)
    rep = check_apriori_bounds(sol, cfg)
    assert rep.passed
    assert rep.sup_F == pytest.approx(0.3 * 0.01)


def test_more_initial_infectivity_more_infections():
    totals = []
    for a0 in (0.2, 0.5, 1.0, 2.0):
        law0 = InfectivityModel("markov", {"a": a0, "rho": 0.25})
        cfg = spatial(law0=law0, horizon=6.0, grid=8, dt=0.02)
        sol = solve_stepping(cfg)
        totals.append(sol.grid.integrate(sol.mu_bar - sol.S[-1]))
    assert np.all(np.diff(totals) >= 0)


def test_truncated_mode_matches_raw_when_floor_inactive():
    cfg = spatial(horizon=2.0, grid=8)
    raw = solve_stepping(cfg, mode="raw", store_every=1)
    trunc = solve_stepping(cfg, mode="truncated", store_every=1)
    assert np.min(raw.denominators) > raw.c_hat / 2
    assert np.array_equal(raw.S, trunc.S)


def test_interpolated_pairing_is_flagged():
    sol = solve_stepping(make_config(horizon=1.0, grid=2, dt=0.1), store_every=1)
    with pytest.warns(UserWarning, match="interpolating"):
        v = sol.pair(0.05, "S", constant())
    assert sol.pair(0.0, "S", constant()) >= v >= sol.pair(0.1, "S", constant())


def test_solution_csv(tmp_path):
    sol = solve_stepping(make_config(horizon=1.0, grid=2, dt=0.1), store_every=5)
    sol.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# schema: solution v1"
    assert lines[1] == "t,node_x1,node_x2,muS,muF,muI,muR,Gamma"
    assert len(lines) == 2 + 3 * 4


def test_horizon_must_be_multiple_of_dt():
    with pytest.raises(ConfigError):
        solve_stepping(make_config(horizon=1.0, grid=2, dt=0.3))
