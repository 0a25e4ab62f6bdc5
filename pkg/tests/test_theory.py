import json
import math

import numpy as np
import pytest

from fedbat.binarizer import binarize_theory_variant
from fedbat.tensor import SeededRng
from fedbat.theory import (
    DivergenceError,
    NonPositiveGapError,
    fit_rate,
    lr_schedule_theorem,
    make_problem,
    run_theorem_mode,
    summary_json,
    theorem_mode_gaps,
)


def test_zero_heterogeneity_shares_minimizer():
    prob = make_problem(6, 5, 0.0, seed=1)
    assert prob.heterogeneity_gap <= 1e-10
    for k in range(prob.n_clients):
        assert np.allclose(prob.client_grad(k, prob.w_star), 0.0, atol=1e-9)


def test_scalar_problem():
    # one client, one dimension, unit singular value: A = +-1, so mu = L = 1
    prob = make_problem(1, 1, 0.0, seed=0, singular_range=(1.0, 1.0))
    a, b = prob.A[0][0, 0], prob.b[0][0]
    assert abs(a) == pytest.approx(1.0, abs=1e-15)
    assert prob.mu == pytest.approx(1.0, abs=1e-15) and prob.L == pytest.approx(1.0, abs=1e-15)
    assert prob.w_star[0] == pytest.approx(b / a, rel=1e-14)
    assert prob.f_star == pytest.approx(0.0, abs=1e-28)


def test_problem_optimality_and_curvature():
    prob = make_problem(5, 6, 1.0, seed=2)
    assert np.linalg.norm(prob.grad(prob.w_star)) <= 1e-10
    assert 0 < prob.mu <= prob.L
    assert abs(prob.p.sum() - 1.0) <= 1e-12
    assert prob.heterogeneity_gap >= 0
    for w in SeededRng(3).normal_array((5, 6)):
        assert prob.loss(w) >= prob.f_star


def test_gamma_grows_with_heterogeneity():
    for seed in range(5):
        gammas = [make_problem(4, 5, h, seed).heterogeneity_gap for h in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)]
        assert all(a < b for a, b in zip(gammas, gammas[1:]))


def test_make_problem_validation():
    with pytest.raises(ValueError):
        make_problem(2, 0, 1.0, 0)
    with pytest.raises(ValueError):
        make_problem(2, 3, -1.0, 0)


def test_lr_schedule_examples():
    assert lr_schedule_theorem(1.0, 1.0, 1, 0) == pytest.approx(2 / 7, rel=1e-15)
    assert lr_schedule_theorem(1.0, 0.1, 20, 0) == pytest.approx(2 / 19, rel=1e-15)
    etas = [lr_schedule_theorem(0.5, 2.0, 5, t) for t in range(100)]
    assert all(a > b for a, b in zip(etas, etas[1:]))
    with pytest.raises(ValueError):
        lr_schedule_theorem(0.0, 1.0, 1, 0)


def test_lr_halving_condition():
    rng = SeededRng(11)
    t = np.arange(1, 10_001)
    for i in range(10):
        mu = 0.01 + rng.uniform()
        L = mu * (1 + 50 * rng.uniform())
        tau = int(rng.integers(1, 50))
        eta = np.array([lr_schedule_theorem(mu, L, tau, s) for s in t])
        later = np.array([lr_schedule_theorem(mu, L, tau, s + tau) for s in t])
        assert np.all(eta <= 2 * later)


def test_fit_rate_power_laws():
    t = np.arange(1, 501, dtype=np.float64)
    assert fit_rate(3.0 / t).slope == pytest.approx(-1.0, abs=1e-6)
    assert fit_rate(3.0 / np.sqrt(t)).slope == pytest.approx(-0.5, abs=1e-6)
    assert fit_rate(np.full(500, 0.2)).slope == pytest.approx(0.0, abs=1e-9)
    fit = fit_rate(3.0 / t, window=0.5)
    assert fit.rounds == (251, 500)


def test_fit_rate_errors():
    with pytest.raises(NonPositiveGapError):
        fit_rate([1.0, 0.5, 0.0, 0.1])
    with pytest.raises(ValueError):
        fit_rate([1.0, 0.5], window=0.0)
    # a zero outside the window is fine
    assert fit_rate([0.0] + [1.0 / t for t in range(2, 101)], window=0.5).slope == pytest.approx(-1.0, abs=1e-6)


def test_theorem_binarization_is_unbiased_per_step():
    m = SeededRng(4).normal_array(6)
    rng = SeededRng(5)
    draws = np.stack([binarize_theory_variant(m, rng) for _ in range(40_000)])
    alpha = np.abs(m).max()
    se = np.sqrt(alpha**2 - m**2) / math.sqrt(40_000)
    # slack covers rounding of the mean at the deterministic boundary element
    assert np.all(np.abs(draws.mean(axis=0) - m) <= 4 * se + 1e-9)


def test_control_with_one_step_is_centralized_sgd():
    prob = make_problem(4, 5, 1.0, seed=3)
    traj = []
    theorem_mode_gaps(prob, 1, 30, seed=0, control=True, trajectory=traj)
    w = np.zeros(prob.dim)
    for t, got in enumerate(traj):
        w = w - lr_schedule_theorem(prob.mu, prob.L, 1, t) * prob.grad(w)
        assert np.allclose(got, w, rtol=0, atol=1e-12)


def test_one_local_step_between_aggregations():
    prob = make_problem(3, 4, 1.0, seed=0)
    steps = []
    theorem_mode_gaps(prob, 1, 5, seed=0, local_steps=steps)
    assert steps == [1] * 15
    steps = []
    theorem_mode_gaps(prob, 4, 2, seed=0, participation=2, local_steps=steps)
    assert steps == [4] * 4


@pytest.mark.parametrize("n_clients", [3, 8])
def test_full_sampling_equals_full_participation(n_clients):
    prob = make_problem(n_clients, 4, 1.0, seed=1)
    a = theorem_mode_gaps(prob, 3, 40, seed=2, batch_size=2)
    b = theorem_mode_gaps(prob, 3, 40, seed=2, batch_size=2, participation=n_clients)
    assert np.array_equal(a, b)


def test_partial_participation_converges():
    prob = make_problem(8, 5, 1.0, seed=0)
    gaps = theorem_mode_gaps(prob, 3, 300, seed=0, participation=4)
    assert gaps[-20:].mean() < 0.05 * gaps[:20].mean()


def test_divergence_is_reported():
    prob = make_problem(4, 5, 1.0, seed=0)
    with pytest.raises(DivergenceError) as info:
        run_theorem_mode(prob, 5, 100, seeds=1, lr_scale=100.0)
    assert info.value.round >= 1 and not info.value.gap <= 1e10


def test_rounds_floor():
    with pytest.raises(ValueError):
        run_theorem_mode(make_problem(2, 2, 1.0, 0), 2, 99, seeds=1)


@pytest.mark.slow
def test_default_runs_reach_one_over_t(theorem_run, control_run):
    assert control_run.fit.within(-1.3, -0.7)
    assert theorem_run.fit.within(-1.3, -0.7)
    assert theorem_run.mean_gaps[-1] <= 10 * control_run.mean_gaps[-1]
    s = json.loads(summary_json(theorem_run))
    assert s["passed"] and s["seeds"] == 10 and s["rounds"] == 1000


@pytest.mark.slow
def test_gap_block_means_decrease(theorem_run):
    blocks = theorem_run.mean_gaps.reshape(10, 100).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="binarization noise at 10 seeds produces upticks in a 10-round moving average")
def test_smoothed_gap_nonincreasing_after_warmup(theorem_run):
    g = theorem_run.mean_gaps
    smooth = np.convolve(g, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth[len(g) // 10:]) <= 0)


@pytest.mark.slow
def test_run_csv_layout(theorem_run):
    lines = theorem_run.to_csv().splitlines()
    assert lines[0].split(",")[:3] == ["round", "mean_gap", "seed_0"]
    assert len(lines) == 1001
