import numpy as np
import pytest

from ctxwm.bounds import (
    CERT_HEADER,
    CERT_NAMES,
    LatentModel,
    TabularMDP,
    certify_bound,
    epsilons,
    fuzz_rows,
    latent_markov,
    policy_value,
    preimage_weights,
    pushforward,
    random_instance,
    reindex,
    sim_bound,
)
from ctxwm.errors import ConfigError, DimensionError

from oracles import eps_abs_bruteforce, value_iteration


def random_mdp(rng, n=6, m=2, gamma=0.9):
    P = rng.exponential(size=(n, m, n))
    return TabularMDP(P / P.sum(-1, keepdims=True), rng.uniform(-1, 1, (n, m)), gamma)


def test_reindex_dense_first_use_order():
    assert reindex([7, 3, 7, 9]).tolist() == [0, 1, 0, 2]
    with pytest.raises(DimensionError):
        reindex(np.zeros((2, 2)))


def test_pushforward_examples():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng)
    perm = rng.permutation(6)
    push = pushforward(mdp, perm)
    relabel = reindex(perm)
    for s in range(6):
        assert np.allclose(push[:, :, relabel[s]], mdp.P[:, :, s])
    const = pushforward(mdp, np.zeros(6, dtype=int))
    assert np.allclose(const, 1.0)
    push = pushforward(mdp, rng.integers(0, 3, 6))
    assert np.abs(push.sum(-1) - 1).max() < 1e-12


def test_latent_markov_exact_cases():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng)
    bar = latent_markov(mdp, np.arange(6))
    assert np.array_equal(bar.P, pushforward(mdp, np.arange(6)))
    eps = epsilons(mdp, np.arange(6), bar, bar)
    assert eps.abs_P == 0 and eps.abs_R == 0 and eps.model_P == 0 and eps.task_P == 0

    # two states with identical rows and rewards merge exactly (bisimulation)
    P, R = mdp.P.copy(), mdp.R.copy()
    P[1], R[1] = P[0], R[0]
    twin = TabularMDP(P, R, 0.9)
    phi = [0, 0, 1, 2, 3, 4]
    bar = latent_markov(twin, phi)
    eps = epsilons(twin, phi, bar, bar)
    assert eps.abs_P < 1e-15 and eps.abs_R == 0


@pytest.mark.parametrize("weighting", ["uniform", "stationary"])
def test_eps_abs_matches_bruteforce(weighting):
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        mdp = random_mdp(rng, n, int(rng.integers(1, 4)))
        phi = reindex(rng.integers(0, max(1, n // 2), n))
        bar = latent_markov(mdp, phi, weighting)
        eps = epsilons(mdp, phi, bar, bar, weighting)
        w = None if weighting == "uniform" else preimage_weights(mdp, phi, weighting)
        bp, br = eps_abs_bruteforce(mdp.P, mdp.R, phi.tolist(), w)
        assert abs(eps.abs_P - bp) < 1e-12 and abs(eps.abs_R - br) < 1e-12
        assert np.abs(bar.P.sum(-1) - 1).max() < 1e-12


def test_reward_shift_gives_exact_model_error():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng)
    phi = [0, 0, 1, 1, 2, 2]
    bar = latent_markov(mdp, phi)
    shifted = LatentModel(bar.P, bar.R + 0.125, bar.gamma)
    eps = epsilons(mdp, phi, shifted, shifted)
    assert eps.model_R == 0.125 and eps.model_P == 0 and eps.task_R == 0
    assert all(v >= 0 for v in eps.as_dict().values())


def test_policy_value_examples():
    one = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    assert policy_value(one, [[1.0]])[0] == pytest.approx(10.0, abs=1e-12)
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng)
    zero = TabularMDP(mdp.P, np.zeros_like(mdp.R), 0.9)
    assert np.array_equal(policy_value(zero, np.full((6, 2), 0.5)), np.zeros(6))
    for _ in range(10):
        mdp = random_mdp(rng, gamma=float(rng.uniform(0, 0.99)))
        pi = rng.dirichlet(np.ones(2), 6)
        V = policy_value(mdp, pi)
        assert np.abs(V - value_iteration(mdp.P, mdp.R, mdp.gamma, pi)).max() < 1e-8
        resid = V - (pi * mdp.R).sum(-1) - mdp.gamma * np.einsum("sa,sad,d->s", pi, mdp.P, V)
        assert np.abs(resid).max() < 1e-10


def test_discount_validation():
    with pytest.raises(ConfigError):
        TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 1.0)
    with pytest.raises(ValueError):
        TabularMDP(np.full((1, 1, 2), 0.4), np.ones((1, 1)), 0.5)


def test_sim_bound_closed_form():
    assert sim_bound(0.1, 0.2, 0.9, 1.0) == pytest.approx(19.0, rel=1e-12)


def test_exact_model_certificate_is_zero():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng)
    phi = np.arange(6)
    bar = latent_markov(mdp, phi)
    certs, eps = certify_bound(mdp, phi, bar, bar, rng.dirichlet(np.ones(2), 6))
    assert eps.bound == 0.0
    for c in certs.values():
        assert c.passed and c.rhs == 0.0 and c.lhs < 1e-12


def test_certificate_invariant_to_relabeling():
    rng = np.random.default_rng(6)
    inst = random_instance(rng, 7, 3, 4)
    certs, _ = certify_bound(inst.mdp, inst.phi, inst.model_task, inst.model_z, inst.policy)
    perm = rng.permutation(inst.mdp.n_states)
    P = inst.mdp.P[perm][:, :, perm]
    R = inst.mdp.R[perm]
    phi = inst.phi[perm]
    # codes are renamed by first use in the new order; move the latent models along
    relabel = reindex(phi)
    code_map = np.empty(len(np.unique(phi)), dtype=int)
    code_map[relabel] = phi

    def move(m):
        return LatentModel(m.P[code_map][:, :, code_map], m.R[code_map], m.gamma)
    certs2, _ = certify_bound(TabularMDP(P, R, inst.mdp.gamma), phi, move(inst.model_task),
                              move(inst.model_z), inst.policy[code_map])
    for name in CERT_NAMES:
        assert certs2[name].lhs == pytest.approx(certs[name].lhs, abs=1e-10)
        assert certs2[name].rhs == pytest.approx(certs[name].rhs, abs=1e-10)


def test_fuzz_rows_pass_and_are_deterministic():
    rows = fuzz_rows(200, seed=1)
    assert all(len(r) == len(CERT_HEADER) for r in rows)
    assert all(r[-1] == 1 for r in rows)
    assert rows == fuzz_rows(200, seed=1)
    for r in rows:
        assert r[1] <= 8 and r[2] <= 3 and r[3] <= 5


def test_fuzz_holds_under_stationary_weighting():
    for i in range(100):
        inst = random_instance(np.random.default_rng([9, i]))
        certs, _ = certify_bound(inst.mdp, inst.phi, inst.model_task, inst.model_z, inst.policy, "stationary")
        assert all(c.passed for c in certs.values())


def test_shape_mismatch_raises():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng)
    bad = latent_markov(mdp, [0, 0, 0, 1, 1, 1])
    with pytest.raises(DimensionError):
        epsilons(mdp, [0, 1, 2, 3, 0, 1], bad, bad)
