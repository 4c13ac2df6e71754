"""Finite-MDP value-error bounds for state abstraction, model error and task inference.

Everything here is exact float64 linear algebra over small tabular problems:
pushforward and latent-Markov kernels, sup-norm error terms, direct policy
evaluation, and a certificate comparing measured value gaps with the
simulation-lemma bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

STOCH_TOL = 1e-12
CERT_SLACK = 1e-9


@dataclass(frozen=True)
class TabularMDP:
    """``P[s, a, s']`` row-stochastic, ``R[s, a]`` bounded rewards."""

    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self) -> None:
        P, R = np.asarray(self.P, dtype=np.float64), np.asarray(self.R, dtype=np.float64)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise DimensionError(f"inconsistent shapes P{P.shape} R{R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.gamma}")
        if (P < 0).any() or np.abs(P.sum(-1) - 1.0).max() > STOCH_TOL:
            raise ValueError("transition rows must be probability vectors")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.R).max())


# A latent model has the same layout with codes as states.
LatentModel = TabularMDP


def reindex(phi) -> np.ndarray:
    """Relabel an abstraction map so its image is ``0..k-1`` (order of first use)."""
    phi = np.asarray(phi)
    if phi.ndim != 1:
        raise DimensionError("abstraction map must be a 1-D array of codes")
    _, first, inv = np.unique(phi, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


def n_codes(phi: np.ndarray) -> int:
    return int(phi.max()) + 1


def pushforward(mdp: TabularMDP, phi) -> np.ndarray:
    """``P^phi[s, a, c'] = sum over s' with phi(s') = c' of P[s, a, s']``."""
    phi = reindex(phi)
    if len(phi) != mdp.n_states:
        raise DimensionError("abstraction map length differs from the state count")
    onehot = np.eye(n_codes(phi))[phi]
    return mdp.P @ onehot


def preimage_weights(mdp: TabularMDP, phi, weighting: str = "uniform") -> np.ndarray:
    """Per-state weights normalised within each preimage."""
    phi = reindex(phi)
    if weighting == "uniform":
        w = np.ones(len(phi))
    elif weighting == "stationary":
        # stationary distribution of the uniform-random-action chain, smoothed so
        # that transient states keep positive mass
        T = mdp.P.mean(1)
        vals, vecs = np.linalg.eig(T.T)
        mu = np.abs(np.real(vecs[:, np.argmin(np.abs(vals - 1.0))]))
        w = mu / mu.sum() + 1e-12
    else:
        raise ConfigError(f"unknown preimage weighting {weighting!r}")
    totals = np.bincount(phi, weights=w)
    return w / totals[phi]


def latent_markov(mdp: TabularMDP, phi, weighting: str = "uniform") -> LatentModel:
    """Markov approximation on codes via weighted averages within preimages."""
    phi = reindex(phi)
    push = pushforward(mdp, phi)
    w = preimage_weights(mdp, phi, weighting)
    k = n_codes(phi)
    agg = np.zeros((k, len(phi)))
    agg[phi, np.arange(len(phi))] = w
    # weights sum to one per preimage, so rows stay stochastic without
    # renormalising (which would break exactness for injective maps)
    P = np.einsum("cs,sad->cad", agg, push)
    R = agg @ mdp.R
    return LatentModel(P, R, mdp.gamma)


@dataclass(frozen=True)
class EpsilonReport:
    abs_P: float
    abs_R: float
    model_P: float
    model_R: float
    task_P: float
    task_R: float
    gamma: float
    r_max: float

    @property
    def bound(self) -> float:
        return sim_bound(self.abs_R + self.model_R + self.task_R,
                         self.abs_P + self.model_P + self.task_P, self.gamma, self.r_max)

    def as_dict(self) -> dict[str, float]:
        return {"eps_abs_P": self.abs_P, "eps_abs_R": self.abs_R, "eps_model_P": self.model_P,
                "eps_model_R": self.model_R, "eps_task_P": self.task_P, "eps_task_R": self.task_R}


def sim_bound(eps_r: float, eps_p: float, gamma: float, r_max: float) -> float:
    """``eps_r / (1 - g) + g * r_max * eps_p / (1 - g)**2``."""
    return eps_r / (1.0 - gamma) + gamma * r_max * eps_p / (1.0 - gamma) ** 2


def _kernel_gap(P1: np.ndarray, P2: np.ndarray) -> float:
    return float(np.abs(P1 - P2).sum(-1).max())


def _reward_gap(R1: np.ndarray, R2: np.ndarray) -> float:
    return float(np.abs(R1 - R2).max())


def epsilons(
    mdp: TabularMDP,
    phi,
    model_task: LatentModel,
    model_z: LatentModel,
    weighting: str = "uniform",
) -> EpsilonReport:
    """Exact sups of the abstraction, model and task-inference error terms.

    ``model_task`` is the learned latent model conditioned on the true task and
    ``model_z`` the same model conditioned on an inferred representation.
    """
    phi = reindex(phi)
    bar = latent_markov(mdp, phi, weighting)
    for m in (model_task, model_z):
        if m.P.shape != bar.P.shape:
            raise DimensionError(f"latent model shape {m.P.shape} differs from {bar.P.shape}")
    push = pushforward(mdp, phi)
    r_max = max(mdp.r_max, bar.r_max, model_task.r_max, model_z.r_max)
    return EpsilonReport(
        abs_P=_kernel_gap(push, bar.P[phi]),
        abs_R=_reward_gap(mdp.R, bar.R[phi]),
        model_P=_kernel_gap(model_task.P, bar.P),
        model_R=_reward_gap(model_task.R, bar.R),
        task_P=_kernel_gap(model_z.P, model_task.P),
        task_R=_reward_gap(model_z.R, model_task.R),
        gamma=mdp.gamma,
        r_max=r_max,
    )


def _check_policy(policy: np.ndarray, n: int, m: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (n, m):
        raise DimensionError(f"policy shape {policy.shape} != {(n, m)}")
    if (policy < 0).any() or np.abs(policy.sum(-1) - 1.0).max() > 1e-9:
        raise ValueError("policy rows must be probability vectors")
    return policy


def policy_value(mdp: TabularMDP, policy) -> np.ndarray:
    """Solve ``V = r_pi + gamma P_pi V`` directly."""
    if not 0.0 <= mdp.gamma < 1.0:
        raise ConfigError(f"discount must lie in [0, 1), got {mdp.gamma}")
    pi = _check_policy(policy, mdp.n_states, mdp.n_actions)
    r_pi = (pi * mdp.R).sum(-1)
    P_pi = np.einsum("sa,sad->sd", pi, mdp.P)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    V = np.linalg.solve(A, r_pi)
    # one step of iterative refinement keeps the residual at round-off level
    V += np.linalg.solve(A, r_pi - A @ V)
    return V


def lift_policy(policy, phi) -> np.ndarray:
    """State policy that acts on the code of each state."""
    return np.asarray(policy, dtype=np.float64)[reindex(phi)]


@dataclass(frozen=True)
class Certificate:
    name: str
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + CERT_SLACK


def certify_bound(
    mdp: TabularMDP,
    phi,
    model_task: LatentModel,
    model_z: LatentModel,
    policy,
    weighting: str = "uniform",
) -> tuple[dict[str, Certificate], EpsilonReport]:
    """Measured value gaps against each bound for a fixed-representation latent policy.

    Returns certificates keyed by ``simulation`` (latent Markov vs learned,
    true task), ``abstraction`` (original vs latent Markov), ``inference``
    (learned with inferred vs true task), ``true_task`` (original vs learned,
    true task) and ``combined`` (original vs learned with inferred task).
    """
    phi = reindex(phi)
    eps = epsilons(mdp, phi, model_task, model_z, weighting)
    bar = latent_markov(mdp, phi, weighting)
    pi = _check_policy(policy, n_codes(phi), mdp.n_actions)
    v_orig = policy_value(mdp, lift_policy(pi, phi))
    v_bar = policy_value(bar, pi)
    v_task = policy_value(model_task, pi)
    v_z = policy_value(model_z, pi)
    g, rm = eps.gamma, eps.r_max
    gap = lambda a, b: float(np.abs(a - b).max())
    certs = {
        "simulation": Certificate("simulation", gap(v_bar, v_task), sim_bound(eps.model_R, eps.model_P, g, rm)),
        "abstraction": Certificate("abstraction", gap(v_orig, v_bar[phi]), sim_bound(eps.abs_R, eps.abs_P, g, rm)),
        "inference": Certificate("inference", gap(v_z, v_task), sim_bound(eps.task_R, eps.task_P, g, rm)),
        "true_task": Certificate("true_task", gap(v_orig, v_task[phi]),
                                 sim_bound(eps.abs_R + eps.model_R, eps.abs_P + eps.model_P, g, rm)),
        "combined": Certificate("combined", gap(v_orig, v_z[phi]), eps.bound),
    }
    return certs, eps


# --- fuzz corpus ----------------------------------------------------------------------


def _simplex(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    x = rng.exponential(size=shape)
    # sparsify some rows so deterministic transitions also appear
    mask = rng.random(shape) < 0.3
    x = np.where(mask, 0.0, x)
    empty = x.sum(-1) == 0
    x[empty, 0] = 1.0
    return x / x.sum(-1, keepdims=True)


def _perturb(rng: np.random.Generator, m: LatentModel, scale: float) -> LatentModel:
    mix = rng.uniform(0.0, scale)
    P = (1.0 - mix) * m.P + mix * _simplex(rng, m.P.shape)
    P /= P.sum(-1, keepdims=True)
    R = m.R + rng.uniform(-scale, scale, size=m.R.shape)
    return LatentModel(P, R, m.gamma)


@dataclass(frozen=True)
class FuzzInstance:
    mdp: TabularMDP
    phi: np.ndarray
    model_task: LatentModel
    model_z: LatentModel
    policy: np.ndarray


def random_instance(
    rng: np.random.Generator, max_states: int = 8, max_actions: int = 3, max_codes: int = 5,
) -> FuzzInstance:
    n = int(rng.integers(1, max_states + 1))
    m = int(rng.integers(1, max_actions + 1))
    k = int(rng.integers(1, min(n, max_codes) + 1))
    gamma = float(rng.uniform(0.0, 0.99))
    mdp = TabularMDP(_simplex(rng, (n, m, n)), rng.uniform(-1.0, 1.0, size=(n, m)), gamma)
    phi = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    phi = reindex(rng.permutation(phi))
    bar = latent_markov(mdp, phi)
    model_task = _perturb(rng, bar, float(rng.uniform(0.0, 0.5)))
    model_z = _perturb(rng, model_task, float(rng.uniform(0.0, 0.5)))
    policy = _simplex(rng, (k, m))
    return FuzzInstance(mdp, phi, model_task, model_z, policy)


CERT_NAMES = ("simulation", "abstraction", "inference", "true_task", "combined")
CERT_HEADER = (
    ["instance", "n_states", "n_actions", "n_codes", "gamma", "r_max"]
    + [f"{n}_{f}" for n in CERT_NAMES for f in ("lhs", "rhs")]
    + ["eps_abs_P", "eps_abs_R", "eps_model_P", "eps_model_R", "eps_task_P", "eps_task_R", "LHS", "RHS", "pass"]
)


def fuzz_rows(instances: int, seed: int = 0, max_states: int = 8, max_actions: int = 3,
              max_codes: int = 5) -> list[list]:
    """Certify ``instances`` random problems; one CSV row per instance."""
    if instances < 0 or min(max_states, max_actions, max_codes) < 1:
        raise ConfigError("instance count must be >= 0 and size limits >= 1")
    rows = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        inst = random_instance(rng, max_states, max_actions, max_codes)
        certs, eps = certify_bound(inst.mdp, inst.phi, inst.model_task, inst.model_z, inst.policy)
        ok = all(c.passed for c in certs.values())
        rows.append(
            [i, inst.mdp.n_states, inst.mdp.n_actions, n_codes(inst.phi), inst.mdp.gamma, eps.r_max]
            + [v for n in CERT_NAMES for v in (certs[n].lhs, certs[n].rhs)]
            + list(eps.as_dict().values())
            + [certs["combined"].lhs, certs["combined"].rhs, int(ok)]
        )
    return rows
