"""Independent oracles for the test suite.

Three families: exact noise-prediction targets for diagonal-Gaussian data
(closed form), exhaustive simulate-and-measure subgoal validity (checked
against the rule-based environment logic), and an analytic density-ratio
problem for validating classifier-based ratio estimation.

None of these call the code paths they are used to check; the subgoal oracle
drives the expert through the real dynamics but decides validity purely by
measuring remaining work before and after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env
from .env import Color, EnvParams, GoalSpec, SubgoalSpec, WorldState


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    var: np.ndarray  # per-dimension variance (diagonal covariance)

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.var) <= 0):
            raise ValueError("variances must be positive")


def gaussian_marginal(spec: GaussianSpec, sched, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and per-dim variance of the step-k noised marginal of N(mu, Sigma)."""
    ab = sched.alpha_bar[k - 1]
    return np.sqrt(ab) * spec.mean, ab * spec.var + (1.0 - ab)


def gaussian_optimal_eps(spec: GaussianSpec, sched, x: np.ndarray, k: int) -> np.ndarray:
    """Noise prediction that minimizes the denoising loss for Gaussian data.

    For data N(mu, Sigma) the k-marginal is N(sqrt(ab)*mu, ab*Sigma+(1-ab)I)
    and the optimal prediction is
        eps*(x, k) = sqrt(1-ab) * (ab*Sigma + (1-ab)I)^{-1} (x - sqrt(ab)*mu).
    """
    ab = sched.alpha_bar[k - 1]
    marginal_var = ab * spec.var + (1.0 - ab)
    return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * spec.mean) / marginal_var


# ---------------------------------------------------------------------------
# exhaustive subgoal oracle
# ---------------------------------------------------------------------------

def grammar_subgoals() -> list[SubgoalSpec]:
    """Every expressible subgoal: paint toward any goal color, pack any color."""
    out = [SubgoalSpec.paint(c) for c in env.PAINT_TARGET_COLORS]
    out.extend(SubgoalSpec.pack(c) for c in Color)
    return out


def _remaining_work(state: WorldState, goal: GoalSpec) -> int:
    """Paints still needed plus packs still needed, counted from scratch."""
    total = {c: 0 for c in Color}
    packed = {c: 0 for c in Color}
    for b in state.blocks:
        total[b.color] += 1
        if b.in_box:
            packed[b.color] += 1
    paints = sum(max(0, goal.count(c) - total[c]) for c in set(goal.target_colors))
    packs = sum(max(0, goal.count(c) - packed[c]) for c in set(goal.target_colors))
    return paints + packs


def bruteforce_next_subgoals(
    state: WorldState, goal: GoalSpec, params: EnvParams = env.DEFAULT_PARAMS
) -> set[SubgoalSpec]:
    """Try every grammar subgoal through the real dynamics; keep the ones
    whose completed rollout strictly reduces remaining work."""
    before = _remaining_work(state, goal)
    out: set[SubgoalSpec] = set()
    for w in grammar_subgoals():
        try:
            traj = env.expert_rollout(state, w, params)
        except env.SubgoalInfeasible:
            continue
        after_state = env.final_state(state, traj, params)
        if _remaining_work(after_state, goal) < before:
            out.add(w)
    return out


# ---------------------------------------------------------------------------
# density-ratio ground truth
# ---------------------------------------------------------------------------

RATIO_CLASSES = 3

_RATIO_MEANS = np.array([[0.0, 2.0], [-1.8, -1.0], [1.8, -1.0]])
_RATIO_VARS = np.array([[1.0, 0.6], [0.7, 1.1], [0.9, 0.8]])


def _log_normal_pdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var).sum(axis=-1)


def density_ratio_oracle(
    n_samples: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labeled draws from three known 2-D Gaussians plus analytic log-ratios.

    Classes are sampled uniformly, so the mixture marginal is the equal-weight
    average and log p(x|j) - log p_mix(x) is exactly computable. Returns
    (samples (n,2), labels (n,), true_log_ratios (n,3)).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    labels = rng.integers(0, RATIO_CLASSES, size=n_samples)
    x = _RATIO_MEANS[labels] + rng.standard_normal((n_samples, 2)) * np.sqrt(
        _RATIO_VARS[labels]
    )
    return x, labels, true_log_ratios(x)


def true_log_ratios(x: np.ndarray) -> np.ndarray:
    """log p(x|j) - log p_mix(x) for each class j under the oracle mixture."""
    x = np.atleast_2d(x)
    logp = np.stack(
        [_log_normal_pdf(x, _RATIO_MEANS[j], _RATIO_VARS[j]) for j in range(RATIO_CLASSES)],
        axis=1,
    )
    log_mix = _logsumexp(logp, axis=1) - np.log(RATIO_CLASSES)
    return logp - log_mix[:, None]


def recover_log_ratios(logits: np.ndarray) -> np.ndarray:
    """Log-ratio estimates implied by classifier logits under uniform priors:
    log p(j|x) + log M = logit_j - logsumexp(logits) + log M."""
    logits = np.atleast_2d(logits)
    return logits - _logsumexp(logits, axis=1)[:, None] + np.log(RATIO_CLASSES)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)
