"""Trajectory diffusion with dual guidance.

A DDPM over flattened observation trajectories (T x obs_dim), conditioned on
the segment's first observation and a 16-dim conditioning vector that is
either a subgoal encoding, a goal-level token (for the flat baseline), or a
null token (for the unconditional branch). Sampling combines classifier-free
guidance on the conditioning vector with gradient steering from a binary
feasibility classifier trained to spot frame-order violations:

    eps_hat = eps(tau,x,k) + omega * (eps(tau,x,w,k) - eps(tau,x,k))
              - omega' * grad_tau log g(1|tau)

Trajectories are mapped to [-1, 1] internally (obs components live in [0,1]);
everything the sampler touches - tau_k, eps, classifier inputs - lives in
that scaled space, and plans are mapped back before they leave this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import GOAL_DIM, SUBGOAL_DIM, GoalSpec, VideoRecord
from .nn import EmptyDataset, Network, ShapeMismatch

K_EMBED_DIM = 16
DENOISER_HIDDEN = [512, 512]
FEASIBILITY_HIDDEN = [256, 128]


class InvalidScheduleParams(ValueError):
    """Schedule construction arguments violate the schedule contract."""


class TooShort(ValueError):
    """Trajectory has too few frames for neighbor swaps."""


class EmptyPlanSet(ValueError):
    """Ranking requires at least one plan."""


class InsufficientSamples(ValueError):
    """Monte-Carlo estimate requested with zero terms."""


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar arrays, index 0 holding step k=1.

    beta_tilde is the reverse-posterior variance
    beta_k * (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) with alpha_bar_0 = 1.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    beta_tilde: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidScheduleParams("beta must be a non-empty 1-D array")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise InvalidScheduleParams("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) <= 0.0) and beta.size > 1:
            raise InvalidScheduleParams("beta must be strictly increasing")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = beta * (1.0 - prev) / (1.0 - alpha_bar)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "beta_tilde", beta_tilde)

    @property
    def K(self) -> int:
        return int(self.beta.size)

    def meta(self) -> dict:
        """Compatibility fingerprint stored in checkpoint headers."""
        return {
            "K": self.K,
            "beta_1": float(self.beta[0]),
            "beta_K": float(self.beta[-1]),
        }


def build_schedule(K: int = 100, beta_1: float = 1e-4, beta_K: float = 0.0975) -> NoiseSchedule:
    """Linear beta schedule; rejects parameters that leave too much signal
    at the terminal step (alpha_bar_K must fall below 0.05).

    The default range is the 1000-step convention compressed to 100 steps;
    it leaves alpha_bar_100 ~= 0.0064."""
    if K < 2:
        raise InvalidScheduleParams("K must be >= 2")
    if not (0.0 < beta_1 < beta_K < 1.0):
        raise InvalidScheduleParams("need 0 < beta_1 < beta_K < 1")
    sched = NoiseSchedule(np.linspace(beta_1, beta_K, K))
    if sched.alpha_bar[-1] >= 0.05:
        raise InvalidScheduleParams(
            f"terminal alpha_bar {sched.alpha_bar[-1]:.4f} >= 0.05; "
            "increase K or the beta range"
        )
    return sched


def q_sample(tau0: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_k) tau0 + sqrt(1-ab_k) eps."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"k={k} outside schedule range 1..{sched.K}")
    eps = np.asarray(eps)
    if eps.shape != np.shape(tau0):
        raise ShapeMismatch("eps must be shaped like tau0")
    ab = sched.alpha_bar[k - 1]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def denoise_step(
    sched: NoiseSchedule,
    tau_k: np.ndarray,
    eps_hat: np.ndarray,
    k: int,
    z: np.ndarray | None,
) -> np.ndarray:
    """One ancestral reverse step; the k=1 step never adds noise."""
    a = sched.alpha[k - 1]
    ab = sched.alpha_bar[k - 1]
    mean = (tau_k - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if k == 1 or z is None:
        return mean
    return mean + np.sqrt(sched.beta_tilde[k - 1]) * z


def k_embedding(k: int | np.ndarray, dim: int = K_EMBED_DIM) -> np.ndarray:
    """Sinusoidal step embedding; k may be an int or an int array."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    phase = np.multiply.outer(np.asarray(k, dtype=np.float64), freqs)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def scale_obs(v: np.ndarray) -> np.ndarray:
    return 2.0 * v - 1.0


def unscale_obs(s: np.ndarray) -> np.ndarray:
    return (s + 1.0) / 2.0


def goal_token(goal: GoalSpec) -> np.ndarray:
    """Goal-level conditioning vector for the flat ablation: the goal count
    vector placed in the block-color slots, verb slots left zero (outside
    the subgoal code space, so the two vocabularies cannot collide)."""
    v = np.zeros(SUBGOAL_DIM)
    v[2 : 2 + GOAL_DIM] = goal.encode()
    return v


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass
class Denoiser:
    net: Network
    t_len: int
    obs_dim: int
    sched_meta: dict
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def traj_dim(self) -> int:
        return self.t_len * self.obs_dim

    def _input_rows(
        self,
        tau: np.ndarray,
        x: np.ndarray,
        conds: list[np.ndarray | None],
        k: int,
    ) -> np.ndarray:
        rows = np.empty((len(conds), self.net.in_dim))
        base = np.concatenate([tau, k_embedding(k), scale_obs(x)])
        for i, w in enumerate(conds):
            if w is None:
                rows[i] = np.concatenate([base, np.zeros(SUBGOAL_DIM), [1.0]])
            else:
                rows[i] = np.concatenate([base, w, [0.0]])
        return rows

    def predict(
        self, tau: np.ndarray, x: np.ndarray, w: np.ndarray | None, k: int
    ) -> np.ndarray:
        """Predicted noise for a scaled flat trajectory; w=None selects the
        null-token (unconditional) branch."""
        return nn.forward(self.net, self._input_rows(tau, x, [w], k))[0]

    def predict_pair(
        self, tau: np.ndarray, x: np.ndarray, w: np.ndarray, k: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Conditional and unconditional predictions in one batched pass."""
        out = nn.forward(self.net, self._input_rows(tau, x, [w, None], k))
        return out[0], out[1]


def denoiser_input_dim(t_len: int, obs_dim: int) -> int:
    return t_len * obs_dim + K_EMBED_DIM + obs_dim + SUBGOAL_DIM + 1


def train_denoiser(
    videos: list[VideoRecord],
    sched: NoiseSchedule,
    epochs: int,
    lr: float = 1e-4,
    batch: int = 64,
    drop_prob: float = 0.1,
    flat_share: float = 0.25,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> Denoiser:
    """Fit the noise model on expert segments.

    Each sample draws a uniform step k and fresh Gaussian noise; the
    conditioning vector is dropped to the null token with `drop_prob`
    (training the unconditional branch) and replaced by the goal token with
    `flat_share` (training the flat-baseline vocabulary). Per-sample loss is
    the squared norm of the noise residual.
    """
    if not videos:
        raise EmptyDataset("no video records")
    t_len, obs_dim = videos[0].obs.shape
    rng = np.random.default_rng(seed)
    net = Network.init(
        [denoiser_input_dim(t_len, obs_dim), *DENOISER_HIDDEN, t_len * obs_dim],
        seed=seed,
    )
    opt = nn.AdamWState.for_network(net, lr=lr, weight_decay=weight_decay)

    tau0 = np.stack([scale_obs(v.obs.reshape(-1)) for v in videos])
    x0 = np.stack([scale_obs(v.obs[0]) for v in videos])
    w_enc = np.stack([v.subgoal.encode() for v in videos])
    g_tok = np.stack([goal_token(v.goal) for v in videos])
    n = len(videos)
    traj_dim = t_len * obs_dim
    batch = min(batch, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            b = idx.size
            ks = rng.integers(1, sched.K + 1, size=b)
            eps = rng.standard_normal((b, traj_dim))
            ab = sched.alpha_bar[ks - 1][:, None]
            tau_k = np.sqrt(ab) * tau0[idx] + np.sqrt(1.0 - ab) * eps

            u = rng.random(b)
            cond = w_enc[idx].copy()
            null = np.zeros((b, 1))
            flat_rows = (u >= drop_prob) & (u < drop_prob + flat_share)
            cond[flat_rows] = g_tok[idx][flat_rows]
            null_rows = u < drop_prob
            cond[null_rows] = 0.0
            null[null_rows] = 1.0

            inp = np.concatenate([tau_k, k_embedding(ks), x0[idx], cond, null], axis=1)
            pred = nn.forward(net, inp)
            resid = pred - eps
            epoch_loss += float((resid**2).sum())
            grads, _ = nn.backward(net, inp, 2.0 * resid / b)
            nn.adamw_step(opt, net.parameters(), nn.network_grads(net, grads))
        losses.append(epoch_loss / n)
    return Denoiser(
        net=net,
        t_len=t_len,
        obs_dim=obs_dim,
        sched_meta=sched.meta(),
        epoch_losses=losses,
    )


def denoising_loss(
    den: Denoiser,
    tau0_scaled: np.ndarray,
    x: np.ndarray,
    w: np.ndarray | None,
    sched: NoiseSchedule,
    n_terms: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo estimate of the surrogate denoising loss for one
    trajectory under the given conditioning."""
    if n_terms < 1:
        raise InsufficientSamples("need at least one Monte-Carlo term")
    total = 0.0
    for _ in range(n_terms):
        k = int(rng.integers(1, sched.K + 1))
        eps = rng.standard_normal(tau0_scaled.size)
        tau_k = q_sample(tau0_scaled, k, eps, sched)
        pred = den.predict(tau_k, x, w, k)
        total += float(((pred - eps) ** 2).sum())
    return total / n_terms


# ---------------------------------------------------------------------------
# feasibility classifier
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityClassifier:
    net: Network
    epoch_losses: list[float] = field(default_factory=list)

    def logit(self, tau_scaled: np.ndarray) -> float:
        return float(nn.forward(self.net, tau_scaled)[0])

    def prob(self, tau_scaled: np.ndarray) -> float:
        return float(nn.sigmoid(self.logit(tau_scaled)))

    def grad_log_prob(self, tau_scaled: np.ndarray) -> np.ndarray:
        """grad_tau log sigmoid(logit) = (1 - sigmoid(logit)) * grad_tau logit."""
        logit = self.logit(tau_scaled)
        _, dlogit = nn.backward(self.net, tau_scaled, np.ones(1))
        return (1.0 - float(nn.sigmoid(logit))) * dlogit


def make_negatives(obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle ceil(0.1*T) frames each with a random adjacent neighbor.

    Swaps are applied sequentially, so the output is always a permutation of
    the input frames; constant trajectories come back unchanged and must be
    filtered by the caller.
    """
    t_len = obs.shape[0]
    if t_len < 3:
        raise TooShort("need at least 3 frames to swap neighbors")
    out = obs.copy()
    n_swaps = math.ceil(0.1 * t_len)
    for i in rng.choice(t_len, size=n_swaps, replace=False):
        if i == 0:
            j = 1
        elif i == t_len - 1:
            j = t_len - 2
        else:
            j = i + (1 if rng.random() < 0.5 else -1)
        out[[i, j]] = out[[j, i]]
    return out


def train_feasibility(
    videos: list[VideoRecord],
    rng: np.random.Generator,
    sched: NoiseSchedule | None = None,
    epochs: int = 30,
    lr: float = 1e-4,
    batch: int = 256,
    noise_aug_prob: float = 0.5,
) -> FeasibilityClassifier:
    """Binary cross-entropy on intact (label 1) vs frame-shuffled (label 0)
    trajectories, balanced 1:1.

    When a schedule is given, inputs are sometimes replaced by their
    q_sample-noised versions at low noise (alpha_bar >= 0.9) so the
    classifier stays usable on the noisy trajectories it sees during guided
    sampling.
    """
    if not videos:
        raise EmptyDataset("no video records")
    t_len, obs_dim = videos[0].obs.shape
    pos, neg = [], []
    for v in videos:
        shuffled = make_negatives(v.obs, rng)
        if np.array_equal(shuffled, v.obs):
            continue  # constant trajectory: the swap is invisible
        pos.append(scale_obs(v.obs.reshape(-1)))
        neg.append(scale_obs(shuffled.reshape(-1)))
    if not pos:
        raise EmptyDataset("all trajectories were constant")
    x = np.stack(pos + neg)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])

    low_noise_ks = (
        np.where(sched.alpha_bar >= 0.9)[0] + 1 if sched is not None else np.array([], int)
    )
    net = Network.init(
        [t_len * obs_dim, *FEASIBILITY_HIDDEN, 1],
        seed=int(rng.integers(0, 2**31)),
    )
    opt = nn.AdamWState.for_network(net, lr=lr)
    n = x.shape[0]
    batch = min(batch, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb = x[idx]
            if low_noise_ks.size:
                noisy = rng.random(idx.size) < noise_aug_prob
                if noisy.any():
                    xb = xb.copy()
                    ks = rng.choice(low_noise_ks, size=int(noisy.sum()))
                    ab = sched.alpha_bar[ks - 1][:, None]
                    eps = rng.standard_normal((int(noisy.sum()), xb.shape[1]))
                    xb[noisy] = np.sqrt(ab) * xb[noisy] + np.sqrt(1.0 - ab) * eps
            logits = nn.forward(net, xb)[:, 0]
            loss, dlogits = nn.bce_with_logits(logits, y[idx])
            epoch_loss += loss * idx.size
            grads, _ = nn.backward(net, xb, dlogits[:, None])
            nn.adamw_step(opt, net.parameters(), nn.network_grads(net, grads))
        losses.append(epoch_loss / n)
    return FeasibilityClassifier(net=net, epoch_losses=losses)


# ---------------------------------------------------------------------------
# guided sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 4.0
    omega_prime: float = 1.0
    # Apply grad log g exactly as stated (True) or scaled by sqrt(1-ab_k),
    # the classic classifier-guidance scaling (False).
    literal_gradient: bool = True

    def __post_init__(self) -> None:
        if self.omega < 0 or self.omega_prime < 0:
            raise ValueError("guidance scales must be non-negative")


def guided_noise(
    den: Denoiser,
    feas: FeasibilityClassifier | None,
    tau_k: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    k: int,
    cfg: GuidanceConfig,
    sched: NoiseSchedule | None = None,
) -> np.ndarray:
    """Classifier-free blend of conditional/unconditional noise predictions
    minus the feasibility-classifier gradient.

    omega in {0, 1} short-circuits to a single branch so the algebraic
    reductions hold exactly in floating point.
    """
    if cfg.omega == 1.0:
        eps = den.predict(tau_k, x, w, k)
    elif cfg.omega == 0.0:
        eps = den.predict(tau_k, x, None, k)
    else:
        cond, uncond = den.predict_pair(tau_k, x, w, k)
        eps = uncond + cfg.omega * (cond - uncond)
    if cfg.omega_prime > 0.0:
        if feas is None:
            raise ValueError("omega_prime > 0 requires a feasibility classifier")
        grad = feas.grad_log_prob(tau_k)
        if not cfg.literal_gradient:
            if sched is None:
                raise ValueError("scaled gradient needs the schedule")
            grad = grad * np.sqrt(1.0 - sched.alpha_bar[k - 1])
        eps = eps - cfg.omega_prime * grad
    return eps


def ancestral_sample(
    predict_fn,
    dim: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """K-step reverse chain from pure noise; predict_fn(tau_k, k) supplies
    the (already guided) noise estimate for each step."""
    tau = rng.standard_normal(dim)
    for k in range(sched.K, 0, -1):
        eps_hat = predict_fn(tau, k)
        z = rng.standard_normal(dim) if k > 1 else None
        tau = denoise_step(sched, tau, eps_hat, k, z)
    return tau


def sample_plan(
    den: Denoiser,
    feas: FeasibilityClassifier | None,
    x: np.ndarray,
    w: np.ndarray,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate one observation trajectory (t_len, obs_dim) for conditioning
    (x, w); the first frame is clamped to x as a hard constraint."""
    flat = ancestral_sample(
        lambda tau, k: guided_noise(den, feas, tau, x, w, k, cfg, sched),
        den.traj_dim,
        sched,
        rng,
    )
    frames = unscale_obs(flat.reshape(den.t_len, den.obs_dim))
    frames[0] = x
    return frames


def plan_action_score(plan: np.ndarray, inv) -> float:
    """Action-likelihood surrogate from the inverse model: the negated
    squared distance between each raw predicted action and its nearest
    admissible (clamped, grip-thresholded) action, summed over the plan."""
    score = 0.0
    for t in range(plan.shape[0] - 1):
        raw = inv.predict_raw(plan[t], plan[t + 1])
        legal = inv.legalize(raw)
        score -= float(((raw - legal) ** 2).sum())
    return score


def rank_by_action_likelihood(plans: list[np.ndarray], inv) -> np.ndarray:
    """Return the plan whose implied actions stay closest to admissible."""
    if not plans:
        raise EmptyPlanSet("no plans to rank")
    scores = [plan_action_score(p, inv) for p in plans]
    return plans[int(np.argmax(scores))]
