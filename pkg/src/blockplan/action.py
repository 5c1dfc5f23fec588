"""Inverse dynamics: regress the action linking two consecutive observations.

The network sees the raw observation pair and predicts [dx, dy, grip]; a
deterministic post-process clamps the deltas to the action box and snaps the
grip command to open/closed, so every emitted action is legal by
construction. The raw (pre-legalization) output doubles as a fixed-variance
Gaussian log-likelihood surrogate for ranking candidate visual plans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import GRIP_THRESHOLD, MAX_DELTA, Action, InvRecord
from .nn import EmptyDataset, Network

INV_HIDDEN = [256, 128]


@dataclass
class InvDynNet:
    net: Network
    obs_dim: int
    epoch_losses: list[float] = field(default_factory=list)

    def predict_raw(self, x_t: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        return nn.forward(self.net, np.concatenate([x_t, x_next]))

    @staticmethod
    def legalize(raw: np.ndarray) -> np.ndarray:
        out = raw.copy()
        out[0:2] = np.clip(out[0:2], -MAX_DELTA, MAX_DELTA)
        out[2] = 1.0 if out[2] >= GRIP_THRESHOLD else 0.0
        return out


def train_inverse(
    records: list[InvRecord],
    epochs: int = 20,
    lr: float = 1e-4,
    batch: int = 256,
    seed: int = 0,
) -> InvDynNet:
    """Mean-squared-error regression on (x_t, x_{t+1}) -> a_t triples
    unpacked from the trajectory corpus."""
    if not records:
        raise EmptyDataset("no inverse-dynamics records")
    xs, ys = [], []
    for r in records:
        for t in range(r.acts.shape[0]):
            xs.append(np.concatenate([r.obs[t], r.obs[t + 1]]))
            ys.append(r.acts[t])
    x = np.stack(xs)
    y = np.stack(ys)
    obs_dim = records[0].obs.shape[1]

    rng = np.random.default_rng(seed)
    net = Network.init([2 * obs_dim, *INV_HIDDEN, y.shape[1]], seed=seed)
    opt = nn.AdamWState.for_network(net, lr=lr)
    n = x.shape[0]
    batch = min(batch, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            pred = nn.forward(net, x[idx])
            resid = pred - y[idx]
            epoch_loss += float((resid**2).mean(axis=1).sum())
            grads, _ = nn.backward(net, x[idx], 2.0 * resid / (idx.size * y.shape[1]))
            nn.adamw_step(opt, net.parameters(), nn.network_grads(net, grads))
        losses.append(epoch_loss / n)
    return InvDynNet(net=net, obs_dim=obs_dim, epoch_losses=losses)


def predict_action(inv: InvDynNet, x_t: np.ndarray, x_next: np.ndarray) -> Action:
    """Forward pass plus legalization, yielding an executable Action."""
    raw = inv.predict_raw(x_t, x_next)
    legal = inv.legalize(raw)
    return Action(float(legal[0]), float(legal[1]), float(legal[2]))
