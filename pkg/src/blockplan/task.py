"""Task planning: subgoal candidates and density-ratio grounding.

Candidates come from a deterministic template proposer (paint and pack for
every goal color - six proposals per three-color goal, some of them
deliberately infeasible) or from an external chat-completion endpoint that
speaks a one-line-per-subgoal grammar. A multi-class classifier trained on
(observation, goal, candidates, executed-index) records grounds the choice:
its logits estimate the log density ratio p(x | w, g) / p(x | g) for each
candidate, and the argmax picks the subgoal consistent with what the
observation shows still needs doing.
"""

from __future__ import annotations

import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from . import nn, visual
from .env import (
    GOAL_DIM,
    SUBGOAL_DIM,
    ClassifyRecord,
    Color,
    GoalSpec,
    SubgoalSpec,
    Verb,
)
from .nn import EmptyDataset, Network

logger = logging.getLogger(__name__)

M_CANDIDATES = 6
GROUNDING_HIDDEN = [512, 256, 128]


class ParseFailure(ValueError):
    """A proposal line did not match the subgoal grammar."""


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[SubgoalSpec, ...]
    goal: GoalSpec

    def __post_init__(self) -> None:
        if len(self.candidates) != M_CANDIDATES:
            raise ValueError(f"expected {M_CANDIDATES} candidates")
        if len(set(self.candidates)) != M_CANDIDATES:
            raise ValueError("duplicate candidates")


def propose_candidates(goal: GoalSpec, rng: np.random.Generator) -> CandidateSet:
    """Deterministic proposer: paint and pack for each goal color, in an
    rng-shuffled order. Pink yields an unpaintable paint proposal - exactly
    the kind of ungrounded suggestion the classifier exists to reject."""
    cands = []
    for c in sorted(set(goal.target_colors), key=int):
        cands.append(SubgoalSpec.paint(c))
        cands.append(SubgoalSpec.pack(c))
    order = rng.permutation(len(cands))
    return CandidateSet(tuple(cands[i] for i in order), goal)


# ---------------------------------------------------------------------------
# subgoal text grammar and the external proposer
# ---------------------------------------------------------------------------

_COLOR_NAMES = {c.name.lower(): c for c in Color}
_PAINT_RE = re.compile(r"^paint a white block (\w+)$")
_PACK_RE = re.compile(r"^put the (\w+) block in the box$")


def render_subgoal(w: SubgoalSpec) -> str:
    if w.verb is Verb.PAINT:
        return f"paint a white block {w.target_color.name.lower()}"
    return f"put the {w.block_color.name.lower()} block in the box"


def render_goal(goal: GoalSpec) -> str:
    names = [c.name.lower() for c in goal.target_colors]
    return f"pack one {names[0]}, one {names[1]} and one {names[2]} block"


def parse_subgoal(line: str) -> SubgoalSpec:
    line = line.strip().lower()
    if m := _PAINT_RE.match(line):
        color = _COLOR_NAMES.get(m.group(1))
        if color is None:
            raise ParseFailure(f"unknown color in {line!r}")
        return SubgoalSpec.paint(color)
    if m := _PACK_RE.match(line):
        color = _COLOR_NAMES.get(m.group(1))
        if color is None:
            raise ParseFailure(f"unknown color in {line!r}")
        return SubgoalSpec.pack(color)
    raise ParseFailure(f"line {line!r} does not match the subgoal grammar")


_DEFAULT_PROMPT = """List the {m} pick-and-place steps worth considering for the goal.
Write one step per line, nothing else. Examples:

goal: pack one red, one green and one blue block
paint a white block red
put the red block in the box
paint a white block green
put the green block in the box
paint a white block blue
put the blue block in the box

goal: {goal}
"""


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str = "http://127.0.0.1:8080/complete"
    prompt_template: str = _DEFAULT_PROMPT
    timeout_ms: int = 2000
    enabled: bool = False


def llm_propose(
    goal: GoalSpec, cfg: LlmClientConfig, rng: np.random.Generator
) -> CandidateSet:
    """Ask the configured endpoint for candidate subgoals.

    The request body is the rendered prompt; the response must be plain text
    with one grammar line per subgoal. Any failure - disabled client,
    timeout, malformed line, wrong count - falls back to the template
    proposer, so a candidate set is always returned.
    """
    if not cfg.enabled:
        return propose_candidates(goal, rng)
    prompt = cfg.prompt_template.format(m=M_CANDIDATES, goal=render_goal(goal))
    try:
        req = urllib.request.Request(
            cfg.endpoint, data=prompt.encode("utf-8"), method="POST"
        )
        with urllib.request.urlopen(req, timeout=cfg.timeout_ms / 1000.0) as resp:
            body = resp.read().decode("utf-8")
        lines = [ln for ln in (s.strip() for s in body.splitlines()) if ln]
        cands = tuple(parse_subgoal(ln) for ln in lines)
        return CandidateSet(cands, goal)
    except (urllib.error.URLError, TimeoutError, OSError, ParseFailure, ValueError) as exc:
        logger.warning("subgoal proposer fallback (%s): %s", type(exc).__name__, exc)
        return propose_candidates(goal, rng)


# ---------------------------------------------------------------------------
# grounding classifier
# ---------------------------------------------------------------------------

@dataclass
class GroundingClassifier:
    net: Network
    obs_dim: int
    m: int = M_CANDIDATES
    epoch_losses: list[float] = field(default_factory=list)


def grounding_input_dim(obs_dim: int) -> int:
    return obs_dim + GOAL_DIM + M_CANDIDATES * SUBGOAL_DIM


def encode_grounding_input(
    obs: np.ndarray, goal: GoalSpec, candidates: tuple[SubgoalSpec, ...]
) -> np.ndarray:
    return np.concatenate(
        [obs, goal.encode()] + [w.encode() for w in candidates]
    )


def train_grounding(
    records: list[ClassifyRecord],
    epochs: int = 50,
    lr: float = 1e-3,
    weight_decay: float = 1e-6,
    batch: int = 256,
    seed: int = 0,
) -> GroundingClassifier:
    """Softmax cross-entropy over the M candidate slots.

    Candidate order is re-permuted every epoch (labels permuted along) so
    the classifier scores content rather than slot position. Training loss
    should shrink steadily; a rise over any 5-epoch window only warns.
    """
    if not records:
        raise EmptyDataset("no classification records")
    obs_dim = records[0].obs.shape[0]
    rng = np.random.default_rng(seed)
    net = Network.init(
        [grounding_input_dim(obs_dim), *GROUNDING_HIDDEN, M_CANDIDATES], seed=seed
    )
    opt = nn.AdamWState.for_network(net, lr=lr, weight_decay=weight_decay)

    base = np.stack([np.concatenate([r.obs, r.goal.encode()]) for r in records])
    cand_enc = np.stack([
        np.stack([w.encode() for w in r.candidates]) for r in records
    ])  # (n, M, SUBGOAL_DIM)
    labels = np.array([r.label for r in records])
    n = len(records)
    batch = min(batch, n)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            b = idx.size
            perms = np.stack([rng.permutation(M_CANDIDATES) for _ in range(b)])
            permuted = cand_enc[idx][np.arange(b)[:, None], perms]
            new_labels = np.argmax(perms == labels[idx][:, None], axis=1)
            inp = np.concatenate([base[idx], permuted.reshape(b, -1)], axis=1)
            logits = nn.forward(net, inp)
            loss, dlogits = nn.softmax_cross_entropy(logits, new_labels)
            epoch_loss += loss * b
            grads, _ = nn.backward(net, inp, dlogits)
            nn.adamw_step(opt, net.parameters(), nn.network_grads(net, grads))
        losses.append(epoch_loss / n)
        if epoch >= 5 and losses[-1] > losses[-6]:
            logger.warning(
                "grounding loss rose over epochs %d..%d (%.4f -> %.4f)",
                epoch - 5,
                epoch,
                losses[-6],
                losses[-1],
            )
    return GroundingClassifier(
        net=net, obs_dim=obs_dim, epoch_losses=losses
    )


def select_subgoal(
    clf: GroundingClassifier, obs: np.ndarray, cands: CandidateSet
) -> tuple[int, np.ndarray]:
    """Argmax over candidate logits; ties break toward the lowest index."""
    logits = nn.forward(
        clf.net, encode_grounding_input(obs, cands.goal, cands.candidates)
    )
    return int(np.argmax(logits)), logits


def grounding_accuracy(clf: GroundingClassifier, records: list[ClassifyRecord]) -> float:
    hits = 0
    for r in records:
        idx, _ = select_subgoal(clf, r.obs, CandidateSet(r.candidates, r.goal))
        hits += int(idx == r.label)
    return hits / len(records)


# ---------------------------------------------------------------------------
# variational-bound candidate scoring (the weaker alternative selector)
# ---------------------------------------------------------------------------

def elbo_select(
    den: visual.Denoiser,
    obs: np.ndarray,
    cands: CandidateSet,
    sched: visual.NoiseSchedule,
    n_terms: int = 16,
    rng: np.random.Generator | None = None,
) -> int:
    """Score each candidate by the denoising loss of one conditional sample.

    For every candidate w: draw one plan conditioned on (obs, w) without
    feasibility steering, then Monte-Carlo the surrogate loss of that plan
    under the same conditioning. Smallest loss = largest evidence bound,
    since the schedule-constant terms cancel across candidates.
    """
    if n_terms < 1:
        raise visual.InsufficientSamples("need at least one Monte-Carlo term")
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = visual.GuidanceConfig(omega=1.0, omega_prime=0.0)
    best_idx, best_loss = 0, np.inf
    for i, w in enumerate(cands.candidates):
        w_vec = w.encode()
        plan = visual.sample_plan(den, None, obs, w_vec, cfg, sched, rng)
        loss = visual.denoising_loss(
            den, visual.scale_obs(plan.reshape(-1)), obs, w_vec, sched, n_terms, rng
        )
        if loss < best_loss:
            best_idx, best_loss = i, loss
    return best_idx
