"""Deterministic pick-paint-pack block world.

A 2-D table in [0,1]^2 with one gripper, B blocks, four fixed paint bowls
along the bottom edge and a packing box near the top. White blocks become
the bowl's color when dropped inside it; any block dropped on the box is
packed. Tasks ask for three target colors to end up packed; pink cannot be
painted (there is no pink bowl), so pink targets are only satisfiable by
blocks that start out pink.

Everything here is pure and seeded: `step` returns a new state, the expert
is a waypoint script, and the three training corpora are derived from expert
rollouts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum, IntEnum

import numpy as np

from .nn import EmptyDataset


class GoalUnreachable(ValueError):
    """No sequence of paint/pack steps can complete the goal from here."""


class SubgoalInfeasible(ValueError):
    """No block satisfies the subgoal's source condition."""


class Color(IntEnum):
    WHITE = 0
    RED = 1
    GREEN = 2
    BLUE = 3
    YELLOW = 4
    PINK = 5
    BROWN = 6


N_COLORS = 7
BOWL_COLORS = (Color.RED, Color.GREEN, Color.BLUE, Color.YELLOW)
GOAL_COLORS = (Color.RED, Color.GREEN, Color.BLUE, Color.YELLOW, Color.PINK)
# Paint subgoals may *name* any goal color (an ungrounded proposer will happily
# suggest painting pink); only bowl colors are executable.
PAINT_TARGET_COLORS = GOAL_COLORS

BOWL_CENTERS = {
    Color.RED: np.array([0.2, 0.2]),
    Color.GREEN: np.array([0.4, 0.2]),
    Color.BLUE: np.array([0.6, 0.2]),
    Color.YELLOW: np.array([0.8, 0.2]),
}
BOX_CENTER = np.array([0.5, 0.8])
GRIPPER_HOME = np.array([0.5, 0.5])
# Blocks spawn in a central band clear of bowls and box.
SPAWN_LOW = np.array([0.28, 0.45])
SPAWN_HIGH = np.array([0.72, 0.62])
MIN_BLOCK_SEPARATION = 0.1

MAX_DELTA = 0.2
GRIP_THRESHOLD = 0.5


@dataclass(frozen=True)
class EnvParams:
    n_blocks: int = 3
    horizon: int = 12  # observations per expert segment
    pick_radius: float = 0.05
    bowl_radius: float = 0.08
    box_radius: float = 0.1

    def __post_init__(self) -> None:
        if not (self.pick_radius < self.bowl_radius < self.box_radius):
            raise ValueError("radii must satisfy pick < bowl < box")
        if self.horizon < 3:
            raise ValueError("horizon must allow pick, move and release")

    @property
    def obs_dim(self) -> int:
        return 3 + 10 * self.n_blocks


DEFAULT_PARAMS = EnvParams()


def one_hot(color: Color) -> np.ndarray:
    v = np.zeros(N_COLORS)
    v[int(color)] = 1.0
    return v


# ---------------------------------------------------------------------------
# state, actions, goals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    pos: tuple[float, float]
    color: Color
    in_box: bool = False


@dataclass(frozen=True)
class WorldState:
    gripper_pos: tuple[float, float]
    holding: int | None
    blocks: tuple[Block, ...]
    step_count: int = 0


@dataclass(frozen=True)
class Action:
    """Per-axis gripper delta plus the commanded next gripper state.

    Deltas are clamped to [-MAX_DELTA, MAX_DELTA] on construction and grip
    to [0, 1]; grip >= 0.5 means "closed on the next step".
    """

    dx: float
    dy: float
    grip: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "dx", float(np.clip(self.dx, -MAX_DELTA, MAX_DELTA)))
        object.__setattr__(self, "dy", float(np.clip(self.dy, -MAX_DELTA, MAX_DELTA)))
        object.__setattr__(self, "grip", float(np.clip(self.grip, 0.0, 1.0)))
        if not np.isfinite([self.dx, self.dy, self.grip]).all():
            raise ValueError("action components must be finite")

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.grip])

    @classmethod
    def from_vec(cls, v: np.ndarray) -> "Action":
        return cls(float(v[0]), float(v[1]), float(v[2]))


ACTION_DIM = 3


class Verb(Enum):
    PAINT = "paint"
    PACK = "pack"


@dataclass(frozen=True)
class SubgoalSpec:
    """One pick-and-place instruction: paint a white block, or pack one.

    Paint moves a white block into the `target_color` bowl; Pack moves a
    `block_color` block onto the box (target fixed to brown, the box color).
    """

    verb: Verb
    block_color: Color
    target_color: Color

    def __post_init__(self) -> None:
        if self.verb is Verb.PAINT:
            if self.block_color is not Color.WHITE:
                raise ValueError("paint subgoals start from a white block")
            if self.target_color not in PAINT_TARGET_COLORS:
                raise ValueError("paint target must be a goal color")
        else:
            if self.target_color is not Color.BROWN:
                raise ValueError("pack subgoals target the brown box")

    @classmethod
    def paint(cls, target: Color) -> "SubgoalSpec":
        return cls(Verb.PAINT, Color.WHITE, target)

    @classmethod
    def pack(cls, block_color: Color) -> "SubgoalSpec":
        return cls(Verb.PACK, block_color, Color.BROWN)

    def encode(self) -> np.ndarray:
        """One-hot triple [verb(2), block color(7), target color(7)]."""
        v = np.zeros(SUBGOAL_DIM)
        v[0 if self.verb is Verb.PAINT else 1] = 1.0
        v[2 + int(self.block_color)] = 1.0
        v[9 + int(self.target_color)] = 1.0
        return v


SUBGOAL_DIM = 2 + N_COLORS + N_COLORS  # 16
GOAL_DIM = N_COLORS  # 7


@dataclass(frozen=True)
class GoalSpec:
    """Multiset of three colors that must end up packed in the box."""

    target_colors: tuple[Color, Color, Color]

    def __post_init__(self) -> None:
        if len(self.target_colors) != 3:
            raise ValueError("goals name exactly three target colors")
        for c in self.target_colors:
            if c not in GOAL_COLORS:
                raise ValueError(f"{c.name} is not a valid goal color")

    def encode(self) -> np.ndarray:
        v = np.zeros(GOAL_DIM)
        for c in self.target_colors:
            v[int(c)] += 1.0
        return v

    def count(self, color: Color) -> int:
        return sum(1 for c in self.target_colors if c is color)


@dataclass(frozen=True)
class Task:
    goal: GoalSpec
    initial: WorldState
    seed: int

    def __post_init__(self) -> None:
        check_reachable(self.initial, self.goal)


@dataclass(frozen=True)
class TrajectoryPair:
    obs: np.ndarray  # (T, obs_dim)
    acts: np.ndarray  # (T-1, 3)
    subgoal: SubgoalSpec


# Training corpus records. Dvideo carries the episode goal as well so the
# same denoiser can be trained with goal-level conditioning for the flat
# (no-task-planning) baseline.
@dataclass(frozen=True)
class ClassifyRecord:
    obs: np.ndarray  # observation at segment start
    goal: GoalSpec
    candidates: tuple[SubgoalSpec, ...]
    label: int  # index of the executed subgoal


@dataclass(frozen=True)
class VideoRecord:
    obs: np.ndarray  # (T, obs_dim)
    subgoal: SubgoalSpec
    goal: GoalSpec


@dataclass(frozen=True)
class InvRecord:
    obs: np.ndarray  # (T, obs_dim)
    acts: np.ndarray  # (T-1, 3)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def reset(task: Task) -> WorldState:
    return replace(task.initial, step_count=0)


def step(state: WorldState, action: Action, params: EnvParams = DEFAULT_PARAMS) -> WorldState:
    """Apply one action: move, then resolve grip transitions at the new pose.

    Closing an open gripper picks the nearest block within pick_radius (ties
    broken by lowest index); opening drops the held block, painting it if it
    is white and lands in a bowl, packing it if it lands on the box.
    """
    gx = float(np.clip(state.gripper_pos[0] + action.dx, 0.0, 1.0))
    gy = float(np.clip(state.gripper_pos[1] + action.dy, 0.0, 1.0))
    gpos = (gx, gy)
    blocks = list(state.blocks)
    holding = state.holding

    if holding is not None:
        blocks[holding] = replace(blocks[holding], pos=gpos, in_box=False)

    want_closed = action.grip >= GRIP_THRESHOLD
    if holding is None and want_closed:
        best = None
        best_d = np.inf
        for i, b in enumerate(blocks):
            d = float(np.hypot(b.pos[0] - gx, b.pos[1] - gy))
            if d <= params.pick_radius and d < best_d:
                best, best_d = i, d
        if best is not None:
            holding = best
            blocks[best] = replace(blocks[best], pos=gpos, in_box=False)
    elif holding is not None and not want_closed:
        dropped = blocks[holding]
        color = dropped.color
        if color is Color.WHITE:
            for bowl_color, center in BOWL_CENTERS.items():
                if np.hypot(center[0] - gx, center[1] - gy) <= params.bowl_radius:
                    color = bowl_color
                    break
        in_box = bool(np.hypot(BOX_CENTER[0] - gx, BOX_CENTER[1] - gy) <= params.box_radius)
        blocks[holding] = replace(dropped, pos=gpos, color=color, in_box=in_box)
        holding = None

    return WorldState(
        gripper_pos=gpos,
        holding=holding,
        blocks=tuple(blocks),
        step_count=state.step_count + 1,
    )


def observe(state: WorldState, params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    """Fixed-layout encoding: gripper(2), holding flag(1), then per block
    pos(2) + color one-hot(7) + in-box flag(1)."""
    v = np.zeros(params.obs_dim)
    v[0:2] = state.gripper_pos
    v[2] = 0.0 if state.holding is None else 1.0
    for i, b in enumerate(state.blocks):
        off = 3 + 10 * i
        v[off : off + 2] = b.pos
        v[off + 2 + int(b.color)] = 1.0
        v[off + 9] = 1.0 if b.in_box else 0.0
    return v


def state_from_observation(vec: np.ndarray, params: EnvParams = DEFAULT_PARAMS) -> WorldState:
    """Inverse of `observe` (step_count is not encoded and restarts at 0).

    A held block is identified as the lowest-indexed block co-located with
    the gripper; expert segments always start with the gripper open, so the
    flag alone is unambiguous there.
    """
    if vec.shape != (params.obs_dim,):
        raise ValueError(f"expected observation of dim {params.obs_dim}")
    gpos = (float(vec[0]), float(vec[1]))
    blocks = []
    for i in range(params.n_blocks):
        off = 3 + 10 * i
        color = Color(int(np.argmax(vec[off + 2 : off + 9])))
        blocks.append(
            Block(
                pos=(float(vec[off]), float(vec[off + 1])),
                color=color,
                in_box=vec[off + 9] > 0.5,
            )
        )
    holding = None
    if vec[2] > 0.5:
        for i, b in enumerate(blocks):
            if b.pos == gpos:
                holding = i
                break
    return WorldState(gripper_pos=gpos, holding=holding, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# goal accounting
# ---------------------------------------------------------------------------

def _color_counts(state: WorldState) -> tuple[dict[Color, int], dict[Color, int]]:
    total: dict[Color, int] = {c: 0 for c in Color}
    packed: dict[Color, int] = {c: 0 for c in Color}
    for b in state.blocks:
        total[b.color] += 1
        if b.in_box:
            packed[b.color] += 1
    return total, packed


def goal_complete(state: WorldState, goal: GoalSpec) -> bool:
    _, packed = _color_counts(state)
    return all(packed[c] >= goal.count(c) for c in set(goal.target_colors))


def _is_source(state: WorldState, i: int, b: Block, color: Color) -> bool:
    """A block the expert could pick for this color: on the table, not held."""
    return b.color is color and not b.in_box and state.holding != i


def check_reachable(state: WorldState, goal: GoalSpec) -> None:
    """Raise GoalUnreachable unless paint+pack steps can still complete.

    Each target color short of blocks must be creatable by painting a free
    white block; whites are fungible across bowl colors, so the summed
    shortfalls must fit the white supply, and pink has no bowl at all.
    """
    total, _ = _color_counts(state)
    free_whites = sum(
        1
        for i, b in enumerate(state.blocks)
        if _is_source(state, i, b, Color.WHITE)
    )
    paint_deficit = 0
    for c in set(goal.target_colors):
        shortfall = max(0, goal.count(c) - total[c])
        if shortfall > 0 and c not in BOWL_COLORS:
            raise GoalUnreachable(f"{c.name} cannot be painted and too few exist")
        paint_deficit += shortfall
    if paint_deficit > free_whites:
        raise GoalUnreachable(
            f"need {paint_deficit} paintable whites but only {free_whites} free"
        )


def valid_next_subgoals(
    state: WorldState, goal: GoalSpec, params: EnvParams = DEFAULT_PARAMS
) -> set[SubgoalSpec]:
    """Every subgoal that strictly advances the goal from this state.

    Paint(c) when more c-colored blocks are needed than exist and a free
    white block is on the table; Pack(c) when a c-colored block is out of
    the box and the box still needs one. Empty iff the goal is complete.
    """
    check_reachable(state, goal)
    total, packed = _color_counts(state)
    free_whites = any(
        _is_source(state, i, b, Color.WHITE) for i, b in enumerate(state.blocks)
    )
    out: set[SubgoalSpec] = set()
    for c in set(goal.target_colors):
        if c in BOWL_COLORS and goal.count(c) > total[c] and free_whites:
            out.add(SubgoalSpec.paint(c))
        packable = any(
            _is_source(state, i, b, c) for i, b in enumerate(state.blocks)
        )
        if goal.count(c) > packed[c] and packable:
            out.add(SubgoalSpec.pack(c))
    return out


_CANONICAL_VERBS = {Verb.PAINT: 0, Verb.PACK: 1}


def expert_policy(state: WorldState, goal: GoalSpec) -> SubgoalSpec | None:
    """Deterministic subgoal choice: first valid subgoal in canonical order
    (paints before packs, then by target/block color index).

    Determinism here is what makes the executed-subgoal labels in the
    grounding corpus a learnable function of (observation, goal).
    """
    valid = valid_next_subgoals(state, goal)
    if not valid:
        return None
    return min(
        valid,
        key=lambda w: (_CANONICAL_VERBS[w.verb], int(w.target_color), int(w.block_color)),
    )


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

def _move_actions(src: np.ndarray, dst: np.ndarray, grip: float) -> list[Action]:
    """Per-axis clamped straight-line march from src to dst (Chebyshev steps)."""
    acts = []
    pos = np.array(src, dtype=float)
    for _ in range(64):
        delta = dst - pos
        if np.max(np.abs(delta)) < 1e-12:
            break
        d = np.clip(delta, -MAX_DELTA, MAX_DELTA)
        acts.append(Action(float(d[0]), float(d[1]), grip))
        pos = pos + d
    return acts


def _subgoal_satisfied(state: WorldState, subgoal: SubgoalSpec, before: WorldState) -> bool:
    total_before, packed_before = _color_counts(before)
    total_after, packed_after = _color_counts(state)
    if subgoal.verb is Verb.PAINT:
        return total_after[subgoal.target_color] > total_before[subgoal.target_color]
    return packed_after[subgoal.block_color] > packed_before[subgoal.block_color]


def expert_rollout(
    state: WorldState, subgoal: SubgoalSpec, params: EnvParams = DEFAULT_PARAMS
) -> TrajectoryPair:
    """Waypoint controller for one subgoal: approach, grip, carry, release.

    The result always has exactly `horizon` observations; segments shorter
    than the horizon are padded by holding the last (null) action. The
    geometry guarantees completion within the horizon, which is asserted.
    """
    if subgoal.verb is Verb.PAINT:
        sources = [
            (i, b)
            for i, b in enumerate(state.blocks)
            if _is_source(state, i, b, Color.WHITE)
        ]
        target = BOWL_CENTERS.get(subgoal.target_color)
        if target is None:
            raise SubgoalInfeasible(f"no bowl paints {subgoal.target_color.name}")
    else:
        sources = [
            (i, b)
            for i, b in enumerate(state.blocks)
            if _is_source(state, i, b, subgoal.block_color)
        ]
        target = BOX_CENTER
    if not sources:
        raise SubgoalInfeasible(f"no source block for {subgoal.verb.value}")

    gpos = np.array(state.gripper_pos)
    src_idx, src = min(
        sources, key=lambda ib: (float(np.hypot(ib[1].pos[0] - gpos[0], ib[1].pos[1] - gpos[1])), ib[0])
    )
    del src_idx

    acts = _move_actions(gpos, np.array(src.pos), grip=0.0)
    acts.append(Action(0.0, 0.0, 1.0))  # close on the block
    acts.extend(_move_actions(np.array(src.pos), target, grip=1.0))
    acts.append(Action(0.0, 0.0, 0.0))  # release

    T = params.horizon
    if len(acts) > T - 1:
        raise AssertionError(
            f"expert needed {len(acts)} actions for a {T - 1}-action segment"
        )
    while len(acts) < T - 1:
        acts.append(acts[-1])  # held release action is a no-op

    obs = np.empty((T, params.obs_dim))
    obs[0] = observe(state, params)
    cur = state
    for t, a in enumerate(acts):
        cur = step(cur, a, params)
        obs[t + 1] = observe(cur, params)
    if not _subgoal_satisfied(cur, subgoal, state):
        raise AssertionError("expert rollout did not satisfy its subgoal")
    return TrajectoryPair(obs=obs, acts=np.stack([a.vec for a in acts]), subgoal=subgoal)


def final_state(state: WorldState, traj: TrajectoryPair, params: EnvParams = DEFAULT_PARAMS) -> WorldState:
    """Replay a trajectory's actions from `state` through the dynamics."""
    cur = state
    for a in traj.acts:
        cur = step(cur, Action.from_vec(a), params)
    return cur


# ---------------------------------------------------------------------------
# task sampling and corpus generation
# ---------------------------------------------------------------------------

def sample_task(rng: np.random.Generator, params: EnvParams = DEFAULT_PARAMS) -> Task:
    """Random solvable task: distinct target colors, scattered blocks.

    Pink targets force a pre-colored pink block; other targets start as a
    free white block most of the time and pre-colored otherwise, so packs
    can be valid before all paints are done.
    """
    colors = [Color(c) for c in rng.choice(GOAL_COLORS, size=3, replace=False)]
    goal = GoalSpec(tuple(sorted(colors)))

    positions: list[np.ndarray] = []
    while len(positions) < params.n_blocks:
        p = rng.uniform(SPAWN_LOW, SPAWN_HIGH)
        if all(np.hypot(*(p - q)) >= MIN_BLOCK_SEPARATION for q in positions):
            positions.append(p)

    blocks = []
    for c, p in zip(goal.target_colors, positions):
        if c is Color.PINK or rng.random() < 0.3:
            color = c
        else:
            color = Color.WHITE
        blocks.append(Block(pos=(float(p[0]), float(p[1])), color=color))

    initial = WorldState(
        gripper_pos=(float(GRIPPER_HOME[0]), float(GRIPPER_HOME[1])),
        holding=None,
        blocks=tuple(blocks),
    )
    return Task(goal=goal, initial=initial, seed=int(rng.integers(0, 2**63 - 1)))


def generate_datasets(
    n_tasks: int, master_seed: int, params: EnvParams = DEFAULT_PARAMS
) -> tuple[list[ClassifyRecord], list[VideoRecord], list[InvRecord]]:
    """Roll the expert over fresh tasks and split segments into the three
    training corpora (grounding, trajectory, inverse dynamics)."""
    # imported here: the proposer lives upstream of this module's types
    from .task import propose_candidates

    if n_tasks < 1:
        raise EmptyDataset("n_tasks must be >= 1")
    d_classify: list[ClassifyRecord] = []
    d_video: list[VideoRecord] = []
    d_inv: list[InvRecord] = []
    for i in range(n_tasks):
        rng = np.random.default_rng(master_seed ^ (i + 1))
        task = sample_task(rng, params)
        state = reset(task)
        for _ in range(2 * params.n_blocks + 1):
            subgoal = expert_policy(state, task.goal)
            if subgoal is None:
                break
            cands = propose_candidates(task.goal, rng)
            label = cands.candidates.index(subgoal)
            traj = expert_rollout(state, subgoal, params)
            d_classify.append(
                ClassifyRecord(
                    obs=observe(state, params),
                    goal=task.goal,
                    candidates=cands.candidates,
                    label=label,
                )
            )
            d_video.append(VideoRecord(obs=traj.obs, subgoal=subgoal, goal=task.goal))
            d_inv.append(InvRecord(obs=traj.obs, acts=traj.acts))
            state = final_state(state, traj, params)
        else:
            raise GoalUnreachable(f"expert failed to finish task {i}")
    return d_classify, d_video, d_inv
