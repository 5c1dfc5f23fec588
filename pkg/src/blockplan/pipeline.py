"""End-to-end episode orchestration and evaluation.

One planning pass: propose candidate subgoals, pick one with the grounding
classifier, sample a guided observation trajectory for it, extract actions
with the inverse model, and execute them open-loop; re-observe and repeat
until the simulator confirms the goal or the subgoal budget runs out.

Ablation modes strip individual refinement stages: random candidate choice
(no task refinement), zero feasibility guidance (no visual refinement),
both, or a flat variant that skips subgoal decomposition entirely and
conditions the same denoiser on a goal-level token.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import env, nn, task as task_mod, visual
from .action import InvDynNet, predict_action, train_inverse
from .env import EnvParams, GoalSpec, SubgoalSpec, Task, WorldState
from .nn import ModelIncompatible
from .task import CandidateSet, GroundingClassifier, propose_candidates, select_subgoal
from .visual import Denoiser, FeasibilityClassifier, GuidanceConfig, NoiseSchedule


class LengthMismatch(ValueError):
    """Subgoal, plan and action sequences disagree in length."""


class PlannerMode(Enum):
    FULL = "full"
    NO_TASK_REFINE = "no-task-refine"
    NO_VISUAL_REFINE = "no-visual-refine"
    NO_REFINE = "no-refine"
    FLAT = "flat"


@dataclass(frozen=True)
class ModelBundle:
    grounding: GroundingClassifier
    denoiser: Denoiser
    feasibility: FeasibilityClassifier
    inverse: InvDynNet
    sched: NoiseSchedule
    params: EnvParams

    def validate(self) -> None:
        obs_dim = self.params.obs_dim
        if self.denoiser.obs_dim != obs_dim or self.denoiser.t_len != self.params.horizon:
            raise ModelIncompatible(
                f"denoiser trained for {self.denoiser.t_len}x{self.denoiser.obs_dim}, "
                f"environment is {self.params.horizon}x{obs_dim}"
            )
        if self.denoiser.sched_meta != self.sched.meta():
            raise ModelIncompatible(
                f"denoiser schedule {self.denoiser.sched_meta} != {self.sched.meta()}"
            )
        if self.grounding.obs_dim != obs_dim or self.inverse.obs_dim != obs_dim:
            raise ModelIncompatible("classifier/inverse observation dims disagree")
        if self.feasibility.net.in_dim != self.params.horizon * obs_dim:
            raise ModelIncompatible("feasibility input dim disagrees")

    # -- persistence ------------------------------------------------------
    _FILES = ("grounding", "denoiser", "feasibility", "inverse")

    def save(self, ckpt_dir: str | Path) -> None:
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        common = {"obs_dim": self.params.obs_dim, "horizon": self.params.horizon}
        nn.save_network(
            d / "grounding.ckpt",
            self.grounding.net,
            {"component": "grounding", **common},
        )
        nn.save_network(
            d / "denoiser.ckpt",
            self.denoiser.net,
            {"component": "denoiser", "schedule": self.sched.meta(), **common},
        )
        nn.save_network(
            d / "feasibility.ckpt",
            self.feasibility.net,
            {"component": "feasibility", **common},
        )
        nn.save_network(
            d / "inverse.ckpt", self.inverse.net, {"component": "inverse", **common}
        )

    @classmethod
    def load(
        cls, ckpt_dir: str | Path, sched: NoiseSchedule, params: EnvParams
    ) -> "ModelBundle":
        d = Path(ckpt_dir)
        nets, metas = {}, {}
        for name in cls._FILES:
            nets[name], metas[name] = nn.load_network(d / f"{name}.ckpt")
        for name, meta in metas.items():
            if meta.get("obs_dim") != params.obs_dim or meta.get("horizon") != params.horizon:
                raise ModelIncompatible(f"{name} checkpoint was trained for another environment")
        if metas["denoiser"].get("schedule") != sched.meta():
            raise ModelIncompatible("denoiser checkpoint disagrees with the noise schedule")
        bundle = cls(
            grounding=GroundingClassifier(net=nets["grounding"], obs_dim=params.obs_dim),
            denoiser=Denoiser(
                net=nets["denoiser"],
                t_len=params.horizon,
                obs_dim=params.obs_dim,
                sched_meta=metas["denoiser"]["schedule"],
            ),
            feasibility=FeasibilityClassifier(net=nets["feasibility"]),
            inverse=InvDynNet(net=nets["inverse"], obs_dim=params.obs_dim),
            sched=sched,
            params=params,
        )
        bundle.validate()
        return bundle


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    subgoals_issued: tuple[SubgoalSpec | None, ...]
    steps_taken: int
    feasibility_probs: tuple[float, ...]
    seed: int


@dataclass(frozen=True)
class EvalReport:
    mode: PlannerMode
    n_tasks: int
    completion_rate: float
    stderr: float | None  # None when run on a single seed
    per_seed: tuple[float, ...]


def _mode_guidance(mode: PlannerMode, guidance: GuidanceConfig) -> GuidanceConfig:
    if mode in (PlannerMode.NO_VISUAL_REFINE, PlannerMode.NO_REFINE):
        return replace(guidance, omega_prime=0.0)
    return guidance


def plan_and_execute(
    models: ModelBundle,
    task: Task,
    mode: PlannerMode,
    guidance: GuidanceConfig,
    max_subgoals: int = 8,
    rng: np.random.Generator | None = None,
    seed: int = 0,
    per_step_replan: bool = False,
) -> EpisodeResult:
    """Run one episode: closed-loop across subgoals, open-loop within one.

    With per_step_replan a full planning pass yields a single executed
    action before re-observing (the literal one-action reading of the
    planning loop); max_subgoals then caps planning passes, not subgoals.
    """
    models.validate()
    rng = rng if rng is not None else np.random.default_rng(seed)
    gcfg = _mode_guidance(mode, guidance)
    params = models.params
    state = env.reset(task)
    issued: list[SubgoalSpec | None] = []
    probs: list[float] = []
    steps = 0
    for _ in range(max_subgoals):
        if env.goal_complete(state, task.goal):
            break
        obs = env.observe(state, params)
        if mode is PlannerMode.FLAT:
            subgoal = None
            w_vec = visual.goal_token(task.goal)
        else:
            cands = propose_candidates(task.goal, rng)
            if mode in (PlannerMode.NO_TASK_REFINE, PlannerMode.NO_REFINE):
                idx = int(rng.integers(len(cands.candidates)))
            else:
                idx, _ = select_subgoal(models.grounding, obs, cands)
            subgoal = cands.candidates[idx]
            w_vec = subgoal.encode()
        plan = visual.sample_plan(
            models.denoiser, models.feasibility, obs, w_vec, gcfg, models.sched, rng
        )
        issued.append(subgoal)
        probs.append(models.feasibility.prob(visual.scale_obs(plan.reshape(-1))))
        n_exec = 1 if per_step_replan else plan.shape[0] - 1
        for t in range(n_exec):
            a = predict_action(models.inverse, plan[t], plan[t + 1])
            state = env.step(state, a, params)
            steps += 1
    return EpisodeResult(
        success=env.goal_complete(state, task.goal),
        subgoals_issued=tuple(issued),
        steps_taken=steps,
        feasibility_probs=tuple(probs),
        seed=seed,
    )


def execute_expert(task: Task, params: EnvParams = env.DEFAULT_PARAMS) -> bool:
    """Drive the scripted expert through the real dynamics to completion;
    the perfect-planner upper bound for the evaluation harness."""
    state = env.reset(task)
    for _ in range(2 * params.n_blocks + 1):
        subgoal = env.expert_policy(state, task.goal)
        if subgoal is None:
            return True
        traj = env.expert_rollout(state, subgoal, params)
        state = env.final_state(state, traj, params)
    return env.goal_complete(state, task.goal)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def episode_task(seed: int, episode: int, params: EnvParams = env.DEFAULT_PARAMS) -> Task:
    """The evaluation task stream: a task depends only on (seed, episode),
    so every mode and guidance setting faces identical tasks."""
    return env.sample_task(np.random.default_rng([seed, episode]), params)


def _run_episode(args) -> bool:
    models, mode, guidance, max_subgoals, seed, episode = args
    task = episode_task(seed, episode, models.params)
    result = plan_and_execute(
        models,
        task,
        mode,
        guidance,
        max_subgoals=max_subgoals,
        rng=np.random.default_rng([seed, episode, 1]),
        seed=seed,
    )
    return result.success


def evaluate(
    models: ModelBundle,
    n_tasks: int,
    mode: PlannerMode,
    seeds: tuple[int, ...] = (0, 1),
    guidance: GuidanceConfig = GuidanceConfig(),
    max_subgoals: int = 8,
    workers: int = 1,
) -> EvalReport:
    """Completion rate over fresh tasks per seed; mean and standard error
    across seeds. Per-episode seeding makes the worker count irrelevant."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    per_seed = []
    for seed in seeds:
        jobs = [
            (models, mode, guidance, max_subgoals, seed, ep) for ep in range(n_tasks)
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_run_episode, jobs, chunksize=16))
        else:
            outcomes = [_run_episode(j) for j in jobs]
        per_seed.append(sum(outcomes) / n_tasks)
    rates = np.array(per_seed)
    stderr = (
        float(rates.std(ddof=1) / np.sqrt(len(seeds))) if len(seeds) >= 2 else None
    )
    return EvalReport(
        mode=mode,
        n_tasks=n_tasks,
        completion_rate=float(rates.mean()),
        stderr=stderr,
        per_seed=tuple(float(r) for r in rates),
    )


DEFAULT_SWEEP_GRID = (0.0, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


def sweep_guidance(
    models: ModelBundle,
    omega_prime_values: tuple[float, ...] = DEFAULT_SWEEP_GRID,
    n_tasks: int = 200,
    seeds: tuple[int, ...] = (0,),
    guidance: GuidanceConfig = GuidanceConfig(),
    max_subgoals: int = 8,
    workers: int = 1,
) -> list[tuple[float, EvalReport]]:
    """Full-mode completion rate at each feasibility-guidance scale."""
    if any(v < 0 for v in omega_prime_values):
        raise ValueError("guidance scales must be non-negative")
    rows = []
    for v in omega_prime_values:
        report = evaluate(
            models,
            n_tasks,
            PlannerMode.FULL,
            seeds=seeds,
            guidance=replace(guidance, omega_prime=v),
            max_subgoals=max_subgoals,
            workers=workers,
        )
        rows.append((v, report))
    return rows


# ---------------------------------------------------------------------------
# factorized joint score (diagnostics/tests only)
# ---------------------------------------------------------------------------

def task_component_score(
    models: ModelBundle,
    subgoal: SubgoalSpec,
    obs: np.ndarray,
    goal: GoalSpec,
    rng: np.random.Generator,
) -> float:
    """Grounding log-softmax of the subgoal within a proposed candidate set."""
    cands = propose_candidates(goal, rng)
    _, logits = select_subgoal(models.grounding, obs, cands)
    logp = logits - logits.max()
    logp = logp - np.log(np.exp(logp).sum())
    return float(logp[cands.candidates.index(subgoal)])


def visual_component_score(
    models: ModelBundle,
    plan: np.ndarray,
    obs: np.ndarray,
    w_vec: np.ndarray,
    n_terms: int,
    rng: np.random.Generator,
) -> float:
    """Negated Monte-Carlo denoising loss of the plan under its conditioning."""
    return -visual.denoising_loss(
        models.denoiser,
        visual.scale_obs(plan.reshape(-1)),
        obs,
        w_vec,
        models.sched,
        n_terms,
        rng,
    )


def action_component_score(
    models: ModelBundle, plan: np.ndarray, acts: np.ndarray
) -> float:
    """Negated squared error between given actions and inverse predictions."""
    total = 0.0
    for t in range(acts.shape[0]):
        pred = models.inverse.predict_raw(plan[t], plan[t + 1])
        total -= float(((acts[t] - pred) ** 2).sum())
    return total


def joint_log_likelihood(
    models: ModelBundle,
    subgoals: list[SubgoalSpec],
    plans: list[np.ndarray],
    actions: list[np.ndarray],
    task: Task,
    n_terms: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Sum of per-level scores realizing the factorized episode likelihood:
    grounding log-softmax + negated denoising loss + negated action error,
    summed over subgoal segments."""
    if not (len(subgoals) == len(plans) == len(actions)):
        raise LengthMismatch(
            f"{len(subgoals)} subgoals, {len(plans)} plans, {len(actions)} action sets"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    total = 0.0
    for w, plan, acts in zip(subgoals, plans, actions):
        obs = plan[0]
        total += task_component_score(models, w, obs, task.goal, rng)
        total += visual_component_score(models, plan, obs, w.encode(), n_terms, rng)
        total += action_component_score(models, plan, acts)
    return total


# ---------------------------------------------------------------------------
# training front door
# ---------------------------------------------------------------------------

def train_bundle(
    n_tasks: int,
    master_seed: int,
    params: EnvParams = env.DEFAULT_PARAMS,
    sched: NoiseSchedule | None = None,
    grounding_kwargs: dict | None = None,
    denoiser_kwargs: dict | None = None,
    feasibility_kwargs: dict | None = None,
    inverse_kwargs: dict | None = None,
) -> ModelBundle:
    """Generate corpora and train all four models with one seed."""
    sched = sched if sched is not None else visual.build_schedule()
    d_classify, d_video, d_inv = env.generate_datasets(n_tasks, master_seed, params)
    grounding = task_mod.train_grounding(
        d_classify, seed=master_seed, **(grounding_kwargs or {})
    )
    denoiser = visual.train_denoiser(
        d_video, sched, seed=master_seed, **{"epochs": 400, **(denoiser_kwargs or {})}
    )
    feasibility = visual.train_feasibility(
        d_video,
        np.random.default_rng(master_seed),
        sched=sched,
        **(feasibility_kwargs or {}),
    )
    inverse = train_inverse(d_inv, seed=master_seed, **(inverse_kwargs or {}))
    return ModelBundle(
        grounding=grounding,
        denoiser=denoiser,
        feasibility=feasibility,
        inverse=inverse,
        sched=sched,
        params=params,
    )
