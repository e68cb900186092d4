"""Deterministic 2-D tabletop manipulation bench.

Supplies seeded episode resets, substep kinematics with clamped
displacement, a scripted expert, a stochastic multimodal base policy
(expert mode plus a distractor mode that steers toward the wrong object),
chunk execution with success detection, and expert-trajectory generation
for the datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .traj_data import (
    ActionChunk,
    SubstepAction,
    Task,
    Trajectory,
    assign_progress,
)

STATE_DIM = 17


@dataclass(frozen=True)
class EnvConfig:
    """Episode geometry and base-policy constants.

    The distractor probability and action noise were tuned so the base
    policy lands in the 0.55-0.85 pass@1 band where candidate selection
    has room to help.
    """

    horizon: int = 120
    chunk_horizon: int = 8
    max_substep_displacement: float = 0.08
    grasp_radius: float = 0.03
    place_radius: float = 0.04
    knock_radius: float = 0.03
    policy_noise: float = 0.02
    distractor_prob: float = 0.15
    min_separation: float = 0.15

    def __post_init__(self):
        if self.horizon % self.chunk_horizon != 0:
            raise ValueError(
                f"horizon {self.horizon} must be a multiple of the chunk "
                f"horizon {self.chunk_horizon}"
            )


@dataclass
class EnvState:
    gripper: np.ndarray            # (2,)
    gripper_closed: bool
    holding: Optional[int]
    objects: np.ndarray            # (2, 2)
    object_down: list
    container: np.ndarray          # (2,)
    task: Task
    target_object: int
    substep_count: int = 0

    def copy(self):
        return EnvState(
            gripper=self.gripper.copy(),
            gripper_closed=self.gripper_closed,
            holding=self.holding,
            objects=self.objects.copy(),
            object_down=list(self.object_down),
            container=self.container.copy(),
            task=self.task,
            target_object=self.target_object,
            substep_count=self.substep_count,
        )


def reset(config, seed):
    """Seeded episode start: gripper, two objects, and the container at
    uniform positions with pairwise separation >= config.min_separation,
    task and target drawn uniformly."""
    rng = np.random.default_rng(seed)
    placed = []
    for _ in range(4):
        while True:
            p = rng.uniform(0.0, 1.0, size=2)
            if all(np.linalg.norm(p - q) >= config.min_separation for q in placed):
                placed.append(p)
                break
    gripper, obj0, obj1, container = placed
    task = Task(int(rng.integers(0, 3)))
    target = int(rng.integers(0, 2))
    return EnvState(
        gripper=gripper,
        gripper_closed=False,
        holding=None,
        objects=np.stack([obj0, obj1]),
        object_down=[False, False],
        container=container,
        task=task,
        target_object=target,
    )


def encode_state(state):
    """Fixed 17-float layout: gripper x, y; closed flag; holding flag;
    object0 x, y; object1 x, y; down flags; container x, y; task one-hot
    (3); target-object one-hot (2)."""
    enc = np.zeros(STATE_DIM)
    enc[0:2] = state.gripper
    enc[2] = 1.0 if state.gripper_closed else 0.0
    enc[3] = 1.0 if state.holding is not None else 0.0
    enc[4:6] = state.objects[0]
    enc[6:8] = state.objects[1]
    enc[8] = 1.0 if state.object_down[0] else 0.0
    enc[9] = 1.0 if state.object_down[1] else 0.0
    enc[10:12] = state.container
    enc[12 + int(state.task)] = 1.0
    enc[15 + state.target_object] = 1.0
    return enc


def is_success(config, state):
    if state.task == Task.REACH:
        return _dist(state.gripper, state.objects[state.target_object]) <= config.grasp_radius
    if state.task == Task.PICK_PLACE:
        return (
            state.holding != state.target_object
            and _dist(state.objects[state.target_object], state.container)
            <= config.place_radius
        )
    return bool(state.object_down[state.target_object])


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _apply_substep(config, state, action):
    """Advance one substep in place: move toward the absolute target with
    displacement clamped to max_substep_displacement, carry a held object,
    apply grasp/release, and mark knockdowns in the Knock task."""
    target = np.array([action.target_x, action.target_y])
    delta = target - state.gripper
    dist = math.hypot(delta[0], delta[1])
    v = config.max_substep_displacement
    if dist > v:
        state.gripper = state.gripper + delta * (v / dist)
    else:
        state.gripper = target.copy()
    np.clip(state.gripper, 0.0, 1.0, out=state.gripper)

    if state.holding is not None:
        state.objects[state.holding] = state.gripper

    closed = action.closed
    if closed and state.holding is None:
        best, best_d = None, config.grasp_radius
        for j in range(2):
            d = _dist(state.gripper, state.objects[j])
            if d <= best_d:
                best, best_d = j, d
        if best is not None:
            state.holding = best
            state.objects[best] = state.gripper.copy()
    elif not closed and state.holding is not None:
        state.objects[state.holding] = state.gripper.copy()
        state.holding = None
    state.gripper_closed = closed

    if state.task == Task.KNOCK:
        for j in range(2):
            if _dist(state.gripper, state.objects[j]) <= config.knock_radius:
                state.object_down[j] = True

    state.substep_count += 1


def step_chunk(config, state, chunk):
    """Execute the chunk's substeps from a copy of ``state``; stops early
    the moment the task's success condition holds. Returns (next_state,
    success)."""
    if chunk.horizon != config.chunk_horizon:
        raise ValueError(
            f"chunk horizon {chunk.horizon} != config horizon {config.chunk_horizon}"
        )
    s = state.copy()
    for action in chunk.substeps:
        _apply_substep(config, s, action)
        if is_success(config, s):
            return s, True
    return s, False


def _advance_toward(config, pos, waypoint):
    delta = waypoint - pos
    dist = math.hypot(delta[0], delta[1])
    v = config.max_substep_displacement
    if dist <= v:
        return waypoint.copy()
    return pos + delta * (v / dist)


def _expert_substep(config, state):
    """One waypoint-controller command for the current state. Targets
    advance at most one displacement step, so recorded actions trace the
    actual pose path (which makes reversal well defined)."""
    gx, gy = state.gripper
    hold_grip = 1.0 if state.gripper_closed else 0.0
    if is_success(config, state):
        return SubstepAction(gx, gy, hold_grip)

    target_obj = state.objects[state.target_object]
    if state.task in (Task.REACH, Task.KNOCK):
        nxt = _advance_toward(config, state.gripper, target_obj)
        return SubstepAction(nxt[0], nxt[1], 0.0)

    # PickPlace
    if state.holding == state.target_object:
        if _dist(state.gripper, state.container) <= config.place_radius:
            return SubstepAction(gx, gy, 0.0)  # release in place
        nxt = _advance_toward(config, state.gripper, state.container)
        return SubstepAction(nxt[0], nxt[1], 1.0)
    if state.holding is not None:
        return SubstepAction(gx, gy, 0.0)  # drop the wrong object first
    if _dist(state.gripper, target_obj) <= config.grasp_radius:
        return SubstepAction(target_obj[0], target_obj[1], 1.0)
    nxt = _advance_toward(config, state.gripper, target_obj)
    return SubstepAction(nxt[0], nxt[1], 0.0)


def expert_chunk(config, state):
    """Plan the next chunk by rolling the waypoint controller through the
    true substep dynamics; executing the chunk open-loop from the same
    state reproduces the planned motion exactly."""
    s = state.copy()
    substeps = []
    for _ in range(config.chunk_horizon):
        action = _expert_substep(config, s)
        substeps.append(action)
        _apply_substep(config, s, action)
    return ActionChunk.from_substeps(substeps)


def base_policy_sample(config, state, rng):
    """One stochastic policy draw: the expert chunk (probability
    1 - distractor_prob) or a chunk steering toward the non-target object,
    plus independent Gaussian noise on every coordinate, clamped to [0, 1].

    The generator is consumed identically in both modes, so seeded draws
    stay aligned across mode choices.
    """
    rng = np.random.default_rng(rng)
    u = rng.uniform()
    if u < config.distractor_prob:
        flipped = state.copy()
        flipped.target_object = 1 - state.target_object
        base = expert_chunk(config, flipped)
    else:
        base = expert_chunk(config, state)
    noise = rng.standard_normal(base.flat.size) * config.policy_noise
    return ActionChunk(np.clip(base.flat + noise, 0.0, 1.0))


@dataclass
class Episode:
    env_seed: object
    task: Task
    target_object: int
    success: bool
    substeps_used: int
    decisions: list = field(default_factory=list)


def rollout_episode(config, decide, env_seed, policy_seed=None):
    """Run one episode: at each decision step call ``decide(state, rng)``
    for a chunk, execute it, stop at success or horizon.

    ``decide`` returns (ActionChunk, info-dict). The policy generator is
    seeded independently of the reset so retries can replay an initial
    state under fresh policy randomness.
    """
    state = reset(config, env_seed)
    rng = np.random.default_rng(policy_seed if policy_seed is not None else env_seed)
    decisions = []
    done = False
    while state.substep_count < config.horizon and not done:
        chunk, info = decide(state, rng)
        state, done = step_chunk(config, state, chunk)
        decisions.append(info)
    return Episode(
        env_seed=env_seed,
        task=state.task,
        target_object=state.target_object,
        success=done,
        substeps_used=state.substep_count,
        decisions=decisions,
    )


def run_expert_episode(config, seed):
    """Roll the scripted expert, recording (state encoding, action) per
    substep. Returns (records, success)."""
    state = reset(config, seed)
    states, actions = [], []
    success = False
    while state.substep_count < config.horizon and not success:
        chunk = expert_chunk(config, state)
        for action in chunk.substeps:
            states.append(encode_state(state))
            actions.append((action.target_x, action.target_y, action.grip))
            _apply_substep(config, state, action)
            if is_success(config, state):
                success = True
                break
    return state, np.asarray(states), np.asarray(actions), success


def generate_trajectories(config, episodes, seed):
    """Collect ``episodes`` expert trajectories of length >= the chunk
    horizon. Episodes whose expert finishes in fewer substeps than one
    chunk are skipped (the data model rejects them), so consecutive reset
    seeds are consumed until enough trajectories exist."""
    dataset = []
    attempt = 0
    while len(dataset) < episodes:
        state, states, actions, success = run_expert_episode(
            config, np.random.SeedSequence([seed, attempt])
        )
        if success and states.shape[0] >= config.chunk_horizon:
            dataset.append(
                assign_progress(
                    attempt, state.task, state.target_object, states, actions,
                    chunk_horizon=config.chunk_horizon,
                )
            )
        attempt += 1
        if attempt > 100 * episodes + 1000:
            raise RuntimeError("expert failed to produce enough trajectories")
    return dataset
