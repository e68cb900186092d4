"""Trajectory data model, progress labels, forward/reversed training
pairs, and the line-oriented on-disk dataset format."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

DATA_MAGIC = "TAPSAMPLE-DATA v1"
DATA_MAGIC_PREFIX = "TAPSAMPLE-DATA "

STATE_DIM = 17
ACTION_DIM = 3
DEFAULT_CHUNK_HORIZON = 8


class Task(IntEnum):
    REACH = 0
    PICK_PLACE = 1
    KNOCK = 2


class TrajectoryTooShortError(ValueError):
    """Trajectory shorter than the chunk horizon."""


class InsufficientHistoryError(ValueError):
    """Not enough earlier steps to build a reversed chunk."""


class EmptyDatasetError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def _clamp01(v):
    return min(1.0, max(0.0, float(v)))


@dataclass(frozen=True)
class SubstepAction:
    """One low-level command: absolute end-effector target plus gripper.

    Coordinates and grip are clamped to [0, 1] at creation; the gripper
    counts as closed iff grip > 0.5.
    """

    target_x: float
    target_y: float
    grip: float

    def __post_init__(self):
        for name in ("target_x", "target_y", "grip"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"non-finite {name}: {v}")
            object.__setattr__(self, name, _clamp01(v))

    @property
    def closed(self):
        return self.grip > 0.5


@dataclass(frozen=True, eq=False)
class ActionChunk:
    """Fixed-horizon action sequence stored as a flat (3H,) vector in
    substep-major order (x, y, grip per substep). The flat values are kept
    raw; clamping to [0, 1] happens only when substeps are materialised
    for execution."""

    flat: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.flat, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0 or arr.size % ACTION_DIM != 0:
            raise ValueError(f"chunk vector must have length 3H, got shape {arr.shape}")
        object.__setattr__(self, "flat", arr.copy())

    @property
    def horizon(self):
        return self.flat.size // ACTION_DIM

    @classmethod
    def from_substeps(cls, substeps):
        flat = np.empty(ACTION_DIM * len(substeps))
        for j, s in enumerate(substeps):
            flat[3 * j : 3 * j + 3] = (s.target_x, s.target_y, s.grip)
        return cls(flat)

    @property
    def substeps(self):
        return tuple(
            SubstepAction(self.flat[3 * j], self.flat[3 * j + 1], self.flat[3 * j + 2])
            for j in range(self.horizon)
        )


@dataclass
class Trajectory:
    """One expert episode: instruction code plus per-substep records.

    ``states[i]`` is the 17-float state encoding before substep i and
    ``actions[i]`` the (x, y, grip) command executed there, i = 0..t-1.
    Step i carries the implicit progress value (i + 1) / t.
    """

    traj_id: int
    task: Task
    target_object: int
    states: np.ndarray
    actions: np.ndarray

    @property
    def length(self):
        return self.states.shape[0]

    def progress(self, i):
        if not 0 <= i < self.length:
            raise IndexError(f"step {i} out of range for length {self.length}")
        return (i + 1) / self.length

    @property
    def progress_values(self):
        t = self.length
        return np.arange(1, t + 1) / t


def assign_progress(traj_id, task, target_object, states, actions,
                    chunk_horizon=DEFAULT_CHUNK_HORIZON):
    """Validate a raw state/action sequence and wrap it as a Trajectory
    with implicit linear progress. Rejects sequences shorter than the
    chunk horizon."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != STATE_DIM:
        raise ValueError(f"states must be (t, {STATE_DIM}), got {states.shape}")
    if actions.shape != (states.shape[0], ACTION_DIM):
        raise ValueError(f"actions must be (t, {ACTION_DIM}), got {actions.shape}")
    t = states.shape[0]
    if t < chunk_horizon:
        raise TrajectoryTooShortError(
            f"trajectory length {t} is shorter than chunk horizon {chunk_horizon}"
        )
    return Trajectory(int(traj_id), Task(task), int(target_object), states, actions)


def forward_chunk(traj, i, k):
    """Chunk of the k actions executed from step i onward."""
    if i < 0 or i + k > traj.length:
        raise InsufficientHistoryError(
            f"forward chunk at i={i}, k={k} exceeds length {traj.length}"
        )
    return ActionChunk(traj.actions[i : i + k].reshape(-1))

def reverse_chunk(traj, i, k):
    """Time-reversed chunk anchored at step i (0-based): substep j carries
    the absolute pose and gripper value recorded at step i - j, so the
    sequence retraces the demonstrated path leading away from state i."""
    if i - k < 0:
        raise InsufficientHistoryError(
            f"reversed chunk at i={i} needs {k} earlier steps, only {i} exist"
        )
    rows = traj.actions[i - k : i][::-1]
    return ActionChunk(rows.reshape(-1))


@dataclass
class ProgressSample:
    """A (instruction, state, chunk) -> progress-change training record.
    Forward samples carry +k/t, reversed samples -k/t."""

    task: Task
    target_object: int
    state: np.ndarray
    chunk: ActionChunk
    delta_p: float


def build_training_pairs(dataset, k=DEFAULT_CHUNK_HORIZON, seed=0, samples_per_traj=None):
    """Construct balanced forward/reversed verifier training pairs.

    For every trajectory, each index i with i + k <= t yields a forward
    sample labeled +k/t and each index i with i - k >= 0 a reversed sample
    labeled -k/t, so classes are balanced to within one sample. With
    ``samples_per_traj`` set, that many indices per direction are drawn
    without replacement from the seeded generator. The emitted order is a
    seeded shuffle.
    """
    if not dataset:
        raise EmptyDatasetError("no trajectories to build pairs from")
    rng = np.random.default_rng(seed)
    out = []
    for traj in dataset:
        t = traj.length
        if t < k:
            raise TrajectoryTooShortError(
                f"trajectory {traj.traj_id} has length {t} < k={k}"
            )
        forward_idx = np.arange(0, t - k + 1)
        reverse_idx = np.arange(k, t)
        if samples_per_traj is not None:
            n_f = min(samples_per_traj, forward_idx.size)
            n_r = min(samples_per_traj, reverse_idx.size)
            forward_idx = rng.choice(forward_idx, size=n_f, replace=False)
            reverse_idx = rng.choice(reverse_idx, size=n_r, replace=False)
        label = k / t
        for i in forward_idx:
            out.append(ProgressSample(
                traj.task, traj.target_object, traj.states[i],
                forward_chunk(traj, int(i), k), label,
            ))
        for i in reverse_idx:
            out.append(ProgressSample(
                traj.task, traj.target_object, traj.states[i],
                reverse_chunk(traj, int(i), k), -label,
            ))
    order = rng.permutation(len(out))
    return [out[j] for j in order]


def all_forward_chunks(dataset, k=DEFAULT_CHUNK_HORIZON):
    """Every stride-1 forward window in the dataset as a (n, 3k) matrix."""
    if not dataset:
        raise EmptyDatasetError("no trajectories to extract chunks from")
    rows = []
    for traj in dataset:
        for i in range(traj.length - k + 1):
            rows.append(traj.actions[i : i + k].reshape(-1))
    return np.asarray(rows)


def write_dataset(path, dataset):
    """Write trajectories in the v1 line format. Floats are written with
    repr (shortest exact round trip), so read(write(x)) is bit-identical."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(DATA_MAGIC + "\n")
        for traj in dataset:
            f.write(f"TRAJ {traj.traj_id} {int(traj.task)} {traj.target_object} {traj.length}\n")
            for i in range(traj.length):
                fields = [repr(float(v)) for v in traj.states[i]]
                fields += [repr(float(v)) for v in traj.actions[i]]
                f.write(f"STEP {i + 1} " + " ".join(fields) + "\n")


def read_dataset(path):
    """Parse a v1 dataset file back into a list of Trajectory records."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file, missing header", line=1)
    if lines[0] != DATA_MAGIC:
        if lines[0].startswith(DATA_MAGIC_PREFIX):
            version = lines[0][len(DATA_MAGIC_PREFIX):]
            raise DatasetFormatError(f"unsupported dataset version {version!r}", line=1)
        raise DatasetFormatError("not a TAPSAMPLE-DATA file", line=1)

    dataset = []
    ln = 1
    n_lines = len(lines)
    while ln < n_lines:
        header = lines[ln].split()
        if len(header) != 5 or header[0] != "TRAJ":
            raise DatasetFormatError(f"expected TRAJ header, got {lines[ln]!r}", line=ln + 1)
        try:
            traj_id, task_code, target, t = (int(tok) for tok in header[1:])
        except ValueError:
            raise DatasetFormatError("non-integer TRAJ fields", line=ln + 1) from None
        if task_code not in (0, 1, 2) or target not in (0, 1) or t < 1:
            raise DatasetFormatError("TRAJ fields out of range", line=ln + 1)
        states = np.empty((t, STATE_DIM))
        actions = np.empty((t, ACTION_DIM))
        for i in range(t):
            ln += 1
            if ln >= n_lines:
                raise DatasetFormatError(
                    f"truncated trajectory {traj_id}: expected {t} steps", line=ln + 1
                )
            tok = lines[ln].split()
            if len(tok) != 2 + STATE_DIM + ACTION_DIM or tok[0] != "STEP":
                raise DatasetFormatError(f"malformed STEP line", line=ln + 1)
            try:
                idx = int(tok[1])
                values = [float(v) for v in tok[2:]]
            except ValueError:
                raise DatasetFormatError("non-numeric STEP fields", line=ln + 1) from None
            if idx != i + 1:
                raise DatasetFormatError(f"expected step {i + 1}, got {idx}", line=ln + 1)
            states[i] = values[:STATE_DIM]
            actions[i] = values[STATE_DIM:]
        dataset.append(Trajectory(traj_id, Task(task_code), target, states, actions))
        ln += 1
    return dataset
