"""Goal-conditioned 2-D point mazes, a scripted reaching expert and offline datasets.

World coordinates put cell ``(row, col)`` of a layout's grid centred at
``(col + origin_x, row + origin_y)``; each cell is a unit square. The agent
is a point that moves by at most one unit per axis per step.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUCCESS_RADIUS = 1.2
ACTION_LOW = -1.0
ACTION_HIGH = 1.0
DEFAULT_HORIZON = 500
DEFAULT_EXPERT_NOISE = 0.25

# '#' wall, '.' free, 'S' start, 'G' goal (both free).
MAZE_ROWS = (
    "##################",
    "##########.#######",
    "#S...............#",
    "################.#",
    "#................#",
    "#.################",
    "#................#",
    "################.#",
    "#G...............#",
    "######.###########",
    "##################",
)


class ParseError(ValueError):
    """A dataset file is malformed."""


class EpisodeDone(RuntimeError):
    """``step`` was called on a finished episode."""


@dataclass
class MazeSpec:
    name: str
    free: np.ndarray  # bool grid, True where the agent may be
    origin: tuple[float, float]
    start_cells: list[tuple[int, int]]
    goal_cells: list[tuple[int, int]]  # empty: goals uniform over free space
    horizon: int = DEFAULT_HORIZON
    success_radius: float = SUCCESS_RADIUS

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        r, c = cell
        return np.array([c + self.origin[0], r + self.origin[1]], dtype=np.float64)

    def cell_of(self, pos: np.ndarray) -> tuple[int, int]:
        c = int(np.floor(pos[0] - self.origin[0] + 0.5))
        r = int(np.floor(pos[1] - self.origin[1] + 0.5))
        return r, c

    def is_free(self, pos: np.ndarray) -> bool:
        r, c = self.cell_of(pos)
        rows, cols = self.free.shape
        return 0 <= r < rows and 0 <= c < cols and bool(self.free[r, c])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box ``(low, high)`` enclosing all free cells."""
        rows, cols = np.nonzero(self.free)
        low = np.array([cols.min() + self.origin[0] - 0.5, rows.min() + self.origin[1] - 0.5])
        high = np.array([cols.max() + self.origin[0] + 0.5, rows.max() + self.origin[1] + 0.5])
        return low, high

    @property
    def diagonal(self) -> float:
        low, high = self.bounds
        return float(np.linalg.norm(high - low))

    def sample_free_position(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform point over the free area."""
        rows, cols = np.nonzero(self.free)
        i = rng.integers(len(rows))
        pos = self.cell_center((rows[i], cols[i])) + rng.uniform(-0.5, 0.5, size=2)
        # keep strictly inside the half-open cell
        return np.minimum(pos, self.cell_center((rows[i], cols[i])) + 0.5 - 1e-9)


def _from_rows(name: str, rows: tuple[str, ...], origin=(0.0, 0.0), **kw) -> MazeSpec:
    grid = np.array([list(r) for r in rows])
    free = grid != "#"
    starts = [tuple(int(v) for v in rc) for rc in np.argwhere(grid == "S")]
    goals = [tuple(int(v) for v in rc) for rc in np.argwhere(grid == "G")]
    return MazeSpec(name, free, origin, starts, goals, **kw)


def room_spec(size: int = 29, name: str = "room") -> MazeSpec:
    half = size // 2
    free = np.ones((size, size), dtype=bool)
    corners = [(0, 0), (0, size - 1), (size - 1, 0), (size - 1, size - 1)]
    return MazeSpec(name, free, (-float(half), -float(half)), [(half, half)], corners)


def corridor_spec(length: int = 60, name: str = "corridor") -> MazeSpec:
    """U-shaped corridor: ``length`` cells east, 3 cells south, ``length`` cells west."""
    free = np.zeros((3, length), dtype=bool)
    free[0, :] = True
    free[2, :] = True
    free[:, length - 1] = True
    return MazeSpec(name, free, (0.0, 0.0), [(0, 0)], [(2, 0)])


def maze_spec() -> MazeSpec:
    return _from_rows("maze", MAZE_ROWS)


LAYOUTS = {
    "room": lambda: room_spec(29, "room"),
    "room81": lambda: room_spec(81, "room81"),
    "corridor": lambda: corridor_spec(60, "corridor"),
    "corridor_short": lambda: corridor_spec(30, "corridor_short"),
    "maze": maze_spec,
}


def get_layout(name: str) -> MazeSpec:
    try:
        return LAYOUTS[name]()
    except KeyError:
        raise ValueError(f"unknown layout {name!r}; choose from {sorted(LAYOUTS)}") from None


def bfs_distance(spec: MazeSpec, start: tuple[int, int], goal: tuple[int, int]) -> int:
    """4-connected unit-step shortest path length between two free cells (-1 if unreachable)."""
    rows, cols = spec.free.shape
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            return dist[cell]
        r, c = cell
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < rows and 0 <= nc < cols and spec.free[nr, nc] and (nr, nc) not in dist:
                dist[(nr, nc)] = dist[cell] + 1
                queue.append((nr, nc))
    return -1


def reward_fn(achieved: np.ndarray, goal: np.ndarray, radius: float = SUCCESS_RADIUS) -> np.ndarray:
    """1.0 where the achieved position lies strictly within ``radius`` of the goal."""
    d = np.linalg.norm(np.asarray(achieved) - np.asarray(goal), axis=-1)
    return (d < radius).astype(np.float64)


class MazeEnv:
    """Point agent with velocity control and axis-separated wall sliding."""

    def __init__(self, spec: MazeSpec, seed: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)
        self.t = 0
        self.done = True

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def act_dim(self) -> int:
        return 2

    def observation(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal])

    def reset(self, goal: np.ndarray | None = None) -> np.ndarray:
        spec = self.spec
        start = spec.start_cells[self.rng.integers(len(spec.start_cells))]
        self.pos = spec.cell_center(start)
        if goal is not None:
            self.goal = np.asarray(goal, dtype=np.float64).copy()
        elif spec.goal_cells:
            self.goal = spec.cell_center(spec.goal_cells[self.rng.integers(len(spec.goal_cells))])
        else:
            self.goal = spec.sample_free_position(self.rng)
        self.t = 0
        self.done = False
        return self.observation()

    def move(self, action) -> np.ndarray:
        """Integrate one clipped action with wall sliding; returns the new position."""
        a = np.clip(np.asarray(action, dtype=np.float64), ACTION_LOW, ACTION_HIGH)
        pos = self.pos.copy()
        for axis in (0, 1):
            trial = pos.copy()
            trial[axis] += a[axis]
            if self.spec.is_free(trial):
                pos = trial
        self.pos = pos
        return pos

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeDone("step called after the episode ended; call reset()")
        if not np.all(np.isfinite(action)):
            raise ValueError(f"non-finite action {action!r}")
        self.move(action)
        self.t += 1
        reward = float(reward_fn(self.pos, self.goal, self.spec.success_radius))
        self.done = reward > 0.0 or self.t >= self.spec.horizon
        return self.observation(), reward, self.done


def make_env(layout: str, seed: int | None = None) -> MazeEnv:
    return MazeEnv(get_layout(layout), seed)


# -- scripted expert and datasets -------------------------------------------
def scripted_expert(pos, goal, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy distance vector to the goal, rescaled only if a component exceeds the bounds."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    v = np.asarray(goal, dtype=np.float64) - np.asarray(pos, dtype=np.float64)
    if noise_std > 0:
        v = v + noise_std * rng.standard_normal(v.shape)
    peak = np.max(np.abs(v))
    if peak > ACTION_HIGH:
        v = v * (ACTION_HIGH / peak)
    return v


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 2) positions
    actions: np.ndarray  # (T, 2), actions[t] taken in states[t]

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class OfflineDataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    state_dim: int = 2
    action_dim: int = 2

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_pairs(self) -> int:
        return sum(len(t) for t in self.trajectories)


def collect_dataset(
    n_traj: int,
    traj_len: int,
    noise_std: float = DEFAULT_EXPERT_NOISE,
    rng: np.random.Generator | None = None,
    layout: str = "room",
) -> OfflineDataset:
    """Goal-reaching expert rollouts; goals are uniform over free space and resampled on arrival."""
    if n_traj < 1 or traj_len < 1:
        raise ValueError("n_traj and traj_len must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = get_layout(layout)
    env = MazeEnv(spec)
    trajs = []
    for _ in range(n_traj):
        env.rng = rng
        env.reset(goal=spec.sample_free_position(rng))
        states = np.zeros((traj_len, 2))
        actions = np.zeros((traj_len, 2))
        for t in range(traj_len):
            states[t] = env.pos
            a = scripted_expert(env.pos, env.goal, noise_std, rng)
            actions[t] = a
            env.move(a)
            if reward_fn(env.pos, env.goal, spec.success_radius) > 0:
                env.goal = spec.sample_free_position(rng)
        trajs.append(Trajectory(states, actions))
    return OfflineDataset(trajs)


DATASET_HEADER = ["traj_id", "t", "s0", "s1", "a0", "a1"]


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_HEADER)
        for i, traj in enumerate(dataset.trajectories):
            for t in range(len(traj)):
                s, a = traj.states[t], traj.actions[t]
                w.writerow([i, t, repr(float(s[0])), repr(float(s[1])), repr(float(a[0])), repr(float(a[1]))])


def load_dataset(path: str | Path) -> OfflineDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(DATASET_HEADER)}, got {header}")
        rows: dict[int, list[tuple[int, list[float]]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(DATASET_HEADER):
                raise ParseError(f"{path}:{line_no}: expected {len(DATASET_HEADER)} columns, got {len(row)}")
            try:
                traj_id, t = int(row[0]), int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: {exc}") from exc
            rows.setdefault(traj_id, []).append((t, values))
    trajs = []
    for traj_id in sorted(rows):
        entries = sorted(rows[traj_id])
        if [t for t, _ in entries] != list(range(len(entries))):
            raise ParseError(f"{path}: trajectory {traj_id} has non-contiguous steps")
        arr = np.array([v for _, v in entries], dtype=np.float64)
        trajs.append(Trajectory(arr[:, :2].copy(), arr[:, 2:].copy()))
    return OfflineDataset(trajs)
