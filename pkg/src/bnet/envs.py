"""Deterministic, seedable episodic environments.

Re-implementations of the two classic control tasks (cart-pole, mountain
car) with the canonical public dynamics constants, plus a grid maze in which
an action tilts the board and the marble rolls in a straight line until it
hits a wall.

Every ``step`` increments the module-level ``env_step_count`` so tests can
assert that searches which must not touch an environment really do not.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .experience import Trajectory, Transition

env_step_count = 0


def _count_step() -> None:
    global env_step_count
    env_step_count += 1


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


@dataclass(frozen=True)
class EnvSpec:
    name: str
    observation_dim: int
    n_actions: int
    max_episode_steps: int
    solve_window: int
    solve_criterion: Callable[[list], bool]


class EpisodeError(RuntimeError):
    pass


class CartPole:
    """Cart-pole balancing, canonical constants, Euler integration, 200-step
    cap, +1 reward per step."""

    observation_dim = 4
    n_actions = 2
    max_episode_steps = 200

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    TOTAL_MASS = MASS_CART + MASS_POLE
    HALF_POLE_LENGTH = 0.5
    POLE_MASS_LENGTH = MASS_POLE * HALF_POLE_LENGTH
    FORCE_MAG = 10.0
    TAU = 0.02
    THETA_THRESHOLD = 12 * 2 * math.pi / 360
    X_THRESHOLD = 2.4

    def __init__(self):
        self._state: np.ndarray | None = None
        self._steps = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = rng.uniform(-0.05, 0.05, size=4)
        self._steps = 0
        self._done = False
        return self._state.copy()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("step() called on a finished episode")
        if action not in (0, 1):
            raise ValueError(f"action {action} out of range for CartPole")
        _count_step()
        x, x_dot, theta, theta_dot = self._state
        force = self.FORCE_MAG if action == 1 else -self.FORCE_MAG
        costheta = math.cos(theta)
        sintheta = math.sin(theta)
        temp = (force + self.POLE_MASS_LENGTH * theta_dot**2 * sintheta) / self.TOTAL_MASS
        theta_acc = (self.GRAVITY * sintheta - costheta * temp) / (
            self.HALF_POLE_LENGTH * (4.0 / 3.0 - self.MASS_POLE * costheta**2 / self.TOTAL_MASS)
        )
        x_acc = temp - self.POLE_MASS_LENGTH * theta_acc * costheta / self.TOTAL_MASS
        x = x + self.TAU * x_dot
        x_dot = x_dot + self.TAU * x_acc
        theta = theta + self.TAU * theta_dot
        theta_dot = theta_dot + self.TAU * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1
        terminal = bool(
            x < -self.X_THRESHOLD
            or x > self.X_THRESHOLD
            or theta < -self.THETA_THRESHOLD
            or theta > self.THETA_THRESHOLD
        )
        truncated = not terminal and self._steps >= self.max_episode_steps
        self._done = terminal or truncated
        return StepResult(self._state.copy(), 1.0, terminal, truncated)


class MountainCar:
    """Under-powered car between two hills; -1 per step, 200-step cap."""

    observation_dim = 2
    n_actions = 3
    max_episode_steps = 200

    MIN_POSITION = -1.2
    MAX_POSITION = 0.6
    MAX_SPEED = 0.07
    GOAL_POSITION = 0.5
    GOAL_VELOCITY = 0.0
    FORCE = 0.001
    GRAVITY = 0.0025

    def __init__(self):
        self._state: np.ndarray | None = None
        self._steps = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = np.array([rng.uniform(-0.6, -0.4), 0.0])
        self._steps = 0
        self._done = False
        return self._state.copy()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("step() called on a finished episode")
        if action not in (0, 1, 2):
            raise ValueError(f"action {action} out of range for MountainCar")
        _count_step()
        position, velocity = self._state
        velocity += (action - 1) * self.FORCE + math.cos(3 * position) * (-self.GRAVITY)
        velocity = min(max(velocity, -self.MAX_SPEED), self.MAX_SPEED)
        position += velocity
        position = min(max(position, self.MIN_POSITION), self.MAX_POSITION)
        if position == self.MIN_POSITION and velocity < 0:
            velocity = 0.0
        self._state = np.array([position, velocity])
        self._steps += 1
        terminal = bool(position >= self.GOAL_POSITION and velocity >= self.GOAL_VELOCITY)
        truncated = not terminal and self._steps >= self.max_episode_steps
        self._done = terminal or truncated
        return StepResult(self._state.copy(), -1.0, terminal, truncated)


# --- grid maze ---------------------------------------------------------------

WALL, FLOOR = "#", "."
MAZE_ACTIONS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}  # up, down, left, right

# Bundled benchmark layout: slide-physics BFS needs exactly 23 actions
# from S to G (validated by tests and by Maze.optimal_action_count).
DEFAULT_MAZE = """\
###############
#G...##.#..#..#
##..#..#..#.#.#
#.#.##.....##.#
#.......#..#..#
###....#..##..#
#####.####....#
#..#..#.#....##
#.......#.###.#
#....##.......#
#.#..#.......##
#.#........##.#
#........#..#.#
#.#......##..S#
###############
"""


class MazeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Maze:
    """Static maze layout plus slide dynamics and goal-distance table."""

    walls: np.ndarray  # (H, W) bool
    start: tuple[int, int]
    goal: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    @classmethod
    def from_text(cls, text: str, require_shape: tuple[int, int] | None = None) -> "Maze":
        rows = [r for r in text.strip("\n").splitlines()]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise MazeFormatError("maze rows must be non-empty and equal length")
        height, width = len(rows), len(rows[0])
        if require_shape is not None and (height, width) != require_shape:
            raise MazeFormatError(f"expected a {require_shape[0]}x{require_shape[1]} maze, got {height}x{width}")
        walls = np.zeros((height, width), dtype=bool)
        start = goal = None
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch == WALL:
                    walls[r, c] = True
                elif ch == "S":
                    if start is not None:
                        raise MazeFormatError("multiple start cells")
                    start = (r, c)
                elif ch == "G":
                    if goal is not None:
                        raise MazeFormatError("multiple goal cells")
                    goal = (r, c)
                elif ch != FLOOR:
                    raise MazeFormatError(f"unknown maze character {ch!r}")
        if start is None or goal is None:
            raise MazeFormatError("maze must contain exactly one S and one G")
        maze = cls(walls, start, goal)
        if maze.optimal_action_count() is None:
            raise MazeFormatError("goal not reachable from start")
        return maze

    def to_text(self) -> str:
        rows = []
        for r in range(self.shape[0]):
            row = []
            for c in range(self.shape[1]):
                if self.walls[r, c]:
                    row.append(WALL)
                elif (r, c) == self.start:
                    row.append("S")
                elif (r, c) == self.goal:
                    row.append("G")
                else:
                    row.append(FLOOR)
            rows.append("".join(row))
        return "\n".join(rows) + "\n"

    def slide(self, cell: tuple[int, int], action: int) -> tuple[int, int]:
        """Roll from ``cell`` until the next wall (the grid edge counts as a
        wall); returns the landing cell, which equals ``cell`` when blocked."""
        dr, dc = MAZE_ACTIONS[action]
        h, w = self.shape
        r, c = cell
        while True:
            nr, nc = r + dr, c + dc
            if nr < 0 or nr >= h or nc < 0 or nc >= w or self.walls[nr, nc]:
                return (r, c)
            r, c = nr, nc

    def goal_distances(self) -> dict[tuple[int, int], int]:
        """Minimum number of slide actions from each reachable cell to goal."""
        # BFS backwards over the slide graph: build predecessor lists first.
        preds: dict[tuple[int, int], list[tuple[int, int]]] = {}
        h, w = self.shape
        for r in range(h):
            for c in range(w):
                if self.walls[r, c]:
                    continue
                for a in MAZE_ACTIONS:
                    nxt = self.slide((r, c), a)
                    if nxt != (r, c):
                        preds.setdefault(nxt, []).append((r, c))
        dist = {self.goal: 0}
        queue = deque([self.goal])
        while queue:
            cur = queue.popleft()
            for prev in preds.get(cur, []):
                if prev not in dist:
                    dist[prev] = dist[cur] + 1
                    queue.append(prev)
        return dist

    def optimal_action_count(self) -> int | None:
        return self.goal_distances().get(self.start)

    def adjacent_floor(self, cell: tuple[int, int]) -> list[tuple[int, int]]:
        h, w = self.shape
        out = []
        for dr, dc in MAZE_ACTIONS.values():
            r, c = cell[0] + dr, cell[1] + dc
            if 0 <= r < h and 0 <= c < w and not self.walls[r, c]:
                out.append((r, c))
        return out


def load_maze(path) -> Maze:
    """Load and validate a 15x15 maze file; see ``Maze.from_text``."""
    with open(path, "r", encoding="ascii") as fh:
        return Maze.from_text(fh.read(), require_shape=(15, 15))


class GridMaze:
    """Tilting-board marble maze with one-hot cell observations.

    Rewards: +10 for landing on the goal, -0.75 for a move that is blocked
    immediately (zero displacement), -0.25 for landing on an already visited
    cell, +0.1 for landing on a new cell. The episode ends at the goal, after
    ``max_episode_steps`` actions, or once the cumulative reward drops to the
    failure floor.

    With ``p_noise > 0`` the *observation* (not the true marble position) is
    displaced onto a uniformly random adjacent floor cell with that
    probability, mimicking unreliable position detection.
    """

    n_actions = 4
    max_episode_steps = 75
    REWARD_GOAL = 10.0
    REWARD_NEW = 0.1
    REWARD_REVISIT = -0.25
    REWARD_BLOCKED = -0.75
    FAIL_REWARD_FLOOR = -12.5

    def __init__(self, maze: Maze | None = None, p_noise: float = 0.0):
        self.maze = maze if maze is not None else Maze.from_text(DEFAULT_MAZE)
        if not 0.0 <= p_noise <= 1.0:
            raise ValueError("p_noise must lie in [0, 1]")
        self.p_noise = p_noise
        self.observation_dim = self.maze.shape[0] * self.maze.shape[1]
        self._cell: tuple[int, int] | None = None
        self._visited: set[tuple[int, int]] = set()
        self._steps = 0
        self._cum_reward = 0.0
        self._done = True
        self._rng: np.random.Generator | None = None

    def _observe(self, cell: tuple[int, int]) -> np.ndarray:
        shown = cell
        if self.p_noise > 0.0 and self._rng is not None and self._rng.random() < self.p_noise:
            neighbors = self.maze.adjacent_floor(cell)
            if neighbors:
                shown = neighbors[self._rng.integers(len(neighbors))]
        obs = np.zeros(self.observation_dim)
        obs[shown[0] * self.maze.shape[1] + shown[1]] = 1.0
        return obs

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        self._cell = self.maze.start
        self._visited = {self.maze.start}
        self._steps = 0
        self._cum_reward = 0.0
        self._done = False
        return self._observe(self._cell)

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("step() called on a finished episode")
        if action not in MAZE_ACTIONS:
            raise ValueError(f"action {action} out of range for GridMaze")
        _count_step()
        landing = self.maze.slide(self._cell, action)
        if landing == self.maze.goal:
            reward = self.REWARD_GOAL
        elif landing == self._cell:
            reward = self.REWARD_BLOCKED
        elif landing in self._visited:
            reward = self.REWARD_REVISIT
        else:
            reward = self.REWARD_NEW
        self._visited.add(landing)
        self._cell = landing
        self._steps += 1
        self._cum_reward += reward
        terminal = landing == self.maze.goal or self._cum_reward <= self.FAIL_REWARD_FLOOR
        truncated = not terminal and self._steps >= self.max_episode_steps
        self._done = terminal or truncated
        return StepResult(self._observe(landing), reward, terminal, truncated)

    def cell_of_state(self, state: np.ndarray) -> tuple[int, int]:
        idx = int(np.argmax(state))
        return divmod(idx, self.maze.shape[1])

    def progress_fitness(self, trajectory: Trajectory) -> float:
        """Number of actions that strictly reduced the slide-BFS distance to
        the goal. This is the selection fitness for the maze benchmark."""
        dist = self.maze.goal_distances()
        cells = [self.cell_of_state(t.state) for t in trajectory.transitions]
        if trajectory.final_state is not None:
            cells.append(self.cell_of_state(trajectory.final_state))
        correct = 0
        for a, b in zip(cells, cells[1:]):
            if a in dist and b in dist and dist[b] < dist[a]:
                correct += 1
        return float(correct)


# --- episode rollout ---------------------------------------------------------

RUN_MODES = ("deterministic", "stochastic", "explore")


def run_episode(env, policy, rng: np.random.Generator, mode: str = "deterministic",
                epsilon: float = 0.0, source_id: int | None = None) -> Trajectory:
    """Roll one full episode and record every transition.

    ``deterministic`` takes the argmax action (ties resolve to the lowest
    action id), ``stochastic`` samples from the policy distribution, and
    ``explore`` takes a uniformly random action with probability ``epsilon``
    and otherwise samples. The stored per-step distribution is always the
    policy's own output, even when exploration overrode the action.
    """
    if mode not in RUN_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    fwd = getattr(policy, "forward", policy)
    state = env.reset(rng)
    transitions = []
    while True:
        probs = np.asarray(fwd(state), dtype=np.float64)
        if probs.shape != (env.n_actions,):
            raise ValueError(f"policy output shape {probs.shape} != ({env.n_actions},)")
        if not np.all(np.isfinite(probs)):
            raise ValueError("non-finite policy output")
        if mode == "deterministic":
            action = int(np.argmax(probs))
        elif mode == "explore" and rng.random() < epsilon:
            action = int(rng.integers(env.n_actions))
        else:
            action = int(rng.choice(env.n_actions, p=probs / probs.sum()))
        result = env.step(action)
        transitions.append(Transition(state, action, result.reward, probs))
        state = result.next_state
        if result.done:
            return Trajectory(transitions, final_state=state, source_id=source_id, mode=mode)


# --- solve criteria ----------------------------------------------------------

def _mean_tail(history: list, window: int) -> float:
    return float(np.mean(history[-window:]))


def make_env(name: str, p_noise: float = 0.0, maze: Maze | None = None):
    if name == "cartpole":
        return CartPole()
    if name == "mountaincar":
        return MountainCar()
    if name == "gridmaze":
        return GridMaze(maze=maze, p_noise=p_noise)
    raise ValueError(f"unknown environment {name!r}; expected cartpole, mountaincar or gridmaze")


def env_spec(name: str) -> EnvSpec:
    if name == "cartpole":
        return EnvSpec("cartpole", 4, 2, 200, 100,
                       lambda hist: len(hist) >= 100 and _mean_tail(hist, 100) >= 195.0)
    if name == "mountaincar":
        return EnvSpec("mountaincar", 2, 3, 200, 100,
                       lambda hist: len(hist) >= 100 and _mean_tail(hist, 100) >= -110.0)
    if name == "gridmaze":
        return EnvSpec("gridmaze", 225, 4, 75, 1,
                       lambda hist: len(hist) >= 1 and hist[-1] >= 23.0)
    raise ValueError(f"unknown environment {name!r}")


def is_solved(spec: EnvSpec, eval_history: list) -> bool:
    """Solve predicate over a history of evaluation-episode fitnesses."""
    if not eval_history:
        raise ValueError("empty evaluation history")
    return bool(spec.solve_criterion(list(eval_history)))
