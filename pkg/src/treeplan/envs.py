"""Small deterministic environments for training and oracle tests.

LavaGrid is an N-by-N gridworld: the agent turns or steps forward,
lava ends the episode with nothing, and reaching the fixed goal in the
lower-right corner pays between 5 and 10 depending on how close the
episode came to the shortest possible action sequence. ChainEnv is a
one-dimensional walk with a closed-form optimal value, used to sanity
check planners against an exact model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

LEFT, RIGHT, FORWARD = 0, 1, 2
# orientation: 0 north, 1 east, 2 south, 3 west
_DELTAS = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}
_ORIENT_CHARS = "^>v<"


@dataclass
class GridConfig:
    size: int = 5
    n_lava: int = 3
    step_limit: int | None = None   # default 4 * size^2
    max_layout_attempts: int = 1000

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError("grid size must be at least 2")
        if self.n_lava < 0:
            raise ConfigError("n_lava must be non-negative")
        if self.n_lava > self.size * self.size - 2:
            raise ConfigError("too many lava tiles for the grid")

    @property
    def effective_step_limit(self) -> int:
        return self.step_limit if self.step_limit is not None \
            else 4 * self.size * self.size


class LavaGrid:
    """Gridworld with turn-left / turn-right / forward actions.

    The goal sits at (size-1, size-1). Layouts are sampled at reset:
    agent cell, orientation and lava cells are drawn so that agent,
    goal and lava are pairwise disjoint and the goal is reachable;
    unreachable layouts are redrawn up to a configured attempt limit.
    Observations are flat one-hot planes: agent cell, orientation,
    lava cells, goal cell.
    """

    num_actions = 3

    def __init__(self, cfg: GridConfig = None):
        self.cfg = cfg or GridConfig()
        n = self.cfg.size
        self.goal = (n - 1, n - 1)
        self.lava: set = set()
        self.agent = (0, 0)
        self.orientation = 0
        self.steps_taken = 0
        self.optimal_steps_at_reset = 0
        self.done = True

    @property
    def observation_dim(self) -> int:
        n = self.cfg.size
        return 3 * n * n + 4

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n = self.cfg.size
        cells = [(r, c) for r in range(n) for c in range(n)]
        for attempt in range(self.cfg.max_layout_attempts):
            candidates = [c for c in cells if c != self.goal]
            idx = rng.choice(len(candidates), size=self.cfg.n_lava + 1,
                             replace=False)
            agent = candidates[idx[0]]
            lava = {candidates[i] for i in idx[1:]}
            orientation = int(rng.integers(4))
            dist = self._shortest(agent, orientation, lava)
            if dist is not None:
                self.agent = agent
                self.orientation = orientation
                self.lava = lava
                self.optimal_steps_at_reset = dist
                self.steps_taken = 0
                self.done = False
                return self.observation()
        raise ConfigError(
            f"no solvable layout found in {self.cfg.max_layout_attempts} attempts"
        )

    def _shortest(self, start_cell, start_orient, lava) -> int | None:
        """BFS action count from a pose to the goal cell, or None.

        States are (row, col, orientation); turns cost one action like
        forward moves. Forward into a wall would waste a move and is
        skipped; lava cells are not traversable.
        """
        n = self.cfg.size
        if start_cell == self.goal:
            return 0
        seen = {(start_cell, start_orient)}
        frontier = deque([(start_cell, start_orient, 0)])
        while frontier:
            cell, orient, dist = frontier.popleft()
            moves = [
                (cell, (orient - 1) % 4),
                (cell, (orient + 1) % 4),
            ]
            dr, dc = _DELTAS[orient]
            fwd = (cell[0] + dr, cell[1] + dc)
            if 0 <= fwd[0] < n and 0 <= fwd[1] < n and fwd not in lava:
                if fwd == self.goal:
                    return dist + 1
                moves.append((fwd, orient))
            for ncell, norient in moves:
                key = (ncell, norient)
                if key not in seen:
                    seen.add(key)
                    frontier.append((ncell, norient, dist + 1))
        return None

    def optimal_steps(self) -> int:
        """Shortest action count from the pose set at reset."""
        return self.optimal_steps_at_reset

    def observation(self) -> np.ndarray:
        n = self.cfg.size
        agent_plane = np.zeros((n, n))
        agent_plane[self.agent] = 1.0
        orient = np.zeros(4)
        orient[self.orientation] = 1.0
        lava_plane = np.zeros((n, n))
        for cell in self.lava:
            lava_plane[cell] = 1.0
        goal_plane = np.zeros((n, n))
        goal_plane[self.goal] = 1.0
        return np.concatenate([
            agent_plane.ravel(), orient, lava_plane.ravel(), goal_plane.ravel(),
        ])

    def step(self, action: int):
        """Returns (observation, reward, done)."""
        if self.done:
            raise UsageError("step() called on a finished episode")
        if action not in (LEFT, RIGHT, FORWARD):
            raise UsageError(f"invalid action {action}")
        self.steps_taken += 1
        reward = 0.0
        if action == LEFT:
            self.orientation = (self.orientation - 1) % 4
        elif action == RIGHT:
            self.orientation = (self.orientation + 1) % 4
        else:
            dr, dc = _DELTAS[self.orientation]
            target = (self.agent[0] + dr, self.agent[1] + dc)
            n = self.cfg.size
            if 0 <= target[0] < n and 0 <= target[1] < n:
                self.agent = target
                if target in self.lava:
                    self.done = True
                    return self.observation(), 0.0, True
                if target == self.goal:
                    self.done = True
                    ratio = self.optimal_steps_at_reset / self.steps_taken
                    reward = 5.0 + 5.0 * ratio
                    return self.observation(), reward, True
        if self.steps_taken >= self.cfg.effective_step_limit:
            self.done = True
            return self.observation(), 0.0, True
        return self.observation(), 0.0, False

    # -- layout round-trip ---------------------------------------------------

    def layout_text(self) -> str:
        """Grid as text: '.' free, 'L' lava, 'G' goal, agent '^>v<'."""
        n = self.cfg.size
        rows = []
        for r in range(n):
            row = []
            for c in range(n):
                cell = (r, c)
                if cell == self.agent:
                    row.append(_ORIENT_CHARS[self.orientation])
                elif cell in self.lava:
                    row.append("L")
                elif cell == self.goal:
                    row.append("G")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"

    def load_layout_text(self, text: str) -> np.ndarray:
        """Install a dumped layout; resets step counters."""
        lines = [ln for ln in text.strip().split("\n")]
        n = self.cfg.size
        if len(lines) != n or any(len(ln) != n for ln in lines):
            raise ConfigError(f"layout text is not {n}x{n}")
        agent = None
        lava = set()
        for r, line in enumerate(lines):
            for c, ch in enumerate(line):
                if ch in _ORIENT_CHARS:
                    if agent is not None:
                        raise ConfigError("layout has two agents")
                    agent = (r, c)
                    orientation = _ORIENT_CHARS.index(ch)
                elif ch == "L":
                    lava.add((r, c))
                elif ch == "G":
                    if (r, c) != self.goal:
                        raise ConfigError("goal must sit in the lower-right corner")
                elif ch != ".":
                    raise ConfigError(f"unknown layout character '{ch}'")
        if agent is None:
            raise ConfigError("layout has no agent")
        if len(lava) != self.cfg.n_lava:
            raise ConfigError(
                f"layout has {len(lava)} lava tiles, config wants {self.cfg.n_lava}"
            )
        dist = self._shortest(agent, orientation, lava)
        if dist is None:
            raise ConfigError("layout is unsolvable")
        self.agent = agent
        self.orientation = orientation
        self.lava = lava
        self.optimal_steps_at_reset = dist
        self.steps_taken = 0
        self.done = False
        return self.observation()


class ChainEnv:
    """Positions 0..n-1; moving costs nothing, the right end pays 1.

    Taking any action at the right terminus yields reward 1 and ends
    the episode, so the optimal value of position i is exactly
    gamma ** (n - 1 - i): one discount factor per action needed to
    reach the terminus, where the final action collects the unit.
    """

    num_actions = 2

    def __init__(self, length: int = 6):
        if length < 2:
            raise ConfigError("chain length must be at least 2")
        self.length = length
        self.pos = 0
        self.steps_taken = 0
        self.done = True

    @property
    def observation_dim(self) -> int:
        return self.length

    def reset(self, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.pos = int(rng.integers(self.length - 1))
        self.steps_taken = 0
        self.done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.length)
        obs[self.pos] = 1.0
        return obs

    def optimal_value(self, pos: int, gamma: float) -> float:
        return gamma ** (self.length - 1 - pos)

    def step(self, action: int):
        if self.done:
            raise UsageError("step() called on a finished episode")
        self.steps_taken += 1
        if self.pos == self.length - 1:
            self.done = True
            return self.observation(), 1.0, True
        if action == 1:
            self.pos += 1
        elif self.pos > 0:
            self.pos -= 1
        if self.steps_taken >= 4 * self.length:
            self.done = True
            return self.observation(), 0.0, True
        return self.observation(), 0.0, False


class ExactChainModel:
    """Drop-in model for the planner backed by the true chain MDP.

    Latents are one-hot position vectors with a sink slot for the
    absorbing post-terminal state plus one extra channel holding the
    reward collected on the incoming transition, so prediction needs
    nothing but the latent. Values are the closed-form optimum and the
    prior is uniform; a planner searching with this model must walk
    right.
    """

    def __init__(self, length: int, gamma: float):
        self.length = length
        self.gamma = gamma
        self.num_actions = 2

    def _latent(self, state: int, last_reward: float) -> np.ndarray:
        z = np.zeros(self.length + 2)
        z[state] = 1.0
        z[-1] = last_reward
        return z

    def represent(self, obs: np.ndarray) -> np.ndarray:
        pos = int(np.argmax(obs))
        return self._latent(pos, 0.0)

    def _transition(self, state: int, action: int):
        sink = self.length
        if state == sink:
            return sink, 0.0
        if state == self.length - 1:
            return sink, 1.0
        if action == 1:
            return state + 1, 0.0
        return max(state - 1, 0), 0.0

    def forward_tokens(self, root_latent, actions, depths, parents):
        states = [int(np.argmax(root_latent[:-1]))]
        latents = [np.asarray(root_latent, dtype=np.float64)]
        for i, action in enumerate(actions):
            parent_state = states[parents[i]]
            state, reward = self._transition(parent_state, int(action))
            states.append(state)
            latents.append(self._latent(state, reward))
        return np.stack(latents)

    def predict(self, latents: np.ndarray):
        latents = np.atleast_2d(latents)
        m = latents.shape[0]
        values = np.empty(m)
        rewards = np.empty(m)
        for i in range(m):
            state = int(np.argmax(latents[i, :-1]))
            if state >= self.length:
                values[i] = 0.0
            else:
                values[i] = self.gamma ** (self.length - 1 - state)
            rewards[i] = latents[i, -1]
        priors = np.full((m, 2), 0.5)
        return values, rewards, priors


def random_policy_baseline(env, episodes: int, seed: int) -> float:
    """Mean episode reward of uniformly random actions."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for ep in range(episodes):
        env.reset(seed * 1_000_003 + ep)
        done = False
        while not done:
            _, reward, done = env.step(int(rng.integers(env.num_actions)))
            total += reward
    return total / episodes
