"""Toy environments for the three observation modalities plus scripted experts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .tokenizer import HybridObs, ImageObs, ProprioObs

# up, down, left, right
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
VOCAB = ("<pad>", "go", "to", "the", "red", "green", "blue", "ball", "box", "key")
WORD_ID = {w: i for i, w in enumerate(VOCAB)}


class EnvError(RuntimeError):
    pass


def _grid_cell(rng: np.random.Generator, size: int, taken) -> tuple[int, int]:
    while True:
        cell = (int(rng.integers(size)), int(rng.integers(size)))
        if cell not in taken:
            return cell


@dataclass
class GridImage:
    """Sparse-reward navigation on a ``size x size`` grid rendered as pixels.

    The agent and a goal are drawn at random cells; each cell becomes a
    ``scale x scale`` block, so the default observation is 12x12x1.
    """

    size: int = 6
    scale: int = 2
    horizon: int = 40
    agent_value: float = -1.0
    goal_value: float = 1.0
    background: float = 0.0
    name: str = "grid-image"

    modality = "image"
    action_type = "discrete"
    n_actions = 4

    agent: tuple[int, int] = field(default=(0, 0), init=False)
    goal: tuple[int, int] = field(default=(0, 0), init=False)
    t: int = field(default=0, init=False)
    done: bool = field(default=True, init=False)

    @property
    def obs_shape(self) -> tuple[int, ...]:
        side = self.size * self.scale
        return (side, side, 1)

    def config(self) -> dict[str, Any]:
        return {"name": self.name, "size": self.size, "scale": self.scale, "horizon": self.horizon,
                "agent_value": self.agent_value, "goal_value": self.goal_value, "background": self.background}

    def _place(self, rng):
        self.agent = _grid_cell(rng, self.size, ())
        self.goal = _grid_cell(rng, self.size, {self.agent})

    def reset(self, seed: int | None = None):
        rng = np.random.default_rng(seed)
        self._place(rng)
        self.t = 0
        self.done = False
        return self.observe()

    def _paint(self, img, cell, value):
        r, c = cell
        s = self.scale
        img[r * s:(r + 1) * s, c * s:(c + 1) * s] = value

    def render(self) -> np.ndarray:
        img = np.full(self.obs_shape, self.background)
        self._paint(img, self.goal, self.goal_value)
        self._paint(img, self.agent, self.agent_value)
        return img

    def observe(self):
        return ImageObs(self.render())

    def _move(self, action) -> None:
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise EnvError(f"invalid action {action}")
        r, c = np.clip(np.array(self.agent) + MOVES[action], 0, self.size - 1)
        self.agent = (int(r), int(c))

    def step(self, action):
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        self._move(action)
        self.t += 1
        reward = 0.0
        if self.agent == self.goal:
            reward, self.done = 1.0, True
        elif self.t >= self.horizon:
            self.done = True
        return self.observe(), reward, self.done

    def target(self) -> tuple[int, int]:
        return self.goal

    def optimal_actions(self) -> list[int]:
        """Every move that shortens the Manhattan distance, vertical first."""
        (r, c), (gr, gc) = self.agent, self.target()
        moves = []
        if r != gr:
            moves.append(0 if gr < r else 1)
        if c != gc:
            moves.append(2 if gc < c else 3)
        return moves

    def expert_action(self, rng: np.random.Generator | None = None) -> int:
        """Shortest-path move; ties are broken by ``rng`` when given, else vertical first."""
        moves = self.optimal_actions()
        if rng is None or len(moves) == 1:
            return moves[0]
        return moves[int(rng.integers(len(moves)))]

    def random_action(self, rng: np.random.Generator):
        return int(rng.integers(self.n_actions))


@dataclass
class InstructionGrid(GridImage):
    """RGB grid with two coloured objects; the instruction names the goal."""

    name: str = "instruction-grid"
    n_objects: int = 2

    modality = "hybrid"

    objects: dict = field(default_factory=dict, init=False)
    goal_color: str = field(default="red", init=False)

    @property
    def obs_shape(self) -> tuple[int, ...]:
        side = self.size * self.scale
        return (side, side, 3)

    @property
    def n_words(self) -> int:
        return 3

    @property
    def vocab_size(self) -> int:
        return len(VOCAB)

    def config(self) -> dict[str, Any]:
        cfg = super().config()
        del cfg["goal_value"]
        cfg["n_objects"] = self.n_objects
        return cfg

    def _place(self, rng):
        self.agent = _grid_cell(rng, self.size, ())
        taken = {self.agent}
        names = list(COLORS)
        colors = [names[i] for i in rng.permutation(len(names))[: self.n_objects]]
        self.objects = {}
        for color in colors:
            cell = _grid_cell(rng, self.size, taken)
            taken.add(cell)
            self.objects[color] = cell
        self.goal_color = colors[int(rng.integers(len(colors)))]
        self.goal = self.objects[self.goal_color]

    def render(self) -> np.ndarray:
        img = np.full(self.obs_shape, self.background)
        for color, cell in self.objects.items():
            self._paint(img, cell, COLORS[color])
        self._paint(img, self.agent, (self.agent_value,) * 3)
        return img

    def instruction(self) -> np.ndarray:
        return np.array([WORD_ID["go"], WORD_ID["to"], WORD_ID[self.goal_color]], dtype=np.int64)

    def observe(self):
        return HybridObs(ImageObs(self.render()), self.instruction())


@dataclass
class PointMass:
    """2-D point mass steered towards the origin.

    Observation ``[x, y, vx, vy]``; reward is minus the distance to the
    origin after each step; the episode ends inside ``goal_radius``.
    """

    horizon: int = 100
    dt: float = 0.1
    damping: float = 0.7
    speed: float = 2.0
    goal_radius: float = 0.1
    discrete: bool = False
    name: str = "point-mass"

    modality = "proprio"
    obs_shape = (4,)

    pos: np.ndarray = field(default_factory=lambda: np.zeros(2), init=False)
    vel: np.ndarray = field(default_factory=lambda: np.zeros(2), init=False)
    t: int = field(default=0, init=False)
    done: bool = field(default=True, init=False)

    # discretized action set: noop plus four unit pushes
    DISCRETE_ACTIONS = np.array([(0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (-1.0, 0.0), (1.0, 0.0)])

    @property
    def action_type(self) -> str:
        return "discrete" if self.discrete else "continuous"

    @property
    def n_actions(self) -> int:
        return len(self.DISCRETE_ACTIONS) if self.discrete else 2

    def config(self) -> dict[str, Any]:
        return {"name": self.name, "horizon": self.horizon, "dt": self.dt, "damping": self.damping, "speed": self.speed,
                "goal_radius": self.goal_radius, "discrete": self.discrete}

    def reset(self, seed: int | None = None):
        rng = np.random.default_rng(seed)
        while True:
            pos = rng.uniform(-1.0, 1.0, size=2)
            if np.linalg.norm(pos) > 2 * self.goal_radius:
                break
        self.pos, self.vel = pos, np.zeros(2)
        self.t = 0
        self.done = False
        return self.observe()

    def observe(self):
        return ProprioObs(np.concatenate([self.pos, self.vel]))

    def distance(self) -> float:
        return float(np.linalg.norm(self.pos))

    def _force(self, action) -> np.ndarray:
        if self.discrete:
            a = int(action)
            if not 0 <= a < len(self.DISCRETE_ACTIONS):
                raise EnvError(f"invalid action {a}")
            return self.DISCRETE_ACTIONS[a]
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise EnvError(f"invalid continuous action {action!r}")
        return np.clip(a, -1.0, 1.0)

    def step(self, action):
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        force = self._force(action)
        self.vel = self.damping * self.vel + (1.0 - self.damping) * force
        self.pos = self.pos + self.speed * self.dt * self.vel
        self.t += 1
        dist = self.distance()
        reward = -dist
        self.done = dist < self.goal_radius or self.t >= self.horizon
        return self.observe(), reward, self.done

    def expert_action(self, rng: np.random.Generator | None = None):
        # overdamped proportional-derivative controller
        force = np.clip(-2.0 * self.pos - 1.0 * self.vel, -1.0, 1.0)
        if not self.discrete:
            return force
        scores = self.DISCRETE_ACTIONS @ force
        return int(np.argmax(scores))

    def random_action(self, rng: np.random.Generator):
        if self.discrete:
            return int(rng.integers(len(self.DISCRETE_ACTIONS)))
        return rng.uniform(-1.0, 1.0, size=2)


ENV_TYPES = {"grid-image": GridImage, "instruction-grid": InstructionGrid, "point-mass": PointMass}


def make_env(config: dict[str, Any] | str):
    if isinstance(config, str):
        config = {"name": config}
    config = dict(config)
    name = config.get("name")
    if name not in ENV_TYPES:
        raise EnvError(f"unknown env {name!r}; choose from {sorted(ENV_TYPES)}")
    return ENV_TYPES[name](**config)


def expert_policy(env, rng: np.random.Generator | None = None, eps: float = 0.0):
    """Scripted expert; with probability ``eps`` a uniform random action."""
    if eps > 0.0:
        if rng is None:
            raise ValueError("eps > 0 needs an rng")
        if rng.random() < eps:
            return env.random_action(rng)
    return env.expert_action(rng)


def obs_arrays(obs) -> tuple[np.ndarray, np.ndarray | None]:
    """Split an observation into ``(array, words-or-None)``."""
    if isinstance(obs, HybridObs):
        return np.asarray(obs.image.pixels, dtype=np.float64), np.asarray(obs.words, dtype=np.int64)
    if isinstance(obs, ImageObs):
        return np.asarray(obs.pixels, dtype=np.float64), None
    if isinstance(obs, ProprioObs):
        return np.asarray(obs.values, dtype=np.float64), None
    raise TypeError(f"unknown observation {type(obs).__name__}")
