"""Offline trajectories, returns-to-go, generation and the JSONL file format.

File layout: a header line ``{"format": "pdit-offline", "version": 1,
"episodes": n, "metadata": {...}}`` followed by one JSON object per
episode with keys ``env, modality, obs, actions, rewards, rtg, gamma, eps``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .envs import expert_policy, make_env, obs_arrays

FORMAT = "pdit-offline"
VERSION = 1
RTG_TOL = 1e-9


class DatasetError(ValueError):
    pass


def compute_returns_to_go(rewards, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise DatasetError("returns-to-go of an empty reward sequence")
    if not 0.0 <= gamma <= 1.0:
        raise DatasetError(f"gamma {gamma} outside [0, 1]")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Trajectory:
    env: str
    modality: str
    observations: np.ndarray  # (T+1, *obs_shape)
    actions: np.ndarray  # (T,) ids or (T, dim)
    rewards: np.ndarray  # (T,)
    rtg: np.ndarray  # (T,)
    gamma: float
    words: np.ndarray | None = None  # (T+1, N_w) for hybrid observations
    eps: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    def validate(self) -> None:
        t = len(self.rewards)
        if t == 0:
            raise DatasetError("trajectory has no steps")
        if len(self.observations) != t + 1 or len(self.actions) != t or len(self.rtg) != t:
            raise DatasetError(
                f"inconsistent lengths: obs {len(self.observations)}, actions {len(self.actions)}, "
                f"rewards {t}, rtg {len(self.rtg)}"
            )
        if self.words is not None and len(self.words) != t + 1:
            raise DatasetError("words sequence length does not match observations")
        expect = compute_returns_to_go(self.rewards, self.gamma)
        err = np.max(np.abs(expect - self.rtg))
        if err > RTG_TOL:
            raise DatasetError(f"returns-to-go violate the recurrence (max error {err:.3g})")

    def to_record(self) -> dict[str, Any]:
        obs = self.observations.tolist()
        if self.words is not None:
            obs = {"image": obs, "words": self.words.tolist()}
        return {
            "env": self.env,
            "modality": self.modality,
            "obs": obs,
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "rtg": self.rtg.tolist(),
            "gamma": self.gamma,
            "eps": self.eps,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Trajectory":
        obs, words = rec["obs"], None
        if isinstance(obs, dict):
            words = np.asarray(obs["words"], dtype=np.int64)
            obs = obs["image"]
        actions = np.asarray(rec["actions"])
        actions = actions.astype(np.int64) if actions.dtype.kind in "iu" else actions.astype(np.float64)
        traj = cls(
            env=rec["env"],
            modality=rec["modality"],
            observations=np.asarray(obs, dtype=np.float64),
            actions=actions,
            rewards=np.asarray(rec["rewards"], dtype=np.float64),
            rtg=np.asarray(rec["rtg"], dtype=np.float64),
            gamma=float(rec["gamma"]),
            words=words,
            eps=float(rec.get("eps", 0.0)),
        )
        traj.validate()
        return traj


@dataclass
class OfflineDataset:
    trajectories: list[Trajectory]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def modality(self) -> str:
        return self.trajectories[0].modality

    @property
    def env_config(self) -> dict[str, Any]:
        return dict(self.metadata.get("env_config") or {"name": self.trajectories[0].env})

    def returns(self) -> np.ndarray:
        return np.array([t.episode_return for t in self.trajectories])

    def n_steps(self) -> int:
        return int(sum(len(t) for t in self.trajectories))

    def validate(self) -> None:
        if not self.trajectories:
            raise DatasetError("dataset has no trajectories")
        for t in self.trajectories:
            t.validate()


# ----------------------------------------------------------------- generation
def normalize_mix(mix: dict) -> tuple[np.ndarray, np.ndarray]:
    if not mix:
        raise DatasetError("quality mix is empty")
    eps = np.array([float(k) for k in mix], dtype=np.float64)
    w = np.array([float(v) for v in mix.values()], dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise DatasetError(f"invalid mixture weights {list(mix.values())}")
    if np.any((eps < 0) | (eps > 1)):
        raise DatasetError("mixture eps values must lie in [0, 1]")
    return eps, w / w.sum()


def rollout(env, seed: int, eps: float, rng: np.random.Generator, gamma: float) -> Trajectory:
    obs = env.reset(seed)
    frames, words = [], []
    actions, rewards = [], []

    def record(o):
        arr, w = obs_arrays(o)
        frames.append(arr)
        if w is not None:
            words.append(w)

    record(obs)
    while not env.done:
        a = expert_policy(env, rng, eps)
        obs, r, _ = env.step(a)
        actions.append(a)
        rewards.append(r)
        record(obs)
    rewards = np.asarray(rewards, dtype=np.float64)
    acts = np.asarray(actions)
    acts = acts.astype(np.int64) if env.action_type == "discrete" else acts.astype(np.float64)
    return Trajectory(
        env=env.name,
        modality=env.modality,
        observations=np.stack(frames),
        actions=acts,
        rewards=rewards,
        rtg=compute_returns_to_go(rewards, gamma),
        gamma=gamma,
        words=np.stack(words) if words else None,
        eps=eps,
    )


def generate_offline_dataset(
    env_config: dict[str, Any] | str,
    episodes: int,
    quality_mix: dict | None = None,
    seed: int = 0,
    gamma: float = 1.0,
) -> OfflineDataset:
    if episodes < 1:
        raise DatasetError("episodes must be >= 1")
    quality_mix = {0.0: 1.0} if quality_mix is None else quality_mix
    eps_values, weights = normalize_mix(quality_mix)
    env = make_env(env_config)
    root = np.random.SeedSequence(seed)
    mix_rng = np.random.default_rng(root.spawn(1)[0])
    children = root.spawn(episodes)
    trajectories = []
    for child in children:
        eps = float(eps_values[mix_rng.choice(len(weights), p=weights)])
        env_seed = int(child.generate_state(1)[0])
        trajectories.append(rollout(env, env_seed, eps, np.random.default_rng(child), gamma))
    meta = {
        "seed": seed,
        "episodes": episodes,
        "quality_mix": {repr(float(k)): float(v) for k, v in quality_mix.items()},
        "env_config": env.config(),
        "gamma": gamma,
    }
    return OfflineDataset(trajectories, meta)


# --------------------------------------------------------------------- file io
def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_to_text(ds: OfflineDataset) -> str:
    header = {"format": FORMAT, "version": VERSION, "episodes": len(ds), "metadata": ds.metadata}
    lines = [_dumps(header)] + [_dumps(t.to_record()) for t in ds.trajectories]
    return "\n".join(lines) + "\n"


def dataset_save(ds: OfflineDataset, path: str | os.PathLike) -> None:
    text = dataset_to_text(ds)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dataset_from_text(text: str) -> OfflineDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError("line 1: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError("line 1: not a pdit offline dataset header")
    if header.get("version") != VERSION:
        raise DatasetError(f"line 1: unsupported dataset version {header.get('version')}")
    trajectories = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            trajectories.append(Trajectory.from_record(rec))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
    expected = header.get("episodes")
    if expected != len(trajectories):
        raise DatasetError(f"header declares {expected} episodes but file holds {len(trajectories)} (truncated?)")
    ds = OfflineDataset(trajectories, header.get("metadata", {}))
    if not trajectories:
        raise DatasetError("dataset has no trajectories")
    return ds


def dataset_load(path: str | os.PathLike) -> OfflineDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return dataset_from_text(fh.read())
