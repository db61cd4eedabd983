"""Saliency and attention maps for a single trajectory window.

Both analyses run one forward pass with a :class:`~pdit.network.Capture`
attached; nothing here modifies parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .engine import Tensor, backward, ops
from .network import NO_DECIDER, NO_PERCEIVER, Capture, PDiTConfig, TrajectoryContext, forward


class IntrospectionError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray  # patch-grid shaped, in [0, 1]
    raw: np.ndarray  # L2 norms before normalization, same shape
    scale: float  # max of ``raw``; 0 when the map is identically zero
    target: int
    words: np.ndarray | None = None  # normalized word-row relevance (hybrid)
    returns: np.ndarray | None = None  # |d target / d return| per window slot

    def to_dict(self) -> dict[str, Any]:
        d = {"values": self.values.tolist(), "raw": self.raw.tolist(), "scale": self.scale, "target": self.target}
        if self.words is not None:
            d["words"] = self.words.tolist()
        if self.returns is not None:
            d["returns"] = self.returns.tolist()
        return d


@dataclass
class AttentionDump:
    """Post-softmax weights for one window: ``perceiving[l]`` is ``(h, 1+N, 1+N)``
    for the current timestep, ``deciding[l]`` is ``(h, 2+3K, 2+3K)``."""

    perceiving: list[np.ndarray] = field(default_factory=list)
    deciding: list[np.ndarray] = field(default_factory=list)

    def integration_rows(self) -> list[np.ndarray]:
        """Attention of the integration token over its observation, per layer: ``(h, 1+N)``."""
        return [a[:, 0, :] for a in self.perceiving]

    def validate(self, atol: float = 1e-6) -> None:
        for kind, mats in (("perceiving", self.perceiving), ("deciding", self.deciding)):
            for layer, a in enumerate(mats):
                if np.any(a < 0):
                    raise IntrospectionError(f"{kind} layer {layer} has negative attention weights")
                err = np.abs(a.sum(axis=-1) - 1.0).max()
                if err > atol:
                    raise IntrospectionError(f"{kind} layer {layer} rows deviate from 1 by {err:.3g}")
        for layer, a in enumerate(self.deciding):
            upper = np.triu(np.ones(a.shape[-2:], dtype=bool), k=1)
            if np.any(a[..., upper] != 0.0):
                raise IntrospectionError(f"deciding layer {layer} puts mass above the diagonal")


def _current_rows(config: PDiTConfig, batch_index: int) -> int:
    """Row of the flattened ``(B*(K+1), ...)`` perceiving batch holding the last timestep."""
    if config.variant == NO_DECIDER:
        return batch_index
    return batch_index * config.window + config.window - 1


def _target_scalar(out: Tensor, config: PDiTConfig, batch_index: int, target: int | None) -> tuple[Tensor, int]:
    row = out[batch_index]
    n = row.shape[-1]
    if target is None:
        target = int(np.argmax(row.data)) if config.discrete else 0
    if not 0 <= int(target) < n:
        raise IndexError(f"target {target} outside output of size {n}")
    target = int(target)
    if config.discrete:
        # logit difference, so a constant shift of all logits leaves it unchanged
        return ops.sub(row[target], ops.mean(row)), target
    return row[target], target


def _normalize(raw: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(raw.max()) if raw.size else 0.0
    if scale <= 0.0:
        return np.zeros_like(raw), 0.0
    return raw / scale, scale


def input_gradient_saliency(
    params: dict[str, Tensor],
    config: PDiTConfig,
    ctx: TrajectoryContext,
    target: int | None = None,
    batch_index: int = 0,
) -> SaliencyMap:
    """Per-patch relevance of the current observation for one action score.

    ``target`` is the action id (discrete, default the argmax) or output
    component (continuous, default 0).
    """
    cap = Capture(grad_returns=True)
    out = forward(ctx, params, config, capture=cap)
    score, target = _target_scalar(out, config, batch_index, target)
    emb = cap.patch_embeddings
    emb.retain_grad()
    backward(score)
    grad = emb.grad if emb.grad is not None else np.zeros(emb.shape)

    if config.variant == NO_PERCEIVER:
        # the observation is embedded whole, so relevance is per raw feature
        g = grad[batch_index, -1]
        pixels = np.abs(g).reshape(config.obs_shape)
        raw = np.sqrt((pixels**2).sum(axis=-1)) if config.modality != "proprio" else pixels
        words = None
    else:
        g = grad[_current_rows(config, batch_index)]
        norms = np.sqrt((g**2).sum(axis=-1))
        n_img = int(np.prod(config.patch_grid()))
        raw = norms[:n_img].reshape(config.patch_grid())
        words = _normalize(norms[n_img:])[0] if config.modality == "hybrid" and config.n_words else None
    values, scale = _normalize(np.maximum(raw, 0.0))

    returns = np.zeros(config.window)
    if cap.returns_input is not None and cap.returns_input.grad is not None:
        returns = np.abs(cap.returns_input.grad[batch_index, :, 0])
    for p in params.values():
        p.grad = None
    return SaliencyMap(values, raw, scale, target, words, returns)


def attention_dump(
    params: dict[str, Tensor],
    config: PDiTConfig,
    ctx: TrajectoryContext,
    batch_index: int = 0,
) -> AttentionDump:
    cap = Capture()
    forward(ctx, params, config, capture=cap)
    row = _current_rows(config, batch_index)
    return AttentionDump(
        perceiving=[np.array(a[row], dtype=np.float64) for a in cap.perceiving_attention],
        deciding=[np.array(a[batch_index], dtype=np.float64) for a in cap.deciding_attention],
    )


# -------------------------------------------------------------------- export
def _graymap(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if not np.all(np.isfinite(v)):
        raise IntrospectionError("cannot render non-finite values")
    lo = min(float(v.min()), 0.0) if v.size else 0.0
    span = float(v.max()) - lo if v.size else 0.0
    if span <= 0.0:
        return np.zeros(v.shape, dtype=np.int64)
    return np.rint((v - lo) / span * 255.0).astype(np.int64)


def export_heatmap(
    values: np.ndarray | SaliencyMap,
    path: str | Path,
    kind: str = "saliency",
    layer: int | None = None,
    head: int | None = None,
) -> tuple[Path, Path]:
    """Write ``path`` (ASCII PGM) and a ``.json`` sidecar with the raw floats."""
    if isinstance(values, SaliencyMap):
        values = values.values
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2:
        raise IntrospectionError(f"heatmaps are 2-D, got shape {v.shape}")
    path = Path(path)
    gray = _graymap(v)
    rows, cols = v.shape
    lines = ["P2", f"{cols} {rows}", "255"] + [" ".join(str(int(x)) for x in r) for r in gray]
    path.write_text("\n".join(lines) + "\n")
    sidecar = path.with_suffix(".json")
    meta = {"kind": kind, "layer": layer, "head": head, "rows": rows, "cols": cols, "values": v.tolist()}
    sidecar.write_text(json.dumps(meta))
    return path, sidecar


def export_dump(dump: AttentionDump, directory: str | Path) -> list[Path]:
    """One heatmap per layer and head, perceiving then deciding."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, mats in (("perceiving", dump.perceiving), ("deciding", dump.deciding)):
        for layer, a in enumerate(mats):
            for head in range(a.shape[0]):
                pgm, _ = export_heatmap(a[head], directory / f"{kind}_l{layer}_h{head}.pgm", kind, layer, head)
                written.append(pgm)
    return written


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "P2":
        raise IntrospectionError(f"{path} is not an ASCII graymap")
    cols, rows = int(tokens[1]), int(tokens[2])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != rows * cols:
        raise IntrospectionError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols)


def read_sidecar(path: str | Path) -> dict[str, Any]:
    meta = json.loads(Path(path).read_text())
    meta["values"] = np.array(meta["values"], dtype=np.float64)
    return meta
