"""Observation tokenizers: image, proprioception, and hybrid image-language.

All functions accept arbitrary leading batch axes so a whole batch of
trajectory windows can be tokenized in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, ops


class TokenizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ImageObs:
    pixels: np.ndarray  # (H, W, C) in [0, 1]

    def __post_init__(self):
        if np.asarray(self.pixels).ndim != 3:
            raise TokenizerConfigError(f"image observation must be HxWxC, got shape {np.shape(self.pixels)}")


@dataclass(frozen=True)
class ProprioObs:
    values: np.ndarray  # (D,)


@dataclass(frozen=True)
class HybridObs:
    image: ImageObs
    words: np.ndarray  # (N_w,) vocabulary ids

    def validate(self, vocab_size: int) -> None:
        words = np.asarray(self.words)
        if words.size and (words.min() < 0 or words.max() >= vocab_size):
            raise IndexError(f"word id {int(words.max())} outside vocabulary of size {vocab_size}")


Observation = ImageObs | ProprioObs | HybridObs


@dataclass
class TokenizerParams:
    proj: Tensor  # (patch_width, D)
    integration: Tensor  # (D,)
    pos: Tensor  # (1 + N, D)
    words: Tensor | None = None  # (V, D)


@dataclass
class PatchSequence:
    rows: Tensor  # (..., 1 + N, D); row 0 is the integration token
    n_patches: int


def image_patch_count(height: int, width: int, patch: int) -> int:
    if patch <= 0 or height % patch or width % patch:
        raise TokenizerConfigError(f"patch size {patch} must divide image size {height}x{width}")
    return (height // patch) * (width // patch)


def patchify_image(pixels, patch: int) -> np.ndarray:
    """Split ``(..., H, W, C)`` into ``(..., N, P*P*C)`` patches.

    Patches run row-major over the patch grid; each patch is flattened
    row-major over its ``(P, P, C)`` block.
    """
    if isinstance(pixels, ImageObs):
        pixels = pixels.pixels
    pixels = np.asarray(pixels)
    *lead, h, w, c = pixels.shape
    image_patch_count(h, w, patch)
    gh, gw = h // patch, w // patch
    x = pixels.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def patchify_proprio(values) -> np.ndarray:
    """Each proprioceptive entry becomes its own 1-wide patch: ``(..., D) -> (..., D, 1)``."""
    if isinstance(values, ProprioObs):
        values = values.values
    values = np.asarray(values)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise TokenizerConfigError("proprioceptive observation must have at least one entry")
    return values[..., None]


def embed_patches(patches, proj: Tensor) -> Tensor:
    patches = patches if isinstance(patches, Tensor) else Tensor(patches, dtype=proj.dtype)
    if patches.shape[-1] != proj.shape[0]:
        raise TokenizerConfigError(f"patch width {patches.shape[-1]} does not match projection input {proj.shape[0]}")
    if patches.ndim == 1:
        patches = patches.reshape(1, -1)
    return ops.matmul(patches, proj)


def tokenize_hybrid(pixels, words, patch: int, params: TokenizerParams) -> Tensor:
    """Image patch embeddings followed by word embeddings: ``N = HW/P^2 + N_w`` rows."""
    if params.words is None:
        raise TokenizerConfigError("hybrid tokenization needs a word embedding table")
    img = embed_patches(patchify_image(pixels, patch), params.proj)
    words = np.asarray(words, dtype=np.int64)
    if words.shape[-1] == 0:
        return img
    emb = ops.embedding(params.words, words)
    return ops.concat([img, emb], axis=-2)


def embed_and_assemble(embeddings: Tensor, params: TokenizerParams) -> PatchSequence:
    """Prepend the integration token and add the positional encoding.

    ``embeddings`` are already-projected patch rows ``(..., N, D)``.
    """
    *lead, n, d = embeddings.shape
    if params.pos.shape != (1 + n, d):
        raise TokenizerConfigError(f"positional encoding {params.pos.shape} does not fit {(1 + n, d)}")
    tok = params.integration.reshape(1, d)
    tok = ops.add(tok, Tensor(np.zeros((*lead, 1, d), dtype=embeddings.dtype))) if lead else tok
    rows = ops.add(ops.concat([tok, embeddings], axis=-2), params.pos)
    return PatchSequence(rows, n)


def tokenize(obs: Observation, patch: int, params: TokenizerParams) -> PatchSequence:
    """Single-observation convenience wrapper returning ``(1+N) x D``."""
    if isinstance(obs, ImageObs):
        emb = embed_patches(patchify_image(obs, patch), params.proj)
    elif isinstance(obs, ProprioObs):
        emb = embed_patches(patchify_proprio(obs), params.proj)
    elif isinstance(obs, HybridObs):
        if params.words is not None:
            obs.validate(params.words.shape[0])
        emb = tokenize_hybrid(obs.image.pixels, obs.words, patch, params)
    else:
        raise TypeError(f"unknown observation type {type(obs).__name__}")
    return embed_and_assemble(emb, params)
