"""Interleaved perceive/decide network with its ablation variants.

Parameters live in a flat ordered ``dict[str, Tensor]`` so the optimizer
and checkpoint code treat every variant the same way.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .blocks import (
    LITERAL,
    PRE_NORM,
    BlockParams,
    block_param_shapes,
    deciding_block_forward,
    perceiving_block_forward,
)
from .engine import Tensor, get_default_dtype, ops
from .tokenizer import (
    TokenizerConfigError,
    TokenizerParams,
    embed_and_assemble,
    embed_patches,
    image_patch_count,
    patchify_image,
    patchify_proprio,
)

FULL = "full"
VANILLA = "vanilla"
NO_PERCEIVER = "no-perceiver"
NO_DECIDER = "no-decider"
NO_DENSE = "no-dense"
VARIANTS = (FULL, VANILLA, NO_PERCEIVER, NO_DECIDER, NO_DENSE)

MODALITIES = ("image", "proprio", "hybrid")


class ConfigError(ValueError):
    pass


@dataclass
class PDiTConfig:
    modality: str
    obs_shape: tuple[int, ...]
    action_type: str  # "discrete" | "continuous"
    action_dim: int
    variant: str = FULL
    n_layers: int = 2
    context: int = 4
    embed_dim: int = 32
    n_heads: int = 2
    patch_size: int = 6
    vocab_size: int = 0
    n_words: int = 0
    ff_mult: int = 4
    dropout: float = 0.0
    gamma: float = 1.0
    return_scale: float = 1.0
    residual_mode: str = PRE_NORM
    reembed_tokens: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        self.obs_shape = tuple(int(s) for s in self.obs_shape)
        self.validate()

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.action_type not in ("discrete", "continuous") or self.action_dim < 1:
            raise ConfigError(f"bad action space {self.action_type}/{self.action_dim}")
        if self.n_layers < 1 or self.context < 1:
            raise ConfigError("n_layers and context must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.residual_mode not in (PRE_NORM, LITERAL):
            raise ConfigError(f"unknown residual mode {self.residual_mode!r}")
        if self.modality in ("image", "hybrid"):
            if len(self.obs_shape) != 3:
                raise ConfigError(f"image obs_shape must be (H, W, C), got {self.obs_shape}")
            if self.variant != NO_PERCEIVER:
                h, w, _ = self.obs_shape
                try:
                    image_patch_count(h, w, self.patch_size)
                except TokenizerConfigError as exc:
                    raise ConfigError(str(exc)) from None
        elif len(self.obs_shape) != 1 or self.obs_shape[0] < 1:
            raise ConfigError(f"proprio obs_shape must be (D,), got {self.obs_shape}")
        if self.modality == "hybrid" and (self.vocab_size < 1 or self.n_words < 0):
            raise ConfigError("hybrid modality needs vocab_size >= 1")

    # ---------------------------------------------------------------- sizes
    @property
    def seq_len(self) -> int:
        """Tokens in the deciding sequence."""
        return 2 + 3 * self.context

    @property
    def window(self) -> int:
        return self.context + 1

    @property
    def stack_factor(self) -> int:
        return self.window if self.variant == NO_DECIDER else 1

    @property
    def discrete(self) -> bool:
        return self.action_type == "discrete"

    def patch_width(self) -> int:
        if self.modality == "proprio":
            return 1
        return self.patch_size**2 * self.obs_shape[2] * self.stack_factor

    def n_patches(self) -> int:
        if self.modality == "proprio":
            return self.obs_shape[0] * self.stack_factor
        h, w, _ = self.obs_shape
        n = image_patch_count(h, w, self.patch_size)
        return n + (self.n_words if self.modality == "hybrid" else 0)

    def patch_grid(self) -> tuple[int, ...]:
        if self.modality == "proprio":
            return (self.n_patches(),)
        h, w, _ = self.obs_shape
        return (h // self.patch_size, w // self.patch_size)

    def head_in_dim(self) -> int:
        return self.n_layers * self.embed_dim if self.variant == FULL else self.embed_dim

    # ---------------------------------------------------------- serializing
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PDiTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PDiTConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **kw) -> "PDiTConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrajectoryContext:
    """A batch of ``B`` windows ``t-K .. t``.

    returns: ``(B, K+1)``; obs: ``(B, K+1, *obs_shape)``; words: ``(B, K+1, N_w)``
    for hybrid observations; actions: ``(B, K)`` ids or ``(B, K, dim)``;
    valid: ``(B, K+1)`` False for positions before the episode start.
    """

    returns: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    valid: np.ndarray
    words: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return self.returns.shape[0]

    def check(self, config: PDiTConfig) -> None:
        b, w = self.returns.shape[0], config.window
        if self.returns.shape != (b, w):
            raise ConfigError(f"returns shape {self.returns.shape}, expected {(b, w)}")
        if self.obs.shape != (b, w, *config.obs_shape):
            raise ConfigError(f"obs shape {self.obs.shape}, expected {(b, w, *config.obs_shape)}")
        act = (b, config.context) if config.discrete else (b, config.context, config.action_dim)
        if self.actions.shape != act:
            raise ConfigError(f"actions shape {self.actions.shape}, expected {act}")
        if self.valid.shape != (b, w):
            raise ConfigError(f"valid shape {self.valid.shape}, expected {(b, w)}")
        if config.modality == "hybrid":
            if self.words is None or self.words.shape != (b, w, config.n_words):
                got = None if self.words is None else self.words.shape
                raise ConfigError(f"words shape {got}, expected {(b, w, config.n_words)}")

    def select(self, idx) -> "TrajectoryContext":
        return TrajectoryContext(
            self.returns[idx], self.obs[idx], self.actions[idx], self.valid[idx],
            None if self.words is None else self.words[idx],
        )


@dataclass
class Capture:
    """Optional recorder for intermediate values of one forward pass."""

    perceiving_attention: list = field(default_factory=list)  # per layer: (B*, h, 1+N, 1+N)
    deciding_attention: list = field(default_factory=list)  # per layer: (B, h, 2+3K, 2+3K)
    integration_tokens: list = field(default_factory=list)  # per layer: Tensor (B, K+1, D)
    deciding_outputs: list = field(default_factory=list)  # per layer: Tensor (B, 2+3K, D)
    last_tokens: list = field(default_factory=list)
    patch_embeddings: Tensor | None = None
    returns_input: Tensor | None = None
    grad_returns: bool = False


# ------------------------------------------------------------------ params
def param_shapes(config: PDiTConfig) -> dict[str, tuple[int, ...]]:
    c = config
    d = c.embed_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if c.variant == NO_PERCEIVER:
        flat = int(np.prod(c.obs_shape))
        shapes["obs.proj"] = (flat, d)
        shapes["obs.bias"] = (d,)
        if c.modality == "hybrid":
            shapes["tok.words"] = (c.vocab_size, d)
    else:
        shapes["tok.proj"] = (c.patch_width(), d)
        if c.modality == "hybrid":
            shapes["tok.words"] = (c.vocab_size, d)
        shapes["tok.integration"] = (d,)
        shapes["tok.pos"] = (1 + c.n_patches(), d)
        for l in range(c.n_layers):
            for k, s in block_param_shapes(d, c.ff_mult * d).items():
                shapes[f"perc.{l}.{k}"] = s
    if c.variant != NO_DECIDER:
        shapes["emb.return.w"] = (1, d)
        shapes["emb.return.b"] = (d,)
        if c.discrete:
            shapes["emb.action"] = (c.action_dim, d)
        else:
            shapes["emb.action.w"] = (c.action_dim, d)
            shapes["emb.action.b"] = (d,)
        shapes["emb.pos"] = (c.seq_len, d)
        for l in range(c.n_layers):
            for k, s in block_param_shapes(d, c.ff_mult * d).items():
                shapes[f"dec.{l}.{k}"] = s
    shapes["head.w1"] = (c.head_in_dim(), d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, c.action_dim)
    shapes["head.b2"] = (c.action_dim,)
    return shapes


def _init_kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("_g"):
        return "ones"
    if leaf.startswith("b") or leaf.endswith("_b") or leaf == "bias":
        return "zeros"
    return "normal"


def init_params(config: PDiTConfig, seed: int | np.random.Generator = 0) -> dict[str, Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = get_default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        kind = _init_kind(name)
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def params_from_arrays(arrays: dict[str, np.ndarray], config: PDiTConfig) -> dict[str, Tensor]:
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ConfigError(f"checkpoint does not match config (missing {missing[:3]}, extra {extra[:3]})")
    out = {}
    for name, shape in expected.items():
        arr = arrays[name]
        if arr.shape != shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, expected {shape}")
        out[name] = Tensor(arr.astype(get_default_dtype()), requires_grad=True)
    return out


def tokenizer_params(params: dict[str, Tensor]) -> TokenizerParams:
    return TokenizerParams(
        proj=params["tok.proj"],
        integration=params["tok.integration"],
        pos=params["tok.pos"],
        words=params.get("tok.words"),
    )


# ---------------------------------------------------------------- helpers
def _masked(x: Tensor, valid: np.ndarray) -> Tensor:
    """Zero rows of ``x`` (shape ``valid.shape + (D,)``) at invalid positions."""
    m = np.broadcast_to(valid[..., None], x.shape).astype(x.dtype)
    return ops.mul(x, Tensor(m, dtype=x.dtype))


def _const(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr), dtype=dtype)


def interleave(returns: Tensor, obs: Tensor, actions: Tensor) -> Tensor:
    """(R^k, z^k, a^k) per timestep with the final action slot dropped.

    returns/obs: ``(B, K+1, D)``; actions: ``(B, K, D)``; output ``(B, 2+3K, D)``.
    """
    b, w, d = obs.shape
    pad = _const(np.zeros((b, 1, d)), obs.dtype)
    acts = ops.concat([actions, pad], axis=1)
    seq = ops.stack([returns, obs, acts], axis=2).reshape(b, 3 * w, d)
    return ops.slice_axis(seq, 0, 3 * w - 1, axis=1)


def replace_observation_rows(y: Tensor, obs: Tensor) -> Tensor:
    """Keep return/action rows of ``y`` and swap in fresh observation rows."""
    b, w, d = obs.shape
    pad = _const(np.zeros((b, 1, d)), y.dtype)
    grid = ops.concat([y, pad], axis=1).reshape(b, w, 3, d)
    seq = ops.stack([grid[:, :, 0, :], obs, grid[:, :, 2, :]], axis=2).reshape(b, 3 * w, d)
    return ops.slice_axis(seq, 0, 3 * w - 1, axis=1)


def _perceive_inputs(ctx: TrajectoryContext, config: PDiTConfig, params, capture: Capture | None):
    """Tokenize each timestep's observation: ``(B*(K+1), 1+N, D)``."""
    dtype = get_default_dtype()
    tp = tokenizer_params(params)
    b, w = ctx.returns.shape
    obs = np.asarray(ctx.obs, dtype=dtype)
    if config.modality == "proprio":
        patches = patchify_proprio(obs.reshape(b * w, -1))
    else:
        patches = patchify_image(obs.reshape(b * w, *config.obs_shape), config.patch_size)
    emb = embed_patches(patches, tp.proj)
    if config.modality == "hybrid" and config.n_words:
        words = np.asarray(ctx.words, dtype=np.int64).reshape(b * w, config.n_words)
        emb = ops.concat([emb, ops.embedding(tp.words, words)], axis=-2)
    if capture is not None:
        capture.patch_embeddings = emb
    return embed_and_assemble(emb, tp).rows


def _embed_trajectory(ctx: TrajectoryContext, config: PDiTConfig, params, capture: Capture | None):
    dtype = get_default_dtype()
    ret = Tensor(
        (np.asarray(ctx.returns, dtype=np.float64) / config.return_scale)[..., None].astype(dtype),
        requires_grad=bool(capture is not None and capture.grad_returns),
    )
    if capture is not None:
        capture.returns_input = ret
    r_emb = _masked(ops.linear(ret, params["emb.return.w"], params["emb.return.b"]), ctx.valid)
    if config.discrete:
        a_emb = ops.embedding(params["emb.action"], np.asarray(ctx.actions, dtype=np.int64))
    else:
        acts = _const(np.asarray(ctx.actions, dtype=dtype), dtype)
        a_emb = ops.linear(acts, params["emb.action.w"], params["emb.action.b"])
    a_emb = _masked(a_emb, ctx.valid[:, :-1])
    return r_emb, a_emb


def _block_kw(config: PDiTConfig, rng):
    return dict(residual_mode=config.residual_mode, dropout=config.dropout if rng is not None else 0.0, rng=rng)


def head_forward(params: dict[str, Tensor], last_tokens: list[Tensor]) -> Tensor:
    x = last_tokens[0] if len(last_tokens) == 1 else ops.concat(last_tokens, axis=-1)
    hidden = ops.gelu(ops.linear(x, params["head.w1"], params["head.b1"]))
    return ops.linear(hidden, params["head.w2"], params["head.b2"])


# ---------------------------------------------------------------- variants
def _forward_interleaved(ctx, config, params, capture, rng, dense: bool) -> Tensor:
    b, w = ctx.returns.shape
    d = config.embed_dim
    z = _perceive_inputs(ctx, config, params, capture)
    r_emb, a_emb = _embed_trajectory(ctx, config, params, capture)
    kw = _block_kw(config, rng)
    y = None
    last = []
    for l in range(config.n_layers):
        att = [] if capture is not None else None
        z = perceiving_block_forward(z, BlockParams.from_dict(params, f"perc.{l}"), config.n_heads, capture=att, **kw)
        tokens = _masked(z[:, 0, :].reshape(b, w, d), ctx.valid)
        if y is None or config.reembed_tokens:
            y_in = ops.add(interleave(r_emb, tokens, a_emb), params["emb.pos"])
        else:
            y_in = replace_observation_rows(y, tokens)
        datt = [] if capture is not None else None
        y = deciding_block_forward(
            y_in, BlockParams.from_dict(params, f"dec.{l}"), config.n_heads, config.context, capture=datt, **kw
        )
        last.append(y[:, -1, :])
        if capture is not None:
            capture.perceiving_attention.append(att[0])
            capture.deciding_attention.append(datt[0])
            capture.integration_tokens.append(tokens)
            capture.deciding_outputs.append(y)
    if capture is not None:
        capture.last_tokens = last
    return head_forward(params, last if dense else last[-1:])


def _forward_vanilla(ctx, config, params, capture, rng) -> Tensor:
    b, w = ctx.returns.shape
    d = config.embed_dim
    z = _perceive_inputs(ctx, config, params, capture)
    kw = _block_kw(config, rng)
    for l in range(config.n_layers):
        att = [] if capture is not None else None
        z = perceiving_block_forward(z, BlockParams.from_dict(params, f"perc.{l}"), config.n_heads, capture=att, **kw)
        if capture is not None:
            capture.perceiving_attention.append(att[0])
            capture.integration_tokens.append(_masked(z[:, 0, :].reshape(b, w, d), ctx.valid))
    tokens = _masked(z[:, 0, :].reshape(b, w, d), ctx.valid)
    r_emb, a_emb = _embed_trajectory(ctx, config, params, capture)
    y = ops.add(interleave(r_emb, tokens, a_emb), params["emb.pos"])
    return _decide_stack(y, ctx, config, params, capture, kw)


def _decide_stack(y, ctx, config, params, capture, kw) -> Tensor:
    for l in range(config.n_layers):
        datt = [] if capture is not None else None
        y = deciding_block_forward(
            y, BlockParams.from_dict(params, f"dec.{l}"), config.n_heads, config.context, capture=datt, **kw
        )
        if capture is not None:
            capture.deciding_attention.append(datt[0])
            capture.deciding_outputs.append(y)
    last = [y[:, -1, :]]
    if capture is not None:
        capture.last_tokens = last
    return head_forward(params, last)


def _forward_no_perceiver(ctx, config, params, capture, rng) -> Tensor:
    b, w = ctx.returns.shape
    dtype = get_default_dtype()
    flat = Tensor(np.asarray(ctx.obs, dtype=dtype).reshape(b, w, -1), requires_grad=capture is not None, dtype=dtype)
    if capture is not None:
        capture.patch_embeddings = flat
    emb = ops.linear(flat, params["obs.proj"], params["obs.bias"])
    if config.modality == "hybrid" and config.n_words:
        words = ops.embedding(params["tok.words"], np.asarray(ctx.words, dtype=np.int64))
        emb = ops.add(emb, ops.sum(words, axis=2))
    tokens = _masked(emb, ctx.valid)
    if capture is not None:
        capture.integration_tokens.append(tokens)
    r_emb, a_emb = _embed_trajectory(ctx, config, params, capture)
    y = ops.add(interleave(r_emb, tokens, a_emb), params["emb.pos"])
    return _decide_stack(y, ctx, config, params, capture, _block_kw(config, rng))


def stack_observations(ctx: TrajectoryContext, config: PDiTConfig) -> np.ndarray:
    """Stack the window's observations along channels (images) or features
    (proprio); padded timesteps contribute zeros."""
    obs = np.asarray(ctx.obs, dtype=get_default_dtype()) * ctx.valid.reshape(
        ctx.valid.shape + (1,) * len(config.obs_shape)
    )
    b, w = ctx.returns.shape
    if config.modality == "proprio":
        return obs.reshape(b, w * config.obs_shape[0])
    h, wd, c = config.obs_shape
    return obs.transpose(0, 2, 3, 1, 4).reshape(b, h, wd, w * c)


def _forward_no_decider(ctx, config, params, capture, rng) -> Tensor:
    b = ctx.returns.shape[0]
    tp = tokenizer_params(params)
    stacked = stack_observations(ctx, config)
    if config.modality == "proprio":
        patches = patchify_proprio(stacked)
    else:
        patches = patchify_image(stacked, config.patch_size)
    emb = embed_patches(patches, tp.proj)
    if config.modality == "hybrid" and config.n_words:
        words = np.asarray(ctx.words, dtype=np.int64)[:, -1, :]
        emb = ops.concat([emb, ops.embedding(tp.words, words)], axis=-2)
    if capture is not None:
        capture.patch_embeddings = emb
    z = embed_and_assemble(emb, tp).rows
    kw = _block_kw(config, rng)
    for l in range(config.n_layers):
        att = [] if capture is not None else None
        z = perceiving_block_forward(z, BlockParams.from_dict(params, f"perc.{l}"), config.n_heads, capture=att, **kw)
        if capture is not None:
            capture.perceiving_attention.append(att[0])
            capture.integration_tokens.append(z[:, 0, :].reshape(b, 1, -1))
    last = [z[:, 0, :]]
    if capture is not None:
        capture.last_tokens = last
    return head_forward(params, last)


def forward_variant(
    variant: str,
    ctx: TrajectoryContext,
    params: dict[str, Tensor],
    config: PDiTConfig,
    capture: Capture | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if variant != config.variant:
        raise ConfigError(f"parameters were built for variant {config.variant!r}, not {variant!r}")
    ctx.check(config)
    if variant == FULL:
        return _forward_interleaved(ctx, config, params, capture, rng, dense=True)
    if variant == NO_DENSE:
        return _forward_interleaved(ctx, config, params, capture, rng, dense=False)
    if variant == VANILLA:
        return _forward_vanilla(ctx, config, params, capture, rng)
    if variant == NO_PERCEIVER:
        return _forward_no_perceiver(ctx, config, params, capture, rng)
    if variant == NO_DECIDER:
        return _forward_no_decider(ctx, config, params, capture, rng)
    raise ConfigError(f"unknown variant {variant!r}")


def forward(
    ctx: TrajectoryContext,
    params: dict[str, Tensor],
    config: PDiTConfig,
    capture: Capture | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Action output ``(B, n)`` logits or ``(B, dim)`` continuous actions.

    ``rng`` enables dropout (training mode) when ``config.dropout > 0``.
    """
    return forward_variant(config.variant, ctx, params, config, capture, rng)
