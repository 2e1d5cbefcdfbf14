"""Masked autoencoder over patch tokens of a single-channel epoch.

The input epoch is split into fixed-length patches, a random subset of
tokens is masked, visible tokens are embedded and encoded, and a decoder
(seeing a learned mask token at masked positions) produces one
reconstruction head per target channel. Training minimizes 1 - cosine
similarity per patch pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ShapeMismatch, Tensor
from .pipeline import EpochRecord

COSINE_EPS = 1e-8


class WrongLength(Exception):
    pass


class HeterogeneousBatch(Exception):
    pass


@dataclass
class MaeConfig:
    """Model hyperparameters; patch_size * seq_len must equal the epoch length
    of the data it is trained on (3000 samples for 30 s at 100 Hz)."""

    patch_size: int = 100
    seq_len: int = 30
    embed_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 1
    mlp_ratio: int = 4
    mask_ratio: float = 0.5
    target_channels: tuple[str, ...] = ()
    loss_scope: str = "all"  # "all" or "masked"

    def __post_init__(self):
        self.target_channels = tuple(self.target_channels)
        if self.patch_size < 1 or self.seq_len < 1:
            raise ValueError("patch_size and seq_len must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even for the sinusoidal table")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.loss_scope not in ("all", "masked"):
            raise ValueError(f"loss_scope must be 'all' or 'masked', got {self.loss_scope}")
        if not self.target_channels:
            raise ValueError("at least one target channel is required")

    @property
    def epoch_len(self) -> int:
        return self.patch_size * self.seq_len

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class MaskPlan:
    """Disjoint visible/masked token index sets covering 0..seq_len-1."""

    visible_indices: tuple[int, ...]
    masked_indices: tuple[int, ...]

    def __post_init__(self):
        vis, msk = set(self.visible_indices), set(self.masked_indices)
        if vis & msk:
            raise ValueError("visible and masked indices overlap")
        n = len(vis) + len(msk)
        if vis | msk != set(range(n)):
            raise ValueError("mask plan does not cover 0..seq_len-1")
        self.visible_indices = tuple(sorted(self.visible_indices))
        self.masked_indices = tuple(sorted(self.masked_indices))


def make_mask(seq_len: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform random token subset of size round(mask_ratio * seq_len)."""
    n_masked = int(round(mask_ratio * seq_len))
    perm = rng.permutation(seq_len)
    masked = tuple(sorted(int(i) for i in perm[:n_masked]))
    visible = tuple(sorted(int(i) for i in perm[n_masked:]))
    return MaskPlan(visible_indices=visible, masked_indices=masked)


def full_visibility(seq_len: int) -> MaskPlan:
    return MaskPlan(visible_indices=tuple(range(seq_len)), masked_indices=())


def sinusoidal_table(seq_len: int, embed_dim: int) -> np.ndarray:
    """Fixed positional table: sin/cos pairs with 10000^(2i/dim) wavelengths."""
    even = np.arange(0, embed_dim, 2, dtype=np.float64)
    inv_freq = 1.0 / np.power(10000.0, even / embed_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    table = np.zeros((seq_len, embed_dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


@dataclass
class MaeParams:
    """All learnable tensors by name, plus the fixed positional table."""

    config: MaeConfig
    pos_encoding: np.ndarray
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["patch_embed.w"].dtype

    def head_name(self, channel: str, part: str) -> str:
        return f"head.{channel}.{part}"


def _block_names(prefix: str) -> list[str]:
    names = [f"{prefix}.ln1.g", f"{prefix}.ln1.b"]
    for proj in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"):
        names.append(f"{prefix}.attn.{proj}")
    names += [f"{prefix}.ln2.g", f"{prefix}.ln2.b",
              f"{prefix}.mlp.w1", f"{prefix}.mlp.b1",
              f"{prefix}.mlp.w2", f"{prefix}.mlp.b2"]
    return names


def parameter_names(config: MaeConfig) -> list[str]:
    """Canonical creation/serialization order of all learnable tensors."""
    names = ["patch_embed.w", "patch_embed.b", "mask_token"]
    for i in range(config.encoder_layers):
        names += _block_names(f"enc.{i}")
    for i in range(config.decoder_layers):
        names += _block_names(f"dec.{i}")
    for channel in config.target_channels:
        names += [f"head.{channel}.w", f"head.{channel}.b"]
    return names


def init_params(config: MaeConfig, seed=0, dtype=np.float32) -> MaeParams:
    """Deterministic initialization: uniform(+-1/sqrt(fan_in)) for linear
    weights and biases, N(0, 0.02^2) for the mask token, identity layer norm.

    ``seed`` may be an int or an np.random.SeedSequence (for callers that
    split streams).
    """
    sequence = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(sequence))
    e, p, r = config.embed_dim, config.patch_size, config.mlp_ratio

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    tensors: dict[str, Tensor] = {
        "patch_embed.w": uniform((p, e), p),
        "patch_embed.b": uniform((e,), p),
        "mask_token": Tensor(rng.normal(0.0, 0.02, (e,)), requires_grad=True, dtype=dtype),
    }

    def init_block(prefix: str):
        tensors[f"{prefix}.ln1.g"] = ones((e,))
        tensors[f"{prefix}.ln1.b"] = zeros((e,))
        # the key projection carries no bias: shifting every key by a constant
        # shifts each attention row uniformly, which softmax cancels, so a key
        # bias would receive an identically-zero gradient
        for w, b in (("wq", "bq"), ("wk", None), ("wv", "bv"), ("wo", "bo")):
            tensors[f"{prefix}.attn.{w}"] = uniform((e, e), e)
            if b is not None:
                tensors[f"{prefix}.attn.{b}"] = uniform((e,), e)
        tensors[f"{prefix}.ln2.g"] = ones((e,))
        tensors[f"{prefix}.ln2.b"] = zeros((e,))
        tensors[f"{prefix}.mlp.w1"] = uniform((e, r * e), e)
        tensors[f"{prefix}.mlp.b1"] = uniform((r * e,), e)
        tensors[f"{prefix}.mlp.w2"] = uniform((r * e, e), r * e)
        tensors[f"{prefix}.mlp.b2"] = uniform((e,), r * e)

    for i in range(config.encoder_layers):
        init_block(f"enc.{i}")
    for i in range(config.decoder_layers):
        init_block(f"dec.{i}")
    for channel in config.target_channels:
        tensors[f"head.{channel}.w"] = uniform((e, p), e)
        tensors[f"head.{channel}.b"] = uniform((p,), e)

    pos = sinusoidal_table(config.seq_len, config.embed_dim)
    return MaeParams(config=config, pos_encoding=pos, tensors=tensors)


def patchify(samples: np.ndarray, config: MaeConfig) -> np.ndarray:
    """Slice one epoch into the (seq_len, patch_size) token matrix."""
    samples = np.asarray(samples)
    if samples.ndim != 1 or len(samples) != config.epoch_len:
        raise WrongLength(
            f"expected {config.epoch_len} samples, got shape {samples.shape}"
        )
    return samples.reshape(config.seq_len, config.patch_size)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    return tokens.reshape(*tokens.shape[:-2], -1)


def _attention(h: Tensor, params: MaeParams, prefix: str) -> Tensor:
    t = params.tensors
    config = params.config
    n_tokens = h.shape[0]
    heads, head_dim, e = config.num_heads, config.head_dim, config.embed_dim

    def project(name: str) -> Tensor:
        out = nc.matmul(h, t[f"{prefix}.attn.w{name}"])
        bias = t.get(f"{prefix}.attn.b{name}")
        return out if bias is None else nc.add(out, bias)

    def split_heads(m: Tensor) -> Tensor:
        # (n, e) -> (heads, n, head_dim)
        return nc.transpose(nc.reshape(nc.transpose(m), (heads, head_dim, n_tokens)))

    q = split_heads(project("q"))
    k = split_heads(project("k"))
    v = split_heads(project("v"))
    scores = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(head_dim))
    attn = nc.softmax(scores)
    mixed = nc.matmul(attn, v)  # (heads, n, head_dim)
    merged = nc.transpose(nc.reshape(nc.transpose(mixed), (e, n_tokens)))
    return nc.add(nc.matmul(merged, t[f"{prefix}.attn.wo"]), t[f"{prefix}.attn.bo"])


def _mlp(h: Tensor, params: MaeParams, prefix: str) -> Tensor:
    t = params.tensors
    hidden = nc.gelu(nc.add(nc.matmul(h, t[f"{prefix}.mlp.w1"]), t[f"{prefix}.mlp.b1"]))
    return nc.add(nc.matmul(hidden, t[f"{prefix}.mlp.w2"]), t[f"{prefix}.mlp.b2"])


def _transformer_block(x: Tensor, params: MaeParams, prefix: str) -> Tensor:
    t = params.tensors
    normed = nc.layer_norm(x, t[f"{prefix}.ln1.g"], t[f"{prefix}.ln1.b"])
    x = nc.add(x, _attention(normed, params, prefix))
    normed = nc.layer_norm(x, t[f"{prefix}.ln2.g"], t[f"{prefix}.ln2.b"])
    return nc.add(x, _mlp(normed, params, prefix))


def encode(tokens: np.ndarray, plan: MaskPlan, params: MaeParams) -> Tensor:
    """Embed all tokens (positional encoding at original positions), keep only
    the visible rows, and run them through the encoder blocks."""
    config = params.config
    if tokens.shape != (config.seq_len, config.patch_size):
        raise ShapeMismatch(
            f"tokens shape {tokens.shape} != ({config.seq_len}, {config.patch_size})"
        )
    t = params.tensors
    x = Tensor(tokens, dtype=params.dtype)
    embedded = nc.add(nc.matmul(x, t["patch_embed.w"]), t["patch_embed.b"])
    embedded = nc.add(embedded, Tensor(params.pos_encoding, dtype=params.dtype))
    visible = nc.gather_rows(embedded, np.asarray(plan.visible_indices, dtype=np.intp))
    for i in range(config.encoder_layers):
        visible = _transformer_block(visible, params, f"enc.{i}")
    return visible


def decode(latents: Tensor, plan: MaskPlan, params: MaeParams) -> Tensor:
    """Scatter latents and mask tokens back to sequence order, decode, and
    apply one reconstruction head per target channel.

    Returns a (num_targets, seq_len, patch_size) tensor.
    """
    config = params.config
    if latents.shape[0] != len(plan.visible_indices):
        raise ShapeMismatch(
            f"{latents.shape[0]} latent rows for {len(plan.visible_indices)} "
            "visible tokens"
        )
    t = params.tensors
    n_masked = len(plan.masked_indices)
    if n_masked:
        placeholder = Tensor(
            np.zeros((n_masked, config.embed_dim)), dtype=params.dtype
        )
        mask_rows = nc.add(placeholder, t["mask_token"])
        stacked = nc.concat([latents, mask_rows], axis=0)
    else:
        stacked = latents
    positions = np.asarray(plan.visible_indices + plan.masked_indices, dtype=np.intp)
    ordered = nc.gather_rows(stacked, np.argsort(positions))
    ordered = nc.add(ordered, Tensor(params.pos_encoding, dtype=params.dtype))
    for i in range(config.decoder_layers):
        ordered = _transformer_block(ordered, params, f"dec.{i}")

    per_target = []
    for channel in config.target_channels:
        head = nc.add(nc.matmul(ordered, t[f"head.{channel}.w"]),
                      t[f"head.{channel}.b"])
        per_target.append(nc.reshape(head, (1, config.seq_len, config.patch_size)))
    return nc.concat(per_target, axis=0)


def cosine_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over patch pairs of 1 - cos(pred, target).

    cos uses eps-clamped norms, so an all-zero patch scores cos 0 (loss 1)
    instead of NaN. Result is a scalar in [0, 2].
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    dot = nc.sum(nc.mul(pred, target), axis=-1)
    norm_pred = nc.sqrt(nc.sum(nc.mul(pred, pred), axis=-1))
    norm_target = nc.sqrt(nc.sum(nc.mul(target, target), axis=-1))
    denom = nc.mul(nc.maximum_scalar(norm_pred, COSINE_EPS),
                   nc.maximum_scalar(norm_target, COSINE_EPS))
    cos = nc.divide(dot, denom)
    ones = Tensor(np.ones(cos.shape), dtype=cos.dtype)
    return nc.mean(nc.add(ones, nc.scale(cos, -1.0)))


def _check_batch(batch: list[EpochRecord], config: MaeConfig) -> None:
    if not batch:
        raise HeterogeneousBatch("empty batch")
    first = batch[0]
    for record in batch:
        if record.input_channel != first.input_channel:
            raise HeterogeneousBatch(
                f"mixed input channels: {record.input_channel!r} vs "
                f"{first.input_channel!r}"
            )
        if record.target_channels != first.target_channels:
            raise HeterogeneousBatch("mixed target channel sets in batch")
    missing = set(config.target_channels) - set(first.target_channels)
    if missing:
        raise HeterogeneousBatch(f"batch lacks configured targets: {sorted(missing)}")


def forward_loss(
    batch: list[EpochRecord],
    params: MaeParams,
    rng: np.random.Generator,
) -> tuple[Tensor, list[np.ndarray]]:
    """Masked forward pass over a batch; returns the mean cosine loss and the
    per-example reconstructions as (num_targets, epoch_len) arrays.

    A fresh mask plan is drawn per example. With loss_scope == "masked" the
    loss covers only masked token positions (all positions when the plan
    masks nothing).
    """
    config = params.config
    _check_batch(batch, config)
    losses = []
    reconstructions = []
    for record in batch:
        tokens = patchify(record.input_samples, config)
        plan = make_mask(config.seq_len, config.mask_ratio, rng)
        latents = encode(tokens, plan, params)
        recon = decode(latents, plan, params)
        target_np = np.stack(
            [patchify(record.targets[ch], config) for ch in config.target_channels]
        )
        if config.loss_scope == "masked" and plan.masked_indices:
            n_targets = len(config.target_channels)
            flat = nc.reshape(recon, (n_targets * config.seq_len, config.patch_size))
            rows = np.concatenate([
                t * config.seq_len + np.asarray(plan.masked_indices, dtype=np.intp)
                for t in range(n_targets)
            ])
            pred_sel = nc.gather_rows(flat, rows)
            target_sel = target_np.reshape(-1, config.patch_size)[rows]
            losses.append(cosine_loss(pred_sel, Tensor(target_sel, dtype=params.dtype)))
        else:
            losses.append(cosine_loss(recon, Tensor(target_np, dtype=params.dtype)))
        reconstructions.append(unpatchify(recon.data).copy())

    total = losses[0]
    for item in losses[1:]:
        total = nc.add(total, item)
    return nc.scale(total, 1.0 / len(batch)), reconstructions


def reconstruct_epoch(
    params: MaeParams,
    record: EpochRecord,
    mask_ratio: float = 0.0,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Inference-time reconstruction (full visibility by default).

    Returns normalized reconstructions keyed by target channel.
    """
    config = params.config
    tokens = patchify(record.input_samples, config)
    if mask_ratio > 0.0:
        if rng is None:
            raise ValueError("mask_ratio > 0 requires an rng")
        plan = make_mask(config.seq_len, mask_ratio, rng)
    else:
        plan = full_visibility(config.seq_len)
    latents = encode(tokens, plan, params)
    recon = decode(latents, plan, params)
    flat = unpatchify(recon.data)
    return {
        channel: flat[i].copy()
        for i, channel in enumerate(config.target_channels)
    }
