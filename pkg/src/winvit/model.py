"""Classifier assembly: patch embedding, attention blocks, pooled head.

Blocks are pre-norm residual pairs. The first sublayer runs windowed
attention over the token grid; the second is a feed-forward path whose
hidden features pass through a 3x3 depthwise conv and the spatial gate
before projecting back down. Classification is a global average pool over
tokens followed by one linear layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import (
    WindowAttentionParams,
    WindowGeometry,
    window_merge,
    window_mha_forward,
    window_partition,
)
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
)
from .spatial import SamParams, sam_residual
from .tensor import Tensor

CHECKPOINT_MAGIC = b"WMHV1"
CHECKPOINT_VERSION = 1

SHARING_MODES = ("standard", "shared_qk")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    window: int = 4
    mlp_ratio: int = 4
    num_classes: int = 3
    dropout_rate: float = 0.0
    sharing_mode: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError(f"image_size/patch_size must be >= 1, got {self.image_size}/{self.patch_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        grid = self.image_size // self.patch_size
        if self.window < 1 or grid % self.window:
            raise ConfigError(f"token grid {grid}x{grid} not divisible by window {self.window}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"sharing_mode must be one of {SHARING_MODES}, got {self.sharing_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def geometry(self) -> WindowGeometry:
        return WindowGeometry(self.grid, self.grid, self.window)


class Block:
    """One pre-norm residual block: attention, then gated feed-forward."""

    def __init__(self, config: ModelConfig, rng):
        c = config.embed_dim
        hidden = c * config.mlp_ratio
        self.ln1_gamma = tc.ones((c,))
        self.ln1_beta = tc.zeros((c,))
        self.attn = WindowAttentionParams(
            c,
            config.heads,
            config.window,
            dropout_rate=config.dropout_rate,
            sharing_mode=config.sharing_mode,
            rng=rng,
        )
        self.ln2_gamma = tc.ones((c,))
        self.ln2_beta = tc.zeros((c,))
        # fan-in-scaled init on the feed-forward path: at desk scale the
        # short schedule cannot recover from uniformly tiny weights, so
        # these layers start at a magnitude that preserves signal variance
        self.fc1_weight = tc.trunc_normal(rng, (c, hidden), std=math.sqrt(2.0 / c))
        self.fc1_bias = tc.zeros((hidden,))
        self.dw_kernel = tc.trunc_normal(rng, (hidden, 3, 3), std=1.0 / 3.0)
        self.dw_bias = tc.zeros((hidden,))
        self.sam = SamParams(rng)
        self.fc2_weight = tc.trunc_normal(rng, (hidden, c), std=math.sqrt(2.0 / hidden))
        self.fc2_bias = tc.zeros((c,))

    def named_params(self, prefix=""):
        yield prefix + "ln1_gamma", self.ln1_gamma
        yield prefix + "ln1_beta", self.ln1_beta
        for name, t in self.attn.named_params():
            yield prefix + "attn." + name, t
        yield prefix + "ln2_gamma", self.ln2_gamma
        yield prefix + "ln2_beta", self.ln2_beta
        yield prefix + "fc1_weight", self.fc1_weight
        yield prefix + "fc1_bias", self.fc1_bias
        yield prefix + "dw_kernel", self.dw_kernel
        yield prefix + "dw_bias", self.dw_bias
        for name, t in self.sam.named_params():
            yield prefix + "sam." + name, t
        yield prefix + "fc2_weight", self.fc2_weight
        yield prefix + "fc2_bias", self.fc2_bias


class Model:
    """Full classifier; construction is deterministic in config.seed."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.embed_dim
        patch_in = 3 * config.patch_size**2
        self.patch_weight = tc.trunc_normal(rng, (patch_in, c), std=math.sqrt(2.0 / patch_in))
        self.patch_bias = tc.zeros((c,))
        self.blocks = [Block(config, rng) for _ in range(config.depth)]
        # zero head: an untrained model ties all logits, so argmax is a
        # fixed class and chance-level accuracy is exact on balanced splits
        self.head_weight = tc.zeros((c, config.num_classes))
        self.head_bias = tc.zeros((config.num_classes,))

    def named_params(self):
        yield "patch_weight", self.patch_weight
        yield "patch_bias", self.patch_bias
        for i, block in enumerate(self.blocks):
            yield from block.named_params(prefix=f"block{i}.")
        yield "head_weight", self.head_weight
        yield "head_bias", self.head_bias

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())

    def to_dtype(self, dtype) -> "Model":
        """Copy with every parameter cast; used for 64-bit verification."""
        other = Model.__new__(Model)
        other.config = self.config
        other.patch_weight = Tensor(self.patch_weight.data, dtype=dtype)
        other.patch_bias = Tensor(self.patch_bias.data, dtype=dtype)
        other.blocks = []
        for block in self.blocks:
            nb = Block.__new__(Block)
            nb.ln1_gamma = Tensor(block.ln1_gamma.data, dtype=dtype)
            nb.ln1_beta = Tensor(block.ln1_beta.data, dtype=dtype)
            attn = block.attn
            na = WindowAttentionParams.__new__(WindowAttentionParams)
            na.dim = attn.dim
            na.heads = attn.heads
            na.window = attn.window
            na.dropout_rate = attn.dropout_rate
            na.sharing_mode = attn.sharing_mode
            na.w_q = Tensor(attn.w_q.data, dtype=dtype)
            na.w_k = na.w_q if attn.sharing_mode == "shared_qk" else Tensor(attn.w_k.data, dtype=dtype)
            na.w_v = Tensor(attn.w_v.data, dtype=dtype)
            na.w_o = Tensor(attn.w_o.data, dtype=dtype)
            na.b_q = Tensor(attn.b_q.data, dtype=dtype)
            na.b_k = Tensor(attn.b_k.data, dtype=dtype)
            na.b_v = Tensor(attn.b_v.data, dtype=dtype)
            na.b_o = Tensor(attn.b_o.data, dtype=dtype)
            na.bias_table = Tensor(attn.bias_table.data, dtype=dtype)
            na.bias_index = attn.bias_index
            nb.attn = na
            nb.ln2_gamma = Tensor(block.ln2_gamma.data, dtype=dtype)
            nb.ln2_beta = Tensor(block.ln2_beta.data, dtype=dtype)
            nb.fc1_weight = Tensor(block.fc1_weight.data, dtype=dtype)
            nb.fc1_bias = Tensor(block.fc1_bias.data, dtype=dtype)
            nb.dw_kernel = Tensor(block.dw_kernel.data, dtype=dtype)
            nb.dw_bias = Tensor(block.dw_bias.data, dtype=dtype)
            sam = SamParams.__new__(SamParams)
            sam.conv_kernel = Tensor(block.sam.conv_kernel.data, dtype=dtype)
            sam.conv_bias = Tensor(block.sam.conv_bias.data, dtype=dtype)
            nb.sam = sam
            nb.fc2_weight = Tensor(block.fc2_weight.data, dtype=dtype)
            nb.fc2_bias = Tensor(block.fc2_bias.data, dtype=dtype)
            other.blocks.append(nb)
        other.head_weight = Tensor(self.head_weight.data, dtype=dtype)
        other.head_bias = Tensor(self.head_bias.data, dtype=dtype)
        return other


def patch_embed(image: Tensor, model: Model) -> Tensor:
    """(3, S, S) image -> (H, W, C) token grid.

    Non-overlapping patch_size^2 patches flattened channel-major and
    linearly projected.
    """
    config = model.config
    s = config.image_size
    if image.shape != (3, s, s):
        raise ConfigError(f"expected image (3, {s}, {s}), got {image.shape}")
    p = config.patch_size
    g = config.grid
    x = tc.reshape(image, (3, g, p, g, p))
    x = tc.transpose(x, (1, 3, 0, 2, 4))
    x = tc.reshape(x, (g * g, 3 * p * p))
    x = tc.add(tc.matmul(x, model.patch_weight), model.patch_bias)
    return tc.reshape(x, (g, g, config.embed_dim))


def block_forward(
    x: Tensor,
    block: Block,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    capture: dict | None = None,
) -> Tensor:
    """(H, W, C) -> (H, W, C) through both residual sublayers.

    ``capture``, when given, receives the post-softmax attention weights
    under "attn" and the spatial gate map under "sam".
    """
    h, w, c = x.shape
    geom = WindowGeometry(h, w, config.window)
    l = h * w

    tokens = tc.reshape(x, (l, c))
    normed = tc.layernorm_lastdim(tokens, block.ln1_gamma, block.ln1_beta)
    windows = window_partition(tc.reshape(normed, (h, w, c)), config.window)
    attn_out, _, attn_weights = window_mha_forward(
        windows, block.attn, training=training, rng=rng, return_scores=True
    )
    if capture is not None:
        capture["attn"] = attn_weights
    merged = window_merge(attn_out, geom)
    tokens = tc.add(tokens, tc.reshape(merged, (l, c)))

    normed = tc.layernorm_lastdim(tokens, block.ln2_gamma, block.ln2_beta)
    hidden = tc.gelu(tc.add(tc.matmul(normed, block.fc1_weight), block.fc1_bias))
    rc = hidden.shape[-1]
    grid = tc.transpose(tc.reshape(hidden, (h, w, rc)), (2, 0, 1))
    grid = tc.depthwise_conv2d(grid, block.dw_kernel, block.dw_bias, padding=1)
    if capture is not None:
        from .spatial import sam_map

        capture["sam"] = sam_map(grid, block.sam)
    grid = sam_residual(grid, block.sam)
    hidden = tc.reshape(tc.transpose(grid, (1, 2, 0)), (l, rc))
    projected = tc.add(tc.matmul(hidden, block.fc2_weight), block.fc2_bias)
    return tc.reshape(tc.add(tokens, projected), (h, w, c))


def classify(
    image: Tensor,
    model: Model,
    training: bool = False,
    rng: np.random.Generator | None = None,
    capture: list | None = None,
) -> Tensor:
    """Logits (num_classes,) for one image.

    ``capture``, when given, is filled with one dict per block holding the
    attention weights and spatial gate map (see :func:`block_forward`).
    """
    config = model.config
    x = patch_embed(image, model)
    for block in model.blocks:
        cap = {} if capture is not None else None
        x = block_forward(x, block, config, training=training, rng=rng, capture=cap)
        if capture is not None:
            capture.append(cap)
    tokens = tc.reshape(x, (config.tokens, config.embed_dim))
    pooled = tc.reduce_mean(tokens, axes=0, keepdims=True)
    logits = tc.add(tc.matmul(pooled, model.head_weight), model.head_bias)
    return tc.reshape(logits, (config.num_classes,))


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "WMHV1", u32 version, config record, then tagged sections. Each
# section is a 4-byte tag plus u32 tensor count plus that many tensors in
# the binary tensor format. Sections appear as PEMB, then per block ATTN /
# SAM / FFN (layernorms ride with their sublayer), then HEAD. The bias
# index map is never written; it is a pure function of the window side.

_CONFIG_PACK = "<10qdB"


def _write_config(f, config: ModelConfig) -> None:
    f.write(
        struct.pack(
            _CONFIG_PACK,
            config.image_size,
            config.patch_size,
            config.embed_dim,
            config.depth,
            config.heads,
            config.window,
            config.mlp_ratio,
            config.num_classes,
            config.seed,
            0,  # reserved
            config.dropout_rate,
            SHARING_MODES.index(config.sharing_mode),
        )
    )


def _read_config(f) -> ModelConfig:
    size = struct.calcsize(_CONFIG_PACK)
    raw = f.read(size)
    if len(raw) < size:
        raise CheckpointTruncatedError("config record truncated")
    vals = struct.unpack(_CONFIG_PACK, raw)
    (image_size, patch_size, embed_dim, depth, heads, window, mlp_ratio,
     num_classes, seed, _reserved, dropout_rate, sharing) = vals
    if not 0 <= sharing < len(SHARING_MODES):
        raise CheckpointError(f"unknown sharing mode code {sharing}")
    try:
        return ModelConfig(
            image_size=image_size,
            patch_size=patch_size,
            embed_dim=embed_dim,
            depth=depth,
            heads=heads,
            window=window,
            mlp_ratio=mlp_ratio,
            num_classes=num_classes,
            dropout_rate=dropout_rate,
            sharing_mode=SHARING_MODES[sharing],
            seed=seed,
        )
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from exc


def _sections(model: Model):
    """(tag, [tensor, ...]) in serialization order."""
    yield "PEMB", [model.patch_weight, model.patch_bias]
    for block in model.blocks:
        attn = block.attn
        attn_tensors = [block.ln1_gamma, block.ln1_beta]
        if attn.sharing_mode == "shared_qk":
            attn_tensors.append(attn.w_q)
        else:
            attn_tensors.extend([attn.w_q, attn.w_k])
        attn_tensors.extend(
            [attn.w_v, attn.w_o, attn.b_q, attn.b_k, attn.b_v, attn.b_o, attn.bias_table]
        )
        yield "ATTN", attn_tensors
        yield "SAM ", [block.sam.conv_kernel, block.sam.conv_bias]
        yield "FFN ", [
            block.ln2_gamma,
            block.ln2_beta,
            block.fc1_weight,
            block.fc1_bias,
            block.dw_kernel,
            block.dw_bias,
            block.fc2_weight,
            block.fc2_bias,
        ]
    yield "HEAD", [model.head_weight, model.head_bias]


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_config(f, model.config)
        for tag, tensors in _sections(model):
            f.write(tag.encode("ascii"))
            f.write(struct.pack("<I", len(tensors)))
            for t in tensors:
                tc.write_tensor(t, f)


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a model from ``path``.

    With ``config`` given, the file must agree with it; a disagreement is
    reported against the first section whose tensor shapes do not fit.
    Without it, the config stored in the file is used.
    """
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
        raw = f.read(4)
        if len(raw) < 4:
            raise CheckpointTruncatedError("version field truncated")
        (version,) = struct.unpack("<I", raw)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        stored = _read_config(f)
        target = config if config is not None else stored
        model = Model(target)
        for tag, tensors in _sections(model):
            raw_tag = f.read(4)
            if len(raw_tag) < 4:
                raise CheckpointTruncatedError(f"section tag truncated (expected {tag!r})")
            if raw_tag.decode("ascii", "replace") != tag:
                raise CheckpointShapeError(
                    f"section {raw_tag!r} where {tag!r} expected; "
                    "checkpoint does not match the requested config"
                )
            raw_count = f.read(4)
            if len(raw_count) < 4:
                raise CheckpointTruncatedError(f"section {tag!r} header truncated")
            (count,) = struct.unpack("<I", raw_count)
            if count != len(tensors):
                raise CheckpointShapeError(
                    f"section {tag!r} holds {count} tensors, config expects {len(tensors)}"
                )
            for t in tensors:
                loaded = tc.read_tensor(f)
                if loaded.shape != t.shape:
                    raise CheckpointShapeError(
                        f"section {tag!r}: stored tensor {loaded.shape} does not fit {t.shape}"
                    )
                t.data[...] = loaded.data.astype(t.dtype)
        extra = f.read(1)
        if extra:
            raise CheckpointError("trailing bytes after final section")
    return model
