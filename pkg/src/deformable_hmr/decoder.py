"""Multi-query transformer decoder with query-agnostic deformable cross-attention.

Sampling positions are computed from the context feature map alone: an
offset network predicts per-group raw offsets, ``tanh`` bounds them to
``offset_range`` grid cells, and they are added to a fixed reference grid.
Keys and values are bilinearly sampled from the context at those positions,
and a learned per-query relative-position table sampled at the same
positions biases the attention logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .config import DecoderConfig
from .errors import ConfigurationError, DimensionError, NumericError, StateError
from .nn import LayerNorm, Linear, Module, ones, uniform_init, zeros
from .tensor import Tensor, as_tensor


def make_reference_grid(height, width, batch_groups=1):
    """Reference points ``(2i/H - 1, 2j/W - 1)`` as a (batch_groups, 2, H, W) array."""
    rows = np.arange(height, dtype=np.float64) / height * 2.0 - 1.0
    cols = np.arange(width, dtype=np.float64) / width * 2.0 - 1.0
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=0)
    return np.broadcast_to(grid, (batch_groups, 2, height, width)).copy()


def scale_offsets(raw, offset_range, height, width):
    """Squash raw offsets with ``tanh`` and scale each axis to ``offset_range`` grid cells.

    The grid spacing in normalized coordinates is ``2/H`` for rows (channel 0)
    and ``2/W`` for columns (channel 1).
    """
    raw = as_tensor(raw)
    bound = np.array([offset_range * 2.0 / height, offset_range * 2.0 / width]).reshape(1, 2, 1, 1)
    out = raw.tanh() * bound
    # tanh rounds to exactly +-1 for |raw| > ~19; keep the bound strict. The
    # gradient there is already zero to machine precision, so it is left as is.
    cap = np.nextafter(bound, 0.0)
    np.clip(out.data, -cap, cap, out=out.data)
    return out


@dataclass
class SamplingField:
    reference: np.ndarray
    offsets: Tensor
    positions: Tensor


class OffsetNetwork(Module):
    """conv3x3 (grouped, channel preserving) -> LayerNorm -> GELU -> grouped conv1x1 to 2 channels per group."""

    def __init__(self, config, rng, zero_output=False):
        c, g = config.context_channels, config.num_groups
        cg = c // g
        self.groups = g
        self.conv1_weight = uniform_init(rng, (c, cg, 3, 3), cg * 9)
        self.conv1_bias = zeros((c,))
        self.norm_gamma = ones((c,))
        self.norm_beta = zeros((c,))
        if zero_output:
            self.conv2_weight = zeros((2 * g, cg, 1, 1))
        else:
            self.conv2_weight = uniform_init(rng, (2 * g, cg, 1, 1), cg)
        self.conv2_bias = zeros((2 * g,))

    def forward(self, context):
        b, _, h, w = context.shape
        x = F.grouped_conv2d(context, self.conv1_weight, self.conv1_bias, groups=self.groups, padding=1)
        x = F.layer_norm(x.transpose(0, 2, 3, 1), self.norm_gamma, self.norm_beta)
        x = F.gelu(x).transpose(0, 3, 1, 2)
        x = F.grouped_conv2d(x, self.conv2_weight, self.conv2_bias, groups=self.groups)
        return x.reshape(b * self.groups, 2, h, w)


def _check_context(context, config):
    if context.ndim != 4 or tuple(context.shape[1:]) != config.context_shape:
        raise DimensionError(f"context shape {context.shape} does not match config (B, {config.context_shape})")


def _finite(t, what, layer=None):
    if not np.all(np.isfinite(t.data)):
        where = "" if layer is None else f" in layer {layer}"
        err = NumericError(f"non-finite {what}{where}")
        err.layer = layer
        raise err


class DeformableCrossAttention(Module):
    """Cross-attention from query tokens to context sampled at deformable positions.

    Heads are partitioned over offset groups: group ``g`` owns channels
    ``g*C/G:(g+1)*C/G`` of the context, one sampling field, and heads
    ``g*heads/G:(g+1)*heads/G``. Keys and values of a group are projections of
    that group's sampled channels only.
    """

    def __init__(self, config, rng, zero_offsets=False):
        self.config = config
        d, c, g = config.model_dim, config.context_channels, config.num_groups
        cg, dg = c // g, d // g
        if config.deformable:
            self.offset_net = OffsetNetwork(config, rng, zero_output=zero_offsets)
        self.w_q = Linear(d, d, rng)
        self.k_weight = uniform_init(rng, (g, cg, dg), cg)
        self.k_bias = zeros((g, 1, dg))
        self.v_weight = uniform_init(rng, (g, cg, dg), cg)
        self.v_bias = zeros((g, 1, dg))
        self.w_o = Linear(d, d, rng)
        h, w = config.context_height, config.context_width
        if config.pe_type == "relative":
            self.rpe_table = zeros((config.num_heads, config.num_queries, 2 * h - 1, 2 * w - 1))
        elif config.pe_type == "absolute":
            self.abs_pe = zeros((c, h, w))

    def sampling_field(self, context):
        """Reference grid, bounded offsets and sampling positions; depends on ``context`` only."""
        cfg = self.config
        b = context.shape[0]
        h, w = cfg.context_height, cfg.context_width
        reference = make_reference_grid(h, w, b * cfg.num_groups)
        if cfg.deformable:
            offsets = scale_offsets(self.offset_net(context), cfg.offset_range, h, w)
        else:
            offsets = Tensor(np.zeros_like(reference))
        return SamplingField(reference, offsets, offsets + reference)

    def forward(self, tokens, context, residual=None, layer=None, trace=None):
        cfg = self.config
        context = as_tensor(context)
        _check_context(context, cfg)
        b, q, d = tokens.shape
        g, heads, hpg, dh = cfg.num_groups, cfg.num_heads, cfg.heads_per_group, cfg.head_dim
        c, h, w = cfg.context_shape
        n = h * w

        field = self.sampling_field(context)
        _finite(field.positions, "sampling positions", layer)
        src = context + self.abs_pe if cfg.pe_type == "absolute" else context
        sampled = F.bilinear_sample(src.reshape(b * g, c // g, h, w), field.positions)
        sampled = sampled.reshape(b, g, c // g, n).transpose(0, 1, 3, 2)

        def split(x):
            # (B, G, N, hpg*dh) -> (B, heads, N, dh)
            return x.reshape(b, g, n, hpg, dh).transpose(0, 1, 3, 2, 4).reshape(b, heads, n, dh)

        k = split(sampled @ self.k_weight + self.k_bias)
        v = split(sampled @ self.v_weight + self.v_bias)
        qh = self.w_q(tokens).reshape(b, q, heads, dh).transpose(0, 2, 1, 3)
        logits = (qh @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if cfg.pe_type == "relative":
            logits = logits + self._relative_bias(field.positions, b)
        attn = F.softmax(logits, axis=-1)
        _finite(attn, "attention weights", layer)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, q, d)
        out = self.w_o(out)
        if trace is not None:
            trace.record_cross(field.positions.data, attn.data)
        return (tokens if residual is None else residual) + out

    def _relative_bias(self, positions, batch):
        cfg = self.config
        heads = cfg.num_heads
        head_idx = np.tile(np.arange(heads), batch)
        field_idx = np.repeat(np.arange(batch) * cfg.num_groups, heads) + head_idx // cfg.heads_per_group
        bias = F.bilinear_sample(self.rpe_table[head_idx], positions[field_idx])
        return bias.reshape(batch, heads, cfg.num_queries, -1)


class SelfAttention(Module):
    def __init__(self, dim, num_heads, rng):
        if dim % num_heads:
            raise ConfigurationError(f"model dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def forward(self, tokens, residual=None):
        b, q, d = tokens.shape
        heads, dh = self.num_heads, d // self.num_heads

        def split(x):
            return x.reshape(b, q, heads, dh).transpose(0, 2, 1, 3)

        qh, kh, vh = split(self.w_q(tokens)), split(self.w_k(tokens)), split(self.w_v(tokens))
        attn = F.softmax((qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = self.w_o((attn @ vh).transpose(0, 2, 1, 3).reshape(b, q, d))
        return (tokens if residual is None else residual) + out


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class DecoderLayer(Module):
    """Pre-norm self-attention, deformable cross-attention and FFN, each residual."""

    def __init__(self, config, rng, zero_offsets=False):
        d = config.model_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = SelfAttention(d, config.num_heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = DeformableCrossAttention(config, rng, zero_offsets=zero_offsets)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, config.ffn_multiplier * d, rng)

    def forward(self, y, context, layer=None, trace=None):
        y = self.self_attn(self.norm1(y), residual=y)
        y = self.cross_attn(self.norm2(y), context, residual=y, layer=layer, trace=trace)
        return y + self.ffn(self.norm3(y))


class Decoder(Module):
    """Learnable query tokens refined by a stack of decoder layers.

    Token rows 0..23 are the pose queries and row 24 the shape query
    (a single token in the single-query variant).
    """

    def __init__(self, config, rng, zero_offsets=False):
        self.config = config
        self.query_tokens = uniform_init(rng, (config.num_queries, config.model_dim), config.model_dim)
        self.layers = [DecoderLayer(config, rng, zero_offsets=zero_offsets) for _ in range(config.num_layers)]

    def forward(self, context, trace=None):
        context = as_tensor(context)
        _check_context(context, self.config)
        b = context.shape[0]
        y = self.query_tokens.reshape(1, *self.query_tokens.shape).broadcast_to(
            (b, self.config.num_queries, self.config.model_dim)
        )
        for i, layer in enumerate(self.layers):
            y = layer(y, context, layer=i, trace=trace)
            _finite(y, "activations", i)
        return y

    def forward_with_trace(self, context, sample=0):
        trace = AttentionTrace(self.config, sample=sample)
        return self.forward(context, trace=trace), trace


@dataclass
class LayerTrace:
    positions: np.ndarray  # (G, 2, H, W)
    weights: np.ndarray  # (heads, Q, H*W)


@dataclass
class AttentionTrace:
    """Sampling positions and cross-attention weights of one sample, per layer."""

    config: DecoderConfig
    sample: int = 0
    layers: list = field(default_factory=list)

    def record_cross(self, positions, weights):
        g = self.config.num_groups
        s = self.sample
        self.layers.append(LayerTrace(positions[s * g : (s + 1) * g].copy(), weights[s].copy()))

    def group_of_head(self, head):
        return head // self.config.heads_per_group

    def to_records(self):
        """Flat rows ``(layer, head, y, x, weight)``; weight is summed over queries."""
        rows = []
        for li, lt in enumerate(self.layers):
            mass = lt.weights.sum(axis=1)
            for head in range(lt.weights.shape[0]):
                pos = lt.positions[self.group_of_head(head)].reshape(2, -1)
                for k in range(pos.shape[1]):
                    rows.append(
                        {"layer": li, "head": head, "y": float(pos[0, k]), "x": float(pos[1, k]), "weight": float(mass[head, k])}
                    )
        return rows


@dataclass(frozen=True)
class Hotspot:
    layer: int
    head: int
    position: tuple  # (y, x) in normalized coordinates
    index: int  # flattened grid index of the sampling point
    weight: float


def extract_attention_hotspots(trace, threshold=0.25):
    """Sampling points whose attention, summed over queries, exceeds ``threshold``; largest first."""
    if trace is None or not trace.layers:
        raise StateError("attention trace is empty; run the decoder with tracing first")
    found = []
    for li, lt in enumerate(trace.layers):
        mass = lt.weights.sum(axis=1)
        for head in range(mass.shape[0]):
            pos = lt.positions[trace.group_of_head(head)].reshape(2, -1)
            for k in np.flatnonzero(mass[head] > threshold):
                found.append(Hotspot(li, head, (float(pos[0, k]), float(pos[1, k])), int(k), float(mass[head, k])))
    found.sort(key=lambda hs: (-hs.weight, hs.layer, hs.head, hs.index))
    return found


def write_pgm(path, image):
    """Write a 2D array in [0, 1] as a binary (P5) 8-bit graymap."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def render_head_heatmap(trace, layer, head, scale=8):
    """Canvas of the normalized [-1, 1] square with each sampling point splatted by its query-summed weight."""
    lt = trace.layers[layer]
    cfg = trace.config
    h, w = cfg.context_height, cfg.context_width
    mass = lt.weights[head].sum(axis=0)
    pos = lt.positions[trace.group_of_head(head)].reshape(2, -1)
    canvas = np.zeros((h * scale, w * scale))
    rows = np.clip(np.floor((pos[0] + 1.0) * 0.5 * h * scale), 0, h * scale - 1).astype(int)
    cols = np.clip(np.floor((pos[1] + 1.0) * 0.5 * w * scale), 0, w * scale - 1).astype(int)
    np.maximum.at(canvas, (rows, cols), mass)
    peak = canvas.max()
    return canvas / peak if peak > 0 else canvas
