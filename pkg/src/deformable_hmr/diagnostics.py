"""Gradient-check suite over every differentiable kernel and one full decoder layer."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .body import SmplParams, lbs_forward, make_synthetic_template, rot6d_to_matrix
from .config import DecoderConfig
from .decoder import Decoder
from .gradcheck import grad_check
from .tensor import Tensor, concat, cross, matmul, stack

TOLERANCE = 1e-4
SMALL_LAYER = DecoderConfig(
    model_dim=8, num_heads=2, num_groups=1, offset_range=1.0, num_layers=1,
    context_channels=4, context_height=2, context_width=2, pe_type="relative",
)


@dataclass
class CheckRow:
    name: str
    error: float
    seconds: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def _leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _projector(rng, shape):
    # random weights turn any output into a scalar with a generic gradient
    return rng.standard_normal(shape)


def _interior_positions(rng, n, hs, ws, h, w):
    """Normalized positions whose continuous indices sit at fractional offsets in [0.2, 0.8] of a cell."""
    iy = rng.integers(0, h - 1, size=(n, hs, ws)) + rng.uniform(0.2, 0.8, size=(n, hs, ws))
    ix = rng.integers(0, w - 1, size=(n, hs, ws)) + rng.uniform(0.2, 0.8, size=(n, hs, ws))
    return np.stack([iy / h * 2.0 - 1.0, ix / w * 2.0 - 1.0], axis=1)


def randomize_parameters(module, rng, scale=0.5):
    """Overwrite every parameter with seeded noise so no gradient path is trivially zero."""
    for _, p in module.named_parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)


def kernel_checks(seed=0, corrupt=None):
    rng = np.random.default_rng(seed)
    cases = []

    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    r = _projector(rng, (3, 5))
    cases.append(("linear", lambda: (F.linear(x, w, b) * r).sum(), [x, w, b]))

    xl, g, beta = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    r2 = _projector(rng, (2, 3, 6))
    cases.append(("layer_norm", lambda: (F.layer_norm(xl, g, beta, 1e-5) * r2).sum(), [xl, g, beta]))

    xg = _leaf(rng, 4, 5, scale=2.0)
    r3 = _projector(rng, (4, 5))
    cases.append(("gelu", lambda: (F.gelu(xg) * r3).sum(), [xg]))
    cases.append(("softmax", lambda: (F.softmax(xg, axis=-1) * r3).sum(), [xg]))

    xc, wc, bc = _leaf(rng, 2, 4, 5, 5), _leaf(rng, 6, 2, 3, 3), _leaf(rng, 6)
    r4 = _projector(rng, (2, 6, 5, 5))
    cases.append(
        ("grouped_conv2d", lambda: (F.grouped_conv2d(xc, wc, bc, groups=2, padding=1) * r4).sum(), [xc, wc, bc])
    )

    xs = _leaf(rng, 2, 3, 4, 5)
    pos = Tensor(_interior_positions(rng, 2, 3, 3, 4, 5), requires_grad=True)
    r5 = _projector(rng, (2, 3, 3, 3))
    cases.append(("bilinear_sample[input]", lambda: (F.bilinear_sample(xs, pos) * r5).sum(), [xs]))
    cases.append(("bilinear_sample[positions]", lambda: (F.bilinear_sample(xs, pos) * r5).sum(), [pos]))

    a, c = _leaf(rng, 2, 3, 3), _leaf(rng, 3, 3)
    r6 = _projector(rng, (2, 3, 3))

    def tensor_ops():
        y = matmul(a, c).tanh() + cross(a, a[:, ::-1]) * 0.1
        y = concat([y, stack([a[:, 0], a[:, 1], a[:, 2]], axis=1).exp() * 0.1], axis=-1)
        z = (a * a + 1.0).sqrt().log() / (c.softplus() + 1.0)
        return (y[..., :3] * r6).sum() + z.mean() + (a.transpose(0, 2, 1) - a).sum(axis=1).mean()

    cases.append(("tensor_ops", tensor_ops, [a, c]))

    r6d = Tensor(np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], (3, 1)) + 0.3 * rng.standard_normal((3, 6)), requires_grad=True)
    r7 = _projector(rng, (3, 3, 3))
    cases.append(("rot6d_to_matrix", lambda: (rot6d_to_matrix(r6d) * r7).sum(), [r6d]))

    template = make_synthetic_template(seed, 32)
    pose = Tensor(np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], (1, 24, 1)) + 0.2 * rng.standard_normal((1, 24, 6)), requires_grad=True)
    betas, cam = _leaf(rng, 1, 10), Tensor([[1.1, 0.05, -0.02]], requires_grad=True)
    rv, rj = _projector(rng, (1, 32, 3)), _projector(rng, (1, 24, 2))

    def skinning():
        mesh = lbs_forward(SmplParams(pose, betas, cam), template)
        return (mesh.vertices * rv).sum() + (mesh.joints2d * rj).sum()

    cases.append(("lbs_forward", skinning, [pose, betas, cam]))

    rows = []
    for name, f, params in cases:
        t0 = time.perf_counter()
        err = grad_check(f, params, corrupt=corrupt)
        rows.append(CheckRow(name, err, time.perf_counter() - t0))
    return rows


def decoder_layer_check(seed=0, config=SMALL_LAYER, corrupt=None):
    """Gradient check of a scalar through one full decoder layer w.r.t. every parameter and the context."""
    rng = np.random.default_rng(seed)
    decoder = Decoder(config, rng)
    randomize_parameters(decoder, rng)
    context = Tensor(rng.standard_normal((2,) + config.context_shape), requires_grad=True)
    proj = _projector(rng, (2, config.num_queries, config.model_dim))

    def f():
        return (decoder(context) * proj).sum()

    params = dict(decoder.named_parameters())
    params["context"] = context
    t0 = time.perf_counter()
    err = grad_check(f, params, corrupt=corrupt)
    return CheckRow("decoder_layer", err, time.perf_counter() - t0)


def run_gradcheck_suite(seed=0, corrupt=None, layer_config=SMALL_LAYER):
    return kernel_checks(seed, corrupt) + [decoder_layer_check(seed, layer_config, corrupt)]


def format_table(rows):
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'rel_error':>10}  {'seconds':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.error:10.3e}  {r.seconds:8.2f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
