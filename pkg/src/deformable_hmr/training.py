"""Parameter heads, losses, AdamW, synthetic data and the training loop."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import functional as F
from .body import (
    IDENTITY_6D,
    NUM_BETAS,
    NUM_JOINTS,
    SmplParams,
    lbs_forward,
    make_synthetic_template,
    matrix_to_rot6d,
)
from .config import RunConfig
from .decoder import Decoder
from .errors import DimensionError, NumericError, TrainingError
from .nn import LayerNorm, Linear, Module, uniform_init, zeros
from .tensor import Tensor, concat

POSE_DIM = NUM_JOINTS * 6
PARAM_DIM = POSE_DIM + NUM_BETAS + 3


def _softplus_inverse(y):
    return np.log(np.expm1(y))


@dataclass
class LossWeights:
    smpl: float = 1.0
    joint: float = 5.0
    mesh: float = 60.0

    def __post_init__(self):
        if min(self.smpl, self.joint, self.mesh) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class MeanParams:
    """Starting estimate for the single error-feedback round."""

    pose: np.ndarray = field(default_factory=lambda: np.tile(IDENTITY_6D, (NUM_JOINTS, 1)))
    shape: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BETAS))
    camera: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))


class ParamHead(Module):
    """Linear heads on decoder tokens, conditioned on the mean estimate and added to it.

    Multi-query: each pose token (plus its mean 6D rotation) maps through its
    own block of the pose projection to a 6D update; the shape token (plus mean shape
    and camera) maps to shape and camera updates. Single-query: one token
    plus all mean parameters maps to every update. Heads start at zero, so
    an untrained head returns the mean exactly.
    """

    def __init__(self, config, rng, zero=True):
        d = config.model_dim
        self.multi_query = config.multi_query
        self.norm = LayerNorm(d)
        if self.multi_query:
            self.pose_weight = _head_weight(rng, (NUM_JOINTS, d + 6, 6), zero)
            self.pose_bias = zeros((NUM_JOINTS, 1, 6))
            self.shape_head = Linear(d + NUM_BETAS + 3, NUM_BETAS + 3, rng, zero=zero)
        else:
            self.joint_head = Linear(d + PARAM_DIM, PARAM_DIM, rng, zero=zero)

    def forward(self, tokens, means):
        b = tokens.shape[0]
        feats = self.norm(tokens)
        pose0 = np.broadcast_to(means.pose, (b, NUM_JOINTS, 6))
        cam_raw0 = np.array([_softplus_inverse(means.camera[0]), means.camera[1], means.camera[2]])
        shape_cam0 = np.broadcast_to(np.concatenate([means.shape, cam_raw0]), (b, NUM_BETAS + 3))
        if self.multi_query:
            pose_in = concat([feats[:, :NUM_JOINTS], Tensor(pose0)], axis=-1)
            delta = pose_in.reshape(b, NUM_JOINTS, 1, -1) @ self.pose_weight + self.pose_bias
            pose = delta.reshape(b, NUM_JOINTS, 6) + pose0
            shape_in = concat([feats[:, NUM_JOINTS], Tensor(shape_cam0)], axis=-1)
            shape_cam = self.shape_head(shape_in) + shape_cam0
        else:
            start = np.concatenate([pose0.reshape(b, POSE_DIM), shape_cam0], axis=-1)
            flat = self.joint_head(concat([feats[:, 0], Tensor(start)], axis=-1)) + start
            pose = flat[:, :POSE_DIM].reshape(b, NUM_JOINTS, 6)
            shape_cam = flat[:, POSE_DIM:]
        camera = concat([shape_cam[:, NUM_BETAS : NUM_BETAS + 1].softplus(), shape_cam[:, NUM_BETAS + 1 :]], axis=-1)
        return SmplParams(pose, shape_cam[:, :NUM_BETAS], camera)


def _head_weight(rng, shape, zero):
    if zero:
        return zeros(shape)
    return uniform_init(rng, shape, shape[-2])


def predict_params(tokens, head, means):
    return head(tokens, means)


class HMRModel(Module):
    """Decoder plus parameter head: context maps to body parameters."""

    def __init__(self, config, seed=0, zero_offsets=False):
        rng = np.random.default_rng(seed)
        self.config = config
        self.decoder = Decoder(config, rng, zero_offsets=zero_offsets)
        self.head = ParamHead(config, rng)

    def forward(self, context, means=None):
        return self.head(self.decoder(context), means or MeanParams())


# -- losses -------------------------------------------------------------------


@dataclass
class BodyEstimate:
    """Parameters with the mesh they produce; used for both predictions and targets."""

    pose: object
    shape: object
    camera: object
    joints3d: object
    vertices: object
    joints2d: object

    @classmethod
    def from_params(cls, params, template):
        mesh = lbs_forward(params, template)
        return cls(params.pose, params.shape, params.camera, mesh.joints3d, mesh.vertices, mesh.joints2d)


def _checked_mse(name, pred, target):
    if tuple(pred.shape) != tuple(np.shape(target.data if isinstance(target, Tensor) else target)):
        raise DimensionError(f"loss term {name}: prediction shape {tuple(pred.shape)} != target shape {np.shape(target)}")
    return F.mse(pred, target)


def loss_terms(pred, target):
    b = pred.pose.shape[0]
    smpl_pred = concat([pred.pose.reshape(b, -1), pred.shape.reshape(b, -1)], axis=-1)
    tgt_pose = target.pose.data if isinstance(target.pose, Tensor) else np.asarray(target.pose)
    tgt_shape = target.shape.data if isinstance(target.shape, Tensor) else np.asarray(target.shape)
    if tgt_pose.shape != tuple(pred.pose.shape) or tgt_shape.shape != tuple(pred.shape.shape):
        raise DimensionError(
            f"loss term smpl: prediction shapes {pred.pose.shape}/{pred.shape.shape} != target {tgt_pose.shape}/{tgt_shape.shape}"
        )
    smpl_target = np.concatenate([tgt_pose.reshape(b, -1), tgt_shape.reshape(b, -1)], axis=-1)
    return {
        "smpl": F.mse(smpl_pred, smpl_target),
        "joints3d": _checked_mse("joints3d", pred.joints3d, target.joints3d),
        "joints2d": _checked_mse("joints2d", pred.joints2d, target.joints2d),
        "mesh": _checked_mse("mesh", pred.vertices, target.vertices),
    }


def total_loss(pred, target, weights=None):
    """Weighted sum of MSE terms; returns (total, {term: Tensor})."""
    weights = weights or LossWeights()
    terms = loss_terms(pred, target)
    total = (
        terms["smpl"] * weights.smpl
        + (terms["joints3d"] + terms["joints2d"]) * weights.joint
        + terms["mesh"] * weights.mesh
    )
    return total, terms


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=1e-4, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One in-place AdamW update of ``params`` (name -> ndarray) with decoupled decay."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, named_params, lr=1e-4, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state = AdamWState()

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        arrays = {n: p.data for n, p in self.params.items()}
        adamw_step(arrays, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- synthetic data -------------------------------------------------------------


def flatten_params(pose, shape, camera):
    """Deviation from the identity/default estimate, flattened to (..., 157)."""
    pose = np.asarray(pose) - IDENTITY_6D
    camera = np.asarray(camera) - np.array([1.0, 0.0, 0.0])
    lead = pose.shape[:-2]
    return np.concatenate([pose.reshape(*lead, POSE_DIM), np.asarray(shape), camera], axis=-1)


def unflatten_params(flat):
    flat = np.asarray(flat)
    lead = flat.shape[:-1]
    pose = flat[..., :POSE_DIM].reshape(*lead, NUM_JOINTS, 6) + IDENTITY_6D
    shape = flat[..., POSE_DIM : POSE_DIM + NUM_BETAS]
    camera = flat[..., POSE_DIM + NUM_BETAS :] + np.array([1.0, 0.0, 0.0])
    return pose, shape, camera


class SyntheticEncoder:
    """Frozen stand-in for the image encoder: a fixed random linear map from parameters to a feature map.

    Holds plain arrays only; nothing here is ever tracked for gradients.
    """

    def __init__(self, context_shape, seed=0, noise=0.01):
        rng = np.random.default_rng(seed)
        self.context_shape = tuple(context_shape)
        size = int(np.prod(self.context_shape))
        self.projection = rng.standard_normal((size, PARAM_DIM)) / np.sqrt(PARAM_DIM) * 4.0
        self.bias_map = 0.1 * rng.standard_normal(self.context_shape)
        self.noise = noise

    def encode(self, flat_params, rng=None):
        ctx = (self.projection @ np.asarray(flat_params)).reshape(self.context_shape) + self.bias_map
        if rng is not None and self.noise > 0:
            ctx = ctx + self.noise * rng.standard_normal(self.context_shape)
        return ctx


@dataclass
class SyntheticSample:
    context: np.ndarray
    pose: np.ndarray
    shape: np.ndarray
    camera: np.ndarray
    joints3d: np.ndarray
    vertices: np.ndarray
    joints2d: np.ndarray


def random_params(rng, pose_scale=0.2, shape_scale=0.3):
    rotvec = pose_scale * rng.standard_normal((NUM_JOINTS, 3))
    pose = matrix_to_rot6d(Rotation.from_rotvec(rotvec).as_matrix())
    shape = shape_scale * rng.standard_normal(NUM_BETAS)
    camera = np.array([1.0 + 0.1 * rng.uniform(-1, 1), 0.05 * rng.standard_normal(), 0.05 * rng.standard_normal()])
    return pose, shape, camera


def make_sample(pose, shape, camera, template, encoder, rng=None):
    mesh = lbs_forward(SmplParams(pose[None], shape[None], camera[None]), template)
    context = encoder.encode(flatten_params(pose, shape, camera), rng)
    return SyntheticSample(context, pose, shape, camera, mesh.joints3d.data[0], mesh.vertices.data[0], mesh.joints2d.data[0])


def synth_dataset(seed, n, config, template, encoder=None, pose_scale=0.2, shape_scale=0.3, noise=0.01):
    """``n`` samples with random parameters and ground truth derived through the body model."""
    if n < 1:
        raise ValueError("n must be >= 1")
    encoder = encoder or SyntheticEncoder(config.context_shape, seed=seed, noise=noise)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        pose, shape, camera = random_params(rng, pose_scale, shape_scale)
        samples.append(make_sample(pose, shape, camera, template, encoder, rng))
    return samples


def collate(samples):
    """Stack samples into a batched :class:`BodyEstimate` of arrays plus the context batch."""
    def cat(name):
        return np.stack([getattr(s, name) for s in samples])

    target = BodyEstimate(cat("pose"), cat("shape"), cat("camera"), cat("joints3d"), cat("vertices"), cat("joints2d"))
    return cat("context"), target


def build_run(config, seed=None):
    """Template, frozen encoder and dataset for a :class:`RunConfig`."""
    template = make_synthetic_template(config.template_seed, config.num_vertices)
    encoder = SyntheticEncoder(config.decoder.context_shape, seed=config.encoder_seed, noise=config.noise)
    data_seed = config.encoder_seed if seed is None else seed
    dataset = synth_dataset(
        data_seed, config.num_samples, config.decoder, template, encoder,
        pose_scale=config.pose_scale, shape_scale=config.shape_scale, noise=config.noise,
    )
    return template, encoder, dataset


# -- training loop --------------------------------------------------------------

TERM_NAMES = ("smpl", "joints3d", "joints2d", "mesh")


@dataclass
class TrainResult:
    model: HMRModel
    history: list  # per step: {"step", terms..., "total"}; step 0 is the initial loss


def forward_loss(model, contexts, target, template, weights, means=None):
    params = model(Tensor(contexts), means)
    pred = BodyEstimate.from_params(params, template)
    return total_loss(pred, target, weights)


def train(config, dataset, template, steps=None, seed=0, means=None, log=None):
    """AdamW on (mini-)batches of ``dataset``.

    The history holds the full-dataset loss before each update; the last entry
    is the loss after the final update. With ``batch_size >= len(dataset)`` one
    step is one epoch.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    steps = config.steps if steps is None else steps
    weights = LossWeights(config.lambda_smpl, config.lambda_joint, config.lambda_mesh)
    model = HMRModel(config.decoder, seed=seed)
    opt = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    contexts, target = collate(dataset)
    n = len(dataset)
    bs = min(config.batch_size, n)
    history = []

    def record(step, total, terms):
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged at step {step}", step=step)
        history.append({"step": step, **{k: float(terms[k].data) for k in TERM_NAMES}, "total": value})
        if log is not None:
            log(history[-1])

    order = np.arange(n)
    cursor = n
    for step in range(steps):
        if bs == n:
            batch_idx = order
        else:
            if cursor + bs > n:
                order = rng.permutation(n)
                cursor = 0
            batch_idx = order[cursor : cursor + bs]
            cursor += bs
        batch_target = _select(target, batch_idx)
        total, terms = forward_loss(model, contexts[batch_idx], batch_target, template, weights, means)
        if bs == n:
            record(step, total, terms)
        else:
            full_total, full_terms = forward_loss(model, contexts, target, template, weights, means)
            record(step, full_total, full_terms)
        opt.zero_grad()
        total.backward()
        try:
            opt.step()
        except NumericError as exc:
            raise TrainingError(f"non-finite gradient at step {step}: {exc}", step=step) from exc
    total, terms = forward_loss(model, contexts, target, template, weights, means)
    record(steps, total, terms)
    return TrainResult(model, history)


def _select(target, idx):
    return BodyEstimate(*(np.asarray(getattr(target, f))[idx] for f in ("pose", "shape", "camera", "joints3d", "vertices", "joints2d")))


# -- serialization --------------------------------------------------------------

CHECKPOINT_MAGIC = b"DHMRCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, run_config, extra=None):
    """Binary checkpoint: magic, version, JSON config echo, then named float64 arrays."""
    meta = json.dumps({"config": run_config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Return (RunConfig, extra metadata, ordered state dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return RunConfig.from_dict(meta["config"]), meta.get("extra", {}), state


def load_model(path):
    config, extra, state = read_checkpoint(path)
    model = HMRModel(config.decoder)
    model.load_state_dict(state)
    return model, config, extra


def write_loss_csv(path, history):
    cols = ("step",) + TERM_NAMES + ("total",)
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join([str(row["step"])] + [repr(float(row[c])) for c in cols[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_csv(path):
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append({c: (int(v) if c == "step" else float(v)) for c, v in zip(cols, vals)})
    return rows
