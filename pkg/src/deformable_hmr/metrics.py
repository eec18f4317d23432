"""MPJPE, PA-MPJPE and PVE, with a closed-form similarity Procrustes aligner."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import lbs_forward
from .errors import ConfigurationError, DimensionError, NumericError
from .tensor import Tensor

ROOT_JOINT = 0

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "num_samples", "per_sample"],
    "properties": {
        "mpjpe_mm": {"type": "number", "minimum": 0},
        "pa_mpjpe_mm": {"type": "number", "minimum": 0},
        "pve_mm": {"type": "number", "minimum": 0},
        "num_samples": {"type": "integer", "minimum": 0},
        "per_sample": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "mpjpe_mm": {"type": "number", "minimum": 0},
                    "pa_mpjpe_mm": {"type": "number", "minimum": 0},
                    "pve_mm": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


def _pair(pred, gt, what):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3 or pred.shape[0] < 1:
        raise DimensionError(f"{what}: expected matching (N, 3) arrays, got {pred.shape} and {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, unit_scale=1000.0):
    """Mean joint distance; inputs are expected to be root-aligned already. Meters in, mm out."""
    pred, gt = _pair(pred, gt, "mpjpe")
    return float(np.linalg.norm(pred - gt, axis=1).mean() * unit_scale)


def pve(pred_vertices, gt_vertices, unit_scale=1000.0):
    """Mean vertex distance; same formula as :func:`mpjpe`, applied to mesh vertices."""
    pred, gt = _pair(pred_vertices, gt_vertices, "pve")
    return float(np.linalg.norm(pred - gt, axis=1).mean() * unit_scale)


def similarity_transform(pred, gt):
    """Optimal ``(s, R, t)`` with ``s R pred_j + t ~ gt_j`` in least squares, R a proper rotation."""
    pred, gt = _pair(pred, gt, "procrustes_align")
    if pred.shape[0] < 3:
        raise DimensionError(f"procrustes_align needs at least 3 points, got {pred.shape[0]}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    x, y = pred - mu_p, gt - mu_g
    var_x = (x * x).sum()
    if var_x < 1e-24:
        raise NumericError("procrustes_align: predicted points are degenerate (all coincident)")
    cov = y.T @ x
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sv * d).sum() / var_x)
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


def procrustes_align(pred, gt):
    s, r, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ r.T + t


def pa_mpjpe(pred, gt, unit_scale=1000.0):
    return mpjpe(procrustes_align(pred, gt), gt, unit_scale)


def root_align(points, joints, root=ROOT_JOINT):
    return np.asarray(points) - np.asarray(joints)[root]


@dataclass
class SampleMetrics:
    index: int
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pve_mm: float


@dataclass
class EvalReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pve_mm: float
    per_sample: list = field(default_factory=list)

    @property
    def num_samples(self):
        return len(self.per_sample)

    def to_dict(self):
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "pve_mm": self.pve_mm,
            "num_samples": self.num_samples,
            "per_sample": [asdict(s) for s in self.per_sample],
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm"])
            for s in self.per_sample:
                writer.writerow([s.index, repr(s.mpjpe_mm), repr(s.pa_mpjpe_mm), repr(s.pve_mm)])


def sample_metrics(index, pred_joints, gt_joints, pred_vertices, gt_vertices, joint_mask=None):
    """Root-align (joint 0) both predictions and ground truth, then score one sample."""
    pj, gj = root_align(pred_joints, pred_joints), root_align(gt_joints, gt_joints)
    pv, gv = root_align(pred_vertices, pred_joints), root_align(gt_vertices, gt_joints)
    if joint_mask is not None:
        pj, gj = pj[joint_mask], gj[joint_mask]
    return SampleMetrics(index, mpjpe(pj, gj), pa_mpjpe(pj, gj), pve(pv, gv))


def summarize(per_sample):
    if not per_sample:
        return EvalReport(0.0, 0.0, 0.0, [])
    return EvalReport(
        float(np.mean([s.mpjpe_mm for s in per_sample])),
        float(np.mean([s.pa_mpjpe_mm for s in per_sample])),
        float(np.mean([s.pve_mm for s in per_sample])),
        list(per_sample),
    )


def evaluate(model, dataset, template, joint_mask=None, batch_size=32):
    """Run ``model`` on every sample of ``dataset`` and score it against ground truth.

    ``model`` is an :class:`~deformable_hmr.training.HMRModel` or any callable
    mapping a context batch to :class:`~deformable_hmr.body.SmplParams`.
    """
    config = getattr(model, "config", None)
    if config is not None and dataset and tuple(dataset[0].context.shape) != config.context_shape:
        raise ConfigurationError(
            f"checkpoint expects context {config.context_shape}, dataset has {tuple(dataset[0].context.shape)}"
        )
    rows = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        params = model(Tensor(np.stack([s.context for s in chunk])))
        mesh = lbs_forward(params, template)
        for k, s in enumerate(chunk):
            rows.append(
                sample_metrics(start + k, mesh.joints3d.data[k], s.joints3d, mesh.vertices.data[k], s.vertices, joint_mask)
            )
    return summarize(rows)
