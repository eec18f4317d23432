"""scikit-learn style front end: context feature maps in, body parameters out."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .body import SmplParams, lbs_forward, make_synthetic_template
from .config import DecoderConfig, RunConfig
from .errors import DimensionError
from .metrics import evaluate
from .tensor import Tensor
from .training import PARAM_DIM, SyntheticSample, flatten_params, train, unflatten_params


def _as_samples(X, y, template):
    pose, shape, camera = unflatten_params(y)
    mesh = lbs_forward(SmplParams(pose, shape, camera), template)
    j3d, verts, j2d = mesh.joints3d.data, mesh.vertices.data, mesh.joints2d.data
    return [SyntheticSample(X[i], pose[i], shape[i], camera[i], j3d[i], verts[i], j2d[i]) for i in range(len(X))]


class DeformableMeshRegressor(RegressorMixin, BaseEstimator):
    """Regress body-model parameters from encoder feature maps.

    ``X`` has shape (n_samples, C, H, W). ``y`` has shape (n_samples, 157):
    the 24 per-joint 6D rotations minus identity (144 values), 10 shape
    coefficients, and the camera ``(s - 1, tx, ty)``; see
    :func:`~deformable_hmr.training.flatten_params`.
    """

    def __init__(
        self,
        model_dim=32,
        num_heads=8,
        num_groups=4,
        offset_range=1.0,
        num_layers=2,
        pe_type="relative",
        deformable=True,
        multi_query=True,
        ffn_multiplier=4,
        steps=500,
        batch_size=8,
        lr=1e-4,
        weight_decay=1e-3,
        lambda_smpl=1.0,
        lambda_joint=5.0,
        lambda_mesh=60.0,
        template=None,
        num_vertices=128,
        random_state=0,
    ):
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.num_groups = num_groups
        self.offset_range = offset_range
        self.num_layers = num_layers
        self.pe_type = pe_type
        self.deformable = deformable
        self.multi_query = multi_query
        self.ffn_multiplier = ffn_multiplier
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_smpl = lambda_smpl
        self.lambda_joint = lambda_joint
        self.lambda_mesh = lambda_mesh
        self.template = template
        self.num_vertices = num_vertices
        self.random_state = random_state

    def _run_config(self, context_shape):
        c, h, w = context_shape
        decoder = DecoderConfig(
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            num_groups=self.num_groups,
            offset_range=self.offset_range,
            num_layers=self.num_layers,
            context_channels=c,
            context_height=h,
            context_width=w,
            pe_type=self.pe_type,
            ffn_multiplier=self.ffn_multiplier,
            deformable=self.deformable,
            multi_query=self.multi_query,
        )
        return RunConfig(
            decoder=decoder,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            num_vertices=self.num_vertices,
            lambda_smpl=self.lambda_smpl,
            lambda_joint=self.lambda_joint,
            lambda_mesh=self.lambda_mesh,
        )

    def _template(self):
        if self.template is not None:
            return self.template.validate()
        return make_synthetic_template(self.random_state, self.num_vertices)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, multi_output=True, dtype=np.float64, y_numeric=True)
        if X.ndim != 4:
            raise DimensionError(f"X must be (n_samples, C, H, W), got {X.shape}")
        if y.ndim != 2 or y.shape[1] != PARAM_DIM:
            raise DimensionError(f"y must be (n_samples, {PARAM_DIM}), got {y.shape}")
        config = self._run_config(X.shape[1:])
        template = self._template()
        dataset = _as_samples(X, y, template)
        result = train(config, dataset, template, seed=self.random_state)
        self.model_ = result.model
        self.template_ = template
        self.config_ = config
        self.loss_curve_ = [row["total"] for row in result.history]
        self.context_shape_ = X.shape[1:]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.context_shape_:
            raise DimensionError(f"X has context shape {X.shape[1:]}, estimator was fit on {self.context_shape_}")
        return X

    def predict_params(self, X):
        X = self._check_X(X)
        params = self.model_(Tensor(X))
        return SmplParams(params.pose.data, params.shape.data, params.camera.data)

    def predict(self, X):
        p = self.predict_params(X)
        return flatten_params(p.pose, p.shape, p.camera)

    def predict_mesh(self, X):
        p = self.predict_params(X)
        mesh = lbs_forward(p, self.template_)
        return mesh.vertices.data, mesh.joints3d.data

    def transform(self, X):
        """Decoder output tokens, (n_samples, num_queries, model_dim)."""
        X = self._check_X(X)
        return self.model_.decoder(Tensor(X)).data

    def evaluate(self, X, y):
        """MPJPE / PA-MPJPE / PVE report against parameter targets ``y``."""
        X = self._check_X(X)
        return evaluate(self.model_, _as_samples(X, np.asarray(y, dtype=np.float64), self.template_), self.template_)
