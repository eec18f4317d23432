import numpy as np
import pytest

from deformable_hmr.body import IDENTITY_6D, SmplParams, lbs_forward, make_synthetic_template
from deformable_hmr.config import RunConfig
from deformable_hmr.errors import DimensionError, NumericError, TrainingError
from deformable_hmr.tensor import Tensor
from deformable_hmr.training import (
    PARAM_DIM,
    AdamWState,
    BodyEstimate,
    HMRModel,
    LossWeights,
    MeanParams,
    SyntheticEncoder,
    adamw_step,
    build_run,
    collate,
    flatten_params,
    forward_loss,
    load_model,
    make_sample,
    read_checkpoint,
    read_loss_csv,
    save_checkpoint,
    synth_dataset,
    total_loss,
    train,
    unflatten_params,
    write_loss_csv,
)


@pytest.fixture(scope="module")
def template():
    return make_synthetic_template(0, 48)


def _target_from(sample_list):
    return collate(sample_list)[1]


class TestHeads:
    @pytest.mark.parametrize("multi_query", [True, False])
    def test_zero_heads_return_mean(self, tiny_config, rng, multi_query):
        model = HMRModel(tiny_config.replace(multi_query=multi_query), seed=2)
        means = MeanParams(
            pose=np.tile(IDENTITY_6D, (24, 1)) + 0.1 * rng.standard_normal((24, 6)),
            shape=rng.standard_normal(10),
            camera=np.array([1.3, 0.2, -0.1]),
        )
        out = model(Tensor(rng.standard_normal((3,) + tiny_config.context_shape)), means)
        assert out.pose.shape == (3, 24, 6) and out.shape.shape == (3, 10) and out.camera.shape == (3, 3)
        for i in range(3):
            assert np.array_equal(out.pose.data[i], means.pose)
            assert np.array_equal(out.shape.data[i], means.shape)
            np.testing.assert_allclose(out.camera.data[i], means.camera, rtol=1e-15)

    def test_default_camera_scale_is_one(self, tiny_config, rng):
        out = HMRModel(tiny_config)(Tensor(rng.standard_normal((1,) + tiny_config.context_shape)))
        assert out.camera.data[0, 0] == 1.0


class TestLoss:
    def _target(self, template, rng):
        pose = np.tile(IDENTITY_6D, (2, 24, 1)) + 0.1 * rng.standard_normal((2, 24, 6))
        params = SmplParams(pose, rng.standard_normal((2, 10)), np.tile([1.0, 0.0, 0.0], (2, 1)))
        return BodyEstimate.from_params(params, template)

    def test_identical_is_zero(self, template, rng):
        t = self._target(template, rng)
        total, _ = total_loss(t, t)
        assert total.data == 0.0

    def test_vertex_offset(self, template, rng):
        t = self._target(template, rng)
        pred = BodyEstimate(t.pose, t.shape, t.camera, t.joints3d, Tensor(t.vertices.data + 0.1), t.joints2d)
        total, terms = total_loss(pred, t)
        # 60 * mean(0.1^2)
        assert total.data == pytest.approx(60 * 0.01, rel=1e-12)
        assert terms["smpl"].data == 0.0

    def test_mesh_weight_scales_gradient(self, template, rng):
        t = self._target(template, rng)
        grads = []
        for lam in (60.0, 120.0):
            v = Tensor(t.vertices.data + 0.05, requires_grad=True)
            pred = BodyEstimate(t.pose, t.shape, t.camera, t.joints3d, v, t.joints2d)
            total, _ = total_loss(pred, t, LossWeights(mesh=lam))
            total.backward()
            grads.append(v.grad)
        np.testing.assert_array_equal(grads[1], 2.0 * grads[0])

    def test_shape_mismatch_names_term(self, template, rng):
        t = self._target(template, rng)
        pred = BodyEstimate(t.pose, t.shape, t.camera, Tensor(np.zeros((2, 23, 3))), t.vertices, t.joints2d)
        with pytest.raises(DimensionError, match="joints3d"):
            total_loss(pred, t)

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            LossWeights(mesh=0.0)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamWState(), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_magnitude(self, rng):
        g = rng.standard_normal(5)
        p = {"w": np.zeros(5)}
        adamw_step(p, {"w": g}, AdamWState(), lr=1e-3, weight_decay=0.0, eps=1e-8)
        # bias-corrected first step: -lr * g / (|g| + eps)
        np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert np.all(np.abs(p["w"]) <= 1e-3)

    def test_decoupled_decay(self):
        p = {"w": np.array([3.0])}
        state = AdamWState()
        for _ in range(4):
            adamw_step(p, {"w": np.zeros(1)}, state, lr=0.1, weight_decay=0.5)
        assert p["w"][0] == pytest.approx(3.0 * (1 - 0.05) ** 4, rel=1e-14)

    def test_nonfinite_gradient(self):
        with pytest.raises(NumericError):
            adamw_step({"w": np.zeros(1)}, {"w": np.array([np.inf])}, AdamWState())


class TestSyntheticData:
    def test_flatten_roundtrip(self, rng):
        flat = rng.standard_normal((4, PARAM_DIM))
        np.testing.assert_allclose(flatten_params(*unflatten_params(flat)), flat, atol=1e-15)

    def test_same_seed_same_dataset(self, tiny_config, template):
        a = synth_dataset(5, 3, tiny_config, template)
        b = synth_dataset(5, 3, tiny_config, template)
        for x, y in zip(a, b):
            assert np.array_equal(x.context, y.context) and np.array_equal(x.vertices, y.vertices)

    def test_ground_truth_consistent(self, tiny_config, template):
        for s in synth_dataset(1, 3, tiny_config, template):
            mesh = lbs_forward(SmplParams(s.pose[None], s.shape[None], s.camera[None]), template)
            assert np.array_equal(mesh.vertices.data[0], s.vertices)
            assert np.array_equal(mesh.joints2d.data[0], s.joints2d)

    def test_rest_sample(self, tiny_config, template):
        enc = SyntheticEncoder(tiny_config.context_shape, seed=3, noise=0.0)
        s = make_sample(np.tile(IDENTITY_6D, (24, 1)), np.zeros(10), np.array([1.0, 0.0, 0.0]), template, enc)
        assert np.array_equal(s.context, enc.bias_map)
        assert np.array_equal(s.vertices, template.template_vertices)

    def test_context_never_tracked(self, tiny_run):
        template, _, data = build_run(tiny_run, seed=0)
        contexts, target = collate(data)
        ctx = Tensor(contexts)
        model = HMRModel(tiny_run.decoder)
        total, _ = total_loss(BodyEstimate.from_params(model(ctx), template), target)
        total.backward()
        assert not ctx.requires_grad and ctx.grad is None


class TestTrain:
    def test_zero_steps_is_initialization(self, tiny_run):
        template, _, data = build_run(tiny_run, seed=4)
        result = train(tiny_run, data, template, steps=0, seed=4)
        init = HMRModel(tiny_run.decoder, seed=4).state_dict()
        assert all(np.array_equal(v, init[k]) for k, v in result.model.state_dict().items())
        assert len(result.history) == 1

    def test_deterministic(self, tiny_run):
        template, _, data = build_run(tiny_run, seed=1)
        a = train(tiny_run, data, template, seed=1).history
        b = train(tiny_run, data, template, seed=1).history
        assert a == b and len(a) == tiny_run.steps + 1

    def test_minibatch_path(self, tiny_run):
        cfg = tiny_run.replace(batch_size=2, steps=4)
        template, _, data = build_run(cfg, seed=1)
        hist = train(cfg, data, template, seed=1).history
        assert len(hist) == 5 and all(np.isfinite(r["total"]) for r in hist)

    def test_divergence_raises(self, tiny_run):
        template, _, data = build_run(tiny_run, seed=1)
        data[0].context[:] = np.nan
        with pytest.raises((TrainingError, NumericError)):
            train(tiny_run, data, template, seed=1)

    @pytest.mark.slow
    def test_overfit_300_steps(self):
        cfg = RunConfig().replace(num_layers=2, steps=300)
        template, _, data = build_run(cfg, seed=0)
        hist = train(cfg, data, template, seed=0).history
        assert hist[-1]["total"] <= hist[0]["total"] / 10.0


class TestSerialization:
    def test_checkpoint_roundtrip(self, tiny_run, tmp_path):
        model = HMRModel(tiny_run.decoder, seed=3)
        save_checkpoint(tmp_path / "c.bin", model, tiny_run, extra={"seed": 3})
        cfg, extra, state = read_checkpoint(tmp_path / "c.bin")
        assert cfg == tiny_run and extra == {"seed": 3}
        loaded, _, _ = load_model(tmp_path / "c.bin")
        ref = model.state_dict()
        assert all(np.array_equal(v, ref[k]) for k, v in loaded.state_dict().items())

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            read_checkpoint(tmp_path / "x.bin")

    def test_loss_csv_roundtrip(self, tmp_path):
        hist = [{"step": 0, "smpl": 0.1, "joints3d": 1 / 3, "joints2d": 2.0, "mesh": 1e-9, "total": 7.25}]
        write_loss_csv(tmp_path / "l.csv", hist)
        assert read_loss_csv(tmp_path / "l.csv") == hist
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "step,smpl,joints3d,joints2d,mesh,total"


def test_forward_loss_matches_total(tiny_run):
    template, _, data = build_run(tiny_run, seed=0)
    contexts, target = collate(data)
    model = HMRModel(tiny_run.decoder)
    a, _ = forward_loss(model, contexts, target, template, LossWeights())
    b, _ = total_loss(BodyEstimate.from_params(model(Tensor(contexts)), template), target)
    assert a.data == b.data
