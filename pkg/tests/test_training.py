import numpy as np
import pytest

from taskrec import tomo
from taskrec.data import Dataset, make_triplets
from taskrec.nn import add_conv, apply_conv
from taskrec.recon import (UnrollConfig, init_gradient_descent_params,
                           learned_gradient_descent)
from taskrec.report import pixel_accuracy
from taskrec.tasks import segmentation_loss
from taskrec.tensor import ParamSet, Tape, Tensor, mul, relu, reshape, sigmoid
from taskrec.training import (Adam, JointModel, PretrainConfig, ProbeReport,
                              RegimeConfig, Sgd, TrainingDiverged,
                              invariance_probe, joint_loss, joint_loss_parts,
                              sweep_C, train_end_to_end, train_joint,
                              train_reconstruction, train_sequential,
                              train_task, _merged)

GEOM = tomo.Geometry(3, 9, (8, 8))
UNROLL = UnrollConfig(num_iterations=2, channels_per_block=(6,), init="zero")


def tiny_dataset(n=24, seed=0):
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 8, 8), np.float32)
    masks = np.zeros((n, 8, 8), np.float32)
    for i in range(n):
        r, c = rng.integers(1, 5, 2)
        images[i, r:r + 3, c:c + 3] = rng.uniform(0.6, 1.0)
        masks[i, r:r + 3, c:c + 3] = 1.0
    idx = np.arange(n)
    splits = {"train": idx[: n - 8], "validation": idx[n - 8: n - 4],
              "test": idx[n - 4:]}
    return Dataset(images, masks, splits)


def tiny_task_forward(x, params):
    n = 1 if x.ndim == 2 else x.shape[0]
    h = reshape(x, (n, 1, 8, 8))
    h = relu(apply_conv(params, "c0", h))
    h = apply_conv(params, "c1", h)
    out = sigmoid(reshape(h, (n, 8, 8)))
    return reshape(out, (8, 8)) if x.ndim == 2 else out


def tiny_model(seed=0) -> JointModel:
    theta = init_gradient_descent_params(UNROLL, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    vartheta = ParamSet()
    add_conv(vartheta, rng, "c0", 1, 6)
    add_conv(vartheta, rng, "c1", 6, 1)
    return JointModel(
        recon_forward=lambda y, th: learned_gradient_descent(y, th, UNROLL),
        task_forward=tiny_task_forward,
        task_loss=segmentation_loss,
        theta=theta, vartheta=vartheta,
        task_metric=pixel_accuracy)


def tiny_source(seed=0):
    return make_triplets(tiny_dataset(seed=seed), GEOM,
                         tomo.NoiseModel("gaussian", noise_level=0.001),
                         seed=seed)


def tiny_cfg(**kw):
    base = dict(regime="joint", C=0.5, batch_size=4, steps=6, seed=3,
                log_every=1, learning_rate=1e-3)
    base.update(kw)
    return RegimeConfig(**base)


def params_snapshot(ps):
    return {name: p.data.copy() for name, p in ps.items()}


def params_equal(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a)


class TestJointLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = Tensor(rng.random((4, 8, 8)), np.float64)
        self.x_hat = Tensor(rng.random((4, 8, 8)), np.float64)
        self.mask = (rng.random((4, 8, 8)) < 0.5).astype(np.float64)
        self.d_hat = Tensor(rng.random((4, 8, 8)) * 0.9 + 0.05, np.float64)

    def loss_at(self, c):
        return joint_loss(self.x, self.x_hat, self.mask, self.d_hat, c,
                          segmentation_loss).item()

    def test_c_zero_is_reconstruction_loss(self):
        want = float(np.mean((self.x.data - self.x_hat.data) ** 2))
        np.testing.assert_allclose(self.loss_at(0.0), want, rtol=1e-12)

    def test_c_one_is_task_loss(self):
        want = segmentation_loss(self.d_hat, self.mask).item()
        np.testing.assert_allclose(self.loss_at(1.0), want, rtol=1e-12)

    def test_hand_evaluated_combination(self):
        # d_X = 4.0, d_D = 0.2, C = 0.5 -> 2.1
        x = Tensor(np.zeros((2, 2), np.float64))
        x_hat = Tensor(np.full((2, 2), 2.0, np.float64))  # mean sq = 4.0
        stub = lambda d_hat, z: mul(d_hat, 1.0)
        got = joint_loss(x, x_hat, None, Tensor(np.asarray(0.2), np.float64),
                         0.5, stub).item()
        np.testing.assert_allclose(got, 2.1, rtol=1e-12)

    def test_affine_in_C(self):
        v0, v1 = self.loss_at(0.0), self.loss_at(1.0)
        for c in (0.1, 0.25, 0.5, 0.9, 0.999):
            want = (1 - c) * v0 + c * v1
            assert abs(self.loss_at(c) - want) <= 1e-12 * max(1.0, abs(want))

    def test_c_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"C must be in \[0, 1\]"):
            self.loss_at(1.5)
        with pytest.raises(ValueError, match=r"C must be in \[0, 1\]"):
            RegimeConfig(regime="joint", C=-0.1)


class TestGradientDecomposition:
    def grads_at(self, c, seed=1):
        model = tiny_model(seed)
        source = tiny_source(seed)
        batch = next(source.batches(4, seed=9))
        merged = _merged(model.theta, model.vartheta)
        with Tape() as tape:
            x_hat = model.recon_forward(batch.y_lin, model.theta)
            d_hat = model.task_forward(x_hat, model.vartheta)
            joint, rec, task = joint_loss_parts(batch.x, x_hat, batch.z,
                                                d_hat, c, model.task_loss)
        return tape.gradients(joint, merged)

    def test_c_zero_kills_task_gradients(self):
        grads = self.grads_at(0.0)
        for name, g in grads.items():
            if name.startswith("task."):
                assert not g.data.any(), name
        # theta gradients match pure reconstruction training gradients
        pure = self.grads_at(0.0)
        for name in pure:
            np.testing.assert_array_equal(pure[name].data, grads[name].data)

    def test_c_one_kills_reconstruction_gradients(self):
        # at C=1 the theta gradient flows only through the task head;
        # compare against an explicit task-only objective
        model = tiny_model(1)
        source = tiny_source(1)
        batch = next(source.batches(4, seed=9))
        merged = _merged(model.theta, model.vartheta)
        with Tape() as tape:
            x_hat = model.recon_forward(batch.y_lin, model.theta)
            d_hat = model.task_forward(x_hat, model.vartheta)
            joint, _, _ = joint_loss_parts(batch.x, x_hat, batch.z, d_hat,
                                           1.0, model.task_loss)
        g_joint = tape.gradients(joint, merged)
        with Tape() as tape2:
            x_hat = model.recon_forward(batch.y_lin, model.theta)
            d_hat = model.task_forward(x_hat, model.vartheta)
            task_only = model.task_loss(d_hat, batch.z)
        g_task = tape2.gradients(task_only, merged)
        for name in g_joint:
            np.testing.assert_allclose(g_joint[name].data, g_task[name].data,
                                       atol=1e-12)

    def test_gradient_affinity_in_C(self):
        g0 = self.grads_at(0.0, seed=2)
        g1 = self.grads_at(1.0, seed=2)
        gm = self.grads_at(0.3, seed=2)
        for name in gm:
            want = 0.7 * g0[name].data + 0.3 * g1[name].data
            np.testing.assert_allclose(gm[name].data, want, atol=1e-6)


class TestRegimes:
    def test_sequential_freezes_theta_in_stage_two(self):
        cfg = tiny_cfg(regime="sequential", steps=4,
                       pretrain=PretrainConfig(recon_steps=5,
                                               recon_batch_size=4))
        model_a = tiny_model(5)
        train_sequential(tiny_source(5), model_a, cfg, task_steps=0)
        theta_a = params_snapshot(model_a.theta)

        model_b = tiny_model(5)
        result = train_sequential(tiny_source(5), model_b, cfg)
        # stage 2 trained vartheta but theta is bitwise the stage-1 result
        assert params_equal(theta_a, params_snapshot(model_b.theta))
        assert result.history

    def test_end_to_end_equals_joint_at_c_one(self):
        cfg = tiny_cfg(steps=5, seed=11)
        model_a = tiny_model(11)
        res_a = train_end_to_end(tiny_source(11), model_a, cfg)
        model_b = tiny_model(11)
        res_b = train_joint(tiny_source(11), model_b,
                            tiny_cfg(steps=5, seed=11, C=1.0))
        assert res_a.history == res_b.history
        assert params_equal(params_snapshot(model_a.theta),
                            params_snapshot(model_b.theta))

    def test_end_to_end_task_loss_decreases_on_overfit_set(self):
        cfg = tiny_cfg(steps=60, seed=13, batch_size=8, log_every=10,
                       learning_rate=3e-3)
        model = tiny_model(13)
        res = train_end_to_end(tiny_source(13), model, cfg)
        d_d = [row[2] for row in res.history]
        assert d_d[-1] < d_d[0]

    def test_joint_c_zero_matches_reconstruction_only_training(self):
        cfg = tiny_cfg(steps=6, seed=17, C=0.0)
        model_a = tiny_model(17)
        res = train_joint(tiny_source(17), model_a, cfg)
        model_b = tiny_model(17)
        hist = train_reconstruction(tiny_source(17), model_b, cfg,
                                    steps=6, batch_size=4,
                                    seed_label="joint-data")
        joint_dx = [row[1] for row in res.history]
        recon_dx = [row[1] for row in hist]
        np.testing.assert_allclose(joint_dx, recon_dx, rtol=1e-12)
        assert params_equal(params_snapshot(model_a.theta),
                            params_snapshot(model_b.theta))
        # vartheta untouched at C = 0
        assert params_equal(params_snapshot(model_a.vartheta),
                            params_snapshot(tiny_model(17).vartheta))

    def test_nan_aborts_with_last_good_checkpoint(self, tmp_path):
        model = tiny_model(19)
        calls = {"n": 0}
        real_loss = model.task_loss

        def exploding_loss(d_hat, z):
            calls["n"] += 1
            if calls["n"] >= 4:
                return mul(real_loss(d_hat, z),
                           Tensor(np.asarray(np.nan, np.float32)))
            return real_loss(d_hat, z)

        model.task_loss = exploding_loss
        cfg = tiny_cfg(steps=10, seed=19, C=1.0)
        with pytest.raises(TrainingDiverged) as exc:
            train_joint(tiny_source(19), model, cfg, out_dir=tmp_path)
        assert exc.value.step == 3
        assert (tmp_path / "diverged-last-good.trkp").exists()
        assert exc.value.theta is not None

    def test_pretrain_task_uses_clean_images(self):
        # training on clean inputs must not touch theta at all
        model = tiny_model(23)
        theta_before = params_snapshot(model.theta)
        cfg = tiny_cfg(steps=3, seed=23)
        train_task(tiny_source(23), model, cfg, steps=4, inputs="clean")
        assert params_equal(theta_before, params_snapshot(model.theta))

    def test_determinism_identical_histories_and_csv(self, tmp_path):
        cfg = tiny_cfg(steps=6, seed=29)
        res_a = train_joint(tiny_source(29), tiny_model(29), cfg,
                            metrics_path=tmp_path / "a.csv")
        res_b = train_joint(tiny_source(29), tiny_model(29), cfg,
                            metrics_path=tmp_path / "b.csv")
        assert res_a.history == res_b.history
        assert (tmp_path / "a.csv").read_bytes() == \
            (tmp_path / "b.csv").read_bytes()


class TestSweep:
    def test_single_element_reduces_to_one_run(self):
        cfg = tiny_cfg(steps=4, seed=31)
        rows = sweep_C(tiny_source(31), tiny_model, cfg, [0.5])
        assert len(rows) == 1
        assert not rows[0]["failed"]
        assert np.isfinite(rows[0]["d_x"])

    def test_row_count_matches_C_list(self):
        cfg = tiny_cfg(steps=3, seed=37)
        rows = sweep_C(tiny_source(37), tiny_model, cfg,
                       [0.01, 0.5, 0.9, 0.999])
        assert [r["C"] for r in rows] == [0.01, 0.5, 0.9, 0.999]

    def test_failures_marked_and_sweep_continues(self):
        cfg = tiny_cfg(steps=4, seed=41)
        calls = {"n": 0}

        def flaky_factory(seed):
            calls["n"] += 1
            model = tiny_model(seed)
            if calls["n"] == 2:
                model.task_loss = lambda d, z: mul(
                    segmentation_loss(d, z),
                    Tensor(np.asarray(np.nan, np.float32)))
            return model

        rows = sweep_C(tiny_source(41), flaky_factory,
                       tiny_cfg(steps=4, seed=41, C=1.0), [0.3, 1.0, 0.7])
        assert [r["failed"] for r in rows] == [False, True, False]
        assert np.isnan(rows[1]["d_x"])

    def test_C_validation(self):
        with pytest.raises(ValueError, match="non-empty"):
            sweep_C(tiny_source(1), tiny_model, tiny_cfg(), [])
        with pytest.raises(ValueError, match=r"C must be in"):
            sweep_C(tiny_source(1), tiny_model, tiny_cfg(), [0.5, 1.2])


class TestInvarianceProbe:
    def probe(self, a, b=0.0, C=1.0) -> ProbeReport:
        model = tiny_model(43)
        # generic operator: a zero-initialized reconstruction would satisfy
        # B^-1(R(y)) = R(y) = 0 trivially
        theta = init_gradient_descent_params(UNROLL, 43, zero_final=False)
        for name, p in theta.items():
            if name.endswith(".w"):
                p.data *= 0.1
        model.theta = theta
        batch = next(tiny_source(43).batches(4, seed=5))
        return invariance_probe(model, batch, a, b, C)

    def test_identity_difference_exactly_zero(self):
        rep = self.probe(a=1.0, b=0.0, C=1.0)
        assert rep.difference == 0.0

    def test_scaling_by_two_cancels_exactly_at_c_one(self):
        rep = self.probe(a=2.0, C=1.0)
        assert rep.loss_transformed == rep.loss_original
        assert rep.difference == 0.0

    def test_c_half_reconstruction_component_differs(self):
        rep = self.probe(a=2.0, C=0.5)
        assert rep.recon_transformed != rep.recon_original
        assert rep.difference > 0.0

    def test_non_invertible_rejected(self):
        with pytest.raises(ValueError, match="invertible"):
            self.probe(a=0.0)


class TestOptimizers:
    @pytest.mark.parametrize("cls", [Adam, Sgd])
    def test_quadratic_convergence(self, cls):
        p = Tensor(np.array([5.0, -3.0]), np.float64)
        ps = ParamSet({"p": p})
        opt = cls(ps, 0.3 if cls is Sgd else 0.2, 1e-3, 200)
        for _ in range(200):
            with Tape() as tape:
                from taskrec.tensor import tsum
                loss = tsum(mul(ps["p"], ps["p"]))
            opt.step(tape.gradients(loss, ps))
        assert np.all(np.abs(ps["p"].data) < 1e-2)

    def test_cosine_schedule_endpoints(self):
        ps = ParamSet({"p": Tensor(np.zeros(1, np.float64))})
        opt = Adam(ps, 1e-3, 1e-5, 11)
        assert opt.lr == pytest.approx(1e-3)
        opt.t = 10
        assert opt.lr == pytest.approx(1e-5)
