"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Quick criteria run in seconds; the desk-scale training criteria (6-8) are
marked ``slow`` (hours on one core; deselect with ``-m "not slow"``).
Criteria 6 and 7 need the real MNIST IDX files and skip with instructions
when the dataset is absent (this sandbox cannot reach the mirrors; see
``taskrec data download``).
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from taskrec import tomo
from taskrec.config import parse_config
from taskrec.data import load_mnist, make_triplets
from taskrec.experiments import build_experiment
from taskrec.nn import add_conv, apply_conv
from taskrec.recon import (UnrollConfig, init_gradient_descent_params,
                           learned_gradient_descent)
from taskrec.tasks import segmentation_loss
from taskrec.tensor import ParamSet, Tape, Tensor, mul, relu, reshape, sigmoid
from taskrec.theory import run_theory_suite
from taskrec.training import (JointModel, _merged, invariance_probe,
                              joint_loss, joint_loss_parts, pretrain,
                              sweep_C, train_joint, train_task, replace)
from taskrec.verify import adjoint_suite, gradient_suite
import taskrec.report as report
import taskrec.training as training

from conftest import write_idx_images, write_idx_labels, make_shape_images

PKG_ROOT = Path(__file__).resolve().parents[1]


def note(num: int, ok: bool, detail: str) -> None:
    flag = "PASS" if ok else "FAIL"
    print(f"[{flag}] criterion {num}: {detail}", flush=True)


def mnist_dir() -> Path | None:
    cand = Path(os.environ.get("TASKREC_MNIST_DIR",
                               PKG_ROOT / "data" / "mnist"))
    try:
        load_mnist(cand)
    except OSError:
        return None
    return cand


# ---------------------------------------------------------------------------
# criterion 1: adjoint identity


def test_criterion_1_adjoint_identity():
    results = adjoint_suite(num_pairs=100)
    elapsed = sum(r.seconds for r in results)
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results) and elapsed < 10.0
    note(1, ok, f"adjoint defect {worst:.2e} < 1e-10 on 5x25 and 30x183 "
                f"geometries, 100 pairs each, {elapsed:.1f}s")
    assert worst < 1e-10
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# criterion 2: gradient suite


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    results = gradient_suite(include_nets=True)
    elapsed = time.perf_counter() - t0
    failures = [str(r) for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    ok = not failures and elapsed < 120.0
    note(2, ok, f"{len(results)} primitive/net finite-difference checks, "
                f"worst {worst:.2e} < 1e-4, {elapsed:.1f}s")
    assert not failures, "\n".join(failures)
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criteria 3 and 4 share a small generic joint model


TINY_GEOM = tomo.Geometry(3, 9, (8, 8))
TINY_UNROLL = UnrollConfig(num_iterations=2, channels_per_block=(6,),
                           init="zero")


def tiny_task_forward(x, params):
    n = 1 if x.ndim == 2 else x.shape[0]
    h = relu(apply_conv(params, "c0", reshape(x, (n, 1, 8, 8))))
    out = sigmoid(reshape(apply_conv(params, "c1", h), (n, 8, 8)))
    return reshape(out, (8, 8)) if x.ndim == 2 else out


def tiny_model(seed: int, generic_theta: bool = False) -> JointModel:
    theta = init_gradient_descent_params(TINY_UNROLL, seed,
                                         zero_final=not generic_theta)
    if generic_theta:
        for name, p in theta.items():
            if name.endswith(".w"):
                p.data *= 0.1
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    vartheta = ParamSet()
    add_conv(vartheta, rng, "c0", 1, 6)
    add_conv(vartheta, rng, "c1", 6, 1)
    return JointModel(
        recon_forward=lambda y, th: learned_gradient_descent(y, th,
                                                             TINY_UNROLL),
        task_forward=tiny_task_forward,
        task_loss=segmentation_loss,
        theta=theta, vartheta=vartheta,
        task_metric=report.pixel_accuracy)


def tiny_source(seed: int):
    from taskrec.data import Dataset
    rng = np.random.default_rng(seed)
    images = np.zeros((16, 8, 8), np.float32)
    masks = np.zeros((16, 8, 8), np.float32)
    for i in range(16):
        r, c = rng.integers(1, 5, 2)
        images[i, r:r + 3, c:c + 3] = rng.uniform(0.6, 1.0)
        masks[i, r:r + 3, c:c + 3] = 1.0
    ds = Dataset(images, masks, {"train": np.arange(16)})
    return make_triplets(ds, TINY_GEOM,
                         tomo.NoiseModel("gaussian", noise_level=0.001),
                         seed=seed)


def test_criterion_3_joint_loss_identities():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((4, 8, 8)), np.float64)
    x_hat = Tensor(rng.random((4, 8, 8)), np.float64)
    mask = (rng.random((4, 8, 8)) < 0.5).astype(np.float64)
    d_hat = Tensor(rng.random((4, 8, 8)) * 0.9 + 0.05, np.float64)

    def at(c):
        return joint_loss(x, x_hat, mask, d_hat, c, segmentation_loss).item()

    v0, v1 = at(0.0), at(1.0)
    affine_dev = max(abs(at(c) - ((1 - c) * v0 + c * v1))
                     for c in (0.1, 0.3, 0.5, 0.77, 0.999))

    # gradient decomposition at the endpoints
    model = tiny_model(1, generic_theta=True)
    batch = next(tiny_source(1).batches(4, seed=2))
    merged = _merged(model.theta, model.vartheta)

    def grads_at(c):
        with Tape() as tape:
            xh = model.recon_forward(batch.y_lin, model.theta)
            dh = model.task_forward(xh, model.vartheta)
            joint, _, _ = joint_loss_parts(batch.x, xh, batch.z, dh, c,
                                           model.task_loss)
        return tape.gradients(joint, merged)

    g0 = grads_at(0.0)
    task_grads_vanish = all(
        not g0[n].data.any() for n in g0 if n.startswith("task."))

    g1 = grads_at(1.0)
    with Tape() as tape:
        xh = model.recon_forward(batch.y_lin, model.theta)
        dh = model.task_forward(xh, model.vartheta)
        task_only = model.task_loss(dh, batch.z)
    g_task = tape.gradients(task_only, merged)
    recon_grads_vanish = all(
        np.allclose(g1[n].data, g_task[n].data, atol=1e-12) for n in g1)

    ok = affine_dev <= 1e-12 and task_grads_vanish and recon_grads_vanish
    note(3, ok, f"affinity deviation {affine_dev:.2e} <= 1e-12; task "
                f"gradients vanish at C=0: {task_grads_vanish}; "
                f"reconstruction gradients vanish at C=1: "
                f"{recon_grads_vanish}")
    assert affine_dev <= 1e-12
    assert task_grads_vanish
    assert recon_grads_vanish


def test_criterion_4_invariance_probe():
    t0 = time.perf_counter()
    model = tiny_model(3, generic_theta=True)
    batch = next(tiny_source(3).batches(4, seed=4))
    rep_c1 = invariance_probe(model, batch, a=2.0, b=0.0, C=1.0)
    rep_id = invariance_probe(model, batch, a=1.0, b=0.0, C=1.0)
    rep_half = invariance_probe(model, batch, a=2.0, b=0.0, C=0.5)
    elapsed = time.perf_counter() - t0
    ok = (rep_c1.difference == 0.0 and rep_id.difference == 0.0
          and rep_half.difference > 0.0
          and rep_half.recon_transformed != rep_half.recon_original
          and elapsed < 30.0)
    note(4, ok, f"C=1 loss difference under B(x)=2x is "
                f"{rep_c1.difference!r} (exact); C=0.5 difference "
                f"{rep_half.difference:.3e} > 0; {elapsed:.1f}s")
    assert rep_c1.difference == 0.0
    assert rep_id.difference == 0.0
    assert rep_half.difference > 0.0


def test_criterion_5_theory_suite():
    t0 = time.perf_counter()
    rows, ok_all = run_theory_suite(num_models=1000, max_size=8, seed=0)
    elapsed = time.perf_counter() - t0
    conserving_dev = max(
        max(r["equality_deviation"], r["independence_deviation"],
            float(r["conclusion_deviation"] or 0.0))
        for r in rows if r["family"] == "conserving")
    violating = [r for r in rows if r["family"] != "conserving"]
    violators_fail_both = all(
        not r["sufficiency_holds"] if r["family"] == "correlated"
        else not r["task_ci_holds"] for r in violating)
    ok = (ok_all and conserving_dev < 1e-12 and violators_fail_both
          and elapsed < 300.0)
    note(5, ok, f"1000 finite models: conserving max deviation "
                f"{conserving_dev:.2e} < 1e-12, hypothesis violations "
                f"detected in both directions, {elapsed:.1f}s")
    assert ok_all
    assert conserving_dev < 1e-12
    assert violators_fail_both
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# criteria 6 and 7: MNIST desk-scale runs (shared fixture)


DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def mnist_desk_results():
    data_dir = mnist_dir()
    if data_dir is None:
        note(6, True, "SKIP - MNIST IDX files not found (set "
                      "TASKREC_MNIST_DIR or run `taskrec data download`); "
                      "unreachable from this sandbox")
        pytest.skip("MNIST dataset not available in this environment")
    dataset = load_mnist(data_dir)
    results = {"acc_pre": [], "acc_seq": [], "acc_joint": [],
               "l2_joint": [], "l2_e2e": None}
    for seed in DESK_SEEDS:
        cfg = parse_config(f"""
            experiment = mnist
            scale = desk
            data_dir = {data_dir}
            seed = {seed}
            steps = 10000
            batch_size = 32
        """)
        bundle = build_experiment(cfg, mnist_dataset=dataset)
        rc = bundle.regime_config
        model = bundle.fresh_model(seed)
        pretrain(bundle.source, model, rc)
        results["acc_pre"].append(bundle.evaluate(model)["accuracy"])

        seq_model = JointModel(model.recon_forward, model.task_forward,
                               model.task_loss, model.theta.copy(),
                               model.vartheta.copy(), model.task_metric)
        train_task(bundle.source, seq_model, rc, steps=3000,
                   inputs="recon", seed_label="sequential-task")
        results["acc_seq"].append(bundle.evaluate(seq_model)["accuracy"])

        joint_model = JointModel(model.recon_forward, model.task_forward,
                                 model.task_loss, model.theta.copy(),
                                 model.vartheta.copy(), model.task_metric)
        train_joint(bundle.source, joint_model, rc)
        scores = bundle.evaluate(joint_model)
        results["acc_joint"].append(scores["accuracy"])
        results["l2_joint"].append(scores["l2_loss"])

        if seed == DESK_SEEDS[0]:
            e2e_model = JointModel(model.recon_forward, model.task_forward,
                                   model.task_loss, model.theta.copy(),
                                   model.vartheta.copy(), model.task_metric)
            train_joint(bundle.source, e2e_model, replace(rc, C=1.0))
            results["l2_e2e"] = bundle.evaluate(e2e_model)["l2_loss"]
    return results


@pytest.mark.slow
def test_criterion_6_mnist_desk_ordering(mnist_desk_results):
    r = mnist_desk_results
    acc_pre = float(np.mean(r["acc_pre"]))
    acc_seq = float(np.mean(r["acc_seq"]))
    acc_joint = float(np.mean(r["acc_joint"]))
    gap1 = acc_joint - acc_seq
    gap2 = acc_seq - acc_pre
    ok = gap1 >= 0.003 and gap2 >= 0.003
    note(6, ok, f"mean accuracy over {len(DESK_SEEDS)} seeds: joint C=0.5 "
                f"{acc_joint:.4f} > sequential {acc_seq:.4f} > "
                f"pre-training {acc_pre:.4f}; gaps {gap1 * 100:.2f}pp / "
                f"{gap2 * 100:.2f}pp >= 0.3pp")
    assert gap1 >= 0.003
    assert gap2 >= 0.003


@pytest.mark.slow
def test_criterion_7_mnist_end_to_end_degradation(mnist_desk_results):
    r = mnist_desk_results
    l2_joint = r["l2_joint"][0]
    l2_e2e = r["l2_e2e"]
    ok = l2_e2e >= 1.2 * l2_joint
    note(7, ok, f"end-to-end (C=1) reconstruction loss {l2_e2e:.6g} vs "
                f"joint C=0.5 {l2_joint:.6g}; ratio "
                f"{l2_e2e / l2_joint:.2f} >= 1.2")
    assert l2_e2e >= 1.2 * l2_joint


# ---------------------------------------------------------------------------
# criterion 8: segmentation C-sweep on synthetic phantoms


@pytest.mark.slow
def test_criterion_8_segmentation_sweep(tmp_path):
    cfg = parse_config("""
        experiment = segmentation
        scale = desk
        steps = 5000
        num_phantoms = 100
        seed = 0
        log_every = 250
    """)
    bundle = build_experiment(cfg)

    def eval_parts(model):
        scores = bundle.evaluate(model)
        return scores["l2_loss"], scores["cross_entropy"]

    c_values = [0.01, 0.5, 0.9, 0.999]
    rows = sweep_C(bundle.source, bundle.model_factory,
                   bundle.regime_config, c_values,
                   eval_parts_fn=eval_parts, out_dir=tmp_path)
    by_c = {r["C"]: r for r in rows}
    assert not any(r["failed"] for r in rows), rows

    dx, dd = ({c: by_c[c][k] for c in c_values} for k in ("d_x", "d_d"))
    endpoints_ok = dx[0.01] <= dx[0.999] and dd[0.01] >= dd[0.999]
    middle_ok = dd[0.5] < dd[0.01] and dd[0.9] < dd[0.01]
    ok = endpoints_ok and middle_ok
    note(8, ok, "held-out losses per C "
                + ", ".join(f"C={c:g}: d_X={dx[c]:.4g} d_D={dd[c]:.4g}"
                            for c in c_values)
                + f"; endpoint trend {endpoints_ok}, joint C in "
                  f"{{0.5, 0.9}} beats C=0.01 on d_D {middle_ok}")
    assert endpoints_ok, (dx, dd)
    assert middle_ok, (dx, dd)


# ---------------------------------------------------------------------------
# criterion 9: Poisson data model statistics


def test_criterion_9_poisson_statistics():
    geom = tomo.Geometry(5, 25, (28, 28))
    zeros = np.zeros((28, 28), np.float64)
    pool = np.concatenate([
        tomo.poisson_data(zeros, geom, 60.0, seed).data.data.ravel()
        for seed in range(800)])
    mean = float(pool.mean())
    var = float(pool.var())
    ok = (pool.size == 100_000 and 59.5 <= mean <= 60.5
          and abs(var - 60.0) / 60.0 < 0.05)
    note(9, ok, f"10^5 draws at 60 photons/line: mean {mean:.3f} in "
                f"[59.5, 60.5], variance {var:.2f} within 5% of 60")
    assert 59.5 <= mean <= 60.5
    assert abs(var - 60.0) / 60.0 < 0.05


# ---------------------------------------------------------------------------
# criterion 10: determinism of train and sweep invocations


def _strip_wall_time(path: Path) -> list[list[str]]:
    rows = [line.split(",") for line in
            path.read_text().strip().splitlines()]
    if "wall_time" in rows[0]:
        wt = rows[0].index("wall_time")
        rows = [row[:wt] + row[wt + 1:] for row in rows]
    return rows


def test_criterion_10_determinism(tmp_path):
    rng = np.random.default_rng(11)
    train_x, train_y = make_shape_images(rng, 60)
    test_x, test_y = make_shape_images(rng, 24)
    data_dir = tmp_path / "idx"
    data_dir.mkdir()
    write_idx_images(data_dir / "train-images-idx3-ubyte",
                     (train_x * 255).astype(np.uint8))
    write_idx_labels(data_dir / "train-labels-idx1-ubyte", train_y)
    write_idx_images(data_dir / "t10k-images-idx3-ubyte",
                     (test_x * 255).astype(np.uint8))
    write_idx_labels(data_dir / "t10k-labels-idx1-ubyte", test_y)
    cfg = tmp_path / "cfg"
    cfg.write_text(f"""
        experiment = mnist
        data_dir = {data_dir}
        steps = 4
        batch_size = 4
        log_every = 2
        pretrain_recon_steps = 2
        pretrain_recon_batch_size = 4
        pretrain_task_steps = 2
        pretrain_task_batch_size = 4
        unroll_iterations = 2
        unroll_channels = 6
        eval_items = 8
        seed = 5
        C_list = 0.2, 0.8
    """)

    def run(cmd, out):
        r = subprocess.run(
            [sys.executable, "-m", "taskrec", cmd, "--config", str(cfg),
             "--out-dir", str(out)],
            capture_output=True, text=True, cwd=PKG_ROOT)
        assert r.returncode == 0, r.stderr
        return out

    t_a = run("train", tmp_path / "train_a")
    t_b = run("train", tmp_path / "train_b")
    train_same = (_strip_wall_time(t_a / "metrics.csv")
                  == _strip_wall_time(t_b / "metrics.csv")
                  and (t_a / "steps.csv").read_bytes()
                  == (t_b / "steps.csv").read_bytes()
                  and (t_a / "final.trkp").read_bytes()
                  == (t_b / "final.trkp").read_bytes())

    s_a = run("sweep", tmp_path / "sweep_a")
    s_b = run("sweep", tmp_path / "sweep_b")
    sweep_same = (s_a / "sweep.csv").read_bytes() == \
        (s_b / "sweep.csv").read_bytes()

    ok = train_same and sweep_same
    note(10, ok, f"repeated train invocations identical (metrics, steps, "
                 f"checkpoint): {train_same}; repeated sweep invocations "
                 f"identical: {sweep_same} (wall-time metadata column "
                 f"excluded)")
    assert train_same
    assert sweep_same
