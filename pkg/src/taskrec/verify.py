"""Numerical verification suites: adjoint identity, gradient checks.

These are the dual routes guarding the differentiable operators: the
adjoint suite compares <Ax, y> with <x, A*y> on random pairs, and the
gradient suite compares every reverse-mode gradient with central finite
differences in 64-bit.  Shared by the CLI ``check`` subcommand and the
acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import recon, tomo
from .tensor import (ParamSet, Tape, Tensor, add, bias_add, clip_min, concat,
                     conv2d, exp, log, matmul, max_pool2d, mul, narrow, neg,
                     relu, reshape, sigmoid, softmax, sub, tmean, tsum,
                     upsample2x)

__all__ = ["CheckResult", "adjoint_suite", "gradient_suite",
           "fd_param_grads", "max_relative_error"]

GRAD_TOL = 1e-4
ADJOINT_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return (f"[{flag}] {self.name}: max error {self.max_error:.3e} "
                f"(tol {self.tolerance:g}, {self.seconds:.2f}s)")


def adjoint_suite(geometries=None, num_pairs: int = 100,
                  seed: int = 0) -> list[CheckResult]:
    """Relative adjoint defect over random (x, y) pairs, 64-bit."""
    if geometries is None:
        geometries = [
            ("5x25 on 28x28", tomo.Geometry(5, 25, (28, 28))),
            ("30x183 on 128x128", tomo.Geometry(30, 183, (128, 128))),
        ]
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for name, geom in geometries:
        t0 = time.perf_counter()
        worst = 0.0
        h, w = geom.image_size
        for _ in range(num_pairs):
            x = rng.standard_normal((h, w))
            y = rng.standard_normal(geom.sino_shape)
            ax = tomo.ray_transform(Tensor(x, np.float64), geom).data.data
            aty = tomo.adjoint(
                tomo.Sinogram(Tensor(y, np.float64), geom)).data
            defect = abs(float(np.sum(ax * y) - np.sum(x * aty)))
            scale = float(np.linalg.norm(ax) * np.linalg.norm(y)) or 1.0
            worst = max(worst, defect / scale)
        results.append(CheckResult(f"adjoint identity, {name}", worst,
                                   ADJOINT_TOL, time.perf_counter() - t0))
    return results


def max_relative_error(got: np.ndarray, want: np.ndarray,
                       floor: float = 1e-6) -> float:
    got = np.asarray(got, np.float64)
    want = np.asarray(want, np.float64)
    scale = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    return float(np.max(np.abs(got - want) / scale))


def fd_param_grads(loss_fn, params: ParamSet, h: float = 1e-4) -> dict:
    """Central finite differences of a re-evaluated scalar loss."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def _check_op(name, build_loss, param_arrays, h=1e-4) -> CheckResult:
    """FD-check one op; build_loss(params) must be deterministic."""
    t0 = time.perf_counter()
    params = ParamSet()
    for pname, arr in param_arrays.items():
        params.add(pname, Tensor(np.asarray(arr, np.float64)))
    with Tape() as tape:
        loss = build_loss(params)
    grads = tape.gradients(loss, params)
    fd = fd_param_grads(lambda: build_loss(params).item(), params, h)
    worst = max(max_relative_error(grads[n].data, fd[n]) for n in params)
    return CheckResult(f"gradient: {name}", worst, GRAD_TOL,
                       time.perf_counter() - t0)


def gradient_suite(seed: int = 0, include_nets: bool = True
                   ) -> list[CheckResult]:
    """Finite-difference audit of every differentiable primitive and both
    unrolled reconstruction operators (64-bit, small random inputs)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    res = []

    def rand(*shape):
        return rng.standard_normal(shape)

    def dot(t: Tensor, w: np.ndarray) -> Tensor:
        return tsum(mul(t, Tensor(np.asarray(w, np.float64))))

    a0, b0, w34 = rand(3, 4), rand(3, 4), rand(3, 4)
    cases = [
        ("add", lambda p: dot(add(p["a"], p["b"]), w34),
         {"a": a0, "b": b0}),
        ("sub", lambda p: dot(sub(p["a"], p["b"]), w34),
         {"a": a0, "b": b0}),
        ("mul", lambda p: dot(mul(p["a"], p["b"]), w34),
         {"a": a0, "b": b0}),
        ("neg", lambda p: dot(neg(p["a"]), w34), {"a": a0}),
        ("scalar broadcast",
         lambda p: dot(add(mul(p["a"], p["s"]), p["t"]), w34),
         {"a": a0, "s": np.asarray(0.7), "t": np.asarray(-0.2)}),
    ]
    w32 = rand(3, 2)
    cases.append(("matmul", lambda p: dot(matmul(p["a"], p["b"]), w32),
                  {"a": rand(3, 5), "b": rand(5, 2)}))
    w44 = rand(4, 4)
    cases += [
        ("relu", lambda p: dot(relu(p["a"]), w44), {"a": rand(4, 4) + 0.05}),
        ("sigmoid", lambda p: dot(sigmoid(p["a"]), w44), {"a": rand(4, 4)}),
        ("log", lambda p: dot(log(p["a"]), w44),
         {"a": rand(4, 4) ** 2 + 0.5}),
        ("exp", lambda p: dot(exp(p["a"]), w44), {"a": rand(4, 4) * 0.5}),
        ("clip_min", lambda p: dot(clip_min(p["a"], 0.0), w44),
         {"a": rand(4, 4) + 2.0}),
    ]
    w36 = rand(3, 6)
    cases.append(("softmax",
                  lambda p: dot(softmax(p["a"], axis=-1), w36),
                  {"a": rand(3, 6)}))
    w4 = rand(4)
    cases.append(("sum and mean",
                  lambda p: add(tsum(mul(p["a"], p["a"])),
                                dot(tmean(p["a"], axis=0), w4)),
                  {"a": rand(3, 4)}))
    w26 = rand(2, 6)
    cases.append((
        "reshape, concat, narrow",
        lambda p: dot(narrow(concat([reshape(p["a"], (2, 6)),
                                     reshape(p["b"], (2, 6))], axis=0),
                             0, 1, 2), w26),
        {"a": rand(3, 4), "b": rand(4, 3)}))
    wconv = rand(2, 3, 5, 5)
    cases.append(("conv2d",
                  lambda p: dot(conv2d(p["x"], p["w"], p["b"], padding=1),
                                wconv),
                  {"x": rand(2, 2, 5, 5), "w": rand(3, 2, 3, 3),
                   "b": rand(3)}))
    wpool = rand(2, 2, 3, 3)
    cases.append(("max_pool2d",
                  lambda p: dot(max_pool2d(p["x"]), wpool),
                  {"x": rand(2, 2, 6, 6)}))
    wb = rand(3, 4)
    cases.append(("bias_add",
                  lambda p: dot(bias_add(p["x"], p["b"]), wb),
                  {"x": rand(3, 4), "b": rand(4)}))
    wup = rand(1, 2, 6, 6)
    cases.append(("upsample2x",
                  lambda p: dot(upsample2x(p["x"]), wup),
                  {"x": rand(1, 2, 3, 3)}))

    geom = tomo.Geometry(3, 7, (6, 6))
    wray = rand(3, 7)
    cases.append(("ray_transform",
                  lambda p: dot(tomo.ray_transform(p["x"], geom).data, wray),
                  {"x": rand(6, 6)}))
    wadj = rand(6, 6)
    cases.append(("adjoint",
                  lambda p: dot(tomo.adjoint(tomo.Sinogram(p["y"], geom)),
                                wadj),
                  {"y": rand(3, 7)}))

    for name, build, arrays in cases:
        res.append(_check_op(name, build, arrays))

    if include_nets:
        res.append(_net_check("learned_gradient_descent", "lgd", seed))
        res.append(_net_check("learned_primal_dual", "lpd", seed))
        res.append(_head_check(seed))
    return res


def _net_check(name: str, scheme: str, seed: int) -> CheckResult:
    t0 = time.perf_counter()
    geom = tomo.Geometry(3, 9, (8, 8))
    cfg = recon.UnrollConfig(num_iterations=2, channels_per_block=(5,),
                             memory_channels=2, init="zero")
    rng = np.random.Generator(np.random.PCG64(seed + 7))
    if scheme == "lgd":
        params = recon.init_gradient_descent_params(cfg, seed, np.float64,
                                                    zero_final=False)
        forward = lambda y: recon.learned_gradient_descent(y, params, cfg)
    else:
        params = recon.init_primal_dual_params(cfg, seed, np.float64,
                                               zero_final=False)
        forward = lambda y: recon.learned_primal_dual(y, params, cfg)
    # keep the unroll numerically tame for finite differences
    for pname, p in params.items():
        if pname.endswith(".w"):
            p.data *= 0.3
    x = rng.random((8, 8))
    y = tomo.ray_transform(Tensor(x, np.float64), geom)
    wvec = rng.standard_normal((8, 8))

    def run():
        with Tape() as tape:
            out = forward(y)
            loss = tsum(mul(out, Tensor(wvec, np.float64)))
        return loss, tape

    loss, tape = run()
    grads = tape.gradients(loss, params)
    # h = 1e-3 would straddle ReLU kinks inside the unroll; 1e-5 keeps the
    # central difference one-sided at every unit while staying well above
    # 64-bit rounding noise
    fd = fd_param_grads(lambda: run()[0].item(), params, h=1e-5)
    worst = max(max_relative_error(grads[n].data, fd[n]) for n in params)
    return CheckResult(f"gradient: {name}", worst, GRAD_TOL,
                       time.perf_counter() - t0)


def _head_check(seed: int) -> CheckResult:
    """FD check of a small conv+relu+pool+dense+softmax classification path."""
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed + 11))
    params = ParamSet()
    params.add("w0", Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.4,
                            np.float64))
    params.add("b0", Tensor(rng.standard_normal(3) * 0.1, np.float64))
    params.add("wd", Tensor(rng.standard_normal((27, 4)) * 0.3, np.float64))
    x = rng.random((2, 1, 6, 6))
    labels = np.array([1, 3])
    onehot = np.zeros((2, 4))
    onehot[np.arange(2), labels] = 1.0

    def forward():
        h = max_pool2d(relu(conv2d(Tensor(x, np.float64), params["w0"],
                                   params["b0"], padding=1)))
        logits = matmul(reshape(h, (2, 27)), params["wd"])
        p = softmax(logits, axis=-1)
        return neg(tmean(tsum(mul(Tensor(onehot, np.float64),
                                  log(clip_min(p, 1e-12))), axis=1)))

    with Tape() as tape:
        loss = forward()
    grads = tape.gradients(loss, params)
    fd = fd_param_grads(lambda: forward().item(), params, h=1e-4)
    worst = max(max_relative_error(grads[n].data, fd[n]) for n in params)
    return CheckResult("gradient: conv classifier head", worst, GRAD_TOL,
                       time.perf_counter() - t0)
