"""Finite-difference verification of every op, layer and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Tape, Tensor, grad_check
from .layers import Conv2dParams, GruParams, InitSpec, conv2d_forward, gru_layout, gru_step, init_params
from .model import AssessmentModel, ModelConfig, Network, Variant, forward, score_frames
from .ranking import hinge_loss_tensor

OP_TOL = 1e-6
GRU_TOL = 1e-5
MODEL_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckOutcome:
    component: str
    result: GradCheckResult
    tol: float

    @property
    def passed(self) -> bool:
        return self.result.passed(self.tol)

    def line(self) -> str:
        name, err = self.result.worst() if self.result.errors else ("-", 0.0)
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.component:<28} worst={err:.3e} ({name}) tol={self.tol:.0e}"


def _weighted(rng: np.random.Generator, shape) -> Tensor:
    # a random linear functional avoids degenerate sums (e.g. softmax sums to 1)
    return Tensor(rng.normal(size=shape))


def _functional(rng, build: Callable[[dict[str, Tensor]], Tensor], out_shape) -> Callable:
    w = _weighted(rng, out_shape)
    return lambda p: ad.sum_all(ad.mul(build(p), w))


def op_checks(seed: int = 1) -> dict[str, tuple[Callable, dict[str, np.ndarray], float]]:
    """Scalar test functions for each differentiable op, with their inputs."""
    rng = np.random.default_rng(seed)
    n = rng.normal
    checks = {}

    def add_check(name, build, params, out_shape, tol=OP_TOL):
        checks[name] = (_functional(rng, build, out_shape), params, tol)

    add_check("matmul", lambda p: ad.matmul(p["a"], p["b"]), {"a": n(size=(3, 4)), "b": n(size=(4, 2))}, (3, 2))
    for op in ("add", "sub", "mul"):
        add_check(op, lambda p, op=op: ad.elementwise(op, p["a"], p["b"]),
                  {"a": n(size=(2, 3)), "b": n(size=(2, 3))}, (2, 3))
    add_check("add_scalar", lambda p: ad.add_scalar(p["x"], 0.7), {"x": n(size=(5,))}, (5,))
    add_check("mul_scalar", lambda p: ad.mul_scalar(p["x"], -1.3), {"x": n(size=(5,))}, (5,))
    for kind in ("tanh", "sigmoid", "relu"):
        add_check(kind, lambda p, k=kind: ad.activation(k, p["x"]), {"x": rng.uniform(-4, 4, size=100)}, (100,))
    add_check("softmax", lambda p: ad.softmax(p["x"]), {"x": n(size=(3, 6))}, (3, 6))
    add_check("spatial_avg_pool", lambda p: ad.spatial_avg_pool(p["x"]), {"x": n(size=(4, 3, 3))}, (4,))
    add_check("spatial_max_pool", lambda p: ad.spatial_max_pool(p["x"]), {"x": n(size=(4, 3, 3))}, (4,))
    alpha = ad.softmax(Tensor(n(size=(9,)))).data
    add_check("weighted_spatial_sum", lambda p: ad.weighted_spatial_sum(p["x"], Tensor(alpha)),
              {"x": n(size=(4, 3, 3))}, (4,))
    # weight gradient goes through softmax: perturbing raw weights would leave the simplex
    add_check("softmax>weighted_sum", lambda p: ad.weighted_spatial_sum(p["x"], ad.softmax(p["a"])),
              {"x": n(size=(4, 3, 3)), "a": n(size=(9,))}, (4,))
    add_check("concat", lambda p: ad.concat(-1, p["a"], p["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 2))}, (2, 5))
    add_check("narrow", lambda p: ad.narrow(p["x"], 1, 1, 2), {"x": n(size=(2, 4))}, (2, 2))
    add_check("take", lambda p: ad.take(p["x"], [2, 0, 2]), {"x": n(size=(3, 2))}, (3, 2))
    add_check("reshape", lambda p: ad.reshape(p["x"], (3, 4)), {"x": n(size=(2, 6))}, (3, 4))
    add_check("transpose", lambda p: ad.transpose(p["x"], (2, 0, 1)), {"x": n(size=(2, 3, 4))}, (4, 2, 3))
    add_check("repeat_axis", lambda p: ad.repeat_axis(p["x"], -2, 3), {"x": n(size=(2, 4))}, (2, 3, 4))
    add_check("unfold", lambda p: ad.unfold(p["x"], 2, 2, 1, 1), {"x": n(size=(2, 3, 4))}, (4, 5, 8))
    add_check("linear", lambda p: ad.linear(p["x"], p["w"], p["b"]),
              {"x": n(size=(2, 3, 4)), "w": n(size=(5, 4)), "b": n(size=(5,))}, (2, 3, 5))
    add_check("tanh(Wx)", lambda p: ad.tanh(ad.matmul(p["w"], p["x"])),
              {"w": n(size=(4, 3)), "x": n(size=(3, 2))}, (4, 2))
    add_check("conv2d", lambda p: conv2d_forward(Conv2dParams(p["w"], p["b"]), p["x"]),
              {"w": n(size=(4, 3, 2, 2)), "b": n(size=(4,)), "x": n(size=(3, 5, 5))}, (4, 4, 4))

    gru = init_params(InitSpec(seed=seed), gru_layout("g", 3, 4))
    gru = {k: v + 0.1 * n(size=v.shape) for k, v in gru.items()}
    xs = n(size=(4, 3))

    def unrolled(p):
        g = GruParams.select(p, "g")
        h = Tensor(np.zeros(4))
        for t in range(4):
            h = gru_step(g, Tensor(xs[t]), h)
        return h

    add_check("gru_step x4", unrolled, gru, (4,), GRU_TOL)
    return checks


def run_op_checks(seed: int = 1, step: float = STEP) -> list[CheckOutcome]:
    return [CheckOutcome(name, grad_check(f, params, step), tol)
            for name, (f, params, tol) in op_checks(seed).items()]


def model_loss(config: ModelConfig, frames: np.ndarray, order: list[tuple[int, int]],
               margin: float = 0.5, fixed: Optional[Mapping[str, np.ndarray]] = None
               ) -> Callable[[dict[str, Tensor]], Tensor]:
    """Summed hinge loss over ``order`` pairs (better, worse) of the frame batch.

    ``fixed`` parameters enter as constants rather than checked inputs.
    """
    consts = {k: Tensor(v) for k, v in (fixed or {}).items()}

    def f(p: dict[str, Tensor]) -> Tensor:
        scores, _ = forward(Network.from_tensors(config, {**consts, **p}), frames)
        better = ad.take(scores, [i for i, _ in order])
        worse = ad.take(scores, [j for _, j in order])
        return hinge_loss_tensor(better, worse, margin)

    return f


def model_inputs(seed: int, config: ModelConfig, clips: int = 1):
    """Fresh-init model and standard-normal frames on a 5x5 attention grid."""
    model = AssessmentModel.init(config, seed=seed)
    size = 5 + (config.fusion_kernel - 1 - 2 * config.fusion_padding if config.two_stream else 0)
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(clips, config.segments, config.in_channels, size, size))
    return model, frames


def model_score(config: ModelConfig, frames: np.ndarray) -> Callable[[dict[str, Tensor]], Tensor]:
    """Summed scores of the frame batch (the score itself for a single clip)."""
    return lambda p: ad.sum_all(forward(Network.from_tensors(config, p), frames)[0])


def run_model_check(seed: int = 1, config: Optional[ModelConfig] = None, step: float = STEP,
                    corrupt: Optional[Mapping[str, float]] = None) -> CheckOutcome:
    """d(score)/d(every parameter) for one clip, tiny config (C=8, 5x5 grid, N=4, d=16)."""
    config = config or ModelConfig.tiny()
    model, frames = model_inputs(seed, config)
    result = grad_check(model_score(config, frames), model.params, step, corrupt)
    return CheckOutcome(f"model[{config.variant.value}]", result, MODEL_TOL)


def run_loss_check(seed: int = 1, config: Optional[ModelConfig] = None, step: float = STEP
                   ) -> CheckOutcome:
    """Hinge loss of one active pair w.r.t. every parameter.

    The loss sees scores only through their difference, so the output bias
    has an identically zero gradient; it is held fixed and its analytic
    gradient is reported as an absolute value (it must be exactly zero).
    """
    config = config or ModelConfig.tiny()
    model, frames = model_inputs(seed, config, clips=2)
    s, _ = score_frames(model, frames)
    # the lower-scored clip plays "better", so the hinge is active
    order = [(0, 1)] if s[0] <= s[1] else [(1, 0)]
    fixed = {k: v for k, v in model.params.items() if k == "fc.bias"}
    free = {k: v for k, v in model.params.items() if k not in fixed}
    result = grad_check(model_loss(config, frames, order, fixed=fixed), free, step)
    if fixed:
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
        loss = model_loss(config, frames, order)(leaves)
        bias_grad = ad.backward(tape, loss)[leaves["fc.bias"]]
        result.errors["fc.bias (exact zero)"] = float(np.abs(bias_grad).max())
    return CheckOutcome(f"loss[{config.variant.value}]", result, MODEL_TOL)


def run_all(seed: int = 1, variant: Variant | str = Variant.FULL) -> list[CheckOutcome]:
    """Per-op checks followed by the full-model check."""
    return run_op_checks(seed) + [run_model_check(seed, ModelConfig.tiny(variant=Variant(variant)))]
