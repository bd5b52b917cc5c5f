"""Finite-difference verification of reverse-mode gradients.

``grad_check`` treats the op under test as a black box: it reduces the
op's output to a scalar through a fixed random linear functional, runs
one backward pass, then re-derives every input gradient element with
central differences.  The step is h = cbrt(machine eps) * max(1, |x|)
per element, the textbook balance between truncation and rounding error
for second-order differences.

A check passes when either the worst relative error or the worst
absolute error is within tolerance; the absolute branch covers elements
whose true gradient is so close to zero that a relative test is
meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class GradReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        tag = "pass" if self.passed else "FAIL"
        return (f"[{tag}] {self.op_name}: rel={self.max_rel_error:.3e} "
                f"abs={self.max_abs_error:.3e} tol={self.tolerance:.1e}")


def _functional_weights(shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.standard_normal(shape)


def grad_check(op_under_test: Callable[..., Tensor],
               sample_inputs: Sequence[Tensor],
               tolerance: float = 1e-6,
               seed: int = 0,
               op_name: str | None = None) -> GradReport:
    """Compare analytic and numeric gradients of ``op_under_test``.

    Every input with requires_grad=True is perturbed elementwise.  The
    scalar under differentiation is sum(op(inputs) * R) for a fixed
    standard-normal R keyed by ``seed``.
    """
    inputs = list(sample_inputs)
    if not any(t.requires_grad for t in inputs):
        raise UsageError("grad_check: no input requires grad")
    name = op_name or getattr(op_under_test, "__name__", "op")

    probe = op_under_test(*inputs)
    weights = _functional_weights(probe.shape, seed)

    def scalar(*args: Tensor) -> float:
        return float(np.sum(op_under_test(*args).data * weights))

    for t in inputs:
        t.zero_grad()
    loss = (op_under_test(*inputs) * Tensor(weights)).sum()
    loss.backward()

    cbrt_eps = float(np.cbrt(np.finfo(inputs[0].data.dtype).eps))
    max_rel = 0.0
    max_abs = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = cbrt_eps * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = scalar(*inputs)
            flat[i] = orig - h
            f_minus = scalar(*inputs)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            abs_err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel_err = abs_err / denom if denom > 0.0 else 0.0
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)

    passed = (max_rel <= tolerance) or (max_abs <= tolerance)
    return GradReport(op_name=name, max_rel_error=max_rel,
                      max_abs_error=max_abs, tolerance=tolerance, passed=passed)


def _away_from_zero(rng: np.random.Generator, shape, low=0.3, high=1.3) -> np.ndarray:
    """Magnitudes in [low, high] with random signs; keeps |x| off the kinks
    of abs/relu so finite differences stay two-sided."""
    mag = rng.uniform(low, high, shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _offgrid_coords(rng: np.random.Generator, n: int, h: int, w: int) -> np.ndarray:
    """Sample points strictly inside the grid with fractional parts in
    [0.2, 0.8], away from both the floor kinks and the border clamp."""
    xs = rng.integers(0, w - 1, n) + rng.uniform(0.2, 0.8, n)
    ys = rng.integers(0, h - 1, n) + rng.uniform(0.2, 0.8, n)
    return np.stack([xs, ys], axis=1)


def suite_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    """(name, op, inputs) for every differentiable primitive."""
    from . import tensor as T

    def g(name: str) -> np.random.Generator:
        return stream(seed, "gradcheck", name)

    def t(name: str, shape, builder=None) -> Tensor:
        rng = g(name)
        data = rng.standard_normal(shape) if builder is None else builder(rng, shape)
        return Tensor(data, requires_grad=True)

    pos = lambda rng, shape: rng.uniform(0.5, 2.0, shape)
    cases: list[tuple[str, Callable[..., Tensor], list[Tensor]]] = [
        ("add", lambda a, b: a + b, [t("add.a", (3, 4)), t("add.b", (3, 4))]),
        ("sub", lambda a, b: a - b, [t("sub.a", (3, 4)), t("sub.b", (3, 4))]),
        ("mul", lambda a, b: a * b, [t("mul.a", (3, 4)), t("mul.b", (3, 4))]),
        ("neg", lambda a: -a, [t("neg.a", (3, 4))]),
        ("div_scalar", lambda a: a / 2.5, [t("div.a", (3, 4))]),
        ("reciprocal", lambda a: a.reciprocal(),
         [t("recip.a", (3, 4), _away_from_zero)]),
        ("exp", lambda a: a.exp(), [t("exp.a", (3, 4))]),
        ("log", lambda a: a.log(), [t("log.a", (3, 4), pos)]),
        ("sqrt", lambda a: a.sqrt(), [t("sqrt.a", (3, 4), pos)]),
        ("abs", lambda a: a.abs(), [t("abs.a", (3, 4), _away_from_zero)]),
        ("relu", lambda a: a.relu(), [t("relu.a", (3, 4), _away_from_zero)]),
        ("sigmoid", T.sigmoid, [t("sigmoid.a", (3, 4))]),
        ("silu", T.silu, [t("silu.a", (3, 4))]),
        ("reshape", lambda a: a.reshape(2, 6), [t("reshape.a", (3, 4))]),
        ("transpose", lambda a: a.transpose(2, 0, 1), [t("transpose.a", (2, 3, 4))]),
        ("broadcast_to", lambda a: a.broadcast_to((3, 4)), [t("bcast.a", (3, 1))]),
        ("getitem", lambda a: a[1:, ::2], [t("getitem.a", (3, 4))]),
        ("sum_axis", lambda a: a.sum(axis=1), [t("sum.a", (3, 4))]),
        ("mean", lambda a: a.mean(), [t("mean.a", (3, 4))]),
        ("matmul", lambda a, b: a @ b, [t("matmul.a", (3, 4)), t("matmul.b", (4, 2))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1),
         [t("concat.a", (2, 3)), t("concat.b", (2, 2))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [t("softmax.a", (3, 5))]),
        ("group_norm", lambda a: T.group_norm(a, 2), [t("gn.a", (2, 4, 3, 3))]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, padding=1),
         [t("conv.x", (1, 2, 5, 5)), t("conv.w", (3, 2, 3, 3)), t("conv.b", (3,))]),
        ("conv2d_strided", lambda x, w: T.conv2d(x, w, stride=2, padding=1),
         [t("convs.x", (1, 2, 6, 6)), t("convs.w", (3, 2, 3, 3))]),
        ("conv_transpose2d", lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2),
         [t("convt.x", (1, 3, 3, 3)), t("convt.w", (3, 2, 2, 2)), t("convt.b", (2,))]),
        ("bilinear_sample", T.bilinear_sample,
         [t("bilin.f", (2, 4, 4)),
          Tensor(_offgrid_coords(g("bilin.c"), 6, 4, 4), requires_grad=True)]),
    ]
    return cases


def composite_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    """(name, op, inputs) for the composed network blocks.

    Block parameters ride along as extra grad-check inputs: the closures
    ignore the trailing positional args because the block instances already
    hold those same tensors, and grad_check's in-place perturbation is
    visible to the forward pass.
    """
    from .data import DepthMap
    from .denoiser import TimedBlock, UpBlock
    from .guidance import DeformableAttention, FpnAggregate, ResidualBlock
    from .refiner import RefineConfig, Refiner, anchor_sparse, propagate_step

    def g(name: str) -> np.random.Generator:
        return stream(seed, "gradcheck", name)

    def t(name: str, shape, builder=None) -> Tensor:
        rng = g(name)
        data = rng.standard_normal(shape) if builder is None else builder(rng, shape)
        return Tensor(data, requires_grad=True)

    def params(module) -> list[Tensor]:
        return [p for _, p in module.named_parameters()]

    def sparse_map(name: str, h: int, w: int) -> DepthMap:
        rng = g(name)
        meters = rng.uniform(1.0, 9.0, (h, w))
        valid = rng.random((h, w)) < 0.5
        return DepthMap(meters=np.where(valid, meters, 0.0), valid=valid)

    # Zero-init offset heads park every sample exactly on grid points,
    # where bilinear interpolation has a kink and finite differences
    # disagree with the analytic gradient; nudge the biases off-grid.
    def offgrid_bias(head, pairs: int) -> None:
        head.bias.data[:] = np.tile([0.37, -0.23], pairs)

    pos = lambda rng, shape: rng.uniform(0.5, 2.0, shape)
    unit = lambda lo, hi: (lambda rng, shape: rng.uniform(lo, hi, shape))

    rb = ResidualBlock(2, 3, stride=2, groups=1, rng=g("blk.res.init"))
    tb = TimedBlock(2, 2, stride=1, time_dim=4, groups=1, rng=g("blk.timed.init"))
    ub = UpBlock(4, 2, time_dim=4, groups=1, rng=g("blk.up.init"))
    da = DeformableAttention(2, [2, 2], width=2, n_points=2, out_channels=2,
                             rng=g("blk.attn.init"))
    offgrid_bias(da.offset_head, da.n_levels * da.n_points)
    fa = FpnAggregate([2, 2], out_channels=2, rng=g("blk.fpn.init"))
    rcfg = RefineConfig(kernels=(3,), steps=2, trunk_channels=2, norm_groups=1)
    rf = Refiner(cond_channels=2, cfg=rcfg, seed=seed)
    for head, k in zip(rf.offset_heads, rcfg.kernels):
        offgrid_bias(head, k * k - 1)
    prop_sparse = sparse_map("blk.prop.sparse", 5, 5)
    ref_sparse = sparse_map("blk.refine.sparse", 5, 5)

    def prop(d, off, w, lam):
        return anchor_sparse(propagate_step(d, off, w, 3), prop_sparse, lam)

    cases: list[tuple[str, Callable[..., Tensor], list[Tensor]]] = [
        ("block.residual", lambda x, *ps: rb(x),
         [t("blk.res.x", (1, 2, 6, 6))] + params(rb)),
        ("block.timed", lambda x, e, *ps: tb(x, e),
         [t("blk.timed.x", (1, 2, 5, 5)), t("blk.timed.e", (1, 4))] + params(tb)),
        ("block.up", lambda x, s, e, *ps: ub(x, s, e),
         [t("blk.up.x", (1, 4, 3, 3)), t("blk.up.skip", (1, 2, 6, 6)),
          t("blk.up.e", (1, 4))] + params(ub)),
        ("block.deform_attn", lambda q, v0, v1, *ps: da(q, [v0, v1]),
         [t("blk.attn.q", (1, 2, 3, 3)), t("blk.attn.v0", (1, 2, 3, 3)),
          t("blk.attn.v1", (1, 2, 2, 2))] + params(da)),
        ("block.fpn", lambda f0, f1, *ps: fa([f0, f1]),
         [t("blk.fpn.f0", (1, 2, 4, 4)), t("blk.fpn.f1", (1, 2, 2, 2))] + params(fa)),
        ("block.propagate", prop,
         [t("blk.prop.d", (5, 5), pos),
          t("blk.prop.off", (16, 5, 5), unit(0.05, 0.45)),
          t("blk.prop.w", (9, 5, 5), unit(0.1, 0.9)),
          t("blk.prop.lam", (5, 5), unit(0.1, 0.9))]),
        ("block.refine", lambda d0, c, *ps: rf.refine_tensor(d0, c, ref_sparse),
         [t("blk.refine.d0", (5, 5), pos),
          t("blk.refine.cond", (2, 5, 5))] + params(rf)),
    ]
    return cases


def run_suite(tolerance: float = 1e-6, seed: int = 0) -> list[GradReport]:
    """Finite-difference check of every primitive and composed block."""
    return [grad_check(op, inputs, tolerance=tolerance, seed=seed, op_name=name)
            for name, op, inputs in suite_cases(seed) + composite_cases(seed)]
