"""Finite-difference verification of every autograd primitive and the composed network.

Relative error is measured norm-wise: the largest absolute discrepancy
between analytic and central-difference gradients, divided by the largest
gradient magnitude of either kind. Per-coordinate ratios are meaningless
for coordinates whose true gradient is ~0, which the network has plenty of.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .model import ModelConfig, build_model

FD_STEP = 1e-6
KINK_MARGIN = 1e-4
PRIMITIVE_TOL = 1e-6
NETWORK_TOL = 1e-4
SCALE_FLOOR = 1e-3
# small loss keeps central-difference roundoff (eps * loss / step) negligible
TARGET_OFFSET = 1.0


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_coords: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} coords={self.n_coords}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def grad_check(
    fn: Callable[[Sequence[ag.Tensor]], ag.Tensor],
    inputs: Sequence[np.ndarray],
    name: str = "op",
    tolerance: float = PRIMITIVE_TOL,
    step: float = FD_STEP,
    projection_seed: int = 12345,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element influences the check.
    """
    t0 = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [ag.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(leaves)
    proj = np.random.default_rng(projection_seed).standard_normal(out.shape)

    def scalar(t: ag.Tensor) -> ag.Tensor:
        return ag.tsum(ag.mul(t, proj)) if t.data.size > 1 else ag.reshape(t, ())

    scalar(out).backward()
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def evaluate() -> float:
        with ag.no_grad():
            value = fn([ag.Tensor(a) for a in arrays]).data
        return float(np.sum(value * proj)) if value.size > 1 else float(value)

    worst, count = 0.0, 0
    for a, g in zip(arrays, analytic):
        numeric = np.zeros_like(a)
        flat, nflat = a.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        worst = max(worst, relative_error(g, numeric))
        count += a.size
    return GradCheckResult(name, worst, tolerance, count, time.perf_counter() - t0)


# sampling away from kinks ------------------------------------------------------

def _away_from_zero(rng: np.random.Generator, shape, margin: float = KINK_MARGIN) -> np.ndarray:
    x = rng.standard_normal(shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x


def _distinct_blocks(rng: np.random.Generator, shape, kernel: int, margin: float = KINK_MARGIN) -> np.ndarray:
    """Input whose pooling blocks have a unique maximum by at least ``margin``."""
    while True:
        x = rng.standard_normal(shape)
        n = shape[-1] // kernel * kernel
        blocks = np.sort(x[..., :n].reshape(*shape[:-1], -1, kernel), axis=-1)
        if np.all(blocks[..., -1] - blocks[..., -2] > margin):
            return x


# the suite -----------------------------------------------------------------------

def primitive_checks(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    results = []

    def check(name, fn, inputs, tol=PRIMITIVE_TOL):
        results.append(grad_check(fn, inputs, name, tol))

    check("add(broadcast)", lambda t: ag.add(t[0], t[1]), [r((3, 4)), r(4)])
    check("mul(broadcast)", lambda t: ag.mul(t[0], t[1]), [r((3, 4)), r((3, 1))])
    check("sigmoid", lambda t: ag.sigmoid(t[0]), [3 * r((3, 4))])
    check("tanh", lambda t: ag.tanh(t[0]), [2 * r((3, 4))])
    check("relu", lambda t: ag.relu(t[0]), [_away_from_zero(rng, (3, 4))])
    check("reshape", lambda t: ag.reshape(t[0], (4, 3)), [r((3, 4))])
    check("getitem", lambda t: t[0][:, 1:3], [r((3, 4))])
    check("getitem(repeated)", lambda t: ag.getitem(t[0], (np.array([0, 2, 0]),)), [r((3, 4))])
    check("concat", lambda t: ag.concat([t[0], t[1]], axis=1), [r((2, 3)), r((2, 2))])
    check("stack", lambda t: ag.stack([t[0], t[1]], axis=1), [r((2, 3)), r((2, 3))])
    check("pad_last", lambda t: ag.pad_last(t[0], 2, 1), [r((2, 3))])
    check("sum", lambda t: ag.tsum(t[0]), [r((3, 4))])
    check("mean", lambda t: ag.tmean(t[0]), [r((3, 4))])
    check("linear", lambda t: ag.linear(t[0], t[1], t[2]), [r((3, 5)), r((2, 5)), r(2)], tol=1e-8)
    check(
        "lstm_forward(T3,H4,D5)",
        lambda t: ag.lstm_forward(t[0], [(t[1], t[2], t[3]), (t[4], t[5], t[6])])[0],
        [r((2, 3, 5)), 0.5 * r((16, 5)), 0.5 * r((16, 4)), 0.5 * r(16),
         0.5 * r((16, 4)), 0.5 * r((16, 4)), 0.5 * r(16)],
    )
    check("conv1d(K3)", lambda t: ag.conv1d(t[0], t[1], t[2]), [r((2, 3, 7)), r((4, 3, 3)), r(4)])
    check("conv1d(K4,even)", lambda t: ag.conv1d(t[0], t[1], t[2]), [r((2, 2, 9)), r((3, 2, 4)), r(3)])
    check("conv1d(K>L)", lambda t: ag.conv1d(t[0], t[1], None), [r((1, 2, 4)), r((2, 2, 5))])

    def bn(training):
        def fn(t):
            state = ag.BatchNormState(t[1], t[2], np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0]))
            return ag.batchnorm(t[0], state, training)
        return fn

    check("batchnorm(train)", bn(True), [r((2, 3, 4)), r(3), r(3)])
    check("batchnorm(eval)", bn(False), [r((2, 3, 4)), r(3), r(3)])
    check("maxpool1d(L=31)", lambda t: ag.maxpool1d(t[0], 4), [_distinct_blocks(rng, (2, 2, 31), 4)])
    check(
        "dropout(train)",
        lambda t: ag.dropout(t[0], 0.3, True, np.random.default_rng(7)),
        [r((3, 5))],
    )
    pred = r(6)
    target = pred + _away_from_zero(rng, 6) * 3
    check("mae_loss", lambda t: ag.mae_loss(t[0], target), [pred])
    return results


def network_check(
    config: ModelConfig | None = None,
    batch: int = 2,
    coords_per_tensor: int = 6,
    seed: int = 0,
    training: bool = True,
    tolerance: float = NETWORK_TOL,
    step: float = FD_STEP,
) -> GradCheckResult:
    """Full network forward to MAE loss, sampled parameter coordinates.

    Dropout masks are replayed from a fixed seed so the training-mode
    forward is a deterministic function of the weights. Targets sit 1 BPM
    away from the predictions, far beyond any step's reach, and coordinates
    whose +/- step flips a relu or maxpool choice, or the loss sign, are redrawn.
    """
    t0 = time.perf_counter()
    cfg = config or ModelConfig(seed=seed)
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((batch, cfg.window_samples))

    def loss() -> ag.Tensor:
        pred = model.forward(x, training=training, rng=np.random.default_rng(seed + 2))
        return ag.mae_loss(pred, targets)

    with ag.no_grad():
        base = model.forward(x, training=training, rng=np.random.default_rng(seed + 2)).data
    targets = base + np.where(rng.random(batch) < 0.5, -TARGET_OFFSET, TARGET_OFFSET)

    model.zero_grad()
    loss().backward()
    pick = np.random.default_rng(seed + 3)
    sampled = []

    def crosses_kink(flat, i) -> tuple[bool, float, float]:
        orig = flat[i]
        with ag.no_grad():
            flat[i] = orig + step
            with ag.record_kinks() as up_log:
                up = loss().item()
            flat[i] = orig - step
            with ag.record_kinks() as down_log:
                down = loss().item()
        flat[i] = orig
        same = all(np.array_equal(a, b) for a, b in zip(up_log, down_log))
        return not same, up, down

    for _, _, param in model.named_parameters():
        analytic = np.zeros(param.shape) if param.grad is None else param.grad
        flat = param.data.reshape(-1)
        want = min(coords_per_tensor, flat.size)
        a_vals, n_vals = [], []
        # coordinates whose step straddles a relu/maxpool/loss kink are redrawn
        for i in pick.permutation(flat.size):
            if len(a_vals) == want:
                break
            kinked, up, down = crosses_kink(flat, i)
            if kinked:
                continue
            a_vals.append(analytic.reshape(-1)[i])
            n_vals.append((up - down) / (2 * step))
        sampled.append((np.array(a_vals), np.array(n_vals)))
    model.zero_grad()
    # a conv bias feeding batchnorm has an exactly-zero true gradient; such
    # tensors are judged against a floor tied to the network's gradient scale
    floor = SCALE_FLOOR * max(np.abs(a).max() for a, _ in sampled)
    worst = max(relative_error(a, n, floor) for a, n in sampled)
    count = sum(a.size for a, _ in sampled)
    return GradCheckResult("network->mae_loss", worst, tolerance, count, time.perf_counter() - t0)


def corrupted_conv_check(seed: int = 0) -> GradCheckResult:
    """Negative control: a conv whose weight gradient is off by 1% must fail."""
    rng = np.random.default_rng(seed)

    def bad_conv(t):
        out = ag.conv1d(t[0], t[1], t[2])
        honest = out._backward

        def backward(g):
            gx, gw, gb = honest(g)
            return gx, None if gw is None else gw * 1.01, gb

        out._backward = backward
        return out

    return grad_check(
        bad_conv, [rng.standard_normal((2, 3, 7)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)],
        "conv1d(corrupted)",
    )


@dataclass
class SuiteReport:
    results: list[GradCheckResult] = field(default_factory=list)
    control: GradCheckResult | None = None

    @property
    def passed(self) -> bool:
        # the negative control has to be caught for the suite to mean anything
        return all(r.passed for r in self.results) and self.control is not None and not self.control.passed

    def lines(self) -> list[str]:
        out = [r.line() for r in self.results]
        if self.control is not None:
            caught = "PASS" if not self.control.passed else "FAIL"
            out.append(f"{caught} negative control detected  rel_err={self.control.max_rel_error:.3e}")
        return out


def run_suite(seed: int = 0) -> SuiteReport:
    report = SuiteReport(primitive_checks(seed))
    report.results.append(network_check(seed=seed))
    report.control = corrupted_conv_check(seed)
    return report
