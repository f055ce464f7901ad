"""Central finite-difference verification of every differentiable kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import RngState, Tensor


@dataclass
class GradCheckResult:
    kernel: str
    instance: int
    rel_error: float
    ok: bool


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    """Fixed random projection of the output to a scalar."""
    return ag.sum_all(ag.mul(out, Tensor(proj)))


def _fd_grad(f, arrays: list[np.ndarray], wrt: int, h: float) -> np.ndarray:
    base = arrays[wrt]
    g = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def _check(name, build, arrays, grad_inputs, h=1e-3, tol=1e-3, instance=0):
    """Compare analytic grads of `build` against central differences.

    Runs both sides in float64 so the finite-difference quotient is not
    dominated by single-precision rounding noise.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def f(arrs):
        with ag.no_grad():
            return float(build([Tensor(a) for a in arrs]).data)

    with ag.use_dtype(np.float64):
        tensors = [Tensor(a.copy(), requires_grad=(i in grad_inputs))
                   for i, a in enumerate(arrays)]
        loss = build(tensors)
        loss.backward()
        worst = 0.0
        for i in grad_inputs:
            analytic = tensors[i].grad
            assert analytic is not None, f"{name}: missing gradient for input {i}"
            fd = _fd_grad(f, [a.copy() for a in arrays], i, h)
            rel = np.linalg.norm(analytic.astype(np.float64) - fd) / max(
                np.linalg.norm(fd), 1e-6
            )
            worst = max(worst, float(rel))
    return GradCheckResult(name, instance, worst, worst <= tol)


def run_suite(seed: int = 0, n_instances: int = 10, tol: float = 1e-3) -> list[GradCheckResult]:
    """10 random instances per kernel by default; returns per-case results."""
    results = []
    for inst in range(n_instances):
        gen = RngState(seed).child(inst).generator()

        def rnd(*shape, scale=0.5):
            return (gen.normal(0.0, scale, size=shape)).astype(np.float32)

        p1 = rnd(3, 4)
        results.append(_check(
            "matmul",
            lambda t: _scalarize(ag.matmul(t[0], t[1]), p1),
            [rnd(3, 5), rnd(5, 4)], (0, 1), instance=inst,
        ))
        results.append(_check(
            "add_broadcast",
            lambda t: _scalarize(ag.add(t[0], t[1]), p1),
            [rnd(3, 4), rnd(4)], (0, 1), instance=inst,
        ))
        results.append(_check(
            "mul",
            lambda t: _scalarize(ag.mul(t[0], t[1]), p1),
            [rnd(3, 4), rnd(3, 4)], (0, 1), instance=inst,
        ))
        results.append(_check(
            "scale",
            lambda t: _scalarize(ag.scale(t[0], 1.7), p1),
            [rnd(3, 4)], (0,), instance=inst,
        ))
        results.append(_check(
            "gelu",
            lambda t: _scalarize(ag.gelu(t[0]), p1),
            [rnd(3, 4, scale=1.0)], (0,), instance=inst,
        ))
        results.append(_check(
            "softmax",
            lambda t: _scalarize(ag.softmax(t[0]), p1),
            [rnd(3, 4, scale=1.0)], (0,), instance=inst,
        ))
        gam, bet = rnd(4, scale=0.3) + 1.0, rnd(4, scale=0.3)
        results.append(_check(
            "layer_norm",
            lambda t: _scalarize(ag.layer_norm(t[0], t[1], t[2]), p1),
            [rnd(3, 4, scale=1.0), gam, bet], (0, 1, 2), instance=inst,
        ))
        ids = gen.integers(0, 6, size=(3,))
        results.append(_check(
            "embedding",
            lambda t: _scalarize(ag.embedding(t[0], ids), p1[:3, :4]),
            [rnd(6, 4)], (0,), instance=inst,
        ))
        # attention composed from primitives (matmul/softmax/scale/add_mask)
        causal = np.triu(np.full((3, 3), -1e9, dtype=np.float32), k=1)
        p2 = rnd(3, 4)

        def attn(t):
            scores = ag.scale(ag.matmul(t[0], ag.transpose(t[1], (1, 0))), 0.5)
            att = ag.softmax(ag.add_mask(scores, causal))
            return _scalarize(ag.matmul(att, t[2]), p2)

        results.append(_check(
            "attention", attn, [rnd(3, 4), rnd(3, 4), rnd(3, 4)], (0, 1, 2),
            instance=inst,
        ))
        targets = gen.integers(0, 5, size=(4,))
        mask = np.array([True, True, False, True])

        def ce(t):
            return ag.cross_entropy(t[0], targets, mask)

        results.append(_check(
            "cross_entropy", ce, [rnd(4, 5, scale=1.0)], (0,), instance=inst,
        ))

        def drop(t):
            rng = RngState(seed).child(777, inst).generator()
            return _scalarize(ag.dropout(t[0], 0.4, rng, train=True), p1)

        results.append(_check("dropout", drop, [rnd(3, 4)], (0,), instance=inst))
    return results


def mlp_check(seed: int = 1, tol: float = 1e-3) -> GradCheckResult:
    """3-layer MLP end-to-end gradient vs finite differences."""
    gen = RngState(seed).generator()
    arrays = [
        gen.normal(0, 0.5, size=(4, 6)).astype(np.float32),
        gen.normal(0, 0.5, size=(6, 6)).astype(np.float32),
        gen.normal(0, 0.5, size=(6, 3)).astype(np.float32),
        gen.normal(0, 0.5, size=(2, 4)).astype(np.float32),
    ]
    proj = gen.normal(0, 1.0, size=(2, 3)).astype(np.float32)

    def build(t):
        h = ag.gelu(ag.matmul(t[3], t[0]))
        h = ag.gelu(ag.matmul(h, t[1]))
        return _scalarize(ag.matmul(h, t[2]), proj)

    return _check("mlp", build, arrays, (0, 1, 2, 3), tol=tol)
