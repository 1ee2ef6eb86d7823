"""Shared test helpers: finite-difference gradient checking."""
import numpy as np

from pll import autodiff as ad


def numeric_grad(fn, arrays, which, h=1e-6):
    """Central finite differences of fn w.r.t. arrays[which].

    ``fn`` maps a list of ndarrays to a float and must not mutate them.
    """
    base = [a.copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(base)
        flat[i] = orig - h
        f_minus = fn(base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def gradcheck(build, shapes, rng, h=1e-6):
    """Max relative error between taped and finite-difference gradients.

    ``build`` maps a list of Tensors to a scalar Tensor. Inputs are drawn
    standard normal; callers are responsible for keeping them away from
    non-differentiable kinks.
    """
    arrays = [rng.standard_normal(s) for s in shapes]
    xs = [ad.Tensor(a.copy()) for a in arrays]
    tape = ad.Tape()
    with ad.recording(tape):
        loss = build(xs)
    tape.backward(loss)

    def value(arrs):
        return float(build([ad.Tensor(a.copy()) for a in arrs]).data)

    worst = 0.0
    for i, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numeric_grad(value, arrays, i, h=h)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
