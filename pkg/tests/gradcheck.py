"""Finite-difference helper shared by the gradient tests."""
import numpy as np

from labelguided import numerics as nx


def check(loss_fn, params, tol=1e-5):
    """Relative check on every entry, except attention key biases.

    Softmax ignores a constant added along a score row, so the key bias has an
    exactly zero gradient and central differences only see roundoff there.
    Those entries are held to an absolute bound instead.
    """
    tape = nx.Tape(params)
    grads = tape.backward(loss_fn(tape))
    zero = [n for n in params if n.endswith(".k.b")]
    rest = [n for n in params if n not in zero]
    err = nx.finite_diff_check(loss_fn, params, grads=grads, names=rest)
    for name in zero:
        assert np.max(np.abs(grads[name])) <= 1e-12, name
        numeric = _numeric(loss_fn, params, name)
        assert np.max(np.abs(numeric)) <= 1e-7, name
    assert err <= tol, err
    return err


def _numeric(loss_fn, params, name, eps=1e-6):
    flat = params[name].reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn(nx.Tape(params)).value)
        flat[i] = orig - eps
        down = float(loss_fn(nx.Tape(params)).value)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out


def check_chain(loss_fn, params, tol=1e-5, floor=1e-4, atol=1e-8):
    """End-to-end check for deep compositions.

    Entries whose gradient is at least ``floor`` must meet the relative bound;
    smaller ones sit near the roundoff of central differences (about 1e-10
    here) and are held to ``atol`` instead.  Returns the worst relative error
    over the large entries.
    """
    tape = nx.Tape(params)
    grads = tape.backward(loss_fn(tape))
    worst = 0.0
    for name in params:
        a = grads[name].reshape(-1)
        n = _numeric(loss_fn, params, name)
        big = np.maximum(np.abs(a), np.abs(n)) >= floor
        if np.any(big):
            rel = np.abs(a - n)[big] / np.maximum(np.abs(a), np.abs(n))[big]
            worst = max(worst, float(rel.max()))
        assert np.all(np.abs(a - n)[~big] <= atol), name
    assert worst <= tol, worst
    return worst
