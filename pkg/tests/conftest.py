import numpy as np
import pytest

from adauda import model as M

FD_STEP = 1e-5
# Relative-error denominators are floored at 1e-3 of the tensor's largest
# numeric entry: central differences at h=1e-5 carry ~1e-11 absolute
# round-off, which swamps entries many orders below the tensor's scale.
REL_FLOOR_FRACTION = 1e-3
REL_FLOOR_ABS = 1e-8


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = max(REL_FLOOR_ABS, REL_FLOOR_FRACTION * float(np.max(np.abs(n))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def naive_matmul(a, b):
    """Triple-loop oracle, left-to-right accumulation."""
    n, k = len(a), len(a[0]) if len(a) else 0
    m = len(b[0]) if len(b) else 0
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out, dtype=np.float64).reshape(n, m)


def random_params(rng, d_in=4, d=3, n_layers=2, n_verbs=3, n_nouns=2, hidden=5, scale=0.5):
    p = M.init_params(d_in, d, n_layers, n_verbs, n_nouns, hidden, seed=int(rng.integers(1 << 30)))
    for t in p.tensors():
        t += rng.normal(0.0, scale, t.shape)
    return p


def random_problem(rng, d_in=4, n_src=3, n_tgt=2, max_t=4, n_verbs=3, n_nouns=2):
    src = [rng.normal(size=(int(rng.integers(1, max_t + 1)), d_in)) for _ in range(n_src)]
    tgt = [rng.normal(size=(int(rng.integers(1, max_t + 1)), d_in)) for _ in range(n_tgt)]
    return src, rng.integers(0, n_verbs, n_src), rng.integers(0, n_nouns, n_src), tgt


def split_losses(params, src, v, n, tgt, mode, rule="avg", rectify=False):
    c = M.forward(params, src, v, n, tgt, mode, rule, rectify)
    return float(np.mean(c.verb_loss) + np.mean(c.noun_loss)), float(np.mean(c.domain_loss))


def check_full_gradients(params, src, v, n, tgt, mode, lam, w, rule="avg", rectify=False):
    """Worst relative error over every parameter tensor.

    Main-model parameters see the reversed domain term, so their reference is
    d(L_cls - lam*w*L_d); the discriminator's reference is d(L_cls + w*L_d).
    """
    cache = M.forward(params, src, v, n, tgt, mode, rule, rectify)
    grads = M.backward(cache, params, lam, w)
    tensors = params.tensors()
    n_disc = 4
    worst = 0.0
    for k, (t, g) in enumerate(zip(tensors, grads.tensors())):
        sign = 1.0 if k >= len(tensors) - n_disc else -lam

        def f():
            cls, dom = split_losses(params, src, v, n, tgt, mode, rule, rectify)
            return cls + sign * w * dom

        worst = max(worst, max_rel_error(g, numeric_grad(f, t)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
