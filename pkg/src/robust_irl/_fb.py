"""Compiled forward-backward pass for the maximum-entropy trajectory distribution."""
import numpy as np
from numba import njit


@njit(cache=True)
def _lse(x):
    mx = -np.inf
    for v in x:
        if v > mx:
            mx = v
    if mx == -np.inf:
        return mx
    acc = 0.0
    for v in x:
        acc += np.exp(v - mx)
    return mx + np.log(acc)


@njit(cache=True)
def forward_backward(log_w, start_mask, trans_mask, horizon):
    """Return (log_n, marginals[t, s, a]) for per-pair weights exp(log_w[s, a]).

    Everything runs in log space so that weights spanning more than the
    floating-point range still give finite marginals.
    """
    n_s, n_a = log_w.shape
    backward = np.empty((horizon + 1, n_s, n_a))
    backward[horizon] = 0.0
    state = np.empty(n_s)
    terms = np.empty(n_a)
    succ = np.empty(n_s)
    for s in range(n_s):
        for a in range(n_a):
            terms[a] = log_w[s, a]
        state[s] = _lse(terms)
    for t in range(horizon - 1, -1, -1):
        for s in range(n_s):
            for a in range(n_a):
                for j in range(n_s):
                    succ[j] = state[j] if trans_mask[s, a, j] > 0.0 else -np.inf
                backward[t, s, a] = _lse(succ)
        for s in range(n_s):
            for a in range(n_a):
                terms[a] = log_w[s, a] + backward[t, s, a]
            state[s] = _lse(terms)
    for s in range(n_s):
        succ[s] = state[s] if start_mask[s] > 0.0 else -np.inf
    log_n = _lse(succ)

    marginals = np.empty((horizon + 1, n_s, n_a))
    alpha = np.empty(n_s)
    for s in range(n_s):
        alpha[s] = 0.0 if start_mask[s] > 0.0 else -np.inf
    joint = np.empty((n_s, n_a))
    flat = np.empty(n_s * n_a)
    for t in range(horizon + 1):
        for s in range(n_s):
            for a in range(n_a):
                joint[s, a] = alpha[s] + log_w[s, a]
                flat[s * n_a + a] = joint[s, a] + backward[t, s, a]
        z = _lse(flat)
        for s in range(n_s):
            for a in range(n_a):
                marginals[t, s, a] = np.exp(flat[s * n_a + a] - z)
        if t < horizon:
            for j in range(n_s):
                for s in range(n_s):
                    for a in range(n_a):
                        flat[s * n_a + a] = joint[s, a] if trans_mask[s, a, j] > 0.0 else -np.inf
                alpha[j] = _lse(flat)
            mx = alpha.max()
            if mx > -np.inf:
                alpha -= mx
    return log_n, marginals
