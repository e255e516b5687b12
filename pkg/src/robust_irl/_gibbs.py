"""Compiled Gibbs kernel over hidden (state, action) chains."""
import numpy as np
from numba import njit


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def _draw(logw, u):
    """Index drawn in proportion to exp(logw); -1 when every weight is zero."""
    mx = -np.inf
    for i in range(logw.shape[0]):
        if logw[i] > mx:
            mx = logw[i]
    if mx == -np.inf:
        return -1
    tot = 0.0
    for i in range(logw.shape[0]):
        if logw[i] > -np.inf:
            tot += np.exp(logw[i] - mx)
    target = u * tot
    acc = 0.0
    last = -1
    for i in range(logw.shape[0]):
        if logw[i] > -np.inf:
            acc += np.exp(logw[i] - mx)
            last = i
            if acc >= target:
                return i
    return last


@njit(cache=True)
def _forward(la, x, t0, span, log_start, start_states, log_trans, succ_ptr, succ_idx, log_pi, loglik, n_a):
    """Log forward messages over a block of ``span`` nodes starting at ``t0``."""
    n_p = la.shape[1]
    la[:, :] = -np.inf
    if t0 > 0:
        prev = x[t0 - 1]
        sp = prev // n_a
        ap = prev % n_a
        for j in range(succ_ptr[prev], succ_ptr[prev + 1]):
            s = succ_idx[j]
            base = log_trans[sp, ap, s]
            for a in range(n_a):
                la[0, s * n_a + a] = base + log_pi[s, a] + loglik[t0, s, a]
    else:
        for j in range(start_states.shape[0]):
            s = start_states[j]
            for a in range(n_a):
                la[0, s * n_a + a] = log_start[s] + log_pi[s, a] + loglik[0, s, a]
    for i in range(1, span):
        t = t0 + i
        for p in range(n_p):
            v0 = la[i - 1, p]
            if v0 == -np.inf:
                continue
            sp = p // n_a
            ap = p % n_a
            for j in range(succ_ptr[p], succ_ptr[p + 1]):
                s = succ_idx[j]
                base = v0 + log_trans[sp, ap, s]
                for a in range(n_a):
                    q = s * n_a + a
                    la[i, q] = _logaddexp(la[i, q], base + log_pi[s, a] + loglik[t, s, a])


@njit(cache=True)
def _whole_chain_cdfs(la, log_trans, n_a):
    """Backward-sampling tables for a block spanning the whole chain.

    ``last`` is the cumulative weight over the final pair; ``back[t, s]`` the
    cumulative weight over pairs at t given state s at t + 1.
    """
    n_nodes, n_p = la.shape
    n_s = n_p // n_a
    last = np.empty(n_p)
    back = np.empty((max(n_nodes - 1, 1), n_s, n_p))
    mx = np.max(la[n_nodes - 1])
    acc = 0.0
    for p in range(n_p):
        if la[n_nodes - 1, p] > -np.inf:
            acc += np.exp(la[n_nodes - 1, p] - mx)
        last[p] = acc
    for t in range(n_nodes - 1):
        mx = np.max(la[t])
        for sn in range(n_s):
            acc = 0.0
            for p in range(n_p):
                v = la[t, p]
                if v > -np.inf:
                    tr = log_trans[p // n_a, p % n_a, sn]
                    if tr > -np.inf:
                        acc += np.exp(v - mx + tr)
                back[t, sn, p] = acc
    return last, back


@njit(cache=True)
def _search(cum, u):
    total = cum[cum.shape[0] - 1]
    if not total > 0.0:
        return -1
    i = np.searchsorted(cum, u * total, side="left")
    n = cum.shape[0]
    if i >= n:
        i = n - 1
    # skip zero-weight entries that share the cumulative value
    while i > 0 and cum[i] == cum[i - 1]:
        i -= 1
    while i < n - 1 and (cum[i] == 0.0 or (i > 0 and cum[i] == cum[i - 1])):
        i += 1
    return i


@njit(cache=True)
def gibbs_block(x, log_start, start_states, log_trans, succ_ptr, succ_idx, log_pi, loglik,
                u, span, n_sweeps, thin, accumulate, feat, out_sum):
    """Run ``n_sweeps`` sweeps on chain ``x``; returns the number of samples accumulated.

    ``x[t]`` is the flat pair index s * A + a. An update redraws ``span``
    consecutive nodes jointly from their conditional given the node before
    and the state after (forward filtering, backward sampling inside the
    block); with ``span`` 1 this is the single-node Markov-blanket update.
    A sweep makes ceil((L + 1) / span) updates at uniformly drawn offsets.
    Successor states come from the CSR lists ``succ_ptr``/``succ_idx`` over
    flat pairs, or from ``start_states`` at t = 0. Each update consumes
    1 + span entries of ``u``. With ``accumulate`` set, the trajectory's
    feature count is added to ``out_sum`` after every ``thin`` sweeps.
    """
    n_nodes = x.shape[0]
    n_s = log_pi.shape[0]
    n_a = log_pi.shape[1]
    n_p = n_s * n_a
    span = min(max(span, 1), n_nodes)
    n_updates = (n_nodes + span - 1) // span
    n_offsets = n_nodes - span + 1
    la = np.empty((span, n_p))
    col = np.empty(n_p)
    nb = np.empty(span, dtype=np.int64)
    # A block covering the whole chain has no outside neighbours, so its
    # forward messages never change and are computed once.
    whole = span == n_nodes
    k = 0
    taken = 0
    if whole:
        _forward(la, x, 0, span, log_start, start_states, log_trans, succ_ptr, succ_idx, log_pi, loglik, n_a)
        last, back = _whole_chain_cdfs(la, log_trans, n_a)
        if last[n_p - 1] > 0.0:
            for sweep in range(n_sweeps):
                # each update is an independent draw of the whole chain
                nb[n_nodes - 1] = _search(last, u[k + 1])
                for t in range(n_nodes - 2, -1, -1):
                    nb[t] = _search(back[t, nb[t + 1] // n_a], u[k + 1 + (n_nodes - 1 - t)])
                for t in range(n_nodes):
                    x[t] = nb[t]
                k += 1 + span
                if accumulate and (sweep + 1) % thin == 0:
                    for t in range(n_nodes):
                        for j in range(feat.shape[1]):
                            out_sum[j] += feat[x[t], j]
                    taken += 1
            return taken
    for sweep in range(n_sweeps):
        for _ in range(n_updates):
            k0 = k
            t0 = int(u[k0] * n_offsets)
            if t0 >= n_offsets:
                t0 = n_offsets - 1
            t1 = t0 + span - 1
            has_next = t1 < n_nodes - 1
            sn = 0
            if has_next:
                sn = x[t1 + 1] // n_a
            if not whole or k0 == 0:
                _forward(la, x, t0, span, log_start, start_states, log_trans, succ_ptr, succ_idx,
                         log_pi, loglik, n_a)

            # backward sampling into a buffer; x changes only on success
            for p in range(n_p):
                col[p] = la[span - 1, p]
                if has_next and col[p] > -np.inf:
                    col[p] += log_trans[p // n_a, p % n_a, sn]
            c = _draw(col, u[k0 + 1])
            ok = c >= 0
            if ok:
                nb[span - 1] = c
            for i in range(span - 2, -1, -1):
                if not ok:
                    break
                s_next = nb[i + 1] // n_a
                for p in range(n_p):
                    v = la[i, p]
                    col[p] = v + log_trans[p // n_a, p % n_a, s_next] if v > -np.inf else -np.inf
                c = _draw(col, u[k0 + 2 + (span - 2 - i)])
                ok = c >= 0
                nb[i] = c
            if ok:
                for i in range(span):
                    x[t0 + i] = nb[i]
            k = k0 + 1 + span
        if accumulate and (sweep + 1) % thin == 0:
            for t in range(n_nodes):
                for j in range(feat.shape[1]):
                    out_sum[j] += feat[x[t], j]
            taken += 1
    return taken
