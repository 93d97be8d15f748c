"""Compiled forward/backward passes and the fused DDPG update.

These mirror :class:`livingarch.nn.DenseNet` operating directly on the flat
parameter vector (same layout: ``W, b[, gain, offset]`` per layer). The
numpy implementation stays the reference; tests compare the two.
"""
import numpy as np
from numba import njit

RELU, TANH, IDENTITY = 0, 1, 2
ACT_CODES = {"relu": RELU, "tanh": TANH, "identity": IDENTITY}

LN_EPS = 1e-12


def arch_arrays(net):
    """``(sizes, ln_flags, act_codes)`` int arrays describing a DenseNet."""
    last = net.n_layers - 1
    ln = np.array([net.layer_norm and i != last for i in range(net.n_layers)], dtype=np.int64)
    acts = np.array([ACT_CODES[net.output_activation if i == last else net.hidden_activation]
                     for i in range(net.n_layers)], dtype=np.int64)
    return np.asarray(net.sizes, dtype=np.int64), ln, acts


@njit(cache=True)
def _layer_offsets(sizes, ln):
    L = len(sizes) - 1
    offs = np.empty(L + 1, dtype=np.int64)
    off = 0
    for i in range(L):
        offs[i] = off
        off += sizes[i] * sizes[i + 1] + sizes[i + 1]
        if ln[i]:
            off += 2 * sizes[i + 1]
    offs[L] = off
    return offs


@njit(cache=True)
def forward(flat, X, sizes, ln, acts):
    """Output of the network for a batch of rows (no caching)."""
    offs = _layer_offsets(sizes, ln)
    h = np.ascontiguousarray(X)
    for i in range(len(sizes) - 1):
        h, _, _, _ = _layer(flat, h, offs[i], sizes[i], sizes[i + 1], ln[i], acts[i])
    return h


@njit(cache=True)
def _tanh(v):
    # exp-based form; the libm tanh is several times slower here
    e = np.exp(-2.0 * abs(v))
    t = (1.0 - e) / (1.0 + e)
    return t if v >= 0.0 else -t


@njit(cache=True)
def _layer(flat, h, off, fi, fo, ln, act):
    W = flat[off:off + fi * fo].reshape((fi, fo))
    b = flat[off + fi * fo:off + fi * fo + fo]
    z = np.dot(h, W)
    rows = z.shape[0]
    xhat = np.empty((rows, fo))
    inv = np.ones(rows)
    if ln:
        g = flat[off + fi * fo + fo:off + fi * fo + 2 * fo]
        o = flat[off + fi * fo + 2 * fo:off + fi * fo + 3 * fo]
        for r in range(rows):
            mu = 0.0
            for c in range(fo):
                z[r, c] += b[c]
                mu += z[r, c]
            mu /= fo
            var = 0.0
            for c in range(fo):
                d = z[r, c] - mu
                var += d * d
            var /= fo
            s = 1.0 / np.sqrt(var + LN_EPS)
            inv[r] = s
            for c in range(fo):
                xhat[r, c] = (z[r, c] - mu) * s
                z[r, c] = xhat[r, c] * g[c] + o[c]
    else:
        for r in range(rows):
            for c in range(fo):
                z[r, c] += b[c]
    # z now holds the pre-activation n
    out = np.empty((rows, fo))
    for r in range(rows):
        for c in range(fo):
            v = z[r, c]
            if act == RELU:
                out[r, c] = v if v > 0.0 else 0.0
            elif act == TANH:
                out[r, c] = _tanh(v)
            else:
                out[r, c] = v
    return out, z, xhat, inv


@njit(cache=True)
def forward_cached(flat, X, sizes, ln, acts):
    """Forward pass keeping every layer's intermediates for :func:`backward`."""
    L = len(sizes) - 1
    offs = _layer_offsets(sizes, ln)
    hs = [np.ascontiguousarray(X)]
    ns = []
    xhats = []
    invs = []
    for i in range(L):
        h, n, xhat, inv = _layer(flat, hs[i], offs[i], sizes[i], sizes[i + 1], ln[i], acts[i])
        hs.append(h)
        ns.append(n)
        xhats.append(xhat)
        invs.append(inv)
    return hs, ns, xhats, invs


@njit(cache=True)
def backward(flat, hs, ns, xhats, invs, grad_out, sizes, ln, acts, param_grads):
    """Backprop ``grad_out`` through a cached pass; ``(flat_grad, grad_input)``.

    ``flat_grad`` is all zeros when ``param_grads`` is False.
    """
    L = len(sizes) - 1
    offs = _layer_offsets(sizes, ln)
    grad = np.zeros(offs[L])
    g = grad_out.copy()
    rows = g.shape[0]
    for i in range(L - 1, -1, -1):
        fi, fo, off = sizes[i], sizes[i + 1], offs[i]
        n, h, xhat, inv = ns[i], hs[i + 1], xhats[i], invs[i]
        if acts[i] == RELU:
            for r in range(rows):
                for c in range(fo):
                    if n[r, c] <= 0.0:
                        g[r, c] = 0.0
        elif acts[i] == TANH:
            for r in range(rows):
                for c in range(fo):
                    g[r, c] *= 1.0 - h[r, c] * h[r, c]
        if ln[i]:
            gain = flat[off + fi * fo + fo:off + fi * fo + 2 * fo]
            if param_grads:
                for r in range(rows):
                    for c in range(fo):
                        grad[off + fi * fo + fo + c] += g[r, c] * xhat[r, c]
                        grad[off + fi * fo + 2 * fo + c] += g[r, c]
            for r in range(rows):
                s1 = 0.0
                s2 = 0.0
                for c in range(fo):
                    dx = g[r, c] * gain[c]
                    s1 += dx
                    s2 += dx * xhat[r, c]
                s1 /= fo
                s2 /= fo
                for c in range(fo):
                    g[r, c] = (g[r, c] * gain[c] - s1 - xhat[r, c] * s2) * inv[r]
        if param_grads:
            gw = np.dot(hs[i].T, g)
            grad[off:off + fi * fo] = gw.ravel()
            for r in range(rows):
                for c in range(fo):
                    grad[off + fi * fo + c] += g[r, c]
        W = flat[off:off + fi * fo].reshape((fi, fo))
        g = np.dot(g, W.T)
    return grad, g


@njit(cache=True)
def forward_backward(flat, X, grad_out, sizes, ln, acts, param_grads):
    """Forward pass followed by backprop of ``grad_out``.

    Returns ``(output, flat_grad, grad_input)``.
    """
    hs, ns, xhats, invs = forward_cached(flat, X, sizes, ln, acts)
    grad, g = backward(flat, hs, ns, xhats, invs, grad_out, sizes, ln, acts, param_grads)
    return hs[len(hs) - 1], grad, g


@njit(cache=True)
def _adam(p, g, m, v, b1, b2, step, eps_hat):
    for k in range(p.size):
        m[k] = b1 * m[k] + (1.0 - b1) * g[k]
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k]
        p[k] -= step * m[k] / (np.sqrt(v[k]) + eps_hat)


@njit(cache=True)
def _soft(t, s, tau):
    for k in range(t.size):
        t[k] = (1.0 - tau) * t[k] + tau * s[k]


@njit(cache=True)
def _all_finite(x):
    for k in range(x.size):
        if not np.isfinite(x[k]):
            return False
    return True


@njit(cache=True)
def ddpg_update(actor, critic, actor_t, critic_t, a_m, a_v, c_m, c_v,
                obs0, actions, rewards, obs1, probe,
                a_sizes, a_ln, a_acts, c_sizes, c_ln, c_acts,
                gamma, tau, b1, b2, a_step, a_eps, c_step, c_eps):
    """One fused minibatch update, in place.

    ``probe`` is the perturbed actor parameter vector used to measure the
    action-space distance. Returns ``(critic_loss, distance, ok)``; ``ok``
    is False (and nothing is updated) if a gradient was non-finite.
    """
    n = obs0.shape[0]
    od = obs0.shape[1]
    ad = actions.shape[1]
    a_cache = forward_cached(actor, obs0, a_sizes, a_ln, a_acts)
    mu = a_cache[0][len(a_sizes) - 1]
    mp = forward(probe, obs0, a_sizes, a_ln, a_acts)
    acc = 0.0
    for r in range(n):
        for c in range(ad):
            d = mu[r, c] - mp[r, c]
            acc += d * d
    dist = np.sqrt(acc / (n * ad))

    x1 = np.empty((n, od + ad))
    x1[:, :od] = obs1
    x1[:, od:] = forward(actor_t, obs1, a_sizes, a_ln, a_acts)
    q1 = forward(critic_t, x1, c_sizes, c_ln, c_acts)

    x0 = np.empty((n, od + ad))
    x0[:, :od] = obs0
    x0[:, od:] = actions
    c_cache = forward_cached(critic, x0, c_sizes, c_ln, c_acts)
    q = c_cache[0][len(c_sizes) - 1]
    gq = np.empty((n, 1))
    loss = 0.0
    for r in range(n):
        err = rewards[r] + gamma * q1[r, 0] - q[r, 0]
        loss += err * err
        gq[r, 0] = (-2.0 / n) * err
    loss /= n
    c_grad, _ = backward(critic, *c_cache, gq, c_sizes, c_ln, c_acts, True)

    x0[:, od:] = mu
    gq[:, 0] = -1.0 / n
    _, _, g_in = forward_backward(critic, x0, gq, c_sizes, c_ln, c_acts, False)
    g_act = np.ascontiguousarray(g_in[:, od:])
    a_grad, _ = backward(actor, *a_cache, g_act, a_sizes, a_ln, a_acts, True)

    if not (_all_finite(c_grad) and _all_finite(a_grad)):
        return loss, dist, False
    _adam(critic, c_grad, c_m, c_v, b1, b2, c_step, c_eps)
    _adam(actor, a_grad, a_m, a_v, b1, b2, a_step, a_eps)
    _soft(critic_t, critic, tau)
    _soft(actor_t, actor, tau)
    return loss, dist, True
