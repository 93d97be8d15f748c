"""Independent brute-force reference implementations used by the tests."""
import itertools
import math


def engagement_loop(window):
    total = 0.0
    count = 0
    for frame in window:
        for value in frame:
            total += float(value)
            count += 1
    return total / count


def active_count_loop(window, sample_rate=10.0, threshold=0.25):
    hits = 0
    for frame in window:
        for value in frame:
            if value >= threshold:
                hits += 1
    return hits / sample_rate


def u_statistic(a, b):
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def permutation_p(a, b):
    """Two-sided p over every relabelling of the pooled sample."""
    pooled = list(a) + list(b)
    n, m = len(a), len(b)
    dev_obs = abs(u_statistic(a, b) - n * m / 2.0)
    hits = 0
    total = 0
    for idx in itertools.combinations(range(n + m), n):
        chosen = set(idx)
        aa = [pooled[i] for i in idx]
        bb = [pooled[i] for i in range(n + m) if i not in chosen]
        if abs(u_statistic(aa, bb) - n * m / 2.0) >= dev_obs - 1e-9:
            hits += 1
        total += 1
    assert total == math.comb(n + m, n)
    return hits / total


KINK_MARGIN = 1e-3


def gradient_check_sample(seed, h=1e-5):
    """Relative error of the joint parameter and input gradient for one random net.

    Loss is ``sum(C * Y) + |Y|^2 / 2``. Inputs whose relu pre-activations
    fall within ``KINK_MARGIN`` of zero are redrawn, because central
    differences straddling the kink do not estimate a derivative.
    """
    import numpy as np

    from livingarch import _kernels
    from livingarch.nn import DenseNet, gradient_relative_error, numerical_gradient

    rng = np.random.default_rng(seed)
    hidden = ("relu", "tanh")[seed % 2]
    out = ("tanh", "identity", "relu")[seed % 3]
    sizes = tuple(int(v) for v in rng.integers(2, 7, size=4))
    net = DenseNet(sizes, hidden, out, layer_norm=seed % 4 != 3, final_init=0.5, random_state=seed)
    arch = _kernels.arch_arrays(net)
    while True:
        X = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        _, pre, _, _ = _kernels.forward_cached(net.flat, X, *arch)
        relu = [n for n, act in zip(pre, arch[2]) if act == _kernels.RELU]
        if all(np.abs(n).min() > KINK_MARGIN for n in relu):
            break
    C = rng.normal(size=(len(X), sizes[-1]))

    def loss(Y):
        return float(np.sum(C * Y) + 0.5 * np.sum(Y * Y))

    Y = net.forward(X)
    grads, g_in = net.backward(C + Y)
    num = numerical_gradient(lambda flat: loss(net.forward(X, params=net.views(flat), check=False)), net.flat, h)
    num_in = numerical_gradient(lambda x: loss(net.forward(x.reshape(X.shape), cache=False)), X.ravel(), h)
    # one relative error over the joint gradient; a layer norm over two units
    # makes the input gradient vanish, which no per-part ratio can score
    return gradient_relative_error(np.r_[net.flat_grad(grads), g_in.ravel()], np.r_[num, num_in])
