"""Dense feed-forward networks with layer normalization, backprop and Adam.

Everything is float64 numpy. A :class:`DenseNet` keeps its parameters as a
flat list of arrays in declaration order (``W, b, gain, offset`` per hidden
layer, ``W, b`` for the output layer) so that optimizers, soft updates,
parameter-space noise and checkpoints all iterate over the same list.
"""
import json
import struct

import numpy as np

from ._validation import check_finite, check_random_state

LN_EPS = 1e-12

_ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_MAGIC = b"LIVARCH\x00"
CHECKPOINT_VERSION = 1


def layer_norm(z, eps=LN_EPS):
    """Normalize each row of ``z`` to zero mean and unit variance.

    A constant row has zero variance and maps to the zero vector.
    """
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    var = (zc * zc).mean(axis=-1, keepdims=True)
    return zc / np.sqrt(var + eps)


class DenseNet:
    """Multi-layer perceptron with layer norm on every hidden layer.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(24, 64, 64, 11)``.
    hidden_activation : {"relu", "tanh", "identity"}
    output_activation : {"relu", "tanh", "identity"}
    layer_norm : bool
        Apply layer normalization (with learned gain/offset) before the
        activation of each hidden layer.
    final_init : float
        Output layer weights and biases are drawn from
        ``U(-final_init, final_init)``; hidden layers use fan-in scaling.
    random_state : int, Generator or None
    """

    def __init__(self, sizes, hidden_activation="relu", output_activation="identity",
                 layer_norm=True, final_init=3e-3, random_state=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        for act in (hidden_activation, output_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.sizes = sizes
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.layer_norm = bool(layer_norm)
        self.final_init = float(final_init)
        self.params, self.names = self._init_params(check_random_state(random_state))
        self._slices = self._layer_slices()
        self._cache = None

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def architecture(self):
        """JSON-serializable descriptor used to validate checkpoints."""
        return {
            "sizes": list(self.sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "layer_norm": self.layer_norm,
        }

    def _init_params(self, rng):
        chunks, names, shapes = [], [], []
        last = self.n_layers - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = self.final_init if i == last else 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            names.append(f"layers.{i}.weight")
            shapes.append((fan_in, fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
            names.append(f"layers.{i}.bias")
            shapes.append((fan_out,))
            if i != last and self.layer_norm:
                chunks.append(np.ones(fan_out))
                names.append(f"layers.{i}.ln_gain")
                shapes.append((fan_out,))
                chunks.append(np.zeros(fan_out))
                names.append(f"layers.{i}.ln_offset")
                shapes.append((fan_out,))
        self.shapes = shapes
        self.flat = np.concatenate(chunks)
        return self.views(self.flat), names

    def views(self, flat):
        """Split a flat parameter vector into per-array views (no copies)."""
        out, off = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(flat[off:off + size].reshape(shape))
            off += size
        return out

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat.shape:
            raise ValueError(f"expected {self.flat.size} parameters, got {flat.size}")
        self.flat[...] = flat

    def _layer_slices(self):
        # (start index into self.params, has_layer_norm) per layer
        idx, out = 0, []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            ln = self.layer_norm and i != last
            act = self.output_activation if i == last else self.hidden_activation
            out.append((idx, ln, act))
            idx += 4 if ln else 2
        return out

    def forward(self, x, params=None, cache=True, check=True):
        """Evaluate the network on one input vector or a batch of rows.

        ``params`` may be an alternative parameter list of identical shapes
        (used for perturbed copies); such passes are never cached.
        ``check=False`` skips input validation on internal hot paths.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if check:
            if X.ndim != 2 or X.shape[1] != self.input_dim:
                raise ValueError(f"expected input of width {self.input_dim}, got shape {x.shape}")
            check_finite(X, "input")
        if params is not None:
            cache = False
        P = self.params if params is None else params
        acts = [X]
        steps = []
        h = X
        for j, ln, act in self._slices:
            z = h @ P[j]
            z += P[j + 1]
            if ln:
                inv_n = 1.0 / z.shape[1]
                zc = z - np.add.reduce(z, axis=1, keepdims=True) * inv_n
                var = np.add.reduce(zc * zc, axis=1, keepdims=True) * inv_n
                inv_std = 1.0 / np.sqrt(var + LN_EPS)
                xhat = zc * inv_std
                n = xhat * P[j + 2]
                n += P[j + 3]
            else:
                xhat = inv_std = None
                n = z
            if act == "relu":
                h = np.maximum(n, 0.0)
            elif act == "tanh":
                h = np.tanh(n)
            else:
                h = n
            if cache:
                steps.append((xhat, inv_std, n, h))
                acts.append(h)
        if cache:
            self._cache = (acts, steps)
        return h[0] if single else h

    def backward(self, grad_out, param_grads=True):
        """Backpropagate ``dL/d(output)`` through the last cached forward pass.

        Returns
        -------
        grads : list of ndarray or None
            One gradient per parameter, aligned with ``self.params``; None
            when ``param_grads=False``.
        grad_input : ndarray
            ``dL/d(input)``, same shape as the cached input.
        """
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        acts, steps = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"gradient shape {g.shape} does not match output {acts[-1].shape}")
        grads = [None] * len(self.params) if param_grads else None
        P = self.params
        for i in range(self.n_layers - 1, -1, -1):
            j, ln, act = self._slices[i]
            xhat, inv_std, n, h = steps[i]
            if act == "relu":
                g = g * (n > 0.0)
            elif act == "tanh":
                g = g * (1.0 - h * h)
            if ln:
                if param_grads:
                    grads[j + 2] = np.add.reduce(g * xhat, axis=0)
                    grads[j + 3] = np.add.reduce(g, axis=0)
                inv_n = 1.0 / g.shape[1]
                dx = g * P[j + 2]
                t = np.add.reduce(dx * xhat, axis=1, keepdims=True) * inv_n
                dx -= np.add.reduce(dx, axis=1, keepdims=True) * inv_n
                dx -= xhat * t
                g = dx * inv_std
            if param_grads:
                grads[j] = acts[i].T @ g
                grads[j + 1] = np.add.reduce(g, axis=0)
            g = g @ P[j].T
        return grads, (g[0] if single else g)

    def copy(self):
        other = object.__new__(DenseNet)
        other.__dict__.update(self.__dict__)
        other.flat = self.flat.copy()
        other.params = other.views(other.flat)
        other.names = list(self.names)
        other._slices = list(self._slices)
        other._cache = None
        return other

    def flat_grad(self, grads):
        return np.concatenate([g.ravel() for g in grads])

    def perturbed_params(self, sigma, rng):
        """Return perturbed parameter views, ``theta + N(0, sigma^2 I)``."""
        return self.views(self.flat + sigma * rng.standard_normal(self.flat.size))

    def n_params(self):
        return int(self.flat.size)


def numerical_gradient(func, x, h=1e-5):
    """Central finite differences of a scalar ``func`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = func(x)
        x[i] = old - h
        down = func(x)
        x[i] = old
        grad[i] = (up - down) / (2.0 * h)
    return grad


def gradient_relative_error(analytic, numeric):
    """Largest absolute discrepancy relative to the largest gradient entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


class Adam:
    """Adam with bias correction, one moment pair per parameter array."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, names=None):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.names = list(names) if names is not None else [str(i) for i in range(len(params))]

    def step(self, params, grads):
        """Update ``params`` in place and return them."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count does not match optimizer state")
        for name, p, g, m in zip(self.names, params, grads, self.m):
            if p.shape != m.shape or np.shape(g) != m.shape:
                raise ValueError(f"shape mismatch for {name}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        step, eps_hat = self.next_step_size()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step * m / (np.sqrt(v) + eps_hat)
        return params

    def next_step_size(self):
        """Bias-corrected step size and epsilon for update number ``t + 1``."""
        t = self.t + 1
        step = self.learning_rate * np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)
        return step, self.epsilon * np.sqrt(1.0 - self.beta2 ** t)

    def state_arrays(self):
        return [np.array([float(self.t)])] + self.m + self.v

    def load_state_arrays(self, arrays):
        k = len(self.m)
        self.t = int(arrays[0][0])
        self.m = [a.copy() for a in arrays[1:1 + k]]
        self.v = [a.copy() for a in arrays[1 + k:1 + 2 * k]]


def adam_step(params, grads, state):
    """Functional alias for :meth:`Adam.step`."""
    return state.step(params, grads)


def soft_update(target, source, tau):
    """Polyak-average ``source`` into ``target`` in place: t <- tau*s + (1-tau)*t.

    Accepts two :class:`DenseNet` instances or two lists of arrays.
    """
    if isinstance(target, DenseNet) and isinstance(source, DenseNet):
        if target.shapes != source.shapes:
            raise ValueError("soft_update requires identical architectures")
        pairs = [(target.flat, source.flat)]
    else:
        if len(target) != len(source) or any(np.shape(a) != np.shape(b) for a, b in zip(target, source)):
            raise ValueError("soft_update requires identical architectures")
        pairs = list(zip(target, source))
    for t, s in pairs:
        if tau == 1.0:
            t[...] = s
        else:
            t *= 1.0 - tau
            t += tau * s
    return target


# checkpoint container --------------------------------------------------------

def write_checkpoint(path, descriptor, arrays):
    """Write a header + little-endian float64 arrays.

    Layout: magic (8 bytes), version (u16), descriptor length (u32), UTF-8
    JSON descriptor, then every array in order as raw ``<f8`` bytes. The
    descriptor records each array's shape.
    """
    descriptor = dict(descriptor)
    descriptor["shapes"] = [list(np.shape(a)) for a in arrays]
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`; returns ``(descriptor, arrays)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < head + 6:
        raise ValueError(f"{path}: truncated header")
    version, n = struct.unpack("<HI", data[head:head + 6])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = head + 6
    try:
        descriptor = json.loads(data[off:off + n].decode("utf-8"))
        shapes = [tuple(s) for s in descriptor["shapes"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    off += n
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape))
        off = end
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter data")
    return descriptor, arrays
