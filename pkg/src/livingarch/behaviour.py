"""Pre-scripted behaviour engine and its 17-parameter vector.

The engine turns IR triggers into timed actuator activations: a local
reflex at the triggered node, a cascade to every other node delayed by the
graph distance, background activity after a quiet period, and periodic LED
sweeps along the long axis.
"""
import dataclasses
import heapq
import itertools
import json
import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from ._validation import check_random_state
from .sculpture import N_SMA, TICK, ActuatorEnvelope

logger = logging.getLogger(__name__)

PARAM_FIELDS = (
    "t_ru_m", "t_ho_m", "t_rd_m", "t_ru_l", "t_ho_l", "t_rd_l", "i_max",
    "t_gap_m", "t_gap_sma", "t_gap_n", "t_bg_min", "t_bg_max", "t_w", "p",
    "t_sma", "t_sw_min", "t_sw_max",
)

DEFAULTS = dict(zip(PARAM_FIELDS, (
    1.5, 1.0, 2.5, 1.5, 1.0, 2.5, 78.0, 1.5, 0.3, 1.8, 45.0, 90.0, 5.0, 0.4, 0.7, 120.0, 240.0)))

RANGES = {
    "t_ru_m": (0.0, 5.0), "t_ho_m": (0.0, 5.0), "t_rd_m": (0.0, 5.0),
    "t_ru_l": (0.0, 5.0), "t_ho_l": (0.0, 5.0), "t_rd_l": (0.0, 5.0),
    "i_max": (0.0, 100.0),
    "t_gap_m": (0.0, 5.0), "t_gap_sma": (0.0, 5.0), "t_gap_n": (0.0, 5.0),
    "t_bg_min": (15.0, 60.0), "t_bg_max": (60.0, 100.0),
    "t_w": (0.0, 10.0), "p": (0.0, 1.0),
    "t_sma": (1.0, 5.0),
    "t_sw_min": (5.0, 200.0), "t_sw_max": (200.0, 400.0),
}

# fields held at their defaults when the learner sets parameters
EXCLUDED_FIELDS = ("t_bg_min", "t_bg_max", "t_w", "p", "t_sw_min", "t_sw_max")
ACTION_FIELDS = tuple(f for f in PARAM_FIELDS if f not in EXCLUDED_FIELDS)

IR_TRIGGER_THRESHOLD = 0.0625
IR_REFRACTORY = 2.0


def _allowed(name):
    # the default of t_sma (0.7) sits below its printed range; accept both
    lo, hi = RANGES[name]
    return min(lo, DEFAULTS[name]), max(hi, DEFAULTS[name])


@dataclasses.dataclass(frozen=True)
class ParamVector:
    """All 17 behaviour parameters (seconds, percent for i_max, probability p)."""
    t_ru_m: float = DEFAULTS["t_ru_m"]
    t_ho_m: float = DEFAULTS["t_ho_m"]
    t_rd_m: float = DEFAULTS["t_rd_m"]
    t_ru_l: float = DEFAULTS["t_ru_l"]
    t_ho_l: float = DEFAULTS["t_ho_l"]
    t_rd_l: float = DEFAULTS["t_rd_l"]
    i_max: float = DEFAULTS["i_max"]
    t_gap_m: float = DEFAULTS["t_gap_m"]
    t_gap_sma: float = DEFAULTS["t_gap_sma"]
    t_gap_n: float = DEFAULTS["t_gap_n"]
    t_bg_min: float = DEFAULTS["t_bg_min"]
    t_bg_max: float = DEFAULTS["t_bg_max"]
    t_w: float = DEFAULTS["t_w"]
    p: float = DEFAULTS["p"]
    t_sma: float = DEFAULTS["t_sma"]
    t_sw_min: float = DEFAULTS["t_sw_min"]
    t_sw_max: float = DEFAULTS["t_sw_max"]

    def __post_init__(self):
        for name in PARAM_FIELDS:
            v = getattr(self, name)
            lo, hi = _allowed(name)
            if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite number")
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ValueError(f"{name}={v} outside its range [{lo}, {hi}]")
            object.__setattr__(self, name, float(v))
        if self.t_bg_min > self.t_bg_max:
            raise ValueError("t_bg_min must not exceed t_bg_max")
        if self.t_sw_min > self.t_sw_max:
            raise ValueError("t_sw_min must not exceed t_sw_max")

    def as_array(self, fields=PARAM_FIELDS):
        return np.array([getattr(self, f) for f in fields])

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def random(cls, rng):
        """Uniform draw inside the ranges (orderings of min/max respected)."""
        vals = {name: rng.uniform(*RANGES[name]) for name in PARAM_FIELDS}
        return cls(**vals)

    def moth_envelope(self, start):
        return ActuatorEnvelope("moth", self.t_ru_m, self.t_ho_m, self.t_rd_m, self.i_max / 100.0, start)

    def led_envelope(self, start):
        return ActuatorEnvelope("led", self.t_ru_l, self.t_ho_l, self.t_rd_l, self.i_max / 100.0, start)


def default_params():
    return ParamVector()


# action scaling ------------------------------------------------------------

_LO = np.array([RANGES[f][0] for f in ACTION_FIELDS])
_HI = np.array([RANGES[f][1] for f in ACTION_FIELDS])


class ActionScaler(TransformerMixin, BaseEstimator):
    """Affine map between normalized actions in [-1, 1] and parameter ranges.

    -1 maps to the range minimum and +1 to the maximum of each of the
    learnable parameters. Stateless; ``fit`` only validates the width.
    """

    def __init__(self, clip=True):
        self.clip = clip

    def fit(self, X=None, y=None):
        if X is not None:
            check_array(X)
        self.n_features_in_ = len(ACTION_FIELDS)
        return self

    def transform(self, X):
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        if X.shape[-1] != len(ACTION_FIELDS):
            raise ValueError(f"expected {len(ACTION_FIELDS)} action dimensions, got {X.shape[-1]}")
        if self.clip:
            X = np.clip(X, -1.0, 1.0)
        return _LO + (X + 1.0) * 0.5 * (_HI - _LO)

    def inverse_transform(self, X):
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        if X.shape[-1] != len(ACTION_FIELDS):
            raise ValueError(f"expected {len(ACTION_FIELDS)} parameter values, got {X.shape[-1]}")
        return 2.0 * (X - _LO) / (_HI - _LO) - 1.0

    def get_feature_names_out(self, input_features=None):
        return np.array(ACTION_FIELDS, dtype=object)


def scale_action(action, base=None):
    """Normalized 11-dim action to a full ParamVector.

    Non-learnable fields are taken from ``base`` (defaults if None).
    """
    phys = ActionScaler().transform(np.asarray(action, dtype=np.float64).reshape(1, -1))[0]
    base = base or ParamVector()
    # clamp rounding at the range ends
    vals = {f: float(np.clip(v, *RANGES[f])) for f, v in zip(ACTION_FIELDS, phys)}
    return base.replace(**vals)


def normalize_params(params):
    """Inverse of :func:`scale_action` for the learnable fields."""
    return ActionScaler().inverse_transform(params.as_array(ACTION_FIELDS).reshape(1, -1))[0]


# engine --------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Activation:
    """One scheduled actuator activation."""
    time: float
    node: int
    actuator: str
    index: int
    envelope: ActuatorEnvelope
    cause: str
    cascade: int = -1

    def to_record(self, event="start"):
        return {"t": round(self.time, 6), "node": self.node, "actuator": self.actuator,
                "index": self.index, "event": event, "cause": self.cause}


def local_reflex(params, node_id, now, cause="reflex", cascade=-1, sma_pulse=None):
    """Moth now, LED after ``t_gap_m``, the six SMAs ``t_gap_sma`` apart from now."""
    acts = [Activation(now, node_id, "moth", 0, params.moth_envelope(now), cause, cascade),
            Activation(now + params.t_gap_m, node_id, "led", 0, params.led_envelope(now + params.t_gap_m),
                       cause, cascade)]
    for k in range(N_SMA):
        t = now + k * params.t_gap_sma
        env = ActuatorEnvelope.sma_pulse(t) if sma_pulse is None else ActuatorEnvelope.sma_pulse(t, *sma_pulse)
        acts.append(Activation(t, node_id, "sma", k, env, cause, cascade))
    return acts


class PbState:
    """Mutable engine state: mode, deadlines, the pending activation queue,
    trigger bookkeeping and the seeded generator."""

    def __init__(self, n_nodes, params, now=0.0, random_state=None):
        self.rng = check_random_state(random_state)
        self.mode = "active"
        self.background_deadline = now + self.rng.uniform(params.t_bg_min, params.t_bg_max)
        self.sweep_deadline = now + self.rng.uniform(params.t_sw_min, params.t_sw_max)
        self.next_w = math.inf
        self.next_sma = math.inf
        self.pending = []
        self._seq = itertools.count()
        self.cascades = 0
        self.prev_above = np.zeros(n_nodes, dtype=bool)
        self.last_trigger = np.full(n_nodes, -math.inf)

    def push(self, activation):
        heapq.heappush(self.pending, (activation.time, next(self._seq), activation))

    def pop_due(self, now, eps=1e-9):
        out = []
        while self.pending and self.pending[0][0] <= now + eps:
            out.append(heapq.heappop(self.pending)[2])
        return out


class PrescriptedBehaviour:
    """The architects' behaviour state machine over a node topology.

    Parameters
    ----------
    topology : NodeTopology
    params : ParamVector, optional
    tick : float
    random_state : int, Generator or None
    trigger_threshold : float
        Scaled IR reading at or above which a sensor triggers (rising edge).
    refractory : float
        Seconds before the same sensor may trigger again.
    """

    def __init__(self, topology, params=None, tick=TICK, random_state=None,
                 trigger_threshold=IR_TRIGGER_THRESHOLD, refractory=IR_REFRACTORY, now=0.0):
        self.topology = topology
        self.params = params or ParamVector()
        self.tick = float(tick)
        self.trigger_threshold = trigger_threshold
        self.refractory = refractory
        self.state = PbState(topology.node_count, self.params, now, random_state)
        self._dist = [topology.distances(i) for i in range(topology.node_count)]
        self._columns = topology.columns()
        self.log = []

    @property
    def mode(self):
        return self.state.mode

    def set_params(self, params):
        """New parameters apply to activations scheduled from now on."""
        self.params = params

    def on_ir_trigger(self, node_id, now):
        """Enter the active state and launch a cascade from ``node_id``."""
        if not 0 <= node_id < self.topology.node_count:
            raise IndexError(f"node id {node_id} out of range")
        st, p = self.state, self.params
        st.mode = "active"
        st.next_w = st.next_sma = math.inf
        cid = st.cascades
        st.cascades += 1
        for node, d in enumerate(self._dist[node_id]):
            if d < 0:
                continue
            cause = "reflex" if d == 0 else "cascade"
            for act in local_reflex(p, node, now + d * p.t_gap_n, cause, cid):
                st.push(act)
        st.background_deadline = now + st.rng.uniform(p.t_bg_min, p.t_bg_max)
        self.log.append({"t": round(now, 6), "node": node_id, "actuator": "ir", "event": "trigger",
                         "cause": "ir"})
        return st

    def sweep(self, direction, now):
        """LED activations column by column along the long axis."""
        cols = self._columns if direction == "left_to_right" else self._columns[::-1]
        if direction not in ("left_to_right", "right_to_left"):
            raise ValueError(f"unknown sweep direction {direction!r}")
        acts = []
        for k, col in enumerate(cols):
            t = now + k * self.params.t_gap_n
            for node in col:
                acts.append(Activation(t, node, "led", 0, self.params.led_envelope(t), "sweep"))
        return acts

    def detect_triggers(self, readings, now):
        st = self.state
        above = np.asarray(readings) >= self.trigger_threshold
        rising = above & ~st.prev_above & (now - st.last_trigger >= self.refractory - 1e-9)
        st.prev_above = above
        nodes = np.flatnonzero(rising).tolist()
        st.last_trigger[nodes] = now
        return nodes

    def tick_update(self, ir_frame, now):
        """Advance the engine to ``now``; return the activations due this tick."""
        st, p = self.state, self.params
        readings = getattr(ir_frame, "readings", ir_frame)
        if readings is not None:
            for node in self.detect_triggers(readings, now):
                self.on_ir_trigger(node, now)
        if st.mode == "active" and now >= st.background_deadline - 1e-9:
            st.mode = "background"
            st.next_w = now + max(p.t_w, self.tick)
            st.next_sma = now + max(p.t_sma, self.tick)
            self.log.append({"t": round(now, 6), "node": -1, "actuator": "engine", "event": "background",
                             "cause": "quiet"})
        if st.mode == "background":
            while st.next_w <= now + 1e-9:
                t = st.next_w
                for node in range(self.topology.node_count):
                    if st.rng.random() < p.p:
                        st.push(Activation(t, node, "moth", 0, p.moth_envelope(t), "background"))
                    if st.rng.random() < p.p:
                        st.push(Activation(t, node, "led", 0, p.led_envelope(t), "background"))
                st.next_w = t + max(p.t_w, self.tick)
            while st.next_sma <= now + 1e-9:
                t = st.next_sma
                for node in range(self.topology.node_count):
                    for k in range(N_SMA):
                        if st.rng.random() < p.p:
                            st.push(Activation(t, node, "sma", k, ActuatorEnvelope.sma_pulse(t), "background"))
                st.next_sma = t + max(p.t_sma, self.tick)
        if now >= st.sweep_deadline - 1e-9:
            direction = "left_to_right" if st.rng.random() < 0.5 else "right_to_left"
            for act in self.sweep(direction, st.sweep_deadline):
                st.push(act)
            st.sweep_deadline = now + st.rng.uniform(p.t_sw_min, p.t_sw_max)
        return st.pop_due(now)


def tick(engine, ir_frame, now):
    """Functional alias of :meth:`PrescriptedBehaviour.tick_update`."""
    return engine.tick_update(ir_frame, now)


def write_activation_log(records, fh):
    for rec in records:
        fh.write(json.dumps(rec) + "\n")
