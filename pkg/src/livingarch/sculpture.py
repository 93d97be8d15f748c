"""Discrete-time model of the 24-node sculpture.

Nodes carry one moth, one LED and six SMA fronds plus a downward-looking IR
proximity sensor. Moth and LED follow ramp-up / hold / ramp-down intensity
envelopes, SMAs fire fixed pulses followed by a cooldown, and IR readings
are distances scaled into [0, 1].
"""
import collections
import dataclasses
import json
import logging
import math

import numpy as np
import yaml

logger = logging.getLogger(__name__)

TICK = 0.1
N_SMA = 6
ACTUATORS = ("moth", "led", "sma")

FAR_CM = 80.0
NEAR_CM = 10.0

SMA_PULSE = 2.0
SMA_COOLDOWN = 10.0


def scale_distance_to_reading(distance_cm):
    """Map a detected distance to an IR reading in [0, 1].

    80 cm or more reads 0, 10 cm or less reads 1, linear in between.
    Accepts scalars or arrays.
    """
    d = np.asarray(distance_cm, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("distance must be positive")
    r = np.clip((FAR_CM - d) / (FAR_CM - NEAR_CM), 0.0, 1.0)
    return float(r) if r.ndim == 0 else r


def raw_to_intensity(raw):
    """Raw command in [-1, 1] to intensity fraction: -1 -> 0/255, 1 -> 255/255."""
    raw = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
    return (raw + 1.0) * 127.5 / 255.0


def led_drive_level(intensity):
    """8-bit PWM level (0..255) for an intensity fraction."""
    return np.rint(np.asarray(intensity, dtype=np.float64) * 255.0).astype(np.int64)


@dataclasses.dataclass(frozen=True)
class ActuatorEnvelope:
    """Piecewise-linear intensity profile of one actuator activation.

    SMA envelopes are fixed pulses (zero ramps, hold = pulse length) and
    carry the cooldown that follows them.
    """
    kind: str
    t_ramp_up: float
    t_hold: float
    t_ramp_down: float
    peak: float
    start_time: float = 0.0
    cooldown: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTUATORS:
            raise ValueError(f"unknown actuator kind {self.kind!r}")
        if min(self.t_ramp_up, self.t_hold, self.t_ramp_down, self.cooldown) < 0:
            raise ValueError("envelope durations must be >= 0")
        if not 0.0 <= self.peak <= 1.0:
            raise ValueError("envelope peak must be in [0, 1]")

    @classmethod
    def sma_pulse(cls, start_time=0.0, pulse=SMA_PULSE, cooldown=SMA_COOLDOWN):
        return cls("sma", 0.0, pulse, 0.0, 1.0, start_time, cooldown)

    @property
    def duration(self):
        return self.t_ramp_up + self.t_hold + self.t_ramp_down

    @property
    def end_time(self):
        return self.start_time + self.duration

    def at(self, start_time):
        return dataclasses.replace(self, start_time=float(start_time))

    def intensity(self, t):
        u = t - self.start_time
        if u < 0.0 or u >= self.duration:
            return 0.0
        if u < self.t_ramp_up:
            return self.peak * u / self.t_ramp_up
        u -= self.t_ramp_up
        if u < self.t_hold:
            return self.peak
        u -= self.t_hold
        return self.peak * (1.0 - u / self.t_ramp_down)


@dataclasses.dataclass(frozen=True)
class IrFrame:
    timestamp: float
    readings: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.readings, dtype=np.float64)
        if r.ndim != 1 or np.any(r < 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
            raise ValueError("IR readings must be a 1-D vector in [0, 1]")
        object.__setattr__(self, "readings", r)

    def to_record(self):
        return {"t": round(float(self.timestamp), 6), "ir": [float(x) for x in self.readings]}


def write_frames_jsonl(frames, fh):
    """Write IR frames as one JSON object per line: ``{"t": ..., "ir": [...]}``."""
    for f in frames:
        fh.write(json.dumps(f.to_record()) + "\n")


def read_frames_jsonl(fh):
    out = []
    for line in fh:
        line = line.strip()
        if line:
            rec = json.loads(line)
            out.append(IrFrame(float(rec["t"]), np.asarray(rec["ir"], dtype=np.float64)))
    return out


class NodeTopology:
    """Node positions, neighbour lists and boundary nodes.

    Parameters
    ----------
    positions : array-like, shape (n_nodes, 2)
        Planar coordinates in metres; x runs along the long axis.
    adjacency : list of list of int
    edge_nodes : iterable of int
    heights : array-like, shape (n_nodes,), optional
        Sensor heights above the floor in metres.
    """

    def __init__(self, positions, adjacency, edge_nodes, heights=None):
        self.positions = np.asarray(positions, dtype=np.float64)
        n = len(self.positions)
        if self.positions.shape != (n, 2):
            raise ValueError("positions must have shape (n_nodes, 2)")
        self.adjacency = [sorted(set(int(j) for j in nb)) for nb in adjacency]
        self.edge_nodes = frozenset(int(e) for e in edge_nodes)
        self.heights = np.full(n, 2.4) if heights is None else np.asarray(heights, dtype=np.float64)
        self._validate()

    @property
    def node_count(self):
        return len(self.positions)

    def _validate(self):
        n = self.node_count
        if len(self.adjacency) != n or self.heights.shape != (n,):
            raise ValueError("adjacency and heights must have one entry per node")
        for i, nb in enumerate(self.adjacency):
            for j in nb:
                if not 0 <= j < n or j == i:
                    raise ValueError(f"invalid neighbour {j} of node {i}")
                if i not in self.adjacency[j]:
                    raise ValueError(f"adjacency not symmetric between {i} and {j}")
        if not self.edge_nodes or not self.edge_nodes <= set(range(n)):
            raise ValueError("edge_nodes must be a non-empty subset of the nodes")
        if n and min(self.distances(0)) < 0:
            raise ValueError("topology graph is not connected")

    @classmethod
    def grid(cls, rows=4, cols=6, spacing=1.0, height=2.4, edge_height=2.55):
        """Rectangular grid with 4-neighbour adjacency; ids are row-major.

        Columns (along x) form the long axis; the outer columns hang a little
        higher than the middle.
        """
        positions, adjacency, edges, heights = [], [], set(), []
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                positions.append((c * spacing, r * spacing))
                nb = []
                if r > 0:
                    nb.append(i - cols)
                if r < rows - 1:
                    nb.append(i + cols)
                if c > 0:
                    nb.append(i - 1)
                if c < cols - 1:
                    nb.append(i + 1)
                adjacency.append(nb)
                if r in (0, rows - 1) or c in (0, cols - 1):
                    edges.add(i)
                heights.append(edge_height if c in (0, cols - 1) else height)
        return cls(positions, adjacency, edges, heights)

    @classmethod
    def from_yaml(cls, path):
        """Load a topology file.

        Either ``{grid: {rows, cols, spacing_m, height_m, edge_height_m}}`` or
        explicit ``{positions_m, adjacency, edge_nodes, heights_m}``.
        """
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if "grid" in data:
            g = dict(data["grid"])
            unknown = set(g) - {"rows", "cols", "spacing_m", "height_m", "edge_height_m"}
            if unknown or set(data) != {"grid"}:
                raise ValueError(f"unknown topology keys: {sorted(unknown | (set(data) - {'grid'}))}")
            return cls.grid(rows=g.get("rows", 4), cols=g.get("cols", 6), spacing=g.get("spacing_m", 1.0),
                            height=g.get("height_m", 2.4), edge_height=g.get("edge_height_m", 2.55))
        unknown = set(data) - {"positions_m", "adjacency", "edge_nodes", "heights_m"}
        if unknown:
            raise ValueError(f"unknown topology keys: {sorted(unknown)}")
        return cls(data["positions_m"], data["adjacency"], data["edge_nodes"], data.get("heights_m"))

    def distances(self, source):
        """Breadth-first hop counts from ``source`` (-1 for unreachable)."""
        dist = [-1] * self.node_count
        dist[source] = 0
        queue = collections.deque([source])
        while queue:
            i = queue.popleft()
            for j in self.adjacency[i]:
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    def columns(self):
        """Node ids grouped by x coordinate, ordered along the long axis."""
        xs = np.round(self.positions[:, 0], 9)
        return [sorted(np.flatnonzero(xs == x).tolist()) for x in np.unique(xs)]

    def fingerprint(self):
        return {"node_count": self.node_count, "positions": self.positions.round(9).tolist(),
                "adjacency": self.adjacency}


class Sculpture:
    """Mutable sculpture state advanced in fixed ticks.

    Holds at most one live envelope per moth/LED and per SMA; a moth or LED
    that is still inside its envelope ignores new activations, and an SMA in
    cooldown skips activations (both are counted in ``skipped``).
    """

    def __init__(self, topology=None, tick=TICK, sensor_half_angle_deg=30.0,
                 sma_pulse=SMA_PULSE, sma_cooldown=SMA_COOLDOWN):
        self.topology = topology or NodeTopology.grid()
        self.tick = float(tick)
        self.sensor_half_angle = math.radians(sensor_half_angle_deg)
        self.sma_pulse = float(sma_pulse)
        self.sma_cooldown = float(sma_cooldown)
        n = self.topology.node_count
        self.sim_time = 0.0
        self._steps = 0
        self.envelopes = {}
        self.sma_cooldown_until = np.full((n, N_SMA), -np.inf)
        self.direct = {"moth": np.full(n, np.nan), "led": np.full(n, np.nan)}
        self.visitors = []
        self.skipped = collections.Counter()
        self.clip_warnings = 0
        self.moth = np.zeros(n)
        self.led = np.zeros(n)
        self.sma = np.zeros((n, N_SMA))

    @property
    def node_count(self):
        return self.topology.node_count

    @property
    def raw_actuator_count(self):
        return self.node_count * (2 + N_SMA)

    def _check_node(self, node_id):
        if not 0 <= int(node_id) < self.node_count:
            raise IndexError(f"node id {node_id} out of range [0, {self.node_count - 1}]")

    def activate(self, node_id, actuator, envelope=None, index=0):
        """Register an envelope; returns False if the activation was skipped."""
        self._check_node(node_id)
        if actuator not in ACTUATORS:
            raise ValueError(f"unknown actuator {actuator!r}")
        if actuator == "sma":
            if not 0 <= index < N_SMA:
                raise IndexError(f"SMA index {index} out of range")
            if envelope is None:
                envelope = ActuatorEnvelope.sma_pulse(self.sim_time, self.sma_pulse, self.sma_cooldown)
            start = envelope.start_time
            if start < self.sma_cooldown_until[node_id, index]:
                self.skipped["sma"] += 1
                logger.debug("SMA %d/%d in cooldown until %.2f, skipped at %.2f",
                             node_id, index, self.sma_cooldown_until[node_id, index], start)
                return False
            self.sma_cooldown_until[node_id, index] = start + envelope.duration + envelope.cooldown
        else:
            if envelope is None:
                raise ValueError(f"{actuator} activation needs an envelope")
            current = self.envelopes.get((node_id, actuator, 0))
            if current is not None and envelope.start_time < current.end_time:
                self.skipped[actuator] += 1
                return False
            self.direct[actuator][node_id] = np.nan
            index = 0
        self.envelopes[(int(node_id), actuator, int(index))] = envelope
        self._recompute()
        return True

    def step(self, dt=None):
        """Advance time by ``dt`` (one tick by default) and refresh intensities."""
        dt = self.tick if dt is None else float(dt)
        n = round(dt / self.tick)
        if n < 0 or abs(dt / self.tick - n) > 1e-9:
            raise ValueError(f"dt must be a non-negative multiple of the tick ({self.tick} s)")
        # integer tick counter keeps sim_time free of accumulated rounding
        self._steps += n
        self.sim_time = round(self._steps * self.tick, 9)
        self.envelopes = {k: e for k, e in self.envelopes.items() if e.end_time > self.sim_time}
        self._recompute()
        return self

    def _recompute(self):
        t = self.sim_time
        n = self.node_count
        moth, led, sma = np.zeros(n), np.zeros(n), np.zeros((n, N_SMA))
        for (node, kind, idx), env in self.envelopes.items():
            v = env.intensity(t)
            if kind == "moth":
                moth[node] = v
            elif kind == "led":
                led[node] = v
            else:
                sma[node, idx] = v
        for kind, arr in (("moth", moth), ("led", led)):
            d = self.direct[kind]
            mask = ~np.isnan(d)
            arr[mask] = d[mask]
        self.moth, self.led, self.sma = moth, led, sma

    def intensity(self, node_id, actuator, index=0):
        self._check_node(node_id)
        if actuator == "sma":
            return float(self.sma[node_id, index])
        return float(getattr(self, actuator)[node_id])

    def apply_raw_action(self, raw):
        """Drive all 192 actuators directly from a vector in [-1, 1].

        Layout: 24 moths, 24 LEDs, then 24 x 6 SMAs (node-major). Values
        outside [-1, 1] are clipped and counted in ``clip_warnings``.
        """
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (self.raw_actuator_count,):
            raise ValueError(f"expected {self.raw_actuator_count} raw commands, got shape {raw.shape}")
        out_of_range = int(np.sum((raw < -1.0) | (raw > 1.0)))
        if out_of_range:
            self.clip_warnings += out_of_range
            logger.warning("%d raw commands outside [-1, 1] clipped", out_of_range)
        raw = np.clip(raw, -1.0, 1.0)
        n = self.node_count
        for k, kind in enumerate(("moth", "led")):
            self.direct[kind] = raw_to_intensity(raw[k * n:(k + 1) * n])
            for node in range(n):
                self.envelopes.pop((node, kind, 0), None)
        on = raw[2 * n:].reshape(n, N_SMA) >= 0.0
        for node, idx in zip(*np.nonzero(on)):
            if (int(node), "sma", int(idx)) not in self.envelopes:
                self.activate(int(node), "sma", index=int(idx))
        self._recompute()
        return self

    def read_ir_frame(self, visitors=None):
        """IR frame at the current time from the nearest visitor point per sensor.

        Each sensor sees a vertical cone; a visitor contributes the distance
        from the top of their reach to the sensor when inside the cone.
        """
        visitors = self.visitors if visitors is None else visitors
        n = self.node_count
        readings = np.zeros(n)
        if visitors:
            pos = np.array([v.position for v in visitors], dtype=np.float64).reshape(-1, 2)
            top = np.array([v.reach_height for v in visitors], dtype=np.float64)
            planar = np.linalg.norm(self.topology.positions[:, None, :] - pos[None, :, :], axis=2)
            vertical = np.maximum(self.topology.heights[:, None] - top[None, :], 0.0)
            in_cone = planar <= np.tan(self.sensor_half_angle) * vertical + 1e-12
            dist_cm = np.maximum(np.hypot(planar, vertical) * 100.0, 1e-6)
            r = np.where(in_cone, scale_distance_to_reading(dist_cm), 0.0)
            readings = r.max(axis=1)
        return IrFrame(self.sim_time, readings)
