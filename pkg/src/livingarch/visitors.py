"""Visitor models: the brightest-LED-seeking simplified environment, its
brute-force oracle, and seeded visitor scenarios for the full sculpture."""
import dataclasses
import functools
import itertools
import logging

import numpy as np
import yaml

from ._validation import check_random_state
from .sculpture import IrFrame, led_drive_level, raw_to_intensity

logger = logging.getLogger(__name__)

# reading as a function of |cell distance| to the nearest visitor
DEFAULT_KERNEL = (1.0, 0.5)

BEHAVIOURS = ("wanderer", "hand_raiser", "brightest_led_seeker")

ORACLE_MAX_CELLS = 24
ORACLE_MAX_VISITORS = 4


def kernel_readings(positions, n_cells, kernel=DEFAULT_KERNEL):
    """IR reading per cell given integer visitor positions on a line."""
    readings = np.zeros(n_cells)
    if len(positions) == 0:
        return readings
    cells = np.arange(n_cells)
    dist = np.min(np.abs(cells[:, None] - np.asarray(positions)[None, :]), axis=1)
    inside = dist < len(kernel)
    readings[inside] = np.asarray(kernel)[dist[inside]]
    return readings


def nearest_target(pos, targets):
    """Nearest cell in sorted ``targets``; ties go to the lower index."""
    best = targets[0]
    for t in targets[1:]:
        if abs(t - pos) < abs(best - pos):
            best = t
    return best


class SimplifiedEnv:
    """Line of K LEDs with IR sensors; visitors walk toward the brightest LED.

    Each step the K raw LED commands in [-1, 1] are mapped to intensities,
    every visitor moves one cell toward the nearest LED sharing the maximal
    8-bit drive level (ties between equally near LEDs go to the lower
    index), and the sensor under cell ``c`` reads ``kernel[d]`` where ``d``
    is the distance to the nearest visitor (0 beyond the kernel).

    Parameters
    ----------
    n_cells : int
    n_visitors : int
    kernel : sequence of float
    start_positions : sequence of int or None
        Fixed visitor start cells; None draws distinct cells at random on
        every :meth:`reset`.
    brightness_tolerance : int
        LEDs within this many 8-bit drive levels of the brightest one are
        perceived as equally bright.
    random_state : int, Generator or None
    """

    def __init__(self, n_cells=24, n_visitors=2, kernel=DEFAULT_KERNEL,
                 start_positions=None, brightness_tolerance=0, random_state=None):
        if n_cells < 1 or n_visitors < 0:
            raise ValueError("n_cells must be >= 1 and n_visitors >= 0")
        if start_positions is not None and len(start_positions) != n_visitors:
            raise ValueError("start_positions length must equal n_visitors")
        self.n_cells = int(n_cells)
        self.n_visitors = int(n_visitors)
        self.kernel = tuple(float(k) for k in kernel)
        self.start_positions = None if start_positions is None else [int(p) for p in start_positions]
        self.brightness_tolerance = int(brightness_tolerance)
        self.rng = check_random_state(random_state)
        self.positions = []
        self.led_intensity = np.zeros(self.n_cells)
        self.t = 0
        self.reset()

    @property
    def observation_dim(self):
        return self.n_cells

    @property
    def action_dim(self):
        return self.n_cells

    def reset(self):
        if self.start_positions is not None:
            self.positions = list(self.start_positions)
        elif self.n_visitors:
            self.positions = sorted(int(p) for p in self.rng.choice(self.n_cells, self.n_visitors, replace=False))
        else:
            self.positions = []
        for p in self.positions:
            if not 0 <= p < self.n_cells:
                raise ValueError(f"visitor position {p} outside [0, {self.n_cells - 1}]")
        self.led_intensity = np.zeros(self.n_cells)
        self.t = 0
        return self.readings()

    def readings(self):
        return kernel_readings(self.positions, self.n_cells, self.kernel)

    def step(self, raw_action):
        """Apply LED commands; return ``(observation, reward, info)``."""
        raw = np.asarray(raw_action, dtype=np.float64)
        if raw.shape != (self.n_cells,):
            raise ValueError(f"expected {self.n_cells} LED commands, got shape {raw.shape}")
        self.led_intensity = raw_to_intensity(raw)
        level = led_drive_level(self.led_intensity)
        targets = np.flatnonzero(level >= level.max() - self.brightness_tolerance).tolist()
        moved = []
        for p in self.positions:
            goal = nearest_target(p, targets)
            moved.append(p + int(np.sign(goal - p)))
        self.positions = moved
        self.t += 1
        obs = self.readings()
        return obs, float(obs.sum()), {"positions": list(moved), "t": self.t}

    def frame(self, dt=0.1):
        return IrFrame(timestamp=self.t * dt, readings=self.readings())


def step_simplified(env, raw_action):
    """Functional form of :meth:`SimplifiedEnv.step`: ``(env, IrFrame, reward)``."""
    obs, reward, _ = env.step(raw_action)
    return env, env.frame(), reward


@functools.lru_cache(maxsize=8)
def _move_tables(n_cells, n_visitors):
    """Distinct one-step cell maps ``p -> p + sign(nearest(p, T) - p)``.

    Target sets of at most ``n_visitors`` cells suffice: keeping only each
    visitor's nearest target changes no visitor's move (ties included).
    """
    cells = np.arange(n_cells)
    tables = []
    for size in range(1, min(n_visitors, n_cells) + 1):
        T = np.array(list(itertools.combinations(range(n_cells), size)))
        dist = np.abs(cells[None, :, None] - T[:, None, :])
        # argmin takes the first minimum, i.e. the lower index on ties
        goal = np.take_along_axis(T[:, None, :], dist.argmin(axis=2)[:, :, None], axis=2)[:, :, 0]
        tables.append(cells[None, :] + np.sign(goal - cells[None, :]))
    return np.unique(np.concatenate(tables), axis=0)


def reachable_configurations(starts, n_cells, chunk=256, stop=None):
    """All visitor configurations (sorted tuples) reachable from ``starts``
    under some sequence of LED patterns, by breadth-first search.

    ``stop`` is an optional predicate on a configuration; the search ends
    as soon as one satisfying it is found.
    """
    v = len(starts)
    tables = _move_tables(n_cells, v)
    weights = n_cells ** np.arange(v)
    seen = {tuple(sorted(starts))}
    frontier = np.array([sorted(starts)])
    while len(frontier):
        new = []
        for i in range(0, len(frontier), chunk):
            nxt = np.sort(tables[:, frontier[i:i + chunk]], axis=2).reshape(-1, v)
            for code in np.unique(nxt @ weights):
                state = tuple(int(code // n_cells ** j % n_cells) for j in range(v))
                if state not in seen:
                    seen.add(state)
                    new.append(state)
                    if stop is not None and stop(state):
                        return seen
        frontier = np.array(new, dtype=np.int64).reshape(-1, v)
    return seen


def oracle_reward(env, positions=None):
    """Best steady-state per-step reward reachable from the current positions.

    Every configuration is an equilibrium of the stationary pattern that
    lights exactly its occupied cells, so the steady-state optimum is the
    best kernel-sum reward over the configurations reachable from the
    start (found by breadth-first search over LED target sets).
    """
    starts = list(env.positions if positions is None else positions)
    k, v = env.n_cells, len(starts)
    if k > ORACLE_MAX_CELLS or v > ORACLE_MAX_VISITORS:
        raise ValueError(f"oracle brute force limited to K <= {ORACLE_MAX_CELLS}, V <= {ORACLE_MAX_VISITORS}")
    if v == 0:
        return 0.0
    score = lambda c: float(kernel_readings(c, k, env.kernel).sum())
    # merged visitors never separate, so the distinct start cells bound the optimum
    groups = len(set(starts))
    bound = max(score(c) for c in itertools.combinations(range(k), groups))
    best = score(starts)
    if best < bound:
        found = reachable_configurations(starts, k, stop=lambda c: score(c) >= bound)
        best = max(score(c) for c in found)
    return best


# scenarios for the full sculpture -------------------------------------------

@dataclasses.dataclass
class Arrival:
    time: float
    dwell: float
    behaviour: str = "wanderer"

    def __post_init__(self):
        if self.behaviour not in BEHAVIOURS:
            raise ValueError(f"unknown visitor behaviour {self.behaviour!r}")
        if self.dwell < 0:
            raise ValueError("dwell must be >= 0")


@dataclasses.dataclass
class Visitor:
    """A visitor standing under the sculpture.

    ``position`` is planar (metres) and ``reach_height`` the height of the
    highest body point above the floor.
    """
    vid: int
    behaviour: str
    position: np.ndarray
    arrive: float
    depart: float
    height: float = 1.7
    reach_height: float = 1.7
    rng: np.random.Generator = dataclasses.field(default=None, repr=False)


@dataclasses.dataclass
class VisitorScenario:
    """Arrival schedule plus seed; the same seed always yields the same crowd."""
    arrivals: list
    seed: int = 0

    def __post_init__(self):
        self.arrivals = sorted(
            (a if isinstance(a, Arrival) else Arrival(**a) for a in self.arrivals),
            key=lambda a: a.time)

    @classmethod
    def poisson(cls, duration, rate_per_min=1.0, mean_dwell=120.0, behaviours=None, seed=0):
        """Random schedule with Poisson arrivals and exponential dwell times."""
        rng = np.random.default_rng(seed)
        behaviours = behaviours or {"wanderer": 0.5, "hand_raiser": 0.3, "brightest_led_seeker": 0.2}
        names = list(behaviours)
        probs = np.array([behaviours[n] for n in names], dtype=float)
        probs /= probs.sum()
        t, arrivals = 0.0, []
        while True:
            t += rng.exponential(60.0 / rate_per_min)
            if t >= duration:
                break
            arrivals.append(Arrival(time=round(t, 1), dwell=float(rng.exponential(mean_dwell)),
                                    behaviour=str(rng.choice(names, p=probs))))
        return cls(arrivals=arrivals, seed=seed)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        unknown = set(data) - {"seed", "arrivals"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(arrivals=data.get("arrivals", []), seed=int(data.get("seed", 0)))

    def to_yaml(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump({"seed": self.seed,
                            "arrivals": [dataclasses.asdict(a) for a in self.arrivals]}, fh)


class VisitorPopulation:
    """Applies a scenario to the sculpture and moves the visitors each tick."""

    def __init__(self, scenario, topology, speed=0.5):
        self.scenario = scenario
        self.topology = topology
        self.speed = float(speed)
        self.visitors = []
        self._next = 0
        self._rng = np.random.default_rng(scenario.seed)
        self._lo = topology.positions.min(axis=0) - 0.5
        self._hi = topology.positions.max(axis=0) + 0.5

    def spawn_visitors(self, now):
        """Apply arrivals with time <= now and departures with depart <= now."""
        gone = [v for v in self.visitors if v.depart <= now]
        self.visitors = [v for v in self.visitors if v.depart > now]
        arrived = []
        while self._next < len(self.scenario.arrivals) and self.scenario.arrivals[self._next].time <= now:
            a = self.scenario.arrivals[self._next]
            vrng = np.random.default_rng([self.scenario.seed, self._next])
            pos = vrng.uniform(self._lo, self._hi)
            # zero dwell still keeps the visitor for the arrival tick
            v = Visitor(vid=self._next, behaviour=a.behaviour, position=pos,
                        arrive=a.time, depart=a.time + max(a.dwell, 1e-9),
                        height=float(vrng.uniform(1.5, 1.9)), rng=vrng)
            v.reach_height = v.height
            self.visitors.append(v)
            arrived.append(v)
            self._next += 1
        return arrived, gone

    def move(self, dt, led_intensity=None):
        """Advance every visitor by one tick according to its behaviour."""
        pos = self.topology.positions
        for v in self.visitors:
            if v.behaviour == "brightest_led_seeker" and led_intensity is not None and np.max(led_intensity) > 0:
                goal = pos[int(np.argmax(led_intensity))]
                step = goal - v.position
                dist = np.linalg.norm(step)
                if dist > 1e-9:
                    v.position = v.position + step / dist * min(dist, self.speed * dt)
            else:
                v.position = v.position + v.rng.normal(0.0, self.speed * dt, size=2)
            v.position = np.clip(v.position, self._lo, self._hi)
            if v.behaviour == "hand_raiser":
                # reaches up roughly one tick in ten
                v.reach_height = v.height + 0.5 if v.rng.random() < 0.1 else v.height
            else:
                v.reach_height = v.height
