"""Experiment orchestration: run configuration, slot scheduling, seeded
PB/PLA runs with checkpoint lineage, reports and the simplified-task
convergence benchmark."""
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import re

import numpy as np
import yaml

from . import __version__
from .agent import DDPGAgent, DDPGConfig, OBS_WINDOW, build_observation, reward, run_episode
from .behaviour import ACTION_FIELDS, PrescriptedBehaviour, ParamVector, scale_action
from .metrics import CalibrationProfile, calibrate, mann_whitney_u, per_minute, write_minute_csv
from .analysis import qq_table, write_qq_csv
from .sculpture import TICK, NodeTopology, Sculpture
from .visitors import SimplifiedEnv, VisitorPopulation, VisitorScenario, oracle_reward

logger = logging.getLogger(__name__)

MODES = ("PB", "PLA")

_UNITS = {"s": 1.0, "sec": 1.0, "min": 60.0, "h": 3600.0}
_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([a-z]+)\s*$")


def parse_duration(text):
    """Seconds from a duration with an explicit unit, e.g. ``"1.5 h"``."""
    if not isinstance(text, str):
        raise ValueError(f"duration {text!r} needs an explicit unit (s, min, h)")
    m = _DURATION.match(text)
    if not m or m.group(2) not in _UNITS:
        raise ValueError(f"cannot parse duration {text!r}; use e.g. '90 min', '1.5 h', '30 s'")
    seconds = float(m.group(1)) * _UNITS[m.group(2)]
    if not seconds > 0:
        raise ValueError(f"duration {text!r} must be positive")
    return seconds


# configuration ---------------------------------------------------------------

_CONFIG_KEYS = {"run_id", "days", "modes", "slot_duration", "seeds", "topology",
                "visitors", "agent", "output_dir", "steps_per_episode"}
_SEED_KEYS = {"sim", "agent", "visitors"}
_VISITOR_KEYS = {"scenario", "rate_per_min", "mean_dwell", "behaviours", "speed_m_per_s"}


@dataclasses.dataclass
class RunConfig:
    """Everything that determines a run.

    Durations are seconds here; the YAML form spells them with units.
    """
    run_id: str = "run"
    days: int = 1
    modes: tuple = MODES
    slot_durations: tuple = (5400.0,)
    seeds: dict = dataclasses.field(default_factory=lambda: {"sim": 0, "agent": 0, "visitors": 0})
    topology: str = "grid"
    visitors: dict = dataclasses.field(default_factory=dict)
    agent: dict = dataclasses.field(default_factory=dict)
    output_dir: str = "runs"
    steps_per_episode: int = 100
    source_bytes: bytes = dataclasses.field(default=b"", repr=False, compare=False)
    base_dir: str = dataclasses.field(default=".", repr=False, compare=False)

    def __post_init__(self):
        self.modes = tuple(self.modes)
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ValueError(f"modes must be a non-empty subset of {MODES}, got {self.modes}")
        if len(set(self.modes)) != len(self.modes):
            raise ValueError("each mode may be listed once per day")
        self.slot_durations = tuple(float(d) for d in self.slot_durations)
        if len(self.slot_durations) == 1:
            self.slot_durations = self.slot_durations * len(self.modes)
        if len(self.slot_durations) != len(self.modes) or min(self.slot_durations) <= 0:
            raise ValueError("need one positive slot duration per mode")
        if int(self.days) < 1:
            raise ValueError("days must be >= 1")
        self.days = int(self.days)
        unknown = set(self.seeds) - _SEED_KEYS
        if unknown:
            raise ValueError(f"unknown seed keys: {sorted(unknown)}")
        self.seeds = {k: int(self.seeds.get(k, 0)) for k in sorted(_SEED_KEYS)}
        unknown = set(self.visitors) - _VISITOR_KEYS
        if unknown:
            raise ValueError(f"unknown visitor keys: {sorted(unknown)}")
        fields = {f.name for f in dataclasses.fields(DDPGConfig)}
        unknown = set(self.agent) - fields
        if unknown:
            raise ValueError(f"unknown agent hyper-parameters: {sorted(unknown)}")
        for key in ("topology",):
            path = getattr(self, key)
            if path != "grid" and not os.path.exists(self.resolve(path)):
                raise FileNotFoundError(f"{key} file not found: {path}")
        scenario = self.visitors.get("scenario")
        if scenario and not os.path.exists(self.resolve(scenario)):
            raise FileNotFoundError(f"visitor scenario not found: {scenario}")
        if self.steps_per_episode < 1:
            raise ValueError("steps_per_episode must be >= 1")

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @classmethod
    def from_yaml(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        data = yaml.safe_load(raw) or {}
        return cls.from_dict(data, source_bytes=raw, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_dict(cls, data, source_bytes=b"", base_dir="."):
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        slot = data.pop("slot_duration", "90 min")
        slots = [slot] if isinstance(slot, str) else list(slot)
        visitors = dict(data.pop("visitors", {}) or {})
        if "mean_dwell" in visitors:
            visitors["mean_dwell"] = parse_duration(visitors["mean_dwell"])
        return cls(slot_durations=tuple(parse_duration(s) for s in slots), visitors=visitors,
                   source_bytes=source_bytes, base_dir=base_dir, **data)

    def to_dict(self):
        visitors = dict(self.visitors)
        if "mean_dwell" in visitors:
            visitors["mean_dwell"] = f"{visitors['mean_dwell']} s"
        return {"run_id": self.run_id, "days": self.days, "modes": list(self.modes),
                "slot_duration": [f"{d} s" for d in self.slot_durations], "seeds": dict(self.seeds),
                "topology": self.topology, "visitors": visitors, "agent": dict(self.agent),
                "output_dir": self.output_dir, "steps_per_episode": self.steps_per_episode}

    def config_bytes(self):
        if self.source_bytes:
            return self.source_bytes
        return yaml.safe_dump(self.to_dict(), sort_keys=True).encode("utf-8")

    def config_hash(self):
        return hashlib.sha256(self.config_bytes()).hexdigest()

    def load_topology(self):
        return NodeTopology.grid() if self.topology == "grid" else NodeTopology.from_yaml(self.resolve(self.topology))

    def agent_config(self):
        return DDPGConfig(**self.agent)


@dataclasses.dataclass(frozen=True)
class Slot:
    day: int
    index: int
    mode: str
    start: float
    duration: float

    @property
    def end(self):
        return self.start + self.duration


def schedule_slots(modes, durations, seed, days=1):
    """Seeded per-day permutation of the modes, each appearing once a day.

    ``durations`` maps each mode (or gives one value per listed mode) to a
    slot length in seconds. Days follow each other without gaps.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("need at least one mode")
    if not isinstance(durations, dict):
        durations = list(durations)
        if len(durations) == 1:
            durations = durations * len(modes)
        durations = dict(zip(modes, durations))
    rng = np.random.default_rng(seed)
    out, t = [], 0.0
    for day in range(days):
        order = [modes[i] for i in rng.permutation(len(modes))]
        for k, mode in enumerate(order):
            out.append(Slot(day, k, mode, t, float(durations[mode])))
            t += float(durations[mode])
    return out


# the sculpture as an environment ---------------------------------------------

class SculptureEnv:
    """Sculpture + behaviour engine + visitors, advanced tick by tick.

    One learner step applies a parameter vector and runs ``OBS_WINDOW``
    ticks; the observation is the mean of the frames recorded in those
    ticks. Records (frames and activations) are passed to ``sink`` with
    absolute times ``offset + local time``.
    """

    def __init__(self, topology, scenario, rng_seed, offset=0.0, sink=None, speed=0.5):
        self.sculpture = Sculpture(topology)
        self.engine = PrescriptedBehaviour(topology, ParamVector(), random_state=rng_seed)
        self.population = VisitorPopulation(scenario, topology, speed=speed)
        self.offset = float(offset)
        self.sink = sink or (lambda rec: None)

    @property
    def now(self):
        return self.sculpture.sim_time

    def tick(self):
        s = self.sculpture
        now = s.sim_time
        self.population.spawn_visitors(now)
        s.visitors = self.population.visitors
        frame = s.read_ir_frame()
        t_abs = round(self.offset + now, 6)
        self.sink({"type": "frame", "t": t_abs, "ir": [round(float(x), 9) for x in frame.readings]})
        for act in self.engine.tick_update(frame, now):
            ok = s.activate(act.node, act.actuator, act.envelope, act.index)
            rec = act.to_record("start" if ok else "skipped")
            rec.update(type="activation", t=t_abs, scheduled=round(self.offset + act.time, 6))
            self.sink(rec)
        self.population.move(s.tick, s.led)
        s.step()
        return frame

    def run_ticks(self, n):
        return [self.tick() for _ in range(int(n))]

    def reset(self):
        """Observation from the first ``OBS_WINDOW`` ticks."""
        return build_observation(self.run_ticks(OBS_WINDOW))

    def step(self, action):
        params = scale_action(np.clip(action, -1.0, 1.0))
        self.engine.set_params(params)
        obs = build_observation(self.run_ticks(OBS_WINDOW))
        return obs, reward(obs), {"params": params}


def _scenario(cfg, slot):
    v = cfg.visitors
    if v.get("scenario"):
        base = VisitorScenario.from_yaml(cfg.resolve(v["scenario"]))
        return VisitorScenario(arrivals=[a for a in base.arrivals if a.time < slot.duration],
                               seed=base.seed + 1000 * slot.day + slot.index)
    seed = int(np.random.SeedSequence([cfg.seeds["visitors"], slot.day, slot.index]).generate_state(1)[0])
    return VisitorScenario.poisson(slot.duration, rate_per_min=v.get("rate_per_min", 1.0),
                                   mean_dwell=v.get("mean_dwell", 120.0),
                                   behaviours=v.get("behaviours"), seed=seed)


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _round_list(x):
    return [round(float(v), 12) for v in x]


class _SlotLog:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, rec):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _run_slot(cfg, slot, topology, run_dir, agent_state):
    """Execute one slot; returns the manifest entry."""
    name = f"{slot.day}_{slot.index}_{slot.mode}.jsonl"
    entry = {"day": slot.day, "slot": slot.index, "mode": slot.mode, "start_s": slot.start,
             "duration_s": slot.duration, "log": name, "status": "running"}
    log = _SlotLog(os.path.join(run_dir, name))
    try:
        sim_seed = [cfg.seeds["sim"], slot.day, slot.index]
        env = SculptureEnv(topology, _scenario(cfg, slot), np.random.default_rng(sim_seed),
                           offset=slot.start, sink=log, speed=cfg.visitors.get("speed_m_per_s", 0.5))
        n_ticks = int(round(slot.duration / TICK))
        if slot.mode == "PB":
            env.run_ticks(n_ticks)
        else:
            _run_pla_slot(cfg, slot, env, n_ticks, run_dir, agent_state, entry, log)
        entry["status"] = "ok"
    except Exception as exc:
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        log.close()
    return entry


def _run_pla_slot(cfg, slot, env, n_ticks, run_dir, agent_state, entry, log):
    agent = DDPGAgent(config=cfg.agent_config(), random_state=np.random.default_rng([cfg.seeds["agent"], slot.day]))
    previous = agent_state.get("checkpoint")
    if previous is not None:
        path = os.path.join(run_dir, previous)
        digest = _sha256(path)
        if digest != agent_state["sha256"]:
            raise RuntimeError(f"checkpoint {previous} changed since it was written")
        agent.load_checkpoint(path)
        entry["checkpoint_in"] = previous
        entry["checkpoint_in_sha256"] = digest
    agent.start_day()
    steps = (n_ticks - OBS_WINDOW) // OBS_WINDOW
    if steps < 1:
        raise ValueError(f"slot of {slot.duration} s is too short for one learner step")
    obs = env.reset()
    noise_seen = [len(agent.noise_log)]

    # transitions carry the time the action was applied; noise records the
    # time of the last frame read before the update
    def on_step(t, o, a, r, o1, sigma):
        log({"type": "transition", "t": round(slot.start + env.now - OBS_WINDOW * TICK, 6), "obs": _round_list(o),
             "action": _round_list(a), "reward": round(float(r), 12), "next_obs": _round_list(o1),
             "sigma": float(sigma)})

    def flush_noise():
        for before, d, after in agent.noise_log[noise_seen[0]:]:
            log({"type": "noise", "t": round(slot.start + env.now - TICK, 6), "sigma_before": before,
                 "d": d, "delta": agent.noise.delta, "sigma_after": after})
        noise_seen[0] = len(agent.noise_log)

    done = 0
    while done < steps:
        length = min(cfg.steps_per_episode, steps - done)
        out = run_episode(env, agent, obs, episode_length=length,
                          on_step=lambda *args: (flush_noise(), on_step(*args)))
        flush_noise()
        obs = out["last_obs"]
        done += length
    ckpt = f"day_{slot.day}.ckpt"
    agent.save_checkpoint(os.path.join(run_dir, ckpt))
    agent_state["checkpoint"] = ckpt
    agent_state["sha256"] = _sha256(os.path.join(run_dir, ckpt))
    entry["checkpoint_out"] = ckpt
    entry["checkpoint_out_sha256"] = agent_state["sha256"]
    entry["updates"] = agent.n_updates


def run(config):
    """Execute every slot in order and write ``manifest.json``.

    Returns the manifest dict. On a slot failure the manifest records it as
    failed, keeps the earlier slots, and the exception propagates.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_yaml(config)
    run_dir = os.path.join(cfg.resolve(cfg.output_dir), cfg.run_id)
    os.makedirs(run_dir, exist_ok=True)
    topology = cfg.load_topology()
    slots = schedule_slots(cfg.modes, dict(zip(cfg.modes, cfg.slot_durations)), cfg.seeds["sim"], cfg.days)
    manifest = {"run_id": cfg.run_id, "config_hash": cfg.config_hash(), "code_version": __version__,
                "topology": topology.fingerprint(), "slots": [], "lineage": [], "status": "running"}
    with open(os.path.join(run_dir, "config.yaml"), "wb") as fh:
        fh.write(cfg.config_bytes())
    agent_state = {"checkpoint": None, "sha256": None}
    try:
        for slot in slots:
            entry = {"day": slot.day, "slot": slot.index, "mode": slot.mode,
                     "log": f"{slot.day}_{slot.index}_{slot.mode}.jsonl", "status": "failed"}
            try:
                entry = _run_slot(cfg, slot, topology, run_dir, agent_state)
            finally:
                manifest["slots"].append(entry)
            if "checkpoint_out" in entry:
                manifest["lineage"].append({"day": slot.day, "loaded": entry.get("checkpoint_in"),
                                            "loaded_sha256": entry.get("checkpoint_in_sha256"),
                                            "saved": entry["checkpoint_out"],
                                            "saved_sha256": entry["checkpoint_out_sha256"]})
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        _write_manifest(run_dir, manifest)
    return manifest


def _write_manifest(run_dir, manifest):
    manifest = dict(manifest)
    manifest["run_dir"] = "."
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    """Read a manifest; ``path`` may be the file or its run directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["run_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def read_slot_log(manifest, entry, kind=None):
    path = os.path.join(manifest["run_dir"], entry["log"])
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if kind is None or rec.get("type") == kind:
                yield rec


# reports ---------------------------------------------------------------------

def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def _slot_frames(manifest, entry):
    frames = list(read_slot_log(manifest, entry, "frame"))
    return np.array([f["t"] for f in frames]), np.array([f["ir"] for f in frames]).reshape(len(frames), -1)


def minute_table(manifests, profile=None):
    """Per-minute rows ``(run_id, day, mode, minute_start, e, n_active)``.

    With a :class:`CalibrationProfile` the frames are calibrated first.
    """
    rows = []
    for m in manifests:
        for entry in m["slots"]:
            if entry.get("status") != "ok":
                continue
            t, X = _slot_frames(m, entry)
            if not len(t):
                continue
            if profile is not None:
                X = calibrate(X, profile)
            for minute, e, n in per_minute(t, X):
                rows.append((m["run_id"], entry["day"], entry["mode"], minute, e, n))
    return rows


def calibration_from_window(manifests, window):
    """Profile fitted on the frames with ``window[0] <= t < window[1]``."""
    start, end = window
    chunks = []
    for m in manifests:
        for entry in m["slots"]:
            if entry.get("status") == "ok":
                t, X = _slot_frames(m, entry)
                if len(t):
                    chunks.append(X[(t >= start) & (t < end)])
    X = np.vstack(chunks) if chunks else np.empty((0, 0))
    if len(X) == 0:
        raise ValueError(f"no frames inside the calibration window {start}-{end} s")
    return CalibrationProfile.from_window(X, (start, end))


def _variant_stats(rows, modes, w_summary, w_mw, out_dir, variant):
    summary, tests = {}, {}
    for mode in modes:
        e = [r[4] for r in rows if r[2] == mode]
        n = [r[5] for r in rows if r[2] == mode]
        stats = (*_mean_se(e), *_mean_se(n))
        summary[mode] = dict(zip(("e_mean", "e_se", "n_active_mean", "n_active_se"), stats))
        w_summary.writerow([variant, mode, len(e), *stats])
    for i, a in enumerate(modes):
        for b in modes[i + 1:]:
            for k, metric in ((4, "e"), (5, "n_active")):
                xa = [r[k] for r in rows if r[2] == a]
                xb = [r[k] for r in rows if r[2] == b]
                u, p = mann_whitney_u(xa, xb)
                tests[(metric, a, b)] = (u, p)
                w_mw.writerow([variant, metric, a, b, u, p])
            xa = [r[4] for r in rows if r[2] == a]
            xb = [r[4] for r in rows if r[2] == b]
            suffix = "" if variant == "raw" else f"_{variant}"
            write_qq_csv(os.path.join(out_dir, f"qq_e_{a}_{b}{suffix}.csv"), qq_table(xa, xb), (a, b))
    return summary, tests


def report(manifests, out_dir, calibration_window=None):
    """Per-mode engagement summaries, Q-Q tables, Mann-Whitney tests and
    daily trajectories, written as CSV. Returns the numbers as a dict.

    Everything is computed on raw readings. Given ``calibration_window``
    (start, end) in seconds, a profile is fitted on the frames in that
    visitor-free window and a second, ``calibrated`` variant is added.
    """
    manifests = [load_manifest(m) if isinstance(m, str) else m for m in manifests]
    if not manifests:
        raise ValueError("report needs at least one manifest")
    topo = manifests[0]["topology"]
    for m in manifests[1:]:
        if m["topology"] != topo:
            raise ValueError(f"run {m['run_id']} uses a different topology than {manifests[0]['run_id']}")
    os.makedirs(out_dir, exist_ok=True)
    variants = {"raw": minute_table(manifests)}
    if calibration_window is not None:
        variants["calibrated"] = minute_table(manifests, calibration_from_window(manifests, calibration_window))
    write_minute_csv(os.path.join(out_dir, "minutes.csv"),
                     [(r[3], r[2], r[4], r[5], v) for v, rows in variants.items() for r in rows])
    rows = variants["raw"]
    modes = sorted({r[2] for r in rows})
    bundle = {"summary": {}, "mann_whitney": {}, "daily": {}}
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fs, \
            open(os.path.join(out_dir, "mann_whitney.csv"), "w", newline="") as fm:
        w_summary, w_mw = csv.writer(fs), csv.writer(fm)
        w_summary.writerow(["variant", "mode", "minutes", "e_mean", "e_se", "n_active_mean", "n_active_se"])
        w_mw.writerow(["variant", "metric", "mode_a", "mode_b", "U", "p"])
        for variant, vrows in variants.items():
            summary, tests = _variant_stats(vrows, modes, w_summary, w_mw, out_dir, variant)
            if variant == "raw":
                bundle["summary"], bundle["mann_whitney"] = summary, tests
            else:
                bundle[variant] = {"summary": summary, "mann_whitney": tests}
    with open(os.path.join(out_dir, "daily.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "day", "e_mean", "n_active_mean"])
        for mode in modes:
            for day in sorted({r[1] for r in rows if r[2] == mode}):
                e = [r[4] for r in rows if r[2] == mode and r[1] == day]
                n = [r[5] for r in rows if r[2] == mode and r[1] == day]
                bundle["daily"][(mode, day)] = (float(np.mean(e)), float(np.mean(n)))
                w.writerow([mode, day, float(np.mean(e)), float(np.mean(n))])
    return bundle


def action_rows(manifests):
    """Learner actions from the transition logs: ``(X, t, day)``."""
    X, t, day = [], [], []
    for m in manifests:
        m = load_manifest(m) if isinstance(m, str) else m
        for entry in m["slots"]:
            if entry["mode"] != "PLA" or entry.get("status") != "ok":
                continue
            for rec in read_slot_log(m, entry, "transition"):
                X.append(rec["action"])
                t.append(rec["t"])
                day.append(entry["day"])
    X = np.asarray(X, dtype=np.float64).reshape(-1, len(ACTION_FIELDS))
    return X, t, day


# simplified-task convergence benchmark ----------------------------------------

@dataclasses.dataclass
class BenchResult:
    seed: int
    episode_rewards: list
    episode_oracles: list
    final_ratio: float
    passed: bool


def bench_simplified(seed, episodes=100, episode_length=1000, final_window=10, threshold=0.9,
                     n_cells=24, n_visitors=2, config=None, progress=None):
    """Train on the brightest-LED task and compare with the oracle.

    ``final_ratio`` is the mean per-step reward over the last
    ``final_window`` episodes divided by the mean oracle reward of the
    same episodes.
    """
    env = SimplifiedEnv(n_cells=n_cells, n_visitors=n_visitors,
                        random_state=np.random.default_rng([seed, 1]))
    agent = DDPGAgent(n_cells, n_cells, config or DDPGConfig(), random_state=np.random.default_rng([seed, 0]))
    rewards, oracles = [], []
    for ep in range(episodes):
        obs = env.reset()
        oracles.append(oracle_reward(env))
        out = run_episode(env, agent, obs, episode_length=episode_length)
        rewards.append(float(out["rewards"].mean()))
        if progress is not None:
            progress(seed, ep, rewards[-1], oracles[-1], agent.noise.sigma)
    k = min(final_window, episodes)
    ratio = float(np.mean(rewards[-k:]) / np.mean(oracles[-k:]))
    return BenchResult(seed, rewards, oracles, ratio, ratio >= threshold)
