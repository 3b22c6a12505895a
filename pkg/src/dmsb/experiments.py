"""Experiment harness: convergence runs, parameter sweeps, CSV output and charts."""

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import auction
from .config import (ScenarioConfig, TrainerConfig, default_document, load_toml,
                     scenario_from_dict, trainer_from_dict)
from .env import AuctionEnv, action_to_rho
from .errors import DomainError
from .rl import GreedyAgent, RandomAgent, train, train_ppo

log = logging.getLogger(__name__)

MECHANISMS = ("dmsb", "spa", "myopic", "optimal")
AGENTS = ("diffusion", "ppo", "greedy", "random")
SWEEP_VARIABLES = ("bandwidth_mhz", "num_bs", "task_size_mb")
# evaluation markets are seeded away from training markets so the two never overlap
EVAL_SEED_OFFSET = 10_000

SWEEP_SCHEMA = "dmsb-sweep v1"
SWEEP_FIELDS = ["experiment", "sweep_variable", "sweep_value", "kind", "method", "seed",
                "total_surplus", "total_surplus_std", "uav_surplus", "bs_surplus",
                "mean_latency_s", "latency_std_s", "steps", "rounds"]
CONVERGENCE_SCHEMA = "dmsb-convergence v1"
CONVERGENCE_FIELDS = ["experiment", "kind", "method", "seed", "step", "smoothed_surplus"]


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    mechanisms: Tuple[str, ...] = MECHANISMS
    agents: Tuple[str, ...] = ("diffusion", "greedy", "random")
    sweep_variable: Optional[str] = None
    sweep_values: Tuple[float, ...] = ()
    repetitions: int = 5
    seed: int = 0
    steps: int = 50_000
    eval_rounds: int = 1000
    smoothing: int = 1000
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        if not self.mechanisms and not self.agents:
            raise DomainError("an experiment needs at least one mechanism or agent")
        for m in self.mechanisms:
            if m not in MECHANISMS:
                raise DomainError(f"unknown mechanism {m!r}; choose from {MECHANISMS}")
        for a in self.agents:
            if a not in AGENTS:
                raise DomainError(f"unknown agent {a!r}; choose from {AGENTS}")
        if self.sweep_variable is not None:
            if self.sweep_variable not in SWEEP_VARIABLES:
                raise DomainError(f"cannot sweep {self.sweep_variable!r}; "
                                  f"choose from {SWEEP_VARIABLES}")
            if not self.sweep_values:
                raise DomainError("sweep needs at least one value")
            for v in self.sweep_values:
                scenario_at(self.scenario, self.sweep_variable, v)  # validates the grid
        for name in ("repetitions", "steps", "eval_rounds", "smoothing"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")

    @property
    def seeds(self):
        return [self.seed + r for r in range(self.repetitions)]

    @property
    def trains_diffusion(self):
        return "dmsb" in self.mechanisms or "diffusion" in self.agents

    def trainer_for(self, seed):
        episodes = max(1, -(-self.steps // self.scenario.episode_length))
        return self.trainer.replace(episodes=episodes, seed=seed)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def scenario_at(base: ScenarioConfig, variable, value) -> ScenarioConfig:
    """The base scenario with one swept quantity pinned to ``value``."""
    if variable == "num_bs":
        if float(value) != int(value):
            raise DomainError(f"num_bs must be an integer, got {value}")
        return base.replace(num_bs=int(value))
    if variable in ("bandwidth_mhz", "task_size_mb"):
        return base.replace(**{variable: (float(value), float(value))})
    raise DomainError(f"cannot sweep {variable!r}")


def spec_from_dict(doc, base_dir=None) -> ExperimentSpec:
    """Build a spec from a parsed TOML document layered over the packaged defaults."""
    defaults = default_document()
    scenario = scenario_from_dict({**defaults["scenario"], **doc.get("scenario", {})})
    trainer = trainer_from_dict({**defaults["trainer"], **doc.get("trainer", {})})
    exp = dict(doc.get("experiment", {}))
    sweep = doc.get("sweep", {})
    known = {"name", "mechanisms", "agents", "repetitions", "seed", "steps", "eval_rounds",
             "smoothing", "out_dir"}
    unknown = set(exp) - known
    if unknown:
        raise DomainError(f"unknown [experiment] keys: {sorted(unknown)}")
    if set(sweep) - {"variable", "values"}:
        raise DomainError(f"unknown [sweep] keys: {sorted(set(sweep) - {'variable', 'values'})}")
    if "out_dir" in exp and base_dir is not None and not Path(exp["out_dir"]).is_absolute():
        exp["out_dir"] = str(Path(base_dir) / exp["out_dir"])
    exp.setdefault("name", "experiment")
    return ExperimentSpec(scenario=scenario, trainer=trainer,
                          sweep_variable=sweep.get("variable"),
                          sweep_values=tuple(sweep.get("values", ())), **exp)


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    return spec_from_dict(load_toml(path), base_dir=path.parent)


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Per-round price rule used during evaluation and baseline curves."""

    kind = "agent"
    mechanism = "msb"

    def reset(self):
        pass

    def rho(self, state, rng):
        raise NotImplementedError

    def observe(self, state):
        pass


class AgentPolicy(Policy):
    def __init__(self, agent, action_space, kind="agent", explore=False):
        self.agent = agent
        self.action_space = action_space
        self.kind = kind
        self.explore = explore

    def rho(self, state, rng):
        return action_to_rho(self.agent.act(state, rng, self.explore), self.action_space)


class SpaPolicy(Policy):
    kind = "mechanism"
    mechanism = "spa"

    def rho(self, state, rng):
        return 1.0


class MyopicPolicy(Policy):
    kind = "mechanism"

    def rho(self, state, rng):
        return auction.myopic_rho(state.live_bids())


class OptimalPolicy(Policy):
    """Ratio of mean highest to mean second-highest bid over the rounds seen so far."""

    kind = "mechanism"

    def __init__(self):
        self.history = []

    def reset(self):
        self.history = []

    def rho(self, state, rng):
        return auction.optimal_rho(self.history)

    def observe(self, state):
        self.history.append(state.live_bids().copy())


def make_policies(spec: ExperimentSpec, agents: Dict[str, object], action_space):
    """Ordered ``(kind, method) -> Policy`` for everything the spec compares."""
    out = {}
    for m in spec.mechanisms:
        if m == "dmsb":
            out[("mechanism", "dmsb")] = AgentPolicy(agents["diffusion"], action_space, "mechanism")
        elif m == "spa":
            out[("mechanism", "spa")] = SpaPolicy()
        elif m == "myopic":
            out[("mechanism", "myopic")] = MyopicPolicy()
        elif m == "optimal":
            out[("mechanism", "optimal")] = OptimalPolicy()
    for a in spec.agents:
        if a == "greedy":
            agent = GreedyAgent(action_space)
        elif a == "random":
            agent = RandomAgent(action_space)
        else:
            agent = agents[a]
        out[("agent", a)] = AgentPolicy(agent, action_space)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalStats:
    total: np.ndarray
    uav: np.ndarray
    bs: np.ndarray
    latency: np.ndarray

    @property
    def rounds(self):
        return self.total.size


def evaluate_policy(policy: Policy, scenario: ScenarioConfig, seed, rounds) -> EvalStats:
    """Run ``rounds`` auctions on a freshly seeded evaluation market."""
    env = AuctionEnv(scenario, seed=EVAL_SEED_OFFSET + seed)
    rng = np.random.default_rng([seed, 7])
    total, uav, bs, lat = (np.empty(rounds) for _ in range(4))
    i = 0
    while i < rounds:
        state = env.reset()
        policy.reset()
        done = False
        while not done and i < rounds:
            rho = policy.rho(state, rng)
            policy.observe(state)
            state, reward, done, info = env.step_rho(rho, policy.mechanism)
            total[i], uav[i], bs[i], lat[i] = reward, info.uav_surplus, info.bs_surplus, info.latency
            i += 1
    return EvalStats(total, uav, bs, lat)


def train_agents(spec: ExperimentSpec, seed, scenario=None, progress=None):
    """Train the learning agents the spec needs; returns ``(agents, curves)``."""
    scenario = scenario or spec.scenario
    agents, curves = {}, {}
    if spec.trains_diffusion:
        env = AuctionEnv(scenario, seed=seed)
        res = train(env, spec.trainer_for(seed), progress=progress)
        agents["diffusion"], curves["diffusion"] = res.agent, res
    if "ppo" in spec.agents:
        env = AuctionEnv(scenario, seed=seed)
        res = train_ppo(env, spec.steps, seed=seed, progress=progress)
        agents["ppo"], curves["ppo"] = res.agent, res
    return agents, curves


def _row(spec, sweep_value, kind, method, seed, stats: EvalStats):
    return {
        "experiment": spec.name,
        "sweep_variable": spec.sweep_variable or "",
        "sweep_value": "" if sweep_value is None else repr(float(sweep_value)),
        "kind": kind,
        "method": method,
        "seed": seed,
        "total_surplus": repr(float(stats.total.mean())),
        "total_surplus_std": repr(float(stats.total.std())),
        "uav_surplus": repr(float(stats.uav.mean())),
        "bs_surplus": repr(float(stats.bs.mean())),
        "mean_latency_s": repr(float(stats.latency.mean())),
        "latency_std_s": repr(float(stats.latency.std())),
        "steps": spec.steps if kind == "agent" and method in ("diffusion", "ppo")
        or method == "dmsb" else 0,
        "rounds": stats.rounds,
    }


def run_sweep(spec: ExperimentSpec, trained: Optional[Dict[int, dict]] = None,
              progress=None) -> List[dict]:
    """Evaluate every method at every sweep point with frozen policies.

    Learning agents are trained once per seed on the base scenario (or taken
    from ``trained``) and then held fixed across the grid.
    """
    values = spec.sweep_values if spec.sweep_variable else (None,)
    rows = []
    for seed in spec.seeds:
        agents = trained[seed] if trained and seed in trained else train_agents(spec, seed)[0]
        for value in values:
            scenario = (spec.scenario if value is None
                        else scenario_at(spec.scenario, spec.sweep_variable, value))
            for (kind, method), policy in make_policies(spec, agents,
                                                        scenario.action_space).items():
                stats = evaluate_policy(policy, scenario, seed, spec.eval_rounds)
                rows.append(_row(spec, value, kind, method, seed, stats))
                if progress is not None:
                    progress(rows[-1])
    return rows


def evaluate(spec: ExperimentSpec, agents: Dict[str, object], seed) -> List[dict]:
    """One row per method on the base scenario for already-trained agents."""
    rows = []
    for (kind, method), policy in make_policies(spec, agents,
                                                spec.scenario.action_space).items():
        stats = evaluate_policy(policy, spec.scenario, seed, spec.eval_rounds)
        rows.append(_row(spec, None, kind, method, seed, stats))
    return rows


def trailing_mean(x, window):
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _rollout_rewards(policy: Policy, scenario, seed, steps):
    """Rewards of a fixed rule on the training market, for flat reference curves."""
    env = AuctionEnv(scenario, seed=seed)
    rng = np.random.default_rng([seed, 5])
    out = np.empty(steps)
    i = 0
    while i < steps:
        state = env.reset()
        policy.reset()
        done = False
        while not done and i < steps:
            rho = policy.rho(state, rng)
            policy.observe(state)
            state, out[i], done, _ = env.step_rho(rho, policy.mechanism)
            i += 1
    return out


def run_convergence(spec: ExperimentSpec, progress=None, on_trained=None):
    """Smoothed per-step surplus for every method; returns ``(rows, trained agents by seed)``.

    ``on_trained(seed, agents, curves)`` is called after each seed's training.
    """
    log_every = spec.trainer.log_every
    rows, trained = [], {}
    for seed in spec.seeds:
        agents, curves = train_agents(spec, seed, progress=progress)
        trained[seed] = agents
        if on_trained is not None:
            on_trained(seed, agents, curves)
        for (kind, method), policy in make_policies(spec, agents,
                                                    spec.scenario.action_space).items():
            learner = "diffusion" if method == "dmsb" else method
            if learner in curves:
                rewards = curves[learner].rewards[:spec.steps]
            else:
                if isinstance(policy, AgentPolicy):
                    policy.explore = True
                rewards = _rollout_rewards(policy, spec.scenario, seed, spec.steps)
            smooth = trailing_mean(rewards, spec.smoothing)
            steps = list(range(log_every, rewards.size + 1, log_every))
            if not steps or steps[-1] != rewards.size:
                steps.append(rewards.size)
            for s in steps:
                rows.append({"experiment": spec.name, "kind": kind, "method": method,
                             "seed": seed, "step": s,
                             "smoothed_surplus": repr(float(smooth[s - 1]))})
    return rows, trained


# ---------------------------------------------------------------------------
# CSV


def _header(schema, **meta):
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    return f"# {schema}{extra}\n"


def write_csv(path, schema, fields, rows, **meta):
    buf = io.StringIO()
    buf.write(_header(schema, **meta))
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def write_sweep_csv(path, rows):
    return write_csv(path, SWEEP_SCHEMA, SWEEP_FIELDS, rows)


def write_convergence_csv(path, rows, window):
    return write_csv(path, CONVERGENCE_SCHEMA, CONVERGENCE_FIELDS, rows, window=window)


def read_csv(path):
    """Returns ``(schema, meta, rows)``; rejects files without a known schema line."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise DomainError(f"{path}: missing schema header line")
    head = lines[0][2:].split()
    if len(head) < 2:
        raise DomainError(f"{path}: malformed schema header {lines[0]!r}")
    schema = f"{head[0]} {head[1]}"
    if schema not in (SWEEP_SCHEMA, CONVERGENCE_SCHEMA):
        raise DomainError(f"{path}: unsupported schema {schema!r}")
    meta = dict(item.split("=", 1) for item in head[2:])
    rows = list(csv.DictReader(lines[1:]))
    fields = SWEEP_FIELDS if schema == SWEEP_SCHEMA else CONVERGENCE_FIELDS
    for i, r in enumerate(rows):
        if list(r) != fields:
            raise DomainError(f"{path}: row {i} does not match the {schema} columns")
        if schema == SWEEP_SCHEMA:
            total = float(r["total_surplus"])
            parts = float(r["uav_surplus"]) + float(r["bs_surplus"])
            if abs(total - parts) > 1e-9 * max(1.0, abs(total)):
                raise DomainError(f"{path}: row {i} surplus shares do not sum to the total")
    return schema, meta, rows


def aggregate(rows, x_field, y_field):
    """Series keyed by method: sorted x values with mean and std of ``y`` over seeds."""
    groups: Dict[str, Dict[float, list]] = {}
    for r in rows:
        x = float(r[x_field]) if r[x_field] != "" else 0.0
        groups.setdefault(r["method"], {}).setdefault(x, []).append(float(r[y_field]))
    out = {}
    for method, by_x in groups.items():
        xs = sorted(by_x)
        ys = np.array([np.mean(by_x[x]) for x in xs])
        sd = np.array([np.std(by_x[x]) for x in xs])
        out[method] = (np.array(xs), ys, sd)
    return out


# ---------------------------------------------------------------------------
# charts

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f"]


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def render_chart(csv_path, out_path, y_field=None, title=None, x_label=None, y_label=None,
                 width=640, height=420):
    """Write an SVG line chart (mean over seeds with a std band) of a results CSV."""
    schema, _, rows = read_csv(csv_path)
    if not rows:
        raise DomainError(f"{csv_path}: no rows to plot")
    if schema == CONVERGENCE_SCHEMA:
        x_field, y_field = "step", y_field or "smoothed_surplus"
        x_label = x_label or "training step"
    else:
        x_field, y_field = "sweep_value", y_field or "total_surplus"
        x_label = x_label or (rows[0]["sweep_variable"] or "point")
    y_label = y_label or y_field.replace("_", " ")
    title = title or rows[0]["experiment"]
    series = aggregate(rows, x_field, y_field)

    xs_all = np.concatenate([s[0] for s in series.values()])
    lo_all = np.concatenate([s[1] - s[2] for s in series.values()])
    hi_all = np.concatenate([s[1] + s[2] for s in series.values()])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(lo_all.min()), float(hi_all.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.2f}" y="22" text-anchor="middle" font-size="14">'
           f'{_escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle">'
                   f'{_tick_label(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end">'
                   f'{_tick_label(t)}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" text-anchor="middle">'
               f'{_escape(x_label)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.2f})">{_escape(y_label)}</text>')
    for i, (method, (xs, ys, sd)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if np.any(sd > 0):
            upper = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys + sd)]
            lower = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs[::-1], (ys - sd)[::-1])]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2" '
                   f'data-series="{_escape(method)}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 36}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 42}" y="{ly}">{_escape(method)}</text>')
    out.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(out) + "\n")
    return out_path


def _tick_label(v):
    if abs(v) >= 1e4 or (v != 0 and abs(v) < 1e-2):
        return f"{v:.2e}"
    return f"{v:.4g}"


def _escape(s):
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))
