"""Command line entry point: ``dmsb <verb> [options]``."""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import auction, experiments
from .errors import DomainError
from .experiments import ExperimentSpec, load_spec
from .rl import DmsbAgent, PpoAgent, write_step_log

log = logging.getLogger("dmsb")


def _csv_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.spec) if args.spec else ExperimentSpec(name="default")
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "mechanisms", None) is not None:
        changes["mechanisms"] = _csv_list(args.mechanisms)
    if getattr(args, "agents", None) is not None:
        changes["agents"] = _csv_list(args.agents)
    if getattr(args, "repetitions", None) is not None:
        changes["repetitions"] = args.repetitions
    if getattr(args, "out_dir", None) is not None:
        changes["out_dir"] = args.out_dir
    return spec.replace(**changes) if changes else spec


def _progress(step, result):
    recent = result.rewards[-1000:]
    log.info("step %d  mean surplus (last %d) %.3f", step, recent.size, recent.mean())


def _checkpoint_paths(out_dir, seed):
    out_dir = Path(out_dir)
    return out_dir / f"dmsb_seed{seed}.ckpt", out_dir / f"ppo_seed{seed}.ckpt"


def _load_trained(spec: ExperimentSpec, out_dir):
    """Checkpointed agents per seed, or ``None`` when any required file is missing."""
    trained = {}
    for seed in spec.seeds:
        dmsb_path, ppo_path = _checkpoint_paths(out_dir, seed)
        agents = {}
        if spec.trains_diffusion:
            if not dmsb_path.exists():
                return None
            agents["diffusion"] = DmsbAgent.load(dmsb_path, spec.trainer_for(seed))
        if "ppo" in spec.agents:
            if not ppo_path.exists():
                return None
            agents["ppo"] = PpoAgent.load(ppo_path)
        trained[seed] = agents
    return trained


def cmd_train(args):
    spec = _spec(args)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows, trained = experiments.run_convergence(
        spec, progress=_progress if args.verbose else None, on_trained=_saver(spec, out))
    csv_path = experiments.write_convergence_csv(out / "convergence.csv", rows, spec.smoothing)
    experiments.render_chart(csv_path, out / "convergence.svg",
                             title=f"{spec.name}: smoothed total surplus")
    print(f"trained {len(trained)} seed(s) in {time.perf_counter() - t0:.1f}s -> {out}")
    return 0


def _saver(spec, out):
    def save(seed, agents, curves):
        dmsb_path, ppo_path = _checkpoint_paths(out, seed)
        if "diffusion" in agents:
            agents["diffusion"].save(dmsb_path)
            write_step_log(out / f"train_log_seed{seed}.csv", curves["diffusion"].records)
        if "ppo" in agents:
            agents["ppo"].save(ppo_path)
            write_step_log(out / f"train_log_ppo_seed{seed}.csv", curves["ppo"].records)
    return save


def cmd_evaluate(args):
    spec = _spec(args)
    out = Path(spec.out_dir)
    trained = _load_trained(spec, out)
    if trained is None:
        needs = spec.trains_diffusion or "ppo" in spec.agents
        if needs:
            raise DomainError(f"no checkpoints for seeds {spec.seeds} in {out}; run `train` first")
        trained = {s: {} for s in spec.seeds}
    rows = []
    for seed in spec.seeds:
        rows += experiments.evaluate(spec, trained[seed], seed)
    path = experiments.write_sweep_csv(out / "evaluation.csv", rows)
    for r in rows:
        print(f"seed {r['seed']:>3}  {r['kind']:<9} {r['method']:<9} "
              f"surplus {float(r['total_surplus']):9.3f}  latency {float(r['mean_latency_s']):.4f}s")
    print(f"wrote {path}")
    return 0


def cmd_sweep(args):
    spec = _spec(args)
    if spec.sweep_variable is None:
        raise DomainError("sweep needs a [sweep] table with `variable` and `values` in the spec")
    out = Path(spec.out_dir)
    trained = _load_trained(spec, out)
    if trained is not None:
        log.info("reusing checkpoints in %s", out)
    rows = experiments.run_sweep(spec, trained)
    name = f"sweep_{spec.sweep_variable}"
    path = experiments.write_sweep_csv(out / f"{name}.csv", rows)
    experiments.render_chart(path, out / f"{name}.svg")
    experiments.render_chart(path, out / f"{name}_latency.svg", y_field="mean_latency_s",
                             y_label="mean latency (s)")
    print(f"wrote {path}")
    return 0


def cmd_chart(args):
    out = args.output or str(Path(args.csv).with_suffix(".svg"))
    path = experiments.render_chart(args.csv, out, y_field=args.y, title=args.title)
    print(f"wrote {path}")
    return 0


def cmd_property_check(args):
    """Randomised checks of strategy-proofness, homogeneity and feasibility."""
    rng = np.random.default_rng(args.seed)
    n = args.markets
    counts = rng.integers(2, 10, size=n)
    values = np.zeros((n, counts.max()))
    for i, c in enumerate(counts):
        values[i, :c] = rng.lognormal(3.0, 1.0, size=c)
    rho = rng.uniform(1.0, 10.0, size=n)
    failures = 0

    t0 = time.perf_counter()
    cex = auction.check_truthfulness_batch(values, counts, rho)
    ok = cex is None
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} strategy-proofness over {n} markets "
          f"({time.perf_counter() - t0:.2f}s)" + ("" if ok else f": {cex}"))

    worst = 0.0
    flips = 0
    for i in range(n):
        b = values[i, :counts[i]]
        theta = rng.uniform(0.01, 100.0)
        others = b[1:]
        psi = auction.critical_payment(others, rho[i])
        scaled = auction.critical_payment(theta * others, rho[i])
        worst = max(worst, abs(scaled - theta * psi) / max(abs(theta * psi), 1e-300))
        flips += (auction.msb_allocate(b, rho[i]).winner
                  != auction.msb_allocate(theta * b, rho[i]).winner)
    ok = worst <= 1e-12 and flips == 0
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} homogeneity: max relative error {worst:.2e}, "
          f"winner changes under scaling {flips}")

    bad = 0
    for i in range(n):
        b = values[i, :counts[i]]
        out = auction.msb_auction(b, rho[i], b)
        try:
            out.check_feasible()
        except DomainError:
            bad += 1
    failures += bad > 0
    print(f"{'PASS' if bad == 0 else 'FAIL'} feasibility: {bad} infeasible outcomes")
    return 1 if failures else 0


def build_parser():
    p = argparse.ArgumentParser(prog="dmsb", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, steps=True, select=True):
        sp.add_argument("--spec", help="experiment spec (TOML)")
        sp.add_argument("--seed", type=int, help="first seed; repetitions count up from it")
        sp.add_argument("--repetitions", type=int, help="number of seeds")
        sp.add_argument("--out-dir", help="directory for CSVs, charts and checkpoints")
        if steps:
            sp.add_argument("--steps", type=int, help="training steps per seed")
        if select:
            sp.add_argument("--mechanisms", help="comma list from: " + ",".join(experiments.MECHANISMS))
            sp.add_argument("--agents", help="comma list from: " + ",".join(experiments.AGENTS))

    sp = sub.add_parser("train", help="train agents, write logs, checkpoints and convergence curves")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate checkpointed agents and baselines")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="evaluate every method across the spec's sweep grid")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("chart", help="render a results CSV as an SVG line chart")
    sp.add_argument("csv")
    sp.add_argument("-o", "--output")
    sp.add_argument("--y", help="column to plot")
    sp.add_argument("--title")
    sp.set_defaults(func=cmd_chart)

    sp = sub.add_parser("property-check", help="randomised mechanism property checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--markets", type=int, default=10_000)
    sp.set_defaults(func=cmd_property_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
