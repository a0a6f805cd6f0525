"""Command-line front end.

Every subcommand reads Game JSON (``--game``) and either a ChoiceSpec JSON
file (``--choices``) or the logit shorthand ``--eta``.  Results go to stdout,
or into ``--out DIR`` (written atomically).  Exit status is 0 on success,
1 on a domain error and 2 on a configuration or parse error; errors are
reported as one line ``error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io
from .analysis import (
    ExperimentConfig,
    convergence_experiment,
    nonconvergence_experiment,
    order_experiment,
)
from .errors import SfplayError
from .flow import (
    FlowOptions,
    Stability,
    check_cooperative_irreducible,
    classify_stability,
    enumerate_pne,
    flow,
)
from .games import MixedProfile, is_supermodular, tail_sums
from .stochastic import (
    OmegaRate,
    StepSchedule,
    Trajectory,
    apt_distance,
    gaussian_noise,
    make_rng,
    omega_bound,
    run_diffusion,
    run_robbins_monro,
    run_sfp,
)


class ConfigError(Exception):
    """Bad command line, unreadable file or input that does not match its schema."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# loading helpers


def _load(fn, *args):
    try:
        return fn(*args)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from None


def _field(args):
    return _load(io.field_from_files, args.game, args.choices, args.eta)


def _x0(args, f):
    if getattr(args, "x0", None) is None:
        return MixedProfile.uniform(f.counts)
    return _load(lambda p: io.profile_from_dict(io.load_json(p), f.game), args.x0)


def _schedule(text: str) -> StepSchedule:
    if text == "harmonic":
        return StepSchedule.harmonic()
    if text.startswith("power:"):
        return StepSchedule.power(float(text.split(":", 1)[1]))
    raise ConfigError(f"unknown schedule {text!r} (use 'harmonic' or 'power:ALPHA')")


def _emit(args, name: str, text: str):
    if args.out:
        io.atomic_write(Path(args.out) / name, text)
    else:
        sys.stdout.write(text)


def _experiment_config(args, f) -> ExperimentConfig:
    return ExperimentConfig(
        game=f.game, choices=list(f.choices), runs=args.runs, steps=args.steps, seed=args.seed,
        window=args.window, tol_conv=args.tol_conv, start_index=args.start_index,
        stride=args.stride, jobs=args.jobs, force=args.force,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_check_game(args):
    game = _load(lambda p: io.game_from_dict(io.load_json(p)), args.game)
    strict = is_supermodular(game, strict=True, margin=args.margin)
    if strict:
        print("supermodular: strict")
        if strict.near_ties:
            print(io.dumps({"near_ties": strict.near_ties}).strip())
        return
    weak = is_supermodular(game, strict=False, margin=args.margin)
    print("supermodular: weak" if weak else "supermodular: no")
    witness = strict.witness if weak else weak.witness
    print(json.dumps({"witness": witness.to_dict()}, sort_keys=True))


def cmd_solve_pne(args):
    f = _field(args)
    cat = enumerate_pne(f, seeds=args.seeds, tol=args.tol, seed=args.seed)
    _emit(args, "pne.json", io.dumps({"equilibria": [r.to_dict() for r in cat],
                                      "dropped_starts": cat.dropped}))


def cmd_classify(args):
    f = _field(args)
    p = _load(lambda q: io.profile_from_dict(io.load_json(q), f.game), args.point)
    _emit(args, "classify.json", io.dumps(classify_stability(f, p, eps_spec=args.eps_spec).to_dict()))


def cmd_check_coop(args):
    f = _field(args)
    rng = make_rng(args.seed)
    pts = [_random_timage(f.counts, rng) for _ in range(args.samples)]
    res = check_cooperative_irreducible(f.conjugate_handle(), pts, tol=args.tol)
    _emit(args, "coop.json", io.dumps({"cooperative_irreducible": res.ok, "witness": res.witness,
                                       **res.details}))


def _random_timage(counts, rng):
    return tail_sums(MixedProfile.random(counts, rng).vector, counts)


def cmd_flow(args):
    f = _field(args)
    x0 = _x0(args, f)
    x = flow(f.as_handle(), x0.vector, args.time, FlowOptions(step=args.step, max_time=max(args.time, 1.0)))
    _emit(args, "flow.json", io.dumps(io.profile_to_dict(MixedProfile.from_vector(x, f.counts))))


def _write_run(args, traj, rec, config):
    _emit(args, "trajectory.csv", traj.to_csv())
    if args.out:
        io.atomic_write(Path(args.out) / "config.json", io.dumps(config))
        if rec is not None:
            io.atomic_write(Path(args.out) / "noise.csv", rec.to_csv())


def cmd_simulate_sfp(args):
    f = _field(args)
    x0 = _x0(args, f)
    traj, rec = run_sfp(f.game, f, x0, args.steps, seed=args.seed, start_index=args.start_index,
                        stride=args.stride, keep_last=args.keep_last, record_noise=args.noise)
    _write_run(args, traj, rec, traj.meta)


def cmd_simulate_rm(args):
    f = _field(args)
    x0 = _x0(args, f)
    sched = _schedule(args.schedule)
    traj, rec = run_robbins_monro(f.as_handle(), x0.vector, gaussian_noise(args.noise_scale), sched,
                                  args.steps, seed=args.seed, stride=args.stride,
                                  record_noise=args.noise)
    _write_run(args, traj, rec if args.noise else None, traj.meta)


def cmd_simulate_diffusion(args):
    f = _field(args)
    x0 = _x0(args, f)
    traj = run_diffusion(f.as_handle(), x0.vector, args.rate, args.t_end, dt=args.dt, seed=args.seed)
    _write_run(args, traj, None, traj.meta)


def cmd_apt_metric(args):
    f = _field(args)
    traj = _load(lambda p: Trajectory.from_csv(Path(p).read_text()), args.trajectory)
    d = apt_distance(traj, f.as_handle(), args.time, args.horizon)
    _emit(args, "apt.json", io.dumps({"t": args.time, "horizon": args.horizon, "distance": d}))


def cmd_omega_bound(args):
    if args.case == "moment":
        rate = OmegaRate.moment(args.q, args.B)
    else:
        rate = OmegaRate.subgaussian(args.B, args.d)
    sched = _schedule(args.schedule)
    w = omega_bound(rate, sched, args.time, args.delta, args.horizon)
    _emit(args, "omega.json", io.dumps({"case": args.case, "t": args.time, "delta": args.delta,
                                        "omega": w}))


def cmd_experiment(args):
    f = _field(args)
    cfg = _experiment_config(args, f)
    if args.x0 is not None:
        cfg.start = _x0(args, f)
    rep = convergence_experiment(cfg)
    print(f"wall-clock: {rep.wall_clock:.3f}s", file=sys.stderr)
    _emit(args, "report.json", io.dumps(rep.to_dict()))
    if args.out:
        io.atomic_write(Path(args.out) / "basins.csv", rep.basins_csv())


def cmd_nonconv_experiment(args):
    f = _field(args)
    cfg = _experiment_config(args, f)
    catalog = cfg.resolved_catalog()
    if args.target is None:
        unstable = [r for r in catalog if r.label is Stability.LINEARLY_UNSTABLE]
        if not unstable:
            raise SfplayError("no linearly unstable equilibrium in the catalog")
        target = unstable[0]
    else:
        target = catalog[args.target]
    rep = nonconvergence_experiment(cfg, target, args.radius)
    print(f"wall-clock: {rep.wall_clock:.3f}s", file=sys.stderr)
    _emit(args, "report.json", io.dumps(rep.to_dict()))


def cmd_order_experiment(args):
    f = _field(args)
    cfg = _experiment_config(args, f)
    rep = order_experiment(cfg, pairs=args.pairs)
    _emit(args, "order.json", io.dumps(rep.to_dict()))


# ---------------------------------------------------------------------------
# parser


def _common(p, game=True, choices=True):
    if game:
        p.add_argument("--game", required=True, help="Game JSON file")
    if choices:
        g = p.add_argument_group("choices")
        g.add_argument("--choices", help="ChoiceSpec JSON file (one object, or one per player)")
        g.add_argument("--eta", type=float, help="logit temperature for every player (shorthand)")
    p.add_argument("--seed", type=int, default=0, help="seed of every random stream (default 0)")
    p.add_argument("--out", help="output directory; stdout when omitted")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any option, e.g. --set window=2000")


def _experiment_flags(p):
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--steps", type=int, default=10**6)
    p.add_argument("--window", type=int, default=1000)
    p.add_argument("--tol-conv", type=float, default=1e-2)
    p.add_argument("--start-index", type=int, default=1000)
    p.add_argument("--stride", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true", help="run even if the game is not strictly supermodular")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfplay", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("check-game", help="supermodularity of a game [input: Game JSON]")
    _common(p, choices=False)
    p.add_argument("--margin", type=float, default=0.0)
    p.set_defaults(func=cmd_check_game)

    p = sub.add_parser("solve-pne", help="enumerate perturbed equilibria [input: Game JSON, ChoiceSpec JSON; "
                                         "output: EquilibriumReport JSON]")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_solve_pne)

    p = sub.add_parser("classify", help="linear stability of an equilibrium [input: Game JSON, ChoiceSpec JSON, "
                                        "MixedProfile JSON; output: EquilibriumReport JSON]")
    _common(p)
    p.add_argument("--point", required=True, help="MixedProfile JSON file")
    p.add_argument("--eps-spec", type=float, default=1e-6)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("check-coop", help="cooperativity/irreducibility of the conjugate field "
                                          "[input: Game JSON, ChoiceSpec JSON]")
    _common(p)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_check_coop)

    p = sub.add_parser("flow", help="integrate the best-response dynamic [input: Game JSON, ChoiceSpec JSON, "
                                    "MixedProfile JSON]")
    _common(p)
    p.add_argument("--x0", help="MixedProfile JSON (default uniform)")
    p.add_argument("--time", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.01)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("simulate-sfp", help="stochastic fictitious play [input: Game JSON, ChoiceSpec JSON; "
                                            "output: Trajectory CSV]")
    _common(p)
    p.add_argument("--x0", help="MixedProfile JSON (default uniform)")
    p.add_argument("--steps", type=int, default=10**5)
    p.add_argument("--start-index", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--keep-last", type=int, default=10_000)
    p.add_argument("--noise", action="store_true", help="also write noise.csv")
    p.set_defaults(func=cmd_simulate_sfp)

    p = sub.add_parser("simulate-rm", help="Robbins-Monro on the best-response field with Gaussian noise "
                                           "[input: Game JSON, ChoiceSpec JSON; output: Trajectory CSV]")
    _common(p)
    p.add_argument("--x0", help="MixedProfile JSON (default uniform)")
    p.add_argument("--steps", type=int, default=10**4)
    p.add_argument("--schedule", default="harmonic", help="'harmonic' or 'power:ALPHA'")
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--noise", action="store_true", help="also write noise.csv")
    p.set_defaults(func=cmd_simulate_rm)

    p = sub.add_parser("simulate-diffusion", help="Euler-Maruyama with decaying noise "
                                                  "[input: Game JSON, ChoiceSpec JSON; output: Trajectory CSV]")
    _common(p)
    p.add_argument("--x0", help="MixedProfile JSON (default uniform)")
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--t-end", type=float, default=5.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.set_defaults(func=cmd_simulate_diffusion)

    p = sub.add_parser("apt-metric", help="shadowing distance d_X(t, T) [input: Game JSON, ChoiceSpec JSON, "
                                          "Trajectory CSV]")
    _common(p)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--horizon", type=float, default=1.0)
    p.set_defaults(func=cmd_apt_metric)

    p = sub.add_parser("omega-bound", help="deviation-probability bound omega(t, delta, T) [no input files]")
    _common(p, game=False, choices=False)
    p.add_argument("--case", choices=["moment", "subgaussian"], default="moment")
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--B", type=float, default=1.0)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--schedule", default="harmonic")
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--horizon", type=float, default=1.0)
    p.set_defaults(func=cmd_omega_bound)

    p = sub.add_parser("experiment", help="SFP convergence experiment [input: Game JSON, ChoiceSpec JSON; "
                                          "output: experiment report JSON, basins CSV]")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--x0", help="MixedProfile JSON start (default uniform)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("nonconv-experiment", help="SFP runs started at an unstable equilibrium "
                                                  "[input: Game JSON, ChoiceSpec JSON; output: report JSON]")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--target", type=int, help="catalog index (default: first LinearlyUnstable)")
    p.add_argument("--radius", type=float, default=1e-3)
    p.set_defaults(func=cmd_nonconv_experiment)

    p = sub.add_parser("order-experiment", help="order preservation of the conjugate flow "
                                                "[input: Game JSON, ChoiceSpec JSON]")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--pairs", type=int, default=50)
    p.set_defaults(func=cmd_order_experiment)
    return parser


def _apply_overrides(args):
    for item in args.set:
        key, sep, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not hasattr(args, key) or key in ("func", "command", "set"):
            raise ConfigError(f"unknown override {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        setattr(args, key, value)


def _error_line(kind: str, exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"error: {kind}: {msg}"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_overrides(args)
    except ConfigError as exc:
        print(_error_line("config", exc), file=sys.stderr)
        return 2
    try:
        args.func(args)
    except ConfigError as exc:
        print(_error_line("config", exc), file=sys.stderr)
        return 2
    except SfplayError as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
