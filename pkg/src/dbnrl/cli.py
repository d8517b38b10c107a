"""Command-line driver: simulate, fit, optimise, evaluate and report.

Every command reads one JSON configuration (``--config``), takes its seed
from the configuration unless ``--seed`` overrides it, and writes its
artifacts under ``--out``.  Each stage draws its random stream from
``SeedSequence(seed)`` with a fixed per-command key, so rerunning a command
with the same configuration and seed reproduces its CSV output byte for byte
(wall-clock columns excepted).

Exit codes: 0 success, 2 configuration or schema error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, NumericError
from .estimators import TrajectoryScaler
from .experiment import (
    LinearController,
    evaluate_controllers,
    feeding_profile,
    run_protocol,
    write_profile_csv,
)
from .gibbs import PosteriorDraws, sample_posterior
from .gradient import benchmark, write_benchmark_csv
from .kinetics import STATE_INDEX, Dataset
from .model import PolicyParams
from .optimize import dbn_rl_optimize
from .shapley import expected_shapley

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# fixed keys so that each command owns an independent random stream
STREAMS = {"simulate": 0, "fit": 1, "optimize": 2, "evaluate": 3, "profiles": 4,
           "benchmark": 5, "integrated": 6}


def stream_seed(seed, command):
    return int(np.random.SeedSequence([seed, STREAMS[command]]).generate_state(1)[0])


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _manifest(cfg, command, **extra):
    return {"command": command, "seed": cfg.seed, "config_hash": cfg.digest(),
            "config": cfg.to_dict(), **extra}


def _fermentation_only(cfg, command):
    if cfg.scenario != "fermentation":
        raise ConfigError(f"'{command}' works on the fermentation scenario; "
                          "use the 'integrated' command for the integrated process")
    return cfg.fermentation_scenario()


def _load_dataset(path, scenario):
    try:
        ds = Dataset.from_csv(path)
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if ds.horizon != scenario.H:
        raise ConfigError(f"{path}: dataset has {ds.horizon} steps, "
                          f"configuration expects {scenario.H}")
    return ds


def _load_draws(directory, scenario):
    try:
        draws = PosteriorDraws.load(directory)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{directory}: {exc}") from None
    w = draws[0]
    if (w.H, w.n, w.m) != (scenario.H, scenario.n, scenario.m):
        raise ConfigError(f"{directory}: draws have (H, n, m) = {(w.H, w.n, w.m)}, "
                          f"configuration expects {(scenario.H, scenario.n, scenario.m)}")
    return draws


def _load_scaler(path):
    return TrajectoryScaler.from_dict(_read_json(path))


def _load_bundle(path, scenario):
    doc = _read_json(path)
    if doc.get("schema") != "dbnrl.policy_bundle":
        raise ConfigError(f"{path}: not a policy file")
    out = {}
    for key in ("controller", "initial_controller"):
        ctrl = LinearController.from_dict(doc[key])
        if ctrl.mu_s.shape != (scenario.H, scenario.n) or ctrl.gains.shape[2] != scenario.m:
            raise ConfigError(f"{path}: policy dimensions {ctrl.gains.shape} do not match "
                              f"the configured process")
        out[key] = ctrl
    out["policy"] = PolicyParams.from_dict(doc["policy"])
    return out


# -- commands --------------------------------------------------------------


def cmd_simulate(cfg, out, args):
    scenario = _fermentation_only(cfg, "simulate")
    ds = scenario.generate(cfg.R, stream_seed(cfg.seed, "simulate"))
    ds.to_csv(out / "dataset.csv")
    _write_json(out / "dataset_manifest.json",
                _manifest(cfg, "simulate", R=cfg.R, steps=ds.horizon, dt_obs=ds.dt_obs))
    return [out / "dataset.csv"]


def cmd_fit(cfg, out, args):
    scenario = _fermentation_only(cfg, "fit")
    ds = _load_dataset(args.dataset or out / "dataset.csv", scenario)
    states, actions = scenario.network_data(ds)
    scaler = TrajectoryScaler().fit(states, actions)
    zs, za = scaler.transform(states, actions)
    g = cfg.gibbs
    draws = sample_posterior(zs, za, scenario.network_prior(scaler), g.n_draws,
                             stream_seed(cfg.seed, "fit"), g.burn_in, g.thinning)
    draws.meta.update(seed=cfg.seed, burn_in=g.burn_in, thinning=g.thinning,
                      config_hash=cfg.digest(), R=ds.R)
    draws.save(out / "draws")
    _write_json(out / "scaler.json", scaler.to_dict())
    return [out / "draws", out / "scaler.json"]


def cmd_optimize(cfg, out, args):
    scenario = _fermentation_only(cfg, "optimize")
    draws = _load_draws(args.draws or out / "draws", scenario)
    scaler = _load_scaler(args.scaler or out / "scaler.json")
    pool = [w for w, ok in zip(draws, draws.valid) if ok]
    if not pool:
        raise NumericError("every posterior draw is invalid")
    reward = scaler.transform_reward(scenario.reward())
    s1 = scenario.s1() / scaler.state_scale_[0]
    policy0 = scenario.initial_policy()
    policy, trace = dbn_rl_optimize(pool, reward, s1, cfg.optimizer, policy0,
                                    stream_seed(cfg.seed, "optimize"))
    mean_model = draws.mean_model()
    bundle = {
        "schema": "dbnrl.policy_bundle", "version": 1,
        "seed": cfg.seed, "config_hash": cfg.digest(),
        "controller": scenario.controller(scaler, mean_model, policy).to_dict(),
        "initial_controller": scenario.controller(scaler, mean_model, policy0).to_dict(),
        "policy": policy.to_dict(),
    }
    _write_json(out / "policy.json", bundle)
    trace.to_csv(out / "trace.csv", timing=args.timing)
    return [out / "policy.json", out / "trace.csv"]


def cmd_evaluate(cfg, out, args):
    scenario = cfg.scenario_object()
    seed = stream_seed(cfg.seed, "evaluate")
    if args.policy is None:
        report, _ = run_protocol(scenario, cfg.R, cfg.macro_reps, seed, cfg.gibbs,
                                 cfg.optimizer, cfg.rollouts)
    else:
        bundle = _load_bundle(args.policy, scenario)
        controllers = {"dbn-rl": bundle["controller"], "initial": bundle["initial_controller"],
                       "reference": None}
        report = evaluate_controllers(scenario, controllers, cfg.macro_reps, seed, cfg.rollouts)
    report.to_csv(out / "evaluation.csv")
    return [out / "evaluation.csv"]


def _parse_vector(text, size, what):
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers") from None
    if values.size != size:
        raise ConfigError(f"{what} needs {size} values, got {values.size}")
    return values


def cmd_shapley(cfg, out, args):
    scenario = _fermentation_only(cfg, "shapley")
    draws = _load_draws(args.draws or out / "draws", scenario)
    scaler = _load_scaler(args.scaler or out / "scaler.json")
    bundle = _load_bundle(args.policy or out / "policy.json", scenario)
    h = cfg.shapley.h if args.h is None else args.h
    t = cfg.shapley.t if args.t is None else args.t
    if not 1 <= h <= t <= scenario.H - 1:
        raise ConfigError(f"need 1 <= h <= t <= {scenario.H - 1}, got h={h}, t={t}")
    # default observation: the reference run at step h
    state = scenario.profile[h - 1, STATE_INDEX]
    action = np.array([scenario.reference.mean[h - 1]])
    if args.state is not None:
        state = _parse_vector(args.state, scenario.n, "--state")
    if args.action is not None:
        action = _parse_vector(args.action, scenario.m, "--action")
    s_h = state / scaler.state_scale_[h - 1]
    a_h = action / scaler.action_scale_[h - 1]
    valid = [w for w, ok in zip(draws, draws.valid) if ok]
    report, _ = expected_shapley(valid, bundle["policy"], h, t, s_h, a_h,
                                 scenario.state_names, scenario.action_names)
    report = report.scaled(scaler.state_scale_[t])
    report.to_csv(out / "attribution.csv", scenario.state_names)
    return [out / "attribution.csv"]


def cmd_benchmark(cfg, out, args):
    b = cfg.benchmark
    rows = benchmark(b.horizons, b.n, b.m, b.repeats, stream_seed(cfg.seed, "benchmark"))
    write_benchmark_csv(rows, out / "benchmark.csv")
    return [out / "benchmark.csv"]


def cmd_profiles(cfg, out, args):
    scenario = _fermentation_only(cfg, "profiles")
    seed = stream_seed(cfg.seed, "profiles")
    profiles = {"reference": feeding_profile(scenario, None, cfg.rollouts, seed)}
    if args.policy is not None:
        bundle = _load_bundle(args.policy, scenario)
        profiles["initial"] = feeding_profile(scenario, bundle["initial_controller"],
                                              cfg.rollouts, seed)
        profiles["dbn-rl"] = feeding_profile(scenario, bundle["controller"], cfg.rollouts, seed)
    write_profile_csv(profiles, out / "profiles.csv")
    return [out / "profiles.csv"]


def cmd_integrated(cfg, out, args):
    if cfg.scenario != "integrated":
        doc = cfg.to_dict()
        doc["scenario"] = "integrated"
        cfg = ExperimentConfig.from_dict(doc)
    scenario = cfg.scenario_object()
    report, _ = run_protocol(scenario, cfg.R, cfg.macro_reps, stream_seed(cfg.seed, "integrated"),
                             cfg.gibbs, cfg.optimizer, cfg.rollouts)
    report.to_csv(out / "integrated.csv")
    return [out / "integrated.csv"]


COMMANDS = {
    "simulate": (cmd_simulate, "simulate epsilon-greedy batches to dataset.csv"),
    "fit": (cmd_fit, "sample the network posterior into draws/"),
    "optimize": (cmd_optimize, "optimise policy gains into policy.json and trace.csv"),
    "evaluate": (cmd_evaluate, "paired evaluation report evaluation.csv"),
    "shapley": (cmd_shapley, "posterior-averaged attribution attribution.csv"),
    "benchmark": (cmd_benchmark, "gradient timing table benchmark.csv"),
    "profiles": (cmd_profiles, "feeding profiles with 95% intervals profiles.csv"),
    "integrated": (cmd_integrated, "full protocol on the integrated process integrated.csv"),
}


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="dbnrl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON experiment configuration")
    parser.add_argument("--seed", type=_u64, help="override the configured seed")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "fit":
            p.add_argument("--dataset", type=Path, help="default: OUT/dataset.csv")
        if name in ("optimize", "shapley"):
            p.add_argument("--draws", type=Path, help="default: OUT/draws")
            p.add_argument("--scaler", type=Path, help="default: OUT/scaler.json")
        if name == "optimize":
            p.add_argument("--timing", action="store_true",
                           help="record wall-clock seconds in trace.csv")
        if name in ("evaluate", "profiles", "shapley"):
            p.add_argument("--policy", type=Path,
                           help="policy.json from 'optimize'" + (
                               " (default: OUT/policy.json)" if name == "shapley" else ""))
        if name == "shapley":
            p.add_argument("--h", type=int, help="step of the observation (1-based)")
            p.add_argument("--t", type=int, help="attribute the prediction of step t+1")
            p.add_argument("--state", help="observed raw state, comma separated")
            p.add_argument("--action", help="observed raw action, comma separated")
    return parser


def load_config(args):
    cfg = ExperimentConfig() if args.config is None else ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command][0](cfg, args.out, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
