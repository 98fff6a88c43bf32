#!/usr/bin/env python3
"""
Command line entry point.

    SEBA.py train-victim     -c presets/desk-scale.yaml
    SEBA.py train-worldmodel -c presets/desk-scale.yaml
    SEBA.py train-attack     -c presets/desk-scale.yaml
    SEBA.py evaluate         -c presets/desk-scale.yaml --attacker runs/.../final_attack.seba --attacker random
    SEBA.py report           -c presets/desk-scale.yaml

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
import argparse
import os
import sys

import pandas as pd
import yaml

from AttackTrainer import SEBAState, SEBAAttacker, pretrain_world_model, run_seba
from Baselines import AccessLevel, AccessViolation, NoDifferentiableHandle, make_baseline
from EvalMetrics import (
    FeatureExtractor, InsufficientSamples, evaluate_policy, frame_frechet_distance, targeted_success_rate,
    metrics_row, write_metrics_table, plot_returns, plot_reward_curves, plot_frechet_distances
)
from PixelEnvironments import make_env
from QueryLedger import QueryLedger, ledger_report
from RunConfig import ConfigError, load_run_config
from Victims import train_victim, save_victim, load_victim
from WorldModel import save_world_model, load_world_model

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_FAILURE = 3

def _victim_path(args, config):
    return args.victim or os.path.join(config.output_dir, "victim.seba")

def _load_victim(args, config, env):
    filename = _victim_path(args, config)
    if not os.path.isfile(filename):
        raise FileNotFoundError(f"Victim checkpoint {filename} does not exist, run train-victim first")
    return load_victim(filename, expected_env_spec=env.spec, seed=config.seed)

def _write_yaml(filename, data):
    with open(filename, "w", encoding="utf-8") as outfile:
        yaml.safe_dump(data, outfile, sort_keys=False)

def cmd_train_victim(args, config):
    env = make_env(config.env)
    victim = train_victim(env, config.victim, verbose=args.verbose)
    filename = _victim_path(args, config)
    digest = save_victim(victim, filename)
    _write_yaml(os.path.join(config.output_dir, "competence.yaml"), {"victim": filename, "digest": digest,
                                                                      **victim.competence})
    print(f"Victim written to {filename} (return {victim.competence['mean_return']:.3f}, "
          f"scripted reference {victim.competence['scripted_return']:.3f})")

def cmd_train_worldmodel(args, config):
    env = make_env(config.env)
    victim = _load_victim(args, config, env)
    state = SEBAState(env, victim, config.attack)
    wm = pretrain_world_model(state, verbose=args.verbose)
    filename = os.path.join(config.output_dir, "world_model.seba")
    save_world_model(wm, filename)
    _write_yaml(os.path.join(config.output_dir, "world_model.yaml"),
                {"fidelity": wm.fidelity, "training_losses": wm.training_losses,
                 "ledger": ledger_report(state.ledger)})
    print(f"World model written to {filename}, fidelity: {wm.fidelity}")

def cmd_train_attack(args, config):
    env = make_env(config.env)
    victim = _load_victim(args, config, env)
    run_dir = os.path.join(config.output_dir, "attack")
    world_model = None
    wm_file = os.path.join(config.output_dir, "world_model.seba")
    if config.attack.trainer.use_wm and os.path.isfile(wm_file):
        world_model = load_world_model(wm_file, expected_env_spec=env.spec)
        print(f"Using world model {wm_file}")
    _, report = run_seba(env, victim, config.attack, run_dir=run_dir, world_model=world_model,
                         verbose=args.verbose)
    print(f"Attack written to {report.checkpoints[-1]}")
    print(yaml.safe_dump({"ledger": report.ledger}, sort_keys=False).strip())

def _make_attacker(name, config, env):
    """Returns (label, attacker or None, training ledger report)"""
    if name in ("none", "clean"):
        return "clean", None, {}
    if os.path.isfile(name):
        attacker = SEBAAttacker.from_checkpoint(name, expected_env_spec=env.spec)
        return "seba", attacker, attacker.gan.container.metadata.get("ledger", {})
    return name, make_baseline(name, config.attack.budget, seed=config.seed), {}

def cmd_evaluate(args, config):
    env = make_env(config.env)
    victim = _load_victim(args, config, env)
    episodes = args.episodes or config.evaluation.episodes
    extractor = FeatureExtractor(env.spec.obs_shape, config.evaluation.feature_dim, config.evaluation.feature_seed)
    names = ["none"] + [name for name in (args.attacker or []) if name not in ("none", "clean")]
    rows, stats_by_attacker = [], {}
    for name in names:
        label, attacker, training = _make_attacker(name, config, env)
        if attacker is not None and attacker.access_level == AccessLevel.WhiteBox \
                and victim.differentiable_handle is None:
            print(f"WARNING: skipping {label}: {victim} has no differentiable handle")
            continue
        ledger = QueryLedger()
        try:
            stats = evaluate_policy(env, victim, attacker, episodes, ledger, config.evaluation.episode_offset,
                                    record_frames=True, verbose=args.verbose)
        except (NoDifferentiableHandle, AccessViolation) as exc:
            print(f"WARNING: skipping {label}: {exc}")
            continue
        try:
            fd = frame_frechet_distance(stats.logs, extractor, config.evaluation.fd_samples)
        except InsufficientSamples as exc:
            print(f"WARNING: no Fréchet distance for {label}: {exc}")
            fd = None
        targeted_rate = None
        if config.attack.targeted is not None and env.spec.is_continuous:
            targeted_rate = targeted_success_rate(stats.logs, config.attack.targeted)
        rows.append(metrics_row(env.spec.name, label, stats, fd, ledger if attacker is not None else None,
                                training, targeted_rate))
        stats_by_attacker[label] = stats
        print(f"{label}: return {stats}, FD {fd}")
    out_dir = os.path.join(config.output_dir, "eval")
    df = write_metrics_table(rows, out_dir)
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    plot_returns(df, os.path.join(plots_dir, "returns.png"))
    plot_reward_curves(stats_by_attacker, os.path.join(plots_dir, "reward_curves.png"))
    plot_frechet_distances(df, os.path.join(plots_dir, "frechet_distance.png"))
    print(df.to_string(index=False))

def cmd_report(args, config):
    report_file = os.path.join(config.output_dir, "attack", "report.yaml")
    metrics_file = os.path.join(config.output_dir, "eval", "metrics.csv")
    if not os.path.isfile(report_file) and not os.path.isfile(metrics_file):
        raise FileNotFoundError(f"Neither {report_file} nor {metrics_file} exist, nothing to report")
    if os.path.isfile(report_file):
        with open(report_file, encoding="utf-8") as infile:
            report = yaml.safe_load(infile)
        print("Attack training")
        print(yaml.safe_dump({"ledger": report["ledger"], "world_model_fidelity": report["world_model_fidelity"],
                              "iterations": len(report["iterations"])}, sort_keys=False).strip())
    if os.path.isfile(metrics_file):
        df = pd.read_csv(metrics_file)
        print("Evaluation")
        print(df.to_string(index=False))
        plots_dir = os.path.join(config.output_dir, "eval", "plots")
        os.makedirs(plots_dir, exist_ok=True)
        plot_returns(df, os.path.join(plots_dir, "returns.png"))
        plot_frechet_distances(df, os.path.join(plots_dir, "frechet_distance.png"))

COMMANDS = {
    "train-victim": cmd_train_victim,
    "train-worldmodel": cmd_train_worldmodel,
    "train-attack": cmd_train_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

def build_parser():
    parser = argparse.ArgumentParser(description="Sample-efficient black-box attacks on pixel RL agents")
    parser.add_argument('command', choices=sorted(COMMANDS), help='What to run')
    parser.add_argument('-c', '--config', required=True, help='YAML run configuration')
    parser.add_argument('-o', '--out', default=None, help='Output directory (overrides output_dir)')
    parser.add_argument('--seed', type=int, default=None, help='Override every seed in the configuration')
    parser.add_argument('-s', '--set', action='append', default=[], help='Override in the form "section.key=value"')
    parser.add_argument('--victim', default=None, help='Victim checkpoint (default: <out>/victim.seba)')
    parser.add_argument('--attacker', action='append', help='Attack checkpoint or baseline name (random, pgd, simba)')
    parser.add_argument('--episodes', type=int, default=None, help='Number of evaluation episodes')
    parser.add_argument('-v', '--verbose', action='store_true', help='Enable verbose output')
    return parser

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, overrides=args.set, seed=args.seed)
    except ConfigError as exc:
        print(f"ERROR: {args.config}: {exc}")
        return EXIT_CONFIG_ERROR
    except OSError as exc:
        print(f"ERROR: {exc}")
        return EXIT_CONFIG_ERROR
    if args.out:
        config.output_dir = args.out
    os.makedirs(config.output_dir, exist_ok=True)
    config.dump(os.path.join(config.output_dir, "config.yaml"))
    try:
        COMMANDS[args.command](args, config)
    except Exception as exc:
        print(f"ERROR: {args.command} failed: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME_FAILURE
    return 0

if __name__ == "__main__":
    sys.exit(main())
