#!/usr/bin/env python3
"""
Strict YAML run configuration.

    seed: 0
    output_dir: runs/desk-scale
    env:     {...}   EnvConfig
    victim:  {...}   VictimTrainConfig
    attack:
      trainer:     {...}   TrainerConfig
      gan:         {...}   GanConfig
      critic:      {...}   CriticConfig
      world_model: {...}   WorldModelConfig
      budget:      {...}   PerturbationBudget
      targeted:    {...}   TargetedSpec (optional)
    eval:    {...}   EvalConfig

Unknown keys and invalid values raise ConfigError naming the YAML line.
"""
import dataclasses
from dataclasses import dataclass, field, asdict

import yaml

from AttackTrainer import SEBAConfig, TrainerConfig, TargetedSpec
from EvalMetrics import EvalConfig
from PerturbationGAN import GanConfig, PerturbationBudget
from PixelEnvironments import EnvConfig
from ShadowCritic import CriticConfig
from Victims import VictimTrainConfig
from WorldModel import WorldModelConfig

__all__ = ["RunConfig", "ConfigError", "load_run_config", "parse_run_config", "parse_override"]

class ConfigError(Exception):
    """Raised for unknown keys or invalid values in a run configuration"""
    pass

SECTIONS = {
    "env": EnvConfig,
    "victim": VictimTrainConfig,
    "eval": EvalConfig,
}

ATTACK_SECTIONS = {
    "trainer": TrainerConfig,
    "gan": GanConfig,
    "critic": CriticConfig,
    "world_model": WorldModelConfig,
    "budget": PerturbationBudget,
    "targeted": TargetedSpec,
}

TOP_LEVEL_KEYS = {"seed", "output_dir", "attack"} | set(SECTIONS)

# Sections carrying their own seed, set from the top-level seed unless given explicitly
SEEDED = [("env",), ("victim",), ("attack", "trainer"), ("attack", "world_model")]

@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    victim: VictimTrainConfig = field(default_factory=VictimTrainConfig)
    attack: SEBAConfig = field(default_factory=SEBAConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/seba"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "env": asdict(self.env),
            "victim": asdict(self.victim),
            "attack": {key: value for key, value in self.attack.to_dict().items() if value is not None},
            "eval": asdict(self.evaluation),
        }

    def dump(self, filename):
        with open(filename, "w", encoding="utf-8") as outfile:
            yaml.safe_dump(self.to_dict(), outfile, sort_keys=False)

def _key_lines(node, prefix=()) -> dict:
    """Map key paths (tuples) to 1-based line numbers"""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    return lines

def _line(lines, path):
    """Line of path, or of its closest ancestor"""
    while path:
        if path in lines:
            return lines[path]
        path = path[:-1]
    return 1

def _build(cls, values, path, lines):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"line {_line(lines, path)}: section '{'.'.join(path)}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"line {_line(lines, path + (key,))}: unknown key '{key}' in section "
                              f"'{'.'.join(path)}' (known keys: {', '.join(sorted(known))})")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"line {_line(lines, path)}: invalid section '{'.'.join(path)}': {exc}")

def parse_override(text):
    """'section.key=value' -> (path tuple, YAML-parsed value)"""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form section.key=value")
    key, value = text.split("=", 1)
    return tuple(key.strip().split(".")), yaml.safe_load(value)

def _apply_override(data, path, value):
    node = data
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Override {'.'.join(path)}: '{key}' is not a section")
    node[path[-1]] = value

def parse_run_config(text, overrides=(), seed=None) -> RunConfig:
    """
    Parse and validate a YAML run configuration.

    Args:
        overrides: iterable of "section.key=value" strings, applied after loading
        seed: if given, replaces every seed in the configuration
    Raises:
        ConfigError: with the line number of the offending key
    """
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Invalid YAML: {exc}")
    lines = _key_lines(node) if node is not None else {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("line 1: the configuration must be a mapping")
    for override in overrides:
        path, value = parse_override(override)
        _apply_override(data, path, value)

    for key in data:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"line {_line(lines, (key,))}: unknown key '{key}' "
                              f"(known keys: {', '.join(sorted(TOP_LEVEL_KEYS))})")
    if seed is not None:
        data["seed"] = seed
    top_seed = data.get("seed", 0)
    for path in SEEDED:
        section = data
        for key in path:
            if not isinstance(section, dict):
                break
            if section.get(key) is None:
                section[key] = {}
            section = section[key]
        if isinstance(section, dict) and (seed is not None or "seed" not in section):
            section["seed"] = top_seed

    env = _build(EnvConfig, data.get("env"), ("env",), lines)
    victim = _build(VictimTrainConfig, data.get("victim"), ("victim",), lines)
    evaluation = _build(EvalConfig, data.get("eval"), ("eval",), lines)
    attack_data = data.get("attack") or {}
    if not isinstance(attack_data, dict):
        raise ConfigError(f"line {_line(lines, ('attack',))}: section 'attack' must be a mapping")
    for key in attack_data:
        if key not in ATTACK_SECTIONS:
            raise ConfigError(f"line {_line(lines, ('attack', key))}: unknown key '{key}' in section 'attack' "
                              f"(known keys: {', '.join(sorted(ATTACK_SECTIONS))})")
    parts = {name: _build(cls, attack_data.get(name), ("attack", name), lines)
             for name, cls in ATTACK_SECTIONS.items() if name != "targeted"}
    if attack_data.get("targeted") is not None:
        parts["targeted"] = _build(TargetedSpec, attack_data["targeted"], ("attack", "targeted"), lines)
    try:
        attack = SEBAConfig(**parts)
    except ValueError as exc:
        raise ConfigError(f"line {_line(lines, ('attack',))}: {exc}")
    if not isinstance(data.get("output_dir", ""), str):
        raise ConfigError(f"line {_line(lines, ('output_dir',))}: output_dir must be a string")
    return RunConfig(env=env, victim=victim, attack=attack, evaluation=evaluation, seed=int(top_seed),
                     output_dir=data.get("output_dir", "runs/seba"))

def load_run_config(filename, overrides=(), seed=None) -> RunConfig:
    with open(filename, encoding="utf-8") as infile:
        return parse_run_config(infile.read(), overrides, seed)
