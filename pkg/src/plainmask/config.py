# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import json
import logging
from hashlib import sha256
from typing import Any, Dict, Optional, TextIO, Tuple

import dacite
import yaml
from dacite import from_dict

from .model import RunConfig


class ConfigurationError(Exception):
    """Error thrown on any problem with a PlainMask configuration."""

    message: str

    def __init__(self, msg: str):
        self.message = msg

    def __str__(self):
        return f"PlainMask configuration error: {self.message}"

    @staticmethod
    def from_yaml_error(file: str, exc: yaml.YAMLError) -> "ConfigurationError":
        """Turns a YAML parser error into a ConfigurationError.

        :param file: The file that triggered the parsing error.
        :param exc: The YAML parsing error.

        :returns: The configuration error, pointing at the faulty line.
        """
        msg = "Cannot parse configuration file"
        if hasattr(exc, "problem_mark") and hasattr(exc, "problem"):
            err_line = exc.problem_mark.line
            err_column = exc.problem_mark.column
            msg += f"\nLine {err_line + 1}, column {err_column + 1}: {exc.problem}"
            with open(file, "r") as f:
                line = f.readline()
                linenr = 1
                while line and linenr <= err_line:
                    linenr += 1
                    line = f.readline()
            msg += "\n" + line.rstrip()
            msg += "\n" + " " * err_column + "^"
        else:
            msg += ": Unknown YAML error"
        return ConfigurationError(msg)


def load_config_dict(config_file: str) -> Tuple[Dict[str, Any], str]:
    """Parses a configuration file into a dictionary.

    The parsed dictionary is updated to reflect the current
    configuration model before being returned.

    :param config_file: The configuration file to parse.

    :returns: A tuple (D,H) were D is the configuration dictionary, and
        H is the SHA-256 hash of the configuration as read from file.
    """
    with open(config_file, "r") as f:
        h = sha256()
        h.update(f.read().encode())
        f.seek(0)
        try:
            obj = yaml.load(f, Loader=yaml.FullLoader)
        except yaml.YAMLError as exc:
            raise ConfigurationError.from_yaml_error(config_file, exc)
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{config_file}: top level must be a mapping")
    update_config_dict(obj)
    return (obj, h.hexdigest())


def load_config(
    config_file: Optional[str] = None,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
) -> RunConfig:
    """Parses a configuration file into a RunConfig.

    :param config_file: Loads the run from the specified file. If unset,
        the default configuration is used.
    :param seed: Supersedes the seed set in the configuration file.
    :param steps: Supersedes the total number of training steps.

    :returns: The loaded and validated configuration.
    """
    if config_file is None:
        cfg = RunConfig()
    else:
        obj, config_hash = load_config_dict(config_file)
        try:
            cfg = from_dict(
                data_class=RunConfig, data=obj, config=dacite.Config(strict=True)
            )
        except dacite.UnexpectedDataError as exc:
            keys = ", ".join(sorted(exc.keys))
            raise ConfigurationError(f"Unknown configuration keys: {keys}")
        except dacite.DaciteError as exc:
            raise ConfigurationError(str(exc))
        cfg.config_hash = config_hash
    if seed is not None:
        cfg.seed = seed
    if steps is not None:
        cfg.schedule.total_steps = steps
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Checks every architectural invariant of a configuration.

    :param cfg: The configuration to check.

    :raises ConfigurationError: On the first violated invariant.
    """
    m = cfg.model
    if len(m.image_size) != 2:
        raise ConfigurationError("model.image_size must be [height, width]")
    h, w = m.image_size
    if h % m.patch_size != 0 or w % m.patch_size != 0:
        raise ConfigurationError(
            f"Image size {h}x{w} is not divisible by patch size {m.patch_size}"
        )
    if h % 4 != 0 or w % 4 != 0:
        raise ConfigurationError(f"Image size {h}x{w} is not divisible by 4")
    ratio = m.patch_size // 4
    if m.patch_size % 4 != 0 or ratio & (ratio - 1) != 0:
        # Each upscaling stage of the mask module doubles the token grid
        raise ConfigurationError(
            f"patch_size {m.patch_size} must be 4 times a power of 2"
        )
    if m.embed_dim % m.num_heads != 0:
        raise ConfigurationError(
            f"Embedding width {m.embed_dim} is not divisible by {m.num_heads} heads"
        )
    if m.head_dim % 2 != 0:
        raise ConfigurationError(f"Head dimension {m.head_dim} must be even for RoPE")
    taps = m.tap_layers
    if not taps or sorted(set(taps)) != taps:
        raise ConfigurationError(f"tap_layers {taps} must be sorted and unique")
    if taps[-1] != m.num_layers or taps[0] < 1:
        raise ConfigurationError(
            f"tap_layers {taps} must lie in [1, {m.num_layers}] and end with {m.num_layers}"
        )
    if len(m.eomt_split) != 2 or sum(m.eomt_split) != m.num_layers:
        raise ConfigurationError(
            f"eomt_split {m.eomt_split} must be two values summing to {m.num_layers}"
        )
    if min(m.eomt_split) < 0:
        raise ConfigurationError("eomt_split values must be non-negative")
    if not 0.0 <= m.anneal_start_frac <= m.anneal_end_frac <= 1.0:
        raise ConfigurationError(
            "Annealing window must satisfy 0 <= anneal_start_frac <= anneal_end_frac <= 1"
        )
    if m.decoder_layers < 0:
        raise ConfigurationError("decoder_layers must be non-negative")
    if any(c < 0 or c >= m.num_classes for c in m.thing_classes):
        raise ConfigurationError(f"thing_classes {m.thing_classes} out of range")

    d = cfg.data
    if list(d.image_size) != list(m.image_size):
        raise ConfigurationError(
            f"data.image_size {d.image_size} differs from model.image_size {m.image_size}"
        )
    if d.num_classes != m.num_classes:
        raise ConfigurationError(
            f"The dataset has {d.num_classes} classes, the model {m.num_classes}"
        )
    if d.thing_classes != sorted(m.thing_classes):
        raise ConfigurationError("data and model disagree on the thing classes")
    if not 0 <= d.min_instances <= d.max_instances:
        raise ConfigurationError("Need 0 <= min_instances <= max_instances")
    if d.frames_per_clip < 2:
        raise ConfigurationError("frames_per_clip must be at least 2")
    clip_segments = d.max_instances + d.frames_per_clip - 1 + len(d.stuff_names)
    if m.num_queries < clip_segments:
        # A departed object's query stays reserved until the end of its clip
        raise ConfigurationError(
            f"num_queries {m.num_queries} is below the largest number of segments "
            f"per clip ({clip_segments})"
        )

    lw = cfg.loss
    for name in ("class_weight", "bce_weight", "dice_weight", "no_object_weight"):
        if getattr(lw, name) < 0:
            raise ConfigurationError(f"loss.{name} must be non-negative")

    s = cfg.schedule
    if s.lr_policy not in ("auto", "cosine", "poly"):
        raise ConfigurationError(f"Unknown lr_policy {s.lr_policy!r}")
    if len(s.betas) != 2:
        raise ConfigurationError("schedule.betas must hold two values")
    if s.total_steps < 0 or s.warmup_steps < 0:
        raise ConfigurationError("Step counts must be non-negative")


def update_config_dict(obj: Dict[str, Any]) -> None:
    """Updates a config dictionary to the latest version of the model.

    Keys that have been renamed or moved are silently migrated, with a
    warning, so that older configuration files remain usable.

    :param obj: The dictionary to update.
    """
    changes = [
        # old key path               new key path
        ("model.lateral_layers", "model.tap_layers"),
        ("schedule.steps", "schedule.total_steps"),
    ]
    for old, new in changes:
        v = pop_key(obj, old)
        if v is not None:
            logging.warning(f"Option {old} is deprecated, use {new} instead")
            put_key(obj, new, v)


def pop_key(obj: Dict[str, Any], path: str) -> Optional[Any]:
    """Gets and removes the value of a key in a nested dictionary.

    Any dot in ``path`` is interpreted as a jump into a nested
    dictionary, so that ``pop_key(d, 'a.b')`` is equivalent to
    ``d.get('a', {}).pop('b', None)``.

    :param obj: The top-level dictionary to query.
    :param path: The path identifying the key to retrieve.

    :returns: The retrieved value, or None if any component of ``path``
        does not exist or is not a dictionary.
    """
    components = path.split(".")
    n = len(components)
    for i, component in enumerate(components):
        if i < n - 1:
            tmp = obj.get(component)
            if not isinstance(tmp, dict):
                return None
            obj = tmp
        else:
            return obj.pop(component, None)
    return None


def put_key(obj: Dict[str, Any], path: str, value: Any) -> None:
    """Puts a value in a nested dictionary structure.

    Intermediate dictionaries are created as needed.

    :param obj: The top-level dictionary to modify.
    :param path: The dotted path identifying the key to set.
    :param value: The new value to set.
    """
    components = path.split(".")
    n = len(components)
    for i, component in enumerate(components):
        if i < n - 1:
            if component not in obj:
                obj[component] = {}
            obj = obj[component]
        else:
            obj[component] = value


def save_config(cfg: RunConfig, output: TextIO) -> None:
    """Saves a run configuration to a file in YAML format.

    :param cfg: The configuration to save.
    :param output: The file-like object where to save the configuration.
    """
    output.write(yaml.dump(cfg.to_dict(), default_flow_style=False))


def config_schema() -> str:
    """Gets the JSON schema of the configuration file."""
    return json.dumps(RunConfig.json_schema(), indent=2)
