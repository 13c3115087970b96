"""Run configuration: one flat key-value namespace covering every tunable
default (optimizer, schedule, stage lengths, loss weights, thresholds,
margins, preprocessing, model presets).

``dump()`` prints the authoritative defaults; parsing rejects unknown keys.
Values come from either a config file (one ``key = value`` per line, ``#``
comments) or repeated ``--set key=value`` flags, applied in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # optimizer and schedule
    lr0: float = 0.01
    decay_power: float = 0.9
    momentum: float = 0.9
    lambda_2d: float = 0.5
    batch_size_2d: int = 4
    batch_size_3d: int = 1
    # stage lengths (warmup defaults to 10% of the 2D stage)
    coarse_iterations: int = 300
    warmup2d_iterations: int = 200
    stage2d_iterations: int = 2000
    stage3d_hff_iterations: int = 500
    joint_iterations: int = 250
    # loss
    class_weight_background: float = 1.0
    class_weight_liver: float = 3.0
    class_weight_tumor: float = 10.0
    # batch normalization
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.99
    # augmentation
    augment_mirror: bool = True
    augment_scale_min: float = 0.8
    augment_scale_max: float = 1.2
    # preprocessing
    hu_window_lo: float = -200.0
    hu_window_hi: float = 250.0
    coarse_spacing: tuple = (2.0, 2.0, 2.5)
    # inference
    tau_liver: float = 0.5
    tau_tumor: float = 0.5
    decide_mode: str = "threshold"
    roi_margin: int = 10
    connectivity: int = 26
    fill_holes: bool = False
    jobs: int = 1
    # model presets
    model_2d: str = "tiny2d"
    model_3d: str = "tiny3d"
    coarse_model: str = "coarse2d"

    def class_weights(self):
        return (self.class_weight_background, self.class_weight_liver, self.class_weight_tumor)

    def stage_iterations(self, stage):
        key = f"{stage}_iterations"
        if not hasattr(self, key):
            raise ConfigError(f"no iteration count for stage {stage!r}")
        return getattr(self, key)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        for f in fields(cls):
            if f.name in data:
                v = data[f.name]
                setattr(cfg, f.name, tuple(v) if isinstance(getattr(cfg, f.name), tuple) else v)
        return cfg

    def apply(self, items):
        """Apply ``key=value`` strings in order; unknown keys are rejected."""
        known = {f.name: f for f in fields(self)}
        for item in items:
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"expected key=value, got {item!r}")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _parse_value(raw.strip(), getattr(self, key), key))
        return self

    def apply_file(self, path):
        items = []
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    items.append(line)
        return self.apply(items)

    def dump(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _parse_value(raw, current, key):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    if isinstance(current, tuple):
        try:
            return tuple(float(v) for v in raw.split(","))
        except ValueError as e:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from e
    return raw


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
