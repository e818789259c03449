"""Run configuration: nested dataclasses with a flat key=value text format.

Lines look like ``vae.enc_layers=4``; '#' starts a comment. Unknown keys are
rejected, parse -> serialize -> parse is the identity, and every field has a
default so a missing file means defaults.
"""

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .flow import FlowConfig
from .search import SearchConfig
from .vae import VaeConfig


@dataclass
class TrainConfig:
    lr_vae: float = 1e-3
    lr_flow: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    batch: int = 8
    checkpoint_every: int = 500
    surface_points: int = 1024
    volume_samples: int = 4096
    query_batch: int = 384
    normal_batch: int = 32
    near_fraction: float = 0.75
    near_sigma: float = 0.02
    token_schedule: str = "64"
    two_stage_tokens: bool = False  # optional coarse->fine token-count schedule


@dataclass
class EvalConfig:
    grid_res: int = 64
    points: int = 16384
    fscore_tau: float = 0.02
    input_points: int = 2048


@dataclass
class DataConfig:
    count: int = 100
    solid_fraction: float = 0.4
    csg_fraction: float = 0.4


@dataclass
class RunConfig:
    seed: int = 0
    vae: VaeConfig = field(default_factory=VaeConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = ("vae", "flow", "search", "train", "eval", "data")


def _coerce(value, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        parts = [p for p in value.split(",") if p]
        return tuple(int(p) for p in parts)
    return value


def parse_config(text, base=None):
    """Parse flat key=value text into a RunConfig (unknown keys rejected)."""
    rc = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            rc.seed = int(value)
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        target = getattr(rc, section)
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(target, name, _coerce(value, getattr(target, name)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    _validate(rc)
    return rc


def _validate(rc):
    # re-run dataclass validation on mutated sections
    for section in ("vae", "flow", "search"):
        obj = getattr(rc, section)
        try:
            obj.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def serialize_config(rc):
    lines = [f"seed={rc.seed}"]
    for section in _SECTIONS:
        data = asdict(getattr(rc, section))
        for name in sorted(data):
            value = data[name]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{name}={value}")
    return "\n".join(lines) + "\n"


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base=base)


def save_config(rc, path):
    with open(path, "w") as fh:
        fh.write(serialize_config(rc))
