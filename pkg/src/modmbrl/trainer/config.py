"""Experiment configuration: hyperparameters plus a small sectioned text format.

Example::

    [designs]
    train = builtin:wheels-front, builtin:wheels-mid
    test = builtin:legs-three

    [envs]
    kinds = stairs, curbs
    max_level = 5

    [network]
    hidden = 64

    [hyperparams]
    T = 16
    K = 200

    [seeds]
    seed = 0
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..design import DesignError, DesignGraph, builtin_design, load_design
from ..gnn import NetConfig
from ..simworld.terrain import TerrainKind


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 2)."""


@dataclass
class Hyperparams:
    T: int = 16                    # imagination horizon, control steps
    K: int = 200                   # policy steps per iteration
    N: int = 10                    # outer iterations
    n_batch: int = 64
    model_epochs: int = 20
    model_batch: int = 256
    model_lr: float = 1e-3
    torque_epochs: int = 5
    torque_lr: float = 1e-3
    policy_lr: float = 3e-3
    entropy_coef: float = 1e-3
    grad_clip: float = 10.0
    threshold: float = 2.0         # curriculum distance, metres per episode
    per_design_curriculum: bool = False
    random_traj: int = 16          # bootstrap trajectories per design
    random_steps: int = 100
    rollout_steps: int = 200       # on-policy trajectory length
    onpolicy_noise: float = 0.5
    eval_episodes: int = 2         # per design and env for the curriculum check
    x0_spread: float = 3.0         # buffer start positions drawn from [0, spread]
    val_factor: int = 10           # validation set = val_factor * n_batch states
    min_lr: float = 1e-6

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if f.name in ("entropy_coef", "onpolicy_noise", "x0_spread"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ConfigError(f"{f.name} must be positive")
        if self.T % 2:
            raise ConfigError("T must be even (midpoint overwrite)")
        if self.n_batch % 2:
            raise ConfigError("n_batch must be even")
        return self


@dataclass
class ExperimentConfig:
    train: tuple[DesignGraph, ...]
    test: tuple[DesignGraph, ...] = ()
    envs: tuple[TerrainKind, ...] = (TerrainKind.STAIRS, TerrainKind.CURBS)
    max_level: int = 5
    start_level: int = 1
    net: NetConfig = field(default_factory=NetConfig)
    hp: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    source: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.resolved().encode()).hexdigest()[:16]

    def resolved(self) -> str:
        lines = ["[designs]",
                 "train = " + ", ".join(design_ref(d) for d in self.train),
                 "test = " + ", ".join(design_ref(d) for d in self.test),
                 "", "[envs]",
                 "kinds = " + ", ".join(e.value for e in self.envs),
                 f"max_level = {self.max_level}",
                 f"start_level = {self.start_level}",
                 "", "[network]"]
        lines += [f"{f.name} = {getattr(self.net, f.name)}" for f in fields(self.net)]
        lines += ["", "[hyperparams]"]
        lines += [f"{f.name} = {getattr(self.hp, f.name)}" for f in fields(self.hp)]
        lines += ["", "[seeds]", f"seed = {self.seed}", ""]
        for d in self.train + self.test:
            lines.append(f"# {d.name}: " + " ".join(f"{n.kind.value}@{n.x:g}" for n in d.limbs))
        return "\n".join(lines) + "\n"


def design_ref(d: DesignGraph) -> str:
    """``builtin:NAME`` for stock designs, else the relative file ``designs/NAME.design``."""
    try:
        if builtin_design(d.name).signature() == d.signature():
            return f"builtin:{d.name}"
    except DesignError:
        pass
    return f"designs/{d.name}.design"


def write_design_files(cfg: "ExperimentConfig", root: Path):
    for d in cfg.train + cfg.test:
        ref = design_ref(d)
        if not ref.startswith("builtin:"):
            (root / ref).parent.mkdir(parents=True, exist_ok=True)
            (root / ref).write_text(d.serialize())


def _coerce(value: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(like).__name__}") from None


def _design(ref: str, base: Path | None, where: str) -> DesignGraph:
    try:
        if ref.startswith("builtin:"):
            return builtin_design(ref.split(":", 1)[1])
        p = Path(ref)
        if not p.is_absolute() and base is not None:
            p = base / p
        return load_design(p)
    except DesignError as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = ("designs", "envs", "network", "hyperparams", "seeds")


def parse_config(text: str, base: Path | None = None, source: str = "<config>") -> ExperimentConfig:
    sections: dict[str, dict[str, tuple[str, int]]] = {s: {} for s in _SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header")
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise ConfigError(f"{where}: unknown section [{current}]")
            continue
        if current is None:
            raise ConfigError(f"{where}: entry outside a section")
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in sections[current]:
            raise ConfigError(f"{where}: duplicate key {k!r}")
        sections[current][k] = (v, lineno)

    def loc(sec, key):
        return f"{source}:{sections[sec][key][1]}"

    des = sections["designs"]
    if "train" not in des:
        raise ConfigError(f"{source}: [designs] needs a train entry")
    train = tuple(_design(r.strip(), base, loc("designs", "train"))
                  for r in des["train"][0].split(",") if r.strip())
    test = tuple(_design(r.strip(), base, loc("designs", "test"))
                 for r in des.get("test", ("", 0))[0].split(",") if r.strip())
    unknown = set(des) - {"train", "test"}
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{loc('designs', k)}: unknown key {k!r}")
    if not train:
        raise ConfigError(f"{source}: no training designs")

    cfg = ExperimentConfig(train=train, test=test, source=source)
    env = sections["envs"]
    for k, (v, _) in env.items():
        where = loc("envs", k)
        if k == "kinds":
            try:
                cfg.envs = tuple(TerrainKind.parse(x) for x in v.split(",") if x.strip())
            except ValueError as e:
                raise ConfigError(f"{where}: {e}") from None
        elif k in ("max_level", "start_level"):
            setattr(cfg, k, _coerce(v, 0, where))
        else:
            raise ConfigError(f"{where}: unknown key {k!r}")
    if not cfg.envs:
        raise ConfigError(f"{source}: no environments")
    if cfg.start_level < 0 or cfg.max_level < cfg.start_level:
        raise ConfigError(f"{source}: need 0 <= start_level <= max_level")

    netkw = {}
    for k, (v, _) in sections["network"].items():
        if k not in {f.name for f in fields(NetConfig)}:
            raise ConfigError(f"{loc('network', k)}: unknown key {k!r}")
        netkw[k] = _coerce(v, 0, loc("network", k))
    try:
        cfg.net = NetConfig(**netkw)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None

    hp = Hyperparams()
    names = {f.name: f for f in fields(hp)}
    for k, (v, _) in sections["hyperparams"].items():
        if k not in names:
            raise ConfigError(f"{loc('hyperparams', k)}: unknown key {k!r}")
        setattr(hp, k, _coerce(v, getattr(hp, k), loc("hyperparams", k)))
    try:
        cfg.hp = hp.validate()
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None

    for k, (v, _) in sections["seeds"].items():
        if k != "seed":
            raise ConfigError(f"{loc('seeds', k)}: unknown key {k!r}")
        cfg.seed = _coerce(v, 0, loc("seeds", k))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base=path.parent, source=str(path))


def with_overrides(cfg: ExperimentConfig, **hp) -> ExperimentConfig:
    new = dataclasses.replace(cfg, hp=dataclasses.replace(cfg.hp, **hp))
    new.hp.validate()
    return new
