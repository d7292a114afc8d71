"""Modular robot designs as typed star graphs.

A design is one body plus limbs (legs, wheels) attached at axial
stations along the body. Config files are plain text::

    # comment
    body length=1.0
    limb kind=leg x=0.4
    limb kind=wheel x=-0.4
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

# geometry (metres)
BODY_LENGTH = 1.0
THIGH = 0.15
SHANK = 0.15
WHEEL_RADIUS = 0.08
STANCE_DEPTH = 0.25
# fixed strut from body line to wheel axle so the rim sits at stance depth
WHEEL_STRUT = STANCE_DEPTH - WHEEL_RADIUS
BODY_MASS = 1.0

HIP_LIMIT = 1.5
KNEE_LIMIT = 2.5


class DesignError(ValueError):
    pass


class ModuleKind(Enum):
    BODY = "body"
    LEG = "leg"
    WHEEL = "wheel"

    @property
    def n_joints(self) -> int:
        return {"body": 0, "leg": 2, "wheel": 1}[self.value]


@dataclass(frozen=True)
class Module:
    node_id: int
    kind: ModuleKind
    x: float


@dataclass(frozen=True)
class DesignGraph:
    name: str
    body_length: float
    nodes: tuple[Module, ...]

    def __post_init__(self):
        bodies = [n for n in self.nodes if n.kind is ModuleKind.BODY]
        if len(bodies) != 1:
            raise DesignError("multiple bodies" if bodies else "no body")
        if self.nodes[0].kind is not ModuleKind.BODY:
            raise DesignError("body must be node 0")
        if [n.node_id for n in self.nodes] != list(range(len(self.nodes))):
            raise DesignError("node ids must be dense 0..n-1")
        half = self.body_length / 2 + 1e-12
        seen = set()
        for n in self.nodes[1:]:
            if abs(n.x) > half:
                raise DesignError(f"attachment x={n.x} outside body of length {self.body_length}")
            key = (n.kind, round(n.x, 9))
            if key in seen:
                raise DesignError(f"duplicate {n.kind.value} at x={n.x}")
            seen.add(key)

    # -- structure -----------------------------------------------------
    @property
    def limbs(self) -> tuple[Module, ...]:
        return self.nodes[1:]

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple((0, n.node_id) for n in self.limbs)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_joints(self) -> int:
        return sum(n.kind.n_joints for n in self.limbs)

    @property
    def state_dim(self) -> int:
        return 6 + 3 * self.n_joints

    def joint_slices(self) -> dict[int, slice]:
        """Canonical joint range of each limb node."""
        out, j = {}, 0
        for n in self.limbs:
            out[n.node_id] = slice(j, j + n.kind.n_joints)
            j += n.kind.n_joints
        return out

    def nodes_of(self, kind: ModuleKind) -> list[Module]:
        return [n for n in self.nodes if n.kind is kind]

    def signature(self) -> tuple:
        """Structural identity: sorted (kind, x) of limbs plus body length."""
        return (round(self.body_length, 9),
                tuple(sorted((n.kind.value, round(n.x, 9)) for n in self.limbs)))

    def joint_kinds(self) -> np.ndarray:
        """Per joint: 0 hip, 1 knee, 2 wheel."""
        out = []
        for n in self.limbs:
            out += [0, 1] if n.kind is ModuleKind.LEG else [2]
        return np.array(out, dtype=np.int64)

    def serialize(self) -> str:
        lines = [f"# design {self.name}", f"body length={self.body_length!r}"]
        lines += [f"limb kind={n.kind.value} x={n.x!r}" for n in self.limbs]
        return "\n".join(lines) + "\n"


def build_design(name: str, limbs, body_length: float = BODY_LENGTH) -> DesignGraph:
    """Canonical ordering: body first, then limbs by (x, kind)."""
    limbs = sorted(((ModuleKind(k) if not isinstance(k, ModuleKind) else k, float(x)) for k, x in limbs),
                   key=lambda kx: (kx[1], kx[0].value))
    for k, _ in limbs:
        if k is ModuleKind.BODY:
            raise DesignError("multiple bodies")
    nodes = [Module(0, ModuleKind.BODY, 0.0)]
    nodes += [Module(i + 1, k, x) for i, (k, x) in enumerate(limbs)]
    return DesignGraph(name, float(body_length), tuple(nodes))


def _kv(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise DesignError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_design(text: str, name: str = "design") -> DesignGraph:
    body_length = None
    limbs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        # tolerate spaces around '='
        line = " ".join(line.replace("=", " = ").split()).replace(" = ", "=")
        head, *rest = line.split()
        fields = _kv(rest, lineno)
        if head == "body":
            if body_length is not None:
                raise DesignError(f"line {lineno}: multiple bodies")
            try:
                body_length = float(fields["length"])
            except (KeyError, ValueError):
                raise DesignError(f"line {lineno}: body needs length=<float>") from None
        elif head == "limb":
            kind = fields.get("kind")
            if kind not in ("leg", "wheel"):
                raise DesignError(f"line {lineno}: unknown kind {kind!r}")
            try:
                x = float(fields["x"])
            except (KeyError, ValueError):
                raise DesignError(f"line {lineno}: limb needs x=<float>") from None
            limbs.append((kind, x))
        else:
            raise DesignError(f"line {lineno}: unknown entry {head!r}")
    if body_length is None:
        raise DesignError("no body declared")
    return build_design(name, limbs, body_length)


def load_design(path) -> DesignGraph:
    path = Path(path)
    if not path.is_file():
        raise DesignError(f"design file not found: {path}")
    return parse_design(path.read_text(), name=path.stem)


TRAIN_NAMES = ("wheels-front", "wheels-mid", "wheels-rear")
TEST_NAMES = ("legs-three", "wheel-fore", "wheel-aft")


def builtin_design(name: str) -> DesignGraph:
    try:
        text = resources.files("modmbrl.designs").joinpath(f"{name}.design").read_text()
    except FileNotFoundError:
        raise DesignError(f"unknown builtin design {name!r}") from None
    return parse_design(text, name=name)


@dataclass(frozen=True)
class DesignSet:
    train: tuple[DesignGraph, ...]
    test: tuple[DesignGraph, ...]

    def __post_init__(self):
        names = {d.name for d in self.train} & {d.name for d in self.test}
        sigs = {d.signature() for d in self.train} & {d.signature() for d in self.test}
        if names or sigs:
            raise DesignError("train and test designs overlap")


def builtin_sets() -> DesignSet:
    return DesignSet(tuple(builtin_design(n) for n in TRAIN_NAMES),
                     tuple(builtin_design(n) for n in TEST_NAMES))


# -- kinematics ---------------------------------------------------------

def leg_length(knee: float) -> float:
    """Hip-to-foot distance of the two-link leg for a relative knee angle."""
    # equal links: the chain folds symmetrically about the hip-foot axis
    return THIGH * math.cos(knee / 2) + SHANK * math.cos(knee / 2)


NOMINAL_KNEE = 2.0 * math.acos(STANCE_DEPTH / (THIGH + SHANK))


def nominal_stance(d: DesignGraph) -> tuple[np.ndarray, np.ndarray]:
    """Nominal joint vector and mask of joints that carry a stance penalty.

    Legs: hip 0, knee folded so the foot sits ``STANCE_DEPTH`` below the
    body line. Wheels: entry 0 and mask False (no stance penalty).
    """
    q, mask = [], []
    for n in d.limbs:
        if n.kind is ModuleKind.LEG:
            q += [0.0, NOMINAL_KNEE]
            mask += [True, True]
        else:
            q.append(0.0)
            mask.append(False)
    return np.array(q), np.array(mask, dtype=bool)


def stance_penalty(d: DesignGraph, q: np.ndarray) -> np.ndarray:
    """Sum of squared deviations from nominal over leg joints (last axis)."""
    qn, mask = nominal_stance(d)
    dev = (np.asarray(q) - qn) * mask
    return (dev * dev).sum(axis=-1)


def geometry_arrays(d: DesignGraph):
    """Per-limb arrays consumed by the simulator kernels.

    Returns (kind, attach_x, joint_start) with kind 0 = leg, 1 = wheel.
    """
    kinds, xs, js = [], [], []
    j = 0
    for n in d.limbs:
        kinds.append(0 if n.kind is ModuleKind.LEG else 1)
        xs.append(n.x)
        js.append(j)
        j += n.kind.n_joints
    return (np.array(kinds, dtype=np.int64), np.array(xs, dtype=np.float64),
            np.array(js, dtype=np.int64))
