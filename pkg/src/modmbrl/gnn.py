"""Per-module-kind graph networks for the policy, dynamics model and torque estimator.

One parameter set per module kind is reused at every node of that kind,
so one :class:`ParamStore` drives any design. A forward pass encodes each
node's input, exchanges messages along the star edges (mean aggregation),
applies a gated recurrent update and decodes per-node outputs.

Hidden states are carried as a tensor of shape ``(B, n_nodes, H)`` whose
second axis is indexed by node id.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .design import NOMINAL_KNEE, STANCE_DEPTH, DesignGraph, ModuleKind
from .diffcore import ParamStore, Tensor
from .simworld.constants import VMAX, WIN_N

KINDS = (ModuleKind.BODY, ModuleKind.LEG, ModuleKind.WHEEL)
ROLES = ("policy", "model", "torque")

LOGVAR_MIN, LOGVAR_MAX = -8.0, 2.0
LOGVAR_SHIFT = -1.0     # initial policy log-variance
NORM_EPS = 1e-5
NORM_MIN_MOMENTUM = 0.01
TERRAIN_SCALE = 10.0    # metres -> network units, window offset by stance depth


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 64
    mlp: int = 64
    channels: int = 8
    prop_steps: int = 1

    def __post_init__(self):
        for k in ("hidden", "mlp", "channels", "prop_steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    @property
    def terrain_features(self) -> int:
        return self.channels * _conv_len()


def _conv_len() -> int:
    l1 = (WIN_N - 5) // 2 + 1
    return (l1 - 3) // 2 + 1


# per-role input and output widths by kind (terrain features excluded)
_IN = {
    "policy": {ModuleKind.BODY: 2, ModuleKind.LEG: 5, ModuleKind.WHEEL: 2},
    "model": {ModuleKind.BODY: 5, ModuleKind.LEG: 9, ModuleKind.WHEEL: 4},
    "torque": {ModuleKind.BODY: 5, ModuleKind.LEG: 9, ModuleKind.WHEEL: 4},
}
_OUT = {
    "policy": {ModuleKind.LEG: 4, ModuleKind.WHEEL: 2},
    "model": {ModuleKind.BODY: 6, ModuleKind.LEG: 4, ModuleKind.WHEEL: 2},
    "torque": {ModuleKind.LEG: 2, ModuleKind.WHEEL: 1},
}
_TERRAIN = {"policy": True, "model": True, "torque": False}


def _orthogonal(rng, rows, cols, gain=1.0):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# ---------------------------------------------------------------------------
# design bookkeeping


class GraphIndex:
    """Index arrays that map a design onto per-kind batched tensors."""

    def __init__(self, d: DesignGraph):
        self.design = d
        self.n_nodes = d.n_nodes
        self.n_joints = d.n_joints
        self.node_ids = {k: np.array([n.node_id for n in d.nodes if n.kind is k], dtype=np.int64)
                         for k in KINDS}
        order = np.concatenate([self.node_ids[k] for k in KINDS])
        self.node_inverse = np.argsort(order)
        slices = d.joint_slices()
        self.joints = {}
        for k in (ModuleKind.LEG, ModuleKind.WHEEL):
            js = [np.arange(slices[i].start, slices[i].stop) for i in self.node_ids[k]]
            self.joints[k] = (np.stack(js) if js else np.zeros((0, k.n_joints), dtype=np.int64))
        jorder = np.concatenate([self.joints[k].reshape(-1) for k in (ModuleKind.LEG, ModuleKind.WHEEL)])
        self.joint_inverse = np.argsort(jorder)
        xs = {n.node_id: n.x for n in d.nodes}
        self.attach = {k: np.array([xs[i] for i in self.node_ids[k]]) for k in KINDS}
        self.limb_ids = np.array([n.node_id for n in d.limbs], dtype=np.int64)

    def count(self, kind) -> int:
        return len(self.node_ids[kind])


@lru_cache(maxsize=64)
def graph_index(d: DesignGraph) -> GraphIndex:
    return GraphIndex(d)


def _gather_joints(x: Tensor, gi: GraphIndex, kind) -> Tensor:
    """(B, J) -> (B, n_kind, joints_per_kind) in node order."""
    idx = gi.joints[kind]
    b = x.shape[0]
    return dc.reshape(dc.take(x, idx.reshape(-1), axis=1), (b, idx.shape[0], idx.shape[1]))


def _scatter_joints(parts: dict, gi: GraphIndex, b: int) -> Tensor:
    """Per-kind (B, n_kind, jpk) tensors -> (B, J) in canonical joint order."""
    flat = [dc.reshape(parts[k], (b, -1)) for k in (ModuleKind.LEG, ModuleKind.WHEEL)
            if gi.count(k)]
    return dc.take(dc.concat(flat, axis=1), gi.joint_inverse, axis=1)


# ---------------------------------------------------------------------------
# networks


class NodeNetworkSet:
    """Networks of one role (``policy``, ``model`` or ``torque``) in a shared store."""

    def __init__(self, store: ParamStore, role: str, cfg: NetConfig = NetConfig(), seed: int = 0):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.store, self.role, self.cfg = store, role, cfg
        rng = np.random.default_rng([seed, ROLES.index(role)])
        H, M = cfg.hidden, cfg.mlp
        tf = cfg.terrain_features if _TERRAIN[role] else 0
        for k in KINDS:
            p = f"{role}/{k.value}"
            nin = _IN[role][k] + (tf if k is ModuleKind.BODY else 0)
            self._dense(f"{p}/enc1", nin, M, rng)
            self._dense(f"{p}/enc2", M, H, rng)
            self._dense(f"{p}/msg", 2 * H, H, rng)
            store.add(f"{p}/gru/wx", np.concatenate([_orthogonal(rng, 2 * H, H) for _ in range(3)], axis=1))
            store.add(f"{p}/gru/wh", np.concatenate([_orthogonal(rng, H, H) for _ in range(3)], axis=1))
            store.add(f"{p}/gru/bx", np.zeros(3 * H))
            store.add(f"{p}/gru/bh", np.zeros(3 * H))
            if k in _OUT[role]:
                self._dense(f"{p}/dec1", H, M, rng)
                self._dense(f"{p}/dec2", M, _OUT[role][k], rng, zero=True)
        if tf:
            c = cfg.channels
            store.add(f"{role}/terrain/w1", _orthogonal(rng, c, 5).reshape(c, 1, 5))
            store.add(f"{role}/terrain/b1", np.zeros(c))
            store.add(f"{role}/terrain/w2", _orthogonal(rng, c, 3 * c).reshape(c, c, 3))
            store.add(f"{role}/terrain/b2", np.zeros(c))
            store.add(f"{role}/terrain/gamma", np.ones(tf))
            store.add(f"{role}/terrain/beta", np.zeros(tf))
            store.add(f"{role}/terrain/run_mean", np.zeros(tf), trainable=False)
            store.add(f"{role}/terrain/run_var", np.ones(tf), trainable=False)
            store.add(f"{role}/terrain/run_n", np.zeros(1), trainable=False)

    def _dense(self, name, nin, nout, rng, zero=False):
        w = np.zeros((nin, nout)) if zero else _orthogonal(rng, nin, nout)
        self.store.add(f"{name}/w", w)
        self.store.add(f"{name}/b", np.zeros(nout))

    def p(self, name: str) -> Tensor:
        return self.store[f"{self.role}/{name}"]

    def names(self) -> list[str]:
        return [n for n in self.store.trainable(self.role + "/")]

    # -- pieces ------------------------------------------------------------
    def _mlp(self, k, stem, x):
        a = dc.tanh(dc.linear(x, self.p(f"{k.value}/{stem}1/w"), self.p(f"{k.value}/{stem}1/b")))
        return dc.linear(a, self.p(f"{k.value}/{stem}2/w"), self.p(f"{k.value}/{stem}2/b"))

    def encode_terrain(self, window, train: bool = False) -> Tensor:
        """Body-relative window (B, 21) -> normalised features (B, channels * 4)."""
        window = dc.as_tensor(window)
        if window.ndim != 2 or window.shape[1] != WIN_N:
            raise dc.ShapeError("encode_terrain", window.shape, detail=f"expected (B, {WIN_N})")
        b = window.shape[0]
        x = dc.mul(dc.add(window, STANCE_DEPTH), TERRAIN_SCALE)
        x = dc.reshape(x, (b, 1, WIN_N))
        x = dc.tanh(dc.conv1d(x, self.p("terrain/w1"), self.p("terrain/b1"), stride=2))
        x = dc.tanh(dc.conv1d(x, self.p("terrain/w2"), self.p("terrain/b2"), stride=2))
        f = dc.reshape(x, (b, -1))
        mu, var, n = self.p("terrain/run_mean"), self.p("terrain/run_var"), self.p("terrain/run_n")
        if train:
            m = max(1.0 / (n.data[0] + 1.0), NORM_MIN_MOMENTUM)
            mu.data = (1 - m) * mu.data + m * f.data.mean(axis=0)
            var.data = (1 - m) * var.data + m * f.data.var(axis=0)
            n.data = n.data + 1.0
        scale = 1.0 / np.sqrt(var.data + NORM_EPS)
        z = dc.mul(dc.sub(f, mu.data), scale)
        return dc.add(dc.mul(z, self.p("terrain/gamma")), self.p("terrain/beta"))

    def propagate(self, gi: GraphIndex, inputs: dict, h: Tensor | None):
        """One or more message-passing rounds.

        ``inputs[kind]`` is (B, n_kind, in_kind). Returns per-kind decoded
        outputs and the new hidden tensor (B, n_nodes, H).
        """
        H = self.cfg.hidden
        kinds = [k for k in KINDS if gi.count(k)]
        b = inputs[ModuleKind.BODY].shape[0]
        for k in kinds:
            want = (b, gi.count(k), _IN[self.role][k] + (self.cfg.terrain_features
                    if k is ModuleKind.BODY and _TERRAIN[self.role] else 0))
            if tuple(inputs[k].shape) != want:
                raise dc.ShapeError(f"{self.role}.{k.value} input", inputs[k].shape, want)
        enc = {k: dc.tanh(self._mlp(k, "enc", inputs[k])) for k in kinds}
        if h is None:
            h = Tensor(np.zeros((b, gi.n_nodes, H)))
        elif tuple(h.shape) != (b, gi.n_nodes, H):
            raise dc.ShapeError("hidden", h.shape, (b, gi.n_nodes, H))
        n_limbs = gi.n_nodes - 1
        for _ in range(self.cfg.prop_steps):
            hk = {k: dc.take(h, gi.node_ids[k], axis=1) for k in kinds}
            msg = {k: dc.tanh(dc.linear(dc.concat([enc[k], hk[k]], axis=-1),
                                        self.p(f"{k.value}/msg/w"), self.p(f"{k.value}/msg/b")))
                   for k in kinds}
            msgs = self._assemble(gi, msg, kinds)
            if n_limbs:
                to_body = dc.mean(dc.take(msgs, gi.limb_ids, axis=1), axis=1, keepdims=True)
                from_body = msg[ModuleKind.BODY]
            else:
                to_body = Tensor(np.zeros((b, 1, H)))
                from_body = None
            new = {}
            for k in kinds:
                if k is ModuleKind.BODY:
                    agg = to_body
                else:
                    agg = dc.broadcast_to(from_body, (b, gi.count(k), H))
                new[k] = dc.gru_cell(dc.concat([enc[k], agg], axis=-1), hk[k],
                                     self.p(f"{k.value}/gru/wx"), self.p(f"{k.value}/gru/wh"),
                                     self.p(f"{k.value}/gru/bx"), self.p(f"{k.value}/gru/bh"))
            h = self._assemble(gi, new, kinds)
            hk = new
        out = {k: self._mlp(k, "dec", hk[k]) for k in kinds if k in _OUT[self.role]}
        return out, h

    @staticmethod
    def _assemble(gi, parts, kinds):
        cat = dc.concat([parts[k] for k in kinds], axis=1)
        return dc.take(cat, gi.node_inverse, axis=1)


def zero_hidden(d: DesignGraph, batch: int, cfg: NetConfig = NetConfig()) -> Tensor:
    return Tensor(np.zeros((batch, d.n_nodes, cfg.hidden)))


def hidden_map(h: Tensor | np.ndarray, d: DesignGraph) -> dict[int, np.ndarray]:
    """Node id -> (B, H) view of a hidden tensor."""
    arr = h.data if isinstance(h, Tensor) else np.asarray(h)
    if arr.shape[1] != d.n_nodes:
        raise ValueError(f"hidden has {arr.shape[1]} nodes, design {d.name} has {d.n_nodes}")
    return {n.node_id: arr[:, n.node_id] for n in d.nodes}


def _attach(gi, kind, b):
    return Tensor(np.broadcast_to(gi.attach[kind][None, :, None], (b, gi.count(kind), 1)).copy())


def _check_batch(op, t, b, width):
    if t.ndim != 2 or t.shape != (b, width):
        raise dc.ShapeError(op, t.shape, (b, width))


# ---------------------------------------------------------------------------
# policy

_POL_BODY_SCALE = np.array([5.0, 0.5])
_POL_QD_SCALE = 1.0 / 3.0


def policy_forward(net: NodeNetworkSet, d: DesignGraph, body, q, qd, terrain, h=None,
                   train: bool = False):
    """Action mean and log-variance (B, J) plus the new hidden tensor.

    ``body`` holds (pitch, pitch rate); ``q``/``qd`` are joint readings in
    canonical order; ``terrain`` is the body-relative height window.
    """
    gi = graph_index(d)
    body, q, qd = dc.as_tensor(body), dc.as_tensor(q), dc.as_tensor(qd)
    b = body.shape[0]
    _check_batch("policy body", body, b, 2)
    _check_batch("policy q", q, b, d.n_joints)
    _check_batch("policy qd", qd, b, d.n_joints)
    feats = net.encode_terrain(terrain, train)
    inputs = {ModuleKind.BODY: dc.reshape(dc.concat([dc.mul(body, _POL_BODY_SCALE), feats], axis=1),
                                          (b, 1, -1))}
    if gi.count(ModuleKind.LEG):
        lq = _gather_joints(q, gi, ModuleKind.LEG)
        lqd = _gather_joints(qd, gi, ModuleKind.LEG)
        off = np.array([0.0, NOMINAL_KNEE])
        inputs[ModuleKind.LEG] = dc.concat([dc.sub(lq, off), dc.mul(lqd, _POL_QD_SCALE),
                                            _attach(gi, ModuleKind.LEG, b)], axis=-1)
    if gi.count(ModuleKind.WHEEL):
        wqd = _gather_joints(qd, gi, ModuleKind.WHEEL)
        inputs[ModuleKind.WHEEL] = dc.concat([dc.mul(wqd, _POL_QD_SCALE),
                                              _attach(gi, ModuleKind.WHEEL, b)], axis=-1)
    out, h = net.propagate(gi, inputs, h)
    means, logvars = {}, {}
    for k, o in out.items():
        n = o.shape[-1] // 2
        means[k] = dc.mul(dc.tanh(o[..., :n]), VMAX)
        logvars[k] = dc.clamp(dc.add(o[..., n:], LOGVAR_SHIFT), LOGVAR_MIN, LOGVAR_MAX)
    return _scatter_joints(means, gi, b), _scatter_joints(logvars, gi, b), h


# ---------------------------------------------------------------------------
# dynamics model and torque estimator


def _limb_inputs(net, gi, s, a, b):
    """Normalised (q, qd, pending, a, x) per leg and (qd, pending, a, x) per wheel."""
    J = gi.n_joints
    q, qd, pend = s[:, 6:6 + J], s[:, 6 + J:6 + 2 * J], s[:, 6 + 2 * J:6 + 3 * J]
    inputs = {}
    if gi.count(ModuleKind.LEG):
        parts = [_gather_joints(t, gi, ModuleKind.LEG) for t in (q, qd, pend, a)]
        raw = dc.concat(parts, axis=-1)
        inputs[ModuleKind.LEG] = dc.concat([_normalise(net, "leg", raw),
                                            _attach(gi, ModuleKind.LEG, b)], axis=-1)
    if gi.count(ModuleKind.WHEEL):
        parts = [_gather_joints(t, gi, ModuleKind.WHEEL) for t in (qd, pend, a)]
        raw = dc.concat(parts, axis=-1)
        inputs[ModuleKind.WHEEL] = dc.concat([_normalise(net, "wheel", raw),
                                              _attach(gi, ModuleKind.WHEEL, b)], axis=-1)
    return inputs


def _normalise(net, kind, raw):
    mu = net.p(f"norm/{kind}/mean").data
    sd = net.p(f"norm/{kind}/std").data
    return dc.div(dc.sub(raw, mu), sd)


def _body_inputs(net, s, a, b):
    body = s[:, 2:6]
    effort = dc.mean(dc.square(a), axis=1, keepdims=True)
    raw = dc.concat([body, effort], axis=1)
    return _normalise(net, "body", raw)


def add_model_buffers(store: ParamStore, role: str):
    """Input normalisation and output scale buffers for model/torque roles."""
    widths = {"body": 5, "leg": 8, "wheel": 3}
    for k, w in widths.items():
        store.add(f"{role}/norm/{k}/mean", np.zeros(w), trainable=False)
        store.add(f"{role}/norm/{k}/std", np.ones(w), trainable=False)
    outs = {"body": 6, "leg": 4, "wheel": 2} if role == "model" else {"leg": 2, "wheel": 1}
    for k, w in outs.items():
        store.add(f"{role}/scale/{k}", np.ones(w), trainable=False)


def model_forward(net: NodeNetworkSet, d: DesignGraph, s, a, terrain, train: bool = False) -> Tensor:
    """Predicted next state ``s + delta`` with the pending slot set to ``a``."""
    gi = graph_index(d)
    s, a = dc.as_tensor(s), dc.as_tensor(a)
    b = s.shape[0]
    J = d.n_joints
    _check_batch("model state", s, b, d.state_dim)
    _check_batch("model action", a, b, J)
    feats = net.encode_terrain(terrain, train)
    inputs = {ModuleKind.BODY: dc.reshape(dc.concat([_body_inputs(net, s, a, b), feats], axis=1),
                                          (b, 1, -1))}
    inputs.update(_limb_inputs(net, gi, s, a, b))
    out, _ = net.propagate(gi, inputs, None)
    body_delta = dc.mul(dc.reshape(out[ModuleKind.BODY], (b, 6)), net.p("scale/body").data)
    dq, dqd = {}, {}
    for k, name in ((ModuleKind.LEG, "leg"), (ModuleKind.WHEEL, "wheel")):
        if k in out:
            o = dc.mul(out[k], net.p(f"scale/{name}").data)
            n = k.n_joints
            dq[k], dqd[k] = o[..., :n], o[..., n:]
    parts = [dc.add(s[:, :6], body_delta)]
    if J:
        parts += [dc.add(s[:, 6:6 + J], _scatter_joints(dq, gi, b)),
                  dc.add(s[:, 6 + J:6 + 2 * J], _scatter_joints(dqd, gi, b)),
                  a]
    return dc.concat(parts, axis=1)


def torque_forward(net: NodeNetworkSet, d: DesignGraph, s, a) -> Tensor:
    """Per-joint torque-proxy estimate (B, J)."""
    gi = graph_index(d)
    s, a = dc.as_tensor(s), dc.as_tensor(a)
    b = s.shape[0]
    _check_batch("torque state", s, b, d.state_dim)
    _check_batch("torque action", a, b, d.n_joints)
    inputs = {ModuleKind.BODY: dc.reshape(_body_inputs(net, s, a, b), (b, 1, -1))}
    inputs.update(_limb_inputs(net, gi, s, a, b))
    out, _ = net.propagate(gi, inputs, None)
    parts = {}
    for k, name in ((ModuleKind.LEG, "leg"), (ModuleKind.WHEEL, "wheel")):
        if k in out:
            parts[k] = dc.mul(out[k], net.p(f"scale/{name}").data)
    return _scatter_joints(parts, gi, b)


# ---------------------------------------------------------------------------


class Networks:
    """Policy, model and torque networks sharing one parameter store."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        self.policy = NodeNetworkSet(self.store, "policy", cfg, seed)
        self.model = NodeNetworkSet(self.store, "model", cfg, seed)
        add_model_buffers(self.store, "model")
        self.torque = NodeNetworkSet(self.store, "torque", cfg, seed)
        add_model_buffers(self.store, "torque")

    def role_checksum(self, role: str) -> str:
        sub = ParamStore()
        for k, t in self.store.items():
            if k.startswith(role + "/"):
                sub.add(k, t.data, trainable=t.requires_grad)
        return sub.checksum()
