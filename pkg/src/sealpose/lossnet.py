"""Energy networks E(x, y): a residual MLP and a graph-attention encoder.

Both variants read per-joint features whose layout depends on the input
mechanism:

* ``M1`` 3D only: ``[y_j, onehot_j]`` into one encoder and a scalar head.
* ``M2`` two encoders (2D side ``[x_j, onehot_j]``, 3D side
  ``[y_j, onehot_j]``) whose global descriptors meet in a bilinear form.
* ``M3`` fused: ``[x_j, y_j, onehot_j]`` into one encoder and a scalar head.
* ``M4`` the M1 energy plus a sum of per-joint bilinear terms between small
  projections of ``x_j`` and ``y_j``.

The graph encoder prepends a learnable virtual node, adds a per-head bias
indexed by clamped hop distance to the attention logits (one table shared by
all layers, with a separate entry for pairs touching the virtual node) and
reads the virtual node out after a final layer norm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, NumericError
from .params import ParamStore
from .skeleton import SkeletonSpec, compute_spd

PREFIX = "lossnet."
VARIANTS = ("graph", "mlp")
MECHANISMS = ("M1", "M2", "M3", "M4")


@dataclass(frozen=True)
class LossNetConfig:
    variant: str = "graph"
    mechanism: str = "M3"
    d_embed: int = 32
    d_model: int = 64
    heads: int = 4
    depth: int = 3
    spd_max: int = 8
    mlp_hidden: int = 512
    mlp_blocks: int = 2
    local_width: int = 8
    edge_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", str(self.variant).lower())
        object.__setattr__(self, "mechanism", str(self.mechanism).upper())

    def check(self) -> "LossNetConfig":
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown loss-net variant {self.variant!r}; expected one of {VARIANTS}")
        if self.mechanism not in MECHANISMS:
            raise ContractError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.spd_max < 1:
            raise ContractError("spd_max must be >= 1")
        if min(self.d_embed, self.d_model, self.mlp_hidden, self.local_width) < 1:
            raise ContractError("widths must be >= 1")
        if self.depth < 0 or self.mlp_blocks < 0:
            raise ContractError("depth and mlp_blocks must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossNetConfig":
        return cls(**d).check()

    def with_(self, **changes) -> "LossNetConfig":
        return replace(self, **changes).check()


# ---------------------------------------------------------------------------
# node features


def feature_width(mechanism: str, n_joints: int, side: str = "main") -> int:
    """Per-node feature width for ``mechanism``; ``side`` is "2d"/"3d" for M2 and M4."""
    mechanism = mechanism.upper()
    if mechanism == "M3":
        return 2 + 3 + n_joints
    if mechanism in ("M1", "M4") and side in ("main", "3d"):
        return 3 + n_joints
    if mechanism == "M2":
        return (2 if side == "2d" else 3) + n_joints
    raise ContractError(f"no {side!r} feature set for mechanism {mechanism!r}")


def _batched(a) -> tuple[Node, bool]:
    a = ad.const(a)
    if a.ndim == 2:
        return a.reshape((1,) + a.shape), True
    return a, False


def build_node_features(mechanism: str, x, y) -> dict[str, Node]:
    """Per-joint feature sets, keyed by encoder ("main", or "2d" and "3d").

    Inputs may be single poses ((J,2), (J,3)) or batches; outputs are always
    batched (B, J, F). M4 returns its 3D-only set as "main" together with the
    raw "2d"/"3d" sides used by the local term.
    """
    mechanism = str(mechanism).upper()
    if mechanism not in MECHANISMS:
        raise ContractError(f"unknown mechanism {mechanism!r}")
    x, _ = _batched(x)
    y, _ = _batched(y)
    if x.shape[:2] != y.shape[:2] or x.shape[-1] != 2 or y.shape[-1] != 3:
        raise ContractError(f"inconsistent shapes x={x.shape} y={y.shape}")
    b, j = y.shape[:2]
    onehot = ad.const(np.broadcast_to(np.eye(j), (b, j, j)))
    if mechanism == "M1":
        return {"main": ad.concat([y, onehot], axis=-1)}
    if mechanism == "M3":
        return {"main": ad.concat([x, y, onehot], axis=-1)}
    if mechanism == "M2":
        return {"2d": ad.concat([x, onehot], axis=-1), "3d": ad.concat([y, onehot], axis=-1)}
    return {"main": ad.concat([y, onehot], axis=-1), "2d": x, "3d": y}


def _encoders(config: LossNetConfig) -> tuple[str, ...]:
    return ("enc2d", "enc3d") if config.mechanism == "M2" else ("enc",)


# ---------------------------------------------------------------------------
# parameters


def init_lossnet(n_joints: int, config: LossNetConfig = LossNetConfig(), store: ParamStore | None = None) -> ParamStore:
    """Weights uniform in +-1/sqrt(fan_in); biases, attention bias tables and the
    virtual-node embedding start as described per layer below."""
    config.check()
    store = ParamStore(config.seed) if store is None else store
    rng = np.random.default_rng(config.seed)

    def lin(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{name}.bias", np.zeros(fan_out))

    def ln(name, width):
        store.add(f"{name}.gain", np.ones(width))
        store.add(f"{name}.bias", np.zeros(width))

    sides = {"enc": "main", "enc2d": "2d", "enc3d": "3d"}
    for enc in _encoders(config):
        width = feature_width(config.mechanism, n_joints, sides[enc])
        p = f"{PREFIX}{enc}"
        if config.variant == "graph":
            d = config.d_model
            lin(f"{p}.embed", width, config.d_embed)
            lin(f"{p}.proj", config.d_embed, d)
            store.add(f"{p}.vnode", rng.normal(0.0, 1.0 / np.sqrt(d), size=d))
            store.add(f"{p}.spatial_bias", np.zeros((config.heads, config.spd_max + 2)))
            if config.edge_bias:
                store.add(f"{p}.edge_bias", np.zeros((config.depth, config.heads, config.spd_max + 2)))
            for layer in range(config.depth):
                q = f"{p}.layer{layer}"
                ln(f"{q}.ln1", d)
                for proj in ("q", "k", "v", "o"):
                    lin(f"{q}.{proj}", d, d)
                ln(f"{q}.ln2", d)
                lin(f"{q}.ff1", d, 2 * d)
                lin(f"{q}.ff2", 2 * d, d)
            ln(f"{p}.final_ln", d)
        else:
            hdim = config.mlp_hidden
            lin(f"{p}.in", n_joints * width, hdim)
            for blk in range(config.mlp_blocks):
                lin(f"{p}.block{blk}.fc1", hdim, hdim)
                lin(f"{p}.block{blk}.fc2", hdim, hdim)

    desc = descriptor_width(config)
    if config.mechanism == "M2":
        bound = 1.0 / np.sqrt(desc)
        store.add(f"{PREFIX}bilinear", rng.uniform(-bound, bound, size=(desc, desc)))
    elif config.variant == "graph":
        lin(f"{PREFIX}head.fc1", desc, desc)
        lin(f"{PREFIX}head.fc2", desc, 1)
    else:
        lin(f"{PREFIX}head.fc", desc, 1)

    if config.mechanism == "M4":
        w = config.local_width
        store.add(f"{PREFIX}local.f2d.weight", rng.uniform(-1 / np.sqrt(2), 1 / np.sqrt(2), size=(n_joints, 2, w)))
        store.add(f"{PREFIX}local.f2d.bias", np.zeros((n_joints, w)))
        store.add(f"{PREFIX}local.f3d.weight", rng.uniform(-1 / np.sqrt(3), 1 / np.sqrt(3), size=(n_joints, 3, w)))
        store.add(f"{PREFIX}local.f3d.bias", np.zeros((n_joints, w)))
        store.add(f"{PREFIX}local.W", rng.uniform(-1 / np.sqrt(w), 1 / np.sqrt(w), size=(n_joints, w, w)))
    return store


def descriptor_width(config: LossNetConfig) -> int:
    return config.d_model if config.variant == "graph" else config.mlp_hidden


# ---------------------------------------------------------------------------
# graph encoder


@lru_cache(maxsize=32)
def _bias_index(edges: tuple, n_joints: int, spd_max: int) -> np.ndarray:
    spec = SkeletonSpec(tuple(str(i) for i in range(n_joints)), edges)
    spd = compute_spd(spec, spd_max).clamped()
    idx = np.full((n_joints + 1, n_joints + 1), spd_max + 1, dtype=np.int64)
    idx[1:, 1:] = spd
    return idx


def bias_index(spec: SkeletonSpec, spd_max: int) -> np.ndarray:
    """Bias-table column for each token pair; token 0 is the virtual node."""
    return _bias_index(spec.edges, spec.n_joints, spd_max)


def graph_attention_layer(
    h: Node,
    p: Mapping[str, Node],
    prefix: str,
    bias: Node,
    heads: int,
    trace: list | None = None,
) -> Node:
    """One pre-norm block: h + MHA(LN(h)) followed by h + FFN(LN(h)).

    ``bias`` is the (heads, N, N) additive logit bias already gathered from
    the hop-distance table. When ``trace`` is a list, a dict with the
    attention weights, the per-head mixed values (before the output
    projection) and the value projections is appended.
    """
    b, n, d = h.shape
    dh = d // heads
    z = ad.layer_norm(h, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])

    def split(t):
        return ad.transpose(t.reshape((b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ad.linear(z, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]))
    k = split(ad.linear(z, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]))
    v = split(ad.linear(z, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]))
    logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + bias
    if not np.all(np.isfinite(logits.value)):
        raise NumericError(f"non-finite attention logits in {prefix}")
    attn = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(attn, v)
    if trace is not None:
        trace.append({"attention": attn.value.copy(), "mixed": mixed.value.copy(), "values": v.value.copy()})
    merged = ad.transpose(mixed, (0, 2, 1, 3)).reshape((b, n, d))
    h = h + ad.linear(merged, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])

    z = ad.layer_norm(h, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    ff = ad.relu(ad.linear(z, p[f"{prefix}.ff1.weight"], p[f"{prefix}.ff1.bias"]))
    return h + ad.linear(ff, p[f"{prefix}.ff2.weight"], p[f"{prefix}.ff2.bias"])


def _graph_descriptor(p, prefix: str, feats: Node, config: LossNetConfig, spec: SkeletonSpec, trace) -> Node:
    b, j, _ = feats.shape
    if spec.n_joints != j:
        raise ContractError(f"skeleton has {spec.n_joints} joints, features have {j}")
    e = ad.linear(feats, p[f"{prefix}.embed.weight"], p[f"{prefix}.embed.bias"])
    h = ad.linear(e, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"])
    vnode = p[f"{prefix}.vnode"].reshape((1, 1, config.d_model)) + ad.const(np.zeros((b, 1, config.d_model)))
    h = ad.concat([vnode, h], axis=1)
    idx = bias_index(spec, config.spd_max)
    bias = ad.getitem(p[f"{prefix}.spatial_bias"], (slice(None), idx))
    for layer in range(config.depth):
        layer_bias = bias
        if config.edge_bias:
            layer_bias = bias + ad.getitem(p[f"{prefix}.edge_bias"], (layer, slice(None), idx))
        h = graph_attention_layer(h, p, f"{prefix}.layer{layer}", layer_bias, config.heads, trace)
    h = ad.layer_norm(h, p[f"{prefix}.final_ln.gain"], p[f"{prefix}.final_ln.bias"])
    return h[:, 0, :]


def _mlp_descriptor(p, prefix: str, feats: Node, config: LossNetConfig) -> Node:
    b = feats.shape[0]
    h = ad.relu(ad.linear(feats.reshape((b, -1)), p[f"{prefix}.in.weight"], p[f"{prefix}.in.bias"]))
    for blk in range(config.mlp_blocks):
        r = ad.relu(ad.linear(h, p[f"{prefix}.block{blk}.fc1.weight"], p[f"{prefix}.block{blk}.fc1.bias"]))
        h = h + ad.linear(r, p[f"{prefix}.block{blk}.fc2.weight"], p[f"{prefix}.block{blk}.fc2.bias"])
    return h


def _descriptor(p, enc: str, feats: Node, config: LossNetConfig, spec: SkeletonSpec, trace) -> Node:
    prefix = PREFIX + enc
    if config.variant == "graph":
        return _graph_descriptor(p, prefix, feats, config, spec, trace)
    return _mlp_descriptor(p, prefix, feats, config)


def _scalar_head(p, g: Node, config: LossNetConfig) -> Node:
    if config.variant == "graph":
        r = ad.relu(ad.linear(g, p[PREFIX + "head.fc1.weight"], p[PREFIX + "head.fc1.bias"]))
        out = ad.linear(r, p[PREFIX + "head.fc2.weight"], p[PREFIX + "head.fc2.bias"])
    else:
        out = ad.linear(g, p[PREFIX + "head.fc.weight"], p[PREFIX + "head.fc.bias"])
    return out.reshape((g.shape[0],))


def _local_energy(p, x2d: Node, y3d: Node) -> Node:
    # per joint: f2d_j(x_j)^T W_j f3d_j(y_j)
    a = ad.matmul(ad.transpose(x2d, (1, 0, 2)), p[PREFIX + "local.f2d.weight"])  # (J, B, w)
    a = ad.transpose(a, (1, 0, 2)) + p[PREFIX + "local.f2d.bias"]  # (B, J, w)
    c = ad.matmul(ad.transpose(y3d, (1, 0, 2)), p[PREFIX + "local.f3d.weight"])
    c = ad.transpose(c, (1, 0, 2)) + p[PREFIX + "local.f3d.bias"]
    aw = ad.transpose(ad.matmul(ad.transpose(a, (1, 0, 2)), p[PREFIX + "local.W"]), (1, 0, 2))  # (B, J, w)
    return (aw * c).sum(axis=(1, 2))


def lossnet_energy(
    params: Mapping[str, Node | np.ndarray],
    config: LossNetConfig,
    x,
    y,
    spec: SkeletonSpec,
    trace: list | None = None,
) -> Node:
    """Energy of (x, y): shape (B,) for batched inputs, a 0-d node for a single pose.

    ``x`` is the normalized 2D input, ``y`` the 3D pose in model units.
    """
    p = {k: ad.const(v) for k, v in params.items() if k.startswith(PREFIX)}
    xb, single = _batched(x)
    yb, _ = _batched(y)
    if yb.shape[1] != spec.n_joints:
        raise ContractError(f"pose has {yb.shape[1]} joints, skeleton has {spec.n_joints}")
    feats = build_node_features(config.mechanism, xb, yb)
    if config.mechanism == "M2":
        g2 = _descriptor(p, "enc2d", feats["2d"], config, spec, trace)
        g3 = _descriptor(p, "enc3d", feats["3d"], config, spec, trace)
        energy = (ad.matmul(g2, p[PREFIX + "bilinear"]) * g3).sum(axis=-1)
    else:
        energy = _scalar_head(p, _descriptor(p, "enc", feats["main"], config, spec, trace), config)
        if config.mechanism == "M4":
            energy = energy + _local_energy(p, feats["2d"], feats["3d"])
    return energy.reshape(()) if single else energy


def energy_values(params, config: LossNetConfig, x, y, spec: SkeletonSpec, batch_size: int = 512) -> np.ndarray:
    """Plain-array energies for a batch, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    parts = [
        lossnet_energy(params, config, x[i : i + batch_size], y[i : i + batch_size], spec).value
        for i in range(0, len(y), batch_size)
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def permute_joint_params(params: ParamStore, config: LossNetConfig, perm) -> ParamStore:
    """Relabel every per-joint parameter so that new joint ``i`` is old joint ``perm[i]``.

    Together with permuting the inputs and the skeleton, this leaves the
    energy unchanged.
    """
    perm = np.asarray(perm, dtype=int)
    j = len(perm)
    out = params.copy()
    sides = {"enc": "main", "enc2d": "2d", "enc3d": "3d"}
    for enc in _encoders(config):
        width = feature_width(config.mechanism, j, sides[enc])
        coord = width - j
        if config.variant == "graph":
            name = f"{PREFIX}{enc}.embed.weight"
            w = params[name].copy()
            w[coord:] = params[name][coord:][perm]
            out[name] = w
        else:
            name = f"{PREFIX}{enc}.in.weight"
            w = params[name].reshape(j, width, -1)
            w = w[perm].copy()
            w[:, coord:, :] = w[:, coord:, :][:, perm, :]
            out[name] = w.reshape(j * width, -1)
    if config.mechanism == "M4":
        for suffix in ("f2d.weight", "f2d.bias", "f3d.weight", "f3d.bias", "W"):
            name = f"{PREFIX}local.{suffix}"
            out[name] = params[name][perm]
    return out
