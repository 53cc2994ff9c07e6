"""Attention-based graph network mapping entity states to per-vehicle controls.

Every vehicle and obstacle is a node carrying an 8-feature row
[x, y, theta, v, goal_x, goal_y, goal_theta, radius-or-zero]; each vehicle
receives edges from all other nodes, obstacles receive none.  Stacked
residual attention blocks exchange information between nodes, and a scaled
tanh head emits bounded (pedal, steer) commands per node.

Neighbor aggregation happens in a canonical order (nodes sorted by the byte
pattern of their input features), and matrix products are position-stable,
which together make the forward pass bit-exact under any permutation of the
input nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import dynamics
from .autodiff import Tensor
from .scenario import Obstacle, TargetPose
from .dynamics import VehicleState

NODE_FEATURE_DIM = 8
EPS_DENOM = 1e-8  # absolute floor below which the score sum counts as degenerate
REL_DENOM = 0.05  # ... and relative to the largest |score|: a near-cancelling
                  # sum makes the ratio weights blow up, so those rows fall
                  # back to uniform attention (keeps |alpha| <= m/REL_DENOM)
CHECKPOINT_MAGIC = "SWARM-MPC-AGNN"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3            # residual block pairs (two attention blocks each)
    d_hidden: int = 32         # latent width of every node representation
    encoder_depth: int = 2     # halving steps in the scoring encoder
    use_unet: bool = True      # deep encoder/decoder scoring with skip connections
    use_concat: bool = True    # pair input = [self, self - neighbor] instead of neighbor alone
    use_graph: bool = True     # False drops all neighbor aggregation (per-node MLP)
    pedal_max: float = 1.0
    steer_max: float = dynamics.STEER_LIMIT
    feature_scale: float = 15.0  # divide metre-valued features by this (the
                                 # default world half-extent); raw metre inputs
                                 # saturate the tanh head and training stalls

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_hidden < 2 or self.d_hidden % 2 != 0:
            raise ValueError("d_hidden must be even and >= 2")
        if self.encoder_depth < 1:
            raise ValueError("encoder_depth must be >= 1")
        if self.pair_dim // (2**self.encoder_depth) < 1:
            raise ValueError("encoder_depth too deep for d_hidden")
        if not 0.0 < self.pedal_max <= dynamics.PEDAL_LIMIT:
            raise ValueError("pedal_max must lie in (0, pedal limit]")
        if not 0.0 < self.steer_max <= dynamics.STEER_LIMIT:
            raise ValueError("steer_max must lie in (0, steer limit]")
        if not self.feature_scale > 0.0:
            raise ValueError("feature_scale must be > 0")

    @property
    def pair_dim(self) -> int:
        """Width of the per-edge input row."""
        return 2 * self.d_hidden if self.use_concat else self.d_hidden

    @property
    def encoder_dims(self) -> list[int]:
        return [self.pair_dim // (2 ** (j + 1)) for j in range(self.encoder_depth)]

    @property
    def latent_dim(self) -> int:
        return self.encoder_dims[-1]

    @property
    def n_blocks(self) -> int:
        return 2 * self.layers


# ---------------------------------------------------------------------------
# graph construction


@dataclass
class GraphInstance:
    """Node features plus directed-edge structure for one scene snapshot.

    Nodes are ordered vehicles-first (input order), then obstacles.  The
    per-vehicle neighbor lists are kept in canonical (feature-byte) order so
    downstream reductions are independent of the input ordering.
    """

    features: np.ndarray          # (n_nodes, NODE_FEATURE_DIM)
    n_vehicles: int
    n_obstacles: int
    neighbors: list[list[int]]    # in-neighbors per node; empty for obstacles

    @property
    def n_nodes(self) -> int:
        return self.n_vehicles + self.n_obstacles

    def edges(self) -> list[tuple[int, int]]:
        """Directed (source, destination) pairs."""
        return [(j, i) for i, nbrs in enumerate(self.neighbors) for j in nbrs]


def build_graph(
    states: Sequence[VehicleState],
    targets: Sequence[TargetPose],
    obstacles: Sequence[Obstacle],
    vehicle_edges: bool = True,
) -> GraphInstance:
    """Assemble the scene graph.

    `vehicle_edges=False` drops vehicle-to-vehicle edges (obstacle edges stay),
    which is how the sequential lower bound for the step-efficiency metric is
    simulated.
    """
    if len(states) < 1:
        raise ValueError("need at least one vehicle")
    if len(states) != len(targets):
        raise ValueError("states/targets length mismatch")
    n_veh, n_obs = len(states), len(obstacles)
    n = n_veh + n_obs
    feats = np.zeros((n, NODE_FEATURE_DIM))
    for i, (s, t) in enumerate(zip(states, targets)):
        feats[i] = (s.x, s.y, s.theta, s.v, t.x, t.y, t.theta, 0.0)
    for k, ob in enumerate(obstacles):
        # an obstacle is a parked entity whose goal equals its current pose
        feats[n_veh + k] = (ob.x, ob.y, 0.0, 0.0, ob.x, ob.y, 0.0, ob.r)

    order = sorted(range(n), key=lambda i: feats[i].tobytes())
    neighbors: list[list[int]] = []
    for i in range(n):
        if i >= n_veh:
            neighbors.append([])
        elif vehicle_edges:
            neighbors.append([j for j in order if j != i])
        else:
            neighbors.append([j for j in order if j >= n_veh])
    return GraphInstance(features=feats, n_vehicles=n_veh, n_obstacles=n_obs, neighbors=neighbors)


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; also fixes the checkpoint block layout."""
    d = config.d_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("input.w", (NODE_FEATURE_DIM, d)),
        ("input.b", (d,)),
    ]
    for k in range(config.n_blocks):
        shapes.append((f"block{k}.self.w", (d, d)))
        if not config.use_graph:
            continue
        px = config.pair_dim
        if config.use_unet:
            dims = [px] + config.encoder_dims
            for j in range(config.encoder_depth):
                shapes.append((f"block{k}.key{j}.w", (dims[j], dims[j + 1])))
                shapes.append((f"block{k}.key{j}.b", (dims[j + 1],)))
            for head, out_dim in (("query", px), ("value", d)):
                cur = dims[-1]
                for j in range(config.encoder_depth):
                    skip = dims[config.encoder_depth - 1 - j]
                    out = skip if j < config.encoder_depth - 1 else out_dim
                    shapes.append((f"block{k}.{head}{j}.w", (cur + skip, out)))
                    shapes.append((f"block{k}.{head}{j}.b", (out,)))
                    cur = out
        else:
            lat = config.latent_dim
            shapes.append((f"block{k}.key0.w", (px, lat)))
            shapes.append((f"block{k}.key0.b", (lat,)))
            shapes.append((f"block{k}.query0.w", (lat, px)))
            shapes.append((f"block{k}.query0.b", (px,)))
            shapes.append((f"block{k}.value0.w", (lat, d)))
            shapes.append((f"block{k}.value0.b", (d,)))
    shapes.append(("output.w", (d, 2)))
    shapes.append(("output.b", (2,)))
    return shapes


@dataclass
class ModelParams:
    """All trainable weights, keyed by name in declared order."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    version: int = CHECKPOINT_VERSION

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameter_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            t.data = arrays[name].copy()


def init_params(config: ModelConfig, seed: int, trainable: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in declared order, with two
    overrides that keep the raw-ratio attention trainable:

    - every value head's final layer starts at zero, so blocks begin as plain
      self-transforms and the neighbor branch wakes up gradually;
    - every query head's final layer starts as (zero weights, uniform positive
      bias over the self features), so initial scores are equal and positive;
      the score sum then starts far from the cancellation regime where the
      ratio weights spike.

    Both layers still receive gradients through their non-zero inputs.
    """
    depth = config.encoder_depth if config.use_unet else 1
    value_tail = f"value{depth - 1}.w"
    query_tail_w = f"query{depth - 1}.w"
    query_tail_b = f"query{depth - 1}.b"
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name == "input.b" or name.endswith(query_tail_b):
            data = np.zeros(shape)
            if name != "input.b":
                data[: config.d_hidden] = 1.0 / config.d_hidden
        elif name.endswith(".b") or name.endswith(value_tail) or name.endswith(query_tail_w):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=trainable)
    return ModelParams(config=config, tensors=tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(
        config=config,
        tensors={name: Tensor(np.zeros(shape)) for name, shape in parameter_shapes(config)},
    )


# ---------------------------------------------------------------------------
# forward pass


def _affine(t: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.affine(t, w, b)


def _encode(x: Tensor, p: dict[str, Tensor], prefix: str, config: ModelConfig) -> list[Tensor]:
    """Scoring encoder; returns all activations [input, ..., latent]."""
    acts = [x]
    steps = config.encoder_depth if config.use_unet else 1
    cur = x
    for j in range(steps):
        cur = _affine(cur, p[f"{prefix}.key{j}.w"], p[f"{prefix}.key{j}.b"])
        if config.use_unet:
            cur = ad.relu(cur)
        acts.append(cur)
    return acts


def _decode(
    acts: list[Tensor], p: dict[str, Tensor], prefix: str, head: str, config: ModelConfig
) -> Tensor:
    """Decoder head fed by the latent, with skip connections from matching
    encoder activations (concatenate, then linear)."""
    if not config.use_unet:
        return _affine(acts[-1], p[f"{prefix}.{head}0.w"], p[f"{prefix}.{head}0.b"])
    cur = acts[-1]
    depth = config.encoder_depth
    for j in range(depth):
        skip = acts[depth - 1 - j]
        cur = _affine(ad.concat([cur, skip], axis=-1), p[f"{prefix}.{head}{j}.w"], p[f"{prefix}.{head}{j}.b"])
        if j < depth - 1:
            cur = ad.relu(cur)
    return cur


@dataclass
class _GroupIndex:
    """Flat index arrays for a stack of same-shape graphs."""

    n_graphs: int
    n_nodes: int        # per graph
    n_vehicles: int     # per graph
    n_neighbors: int    # per vehicle
    src: np.ndarray     # (P,) neighbor rows
    dst: np.ndarray     # (P,) vehicle rows, repeated per neighbor
    veh_rows: np.ndarray  # (B*V,)


def _group_index(graphs: Sequence[GraphInstance]) -> _GroupIndex:
    g0 = graphs[0]
    n, v = g0.n_nodes, g0.n_vehicles
    n_nbr = len(g0.neighbors[0]) if v else 0
    src: list[int] = []
    dst: list[int] = []
    veh_rows: list[int] = []
    for gi, g in enumerate(graphs):
        if g.n_nodes != n or g.n_vehicles != v or (v and len(g.neighbors[0]) != n_nbr):
            raise ModelError("grouped graphs must share node/edge shape")
        base = gi * n
        for i in range(v):
            veh_rows.append(base + i)
            nbrs = g.neighbors[i]
            if len(nbrs) != n_nbr:
                raise ModelError("grouped graphs must share node/edge shape")
            for j in nbrs:
                src.append(base + j)
                dst.append(base + i)
    return _GroupIndex(
        n_graphs=len(graphs),
        n_nodes=n,
        n_vehicles=v,
        n_neighbors=n_nbr,
        src=np.asarray(src, dtype=np.intp),
        dst=np.asarray(dst, dtype=np.intp),
        veh_rows=np.asarray(veh_rows, dtype=np.intp),
    )


def _attention_block(
    z: Tensor,
    block: int,
    p: dict[str, Tensor],
    config: ModelConfig,
    idx: _GroupIndex,
    record: bool,
) -> tuple[Tensor, np.ndarray | None, int]:
    """One neighbor-aggregation step: W_self z_i plus the score-weighted sum
    of decoded neighbor values.  Returns (output rows, raw scores, number of
    degenerate score sums that fell back to uniform weights).

    Edge-free graphs run the same op sequence on zero-width edge arrays, so
    per-prediction dispatch cost stays flat across graph sizes.
    """
    prefix = f"block{block}"
    self_t = ad.matmul(z, p[f"{prefix}.self.w"])
    if not config.use_graph:
        return self_t, None, 0

    bv, m = idx.veh_rows.size, idx.n_neighbors
    if config.use_concat:
        x = ad.pair_concat(z, idx.src, idx.dst)
    else:
        x = ad.take(z, idx.src)

    acts = _encode(x, p, prefix, config)
    q = _decode(acts, p, prefix, "query", config)          # (P, pair_dim)
    vals = _decode(acts, p, prefix, "value", config)       # (P, d_hidden)
    s = ad.row_dot(q, x)                                   # (P,) raw scores
    s2 = ad.reshape(s, (bv, m))
    denom = ad.tsum(s2, axis=1, keepdims=True)             # (bv, 1)

    if m:
        threshold = np.maximum(EPS_DENOM, REL_DENOM * np.max(np.abs(s2.data), axis=1, keepdims=True))
    else:
        threshold = EPS_DENOM
    fb = np.abs(denom.data) < threshold
    fallback_count = int(np.count_nonzero(fb)) if m else 0
    keep = (~fb).astype(np.float64)
    safe = denom * keep + Tensor(fb.astype(np.float64))
    alpha = ad.div(s2, safe)
    if fallback_count:
        alpha = alpha * keep + Tensor(fb.astype(np.float64) * (1.0 / m))

    weighted = ad.weighted_rows(alpha, ad.reshape(vals, (bv, m, config.d_hidden)))
    out = ad.index_add(self_t, idx.veh_rows, weighted)
    scores = s.data.reshape(idx.n_graphs, idx.n_vehicles, m).copy() if record else None
    return out, scores, fallback_count


@dataclass
class ForwardResult:
    controls: Tensor                     # (n_nodes, 2): pedal, steer per node
    attention: list[np.ndarray] | None   # per block, raw scores (n_vehicles, n_neighbors)
    fallback_count: int


@dataclass
class BatchForwardResult:
    controls: Tensor        # (sum of node counts, 2), graphs in input order
    fallback_count: int


def _forward_stack(
    graphs: Sequence[GraphInstance],
    params: ModelParams,
    record_attention: bool,
) -> tuple[Tensor, list[np.ndarray] | None, int]:
    config = params.config
    p = params.tensors
    idx = _group_index(graphs)
    feats = np.concatenate([g.features for g in graphs], axis=0)
    if config.feature_scale != 1.0:
        feats = feats.copy()
        feats[:, [0, 1, 4, 5, 7]] /= config.feature_scale  # metre-valued columns
    z = ad.relu(_affine(Tensor(feats), p["input.w"], p["input.b"]))

    attn: list[np.ndarray] = []
    fallback = 0
    for k in range(config.layers):
        a_even, s_even, f_even = _attention_block(z, 2 * k, p, config, idx, record_attention)
        z_even = ad.relu(a_even)
        a_odd, s_odd, f_odd = _attention_block(z_even, 2 * k + 1, p, config, idx, record_attention)
        z = ad.relu(a_odd + z)  # residual: block output plus the previous odd layer
        fallback += f_even + f_odd
        if record_attention:
            attn.extend([s_even, s_odd])

    raw = _affine(z, p["output.w"], p["output.b"])
    bounds = Tensor(np.array([config.pedal_max, config.steer_max]))
    controls = ad.tanh(raw) * bounds
    return controls, (attn if record_attention else None), fallback


def forward(
    graph: GraphInstance, params: ModelParams, record_attention: bool = False
) -> ForwardResult:
    """Run the network on one graph; controls come back for every node
    (obstacle rows are trained toward zero and ignored at inference)."""
    controls, attn, fallback = _forward_stack([graph], params, record_attention)
    attention = None
    if attn is not None:
        attention = [a[0] if a is not None else None for a in attn]
    return ForwardResult(controls=controls, attention=attention, fallback_count=fallback)


def forward_batch(graphs: Sequence[GraphInstance], params: ModelParams) -> BatchForwardResult:
    """Forward many graphs, grouping identical shapes into stacked calls.

    Grouping is purely a speed trick: rows are processed position-stably, so
    each graph's outputs are bitwise what a solo forward would produce.
    """
    if not graphs:
        raise ModelError("forward_batch needs at least one graph")
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, g in enumerate(graphs):
        key = (g.n_vehicles, g.n_obstacles, len(g.neighbors[0]) if g.n_vehicles else 0)
        groups.setdefault(key, []).append(i)

    pieces: list[tuple[int, Tensor]] = []
    fallback = 0
    for key in sorted(groups):
        members = groups[key]
        out, _, fb = _forward_stack([graphs[i] for i in members], params, False)
        fallback += fb
        n = graphs[members[0]].n_nodes
        for slot, i in enumerate(members):
            pieces.append((i, out[slot * n : (slot + 1) * n]))
    pieces.sort(key=lambda item: item[0])
    return BatchForwardResult(
        controls=ad.concat([t for _, t in pieces], axis=0), fallback_count=fallback
    )


# ---------------------------------------------------------------------------
# per-node reference path


@dataclass
class AttentionResult:
    output: np.ndarray          # (d_hidden,)
    scores: np.ndarray | None   # (m,) raw scores in the order given
    alpha: np.ndarray | None    # (m,) normalised weights
    fallback: bool


def u_attention(
    z_i: np.ndarray,
    z_neighbors: np.ndarray,
    params: ModelParams,
    block: int = 0,
) -> AttentionResult:
    """Single-node attention: W_self z_i plus the score-weighted neighbor sum.

    Neighbors are aggregated in the order given.  With no neighbors the
    output is exactly W_self z_i.
    """
    config = params.config
    p = params.tensors
    with ad.no_grad():
        self_out = ad.matmul(Tensor(np.asarray(z_i)[None, :]), p[f"block{block}.self.w"])
        zn = np.asarray(z_neighbors, dtype=np.float64).reshape(-1, config.d_hidden)
        m = zn.shape[0]
        if not config.use_graph or m == 0:
            return AttentionResult(self_out.data[0].copy(), None, None, False)

        zi = np.repeat(np.asarray(z_i, dtype=np.float64)[None, :], m, axis=0)
        x = Tensor(np.concatenate([zi, zi - zn], axis=1) if config.use_concat else zn)
        prefix = f"block{block}"
        acts = _encode(x, p, prefix, config)
        q = _decode(acts, p, prefix, "query", config)
        vals = _decode(acts, p, prefix, "value", config)
        s = ad.row_dot(q, x)
        denom = ad.tsum(ad.reshape(s, (1, m)), axis=1, keepdims=True)
        threshold = max(EPS_DENOM, REL_DENOM * float(np.max(np.abs(s.data))))
        if abs(float(denom.data[0, 0])) < threshold:
            alpha_arr = np.full(m, 1.0 / m)
            fallback = True
            alpha = Tensor(alpha_arr[None, :])
        else:
            alpha = ad.div(ad.reshape(s, (1, m)), denom)
            alpha_arr = alpha.data.reshape(m).copy()
            fallback = False
        weighted = ad.weighted_rows(alpha, ad.reshape(vals, (1, m, config.d_hidden)))
        out = self_out + weighted
    return AttentionResult(out.data[0].copy(), s.data.copy(), alpha_arr, fallback)


# ---------------------------------------------------------------------------
# inference policy


@dataclass
class PolicyOutput:
    controls: np.ndarray            # (n_vehicles, 2): pedal, steer
    attention: np.ndarray | None    # (n_blocks, n_vehicles, n_neighbors) raw scores
    fallback_count: int = 0


def make_policy(params: ModelParams, record_attention: bool = False):
    """Wrap trained weights as a graph -> PolicyOutput callable."""

    def policy(graph: GraphInstance) -> PolicyOutput:
        with ad.no_grad():
            res = forward(graph, params, record_attention=record_attention)
        controls = res.controls.data[: graph.n_vehicles].copy()
        attention = None
        if record_attention and params.config.use_graph and res.attention is not None:
            # edge-free graphs still report attention, as zero-width score rows
            mats = [
                a if a is not None else np.zeros((graph.n_vehicles, 0))
                for a in res.attention
            ]
            attention = np.stack(mats, axis=0)
        return PolicyOutput(controls=controls, attention=attention, fallback_count=res.fallback_count)

    return policy


# ---------------------------------------------------------------------------
# checkpoint IO: text header, then raw little-endian float64 blocks in
# declared parameter order


def save_params(params: ModelParams, path: str) -> None:
    c = params.config
    header_lines = [
        CHECKPOINT_MAGIC,
        f"version {params.version}",
        f"layers {c.layers}",
        f"d_hidden {c.d_hidden}",
        f"encoder_depth {c.encoder_depth}",
        f"use_unet {int(c.use_unet)}",
        f"use_concat {int(c.use_concat)}",
        f"use_graph {int(c.use_graph)}",
        f"pedal_max {c.pedal_max!r}",
        f"steer_max {c.steer_max!r}",
        f"feature_scale {c.feature_scale!r}",
        "end",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("ascii"))
        for name, shape in parameter_shapes(c):
            t = params.tensors[name]
            if t.shape != shape:
                raise CheckpointError(f"parameter {name} has shape {t.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path: str, trainable: bool = False) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nend\n"
    pos = blob.find(marker)
    if pos < 0 or not blob.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise CheckpointError(f"{path}: not a model checkpoint")
    fields: dict[str, str] = {}
    for line in blob[:pos].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        version = int(fields["version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig(
            layers=int(fields["layers"]),
            d_hidden=int(fields["d_hidden"]),
            encoder_depth=int(fields["encoder_depth"]),
            use_unet=bool(int(fields["use_unet"])),
            use_concat=bool(int(fields["use_concat"])),
            use_graph=bool(int(fields["use_graph"])),
            pedal_max=float(fields["pedal_max"]),
            steer_max=float(fields["steer_max"]),
            feature_scale=float(fields["feature_scale"]),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad checkpoint header: {e}") from e

    body = blob[pos + len(marker):]
    offset = 0
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        nbytes = int(np.prod(shape)) * 8
        chunk = body[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"{path}: truncated checkpoint at parameter {name}")
        data = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        tensors[name] = Tensor(data, requires_grad=trainable)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return ModelParams(config=config, tensors=tensors, version=version)
