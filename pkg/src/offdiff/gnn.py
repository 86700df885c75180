"""Edge-gated graph convolutional network over batched offloading graphs.

Architecture (hidden width h, S stacked layers):

* node embedding: one-hot node type (user/server, 2) -> h
* edge embedding: 8 input channels -> h. The channels are the instance's
  five edge features with the three cost channels passed through log1p to
  tame their scale, plus the noisy solution state (one-hot decision pair
  and the continuous value).
* time conditioning: sinusoidal embedding of the diffusion step through a
  shared two-layer MLP; each layer has its own projection to h that is
  added to the edge states before the layer.
* layer l: nodes first, gated by the current edge states, then edges

      h_i  <- h_i + silu(LN(U h_i + sum_{ij incident} m_ij sigma(e_ij) * V h_other + c))
      e_ij <- e_ij + silu(LN(A e_ij + B h_i + C h_j + b))

  where m_ij is the per-edge padding flag and the edge update reads the
  freshly updated endpoint states. Messages flow along each edge in both
  directions (dst aggregates V h_src and vice versa), so users and servers
  exchange information despite the bipartite orientation. When the padding
  mask is enabled, padded edge slots multiply their gate by 0 and therefore
  contribute exactly nothing to any node state; with the mask disabled the
  model reproduces the unprotected baseline used for the generalization
  ablation.
* heads: edge states -> 2 logits (decision distribution) and -> 1 value
  (predicted noise / regression output).

Per denoising trajectory the forward cost is O(h^2 S + V S + E S) plus the
embedding and head terms, i.e. linear in nodes and edges for fixed h, S;
parameters are enumerated in ``parameter_shapes``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .problem import OffloadInstance

__all__ = [
    "GnnConfig",
    "GnnModel",
    "BatchedGraph",
    "batch_instances",
    "init_params",
    "parameter_shapes",
    "sinusoidal_embedding",
    "forward_tape",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
NUM_EDGE_CHANNELS = 8   # 5 static features + one-hot decision (2) + value (1)


@dataclass(frozen=True)
class GnnConfig:
    hidden_dim: int = 64
    num_layers: int = 3
    time_dim: int = 32
    padding_mask_enabled: bool = True

    def __post_init__(self):
        if self.hidden_dim < 4:
            raise ValueError("hidden_dim must be >= 4")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even integer >= 2")


def parameter_shapes(cfg: GnnConfig) -> dict:
    """Name -> shape for every learnable array, in a stable order."""
    h, td = cfg.hidden_dim, cfg.time_dim
    shapes = {
        "node_embed.w": (2, h),
        "node_embed.b": (h,),
        "edge_embed.w": (NUM_EDGE_CHANNELS, h),
        "edge_embed.b": (h,),
        "time_mlp.w1": (td, td),
        "time_mlp.b1": (td,),
        "time_mlp.w2": (td, td),
        "time_mlp.b2": (td,),
    }
    for i in range(cfg.num_layers):
        shapes.update({
            f"layer{i}.time_proj.w": (td, h),
            f"layer{i}.time_proj.b": (h,),
            f"layer{i}.edge.a": (h, h),
            f"layer{i}.edge.b_src": (h, h),
            f"layer{i}.edge.c_dst": (h, h),
            f"layer{i}.edge.bias": (h,),
            f"layer{i}.edge_norm.gamma": (h,),
            f"layer{i}.edge_norm.beta": (h,),
            f"layer{i}.node.u": (h, h),
            f"layer{i}.node.v": (h, h),
            f"layer{i}.node.bias": (h,),
            f"layer{i}.node_norm.gamma": (h,),
            f"layer{i}.node_norm.beta": (h,),
        })
    shapes.update({
        "head_discrete.w": (h, 2),
        "head_discrete.b": (2,),
        "head_continuous.w": (h, 1),
        "head_continuous.b": (1,),
    })
    return shapes


@dataclass
class GnnModel:
    config: GnnConfig
    params: dict  # name -> np.ndarray (float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "GnnModel":
        return GnnModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_params(cfg: GnnConfig, seed: int) -> GnnModel:
    """Variance-scaled init: weights ~ N(0, 1/fan_in), biases 0, norms (1, 0)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", ".bias", ".b1", ".b2", ".beta")):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return GnnModel(cfg, params)


@dataclass
class BatchedGraph:
    """Dense edge-slot batch of offloading graphs.

    Graphs are padded to common node/edge slot counts; padded edge slots
    carry zeroed features, endpoints pointing at their graph's node 0, and
    mask 0. Flat index space: node slot n of graph g is g*N + n, edge slot
    e of graph g is g*E + e.
    """

    num_graphs: int
    node_slots: int
    edge_slots: int
    node_type: np.ndarray       # (B*N,) {0,1}
    edge_src: np.ndarray        # (B*E,) flat node index
    edge_dst: np.ndarray        # (B*E,)
    edge_graph: np.ndarray      # (B*E,) graph index
    edge_feat: np.ndarray       # (B*E, 5) raw features, zeros where padded
    edge_mask: np.ndarray       # (B*E, 1) 1.0 real / 0.0 padding
    num_edges: np.ndarray       # (B,) real edge count per graph
    _plans: dict = None         # cached RowScatter plans, keyed by role

    @property
    def total_edges(self) -> int:
        return self.num_graphs * self.edge_slots

    def real_edge_indices(self) -> np.ndarray:
        return np.flatnonzero(self.edge_mask[:, 0] > 0)

    def scatter_plan(self, role: str) -> ad.RowScatter:
        """Shared scatter plans: edges -> src nodes / dst nodes / graphs."""
        if self._plans is None:
            self._plans = {}
        if role not in self._plans:
            idx, rows = {
                "src": (self.edge_src, self.num_graphs * self.node_slots),
                "dst": (self.edge_dst, self.num_graphs * self.node_slots),
                "graph": (self.edge_graph, self.num_graphs),
            }[role]
            self._plans[role] = ad.RowScatter(idx, rows)
        return self._plans[role]


def batch_instances(instances, edge_slots=None, node_slots=None) -> BatchedGraph:
    """Pack instances into one dense batch.

    ``edge_slots``/``node_slots`` default to the batch maxima; pass larger
    values to reproduce a fixed padding level (e.g. evaluating graphs one
    at a time with the padding ratio they would see inside a training
    batch).
    """
    B = len(instances)
    E = max(inst.num_edges for inst in instances)
    N = max(inst.num_nodes for inst in instances)
    if edge_slots is not None:
        if edge_slots < E:
            raise ValueError(f"edge_slots {edge_slots} < largest graph ({E} edges)")
        E = int(edge_slots)
    if node_slots is not None:
        if node_slots < N:
            raise ValueError(f"node_slots {node_slots} < largest graph ({N} nodes)")
        N = int(node_slots)

    node_type = np.zeros(B * N, dtype=np.int64)
    edge_src = np.zeros(B * E, dtype=np.int64)
    edge_dst = np.zeros(B * E, dtype=np.int64)
    edge_graph = np.repeat(np.arange(B), E)
    edge_feat = np.zeros((B * E, 5))
    edge_mask = np.zeros((B * E, 1))
    num_edges = np.zeros(B, dtype=np.int64)

    for g, inst in enumerate(instances):
        L = inst.num_edges
        node_type[g * N: g * N + inst.num_nodes] = inst.node_types()
        sl = slice(g * E, g * E + L)
        edge_src[sl] = g * N + inst.edge_user
        edge_dst[sl] = g * N + inst.num_users + inst.edge_server
        edge_feat[sl] = inst.edge_features()
        edge_mask[sl] = 1.0
        edge_src[g * E + L: (g + 1) * E] = g * N
        edge_dst[g * E + L: (g + 1) * E] = g * N
        num_edges[g] = L
    return BatchedGraph(B, N, E, node_type, edge_src, edge_dst, edge_graph,
                        edge_feat, edge_mask, num_edges)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style sin/cos features of the (integer) diffusion step."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _edge_input_channels(batch: BatchedGraph, noisy_discrete, noisy_continuous):
    """Assemble the (B*E, 8) edge input array (done outside the tape).

    Static features are already zero on padded slots; the noisy channels
    are passed through untouched so that the mask-off ablation feels the
    full effect of noised padding slots, exactly like a model that never
    distinguishes them.
    """
    feat = batch.edge_feat
    x = np.empty((feat.shape[0], NUM_EDGE_CHANNELS))
    x[:, 0:3] = np.log1p(feat[:, 0:3])   # cost channels span decades
    x[:, 3:5] = feat[:, 3:5]
    x[:, 5:7] = np.asarray(noisy_discrete, dtype=np.float64)
    x[:, 7:8] = np.asarray(noisy_continuous, dtype=np.float64).reshape(-1, 1)
    return x


def forward_tape(model: GnnModel, batch: BatchedGraph, noisy_discrete,
                 noisy_continuous, t, edge_input_override=None):
    """Run the network on the tape; returns (logits, eps_hat, leaves, edge_input).

    ``t`` is one integer step per graph (broadcast from a scalar).
    ``leaves`` maps parameter names to their leaf tensors so callers can
    read gradients after a backward pass. ``edge_input`` is the leaf tensor
    of the assembled edge channels (used to test input gradients).
    """
    cfg = model.config
    leaves = {name: ad.parameter(arr) for name, arr in model.params.items()}
    P = leaves

    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                        (batch.num_graphs,))
    if edge_input_override is None:
        edge_x = ad.parameter(_edge_input_channels(batch, noisy_discrete, noisy_continuous))
    else:
        edge_x = edge_input_override

    node_onehot = ad.constant(np.eye(2)[batch.node_type])
    h = ad.add(ad.matmul(node_onehot, P["node_embed.w"]), P["node_embed.b"])
    e = ad.add(ad.matmul(edge_x, P["edge_embed.w"]), P["edge_embed.b"])

    t_sin = ad.constant(sinusoidal_embedding(t, cfg.time_dim))
    t_hid = ad.silu(ad.add(ad.matmul(t_sin, P["time_mlp.w1"]), P["time_mlp.b1"]))
    t_hid = ad.add(ad.matmul(t_hid, P["time_mlp.w2"]), P["time_mlp.b2"])

    mask = ad.constant(batch.edge_mask)
    num_nodes = batch.num_graphs * batch.node_slots
    plan_src = batch.scatter_plan("src")
    plan_dst = batch.scatter_plan("dst")
    plan_graph = batch.scatter_plan("graph")
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        t_edge = ad.gather_rows(
            ad.add(ad.matmul(t_hid, P[pre + "time_proj.w"]), P[pre + "time_proj.b"]),
            batch.edge_graph, plan=plan_graph,
        )
        e_in = ad.add(e, t_edge)

        gate = ad.sigmoid(e_in)
        if cfg.padding_mask_enabled:
            gate = ad.mul(gate, mask)
        h_src = ad.gather_rows(h, batch.edge_src, plan=plan_src)
        h_dst = ad.gather_rows(h, batch.edge_dst, plan=plan_dst)
        v_src = ad.matmul(h_src, P[pre + "node.v"])
        v_dst = ad.matmul(h_dst, P[pre + "node.v"])
        agg = ad.add(
            ad.scatter_add_rows(ad.mul(gate, v_src), batch.edge_dst, num_nodes, plan=plan_dst),
            ad.scatter_add_rows(ad.mul(gate, v_dst), batch.edge_src, num_nodes, plan=plan_src),
        )
        ph = ad.add(ad.add(ad.matmul(h, P[pre + "node.u"]), agg), P[pre + "node.bias"])
        h = ad.add(h, ad.silu(ad.layer_norm(ph, P[pre + "node_norm.gamma"],
                                            P[pre + "node_norm.beta"])))

        h_src = ad.gather_rows(h, batch.edge_src, plan=plan_src)
        h_dst = ad.gather_rows(h, batch.edge_dst, plan=plan_dst)
        q = ad.add(
            ad.add(ad.matmul(e_in, P[pre + "edge.a"]), ad.matmul(h_src, P[pre + "edge.b_src"])),
            ad.add(ad.matmul(h_dst, P[pre + "edge.c_dst"]), P[pre + "edge.bias"]),
        )
        e = ad.add(e_in, ad.silu(ad.layer_norm(q, P[pre + "edge_norm.gamma"],
                                               P[pre + "edge_norm.beta"])))

    logits = ad.add(ad.matmul(e, P["head_discrete.w"]), P["head_discrete.b"])
    eps_hat = ad.add(ad.matmul(e, P["head_continuous.w"]), P["head_continuous.b"])
    return logits, eps_hat, leaves, edge_x


def forward(model: GnnModel, batch: BatchedGraph, noisy_discrete, noisy_continuous, t):
    """Plain-array forward: (discrete logits (B*E,2), eps_hat (B*E,1))."""
    logits, eps_hat, _, _ = forward_tape(model, batch, noisy_discrete,
                                         noisy_continuous, t)
    return logits.value, eps_hat.value


def save_checkpoint(model: GnnModel, path):
    """Write config + named parameter arrays; round-trips bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "hidden_dim": model.config.hidden_dim,
            "num_layers": model.config.num_layers,
            "time_dim": model.config.time_dim,
            "padding_mask_enabled": model.config.padding_mask_enabled,
        },
    }
    arrays = {"param/" + k: v for k, v in model.params.items()}
    np.savez(path, __meta__=np.bytes_(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> GnnModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = GnnConfig(**meta["config"])
        params = {k[len("param/"):]: z[k].astype(np.float64)
                  for k in z.files if k.startswith("param/")}
    expected = parameter_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError("checkpoint parameter names do not match the config")
    return GnnModel(cfg, params)
