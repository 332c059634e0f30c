"""Molecule encoders: GIN message passing and a graph Transformer.

Both encoders consume MolecularGraph inputs and produce per-atom states
plus a graph-level vector. The GIN global state is the mean of final
node states; the Transformer appends one or more virtual nodes connected
to every atom and reads the global state off the virtual node. One
parameter set serves both the primary molecule and the conditional
context (shared encoder, two call sites).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, asdict

import numpy as np

from .chemgraph import (
    BondOrder, DISCONNECTED, MASK_ELEMENT, MolecularGraph,
    SUPPORTED_ELEMENTS, all_pairs_shortest_paths, disjoint_union,
)
from .numerics import (
    ParameterStore, Tensor, add, concat, constant, init_mlp, layer_norm,
    lookup, matmul, mean_rows, mlp_forward, mul, reshape,
    scale, scatter_sum, slice_cols, softmax, take_rows, transpose,
)

ATOM_TYPES: tuple[str, ...] = SUPPORTED_ELEMENTS
MASK_ATOM_ID = len(ATOM_TYPES)
ATOM_VOCAB_SIZE = len(ATOM_TYPES) + 1          # + mask token
BOND_VOCAB_SIZE = len(BondOrder)               # includes mask bond

GIN = "gin"
GRAPHORMER = "graphormer"


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = GIN
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    max_sp_distance: int = 20
    max_degree: int = 8
    max_virtual_nodes: int = 2

    def __post_init__(self):
        if self.kind not in (GIN, GRAPHORMER):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kind == GRAPHORMER and self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")

    @property
    def sp_buckets(self) -> int:
        # 0 = self, 1..max = clipped distance, then disconnected, virtual.
        return self.max_sp_distance + 3

    @property
    def sp_disconnected(self) -> int:
        return self.max_sp_distance + 1

    @property
    def sp_virtual(self) -> int:
        return self.max_sp_distance + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def named_config(kind: str, scale: str = "desk") -> EncoderConfig:
    """Stock configurations: "desk" for tests/examples, "full" matching
    the conventional published sizes (GIN 5x300, Transformer-small
    6x512x8)."""
    if scale == "desk":
        return EncoderConfig(kind=kind, layers=2, hidden_dim=64, heads=4)
    if scale == "full":
        if kind == GIN:
            return EncoderConfig(kind=GIN, layers=5, hidden_dim=300)
        return EncoderConfig(kind=GRAPHORMER, layers=6, hidden_dim=512,
                             heads=8)
    raise ValueError(f"unknown scale {scale!r}")


@dataclass
class EncodedMolecule:
    node_states: Tensor            # (n_atoms, hidden)
    global_state: Tensor           # (1, hidden)
    virtual_states: Tensor | None = None   # (n_virtual, hidden)


def atom_type_id(element: str) -> int:
    if element == MASK_ELEMENT:
        return MASK_ATOM_ID
    return ATOM_TYPES.index(element)


# ---------------------------------------------------------------------------
# Per-graph structural constants (dtype-independent parts cached by graph
# identity; graphs are immutable once built)
# ---------------------------------------------------------------------------

@dataclass
class _GraphFeatures:
    atom_ids: np.ndarray
    degree_ids: np.ndarray         # raw degrees, clipped at lookup time
    bond_ids: np.ndarray
    incidence: np.ndarray          # (n, n_bonds) 0/1
    adjacency: np.ndarray          # (n, n) 0/1
    sp_dist: np.ndarray            # (n, n), -1 disconnected
    # Edge contributions along shortest paths, grouped by path position:
    # pos_entries[k] = (i_idx, j_idx, bond_idx) arrays for pairs whose
    # tie-broken shortest path has length > k.
    pos_entries: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    path_len: np.ndarray           # (n, n) int, 0 where no usable path


_FEATURE_CACHE: "weakref.WeakKeyDictionary[MolecularGraph, dict[int, _GraphFeatures]]" \
    = weakref.WeakKeyDictionary()


def _graph_features(g: MolecularGraph, max_path: int) -> _GraphFeatures:
    per_graph = _FEATURE_CACHE.setdefault(g, {})
    cached = per_graph.get(max_path)
    if cached is not None:
        return cached
    n = len(g.atoms)
    atom_ids = np.array([atom_type_id(a.element) for a in g.atoms],
                        dtype=np.int64)
    degree_ids = np.array([g.degree(i) for i in range(n)], dtype=np.int64)
    bond_ids = np.array([int(b.order) for b in g.bonds], dtype=np.int64)
    incidence = np.zeros((n, len(g.bonds)))
    adjacency = np.zeros((n, n))
    for k, b in enumerate(g.bonds):
        incidence[b.i, k] = incidence[b.j, k] = 1.0
        adjacency[b.i, b.j] = adjacency[b.j, b.i] = 1.0
    sp = all_pairs_shortest_paths(g)
    path_len = np.zeros((n, n), dtype=np.int64)
    by_pos: list[list[tuple[int, int, int]]] = []
    for i in range(n):
        for j in range(n):
            path = sp.paths[i][j]
            if not path:
                continue
            usable = min(len(path), max_path)
            path_len[i, j] = usable
            for k in range(usable):
                while len(by_pos) <= k:
                    by_pos.append([])
                by_pos[k].append((i, j, path[k]))
    pos_entries = []
    for rows in by_pos:
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        pos_entries.append((arr[:, 0], arr[:, 1], arr[:, 2]))
    feats = _GraphFeatures(atom_ids, degree_ids, bond_ids, incidence,
                           adjacency, sp.dist, pos_entries, path_len)
    per_graph[max_path] = feats
    return feats


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def init_encoder(store: ParameterStore, cfg: EncoderConfig,
                 rng: np.random.Generator, prefix: str = "enc") -> None:
    h = cfg.hidden_dim
    store.embedding(f"{prefix}.atom_emb", (ATOM_VOCAB_SIZE, h), rng)
    store.embedding(f"{prefix}.bond_emb", (BOND_VOCAB_SIZE, h), rng)
    if cfg.kind == GIN:
        for l in range(cfg.layers):
            init_mlp(store, f"{prefix}.gin{l}", (h, h, h), rng)
            store.zeros(f"{prefix}.gin{l}.eps", (1,))
        return
    store.embedding(f"{prefix}.degree_emb", (cfg.max_degree + 1, h), rng)
    store.embedding(f"{prefix}.virtual_emb", (cfg.max_virtual_nodes, h), rng)
    store.zeros(f"{prefix}.sp_bias", (cfg.sp_buckets, cfg.heads))
    store.embedding(f"{prefix}.path_emb", (cfg.max_sp_distance, h), rng)
    for l in range(cfg.layers):
        p = f"{prefix}.gf{l}"
        for w in ("wq", "wk", "wv", "wo"):
            store.weight(f"{p}.{w}", (h, h), rng)
        store.add(f"{p}.ln1.g", np.ones(h))
        store.zeros(f"{p}.ln1.b", h)
        init_mlp(store, f"{p}.ffn", (h, h, h), rng)
        store.add(f"{p}.ln2.g", np.ones(h))
        store.zeros(f"{p}.ln2.b", h)
    store.add(f"{prefix}.final_ln.g", np.ones(h))
    store.zeros(f"{prefix}.final_ln.b", h)


# ---------------------------------------------------------------------------
# GIN
# ---------------------------------------------------------------------------

def gin_layer(store: ParameterStore, layer_prefix: str, node_states: Tensor,
              edge_states: Tensor | None, adjacency: Tensor,
              incidence: Tensor | None) -> Tensor:
    """One aggregation step:
    MLP((1 + eps) * h_v + sum_u h_u + sum_u e_uv) with learnable eps."""
    eps = store[f"{layer_prefix}.eps"]
    agg = add(add(node_states, scale(node_states, eps)),
              matmul(adjacency, node_states))
    if edge_states is not None and incidence is not None:
        agg = add(agg, matmul(incidence, edge_states))
    return mlp_forward(store, agg, layer_prefix, 2)


def gin_encode(store: ParameterStore, cfg: EncoderConfig, g: MolecularGraph,
               prefix: str = "enc") -> EncodedMolecule:
    if not g.atoms:
        raise ValueError("cannot encode an empty graph")
    feats = _graph_features(g, cfg.max_sp_distance)
    dtype = store.dtype
    h = lookup(store[f"{prefix}.atom_emb"], feats.atom_ids)
    adjacency = constant(feats.adjacency, dtype)
    if len(g.bonds):
        edges = lookup(store[f"{prefix}.bond_emb"], feats.bond_ids)
        incidence = constant(feats.incidence, dtype)
    else:
        edges = incidence = None
    for l in range(cfg.layers):
        h = gin_layer(store, f"{prefix}.gin{l}", h, edges, adjacency,
                      incidence)
    return EncodedMolecule(node_states=h, global_state=mean_rows(h))


# ---------------------------------------------------------------------------
# Graph Transformer
# ---------------------------------------------------------------------------

def _sp_buckets(cfg: EncoderConfig, sp_dist: np.ndarray, n_total: int,
                virtual_members: list[np.ndarray]) -> np.ndarray:
    """Bucket ids (n_total, n_total) for the spatial-bias table: self,
    clipped distance, disconnected, or virtual link."""
    n = sp_dist.shape[0]
    buckets = np.full((n_total, n_total), cfg.sp_disconnected, dtype=np.int64)
    clipped = np.clip(sp_dist, 0, cfg.max_sp_distance)
    clipped[sp_dist == DISCONNECTED] = cfg.sp_disconnected
    buckets[:n, :n] = clipped
    for v, members in enumerate(virtual_members):
        row = n + v
        buckets[row, members] = cfg.sp_virtual
        buckets[members, row] = cfg.sp_virtual
        buckets[row, row] = 0
    np.fill_diagonal(buckets[:n, :n], 0)
    return buckets


def _edge_encoding(store: ParameterStore, prefix: str,
                   feats: _GraphFeatures, n_total: int,
                   dtype) -> Tensor | None:
    """Shortest-path edge bias c (n_total, n_total): per pair, the mean
    over path edges of bond-embedding . position-weight products."""
    if not feats.pos_entries:
        return None
    n = feats.sp_dist.shape[0]
    size = n_total * n_total
    bond_emb = store[f"{prefix}.bond_emb"]
    path_emb = store[f"{prefix}.path_emb"]
    acc = None
    for k, (i_idx, j_idx, b_idx) in enumerate(feats.pos_entries):
        emb = lookup(bond_emb, feats.bond_ids[b_idx])      # (m_k, h)
        w_k = transpose(take_rows(path_emb, np.array([k])))  # (h, 1)
        dots = reshape(matmul(emb, w_k), (-1,))            # (m_k,)
        contrib = scatter_sum(dots, i_idx * n_total + j_idx, size)
        acc = contrib if acc is None else add(acc, contrib)
    inv = np.zeros((n_total, n_total))
    nz = feats.path_len > 0
    inv[:n, :n][nz] = 1.0 / feats.path_len[nz]
    acc = mul(acc, constant(inv.reshape(-1), dtype))
    return reshape(acc, (n_total, n_total))


def graphormer_attention(store: ParameterStore, layer_prefix: str,
                         node_states: Tensor, spatial_bias: Tensor,
                         edge_bias: Tensor | None,
                         cfg: EncoderConfig) -> Tensor:
    """Multi-head attention with additive spatial and edge-path biases.

    ``spatial_bias`` is (n, n, heads) flattened to (n*n, heads);
    ``edge_bias`` is a shared (n, n) term added to every head.
    """
    n, h = node_states.shape
    dh = h // cfg.heads
    q = matmul(node_states, store[f"{layer_prefix}.wq"])
    k = matmul(node_states, store[f"{layer_prefix}.wk"])
    v = matmul(node_states, store[f"{layer_prefix}.wv"])
    heads_out = []
    for head in range(cfg.heads):
        lo, hi = head * dh, (head + 1) * dh
        qh, kh, vh = (slice_cols(t, lo, hi) for t in (q, k, v))
        scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
        b_head = reshape(slice_cols(spatial_bias, head, head + 1), (n, n))
        scores = add(scores, b_head)
        if edge_bias is not None:
            scores = add(scores, edge_bias)
        heads_out.append(matmul(softmax(scores), vh))
    out = heads_out[0] if len(heads_out) == 1 else concat(heads_out, axis=1)
    return matmul(out, store[f"{layer_prefix}.wo"])


def graphormer_encode(store: ParameterStore, cfg: EncoderConfig,
                      g: MolecularGraph,
                      virtual_groups: list[list[int]] | None = None,
                      prefix: str = "enc") -> EncodedMolecule:
    """Encode with appended virtual nodes (default: one spanning all
    atoms). The global state is the first virtual node's final state."""
    if not g.atoms:
        raise ValueError("cannot encode an empty graph")
    n = len(g.atoms)
    if virtual_groups is None:
        virtual_groups = [list(range(n))]
    if not 1 <= len(virtual_groups) <= cfg.max_virtual_nodes:
        raise ValueError(
            f"virtual node count {len(virtual_groups)} outside "
            f"1..{cfg.max_virtual_nodes}")
    feats = _graph_features(g, cfg.max_sp_distance)
    dtype = store.dtype
    n_total = n + len(virtual_groups)

    atom_in = add(lookup(store[f"{prefix}.atom_emb"], feats.atom_ids),
                  lookup(store[f"{prefix}.degree_emb"],
                         np.clip(feats.degree_ids, 0, cfg.max_degree)))
    virt_in = take_rows(store[f"{prefix}.virtual_emb"],
                        np.arange(len(virtual_groups)))
    h = concat([atom_in, virt_in], axis=0)

    members = [np.asarray(m, dtype=np.int64) for m in virtual_groups]
    buckets = _sp_buckets(cfg, feats.sp_dist, n_total, members)
    spatial = lookup(store[f"{prefix}.sp_bias"], buckets.reshape(-1))
    edge_bias = _edge_encoding(store, prefix, feats, n_total, dtype)

    for l in range(cfg.layers):
        p = f"{prefix}.gf{l}"
        normed = layer_norm(h, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        h = add(h, graphormer_attention(store, p, normed, spatial,
                                        edge_bias, cfg))
        normed = layer_norm(h, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        h = add(h, mlp_forward(store, normed, f"{p}.ffn", 2))
    h = layer_norm(h, store[f"{prefix}.final_ln.g"],
                   store[f"{prefix}.final_ln.b"])
    nodes = take_rows(h, np.arange(n))
    virtual = take_rows(h, np.arange(n, n_total))
    return EncodedMolecule(node_states=nodes,
                           global_state=take_rows(virtual, np.array([0])),
                           virtual_states=virtual)


# ---------------------------------------------------------------------------
# Dispatch and context encoding
# ---------------------------------------------------------------------------

def encode_molecule(store: ParameterStore, cfg: EncoderConfig,
                    g: MolecularGraph, prefix: str = "enc",
                    ) -> EncodedMolecule:
    if cfg.kind == GIN:
        return gin_encode(store, cfg, g, prefix)
    return graphormer_encode(store, cfg, g, prefix=prefix)


def encode_context(store: ParameterStore, cfg: EncoderConfig,
                   conditional: list[MolecularGraph],
                   prefix: str = "enc") -> Tensor:
    """Pool all conditional molecules into one context vector (1, hidden).

    GIN: mean over every atom of every conditional molecule. Transformer:
    one shared virtual node over the disjoint union. Empty context is the
    zero vector.
    """
    if not conditional:
        return constant(np.zeros((1, cfg.hidden_dim)), store.dtype)
    if cfg.kind == GIN:
        states = [gin_encode(store, cfg, g, prefix).node_states
                  for g in conditional]
        stacked = states[0] if len(states) == 1 else concat(states, axis=0)
        return mean_rows(stacked)
    union, _ = disjoint_union(conditional)
    return graphormer_encode(store, cfg, union, prefix=prefix).global_state


def encode_reaction_sides(store: ParameterStore, cfg: EncoderConfig,
                          reactants: list[MolecularGraph],
                          products: list[MolecularGraph],
                          prefix: str = "enc") -> Tensor:
    """Reaction-level embedding: disjoint union of both sides with one
    virtual node spanning the reactant atoms and one spanning the product
    atoms; returns the concatenated virtual states (1, 2*hidden)."""
    if cfg.kind != GRAPHORMER:
        raise ValueError("reaction-side encoding requires the graphormer "
                         "encoder (virtual-node construction)")
    union, offsets = disjoint_union(reactants + products)
    sizes = [len(m.atoms) for m in reactants + products]
    r_atoms: list[int] = []
    p_atoms: list[int] = []
    for k, (off, size) in enumerate(zip(offsets, sizes)):
        target = r_atoms if k < len(reactants) else p_atoms
        target.extend(range(off, off + size))
    enc = graphormer_encode(store, cfg, union,
                            virtual_groups=[r_atoms, p_atoms], prefix=prefix)
    states = enc.virtual_states
    return concat([take_rows(states, np.array([0])),
                   take_rows(states, np.array([1]))], axis=1)


__all__ = [
    "ATOM_TYPES", "ATOM_VOCAB_SIZE", "BOND_VOCAB_SIZE", "MASK_ATOM_ID",
    "GIN", "GRAPHORMER", "EncoderConfig", "EncodedMolecule",
    "named_config", "atom_type_id", "init_encoder",
    "gin_layer", "gin_encode", "graphormer_attention", "graphormer_encode",
    "encode_molecule", "encode_context", "encode_reaction_sides",
]
