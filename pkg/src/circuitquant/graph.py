"""Edge-level computational graph of a small decoder-only transformer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_k: int
    vocab: int
    seq_len: int
    batch: int = 1
    d_mlp: int = 0  # 0 -> attention-only

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_k", "vocab", "seq_len", "batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_mlp < 0:
            raise ConfigError("d_mlp must be non-negative")
        if self.n_heads * self.d_k != self.d_model:
            raise ConfigError(
                f"n_heads * d_k must equal d_model ({self.n_heads} * {self.d_k} != {self.d_model})"
            )

    @property
    def has_mlp(self) -> bool:
        return self.d_mlp > 0

    @classmethod
    def make(cls, n_layers, n_heads, d_model, vocab, seq_len, batch=1, d_mlp=0) -> "ModelConfig":
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        return cls(n_layers, n_heads, d_model, d_model // n_heads, vocab, seq_len, batch, d_mlp)


class NodeId(NamedTuple):
    kind: str  # "embed" | "head" | "mlp" | "unembed"
    layer: int = -1
    head: int = -1

    def __str__(self) -> str:
        if self.kind == "head":
            return f"a{self.layer}.{self.head}"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return self.kind

    @property
    def is_head(self) -> bool:
        return self.kind == "head"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text in ("embed", "unembed"):
            return cls(text)
        if text.startswith("a"):
            layer, head = text[1:].split(".")
            return Head(int(layer), int(head))
        if text.startswith("m"):
            return Mlp(int(text[1:]))
        raise ValueError(f"bad node id {text!r}")


EMBED = NodeId("embed")
UNEMBED = NodeId("unembed")


def Head(layer: int, head: int) -> NodeId:
    return NodeId("head", layer, head)


def Mlp(layer: int) -> NodeId:
    return NodeId("mlp", layer)


class Edge(NamedTuple):
    src: NodeId
    dst: NodeId

    def __str__(self) -> str:
        return f"{self.src}->{self.dst}"

    @classmethod
    def parse(cls, text: str) -> "Edge":
        a, b = text.split("->")
        return cls(NodeId.parse(a), NodeId.parse(b))


def topo_nodes(cfg: ModelConfig) -> list[NodeId]:
    nodes = [EMBED]
    for layer in range(cfg.n_layers):
        nodes.extend(Head(layer, h) for h in range(cfg.n_heads))
        if cfg.has_mlp:
            nodes.append(Mlp(layer))
    nodes.append(UNEMBED)
    return nodes


def _writes_before(src: NodeId, dst: NodeId) -> bool:
    """True when src's output is already in the residual stream dst reads."""
    if src.kind == "unembed" or dst.kind == "embed":
        return False
    if src.kind == "embed" or dst.kind == "unembed":
        return True
    if dst.kind == "head":
        return src.layer < dst.layer
    # dst is an MLP: it reads after its own layer's attention
    if src.kind == "head":
        return src.layer <= dst.layer
    return src.layer < dst.layer


def all_edges(cfg: ModelConfig) -> list[Edge]:
    """Every residual-stream edge, in reverse topological order of destination.

    Within a destination, sources are also visited latest-first.
    """
    nodes = topo_nodes(cfg)
    out = []
    for dst in reversed(nodes):
        for src in reversed(nodes):
            if _writes_before(src, dst):
                out.append(Edge(src, dst))
    return out


def edge_count(cfg: ModelConfig) -> int:
    H, L = cfg.n_heads, cfg.n_layers
    m = 1 if cfg.has_mlp else 0
    per_layer = H + m
    total = 0
    for layer in range(L):
        before = 1 + layer * per_layer
        total += H * before
        if m:
            total += before + H
    total += 1 + L * per_layer
    return total


@dataclass(frozen=True)
class ComputationalGraph:
    config: ModelConfig
    nodes: tuple[NodeId, ...]
    edges: tuple[Edge, ...]
    present: frozenset = field(default_factory=frozenset)

    @classmethod
    def full(cls, cfg: ModelConfig) -> "ComputationalGraph":
        edges = tuple(all_edges(cfg))
        return cls(cfg, tuple(topo_nodes(cfg)), edges, frozenset(edges))

    def with_present(self, edges: Iterable[Edge]) -> "ComputationalGraph":
        keep = frozenset(edges)
        extra = keep.difference(self.edges)
        if extra:
            raise ValueError(f"mask adds edges absent from the graph: {sorted(map(str, extra))[:3]}")
        return ComputationalGraph(self.config, self.nodes, self.edges, keep)

    def without(self, edges: Iterable[Edge]) -> "ComputationalGraph":
        return self.with_present(self.present.difference(edges))

    def is_present(self, e: Edge) -> bool:
        return e in self.present

    def incoming(self, dst: NodeId) -> list[Edge]:
        """All graph edges into dst (present or not), sources in topological order."""
        return [Edge(src, dst) for src in self.nodes if _writes_before(src, dst)]

    def index(self, node: NodeId) -> int:
        return self.nodes.index(node)

    def __iter__(self) -> Iterator[Edge]:
        return iter(enumerate_edges(self))

    def __len__(self) -> int:
        return len(self.present)


def enumerate_edges(graph: ComputationalGraph) -> list[Edge]:
    """Present edges in the deterministic sweep order."""
    return [e for e in graph.edges if e in graph.present]
