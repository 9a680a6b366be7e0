"""Cell DAG, candidate operations, continuous relaxation and genotypes."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, Module, SeparableConv, ShapeError, Tensor
from .autodiff import functional as F

OPS = ("sep_conv_1x1", "sep_conv_3x3", "sep_conv_5x5", "skip_connection", "zero")
ZERO = OPS.index("zero")
NODES = ("input0", "input1", "n0", "n1", "n2", "n3")
NUM_INTERMEDIATE = 4
CELL_KINDS = ("normal", "reduction")

# (source node index, intermediate node index); sources index into NODES
EDGES: tuple[tuple[int, int], ...] = tuple(
    (i, j) for j in range(NUM_INTERMEDIATE) for i in range(j + 2)
)
NUM_EDGES = len(EDGES)


def edge_index(src: int, node: int) -> int:
    return EDGES.index((src, node))


# ------------------------------------------------------------------- ops

class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        B, C, H, W = x.shape
        s = self.stride
        return Tensor(np.zeros((B, C, (H + s - 1) // s, (W + s - 1) // s), dtype=x.dtype))


class StridedSkip(Module):
    """Skip connection across a stride-2 edge: strided 1x1 conv + BN."""

    def __init__(self, channels: int, affine: bool, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, 2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, affine, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))


class ReLUConvBN(Module):
    """Fixed 1x1 input projection of a cell."""

    def __init__(self, c_in: int, c_out: int, stride: int, affine: bool, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 1, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, affine, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(F.relu(x)))


def make_op(name: str, channels: int, stride: int, affine: bool, *, rng, dtype) -> Module:
    if name.startswith("sep_conv_"):
        k = int(name[-1])
        return SeparableConv(channels, channels, k, stride, affine, rng=rng, dtype=dtype)
    if name == "skip_connection":
        return Identity() if stride == 1 else StridedSkip(channels, affine, rng=rng, dtype=dtype)
    if name == "zero":
        return Zero(stride)
    raise ValueError(f"unknown operation {name!r}")


class MixedEdge(Module):
    """All candidate operations on one edge, mixed by softmax weights."""

    def __init__(self, channels: int, stride: int, affine: bool = False, *, rng, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.ops = [make_op(name, channels, stride, affine, rng=rng, dtype=dtype) for name in OPS]

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        out = None
        for o, op in enumerate(self.ops):
            if o == ZERO:
                continue  # contributes w * 0
            term = F.mul(op(x), F.index(weights, o))
            out = term if out is None else F.add(out, term)
        return out


def mixed_edge_forward(x: Tensor, alpha_edge: Tensor, edge: MixedEdge) -> Tensor:
    """``sum_o softmax(alpha_edge)_o * o(x)`` over the candidate set."""
    if not np.isfinite(alpha_edge.data).all():
        raise ValueError("architecture weights must be finite")
    return edge(x, F.softmax(alpha_edge, axis=-1))


# --------------------------------------------------------- arch parameters

class ArchParams:
    """One [edges x ops] mixing-weight matrix per cell kind, shared by all cells of that kind."""

    def __init__(self, normal: Tensor, reduction: Tensor):
        for t in (normal, reduction):
            if t.shape != (NUM_EDGES, len(OPS)):
                raise ShapeError(f"arch params must be {(NUM_EDGES, len(OPS))}, got {t.shape}")
        self.normal = normal
        self.reduction = reduction

    @classmethod
    def initial(cls, rng: np.random.Generator, scale: float = 1e-3, dtype=np.float32) -> "ArchParams":
        def draw():
            return Tensor((scale * rng.standard_normal((NUM_EDGES, len(OPS)))).astype(dtype),
                          requires_grad=True)
        return cls(draw(), draw())

    @classmethod
    def from_arrays(cls, normal: np.ndarray, reduction: np.ndarray) -> "ArchParams":
        return cls(Tensor(normal, requires_grad=True), Tensor(reduction, requires_grad=True))

    def __getitem__(self, kind: str) -> Tensor:
        return getattr(self, kind)

    def tensors(self) -> list[Tensor]:
        return [self.normal, self.reduction]

    def weights(self, kind: str) -> Tensor:
        alpha = self[kind]
        if not np.isfinite(alpha.data).all():
            raise ValueError(f"non-finite architecture weights for {kind} cells")
        return F.softmax(alpha, axis=-1)

    def copy(self) -> "ArchParams":
        return ArchParams.from_arrays(self.normal.data.copy(), self.reduction.data.copy())


# --------------------------------------------------------------- genotype

class GenotypeError(ValueError):
    pass


NodeSpec = tuple[tuple[str, int], tuple[str, int]]


@dataclass(frozen=True)
class Genotype:
    """Discrete cells: per kind, per intermediate node, two (operation, source) pairs."""

    normal: tuple[NodeSpec, ...]
    reduction: tuple[NodeSpec, ...]
    channels: int = 8
    layout: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        for kind in CELL_KINDS:
            nodes = getattr(self, kind)
            if len(nodes) != NUM_INTERMEDIATE:
                raise GenotypeError(f"{kind}: expected {NUM_INTERMEDIATE} nodes, got {len(nodes)}")
            for j, node in enumerate(nodes):
                _check_node(kind, j, node)

    def __getitem__(self, kind: str) -> tuple[NodeSpec, ...]:
        return getattr(self, kind)


def _check_node(kind: str, j: int, node) -> None:
    where = f"{kind} {NODES[j + 2]}"
    if len(node) != 2:
        raise GenotypeError(f"{where}: expected exactly 2 incoming edges, got {len(node)}")
    sources = [src for _, src in node]
    if sources[0] == sources[1]:
        raise GenotypeError(f"{where}: both edges come from {NODES[sources[0]]}")
    for op, src in node:
        if op not in OPS:
            raise GenotypeError(f"{where}: unknown operation {op!r}")
        if not 0 <= src < j + 2:
            raise GenotypeError(f"{where}: source {src} is not an earlier node")


def discretize(alpha: ArchParams, exclude_zero: bool = True, *, channels: int = 8,
               layout: tuple[tuple[str, str], ...] = ()) -> Genotype:
    """Keep the strongest operation per edge and the two strongest edges per node.

    Edge strength is the softmax weight of its chosen operation, so adding a
    constant to one edge's logits cannot change the result.
    """
    cells = {}
    for kind in CELL_KINDS:
        a = np.asarray(alpha[kind].data, dtype=np.float64)
        if not np.isfinite(a).all():
            raise ValueError("architecture weights must be finite")
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        candidates = a.copy()
        if exclude_zero:
            candidates[:, ZERO] = -np.inf
        chosen = np.argmax(candidates, axis=1)  # first max = lowest op index
        nodes = []
        for j in range(NUM_INTERMEDIATE):
            incoming = [(e, src) for e, (src, node) in enumerate(EDGES) if node == j]
            ranked = sorted(incoming, key=lambda es: (-w[es[0], chosen[es[0]]], es[1]))[:2]
            ranked.sort(key=lambda es: es[1])
            nodes.append(tuple((OPS[chosen[e]], src) for e, src in ranked))
        cells[kind] = tuple(nodes)
    return Genotype(cells["normal"], cells["reduction"], channels, tuple(layout))


def genotype_to_alpha(genotype: Genotype, strength: float = 1e4) -> ArchParams:
    """Logits that put ``strength`` on each retained op and on ``zero`` for dropped edges."""
    mats = []
    for kind in CELL_KINDS:
        a = np.zeros((NUM_EDGES, len(OPS)))
        a[:, ZERO] = strength
        for j, node in enumerate(genotype[kind]):
            for op, src in node:
                e = edge_index(src, j)
                a[e, ZERO] = 0.0
                a[e, OPS.index(op)] = strength
        mats.append(a)
    return ArchParams.from_arrays(*mats)


# --------------------------------------------------------- text format

_HEADER = re.compile(r"^genotype v1 channels=(\d+) layout=(\S*)$")
_LINE = re.compile(r"^(normal|reduction) (n[0-3]):\s*(.*)$")
_EDGE = re.compile(r"^(\w+)\((\w+)\)$")


def serialize_genotype(g: Genotype) -> str:
    layout = ",".join(f"{name}:{pattern}" for name, pattern in g.layout)
    lines = [f"genotype v1 channels={g.channels} layout={layout}"]
    for kind in CELL_KINDS:
        for j, node in enumerate(g[kind]):
            edges = ", ".join(f"{op}({NODES[src]})" for op, src in node)
            lines.append(f"{kind} {NODES[j + 2]}: {edges}")
    return "\n".join(lines) + "\n"


def parse_genotype(text: str) -> Genotype:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    if not lines:
        raise GenotypeError("line 1: empty genotype text")
    m = _HEADER.match(lines[0])
    if not m:
        raise GenotypeError(f"line 1: bad header {lines[0]!r}")
    channels = int(m.group(1))
    layout = []
    for part in filter(None, m.group(2).split(",")):
        name, sep, pattern = part.partition(":")
        if not sep or not re.fullmatch(r"[NR]+", pattern):
            raise GenotypeError(f"line 1: bad layout entry {part!r}")
        layout.append((name, pattern))

    cells: dict[str, dict[int, NodeSpec]] = {k: {} for k in CELL_KINDS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise GenotypeError(f"line {lineno}: expected '<kind> n<k>: op(src), op(src)'")
        kind, node_name, rest = m.groups()
        j = NODES.index(node_name) - 2
        if j in cells[kind]:
            raise GenotypeError(f"line {lineno}: {kind} {node_name} defined twice")
        edges = []
        for field_no, item in enumerate(p.strip() for p in rest.split(",")):
            em = _EDGE.match(item)
            if not em or em.group(2) not in NODES:
                raise GenotypeError(f"line {lineno}, edge {field_no + 1}: bad edge {item!r}")
            edges.append((em.group(1), NODES.index(em.group(2))))
        try:
            _check_node(kind, j, edges)
        except GenotypeError as exc:
            raise GenotypeError(f"line {lineno}: {exc}") from None
        cells[kind][j] = tuple(edges)
    for kind in CELL_KINDS:
        missing = [NODES[j + 2] for j in range(NUM_INTERMEDIATE) if j not in cells[kind]]
        if missing:
            raise GenotypeError(f"{kind}: missing nodes {missing}")
    return Genotype(*(tuple(cells[k][j] for j in range(NUM_INTERMEDIATE)) for k in CELL_KINDS),
                    channels, tuple(layout))


# ------------------------------------------------------------------- cell

class Cell(Module):
    """Two inputs, four intermediate nodes, output = channel concat of the intermediates.

    With ``nodes`` left as ``None`` every edge is a :class:`MixedEdge`
    (supernet); otherwise the cell holds only the retained edges.
    """

    def __init__(self, kind: str, c_prev_prev: int, c_prev: int, channels: int,
                 reduction_prev: bool, nodes: tuple[NodeSpec, ...] | None = None,
                 affine: bool = True, *, rng, dtype=np.float32):
        super().__init__()
        if kind not in CELL_KINDS:
            raise ValueError(f"cell kind must be one of {CELL_KINDS}")
        self.kind = kind
        self.channels = channels
        reduction = kind == "reduction"
        self.pre0 = ReLUConvBN(c_prev_prev, channels, 2 if reduction_prev else 1, affine,
                               rng=rng, dtype=dtype)
        self.pre1 = ReLUConvBN(c_prev, channels, 1, affine, rng=rng, dtype=dtype)

        def stride(src):
            return 2 if reduction and src < 2 else 1

        self.searchable = nodes is None
        if self.searchable:
            self.edges = [MixedEdge(channels, stride(src), affine, rng=rng, dtype=dtype)
                          for src, _ in EDGES]
        else:
            self.edges = {
                f"{j}_{src}": make_op(op, channels, stride(src), affine, rng=rng, dtype=dtype)
                for j, node in enumerate(nodes) for op, src in node
            }
            self.nodes = nodes

    @property
    def out_channels(self) -> int:
        return NUM_INTERMEDIATE * self.channels

    def forward(self, s0: Tensor, s1: Tensor, weights: Tensor | None = None) -> Tensor:
        s0, s1 = self.pre0(s0), self.pre1(s1)
        if s0.shape != s1.shape:
            raise ShapeError(f"cell inputs disagree after preprocessing: {s0.shape} vs {s1.shape}")
        states = [s0, s1]
        for j in range(NUM_INTERMEDIATE):
            if self.searchable:
                if weights is None:
                    raise ValueError("a searchable cell needs mixing weights")
                terms = [self.edges[e](states[src], F.index(weights, e))
                         for e, (src, node) in enumerate(EDGES) if node == j]
            else:
                terms = [self.edges[f"{j}_{src}"](states[src]) for _, src in self.nodes[j]]
            acc = terms[0]
            for t in terms[1:]:
                acc = F.add(acc, t)
            states.append(acc)
        return F.concat(states[2:], axis=1)


def cell_forward(c_prev_prev: Tensor, c_prev: Tensor, cell: Cell,
                 alpha: ArchParams | None = None) -> Tensor:
    weights = alpha.weights(cell.kind) if cell.searchable else None
    return cell(c_prev_prev, c_prev, weights)


def copy_supernet_weights(child: Cell, supernet: Cell) -> None:
    """Load a child cell's retained ops with the matching supernet candidates."""
    child.pre0.load_state_dict(supernet.pre0.state_dict())
    child.pre1.load_state_dict(supernet.pre1.state_dict())
    for j, node in enumerate(child.nodes):
        for op, src in node:
            mixed = supernet.edges[edge_index(src, j)]
            child.edges[f"{j}_{src}"].load_state_dict(mixed.ops[OPS.index(op)].state_dict())


class CellStack(Module):
    """Cells laid out by a pattern string such as ``"NRNRN"``.

    Each cell reads the outputs of the two preceding cells; reduction cells
    double the cell channel count.
    """

    def __init__(self, pattern: str, c_in: int, channels: int,
                 genotype: Genotype | None = None, affine: bool = True,
                 *, rng, dtype=np.float32):
        super().__init__()
        if not re.fullmatch(r"[NR]+", pattern):
            raise ValueError(f"bad cell layout {pattern!r}")
        self.pattern = pattern
        cells = []
        c_pp, c_p, c = c_in, c_in, channels
        reduction_prev = False
        for letter in pattern:
            kind = "reduction" if letter == "R" else "normal"
            if kind == "reduction":
                c *= 2
            nodes = genotype[kind] if genotype is not None else None
            cell = Cell(kind, c_pp, c_p, c, reduction_prev, nodes, affine, rng=rng, dtype=dtype)
            cells.append(cell)
            reduction_prev = kind == "reduction"
            c_pp, c_p = c_p, cell.out_channels
        self.cells = cells
        self.out_channels = c_p
        self.final_channels = c

    def forward(self, x: Tensor, alpha: ArchParams | None = None) -> Tensor:
        s0 = s1 = x
        for cell in self.cells:
            s0, s1 = s1, cell_forward(s0, s1, cell, alpha)
        return s1

    @property
    def reduction_factor(self) -> int:
        return 2 ** self.pattern.count("R")
