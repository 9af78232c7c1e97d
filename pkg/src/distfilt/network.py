"""Agent network topologies, combination matrices and their spectral checks.

Agents are indexed from 0.  A topology always stores the symmetric closure of
its edges and every neighbourhood contains the agent itself.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .errors import (
    DisconnectedGraph,
    EigenSolverFailure,
    FormatError,
    GenerationFailed,
    IndexOutOfRange,
    IoFailure,
    ShapeMismatch,
)

SM7_NODES = 120
SM7_EDGES = 352
ROW_SUM_TOL = 1e-12
# eigenvalue accuracy; a radius must clear 1 by this margin to count as < 1
SPECTRAL_TOL = 1e-10


@dataclass(frozen=True)
class NetworkTopology:
    num_agents: int
    edges: tuple[tuple[int, int], ...]
    neighborhoods: tuple[frozenset[int], ...] = field(repr=False)

    @property
    def adjacency(self) -> np.ndarray:
        """Symmetric boolean adjacency without self loops."""
        adj = np.zeros((self.num_agents, self.num_agents), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) - 1 for nb in self.neighborhoods])

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def diameter(self) -> int:
        return max(_eccentricity(self, a) for a in range(self.num_agents))


@dataclass(frozen=True)
class CombinationMatrix:
    """Row-stochastic fusion weights; ``matrix[i, j]`` is the weight agent i
    gives to the intermediate estimate of agent j."""

    matrix: np.ndarray
    rule: str = "custom"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeMismatch(f"combination matrix must be square, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def to_csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(self.matrix)


@dataclass(frozen=True)
class SpectralReport:
    rho_lemma1: float
    is_primitive: bool
    row_sum_max_error: float


def _check_index(agent, n):
    if not 0 <= agent < n:
        raise IndexOutOfRange(f"agent index {agent} outside [0, {n})")


def build_topology(edge_list, num_agents: int) -> NetworkTopology:
    """Build a connected, undirected topology from ``(i, j)`` pairs.

    Duplicate and reversed pairs collapse into one undirected edge.
    """
    if num_agents < 1:
        raise IndexOutOfRange("num_agents must be positive")
    pairs = set()
    for i, j in edge_list:
        i, j = int(i), int(j)
        _check_index(i, num_agents)
        _check_index(j, num_agents)
        if i == j:
            raise IndexOutOfRange(f"self-loop edge ({i}, {j}) is not allowed")
        pairs.add((min(i, j), max(i, j)))
    edges = tuple(sorted(pairs))
    nbrs = [{i} for i in range(num_agents)]
    for i, j in edges:
        nbrs[i].add(j)
        nbrs[j].add(i)
    topo = NetworkTopology(num_agents, edges, tuple(frozenset(s) for s in nbrs))
    if not is_connected(topo):
        unreachable = sorted(set(range(num_agents)) - k_hop_neighborhood(topo, 0, num_agents))
        raise DisconnectedGraph(
            f"disconnected graph: agents {unreachable[:10]} unreachable from agent 0"
        )
    return topo


def is_connected(topology: NetworkTopology) -> bool:
    if topology.num_agents == 1:
        return True
    n_comp, _ = connected_components(sparse.csr_matrix(topology.adjacency), directed=False)
    return n_comp == 1


def complete_topology(num_agents: int) -> NetworkTopology:
    return build_topology(
        [(i, j) for i in range(num_agents) for j in range(i + 1, num_agents)], num_agents
    )


def path_topology(num_agents: int) -> NetworkTopology:
    return build_topology([(i, i + 1) for i in range(num_agents - 1)], num_agents)


def random_geometric_edges(num_nodes, num_edges, rng):
    """Place nodes uniformly in the unit square and connect the ``num_edges``
    closest pairs, i.e. a geometric graph whose radius is tuned to the count."""
    pos = rng.uniform(0.0, 1.0, size=(num_nodes, 2))
    d = pdist(pos)
    order = np.argsort(d, kind="stable")[:num_edges]
    iu, ju = np.triu_indices(num_nodes, k=1)
    return [(int(iu[k]), int(ju[k])) for k in order], pos


def generate_sm7_topology(
    seed: int, num_nodes: int = SM7_NODES, num_edges: int = SM7_EDGES, max_tries: int = 10_000
) -> NetworkTopology:
    """Seeded random geometric graph with exact node/edge counts, resampled
    until connected."""
    if num_edges > num_nodes * (num_nodes - 1) // 2 or num_edges < num_nodes - 1:
        raise GenerationFailed(f"cannot place {num_edges} edges on {num_nodes} nodes connectedly")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        edges, _ = random_geometric_edges(num_nodes, num_edges, rng)
        try:
            return build_topology(edges, num_nodes)
        except DisconnectedGraph:
            continue
    raise GenerationFailed(f"no connected instance after {max_tries} draws (seed={seed})")


def random_connected_topology(num_agents: int, rng, extra_edge_prob: float = 0.2) -> NetworkTopology:
    """Random spanning tree plus Bernoulli extra edges; used for property tests."""
    order = rng.permutation(num_agents)
    edges = set()
    for k in range(1, num_agents):
        parent = order[rng.integers(0, k)]
        a, b = int(order[k]), int(parent)
        edges.add((min(a, b), max(a, b)))
    for i in range(num_agents):
        for j in range(i + 1, num_agents):
            if rng.random() < extra_edge_prob:
                edges.add((i, j))
    return build_topology(edges, num_agents)


def uniform_weights(topology: NetworkTopology) -> CombinationMatrix:
    n = topology.num_agents
    c = np.zeros((n, n))
    for i, nb in enumerate(topology.neighborhoods):
        c[i, sorted(nb)] = 1.0 / len(nb)
    return CombinationMatrix(c, rule="uniform")


def metropolis_weights(topology: NetworkTopology) -> CombinationMatrix:
    n = topology.num_agents
    deg = topology.degrees
    c = np.zeros((n, n))
    for i, j in topology.edges:
        c[i, j] = c[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    c[np.diag_indices(n)] = 1.0 - c.sum(axis=1)
    return CombinationMatrix(c, rule="metropolis")


WEIGHT_RULES = {"uniform": uniform_weights, "metropolis": metropolis_weights}


def combination_matrix(topology: NetworkTopology, rule: str) -> CombinationMatrix:
    try:
        return WEIGHT_RULES[rule](topology)
    except KeyError:
        raise ValueError(f"unknown weight rule {rule!r}; choose from {sorted(WEIGHT_RULES)}") from None


def is_primitive(matrix: np.ndarray) -> bool:
    """True iff some power of the nonnegative ``matrix`` is entrywise positive.

    Repeated squaring of the sparsity pattern up to the power n**2.
    """
    m = np.asarray(matrix)
    if np.any(m < 0):
        return False
    n = m.shape[0]
    pattern = (m > 0).astype(np.int64)
    power = 1
    while True:
        if pattern.all():
            return True
        if power >= n * n:
            return False
        pattern = ((pattern @ pattern) > 0).astype(np.int64)
        power *= 2


def spectral_radius(matrix: np.ndarray) -> float:
    try:
        eig = np.linalg.eigvals(np.asarray(matrix, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise EigenSolverFailure(str(exc)) from exc
    return float(np.max(np.abs(eig))) if eig.size else 0.0


def averaging_gap_matrix(c: np.ndarray) -> np.ndarray:
    """Return ``11^T/N - C``."""
    n = c.shape[0]
    return np.full((n, n), 1.0 / n) - c


def spectral_report(c: CombinationMatrix) -> SpectralReport:
    m = c.matrix
    return SpectralReport(
        rho_lemma1=spectral_radius(averaging_gap_matrix(m)),
        is_primitive=is_primitive(m),
        row_sum_max_error=float(np.max(np.abs(m.sum(axis=1) - 1.0))),
    )


def check_assumption3(topology: NetworkTopology, c: CombinationMatrix) -> dict:
    """Evaluate every combination-matrix condition; keys map to (ok, detail)."""
    m = c.matrix
    checks = {}
    checks["connected"] = (is_connected(topology), "connected" if is_connected(topology) else "disconnected")
    if m.shape != (topology.num_agents, topology.num_agents):
        checks["shape"] = (False, f"matrix is {m.shape}, expected {topology.num_agents} square")
        return checks
    rep = spectral_report(c)
    checks["row_sums"] = (
        rep.row_sum_max_error <= ROW_SUM_TOL,
        f"max |row sum - 1| = {rep.row_sum_max_error:.3e}",
    )
    support = np.zeros_like(m, dtype=bool)
    for i, nb in enumerate(topology.neighborhoods):
        support[i, sorted(nb)] = True
    outside = float(np.max(np.abs(m[~support]))) if (~support).any() else 0.0
    checks["support"] = (outside == 0.0, f"max |weight| outside neighbourhoods = {outside:.3e}")
    checks["nonnegative"] = (bool(np.all(m >= 0)), f"min entry = {m.min():.3e}")
    checks["primitive"] = (rep.is_primitive, "primitive" if rep.is_primitive else "not primitive")
    checks["lemma1"] = (rep.rho_lemma1 < 1.0 - SPECTRAL_TOL, f"rho(11^T/N - C) = {rep.rho_lemma1:.12g}")
    return checks


def k_hop_neighborhood(topology: NetworkTopology, agent: int, k: int) -> set[int]:
    _check_index(agent, topology.num_agents)
    if k < 0:
        raise ValueError("k must be nonnegative")
    seen = {agent}
    frontier = [agent]
    for _ in range(k):
        nxt = []
        for a in frontier:
            for b in topology.neighborhoods[a]:
                if b not in seen:
                    seen.add(b)
                    nxt.append(b)
        if not nxt:
            break
        frontier = nxt
    return seen


def bfs_layers(topology: NetworkTopology, source: int) -> np.ndarray:
    """Hop distance from ``source`` to every agent."""
    dist = np.full(topology.num_agents, -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        a = queue.popleft()
        for b in topology.neighborhoods[a]:
            if dist[b] < 0:
                dist[b] = dist[a] + 1
                queue.append(b)
    return dist


def _eccentricity(topology, agent):
    return int(bfs_layers(topology, agent).max())


def central_agent(topology: NetworkTopology) -> int:
    """Lowest-index agent of minimum eccentricity (a graph centre)."""
    ecc = [_eccentricity(topology, a) for a in range(topology.num_agents)]
    return int(np.argmin(ecc))


# -- file formats -----------------------------------------------------------

def read_topology(path) -> NetworkTopology:
    """Parse ``agents <N>`` followed by ``edge <i> <j>`` lines (0-based).

    Blank lines and ``#`` comments are ignored.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read topology file {path}: {exc}") from exc
    num_agents = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "agents" and len(parts) == 2 and num_agents is None:
            try:
                num_agents = int(parts[1])
            except ValueError:
                raise FormatError(f"bad agent count {parts[1]!r}", lineno, path) from None
        elif parts[0] == "edge" and len(parts) == 3:
            if num_agents is None:
                raise FormatError("edge before 'agents' header", lineno, path)
            try:
                i, j = int(parts[1]), int(parts[2])
            except ValueError:
                raise FormatError(f"bad edge {line!r}", lineno, path) from None
            if not (0 <= i < num_agents and 0 <= j < num_agents) or i == j:
                raise FormatError(f"invalid edge ({i}, {j}) for {num_agents} agents", lineno, path)
            edges.append((i, j))
        else:
            raise FormatError(f"unrecognised line {line!r}", lineno, path)
    if num_agents is None:
        raise FormatError("missing 'agents <N>' header", None, path)
    return build_topology(edges, num_agents)


def write_topology(topology: NetworkTopology, path) -> None:
    lines = [f"agents {topology.num_agents}"]
    lines += [f"edge {i} {j}" for i, j in topology.edges]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_combination_csv(c: CombinationMatrix, path) -> None:
    n = c.size
    rows = [f"# combination-matrix N={n}"]
    rows += [",".join(repr(float(v)) for v in row) for row in c.matrix]
    try:
        Path(path).write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_combination_csv(path) -> CombinationMatrix:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# combination-matrix N="):
        raise FormatError("missing '# combination-matrix N=<N>' header", 1, path)
    try:
        n = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise FormatError("bad N in header", 1, path) from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise FormatError(f"non-numeric entry in {line!r}", lineno, path) from None
        if len(row) != n:
            raise FormatError(f"expected {n} entries, got {len(row)}", lineno, path)
        rows.append(row)
    if len(rows) != n:
        raise FormatError(f"expected {n} rows, got {len(rows)}", None, path)
    return CombinationMatrix(np.array(rows), rule="file")
