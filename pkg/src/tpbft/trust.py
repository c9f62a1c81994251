"""EigenTrust-style reputation: direct, recommended and global trust.

Every node's opinion of a peer starts from a satisfaction score
``S_ij = sat(i, j) - unsat(i, j)``.  Positive scores are normalised per row
into direct trust; pairs that never transacted get a recommended value
composed through transaction paths; the global trust vector is the fixed
point of ``T = C^T T`` over the resulting local trust matrix.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from .errors import EmptyMatrix, SelfTransaction, UnknownNode

CONVERGENCE_TOL = 1e-9
MAX_SWEEPS = 200


class Outcome(enum.Enum):
    SATISFACTORY = "Satisfactory"
    UNSATISFACTORY = "Unsatisfactory"


class Provenance(enum.Enum):
    DIRECT = "Direct"
    RECOMMENDED = "Recommended"
    UNIFORM_FALLBACK = "UniformFallback"
    NO_PATH = "NoPath"


@dataclass
class TrustLedger:
    """Per ordered pair (observer, subject) counters of transaction outcomes."""

    nodes: frozenset[int]
    counters: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def for_nodes(cls, nodes: Iterable[int]) -> TrustLedger:
        return cls(frozenset(nodes))

    def _check(self, node: int) -> None:
        if node not in self.nodes:
            raise UnknownNode(f"node {node} is not part of the network")

    def record(self, src: int, dst: int, outcome: Outcome) -> None:
        """In-place increment; used by the simulator's event loop."""
        self._check(src)
        self._check(dst)
        if src == dst:
            raise SelfTransaction(f"node {src} cannot transact with itself")
        sat, unsat = self.counters.get((src, dst), (0, 0))
        if outcome is Outcome.SATISFACTORY:
            sat += 1
        else:
            unsat += 1
        self.counters[(src, dst)] = (sat, unsat)

    def counts(self, src: int, dst: int) -> tuple[int, int]:
        return self.counters.get((src, dst), (0, 0))

    def copy(self) -> TrustLedger:
        return TrustLedger(self.nodes, dict(self.counters))


def record_transaction(ledger: TrustLedger, src: int, dst: int, outcome: Outcome) -> TrustLedger:
    """Return a new ledger with exactly one counter of ``(src, dst)`` bumped."""
    updated = ledger.copy()
    updated.record(src, dst, outcome)
    return updated


def partition_nodes(ledger: TrustLedger, i: int) -> tuple[set[int], set[int]]:
    """Split the network into nodes ``i`` has transacted with and the rest."""
    ledger._check(i)
    tx = {j for (a, j), (sat, unsat) in ledger.counters.items() if a == i and sat + unsat > 0}
    non_tx = set(ledger.nodes) - tx - {i}
    return tx, non_tx


def direct_trust(ledger: TrustLedger, i: int) -> dict[int, float]:
    """Normalised positive satisfaction of ``i`` toward each node it transacted with.

    When no neighbour has a positive score every returned value is ``1/N``.
    """
    tx, _ = partition_nodes(ledger, i)
    scores = {}
    for j in tx:
        sat, unsat = ledger.counts(i, j)
        scores[j] = sat - unsat
    total = sum(max(s, 0) for s in scores.values())
    if total == 0:
        uniform = 1.0 / len(ledger.nodes)
        return {j: uniform for j in sorted(tx)}
    return {j: max(scores[j], 0) / total for j in sorted(tx)}


def _recommended_row(direct: Mapping[int, Mapping[int, float]], i: int) -> dict[int, float]:
    """Walk-product sums along shortest transaction paths out of ``i``.

    Nodes at hop distance h receive the sum over all h-hop shortest paths of
    the product of direct trust along the path.  Only nodes at distance >= 2
    are returned; direct neighbours keep their direct value.
    """
    frontier = {i: 1.0}
    seen = {i}
    out: dict[int, float] = {}
    hop = 0
    while frontier:
        hop += 1
        nxt: dict[int, float] = {}
        for k in sorted(frontier):
            weight = frontier[k]
            for j, c in direct.get(k, {}).items():
                if j in seen:
                    continue
                nxt[j] = nxt.get(j, 0.0) + weight * c
        seen.update(nxt)
        if hop >= 2:
            for j, value in nxt.items():
                out[j] = min(value, 1.0)
        frontier = nxt
    return out


@dataclass(frozen=True)
class LocalTrustMatrix:
    """Local trust C_ij for every ordered pair of nodes.

    Rows whose satisfaction total is zero are stored only as membership in
    ``fallback`` and read back as exactly ``1/N``.  ``direct`` keeps every
    node's direct-trust map, which doubles as the weighted transaction graph
    used for recommended trust.
    """

    nodes: tuple[int, ...]
    direct: Mapping[int, Mapping[int, float]]
    rows: Mapping[int, Mapping[int, float]]
    provenance: Mapping[tuple[int, int], Provenance]
    fallback: frozenset[int]

    @property
    def size(self) -> int:
        return len(self.nodes)

    def value(self, i: int, j: int) -> float:
        if i in self.fallback:
            return 1.0 / len(self.nodes)
        return self.rows[i].get(j, 0.0)

    def provenance_of(self, i: int, j: int) -> Provenance:
        if i in self.fallback:
            return Provenance.UNIFORM_FALLBACK
        return self.provenance.get((i, j), Provenance.NO_PATH)

    def row(self, i: int) -> dict[int, float]:
        return {j: self.value(i, j) for j in self.nodes}

    def to_dense(self) -> list[list[float]]:
        return [[self.value(i, j) for j in self.nodes] for i in self.nodes]

    @classmethod
    def from_direct(
        cls,
        nodes: Iterable[int],
        direct: Mapping[int, Mapping[int, float]],
        fallback: Iterable[int] = (),
    ) -> LocalTrustMatrix:
        ordered = tuple(sorted(nodes))
        fallback = frozenset(fallback)
        direct = {i: dict(direct.get(i, {})) for i in ordered}
        rows: dict[int, dict[int, float]] = {}
        prov: dict[tuple[int, int], Provenance] = {}
        for i in ordered:
            if i in fallback:
                continue
            row = dict(direct[i])
            for j in row:
                prov[(i, j)] = Provenance.DIRECT
            for j, value in _recommended_row(direct, i).items():
                row[j] = value
                prov[(i, j)] = Provenance.RECOMMENDED
            rows[i] = row
        return cls(ordered, direct, rows, prov, fallback)

    @classmethod
    def from_entries(cls, nodes: Iterable[int], entries: Mapping[tuple[int, int], float]) -> LocalTrustMatrix:
        """Literal matrix, no recommended fill-in.  Missing entries read as 0."""
        ordered = tuple(sorted(nodes))
        rows: dict[int, dict[int, float]] = {i: {} for i in ordered}
        prov = {}
        for (i, j), value in entries.items():
            if i not in rows or j not in rows:
                raise UnknownNode(f"entry ({i}, {j}) outside node set")
            if value:
                rows[i][j] = float(value)
                prov[(i, j)] = Provenance.DIRECT
        return cls(ordered, {i: dict(r) for i, r in rows.items()}, rows, prov, frozenset())


def local_trust_matrix(ledger: TrustLedger) -> LocalTrustMatrix:
    direct = {}
    fallback = set()
    for i in ledger.nodes:
        tx, _ = partition_nodes(ledger, i)
        positive = sum(max(ledger.counts(i, j)[0] - ledger.counts(i, j)[1], 0) for j in tx)
        if positive == 0:
            fallback.add(i)
        direct[i] = direct_trust(ledger, i)
    return LocalTrustMatrix.from_direct(ledger.nodes, direct, fallback)


def recommended_trust(matrix: LocalTrustMatrix, i: int, j: int) -> tuple[float, Provenance]:
    """Transitive trust of ``i`` in ``j`` for a pair that never transacted.

    Returns ``(0.0, NO_PATH)`` when ``j`` is unreachable from ``i``.
    """
    if i not in matrix.direct or j not in matrix.direct:
        raise UnknownNode(f"pair ({i}, {j}) outside the matrix")
    if i == j or j in matrix.direct[i]:
        raise ValueError(f"({i}, {j}) is not a no-transaction pair")
    value = _recommended_row(matrix.direct, i).get(j)
    if value is None:
        return 0.0, Provenance.NO_PATH
    return value, Provenance.RECOMMENDED


@dataclass(frozen=True)
class TrustVector:
    values: Mapping[int, float]
    iteration_count: int = 0
    converged: bool = True

    def __getitem__(self, node: int) -> float:
        return self.values[node]

    def __contains__(self, node: int) -> bool:
        return node in self.values

    @classmethod
    def uniform(cls, nodes: Iterable[int]) -> TrustVector:
        nodes = sorted(nodes)
        if not nodes:
            raise EmptyMatrix("no nodes")
        return cls({n: 1.0 / len(nodes) for n in nodes})


def global_trust(matrix: LocalTrustMatrix, initial: TrustVector | Mapping[int, float] | None = None) -> TrustVector:
    """Fixed point of ``T_i = sum_j C_ji T_j`` with L1 normalisation.

    Each sweep averages the current vector with its normalised image
    (``T' = (T + C^T T / |C^T T|) / 2``).  The fixed points are the same as
    the plain iteration, but periodic trust graphs (two nodes vouching only
    for each other, bipartite chains) converge instead of oscillating.
    """
    nodes = matrix.nodes
    if not nodes:
        raise EmptyMatrix("empty trust matrix")
    n = len(nodes)
    if initial is None:
        current = {k: 1.0 / n for k in nodes}
    else:
        values = initial.values if isinstance(initial, TrustVector) else initial
        total = sum(max(values.get(k, 0.0), 0.0) for k in nodes)
        if total <= 0:
            current = {k: 1.0 / n for k in nodes}
        else:
            current = {k: max(values.get(k, 0.0), 0.0) / total for k in nodes}

    explicit = [(i, sorted(matrix.rows[i].items())) for i in nodes if i not in matrix.fallback]
    fallback = [i for i in nodes if i in matrix.fallback]

    converged = False
    sweeps = 0
    while sweeps < MAX_SWEEPS:
        sweeps += 1
        image = dict.fromkeys(nodes, 0.0)
        for i, row in explicit:
            weight = current[i]
            if weight == 0.0:
                continue
            for j, c in row:
                image[j] += weight * c
        spread = sum(current[i] for i in fallback) / n
        if spread:
            for j in nodes:
                image[j] += spread
        norm = sum(image.values())
        step = {k: 0.5 * (current[k] + image[k] / norm) for k in nodes}
        delta = sum(abs(step[k] - current[k]) for k in nodes)
        current = step
        if delta < CONVERGENCE_TOL:
            converged = True
            break
    total = sum(current.values())
    return TrustVector({k: current[k] / total for k in nodes}, sweeps, converged)


def compute_global_trust(ledger: TrustLedger, previous: TrustVector | None = None) -> TrustVector:
    """Convenience pipeline: ledger -> local matrix -> global trust."""
    return global_trust(local_trust_matrix(ledger), previous)
