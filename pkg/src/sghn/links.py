"""Reading an interaction graph off the learned alpha matrix."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class LinkError(ValueError):
    pass


@dataclass
class LinkGraph:
    """Undirected links ``(i, j)`` with ``i < j``, optionally oriented.

    ``directions`` maps a link to the ordered pair it points along; links with
    ``|alpha_ij| == |alpha_ji|`` are left out of it and listed in ``ties``.
    """

    edges: frozenset[tuple[int, int]]
    tau: float
    directions: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)
    ties: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self) -> None:
        for i, j in self.edges:
            if i == j:
                raise LinkError(f"self-loop on node {i}")
        for e in self.directions:
            if e not in self.edges:
                raise LinkError(f"direction given for unknown link {e}")

    def mask(self, dim: int) -> np.ndarray:
        """Symmetric boolean adjacency (both orientations of every link)."""
        m = np.zeros((dim, dim), dtype=bool)
        for i, j in self.edges:
            m[i, j] = m[j, i] = True
        return m

    def to_text(self) -> str:
        """Edge list, one ``i j`` per line, ``i j ->`` when oriented i to j."""
        lines = [f"# tau={self.tau!r} links={len(self.edges)}"]
        for e in sorted(self.edges):
            if e in self.directions:
                a, b = self.directions[e]
                lines.append(f"{a} {b} ->")
            else:
                lines.append(f"{e[0]} {e[1]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LinkGraph":
        tau = float("nan")
        edges, directions = set(), {}
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("tau="):
                        tau = float(tok[4:])
                continue
            parts = line.split()
            if not parts:
                continue
            a, b = int(parts[0]), int(parts[1])
            e = (min(a, b), max(a, b))
            edges.add(e)
            if len(parts) > 2 and parts[2] == "->":
                directions[e] = (a, b)
        ties = frozenset(e for e in edges if e not in directions)
        return cls(frozenset(edges), tau, directions, ties)


def _offdiag_abs(alpha: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(alpha, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinkError(f"alpha must be square, got shape {a.shape}")
    a = a.copy()
    np.fill_diagonal(a, 0.0)
    return a


def extract_links(alpha: np.ndarray, tau: float = 0.1) -> LinkGraph:
    """Link ``{i, j}`` iff ``max(|a_ij|, |a_ji|) >= tau * max_{k != l} |a_kl|``.

    ``tau = 0`` keeps every pair (the degenerate fully connected graph).
    """
    if not 0.0 <= tau <= 1.0:
        raise LinkError(f"tau must lie in [0, 1], got {tau}")
    a = _offdiag_abs(alpha)
    scale = a.max()
    if tau > 0 and not scale > 0:
        raise LinkError("alpha is identically zero off the diagonal; no scale to threshold against")
    strength = np.maximum(a, a.T)
    n = a.shape[0]
    edges = frozenset((i, j) for i in range(n) for j in range(i + 1, n)
                      if strength[i, j] >= tau * scale)
    return LinkGraph(edges, tau)


def direct_links(alpha: np.ndarray, links: LinkGraph) -> LinkGraph:
    """Orient each link towards the larger of ``|a_ij|`` and ``|a_ji|``."""
    a = _offdiag_abs(alpha)
    directions, ties = {}, set()
    for i, j in links.edges:
        if a[i, j] > a[j, i]:
            directions[(i, j)] = (i, j)
        elif a[j, i] > a[i, j]:
            directions[(i, j)] = (j, i)
        else:
            ties.add((i, j))
    return LinkGraph(links.edges, links.tau, directions, frozenset(ties))


def complete_graph(dim: int) -> LinkGraph:
    return LinkGraph(frozenset((i, j) for i in range(dim) for j in range(i + 1, dim)), 0.0)


def write_links(graph: LinkGraph, alpha: np.ndarray, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``links.txt`` and the ``|alpha|`` heat-map matrix ``alpha_abs.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edge_path = out / "links.txt"
    edge_path.write_text(graph.to_text(), encoding="utf-8")
    csv_path = out / "alpha_abs.csv"
    a = np.abs(np.asarray(alpha))
    header = ",".join(f"j{j}" for j in range(a.shape[1]))
    np.savetxt(csv_path, a, delimiter=",", header=header, comments="", fmt="%.17g")
    return edge_path, csv_path
