"""Transmission graph and swing dynamics.

Buses are 0-indexed internally; the scenario files use 1-indexed bus
numbers and are converted at load time.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


class NetworkError(ValueError):
    pass


def bfs_tree(n: int, edges: Sequence[tuple[int, int]], root: int = 0) -> list[int]:
    """Edge indices of the breadth-first spanning tree rooted at ``root``.

    Neighbours are visited in edge-list order so the result is deterministic.
    """
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (i, j) in enumerate(edges):
        adj[i].append((j, k))
        adj[j].append((i, k))
    seen = [False] * n
    seen[root] = True
    tree = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, k in adj[u]:
            if not seen[v]:
                seen[v] = True
                tree.append(k)
                queue.append(v)
    if not all(seen):
        raise NetworkError("graph is not connected")
    return tree


@dataclass(frozen=True)
class Network:
    """Lossless transmission network with one generator and one load per bus.

    ``gamma`` holds the per-edge weights B_ij V_i V_j in per-unit power.
    ``tree_edges`` selects the spanning tree used for the angle-difference
    coordinates; when omitted a BFS tree rooted at bus 0 is used.

    ``omega_base`` converts the frequency state to angular speed in the angle
    equation, delta' = omega_base * omega. The default 1 keeps omega in rad/s;
    set it to the nominal angular frequency when omega is per-unit and M = 2H.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    gamma: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    tree_edges: tuple[int, ...] = field(default=())
    omega_base: float = 1.0

    def __post_init__(self):
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        for name in ("gamma", "inertia", "damping"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

        n, m = self.n, len(edges)
        if n < 2:
            raise NetworkError("need at least two buses")
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise NetworkError(f"invalid edge ({i + 1}, {j + 1})")
        if self.gamma.shape != (m,) or np.any(self.gamma <= 0):
            raise NetworkError("gamma must be positive with one entry per edge")
        if self.damping.shape != (n,) or np.any(self.damping <= 0):
            raise NetworkError("damping must be positive with one entry per bus")
        if self.inertia.shape != (n,) or np.any(self.inertia <= 0):
            # zero inertia would make the swing equation an algebraic constraint
            raise NetworkError("inertia must be positive with one entry per bus")

        if not self.omega_base > 0:
            raise NetworkError("omega_base must be positive")
        if not self.tree_edges:
            tree = bfs_tree(n, edges)
        else:
            tree = [int(k) for k in self.tree_edges]
            bfs_tree(n, edges)  # connectivity
        if len(tree) != n - 1 or len(set(tree)) != n - 1 or not all(0 <= k < m for k in tree):
            raise NetworkError("tree_edges must list n-1 distinct edge indices")
        object.__setattr__(self, "tree_edges", tuple(tree))
        dt = self.tree_incidence
        if np.linalg.matrix_rank(dt) != n - 1:
            raise NetworkError("tree_edges do not form a spanning tree")

    @classmethod
    def from_susceptance(
        cls,
        n: int,
        edges: Sequence[tuple[int, int]],
        susceptance: Sequence[float],
        voltage: Sequence[float],
        inertia: Sequence[float],
        damping: Sequence[float],
        tree_edges: Optional[Sequence[int]] = None,
        omega_base: float = 1.0,
    ) -> "Network":
        v = np.asarray(voltage, dtype=float)
        b = np.asarray(susceptance, dtype=float)
        if v.shape != (n,) or np.any(v <= 0):
            raise NetworkError("voltage must be positive with one entry per bus")
        gamma = np.array([b[k] * v[i] * v[j] for k, (i, j) in enumerate(edges)])
        return cls(n, tuple(edges), gamma, np.asarray(inertia), np.asarray(damping),
                   tuple(tree_edges or ()), float(omega_base))

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def incidence(self) -> np.ndarray:
        d = np.zeros((self.n, self.m))
        for k, (i, j) in enumerate(self.edges):
            d[i, k] = 1.0
            d[j, k] = -1.0
        return d

    @cached_property
    def tree_incidence(self) -> np.ndarray:
        return self.incidence[:, list(self.tree_edges)]

    @cached_property
    def tree_pinv(self) -> np.ndarray:
        dt = self.tree_incidence
        return np.linalg.solve(dt.T @ dt, dt.T)

    @cached_property
    def edge_map(self) -> np.ndarray:
        """Maps tree-edge angles to all edge angles: D^T (D_t^+)^T."""
        return self.incidence.T @ self.tree_pinv.T


def incidence_matrix(net: Network) -> np.ndarray:
    return net.incidence.copy()


def tree_pseudo_inverse(net: Network) -> np.ndarray:
    return net.tree_pinv.copy()


def edge_angles(net: Network, phi: np.ndarray) -> np.ndarray:
    return net.edge_map @ np.asarray(phi, dtype=float)


def potential(net: Network, phi: np.ndarray) -> float:
    return float(-net.gamma @ np.cos(edge_angles(net, phi)))


def potential_gradient(net: Network, phi: np.ndarray) -> np.ndarray:
    return net.tree_pinv @ (net.incidence @ (net.gamma * np.sin(edge_angles(net, phi))))


def potential_hessian(net: Network, phi: np.ndarray) -> np.ndarray:
    e = net.edge_map
    return e.T @ ((net.gamma * np.cos(edge_angles(net, phi)))[:, None] * e)


def swing_field_delta(net: Network, delta, omega, P_g, P_d) -> tuple[np.ndarray, np.ndarray]:
    d = net.incidence
    flow = d @ (net.gamma * np.sin(d.T @ delta))
    omega = np.asarray(omega, dtype=float)
    domega = (-flow - net.damping * omega + P_g - P_d) / net.inertia
    return net.omega_base * omega, domega


def swing_field_phi(net: Network, phi, omega, P_g, P_d) -> tuple[np.ndarray, np.ndarray]:
    omega = np.asarray(omega, dtype=float)
    dphi = net.omega_base * (net.tree_incidence.T @ omega)
    flow = net.tree_incidence @ potential_gradient(net, phi)
    domega = (-flow - net.damping * omega + P_g - P_d) / net.inertia
    return dphi, domega


def security_constraint_holds(net: Network, phi) -> bool:
    return bool(np.all(np.abs(edge_angles(net, phi)) < np.pi / 2))


def angles_to_phi(net: Network, delta) -> np.ndarray:
    return net.tree_incidence.T @ np.asarray(delta, dtype=float)


def phi_to_angles(net: Network, phi) -> np.ndarray:
    """Bus angles with zero mean whose tree differences equal ``phi``."""
    return net.tree_pinv.T @ np.asarray(phi, dtype=float)
