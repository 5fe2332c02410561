"""Lagrange finite element spaces on forest meshes, with hanging-node
multi-point constraints.

A space is parameterized by ``(order, subdiv)``: every leaf carries a
``subdiv x subdiv`` grid of cells, each holding tensor-product Lagrange
polynomials of the given order on equispaced nodes. The trial space of
order ``k`` is ``(k, 1)``; its linearized test space is ``(1, k)``. Both
have the same per-leaf node grid (``(k+1)**2`` positions), so they share a
node table and have identical free/Dirichlet/hanging classification, which
is what makes their dimensions equal.

Nodes are identified across leaves and roots through exact integer keys
``(root, px, py)`` where ``px = (ix*g + a) * 2**(Lmax - level)`` on the
common denominator ``D = g * 2**Lmax`` (``g = order*subdiv``). Hanging
nodes on nonconforming faces are constrained to the coarse-side trace
polynomial; with 2:1 balance the masters are never hanging themselves.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .mesh import FACES, ForestMesh, Leaf

FREE, DIRICHLET, HANGING = 0, 1, 2


class SpaceError(RuntimeError):
    pass


# -- 1D reference bases ------------------------------------------------------

@lru_cache(maxsize=None)
def _lagrange_nodes(order: int) -> np.ndarray:
    return np.arange(order + 1) / order if order > 0 else np.zeros(1)


def lagrange_1d(order: int, t: np.ndarray):
    """Equispaced Lagrange basis on [0,1]: values and derivatives at ``t``."""
    t = np.asarray(t, dtype=float)
    nodes = _lagrange_nodes(order)
    m = t.shape[0]
    vals = np.ones((m, order + 1))
    ders = np.zeros((m, order + 1))
    for j in range(order + 1):
        for i in range(order + 1):
            if i == j:
                continue
            vals[:, j] *= (t - nodes[i]) / (nodes[j] - nodes[i])
        for l in range(order + 1):
            if l == j:
                continue
            term = np.ones(m) / (nodes[j] - nodes[l])
            for i in range(order + 1):
                if i == j or i == l:
                    continue
                term *= (t - nodes[i]) / (nodes[j] - nodes[i])
            ders[:, j] += term
    return vals, ders


def _basis_1d_grid(order: int, subdiv: int, x: np.ndarray):
    """Piecewise Lagrange basis on the ``subdiv``-cell grid of [0,1].

    Returns values and derivatives with respect to the [0,1] coordinate,
    shape ``(m, order*subdiv + 1)``.
    """
    x = np.asarray(x, dtype=float)
    m = x.shape[0]
    g = order * subdiv
    cell = np.minimum((x * subdiv).astype(int), subdiv - 1)
    cell = np.maximum(cell, 0)
    tau = x * subdiv - cell
    v, d = lagrange_1d(order, tau)
    V = np.zeros((m, g + 1))
    Dv = np.zeros((m, g + 1))
    cols = cell[:, None] * order + np.arange(order + 1)[None, :]
    rows = np.arange(m)[:, None]
    V[rows, cols] = v
    Dv[rows, cols] = d * subdiv
    return V, Dv


def eval_basis_grid(order: int, subdiv: int, pts: np.ndarray):
    """Tensor basis on the leaf reference square at ``pts`` (m, 2).

    Returns ``(V, Dxi, Deta)`` of shape ``(m, (g+1)**2)`` with local node
    ``(a, b)`` stored at index ``b*(g+1) + a``.
    """
    Vx, Dx = _basis_1d_grid(order, subdiv, pts[:, 0])
    Vy, Dy = _basis_1d_grid(order, subdiv, pts[:, 1])
    m, n1 = Vx.shape
    V = (Vy[:, :, None] * Vx[:, None, :]).reshape(m, n1 * n1)
    Dxi = (Vy[:, :, None] * Dx[:, None, :]).reshape(m, n1 * n1)
    Deta = (Dy[:, :, None] * Vx[:, None, :]).reshape(m, n1 * n1)
    return V, Dxi, Deta


# -- node table ---------------------------------------------------------------

class _NodeTable:
    """Merged node grid shared by all spaces with the same ``g = order*subdiv``."""

    def __init__(self, mesh: ForestMesh, g: int):
        self.mesh = mesh
        self.g = g
        self.lmax = mesh.max_level
        self.D = g << self.lmax

        key_raw: dict = {}
        leaf_keys = []
        for (r, l, ix, iy) in mesh.leaves:
            shift = self.lmax - l
            pxs = (ix * g + np.arange(g + 1)) << shift
            pys = (iy * g + np.arange(g + 1)) << shift
            keys = [
                (r, int(px), int(py)) for py in pys for px in pxs
            ]
            ids = np.empty(len(keys), dtype=np.int64)
            for j, key in enumerate(keys):
                idx = key_raw.get(key)
                if idx is None:
                    idx = len(key_raw)
                    key_raw[key] = idx
                ids[j] = idx
            leaf_keys.append(ids)

        # union-find over conforming root interfaces
        parent = np.arange(len(key_raw), dtype=np.int64)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        D = self.D
        coarse = mesh.coarse
        for r in range(coarse.n_cells):
            for face in FACES:
                r2 = coarse.neighbor[r][face]
                if r2 is None or r2 < r:
                    continue
                for (kr, px, py), idx in key_raw.items():
                    if kr != r:
                        continue
                    if face == 0 and px == 0:
                        mirror = (r2, D, py)
                    elif face == 1 and px == D:
                        mirror = (r2, 0, py)
                    elif face == 2 and py == 0:
                        mirror = (r2, px, D)
                    elif face == 3 and py == D:
                        mirror = (r2, px, 0)
                    else:
                        continue
                    other = key_raw.get(mirror)
                    if other is not None:
                        union(idx, other)

        roots = np.array([find(i) for i in range(len(key_raw))], dtype=np.int64)
        uniq, inv = np.unique(roots, return_inverse=True)
        self.n_nodes = len(uniq)
        remap = inv  # raw id -> node id

        self.key_to_node = {k: int(remap[i]) for k, i in key_raw.items()}
        self.leaf_nodes = np.stack([remap[ids] for ids in leaf_keys])

        # coordinates from any member key (exact by coarse conformity)
        self.xy = np.empty((self.n_nodes, 2))
        filled = np.zeros(self.n_nodes, dtype=bool)
        self.on_boundary = np.zeros(self.n_nodes, dtype=bool)
        for (r, px, py), nid in self.key_to_node.items():
            if not filled[nid]:
                rx, ry, rw, rh = coarse.cells[r]
                self.xy[nid, 0] = rx + rw * (px / D)
                self.xy[nid, 1] = ry + rh * (py / D)
                filled[nid] = True
            nb = coarse.neighbor[r]
            if (
                (px == 0 and nb[0] is None)
                or (px == D and nb[1] is None)
                or (py == 0 and nb[2] is None)
                or (py == D and nb[3] is None)
            ):
                self.on_boundary[nid] = True


class FESpace:
    """Grad-conforming Lagrange space with free/Dirichlet/hanging DOF split."""

    def __init__(
        self,
        mesh: ForestMesh,
        order: int,
        subdiv: int = 1,
        dirichlet_predicate: Optional[Callable] = None,
        _table: Optional[_NodeTable] = None,
        _dirichlet_nodes: Optional[np.ndarray] = None,
    ):
        if order < 1:
            raise SpaceError("order must be >= 1")
        self.mesh = mesh
        self.order = order
        self.subdiv = subdiv
        g = order * subdiv
        self.table = _table if _table is not None and _table.g == g else _NodeTable(mesh, g)
        self._classify(dirichlet_predicate, _dirichlet_nodes)

    # -- construction ---------------------------------------------------------

    def _classify(self, predicate, dirichlet_nodes=None):
        table = self.table
        mesh = self.mesh

        constraints: dict = {}
        for leaf in mesh.leaves:
            for face, fn in enumerate(mesh.face_neighbors(leaf)):
                if fn.kind != "coarser":
                    continue
                coarse_leaf = fn.neighbors[0]
                if coarse_leaf.level != leaf.level - 1:
                    raise SpaceError("hanging constraints need 2:1 balance")
                self._constrain_face(leaf, face, coarse_leaf, constraints)

        n = table.n_nodes
        self.node_class = np.full(n, FREE, dtype=np.int8)
        for nid in constraints:
            if table.on_boundary[nid]:
                raise SpaceError("hanging node on the Dirichlet boundary")
            self.node_class[nid] = HANGING
        if dirichlet_nodes is not None:
            bnd = np.zeros(n, dtype=bool)
            bnd[dirichlet_nodes] = True
        else:
            bnd = table.on_boundary.copy()
            if predicate is not None:
                sel = np.where(bnd)[0]
                keep = np.asarray(predicate(table.xy[sel]), dtype=bool)
                bnd[sel] = keep
        bnd &= self.node_class != HANGING
        self.node_class[bnd] = DIRICHLET

        for nid, (masters, _) in constraints.items():
            for mid in masters:
                if self.node_class[mid] == HANGING:
                    raise SpaceError("constraint chains are not supported")

        self.constraints = {
            nid: (np.asarray(m, dtype=np.int64), np.asarray(c, dtype=float))
            for nid, (m, c) in constraints.items()
        }

        self.free_ids = np.where(self.node_class == FREE)[0]
        self.dirichlet_ids = np.where(self.node_class == DIRICHLET)[0]
        self.hanging_ids = np.where(self.node_class == HANGING)[0]
        self.free_index = np.full(n, -1, dtype=np.int64)
        self.free_index[self.free_ids] = np.arange(len(self.free_ids))
        self.dirichlet_index = np.full(n, -1, dtype=np.int64)
        self.dirichlet_index[self.dirichlet_ids] = np.arange(len(self.dirichlet_ids))

    def _constrain_face(self, leaf, face, coarse_leaf, constraints):
        """Constrain the nodes of ``leaf`` on ``face`` to the coarse trace."""
        table = self.table
        g, D, lmax = table.g, table.D, table.lmax
        order, subdiv = self.order, self.subdiv
        r, l, ix, iy = leaf
        rc, lc, ixc, iyc = coarse_leaf
        shift = lmax - l
        shift_c = lmax - lc

        if face in (0, 1):
            fixed = (ix * g + (0 if face == 0 else g)) << shift
            run = (iy * g + np.arange(g + 1)) << shift
            fixed_c = (ixc * g + (g if face == 0 else 0)) << shift_c
            edge0 = iyc * g << shift_c
        else:
            fixed = (iy * g + (0 if face == 2 else g)) << shift
            run = (ix * g + np.arange(g + 1)) << shift
            fixed_c = (iyc * g + (g if face == 2 else 0)) << shift_c
            edge0 = ixc * g << shift_c

        den = g << shift_c  # coarse edge length in key units
        for p in run:
            num = int(p) - edge0  # position along coarse edge, / den
            if num * g % den == 0:
                continue  # coincides with a coarse-side node: already merged
            key = (r, fixed, int(p)) if face in (0, 1) else (r, int(p), fixed)
            nid = table.key_to_node[key]
            sub = num * subdiv // den
            tau = (num * subdiv - sub * den) / den
            masters = []
            for j in range(order + 1):
                off = (sub * order + j) * (den // g)
                mkey = (
                    (rc, fixed_c, edge0 + off)
                    if face in (0, 1)
                    else (rc, edge0 + off, fixed_c)
                )
                masters.append(table.key_to_node[mkey])
            coefs, _ = lagrange_1d(order, np.array([tau]))
            entry = (masters, coefs[0].tolist())
            if nid in constraints:
                prev = constraints[nid]
                if prev[0] != masters or not np.allclose(prev[1], entry[1]):
                    raise SpaceError("inconsistent hanging constraint")
            else:
                constraints[nid] = entry

    # -- queries ---------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.table.n_nodes

    @property
    def n_free(self) -> int:
        return len(self.free_ids)

    @property
    def n_dirichlet(self) -> int:
        return len(self.dirichlet_ids)

    @property
    def node_xy(self) -> np.ndarray:
        return self.table.xy

    @property
    def free_xy(self) -> np.ndarray:
        return self.table.xy[self.free_ids]

    @property
    def dirichlet_xy(self) -> np.ndarray:
        return self.table.xy[self.dirichlet_ids]

    @property
    def leaf_nodes(self) -> np.ndarray:
        return self.table.leaf_nodes

    def constraint_rows(self):
        """Expansion of every node into free DOFs: ``(ptr, dofs, coefs)``.

        Dirichlet nodes (and Dirichlet masters of hanging nodes) expand to
        nothing here; their values enter assembly through the lifting.
        """
        ptr = [0]
        dofs: list = []
        coefs: list = []
        for nid in range(self.n_nodes):
            cls = self.node_class[nid]
            if cls == FREE:
                dofs.append(self.free_index[nid])
                coefs.append(1.0)
            elif cls == HANGING:
                masters, cc = self.constraints[nid]
                for mid, c in zip(masters, cc):
                    if self.node_class[mid] == FREE:
                        dofs.append(self.free_index[mid])
                        coefs.append(c)
            ptr.append(len(dofs))
        return (
            np.asarray(ptr, dtype=np.int64),
            np.asarray(dofs, dtype=np.int64),
            np.asarray(coefs, dtype=float),
        )

    def basis_at(self, ref_pts: np.ndarray):
        return eval_basis_grid(self.order, self.subdiv, ref_pts)


class FEFunction:
    """Function in an :class:`FESpace`: free + Dirichlet values; hanging
    values are always derived through the constraints."""

    def __init__(self, space: FESpace, free: np.ndarray, dirichlet: np.ndarray):
        free = np.asarray(free, dtype=float)
        dirichlet = np.asarray(dirichlet, dtype=float)
        if free.shape != (space.n_free,) or dirichlet.shape != (space.n_dirichlet,):
            raise SpaceError("DOF vector lengths do not match the space")
        self.space = space
        self.free = free
        self.dirichlet = dirichlet
        self._node_values = None

    def node_values(self) -> np.ndarray:
        if self._node_values is None:
            space = self.space
            vals = np.zeros(space.n_nodes)
            vals[space.free_ids] = self.free
            vals[space.dirichlet_ids] = self.dirichlet
            for nid, (masters, coefs) in space.constraints.items():
                vals[nid] = float(np.dot(vals[masters], coefs))
            self._node_values = vals
        return self._node_values

    def eval_at_ref(self, ref_pts: np.ndarray):
        """Values and gradients at the same reference points in every leaf.

        Returns ``vals (n_leaves, m)`` and ``grads (n_leaves, m, 2)``.
        """
        space = self.space
        mesh = space.mesh
        V, Dxi, Deta = space.basis_at(ref_pts)
        loc = self.node_values()[space.leaf_nodes]
        vals = loc @ V.T
        gx = (loc @ Dxi.T) / mesh.wx[:, None]
        gy = (loc @ Deta.T) / mesh.wy[:, None]
        return vals, np.stack([gx, gy], axis=-1)

    def __add__(self, other: "FEFunction") -> "FEFunction":
        if other.space is not self.space:
            raise SpaceError("can only add functions on the same space")
        return FEFunction(self.space, self.free + other.free, self.dirichlet + other.dirichlet)


def build_fe_space(mesh: ForestMesh, k: int, dirichlet_predicate=None) -> FESpace:
    """Order-``k`` Lagrange trial space; ``dirichlet_predicate`` selects the
    strongly imposed part of the boundary (default: all of it)."""
    return FESpace(mesh, k, 1, dirichlet_predicate)


def build_test_space(trial: FESpace) -> FESpace:
    """Piecewise-linear space on the ``k x k`` subdivision of every leaf.

    Its vertices coincide with the trial nodes and the classification
    matches node-for-node, so the dimensions agree.
    """
    if trial.order == 1:
        return trial
    test = FESpace(
        trial.mesh,
        1,
        trial.order,
        _table=trial.table,
        _dirichlet_nodes=trial.dirichlet_ids,
    )
    if not np.array_equal(test.node_class, trial.node_class):
        raise SpaceError("test-space classification differs from trial")
    if test.n_free + test.n_dirichlet != trial.n_free + trial.n_dirichlet:
        raise SpaceError("test-space dimension mismatch")
    return test


def interpolate(space: FESpace, fn: Callable) -> FEFunction:
    """Nodal interpolation: evaluate ``fn`` at free and Dirichlet nodes only."""
    free = np.asarray(fn(space.free_xy), dtype=float).reshape(space.n_free)
    if space.n_dirichlet:
        diri = np.asarray(fn(space.dirichlet_xy), dtype=float).reshape(space.n_dirichlet)
    else:
        diri = np.zeros(0)
    return FEFunction(space, free, diri)


def lift_dirichlet(space: FESpace, g: Callable) -> FEFunction:
    """Boundary lifting: Dirichlet values from ``g``, zero free values."""
    if space.n_dirichlet:
        diri = np.asarray(g(space.dirichlet_xy), dtype=float).reshape(space.n_dirichlet)
    else:
        diri = np.zeros(0)
    return FEFunction(space, np.zeros(space.n_free), diri)


def eval_fe(f: FEFunction, leaf: Leaf, points: np.ndarray):
    """Values and gradients of ``f`` at physical ``points`` inside ``leaf``."""
    space = f.space
    mesh = space.mesh
    i = mesh.index[leaf]
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ref = np.empty_like(points)
    ref[:, 0] = (points[:, 0] - mesh.x0[i]) / mesh.wx[i]
    ref[:, 1] = (points[:, 1] - mesh.y0[i]) / mesh.wy[i]
    if np.any(ref < -1e-12) or np.any(ref > 1 + 1e-12):
        raise SpaceError(f"point outside leaf {leaf}")
    ref = np.clip(ref, 0.0, 1.0)
    V, Dxi, Deta = space.basis_at(ref)
    loc = f.node_values()[space.leaf_nodes[i]]
    vals = V @ loc
    grads = np.stack([(Dxi @ loc) / mesh.wx[i], (Deta @ loc) / mesh.wy[i]], axis=-1)
    return vals, grads


def interior_faces(mesh: ForestMesh):
    """All interior face pairings ``(leaf_a, leaf_b, (p0, p1))`` with the
    segment shared by both sides; hanging faces appear as fine sub-faces."""
    out = []
    for leaf in mesh.leaves:
        for fn in mesh.face_neighbors(leaf):
            if fn.kind == "same":
                if fn.neighbors[0] > leaf:
                    out.append((leaf, fn.neighbors[0], fn.segment))
            elif fn.kind == "coarser":
                # fine side owns the sub-face
                out.append((leaf, fn.neighbors[0], fn.segment))
    return out


def continuity_defect(f: FEFunction, n_samples: int = 1000, seed: int = 0) -> float:
    """Max two-sided mismatch over random points on random interior faces,
    relative to ``max(1, |value|)``."""
    mesh = f.space.mesh
    faces = interior_faces(mesh)
    if not faces:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    picks = rng.integers(0, len(faces), size=n_samples)
    params = rng.random(n_samples)
    for idx, t in zip(picks, params):
        la, lb, ((ax, ay), (bx, by)) = faces[idx]
        p = np.array([[ax + t * (bx - ax), ay + t * (by - ay)]])
        va, _ = eval_fe(f, la, p)
        vb, _ = eval_fe(f, lb, p)
        scale = max(1.0, abs(va[0]), abs(vb[0]))
        worst = max(worst, abs(va[0] - vb[0]) / scale)
    return worst


def write_solution(f: FEFunction, path, density: int = 3) -> None:
    """Plain-text export ``x y value`` on a uniform grid per leaf."""
    if density < 2:
        raise SpaceError("density must be >= 2")
    mesh = f.space.mesh
    t = np.linspace(0.0, 1.0, density)
    ref = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    vals, _ = f.eval_at_ref(ref)
    with open(path, "w") as fh:
        fh.write("# x y value\n")
        for i in range(mesh.n_leaves):
            xs = mesh.x0[i] + ref[:, 0] * mesh.wx[i]
            ys = mesh.y0[i] + ref[:, 1] * mesh.wy[i]
            for x, y, v in zip(xs, ys, vals[i]):
                fh.write(f"{float(x)!r} {float(y)!r} {float(v)!r}\n")
