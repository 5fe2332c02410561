"""Forest-of-quadtrees meshes over a coarse conforming quadrilateral mesh.

A coarse mesh is a list of axis-aligned rectangles whose shared edges match
exactly. Each coarse cell is the root of a quadtree refined with the 1:4
rule; the set of leaves partitions the domain. Leaves are addressed by
``(root, level, ix, iy)`` with integer coordinates ``0 <= ix, iy < 2**level``
inside their root, so neighbor queries and node identification are exact
integer arithmetic, never floating-point geometry.

All meshes are immutable: refinement/coarsening return new ``ForestMesh``
objects and enforce 2:1 balance (edge-adjacent leaves differ by at most one
level) before returning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

# face indices: 0 = left (-x), 1 = right (+x), 2 = bottom (-y), 3 = top (+y)
FACES = (0, 1, 2, 3)
_OPPOSITE = {0: 1, 1: 0, 2: 3, 3: 2}


class MeshError(ValueError):
    """Invalid coarse mesh or invalid mesh operation."""


class Leaf(NamedTuple):
    root: int
    level: int
    ix: int
    iy: int


@dataclass(frozen=True)
class CoarseMesh:
    """Conforming coarse mesh of axis-aligned rectangles.

    ``cells[i] = (x0, y0, wx, wy)``. Two cells are adjacent when they share
    an entire edge; partial overlaps of edges are rejected. ``neighbor[i]``
    maps each face index to the adjacent cell id or ``None`` on the domain
    boundary.
    """

    cells: tuple
    neighbor: tuple

    @staticmethod
    def from_cells(cells: Sequence[Sequence[float]]) -> "CoarseMesh":
        boxes = []
        for c in cells:
            c = tuple(float(v) for v in c)
            if len(c) != 4:
                raise MeshError(
                    f"coarse cell must be (x0, y0, wx, wy), got {len(c)} entries"
                )
            if c[2] <= 0 or c[3] <= 0:
                raise MeshError("coarse cell extents must be positive")
            boxes.append(c)
        n = len(boxes)
        if n == 0:
            raise MeshError("coarse mesh needs at least one cell")

        for i in range(n):
            xi, yi, wi, hi = boxes[i]
            for j in range(i + 1, n):
                xj, yj, wj, hj = boxes[j]
                if (
                    min(xi + wi, xj + wj) > max(xi, xj)
                    and min(yi + hi, yj + hj) > max(yi, yj)
                ):
                    raise MeshError(f"coarse cells {i} and {j} overlap")

        neighbor = [[None] * 4 for _ in range(n)]
        for i in range(n):
            xi, yi, wi, hi = boxes[i]
            for j in range(n):
                if i == j:
                    continue
                xj, yj, wj, hj = boxes[j]
                touch_x = xi + wi == xj  # j to the right of i
                touch_l = xj + wj == xi  # j to the left
                touch_t = yi + hi == yj
                touch_b = yj + hj == yi
                # y-intervals overlapping but not equal across a vertical
                # contact is a non-conforming coarse interface
                if touch_x or touch_l:
                    lo, hi_ = max(yi, yj), min(yi + hi, yj + hj)
                    if hi_ > lo:
                        if not (yi == yj and hi == hj):
                            raise MeshError(
                                f"coarse cells {i},{j} share a partial edge"
                            )
                        neighbor[i][1 if touch_x else 0] = j
                if touch_t or touch_b:
                    lo, hi_ = max(xi, xj), min(xi + wi, xj + wj)
                    if hi_ > lo:
                        if not (xi == xj and wi == wj):
                            raise MeshError(
                                f"coarse cells {i},{j} share a partial edge"
                            )
                        neighbor[i][3 if touch_t else 2] = j

        for i in range(n):
            for f in FACES:
                j = neighbor[i][f]
                if j is not None and neighbor[j][_OPPOSITE[f]] != i:
                    raise MeshError("coarse adjacency is not symmetric")

        return CoarseMesh(tuple(boxes), tuple(tuple(r) for r in neighbor))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def area(self) -> float:
        return float(sum(w * h for _, _, w, h in self.cells))


@dataclass(frozen=True)
class FaceNeighbor:
    """Classification of one face of a leaf.

    kind is one of ``boundary``, ``same``, ``coarser``, ``finer``;
    ``finer`` carries two neighbor leaves, ``coarser`` and ``same`` one.
    ``segment`` is the leaf's own face as ((x0, y0), (x1, y1)).
    """

    kind: str
    neighbors: tuple
    segment: tuple


class ForestMesh:
    """Set of quadtree leaves over a :class:`CoarseMesh`."""

    def __init__(self, coarse: CoarseMesh, leaves: Iterable[Leaf]):
        self.coarse = coarse
        self.leaves: tuple = tuple(sorted(leaves))
        self._leafset = frozenset(self.leaves)
        if len(self._leafset) != len(self.leaves):
            raise MeshError("duplicate leaves")
        self.index = {leaf: i for i, leaf in enumerate(self.leaves)}
        self._geometry()

    def _geometry(self):
        n = len(self.leaves)
        self.x0 = np.empty(n)
        self.y0 = np.empty(n)
        self.wx = np.empty(n)
        self.wy = np.empty(n)
        for i, (r, l, ix, iy) in enumerate(self.leaves):
            rx, ry, rw, rh = self.coarse.cells[r]
            s = 1 << l
            self.wx[i] = rw / s
            self.wy[i] = rh / s
            self.x0[i] = rx + ix * rw / s
            self.y0[i] = ry + iy * rh / s
        # characteristic size h_K: the larger extent (equals the side
        # length for the square cells used throughout)
        self.h = np.maximum(self.wx, self.wy)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def max_level(self) -> int:
        return max(l.level for l in self.leaves)

    def box(self, leaf: Leaf):
        i = self.index[leaf]
        return self.x0[i], self.y0[i], self.wx[i], self.wy[i]

    # -- neighbor arithmetic ------------------------------------------------

    def _virtual_neighbor(self, leaf: Leaf, face: int):
        """Same-level cell address across ``face`` or None on the boundary."""
        r, l, ix, iy = leaf
        s = 1 << l
        dx = (-1, 1, 0, 0)[face]
        dy = (0, 0, -1, 1)[face]
        nx, ny = ix + dx, iy + dy
        if 0 <= nx < s and 0 <= ny < s:
            return Leaf(r, l, nx, ny)
        r2 = self.coarse.neighbor[r][face]
        if r2 is None:
            return None
        # shared edges span both roots entirely, so the transverse integer
        # coordinate carries over unchanged
        if face == 0:
            return Leaf(r2, l, s - 1, iy)
        if face == 1:
            return Leaf(r2, l, 0, iy)
        if face == 2:
            return Leaf(r2, l, ix, s - 1)
        return Leaf(r2, l, ix, 0)

    @staticmethod
    def _ancestor(cell: Leaf, level: int) -> Leaf:
        d = cell.level - level
        return Leaf(cell.root, level, cell.ix >> d, cell.iy >> d)

    def _covering_leaf(self, cell: Leaf):
        """The leaf equal to ``cell`` or containing it, else None."""
        for lev in range(cell.level, -1, -1):
            cand = self._ancestor(cell, lev)
            if cand in self._leafset:
                return cand
        return None

    def face_neighbors(self, leaf: Leaf) -> list:
        """Classify all four faces of ``leaf``; requires a balanced mesh."""
        if leaf not in self._leafset:
            raise MeshError(f"unknown leaf {leaf}")
        x0, y0, wx, wy = self.box(leaf)
        segments = (
            ((x0, y0), (x0, y0 + wy)),
            ((x0 + wx, y0), (x0 + wx, y0 + wy)),
            ((x0, y0), (x0 + wx, y0)),
            ((x0, y0 + wy), (x0 + wx, y0 + wy)),
        )
        out = []
        for face in FACES:
            virt = self._virtual_neighbor(leaf, face)
            if virt is None:
                out.append(FaceNeighbor("boundary", (), segments[face]))
                continue
            if virt in self._leafset:
                out.append(FaceNeighbor("same", (virt,), segments[face]))
                continue
            cov = self._covering_leaf(virt)
            if cov is not None:
                out.append(FaceNeighbor("coarser", (cov,), segments[face]))
                continue
            # by 2:1 balance the two children touching the face are leaves
            r2, l2, ix2, iy2 = virt
            if face in (0, 1):
                cx = 2 * ix2 + (1 if face == 0 else 0)
                kids = (
                    Leaf(r2, l2 + 1, cx, 2 * iy2),
                    Leaf(r2, l2 + 1, cx, 2 * iy2 + 1),
                )
            else:
                cy = 2 * iy2 + (1 if face == 2 else 0)
                kids = (
                    Leaf(r2, l2 + 1, 2 * ix2, cy),
                    Leaf(r2, l2 + 1, 2 * ix2 + 1, cy),
                )
            for k in kids:
                if k not in self._leafset:
                    raise MeshError(
                        f"mesh not 2:1 balanced at {leaf} face {face}"
                    )
            out.append(FaceNeighbor("finer", kids, segments[face]))
        return out

    # -- invariants ----------------------------------------------------------

    def is_balanced(self) -> bool:
        for leaf in self.leaves:
            for face in FACES:
                virt = self._virtual_neighbor(leaf, face)
                if virt is None:
                    continue
                cov = self._covering_leaf(virt)
                if cov is not None and cov.level < leaf.level - 1:
                    return False
        return True

    def check_partition(self, rtol: float = 1e-12) -> bool:
        """Leaf areas sum to the coarse area; per-root tiles are disjoint."""
        total = float(np.sum(self.wx * self.wy))
        target = self.coarse.area()
        if abs(total - target) > rtol * target:
            return False
        # exact tiling check on the integer grid of each root
        per_root: dict = {}
        for r, l, ix, iy in self.leaves:
            per_root.setdefault(r, []).append((l, ix, iy))
        lmax = self.max_level
        for r, cells in per_root.items():
            covered = 0
            seen = set()
            for l, ix, iy in cells:
                s = 1 << (lmax - l)
                key = (ix << (lmax - l), iy << (lmax - l), lmax - l)
                if key in seen:
                    return False
                seen.add(key)
                covered += s * s
            if covered != (1 << lmax) ** 2:
                return False
        return True


def new_forest(coarse) -> ForestMesh:
    """One level-0 leaf per coarse cell."""
    if not isinstance(coarse, CoarseMesh):
        coarse = CoarseMesh.from_cells(coarse)
    return ForestMesh(coarse, [Leaf(r, 0, 0, 0) for r in range(coarse.n_cells)])


def refine_uniform(mesh: ForestMesh, levels: int) -> ForestMesh:
    """Replace every leaf by its ``4**levels`` descendants."""
    if levels < 0:
        raise MeshError("levels must be nonnegative")
    if levels == 0:
        return mesh
    s = 1 << levels
    leaves = [
        Leaf(r, l + levels, ix * s + a, iy * s + b)
        for (r, l, ix, iy) in mesh.leaves
        for a in range(s)
        for b in range(s)
    ]
    return ForestMesh(mesh.coarse, leaves)


def _children(leaf: Leaf):
    r, l, ix, iy = leaf
    return [
        Leaf(r, l + 1, 2 * ix + a, 2 * iy + b) for b in (0, 1) for a in (0, 1)
    ]


def _balance_closure(coarse: CoarseMesh, leafset: set) -> set:
    """Refine leaves until edge-adjacent levels differ by at most one."""
    helper = ForestMesh.__new__(ForestMesh)
    while True:
        helper.coarse = coarse
        helper._leafset = leafset
        to_refine = set()
        for leaf in leafset:
            for face in FACES:
                virt = helper._virtual_neighbor(leaf, face)
                if virt is None:
                    continue
                cov = helper._covering_leaf(virt)
                if cov is not None and cov.level < leaf.level - 1:
                    to_refine.add(cov)
        if not to_refine:
            return leafset
        leafset = set(leafset)
        for leaf in to_refine:
            leafset.remove(leaf)
            leafset.update(_children(leaf))


def adapt(mesh: ForestMesh, refine_set, coarsen_set) -> ForestMesh:
    """Refine/coarsen marked leaves, then restore 2:1 balance.

    A sibling group is collapsed only when all four siblings are marked for
    coarsening and none for refinement; balance closure may split such a
    parent again (refinement wins over coarsening).
    """
    refine_set = set(refine_set)
    coarsen_set = set(coarsen_set)
    for leaf in refine_set | coarsen_set:
        if leaf not in mesh._leafset:
            raise MeshError(f"unknown leaf {leaf}")
    if refine_set & coarsen_set:
        raise MeshError("refine and coarsen sets must be disjoint")

    leafset = set(mesh.leaves)
    for leaf in refine_set:
        leafset.remove(leaf)
        leafset.update(_children(leaf))

    groups: dict = {}
    for leaf in coarsen_set:
        if leaf.level == 0:
            continue
        parent = Leaf(leaf.root, leaf.level - 1, leaf.ix // 2, leaf.iy // 2)
        groups.setdefault(parent, []).append(leaf)
    for parent, kids in groups.items():
        if len(kids) == 4 and not any(k in refine_set for k in kids):
            for k in kids:
                leafset.remove(k)
            leafset.add(parent)

    leafset = _balance_closure(mesh.coarse, leafset)
    out = ForestMesh(mesh.coarse, leafset)
    assert out.is_balanced()
    return out


def unit_square(levels: int = 0) -> ForestMesh:
    """Unit square as a single coarse cell, optionally refined uniformly."""
    return refine_uniform(new_forest([(0.0, 0.0, 1.0, 1.0)]), levels)


def write_mesh(mesh: ForestMesh, path) -> None:
    """Plain-text export, one leaf per line: root level ix iy x0 y0 h."""
    with open(path, "w") as fh:
        fh.write("# root level ix iy x0 y0 h\n")
        for i, (r, l, ix, iy) in enumerate(mesh.leaves):
            fh.write(
                f"{r} {l} {ix} {iy} "
                f"{float(mesh.x0[i])!r} {float(mesh.y0[i])!r} {float(mesh.h[i])!r}\n"
            )
