"""Axis-aligned structured grids, macro-element partitions and boundary tagging.

Numbering is lexicographic with the x index running fastest, for cells, nodes
and faces alike. Faces are grouped by normal axis: all x-normal faces first,
then y-normal, then z-normal. Every face carries a fixed global orientation
along the positive axis.

Local conventions on a cell:

* corner ``c`` (0 .. 2**d - 1) sits at offset ``(c >> a) & 1`` along axis ``a``;
* face ``2*a + s`` is the face normal to axis ``a`` on the low (``s=0``) or high
  (``s=1``) side; its outward normal is ``-e_a`` or ``+e_a`` respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

SIDE_NAMES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


def _lex(index, shape):
    return np.ravel_multi_index(index, shape, order="F")


def _unlex(flat, shape):
    return np.unravel_index(flat, shape, order="F")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class StructuredMesh:
    """Rectilinear quad (2D) or hex (3D) grid.

    Parameters
    ----------
    axes : sequence of 1D arrays
        Strictly increasing node coordinates along each axis.
    """

    def __init__(self, axes: Sequence[np.ndarray]):
        axes = tuple(np.asarray(x, dtype=float) for x in axes)
        if len(axes) not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {len(axes)}")
        for a, x in enumerate(axes):
            if x.ndim != 1 or x.size < 2:
                raise ValueError(f"axis {a} needs at least one cell")
            if np.any(np.diff(x) <= 0.0):
                raise ValueError(f"axis {a} coordinates must be strictly increasing")
        self.dim = d = len(axes)
        self.axes = tuple(_frozen(x) for x in axes)
        self.shape = tuple(x.size - 1 for x in axes)
        self.node_shape = tuple(n + 1 for n in self.shape)
        self.lengths = tuple(float(x[-1] - x[0]) for x in axes)

        self.n_cells = int(np.prod(self.shape))
        self.n_nodes = int(np.prod(self.node_shape))

        # faces normal to axis a live on a grid with one extra entry along a
        self.face_shapes = []
        offsets = [0]
        for a in range(d):
            fs = list(self.shape)
            fs[a] += 1
            self.face_shapes.append(tuple(fs))
            offsets.append(offsets[-1] + int(np.prod(fs)))
        self.face_offsets = tuple(offsets)
        self.n_faces = offsets[-1]

        cidx = _unlex(np.arange(self.n_cells), self.shape)
        widths = np.stack([np.diff(axes[a])[cidx[a]] for a in range(d)], axis=1)
        lo = np.stack([axes[a][cidx[a]] for a in range(d)], axis=1)
        self.cell_index = _frozen(np.stack(cidx, axis=1))
        self.cell_widths = _frozen(widths)
        self.cell_lower = _frozen(lo)
        self.cell_centers = _frozen(lo + 0.5 * widths)
        self.cell_volumes = _frozen(np.prod(widths, axis=1))

        corners = np.array([[(c >> a) & 1 for a in range(d)] for c in range(2**d)])
        cell_nodes = np.empty((self.n_cells, 2**d), dtype=np.int64)
        for c, bits in enumerate(corners):
            cell_nodes[:, c] = _lex(tuple(cidx[a] + bits[a] for a in range(d)), self.node_shape)
        self.corner_bits = _frozen(corners)
        self.cell_nodes = _frozen(cell_nodes)

        nidx = _unlex(np.arange(self.n_nodes), self.node_shape)
        self.node_index = _frozen(np.stack(nidx, axis=1))
        self.node_coords = _frozen(np.stack([axes[a][nidx[a]] for a in range(d)], axis=1))

        cell_faces = np.empty((self.n_cells, 2 * d), dtype=np.int64)
        for a in range(d):
            for s in (0, 1):
                idx = tuple(cidx[k] + (s if k == a else 0) for k in range(d))
                cell_faces[:, 2 * a + s] = offsets[a] + _lex(idx, self.face_shapes[a])
        self.cell_faces = _frozen(cell_faces)

        # face_cells[f] = (cell on the low side, cell on the high side), -1 if absent
        face_cells = -np.ones((self.n_faces, 2), dtype=np.int64)
        for a in range(d):
            face_cells[cell_faces[:, 2 * a + 1], 0] = np.arange(self.n_cells)
            face_cells[cell_faces[:, 2 * a], 1] = np.arange(self.n_cells)
        self.face_cells = _frozen(face_cells)

        face_axis = np.empty(self.n_faces, dtype=np.int64)
        face_area = np.empty(self.n_faces)
        face_centers = np.empty((self.n_faces, d))
        for a in range(d):
            sl = slice(offsets[a], offsets[a + 1])
            fidx = _unlex(np.arange(offsets[a + 1] - offsets[a]), self.face_shapes[a])
            face_axis[sl] = a
            area = np.ones(offsets[a + 1] - offsets[a])
            for k in range(d):
                if k == a:
                    face_centers[sl, k] = axes[k][fidx[k]]
                else:
                    h = np.diff(axes[k])[fidx[k]]
                    area *= h
                    face_centers[sl, k] = axes[k][fidx[k]] + 0.5 * h
            face_area[sl] = area
        self.face_axis = _frozen(face_axis)
        self.face_area = _frozen(face_area)
        self.face_centers = _frozen(face_centers)

        # outward sign of local face 2a+s with respect to the global (+axis) orientation
        self.local_face_sign = _frozen(np.tile([-1.0, 1.0], d))

    # ------------------------------------------------------------------
    def cell_face_areas(self, cell: int) -> np.ndarray:
        return self.face_area[self.cell_faces[cell]]

    def is_boundary_face(self) -> np.ndarray:
        return np.any(self.face_cells < 0, axis=1)

    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(~self.is_boundary_face())

    def side_faces(self, side: str) -> np.ndarray:
        a, s = _side(side, self.dim)
        fidx = _unlex(np.arange(self.face_offsets[a + 1] - self.face_offsets[a]), self.face_shapes[a])
        target = 0 if s == 0 else self.shape[a]
        return self.face_offsets[a] + np.flatnonzero(fidx[a] == target)

    def side_nodes(self, side: str) -> np.ndarray:
        a, s = _side(side, self.dim)
        target = 0 if s == 0 else self.shape[a]
        return np.flatnonzero(self.node_index[:, a] == target)

    def side_names(self) -> tuple[str, ...]:
        return SIDE_NAMES[: 2 * self.dim]

    def locate_cell(self, point) -> int:
        """Cell containing ``point``; points on shared boundaries go to the lowest index."""
        point = np.asarray(point, dtype=float)
        idx = []
        for a in range(self.dim):
            x = self.axes[a]
            if point[a] < x[0] or point[a] > x[-1]:
                raise ValueError(f"point {point} outside the mesh")
            # searchsorted(side='left') puts a point on an interior node into the lower cell
            i = int(np.searchsorted(x, point[a], side="left")) - 1
            idx.append(min(max(i, 0), self.shape[a] - 1))
        return int(_lex(tuple(idx), self.shape))

    def __repr__(self):
        return f"StructuredMesh(dim={self.dim}, shape={self.shape}, lengths={self.lengths})"


def _side(side: str, dim: int) -> tuple[int, int]:
    if side not in SIDE_NAMES[: 2 * dim]:
        raise ValueError(f"unknown side {side!r} for a {dim}D mesh")
    i = SIDE_NAMES.index(side)
    return i // 2, i % 2


def build_structured_mesh(dim: int, cells_per_axis, lengths) -> StructuredMesh:
    """Uniform grid on ``[0, l_0] x ... x [0, l_{d-1}]``.

    ``cells_per_axis`` and ``lengths`` may be scalars (same on every axis).
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    n = np.broadcast_to(np.asarray(cells_per_axis), (dim,))
    ln = np.broadcast_to(np.asarray(lengths, dtype=float), (dim,))
    if np.any(n < 1) or np.any(n != np.floor(n)):
        raise ValueError(f"cells_per_axis must be positive integers, got {cells_per_axis}")
    if np.any(ln <= 0.0):
        raise ValueError(f"lengths must be positive, got {lengths}")
    return StructuredMesh([np.linspace(0.0, ln[a], int(n[a]) + 1) for a in range(dim)])


# ----------------------------------------------------------------------
@dataclass(frozen=True)
class MacroElementSet:
    """Partition of the cells into 2x2 (2D) or 2x2x2 (3D) blocks."""

    cells: np.ndarray  # (n_macro, 2**d) member cells, local corner order
    internal_faces: np.ndarray  # (n_macro, 4 or 12)
    measure: np.ndarray  # (n_macro,)
    cell_to_macro: np.ndarray  # (n_cells,)

    def __len__(self):
        return self.cells.shape[0]


def build_macro_elements(mesh: StructuredMesh) -> MacroElementSet:
    if any(n % 2 for n in mesh.shape):
        raise ValueError(
            f"macro-elements need an even number of cells on every axis, got {mesh.shape}"
        )
    d = mesh.dim
    mshape = tuple(n // 2 for n in mesh.shape)
    n_macro = int(np.prod(mshape))
    midx = _unlex(np.arange(n_macro), mshape)
    cells = np.empty((n_macro, 2**d), dtype=np.int64)
    for c, bits in enumerate(mesh.corner_bits):
        cells[:, c] = _lex(tuple(2 * midx[a] + bits[a] for a in range(d)), mesh.shape)

    faces = []
    for a in range(d):
        for c, bits in enumerate(mesh.corner_bits):
            if bits[a] == 0:
                faces.append(mesh.cell_faces[cells[:, c], 2 * a + 1])
    internal = np.stack(faces, axis=1)
    cell_to_macro = np.empty(mesh.n_cells, dtype=np.int64)
    cell_to_macro[cells] = np.arange(n_macro)[:, None]
    return MacroElementSet(
        cells=_frozen(cells),
        internal_faces=_frozen(internal),
        measure=_frozen(mesh.cell_volumes[cells].sum(axis=1)),
        cell_to_macro=_frozen(cell_to_macro),
    )


# ----------------------------------------------------------------------
Field = Callable[[np.ndarray, float], np.ndarray]


def _as_field(value, ncomp: int | None) -> Field | None:
    """Wrap constants into ``f(x, t)`` returning one row per point."""
    if value is None or callable(value):
        return value
    const = np.asarray(value, dtype=float)

    def f(x, t, const=const):
        m = np.shape(x)[0]
        if ncomp is None:
            return np.full(m, float(const))
        return np.broadcast_to(const, (m, ncomp)).copy()

    return f


@dataclass(frozen=True)
class SideBC:
    """Boundary recipe for one side of the box.

    ``fixed`` lists the displacement components prescribed on the side's nodes
    (values from ``displacement``, zero by default); the remaining components
    carry the traction ``traction`` (zero by default). Exactly one of
    ``pressure`` (p = pbar, side joins Gamma_p) or ``flux`` (q.n = qbar, side
    joins Gamma_q) must be given; constants are accepted for any field.
    """

    fixed: tuple[int, ...] = ()
    displacement: object = None
    traction: object = None
    pressure: object = None
    flux: object = None


FLOW_INTERIOR, FLOW_PRESSURE, FLOW_FLUX = 0, 1, 2


@dataclass(frozen=True)
class BoundarySets:
    """Boundary data resolved onto mesh entities."""

    mesh: StructuredMesh
    u_fixed: np.ndarray  # (n_nodes, d) bool
    face_flow: np.ndarray  # (n_faces,) FLOW_* code
    face_side: np.ndarray  # (n_faces,) index into sides, -1 for interior
    sides: tuple[str, ...]
    recipes: tuple[SideBC, ...]
    _displacement: tuple = field(repr=False, default=())
    _traction: tuple = field(repr=False, default=())
    _pressure: tuple = field(repr=False, default=())
    _flux: tuple = field(repr=False, default=())

    @property
    def pressure_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_flow == FLOW_PRESSURE)

    @property
    def flux_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_flow == FLOW_FLUX)

    def displacement_values(self, t: float) -> np.ndarray:
        """Prescribed displacement on every node (zero where not fixed)."""
        mesh = self.mesh
        out = np.zeros((mesh.n_nodes, mesh.dim))
        # later sides do not overwrite values set by earlier ones
        done = np.zeros_like(self.u_fixed)
        for s, side in enumerate(self.sides):
            fn = self._displacement[s]
            comps = list(self.recipes[s].fixed)
            if not comps:
                continue
            nodes = mesh.side_nodes(side)
            vals = np.zeros((nodes.size, mesh.dim)) if fn is None else np.asarray(
                fn(mesh.node_coords[nodes], t), dtype=float
            )
            for c in comps:
                todo = ~done[nodes, c]
                out[nodes[todo], c] = vals[todo, c]
                done[nodes[todo], c] = True
        return out

    def pressure_values(self, t: float) -> np.ndarray:
        """Prescribed pressure on Gamma_p faces (aligned with ``pressure_faces``)."""
        return self._face_values(self.pressure_faces, self._pressure, t)

    def flux_values(self, t: float) -> np.ndarray:
        """Prescribed outward normal Darcy velocity on Gamma_q faces."""
        return self._face_values(self.flux_faces, self._flux, t)

    def _face_values(self, faces, fns, t):
        out = np.zeros(faces.size)
        for s in range(len(self.sides)):
            sel = self.face_side[faces] == s
            fn = fns[s]
            if fn is not None and np.any(sel):
                out[sel] = fn(self.mesh.face_centers[faces[sel]], t)
        return out

    def traction_sides(self):
        """Yield ``(faces, traction_fn)`` for sides with a nonzero traction."""
        for s, side in enumerate(self.sides):
            fn = self._traction[s]
            if fn is not None:
                yield self.mesh.side_faces(side), fn


def tag_boundary(mesh: StructuredMesh, case_spec: Mapping[str, SideBC]) -> BoundarySets:
    """Resolve per-side recipes into node/face boundary sets.

    Every side of the box must appear exactly once in ``case_spec``.
    """
    if not case_spec:
        raise ValueError("empty boundary specification")
    expected = mesh.side_names()
    unknown = set(case_spec) - set(expected)
    if unknown:
        raise ValueError(f"unknown side(s) {sorted(unknown)}; expected {expected}")
    missing = [s for s in expected if s not in case_spec]
    if missing:
        raise ValueError(f"missing side assignment for {missing}")

    d = mesh.dim
    u_fixed = np.zeros((mesh.n_nodes, d), dtype=bool)
    face_flow = np.full(mesh.n_faces, FLOW_INTERIOR, dtype=np.int64)
    face_side = -np.ones(mesh.n_faces, dtype=np.int64)
    recipes, disp, trac, pres, flux = [], [], [], [], []
    for s, side in enumerate(expected):
        bc = case_spec[side]
        if (bc.pressure is None) == (bc.flux is None):
            raise ValueError(
                f"side {side!r}: exactly one of pressure or flux must be given"
            )
        for c in bc.fixed:
            if not 0 <= c < d:
                raise ValueError(f"side {side!r}: component {c} out of range")
        if bc.traction is not None and len(bc.fixed) == d:
            raise ValueError(f"side {side!r}: traction on a fully fixed side overlaps Gamma_u")
        u_fixed[np.ix_(mesh.side_nodes(side), list(bc.fixed))] = True
        faces = mesh.side_faces(side)
        face_flow[faces] = FLOW_PRESSURE if bc.pressure is not None else FLOW_FLUX
        face_side[faces] = s
        recipes.append(bc)
        disp.append(_as_field(bc.displacement, d))
        trac.append(_as_field(bc.traction, d))
        pres.append(_as_field(bc.pressure, None))
        flux.append(_as_field(bc.flux, None))

    return BoundarySets(
        mesh=mesh,
        u_fixed=_frozen(u_fixed),
        face_flow=_frozen(face_flow),
        face_side=_frozen(face_side),
        sides=expected,
        recipes=tuple(recipes),
        _displacement=tuple(disp),
        _traction=tuple(trac),
        _pressure=tuple(pres),
        _flux=tuple(flux),
    )
