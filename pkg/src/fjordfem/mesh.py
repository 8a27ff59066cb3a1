"""Triangle meshes: construction, boundary tagging, file I/O, validation.

Cells are stored counterclockwise.  The boundary is a set of tagged vertex-pair
facets that must coincide with the topological boundary of the triangulation.
"""

import enum

import numpy as np

NATIVE_MAGIC = "fjordfem-mesh 1"


class MeshFormatError(Exception):
    """Raised when a mesh file violates the expected grammar."""


class MeshTopologyError(Exception):
    """Raised when mesh connectivity or tagging is inconsistent."""


class BoundaryTag(enum.IntEnum):
    ICE = 0
    ATMOSPHERE = 1
    BOTTOM = 2
    GROUNDING_LINE = 3
    OPEN_OCEAN = 4
    WALL = 5

    @property
    def token(self):
        return _TAG_TO_TOKEN[self]


_TAG_TO_TOKEN = {
    BoundaryTag.ICE: "ice",
    BoundaryTag.ATMOSPHERE: "atm",
    BoundaryTag.BOTTOM: "bottom",
    BoundaryTag.GROUNDING_LINE: "gl",
    BoundaryTag.OPEN_OCEAN: "ocean",
    BoundaryTag.WALL: "wall",
}
_TOKEN_TO_TAG = {v: k for k, v in _TAG_TO_TOKEN.items()}


def _encode_edges(a, b, nv):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * nv + hi


class Mesh:
    """Conforming triangulation with tagged boundary facets."""

    def __init__(self, vertices, cells, boundary_facets, facet_tags, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        # enforce counterclockwise orientation cell by cell
        v = self.vertices
        d1 = v[cells[:, 1]] - v[cells[:, 0]]
        d2 = v[cells[:, 2]] - v[cells[:, 0]]
        cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        flip = cross < 0.0
        if np.any(flip):
            cells = cells.copy()
            cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()
        self.cells = cells
        self.boundary_facets = np.ascontiguousarray(boundary_facets, dtype=np.int64)
        self.facet_tags = np.ascontiguousarray(facet_tags, dtype=np.int64)
        self._geometry = None
        self._edges = None
        self._facet_owner = None
        self._locator = None
        if validate:
            self.validate()

    # -- basic sizes ------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_facets(self):
        return self.boundary_facets.shape[0]

    # -- derived geometry -------------------------------------------------

    def geometry(self):
        """Affine map data per cell: jacobian, inverse-transpose, determinant."""
        if self._geometry is None:
            v = self.vertices
            c = self.cells
            j = np.empty((self.num_cells, 2, 2))
            j[:, :, 0] = v[c[:, 1]] - v[c[:, 0]]
            j[:, :, 1] = v[c[:, 2]] - v[c[:, 0]]
            det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
            invjt = np.empty_like(j)
            invjt[:, 0, 0] = j[:, 1, 1]
            invjt[:, 0, 1] = -j[:, 1, 0]
            invjt[:, 1, 0] = -j[:, 0, 1]
            invjt[:, 1, 1] = j[:, 0, 0]
            invjt /= det[:, None, None]
            # adjugate layout gives J^{-T} directly
            self._geometry = (j, invjt, det)
        return self._geometry

    def cell_areas(self):
        return 0.5 * self.geometry()[2]

    def edges(self):
        """Unique undirected edges (ne, 2) with lo < hi, lexicographically sorted."""
        if self._edges is None:
            c = self.cells
            a = np.concatenate([c[:, 0], c[:, 1], c[:, 0]])
            b = np.concatenate([c[:, 1], c[:, 2], c[:, 2]])
            codes = _encode_edges(a, b, self.num_vertices)
            uniq = np.unique(codes)
            self._edges = np.column_stack([uniq // self.num_vertices, uniq % self.num_vertices])
        return self._edges

    def facet_owner(self):
        """For each boundary facet: (cell index, local edge index).

        Local edges are (0,1), (1,2), (0,2) in local vertex numbering.
        """
        if self._facet_owner is None:
            c = self.cells
            nv = self.num_vertices
            local = [(0, 1), (1, 2), (0, 2)]
            codes = {}
            for le, (la, lb) in enumerate(local):
                ec = _encode_edges(c[:, la], c[:, lb], nv)
                for ci, code in enumerate(ec):
                    if code in codes:
                        codes[code] = None  # interior edge, two owners
                    else:
                        codes[code] = (ci, le)
            owner = np.empty((self.num_facets, 2), dtype=np.int64)
            fc = _encode_edges(self.boundary_facets[:, 0], self.boundary_facets[:, 1], nv)
            for fi, code in enumerate(fc):
                got = codes.get(code)
                if got is None:
                    raise MeshTopologyError(f"facet {fi} is not a boundary edge")
                owner[fi] = got
            self._facet_owner = owner
        return self._facet_owner

    def facet_lengths(self):
        p = self.vertices[self.boundary_facets]
        return np.hypot(p[:, 1, 0] - p[:, 0, 0], p[:, 1, 1] - p[:, 0, 1])

    def facet_normals(self):
        """Outward unit normal per boundary facet."""
        owner = self.facet_owner()
        p0 = self.vertices[self.boundary_facets[:, 0]]
        p1 = self.vertices[self.boundary_facets[:, 1]]
        t = p1 - p0
        n = np.column_stack([t[:, 1], -t[:, 0]])
        n /= np.hypot(n[:, 0], n[:, 1])[:, None]
        cent = self.vertices[self.cells[owner[:, 0]]].mean(axis=1)
        mid = 0.5 * (p0 + p1)
        inward = np.einsum("fd,fd->f", n, cent - mid) > 0.0
        n[inward] *= -1.0
        return n

    # -- validation -------------------------------------------------------

    def validate(self):
        v, c = self.vertices, self.cells
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshTopologyError("vertices must be (nv, 2)")
        if c.ndim != 2 or c.shape[1] != 3:
            raise MeshTopologyError("cells must be (nc, 3)")
        if c.min(initial=0) < 0 or c.max(initial=-1) >= len(v):
            raise MeshTopologyError("cell vertex index out of range")
        areas = self.cell_areas()
        if np.any(areas <= 0.0):
            bad = int(np.argmin(areas))
            raise MeshTopologyError(f"cell {bad} has nonpositive area {areas[bad]:.3e}")
        sorted_cells = np.sort(c, axis=1)
        _, counts = np.unique(sorted_cells, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise MeshTopologyError("duplicate cell")
        # boundary facets must exactly cover edges with a single incident cell
        a = np.concatenate([c[:, 0], c[:, 1], c[:, 0]])
        b = np.concatenate([c[:, 1], c[:, 2], c[:, 2]])
        codes = _encode_edges(a, b, self.num_vertices)
        uniq, counts = np.unique(codes, return_counts=True)
        topo = set(uniq[counts == 1].tolist())
        if np.any(counts > 2):
            raise MeshTopologyError("edge shared by more than two cells")
        listed = _encode_edges(self.boundary_facets[:, 0], self.boundary_facets[:, 1], self.num_vertices)
        listed_set = set(listed.tolist())
        if len(listed_set) != len(listed):
            raise MeshTopologyError("duplicate boundary facet")
        if listed_set != topo:
            missing = len(topo - listed_set)
            extra = len(listed_set - topo)
            raise MeshTopologyError(
                f"boundary facets do not partition the topological boundary "
                f"({missing} missing, {extra} extra)"
            )
        if self.facet_tags.shape != (self.num_facets,):
            raise MeshTopologyError("facet_tags shape mismatch")
        for t in np.unique(self.facet_tags):
            if int(t) not in [int(x) for x in BoundaryTag]:
                raise MeshTopologyError(f"unknown boundary tag id {t}")

    # -- queries ----------------------------------------------------------

    def facets_with_tag(self, tag):
        return np.nonzero(self.facet_tags == int(tag))[0]

    def has_tag(self, tag):
        return bool(np.any(self.facet_tags == int(tag)))

    # -- native format ----------------------------------------------------

    def save(self, path):
        lines = [NATIVE_MAGIC, f"{self.num_vertices} {self.num_cells} {self.num_facets}"]
        for x, y in self.vertices:
            lines.append(f"{float(x)!r} {float(y)!r}")
        for a, b, c in self.cells:
            lines.append(f"{a} {b} {c}")
        for (a, b), t in zip(self.boundary_facets, self.facet_tags):
            lines.append(f"{a} {b} {BoundaryTag(int(t)).token}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = [ln.strip() for ln in fh if ln.strip()]
        if not raw or raw[0] != NATIVE_MAGIC:
            raise MeshFormatError(f"bad magic line, expected '{NATIVE_MAGIC}'")
        try:
            nv, nc, nf = (int(tok) for tok in raw[1].split())
        except Exception as exc:
            raise MeshFormatError(f"bad count line: {raw[1]!r}") from exc
        if len(raw) != 2 + nv + nc + nf:
            raise MeshFormatError(
                f"expected {2 + nv + nc + nf} lines, found {len(raw)}"
            )
        try:
            verts = np.array([[float(t) for t in ln.split()] for ln in raw[2:2 + nv]])
            cells = np.array([[int(t) for t in ln.split()] for ln in raw[2 + nv:2 + nv + nc]])
        except Exception as exc:
            raise MeshFormatError("malformed vertex or cell line") from exc
        facets = []
        tags = []
        for ln in raw[2 + nv + nc:]:
            toks = ln.split()
            if len(toks) != 3 or toks[2] not in _TOKEN_TO_TAG:
                raise MeshFormatError(f"malformed facet line: {ln!r}")
            facets.append((int(toks[0]), int(toks[1])))
            tags.append(int(_TOKEN_TO_TAG[toks[2]]))
        if verts.shape != (nv, 2) or cells.shape != (nc, 3):
            raise MeshFormatError("vertex or cell block has wrong shape")
        return cls(verts, cells, np.array(facets, dtype=np.int64).reshape(nf, 2),
                   np.array(tags, dtype=np.int64))

    # -- msh 2.2 ----------------------------------------------------------

    @classmethod
    def from_msh(cls, path, tag_map):
        """Read a Gmsh 2.2 ASCII file; `tag_map` maps physical ids to BoundaryTag."""
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
        try:
            i = lines.index("$MeshFormat")
        except ValueError:
            raise MeshFormatError("missing $MeshFormat section")
        fmt = lines[i + 1].split()
        if not fmt or not fmt[0].startswith("2.2"):
            raise MeshFormatError(f"unsupported msh version {fmt[:1]}")
        ni = lines.index("$Nodes")
        nn = int(lines[ni + 1])
        id_map = {}
        verts = np.empty((nn, 2))
        for k in range(nn):
            toks = lines[ni + 2 + k].split()
            id_map[int(toks[0])] = k
            verts[k] = (float(toks[1]), float(toks[2]))
        ei = lines.index("$Elements")
        ne = int(lines[ei + 1])
        cells = []
        facets = []
        tags = []
        for k in range(ne):
            toks = [int(t) for t in lines[ei + 2 + k].split()]
            etype, ntags = toks[1], toks[2]
            phys = toks[3] if ntags >= 1 else 0
            conn = toks[3 + ntags:]
            if etype == 2:
                cells.append([id_map[c] for c in conn])
            elif etype == 1:
                if phys not in tag_map:
                    raise MeshFormatError(f"line element with unmapped physical id {phys}")
                facets.append([id_map[c] for c in conn])
                tags.append(int(tag_map[phys]))
            # other element types (points etc.) are ignored
        if not cells:
            raise MeshFormatError("no triangles found")
        return cls(verts, np.array(cells), np.array(facets, dtype=np.int64).reshape(-1, 2),
                   np.array(tags, dtype=np.int64))


def _boundary_edges_of(cells, nv):
    a = np.concatenate([cells[:, 0], cells[:, 1], cells[:, 0]])
    b = np.concatenate([cells[:, 1], cells[:, 2], cells[:, 2]])
    codes = _encode_edges(a, b, nv)
    uniq, counts = np.unique(codes, return_counts=True)
    bnd = uniq[counts == 1]
    return np.column_stack([bnd // nv, bnd % nv])


def generate_triangulation(bounds, nx, ny, diagonal="alternating", perturbation=0.0,
                           seed=0, side_tags=None):
    """Structured triangulation of a rectangle with optional seeded jitter.

    bounds = (x0, y0, x1, y1).  `diagonal` is one of 'right', 'left',
    'alternating'.  Interior vertices are jittered by at most `perturbation`
    times the local minimum incident edge length; if jitter inverts a cell the
    amplitude is halved and regenerated, giving up after 5 attempts.
    `side_tags` maps 'left'/'right'/'bottom'/'top' to a BoundaryTag
    (default WALL everywhere).
    """
    x0, y0, x1, y1 = bounds
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            q = [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
            if diagonal == "right":
                use_right = True
            elif diagonal == "left":
                use_right = False
            elif diagonal == "alternating":
                use_right = (i + j) % 2 == 0
            else:
                raise ValueError(f"unknown diagonal pattern {diagonal!r}")
            if use_right:
                cells.append([q[0], q[1], q[2]])
                cells.append([q[0], q[2], q[3]])
            else:
                cells.append([q[0], q[1], q[3]])
                cells.append([q[1], q[2], q[3]])
    cells = np.array(cells, dtype=np.int64)

    interior = np.ones(len(verts), dtype=bool)
    bnd = _boundary_edges_of(cells, len(verts))
    interior[np.unique(bnd)] = False

    if perturbation > 0.0:
        # local scale: shortest incident edge length on the unperturbed grid
        ea = np.concatenate([cells[:, 0], cells[:, 1], cells[:, 0]])
        eb = np.concatenate([cells[:, 1], cells[:, 2], cells[:, 2]])
        el = np.hypot(*(verts[ea] - verts[eb]).T)
        scale = np.full(len(verts), np.inf)
        np.minimum.at(scale, ea, el)
        np.minimum.at(scale, eb, el)
        rng = np.random.default_rng(seed)
        base = rng.uniform(-1.0, 1.0, size=(len(verts), 2))
        amp = float(perturbation)
        for _ in range(5):
            cand = verts.copy()
            cand[interior] += amp * scale[interior, None] * base[interior]
            d1 = cand[cells[:, 1]] - cand[cells[:, 0]]
            d2 = cand[cells[:, 2]] - cand[cells[:, 0]]
            if np.all(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] > 0.0):
                verts = cand
                break
            amp *= 0.5
        else:
            raise MeshTopologyError("perturbation kept inverting cells after 5 attempts")

    facets = _boundary_edges_of(cells, len(verts))
    side_tags = side_tags or {}
    default = BoundaryTag.WALL
    tags = np.full(len(facets), int(default), dtype=np.int64)
    mids = 0.5 * (verts[facets[:, 0]] + verts[facets[:, 1]])
    tol = 1e-12 * max(abs(x1 - x0), abs(y1 - y0))
    sides = {
        "left": np.abs(mids[:, 0] - x0) < tol,
        "right": np.abs(mids[:, 0] - x1) < tol,
        "bottom": np.abs(mids[:, 1] - y0) < tol,
        "top": np.abs(mids[:, 1] - y1) < tol,
    }
    for name, mask in sides.items():
        tags[mask] = int(side_tags.get(name, default))
    return Mesh(verts, cells, facets, tags)
