"""Tetrahedral SDF grids, marching tetrahedra, and OBJ mesh IO.

The grid tetrahedralizes [-1,1]^3 in a body-centered style: cube corners plus
cell centers, with 4 tets around every interior cell face (the two adjacent
centers joined to each face edge). The covered volume stops half a cell short
of the box boundary, which still contains every normalized scene (bound 0.9).

Extraction interpolates crossing vertices along tet edges directly from the
sdf tensor, so extracted vertex positions are differentiable with respect to
the sdf values; triangle connectivity and winding are discrete per sign
pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

GRID_RES = 32
SDF_TAU = 2.5
ZERO_NUDGE = -1e-12

# tet-local edge order used by the sign-pattern tables
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


@dataclass
class TetGrid:
    vertices: np.ndarray  # (N, 3) float64
    tets: np.ndarray  # (M, 4) int64, positively oriented
    cell_size: float = 0.0

    def __post_init__(self):
        if self.tets.min() < 0 or self.tets.max() >= len(self.vertices):
            raise ValueError("tet indices out of range")

    @classmethod
    def build(cls, resolution: int = GRID_RES) -> "TetGrid":
        g = int(resolution)
        if g < 2:
            raise ValueError(f"grid resolution must be >= 2, got {g}")
        h = 2.0 / g
        axis = np.linspace(-1.0, 1.0, g + 1)
        cx, cy, cz = np.meshgrid(axis, axis, axis, indexing="ij")
        corners = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
        centers_axis = axis[:-1] + h / 2.0
        mx, my, mz = np.meshgrid(centers_axis, centers_axis, centers_axis, indexing="ij")
        centers = np.stack([mx, my, mz], axis=-1).reshape(-1, 3)
        vertices = np.concatenate([corners, centers], axis=0)

        def corner_id(i, j, k):
            return (i * (g + 1) + j) * (g + 1) + k

        n_corners = (g + 1) ** 3

        def center_id(i, j, k):
            return n_corners + (i * g + j) * g + k

        tets = []
        idx = np.arange(g)
        # faces between cell (i,j,k) and its +axis neighbor; 4 tets per face
        for axis_id in range(3):
            shape = [g, g, g]
            shape[axis_id] = g - 1
            ii, jj, kk = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
            ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
            a = center_id(ii, jj, kk)
            nb = [ii.copy(), jj.copy(), kk.copy()]
            nb[axis_id] += 1
            b = center_id(*nb)
            # shared face corners, cyclic order
            base = [ii.copy(), jj.copy(), kk.copy()]
            base[axis_id] += 1
            u_axis, v_axis = [d for d in range(3) if d != axis_id]
            ring = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                c = [w.copy() for w in base]
                c[u_axis] += du
                c[v_axis] += dv
                ring.append(corner_id(*c))
            for e in range(4):
                c0, c1 = ring[e], ring[(e + 1) % 4]
                tets.append(np.stack([a, b, c0, c1], axis=-1))
        tets = np.concatenate(tets, axis=0).astype(np.int64)

        # enforce positive orientation: det[b-a, c-a, d-a] > 0
        v = vertices[tets]
        det = np.einsum(
            "ij,ij->i",
            np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]),
            v[:, 3] - v[:, 0],
        )
        flip = det < 0
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        return cls(vertices=vertices, tets=tets, cell_size=h)


def density_to_sdf_init(tp, grid: TetGrid, tau: float = SDF_TAU, scale: float = 1.0) -> torch.Tensor:
    """sdf(v) = scale * (tau - sigma(v)): negative inside dense regions."""
    from .triplane import density

    if tau <= 0:
        raise ValueError(f"density threshold must be positive, got {tau}")
    pts = torch.as_tensor(grid.vertices, dtype=tp.dtype)
    sig = torch.empty(len(pts), dtype=tp.dtype)
    with torch.no_grad():
        for lo in range(0, len(pts), 65536):
            sig[lo : lo + 65536] = density(tp, pts[lo : lo + 65536])
    sdf = scale * (tau - sig)
    if bool((sdf > 0).all()) or bool((sdf < 0).all()):
        raise ValueError("empty or full grid: density never crosses the threshold")
    return sdf


@dataclass
class TriMesh:
    vertices: torch.Tensor  # (V, 3), may carry autograd history
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @property
    def vertices_np(self) -> np.ndarray:
        return self.vertices.detach().cpu().numpy()

    def face_normals(self) -> torch.Tensor:
        v = self.vertices[self.triangles]
        n = torch.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], dim=-1)
        return n

    def vertex_normals(self) -> torch.Tensor:
        """Area-weighted average of incident face normals, unit length."""
        fn = self.face_normals()  # area-weighted (cross product magnitude = 2*area)
        vn = torch.zeros_like(self.vertices)
        idx = torch.as_tensor(self.triangles.reshape(-1))
        vn.index_add_(0, idx, fn.repeat_interleave(3, dim=0))
        norm = vn.norm(dim=-1, keepdim=True).clamp_min(1e-20)
        return vn / norm

    def edges(self) -> np.ndarray:
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))

    def is_closed_manifold(self) -> bool:
        """Every undirected edge appears in exactly 2 triangles."""
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return bool((counts == 2).all())


def marching_tets(grid: TetGrid, sdf: torch.Tensor) -> TriMesh:
    """Extract the sdf zero level set; vertices differentiable w.r.t. sdf.

    Exact zeros are nudged to -1e-12 (inside) for a deterministic tie-break.
    Quads are split along their shorter diagonal.
    """
    if sdf.shape != (len(grid.vertices),):
        raise ValueError(f"sdf shape {tuple(sdf.shape)} does not match {len(grid.vertices)} vertices")
    sdf = torch.where(sdf == 0.0, torch.full_like(sdf, ZERO_NUDGE), sdf)
    inside = (sdf < 0).numpy()
    tet_inside = inside[grid.tets]  # (M, 4) bool
    count = tet_inside.sum(axis=1)
    active = (count > 0) & (count < 4)
    if not active.any():
        return TriMesh(vertices=torch.zeros(0, 3, dtype=sdf.dtype), triangles=np.zeros((0, 3), np.int64))
    tets = grid.tets[active]
    t_inside = tet_inside[active]

    # global crossing edges, welded on undirected vertex pairs
    local_edges = np.array(TET_EDGES)
    ev_a = tets[:, local_edges[:, 0]]  # (m, 6)
    ev_b = tets[:, local_edges[:, 1]]
    crossing = inside[ev_a] != inside[ev_b]
    pairs = np.stack([ev_a[crossing], ev_b[crossing]], axis=1)
    pairs.sort(axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    edge_key = np.full((len(tets), 6), -1, dtype=np.int64)
    edge_key[crossing] = inv

    va = torch.as_tensor(grid.vertices[uniq[:, 0]], dtype=sdf.dtype)
    vb = torch.as_tensor(grid.vertices[uniq[:, 1]], dtype=sdf.dtype)
    sa = sdf[torch.as_tensor(uniq[:, 0])]
    sb = sdf[torch.as_tensor(uniq[:, 1])]
    verts = (va * sb.unsqueeze(-1) - vb * sa.unsqueeze(-1)) / (sb - sa).unsqueeze(-1)
    verts_np = verts.detach().numpy()

    tris: list[np.ndarray] = []

    def orient(tri_keys: np.ndarray, ref_out: np.ndarray, ref_in: np.ndarray) -> np.ndarray:
        """Wind triangles so normals point from inside toward outside."""
        p = verts_np[tri_keys]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        outward = np.einsum("ij,ij->i", n, ref_out - ref_in)
        out = tri_keys.copy()
        swap = outward < 0
        out[swap] = out[swap][:, ::-1]
        return out

    tet_pts = grid.vertices[tets]  # (m, 4, 3)

    one = count[active] == 1
    three = count[active] == 3
    for sel, flag in ((one, True), (three, False)):
        if not sel.any():
            continue
        # the lone vertex is inside (flag True) or outside (flag False)
        lone = np.argmax(t_inside[sel] == flag, axis=1)
        m = sel.sum()
        rows = np.arange(len(tets))[sel]
        keys = np.empty((m, 3), dtype=np.int64)
        for j in range(3):
            others = np.array([[o for o in range(4) if o != l][j] for l in lone])
            eid = np.array(
                [TET_EDGES.index(tuple(sorted((l, o)))) for l, o in zip(lone, others)]
            )
            keys[:, j] = edge_key[rows, eid]
        lone_pts = tet_pts[sel][np.arange(m), lone]
        other_centroid = (tet_pts[sel].sum(axis=1) - lone_pts) / 3.0
        ref_in = lone_pts if flag else other_centroid
        ref_out = other_centroid if flag else lone_pts
        tris.append(orient(keys, ref_out, ref_in))

    two = count[active] == 2
    if two.any():
        rows = np.arange(len(tets))[two]
        ins = t_inside[two]
        m = len(rows)
        # inside pair (i0, i1) and outside pair (o0, o1)
        i0 = np.argmax(ins, axis=1)
        i1 = 3 - np.argmax(ins[:, ::-1], axis=1)
        outs = ~ins
        o0 = np.argmax(outs, axis=1)
        o1 = 3 - np.argmax(outs[:, ::-1], axis=1)

        def ekey(a_idx, b_idx):
            eid = np.array([TET_EDGES.index(tuple(sorted((a, b)))) for a, b in zip(a_idx, b_idx)])
            return edge_key[rows, eid]

        # quad corners in cyclic order: (i0,o0), (i0,o1), (i1,o1), (i1,o0)
        q = np.stack([ekey(i0, o0), ekey(i0, o1), ekey(i1, o1), ekey(i1, o0)], axis=1)
        p = verts_np[q]
        d02 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        d13 = np.linalg.norm(p[:, 1] - p[:, 3], axis=1)
        use02 = d02 <= d13
        tri_a = np.where(use02[:, None], q[:, [0, 1, 2]], q[:, [0, 1, 3]])
        tri_b = np.where(use02[:, None], q[:, [0, 2, 3]], q[:, [1, 2, 3]])
        centers = tet_pts[two]
        ref_in = (centers[np.arange(m), i0] + centers[np.arange(m), i1]) / 2.0
        ref_out = (centers[np.arange(m), o0] + centers[np.arange(m), o1]) / 2.0
        tris.append(orient(tri_a, ref_out, ref_in))
        tris.append(orient(tri_b, ref_out, ref_in))

    triangles = np.concatenate(tris, axis=0)
    # drop exactly-degenerate faces (coincident crossing points)
    p = verts_np[triangles]
    area2 = np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    triangles = triangles[area2 > 2e-12]
    return TriMesh(vertices=verts, triangles=triangles)


def export_obj(mesh: TriMesh, path, mtl: dict | None = None) -> None:
    """OBJ with v/vn/f records; optional sidecar MTL referencing textures."""
    path = Path(path)
    verts = mesh.vertices_np
    normals = mesh.vertex_normals().detach().numpy()
    lines = []
    if mtl is not None:
        lines.append(f"mtllib {path.stem}.mtl")
        lines.append(f"usemtl {mtl.get('name', 'material0')}")
    for v in verts:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for n in normals:
        lines.append(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}")
    for t in mesh.triangles:
        a, b, c = t + 1
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    path.write_text("\n".join(lines) + "\n")
    if mtl is not None:
        mtl_lines = [f"newmtl {mtl.get('name', 'material0')}"]
        if "albedo_texture" in mtl:
            mtl_lines.append(f"map_Kd {mtl['albedo_texture']}")
        if "roughness_texture" in mtl:
            mtl_lines.append(f"map_Pr {mtl['roughness_texture']}")
        if "metalness_texture" in mtl:
            mtl_lines.append(f"map_Pm {mtl['metalness_texture']}")
        (path.parent / f"{path.stem}.mtl").write_text("\n".join(mtl_lines) + "\n")


def import_obj(path) -> TriMesh:
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            ids = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            tris.append(ids)
    return TriMesh(
        vertices=torch.as_tensor(np.array(verts, dtype=np.float64)),
        triangles=np.array(tris, dtype=np.int64),
    )
