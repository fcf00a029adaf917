"""Mesh extraction from SDF fields and per-face UV atlas construction.

Extraction samples the field on a dense grid and runs marching cubes (the
scikit-image implementation does the table lookup); this module owns the
world-space mapping, orientation enforcement, degeneracy cleanup, and the
topology checks.  Faces are wound counterclockwise seen from outside, so
cross products of edge vectors give outward normals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage.measure import marching_cubes as _skimage_marching_cubes


@dataclass
class TriMesh:
    """Triangle mesh with validated connectivity.

    ``vertices``: (v, 3) float positions.  ``faces``: (f, 3) int indices,
    counterclockwise from outside.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (v, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (f, 3)")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("vertices must be finite")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            same = (
                (self.faces[:, 0] == self.faces[:, 1])
                | (self.faces[:, 1] == self.faces[:, 2])
                | (self.faces[:, 0] == self.faces[:, 2])
            )
            if np.any(same):
                raise ValueError("faces must use three distinct vertices")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def _directed_edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many faces share each."""
        und = np.sort(self._directed_edges(), axis=1)
        return np.unique(und, axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        edges, _ = self.edge_counts()
        return self.n_vertices - len(edges) + self.n_faces

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        _, counts = self.edge_counts()
        return bool(len(counts) > 0 and np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """Each undirected edge is traversed once in each direction."""
        dirs = self._directed_edges()
        uniq, counts = np.unique(dirs, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        flipped = uniq[:, ::-1]
        joined = np.concatenate([uniq, flipped])
        _, c2 = np.unique(joined, axis=0, return_counts=True)
        return bool(np.all(c2 == 2))

    def face_corners(self) -> np.ndarray:
        """Vertex positions per face corner, (f, 3, 3)."""
        return self.vertices[self.faces]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        tri = self.face_corners()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(norm, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive for outward orientation."""
        tri = self.face_corners()
        return float(np.einsum(
            "ij,ij->", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])
        ) / 6.0)


def marching_cubes(field, resolution: int = 64,
                   bbox: Optional[np.ndarray] = None,
                   level: float = 0.0) -> TriMesh:
    """Extract the ``field.sdf == level`` surface inside a bounding box.

    ``resolution`` is the sample count per axis; the grid step is
    ``extent / (resolution - 1)``.  Raises ValueError when the level set
    does not cross the sampled volume.  The returned mesh is cleaned of
    degenerate faces and oriented with outward normals (positive signed
    volume for a closed surface around the origin-side interior).
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if bbox is None:
        bbox = np.asarray(field.bbox, dtype=np.float64)
    else:
        bbox = np.asarray(bbox, dtype=np.float64)
    if bbox.shape != (2, 3) or not np.all(bbox[1] > bbox[0]):
        raise ValueError("bbox must be (2, 3) with positive extent")
    lo, hi = bbox[0], bbox[1]
    spacing = (hi - lo) / (resolution - 1)

    axes = [lo[a] + np.arange(resolution) * spacing[a] for a in range(3)]
    xg, yg, zg = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xg, yg, zg], axis=-1).reshape(-1, 3)
    volume = np.asarray(field.sdf(pts), dtype=np.float64).reshape(
        resolution, resolution, resolution
    )
    if not np.all(np.isfinite(volume)):
        raise ValueError("field not finite")
    if volume.min() > level or volume.max() < level:
        raise ValueError("no surface crossing inside the bounding box")

    verts, faces, _, _ = _skimage_marching_cubes(
        volume, level=level, spacing=tuple(spacing)
    )
    verts = verts + lo

    # Drop exactly degenerate faces (repeated indices or zero area).
    faces = faces[
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    ]
    tri = verts[faces]
    area2 = np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    faces = faces[area2 > 0]

    mesh = TriMesh(vertices=verts, faces=faces)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(vertices=verts, faces=faces[:, [0, 2, 1]])
    return mesh


def build_uv_atlas(mesh: TriMesh, texture_size: int = 256,
                   padding_texels: float = 1.0) -> np.ndarray:
    """Per-face right-triangle UV charts on a square cell grid.

    Faces are laid out row-major into a ``g x g`` grid with
    ``g = ceil(sqrt(n_faces))``.  Each face maps to the lower-left right
    triangle of its cell, inset by ``padding_texels`` texels at the given
    texture size so neighboring charts never share texels under bilinear
    lookup.  Returns per-corner UVs, shape (f, 3, 2), in [0, 1].
    """
    n = mesh.n_faces
    if n == 0:
        raise ValueError("mesh has no faces")
    if texture_size < 4:
        raise ValueError("texture size too small")
    g = int(np.ceil(np.sqrt(n)))
    cell = 1.0 / g
    pad = padding_texels / texture_size
    if 2.0 * pad >= cell:
        raise ValueError(
            f"texture size {texture_size} cannot fit {n} padded charts"
        )
    idx = np.arange(n)
    col = idx % g
    row = idx // g
    u0 = col * cell + pad
    v0 = row * cell + pad
    u1 = (col + 1) * cell - pad
    v1 = (row + 1) * cell - pad
    uv = np.empty((n, 3, 2))
    uv[:, 0, 0], uv[:, 0, 1] = u0, v0
    uv[:, 1, 0], uv[:, 1, 1] = u1, v0
    uv[:, 2, 0], uv[:, 2, 1] = u0, v1
    return uv


# ---------------------------------------------------------------------------
# Wavefront OBJ output (plus a minimal reader for round-trip checks)
# ---------------------------------------------------------------------------


def save_mesh_obj(path, mesh: TriMesh, uv: Optional[np.ndarray] = None,
                  texture_filename: Optional[str] = None) -> None:
    """Write an OBJ file; UVs are emitted per face corner when given.

    With a texture filename a sibling ``.mtl`` is written referencing it.
    """
    path = str(path)
    lines = []
    if texture_filename is not None:
        mtl_path = path.rsplit(".", 1)[0] + ".mtl"
        mtl_name = "material0"
        with open(mtl_path, "w", encoding="utf-8") as fp:
            fp.write(f"newmtl {mtl_name}\n")
            fp.write("Kd 1.0 1.0 1.0\n")
            fp.write(f"map_Kd {texture_filename}\n")
        lines.append(f"mtllib {mtl_path.rsplit('/', 1)[-1]}")
        lines.append(f"usemtl {mtl_name}")
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    if uv is not None:
        uv = np.asarray(uv, dtype=np.float64)
        if uv.shape != (mesh.n_faces, 3, 2):
            raise ValueError("uv must be (n_faces, 3, 2)")
        for face_uv in uv:
            for corner in face_uv:
                lines.append(f"vt {corner[0]:.9g} {corner[1]:.9g}")
        for i, f in enumerate(mesh.faces):
            t = 3 * i
            lines.append(
                f"f {f[0] + 1}/{t + 1} {f[1] + 1}/{t + 2} {f[2] + 1}/{t + 3}"
            )
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")


def load_mesh_obj(path) -> tuple[TriMesh, Optional[np.ndarray]]:
    """Minimal OBJ reader for files produced by :func:`save_mesh_obj`."""
    verts, uvs, faces, face_uv_idx = [], [], [], []
    with open(str(path), "r", encoding="utf-8") as fp:
        for line in fp:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(p) for p in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = [], []
                for token in parts[1:4]:
                    comp = token.split("/")
                    vi.append(int(comp[0]) - 1)
                    if len(comp) > 1 and comp[1]:
                        ti.append(int(comp[1]) - 1)
                faces.append(vi)
                if ti:
                    face_uv_idx.append(ti)
    mesh = TriMesh(vertices=np.asarray(verts), faces=np.asarray(faces))
    if face_uv_idx:
        uv_arr = np.asarray(uvs)[np.asarray(face_uv_idx)]
        return mesh, uv_arr
    return mesh, None
