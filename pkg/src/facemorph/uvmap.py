"""UV-atlas rasters: unwrap vertex attributes to UV maps, resample back,
up-sample inside the mask, and compute normal maps from geometry maps.

Texel convention: texel (row i, col j) at resolution H x W covers the square
[j/W,(j+1)/W] x [i/H,(i+1)/H] with center ((j+0.5)/W, (i+0.5)/H); row 0 sits
at v ~ 0. A texel is masked when its center lies inside some UV triangle;
ties on shared edges go to the lowest triangle id so rasterization is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from facemorph.mesh import LandmarkSet, MeshError, TriMesh, triangle_uv_areas


@dataclass
class UVMap:
    """Multi-channel raster over the template's UV atlas.

    data is (height, width, channels) float64; mask is (height, width) bool.
    Values outside the mask are zero. Geometry channels are in millimeters,
    texture channels in [0,1].
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape %s != data plane %s" % (self.mask.shape, self.data.shape[:2]))
        self.data = self.data * self.mask[:, :, None]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def concat(self, other: "UVMap") -> "UVMap":
        """Channel-wise concatenation; masks must agree."""
        if other.data.shape[:2] != self.data.shape[:2]:
            raise ValueError("resolution mismatch in concat")
        return UVMap(np.concatenate([self.data, other.data], axis=2), self.mask & other.mask)


@dataclass
class TemplateAtlas:
    """Neutral template mesh with its landmark set and the UV rasterization
    (texel -> triangle id + barycentric weights), computed per resolution and
    cached."""

    mesh: TriMesh
    landmarks: LandmarkSet
    _raster_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mesh.uvs is None:
            raise MeshError("template mesh must carry uv coordinates")
        if (self.mesh.uvs < 0).any() or (self.mesh.uvs > 1).any():
            raise MeshError("template uv coordinates must lie in [0,1]^2")
        areas = triangle_uv_areas(self.mesh)
        if (np.abs(areas) <= 0).any():
            raise MeshError("template has a degenerate triangle in UV space (id %d)"
                            % int(np.argmin(np.abs(areas) > 0)))
        if self.landmarks.vertex_indices.size and self.landmarks.vertex_indices.max() >= self.mesh.num_vertices:
            raise MeshError("landmark vertex index out of range")

    def triangle_index(self, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
        """(tri_id, bary) at the given square resolution.

        tri_id is (res, res) int32, -1 where no triangle covers the texel
        center; bary is (res, res, 3) with non-negative weights summing to 1
        on covered texels.
        """
        if resolution not in self._raster_cache:
            self._raster_cache[resolution] = _rasterize_atlas(self.mesh, resolution)
        return self._raster_cache[resolution]

    def mask(self, resolution: int) -> np.ndarray:
        return self.triangle_index(resolution)[0] >= 0


def _rasterize_atlas(mesh: TriMesh, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    if resolution < 4:
        raise ValueError("uv resolution must be >= 4, got %d" % resolution)
    res = int(resolution)
    uv = mesh.uvs
    tris = mesh.triangles
    tri_id = np.full((res, res), -1, dtype=np.int32)
    bary = np.zeros((res, res, 3), dtype=np.float64)

    centers = (np.arange(res) + 0.5) / res
    for t in range(len(tris)):
        a, b, c = uv[tris[t, 0]], uv[tris[t, 1]], uv[tris[t, 2]]
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        j0 = max(int(np.floor(lo[0] * res - 0.5)), 0)
        j1 = min(int(np.ceil(hi[0] * res - 0.5)) + 1, res)
        i0 = max(int(np.floor(lo[1] * res - 0.5)), 0)
        i1 = min(int(np.ceil(hi[1] * res - 0.5)) + 1, res)
        if j0 >= j1 or i0 >= i1:
            continue
        px = centers[j0:j1][None, :]
        py = centers[i0:i1][:, None]
        denom = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if denom == 0.0:
            continue
        w1 = ((px - a[0]) * (c[1] - a[1]) - (py - a[1]) * (c[0] - a[0])) / denom
        w2 = ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])) / denom
        w0 = 1.0 - w1 - w2
        eps = 1e-12
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        free = tri_id[i0:i1, j0:j1] == -1
        take = inside & free
        if not take.any():
            continue
        sub = tri_id[i0:i1, j0:j1]
        sub[take] = t
        w = np.stack([np.broadcast_to(w0, take.shape),
                      np.broadcast_to(w1, take.shape),
                      np.broadcast_to(w2, take.shape)], axis=-1)
        w = np.clip(w, 0.0, None)
        w = w / w.sum(axis=-1, keepdims=True)
        bsub = bary[i0:i1, j0:j1]
        bsub[take] = w[take]
    return tri_id, bary


def unwrap_to_uv(template: TemplateAtlas, attribute: np.ndarray, resolution: int) -> UVMap:
    """Rasterize a per-vertex attribute into the UV atlas by barycentric
    interpolation; unmasked texels are zero."""
    attribute = np.asarray(attribute, dtype=np.float64)
    if attribute.ndim == 1:
        attribute = attribute[:, None]
    if len(attribute) != template.mesh.num_vertices:
        raise ValueError("attribute length %d != vertex count %d"
                         % (len(attribute), template.mesh.num_vertices))
    tri_id, bary = template.triangle_index(resolution)
    mask = tri_id >= 0
    data = np.zeros((resolution, resolution, attribute.shape[1]), dtype=np.float64)
    ids = tri_id[mask]
    corners = template.mesh.triangles[ids]  # (m, 3)
    w = bary[mask]  # (m, 3)
    vals = (attribute[corners[:, 0]] * w[:, 0:1]
            + attribute[corners[:, 1]] * w[:, 1:2]
            + attribute[corners[:, 2]] * w[:, 2:3])
    data[mask] = vals
    return UVMap(data, mask)


def _bilinear_setup(uv: np.ndarray, height: int, width: int):
    """Corner indices and weights for bilinear sampling at texel-center grid."""
    x = uv[:, 0] * width - 0.5
    y = uv[:, 1] * height - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x0c = np.clip(x0, 0, width - 1)
    x1c = np.clip(x0 + 1, 0, width - 1)
    y0c = np.clip(y0, 0, height - 1)
    y1c = np.clip(y0 + 1, 0, height - 1)
    rows = np.stack([y0c, y0c, y1c, y1c], axis=1)
    cols = np.stack([x0c, x1c, x0c, x1c], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return rows, cols, weights


def resample_uv_to_vertices(uv_map: UVMap, template: TemplateAtlas) -> Tuple[np.ndarray, int]:
    """Bilinear sample of the map at each vertex's UV coordinate, restricted
    to masked texels (weights renormalized).

    Vertices whose whole 2x2 neighborhood is unmasked fall back to the
    nearest masked texel; returns (values, fallback_count).
    """
    rows, cols, weights = _bilinear_setup(template.mesh.uvs, uv_map.height, uv_map.width)
    m = uv_map.mask[rows, cols].astype(np.float64)
    w = weights * m
    wsum = w.sum(axis=1)
    ok = wsum > 1e-12

    vals = np.zeros((len(rows), uv_map.channels), dtype=np.float64)
    texels = uv_map.data[rows, cols]  # (n, 4, c)
    vals[ok] = np.einsum("nk,nkc->nc", w[ok] / wsum[ok, None], texels[ok])

    fallback = int(np.count_nonzero(~ok))
    if fallback:
        mi, mj = np.nonzero(uv_map.mask)
        if mi.size == 0:
            raise ValueError("uv map has an empty mask")
        centers = np.stack([(mj + 0.5) / uv_map.width, (mi + 0.5) / uv_map.height], axis=1)
        tree = cKDTree(centers)
        _, nearest = tree.query(template.mesh.uvs[~ok])
        vals[~ok] = uv_map.data[mi[nearest], mj[nearest]]
    return vals, fallback


def resample_grad_to_uv(d_vertex_values: np.ndarray, uv_map_mask: np.ndarray,
                        template: TemplateAtlas) -> np.ndarray:
    """Backward of resample_uv_to_vertices: scatter per-vertex gradients into
    the texel grid (same renormalized bilinear weights; fallback vertices
    feed their nearest masked texel)."""
    h, w_ = uv_map_mask.shape
    rows, cols, weights = _bilinear_setup(template.mesh.uvs, h, w_)
    m = uv_map_mask[rows, cols].astype(np.float64)
    w = weights * m
    wsum = w.sum(axis=1)
    ok = wsum > 1e-12
    grad = np.zeros((h, w_, d_vertex_values.shape[1]), dtype=np.float64)
    wn = np.zeros_like(w)
    wn[ok] = w[ok] / wsum[ok, None]
    contrib = wn[:, :, None] * d_vertex_values[:, None, :]
    np.add.at(grad, (rows.reshape(-1), cols.reshape(-1)), contrib.reshape(-1, d_vertex_values.shape[1]))
    if (~ok).any():
        mi, mj = np.nonzero(uv_map_mask)
        centers = np.stack([(mj + 0.5) / w_, (mi + 0.5) / h], axis=1)
        tree = cKDTree(centers)
        _, nearest = tree.query(template.mesh.uvs[~ok])
        np.add.at(grad, (mi[nearest], mj[nearest]), d_vertex_values[~ok])
    return grad


def upsample_uv(uv_map: UVMap, target_resolution: int) -> UVMap:
    """Bilinear up-sampling restricted to masked texels: unmasked source
    neighbors are excluded and weights renormalized. A target texel is masked
    when any masked source texel contributes."""
    if target_resolution < uv_map.height or target_resolution < uv_map.width:
        raise ValueError("target resolution %d below source %dx%d"
                         % (target_resolution, uv_map.height, uv_map.width))
    res = int(target_resolution)
    jj, ii = np.meshgrid(np.arange(res), np.arange(res))
    uv = np.stack([(jj.reshape(-1) + 0.5) / res, (ii.reshape(-1) + 0.5) / res], axis=1)
    rows, cols, weights = _bilinear_setup(uv, uv_map.height, uv_map.width)
    m = uv_map.mask[rows, cols].astype(np.float64)
    w = weights * m
    wsum = w.sum(axis=1)
    ok = wsum > 1e-12
    vals = np.zeros((res * res, uv_map.channels), dtype=np.float64)
    texels = uv_map.data[rows, cols]
    vals[ok] = np.einsum("nk,nkc->nc", w[ok] / wsum[ok, None], texels[ok])
    return UVMap(vals.reshape(res, res, -1), ok.reshape(res, res))


def normal_map(geometry: UVMap) -> Tuple[UVMap, int]:
    """Per-texel unit normals of a 3-channel geometry map (mm): central
    differences of position w.r.t. (u, v) inside the mask, one-sided at mask
    boundaries, cross product, normalize.

    Texels with a zero-length cross product copy the nearest valid normal;
    returns (normal map, copied-texel count).
    """
    if geometry.channels != 3:
        raise ValueError("geometry map must have 3 channels, got %d" % geometry.channels)
    h, w = geometry.height, geometry.width
    p = geometry.data
    mask = geometry.mask

    def directional_diff(axis: int) -> np.ndarray:
        # axis 1 = u (columns), axis 0 = v (rows)
        fwd_ok = np.zeros((h, w), dtype=bool)
        bwd_ok = np.zeros((h, w), dtype=bool)
        fwd = np.zeros_like(p)
        bwd = np.zeros_like(p)
        if axis == 1:
            fwd_ok[:, :-1] = mask[:, 1:]
            bwd_ok[:, 1:] = mask[:, :-1]
            fwd[:, :-1] = p[:, 1:] - p[:, :-1]
            bwd[:, 1:] = p[:, 1:] - p[:, :-1]
        else:
            fwd_ok[:-1, :] = mask[1:, :]
            bwd_ok[1:, :] = mask[:-1, :]
            fwd[:-1, :] = p[1:, :] - p[:-1, :]
            bwd[1:, :] = p[1:, :] - p[:-1, :]
        both = fwd_ok & bwd_ok
        d = np.zeros_like(p)
        d[both] = 0.5 * (fwd[both] + bwd[both])
        only_f = fwd_ok & ~bwd_ok
        only_b = bwd_ok & ~fwd_ok
        d[only_f] = fwd[only_f]
        d[only_b] = bwd[only_b]
        return d

    du = directional_diff(axis=1)
    dv = directional_diff(axis=0)
    n = np.cross(du.reshape(-1, 3), dv.reshape(-1, 3)).reshape(h, w, 3)
    norm = np.linalg.norm(n, axis=2)
    valid = mask & (norm > 1e-12)
    out = np.zeros_like(n)
    out[valid] = n[valid] / norm[valid][:, None]

    degenerate = mask & ~valid
    count = int(np.count_nonzero(degenerate))
    if count:
        vi, vj = np.nonzero(valid)
        if vi.size == 0:
            raise ValueError("no valid normals anywhere in the mask")
        tree = cKDTree(np.stack([vi, vj], axis=1))
        di, dj = np.nonzero(degenerate)
        _, nearest = tree.query(np.stack([di, dj], axis=1))
        out[di, dj] = out[vi[nearest], vj[nearest]]
    return UVMap(out, mask), count
