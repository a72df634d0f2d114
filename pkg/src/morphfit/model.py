"""Statistical face model: basis storage, synthesis, shading, and projection.

The model represents a face as a mean shape/texture plus linear combinations
of identity, expression, and texture basis columns. Lighting uses a real
spherical-harmonics basis up to band 2 (9 functions), and the camera is a
plain pinhole with origin at the top-left of the image and y pointing down.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull

from .errors import BasisFormatError, BasisVersionError, ContractViolation

FORMAT_MAGIC = b"MFB1"

# Default basis dimensions.
D_ID_DEFAULT = 80
D_EXP_DEFAULT = 64
D_TEX_DEFAULT = 80
LANDMARK_COUNT = 68

SH_BAND_COUNT = 3  # bands 0..2 -> 9 basis functions


@dataclass(frozen=True)
class BasisSet:
    """Immutable container for the statistical face model.

    Flat vectors are vertex-major: [x0, y0, z0, x1, ...]. Basis matrices have
    shape (3*vertex_count, d). All arrays hold float64 values that are exactly
    representable in float32, so file round trips are bitwise exact.
    """

    vertex_count: int
    mean_shape: np.ndarray
    mean_texture: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    texture_basis: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    version_tag: str = "toy-ellipsoid-v1"

    @property
    def d_id(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def d_exp(self) -> int:
        return self.expression_basis.shape[1]

    @property
    def d_tex(self) -> int:
        return self.texture_basis.shape[1]

    @property
    def diameter(self) -> float:
        pts = self.mean_shape.reshape(-1, 3)
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def __post_init__(self):
        n = self.vertex_count
        if n <= 0:
            raise ContractViolation("vertex_count must be positive")
        if self.mean_shape.shape != (3 * n,):
            raise ContractViolation("mean_shape must have 3*vertex_count entries")
        if self.mean_texture.shape != (3 * n,):
            raise ContractViolation("mean_texture must have 3*vertex_count entries")
        for name in ("identity_basis", "expression_basis", "texture_basis"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] != 3 * n:
                raise ContractViolation(f"{name} must have 3*vertex_count rows")
            if not np.all(np.isfinite(m)):
                raise ContractViolation(f"{name} contains non-finite entries")
        if np.any(self.triangles < 0) or np.any(self.triangles >= n):
            raise ContractViolation("triangle indices out of range")
        lm = self.landmark_indices
        if len(np.unique(lm)) != len(lm) or np.any(lm < 0) or np.any(lm >= n):
            raise ContractViolation("landmark indices must be distinct and in range")


@dataclass
class CoefficientVector:
    """One face instance: identity, expression, texture, lighting, and pose.

    gamma has shape (3, 9): one row of spherical-harmonics weights per color
    channel. pose is (rx, ry, rz, tx, ty, tz) with XYZ Euler angles in radians.
    """

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, basis: BasisSet, translation=(0.0, 0.0, 4.0)) -> "CoefficientVector":
        gamma = np.zeros((3, SH_BAND_COUNT**2))
        pose = np.array([0.0, 0.0, 0.0, *translation], dtype=float)
        return cls(
            alpha=np.zeros(basis.d_id),
            beta=np.zeros(basis.d_exp),
            delta=np.zeros(basis.d_tex),
            gamma=gamma,
            pose=pose,
        )

    def copy(self) -> "CoefficientVector":
        return CoefficientVector(
            self.alpha.copy(), self.beta.copy(), self.delta.copy(),
            self.gamma.copy(), self.pose.copy(),
        )

    def validate(self):
        for name in ("alpha", "beta", "delta", "gamma", "pose"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"{name} contains non-finite entries")
        angles = self.pose[:3]
        if np.any(angles <= -np.pi) or np.any(angles > np.pi):
            raise ContractViolation("rotation angles must lie in (-pi, pi]")


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    principal_point: tuple
    image_size: tuple  # (width, height)

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractViolation("focal length must be positive")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ContractViolation("principal point outside image bounds")

    @classmethod
    def default(cls, size=224) -> "CameraIntrinsics":
        return cls(focal=1.2 * size, principal_point=(size / 2, size / 2),
                   image_size=(size, size))


# ---------------------------------------------------------------------------
# Synthesis


def synthesize_shape(basis: BasisSet, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Mean shape plus identity and expression offsets."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha.shape != (basis.d_id,):
        raise ContractViolation(f"alpha must have {basis.d_id} entries, got {alpha.shape}")
    if beta.shape != (basis.d_exp,):
        raise ContractViolation(f"beta must have {basis.d_exp} entries, got {beta.shape}")
    return basis.mean_shape + basis.identity_basis @ alpha + basis.expression_basis @ beta


def synthesize_texture(basis: BasisSet, delta: np.ndarray) -> np.ndarray:
    """Mean texture plus texture-basis offset. Not clamped here; clamping
    happens at render time only."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (basis.d_tex,):
        raise ContractViolation(f"delta must have {basis.d_tex} entries, got {delta.shape}")
    return basis.mean_texture + basis.texture_basis @ delta


def compute_vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals, unit length.

    positions is a flat (3N,) vector; triangles an (F, 3) index array.
    Raises if any vertex belongs to no triangle.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    tris = np.asarray(triangles)
    n = len(pts)
    used = np.zeros(n, dtype=bool)
    used[tris.ravel()] = True
    if not used.all():
        isolated = np.nonzero(~used)[0]
        raise ContractViolation(f"isolated vertices (no adjacent triangle): {isolated.tolist()}")
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    # cross product magnitude is twice the triangle area, so accumulating the
    # raw cross products gives area weighting for free
    face_n = np.cross(b - a, c - a)
    acc = np.zeros((n, 3))
    for k in range(3):
        np.add.at(acc, tris[:, k], face_n)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (acc / norms).ravel()


# Real spherical harmonics, bands 0..2, standard normalization.
_SH_C0 = 0.5 * np.sqrt(1.0 / np.pi)          # 0.282095
_SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))        # 0.488603
_SH_C2 = np.sqrt(15.0 / (4.0 * np.pi))       # 1.092548 / sqrt? see below
_SH_C2_0 = 0.25 * np.sqrt(5.0 / np.pi)       # 0.315392
_SH_C2_2 = 0.25 * np.sqrt(15.0 / np.pi)      # 0.546274


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the 9 real SH basis functions at each unit normal.

    normals: flat (3N,) array. Returns (N, 9).
    """
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    out = np.empty((len(n), 9))
    out[:, 0] = _SH_C0
    out[:, 1] = _SH_C1 * y
    out[:, 2] = _SH_C1 * z
    out[:, 3] = _SH_C1 * x
    out[:, 4] = _SH_C2 * x * y
    out[:, 5] = _SH_C2 * y * z
    out[:, 6] = _SH_C2_0 * (3.0 * z * z - 1.0)
    out[:, 7] = _SH_C2 * x * z
    out[:, 8] = _SH_C2_2 * (x * x - y * y)
    return out


def shade_vertices(colors: np.ndarray, normals: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Per-vertex lit color: texture times the SH irradiance for its normal.

    gamma has shape (3, 9), one row per color channel. Raises if any normal
    deviates from unit length by more than 1e-6.
    """
    gamma = np.asarray(gamma, dtype=float).reshape(3, -1)
    if gamma.shape[1] != SH_BAND_COUNT**2:
        raise ContractViolation(f"gamma must have 3x{SH_BAND_COUNT**2} entries")
    nvec = np.asarray(normals, dtype=float).reshape(-1, 3)
    lens = np.linalg.norm(nvec, axis=1)
    bad = np.nonzero(np.abs(lens - 1.0) > 1e-6)[0]
    if len(bad):
        raise ContractViolation(f"non-unit normals at vertices {bad[:5].tolist()}")
    phi = sh_basis(normals)                       # (N, 9)
    irradiance = phi @ gamma.T                    # (N, 3)
    tex = np.asarray(colors, dtype=float).reshape(-1, 3)
    return (tex * irradiance).ravel()


def euler_to_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix for XYZ Euler angles: R = Rz @ Ry @ Rx."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz_m @ ry_m @ rx_m


def camera_transform(positions: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Apply R @ p + t to a flat (3N,) position vector; returns (N, 3)."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    pose = np.asarray(pose, dtype=float)
    r = euler_to_matrix(*pose[:3])
    return pts @ r.T + pose[3:6]


def project_points(cam_pts: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-space points (N, 3) -> pixels (N, 2)."""
    z = cam_pts[:, 2]
    cx, cy = intrinsics.principal_point
    f = intrinsics.focal
    out = np.empty((len(cam_pts), 2))
    out[:, 0] = f * cam_pts[:, 0] / z + cx
    out[:, 1] = f * cam_pts[:, 1] / z + cy
    return out


def project_vertices(positions: np.ndarray, pose: np.ndarray,
                     intrinsics: CameraIntrinsics) -> np.ndarray:
    """Rigid transform followed by pinhole projection.

    Returns flat (2N,) pixel coordinates, origin top-left, y down. Raises if
    any vertex lands at non-positive camera depth.
    """
    cam = camera_transform(positions, pose)
    bad = np.nonzero(cam[:, 2] <= 0)[0]
    if len(bad):
        raise ContractViolation(f"non-positive camera depth at vertex {bad[0]}")
    return project_points(cam, intrinsics).ravel()


# ---------------------------------------------------------------------------
# Toy basis generation


@dataclass(frozen=True)
class ToyBasisConfig:
    vertex_count: int = 500
    d_id: int = D_ID_DEFAULT
    d_exp: int = D_EXP_DEFAULT
    d_tex: int = D_TEX_DEFAULT
    seed: int = 0
    shape_amplitude: float = 0.01   # per-vertex rms displacement per unit coeff,
                                    # as a fraction of mesh diameter
    texture_amplitude: float = 0.05


def _fibonacci_sphere(n: int) -> np.ndarray:
    """n well-distributed points on the unit sphere (deterministic)."""
    i = np.arange(n, dtype=float)
    golden = (1 + np.sqrt(5.0)) / 2
    z = 1 - 2 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    theta = 2 * np.pi * i / golden
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _smooth_fields(rng: np.random.Generator, pts: np.ndarray, count: int,
                   waves: int = 10, max_freq: float = 5.0) -> np.ndarray:
    """Random band-limited vector fields sampled at pts.

    Each field is a sum of low-frequency 3D sinusoids, giving smooth spatial
    deformations. Returns a (3N, count) matrix, vertex-major rows.
    """
    n = len(pts)
    cols = np.empty((3 * n, count))
    for j in range(count):
        field_vals = np.zeros((n, 3))
        freqs = rng.uniform(0.5, max_freq, size=(waves, 3))
        phases = rng.uniform(0, 2 * np.pi, size=waves)
        amps = rng.normal(size=(waves, 3))
        for w in range(waves):
            s = np.sin(pts @ freqs[w] + phases[w])
            field_vals += s[:, None] * amps[w]
        cols[:, j] = field_vals.ravel()
    return cols


def _orthonormal_columns(cols: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(cols)
    return q


def _farthest_point_sample(pts: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point sampling over candidate vertex indices."""
    chosen = [candidates[int(np.argmin(pts[candidates, 2]))]]
    dist = np.linalg.norm(pts[candidates] - pts[chosen[0]], axis=1)
    for _ in range(count - 1):
        nxt = candidates[int(np.argmax(dist))]
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts[candidates] - pts[nxt], axis=1))
    return np.array(sorted(chosen))


def _check_basis_rank(rng: np.random.Generator, basis: np.ndarray, name: str):
    # rank on a random 200-row sketch confirms the columns are independent
    sketch = rng.normal(size=(200, basis.shape[0]))
    if np.linalg.matrix_rank(sketch @ basis) != basis.shape[1]:
        raise RuntimeError(f"{name} columns are not linearly independent")


def _as_f32_exact(a: np.ndarray) -> np.ndarray:
    # snap to values representable in float32 so save/load is bitwise exact
    return a.astype(np.float32).astype(np.float64)


def generate_toy_basis(config: ToyBasisConfig) -> BasisSet:
    """Procedural stand-in for a scanned face model.

    The mean shape is an ellipsoidal head; basis columns are orthonormalized
    band-limited random deformation fields scaled so a unit coefficient moves
    vertices by roughly ``shape_amplitude`` of the mesh diameter (rms).
    Deterministic per seed.
    """
    if config.vertex_count < 100:
        raise ContractViolation("vertex_count must be >= 100")
    if min(config.d_id, config.d_exp, config.d_tex) < 1:
        raise ContractViolation("basis dimensions must be >= 1")
    rng = np.random.default_rng(config.seed)
    n = config.vertex_count

    sphere = _fibonacci_sphere(n)
    hull = ConvexHull(sphere)
    tris = hull.simplices.copy()
    # orient all triangles outward
    centers = sphere[tris].mean(axis=1)
    normals = np.cross(sphere[tris[:, 1]] - sphere[tris[:, 0]],
                       sphere[tris[:, 2]] - sphere[tris[:, 0]])
    flip = np.einsum("ij,ij->i", normals, centers) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    semi_axes = np.array([0.9, 1.15, 0.75])
    pts = sphere * semi_axes
    mean_shape = pts.ravel()
    diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def make_basis(d, amplitude):
        raw = _smooth_fields(rng, sphere, d)
        q = _orthonormal_columns(raw)
        # orthonormal columns all have unit norm, so one scale factor suffices
        return q * (amplitude * np.sqrt(n))

    identity_basis = make_basis(config.d_id, config.shape_amplitude * diameter)
    expression_basis = make_basis(config.d_exp, config.shape_amplitude * diameter)
    texture_basis = make_basis(config.d_tex, config.texture_amplitude)

    base_skin = np.array([0.80, 0.62, 0.52])
    tint = 0.06 * np.stack([
        np.sin(2.1 * sphere[:, 0] + 0.3),
        np.sin(1.7 * sphere[:, 1] + 1.1),
        np.sin(1.3 * sphere[:, 2] + 2.0),
    ], axis=1)
    mean_texture = np.clip(base_skin + tint, 0.05, 0.95).ravel()

    # landmarks live on the front half of the face (negative z faces the
    # camera under the canonical pose)
    front = np.nonzero(sphere[:, 2] < 0.2)[0]
    if len(front) < LANDMARK_COUNT:
        # small meshes: take the most front-facing vertices instead
        front = np.argsort(sphere[:, 2])[:min(n, int(1.2 * LANDMARK_COUNT))]
    landmark_indices = _farthest_point_sample(pts, front, LANDMARK_COUNT)

    for mat, name in ((identity_basis, "identity_basis"),
                      (expression_basis, "expression_basis"),
                      (texture_basis, "texture_basis")):
        _check_basis_rank(rng, mat, name)

    return BasisSet(
        vertex_count=n,
        mean_shape=_as_f32_exact(mean_shape),
        mean_texture=_as_f32_exact(mean_texture),
        identity_basis=_as_f32_exact(identity_basis),
        expression_basis=_as_f32_exact(expression_basis),
        texture_basis=_as_f32_exact(texture_basis),
        triangles=tris,
        landmark_indices=landmark_indices,
        version_tag=f"toy-ellipsoid-v1-seed{config.seed}",
    )


# ---------------------------------------------------------------------------
# File format: magic + length-prefixed JSON manifest + float32 arrays


_ARRAY_ORDER = ["mean_shape", "mean_texture", "identity_basis",
                "expression_basis", "texture_basis"]


def save_basis(basis: BasisSet, path: str):
    manifest = {
        "format": FORMAT_MAGIC.decode(),
        "vertex_count": basis.vertex_count,
        "d_id": basis.d_id,
        "d_exp": basis.d_exp,
        "d_tex": basis.d_tex,
        "triangles": basis.triangles.tolist(),
        "landmark_indices": basis.landmark_indices.tolist(),
        "array_order": _ARRAY_ORDER,
        "version_tag": basis.version_tag,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(FORMAT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in _ARRAY_ORDER:
            arr = getattr(basis, name)
            # matrices are written column-major per the file contract
            f.write(np.asfortranarray(arr.astype("<f4")).tobytes(order="F"))
    os.replace(tmp, path)


def load_basis(path: str) -> BasisSet:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise BasisFormatError("file too short for magic", 0)
    magic = data[:4]
    if magic != FORMAT_MAGIC:
        raise BasisVersionError(
            f"unsupported basis format {magic!r}, expected {FORMAT_MAGIC!r}")
    if len(data) < 12:
        raise BasisFormatError("file truncated in manifest length", 4)
    (mlen,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + mlen:
        raise BasisFormatError("file truncated in manifest", 12)
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BasisFormatError(f"manifest is not valid JSON: {exc}", 12) from exc
    if manifest.get("format") != FORMAT_MAGIC.decode():
        raise BasisVersionError(
            f"manifest declares format {manifest.get('format')!r}, "
            f"expected {FORMAT_MAGIC.decode()!r}")

    n = manifest["vertex_count"]
    shapes = {
        "mean_shape": (3 * n,),
        "mean_texture": (3 * n,),
        "identity_basis": (3 * n, manifest["d_id"]),
        "expression_basis": (3 * n, manifest["d_exp"]),
        "texture_basis": (3 * n, manifest["d_tex"]),
    }
    offset = 12 + mlen
    arrays = {}
    for name in manifest["array_order"]:
        shape = shapes[name]
        count = int(np.prod(shape))
        nbytes = 4 * count
        if len(data) < offset + nbytes:
            raise BasisFormatError(f"file truncated in array {name}", offset)
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arrays[name] = np.reshape(flat, shape, order="F").astype(np.float64)
        offset += nbytes
    return BasisSet(
        vertex_count=n,
        triangles=np.array(manifest["triangles"], dtype=int),
        landmark_indices=np.array(manifest["landmark_indices"], dtype=int),
        version_tag=manifest["version_tag"],
        **arrays,
    )
