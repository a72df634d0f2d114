"""Software rendering of a coefficient vector into an image.

z-buffered triangle rasterization with barycentric interpolation of SH-lit
vertex colors. No antialiasing, no shadows; nearest depth wins. Also houses
the skin-probability model behind the photometric attention mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractViolation, RenderError
from .model import (
    BasisSet,
    CameraIntrinsics,
    CoefficientVector,
    camera_transform,
    compute_vertex_normals,
    project_points,
    shade_vertices,
    synthesize_shape,
    synthesize_texture,
)


@dataclass
class RenderedView:
    """A rendered face: image, coverage mask, depth buffer, and landmarks.

    face_mask is true exactly where depth is finite. image values lie in
    [0, 1]. landmarks are the projected landmark vertices in pixels.
    """

    image: np.ndarray          # (H, W, 3)
    face_mask: np.ndarray      # (H, W) bool
    depth: np.ndarray          # (H, W), inf on background
    landmarks: np.ndarray      # (L, 2)
    degenerate_triangles: int = 0


def render_view(basis: BasisSet, coeffs: CoefficientVector,
                intrinsics: CameraIntrinsics) -> RenderedView:
    """Rasterize the face described by coeffs.

    Background pixels are black with face_mask false. Zero-area screen
    triangles are skipped and counted. Raises RenderError if the entire face
    is behind the camera.
    """
    shape = synthesize_shape(basis, coeffs.alpha, coeffs.beta)
    tex = synthesize_texture(basis, coeffs.delta)
    normals = compute_vertex_normals(shape, basis.triangles)
    lit = shade_vertices(tex, normals, coeffs.gamma).reshape(-1, 3)
    lit = np.clip(lit, 0.0, 1.0)

    cam = camera_transform(shape, coeffs.pose)
    if np.all(cam[:, 2] <= 0):
        raise RenderError("entire face is behind the camera")
    screen = project_points(cam, intrinsics)

    w, h = intrinsics.image_size
    image = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    degenerate = 0

    tris = basis.triangles
    # drop triangles with any vertex at non-positive depth
    valid = np.all(cam[tris, 2] > 0, axis=1)
    xs = screen[:, 0]
    ys = screen[:, 1]
    for t in tris[valid]:
        x0, x1, x2 = xs[t]
        y0, y1, y2 = ys[t]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            degenerate += 1
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), w - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        gx, gy = np.meshgrid(np.arange(xmin, xmax + 1), np.arange(ymin, ymax + 1))
        w1 = ((gx - x0) * (y2 - y0) - (x2 - x0) * (gy - y0)) / area
        w2 = ((x1 - x0) * (gy - y0) - (gx - x0) * (y1 - y0)) / area
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * cam[t[0], 2] + w1 * cam[t[1], 2] + w2 * cam[t[2], 2]
        sub = depth[ymin:ymax + 1, xmin:xmax + 1]
        closer = inside & (z < sub)
        if not closer.any():
            continue
        color = (w0[..., None] * lit[t[0]] + w1[..., None] * lit[t[1]]
                 + w2[..., None] * lit[t[2]])
        sub[closer] = z[closer]
        image[ymin:ymax + 1, xmin:xmax + 1][closer] = color[closer]

    lm = basis.landmark_indices
    landmarks = screen[lm].copy()
    return RenderedView(
        image=image,
        face_mask=np.isfinite(depth),
        depth=depth,
        landmarks=landmarks,
        degenerate_triangles=degenerate,
    )


# ---------------------------------------------------------------------------
# Skin model and attention mask


@dataclass(frozen=True)
class SkinModel:
    """Two-class skin color model: Gaussian skin vs uniform non-skin.

    The posterior P(skin | rgb) uses the stated prior; the non-skin class has
    uniform density 1 over the unit color cube.
    """

    mean: np.ndarray
    covariance: np.ndarray
    prior: float = 0.5

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
            raise ContractViolation("covariance must be symmetric 3x3")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ContractViolation("covariance must be positive-definite")
        if not (0 < self.prior < 1):
            raise ContractViolation("prior must lie in (0, 1)")

    @classmethod
    def default(cls) -> "SkinModel":
        # fit once to the lit mean texture of the toy basis; see README
        return cls(mean=np.array([0.62, 0.48, 0.40]),
                   covariance=np.diag([0.035, 0.030, 0.030]),
                   prior=0.5)

    @classmethod
    def fit(cls, colors: np.ndarray, prior: float = 0.5,
            ridge: float = 1e-4) -> "SkinModel":
        """Estimate mean and covariance from (N, 3) color samples."""
        colors = np.asarray(colors, dtype=float).reshape(-1, 3)
        mean = colors.mean(axis=0)
        cov = np.cov(colors.T) + ridge * np.eye(3)
        return cls(mean=mean, covariance=cov, prior=prior)


def skin_probability(image: np.ndarray, model: SkinModel | None = None) -> np.ndarray:
    """Posterior probability of skin for every pixel, in [0, 1]."""
    if model is None:
        model = SkinModel.default()
    img = np.asarray(image, dtype=float)
    flat = img.reshape(-1, 3)
    diff = flat - model.mean
    cov_inv = np.linalg.inv(model.covariance)
    maha = np.einsum("ij,jk,ik->i", diff, cov_inv, diff)
    det = np.linalg.det(model.covariance)
    dens = np.exp(-0.5 * maha) / np.sqrt((2 * np.pi) ** 3 * det)
    post = model.prior * dens / (model.prior * dens + (1 - model.prior) * 1.0)
    return post.reshape(img.shape[:2])


def attention_mask(prob_map: np.ndarray) -> np.ndarray:
    """Attention weights: 1 where skin probability exceeds 0.5, else the
    probability itself (strict inequality at the boundary)."""
    p = np.asarray(prob_map, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ContractViolation("probability map entries must lie in [0, 1]")
    return np.where(p > 0.5, 1.0, p)


# ---------------------------------------------------------------------------
# Image and landmark file I/O


def save_image(image: np.ndarray, path: str):
    """Write an image in [0,1] as 8-bit RGB PNG (values round(255*v))."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.round(255.0 * arr).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=float)
    return data / 255.0


def save_landmarks(landmarks: np.ndarray, path: str):
    with open(path, "w") as f:
        json.dump([[float(x), float(y)] for x, y in np.asarray(landmarks)], f)


def load_landmarks(path: str) -> np.ndarray:
    with open(path) as f:
        return np.array(json.load(f), dtype=float)
