import numpy as np
import pytest

from morphfit.model import (
    BasisSet,
    CameraIntrinsics,
    CoefficientVector,
    ToyBasisConfig,
    generate_toy_basis,
)


@pytest.fixture(scope="session")
def small_basis():
    """Small toy basis whose landmarks identify the shape coefficients."""
    return generate_toy_basis(ToyBasisConfig(
        vertex_count=200, d_id=8, d_exp=4, d_tex=4, seed=2))


@pytest.fixture(scope="session")
def small_intrinsics():
    return CameraIntrinsics.default(64)


def make_triangle_basis(screen_positions=None):
    """Minimal one-triangle basis for direct rasterizer checks.

    The triangle sits in the z=0 plane of model space; place it with a
    translation along +z to render it.
    """
    pts = screen_positions if screen_positions is not None else np.array(
        [[-0.8, -0.7, 0.0], [0.9, -0.6, 0.0], [0.05, 0.85, 0.0]])
    n = 3
    mean_shape = np.asarray(pts, dtype=float).ravel()
    color = np.array([0.3, 0.5, 0.7])
    mean_texture = np.tile(color, n)
    zeros = np.zeros((3 * n, 1))
    return BasisSet(
        vertex_count=n,
        mean_shape=mean_shape,
        mean_texture=mean_texture,
        identity_basis=zeros.copy(),
        expression_basis=zeros.copy(),
        texture_basis=zeros.copy(),
        triangles=np.array([[0, 1, 2]]),
        landmark_indices=np.array([0, 1, 2]),
    )


def uniform_gamma():
    """Lighting that reproduces the texture color exactly (constant band)."""
    c0 = 0.5 * np.sqrt(1.0 / np.pi)
    gamma = np.zeros((3, 9))
    gamma[:, 0] = 1.0 / c0
    return gamma


def lit_coefficients(basis, translation):
    coeffs = CoefficientVector.zeros(basis, translation=translation)
    coeffs.gamma[:] = uniform_gamma()
    return coeffs
