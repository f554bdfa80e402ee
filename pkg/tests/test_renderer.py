import numpy as np
import numpy.testing as npt
import pytest

from exceptions import UsageError
from renderer import (
    camera_frame,
    quaternion_to_matrix,
    render_view,
    sdf_box,
    sdf_cone,
    sdf_sphere,
    sdf_torus,
    signed_distance,
    silhouette_area,
)
from shapegen import Shape, random_rotation


def test_sphere_sdf_values():
    p = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    npt.assert_allclose(sdf_sphere(p, 1.0), [-1.0, 1.0])


def test_box_sdf_outside_corner():
    p = np.array([[2.0, 2.0, 0.0]])
    npt.assert_allclose(sdf_box(p, (1.0, 1.0, 1.0)), [np.sqrt(2.0)])


def test_cone_apex_and_base():
    p = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5], [0.0, 0.0, 0.0]])
    d = sdf_cone(p, 0.4, 0.5)
    npt.assert_allclose(d[:2], [0.0, 0.0], atol=1e-12)
    assert d[2] < 0


def test_torus_hole_is_outside():
    assert sdf_torus(np.array([[0.0, 0.0, 0.0]]), 0.6, 0.2)[0] == pytest.approx(0.4)


def test_quaternion_matrix_is_a_rotation():
    r = quaternion_to_matrix(random_rotation(5))
    npt.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_pose_moves_the_shape():
    box = Shape(class_id=1, kind="box", sizes=(1.0, 0.2, 0.2))
    turned = box.model_copy(update={"pose": (np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))})
    p = np.array([[0.0, 0.9, 0.0]])
    assert signed_distance(box, p)[0] > 0
    assert signed_distance(turned, p)[0] < 0


def test_camera_frame_is_orthonormal_including_poles():
    for viewpoint in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])):
        right, up, forward = camera_frame(viewpoint)
        basis = np.stack([right, up, forward])
        npt.assert_allclose(basis @ basis.T, np.eye(3), atol=1e-12)


def test_cube_face_on_area():
    cube = Shape(class_id=1, kind="box", sizes=(0.5, 0.5, 0.5))
    image = render_view(cube, (1.0, 0.0, 0.0), 32)
    assert image.dtype == np.float32
    # 1×1 face in a 4×4 window at 32 px
    assert silhouette_area(image) == 64


def test_sphere_area_and_depth_range():
    sphere = Shape(class_id=0, kind="sphere", sizes=(1.0,))
    image = render_view(sphere, (0.0, 0.0, 1.0), 32)
    assert abs(silhouette_area(image) - np.pi / 16 * 32 * 32) < 12
    hits = image[image > 0]
    assert hits.min() >= 0.1 and hits.max() <= 1.0
    # centre pixel is nearest to the camera
    assert image[15:17, 15:17].max() == hits.max()


def test_render_is_deterministic():
    cone = Shape(class_id=3, kind="cone", sizes=(0.5, 0.6), pose=random_rotation(2))
    a = render_view(cone, (0.0, 0.6, 0.8), 16)
    b = render_view(cone, (0.0, 0.6, 0.8), 16)
    assert a.tobytes() == b.tobytes()


def test_non_unit_viewpoint_rejected():
    sphere = Shape(class_id=0, kind="sphere", sizes=(1.0,))
    with pytest.raises(UsageError):
        render_view(sphere, (2.0, 0.0, 0.0), 8)


def test_sphere_silhouette_is_the_same_from_every_side():
    resolution = 32
    sphere = Shape(class_id=0, kind="sphere", sizes=(0.8,))
    areas = [silhouette_area(render_view(sphere, viewpoint, resolution))
             for viewpoint in ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 0.6, 0.8), (-0.48, 0.6, -0.64))]
    assert max(areas) - min(areas) <= 0.01 * resolution ** 2
