import numpy as np
import pytest

from motionkit.camera import CameraIntrinsics, CameraPose, axis_angle, look_at
from motionkit.filtering import cycle_error_map
from motionkit.flow import FlowField, warp_backward
from motionkit.render import flow_at, render_depth, render_flow, render_flow_backward, render_frames
from motionkit.scene import Plane, SceneObject, SceneSpec, Sphere, Texture, rigid
from motionkit.trajectory import Trajectory

INTR = CameraIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48)


def wall(z=5.0, texture=None, **kw):
    return SceneObject(Plane(point=(0, 0, z), normal=(0, 0, -1), u_axis=(1, 0, 0), **kw),
                       texture or Texture("checker", 1.0))


def traj(*poses, intr=INTR):
    return Trajectory(intr, list(enumerate(poses)))


def test_depth_fronto_parallel_plane():
    d = render_depth(SceneSpec([wall(5.0)]), CameraPose(), INTR)
    assert d.hit_mask.all()
    assert np.allclose(d.depth, 5.0, atol=1e-12)


def test_depth_sphere_centre_and_miss():
    d = render_depth(SceneSpec([SceneObject(Sphere((0, 0, 3), 1.0))]), CameraPose(), INTR)
    assert d.depth[24, 32] == pytest.approx(2.0, abs=1e-12)
    assert not d.hit_mask[0, 0]
    assert d.object_id[0, 0] == -1


def test_static_scene_identical_poses_zero_flow():
    scene = SceneSpec([SceneObject(Sphere((0, 0, 4), 1.0)), wall(8.0)])
    pose = look_at((0.5, 0.3, -1), (0, 0, 4))
    t = traj(pose, pose)
    for f in (render_flow(scene, t, 0), render_flow_backward(scene, t, 0)):
        assert f.valid_mask.any()
        assert np.abs(f.grid).max() == 0.0


def test_lateral_translation_closed_form():
    delta = 0.3
    scene = SceneSpec([wall(5.0)])
    t = traj(CameraPose(), CameraPose(np.eye(3), (delta, 0, 0)))
    f = render_flow(scene, t, 0)
    assert f.valid_mask.all()
    assert np.abs(f.grid[..., 0] - (-INTR.fx * delta / 5.0)).max() <= 1e-6
    assert np.abs(f.grid[..., 1]).max() <= 1e-6


def test_rotation_flow_depth_independent():
    R = axis_angle((0.2, 1.0, 0.1), np.radians(3.0))
    t = traj(CameraPose(), CameraPose(R, (0, 0, 0)))
    near = render_flow(SceneSpec([wall(3.0)]), t, 0)
    far = render_flow(SceneSpec([wall(40.0)]), t, 0)
    scene_sphere = SceneSpec([SceneObject(Sphere((0, 0, 6), 2.0))], background=wall(9.0))
    mixed = render_flow(scene_sphere, t, 0)
    both = near.valid_mask & far.valid_mask & mixed.valid_mask
    assert both.sum() > 1000
    assert np.abs(near.grid - far.grid)[both].max() <= 1e-6
    assert np.abs(near.grid - mixed.grid)[both].max() <= 1e-6


def test_axial_translation_radial():
    t = traj(CameraPose(), CameraPose(np.eye(3), (0, 0, 0.4)))
    f = render_flow(SceneSpec([wall(5.0)]), t, 0)
    v, u = np.mgrid[0:48, 0:64].astype(float)
    px, py = u - INTR.cx, v - INTR.cy
    cross = px * f.grid[..., 1] - py * f.grid[..., 0]
    assert np.abs(cross).max() <= 1e-6


def test_occluded_pixels_masked():
    # a sphere slides right across a wall; wall points just ahead of it get covered
    motion = [rigid(np.eye(3), (0.0, 0, 4)), rigid(np.eye(3), (0.4, 0, 4))]
    scene = SceneSpec([SceneObject(Sphere((0, 0, 0), 1.0), motion=motion)], background=wall(8.0))
    t = traj(CameraPose(), CameraPose())
    f = render_flow(scene, t, 0)
    d0 = render_depth(scene, CameraPose(), INTR, 0)
    on_wall = d0.object_id == 1
    hidden = on_wall & ~f.valid_mask
    assert hidden.any()
    d1 = render_depth(scene, CameraPose(), INTR, 1)
    # masked wall pixels are exactly the wall pixels covered by the sphere at frame 1
    assert np.array_equal(hidden, on_wall & (d1.object_id == 0))
    # sphere pixels move with the sphere: about +f*0.4/3 px near the centre
    assert f.grid[24, 32, 0] == pytest.approx(40 * 0.4 / 3.0, rel=1e-9)


def _covisible(scene, t, fwd):
    """Pixels whose warped position has all four bilinear taps on the same surface."""
    ids0 = render_depth(scene, t.pose(0), INTR, 0).object_id
    ids1 = render_depth(scene, t.pose(1), INTR, 1).object_id
    h, w = ids0.shape
    v, u = np.mgrid[0:h, 0:w].astype(float)
    x, y = u + fwd.grid[..., 0], v + fwd.grid[..., 1]
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    ok = fwd.valid_mask & (x0 >= 0) & (y0 >= 0) & (x0 + 1 < w) & (y0 + 1 < h)
    x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= ids1[y0c + dy, x0c + dx] == ids0
    return ok


def test_cycle_consistency_planar_scene():
    scene = SceneSpec([SceneObject(Plane(point=(0.3, -0.2, 4), normal=(0.2, 0.1, -1), u_axis=(1, 0, 0),
                                         half_extent=(0.8, 0.6)), Texture("sine", 0.7))],
                      background=SceneObject(Plane(point=(0, 0, 9), normal=(-0.3, 0.2, -1), u_axis=(1, 0, 0)),
                                             Texture("noise", 2.0)))
    p0 = CameraPose()
    p1 = CameraPose(axis_angle((0.1, 1, 0.2), np.radians(2.0)), (0.15, -0.05, 0.1))
    t = traj(p0, p1)
    fwd, bwd = render_flow(scene, t, 0), render_flow_backward(scene, t, 0)
    err, mask = cycle_error_map(fwd, bwd)
    co = mask & _covisible(scene, t, fwd)
    assert co.sum() > 0.8 * mask.sum()
    assert err[co].max() <= 1e-3


def test_cycle_consistency_exact_for_spheres():
    """Without resampling (backward flow evaluated exactly at the warped points) the cycle closes to round-off."""
    motion = [rigid(np.eye(3), (0.0, 0, 5)), rigid(axis_angle((0, 1, 0), 0.1), (0.2, 0.1, 5))]
    scene = SceneSpec([SceneObject(Sphere((0, 0, 0), 1.2), Texture("sine", 0.5), motion)],
                      background=SceneObject(Sphere((0, 0, 0), 20.0)))
    t = traj(CameraPose(), CameraPose(axis_angle((1, 0, 0), 0.02), (0.1, 0, 0)))
    fwd = render_flow(scene, t, 0)
    v, u = np.mgrid[0:48, 0:64].astype(float)
    warped = np.stack([u, v], axis=-1) + fwd.grid
    back, ok = flow_at(scene, t, 1, 0, warped)
    m = fwd.valid_mask & ok
    assert m.sum() > 2000
    assert np.abs(fwd.grid + back)[m].max() <= 1e-9


def test_backward_identical_poses_zero():
    scene = SceneSpec([wall(5.0)])
    t = traj(CameraPose(), CameraPose())
    assert np.abs(render_flow_backward(scene, t, 0).grid).max() == 0.0


def test_checker_plane_closed_form():
    period, z = 1.0, 5.0
    tex = Texture("checker", period, color_a=(1, 1, 1), color_b=(0, 0, 0), offset=(0.013, 0.029))
    scene = SceneSpec([SceneObject(Plane(point=(0, 0, z), normal=(0, 0, -1), u_axis=(1, 0, 0)), tex)])
    img = render_frames(scene, traj(CameraPose())).frames[0]
    v, u = np.mgrid[0:48, 0:64].astype(float)
    X = (u - INTR.cx) * z / INTR.fx
    Y = (v - INTR.cy) * z / INTR.fy
    # plane axes: u = +x, v = normal x u = -y
    cells = np.floor((X + 0.013) / (period / 2)) + np.floor((-Y + 0.029) / (period / 2))
    expected = (cells % 2 == 0).astype(float)
    assert np.array_equal(img[..., 0], expected)
    # cell side in pixels is f * (period / 2) / z = 4
    row = expected[10]
    edges = np.flatnonzero(np.diff(row))
    assert np.all(np.diff(edges) == 4)


def test_static_frames_identical_and_reproducible():
    scene = SceneSpec([SceneObject(Sphere((0, 0, 4), 1.0), Texture("noise", 0.5, seed=3))], background=wall(9.0))
    pose = look_at((0, 0.5, -1), (0, 0, 4))
    t = traj(pose, pose, pose)
    a = render_frames(scene, t).frames
    b = render_frames(scene, t).frames
    assert np.array_equal(a, b)
    assert np.array_equal(a[0], a[1]) and np.array_equal(a[1], a[2])
    assert a.min() >= 0 and a.max() <= 1


def test_warped_frame_matches_next_frame():
    tex = Texture("sine", 2.0, color_a=(0.9, 0.8, 0.7), color_b=(0.1, 0.2, 0.3))
    scene = SceneSpec([SceneObject(Plane(point=(0, 0, 6), normal=(0.1, 0, -1), u_axis=(1, 0, 0)), tex)])
    t = traj(CameraPose(), CameraPose(axis_angle((0, 1, 0), 0.01), (0.2, 0.1, 0.1)))
    frames = render_frames(scene, t).frames
    fwd = render_flow(scene, t, 0)
    warped = warp_backward(frames[1], fwd)
    h, w = fwd.shape
    v, u = np.mgrid[0:h, 0:w]
    x, y = u + fwd.grid[..., 0], v + fwd.grid[..., 1]
    inside = fwd.valid_mask & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    assert np.abs(warped - frames[0])[inside].mean() <= 0.02


def test_flowfield_invariants():
    g = np.ones((4, 5, 2))
    g[0, 0] = np.nan
    f = FlowField(g)
    assert not f.valid_mask[0, 0] and f.grid[0, 0].tolist() == [0.0, 0.0]
    mask = np.ones((4, 5), bool)
    mask[1, 1] = False
    f2 = FlowField(np.ones((4, 5, 2)), mask)
    assert f2.grid[1, 1].tolist() == [0.0, 0.0]
