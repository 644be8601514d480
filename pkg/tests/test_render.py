import math

import numpy as np
import pytest

from roomforge import camera
from roomforge.errors import CameraOutsideScene
from roomforge.meshing import SceneMesh
from roomforge.render import ray_box_intersect, render_controls, render_mesh
from roomforge.scene import ProxyRoom, RoomShell, SemanticBox, Viewpoint

from conftest import make_palette


# ---------------------------------------------------------------------------
# Independent brute-force reference: scalar per-pixel/per-box loops.
# Shares only the camera model with the implementation under test.

def _slab_scalar(origin, d, box):
    t_near, t_far = -math.inf, math.inf
    for axis in range(3):
        o, dd = origin[axis], d[axis]
        lo = box.center[axis] - box.size[axis] / 2.0
        hi = box.center[axis] + box.size[axis] / 2.0
        if abs(dd) < 1e-300:
            if o < lo or o > hi:
                return None
            continue
        t0 = (lo - o) / dd
        t1 = (hi - o) / dd
        if t0 > t1:
            t0, t1 = t1, t0
        t_near = max(t_near, t0)
        t_far = min(t_far, t1)
    if t_near > t_far or t_far <= 0.0:
        return None
    return t_near, t_far


def _in_polygon_scalar(poly, px, pz):
    inside = False
    n = len(poly)
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        if (z0 > pz) != (z1 > pz):
            t = (pz - z0) / (z1 - z0)
            if px < x0 + t * (x1 - x0):
                inside = not inside
    return inside


def _shell_scalar(room, origin, d):
    poly = [tuple(p) for p in room.shell.floor_polygon]
    best_t, best_c = math.inf, 0
    ox, oy, oz = origin
    dx, dy, dz = d
    for plane_y, class_id in ((0.0, room.palette.floor_id),
                              (room.shell.height, room.palette.ceiling_id)):
        if dy != 0.0:
            t = (plane_y - oy) / dy
            if math.isfinite(t) and t > 0.0:
                if _in_polygon_scalar(poly, ox + t * dx, oz + t * dz) and t < best_t:
                    best_t, best_c = t, class_id
    n = len(poly)
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        ex, ez = x1 - x0, z1 - z0
        denom = dx * ez - dz * ex
        if denom == 0.0:
            continue
        t = ((x0 - ox) * ez - (z0 - oz) * ex) / denom
        s = ((z0 - oz) * dx - (x0 - ox) * dz) / (-denom)
        y = oy + t * dy
        if (math.isfinite(t) and t > 0.0 and 0.0 <= s <= 1.0
                and 0.0 <= y <= room.shell.height and t < best_t):
            best_t, best_c = t, room.palette.wall_id
    return best_t, best_c


def brute_force_controls(room, v):
    dirs_cam = camera.pixel_directions(v, world=False)
    dirs = dirs_cam @ camera.rotation_matrix(v).T
    h, w = v.height, v.width
    sem = np.zeros((h, w), np.int32)
    inst = np.zeros((h, w), np.int32)
    near = np.zeros((h, w))
    far = np.zeros((h, w))
    boxes = sorted(room.boxes, key=lambda b: b.instance_id)
    for j in range(h):
        for i in range(w):
            d = tuple(dirs[j, i])
            dz = dirs_cam[j, i, 2]
            t_shell, shell_class = _shell_scalar(room, v.position, d)
            best = None
            for box in boxes:
                hit = _slab_scalar(v.position, d, box)
                if hit is None or not hit[0] < t_shell:
                    continue
                if best is None or hit[0] < best[0]:
                    best = (hit[0], hit[1], box)
            if best is None:
                sem[j, i] = shell_class
                near[j, i] = far[j, i] = t_shell * dz
            else:
                sem[j, i] = best[2].class_id
                inst[j, i] = best[2].instance_id
                near[j, i] = max(best[0], 0.0) * dz
                far[j, i] = min(best[1], t_shell) * dz
    return sem, inst, near, far


def random_scene(rng):
    w = rng.uniform(3.0, 8.0)
    d = rng.uniform(3.0, 8.0)
    height = rng.uniform(2.2, 4.0)
    shell = RoomShell(((-w / 2, -d / 2), (w / 2, -d / 2), (w / 2, d / 2), (-w / 2, d / 2)),
                      height)
    palette = make_palette()
    boxes = []
    for i in range(rng.integers(1, 7)):
        size = rng.uniform(0.2, 2.0, 3)
        center = np.array([
            rng.uniform(-w / 2 + 0.1, w / 2 - 0.1),
            rng.uniform(0.1, height - 0.1),
            rng.uniform(-d / 2 + 0.1, d / 2 - 0.1),
        ])
        boxes.append(SemanticBox(int(i + 1), int(rng.integers(4, 9)),
                                 tuple(center), tuple(size)))
    room = ProxyRoom(shell, tuple(boxes), palette, "test scene")
    while True:
        pos = (rng.uniform(-w / 2 + 0.3, w / 2 - 0.3), rng.uniform(0.3, height - 0.3),
               rng.uniform(-d / 2 + 0.3, d / 2 - 0.3))
        from roomforge.scene import point_in_box
        if not any(point_in_box(b, pos, 0.0) for b in boxes):
            break
    v = Viewpoint(pos, yaw=rng.uniform(0, 2 * math.pi), pitch=rng.uniform(-0.5, 0.5),
                  roll=rng.uniform(-0.15, 0.15), fov_h=rng.uniform(60, 110),
                  width=8, height=8)
    return room, v


class TestRayBoxIntersect:
    BOX = SemanticBox(1, 4, (0.0, 0.0, 3.0), (1.0, 1.0, 1.0))

    def test_axial_hit(self):
        assert ray_box_intersect((0, 0, 0), (0, 0, 1), self.BOX) == (2.5, 3.5)

    def test_miss(self):
        box = SemanticBox(1, 4, (5.0, 0.0, 3.0), (1.0, 1.0, 1.0))
        assert ray_box_intersect((0, 0, 0), (0, 0, 1), box) is None

    def test_interior_origin(self):
        box = SemanticBox(1, 4, (0.0, 0.0, 0.0), (2.0, 2.0, 2.0))
        t_enter, t_exit = ray_box_intersect((0, 0, 0), (0, 0, 1), box)
        assert t_enter <= 0.0
        assert t_exit == 1.0

    def test_behind_origin(self):
        box = SemanticBox(1, 4, (0.0, 0.0, -3.0), (1.0, 1.0, 1.0))
        assert ray_box_intersect((0, 0, 0), (0, 0, 1), box) is None

    def test_grazing_face_counts(self):
        # ray along the top face plane
        box = SemanticBox(1, 4, (0.0, -0.5, 3.0), (1.0, 1.0, 1.0))
        hit = ray_box_intersect((0, 0, 0), (0, 0, 1), box)
        assert hit is not None
        assert hit[0] == 2.5

    def test_diagonal(self):
        box = SemanticBox(1, 4, (2.0, 2.0, 2.0), (2.0, 2.0, 2.0))
        d = np.array([1.0, 1.0, 1.0]) / math.sqrt(3)
        t_enter, t_exit = ray_box_intersect((0, 0, 0), d, box)
        assert t_enter == pytest.approx(math.sqrt(3))
        assert t_exit == pytest.approx(3 * math.sqrt(3))


class TestRenderControls:
    def test_empty_room_shell_only(self, empty_room):
        v = Viewpoint((0.0, 1.5, 0.0), yaw=0.0, fov_h=90.0, width=32, height=32)
        cf = render_controls(empty_room, v)
        assert set(np.unique(cf.semantics)) <= {1, 2, 3}
        assert (cf.instances == 0).all()
        assert np.array_equal(cf.near_depth, cf.far_depth)

    def test_single_box_center_pixel(self, one_box_room):
        v = Viewpoint((0.0, 1.5, 0.0), yaw=0.0, fov_h=90.0, width=33, height=33)
        cf = render_controls(one_box_room, v)
        c = 16  # center pixel of a 33px image is exactly on-axis
        assert cf.semantics[c, c] == 4
        assert cf.instances[c, c] == 1
        assert cf.near_depth[c, c] == pytest.approx(2.5)
        assert cf.far_depth[c, c] == pytest.approx(3.5)

    def test_nested_boxes_nearest_entry_wins(self):
        from conftest import _room

        inner = SemanticBox(1, 4, (0.0, 1.5, 3.0), (1.0, 1.0, 1.0))
        outer = SemanticBox(2, 5, (0.0, 1.5, 3.0), (2.0, 2.0, 2.0))
        room = _room([inner, outer], size=(10.0, 10.0))
        v = Viewpoint((0.0, 1.5, 0.0), yaw=0.0, fov_h=90.0, width=33, height=33)
        cf = render_controls(room, v)
        assert cf.semantics[16, 16] == 5  # outer entry at t=2 beats inner t=2.5
        assert cf.near_depth[16, 16] == pytest.approx(2.0)

    def test_camera_outside_scene(self, empty_room):
        v = Viewpoint((30.0, 1.5, 0.0), yaw=0.0, fov_h=90.0, width=16, height=16)
        with pytest.raises(CameraOutsideScene):
            render_controls(empty_room, v)

    def test_deterministic(self, five_box_room):
        v = Viewpoint((0.3, 1.5, 0.2), yaw=0.7, fov_h=90.0, width=64, height=64)
        a = render_controls(five_box_room, v)
        b = render_controls(five_box_room, v)
        assert np.array_equal(a.semantics, b.semantics)
        assert np.array_equal(a.near_depth, b.near_depth)
        assert np.array_equal(a.far_depth, b.far_depth)

    def test_near_le_far_and_shell_equality(self, five_box_room):
        v = Viewpoint((0.3, 1.5, 0.2), yaw=2.1, fov_h=90.0, width=512, height=512)
        cf = render_controls(five_box_room, v)
        assert (cf.near_depth <= cf.far_depth + 1e-12).all()
        shell = cf.instances == 0
        assert np.array_equal(cf.near_depth[shell], cf.far_depth[shell])

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            room, v = random_scene(rng)
            cf = render_controls(room, v)
            sem, inst, near, far = brute_force_controls(room, v)
            assert np.array_equal(cf.semantics, sem)
            assert np.array_equal(cf.instances, inst)
            assert np.array_equal(cf.near_depth, near)
            assert np.array_equal(cf.far_depth, far)

    def test_shrinking_box_never_decreases_near(self):
        from conftest import _room

        rng = np.random.default_rng(21)
        for _ in range(5):
            size = tuple(rng.uniform(0.8, 2.0, 3))
            box = SemanticBox(1, 4, (0.5, 1.2, 1.0), size)
            small = SemanticBox(1, 4, (0.5, 1.2, 1.0), tuple(s * 0.6 for s in size))
            room_big = _room([box], size=(8.0, 8.0))
            room_small = _room([small], size=(8.0, 8.0))
            v = Viewpoint((0.0, 1.5, -2.0), yaw=rng.uniform(-0.4, 0.4),
                          fov_h=90.0, width=48, height=48)
            near_big = render_controls(room_big, v).near_depth
            near_small = render_controls(room_small, v).near_depth
            assert (near_small >= near_big - 1e-9).all()


def _quad(x0, x1, y0, y1, z, color):
    verts = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]], dtype=np.float64)
    colors = np.tile(np.asarray(color, np.uint8), (4, 1))
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return SceneMesh(verts, colors, tris)


class TestRenderMesh:
    V = Viewpoint((0.0, 0.0, 0.0), yaw=0.0, fov_h=90.0, width=64, height=64)

    def test_full_screen_quad(self):
        mesh = _quad(-3, 3, -3, 3, 2.0, (255, 0, 0))
        mr = render_mesh(mesh, self.V)
        assert not mr.mask.any()
        assert np.allclose(mr.depth, 2.0, atol=1e-9)
        assert (mr.color == (255, 0, 0)).all()

    def test_mesh_behind_camera(self):
        mesh = _quad(-3, 3, -3, 3, -2.0, (0, 255, 0))
        mr = render_mesh(mesh, self.V)
        assert mr.mask.all()
        assert (mr.depth == 0).all()

    def test_left_half_quad_mask_duality(self):
        mesh = _quad(-3, 0, -3, 3, 2.0, (0, 0, 255))
        mr = render_mesh(mesh, self.V)
        assert not mr.mask[:, :32].any()
        assert mr.mask[:, 32:].all()

    def test_zbuffer_nearest_wins(self):
        near = _quad(-3, 3, -3, 3, 2.0, (255, 0, 0))
        far = _quad(-3, 3, -3, 3, 4.0, (0, 255, 0))
        mesh = SceneMesh(
            np.concatenate([near.vertices, far.vertices]),
            np.concatenate([near.colors, far.colors]),
            np.concatenate([near.triangles, far.triangles + 4]),
        )
        mr = render_mesh(mesh, self.V)
        assert (mr.color == (255, 0, 0)).all()
        assert np.allclose(mr.depth, 2.0, atol=1e-9)

    def test_no_backface_culling(self):
        mesh = _quad(-3, 3, -3, 3, 2.0, (9, 9, 9))
        flipped = SceneMesh(mesh.vertices, mesh.colors, mesh.triangles[:, ::-1].copy())
        mr = render_mesh(flipped, self.V)
        assert not mr.mask.any()

    def test_color_interpolation(self):
        verts = np.array([[-3, -3, 2], [3, -3, 2], [3, 3, 2], [-3, 3, 2]], dtype=np.float64)
        colors = np.array([[0, 0, 0], [255, 0, 0], [255, 0, 0], [0, 0, 0]], np.uint8)
        mesh = SceneMesh(verts, colors, np.array([[0, 1, 2], [0, 2, 3]], np.int32))
        mr = render_mesh(mesh, self.V)
        # red ramps left to right
        mid = mr.color[32, :, 0].astype(int)
        assert mid[8] < mid[32] < mid[56]

    def test_determinism(self, five_box_room):
        rng = np.random.default_rng(3)
        verts = rng.uniform(-2, 2, (300, 3))
        tris = rng.integers(0, 300, (500, 3)).astype(np.int32)
        colors = rng.integers(0, 255, (300, 3)).astype(np.uint8)
        mesh = SceneMesh(verts, colors, tris)
        v = Viewpoint((0.0, 0.5, -3.5), yaw=0.1, fov_h=90.0, width=128, height=128)
        a = render_mesh(mesh, v)
        b = render_mesh(mesh, v)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.triangle, b.triangle)

    def test_near_plane_clipping(self):
        # triangle straddling the camera plane must not wrap around
        verts = np.array([[0, 0, 5.0], [-1, 0, -1.0], [1, 0, -1.0]], dtype=np.float64)
        mesh = SceneMesh(verts, np.full((3, 3), 200, np.uint8),
                         np.array([[0, 1, 2]], np.int32))
        v = Viewpoint((0.0, 1.0, 0.0), yaw=0.0, pitch=-math.pi / 2,
                      fov_h=90.0, width=32, height=32)
        mr = render_mesh(mesh, v)  # looking straight down at the plane
        assert not mr.mask.all()
        assert (mr.depth[~mr.mask] > 0).all()
