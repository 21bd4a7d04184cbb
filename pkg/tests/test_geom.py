import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_scene, make_view
from plc3d.errors import InvalidInput, NotFound
from plc3d.geom import (
    IGNORE,
    PointScene,
    Region2D,
    RegionLanguagePair,
    associate_regions,
    back_project,
    load_pairs,
    load_regions,
    load_scene,
    project_points,
    save_pairs,
    save_regions,
    save_scene,
)


def brute_force_association(scene, view_id, box, z_tol):
    """Per-point loop written directly from the pinhole + z-buffer definition."""
    view = scene.views[view_id]
    x0, y0, x1, y1 = box
    out = []
    for i, p in enumerate(scene.points):
        c = view.world_to_cam @ np.append(p, 1.0)
        if c[2] <= 0:
            continue
        u = view.intrinsics[0, 0] * c[0] / c[2] + view.intrinsics[0, 1] * c[1] / c[2] + view.intrinsics[0, 2]
        v = view.intrinsics[1, 1] * c[1] / c[2] + view.intrinsics[1, 2]
        if not (0 <= u < view.width and 0 <= v < view.height):
            continue
        if abs(c[2] - view.depth[int(np.floor(v)), int(np.floor(u))]) > z_tol:
            continue
        if x0 <= u < x1 and y0 <= v < y1:
            out.append(i)
    return out


class TestProjectPoints:
    def test_optical_axis_hits_principal_point(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, 2.0]], view)
        proj = project_points(scene, 0, 0.01)
        assert proj.u[0] == pytest.approx(view.intrinsics[0, 2])
        assert proj.v[0] == pytest.approx(view.intrinsics[1, 2])
        assert proj.cam_depth[0] == pytest.approx(2.0)
        assert proj.visible[0]

    def test_behind_camera_is_invisible(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, -2.0], [0.1, 0.0, 0.0]], view)
        proj = project_points(scene, 0, 0.01)
        assert not proj.visible.any()

    def test_occluded_point_on_same_ray(self):
        view = make_view(depth=1.0)
        ray = np.array([0.1, -0.05, 1.0])
        scene = make_scene([ray * 1.0, ray * 3.0], view)
        proj = project_points(scene, 0, 0.01)
        # ray-cast oracle: the nearer candidate owns the pixel
        assert np.floor(proj.u[0]) == np.floor(proj.u[1])
        assert proj.visible.tolist() == [True, False]

    def test_outside_image_is_invisible(self):
        view = make_view(depth=2.0)
        scene = make_scene([[10.0, 0.0, 2.0]], view)
        assert not project_points(scene, 0, 0.01).visible[0]

    def test_invalid_view(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, 2.0]], view)
        with pytest.raises(NotFound):
            project_points(scene, 3, 0.01)

    def test_non_finite_point(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, 2.0]], view)
        scene.points[0, 0] = np.nan
        with pytest.raises(InvalidInput):
            project_points(scene, 0, 0.01)
        with pytest.raises(InvalidInput):
            make_scene([[np.inf, 0.0, 1.0]], view)

    def test_bad_tolerance(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, 2.0]], view)
        with pytest.raises(InvalidInput):
            project_points(scene, 0, 0.0)

    def test_round_trip_on_generated_scene(self, toy_scene):
        for vid, view in enumerate(toy_scene.views):
            proj = project_points(toy_scene, vid, 0.05)
            m = proj.visible
            back = back_project(proj.u[m], proj.v[m], proj.cam_depth[m], view)
            assert np.abs(back - toy_scene.points[m]).max() < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(
        st.tuples(*[st.floats(-3, 3)] * 3),
        st.tuples(*[st.floats(-1, 1)] * 3),
        st.floats(0.5, 5.0),
    )
    def test_round_trip_property(self, cam_pos, offset, dist):
        target = np.array(cam_pos) + np.array([0.3, 0.2, 1.0])
        view = make_view(position=cam_pos, target=target, up=(0.0, 0.0, 1.0))
        rot = view.rotation
        # a point straight ahead plus a lateral offset
        p = np.array(cam_pos) + rot.T @ np.array([0.2 * offset[0], 0.2 * offset[1], dist])
        view.depth[:] = np.float32(0)
        scene = make_scene([p], view)
        proj = project_points(scene, 0, 0.01)
        back = back_project(proj.u, proj.v, proj.cam_depth, view)
        assert np.abs(back - p).max() < 1e-5


class TestAssociateRegions:
    def test_full_image_region(self, toy_scene):
        view = toy_scene.views[0]
        region = Region2D((0, 0, view.width, view.height), "a room", "synthetic")
        pairs, dropped = associate_regions(toy_scene, 0, [region], 1, 0.05)
        vis = np.flatnonzero(project_points(toy_scene, 0, 0.05).visible)
        assert dropped == 0
        assert pairs[0].point_indices.tolist() == vis.tolist()

    def test_small_region_dropped(self):
        view = make_view(depth=2.0)
        pts = [[0.0, 0.0, 2.0], [0.01, 0.0, 2.0], [1.0, 0.5, 2.0]]
        scene = make_scene(pts, view)
        region = Region2D((30, 22, 34, 26), "a cup", "det_t")
        pairs, dropped = associate_regions(scene, 0, [region], 5, 0.01)
        assert pairs == [] and dropped == 1
        pairs, dropped = associate_regions(scene, 0, [region], 2, 0.01)
        assert dropped == 0 and pairs[0].point_indices.tolist() == [0, 1]

    def test_half_open_box(self):
        view = make_view(depth=2.0)
        scene = make_scene([[0.0, 0.0, 2.0]], view)  # lands at (32, 24)
        left = Region2D((20, 10, 32, 40), "x", "sw")
        right = Region2D((32, 10, 40, 40), "y", "sw")
        pairs, dropped = associate_regions(scene, 0, [left, right], 1, 0.01)
        assert dropped == 1 and pairs[0].caption == "y"

    def test_min_points_validation(self, toy_scene):
        with pytest.raises(InvalidInput):
            associate_regions(toy_scene, 0, [], 0, 0.05)

    def test_matches_brute_force_100_points(self):
        rng = np.random.default_rng(5)
        view = make_view(width=40, height=30, f=30.0)
        pts = np.column_stack([rng.uniform(-1.5, 1.5, 100), rng.uniform(-1, 1, 100), rng.uniform(0.5, 4, 100)])
        # depth map from a brute-force z-buffer over the same points
        depth = np.zeros((30, 40), dtype=np.float32)
        for p in pts:
            u = int(np.floor(30 * p[0] / p[2] + 20))
            v = int(np.floor(30 * p[1] / p[2] + 15))
            if 0 <= u < 40 and 0 <= v < 30 and (depth[v, u] == 0 or p[2] < depth[v, u]):
                depth[v, u] = p[2]
        view.depth[:] = depth
        scene = make_scene(pts, view)
        box = (5.0, 4.0, 31.5, 22.0)
        pairs, _ = associate_regions(scene, 0, [Region2D(box, "thing", "synthetic")], 1, 1e-4)
        assert pairs[0].point_indices.tolist() == brute_force_association(scene, 0, box, 1e-4)

    def test_monotone_in_box(self, toy_scene):
        rng = np.random.default_rng(0)
        view = toy_scene.views[1]
        for _ in range(20):
            x0, y0 = rng.uniform(0, view.width / 2), rng.uniform(0, view.height / 2)
            x1, y1 = x0 + rng.uniform(5, view.width / 2), y0 + rng.uniform(5, view.height / 2)
            small = Region2D((x0, y0, x1, y1), "a", "sw")
            big = Region2D((max(0, x0 - 3), max(0, y0 - 3), min(view.width, x1 + 4), min(view.height, y1 + 4)), "a", "sw")
            (ps,), _ = associate_regions(toy_scene, 1, [small], 1, 0.05)
            (pb,), _ = associate_regions(toy_scene, 1, [big], 1, 0.05)
            assert set(ps.point_indices) <= set(pb.point_indices)

    def test_deterministic_and_visible(self, toy_scene):
        view = toy_scene.views[2]
        regions = [Region2D((i * 10, 5, i * 10 + 30, 60), f"r{i}", "sw") for i in range(5)]
        a, da = associate_regions(toy_scene, 2, regions, 5, 0.05)
        b, db = associate_regions(toy_scene, 2, regions, 5, 0.05)
        assert da == db
        assert [p.point_indices.tobytes() for p in a] == [p.point_indices.tobytes() for p in b]
        vis = project_points(toy_scene, 2, 0.05).visible
        for p in a:
            assert vis[p.point_indices].all()


class TestTypes:
    def test_region_validation(self):
        with pytest.raises(InvalidInput):
            Region2D((5, 5, 5, 10), "x", "sw")
        with pytest.raises(InvalidInput):
            Region2D((0, 0, 5, 10), "  ", "sw")
        with pytest.raises(ValueError):
            Region2D((0, 0, 5, 10), "x", "nope")

    def test_pair_sorted_unique(self):
        p = RegionLanguagePair("s", [5, 1, 5, 3], "x", "sw")
        assert p.point_indices.tolist() == [1, 3, 5]
        with pytest.raises(InvalidInput):
            RegionLanguagePair("s", [], "x", "sw")

    def test_scene_label_range(self):
        view = make_view(depth=1.0)
        with pytest.raises(InvalidInput):
            PointScene([[0, 0, 1.0]], [[0, 0, 0]], [3], [view], "s", num_categories=3)
        PointScene([[0, 0, 1.0]], [[0, 0, 0]], [IGNORE], [view], "s", num_categories=3)

    def test_camera_rotation_must_be_orthonormal(self):
        view = make_view()
        ext = view.world_to_cam.copy()
        ext[0, 0] = 2.0
        with pytest.raises(InvalidInput):
            type(view)(view.intrinsics, ext, view.width, view.height, view.depth)


class TestFiles:
    def test_scene_round_trip(self, toy_scene, tmp_path):
        path = tmp_path / "s.plcs"
        save_scene(toy_scene, path)
        assert path.read_bytes()[:4] == b"PLCS"
        back = load_scene(path)
        assert back.scene_id == toy_scene.scene_id
        np.testing.assert_array_equal(back.points, toy_scene.points)
        np.testing.assert_array_equal(back.colors, toy_scene.colors)
        np.testing.assert_array_equal(back.labels, toy_scene.labels)
        np.testing.assert_array_equal(back.instances, toy_scene.instances)
        for a, b in zip(back.views, toy_scene.views):
            np.testing.assert_array_equal(a.depth, b.depth)
            np.testing.assert_array_equal(a.world_to_cam, b.world_to_cam)

    def test_ignore_label_round_trip(self, tmp_path):
        view = make_view(depth=1.0)
        scene = PointScene([[0, 0, 1.0], [0, 0, 2.0]], [[0, 0, 0]] * 2, [IGNORE, 1], [view], "ig")
        save_scene(scene, tmp_path / "ig.plcs")
        assert load_scene(tmp_path / "ig.plcs").labels.tolist() == [IGNORE, 1]

    def test_regions_and_pairs_round_trip(self, tmp_path):
        regions = {0: [Region2D((0, 0, 4, 4), "a chair", "det_t")], 2: [Region2D((1, 1, 3, 9), "a sofa", "kos_like")]}
        save_regions(regions, tmp_path / "r.jsonl")
        back = load_regions(tmp_path / "r.jsonl")
        assert back == regions
        pairs = [RegionLanguagePair("s", [1, 2], "a chair", "det_t", 0)]
        save_pairs(pairs, tmp_path / "p.jsonl")
        (p,) = load_pairs(tmp_path / "p.jsonl")
        assert p.point_indices.tolist() == [1, 2] and p.source.value == "det_t"
