import dataclasses

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from craniofit.errors import SuperimposeError
from craniofit.facemodel import synthesize_model
from craniofit.geometry import Mesh, vertex_normals
from craniofit.superimpose import (
    RigidTransform,
    SkullAnnotation,
    TissueDepth,
    TissueDepthTable,
    definite_region_landmarks,
    extend_landmarks,
    format_percentage,
    load_skull_landmarks,
    load_tissue_table,
    procrustes_rigid,
    rank_candidates,
    save_skull_landmarks,
    save_tissue_table,
    superimpose,
)


def octa_sphere(radius=1.0, level=3):
    from craniofit.facemodel import icosphere

    unit, tris = icosphere(level)
    return Mesh(unit * radius, tris), unit


def tiny_model(n_landmarks=4, seed=1):
    """Small model whose anthropometric map covers the first landmarks."""
    model = synthesize_model(seed=seed, n_vertices=162)
    keep = {str(i + 1): model.anthropometric_map[str(i + 1)] for i in range(n_landmarks)}
    return dataclasses.replace(model, anthropometric_map=keep)


def skull_from_face(face: Mesh, vids, depths):
    """Skull built by pushing the face inward at every vertex by an
    interpolated depth field that is exact at the landmark vertices."""
    normals = vertex_normals(face)
    d = np.full(len(face.vertices), np.mean(list(depths.values())))
    for lid, vi in vids.items():
        d[vi] = depths[lid]
    verts = face.vertices - d[:, None] * normals
    skull = Mesh(verts, face.triangles)
    landmarks = {lid: (verts[vi], normals[vi]) for lid, vi in vids.items()}
    return SkullAnnotation(skull, landmarks)


class TestTissueTable:
    def test_zero_depth_rejected(self):
        with pytest.raises(SuperimposeError, match="positive"):
            TissueDepthTable({"1": TissueDepth(0.0)})

    def test_zero_threshold_rejected(self):
        with pytest.raises(SuperimposeError, match="threshold"):
            TissueDepthTable({"1": TissueDepth(3.0, 0.0)})

    def test_csv_roundtrip(self, tmp_path):
        t = TissueDepthTable({"1": TissueDepth(4.5, 2.0), "2": TissueDepth(7.25)})
        save_tissue_table(tmp_path / "t.csv", t)
        back = load_tissue_table(tmp_path / "t.csv")
        assert back.entries["1"] == TissueDepth(4.5, 2.0)
        assert back.entries["2"].threshold == 2.5

    def test_csv_default_threshold(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("7,6.0\n")
        back = load_tissue_table(p)
        assert back.entries["7"] == TissueDepth(6.0, 2.5)

    def test_csv_bad_line(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,2.0\nnope\n")
        with pytest.raises(SuperimposeError, match=":2"):
            load_tissue_table(p)


class TestSkullAnnotation:
    def test_non_unit_normal_rejected(self):
        mesh, _ = octa_sphere(10.0, 1)
        with pytest.raises(SuperimposeError, match="unit"):
            SkullAnnotation(mesh, {"1": (mesh.vertices[0], np.array([0, 0, 2.0]))})

    def test_off_surface_position_rejected(self):
        mesh, _ = octa_sphere(10.0, 1)
        with pytest.raises(SuperimposeError, match="off the skull"):
            SkullAnnotation(mesh, {"1": (np.array([20.0, 0, 0]), np.array([1.0, 0, 0]))})

    def test_io_roundtrip(self, tmp_path):
        mesh, unit = octa_sphere(10.0, 1)
        lm = {"a": (mesh.vertices[3], unit[3]), "b": (mesh.vertices[7], unit[7])}
        ann = SkullAnnotation(mesh, lm)
        save_skull_landmarks(tmp_path / "lm.txt", ann)
        back = load_skull_landmarks(tmp_path / "lm.txt")
        np.testing.assert_allclose(back["a"][0], lm["a"][0], atol=1e-10)
        np.testing.assert_allclose(back["b"][1], lm["b"][1], atol=1e-10)


class TestExtendLandmarks:
    def test_axis_case(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
        mesh = Mesh(verts, np.array([[0, 1, 2]]))
        ann = SkullAnnotation(mesh, {"1": (np.zeros(3), np.array([0, 0, 1.0]))})
        out = extend_landmarks(ann, TissueDepthTable({"1": TissueDepth(5.0)}))
        np.testing.assert_allclose(out["1"], [0, 0, 5.0])

    def test_missing_id_listed(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
        mesh = Mesh(verts, np.array([[0, 1, 2]]))
        ann = SkullAnnotation(mesh, {"1": (np.zeros(3), np.array([0, 0, 1.0]))})
        with pytest.raises(SuperimposeError, match="ghost"):
            extend_landmarks(ann, TissueDepthTable({"ghost": TissueDepth(3.0)}))

    def test_norm_equals_depth_exhaustive(self):
        rng = np.random.default_rng(5)
        mesh, unit = octa_sphere(50.0, 2)
        picks = rng.choice(len(unit), size=20, replace=False)
        depths = {}
        lms = {}
        for k, vi in enumerate(picks):
            lid = f"L{k}"
            depths[lid] = TissueDepth(float(rng.uniform(2, 9)))
            lms[lid] = (mesh.vertices[vi], unit[vi])
        ann = SkullAnnotation(mesh, lms)
        table = TissueDepthTable(depths)
        ext = extend_landmarks(ann, table)
        for lid in depths:
            d = np.linalg.norm(ext[lid] - lms[lid][0])
            assert d == pytest.approx(table.entries[lid].depth, abs=1e-12)


class TestProcrustes:
    def test_recovers_known_transform(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(12, 3)) * 40
        rot = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
        t = rng.normal(size=3) * 25
        dst = src @ rot.T + t
        xf = procrustes_rigid(src, dst)
        assert np.abs(xf.rotation - rot).max() < 1e-9
        assert np.abs(xf.translation - t).max() < 1e-9

    def test_inverse(self):
        rng = np.random.default_rng(4)
        xf = procrustes_rigid(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
        pts = rng.normal(size=(7, 3))
        np.testing.assert_allclose(xf.inverse().apply(xf.apply(pts)), pts, atol=1e-12)


class TestSuperimpose:
    def setup_case(self, n=4, seed=2):
        model = tiny_model(n, seed)
        rng = np.random.default_rng(seed)
        alpha = np.zeros(90)
        alpha[:8] = rng.normal(scale=0.5, size=8)
        from craniofit.facemodel import evaluate

        face = evaluate(model, alpha, np.zeros(90), np.zeros(15))
        depths = {str(i + 1): float(rng.uniform(3, 8)) for i in range(n)}
        vids = {str(i + 1): model.anthropometric_map[str(i + 1)] for i in range(n)}
        ann = skull_from_face(face, vids, depths)
        table = TissueDepthTable({k: TissueDepth(v) for k, v in depths.items()})
        return model, face, ann, table

    def test_perfect_construction_scores_one(self):
        model, face, ann, table = self.setup_case()
        res = superimpose(face, model, ann, table)
        assert res.score == 1.0
        assert res.unmatched_count == 0
        assert res.percent == "100.00%"

    def test_one_of_four_unmatched(self):
        model, face, ann, table = self.setup_case(n=4)
        # push one extended landmark far off by doubling that tissue depth
        bad = "3"
        table2 = TissueDepthTable(
            {
                k: TissueDepth(
                    e.depth + (2 * e.threshold + 1.0 if k == bad else 0.0), e.threshold
                )
                for k, e in table.entries.items()
            }
        )
        res = superimpose(face, model, ann, table2, alignment=None)
        assert res.matched_count == 3
        assert res.unmatched_count == 1
        assert res.score == pytest.approx(0.75)

    def test_rigid_invariance_of_score(self):
        model, face, ann, table = self.setup_case(n=4, seed=6)
        res0 = superimpose(face, model, ann, table, alignment=None)
        rot = Rotation.from_rotvec([0.4, -0.2, 0.9]).as_matrix()
        t = np.array([12.0, -7.0, 30.0])
        face2 = face.with_vertices(face.vertices @ rot.T + t)
        skull2 = Mesh(ann.skull.vertices @ rot.T + t, ann.skull.triangles)
        lms2 = {
            lid: (rot @ p + t, rot @ n) for lid, (p, n) in ann.landmarks.items()
        }
        ann2 = SkullAnnotation(skull2, lms2)
        res1 = superimpose(face2, model, ann2, table, alignment=None)
        assert abs(res0.score - res1.score) < 1e-12
        for a, b in zip(res0.matches, res1.matches):
            assert abs(a.distance - b.distance) < 1e-9

    def test_eta_monotonicity(self):
        model, face, ann, table = self.setup_case(n=4, seed=9)
        rng = np.random.default_rng(1)
        noisy = face.with_vertices(face.vertices + rng.normal(scale=2.0, size=face.vertices.shape))
        small = TissueDepthTable(
            {k: TissueDepth(e.depth, 0.5) for k, e in table.entries.items()}
        )
        for scale in (1.0, 2.0, 4.0, 8.0):
            bigger = TissueDepthTable(
                {k: TissueDepth(e.depth, 0.5 * scale) for k, e in table.entries.items()}
            )
            s_small = superimpose(noisy, model, ann, small, alignment=None).score
            s_big = superimpose(noisy, model, ann, bigger, alignment=None).score
            assert s_big >= s_small

    def test_auto_alignment_recovers_transform(self):
        model, face, ann, table = self.setup_case(n=4, seed=11)
        rot = Rotation.from_rotvec([-0.3, 0.5, 0.2]).as_matrix()
        t = np.array([5.0, 14.0, -22.0])
        moved = face.with_vertices(face.vertices @ rot.T + t)
        res = superimpose(moved, model, ann, table, alignment="auto")
        # the solved transform must undo the applied motion
        recovered = res.alignment.rotation @ rot
        assert np.abs(recovered - np.eye(3)).max() < 1e-6
        assert res.score == 1.0

    def test_topology_mismatch_rejected(self):
        model, face, ann, table = self.setup_case()
        alien = Mesh(face.vertices[:12], face.triangles[:4] % 12)
        with pytest.raises(SuperimposeError, match="topology"):
            superimpose(alien, model, ann, table)


class TestRanking:
    def build_database(self, n_candidates=50, seed=3):
        model = tiny_model(8, seed=1)
        rng = np.random.default_rng(seed)
        from craniofit.facemodel import evaluate

        def face_of(scale):
            alpha = np.zeros(90)
            alpha[:10] = rng.normal(scale=scale, size=10)
            return evaluate(model, alpha, np.zeros(90), np.zeros(15))

        truth = face_of(0.5)
        depths = {str(i + 1): float(rng.uniform(3, 8)) for i in range(8)}
        vids = {str(i + 1): model.anthropometric_map[str(i + 1)] for i in range(8)}
        ann = skull_from_face(truth, vids, depths)
        table = TissueDepthTable({k: TissueDepth(v) for k, v in depths.items()})
        cands = [(f"cand_{i:03d}", face_of(0.5)) for i in range(n_candidates)]
        cands.append(("truth", truth))
        return model, ann, table, cands

    def test_singleton(self):
        model, ann, table, cands = self.build_database(n_candidates=0)
        ranked = rank_candidates(ann, table, model, cands[-1:])
        assert len(ranked) == 1

    def test_ground_truth_ranks_first(self):
        model, ann, table, cands = self.build_database(50)
        ranked = rank_candidates(ann, table, model, cands)
        assert ranked[0][0] == "truth"
        assert ranked[0][1].score == 1.0
        assert sorted(c for c, _ in ranked) == sorted(c for c, _ in cands)

    def test_deterministic_and_thread_equal(self):
        model, ann, table, cands = self.build_database(12)
        r1 = rank_candidates(ann, table, model, cands, workers=1)
        r2 = rank_candidates(ann, table, model, cands, workers=4)
        assert [c for c, _ in r1] == [c for c, _ in r2]
        assert [x[1].score for x in r1] == [x[1].score for x in r2]

    def test_empty_list_rejected(self):
        model, ann, table, _ = self.build_database(1)
        with pytest.raises(SuperimposeError, match="empty"):
            rank_candidates(ann, table, model, [])

    def test_percent_format(self):
        assert format_percentage(0.4379) == "43.79%"
        assert format_percentage(1.0) == "100.00%"


class TestDefiniteRegions:
    def test_planar_projection(self):
        verts = np.array(
            [[-10, -10, 0], [10, -10, 0], [10, 10, 0], [-10, 10, 0]], float
        )
        plane = Mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
        ann = SkullAnnotation(plane, {"1": (verts[0], np.array([0, 0, 1.0]))})
        table = TissueDepthTable({"1": TissueDepth(4.0)})
        face = Mesh(
            np.array([[1.0, 2.0, 9.0], [3.0, 1.0, 6.0], [0.0, 0.0, 5.0]]),
            np.array([[0, 1, 2]]),
        )
        out = definite_region_landmarks(
            ann, table, face, np.array([True, True, True])
        )
        np.testing.assert_allclose(out[0], [1.0, 2.0, 4.0], atol=1e-12)
        np.testing.assert_allclose(out[1], [3.0, 1.0, 4.0], atol=1e-12)

    def test_face_on_offset_surface_zero_residual(self):
        verts = np.array(
            [[-10, -10, 0], [10, -10, 0], [10, 10, 0], [-10, 10, 0]], float
        )
        plane = Mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
        ann = SkullAnnotation(plane, {"1": (verts[0], np.array([0, 0, 1.0]))})
        table = TissueDepthTable({"1": TissueDepth(4.0)})
        face = Mesh(
            np.array([[2.0, 3.0, 4.0], [5.0, -1.0, 4.0], [0.0, 1.0, 4.0]]),
            np.array([[0, 1, 2]]),
        )
        out = definite_region_landmarks(ann, table, face, np.array([True] * 3))
        for i in range(3):
            np.testing.assert_allclose(out[i], face.vertices[i], atol=1e-12)

    def test_sphere_offset_radius(self):
        skull_mesh, unit = octa_sphere(50.0, 3)
        ann = SkullAnnotation(skull_mesh, {"1": (skull_mesh.vertices[0], unit[0])})
        table = TissueDepthTable({"1": TissueDepth(6.0)})
        face = Mesh(unit * 59.0, skull_mesh.triangles)
        labels = np.zeros(len(unit), dtype=bool)
        labels[::7] = True
        out = definite_region_landmarks(ann, table, face, labels)
        radii = np.array([np.linalg.norm(p) for p in out.values()])
        np.testing.assert_allclose(radii, 56.0, atol=1e-6)

    def test_empty_region_rejected(self):
        skull_mesh, unit = octa_sphere(50.0, 1)
        ann = SkullAnnotation(skull_mesh, {"1": (skull_mesh.vertices[0], unit[0])})
        table = TissueDepthTable({"1": TissueDepth(6.0)})
        face = Mesh(unit * 59.0, skull_mesh.triangles)
        with pytest.raises(SuperimposeError, match="empty"):
            definite_region_landmarks(ann, table, face, np.zeros(len(unit), dtype=bool))

    def test_missing_forehead_depth_rejected(self):
        skull_mesh, unit = octa_sphere(50.0, 1)
        ann = SkullAnnotation(skull_mesh, {"9": (skull_mesh.vertices[0], unit[0])})
        table = TissueDepthTable({"9": TissueDepth(6.0)})
        face = Mesh(unit * 59.0, skull_mesh.triangles)
        with pytest.raises(SuperimposeError, match="forehead"):
            definite_region_landmarks(ann, table, face, np.ones(len(unit), dtype=bool))
