import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from craniofit.errors import ModelError
from craniofit.facemodel import (
    CODE_DIM,
    GEOM_DIM,
    SemanticCodeVector,
    default_energy_profile,
    evaluate,
    evaluate_jacobian,
    evaluate_positions,
    load_anthropometric_map,
    load_model,
    load_region_labels,
    rodrigues,
    rodrigues_jacobian,
    save_anthropometric_map,
    save_model,
    save_region_labels,
    synthesize_model,
    synthesize_region_labels,
)


@pytest.fixture(scope="module")
def model():
    return synthesize_model(seed=7, n_vertices=162)


def naive_evaluate(model, alpha, delta, theta):
    """Independent per-vertex oracle using scipy rotations."""
    out = np.zeros((model.n_vertices, 3))
    rots = [
        Rotation.from_rotvec(theta[3 * j : 3 * j + 3]).as_matrix()
        for j in range(len(model.joint_pivots))
    ]
    for i in range(model.n_vertices):
        v = model.mean_shape.vertices[i].copy()
        for k in range(model.n_shape):
            v = v + alpha[k] * model.shape_basis[k, i]
        for k in range(model.n_expr):
            v = v + delta[k] * model.expression_basis[k, i]
        acc = model.skin_weights[i, 0] * v
        for j in range(1, len(rots)):
            p = model.joint_pivots[j]
            acc = acc + model.skin_weights[i, j] * (rots[j] @ (v - p) + p)
        out[i] = rots[0] @ acc
    return out


class TestSemanticCodeVector:
    def test_dimensions(self):
        code = SemanticCodeVector.zeros()
        assert code.vec.shape == (228,)
        assert code.geometry_part.shape == (195,)
        assert code.rendering_part.shape == (33,)
        assert len(code.alpha) == 90
        assert len(code.delta) == 90
        assert len(code.theta) == 15
        assert len(code.cam_rot) == 3
        assert len(code.cam_trans) == 3
        assert len(code.gamma) == 27

    def test_wrong_length_rejected(self):
        with pytest.raises(ModelError):
            SemanticCodeVector(np.zeros(200))

    def test_from_parts_layout(self):
        code = SemanticCodeVector.from_parts(alpha=np.ones(90), gamma=2 * np.ones(27))
        assert code.vec[:90].sum() == 90
        assert code.vec[201:].sum() == 54
        assert code.vec[90:201].sum() == 0


class TestRodrigues:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.normal(size=3)
            np.testing.assert_allclose(
                rodrigues(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-12
            )

    def test_identity_at_zero(self):
        np.testing.assert_allclose(rodrigues(np.zeros(3)), np.eye(3), atol=1e-15)

    def test_jacobian_finite_difference(self):
        rng = np.random.default_rng(1)
        h = 1e-6
        for v in [np.zeros(3), rng.normal(size=3), 1e-3 * rng.normal(size=3)]:
            J = rodrigues_jacobian(v)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd = (rodrigues(v + e) - rodrigues(v - e)) / (2 * h)
                np.testing.assert_allclose(J[i], fd, atol=1e-6)


class TestEvaluate:
    def test_zero_code_is_mean(self, model):
        mesh = evaluate(model, np.zeros(90), np.zeros(90), np.zeros(15))
        np.testing.assert_array_equal(mesh.vertices, model.mean_shape.vertices)
        np.testing.assert_array_equal(mesh.triangles, model.mean_shape.triangles)

    def test_unit_alpha_adds_basis_column(self, model):
        alpha = np.zeros(90)
        alpha[1] = 1.0
        mesh = evaluate(model, alpha, np.zeros(90), np.zeros(15))
        want = model.mean_shape.vertices + model.shape_basis[1]
        np.testing.assert_allclose(mesh.vertices, want, atol=1e-12)

    def test_matches_naive_oracle(self, model):
        rng = np.random.default_rng(5)
        alpha = rng.normal(scale=0.5, size=90)
        delta = rng.normal(scale=0.5, size=90)
        theta = rng.normal(scale=0.2, size=15)
        got = evaluate_positions(model, alpha, delta, theta)
        want = naive_evaluate(model, alpha, delta, theta)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_affine_in_shape_coeffs(self, model):
        rng = np.random.default_rng(6)
        a1, a2 = rng.normal(size=(2, 90))
        theta = rng.normal(scale=0.1, size=15)
        a, b = 0.7, -1.3
        lhs = evaluate_positions(model, a * a1 + b * a2, np.zeros(90), theta)
        base = evaluate_positions(model, np.zeros(90), np.zeros(90), theta)
        rhs = (
            a * evaluate_positions(model, a1, np.zeros(90), theta)
            + b * evaluate_positions(model, a2, np.zeros(90), theta)
            - (a + b - 1) * base
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_topology_preserved(self, model):
        rng = np.random.default_rng(7)
        mesh = evaluate(model, rng.normal(size=90), rng.normal(size=90), rng.normal(scale=0.3, size=15))
        assert mesh.topology_id == model.topology_id
        np.testing.assert_array_equal(mesh.triangles, model.mean_shape.triangles)

    def test_length_mismatch_names_block(self, model):
        with pytest.raises(ModelError, match="alpha"):
            evaluate(model, np.zeros(10), np.zeros(90), np.zeros(15))
        with pytest.raises(ModelError, match="delta"):
            evaluate(model, np.zeros(90), np.zeros(89), np.zeros(15))
        with pytest.raises(ModelError, match="theta"):
            evaluate(model, np.zeros(90), np.zeros(90), np.zeros(12))

    def test_subset_matches_full(self, model):
        rng = np.random.default_rng(8)
        alpha = rng.normal(size=90)
        delta = rng.normal(size=90)
        theta = rng.normal(scale=0.2, size=15)
        idx = rng.choice(model.n_vertices, size=20, replace=False)
        full = evaluate_positions(model, alpha, delta, theta)
        sub = evaluate_positions(model, alpha, delta, theta, idx=idx)
        np.testing.assert_allclose(sub, full[idx], atol=1e-12)


class TestJacobian:
    def test_alpha_column_is_skinned_basis_at_zero_pose(self, model):
        jac = evaluate_jacobian(model, np.zeros(90), np.zeros(90), np.zeros(15))
        dense = jac.dense()
        for k in [0, 3, 17]:
            np.testing.assert_allclose(
                dense[:, :, k], model.shape_basis[k], atol=1e-12
            )

    def _fd_check(self, model, alpha, delta, theta, tol):
        idx = np.arange(0, model.n_vertices, 7)
        jac = evaluate_jacobian(model, alpha, delta, theta, idx=idx).dense()
        g = np.concatenate([alpha, delta, theta])
        h = 1e-5
        worst = 0.0
        for k in range(0, GEOM_DIM, 9):
            gp, gm = g.copy(), g.copy()
            gp[k] += h
            gm[k] -= h
            fp = evaluate_positions(model, gp[:90], gp[90:180], gp[180:], idx=idx)
            fm = evaluate_positions(model, gm[:90], gm[90:180], gm[180:], idx=idx)
            fd = (fp - fm) / (2 * h)
            err = np.abs(jac[:, :, k] - fd) / np.maximum(1.0, np.abs(jac[:, :, k]))
            worst = max(worst, err.max())
        assert worst < tol

    def test_finite_difference_at_zero(self, model):
        self._fd_check(model, np.zeros(90), np.zeros(90), np.zeros(15), 1e-5)

    def test_finite_difference_random(self, model):
        rng = np.random.default_rng(9)
        self._fd_check(
            model,
            rng.normal(scale=0.5, size=90),
            rng.normal(scale=0.5, size=90),
            rng.normal(scale=0.3, size=15),
            1e-4,
        )

    def test_vjp_matches_dense(self, model):
        rng = np.random.default_rng(10)
        idx = np.array([3, 50, 100])
        jac = evaluate_jacobian(model, rng.normal(size=90), rng.normal(size=90), rng.normal(scale=0.2, size=15), idx=idx)
        grad = rng.normal(size=(3, 3))
        got = jac.vjp_geometry(grad)
        want = np.einsum("kcq,kc->q", jac.dense(), grad)
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestSynthesize:
    def test_same_seed_bit_identical(self):
        m1 = synthesize_model(seed=3, n_vertices=162)
        m2 = synthesize_model(seed=3, n_vertices=162)
        assert np.array_equal(m1.mean_shape.vertices, m2.mean_shape.vertices)
        assert np.array_equal(m1.shape_basis, m2.shape_basis)
        assert np.array_equal(m1.expression_basis, m2.expression_basis)
        assert np.array_equal(m1.skin_weights, m2.skin_weights)
        assert m1.anthropometric_map == m2.anthropometric_map

    def test_different_seed_differs(self):
        m1 = synthesize_model(seed=3, n_vertices=162)
        m2 = synthesize_model(seed=4, n_vertices=162)
        assert not np.array_equal(m1.shape_basis, m2.shape_basis)

    def test_zero_energy_gives_mean_everywhere(self):
        m = synthesize_model(seed=3, n_vertices=162, basis_energy_profile=np.zeros(90))
        rng = np.random.default_rng(0)
        mesh = evaluate(m, rng.normal(size=90), rng.normal(size=90), np.zeros(15))
        np.testing.assert_array_equal(mesh.vertices, m.mean_shape.vertices)

    def test_skinning_rows_sum_to_one(self):
        m = synthesize_model(seed=7, n_vertices=2562)
        sums = m.skin_weights.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-12
        assert m.skin_weights.min() >= 0

    def test_invalid_vertex_count(self):
        with pytest.raises(ModelError, match="2562"):
            synthesize_model(seed=1, n_vertices=100)

    def test_increasing_energy_rejected(self):
        bad = np.linspace(1, 2, 90)
        with pytest.raises(ModelError, match="non-increasing"):
            synthesize_model(seed=1, n_vertices=162, basis_energy_profile=bad)

    def test_bases_orthogonal(self, model):
        flat = np.concatenate(
            [model.shape_basis, model.expression_basis]
        ).reshape(180, -1)
        gram = flat @ flat.T
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() < 1e-9

    def test_energy_profile_default_decreasing(self):
        e = default_energy_profile()
        assert (np.diff(e) < 0).all()

    def test_anthropometric_map_covers_46(self, model):
        assert len(model.anthropometric_map) == 46
        assert set(model.anthropometric_map) == {str(i) for i in range(1, 47)}
        verts = set(model.anthropometric_map.values())
        assert len(verts) == 46  # distinct vertices

    def test_forehead_landmark_in_forehead_region(self, model):
        labels = synthesize_region_labels(model)
        assert labels[model.anthropometric_map["1"]] == "forehead"

    def test_region_labels_cover_all_vertices(self, model):
        labels = synthesize_region_labels(model)
        assert len(labels) == model.n_vertices
        assert all(isinstance(x, str) for x in labels)


class TestModelIO:
    def test_roundtrip(self, model, tmp_path):
        save_model(tmp_path / "m.cfm", model)
        save_anthropometric_map(tmp_path / "a.txt", model.anthropometric_map)
        loaded = load_model(tmp_path / "m.cfm", load_anthropometric_map(tmp_path / "a.txt"))
        assert np.array_equal(loaded.mean_shape.vertices, model.mean_shape.vertices)
        assert np.array_equal(loaded.shape_basis, model.shape_basis)
        assert np.array_equal(loaded.skin_weights, model.skin_weights)
        assert loaded.anthropometric_map == model.anthropometric_map
        assert loaded.topology_id == model.topology_id

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.cfm"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ModelError, match="magic"):
            load_model(p)

    def test_region_labels_roundtrip(self, model, tmp_path):
        labels = synthesize_region_labels(model)
        save_region_labels(tmp_path / "seg.txt", labels)
        got = load_region_labels(tmp_path / "seg.txt", model.n_vertices)
        assert list(got) == list(labels)
