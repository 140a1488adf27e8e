import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ebsdflow.orientation import (
    AxisAngle,
    UnitQuaternion,
    conj,
    dist_s3_mod,
    from_axis_angle,
    get_group,
    hamilton,
    minimal_angle_representative,
    misorientation_deg,
    project_s3,
    quat_to_matrix,
    rotate_points,
    to_axis_angle,
    to_matrix,
)

E3 = (0.0, 0.0, 1.0)
GROUPS = ["trivial", "622", "422", "432"]


def qz(theta):
    return from_axis_angle(AxisAngle(E3, theta)).array


def random_unit(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1).map(
    lambda q: q / np.linalg.norm(q))


def rodrigues(r, theta):
    """Independent matrix oracle: exp of the skew matrix via scipy."""
    from scipy.linalg import expm

    r = np.asarray(r, dtype=float)
    K = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])
    return expm(theta * K)


class TestUnitQuaternion:
    def test_normalized(self):
        q = UnitQuaternion(2.0, (0.0, 2.0, 0.0))
        assert abs(q.s ** 2 + sum(c * c for c in q.v) - 1) < 1e-12

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            UnitQuaternion(0.0, (0.0, 0.0, 0.0))

    def test_wrapper_product(self):
        q = UnitQuaternion(0.5, (0.5, 0.5, 0.5))
        r = hamilton(q, q.conj())
        assert isinstance(r, UnitQuaternion)
        np.testing.assert_allclose(r.array, [1, 0, 0, 0], atol=1e-15)


class TestHamilton:
    def test_identity(self):
        rng = np.random.default_rng(0)
        q = random_unit(rng, 5)
        np.testing.assert_array_equal(hamilton([1.0, 0, 0, 0], q), q)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        q = random_unit(rng, 20)
        np.testing.assert_allclose(hamilton(q, conj(q)), np.tile([1.0, 0, 0, 0], (20, 1)), atol=1e-15)

    def test_quarter_turns_compose(self):
        # matrix oracle: two quarter turns about e3 give a half turn
        R = to_matrix(AxisAngle(E3, np.pi / 2)) @ to_matrix(AxisAngle(E3, np.pi / 2))
        np.testing.assert_allclose(R, to_matrix(AxisAngle(E3, np.pi)), atol=1e-15)
        np.testing.assert_allclose(hamilton(qz(np.pi / 2), qz(np.pi / 2)), qz(np.pi), atol=1e-15)

    @given(quats, quats)
    def test_unit_length(self, a, b):
        assert abs(np.linalg.norm(hamilton(a, b)) - 1) < 1e-12

    @given(quats, quats)
    def test_composition_order(self, a, b):
        # the printed sign realizes R(q1 ⊙ q2) = R(q2) R(q1)
        np.testing.assert_allclose(quat_to_matrix(hamilton(a, b)), quat_to_matrix(b) @ quat_to_matrix(a),
                                   atol=1e-10)


class TestAxisAngle:
    def test_examples(self):
        np.testing.assert_allclose(qz(0.0), [1, 0, 0, 0], atol=0)
        np.testing.assert_allclose(qz(np.pi), [0, 0, 0, 1], atol=1e-16)
        np.testing.assert_allclose(qz(np.pi / 3), [np.sqrt(3) / 2, 0, 0, 0.5], atol=1e-15)

    def test_non_unit_axis(self):
        with pytest.raises(ValueError):
            AxisAngle((1.0, 1.0, 0.0), 0.3)

    def test_angle_range(self):
        assert AxisAngle(E3, -0.5).theta == pytest.approx(2 * np.pi - 0.5)

    def test_matrix_examples(self):
        np.testing.assert_array_equal(to_matrix(AxisAngle(E3, 0.0)), np.eye(3))
        np.testing.assert_allclose(to_matrix(AxisAngle(E3, np.pi / 2)), [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
                                   atol=1e-15)

    @given(quats, st.floats(0, 2 * np.pi, exclude_max=True))
    def test_matrix_properties(self, q, theta):
        r = q[1:] / np.linalg.norm(q[1:]) if np.linalg.norm(q[1:]) > 1e-3 else np.array(E3)
        R = to_matrix(AxisAngle(tuple(r), theta))
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(R) - 1) < 1e-10
        np.testing.assert_allclose(to_matrix(AxisAngle(tuple(r), 2 * np.pi - theta)),
                                   to_matrix(AxisAngle(tuple(-r), theta)), atol=1e-12)
        np.testing.assert_allclose(R, rodrigues(r, theta), atol=1e-10)

    def test_round_trip_points(self):
        rng = np.random.default_rng(2)
        for q in random_unit(rng, 25):
            aa = to_axis_angle(q)
            p = rng.normal(size=(100, 3))
            np.testing.assert_allclose(rotate_points(q, p), p @ to_matrix(aa).T, atol=1e-10)
            np.testing.assert_allclose(from_axis_angle(aa).array * np.sign(q[0] or 1.0),
                                       q * np.sign(q[0] or 1.0), atol=1e-12)


class TestGroups:
    @pytest.mark.parametrize("name,size", [("trivial", 2), ("622", 24), ("422", 16), ("432", 48)])
    def test_sizes(self, name, size):
        assert len(get_group(name)) == size

    @pytest.mark.parametrize("name", GROUPS)
    def test_closure(self, name):
        E = get_group(name).elements
        assert np.any(np.all(np.isclose(E, [1, 0, 0, 0]), axis=1))
        for a in E:
            assert np.any(np.all(np.isclose(E, -a), axis=1))
            prods = hamilton(a[None], E)
            for p in prods:
                assert np.any(np.max(np.abs(E - p), axis=1) < 1e-9)

    def test_aliases(self):
        assert get_group("6/mmm").name == "622"
        assert get_group("m-3m").name == "432"
        with pytest.raises(KeyError):
            get_group("nope")


class TestDistance:
    def test_examples(self):
        assert dist_s3_mod(qz(0.7), qz(0.7), get_group("622")) == 0.0
        assert dist_s3_mod([1.0, 0, 0, 0], [0.0, 0, 0, 1], get_group("trivial")) == pytest.approx(np.pi / 2)

    def test_so3_cross_check(self):
        # 2 sqrt2 * d equals sqrt2 * arccos((tr R - 1)/2) for a half turn
        R = to_matrix(AxisAngle(E3, np.pi))
        d = dist_s3_mod([1.0, 0, 0, 0], [0.0, 0, 0, 1], get_group("trivial"))
        assert 2 * np.sqrt(2) * d == pytest.approx(np.sqrt(2) * np.arccos(0.5 * (np.trace(R) - 1)))

    def test_hexagonal_brute_force(self):
        g = get_group("622")
        for theta in (np.pi / 6, np.pi / 3, 0.4):
            q = qz(theta)
            brute = min(np.arccos(min(1.0, abs(np.dot(hamilton([1.0, 0, 0, 0], S), q)))) for S in g.elements)
            assert dist_s3_mod([1.0, 0, 0, 0], q, g) == pytest.approx(brute, abs=1e-12)
        assert dist_s3_mod([1.0, 0, 0, 0], qz(np.pi / 6), g) == pytest.approx(np.pi / 12, abs=1e-12)
        # a sixty-degree turn about the c axis lies in the symmetry orbit of the identity
        assert dist_s3_mod([1.0, 0, 0, 0], qz(np.pi / 3), g) == pytest.approx(0.0, abs=1e-7)

    @pytest.mark.parametrize("name", GROUPS)
    def test_group_invariance(self, name):
        g = get_group(name)
        rng = np.random.default_rng(3)
        q1, q2 = random_unit(rng, 2)
        d0 = dist_s3_mod(q1, q2, g)
        for S in g.elements:
            assert dist_s3_mod(hamilton(q1, S), q2, g) == pytest.approx(d0, abs=1e-12)

    def test_double_cover(self):
        rng = np.random.default_rng(4)
        q = random_unit(rng, 50)
        np.testing.assert_allclose(dist_s3_mod(q, -q, get_group("trivial")), 0.0, atol=1e-7)

    @pytest.mark.parametrize("name", GROUPS)
    def test_metric_axioms(self, name):
        g = get_group(name)
        rng = np.random.default_rng(5)
        a, b, c = (random_unit(rng, 1000) for _ in range(3))
        dab, dba = dist_s3_mod(a, b, g), dist_s3_mod(b, a, g)
        np.testing.assert_array_equal(dab, dba)
        assert np.all(dab >= 0)
        assert np.all(dab <= dist_s3_mod(a, c, g) + dist_s3_mod(c, b, g) + 1e-10)

    def test_degrees(self):
        assert misorientation_deg(qz(0.0), qz(np.radians(30)), get_group("trivial")) == pytest.approx(30.0)


class TestProjection:
    def test_examples(self):
        np.testing.assert_array_equal(project_s3([2.0, 0, 0, 0]), [1, 0, 0, 0])
        np.testing.assert_allclose(project_s3([1.0, 1, 0, 0]), [2 ** -0.5, 2 ** -0.5, 0, 0])
        with pytest.raises(ValueError):
            project_s3([0.0, 0, 0, 0])

    @given(quats)
    def test_idempotent(self, q):
        np.testing.assert_allclose(project_s3(q), q, atol=1e-15)

    def test_minimal_angle_examples(self):
        np.testing.assert_allclose(minimal_angle_representative([1.0, 0, 0, 0], get_group("432")), [1, 0, 0, 0],
                                   atol=1e-15)
        want = from_axis_angle(AxisAngle((0.0, 0.0, -1.0), np.pi / 2)).array
        np.testing.assert_allclose(minimal_angle_representative(qz(1.5 * np.pi), get_group("trivial")), want,
                                   atol=1e-15)
        want = from_axis_angle(AxisAngle((0.0, 0.0, -1.0), np.radians(10))).array
        np.testing.assert_allclose(minimal_angle_representative(qz(np.radians(50)), get_group("622")), want,
                                   atol=1e-12)

    @settings(max_examples=50)
    @given(quats, st.sampled_from(GROUPS))
    def test_minimal_angle_is_minimal(self, q, name):
        g = get_group(name)
        r = minimal_angle_representative(q, g)
        assert r[0] >= np.max(np.abs(hamilton(q[None], g.elements)[:, 0])) - 1e-12
        assert dist_s3_mod(r, q, g) < 1e-7
        np.testing.assert_array_equal(minimal_angle_representative(r, g), r)
