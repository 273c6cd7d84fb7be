import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from avopt.body import BodyModel, PoseParams
from avopt.field import CanonicalField, NonFiniteError, load_field, query, query_posed, save_field
from avopt.geometry import Aabb


@pytest.fixture(scope="module")
def body(template):
    return BodyModel(template)


@pytest.fixture
def field(body):
    return CanonicalField(body.canonical_bounds(), dtype=torch.float64, seed=1)


def zero_output(f):
    with torch.no_grad():
        f.decoder[-1].weight.zero_()
        f.decoder[-1].bias.zero_()


def test_outside_bounds_is_empty(field):
    s = query(field, field.bounds.max + 0.5)
    assert s.density == 0 and np.array_equal(s.color, np.zeros(3))


def test_zero_decoder_output_density(field, rng):
    zero_output(field)
    b = field.bounds
    for x in b.min + rng.random((20, 3)) * (b.max - b.min):
        assert np.isclose(query(field, x).density, np.log(2), atol=1e-12)


def test_continuity_within_cell(field, rng):
    with torch.no_grad():
        field.grid.normal_(0, 1)
    x = field.bounds.min + 0.37 * (field.bounds.max - field.bounds.min)
    ref = query(field, x)
    prev = np.inf
    for eps in (1e-3, 1e-5, 1e-7):
        s = query(field, x + eps)
        diff = abs(s.density - ref.density) + np.abs(s.color - ref.color).sum()
        assert diff <= prev
        prev = diff
    assert prev < 1e-5


@pytest.mark.parametrize("interp", ["smoothstep", "linear"])
def test_autograd_matches_differences(body, interp):
    f = CanonicalField(body.canonical_bounds(), dtype=torch.float64, interpolation=interp, n_levels=4, max_res=64)
    with torch.no_grad():
        f.grid.normal_(0, 1, generator=torch.Generator().manual_seed(0))
    x = torch.tensor([[0.03, 0.11, 0.05]], dtype=torch.float64, requires_grad=True)
    _, s = f(x)
    (g,) = torch.autograd.grad(s.sum(), x)
    h = 1e-7
    for k in range(3):
        e = torch.zeros(1, 3, dtype=torch.float64)
        e[0, k] = h
        with torch.no_grad():
            fd = (f(x + e)[1] - f(x - e)[1]) / (2 * h)
        assert torch.allclose(g[0, k], fd[0], rtol=1e-4, atol=1e-6)


def test_output_ranges(field, rng):
    with torch.no_grad():
        field.grid.normal_(0, 3)
    b = field.bounds
    c, s = field(torch.as_tensor(b.min + rng.random((1000, 3)) * (b.max - b.min)))
    assert torch.all(s >= 0) and torch.all((c >= 0) & (c <= 1))


def test_hashed_levels_finite(body):
    f = CanonicalField(body.canonical_bounds(), table_size=2**12, dtype=torch.float32)
    assert any(not spec["dense"] for spec in f.level_specs)
    pts = torch.rand(10**6, 3) * 1.4 - 0.7
    c, s = f(pts)
    assert torch.isfinite(c).all() and torch.isfinite(s).all()


def test_level_layout(body):
    f = CanonicalField(body.canonical_bounds())
    res = [s["res"] for s in f.level_specs]
    assert res[0] == 16 and res[-1] == 256 and len(res) == 8
    assert all(s["size"] <= 2**19 for s in f.level_specs)


def test_nonfinite_parameters_fail_fast(field):
    with torch.no_grad():
        field.grid[0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        query(field, np.zeros(3))


def test_query_posed_rest(field, body, rng):
    with torch.no_grad():
        field.grid.normal_(0, 1)
    for x in rng.normal(0, 0.2, (5, 3)):
        a, b = query_posed(field, x, PoseParams(), body), query(field, x)
        assert np.isclose(a.density, b.density) and np.allclose(a.color, b.color)


def test_query_posed_translation(field, body, rng):
    with torch.no_grad():
        field.grid.normal_(0, 1)
    t = np.array([0.4, -0.1, 0.7])
    for x in rng.normal(0, 0.2, (5, 3)):
        a, b = query_posed(field, x + t, PoseParams(trans=t), body), query(field, x)
        assert np.isclose(a.density, b.density, atol=1e-9)


def test_query_posed_far_point(field, body):
    assert query_posed(field, [10.0, 10.0, 10.0], PoseParams(), body).density == 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_query_posed_rigid_equivariance(template, seed):
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(seed)
    body = BodyModel(template)
    field = CanonicalField(body.canonical_bounds(), dtype=torch.float64, n_levels=4, max_res=64)
    with torch.no_grad():
        field.grid.normal_(0, 1, generator=torch.Generator().manual_seed(seed % 1000))
    pose = PoseParams(theta=rng.normal(0, 0.2, 72), trans=rng.normal(0, 0.3, 3))
    R = Rotation.from_rotvec(rng.normal(0, 1, 3))
    shift = rng.normal(0, 1, 3)
    moved = pose.copy()
    moved.theta[:3] = (R * Rotation.from_rotvec(pose.theta[:3])).as_rotvec()
    r0 = body.joints_rest[0].numpy()
    moved.trans = R.apply(r0 + pose.trans) - r0 + shift
    x = rng.normal(0, 0.2, 3) + pose.trans
    a = query_posed(field, x, pose, body)
    b = query_posed(field, R.apply(x) + shift, moved, body)
    assert abs(a.density - b.density) <= 1e-9 and np.abs(a.color - b.color).max() <= 1e-9


def test_checkpoint_round_trip(tmp_path, body):
    f = CanonicalField(body.canonical_bounds(), interpolation="linear", seed=3)
    save_field(tmp_path / "f.bin", f)
    g = load_field(tmp_path / "f.bin")
    assert g.interpolation == "linear"
    for (n, a), (_, b) in zip(f.state_dict().items(), g.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_field(tmp_path / "x.bin")


def test_unknown_interpolation():
    with pytest.raises(ValueError):
        CanonicalField(Aabb(np.zeros(3), np.ones(3)), interpolation="cubic")
