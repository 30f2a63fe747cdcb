import numpy as np
import pytest
from scipy.stats import chisquare

from cascadepu import network as N
from cascadepu.geometry import PointCloud, chamfer_distance, hausdorff_distance, point_to_surface
from cascadepu.pipeline import (
    CloudFormatError,
    evaluate,
    extract_patches,
    generate_shape,
    manifest_patchset,
    mesh_from_cloud,
    parse_toy_uri,
    read_cloud,
    read_manifest,
    toy_patchset,
    upsample_cloud,
    write_cloud,
)
from cascadepu.surfaces import AnalyticSurface


def cloud(n, seed=0):
    return PointCloud(np.random.default_rng(seed).uniform(-1, 1, (n, 3)))


# ----------------------------------------------------------------- shapes

def test_sphere_points_on_surface():
    pts = generate_shape(AnalyticSurface.sphere(1.0), 5000, np.random.default_rng(0)).points
    assert np.all(np.abs(np.linalg.norm(pts, axis=1) - 1) < 1e-12)


def test_plane_points_flat():
    pts = generate_shape(AnalyticSurface.plane(1.0, 2.0), 1000, np.random.default_rng(0)).points
    assert np.all(pts[:, 2] == 0)
    assert np.abs(pts[:, 1]).max() <= 2.0


def test_generation_is_seeded():
    s = AnalyticSurface.torus()
    a = generate_shape(s, 100, np.random.default_rng(3)).points
    b = generate_shape(s, 100, np.random.default_rng(3)).points
    np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def torus_sample():
    s = AnalyticSurface.torus(1.0, 0.35)
    return s, generate_shape(s, 100_000, np.random.default_rng(11)).points


def test_torus_major_angle_uniform(torus_sample):
    _, pts = torus_sample
    u = np.arctan2(pts[:, 1], pts[:, 0])
    counts, _ = np.histogram(u, bins=36, range=(-np.pi, np.pi))
    assert chisquare(counts).pvalue > 0.01


def test_torus_minor_angle_follows_area_element(torus_sample):
    s, pts = torus_sample
    big, small = s.size
    rho = np.hypot(pts[:, 0], pts[:, 1])
    v = np.arctan2(pts[:, 2], rho - big)
    edges = np.linspace(-np.pi, np.pi, 37)
    counts, _ = np.histogram(v, bins=edges)
    # Integral of (R + r cos v) over each bin, normalised.
    mass = big * np.diff(edges) + small * np.diff(np.sin(edges))
    expected = len(v) * mass / mass.sum()
    assert chisquare(counts, expected).pvalue > 0.01


def test_box_points_on_faces():
    s = AnalyticSurface.box(1.0, 0.7, 0.5)
    pts = generate_shape(s, 2000, np.random.default_rng(0)).points
    assert np.all(s.distance(pts) < 1e-12)


def test_surface_validation():
    with pytest.raises(ValueError):
        AnalyticSurface.sphere(0.0)
    with pytest.raises(ValueError):
        AnalyticSurface.sphere(1.0).sample(0, np.random.default_rng(0))


def test_toy_uri():
    assert parse_toy_uri("toy://sphere, torus") == ["sphere", "torus"]
    assert set(parse_toy_uri("toy://all")) == {"sphere", "torus", "box", "plane"}
    with pytest.raises(ValueError, match="unknown toy shape"):
        parse_toy_uri("toy://teapot")
    with pytest.raises(ValueError):
        parse_toy_uri("data/manifest.txt")


def test_toy_patchset_sizes():
    ps = toy_patchset(["sphere", "box"], 5, 64, seed=0)
    assert len(ps) == 10
    assert all(p.points.shape == (64, 3) for p in ps)
    assert all(np.linalg.norm(p.points, axis=1).max() == pytest.approx(1.0) for p in ps)


# ----------------------------------------------------------------- patches

def test_single_patch_is_whole_cloud():
    c = cloud(50)
    ps = extract_patches(c, num_seeds=1, patch_size=50)
    assert len(ps) == 1
    p = ps.patches[0]
    back = p.normalization.invert(p.points)
    assert sorted(map(tuple, np.round(back, 12))) == sorted(map(tuple, np.round(c.points, 12)))


def test_default_seeding_covers_every_point():
    c = cloud(600, 1)
    ps = extract_patches(c, patch_size=64)
    assert len(ps) >= int(np.ceil(3 * 600 / 64))
    covered = np.zeros(600, dtype=bool)
    for patch in ps:
        back = patch.normalization.invert(patch.points)
        d = ((back[:, None, :] - c.points[None]) ** 2).sum(-1)
        covered[d.argmin(axis=1)] = True
    assert covered.all()


def test_patch_members_are_brute_force_knn():
    c = cloud(300, 2)
    ps = extract_patches(c, num_seeds=7, patch_size=40)
    for seed, members in zip(ps.seeds, ps.members):
        d = ((c.points - c.points[seed]) ** 2).sum(1)
        brute = np.lexsort((np.arange(300), d))[:40]
        assert sorted(members.tolist()) == sorted(brute.tolist())


def test_patch_arguments_validated():
    with pytest.raises(ValueError):
        extract_patches(cloud(10), patch_size=11)
    with pytest.raises(ValueError):
        extract_patches(cloud(10), num_seeds=0, patch_size=5)


# ----------------------------------------------------------------- upsampling

@pytest.fixture(scope="module")
def zero_net():
    return N.zero_offset_heads(N.init_network(N.default_stage_configs(3, k_attention=8), seed=0))


def test_upsample_counts(zero_net):
    c = cloud(100, 3)
    assert len(upsample_cloud(c, zero_net, 4, patch_size=64)) == 400
    assert len(upsample_cloud(c, zero_net, 16, patch_size=64)) == 1600
    assert len(upsample_cloud(c, zero_net, 4, use_refiner=False, patch_size=64)) == 400


def test_upsample_rejects_bad_rate_and_tiny_cloud(zero_net):
    with pytest.raises(ValueError):
        upsample_cloud(cloud(100), zero_net, 8)
    with pytest.raises(ValueError, match="k_attention"):
        upsample_cloud(cloud(5), zero_net, 4)
    two = N.init_network(N.default_stage_configs(2, k_attention=8), seed=0)
    assert len(upsample_cloud(cloud(40), two, 4, patch_size=32)) == 160


def test_zero_offset_round_trip(zero_net):
    c = cloud(120, 4)
    out = upsample_cloud(c, zero_net, 4, patch_size=64)
    assert float(chamfer_distance(out.points, c.points).data) <= 1e-12
    d = np.sqrt(((out.points[:, None, :] - c.points[None]) ** 2).sum(-1)).min(axis=1)
    assert d.max() < 1e-9


def test_upsample_is_deterministic():
    net = N.init_network(N.default_stage_configs(3, k_attention=8), seed=1, zero_attention_out=False)
    c = cloud(80, 5)
    a = upsample_cloud(c, net, 4, patch_size=48).points
    b = upsample_cloud(c, net, 4, patch_size=48).points
    np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------- evaluation

def test_evaluate_identical():
    c = cloud(64)
    m = evaluate(c, c, AnalyticSurface.sphere(1.0))
    assert m.cd == 0 and m.hd == 0
    assert evaluate(c, c).p2f is None


def test_evaluate_matches_geometry_after_normalisation():
    gt = PointCloud(np.random.default_rng(0).uniform(-3, 5, (80, 3)))
    pred = PointCloud(gt.points + np.random.default_rng(1).normal(0, 0.1, (80, 3)))
    m = evaluate(pred, gt)
    center = gt.points.mean(0)
    scale = np.linalg.norm(gt.points - center, axis=1).max()
    p, g = (pred.points - center) / scale, (gt.points - center) / scale
    assert m.cd == pytest.approx(float(chamfer_distance(p, g).data), abs=1e-12)
    assert m.hd == pytest.approx(hausdorff_distance(p, g), abs=1e-12)
    assert m.scaled().cd == pytest.approx(1e3 * m.cd)


def test_evaluate_p2f_is_scale_consistent():
    s = AnalyticSurface.sphere(2.0)
    gt = generate_shape(s, 500, np.random.default_rng(0))
    pred = PointCloud(gt.points * 1.05)
    m = evaluate(pred, gt, s)
    scale = np.linalg.norm(gt.points - gt.points.mean(0), axis=1).max()
    assert m.p2f == pytest.approx(0.1 / scale, rel=1e-9)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(PointCloud(np.zeros((0, 3))), cloud(3))


# ----------------------------------------------------------------- file formats

@pytest.mark.parametrize("name,binary", [("c.xyz", False), ("c.ply", False), ("c.ply", True), ("c.off", False)])
def test_round_trip(tmp_path, name, binary):
    c = PointCloud(np.random.default_rng(0).standard_normal((100, 3)) * 1e3)
    write_cloud(c, tmp_path / name, binary=binary)
    back = read_cloud(tmp_path / name)
    # repr() keeps ASCII exact as well.
    np.testing.assert_array_equal(back.points, c.points)


def test_xyz_bad_token_names_line(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 0\n1 1 1\n1 x 2\n")
    with pytest.raises(CloudFormatError, match=r"bad.xyz:3"):
        read_cloud(f)


def test_xyz_wrong_arity(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0\n")
    with pytest.raises(CloudFormatError, match=":1:"):
        read_cloud(f)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="unknown point cloud format"):
        read_cloud(tmp_path / "c.obj")


def test_ply_with_extra_properties_and_faces(tmp_path):
    f = tmp_path / "m.ply"
    f.write_text("ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\n"
                 "property float y\nproperty float z\nproperty uchar red\n"
                 "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n")
    np.testing.assert_array_equal(read_cloud(f).points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_ply_truncated_binary(tmp_path):
    f = tmp_path / "c.ply"
    write_cloud(cloud(10), f, binary=True)
    f.write_bytes(f.read_bytes()[:-5])
    with pytest.raises(CloudFormatError, match="byte"):
        read_cloud(f)


def test_ply_truncated_ascii(tmp_path):
    f = tmp_path / "c.ply"
    write_cloud(cloud(4), f)
    f.write_text("\n".join(f.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(CloudFormatError, match=":11:"):
        read_cloud(f)


CUBE_OFF = """OFF
8 6 0
-1 -1 -1
1 -1 -1
1 1 -1
-1 1 -1
-1 -1 1
1 -1 1
1 1 1
-1 1 1
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 2 3 7 6
4 1 2 6 5
4 0 4 7 3
"""


def test_off_cube_mesh_distance(tmp_path):
    f = tmp_path / "cube.off"
    f.write_text(CUBE_OFF)
    c = read_cloud(f)
    assert c.faces.shape == (12, 3)
    mesh = mesh_from_cloud(c)
    assert point_to_surface(np.array([[0.0, 0.0, 2.0]]), mesh) == pytest.approx(1.0, abs=1e-15)
    assert point_to_surface(np.array([[0.0, 0.0, 0.5]]), mesh) == pytest.approx(0.5, abs=1e-15)


def test_off_errors(tmp_path):
    f = tmp_path / "bad.off"
    f.write_text("PLY\n")
    with pytest.raises(CloudFormatError, match="OFF header"):
        read_cloud(f)
    f.write_text("OFF\n2 0 0\n0 0 0\n")
    with pytest.raises(CloudFormatError, match="ends before"):
        read_cloud(f)
    with pytest.raises(ValueError, match="no faces"):
        mesh_from_cloud(cloud(3))


# ----------------------------------------------------------------- manifests

def test_manifest(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    for i in range(2):
        write_cloud(cloud(200, i), sub / f"c{i}.xyz")
    (sub / "cube.off").write_text(CUBE_OFF)
    m = tmp_path / "list.txt"
    m.write_text("# clouds\ndata/c0.xyz data/cube.off\n\ndata/c1.xyz\n")
    entries = read_manifest(m)
    assert entries[0] == ((sub / "c0.xyz").resolve(), (sub / "cube.off").resolve())
    assert entries[1][1] is None
    ps = manifest_patchset(m, 3, 64)
    assert len(ps) == 6


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest not found"):
        read_manifest(tmp_path / "nope.txt")
    m = tmp_path / "list.txt"
    m.write_text("missing.xyz\n")
    with pytest.raises(FileNotFoundError, match="missing.xyz"):
        manifest_patchset(m, 1, 8)
    m.write_text("# nothing\n")
    with pytest.raises(ValueError, match="no clouds"):
        manifest_patchset(m, 1, 8)
    m.write_text("a b c\n")
    with pytest.raises(CloudFormatError, match=":1:"):
        read_manifest(m)
