import numpy as np
import pytest

from elastodyn import gmls
from elastodyn.field import unit_sphere
from elastodyn.material import MaterialParams
from elastodyn.dynamics import Simulation
from elastodyn.render import (
    Camera,
    WarpData,
    deformed_bounds,
    render,
    render_points,
    render_reference_shifted,
    to_uint8,
    warp_point,
    warp_points,
    write_png,
    read_png,
    write_ppm,
)
from elastodyn.sampling import build_ip_set, poisson_disk_sample, select_kernels

from conftest import make_sim


@pytest.fixture(scope="module")
def sphere_sim():
    field = unit_sphere(0.5, falloff=0.15)
    cloud = poisson_disk_sample(field, 0.11, 2.0, seed=12)
    kernels = select_kernels(cloud, 8, seed=3)
    ips = build_ip_set(cloud, kernels, m_extra=12)
    params = MaterialParams(model="neo_hookean", E=1e3, nu=0.3, rho=100.0)
    sim = Simulation(cloud, kernels, ips, params, dt=0.01)
    return field, sim


def encode(sim, const=None, lin=None, quad=None):
    return gmls.encode_polynomial(
        sim.kernels,
        np.zeros(3) if const is None else const,
        lin,
        quad,
    )


class TestCamera:
    def test_look_at_projects_to_center(self):
        cam = Camera(position=(0, -3, 0), look_at=(0.2, 0.5, -0.1),
                     width=101, height=81)
        pix, depth, valid = cam.project([0.2, 0.5, -0.1])
        assert valid[0]
        assert pix[0, 0] == pytest.approx((101 - 1) / 2, abs=1e-9)
        assert pix[0, 1] == pytest.approx((81 - 1) / 2, abs=1e-9)

    def test_point_behind_camera_culled(self):
        cam = Camera(position=(0, -3, 0), look_at=(0, 0, 0))
        _, _, valid = cam.project([0.0, -5.0, 0.0])
        assert not valid[0]

    def test_square_projected_side_length(self):
        d, side, fov, H = 4.0, 0.8, 50.0, 200
        cam = Camera(position=(0, 0, 0), look_at=(0, d, 0), up=(0, 0, 1),
                     fov_deg=fov, width=200, height=H)
        corners = np.array([
            [-side / 2, d, -side / 2],
            [side / 2, d, -side / 2],
            [side / 2, d, side / 2],
            [-side / 2, d, side / 2],
        ])
        pix, _, valid = cam.project(corners)
        assert valid.all()
        measured = pix[1, 0] - pix[0, 0]
        expected = (H / 2) / np.tan(np.deg2rad(fov) / 2) * (side / d)
        assert measured == pytest.approx(expected, rel=1e-9)

    def test_rays_unit_and_through_center(self):
        cam = Camera(position=(1, -2, 0.5), look_at=(0, 0, 0), width=64, height=64)
        rays = cam.rays()
        assert np.allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
        fwd, _, _ = cam.basis()
        center = (rays[31] + rays[32])[31:33].mean(axis=0)
        center /= np.linalg.norm(center)
        assert np.allclose(center, fwd, atol=1e-6)

    def test_invalid_camera(self):
        with pytest.raises(ValueError):
            Camera(position=(0, -1, 0), look_at=(0, 0, 0), fov_deg=200.0)
        with pytest.raises(ValueError):
            Camera(position=(0, -1, 0), look_at=(0, 0, 0), width=0)


class TestWarp:
    def test_identity_bit_exact(self, sphere_sim, rng):
        _, sim = sphere_sim
        data = WarpData.from_simulation(sim)
        pts = rng.uniform(-0.5, 0.5, size=(100, 3))
        rest, conv, in_body, iters, res, _ = warp_points(data, pts)
        assert np.array_equal(rest, pts)
        assert conv.all()
        assert iters.max() == 1

    def test_single_point_api(self, sphere_sim):
        _, sim = sphere_sim
        data = WarpData.from_simulation(sim)
        out = warp_point(data, [0.1, 0.0, 0.0])
        assert out.converged and out.in_body
        assert out.iterations == 1
        assert np.array_equal(out.rest, np.array([0.1, 0.0, 0.0]))

    def test_far_point_not_in_body(self, sphere_sim):
        _, sim = sphere_sim
        data = WarpData.from_simulation(sim)
        out = warp_point(data, [40.0, 0.0, 0.0])
        assert not out.in_body

    def test_rigid_translation(self, sphere_sim, rng):
        _, sim = sphere_sim
        t = np.array([0.3, -0.2, 0.1])
        data = WarpData.from_simulation(sim, encode(sim, const=t))
        pts = rng.uniform(-0.3, 0.3, size=(50, 3)) + t
        rest, conv, _, _, _, _ = warp_points(data, pts)
        assert conv.all()
        assert np.abs(rest - (pts - t)).max() < 1e-12

    def test_quadratic_round_trip(self, sphere_sim, rng):
        _, sim = sphere_sim
        lin = 0.1 * rng.normal(size=(3, 3))
        quad = 0.1 * rng.normal(size=(3, 3, 3))
        quad = 0.5 * (quad + quad.transpose(0, 2, 1))
        q = encode(sim, lin=lin, quad=quad)
        data = WarpData.from_simulation(sim, q)
        x = rng.uniform(-0.35, 0.35, size=(300, 3))
        u = np.array([gmls.displacement(sim.kernels, q, xi) for xi in x])
        rest, conv, _, iters, _, _ = warp_points(data, x + u)
        scale = 1.0  # sphere scene diameter
        assert conv.all()
        assert iters.max() <= 50
        assert np.linalg.norm(rest - x, axis=1).max() < 1e-5 * scale

    def test_general_q_blended_round_trip(self, sphere_sim, rng):
        field, sim = sphere_sim
        q = 0.05 * rng.normal(size=sim.ndof)
        # rest points uniform inside IP cuboids, gradient bound |grad u| <= 0.5
        which = rng.integers(0, len(sim.ips), 200)
        local = (rng.random((200, 3)) - 0.5) * sim.ips.edges[which]
        x = sim.ips.positions[which] + np.einsum(
            "nab,nb->na", sim.ips.axes[which], local
        )
        gnorm = max(
            np.linalg.norm(
                gmls.deformation_gradient(sim.kernels, q, xi) - np.eye(3)
            )
            for xi in x
        )
        if gnorm > 0.5:
            q *= 0.5 / gnorm
        data = WarpData.from_simulation(sim, q)
        u = np.array([gmls.displacement(sim.kernels, q, xi) for xi in x])
        rest, conv, in_body, _, _, _ = warp_points(data, x + u)
        keep = conv & in_body
        assert keep.mean() > 0.95
        lo, hi = field.bounds()
        scale = float(np.max(hi - lo))
        err = np.linalg.norm(rest[keep] - x[keep], axis=1)
        assert err.max() < 1e-2 * scale

    def test_quadratic_beats_linear_warping(self, sphere_sim, rng):
        _, sim = sphere_sim
        # pure quadratic deformation with displacement ~0.3 * scene scale
        quad = np.zeros((3, 3, 3))
        quad[0, 0, 0] = 0.6
        quad[2, 1, 1] = -0.45
        q = encode(sim, quad=quad)
        data_q = WarpData.from_simulation(sim, q)
        data_l = WarpData.from_simulation(sim, q)
        data_l.order = "linear"
        x = rng.uniform(-0.4, 0.4, size=(200, 3))
        u = np.array([gmls.displacement(sim.kernels, q, xi) for xi in x])
        assert np.linalg.norm(u, axis=1).max() > 0.08
        xt = x + u
        rest_q, conv_q, _, _, _, _ = warp_points(data_q, xt)
        rest_l, conv_l, _, _, _, _ = warp_points(data_l, xt)
        err_q = np.linalg.norm(rest_q[conv_q & conv_l] - x[conv_q & conv_l], axis=1)
        err_l = np.linalg.norm(rest_l[conv_q & conv_l] - x[conv_q & conv_l], axis=1)
        assert err_q.max() * 10.0 <= err_l.max()


@pytest.fixture(scope="module")
def small_camera():
    return Camera(position=(0.0, -2.3, 0.7), look_at=(0, 0, 0), width=96,
                  height=96, fov_deg=38.0)


class TestRender:
    def test_identity_bit_exact(self, sphere_sim, small_camera):
        field, sim = sphere_sim
        warp = WarpData.from_simulation(sim)
        bounds = deformed_bounds(field, warp)
        img_ref = render(small_camera, field, warp=None, step=0.05, bounds=bounds)
        img = render(small_camera, field, warp=warp, step=0.05, bounds=bounds)
        assert np.array_equal(to_uint8(img), to_uint8(img_ref))
        assert np.array_equal(img, img_ref)
        assert img[..., 3].max() > 0.3  # the body is actually visible

    def test_rigid_translation_within_one_lsb(self, sphere_sim, small_camera):
        field, sim = sphere_sim
        t = np.array([0.15, 0.1, -0.1])
        warp = WarpData.from_simulation(sim, encode(sim, const=t))
        bounds = deformed_bounds(field, warp)
        img = to_uint8(render(small_camera, field, warp=warp, step=0.05,
                              bounds=bounds))
        ref = to_uint8(render_reference_shifted(small_camera, field, t,
                                                step=0.05, bounds=bounds))
        diff = np.abs(img.astype(int) - ref.astype(int))
        frac_ok = (diff <= 1).all(axis=-1).mean()
        assert frac_ok >= 0.999

    def test_transmittance_bounds(self, sphere_sim, small_camera):
        field, sim = sphere_sim
        img = render(small_camera, field, warp=WarpData.from_simulation(sim),
                     step=0.05)
        alpha = img[..., 3]
        assert np.all((alpha >= 0.0) & (alpha <= 1.0))
        denser = render(small_camera, field, warp=WarpData.from_simulation(sim),
                        step=0.05, density_scale=3.0)
        assert np.all(denser[..., 3] >= alpha - 1e-12)

    def test_constant_box_optical_depth(self):
        from elastodyn.field import box_field

        field = box_field([0.3, 0.3, 0.3], falloff=0.02)
        cam = Camera(position=(0, -4, 0), look_at=(0, 0, 0), width=9, height=9,
                     fov_deg=10.0)
        step = 0.01
        img = render(cam, field, warp=None, step=step)
        # center ray: chord 0.6 of density 1 => T = exp(-0.6)
        alpha = img[4, 4, 3]
        assert alpha == pytest.approx(1.0 - np.exp(-0.6), abs=0.02)

    def test_stretch_scales_silhouette(self, sphere_sim):
        field, sim = sphere_sim
        cam = Camera(position=(0.0, -30.0, 0.0), look_at=(0, 0, 0), width=160,
                     height=110, fov_deg=3.2)
        stretch = 0.2
        lin = np.zeros((3, 3))
        lin[0, 0] = stretch
        warp = WarpData.from_simulation(sim, encode(sim, lin=lin))
        rest_img = render(cam, field, warp=None, step=0.02,
                          bounds=deformed_bounds(field, warp))
        def_img = render(cam, field, warp=warp, step=0.02,
                         bounds=deformed_bounds(field, warp))

        def width_px(img):
            cols = np.flatnonzero((img[..., 3] > 0.05).any(axis=0))
            return cols[-1] - cols[0] + 1

        w0 = width_px(rest_img)
        w1 = width_px(def_img)
        assert w1 / w0 == pytest.approx(1.0 + stretch, rel=0.02)


class TestOverlayAndIO:
    def test_render_points_center(self):
        cam = Camera(position=(0, -2, 0), look_at=(0, 0, 0), width=50, height=50)
        pix, depth, valid = render_points(cam, [[0.0, 0.0, 0.0]])
        assert valid[0] and depth[0] == pytest.approx(2.0)

    def test_png_round_trip(self, tmp_path, rng):
        img = rng.random((20, 30, 4))
        path = tmp_path / "img.png"
        write_png(path, img)
        back = read_png(path)
        assert np.array_equal(back, to_uint8(img))

    def test_ppm_header_and_payload(self, tmp_path, rng):
        img = to_uint8(rng.random((4, 5, 4)))
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n5 4\n255\n")
        assert raw[len(b"P6\n5 4\n255\n"):] == img[:, :, :3].tobytes()
