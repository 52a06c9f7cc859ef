import numpy as np
import torch

from morphavatar.camera import Camera, orbit_camera
from morphavatar.fitting import GradCheckScene, cutoff_safe_mask, gradient_check
from morphavatar.losses import SplatInitState
from morphavatar.splat_render import render_splats
from morphavatar.splats import SplatSet

torch.set_num_threads(2)
DT = torch.float64


def flat_board_mesh(extent=1.0):
    """Two triangles spanning a z=0 square, used as a neutral parent surface."""
    verts = np.array([[-extent, -extent, 0], [extent, -extent, 0],
                      [-extent, extent, 0], [extent, extent, 0]], dtype=np.float64)
    tris = np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int64)
    return verts, tris


def front_camera(res=32, fx=None, distance=2.0):
    fx = fx or res * 1.0
    return Camera(fx=fx, fy=fx, cx=res / 2, cy=res / 2, rotation=np.eye(3),
                  translation=np.array([0.0, 0.0, distance]), width=res, height=res)


def make_splats(rng, n, parent_max=2, spread=0.4, dtype=DT):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = rng.uniform(-0.4, 0.4, size=(n, 3))
    sh[:, :, 1:] = rng.uniform(-0.15, 0.15, size=(n, 3, 3))
    return SplatSet(
        log_scale=torch.as_tensor(rng.uniform(np.log(0.05), np.log(0.25), size=(n, 3)), dtype=dtype),
        local_pos=torch.as_tensor(rng.uniform(-spread, spread, size=(n, 3)), dtype=dtype),
        rotation=torch.as_tensor(q, dtype=dtype),
        sh=torch.as_tensor(sh, dtype=dtype),
        opacity_logit=torch.as_tensor(rng.uniform(-1.0, 1.5, size=n), dtype=dtype),
        parent=torch.as_tensor(rng.integers(0, parent_max, size=n)),
        sh_degree=1,
    )


class TestRenderBasics:
    def test_empty_set_gives_background(self):
        verts, tris = flat_board_mesh()
        splats = make_splats(np.random.default_rng(0), 1)
        empty = SplatSet(log_scale=splats.log_scale[:0], local_pos=splats.local_pos[:0],
                         rotation=splats.rotation[:0], sh=splats.sh[:0],
                         opacity_logit=splats.opacity_logit[:0], parent=splats.parent[:0])
        img = render_splats(empty, torch.as_tensor(verts), torch.as_tensor(tris),
                            front_camera(), 32, 32, background=0.3)
        np.testing.assert_allclose(img.numpy(), 0.3)

    def test_transparent_splats_give_background(self):
        verts, tris = flat_board_mesh()
        splats = make_splats(np.random.default_rng(1), 20)
        splats.opacity_logit.fill_(-40.0)  # alpha -> 0
        img = render_splats(splats, torch.as_tensor(verts), torch.as_tensor(tris),
                            front_camera(), 32, 32, background=0.6)
        np.testing.assert_allclose(img.numpy(), 0.6, atol=1e-12)

    def test_single_gaussian_radial_profile(self):
        verts, tris = flat_board_mesh()
        splats = SplatSet(
            log_scale=torch.log(torch.full((1, 3), 0.12, dtype=DT)),
            local_pos=torch.zeros((1, 3), dtype=DT),
            rotation=torch.tensor([[1.0, 0, 0, 0]], dtype=DT),
            sh=torch.zeros((1, 3, 1), dtype=DT),
            opacity_logit=torch.full((1,), float(np.log(0.9 / 0.1)), dtype=DT),
            parent=torch.tensor([0]), sh_degree=0,
        )
        splats.sh[:, :, 0] = (1.0 - 0.5) / 0.28209479177387814  # white
        res = 33
        cam = front_camera(res=res, fx=40, distance=1.5)
        img = render_splats(splats, torch.as_tensor(verts), torch.as_tensor(tris),
                            cam, res, res, background=0.0).numpy()
        lum = img.sum(axis=2)
        # frame origin is the first triangle's centroid; it projects off-center
        peak = np.unravel_index(np.argmax(lum), lum.shape)
        from morphavatar.camera import project_points
        centroid = verts[tris[0]].mean(axis=0, keepdims=True)
        uv, _, _ = project_points(cam, centroid)
        assert abs(peak[1] + 0.5 - uv[0, 0]) <= 1.0
        assert abs(peak[0] + 0.5 - uv[0, 1]) <= 1.0
        # radially monotone falloff along the image row through the peak
        row = lum[peak[0]]
        right = row[peak[1]:]
        left = row[:peak[1] + 1][::-1]
        for arm in (right, left):
            diffs = np.diff(arm[arm > 1e-12])
            assert np.all(diffs <= 1e-9)

    def test_compositing_conservation(self):
        verts, tris = flat_board_mesh()
        splats = make_splats(np.random.default_rng(2), 60)
        v = torch.as_tensor(verts)
        t = torch.as_tensor(tris)
        img, extras = render_splats(splats, v, t, front_camera(), 32, 32,
                                    background=1.0, return_extras=True)
        total = extras.weight_sum + extras.transmittance
        assert float((total - 1.0).abs().max()) <= 1e-6

    def test_deterministic(self):
        verts, tris = flat_board_mesh()
        splats = make_splats(np.random.default_rng(3), 40)
        v, t = torch.as_tensor(verts), torch.as_tensor(tris)
        a = render_splats(splats, v, t, front_camera(), 32, 32)
        b = render_splats(splats, v, t, front_camera(), 32, 32)
        assert torch.equal(a, b)


def random_rigid(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q, rng.normal(size=3) * 0.5


def transform_camera(cam: Camera, q: np.ndarray, b: np.ndarray) -> Camera:
    # world points map p -> q p + b; keep the image fixed by composing the
    # inverse into the extrinsics
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  rotation=cam.rotation @ q.T,
                  translation=cam.translation - cam.rotation @ q.T @ b,
                  width=cam.width, height=cam.height)


class TestRigidEquivariance:
    def test_joint_transform_leaves_image_unchanged(self):
        rng = np.random.default_rng(4)
        verts, tris = flat_board_mesh()
        splats = make_splats(rng, 30)
        v, t = torch.as_tensor(verts), torch.as_tensor(tris)
        cam = orbit_camera((0, 0, 0), 2.2, 15, -8, fx=36, fy=36, cx=16, cy=16,
                           width=32, height=32)
        base = render_splats(splats, v, t, cam, 32, 32, background=0.2)
        for _ in range(3):
            q, b = random_rigid(rng)
            v2 = torch.as_tensor(verts @ q.T + b)
            cam2 = transform_camera(cam, q, b)
            moved = render_splats(splats, v2, t, cam2, 32, 32, background=0.2)
            assert float((moved - base).abs().max()) <= 1e-5


class TestGradients:
    def make_scene(self, seed=0, n=3, res=16):
        rng = np.random.default_rng(seed)
        verts, tris = flat_board_mesh()
        splats = SplatSet(
            log_scale=torch.as_tensor(rng.uniform(np.log(0.15), np.log(0.3), (n, 3)), dtype=DT),
            local_pos=torch.as_tensor(rng.uniform(-0.35, 0.35, (n, 3)), dtype=DT),
            rotation=torch.as_tensor(rng.normal(size=(n, 4)), dtype=DT),
            sh=torch.as_tensor(0.3 * rng.normal(size=(n, 3, 4)), dtype=DT),
            opacity_logit=torch.as_tensor(rng.uniform(-0.5, 1.0, n), dtype=DT),
            parent=torch.as_tensor(rng.integers(0, 2, n)), sh_degree=1,
        )
        with torch.no_grad():
            splats.rotation /= splats.rotation.norm(dim=1, keepdim=True)
        target = torch.as_tensor(rng.uniform(0.1, 0.9, size=(res, res, 3)), dtype=DT)
        scene = GradCheckScene(
            splats=splats,
            vertices=torch.as_tensor(verts, dtype=DT),
            triangles=torch.as_tensor(tris),
            camera=front_camera(res=res, fx=18, distance=2.0),
            height=res, width=res, target=target,
            init_state=SplatInitState(
                local_pos=splats.local_pos.detach() + 0.05,
                rotation=torch.tensor([[1.0, 0, 0, 0]], dtype=DT).repeat(n, 1)),
        )
        return scene

    def test_color_opacity_gradients(self):
        scene = self.make_scene()
        assert gradient_check(scene, "sh", h=1e-6) < 1e-5
        assert gradient_check(scene, "opacity", h=1e-6) < 1e-5

    def test_position_gradients(self):
        scene = self.make_scene()
        assert gradient_check(scene, "position", h=1e-6) < 1e-3

    def test_scale_rotation_gradients(self):
        scene = self.make_scene(seed=5)
        assert gradient_check(scene, "scale", h=1e-6) < 1e-3
        assert gradient_check(scene, "rotation", h=1e-6) < 1e-3

    def test_zero_opacity_splat_has_zero_color_gradient(self):
        scene = self.make_scene()
        with torch.no_grad():
            scene.splats.opacity_logit[1] = -45.0  # alpha == 0 numerically
        sh = scene.splats.sh
        sh.requires_grad_(True)
        from morphavatar.fitting import _scene_loss
        loss = _scene_loss(scene, None)
        g = torch.autograd.grad(loss, sh)[0]
        assert torch.all(g[1] == 0)

    def test_safe_mask_excludes_cutoff_ring(self):
        scene = self.make_scene()
        mask = cutoff_safe_mask(scene)
        assert mask.dtype == torch.bool
        # some pixels must survive for the check signal
        assert int(mask.sum()) > scene.height * scene.width * 0.2
