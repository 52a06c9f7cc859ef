"""End-to-end orchestration: generate, fit, render, plus the file formats.

Configs are TOML, manifests and metadata JSON, tensors the MAVT container,
images PNG. Every command is deterministic under its seed: one root seed
derives independent streams for identity, reference expressions, view
sampling and the expression pool, and all outputs are byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .blob import read_container, write_container
from .camera import Camera, orbit_camera
from .conditioning import assemble_conditioning_set, fit_crop, outcrop_mask
from .deformation import MlpDeformationField, apply_deformation, deformation_inputs
from .denoisers import OracleMeshDenoiser
from .errors import ConfigError
from .fitting import FitConfig, FitResult, TrainView, fit_avatar
from .losses import AvatarLossWeights
from .morphable import (MorphableModel, evaluate_mesh, evaluate_uv_vertices,
                        remesh_to_uv, synth_model, validate_model)
from .sampler import SamplerConfig, sample_stochastic_io
from .schedule import make_base_schedule, shift_snr
from .splat_render import render_splats
from .splats import SplatSet
from .view_sampler import (blendshape_weights, build_expression_database,
                           inside_ellipse, sample_views)

MANIFEST_VERSION = 1


@dataclass
class ModelSpec:
    path: str | None = None
    seed: int | None = None
    n_subdiv: int = 2
    k_id: int = 8
    k_expr: int = 10


@dataclass
class GenerateConfig:
    n_generated: int = 24          # G
    per_pass_generated: int = 8    # G'
    per_pass_reference: int = 2    # R'
    steps: int = 250               # T
    cfg_weight: float = 2.0
    latent_res: int = 64
    crop_res: int = 512
    source_res: int = 640
    n_reference: int = 3
    reference_distance: float = 0.55
    snr_shift_images: int = 8
    psi_max: float = 55.0
    theta_max: float = 20.0
    expression_scale: float = 1.0
    expression_pool: int = 192
    background: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    model: ModelSpec = dataclass_field(default_factory=ModelSpec)
    generate: GenerateConfig = dataclass_field(default_factory=GenerateConfig)
    fit: FitConfig = dataclass_field(default_factory=FitConfig)
    uv_resolution: int = 64

    @staticmethod
    def from_toml(path) -> "RunConfig":
        with open(path, "rb") as f:
            data = tomllib.load(f)
        return RunConfig.from_dict(data)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        cfg = RunConfig()
        for key in ("seed", "out_dir", "uv_resolution"):
            if key in data:
                setattr(cfg, key, data[key])
        for section, target in (("model", cfg.model), ("generate", cfg.generate)):
            for key, value in data.get(section, {}).items():
                if not hasattr(target, key):
                    raise ConfigError(f"unknown {section} option {key!r}")
                setattr(target, key, value)
        fit_data = dict(data.get("fit", {}))
        weight_data = fit_data.pop("weights", {})
        for key, value in fit_data.items():
            if not hasattr(cfg.fit, key):
                raise ConfigError(f"unknown fit option {key!r}")
            setattr(cfg.fit, key, value)
        if weight_data:
            base = asdict(cfg.fit.weights)
            for key, value in weight_data.items():
                if key not in base:
                    raise ConfigError(f"unknown loss weight {key!r}")
                base[key] = value
            cfg.fit.weights = AvatarLossWeights(**base)
        return cfg


# ---------------------------------------------------------------------------
# Model and image files


def save_model(path, model: MorphableModel) -> None:
    write_container(path, {
        "kind": "morphable_model",
        "pose_encode_center": [float(x) for x in model.pose_encode_center],
        "pose_encode_scale": float(model.pose_encode_scale),
    }, {
        "template_vertices": model.template_vertices,
        "triangles": model.triangles.astype(np.int64),
        "identity_basis": model.identity_basis,
        "expression_basis": model.expression_basis,
        "uv_coords": model.uv_coords,
        "static_mask": model.static_mask,
    })


def load_model(path) -> MorphableModel:
    meta, arrays = read_container(path)
    if meta.get("kind") != "morphable_model":
        raise ConfigError(f"{path} is not a morphable model file")
    model = MorphableModel(
        template_vertices=arrays["template_vertices"],
        triangles=arrays["triangles"],
        identity_basis=arrays["identity_basis"],
        expression_basis=arrays["expression_basis"],
        uv_coords=arrays["uv_coords"],
        static_mask=arrays["static_mask"],
        pose_encode_center=np.asarray(meta["pose_encode_center"]),
        pose_encode_scale=float(meta["pose_encode_scale"]),
    )
    validate_model(model)
    return model


def resolve_model(config: RunConfig):
    """Load the configured model file, or synthesize one deterministically."""
    if config.model.path:
        return load_model(config.model.path), None
    seed = config.model.seed if config.model.seed is not None else config.seed
    model = synth_model(seed=seed, n_subdiv=config.model.n_subdiv,
                        k_id=config.model.k_id, k_expr=config.model.k_expr)
    return model, seed


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
            "width": cam.width, "height": cam.height}


def camera_from_dict(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=np.asarray(d["rotation"]), translation=np.asarray(d["translation"]),
                  width=d["width"], height=d["height"])


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generate


def _reference_layout(n: int) -> list[tuple[float, float]]:
    """Deterministic reference viewpoints: straight-on first, then spread."""
    base = [(0.0, 0.0), (22.0, 6.0), (-22.0, -5.0), (35.0, -8.0)]
    out = list(base)
    k = 1
    while len(out) < n:
        out.append((-base[k % 4][0] * 0.7, base[k % 4][1] * 0.6))
        k += 1
    return out[:n]


def _reference_camera(model: MorphableModel, config: GenerateConfig,
                      azimuth: float, elevation: float):
    """Source-frame camera for one reference, then its head-framing crop.

    The source frame is deliberately off-center so crops can exit the image
    and exercise outcropping; the returned camera is the crop-adjusted one
    scaled to latent resolution, along with the latent-res outcrop mask.
    """
    src = config.source_res
    center = model.template_vertices.mean(axis=0)
    cam = orbit_camera(center, config.reference_distance, azimuth, elevation,
                       fx=1.05 * src, fy=1.05 * src, cx=0.42 * src, cy=0.55 * src,
                       width=src, height=src)
    mesh = evaluate_mesh(model, np.zeros(model.k_id), np.zeros(model.k_expr))
    spec, adjusted, _ = fit_crop(mesh, cam, target_resolution=config.crop_res)
    latent_cam = adjusted.scaled(config.latent_res / config.crop_res)
    mask = outcrop_mask(spec, src, src, config.latent_res)
    return latent_cam, mask


def cmd_generate(config: RunConfig, out_dir=None, progress=None) -> dict:
    """Run view sampling, conditioning assembly and stochastic I/O sampling;
    write images, conditioning, manifest and sampler trace. Returns the
    manifest dict."""
    gen = config.generate
    out = Path(out_dir if out_dir is not None else config.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "conditioning").mkdir(parents=True, exist_ok=True)

    model, synth_seed = resolve_model(config)
    if config.model.path:
        model_path = Path(config.model.path)
        manifest_model_path = str(model_path)
    else:
        model_path = out / "model.mavc"
        save_model(model_path, model)
        manifest_model_path = "model.mavc"  # relative to the run directory

    root = np.random.SeedSequence(config.seed)
    identity_ss, ref_expr_ss, view_ss, pool_ss, sampler_ss = root.spawn(5)
    beta = np.random.default_rng(identity_ss).uniform(-0.8, 0.8, size=model.k_id)

    # reference views with head-framing crops
    ref_rng = np.random.default_rng(ref_expr_ss)
    denoiser = OracleMeshDenoiser(model, background=gen.background)
    ref_entries = []
    ref_conds = []
    ref_latents = []
    first_camera = None
    for i, (az, el) in enumerate(_reference_layout(gen.n_reference)):
        cam, mask = _reference_camera(model, gen, az, el)
        phi = (np.zeros(model.k_expr) if i == 0
               else ref_rng.uniform(-0.5, 0.5, size=model.k_expr) * gen.expression_scale)
        if first_camera is None:
            first_camera = cam
        cond = assemble_conditioning_set(model, beta, phi, cam, first_camera, True,
                                         gen.latent_res, mask_outcrop=mask)
        img = denoiser.target_image(cond).copy()
        img[mask] = 1.0  # outcropped source regions are padded white
        ref_conds.append(cond)
        ref_latents.append(img)
        ref_entries.append({"name": f"ref_{i:03d}", "role": "reference",
                            "azimuth": az, "elevation": el, "camera": camera_to_dict(cam),
                            "beta": beta.tolist(), "phi": phi.tolist(),
                            "image": f"images/ref_{i:03d}.png",
                            "conditioning": f"conditioning/ref_{i:03d}.mavc"})

    head_center = model.template_vertices.mean(axis=0)
    distance = float(np.linalg.norm(first_camera.center - head_center))
    views = sample_views(gen.n_generated, gen.psi_max, gen.theta_max, distance,
                         seed=int(np.random.default_rng(view_ss).integers(2 ** 31)),
                         center=head_center,
                         fx=first_camera.fx, fy=first_camera.fy,
                         cx=gen.latent_res / 2, cy=gen.latent_res / 2,
                         width=gen.latent_res, height=gen.latent_res)

    pool_rng = np.random.default_rng(pool_ss)
    pool_size = max(gen.expression_pool, gen.n_generated)
    pool = pool_rng.uniform(-gen.expression_scale, gen.expression_scale,
                            size=(pool_size, model.k_expr))
    db = build_expression_database(pool, gen.n_generated, blendshape_weights(model))

    gen_conds = []
    gen_entries = []
    for i, view in enumerate(views):
        phi = db.representatives[i]
        cond = assemble_conditioning_set(model, beta, phi, view.camera, first_camera,
                                         False, gen.latent_res)
        gen_conds.append(cond)
        gen_entries.append({"name": f"gen_{i:03d}", "role": "generated",
                            "azimuth": view.azimuth, "elevation": view.elevation,
                            "camera": camera_to_dict(view.camera),
                            "beta": beta.tolist(), "phi": phi.tolist(),
                            "image": f"images/gen_{i:03d}.png",
                            "conditioning": f"conditioning/gen_{i:03d}.mavc"})

    schedule = shift_snr(make_base_schedule(gen.steps), gen.snr_shift_images)
    sampler_config = SamplerConfig(
        steps=gen.steps, n_generated=gen.n_generated,
        per_pass_generated=min(gen.per_pass_generated, gen.n_generated),
        per_pass_reference=min(gen.per_pass_reference, gen.n_reference),
        cfg_weight=gen.cfg_weight,
        seed=int(np.random.default_rng(sampler_ss).integers(2 ** 31)))
    result = sample_stochastic_io(denoiser, np.stack(ref_latents), ref_conds, gen_conds,
                                  schedule, sampler_config,
                                  latent_shape=(gen.latent_res, gen.latent_res, 3),
                                  progress=progress)

    latent_arrays = {}
    for entry, cond, img in zip(ref_entries, ref_conds, ref_latents):
        save_png(out / entry["image"], img)
        _save_conditioning(out / entry["conditioning"], cond)
        latent_arrays[entry["name"]] = img
    for i, (entry, cond) in enumerate(zip(gen_entries, gen_conds)):
        save_png(out / entry["image"], result.latents[i])
        _save_conditioning(out / entry["conditioning"], cond)
        latent_arrays[entry["name"]] = result.latents[i]
    write_container(out / "latents.mavc", {"kind": "latents"}, latent_arrays)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "seed": config.seed,
        "model": {"path": manifest_model_path, "sha256": _file_sha256(model_path),
                  "synth_seed": synth_seed, "k_id": model.k_id, "k_expr": model.k_expr},
        "sampler": {"steps": gen.steps, "n_generated": gen.n_generated,
                    "per_pass_generated": sampler_config.per_pass_generated,
                    "per_pass_reference": sampler_config.per_pass_reference,
                    "cfg_weight": gen.cfg_weight, "seed": sampler_config.seed,
                    "snr_shift_images": gen.snr_shift_images},
        "latent_res": gen.latent_res,
        "background": gen.background,
        "bounds": {"psi_max": gen.psi_max, "theta_max": gen.theta_max,
                   "distance": distance, "fx": first_camera.fx},
        "expression_database": {"representatives": db.representatives.tolist(),
                                "weights": db.weights.tolist()},
        "views": ref_entries + gen_entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    with open(out / "trace.json", "w") as f:
        json.dump({"seed": sampler_config.seed, "timesteps": result.trace}, f,
                  sort_keys=True, indent=None, separators=(",", ":"))
    return manifest


def export_conditioning_debug(cond, out_dir, stem: str) -> list[Path]:
    """Write per-channel normalized PNG visualizations of a conditioning set."""
    from .conditioning import channel_visualization
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    maps = {"pose": cond.pose_map, "expr": cond.expr_map, "view": cond.view_map,
            "masks": np.stack([cond.mask_outcrop.astype(np.float64),
                               np.full(cond.mask_outcrop.shape,
                                       float(cond.flag_is_reference))], axis=2)}
    for name, channels in maps.items():
        tile = channel_visualization(channels)
        path = out_dir / f"{stem}_{name}.png"
        save_png(path, np.repeat(tile[:, :, None], 3, axis=2))
        written.append(path)
    return written


def _save_conditioning(path, cond) -> None:
    write_container(path, {
        "kind": "conditioning",
        "is_reference": bool(cond.flag_is_reference),
    }, {
        "pose_map": cond.pose_map.astype(np.float32),
        "expr_map": cond.expr_map.astype(np.float32),
        "view_map": cond.view_map.astype(np.float32),
        "mask_outcrop": cond.mask_outcrop,
    })


# ---------------------------------------------------------------------------
# fit


def cmd_fit(config: RunConfig, manifest_path, avatar_path=None,
            log_every: int = 0) -> Path:
    """Fit an avatar to the generated plus reference images of a run."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    run_dir = manifest_path.parent
    model = load_model(_resolve_path(manifest["model"]["path"], run_dir))

    _, latent_arrays = read_container(run_dir / "latents.mavc")
    views = []
    for entry in manifest["views"]:
        image = latent_arrays.get(entry["name"])
        if image is None:
            raise ConfigError(f"latent for view {entry['name']} missing from latents.mavc")
        views.append(TrainView(image=image, camera=camera_from_dict(entry["camera"]),
                               beta=np.asarray(entry["beta"]), phi=np.asarray(entry["phi"])))

    uv_mesh = remesh_to_uv(model, config.uv_resolution)
    config.fit.background = manifest.get("background", config.fit.background)
    result = fit_avatar(model, uv_mesh, views, config.fit, log_every=log_every)

    out = Path(avatar_path) if avatar_path is not None else run_dir / "avatar.mavc"
    save_avatar(out, model, config, manifest, result)
    _write_loss_csv(out.with_suffix(".losses.csv"), result.history)
    return out


def _resolve_path(p, base: Path) -> Path:
    p = Path(p)
    if p.is_absolute() and p.exists():
        return p
    if (base / p.name).exists():
        return base / p.name
    return p


def _write_loss_csv(path, history: list[dict]) -> None:
    if not history:
        with open(path, "w", newline="") as f:
            f.write("")
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def save_avatar(path, model: MorphableModel, config: RunConfig, manifest: dict,
                result: FitResult) -> None:
    arrays = {f"splats.{k}": v for k, v in result.splats.to_arrays().items()}
    for key, value in result.field.state_dict().items():
        arrays[f"field.{key}"] = value.detach().cpu().numpy()
    arrays.update({
        "model.template_vertices": model.template_vertices,
        "model.triangles": model.triangles.astype(np.int64),
        "model.identity_basis": model.identity_basis,
        "model.expression_basis": model.expression_basis,
        "model.uv_coords": model.uv_coords,
        "model.static_mask": model.static_mask,
        "db.representatives": np.asarray(manifest["expression_database"]["representatives"]),
        "db.weights": np.asarray(manifest["expression_database"]["weights"]),
        "init.local_pos": result.init_state.local_pos.detach().cpu().numpy(),
        "init.rotation": result.init_state.rotation.detach().cpu().numpy(),
    })
    beta = manifest["views"][0]["beta"]
    meta = {
        "kind": "avatar",
        "format_version": MANIFEST_VERSION,
        "sh_degree": result.splats.sh_degree,
        "uv_resolution": config.uv_resolution,
        "k_expr": model.k_expr,
        "k_id": model.k_id,
        "beta": beta,
        "background": manifest.get("background", 1.0),
        "latent_res": manifest.get("latent_res", 64),
        "bounds": manifest.get("bounds", {"psi_max": 55.0, "theta_max": 20.0,
                                          "distance": 0.55}),
        "pose_encode_center": [float(x) for x in model.pose_encode_center],
        "pose_encode_scale": float(model.pose_encode_scale),
        "fitting": {"iterations": config.fit.iterations,
                    "n_splats": result.splats.n_splats,
                    "final_loss": result.history[-1]["total"] if result.history else None},
    }
    write_container(path, meta, arrays)


# ---------------------------------------------------------------------------
# avatar runtime (render command + HTTP service)


class AvatarRuntime:
    """Immutable fitted avatar: loads once, renders concurrently."""

    def __init__(self, path):
        meta, arrays = read_container(path)
        if meta.get("kind") != "avatar":
            raise ConfigError(f"{path} is not an avatar file")
        self.meta = meta
        self.model = MorphableModel(
            template_vertices=arrays["model.template_vertices"],
            triangles=arrays["model.triangles"],
            identity_basis=arrays["model.identity_basis"],
            expression_basis=arrays["model.expression_basis"],
            uv_coords=arrays["model.uv_coords"],
            static_mask=arrays["model.static_mask"],
            pose_encode_center=np.asarray(meta["pose_encode_center"]),
            pose_encode_scale=float(meta["pose_encode_scale"]),
        )
        self.uv_mesh = remesh_to_uv(self.model, int(meta["uv_resolution"]))
        splat_arrays = {k.split(".", 1)[1]: v for k, v in arrays.items()
                        if k.startswith("splats.")}
        self.splats = SplatSet.from_arrays(splat_arrays, sh_degree=int(meta["sh_degree"]))
        self.field = MlpDeformationField(dtype=torch.float64)
        state = {k.split(".", 1)[1]: torch.as_tensor(v) for k, v in arrays.items()
                 if k.startswith("field.")}
        self.field.load_state_dict(state)
        self.db_representatives = arrays["db.representatives"]
        self.db_weights = arrays["db.weights"]
        self.beta = np.asarray(meta["beta"], dtype=np.float64)
        self.bounds = meta["bounds"]
        self.background = float(meta.get("background", 1.0))
        self.latent_res = int(meta.get("latent_res", 64))
        self.k_expr = int(meta["k_expr"])
        self._triangles = torch.as_tensor(self.uv_mesh.triangles, dtype=torch.int64)
        self._static = torch.as_tensor(self.uv_mesh.static_mask)
        self._encoding = None

    def clamp_orbit(self, azimuth: float, elevation: float):
        """Project (azimuth, elevation) onto the generation-time ellipse."""
        psi_max = float(self.bounds["psi_max"])
        theta_max = float(self.bounds["theta_max"])
        if inside_ellipse(azimuth, elevation, psi_max, theta_max):
            return azimuth, elevation, False
        r = np.sqrt((azimuth / psi_max) ** 2 + (elevation / theta_max) ** 2)
        s = 0.999 / r
        return azimuth * s, elevation * s, True

    def camera_for(self, azimuth: float, elevation: float, width: int, height: int) -> Camera:
        # generation-time intrinsics, rescaled to the requested output size
        fx = float(self.bounds.get("fx", 1.35 * self.latent_res)) * (width / self.latent_res)
        center = self.model.template_vertices.mean(axis=0)
        return orbit_camera(center, float(self.bounds["distance"]), azimuth, elevation,
                            fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)

    def render(self, phi, azimuth: float = 0.0, elevation: float = 0.0,
               width: int | None = None, height: int | None = None) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64).reshape(-1)
        if phi.shape[0] != self.k_expr:
            raise ConfigError(f"phi has length {phi.shape[0]}, expected {self.k_expr}")
        if not np.all(np.isfinite(phi)):
            raise ConfigError("phi contains non-finite values")
        width = width or self.latent_res
        height = height or self.latent_res
        azimuth, elevation, _ = self.clamp_orbit(azimuth, elevation)
        cam = self.camera_for(azimuth, elevation, width, height)
        base = torch.as_tensor(evaluate_uv_vertices(self.model, self.uv_mesh, self.beta, phi))
        off, enc = deformation_inputs(self.model, self.uv_mesh, phi)
        with torch.no_grad():
            d_uv = self.field(torch.as_tensor(off), torch.as_tensor(enc))
            verts = apply_deformation(base, d_uv, self._static)
            img = render_splats(self.splats, verts, self._triangles, cam, height, width,
                                background=self.background)
        return np.clip(img.numpy(), 0.0, 1.0)


def cmd_render(avatar_path, phi, azimuth: float, elevation: float,
               width: int, height: int, out_path) -> Path:
    """Deterministic single-frame render of a fitted avatar to PNG."""
    runtime = AvatarRuntime(avatar_path)
    img = runtime.render(phi, azimuth, elevation, width, height)
    out = Path(out_path)
    save_png(out, img)
    return out
