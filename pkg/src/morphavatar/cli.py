"""Command-line interface: synth-model | generate | fit | render | serve.

``MORPHAVATAR_THREADS`` caps internal parallelism (torch thread pool).
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .pipeline import (RunConfig, cmd_fit, cmd_generate, cmd_render, resolve_model,
                       save_model)


def _apply_thread_cap():
    cap = os.environ.get("MORPHAVATAR_THREADS")
    if cap:
        import torch
        torch.set_num_threads(max(1, int(cap)))


def _load_config(config_path, seed, out) -> RunConfig:
    cfg = RunConfig.from_toml(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


@click.group()
def main():
    """Morphable avatar pipeline."""
    _apply_thread_cap()


@main.command("synth-model")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default="model.mavc", show_default=True)
def synth_model_cmd(config_path, seed, out):
    """Generate a procedural morphable model file."""
    cfg = _load_config(config_path, seed, None)
    model, used_seed = resolve_model(cfg)
    save_model(out, model)
    click.echo(f"wrote {out} ({model.n_vertices} vertices, seed {used_seed})")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--quiet", is_flag=True, default=False)
def generate(config_path, seed, out, quiet):
    """Sample views and expressions, run the diffusion sampler, write images."""
    cfg = _load_config(config_path, seed, out)
    total = cfg.generate.steps

    def progress(t):
        if not quiet and (t % 25 == 0 or t == 1):
            click.echo(f"  timestep {t}/{total}", err=True)

    manifest = cmd_generate(cfg, progress=progress)
    click.echo(f"generated {cfg.generate.n_generated} views into {cfg.out_dir} "
               f"(T={manifest['sampler']['steps']})")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Avatar file path.")
@click.option("--log-every", type=int, default=0)
def fit(config_path, manifest_path, seed, out, log_every):
    """Fit a splat avatar to a generated run."""
    cfg = _load_config(config_path, seed, None)
    path = cmd_fit(cfg, manifest_path, avatar_path=out, log_every=log_every)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--avatar", type=click.Path(exists=True), required=True)
@click.option("--phi", type=str, default=None,
              help="JSON array of expression coefficients; zeros if omitted.")
@click.option("--azimuth", type=float, default=0.0)
@click.option("--elevation", type=float, default=0.0)
@click.option("--width", type=int, default=256)
@click.option("--height", type=int, default=256)
@click.option("--out", type=click.Path(), default="render.png", show_default=True)
def render(avatar, phi, azimuth, elevation, width, height, out):
    """Render one frame of a fitted avatar."""
    from .pipeline import AvatarRuntime
    runtime = AvatarRuntime(avatar)
    values = np.zeros(runtime.k_expr) if phi is None else np.asarray(json.loads(phi))
    try:
        cmd_render(avatar, values, azimuth, elevation, width, height, out)
    except Exception as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--avatar", type=click.Path(exists=True), required=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8421, show_default=True)
@click.option("--ui-dir", type=click.Path(), default=None,
              help="Static viewer bundle to serve under /ui.")
def serve(avatar, host, port, ui_dir):
    """Run the HTTP render service."""
    from .service import serve as run_service
    run_service(avatar, host=host, port=port, ui_dir=ui_dir)


if __name__ == "__main__":
    main()
