import json

import pytest
import torch
from click.testing import CliRunner

from morphavatar.cli import main
from morphavatar.pipeline import load_model, load_png

torch.set_num_threads(2)

CONFIG = """
seed = 4
uv_resolution = 16
[model]
n_subdiv = 1
k_id = 4
k_expr = 6
[generate]
n_generated = 4
per_pass_generated = 2
per_pass_reference = 1
steps = 10
cfg_weight = 1.0
latent_res = 40
n_reference = 2
expression_pool = 32
[fit]
iterations = 40
n_splats = 400
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.toml").write_text(CONFIG)
    return d


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


class TestCli:
    def test_synth_model(self, runner, workdir):
        out = workdir / "model.mavc"
        result = runner.invoke(main, ["synth-model", "--config", str(workdir / "cfg.toml"),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        model = load_model(out)
        assert model.k_expr == 6

    def test_generate_fit_render(self, runner, workdir):
        run_dir = workdir / "run"
        result = runner.invoke(main, ["generate", "--config", str(workdir / "cfg.toml"),
                                      "--out", str(run_dir), "--quiet"])
        assert result.exit_code == 0, result.output
        assert (run_dir / "manifest.json").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["sampler"]["steps"] == 10

        result = runner.invoke(main, ["fit", "--config", str(workdir / "cfg.toml"),
                                      "--manifest", str(run_dir / "manifest.json")])
        assert result.exit_code == 0, result.output
        avatar = run_dir / "avatar.mavc"
        assert avatar.exists()

        frame = workdir / "frame.png"
        result = runner.invoke(main, ["render", "--avatar", str(avatar),
                                      "--azimuth", "8", "--elevation", "-3",
                                      "--width", "64", "--height", "64",
                                      "--out", str(frame)])
        assert result.exit_code == 0, result.output
        assert load_png(frame).shape == (64, 64, 3)

    def test_render_rejects_bad_phi_length(self, runner, workdir):
        avatar = workdir / "run" / "avatar.mavc"
        out = workdir / "nope.png"
        result = runner.invoke(main, ["render", "--avatar", str(avatar),
                                      "--phi", "[0.0, 0.0]", "--out", str(out)])
        assert result.exit_code != 0
        assert not out.exists()

    def test_seed_override_changes_outputs(self, runner, workdir):
        a = workdir / "seed_a"
        b = workdir / "seed_b"
        for out, seed in ((a, "7"), (b, "8")):
            result = runner.invoke(main, ["generate", "--config", str(workdir / "cfg.toml"),
                                          "--out", str(out), "--seed", seed, "--quiet"])
            assert result.exit_code == 0, result.output
        la = (a / "latents.mavc").read_bytes()
        lb = (b / "latents.mavc").read_bytes()
        assert la != lb
