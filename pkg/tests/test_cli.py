"""End-to-end checks of the stage driver: a tiny pipeline run, manifest
integrity, rerun determinism, and the exit-code contract of main()."""

import hashlib
import os

import pytest

from uepo import cli
from uepo.config import parse_config

SMOKE = """
env.name = point_mass
env.sigma_env = 0.05
env.n_traj = 12
diffusion.T = 8
diffusion.widths = 32,32
diffusion.train_steps = 300
diffusion.beta_max = 0.2
ensemble.n = 3
ensemble.n_states = 2
filter.epsilon = 1.0
filter.max_attempts = 400
dynamics.epochs = 120
distill.pool = 80
distill.epochs = 150
ppo.iterations = 2
ppo.batch_episodes = 4
eval.episodes = 4
seed = 3
"""


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read_manifest(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """All nine stages run once into a shared directory."""
    out = tmp_path_factory.mktemp("pipeline")
    cfg = parse_config(SMOKE + f"out = {out}\n")
    for stage in cli.STAGES:
        cli.run_stage(stage, cfg)
    return cfg, str(out)


def test_all_artifacts_present(pipeline):
    _, out = pipeline
    expected = ["dataset.jsonl", "policy.bin", "diffusion_loss.csv",
                "ensemble_actions.csv", "ensemble_div.csv",
                "dynamics_init.bin", "augmented.jsonl", "augment_report.txt",
                "kl_hist.csv", "dynamics_joint.bin", "dynamics_loss.csv",
                "selection.txt", "selection_scores.csv", "head.bin",
                "finetune_curve.csv", "distill.txt", "eval.csv", "eval.txt",
                "div_check.txt"]
    for name in expected:
        assert os.path.isfile(os.path.join(out, name)), name
    for stage in cli.STAGES:
        assert os.path.isfile(os.path.join(out, f"{stage}.manifest"))
        assert os.path.isfile(os.path.join(out, f"{stage}.time.txt"))
    # the lock is released even on success
    assert not os.path.exists(os.path.join(out, ".lock"))


def test_manifest_header_fields(pipeline):
    cfg, out = pipeline
    for stage in cli.STAGES:
        m = _read_manifest(os.path.join(out, f"{stage}.manifest"))
        assert m["stage"] == stage
        assert m["config_hash"] == cfg.config_hash()
        assert m["seed"] == "3"


def test_manifest_hashes_match_files(pipeline):
    _, out = pipeline
    for stage in cli.STAGES:
        m = _read_manifest(os.path.join(out, f"{stage}.manifest"))
        for key, digest in m.items():
            if key.startswith(("input.", "output.")):
                name = key.split(".", 1)[1]
                assert _sha(os.path.join(out, name)) == digest, (stage, name)


def test_manifest_chain(pipeline):
    """Every stage input hash equals some earlier stage's output hash."""
    _, out = pipeline
    produced = {}
    for stage in cli.STAGES:
        m = _read_manifest(os.path.join(out, f"{stage}.manifest"))
        for key, digest in m.items():
            if key.startswith("input."):
                name = key.split(".", 1)[1]
                assert produced.get(name) == digest, (stage, name)
        for key, digest in m.items():
            if key.startswith("output."):
                produced[key.split(".", 1)[1]] = digest


def test_selection_and_eval_contents(pipeline):
    cfg, out = pipeline
    sel = _read_manifest(os.path.join(out, "selection.txt"))
    assert int(sel["n_members"]) == cfg["ensemble.n"]
    assert 0 <= int(sel["best_index"]) < cfg["ensemble.n"]
    ev = _read_manifest(os.path.join(out, "eval.txt"))
    assert int(ev["episodes"]) == cfg["eval.episodes"]
    float(ev["mean_return"])  # parses


def test_div_check_reports_ok(pipeline):
    _, out = pipeline
    m = _read_manifest(os.path.join(out, "div_check.txt"))
    assert m["status"] == "ok"
    assert float(m["fixture_div"]) == 0.75


def test_rerun_is_byte_identical(pipeline):
    cfg, out = pipeline
    before = {n: _sha(os.path.join(out, n))
              for n in ("dataset.jsonl", "gen-data.manifest", "div_check.txt")}
    cli.run_stage("gen-data", cfg)
    cli.run_stage("div-check", cfg)
    for name, digest in before.items():
        assert _sha(os.path.join(out, name)) == digest, name


def test_seed_flows_into_outputs(pipeline, tmp_path):
    """A different --seed must change the data, not just the manifest."""
    cfg, out = pipeline
    other = cfg.replaced(seed=4, out=str(tmp_path))
    cli.run_stage("gen-data", other)
    m = _read_manifest(tmp_path / "gen-data.manifest")
    assert m["seed"] == "4"
    assert _sha(tmp_path / "dataset.jsonl") != _sha(os.path.join(out, "dataset.jsonl"))


def test_unknown_stage_rejected(pipeline):
    cfg, _ = pipeline
    from uepo.errors import ConfigError
    with pytest.raises(ConfigError, match="unknown stage"):
        cli.run_stage("polish", cfg)


def test_missing_input_names_producer(tmp_path):
    cfg = parse_config(f"out = {tmp_path}\n")
    from uepo.errors import MissingArtifactError
    with pytest.raises(MissingArtifactError, match="run the gen-data stage first"):
        cli.run_stage("train-diffusion", cfg)
    # the failed run still removed its lock
    assert not os.path.exists(tmp_path / ".lock")


def test_lock_file_blocks_concurrent_stage(tmp_path):
    cfg = parse_config(f"out = {tmp_path}\n")
    os.makedirs(tmp_path, exist_ok=True)
    (tmp_path / ".lock").write_text("12345\n")
    with pytest.raises(RuntimeError, match="lock file"):
        cli.run_stage("div-check", cfg)
    # a stale lock is left for the operator to inspect, not auto-removed
    assert (tmp_path / ".lock").exists()


# --- main() exit codes -------------------------------------------------------


def _write_cfg(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_main_success_and_out_override(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, "seed = 1\n")
    out = tmp_path / "elsewhere"
    code = cli.main(["div-check", "--config", cfg_path, "--out", str(out)])
    assert code == 0
    assert (out / "div_check.txt").exists()
    assert "status = ok" in capsys.readouterr().out


def test_main_seed_override(tmp_path):
    cfg_path = _write_cfg(tmp_path, "seed = 1\n")
    out = tmp_path / "o"
    assert cli.main(["div-check", "--config", cfg_path, "--seed", "9",
                     "--out", str(out)]) == 0
    m = _read_manifest(out / "div-check.manifest")
    assert m["seed"] == "9"


def test_main_bad_config_key_is_exit_1(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, "diffusion.kk = 3\n")
    assert cli.main(["div-check", "--config", cfg_path]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_main_missing_config_file_is_exit_1(tmp_path, capsys):
    assert cli.main(["div-check", "--config", str(tmp_path / "none.cfg")]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_main_bogus_stage_is_exit_1(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, "seed = 1\n")
    assert cli.main(["polish", "--config", cfg_path]) == 1
    capsys.readouterr()


def test_main_missing_artifact_is_exit_2(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, f"out = {tmp_path / 'empty'}\n")
    assert cli.main(["select", "--config", cfg_path]) == 2
    err = capsys.readouterr().err
    assert "missing input" in err and "gen-data" in err


def test_main_help_is_exit_0(capsys):
    assert cli.main(["--help"]) == 0
    assert "uepo" in capsys.readouterr().out


def test_console_script_wired():
    import importlib.metadata as md
    eps = md.entry_points(group="console_scripts")
    targets = {ep.name: ep.value for ep in eps}
    assert targets.get("uepo") == "uepo.cli:main"


def test_gen_data_coverage_gap_split(tmp_path):
    cfg = parse_config("env.n_traj = 8\nenv.coverage_gap = true\n"
                       f"out = {tmp_path}\nseed = 5\n")
    cli.run_stage("gen-data", cfg)
    assert (tmp_path / "dataset.jsonl").exists()
    assert (tmp_path / "gap.jsonl").exists()
    m = _read_manifest(tmp_path / "gen-data.manifest")
    assert "output.gap.jsonl" in m
