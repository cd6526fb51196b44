import csv
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_mlp
from memo.cli import emit_curve_data, main, run_experiment
from memo.config import SCHEMA, Phase, parse_config, parse_text
from memo.envs import EnvConfig, RunningNormalizer
from memo.errors import AggregationError, ConfigError, MissingKeyError, MissingPrerequisite, ParseError, UnknownKeyError
from memo.transfer import make_checkpoint, save_checkpoint

MINIMAL = "phase = TrainExpert\n[env]\nenv_kind = crawler\ncounts = 3, 3\n"

SMALL_POLICY = """
[policy]
kind = modular
D = 4
module_hidden = 8
"""
SMALL_RL = """
[rl]
total_timesteps = 256
num_envs = 2
batch_size = 64
epochs = 2
"""
SMALL_ENV = "[env]\nenv_kind = crawler\ncounts = 3, 3\nepisode_len = 16\n"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_are_populated():
    cfg = parse_text(MINIMAL)
    ppo = cfg.ppo
    assert (ppo.gamma, ppo.clip, ppo.value_coef, ppo.gae_lambda, ppo.lr) == (0.995, 0.2, 0.5, 0.95, 3e-4)
    assert cfg.seeds == [0] and cfg.deterministic and cfg.policy_kind == "mlp"
    assert cfg.env_config().init_noise == 0.05 and cfg.arch.D == 32
    assert set(cfg.sections) == {"env", "policy", "rl"}


def test_unknown_key_is_named():
    with pytest.raises(UnknownKeyError, match="gama"):
        parse_text(MINIMAL + "[rl]\ngama = 0.9\n")
    with pytest.raises(UnknownKeyError):
        parse_text(MINIMAL + "[il]\nexpert = x\n")  # section not used by this phase
    with pytest.raises(UnknownKeyError):
        parse_text(MINIMAL + "[bogus]\n")


def test_round_trip():
    cfg = parse_text("seeds = 3, 4\n" + MINIMAL + SMALL_POLICY + SMALL_RL)
    again = parse_text(cfg.serialize())
    assert again == cfg and again.serialize() == cfg.serialize() and again.seeds == [3, 4]


def test_parse_error_line_number():
    with pytest.raises(ParseError) as info:
        parse_text(MINIMAL + "[rl]\nepochs = ten\n")
    assert info.value.line == 6
    with pytest.raises(ParseError) as info:
        parse_text("phase = TrainExpert\nthis line has no equals\n")
    assert info.value.line == 2


def test_missing_and_inconsistent():
    with pytest.raises(MissingKeyError):
        parse_text("phase = TrainExpert\n[env]\nenv_kind = crawler\n")
    with pytest.raises(MissingKeyError):
        parse_text("phase = PretrainModules\n" + SMALL_ENV)
    with pytest.raises(MissingKeyError):
        parse_text("[env]\nenv_kind = crawler\ncounts = 3, 3\n")
    with pytest.raises(ConfigError):
        parse_text(MINIMAL, Phase.TRANSFER)
    with pytest.raises(ConfigError):
        parse_text("seeds = \n" + MINIMAL)
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/memo.cfg")


def test_hash_ignores_seeds_and_output():
    a = parse_text("seeds = 1\noutput_dir = a\n" + MINIMAL)
    b = parse_text("seeds = 2, 3\noutput_dir = b\n" + MINIMAL)
    c = parse_text(MINIMAL + "[rl]\nclip = 0.3\n")
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert a.run_id(1) == a.config_hash()[:12] + "-s1"


KNOWN = {k for sec in SCHEMA.values() for k in sec}


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["", "[env]", "[rl]", "[policy]"]),
       st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12).filter(lambda k: k not in KNOWN))
def test_fuzzed_unknown_keys_always_error(section, key):
    if section == "":
        text = MINIMAL.replace("[env]", f"{key} = 1\n[env]")
    elif section == "[env]":
        text = MINIMAL + f"{key} = 1\n"
    else:
        text = MINIMAL + f"{section}\n{key} = 1\n"
    with pytest.raises(UnknownKeyError):
        parse_text(text)


def expert_config(tmp_path, seeds="0"):
    return write(tmp_path, "expert.cfg", f"phase = TrainExpert\nseeds = {seeds}\noutput_dir = {tmp_path}/expert\n"
                 + SMALL_ENV + SMALL_POLICY + SMALL_RL)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train-expert", "--config", str(write(tmp_path, "bad.cfg", MINIMAL + "[rl]\ngama = 1\n"))]) == 2
    assert main(["train-expert", "--config", str(tmp_path / "missing.cfg")]) == 2
    pre = write(tmp_path, "pre.cfg", f"phase = PretrainModules\noutput_dir = {tmp_path}/pre\n" + SMALL_ENV
                + f"[il]\nexpert = {tmp_path}/nowhere\n")
    assert main(["pretrain", "--config", str(pre)]) == 3
    cfg = parse_config(pre)
    with pytest.raises(MissingPrerequisite):
        run_experiment(cfg)
    tr = write(tmp_path, "tr.cfg", "phase = Transfer\n" + SMALL_ENV + f"[transfer]\nsource = {tmp_path}/none\n")
    assert main(["transfer", "--config", str(tr), "--out", str(tmp_path / "t")]) == 3


def test_cli_diverged_exit_code(tmp_path):
    cfg = expert_config(tmp_path)
    cfg.write_text(cfg.read_text().replace("epochs = 2", "epochs = 2\nlr = 1e300\nmax_grad_norm = 1e300"))
    assert main(["train-expert", "--config", str(cfg)]) == 4


def test_three_seeds_and_full_pipeline(tmp_path):
    assert main(["train-expert", "--config", str(expert_config(tmp_path, "0, 1, 2"))]) == 0
    root = tmp_path / "expert"
    runs = sorted(p for p in root.iterdir() if p.is_dir())
    assert len(runs) == 3 and len({p.name for p in runs}) == 3
    digest = (root / "config.hash").read_text()
    for run in runs:
        assert (run / "config.hash").read_text() == digest
        assert {"metrics.csv", "policy.memockpt", "summary.json", "config.txt"} <= {p.name for p in run.iterdir()}
        rows = list(csv.DictReader(open(run / "metrics.csv")))
        assert [int(r["step"]) for r in rows] == list(range(len(rows)))
        assert all(int(a["env_steps"]) < int(b["env_steps"]) for a, b in zip(rows, rows[1:]))
    expert_dir = root / "*-s{seed}"

    il = write(tmp_path, "il.cfg", f"phase = PretrainModules\noutput_dir = {tmp_path}/il\n" + SMALL_ENV
               + "[policy]\nkind = modular\nD = 4\nmodule_hidden = 8\n"
               + f"[il]\nexpert = {expert_dir}\ndagger_iterations = 2\nepochs_per_iteration = 1\n"
               + "validation_episodes = 1\nvalidate = false\n")
    assert main(["pretrain", "--config", str(il)]) == 0
    rows = list(csv.DictReader(open(next((tmp_path / "il").glob("*-s0")) / "metrics.csv")))
    assert rows[-1]["validation_score"] != "" and all(r["ratio"] != "" for r in rows[:-1])

    tr = write(tmp_path, "tr.cfg", f"phase = Transfer\noutput_dir = {tmp_path}/tr\n"
               + "[env]\nenv_kind = crawler\ncounts = 5, 5\nepisode_len = 16\n"
               + f"[transfer]\nsource = {tmp_path}/il/*-s{{seed}}\n" + SMALL_RL)
    assert main(["transfer", "--config", str(tr)]) == 0

    an = write(tmp_path, "an.cfg", f"phase = Analyze\noutput_dir = {tmp_path}/an\n"
               + f"[analyze]\ncheckpoint = {tmp_path}/il/*-s{{seed}}\nnum_trajectories = 2\n")
    assert main(["analyze", "--config", str(an)]) == 0
    run = next((tmp_path / "an").glob("*-s0"))
    values = [float(r["value"]) for r in csv.DictReader(open(run / "spectra.csv"))]
    assert values and all(0.0 <= v <= 1.0 for v in values)
    hist = list(csv.DictReader(open(run / "histogram.csv")))
    assert len(hist) == 20 and sum(int(r["count"]) for r in hist) == len(values)

    # analyzing an MLP policy is a type error, reported with the generic failure code
    save_checkpoint(make_checkpoint(make_mlp(), RunningNormalizer(37), EnvConfig("crawler", (3, 3))),
                    tmp_path / "mlp.memockpt")
    bad = write(tmp_path, "an2.cfg", f"phase = Analyze\n[analyze]\ncheckpoint = {tmp_path}/mlp.memockpt\n")
    assert main(["analyze", "--config", str(bad), "--out", str(tmp_path / "an2")]) == 1


def metrics_file(path, steps, rewards):
    with open(path, "w") as f:
        f.write("env_steps,reported_reward\n")
        for s, r in zip(steps, rewards):
            f.write(f"{s},{float(r)!r}\n")
    return str(path)


def test_curves_statistics(tmp_path):
    a = metrics_file(tmp_path / "a.csv", [10, 20], [1.0, 5.0])
    grid, stats = emit_curve_data([a, a, a])
    assert np.all(stats["reported_reward"][1] == 0) and list(grid) == [10, 20]
    b = metrics_file(tmp_path / "b.csv", [10, 20], [3.0, 5.0])
    _, stats = emit_curve_data([a, b])
    assert stats["reported_reward"][0][0] == 2.0
    assert stats["reported_reward"][1][0] == pytest.approx(1.4142136, abs=1e-7)

    rng = np.random.default_rng(0)
    vals = rng.normal(size=(3, 4))
    paths = [metrics_file(tmp_path / f"r{i}.csv", [1, 2, 3, 4], vals[i]) for i in range(3)]
    out = tmp_path / "agg.csv"
    assert main(["curves", *paths, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    for j, row in enumerate(rows):
        col = list(vals[:, j])
        assert abs(float(row["reported_reward_mean"]) - statistics.fmean(col)) < 1e-12
        assert abs(float(row["reported_reward_std"]) - statistics.stdev(col)) < 1e-12


def test_curves_grid_mismatch(tmp_path):
    a = metrics_file(tmp_path / "a.csv", [10, 20], [1.0, 2.0])
    b = metrics_file(tmp_path / "b.csv", [10, 30], [1.0, 2.0])
    with pytest.raises(AggregationError):
        emit_curve_data([a, b])
    assert main(["curves", a, b, "--out", str(tmp_path / "o.csv")]) == 1


@pytest.mark.parametrize("name,phase", [("expert", "TrainExpert"), ("pretrain", "PretrainModules"),
                                        ("transfer", "Transfer"), ("analyze", "Analyze")])
def test_shipped_configs_parse(name, phase):
    from pathlib import Path
    cfg = parse_config(Path(__file__).parent.parent / "configs" / f"{name}.cfg", phase)
    assert cfg.phase.value == phase and parse_text(cfg.serialize()) == cfg
