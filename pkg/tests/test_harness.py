import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecim.ablation import (
    RunSummary,
    ablation_report,
    aggregate,
    run_ablation_suite,
    steps_to_r,
    threshold_for,
    trend_checks,
)
from ecim.cli import main
from ecim.config import (
    VARIANTS,
    TrainConfig,
    apply_variant,
    dump_config,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from ecim.errors import ConfigError
from ecim.experiment import EVAL_LOG_COLUMNS, TRAIN_LOG_COLUMNS, load_policy, run_experiment
from ecim.metrics import load_reference_tables
from ecim.numkit import load_checkpoint
from ecim.policy_opt import PpoCoeffs
from ecim.report import ReportError, emit_report


def tiny(**kw):
    base = TrainConfig(n_envs=2, rollout_steps=16, iterations=2, eval_interval=1,
                       eval_episodes=1, net=replace(TrainConfig().net, hidden=(8, 8)),
                       ppo=PpoCoeffs(epochs=1, minibatches=2))
    base = replace(base, env=replace(base.env, horizon=20))
    return replace(base, **kw).validate()


# -- config -----------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = tiny(variant="ecim_minus_mcrf", terrain="rough", seeds=(3, 4))
    save_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_default_config_round_trip():
    cfg = TrainConfig()
    assert from_dict(json.loads(dump_config(cfg))) == cfg


@pytest.mark.parametrize("data, needle", [
    ({"itrations": 3}, "itrations"),
    ({"ppo": {"clipp": 0.1}}, "ppo.clipp"),
    ({"iterations": 0}, "iterations"),
    ({"seeds": []}, "seeds"),
    ({"variant": "sac"}, "variant"),
    ({"n_envs": "four"}, "n_envs"),
])
def test_config_rejects_bad_input(data, needle):
    with pytest.raises(ConfigError, match=needle):
        from_dict(data)


def test_load_config_rejects_malformed(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_apply_variant_settings():
    cfg = TrainConfig()
    assert apply_variant(cfg, "ecim") == cfg
    ppo = apply_variant(cfg, "ppo")
    assert ppo.entropy.schedule == "fixed" and ppo.entropy.fixed_beta == 0.01
    assert ppo.smooth.lambda_t == ppo.smooth.lambda_s == 0.0
    assert ppo.intrinsic.eta_icm == ppo.intrinsic.eta_rnd == ppo.intrinsic.eta_cnt == 0.0
    a = apply_variant(cfg, "ecim_minus_aecpom")
    assert a.entropy.schedule == "fixed" and a.smooth == cfg.smooth and a.intrinsic == cfg.intrinsic
    m = apply_variant(cfg, "ecim_minus_mcrf")
    assert m.smooth.lambda_t == 0.0 and m.entropy == cfg.entropy and m.intrinsic == cfg.intrinsic
    i = apply_variant(cfg, "ecim_minus_imdeem")
    assert i.intrinsic.eta_cnt == 0.0 and i.entropy == cfg.entropy and i.smooth == cfg.smooth
    with pytest.raises(ConfigError):
        apply_variant(cfg, "nope")


@given(st.sampled_from(VARIANTS), st.sampled_from(VARIANTS))
def test_apply_variant_idempotent(v, start):
    cfg = replace(TrainConfig(), variant=start)
    once = apply_variant(cfg, v)
    assert apply_variant(once) == once
    assert apply_variant(once, v) == once


# -- single runs ------------------------------------------------------------


def test_run_experiment_smoke(tmp_path):
    cfg = tiny(iterations=1, n_envs=1)
    art = run_experiment(cfg, 0, tmp_path / "run")
    rows = list(csv.DictReader(open(tmp_path / "run" / "train_log.csv")))
    assert len(rows) == 1 and list(rows[0]) == TRAIN_LOG_COLUMNS
    with open(tmp_path / "run" / "eval_log.csv") as fh:
        assert next(csv.reader(fh)) == EVAL_LOG_COLUMNS
    state = load_checkpoint(tmp_path / "run" / "checkpoint.npz")
    assert state and all(np.all(np.isfinite(v)) for v in state.values())
    ac = load_policy(tmp_path / "run", cfg)
    for a, b in zip(ac.params(), art.trainer.ac.params()):
        assert np.array_equal(a, b)
    assert load_config(tmp_path / "run" / "config.json") == cfg
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert metrics["seed"] == 0 and "reward" in metrics["final"]


def test_run_experiment_is_deterministic(tmp_path):
    cfg = tiny(terrain="rough", iterations=3)
    run_experiment(cfg, 7, tmp_path / "a")
    run_experiment(cfg, 7, tmp_path / "b")
    for name in ("train_log.csv", "eval_log.csv", "episodes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = run_experiment(cfg, 8)
    first = run_experiment(cfg, 7)
    assert other.train_log != first.train_log


def test_minus_mcrf_keeps_scheduler_running():
    cfg = apply_variant(tiny(iterations=4, rollout_steps=40), "ecim_minus_mcrf")
    art = run_experiment(cfg, 0)
    assert all(r["l_t_term"] == 0.0 and r["l_s_term"] == 0.0 for r in art.train_log)
    assert any(len(w) > 0 for w in art.return_windows)
    assert art.trainer.scheduler.r_mean is not None


def test_ppo_combined_reward_is_extrinsic():
    art = run_experiment(apply_variant(tiny(), "ppo"), 0, keep_rewards=True)
    batch = art.trainer.last_batch
    assert np.array_equal(art.combined_rewards[-1], batch.rewards)


# -- ablation suite ---------------------------------------------------------


def fake_summary(variant, terrain, seed, value, returns=(1.0, 2.0, 3.0)):
    final = {k: value for k in ("reward", "pitch_rms", "acc_rms", "torque_rms", "joint_acc_rms",
                                "action_diff_rms", "best_reward", "first_reward")}
    return RunSummary(variant, terrain, seed, final, list(returns), [1, 2, 3], 3,
                      steps_per_iteration=100)


def stub_run(job):
    cfg, variant, label, seed, _ = job
    value = 10.0 * (list(VARIANTS).index(variant) + 1) + seed + (0.5 if label == "rough" else 0)
    return fake_summary(variant, label, seed, value)


def test_single_variant_gives_single_row(tmp_path):
    res = run_ablation_suite(tiny(), (0,), ["ecim_minus_mcrf"], ["flat", "rough"],
                             out_dir=tmp_path, run_fn=stub_run)
    assert list(res.records) == ["ecim_minus_mcrf"] and list(res.std) == ["ecim_minus_mcrf"]
    assert res.ag == {}
    rows = list(csv.reader(open(tmp_path / "ablation_std.csv")))
    assert [r[0] for r in rows[1:]] == ["ecim_minus_mcrf"]


def test_two_seeds_are_averaged():
    res = run_ablation_suite(tiny(), (1, 4), ["ecim"], ["flat", "rough"], run_fn=stub_run)
    flat = res.records["ecim"].values["flat"]
    assert flat["pitch_rms"] == pytest.approx(((20 + 1) + (20 + 4)) / 2)
    assert res.records["ecim"].values["rough"]["torque_rms"] == pytest.approx(23.0)


def test_failures_are_recorded_and_marked(tmp_path):
    def flaky(job):
        if job[1] == "ecim_minus_imdeem" and job[2] == "rough":
            raise RuntimeError("boom")
        return stub_run(job)

    res = run_ablation_suite(tiny(), (0,), ["ecim", "ecim_minus_imdeem"], ["flat", "rough"],
                             out_dir=tmp_path, run_fn=flaky)
    assert len(res.failures) == 1 and "boom" in res.failures[0]["error"]
    assert all(v is None for v in res.ag["imdeem"].values())
    text = (tmp_path / "ablation_ag.csv").read_text()
    assert "NA" in text
    summary = json.loads((tmp_path / "ablation_summary.json").read_text())
    assert summary["failures"][0]["terrain"] == "rough"


def test_unknown_variant_or_empty_seeds():
    with pytest.raises(ConfigError):
        run_ablation_suite(tiny(), (0,), ["sac"], ["flat"], run_fn=stub_run)
    with pytest.raises(ConfigError):
        run_ablation_suite(tiny(), (), ["ecim"], ["flat"], run_fn=stub_run)


def test_report_from_reference_records(tmp_path):
    records, ag_want, std_want = load_reference_tables()
    ag, std = ablation_report(records, tmp_path)
    for module, cells in ag_want.items():
        for metric, want in cells.items():
            if metric != "reward":
                assert ag[module][metric] == pytest.approx(want, abs=1e-4)
    for variant, cells in std_want.items():
        for metric, want in cells.items():
            if metric != "reward":
                assert std[variant][metric] == pytest.approx(want, abs=1e-4)
    assert (tmp_path / "ablation_records.csv").is_file()


def test_threshold_and_censoring():
    runs = [fake_summary("ppo", "flat", s, 0.0, returns=r)
            for s, r in enumerate([(1, 2, 10), (1, 4, 6), (0, 0, 20)])]
    # Best 1-episode means 10, 6, 20 -> median 10 -> threshold 9.
    assert threshold_for(runs, 1) == pytest.approx(9.0)
    assert steps_to_r(runs[0], 1, 9.0) == 3.0
    assert steps_to_r(runs[1], 1, 9.0) == 4.0  # never reached: iterations + 1
    records, r_star = aggregate(runs, 1)
    assert r_star == {"flat": pytest.approx(9.0)}
    cell = records["ppo"].values["flat"]
    assert cell["steps_to_r"] == pytest.approx((3 + 4 + 3) / 3)
    assert cell["steps_to_r_env_steps"] == pytest.approx(100 * (3 + 4 + 3) / 3)
    # Episode indices 3, censored 4, 3.
    assert cell["steps_to_r_episode"] == pytest.approx((3 + 4 + 3) / 3)


def test_threshold_for_negative_returns_sits_below_best():
    runs = [fake_summary("ppo", "flat", 0, 0.0, returns=(-50.0, -20.0, -30.0))]
    assert threshold_for(runs, 1) == pytest.approx(-22.0)


def test_trend_checks_use_seed_medians():
    runs = [fake_summary("ppo", "flat", s, v) for s, v in enumerate([1.0, 5.0, 9.0])]
    runs += [fake_summary("ecim", "flat", s, v) for s, v in enumerate([0.0, 6.0, 100.0])]
    checks = trend_checks(runs)["flat"]
    # Medians: ppo 5, ecim 6. Higher return passes, higher pitch fails.
    assert checks["return"] == {"value": 6.0, "reference": 5.0, "ok": True}
    assert checks["pitch"]["ok"] is False
    assert checks["torque"]["ok"] is None


# -- report -----------------------------------------------------------------


def test_report_empty(tmp_path):
    out = emit_report([], tmp_path / "rep")
    assert out == {"plots": [], "csv": [], "runs": 0}
    assert not (tmp_path / "rep").exists()


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    dirs = []
    for v in ("ppo", "ecim"):
        d = root / v
        run_experiment(apply_variant(tiny(), v), 0, d)
        dirs.append(d)
    return dirs


def _legend(svg_path):
    import re

    return set(re.findall(r"<!-- (\w+) -->", svg_path.read_text()))


def test_report_one_run(tmp_path, two_runs):
    out = emit_report(two_runs[:1], tmp_path)
    assert len(out["plots"]) == 4
    rows = list(csv.DictReader(open(tmp_path / "curves_flat.csv")))
    assert {r["variant"] for r in rows} == {"ppo"}
    assert "ppo" in _legend(tmp_path / "reward_flat.svg")


def test_report_two_variants_legend(tmp_path, two_runs):
    out = emit_report(two_runs, tmp_path)
    assert sorted(out["plots"]) == sorted(
        str(tmp_path / f"{n}_flat.svg") for n in ("reward", "pitch", "joint_acc", "torque"))
    for plot in out["plots"]:
        assert {"ppo", "ecim"} <= _legend(tmp_path / plot.split("/")[-1])


def test_report_missing_column(tmp_path, two_runs):
    d = tmp_path / "broken"
    d.mkdir()
    (d / "config.json").write_text((two_runs[0] / "config.json").read_text())
    lines = (two_runs[0] / "eval_log.csv").read_text().splitlines()
    header = lines[0].split(",")
    keep = [i for i, h in enumerate(header) if h != "torque_rms"]
    (d / "eval_log.csv").write_text(
        "\n".join(",".join(line.split(",")[i] for i in keep) for line in lines) + "\n")
    with pytest.raises(ReportError, match="torque_rms"):
        emit_report([d], tmp_path / "out")


# -- CLI --------------------------------------------------------------------


def test_cli_fixtures(capsys):
    assert main(["fixtures", "--check"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    status = json.loads(last)
    assert status["status"] == "ok" and status["checked"] == 32 and status["mismatches"] == 0


def test_cli_train_and_report(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(to_dict(tiny(iterations=1))))
    monkeypatch.setenv("ECIM_OUTPUT_ROOT", str(tmp_path / "out"))
    assert main(["train", "--config", str(cfg_path), "--variant", "ppo", "--seed", "2"]) == 0
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    run_dir = tmp_path / "out" / "ppo_flat_seed2"
    assert status["run_dir"] == str(run_dir) and (run_dir / "train_log.csv").is_file()
    assert main(["report", "--runs", str(run_dir), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "reward_flat.svg").is_file()


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"bogus_key": 1}))
    assert main(["train", "--config", str(cfg_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and "bogus_key" in err["message"]
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--seeds", "x,y"])
    assert exc.value.code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error"
