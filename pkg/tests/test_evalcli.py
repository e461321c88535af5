"""Prediction, scoring, experiment harness, plot data, and the CLI."""

import json
import math
import os

import numpy as np
import pytest

from avfp.data import Trajectory, gen_linear_gaussian, LinearGaussianSpec
from avfp.evalcli import (
    PredictionSet,
    RunRecord,
    RunSummary,
    emit_plot_data,
    fit_health_index,
    gradient_audit,
    load_config,
    load_corpus,
    main,
    match_remaining_life,
    predict_rul,
    rmse,
    run_experiment,
)
from avfp.model import NetworkSpec, init_params
from avfp.training import TrainConfig, TrainingAborted, save_checkpoint, train


def pset(pairs):
    ids = tuple(range(1, len(pairs) + 1))
    return PredictionSet(unit_ids=ids,
                         predicted=np.array([p for p, _ in pairs]),
                         truth=np.array([t for _, t in pairs]))


def tiny_spec(n_x, n_u):
    return NetworkSpec(n_x=n_x, n_u=n_u, n_z=2, n_h=8, enc_hidden=8,
                       dec_hidden=8, prior_hidden=8, rul_hidden=8,
                       disc_hidden=8)


def tiny_params(n_x=3, n_u=1, seed=0):
    return init_params(tiny_spec(n_x, n_u), markovian=False, seed=seed)


def rand_trajs(n, T, n_x=3, seed=0):
    lg = LinearGaussianSpec(A=np.eye(2) * 0.9, C=np.ones((n_x, 2)) * 0.5,
                            q_diag=[0.2, 0.2], r_diag=[0.1] * n_x,
                            init_mean=np.zeros(2), init_cov=np.eye(2))
    out = []
    for i in range(n):
        tr = gen_linear_gaussian(lg, T, seed=seed + i)
        tr.unit_id = i + 1
        out.append(tr)
    return out


# ---------------------------------------------------------------------------
# scoring


def test_rmse_zero_for_perfect_predictions():
    assert rmse(pset([(3.0, 3.0), (7.0, 7.0)])) == 0.0


def test_rmse_constant_offset():
    assert rmse(pset([(13.0, 3.0), (17.0, 7.0)])) == pytest.approx(10.0)


def test_rmse_two_unit_hand_case():
    assert rmse(pset([(5.0, 0.0), (0.0, 5.0)])) == pytest.approx(5.0)


def test_rmse_permutation_invariant_and_linear_in_scale():
    a = pset([(4.0, 1.0), (9.0, 2.0), (2.0, 2.0)])
    b = pset([(2.0, 2.0), (4.0, 1.0), (9.0, 2.0)])
    assert rmse(a) == pytest.approx(rmse(b))
    scaled = pset([(12.0, 3.0), (27.0, 6.0), (6.0, 6.0)])  # residuals x3
    assert rmse(scaled) == pytest.approx(3.0 * rmse(a))


def test_prediction_set_validation():
    with pytest.raises(ValueError, match="one prediction"):
        PredictionSet(unit_ids=(1, 2), predicted=np.zeros(3), truth=np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        PredictionSet(unit_ids=(1, 1), predicted=np.zeros(2), truth=np.zeros(2))
    with pytest.raises(ValueError, match="negative"):
        PredictionSet(unit_ids=(1,), predicted=np.array([-1.0]),
                      truth=np.array([0.0]))
    with pytest.raises(ValueError, match="empty"):
        rmse(PredictionSet(unit_ids=(), predicted=np.zeros(0),
                           truth=np.zeros(0)))


# ---------------------------------------------------------------------------
# supervised prediction


def test_supervised_constant_head_gives_constant_predictions():
    params = tiny_params()
    for t in params.rho.values():
        t.data[...] = 0.0
    trajs = rand_trajs(3, 10)
    truth = {1: 5.0, 2: 9.0, 3: 1.0}
    pred = predict_rul(params, trajs, truth)
    assert np.allclose(pred.predicted, math.log(2.0), atol=1e-12)


def test_supervised_prediction_deterministic_and_order_invariant():
    params = tiny_params(seed=4)
    trajs = rand_trajs(4, 8, seed=2)
    truth = {i: float(i) for i in range(1, 5)}
    a = predict_rul(params, trajs, truth)
    b = predict_rul(params, list(reversed(trajs)), truth)
    assert a.unit_ids == b.unit_ids == (1, 2, 3, 4)
    assert np.array_equal(a.predicted, b.predicted)


def test_predict_error_contracts():
    params = tiny_params(n_x=5)
    trajs = rand_trajs(2, 6)  # 3 channels, model wants 5
    truth = {1: 1.0, 2: 2.0}
    with pytest.raises(ValueError, match="channel mismatch"):
        predict_rul(params, trajs, truth)
    params3 = tiny_params()
    with pytest.raises(ValueError, match="no true remaining life"):
        predict_rul(params3, trajs, {1: 1.0})
    empty = Trajectory(unit_id=9, x=np.zeros((0, 3)), u=np.zeros((0, 1)))
    with pytest.raises(ValueError, match="empty"):
        predict_rul(params3, [empty], {9: 0.0})
    with pytest.raises(ValueError, match="unknown prediction mode"):
        predict_rul(params3, trajs, truth, mode="oracle")
    with pytest.raises(ValueError, match="no test units"):
        predict_rul(params3, [], {})


# ---------------------------------------------------------------------------
# health-index mode


def test_health_index_prefix_copy_recovers_remaining_life():
    params = tiny_params(seed=1)
    train_trajs = rand_trajs(3, 30, seed=10)
    cut = 12
    probe = train_trajs[1]
    test_traj = Trajectory(unit_id=99, x=probe.x[:cut].copy(),
                           u=probe.u[:cut].copy())
    pred = predict_rul(params, [test_traj], {99: 0.0}, mode="health_index",
                       train_trajs=train_trajs)
    # identical prefix -> zero-distance window at the cut -> its true
    # remaining life, 30 - 12
    assert pred.predicted[0] == pytest.approx(18.0)


def test_health_index_prediction_is_capped():
    params = tiny_params(seed=1)
    train_trajs = rand_trajs(2, 200, seed=20)
    test_traj = Trajectory(unit_id=7, x=train_trajs[0].x[:10].copy(),
                           u=train_trajs[0].u[:10].copy())
    pred = predict_rul(params, [test_traj], {7: 0.0}, mode="health_index",
                       cap=125, train_trajs=train_trajs)
    assert pred.predicted[0] == 125.0


def test_health_index_requires_train_trajectories():
    params = tiny_params()
    trajs = rand_trajs(1, 5)
    with pytest.raises(ValueError, match="training trajectories"):
        predict_rul(params, trajs, {1: 0.0}, mode="health_index")


def test_health_index_map_shape_and_matching():
    params = tiny_params(seed=2)
    train_trajs = rand_trajs(4, 25, seed=5)
    hi = fit_health_index(params, train_trajs)
    assert np.linalg.norm(hi.direction) == pytest.approx(1.0, abs=1e-12)
    assert len(hi.curves) == 4
    assert all(len(c) == 25 for c in hi.curves)
    # matching an exact full curve leaves zero remaining life
    assert match_remaining_life(hi, hi.curves[2].copy()) == 0.0


# ---------------------------------------------------------------------------
# experiment harness


@pytest.fixture(scope="module")
def corpus(synth_dir):
    return load_corpus(synth_dir)


@pytest.fixture(scope="module")
def exp_setup(corpus):
    spec = NetworkSpec(n_x=corpus.n_x, n_u=corpus.n_u, n_z=4, n_h=16,
                       enc_hidden=16, dec_hidden=16, prior_hidden=16,
                       rul_hidden=16, disc_hidden=16)
    config = TrainConfig(epochs=2, trajectories_per_batch=4, eval_every=2,
                         lambda_adv=0.0, seed=0)
    return spec, config


def test_run_experiment_single_run_aggregates(corpus, exp_setup):
    spec, config = exp_setup
    s = run_experiment(corpus.train_trajs, corpus.test_trajs, corpus.truth,
                       spec, config, n_runs=1)
    assert len(s.records) == 1 and not s.aborted_runs
    r = s.records[0]
    assert s.mean_rmse == s.min_rmse == r.best_rmse
    assert s.std_rmse == 0.0
    assert (r.best_step, r.best_rmse) in [(st, v) for st, v in r.curve]
    assert all(v > 0 for _, v in r.curve)


def test_run_experiment_deterministic_across_calls(corpus, exp_setup):
    spec, config = exp_setup
    a = run_experiment(corpus.train_trajs, corpus.test_trajs, corpus.truth,
                       spec, config, n_runs=1)
    b = run_experiment(corpus.train_trajs, corpus.test_trajs, corpus.truth,
                       spec, config, n_runs=1)
    assert a.records[0].curve == b.records[0].curve
    assert a.records[0].best_rmse == b.records[0].best_rmse
    # identical seeds would therefore aggregate to zero spread
    both = np.array([a.records[0].best_rmse, b.records[0].best_rmse])
    assert float(np.std(both)) == 0.0


def test_run_summary_invariants(corpus, exp_setup):
    spec, config = exp_setup
    s = run_experiment(corpus.train_trajs, corpus.test_trajs, corpus.truth,
                       spec, config, n_runs=2)
    assert s.min_rmse <= s.mean_rmse
    assert s.std_rmse >= 0.0
    lengths = {len(r.curve) for r in s.completed}
    assert len(lengths) == 1  # every run sees the same eval checkpoints


def test_aborted_runs_are_excluded_from_aggregates():
    good = RunRecord(run=0, seed=0, best_step=10, best_rmse=20.0,
                     curve=[(10, 20.0)])
    bad = RunRecord(run=1, seed=1, best_step=-1, best_rmse=float("nan"),
                    curve=[], aborted=True)
    s = RunSummary(records=[good, bad])
    assert s.aborted_runs == [1]
    assert s.mean_rmse == 20.0 and s.min_rmse == 20.0 and s.std_rmse == 0.0
    assert s.argmin == (0, 10)


# ---------------------------------------------------------------------------
# plot data


def fixed_summary():
    return RunSummary(records=[
        RunRecord(run=0, seed=0, best_step=20, best_rmse=17.0,
                  curve=[(10, 19.0), (20, 17.0), (30, 18.0)]),
        RunRecord(run=1, seed=1, best_step=30, best_rmse=16.0,
                  curve=[(10, 21.0), (20, 16.5), (30, 16.0)]),
    ])


def test_emit_plot_data_rows_and_markers(tmp_path):
    s = RunSummary(records=[fixed_summary().records[0]])
    curves, _ = emit_plot_data(s, str(tmp_path))
    lines = open(curves).read().splitlines()
    assert lines[0] == "run,step,rmse,is_best,is_min"
    assert len(lines) == 4  # header + one row per eval point
    marked_best = [l for l in lines[1:] if l.split(",")[3] == "1"]
    marked_min = [l for l in lines[1:] if l.split(",")[4] == "1"]
    assert len(marked_best) == 1 and len(marked_min) == 1
    # the global-min marker sits on the smallest rmse row
    vals = [float(l.split(",")[2]) for l in lines[1:]]
    assert float(marked_min[0].split(",")[2]) == min(vals)


def test_emit_plot_data_reemission_byte_identical(tmp_path):
    s = fixed_summary()
    c1, j1 = emit_plot_data(s, str(tmp_path / "a"))
    c2, j2 = emit_plot_data(s, str(tmp_path / "b"))
    assert open(c1, "rb").read() == open(c2, "rb").read()
    assert open(j1, "rb").read() == open(j2, "rb").read()


def test_summary_json_matches_csv_recomputation(tmp_path):
    s = fixed_summary()
    curves, summary = emit_plot_data(s, str(tmp_path))
    doc = json.load(open(summary))
    rows = [l.split(",") for l in open(curves).read().splitlines()[1:]]
    selected = [float(r[2]) for r in rows if r[3] == "1"]
    assert doc["mean_rmse"] == float(np.mean(selected))
    assert doc["std_rmse"] == float(np.std(selected))
    assert doc["min_rmse"] == float(np.min(selected))
    all_vals = [float(r[2]) for r in rows]
    assert doc["curve_min_rmse"] == min(all_vals)
    min_row = next(r for r in rows if r[4] == "1")
    assert (int(min_row[0]), int(min_row[1])) == (doc["curve_min_run"],
                                                  doc["curve_min_step"])


# ---------------------------------------------------------------------------
# config file handling


def test_load_config_defaults_when_no_file():
    spec, config, doc = load_config(None, n_x=14, n_u=2)
    assert spec.n_x == 14 and spec.n_u == 2
    assert config == TrainConfig()
    assert doc == {}


def test_load_config_routes_fields(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_z": 4, "n_h": 24, "lr": 5e-4, "epochs": 7,
                             "markovian": True}))
    spec, config, _ = load_config(str(p), n_x=10, n_u=2)
    assert spec.n_z == 4 and spec.n_h == 24
    assert config.lr == 5e-4 and config.epochs == 7 and config.markovian


def test_load_config_rejections(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n_x": 10}))
    with pytest.raises(ValueError, match="set from the data"):
        load_config(str(p), n_x=10, n_u=2)
    p.write_text(json.dumps({"warmup": 1}))
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(str(p), n_x=10, n_u=2)
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError, match="JSON object"):
        load_config(str(p), n_x=10, n_u=2)


# ---------------------------------------------------------------------------
# command line


@pytest.fixture(scope="module")
def cli_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "c.json"
    p.write_text(json.dumps({
        "epochs": 1, "trajectories_per_batch": 4, "eval_every": 2,
        "lambda_adv": 0.05, "n_z": 4, "n_h": 16, "enc_hidden": 16,
        "dec_hidden": 16, "prior_hidden": 16, "rul_hidden": 16,
        "disc_hidden": 16,
    }))
    return str(p)


@pytest.fixture(scope="module")
def cli_run(synth_dir, cli_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--data", synth_dir, "--out", out,
               "--config", cli_cfg])
    assert rc == 0
    return out


def test_cli_ingest_writes_cache(synth_dir, tmp_path, capsys):
    out = str(tmp_path / "cache")
    assert main(["ingest", "--data", synth_dir, "--out", out]) == 0
    assert sorted(os.listdir(out)) == [
        "stats.json", "test_normalized.csv", "train_normalized.csv"]
    said = capsys.readouterr().out
    assert "12 units" in said and "6 units" in said


def test_cli_train_artifacts(cli_run):
    names = sorted(os.listdir(cli_run))
    assert names == ["evals.csv", "manifest.json", "model.ckpt", "trace.csv"]
    manifest = json.load(open(os.path.join(cli_run, "manifest.json")))
    assert set(manifest) == {"version", "config_sha256", "data_sha256",
                             "seed", "wall_time_s"}
    assert len(manifest["data_sha256"]) == 3
    trace = open(os.path.join(cli_run, "trace.csv")).read().splitlines()
    assert trace[0].startswith("step,epoch,combined")
    assert len(trace) > 1


def test_cli_eval_and_predict(cli_run, synth_dir, tmp_path, capsys):
    ckpt = os.path.join(cli_run, "model.ckpt")
    assert main(["eval", "--data", synth_dir, "--checkpoint", ckpt]) == 0
    assert "test RMSE (supervised)" in capsys.readouterr().out
    out = str(tmp_path / "preds.csv")
    assert main(["predict", "--data", synth_dir, "--checkpoint", ckpt,
                 "--out", out, "--mode", "health_index"]) == 0
    lines = open(out).read().splitlines()
    assert lines[0] == "unit_id,predicted_rul,true_rul"
    assert len(lines) == 7  # six test units


def test_cli_experiment_writes_plot_data(synth_dir, cli_cfg, tmp_path, capsys):
    out = str(tmp_path / "exp")
    rc = main(["experiment", "--data", synth_dir, "--out", out,
               "--config", cli_cfg, "--runs", "1"])
    assert rc == 0
    assert sorted(os.listdir(out)) == ["curves.csv", "manifest.json",
                                       "summary.json"]
    said = capsys.readouterr().out
    assert "mean RMSE" in said and "16.91" in said  # context line present


def test_cli_experiment_markovian_table(synth_dir, cli_cfg, tmp_path, capsys):
    out = str(tmp_path / "abl")
    rc = main(["experiment", "--data", synth_dir, "--out", out,
               "--config", cli_cfg, "--runs", "1", "--compare-markovian"])
    assert rc == 0
    table = open(os.path.join(out, "ablation.csv")).read().splitlines()
    assert table[0] == "markovian,runs,mean_rmse,std_rmse,min_rmse"
    assert len(table) == 3
    assert table[1].startswith("false,1,") and table[2].startswith("true,1,")
    for row in table[1:]:
        assert all(np.isfinite(float(v)) for v in row.split(",")[2:])


def test_cli_usage_errors_exit_1(tmp_path, monkeypatch, capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    monkeypatch.delenv("AVFP_DATA_DIR", raising=False)
    assert main(["ingest", "--out", str(tmp_path)]) == 1


def test_cli_data_errors_exit_2(synth_dir, tmp_path):
    assert main(["ingest", "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learningrate": 1}))
    assert main(["train", "--data", synth_dir, "--out", str(tmp_path),
                 "--config", str(bad)]) == 2


def test_cli_checkpoint_mismatch_exits_2(synth_dir, tmp_path, capsys):
    trajs = rand_trajs(3, 8, n_x=5)
    spec = tiny_spec(n_x=5, n_u=1)
    cfg = TrainConfig(epochs=0, rul_supervision=False, val_frac=0.0)
    res = train(trajs, spec, cfg)
    ckpt = str(tmp_path / "oddball.ckpt")
    save_checkpoint(res.checkpoint, ckpt)
    rc = main(["eval", "--data", synth_dir, "--checkpoint", ckpt])
    assert rc == 2
    assert "mismatch" in capsys.readouterr().err


def test_cli_training_abort_exits_3(synth_dir, monkeypatch, tmp_path, capsys):
    import avfp.evalcli as cli

    def explode(*a, **kw):
        raise TrainingAborted("11 consecutive non-finite batches at step 11")

    monkeypatch.setattr(cli, "train", explode)
    rc = main(["train", "--data", synth_dir, "--out", str(tmp_path)])
    assert rc == 3
    assert "aborted" in capsys.readouterr().err


def test_cli_gradcheck_smoke(capsys):
    assert main(["gradcheck", "--draws", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok") == 5 and "FAIL" not in out


def test_cli_oracle_smoke(capsys):
    rc = main(["oracle", "--instances", "1", "--draws", "32",
               "--fit-steps", "100"])
    assert rc == 0
    assert "bound held on 1/1" in capsys.readouterr().out


def test_gradient_audit_reports_every_objective():
    worst = gradient_audit(draws=1, seed=3)
    assert set(worst) == {"log_density", "kl", "elbo", "adversarial",
                          "combined"}
    assert all(err < 1e-4 for err in worst.values())
