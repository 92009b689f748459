import numpy as np
import pytest

from oracles import aggregate as aggregate_oracle
from oracles import metrics as metric_oracle
from pfanet import serialize
from pfanet import tensor as T
from pfanet.config import TrainConfig
from pfanet.data import SynthSceneSpec, synth_dataset
from pfanet.model import PFANet
from pfanet.objectives import aggregate_metrics, compute_metrics
from pfanet.optim import NumericError
from pfanet.trainer import (CHECKPOINT, EMERGENCY, LOG_HEADER, evaluate, load_checkpoint,
                            model_predictor, train)

SMALL = dict(block_channels=(4, 8, 8, 8, 8), c_high=16, c_low=16, growth=4, synth_height=32,
             synth_width=64, crop_height=32, crop_width=64, batch_size=2, synth_count=4)


def small_cfg(tmp_path, name="run", **kw):
    return TrainConfig(**{**SMALL, "out_dir": str(tmp_path / name), **kw})


def files(result):
    return result.log_path.read_bytes(), result.checkpoint.read_bytes()


def test_runs_are_bitwise_reproducible_in_float64(tmp_path):
    a = train(small_cfg(tmp_path, "a", epochs=2, precision="float64"))
    b = train(small_cfg(tmp_path, "b", epochs=2, precision="float64"))
    assert a.steps == 4
    assert files(a) == files(b)


def test_resume_matches_uninterrupted(tmp_path):
    full = train(small_cfg(tmp_path, "full", epochs=4, precision="float64"))
    cfg = small_cfg(tmp_path, "split", epochs=4, precision="float64", stop_after_steps=3)
    first = train(cfg)
    assert first.steps == 3
    resumed = train(small_cfg(tmp_path, "split", epochs=4, precision="float64"),
                    resume=first.checkpoint)
    assert resumed.steps == 8
    assert resumed.losses == full.losses[3:]
    assert files(resumed) == files(full)


def test_zero_epochs_checkpoint_is_init(tmp_path):
    cfg = small_cfg(tmp_path, epochs=0)
    result = train(cfg)
    state = serialize.load_file(result.checkpoint)
    init = PFANet(cfg.model_config()).state_dict()
    for name, value in init.items():
        assert state[name].tobytes() == value.tobytes()
    assert state["meta.step"] == 0
    assert result.log_path.read_text() == LOG_HEADER + "\n"


def test_log_format(tmp_path):
    result = train(small_cfg(tmp_path, epochs=1))
    lines = result.log_path.read_text().splitlines()
    assert lines[0] == "step,lr,L_d,L_g,total"
    assert len(lines) == 3
    step, lr, *_ = lines[2].split(",")
    assert step == "2" and float(lr) == pytest.approx(1e-4 * 0.5 ** 0.9)
    assert (tmp_path / "run" / "config.txt").exists()


def test_checkpoint_reload_predicts_identically(tmp_path):
    result = train(small_cfg(tmp_path, epochs=1))
    model, state = load_checkpoint(result.checkpoint)
    assert model.config == small_cfg(tmp_path).model_config()
    assert "adam.m.head.out.bias" in state and int(state["adam.t"]) == 2
    x = np.random.default_rng(0).uniform(0, 1, (1, 3, 32, 64))
    again, _ = load_checkpoint(result.checkpoint)
    np.testing.assert_array_equal(model.predict(x), again.predict(x))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_emergency_checkpoint_on_non_finite_gradient(tmp_path, monkeypatch):
    def poisoned(g, node):
        return (np.full(node.inputs[0].shape, np.nan),)
    monkeypatch.setitem(T.BACKWARD, "sigmoid", poisoned)
    with pytest.raises(NumericError, match=r"step 1, batch \['synth_"):
        train(small_cfg(tmp_path, epochs=1))
    assert (tmp_path / "run" / EMERGENCY).exists()
    assert not (tmp_path / "run" / CHECKPOINT).exists()


def test_evaluate_ground_truth_self_test(tmp_path):
    data = synth_dataset(SynthSceneSpec(seed=3, invalid_fraction=0.1), 3)
    result = evaluate(lambda s: s.depth, data, tmp_path / "eval")
    agg = result.aggregate
    assert (agg.d1, agg.d2, agg.d3) == (1, 1, 1)
    assert agg.abs_rel == agg.sq_rel == agg.rmse == agg.rmse_log == 0
    header = (tmp_path / "eval" / "metrics.csv").read_text().splitlines()[0]
    assert header == "d1,d2,d3,abs_rel,sq_rel,rmse,rmse_log,N"
    per_sample = (tmp_path / "eval" / "per_sample.csv").read_text().splitlines()
    assert per_sample[0] == "id,d1,d2,d3,abs_rel,sq_rel,rmse,rmse_log,N" and len(per_sample) == 4


def test_evaluate_skips_indivisible_sizes(tmp_path):
    data = synth_dataset(SynthSceneSpec(seed=3), 2)
    odd = data[1]
    data[1] = type(odd)(odd.rgb[:, :40], odd.depth[:, :40], odd.mask[:, :40], "odd")
    result = evaluate(lambda s: s.depth, data)
    assert result.skipped == ["odd"] and len(result.reports) == 1
    assert "skipped 1 sample(s): odd" in result.table()


def test_aggregate_matches_weighted_oracle():
    rng = np.random.default_rng(11)
    reports, rows = [], []
    for k in range(5):
        shape = (1, 1, 8, 8 + 4 * k)
        gt = rng.uniform(1, 70, shape)
        pred = gt * rng.lognormal(0, 0.3, shape)
        mask = rng.random(shape) > 0.3
        reports.append(compute_metrics(pred, gt, mask))
        rows.append(metric_oracle(pred.tolist(), gt.tolist(), mask.tolist()))
    got, want = aggregate_metrics(reports), aggregate_oracle(rows)
    assert got.N == want["N"]
    for key in ("d1", "d2", "d3", "abs_rel", "sq_rel", "rmse", "rmse_log"):
        assert abs(getattr(got, key) - want[key]) < 1e-12


def test_evaluate_dumps_depth_pngs(tmp_path):
    cfg = small_cfg(tmp_path, epochs=0)
    model, _ = load_checkpoint(train(cfg).checkpoint)
    data = synth_dataset(cfg.synth_spec(), 2)
    evaluate(model_predictor(model), data, dump_depth=tmp_path / "dump")
    names = sorted(p.name for p in (tmp_path / "dump").iterdir())
    assert names == ["synth_000000.png", "synth_000000_color.png", "synth_000001.png",
                     "synth_000001_color.png"]
