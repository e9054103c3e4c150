import json

import numpy as np
import pytest

torch = pytest.importorskip("torch")

from pdg_trainer.model import SingleTokenEncoder
from pdg_trainer.train import (NonFiniteLoss, TrainConfig,
                               emit_parity_fixture, load_csv, lr_at, train)
from pdg_trainer.tscx import FormatError, load_tensors, save_tensors


def write_solution_csv(path, n_train=8, n_test=0, n_params=3, n_out=2,
                       seed=0, poison=False):
    rng = np.random.default_rng(seed)
    header = (["split"] + [f"p{i}" for i in range(n_params)]
              + [f"y{i}" for i in range(n_out)])
    lines = [",".join(header)]
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        vals = rng.normal(0.0, 1.0, n_params + n_out)
        if poison and i == 0:
            vals[-1] = np.nan
        lines.append(split + "," + ",".join(f"{v:.9g}" for v in vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def small_cfg(**kw):
    base = dict(kind="solution", epochs=200, folds=2, warmup_steps=50,
                embed=32, n_heads=2, n_layers=2, dropout=0.0,
                peak_lr=2e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- csv loading -------------------------------------------------------------

def test_load_csv_solution(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=4, n_test=2)
    feats, labels, splits = load_csv(path, "solution")
    assert feats.shape == (6, 3)
    assert labels.shape == (6, 2)
    assert list(splits) == ["train"] * 4 + ["test"] * 2


def test_load_csv_constraint(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("split,p0,p1,k,b0,b1\n"
                    "train,0.5,-1.0,2,1,0\n"
                    "test,1.5,2.0,1,0,1\n")
    feats, labels, _ = load_csv(path, "constraint")
    # the iteration index k rides along as the last feature
    assert feats.shape == (2, 3)
    assert feats[0, 2] == 2.0
    assert labels.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_load_csv_unknown_kind(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv")
    with pytest.raises(ValueError):
        load_csv(path, "bogus")


# -- learning-rate schedule --------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig(kind="solution", warmup_steps=100, peak_lr=1e-3)
    assert lr_at(50, cfg) == pytest.approx(0.5e-3)
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(400, cfg) == pytest.approx(0.5e-3)   # 1/sqrt(4) decay
    assert lr_at(0, cfg) == lr_at(1, cfg)             # step floor


# -- training ----------------------------------------------------------------

def test_overfit_smoke(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=8)
    _, _, metrics = train(path, small_cfg(), tmp_path / "w.tscx")
    assert metrics["train_loss"] < 1e-3


def test_seed_fixed_rerun_identical_metrics(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=8, n_test=4)
    cfg = small_cfg(epochs=20)
    _, _, m1 = train(path, cfg, tmp_path / "a.tscx")
    _, _, m2 = train(path, cfg, tmp_path / "b.tscx")
    assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)
    assert (tmp_path / "a.tscx").read_bytes() == (tmp_path / "b.tscx").read_bytes()


def test_train_writes_metrics_and_heldout(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=8, n_test=4)
    mp = tmp_path / "metrics.json"
    _, _, metrics = train(path, small_cfg(epochs=20), tmp_path / "w.tscx",
                          metrics_path=mp)
    assert len(metrics["folds"]) == 2
    held = metrics["held_out"]
    assert "mse_standardized" in held and "mse" in held
    assert json.loads(mp.read_text())["n_test"] == 4


def test_non_finite_loss_raises(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=8, poison=True)
    with pytest.raises(NonFiniteLoss):
        train(path, small_cfg(epochs=1), tmp_path / "w.tscx")


def test_no_train_rows_rejected(tmp_path):
    path = write_solution_csv(tmp_path / "s.csv", n_train=0, n_test=3)
    with pytest.raises(ValueError):
        train(path, small_cfg(), tmp_path / "w.tscx")


# -- serialization -----------------------------------------------------------

def test_tscx_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = [("a", rng.normal(0, 1, (3, 4))), ("b.c", rng.normal(0, 1, 5))]
    path = tmp_path / "t.tscx"
    save_tensors(tensors, path)
    back = load_tensors(path)
    assert set(back) == {"a", "b.c"}
    for name, arr in tensors:
        assert np.allclose(back[name], arr.astype(np.float32))


def test_tscx_corruption_detected(tmp_path):
    path = tmp_path / "t.tscx"
    save_tensors([("a", np.ones((2, 2)))], path)
    blob = bytearray(path.read_bytes())
    blob[-2] ^= 0x55
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_tensors(path)


def test_parity_fixture_replays_exactly(tmp_path):
    torch.manual_seed(3)
    model = SingleTokenEncoder(4, 3, 16, 2, 2, 0.0)
    model.eval()
    in_mean = np.array([1.0, -2.0, 0.0, 3.0])
    in_std = np.array([2.0, 1.0, 0.5, 4.0])
    path = tmp_path / "fx.json"
    fixtures = emit_parity_fixture(model, (in_mean, in_std), 5, path, seed=7)
    assert len(fixtures) == 5
    for fx in json.loads(path.read_text()):
        z = (np.array(fx["input"]) - in_mean) / in_std
        with torch.no_grad():
            got = model(torch.tensor(z[None, :], dtype=torch.float32))[0]
        assert got.numpy().tolist() == fx["logits"]


def test_zero_weights_give_zero_logits():
    model = SingleTokenEncoder(4, 3, 16, 2, 2, 0.0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    model.eval()
    out = model(torch.ones((2, 4)))
    assert torch.all(out == 0.0)
