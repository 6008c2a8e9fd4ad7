import csv

import numpy as np
import pytest
import torch

from toothseg.backbone import BackboneConfig
from toothseg.config import Config, load_config
from toothseg.data.synth import SynthConfig, generate_synthetic_arch
from toothseg.head import HeadConfig
from toothseg.model import ToothInstanceNet, prepare_sample
from toothseg.training import (
    NonFiniteLossError,
    load_model,
    make_optimizer,
    run_training,
    train_step,
    write_training_checkpoint,
)


def tiny_config(**train):
    cfg = Config()
    cfg.backbone = BackboneConfig(stem_channels=8, stage_channels=(8, 16), stage_strides=(2, 2), k_neighbors=8,
                                  decoder_channels=(16, 16))
    cfg.head = HeadConfig(num_queries=20, query_dim=16, num_heads=2, ffn_dim=32)
    cfg.train.batch_size = 2
    cfg.train.checkpoint_every = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="module")
def scans():
    return [generate_synthetic_arch(SynthConfig(points_per_scan=160, seed=s, tooth_resolution=(12, 5))) for s in range(3)]


def test_default_config_constants():
    cfg = Config()
    assert cfg.loss.weights.lambda_ibl == 0.006
    assert cfg.loss.gamma == 2
    assert cfg.graphcut.smoothing_lambda == 2
    assert cfg.graphcut.eps == 1e-5
    assert cfg.train.batch_size == 6 and cfg.train.epochs == 300 and cfg.train.learning_rate == 1e-3
    assert cfg.data.points == 16000


def test_config_round_trip_and_rejects_unknown(tmp_path):
    cfg = tiny_config()
    cfg.save(tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    (tmp_path / "bad.json").write_text('{"train": {"bogus": 1}}')
    with pytest.raises(ValueError, match="bogus"):
        load_config(tmp_path / "bad.json")


def two_steps(cfg, samples):
    torch.manual_seed(0)
    model = ToothInstanceNet(cfg)
    opt = make_optimizer(model, cfg)
    return [train_step(model, opt, samples).total for _ in range(2)]


def test_train_step_deterministic(scans):
    cfg = tiny_config()
    samples = [prepare_sample(s, cfg) for s in scans[:2]]
    assert two_steps(cfg, samples) == two_steps(cfg, samples)


def test_zero_ibl_weight_reports_but_excludes(scans):
    cfg = tiny_config()
    cfg.loss.weights.lambda_ibl = 0.0
    torch.manual_seed(0)
    model = ToothInstanceNet(cfg)
    rep = train_step(model, make_optimizer(model, cfg), [prepare_sample(scans[0], cfg)])
    assert rep.ibl > 0
    assert rep.total == pytest.approx(rep.cls + rep.mask + rep.obj, abs=1e-6)


def test_empty_batch_and_dataset(tmp_path):
    cfg = tiny_config()
    model = ToothInstanceNet(cfg)
    with pytest.raises(ValueError):
        train_step(model, make_optimizer(model, cfg), [])
    with pytest.raises(ValueError, match="empty"):
        run_training(cfg, [], tmp_path)


def test_non_finite_loss_dumps_components(scans):
    cfg = tiny_config()
    torch.manual_seed(0)
    model = ToothInstanceNet(cfg)
    with torch.no_grad():
        model.head.classifier.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="cls="):
        train_step(model, make_optimizer(model, cfg), [prepare_sample(scans[0], cfg)])


def test_loss_decreases_on_single_scan(scans):
    cfg = tiny_config()
    torch.manual_seed(0)
    model = ToothInstanceNet(cfg)
    opt = make_optimizer(model, cfg)
    sample = prepare_sample(scans[0], cfg)
    losses = [train_step(model, opt, [sample]).total for _ in range(50)]
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert avg[-1] < 0.7 * avg[0]
    assert (np.diff(avg[::5]) < 0).mean() >= 0.75


def test_every_parameter_receives_gradient(scans):
    cfg = tiny_config()
    torch.manual_seed(0)
    model = ToothInstanceNet(cfg)
    seen = {n: False for n, _ in model.named_parameters()}
    for s in scans:
        model.zero_grad()
        from toothseg.training import batch_loss

        loss, _ = batch_loss(model, [prepare_sample(s, cfg)])
        loss.backward()
        for n, p in model.named_parameters():
            seen[n] |= p.grad is not None and bool(p.grad.abs().sum() > 0)
    assert all(seen.values()), [n for n, v in seen.items() if not v]


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_resume_matches_uninterrupted_run(tmp_path, scans):
    cfg = tiny_config(epochs=4)
    full = run_training(cfg, scans, tmp_path / "full")
    assert full.name == "final.batc"
    part = run_training(cfg, scans, tmp_path / "part", stop_after_epochs=2)
    assert part.name == "checkpoint_epoch2.batc"
    resumed = run_training(cfg, scans, tmp_path / "part", resume=part)
    a, b = read_log(tmp_path / "full" / "train_log.csv"), read_log(tmp_path / "part" / "train_log.csv")
    assert [r["total"] for r in a] == [r["total"] for r in b]
    assert list(a[0]) == ["epoch", "step", "total", "cls", "mask", "obj", "ibl"]
    m1, _, _ = load_model(full)
    m2, _, _ = load_model(resumed)
    for (n, p), (_, q) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(p, q), n


def test_checkpoint_round_trip_gives_identical_predictions(tmp_path, scans):
    cfg = tiny_config()
    torch.manual_seed(3)
    model = ToothInstanceNet(cfg)
    opt = make_optimizer(model, cfg)
    sample = prepare_sample(scans[1], cfg)
    train_step(model, opt, [sample])
    path = write_training_checkpoint(tmp_path / "m.batc", model, opt, 1, 1)
    back, _, meta = load_model(path)
    assert meta["epoch"] == 1
    _, p1 = model.predict(sample)
    _, p2 = back.predict(sample)
    assert np.array_equal(p1, p2)


def test_unwritable_output_names_path(tmp_path, scans):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        run_training(tiny_config(epochs=1), scans[:1], blocker / "sub")
