import json

import pytest
import torch

import multistylegan.trainer as trainer_mod
from multistylegan.config import RunConfig, apply_overrides
from multistylegan.data import index_dataset, load_batch, write_synthetic_dataset
from multistylegan.discriminator import DiscriminatorConfig
from multistylegan.generator import GeneratorConfig
from multistylegan.trainer import (
    Trainer,
    TrainingDiverged,
    ema_update,
    fixed_latents,
    load_generator,
    read_checkpoint,
    run_training,
)


def micro_config(**training):
    cfg = RunConfig(
        generator=GeneratorConfig(stages=3, features=8, latent_dim=16, mapping_layers=2, base_resolution=4),
        discriminator=DiscriminatorConfig(encoder_features=[8, 16, 16], decoder_features=[16, 8], nonlocal_stages=[1]),
    )
    settings = dict(batch_size=4, epochs=1, sample_interval=0, checkpoint_interval=0)
    settings.update(training)
    return apply_overrides(cfg, [f"training.{k}={v}" for k, v in settings.items()])


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    root = write_synthetic_dataset(tmp_path_factory.mktemp("micro") / "data", n_sequences=16, length=3, resolution=16, seed=0)
    return index_dataset(root, resolution=16)


def _log(out):
    return [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]


def test_optimizer_isolation(micro_data):
    t = Trainer(micro_config(), total_steps=10)
    real = load_batch(micro_data, [0, 1, 2, 3])
    g_before = {k: v.clone() for k, v in t.G.state_dict().items()}
    d_before = {k: v.clone() for k, v in t.D.state_dict().items()}
    t.discriminator_step(real)
    assert all(torch.equal(v, g_before[k]) for k, v in t.G.state_dict().items())
    assert any(not torch.equal(v, d_before[k]) for k, v in t.D.state_dict().items())
    d_mid = {k: v.clone() for k, v in t.D.state_dict().items()}
    t.generator_step(4)
    assert all(torch.equal(v, d_mid[k]) for k, v in t.D.state_dict().items())
    assert any(not torch.equal(v, g_before[k]) for k, v in t.G.state_dict().items() if k != "w_avg")


def test_optimizer_settings():
    t = Trainer(micro_config())
    lrs = sorted(group["lr"] for group in t.opt_g.param_groups)
    assert lrs == [2e-6, 2e-4]
    assert t.opt_d.param_groups[0]["lr"] == 6e-4
    assert t.opt_d.param_groups[0]["betas"] == (0.0, 0.99)


def test_ema_closed_form():
    ema = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    online = {"w": torch.tensor([3.0, 4.0], dtype=torch.float64)}
    d = 0.9
    for _ in range(25):
        ema_update(ema, online, d)
    expected = online["w"] + (torch.tensor([1.0, -2.0], dtype=torch.float64) - online["w"]) * d**25
    assert torch.allclose(ema["w"], expected, rtol=0, atol=1e-12)


def test_ema_one_step_and_mismatch():
    ema = {"w": torch.tensor([1.0], dtype=torch.float64)}
    ema_update(ema, {"w": torch.tensor([3.0], dtype=torch.float64)}, 0.999)
    assert abs(ema["w"].item() - (0.999 + 0.003)) < 1e-12
    with pytest.raises(ValueError):
        ema_update(ema, {"v": torch.zeros(1)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(ema, {"w": torch.zeros(2)}, 0.5)


def test_lazy_regularization_schedule(micro_data, tmp_path):
    run_training(micro_config(epochs=5, max_steps=17), micro_data, tmp_path)
    records = _log(tmp_path)
    assert [r["step"] for r in records] == list(range(17))
    assert [r["step"] for r in records if "r1" in r] == [0, 16]
    assert [r["step"] for r in records if "pl" in r] == [0, 8, 16]
    assert all(0.0 <= r["ada_p"] <= 1.0 for r in records)
    assert records[0]["topk"] == 4 and records[-1]["topk"] == 2


def test_zero_epochs_writes_initial_checkpoint(micro_data, tmp_path):
    run_training(micro_config(epochs=0), micro_data, tmp_path)
    state = read_checkpoint(tmp_path / "checkpoints" / "latest.pt")
    assert state["step"] == 0
    assert (tmp_path / "checkpoints" / "step_0000000.pt").is_file()
    assert (tmp_path / "samples" / "step_0000000.png").is_file()
    assert (tmp_path / "config.yaml").is_file()


def test_checkpoint_round_trip(micro_data, tmp_path):
    t = Trainer(micro_config(), 8)
    for i in range(2):
        t.train_step(load_batch(micro_data, [i, i + 4, i + 8, i + 12]))
    path = t.save_checkpoint(tmp_path / "c.pt")
    u = Trainer.from_checkpoint(path)
    assert u.step == 2 and u.ada == t.ada
    for mod in ("G", "G_ema", "D"):
        a, b = getattr(t, mod).state_dict(), getattr(u, mod).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert torch.equal(t.rng.get_state(), u.rng.get_state())
    assert torch.equal(t.pl_mean, u.pl_mean)


def test_load_generator_uses_ema(micro_data, tmp_path):
    t = Trainer(micro_config(), 4)
    t.train_step(load_batch(micro_data, [0, 1, 2, 3]))
    path = t.save_checkpoint(tmp_path / "c.pt")
    g = load_generator(path)
    assert all(torch.equal(v, t.G_ema.state_dict()[k]) for k, v in g.state_dict().items())
    online = load_generator(path, ema=False)
    assert all(torch.equal(v, t.G.state_dict()[k]) for k, v in online.state_dict().items())


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(bad)
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "other.pt")


def _max_rel_diff(a, b):
    worst = 0.0
    for k in a:
        if a[k].is_floating_point():
            denom = a[k].abs().max().clamp_min(1e-12)
            worst = max(worst, float((a[k] - b[k]).abs().max() / denom))
    return worst


def test_resume_matches_uninterrupted(micro_data, tmp_path):
    cfg = micro_config(epochs=3, checkpoint_interval=5)
    straight = run_training(cfg, micro_data, tmp_path / "a")
    assert straight.step == 12
    resumed = run_training(cfg, micro_data, tmp_path / "b", resume=str(tmp_path / "a" / "checkpoints" / "step_0000005.pt"))
    assert resumed.step == 12
    for mod in ("G", "G_ema", "D"):
        assert _max_rel_diff(getattr(straight, mod).state_dict(), getattr(resumed, mod).state_dict()) < 1e-6
    tail_a = [r for r in _log(tmp_path / "a") if r["step"] >= 5]
    tail_b = _log(tmp_path / "b")
    assert [r["step"] for r in tail_b] == list(range(5, 12))
    for ra, rb in zip(tail_a, tail_b):
        assert ra["d_loss"] == pytest.approx(rb["d_loss"], rel=1e-6)


def test_same_seed_same_trace(micro_data, tmp_path):
    cfg = micro_config(epochs=3, max_steps=10)
    run_training(cfg, micro_data, tmp_path / "a")
    run_training(cfg, micro_data, tmp_path / "b")
    assert (tmp_path / "a" / "log.jsonl").read_text() == (tmp_path / "b" / "log.jsonl").read_text()
    other = apply_overrides(cfg, ["training.seed=1"])
    run_training(other, micro_data, tmp_path / "c")
    assert (tmp_path / "a" / "log.jsonl").read_text() != (tmp_path / "c" / "log.jsonl").read_text()


def test_divergence_is_reported(micro_data, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer_mod, "d_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDiverged):
        run_training(micro_config(max_steps=2), micro_data, tmp_path)
    last = _log(tmp_path)[-1]
    assert last["error"] == "non-finite loss" and last["step"] == 0


def test_fixed_latents_prefix_stable():
    a, b = fixed_latents(3, 2, 8), fixed_latents(3, 5, 8)
    assert torch.equal(a, b[:2])
