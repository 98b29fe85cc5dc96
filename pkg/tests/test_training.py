import csv

import numpy as np
import pytest
import torch

from mar3d.dataset import UnpairedSampler
from mar3d.losses import LossWeights, Variant, objective_terms
from mar3d.training import (NonFiniteLossError, TrainConfig, init_state, load_checkpoint, save_checkpoint, train,
                            train_step)

TINY = dict(n_slices=3, batch_size=2, gen_depth=2, gen_width=4, crop=32, checkpoint_interval=2)


def params(state):
    return [p.detach().clone() for p in state.nets.generators() + state.nets.discriminators()]


@pytest.fixture(scope="module")
def batches(tiny_corpus):
    sampler = UnpairedSampler(tiny_corpus[2])
    rng = np.random.default_rng(0)
    return [sampler.sample(3, 2, rng, crop=32) for _ in range(4)]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_slices=4)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    defaults = TrainConfig()
    assert defaults.lr == 2e-4 and defaults.betas == (0.5, 0.999)


def test_zero_step_size_keeps_parameters(batches):
    state = init_state(TrainConfig(lr=0.0, **TINY))
    before = params(state)
    train_step(state, batches[0].x, batches[0].y)
    assert all(torch.equal(a, b) for a, b in zip(before, params(state)))


def test_step_deterministic(batches):
    runs = []
    for _ in range(2):
        state = init_state(TrainConfig(seed=3, **TINY))
        reports = [train_step(state, b.x, b.y)[1] for b in batches[:2]]
        runs.append((params(state), reports))
    assert all(torch.equal(a, b) for a, b in zip(runs[0][0], runs[1][0]))
    assert runs[0][1] == runs[1][1]


def test_two_phase_trace(batches):
    state = init_state(TrainConfig(**TINY))
    train_step(state, batches[0].x, batches[0].y)
    train_step(state, batches[1].x, batches[1].y)
    assert list(state.trace) == [(0, "D"), (0, "G"), (1, "D"), (1, "G")]
    assert state.step == 2


def test_parameters_change_and_stay_finite(batches):
    state = init_state(TrainConfig(**TINY))
    before = params(state)
    train_step(state, batches[0].x, batches[0].y)
    after = params(state)
    assert any(not torch.equal(a, b) for a, b in zip(before, after))
    assert all(torch.isfinite(p).all() for p in after)


def test_generator_regularizers_decrease_on_fixed_batch(batches):
    """Overfitting one small batch: cyc + int + fea falls at every generator-only step."""
    state = init_state(TrainConfig(**TINY))
    torch.manual_seed(0)
    for g in (state.nets.G_X, state.nets.G_Y):
        torch.nn.init.normal_(g.head.weight, std=0.05)
    bx = torch.as_tensor(batches[0].x[:2])
    by = torch.as_tensor(batches[0].y[:2])
    opt = torch.optim.Adam(state.nets.generators(), lr=1e-4)
    w = LossWeights()
    values = []
    for _ in range(12):
        terms = objective_terms(Variant.PROPOSED, w, state.nets, bx, by)
        reg = w.lambda_cyc * terms.cyc + w.lambda_int * terms.int + w.lambda_fea * terms.fea
        values.append(reg.item())
        opt.zero_grad()
        reg.backward()
        opt.step()
    assert all(b < a for a, b in zip(values, values[1:])), values


def test_non_finite_aborts_with_diagnostics(batches):
    state = init_state(TrainConfig(**TINY))
    x = batches[0].x.copy()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, x, batches[0].y)
    assert info.value.step == 0 and "disc" in info.value.components


def test_train_writes_csv_and_checkpoint(tiny_corpus, tmp_path):
    cfg = TrainConfig(epochs=2, steps_per_epoch=3, **TINY)
    enc_before = [p.clone() for p in init_state(cfg).nets.f.parameters()]
    ck = train(cfg, tiny_corpus[2], tmp_path)
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and [int(r["step"]) for r in rows] == list(range(6))
    assert ck.state.step == 6 and ck.path.exists()
    assert all(torch.equal(a, b) for a, b in zip(enc_before, ck.state.nets.f.parameters()))


def test_resume_matches_uninterrupted(tiny_corpus, tmp_path):
    cfg = TrainConfig(epochs=1, steps_per_epoch=5, **TINY)
    full = train(cfg, tiny_corpus[2], tmp_path / "full")
    train(cfg, tiny_corpus[2], tmp_path / "part", stop_after=3)
    resumed = train(cfg, tiny_corpus[2], tmp_path / "part", resume=tmp_path / "part" / "checkpoint.pt")
    assert all(torch.equal(a, b) for a, b in zip(params(full.state), params(resumed.state)))
    assert (tmp_path / "full" / "loss.csv").read_text() == (tmp_path / "part" / "loss.csv").read_text()


def test_checkpoint_roundtrip_and_checks(tmp_path):
    state = init_state(TrainConfig(**TINY))
    path = save_checkpoint(state, tmp_path / "c.pt")
    ck = load_checkpoint(path)
    assert all(torch.equal(a, b) for a, b in zip(params(state), params(ck.state)))
    with pytest.raises(ValueError, match="N=3"):
        load_checkpoint(path, expect_n_slices=5)
    payload = torch.load(path, weights_only=False)
    payload["config_hash"] = "0" * 16
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "bad.pt")
