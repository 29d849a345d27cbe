from dataclasses import replace

import pytest
import torch

from render2real import dki
from render2real.codec import ConvAutoencoder, IdentityCodec
from render2real.data import synthetic_arrays
from render2real.diffusion import make_schedule, sample_timesteps
from render2real.dki import (
    TrainConfig,
    TrainingError,
    finetune_target,
    negative_conditioning,
    noise_prediction_loss,
    textual_inversion_single_concept,
    train_negative_embedding,
    with_placeholder,
)
from render2real.score_model import NEGATIVE_EMBEDDING_TOKENS, EmbeddingKind, ToyUNet

from conftest import SMALL

SCHED = make_schedule("scaled_linear", 1000, 8.5e-4, 0.012)


def _fresh(seed=0):
    torch.manual_seed(seed)
    return ToyUNet(SMALL).eval()


@pytest.fixture(scope="module")
def domains():
    ren, rea, _ = synthetic_arrays(160, 16, seed=3)
    return torch.from_numpy(ren), torch.from_numpy(rea)


@pytest.fixture(scope="module")
def trained(domains):
    """A small backbone trained on both domains, then an embedding fit on the rendered half."""
    ren, rea = domains
    model, rep = finetune_target(_fresh(), IdentityCodec(), torch.cat([ren[:128], rea[:128]]), None,
                                 TrainConfig(learning_rate=2e-3, max_steps=600, seed=0), SCHED)
    model.freeze()
    v, erep = train_negative_embedding(model, IdentityCodec(), ren[:128],
                                       TrainConfig(learning_rate=5e-3, max_steps=300, seed=1), SCHED)
    return model, rep, v, erep


def _heldout_loss(model, images, context, seed=11, reps=8):
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(reps):
            t = sample_timesteps(images.shape[0], 1000, gen)
            eps = torch.randn(images.shape, generator=gen)
            total += float(noise_prediction_loss(model, images, t, eps, context.expand(images.shape[0], -1, -1), SCHED))
    return total / reps


def test_finetune_loss_decreases(trained):
    _, rep, _, _ = trained
    first, last = rep.windowed_means(100)
    assert last < first


def test_embedding_loss_decreases(trained):
    _, _, _, erep = trained
    first, last = erep.windowed_means(100)
    assert last < first


def test_embedding_beats_null_on_heldout_rendered(trained, domains):
    model, _, v, _ = trained
    ren = domains[0][128:]
    null_loss = _heldout_loss(model, ren, model.null_embedding)
    neg_loss = _heldout_loss(model, ren, negative_conditioning(model, v).tokens)
    assert neg_loss < null_loss


def test_embedding_training_leaves_network_and_codec_untouched(domains):
    ren, _ = domains
    model = _fresh().freeze()
    ae = ConvAutoencoder(latent_channels=3, hidden=8)
    # the toy backbone works at 16x16 on 3 channels, so feed the codec 64x64 inputs
    big = torch.nn.functional.interpolate(ren[:16], size=64, mode="nearest")
    before = {k: v.clone() for k, v in list(model.state_dict().items()) + [("codec." + k, v) for k, v in ae.state_dict().items()]}
    v, rep = train_negative_embedding(model, ae, big, TrainConfig(learning_rate=5e-3, max_steps=20, batch_size=4), SCHED)
    after = dict(list(model.state_dict().items()) + [("codec." + k, v) for k, v in ae.state_dict().items()])
    for k in before:
        assert torch.equal(after[k], before[k]), k
    assert all(d == 0.0 for k, d in rep.param_delta.items() if k != "embedding")
    assert v.tokens.shape == (NEGATIVE_EMBEDDING_TOKENS, SMALL.embed_dim)
    init = dki.init_negative_embedding(model, 0)
    assert float((v.tokens - init).norm()) > 0
    assert v.base_fingerprint == model.fingerprint()
    assert v.training_meta["optimizer_steps"] == 20


def test_embedding_training_requires_frozen_model(domains):
    with pytest.raises(TrainingError, match="frozen"):
        train_negative_embedding(_fresh(), IdentityCodec(), domains[0][:4], TrainConfig(max_steps=1), SCHED)


def test_finetune_rejects_frozen_model(domains):
    with pytest.raises(TrainingError):
        finetune_target(_fresh().freeze(), IdentityCodec(), domains[1][:4], None, TrainConfig(max_steps=1), SCHED)


def test_finetune_keeps_null_embedding_and_changes_weights(domains):
    model = _fresh()
    null = model.null_embedding.clone()
    _, rep = finetune_target(model, IdentityCodec(), domains[1][:8], None,
                             TrainConfig(learning_rate=1e-3, max_steps=3, batch_size=4), SCHED)
    assert torch.equal(model.null_embedding, null)
    assert rep.param_delta["backbone.null_embedding"] == 0.0
    assert max(rep.param_delta.values()) > 0


def test_empty_dataset_rejected():
    empty = torch.zeros(0, 3, 16, 16)
    with pytest.raises(TrainingError, match="empty"):
        finetune_target(_fresh(), IdentityCodec(), empty, None, TrainConfig(max_steps=1), SCHED)
    with pytest.raises(TrainingError, match="empty"):
        train_negative_embedding(_fresh().freeze(), IdentityCodec(), empty, TrainConfig(max_steps=1), SCHED)


def test_non_finite_loss_reports_step(domains):
    bad = domains[1][:4].clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError, match="step 0"):
        finetune_target(_fresh(), IdentityCodec(), bad, None, TrainConfig(max_steps=2, batch_size=4), SCHED)


def test_seeded_training_is_deterministic(domains):
    runs = []
    for _ in range(2):
        model = _fresh().freeze()
        v, rep = train_negative_embedding(model, IdentityCodec(), domains[0][:16],
                                          TrainConfig(learning_rate=5e-3, max_steps=10, batch_size=4, seed=5), SCHED)
        runs.append((v.tokens, rep.loss_curve))
    assert torch.equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_all_stages_share_one_loss(domains, monkeypatch):
    calls = []
    real = dki.noise_prediction_loss

    def spy(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(dki, "noise_prediction_loss", spy)
    model = _fresh()
    finetune_target(model, IdentityCodec(), domains[1][:4], None, TrainConfig(max_steps=2, batch_size=2), SCHED)
    model.freeze()
    train_negative_embedding(model, IdentityCodec(), domains[0][:4], TrainConfig(max_steps=3, batch_size=2), SCHED)
    textual_inversion_single_concept(model, IdentityCodec(), domains[0][:2], TrainConfig(max_steps=4, batch_size=2),
                                     SCHED)
    assert len(calls) == 9


def test_textual_inversion_defaults_to_one_token(domains):
    model = _fresh().freeze()
    cond, _ = textual_inversion_single_concept(model, IdentityCodec(), domains[0][:3],
                                               TrainConfig(max_steps=3, batch_size=2), SCHED)
    assert cond.kind is EmbeddingKind.CAPTION
    assert cond.tokens.shape == model.null_embedding.shape
    assert not torch.equal(cond.tokens[1], model.null_embedding[1])
    assert torch.equal(cond.tokens[2:], model.null_embedding[2:])
    with pytest.raises(TrainingError):
        textual_inversion_single_concept(model, IdentityCodec(), domains[0][:11], TrainConfig(max_steps=1), SCHED)


def test_placeholder_layout():
    null = torch.arange(77 * 2, dtype=torch.float32).reshape(77, 2)
    ph = -torch.ones(75, 2)
    out = with_placeholder(null, ph)
    assert torch.equal(out[0], null[0])
    assert torch.equal(out[1:76], ph)
    assert torch.equal(out[76], null[76])
    with pytest.raises(ValueError):
        with_placeholder(null, torch.zeros(77, 2))


def test_caption_dropout_trains_unconditional_branch(domains):
    # with dropout 1.0 every step sees the null context, so caption content cannot matter
    caps_a = torch.randn(8, 77, SMALL.embed_dim)
    caps_b = torch.randn(8, 77, SMALL.embed_dim)
    cfg = TrainConfig(learning_rate=1e-3, max_steps=3, batch_size=4, caption_dropout=1.0)
    a, _ = finetune_target(_fresh(), IdentityCodec(), domains[1][:8], caps_a, cfg, SCHED)
    b, _ = finetune_target(_fresh(), IdentityCodec(), domains[1][:8], caps_b, cfg, SCHED)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(max_steps=0), dict(batch_size=0), dict(loss="l1"),
                dict(caption_dropout=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert replace(TrainConfig(), image_resolution=[8, 8]).image_resolution == (8, 8)
