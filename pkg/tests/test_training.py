import numpy as np
import pytest

from darkside.data import SceneSpec, make_synthetic_daynight
from darkside.embedding import EmbeddingConfig, check_generator, load_embedding, train_embedding
from darkside.mining import MiningConfig
from darkside.nightgan import ResnetGenerator


@pytest.fixture(scope="module")
def synth40(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth40")
    return make_synthetic_daynight(SceneSpec(seed=2, n_scenes=40, views_per_scene=3, image_size=32, val_fraction=0.1), out)


class CountingGenerator(ResnetGenerator):
    calls = 0

    def forward(self, x):
        CountingGenerator.calls += 1
        return super().forward(x)


def tiny_cfg():
    return EmbeddingConfig(backbone="tiny_conv", image_size=32)


def test_loss_decreases_in_smoke_run(synth40):
    ids = synth40.select("train", "day")
    mining = MiningConfig(pool_size=len(synth40.anchors(ids)), anchors_per_epoch=100, translate_prob=0.0, neg_candidate_pool=1000)
    run = train_embedding(synth40, tiny_cfg(), mining, epochs=5, seed=0, ids=ids)
    first = run.epoch_losses[:3]
    # strict decrease with at most one non-decreasing step
    assert sum(b >= a for a, b in zip(first, first[1:])) <= 1
    assert run.epoch_losses[-1] < run.epoch_losses[0]


def test_rho_zero_never_calls_generator(synth40, tmp_path):
    ids = synth40.select("train", "day")
    gen = CountingGenerator(ngf=4, n_blocks=1)
    CountingGenerator.calls = 0
    mining = MiningConfig(pool_size=20, anchors_per_epoch=5, negatives=2, translate_prob=0.0, neg_candidate_pool=50)
    run = train_embedding(synth40, tiny_cfg(), mining, epochs=2, seed=0, ids=ids, generator=gen, out_dir=tmp_path)
    assert CountingGenerator.calls == 0 and run.generator_calls == 0
    assert len(run.checkpoints) == 2
    baseline = train_embedding(synth40, tiny_cfg(), mining, epochs=2, seed=0, ids=ids)
    assert baseline.epoch_losses == run.epoch_losses
    model = load_embedding(run.checkpoints[-1])
    img = synth40.load_image(ids[0])
    from darkside.embedding import extract_descriptor

    np.testing.assert_allclose(extract_descriptor(model, img), extract_descriptor(run.model, img), atol=1e-6)


def test_translated_share_uses_generator(synth40):
    ids = synth40.select("train", "day")
    gen = CountingGenerator(ngf=4, n_blocks=1)
    CountingGenerator.calls = 0
    mining = MiningConfig(pool_size=20, anchors_per_epoch=8, negatives=2, translate_prob=0.25, neg_candidate_pool=50)
    run = train_embedding(synth40, tiny_cfg(), mining, epochs=2, seed=0, ids=ids, generator=gen)
    assert run.generator_calls == 4 == CountingGenerator.calls
    assert all(not p.requires_grad for p in gen.parameters())


def test_incompatible_generator_rejected():
    with pytest.raises(ValueError, match="channels"):
        check_generator(ResnetGenerator(in_channels=1, out_channels=3, ngf=4, n_blocks=1), tiny_cfg())
    with pytest.raises(ValueError, match="image_size"):
        check_generator(ResnetGenerator(ngf=4, n_blocks=1), EmbeddingConfig(backbone="tiny_conv", image_size=8))
    with pytest.raises(ValueError, match="image input"):
        check_generator(ResnetGenerator(ngf=4, n_blocks=1), EmbeddingConfig(backbone="tiny_conv", input_mode="edgemap"))
