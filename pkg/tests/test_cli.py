import json

import numpy as np
import pytest

from darkside import cli
from darkside.data import SceneSpec, make_synthetic_daynight

GAN = {"teacher": {"fit_steps": 3}, "gan": {"epochs": 2, "iterations_per_epoch": 2, "batch_size": 2, "crop": 32, "ngf": 8, "n_blocks": 1, "ndf": 8}}
EMBED = {
    "epochs": 2,
    "embedding": {"backbone": "tiny_conv", "image_size": 40},
    "mining": {"pool_size": 6, "anchors_per_epoch": 4, "negatives": 2, "neg_candidate_pool": 30, "translate_prob": 0.5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_synthetic_daynight(SceneSpec(seed=1, n_scenes=6, views_per_scene=2, image_size=40, val_fraction=0.5), root / "synth")
    return root


def config(root, name, doc):
    path = root / f"{name}.json"
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(workspace):
    cfg = config(workspace, "gan", {**GAN, "manifest": "synth/manifest.json"})
    assert run("gan-train", "--config", cfg, "--out", workspace / "gan") == 0
    return workspace / "gan"


def test_synth_command(tmp_path):
    cfg = config(tmp_path, "s", {"n_scenes": 3, "views_per_scene": 2, "image_size": 32})
    assert run("synth", "--config", cfg, "--out", tmp_path / "a", "--seed", 5) == 0
    echo = json.loads((tmp_path / "a/config.json").read_text())
    assert echo["command"] == "synth" and echo["config"]["seed"] == 5
    assert not (tmp_path / "a/.lock").exists()


def test_gan_train_outputs(trained):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["config.json", "epoch_001.ckpt", "epoch_002.ckpt", "losses.csv"]
    rows = (trained / "losses.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,adv_g,adv_d,edge_l1") and len(rows) == 3


def test_gan_train_reproducible(workspace, trained):
    cfg = config(workspace, "gan", {**GAN, "manifest": "synth/manifest.json"})
    assert run("gan-train", "--config", cfg, "--out", workspace / "gan_again") == 0
    assert (workspace / "gan_again/losses.csv").read_text() == (trained / "losses.csv").read_text()


def test_missing_night_dir_fails_before_training(workspace):
    cfg = config(workspace, "bad", {**GAN, "day_dir": "synth/images", "night_dir": "nowhere"})
    assert run("gan-train", "--config", cfg, "--out", workspace / "bad_out") == 2
    assert not (workspace / "bad_out").exists()


def test_translate_preserves_names_and_is_byte_identical(workspace, trained):
    src = workspace / "day_in"
    src.mkdir()
    for p in sorted((workspace / "synth/images").glob("*_d0.png"))[:4]:
        (src / p.name).write_bytes(p.read_bytes())
    ck = trained / "epoch_002.ckpt"
    assert run("translate", "--ckpt", ck, "--in", src, "--out", workspace / "t1") == 0
    assert run("gan-translate", "--ckpt", ck, "--in", src, "--out", workspace / "t2") == 0
    pngs = sorted(p.name for p in (workspace / "t1").glob("*.png"))
    assert pngs == sorted(p.name for p in src.iterdir())
    for name in pngs:
        assert (workspace / "t1" / name).read_bytes() == (workspace / "t2" / name).read_bytes()


def test_translate_unreadable_checkpoint(workspace, tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    assert run("translate", "--ckpt", tmp_path / "x.ckpt", "--in", workspace / "synth/images", "--out", tmp_path / "o") == 2


def test_embed_extract_evaluate(workspace, trained):
    cfg = config(workspace, "embed", {**EMBED, "manifest": "synth/manifest.json", "generator_ckpt": str(trained / "epoch_002.ckpt")})
    assert run("embed-train", "--config", cfg, "--out", workspace / "emb") == 0
    assert run("embed-train", "--config", cfg, "--out", workspace / "emb2") == 0
    assert (workspace / "emb/losses.csv").read_text() == (workspace / "emb2/losses.csv").read_text()
    man = workspace / "synth/manifest.json"
    for ep in (1, 2):
        assert run("extract", "--ckpt", workspace / f"emb/epoch_00{ep}.ckpt", "--manifest", man, "--split", "val", "--out", workspace / f"x{ep}") == 0
    ids, d = cli.read_descriptors(workspace / "x1/descriptors.bin")
    meta = json.loads((workspace / "x1/descriptors.json").read_text())
    assert meta["dim"] == d.shape[1] == 64 and len(ids) == d.shape[0]
    assert (workspace / "x1/descriptors.bin").stat().st_size == d.size * 4
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1, atol=1e-5)
    out = workspace / "ev"
    argv = ["evaluate", "--desc", workspace / "x1/descriptors.bin", "--desc", workspace / "x2/descriptors.bin", "--manifest", man]
    assert run(*argv, "--protocol", "tokyo", "--protocol", "domain:day:night", "--out", out) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert [r["descriptors"] for r in report] == ["x1", "x2", "x1+x2"]
    assert report[2]["results"][1]["protocol"] == "D->N"
    assert len((out / "table.csv").read_text().splitlines()) == 4


def test_evaluate_perfect_descriptors(workspace, tmp_path):
    from darkside.data import load_dataset

    ds = load_dataset(workspace / "synth/manifest.json")
    ids = ds.ids
    clusters = sorted({ds.cluster(i) for i in ids})
    d = np.eye(len(clusters))[[clusters.index(ds.cluster(i)) for i in ids]]
    cli.write_descriptors(tmp_path / "perfect.bin", ids, d)
    assert run("evaluate", "--desc", tmp_path / "perfect.bin", "--manifest", workspace / "synth/manifest.json", "--protocol", "plain", "--out", tmp_path / "ev") == 0
    report = json.loads((tmp_path / "ev/metrics.json").read_text())
    assert report[0]["results"][0]["mAP"] == 1.0


def test_validation_errors(workspace, tmp_path):
    assert run("synth", "--config", config(tmp_path, "u", {"bogus": 1}), "--out", tmp_path / "u") == 2
    assert run("synth", "--config", config(tmp_path, "v", {"image_size": 8}), "--out", tmp_path / "v") == 2
    assert run("synth", "--config", tmp_path / "missing.json", "--out", tmp_path / "w") == 2
    assert run("synth", "--out", tmp_path / "x", "--device", "cuda:7") == 2
    assert run("evaluate", "--desc", tmp_path / "none.bin", "--manifest", workspace / "synth/manifest.json", "--out", tmp_path / "e") == 2
    emb = config(tmp_path, "e", {**EMBED, "manifest": str(workspace / "synth/manifest.json")})
    assert run("embed-train", "--config", emb, "--out", tmp_path / "e2") == 2  # translate_prob without generator


def test_lockfile_blocks_second_run(tmp_path):
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy/.lock").write_text("123")
    assert run("synth", "--config", config(tmp_path, "s", {"n_scenes": 2, "views_per_scene": 2, "image_size": 32}), "--out", tmp_path / "busy") == 2


def test_runtime_failure_exit_code(tmp_path, monkeypatch):
    import darkside.data

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(darkside.data, "make_synthetic_daynight", boom)
    assert run("synth", "--out", tmp_path / "r") == 1
    assert not (tmp_path / "r/.lock").exists()


def test_default_templates_are_complete():
    from darkside.embedding import EmbeddingConfig
    from darkside.mining import MiningConfig
    from darkside.nightgan import GanConfig

    assert GanConfig.from_dict({**cli.default_config("gan")["gan"], "seed": 0}) == GanConfig()
    e = cli.default_config("embed")
    assert EmbeddingConfig.from_dict(e["embedding"]) == EmbeddingConfig()
    assert MiningConfig(**e["mining"]) == MiningConfig()
    assert SceneSpec(**cli.default_config("synth")) == SceneSpec()
