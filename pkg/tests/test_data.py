import hashlib
import json

import numpy as np
import pytest

from darkside.data import (
    DATA_ROOT_ENV,
    ManifestError,
    NightTransform,
    RetrievalDataset,
    SceneSpec,
    export_pairs_jsonl,
    load_dataset,
    make_synthetic_daynight,
    write_image,
)


def write_manifest(tmp_path, doc, with_files=True):
    if with_files:
        for rec in doc["images"]:
            (tmp_path / rec["path"]).parent.mkdir(parents=True, exist_ok=True)
            write_image(tmp_path / rec["path"], np.full((8, 8, 3), 0.5))
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


MINIMAL = {
    "images": [
        {"id": "a", "path": "img/a.png", "domain": "day", "cluster": 1},
        {"id": "b", "path": "img/b.png", "domain": "night", "cluster": 1},
    ],
    "pairs": [["a", "b"]],
}


def test_minimal_manifest(tmp_path):
    ds = load_dataset(write_manifest(tmp_path, MINIMAL))
    assert len(ds) == 2 and ds.positives("a") == ["b"]
    assert ds.summary()["clusters"] == 1
    assert ds.load_image("a").shape == (8, 8, 3)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda d: d["pairs"].append(["a", "zz"]), "unknown image id 'zz'"),
        (lambda d: d["images"].append(dict(d["images"][0])), "duplicate image id 'a'"),
        (lambda d: d["images"][1].pop("cluster"), "'b'.*no cluster"),
        (lambda d: d["images"][1].update(domain="dusk"), "unknown domain"),
        (lambda d: d["images"][1].update(cluster=2), "spans clusters"),
        (lambda d: d.update(split={"train": ["q"]}), "split 'train'"),
    ],
)
def test_manifest_violations(tmp_path, mutate, match):
    doc = json.loads(json.dumps(MINIMAL))
    mutate(doc)
    with pytest.raises(ManifestError, match=match):
        load_dataset(write_manifest(tmp_path, doc))


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ManifestError, match="does not resolve"):
        load_dataset(write_manifest(tmp_path, MINIMAL, with_files=False))
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ManifestError):
        load_dataset(tmp_path / "bad.json")


def test_roundtrip(tmp_path):
    ds = load_dataset(write_manifest(tmp_path, MINIMAL))
    ds.save(tmp_path / "again.json")
    assert load_dataset(tmp_path / "again.json") == ds


def test_data_root_env(tmp_path, monkeypatch):
    (tmp_path / "data").mkdir()
    write_manifest(tmp_path / "data", MINIMAL)
    doc_path = tmp_path / "elsewhere" / "m.json"
    doc_path.parent.mkdir()
    doc_path.write_text(json.dumps(MINIMAL))
    with pytest.raises(ManifestError):
        load_dataset(doc_path)
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "data"))
    assert len(load_dataset(doc_path)) == 2


def test_min_size_filter(tmp_path):
    path = write_manifest(tmp_path, MINIMAL)
    write_image(tmp_path / "img/b.png", np.zeros((4, 16, 3)))
    ds = load_dataset(path, min_size=6)
    assert ds.ids == ["a"] and ds.pairs == []


def test_pairs_export(tmp_path):
    ds = load_dataset(write_manifest(tmp_path, MINIMAL))
    export_pairs_jsonl(ds, tmp_path / "p.jsonl")
    assert json.loads((tmp_path / "p.jsonl").read_text()) == {"anchor": "a", "positive": "b", "cluster": 1}


def test_synthetic_counts(tmp_path):
    ds = make_synthetic_daynight(SceneSpec(seed=0, n_scenes=100, views_per_scene=4, image_size=32), tmp_path)
    s = ds.summary()
    assert s["clusters"] == 100 and s["domains"]["day"] == 400 and s["domains"]["night"] == 200
    assert s["pairs"] == 100 * 4 * 3
    assert set(ds.split["gan_day"]) <= set(ds.split["train"])
    assert not set(ds.split["train"]) & set(ds.split["val"])
    assert load_dataset(tmp_path / "manifest.json") == ds


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted((folder / "images").iterdir())}


def test_synthetic_deterministic(tmp_path):
    spec = SceneSpec(seed=4, n_scenes=3, views_per_scene=2, image_size=32)
    make_synthetic_daynight(spec, tmp_path / "a")
    make_synthetic_daynight(spec, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_identity_night_transform(rng):
    img = rng.random((20, 20, 3))
    ident = NightTransform(gamma=1.0, chroma_shift=0, vignette=0, light_spots=0)
    np.testing.assert_array_equal(ident.apply(img, rng), img)


def test_night_is_darker_and_bluer(rng):
    img = rng.uniform(0.3, 0.9, (32, 32, 3))
    night = NightTransform(light_spots=0).apply(img, rng)
    assert night.mean() < img.mean()
    assert night[..., 2].mean() / night[..., 0].mean() > img[..., 2].mean() / img[..., 0].mean()


def test_spec_validation():
    with pytest.raises(ValueError, match="32"):
        SceneSpec(image_size=16)
    with pytest.raises(ValueError):
        SceneSpec(n_scenes=1)


def test_anchors_restricted_to_subset(tiny_synth):
    day = tiny_synth.select("train", "day")
    anchors = tiny_synth.anchors(day)
    assert anchors and set(anchors) <= set(day)
    assert tiny_synth.anchors(day[:1]) == []


def test_in_memory_dataset_equality():
    a = RetrievalDataset(MINIMAL["images"], MINIMAL["pairs"], check_paths=False)
    b = RetrievalDataset(MINIMAL["images"], MINIMAL["pairs"], check_paths=False)
    assert a == b
