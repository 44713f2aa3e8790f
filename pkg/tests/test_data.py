import logging
import struct

import numpy as np
import pytest

from atac.data import (
    EmbeddingStore,
    TaskConfig,
    build_head,
    gen_task,
    read_images,
    read_labels,
    read_store,
    write_images,
    write_labels,
    write_store,
)
from atac.encoders import ImageEncoder, init_encoder
from atac.errors import BadMagic, DegenerateHead, InvalidGeometry, NormOutOfRange, TruncatedFile, VersionUnsupported

SMALL = TaskConfig(k=3, per_class=4, geometry=(3, 8, 8))


def test_noise_free_samples_equal_prototypes():
    t = gen_task(TaskConfig(k=3, per_class=4, geometry=(3, 8, 8), noise_sigma=0.0), 0)
    assert np.array_equal(t.images, t.prototypes[t.labels])


def test_generation_is_deterministic():
    a, b = gen_task(SMALL, 5), gen_task(SMALL, 5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_task(SMALL, 6).images)


def test_images_in_range():
    t = gen_task(SMALL, 1)
    assert t.images.min() >= 0.0 and t.images.max() <= 1.0
    assert t.images.shape == (12, 3, 8, 8)


@pytest.mark.parametrize("geometry", [(3, 0, 8), (0, 8, 8)])
def test_bad_geometry(geometry):
    with pytest.raises(InvalidGeometry):
        gen_task(TaskConfig(geometry=geometry), 0)


def test_head_rows_and_duplicate_guard():
    t = gen_task(SMALL, 0)
    enc = ImageEncoder(init_encoder("mlp1", (3, 8, 8), dim=16, hidden=32))
    head = build_head(enc, t.prototypes)
    assert head.k == 3 and np.allclose(np.linalg.norm(head.class_embeddings, axis=1), 1.0)
    with pytest.raises(DegenerateHead):
        build_head(enc, np.stack([t.prototypes[0], t.prototypes[0]]))


def test_store_round_trip_is_bitwise(tmp_path):
    r = np.random.default_rng(0)
    store = EmbeddingStore(8)
    for i in range(1000):
        v = r.standard_normal(8)
        store.add(i, "orig" if i % 2 else "rot+15", v / np.linalg.norm(v))
    write_store(tmp_path / "s.emb", store)
    back = read_store(tmp_path / "s.emb")
    assert back.dim == 8 and back.records.keys() == store.records.keys()
    assert all(np.array_equal(back.records[k], store.records[k]) for k in store.records)


def test_store_truncation_and_magic(tmp_path):
    store = EmbeddingStore(4)
    store.add(0, "orig", [1.0, 0.0, 0.0, 0.0])
    write_store(tmp_path / "s.emb", store)
    data = (tmp_path / "s.emb").read_bytes()
    (tmp_path / "t.emb").write_bytes(data[:-3])
    with pytest.raises(TruncatedFile):
        read_store(tmp_path / "t.emb")
    (tmp_path / "m.emb").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagic):
        read_store(tmp_path / "m.emb")
    (tmp_path / "v.emb").write_bytes(data[:4] + struct.pack("<H", 9) + data[6:])
    with pytest.raises(VersionUnsupported):
        read_store(tmp_path / "v.emb")


def test_norm_checks(tmp_path, caplog):
    store = EmbeddingStore(2)
    store.add(0, "orig", [0.9, 0.0])
    with caplog.at_level(logging.WARNING):
        write_store(tmp_path / "s.emb", store)
    assert "norm" in caplog.text
    assert np.linalg.norm(read_store(tmp_path / "s.emb").records[(0, "orig")]) == pytest.approx(1.0, abs=1e-6)
    store.add(0, "orig", [0.5, 0.0])
    with pytest.raises(NormOutOfRange):
        write_store(tmp_path / "s.emb", store)


def test_image_and_label_round_trip(tmp_path):
    t = gen_task(SMALL, 2)
    write_images(tmp_path / "x.img1", t.images)
    write_labels(tmp_path / "y.csv", t.sample_ids, t.labels)
    x = read_images(tmp_path / "x.img1")
    assert np.array_equal(x, t.images.astype(np.float32).astype(np.float64))
    ids, labels = read_labels(tmp_path / "y.csv")
    assert np.array_equal(ids, t.sample_ids) and np.array_equal(labels, t.labels)
    (tmp_path / "bad.img1").write_bytes((tmp_path / "x.img1").read_bytes()[:-1])
    with pytest.raises(TruncatedFile):
        read_images(tmp_path / "bad.img1")


def test_default_task_head_is_well_separated():
    from atac.config import RunConfig
    from atac.harness import build_experiment

    exp = build_experiment(RunConfig(), 0)
    gram = exp.head.class_embeddings @ exp.head.class_embeddings.T
    np.fill_diagonal(gram, -1.0)
    assert gram.max() < 0.9
    clean = (exp.encoder.embed(exp.task.images) @ exp.head.class_embeddings.T).argmax(1)
    assert np.mean(clean == exp.task.labels) >= 0.95


def test_default_suite_is_label_preserving_on_clean_data():
    from atac import augment
    from atac.config import RunConfig
    from atac.harness import build_experiment

    exp = build_experiment(RunConfig(), 0)
    x = exp.task.images
    for op in augment.resolve_suite(augment.suite("default"), x[0].shape, None):
        views = np.stack([op.forward(img) for img in x])
        pred = (exp.encoder.embed(views) @ exp.head.class_embeddings.T).argmax(1)
        assert np.mean(pred == exp.task.labels) >= 0.9
