import copy

import numpy as np
import pytest
import torch

from ssl_sonar.embeddings import (EmbeddingError, EmbeddingMatrix, export_csv, extract_embeddings,
                                  load_embeddings, save_embeddings)
from ssl_sonar.models import build_backbone, build_dae, build_jigsaw, run_to_layer
from ssl_sonar.synthetic import make_shape_dataset


@pytest.fixture(scope="module")
def images():
    return make_shape_dataset(5, 4, seed=2)


def test_dae_code_matrix_shape():
    ds = make_shape_dataset(125, 4, seed=9)
    m = build_dae(128, 0.125)
    m.meta["preprocessing"] = {"pixel_mean": 84.5, "scale": 1 / 255}
    emb = extract_embeddings(m, "encoder_code", ds)
    assert emb.shape == (500, 128)
    assert emb.sample_ids == tuple(ds.source_ids)


def test_spatial_layer_flattened_channels_last(images):
    m = build_jigsaw(5)
    emb = extract_embeddings(m, "dropout_2", images)
    assert emb.shape == (len(images), 12 * 12 * 8)
    # row-major over (y, x, channel)
    ext = m.module.extractor.eval()
    x = torch.from_numpy(images.stack()[:1])[:, None]
    with torch.no_grad():
        fmap = run_to_layer(ext, ext.layers["dropout_2"], x)[0]
    np.testing.assert_allclose(emb.values[0, :8], fmap[:, 0, 0].numpy(), atol=1e-5)
    np.testing.assert_allclose(emb.values[0, 8:16], fmap[:, 0, 1].numpy(), atol=1e-5)


def test_deterministic_and_stochastic_layers_inactive(images):
    m = build_dae(16, 0.2)
    torch.manual_seed(0)
    a = extract_embeddings(m, "encoder_code", images)
    torch.manual_seed(99)
    b = extract_embeddings(m, "encoder_code", images)
    assert a.values.tobytes() == b.values.tobytes()
    j = build_jigsaw(5)
    torch.manual_seed(1)
    c = extract_embeddings(j, "dropout_0", images)
    torch.manual_seed(2)
    d = extract_embeddings(j, "dropout_0", images)
    assert c.values.tobytes() == d.values.tobytes()


def test_batch_boundaries_do_not_matter(images):
    m = build_backbone("resnet20", 8, 4)
    a = extract_embeddings(m, "activation_17", images, batch_size=1)
    b = extract_embeddings(m, "activation_17", images, batch_size=64)
    np.testing.assert_allclose(a.values, b.values, atol=1e-5)


def test_row_order_follows_input(images):
    m = build_backbone("squeezenet", 8, 4)
    fwd = extract_embeddings(m, "global_average_pooling", images)
    rev = extract_embeddings(m, "global_average_pooling", images.subset(range(len(images) - 1, -1, -1)))
    np.testing.assert_allclose(rev.values[::-1], fwd.values, atol=1e-5)
    assert rev.sample_ids[::-1] == fwd.sample_ids


def test_model_untouched(images):
    m = build_backbone("mobilenet", 8, 4)
    m.module.train()
    before = copy.deepcopy(m.module.state_dict())
    extract_embeddings(m, "flatten", images)
    assert m.module.training
    for k, v in m.module.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_unknown_layer(images):
    with pytest.raises(EmbeddingError, match="activation_17"):
        extract_embeddings(build_backbone("resnet20", 4, 4), "nope", images)


def test_preprocessing_applied(images):
    m = build_dae(8)
    raw = extract_embeddings(m, "encoder_code", images)
    m.meta["preprocessing"] = {"pixel_mean": 50.0, "scale": 1 / 255}
    pre = extract_embeddings(m, "encoder_code", images)
    assert not np.allclose(raw.values, pre.values)


def test_matrix_invariants():
    with pytest.raises(EmbeddingError):
        EmbeddingMatrix(np.array([[np.nan]]), "l", "m", ("a",))
    with pytest.raises(EmbeddingError):
        EmbeddingMatrix(np.zeros((2, 3)), "l", "m", ("a",))


def test_save_load_and_csv(tmp_path, images):
    emb = extract_embeddings(build_dae(8), "encoder_code", images, model_ref="dae:test")
    save_embeddings(emb, tmp_path / "e")
    back = load_embeddings(tmp_path / "e.npz")
    assert back.values.tobytes() == emb.values.tobytes()
    assert (back.layer_name, back.model_ref, back.sample_ids) == ("encoder_code", "dae:test", emb.sample_ids)
    export_csv(emb, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == len(images) + 1 and lines[0].split(",")[:2] == ["sample_id", "f0"]
    big = EmbeddingMatrix(np.zeros((1, 1025)), "l", "m", ("a",))
    with pytest.raises(EmbeddingError):
        export_csv(big, tmp_path / "big.csv")
