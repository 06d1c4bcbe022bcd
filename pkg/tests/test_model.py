import numpy as np
import pytest

from idealdml import autodiff as ad
from idealdml.errors import ConfigError
from idealdml.model import ModelConfig, build_model, embed, features, load_model, save_model

TWO_STAGE = dict(input_shape=(1, 16, 16), conv_stages=((4, 3, 2), (8, 3, 1)))


def batch(n=5, shape=(1, 16, 16), seed=0):
    return np.random.default_rng(seed).uniform(size=(n, *shape))


def test_same_seed_bit_identical():
    a = build_model(ModelConfig(**TWO_STAGE), 3)
    b = build_model(ModelConfig(**TWO_STAGE), 3)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()


def test_parameter_count_by_hand():
    # conv0 4*1*3*3 + 4 = 40, conv1 8*4*3*3 + 8 = 296, head 8*10 + 10 = 90
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=10, split_heads=False), 0)
    assert m.num_parameters() == 426
    # split into 4 heads of 3: 4 * (8*3 + 3) = 108
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=12, num_domains=4, split_heads=True), 0)
    assert m.num_parameters() == 40 + 296 + 108


def test_default_parameter_count():
    # 160 + 4640 + 18496 + (64*128 + 128)
    assert build_model(ModelConfig(), 0).num_parameters() == 31616


def test_d512_k4_split_heads_are_128_wide():
    cfg = ModelConfig(**TWO_STAGE, embedding_dim=512, num_domains=4, split_heads=True)
    m = build_model(cfg, 0)
    for i in range(4):
        w = dict(m.head_parameters(i))[f"head{i}.weight"]
        assert w.shape[1] == 128
        assert embed(m, batch(), i).shape == (5, 128)


def test_split_needs_divisible_dim():
    with pytest.raises(ConfigError):
        ModelConfig(embedding_dim=10, num_domains=4, split_heads=True)


def test_initialization_bounds_and_zero_bias():
    m = build_model(ModelConfig(**TWO_STAGE), 1)
    w = m.backbone["backbone.conv1.weight"].data
    assert np.abs(w).max() <= np.sqrt(6.0 / (4 * 9))
    assert np.all(m.backbone["backbone.conv1.bias"].data == 0.0)


def test_unsplit_routing_is_noop():
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=16, split_heads=False), 0)
    x = batch()
    e0, e1 = embed(m, x, 0), embed(m, x, 1)
    assert e0.shape == (5, 16)
    assert e0.data.tobytes() == e1.data.tobytes()


def test_rows_unit_norm_and_deterministic():
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=8, split_heads=True), 0)
    x = batch(20, seed=4)
    e = embed(m, x, 2).data
    assert np.max(np.abs(np.linalg.norm(e, axis=1) - 1.0)) < 1e-9
    assert e.tobytes() == embed(m, x, 2).data.tobytes()


def test_domain_index_out_of_range():
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=8, split_heads=True), 0)
    with pytest.raises(IndexError):
        embed(m, batch(), 4)
    with pytest.raises(IndexError):
        embed(m, batch(), -1)


def test_wrong_input_shape():
    m = build_model(ModelConfig(**TWO_STAGE), 0)
    with pytest.raises(ad.ShapeError):
        features(m, np.zeros((2, 1, 8, 8)))


def test_heads_partition_parameters():
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=8, split_heads=True), 0)
    names = [n for n, _ in m.parameters()]
    assert len(names) == len(set(names))
    head_sets = [{n for n, _ in m.head_parameters(i)} for i in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not head_sets[i] & head_sets[j]
    assert len(names) == len(m.backbone) + sum(len(s) for s in head_sets)


@pytest.mark.parametrize("i", range(4))
def test_gradient_isolation_between_heads(i):
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=8, split_heads=True), 0)
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.square(ad.slice_(embed(m, batch(), i), 1, 0, 1)))
    tape.backward(loss)
    for j in range(4):
        for name, p in m.head_parameters(j):
            if j == i:
                assert p.grad is not None and np.any(p.grad != 0.0), name
            else:
                assert p.grad is None or np.all(p.grad == 0.0), name


def test_save_load_bit_exact(tmp_path):
    m = build_model(ModelConfig(**TWO_STAGE, embedding_dim=8, split_heads=True), 7)
    save_model(m, tmp_path / "m", extra={"note": "x"}, tensors={"extra.t": np.arange(3.0)})
    back, meta, extra = load_model(tmp_path / "m")
    assert meta["note"] == "x"
    assert np.array_equal(extra["extra.t"], np.arange(3.0))
    assert back.config == m.config
    for (na, ta), (nb, tb) in zip(m.parameters(), back.parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()


def test_clone_is_independent():
    m = build_model(ModelConfig(**TWO_STAGE), 2)
    twin = m.clone()
    twin.backbone["backbone.conv0.bias"].data[:] = 1.0
    assert np.all(m.backbone["backbone.conv0.bias"].data == 0.0)
