import math
import struct
from fractions import Fraction
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matis.errors import ConfigInvalid, NonFiniteInput, NonFiniteLoss, ShapeMismatch
from matis.gradcheck import grad_check
from matis.temporal import (
    TemporalConfig,
    TemporalHead,
    TemporalWindow,
    ablation_variant,
    build_windows,
    colour_histogram,
    grid_pool,
    fuse_classify,
    load_feature_cache,
    pool_time,
    presence_head,
    relabel_classes,
    save_feature_cache,
    temporal_loss,
    train_temporal,
    window_indices,
)
from matis.benchmark import to_samples, region_labels


@pytest.mark.parametrize(
    "t,w,s,n,expected",
    [
        (10, 8, 1, 100, list(range(6, 14))),
        (0, 8, 1, 100, [0, 0, 0, 0, 0, 1, 2, 3]),
        (10, 4, 2, 100, [6, 8, 10, 12]),
        (99, 8, 1, 100, [95, 96, 97, 98, 99, 99, 99, 99]),
        (3, 1, 5, 10, [3]),
    ],
)
def test_window_examples(t, w, s, n, expected):
    assert window_indices(t, w, s, n) == expected


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 200), st.integers(1, 16), st.integers(1, 4), st.data())
def test_window_invariants(n, w, s, data):
    t = data.draw(st.integers(0, n - 1))
    idx = window_indices(t, w, s, n)
    assert len(idx) == w and all(0 <= i < n for i in idx)
    assert idx == sorted(idx)
    if s == 1 and w // 2 <= t and t + w < n:
        assert idx[w // 2] == t


def test_window_rejects_out_of_range():
    with pytest.raises(IndexError):
        window_indices(5, 8, 1, 5)


def test_pool_time_examples():
    row = np.array([1.5, -2.0, 3.25])
    assert pool_time(np.tile(row, (8, 1))).tolist() == row.tolist()
    assert pool_time(np.stack([row, -row])).tolist() == [0.0, 0.0, 0.0]
    assert pool_time(np.stack([row, -row]), mode="max").tolist() == [1.5, 2.0, 3.25]


@pytest.mark.parametrize("seed", range(5))
def test_pool_time_matches_exact_column_mean(seed):
    x = np.random.default_rng(seed).normal(size=(8, 16))
    oracle = []
    for j in range(16):
        total = Fraction(0)
        for i in range(8):
            total += Fraction(x[i, j])
        oracle.append(float(total / 8))
    got = pool_time(x)
    assert got.tolist() == oracle
    for _ in range(5):
        perm = np.random.default_rng(seed + 100).permutation(8)
        assert pool_time(x[perm]).tolist() == oracle
    assert np.allclose(pool_time(torch.tensor(x)).numpy(), got, rtol=0, atol=1e-15)


def small_cfg(**kw):
    base = dict(window=4, descriptor="grid", grid=2, d_t=6, d_s=5, num_classes=3, temporal_layers=1, seed=1)
    base.update(kw)
    return TemporalConfig(**base)


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def linear(layer, x):
    w = layer.weight.detach().numpy()
    b = layer.bias.detach().numpy()
    return [sum(w[i, j] * x[j] for j in range(len(x))) + b[i] for i in range(w.shape[0])]


def mlp(seq, x):
    return linear(seq[2], [gelu(v) for v in linear(seq[0], x)])


def test_fuse_classify_matches_hand_composition():
    head = TemporalHead(small_cfg()).double()
    rng = np.random.default_rng(0)
    pooled, seg = rng.normal(size=6), rng.normal(size=(4, 5))
    got = fuse_classify(pooled, seg, head).detach().numpy()
    u = mlp(head.time_mlp, list(pooled))
    for q in range(4):
        want = linear(head.classifier, u + linear(head.seg_proj, list(seg[q])))
        assert np.abs(got[q] - want).max() < 1e-9


def test_fuse_classify_rowwise():
    head = TemporalHead(small_cfg()).double()
    rng = np.random.default_rng(1)
    pooled = rng.normal(size=6)
    seg = rng.normal(size=(5, 5))
    seg[3] = seg[1]
    out = fuse_classify(pooled, seg, head).detach()
    assert torch.equal(out[1], out[3])
    perm = rng.permutation(5)
    assert torch.allclose(fuse_classify(pooled, seg[perm], head).detach(), out[perm], rtol=0, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        fuse_classify(pooled, rng.normal(size=(2, 4)), head)
    with pytest.raises(ShapeMismatch):
        fuse_classify(rng.normal(size=5), seg, head)


def test_presence_head_examples():
    head = TemporalHead(small_cfg()).double()
    pooled = np.random.default_rng(2).normal(size=6)
    p = presence_head(pooled, head).detach().numpy()
    want = [1 / (1 + math.exp(-v)) for v in mlp(head.presence_mlp, list(pooled))]
    assert np.abs(p - want).max() < 1e-9 and p.shape == (3,)
    with torch.no_grad():
        for prm in head.presence_mlp.parameters():
            prm.zero_()
    assert presence_head(pooled, head).tolist() == [0.5, 0.5, 0.5]
    with torch.no_grad():
        head.presence_mlp[2].bias.fill_(50.0)
    assert (presence_head(pooled, head) > 1 - 1e-12).all()


def test_temporal_loss_hand_value():
    logits = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]], dtype=torch.float64)
    labels = torch.tensor([0, 2])
    probs = torch.tensor([0.8, 0.3], dtype=torch.float64)
    target = torch.tensor([1.0, 0.0], dtype=torch.float64)
    ce0 = -(1.0 - math.log(math.e + 2))
    ce1 = -(1.0 - math.log(1 + math.e**2 + math.e))
    bce = (-math.log(0.8) - math.log(0.7)) / 2
    got = temporal_loss(logits, labels, probs, target, 0.5)
    assert abs(float(got) - ((ce0 + ce1) / 2 + 0.5 * bce)) < 1e-12
    assert float(temporal_loss(logits, labels, probs, target, 0.0)) == float(torch.nn.functional.cross_entropy(logits, labels))


def test_temporal_loss_limits_and_errors():
    big = 60.0
    logits = torch.tensor([[big, 0.0, 0.0], [0.0, 0.0, big]], dtype=torch.float64)
    probs = torch.tensor([1 - 1e-15, 1e-15], dtype=torch.float64)
    loss = temporal_loss(logits, torch.tensor([0, 2]), probs, torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert 0 <= float(loss) < 1e-12
    with pytest.raises(NonFiniteLoss):
        temporal_loss(torch.tensor([[float("nan"), 0.0]]), torch.tensor([0]))


def test_ablation_wiring():
    cfg = small_cfg()
    off = TemporalHead(ablation_variant(cfg, False, False))
    assert isinstance(off.time_mlp, torch.nn.Identity) and off.presence_mlp is None
    assert ablation_variant(cfg, False, False).effective_lambda == 0.0
    mlp_only, full = TemporalHead(ablation_variant(cfg, True, False)), TemporalHead(ablation_variant(cfg, True, True))
    shapes = lambda h: [(n, p.shape) for n, p in h.named_parameters() if not n.startswith("presence")]
    assert shapes(mlp_only) == shapes(full)
    assert off.classifier.weight.shape == full.classifier.weight.shape
    with pytest.raises(ConfigInvalid):
        presence_head(np.zeros(6), off)


def test_config_validation():
    for bad in (dict(window=0), dict(stride=0), dict(d_t=0), dict(lambda_presence=-1), dict(pool="median"), dict(blend=2)):
        with pytest.raises(ConfigInvalid):
            TemporalConfig(**bad)
    assert TemporalConfig(d_t=16, d_s=40).d_h == 40


def test_window_record_validation():
    TemporalWindow("f", np.zeros((8, 3)))
    with pytest.raises(NonFiniteInput):
        TemporalWindow("f", np.full((8, 3), np.nan))
    with pytest.raises(ShapeMismatch):
        TemporalWindow("f", np.zeros(8))


def test_grad_check_end_to_end():
    cfg = small_cfg(temporal_layers=2)
    head = TemporalHead(cfg).double()
    gen = torch.Generator().manual_seed(0)
    windows = torch.rand(3, 4, cfg.d_f, generator=gen, dtype=torch.float64)
    seg = torch.randn(7, 5, generator=gen, dtype=torch.float64)
    window_of = torch.tensor([0, 0, 1, 1, 1, 2, 2])
    labels = torch.tensor([1, 2, 0, 3, 1, 2, 2])
    presence = (torch.rand(3, 3, generator=gen) < 0.5).double()

    def loss():
        logits, probs = head(windows, seg, window_of)
        return temporal_loss(logits, labels, probs, presence, 1.0)

    res = grad_check(loss, list(head.parameters()), eps=1e-5, n=200, seed=0)
    assert res.checked == 200 and res.max_rel < 1e-4


def test_colour_histogram():
    img = np.zeros((3, 2, 2))
    img[0, 0, 0] = 1.0  # pure red pixel
    img[:, 1, 1] = 0.6  # grey pixel, level 2 of 4 on every channel
    h = colour_histogram(img, 4)
    assert h.shape == (64,) and h.sum() == pytest.approx(1.0)
    assert h[0] == 0.5 and h[3 * 16] == 0.25 and h[2 * 16 + 2 * 4 + 2] == 0.25
    perm = img[:, ::-1, :]
    assert np.array_equal(colour_histogram(perm, 4), h)


def test_descriptor_block_means():
    img = np.arange(3 * 4 * 4, dtype=np.float32).reshape(3, 4, 4)
    d = grid_pool(img, 2)
    assert d.shape == (12,)
    assert d[0] == np.mean([0, 1, 4, 5]) and d[3] == np.mean([10, 11, 14, 15])
    with pytest.raises(ShapeMismatch):
        grid_pool(img, 3)


def test_feature_cache_round_trip(tmp_path):
    feats = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    ids = [f"v0001_f{t:04d}" for t in range(5)]
    save_feature_cache(tmp_path / "v0001", ids, feats)
    frames, back = load_feature_cache(tmp_path / "v0001")
    assert frames == ids and back.tobytes() == feats.tobytes()
    # independent parse: struct unpack of little-endian floats using the JSON index
    index = json.loads((tmp_path / "v0001.json").read_text())
    raw = (tmp_path / "v0001.bin").read_bytes()
    dim = index["dim"]
    for fid, row in index["frames"].items():
        vals = struct.unpack_from(f"<{dim}f", raw, 4 * dim * row)
        assert list(vals) == feats[ids.index(fid)].tolist()


def test_relabel_replace_and_blend():
    temporal = np.array([[0.1, 0.2, 0.7], [0.5, 0.3, 0.2]])
    base = np.array([[0.0, 0.9, 0.1], [0.0, 0.1, 0.9]])
    assert relabel_classes(temporal, base).tolist() == [2, 1]
    assert relabel_classes(temporal, base, blend=0.0).tolist() == [1, 2]


def test_train_temporal_learns_from_window_context():
    # class of every region is only visible in the window descriptors
    cfg = small_cfg(window=3, d_t=8, d_s=4, num_classes=2, temporal_layers=1)
    rng = np.random.default_rng(0)
    K = 60
    cls = rng.integers(1, 3, size=K)
    windows = rng.normal(scale=0.1, size=(K, 3, cfg.d_f))
    windows[:, :, 0] += np.where(cls == 1, 1.0, -1.0)[:, None]
    from matis.temporal import RegionSamples

    samples = RegionSamples(
        [str(k) for k in range(K)], windows.astype(np.float32), np.eye(3)[cls][:, 1:],
        rng.normal(size=(K, 4)), np.arange(K), cls,
    )
    head, curve = train_temporal(samples, cfg, epochs=60, lr=1e-2, batch_frames=16)
    assert curve[-1] < 0.3 * curve[0]
    head2, curve2 = train_temporal(samples, cfg, epochs=60, lr=1e-2, batch_frames=16)
    assert curve == curve2
