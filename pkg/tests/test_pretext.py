import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from gebd_ssl.config import resolve
from gebd_ssl.data import VideoFrames
from gebd_ssl.encoder import ContrastiveModel, EncoderConfig
from gebd_ssl.pretext import (
    AugmentConfig, NegativeQueue, PretrainState, augment, build_state, clip_indices, compute_losses,
    consensus, info_nce, inter_loss, intra_loss, make_batch, non_identity_permutation,
    order_regularizer, pretrain, pretrain_step, queue_push, sample_clip_tuples, segment_bounds,
    segment_loss, triplet_indices,
)

from oracles import ListQueue, info_nce_direct


def unit(rng, *shape):
    return F.normalize(torch.from_numpy(rng.standard_normal(shape)), dim=-1)


def video(T=12, side=32, seed=0):
    frames = np.random.default_rng(seed).integers(0, 256, size=(T, 3, side, side), dtype=np.uint8)
    return VideoFrames(f"v{seed}", frames, 10.0)


# ---------------------------------------------------------------- InfoNCE and the four losses

def test_info_nce_closed_form_example():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    n = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert info_nce(q, q, n, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


@given(st.integers(1, 50))
def test_info_nce_uniform_case(N):
    q = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    negs = q.expand(N, 3)
    assert info_nce(q, q, negs, 0.01).item() == pytest.approx(math.log(N + 1), abs=1e-9)


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_info_nce_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    q, p, negs = unit(rng, 4), unit(rng, 4), unit(rng, 6, 4)
    # appending a constant coordinate to every vector adds the same value to every similarity
    pad = lambda x, v: torch.cat([x, torch.full((*x.shape[:-1], 1), v, dtype=x.dtype)], -1)  # noqa: E731
    base = info_nce(q, p, negs, 0.5)
    shifted = info_nce(pad(q, 1.0), pad(p, c), pad(negs, c), 0.5)
    assert shifted.item() == pytest.approx(base.item(), abs=1e-9)


def test_info_nce_positive_dominance_goes_to_zero():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    n = torch.tensor([[-1.0, 0.0]], dtype=torch.float64)
    assert info_nce(q, q, n, 0.01).item() < 1e-60


def test_intra_matches_direct(rng):
    q, p, n2, n3 = (unit(rng, 3, 16) for _ in range(4))
    want = np.mean([info_nce_direct(q[i], p[i], [n2[i], n3[i]], 0.01) for i in range(3)])
    assert intra_loss(q, p, n2, n3, 0.01).item() == pytest.approx(want, abs=1e-6)


def test_intra_uniform_is_ln3():
    q = unit(np.random.default_rng(0), 1, 8)
    assert intra_loss(q, q, q, q).item() == pytest.approx(math.log(3), abs=1e-9)


def test_inter_matches_direct(rng):
    q, p1, p2, p3 = (unit(rng, 2, 16) for _ in range(4))
    queue = unit(rng, 20, 16)
    want = np.mean([np.mean([info_nce_direct(q[i], p[i], queue, 0.01) for p in (p1, p2, p3)])
                    for i in range(2)])
    assert inter_loss(q, p1, p2, p3, queue, 0.01).item() == pytest.approx(want, abs=1e-6)


def test_inter_identical_positives_equal_single_term(rng):
    q, p = unit(rng, 1, 8), unit(rng, 1, 8)
    queue = unit(rng, 5, 8)
    assert inter_loss(q, p, p, p, queue).item() == pytest.approx(info_nce(q, p, queue).item(), abs=1e-9)


def test_inter_uniform_two_negatives_is_ln3():
    q = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    queue = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([[0.0, -1.0, 0.0]], dtype=torch.float64)  # orthogonal to q, like the negatives
    assert inter_loss(q, p, p, p, queue).item() == pytest.approx(math.log(3), abs=1e-12)


def test_losses_reject_empty_queue(rng):
    q = unit(rng, 1, 4)
    with pytest.raises(ValueError):
        inter_loss(q, q, q, q, torch.zeros(0, 4))


def test_consensus_is_nested_mean(rng):
    f = torch.from_numpy(rng.standard_normal((2, 3, 4, 5)))
    want = np.array([[np.mean([np.mean(f[b, k, :, d].numpy()) for k in range(3)]) for d in range(5)]
                     for b in range(2)])
    np.testing.assert_allclose(consensus(f).numpy(), want, atol=1e-12)


def test_segment_matches_direct(rng):
    fa = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    fp = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    queue = unit(rng, 10, 8)
    proj = lambda e: F.normalize(e, dim=-1)  # noqa: E731
    got = segment_loss(fa, fp, queue, project_query=proj, project_key=proj, temperature=0.01).item()
    qa, qp = proj(consensus(fa)), proj(consensus(fp))
    want = np.mean([info_nce_direct(qa[i], qp[i], queue, 0.01) for i in range(2)])
    assert got == pytest.approx(want, abs=1e-6)


def test_segment_identical_frames_reduce_to_single_frame():
    e = torch.randn(8, dtype=torch.float64)
    f = e.expand(1, 3, 4, 8)
    proj = lambda x: F.normalize(x, dim=-1)  # noqa: E731
    torch.testing.assert_close(proj(consensus(f))[0], proj(e))


def test_segment_closed_form_tau1():
    e = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f = e[:, None, None, :].expand(1, 3, 4, 2)
    queue = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    proj = lambda x: F.normalize(x, dim=-1)  # noqa: E731
    got = segment_loss(f, f, queue, project_query=proj, project_key=proj, temperature=1.0).item()
    assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_order_regularizer_degraded_averaging_is_zero(rng):
    fa = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    fp = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    proj = lambda e: F.normalize(e, dim=-1)  # noqa: E731
    val = order_regularizer(fa, fp, unit(rng, 5, 8), (2, 0, 1), project_query=proj, project_key=proj)
    assert val.item() == 0.0


def test_order_regularizer_matches_two_nce_difference(rng):
    fa = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    fp = torch.from_numpy(rng.standard_normal((2, 3, 4, 8)))
    queue = unit(rng, 5, 8)
    W = torch.from_numpy(rng.standard_normal((8, 24)))
    agg = lambda c: c.reshape(c.shape[0], -1) @ W.T  # noqa: E731
    proj = lambda e: F.normalize(e, dim=-1)  # noqa: E731
    got = order_regularizer(fa, fp, queue, (2, 0, 1), project_query=proj, project_key=proj,
                            aggregate_query=agg, aggregate_key=agg, temperature=0.5).item()
    ca, cp = fa.mean(2), fp.mean(2)
    q, qs, p = proj(agg(ca)), proj(agg(ca[:, [2, 0, 1]])), proj(agg(cp))
    terms = []
    for i in range(2):
        with_shuf = list(queue) + [qs[i]]
        d = info_nce_direct(q[i], p[i], with_shuf, 0.5) - info_nce_direct(q[i], p[i], queue, 0.5)
        terms.append(max(d, 0.0))
    assert got == pytest.approx(float(np.mean(terms)), abs=1e-9)


@given(st.integers(0, 10_000))
def test_order_regularizer_nonnegative(seed):
    rng = np.random.default_rng(seed)
    fa = torch.from_numpy(rng.standard_normal((2, 3, 2, 4)))
    fp = torch.from_numpy(rng.standard_normal((2, 3, 2, 4)))
    W = torch.from_numpy(rng.standard_normal((4, 12)))
    agg = lambda c: c.reshape(c.shape[0], -1) @ W.T  # noqa: E731
    proj = lambda e: F.normalize(e, dim=-1)  # noqa: E731
    val = order_regularizer(fa, fp, unit(rng, 3, 4), (1, 2, 0), project_query=proj, project_key=proj,
                            aggregate_query=agg, aggregate_key=agg)
    assert val.item() >= 0


def test_order_regularizer_needs_two_clips(rng):
    f = torch.zeros(1, 1, 2, 4)
    with pytest.raises(ValueError):
        order_regularizer(f, f, unit(rng, 2, 4), (0,), project_query=lambda e: e, project_key=lambda e: e)


def test_non_identity_permutation():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = non_identity_permutation(3, rng)
        assert sorted(p) == [0, 1, 2] and p != (0, 1, 2)
    with pytest.raises(ValueError):
        non_identity_permutation(1, rng)


# ---------------------------------------------------------------- queue

def test_queue_matches_list_oracle():
    rng = np.random.default_rng(42)
    cap, dim = 17, 3
    q, oracle = NegativeQueue(cap, dim, "inter"), ListQueue(cap)
    counter = 0
    for _ in range(10_000):
        n = int(rng.integers(0, 6))
        keys = F.normalize(torch.randn(n, dim, dtype=torch.float64), dim=1) if n else torch.zeros(0, dim)
        # tag every key with a unique id in its norm-preserving sign pattern via a side list
        q.push(keys)
        oracle.push([k.clone() for k in keys])
        counter += n
        assert q.size == min(counter, cap) == len(oracle.items)
    torch.testing.assert_close(q.contents(), torch.stack(oracle.items).to(q.contents().dtype))


def test_queue_fifo_eviction_example():
    q = NegativeQueue(4, 2)
    e = torch.eye(2)
    keys = torch.stack([e[0], e[1], -e[0], -e[1]])
    q.push(keys)
    q.push(torch.stack([e[0], e[0]]))
    torch.testing.assert_close(q.contents(), torch.stack([-e[0], -e[1], e[0], e[0]]))


def test_queue_errors():
    q = NegativeQueue(2, 2, "inter")
    with pytest.raises(ValueError):
        q.push(F.normalize(torch.randn(3, 2), dim=1))
    with pytest.raises(ValueError):
        q.push(torch.ones(1, 2))
    with pytest.raises(ValueError):
        q.push(F.normalize(torch.randn(1, 2), dim=1), source="segment")
    queue_push(q, F.normalize(torch.randn(1, 2), dim=1))
    assert q.size == 1


def test_queue_state_round_trip():
    q = NegativeQueue(5, 3, "segment").fill_random(torch.Generator().manual_seed(0))
    r = NegativeQueue(5, 3, "segment")
    r.load_state_dict(q.state_dict())
    torch.testing.assert_close(r.contents(), q.contents())


# ---------------------------------------------------------------- sampling and augmentation

def test_triplet_uniformity():
    counts = np.zeros(10)
    for s in range(10_000):
        idx = triplet_indices(10, s)
        assert len(set(idx)) == 3
        counts[list(idx)] += 1
    np.testing.assert_allclose(counts / 10_000, 0.3, atol=0.02)


def test_triplet_three_frames_and_errors():
    assert sorted(triplet_indices(3, 5)) == [0, 1, 2]
    assert triplet_indices(50, 9) == triplet_indices(50, 9)
    with pytest.raises(ValueError):
        triplet_indices(2, 0)


def test_segment_bounds_equal_split():
    assert segment_bounds(90, 3) == [(0, 30), (30, 60), (60, 90)]


def test_clip_indices_forced_and_ordered():
    a, p, _ = clip_indices(12, 3, 4, seed=1)
    np.testing.assert_array_equal(a, np.arange(12).reshape(3, 4))
    np.testing.assert_array_equal(p, a)
    for s in range(1000):
        a, p, bounds = clip_indices(47, 3, 4, s)
        for idx in (a, p):
            for k, (lo, hi) in enumerate(bounds):
                assert np.all(np.diff(idx[k]) == 1) and lo <= idx[k][0] and idx[k][-1] < hi
    with pytest.raises(ValueError):
        clip_indices(11, 3, 4, 0)


def test_augment_determinism_and_disabled():
    v = video()
    a = augment(v.frames[0], 7, 32)
    torch.testing.assert_close(a, augment(v.frames[0], 7, 32))
    assert not torch.equal(a, augment(v.frames[0], 8, 32))
    plain = augment(v.frames[0], 7, 16, AugmentConfig.disabled())
    want = F.interpolate(torch.from_numpy(v.frames[:1]).float() / 255, size=(16, 16), mode="bilinear",
                         antialias=True, align_corners=False)[0]
    torch.testing.assert_close(plain, want, atol=1e-5, rtol=0)


def test_augment_clip_shares_parameters():
    v = video()
    clip = np.stack([v.frames[0], v.frames[0]])
    out = augment(clip, 3, 32)
    torch.testing.assert_close(out[0], out[1])


def test_sample_clip_tuples_shapes():
    pair = sample_clip_tuples(video(T=24), K=3, clip_len=4, seed=0, side=32)
    assert pair.anchor.shape == (3, 4, 3, 32, 32) and pair.positive.shape == pair.anchor.shape


# ---------------------------------------------------------------- training step

def _batch(n=2, seed=0):
    vids = [video(T=24, seed=i) for i in range(n)]
    return make_batch(vids, seed=seed, K=3, clip_len=4, side=32)


def test_total_is_exact_component_sum():
    torch.manual_seed(0)
    model = ContrastiveModel(EncoderConfig.tiny())
    gen = torch.Generator().manual_seed(0)
    qi = NegativeQueue(16, 32, "inter").fill_random(gen)
    qs = NegativeQueue(16, 32, "segment").fill_random(gen)
    bundle, keys = compute_losses(model, _batch(), qi, qs)
    assert bundle.total.item() == (bundle.intra + bundle.inter + bundle.segment + bundle.order).item()
    assert all(v >= 0 for v in bundle.as_floats().values())
    assert keys["inter"].shape == (2, 32) and keys["segment"].shape == (2, 32)


def test_step_determinism_and_queue_separation():
    cfg = resolve(overrides=["pretrain.queue_size=16"])
    b = _batch()
    states = [build_state(cfg, EncoderConfig.tiny(), 10, 5, seed=3) for _ in range(2)]
    for s in states:
        pretrain_step(b, s)
    for a, c in zip(states[0].model.parameters(), states[1].model.parameters()):
        torch.testing.assert_close(a, c, rtol=0, atol=0)
    s = states[0]
    assert s.inter_queue.name == "inter" and s.segment_queue.name == "segment"
    assert not torch.allclose(s.inter_queue.contents()[-2:], s.segment_queue.contents()[-2:])
    with pytest.raises(ValueError):
        s.segment_queue.push(s.inter_queue.contents()[-2:], source="inter")


def test_end_to_end_gradient_matches_finite_differences():
    """Directional derivatives of L_total along random parameter directions, float64."""
    torch.manual_seed(0)
    model = ContrastiveModel(EncoderConfig.tiny()).double()
    gen = torch.Generator().manual_seed(1)
    qi = NegativeQueue(8, 32, "inter").fill_random(gen)
    qs = NegativeQueue(8, 32, "segment").fill_random(gen)
    qi.buffer, qs.buffer = qi.buffer.double(), qs.buffer.double()
    b = _batch(2, seed=4)
    for name in ("v1_anchor", "v1_positive", "v2", "v3", "tuple_anchor", "tuple_positive"):
        setattr(b, name, getattr(b, name).double())
    params = [p for p in model.query.parameters() if p.requires_grad]
    loss = lambda: compute_losses(model, b, qi, qs, temperature=0.1)[0].total  # noqa: E731
    model.zero_grad()
    loss().backward()
    grads = [p.grad.clone() for p in params]
    rng = torch.Generator().manual_seed(2)
    eps = 1e-6
    for _ in range(3):
        dirs = [torch.randn(p.shape, generator=rng, dtype=torch.float64) for p in params]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            up = loss().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            down = loss().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8)


def test_pretrain_smoke_loss_decreases(tmp_path):
    from gebd_ssl.data import generate_corpus, load_corpus
    corpus = load_corpus(generate_corpus(tmp_path / "c", 16, seed=1))
    cfg = resolve(overrides=["pretrain.steps=50", "pretrain.queue_size=64"])
    ckpt = pretrain([corpus.videos[v] for v in corpus.split("train") + corpus.split("val")], cfg, tmp_path / "out")
    assert ckpt.exists()
    losses = np.genfromtxt(tmp_path / "out" / "losses.csv", delimiter=",", names=True)
    assert losses["L_total"][-10:].mean() < losses["L_total"][:5].mean()
    header = (tmp_path / "out" / "losses.csv").read_text().splitlines()[0]
    assert header == "step,L_intra,L_inter,L_segment,L_order,L_total"
