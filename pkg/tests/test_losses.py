import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import central_difference_check, miniature_model
from pitchtimbre.losses import (
    LossReport,
    aggregate,
    batch_query_loss,
    pti_loss,
    query_loss,
    separation_loss,
    transcription_loss,
)
from pitchtimbre.model import MSI, MSI_DIS, VARIANTS

D = torch.float64


def vec(*xs):
    return torch.tensor(xs, dtype=D)


def at_distance(anchor, d, axis=0):
    out = anchor.clone()
    out[axis] += d
    return out


# -- query loss ----------------------------------------------------------------

def test_query_loss_zero_when_satisfied():
    q = vec(0.1, 0.2, 0.3, 0.0, 0.0, 0.0)
    negs = torch.stack([at_distance(q, 0.125), at_distance(q, 0.5, 1)])
    assert float(query_loss(q, q.clone(), negs)) == 0.0


def test_query_loss_positive_term_only():
    q = torch.zeros(6, dtype=D)
    loss = query_loss(q, at_distance(q, 0.05), at_distance(q, 0.5, 2)[None])
    assert float(loss) == pytest.approx(0.025, abs=1e-12)


def test_query_loss_hinge_term():
    q = torch.zeros(6, dtype=D)
    pos = at_distance(q, 0.03)
    loss = query_loss(q, pos, at_distance(q, 0.1, 3)[None])
    assert float(loss) == pytest.approx(0.5 * (0.03 + 0.025), abs=1e-12)


def test_query_loss_no_negatives():
    q = torch.zeros(6, dtype=D)
    assert float(query_loss(q, at_distance(q, 0.2), None)) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        query_loss(q, q, None, margin=0)


def test_query_loss_monotone_in_positive_distance():
    q = torch.zeros(6, dtype=D)
    negs = at_distance(q, 0.4, 1)[None]
    values = [float(query_loss(q, at_distance(q, d), negs)) for d in np.linspace(1.0, 0.0, 11)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_batch_query_loss_uses_other_instruments():
    anchors = torch.stack([torch.zeros(6, dtype=D), at_distance(torch.zeros(6, dtype=D), 0.05)])
    loss = batch_query_loss(anchors, anchors.clone(), ["a", "b"])
    # each anchor has one negative at 0.05: hinge 0.075, C = 2
    assert float(loss) == pytest.approx(0.0375, abs=1e-12)
    same = batch_query_loss(anchors, anchors.clone(), ["a", "a"])
    assert float(same) == 0.0


# -- transcription loss ----------------------------------------------------------

def one_hot(labels, n=89):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), n).to(D)


def test_transcription_perfect():
    y = one_hot([3, 88, 10])
    assert float(transcription_loss(y, y)) == 0.0


def test_transcription_uniform():
    y = one_hot([3, 88, 10])
    pred = torch.full_like(y, 1 / 89)
    assert float(transcription_loss(y, pred)) == pytest.approx(math.log(89), abs=1e-6)
    assert math.log(89) == pytest.approx(4.4886, abs=1e-4)


def test_transcription_half():
    y = one_hot([0, 1])
    pred = 0.5 * y + 0.5 * one_hot([5, 5])
    assert float(transcription_loss(y, pred)) == pytest.approx(math.log(2), abs=1e-6)


def test_transcription_zero_prob_finite():
    y = one_hot([0])
    pred = one_hot([1])
    assert float(transcription_loss(y, pred)) == pytest.approx(-math.log(1e-8))


def test_transcription_frame_permutation():
    g = torch.Generator().manual_seed(0)
    y = one_hot(torch.randint(0, 89, (20,), generator=g))
    pred = torch.softmax(torch.randn(20, 89, generator=g, dtype=D), -1)
    perm = torch.randperm(20, generator=g)
    assert float(transcription_loss(y[perm], pred[perm])) == pytest.approx(float(transcription_loss(y, pred)))


# -- separation loss ------------------------------------------------------------

def test_separation_values():
    a = torch.rand(10, 33, dtype=D)
    assert float(separation_loss(a, a)) == 0.0
    assert float(separation_loss(a, a + 0.5)) == pytest.approx(0.5, abs=1e-12)
    b = torch.rand(10, 33, dtype=D)
    assert float(separation_loss(a, b)) == float(separation_loss(b, a))
    with pytest.raises(ValueError):
        separation_loss(a, b[:, :5])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_finite(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(4, 9, generator=g, dtype=D), torch.rand(4, 9, generator=g, dtype=D)
    y = one_hot(torch.randint(0, 89, (4,), generator=g))
    pred = torch.softmax(torch.randn(4, 89, generator=g, dtype=D), -1)
    q = torch.rand(3, 6, generator=g, dtype=D)
    for v in (separation_loss(a, b), transcription_loss(y, pred), query_loss(q[0], q[1], q[2:])):
        assert torch.isfinite(v) and v >= 0


# -- pti loss ------------------------------------------------------------------

def test_pti_zero_shift_equals_reconstruction():
    m = miniature_model(MSI_DIS)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 12, 33, generator=g, dtype=D)
    target = torch.rand(1, 12, 33, generator=g, dtype=D)
    q = m.embed_query(torch.rand(1, 8, 33, generator=g, dtype=D))
    out = m(x, query=q)
    sep = separation_loss(target, out["spec"])
    pti = pti_loss(target, m, x.clone(), out["roll"], q)
    assert abs(float(pti.detach()) - float(sep.detach())) < 1e-6


def test_pti_frame_mismatch():
    m = miniature_model(MSI_DIS)
    with pytest.raises(ValueError):
        pti_loss(torch.rand(1, 12, 33, dtype=D), m, torch.rand(1, 10, 33, dtype=D),
                 torch.rand(1, 12, 89, dtype=D), torch.zeros(1, 6, dtype=D))


def test_pti_gradient_reaches_all_parts():
    m = miniature_model(MSI_DIS).train()
    g = torch.Generator().manual_seed(1)
    x, xs = torch.rand(2, 12, 33, generator=g, dtype=D), torch.rand(2, 12, 33, generator=g, dtype=D)
    target = torch.rand(2, 12, 33, generator=g, dtype=D)
    q = m.embed_query(torch.rand(2, 8, 33, generator=g, dtype=D))
    roll = m.transcribe_latent(m.encode(x, q))
    pti_loss(target, m, xs, roll, q).backward()
    parts = {
        "codebook": [m.pitch_extractor.codebook],
        "timbre_filter": list(m.timbre_filter.parameters()),
        "encoder": list(m.encoder.parameters()),
        "decoder": list(m.decoder.parameters()),
    }
    for name, ps in parts.items():
        total = sum(float(p.grad.abs().sum()) for p in ps if p.grad is not None)
        assert total > 0, name


# -- aggregation ------------------------------------------------------------------

def test_aggregate_sums():
    assert aggregate(MSI, LossReport(0.1, 0.2, 0.3, None)) == pytest.approx(0.6, abs=1e-12)
    assert aggregate(MSI_DIS, LossReport(0.1, 0.2, None, 0.4)) == pytest.approx(0.7, abs=1e-12)
    a = aggregate(MSI_DIS, LossReport(0.1, 0.2, 5.0, 0.4))
    b = aggregate(MSI_DIS, LossReport(0.1, 0.2, 0.0, 0.4))
    assert a == b
    assert aggregate("MSS-only", {"l_query": 1.0, "l_separation": 2.0}) == 3.0
    assert aggregate("AMT-only", {"l_query": 1.0, "l_transcription": 2.0}) == 3.0
    assert aggregate("Multi-task", {"l_query": 1.0, "l_transcription": 2.0, "l_separation": 3.0}) == 6.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_aggregate_missing_part(variant):
    with pytest.raises(ValueError):
        aggregate(variant, LossReport())


# -- finite differences -------------------------------------------------------------

def test_gradcheck_separation_through_model():
    m = miniature_model(MSI)
    g = torch.Generator().manual_seed(2)
    x, target = torch.rand(1, 8, 33, generator=g, dtype=D), torch.rand(1, 8, 33, generator=g, dtype=D)
    qs = torch.rand(1, 8, 33, generator=g, dtype=D)
    err = central_difference_check(lambda: separation_loss(target, m(x, query_spec=qs)["spec"]),
                                   list(m.parameters()))
    assert err < 1e-3


def test_gradcheck_transcription_through_model():
    m = miniature_model(MSI)
    g = torch.Generator().manual_seed(3)
    x, qs = torch.rand(1, 8, 33, generator=g, dtype=D), torch.rand(1, 8, 33, generator=g, dtype=D)
    y = one_hot(torch.randint(0, 89, (8,), generator=g))[None]
    err = central_difference_check(lambda: transcription_loss(y, m(x, query_spec=qs)["roll"]),
                                   list(m.parameters()))
    assert err < 1e-3


def test_gradcheck_query_through_model():
    m = miniature_model(MSI)
    g = torch.Generator().manual_seed(4)
    clips = torch.rand(4, 8, 33, generator=g, dtype=D)

    def loss():
        e = m.embed_query(clips)
        return query_loss(e[0], e[1], e[2:])

    err = central_difference_check(loss, list(m.query_net.parameters()))
    assert err < 1e-3


def test_gradcheck_pti_through_model():
    m = miniature_model(MSI_DIS)
    g = torch.Generator().manual_seed(5)
    x, xs = torch.rand(1, 8, 33, generator=g, dtype=D), torch.rand(1, 8, 33, generator=g, dtype=D)
    target = torch.rand(1, 8, 33, generator=g, dtype=D)
    qs = torch.rand(1, 8, 33, generator=g, dtype=D)

    def loss():
        q = m.embed_query(qs)
        roll = m.transcribe_latent(m.encode(x, q))
        return pti_loss(target, m, xs, roll, q)

    err = central_difference_check(loss, list(m.parameters()))
    assert err < 1e-3
