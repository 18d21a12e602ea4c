import pytest
import torch

from pitchtimbre.model import (
    AMT_ONLY,
    MSI,
    MSI_DIS,
    MSS_ONLY,
    MULTI_TASK,
    VARIANTS,
    ModelConfig,
    TimbreFilter,
    build_model,
    entangle,
    parameter_shapes,
    pitch_extract,
    small_config,
)

T, F = 24, 129


def tiny(variant=MSI_DIS, **kw):
    torch.manual_seed(0)
    return build_model(small_config(variant, n_freqs=F, **kw)).double().eval()


def rand_spec(t=T, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, t, F, generator=g, dtype=torch.float64)


def one_hot(labels, n=89):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), n).double()


# -- query net ------------------------------------------------------------------

def test_query_zero_input_deterministic():
    m = tiny()
    a = m.embed_query(torch.zeros(1, 16, F, dtype=torch.float64))
    b = m.embed_query(torch.zeros(1, 16, F, dtype=torch.float64))
    assert a.shape == (1, 6)
    assert torch.equal(a, b)


def test_query_bounds():
    m = tiny()
    q = m.embed_query(rand_spec(batch=4) * 50)
    assert torch.all(q.abs() <= 1)


def test_query_tiling_invariance():
    m = tiny()
    clip = rand_spec(t=20)
    doubled = torch.cat([clip, clip], dim=1)
    assert (m.embed_query(clip) - m.embed_query(doubled)).abs().max() < 1e-6


def test_query_too_short():
    with pytest.raises(ValueError):
        tiny().embed_query(rand_spec(t=3))


# -- encoder -----------------------------------------------------------------------

def test_encoder_query_changes_latent():
    m = tiny()
    x = rand_spec()
    q1 = torch.full((1, 6), 0.5, dtype=torch.float64)
    q2 = -q1
    h1, h2 = m.encode(x, q1), m.encode(x, q2)
    assert sum(float((a - b).norm().detach()) for a, b in zip(h1, h2)) > 0


def test_encoder_zero_input_zero_bias():
    m = tiny()
    with torch.no_grad():
        for name, p in m.encoder.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    levels = m.encode(torch.zeros(1, T, F, dtype=torch.float64), torch.zeros(1, 6, dtype=torch.float64))
    assert all(float(h.abs().max()) == 0 for h in levels)


def test_full_scale_config_keeps_401_frames():
    torch.manual_seed(0)
    cfg = ModelConfig(variant=MSI_DIS, n_freqs=1025, channels=(4, 4, 4, 4), query_channels=(2, 2),
                      transcriptor_channels=(2, 2), pitch_dim=8)
    m = build_model(cfg).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 401, 1025), query_spec=torch.rand(1, 40, 1025))
    assert all(h.shape[2] == 401 for h in out["latent"])
    assert out["spec"].shape == (1, 401, 1025)
    assert out["roll"].shape == (1, 401, 89)


def test_encoder_rejects_wrong_bins():
    with pytest.raises(ValueError):
        tiny().encode(torch.rand(1, T, F + 1, dtype=torch.float64), torch.zeros(1, 6, dtype=torch.float64))


# -- temporal resolution, all variants -------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_time_axis_preserved(variant):
    m = tiny(variant)
    out = m(rand_spec(t=T), query_spec=rand_spec(t=16, seed=1))
    for h in out["latent"]:
        assert h.shape[2] == T
    for ti in out.get("timbre", {}).values():
        assert ti.shape[2] == T
    if "roll" in out:
        assert out["roll"].shape == (1, T, 89)
        assert torch.allclose(out["roll"].sum(-1), torch.ones(1, T, dtype=torch.float64), atol=1e-6)
    if "spec" in out:
        assert out["spec"].shape == (1, T, F)
        assert torch.all(out["spec"] >= 0)


def test_amt_only_has_no_spectrogram():
    out = tiny(AMT_ONLY)(rand_spec(), query_spec=rand_spec(t=16))
    assert "spec" not in out and "roll" in out


def test_mss_only_has_no_roll():
    out = tiny(MSS_ONLY)(rand_spec(), query_spec=rand_spec(t=16))
    assert "roll" not in out and "spec" in out


@pytest.mark.parametrize("variant", [MSS_ONLY, AMT_ONLY, MULTI_TASK])
def test_external_score_rejected_without_disentanglement(variant):
    with pytest.raises(ValueError):
        tiny(variant)(rand_spec(), query_spec=rand_spec(t=16), score=one_hot([88] * T)[None])


def test_msi_and_msi_dis_same_hardware():
    assert parameter_shapes(tiny(MSI)) == parameter_shapes(tiny(MSI_DIS))


# -- pitch extractor ------------------------------------------------------------------

def test_pitch_extract_one_hot_selects_row():
    codebook = torch.randn(89, 8, dtype=torch.float64)
    p = pitch_extract(one_hot([5, 88]), codebook)
    assert torch.equal(p[0], codebook[5]) and torch.equal(p[1], codebook[88])


def test_pitch_extract_uniform_is_mean():
    codebook = torch.randn(89, 8, dtype=torch.float64)
    p = pitch_extract(torch.full((1, 89), 1 / 89, dtype=torch.float64), codebook)
    assert torch.allclose(p[0], codebook.mean(0), atol=1e-12)


def test_pitch_extract_silence_roll_constant():
    codebook = torch.randn(89, 8, dtype=torch.float64)
    p = pitch_extract(one_hot([88] * 10), codebook)
    assert torch.all(p == codebook[88])


def test_pitch_extract_linear():
    g = torch.Generator().manual_seed(1)
    codebook = torch.randn(89, 8, generator=g, dtype=torch.float64)
    y1 = torch.softmax(torch.randn(6, 89, generator=g, dtype=torch.float64), -1)
    y2 = torch.softmax(torch.randn(6, 89, generator=g, dtype=torch.float64), -1)
    for a in (0.0, 0.3, 1.0):
        lhs = pitch_extract(a * y1 + (1 - a) * y2, codebook)
        rhs = a * pitch_extract(y1, codebook) + (1 - a) * pitch_extract(y2, codebook)
        assert torch.allclose(lhs, rhs, atol=1e-12)


def test_pitch_extract_class_mismatch():
    with pytest.raises(ValueError):
        pitch_extract(torch.zeros(3, 88), torch.zeros(89, 4))


# -- timbre filter and entangle ----------------------------------------------------

def test_timbre_filter_shapes_and_linearity():
    cfg = small_config(MSI_DIS, n_freqs=F)
    torch.manual_seed(0)
    tf = TimbreFilter(cfg).double()
    levels = [torch.randn(1, c, T, cfg.padded_freqs // 2 ** l, dtype=torch.float64)
              for l, c in enumerate(cfg.level_channels)]
    out = tf(levels)
    assert [o.shape for o in out.values()] == [h.shape for h in levels]
    with torch.no_grad():
        for conv in tf.convs:
            conv.bias.zero_()
    zero = tf([torch.zeros_like(h) for h in levels])
    assert all(float(z.abs().max()) == 0 for z in zero.values())
    base, scaled = tf(levels), tf([2.5 * h for h in levels])
    for l in base:
        assert torch.allclose(scaled[l], 2.5 * base[l], atol=1e-12)


def test_entangle_identities():
    ti = torch.randn(2, 3, 5, 7, dtype=torch.float64)
    ones, zeros = torch.ones(2, 3, 5, dtype=torch.float64), torch.zeros(2, 3, 5, dtype=torch.float64)
    assert torch.equal(entangle(ones, zeros, ti), ti)
    beta = torch.randn(2, 3, 5, dtype=torch.float64)
    z = entangle(zeros, beta, ti)
    assert torch.equal(z, beta[..., None].expand_as(ti))


def test_entangle_scalar():
    z = entangle(torch.full((1, 1, 1), 2.0), torch.full((1, 1, 1), 1.0), torch.full((1, 1, 1, 1), 3.0))
    assert float(z) == 7.0


def test_entangle_shape_mismatch():
    with pytest.raises(ValueError):
        entangle(torch.ones(1, 2, 5), torch.ones(1, 2, 5), torch.ones(1, 3, 5, 4))


# -- synthesis sensitivity and the disentangled wiring ----------------------------------

def test_score_changes_output():
    m = tiny(MSI_DIS)
    x, qs = rand_spec(), rand_spec(t=16, seed=2)
    score = one_hot([60 - 21] * T)[None]
    other = score.clone()
    other[0, 10] = one_hot([64 - 21])
    a = m(x, query_spec=qs, score=score)["spec"]
    b = m(x, query_spec=qs, score=other)["spec"]
    assert float((a - b).abs().mean()) > 0


def _silence_gamma(m):
    with torch.no_grad():
        for conv in m.pitch_extractor.to_gamma:
            conv.weight.zero_()
            conv.bias.zero_()


def test_msi_dis_decoder_only_sees_entangled_levels():
    # With gamma == 0 the entangled levels carry only beta(p); any leak from the
    # encoder into the decoder would make the output depend on the mixture.
    m = tiny(MSI_DIS)
    _silence_gamma(m)
    score = one_hot([50] * T)[None]
    q = torch.full((1, 6), 0.3, dtype=torch.float64)
    a = m(rand_spec(seed=1), query=q, score=score)["spec"]
    b = m(rand_spec(seed=2), query=q, score=score)["spec"]
    assert torch.equal(a, b)


def test_msi_skips_do_leak():
    m = tiny(MSI)
    _silence_gamma(m)
    score = one_hot([50] * T)[None]
    q = torch.full((1, 6), 0.3, dtype=torch.float64)
    a = m(rand_spec(seed=1), query=q, score=score)["spec"]
    b = m(rand_spec(seed=2), query=q, score=score)["spec"]
    assert not torch.equal(a, b)


def test_codebook_gradient_for_active_note():
    m = tiny(MSI_DIS)
    score = one_hot([40] * T)[None]
    out = m(rand_spec(), query_spec=rand_spec(t=16, seed=1), score=score)
    out["spec"].sum().backward()
    grad = m.pitch_extractor.codebook.grad
    assert float(grad[40].abs().sum()) > 0
    assert float(grad[41].abs().sum()) == 0


def test_config_roundtrip():
    cfg = small_config(MSI)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(variant="nope")
    with pytest.raises(ValueError):
        ModelConfig(pitch_dim=7)
