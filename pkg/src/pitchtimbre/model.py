"""Query-conditioned U-Net with transcriptor and pitch/timbre disentanglement.

Tensors follow ``(batch, channels, time, freq)``. No layer ever pools or strides
along time, so every latent level keeps the input frame count.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

MSI = "MSI"
MSI_DIS = "MSI-DIS"
MSS_ONLY = "MSS-only"
AMT_ONLY = "AMT-only"
MULTI_TASK = "Multi-task"
VARIANTS = (MSI, MSI_DIS, MSS_ONLY, AMT_ONLY, MULTI_TASK)

HAS_DECODER = {MSI, MSI_DIS, MSS_ONLY, MULTI_TASK}
HAS_TRANSCRIPTOR = {MSI, MSI_DIS, AMT_ONLY, MULTI_TASK}
DISENTANGLED = {MSI, MSI_DIS}
OUTPUT_SHARPNESS = 20.0


@dataclass
class ModelConfig:
    variant: str = MSI_DIS
    n_freqs: int = 1025
    channels: tuple = (32, 64, 128, 256)
    query_channels: tuple = (32, 64)
    transcriptor_channels: tuple = (64, 64)
    pitch_dim: int = 128
    query_dim: int = 6
    n_notes: int = 89
    film_init_scale: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pitch_dim % 2:
            raise ValueError("pitch_dim must be even (gamma/beta halves)")
        self.channels = tuple(self.channels)
        self.query_channels = tuple(self.query_channels)
        self.transcriptor_channels = tuple(self.transcriptor_channels)

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    @property
    def padded_freqs(self) -> int:
        step = 2 ** self.n_levels
        return -(-self.n_freqs // step) * step

    @property
    def level_channels(self) -> tuple:
        """Channel width of each latent level: skips, then the bottleneck."""
        return self.channels + (self.channels[-1],)

    @property
    def entangled_levels(self) -> tuple:
        if self.variant == MSI_DIS:
            return tuple(range(self.n_levels + 1))
        if self.variant == MSI:
            return (self.n_levels,)
        return ()

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def small_config(variant: str = MSI_DIS, n_freqs: int = 129, **kw) -> ModelConfig:
    """Desk-scale 4-level model used by the toy experiments."""
    defaults = dict(channels=(8, 16, 32, 32), query_channels=(8, 16),
                    transcriptor_channels=(32, 32), pitch_dim=32)
    defaults.update(kw)
    return ModelConfig(variant=variant, n_freqs=n_freqs, **defaults)


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by ReLU then batch norm."""

    def __init__(self, c_in: int, c_out: int, circular_time: bool = False):
        layers = []
        for i in range(2):
            layers += [_conv3x3(c_in if i == 0 else c_out, c_out, circular_time),
                       nn.ReLU(), nn.BatchNorm2d(c_out)]
        super().__init__(*layers)


class _CircularTimeConv(nn.Conv2d):
    # wraps time, zero-pads frequency
    def forward(self, x):
        x = F.pad(x, (0, 0, 1, 1), mode="circular")
        x = F.pad(x, (1, 1, 0, 0))
        return super().forward(x)


def _conv3x3(c_in, c_out, circular_time=False):
    if circular_time:
        return _CircularTimeConv(c_in, c_out, 3, padding=0)
    return nn.Conv2d(c_in, c_out, 3, padding=1)


class FiLM(nn.Module):
    """Per-channel scale and shift predicted from a conditioning vector."""

    def __init__(self, cond_dim: int, channels: int, init_scale: float = 0.1):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        with torch.no_grad():
            self.proj.weight.mul_(init_scale)
            self.proj.bias.zero_()
            self.proj.bias[:channels] = 1.0

    def forward(self, x, cond):
        gamma, beta = self.proj(cond).chunk(2, dim=-1)
        return gamma[:, :, None, None] * x + beta[:, :, None, None]


class QueryNet(nn.Module):
    """Spectrogram -> M-dim embedding in [-1, 1], averaged over time.

    Time is padded circularly, so a clip tiled with itself (at a multiple of
    four frames) yields the same embedding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1 = cfg.query_channels
        self.block1 = ConvBlock(1, c0, circular_time=True)
        self.block2 = ConvBlock(c0, c1, circular_time=True)
        self.fc = nn.Linear(c1 * (cfg.padded_freqs // 4), cfg.query_dim)

    def forward(self, spec):
        if spec.shape[-2] < 4:
            raise ValueError(f"query needs at least 4 frames, got {spec.shape[-2]}")
        x = F.max_pool2d(self.block1(spec), 2)
        x = F.max_pool2d(self.block2(x), 2)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        return torch.tanh(self.fc(x)).mean(dim=1)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = (1,) + cfg.channels
        self.blocks = nn.ModuleList(ConvBlock(widths[i], widths[i + 1]) for i in range(cfg.n_levels))
        self.films = nn.ModuleList(FiLM(cfg.query_dim, c, cfg.film_init_scale) for c in cfg.channels)
        self.bottleneck = ConvBlock(cfg.channels[-1], cfg.channels[-1])
        self.bottleneck_film = FiLM(cfg.query_dim, cfg.channels[-1], cfg.film_init_scale)

    def forward(self, x, q):
        levels = []
        for block, film in zip(self.blocks, self.films):
            x = film(block(x), q)
            levels.append(x)
            x = F.max_pool2d(x, (1, 2))
        levels.append(self.bottleneck_film(self.bottleneck(x), q))
        return levels


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.level_channels
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[l + 1], chans[l], (1, 2), stride=(1, 2)) for l in range(cfg.n_levels))
        self.blocks = nn.ModuleList(ConvBlock(2 * c, c) for c in cfg.channels)
        self.out = nn.Conv2d(cfg.channels[0], 1, 1)

    def forward(self, levels):
        x = levels[-1]
        for l in reversed(range(len(self.blocks))):
            x = self.blocks[l](torch.cat([self.ups[l](x), levels[l]], dim=1))
        # sharp softplus rather than ReLU: a dead ReLU over every valid bin stalls PTI training
        return F.softplus(self.out(x), beta=OUTPUT_SHARPNESS)


class Transcriptor(nn.Module):
    """QueryNet-like head without temporal pooling: per-frame softmax over notes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1 = cfg.transcriptor_channels
        self.block1 = ConvBlock(cfg.level_channels[-1], c0)
        self.block2 = ConvBlock(c0, c1)
        f = cfg.padded_freqs // 2 ** cfg.n_levels // 4
        if f < 1:
            raise ValueError("too few frequency bins for the transcriptor")
        self.fc = nn.Linear(c1 * f, cfg.n_notes)

    def logits(self, h):
        x = F.max_pool2d(self.block1(h), (1, 2))
        x = F.max_pool2d(self.block2(x), (1, 2))
        b, c, t, f = x.shape
        return self.fc(x.permute(0, 2, 1, 3).reshape(b, t, c * f))

    def forward(self, h):
        return torch.softmax(self.logits(h), dim=-1)


def pitch_extract(y, codebook):
    """``p[t] = sum_n y[t, n] * e_n``; ``y`` is (..., T, N), codebook (N, K)."""
    if y.shape[-1] != codebook.shape[0]:
        raise ValueError(f"roll has {y.shape[-1]} classes, codebook {codebook.shape[0]}")
    return y @ codebook


def entangle(gamma, beta, ti):
    """``z = gamma * ti + beta`` with (B, C, T) modulations broadcast over frequency."""
    if gamma.shape != beta.shape or gamma.shape != ti.shape[:3]:
        raise ValueError(f"modulation {tuple(gamma.shape)} does not match timbre {tuple(ti.shape)}")
    return gamma[..., None] * ti + beta[..., None]


class PitchExtractor(nn.Module):
    """Pitch codebook plus one 1x1 projection pair per latent level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        half = cfg.pitch_dim // 2
        self.codebook = nn.Parameter(torch.randn(cfg.n_notes, cfg.pitch_dim))
        self.to_gamma = nn.ModuleList(nn.Conv1d(half, c, 1) for c in cfg.level_channels)
        self.to_beta = nn.ModuleList(nn.Conv1d(half, c, 1) for c in cfg.level_channels)
        with torch.no_grad():
            for conv in self.to_gamma:
                conv.bias.fill_(1.0)

    def forward(self, y):
        return pitch_extract(y, self.codebook)

    def modulation(self, p, level: int):
        p_gamma, p_beta = p.transpose(1, 2).chunk(2, dim=1)
        return self.to_gamma[level](p_gamma), self.to_beta[level](p_beta)


class TimbreFilter(nn.Module):
    """One shape-preserving 3x3 convolution per level, no activation or norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for c in cfg.level_channels)

    def forward(self, levels, which=None):
        which = range(len(levels)) if which is None else which
        return {l: self.convs[l](levels[l]) for l in which}


class SeparationModel(nn.Module):
    """All five variants share this class; the variant picks the wiring.

    MSI and MSI-DIS instantiate identical parameters and differ only in which
    levels pass through the entangle step (bottleneck vs. every level).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.query_net = QueryNet(cfg)
        self.encoder = Encoder(cfg)
        v = cfg.variant
        self.decoder = Decoder(cfg) if v in HAS_DECODER else None
        self.transcriptor = Transcriptor(cfg) if v in HAS_TRANSCRIPTOR else None
        if v in DISENTANGLED:
            self.pitch_extractor = PitchExtractor(cfg)
            self.timbre_filter = TimbreFilter(cfg)
        else:
            self.pitch_extractor = None
            self.timbre_filter = None

    @property
    def variant(self) -> str:
        return self.cfg.variant

    # -- shape plumbing ----------------------------------------------------
    def _to_input(self, spec):
        if spec.shape[-1] != self.cfg.n_freqs:
            raise ValueError(f"expected {self.cfg.n_freqs} frequency bins, got {spec.shape[-1]}")
        if spec.dim() == 2:
            spec = spec[None]
        x = spec[:, None]
        return F.pad(x, (0, self.cfg.padded_freqs - self.cfg.n_freqs))

    def _from_output(self, x):
        return x[:, 0, :, : self.cfg.n_freqs]

    # -- pieces ------------------------------------------------------------
    def embed_query(self, query_spec):
        return self.query_net(self._to_input(query_spec))

    def encode(self, mix, q):
        return self.encoder(self._to_input(mix), q)

    def transcribe_latent(self, levels):
        return self.transcriptor(levels[-1])

    def entangle_levels(self, p, levels, timbre=None):
        """Replace the entangled levels of ``levels`` by ``gamma(p) * ti + beta(p)``."""
        which = self.cfg.entangled_levels
        ti = timbre if timbre is not None else self.timbre_filter(levels, which)
        z = list(levels)
        for l in which:
            gamma, beta = self.pitch_extractor.modulation(p, l)
            z[l] = entangle(gamma, beta, ti[l])
        return z, ti

    def decode(self, levels):
        return self._from_output(self.decoder(levels))

    def reconstruct(self, mix, q, y):
        """Decode from the timbre of ``mix`` and the pitch of roll ``y``.

        This is the synthesis path and also the cross-reconstruction used by
        the pitch-translation invariance loss.
        """
        if self.variant not in DISENTANGLED:
            raise ValueError(f"variant {self.variant} has no pitch/timbre disentanglement")
        levels = self.encode(mix, q)
        p = self.pitch_extractor(y)
        z, _ = self.entangle_levels(p, levels)
        return self.decode(z)

    def forward(self, mix, query_spec=None, query=None, score=None):
        """Run the variant's full graph.

        Returns a dict with ``query``, ``latent`` and, as applicable,
        ``roll`` (predicted probabilities), ``pitch``, ``timbre``, ``spec``.
        Passing ``score`` (one-hot roll) substitutes it for the predicted roll.
        """
        if score is not None and self.variant not in DISENTANGLED:
            raise ValueError(f"variant {self.variant} cannot take an external score")
        q = query if query is not None else self.embed_query(query_spec)
        levels = self.encode(mix, q)
        out = {"query": q, "latent": levels}
        if self.transcriptor is not None:
            out["roll"] = self.transcribe_latent(levels)
        if self.variant in DISENTANGLED:
            y = score if score is not None else out["roll"]
            if y.dim() == 2:
                y = y[None]
            p = self.pitch_extractor(y)
            z, ti = self.entangle_levels(p, levels)
            out.update(pitch=p, timbre=ti, entangled=z, spec=self.decode(z))
        elif self.decoder is not None:
            out["spec"] = self.decode(levels)
        return out


def build_model(cfg: ModelConfig) -> SeparationModel:
    return SeparationModel(cfg)


def parameter_shapes(model: nn.Module) -> dict:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}
