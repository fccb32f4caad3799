"""Acoustic CNN and VGG-style BWE network builders, plus their composite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import LayerSpec, Network
from .dsp import CONTEXT, N_MELS, context_indices, delta_matrix
from .errors import ConfigError, FreezeError, ShapeError

INPUT_SHAPE = (3, CONTEXT, N_MELS)


@dataclass(frozen=True)
class AcousticModelConfig:
    conv_maps: Tuple[int, int] = (128, 256)
    fc_dim: int = 1024
    n_classes: int = 64
    seed: int = 0
    zero_init_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_maps", tuple(int(m) for m in self.conv_maps))
        if len(self.conv_maps) != 2 or min(self.conv_maps) < 1:
            raise ConfigError(f"conv_maps must be two positive counts, got {self.conv_maps}")
        if self.fc_dim < 1:
            raise ConfigError("fc_dim must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")


@dataclass(frozen=True)
class BweModelConfig:
    conv_maps: Tuple[int, int] = (64, 128)
    fc_dim: int = 1024
    out_dim: int = N_MELS
    output_scale: float = 5.0
    seed: int = 0
    zero_init_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_maps", tuple(int(m) for m in self.conv_maps))
        if len(self.conv_maps) != 2 or min(self.conv_maps) < 1:
            raise ConfigError(f"conv_maps must be two positive counts, got {self.conv_maps}")
        if self.out_dim != N_MELS:
            raise ConfigError(f"BWE maps to one static WB frame: out_dim must be {N_MELS}")
        if self.output_scale <= 0:
            raise ConfigError("output_scale must be positive")
        if self.fc_dim < 1:
            raise ConfigError("fc_dim must be positive")


def _zero_last_linear(net: Network):
    last = [layer for layer in net.layers if layer.spec.kind == "linear"][-1]
    last.weight[...] = 0
    last.bias[...] = 0


def acoustic_layer_specs(cfg: AcousticModelConfig) -> list:
    m1, m2 = cfg.conv_maps
    conv = dict(kernel=(5, 5), stride=(1, 1), padding=(2, 2))
    pool = dict(kernel=(2, 2), stride=(2, 2))
    return [
        LayerSpec("conv2d", in_maps=INPUT_SHAPE[0], out_maps=m1, **conv),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", **pool),
        LayerSpec("conv2d", in_maps=m1, out_maps=m2, **conv),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", **pool),
        LayerSpec("linear", out_dim=cfg.fc_dim),
        LayerSpec("relu"),
        LayerSpec("linear", in_dim=cfg.fc_dim, out_dim=cfg.fc_dim),
        LayerSpec("relu"),
        LayerSpec("linear", in_dim=cfg.fc_dim, out_dim=cfg.fc_dim),
        LayerSpec("sigmoid"),
        LayerSpec("linear", in_dim=cfg.fc_dim, out_dim=cfg.n_classes),
        LayerSpec("softmax_out"),
    ]


def bwe_layer_specs(cfg: BweModelConfig) -> list:
    m1, m2 = cfg.conv_maps
    conv = dict(kernel=(3, 3), stride=(1, 1), padding=(1, 1))
    pool = dict(kernel=(2, 2), stride=(1, 1))
    return [
        LayerSpec("conv2d", in_maps=INPUT_SHAPE[0], out_maps=m1, **conv),
        LayerSpec("relu"),
        LayerSpec("conv2d", in_maps=m1, out_maps=m1, **conv),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", **pool),
        LayerSpec("conv2d", in_maps=m1, out_maps=m2, **conv),
        LayerSpec("relu"),
        LayerSpec("conv2d", in_maps=m2, out_maps=m2, **conv),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", **pool),
        LayerSpec("linear", out_dim=cfg.fc_dim),
        LayerSpec("relu"),
        LayerSpec("linear", in_dim=cfg.fc_dim, out_dim=cfg.fc_dim),
        LayerSpec("relu"),
        LayerSpec("linear", in_dim=cfg.fc_dim, out_dim=cfg.out_dim),
        LayerSpec("tanh"),
        LayerSpec("scale", scale=cfg.output_scale),
    ]


def build_acoustic_cnn(cfg: AcousticModelConfig = AcousticModelConfig(), dtype=np.float32) -> Network:
    net = Network(acoustic_layer_specs(cfg), INPUT_SHAPE, dtype=dtype, seed=cfg.seed, name="acoustic")
    if cfg.zero_init_output:
        _zero_last_linear(net)
    net.meta["role"] = "acoustic"
    return net


def build_bwe_vgg(cfg: BweModelConfig = BweModelConfig(), dtype=np.float32) -> Network:
    net = Network(bwe_layer_specs(cfg), INPUT_SHAPE, dtype=dtype, seed=cfg.seed, name="bwe")
    if cfg.zero_init_output:
        _zero_last_linear(net)
    net.meta["role"] = "bwe"
    net.meta["domain"] = "wb"
    return net


def acoustic_param_count(cfg: AcousticModelConfig) -> int:
    """Closed-form parameter count of :func:`build_acoustic_cnn`."""
    m1, m2 = cfg.conv_maps
    c, h, w = INPUT_SHAPE
    h2, w2 = (h // 2) // 2, (w // 2) // 2
    fc = cfg.fc_dim
    return (
        (c * 25 + 1) * m1
        + (m1 * 25 + 1) * m2
        + (m2 * h2 * w2 + 1) * fc
        + 2 * (fc + 1) * fc
        + (fc + 1) * cfg.n_classes
    )


def forward_posteriors(net: Network, windows, batch_size: int = 512) -> np.ndarray:
    """Posterior matrix, one softmax row per context window."""
    if not net.has_softmax:
        raise ShapeError("forward_posteriors needs an acoustic network ending in softmax")
    if len(windows) and not isinstance(windows, np.ndarray):
        windows = np.stack([getattr(w, "tensor", w) for w in windows])
    return net.predict(np.asarray(windows), batch_size=batch_size)


# --------------------------------------------------------------------------
# reassembly: mapped static frames -> deltas -> 11-frame windows


def _split(lengths: Sequence[int], total: int):
    lengths = [int(t) for t in lengths]
    if sum(lengths) != total or min(lengths, default=1) < 1:
        raise ShapeError(f"utterance lengths {sum(lengths)} do not tile {total} frames")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return list(zip(offsets[:-1], offsets[1:]))


def reassemble(static: np.ndarray, lengths: Sequence[int]) -> np.ndarray:
    """Static frames of consecutive utterances -> ``N x 3 x 11 x D`` windows."""
    out = np.empty((static.shape[0], 3, CONTEXT, static.shape[1]), dtype=static.dtype)
    for a, b in _split(lengths, static.shape[0]):
        t = b - a
        s = static[a:b]
        d = delta_matrix(t).astype(static.dtype)
        d1 = d @ s
        maps = np.stack([s, d1, d @ d1], axis=1)
        out[a:b] = maps[context_indices(t)].transpose(0, 2, 1, 3)
    return out


def reassemble_backward(d_windows: np.ndarray, lengths: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`reassemble`."""
    n, _, _, dim = d_windows.shape
    out = np.empty((n, dim), dtype=d_windows.dtype)
    for a, b in _split(lengths, n):
        t = b - a
        d_maps = np.zeros((t, 3, dim), dtype=d_windows.dtype)
        np.add.at(d_maps, context_indices(t).ravel(), d_windows[a:b].transpose(0, 2, 1, 3).reshape(-1, 3, dim))
        d = delta_matrix(t).astype(d_windows.dtype)
        out[a:b] = d_maps[:, 0] + d.T @ (d_maps[:, 1] + d.T @ d_maps[:, 2])
    return out


class CompositeModel:
    """``acoustic(reassemble(bwe(x)))`` with the acoustic network frozen.

    Inputs are the context windows of whole utterances laid end to end;
    ``lengths`` gives the frame count of each utterance. ``params`` and
    ``grads`` are the BWE network's vectors.
    """

    def __init__(self, bwe: Network, acoustic: Network):
        if not acoustic.frozen:
            raise FreezeError("the acoustic network of a composite must be frozen")
        if bwe.output_shape != (acoustic.input_shape[-1],):
            raise ShapeError(
                f"BWE output {bwe.output_shape} cannot feed acoustic input {acoustic.input_shape}"
            )
        self.bwe = bwe
        self.acoustic = acoustic
        self._lengths = None

    @property
    def params(self):
        return self.bwe.params

    @property
    def grads(self):
        return self.bwe.grads

    @property
    def frozen(self):
        return self.bwe.frozen

    @property
    def name(self):
        return "composite"

    def zero_grad(self):
        self.bwe.zero_grad()

    def forward(self, x, lengths=None, logits=False, cache=True):
        x = np.asarray(x)
        if lengths is None:
            lengths = [len(x)]
        static = self.bwe.forward(x, cache=cache)
        windows = reassemble(static, lengths)
        out = self.acoustic.forward(windows, logits=logits, cache=cache)
        if cache:
            self._lengths = list(lengths)
        return out

    def backward(self, upstream, input_grad=True):
        d_windows = self.acoustic.backward(upstream, input_grad=True)
        d_static = reassemble_backward(d_windows, self._lengths)
        return self.bwe.backward(d_static, input_grad=input_grad)

    def predict(self, x, lengths, logits=False):
        """Forward without caching, one utterance group at a time."""
        outs, start = [], 0
        for t in lengths:
            static = self.bwe.predict(x[start : start + t])
            outs.append(self.acoustic.predict(reassemble(static, [t]), logits=logits))
            start += t
        return np.concatenate(outs)


def compose(bwe: Network, acoustic: Network) -> CompositeModel:
    return CompositeModel(bwe, acoustic)
