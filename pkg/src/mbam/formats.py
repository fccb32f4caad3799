"""On-disk formats: PCM16 WAV, the MBFA feature archive, MBNN checkpoints.

MBFA layout (little endian)::

    b"MBFA" | u8 version | u32 n_utts | u32 dim | u32 n_maps
    per utterance: u32 id_len | id bytes (utf-8) | u32 T | T*n_maps*dim f32

MBNN layout (little endian)::

    b"MBNN" | u8 version | u8 flags | 3 x u32 input shape | u32 n_layers
    per layer (TLV): u8 kind | u32 payload_len | payload
    u64 n_params | n_params x f32

``flags`` bit 0 marks a BWE network, bit 1 a network in the 8 kHz feature
domain.
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import LAYER_KINDS, LayerSpec, Network
from .dsp import SUPPORTED_RATES, Bandwidth, FeatureSequence, Waveform
from .errors import FormatError

ARCHIVE_MAGIC = b"MBFA"
ARCHIVE_VERSION = 1
CHECKPOINT_MAGIC = b"MBNN"
CHECKPOINT_VERSION = 1
FLAG_BWE = 0x1
FLAG_NB_DOMAIN = 0x2


# --------------------------------------------------------------------------
# WAV


def read_wav(path, utterance_id: Optional[str] = None) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if wf.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV is not supported")
            if channels != 1:
                raise FormatError(f"{path}: expected mono audio, found {channels} channels")
            if width != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
            if rate not in SUPPORTED_RATES:
                raise FormatError(f"{path}: sample rate {rate} Hz is neither 8000 nor 16000")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate, utterance_id or path.stem)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# feature archive


def write_archive(path, feats: Sequence[FeatureSequence]):
    if not feats:
        raise FormatError("refusing to write an empty feature archive")
    dim, n_maps = feats[0].dim, feats[0].n_maps
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<BIII", ARCHIVE_VERSION, len(feats), dim, n_maps))
        for f in feats:
            if (f.dim, f.n_maps) != (dim, n_maps):
                raise FormatError(f"{f.utterance_id}: shape differs from archive header")
            uid = f.utterance_id.encode("utf-8")
            fh.write(struct.pack("<I", len(uid)) + uid + struct.pack("<I", f.n_frames))
            fh.write(np.ascontiguousarray(f.frames, dtype="<f4").tobytes())


def read_archive(path, tags: Optional[Dict[str, Bandwidth]] = None) -> List[FeatureSequence]:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, n_utts, dim, n_maps = struct.unpack_from("<BIII", data, 4)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    pos = 4 + struct.calcsize("<BIII")
    out = []
    try:
        for _ in range(n_utts):
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            uid = data[pos : pos + id_len].decode("utf-8")
            pos += id_len
            (t,) = struct.unpack_from("<I", data, pos)
            pos += 4
            count = t * n_maps * dim
            frames = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(t, n_maps * dim)
            pos += 4 * count
            tag = (tags or {}).get(uid, Bandwidth.WB)
            out.append(FeatureSequence(frames.astype(np.float32), n_maps, tag, uid))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt archive ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def write_sidecar(path, items: Dict[str, object]):
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key}={value}\n")


def read_sidecar(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# checkpoints

_KIND_CODE = {kind: i for i, kind in enumerate(LAYER_KINDS)}


def _encode_layer(spec: LayerSpec) -> bytes:
    if spec.kind == "conv2d":
        payload = struct.pack("<8i", *spec.kernel, *spec.stride, *spec.padding, spec.in_maps, spec.out_maps)
    elif spec.kind == "maxpool2d":
        payload = struct.pack("<4i", *spec.kernel, *spec.stride)
    elif spec.kind == "linear":
        payload = struct.pack("<2i", spec.in_dim, spec.out_dim)
    elif spec.kind == "scale":
        payload = struct.pack("<d", spec.scale)
    else:
        payload = b""
    return struct.pack("<BI", _KIND_CODE[spec.kind], len(payload)) + payload


def _decode_layer(kind: str, payload: bytes) -> LayerSpec:
    if kind == "conv2d":
        kh, kw, sh, sw, ph, pw, cin, cout = struct.unpack("<8i", payload)
        return LayerSpec(kind, (kh, kw), (sh, sw), (ph, pw), in_maps=cin, out_maps=cout)
    if kind == "maxpool2d":
        kh, kw, sh, sw = struct.unpack("<4i", payload)
        return LayerSpec(kind, (kh, kw), (sh, sw))
    if kind == "linear":
        din, dout = struct.unpack("<2i", payload)
        return LayerSpec(kind, in_dim=din, out_dim=dout)
    if kind == "scale":
        return LayerSpec(kind, scale=struct.unpack("<d", payload)[0])
    return LayerSpec(kind)


def save_checkpoint(net: Network, path):
    flags = 0
    if net.meta.get("role") == "bwe":
        flags |= FLAG_BWE
    if net.meta.get("domain") == "nb":
        flags |= FLAG_NB_DOMAIN
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BB", CHECKPOINT_VERSION, flags))
        fh.write(struct.pack("<3I", *net.input_shape))
        fh.write(struct.pack("<I", len(net.specs)))
        for spec in net.specs:
            fh.write(_encode_layer(spec))
        fh.write(struct.pack("<Q", net.n_params))
        fh.write(np.ascontiguousarray(net.params, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, flags = struct.unpack_from("<BB", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 6
        input_shape = struct.unpack_from("<3I", data, pos)
        pos += 12
        (n_layers,) = struct.unpack_from("<I", data, pos)
        pos += 4
        specs = []
        for _ in range(n_layers):
            code, length = struct.unpack_from("<BI", data, pos)
            pos += 5
            if code >= len(LAYER_KINDS):
                raise FormatError(f"{path}: unknown layer code {code}")
            specs.append(_decode_layer(LAYER_KINDS[code], data[pos : pos + length]))
            pos += length
        (n_params,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        params = np.frombuffer(data, dtype="<f4", count=n_params, offset=pos)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    net = Network(specs, input_shape, dtype=dtype, seed=None)
    if net.n_params != n_params:
        raise FormatError(f"{path}: {n_params} stored parameters, layer list implies {net.n_params}")
    net.params[...] = params
    net.meta["role"] = "bwe" if flags & FLAG_BWE else "acoustic"
    net.meta["domain"] = "nb" if flags & FLAG_NB_DOMAIN else "wb"
    net.name = net.meta["role"]
    return net


# --------------------------------------------------------------------------
# corpus directories


def write_corpus(directory, utts) -> Path:
    """One WAV per utterance plus ``labels.txt`` (``uid label label ...``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        write_wav(directory / f"{u.utterance_id}.wav", u.wave)
        lines.append(u.utterance_id + " " + " ".join(map(str, u.labels)))
    (directory / "labels.txt").write_text("\n".join(lines) + "\n")
    return directory


def read_corpus(directory):
    """Inverse of :func:`write_corpus`; utterances come back in ``labels.txt`` order."""
    from .data import Utterance

    directory = Path(directory)
    index = directory / "labels.txt"
    if not index.exists():
        raise FormatError(f"{directory}: no labels.txt")
    out = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        uid, *labs = line.split()
        try:
            labels = np.array([int(v) for v in labs], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{index}:{lineno}: non-integer label") from exc
        out.append(Utterance(read_wav(directory / f"{uid}.wav", uid), labels))
    if not out:
        raise FormatError(f"{directory}: empty corpus")
    return out
