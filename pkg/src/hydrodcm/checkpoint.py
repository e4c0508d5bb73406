"""Binary checkpoint format.

Layout (all little-endian):

    magic   b"HDCM"
    version u32 (currently 1)
    u64 parameter count, then per parameter:
        u32 name length, UTF-8 name, u32 rank, u64 dims..., f64 values...
    u64 stats record count, then the same record scheme for normalization
    statistics ("meta/min", "meta/max", "res/<id>/mean", "res/<id>/std").

Values are raw IEEE-754 doubles, so save -> load round-trips bit-exactly.
The component set and layer sizes are reconstructed from the parameter
names and shapes; no separate architecture header is needed.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import NormStats
from .model import (Affine, Discriminator, DomainClassifier, Encoder,
                    FilmAdapter, Head, LstmLayerParams, ModelArch, ModelBundle,
                    Projector)

MAGIC = b"HDCM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_record(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint: expected record header")
    (name_len,) = struct.unpack("<I", raw)
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
    return name, data.reshape(dims).astype(np.float64)


def _stats_records(stats: NormStats):
    records = [("meta/min", stats.meta_min), ("meta/max", stats.meta_max)]
    for rid in sorted(stats.feature_mean):
        records.append((f"res/{rid}/mean", stats.feature_mean[rid]))
        records.append((f"res/{rid}/std", stats.feature_std[rid]))
    return records


def save_checkpoint(path, bundle: ModelBundle) -> None:
    params = bundle.parameters()
    if bundle.norm_stats is None:
        raise CheckpointError("bundle has no normalization statistics to save")
    stats = _stats_records(bundle.norm_stats)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(params)))
        for name, tensor in params:
            _write_record(fh, name, tensor.data)
        fh.write(struct.pack("<Q", len(stats)))
        for name, arr in stats:
            _write_record(fh, name, arr)


def _rebuild_bundle(params: dict) -> ModelBundle:
    enc_layers = sorted({n.split(".")[1] for n in params if n.startswith("encoder.")})
    if not enc_layers:
        raise CheckpointError("checkpoint has no encoder parameters")
    layers = []
    for layer in enc_layers:
        wx = params[f"encoder.{layer}.wx"]
        wh = params[f"encoder.{layer}.wh"]
        layers.append(LstmLayerParams(wx, wh, params[f"encoder.{layer}.b"]))
    hid = layers[0].wh.data.shape[0]

    arch = ModelArch(
        n_features=layers[0].wx.data.shape[0],
        enc_hidden=hid,
        enc_layers=len(layers),
        head_hidden=params["head.fc1.w"].shape[1],
        horizon=params["head.fc2.w"].shape[1],
    )
    encoder = Encoder(layers, arch.dropout)
    head = Head(Affine(params["head.fc1.w"], params["head.fc1.b"]),
                Affine(params["head.fc2.w"], params["head.fc2.b"]), arch.dropout)

    projector = discriminator = adapter = domain_head = None
    if "projector.fc.w" in params:
        arch.embed_dim = params["projector.fc.w"].shape[1]
        projector = Projector(Affine(params["projector.fc.w"], params["projector.fc.b"]))
    if "discriminator.fc1.w" in params:
        arch.disc_hidden = params["discriminator.fc1.w"].shape[1]
        discriminator = Discriminator(
            Affine(params["discriminator.fc1.w"], params["discriminator.fc1.b"]),
            Affine(params["discriminator.fc2.w"], params["discriminator.fc2.b"]),
            arch.dropout)
    if "adapter.hidden.w" in params:
        arch.n_meta = params["adapter.hidden.w"].shape[0]
        arch.adapter_hidden = params["adapter.hidden.w"].shape[1]
        adapter = FilmAdapter(
            Affine(params["adapter.hidden.w"], params["adapter.hidden.b"]),
            Affine(params["adapter.gamma.w"], params["adapter.gamma.b"]),
            Affine(params["adapter.delta.w"], params["adapter.delta.b"]))
    if "domain_head.fc.w" in params:
        domain_head = DomainClassifier(
            Affine(params["domain_head.fc.w"], params["domain_head.fc.b"]))
    if projector is not None:
        arch.t_window = (params["projector.fc.w"].shape[0] - arch.n_meta) // arch.n_features
    return ModelBundle(arch, encoder, head, projector, discriminator, adapter,
                       domain_head)


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(this build reads version {VERSION})")
        (n_params,) = struct.unpack("<Q", fh.read(8))
        params = {}
        for _ in range(n_params):
            name, arr = _read_record(fh)
            params[name] = arr
        (n_stats,) = struct.unpack("<Q", fh.read(8))
        stats_rec = {}
        for _ in range(n_stats):
            name, arr = _read_record(fh)
            stats_rec[name] = arr

    bundle = _rebuild_bundle(params)
    stats = NormStats()
    stats.meta_min = stats_rec.pop("meta/min")
    stats.meta_max = stats_rec.pop("meta/max")
    for name, arr in stats_rec.items():
        _, rid, kind = name.split("/")
        if kind == "mean":
            stats.feature_mean[rid] = arr
        else:
            stats.feature_std[rid] = arr
    bundle.norm_stats = stats
    return bundle
