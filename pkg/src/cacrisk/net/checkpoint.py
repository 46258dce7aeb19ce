"""Binary checkpoint format for trained risk networks.

Layout (little-endian):

    bytes 0-3   magic "HYRK"
    bytes 4-7   u32 format version (currently 1)
    bytes 8-15  u64 header length in bytes
    header      UTF-8 JSON: backbone config, strategy, stage,
                normalization stats, fingerprints, named-tensor index
    blob        all weights as float64, concatenated in index order

Every tensor in the model state dict (parameters and batch-norm
buffers) is stored; original dtypes are recorded so loading restores
them exactly.  A human-readable ``<name>.txt`` sidecar with one
``key = value`` line per field is written next to the binary.

The data fingerprint ties a checkpoint to the dataset manifest it was
trained on; evaluation refuses a checkpoint whose fingerprint does not
match the target dataset.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError
from .backbone import BackboneConfig
from .models import HyRiskNet, RiskNet
from .training import NormalizationStats, attach_stats

MAGIC = b"HYRK"
FORMAT_VERSION = 1


def fingerprint_file(path) -> str:
    """SHA-256 hex digest of a file's bytes (dataset manifests, mainly)."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_fingerprint(backbone: BackboneConfig, stage: int, strategy: str) -> str:
    payload = json.dumps(
        {"backbone": backbone.to_dict(), "stage": stage, "strategy": strategy},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _tensor_index(state: dict) -> list:
    index = []
    offset = 0
    for name, t in state.items():
        count = t.numel()
        index.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "offset": offset,
            "count": count,
        })
        offset += count
    return index


def save_checkpoint(path, model, strategy: str, stage: int,
                    data_fingerprint: str = "", train_epochs: int = 0) -> dict:
    """Serialize a trained model (with attached normalization stats)."""
    path = Path(path)
    if isinstance(model, HyRiskNet):
        kind = "hybrid"
    elif isinstance(model, RiskNet):
        kind = "image_only"
    else:
        raise TypeError(f"cannot checkpoint a {type(model).__name__}")
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    stats = getattr(model, "_norm_stats", None)
    if stats is None:
        raise ValueError("model has no attached normalization stats; train it first")

    state = model.state_dict()
    index = _tensor_index(state)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "backbone": model.config.to_dict(),
        "strategy": strategy,
        "stage": stage,
        "normalization": stats.to_dict(),
        "data_fingerprint": data_fingerprint,
        "config_fingerprint": config_fingerprint(model.config, stage, strategy),
        "train_epochs": train_epochs,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    blob = np.concatenate(
        [state[e["name"]].detach().cpu().numpy().astype(np.float64).ravel()
         for e in index]
    ) if index else np.empty(0, dtype=np.float64)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint64(len(header_bytes)).tobytes())
        f.write(header_bytes)
        f.write(blob.astype("<f8").tobytes())

    sidecar_lines = [
        f"format = HYRK v{FORMAT_VERSION}",
        f"kind = {kind}",
        f"depth = {model.config.depth}",
        f"feature_dim = {model.config.feature_dim}",
        f"input_size = {model.config.input_size}",
        f"strategy = {strategy}",
        f"stage = {stage}",
        f"score_source = {stats.score_source}",
        f"train_epochs = {train_epochs}",
        f"n_tensors = {len(index)}",
        f"n_weights = {int(blob.size)}",
        f"data_fingerprint = {data_fingerprint}",
        f"config_fingerprint = {header['config_fingerprint']}",
    ]
    Path(str(path) + ".txt").write_text("\n".join(sidecar_lines) + "\n")
    return header


def load_checkpoint(path):
    """Rebuild the model from a checkpoint.

    Returns:
        (model, header) where the model carries its normalization stats
        and is in eval mode.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataError(f"{path} is not a HYRK checkpoint (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if 16 + header_len > len(raw):
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e

    blob = np.frombuffer(raw[16 + header_len:], dtype="<f8")
    index = header["tensors"]
    expected = sum(e["count"] for e in index)
    if blob.size != expected:
        raise DataError(
            f"{path}: weight blob has {blob.size} values, index expects {expected}"
        )

    config = BackboneConfig.from_dict(header["backbone"])
    model = HyRiskNet(config) if header["kind"] == "hybrid" else RiskNet(config)
    state = {}
    for e in index:
        chunk = blob[e["offset"]:e["offset"] + e["count"]]
        arr = chunk.reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr).to(getattr(torch, e["dtype"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise DataError(f"{path}: checkpoint does not fit its declared model: {e}") from e
    attach_stats(model, NormalizationStats.from_dict(header["normalization"]))
    model.eval()
    return model, header
