"""Run artifacts: JSONL metrics logs, binary checkpoints, CSV plot export.

Metrics files are deterministic for a fixed seed, so wall time stays on the
in-memory record only. Checkpoints are a JSON manifest (names, shapes, byte
offsets, seed, epoch) followed by raw little-endian float32 payload in one
file; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"ASTROCP1"

# Columns exported for plotting, in order.
PLOT_COLUMNS = ("epoch", "reward_vq", "reward_mq", "reward_ta", "composite",
                "policy_loss", "kl_loss", "mask_fraction")


@dataclass
class MetricsRecord:
    epoch: int
    reward_vq: float
    reward_mq: float
    reward_ta: float
    composite: float
    policy_loss: float
    kl_loss: float
    mask_fraction: float
    tau: float | None
    rho: float
    grad_norm: float
    reset: bool
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        # wall_time is excluded: the log must be byte-identical across
        # same-seed runs, and timing is not.
        return {
            "epoch": self.epoch,
            "reward_vq": self.reward_vq,
            "reward_mq": self.reward_mq,
            "reward_ta": self.reward_ta,
            "composite": self.composite,
            "policy_loss": self.policy_loss,
            "kl_loss": self.kl_loss,
            "mask_fraction": self.mask_fraction,
            "tau": self.tau,
            "rho": self.rho,
            "grad_norm": self.grad_norm,
            "reset": self.reset,
        }


def log_metrics(path, record: MetricsRecord) -> None:
    """Append one JSON line; one line per epoch."""
    line = json.dumps(record.to_json_dict(), separators=(",", ":"), allow_nan=False)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_metrics(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def export_plot_data(log_path, out_path) -> int:
    """Flatten a metrics log to CSV for plotting. Returns the row count."""
    records = read_metrics(log_path) if Path(log_path).exists() else []
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for rec in records:
            writer.writerow([rec[col] for col in PLOT_COLUMNS])
    return len(records)


def save_checkpoint(path, arrays: dict[str, np.ndarray], seed: int, epoch: int,
                    extra: dict | None = None) -> None:
    """Manifest + float32 payload in one file.

    Arrays are stored sorted by name so offsets (and therefore bytes) are a
    pure function of content.
    """
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "count": int(arr.size),
        })
        payload.extend(arr.tobytes())
    manifest = {
        "format": 1,
        "seed": int(seed),
        "epoch": int(epoch),
        "extra": extra or {},
        "arrays": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays as float64 at float32 precision, manifest metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in manifest["arrays"]:
        start = entry["offset"]
        stop = start + 4 * entry["count"]
        flat = np.frombuffer(payload[start:stop], dtype="<f4")
        if flat.size != entry["count"]:
            raise ValueError(f"checkpoint payload truncated at array {entry['name']!r}")
        arrays[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])
    meta = {k: manifest[k] for k in ("seed", "epoch", "extra")}
    return arrays, meta
