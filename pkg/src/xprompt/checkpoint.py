"""Checkpoint formats: plain-text manifests plus raw float64 blobs.

A checkpoint is a directory holding ``manifest.txt`` (key-value lines,
human-inspectable; masks stored inline as 0/1 arrays) and one ``.bin`` file
per matrix (little-endian float64, row-major). Blob hashes live in the
manifest, so corruption and mixed-up files fail loudly; float64 bytes make
round trips bitwise exact.
"""

from __future__ import annotations

import os

import numpy as np

from .backbone import BackboneConfig, FrozenBackbone
from .errors import DataError
from .util import sha256_hex, write_bytes_atomic, write_text_atomic

BACKBONE_FORMAT = "backbone-checkpoint v1"
PROMPT_FORMAT = "prompt-checkpoint v1"


def _blob_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _write_blob(dirpath: str, name: str, arr: np.ndarray) -> str:
    data = _blob_bytes(arr)
    write_bytes_atomic(os.path.join(dirpath, name + ".bin"), data)
    return sha256_hex(data)


def _read_blob(dirpath: str, name: str, shape: tuple[int, int], want_hash: str) -> np.ndarray:
    path = os.path.join(dirpath, name + ".bin")
    if not os.path.exists(path):
        raise DataError(f"checkpoint blob missing: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if sha256_hex(data) != want_hash:
        raise DataError(f"checkpoint blob corrupt (hash mismatch): {path}")
    arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
    if arr.size != shape[0] * shape[1]:
        raise DataError(f"checkpoint blob {path} has {arr.size} values, wanted {shape}")
    return arr.reshape(shape)


# --- backbone -------------------------------------------------------------------


def save_backbone(bb: FrozenBackbone, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    lines = [f"format {BACKBONE_FORMAT}"]
    cfg = bb.cfg
    for k in ("vocab_size", "embed_dim", "layers", "heads", "max_seq_len",
              "num_classes", "seed"):
        lines.append(f"{k} {getattr(cfg, k)}")
    lines.append(f"frozen {int(bb.frozen)}")
    for name in sorted(bb.weights):
        arr = bb.weights[name]
        digest = _write_blob(dirpath, name, arr)
        lines.append(f"weight {name} {arr.shape[0]} {arr.shape[1]} {digest}")
    write_text_atomic(os.path.join(dirpath, "manifest.txt"), "\n".join(lines) + "\n")


def load_backbone(dirpath: str) -> FrozenBackbone:
    manifest_path = os.path.join(dirpath, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise DataError(f"checkpoint manifest missing: {manifest_path}")
    fields: dict[str, str] = {}
    weights_meta: list[tuple[str, int, int, str]] = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition(" ")
            if key == "weight":
                name, r, c, digest = val.split(" ")
                weights_meta.append((name, int(r), int(c), digest))
            else:
                fields[key] = val
    if fields.get("format") != BACKBONE_FORMAT:
        raise DataError(f"unrecognized backbone checkpoint format {fields.get('format')!r}")
    cfg = BackboneConfig(
        vocab_size=int(fields["vocab_size"]), embed_dim=int(fields["embed_dim"]),
        layers=int(fields["layers"]), heads=int(fields["heads"]),
        max_seq_len=int(fields["max_seq_len"]), num_classes=int(fields["num_classes"]),
        seed=int(fields["seed"]))
    weights = {name: _read_blob(dirpath, name, (r, c), digest)
               for name, r, c, digest in weights_meta}
    bb = FrozenBackbone(cfg, weights)
    if fields.get("frozen") == "1":
        bb.freeze()
    return bb


# --- prompt bank ------------------------------------------------------------------


def save_prompt(bank, dirpath: str, stage: str) -> None:
    """Persist P_e (and the snapshot, if taken) plus masks as 0/1 text."""
    os.makedirs(dirpath, exist_ok=True)
    m, e = bank.p.shape
    lines = [
        f"format {PROMPT_FORMAT}",
        f"m {m}",
        f"e {e}",
        f"k {bank.k}",
        f"stage {stage}",
        "token_mask " + " ".join(str(int(v)) for v in bank.token_mask),
    ]
    for i in range(m):
        lines.append(f"piece_mask {i} " + " ".join(str(int(v)) for v in bank.piece_mask[i]))
    lines.append(f"blob p_e {_write_blob(dirpath, 'p_e', bank.p)}")
    if bank.snapshot is not None:
        lines.append(f"blob snapshot {_write_blob(dirpath, 'snapshot', bank.snapshot)}")
    write_text_atomic(os.path.join(dirpath, "manifest.txt"), "\n".join(lines) + "\n")


def load_prompt(dirpath: str):
    from .prompt import PromptBank  # local import to avoid a cycle

    manifest_path = os.path.join(dirpath, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise DataError(f"checkpoint manifest missing: {manifest_path}")
    fields: dict[str, str] = {}
    piece_rows: dict[int, list[int]] = {}
    blobs: dict[str, str] = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition(" ")
            if key == "piece_mask":
                idx, _, rest = val.partition(" ")
                piece_rows[int(idx)] = [int(v) for v in rest.split()]
            elif key == "blob":
                name, _, digest = val.partition(" ")
                blobs[name] = digest
            else:
                fields[key] = val
    if fields.get("format") != PROMPT_FORMAT:
        raise DataError(f"unrecognized prompt checkpoint format {fields.get('format')!r}")
    m, e, k = int(fields["m"]), int(fields["e"]), int(fields["k"])
    p = _read_blob(dirpath, "p_e", (m, e), blobs["p_e"])
    token_mask = np.array([float(v) for v in fields["token_mask"].split()])
    if token_mask.size != m:
        raise DataError(f"token mask has {token_mask.size} entries, wanted {m}")
    piece_mask = np.zeros((m, k))
    for i in range(m):
        if i not in piece_rows or len(piece_rows[i]) != k:
            raise DataError(f"piece mask row {i} missing or wrong width")
        piece_mask[i] = piece_rows[i]
    bank = PromptBank(p=p, token_mask=token_mask, piece_mask=piece_mask, k=k)
    if "snapshot" in blobs:
        bank.snapshot = _read_blob(dirpath, "snapshot", (m, e), blobs["snapshot"])
    return bank, fields["stage"]
