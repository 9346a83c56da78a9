"""Line-delimited JSON files and torch checkpoint containers.

Every artifact embeds its provenance: JSONL files start with one
``{"meta": {...}}`` line (config hash, seed, producing command) that readers
skip; checkpoints carry the same fields in their payload dict.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch


def write_jsonl(path, records, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if idx == 0 and set(rec) == {"meta"}:
                continue
            yield rec


def read_meta(path) -> dict | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    rec = json.loads(first)
    return rec.get("meta") if set(rec) == {"meta"} else None


def save_checkpoint(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    payload = torch.load(path, weights_only=True)
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, "
                         f"expected {kind!r}")
    return payload


def write_json(path, data: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
