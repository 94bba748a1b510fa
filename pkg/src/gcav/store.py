"""Artifact store: binary payload files indexed by ``manifest.json``.

Each stage writes one payload file holding all of its arrays back to back.
The manifest lists every array with its shape, dtype, byte offset and a
SHA-256 checksum, plus per-stage JSON metadata and a completion flag.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

MANIFEST = "manifest.json"
STAGES = ("gen", "target", "cavs", "ae", "align", "fuse", "score", "attack")
_DTYPES = {"f32": np.float32, "f64": np.float64}


class MissingArtifactError(KeyError):
    """A required artifact is absent; the message names the key."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing artifact"


class ChecksumError(RuntimeError):
    pass


def _checksum(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _dtype_tag(arr: np.ndarray) -> str:
    return "f64" if arr.dtype == np.float64 else "f32"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def stage_index(stage: str) -> int:
    try:
        return STAGES.index(stage)
    except ValueError:
        raise ValueError(f"unknown stage {stage!r}; expected one of {list(STAGES)}") from None


def pack_state(state: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, List[dict]]:
    """Flatten a state dict into one f32 vector plus its layout."""
    layout, parts = [], []
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float32)
        layout.append({"name": name, "shape": list(arr.shape)})
        parts.append(arr.reshape(-1))
    flat = np.concatenate(parts) if parts else np.zeros(0, np.float32)
    return flat, layout


def unpack_state(flat: np.ndarray, layout: Iterable[dict]) -> Dict[str, np.ndarray]:
    out, pos = {}, 0
    for item in layout:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        out[item["name"]] = np.asarray(flat[pos:pos + n], dtype=np.float32).reshape(shape)
        pos += n
    if pos != len(flat):
        raise ValueError(f"state layout covers {pos} of {len(flat)} values")
    return out


class ArtifactStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest = self._load()

    # -- manifest ------------------------------------------------------------
    def _load(self) -> dict:
        path = self.root / MANIFEST
        if not path.exists():
            return {"entries": [], "stages": {}}
        return json.loads(path.read_text())

    def _save(self) -> None:
        text = json.dumps(self._manifest, indent=1, sort_keys=True) + "\n"
        _atomic_write(self.root / MANIFEST, text.encode())

    @property
    def entries(self) -> List[dict]:
        return list(self._manifest["entries"])

    def names(self, prefix: str = "") -> List[str]:
        return [e["name"] for e in self._manifest["entries"] if e["name"].startswith(prefix)]

    def has(self, name: str) -> bool:
        return any(e["name"] == name for e in self._manifest["entries"])

    def stage_complete(self, stage: str) -> bool:
        return self._manifest["stages"].get(stage, {}).get("complete", False)

    def stage_meta(self, stage: str) -> dict:
        if not self.stage_complete(stage):
            raise MissingArtifactError(f"stage {stage!r} has not completed")
        return self._manifest["stages"][stage]["meta"]

    def completed_stages(self) -> List[str]:
        return [s for s in STAGES if self.stage_complete(s)]

    # -- writing -------------------------------------------------------------
    def put_stage(self, stage: str, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None,
                  files: Optional[Mapping[str, str]] = None) -> None:
        """Replace everything ``stage`` owns and mark it complete.

        ``files`` are extra text files (name -> contents) written next to the
        payload and checksummed in the stage record.
        """
        stage_index(stage)
        payload_name = f"{stage}.bin"
        buf = bytearray()
        new_entries = []
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            tag = _dtype_tag(arr)
            arr = arr.astype(_DTYPES[tag], copy=False)
            raw = arr.tobytes()
            new_entries.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                                "file": payload_name, "byte_offset": len(buf),
                                "stage": stage, "checksum": _checksum(raw)})
            buf.extend(raw)
        _atomic_write(self.root / payload_name, bytes(buf))
        file_sums = {}
        for fname, text in (files or {}).items():
            _atomic_write(self.root / fname, text.encode())
            file_sums[fname] = _checksum(text.encode())
        self._manifest["entries"] = [e for e in self._manifest["entries"] if e["stage"] != stage]
        self._manifest["entries"].extend(new_entries)
        self._manifest["stages"][stage] = {"complete": True, "meta": meta or {}, "files": file_sums}
        self._save()

    def invalidate_after(self, stage: str) -> List[str]:
        """Drop every stage strictly after ``stage``; returns their names."""
        idx = stage_index(stage)
        dropped = [s for s in STAGES[idx + 1:] if s in self._manifest["stages"]]
        if dropped:
            self._manifest["entries"] = [e for e in self._manifest["entries"]
                                         if e["stage"] not in dropped]
            for s in dropped:
                del self._manifest["stages"][s]
            self._save()
        return dropped

    # -- reading -------------------------------------------------------------
    def _entry(self, name: str) -> dict:
        for e in self._manifest["entries"]:
            if e["name"] == name:
                return e
        raise MissingArtifactError(f"missing artifact {name!r}")

    def get(self, name: str) -> np.ndarray:
        e = self._entry(name)
        dtype = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        with open(self.root / e["file"], "rb") as fh:
            fh.seek(e["byte_offset"])
            raw = fh.read(count * dtype.itemsize)
        if _checksum(raw) != e["checksum"]:
            raise ChecksumError(f"checksum mismatch for {name!r} in {e['file']}")
        return np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).copy()

    def require(self, *names: str) -> None:
        for n in names:
            if not self.has(n):
                raise MissingArtifactError(f"missing artifact {n!r}")

    def read_file(self, stage: str, fname: str) -> str:
        sums = self._manifest["stages"].get(stage, {}).get("files", {})
        if fname not in sums:
            raise MissingArtifactError(f"missing artifact file {fname!r} of stage {stage!r}")
        raw = (self.root / fname).read_bytes()
        if _checksum(raw) != sums[fname]:
            raise ChecksumError(f"checksum mismatch for {fname}")
        return raw.decode()

    def verify(self) -> None:
        for e in self._manifest["entries"]:
            self.get(e["name"])
        for stage, rec in self._manifest["stages"].items():
            for fname in rec.get("files", {}):
                self.read_file(stage, fname)

    def checksums(self, stage: Optional[str] = None) -> Dict[str, str]:
        return {e["name"]: e["checksum"] for e in self._manifest["entries"]
                if stage is None or e["stage"] == stage}
