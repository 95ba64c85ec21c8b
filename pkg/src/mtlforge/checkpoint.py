"""On-disk checkpoints: a key=value manifest plus one float64 blob per tensor.

Layout of a checkpoint directory::

    manifest.txt          format_version first, remaining keys sorted
    vocab.txt             the vocabulary the model was trained with
    tensors/<name>.f64    little-endian float64, row-major, names sorted
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoder import EncoderConfig, EncoderParams
from .heads import LabelSpace, TaskHead
from .tensor import Tensor
from .tokenizer import Vocabulary

FORMAT_VERSION = "1"


class CheckpointError(ValueError):
    """A checkpoint cannot be loaded as requested."""


@dataclass
class Checkpoint:
    params: EncoderParams
    heads: dict[str, TaskHead]
    vocab: Vocabulary
    manifest: dict[str, str] = field(default_factory=dict)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named = [(f"encoder.{n}", t) for n, t in self.params.named()]
        for head in self.heads.values():
            named.extend(head.named())
        return sorted(named)

    @property
    def primary_task(self) -> str:
        return self.manifest.get("primary_task") or next(iter(self.heads))


def build_manifest(ckpt: Checkpoint, extra: Optional[dict[str, str]] = None) -> dict[str, str]:
    m = {"format_version": FORMAT_VERSION, "vocab_hash": ckpt.vocab.sha256}
    for k, v in ckpt.params.config.to_dict().items():
        m[f"encoder.{k}"] = repr(v)
    m["tasks"] = ",".join(ckpt.heads)
    for name, head in ckpt.heads.items():
        m[f"head.{name}.labels"] = json.dumps(list(head.label_space.labels), ensure_ascii=False)
    for name, t in ckpt.named_tensors():
        m[f"tensor.{name}.shape"] = ",".join(str(d) for d in t.shape)
    m.update({k: str(v) for k, v in (extra or {}).items()})
    return m


def _format_manifest(m: dict[str, str]) -> str:
    keys = ["format_version"] + sorted(k for k in m if k != "format_version")
    for k in keys:
        if "=" in k or "\n" in k or "\n" in m[k]:
            raise CheckpointError(f"manifest entry {k!r} cannot be serialised")
    return "".join(f"{k}={m[k]}\n" for k in keys)


def _parse_manifest(text: str) -> dict[str, str]:
    m = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"manifest line {lineno} is not key=value")
        k, v = line.split("=", 1)
        m[k] = v
    return m


def save_checkpoint(ckpt: Checkpoint, path: str | Path, extra: Optional[dict[str, str]] = None) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = dict(ckpt.manifest)
    manifest.update(build_manifest(ckpt, extra))
    ckpt.manifest = manifest
    (path / "manifest.txt").write_text(_format_manifest(manifest), encoding="utf-8")
    (path / "vocab.txt").write_bytes(ckpt.vocab.serialize())
    for name, t in ckpt.named_tensors():
        (path / "tensors" / f"{name}.f64").write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path, expected_vocab_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    mf = path / "manifest.txt"
    if not mf.is_file():
        raise CheckpointError(f"no manifest.txt in {path}")
    m = _parse_manifest(mf.read_text(encoding="utf-8"))
    version = m.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r} is not supported (need {FORMAT_VERSION})")
    vocab = Vocabulary.load(path / "vocab.txt")
    if vocab.sha256 != m.get("vocab_hash"):
        raise CheckpointError("vocab.txt does not match the vocab hash recorded in the manifest")
    if expected_vocab_hash is not None and m["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"checkpoint was trained with vocabulary {m['vocab_hash'][:12]}..., "
            f"refusing to load against {expected_vocab_hash[:12]}..."
        )

    tensors: dict[str, Tensor] = {}
    for key, value in m.items():
        if not (key.startswith("tensor.") and key.endswith(".shape")):
            continue
        name = key[len("tensor.") : -len(".shape")]
        shape = tuple(int(d) for d in value.split(",")) if value else ()
        blob_path = path / "tensors" / f"{name}.f64"
        if not blob_path.is_file():
            raise CheckpointError(f"missing tensor blob {blob_path.name}")
        blob = blob_path.read_bytes()
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if len(blob) != expected:
            raise CheckpointError(f"tensor {name}: blob has {len(blob)} bytes, expected {expected}")
        data = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)

    enc_kw = {k[len("encoder.") :]: v for k, v in m.items() if k.startswith("encoder.")}
    try:
        config = EncoderConfig.from_dict(enc_kw)
    except ValueError as exc:
        raise CheckpointError(f"bad encoder config in manifest: {exc}") from None
    params = EncoderParams(
        config, {n[len("encoder.") :]: t for n, t in tensors.items() if n.startswith("encoder.")}
    )
    heads = {}
    for task in filter(None, m.get("tasks", "").split(",")):
        labels = json.loads(m[f"head.{task}.labels"])
        heads[task] = TaskHead(tensors[f"head.{task}.W"], tensors[f"head.{task}.b"], LabelSpace(task, labels))
    return Checkpoint(params, heads, vocab, m)
