"""Model checkpoints: one DLT1 file per tensor plus a hashed JSON manifest."""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import dlt
from .model import ModelConfig, SegNet


class ChecksumError(ValueError):
    """A checkpoint file no longer matches the hash recorded in its manifest."""


def blob_sha1(data: bytes) -> str:
    """Git-style object hash of a byte string."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _combined(hashes):
    lines = "".join(f"{name} {h}\n" for name, h in sorted(hashes.items()))
    return blob_sha1(lines.encode())


def save_checkpoint(model: SegNet, out_dir, meta=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, arr in model.state_dict().items():
        payload = dlt.encode(np.asarray(arr))
        (out / f"{name}.dlt").write_bytes(payload)
        hashes[name] = blob_sha1(payload)
    manifest = {
        "format": "driftlab-checkpoint",
        "version": __version__,
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "layers": [{"name": n, "kind": d} for n, d in model.architecture()],
        "frozen": sorted(model.frozen),
        "pinned": [layer.name for layer in model.norm_layers() if layer.pinned],
        "tensors": hashes,
        "content_hash": _combined(hashes),
        "meta": meta or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path):
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def verify_checkpoint(path):
    """Recompute every tensor hash; raise :class:`ChecksumError` on mismatch."""
    root = Path(path)
    manifest = read_manifest(root)
    for name, expected in manifest["tensors"].items():
        f = root / f"{name}.dlt"
        if not f.exists():
            raise ChecksumError(f"{root}: tensor file {f.name} is missing")
        got = blob_sha1(f.read_bytes())
        if got != expected:
            raise ChecksumError(
                f"{root}: {f.name} hash {got[:12]} does not match manifest {expected[:12]}; "
                "the checkpoint was modified after it was written"
            )
    if _combined(manifest["tensors"]) != manifest["content_hash"]:
        raise ChecksumError(f"{root}: manifest content hash is inconsistent")
    return manifest


def load_checkpoint(path, verify=True) -> SegNet:
    root = Path(path)
    manifest = verify_checkpoint(root) if verify else read_manifest(root)
    model = SegNet(ModelConfig.from_dict(manifest["config"]))
    model.load_state_dict({name: dlt.load(root / f"{name}.dlt") for name in manifest["tensors"]})
    pinned = set(manifest.get("pinned", []))
    frozen = set(manifest.get("frozen", []))
    for layer in model.layers:
        if layer.name in frozen:
            model.frozen.add(layer.name)
            for t in layer.params().values():
                t.requires_grad = False
    for layer in model.norm_layers():
        layer.pinned = layer.name in pinned
    model.eval()
    return model
