"""Volume serialization: NIfTI via nibabel, plus a raw float32 + JSON sidecar fallback."""

from __future__ import annotations

import json
from pathlib import Path

import nibabel as nib
import numpy as np

from .volume import LabelVolume, ProbabilityVolume, Volume

_KINDS = {"volume": Volume, "label": LabelVolume, "probability": ProbabilityVolume}


def _kind_of(vol: Volume) -> str:
    for name, cls in _KINDS.items():
        if type(vol) is cls:
            return name
    return "volume"


def save_nifti(vol: Volume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag(list(vol.spacing) + [1.0])
    affine[:3, 3] = vol.origin
    if isinstance(vol, LabelVolume):
        data = vol.data.astype(np.uint8)
    else:
        data = vol.data.astype(np.float32)
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(vol.spacing)
    # fixed header fields keep reruns byte-identical
    img.header["descrip"] = b"muvi_tta"
    nib.save(img, str(path))
    return path


def load_nifti(path, kind: str = "volume") -> Volume:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in img.affine[:3, 3])
    cls = _KINDS[kind]
    if cls is LabelVolume:
        data = (data > 0).astype(np.uint8)
    else:
        data = data.astype(np.float32)
    return cls(data, spacing=spacing, origin=origin)


def save_raw(vol: Volume, path) -> Path:
    """Write ``<path>.raw`` (little-endian float32, C order) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = path.with_suffix(".raw")
    vol.data.astype("<f4").tofile(raw)
    meta = {
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": "float32",
        "kind": _kind_of(vol),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return raw


def load_raw(path) -> Volume:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".raw"), dtype="<f4").reshape(meta["shape"])
    cls = _KINDS[meta.get("kind", "volume")]
    if cls is LabelVolume:
        data = (data > 0.5).astype(np.uint8)
    return cls(data, spacing=meta["spacing"], origin=meta.get("origin", (0, 0, 0)))


def save_volume(vol: Volume, path) -> Path:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        return save_raw(vol, path)
    return save_nifti(vol, path)


def load_volume(path, kind: str = "volume") -> Volume:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        return load_raw(path)
    return load_nifti(path, kind)
