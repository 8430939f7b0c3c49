"""Binary volume and slice-bundle files, run configs.

Both binary formats are ``magic | uint32 LE header length | JSON header |
raw uint8 payload``.  See FORMATS.md for the byte layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .geometry import ViewPlane
from .model import CLASS_NAMES
from .phantom import PhantomParams, params_from_dict
from .pipeline import ConfigError, ReconConfig, TrainConfig
from .views import SliceBundle, SliceMask
from .volume import LabelVolume

VOLUME_MAGIC = b"LVOL1"
BUNDLE_MAGIC = b"SLCB1"


class FormatError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = _dump_header(header)
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(blob: bytes, magic: bytes, what: str):
    if not blob.startswith(magic):
        raise FormatError(f"not a {what} file (bad magic)")
    off = len(magic)
    if len(blob) < off + 4:
        raise FormatError(f"truncated {what} file")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off: off + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt {what} header: {exc}") from None
    return header, blob[off + hlen:]


def volume_bytes(vol: LabelVolume) -> bytes:
    header = {"dims": list(vol.dims), "spacing": vol.spacing.tolist(), "origin": vol.origin.tolist(),
              "class_names": list(vol.class_names)}
    return _pack(VOLUME_MAGIC, header, vol.labels.tobytes(order="F"))


def volume_from_bytes(blob: bytes) -> LabelVolume:
    header, payload = _unpack(blob, VOLUME_MAGIC, "volume")
    dims = tuple(header["dims"])
    if len(payload) != int(np.prod(dims)):
        raise FormatError(f"payload has {len(payload)} bytes, expected {int(np.prod(dims))}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims, order="F")
    return LabelVolume(labels.copy(), header["spacing"], header["origin"], tuple(header["class_names"]))


def write_volume(path, vol: LabelVolume):
    Path(path).write_bytes(volume_bytes(vol))


def read_volume(path) -> LabelVolume:
    return volume_from_bytes(Path(path).read_bytes())


def bundle_bytes(bundle: SliceBundle, grid: dict | None = None) -> bytes:
    views, payload = [], []
    for name, mask in bundle.masks.items():
        h, w = mask.labels.shape
        views.append({"name": name, "height": h, "width": w, "assumed_plane": mask.plane.to_dict(),
                      "true_plane": bundle.true_planes[name].to_dict()})
        payload.append(np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())
    header = {"case_id": bundle.case_id, "sigma": bundle.sigma, "seed": bundle.seed,
              "anchored_view": bundle.anchored_view, "class_names": list(bundle.class_names),
              "landmarks": bundle.landmarks, "grid": grid, "views": views}
    return _pack(BUNDLE_MAGIC, header, b"".join(payload))


def bundle_from_bytes(blob: bytes) -> tuple[SliceBundle, dict | None]:
    header, payload = _unpack(blob, BUNDLE_MAGIC, "slice bundle")
    masks, true_planes, off = {}, {}, 0
    for v in header["views"]:
        n = v["height"] * v["width"]
        if off + n > len(payload):
            raise FormatError("slice bundle payload is truncated")
        labels = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off).reshape(v["height"], v["width"])
        off += n
        masks[v["name"]] = SliceMask(labels.copy(), ViewPlane.from_dict(v["assumed_plane"]), v["name"])
        true_planes[v["name"]] = ViewPlane.from_dict(v["true_plane"])
    if off != len(payload):
        raise FormatError(f"{len(payload) - off} trailing payload bytes")
    bundle = SliceBundle(header["case_id"], masks, true_planes, header["sigma"], header["seed"],
                         header["anchored_view"], header["landmarks"], tuple(header["class_names"]))
    return bundle, header.get("grid")


def write_bundle(path, bundle: SliceBundle, grid: dict | None = None):
    Path(path).write_bytes(bundle_bytes(bundle, grid))


def read_bundle(path) -> tuple[SliceBundle, dict | None]:
    return bundle_from_bytes(Path(path).read_bytes())


# -- run configuration -------------------------------------------------------------

def desk_profile() -> dict:
    """Reduced settings that run on one CPU core; the paper constants stay the defaults."""
    return {
        "train": {"epochs": 300, "batch_size": 8, "points_per_volume": 2048, "lr": 1e-3},
        "recon": {"pixel_stride": 8},
        "experiment": {"cohort": 30, "split": [20, 0, 10]},
    }


EXPERIMENT_DEFAULTS = {"sigma": 5.0, "simpson_disks": 20, "seed": 0, "cohort": 153, "split": [100, 13, 40]}


def resolve_config(overrides: dict | None = None, profile: str = "paper") -> dict:
    """Merge a JSON run config over the defaults; unknown keys are rejected."""
    base = {"train": asdict(TrainConfig()), "recon": asdict(ReconConfig()),
            "phantom": asdict(PhantomParams()), "experiment": dict(EXPERIMENT_DEFAULTS)}
    layers = [desk_profile()] if profile == "desk" else []
    if profile not in ("paper", "desk"):
        raise ConfigError(f"unknown profile {profile!r}")
    layers.append(overrides or {})
    for layer in layers:
        unknown = set(layer) - set(base)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        for section, values in layer.items():
            bad = set(values) - set(base[section])
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
            base[section].update(values)
    # validate by construction
    TrainConfig(**base["train"])
    ReconConfig(**base["recon"])
    params_from_dict(base["phantom"]).validate()
    return json.loads(json.dumps(base))


def load_config(path=None, profile: str = "paper") -> dict:
    overrides = json.loads(Path(path).read_text()) if path else None
    return resolve_config(overrides, profile)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def recon_config(cfg: dict) -> ReconConfig:
    return ReconConfig(**cfg["recon"])


def phantom_params(cfg: dict) -> PhantomParams:
    return params_from_dict(cfg["phantom"])


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def check_class_order(names, where: str):
    if tuple(names) != CLASS_NAMES:
        raise FormatError(f"{where} has class order {list(names)}, expected {list(CLASS_NAMES)}; "
                          "regenerate it with this version of the tool")
