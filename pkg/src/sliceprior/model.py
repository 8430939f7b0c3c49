"""Auto-decoder occupancy network: f(x, z) -> softmax over six classes.

The MLP takes raw coordinates in millimetres concatenated with a latent
code.  The concatenated input is fed again into hidden layer ``skip_layer``
(DeepSDF-style skip).  Because the latent part of the input is constant
for all points of a shape, the first and skip layers split their weight
matrix into a coordinate block and a latent block; this is the same linear
map as multiplying the concatenated vector.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

CLASS_NAMES = ("background", "LA", "LV", "RA", "RV", "LV-myo")
BACKGROUND, LA, LV, RA, RV, MYO = range(6)
FOREGROUND = (LA, LV, RA, RV, MYO)

CHECKPOINT_MAGIC = b"SPCKPT1\n"
CHECKPOINT_VERSION = 1
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class Architecture:
    coord_dim: int = 3
    latent_dim: int = 128
    hidden_width: int = 128
    hidden_layers: int = 8
    skip_layer: int = 4  # 0-based: the 5th hidden layer sees (x, z) again
    n_classes: int = 6
    activation: str = "relu"
    coord_scale: float = 50.0  # mm; shrinks initial coordinate weights

    @property
    def input_dim(self) -> int:
        return self.coord_dim + self.latent_dim

    def fan_in(self, layer: int) -> int:
        if layer == 0:
            return self.input_dim
        if layer == self.skip_layer:
            return self.hidden_width + self.input_dim
        return self.hidden_width

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for k in range(self.hidden_layers):
            shapes[f"hidden{k}.weight"] = (self.fan_in(k), self.hidden_width)
            shapes[f"hidden{k}.bias"] = (self.hidden_width,)
        shapes["out.weight"] = (self.hidden_width, self.n_classes)
        shapes["out.bias"] = (self.n_classes,)
        return shapes


@dataclass
class ModelState:
    arch: Architecture
    params: dict[str, np.ndarray]
    class_names: tuple[str, ...] = CLASS_NAMES

    def copy(self) -> "ModelState":
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()}, self.class_names)


@dataclass
class LatentCodebook:
    codes: dict[str, np.ndarray] = field(default_factory=dict)
    reg_weight: float = 1e-4

    def matrix(self, ids) -> np.ndarray:
        return np.stack([self.codes[i] for i in ids])


def init_model(seed: int, arch: Architecture | None = None) -> ModelState:
    """Kaiming-uniform hidden weights, zero biases, small output layer.

    Columns that multiply raw coordinates are divided by ``coord_scale`` so
    the first activations are O(1) for inputs spanning about +-100 mm.
    The output layer is scaled down so a fresh model is near uniform.
    """
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        gain = 0.1 if name.startswith("out") else np.sqrt(2.0)
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if name == "hidden0.weight":
            w[: arch.coord_dim] /= arch.coord_scale
        elif name == f"hidden{arch.skip_layer}.weight":
            lo = arch.hidden_width
            w[lo: lo + arch.coord_dim] /= arch.coord_scale
        params[name] = w
    return ModelState(arch, params)


def init_latent(seed: int, latent_dim: int = 128, std: float = 0.01) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, std, size=latent_dim)


def _weight_blocks(w, arch: Architecture, hidden_rows: int):
    """Split a (tape) weight matrix into hidden / coordinate / latent row blocks."""
    c0 = hidden_rows
    c1 = c0 + arch.coord_dim
    hid = w[:c0] if hidden_rows else None
    return hid, w[c0:c1], w[c1:]


def forward_logits(tape: ad.Tape, pvars: dict[str, ad.Var], arch: Architecture,
                   coords: ad.Var, latents: ad.Var, owner: np.ndarray | None = None) -> ad.Var:
    """Logits for points ``coords`` (n, 3).

    ``latents`` is (n_shapes, latent_dim); ``owner[k]`` gives the shape
    of point k.  With a single shape ``owner`` may be None.
    """
    if latents.shape[-1] != arch.latent_dim:
        raise ValueError(f"latent has {latents.shape[-1]} components, model expects {arch.latent_dim}")
    n = coords.shape[0]
    if owner is None:
        owner = np.zeros(n, dtype=np.intp)

    def input_term(w, hidden_rows):
        _, wx, wz = _weight_blocks(w, arch, hidden_rows)
        return coords @ wx + (latents @ wz).take(owner)

    h = None
    for k in range(arch.hidden_layers):
        w, b = pvars[f"hidden{k}.weight"], pvars[f"hidden{k}.bias"]
        if k == 0:
            pre = input_term(w, 0)
        elif k == arch.skip_layer:
            pre = h @ w[: arch.hidden_width] + input_term(w, arch.hidden_width)
        else:
            pre = h @ w
        h = ad.relu(pre + b)
    return h @ pvars["out.weight"] + pvars["out.bias"]


def param_vars(tape: ad.Tape, state: ModelState, trainable: bool) -> dict[str, ad.Var]:
    return {k: tape.variable(v, requires_grad=trainable) for k, v in state.params.items()}


def predict_probs(state: ModelState, coords, z, chunk: int = 32768) -> np.ndarray:
    """Class probabilities for coordinates (n, 3) under a single latent code."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (state.arch.latent_dim,):
        raise ValueError(f"latent must have shape ({state.arch.latent_dim},), got {z.shape}")
    out = np.empty((len(coords), state.arch.n_classes))
    for s in range(0, len(coords), chunk):
        tape = ad.Tape()
        pv = param_vars(tape, state, trainable=False)
        logits = forward_logits(tape, pv, state.arch, tape.constant(coords[s:s + chunk]),
                                tape.constant(z[None]))
        out[s:s + chunk] = ad.softmax(logits).value
    return out


def forward(x, z, state: ModelState) -> np.ndarray:
    """Class probabilities for one point."""
    return predict_probs(state, np.asarray(x, dtype=np.float64)[None], z)[0]


# -- losses ---------------------------------------------------------------

def one_hot(labels, n_classes: int = 6) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(n_classes)[None, :]).astype(np.float64)


def cross_entropy(logits: ad.Var, labels) -> ad.Var:
    """Mean of -log p_label over the batch."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cross-entropy of an empty batch")
    logp = ad.log_softmax(logits)
    return -(logp * one_hot(labels, logits.shape[-1])).sum() / float(len(labels))


def soft_dice(probs: ad.Var, labels, smooth: float = DICE_SMOOTH) -> ad.Var:
    """1 - mean soft Dice over the classes present in ``labels``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("soft Dice of an empty batch")
    n_classes = probs.shape[-1]
    present = np.unique(labels)
    target = one_hot(labels, n_classes)[:, present]
    p = probs[:, present]
    inter = (p * target).sum(axis=0)
    denom = p.sum(axis=0) + target.sum(axis=0)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def cross_entropy_np(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cross-entropy of an empty batch")
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def soft_dice_np(probs, labels, smooth: float = DICE_SMOOTH) -> float:
    tape = ad.Tape()
    return float(soft_dice(tape.constant(probs), labels, smooth).value)


def total_loss(data_loss, z, reg_weight: float):
    """Data term plus ``reg_weight * |z|^2``.  Works on tape vars or floats."""
    if isinstance(z, ad.Var):
        return data_loss + (z * z).sum() * reg_weight
    z = np.asarray(z, dtype=np.float64)
    return data_loss + reg_weight * float(z @ z)


# -- checkpoint file -------------------------------------------------------

def save_checkpoint(path, state: ModelState, codebook: LatentCodebook, extra: dict | None = None):
    """Header (JSON) followed by little-endian float32 arrays in header order."""
    arrays = [(k, state.params[k]) for k in state.arch.param_shapes()]
    arrays += [(f"latent/{sid}", codebook.codes[sid]) for sid in sorted(codebook.codes)]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": asdict(state.arch),
        "class_names": list(state.class_names),
        "latent_dim": state.arch.latent_dim,
        "reg_weight": codebook.reg_weight,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, v in arrays:
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelState, LatentCodebook, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off: off + hlen])
    off += hlen
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    arch = Architecture(**header["architecture"])
    params, codes = {}, {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        arr = arr.reshape(spec["shape"])
        if spec["name"].startswith("latent/"):
            codes[spec["name"][len("latent/"):]] = arr
        else:
            params[spec["name"]] = arr
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    state = ModelState(arch, params, tuple(header["class_names"]))
    return state, LatentCodebook(codes, header["reg_weight"]), header.get("extra", {})


def round_to_storage(state: ModelState) -> ModelState:
    """Copy of ``state`` with parameters rounded to checkpoint precision."""
    return ModelState(state.arch, {k: v.astype(np.float32).astype(np.float64)
                                   for k, v in state.params.items()}, state.class_names)
