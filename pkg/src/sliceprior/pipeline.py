"""Training the shape prior and fitting it to sparse views at test time."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import geometry as geom
from .geometry import RigidParams
from .model import (CLASS_NAMES, FOREGROUND, LA, LV, LatentCodebook, ModelState, cross_entropy,
                    forward_logits, init_latent, init_model, param_vars, predict_probs,
                    soft_dice)
from .views import VIEW_NAMES, SliceBundle, acquire_views
from .volume import LabelVolume, grid_from_spec

log = logging.getLogger(__name__)

EXPERIMENTS = ("joint-perturbed", "latent-only-perturbed", "ideal-pose", "biplane")
PERTURB_SIGMA = 5.0


class TrainingDivergedError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


def _check_keys(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass
class TrainConfig:
    epochs: int = 1800
    batch_size: int = 8
    points_per_volume: int = 64**3
    lr: float = 1e-4
    reg_weight: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if min(self.batch_size, self.points_per_volume) < 1 or self.epochs < 0:
            raise ConfigError("batch_size and points_per_volume must be >= 1, epochs >= 0")
        if self.lr <= 0 or self.reg_weight < 0:
            raise ConfigError("lr must be positive and reg_weight non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _check_keys(cls, d)
        return cls(**d)


@dataclass
class ReconConfig:
    total_steps: int = 1000
    latent_only_steps: int = 100
    lr: float = 1e-2
    reg_weight: float = 1e-4
    anchored_view: str = "A4C"
    active_views: tuple[str, ...] = VIEW_NAMES
    optimize_pose: bool = True
    pixel_stride: int = 1  # 1 = every pixel every step

    def __post_init__(self):
        self.active_views = tuple(self.active_views)
        if not 0 <= self.latent_only_steps < self.total_steps:
            raise ConfigError("need 0 <= latent_only_steps < total_steps")
        if self.lr <= 0 or self.pixel_stride < 1:
            raise ConfigError("lr must be positive and pixel_stride >= 1")
        bad = set(self.active_views) - set(VIEW_NAMES)
        if bad or not self.active_views:
            raise ConfigError(f"invalid active views {self.active_views}")
        if self.optimize_pose and self.anchored_view not in self.active_views:
            raise ConfigError(f"anchored view {self.anchored_view} must be active when poses are optimized")

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        _check_keys(cls, d)
        return cls(**d)


# -- training ------------------------------------------------------------------

def sample_points(vol: LabelVolume, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points in the volume's world box with nearest-neighbour labels."""
    if n < 1:
        raise ValueError("need at least one sample")
    lo, hi = vol.bounds
    pts = rng.uniform(lo, hi, size=(n, 3))
    return pts, vol.lookup(pts).astype(np.int64)


def _batch_loss(tape, pvars, state: ModelState, coords, labels, latents, owner, n_shapes, reg_weight):
    logits = forward_logits(tape, pvars, state.arch, tape.constant(coords), latents, owner)
    probs = ad.softmax(logits)
    per_shape = []
    for s in range(n_shapes):
        rows = np.flatnonzero(owner == s)
        lg, pr, lab = logits.take(rows), probs.take(rows), labels[rows]
        per_shape.append(cross_entropy(lg, lab) + soft_dice(pr, lab))
    data = per_shape[0]
    for term in per_shape[1:]:
        data = data + term
    reg = (latents * latents).sum() * reg_weight
    return (data + reg) / float(n_shapes)


@dataclass
class TrainResult:
    state: ModelState
    codebook: LatentCodebook
    losses: list[float] = field(default_factory=list)


def train(volumes: dict[str, LabelVolume], config: TrainConfig,
          on_epoch: Callable[[int, ModelState, LatentCodebook], None] | None = None) -> TrainResult:
    """Jointly fit network weights and one latent code per training shape."""
    if not volumes:
        raise ValueError("training needs at least one volume")
    ids = sorted(volumes)
    state = init_model(config.seed)
    codes = {sid: init_latent(config.seed * 100003 + k + 1, state.arch.latent_dim) for k, sid in enumerate(ids)}
    codebook = LatentCodebook(codes, config.reg_weight)
    net_opt = ad.AdamState(config.lr)
    code_opt = {sid: ad.AdamState(config.lr) for sid in ids}
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), config.batch_size):
            batch = [ids[k] for k in order[start:start + config.batch_size]]
            pts, labs, owner = [], [], []
            for s, sid in enumerate(batch):
                p, lab = sample_points(volumes[sid], config.points_per_volume, rng)
                pts.append(p)
                labs.append(lab)
                owner.append(np.full(len(p), s, dtype=np.intp))
            tape = ad.Tape()
            pvars = param_vars(tape, state, trainable=True)
            latents = tape.variable(codebook.matrix(batch))
            loss = _batch_loss(tape, pvars, state, np.concatenate(pts), np.concatenate(labs), latents,
                               np.concatenate(owner), len(batch), config.reg_weight)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}")
            grads = tape.backward(loss)
            ad.adam_step(state.params, {k: grads[v.id] for k, v in pvars.items()}, net_opt)
            gz = grads[latents.id]
            for s, sid in enumerate(batch):
                ad.adam_step(codebook.codes, {sid: gz[s]}, code_opt[sid])
            losses.append(value)
        if on_epoch is not None:
            on_epoch(epoch, state, codebook)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(state, codebook, losses)


# -- test-time reconstruction --------------------------------------------------

@dataclass
class ReconResult:
    latent: np.ndarray
    rigid: dict[str, RigidParams]
    loss_trace: list[float]
    data_loss_trace: list[float]
    volume: LabelVolume | None = None


def _pixel_subset(shape, stride: int, step: int):
    if stride == 1:
        rows, cols = np.indices(shape)
        return rows.ravel(), cols.ravel()
    k = step % (stride * stride)
    oi, oj = divmod(k, stride)
    rows, cols = np.meshgrid(np.arange(oi, shape[0], stride), np.arange(oj, shape[1], stride), indexing="ij")
    return rows.ravel(), cols.ravel()


def slice_objective(tape, pvars, state: ModelState, bundle: SliceBundle, views, z: ad.Var,
                    pose_vars: dict, rigid: dict[str, RigidParams], reg_weight: float, stride: int = 1,
                    step: int = 0):
    """Sum over views of (CE + soft Dice) on slice pixels, plus the latent penalty.

    Views with entries in ``pose_vars`` get differentiable coordinates;
    the others use their current (fixed) rigid parameters.
    """
    data = None
    for name in views:
        mask = bundle.masks[name]
        rows, cols = _pixel_subset(mask.labels.shape, stride, step)
        labels = mask.labels[rows, cols].astype(np.int64)
        if name in pose_vars:
            aa, tr = pose_vars[name]
            coords = geom.plane_points_tape(mask.plane, aa, tr, rows, cols)
        else:
            pts = geom.plane_grid(mask.plane, rigid[name])[rows, cols]
            coords = tape.constant(pts)
        logits = forward_logits(tape, pvars, state.arch, coords, z.reshape(1, state.arch.latent_dim))
        term = cross_entropy(logits, labels) + soft_dice(ad.softmax(logits), labels)
        data = term if data is None else data + term
    return data + (z * z).sum() * reg_weight, data


def reconstruct(bundle: SliceBundle, state: ModelState, config: ReconConfig,
                reference_grid: dict | None = None, class_names=CLASS_NAMES,
                on_step: Callable[[int, np.ndarray, dict[str, RigidParams]], None] | None = None) -> ReconResult:
    """Two-phase fit: latent only, then latent and non-anchored view poses.

    ``on_step(step, z, rigid)`` runs after every update with the live arrays.
    """
    if tuple(class_names) != tuple(bundle.class_names) or tuple(state.class_names) != tuple(bundle.class_names):
        raise ConfigError("class order of checkpoint and slice bundle differ")
    missing = [v for v in config.active_views if v not in bundle.masks]
    if missing:
        raise ConfigError(f"bundle lacks active views {missing}")
    views = [v for v in VIEW_NAMES if v in config.active_views]  # fixed summation order
    movable = [v for v in views if config.optimize_pose and v != config.anchored_view]

    z = np.zeros(state.arch.latent_dim)
    rigid = {v: RigidParams() for v in views}
    pose = {f"{v}.{part}": getattr(rigid[v], part) for v in movable for part in ("axis_angle", "translation")}
    z_opt = ad.AdamState(config.lr)
    pose_opt = ad.AdamState(config.lr)
    latent = {"z": z}
    trace, data_trace = [], []
    for step in range(config.total_steps):
        joint = step >= config.latent_only_steps and movable
        tape = ad.Tape()
        pvars = param_vars(tape, state, trainable=False)
        zv = tape.variable(latent["z"])
        pose_vars = {}
        if joint:
            pose_vars = {v: (tape.variable(rigid[v].axis_angle), tape.variable(rigid[v].translation))
                         for v in movable}
        loss, data = slice_objective(tape, pvars, state, bundle, views, zv, pose_vars, rigid,
                                     config.reg_weight, config.pixel_stride, step)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"reconstruction loss became {value} at step {step}")
        trace.append(value)
        data_trace.append(float(data.value))
        grads = tape.backward(loss)
        ad.adam_step(latent, {"z": grads[zv.id]}, z_opt)
        if joint:
            g = {}
            for v, (aa, tr) in pose_vars.items():
                g[f"{v}.axis_angle"] = grads[aa.id]
                g[f"{v}.translation"] = grads[tr.id]
            ad.adam_step(pose, g, pose_opt)
        if on_step is not None:
            on_step(step, latent["z"], rigid)
    result = ReconResult(latent["z"], rigid, trace, data_trace)
    if reference_grid is not None:
        result.volume = dense_query(state, latent["z"], reference_grid)
    return result


def dense_query(state: ModelState, z, grid: dict | LabelVolume, chunk: int = 32768) -> LabelVolume:
    """Argmax class at every voxel centre of ``grid`` (ties go to the lower class id)."""
    ref = grid if isinstance(grid, LabelVolume) else grid_from_spec(grid)
    dims = ref.dims
    idx = np.indices(dims).reshape(3, -1).T
    pts = ref.origin + (idx + 0.5) * ref.spacing
    probs = predict_probs(state, pts, z, chunk)
    labels = np.argmax(probs, axis=1).astype(np.uint8).reshape(dims)
    return LabelVolume(labels, ref.spacing, ref.origin)


# -- experiments ----------------------------------------------------------------

METRIC_COLUMNS = ("case_id", "experiment", "structure", "dice", "assd_mm", "mae_ml", "mae_pct")


def experiment_setup(name: str, base: ReconConfig, sigma: float = PERTURB_SIGMA) -> tuple[float, ReconConfig]:
    """Perturbation sigma and reconstruction config for a named experiment."""
    cfg = asdict(base)
    if name == "joint-perturbed":
        cfg.update(optimize_pose=True, active_views=VIEW_NAMES)
    elif name == "latent-only-perturbed":
        cfg.update(optimize_pose=False, active_views=VIEW_NAMES)
    elif name == "ideal-pose":
        cfg.update(optimize_pose=False, active_views=VIEW_NAMES)
    elif name == "biplane":
        cfg.update(optimize_pose=True, active_views=("A2C", "A4C"))
    else:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    return (0.0 if name == "ideal-pose" else sigma), ReconConfig(**cfg)


def case_bundle(vol: LabelVolume, case_id: str, case_seed: int, sigma: float, seed: int) -> SliceBundle:
    # same seed for every experiment on a case, so perturbed runs see identical slices
    return acquire_views(vol, case_id, sigma=sigma, seed=seed * 1_000_003 + case_seed)


def _metric_rows(case_id, experiment, pred, ref):
    rows = []
    for cls in FOREGROUND:
        m = ev.structure_metrics(pred, ref, cls)
        rows.append({"case_id": case_id, "experiment": experiment, "structure": CLASS_NAMES[cls],
                     "dice": m.dice, "assd_mm": m.assd, "mae_ml": m.mae_ml, "mae_pct": m.mae_pct})
    return rows


def simpson_rows(case_id: str, bundle: SliceBundle, ref: LabelVolume,
                 n_disks: int = ev.SIMPSON_DISKS) -> list[dict]:
    rows = []
    for cls in (LV, LA):
        try:
            est = ev.simpson_biplane(bundle.masks["A2C"], bundle.masks["A4C"], cls, n_disks=n_disks)
        except ev.MissingStructureError as exc:
            # perturbed views can slice past the mitral opening
            log.warning("%s %s simpson: %s; using the fallback base", case_id, CLASS_NAMES[cls], exc)
            try:
                est = ev.simpson_biplane(bundle.masks["A2C"], bundle.masks["A4C"], cls, n_disks=n_disks,
                                         fallback=True)
            except ev.MissingStructureError as exc2:
                log.warning("%s %s simpson undefined: %s", case_id, CLASS_NAMES[cls], exc2)
                est = float("nan")
        true = ev.volume_ml(ref, cls)
        err = abs(est - true)
        rows.append({"case_id": case_id, "experiment": "simpson", "structure": CLASS_NAMES[cls],
                     "dice": float("nan"), "assd_mm": float("nan"), "mae_ml": err,
                     "mae_pct": 100.0 * err / true})
    return rows


def run_experiment(name: str, cases: dict[str, tuple[LabelVolume, int]], state: ModelState,
                   base: ReconConfig, seed: int = 0, train_ids=(), sigma: float = PERTURB_SIGMA,
                   n_disks: int = ev.SIMPSON_DISKS, monitor=None) -> tuple[list[dict], dict]:
    """Reconstruct every case under one protocol; returns metric rows and per-case results.

    ``cases`` maps case id to (reference volume, case seed).  ``monitor``, if
    given, is called as ``monitor(case_id, step, z, rigid)`` after every step.
    """
    overlap = set(cases) & set(train_ids)
    if overlap:
        raise ConfigError(f"test cases overlap the training set: {sorted(overlap)}")
    sigma, cfg = experiment_setup(name, base, sigma)
    rows, results = [], {}
    for cid in sorted(cases):
        vol, case_seed = cases[cid]
        bundle = case_bundle(vol, cid, case_seed, sigma, seed)
        hook = None if monitor is None else (lambda step, z, rigid, cid=cid: monitor(cid, step, z, rigid))
        res = reconstruct(bundle.subset(cfg.active_views), state, cfg, vol.grid_spec(), on_step=hook)
        results[cid] = res
        label = "joint-a2c-a4c" if name == "biplane" else name
        rows += _metric_rows(cid, label, res.volume, vol)
        if name == "biplane":
            rows += simpson_rows(cid, bundle, vol, n_disks)
        log.info("%s %s done, final loss %.4f", name, cid, res.loss_trace[-1])
    return rows, results


def aggregate(rows: list[dict]) -> dict:
    """Mean and (population) std per experiment, structure and metric."""
    out: dict = {}
    for r in rows:
        cell = out.setdefault(r["experiment"], {}).setdefault(r["structure"], {})
        for m in METRIC_COLUMNS[3:]:
            cell.setdefault(m, []).append(r[m])
    for exp in out.values():
        for cell in exp.values():
            for m, vals in cell.items():
                a = np.asarray(vals, dtype=np.float64)
                a = a[np.isfinite(a)]
                cell[m] = {"mean": float(a.mean()) if len(a) else None,
                           "std": float(a.std()) if len(a) else None, "n": int(len(a))}
    return out
