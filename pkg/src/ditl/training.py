"""Adam, phase training with warm-up and early stopping, and the training pipelines.

A *phase* minimises ``L_cls + lam * L_xai`` against one mask level. The
pipelines chain phases: the three-step curriculum for the CT model, the
single-phase ablations, and the fusion procedures built on top of them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .losses import composite, cross_entropy, one_hot, xai_loss
from .models import (ModelConfig, build_intermediate, build_late, forward, init_params)
from .phantom import SCHEMA, draw_augmentation, encode_clinical, fit_clinical, shift_flip
from .xai import NORMALIZATIONS, gradcam_from_output

MASK_LEVELS = (None, "m1", "m2")
FUSIONS = ("early", "intermediate", "late")
ABLATIONS = ("xai-guide", "segmentation")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup: int = 50
    max_epochs: int = 300
    patience: int = 50
    batch_size: int = 8
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 1.0
    augment: bool = True
    normalization: str = "minmax"
    second_order: bool = True
    warm_start: bool = True
    freeze_encoders: bool = False
    eval_batch: int = 40

    def __post_init__(self):
        if self.batch_size <= 0:
            raise TrainingError("batch size must be positive")
        if self.patience <= 0 or self.patience > self.max_epochs:
            raise TrainingError("patience must lie in 1..max_epochs")
        if self.warmup < 0 or self.max_epochs <= 0:
            raise TrainingError("warm-up must be nonnegative and max_epochs positive")
        if self.lam < 0:
            raise TrainingError("lambda must be nonnegative")
        if self.normalization not in NORMALIZATIONS:
            raise TrainingError(f"unknown heatmap normalization {self.normalization!r}")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self):
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr=1e-3, wd=1e-5, betas=(0.9, 0.999), eps=1e-8):
    """One in-place Adam update with decoupled weight decay.

    ``theta <- theta - lr * wd * theta`` is applied first, then the usual
    bias-corrected moment update. Non-finite gradients abort before any
    parameter is touched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TrainingError("parameter, gradient and optimiser state counts differ")
    gs = []
    for p, g, m in zip(params, grads, state.m):
        g = np.zeros_like(p.data) if g is None else np.asarray(getattr(g, "data", g), dtype=np.float64)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise TrainingError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, state {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in a parameter of shape {p.data.shape}")
        gs.append(g)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        if wd:
            p.data -= lr * wd * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# data


@dataclass
class Split:
    images: np.ndarray  # n x 1 x H x W x D
    m1: np.ndarray
    m2: np.ndarray
    clinical: np.ndarray  # n x F
    labels: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return Split(self.images[idx], self.m1[idx], self.m2[idx], self.clinical[idx],
                     self.labels[idx], self.index[idx])

    def lesion_only(self):
        """Images restricted to the lesion (voxelwise product with M2)."""
        return replace(self, images=self.images * self.m2[:, None])


@dataclass
class FoldData:
    train: Split
    val: Split
    test: Split
    fold: int = 0

    @property
    def n_features(self):
        return self.train.clinical.shape[1]

    @property
    def extents(self):
        return tuple(self.train.images.shape[2:])

    def lesion_only(self):
        return FoldData(self.train.lesion_only(), self.val.lesion_only(), self.test.lesion_only(), self.fold)


def make_fold_data(prepared, split, fold=0, schema=SCHEMA):
    """Slice a preprocessed dataset by a FoldSplit; clinical statistics come from train only."""
    for name in ("train", "val", "test"):
        if len(getattr(split, name)) == 0:
            raise TrainingError(f"empty {name} split")
    stats = fit_clinical([prepared.records[i] for i in split.train], schema)
    clin = encode_clinical(prepared.records, stats, schema)

    def part(idx):
        idx = np.asarray(idx, dtype=int)
        return Split(prepared.images[idx], prepared.m1[idx], prepared.m2[idx], clin[idx],
                     np.asarray(prepared.labels)[idx].astype(int), idx)

    return FoldData(part(split.train), part(split.val), part(split.test), fold)


def _augment_batch(batch, rng):
    imgs, m1, m2 = batch.images.copy(), batch.m1.copy(), batch.m2.copy()
    for i in range(len(batch)):
        shift, flip = draw_augmentation(rng)
        imgs[i] = shift_flip(imgs[i], shift, flip)
        m1[i] = shift_flip(m1[i], shift, flip)
        m2[i] = shift_flip(m2[i], shift, flip)
    return replace(batch, images=imgs, m1=m1, m2=m2)


# ---------------------------------------------------------------------------
# phases


@dataclass
class PhaseResult:
    name: str
    lam: float
    mask: str | None
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    stop_reason: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_state: dict = field(default_factory=dict, repr=False)
    best_state: dict = field(default_factory=dict, repr=False)

    def log_line(self):
        return (f"phase={self.name} lambda={self.lam:g} mask={self.mask or 'none'} "
                f"epochs={self.epochs_run} best_epoch={self.best_epoch} "
                f"best_val_loss={self.best_val_loss:.6f} final_train_loss={self.train_loss[-1]:.6f} "
                f"stop={self.stop_reason}")


@dataclass
class TrainedModel:
    model: object
    phases: list = field(default_factory=list)
    lesion_input: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def phase_log(self):
        return "\n".join(p.log_line() for p in self.phases) + ("\n" if self.phases else "")


def batch_loss(model, batch, lam, mask, cfg, create_graph=None):
    """Composite loss on one batch; returns (total, cls, xai-or-None).

    Grad-CAM targets the ground-truth class, and only runs when ``lam > 0``.
    """
    y = batch.labels
    track = lam > 0
    out = forward(model, batch.images, batch.clinical, track_target=track)
    cls = cross_entropy(out.probs, one_hot(y, out.probs.shape[-1]))
    if not track:
        return cls, cls, None
    cg = cfg.second_order if create_graph is None else create_graph
    heat = gradcam_from_output(out, y, create_graph=cg, normalize=cfg.normalization)
    xai = xai_loss(heat, getattr(batch, mask))
    return composite(cls, lam, xai), cls, xai


def evaluate_loss(model, split, lam, mask, cfg):
    """Sample-weighted composite loss over a whole split (no augmentation)."""
    model.eval()
    total, n = 0.0, len(split)
    for s in range(0, n, cfg.eval_batch):
        b = split.take(np.arange(s, min(n, s + cfg.eval_batch)))
        if lam > 0:
            with tc.set_grad_enabled(True):
                loss, _, _ = batch_loss(model, b, lam, mask, cfg, create_graph=False)
        else:
            with tc.no_grad():
                loss, _, _ = batch_loss(model, b, lam, mask, cfg)
        total += float(loss.data) * len(b)
    return total / n


def validation_xai(model, split, mask="m2", cfg=None):
    """Mean L_xai of ground-truth-class heatmaps against ``mask`` over ``split``."""
    cfg = cfg or TrainConfig()
    model.eval()
    total = 0.0
    for s in range(0, len(split), cfg.eval_batch):
        b = split.take(np.arange(s, min(len(split), s + cfg.eval_batch)))
        with tc.set_grad_enabled(True):
            out = forward(model, b.images, b.clinical, track_target=True)
            heat = gradcam_from_output(out, b.labels, create_graph=False, normalize=cfg.normalization)
        total += float(xai_loss(heat, getattr(b, mask)).data) * len(b)
    return total / len(split)


def _salt(name):
    return zlib.crc32(name.encode())


def train_phase(model, data, mask=None, lam=0.0, cfg=None, name="phase"):
    """Minibatch Adam on ``L_cls + lam * L_xai(mask)`` with early stopping.

    Validation loss is computed every epoch; the patience counter only runs
    once the warm-up epochs are over. The model ends holding the parameters
    with the lowest validation loss seen, which are also returned.
    """
    cfg = cfg or TrainConfig()
    tc.tune_allocator()
    if mask not in MASK_LEVELS:
        raise TrainingError(f"unknown mask level {mask!r}")
    if (lam > 0) != (mask is not None):
        raise TrainingError(f"lambda={lam} is inconsistent with mask level {mask!r}")
    if len(data.train) == 0 or len(data.val) == 0:
        raise TrainingError("empty training or validation split")
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    state = AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, _salt(name), data.fold])
    result = PhaseResult(name, float(lam), mask, 0, 0, np.inf, "max_epochs",
                         initial_state=model.state_dict())
    wait = 0
    n = len(data.train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        model.train()
        run = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = data.train.take(order[s:s + cfg.batch_size])
            if cfg.augment:
                batch = _augment_batch(batch, rng)
            with tc.set_grad_enabled(True):
                loss, _, _ = batch_loss(model, batch, lam, mask, cfg)
                grads = tc.grad(loss, params, allow_unused=True)
            adam_step(params, grads, state, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
            run += float(loss.data) * len(batch)
        result.train_loss.append(run / n)
        val = evaluate_loss(model, data.val, lam, mask, cfg)
        result.val_loss.append(val)
        result.epochs_run = epoch
        if val < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val, epoch
            result.best_state = model.state_dict()
            wait = 0
        elif epoch > cfg.warmup:
            wait += 1
            if wait >= cfg.patience:
                result.stop_reason = "patience"
                break
    model.load_state_dict(result.best_state)
    model.eval()
    return result


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class GLSchedule:
    """The curriculum: global image, then lung mask, then lesion mask."""

    steps: tuple = (("step0", None, 0.0), ("step1", "m1", 1.0), ("step2", "m2", 1.0))

    def __post_init__(self):
        if not self.steps or self.steps[0][1] is not None:
            raise TrainingError("the first step trains without a mask")
        levels = [MASK_LEVELS.index(m) for _, m, _ in self.steps]
        if levels != sorted(set(levels)):
            raise TrainingError("mask levels must strictly refine from step to step")


def run_clinical(data, cfg, model_config=None):
    model = init_params("unimodal-clinical", data.n_features, model_config, seed=cfg.seed)
    phase = train_phase(model, data, None, 0.0, cfg, name="clinical")
    return TrainedModel(model, [phase])


def run_doctor_in_the_loop_ct(data, cfg, model_config=None, schedule=None):
    """Step 0 -> Step 1 -> Step 2; each step warm-starts from the previous best.

    ``diagnostics['val_xai_m2']`` records the validation L_xai against the
    lesion mask after every step.
    """
    schedule = schedule or GLSchedule()
    model = init_params("unimodal-ct", 0, model_config, seed=cfg.seed, extents=data.extents)
    trained = TrainedModel(model)
    trained.diagnostics["val_xai_m2"] = {}
    for k, (name, mask, lam) in enumerate(schedule.steps):
        if k and not cfg.warm_start:
            model.load_state_dict(init_params("unimodal-ct", 0, model_config, seed=cfg.seed, extents=data.extents).state_dict())
        lam = cfg.lam * lam
        trained.phases.append(train_phase(model, data, mask, lam, cfg, name=name))
        trained.diagnostics["val_xai_m2"][name] = validation_xai(model, data.val, "m2", cfg)
    return trained


def run_ablation(data, cfg, kind, model_config=None):
    """Single-phase CT models: lesion-mask guidance, or lesion-only input."""
    model = init_params("unimodal-ct", 0, model_config, seed=cfg.seed, extents=data.extents)
    if kind == "xai-guide":
        phase = train_phase(model, data, "m2", cfg.lam, cfg, name="xai-guide")
        return TrainedModel(model, [phase])
    if kind == "segmentation":
        phase = train_phase(model, data.lesion_only(), None, 0.0, cfg, name="segmentation")
        return TrainedModel(model, [phase], lesion_input=True)
    raise TrainingError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")


def _early_from_ct(ct_model, n_features, seed):
    """Early-fusion network whose imaging path starts from a trained CT encoder.

    The image-channel kernels of the first convolution and all deeper layers
    are copied; kernels of the clinical channels and the head are fresh.
    """
    fused = init_params("early", n_features, ct_model.config, seed)
    src = ct_model.modules["ct"].params
    dst = fused.modules["ct"].params
    for name, p in src.items():
        if name == "conv0.weight":
            dst[name].data[:, :1] = p.data
        else:
            dst[name].data[...] = p.data
    return fused


def run_multimodal(data, cfg, fusion, ct, clinical, guided=True, seed=None):
    """Fuse a trained CT model with the trained clinical model.

    ``intermediate`` copies both encoders under a fresh head and trains the
    whole network on the composite loss against M2 when ``guided`` (on the
    classification loss alone otherwise). ``early`` stacks the clinical vector
    as image channels and trains on the classification loss only. ``late``
    averages the two members' probabilities without further training.
    """
    seed = cfg.seed if seed is None else seed
    fdata = data.lesion_only() if ct.lesion_input else data
    if fusion == "late":
        return TrainedModel(build_late(ct.model, clinical.model), [], ct.lesion_input)
    if fusion == "intermediate":
        model = build_intermediate(ct.model, clinical.model, seed, cfg.freeze_encoders)
        if guided:
            phase = train_phase(model, fdata, "m2", cfg.lam, cfg, name="joint")
        else:
            phase = train_phase(model, fdata, None, 0.0, cfg, name="joint")
        return TrainedModel(model, [phase], ct.lesion_input)
    if fusion == "early":
        model = _early_from_ct(ct.model, data.n_features, seed)
        phase = train_phase(model, fdata, None, 0.0, cfg, name="early")
        return TrainedModel(model, [phase], ct.lesion_input)
    raise TrainingError(f"unknown fusion kind {fusion!r}; choose from {FUSIONS}")


def predict(trained, split, batch=40):
    """Class probabilities (n x 2) for ``split`` under the model's input convention."""
    if trained.lesion_input:
        split = split.lesion_only()
    trained.model.eval()
    out = []
    with tc.no_grad():
        for s in range(0, len(split), batch):
            b = split.take(np.arange(s, min(len(split), s + batch)))
            out.append(forward(trained.model, b.images, b.clinical).probs.data)
    return np.concatenate(out, axis=0)


def default_model_config():
    return ModelConfig()
