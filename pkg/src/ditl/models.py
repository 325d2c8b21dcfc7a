"""Imaging encoder, clinical encoder, fusion heads and the five model variants.

Tensors are batch-first: images ``N x C x H x W x D``, clinical vectors ``N x F``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

KINDS = ("unimodal-ct", "unimodal-clinical", "early", "intermediate", "late")


class ModelError(ValueError):
    pass


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container; subclasses fill ``self.params``."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}
        self.training = False

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ModelError(f"state mismatch: {sorted(set(own) ^ set(state))}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ModelError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def set_trainable(self, flag):
        for name, p in self.named_parameters():
            if not name.endswith(("running_mean", "running_var")):
                p.requires_grad = flag

    def train(self, flag=True):
        self.training = flag
        for child in self.children.values():
            child.train(flag)


POOLINGS = ("max", "flatten", "global")
NORMS = ("batch", "instance", "none")
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def _affine(h, gamma, beta):
    scale = tc.reshape(gamma, (1, -1, 1, 1, 1))
    shift = tc.reshape(beta, (1, -1, 1, 1, 1))
    return tc.add(tc.mul(h, scale), shift)


def batch_norm(h, gamma, beta, running_mean, running_var, training, eps=NORM_EPS,
               momentum=BN_MOMENTUM):
    """Channel standardisation with batch statistics (training) or running ones.

    In training mode the running buffers are updated in place.
    """
    axes = (0, 2, 3, 4)
    if training:
        mu = tc.mean(h, axis=axes, keepdims=True)
        c = tc.sub(h, mu)
        var = tc.mean(tc.mul(c, c), axis=axes, keepdims=True)
        n = h.size // h.shape[1]
        running_mean.data[:] = (1 - momentum) * running_mean.data + momentum * mu.data.ravel()
        running_var.data[:] = ((1 - momentum) * running_var.data
                               + momentum * var.data.ravel() * n / max(n - 1, 1))
        return _affine(tc.div(c, tc.power(tc.add(var, eps), 0.5)), gamma, beta)
    mu = running_mean.data.reshape(1, -1, 1, 1, 1)
    inv = 1.0 / np.sqrt(running_var.data.reshape(1, -1, 1, 1, 1) + eps)
    return _affine(tc.mul(tc.sub(h, Tensor(mu)), Tensor(inv)), gamma, beta)


def instance_norm(h, gamma, beta, eps=NORM_EPS):
    """Per-sample, per-channel standardisation over space, then a channel affine."""
    mu = tc.mean(h, axis=(2, 3, 4), keepdims=True)
    c = tc.sub(h, mu)
    var = tc.mean(tc.mul(c, c), axis=(2, 3, 4), keepdims=True)
    return _affine(tc.div(c, tc.power(tc.add(var, eps), 0.5)), gamma, beta)


def pooled_extents(extents, blocks):
    """Spatial extents after ``blocks`` conv blocks (pooling stops below 2 voxels)."""
    ext = tuple(int(e) for e in extents)
    for _ in range(blocks):
        if min(ext) >= 2:
            ext = tuple(e // 2 for e in ext)
    return ext


class CTEncoder(Module):
    """Blocks of conv3d -> norm -> relu -> avgpool, then a spatial reduction.

    ``pooling`` is ``max`` (global max, the default), ``global`` (global
    average) or ``flatten``; flattening fixes the input extents at
    construction. The first convolution is the Grad-CAM target layer: stride 1
    with same-padding so its maps share the input's grid.
    """

    def __init__(self, in_channels=1, channels=(8, 16, 32), kernel=3, rng=None,
                 extents=None, pooling="max", norm="batch"):
        super().__init__()
        rng = np.random.default_rng(rng)
        if kernel % 2 == 0:
            raise ModelError("kernel extent must be odd")
        if pooling not in POOLINGS:
            raise ModelError(f"unknown pooling {pooling!r}")
        if pooling == "flatten" and extents is None:
            raise ModelError("flatten pooling needs the input extents")
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.kernel = kernel
        self.pooling = pooling
        if norm not in NORMS:
            raise ModelError(f"unknown normalisation {norm!r}")
        self.norm = norm
        self.extents = None if extents is None else tuple(int(e) for e in extents)
        cin = in_channels
        for i, cout in enumerate(self.channels):
            fan_in = cin * kernel ** 3
            self.params[f"conv{i}.weight"] = _uniform(rng, (cout, cin, kernel, kernel, kernel), fan_in)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            if norm != "none":
                self.params[f"norm{i}.weight"] = Tensor(np.ones(cout), requires_grad=True)
                self.params[f"norm{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            if norm == "batch":
                self.params[f"norm{i}.running_mean"] = Tensor(np.zeros(cout))
                self.params[f"norm{i}.running_var"] = Tensor(np.ones(cout))
            cin = cout

    @property
    def out_features(self):
        if self.pooling in ("max", "global"):
            return self.channels[-1]
        return self.channels[-1] * int(np.prod(pooled_extents(self.extents, len(self.channels))))

    def __call__(self, x, track_target=False):
        """Return the feature vector ``z_i`` and the target-layer maps ``A``.

        With ``track_target`` the maps are made a graph node even when no
        parameter requires grad, so Grad-CAM can differentiate through them.
        """
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ModelError(f"CT encoder expects N x {self.in_channels} x H x W x D, got {x.shape}")
        if self.pooling == "flatten" and tuple(x.shape[2:]) != self.extents:
            raise ModelError(f"encoder built for extents {self.extents}, got {tuple(x.shape[2:])}")
        pad = self.kernel // 2
        h = x
        target = None
        for i in range(len(self.channels)):
            h = tc.conv3d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                          stride=1, padding=pad)
            if i == 0:
                if track_target and not h.requires_grad and tc.is_grad_enabled():
                    h = Tensor(h.data, requires_grad=True)
                target = h
            if self.norm == "instance":
                h = instance_norm(h, self.params[f"norm{i}.weight"], self.params[f"norm{i}.bias"])
            elif self.norm == "batch":
                h = batch_norm(h, self.params[f"norm{i}.weight"], self.params[f"norm{i}.bias"],
                               self.params[f"norm{i}.running_mean"], self.params[f"norm{i}.running_var"],
                               self.training)
            h = tc.relu(h)
            if min(h.shape[2:]) >= 2:
                h = tc.avgpool3d(h, 2)
        if self.pooling == "max":
            return tc.amax(h, (2, 3, 4), keepdims=False), target
        if self.pooling == "global":
            return tc.global_avgpool(h), target
        return tc.flatten(h), target


class MLP(Module):
    """dense -> relu stack; the final layer is linear unless ``final_relu``."""

    def __init__(self, widths, rng=None, final_relu=False, zero_last=False):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.widths = tuple(widths)
        self.final_relu = final_relu
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = _uniform(rng, (b, a), a)
            if zero_last and i == len(self.widths) - 2:
                w.data[:] = 0.0
            self.params[f"fc{i}.weight"] = w
            self.params[f"fc{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)

    @property
    def in_features(self):
        return self.widths[0]

    @property
    def out_features(self):
        return self.widths[-1]

    def __call__(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ModelError(f"MLP expects width {self.widths[0]}, got {x.shape[-1]}")
        n = len(self.widths) - 1
        for i in range(n):
            x = tc.dense(x, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            if i < n - 1 or self.final_relu:
                x = tc.relu(x)
        return x


class ClinicalEncoder(MLP):
    def __init__(self, n_features, widths=(32, 16), rng=None):
        super().__init__((n_features,) + tuple(widths), rng=rng, final_relu=True)


@dataclass
class ModelConfig:
    channels: tuple = (8, 16, 32)
    kernel: int = 3
    clinical_widths: tuple = (32, 16)
    fusion_hidden: int = 16
    n_classes: int = 2
    extents: tuple | None = None
    pooling: str = "max"
    norm: str = "batch"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.clinical_widths = tuple(int(c) for c in self.clinical_widths)
        if self.extents is not None:
            self.extents = tuple(int(e) for e in self.extents)
        if self.pooling not in POOLINGS:
            raise ModelError(f"unknown pooling {self.pooling!r}")
        if self.norm not in NORMS:
            raise ModelError(f"unknown normalisation {self.norm!r}")

    def to_dict(self):
        return {"channels": list(self.channels), "kernel": self.kernel,
                "clinical_widths": list(self.clinical_widths), "fusion_hidden": self.fusion_hidden,
                "n_classes": self.n_classes, "pooling": self.pooling, "norm": self.norm,
                "extents": None if self.extents is None else list(self.extents)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "clinical_widths", "extents"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Output:
    logits: Tensor | None
    probs: Tensor
    activations: Tensor | None = None


@dataclass
class ModelVariant:
    """One of the five predictor configurations.

    ``late`` carries two trained member variants instead of modules of its own.
    """

    kind: str
    modules: dict = field(default_factory=dict)
    members: tuple = ()
    config: ModelConfig = field(default_factory=ModelConfig)
    n_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        need = {
            "unimodal-ct": {"ct", "head"},
            "unimodal-clinical": {"clinical", "head"},
            "early": {"ct", "head"},
            "intermediate": {"ct", "clinical", "head"},
            "late": set(),
        }[self.kind]
        if set(self.modules) != need:
            raise ModelError(f"{self.kind} needs modules {sorted(need)}, got {sorted(self.modules)}")
        if self.kind == "late" and len(self.members) != 2:
            raise ModelError("late fusion needs exactly two members")

    @property
    def has_imaging(self):
        if self.kind == "late":
            return any(m.has_imaging for m in self.members)
        return "ct" in self.modules

    @property
    def has_clinical(self):
        return self.kind in ("unimodal-clinical", "early", "intermediate", "late")

    def named_parameters(self):
        for mname, mod in self.modules.items():
            yield from mod.named_parameters(mname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def train(self, flag=True):
        for mod in self.modules.values():
            mod.train(flag)
        for m in self.members:
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def load_state_dict(self, state):
        for mname, mod in self.modules.items():
            pre = mname + "."
            mod.load_state_dict({k[len(pre):]: v for k, v in state.items() if k.startswith(pre)})

    def __call__(self, x_img=None, x_clin=None, track_target=False):
        return forward(self, x_img, x_clin, track_target)


def init_params(kind, n_features=0, config=None, seed=0, extents=None):
    """Build a freshly initialised variant; deterministic per seed.

    ``extents`` (the input grid) overrides ``config.extents``.
    """
    config = config or ModelConfig()
    if extents is not None:
        config = replace(config, extents=tuple(int(e) for e in extents))
    rng = np.random.default_rng(seed)
    mods = {}

    def encoder(cin):
        return CTEncoder(cin, config.channels, config.kernel, rng, config.extents, config.pooling, config.norm)

    if kind == "unimodal-ct":
        mods["ct"] = encoder(1)
        mods["head"] = MLP((mods["ct"].out_features, config.n_classes), rng)
    elif kind == "unimodal-clinical":
        mods["clinical"] = ClinicalEncoder(n_features, config.clinical_widths, rng)
        mods["head"] = MLP((mods["clinical"].out_features, config.n_classes), rng)
    elif kind == "early":
        mods["ct"] = encoder(1 + n_features)
        mods["head"] = MLP((mods["ct"].out_features, config.fusion_hidden, config.n_classes), rng)
    elif kind == "intermediate":
        mods["ct"] = encoder(1)
        mods["clinical"] = ClinicalEncoder(n_features, config.clinical_widths, rng)
        width = mods["ct"].out_features + mods["clinical"].out_features
        mods["head"] = MLP((width, config.fusion_hidden, config.n_classes), rng)
    else:
        raise ModelError(f"cannot initialise {kind!r} directly")
    return ModelVariant(kind, mods, config=config, n_features=n_features)


def build_intermediate(ct_model, clinical_model, seed=0, freeze_encoders=False):
    """Fuse trained unimodal encoders under a fresh fusion head.

    Encoder parameters are copied, so training the fused model leaves the
    unimodal models untouched.
    """
    if ct_model.kind != "unimodal-ct" or clinical_model.kind != "unimodal-clinical":
        raise ModelError("intermediate fusion needs a unimodal-ct and a unimodal-clinical model")
    cfg = ct_model.config
    fused = init_params("intermediate", clinical_model.n_features, cfg, seed)
    fused.modules["ct"].load_state_dict(ct_model.modules["ct"].state_dict())
    fused.modules["clinical"].load_state_dict(clinical_model.modules["clinical"].state_dict())
    if freeze_encoders:
        fused.modules["ct"].set_trainable(False)
        fused.modules["clinical"].set_trainable(False)
    return fused


def build_late(ct_model, clinical_model):
    return ModelVariant("late", {}, members=(ct_model, clinical_model),
                        config=ct_model.config, n_features=clinical_model.n_features)


def clinical_channels(x_img, x_clin):
    """Stack the clinical vector as spatially constant channels after the image."""
    x_img = np.asarray(x_img.data if isinstance(x_img, Tensor) else x_img)
    x_clin = np.asarray(x_clin.data if isinstance(x_clin, Tensor) else x_clin)
    n, _, h, w, d = x_img.shape
    planes = np.broadcast_to(x_clin[:, :, None, None, None], (n, x_clin.shape[1], h, w, d))
    return np.concatenate([x_img, planes], axis=1)


def _clin(model, x_clin):
    if x_clin is None:
        raise ModelError(f"{model.kind} model needs the clinical vector")
    x_clin = tc.as_tensor(x_clin)
    if x_clin.ndim != 2 or x_clin.shape[1] != model.n_features:
        raise ModelError(f"clinical input must be N x {model.n_features}, got {x_clin.shape}")
    return x_clin


def _img(x_img):
    if x_img is None:
        raise ModelError("model needs the imaging input")
    return tc.as_tensor(x_img)


def forward_ct(model, x_img, track_target=False):
    if model.kind != "unimodal-ct":
        raise ModelError(f"forward_ct on a {model.kind} model")
    z, act = model.modules["ct"](_img(x_img), track_target)
    logits = model.modules["head"](z)
    return Output(logits, tc.softmax(logits, axis=-1), act)


def forward_clinical(model, x_clin):
    if model.kind != "unimodal-clinical":
        raise ModelError(f"forward_clinical on a {model.kind} model")
    z = model.modules["clinical"](_clin(model, x_clin))
    logits = model.modules["head"](z)
    return Output(logits, tc.softmax(logits, axis=-1))


def forward_intermediate(model, x_img, x_clin, track_target=False):
    if model.kind != "intermediate":
        raise ModelError(f"forward_intermediate on a {model.kind} model")
    z_i, act = model.modules["ct"](_img(x_img), track_target)
    z_c = model.modules["clinical"](_clin(model, x_clin))
    logits = model.modules["head"](tc.concat([z_i, z_c], axis=1))
    return Output(logits, tc.softmax(logits, axis=-1), act)


def forward_early(model, x_img, x_clin, track_target=False):
    if model.kind != "early":
        raise ModelError(f"forward_early on a {model.kind} model")
    x_clin = _clin(model, x_clin)
    stacked = Tensor(clinical_channels(_img(x_img), x_clin))
    z, act = model.modules["ct"](stacked, track_target)
    logits = model.modules["head"](z)
    return Output(logits, tc.softmax(logits, axis=-1), act)


def forward_late(model, x_img, x_clin):
    if model.kind != "late":
        raise ModelError(f"forward_late on a {model.kind} model")
    with tc.no_grad():
        probs = [forward(m, x_img, x_clin).probs.data for m in model.members]
    return Output(None, Tensor((probs[0] + probs[1]) / 2.0))


def forward(model, x_img=None, x_clin=None, track_target=False):
    if model.kind == "unimodal-ct":
        return forward_ct(model, x_img, track_target)
    if model.kind == "unimodal-clinical":
        return forward_clinical(model, x_clin)
    if model.kind == "intermediate":
        return forward_intermediate(model, x_img, x_clin, track_target)
    if model.kind == "early":
        return forward_early(model, x_img, x_clin, track_target)
    return forward_late(model, x_img, x_clin)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, directory):
    """Write one tensor file per parameter plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    if model.kind == "late":
        for i, m in enumerate(model.members):
            save_checkpoint(m, os.path.join(directory, f"member{i}"))
        layers = {}
    else:
        layers = {}
        for name, p in model.named_parameters():
            fname = name + ".tensor"
            tc.save(os.path.join(directory, fname), p.data)
            layers[name] = {"file": fname, "shape": list(p.shape)}
    manifest = {
        "kind": model.kind,
        "n_features": model.n_features,
        "config": model.config.to_dict(),
        "layers": layers,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig.from_dict(manifest["config"])
    if manifest["kind"] == "late":
        members = [load_checkpoint(os.path.join(directory, f"member{i}")) for i in range(2)]
        return build_late(*members)
    model = init_params(manifest["kind"], manifest["n_features"], cfg, seed=0)
    state = {name: tc.load(os.path.join(directory, info["file"]))
             for name, info in manifest["layers"].items()}
    model.load_state_dict(state)
    return model
