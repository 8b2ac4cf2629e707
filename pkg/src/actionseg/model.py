"""Reference per-pixel encoder, EMA teacher, SGD and the supervised loss.

The encoder is deliberately small so every gradient is written out by hand:

    patches (k*k) --frozen random projection--> features (d_f)
    features --affine + ReLU--> hidden (d_h)
    hidden --affine--> seg logits (C) | projection (m) | representation (m)

plus a prediction head (m -> m) applied to pooled embeddings.  Every head is
a 1x1 map, so a pixel's outputs depend only on its k x k neighbourhood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import LossResult, NonFiniteError

TRAINABLE = (
    "trunk_w", "trunk_b",
    "seg_w", "seg_b",
    "proj_w", "proj_b",
    "pred_w", "pred_b",
    "repr_w", "repr_b",
)
FROZEN = ("feat_w", "feat_b")

DICE_SMOOTH = 1e-5


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    patch: int = 5
    feat_dim: int = 32
    hidden_dim: int = 32
    num_classes: int = 4
    embed_dim: int = 64

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k2 = self.patch * self.patch
        return {
            "feat_w": (self.feat_dim, k2),
            "feat_b": (self.feat_dim,),
            "trunk_w": (self.hidden_dim, self.feat_dim),
            "trunk_b": (self.hidden_dim,),
            "seg_w": (self.num_classes, self.hidden_dim),
            "seg_b": (self.num_classes,),
            "proj_w": (self.embed_dim, self.hidden_dim),
            "proj_b": (self.embed_dim,),
            "pred_w": (self.embed_dim, self.embed_dim),
            "pred_b": (self.embed_dim,),
            "repr_w": (self.embed_dim, self.hidden_dim),
            "repr_b": (self.embed_dim,),
        }


@dataclass
class EncoderParams:
    """Named parameter arrays.

    ``frozen`` holds the patch featurizer, which is shared (by value) between
    teacher and student and never updated.  ``role`` records provenance so
    that the optimizer can refuse to touch a teacher.
    """

    dims: ModelDims
    arrays: dict[str, np.ndarray]
    frozen: dict[str, np.ndarray]
    role: str = "student"

    def copy(self, role: str | None = None) -> "EncoderParams":
        return EncoderParams(
            self.dims,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.frozen.items()},
            role or self.role,
        )

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.arrays:
            return self.arrays[name]
        return self.frozen[name]

    def flat(self, names=TRAINABLE) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n in names])


def _init_head(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


def init_params(dims: ModelDims, seed: int = 0, featurizer_seed: int | None = None) -> EncoderParams:
    """Random student parameters.

    The featurizer has its own seed so re-initializing heads never changes it.
    """
    shapes = dims.shapes()
    frng = np.random.default_rng([featurizer_seed if featurizer_seed is not None else seed, 7])
    k2 = dims.patch * dims.patch
    frozen = {
        "feat_w": frng.normal(0.0, np.sqrt(3.0 / k2), size=shapes["feat_w"]),
        "feat_b": frng.normal(0.0, 0.5, size=shapes["feat_b"]),
    }
    rng = np.random.default_rng([seed, 11])
    arrays = {
        "trunk_w": rng.normal(0.0, np.sqrt(2.0 / dims.feat_dim), size=shapes["trunk_w"]),
        "trunk_b": np.full(shapes["trunk_b"], 0.1),
        "seg_w": _init_head(rng, shapes["seg_w"], dims.hidden_dim),
        "seg_b": np.zeros(shapes["seg_b"]),
        "proj_w": _init_head(rng, shapes["proj_w"], dims.hidden_dim),
        "proj_b": np.zeros(shapes["proj_b"]),
        "pred_w": _init_head(rng, shapes["pred_w"], dims.embed_dim),
        "pred_b": np.zeros(shapes["pred_b"]),
        "repr_w": _init_head(rng, shapes["repr_w"], dims.hidden_dim),
        "repr_b": np.zeros(shapes["repr_b"]),
    }
    return EncoderParams(dims, arrays, frozen)


def reinit_heads(params: EncoderParams, names, seed: int) -> None:
    """Fresh weights for the listed heads (``"pred"``, ``"proj"`` ...) in place."""
    rng = np.random.default_rng([seed, 13])
    d = params.dims
    fan = {"proj": d.hidden_dim, "repr": d.hidden_dim, "seg": d.hidden_dim, "pred": d.embed_dim}
    for head in names:
        w = params.arrays[f"{head}_w"]
        params.arrays[f"{head}_w"] = _init_head(rng, w.shape, fan[head])
        params.arrays[f"{head}_b"] = np.zeros_like(params.arrays[f"{head}_b"])


def extract_patches(image: np.ndarray, k: int) -> np.ndarray:
    """(H*W, k*k) reflect-padded patches in row-major pixel order."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("image must be 2-D")
    if img.shape[0] < k or img.shape[1] < k:
        raise ShapeError(f"image {img.shape} smaller than patch size {k}")
    r = k // 2
    padded = np.pad(img, r, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.reshape(img.shape[0] * img.shape[1], k * k)


@dataclass
class Forward:
    shape: tuple[int, int]
    feat: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray | None = None
    proj: np.ndarray | None = None
    repr: np.ndarray | None = None

    @property
    def num_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    def grid(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(*self.shape, a.shape[-1])

    @property
    def pooled(self) -> np.ndarray:
        return self.proj.mean(axis=0)


def encode(params: EncoderParams, image, heads=("seg", "proj", "repr")) -> Forward:
    """Pointwise forward pass; only the requested heads are evaluated."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise NonFiniteError("image has non-finite intensities")
    P = extract_patches(img, params.dims.patch)
    feat = P @ params["feat_w"].T + params["feat_b"]
    pre = feat @ params["trunk_w"].T + params["trunk_b"]
    hidden = np.maximum(pre, 0.0)
    out = Forward(img.shape, feat, pre, hidden)
    if "seg" in heads:
        out.logits = hidden @ params["seg_w"].T + params["seg_b"]
    if "proj" in heads:
        out.proj = hidden @ params["proj_w"].T + params["proj_b"]
    if "repr" in heads:
        out.repr = hidden @ params["repr_w"].T + params["repr_b"]
    return out


def backward(params: EncoderParams, fwd: Forward, g_logits=None, g_proj=None,
             g_repr=None) -> dict[str, np.ndarray]:
    """Parameter gradients from upstream gradients on the pixel-wise heads.

    Upstream arrays may be (H*W, .) or (H, W, .).  Heads without an upstream
    gradient get zero gradients; the frozen featurizer gets none at all.
    """
    n = fwd.num_pixels
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    g_hidden = np.zeros_like(fwd.hidden)
    for head, g in (("seg", g_logits), ("proj", g_proj), ("repr", g_repr)):
        if g is None:
            continue
        w = params[f"{head}_w"]
        g = np.asarray(g, dtype=np.float64)
        if g.size != n * w.shape[0]:
            raise ShapeError(f"upstream gradient for {head} has shape {g.shape}")
        g = g.reshape(n, w.shape[0])
        grads[f"{head}_w"] = g.T @ fwd.hidden
        grads[f"{head}_b"] = g.sum(axis=0)
        g_hidden += g @ w
    g_pre = g_hidden * (fwd.pre > 0)
    grads["trunk_w"] = g_pre.T @ fwd.feat
    grads["trunk_b"] = g_pre.sum(axis=0)
    return grads


def predict(params: EncoderParams, z) -> np.ndarray:
    return params["pred_w"] @ np.asarray(z, dtype=np.float64) + params["pred_b"]


def predict_backward(params: EncoderParams, z, g_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the prediction head and of its input."""
    z = np.asarray(z, dtype=np.float64)
    return {"pred_w": np.outer(g_out, z), "pred_b": g_out.copy()}, params["pred_w"].T @ g_out


def add_grads(total: dict, part: dict, scale: float = 1.0) -> dict:
    for k, v in part.items():
        if k in total:
            total[k] = total[k] + scale * v
        else:
            total[k] = scale * v
    return total


# -- teacher / optimizer -------------------------------------------------------

@dataclass
class TeacherStudentState:
    student: EncoderParams
    teacher: EncoderParams
    momentum: float = 0.99

    @classmethod
    def from_student(cls, student: EncoderParams, momentum: float = 0.99):
        return cls(student, student.copy(role="teacher"), momentum)


def ema_update(state: TeacherStudentState) -> TeacherStudentState:
    """teacher <- m * teacher + (1 - m) * student, coordinate-wise."""
    m = state.momentum
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must be in [0, 1]")
    for k, s in state.student.arrays.items():
        t = state.teacher.arrays[k]
        if t.shape != s.shape:
            raise ShapeError(f"teacher/student mismatch for {k}")
        state.teacher.arrays[k] = m * t + (1.0 - m) * s
    return state


@dataclass
class OptimState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: EncoderParams, grads: dict[str, np.ndarray], opt: OptimState):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    Only parameters present in ``grads`` move, so a stage controls which heads
    it trains by which gradients it hands over.
    """
    if params.role == "teacher":
        raise PermissionError("teacher parameters are only updated by EMA")
    for k, g in grads.items():
        if k not in params.arrays:
            raise KeyError(f"{k} is not a trainable parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        p = params.arrays[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = opt.velocity.get(k, np.zeros_like(p))
        v = opt.momentum * v + g + opt.weight_decay * p
        opt.velocity[k] = v
        params.arrays[k] = p - opt.learning_rate * v
    return params, opt


# -- supervised loss -------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def supervised_loss(logits, labels, ce_weight: float = 0.5,
                    dice_weight: float = 0.5) -> LossResult:
    """Weighted cross-entropy + soft multi-class Dice loss.

    CE is averaged over pixels and Dice over all classes (background
    included).  ``grads["logits"]`` matches the shape of ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[-1]
    L = logits.reshape(-1, C)
    y = labels.reshape(-1).astype(np.int64)
    n = y.size
    if n == 0:
        raise ShapeError("no labelled pixels")
    if y.min() < 0 or y.max() >= C:
        raise ShapeError("label outside class range")
    p = softmax(L)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0

    logp = L - L.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    ce = float(-logp[np.arange(n), y].mean())
    g_ce = (p - onehot) / n

    inter = (p * onehot).sum(axis=0)
    denom = p.sum(axis=0) + onehot.sum(axis=0) + DICE_SMOOTH
    num = 2.0 * inter + DICE_SMOOTH
    dice = float(np.mean(1.0 - num / denom))
    # d(1 - num/denom)/dp = -(2y*denom - num) / denom^2, averaged over classes
    g_p = -(2.0 * onehot * denom - num) / denom**2 / C
    g_dice = p * (g_p - (g_p * p).sum(axis=1, keepdims=True))

    loss = ce_weight * ce + dice_weight * dice
    grad = ce_weight * g_ce + dice_weight * g_dice
    return LossResult(loss, {"logits": grad.reshape(logits.shape)}, {"ce": ce, "dice": dice})


def masked_cross_entropy(logits, labels, mask) -> LossResult:
    """Cross-entropy on pixels where ``mask`` is set, averaged over all pixels."""
    logits = np.asarray(logits, dtype=np.float64)
    C = logits.shape[-1]
    L = logits.reshape(-1, C)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    n = y.size
    grad = np.zeros_like(L)
    if not m.any():
        return LossResult(0.0, {"logits": grad.reshape(logits.shape)})
    idx = np.flatnonzero(m)
    Lm = L[idx]
    z = Lm - Lm.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(idx.size), y[idx]].sum() / n)
    g = np.exp(logp)
    g[np.arange(idx.size), y[idx]] -= 1.0
    grad[idx] = g / n
    return LossResult(loss, {"logits": grad.reshape(logits.shape)})
