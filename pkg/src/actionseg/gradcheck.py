"""Finite-difference checks of every hand-written gradient.

Each suite draws random instances, evaluates the analytic gradient and
compares it against central differences.  Encoder-level suites redraw any
instance whose ReLU pre-activations sit close enough to zero for an ``eps``
perturbation to cross the kink, where central differences are meaningless.
The sampled AnCo queries and keys are held fixed across perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anco import anco_loss, build_class_sets
from .config import StageConfig
from .distill import DistillConfig, MemoryBank, distill_loss
from .model import EncoderParams, ModelDims, encode, init_params, supervised_loss
from .numkit import finite_diff_grad, relative_error
from .pipeline import STAGE_PARAMS, finetune_objective, local_objective

SUITES = ("distill", "anco", "supervised", "finetune", "local")
MIN_EMBED_NORM = 0.5


@dataclass
class SuiteResult:
    name: str
    errors: list[float] = field(default_factory=list)
    redraws: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    def passed(self, tol: float) -> bool:
        return bool(self.errors) and self.max_error < tol


def _unit_rows(rng, n, m):
    x = rng.normal(size=(n, m))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def check_distill(rng, eps: float = 1e-3) -> float:
    dim = int(rng.integers(4, 65))
    bank = MemoryBank(36, dim)
    bank.update(rng.normal(size=(int(rng.integers(2, 37)), dim)))
    cfg = DistillConfig()
    zt, zs = rng.normal(size=dim), rng.normal(size=dim)
    res = distill_loss(zt, zs, bank, cfg)
    fd = finite_diff_grad(lambda z: distill_loss(zt, z, bank, cfg).loss, zs, eps)
    return relative_error(res.grads["z_student_pred"], fd)


def check_anco(rng, eps: float = 1e-3) -> float:
    m = int(rng.integers(4, 65))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    C = int(rng.integers(2, 4))
    emb = _unit_rows(rng, h * w, m).reshape(h, w, m)
    labels = rng.integers(0, C, size=(h, w))
    labels.flat[:2] = [0, 1]  # at least two classes
    f = lambda e: anco_loss(build_class_sets(e, labels), 0.5).loss
    res = anco_loss(build_class_sets(emb, labels), 0.5)
    return relative_error(res.grads["emb"], finite_diff_grad(f, emb, eps))


def check_supervised(rng, eps: float = 1e-3) -> float:
    h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    C = int(rng.integers(2, 6))
    logits = rng.normal(scale=2.0, size=(h, w, C))
    labels = rng.integers(0, C, size=(h, w))
    res = supervised_loss(logits, labels)
    fd = finite_diff_grad(lambda z: supervised_loss(z, labels).loss, logits, eps)
    return relative_error(res.grads["logits"], fd)


def _kink_free(params: EncoderParams, images, eps: float) -> bool:
    """True if no single-parameter ``eps`` step can flip a ReLU.

    Pixels whose hidden units are all inactive are rejected too: their
    embedding is just the head bias, which may be zero and then drops out of
    the AnCo pool.
    """
    for img in images:
        fwd = encode(params, img, ())
        reach = 2.0 * eps * np.maximum(1.0, np.abs(fwd.feat).max(axis=1, keepdims=True))
        if np.any(np.abs(fwd.pre) <= reach) or not np.all((fwd.pre > 0).any(axis=1)):
            return False
    return True


def _flat_check(params: EncoderParams, names, objective, eps: float) -> float:
    shapes = [(n, params.arrays[n].shape) for n in names]

    def unpack(x):
        out, pos = {}, 0
        for n, s in shapes:
            size = int(np.prod(s))
            out[n] = x[pos:pos + size].reshape(s)
            pos += size
        return out

    base = {n: params.arrays[n] for n in names}
    x0 = np.concatenate([params.arrays[n].ravel() for n in names])

    def f(x):
        params.arrays.update(unpack(x))
        try:
            return objective().loss
        finally:
            params.arrays.update(base)

    res = objective()
    analytic = np.concatenate([res.grads.get(n, np.zeros(s)).ravel() for n, s in shapes])
    return relative_error(analytic, finite_diff_grad(f, x0.copy(), eps))


def _small_encoder(rng, embed_dim: int, num_classes: int = 3) -> EncoderParams:
    dims = ModelDims(patch=3, feat_dim=6, hidden_dim=6, num_classes=num_classes,
                     embed_dim=embed_dim)
    params = init_params(dims, seed=int(rng.integers(2**31)))
    # random biases, as after some training, keep embeddings off the origin
    for head in ("seg", "proj", "pred", "repr"):
        b = params.arrays[f"{head}_b"]
        params.arrays[f"{head}_b"] = rng.normal(0.0, 0.5, size=b.shape)
    return params


def _finetune_instance(rng, eps: float):
    size = int(rng.integers(4, 7))
    student = _small_encoder(rng, int(rng.integers(4, 17)))
    teacher = student.copy(role="teacher")
    # a sharpened teacher produces confident pseudo-labels
    teacher.arrays["seg_w"] = teacher.arrays["seg_w"] * 40.0
    views = [(rng.uniform(size=(size, size)), rng.integers(0, 3, size=(size, size)))
             for _ in range(2)]
    pairs = []
    for _ in range(2):
        img = rng.uniform(size=(size, size))
        pairs.append((img, np.clip(img * 1.1 + 0.05, 0, 1)))
    cfg = StageConfig(stage="finetune", batch_size=2, theta=0.9, num_queries=16, num_keys=24)
    seed = int(rng.integers(2**31))
    draw: dict = {}
    obj = lambda: finetune_objective(student, teacher, views, pairs, cfg, seed, draw)
    images = [v[0] for v in views] + [p[1] for p in pairs]
    if not _kink_free(student, images, eps):
        return None
    # central-difference truncation error grows like (eps / |e|)^2 through the
    # normalization, so keep pixel embeddings well away from the origin
    if min(np.linalg.norm(encode(student, img, ("repr",)).repr, axis=1).min()
           for img in images) < MIN_EMBED_NORM:
        return None
    res = obj()
    if res.terms.get("n_pseudo") == 0 or (cfg.lambda_anco > 0 and res.terms.get("n_queries") == 0):
        return None
    return student, obj


def check_finetune(rng, eps: float = 1e-3):
    inst = _finetune_instance(rng, eps)
    if inst is None:
        return None
    student, obj = inst
    return _flat_check(student, STAGE_PARAMS["finetune"], obj, eps)


def check_local(rng, eps: float = 1e-3):
    size = int(rng.integers(4, 7))
    m = int(rng.integers(4, 17))
    student = _small_encoder(rng, m)
    teacher = student.copy(role="teacher")
    w = teacher.arrays["repr_w"]
    teacher.arrays["repr_w"] = w + rng.normal(scale=0.3, size=w.shape)
    bank = MemoryBank(36, m)
    bank.update(rng.normal(size=(6, m)))
    views = [(rng.uniform(size=(size, size)), rng.integers(0, 3, size=(size, size)))]
    pairs = [(rng.uniform(size=(size, size)), rng.uniform(size=(size, size))) for _ in range(2)]
    cfg = StageConfig(stage="local", batch_size=2)
    images = [views[0][0]] + [p[1] for p in pairs]
    if not _kink_free(student, images, eps):
        return None
    obj = lambda: local_objective(student, teacher, bank, views, pairs, cfg)
    return _flat_check(student, STAGE_PARAMS["local"], obj, eps)


_CHECKS = {
    "distill": check_distill,
    "anco": check_anco,
    "supervised": check_supervised,
    "finetune": check_finetune,
    "local": check_local,
}


def run_suite(name: str, instances: int = 100, seed: int = 0, eps: float = 1e-3,
              max_redraws: int = 10_000) -> SuiteResult:
    """Check ``instances`` random instances; redraw instances sitting on kinks."""
    if name not in _CHECKS:
        raise KeyError(f"unknown gradient suite {name!r}; choose from {SUITES}")
    rng = np.random.default_rng([seed, SUITES.index(name)])
    out = SuiteResult(name)
    while len(out.errors) < instances:
        err = _CHECKS[name](rng, eps)
        if err is None:
            out.redraws += 1
            if out.redraws > max_redraws:
                raise RuntimeError(f"{name}: could not draw kink-free instances")
            continue
        out.errors.append(float(err))
    return out
