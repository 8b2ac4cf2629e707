"""The three training stages, the supervised baseline trainer and evaluation.

Randomness is derived statelessly from ``(seed, stage, step, stream)`` so a
run resumed from a mid-stage checkpoint replays exactly, and so the labeled
half of a semi-supervised step draws the same batches and augmentations as
the pure supervised trainer.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import anco as anco_mod
from . import sampling
from .checkpoint import Checkpoint, CheckpointError
from .config import StageConfig
from .distill import DistillConfig, MemoryBank, distill_loss
from .metrics import ClassReport, evaluate_labels
from .model import (
    EncoderParams,
    ModelDims,
    OptimState,
    TeacherStudentState,
    add_grads,
    backward,
    ema_update,
    encode,
    init_params,
    masked_cross_entropy,
    predict,
    predict_backward,
    reinit_heads,
    sgd_step,
    softmax,
    supervised_loss,
)
from .numkit import NORM_EPS, LossResult, l2_normalize_rows, l2_normalize_rows_backward
from .synthdata import Dataset, Sample, apply_augmentation, apply_geometry, apply_photometric, draw_augmentation

log = logging.getLogger(__name__)

STAGE_CODES = {"global": 1, "local": 2, "finetune": 3}
PREVIOUS_STAGE = {"local": "global", "finetune": "local"}
# parameters each stage optimizes
STAGE_PARAMS = {
    "global": ("trunk_w", "trunk_b", "proj_w", "proj_b", "pred_w", "pred_b"),
    "local": ("trunk_w", "trunk_b", "seg_w", "seg_b", "repr_w", "repr_b", "pred_w", "pred_b"),
    "finetune": ("trunk_w", "trunk_b", "seg_w", "seg_b", "repr_w", "repr_b"),
}
SUPERVISED_PARAMS = ("trunk_w", "trunk_b", "seg_w", "seg_b")

# RNG stream ids
S_LAB_BATCH, S_LAB_AUG, S_UNL_BATCH, S_UNL_AUG, S_ANCHOR, S_SAMPLE = range(1, 7)


class DataError(ValueError):
    pass


def step_rng(seed: int, stage: str, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_CODES[stage], step, stream])


LOG_FIELDS = ["record", "stage", "step", "epoch", "loss_total", "loss_sup", "loss_ce",
              "loss_dice", "loss_distill", "loss_pl", "loss_anco", "bank_size",
              "n_queries", "n_keys", "n_pseudo", "val_dice", "val_asd"]


@dataclass
class RunLog:
    """Append-only training record; steps increase monotonically per stage."""

    records: list[dict] = field(default_factory=list)
    _last: dict = field(default_factory=dict, repr=False, compare=False)

    def append(self, **rec) -> None:
        if rec.get("record") == "step":
            last = self._last.get(rec["stage"])
            if last is not None and rec["step"] <= last:
                raise ValueError("run log steps must increase")
            self._last[rec["stage"]] = rec["step"]
        self.records.append({k: rec.get(k, "") for k in LOG_FIELDS})

    def extend(self, other: "RunLog") -> None:
        for r in other.records:
            if r["record"] == "step":
                self._last[r["stage"]] = r["step"]
            self.records.append(dict(r))

    def steps(self, stage: str | None = None) -> list[dict]:
        return [r for r in self.records
                if r["record"] == "step" and (stage is None or r["stage"] == stage)]

    def to_csv_text(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in self.records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        out = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                out.records.append(dict(r))
        return out


# -- shared pieces ------------------------------------------------------------------

def _choose(rng, n: int, k: int) -> np.ndarray:
    return rng.choice(n, size=min(k, n), replace=False)


def _select(grads: dict, names) -> dict:
    return {k: grads[k] for k in names if k in grads}


def _scale_into(total: dict, part: dict, names, scale: float = 1.0) -> None:
    add_grads(total, _select(part, names), scale)


@dataclass
class _Upstream:
    """Per-image forward plus accumulated upstream head gradients."""

    fwd: object
    g_logits: np.ndarray | None = None
    g_proj: np.ndarray | None = None
    g_repr: np.ndarray | None = None

    def add(self, name: str, g: np.ndarray) -> None:
        cur = getattr(self, name)
        setattr(self, name, g if cur is None else cur + g)


def _backprop(student: EncoderParams, items: list[_Upstream], names) -> dict:
    total: dict = {}
    for it in items:
        if it.g_logits is None and it.g_proj is None and it.g_repr is None:
            continue
        g = backward(student, it.fwd, it.g_logits, it.g_proj, it.g_repr)
        _scale_into(total, g, names)
    return total


# -- augmented views -----------------------------------------------------------------

def draw_labeled_views(labeled: list[Sample], cfg: StageConfig, stage: str,
                       step: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Weakly augmented ``(image, label)`` pairs for one labeled batch."""
    rng = step_rng(cfg.seed, stage, step, S_LAB_BATCH)
    aug_rng = step_rng(cfg.seed, stage, step, S_LAB_AUG)
    views = []
    for i in _choose(rng, len(labeled), cfg.batch_size):
        s = labeled[int(i)]
        a = apply_augmentation(s, draw_augmentation("weak", aug_rng, s.image.shape))
        views.append((a.image, a.label))
    return views


def draw_distill_pairs(images, cfg: StageConfig, stage: str,
                       step: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Independent weak (teacher) and strong (student) views of unlabeled images."""
    rng = step_rng(cfg.seed, stage, step, S_UNL_BATCH)
    aug_rng = step_rng(cfg.seed, stage, step, S_UNL_AUG)
    pairs = []
    for i in _choose(rng, len(images), cfg.batch_size):
        img = images[int(i)]
        p_t = draw_augmentation("weak", aug_rng, img.shape)
        p_s = draw_augmentation("strong", aug_rng, img.shape)
        pairs.append((apply_geometry(img, p_t), apply_photometric(apply_geometry(img, p_s), p_s)))
    return pairs


def draw_pseudo_label_pairs(images, cfg: StageConfig, stage: str,
                            step: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Teacher sees the geometric part of a strong draw, the student all of it.

    Sharing the geometry keeps teacher pseudo-labels aligned with student pixels.
    """
    rng = step_rng(cfg.seed, stage, step, S_UNL_BATCH)
    aug_rng = step_rng(cfg.seed, stage, step, S_UNL_AUG)
    pairs = []
    for i in _choose(rng, len(images), cfg.batch_size):
        img = images[int(i)]
        p = draw_augmentation("strong", aug_rng, img.shape)
        weak = apply_geometry(img, p)
        pairs.append((weak, apply_photometric(weak, p)))
    return pairs


def _push_anchors(bank: MemoryBank, teacher: EncoderParams, images, cfg: StageConfig,
                  stage: str, step: int, head: str) -> None:
    rng = step_rng(cfg.seed, stage, step, S_ANCHOR)
    idx = _choose(rng, len(images), cfg.anchors_per_step)
    anchors = []
    for i in idx:
        img = images[int(i)]
        p = draw_augmentation("weak", rng, img.shape)
        fwd = encode(teacher, apply_geometry(img, p), (head,))
        anchors.append(getattr(fwd, head).mean(axis=0))
    bank.update(anchors)


# -- objectives ----------------------------------------------------------------------
#
# Each objective is a pure function of the student parameters given fixed views,
# teacher and bank, which is what the finite-difference checks rely on.

def _supervised_items(student: EncoderParams, views, cfg: StageConfig, heads=("seg",)):
    items = [_Upstream(encode(student, img, heads)) for img, _ in views]
    lab = np.stack([lab.reshape(-1) for _, lab in views])
    res = supervised_loss(np.stack([it.fwd.logits for it in items]), lab,
                          cfg.ce_weight, cfg.dice_weight)
    for k, it in enumerate(items):
        it.add("g_logits", res.grads["logits"][k])
    return items, lab, res


def _sup_terms(res: LossResult) -> dict:
    return {"loss_sup": res.loss, "loss_ce": res.terms["ce"], "loss_dice": res.terms["dice"]}


def _distill_items(student: EncoderParams, teacher: EncoderParams, bank: MemoryBank,
                   pairs, cfg: StageConfig, head: str, weight: float):
    """Pooled-embedding distillation, mean over the batch, scaled by ``weight``.

    Returns student items carrying upstream gradients on ``head``, the
    prediction-head gradients and the unscaled mean loss.
    """
    dcfg = DistillConfig(cfg.tau_teacher, cfg.tau_student)
    items, pred_grads, losses = [], {}, []
    scale = weight / len(pairs)
    for t_img, s_img in pairs:
        z_t = getattr(encode(teacher, t_img, (head,)), head).mean(axis=0)
        s_fwd = encode(student, s_img, (head,))
        z_s = getattr(s_fwd, head).mean(axis=0)
        res = distill_loss(z_t, predict(student, z_s), bank, dcfg)
        losses.append(res.loss)
        g_pred, g_zs = predict_backward(student, z_s, res.grads["z_student_pred"] * scale)
        add_grads(pred_grads, g_pred)
        n = s_fwd.num_pixels
        it = _Upstream(s_fwd)
        it.add(f"g_{head}", np.broadcast_to(g_zs / n, (n, g_zs.size)).copy())
        items.append(it)
    return items, pred_grads, float(np.mean(losses))


def supervised_objective(student: EncoderParams, views, cfg: StageConfig,
                         names=SUPERVISED_PARAMS) -> LossResult:
    items, _, res = _supervised_items(student, views, cfg)
    return LossResult(res.loss, _backprop(student, items, names), _sup_terms(res))


def global_objective(student: EncoderParams, teacher: EncoderParams, bank: MemoryBank,
                     pairs, cfg: StageConfig) -> LossResult:
    names = STAGE_PARAMS["global"]
    items, pred_grads, loss = _distill_items(student, teacher, bank, pairs, cfg, "proj", 1.0)
    grads = _backprop(student, items, names)
    add_grads(grads, _select(pred_grads, names))
    return LossResult(loss, grads, {"loss_distill": loss})


def local_objective(student: EncoderParams, teacher: EncoderParams, bank: MemoryBank | None,
                    views, pairs, cfg: StageConfig) -> LossResult:
    """Supervised loss plus weighted repr-path distillation (skipped without pairs)."""
    names = STAGE_PARAMS["local"]
    items, _, sup = _supervised_items(student, views, cfg)
    grads = _backprop(student, items, names)
    terms = _sup_terms(sup)
    total = sup.loss
    if pairs and cfg.lambda_distill > 0:
        u_items, pred_grads, dl = _distill_items(student, teacher, bank, pairs, cfg,
                                                 "repr", cfg.lambda_distill)
        add_grads(grads, _backprop(student, u_items, names))
        add_grads(grads, _select(pred_grads, names))
        total += cfg.lambda_distill * dl
        terms["loss_distill"] = dl
    return LossResult(total, grads, terms)


def anco_step(emb: np.ndarray, labels: np.ndarray, conf: np.ndarray, cfg: StageConfig,
              rng, draw: dict | None = None) -> tuple[float, np.ndarray, int, int]:
    """Sampled AnCo on a pool of raw pixel embeddings.

    ``emb`` is (N, m) un-normalized, ``labels`` (N,) and ``conf`` the
    student's probability for each pixel's label.  Returns the mean loss per
    sampled query, the gradient w.r.t. ``emb`` and the query / key counts.
    With fewer than two classes there is nothing to contrast and the loss is 0.

    ``draw``, if given, caches the sampled queries and keys: an empty dict is
    filled on the first call and replayed afterwards, which holds the sample
    fixed while the embeddings move (as the analytic gradient assumes).
    """
    grad = np.zeros_like(emb)
    # zero embeddings (all-dead ReLU pixels) have no direction to contrast
    keep = np.flatnonzero(np.einsum("ij,ij->i", emb, emb) > NORM_EPS**2)
    full_grad, emb, labels, conf = grad, emb[keep], labels[keep], conf[keep]
    if emb.shape[0] == 0 or np.unique(labels).size < 2:
        return 0.0, full_grad, 0, 0
    unit, norms = l2_normalize_rows(emb)
    sets = anco_mod.build_class_sets(unit, labels)
    if draw:
        queries, keys = draw["queries"], draw["keys"]
    else:
        queries, keys = _draw_anco_sample(sets, labels, conf, cfg, rng)
        if draw is not None:
            draw.update(queries=queries, keys=keys)
    res = anco_mod.anco_from_sets(sets, queries, keys, cfg.tau_an, "mean")
    full_grad[keep] = l2_normalize_rows_backward(unit, norms, res.grads["emb"])
    n_q = sum(q.size for q in queries.values())
    n_k = sum(k.size for k in keys.values())
    return res.loss, full_grad, n_q, n_k


def _draw_anco_sample(sets, labels, conf, cfg: StageConfig, rng):
    parts = {c: sampling.split_easy_hard(conf[sets.query_idx[c]], cfg.theta, sets.query_idx[c])
             for c in sets.classes}
    queries = sampling.select_queries(parts, cfg.num_queries, rng)
    graph = sampling.build_graph(sets.positive_keys)
    counts = {c: sets.query_idx[c].size for c in sets.classes}
    keys = {}
    for c in sets.classes:
        if queries[c].size:
            alloc = sampling.allocate_negatives(graph, c, cfg.num_keys, counts)
            keys[c] = sampling.sample_negative_keys(labels, alloc, rng)
    return queries, keys


def finetune_objective(student: EncoderParams, teacher: EncoderParams, views, pairs,
                       cfg: StageConfig, sample_seed, draw: dict | None = None) -> LossResult:
    """Supervised + masked pseudo-label CE + sampled AnCo.

    AnCo pools labeled pixels (ground truth) with confidently pseudo-labeled
    unlabeled pixels.  ``sample_seed`` seeds the query / key draws; ``draw``
    is passed to :func:`anco_step`.
    """
    names = STAGE_PARAMS["finetune"]
    use_anco = cfg.lambda_anco > 0
    heads = ("seg", "repr") if use_anco else ("seg",)
    items, lab, sup = _supervised_items(student, views, cfg, heads)
    terms = _sup_terms(sup)
    total = sup.loss

    pool = []  # (item, pixel indices, labels)
    if use_anco:
        pool += [(it, np.arange(lab[k].size), lab[k]) for k, it in enumerate(items)]

    if pairs and (cfg.lambda_pl > 0 or use_anco):
        u_items, u_lab, u_mask = [], [], []
        for t_img, s_img in pairs:
            mask, plab = sampling.pseudo_label_mask(
                softmax(encode(teacher, t_img, ("seg",)).logits), cfg.theta)
            u_items.append(_Upstream(encode(student, s_img, heads)))
            u_lab.append(plab)
            u_mask.append(mask)
        terms["n_pseudo"] = int(sum(m.sum() for m in u_mask))
        if cfg.lambda_pl > 0:
            pl = masked_cross_entropy(np.stack([it.fwd.logits for it in u_items]),
                                      np.stack(u_lab), np.stack(u_mask))
            for k, it in enumerate(u_items):
                it.add("g_logits", pl.grads["logits"][k] * cfg.lambda_pl)
            terms["loss_pl"] = pl.loss
            total += cfg.lambda_pl * pl.loss
        if use_anco:
            for it, plab, mask in zip(u_items, u_lab, u_mask):
                sel = np.flatnonzero(mask)
                pool.append((it, sel, plab[sel]))
        items = items + u_items

    if use_anco:
        emb = np.concatenate([it.fwd.repr[sel] for it, sel, _ in pool])
        labs = np.concatenate([l for _, _, l in pool])
        conf = np.concatenate([softmax(it.fwd.logits[sel])[np.arange(sel.size), l]
                               for it, sel, l in pool])
        loss, g, n_q, n_k = anco_step(emb, labs, conf, cfg,
                                      np.random.default_rng(sample_seed), draw)
        start = 0
        for it, sel, _ in pool:
            g_img = np.zeros_like(it.fwd.repr)
            g_img[sel] = g[start:start + sel.size] * cfg.lambda_anco
            start += sel.size
            it.add("g_repr", g_img)
        terms.update(loss_anco=loss, n_queries=n_q, n_keys=n_k)
        total += cfg.lambda_anco * loss

    return LossResult(total, _backprop(student, items, names), terms)


def supervised_step(student: EncoderParams, opt: OptimState, labeled, cfg: StageConfig,
                    stage: str, step: int, names=SUPERVISED_PARAMS) -> dict:
    res = supervised_objective(student, draw_labeled_views(labeled, cfg, stage, step), cfg, names)
    sgd_step(student, res.grads, opt)
    return res.terms


# -- stages --------------------------------------------------------------------------

def _require(ckpt: Checkpoint | None, stage: str) -> None:
    want = PREVIOUS_STAGE[stage]
    if ckpt is None:
        raise CheckpointError(f"stage {stage!r} needs a checkpoint from stage {want!r}")
    if ckpt.stage != want or not ckpt.complete:
        raise CheckpointError(
            f"stage {stage!r} needs a completed {want!r} checkpoint, got "
            f"{ckpt.stage!r} at step {ckpt.step}/{ckpt.total_steps}")


def _start(stage: str, cfg: StageConfig, prev: Checkpoint | None, resume: Checkpoint | None,
           total: int, dims: ModelDims | None, init_seed: int) -> Checkpoint:
    if resume is not None:
        if resume.stage != stage:
            raise CheckpointError(f"cannot resume stage {stage!r} from a {resume.stage!r} checkpoint")
        return resume
    opt = OptimState(cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
    if stage == "global":
        student = init_params(dims or ModelDims(), seed=init_seed)
        state = TeacherStudentState.from_student(student, cfg.ema_momentum)
        bank = MemoryBank(cfg.bank_size, student.dims.embed_dim)
    else:
        _require(prev, stage)
        student = prev.state.student.copy(role="student")
        teacher = prev.state.teacher.copy(role="teacher")
        state = TeacherStudentState(student, teacher, cfg.ema_momentum)
        bank = None
        if stage == "local":
            reinit_heads(student, ("pred",), seed=cfg.seed)
            bank = MemoryBank(cfg.bank_size, student.dims.embed_dim)
    seeds = dict(prev.seeds) if prev is not None else {}
    seeds[stage] = cfg.seed
    return Checkpoint(stage, 0, total, state, opt, bank, seeds)


def _step_global(ck: Checkpoint, images, cfg: StageConfig, step: int) -> dict:
    st = ck.state
    _push_anchors(ck.bank, st.teacher, images, cfg, "global", step, "proj")
    pairs = draw_distill_pairs(images, cfg, "global", step)
    res = global_objective(st.student, st.teacher, ck.bank, pairs, cfg)
    sgd_step(st.student, res.grads, ck.opt)
    ema_update(st)
    return {"loss_total": res.loss, **res.terms, "bank_size": len(ck.bank)}


def _step_local(ck: Checkpoint, labeled, images, cfg: StageConfig, step: int) -> dict:
    st = ck.state
    views = draw_labeled_views(labeled, cfg, "local", step)
    pairs = []
    if images and cfg.lambda_distill > 0:
        _push_anchors(ck.bank, st.teacher, images, cfg, "local", step, "repr")
        pairs = draw_distill_pairs(images, cfg, "local", step)
    res = local_objective(st.student, st.teacher, ck.bank, views, pairs, cfg)
    sgd_step(st.student, res.grads, ck.opt)
    ema_update(st)
    rec = {"loss_total": res.loss, **res.terms}
    if pairs:
        rec["bank_size"] = len(ck.bank)
    return rec


def _step_finetune(ck: Checkpoint, labeled, images, cfg: StageConfig, step: int) -> dict:
    st = ck.state
    views = draw_labeled_views(labeled, cfg, "finetune", step)
    pairs = []
    if images and (cfg.lambda_pl > 0 or cfg.lambda_anco > 0):
        pairs = draw_pseudo_label_pairs(images, cfg, "finetune", step)
    seed = [cfg.seed, STAGE_CODES["finetune"], step, S_SAMPLE]
    res = finetune_objective(st.student, st.teacher, views, pairs, cfg, seed)
    sgd_step(st.student, res.grads, ck.opt)
    ema_update(st)
    return {"loss_total": res.loss, **res.terms}


def _run(stage: str, ck: Checkpoint, data: Dataset, cfg: StageConfig, runlog: RunLog,
         stop_after: int | None, validate, val_every: int) -> Checkpoint:
    labeled = data.labeled
    images = data.unlabeled_images()
    spe = max(1, ck.total_steps // cfg.epochs)
    end = ck.total_steps if stop_after is None else min(ck.total_steps, stop_after)
    for step in range(ck.step, end):
        if stage == "global":
            rec = _step_global(ck, images, cfg, step)
        elif stage == "local":
            rec = _step_local(ck, labeled, images, cfg, step)
        else:
            rec = _step_finetune(ck, labeled, images, cfg, step)
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"{stage} step {step}: non-finite {k}")
        runlog.append(record="step", stage=stage, step=step, epoch=step // spe, **rec)
        ck.step = step + 1
        if validate is not None and val_every and (step + 1) % (spe * val_every) == 0:
            rep = validate(ck)
            runlog.append(record="val", stage=stage, step=step, epoch=step // spe,
                          val_dice=rep.macro_dice, val_asd=rep.macro_asd)
    return ck


def _checked(data: Dataset, need_unlabeled: bool, need_labeled: bool) -> None:
    if need_unlabeled and not data.unlabeled_images():
        raise DataError("stage needs unlabeled samples")
    if need_labeled and not data.labeled:
        raise DataError("stage needs labeled samples")


def stage_global(cfg: StageConfig, data: Dataset, dims: ModelDims | None = None,
                 init_seed: int | None = None, resume: Checkpoint | None = None,
                 stop_after: int | None = None, runlog: RunLog | None = None,
                 validate=None, val_every: int = 0):
    """Global distillation pre-training on unlabeled images."""
    _checked(data, True, False)
    total = cfg.steps_for(len(data.unlabeled_images()))
    seed = cfg.seed if init_seed is None else init_seed
    ck = _start("global", cfg, None, resume, total, dims, seed)
    runlog = runlog if runlog is not None else RunLog()
    return _run("global", ck, data, cfg, runlog, stop_after, validate, val_every), runlog


def stage_local(cfg: StageConfig, ckpt: Checkpoint | None, data: Dataset,
                resume: Checkpoint | None = None, stop_after: int | None = None,
                runlog: RunLog | None = None, validate=None, val_every: int = 0):
    """Supervised loss on labeled data plus pooled repr-path distillation on unlabeled."""
    _checked(data, False, True)
    total = cfg.steps_for(len(data.unlabeled_images()))
    ck = _start("local", cfg, ckpt, resume, total, None, cfg.seed)
    runlog = runlog if runlog is not None else RunLog()
    return _run("local", ck, data, cfg, runlog, stop_after, validate, val_every), runlog


def stage_finetune(cfg: StageConfig, ckpt: Checkpoint | None, data: Dataset,
                   resume: Checkpoint | None = None, stop_after: int | None = None,
                   runlog: RunLog | None = None, validate=None, val_every: int = 0):
    """Supervised loss + pseudo-label CE + sampled anatomical contrast."""
    _checked(data, False, True)
    total = cfg.steps_for(len(data.unlabeled_images()))
    ck = _start("finetune", cfg, ckpt, resume, total, None, cfg.seed)
    runlog = runlog if runlog is not None else RunLog()
    return _run("finetune", ck, data, cfg, runlog, stop_after, validate, val_every), runlog


def train_supervised(student: EncoderParams, data: Dataset, cfg: StageConfig,
                     steps: int, runlog: RunLog | None = None) -> EncoderParams:
    """Plain supervised training on the labeled samples only.

    Uses the same per-step random streams as the labeled half of
    ``cfg.stage`` so it can serve as an exact reference trajectory.
    """
    _checked(data, False, True)
    labeled = data.labeled
    opt = OptimState(cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
    for step in range(steps):
        rec = supervised_step(student, opt, labeled, cfg, cfg.stage, step)
        if runlog is not None:
            runlog.append(record="step", stage=cfg.stage, step=step,
                          loss_total=rec["loss_sup"], **rec)
    return student


# -- evaluation ------------------------------------------------------------------------

def predict_labels(params: EncoderParams, image) -> np.ndarray:
    fwd = encode(params, image, ("seg",))
    return np.argmax(fwd.logits, axis=1).reshape(fwd.shape)


def evaluate_params(params: EncoderParams, dataset: Dataset) -> ClassReport:
    if params.dims.num_classes != dataset.num_classes:
        raise DataError(f"model has {params.dims.num_classes} classes, data has {dataset.num_classes}")
    preds = [predict_labels(params, s.image) for s in dataset.samples]
    return evaluate_labels(preds, [s.label for s in dataset.samples], dataset.num_classes)


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> ClassReport:
    """Score the student's segmentation head; the other heads are unused."""
    return evaluate_params(ckpt.state.student, dataset)
