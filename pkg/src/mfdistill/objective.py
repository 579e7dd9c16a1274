"""KD loss, layer pairing, the composite objective and the distillation loop."""

from __future__ import annotations

import logging
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import manifold as M
from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, NumericError, ShapeError
from .metrics import MetricsWriter
from .optim import cosine_lr, make_optimizer
from .tensor import Tensor
from .vit import ForwardResult, VisionTransformer, VitConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SCHEMES = ("shallow", "deep", "shallow_deep", "shallow_medium_deep", "uniform")
OPTIMIZERS = ("adamw", "sgd")
LOSS_TERMS = ("kd", "intra", "inter", "random", "normalize")


# -- configuration -------------------------------------------------------------

@dataclass
class DistillConfig:
    """Hyperparameters of one distillation (or supervised) run.

    ``lam=None`` resolves the KD balance from teacher/student parameter counts.
    ``merge`` is ``None``, one ``[rows, cols]`` setting for every pair, or a
    mapping from student layer index to a setting.
    """

    lam: Optional[float] = None
    tau: float = 1.0
    alpha: float = 4.0
    beta: float = 0.1
    gamma: float = 0.2
    k: int = 192
    layer_scheme: Union[str, List[List[int]]] = "shallow_deep"
    layer_count: int = 8
    merge: Optional[Union[List[int], Dict[str, List[int]]]] = None
    share_indices: bool = False
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 0
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta, gamma must be non-negative")
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if isinstance(self.layer_scheme, str) and self.layer_scheme not in SCHEMES:
            raise ConfigError(f"unknown layer scheme {self.layer_scheme!r}; choose from {SCHEMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps must be >= 0, batch_size >= 1, lr > 0")
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("eval_every and log_every must be >= 1")

    @property
    def uses_manifold(self) -> bool:
        return bool(self.alpha or self.beta or self.gamma)

    def merge_for(self, student_layer: int) -> Optional[Tuple[int, int]]:
        if self.merge is None:
            return None
        if isinstance(self.merge, dict):
            setting = self.merge.get(str(student_layer))
            return None if setting is None else tuple(setting)
        return tuple(self.merge)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerPairing:
    pairs: Tuple[Tuple[int, int], ...]

    @property
    def teacher_layers(self) -> Tuple[int, ...]:
        return tuple(t for t, _ in self.pairs)

    @property
    def student_layers(self) -> Tuple[int, ...]:
        return tuple(s for _, s in self.pairs)

    def validate(self, teacher_depth: int, student_depth: int) -> "LayerPairing":
        for t, s in self.pairs:
            if not 1 <= t <= teacher_depth:
                raise ConfigError(f"teacher layer {t} outside [1, {teacher_depth}]")
            if not 1 <= s <= student_depth:
                raise ConfigError(f"student layer {s} outside [1, {student_depth}]")
        studs = self.student_layers
        if any(b <= a for a, b in zip(studs, studs[1:])):
            raise ConfigError(f"student layers must be strictly increasing, got {studs}")
        return self


def _scheme_layers(scheme: str, depth: int, count: int) -> List[int]:
    if scheme == "shallow":
        return list(range(1, count + 1))
    if scheme == "deep":
        return list(range(depth - count + 1, depth + 1))
    if scheme == "shallow_deep":
        tail = count // 2
        return list(range(1, count - tail + 1)) + list(range(depth - tail + 1, depth + 1))
    if scheme == "shallow_medium_deep":
        base, rem = divmod(count, 3)
        head, tail = base + (rem > 0), base + (rem > 1)
        start = depth // 2 - base // 2 + 1
        layers = (list(range(1, head + 1)) + list(range(start, start + base))
                  + list(range(depth - tail + 1, depth + 1)))
        if len(set(layers)) != len(layers) or layers != sorted(layers):
            raise ConfigError(f"shallow_medium_deep with {count} layers overlaps at depth {depth}")
        return layers
    if scheme == "uniform":
        return [int(math.floor(i * depth / count + 0.5)) for i in range(1, count + 1)]
    raise ConfigError(f"unknown layer scheme {scheme!r}; choose from {SCHEMES}")


def select_layers(scheme: str, teacher_depth: int, student_depth: int, count: int) -> LayerPairing:
    """Pair ``count`` teacher layers with ``count`` student layers (1-based)."""
    if count < 1 or count > min(teacher_depth, student_depth):
        raise ConfigError(f"cannot select {count} layers from depths {teacher_depth}/{student_depth}")
    teacher = _scheme_layers(scheme, teacher_depth, count)
    student = _scheme_layers(scheme, student_depth, count)
    return LayerPairing(tuple(zip(teacher, student))).validate(teacher_depth, student_depth)


def resolve_pairing(config: DistillConfig, teacher_depth: int, student_depth: int) -> LayerPairing:
    if isinstance(config.layer_scheme, str):
        return select_layers(config.layer_scheme, teacher_depth, student_depth, config.layer_count)
    pairs = tuple((int(t), int(s)) for t, s in config.layer_scheme)
    return LayerPairing(pairs).validate(teacher_depth, student_depth)


def resolve_lambda(teacher_metric: float, student_metric: float, override: Optional[float] = None) -> float:
    """Soft labels only (1.0) unless the teacher is weaker than the student (0.5)."""
    if override is not None:
        if not 0.0 <= override <= 1.0:
            raise ConfigError(f"lam override must lie in [0, 1], got {override}")
        return float(override)
    return 1.0 if teacher_metric >= student_metric else 0.5


# -- losses --------------------------------------------------------------------

def kd_loss(student_logits: Tensor, teacher_logits, labels, lam: float, tau: float = 1.0) -> Tensor:
    """``(1-lam) * CE(student, labels) + lam * tau^2 * KL(teacher || student)``.

    Both terms are averaged over the batch; softened distributions use
    ``logits / tau``. The teacher side carries no gradient.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must lie in [0, 1], got {lam}")
    s = T.as_tensor(student_logits)
    b = s.shape[0]
    total = Tensor(0.0)
    if lam < 1.0:
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape != (b,) or labels.min() < 0 or labels.max() >= s.shape[1]:
            raise ContractError(f"labels must be {b} class indices in [0, {s.shape[1]})")
        ce = -(T.log_softmax(s, axis=-1)[np.arange(b), labels].sum() * (1.0 / b))
        total = total + ce * (1.0 - lam)
    if lam > 0.0:
        t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                       dtype=np.float64) / tau
        shifted = t - t.max(axis=-1, keepdims=True)
        log_pt = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        pt = np.exp(log_pt)
        log_ps = T.log_softmax(s * (1.0 / tau), axis=-1)
        kl = (float((pt * log_pt).sum()) - (log_ps * pt).sum()) * (1.0 / b)
        total = total + kl * (lam * tau * tau)
    return total


@dataclass
class Objective:
    total: Tensor
    terms: Dict[str, Tensor] = field(default_factory=dict)
    breakdown: Dict[str, float] = field(default_factory=dict)


def _pair_features(f: Tensor, cfg: VitConfig, setting) -> Tensor:
    if setting is None:
        return f
    return M.merge_patches(f, cfg.grid, setting)


def compute_objective(images, labels, student: VisionTransformer, teacher: Optional[VisionTransformer],
                      config: DistillConfig, lam: float, pairing: Optional[LayerPairing] = None,
                      rng: Optional[np.random.Generator] = None, indices=None,
                      teacher_out: Optional[ForwardResult] = None) -> Objective:
    """Evaluate the composite loss and keep each weighted term as a tensor.

    ``teacher_out`` supplies precomputed teacher logits and taps for this
    batch; otherwise the teacher is run here.
    ``indices`` fixes the random-term rows (one array shared by every pair);
    otherwise rows are drawn from ``rng`` per pair, or once per step when
    ``config.share_indices`` is set. Non-finite values raise
    ``DivergenceError`` naming the term.
    """
    manifold_on = config.uses_manifold and teacher is not None and pairing is not None and pairing.pairs
    s_taps = pairing.student_layers if manifold_on else ()
    t_taps = pairing.teacher_layers if manifold_on else ()
    try:
        s_out = student(images, taps=s_taps)
    except NumericError as exc:
        raise DivergenceError(f"student forward: {exc}", term="student_forward") from exc
    t_out = teacher_out
    if teacher is not None and t_out is None:
        with T.no_grad():
            t_out = teacher(images, taps=t_taps)

    terms: Dict[str, Tensor] = {}
    breakdown: Dict[str, float] = {}
    try:
        kd = kd_loss(s_out.logits, None if t_out is None else t_out.logits.data, labels, lam, config.tau)
    except NumericError as exc:
        raise DivergenceError(f"kd term: {exc}", term="kd") from exc
    terms["kd"] = kd
    breakdown["kd"] = kd.item()

    sums = {"intra": 0.0, "inter": 0.0, "random": 0.0}
    weights = {"intra": config.alpha, "inter": config.beta, "random": config.gamma}
    shared = None
    if manifold_on:
        for t_layer, s_layer in pairing.pairs:
            setting = config.merge_for(s_layer)
            f_s = _pair_features(s_out.taps[s_layer], student.config, setting)
            f_t = _pair_features(t_out.taps[t_layer], teacher.config, setting)
            if f_s.shape[:2] != f_t.shape[:2]:
                raise ShapeError(f"pair (teacher {t_layer}, student {s_layer}): student taps {f_s.shape} "
                                 f"and teacher taps {f_t.shape} differ in (B, N) after merging")
            idx = None
            if config.gamma:
                if indices is not None:
                    idx = indices
                elif config.share_indices:
                    if shared is None:
                        shared = M.sample_indices(f_s.shape[0], f_s.shape[1], config.k, rng)
                    idx = shared
                else:
                    idx = M.sample_indices(f_s.shape[0], f_s.shape[1], config.k, rng)
            parts = M.decoupled_terms(f_s, T.Tensor(f_t.data), intra=bool(config.alpha),
                                      inter=bool(config.beta), indices=idx)
            for name, term in parts.items():
                value = term.item()
                breakdown[f"t{t_layer}_s{s_layer}/{name}"] = value
                sums[name] += value
                terms[f"t{t_layer}_s{s_layer}/{name}"] = term * weights[name]
    breakdown.update(sums)
    total = Tensor(0.0)
    for term in terms.values():
        total = total + term
    breakdown["total"] = total.item()
    return Objective(total, terms, breakdown)


def total_loss(images, labels, student, teacher, config: DistillConfig, pairing=None, rng=None,
               lam: Optional[float] = None, indices=None) -> Tuple[Tensor, Dict[str, float]]:
    """KD loss plus the weighted decoupled manifold loss summed over layer pairs."""
    if pairing is None and teacher is not None:
        pairing = resolve_pairing(config, teacher.depth, student.depth)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if lam is None:
        lam = config.lam if config.lam is not None else (
            resolve_lambda(teacher.num_parameters(), student.num_parameters()) if teacher is not None else 0.0)
    obj = compute_objective(images, labels, student, teacher, config, lam, pairing, rng, indices)
    return obj.total, obj.breakdown


# -- training loop -------------------------------------------------------------

def evaluate(model: VisionTransformer, images, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy without building a graph."""
    labels = np.asarray(labels)
    correct = 0
    with T.no_grad():
        for lo in range(0, len(labels), batch_size):
            logits = model(images[lo:lo + batch_size]).logits.data
            correct += int((logits.argmax(axis=-1) == labels[lo:lo + batch_size]).sum())
    return correct / max(len(labels), 1)


def teacher_outputs(teacher: VisionTransformer, images, taps, batch_size: int = 256) -> ForwardResult:
    """Teacher logits and taps for a whole image set, as graph-free tensors."""
    logits, captured = [], {t: [] for t in taps}
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            out = teacher(images[lo:lo + batch_size], taps=taps)
            logits.append(out.logits.data)
            for t in taps:
                captured[t].append(out.taps[t].data)
    return ForwardResult(Tensor(np.concatenate(logits)),
                         {t: Tensor(np.concatenate(v)) for t, v in captured.items()})


def _slice_outputs(out: ForwardResult, idx) -> ForwardResult:
    return ForwardResult(Tensor(out.logits.data[idx]), {t: Tensor(v.data[idx]) for t, v in out.taps.items()})


def _grads_finite(model: VisionTransformer) -> bool:
    return all(p.grad is None or np.isfinite(p.grad).all() for p in model.parameters())


def _blame(obj: Objective, model: VisionTransformer) -> Tuple[str, Dict[str, float]]:
    """Gradient norm of each loss kind (summed over layer pairs) and the largest one."""
    sq: Dict[str, float] = {}
    for name, term in obj.terms.items():
        if not term.requires_grad:
            continue
        model.zero_grad()
        T.backward(term)
        with np.errstate(over="ignore", invalid="ignore"):
            total = sum(float((p.grad * p.grad).sum()) for p in model.parameters() if p.grad is not None)
        kind = name.split("/")[-1]
        sq[kind] = sq.get(kind, 0.0) + (total if math.isfinite(total) else math.inf)
    model.zero_grad()
    norms = {k: math.sqrt(v) for k, v in sq.items()}
    if not norms:
        return "unknown", {}
    return max(norms, key=norms.get), norms


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield order[lo:lo + batch_size]


def train(student: VisionTransformer, dataset, config: DistillConfig,
          teacher: Optional[VisionTransformer] = None, metrics_path=None,
          checkpoint_path=None, clock_path=None) -> Tuple[VisionTransformer, List[dict]]:
    """Optimise ``student`` for ``config.steps`` steps.

    Without a teacher this is plain cross-entropy training. With one, the
    objective is the KD loss plus (when any manifold weight is non-zero) the
    decoupled manifold loss over the configured layer pairs. The teacher is
    never updated; its parameter checksum is compared before and after.

    Wall-clock seconds go to ``clock_path`` (one line per logged step), never
    to the metrics stream, so metrics files stay bit-reproducible.
    """
    pairing = None
    if teacher is None:
        lam = 0.0
    else:
        teacher.requires_grad_(False)
        pairing = resolve_pairing(config, teacher.depth, student.depth) if config.uses_manifold else None
        lam = config.lam if config.lam is not None else resolve_lambda(
            teacher.num_parameters(), student.num_parameters())
    teacher_sum = teacher.checksum() if teacher is not None else None
    cached = None
    if teacher is not None and config.steps > 0:
        cached = teacher_outputs(teacher, dataset.train_images, pairing.teacher_layers if pairing else ())

    data_rng = np.random.default_rng([config.seed, 0])
    sample_rng = np.random.default_rng([config.seed, 1])
    batches = _batches(len(dataset.train_labels), config.batch_size, data_rng)
    opt = make_optimizer(config.optimizer, student.named_parameters(), config.weight_decay)
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    clock = open(clock_path, "w") if clock_path is not None else None
    started = time.perf_counter()
    history: List[dict] = []
    snapshot = None
    last_breakdown: Dict[str, float] = {}

    def replay(snap):
        # re-evaluate one earlier step from saved parameters to see which term drove the update
        snap_step, params, snap_idx = snap
        model = VisionTransformer(student.config, params)
        obj = compute_objective(dataset.train_images[snap_idx], dataset.train_labels[snap_idx], model, teacher,
                                config, lam, pairing, np.random.default_rng([config.seed, 2, snap_step]),
                                teacher_out=None if cached is None else _slice_outputs(cached, snap_idx))
        return _blame(obj, model)

    def diverged(step, what, breakdown, blame):
        culprit, norms = blame
        if norms:
            detail = ", ".join(f"{k}={v:.3g}" for k, v in sorted(norms.items()))
            why = f"{culprit} term dominated the gradient (grad norms: {detail})"
        else:
            why = f"{culprit} term went non-finite"
        return DivergenceError(f"step {step}: {what}; {why}; last terms: {_fmt(breakdown)}",
                               step=step, term=culprit, breakdown=breakdown)

    try:
        for step in range(1, config.steps + 1):
            idx = next(batches)
            images, labels = dataset.train_images[idx], dataset.train_labels[idx]
            lr = cosine_lr(step, config.steps, config.lr, config.warmup_steps)
            student.zero_grad()
            try:
                obj = compute_objective(images, labels, student, teacher, config, lam, pairing, sample_rng,
                                        teacher_out=None if cached is None else _slice_outputs(cached, idx))
            except DivergenceError as exc:
                if exc.term in LOSS_TERMS or snapshot is None:
                    blame = (exc.term, {})
                else:
                    # the forward itself overflowed: blame the term that drove the last update
                    blame = replay(snapshot)
                raise diverged(step, str(exc), exc.breakdown or last_breakdown, blame) from exc
            last_breakdown = obj.breakdown
            T.backward(obj.total)
            if not _grads_finite(student):
                raise diverged(step, "non-finite gradient", obj.breakdown, _blame(obj, student))
            snapshot = (step, student.state_dict(), idx)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(lr)
            if not all(np.isfinite(p.data).all() for p in student.parameters()):
                raise diverged(step, "parameters became non-finite after the update", obj.breakdown,
                               replay(snapshot))
            do_eval = step % config.eval_every == 0 or step == config.steps
            if step % config.log_every == 0 or do_eval:
                record = {"step": step, "lr": lr}
                record.update({k: obj.breakdown.get(k, 0.0) for k in ("kd", "intra", "inter", "random", "total")})
                if do_eval and getattr(dataset, "eval_labels", None) is not None:
                    record["eval_accuracy"] = evaluate(student, dataset.eval_images, dataset.eval_labels)
                history.append(record)
                if writer is not None:
                    writer.write(record)
                if clock is not None:
                    clock.write(json.dumps({"step": step, "wall_clock_s": time.perf_counter() - started}) + "\n")
                    clock.flush()
    finally:
        if writer is not None:
            writer.close()
        if clock is not None:
            clock.close()
        if teacher is not None and teacher.checksum() != teacher_sum:
            raise ContractError("teacher parameters changed during distillation")
    if checkpoint_path is not None and config.steps > 0:
        save_checkpoint(student, checkpoint_path)
    return student, history


def _fmt(breakdown: Dict[str, float]) -> str:
    keys = ("kd", "intra", "inter", "random", "total")
    return ", ".join(f"{k}={breakdown[k]:.4g}" for k in keys if k in breakdown) or "none"


def distill(teacher, student, dataset, config: DistillConfig, metrics_path=None,
            checkpoint_path=None, clock_path=None) -> Tuple[VisionTransformer, List[dict]]:
    """Distil a student from a teacher model or checkpoint path.

    ``student`` may be a ``VitConfig`` (fresh initialisation) or a model.
    """
    if not isinstance(teacher, VisionTransformer):
        teacher = load_checkpoint(teacher)
    if isinstance(student, VitConfig):
        student = VisionTransformer(student)
    if teacher.config.num_classes != student.config.num_classes:
        raise ConfigError("teacher and student disagree on num_classes")
    return train(student, dataset, config, teacher=teacher, metrics_path=metrics_path,
                 checkpoint_path=checkpoint_path, clock_path=clock_path)


def train_supervised(model, dataset, config: DistillConfig, metrics_path=None, checkpoint_path=None,
                     clock_path=None):
    """Cross-entropy training on hard labels (teachers and the no-distillation baseline)."""
    if isinstance(model, VitConfig):
        model = VisionTransformer(model)
    return train(model, dataset, config, teacher=None, metrics_path=metrics_path,
                 checkpoint_path=checkpoint_path, clock_path=clock_path)
