"""Run orchestration: teacher, baseline arms, manifold arm, and sweeps.

Run directory layout::

    <output_dir>/<run_id>/
        config.json
        teacher/{checkpoint.npz, metrics.jsonl, clock.jsonl}
        seed_<s>/<arm>/{checkpoint.npz, metrics.jsonl, clock.jsonl}
        summary.json

Arms are ``none`` (cross-entropy only), ``kd`` (KD loss only) and ``manifold``
(KD plus the decoupled manifold loss). All arms of one seed share the student
initialisation and the data order.
"""

from __future__ import annotations

import contextlib
import dataclasses
import itertools
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .config import ExperimentConfig, from_dict, save_config
from .data import Dataset, generate_dataset
from .errors import ConfigError, DivergenceError, MfDistillError, StageError
from .objective import DistillConfig, SCHEMES, distill, evaluate, train_supervised
from .vit import VisionTransformer, VitConfig, load_checkpoint

logger = logging.getLogger(__name__)

ARMS = ("none", "kd", "manifold")
TERMS = ("kd", "intra", "inter", "random", "total")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (MfDistillError, OSError) as exc:
        raise StageError(f"stage {name!r} failed: {exc}", stage=name) from exc


def prepare_run_dir(config: ExperimentConfig) -> Path:
    run_dir = config.run_dir
    if (run_dir / "config.json").exists():
        raise ConfigError(f"run id {config.run_id!r} already used in {config.output_dir}")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    return run_dir


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def obtain_teacher(config: ExperimentConfig, dataset: Dataset, run_dir: Path) -> Tuple[VisionTransformer, dict]:
    """Load the configured teacher checkpoint or train one on the teacher split."""
    if config.teacher_checkpoint:
        with stage("load_teacher"):
            teacher = load_checkpoint(config.teacher_checkpoint, expected_config=None)
            source = str(config.teacher_checkpoint)
    else:
        out = run_dir / "teacher"
        out.mkdir(parents=True, exist_ok=True)
        with stage("train_teacher"):
            teacher, _ = train_supervised(VisionTransformer(config.teacher), dataset.teacher_split(),
                                          config.teacher_training, metrics_path=out / "metrics.jsonl",
                                          checkpoint_path=out / "checkpoint.npz", clock_path=out / "clock.jsonl")
            source = "trained"
    with stage("evaluate_teacher"):
        acc = evaluate(teacher, dataset.eval_images, dataset.eval_labels)
    return teacher, {"source": source, "eval_accuracy": acc}


def arm_config(config: DistillConfig, arm: str, seed: int) -> DistillConfig:
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}")
    changes = {"seed": seed}
    if arm == "kd":
        changes.update(alpha=0.0, beta=0.0, gamma=0.0)
    return dataclasses.replace(config, **changes)


def run_arm(arm: str, config: DistillConfig, student_cfg: VitConfig, teacher: Optional[VisionTransformer],
            dataset: Dataset, out: Path) -> dict:
    """Train one arm; returns final eval accuracy and the last logged loss terms."""
    out.mkdir(parents=True, exist_ok=True)
    paths = dict(metrics_path=out / "metrics.jsonl", checkpoint_path=out / "checkpoint.npz",
                 clock_path=out / "clock.jsonl")
    student = VisionTransformer(student_cfg)
    if arm == "none":
        student, history = train_supervised(student, dataset, config, **paths)
    else:
        student, history = distill(teacher, student, dataset, config, **paths)
    acc = history[-1]["eval_accuracy"] if history and "eval_accuracy" in history[-1] else evaluate(
        student, dataset.eval_images, dataset.eval_labels)
    final = {k: history[-1][k] for k in TERMS} if history else {}
    return {"eval_accuracy": acc, "final_terms": final, "steps": config.steps,
            "metrics": str(paths["metrics_path"].relative_to(out.parent.parent))}


def run_experiment(config: ExperimentConfig, teacher: Optional[VisionTransformer] = None) -> dict:
    """Teacher, then the three arms for every seed; writes and returns the summary."""
    run_dir = prepare_run_dir(config)
    with stage("generate_dataset"):
        dataset = generate_dataset(config.dataset)
    if teacher is None:
        teacher, teacher_info = obtain_teacher(config, dataset, run_dir)
    else:
        teacher_info = {"source": "provided", "eval_accuracy": evaluate(teacher, dataset.eval_images,
                                                                         dataset.eval_labels)}
    arms: Dict[str, dict] = {arm: {"per_seed": {}} for arm in ARMS}
    for seed in config.seeds:
        student_cfg = dataclasses.replace(config.student, seed=seed)
        for arm in ARMS:
            name = f"seed_{seed}/{arm}"
            logger.info("running %s", name)
            with stage(name):
                result = run_arm(arm, arm_config(config.distill, arm, seed), student_cfg, teacher, dataset,
                                 run_dir / f"seed_{seed}" / arm)
            arms[arm]["per_seed"][str(seed)] = result
    for arm, block in arms.items():
        accs = [r["eval_accuracy"] for r in block["per_seed"].values()]
        block["mean_eval_accuracy"] = statistics.fmean(accs)
    summary = {
        "run_id": config.run_id,
        "seeds": list(config.seeds),
        "teacher": teacher_info,
        "arms": arms,
        "ordering_holds": (arms["manifold"]["mean_eval_accuracy"] >= arms["kd"]["mean_eval_accuracy"]
                           >= arms["none"]["mean_eval_accuracy"]),
    }
    _write_json(run_dir / "summary.json", summary)
    return summary


# -- sweeps --------------------------------------------------------------------

def _sub_run(payload) -> dict:
    """One sweep entry; top-level so it can run in a worker process."""
    raw, teacher_cfg, teacher_state, name, changes, out = payload
    config = from_dict(raw)
    dataset = generate_dataset(config.dataset)
    teacher = VisionTransformer(VitConfig(**teacher_cfg), teacher_state)
    seed = config.seeds[0]
    dcfg = dataclasses.replace(config.distill, seed=seed, **changes)
    student_cfg = dataclasses.replace(config.student, seed=seed)
    row = {"name": name, **{k: v for k, v in changes.items()}}
    try:
        result = run_arm("manifold", dcfg, student_cfg, teacher, dataset, Path(out))
        row.update(status="ok", **result)
    except DivergenceError as exc:
        row.update(status="diverged", step=exc.step, term=exc.term, error=str(exc))
    return row


def _run_sweep(config: ExperimentConfig, kind: str, entries: List[Tuple[str, dict]], workers: int,
               teacher: Optional[VisionTransformer]) -> Tuple[Path, List[dict]]:
    run_dir = prepare_run_dir(config)
    with stage("generate_dataset"):
        dataset = generate_dataset(config.dataset)
    if teacher is None:
        teacher, _ = obtain_teacher(config, dataset, run_dir)
    raw = config.to_dict()
    payloads = [(raw, teacher.config.to_dict(), teacher.state_dict(), name, changes,
                 str(run_dir / kind / name)) for name, changes in entries]
    with stage(kind):
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_sub_run, payloads))
        else:
            rows = [_sub_run(p) for p in payloads]
    return run_dir, rows


def ablation_sweep(config: ExperimentConfig, workers: int = 1,
                   teacher: Optional[VisionTransformer] = None) -> dict:
    """All 8 on/off combinations of the intra, inter and random terms.

    A switched-on term keeps its configured weight. Diverging entries are
    reported with the step and term instead of stopping the sweep.
    """
    entries = []
    for on in itertools.product((False, True), repeat=3):
        flags = dict(zip(("intra", "inter", "random"), on))
        name = "_".join(f"{k}{int(v)}" for k, v in flags.items())
        changes = {"alpha": config.distill.alpha if flags["intra"] else 0.0,
                   "beta": config.distill.beta if flags["inter"] else 0.0,
                   "gamma": config.distill.gamma if flags["random"] else 0.0}
        entries.append((name, changes))
    run_dir, rows = _run_sweep(config, "ablation", entries, workers, teacher)
    summary = {"run_id": config.run_id, "sweep": "ablation", "runs": rows}
    _write_json(run_dir / "summary.json", summary)
    return summary


def scheme_sweep(config: ExperimentConfig, workers: int = 1,
                 teacher: Optional[VisionTransformer] = None) -> dict:
    """One manifold run per layer-selection scheme, ranked by final eval accuracy."""
    entries = [(scheme, {"layer_scheme": scheme}) for scheme in SCHEMES]
    run_dir, rows = _run_sweep(config, "schemes", entries, workers, teacher)
    ranked = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: (-r["eval_accuracy"], r["name"]))
    summary = {"run_id": config.run_id, "sweep": "schemes", "runs": rows,
               "ranking": [{"rank": i + 1, "scheme": r["name"], "eval_accuracy": r["eval_accuracy"]}
                           for i, r in enumerate(ranked)]}
    _write_json(run_dir / "summary.json", summary)
    return summary


def train_teacher(config: ExperimentConfig) -> dict:
    """Train only the teacher into ``<run_dir>/teacher``."""
    run_dir = prepare_run_dir(config)
    with stage("generate_dataset"):
        dataset = generate_dataset(config.dataset)
    _, info = obtain_teacher(dataclasses.replace(config, teacher_checkpoint=None), dataset, run_dir)
    info["checkpoint"] = str(run_dir / "teacher" / "checkpoint.npz")
    _write_json(run_dir / "summary.json", {"run_id": config.run_id, "teacher": info})
    return info
