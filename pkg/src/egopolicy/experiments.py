"""End-to-end benchmark harness: ablations, data scaling, ID-vs-OOD.

Every arm follows the same recipe: generate in-the-wild-style human clips
(every clip gets its own scene style) and single-scene robot demos, run the
clip pipeline, pretrain on the human frames, then co-train or fine-tune,
and score rollouts in the training scene (ID) and a held-out scene (OOD).
Data, training and evaluation randomness all derive from one run seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, pipeline, simenv, train
from .data import ClipBundle, select_clip_ids
from .filtering import FilterConfig
from .labels import LabelConfig
from .simenv import EMBODIMENT_HAND, EMBODIMENT_OVERLAY, HUMAN_STYLE_BASE, SceneConfig
from .train import HumanFrames, RobotFrames, TrainConfig


@dataclass(frozen=True)
class BenchmarkConfig:
    task: str = "stack_pots"
    n_human_clips: int = 200
    n_robot_demos: int = 50
    feature_dim: int = 128
    embed_dim: int = 64
    horizon: int = 16
    chunk_len: int = 8
    head_widths: tuple[int, ...] = (512, 512)
    n_rollouts: int = 50
    max_steps: int = 80
    exec_horizon: int = 4
    ood_style: int = 1
    human_jitter: float = 0.01
    demo_action_noise: float = 0.05
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-3, pretrain_steps=3000, cotrain_steps=6000, batch_human=64, batch_robot=48))

    def model_config(self) -> nn.ModelConfig:
        return nn.ModelConfig(
            feature_dim=self.feature_dim,
            embed_dim=self.embed_dim,
            horizon=self.horizon,
            chunk_len=self.chunk_len,
            action_dim=6,
            head_widths=self.head_widths,
        )

    def label_config(self) -> LabelConfig:
        return LabelConfig(horizon=self.horizon)


@dataclass
class ArmResult:
    condition: str
    seed: int
    ood_mean: float
    ood_sem: float
    id_mean: float = math.nan
    id_sem: float = math.nan
    ood_scores: list[float] = field(default_factory=list)
    id_scores: list[float] = field(default_factory=list)


def _human_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence((seed, 41, i)).generate_state(1)[0])


def build_human_bundles(cfg: BenchmarkConfig, overlay: bool, seed: int) -> list[ClipBundle]:
    """Generate and fully process the edited-human-clip dataset for one run."""
    tasks = list(simenv.TASKS)
    embodiment = EMBODIMENT_OVERLAY if overlay else EMBODIMENT_HAND
    label_cfg = cfg.label_config()
    bundles = []
    for i in range(cfg.n_human_clips):
        scene = SceneConfig(
            task=tasks[i % len(tasks)],
            scene_style=HUMAN_STYLE_BASE + 1000 * seed + i,
            embodiment=embodiment,
            feature_dim=cfg.feature_dim,
            embed_dim=cfg.embed_dim,
            jitter=cfg.human_jitter,
        )
        clip = simenv.gen_human_clip(scene, seed=_human_seed(seed, i))
        clip.clip_id = f"{clip.clip_id}-{i:04d}"
        processed, _ = pipeline.process_human_bundle(clip, label_cfg=label_cfg)
        bundles.append(processed)
    return bundles


def human_frames_at_fraction(bundles: list[ClipBundle], fraction: float, seed: int) -> HumanFrames:
    ids = set(select_clip_ids([b.clip_id for b in bundles], fraction, seed))
    return HumanFrames.from_bundles([b for b in bundles if b.clip_id in ids])


def build_robot_frames(cfg: BenchmarkConfig, seed: int) -> RobotFrames:
    scene = SceneConfig(task=cfg.task, feature_dim=cfg.feature_dim, embed_dim=cfg.embed_dim)
    demos = simenv.gen_robot_demos(cfg.task, cfg.n_robot_demos, seed, scene, cfg.chunk_len,
                                   cfg.demo_action_noise)
    return RobotFrames.from_bundles(demos)


def _eval_scene(cfg: BenchmarkConfig, style: int) -> SceneConfig:
    return SceneConfig(task=cfg.task, scene_style=style, embodiment=EMBODIMENT_OVERLAY,
                       feature_dim=cfg.feature_dim, embed_dim=cfg.embed_dim)


def run_arm(
    cfg: BenchmarkConfig,
    condition: str,
    seed: int,
    *,
    overlay: bool = True,
    do_pretrain: bool = True,
    do_cotrain: bool = True,
    fraction: float = 1.0,
    eval_id: bool = False,
    human_bundles: list[ClipBundle] | None = None,
    robot: RobotFrames | None = None,
) -> ArmResult:
    """Train one arm of the study end to end and score it."""
    if human_bundles is None and (do_pretrain or (do_cotrain and fraction > 0)):
        human_bundles = build_human_bundles(cfg, overlay, seed)
    robot = robot if robot is not None else build_robot_frames(cfg, seed)
    human = (human_frames_at_fraction(human_bundles, fraction, seed)
             if human_bundles is not None else HumanFrames.from_bundles([]))

    tc = replace(cfg.train, seed=seed)
    params = nn.ModelParams.init(cfg.model_config(), seed=seed)
    sched = nn.DiffusionSchedule()
    if do_pretrain and len(human) > 0:
        params, _ = train.pretrain(human, params, tc)
    if do_cotrain and len(human) > 0:
        params, _ = train.cotrain(human, robot, params, tc, sched)
    else:
        params, _ = train.finetune(robot, params, tc, sched)

    ood = train.evaluate(params, _eval_scene(cfg, cfg.ood_style), cfg.n_rollouts,
                         seed=seed + 500, sched=sched, max_steps=cfg.max_steps,
                         exec_horizon=cfg.exec_horizon)
    result = ArmResult(condition, seed, ood.mean, ood.sem,
                       ood_scores=[r.score for r in ood.reports])
    if eval_id:
        ind = train.evaluate(params, _eval_scene(cfg, 0), cfg.n_rollouts,
                             seed=seed + 900, sched=sched, max_steps=cfg.max_steps,
                             exec_horizon=cfg.exec_horizon)
        result.id_mean, result.id_sem = ind.mean, ind.sem
        result.id_scores = [r.score for r in ind.reports]
    return result


ABLATION_CONDITIONS = (
    ("overlay+cotrain", True, True),
    ("no_overlay+cotrain", False, True),
    ("overlay+finetune", True, False),
    ("no_overlay+finetune", False, False),
)


def ablation_grid(cfg: BenchmarkConfig, seeds: tuple[int, ...] = (0, 1, 2),
                  eval_id: bool = False) -> list[ArmResult]:
    """The 2x2 overlay-by-co-training study."""
    rows = []
    for seed in seeds:
        robot = build_robot_frames(cfg, seed)
        overlay_bundles = build_human_bundles(cfg, True, seed)
        hand_bundles = build_human_bundles(cfg, False, seed)
        for name, overlay, do_cotrain in ABLATION_CONDITIONS:
            rows.append(
                run_arm(cfg, name, seed, overlay=overlay, do_cotrain=do_cotrain,
                        eval_id=eval_id, robot=robot,
                        human_bundles=overlay_bundles if overlay else hand_bundles)
            )
    return rows


def scale_study(cfg: BenchmarkConfig, seeds: tuple[int, ...] = (0, 1, 2),
                fractions: tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)) -> list[ArmResult]:
    """Vary the human-data fraction; 0 means no pretraining and no co-training."""
    rows = []
    for seed in seeds:
        robot = build_robot_frames(cfg, seed)
        bundles = build_human_bundles(cfg, True, seed)
        for f in fractions:
            rows.append(
                run_arm(cfg, f"fraction={f:g}", seed, fraction=f,
                        do_pretrain=f > 0, do_cotrain=f > 0,
                        robot=robot, human_bundles=bundles if f > 0 else None)
            )
    return rows


def id_vs_ood(cfg: BenchmarkConfig, seeds: tuple[int, ...] = (0, 1, 2)) -> list[ArmResult]:
    """Full method vs pretrain-then-finetune, each scored in ID and OOD scenes."""
    rows = []
    for seed in seeds:
        robot = build_robot_frames(cfg, seed)
        bundles = build_human_bundles(cfg, True, seed)
        rows.append(run_arm(cfg, "overlay+cotrain", seed, eval_id=True,
                            robot=robot, human_bundles=bundles))
        rows.append(run_arm(cfg, "overlay+finetune", seed, do_cotrain=False, eval_id=True,
                            robot=robot, human_bundles=bundles))
    return rows


def summarize(rows: list[ArmResult]) -> dict[str, dict[str, float]]:
    """Per-condition mean and SEM over seeds (OOD and, when present, ID)."""
    out: dict[str, dict[str, float]] = {}
    by_cond: dict[str, list[ArmResult]] = {}
    for r in rows:
        by_cond.setdefault(r.condition, []).append(r)
    for cond, rs in by_cond.items():
        ood = np.array([r.ood_mean for r in rs])
        entry = {
            "ood_mean": float(ood.mean()),
            "ood_sem": float(ood.std(ddof=1) / math.sqrt(len(ood))) if len(ood) > 1 else 0.0,
        }
        ids = np.array([r.id_mean for r in rs])
        if not np.any(np.isnan(ids)):
            entry["id_mean"] = float(ids.mean())
            entry["id_sem"] = float(ids.std(ddof=1) / math.sqrt(len(ids))) if len(ids) > 1 else 0.0
        out[cond] = entry
    return out
