"""Pretraining, co-training, and rollout evaluation.

Pretraining minimizes the auxiliary waypoint loss on human frames at a
constant learning rate. Co-training draws one human batch and one robot
batch per step and applies a single AdamW update of
``loss = aux + lam * policy`` under a cosine schedule with linear warmup.
With an empty human dataset the same loop degenerates to plain policy
fine-tuning (the no-co-training arm runs it with lam = 1 so the objective
is exactly the policy loss). Setting lam = 0 keeps the robot batches and
their RNG consumption but scales their gradient contribution away, so the
parameter trajectory is bit-identical to an aux-only run over the same
batch sequence regardless of the robot data content.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, simenv
from .data import ClipBundle, embed_language
from .simenv import Env, RolloutReport, SceneConfig


class EmptyDataset(Exception):
    """No usable frames to train on."""


class EmptyRobotDataset(Exception):
    """Co-training requires at least one robot frame."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0  # weight of the policy loss in the co-training objective
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_human: int = 32
    batch_robot: int = 16
    pretrain_steps: int = 5000
    cotrain_steps: int = 3000
    warmup: int = 500
    seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    sample_by_clip: bool = False  # frame-uniform by default
    alternate: bool = False  # alternate human/robot updates instead of combining

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


#: Full-scale reference configuration; desk runs use the defaults above.
PAPER_SCALE = TrainConfig(batch_human=160, batch_robot=64,
                          pretrain_steps=150_000, cotrain_steps=40_000)


@dataclass
class TrainLog:
    records: list[tuple] = field(default_factory=list)  # step, l2d, lpolicy, total, lr, wall
    checkpoints: list[str] = field(default_factory=list)

    def add(self, step, l2d, lpolicy, total, lr):
        self.records.append((step, l2d, lpolicy, total, lr, time.monotonic()))

    def to_csv(self) -> str:
        lines = ["step,l2d,lpolicy,total,lr"]
        for step, l2d, lpol, total, lr, _ in self.records:
            lines.append(f"{step},{l2d!r},{lpol!r},{total!r},{lr!r}")
        return "\n".join(lines) + "\n"


def cosine_lr(step: int, cfg: TrainConfig, total: int) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    if total <= cfg.warmup:
        return cfg.lr
    frac = (step - cfg.warmup) / (total - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay Adam over the flat parameter vector."""

    def __init__(self, params: nn.ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = np.zeros_like(params.flat_values)
        self.v = np.zeros_like(params.flat_values)
        self._scratch = np.empty_like(self.m)
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        g = self.params.flat_grads
        p = self.params.flat_values
        s = self._scratch
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        np.multiply(g, g, out=s)
        s *= 1.0 - b2
        self.v += s
        # bias-corrected update, built in scratch to avoid allocations
        np.divide(self.v, 1.0 - b2**self.t, out=s)
        np.sqrt(s, out=s)
        s += 1e-8
        np.divide(self.m, s, out=s)
        s /= 1.0 - b1**self.t
        s += self.cfg.weight_decay * p
        s *= lr
        p -= s
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("parameters became non-finite")


# ---------------------------------------------------------------------------
# in-memory frame datasets


@dataclass
class HumanFrames:
    x: np.ndarray  # (N, F)
    z: np.ndarray  # (N, d)
    labels: np.ndarray  # (N, 2, H+1, 2)
    mask: np.ndarray  # (N, 2)
    clip_slices: list[slice]

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_bundles(cls, bundles: list[ClipBundle]) -> "HumanFrames":
        xs, zs, ls, ms, slices = [], [], [], [], []
        start = 0
        for b in bundles:
            if b.source != "human" or b.label_waypoints is None:
                continue
            usable = b.keep & b.label_valid.any(axis=1)
            idx = np.flatnonzero(usable)
            if len(idx) == 0:
                continue
            xs.append(b.features[idx])
            zs.append(np.tile(b.embedding, (len(idx), 1)))
            ls.append(b.label_waypoints[idx])
            ms.append(b.label_valid[idx])
            slices.append(slice(start, start + len(idx)))
            start += len(idx)
        if not xs:
            return cls(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 2, 1, 2)),
                       np.zeros((0, 2), dtype=bool), [])
        return cls(
            np.concatenate(xs).astype(np.float64),
            np.concatenate(zs).astype(np.float64),
            np.concatenate(ls).astype(np.float64),
            np.concatenate(ms),
            slices,
        )


@dataclass
class RobotFrames:
    y: np.ndarray  # (M, F)
    z: np.ndarray  # (M, d)
    chunks: np.ndarray  # (M, A, action_dim)

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_bundles(cls, bundles: list[ClipBundle]) -> "RobotFrames":
        ys, zs, cs = [], [], []
        for b in bundles:
            if b.source != "robot" or b.actions is None:
                continue
            ys.append(b.features)
            zs.append(np.tile(b.embedding, (b.n_frames, 1)))
            cs.append(b.actions)
        if not ys:
            return cls(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1, 6)))
        return cls(
            np.concatenate(ys).astype(np.float64),
            np.concatenate(zs).astype(np.float64),
            np.concatenate(cs).astype(np.float64),
        )


def _draw_indices(rng: np.random.Generator, frames: HumanFrames, batch: int,
                  by_clip: bool) -> np.ndarray:
    if not by_clip:
        return rng.integers(0, len(frames), size=batch)
    picks = rng.integers(0, len(frames.clip_slices), size=batch)
    out = np.empty(batch, dtype=np.int64)
    for i, c in enumerate(picks):
        s = frames.clip_slices[c]
        out[i] = s.start + rng.integers(0, s.stop - s.start)
    return out


# ---------------------------------------------------------------------------
# training loops


def pretrain(human: HumanFrames, params: nn.ModelParams, cfg: TrainConfig,
             checkpoint_path: str | None = None) -> tuple[nn.ModelParams, TrainLog]:
    """Minimize the waypoint loss over human frames at a constant rate."""
    if len(human) == 0:
        raise EmptyDataset("pretraining needs human frames with labels")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
    opt = AdamW(params, cfg)
    log = TrainLog()
    for step in range(cfg.pretrain_steps):
        idx = _draw_indices(rng, human, cfg.batch_human, cfg.sample_by_clip)
        params.zero_grad()
        l2d = nn.loss_2d(params, human.x[idx], human.z[idx], human.labels[idx], human.mask[idx])
        opt.step(cfg.lr)
        log.add(step, l2d, 0.0, l2d, cfg.lr)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            p = f"{checkpoint_path}.step{step + 1}"
            nn.save_checkpoint(params, p, step=step + 1, rng_state=rng_state_hex(rng))
            log.checkpoints.append(p)
    if checkpoint_path:
        nn.save_checkpoint(params, checkpoint_path, step=cfg.pretrain_steps,
                           rng_state=rng_state_hex(rng))
        log.checkpoints.append(checkpoint_path)
    return params, log


def cotrain(human: HumanFrames, robot: RobotFrames, params: nn.ModelParams, cfg: TrainConfig,
            sched: nn.DiffusionSchedule | None = None,
            checkpoint_path: str | None = None) -> tuple[nn.ModelParams, TrainLog]:
    """One combined update per step on a human batch and a robot batch."""
    if len(robot) == 0:
        raise EmptyRobotDataset("co-training needs robot frames")
    sched = sched or nn.DiffusionSchedule()
    rng_h = np.random.default_rng(np.random.SeedSequence((cfg.seed, 21)))
    rng_r = np.random.default_rng(np.random.SeedSequence((cfg.seed, 22)))
    rng_d = np.random.default_rng(np.random.SeedSequence((cfg.seed, 23)))
    opt = AdamW(params, cfg)
    log = TrainLog()
    have_human = len(human) > 0
    for step in range(cfg.cotrain_steps):
        lr = cosine_lr(step, cfg, cfg.cotrain_steps)
        human_turn = not cfg.alternate or step % 2 == 0
        robot_turn = not cfg.alternate or step % 2 == 1

        params.zero_grad()
        l2d = 0.0
        if have_human and human_turn:
            idx = _draw_indices(rng_h, human, cfg.batch_human, cfg.sample_by_clip)
            l2d = nn.loss_2d(params, human.x[idx], human.z[idx], human.labels[idx],
                             human.mask[idx])
        lpol = 0.0
        if robot_turn:
            ridx = rng_r.integers(0, len(robot), size=cfg.batch_robot)
            lpol = nn.loss_policy(params, robot.y[ridx], robot.z[ridx], robot.chunks[ridx],
                                  sched, rng_d, scale=cfg.lam)
        opt.step(lr)
        total = l2d + cfg.lam * lpol
        log.add(step, l2d, lpol, total, lr)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            p = f"{checkpoint_path}.step{step + 1}"
            nn.save_checkpoint(params, p, step=step + 1, rng_state=rng_state_hex(rng_d))
            log.checkpoints.append(p)
    if checkpoint_path:
        nn.save_checkpoint(params, checkpoint_path, step=cfg.cotrain_steps,
                           rng_state=rng_state_hex(rng_d))
        log.checkpoints.append(checkpoint_path)
    return params, log


def finetune(robot: RobotFrames, params: nn.ModelParams, cfg: TrainConfig,
             sched: nn.DiffusionSchedule | None = None,
             checkpoint_path: str | None = None) -> tuple[nn.ModelParams, TrainLog]:
    """Policy-loss-only training: the co-training loop with no human data.

    Runs with lam = 1 so the optimized objective is exactly the policy loss.
    """
    empty = HumanFrames.from_bundles([])
    return cotrain(empty, robot, params, replace(cfg, lam=1.0), sched, checkpoint_path)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    sem: float
    reports: list[RolloutReport]


def make_diffusion_policy(params: nn.ModelParams, z: np.ndarray,
                          sched: nn.DiffusionSchedule, rng: np.random.Generator):
    """Single-episode policy callable for simenv.rollout."""

    def policy(feature: np.ndarray) -> np.ndarray:
        return nn.ddpm_sample(params, feature, z, sched, rng)

    return policy


def evaluate(params: nn.ModelParams, scene: SceneConfig, n_rollouts: int, seed: int,
             sched: nn.DiffusionSchedule | None = None, max_steps: int = 80,
             exec_horizon: int = 4) -> EvalResult:
    """Score the policy over seeded episodes; mean with its standard error.

    Episodes run in lockstep so chunk sampling is batched; every episode
    owns its environment seed and noise stream, so results do not depend on
    how the batch is assembled.
    """
    sched = sched or nn.DiffusionSchedule()
    annotation = simenv.TASKS[scene.task].annotations[0]
    z = embed_language(annotation, scene.embed_dim)

    envs = [Env(scene, seed=int(np.random.SeedSequence((seed, 31, i)).generate_state(1)[0]))
            for i in range(n_rollouts)]
    rngs = [np.random.default_rng(np.random.SeedSequence((seed, 32, i)))
            for i in range(n_rollouts)]

    active = [i for i in range(n_rollouts) if not envs[i].done]
    while active:
        feats = np.stack([envs[i].observe() for i in active])
        zb = np.tile(z, (len(active), 1))
        chunks = nn.ddpm_sample_batch(params, feats, zb, sched, [rngs[i] for i in active])
        for row, i in enumerate(active):
            for action in chunks[row][:exec_horizon]:
                envs[i].step(action)
                if envs[i].done or envs[i].steps >= max_steps:
                    break
        active = [i for i in active if not envs[i].done and envs[i].steps < max_steps]

    reports = []
    for env in envs:
        done = (env.stage >= 1, env.stage >= 2, env.stage >= 3)
        reports.append(RolloutReport(done, env.score, env.steps, env.seed))
    scores = np.array([r.score for r in reports])
    sem = float(scores.std(ddof=1) / math.sqrt(len(scores))) if len(scores) > 1 else 0.0
    return EvalResult(float(scores.mean()), sem, reports)


# ---------------------------------------------------------------------------
# RNG state serialization for checkpoints


def rng_state_hex(gen: np.random.Generator) -> str:
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are supported")
    return f"{st['state']['state']:x}:{st['state']['inc']:x}:{st['has_uint32']}:{st['uinteger']}"


def rng_from_state_hex(text: str) -> np.random.Generator:
    state, inc, has32, uint = text.split(":")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(state, 16), "inc": int(inc, 16)},
        "has_uint32": int(has32),
        "uinteger": int(uint),
    }
    return np.random.Generator(bg)
