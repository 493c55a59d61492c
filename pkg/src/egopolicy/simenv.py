"""Synthetic tabletop world for measuring embodiment-gap and transfer effects.

The world is a planar workspace with two arms and three movable objects.
Every task has three ordered subtasks ("move object i into its goal
region"), credited strictly in order, each worth a third of the episode
score. A scripted expert solves the tasks; it both generates first-person
"human" clips (with synthesized 21-keypoint hands, a wandering camera and a
known table plane) and robot demonstrations (fixed camera, one scene).

Observations are feature vectors built from four blocks:

  * a task block: a fixed projection of the world state plus the camera
    pose, mixed through an embodiment-specific rotation. Decoding the state
    requires weights adapted to the embodiment that produced the clip;
    this is the visual embodiment gap.
  * an appearance block: a constant vector per embodiment (hand vs robot
    overlay; the overlay vector is exactly the robot's).
  * a scene block: a per-style offset and rotation applied to a strongly
    scaled copy of the task state. Within any single scene this block
    predicts actions better than the task block (a shortcut), but its
    encoding changes with the scene style, so models that rely on it break
    in unseen scenes.
  * a distractor block of pure noise.

Scene style 0 is the robot's training scene; styles 1..3 are the held-out
evaluation scenes; human clips draw styles from 100 upward so evaluation
scenes stay unseen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import geom
from .data import SOURCE_HUMAN, SOURCE_ROBOT, ClipBundle, embed_language, pack_camera_track
from .retarget import DEFAULT_APERTURE_M, INDEX_TIP, THUMB_TIP, WRIST

EMBODIMENT_HAND = "hand"
EMBODIMENT_OVERLAY = "robot_overlay"

N_OBJECTS = 3
N_SUBTASKS = 3
STATE_DIM = 12  # 2 arms * (x, y, grip) + 3 objects * (x, y)
CAM_DIM = 7  # quaternion + translation of the world-to-camera pose

ARM_SPEED = 0.15  # max arm travel per step, meters
GRASP_RADIUS = 0.09
GRIP_CLOSE = 0.45
GRIP_OPEN = 0.6

# feature-construction scales
TASK_BLOCK_NOISE = 0.03
APPEARANCE_NOISE = 0.02
SCENE_LEAK = 2.0
SCENE_MEAN_SCALE = 0.5
SCENE_NOISE = 0.02
DISTRACTOR_NOISE = 0.3

HUMAN_STYLE_BASE = 100

_TABLE_PLANE = (np.array([0.0, 0.0, 1.0]), 0.0)  # world plane z = 0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    annotations: tuple[str, ...]
    init_regions: tuple[tuple[float, float, float, float], ...]  # (x0, y0, x1, y1) per object
    goal_regions: tuple[tuple[float, float, float, float], ...]
    arm_for_subtask: tuple[int, int, int]


# The world origin is the robot base at the center of the table, so every
# reachable position stays inside the 1 m workspace sphere the filter
# assumes. Region tables below are written in unit-square coordinates for
# readability and shifted at module load.
WORKSPACE_HALF = 0.5


def _shift(box):
    x0, y0, x1, y1 = box
    return (x0 - 0.5, y0 - 0.5, x1 - 0.5, y1 - 0.5)


def _shift_task(spec: TaskSpec) -> TaskSpec:
    return TaskSpec(
        spec.name,
        spec.annotations,
        tuple(_shift(b) for b in spec.init_regions),
        tuple(_shift(b) for b in spec.goal_regions),
        spec.arm_for_subtask,
    )


_TASK_TABLE: dict[str, TaskSpec] = {
    "stack_pots": TaskSpec(
        "stack_pots",
        (
            "stack the pots",
            "put the small pot into the large pot",
            "nest the cooking pots together",
            "pile up the pots",
        ),
        ((0.65, 0.15, 0.9, 0.4), (0.65, 0.55, 0.9, 0.85), (0.1, 0.55, 0.35, 0.85)),
        ((0.15, 0.1, 0.4, 0.35), (0.15, 0.1, 0.4, 0.35), (0.15, 0.1, 0.4, 0.35)),
        (0, 1, 0),
    ),
    "scrape_potato": TaskSpec(
        "scrape_potato",
        (
            "scrape the potato into the pot",
            "push the potato off the plate",
            "use the spatula on the potato",
            "empty the plate into the pot",
        ),
        ((0.1, 0.1, 0.35, 0.4), (0.6, 0.1, 0.9, 0.35), (0.6, 0.6, 0.9, 0.9)),
        ((0.4, 0.55, 0.65, 0.8), (0.4, 0.55, 0.65, 0.8), (0.1, 0.55, 0.35, 0.8)),
        (0, 1, 1),
    ),
    "sweep_chilis": TaskSpec(
        "sweep_chilis",
        (
            "sweep the chilis into the bowl",
            "brush the peppers into the red bowl",
            "clean the chilis off the table",
            "gather the chilis with the sponge",
        ),
        ((0.1, 0.55, 0.3, 0.85), (0.6, 0.55, 0.9, 0.85), (0.4, 0.1, 0.6, 0.3)),
        ((0.6, 0.1, 0.85, 0.35), (0.6, 0.1, 0.85, 0.35), (0.6, 0.1, 0.85, 0.35)),
        (1, 0, 0),
    ),
}

TASKS: dict[str, TaskSpec] = {k: _shift_task(v) for k, v in _TASK_TABLE.items()}

ARM_REST = np.array([[0.25, 0.05], [0.75, 0.05]]) - 0.5


@dataclass
class SceneConfig:
    task: str = "stack_pots"
    scene_style: int = 0
    embodiment: str = EMBODIMENT_OVERLAY
    feature_dim: int = 128
    embed_dim: int = 64
    cam_step: float = 0.012  # per-frame camera translation for human clips
    spike_every: int = 0  # every k-th step exceeds the camera-motion threshold
    spike_mag: float = 0.08
    max_frames: int = 90
    jitter: float = 0.01  # scripted-agent target noise in human clips
    init_regions: tuple | None = None  # per-object (x0, y0, x1, y1) override
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.embodiment not in (EMBODIMENT_HAND, EMBODIMENT_OVERLAY):
            raise ValueError(f"unknown embodiment {self.embodiment!r}")
        if self.feature_dim % 8:
            raise ValueError("feature_dim must be a multiple of 8")
        if self.init_regions is not None:
            regions = tuple(tuple(float(v) for v in box) for box in self.init_regions)
            if len(regions) != N_OBJECTS or any(len(b) != 4 for b in regions):
                raise ValueError(f"init_regions needs {N_OBJECTS} boxes of 4 floats")
            half = WORKSPACE_HALF
            for x0, y0, x1, y1 in regions:
                if not (-half <= x0 <= x1 <= half and -half <= y0 <= y1 <= half):
                    raise ValueError("init_regions must lie inside the workspace")
            self.init_regions = regions

    def to_text(self) -> str:
        lines = []
        for k, v in vars(self).items():
            if k == "init_regions":
                if v is None:
                    continue
                v = ";".join(",".join(repr(c) for c in box) for box in v)
            lines.append(f"{k} {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        kv = dict(line.split(" ", 1) for line in text.splitlines() if line.strip())
        ints = {"scene_style", "feature_dim", "embed_dim", "spike_every", "max_frames", "seed"}
        floats = {"cam_step", "spike_mag", "jitter"}
        kwargs = {}
        for k, v in kv.items():
            if k in ints:
                kwargs[k] = int(v)
            elif k in floats:
                kwargs[k] = float(v)
            elif k == "init_regions":
                kwargs[k] = tuple(tuple(float(c) for c in box.split(",")) for box in v.split(";"))
            else:
                kwargs[k] = v
        return cls(**kwargs)


@dataclass
class RolloutReport:
    subtask_done: tuple[bool, bool, bool]
    score: float
    steps: int
    seed: int

    def __post_init__(self):
        done = self.subtask_done
        for i in range(1, 3):
            if done[i] and not done[i - 1]:
                raise ValueError("subtask completion must be prefix-monotone")
        if not math.isclose(self.score, sum(done) / 3.0):
            raise ValueError("score must equal completed subtasks / 3")


# ---------------------------------------------------------------------------
# feature construction


def _block_dims(feature_dim: int) -> tuple[int, int, int, int]:
    unit = feature_dim // 8
    return 4 * unit, unit, 2 * unit, unit  # task, appearance, scene, distractor


@lru_cache(maxsize=None)
def _task_projection(g_dim: int) -> np.ndarray:
    rng = np.random.default_rng(1101)
    return rng.standard_normal((g_dim, STATE_DIM + CAM_DIM)) / math.sqrt(STATE_DIM + CAM_DIM)


@lru_cache(maxsize=None)
def _embodiment_mixing(g_dim: int, embodiment: str) -> np.ndarray:
    rng = np.random.default_rng(1102 if embodiment == EMBODIMENT_HAND else 1103)
    q, _ = np.linalg.qr(rng.standard_normal((g_dim, g_dim)))
    return q


@lru_cache(maxsize=None)
def _appearance_vector(e_dim: int, embodiment: str) -> np.ndarray:
    rng = np.random.default_rng(1104 if embodiment == EMBODIMENT_HAND else 1105)
    v = rng.standard_normal(e_dim)
    return v / np.linalg.norm(v)


@lru_cache(maxsize=None)
def _scene_leak_projection(s_dim: int) -> np.ndarray:
    rng = np.random.default_rng(1106)
    return rng.standard_normal((s_dim, STATE_DIM)) / math.sqrt(STATE_DIM)


@lru_cache(maxsize=None)
def _scene_style(s_dim: int, style: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(1200 + style)
    mean = SCENE_MEAN_SCALE * rng.standard_normal(s_dim)
    rot, _ = np.linalg.qr(rng.standard_normal((s_dim, s_dim)))
    return mean, rot


def make_feature(
    task_state: np.ndarray,
    cam_pose: geom.RigidTransform,
    style: int,
    embodiment: str,
    feature_dim: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one observation feature from the ground-truth world state."""
    g_dim, e_dim, s_dim, n_dim = _block_dims(feature_dim)
    state_ext = np.concatenate([task_state, cam_pose.q, cam_pose.t])

    task_block = _embodiment_mixing(g_dim, embodiment) @ (
        _task_projection(g_dim) @ state_ext
    ) + TASK_BLOCK_NOISE * rng.standard_normal(g_dim)
    appearance = _appearance_vector(e_dim, embodiment) + APPEARANCE_NOISE * rng.standard_normal(
        e_dim
    )
    mean, rot = _scene_style(s_dim, style)
    scene = (
        mean
        + rot @ (SCENE_LEAK * (_scene_leak_projection(s_dim) @ task_state))
        + SCENE_NOISE * rng.standard_normal(s_dim)
    )
    distractor = DISTRACTOR_NOISE * rng.standard_normal(n_dim)
    return np.concatenate([task_block, appearance, scene, distractor])


# ---------------------------------------------------------------------------
# environment


class Env:
    """Deterministic planar manipulation environment with ordered subtasks."""

    def __init__(self, scene: SceneConfig, seed: int | None = None):
        self.scene = scene
        self.task = TASKS[scene.task]
        self.seed = scene.seed if seed is None else seed
        self.reset(self.seed)

    def reset(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.arms = ARM_REST.copy()
        self.grips = np.ones(2)  # open
        self.objects = np.empty((N_OBJECTS, 2))
        regions = self.scene.init_regions or self.task.init_regions
        for i, (x0, y0, x1, y1) in enumerate(regions):
            self.objects[i] = self.rng.uniform((x0, y0), (x1, y1))
        self.held = [-1, -1]  # object index held by each arm, -1 if none
        self.stage = 0
        self.steps = 0

    @property
    def done(self) -> bool:
        return self.stage >= N_SUBTASKS

    @property
    def score(self) -> float:
        return self.stage / 3.0

    def state_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.arms[0], [self.grips[0]], self.arms[1], [self.grips[1]], self.objects.ravel()]
        )

    def _goal_contains(self, i: int) -> bool:
        x0, y0, x1, y1 = self.task.goal_regions[i]
        x, y = self.objects[i]
        return x0 <= x <= x1 and y0 <= y <= y1

    def step(self, action: np.ndarray) -> None:
        """Apply one 6-dof action: per arm (target x, target y, grip command)."""
        action = np.asarray(action, dtype=float).reshape(6)
        self.steps += 1
        for a in range(2):
            target = action[3 * a : 3 * a + 2]
            grip_cmd = float(np.clip(action[3 * a + 2], 0.0, 1.0))
            delta = target - self.arms[a]
            dist = float(np.linalg.norm(delta))
            if dist > ARM_SPEED:
                delta = delta * (ARM_SPEED / dist)
            self.arms[a] = np.clip(self.arms[a] + delta, -WORKSPACE_HALF, WORKSPACE_HALF)

            closing_edge = grip_cmd < GRIP_CLOSE <= self.grips[a]
            self.grips[a] = grip_cmd

            if self.held[a] >= 0:
                if grip_cmd > GRIP_OPEN:
                    self.held[a] = -1
                else:
                    self.objects[self.held[a]] = self.arms[a]
            elif closing_edge:
                # grasping triggers on the open-to-closed transition only, so a
                # hovering closed gripper cannot latch objects by accident
                free = [
                    i
                    for i in range(N_OBJECTS)
                    if i not in self.held
                    and np.linalg.norm(self.objects[i] - self.arms[a]) < GRASP_RADIUS
                ]
                if free:
                    dists = [np.linalg.norm(self.objects[i] - self.arms[a]) for i in free]
                    self.held[a] = free[int(np.argmin(dists))]
                    self.objects[self.held[a]] = self.arms[a]

        # ordered crediting: a subtask counts only once all earlier ones have
        while self.stage < N_SUBTASKS and self._goal_contains(self.stage) and self.stage not in self.held:
            self.stage += 1

    def observe(self, cam_pose: geom.RigidTransform | None = None) -> np.ndarray:
        pose = cam_pose if cam_pose is not None else robot_camera().pose
        return make_feature(
            self.state_vector(),
            pose,
            self.scene.scene_style,
            self.scene.embodiment,
            self.scene.feature_dim,
            self.rng,
        )


def _region_center(region) -> np.ndarray:
    x0, y0, x1, y1 = region
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])


def _grip_ramp(dist: float) -> float:
    """Anticipatory closing profile: open far away, shut at the grasp point.

    The window is tight enough that the closing threshold is crossed inside
    the grasp radius, where the attach edge can actually latch.
    """
    lo, hi = 0.3 * GRASP_RADIUS, 1.5 * GRASP_RADIUS
    return float(np.clip((dist - lo) / (hi - lo), 0.0, 1.0))


def expert_action(env: Env, rng: np.random.Generator | None = None, jitter: float = 0.0) -> np.ndarray:
    """Scripted controller: fetch the current object, carry it to its goal."""
    action = np.empty(6)
    for a in range(2):
        action[3 * a : 3 * a + 2] = ARM_REST[a]
        action[3 * a + 2] = 1.0
    if env.done:
        return action

    stage = env.stage
    arm = env.task.arm_for_subtask[stage]
    obj = env.objects[stage]
    goal = _region_center(env.task.goal_regions[stage])
    if env.held[arm] == stage:
        inside = env._goal_contains(stage)
        target = goal
        grip = 1.0 if inside and np.linalg.norm(env.arms[arm] - goal) < GRASP_RADIUS else 0.0
    else:
        target = obj
        grip = _grip_ramp(float(np.linalg.norm(env.arms[arm] - obj)))
    if jitter > 0 and rng is not None:
        target = target + rng.normal(0.0, jitter, size=2)
    action[3 * arm : 3 * arm + 2] = target
    action[3 * arm + 2] = grip
    return action


def rollout(env: Env, policy, max_steps: int = 80, exec_horizon: int = 4) -> RolloutReport:
    """Receding-horizon execution: sample a chunk, run a prefix, re-observe."""
    while env.steps < max_steps and not env.done:
        chunk = np.asarray(policy(env.observe()), dtype=float)
        for action in chunk[:exec_horizon]:
            env.step(action)
            if env.done or env.steps >= max_steps:
                break
    done = (env.stage >= 1, env.stage >= 2, env.stage >= 3)
    return RolloutReport(done, env.score, env.steps, env.seed)


# ---------------------------------------------------------------------------
# cameras and hands


def robot_camera() -> geom.CameraModel:
    """The fixed egocentric camera used for every robot sequence."""
    pose = geom.look_at([0.0, -0.85, 1.1], [0.0, 0.0, 0.0])
    return geom.CameraModel(200.0, 200.0, 112.0, 112.0, 224, 224, pose)


def _human_camera_track(n: int, cfg: SceneConfig, rng: np.random.Generator):
    eye = np.array([0.0, -0.85, 1.1]) + rng.uniform(-0.05, 0.05, size=3)
    cams = []
    for i in range(n):
        cams.append(
            geom.CameraModel(200.0, 200.0, 112.0, 112.0, 224, 224, geom.look_at(eye, [0.0, 0.0, 0.0]))
        )
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        if cfg.spike_every and (i + 1) % cfg.spike_every == 0:
            eye = eye + cfg.spike_mag * direction
        else:
            eye = eye + cfg.cam_step * rng.uniform(0.3, 1.0) * direction
    return cams

# filler landmark offsets: four fingers fanned from the wrist (thumb tip and
# index tip are overwritten by the grasp construction)
_FINGER_SPREAD = np.linspace(-0.03, 0.03, 5)


def _hand_points_world(pos: np.ndarray, approach: np.ndarray, closing: np.ndarray,
                       width: float) -> np.ndarray:
    third = np.cross(approach, closing)
    wrist = pos - 0.09 * approach
    pts = np.empty((21, 3))
    pts[WRIST] = wrist
    for finger in range(5):
        base = wrist + 0.02 * approach + _FINGER_SPREAD[finger] * closing
        tip_frac = 0.5 + 0.1 * finger
        for joint in range(4):
            idx = 1 + finger * 4 + joint
            frac = (joint + 1) / 4.0
            pts[idx] = base + frac * tip_frac * 0.07 * approach + 0.005 * joint * third
    pts[THUMB_TIP] = pos - 0.5 * width * closing
    pts[INDEX_TIP] = pos + 0.5 * width * closing
    return pts


def _ee_world(env: Env, arm: int, target: np.ndarray):
    """Ground-truth gripper state for one arm: position, frame, jaw width."""
    holding = env.held[arm] >= 0
    z = 0.05 if holding else 0.03
    pos = np.array([env.arms[arm][0], env.arms[arm][1], z])
    d = target - env.arms[arm]
    n = np.linalg.norm(d)
    tilt = 0.2 * d / n if n > 1e-9 else np.zeros(2)
    approach = np.array([tilt[0], tilt[1], -1.0])
    approach /= np.linalg.norm(approach)
    closing = np.cross(approach, np.array([0.0, 1.0, 0.0]))
    closing /= np.linalg.norm(closing)
    width = float(np.clip(env.grips[arm], 0.0, 1.0)) * DEFAULT_APERTURE_M
    return pos, approach, closing, width


# ---------------------------------------------------------------------------
# clip generation


def gen_human_clip(scene: SceneConfig, seed: int, return_truth: bool = False):
    """Run the noisy scripted agent once and record a first-person clip.

    The bundle carries per-frame features, synthesized hand keypoints (in
    each frame's camera coordinates), the moving camera track and the table
    plane. With ``return_truth`` the generator's ground-truth gripper states
    are returned alongside for oracle tests.
    """
    env = Env(scene, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7001)).generate_state(1)[0])
    cams = _human_camera_track(scene.max_frames, scene, rng)

    features, kp3, kp2, truth_ee = [], [], [], []
    states = []
    n = 0
    for t in range(scene.max_frames):
        cam = cams[t]
        action = expert_action(env, rng, scene.jitter)
        frame_kp3 = np.empty((2, 21, 3))
        frame_kp2 = np.empty((2, 21, 2))
        frame_truth = np.empty((2, 8))
        for a in range(2):
            pos, approach, closing, width = _ee_world(env, a, action[3 * a : 3 * a + 2])
            pts_w = _hand_points_world(pos, approach, closing, width)
            pts_c = cam.pose.apply(pts_w)
            frame_kp3[a] = pts_c
            frame_kp2[a] = [geom.project(p, cam) for p in pts_c]
            r = np.column_stack([approach, closing, np.cross(approach, closing)])
            frame_truth[a, :3] = pos
            frame_truth[a, 3:7] = geom.mat_to_quat(r)
            frame_truth[a, 7] = width / DEFAULT_APERTURE_M
        features.append(
            make_feature(
                env.state_vector(), cam.pose, scene.scene_style, scene.embodiment,
                scene.feature_dim, rng,
            )
        )
        kp3.append(frame_kp3)
        kp2.append(frame_kp2)
        truth_ee.append(frame_truth)
        states.append(env.state_vector())
        env.step(action)
        n = t + 1
        if env.done:
            break

    annotation = TASKS[scene.task].annotations[int(rng.integers(len(TASKS[scene.task].annotations)))]
    bundle = ClipBundle(
        clip_id=f"human-{scene.task}-{seed:06d}",
        source=SOURCE_HUMAN,
        task=scene.task,
        annotation=annotation,
        embedding=embed_language(annotation, scene.embed_dim).astype(np.float32),
        features=np.asarray(features, dtype=np.float32),
        presence=np.ones((n, 2), dtype=bool),
        camera_track=pack_camera_track(cams[:n]),
        plane=np.array([*_TABLE_PLANE[0], _TABLE_PLANE[1]]),
        hands_points3d=np.asarray(kp3, dtype=np.float32),
        hands_points2d=np.asarray(kp2, dtype=np.float32),
        hands_confidence=np.ones((n, 2), dtype=np.float32),
    )
    if return_truth:
        return bundle, {"ee": np.asarray(truth_ee), "state": np.asarray(states), "final_score": env.score}
    return bundle


def demo_env_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, 7002, index)).generate_state(1)[0])


def gen_robot_demos(task: str, n: int, seed: int, scene: SceneConfig | None = None,
                    chunk_len: int = 8, action_noise: float = 0.02) -> list[ClipBundle]:
    """Scripted expert demonstrations in the single robot training scene.

    A little action noise during collection makes the demos cover a tube
    around the nominal paths, which imitation needs to recover from its own
    sampling error.
    """
    if n < 1:
        raise ValueError("need at least one demonstration")
    base = scene or SceneConfig(task=task)
    scene0 = replace(base, task=task, scene_style=0, embodiment=EMBODIMENT_OVERLAY)
    cam = robot_camera()
    annotation = TASKS[task].annotations[0]
    embedding = embed_language(annotation, scene0.embed_dim).astype(np.float32)

    demos = []
    for i in range(n):
        env = Env(scene0, seed=demo_env_seed(seed, i))
        noise_rng = np.random.default_rng(demo_env_seed(seed, i) ^ 0xD1CE)
        features, commands = [], []
        while not env.done and env.steps < scene0.max_frames:
            features.append(env.observe(cam.pose))
            action = expert_action(env)
            commands.append(action)
            executed = action.copy()
            if action_noise > 0:
                executed[[0, 1, 3, 4]] += noise_rng.normal(0, action_noise, size=4)
            env.step(executed)
        t = len(commands)
        commands = np.asarray(commands)
        chunks = np.empty((t, chunk_len, 6), dtype=np.float32)
        for j in range(t):
            idx = np.minimum(np.arange(j, j + chunk_len), t - 1)
            chunks[j] = commands[idx]
        demos.append(
            ClipBundle(
                clip_id=f"robot-{task}-{seed:04d}-{i:03d}",
                source=SOURCE_ROBOT,
                task=task,
                annotation=annotation,
                embedding=embedding,
                features=np.asarray(features, dtype=np.float32),
                presence=np.zeros((t, 2), dtype=bool),
                camera_track=pack_camera_track([cam] * t),
                actions=chunks,
            )
        )
    return demos
