"""Command-line entry point: data pipeline, training, studies, figures.

Every command writes its artifacts under --out, next to a config.txt
echoing the exact resolved options, and prints a one-line summary. Exit
codes: 0 success, 1 validation error, 2 data error (checksum, version or
truncation).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data, experiments, nn, pipeline, plots, simenv, train
from .data import ChecksumMismatch, DatasetManifest, TruncatedFile, VersionMismatch
from .filtering import FilterConfig, FilterReport
from .labels import LabelConfig
from .retarget import SmoothingConfig
from .simenv import SceneConfig


class CliError(Exception):
    """User-facing validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; flag problems are validation
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_config(out_dir: str, args: argparse.Namespace) -> None:
    lines = [f"{k} {v}" for k, v in sorted(vars(args).items()) if k != "func"]
    data.atomic_write_text(os.path.join(out_dir, "config.txt"), "\n".join(lines) + "\n")


def _prepare_out(args: argparse.Namespace) -> str:
    os.makedirs(args.out, exist_ok=True)
    _write_config(args.out, args)
    return args.out


def _load_dataset(path: str):
    if not os.path.exists(path):
        raise CliError(f"manifest not found: {path}")
    return data.load_bundles(path)


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as e:
        raise CliError(f"bad seed list {text!r}") from e


def _bench(args: argparse.Namespace) -> experiments.BenchmarkConfig:
    cfg = experiments.BenchmarkConfig(task=args.task)
    if getattr(args, "clips", None) is not None:
        cfg = replace(cfg, n_human_clips=args.clips)
    if getattr(args, "demos", None) is not None:
        cfg = replace(cfg, n_robot_demos=args.demos)
    if getattr(args, "rollouts", None) is not None:
        cfg = replace(cfg, n_rollouts=args.rollouts)
    tc = cfg.train
    if getattr(args, "pretrain_steps", None) is not None:
        tc = replace(tc, pretrain_steps=args.pretrain_steps)
    if getattr(args, "cotrain_steps", None) is not None:
        tc = replace(tc, cotrain_steps=args.cotrain_steps)
    if getattr(args, "lam", None) is not None:
        tc = replace(tc, lam=args.lam)
    return replace(cfg, train=tc)


# ---------------------------------------------------------------------------
# pipeline commands


def cmd_gen_data(args) -> int:
    out = _prepare_out(args)
    rng_tasks = list(simenv.TASKS)
    human = []
    for i in range(args.clips):
        scene = SceneConfig(
            task=rng_tasks[i % len(rng_tasks)],
            scene_style=simenv.HUMAN_STYLE_BASE + 1000 * args.seed + i,
            embodiment=simenv.EMBODIMENT_OVERLAY if args.overlay else simenv.EMBODIMENT_HAND,
            feature_dim=args.feature_dim,
            embed_dim=args.embed_dim,
            spike_every=args.spike_every,
        )
        clip = simenv.gen_human_clip(scene, seed=experiments._human_seed(args.seed, i))
        clip.clip_id = f"{clip.clip_id}-{i:04d}"
        human.append(clip)
    data.save_dataset(human, os.path.join(out, "human_raw"),
                      feature_dim=args.feature_dim, embed_dim=args.embed_dim)
    robots = simenv.gen_robot_demos(
        args.task, args.demos, args.seed,
        SceneConfig(task=args.task, feature_dim=args.feature_dim, embed_dim=args.embed_dim),
    )
    data.save_dataset(robots, os.path.join(out, "robot"),
                      feature_dim=args.feature_dim, embed_dim=args.embed_dim)
    print(f"gen-data: {len(human)} human clips, {len(robots)} robot demos -> {out}")
    return 0


def cmd_robotize(args) -> int:
    manifest, bundles = _load_dataset(args.inp)
    out = _prepare_out(args)
    smoothing = SmoothingConfig(args.position_window, args.orientation_window, args.grip_window)
    done = [pipeline.robotize_bundle(b, smoothing, args.aperture) if b.source == "human" else b
            for b in bundles]
    data.save_dataset(done, out, horizon=manifest.horizon, feature_dim=manifest.feature_dim,
                      embed_dim=manifest.embed_dim, chunk_len=manifest.chunk_len,
                      action_dim=manifest.action_dim)
    print(f"robotize: {len(done)} clips -> {out}")
    return 0


def cmd_label(args) -> int:
    manifest, bundles = _load_dataset(args.inp)
    out = _prepare_out(args)
    cfg = LabelConfig(horizon=args.horizon, normalize=not args.no_normalize)
    done = [pipeline.label_bundle(b, cfg) if b.source == "human" else b for b in bundles]
    data.save_dataset(done, out, horizon=cfg.horizon, feature_dim=manifest.feature_dim,
                      embed_dim=manifest.embed_dim, chunk_len=manifest.chunk_len,
                      action_dim=manifest.action_dim)
    print(f"label: {len(done)} clips labeled with horizon {cfg.horizon} -> {out}")
    return 0


def cmd_filter(args) -> int:
    manifest, bundles = _load_dataset(args.inp)
    out = _prepare_out(args)
    cfg = FilterConfig(args.max_translation, args.max_rotation, args.workspace_radius)
    total = FilterReport()
    done = []
    for b in bundles:
        if b.source != "human":
            done.append(b)
            continue
        filtered, report = pipeline.filter_bundle(b, cfg)
        total = total.merge(report)
        done.append(filtered)
    m = data.save_dataset(done, out, horizon=manifest.horizon, feature_dim=manifest.feature_dim,
                          embed_dim=manifest.embed_dim, chunk_len=manifest.chunk_len,
                          action_dim=manifest.action_dim)
    m.filter_report = total
    m.save(os.path.join(out, "manifest.txt"))
    print(f"filter: kept {total.kept_frames}/{total.total_frames} frames -> {out}")
    print(total.summary())
    return 0


# ---------------------------------------------------------------------------
# training commands


def cmd_pretrain(args) -> int:
    manifest, bundles = _load_dataset(args.human)
    out = _prepare_out(args)
    human = train.HumanFrames.from_bundles(bundles)
    cfg = replace(experiments.BenchmarkConfig().train, pretrain_steps=args.steps,
                  lr=args.lr, batch_human=args.batch, seed=args.seed)
    model = nn.ModelConfig(feature_dim=manifest.feature_dim, embed_dim=manifest.embed_dim,
                           horizon=manifest.horizon, chunk_len=manifest.chunk_len,
                           action_dim=manifest.action_dim)
    params = nn.ModelParams.init(model, seed=args.seed)
    params, log = train.pretrain(human, params, cfg,
                                 checkpoint_path=os.path.join(out, "checkpoint.ckpt"))
    data.atomic_write_text(os.path.join(out, "trainlog.csv"), log.to_csv())
    final = log.records[-1][1] if log.records else float("nan")
    print(f"pretrain: {cfg.pretrain_steps} steps, final aux loss {final:.6g} -> {out}")
    return 0


def cmd_cotrain(args) -> int:
    _, robot_bundles = _load_dataset(args.robot)
    robot = train.RobotFrames.from_bundles(robot_bundles)
    if args.finetune:
        human = train.HumanFrames.from_bundles([])
        manifest = DatasetManifest.load(args.robot)
    else:
        if not args.human:
            raise CliError("co-training needs --human (or pass --finetune)")
        manifest, human_bundles = _load_dataset(args.human)
        human = train.HumanFrames.from_bundles(human_bundles)
    out = _prepare_out(args)

    cfg = replace(experiments.BenchmarkConfig().train, cotrain_steps=args.steps, lr=args.lr,
                  batch_human=args.batch_human, batch_robot=args.batch_robot, seed=args.seed,
                  lam=1.0 if args.finetune else args.lam)
    if args.init:
        if not os.path.exists(args.init):
            raise CliError(f"checkpoint not found: {args.init}")
        params, _, _ = nn.load_checkpoint(args.init)
    else:
        model = nn.ModelConfig(feature_dim=manifest.feature_dim, embed_dim=manifest.embed_dim,
                               horizon=manifest.horizon, chunk_len=manifest.chunk_len,
                               action_dim=manifest.action_dim)
        params = nn.ModelParams.init(model, seed=args.seed)
    params, log = train.cotrain(human, robot, params, cfg,
                                checkpoint_path=os.path.join(out, "checkpoint.ckpt"))
    data.atomic_write_text(os.path.join(out, "trainlog.csv"), log.to_csv())
    mode = "finetune" if args.finetune else f"cotrain lam={cfg.lam:g}"
    print(f"{mode}: {cfg.cotrain_steps} steps -> {out}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    params, _, _ = nn.load_checkpoint(args.checkpoint)
    out = _prepare_out(args)
    scene = SceneConfig(task=args.task, scene_style=args.style,
                        feature_dim=params.cfg.feature_dim, embed_dim=params.cfg.embed_dim)
    result = train.evaluate(params, scene, args.rollouts, seed=args.seed,
                            max_steps=args.max_steps)
    lines = ["episode,score,subtask1,subtask2,subtask3,steps,seed"]
    for i, r in enumerate(result.reports):
        d = r.subtask_done
        lines.append(f"{i},{r.score!r},{int(d[0])},{int(d[1])},{int(d[2])},{r.steps},{r.seed}")
    data.atomic_write_text(os.path.join(args.out, "rollouts.csv"), "\n".join(lines) + "\n")
    print(f"eval: task={args.task} style={args.style} mean {result.mean:.3f} "
          f"sem {result.sem:.3f} over {args.rollouts} rollouts -> {out}")
    return 0


# ---------------------------------------------------------------------------
# study commands


def cmd_ablate(args) -> int:
    cfg = _bench(args)
    seeds = _seeds(args.seeds)
    out = _prepare_out(args)
    rows = experiments.ablation_grid(cfg, seeds, eval_id=args.eval_id)
    by_cond: dict[str, list[float]] = {}
    for name, _, _ in experiments.ABLATION_CONDITIONS:
        by_cond[name] = [r.ood_mean for r in rows if r.condition == name]
    csv_text = plots.results_csv(by_cond, "condition")
    data.atomic_write_text(os.path.join(out, "ablate.csv"), csv_text)
    plots.render_csv(os.path.join(out, "ablate.csv"), os.path.join(out, "ablate.svg"),
                     title=f"overlay/co-training ablation ({args.task}, OOD)")
    if args.eval_id:
        by_scene: dict[str, list[float]] = {}
        for name, _, _ in experiments.ABLATION_CONDITIONS:
            sel = [r for r in rows if r.condition == name]
            by_scene[f"{name}/id"] = [r.id_mean for r in sel]
            by_scene[f"{name}/ood"] = [r.ood_mean for r in sel]
        text = plots.results_csv(by_scene, "condition_scene")
        data.atomic_write_text(os.path.join(out, "id_vs_ood.csv"), text)
        plots.render_csv(os.path.join(out, "id_vs_ood.csv"), os.path.join(out, "id_vs_ood.svg"),
                         title=f"ID vs OOD ({args.task})")
    print(f"ablate: {len(rows)} runs over seeds {seeds} -> {out}")
    return 0


def cmd_scale_study(args) -> int:
    cfg = _bench(args)
    seeds = _seeds(args.seeds)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    out = _prepare_out(args)
    rows = experiments.scale_study(cfg, seeds, fractions)
    by_frac: dict[str, list[float]] = {}
    for f in fractions:
        name = f"fraction={f:g}"
        by_frac[name] = [r.ood_mean for r in rows if r.condition == name]
    csv_text = plots.results_csv(by_frac, "fraction")
    data.atomic_write_text(os.path.join(out, "scale_study.csv"), csv_text)
    plots.render_csv(os.path.join(out, "scale_study.csv"), os.path.join(out, "scale_study.svg"),
                     title=f"human-data scaling ({args.task}, OOD)")
    print(f"scale-study: fractions {fractions} over seeds {seeds} -> {out}")
    return 0


def cmd_plot(args) -> int:
    if not os.path.exists(args.inp):
        raise CliError(f"input CSV not found: {args.inp}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    plots.render_csv(args.inp, args.out, title=args.title)
    print(f"plot: {args.inp} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="egopolicy", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic human clips and robot demos")
    g.add_argument("--out", required=True)
    g.add_argument("--task", default="stack_pots", choices=sorted(simenv.TASKS))
    g.add_argument("--clips", type=int, default=96)
    g.add_argument("--demos", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--feature-dim", type=int, default=128)
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--spike-every", type=int, default=0)
    g.add_argument("--overlay", dest="overlay", action="store_true", default=True)
    g.add_argument("--no-overlay", dest="overlay", action="store_false")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("robotize", help="retarget hands to gripper trajectories")
    r.add_argument("--in", dest="inp", required=True, help="input dataset manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--position-window", type=int, default=5)
    r.add_argument("--orientation-window", type=int, default=5)
    r.add_argument("--grip-window", type=int, default=3)
    r.add_argument("--aperture", type=float, default=0.085)
    r.set_defaults(func=cmd_robotize)

    l = sub.add_parser("label", help="generate motion-compensated waypoint labels")
    l.add_argument("--in", dest="inp", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--horizon", type=int, default=16)
    l.add_argument("--no-normalize", action="store_true")
    l.set_defaults(func=cmd_label)

    f = sub.add_parser("filter", help="drop frames with camera motion or bad actions")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--max-translation", type=float, default=0.05)
    f.add_argument("--max-rotation", type=float, default=0.5)
    f.add_argument("--workspace-radius", type=float, default=1.0)
    f.set_defaults(func=cmd_filter)

    pt = sub.add_parser("pretrain", help="pretrain the encoder on human frames")
    pt.add_argument("--human", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--steps", type=int, default=1500)
    pt.add_argument("--batch", type=int, default=32)
    pt.add_argument("--lr", type=float, default=1e-3)
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(func=cmd_pretrain)

    ct = sub.add_parser("cotrain", help="co-train (or --finetune) the policy")
    ct.add_argument("--robot", required=True)
    ct.add_argument("--human", default="")
    ct.add_argument("--init", default="", help="checkpoint to start from")
    ct.add_argument("--out", required=True)
    ct.add_argument("--lam", type=float, default=10.0)
    ct.add_argument("--steps", type=int, default=4000)
    ct.add_argument("--batch-human", type=int, default=32)
    ct.add_argument("--batch-robot", type=int, default=32)
    ct.add_argument("--lr", type=float, default=1e-3)
    ct.add_argument("--seed", type=int, default=0)
    mode = ct.add_mutually_exclusive_group()
    mode.add_argument("--cotrain", dest="finetune", action="store_false", default=False)
    mode.add_argument("--finetune", dest="finetune", action="store_true")
    ct.set_defaults(func=cmd_cotrain)

    e = sub.add_parser("eval", help="score a checkpoint over seeded rollouts")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--task", default="stack_pots", choices=sorted(simenv.TASKS))
    e.add_argument("--style", type=int, default=1)
    e.add_argument("--rollouts", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-steps", type=int, default=80)
    e.set_defaults(func=cmd_eval)

    def add_study_args(sp):
        sp.add_argument("--out", required=True)
        sp.add_argument("--task", default="stack_pots", choices=sorted(simenv.TASKS))
        sp.add_argument("--seeds", default="0,1,2")
        sp.add_argument("--clips", type=int, default=None)
        sp.add_argument("--demos", type=int, default=None)
        sp.add_argument("--rollouts", type=int, default=None)
        sp.add_argument("--pretrain-steps", type=int, default=None)
        sp.add_argument("--cotrain-steps", type=int, default=None)
        sp.add_argument("--lam", type=float, default=None)

    a = sub.add_parser("ablate", help="run the 2x2 overlay/co-training grid")
    add_study_args(a)
    a.add_argument("--eval-id", action="store_true", help="also score the training scene")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("scale-study", help="vary the human-video fraction")
    add_study_args(s)
    s.add_argument("--fractions", default="0,0.1,0.5,1.0")
    s.set_defaults(func=cmd_scale_study)

    pl = sub.add_parser("plot", help="render a results CSV as an SVG bar chart")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)

    for sp in sub.choices.values():
        sp.add_argument("--config", default="",
                        help="key/value file supplying options not given as flags")
    return p


def _apply_config_file(parser: _Parser, args: argparse.Namespace, argv: list[str]) -> None:
    """Fill options from a config file; explicit flags always win."""
    if not getattr(args, "config", ""):
        return
    if not os.path.exists(args.config):
        raise CliError(f"config file not found: {args.config}")
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    actions = {a.dest: a for a in sub_action.choices[args.command]._actions}
    explicit = {tok[2:].split("=", 1)[0].replace("-", "_") for tok in argv if tok.startswith("--")}
    with open(args.config, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition(" ")
            dest = key.replace("-", "_")
            raw = raw.strip()
            if dest in ("config", "func") or dest in explicit:
                continue
            if dest not in actions:
                raise CliError(f"config file sets unknown option {key!r}")
            act = actions[dest]
            if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value: object = raw.lower() in ("1", "true", "yes", "on")
            elif act.type is not None:
                value = act.type(raw)
            else:
                value = raw
            setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    tokens = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(tokens)
        _apply_config_file(parser, args, tokens)
        return args.func(args)
    except SystemExit as e:  # argparse validation failures
        return int(e.code or 0)
    except CliError as e:
        print(f"egopolicy: error: {e}", file=sys.stderr)
        return 1
    except (ChecksumMismatch, VersionMismatch, TruncatedFile) as e:
        print(f"egopolicy: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
