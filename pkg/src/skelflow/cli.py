"""Pipeline driver: `skelflow <subcommand>`.

One process per command. Every command resolves its configuration the same
way: preset, then an optional YAML file, then individual flag overrides,
each stage an overlay on the previous one. Commands that produce files
write into a self-describing run directory (config snapshot + code version,
no timestamps), so a rerun with the same inputs reproduces the outputs
bit for bit.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .autodiff import NumericsError, finite_diff_check
from .bvh import BvhError, parse_bvh, standardize, write_bvh, write_position_bvh
from .checkpoint import CheckpointError, save_arrays
from .configs import (PRESETS, ConfigError, RunConfig, from_dict, load_config,
                      prepare_run_dir, run_root)
from .features import FeatureLayout, decode_direct, encode
from .flow import flow_loss, interpolate, load_checkpoint, sample, train
from .flowedit import edit_text, retarget
from .kinematics import KinematicsError, MotionClip, Skeleton
from .metrics import RetargetReport, evaluate_retarget_pair
from .model import ModelConfig, init_parameters, model_forward
from .synthdata import (SkeletonParams, build_dataset, ground_truth_clip,
                        make_skeleton, padding_prompt, parse_prompt)

_ERRORS = (ConfigError, BvhError, KinematicsError, NumericsError,
           CheckpointError, FileNotFoundError, ValueError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- config plumbing ------------------------------------------------------------------

def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", type=Path, default=None,
                   help="YAML overlay applied on top of the preset")
    p.add_argument("--out-dir", type=Path, default=None,
                   help="run directory (default: $SKELFLOW_RUN_ROOT/<command>)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the command's seed")


def _resolve(args, overrides: Dict) -> RunConfig:
    cfg = PRESETS[args.preset]()
    if args.config is not None:
        cfg = load_config(args.config, base=cfg)
    return from_dict(overrides, base=cfg)


def _out_dir(args, command: str) -> Path:
    return args.out_dir if args.out_dir is not None else run_root() / command


def _set(overrides: Dict, dotted: str, value) -> None:
    if value is None:
        return
    node = overrides
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _weight_flags(p: argparse.ArgumentParser, prefixes: Tuple[str, ...] = ("",)) -> None:
    for pre in prefixes:
        for axis in ("text", "skel", "both"):
            p.add_argument(f"--{pre}w-{axis}", type=float, default=None)


def _weight_overrides(args, overrides: Dict, section: str, prefix: str = "") -> None:
    for axis in ("text", "skel", "both"):
        _set(overrides, f"{section}.{axis}",
             getattr(args, f"{prefix}w_{axis}".replace("-", "_")))


# -- motion input ---------------------------------------------------------------------

def _identity_mapping(joints: int) -> Dict[str, str]:
    names = make_skeleton(joints=joints).topology.names
    return {n: n for n in names}


def _load_mapping(path: Optional[Path], joints: int) -> Dict[str, str]:
    if path is None:
        return _identity_mapping(joints)
    mapping = yaml.safe_load(Path(path).read_text())
    if not isinstance(mapping, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in mapping.items()):
        raise ConfigError(f"{path} must map canonical joint names to source names")
    return mapping


def _read_bvh_motion(path: Path, mapping: Optional[Path], joints: int,
                     unit_scale: Optional[float]) -> Tuple[Skeleton, MotionClip]:
    doc = parse_bvh(Path(path).read_text(), unit_scale=unit_scale)
    return standardize(doc, _load_mapping(mapping, joints))


def _input_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="source motion BVH")
    src.add_argument("--index", type=int, help="source clip index in the synthetic dataset")
    p.add_argument("--mapping", type=Path, default=None,
                   help="canonical->source joint name YAML for BVH input")
    p.add_argument("--unit-scale", type=float, default=None)


def _source_motion(args, cfg: RunConfig, layout: FeatureLayout):
    """(features, skeleton, prompt tokens, fps, item-or-None) for --input/--index."""
    if args.input is not None:
        skel, clip = _read_bvh_motion(args.input, args.mapping, cfg.data.joints, args.unit_scale)
        feats = encode(clip, skel, layout)
        return feats, skel, padding_prompt(cfg.data.prompt_len), clip.fps, None
    bundle = build_dataset(cfg.data)
    if not 0 <= args.index < len(bundle.items):
        raise ConfigError(f"--index {args.index} outside the {len(bundle.items)}-clip dataset")
    it = bundle.items[args.index]
    return it.features, it.skel, it.tokens, it.fps, it


def _target_skeleton(args, cfg: RunConfig) -> Skeleton:
    """Target for retargeting: an explicit BVH or limb scales on the
    canonical skeleton."""
    if args.target_skel is not None:
        skel, _ = _read_bvh_motion(args.target_skel, args.mapping,
                                   cfg.data.joints, args.unit_scale)
        return skel
    return make_skeleton(SkeletonParams(arms=args.arms, legs=args.legs),
                         joints=cfg.data.joints)


# -- subcommands ----------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    overrides: Dict = {}
    _set(overrides, "data.seed", args.seed)
    cfg = _resolve(args, overrides)
    out = prepare_run_dir(_out_dir(args, "synth-data"), cfg)
    bundle = build_dataset(cfg.data)
    (out / "manifest.json").write_text(json.dumps(bundle.manifest(), indent=2) + "\n")
    print(f"{len(bundle.items)} clips ({len(bundle.train_indices)} train / "
          f"{len(bundle.test_indices)} test) -> {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    overrides: Dict = {}
    _set(overrides, "train.seed", args.seed)
    _set(overrides, "train.epochs", args.epochs)
    _set(overrides, "train.batch", args.batch)
    _set(overrides, "train.lr", args.lr)
    cfg = _resolve(args, overrides)
    out = prepare_run_dir(_out_dir(args, "train"), cfg)
    bundle = build_dataset(cfg.data)
    params = init_parameters(cfg.model, np.random.default_rng(cfg.train.seed))
    items = bundle.train_items() if args.split == "train" else bundle.items
    history, _ = train(params, cfg.model, items, bundle.layout, cfg.train, out_dir=out)
    print(f"{len(history)} steps, final loss {sum(history[-1][1:]):.6f} -> {out}")
    return 0


def cmd_sample(args) -> int:
    overrides: Dict = {}
    _set(overrides, "sample.seed", args.seed)
    _set(overrides, "sample.steps", args.steps)
    _set(overrides, "sample.frames", args.frames)
    _weight_overrides(args, overrides, "sample.weights")
    cfg = _resolve(args, overrides)
    params, norm = load_checkpoint(args.ckpt)
    layout = FeatureLayout(cfg.data.joints)
    skel = make_skeleton(SkeletonParams(arms=args.arms, legs=args.legs),
                         joints=cfg.data.joints)
    prompt = parse_prompt(args.prompt, cfg.data.prompt_len)
    s = cfg.sample
    feats, clip = sample(params, cfg.model, layout, norm, skel, prompt,
                         s.frames, weights=s.weights, steps=s.steps,
                         seed=s.seed, fps=s.fps)
    out = prepare_run_dir(_out_dir(args, "sample"), cfg)
    (out / "sample.bvh").write_text(write_bvh(skel, clip))
    save_arrays(out / "features.npz", {"features": feats})
    print(f"{clip.frames} frames -> {out / 'sample.bvh'}")
    return 0


def cmd_edit(args) -> int:
    overrides: Dict = {}
    _set(overrides, "edit.seed", args.seed)
    _set(overrides, "edit.steps", args.steps)
    _set(overrides, "edit.tau_min", args.tau_min)
    if args.frozen_noise:
        _set(overrides, "edit.frozen_noise", True)
    _weight_overrides(args, overrides, "edit.w_src", "src_")
    _weight_overrides(args, overrides, "edit.w_tgt", "tgt_")
    cfg = _resolve(args, overrides)
    params, norm = load_checkpoint(args.ckpt)
    layout = FeatureLayout(cfg.data.joints)
    feats, skel, src_tokens, fps, _ = _source_motion(args, cfg, layout)
    if args.src_prompt is not None:
        src_tokens = parse_prompt(args.src_prompt, cfg.data.prompt_len)
    tgt_tokens = parse_prompt(args.tgt_prompt, cfg.data.prompt_len)

    res = edit_text(params, cfg.model, layout, norm, feats, src_tokens,
                    tgt_tokens, skel, cfg.edit, fps=fps)
    out = prepare_run_dir(_out_dir(args, "edit"), cfg)
    (out / "edit_fk.bvh").write_text(write_bvh(skel, res.clip))
    direct = decode_direct(res.features, layout, fps)
    (out / "edit_direct.bvh").write_text(write_position_bvh(skel.topology, direct, fps))
    save_arrays(out / "features.npz", {"features": res.features})
    res.trace.write_csv(out / "trace.csv")
    print(f"edited {res.clip.frames} frames -> {out / 'edit_fk.bvh'}")
    return 0


def cmd_retarget(args) -> int:
    overrides: Dict = {}
    _set(overrides, "retarget.seed", args.seed)
    _set(overrides, "retarget.steps", args.steps)
    if args.sweep is not None:
        _set(overrides, "retarget.sweep", [int(s) for s in args.sweep.split(",")])
    if args.frozen_noise:
        _set(overrides, "retarget.frozen_noise", True)
    cfg = _resolve(args, overrides)
    params, norm = load_checkpoint(args.ckpt)
    layout = FeatureLayout(cfg.data.joints)
    feats, skel_src, _, fps, item = _source_motion(args, cfg, layout)
    skel_tgt = _target_skeleton(args, cfg)
    # synthetic items carry their generating motion, so the ground truth on
    # the target skeleton is available; BVH inputs fall back to bone scoring
    gt = ground_truth_clip(item, skel_tgt) if item is not None else None

    r = cfg.retarget
    res = retarget(params, cfg.model, layout, norm, feats, skel_src, skel_tgt,
                   steps=r.steps, sweep=r.sweep, seed=r.seed, gt_clip=gt,
                   frozen_noise=r.frozen_noise, fps=fps)
    out = prepare_run_dir(_out_dir(args, "retarget"), cfg)
    (out / "retarget_fk.bvh").write_text(write_bvh(skel_tgt, res.clip_fk))
    (out / "retarget_direct.bvh").write_text(
        write_position_bvh(skel_tgt.topology, res.direct_positions, fps))
    save_arrays(out / "features.npz", {"features": res.features})
    res.trace.write_csv(out / "trace.csv")
    with open(out / "sweep.csv", "w") as fh:
        fh.write("start_step,score\n")
        for k, s in res.sweep_scores:
            fh.write(f"{k},{repr(s)}\n")
    print(f"start step {res.start_step} (tau_min {res.tau_min:.2f}) "
          f"-> {out / 'retarget_fk.bvh'}")
    return 0


def _eval_pairs(bundle, n_pairs: int, seed: int):
    """Deterministic held-out (item, target scales) pairs; the target always
    differs from the source skeleton."""
    choices = bundle.config.scale_choices or (0.8, 1.0, 1.2)
    rng = np.random.default_rng(seed)
    indices = bundle.test_indices or list(range(len(bundle.items)))
    pairs = []
    for _ in range(1000 * n_pairs):
        if len(pairs) == n_pairs:
            break
        it = bundle.items[indices[int(rng.integers(len(indices)))]]
        sp = SkeletonParams(arms=float(rng.choice(choices)),
                            legs=float(rng.choice(choices)))
        if sp != it.skel_params:
            pairs.append((it, sp))
    else:
        raise ConfigError("cannot draw evaluation pairs with distinct skeletons "
                          "(data.scale_choices too narrow)")
    return pairs


def cmd_eval(args) -> int:
    overrides: Dict = {}
    _set(overrides, "retarget.steps", args.steps)
    if args.sweep is not None:
        _set(overrides, "retarget.sweep", [int(s) for s in args.sweep.split(",")])
    cfg = _resolve(args, overrides)
    params, norm = load_checkpoint(args.ckpt)
    bundle = build_dataset(cfg.data)
    layout = bundle.layout
    seed = args.seed if args.seed is not None else 0
    rows = []
    r = cfg.retarget
    for i, (item, sp) in enumerate(_eval_pairs(bundle, args.pairs, seed)):
        skel_tgt = make_skeleton(sp, joints=cfg.data.joints)
        gt = ground_truth_clip(item, skel_tgt)
        res = retarget(params, cfg.model, layout, norm, item.features,
                       item.skel, skel_tgt, steps=r.steps, sweep=r.sweep,
                       seed=r.seed, gt_clip=gt, frozen_noise=r.frozen_noise,
                       fps=item.fps)
        src_clip = ground_truth_clip(item, item.skel)
        rows.append(evaluate_retarget_pair(res.clip_fk, res.direct_positions,
                                           src_clip, skel_tgt, gt, pair=f"pair{i:02d}"))
    report = RetargetReport.from_pairs(rows)
    out = prepare_run_dir(_out_dir(args, "eval"), cfg)
    report.write_csv(out / "report.csv")
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def cmd_convert(args) -> int:
    cfg = _resolve(args, {})
    skel, clip = _read_bvh_motion(args.input, args.mapping, cfg.data.joints,
                                  args.unit_scale)
    out = prepare_run_dir(_out_dir(args, "convert"), cfg)
    target = out / (Path(args.input).stem + "_canonical.bvh")
    target.write_text(write_bvh(skel, clip))
    print(f"{clip.frames} frames, {skel.joints} joints -> {target}")
    return 0


def cmd_gradcheck(args) -> int:
    layout = FeatureLayout(args.joints)
    mcfg = ModelConfig(joints=args.joints, feat_dim=layout.total_dim,
                       hidden_dim=args.hidden, n_layers=args.layers,
                       frame_heads=4, joint_heads=2, dropout=0.0,
                       prompt_len=4)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    params = init_parameters(mcfg, rng, zero_init=False)
    x1 = rng.standard_normal((args.batch, args.frames, mcfg.feat_dim))
    x0 = rng.standard_normal(x1.shape)
    tau = rng.random(args.batch)
    x_tau = interpolate(x0, x1, tau)
    tokens = rng.integers(0, mcfg.vocab_size, (args.batch, mcfg.prompt_len))
    skel = rng.standard_normal((args.batch, mcfg.skel_dim))

    def loss_fn():
        pred = model_forward(params, x_tau, tau, tokens, skel, mcfg)
        return flow_loss(pred, x1, layout)

    report = finite_diff_check(loss_fn, params, eps=args.eps,
                               top_elements=args.top,
                               random_elements=args.random_elements)
    print(f"checked {report.checked_elements} elements over "
          f"{len(report.per_parameter_errors)} parameters")
    print(f"max relative error {report.max_rel_error:.3e} "
          f"(worst: {report.worst_parameter})")
    if not report.ok(args.threshold):
        print(f"error: gradient check failed at threshold {args.threshold}",
              file=sys.stderr)
        return 1
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelflow",
        description="rectified-flow motion engine: generate, edit, retarget")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialize the synthetic dataset manifest")
    _common_flags(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the flow model")
    _common_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--split", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate motion from noise")
    _common_flags(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--arms", type=float, default=1.0)
    p.add_argument("--legs", type=float, default=1.0)
    _weight_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="text-edit an existing motion")
    _common_flags(p)
    p.add_argument("--ckpt", type=Path, required=True)
    _input_flags(p)
    p.add_argument("--src-prompt", default=None,
                   help="source prompt (default: the dataset item's own)")
    p.add_argument("--tgt-prompt", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--tau-min", type=float, default=None)
    p.add_argument("--frozen-noise", action="store_true")
    _weight_flags(p, ("src-", "tgt-"))
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("retarget", help="move a motion onto another skeleton")
    _common_flags(p)
    p.add_argument("--ckpt", type=Path, required=True)
    _input_flags(p)
    p.add_argument("--target-skel", type=Path, default=None,
                   help="target skeleton BVH (default: canonical with --arms/--legs)")
    p.add_argument("--arms", type=float, default=1.0)
    p.add_argument("--legs", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--sweep", default=None, help="comma-separated start steps")
    p.add_argument("--frozen-noise", action="store_true")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("eval", help="retargeting report over held-out pairs")
    _common_flags(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--sweep", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="standardize a BVH to the canonical skeleton")
    _common_flags(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--mapping", type=Path, default=None)
    p.add_argument("--unit-scale", type=float, default=None)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--joints", type=int, default=4)
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--random-elements", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


if __name__ == "__main__":
    sys.exit(main())
