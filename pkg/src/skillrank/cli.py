"""Command-line entry point: synth, train, eval, gradcheck, visualize.

Every setting resolves from built-in defaults, then a ``key = value`` config
file, then ``--set KEY=VALUE`` pairs, then explicit flags.  Each run writes
the resolved settings to ``resolved_config.txt`` in its output directory;
``skillrank --config that/file`` replays the run.

Exit codes: 0 success, 1 failed check, 2 usage or validation error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import ShapeError
from .data import (
    ClipFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_clips,
    load_pairs,
    read_clip,
    write_dataset,
)
from .layers import FormatError, load_params, save_params
from .model import AssessmentModel, ModelConfig, Variant, score_video
from .ranking import DivergenceError, TrainConfig, train, video_scores

logger = logging.getLogger("skillrank")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
COMMANDS = ("synth", "train", "eval", "gradcheck", "visualize")
MODEL_CMDS = ("train", "eval", "visualize")


class UsageError(Exception):
    """Bad arguments, configuration or inputs (exit code 2)."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).replace(" ", "").strip("()").split(",") if x)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, Variant):
        return value.value
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Setting:
    key: str
    parse: Callable
    default: object
    commands: tuple[str, ...]
    help: str = ""


_SPEC = SyntheticSpec()
_MODEL = ModelConfig()
_TRAIN = TrainConfig()

SETTINGS = [
    Setting("seed", int, 0, COMMANDS, "master seed"),
    Setting("out", str, None, COMMANDS, "output directory"),
    # synthetic data
    *(Setting(name, parse, getattr(_SPEC, name), ("synth",))
      for name, parse in [("videos", int), ("t_min", int), ("t_max", int), ("height", int),
                          ("width", int), ("stream_channels", _ints), ("patch", int),
                          ("signal_channels", int), ("signal_stream", int), ("gain", float),
                          ("noise", float), ("background", float), ("delta", float)]),
    # inputs
    Setting("data", str, None, ("train", "eval"), "directory written by synth"),
    Setting("clips", str, None, ("train", "eval"), "directory of .fclp clips"),
    Setting("pairs", str, None, ("train", "eval"), "pair annotation file"),
    Setting("params", str, None, ("eval", "visualize"), "parameter file"),
    Setting("clip", str, None, ("visualize",), "one .fclp clip"),
    # model
    Setting("variant", Variant, Variant.FULL, MODEL_CMDS + ("gradcheck",)),
    Setting("segments", int, _MODEL.segments, MODEL_CMDS, "segments per video (N)"),
    *(Setting(name, int, getattr(_MODEL, name), MODEL_CMDS)
      for name in ("fused_channels", "fusion_hidden", "fusion_kernel", "fusion_padding",
                   "hidden", "attend")),
    # training
    Setting("epochs", int, _TRAIN.epochs, ("train",)),
    Setting("lr", float, _TRAIN.lr, ("train",)),
    Setting("momentum", float, _TRAIN.momentum, ("train",)),
    Setting("weight_decay", float, _TRAIN.weight_decay, ("train",)),
    Setting("margin", float, _TRAIN.margin, ("train",), "hinge margin (epsilon)"),
    Setting("batch_pairs", int, _TRAIN.batch_pairs, ("train",)),
    Setting("kfold", int, 0, ("train",), "k-fold cross-validation over videos (0: off)"),
]
SETTING = {s.key: s for s in SETTINGS}

# flags that map straight onto settings
FLAGS = {
    "seed": "--seed", "out": "--out", "epochs": "--epochs", "lr": "--lr", "margin": "--margin",
    "segments": "--segments", "kfold": "--kfold", "variant": "--variant", "data": "--data",
    "clips": "--clips", "pairs": "--pairs", "params": "--params", "clip": "--clip",
    "videos": "--videos", "patch": "--patch", "gain": "--gain", "noise": "--noise",
}


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key] = value.strip()
    return values


def resolve(command: str, file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Defaults < config file < overrides, parsed and restricted to ``command``."""
    resolved = {s.key: s.default for s in SETTINGS if command in s.commands}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key == "command":
                continue
            if key not in SETTING:
                raise UsageError(f"unknown setting {key!r}")
            if key not in resolved:
                continue  # belongs to another command; keeps replayed configs usable
            if raw == "":
                resolved[key] = SETTING[key].default
                continue
            try:
                resolved[key] = SETTING[key].parse(raw)
            except ValueError as e:
                raise UsageError(f"bad value for {key}: {raw!r} ({e})") from e
    return resolved


def write_resolved(command: str, cfg: dict, out: Path, extra: Optional[dict] = None) -> None:
    lines = [f"command = {command}"] + [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    lines += [f"# {k} = {v}" for k, v in (extra or {}).items()]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(cfg: dict, required: bool = True) -> Optional[Path]:
    if cfg["out"] is None:
        if required:
            raise UsageError("--out is required")
        return None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e.strerror}") from e
    return out


def model_config(cfg: dict, stream_channels: tuple[int, ...]) -> ModelConfig:
    try:
        return ModelConfig(stream_channels=stream_channels, fused_channels=cfg["fused_channels"],
                           fusion_hidden=cfg["fusion_hidden"], fusion_kernel=cfg["fusion_kernel"],
                           fusion_padding=cfg["fusion_padding"], hidden=cfg["hidden"],
                           attend=cfg["attend"], segments=cfg["segments"], variant=cfg["variant"])
    except ValueError as e:
        raise UsageError(str(e)) from e


def _inputs(cfg: dict):
    data = Path(cfg["data"]) if cfg["data"] else None
    clips_dir = cfg["clips"] or (data / "clips" if data else None)
    pairs_path = cfg["pairs"] or (data / "pairs.txt" if data else None)
    if clips_dir is None or pairs_path is None:
        raise UsageError("need --data, or both --clips and --pairs")
    if not Path(clips_dir).is_dir():
        raise UsageError(f"clip directory {clips_dir} not found")
    if not Path(pairs_path).is_file():
        raise UsageError(f"pair file {pairs_path} not found")
    try:
        pairs = load_pairs(pairs_path)
        clips = load_clips(clips_dir, pairs.video_ids())
    except (ValueError, OSError) as e:
        raise UsageError(str(e)) from e
    if len(pairs) == 0:
        raise UsageError(f"{pairs_path} holds no usable (non-tie) pairs")
    channels = {c.stream_channels for c in clips.values()}
    if len(channels) != 1:
        raise UsageError("clips disagree in their stream channel counts")
    return clips, pairs, channels.pop()


def _load_model(cfg: dict, stream_channels: tuple[int, ...]) -> AssessmentModel:
    if cfg["params"] is None:
        raise UsageError("--params is required")
    try:
        params = load_params(cfg["params"])
    except (OSError, FormatError) as e:
        raise UsageError(f"cannot load parameters: {e}") from e
    model = AssessmentModel(model_config(cfg, stream_channels), params)
    try:
        model.check()
    except ShapeError as e:
        raise UsageError(f"parameters do not match the model config: {e}") from e
    return model


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    keys = ("videos", "t_min", "t_max", "height", "width", "stream_channels", "patch",
            "signal_channels", "signal_stream", "gain", "noise", "background", "delta")
    try:
        spec = SyntheticSpec(seed=cfg["seed"], **{k: cfg[k] for k in keys})
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out_dir(cfg)
    dataset = generate_synthetic(spec)
    try:
        write_dataset(dataset, out)
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e.strerror}") from e
    write_resolved("synth", cfg, out)
    print(f"wrote {len(dataset.clips)} clips, {len(dataset.pairs)} pairs "
          f"({len(dataset.labels) - len(dataset.pairs)} ties dropped) to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    clips, pairs, channels = _inputs(cfg)
    mconf = model_config(cfg, channels)
    tconf = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], momentum=cfg["momentum"],
                        weight_decay=cfg["weight_decay"], margin=cfg["margin"],
                        batch_pairs=cfg["batch_pairs"], seed=cfg["seed"])
    if tconf.epochs < 0 or tconf.batch_pairs < 1 or tconf.lr <= 0:
        raise UsageError("need epochs >= 0, batch_pairs >= 1 and lr > 0")
    out = _out_dir(cfg)
    write_resolved("train", cfg, out)
    if cfg["kfold"]:
        return _train_kfold(cfg, clips, pairs, mconf, tconf, out)
    model = AssessmentModel.init(mconf, seed=cfg["seed"])
    report = train(pairs, model, clips, tconf,
                   on_epoch=lambda r: logger.info(r.line()))
    save_params(model.params, out / "params.skpm")
    report.write(out / "train_report.txt")
    print(f"trained {mconf.variant.value} for {tconf.epochs} epochs on {len(pairs)} pairs; "
          f"train accuracy {report.final_accuracy:.4f}")
    return EXIT_OK


def _train_kfold(cfg, clips, pairs, mconf, tconf, out: Path) -> int:
    from .benchmark import cross_validate

    k = cfg["kfold"]
    if not 2 <= k <= len(pairs.video_ids()):
        raise UsageError(f"cannot split {len(pairs.video_ids())} videos into {k} folds")
    cv = cross_validate(clips, pairs, mconf, tconf, k, cfg["seed"], keep_models=True)
    for fold in cv.folds:
        fold_dir = out / f"fold{fold.fold}"
        fold_dir.mkdir(exist_ok=True)
        save_params(fold.model.params, fold_dir / "params.skpm")
        fold.report.write(fold_dir / "train_report.txt")
    lines = cv.lines()
    (out / "cv_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_eval(cfg: dict, per_pair: bool = False) -> int:
    clips, pairs, channels = _inputs(cfg)
    model = _load_model(cfg, channels)
    try:
        scores = video_scores(model, clips, pairs.video_ids())
    except ShapeError as e:
        raise UsageError(str(e)) from e
    lines = []
    if per_pair:
        for p in pairs:
            s_a, s_b = scores[p.id_a], scores[p.id_b]
            lines.append(f"{p.id_a},{p.id_b},{s_a:.6f},{s_b:.6f},{int(s_a > s_b)}")
    correct = sum(scores[p.id_a] > scores[p.id_b] for p in pairs)
    lines += [f"pairs: {len(pairs)}", f"correct: {correct}",
              f"accuracy: {correct / len(pairs):.4f}"]
    print("\n".join(lines))
    out = _out_dir(cfg, required=False)
    if out is not None:
        (out / "eval_report.txt").write_text("\n".join(lines) + "\n")
        write_resolved("eval", cfg, out)
    return EXIT_OK


def cmd_gradcheck(cfg: dict, corrupt: Optional[dict[str, float]] = None) -> int:
    from .gradcheck import run_model_check, run_op_checks

    out = _out_dir(cfg, required=False)
    outcomes = run_op_checks(cfg["seed"])
    lines = [o.line() for o in outcomes]
    model = run_model_check(cfg["seed"], ModelConfig.tiny(variant=cfg["variant"]), corrupt=corrupt)
    outcomes.append(model)
    lines += [f"{'PASS' if err < model.tol else 'FAIL'} {model.component + ' ' + name:<40} "
              f"err={err:.3e} tol={model.tol:.0e}" for name, err in model.result.errors.items()]
    ok = all(o.passed for o in outcomes)
    lines.append(f"gradcheck: {'PASS' if ok else 'FAIL'} (worst model tensor "
                 f"{model.result.worst()[0]}: {model.result.max_error:.3e})")
    print("\n".join(lines))
    if out is not None:
        (out / "gradcheck_report.txt").write_text("\n".join(lines) + "\n")
        write_resolved("gradcheck", cfg, out)
    return EXIT_OK if ok else EXIT_FAIL


def heatmap_image(alpha: np.ndarray) -> np.ndarray:
    """8-bit grayscale with the largest weight mapped to 255."""
    peak = alpha.max()
    scaled = alpha / peak if peak > 0 else np.zeros_like(alpha)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def cmd_visualize(cfg: dict) -> int:
    from PIL import Image

    if not Variant(cfg["variant"]).has_attention:
        raise UsageError("the no-attention variant pools by plain averaging and has no "
                         "attention map to visualize")
    if cfg["clip"] is None:
        raise UsageError("--clip is required")
    try:
        clip = read_clip(cfg["clip"])
    except (OSError, ClipFormatError) as e:
        raise UsageError(f"cannot read clip: {e}") from e
    model = _load_model(cfg, clip.stream_channels)
    out = _out_dir(cfg)
    try:
        _, trace = score_video(clip, model)
    except ShapeError as e:
        raise UsageError(str(e)) from e
    from .benchmark import attention_on_input_grid
    from .data import sample_segments

    frames = sample_segments(clip.timesteps, model.config.segments, "test")
    gh, gw = trace.grid
    # input_row/input_col locate the peak after spreading each attention cell
    # evenly over the input cells it sees
    argmax = ["# timestep frame row col weight input_row input_col"]
    for t, alpha in enumerate(trace.alpha):
        grid = alpha.reshape(gh, gw)
        np.savetxt(out / f"alpha_t{t:02d}.txt", grid, fmt="%.8e")
        Image.fromarray(heatmap_image(grid), mode="L").save(out / f"alpha_t{t:02d}.png")
        r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
        spread = attention_on_input_grid(model.config, alpha, clip.grid)
        ir, ic = np.unravel_index(int(np.argmax(spread)), spread.shape)
        argmax.append(f"{t} {frames[t]} {r} {c} {grid[r, c]:.6f} {ir} {ic}")
    (out / "argmax.txt").write_text("\n".join(argmax) + "\n")
    (out / "heatmap_meta.txt").write_text(
        f"clip = {clip.video_id}\ngrid = {gh},{gw}\ntimesteps = {len(trace.alpha)}\n"
        "scaling = per-timestep max (largest weight -> 255, zero -> 0)\n")
    write_resolved("visualize", cfg, out)
    print(f"wrote {len(trace.alpha)} attention maps ({gh}x{gw}) to {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _parse_set(items: list[str]) -> dict[str, str]:
    values = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def _parse_corrupt(items: list[str]) -> Optional[dict[str, float]]:
    if not items:
        return None
    out = {}
    for item in items:
        name, _, factor = item.partition("=")
        out[name] = float(factor or 1.01)
    return out


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override any setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()

    parser = argparse.ArgumentParser(prog="skillrank", parents=[common],
                                     description="Attention-based skill ranking of videos.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    synth = sub.add_parser("synth", parents=[common], help="generate the planted-signal benchmark")
    synth.add_argument("--videos", type=int)
    synth.add_argument("--patch", type=int, help="planted patch side p")
    synth.add_argument("--gain", type=float, help="signal gain (kappa)")
    synth.add_argument("--noise", type=float, help="signal noise (sigma)")

    def model_flags(p, variant_only=False):
        p.add_argument("--variant", choices=[v.value for v in Variant])
        if not variant_only:
            p.add_argument("--segments", type=int)

    def input_flags(p):
        p.add_argument("--data", help="directory written by synth")
        p.add_argument("--clips")
        p.add_argument("--pairs")

    train_p = sub.add_parser("train", parents=[common], help="train on pairwise labels")
    input_flags(train_p)
    model_flags(train_p)
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--lr", type=float)
    train_p.add_argument("--margin", type=float)
    train_p.add_argument("--kfold", type=int)

    eval_p = sub.add_parser("eval", parents=[common], help="ranking accuracy of saved parameters")
    input_flags(eval_p)
    model_flags(eval_p)
    eval_p.add_argument("--params")
    eval_p.add_argument("--per-pair", action="store_true")

    grad_p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    model_flags(grad_p, variant_only=True)
    grad_p.add_argument("--corrupt-grad", action="append", default=[], help=argparse.SUPPRESS)

    vis_p = sub.add_parser("visualize", parents=[common], help="export attention heat-maps")
    model_flags(vis_p)
    vis_p.add_argument("--params")
    vis_p.add_argument("--clip")
    return parser


def _run(argv: Optional[list[str]]) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # a config file may name the command; supply it before the full parse so
    # command-specific flags are accepted on replay
    pre, rest = _common_parser().parse_known_args(argv)
    file_values = read_config_file(pre.config) if pre.config else {}
    if (not rest or rest[0] not in COMMANDS) and file_values.get("command") in COMMANDS:
        argv = [file_values["command"]] + argv
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    command = args.command
    if command not in COMMANDS:
        parser.print_usage(sys.stderr)
        raise UsageError("no command given (and no 'command' key in --config)")
    overrides = _parse_set(args.set)
    overrides.update({key: str(getattr(args, key)) for key in FLAGS
                      if getattr(args, key, None) is not None})
    cfg = resolve(command, file_values, overrides)
    if command == "synth":
        return cmd_synth(cfg)
    if command == "train":
        return cmd_train(cfg)
    if command == "eval":
        return cmd_eval(cfg, per_pair=getattr(args, "per_pair", False))
    if command == "gradcheck":
        try:
            corrupt = _parse_corrupt(getattr(args, "corrupt_grad", []))
        except ValueError as e:
            raise UsageError(f"bad --corrupt-grad value: {e}") from e
        return cmd_gradcheck(cfg, corrupt)
    return cmd_visualize(cfg)


def main(argv: Optional[list[str]] = None) -> int:
    try:
        return _run(argv)
    except UsageError as e:
        print(f"skillrank: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"skillrank: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
