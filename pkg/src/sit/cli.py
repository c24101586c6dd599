"""Command-line entry point.

Usage: ``sit <subcommand> [--config FILE] [-o key=value ...] [options]``

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Keys address fields of the run configuration with dots, for example::

    model = tiny-cifar           # preset name, or set fields one by one
    model.depth = 2
    tasks.rotation = false
    weighting = fixed
    alphas = 1, 0.5, 0.5
    optim.lr = 1e-3
    corruption.drop_fraction = 0.1, 0.3
    dataset = synthetic:n=512,classes=4,size=32,seed=0
    finetune.steps = 200         # finetune.* and probe.* configure evaluation
    probe.steps = 300

``-o key=value`` overrides are applied after the file, in order.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .model import PRESETS, ModelConfig
from .train import FinetuneConfig, ProbeConfig, RunConfig

log = logging.getLogger("sit")

SUBCOMMANDS = ("pretrain", "finetune", "linprobe", "transfer", "fewshot", "preview", "gradcheck", "corrupt-preview")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    run: RunConfig = field(default_factory=RunConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _scalar(text: str, like):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def _parse_value(text: str, current):
    if isinstance(current, tuple):
        items = [t for t in text.split(",") if t.strip()]
        if current and len(items) != len(current):
            raise ValueError(f"expected {len(current)} comma-separated values, got {text!r}")
        return tuple(_scalar(t, current[i] if current else None) for i, t in enumerate(items))
    return _scalar(text, current)


def _set(obj, path: list[str], text: str):
    head, rest = path[0], path[1:]
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise UsageError(f"unknown config key {head!r}")
    current = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise UsageError(f"config key {head!r} has no sub-keys")
        return dataclasses.replace(obj, **{head: _set(current, rest, text)})
    if isinstance(current, ModelConfig):
        if text.strip() not in PRESETS:
            raise UsageError(f"unknown model preset {text.strip()!r}; choose from {sorted(PRESETS)}")
        return dataclasses.replace(obj, **{head: PRESETS[text.strip()]})
    if dataclasses.is_dataclass(current):
        raise UsageError(f"config key {head!r} needs a sub-key")
    return dataclasses.replace(obj, **{head: _parse_value(text, current)})


def apply_setting(cfg: CliConfig, key: str, value: str) -> CliConfig:
    parts = key.strip().split(".")
    if parts[0] in ("finetune", "probe"):
        if len(parts) < 2:
            raise UsageError(f"config key {key!r} needs a sub-key")
        return dataclasses.replace(cfg, **{parts[0]: _set(getattr(cfg, parts[0]), parts[1:], value)})
    return dataclasses.replace(cfg, run=_set(cfg.run, parts, value))


def parse_config_lines(lines) -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {n}: expected key = value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def build_config(config_file: str | None, overrides: list[str]) -> CliConfig:
    cfg = CliConfig()
    pairs = []
    if config_file:
        pairs += parse_config_lines(Path(config_file).read_text().splitlines())
    for o in overrides:
        if "=" not in o:
            raise UsageError(f"override must be key=value, got {o!r}")
        k, v = o.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        try:
            cfg = apply_setting(cfg, k, v)
        except UsageError:
            raise
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad value for {k!r}: {e}") from None
    return cfg


# -- argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sit", description="Self-supervised vision transformer training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("-o", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    def evaluation(sp, needs_test=True):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", required=True, help="labelled training data reference")
        if needs_test:
            sp.add_argument("--test", help="evaluation data reference (default: the test split of --dataset)")
        sp.add_argument("--report", help="append the report CSV row to this file")

    sp = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to resume from")

    sp = sub.add_parser("finetune", help="replace the task heads and train on labels")
    common(sp)
    evaluation(sp)
    sp.add_argument("--classes", type=int, help="number of classes (default: from the dataset)")
    sp.add_argument("--out", help="where to write the finetuned checkpoint")

    sp = sub.add_parser("linprobe", help="linear evaluation on frozen features")
    common(sp)
    evaluation(sp)

    sp = sub.add_parser("transfer", help="linear evaluation on a different dataset")
    common(sp)
    evaluation(sp)

    sp = sub.add_parser("fewshot", help="finetune on a label fraction, then probe")
    common(sp)
    evaluation(sp)
    sp.add_argument("--percent", type=float, required=True)

    sp = sub.add_parser("preview", help="write original/corrupted/reconstructed PPMs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="image source (default: the config dataset)")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--no-corruption", action="store_true")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--sample", type=int, default=None, help="perturb at most this many coordinates per parameter")

    sp = sub.add_parser("corrupt-preview", help="write original/corrupted PPM pairs")
    common(sp)
    sp.add_argument("--dataset", help="image source (default: the config dataset)")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--out-dir", required=True)
    return p


# -- commands --------------------------------------------------------------------


def _emit(reports, report_path):
    from .train import EvalReport

    print(EvalReport.CSV_HEADER)
    for r in reports:
        print(r.csv_row())
    for r in reports:
        print(r.summary())
    if report_path:
        path = Path(report_path)
        new = not path.exists()
        with open(path, "a") as f:
            if new:
                f.write(EvalReport.CSV_HEADER + "\n")
            for r in reports:
                f.write(r.csv_row() + "\n")


def _eval_data(args):
    from .train import load_dataset_ref

    train = load_dataset_ref(args.dataset, "train")
    test = load_dataset_ref(args.test or args.dataset, "test")
    return train, test


def cmd_pretrain(args, cfg: CliConfig) -> int:
    from .train import pretrain

    res = pretrain(cfg.run, resume_from=args.resume)
    last = res.metrics[-1] if res.metrics else None
    if last:
        print(f"step {last['step']}: total {last['total']:.4f} (rec {last['l_rec']:.4f}, rot {last['l_rot']:.4f}, con {last['l_con']:.4f})")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_finetune(args, cfg: CliConfig) -> int:
    from .train import finetune

    train, test = _eval_data(args)
    _, report = finetune(args.checkpoint, train, args.classes or train.class_count, cfg.finetune, test, out_path=args.out)
    _emit([report], args.report)
    return 0


def cmd_linprobe(args, cfg: CliConfig) -> int:
    from .train import linear_probe

    train, test = _eval_data(args)
    _emit([linear_probe(args.checkpoint, train, test, cfg.probe)], args.report)
    return 0


def cmd_transfer(args, cfg: CliConfig) -> int:
    from .train import domain_transfer

    train, test = _eval_data(args)
    _emit([domain_transfer(args.checkpoint, train, test, cfg.probe)], args.report)
    return 0


def cmd_fewshot(args, cfg: CliConfig) -> int:
    from .train import few_shot_protocol

    train, test = _eval_data(args)
    r1, r2 = few_shot_protocol(args.checkpoint, train, test, args.percent, cfg.finetune, cfg.probe)
    _emit([r for r in (r1, r2) if r is not None], args.report)
    return 0


def _images(args, cfg: CliConfig):
    from .train import load_dataset_ref

    ds = load_dataset_ref(args.dataset or cfg.run.dataset, "train")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    return ds.images[: args.count]


def cmd_preview(args, cfg: CliConfig) -> int:
    from .data import load_checkpoint
    from .pretext import NO_CORRUPTION
    from .train import reconstruct_preview

    ckpt = load_checkpoint(args.checkpoint)
    corruption = NO_CORRUPTION if args.no_corruption else cfg.run.corruption
    corruption = dataclasses.replace(corruption, patch_size=ckpt.config["patch_size"])
    files = reconstruct_preview(ckpt, _images(args, cfg), args.out_dir, corruption, cfg.run.seed)
    print(f"wrote {len(files)} files to {args.out_dir}")
    return 0


def cmd_corrupt_preview(args, cfg: CliConfig) -> int:
    from .train import corrupt_preview

    files = corrupt_preview(_images(args, cfg), args.out_dir, cfg.run.corruption, cfg.run.augment, cfg.run.seed)
    print(f"wrote {len(files)} files to {args.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    def show(r):
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:28s} max rel err {r.error:.3e}  ({r.seconds:.1f}s)", flush=True)

    results = run_suite(coords_per_param=args.sample, log=show)
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks within {TOLERANCE:g}")
    return 0 if not bad else 2


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "linprobe": cmd_linprobe,
    "transfer": cmd_transfer,
    "fewshot": cmd_fewshot,
    "preview": cmd_preview,
    "corrupt-preview": cmd_corrupt_preview,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = build_config(args.config, args.overrides)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"sit {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"sit {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
