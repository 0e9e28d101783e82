"""Command-line pipeline driver.

The full schedule is five commands:

  gridlm gen-data
  gridlm pretrain --out runs/base.ckpt
  gridlm train-stage --stage 1 --ckpt runs/base.ckpt --out runs/stage1.ckpt
  gridlm train-stage --stage 2 --ckpt runs/stage1.ckpt --out runs/stage2.ckpt
  gridlm train-stage --stage 3 --ckpt runs/stage2.ckpt --out runs/stage3.ckpt

plus `eval`, `train-joint`, `ablate`, and an interactive `chat`.  Every run
prints its fully resolved configuration; outputs contain no timestamps, so
reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import data as datagen
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .codec import ImageGrid, Sample, TextSegment, Turn, build_text_vocab
from .data import GRID_K, read_dataset, split_specs, write_dataset
from .errors import DatasetError, GridLMError
from .evals import (
    ablation_summary,
    eval_generation,
    eval_modality_choice,
    eval_retention,
    exact_match_accuracy,
    run_ablation,
    write_ablation_csv,
)
from .generate import SamplerSpec, generate
from .model import ModelConfig
from .training import (
    STAGE_EPOCHS,
    STAGE_LR,
    STAGE_MIX,
    STAGE_WD,
    default_plan,
    pretrain_base,
    run_stage,
    train_joint_baseline,
)
from .vocab import VocabLayout

DATA_DIR_ENV = "GRIDLM_DATA_DIR"

# (file stem, generator name, default count, seed offset)
DATASET_FILES = [
    ("pretrain.t2t", "t2t", 4000, 10),
    ("pretrain.echo", "echo", 2000, 15),
    ("stage1.t2t", "t2t", 5000, 11),
    ("stage1.ti2t", "ti2t", 5000, 12),
    ("stage1.t2i", "t2i", 5000, 13),
    ("stage1.t2ti", "t2ti", 5000, 14),
    ("stage2.t2i", "t2i", 20000, 21),
    ("stage2.t2ti", "t2ti", 20000, 22),
    ("stage3.t2t", "t2t", 2000, 31),
    ("stage3.ti2t", "ti2t", 2000, 32),
    ("stage3.t2i", "t2i", 2000, 33),
    ("stage3.t2ti", "t2ti", 2000, 34),
]

HELDOUT_FILES = [
    ("heldout.t2t", "t2t", 300, 90),
    ("heldout.ti2t", "ti2t", 200, 91),
    ("heldout.t2i", "t2i", 200, 92),
    ("heldout.t2ti", "t2ti", 200, 93),
]


def _data_dir(args) -> Path:
    if args.data_dir:
        return Path(args.data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _load_config_file(path: Optional[str]) -> Dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _model_config(overrides: Dict) -> ModelConfig:
    fields = overrides.get("model", {})
    return ModelConfig(**fields) if fields else ModelConfig()


def _print_resolved(name: str, resolved: Dict) -> None:
    print(f"resolved-config {name}: {json.dumps(resolved, sort_keys=True)}")


def _read_stage_file(data_dir: Path, stem: str) -> List[Sample]:
    path = data_dir / f"{stem}.jsonl"
    if not path.exists():
        raise DatasetError(f"dataset file {path} not found; run `gridlm gen-data` first")
    return read_dataset(path)


def _load_mix(data_dir: Path, stage: str, mix: Dict[str, int]) -> List[Sample]:
    out: List[Sample] = []
    for rtype, count in mix.items():
        samples = _read_stage_file(data_dir, f"{stage}.{rtype}")
        if len(samples) < count:
            raise DatasetError(
                f"{stage}.{rtype} has {len(samples)} samples, plan needs {count}"
            )
        out.extend(samples[:count])
    return out


def _load_joint_corpus(data_dir: Path) -> List[Sample]:
    out: List[Sample] = []
    for stem, _, _, _ in DATASET_FILES:
        if stem.startswith("pretrain"):
            continue
        out.extend(_read_stage_file(data_dir, stem))
    return out


def cmd_gen_data(args) -> int:
    data_dir = _data_dir(args)
    layout = VocabLayout()
    written = []
    for stem, gname, count, offset in DATASET_FILES + HELDOUT_FILES:
        n = args.n if args.n is not None else count
        split = "heldout" if stem.startswith("heldout") else "train"
        gen = datagen.GENERATORS[gname]
        seed = args.seed * 1000 + offset
        if gname in ("t2t", "echo"):
            samples = gen(n, seed, split=split)
        else:
            samples = gen(n, seed, k=GRID_K, split=split)
        path = data_dir / f"{stem}.jsonl"
        write_dataset(path, samples, layout, GRID_K)
        written.append({"file": str(path), "n": n})
    _print_resolved("gen-data", {"seed": args.seed, "files": written})
    return 0


def _loss_csv_path(out: str) -> str:
    return str(Path(out).with_suffix(".loss.csv"))


def cmd_pretrain(args) -> int:
    overrides = _load_config_file(args.config)
    config = _model_config(overrides)
    data_dir = _data_dir(args)
    samples = [
        s
        for key in STAGE_MIX["pretrain"]
        for s in _read_stage_file(data_dir, f"pretrain.{key}")
    ]
    epochs = args.epochs if args.epochs is not None else STAGE_EPOCHS["pretrain"]
    plan_over = overrides.get("plan", {})
    out = args.out or "runs/base.ckpt"
    resolved = {
        "seed": args.seed,
        "epochs": epochs,
        "out": out,
        "n_samples": len(samples),
        "model": config.to_dict(),
        "plan_overrides": plan_over,
    }
    _print_resolved("pretrain", resolved)
    model, report = pretrain_base(
        config, samples, epochs, args.seed,
        lr=plan_over.get("lr", STAGE_LR["pretrain"]),
        batch_size=plan_over.get("batch_size", 64),
        weight_decay=plan_over.get("weight_decay", STAGE_WD["pretrain"]),
    )
    heldout = _read_stage_file(data_dir, "heldout.t2t")
    vocab = build_text_vocab(config.layout)
    acc = exact_match_accuracy(model, heldout, vocab=vocab)
    meta = {"stage": "pretrain", "baseline_heldout_t2t_acc": acc, "seed": args.seed, "epochs": epochs}
    save_checkpoint(model, meta, out, frozen=())
    from .training import write_loss_csv

    write_loss_csv(_loss_csv_path(out), report.records)
    print(f"pretrain done: heldout t2t accuracy {acc:.4f}, checkpoint {out}")
    return 0


def cmd_train_stage(args) -> int:
    overrides = _load_config_file(args.config)
    data_dir = _data_dir(args)
    stage = f"stage{args.stage}"
    plan_over = dict(overrides.get("plan", {}))
    if args.epochs is not None:
        plan_over["epochs"] = args.epochs
    plan_kwargs = {
        k: v for k, v in plan_over.items()
        if k in ("mix", "epochs", "lr", "batch_size", "weight_decay")
    }
    plan = default_plan(stage, args.seed, **plan_kwargs)
    model, header = load_checkpoint(args.ckpt)
    samples = _load_mix(data_dir, stage, plan.mix)
    out = args.out or f"runs/{stage}.ckpt"
    _print_resolved(
        f"train-stage-{args.stage}",
        {"seed": args.seed, "ckpt": args.ckpt, "out": out, "plan": plan.meta(), "variant": args.variant},
    )
    report = run_stage(
        plan, model, samples, out_path=out, variant=args.variant,
        csv_path=_loss_csv_path(out),
    )
    last = report.records[-1]
    print(
        f"{stage} done: {len(report.records)} steps, "
        f"final l_text={last.l_text:.4f} l_img={last.l_img:.4f}, checkpoint {out}"
    )
    return 0


def cmd_train_joint(args) -> int:
    overrides = _load_config_file(args.config)
    data_dir = _data_dir(args)
    model, header = load_checkpoint(args.ckpt)
    samples = _load_joint_corpus(data_dir)
    epochs = args.epochs if args.epochs is not None else STAGE_EPOCHS["joint"]
    plan_over = overrides.get("plan", {})
    out = args.out or "runs/joint.ckpt"
    _print_resolved(
        "train-joint",
        {"seed": args.seed, "ckpt": args.ckpt, "out": out, "epochs": epochs,
         "n_samples": len(samples), "variant": args.variant},
    )
    report = run_stage(
        default_plan(
            "joint", args.seed, epochs=epochs,
            lr=plan_over.get("lr", 3e-4), batch_size=plan_over.get("batch_size", 64),
            mix={},
        ),
        model, samples, out_path=out, variant=args.variant,
        csv_path=_loss_csv_path(out),
    )
    last = report.records[-1]
    print(f"joint done: {len(report.records)} steps, final l_total={last.l_total:.4f}, checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    data_dir = _data_dir(args)
    vocab = build_text_vocab(model.config.layout)
    lines: List[str] = []
    if args.kind == "retention":
        heldout = _read_stage_file(data_dir, "heldout.t2t")
        baseline = args.baseline_acc
        if baseline is None and args.baseline_ckpt:
            baseline = read_header(args.baseline_ckpt)["meta"].get("baseline_heldout_t2t_acc")
        report = eval_retention(model, heldout, baseline, vocab=vocab)
        lines = [
            "baseline_acc,post_acc,ratio,n",
            f"{report.baseline_acc:.6f},{report.post_acc:.6f},{report.ratio:.6f},{report.n}",
        ]
        print(f"retention: post {report.post_acc:.4f} / baseline {report.baseline_acc:.4f} = {report.ratio:.4f}")
    elif args.kind == "generation":
        specs = split_specs("heldout")
        report = eval_generation(model, specs, vocab=vocab)
        lines = [
            "mean_cell_acc,exact_rate,n,missing_image",
            f"{report.mean_cell_acc:.6f},{report.exact_rate:.6f},{len(specs)},{report.n_missing_image}",
        ]
        print(f"generation: mean cell accuracy {report.mean_cell_acc:.4f} over {len(specs)} held-out specs")
    elif args.kind == "modality":
        samples: List[Sample] = []
        for stem, _, _, _ in HELDOUT_FILES:
            samples.extend(_read_stage_file(data_dir, stem))
        acc = eval_modality_choice(model, samples, vocab=vocab)
        lines = ["accuracy,n", f"{acc:.6f},{len(samples)}"]
        print(f"modality choice: accuracy {acc:.4f} over {len(samples)} prompts")
    else:
        raise ValueError(f"unknown eval kind {args.kind!r}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    overrides = _load_config_file(args.config)
    config = _model_config(overrides)
    data_dir = _data_dir(args)
    half = args.n // 2
    corpus = (
        _read_stage_file(data_dir, "stage2.t2i")[:half]
        + _read_stage_file(data_dir, "stage2.t2ti")[: args.n - half]
    )
    seeds = [args.seed + i for i in range(args.seeds)]
    out_dir = Path(args.out or "runs/ablation")
    _print_resolved(
        "ablate",
        {"seed": args.seed, "seeds": seeds, "epochs": args.epochs, "n": len(corpus),
         "threshold": args.threshold, "out": str(out_dir)},
    )
    report = run_ablation(config, corpus, args.epochs, seeds, threshold=args.threshold)
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in report.results:
        write_ablation_csv(out_dir / f"ablation.seed{res.seed}.csv", res)
    summary = ablation_summary(report)
    (out_dir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return 0


def render_grid_ansi(grid: ImageGrid) -> str:
    rows = []
    for row in grid.cells:
        rows.append("".join(f"\x1b[48;5;{v}m  " for v in row) + "\x1b[0m")
    return "\n".join(rows)


def cmd_chat(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    vocab = build_text_vocab(model.config.layout)
    if args.temperature is not None:
        sampler = SamplerSpec(strategy="temperature", temperature=args.temperature, seed=args.seed)
    else:
        sampler = SamplerSpec()
    print("chat ready; empty line repeats the prompt, EOF exits")
    while True:
        try:
            line = input("you> ")
        except EOFError:
            print()
            return 0
        line = line.strip()
        if not line:
            continue
        try:
            prompt = Turn("human", (TextSegment(line),))
            reply = generate(
                model, prompt, sampler,
                max_new_tokens=args.max_new, no_image=args.no_image,
                vocab=vocab, fit_capacity=True,
            )
        except GridLMError as exc:
            print(f"error: {exc}", file=sys.stderr)
            continue
        for seg in reply.segments:
            if isinstance(seg, ImageGrid):
                print(render_grid_ansi(seg))
            else:
                print(seg)
        if reply.truncated:
            print("[truncated]")
        if args.trace:
            print("token,mode")
            for tok, mode in zip(reply.tokens, reply.modes):
                print(f"{tok},{mode.name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--data-dir", default=None, help=f"dataset directory (or ${DATA_DIR_ENV})")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON file with model/plan overrides")
        p.add_argument("--out", default=None)

    p = sub.add_parser("gen-data", help="write the stage and held-out dataset files")
    common(p)
    p.add_argument("--n", type=int, default=None, help="override every file's sample count")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the text-only base model")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-stage", help="run one schedule stage from a checkpoint")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", choices=("switched", "unified"), default="switched")
    p.set_defaults(fn=cmd_train_stage)

    p = sub.add_parser("train-joint", help="single-stage full fine-tune baseline")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", choices=("switched", "unified"), default="switched")
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("eval", help="retention / generation / modality metrics")
    common(p)
    p.add_argument("--kind", choices=("retention", "generation", "modality"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline-ckpt", default=None)
    p.add_argument("--baseline-acc", type=float, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="routed-head vs whole-codebook convergence race")
    common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--threshold", type=float, default=1.2)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("chat", help="interactive prompt loop")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--no-image", action="store_true", help="force a text first token")
    p.add_argument("--trace", action="store_true", help="print the token/mode trace")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-new", type=int, default=96)
    p.set_defaults(fn=cmd_chat)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except GridLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
