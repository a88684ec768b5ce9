"""Command-line entry point.

One binary, one subcommand per workflow step: corpus building, training,
sampling, inpainting, image composition, classifier training, evaluation,
survey tooling, and serving. Every randomized subcommand takes --seed and is
deterministic under it. Exit codes: 0 success, 1 usage/validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser"]


class UsageError(ValueError):
    """Bad flag values; exits 1 rather than 2."""


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _font_source(text: str):
    """Parse PATH=SCRIPT:STYLE into a FontSource."""
    from .corpus import FontSource

    try:
        path, _, label = text.partition("=")
        script, _, style = label.partition(":")
        if not (path and script and style):
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected PATH=SCRIPT:STYLE, got {text!r}"
        ) from None
    return FontSource(font_path=path, script=script, style=style)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="callipaint",
        description="Glyph diffusion: corpus building, training, sampling, "
        "mask-conditioned inpainting, evaluation, surveys, and serving.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    rc = sub.add_parser(
        "render-corpus",
        help="render a labeled glyph corpus from font files",
        description="Render every (character, font) pair to PNG and write a "
        "JSON-lines manifest. Each font file stands in for one (script, style) "
        "pair, given as PATH=SCRIPT:STYLE.",
    )
    rc.add_argument("--chars", required=True, help="string of characters to render")
    rc.add_argument(
        "--font",
        dest="fonts",
        action="append",
        required=True,
        type=_font_source,
        metavar="PATH=SCRIPT:STYLE",
        help="font file and its (script, style) labels; repeatable",
    )
    rc.add_argument("--out", required=True, help="output corpus directory")
    rc.add_argument("--val-frac", type=float, default=0.2, help="validation fraction (0,1)")
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--resolution", type=int, default=32, help="square image side in pixels")

    tr = sub.add_parser(
        "train",
        help="train the denoiser on a corpus",
        description="Train the conditional noise-prediction network and write "
        "a checkpoint (binary CPKT format).",
    )
    tr.add_argument("--manifest", required=True, help="path to manifest.jsonl")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--steps", type=int, default=20000)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--T", type=int, default=200, help="diffusion step count")
    tr.add_argument("--beta-start", type=float, default=5e-4)
    tr.add_argument("--beta-end", type=float, default=0.1)
    tr.add_argument("--base-channels", type=int, default=32)
    tr.add_argument("--time-embed-dim", type=int, default=128)
    tr.add_argument("--seed", type=int, default=0)

    sa = sub.add_parser(
        "sample",
        help="generate a glyph from pure noise",
        description="Ancestral sampling conditioned on (character, script, "
        "style) names from the checkpoint vocabularies. Writes an 8-bit "
        "grayscale PNG.",
    )
    _add_condition_flags(sa)
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--out", required=True, help="output PNG path")
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--trace-dir", help="directory for intermediate states and plan.json")
    sa.add_argument("--trace-stride", type=int, default=10)

    ip = sub.add_parser(
        "inpaint",
        help="regenerate the masked region of an image",
        description="Mask-conditioned generation. The mask PNG uses 255 = "
        "inpaint, 0 = keep; unmasked pixels of the output equal the input "
        "exactly.",
    )
    _add_condition_flags(ip)
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--image", required=True, help="condition image PNG")
    ip.add_argument("--mask", required=True, help="mask PNG (255 = inpaint)")
    ip.add_argument("--out", required=True, help="output PNG path")
    ip.add_argument("--jump-len", type=int, default=None, help="resampling block length")
    ip.add_argument("--n-resample", type=int, default=None, help="passes per block")
    ip.add_argument("--seed", type=int, default=0)
    ip.add_argument("--trace-dir", help="directory for intermediate states and plan.json")
    ip.add_argument("--trace-stride", type=int, default=50)

    co = sub.add_parser(
        "compose",
        help="splice a patch image into a base image through a mask",
        description="Writes patch pixels where the mask is 255 and base pixels "
        "elsewhere. Useful for building counterfactual condition images "
        "(e.g. swapping one radical) before inpainting.",
    )
    co.add_argument("--base", required=True, help="base image PNG")
    co.add_argument("--patch", required=True, help="patch source PNG")
    co.add_argument("--mask", required=True, help="mask PNG (255 = take patch)")
    co.add_argument("--out", required=True)

    tc = sub.add_parser(
        "train-classifier",
        help="train the script/character classifier",
        description="Train the two-headed CNN used by `eval` and `compare` "
        "and report validation accuracy per head.",
    )
    tc.add_argument("--manifest", required=True)
    tc.add_argument("--out", required=True, help="classifier checkpoint output path")
    tc.add_argument("--epochs", type=int, default=30)
    tc.add_argument("--lr", type=float, default=1e-3)
    tc.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser(
        "eval",
        help="random-mask inpainting accuracy report",
        description="Inpaint gold val images under random rectangle-union "
        "masks, classify the results, and write a per-script accuracy table "
        "(text and JSON).",
    )
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--classifier", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--n-per-cell", type=int, default=20, help="samples per script row")
    ev.add_argument("--n-rects-min", type=int, default=1)
    ev.add_argument("--n-rects-max", type=int, default=3)
    ev.add_argument("--min-frac", type=float, default=0.25)
    ev.add_argument("--max-frac", type=float, default=0.5)
    ev.add_argument(
        "--coverage",
        type=float,
        default=None,
        help="only 0 is accepted: run with empty masks (degenerate anchor)",
    )
    ev.add_argument("--jump-len", type=int, default=None)
    ev.add_argument("--n-resample", type=int, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out-json", help="write the machine-readable report here")

    cp = sub.add_parser(
        "compare",
        help="inpainting vs full-generation character accuracy",
        description="Prints acc_inpaint, acc_generate, and delta over n val "
        "items with random masks.",
    )
    cp.add_argument("--checkpoint", required=True)
    cp.add_argument("--classifier", required=True)
    cp.add_argument("--manifest", required=True)
    cp.add_argument("--n", type=int, default=100)
    cp.add_argument("--n-rects-min", type=int, default=1)
    cp.add_argument("--n-rects-max", type=int, default=3)
    cp.add_argument("--min-frac", type=float, default=0.25)
    cp.add_argument("--max-frac", type=float, default=0.5)
    cp.add_argument("--jump-len", type=int, default=None)
    cp.add_argument("--n-resample", type=int, default=None)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--out-json")

    sm = sub.add_parser(
        "survey-make",
        help="build a find-the-genuine / find-the-fake survey bundle",
        description="Samples question options from a directory of real images "
        "and a directory of model outputs. questions.json is respondent-facing; "
        "key.json holds the answers and provenance and is written separately.",
    )
    sm.add_argument("--real-dir", required=True, help="directory of real image PNGs")
    sm.add_argument("--generated-dir", required=True, help="directory of model output PNGs")
    sm.add_argument("--n-per-type", type=int, required=True)
    sm.add_argument("--k", type=int, default=4, help="options per question")
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out", required=True, help="bundle output directory")

    ss = sub.add_parser(
        "survey-score",
        help="score survey responses against a key",
        description="Responses are CSV rows question_id,choice[,respondent"
        "[,group]] (0-based choice index). Reports accuracy and the exact "
        "two-sided binomial p-value per question type, plus per-group rows "
        "when group labels are present.",
    )
    ss.add_argument("--key", required=True, help="key.json from survey-make")
    ss.add_argument(
        "--responses", required=True, action="append", help="responses CSV; repeatable"
    )
    ss.add_argument("--out-json")

    sv = sub.add_parser(
        "serve",
        help="run the HTTP inference service",
        description="Endpoints: GET /api/v1/health, GET /api/v1/conditions, "
        "POST /api/v1/sample, POST /api/v1/inpaint. Flags fall back to "
        "CALLIPAINT_CHECKPOINT / CALLIPAINT_BIND / CALLIPAINT_WORKERS / "
        "CALLIPAINT_MAX_PENDING.",
    )
    sv.add_argument("--checkpoint", default=os.environ.get("CALLIPAINT_CHECKPOINT"))
    sv.add_argument("--bind", default=os.environ.get("CALLIPAINT_BIND", "127.0.0.1:8080"))
    sv.add_argument(
        "--workers", type=int, default=int(os.environ.get("CALLIPAINT_WORKERS", "2"))
    )
    sv.add_argument(
        "--max-pending",
        type=int,
        default=int(os.environ.get("CALLIPAINT_MAX_PENDING", "16")),
    )

    return p


def _add_condition_flags(sp):
    sp.add_argument("--character", required=True, help="character name from the vocabulary")
    sp.add_argument("--script", required=True, help="script name from the vocabulary")
    sp.add_argument("--style", required=True, help="style name from the vocabulary")


def _resolve_condition(vocab: dict, character: str, script: str, style: str):
    from .corpus import ConditionLabel

    ids = []
    for field, name in (("character", character), ("script", script), ("style", style)):
        names = vocab[field]
        if name not in names:
            raise UsageError(f"unknown {field} name {name!r}; known: {names}")
        ids.append(names.index(name))
    return ConditionLabel(*ids)


def _mask_spec_from_args(args):
    from .evaluation import EvalMaskSpec

    if args.coverage is not None:
        if args.coverage != 0:
            raise UsageError(
                "--coverage only accepts 0 (empty masks); use --n-rects-min/max "
                "and --min-frac/--max-frac otherwise"
            )
        return EvalMaskSpec(n_rects_min=0, n_rects_max=0)
    return EvalMaskSpec(
        n_rects_min=args.n_rects_min,
        n_rects_max=args.n_rects_max,
        min_frac=args.min_frac,
        max_frac=args.max_frac,
    )


def _inpaint_config(jump_len, n_resample, seed=0):
    from . import repaint

    return repaint.InpaintConfig(
        jump_len=jump_len if jump_len is not None else repaint.DEFAULT_JUMP_LEN,
        n_resample=n_resample if n_resample is not None else repaint.DEFAULT_N_RESAMPLE,
        seed=seed,
    )


def _run(args) -> int:
    if args.command == "render-corpus":
        from .corpus import build_manifest

        manifest = build_manifest(
            characters=list(args.chars),
            sources=args.fonts,
            out_dir=args.out,
            val_fraction=args.val_frac,
            seed=args.seed,
            resolution=(args.resolution, args.resolution),
        )
        print(
            f"wrote {len(manifest.entries)} images "
            f"({sum(e.split == 'train' for e in manifest.entries)} train / "
            f"{sum(e.split == 'val' for e in manifest.entries)} val) to {args.out}"
        )
        return 0

    if args.command == "train":
        from .corpus import load_dataset
        from .denoiser import DenoiserConfig, TrainConfig, init_params, save_checkpoint, train
        from .diffusion import make_schedule

        ds = load_dataset(args.manifest, "train")
        config = DenoiserConfig(
            resolution=ds.resolution,
            base_channels=args.base_channels,
            time_embed_dim=args.time_embed_dim,
            vocab_character=len(ds.vocab_character),
            vocab_script=len(ds.vocab_script),
            vocab_style=len(ds.vocab_style),
        )
        params = init_params(config, seed=args.seed)
        schedule = make_schedule(args.T, args.beta_start, args.beta_end)
        ckpt = train(
            params,
            ds,
            schedule,
            TrainConfig(lr=args.lr, batch=args.batch, steps=args.steps, seed=args.seed),
        )
        save_checkpoint(ckpt, args.out)
        last = ckpt.loss_history[-1] if ckpt.loss_history else float("nan")
        print(f"trained {args.steps} steps (final loss {last:.4f}); wrote {args.out}")
        return 0

    if args.command == "sample":
        from .denoiser import load_checkpoint
        from .diffusion import TraceOptions, make_schedule, sample

        ckpt = load_checkpoint(args.checkpoint)
        cond = _resolve_condition(ckpt.vocabularies, args.character, args.script, args.style)
        schedule = make_schedule(*ckpt.schedule_spec)
        opts = TraceOptions(stride=args.trace_stride if args.trace_dir else 0)
        image, trace = sample(ckpt.params, cond, schedule, args.seed, opts)
        image.save_png(args.out)
        if args.trace_dir:
            trace.export(args.trace_dir)
        print(f"sampled {args.out} (seed {args.seed}, {trace.denoise_count} steps)")
        return 0

    if args.command == "inpaint":
        from .corpus import GlyphImage, Mask
        from .denoiser import load_checkpoint
        from .diffusion import TraceOptions, make_schedule
        from .repaint import InpaintConfig, inpaint

        ckpt = load_checkpoint(args.checkpoint)
        cond = _resolve_condition(ckpt.vocabularies, args.character, args.script, args.style)
        schedule = make_schedule(*ckpt.schedule_spec)
        image = GlyphImage.load_png(args.image).to_model()
        mask = Mask.load_png(args.mask)
        base = _inpaint_config(args.jump_len, args.n_resample, args.seed)
        config = InpaintConfig(
            jump_len=base.jump_len,
            n_resample=base.n_resample,
            seed=args.seed,
            trace=TraceOptions(stride=args.trace_stride if args.trace_dir else 0),
        )
        config.validate(schedule.T)
        out, trace = inpaint(ckpt.params, image, mask, cond, schedule, config)
        out.save_png(args.out)
        if args.trace_dir:
            trace.export(args.trace_dir)
        print(
            f"inpainted {args.out} (seed {args.seed}, {trace.denoise_count} denoise steps, "
            f"mask coverage {mask.coverage:.3f})"
        )
        return 0

    if args.command == "compose":
        from .corpus import GlyphImage, Mask, compose_condition_image

        out = compose_condition_image(
            GlyphImage.load_png(args.base),
            GlyphImage.load_png(args.patch),
            Mask.load_png(args.mask),
        )
        out.save_png(args.out)
        print(f"composed {args.out}")
        return 0

    if args.command == "train-classifier":
        from .corpus import load_dataset
        from .evaluation import ClassifierConfig, save_classifier, train_classifier

        train_ds = load_dataset(args.manifest, "train")
        val_ds = load_dataset(args.manifest, "val")
        clf = train_classifier(
            train_ds, val_ds, ClassifierConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
        )
        save_classifier(clf, args.out)
        print(
            f"wrote {args.out} (val script acc "
            f"{_fmt(clf.val_script_accuracy)}, character acc "
            f"{_fmt(clf.val_character_accuracy)})"
        )
        return 0

    if args.command == "eval":
        from .corpus import load_dataset
        from .denoiser import load_checkpoint
        from .diffusion import make_schedule
        from .evaluation import eval_inpainting, load_classifier

        ckpt = load_checkpoint(args.checkpoint)
        clf = load_classifier(args.classifier)
        val_ds = load_dataset(args.manifest, "val")
        schedule = make_schedule(*ckpt.schedule_spec)
        report = eval_inpainting(
            ckpt.params,
            clf,
            val_ds,
            _mask_spec_from_args(args),
            n_per_cell=args.n_per_cell,
            seed=args.seed,
            schedule=schedule,
            inpaint_config=_inpaint_config(args.jump_len, args.n_resample),
        )
        print(report.render_text())
        if args.out_json:
            Path(args.out_json).write_text(
                json.dumps(report.to_json_dict(), indent=2), encoding="utf-8"
            )
        return 0

    if args.command == "compare":
        from .corpus import load_dataset
        from .denoiser import load_checkpoint
        from .diffusion import make_schedule
        from .evaluation import compare_inpaint_vs_generate, load_classifier

        ckpt = load_checkpoint(args.checkpoint)
        clf = load_classifier(args.classifier)
        val_ds = load_dataset(args.manifest, "val")
        schedule = make_schedule(*ckpt.schedule_spec)
        result = compare_inpaint_vs_generate(
            ckpt.params,
            clf,
            val_ds,
            _mask_spec_from_args(args),
            n=args.n,
            seed=args.seed,
            schedule=schedule,
            inpaint_config=_inpaint_config(args.jump_len, args.n_resample),
        )
        print(
            f"acc_inpaint {result['acc_inpaint']:.4f}  "
            f"acc_generate {result['acc_generate']:.4f}  "
            f"delta {result['delta']:+.4f}  (n={result['n']})"
        )
        if args.out_json:
            Path(args.out_json).write_text(json.dumps(result, indent=2), encoding="utf-8")
        return 0

    if args.command == "survey-make":
        from .survey import make_survey, write_bundle

        real = sorted(str(p) for p in Path(args.real_dir).glob("*.png"))
        generated = sorted(str(p) for p in Path(args.generated_dir).glob("*.png"))
        bundle = make_survey(real, generated, args.n_per_type, k=args.k, seed=args.seed)
        write_bundle(bundle, args.out)
        print(f"wrote {len(bundle.questions)} questions to {args.out}")
        return 0

    if args.command == "survey-score":
        from .survey import load_answer_key, read_responses_csv, score_survey

        key = load_answer_key(args.key)
        responses = []
        for path in args.responses:
            responses.extend(read_responses_csv(path))
        score = score_survey(key, responses)
        for t, ts in sorted(score.per_type.items()):
            print(
                f"type {t}: accuracy {ts.accuracy:.3f} ({ts.correct}/{ts.answered}), "
                f"p-value {ts.p_value:.4g}"
            )
        print(
            f"total: accuracy {score.total.accuracy:.3f} "
            f"({score.total.correct}/{score.total.answered}), "
            f"p-value {score.total.p_value:.4g}"
        )
        for group, per in score.groups.items():
            for t, ts in sorted(per.items()):
                print(
                    f"group {group!r} type {t}: accuracy {ts.accuracy:.3f} "
                    f"({ts.correct}/{ts.answered}), p-value {ts.p_value:.4g}"
                )
        if args.out_json:
            Path(args.out_json).write_text(
                json.dumps(score.to_json_dict(), indent=2), encoding="utf-8"
            )
        return 0

    if args.command == "serve":
        from .service import serve

        if not args.checkpoint:
            raise UsageError("--checkpoint or CALLIPAINT_CHECKPOINT is required")
        serve(
            args.checkpoint,
            bind=args.bind,
            workers=args.workers,
            max_pending=args.max_pending,
        )
        return 0

    raise ValueError(f"unknown command {args.command!r}")


def _fmt(x) -> str:
    return f"{x:.3f}" if x is not None else "n/a"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # delegated module failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
