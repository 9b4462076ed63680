"""Command-line surface for the pipeline.

One executable, seven subcommands: generate, select-events, score,
loss-eval, train, evaluate, diagnose-collapse. Flags override config
file values, which override built-in defaults; the config file is plain
``key = value`` lines whose keys mirror the long flag names.

Exit codes: 0 success, 1 validation/usage error, 2 I/O or file-format
error. Diagnostics go to stderr; data goes to files and a single JSON
line on stdout. No numeric logic lives here, every subcommand is a thin
adapter over the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import __version__
from .corpus import (
    SyntheticConfig,
    _atomic_write_text,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .errors import (
    EmbeddingFormatError,
    InvariantError,
    ManifestError,
    TrainingDiverged,
)
from .evaluation import (
    DEFAULT_KS,
    collapse_csv,
    collapse_diagnostic,
    evaluate_t2v,
    evaluate_v2t,
    metrics_csv,
    partition_subsets,
    restrict_to_videos,
)
from .keyevents import (
    ClusterConfig,
    gather_key_embeddings,
    load_key_events,
    save_key_events,
    select_key_events,
)
from .loss import Batch, LossConfig, Weighting, mevtr_loss
from .similarity import SimilarityMode, load_similarity, save_similarity, score_matrix
from .trainer import Recluster, TrainConfig, load_head, save_head, train

_log = logging.getLogger("mevtr")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for I/O errors here
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _span(text: str) -> tuple[int, int]:
    """Parse "N" or "LO..HI" into an inclusive integer range."""
    lo, sep, hi = text.partition("..")
    try:
        if sep:
            return int(lo), int(hi)
        v = int(text)
        return v, v
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}") from None


def _ks(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _alpha(text: str):
    if text == "dynamic":
        return Weighting.DYNAMIC, None
    try:
        return Weighting.FIXED, float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'dynamic' or a float, got {text!r}"
        ) from None


def _mode(text: str) -> SimilarityMode:
    try:
        return SimilarityMode(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"mode must be avg, max, or mean, got {text!r}") from None


def _recluster(text: str) -> Recluster:
    try:
        return Recluster(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"recluster must be once or epoch, got {text!r}") from None


def _choice(*allowed: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        if text not in allowed:
            raise argparse.ArgumentTypeError(
                f"expected one of {', '.join(allowed)}; got {text!r}"
            )
        return text

    return convert


@dataclass(frozen=True)
class _Opt:
    flag: str
    type: Callable | None  # None marks a boolean flag
    default: object
    help: str
    required: bool = False


_GLOBAL_OPTS = (
    _Opt("--threads", int, 1, "worker threads for score computation"),
)

_SUBCOMMANDS: dict[str, tuple[str, tuple[_Opt, ...]]] = {
    "generate": (
        "write a synthetic multi-event corpus",
        (
            _Opt("--out", str, None, "output directory", required=True),
            _Opt("--n-videos", int, 12, "number of videos"),
            _Opt("--events", _span, (3, 5), "events per video, N or LO..HI"),
            _Opt("--frames", _span, (4, 8), "frames per event, N or LO..HI"),
            _Opt("--dim", int, 16, "embedding dimension"),
            _Opt("--separation", float, 0.8, "minimum event anchor separation (1 - cos)"),
            _Opt("--noise", float, 0.05, "within-event noise scale"),
            _Opt("--seed", int, 0, "generator seed"),
        ),
    ),
    "select-events": (
        "cluster each video's frames into key events",
        (
            _Opt("--manifest", str, None, "corpus manifest", required=True),
            _Opt("--k", int, 16, "number of key events per video"),
            _Opt("--max-iter", int, 60, "clustering sweep budget"),
            _Opt("--tol", float, 1e-5, "objective decrease stop threshold"),
            _Opt("--init", _choice("even", "kpp"), "even", "medoid initialization"),
            _Opt("--seed", int, 0, "seed for kpp initialization"),
            _Opt("--out", str, None, "key-event JSONL output", required=True),
        ),
    ),
    "score": (
        "score every video against every text",
        (
            _Opt("--manifest", str, None, "corpus manifest", required=True),
            _Opt("--keyevents", str, None, "key-event JSONL from select-events", required=True),
            _Opt("--mode", _mode, SimilarityMode.KEY_EVENT_AVG, "avg, max, or mean"),
            _Opt("--out", str, None, "score matrix output (.emb + .ids.json)", required=True),
        ),
    ),
    "loss-eval": (
        "evaluate the training loss on a stored score matrix",
        (
            _Opt("--scores", str, None, "score matrix from score", required=True),
            _Opt("--batch", str, None, 'JSON file {"positives": [[text indices], ...]}', required=True),
            _Opt("--tau", float, 0.05, "softmax temperature"),
            _Opt("--alpha", _alpha, (Weighting.DYNAMIC, None), "'dynamic' or a fixed float"),
        ),
    ),
    "train": (
        "fit the shared projection head",
        (
            _Opt("--manifest", str, None, "corpus manifest", required=True),
            _Opt("--epochs", int, 5, "training epochs"),
            _Opt("--batch-videos", int, 8, "videos per batch"),
            _Opt("--lr", float, 0.05, "gradient descent step size"),
            _Opt("--tau", float, 0.05, "softmax temperature"),
            _Opt("--alpha", _alpha, (Weighting.DYNAMIC, None), "'dynamic' or a fixed float"),
            _Opt("--mode", _mode, SimilarityMode.KEY_EVENT_AVG, "similarity aggregator"),
            _Opt("--k", int, 16, "key events per video"),
            _Opt("--no-key-events", None, False, "mean-pool all frames instead of key events"),
            _Opt("--no-mevtr-loss", None, False, "plain multi-positive softmax instead"),
            _Opt("--recluster", _recluster, Recluster.ONCE, "once or epoch"),
            _Opt("--seed", int, 0, "shuffling seed"),
            _Opt("--report", str, None, "training report JSON output", required=True),
            _Opt("--head-out", str, None, "optional head checkpoint (.emb)"),
            _Opt("--figures", str, None, "directory for rendered figures"),
        ),
    ),
    "evaluate": (
        "compute retrieval metrics from a score matrix",
        (
            _Opt("--scores", str, None, "score matrix from score", required=True),
            _Opt("--manifest", str, None, "corpus manifest", required=True),
            _Opt("--task", _choice("v2t", "t2v"), "v2t", "retrieval direction"),
            _Opt("--ks", _ks, DEFAULT_KS, "comma-separated recall cutoffs"),
            _Opt("--subset-by", _choice("duration", "events", "none"), "none", "per-subset breakdown"),
            _Opt("--out", str, None, "metrics report JSON output", required=True),
            _Opt("--csv", str, None, "optional recall-vs-k table"),
            _Opt("--figures", str, None, "directory for rendered figures"),
        ),
    ),
    "diagnose-collapse": (
        "measure per-video text similarity (collapse probe)",
        (
            _Opt("--manifest", str, None, "corpus manifest", required=True),
            _Opt("--head", str, None, "optional projection head checkpoint"),
            _Opt("--no-self-pairs", None, False, "exclude m = n pairs from the average"),
            _Opt("--out", str, None, "collapse report JSON output", required=True),
            _Opt("--csv", str, None, "optional event-count breakdown table"),
            _Opt("--figures", str, None, "directory for rendered figures"),
        ),
    ),
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="mevtr", description="multi-event video-text retrieval pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", metavar="FILE", help="key = value defaults file")
    for opt in _GLOBAL_OPTS:
        parser.add_argument(opt.flag, type=opt.type, default=opt.default, help=opt.help)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    submap: dict[str, _Parser] = {}
    for name, (help_text, opts) in _SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        for opt in opts:
            if opt.type is None:
                sp.add_argument(opt.flag, action="store_true", help=opt.help)
            else:
                # required flags stay optional here; checked after config merge
                sp.add_argument(opt.flag, type=opt.type, default=opt.default, help=opt.help)
        submap[name] = sp
    return parser, submap


def _load_config(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise _UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[_dest(key.strip())] = value.strip()
    return out


def _config_defaults(opts: tuple[_Opt, ...], conf: dict[str, str], used: set) -> dict:
    defaults = {}
    for opt in opts:
        dest = _dest(opt.flag)
        if dest not in conf:
            continue
        used.add(dest)
        raw = conf[dest]
        if opt.type is None:
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[dest] = opt.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise _UsageError(f"config {opt.flag.lstrip('-')}: {exc}") from None
    return defaults


def _require(args, command: str, *flags: str) -> None:
    for flag in flags:
        if getattr(args, _dest(flag)) is None:
            raise _UsageError(f"mevtr {command}: {flag} is required")


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _write_json(path: str, obj) -> None:
    _atomic_write_text(
        Path(path), json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
    )


def _figures_dir(arg: str) -> Path:
    d = Path(arg)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _loss_config(args) -> LossConfig:
    weighting, alpha = args.alpha
    return LossConfig(
        temperature=args.tau,
        weighting=weighting,
        alpha=1.0 if alpha is None else alpha,
    )


def _cmd_generate(args) -> int:
    _require(args, "generate", "--out")
    config = SyntheticConfig(
        n_videos=args.n_videos,
        events_per_video=args.events,
        frames_per_event=args.frames,
        dim=args.dim,
        event_separation=args.separation,
        noise_scale=args.noise,
        seed=args.seed,
    )
    corpus, labels = generate_synthetic(config)
    manifest = save_corpus(corpus, args.out, frame_labels=labels)
    _log.info("wrote %s (%d videos, %d texts)", manifest, len(corpus.videos), len(corpus.texts))
    _emit({
        "manifest": str(manifest),
        "texts": len(corpus.texts),
        "videos": len(corpus.videos),
    })
    return 0


def _cmd_select_events(args) -> int:
    _require(args, "select-events", "--manifest", "--out")
    corpus = load_corpus(args.manifest)
    config = ClusterConfig(
        k=args.k,
        max_iterations=args.max_iter,
        tolerance=args.tol,
        seed=args.seed,
        init=args.init,
    )
    events = {v.video_id: select_key_events(v.frames, config) for v in corpus.videos}
    save_key_events(args.out, events)
    _emit({"out": args.out, "videos": len(events)})
    return 0


def _cmd_score(args) -> int:
    _require(args, "score", "--manifest", "--keyevents", "--out")
    if args.threads < 1:
        raise _UsageError("mevtr: --threads must be >= 1")
    corpus = load_corpus(args.manifest)
    events = load_key_events(args.keyevents)
    unknown = sorted(set(events) - set(corpus.video_ids))
    if unknown:
        raise InvariantError(f"key events reference unknown videos: {unknown}")
    keys = {
        vid: gather_key_embeddings(corpus.video(vid).frames, key)
        for vid, key in events.items()
    }
    matrix = score_matrix(corpus, keys, args.mode, workers=args.threads)
    save_similarity(matrix, args.out)
    _emit({
        "mode": args.mode.value,
        "out": args.out,
        "texts": len(matrix.text_ids),
        "videos": len(matrix.video_ids),
    })
    return 0


def _cmd_loss_eval(args) -> int:
    _require(args, "loss-eval", "--scores", "--batch")
    sim = load_similarity(args.scores)
    try:
        spec = json.loads(Path(args.batch).read_text(encoding="utf-8"))
        positives = tuple(tuple(int(j) for j in p) for p in spec["positives"])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{args.batch}: invalid JSON ({exc})") from exc
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{args.batch}: expected {{\"positives\": [[...]]}}") from exc
    batch = Batch(positives=positives, n_texts=len(sim.text_ids))
    out = mevtr_loss(sim.scores, batch, _loss_config(args))
    _emit(out.to_dict())
    return 0


def _cmd_train(args) -> int:
    _require(args, "train", "--manifest", "--report")
    corpus = load_corpus(args.manifest)
    config = TrainConfig(
        epochs=args.epochs,
        batch_videos=args.batch_videos,
        learning_rate=args.lr,
        seed=args.seed,
        loss=_loss_config(args),
        mode=args.mode,
        use_key_events=not args.no_key_events,
        use_mevtr_loss=not args.no_mevtr_loss,
        recluster=args.recluster,
        cluster=ClusterConfig(k=args.k, seed=args.seed),
    )
    report = train(corpus, config)
    _write_json(args.report, report.to_dict())
    if args.head_out:
        save_head(report.head, args.head_out)
    if args.figures:
        from .figures import training_figure

        training_figure(report, _figures_dir(args.figures) / "training.png")
    _emit({
        "final_collapse": report.collapse_mean[-1],
        "final_total": report.mean_total[-1],
        "report": args.report,
    })
    return 0


def _cmd_evaluate(args) -> int:
    _require(args, "evaluate", "--scores", "--manifest", "--out")
    corpus = load_corpus(args.manifest)
    sim = load_similarity(args.scores)
    evaluate = evaluate_v2t if args.task == "v2t" else evaluate_t2v
    overall = evaluate(sim, corpus, args.ks)
    payload: dict = overall.to_dict()
    if args.subset_by != "none":
        subsets: dict[str, dict | None] = {}
        for name, vids in partition_subsets(corpus, args.subset_by).items():
            if not vids:
                subsets[name] = None
                continue
            sub_sim, sub_corpus = restrict_to_videos(sim, corpus, vids)
            subsets[name] = evaluate(sub_sim, sub_corpus, args.ks).to_dict()
        payload = {"overall": overall.to_dict(), "subsets": subsets}
    _write_json(args.out, payload)
    if args.csv:
        _atomic_write_text(Path(args.csv), metrics_csv(overall))
    if args.figures:
        from .figures import recall_figure

        recall_figure(overall, _figures_dir(args.figures) / f"recall_{args.task}.png")
    _emit({
        "median_rank": overall.median_rank,
        "out": args.out,
        "task": args.task,
    })
    return 0


def _cmd_diagnose_collapse(args) -> int:
    _require(args, "diagnose-collapse", "--manifest", "--out")
    corpus = load_corpus(args.manifest)
    head = load_head(args.head) if args.head else None
    report = collapse_diagnostic(
        corpus, head=head, include_self_pairs=not args.no_self_pairs
    )
    _write_json(args.out, report.to_dict())
    if args.csv:
        _atomic_write_text(Path(args.csv), collapse_csv(report))
    if args.figures:
        from .figures import collapse_figure

        collapse_figure(report, _figures_dir(args.figures) / "collapse.png")
    _emit({"mean": report.mean, "out": args.out, "variance": report.variance})
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "select-events": _cmd_select_events,
    "score": _cmd_score,
    "loss-eval": _cmd_loss_eval,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "diagnose-collapse": _cmd_diagnose_collapse,
}


def _setup_logging() -> None:
    name = os.environ.get("MEVTR_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="mevtr: %(levelname)s: %(message)s"
    )


def run(argv=None) -> int:
    """Entry point returning the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        parser, submap = _build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            raise _UsageError("mevtr: a subcommand is required (see --help)")
        if args.config:
            conf = _load_config(args.config)
            used: set = set()
            sub_defaults = _config_defaults(_SUBCOMMANDS[args.command][1], conf, used)
            global_defaults = _config_defaults(_GLOBAL_OPTS, conf, used)
            ignored = set(conf) - used
            if ignored:
                _log.debug("config keys not used by %s: %s", args.command, sorted(ignored))
            parser, submap = _build_parser()
            parser.set_defaults(**global_defaults)
            submap[args.command].set_defaults(**sub_defaults)
            args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help/--version
        code = exc.code
        return int(code) if isinstance(code, int) else 0
    except (InvariantError, TrainingDiverged) as exc:
        print(f"mevtr: error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, EmbeddingFormatError) as exc:
        print(f"mevtr: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mevtr: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
