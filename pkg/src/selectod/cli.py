"""Command-line entry point: ``selectod {generate-corpus,train,eval,gradcheck,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import corpus as C
from . import evaluator as E
from . import objectives as O

logger = logging.getLogger("selectod")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flags, unreadable or invalid configuration, missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path, what: str = "config") -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def write_manifest(out_dir, command: str, config_path, seed, corpus_dir, started: str, **extra) -> str:
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "code_version": code_version(),
        "corpus_hash": C.corpus_hash(corpus_dir) if corpus_dir else None,
        "output_dir": str(out_dir),
        "started_at": started,
        "finished_at": _now(),
        **extra,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    write_json(path, manifest)
    return path


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return (p if p.is_absolute() else base / p).resolve()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_corpus(args) -> int:
    started = _now()
    spec = read_json(args.config, "corpus spec")
    if args.seed is not None:
        spec["seed"] = args.seed
    try:
        corpus = C.generate_corpus(spec)
        C.validate_corpus(corpus)
    except (C.CorpusError, TypeError) as exc:
        raise UsageError(f"invalid corpus spec: {exc}") from None
    out = args.out or "corpus"
    files = C.save_corpus(corpus, out)
    write_manifest(out, "generate-corpus", args.config, spec.get("seed", 0), out, started, files=sorted(os.path.basename(f) for f in files))
    print(f"wrote {len(corpus.dialogues)} dialogues to {out} (" + ", ".join(f"{k}={len(v)}" for k, v in corpus.splits.items()) + ")")
    return EXIT_OK


def load_train_config(path, variant=None, seed=None, out=None):
    """Parse a training config file; returns ``(corpus_dir, model_kwargs, TrainConfig, out_dir)``."""
    from .trainer import TrainConfig

    raw = read_json(path)
    unknown = set(raw) - {"corpus", "model", "train", "out"}
    if unknown:
        raise UsageError(f"{sorted(unknown)[0]}: unknown config section")
    if "corpus" not in raw:
        raise UsageError("corpus: required config entry missing")
    base = Path(path).resolve().parent
    train_raw = dict(raw.get("train", {}))
    if variant is not None:
        train_raw["variant"] = variant
    if seed is not None:
        train_raw["seed"] = seed
    try:
        tcfg = TrainConfig.from_dict(train_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train: {exc}") from None
    model_raw = dict(raw.get("model", {}))
    if "vocab_size" in model_raw:
        raise UsageError("model.vocab_size: taken from the corpus, do not set it")
    out_dir = out or _resolve(base, raw.get("out")) or Path("runs") / tcfg.variant
    return _resolve(base, raw["corpus"]), model_raw, tcfg, Path(out_dir)


def cmd_train(args) -> int:
    from .model import ModelConfig, TODModel
    from .trainer import TrainingAborted, train

    started = _now()
    corpus_dir, model_raw, tcfg, out = load_train_config(args.config, args.variant, args.seed, args.out)
    if args.resume and not os.path.exists(os.path.join(args.resume, "manifest.json")):
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    try:
        corpus = C.load_corpus(corpus_dir)
    except C.CorpusError as exc:
        raise UsageError(str(exc)) from None
    model_raw.setdefault("n_span_tags", len(corpus.tag_names))
    try:
        mcfg = ModelConfig(vocab_size=len(corpus.vocab), **model_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model: {exc}") from None
    model = None
    if args.resume:
        model = TODModel.load(args.resume)
        if model.config != mcfg:
            raise UsageError("resume checkpoint was trained with a different model config")
    os.makedirs(out, exist_ok=True)
    write_json(out / "config.json", {"corpus": str(corpus_dir), "model": mcfg.to_dict(), "train": tcfg.to_dict()})
    try:
        state, model = train(corpus, mcfg, tcfg, out_dir=str(out), model=model)
    except TrainingAborted as exc:
        write_json(out / "abort.json", exc.record)
        write_manifest(out, "train", args.config, tcfg.seed, corpus_dir, started, status="aborted", variant=tcfg.variant)
        print(f"training aborted: {exc} (component={exc.record.get('component')}, step={exc.record.get('step')})", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(
        out, "train", args.config, tcfg.seed, corpus_dir, started,
        status="ok", variant=tcfg.variant, steps=state.step, best_checkpoint=state.best_checkpoint, best_dev_score=state.best_score,
    )
    print(f"trained {tcfg.variant} for {state.step} steps; best dev combined {state.best_score:.2f}; checkpoint {state.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import TODModel

    started = _now()
    if not args.corpus:
        raise UsageError("--corpus is required")
    if bool(args.checkpoint) == bool(args.oracle_model):
        raise UsageError("give exactly one of --checkpoint or --oracle-model")
    if args.checkpoint and not os.path.exists(os.path.join(args.checkpoint, "manifest.json")):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        corpus = C.load_corpus(args.corpus)
    except C.CorpusError as exc:
        raise UsageError(str(exc)) from None
    if args.oracle_model:
        source = E.OracleGenerator(corpus)
        variant, n_params, name = "oracle", "-", args.name or "Oracle"
    else:
        model = TODModel.load(args.checkpoint, drop_selection_heads=args.drop_selection_heads)
        _, manifest = _checkpoint_manifest(args.checkpoint)
        source = model
        variant = manifest.get("variant", "unknown")
        n_params = model.n_parameters(variant)
        name = args.name or Path(args.checkpoint).resolve().parent.name
    report = E.evaluate(source, corpus, args.split, max_len=args.max_len, oracle_belief=args.oracle_belief)
    out = Path(args.out or "eval")
    os.makedirs(out, exist_ok=True)
    report.save(out / "metrics.json")
    summary = {
        "model": name,
        "variant": variant,
        "parameters": n_params,
        "split": args.split,
        "oracle_belief": args.oracle_belief,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        **report.headline(),
    }
    if args.checkpoint:
        log = Path(args.checkpoint).resolve().parent / "train_log.jsonl"
        summary["train_log"] = str(log) if log.exists() else None
    write_json(out / "summary.json", summary)
    write_manifest(out, "eval", None, None, args.corpus, started, split=args.split, checkpoint=summary["checkpoint"])
    h = report.headline()
    print(f"{name} [{variant}] {args.split}: Inform {h['inform']:.2f} Success {h['success']:.2f} BLEU {h['bleu']:.2f} Score {h['combined']:.2f}")
    return EXIT_OK


def _checkpoint_manifest(path):
    from .tensor import load_tensors

    return load_tensors(path)


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import gradcheck as GC

    started = _now()
    if args.dtype != "float64":
        raise UsageError("gradient checks run in 64-bit only (--dtype float64)")
    opts = {"n_samples": 200, "seed": 0, "tau": 1.0, "tolerance": 1e-4, "step": 1e-5}
    if args.config:
        raw = read_json(args.config)
        unknown = set(raw) - set(opts)
        if unknown:
            raise UsageError(f"{sorted(unknown)[0]}: unknown gradcheck option")
        opts.update(raw)
    if args.seed is not None:
        opts["seed"] = args.seed
    out = Path(args.out or "gradcheck")
    os.makedirs(out, exist_ok=True)
    result = {"options": opts, "dtype": "float64"}

    if args.argmax:
        norms = GC.selection_gradient_norms("differentiable", hardening="argmax", seed=opts["seed"], tau=opts["tau"], dtype=np.float64)
        zero = norms["response_decoder"] == 0.0
        result["negative_control"] = {"hardening": "argmax", "selection_grad_norms": norms, "decoder_gradient_zero": zero, "expected": "fail", "as_expected": zero}
        write_json(out / "gradcheck.json", result)
        write_manifest(out, "gradcheck", args.config, opts["seed"], None, started, negative_control=True)
        if zero:
            print("EXPECTED-FAIL negative control: argmax hardening gives a zero selection gradient on the response decoder")
            return EXIT_OK
        print(f"negative control violated: decoder gradient norm {norms['response_decoder']:.3e} with argmax", file=sys.stderr)
        return EXIT_RUNTIME

    variants = [O.normalize_variant(args.variant)] if args.variant else ["after_encoder", "differentiable"]
    ok = True
    result["checks"] = {}
    for v in variants:
        chk = GC.check_joint_loss(v, opts["n_samples"], opts["seed"], opts["tau"], opts["tolerance"], opts["step"])
        entry = chk.to_dict()
        if v != "none":
            entry["selection_grad_norms"] = GC.selection_gradient_norms(v, seed=opts["seed"], tau=opts["tau"])
        result["checks"][v] = entry
        ok &= chk.passed
        status = "PASS" if chk.passed else "FAIL"
        print(f"{status} {v}: max rel error {chk.report.max_rel_error:.2e} over {chk.report.n_checked} entries")
    write_json(out / "gradcheck.json", result)
    write_manifest(out, "gradcheck", args.config, opts["seed"], None, started, passed=ok)
    return EXIT_OK if ok else EXIT_RUNTIME


def _load_rows(paths) -> tuple[list, list]:
    """Table rows and training logs from run directories or summary JSON files."""
    rows, logs = [], []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            f = p / "summary.json"
            if not f.exists():
                f = p / "metrics.json"
            if not f.exists():
                raise UsageError(f"{p}: no summary.json or metrics.json")
            entries = [read_json(f, "summary")]
            default_name = p.name
        else:
            data = read_json(p, "summary")
            entries = data if isinstance(data, list) else [data]
            default_name = p.stem
        for i, d in enumerate(entries):
            missing = [k for k in ("inform", "success", "bleu") if k not in d]
            if missing:
                raise UsageError(f"{p}: entry {i} lacks {missing[0]!r}")
            name = d.get("model") or (default_name if len(entries) == 1 else f"{default_name}[{i}]")
            rows.append(E.comparison_row(name, d.get("variant", "-"), d.get("parameters", "-"), d))
            if d.get("train_log"):
                logs.append((name, d["train_log"]))
    return rows, logs


def _plots(rows, logs, out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(rows), 3.2))
    keys = ("Inform", "Success", "BLEU", "Score")
    width = 0.8 / len(keys)
    for j, k in enumerate(keys):
        ax.bar([i + j * width for i in range(len(rows))], [r[k] for r in rows], width, label=k)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels([r["Model"] for r in rows], fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "metrics.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append("metrics.png")
    if logs:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for name, path in logs:
            if not os.path.exists(path):
                continue
            steps, vals = [], []
            with open(path) as fh:
                for line in fh:
                    rec = json.loads(line)
                    if "total" in rec and rec.get("event") is None:
                        steps.append(rec["step"])
                        vals.append(rec["total"])
            ax.plot(steps, vals, label=name, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append("loss_curves.png")
    return written


def cmd_report(args) -> int:
    started = _now()
    if not args.runs:
        raise UsageError("report needs at least one run directory or summary file")
    rows, logs = _load_rows(args.runs)
    out = Path(args.out or "report")
    os.makedirs(out, exist_ok=True)
    md = E.format_table(rows, "markdown")
    (out / "table.md").write_text(md)
    (out / "table.csv").write_text(E.format_table(rows, "csv"))
    files = ["table.md", "table.csv"]
    if not args.no_plots:
        files += _plots(rows, logs, out)
    write_manifest(out, "report", None, None, None, started, runs=[str(r) for r in args.runs], files=files)
    print(md, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selectod", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-corpus", help="generate a synthetic corpus from a JSON spec")
    g.add_argument("--config", required=True, help="corpus spec (JSON)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (default: corpus)")
    g.set_defaults(func=cmd_generate_corpus)

    t = sub.add_parser("train", help="train one variant from a JSON config")
    t.add_argument("--config", required=True, help="training config (JSON)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path)
    t.add_argument("--variant", choices=["none", "after-encoder", "differentiable"])
    t.add_argument("--resume", help="checkpoint directory to initialise weights from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="end-to-end evaluation of a checkpoint on a corpus split")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle-model", action="store_true", help="score ground-truth outputs instead of a model")
    e.add_argument("--corpus", help="corpus directory")
    e.add_argument("--split", choices=list(C.SPLITS), default="test")
    e.add_argument("--oracle-belief", action="store_true", help="feed ground-truth belief states to the response decoder")
    e.add_argument("--drop-selection-heads", action="store_true")
    e.add_argument("--max-len", type=int, default=48)
    e.add_argument("--name", help="row label for reports")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the joint loss on a tiny model")
    c.add_argument("--config", help="options (JSON): n_samples, seed, tau, tolerance, step")
    c.add_argument("--seed", type=int)
    c.add_argument("--variant", choices=["none", "after-encoder", "differentiable"])
    c.add_argument("--argmax", action="store_true", help="negative control: replace straight-through with argmax")
    c.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="comparison table and plots from eval outputs")
    r.add_argument("runs", nargs="*", help="eval output directories or summary JSON files")
    r.add_argument("--out")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
