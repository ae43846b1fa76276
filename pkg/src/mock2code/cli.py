"""Command-line surface: group, generate, refine, evaluate, run, record.

A single JSON config file drives every command; flags override config values.
Artifacts carry no wall-clock data so replay runs are byte-identical; the run
log is the only time-bearing file.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click
from PIL import Image

from . import codegen, grouping, llm, metrics, refine
from .metadata import (
    DimensionMismatch,
    EmptyCrop,
    EmptyInput,
    MalformedDocument,
    SchemaViolation,
    load_design_document,
)

log = logging.getLogger(__name__)

EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_INVARIANT = 4

LOCK_NAME = ".mock2code.lock"
RUN_LOG_NAME = "run.log"


class ConfigError(Exception):
    """Config file or flag combination violates the RunConfig contract."""


@dataclass(frozen=True)
class RunConfig:
    backend_mode: str = "replay"
    base_url: str | None = None
    model: str | None = None
    transcript_path: str | None = None
    max_concurrency: int = llm.DEFAULT_MAX_CONCURRENCY
    refine_rounds: int = 1
    style_mode: str = "deterministic"
    output_dir: str = "out"

    def validated(self, needs_backend: bool = True) -> "RunConfig":
        if self.backend_mode not in ("live", "replay"):
            raise ConfigError(f"backend mode must be live or replay, got {self.backend_mode!r}")
        if needs_backend:
            if self.backend_mode == "replay" and not self.transcript_path:
                raise ConfigError("replay mode requires a transcript path")
            if self.backend_mode == "live" and not (self.base_url and self.model):
                raise ConfigError("live mode requires base_url and model")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be ≥ 1")
        if self.refine_rounds < 1:
            raise ConfigError("refine_rounds must be ≥ 1")
        if self.style_mode not in ("deterministic", "llm"):
            raise ConfigError(f"style_mode must be deterministic or llm, got {self.style_mode!r}")
        return self


_CONFIG_KEYS = {"backend", "max_concurrency", "refine_rounds", "style_mode", "output_dir"}
_BACKEND_KEYS = {"mode", "base_url", "model", "transcript_path"}


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    backend = raw.get("backend", {})
    if not isinstance(backend, dict):
        raise ConfigError("`backend` must be an object")
    unknown = set(backend) - _BACKEND_KEYS
    if unknown:
        raise ConfigError(f"unknown backend keys: {', '.join(sorted(unknown))}")
    try:
        return RunConfig(
            backend_mode=backend.get("mode", "replay"),
            base_url=backend.get("base_url"),
            model=backend.get("model"),
            transcript_path=backend.get("transcript_path"),
            max_concurrency=int(raw.get("max_concurrency", llm.DEFAULT_MAX_CONCURRENCY)),
            refine_rounds=int(raw.get("refine_rounds", 1)),
            style_mode=raw.get("style_mode", "deterministic"),
            output_dir=raw.get("output_dir", "out"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config values malformed: {exc}") from exc


def apply_flags(
    config: RunConfig,
    backend: str | None,
    transcript: str | None,
    out: str | None,
    refine_rounds: int | None,
    style_mode: str | None,
    needs_backend: bool = True,
) -> RunConfig:
    if backend is not None:
        config = replace(config, backend_mode=backend)
    if transcript is not None:
        config = replace(config, transcript_path=transcript)
    if out is not None:
        config = replace(config, output_dir=out)
    if refine_rounds is not None:
        config = replace(config, refine_rounds=refine_rounds)
    if style_mode is not None:
        config = replace(config, style_mode=style_mode)
    return config.validated(needs_backend)


def build_backend(config: RunConfig, record_to: str | None = None):
    if config.backend_mode == "replay":
        store = llm.TranscriptStore.load(config.transcript_path)
        return llm.ReplayBackend(store, max_concurrency=config.max_concurrency), None
    live = llm.LiveBackend(
        base_url=config.base_url,
        model=config.model,
        max_concurrency=config.max_concurrency,
    )
    if record_to is not None:
        store = llm.TranscriptStore()
        return llm.RecordingBackend(live, store), store
    return live, None


# ---------------------------------------------------------------------------
# Error mapping

_INPUT_ERRORS = (
    MalformedDocument,
    SchemaViolation,
    DimensionMismatch,
    refine.MalformedSnapshot,
    llm.ResponseParseError,
    ConfigError,
    metrics.DegenerateReference,
    metrics.MissingBBox,
    metrics.EmptyImage,
    metrics.ImageTooSmall,
    EmptyInput,
    EmptyCrop,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    json.JSONDecodeError,
    UnicodeDecodeError,
    ValueError,
)
_BACKEND_ERRORS = (
    llm.TransportError,
    llm.AuthError,
    llm.ReplayMiss,
    metrics.EmbeddingServiceError,
)
_INVARIANT_ERRORS = (
    grouping.DivisionCountError,
    grouping.ArityMismatch,
    codegen.UnknownNodeReference,
    codegen.MalformedCodeUnit,
    codegen.DanglingDependency,
    llm.DigestCollision,
    llm.UnboundPlaceholder,
    llm.ImageArityMismatch,
)


def _exit_code_for(exc: BaseException) -> int | None:
    cause = exc
    while isinstance(cause, grouping.StageError):
        cause = cause.cause
    if isinstance(cause, _BACKEND_ERRORS):
        return EXIT_BACKEND
    if isinstance(cause, _INVARIANT_ERRORS):
        return EXIT_INVARIANT
    if isinstance(cause, _INPUT_ERRORS):
        return EXIT_INPUT
    return None


def _run_guarded(fn):
    try:
        fn()
    except Exception as exc:
        code = _exit_code_for(exc)
        if code is None:
            raise
        log.error("%s", exc)
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(code)


class _OutputLock:
    """Guards an output directory against concurrent commands."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME
        self.fd: int | None = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another command ({self.path}); "
                "remove the lock file if that command crashed"
            )
        return self

    def __exit__(self, *exc_info):
        if self.fd is not None:
            os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False


def _setup_run_log(out_dir: Path) -> logging.Handler:
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / RUN_LOG_NAME, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("mock2code")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _teardown_run_log(handler: logging.Handler) -> None:
    logging.getLogger("mock2code").removeHandler(handler)
    handler.close()


# ---------------------------------------------------------------------------
# Command bodies (shared by the click entry points and cmd_run)

def _do_group(doc_path: str, config: RunConfig, backend) -> Path:
    doc = load_design_document(doc_path)
    tree = grouping.run_grouping_chain(doc, backend)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree_path = out / "tree.json"
    tree_path.write_text(grouping.serialize_tree(tree.root), encoding="utf-8")
    log.info("grouping: %d divisions -> %s", len(tree.divisions), tree_path)
    return tree_path


def _do_generate(doc_path: str, tree_path: str, config: RunConfig, backend) -> Path:
    doc = load_design_document(doc_path)
    root = grouping.parse_tree(Path(tree_path).read_text(encoding="utf-8"))
    page = codegen.run_codegen(root, doc, backend, style_mode=config.style_mode)
    out = Path(config.output_dir)
    codegen.write_page(page, out)
    log.info("codegen: %d units -> %s", len(page.units), out)
    return out


def _do_refine(
    page_dir: str,
    tree_path: str,
    doc_path: str,
    snapshot_path: str,
    config: RunConfig,
    backend,
) -> Path:
    doc = load_design_document(doc_path)
    snapshot = refine.load_render_snapshot(snapshot_path)
    page = codegen.load_page(page_dir, tree_path=tree_path)
    result = refine.refine_page(page, doc, snapshot, backend, rounds=config.refine_rounds)
    out = Path(page_dir)
    codegen.write_page(result.page, out)
    suggestions = [
        [
            {
                "node_id": s.node_id,
                "verdict": s.verdict.value,
                "suggestion": s.text,
                "repaired": s.node_id in report.repaired_ids,
            }
            for s in report.suggestions
        ]
        for report in result.rounds
    ]
    (out / "suggestions.json").write_text(
        json.dumps({"rounds": suggestions}, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    repaired_total = sum(len(r.repaired_ids) for r in result.rounds)
    log.info("refine: %d rounds, %d repairs -> %s", len(result.rounds), repaired_total, out)
    return out


def _do_evaluate(
    pred_tree_path: str,
    truth_tree_path: str,
    pred_image_path: str | None,
    truth_image_path: str | None,
    report_path: str | None,
    config: RunConfig,
) -> Path:
    pred_tree = metrics.load_metric_tree(pred_tree_path)
    truth_tree = metrics.load_metric_tree(truth_tree_path)
    pred_image = truth_image = None
    if pred_image_path and truth_image_path:
        with Image.open(pred_image_path) as img:
            pred_image = img.convert("RGBA")
        with Image.open(truth_image_path) as img:
            truth_image = img.convert("RGBA")
    embed_url = os.environ.get(metrics.EMBED_URL_ENV)
    report = metrics.evaluate(
        pred_tree,
        truth_tree,
        pred_image=pred_image,
        truth_image=truth_image,
        embed_url=embed_url,
    )
    out = Path(report_path) if report_path else Path(config.output_dir) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out)
    _print_report_table(report)
    log.info("evaluate -> %s", out)
    return out


def _print_report_table(report: metrics.MetricReport) -> None:
    columns = [
        ("MSE↓", report.mse, "{:.2f}"),
        ("CLIP↑", report.clip, "{:.2f}"),
        ("SSIM↑", report.ssim, "{:.2f}"),
        ("TreeBLEU↑", report.tree_bleu, "{:.2f}"),
        ("Container Match↑", report.container_match, "{:.2f}"),
        ("Tree Edit Distance↓", report.ted, "{:.2f}"),
    ]
    header = []
    values = []
    for name, value, fmt in columns:
        text = "-" if value is None else fmt.format(value)
        width = max(len(name), len(text))
        header.append(name.ljust(width))
        values.append(text.ljust(width))
    click.echo("  ".join(header).rstrip())
    click.echo("  ".join(values).rstrip())


# ---------------------------------------------------------------------------
# click entry points

def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON config file.")(fn)
    fn = click.option("--backend", type=click.Choice(["live", "replay"]), default=None,
                      help="Backend mode override.")(fn)
    fn = click.option("--transcript", type=click.Path(), default=None,
                      help="Transcript path (replay input / record output).")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Output directory override.")(fn)
    return fn


def _prepare(config_path, backend, transcript, out, refine_rounds=None, style_mode=None,
             needs_backend=True) -> RunConfig:
    return apply_flags(load_config(config_path), backend, transcript, out,
                       refine_rounds, style_mode, needs_backend)


@click.group()
def main() -> None:
    """Mockup-to-code pipeline: grouping, generation, refinement, evaluation."""


@main.command("group")
@click.argument("doc_path", type=click.Path())
@_common_options
def group_cmd(doc_path, config_path, backend, transcript, out):
    """Infer a component tree from a design document."""

    def body():
        config = _prepare(config_path, backend, transcript, out)
        with _OutputLock(Path(config.output_dir)):
            handler = _setup_run_log(Path(config.output_dir))
            try:
                be, _ = build_backend(config)
                _do_group(doc_path, config, be)
            finally:
                _teardown_run_log(handler)

    _run_guarded(body)


@main.command("generate")
@click.argument("doc_path", type=click.Path())
@click.argument("tree_path", type=click.Path())
@click.option("--style-mode", type=click.Choice(["deterministic", "llm"]), default=None)
@_common_options
def generate_cmd(doc_path, tree_path, style_mode, config_path, backend, transcript, out):
    """Generate component code for an existing tree."""

    def body():
        config = _prepare(config_path, backend, transcript, out, style_mode=style_mode)
        with _OutputLock(Path(config.output_dir)):
            handler = _setup_run_log(Path(config.output_dir))
            try:
                be, _ = build_backend(config)
                _do_generate(doc_path, tree_path, config, be)
            finally:
                _teardown_run_log(handler)

    _run_guarded(body)


@main.command("refine")
@click.argument("page_dir", type=click.Path())
@click.argument("tree_path", type=click.Path())
@click.argument("doc_path", type=click.Path())
@click.argument("snapshot_path", type=click.Path())
@click.option("--refine-rounds", type=int, default=None)
@_common_options
def refine_cmd(page_dir, tree_path, doc_path, snapshot_path, refine_rounds,
               config_path, backend, transcript, out):
    """Refine a generated page against a render snapshot (in place)."""

    def body():
        config = _prepare(config_path, backend, transcript, out, refine_rounds=refine_rounds)
        with _OutputLock(Path(page_dir)):
            handler = _setup_run_log(Path(page_dir))
            try:
                be, _ = build_backend(config)
                _do_refine(page_dir, tree_path, doc_path, snapshot_path, config, be)
            finally:
                _teardown_run_log(handler)

    _run_guarded(body)


@main.command("evaluate")
@click.argument("pred_tree", type=click.Path())
@click.argument("truth_tree", type=click.Path())
@click.option("--pred-image", type=click.Path(), default=None)
@click.option("--truth-image", type=click.Path(), default=None)
@click.option("--report", "report_path", type=click.Path(), default=None)
@_common_options
def evaluate_cmd(pred_tree, truth_tree, pred_image, truth_image, report_path,
                 config_path, backend, transcript, out):
    """Score a predicted tree (and optional image) against ground truth."""

    def body():
        # pure offline command, no backend fields needed
        config = _prepare(config_path, backend, transcript, out, needs_backend=False)
        _do_evaluate(pred_tree, truth_tree, pred_image, truth_image, report_path, config)

    _run_guarded(body)


def _write_manifest(out: Path, refined: bool) -> Path:
    manifest = {
        "tree": "tree.json",
        "page": "page.src",
        "report": None,
        "log": RUN_LOG_NAME,
        "refine": "done" if refined else "skipped",
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _do_run(doc_path, snapshot_path, config: RunConfig, backend) -> Path:
    out = Path(config.output_dir)
    tree_path = _do_group(doc_path, config, backend)
    _do_generate(doc_path, str(tree_path), config, backend)
    refined = False
    if snapshot_path:
        _do_refine(str(out), str(out / "tree.json"), doc_path, snapshot_path, config, backend)
        refined = True
    return _write_manifest(out, refined)


@main.command("run")
@click.argument("doc_path", type=click.Path())
@click.option("--snapshot", "snapshot_path", type=click.Path(), default=None)
@click.option("--refine-rounds", type=int, default=None)
@click.option("--style-mode", type=click.Choice(["deterministic", "llm"]), default=None)
@_common_options
def run_cmd(doc_path, snapshot_path, refine_rounds, style_mode,
            config_path, backend, transcript, out):
    """Full pipeline: group, generate, and refine when a snapshot is given."""

    def body():
        config = _prepare(config_path, backend, transcript, out,
                          refine_rounds=refine_rounds, style_mode=style_mode)
        with _OutputLock(Path(config.output_dir)):
            handler = _setup_run_log(Path(config.output_dir))
            try:
                be, _ = build_backend(config)
                _do_run(doc_path, snapshot_path, config, be)
            finally:
                _teardown_run_log(handler)

    _run_guarded(body)


@main.command("record")
@click.argument("doc_path", type=click.Path())
@click.option("--snapshot", "snapshot_path", type=click.Path(), default=None)
@click.option("--refine-rounds", type=int, default=None)
@click.option("--style-mode", type=click.Choice(["deterministic", "llm"]), default=None)
@_common_options
def record_cmd(doc_path, snapshot_path, refine_rounds, style_mode,
               config_path, backend, transcript, out):
    """Run the pipeline against the live backend while writing a transcript."""

    def body():
        config = _prepare(config_path, "live", transcript, out,
                          refine_rounds=refine_rounds, style_mode=style_mode)
        if not config.transcript_path:
            raise ConfigError("record requires --transcript for the output path")
        with _OutputLock(Path(config.output_dir)):
            handler = _setup_run_log(Path(config.output_dir))
            try:
                be, store = build_backend(config, record_to=config.transcript_path)
                try:
                    _do_run(doc_path, snapshot_path, config, be)
                finally:
                    store.save(config.transcript_path)
                    log.info("transcript: %d entries -> %s", len(store), config.transcript_path)
            finally:
                _teardown_run_log(handler)

    _run_guarded(body)


if __name__ == "__main__":
    main()
