"""Self-correcting refinement.

Rendered components are matched to tree containers by exact id, design/render
crop pairs are compared by the analysis prompt, and every component whose
verdict is needs_repair gets a targeted repair (full-unit replacement) in
parallel. The merge is a deterministic fold in component tree order, so repair
scheduling never changes the output layout.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from PIL import Image

from .codegen import CodeUnit, GeneratedPage, component_name, validate_unit_source
from .grouping import ComponentNode, StageError
from .llm import (
    DEFAULT_MAX_CONCURRENCY,
    ResponseParseError,
    extract_json_payload,
    load_template,
    render_prompt,
    send,
    strip_code_fences,
)
from .metadata import BBox, DesignDocument, EmptyCrop, crop_region

log = logging.getLogger(__name__)


class MalformedSnapshot(Exception):
    """Snapshot file violates the render-snapshot contract."""


class Verdict(str, Enum):
    OK = "ok"
    NEEDS_REPAIR = "needs_repair"


@dataclass(frozen=True)
class RenderElement:
    node_id: str
    bbox: BBox
    kind: str
    text: str | None = None
    parent_id: str | None = None


@dataclass(frozen=True)
class RenderSnapshot:
    screenshot_path: str
    screenshot: Image.Image
    elements: tuple[RenderElement, ...]

    def element_by_id(self, node_id: str) -> RenderElement | None:
        return next((e for e in self.elements if e.node_id == node_id), None)


@dataclass(frozen=True)
class MatchedComponent:
    node: ComponentNode
    element: RenderElement


@dataclass(frozen=True)
class ComponentPair:
    node_id: str
    original_crop: Image.Image
    rendered_crop: Image.Image
    original_bbox: BBox
    rendered_bbox: BBox


@dataclass(frozen=True)
class RepairSuggestion:
    node_id: str
    text: str
    verdict: Verdict


@dataclass(frozen=True)
class RoundReport:
    suggestions: tuple[RepairSuggestion, ...]
    repaired_ids: tuple[str, ...]
    unmatched_snapshot_ids: tuple[str, ...]


@dataclass(frozen=True)
class RefineResult:
    page: GeneratedPage
    rounds: tuple[RoundReport, ...]


ABSENT_SUGGESTION = "component absent in render"
EMPTY_RENDER_SUGGESTION = (
    "rendered region is empty; re-emit the component with its declared geometry"
)


def load_render_snapshot(path: str | Path) -> RenderSnapshot:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MalformedSnapshot(f"cannot read snapshot {path}: {exc}") from exc
    if not isinstance(raw, dict) or "screenshot" not in raw or "elements" not in raw:
        raise MalformedSnapshot("snapshot needs `screenshot` and `elements`")
    shot_path = Path(raw["screenshot"])
    if not shot_path.is_absolute():
        shot_path = path.parent / shot_path
    try:
        with Image.open(shot_path) as img:
            screenshot = img.convert("RGBA")
    except OSError as exc:
        raise MalformedSnapshot(f"cannot open snapshot screenshot: {exc}") from exc
    if not isinstance(raw["elements"], list):
        raise MalformedSnapshot("`elements` must be an array")
    elements = []
    seen: set[str] = set()
    width, height = screenshot.size
    for i, entry in enumerate(raw["elements"]):
        if not isinstance(entry, dict) or "id" not in entry or "bbox" not in entry:
            raise MalformedSnapshot(f"element {i} needs `id` and `bbox`")
        node_id = entry["id"]
        if not isinstance(node_id, str):
            raise MalformedSnapshot(f"element {i} id must be a string")
        if node_id in seen:
            raise MalformedSnapshot(f"duplicate element id {node_id!r}")
        seen.add(node_id)
        try:
            bbox = BBox.from_values(entry["bbox"])
        except Exception as exc:
            raise MalformedSnapshot(f"element {node_id!r} bbox invalid: {exc}") from exc
        if bbox.x < 0 or bbox.y < 0 or bbox.right > width or bbox.bottom > height:
            raise MalformedSnapshot(
                f"element {node_id!r} bbox {bbox.as_list()} outside screenshot {width}x{height}"
            )
        kind = entry.get("kind", "unknown")
        if not isinstance(kind, str):
            raise MalformedSnapshot(f"element {node_id!r} kind must be a string")
        text = entry.get("text")
        if text is not None and not isinstance(text, str):
            raise MalformedSnapshot(f"element {node_id!r} text must be a string")
        parent = entry.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise MalformedSnapshot(f"element {node_id!r} parent must be a string")
        elements.append(
            RenderElement(node_id=node_id, bbox=bbox, kind=kind, text=text, parent_id=parent)
        )
    return RenderSnapshot(
        screenshot_path=str(shot_path), screenshot=screenshot, elements=tuple(elements)
    )


def match_components(
    root: ComponentNode, snapshot: RenderSnapshot
) -> tuple[list[MatchedComponent], list[str], list[str]]:
    """Exact-id match over container nodes (root included)."""
    containers = [n for n in root.walk() if n.is_container]
    by_id = {e.node_id: e for e in snapshot.elements}
    matched = []
    unmatched_tree = []
    for node in containers:
        element = by_id.get(node.id)
        if element is None:
            unmatched_tree.append(node.id)
        else:
            matched.append(MatchedComponent(node=node, element=element))
    container_ids = {n.id for n in containers}
    unmatched_snapshot = [e.node_id for e in snapshot.elements if e.node_id not in container_ids]
    return matched, unmatched_tree, unmatched_snapshot


def extract_pair_images(
    doc: DesignDocument, snapshot: RenderSnapshot, match: MatchedComponent
) -> ComponentPair:
    original = crop_region(doc.screenshot, match.node.bbox)
    rendered = crop_region(snapshot.screenshot, match.element.bbox)
    return ComponentPair(
        node_id=match.node.id,
        original_crop=original,
        rendered_crop=rendered,
        original_bbox=match.node.bbox,
        rendered_bbox=match.element.bbox,
    )


def analyze_pair(pair: ComponentPair, backend: Any) -> RepairSuggestion:
    """Verdict + suggestion from the two crops (design first, render second)."""
    template = load_template("analysis")
    request = render_prompt(
        template,
        {"node_id": pair.node_id, "extra_instructions": ""},
        [pair.original_crop, pair.rendered_crop],
    )
    response = send(request, backend)
    payload = extract_json_payload(response.text)
    if not isinstance(payload, dict):
        raise ResponseParseError("analysis response must be a JSON object")
    verdict_raw = payload.get("verdict")
    try:
        verdict = Verdict(verdict_raw)
    except ValueError:
        raise ResponseParseError(f"unparseable verdict {verdict_raw!r}")
    suggestion = payload.get("suggestion", "")
    if not isinstance(suggestion, str):
        raise ResponseParseError("suggestion must be a string")
    if verdict is Verdict.OK:
        suggestion = ""
    return RepairSuggestion(node_id=pair.node_id, text=suggestion, verdict=verdict)


def repair_component(
    unit: CodeUnit,
    suggestion: RepairSuggestion,
    backend: Any,
    *,
    subtree: ComponentNode,
    child_names: set[str],
) -> CodeUnit:
    """Full-replacement repair; invalid replacements never displace the original."""
    template = load_template("repair")
    request = render_prompt(
        template,
        {
            "component_code": unit.source,
            "suggestion": suggestion.text,
            "extra_instructions": "",
        },
        [],
    )
    try:
        response = send(request, backend)
        source = strip_code_fences(response.text).strip("\n")
        if not source:
            raise ResponseParseError("empty repair source")
        deps = validate_unit_source(source, subtree, child_names)
    except Exception as exc:
        log.warning("repair of %s rejected (%s); keeping original", unit.node_id, exc)
        return unit
    return CodeUnit(node_id=unit.node_id, name=unit.name, source=source, dependencies=deps)


def refine_page(
    page: GeneratedPage,
    doc: DesignDocument,
    snapshot: RenderSnapshot,
    backend: Any,
    rounds: int = 1,
) -> RefineResult:
    """match → extract → analyze → repair → ordered merge, per round."""
    if rounds < 1:
        raise ValueError("rounds must be ≥ 1")
    containers = {n.id: n for n in page.root.walk() if n.is_container}
    child_names_by_id = {
        n.id: {component_name(c) for c in n.children if c.is_container}
        for n in containers.values()
    }
    workers = max(1, getattr(backend, "max_concurrency", DEFAULT_MAX_CONCURRENCY))
    reports: list[RoundReport] = []

    for _ in range(rounds):
        matched, unmatched_tree, unmatched_snapshot = match_components(page.root, snapshot)
        suggestions: list[RepairSuggestion] = [
            RepairSuggestion(node_id=nid, text=ABSENT_SUGGESTION, verdict=Verdict.NEEDS_REPAIR)
            for nid in unmatched_tree
        ]

        def analyze(match: MatchedComponent) -> RepairSuggestion:
            try:
                pair = extract_pair_images(doc, snapshot, match)
            except EmptyCrop:
                return RepairSuggestion(
                    node_id=match.node.id,
                    text=EMPTY_RENDER_SUGGESTION,
                    verdict=Verdict.NEEDS_REPAIR,
                )
            try:
                return analyze_pair(pair, backend)
            except Exception as exc:
                raise StageError("analysis", match.node.id, exc) from exc

        if workers == 1 or len(matched) <= 1:
            suggestions.extend(analyze(m) for m in matched)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                suggestions.extend(pool.map(analyze, matched))

        units_by_id = {u.node_id: u for u in page.units}
        to_repair = [
            s
            for s in suggestions
            if s.verdict is Verdict.NEEDS_REPAIR and s.node_id in units_by_id
        ]

        def run_repair(s: RepairSuggestion) -> CodeUnit:
            return repair_component(
                units_by_id[s.node_id],
                s,
                backend,
                subtree=containers[s.node_id],
                child_names=child_names_by_id[s.node_id],
            )

        if workers == 1 or len(to_repair) <= 1:
            repaired = [run_repair(s) for s in to_repair]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                repaired = list(pool.map(run_repair, to_repair))

        replaced = {u.node_id: u for u in repaired}
        repaired_ids = tuple(
            u.node_id for u in page.units if u.node_id in replaced
            and replaced[u.node_id].source != u.source
        )
        merged_units = tuple(replaced.get(u.node_id, u) for u in page.units)
        page = GeneratedPage(
            root=page.root, units=merged_units, entry=page.entry, stylesheet=page.stylesheet
        )
        reports.append(
            RoundReport(
                suggestions=tuple(suggestions),
                repaired_ids=repaired_ids,
                unmatched_snapshot_ids=tuple(unmatched_snapshot),
            )
        )
        if not any(s.verdict is Verdict.NEEDS_REPAIR for s in suggestions):
            break
    return RefineResult(page=page, rounds=tuple(reports))
