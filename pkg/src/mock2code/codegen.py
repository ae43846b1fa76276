"""Hierarchy-aware code generation.

Styles are synthesized bottom-up from layer metadata (deterministic by
default, optionally model-predicted per leaf), then each division sub-tree is
turned into declarative component sources by the model and assembled into a
page in tree order. Sources are treated as opaque text apart from node-id and
tag validation; nothing here compiles or renders them.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from .grouping import (
    ComponentNode,
    Tag,
    node_to_mapping,
    parse_tree,
    sanitize_label,
    serialize_tree,
)
from .llm import (
    DEFAULT_MAX_CONCURRENCY,
    ResponseParseError,
    extract_json_payload,
    load_template,
    render_prompt,
    send,
    strip_code_fences,
)
from .metadata import (
    BBox,
    DesignDocument,
    Layer,
    bbox_union,
    clamp_bbox,
    crop_region,
)

log = logging.getLogger(__name__)

# Canonical style vocabulary, in emission order.
STYLE_KEYS = (
    "left",
    "top",
    "width",
    "height",
    "font_size",
    "font_weight",
    "line_height",
    "color",
    "background_color",
    "border_width",
    "border_color",
    "corner_radius",
    "padding",
    "shadow",
    "opacity",
    "overflow",
)

MIN_WIDTH_PERCENT = 0.01

STYLE_REF_RE = re.compile(r"styles\.([A-Za-z_][A-Za-z0-9_]*)")
TAG_RE = re.compile(r"<([A-Za-z][A-Za-z0-9_]*)")
_TAG_VALUES = {t.value for t in Tag}


class UnknownNodeReference(Exception):
    """A code unit references a node id outside its sub-tree."""


class MalformedCodeUnit(Exception):
    """A code unit uses a tag that is neither built in nor a child component."""


class DanglingDependency(Exception):
    """A composed component name has no generated code unit."""


def px(value: int) -> str:
    return f"{value}px"


def pct(value: float) -> str:
    return f"{value:.2f}%"


def parse_px(value: str) -> int:
    if not value.endswith("px"):
        raise ValueError(f"not a px value: {value!r}")
    return int(value[:-2])


def parse_pct(value: str) -> float:
    if not value.endswith("%"):
        raise ValueError(f"not a percent value: {value!r}")
    return float(value[:-1])


def order_style(props: dict[str, str]) -> dict[str, str]:
    """Project onto the canonical vocabulary, in canonical order."""
    return {key: props[key] for key in STYLE_KEYS if key in props}


def _geometry(bbox: BBox, parent: BBox) -> dict[str, str]:
    left = max(0, bbox.x - parent.x)
    top = max(0, bbox.y - parent.y)
    if parent.w > 0:
        width = max(bbox.w / parent.w * 100.0, MIN_WIDTH_PERCENT)
    else:
        width = 100.0
    return {
        "left": px(left),
        "top": px(top),
        "width": pct(round(width, 2)),
        "height": px(bbox.h),
    }


def derive_leaf_style(layer: Layer, parent_bbox: BBox) -> dict[str, str]:
    """Deterministic leaf style: geometry relative to the parent, then paint."""
    clamped = clamp_bbox(layer.bbox, parent_bbox)
    bbox = clamped if clamped is not None else layer.bbox
    props = _geometry(bbox, parent_bbox)
    if layer.text is not None:
        props["font_size"] = px(layer.text.font_size)
        props["font_weight"] = str(layer.text.weight)
        line_height = layer.text.line_height if layer.text.line_height is not None else bbox.h
        props["line_height"] = px(line_height)
        props["color"] = layer.text.color
    style = layer.style
    if style.fill is not None:
        props["background_color"] = style.fill
    if style.border_width is not None:
        props["border_width"] = px(style.border_width)
    if style.border_color is not None:
        props["border_color"] = style.border_color
    if style.corner_radius is not None:
        props["corner_radius"] = px(style.corner_radius)
    if style.padding is not None:
        props["padding"] = px(style.padding)
    if style.shadow is not None:
        props["shadow"] = style.shadow.css()
    if style.opacity is not None:
        props["opacity"] = f"{style.opacity:g}"
    return order_style(props)


def aggregate_container_style(node: ComponentNode, parent_bbox: BBox | None = None) -> dict[str, str]:
    """Container style; `overflow: scroll` when children overrun the node height."""
    if parent_bbox is None:
        props = {"left": px(0), "top": px(0), "width": pct(100.0), "height": px(node.bbox.h)}
    else:
        props = _geometry(node.bbox, parent_bbox)
    if node.children:
        union = bbox_union([c.bbox for c in node.children])
        if union.h > node.bbox.h or union.bottom > node.bbox.bottom:
            props["overflow"] = "scroll"
    return order_style(props)


def predict_leaf_style_llm(layer: Layer, parent_bbox: BBox, backend: Any) -> dict[str, str]:
    """Model-predicted leaf style, sanitized against the canonical vocabulary.

    Unknown properties are dropped (logged), missing geometry is back-filled
    from the deterministic derivation, and an empty answer falls back to it
    entirely.
    """
    template = load_template("style")
    layer_json = json.dumps(
        {
            "id": layer.id,
            "type": layer.kind.value,
            "bbox": layer.bbox.as_list(),
            "style": layer.style.to_mapping(),
            "text": None
            if layer.text is None
            else {
                "content": layer.text.content,
                "font_size": layer.text.font_size,
                "weight": layer.text.weight,
                "color": layer.text.color,
            },
        },
        indent=2,
    )
    request = render_prompt(template, {"layer_json": layer_json, "extra_instructions": ""}, [])
    response = send(request, backend)
    fallback = derive_leaf_style(layer, parent_bbox)
    try:
        payload = extract_json_payload(response.text)
    except ResponseParseError:
        log.info("style prediction for %s unparseable; using derived style", layer.id)
        return fallback
    if isinstance(payload, dict) and "style_props" in payload:
        payload = payload["style_props"]
    if not isinstance(payload, dict) or not payload:
        return fallback
    props: dict[str, str] = {}
    for key, value in payload.items():
        if key not in STYLE_KEYS:
            log.info("style prediction for %s: dropping unknown prop %r", layer.id, key)
            continue
        if isinstance(value, (int, float)) and key in ("font_weight", "opacity"):
            value = f"{value:g}"
        if not isinstance(value, str):
            log.info("style prediction for %s: dropping non-string %r", layer.id, key)
            continue
        props[key] = value
    for key in ("left", "top", "width", "height"):
        props.setdefault(key, fallback[key])
    return order_style(props)


def synthesize_styles(
    root: ComponentNode,
    doc: DesignDocument,
    backend: Any = None,
    style_mode: str = "deterministic",
) -> ComponentNode:
    """Fill every node's style dict, bottom-up. Pure given the same inputs."""
    layer_index = {layer.id: layer for layer in doc.layers}

    def visit(node: ComponentNode, parent_bbox: BBox | None) -> ComponentNode:
        if not node.is_container:
            layer = layer_index.get(node.id)
            parent = parent_bbox if parent_bbox is not None else doc.screen_rect
            if layer is None:
                style = _geometry(node.bbox, parent)
            elif style_mode == "llm" and backend is not None:
                style = predict_leaf_style_llm(layer, parent, backend)
            else:
                style = derive_leaf_style(layer, parent)
            return replace(node, style=style)
        kids = tuple(visit(c, node.bbox) for c in node.children)
        node = replace(node, children=kids)
        return replace(node, style=aggregate_container_style(node, parent_bbox))

    return visit(root, None)


@dataclass(frozen=True)
class CodeUnit:
    node_id: str
    name: str
    source: str
    dependencies: tuple[str, ...]


@dataclass(frozen=True)
class GeneratedPage:
    """Units in bottom-up tree order; the entry is the synthesized root unit."""

    root: ComponentNode
    units: tuple[CodeUnit, ...]
    entry: str
    stylesheet: dict[str, dict[str, str]]

    @property
    def entry_unit(self) -> CodeUnit:
        return next(u for u in self.units if u.name == self.entry)


def component_name(node: ComponentNode) -> str:
    return sanitize_label(node.name, fallback="Component")


def validate_unit_source(source: str, subtree: ComponentNode, child_names: set[str]) -> tuple[str, ...]:
    """Check style references and tag closure; return the dependencies used."""
    node_ids = {n.id for n in subtree.walk()}
    for match in STYLE_REF_RE.finditer(source):
        if match.group(1) not in node_ids:
            raise UnknownNodeReference(
                f"styles.{match.group(1)} does not name a node in this sub-tree"
            )
    deps = []
    for match in TAG_RE.finditer(source):
        tag = match.group(1)
        if tag in _TAG_VALUES:
            continue
        if tag in child_names:
            if tag not in deps:
                deps.append(tag)
            continue
        raise MalformedCodeUnit(f"tag <{tag}> is neither built in nor a child component")
    return tuple(deps)


def parse_code_units_response(text: str) -> list[dict[str, str]]:
    payload = extract_json_payload(text)
    if isinstance(payload, dict) and "code_units" in payload:
        payload = payload["code_units"]
    if not isinstance(payload, list):
        raise ResponseParseError("code response must be a JSON array")
    units = []
    for i, entry in enumerate(payload):
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("node_id"), str)
            or not isinstance(entry.get("source"), str)
        ):
            raise ResponseParseError(f"code unit {i} needs string node_id and source")
        source = strip_code_fences(entry["source"]).rstrip("\n")
        units.append({"node_id": entry["node_id"], "source": source})
    return units


def generate_component_code(subtree: ComponentNode, sub_image, backend: Any) -> list[CodeUnit]:
    """One code unit per container in the sub-tree, children before parents."""
    template = load_template("code")
    bindings = {
        "component_name": component_name(subtree),
        "subtree_json": json.dumps(node_to_mapping(subtree), indent=2, ensure_ascii=False),
        "extra_instructions": "",
    }
    request = render_prompt(template, bindings, [sub_image])
    response = send(request, backend)
    try:
        raw_units = parse_code_units_response(response.text)
    except ResponseParseError as exc:
        retry = render_prompt(
            template,
            {
                **bindings,
                "extra_instructions": f"\nYour previous answer could not be parsed ({exc}). Answer with valid JSON only.",
            },
            [sub_image],
        )
        raw_units = parse_code_units_response(send(retry, backend).text)

    containers = [n for n in subtree.walk() if n.is_container]
    by_id = {c.id: c for c in containers}
    sources: dict[str, str] = {}
    for entry in raw_units:
        if entry["node_id"] not in by_id:
            raise UnknownNodeReference(f"code unit for unknown container {entry['node_id']!r}")
        sources[entry["node_id"]] = entry["source"]
    missing = [c.id for c in containers if c.id not in sources]
    if missing:
        raise UnknownNodeReference(f"no code unit for containers: {', '.join(missing)}")

    units = []
    for container in postorder_containers(subtree):
        child_names = {component_name(c) for c in container.children if c.is_container}
        source = sources[container.id]
        deps = validate_unit_source(source, container, child_names)
        units.append(
            CodeUnit(
                node_id=container.id,
                name=component_name(container),
                source=source,
                dependencies=deps,
            )
        )
    return units


def postorder_containers(node: ComponentNode) -> list[ComponentNode]:
    out: list[ComponentNode] = []

    def visit(n: ComponentNode) -> None:
        for c in n.children:
            if c.is_container:
                visit(c)
        if n.is_container:
            out.append(n)

    visit(node)
    return out


def _root_unit(root: ComponentNode) -> CodeUnit:
    """Deterministic page entry: backgrounds inlined, divisions composed in order."""
    tag = Tag.SCROLL_VIEW.value if root.style.get("overflow") == "scroll" else Tag.VIEW.value
    lines = [f"const {component_name(root)} = () => (", f"  <{tag} style={{styles.{root.id}}}>"]
    deps = []
    for child in root.children:
        if child.is_container:
            name = component_name(child)
            lines.append(f"    <{name} />")
            deps.append(name)
        else:
            lines.append(f"    <{child.tag.value} style={{styles.{child.id}}} />")
    lines.append(f"  </{tag}>")
    lines.append(");")
    return CodeUnit(
        node_id=root.id,
        name=component_name(root),
        source="\n".join(lines),
        dependencies=tuple(deps),
    )


def assemble_page(per_division_units: Sequence[Sequence[CodeUnit]], root: ComponentNode) -> GeneratedPage:
    """Concatenate division units in tree order and synthesize the entry unit."""
    units: list[CodeUnit] = [u for batch in per_division_units for u in batch]
    entry_unit = _root_unit(root)
    units.append(entry_unit)

    names = [u.name for u in units]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DanglingDependency(f"duplicate component names: {', '.join(dupes)}")
    available = set(names)
    for unit in units:
        for dep in unit.dependencies:
            if dep not in available:
                raise DanglingDependency(f"{unit.name} composes {dep}, which has no code unit")

    stylesheet = {n.id: dict(n.style) for n in root.walk()}
    return GeneratedPage(
        root=root, units=tuple(units), entry=entry_unit.name, stylesheet=stylesheet
    )


def run_codegen(
    root: ComponentNode,
    doc: DesignDocument,
    backend: Any,
    style_mode: str = "deterministic",
) -> GeneratedPage:
    """synthesize_styles → per-division P_code (concurrent) → assemble_page."""
    styled = synthesize_styles(root, doc, backend=backend, style_mode=style_mode)
    divisions = [c for c in styled.children if c.is_container]

    def gen(division: ComponentNode) -> list[CodeUnit]:
        sub_image = crop_region(doc.screenshot, division.bbox)
        return generate_component_code(division, sub_image, backend)

    workers = max(1, getattr(backend, "max_concurrency", DEFAULT_MAX_CONCURRENCY))
    if workers == 1 or len(divisions) <= 1:
        per_division = [gen(d) for d in divisions]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_division = list(pool.map(gen, divisions))
    return assemble_page(per_division, styled)


# ---------------------------------------------------------------------------
# Page directory layout: components/<Name>.src, page.src, styles.map, tree.json

def write_page(page: GeneratedPage, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    components = out / "components"
    components.mkdir(parents=True, exist_ok=True)
    written = []
    for unit in page.units:
        path = components / f"{unit.name}.src"
        path.write_text(unit.source + "\n", encoding="utf-8")
        written.append(path)
    page_path = out / "page.src"
    page_path.write_text(page.entry_unit.source + "\n", encoding="utf-8")
    written.append(page_path)
    styles_path = out / "styles.map"
    styles_path.write_text(
        json.dumps(page.stylesheet, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    written.append(styles_path)
    tree_path = out / "tree.json"
    tree_path.write_text(serialize_tree(page.root), encoding="utf-8")
    written.append(tree_path)
    return written


def load_page(out_dir: str | Path, tree_path: str | Path | None = None) -> GeneratedPage:
    """Rebuild a GeneratedPage from a directory written by write_page."""
    out = Path(out_dir)
    tree_file = Path(tree_path) if tree_path is not None else out / "tree.json"
    root = parse_tree(tree_file.read_text(encoding="utf-8"))
    stylesheet = json.loads((out / "styles.map").read_text(encoding="utf-8"))

    by_name: dict[str, str] = {}
    for path in sorted((out / "components").glob("*.src")):
        by_name[path.stem] = path.read_text(encoding="utf-8").rstrip("\n")

    units = []
    for container in emission_order(root):
        name = component_name(container)
        if name not in by_name:
            raise FileNotFoundError(f"missing component source for {name}")
        source = by_name[name]
        child_names = {component_name(c) for c in container.children if c.is_container}
        deps = tuple(n for n in sorted(child_names) if re.search(rf"<{re.escape(n)}\b", source))
        units.append(CodeUnit(node_id=container.id, name=name, source=source, dependencies=deps))
    return GeneratedPage(
        root=root, units=tuple(units), entry=component_name(root), stylesheet=stylesheet
    )


def emission_order(root: ComponentNode) -> list[ComponentNode]:
    """Unit order used on disk: per-division post-order, root entry last."""
    out: list[ComponentNode] = []
    for child in root.children:
        if child.is_container:
            out.extend(postorder_containers(child))
    out.append(root)
    return out
