"""UI grouping chain: screen division, per-region semantics, and component-tree assembly.

The chain runs three model subtasks (divide → semantic → group) with
deterministic validation between them: division correction (orphan insertion,
overlap merging, 3–10 region bound) and sub-tree post-processing (phantom-leaf
removal, missing-leaf insertion, overlapping-container merging).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Sequence

from PIL import ImageDraw

from .llm import (
    DEFAULT_MAX_CONCURRENCY,
    ResponseParseError,
    extract_json_payload,
    load_template,
    render_prompt,
    send,
)
from .metadata import (
    BBox,
    DesignDocument,
    Layer,
    LayerKind,
    LayerRef,
    bbox_union,
    bboxes_overlap,
    crop_region,
    extract_layer_list,
)

log = logging.getLogger(__name__)

MIN_DIVISIONS = 3
MAX_DIVISIONS = 10
ROLLBACK_BUDGET = 2
BACKGROUND_AREA_FRACTION = 0.9

ROOT_ID = "merged_Root"
ROOT_NAME = "Root"


class DivisionCountError(Exception):
    """Division count stayed outside the 3–10 bound after the rollback budget."""


class ArityMismatch(Exception):
    """Sub-tree count does not match division count."""


class StageError(Exception):
    """Wraps a failure with the pipeline stage and division it occurred in."""

    def __init__(self, stage: str, division_id: str | None, cause: BaseException):
        self.stage = stage
        self.division_id = division_id
        self.cause = cause
        where = f"stage '{stage}'" + (f", division '{division_id}'" if division_id else "")
        super().__init__(f"{where}: {cause}")


class Tag(str, Enum):
    VIEW = "View"
    SCROLL_VIEW = "ScrollView"
    TEXT = "Text"
    IMAGE = "Image"
    BUTTON = "Button"
    TEXT_INPUT = "TextInput"
    LIST = "List"
    ICON = "Icon"


KIND_TAG = {
    LayerKind.TEXT: Tag.TEXT,
    LayerKind.IMAGE: Tag.IMAGE,
    LayerKind.ICON: Tag.ICON,
    LayerKind.SHAPE: Tag.VIEW,
    LayerKind.GROUP: Tag.VIEW,
    LayerKind.OTHER: Tag.VIEW,
}


class Role(str, Enum):
    TEXT = "text"
    ICON = "icon"
    IMAGE = "image"
    CONTROL = "control"
    CONTAINER_HINT = "container_hint"
    DECORATION = "decoration"


KIND_ROLE = {
    LayerKind.TEXT: Role.TEXT,
    LayerKind.ICON: Role.ICON,
    LayerKind.IMAGE: Role.IMAGE,
    LayerKind.SHAPE: Role.DECORATION,
    LayerKind.GROUP: Role.CONTAINER_HINT,
    LayerKind.OTHER: Role.DECORATION,
}


@dataclass(frozen=True)
class Division:
    """A semantically coherent sub-region: member layer ids plus derived bbox."""

    id: str
    layer_ids: tuple[str, ...]
    bbox: BBox
    label: str


@dataclass(frozen=True)
class DivisionDraft:
    """Uncorrected division as parsed from the model, before validation."""

    label: str
    layer_ids: tuple[str, ...]


@dataclass(frozen=True)
class RollbackNeeded:
    """Signals that the division step must be re-asked (count out of bounds)."""

    count: int

    @property
    def reason(self) -> str:
        return f"division count {self.count} outside [{MIN_DIVISIONS}, {MAX_DIVISIONS}]"


@dataclass(frozen=True)
class SemanticLayer:
    layer_id: str
    description: str
    role_hint: Role


@dataclass(frozen=True)
class ComponentNode:
    """Tree node: leaves reuse layer ids, containers carry ``merged_*`` ids."""

    id: str
    name: str
    tag: Tag
    bbox: BBox
    children: tuple["ComponentNode", ...] = ()
    semantic: str | None = None
    style: dict[str, str] = field(default_factory=dict)

    @property
    def is_container(self) -> bool:
        return bool(self.children)

    def walk(self) -> Iterable["ComponentNode"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def leaf_ids(self) -> list[str]:
        return [n.id for n in self.walk() if not n.is_container]


@dataclass(frozen=True)
class ComponentTree:
    root: ComponentNode
    divisions: tuple[Division, ...]


def reading_order_key(bbox: BBox) -> tuple[int, int]:
    return (bbox.y, bbox.x)


def sanitize_label(raw: Any, fallback: str = "Region") -> str:
    """Normalize a model-proposed label into a short PascalCase identifier."""
    if not isinstance(raw, str):
        return fallback
    parts = []
    current = []
    for ch in raw:
        if ch.isalnum():
            current.append(ch)
        elif current:
            parts.append("".join(current))
            current = []
    if current:
        parts.append("".join(current))
    label = "".join(p[:1].upper() + p[1:] for p in parts if p)[:40]
    if not label:
        return fallback
    if label[0].isdigit():
        label = fallback + label
    return label


def background_layer_ids(layers: Sequence[LayerRef], screen: BBox) -> set[str]:
    """Layers covering ≥ 90% of the screen area; handled at the tree root."""
    threshold = BACKGROUND_AREA_FRACTION * screen.area
    return {ref.id for ref in layers if ref.bbox.area >= threshold}


def _unique_labels(labels: list[str]) -> list[str]:
    used: set[str] = set()
    out = []
    for label in labels:
        candidate = label
        n = 2
        while candidate in used:
            candidate = f"{label}{n}"
            n += 1
        used.add(candidate)
        out.append(candidate)
    return out


def check_and_postprocess(
    divisions: Sequence[DivisionDraft | Division],
    layers: Sequence[LayerRef],
    screen: BBox | None = None,
) -> list[Division] | RollbackNeeded:
    """Division correction: count bound, orphan insertion, overlap merging.

    Returns the corrected divisions (every non-background layer in exactly one,
    no two division bboxes strictly overlapping) or RollbackNeeded when the
    parsed division count falls outside the 3–10 bound.
    """
    result, _ = check_and_postprocess_stats(divisions, layers, screen)
    return result


def check_and_postprocess_stats(
    divisions: Sequence[DivisionDraft | Division],
    layers: Sequence[LayerRef],
    screen: BBox | None = None,
) -> tuple[list[Division] | RollbackNeeded, int]:
    """check_and_postprocess plus the number of merges performed (for bounds checks)."""
    index = {ref.id: ref for ref in layers}
    background = background_layer_ids(layers, screen) if screen is not None else set()

    # Membership cleaning: drop unknown/background ids, claim each id once,
    # drop divisions left empty or with zero-area union (degenerate layers
    # never define a division alone).
    cleaned: list[tuple[str, list[str]]] = []
    claimed: set[str] = set()
    for draft in divisions:
        members: list[str] = []
        for lid in draft.layer_ids:
            if lid in index and lid not in background and lid not in claimed and lid not in members:
                members.append(lid)
        if not members:
            continue
        box = bbox_union([index[lid].bbox for lid in members])
        if box.area == 0:
            continue
        claimed.update(members)
        cleaned.append((sanitize_label(draft.label), members))

    if not (MIN_DIVISIONS <= len(cleaned) <= MAX_DIVISIONS):
        return RollbackNeeded(len(cleaned)), 0

    labels = [label for label, _ in cleaned]
    member_lists = [members for _, members in cleaned]
    boxes = [bbox_union([index[lid].bbox for lid in members]) for members in member_lists]
    merges = 0

    def merge_into(target: int, victims: list[int]) -> None:
        nonlocal merges, labels, member_lists, boxes
        for v in victims:
            member_lists[target] = member_lists[target] + member_lists[v]
            merges += 1
        keep = [i for i in range(len(member_lists)) if i not in victims]
        labels = [labels[i] for i in keep]
        member_lists = [member_lists[i] for i in keep]
        boxes = [boxes[i] for i in keep]

    # Orphan assignment: overlap → merge all overlapped divisions and insert;
    # no overlap → nearest division center (ties to the lower index).
    for ref in layers:
        if ref.id in claimed or ref.id in background:
            continue
        overlapped = [i for i, box in enumerate(boxes) if bboxes_overlap(ref.bbox, box)]
        if overlapped:
            # Victims all sit above the kept index, so `target` stays valid.
            target = overlapped[0]
            merge_into(target, overlapped[1:])
        else:
            cx, cy = ref.bbox.center
            target = min(
                range(len(boxes)),
                key=lambda i: ((boxes[i].center[0] - cx) ** 2 + (boxes[i].center[1] - cy) ** 2, i),
            )
        member_lists[target] = member_lists[target] + [ref.id]
        boxes[target] = bbox_union([index[lid].bbox for lid in member_lists[target]])
        claimed.add(ref.id)

    # Merge any two strictly overlapping divisions, repeated to a fixed point.
    changed = True
    while changed:
        changed = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if bboxes_overlap(boxes[i], boxes[j]):
                    merge_into(i, [j])
                    boxes[i] = bbox_union([index[lid].bbox for lid in member_lists[i]])
                    changed = True
                    break
            if changed:
                break

    order = sorted(range(len(boxes)), key=lambda i: (reading_order_key(boxes[i]), i))
    final_labels = _unique_labels([labels[i] for i in order])
    out = [
        Division(
            id=f"div_{pos}",
            layer_ids=tuple(member_lists[i]),
            bbox=boxes[i],
            label=final_labels[pos],
        )
        for pos, i in enumerate(order)
    ]
    return out, merges


def _layer_list_json(refs: Sequence[LayerRef]) -> str:
    return json.dumps(
        [{"id": r.id, "type": r.kind.value, "bbox": r.bbox.as_list()} for r in refs],
        indent=2,
    )


def parse_divisions_response(text: str) -> list[DivisionDraft]:
    payload = extract_json_payload(text)
    if isinstance(payload, dict) and "divisions" in payload:
        payload = payload["divisions"]
    if not isinstance(payload, list):
        raise ResponseParseError("division response must be a JSON array")
    drafts = []
    for i, entry in enumerate(payload):
        if not isinstance(entry, dict) or "layer_ids" not in entry:
            raise ResponseParseError(f"division entry {i} missing layer_ids")
        ids = entry["layer_ids"]
        if not isinstance(ids, list) or not all(isinstance(x, str) for x in ids):
            raise ResponseParseError(f"division entry {i} layer_ids must be strings")
        drafts.append(DivisionDraft(label=sanitize_label(entry.get("label")), layer_ids=tuple(ids)))
    return drafts


def divide(doc: DesignDocument, backend: Any) -> list[Division]:
    """Model division of the layer list, corrected by check_and_postprocess."""
    template = load_template("divide")
    refs = extract_layer_list(doc)
    bindings = {
        "screen_width": str(doc.screen_width),
        "screen_height": str(doc.screen_height),
        "layer_list": _layer_list_json(refs),
        "extra_instructions": "",
    }
    screenshot = doc.screenshot

    def ask(extra: str) -> list[DivisionDraft]:
        request = render_prompt(template, {**bindings, "extra_instructions": extra}, [screenshot])
        response = send(request, backend)
        try:
            return parse_divisions_response(response.text)
        except ResponseParseError as exc:
            retry = render_prompt(
                template,
                {**bindings, "extra_instructions": f"{extra}\nYour previous answer could not be parsed ({exc}). Answer with valid JSON only."},
                [screenshot],
            )
            return parse_divisions_response(send(retry, backend).text)

    extra = ""
    for attempt in range(ROLLBACK_BUDGET + 1):
        drafts = ask(extra)
        result = check_and_postprocess(drafts, refs, doc.screen_rect)
        if isinstance(result, RollbackNeeded):
            log.info("division rollback (%s), attempt %d", result.reason, attempt + 1)
            extra = (
                f"\nIMPORTANT: your previous division produced {result.count} regions; "
                f"produce between {MIN_DIVISIONS} and {MAX_DIVISIONS} regions."
            )
            continue
        return result
    raise DivisionCountError(
        f"division count stayed outside [{MIN_DIVISIONS}, {MAX_DIVISIONS}] "
        f"after {ROLLBACK_BUDGET} rollbacks"
    )


def _annotate_missing(sub_image, division_bbox: BBox, missing: list[Layer]):
    """Draw numbered outlines over hard-to-identify elements on the crop."""
    annotated = sub_image.copy()
    draw = ImageDraw.Draw(annotated)
    for n, layer in enumerate(missing, start=1):
        x = layer.bbox.x - division_bbox.x
        y = layer.bbox.y - division_bbox.y
        draw.rectangle(
            [x, y, x + max(layer.bbox.w, 1), y + max(layer.bbox.h, 1)],
            outline=(255, 0, 0, 255),
            width=2,
        )
        # Index badge drawn as n tick marks; avoids font rasterization.
        for t in range(n):
            draw.rectangle([x + 2 + t * 5, y + 2, x + 5 + t * 5, y + 8], fill=(255, 0, 0, 255))
    return annotated


def parse_semantics_response(text: str) -> list[dict[str, Any]]:
    payload = extract_json_payload(text)
    if isinstance(payload, dict) and "semantics" in payload:
        payload = payload["semantics"]
    if not isinstance(payload, list):
        raise ResponseParseError("semantic response must be a JSON array")
    entries = []
    for i, entry in enumerate(payload):
        if not isinstance(entry, dict) or "layer_id" not in entry:
            raise ResponseParseError(f"semantic entry {i} missing layer_id")
        entries.append(entry)
    return entries


def extract_semantics(division: Division, doc: DesignDocument, backend: Any) -> list[SemanticLayer]:
    """One semantic annotation per member layer, with a visual-enhancement re-ask."""
    template = load_template("semantic")
    layer_index = {layer.id: layer for layer in doc.layers}
    members = [layer_index[lid] for lid in division.layer_ids]
    refs = [LayerRef(l.id, l.bbox, l.kind) for l in members]
    sub_image = crop_region(doc.screenshot, division.bbox)
    bindings = {
        "region_label": division.label,
        "layer_list": _layer_list_json(refs),
        "extra_instructions": "",
    }

    def ask(extra: str, image) -> list[dict[str, Any]]:
        request = render_prompt(template, {**bindings, "extra_instructions": extra}, [image])
        response = send(request, backend)
        try:
            return parse_semantics_response(response.text)
        except ResponseParseError as exc:
            retry = render_prompt(
                template,
                {**bindings, "extra_instructions": f"{extra}\nYour previous answer could not be parsed ({exc}). Answer with valid JSON only."},
                [image],
            )
            return parse_semantics_response(send(retry, backend).text)

    collected: dict[str, SemanticLayer] = {}

    def absorb(entries: list[dict[str, Any]]) -> None:
        for entry in entries:
            lid = entry.get("layer_id")
            if lid not in {m.id for m in members} or lid in collected:
                continue
            description = entry.get("description")
            if not isinstance(description, str) or len(description) < 10:
                continue  # too thin to trust; treated as missing
            try:
                role = Role(entry.get("role"))
            except ValueError:
                role = KIND_ROLE[layer_index[lid].kind]
            collected[lid] = SemanticLayer(layer_id=lid, description=description, role_hint=role)

    absorb(ask("", sub_image))
    missing = [m for m in members if m.id not in collected]
    if missing:
        annotated = _annotate_missing(sub_image, division.bbox, missing)
        extra = (
            "\nThe elements with ids "
            + ", ".join(m.id for m in missing)
            + " are outlined in red in the attached image; describe every one of them."
        )
        absorb(ask(extra, annotated))
    out = []
    for member in members:
        got = collected.get(member.id)
        if got is None:
            got = SemanticLayer(
                layer_id=member.id,
                description=f"{member.kind.value} element at {tuple(member.bbox.as_list())}",
                role_hint=KIND_ROLE[member.kind],
            )
        out.append(got)
    return out


def _semantic_list_json(semantics: Sequence[SemanticLayer], layer_index: dict[str, Layer]) -> str:
    return json.dumps(
        [
            {
                "layer_id": s.layer_id,
                "type": layer_index[s.layer_id].kind.value,
                "bbox": layer_index[s.layer_id].bbox.as_list(),
                "role": s.role_hint.value,
                "description": s.description,
            }
            for s in semantics
        ],
        indent=2,
    )


def _leaf_node(layer: Layer, semantic: str | None) -> ComponentNode:
    return ComponentNode(
        id=layer.id,
        name=layer.id,
        tag=KIND_TAG[layer.kind],
        bbox=layer.bbox,
        semantic=semantic,
    )


def parse_subtree_response(
    text: str,
    division: Division,
    layer_index: dict[str, Layer],
    semantics_by_id: dict[str, str],
) -> ComponentNode:
    payload = extract_json_payload(text)
    if isinstance(payload, list):
        payload = {"name": division.label, "children": payload}
    if not isinstance(payload, dict):
        raise ResponseParseError("grouping response must be a JSON object or array")

    def build(raw: Any) -> ComponentNode:
        if not isinstance(raw, dict):
            raise ResponseParseError(f"tree node must be an object, got {raw!r}")
        if "layer_id" in raw:
            lid = raw["layer_id"]
            if not isinstance(lid, str):
                raise ResponseParseError(f"layer_id must be a string, got {lid!r}")
            layer = layer_index.get(lid)
            if layer is None:
                # Phantom leaf: keep a placeholder; post-processing removes it.
                return ComponentNode(id=lid, name=lid, tag=Tag.VIEW, bbox=BBox(0, 0, 0, 0))
            return _leaf_node(layer, semantics_by_id.get(lid))
        if "children" in raw:
            children = raw["children"]
            if not isinstance(children, list) or not children:
                raise ResponseParseError("container node needs a nonempty children array")
            name = sanitize_label(raw.get("name"), fallback="Component")
            kids = tuple(build(c) for c in children)
            return ComponentNode(
                id=f"merged_{name}",
                name=name,
                tag=Tag.VIEW,
                bbox=bbox_union([k.bbox for k in kids]),
                children=kids,
            )
        raise ResponseParseError(f"tree node needs layer_id or children: {raw!r}")

    root = build(payload)
    if not root.is_container:
        root = ComponentNode(
            id=f"merged_{division.label}",
            name=division.label,
            tag=Tag.VIEW,
            bbox=root.bbox,
            children=(root,),
        )
    # The division root is pinned to the division label regardless of the response.
    return replace(root, id=f"merged_{division.label}", name=division.label)


def group(
    division: Division,
    semantics: Sequence[SemanticLayer],
    doc: DesignDocument,
    backend: Any,
) -> ComponentNode:
    """Model grouping of one division into a corrected component sub-tree."""
    template = load_template("group")
    layer_index = {layer.id: layer for layer in doc.layers}
    semantics_by_id = {s.layer_id: s.description for s in semantics}
    sub_image = crop_region(doc.screenshot, division.bbox)
    bindings = {
        "region_label": division.label,
        "semantic_list": _semantic_list_json(semantics, layer_index),
        "extra_instructions": "",
    }
    request = render_prompt(template, bindings, [sub_image])
    response = send(request, backend)
    try:
        root = parse_subtree_response(response.text, division, layer_index, semantics_by_id)
    except ResponseParseError as exc:
        retry = render_prompt(
            template,
            {**bindings, "extra_instructions": f"\nYour previous answer could not be parsed ({exc}). Answer with valid JSON only."},
            [sub_image],
        )
        root = parse_subtree_response(send(retry, backend).text, division, layer_index, semantics_by_id)
    return postprocess_subtree(root, division, layer_index)


def postprocess_subtree(
    node: ComponentNode,
    division: Division,
    layer_index: dict[str, Layer],
) -> ComponentNode:
    """Idempotent sub-tree correction.

    Drops phantom leaves, appends missing member layers under the root, merges
    strictly overlapping sibling containers, collapses single-leaf containers
    (root exempt), recomputes bboxes bottom-up, and sorts children into
    reading order.
    """
    member_ids = set(division.layer_ids)
    semantics: dict[str, str | None] = {
        n.id: n.semantic for n in node.walk() if not n.is_container
    }
    seen: set[str] = set()

    def clean(n: ComponentNode) -> ComponentNode | None:
        if not n.is_container:
            if n.id not in member_ids or n.id in seen:
                return None
            seen.add(n.id)
            return _leaf_node(layer_index[n.id], semantics.get(n.id))
        kids = [c for c in (clean(child) for child in n.children) if c is not None]
        if not kids:
            return None
        return replace(n, children=tuple(kids))

    cleaned = clean(node)
    root_children: list[ComponentNode] = list(cleaned.children) if cleaned is not None and cleaned.is_container else []
    if cleaned is not None and not cleaned.is_container:
        root_children = [cleaned]
    missing = [lid for lid in division.layer_ids if lid not in seen]
    root_children.extend(_leaf_node(layer_index[lid], semantics.get(lid)) for lid in missing)

    def merge_overlapping(kids: list[ComponentNode]) -> list[ComponentNode]:
        kids = list(kids)
        changed = True
        while changed:
            changed = False
            for i in range(len(kids)):
                if not kids[i].is_container:
                    continue
                for j in range(i + 1, len(kids)):
                    if not kids[j].is_container:
                        continue
                    if bboxes_overlap(kids[i].bbox, kids[j].bbox):
                        a, b = kids[i], kids[j]
                        winner = a if a.bbox.area >= b.bbox.area else b
                        # the combined child list needs the same level pass:
                        # concatenation alone leaves it unsorted and possibly
                        # still overlapping
                        merged_children = rebuild_level(list(a.children + b.children))
                        kids[i] = ComponentNode(
                            id=f"merged_{winner.name}",
                            name=winner.name,
                            tag=winner.tag,
                            bbox=bbox_union([c.bbox for c in merged_children]),
                            children=tuple(merged_children),
                        )
                        del kids[j]
                        changed = True
                        break
                if changed:
                    break
        return kids

    def rebuild_level(kids: list[ComponentNode]) -> list[ComponentNode]:
        kids = merge_overlapping(kids)
        kids = [
            k.children[0]
            if k.is_container and len(k.children) == 1 and not k.children[0].is_container
            else k
            for k in kids
        ]
        kids.sort(key=lambda k: reading_order_key(k.bbox))
        return kids

    def rebuild(n: ComponentNode, children: list[ComponentNode]) -> ComponentNode:
        kids = [rebuild(c, list(c.children)) if c.is_container else c for c in children]
        kids = rebuild_level(kids)
        return replace(n, children=tuple(kids), bbox=bbox_union([k.bbox for k in kids]))

    root_shell = node if node.is_container else ComponentNode(
        id=f"merged_{division.label}", name=division.label, tag=Tag.VIEW, bbox=division.bbox
    )
    return rebuild(root_shell, root_children)


def assemble_tree(
    subtrees: Sequence[ComponentNode],
    divisions: Sequence[Division],
    doc: DesignDocument,
) -> ComponentTree:
    """Root node over division sub-trees in reading order; backgrounds lead."""
    if len(subtrees) != len(divisions):
        raise ArityMismatch(f"{len(subtrees)} sub-trees for {len(divisions)} divisions")
    refs = extract_layer_list(doc)
    background = background_layer_ids(refs, doc.screen_rect)
    bg_leaves = [
        _leaf_node(layer, None) for layer in doc.layers if layer.id in background
    ]
    ordered = sorted(
        zip(subtrees, divisions), key=lambda pair: (reading_order_key(pair[1].bbox), pair[1].id)
    )
    children = tuple(bg_leaves) + tuple(sub for sub, _ in ordered)
    root = ComponentNode(
        id=ROOT_ID,
        name=ROOT_NAME,
        tag=Tag.VIEW,
        bbox=doc.screen_rect,
        children=children,
    )
    root = _uniquify_container_names(root)
    return ComponentTree(root=root, divisions=tuple(div for _, div in ordered))


def _uniquify_container_names(root: ComponentNode) -> ComponentNode:
    used: set[str] = set()

    def rename(n: ComponentNode) -> ComponentNode:
        if not n.is_container:
            return n
        name = n.name
        k = 2
        while name in used:
            name = f"{n.name}_{k}"
            k += 1
        used.add(name)
        kids = tuple(rename(c) for c in n.children)
        return replace(n, id=f"merged_{name}" if n.id.startswith("merged_") else n.id,
                       name=name, children=kids)

    renamed = rename(root)
    # The root keeps its canonical id regardless of name dedup.
    return replace(renamed, id=ROOT_ID, name=ROOT_NAME)


def run_grouping_chain(doc: DesignDocument, backend: Any) -> ComponentTree:
    """divide → (per division: semantics → group, concurrently) → assemble."""
    try:
        divisions = divide(doc, backend)
    except Exception as exc:
        raise StageError("divide", None, exc) from exc
    layer_index = {layer.id: layer for layer in doc.layers}

    def process(division: Division) -> ComponentNode:
        try:
            semantics = extract_semantics(division, doc, backend)
        except Exception as exc:
            raise StageError("semantic", division.id, exc) from exc
        try:
            return group(division, semantics, doc, backend)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("group", division.id, exc) from exc

    workers = max(1, getattr(backend, "max_concurrency", DEFAULT_MAX_CONCURRENCY))
    if workers == 1 or len(divisions) <= 1:
        subtrees = [process(d) for d in divisions]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subtrees = list(pool.map(process, divisions))
    try:
        return assemble_tree(subtrees, divisions, doc)
    except Exception as exc:
        raise StageError("assemble", None, exc) from exc


# ---------------------------------------------------------------------------
# Component-tree serialization (the contract consumed by codegen/refine/metrics)

_TAG_VALUES = {t.value for t in Tag}


def node_to_mapping(node: ComponentNode) -> dict[str, Any]:
    return {
        "id": node.id,
        "name": node.name,
        "tag": node.tag.value,
        "bbox": node.bbox.as_list(),
        "semantic": node.semantic,
        "style": dict(node.style),
        "children": [node_to_mapping(c) for c in node.children],
    }


def mapping_to_node(raw: Any) -> ComponentNode:
    if not isinstance(raw, dict):
        raise ValueError(f"tree node must be an object, got {type(raw).__name__}")
    for key in ("id", "name", "tag", "bbox"):
        if key not in raw:
            raise ValueError(f"tree node missing `{key}`")
    if raw["tag"] not in _TAG_VALUES:
        raise ValueError(f"unknown tag {raw['tag']!r}")
    children = tuple(mapping_to_node(c) for c in raw.get("children", []))
    style = raw.get("style") or {}
    if not isinstance(style, dict):
        raise ValueError("style must be an object")
    return ComponentNode(
        id=raw["id"],
        name=raw["name"],
        tag=Tag(raw["tag"]),
        bbox=BBox.from_values(raw["bbox"]),
        children=children,
        semantic=raw.get("semantic"),
        style={str(k): str(v) for k, v in style.items()},
    )


def serialize_tree(root: ComponentNode) -> str:
    return json.dumps(node_to_mapping(root), indent=2, ensure_ascii=False) + "\n"


def parse_tree(text: str | bytes) -> ComponentNode:
    return mapping_to_node(json.loads(text))
