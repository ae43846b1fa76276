"""Shared test utilities: canned backends, doc builders, small tree builders."""

from __future__ import annotations

import json
from collections import deque
from pathlib import Path

from PIL import Image

from mock2code.grouping import ComponentNode, Tag
from mock2code.llm import LlmRequest, LlmResponse
from mock2code.metadata import BBox, DesignDocument, load_design_document


class CannedBackend:
    """Replays a fixed response queue, optionally keyed by template name."""

    max_concurrency = 1

    def __init__(self, responses):
        if isinstance(responses, dict):
            self.queues = {k: deque(v) for k, v in responses.items()}
        else:
            self.queues = {None: deque(responses)}
        self.requests: list[LlmRequest] = []

    def send(self, request: LlmRequest) -> LlmResponse:
        self.requests.append(request)
        queue = self.queues.get(request.template_name, self.queues.get(None))
        if not queue:
            raise AssertionError(f"no canned response left for {request.template_name!r}")
        return LlmResponse(text=queue.popleft())


def text_layer(layer_id: str, bbox: list[int], content: str = "x", **text_extra) -> dict:
    return {"id": layer_id, "type": "text", "bbox": bbox, "text": {"content": content, **text_extra}}


def shape_layer(layer_id: str, bbox: list[int], **style) -> dict:
    entry: dict = {"id": layer_id, "type": "shape", "bbox": bbox}
    if style:
        entry["style"] = style
    return entry


def write_document(
    dir_path: Path,
    layers: list[dict],
    width: int = 400,
    height: int = 800,
    screenshot: str = "shot.png",
    color=(250, 250, 250, 255),
) -> Path:
    """Write a design doc plus a flat screenshot; returns the doc path."""
    Image.new("RGBA", (width, height), color).save(dir_path / screenshot)
    doc_path = dir_path / "design.json"
    payload = {
        "screen": {"width": width, "height": height},
        "screenshot": screenshot,
        "layers": layers,
    }
    doc_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return doc_path


def make_document(tmp_path: Path, layers: list[dict], **kwargs) -> DesignDocument:
    return load_design_document(write_document(tmp_path, layers, **kwargs))


def three_band_doc(tmp_path: Path) -> DesignDocument:
    """Six layers in three vertical bands; the scripted model sees 3 divisions."""
    return make_document(
        tmp_path,
        [
            shape_layer("l1", [10, 0, 50, 20]),
            text_layer("l2", [100, 0, 50, 20], "hi"),
            shape_layer("l3", [10, 40, 80, 20]),
            shape_layer("l4", [10, 80, 40, 20]),
            shape_layer("l5", [60, 80, 40, 20]),
            shape_layer("l6", [110, 80, 40, 20]),
        ],
    )


def leaf(node_id: str, x: int, y: int, w: int, h: int, tag: Tag = Tag.TEXT) -> ComponentNode:
    return ComponentNode(id=node_id, name=node_id, tag=tag, bbox=BBox(x, y, w, h))


def container(node_id: str, name: str, children, tag: Tag = Tag.VIEW) -> ComponentNode:
    kids = tuple(children)
    from mock2code.metadata import bbox_union

    return ComponentNode(
        id=node_id,
        name=name,
        tag=tag,
        bbox=bbox_union([c.bbox for c in kids]),
        children=kids,
    )
