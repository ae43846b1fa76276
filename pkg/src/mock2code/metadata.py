"""Canonical design-document parsing and the geometry/image utilities shared by all stages.

A design document is a JSON file with top-level keys ``screen{width,height}``,
``screenshot`` (relative path to a lossless 8-bit RGBA raster) and ``layers[]``,
each layer carrying ``id``, ``type``, ``bbox:[x,y,w,h]`` plus optional
``style{...}`` and ``text{...}``. Coordinates are integers in screenshot pixel
space; fractional values are rounded half-up at parse time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple

from PIL import Image


class MalformedDocument(Exception):
    """Document file is not syntactically valid."""


class SchemaViolation(Exception):
    """Document violates the canonical schema or a layer invariant."""


class DimensionMismatch(Exception):
    """Screenshot pixel dimensions differ from the declared screen size."""


class EmptyInput(Exception):
    """An operation requiring a nonempty input received an empty one."""


class EmptyCrop(Exception):
    """Requested crop region has zero area after clamping to image bounds."""


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle, corner+size convention, origin top-left."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative bbox extent: {self}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_values(cls, values: Any) -> "BBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise SchemaViolation(f"bbox must be [x, y, w, h], got {values!r}")
        nums = []
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaViolation(f"bbox entries must be numeric, got {v!r}")
            nums.append(_round_half_up(float(v)))
        if nums[2] < 0 or nums[3] < 0:
            raise SchemaViolation(f"bbox has negative extent: {values!r}")
        return cls(*nums)


def bbox_union(boxes: list[BBox] | tuple[BBox, ...]) -> BBox:
    """Smallest axis-aligned rectangle containing every input box."""
    if not boxes:
        raise EmptyInput("bbox_union requires at least one box")
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.right for b in boxes)
    y1 = max(b.bottom for b in boxes)
    return BBox(x0, y0, x1 - x0, y1 - y0)


def bbox_intersection_area(a: BBox, b: BBox) -> int:
    """Overlap area in px²; 0 for disjoint or merely edge-touching boxes."""
    w = min(a.right, b.right) - max(a.x, b.x)
    h = min(a.bottom, b.bottom) - max(a.y, b.y)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def bboxes_overlap(a: BBox, b: BBox) -> bool:
    """Strict positive-area overlap; edge contact does not count."""
    return bbox_intersection_area(a, b) > 0


def clamp_bbox(box: BBox, bounds: BBox) -> BBox | None:
    """Clamp ``box`` into ``bounds``; None when the two do not touch at all."""
    x0 = max(box.x, bounds.x)
    y0 = max(box.y, bounds.y)
    x1 = min(box.right, bounds.right)
    y1 = min(box.bottom, bounds.bottom)
    if x1 < x0 or y1 < y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def crop_region(image: Image.Image, bbox: BBox) -> Image.Image:
    """Crop ``bbox`` (clamped to image bounds) out of ``image``, copying pixels."""
    bounds = BBox(0, 0, image.width, image.height)
    clamped = clamp_bbox(bbox, bounds)
    if clamped is None or clamped.area == 0:
        raise EmptyCrop(f"crop {bbox.as_list()} has zero area within {image.size}")
    return image.crop((clamped.x, clamped.y, clamped.right, clamped.bottom))


class LayerKind(str, Enum):
    SHAPE = "shape"
    TEXT = "text"
    IMAGE = "image"
    GROUP = "group"
    ICON = "icon"
    OTHER = "other"


class LayerRef(NamedTuple):
    """One entry of the flat layer list: the (id, bbox, kind) triple."""

    id: str
    bbox: BBox
    kind: LayerKind


LayerList = list  # list[LayerRef]

_STYLE_KEYS = ("fill", "border_color", "border_width", "corner_radius", "shadow", "opacity", "padding")
_TEXT_KEYS = ("content", "font_family", "font_size", "weight", "color", "line_height")
_LAYER_KEYS = ("id", "type", "bbox", "style", "text")
_DOC_KEYS = ("screen", "screenshot", "layers")


def normalize_color(value: Any) -> str:
    """Normalize a color to uppercase #RRGGBBAA."""
    if isinstance(value, str):
        s = value.strip().lstrip("#")
        if len(s) == 6:
            s += "FF"
        if len(s) != 8 or any(c not in "0123456789abcdefABCDEF" for c in s):
            raise SchemaViolation(f"bad color {value!r}")
        return "#" + s.upper()
    if isinstance(value, (list, tuple)) and len(value) in (3, 4):
        parts = list(value) + [255] * (4 - len(value))
        for p in parts:
            if isinstance(p, bool) or not isinstance(p, (int, float)) or not 0 <= p <= 255:
                raise SchemaViolation(f"bad color channel in {value!r}")
        return "#" + "".join(f"{_round_half_up(float(p)):02X}" for p in parts)
    raise SchemaViolation(f"bad color {value!r}")


@dataclass(frozen=True)
class Shadow:
    dx: int
    dy: int
    blur: int
    color: str

    def css(self) -> str:
        return f"{self.dx}px {self.dy}px {self.blur}px {self.color}"


@dataclass(frozen=True)
class StyleAttrs:
    """Optional visual attributes of a layer, over a closed vocabulary."""

    fill: str | None = None
    border_color: str | None = None
    border_width: int | None = None
    corner_radius: int | None = None
    shadow: Shadow | None = None
    opacity: float | None = None
    padding: int | None = None

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> "StyleAttrs":
        unknown = sorted(set(raw) - set(_STYLE_KEYS))
        if unknown:
            raise SchemaViolation(f"unknown style keys: {unknown}")
        kwargs: dict[str, Any] = {}
        if "fill" in raw:
            kwargs["fill"] = normalize_color(raw["fill"])
        if "border_color" in raw:
            kwargs["border_color"] = normalize_color(raw["border_color"])
        for px_key in ("border_width", "corner_radius", "padding"):
            if px_key in raw:
                kwargs[px_key] = _require_px(raw[px_key], px_key)
        if "shadow" in raw:
            sh = raw["shadow"]
            if not isinstance(sh, dict) or set(sh) - {"dx", "dy", "blur", "color"}:
                raise SchemaViolation(f"bad shadow {sh!r}")
            kwargs["shadow"] = Shadow(
                dx=_require_px(sh.get("dx", 0), "shadow.dx", allow_negative=True),
                dy=_require_px(sh.get("dy", 0), "shadow.dy", allow_negative=True),
                blur=_require_px(sh.get("blur", 0), "shadow.blur"),
                color=normalize_color(sh.get("color", "#000000")),
            )
        if "opacity" in raw:
            op = raw["opacity"]
            if isinstance(op, bool) or not isinstance(op, (int, float)) or not 0.0 <= op <= 1.0:
                raise SchemaViolation(f"opacity must be in [0,1], got {op!r}")
            kwargs["opacity"] = float(op)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.fill is not None:
            out["fill"] = self.fill
        if self.border_color is not None:
            out["border_color"] = self.border_color
        if self.border_width is not None:
            out["border_width"] = self.border_width
        if self.corner_radius is not None:
            out["corner_radius"] = self.corner_radius
        if self.shadow is not None:
            out["shadow"] = {"dx": self.shadow.dx, "dy": self.shadow.dy,
                             "blur": self.shadow.blur, "color": self.shadow.color}
        if self.opacity is not None:
            out["opacity"] = self.opacity
        if self.padding is not None:
            out["padding"] = self.padding
        return out


def _require_px(value: Any, name: str, allow_negative: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(f"{name} must be a pixel number, got {value!r}")
    px = _round_half_up(float(value))
    if px < 0 and not allow_negative:
        raise SchemaViolation(f"{name} must be >= 0, got {value!r}")
    return px


@dataclass(frozen=True)
class TextAttrs:
    content: str
    font_family: str = ""
    font_size: int = 0
    weight: int = 400
    color: str = "#000000FF"
    line_height: int | None = None

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> "TextAttrs":
        unknown = sorted(set(raw) - set(_TEXT_KEYS))
        if unknown:
            raise SchemaViolation(f"unknown text keys: {unknown}")
        if "content" not in raw or not isinstance(raw["content"], str):
            raise SchemaViolation("text layer requires string `content`")
        return cls(
            content=raw["content"],
            font_family=str(raw.get("font_family", "")),
            font_size=_require_px(raw.get("font_size", 0), "text.font_size"),
            weight=int(raw.get("weight", 400)),
            color=normalize_color(raw.get("color", "#000000")),
            line_height=None if raw.get("line_height") is None
            else _require_px(raw["line_height"], "text.line_height"),
        )

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "content": self.content,
            "font_family": self.font_family,
            "font_size": self.font_size,
            "weight": self.weight,
            "color": self.color,
        }
        if self.line_height is not None:
            out["line_height"] = self.line_height
        return out


@dataclass(frozen=True)
class Layer:
    id: str
    bbox: BBox
    kind: LayerKind
    style: StyleAttrs = field(default_factory=StyleAttrs)
    text: TextAttrs | None = None


@dataclass(frozen=True)
class DesignDocument:
    screen_width: int
    screen_height: int
    screenshot_path: str
    screenshot: Image.Image
    layers: tuple[Layer, ...]

    @property
    def screen_rect(self) -> BBox:
        return BBox(0, 0, self.screen_width, self.screen_height)

    def layer_by_id(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)


def _parse_layer(raw: Any, index: int, screen: BBox) -> Layer:
    if not isinstance(raw, dict):
        raise SchemaViolation(f"layers[{index}] is not an object")
    unknown = sorted(set(raw) - set(_LAYER_KEYS))
    if unknown:
        raise SchemaViolation(f"layers[{index}] has unknown keys: {unknown}")
    for required in ("id", "type", "bbox"):
        if required not in raw:
            raise SchemaViolation(f"layers[{index}] missing `{required}`")
    if not isinstance(raw["id"], str) or not raw["id"]:
        raise SchemaViolation(f"layers[{index}] id must be a nonempty string")
    try:
        kind = LayerKind(raw["type"])
    except ValueError:
        raise SchemaViolation(f"layers[{index}] has unknown type {raw['type']!r}") from None
    bbox = BBox.from_values(raw["bbox"])
    if clamp_bbox(bbox, screen) is None:
        raise SchemaViolation(f"layer {raw['id']!r} lies fully off-screen: {bbox.as_list()}")
    style = StyleAttrs.from_mapping(raw["style"]) if "style" in raw else StyleAttrs()
    text = TextAttrs.from_mapping(raw["text"]) if "text" in raw else None
    if kind is LayerKind.TEXT and text is None:
        raise SchemaViolation(f"text layer {raw['id']!r} missing `text.content`")
    if kind is not LayerKind.TEXT and text is not None:
        raise SchemaViolation(f"non-text layer {raw['id']!r} carries text attributes")
    return Layer(id=raw["id"], bbox=bbox, kind=kind, style=style, text=text)


def parse_design_document(data: bytes | str, base_dir: str | Path = ".") -> DesignDocument:
    """Parse canonical document bytes; the screenshot path resolves against ``base_dir``."""
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid document syntax: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedDocument("document root must be an object")
    unknown = sorted(set(raw) - set(_DOC_KEYS))
    if unknown:
        raise SchemaViolation(f"unknown document keys: {unknown}")
    for required in _DOC_KEYS:
        if required not in raw:
            raise SchemaViolation(f"document missing `{required}`")
    screen = raw["screen"]
    if not isinstance(screen, dict) or set(screen) != {"width", "height"}:
        raise SchemaViolation(f"bad screen object: {screen!r}")
    width = _require_px(screen["width"], "screen.width")
    height = _require_px(screen["height"], "screen.height")
    if width <= 0 or height <= 0:
        raise SchemaViolation("screen dimensions must be positive")
    if not isinstance(raw["screenshot"], str):
        raise SchemaViolation("screenshot must be a relative path string")
    shot_path = Path(base_dir) / raw["screenshot"]
    try:
        screenshot = Image.open(shot_path).convert("RGBA")
    except FileNotFoundError:
        raise MalformedDocument(f"screenshot file not found: {shot_path}") from None
    except Exception as exc:
        raise MalformedDocument(f"unreadable screenshot {shot_path}: {exc}") from exc
    if screenshot.size != (width, height):
        raise DimensionMismatch(
            f"screenshot is {screenshot.size[0]}x{screenshot.size[1]}, screen declares {width}x{height}"
        )
    if not isinstance(raw["layers"], list):
        raise SchemaViolation("layers must be an array")
    screen_rect = BBox(0, 0, width, height)
    layers: list[Layer] = []
    seen: set[str] = set()
    for i, entry in enumerate(raw["layers"]):
        layer = _parse_layer(entry, i, screen_rect)
        if layer.id in seen:
            raise SchemaViolation(f"duplicate layer id {layer.id!r}")
        seen.add(layer.id)
        layers.append(layer)
    return DesignDocument(
        screen_width=width,
        screen_height=height,
        screenshot_path=raw["screenshot"],
        screenshot=screenshot,
        layers=tuple(layers),
    )


def load_design_document(path: str | Path) -> DesignDocument:
    path = Path(path)
    return parse_design_document(path.read_bytes(), base_dir=path.parent)


def serialize_design_document(doc: DesignDocument) -> str:
    """Canonical JSON text for a document; parse → serialize → parse is a fixed point."""
    layers = []
    for layer in doc.layers:
        entry: dict[str, Any] = {
            "id": layer.id,
            "type": layer.kind.value,
            "bbox": layer.bbox.as_list(),
        }
        style = layer.style.to_mapping()
        if style:
            entry["style"] = style
        if layer.text is not None:
            entry["text"] = layer.text.to_mapping()
        layers.append(entry)
    payload = {
        "screen": {"width": doc.screen_width, "height": doc.screen_height},
        "screenshot": doc.screenshot_path,
        "layers": layers,
    }
    return json.dumps(payload, indent=2) + "\n"


def extract_layer_list(doc: DesignDocument) -> list[LayerRef]:
    """The flat (id, bbox, kind) triples in document order."""
    return [LayerRef(layer.id, layer.bbox, layer.kind) for layer in doc.layers]
