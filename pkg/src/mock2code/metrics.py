"""Visual and tree-structural evaluation.

Visual: MSE and SSIM on grayscale after resizing the prediction to the
reference dimensions, plus an optional CLIP cosine score backed by an external
embedding service. Structural: TreeBLEU over height-1 subtrees, ordered tree
edit distance with unit costs, and Container Match (per-reference max IoU).
"""

from __future__ import annotations

import base64
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .grouping import ComponentNode
from .metadata import BBox, bbox_intersection_area

EMBED_URL_ENV = "DESIGNCODER_EMBED_URL"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


class EmptyImage(Exception):
    """A visual metric received a zero-pixel image."""


class ImageTooSmall(Exception):
    """SSIM needs at least an 11x11 image on both sides."""


class EmbeddingServiceError(Exception):
    """The embedding service is unreachable or returned garbage."""


class DegenerateReference(Exception):
    """The reference tree cannot anchor this metric (no internal nodes)."""


class MissingBBox(Exception):
    """Container Match requires a bbox on every internal node."""


@dataclass(frozen=True)
class MetricNode:
    tag: str
    children: tuple["MetricNode", ...] = ()
    bbox: BBox | None = None

    def walk(self) -> Iterable["MetricNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class MetricTree:
    """Tag-labeled ordered tree; root=None models an empty prediction."""

    root: MetricNode | None

    def nodes(self) -> list[MetricNode]:
        return list(self.root.walk()) if self.root is not None else []

    def internal_nodes(self) -> list[MetricNode]:
        return [n for n in self.nodes() if n.children]

    def node_count(self) -> int:
        return len(self.nodes())

    def edge_count(self) -> int:
        return max(0, self.node_count() - 1)

    def tags(self) -> set[str]:
        return {n.tag for n in self.nodes()}


def metric_node_from_mapping(raw: Any) -> MetricNode:
    if not isinstance(raw, dict) or not isinstance(raw.get("tag"), str):
        raise ValueError(f"metric tree node needs a string `tag`, got {raw!r}")
    children = raw.get("children", [])
    if not isinstance(children, list):
        raise ValueError("`children` must be an array")
    bbox = None
    if raw.get("bbox") is not None:
        bbox = BBox.from_values(raw["bbox"])
    return MetricNode(
        tag=raw["tag"].lower(),
        children=tuple(metric_node_from_mapping(c) for c in children),
        bbox=bbox,
    )


def metric_tree_from_mapping(raw: Any) -> MetricTree:
    if raw is None:
        return MetricTree(root=None)
    return MetricTree(root=metric_node_from_mapping(raw))


def metric_tree_from_component(root: ComponentNode | None) -> MetricTree:
    if root is None:
        return MetricTree(root=None)

    def convert(n: ComponentNode) -> MetricNode:
        return MetricNode(
            tag=n.tag.value.lower(),
            children=tuple(convert(c) for c in n.children),
            bbox=n.bbox,
        )

    return MetricTree(root=convert(root))


def load_metric_tree(path: str | Path) -> MetricTree:
    return metric_tree_from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Visual metrics

def _to_gray(image: Image.Image) -> np.ndarray:
    """Rec.601 luma on [0,255] as float64."""
    arr = np.asarray(image.convert("RGB"), dtype=np.float64)
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


def _align(a: Image.Image, b: Image.Image) -> tuple[np.ndarray, np.ndarray]:
    """Resize the prediction onto the reference's dimensions, then grayscale."""
    if a.width == 0 or a.height == 0 or b.width == 0 or b.height == 0:
        raise EmptyImage("images must have nonzero area")
    if a.size != b.size:
        a = a.resize(b.size, Image.BILINEAR)
    return _to_gray(a), _to_gray(b)


def mse(a: Image.Image, b: Image.Image) -> float:
    ga, gb = _align(a, b)
    return float(np.mean((ga - gb) ** 2))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    radius = size // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _window_means(gray: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(gray, kernel, axis=0, mode="reflect")
    out = correlate1d(out, kernel, axis=1, mode="reflect")
    radius = len(kernel) // 2
    return out[radius:-radius, radius:-radius]


def ssim(a: Image.Image, b: Image.Image) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=0.01 K2=0.03 L=255."""
    ga, gb = _align(a, b)
    height, width = gb.shape
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise ImageTooSmall(f"need at least {SSIM_WINDOW}px per side, got {width}x{height}")
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a = _window_means(ga, kernel)
    mu_b = _window_means(gb, kernel)
    var_a = _window_means(ga * ga, kernel) - mu_a * mu_a
    var_b = _window_means(gb * gb, kernel) - mu_b * mu_b
    cov = _window_means(ga * gb, kernel) - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))


def _encode_png_base64(image: Image.Image) -> str:
    buf = io.BytesIO()
    image.convert("RGBA").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _embed(image: Image.Image, base_url: str) -> np.ndarray:
    import requests

    try:
        resp = requests.post(
            base_url.rstrip("/") + "/embed",
            json={"image": _encode_png_base64(image)},
            timeout=60,
        )
    except requests.RequestException as exc:
        raise EmbeddingServiceError(f"embedding service unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise EmbeddingServiceError(f"embedding service returned HTTP {resp.status_code}")
    try:
        payload = resp.json()
    except ValueError as exc:
        raise EmbeddingServiceError("embedding response is not JSON") from exc
    vector = payload.get("embedding") if isinstance(payload, dict) else payload
    if not isinstance(vector, list) or not vector:
        raise EmbeddingServiceError("embedding response missing vector")
    try:
        return np.asarray(vector, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise EmbeddingServiceError(f"embedding vector malformed: {exc}") from exc


def clip_score(a: Image.Image, b: Image.Image, embed_url: str) -> float:
    """Cosine similarity between service embeddings of the two images."""
    va = _embed(a, embed_url)
    vb = _embed(b, embed_url)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0 or not (math.isfinite(na) and math.isfinite(nb)):
        raise EmbeddingServiceError("embedding vector has zero or non-finite norm")
    return float(np.dot(va, vb) / (na * nb))


# ---------------------------------------------------------------------------
# Structural metrics

def height1_subtrees(tree: MetricTree) -> Counter:
    """Multiset of "parent(child,child,...)" strings, one per internal node."""
    out: Counter = Counter()
    for node in tree.internal_nodes():
        out[f"{node.tag}({','.join(c.tag for c in node.children)})"] += 1
    return out


def tree_bleu(t: MetricTree, t_ref: MetricTree) -> float:
    ref = height1_subtrees(t_ref)
    if not ref:
        raise DegenerateReference("reference tree has no internal nodes")
    got = height1_subtrees(t)
    matched = sum((got & ref).values())
    return matched / sum(ref.values())


@dataclass(frozen=True)
class TedConfig:
    insert_cost: float = 1.0
    delete_cost: float = 1.0
    relabel_cost: float = 1.0

    def relabel(self, a: str, b: str) -> float:
        return 0.0 if a == b else self.relabel_cost


def _postorder(root: MetricNode) -> list[MetricNode]:
    out: list[MetricNode] = []

    def walk(n: MetricNode) -> None:
        for c in n.children:
            walk(c)
        out.append(n)

    walk(root)
    return out


def _zs_arrays(root: MetricNode) -> tuple[list[str], list[int], list[int]]:
    """Postorder tags, leftmost-leaf indices, and keyroots (all 0-based)."""
    nodes = _postorder(root)
    position = {id(n): i for i, n in enumerate(nodes)}
    lml = []
    for node in nodes:
        probe = node
        while probe.children:
            probe = probe.children[0]
        lml.append(position[id(probe)])
    last_for_lml: dict[int, int] = {}
    for i, value in enumerate(lml):
        last_for_lml[value] = i
    keyroots = sorted(last_for_lml.values())
    return [n.tag for n in nodes], lml, keyroots


def ordered_tree_distance(r1: MetricNode, r2: MetricNode, cfg: TedConfig) -> float:
    """Zhang–Shasha edit distance between two ordered, tag-labeled trees."""
    tags1, lml1, keyroots1 = _zs_arrays(r1)
    tags2, lml2, keyroots2 = _zs_arrays(r2)
    n1, n2 = len(tags1), len(tags2)
    td = [[0.0] * n2 for _ in range(n1)]

    for i in keyroots1:
        for j in keyroots2:
            # Forest distance over the subforests rooted under keyroots i and j.
            m = i - lml1[i] + 2
            n = j - lml2[j] + 2
            fd = [[0.0] * n for _ in range(m)]
            ioff = lml1[i] - 1
            joff = lml2[j] - 1
            for x in range(1, m):
                fd[x][0] = fd[x - 1][0] + cfg.delete_cost
            for y in range(1, n):
                fd[0][y] = fd[0][y - 1] + cfg.insert_cost
            for x in range(1, m):
                for y in range(1, n):
                    if lml1[x + ioff] == lml1[i] and lml2[y + joff] == lml2[j]:
                        fd[x][y] = min(
                            fd[x - 1][y] + cfg.delete_cost,
                            fd[x][y - 1] + cfg.insert_cost,
                            fd[x - 1][y - 1] + cfg.relabel(tags1[x + ioff], tags2[y + joff]),
                        )
                        td[x + ioff][y + joff] = fd[x][y]
                    else:
                        fd[x][y] = min(
                            fd[x - 1][y] + cfg.delete_cost,
                            fd[x][y - 1] + cfg.insert_cost,
                            fd[lml1[x + ioff] - 1 - ioff][lml2[y + joff] - 1 - joff]
                            + td[x + ioff][y + joff],
                        )
    return td[n1 - 1][n2 - 1]


def tree_edit_distance(t: MetricTree, t_ref: MetricTree, cfg: TedConfig | None = None) -> float:
    """Ordered TED; empty/no-shared-tag predictions fall back to reference edges."""
    cfg = cfg or TedConfig()
    if t.root is None and t_ref.root is None:
        return 0.0
    if t_ref.root is None:
        return float(t.node_count())
    if t.root is None or not (t.tags() & t_ref.tags()):
        return float(t_ref.edge_count())
    return ordered_tree_distance(t.root, t_ref.root, cfg)


def _iou(a: BBox, b: BBox) -> float:
    inter = bbox_intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def container_match(t: MetricTree, t_ref: MetricTree) -> float:
    """Mean over reference containers of the best IoU any predicted container hits."""
    ref_internal = t_ref.internal_nodes()
    if not ref_internal:
        raise DegenerateReference("reference tree has no internal nodes")
    for node in ref_internal:
        if node.bbox is None:
            raise MissingBBox(f"reference container {node.tag!r} has no bbox")
    pred_internal = t.internal_nodes()
    if not pred_internal:
        return 0.0
    for node in pred_internal:
        if node.bbox is None:
            raise MissingBBox(f"predicted container {node.tag!r} has no bbox")
    total = 0.0
    for ref_node in ref_internal:
        total += max(_iou(p.bbox, ref_node.bbox) for p in pred_internal)
    return total / len(ref_internal)


# ---------------------------------------------------------------------------
# Consolidated report

@dataclass(frozen=True)
class MetricReport:
    tree_bleu: float
    ted: float
    container_match: float
    mse: float | None = None
    ssim: float | None = None
    clip: float | None = None

    def to_mapping(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if self.mse is not None:
            out["mse"] = self.mse
        if self.ssim is not None:
            out["ssim"] = self.ssim
        if self.clip is not None:
            out["clip"] = self.clip
        out["tree_bleu"] = self.tree_bleu
        out["ted"] = self.ted
        out["container_match"] = self.container_match
        return out


def evaluate(
    pred_tree: MetricTree,
    truth_tree: MetricTree,
    pred_image: Image.Image | None = None,
    truth_image: Image.Image | None = None,
    embed_url: str | None = None,
) -> MetricReport:
    """Score a prediction; absent inputs leave their fields absent, never zero."""
    mse_value = ssim_value = clip_value = None
    if pred_image is not None and truth_image is not None:
        mse_value = mse(pred_image, truth_image)
        ssim_value = ssim(pred_image, truth_image)
        if embed_url:
            clip_value = clip_score(pred_image, truth_image, embed_url)
    return MetricReport(
        tree_bleu=tree_bleu(pred_tree, truth_tree),
        ted=tree_edit_distance(pred_tree, truth_tree),
        container_match=container_match(pred_tree, truth_tree),
        mse=mse_value,
        ssim=ssim_value,
        clip=clip_value,
    )


def serialize_report(report: MetricReport) -> str:
    return json.dumps(report.to_mapping(), indent=2) + "\n"


def write_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(serialize_report(report), encoding="utf-8")


def load_report(path: str | Path) -> dict[str, float]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
