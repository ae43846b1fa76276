"""Regenerates tests/fixtures/demo/ from scratch.

Run from the repository root:

    python3 tests/make_demo_fixture.py

The demo is a small mobile mockup (header, search field, two cards, nav bar)
pushed through the real pipeline with the deterministic scripted model behind
a recording proxy. Everything the end-to-end tests compare against lives in
the fixture directory afterwards:

    design.json / screenshot.png     the input document
    render.png                       byte copy of the screenshot (a faithful render)
    render_ok.json                   snapshot whose element boxes match the tree exactly
    render_bad.json                  same, with two division boxes shifted by (3, 2)
    transcript.jsonl                 every recorded model round-trip
    truth_tree.json                  hand-mutated ground-truth tree for metric tests
    golden/                          artifacts of a replayed full run against render_bad
"""

from __future__ import annotations

import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

from PIL import Image, ImageDraw

sys.path.insert(0, str(Path(__file__).parent))

from scripted import ScriptedBackend  # noqa: E402

from mock2code import cli, metrics  # noqa: E402
from mock2code.cli import RunConfig  # noqa: E402
from mock2code.grouping import parse_tree  # noqa: E402
from mock2code.llm import RecordingBackend, ReplayBackend, TranscriptStore  # noqa: E402

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "demo"

SCREEN_W = 360
SCREEN_H = 640

# Two division roots whose snapshot boxes get displaced in render_bad.json.
SHIFTED_IDS = ("merged_Section2", "merged_Section3")
SHIFT_DX = 3
SHIFT_DY = 2

EXPECTED_CONTAINER_IDS = {
    "merged_Root",
    "merged_Section1",
    "merged_Section2",
    "merged_Section2Group",
    "merged_Section3",
    "merged_Section3Group",
    "merged_Section4",
    "merged_Section4Group",
}


def design_layers() -> list[dict]:
    return [
        {"id": "bg", "type": "shape", "bbox": [0, 0, 360, 640],
         "style": {"fill": "#FFFFFF"}},
        # header band
        {"id": "icon_menu", "type": "icon", "bbox": [16, 24, 24, 24],
         "style": {"fill": "#333333"}},
        {"id": "title", "type": "text", "bbox": [56, 24, 160, 28],
         "text": {"content": "Home", "font_size": 20, "weight": 700, "color": "#111111"}},
        # search band
        {"id": "search_box", "type": "shape", "bbox": [16, 84, 328, 36],
         "style": {"fill": "#F2F2F2", "corner_radius": 8}},
        {"id": "search_text", "type": "text", "bbox": [32, 92, 120, 20],
         "text": {"content": "Search", "font_size": 14, "color": "#999999"}},
        {"id": "icon_search", "type": "icon", "bbox": [312, 92, 20, 20],
         "style": {"fill": "#666666"}},
        # card band
        {"id": "card_one", "type": "image", "bbox": [16, 152, 328, 140]},
        {"id": "card_one_title", "type": "text", "bbox": [28, 300, 180, 20],
         "text": {"content": "Featured article one", "font_size": 16, "color": "#222222"}},
        {"id": "card_two", "type": "image", "bbox": [16, 332, 328, 140]},
        {"id": "card_two_title", "type": "text", "bbox": [28, 480, 180, 20],
         "text": {"content": "Featured article two", "font_size": 16, "color": "#222222"}},
        # bottom navigation band
        {"id": "nav_bar", "type": "shape", "bbox": [0, 580, 360, 60],
         "style": {"fill": "#FAFAFA"}},
        {"id": "nav_home", "type": "icon", "bbox": [44, 596, 28, 28],
         "style": {"fill": "#444444"}},
        {"id": "nav_search", "type": "icon", "bbox": [166, 596, 28, 28],
         "style": {"fill": "#888888"}},
        {"id": "nav_profile", "type": "icon", "bbox": [288, 596, 28, 28],
         "style": {"fill": "#888888"}},
    ]


def _hex_to_rgb(color: str) -> tuple[int, int, int]:
    s = color.lstrip("#")
    return tuple(int(s[i:i + 2], 16) for i in (0, 2, 4))  # type: ignore[return-value]


def _layer_color(layer: dict) -> tuple[int, int, int]:
    style = layer.get("style") or {}
    if "fill" in style:
        return _hex_to_rgb(style["fill"])
    text = layer.get("text")
    if text and "color" in text:
        return _hex_to_rgb(text["color"])
    # stable pastel derived from the id; keeps regeneration reproducible
    digest = hashlib.md5(layer["id"].encode()).digest()
    return tuple(128 + d // 2 for d in digest[:3])  # type: ignore[return-value]


def paint_screenshot(layers: list[dict]) -> Image.Image:
    image = Image.new("RGBA", (SCREEN_W, SCREEN_H), (255, 255, 255, 255))
    draw = ImageDraw.Draw(image)
    for layer in layers:
        x, y, w, h = layer["bbox"]
        draw.rectangle([x, y, x + w - 1, y + h - 1], fill=_layer_color(layer) + (255,))
    return image


def snapshot_elements(tree_path: Path) -> list[dict]:
    root = parse_tree(tree_path.read_text(encoding="utf-8"))
    containers = [n for n in root.walk() if n.is_container]
    ids = {n.id for n in containers}
    assert ids == EXPECTED_CONTAINER_IDS, f"unexpected containers: {sorted(ids)}"
    return [
        {"id": n.id, "bbox": n.bbox.as_list(), "kind": "component"} for n in containers
    ]


def shifted(elements: list[dict]) -> list[dict]:
    out = []
    for e in elements:
        if e["id"] in SHIFTED_IDS:
            x, y, w, h = e["bbox"]
            e = {**e, "bbox": [x + SHIFT_DX, y + SHIFT_DY, w, h]}
            assert e["bbox"][0] + w <= SCREEN_W and e["bbox"][1] + h <= SCREEN_H
        out.append(e)
    return out


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def mutate_truth(tree: dict) -> dict:
    """Ground-truth variant: one dropped leaf, one retag, one resized container."""

    def walk(node: dict) -> dict:
        node = dict(node)
        if node["id"] == "merged_Section1":
            x, y, w, h = node["bbox"]
            node["bbox"] = [x, y, w, h // 2]
        if node["id"] == "card_two_title":
            node["tag"] = "View"
        if node.get("children"):
            node["children"] = [
                walk(c) for c in node["children"] if c["id"] != "nav_profile"
            ]
        return node

    return walk(tree)


def main() -> None:
    if FIXTURE_DIR.exists():
        shutil.rmtree(FIXTURE_DIR)
    FIXTURE_DIR.mkdir(parents=True)

    layers = design_layers()
    write_json(FIXTURE_DIR / "design.json", {
        "screen": {"width": SCREEN_W, "height": SCREEN_H},
        "screenshot": "screenshot.png",
        "layers": layers,
    })
    paint_screenshot(layers).save(FIXTURE_DIR / "screenshot.png")
    shutil.copyfile(FIXTURE_DIR / "screenshot.png", FIXTURE_DIR / "render.png")

    design_path = str(FIXTURE_DIR / "design.json")
    store = TranscriptStore()
    backend = RecordingBackend(ScriptedBackend(), store)

    with tempfile.TemporaryDirectory() as tmp:
        rec_out = Path(tmp) / "rec"
        cfg = RunConfig(output_dir=str(rec_out))
        tree_path = cli._do_group(design_path, cfg, backend)
        cli._do_generate(design_path, str(tree_path), cfg, backend)

        elements = snapshot_elements(rec_out / "tree.json")
        write_json(FIXTURE_DIR / "render_ok.json",
                   {"screenshot": "render.png", "elements": elements})
        write_json(FIXTURE_DIR / "render_bad.json",
                   {"screenshot": "render.png", "elements": shifted(elements)})

        # Record both refinement scenarios against copies of the generated page.
        for name in ("render_ok.json", "render_bad.json"):
            page_copy = Path(tmp) / f"page_{name.split('.')[0]}"
            shutil.copytree(rec_out, page_copy)
            cli._do_refine(str(page_copy), str(page_copy / "tree.json"),
                           design_path, str(FIXTURE_DIR / name), cfg, backend)
            rounds = json.loads(
                (page_copy / "suggestions.json").read_text(encoding="utf-8")
            )["rounds"]
            repaired = [s["node_id"] for s in rounds[0] if s["repaired"]]
            if name == "render_ok.json":
                assert repaired == [], f"clean render produced repairs: {repaired}"
            else:
                assert sorted(repaired) == sorted(SHIFTED_IDS), repaired

    store.save(FIXTURE_DIR / "transcript.jsonl")

    # Golden artifacts come from a fresh replayed run, not the recording run,
    # so they prove the transcript is complete.
    golden = FIXTURE_DIR / "golden"
    replay = ReplayBackend(TranscriptStore.load(FIXTURE_DIR / "transcript.jsonl"),
                           max_concurrency=1)
    cli._do_run(design_path, str(FIXTURE_DIR / "render_bad.json"),
                RunConfig(output_dir=str(golden)), replay)

    tree = json.loads((golden / "tree.json").read_text(encoding="utf-8"))
    write_json(FIXTURE_DIR / "truth_tree.json", mutate_truth(tree))

    pred_tree = metrics.load_metric_tree(golden / "tree.json")
    truth_tree = metrics.load_metric_tree(FIXTURE_DIR / "truth_tree.json")
    with Image.open(FIXTURE_DIR / "render.png") as img:
        pred_image = img.convert("RGBA")
    with Image.open(FIXTURE_DIR / "screenshot.png") as img:
        truth_image = img.convert("RGBA")
    report = metrics.evaluate(pred_tree, truth_tree,
                              pred_image=pred_image, truth_image=truth_image)
    metrics.write_report(report, golden / "report.json")

    entries = len(TranscriptStore.load(FIXTURE_DIR / "transcript.jsonl"))
    files = sorted(p.relative_to(FIXTURE_DIR).as_posix()
                   for p in FIXTURE_DIR.rglob("*") if p.is_file())
    print(f"transcript entries: {entries}")
    print("\n".join(files))


if __name__ == "__main__":
    main()
