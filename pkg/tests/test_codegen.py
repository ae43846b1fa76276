"""Style synthesis, code-unit validation, page assembly, and disk layout."""

import json

import pytest

from mock2code.codegen import (
    CodeUnit,
    DanglingDependency,
    MalformedCodeUnit,
    STYLE_KEYS,
    UnknownNodeReference,
    aggregate_container_style,
    assemble_page,
    derive_leaf_style,
    emission_order,
    generate_component_code,
    load_page,
    order_style,
    parse_code_units_response,
    parse_pct,
    parse_px,
    pct,
    postorder_containers,
    predict_leaf_style_llm,
    px,
    run_codegen,
    synthesize_styles,
    validate_unit_source,
    write_page,
)
from mock2code.grouping import ComponentNode, Tag, run_grouping_chain
from mock2code.llm import ResponseParseError
from mock2code.metadata import BBox

from helpers import CannedBackend, container, leaf, make_document, shape_layer, text_layer, three_band_doc
from scripted import ScriptedBackend


def doc_with(tmp_path, layers, **kwargs):
    return make_document(tmp_path, layers, **kwargs)


# -------------------------------------------------------------------- units


def test_px_pct_round_trip():
    assert px(5) == "5px" and parse_px("5px") == 5
    assert pct(50.0) == "50.00%" and parse_pct("50.00%") == 50.0
    assert pct(0.01) == "0.01%"
    with pytest.raises(ValueError):
        parse_px("5em")
    with pytest.raises(ValueError):
        parse_pct("5px")


def test_order_style_is_canonical_projection():
    scrambled = {"height": "1px", "left": "2px", "bogus": "x", "width": "3.00%", "top": "4px"}
    out = order_style(scrambled)
    assert list(out) == ["left", "top", "width", "height"]
    assert "bogus" not in out


# --------------------------------------------------------------- leaf style


def test_leaf_geometry_relative_to_parent(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [10, 20, 50, 30])], width=100, height=200)
    style = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert style == {"left": "10px", "top": "20px", "width": "50.00%", "height": "30px"}


def test_leaf_geometry_identity(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 100, 200])], width=100, height=200)
    style = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert style == {"left": "0px", "top": "0px", "width": "100.00%", "height": "200px"}


def test_leaf_clamped_into_parent(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [90, 0, 20, 10])], width=100, height=200)
    style = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert style["left"] == "90px" and style["width"] == "10.00%"
    # A leaf left of its parent clamps to offset zero, never negative.
    style = derive_leaf_style(doc.layers[0], BBox(95, 0, 5, 200))
    assert style["left"] == "0px"


def test_width_floor_applies_to_degenerate_leaves(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [5, 5, 0, 10])], width=100, height=200)
    style = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert style["width"] == "0.01%"


def test_text_leaf_properties(tmp_path):
    doc = doc_with(
        tmp_path,
        [
            text_layer("t1", [0, 0, 80, 22], "Hi", font_size=16, weight=700, color="#112233"),
            text_layer("t2", [0, 40, 80, 20], "Lo", font_size=12, line_height=18),
        ],
        width=100,
        height=200,
    )
    s1 = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert s1["font_size"] == "16px"
    assert s1["font_weight"] == "700"
    assert s1["line_height"] == "22px"  # defaults to the bbox height
    assert s1["color"] == "#112233FF"
    s2 = derive_leaf_style(doc.layers[1], BBox(0, 0, 100, 200))
    assert s2["line_height"] == "18px"  # explicit value wins


def test_paint_properties_pass_through(tmp_path):
    doc = doc_with(
        tmp_path,
        [
            shape_layer(
                "s",
                [0, 0, 10, 10],
                fill="#FF0000",
                border_color="#00FF00",
                border_width=2,
                corner_radius=4,
                padding=6,
                opacity=0.5,
                shadow={"dx": 1, "dy": 2, "blur": 3, "color": "#000000"},
            )
        ],
        width=100,
        height=200,
    )
    style = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert style["background_color"] == "#FF0000FF"
    assert style["border_color"] == "#00FF00FF"
    assert style["border_width"] == "2px"
    assert style["corner_radius"] == "4px"
    assert style["padding"] == "6px"
    assert style["opacity"] == "0.5"
    assert style["shadow"] == "1px 2px 3px #000000FF"
    assert list(style) == [k for k in STYLE_KEYS if k in style]


# ---------------------------------------------------------- container style


def test_root_container_style_spans_viewport():
    node = container("merged_Root", "Root", [leaf("a", 0, 0, 50, 50), leaf("b", 0, 60, 50, 50)])
    style = aggregate_container_style(node, None)
    assert style == {"left": "0px", "top": "0px", "width": "100.00%", "height": "110px"}


def test_container_geometry_relative_to_parent():
    node = container("merged_C", "C", [leaf("a", 10, 20, 50, 30)])
    style = aggregate_container_style(node, BBox(0, 0, 100, 200))
    assert style == {"left": "10px", "top": "20px", "width": "50.00%", "height": "30px"}


def test_overflowing_children_force_scroll():
    short = ComponentNode(
        id="merged_C",
        name="C",
        tag=Tag.VIEW,
        bbox=BBox(0, 0, 50, 50),
        children=(leaf("a", 0, 0, 50, 50), leaf("b", 0, 60, 50, 50)),
    )
    style = aggregate_container_style(short, BBox(0, 0, 100, 200))
    assert style["overflow"] == "scroll"
    fits = container("merged_C", "C", [leaf("a", 0, 0, 50, 50)])
    assert "overflow" not in aggregate_container_style(fits, BBox(0, 0, 100, 200))


# ------------------------------------------------------------- synthesized


def styled_tree(tmp_path):
    doc = three_band_doc(tmp_path)
    tree = run_grouping_chain(doc, ScriptedBackend())
    return doc, tree.root


def test_synthesize_styles_fills_every_node(tmp_path):
    doc, root = styled_tree(tmp_path)
    styled = synthesize_styles(root, doc)
    for node in styled.walk():
        assert node.style, f"{node.id} missing style"
        assert set(node.style) <= set(STYLE_KEYS)


def test_synthesize_styles_deterministic_and_idempotent(tmp_path):
    doc, root = styled_tree(tmp_path)
    once = synthesize_styles(root, doc)
    assert once == synthesize_styles(root, doc)
    assert once == synthesize_styles(once, doc)


def test_synthesize_handles_node_without_layer(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 10, 10])], width=100, height=200)
    root = container("merged_Root", "Root", [leaf("a", 0, 0, 10, 10), leaf("phantom", 20, 0, 10, 10)])
    styled = synthesize_styles(root, doc)
    phantom = styled.children[1]
    # Geometry only, relative to the container's 30px-wide union bbox.
    assert phantom.style == {"left": "20px", "top": "0px", "width": "33.33%", "height": "10px"}


def test_llm_style_mode_sanitizes_predictions(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [10, 20, 50, 30], fill="#FF0000")], width=100, height=200)
    backend = CannedBackend(
        ['{"style_props": {"background_color": "#AA0000FF", "blend_mode": "screen", "font_weight": 700}}']
    )
    style = predict_leaf_style_llm(doc.layers[0], BBox(0, 0, 100, 200), backend)
    assert style["background_color"] == "#AA0000FF"  # model value kept
    assert "blend_mode" not in style  # unknown prop dropped
    assert style["font_weight"] == "700"  # numeric coerced
    assert style["left"] == "10px" and style["width"] == "50.00%"  # geometry back-filled


def test_llm_style_falls_back_when_unusable(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [10, 20, 50, 30], fill="#FF0000")], width=100, height=200)
    derived = derive_leaf_style(doc.layers[0], BBox(0, 0, 100, 200))
    assert predict_leaf_style_llm(doc.layers[0], BBox(0, 0, 100, 200), CannedBackend(["no json here"])) == derived
    assert predict_leaf_style_llm(doc.layers[0], BBox(0, 0, 100, 200), CannedBackend(["{}"])) == derived


# --------------------------------------------------------------- validation


def subtree_ab():
    return container("merged_Card", "Card", [leaf("a", 0, 0, 10, 10), leaf("b", 0, 20, 10, 10)])


def test_validate_unit_source_accepts_known_references():
    source = (
        "const Card = () => (\n"
        "  <View style={styles.merged_Card}>\n"
        "    <Text style={styles.a} />\n"
        "    <Inner />\n"
        "    <Inner />\n"
        "  </View>\n"
        ");"
    )
    deps = validate_unit_source(source, subtree_ab(), {"Inner"})
    assert deps == ("Inner",)


def test_validate_unit_source_rejects_unknown_style_ref():
    with pytest.raises(UnknownNodeReference, match="styles.zzz"):
        validate_unit_source("<View style={styles.zzz} />", subtree_ab(), set())


def test_validate_unit_source_rejects_unknown_tag():
    with pytest.raises(MalformedCodeUnit, match="<Widget>"):
        validate_unit_source("<Widget style={styles.a} />", subtree_ab(), set())


def test_parse_code_units_accepts_wrapper_and_fences():
    text = json.dumps(
        {
            "code_units": [
                {"node_id": "n1", "source": "```jsx\nconst A = () => (<View />);\n```"},
                {"node_id": "n2", "source": "const B = () => (<View />);\n\n"},
            ]
        }
    )
    units = parse_code_units_response(text)
    assert units[0] == {"node_id": "n1", "source": "const A = () => (<View />);"}
    assert units[1] == {"node_id": "n2", "source": "const B = () => (<View />);"}


def test_parse_code_units_rejects_malformed():
    with pytest.raises(ResponseParseError):
        parse_code_units_response('{"code_units": "nope"}')
    with pytest.raises(ResponseParseError):
        parse_code_units_response('[{"node_id": "x"}]')
    with pytest.raises(ResponseParseError):
        parse_code_units_response('[{"node_id": 3, "source": "s"}]')


# ---------------------------------------------------------- unit generation


def card_with_inner():
    inner = container("merged_Inner", "Inner", [leaf("b", 0, 20, 10, 10)])
    return container("merged_Card", "Card", [leaf("a", 0, 0, 10, 10), inner])


def units_json(entries):
    return json.dumps([{"node_id": nid, "source": src} for nid, src in entries])


def test_generate_component_code_postorder_and_deps(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 10, 10]), shape_layer("b", [0, 20, 10, 10])])
    subtree = card_with_inner()
    response = units_json(
        [
            ("merged_Card", "const Card = () => (<View style={styles.merged_Card}><Text style={styles.a} /><Inner /></View>);"),
            ("merged_Inner", "const Inner = () => (<View style={styles.merged_Inner}><Text style={styles.b} /></View>);"),
        ]
    )
    units = generate_component_code(subtree, doc.screenshot, CannedBackend([response]))
    assert [u.name for u in units] == ["Inner", "Card"]  # children first
    assert units[0].dependencies == ()
    assert units[1].dependencies == ("Inner",)
    assert units[1].node_id == "merged_Card"


def test_generate_component_code_requires_all_containers(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 10, 10]), shape_layer("b", [0, 20, 10, 10])])
    only_outer = units_json([("merged_Card", "const Card = () => (<View />);")])
    with pytest.raises(UnknownNodeReference, match="merged_Inner"):
        generate_component_code(card_with_inner(), doc.screenshot, CannedBackend([only_outer]))


def test_generate_component_code_rejects_unknown_container(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 10, 10])])
    subtree = container("merged_Card", "Card", [leaf("a", 0, 0, 10, 10)])
    bad = units_json([("merged_Card", "<View />"), ("merged_Elsewhere", "<View />")])
    with pytest.raises(UnknownNodeReference, match="merged_Elsewhere"):
        generate_component_code(subtree, doc.screenshot, CannedBackend([bad]))


def test_generate_component_code_retries_parse_failure(tmp_path):
    doc = doc_with(tmp_path, [shape_layer("a", [0, 0, 10, 10])])
    subtree = container("merged_Card", "Card", [leaf("a", 0, 0, 10, 10)])
    good = units_json([("merged_Card", "const Card = () => (<View style={styles.a} />);")])
    backend = CannedBackend(["sorry, no", good])
    units = generate_component_code(subtree, doc.screenshot, backend)
    assert len(units) == 1
    assert "could not be parsed" in backend.requests[1].rendered_text


# ----------------------------------------------------------------- assembly


def test_assemble_page_synthesizes_entry():
    bg = leaf("bg", 0, 0, 100, 200, tag=Tag.IMAGE)
    div_a = container("merged_A", "A", [leaf("a", 0, 0, 10, 10)])
    div_b = container("merged_B", "B", [leaf("b", 0, 100, 10, 10)])
    root = ComponentNode(
        id="merged_Root", name="Root", tag=Tag.VIEW, bbox=BBox(0, 0, 100, 200),
        children=(bg, div_a, div_b),
    )
    unit_a = CodeUnit("merged_A", "A", "const A = () => (<View style={styles.a} />);", ())
    unit_b = CodeUnit("merged_B", "B", "const B = () => (<View style={styles.b} />);", ())
    page = assemble_page([[unit_a], [unit_b]], root)
    assert page.entry == "Root"
    entry = page.entry_unit
    assert entry.dependencies == ("A", "B")
    assert "<Image style={styles.bg} />" in entry.source
    assert entry.source.index("styles.bg") < entry.source.index("<A />") < entry.source.index("<B />")
    assert set(page.stylesheet) == {n.id for n in root.walk()}


def test_assemble_page_scroll_root_uses_scroll_view():
    root = ComponentNode(
        id="merged_Root", name="Root", tag=Tag.VIEW, bbox=BBox(0, 0, 100, 200),
        children=(leaf("a", 0, 0, 10, 10),), style={"overflow": "scroll"},
    )
    page = assemble_page([], root)
    assert "<ScrollView style={styles.merged_Root}>" in page.entry_unit.source
    assert "</ScrollView>" in page.entry_unit.source


def test_assemble_page_rejects_duplicate_names():
    root = container("merged_Root", "Root", [container("merged_A", "A", [leaf("a", 0, 0, 10, 10)])])
    dupe = CodeUnit("merged_A", "A", "<View />", ())
    with pytest.raises(DanglingDependency, match="duplicate"):
        assemble_page([[dupe], [dupe]], root)


def test_assemble_page_rejects_dangling_dependency():
    root = container("merged_Root", "Root", [container("merged_A", "A", [leaf("a", 0, 0, 10, 10)])])
    unit = CodeUnit("merged_A", "A", "<Ghost />", ("Ghost",))
    with pytest.raises(DanglingDependency, match="Ghost"):
        assemble_page([[unit]], root)


def test_postorder_and_emission_order():
    root = container(
        "merged_Root",
        "Root",
        [
            leaf("bg", 0, 0, 100, 10),
            container("merged_A", "A", [container("merged_A1", "A1", [leaf("a", 0, 0, 10, 10)])]),
            container("merged_B", "B", [leaf("b", 0, 20, 10, 10)]),
        ],
    )
    assert [n.id for n in postorder_containers(root)] == [
        "merged_A1", "merged_A", "merged_B", "merged_Root"
    ]
    assert [n.id for n in emission_order(root)] == ["merged_A1", "merged_A", "merged_B", "merged_Root"]


# --------------------------------------------------------------- full round


def test_run_codegen_with_scripted_model(tmp_path):
    doc = three_band_doc(tmp_path)
    tree = run_grouping_chain(doc, ScriptedBackend())
    page = run_codegen(tree.root, doc, ScriptedBackend())
    container_ids = [n.id for n in page.root.walk() if n.is_container]
    assert sorted(u.node_id for u in page.units) == sorted(container_ids)
    assert page.entry == "Root"
    assert page.units[-1].name == "Root"
    for unit in page.units:
        assert unit.source.strip()


def test_write_load_round_trip_is_byte_stable(tmp_path):
    doc = three_band_doc(tmp_path)
    tree = run_grouping_chain(doc, ScriptedBackend())
    page = run_codegen(tree.root, doc, ScriptedBackend())

    first = tmp_path / "out1"
    write_page(page, first)
    reloaded = load_page(first)
    assert [u.name for u in reloaded.units] == [u.name for u in page.units]
    assert [u.source for u in reloaded.units] == [u.source for u in page.units]
    assert [set(u.dependencies) for u in reloaded.units] == [set(u.dependencies) for u in page.units]
    assert reloaded.stylesheet == page.stylesheet
    assert reloaded.root == page.root

    second = tmp_path / "out2"
    write_page(reloaded, second)
    for path in sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file()):
        assert (second / path).read_bytes() == (first / path).read_bytes(), path


def test_load_page_missing_component_file(tmp_path):
    doc = three_band_doc(tmp_path)
    tree = run_grouping_chain(doc, ScriptedBackend())
    page = run_codegen(tree.root, doc, ScriptedBackend())
    out = tmp_path / "out"
    write_page(page, out)
    (out / "components" / "Section1.src").unlink()
    with pytest.raises(FileNotFoundError, match="Section1"):
        load_page(out)
