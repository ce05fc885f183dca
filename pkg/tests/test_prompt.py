import pytest
from hypothesis import given
from hypothesis import strategies as st

from golden_cases import GOLDEN_DIR, cases
from sgrag.chunks import KnowledgeChunk, encode_chunk
from sgrag.errors import InputError
from sgrag.prompt import (
    EMPTY_CONTEXT,
    PromptTemplate,
    assemble,
    build_prompt,
    context_lines,
    default_head,
    format_context,
)
from sgrag.scene_graph import GridCell
from sgrag.vector_store import RetrievalHit


def hit(cid: str, label: str, score: float = 0.5) -> RetrievalHit:
    chunk = KnowledgeChunk(cid, "img", label, 1, ((GridCell.CENTER, 1),), ())
    return RetrievalHit(cid, score, encode_chunk(chunk))


def test_layout_example():
    assert assemble(PromptTemplate("H"), "[1] T", "Q?").text == "H\n\nContext:\n[1] T\n\nQuestion:\nQ?"


def test_format_context():
    assert format_context([]) == EMPTY_CONTEXT == "(no relevant visual context)"
    h = hit("img#car", "car")
    assert format_context([h]) == f"[1] {h.chunk.canonical_text}"
    lines = format_context([hit("a", "a"), hit("b", "b"), hit("c", "c"), hit("d", "d")]).split("\n")
    assert [ln[:4] for ln in lines] == ["[1] ", "[2] ", "[3] ", "[4] "]
    assert lines[2].endswith("category: c | count: 1 | locations: center x1 | relations: none")


@pytest.mark.parametrize("name", sorted(cases()))
def test_golden(name):
    assert cases()[name].text.encode("utf-8") == (GOLDEN_DIR / f"{name}.txt").read_bytes()


def test_golden_metadata():
    c = cases()
    assert c["car_road_k4"].k_used == 4
    assert c["car_road_k4"].retrieved_chunk_ids == ("carroad#car", "carroad#road")
    assert len(c["car_road_k4"].similarity_scores) == 2
    assert c["single_chunk_k4"].retrieved_chunk_ids == ("lone#car",)
    assert c["empty_context"].retrieved_chunk_ids == ()
    assert context_lines(c["empty_context"].text) == []
    assert c["custom_head_k1"].k_used == 1


def test_default_head_is_resource():
    head = default_head()
    assert head and PromptTemplate().head_text == head
    assert not head.endswith("\n")


def test_errors():
    with pytest.raises(InputError):
        assemble(PromptTemplate("H"), "x", "  ")
    with pytest.raises(InputError):
        PromptTemplate("")
    with pytest.raises(InputError):
        PromptTemplate("H", context_label="Facts:")


def test_template_from_file(tmp_path):
    (tmp_path / "h.txt").write_text("Be brief.", encoding="utf-8")
    assert PromptTemplate.from_file(tmp_path / "h.txt").head_text == "Be brief."


text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30)


@given(text, text, text.filter(str.strip))
def test_sections_in_order(head, context, question):
    out = assemble(PromptTemplate(head), context, question).text
    i = out.index(head)
    j = out.index("Context:", i + len(head))
    k = out.rindex("Question:")
    assert i == 0 and j < k and out.endswith(question)


def test_context_roundtrip_with_embedded_newline():
    h = hit("img#x", "x")
    p = build_prompt(PromptTemplate("H"), [h, hit("img#y", "y")], "Q?")
    assert context_lines(p.text) == [f"[1] {h.chunk.canonical_text}", f"[2] {hit('img#y', 'y').chunk.canonical_text}"]
    # a head that itself contains the label text still parses from the right
    tricky = PromptTemplate("H\n\nContext:\nnot context")
    p = build_prompt(tricky, [h], "Q?")
    assert context_lines(p.text) == [f"[1] {h.chunk.canonical_text}"]
