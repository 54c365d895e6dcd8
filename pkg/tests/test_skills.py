import json

import pytest
from hypothesis import given, settings, strategies as st

from skillgate.skills import (
    EDIT_LOG,
    EMPTY_FINGERPRINT,
    Action,
    CapacityError,
    Edit,
    EditKind,
    SkillDoc,
    SkillError,
    SkillLibrary,
    SkillParseError,
    TargetError,
    apply_edit,
    canonicalize,
    diff_libraries,
    load_library,
    logged_fingerprints,
    parse_skill,
    render_skill,
    replay,
    revert,
    save_library,
    state_at,
)

from conftest import SKILL_FIXTURES, make_doc


@pytest.mark.parametrize("path", SKILL_FIXTURES, ids=lambda p: p.stem)
def test_fixture_round_trip(path):
    text = path.read_text(encoding="utf-8")
    doc = parse_skill(text)
    assert doc.name == path.stem
    assert render_skill(parse_skill(render_skill(doc))) == render_skill(doc)
    assert canonicalize(text) == text


def test_fixture_provenance_actions():
    actions = sorted(parse_skill(p.read_text()).provenance.action.value for p in SKILL_FIXTURES)
    assert actions == ["ADD", "ADD", "MODIFY", "MODIFY"]


def test_fresh_skill_frontmatter_order():
    lib = apply_edit(SkillLibrary(), Edit.add(make_doc("check_units", ["units"])), epoch=1, update_cycle=3, probe_score=4)
    text = render_skill(lib.skills[0])
    head = text.split("---\n")[1].splitlines()
    keys = [line.split(":")[0] for line in head if not line.startswith(" ")]
    assert keys == ["name", "description", "tags", "version", "provenance"]
    prov = [line.strip().split(":")[0] for line in head if line.startswith(" ")]
    assert prov == ["epoch", "update_cycle", "action", "probe_score"]
    assert "action: ADD" in text and "probe_score: 4" in text


def test_parse_errors_name_lines():
    with pytest.raises(SkillParseError) as e:
        parse_skill("name: x\n")
    assert e.value.line == 1
    with pytest.raises(SkillParseError) as e:
        parse_skill("---\nname: x\ndescription: y\nversion: zero\n---\n")
    assert e.value.line == 4
    with pytest.raises(SkillParseError) as e:
        parse_skill("---\nname: x\nversion: 1\n---\n")
    assert "description" in str(e.value)
    with pytest.raises(SkillParseError):
        parse_skill("---\nname: x\ndescription: y\nversion: 1\nname: z\n---\n")


def test_unknown_frontmatter_preserved():
    text = "---\nname: x\ndescription: y\ntags: [a]\nversion: 1\nowner: team\n---\n\n## Rule\n\nbody\n"
    doc = parse_skill(text)
    assert doc.extra == ("owner: team",)
    assert canonicalize(text) == text


names = st.from_regex(r"[a-z][a-z0-9_]{0,12}", fullmatch=True)
plain = st.text(st.characters(codec="utf-8", exclude_categories=("Cs", "Cc")), max_size=40).map(str.strip)


@settings(max_examples=150, deadline=None)
@given(
    name=names,
    description=plain,
    tags=st.lists(plain.filter(bool), max_size=4),
    version=st.integers(1, 50),
    sections=st.lists(st.tuples(plain.filter(lambda s: bool(s) and "\n" not in s), st.just("body text")),
                      max_size=3, unique_by=lambda s: s[0]),
)
def test_render_parse_round_trip(name, description, tags, version, sections):
    doc = SkillDoc(name, description, tuple(tags), version, sections=tuple(sections))
    back = parse_skill(render_skill(doc))
    assert (back.name, back.description, back.tags, back.version) == (name, description, tuple(tags), version)
    assert render_skill(back) == render_skill(doc)


def test_apply_edit_kinds_and_immutability():
    lib = SkillLibrary(capacity=2)
    a = apply_edit(lib, Edit.add(make_doc("a")))
    assert len(lib) == 0 and a.names == ["a"]
    b = apply_edit(a, Edit.modify("a", make_doc("a", description="better")))
    assert b.get("a").version == 2 and b.get("a").provenance.action is Action.MODIFY
    assert [d.version for d in b.archive] == [1]
    c = apply_edit(b, Edit.add(make_doc("b")))
    with pytest.raises(CapacityError):
        apply_edit(c, Edit.add(make_doc("c")))
    d = apply_edit(c, Edit.add_with_remove(make_doc("c"), "a"))
    assert d.names == ["b", "c"]
    with pytest.raises(TargetError):
        apply_edit(d, Edit.remove("a"))
    with pytest.raises(TargetError):
        apply_edit(d, Edit.add(make_doc("b")))
    e = apply_edit(d, Edit.remove("b"))
    assert e.names == ["c"] and len(e.edit_log) == 5


def test_library_rejects_over_capacity():
    with pytest.raises(CapacityError):
        SkillLibrary(skills=(make_doc("a"), make_doc("b")), capacity=1)


def test_replay_and_revert():
    lib = SkillLibrary()
    for name in "abc":
        lib = apply_edit(lib, Edit.add(make_doc(name, [name])))
    lib = apply_edit(lib, Edit.remove("b"))
    assert replay(lib.edit_log, lib.capacity).fingerprint == lib.fingerprint
    fps = logged_fingerprints(lib)
    assert fps[0] == EMPTY_FINGERPRINT
    back = revert(lib, fps[2])
    assert back.names == ["a", "b"]
    assert back.edit_log[-1].edit.kind is EditKind.REVERT
    assert len(back.edit_log) == len(lib.edit_log) + 1
    assert replay(back.edit_log).fingerprint == back.fingerprint
    assert revert(back, fps[0]).names == []
    assert state_at(lib, fps[1][:10]).names == ["a"]
    with pytest.raises(TargetError):
        state_at(lib, "nope")


def test_save_load_and_archive(tmp_path):
    lib = apply_edit(SkillLibrary(), Edit.add(make_doc("a")))
    lib = apply_edit(lib, Edit.modify("a", make_doc("a", description="v2")))
    lib = apply_edit(lib, Edit.add(make_doc("b")))
    save_library(lib, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.md")) == ["a.md", "b.md"]
    assert (tmp_path / "_archive" / "a.v1.md").exists()
    assert len((tmp_path / EDIT_LOG).read_text().splitlines()) == 3
    loaded = load_library(tmp_path)
    assert loaded.fingerprint == lib.fingerprint
    smaller = apply_edit(lib, Edit.remove("b"))
    save_library(smaller, tmp_path)
    assert not (tmp_path / "b.md").exists()
    assert len((tmp_path / EDIT_LOG).read_text().splitlines()) == 4
    with pytest.raises(SkillError):
        save_library(lib, tmp_path)


def test_load_library_detects_tampering(tmp_path):
    lib = apply_edit(SkillLibrary(), Edit.add(make_doc("a")))
    save_library(lib, tmp_path)
    (tmp_path / "a.md").write_text(render_skill(make_doc("a", description="edited by hand")))
    with pytest.raises(SkillError):
        load_library(tmp_path)


def test_diff_shows_section_changes():
    old = SkillLibrary(skills=(make_doc("x", sections=(("Rule", "one"), ("Example", "e"))),))
    new = SkillLibrary(skills=(make_doc("x", version=2, sections=(("Rule", "two"), ("Example", "e"))), make_doc("y")))
    lines = diff_libraries(old, new)
    assert lines[0] == "MODIFY x (v1 -> v2)"
    assert "  ~ section Rule" in lines
    assert "ADD y (v1)" in lines


def test_edit_serialization_round_trip():
    edit = Edit.add_with_remove(make_doc("n", ["t"]), "old", "because")
    assert Edit.from_dict(json.loads(json.dumps(edit.to_dict()))) == edit


def test_effectiveness_counts_accepted_states():
    lib = apply_edit(SkillLibrary(), Edit.add(make_doc("a")), probe_score=3)
    lib = apply_edit(lib, Edit.add(make_doc("b")))
    eff = lib.effectiveness()
    assert eff["a"] == {"present_in_accepted": 2, "probe_score": 3}
    assert eff["b"]["present_in_accepted"] == 1
