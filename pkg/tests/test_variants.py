import json

import pytest

from twophase.variants import (CHECK_ORDER, ProfileError, Template, builtin_profiles, catalog,
                               get_profile, get_variant, lint_profile, load_profile,
                               profile_from_dict, profile_to_dict, variant_ids)


def test_catalog_has_22_unique_variants():
    ids = variant_ids()
    assert len(ids) == 22 and len(set(ids)) == 22


def test_every_variant_names_a_known_check():
    for v in catalog():
        assert v.check_id in CHECK_ORDER


def test_terminal_variants():
    assert {v.id for v in catalog() if v.terminal} == {"pte-present", "pte-reserved"}


def test_templates():
    assert get_variant("pte-us").template is Template.ONE_INSTR_LOAD
    assert get_variant("pte-us").mark == "*"
    assert get_variant("ss-null").mark == "**"


def test_unknown_variant():
    with pytest.raises(KeyError):
        get_variant("pte-nope")


@pytest.mark.parametrize("name", sorted(builtin_profiles()))
def test_builtin_profiles_round_trip_and_lint_clean(name):
    p = get_profile(name)
    assert profile_from_dict(profile_to_dict(p)) == p
    assert lint_profile(p) == []


def _data():
    return profile_to_dict(get_profile("intel-client"))


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d.update(bogus=1), "unknown field"),
    (lambda d: d.update(schema_version=99), "schema_version"),
    (lambda d: d["checks"].update(made_up={}), "unknown check id"),
    (lambda d: d["checks"]["pte_us"].update(delay=-1), "negative delay"),
    (lambda d: d["latencies"].update(l2=1), "strictly increasing"),
    (lambda d: d.update(rob_size=0), "rob_size"),
    (lambda d: d["expected"].update({"pte-us": "Q"}), "bad letter"),
    (lambda d: d.pop("checks"), "needs"),
])
def test_schema_errors(mutate, fragment):
    d = _data()
    mutate(d)
    with pytest.raises(ProfileError, match=fragment):
        profile_from_dict(d)


def test_lint_flags_expected_letter_mismatch(tmp_path):
    d = _data()
    d["expected"]["pte-us"] = "R"
    path = tmp_path / "p.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ProfileError, match="pte-us: expected R, simulated Y"):
        load_profile(path)
    assert load_profile(path, validate=False).expected["pte-us"] == "R"


def test_lint_flags_missing_timing():
    p = get_profile("intel-client")
    checks = dict(p.checks)
    del checks["pte_us"]
    assert any("pte_us" in msg for msg in lint_profile(p.with_(checks=checks)))
