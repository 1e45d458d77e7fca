import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msaes.corpus import (
    ASAP_ESSAY_COUNTS,
    ASAP_PROMPTS,
    CRP_SPEC,
    Essay,
    IngestionError,
    PromptSpec,
    ScoreRangeError,
    compute_np,
    denormalize_score,
    load_asap_tsv,
    load_crp_csv,
    load_prompt_specs,
    make_folds,
    normalize_score,
    out_of_domain_pool,
    save_prompt_specs,
)

HEADER = "essay_id\tessay_set\tessay\tdomain1_score\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadAsap:
    def test_field_mapping(self, tmp_path):
        p = write(tmp_path, "a.tsv", HEADER + "1\t1\tDear local newspaper...\t8\n")
        (essay,) = load_asap_tsv(p, ASAP_PROMPTS)
        assert essay == Essay("1", 1, "Dear local newspaper...", 8.0)

    def test_out_of_range(self, tmp_path):
        p = write(tmp_path, "a.tsv", HEADER + "1\t1\ttext\t13\n")
        with pytest.raises(ScoreRangeError, match=":2"):
            load_asap_tsv(p, ASAP_PROMPTS)

    def test_empty_file(self, tmp_path):
        assert load_asap_tsv(write(tmp_path, "a.tsv", ""), ASAP_PROMPTS) == []

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "a.tsv", "essay_id\tessay\n1\tx\n")
        with pytest.raises(IngestionError, match="essay_set"):
            load_asap_tsv(p, ASAP_PROMPTS)

    def test_non_numeric_score(self, tmp_path):
        p = write(tmp_path, "a.tsv", HEADER + "1\t1\ttext\tten\n")
        with pytest.raises(IngestionError, match="a.tsv:2"):
            load_asap_tsv(p, ASAP_PROMPTS)

    def test_unknown_prompt(self, tmp_path):
        p = write(tmp_path, "a.tsv", HEADER + "1\t9\ttext\t1\n")
        with pytest.raises(IngestionError, match="unknown prompt"):
            load_asap_tsv(p, ASAP_PROMPTS)

    def test_prompt_filter(self, tmp_path):
        p = write(tmp_path, "a.tsv", HEADER + "1\t1\tx\t8\n2\t2\ty\t3\n")
        assert [e.essay_id for e in load_asap_tsv(p, ASAP_PROMPTS, prompts=[2])] == ["2"]

    def test_text_verbatim(self, tmp_path):
        text = 'He said "hi", then left.  Twice.'
        p = write(tmp_path, "a.tsv", HEADER + f"7\t3\t{text}\t2\n")
        assert load_asap_tsv(p, ASAP_PROMPTS)[0].text == text


class TestLoadCrp:
    def test_bounds(self, tmp_path):
        p = write(tmp_path, "c.csv", 'id,excerpt,target\na,"Once, upon a time",-3.68\nb,text,1.72\n')
        essays = load_crp_csv(p)
        assert [e.raw_score for e in essays] == [-3.68, 1.72]
        assert essays[0].text == "Once, upon a time"

    def test_out_of_range(self, tmp_path):
        p = write(tmp_path, "c.csv", "id,excerpt,target\na,x,2.0\n")
        with pytest.raises(ScoreRangeError):
            load_crp_csv(p)

    def test_malformed(self, tmp_path):
        p = write(tmp_path, "c.csv", "id,excerpt,target\na,x,1.0,extra\n")
        with pytest.raises(IngestionError):
            load_crp_csv(p)

    def test_spec_is_continuous(self):
        assert CRP_SPEC.score_min == -3.68 and CRP_SPEC.score_max == 1.72
        assert not CRP_SPEC.discrete


def test_prompt_spec_file_roundtrip(tmp_path):
    path = tmp_path / "specs.json"
    save_prompt_specs(ASAP_PROMPTS.values(), path)
    assert load_prompt_specs(path) == ASAP_PROMPTS
    rows = json.loads(path.read_text())
    assert set(rows[0]) >= {"prompt_id", "score_min", "score_max", "n_p"}


def test_prompt_spec_invariants():
    with pytest.raises(ValueError):
        PromptSpec(1, 5, 5, 10)
    with pytest.raises(ValueError):
        PromptSpec(1, 0, 5, 0)


class TestScaling:
    def test_values(self):
        assert normalize_score(15, ASAP_PROMPTS[7]) == 0.5
        assert normalize_score(2, ASAP_PROMPTS[1]) == 0.0
        assert normalize_score(45, ASAP_PROMPTS[8]) == 0.75

    def test_out_of_range(self):
        with pytest.raises(ScoreRangeError):
            normalize_score(13, ASAP_PROMPTS[1])

    def test_denormalize(self):
        assert denormalize_score(1.3, ASAP_PROMPTS[3]) == 3
        assert denormalize_score(0.5, ASAP_PROMPTS[7]) == 15
        assert denormalize_score(-0.4, ASAP_PROMPTS[1]) == 2

    @pytest.mark.parametrize("prompt", sorted(ASAP_PROMPTS))
    def test_roundtrip_exhaustive(self, prompt):
        spec = ASAP_PROMPTS[prompt]
        for s in range(int(spec.score_min), int(spec.score_max) + 1):
            assert denormalize_score(normalize_score(s, spec), spec) == s

    @pytest.mark.parametrize("prompt", sorted(ASAP_PROMPTS))
    def test_monotone_with_exact_endpoints(self, prompt):
        spec = ASAP_PROMPTS[prompt]
        grid = np.linspace(spec.score_min, spec.score_max, 101)
        values = [normalize_score(s, spec) for s in grid]
        assert values[0] == 0.0 and values[-1] == 1.0
        assert all(b > a for a, b in zip(values, values[1:]))


def essays_of(n, prompt=1):
    return [Essay(f"p{prompt}-{i}", prompt, "x", 2.0) for i in range(n)]


class TestFolds:
    def test_ten_essays(self):
        folds = make_folds(essays_of(10), seed=0)
        tests = [set(f.test_ids) for f in folds]
        assert all(len(t) == 2 for t in tests)
        assert set().union(*tests) == {e.essay_id for e in essays_of(10)}
        assert sum(len(t) for t in tests) == 10

    def test_deterministic(self):
        assert make_folds(essays_of(37), 5) == make_folds(essays_of(37), 5)
        assert make_folds(essays_of(37), 5) != make_folds(essays_of(37), 6)

    def test_prompt_one_quotas(self):
        n = ASAP_ESSAY_COUNTS[1]
        for f in make_folds(essays_of(n), seed=1):
            assert abs(len(f.train_ids) - 0.6 * n) <= 1
            assert abs(len(f.dev_ids) - 0.2 * n) <= 1
            assert abs(len(f.test_ids) - 0.2 * n) <= 1

    def test_too_few(self):
        with pytest.raises(ValueError):
            make_folds(essays_of(4), 0)

    @given(st.integers(5, 300), st.integers(0, 10_000))
    def test_partition(self, n, seed):
        ids = {e.essay_id for e in essays_of(n)}
        for f in make_folds(essays_of(n), seed):
            tr, dv, te = set(f.train_ids), set(f.dev_ids), set(f.test_ids)
            assert tr | dv | te == ids
            assert not (tr & dv) and not (tr & te) and not (dv & te)
            for part, quota in ((tr, 0.6), (dv, 0.2), (te, 0.2)):
                assert abs(len(part) - quota * n) <= 1


class TestOutOfDomainPool:
    def test_asap_style(self):
        corpus = [Essay(f"{p}-{i}", p, "x", ASAP_PROMPTS[p].score_max) for p in ASAP_PROMPTS for i in range(3)]
        pool = out_of_domain_pool(corpus, 1, ASAP_PROMPTS)
        assert {e.prompt_id for e, _ in pool} == set(range(2, 9))
        assert all(y == 1.0 for _, y in pool)

    def test_two_prompt_toy(self):
        specs = {1: PromptSpec(1, 0, 4, 10), 2: PromptSpec(2, 0, 10, 10)}
        corpus = [Essay("a", 1, "x", 1), Essay("b1", 2, "x", 5), Essay("b2", 2, "x", 10)]
        pool = out_of_domain_pool(corpus, 1, specs)
        assert [e.essay_id for e, _ in pool] == ["b1", "b2"]
        assert [y for _, y in pool] == [0.5, 1.0]
        assert all(0 <= y <= 1 for _, y in pool)

    def test_single_prompt(self):
        with pytest.raises(ValueError, match="no out-of-domain"):
            out_of_domain_pool([Essay("a", 1, "x", 3)], 1, ASAP_PROMPTS)


def test_compute_np():
    assert compute_np(list(range(1, 101))) == 91
    assert compute_np([5]) == 5
