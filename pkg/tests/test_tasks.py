import numpy as np
import pytest
from numpy.testing import assert_array_equal

from convgla import ConfigError, DataError
from convgla.model import ModelConfig, init_model
from convgla.tasks import (
    _EVAL_NOUNS,
    _TRAIN_NOUNS,
    SampleRecord,
    TOKEN_ID,
    VOCAB,
    collate,
    detokenize,
    dump_samples,
    evaluate,
    gen_niah,
    gen_passkey,
    generate_set,
    load_samples,
    needle_depth,
)


class TestVocab:
    def test_small_and_unique(self):
        assert len(VOCAB) <= 256
        assert len(set(VOCAB)) == len(VOCAB)

    def test_detokenize_merges_digit_runs(self):
        toks = [TOKEN_ID[w] for w in ["the", "pass", "key", "is", "3", "8", "2", "7", "1"]]
        assert detokenize(toks) == "the pass key is 38271"

    def test_pools_disjoint(self):
        assert not set(_TRAIN_NOUNS) & set(_EVAL_NOUNS)


class TestPasskey:
    def test_deterministic(self):
        a = gen_passkey(256, seed=42)
        b = gen_passkey(256, seed=42)
        assert a == b
        assert a != gen_passkey(256, seed=43)

    def test_exact_length(self):
        for n in (64, 128, 200, 256, 512, 1024):
            for seed in (0, 1, 2):
                s = gen_passkey(n, seed)
                assert len(s.tokens) == n  # well inside the ±2% contract

    def test_answer_span_is_the_key(self):
        s = gen_passkey(128, seed=7)
        ans = detokenize(s.tokens[s.answer_start : s.answer_end])
        assert ans == s.target_value
        assert len(s.target_value) == 5 and s.target_value[0] != "0"

    def test_needle_present_before_query(self):
        s = gen_passkey(128, seed=3)
        body = detokenize(s.tokens[: s.answer_start])
        assert body.count(s.target_value) == 2  # stated twice in the needle

    def test_depths_cover_all_deciles(self):
        depths = [needle_depth(gen_passkey(512, seed)) for seed in range(1000)]
        buckets = {min(int(d * 10), 9) for d in depths}
        assert buckets == set(range(10))

    def test_too_small_context_rejected(self):
        with pytest.raises(ConfigError):
            gen_passkey(20, seed=0)

    def test_eval_pool_uses_held_out_nouns(self):
        tr = gen_passkey(256, 0, pool="train")
        ev = gen_passkey(256, 0, pool="eval")
        train_ids = {TOKEN_ID[w] for w in _TRAIN_NOUNS}
        eval_ids = {TOKEN_ID[w] for w in _EVAL_NOUNS}
        assert not (set(tr.tokens) & eval_ids)
        assert not (set(ev.tokens) & train_ids)

    def test_bad_pool(self):
        with pytest.raises(ConfigError):
            gen_passkey(128, 0, pool="test")


class TestNiah:
    def test_variants(self):
        v1 = gen_niah(160, 5, 1)
        v2 = gen_niah(160, 5, 2)
        v3 = gen_niah(160, 5, 3)
        assert v1.task == "niah1" and len(v1.tokens) == 160
        assert v2.task == "niah2" and len(v2.target_value) == 5
        assert v3.task == "niah3" and len(v3.target_value) == 8
        assert v1.target_value in VOCAB  # one-word value
        assert v2.target_value.isdigit()
        assert v3.target_value.isalnum()

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            gen_niah(160, 0, 4)

    def test_value_recoverable_from_answer_span(self):
        for v in (1, 2, 3):
            s = gen_niah(200, 11, v)
            assert detokenize(s.tokens[s.answer_start : s.answer_end]) == s.target_value


class TestRecordAndCollate:
    def test_record_validation(self):
        with pytest.raises(ConfigError):
            SampleRecord((1, 2, 3), 1, 3, "sorting", "x", 3, 0)
        with pytest.raises(DataError):
            SampleRecord((1, 2, 3), 2, 2, "passkey", "x", 3, 0)

    def test_collate_shapes(self):
        samples = generate_set("passkey", 128, range(4))
        toks, spans = collate(samples)
        assert toks.shape == (4, 128) and spans.shape == (4, 2)
        assert_array_equal(toks[0], np.array(samples[0].tokens))

    def test_collate_rejects_ragged_and_empty(self):
        with pytest.raises(DataError):
            collate([])
        with pytest.raises(DataError):
            collate([gen_passkey(128, 0), gen_passkey(135, 0)])


class TestPersistence:
    def test_jsonl_roundtrip(self, tmp_path):
        samples = generate_set("niah2", 150, range(5), pool="eval")
        p = tmp_path / "samples.jsonl"
        dump_samples(p, samples)
        assert load_samples(p) == samples


class TestEvaluate:
    def test_oracle_model_scores_percent(self):
        # a model that is fed the full answer... instead: use an untrained
        # model and merely check the plumbing + accuracy bounds
        rng = np.random.default_rng(0)
        m = init_model(rng, ModelConfig(vocab_size=len(VOCAB), d_model=8, n_layers=0,
                                        n_heads=2, d_ff=8, max_seq=256))
        samples = generate_set("passkey", 96, range(6))
        out = evaluate(m, samples, batch_size=4)
        assert out["n"] == 6
        assert 0.0 <= out["accuracy"] <= 1.0
        assert {r["task"] for r in out["per_sample"]} == {"passkey"}

    def test_empty_sample_list_rejected(self):
        m = init_model(np.random.default_rng(0),
                       ModelConfig(vocab_size=len(VOCAB), d_model=8, n_layers=0,
                                   n_heads=2, d_ff=8, max_seq=256))
        with pytest.raises(DataError):
            evaluate(m, [])

    def test_correctness_criterion_matches_target_tokens(self):
        # craft a "model" by monkeypatching generate to emit the true span
        import convgla.tasks as tasks_mod

        samples = generate_set("passkey", 96, range(3))
        true_rows = {s.seed: np.array(s.tokens[s.answer_start:s.answer_end]) for s in samples}

        class FakeModel:
            pass

        def fake_generate(model, prefix, n_new, mode="chunked", lora=None):
            return np.stack([true_rows[s] for s in sorted(true_rows)][: prefix.shape[0]])

        real = tasks_mod.evaluate.__globals__  # noqa: F841  (documentation of intent)
        import convgla.model as model_mod
        orig = model_mod.generate_greedy
        model_mod.generate_greedy = fake_generate
        try:
            out = evaluate(FakeModel(), samples)
        finally:
            model_mod.generate_greedy = orig
        assert out["accuracy"] == 1.0
