"""Prompt construction, stub generation, leak masking, tokenization and record IO."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmfuse import qa
from ssmfuse.errors import SchemaError, SsmfuseError, ValidationError
from ssmfuse.qa import MASK, MASK_ID, PAD_ID, UNK_ID, Narration, QaRecord, Vocab

GOLDEN = Path(__file__).parent / "golden" / "prompts.json"

VERBS = ["drink", "cut", "take", "put", "open", "close", "wash", "pour", "stir", "carry", "fry", "peel",
         "pick up", "turn on", "mix", "dry", "chop", "slice", "move", "rinse"]
NOUNS = ["water", "onion", "knife", "pan", "frying pan", "cup", "lid", "tap", "cutting board", "dish",
         "potato", "box", "glass", "spoon", "berry", "bag", "egg", "fork", "bowl", "oil"]


def record(**kw):
    base = dict(id="r0", narration="drink water", verb="drink", noun="water", description="d",
                question_verb="What should you do to the <MASK> here?", question_noun="What is being <MASK>-ed?",
                answer_verb="drink", answer_noun="water")
    base.update(kw)
    return QaRecord(**base)


def corpus(n, seed=0):
    rng = np.random.default_rng(seed)
    items = [Narration(f"{i:05d}", f"{v} the {o}", v, o)
             for i, (v, o) in enumerate(zip(rng.choice(VERBS, n), rng.choice(NOUNS, n)))]
    return items


class TestPrompts:
    def test_slots_filled_once(self):
        enrich, ask = qa.build_prompts("drink water", "drink", "water")
        assert enrich.count('"drink water"') == 1
        assert ask.count('"drink"') == 1 and ask.count('"water"') == 1

    def test_two_stage_wording(self):
        enrich, ask = qa.build_prompts("drink water", "drink", "water")
        assert "description" in enrich.lower()
        assert "VERB_QUESTION:" in ask and "NOUN_QUESTION:" in ask

    @pytest.mark.parametrize("args", [("", "drink", "water"), ("drink water", " ", "water"),
                                      ("drink water", "drink", "")])
    def test_empty_fields_rejected(self, args):
        with pytest.raises(ValidationError):
            qa.build_prompts(*args)

    def test_unfilled_placeholder(self):
        with pytest.raises(ValidationError, match="unfilled"):
            qa.render_template(qa.QUESTION_TEMPLATE, verb="drink")

    @pytest.mark.parametrize("idx", range(3))
    def test_golden(self, idx):
        gold = json.loads(GOLDEN.read_text(encoding="utf-8"))[idx]
        enrich, ask = qa.build_prompts(gold["narration"], gold["verb"], gold["noun"])
        assert enrich == gold["enrich_prompt"]
        assert ask == gold["question_prompt"]
        rec = qa.generate_record(Narration(gold["id"], gold["narration"], gold["verb"], gold["noun"]),
                                 qa.StubClient())
        assert dataclasses.asdict(rec) == gold["record"]
        assert dataclasses.asdict(rec.masked()) == gold["masked"]


class TestStub:
    def test_cross_terms(self):
        qv, qn, desc = qa.stub_generate("questions", "drink", "water")
        assert "water" in qv and "drink" in qn
        assert qv == "What should you do to the water here?"
        assert qn == "What is being drink-ed in this scene?"

    def test_deterministic(self):
        assert qa.stub_generate("enrich", "cut", "onion") == qa.stub_generate("enrich", "cut", "onion")

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            qa.stub_generate("summarise", "cut", "onion")

    def test_every_output_needs_masking(self):
        rng = np.random.default_rng(50)
        for v, n in zip(rng.choice(VERBS, 50), rng.choice(NOUNS, 50)):
            qv, qn, _ = qa.stub_generate("questions", v, n)
            assert qa.mask_question(qv, n) != qv
            assert qa.mask_question(qn, v) != qn

    def test_client_counts_two_calls_per_record(self):
        client = qa.StubClient()
        qa.run_pipeline(corpus(5), client)
        assert client.calls == 10


class TestMask:
    @pytest.mark.parametrize("question, term, expected", [
        ("What should you do to the water to enjoy its refreshing taste?", "water",
         "What should you do to the <MASK> to enjoy its refreshing taste?"),
        ("Pick up the frying pan", "frying pan", "Pick up the <MASK>"),
        ("Nothing here", "water", "Nothing here"),
        ("WATER, Water and water.", "water", "<MASK>, <MASK> and <MASK>."),
        ("She waters the plants", "water", "She <MASK> the plants"),
        ("Who is cutting it? It was cut.", "cut", "Who is <MASK> it? It was <MASK>."),
        ("The watermelon stays", "water", "The watermelon stays"),
        ("stirred and stirring", "stir", "<MASK> and <MASK>"),
        ("two dishes", "dish", "two <MASK>"),
        ("berries everywhere", "berry", "<MASK> everywhere"),
        ("she dried it", "dry", "she <MASK> it"),
        ("taking it", "take", "<MASK> it"),
        ("the frying  pans", "frying pan", "the <MASK>"),
    ])
    def test_cases(self, question, term, expected):
        assert qa.mask_question(question, term) == expected

    def test_empty_term(self):
        with pytest.raises(ValidationError):
            qa.mask_question("a question", "  ")

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet=st.sampled_from(list("abcdefghijklmnopqrstuvwxyz <>MASK.,-")), max_size=60),
           st.sampled_from(VERBS + NOUNS))
    def test_idempotent(self, text, term):
        once = qa.mask_question(text, term)
        assert qa.mask_question(once, term) == once

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(["the", "a", "of", "water", "waters", "pan", "frying", "cut", "cutting", "bowl"]),
                    max_size=12), st.sampled_from(["water", "frying pan", "cut", "bowl"]))
    def test_no_term_survives(self, words, term):
        assert not qa.contains_term(qa.mask_question(" ".join(words), term), term)

    @pytest.mark.parametrize("word, forms", [
        ("cut", {"cuts", "cutting", "cutted", "cuted", "cutes"}),
        ("take", {"takes", "taking", "taked", "takeing"}),
        ("carry", {"carries", "carried", "carrying"}),
        ("wash", {"washes", "washed", "washing"}),
    ])
    def test_surface_forms(self, word, forms):
        got = qa.surface_forms(word)
        assert word in got
        assert forms <= got


class TestTokenize:
    def test_example(self):
        vocab = Vocab.from_texts(["drink water"])
        ids = qa.tokenize("Drink water.", vocab, 5)
        assert list(ids) == [vocab.id("drink"), vocab.id("water"), PAD_ID, PAD_ID, PAD_ID]

    def test_mask_id(self):
        assert list(qa.tokenize("<MASK>", Vocab(), 1)) == [MASK_ID]
        assert Vocab().token(MASK_ID) == MASK

    def test_unknown(self):
        assert qa.tokenize("zebra", Vocab(["cat"]), 2)[0] == UNK_ID

    @settings(max_examples=100, deadline=None)
    @given(st.text(max_size=80), st.integers(1, 30))
    def test_length_contract(self, text, length):
        assert qa.tokenize(text, Vocab.from_texts([text]), length).shape == (length,)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(["Drink", "water", "<MASK>", "the", "pan", "?", ",", "42"]), max_size=10))
    def test_round_trip(self, words):
        text = " ".join(words)
        vocab = Vocab.from_texts([text])
        norm = qa.normalize(text)
        back = qa.detokenize(qa.tokenize(text, vocab, 16), vocab)
        assert back.split() == [MASK if t == "<mask>" else t for t in norm]

    def test_bad_length(self):
        with pytest.raises(ValidationError):
            qa.tokenize("x", Vocab(), 0)

    def test_vocab_bijective(self):
        vocab = Vocab.from_texts(["b a c", "a d"])
        ids = [vocab.id(t) for t in "abcd"]
        assert len(set(ids)) == 4 and min(ids) == 3
        assert [vocab.token(i) for i in ids] == list("abcd")


class TestRecords:
    def test_answers_must_match(self):
        with pytest.raises(ValidationError):
            record(answer_verb="eat").validate()

    def test_strict_leak(self):
        rec = record(question_noun="What is being drunk or drinking?")
        rec.validate()
        with pytest.raises(ValidationError, match="verb"):
            rec.validate(strict=True)

    def test_masked_is_strictly_valid(self):
        rec = qa.generate_record(Narration("1", "drink water", "drink", "water"), qa.StubClient())
        with pytest.raises(ValidationError):
            rec.validate(strict=True)
        rec.masked().validate(strict=True)

    def test_round_trip_100(self, tmp_path):
        recs = qa.run_pipeline(corpus(100), qa.StubClient())
        path = tmp_path / "q.jsonl"
        assert qa.write_records(path, recs) == 100
        assert qa.read_records(path) == recs

    def test_missing_field(self, tmp_path):
        path = tmp_path / "q.jsonl"
        d = dataclasses.asdict(record())
        del d["noun"]
        path.write_text(json.dumps(dataclasses.asdict(record())) + "\n" + json.dumps(d) + "\n")
        with pytest.raises(SchemaError, match=r":2: missing field 'noun'"):
            qa.read_records(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "q.jsonl"
        path.write_text("\n{not json\n")
        with pytest.raises(SchemaError, match=r":2:"):
            qa.read_records(path)

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "q.jsonl"
        path.write_text(json.dumps({**dataclasses.asdict(record()), "extra": "x"}) + "\n")
        with pytest.raises(SchemaError, match="extra"):
            qa.read_records(path)

    def test_strict_read_rejects_leak(self, tmp_path):
        path = tmp_path / "q.jsonl"
        qa.write_records(path, [record(question_noun="Is it drinking?")])
        assert len(qa.read_records(path)) == 1
        with pytest.raises(ValidationError, match=r":1:"):
            qa.read_records(path, strict=True)

    def test_training_corpus_is_masked(self, tmp_path):
        path = tmp_path / "q.jsonl"
        qa.write_records(path, qa.run_pipeline(corpus(20), qa.StubClient()))
        for rec in qa.load_training_corpus(path):
            rec.validate(strict=True)


class TestNarrations:
    def test_read(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text('id,narration,verb,noun\n1,"pick up the pan, carefully",pick up,pan\n')
        assert qa.read_narrations(path) == [Narration("1", "pick up the pan, carefully", "pick up", "pan")]

    def test_bad_header(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("id,text\n1,x\n")
        with pytest.raises(SchemaError, match="header"):
            qa.read_narrations(path)

    def test_empty_cell(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("id,narration,verb,noun\n1,x,,pan\n")
        with pytest.raises(SchemaError, match=r":2: empty field 'verb'"):
            qa.read_narrations(path)


class TestClients:
    def test_parse_questions(self):
        assert qa.parse_questions("junk\nVERB_QUESTION: a?\n NOUN_QUESTION : b?\n") == ("a?", "b?")
        with pytest.raises(ValidationError):
            qa.parse_questions("VERB_QUESTION: only one")

    def test_default_client_is_stub_without_key(self, monkeypatch):
        monkeypatch.delenv(qa.API_KEY_ENV, raising=False)
        assert isinstance(qa.default_client(), qa.StubClient)

    def test_key_selects_http_client(self, monkeypatch):
        monkeypatch.setenv(qa.API_KEY_ENV, "k")
        monkeypatch.setenv(qa.API_URL_ENV, "http://127.0.0.1:9/v1")
        client = qa.default_client()
        assert isinstance(client, qa.HttpGenerationClient) and client.url.endswith(":9/v1")

    def test_http_client_gives_up_after_retries(self):
        client = qa.HttpGenerationClient("k", url="http://127.0.0.1:9/none", timeout=0.5, retries=1, backoff=0.0)
        with pytest.raises(SsmfuseError, match="2 attempts"):
            client.complete([{"role": "user", "content": "hi"}])

    def test_second_stage_sees_first_reply(self):
        seen = []

        class Recorder(qa.StubClient):
            def complete(self, messages):
                seen.append([m["content"] for m in messages])
                return super().complete(messages)

        qa.generate_record(Narration("1", "wash the cup", "wash", "cup"), Recorder())
        assert len(seen[0]) == 1 and len(seen[1]) == 3
        assert seen[1][1] == "A person is about to wash the cup."


def test_leak_free_corpus_1k():
    recs = qa.run_pipeline(corpus(1000, seed=1), qa.StubClient(), training=True)
    leaks = sum(qa.contains_term(r.question_noun, r.verb) or qa.contains_term(r.question_verb, r.noun) for r in recs)
    assert leaks == 0
    assert all(qa.mask_question(r.question_noun, r.verb) == r.question_noun for r in recs)
