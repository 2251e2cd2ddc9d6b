import json

import numpy as np
import pytest

from scnet import data as D
from scnet.data import SplitMix64, SynthConfig, build_vocabulary, generate_instance


def test_normalize_answer():
    assert D.normalize_answer("  Coca-Cola!  ") == "coca-cola"
    assert D.normalize_answer("\"The  END.\"") == "the end"
    assert D.normalize_answer("") == ""


def test_build_vocabulary_examples():
    v = build_vocabulary(["a b", "a"], 5, d_ft=4)
    assert v.words == ["<pad>", "<begin>", "<end>", "a", "b"]
    assert v.embeddings.shape == (5, 4)
    tie = build_vocabulary(["y", "x"], 5, d_ft=4)
    assert tie.words[3:] == ["x", "y"]
    small = build_vocabulary(["a"], 10, d_ft=4)
    assert len(small) == 4
    with pytest.raises(ValueError):
        build_vocabulary(["a"], 3)


def test_vocabulary_file_round_trip(tmp_path):
    v = build_vocabulary(["red bus", "bus", "stop"], 10, d_ft=6)
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == v.words
    again = D.Vocabulary.load(tmp_path / "vocab.txt", None, 6)
    assert again.words == v.words and np.array_equal(again.embeddings, v.embeddings)
    with pytest.raises(ValueError):
        D.Vocabulary(["a", "<pad>"], np.zeros((2, 1)))


# -- PRNG ----------------------------------------------------------------

def test_splitmix64_reference_values():
    # first outputs for seed 0 from the published SplitMix64 reference
    r = SplitMix64(0)
    assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4,
                                                  0x06C45D188009454F]


def test_prng_split_and_ranges():
    a = SplitMix64.split(7, 3)
    b = SplitMix64.split(7, 3)
    c = SplitMix64.split(7, 4)
    xs = [a.random() for _ in range(100)]
    assert xs == [b.random() for _ in range(100)]
    assert xs[:5] != [c.random() for _ in range(5)]
    assert all(0 <= x < 1 for x in xs)
    r = SplitMix64(1)
    assert all(0 <= r.randint(6) < 6 for _ in range(200))
    z = SplitMix64(2).normals(4000)
    assert abs(z.mean()) < 0.1 and abs(z.std() - 1) < 0.1


# -- generator ----------------------------------------------------------

def test_generation_is_deterministic():
    cfg = SynthConfig(seed=11, n_instances=5, ocr_error_rate=0.3, bias_strength=0.5)
    a, _ = generate_instance(cfg, 3)
    b, _ = generate_instance(cfg, 3)
    assert D.dumps_instance(a) == D.dumps_instance(b)
    D._LEXICON_CACHE.clear()
    c, _ = generate_instance(cfg, 3)
    assert D.dumps_instance(a) == D.dumps_instance(c)
    with pytest.raises(IndexError):
        generate_instance(cfg, 5)


def test_no_corruption_at_zero_rate():
    cfg = SynthConfig(seed=1, n_instances=20, ocr_error_rate=0.0)
    for i in range(20):
        inst, notes = generate_instance(cfg, i)
        assert [t.text for t in inst.ocr] == notes.true_texts
        assert not notes.is_ocr_trap


def test_full_corruption_changes_every_character():
    cfg = SynthConfig(seed=1, n_instances=20, ocr_error_rate=1.0)
    for i in range(20):
        inst, notes = generate_instance(cfg, i)
        for tok, true in zip(inst.ocr, notes.true_texts):
            assert len(tok.text) == len(true)
            assert all(x != y for x, y in zip(tok.text, true))
            assert set(tok.text) <= set(D.CORRUPT_ALPHABET)


def test_corrupt_text_rule():
    r = SplitMix64(5)
    assert D.corrupt_text("hello", 0.0, r) == "hello"
    out = D.corrupt_text("aaaa", 1.0, r)
    assert "a" not in out and len(out) == 4


def test_instance_shape_and_traps():
    cfg = SynthConfig(seed=3, n_instances=300, ocr_error_rate=0.3, bias_strength=0.5)
    insts, notes = D.generate_dataset(cfg)
    vocab = build_vocabulary([i.answers[0] for i in insts], 100, d_ft=cfg.d_ft)
    for inst, n in zip(insts, notes):
        assert len(inst.answers) == 10 and len(set(inst.answers)) == 1
        assert inst.question_tokens == ["what", n.attr, "is", "the", n.noun]
        assert 3 <= len(inst.ocr) <= cfg.max_ocr_tokens
        assert 1 <= len(inst.objects) <= cfg.max_objects
        assert all(t.phoc.shape == (604,) and t.appearance.shape == (cfg.d_fr,) for t in inst.ocr)
        assert n.true_texts[n.answer_slot] == n.answer_word
        if n.is_ocr_trap:
            # the true word survives in the answer list and so in the vocabulary
            assert n.answer_word in vocab.word_to_index
    assert any(n.is_ocr_trap for n in notes)
    assert any(n.is_bias_trap for n in notes)
    lex = D.lexicon_for(cfg)
    trig = [n for n in notes if n.noun == D.TRIGGER_NOUN]
    for n in trig:
        distractor = lex.distractor[D.ATTRIBUTES.index(n.attr)]
        if n.is_bias_trap:
            # planted next to the real answer, never the answer itself
            assert distractor in n.true_texts and n.answer_word != distractor
    assert any(n.answer_word == lex.distractor[D.ATTRIBUTES.index(n.attr)] for n in trig)
    assert not any(n.is_bias_trap for n in notes if n.noun != D.TRIGGER_NOUN)
    assert 0.0 < D.reachability(insts, vocab) <= 1.0


# -- JSONL ---------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(seed=2, n_instances=4, ocr_error_rate=0.2)
    insts, _ = D.generate_dataset(cfg)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    D.save_dataset(p1, insts)
    back = D.load_dataset(p1)
    assert back == insts
    for x, y in zip(back, insts):
        assert x.ocr[0].appearance.tobytes() == y.ocr[0].appearance.tobytes()
    D.save_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    rec = json.loads(p1.read_text().splitlines()[0])
    assert set(rec) == {"instance_id", "image_w", "image_h", "question_tokens", "ocr", "objects",
                        "answers"}


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert D.load_dataset(tmp_path / "e.jsonl") == []


def test_schema_errors_name_the_field(tmp_path):
    cfg = SynthConfig(seed=2, n_instances=2)
    insts, _ = D.generate_dataset(cfg)
    good = insts[0].to_dict()
    cases = []
    r = dict(good)
    del r["answers"]
    cases.append((r, "'answers'"))
    r = json.loads(json.dumps(good))
    r["ocr"][1]["fasttext"][2] = "x"
    cases.append((r, r"ocr\[1\].fasttext\[2\]"))
    r = json.loads(json.dumps(good))
    del r["objects"][0]["box"]["ymax"]
    cases.append((r, r"objects\[0\].box"))
    for rec, pattern in cases:
        p = tmp_path / "bad.jsonl"
        p.write_text(D.dumps_instance(insts[1]) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(D.DatasetError, match="line 2") as err:
            D.load_dataset(p)
        assert err.match(pattern)
    (tmp_path / "j.jsonl").write_text("{oops\n")
    with pytest.raises(D.DatasetError, match="line 1"):
        D.load_dataset(tmp_path / "j.jsonl")


def test_reference_padding_and_training_answer():
    inst = D.VqaInstance("x", 1.0, 1.0, [], [], [], ["A", "b", "b"])
    refs, padded = D.reference_answers(inst)
    assert padded and len(refs) == 10 and refs[:4] == ["a", "b", "b", "a"]
    assert D.training_answer(inst) == "b"
