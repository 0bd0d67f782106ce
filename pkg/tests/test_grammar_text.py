import numpy as np
import pytest

from tgseg import grammar
from tgseg.date import generate_auxiliary
from tgseg.text import BOS, EOS, PAD, PromptPair, tokenize, vocabulary

LOCATION_WORDS = {"left", "right", "upper", "lower"}


def _words(s):
    return s.lower().replace(",", " ").replace(".", " ").split()


def test_auxiliary_example():
    s = generate_auxiliary({"left-upper", "left-lower", "right-lower"})
    assert "left" in s and "right lower" in s
    assert s == generate_auxiliary(["right-lower", "left-lower", "left-upper"])


def test_empty_metadata_gives_healthy_text():
    assert generate_auxiliary(set()) == grammar.HEALTHY_AUXILIARY


def test_primary_auxiliary_relation_full_enumeration():
    for zones in grammar.all_placements():
        p, a = _words(grammar.primary_prompt(zones)), _words(generate_auxiliary(zones))
        assert LOCATION_WORDS & set(p) & set(a)
        assert len(set(p) ^ set(a)) >= 2
        assert grammar.parse_primary(grammar.primary_prompt(zones)) == set(zones)


def test_unknown_zone_rejected():
    with pytest.raises(ValueError):
        grammar.primary_prompt({"middle-upper"})


def test_vocabulary_closed_and_small():
    vocab = vocabulary()
    assert len(vocab) <= 64
    for s in grammar.all_sentences():
        assert 1 not in tokenize(s)  # no UNK


def test_tokenize_layout():
    ids = tokenize("Unilateral pulmonary infection", 8)
    assert ids[0] == BOS and ids[4] == EOS and (ids[5:] == PAD).all()
    long = tokenize(" ".join(["left"] * 40), 10)
    assert len(long) == 10 and long[-1] == EOS


def test_prompt_pair_lengths_match():
    pair = PromptPair.from_text(grammar.primary_prompt({"left-upper"}), generate_auxiliary({"left-upper"}))
    assert pair.primary_ids.shape == pair.auxiliary_ids.shape == (32,)
    assert pair.primary_mask.sum() == np.count_nonzero(pair.primary_ids)
    assert pair.concatenated_ids().shape == (32,)
