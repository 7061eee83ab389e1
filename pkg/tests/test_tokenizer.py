import pytest

from fundus_vlm_cli.tokenizer import (
    BOS,
    EOS,
    PAD,
    ByteTokenizer,
    decode_answer,
    detokenize,
    encode_answer,
    encode_prompt,
    tokenize,
)


def test_encode_wraps_bytes_in_bos_eos():
    assert tokenize("hi").ids == [BOS, 104, 105, EOS]
    assert not tokenize("hi").truncated


def test_decode_inverts_encode_for_utf8():
    text = "Bruch’s membrane, 视网膜"
    assert detokenize(tokenize(text).ids) == text


def test_truncation_is_flagged_and_keeps_eos():
    encoded = tokenize("abcdefghij", max_tokens=6)
    assert encoded.truncated
    assert len(encoded) == 6
    assert encoded.ids[0] == BOS and encoded.ids[-1] == EOS
    assert detokenize(encoded.ids) == "abcd"


def test_special_ids_are_not_decoded():
    assert detokenize([BOS, 65, PAD, 66, EOS]) == "AB"


def test_prompt_and_answer_framing():
    assert encode_prompt("Q?") == [BOS, ord("Q"), ord("?"), ord("\n")]
    assert encode_answer("ok") == [ord("o"), ord("k"), EOS]


def test_decode_answer_stops_at_first_eos():
    assert decode_answer([ord("y"), ord("e"), ord("s"), EOS, ord("x")]) == "yes"


def test_tokenizer_needs_room_for_specials():
    with pytest.raises(ValueError):
        ByteTokenizer(max_tokens=1)
