"""Smoke test for the pyfusionlink extension module.

Build and install first:

    pip install --no-build-isolation ./crates/python
    python3 python/smoke_test.py
"""

import math

import pyfusionlink as fl


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    tok = fl.Tokenizer(["Bobby Charlton played for United .", "Jack Charlton managed Ireland ."])
    ids = tok.encode("Jack Charlton played")
    assert tok.decode(ids) == "Jack Charlton played", tok.decode(ids)
    assert "Charlton" in tok and len(tok) > 8

    words = [t for t, _, _ in fl.split("Bobby Charlton, 1966.")]
    assert words == ["Bobby", "Charlton", ",", "1966", "."], words

    pred = [("Bobby Charlton", ["Charlton", "Bobby"]), ("Manchester United F.C.", ["United"])]
    assert fl.parse_el(fl.serialize_el(pred)) == pred
    assert fl.parse_el("") == []
    try:
        fl.parse_el("no mention marker", strict=True)
    except ValueError as e:
        assert "MalformedSegment" in str(e)
    else:
        raise AssertionError("strict parse accepted a malformed segment")

    assert close(fl.nce_loss([0.0], [0.0]), math.log(2))
    assert close(fl.nce_loss([2.0], [0.0, 1.0]), math.log(1 + math.exp(-2) + math.exp(-1)))
    assert fl.nce_loss([1.0], []) == 0.0
    assert close(fl.score([1.0, 2.0], [3.0, -1.0]), 1.0)

    assert close(fl.linear_schedule(55, 100, 1e-4, 0.1), 5e-5)

    kept = fl.resolve_overlaps([(0, 5, "A"), (0, 13, "B"), (20, 25, "C")])
    assert kept == [(0, 13, "B"), (20, 25, "C")], kept

    gold = {"d": [(0, 5, "A"), (10, 15, "B")]}
    p, r, f = fl.micro_prf({"d": [(0, 5, "A"), (10, 15, "X")]}, gold, ["A", "B"])
    assert (p, r, f) == (0.5, 0.5, 0.5), (p, r, f)

    reader_err, retriever_err = fl.gradcheck()
    assert reader_err < 1e-3 and retriever_err < 1e-3, (reader_err, retriever_err)

    assert fl.run_cli(["gradcheck", "--d-model", "4"]) == 0
    assert fl.run_cli(["link", "--no-such-flag"]) == 1

    print("smoke test ok")


if __name__ == "__main__":
    main()
