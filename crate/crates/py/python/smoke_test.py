"""Smoke test for the simstudent extension: build it with maturin, then run this file."""

import tempfile

import simstudent


def main() -> None:
    a = simstudent.sample_profile(7)
    assert a == simstudent.sample_profile(7), "sampling is deterministic"
    assert simstudent.validate_profile(a) == []
    text = simstudent.render_profile(a)
    assert a["major"] in text

    emb = [simstudent.stub_embedding(simstudent.render_profile(simstudent.sample_profile(s))) for s in range(20)]
    out = simstudent.propagate(emb, [float(1 + s % 10) for s in range(20)], threshold=0.8, alpha=0.5)
    assert out["converged"] and len(out["scores"]) == 20

    ids = ["a", "b", "c"]
    assert simstudent.filter_candidates(ids, [9.0, 8.0, 9.5], [8.5, 9.0, 7.0]) == ["a"]

    m = simstudent.ranking_metrics({"a": 9.0, "b": 7.0, "c": 5.0}, {"a": 9.0, "b": 8.5, "c": 4.0}, k=2)
    assert m["precision"] == 1.0 and m["pairwise_accuracy"] == 1.0
    assert abs(simstudent.mae({"a": 9.25}, {"a": 8.5}) - 0.75) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        meta = simstudent.run_pipeline(d, profiles=12, last_stage="rank")
        assert meta["counts"]["scoring_dialogues"] == 48, meta["counts"]
        try:
            simstudent.run_pipeline(d, last_stage="nowhere")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown stage accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
