"""Smoke tests for the python bindings."""

import json
import math
import os

import pytest

import emodiff


def test_softmax_basics():
    probs = emodiff.softmax([0.0, 0.0])
    assert probs == pytest.approx([0.5, 0.5])
    probs = emodiff.softmax([1.0, 0.0])
    e = math.e
    assert probs == pytest.approx([e / (e + 1.0), 1.0 / (e + 1.0)], rel=1e-12)
    assert sum(emodiff.softmax([3.0, -1.0, 0.5, 9.0])) == pytest.approx(1.0, abs=1e-12)


def test_attention_single_key_is_value_row():
    out = emodiff.attention([[1.0, 2.0], [0.0, -1.0]], [[0.5, 0.5]], [[7.0, -3.0, 2.0]])
    assert out == [[7.0, -3.0, 2.0], [7.0, -3.0, 2.0]]


def test_info_nce_closed_form():
    loss = emodiff.info_nce([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], tau=1.0)
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1.0)), rel=1e-12)
    with pytest.raises(ValueError):
        emodiff.info_nce([1.0, 0.0], [1.0, 0.0], [], tau=1.0)


def test_vq_loss_gradients():
    out = emodiff.vq_loss([1.0, 0.0], [[0.0, 0.0], [9.0, 9.0]], beta=0.25)
    assert out["nearest"] == 0
    assert out["loss"] == pytest.approx(1.25, rel=1e-12)
    assert out["grad_s"] == pytest.approx([0.5, 0.0], rel=1e-12)
    assert out["grad_codes"][:2] == pytest.approx([-2.0, 0.0], rel=1e-12)
    assert out["grad_codes"][2:] == pytest.approx([0.0, 0.0])


def test_grad_check():
    assert emodiff.grad_check_sum([0.3, -1.2, 2.0]) <= 1e-8


def test_condition_drop_rates():
    rates = emodiff.condition_drop_rates(draws=100000, seed=5)
    for key in ("audio", "image", "emotion", "all"):
        assert 0.045 <= rates[key] <= 0.055


def test_generate_corpus_and_clustering(tmp_path):
    out_dir = tmp_path / "corpus"
    count = emodiff.generate_corpus(
        str(out_dir), seed=3, identities=2, intensities=1, clips_per_cell=2, frames=4, feature_dim=6
    )
    assert count == 2 * 4 * 1 * 2
    index = (out_dir / "index.jsonl").read_text().strip().splitlines()
    assert len(index) == count
    entry = json.loads(index[0])
    assert set(entry) == {"clip_id", "identity", "emotion", "intensity", "file"}
    assert (out_dir / entry["file"]).exists()
    assert (out_dir / entry["file"]).read_bytes()[:4] == b"DCLP"

    strength = emodiff.clustering_strength(
        [
            ([-0.5, 0.0], 0),
            ([0.5, 0.0], 0),
            ([9.5, 0.0], 1),
            ([10.5, 0.0], 1),
        ]
    )
    assert strength == pytest.approx(20.0, rel=1e-12)


def test_interpolate_and_project():
    points = emodiff.interpolate([0.0, 0.0], [2.0, 4.0], steps=3)
    assert points[0] == [0.0, 0.0]
    assert points[1] == pytest.approx([1.0, 2.0])
    assert points[2] == [2.0, 4.0]

    proj = emodiff.project_2d([[float(i), float(i % 3), 0.5] for i in range(10)])
    assert len(proj["coords"]) == 10
    assert 0.0 < proj["variance_explained"] <= 1.0
    assert not proj["degenerate"]
