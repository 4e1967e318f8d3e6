"""Smoke test for the pysteerscope extension module.

Build and install first:  pip install --no-build-isolation crates/py
Then run:                 python3 python/smoke_test.py
"""
import math
import tempfile
from pathlib import Path

import pysteerscope as ss


def main():
    scenario = ss.emergence_scenario(num_checkpoints=6, num_layers=8, hidden_dim=16, num_samples=32, onset=2, seed=5)
    pos, neg, gold = ss.generate_scenario(scenario)
    ss.validate_pairing(pos, neg)
    print("dumps:", pos, neg)
    print("gold:", sorted(gold))

    train, test = ss.split_train_test(32, seed=1)
    assert sorted(train + test) == list(range(32))

    vsets = ss.fit_concept(pos, neg, train, method="pca")
    assert len(vsets) == 6
    for v in vsets[-1].vectors:
        assert abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-9

    matrix = ss.build_id_matrix(vsets, pos, neg, test)
    for row in matrix.normalized:
        assert min(row) >= 0.0 and max(row) <= 1.0 + 1e-12
    print("entropy:", [round(e, 3) for e in matrix.entropy_series()])

    report = ss.make_report(matrix, vsets)
    print("recommended layers:", report["recommended_layers"], "scale:", report["recommended_scale"])

    spec = ss.InterventionSpec(vsets[-1], report["recommended_layers"][:2], scale=4.0)
    layer = spec.layers[0]
    steered = spec.apply([0.0] * 16, layer)
    assert all(abs(s - 4.0 * v) < 1e-12 for s, v in zip(steered, vsets[-1].vectors[layer]))
    untouched = next(l for l in range(8) if l not in spec.layers)
    assert spec.apply([1.0] * 16, untouched) == [1.0] * 16

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        pos.write(d / "pos")
        back = ss.read_dump(d / "pos")
        assert back.shard(0, 0) == pos.shard(0, 0)
        spec.write(d / "spec")
        assert ss.read_intervention(d / "spec").layers == spec.layers
        svg = matrix.heatmap_svg("smoke")
        assert b"<svg" in svg[:200]
        try:
            ss.read_dump(d / "absent")
        except ss.SteerscopeError as e:
            kind, message = e.args
            assert kind == "MissingShard", kind
            print("missing dump ->", kind)
        else:
            raise AssertionError("expected SteerscopeError")

    emotion = ss.bundled_emotion_set("happiness", size=8, seed=3)
    assert len(emotion["pairs"]) == 8
    print("smoke test ok")


if __name__ == "__main__":
    main()
