"""Builds the extension module and exercises it end to end.

    python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile
import re

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "moelora-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    out = tempfile.mkdtemp()
    shutil.copy(os.path.join(ROOT, "target", "release", "libmoelora_py.so"), os.path.join(out, "moelora_py.so"))
    sys.path.insert(0, out)


def main():
    build()
    import moelora_py as m

    text = m.default_config()
    assert "warmup_ratio = 0.03" in text
    assert len(m.config_hash(text)) == 64

    assert m.experts_per_layer(2, 8, 2.0, 32, 16) == 3
    assert m.experts_per_layer(2, 8, 1.0, 32, 32) == 8

    w = m.soft_merge_weights([1.0, 2.0, 3.0], 0.5)
    assert abs(sum(w) - 1.0) < 1e-12
    top = m.topk_weights([1.0, 3.0, 3.0, 0.0], 2)
    assert top[0] == 0.0 and top[3] == 0.0 and abs(top[1] - 0.5) < 1e-15
    assert m.load_balance_loss([[0.5, 0.5]] * 4) == 0.0
    assert abs(m.load_balance_loss([[1.0, 0.0]] * 4) - 1.0) < 1e-15

    model = m.Model(text, seed=3)
    tokens = [4, 20, 21, 22, 1, 20, 21]
    soft, off = model.logits(tokens, "soft"), model.logits(tokens, "off")
    assert len(soft) == len(tokens) and len(soft[0]) == 256
    assert max(abs(a - b) for ra, rb in zip(soft, off) for a, b in zip(ra, rb)) <= 1e-12
    counts = model.count_params("topk:2")
    assert counts["active"] < counts["trainable"] == model.count_params()["trainable"]
    assert "layer1.router.tau" in model.param_names()
    assert [len(layer) for layer in model.plan()] == [2, 3, 4, 6]

    try:
        m.config_hash(text.replace("n_heads = 4", "n_heads = 5"))
    except ValueError as e:
        assert "backbone.n_heads" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    ids = set(re.findall(r'^id = "(\w+)"', text, re.M))
    small = text.replace("steps = 600", "steps = 20").replace("total_steps = 300", "total_steps = 10")
    with tempfile.TemporaryDirectory() as out:
        small = small.replace('out_dir = "runs"', f'out_dir = "{out}"')
        run = m.train(small)
        assert os.path.exists(os.path.join(run, "metrics.jsonl"))
        evals = m.run_experiment(small)
        assert set(evals) == ids and "general" in ids
        assert all(math.isfinite(v["loss"]) for v in evals.values())
    print("python smoke test passed")


if __name__ == "__main__":
    main()
