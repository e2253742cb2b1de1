"""End-to-end check of the Python extension on a small procedural corpus.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import artprompt as ap

CONFIG = """
seed = 1

[corpus]
root = "corpus"
manifest = "corpus/manifest.jsonl"

[backbone]
architecture = "resnet-mini"
embedding_dim = 32
input_edge = 32

[train.baseline]
epochs = 3
batch_size = 8
learning_rate = 1e-3

[train.siamese]
epochs = 2
batch_size = 16
pairs_per_epoch = 32
val_pairs = 16
"""


def check_formulas():
    cfg = ap.LossConfig()
    assert (cfg.alpha, cfg.beta) == (5.0, 10.0)
    assert math.isclose(cfg.loss(10.0, 1), 10 * math.exp(-2.77), rel_tol=1e-12)
    assert ap.attribution_probability(0.2) == 0.8
    assert ap.attribution_probability(1.2) is None
    assert ap.vote_count([("a", 0.1), ("b", 0.6)], 0.5) == 1


def run(*args):
    code = ap.run_cli(["--config", "run.toml", *args])
    assert code == 0, f"{args} exited with {code}"


def main():
    check_formulas()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = ap.generate_toy_corpus(tmp / "corpus", styles=3, originals=10, synthetics=10)
        report = manifest.validate(tmp / "corpus")
        assert report["violations"] == [], report["violations"]
        manifest.save(tmp / "corpus" / "manifest.jsonl")
        (tmp / "run.toml").write_text(CONFIG)
        ap.RunConfig.from_toml(CONFIG)

        import os

        os.chdir(tmp)
        run("corpus", "split")
        run("corpus", "mix", "--manifest", "runs/corpus/split.jsonl", "--quota", "8", "--seed", "7")
        run("corpus", "split", "--manifest", "runs/corpus/mixed.jsonl", "--output", "runs/corpus/mixed_split.jsonl")
        run("train", "baseline", "--manifest", "runs/corpus/split.jsonl", "--provenance", "original")
        run("train", "siamese", "--manifest", "runs/corpus/mixed_split.jsonl")

        split = ap.Manifest.load("runs/corpus/split.jsonl")
        attributor = ap.Attributor(
            "runs/train/siamese/selected.safetensors",
            split,
            "corpus",
            refs="original",
            threshold=0.5,
        )
        query = "corpus/synthetic/toy-style-b/004.png"
        result = attributor.attribute_file(query)
        assert len(result["per_artist"]) == 3
        for ev in result["per_artist"]:
            p = ev["probability"]
            assert p is None or 0.0 <= p <= 1.0
            assert p is None or math.isclose(p, 1.0 - ev["min_distance"], abs_tol=1e-12)
        same = attributor.distance(query, query)
        assert same < 1e-5, same
        print("decision:", result["decision"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
