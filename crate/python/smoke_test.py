"""Smoke test for the Python bindings on a small corpus and a short run."""

import json
import tempfile
from pathlib import Path

import defect_fewshot as df

SMALL = json.dumps(
    {
        "corpus": {"counts": [8, 8, 8, 8, 4, 4], "image_size": [64, 64]},
        "base": {"episodes": 3},
        "finetune": {"episodes": 2},
        "embeddings_per_class": 2,
    }
)


def main():
    cfg = json.loads(df.default_config())
    assert cfg["base"]["s"] == 5 and cfg["base"]["q"] == 2

    corpus = df.Corpus.generate(SMALL)
    again = df.Corpus.generate(SMALL)
    assert corpus.manifest_hash() == again.manifest_hash()
    assert len(corpus) == 40 * 4
    rarities = [r for _, _, r in corpus.classes()]
    assert rarities.count("common") == 4 and rarities.count("rare") == 2
    base, full, held_out = corpus.split()
    assert set(full).isdisjoint(held_out)

    trainer = df.Trainer(SMALL)
    rows = trainer.train_base(corpus)
    assert [r[0] for r in rows] == [0, 1, 2]
    assert all(abs(loss - (loc + cla)) < 1e-4 for _, loss, loc, cla in rows)
    assert trainer.phase == "base" and trainer.episode == 3

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "base.ckpt"
        trainer.save(str(ckpt))
        restored = df.Trainer.load(str(ckpt), SMALL)
        assert restored.episode == 3

        model, ft_rows = trainer.finetune(corpus)
        assert len(ft_rows) == 2
        assert model.classes() == [0, 1, 2, 3, 4, 5]
        path = Path(tmp) / "deployed.model"
        model.save(str(path))
        loaded = df.DeployedModel.load(str(path), SMALL)
        assert loaded.fingerprint() == model.fingerprint()

    for cls, score, x1, y1, x2, y2 in model.detect(corpus, held_out[0]):
        assert 0.0 < score <= 1.0 and x1 < x2 and y1 < y2

    report = json.loads(model.evaluate(corpus))
    assert [r["rarity"] for r in report["rows"]] == ["common"] * 4 + ["rare"] * 2
    embeddings = model.export_embeddings(corpus)
    assert sum(1 for r in embeddings if r[1]) == 7
    assert all(len(r[4]) == 512 for r in embeddings)

    assert df.ap_paper(0.8, 0.6) == 0.7
    assert df.precision(0, 0) == 0.0 and df.recall(0, 0) == 0.0
    assert df.match_detections([(0, 0, 10, 10, 0.9), (0, 0, 10, 10, 0.8)], [(0, 0, 10, 10)]) == (1, 1, 0)
    assert abs(df.iou((0, 0, 10, 10), (5, 0, 15, 10)) - 1 / 3) < 1e-12

    try:
        df.Corpus.generate('{"bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
