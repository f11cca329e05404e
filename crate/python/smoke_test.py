"""Smoke test for the modnet_py extension.

Build first:
    cargo build --release -p modnet-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libmodnet_py.so]
"""

import importlib.util
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension(explicit=None):
    candidates = [Path(explicit)] if explicit else [
        ROOT / "target" / profile / "libmodnet_py.so" for profile in ("release", "debug")
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("libmodnet_py.so not found; build the modnet-py crate first")
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "modnet_py.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("modnet_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    m = load_extension(sys.argv[1] if len(sys.argv) > 1 else None)

    assert m.corpus_bleu(["a b c d"], ["a b c d"]) == 100.0
    assert abs(m.corpus_bleu(["a b c d"], ["a b c d e"]) - 77.88) < 0.01

    plan = m.split_plan(["en", "de", "fi", "fr"])
    assert len(plan) == 6 and set(plan.values()) == {1, 2, 3}

    out = Path(tempfile.mkdtemp()) / "run"
    text = "\n".join([
        "model.kind = m2",
        "model.preset = tiny",
        "model.languages = aa bb cc",
        "synth.rows = 90",
        "synth.valid_rows = 12",
        "synth.test_rows = 12",
        "synth.concepts = 12",
        "synth.max_len = 6",
        "train.budget = 96",
        "train.max_epochs = 2",
        "train.warmup = 10",
    ])
    cfg = m.Config(text, out=str(out), seed=3)
    same = m.Config("\n".join(reversed(text.split("\n"))), out=str(out), seed=3)
    assert cfg.digest() == same.digest()
    assert cfg.kind == "m2" and cfg.languages == ["aa", "bb", "cc"]

    try:
        m.Config(text + "\nmodel.scheme = jm2m:zz")
    except ValueError as e:
        assert "zz" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    manifest = m.run(cfg)
    assert manifest["status"] == "complete"
    assert len(manifest["matrix"]) == 6
    assert all((out / a).exists() for a in manifest["artifacts"])

    model = m.Model.load(str(out / "checkpoints" / "best.ckpt"))
    assert model.kind == "m2" and len(model.directions) == 6
    hyps = model.translate("aa-bb", ["aa_0 aa_1 aa_2"], beam_size=2)
    assert len(hyps) == 1
    vec = model.encode("aa", "aa_0 aa_1")
    assert len(vec) == 32

    table = m.report([str(out)])
    assert table.splitlines()[0].split()[-1] == "m2"

    print("python smoke test passed")


if __name__ == "__main__":
    main()
