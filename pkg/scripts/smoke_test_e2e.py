#!/usr/bin/env python3
"""
Smoke test for the adaptive scan pipeline end to end.
Runs synth, train, resume, eval and render on a tiny configuration in a temp directory.
"""
import os
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.file_formats import read_learning_curve, read_wem1
from main import main

TINY_CONFIG = """# smoke run
iterations = 10
batch_size = 2
hidden_size = 8
gen_channels = 4,8
gen_res_blocks = 1
replay_capacity = 16
segments = 4
samples_per_segment = 5
height = 32
width = 32
dataset = {dataset}
"""


def check(label: str, ok: bool) -> bool:
    print(f"  {'✓' if ok else '✗'} {label}")
    return ok


def run_smoke_tests() -> int:
    print("=" * 70)
    print("ADAPTIVE SCAN - SMOKE TEST (SYNTH / TRAIN / EVAL / RENDER)")
    print("=" * 70)

    results = []
    try:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            dataset = root / "synthetic.wem1"
            cfg = root / "smoke.cfg"
            out = root / "run"

            print("\nSTEP 1: Synthetic dataset")
            print("-" * 70)
            code = main(["synth", "--count", "12", "--height", "32", "--width", "32", "--seed", "3",
                         "--out", str(dataset)])
            results.append(check("synth exits 0", code == 0))
            results.append(check("12 images of 32x32", read_wem1(dataset).shape == (12, 32, 32)))
            cfg.write_text(TINY_CONFIG.format(dataset=dataset), encoding="utf-8")

            print("\nSTEP 2: Training")
            print("-" * 70)
            code = main(["train", "--config", str(cfg), "--out", str(out)])
            results.append(check("train exits 0", code == 0))
            rows = read_learning_curve(out / "learning_curve.csv")
            results.append(check(f"learning curve has {len(rows)} rows", len(rows) == 10))
            results.append(check("checkpoint written", (out / "checkpoint.asc1").exists()))

            print("\nSTEP 3: Resume")
            print("-" * 70)
            first = (out / "learning_curve.csv").read_bytes()
            checkpoint = out / "checkpoints" / "checkpoint_00000005.asc1"
            code = main(["train", "--config", str(cfg), "--out", str(out), "--checkpoint", str(checkpoint)])
            results.append(check("resume exits 0", code == 0))
            results.append(check("resumed curve matches", (out / "learning_curve.csv").read_bytes() == first))

            print("\nSTEP 4: Evaluation")
            print("-" * 70)
            for mode in ("adaptive", "spiral"):
                code = main(["eval", "--config", str(cfg), "--out", str(out), "--mode", mode])
                results.append(check(f"eval {mode} exits 0", code == 0 and (out / f"eval_{mode}.csv").exists()))

            print("\nSTEP 5: Render")
            print("-" * 70)
            code = main(["render", "--config", str(cfg), "--out", str(out), "--image-index", "0"])
            results.append(check("render exits 0", code == 0))
            for name in ("scan.pgm", "completion.pgm", "target.pgm"):
                results.append(check(f"{name} is a 32x32 PGM",
                                     (out / name).read_bytes().startswith(b"P5\n32 32\n255\n")))
    except Exception as e:
        print(f"\n✗ ERROR: {str(e)}")
        import traceback
        traceback.print_exc()
        return 1

    print("\n" + "=" * 70)
    passed = sum(results)
    print(f"{'PASS' if all(results) else 'FAIL'}: {passed}/{len(results)} checks")
    print("=" * 70)
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(run_smoke_tests())
