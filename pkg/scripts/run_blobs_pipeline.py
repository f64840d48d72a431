"""End-to-end demo on synthetic blobs: train a teacher, evolve an 80%-sparse
student, quantize it to 8 bits, pack, restore, and report.

    python scripts/run_blobs_pipeline.py --workdir out
"""

import argparse
import json
import sys
from pathlib import Path

from devolve import evolution, nn, sparsity
from devolve.cli import main as devolve


def build_config(workdir: Path) -> Path:
    cfg = {
        "master_seed": 99,
        "model": {
            "architecture": {"input_shape": [784], "layers": [
                {"kind": "dense", "units": 128},
                {"kind": "leaky_relu", "slope": 0.1},
                {"kind": "dense", "units": 10},
                {"kind": "softmax"},
            ]},
            "path": str(workdir / "teacher.devn"),
        },
        "data": {
            "synthetic": {"kind": "blobs", "n": 4096, "classes": 10,
                          "seed": 7, "feature_dim": 784, "separation": 10.0},
            "probe": {"size": 1024, "seed": 11},
        },
        "train": {"epochs": 8, "lr": 0.2, "batch_size": 64},
        "de": {"trials_per_cycle": 120, "step_fraction": 0.05,
               "target_sparsity": 0.8, "retrain_epochs": 20,
               "retrain_lr": 1.5, "scope": [0]},
        "quantization": {"scheme": "uniform_affine", "bits": 8,
                         "rounding": "stochastic"},
        "eval": {"model": str(workdir / "restored.devn"),
                 "teacher": str(workdir / "teacher.devn")},
        "output": {
            "model": str(workdir / "teacher.devn"),
            "student": str(workdir / "student.devn"),
            "mask": str(workdir / "mask.devm"),
            "history": str(workdir / "history.csv"),
            "quantized": str(workdir / "quantized.devn"),
            "luts": str(workdir / "luts.json"),
            "packed": str(workdir / "model.devp"),
            "restored": str(workdir / "restored.devn"),
        },
    }
    path = workdir / "run.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def survivor_histogram(workdir: Path):
    student = nn.load_network(str(workdir / "student.devn"))
    mask = sparsity.load_mask(str(workdir / "mask.devm"))
    counts, edges = evolution.weight_histogram(student, bins=41, mask=mask,
                                               layer=0)
    peak = counts.argmax()
    print(f"\nsurviving-weight histogram (layer 0, 41 bins):")
    print(f"  mode bin [{edges[peak]:+.4f}, {edges[peak + 1]:+.4f}] "
          f"holds {counts[peak]} of {counts.sum()} weights "
          f"({'contains 0' if edges[peak] <= 0.0 <= edges[peak + 1] else 'off zero'})")
    scale = 60.0 / counts.max()
    for i in range(0, len(counts), 4):
        bar = "#" * int(round(counts[i] * scale))
        print(f"  {edges[i]:+.3f} {bar}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="out/blobs_pipeline")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config = build_config(workdir)

    for command in ("train", "sparsify", "quantize", "pack", "unpack",
                    "eval", "report"):
        print(f"\n=== devolve {command} ===")
        code = devolve([command, "--config", str(config),
                        "--workers", str(args.workers)])
        if code != 0:
            return code
    survivor_histogram(workdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
