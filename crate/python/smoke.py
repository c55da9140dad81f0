"""Train the toy configuration for a few epochs and evaluate it through the extension."""

import sys
import tempfile
from pathlib import Path

import gtrans_py as g


def main() -> int:
    assert abs(g.auroc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) - 0.75) < 1e-12
    mask = [[0, 0], [0, 1]]
    assert g.aupro([[[0.0, 0.0], [0.0, 1.0]]], [mask], 0.3) == 1.0
    assert "[score]" in g.resolve_config("toy")

    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp) / "run"
        p = g.Pipeline.train(str(run), "toy", ["training.epochs=3"])
        lambdas = p.calibrate_lambda()
        metrics = p.evaluate(str(Path(tmp) / "eval"))
        print("lambdas", [round(v, 4) for v in lambdas])
        print({k: metrics[k] for k in ("category", "image_auroc", "pixel_auroc", "aupro", "n_images")})
        assert metrics["n_images"] == 20
    print("smoke ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
