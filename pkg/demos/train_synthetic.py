"""
Training on a synthetic multispectral set
=========================================

Runs the whole command-line workflow in-process: generate data, train three
seeds, summarise them, then dump the first-stage graph of one sample. The
same steps work from a shell with the ``vig-landcover`` command.

Usage::

    python3 demos/train_synthetic.py [work_dir]
"""

import sys
import tempfile
from pathlib import Path

from vig_landcover.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="vig_demo_"))

###############################################################################
# 8 classes x 16 samples of 3x32x32 images. The manifest header records the
# shape, so the run config only needs the model width and the training knobs.
main(["synth", "--classes", "8", "--per-class", "16", "--c", "3", "--hw", "32", "--out", str(work / "data")])

(work / "run.cfg").write_text(f"""\
[model]
stage_dims = 32, 64, 128
stage_depths = 1, 1, 2
heads = 4
k = 4

[train]
max_epochs = 15
batch_size = 16

[data]
manifest = {work / "data" / "manifest.txt"}
""")

###############################################################################
# One directory per seed; each holds checkpoint, history, metrics and the
# resolved config.
runs = [work / f"seed{s}" for s in (1, 2, 3)]
for seed, out in zip((1, 2, 3), runs):
    main(["train", str(work / "run.cfg"), "--seed", str(seed), "--out", str(out)])
print((runs[0] / "history.txt").read_text())

main(["train", "--aggregate", *map(str, runs)])

###############################################################################
# Test-split report for the first seed, then its stage-1 edge list.
main(["evaluate", str(runs[0] / "checkpoint.vigt"), str(work / "data" / "manifest.txt")])
edges = work / "edges.txt"
main(["inspect-graph", str(runs[0] / "checkpoint.vigt"), str(work / "data" / "samples" / "00000.vigt"),
      "--stage", "1", "--out", str(edges)])
print(f"{len(edges.read_text().splitlines())} edges written to {edges}")
