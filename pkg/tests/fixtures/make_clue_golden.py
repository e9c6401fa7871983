"""Regenerate the gen-clues golden files from the staged oracle.

Run from the repository root: ``python -m tests.fixtures.make_clue_golden``.
The scene is the low-resolution synthetic scene, rendered without noise;
target frame 7 accumulates frames 4-7.
"""

from pathlib import Path

import numpy as np

from occlues.clues import FilterConfig
from occlues.formats import encode_occupancy_mask, encode_voxel_labels
from occlues.synthetic import render_frames, small_scene
from occlues.voxel import LabelGrid

from ..oracles import staged_clues

HERE = Path(__file__).parent / "golden"
FRAMES = [4, 5, 6, 7]
TARGET = 7
# the filter the synthetic dataset writer puts in config.json
FILTER = FilterConfig(radius=0.4, min_neighbors=5, sor_k=16, sor_alpha=4.0)


def golden_grid() -> LabelGrid:
    scene = small_scene()
    frames = render_frames(scene, indices=FRAMES)
    labels = staged_clues(frames, scene.frame_pose(TARGET), scene.grid, FILTER, 1)
    return LabelGrid(scene.grid, labels)


if __name__ == "__main__":
    HERE.mkdir(exist_ok=True)
    grid = golden_grid()
    (HERE / "000007.label").write_bytes(encode_voxel_labels(grid))
    (HERE / "000007.occ").write_bytes(encode_occupancy_mask(grid.labels != 0))
    print("occupied voxels:", int(np.count_nonzero(grid.labels)))
