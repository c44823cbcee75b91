import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_trajectories(num_points=3, num_frames=5, width=64, height=64, seed=0,
                      category="tissue"):
    from surgmotion.data import TrackedPoint, TrajectorySet

    rng = np.random.default_rng(seed)
    points = []
    for i in range(num_points):
        positions, visibility = [], []
        for f in range(num_frames):
            r = rng.random()
            if r < 0.15:
                positions.append(None)
                visibility.append("out_of_view")
            elif r < 0.3:
                positions.append((float(rng.uniform(0, width)), float(rng.uniform(0, height))))
                visibility.append("occluded")
            else:
                positions.append((float(rng.uniform(0, width)), float(rng.uniform(0, height))))
                visibility.append("visible")
        points.append(TrackedPoint(id=i, category=category, positions=positions,
                                   visibility=visibility))
    return TrajectorySet(video="test", width=width, height=height,
                         num_frames=num_frames, points=points)
