import numpy as np
import pytest

from plateflow.pipeline import PipelineConfig, train_models
from plateflow.synth import oracle_detections, random_plate_spec, synth_plate


def make_scenes(n, seed, *, layout_sampling="mix", distractor_prob=0.3, spurious=1, jitter=0.5):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = random_plate_spec(rng, layout_sampling=layout_sampling, distractor_prob=distractor_prob)
        s = seed * 100_000 + i
        image, ann, plate = synth_plate(spec, s, image_id=f"s{seed}_{i:04d}")
        record = oracle_detections(ann, s, jitter=jitter, spurious_chars=spurious)
        out.append((image, ann, record))
    return out


@pytest.fixture(scope="session")
def small_models():
    """Models trained on a small balanced synthetic set; quick, not accurate."""
    scenes = make_scenes(150, 11, layout_sampling="uniform")
    cfg = PipelineConfig(flow_steps=800, seed=5)
    return train_models([(img, ann) for img, ann, _ in scenes], cfg), cfg
