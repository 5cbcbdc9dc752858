import math

import numpy as np
import pytest

from partfuse.embeddings import EmbeddingRecord, EmbeddingStore
from partfuse.landmarks import LandmarkSet


def face_template():
    """A frontal 68-point face on a 256x256 canvas, iBUG ordering."""
    pts = np.zeros((68, 2))
    t = np.linspace(0.0, math.pi, 17)
    pts[0:17] = np.column_stack([128 - 60 * np.cos(t), 110 + 80 * np.sin(t)])
    pts[17:22] = np.column_stack([np.linspace(80, 120, 5), [88, 84, 82, 84, 86]])
    pts[22:27] = np.column_stack([np.linspace(136, 176, 5), [86, 84, 82, 84, 88]])
    pts[27:31] = np.column_stack([[128] * 4, np.linspace(95, 125, 4)])
    pts[31:36] = np.column_stack([np.linspace(113, 143, 5), [130, 133, 135, 133, 130]])
    a = np.linspace(0, 2 * math.pi, 7)[:-1]
    pts[36:42] = np.column_stack([100 + 12 * np.cos(a), 100 + 5 * np.sin(a)])
    pts[42:48] = np.column_stack([156 + 12 * np.cos(a), 100 + 5 * np.sin(a)])
    a = np.linspace(0, 2 * math.pi, 13)[:-1]
    pts[48:60] = np.column_stack([128 + 25 * np.cos(a), 160 + 10 * np.sin(a)])
    a = np.linspace(0, 2 * math.pi, 9)[:-1]
    pts[60:68] = np.column_stack([128 + 15 * np.cos(a), 160 + 5 * np.sin(a)])
    return pts


def random_landmarks(rng, width=256, height=256, jitter=3.0, max_angle=0.3):
    """Template face with per-point jitter and a random similarity transform."""
    pts = face_template() + rng.uniform(-jitter, jitter, (68, 2))
    ang = rng.uniform(-max_angle, max_angle)
    scale = rng.uniform(0.7, 1.3)
    c, s = math.cos(ang), math.sin(ang)
    centre = np.array([128.0, 128.0])
    rot = scale * np.array([[c, -s], [s, c]])
    pts = (pts - centre) @ rot.T + centre + rng.uniform(-20, 20, 2)
    return LandmarkSet(pts, width, height, "img", "subj")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def template_landmarks():
    return LandmarkSet(face_template(), 256, 256, "img0", "s0")


def make_store(vectors, provider="p", region="holistic"):
    """vectors: {image_id: (subject_id, vector)}"""
    return EmbeddingStore(EmbeddingRecord(subj, img, region, provider, v)
                          for img, (subj, v) in vectors.items())
