import numpy as np
import pytest

from partfuse.errors import DataError
from partfuse.protocols import run_single_dataset_eer
from partfuse.synth import ScenarioSpec, generate, parse_scenario, scenario_s1, scenario_s2
from partfuse.embeddings import score_trials
from partfuse.protocols import build_trials
from partfuse.metrics import ScoreSet, eer


def region_eer(manifest, store, region):
    t = score_trials(store, build_trials(manifest), [region], "synth")
    return eer(ScoreSet.from_labels(t.column(region), t.genuine_mask))[0]


def test_noiseless_genuine_cosine_one():
    m, store = generate(ScenarioSpec(6, 5, {"holistic": 0.0}, {"holistic": 0.0}, 1))
    t = score_trials(store, build_trials(m), ["holistic"], "synth")
    np.testing.assert_allclose(t.column("holistic")[t.genuine_mask], 1.0, atol=1e-12)
    assert region_eer(m, store, "holistic") == 0.0


def test_huge_holistic_shift_loses_to_clean_nose():
    spec = ScenarioSpec(40, 16, {"holistic": 1.0, "nose": 1.0}, {"holistic": 50.0, "nose": 0.0}, 4)
    m, store = generate(spec)
    assert region_eer(m, store, "nose") < region_eer(m, store, "holistic")


def test_bitwise_deterministic():
    a = generate(scenario_s1(3, n_subjects=10, dim=8))
    b = generate(scenario_s1(3, n_subjects=10, dim=8))
    assert a[0].entries == b[0].entries
    for ra, rb in zip(a[1], b[1]):
        assert ra.key == rb.key and ra.vector.tobytes() == rb.vector.tobytes()


def test_holistic_eer_monotone_in_shift():
    grid = [0.0, 0.5, 1.0, 1.5, 2.0]
    inversions = 0
    for seed in range(10):
        errs = []
        for delta in grid:
            m, store = generate(ScenarioSpec(200, 64, {"holistic": 1.0}, {"holistic": delta}, seed))
            errs.append(region_eer(m, store, "holistic"))
        inversions += sum(b < a for a, b in zip(errs, errs[1:]))
    assert inversions <= 1


def test_scenarios_cover_all_regions():
    assert len(scenario_s1(0).regions) == 8
    assert scenario_s2(0).makeup_shift["holistic"] == scenario_s2(0).makeup_shift["nose"]


@pytest.mark.parametrize("kwargs", [dict(n_subjects=1), dict(dim=1), dict(seed=-1),
                                    dict(region_noise={"holistic": -1.0}),
                                    dict(region_noise={"ear": 1.0}),
                                    dict(makeup_shift={"nose": float("inf")})])
def test_spec_validation(kwargs):
    base = dict(n_subjects=4, dim=4, region_noise={"holistic": 1.0}, makeup_shift={}, seed=0)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ScenarioSpec(**base)


def test_parse_scenario():
    spec = parse_scenario("""
# a small scenario
n_subjects = 12
dim = 8
seed = 5
dataset_id = "toy"

[region_noise]
holistic = 1.0
nose = 0.5

[makeup_shift]
holistic = 2
""")
    assert spec.n_subjects == 12 and spec.seed == 5 and spec.dataset_id == "toy"
    assert spec.region_noise == {"holistic": 1.0, "nose": 0.5}
    assert spec.makeup_shift == {"holistic": 2.0}
    assert spec.regions == ("holistic", "nose")
    with pytest.raises(DataError):
        parse_scenario("dim = 8\n")


def test_s1_small_fusion_helps():
    m, store = generate(scenario_s1(0))
    hol = run_single_dataset_eer(m, store, scenario_s1(0).regions, "synth", fusion=False).eer
    fused = run_single_dataset_eer(m, store, scenario_s1(0).regions, "synth", fusion=True).eer
    assert fused < hol
