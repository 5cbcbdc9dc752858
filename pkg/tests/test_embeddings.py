import itertools
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partfuse import embeddings as E
from partfuse.errors import DataError


def csv_rows(rows, dim):
    head = ",".join(E.EMBEDDING_HEADER + [f"v{i}" for i in range(dim)])
    body = [",".join([s, i, r, p, str(d)] + [repr(float(x)) for x in v]) for s, i, r, p, d, v in rows]
    return (head + "\n" + "\n".join(body) + "\n").encode()


@pytest.fixture
def spec128():
    return E.ProviderSpec("facenet", 128)


def rec(image, vec, region="holistic", provider="p", subject=None):
    return E.EmbeddingRecord(subject or image.split("_")[0], image, region, provider, vec)


# ---------------------------------------------------------------- import

def test_import_ten_rows(spec128):
    rng = np.random.default_rng(0)
    rows = [(f"s{i}", f"s{i}_b", "holistic", "facenet", 128, rng.standard_normal(128)) for i in range(10)]
    store = E.import_embeddings(csv_rows(rows, 128), spec128)
    assert len(store) == 10
    np.testing.assert_array_equal(store.get("s3_b", "holistic", "facenet").vector, rows[3][5])


def test_import_dimension_mismatch(spec128):
    rows = [("s0", "i0", "holistic", "facenet", 128, np.ones(127))]
    with pytest.raises(DataError) as exc:
        E.import_embeddings(csv_rows(rows, 128), spec128)
    assert exc.value.kind == "dimension-mismatch"


def test_import_duplicate_key(spec128):
    rows = [("s0", "i0", "nose", "facenet", 128, np.ones(128))] * 2
    with pytest.raises(DataError) as exc:
        E.import_embeddings(csv_rows(rows, 128), spec128)
    assert exc.value.kind == "duplicate-key"


def test_import_non_finite(spec128):
    v = np.ones(128)
    v[5] = np.inf
    with pytest.raises(DataError) as exc:
        E.import_embeddings(csv_rows([("s0", "i0", "nose", "facenet", 128, v)], 128), spec128)
    assert exc.value.kind == "non-finite-component"


def test_import_zero_vector_rejected():
    with pytest.raises(DataError):
        E.import_embeddings(csv_rows([("s0", "i0", "nose", "p", 3, np.zeros(3))], 3))


def test_import_unknown_region():
    with pytest.raises(DataError) as exc:
        E.import_embeddings(csv_rows([("s0", "i0", "ear", "p", 3, np.ones(3))], 3))
    assert exc.value.kind == "unknown-region"


def test_import_provider_mismatch(spec128):
    with pytest.raises(DataError) as exc:
        E.import_embeddings(csv_rows([("s0", "i0", "nose", "vgg", 128, np.ones(128))], 128), spec128)
    assert exc.value.kind == "provider-mismatch"


def test_import_bad_header():
    with pytest.raises(DataError):
        E.import_embeddings(b"image_id,region\n")


def test_subject_conflict():
    with pytest.raises(DataError) as exc:
        E.EmbeddingStore([rec("i0", [1, 0], subject="a"), rec("i0", [1, 0], region="nose", subject="b")])
    assert exc.value.kind == "subject-conflict"


def test_store_round_trip_mixed_dims():
    rng = np.random.default_rng(3)
    store = E.EmbeddingStore([rec("a_1", rng.standard_normal(4), provider="p4"),
                              rec("a_1", rng.standard_normal(7), provider="p7"),
                              rec("b_1", rng.standard_normal(4), region="nose", provider="p4")])
    again = E.import_embeddings(E.format_embeddings(store))
    assert len(again) == 3
    assert again.providers == {"p4": 4, "p7": 7}
    for r in store:
        np.testing.assert_array_equal(again.get(*r.key).vector, r.vector)


def test_import_extends_existing_store():
    base = E.EmbeddingStore([rec("a_1", [1.0, 2.0])])
    more = E.import_embeddings(csv_rows([("b", "b_1", "holistic", "p", 2, np.ones(2))], 2),
                               E.ProviderSpec("p", 2), base)
    assert len(more) == 2 and len(base) == 1


# ---------------------------------------------------------------- cosine

def test_cosine_identical():
    v = [0.3, -1.2, 4.0]
    assert E.cosine_score(rec("a", v), rec("b", v)) == pytest.approx(1.0, abs=1e-15)


def test_cosine_orthogonal():
    assert E.cosine_score(rec("a", [1, 0]), rec("b", [0, 1])) == 0.0


def test_cosine_hand_computed():
    # (1,2,2).(2,1,2) = 8, both norms 3
    assert E.cosine_score(rec("a", [1, 2, 2]), rec("b", [2, 1, 2])) == pytest.approx(8 / 9, abs=1e-15)


def test_cosine_mismatches():
    with pytest.raises(DataError) as exc:
        E.cosine_score(rec("a", [1, 0]), rec("b", [1, 0], region="nose"))
    assert exc.value.kind == "region-mismatch"
    with pytest.raises(DataError) as exc:
        E.cosine_score(rec("a", [1, 0]), rec("b", [1, 0], provider="q"))
    assert exc.value.kind == "provider-mismatch"


vectors = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@settings(max_examples=200, deadline=None)
@given(a=vectors, b=vectors, lam=st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, lam):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    ra, rb = rec("x", a), rec("y", b)
    s = E.cosine_score(ra, rb)
    assert s == E.cosine_score(rb, ra)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert E.cosine_score(rec("x", lam * a), rb) == pytest.approx(s, abs=1e-12)


# ---------------------------------------------------------------- trials

def test_trial_self_pair_rejected():
    with pytest.raises(DataError):
        E.TrialPair("a", "a", "genuine")


def test_trials_round_trip():
    trials = [E.TrialPair("a", "b", "genuine"), E.TrialPair("a", "c", "impostor")]
    assert E.read_trials(E.format_trials(trials)) == trials


def test_read_trials_bad_label():
    with pytest.raises(DataError):
        E.read_trials("image_a,image_b,label\na,b,maybe\n")


REGIONS5 = ("holistic", "left_periocular", "right_periocular", "nose", "mouth")


@pytest.fixture
def five_region_store():
    rng = np.random.default_rng(7)
    recs = [E.EmbeddingRecord(img[0], img, r, "p", rng.standard_normal(5))
            for img in ("A1", "A2", "B1") for r in REGIONS5]
    return E.EmbeddingStore(recs)


def test_score_single_region(five_region_store):
    out = E.score_trials(five_region_store, [E.TrialPair("A1", "A2", "genuine")], ["holistic"], "p")
    assert out.scores.shape == (1, 1)
    assert len(out[0].scores) == 1


def test_score_missing_image(five_region_store):
    with pytest.raises(DataError) as exc:
        E.score_trials(five_region_store, [E.TrialPair("A1", "Z9", "impostor")], ["holistic"], "p")
    assert exc.value.kind == "missing-embedding" and "Z9" in str(exc.value)


def test_score_missing_region(five_region_store):
    with pytest.raises(DataError) as exc:
        E.score_trials(five_region_store, [E.TrialPair("A1", "B1", "impostor")], ["third_upper"], "p")
    assert exc.value.kind == "missing-embedding"


def test_score_label_checked(five_region_store):
    with pytest.raises(DataError) as exc:
        E.score_trials(five_region_store, [E.TrialPair("A1", "B1", "genuine")], ["holistic"], "p")
    assert exc.value.kind == "label-mismatch"


def test_score_matrix_matches_pairwise_oracle(five_region_store):
    trials = [E.TrialPair("A1", "A2", "genuine"), E.TrialPair("A2", "B1", "impostor")]
    out = E.score_trials(five_region_store, trials, REGIONS5, "p")
    assert out.scores.shape == (2, 5)
    assert out.regions == REGIONS5
    for i, t in enumerate(trials):
        for j, r in enumerate(REGIONS5):
            a = five_region_store.get(t.image_a, r, "p").vector
            b = five_region_store.get(t.image_b, r, "p").vector
            expected = sum(x * y for x, y in zip(a, b)) / (
                sum(x * x for x in a) ** 0.5 * sum(y * y for y in b) ** 0.5)
            assert out.scores[i, j] == pytest.approx(expected, abs=1e-12)


def test_score_provider_map_per_region():
    rng = np.random.default_rng(2)
    recs = [E.EmbeddingRecord(img[0], img, r, p, rng.standard_normal(4 if p == "p" else 6))
            for img in ("A1", "A2") for r in ("holistic", "nose") for p in ("p", "q")]
    store = E.EmbeddingStore(recs)
    out = E.score_trials(store, [E.TrialPair("A1", "A2", "genuine")], ["holistic", "nose"],
                         {"holistic": "p", "nose": "q"})
    expect = E.cosine_score(store.get("A1", "nose", "q"), store.get("A2", "nose", "q"))
    assert out.scores[0, 1] == pytest.approx(expect, abs=1e-12)
    with pytest.raises(DataError):
        E.score_trials(store, [E.TrialPair("A1", "A2", "genuine")], ["holistic", "nose"], {"holistic": "p"})


def test_score_invariant_to_insertion_order_and_threads():
    rng = np.random.default_rng(5)
    recs = [E.EmbeddingRecord(f"s{i}", f"s{i}_{k}", "holistic", "p", rng.standard_normal(8))
            for i in range(6) for k in range(2)]
    trials = [E.TrialPair(a.image_id, b.image_id, "genuine" if a.subject_id == b.subject_id else "impostor")
              for a, b in itertools.combinations(recs, 2)]
    ref = E.score_trials(E.EmbeddingStore(recs), trials, ["holistic"], "p", threads=1).scores
    shuffled = [recs[i] for i in rng.permutation(len(recs))]
    out = E.score_trials(E.EmbeddingStore(shuffled), trials, ["holistic"], "p", threads=4, chunk=7).scores
    np.testing.assert_array_equal(out, ref)


def test_scores_csv_round_trip(five_region_store):
    trials = [E.TrialPair("A1", "A2", "genuine"), E.TrialPair("A2", "B1", "impostor")]
    out = E.score_trials(five_region_store, trials, REGIONS5, "p")
    again = E.read_scores(E.format_scores(out))
    assert again.regions == out.regions and again.labels == out.labels
    np.testing.assert_array_equal(again.scores, out.scores)


def test_trialscores_sequence_view(five_region_store):
    trials = [E.TrialPair("A1", "A2", "genuine"), E.TrialPair("A2", "B1", "impostor")]
    table = E.score_trials(five_region_store, trials, REGIONS5, "p")
    rebuilt = E.TrialScores.from_vectors(list(table))
    np.testing.assert_array_equal(rebuilt.scores, table.scores)
    assert [v.label for v in table] == ["genuine", "impostor"]


# ---------------------------------------------------------------- provider subprocess

@pytest.fixture
def fake_provider(tmp_path):
    script = tmp_path / "provider.py"
    script.write_text(textwrap.dedent("""
        import sys
        from PIL import Image
        import numpy as np
        args = dict(zip(sys.argv[1::2], sys.argv[2::2]))
        if args["--region"] == "mouth":
            sys.exit(4)
        img = np.asarray(Image.open(args["--in"]), dtype=float)
        print(3, img.mean(), img.shape[0], 1.0 if img.ndim == 2 else 3.0)
    """))
    return f"{sys.executable} {script}"


def test_provider_subprocess(tmp_path, fake_provider):
    from PIL import Image
    crop = tmp_path / "c.png"
    Image.fromarray(np.full((40, 40, 3), 100, dtype=np.uint8)).save(crop)
    vec = E.run_provider(fake_provider, crop, "nose")
    np.testing.assert_allclose(vec, [100.0, 40.0, 3.0])
    with pytest.raises(DataError) as exc:
        E.run_provider(fake_provider, crop, "mouth")
    assert exc.value.kind == "provider-failure"

    spec = E.ProviderSpec("lightcnn", 3, channel_mode="grayscale", input_side=16)
    store = E.embed_crops([("s", "img", "nose", crop)], fake_provider, spec)
    v = store.get("img", "nose", "lightcnn").vector
    assert v[1] == 16.0 and v[2] == 1.0   # resized, single channel
