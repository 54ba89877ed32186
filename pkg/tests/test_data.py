import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrlt.data import (
    AnnotationState,
    DatasetTable,
    SampleRecord,
    format_manifest,
    load_image,
    merge_datasets,
    mix_synthetic,
    parse_manifest,
    patient_split,
)
from cxrlt.errors import (
    ImageLoadError,
    IncompatibleError,
    ManifestRowError,
    SchemaError,
    SplitError,
    ValidationError,
)
from cxrlt.labels import build_registry
from cxrlt.presets import mimic_registry

from conftest import make_table, write_text

POS, NEG, UNK = AnnotationState.POSITIVE, AnnotationState.NEGATIVE, AnnotationState.UNKNOWN


def test_parse_direct_mapping(tmp_path, small_registry):
    m = write_text(tmp_path / "m.csv", "image_path,patient_id,view,Edema,Mass\na.png,p1,PA,1,\n")
    table = parse_manifest(m, small_registry, "A")
    (rec,) = table.records
    reg = small_registry
    assert rec.annotations[reg.index("Edema")] == POS
    assert rec.annotations[reg.index("Mass")] == UNK
    # covered by A but absent from the header, and not covered by A at all
    assert rec.annotations[reg.index("Nodule")] == UNK
    assert rec.annotations[reg.index("Hernia")] == UNK
    assert rec.image_path == tmp_path / "a.png"


def test_uncertain_minus_one_round_trip(tmp_path, small_registry):
    text = (
        "image_path,patient_id,view,Edema,Mass,Nodule\n"
        "a.png,p1,PA,1,-1,0\n"
        "b.png,p1,AP,-1,1,\n"
        "c.png,p2,,0,0,-1.0\n"
    )
    table = parse_manifest(write_text(tmp_path / "m.csv", text), small_registry, "A")
    mat = table.annotation_matrix()[:, :3]
    np.testing.assert_array_equal(mat, [[1, -1, 0], [-1, 1, -1], [0, 0, -1]])
    canonical = (
        "image_path,patient_id,view,Edema,Mass,Nodule\n"
        "a.png,p1,PA,1,,0\n"
        "b.png,p1,AP,,1,\n"
        "c.png,p2,,0,0,\n"
    )
    assert format_manifest(table, small_registry) == canonical
    again = parse_manifest(write_text(tmp_path / "c.csv", canonical), small_registry, "A")
    np.testing.assert_array_equal(again.annotation_matrix(), table.annotation_matrix())


def test_canonical_manifest_is_fixed_point(tmp_path, small_registry):
    canonical = "image_path,patient_id,view,Edema,Mass,Nodule\nx.png,p9,LAT,0,1,\n"
    table = parse_manifest(write_text(tmp_path / "m.csv", canonical), small_registry, "A")
    assert format_manifest(table, small_registry) == canonical


def test_column_order_normalized(tmp_path, small_registry):
    text = "image_path,patient_id,view,nodule, MASS ,Edema\nx.png,p9,PA, 1 ,0,\n"
    table = parse_manifest(write_text(tmp_path / "m.csv", text), small_registry, "A")
    assert format_manifest(table, small_registry) == "image_path,patient_id,view,Edema,Mass,Nodule\nx.png,p9,PA,,0,1\n"


def test_chexpert_subset_leaves_twelve_unknown(tmp_path):
    reg = mimic_registry()
    from cxrlt.presets import CHEXPERT_LABELS

    header = "image_path,patient_id,view," + ",".join(CHEXPERT_LABELS)
    rows = [f"i{k}.png,p{k},PA," + ",".join("1" if (k + j) % 2 else "0" for j in range(14)) for k in range(5)]
    table = parse_manifest(write_text(tmp_path / "cx.csv", "\n".join([header, *rows]) + "\n"), reg, "chexpert")
    unknown = (table.annotation_matrix() == UNK).sum(axis=1)
    assert np.all(unknown >= 12)


@pytest.mark.parametrize(
    "text, error",
    [
        ("image_path,patient_id,view,Bogus\na.png,p,PA,1\n", SchemaError),
        ("image_path,patient_id,view,Hernia\na.png,p,PA,1\n", SchemaError),  # not covered by A
        ("image_path,patient_id,view,Edema\na.png,,PA,1\n", SchemaError),
        ("image_path,patient_id,view,Edema\na.png,p,PA,1\nb.png,p,PA,yes\n", ManifestRowError),
        ("image_path,patient_id,view,Edema\na.png,p,PA\n", ManifestRowError),
        ("path,patient,view,Edema\n", SchemaError),
    ],
)
def test_parse_errors(tmp_path, small_registry, text, error):
    with pytest.raises(error):
        parse_manifest(write_text(tmp_path / "m.csv", text), small_registry, "A")


def test_row_error_carries_row_number(tmp_path, small_registry):
    text = "image_path,patient_id,view,Edema\na.png,p,PA,1\nb.png,p,PA,2\n"
    with pytest.raises(ManifestRowError) as info:
        parse_manifest(write_text(tmp_path / "m.csv", text), small_registry, "A")
    assert info.value.row == 3


def test_synthetic_ids(tmp_path, small_registry):
    text = "image_path,patient_id,view,Nodule\ns0.png,,,1\ns1.png,,,1\n"
    table = parse_manifest(write_text(tmp_path / "s.csv", text), small_registry, "A", synthetic=True)
    assert [r.patient_id for r in table.records] == ["synthetic:0", "synthetic:1"]
    assert all(r.synthetic for r in table.records)
    assert format_manifest(table, small_registry).splitlines()[1] == "s0.png,,,,,1"


@given(st.lists(st.integers(-1, 1), min_size=3, max_size=3), st.lists(st.sampled_from(["1", "0", "", "-1"]), min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_parse_never_invents_known_states(tmp_path_factory, _unused, cells):
    reg = build_registry([("A", ["a", "b", "c"]), ("B", ["d"])])
    path = write_text(tmp_path_factory.mktemp("m") / "m.csv", "image_path,patient_id,view,a,b,c\nx.png,p,PA," + ",".join(cells) + "\n")
    ann = parse_manifest(path, reg, "A").records[0].annotations
    for j, cell in enumerate(cells):
        if cell in ("", "-1"):
            assert ann[j] == UNK
    assert ann[3] == UNK


def test_split_exact_division(small_registry):
    table = make_table(small_registry, 10, [1] * 10, np.random.default_rng(0))
    s = patient_split(table, [("train", 0.9), ("val", 0.1)], seed=3)
    assert len(s.splits["train"]) == 9 and len(s.splits["val"]) == 1


def _patients(table, indices):
    return {table.records[i].patient_id for i in indices}


def test_split_three_way_disjoint(small_registry):
    rng = np.random.default_rng(1)
    table = make_table(small_registry, 40, rng.integers(1, 4, size=40), rng)
    s = patient_split(table, [("train", 0.8), ("val", 0.1), ("test", 0.1)], seed=0)
    groups = [_patients(table, v) for v in s.splits.values()]
    assert all(not (a & b) for i, a in enumerate(groups) for b in groups[i + 1:])
    assert sum(len(v) for v in s.splits.values()) == len(table)


def test_split_determinism(small_registry):
    rng = np.random.default_rng(2)
    table = make_table(small_registry, 30, rng.integers(1, 5, size=30), rng)
    a = patient_split(table, {"train": 0.9, "val": 0.1}, seed=11)
    b = patient_split(table, {"train": 0.9, "val": 0.1}, seed=11)
    assert a == b


def test_split_errors(small_registry):
    table = make_table(small_registry, 2, [1, 1], np.random.default_rng(0))
    with pytest.raises(SplitError):
        patient_split(table, [("a", 0.5), ("b", 0.3), ("c", 0.2)], seed=0)
    with pytest.raises(SplitError):
        patient_split(table, [("a", 0.5), ("b", 0.6)], seed=0)
    with pytest.raises(SplitError):
        patient_split(table, [("a", 1.0), ("b", 0.0)], seed=0)


@given(
    st.integers(2, 60),
    st.integers(0, 2**31 - 1),
    st.sampled_from([(0.9, 0.1), (0.8, 0.1, 0.1), (0.5, 0.5)]),
)
@settings(max_examples=80, deadline=None)
def test_split_patient_atomicity(n, seed, fractions):
    reg = build_registry([("A", ["x"])])
    rng = np.random.default_rng(seed)
    if n < len(fractions):
        return
    table = make_table(reg, n, rng.integers(1, 5, size=n), rng)
    s = patient_split(table, [(f"s{k}", f) for k, f in enumerate(fractions)], seed)
    seen = {}
    for name, idx in s.splits.items():
        for i in idx:
            assert seen.setdefault(table.records[i].patient_id, name) == name
    assert sorted(i for v in s.splits.values() for i in v) == list(range(len(table)))


def test_synthetic_records_go_to_train(small_registry):
    rng = np.random.default_rng(0)
    table = make_table(small_registry, 10, [1] * 10, rng)
    syn = SampleRecord("s.png", "synthetic:0", "A", np.zeros(len(small_registry), np.int8), synthetic=True)
    table = DatasetTable(table.records + (syn,), table.registry_ref, table.labels)
    s = patient_split(table, [("train", 0.5), ("val", 0.5)], seed=0)
    assert 10 in s.splits["train"]


def test_merge(small_registry):
    rng = np.random.default_rng(5)
    a = make_table(small_registry, 3, [1, 1, 1], rng)
    b = make_table(small_registry, 5, [1] * 5, rng, dataset="B")
    merged = merge_datasets([a, b])
    assert len(merged) == 8
    assert merge_datasets([a]) == a
    # unknown pattern of each record is preserved
    for rec, src in zip(merged.records, a.records + b.records):
        np.testing.assert_array_equal(rec.annotations == UNK, src.annotations == UNK)
        assert rec.dataset == src.dataset
    other = build_registry([("Z", ["q"])])
    c = make_table(other, 1, [1], rng)
    with pytest.raises(IncompatibleError):
        merge_datasets([a, c])


def _synthetic(reg, positives, n):
    records = []
    for k in range(n):
        ann = np.full(len(reg), UNK, np.int8)
        for label in positives:
            ann[reg.index(label)] = POS
        records.append(SampleRecord(f"s{k}.png", f"synthetic:{k}", "A", ann, synthetic=True))
    return DatasetTable(tuple(records), reg.fingerprint, reg.labels)


def test_mix_synthetic_counts(small_registry):
    real = make_table(small_registry, 100, [1] * 100, np.random.default_rng(0))
    tail = {small_registry.index("Nodule")}
    mixed = mix_synthetic(real, _synthetic(small_registry, ["Nodule"], 10), tail)
    assert len(mixed) == 110
    assert sum(r.synthetic for r in mixed.records) == 10


def test_mix_synthetic_rejects_head_only(small_registry):
    real = make_table(small_registry, 5, [1] * 5, np.random.default_rng(0))
    syn = _synthetic(small_registry, ["Edema"], 3)
    with pytest.raises(ValidationError) as info:
        mix_synthetic(real, syn, {small_registry.index("Nodule")})
    assert info.value.rows == [0, 1, 2]


def _png(path, arr, mode="L"):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_load_image_replicates_and_resizes(tmp_path):
    rng = np.random.default_rng(0)
    _png(tmp_path / "big.png", rng.integers(0, 256, (1024, 1024), dtype=np.uint8))
    out = load_image(str(tmp_path / "big.png"), 448)
    assert out.shape == (3, 448, 448) and out.dtype == np.float32
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_load_image_same_size_is_identity(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, (448, 448), dtype=np.uint8)
    _png(tmp_path / "a.png", arr)
    out = load_image(str(tmp_path / "a.png"), 448, mean=0.0, std=1.0)
    np.testing.assert_array_equal(out[0], arr.astype(np.float32) / 255.0)


def test_load_image_constant_stays_constant(tmp_path):
    _png(tmp_path / "c.png", np.full((300, 200), 128, np.uint8))
    out = load_image(str(tmp_path / "c.png"), 64)
    assert np.ptp(out) == 0
    assert out[0, 0, 0] == pytest.approx((128 / 255 - 0.5) / 0.25, abs=1e-6)


def test_load_image_rgb_and_16bit(tmp_path):
    rgb = np.zeros((10, 10, 3), np.uint8)
    rgb[..., 1] = 255
    _png(tmp_path / "rgb.png", rgb, mode="RGB")
    out = load_image(str(tmp_path / "rgb.png"), 10, mean=0.0, std=1.0)
    assert out.shape == (3, 10, 10)
    Image.fromarray(np.full((8, 8), 65535, np.uint16)).save(tmp_path / "w16.png")
    out16 = load_image(str(tmp_path / "w16.png"), 8, mean=0.0, std=1.0)
    np.testing.assert_allclose(out16, 1.0)


def test_load_image_errors(tmp_path):
    write_text(tmp_path / "bad.png", "not an image")
    rec = SampleRecord("bad.png", "p", "A", np.zeros(1, np.int8), root=str(tmp_path))
    with pytest.raises(ImageLoadError) as info:
        load_image(rec, 32)
    assert info.value.image_ref == "bad.png"
    with pytest.raises(ImageLoadError):
        load_image(str(tmp_path / "missing.png"), 32)
