import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from safetensors.torch import load_file

from cxrlt.data import DatasetTable, SampleRecord, load_image
from cxrlt.errors import (
    CheckpointLoadError,
    ConfigError,
    ContractError,
    ImageLoadError,
    IncompatibleError,
    TrainingDivergedError,
)
from cxrlt.labels import build_registry
from cxrlt.models import ModelSpec, build_model
from cxrlt.training import (
    PARAMS_FILE,
    Checkpoint,
    GeneralistInit,
    RandomInit,
    StageConfig,
    history_csv,
    init_from,
    lr_at,
    masked_bce,
    parse_init,
    predict,
    read_history,
    run_stage,
    save_generalist,
    state_of,
)

TOY = ModelSpec("toy_cnn", 3, image_size=16, width=4)


def test_masked_bce_ln2():
    loss = masked_bce(torch.zeros(1, 3), torch.tensor([[1, 0, -1]]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-7)
    assert round(loss.item(), 6) == 0.693147


def test_masked_bce_all_unknown():
    logits = torch.randn(3, 4, requires_grad=True)
    loss = masked_bce(logits, torch.full((3, 4), -1))
    loss.backward()
    assert loss.item() == 0.0
    assert torch.equal(logits.grad, torch.zeros(3, 4))


def test_masked_bce_shape_mismatch():
    with pytest.raises(ContractError):
        masked_bce(torch.zeros(2, 3), torch.zeros(3, 2, dtype=torch.long))


def test_masked_bce_matches_manual_mean():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 7))
    a = rng.integers(-1, 2, size=(5, 7))
    known = a >= 0
    p = 1 / (1 + np.exp(-z))
    manual = -(a * np.log(p) + (1 - a) * np.log(1 - p))[known].mean()
    out = masked_bce(torch.tensor(z), torch.tensor(a)).item()
    assert out == pytest.approx(manual, rel=1e-12)


def _fd_check(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 6, generator=g, dtype=torch.float64, requires_grad=True)
    a = torch.randint(-1, 2, (4, 6), generator=g)
    masked_bce(z, a).backward()
    h = 1e-4
    fd = torch.zeros_like(z)
    with torch.no_grad():
        for i in range(4):
            for j in range(6):
                zp, zm = z.clone(), z.clone()
                zp[i, j] += h
                zm[i, j] -= h
                fd[i, j] = (masked_bce(zp, a) - masked_bce(zm, a)) / (2 * h)
    return z.grad, fd, a


@pytest.mark.parametrize("seed", range(5))
def test_masked_bce_gradient_finite_differences(seed):
    grad, fd, a = _fd_check(seed)
    denom = torch.clamp(fd.abs(), min=1e-12)
    assert torch.all(((grad - fd).abs() / denom)[a >= 0] <= 1e-5)
    assert torch.all(grad[a < 0] == 0)


@given(st.integers(0, 2**31 - 1), st.floats(-1e6, 1e6, allow_nan=False))
@settings(max_examples=100, deadline=None)
def test_masked_bce_unknown_perturbation_bit_exact(seed, delta):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 6, generator=g)
    a = torch.randint(-1, 2, (4, 6), generator=g)
    base = masked_bce(z, a)
    perturbed = z.clone()
    perturbed[a < 0] += delta
    assert torch.equal(masked_bce(perturbed, a), base)


@pytest.mark.parametrize("epoch, lr", [(0, 1e-4), (4, 1e-4), (5, 5e-5), (10, 2.5e-5), (12, 2.5e-5), (15, 1.25e-5), (19, 1.25e-5)])
def test_lr_schedule(epoch, lr):
    assert lr_at(StageConfig("finetune"), epoch) == lr


def test_lr_schedule_paper_stage_has_four_levels():
    stage = StageConfig("finetune")
    assert stage.epochs == 20
    assert len({lr_at(stage, e) for e in range(stage.epochs)}) == 4
    with pytest.raises(ContractError):
        lr_at(stage, 20)
    with pytest.raises(ContractError):
        lr_at(stage, -1)


@given(st.integers(1, 40), st.integers(1, 10), st.floats(0.05, 0.95))
def test_lr_monotone_and_piecewise_constant(epochs, every, factor):
    stage = StageConfig("s", epochs=epochs, decay_every=every, decay_factor=factor)
    lrs = [lr_at(stage, e) for e in range(epochs)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for e in range(epochs):
        assert lrs[e] == lrs[(e // every) * every]


@pytest.mark.parametrize(
    "kwargs",
    [dict(epochs=0), dict(batch_size=0), dict(base_lr=0.0), dict(decay_every=0), dict(decay_factor=1.0)],
)
def test_stage_config_validation(kwargs):
    with pytest.raises(ConfigError):
        StageConfig("s", **kwargs)


def test_random_init_deterministic():
    a = init_from(RandomInit(7), TOY).state_dict()
    b = init_from(RandomInit(7), TOY).state_dict()
    c = init_from(RandomInit(8), TOY).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_generalist_init_reports_head(tmp_path):
    donor = init_from(RandomInit(1), TOY)
    path = save_generalist(donor, tmp_path / "g.safetensors")
    model = init_from(GeneralistInit(str(path), seed=2), TOY)
    assert set(model.init_report.missing) == {"head.weight", "head.bias"}
    assert model.init_report.unexpected == ()
    own, src = model.state_dict(), donor.state_dict()
    for k in own:
        if k.startswith("backbone."):
            assert torch.equal(own[k], src[k])
    assert torch.count_nonzero(model.head.bias) == 0
    bound = 1 / math.sqrt(model.head.weight.shape[1])
    assert model.head.weight.abs().max() <= bound
    assert model.provenance_root == (f"generalist:{path}",)


def test_generalist_with_foreign_head_is_ignored(tmp_path):
    from safetensors.torch import save_file

    donor = init_from(RandomInit(1), TOY)
    state = {k[len("backbone."):]: v for k, v in donor.state_dict().items() if k.startswith("backbone.")}
    state["head.weight"] = torch.zeros(1000, 16)
    save_file(state, str(tmp_path / "g.safetensors"))
    model = init_from(str(tmp_path / "g.safetensors"), TOY)
    assert set(model.init_report.missing) == {"head.weight", "head.bias"}


def test_shape_mismatch_names_parameter(tmp_path):
    donor = init_from(RandomInit(1), ModelSpec("toy_cnn", 3, 16, width=8))
    path = save_generalist(donor, tmp_path / "g.safetensors")
    with pytest.raises(CheckpointLoadError, match=r"parameter .backbone\.features\.0\."):
        init_from(GeneralistInit(str(path)), TOY)


def test_checkpoint_load_save_identity(tmp_path):
    model = init_from(RandomInit(3), TOY)
    ckpt = Checkpoint(state_of(model), ("random(seed=3)", "pretrain"), 4, 0.5, 3, TOY, ("a", "b", "c"))
    first = ckpt.save(tmp_path / "one")
    loaded = Checkpoint.load(first)
    assert loaded.provenance == ckpt.provenance and loaded.model_spec == TOY
    again = init_from(loaded, TOY)
    second = Checkpoint(state_of(again), loaded.provenance, 4, 0.5, 3, TOY, loaded.labels).save(tmp_path / "two")
    assert (first / PARAMS_FILE).read_bytes() == (second / PARAMS_FILE).read_bytes()
    assert again.provenance_root == ("random(seed=3)", "pretrain")


def test_checkpoint_errors(tmp_path):
    model = init_from(RandomInit(3), TOY)
    ckpt = Checkpoint(state_of(model), ("r",), 0, None, 0, TOY)
    with pytest.raises(IncompatibleError):
        init_from(ckpt, ModelSpec("toy_cnn", 4, 16, 4))
    partial = Checkpoint({k: v for k, v in ckpt.params.items() if k != "head.bias"}, ("r",), 0, None, 0, TOY)
    with pytest.raises(CheckpointLoadError):
        init_from(partial, TOY)
    with pytest.raises(CheckpointLoadError):
        Checkpoint.load(tmp_path / "nothing")


def test_parse_init(tmp_path):
    assert parse_init("random") == RandomInit(0)
    assert parse_init("random:5") == RandomInit(5)
    assert parse_init("generalist:/x/y.safetensors") == GeneralistInit("/x/y.safetensors")
    assert parse_init("w.safetensors") == GeneralistInit("w.safetensors")
    with pytest.raises(ConfigError):
        parse_init("whatever")


# ---- tiny image tables ---------------------------------------------------


def image_table(tmp_path, n, side=16, labels=("a", "b", "c"), known=True, seed=0):
    """Images whose brightness in the left half encodes label 'a'."""
    reg = build_registry([("A", list(labels))])
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        ann = rng.integers(0, 2, len(labels)).astype(np.int8) if known else np.full(len(labels), -1, np.int8)
        img = rng.integers(0, 60, (side, side)).astype(np.uint8)
        if ann[0] == 1:
            img[:, : side // 2] += 150
        Image.fromarray(img).save(tmp_path / f"{i}.png")
        records.append(SampleRecord(f"{i}.png", f"p{i}", "A", ann, root=str(tmp_path)))
    return DatasetTable(tuple(records), reg.fingerprint, reg.labels)


def test_zero_known_table_leaves_parameters_unchanged(tmp_path):
    table = image_table(tmp_path, 12, known=False)
    model = init_from(RandomInit(0), TOY)
    before = state_of(model)
    stage = StageConfig("s", epochs=3, batch_size=4, base_lr=1e-2)
    ckpt, history = run_stage(stage, model, table, provenance=model.provenance_root)
    assert [h.train_loss for h in history] == [0.0, 0.0, 0.0]
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert ckpt.provenance == ("random(seed=0)", "s")
    assert ckpt.val_map is None and ckpt.epoch == 2


def test_training_reduces_loss_and_selects_best(tmp_path):
    table = image_table(tmp_path, 48)
    model = init_from(RandomInit(0), TOY)
    stage = StageConfig("s", epochs=5, batch_size=8, base_lr=1e-2, decay_every=2)
    ckpt, history = run_stage(stage, model, table, table)
    assert history[-1].train_loss < history[0].train_loss
    maps = [h.val_map for h in history]
    assert ckpt.epoch == int(np.argmax(maps)) and ckpt.val_map == max(maps)
    assert [h.lr for h in history] == [1e-2, 1e-2, 5e-3, 5e-3, 2.5e-3]


def test_training_is_deterministic(tmp_path):
    table = image_table(tmp_path, 24)
    stage = StageConfig("s", epochs=2, batch_size=8, base_lr=1e-2, seed=5)
    runs = []
    for _ in range(2):
        model = init_from(RandomInit(0), TOY)
        ckpt, history = run_stage(stage, model, table, table)
        runs.append((ckpt, history))
    assert runs[0][1] == runs[1][1]
    assert all(torch.equal(runs[0][0].params[k], runs[1][0].params[k]) for k in runs[0][0].params)


def test_divergence_saves_postmortem(tmp_path):
    table = image_table(tmp_path, 8)
    model = init_from(RandomInit(0), TOY)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    stage = StageConfig("s", epochs=1, batch_size=4)
    with pytest.raises(TrainingDivergedError) as info:
        run_stage(stage, model, table, postmortem_dir=tmp_path / "pm")
    assert info.value.postmortem == tmp_path / "pm"
    assert (tmp_path / "pm" / PARAMS_FILE).exists()


def test_history_round_trip(tmp_path):
    table = image_table(tmp_path, 8)
    model = init_from(RandomInit(0), TOY)
    _, history = run_stage(StageConfig("s", epochs=2, batch_size=4), model, table, table)
    path = tmp_path / "h.csv"
    path.write_text(history_csv(history), encoding="utf-8")
    assert read_history(path) == history
    assert path.read_text(encoding="utf-8").startswith("epoch,train_loss,val_map,lr\n")


def test_predict_zero_head_gives_half(tmp_path):
    table = image_table(tmp_path, 5)
    model = init_from(RandomInit(0), TOY)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    scores = predict(model, table)
    assert np.all(scores.values == 0.5)
    assert scores.image_refs == tuple(f"A/{i}.png" for i in range(5))


def test_predict_deterministic_and_in_range(tmp_path):
    table = image_table(tmp_path, 6)
    model = init_from(RandomInit(4), TOY)
    a, b = predict(model, table), predict(model, table)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all((a.values > 0) & (a.values < 1))


def test_predict_linear_recomputation(tmp_path):
    spec = ModelSpec("linear", 3, image_size=4)
    table = image_table(tmp_path, 3, side=4)
    model = init_from(RandomInit(9), spec)
    with torch.no_grad():
        model.head.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
    scores = predict(model, table)
    w = model.head.weight.detach().double().numpy()
    b = model.head.bias.detach().double().numpy()
    for i, rec in enumerate(table.records):
        x = load_image(rec, 4).astype(np.float64).ravel()
        expected = 1 / (1 + np.exp(-(w @ x + b)))
        np.testing.assert_allclose(scores.values[i], expected, rtol=1e-6)


def test_predict_names_bad_record(tmp_path):
    table = image_table(tmp_path, 3)
    (tmp_path / "1.png").write_bytes(b"garbage")
    model = init_from(RandomInit(0), TOY)
    with pytest.raises(ImageLoadError) as info:
        predict(model, table)
    assert info.value.image_ref == "1.png"


def test_output_width_matches_registry():
    for n in (1, 26):
        model = build_model(ModelSpec("toy_cnn", n, 16, 4))
        assert model(torch.zeros(2, 3, 16, 16)).shape == (2, n)


def test_generalist_file_has_bare_names(tmp_path):
    path = save_generalist(init_from(RandomInit(0), TOY), tmp_path / "g.safetensors")
    assert all(not k.startswith(("backbone.", "head.")) for k in load_file(str(path)))
