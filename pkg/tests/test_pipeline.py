import csv
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ellipse_area_fraction_mc
from topowmamba import cli, train
from topowmamba.autograd import NonFiniteError
from topowmamba.data import (DatasetError, PhantomSpec, gen_phantoms, load_manifest, load_split,
                             make_phantom, preprocess_slice, read_pgm, resize_labels,
                             split_assignment, write_pgm)
from topowmamba.network import ModelConfig
from topowmamba.optim import TrainConfig, adamw_step, cosine_lr, init_state
from topowmamba.train import (BEST_CKPT, LOG_FILE, SUMMARY_FILE, EarlyStopping, TrainingError,
                              evaluate_masks, overlay_image, read_log, run_evaluation,
                              run_prediction, run_training, write_case_csv)

SMALL_MODEL = dict(num_classes=3, stage_dims=[4, 8, 16, 32, 64], scvss_counts=[1, 1, 1, 1],
                   n_state=4, input_size=[32, 32])
SMALL_DATA = dict(n_samples=10, image_size=[32, 32], seed=3)
SMALL_TRAIN = dict(lr=2e-3, lr_min=1e-6, epochs=2, batch_size=4, patience=5, seed=0)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    gen_phantoms(PhantomSpec(**SMALL_DATA), root)
    return str(root)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = run_training(ModelConfig(**SMALL_MODEL), TrainConfig(**SMALL_TRAIN), dataset, out)
    return result, str(out)


# ---------------------------------------------------------------- phantoms

def test_phantom_generation_is_byte_identical(tmp_path):
    spec = PhantomSpec(n_samples=12, image_size=[32, 48], seed=9)
    gen_phantoms(spec, tmp_path / "a")
    gen_phantoms(spec, tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 2 * 12 + 1 and a == b
    gen_phantoms(PhantomSpec(n_samples=12, image_size=[32, 48], seed=10), tmp_path / "c")
    assert tree_bytes(tmp_path / "c") != a


def test_phantom_labels_and_foreground_fraction():
    spec = PhantomSpec(n_samples=100, image_size=[64, 64], seed=0)
    fractions = []
    for i in range(spec.n_samples):
        image, mask, _ = make_phantom(spec, i)
        assert image.shape == mask.shape == (64, 64) and np.isfinite(image).all()
        assert set(np.unique(mask)) <= {0, 1, 2}
        assert (mask == 0).any() and (mask > 0).any()
        fractions.append(float((mask > 0).mean()))
    fractions = np.array(fractions)
    mc_mean, lo, hi = ellipse_area_fraction_mc(spec, 20000, np.random.default_rng(0))
    # pixel-centre rasterization moves a single area by at most a few percent
    assert np.all(fractions >= 0.95 * lo) and np.all(fractions <= 1.05 * hi)
    sem = fractions.std(ddof=1) / math.sqrt(len(fractions))
    assert abs(fractions.mean() - mc_mean) <= 3 * sem + 0.02 * mc_mean


def test_phantom_spec_validation():
    for bad in (dict(n_samples=0), dict(num_classes=1), dict(image_size=[4, 4]),
                dict(noise_sigma=-1.0)):
        with pytest.raises((ValueError, DatasetError)):
            PhantomSpec(**bad)


def test_split_assignment_proportions():
    splits = split_assignment(200, 0)
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (140, 30, 30)
    assert split_assignment(200, 0) == splits and split_assignment(200, 1) != splits


def test_load_split_and_errors(dataset, tmp_path):
    manifest = load_manifest(dataset)
    ids, images, masks = load_split(dataset, "train", manifest)
    assert len(ids) == sum(s["split"] == "train" for s in manifest["samples"])
    assert images.dtype == np.float32 and masks.dtype == np.uint8 and images.shape == masks.shape
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)
    bad = tmp_path / "bad"
    gen_phantoms(PhantomSpec(n_samples=3, image_size=[32, 32]), bad)
    first = load_manifest(bad)["samples"][0]
    (bad / first["image"]).write_bytes(b"\x00" * 12)
    with pytest.raises(DatasetError, match="expected"):
        load_split(bad, first["split"])


# ---------------------------------------------------------------- preprocessing

def test_preprocess_fixed_point(rng):
    x = rng.random((32, 32))
    x[0, 0], x[5, 7] = 0.0, 1.0
    out = preprocess_slice(x, (32, 32))
    assert out.shape == (1, 32, 32) and out.dtype == np.float32
    assert np.abs(out[0] - x).max() <= 1e-7


def test_preprocess_constant_slice_is_zero():
    out = preprocess_slice(np.full((8, 8), 7.5), (16, 16))
    np.testing.assert_array_equal(out, np.zeros((1, 16, 16), np.float32))


def test_preprocess_window():
    hu = np.array([[-500.0, -100.0, 0.0], [100.0, 300.0, 1000.0]])
    want = (np.clip(hu, -100.0, 300.0) + 100.0) / 400.0
    np.testing.assert_allclose(preprocess_slice(hu, window=(-100, 300))[0], want, atol=1e-7)
    with pytest.raises(ValueError):
        preprocess_slice(hu, window=(300, -100))
    with pytest.raises(ValueError):
        preprocess_slice(np.array([[np.nan, 1.0]]))


def test_preprocess_resize_keeps_range(rng):
    out = preprocess_slice(rng.normal(size=(20, 28)), (32, 32))
    assert out.shape == (1, 32, 32)
    assert out.min() >= -1e-7 and out.max() <= 1 + 1e-7


def test_resize_labels_nearest():
    mask = np.arange(16, dtype=np.uint8).reshape(4, 4)
    np.testing.assert_array_equal(resize_labels(mask, (2, 2)), mask[1::2, 1::2])
    np.testing.assert_array_equal(resize_labels(mask, (8, 8)), np.repeat(np.repeat(mask, 2, 0), 2, 1))


def test_pgm_roundtrip(tmp_path, rng):
    arr = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, arr)
    np.testing.assert_array_equal(read_pgm(path), arr)
    path.write_bytes(b"P5\n# comment\n2 2\n65535\n" + np.array([1, 2, 3, 60000], ">u2").tobytes())
    np.testing.assert_array_equal(read_pgm(path), [[1, 2], [3, 60000]])
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(DatasetError):
        read_pgm(path)
    path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(DatasetError, match="truncated"):
        read_pgm(path)


# ---------------------------------------------------------------- optimizer

def test_first_adamw_step_is_signed_lr(rng):
    p = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    params = {"w": p.copy()}
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    adamw_step(params, {"w": g}, init_state(params), 1, 1e-3, cfg)
    np.testing.assert_allclose(params["w"] - p, -1e-3 * np.sign(g), rtol=1e-6)


def test_zero_gradient_without_decay_is_fixed(rng):
    p = rng.normal(size=(6,))
    params = {"w": p.copy()}
    state = init_state(params)
    cfg = TrainConfig(weight_decay=0.0)
    for t in range(1, 4):
        adamw_step(params, {"w": np.zeros(6)}, state, t, 1e-2, cfg)
    assert params["w"].tobytes() == p.tobytes()


def test_decoupled_decay_contracts(rng):
    p = rng.normal(size=(10,))
    params = {"w": p.copy()}
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    adamw_step(params, {"w": np.zeros(10)}, init_state(params), 1, 0.1, cfg)
    assert np.linalg.norm(params["w"]) == pytest.approx((1 - 0.1 * 0.5) * np.linalg.norm(p),
                                                        rel=1e-12)


@pytest.mark.parametrize("optimizer", ["adamw", "adam"])
def test_quadratic_trace(optimizer):
    k, c, lr, wd = 3.0, 0.7, 0.05, 0.1
    cfg = TrainConfig(lr=lr, weight_decay=wd, optimizer=optimizer)
    params = {"w": np.array([2.0])}
    state = init_state(params)
    p, m, v = 2.0, 0.0, 0.0
    for t in range(1, 6):
        g = k * (params["w"][0] - c)
        adamw_step(params, {"w": np.array([g])}, state, t, lr, cfg)
        if optimizer == "adam":
            g += wd * p
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        if optimizer == "adamw":
            p *= 1 - lr * wd
        p -= lr * step
        assert abs(params["w"][0] - p) <= 1e-10
    assert state["t"] == 5


def test_non_finite_gradient_aborts_without_mutation(rng):
    params = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    before = {k: v.copy() for k, v in params.items()}
    state = init_state(params)
    with pytest.raises(NonFiniteError):
        adamw_step(params, {"a": np.ones(3), "b": np.array([1.0, np.inf])}, state, 1, 1e-3,
                   TrainConfig())
    for k in params:
        assert params[k].tobytes() == before[k].tobytes()
        assert not state["m"][k].any() and not state["v"][k].any()
    assert state["t"] == 0
    with pytest.raises(ValueError):
        adamw_step(params, {"a": np.ones(3), "b": np.ones(2)}, state, 0, 1e-3, TrainConfig())


def test_train_config_validation():
    for bad in (dict(lr=1e-6, lr_min=1e-5), dict(optimizer="sgd"), dict(patience=0),
                dict(max_steps=0), dict(beta1=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 1e-3, 1e-6) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(50, 100, 1e-3, 1e-6) == pytest.approx((1e-3 + 1e-6) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3, 1e-6)


@settings(max_examples=30)
@given(total=st.integers(1, 500), lr_max=st.floats(1e-5, 1.0), frac=st.floats(0.0, 0.99))
def test_cosine_lr_is_monotone(total, lr_max, frac):
    lrs = [cosine_lr(s, total, lr_max, frac * lr_max) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert frac * lr_max - 1e-15 <= min(lrs) and max(lrs) <= lr_max


# ---------------------------------------------------------------- early stopping

def test_early_stopping_crafted_sequence():
    stop = EarlyStopping(3)
    history = []
    for val in [50.0, 60.0, 60.0, 55.0, 61.0, 40.0, 41.0, 42.0, 99.0]:
        history.append((stop.update(val), stop.should_stop))
        if stop.should_stop:
            break
    assert [h[0] for h in history] == [True, True, False, False, True, False, False, False]
    assert history[3] == (False, False)  # a tie counts as a bad epoch; two do not stop
    assert history[-1] == (False, True)
    assert stop.best == 61.0 and stop.bad_epochs == 3
    with pytest.raises(ValueError):
        EarlyStopping(0)


# ---------------------------------------------------------------- training / evaluation

def test_training_outputs(trained):
    result, out = trained
    assert sorted(os.listdir(out)) == sorted([BEST_CKPT, LOG_FILE, SUMMARY_FILE])
    records = read_log(os.path.join(out, LOG_FILE))
    steps = [r for r in records if "val" not in r]
    epochs = [r for r in records if "val" in r]
    assert [r["step"] for r in steps] == list(range(1, result.steps + 1))
    assert len(epochs) == result.epochs_run == 2
    assert all(math.isfinite(r["loss"]) for r in steps)
    lrs = [r["lr"] for r in steps]
    assert lrs[0] == 2e-3 and all(a > b for a, b in zip(lrs, lrs[1:]))
    with open(os.path.join(out, SUMMARY_FILE)) as fh:
        assert json.load(fh) == result.to_dict()


def test_training_is_deterministic(trained, dataset, tmp_path):
    _, first = trained
    run_training(ModelConfig(**SMALL_MODEL), TrainConfig(**SMALL_TRAIN), dataset, tmp_path)
    a, b = tree_bytes(tmp_path), tree_bytes(first)
    for tree, root in ((a, tmp_path), (b, first)):
        summary = json.loads(tree.pop(SUMMARY_FILE))
        assert summary.pop("best_checkpoint") == os.path.join(str(root), BEST_CKPT)
        tree[SUMMARY_FILE] = summary
    assert a == b


def test_training_rejects_mismatched_dataset(dataset, tmp_path):
    with pytest.raises(DatasetError, match="classes"):
        run_training(ModelConfig(**{**SMALL_MODEL, "num_classes": 4}), TrainConfig(**SMALL_TRAIN),
                     dataset, tmp_path)
    with pytest.raises(DatasetError, match="input_size"):
        run_training(ModelConfig(**{**SMALL_MODEL, "input_size": [64, 64]}),
                     TrainConfig(**SMALL_TRAIN), dataset, tmp_path)


def test_non_finite_step_aborts_training(dataset, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NonFiniteError("non-finite gradient for x; step aborted")

    monkeypatch.setattr(train, "adamw_step", boom)
    with pytest.raises(TrainingError, match="epoch 1 step 1"):
        run_training(ModelConfig(**SMALL_MODEL), TrainConfig(**SMALL_TRAIN), dataset, tmp_path)
    last = read_log(tmp_path / LOG_FILE)[-1]
    assert last["step"] == 1 and "non-finite" in last["error"]


def test_ground_truth_as_prediction_is_perfect(dataset):
    manifest = load_manifest(dataset)
    ids, _, masks = load_split(dataset, "test", manifest)
    mean = evaluate_masks(ids, masks, masks, 3).to_dict()["mean"]
    assert (mean["dice"], mean["hd95"], mean["iou"]) == (100.0, 0.0, 100.0)


def test_evaluation_report_and_csv(trained, dataset, tmp_path):
    result, _ = trained
    report_path = str(tmp_path / "report.json")
    report = run_evaluation(result.best_checkpoint, dataset, "test", report_path)
    blob = (tmp_path / "report.json").read_bytes()
    run_evaluation(result.best_checkpoint, dataset, "test", report_path)
    assert (tmp_path / "report.json").read_bytes() == blob
    d = json.loads(blob)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == d["n_cases"] * 2 == len(report.cases) * 2
    for entry in d["per_class"]:
        vals = [float(r["dice"]) for r in rows if int(r["class_id"]) == entry["id"]]
        assert np.mean(vals) == pytest.approx(entry["dice"], abs=1e-9)
    other = tmp_path / "elsewhere.csv"
    write_case_csv(report, other)
    assert other.read_bytes() == (tmp_path / "report.csv").read_bytes()
    with pytest.raises(DatasetError):
        run_evaluation(result.best_checkpoint, tmp_path, "test")


def test_prediction_outputs(trained, tmp_path, rng):
    result, _ = trained
    img = rng.integers(0, 256, size=(40, 50)).astype(np.uint8)
    write_pgm(tmp_path / "slice.pgm", img)
    raw = rng.random((32, 32)).astype("<f4")
    raw.tofile(tmp_path / "slice2.f32")
    inputs = [str(tmp_path / "slice.pgm"), str(tmp_path / "slice2.f32")]
    written = run_prediction(result.best_checkpoint, inputs, tmp_path / "out", overlay=True)
    assert [os.path.basename(p) for p in written] == ["slice_mask.pgm", "slice_overlay.ppm",
                                                      "slice2_mask.pgm", "slice2_overlay.ppm"]
    mask = read_pgm(written[0])
    assert mask.shape == (40, 50) and mask.max() <= 2
    assert read_pgm(written[2]).shape == (32, 32)
    first = tree_bytes(tmp_path / "out")
    run_prediction(result.best_checkpoint, inputs, tmp_path / "out", overlay=True)
    assert tree_bytes(tmp_path / "out") == first


def test_overlay_colours():
    gray = np.array([[0.0, 1.0], [0.5, 0.2]])
    labels = np.array([[0, 1], [2, 0]])
    rgb = overlay_image(gray, labels)
    assert rgb.dtype == np.uint8 and rgb.shape == (2, 2, 3)
    assert rgb[0, 0].tolist() == [0, 0, 0] and rgb[1, 1].tolist() == [51, 51, 51]
    assert rgb[0, 1].tolist() == [round(0.5 * 255 + 0.5 * 230), round(0.5 * 255 + 0.5 * 25),
                                  round(0.5 * 255 + 0.5 * 75)]


# ---------------------------------------------------------------- CLI

def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_cli_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["train"]) == cli.EXIT_USAGE
    assert cli.main(["gradcheck", "--module", "nope"]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == cli.EXIT_OK
    capsys.readouterr()


def test_cli_invalid_inputs(tmp_path, monkeypatch, capsys):
    bad = write_json(tmp_path / "bad.json", {"n_samples": 0})
    assert cli.main(["gen-data", "--spec", bad, "--out", str(tmp_path / "d")]) == cli.EXIT_INVALID
    assert cli.main(["gen-data", "--spec", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "d")]) == cli.EXIT_INVALID
    assert cli.main(["eval", "--ckpt", str(tmp_path / "no.ckpt"), "--data", str(tmp_path),
                     "--report", str(tmp_path / "r.json")]) == cli.EXIT_INVALID
    good = write_json(tmp_path / "spec.json", {"n_samples": 2, "image_size": [32, 32]})
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    assert cli.main(["gen-data", "--spec", good, "--out", str(tmp_path / "d")]) == cli.EXIT_INVALID
    assert "error:" in capsys.readouterr().err


def test_cli_seed_override(tmp_path, monkeypatch, capsys):
    spec = write_json(tmp_path / "spec.json", {"n_samples": 4, "image_size": [32, 32], "seed": 0})
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert cli.main(["gen-data", "--spec", spec, "--out", str(tmp_path / "env")]) == cli.EXIT_OK
    gen_phantoms(PhantomSpec(n_samples=4, image_size=[32, 32], seed=5), tmp_path / "direct")
    assert tree_bytes(tmp_path / "env") == tree_bytes(tmp_path / "direct")
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.main(["gen-data", "--spec", spec, "--out", str(tmp_path / "plain")]) == cli.EXIT_OK
    assert tree_bytes(tmp_path / "plain") != tree_bytes(tmp_path / "direct")
    capsys.readouterr()


def test_cli_end_to_end(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", SMALL_DATA)
    mcfg = write_json(tmp_path / "model.json", SMALL_MODEL)
    tcfg = write_json(tmp_path / "train.json", {**SMALL_TRAIN, "epochs": 1})
    data, run = str(tmp_path / "data"), str(tmp_path / "run")
    assert cli.main(["gen-data", "--spec", spec, "--out", data]) == cli.EXIT_OK
    assert cli.main(["train", "--model-config", mcfg, "--train-config", tcfg, "--data", data,
                     "--out", run]) == cli.EXIT_OK
    ckpt = os.path.join(run, BEST_CKPT)
    report = str(tmp_path / "report.json")
    assert cli.main(["eval", "--ckpt", ckpt, "--data", data, "--split", "val",
                     "--report", report]) == cli.EXIT_OK
    assert os.path.exists(report) and os.path.exists(str(tmp_path / "report.csv"))
    first = load_manifest(data)["samples"][0]["image"]
    assert cli.main(["predict", "--ckpt", ckpt, "--input", os.path.join(data, first),
                     "--out", str(tmp_path / "pred")]) == cli.EXIT_OK
    assert os.listdir(tmp_path / "pred") == [first.replace(".f32", "_mask.pgm")]
    assert "val: n=" in capsys.readouterr().out


def test_cli_gradcheck_module(capsys):
    assert cli.main(["gradcheck", "--module", "sca", "--tol", "1e-3"]) == cli.EXIT_OK
    assert "sca" in capsys.readouterr().out


def test_console_entry_points():
    for cmd in ([sys.executable, "-m", "topowmamba", "--help"], ["topowmamba", "--help"]):
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0 and "gen-data" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "topowmamba", "train"], capture_output=True,
                          text=True, timeout=120)
    assert proc.returncode == 2
