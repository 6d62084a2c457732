import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from pfcr.config import ConfigError, DataConfig, RunConfig, TrainConfig, load_config, save_config
from pfcr.harness import pipeline
from pfcr.harness.ablation import read_ablation_csv, run_ablation_suite
from pfcr.harness.checkpoint import CheckpointError, load_checkpoint, model_digest, save_checkpoint
from pfcr.harness.data import (
    Dataset,
    IdxFormatError,
    load_idx_images,
    make_synthetic,
    sample_calibration,
    write_idx,
)
from pfcr.harness.report import RunReport, read_curves_csv, write_curves_csv
from pfcr.harness.train import evaluate_top1, train_baseline
from pfcr.pos import POSConfig, run_pos
from pfcr.recon import NumericalError
from pfcr.vit import QuantTable, ViTConfig, attach_quantizers, init_model

SMALL = ViTConfig(depth=2, embed_dim=16, heads=2, patch_size=8, image_size=16, num_classes=4)


def _small_run_config(**kw) -> RunConfig:
    base = dict(
        model=SMALL,
        data=DataConfig(num_classes=4, n_train=120, n_eval=60),
        train=TrainConfig(epochs=1, batch_size=32),
        pos=POSConfig(bits=4, lr_0=1e-3, iter_0=2, batch_size=16),
        n_calib=8,
        n_recon=16,
        seeds=[0, 1],
    )
    return RunConfig(**{**base, **kw})


# data -------------------------------------------------------------------------


def test_synthetic_deterministic_and_seeded():
    a = make_synthetic(10, 50, 16, seed=3)
    b = make_synthetic(10, 50, 16, seed=3)
    c = make_synthetic(10, 50, 16, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (50, 3, 16, 16) and a.images.dtype == np.float32


def test_synthetic_class_balance():
    counts = np.bincount(make_synthetic(10, 1000, 8, seed=0).labels, minlength=10)
    assert np.all(np.abs(counts - 100) <= 20)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0, np.int64), 3)


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (10, 28, 28), dtype=np.uint8)
    labels = np.arange(10, dtype=np.uint8) % 3
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", labels)
    ds = load_idx_images(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.images.shape == (10, 1, 28, 28)
    np.testing.assert_allclose(ds.images[:, 0], imgs / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(ds.labels, labels)
    padded = load_idx_images(tmp_path / "x.idx", tmp_path / "y.idx", image_size=32)
    assert padded.images.shape == (10, 1, 32, 32)
    np.testing.assert_array_equal(padded.images[:, 0, 2:30, 2:30], ds.images[:, 0])
    shrunk = load_idx_images(tmp_path / "x.idx", image_size=16)
    assert shrunk.images.shape == (10, 1, 16, 16)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">I", 0x0801) + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx_images(p)


def test_idx_truncated_payload_reports_sizes(tmp_path):
    p = tmp_path / "short.idx"
    p.write_bytes(struct.pack(">IIII", 0x0803, 10, 28, 28) + b"\x00" * 100)
    with pytest.raises(IdxFormatError, match="expected 7856 bytes, got 116"):
        load_idx_images(p)


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "x.idx", np.zeros((4, 8, 8), np.uint8))
    write_idx(tmp_path / "y.idx", np.zeros(3, np.uint8))
    with pytest.raises(IdxFormatError, match="does not match"):
        load_idx_images(tmp_path / "x.idx", tmp_path / "y.idx")


def test_sampling_defaults_and_disjointness():
    data = make_synthetic(4, 5000, 8, seed=0)
    calib, recon = sample_calibration(data)
    assert (len(calib), len(recon)) == (64, 1024)
    small_calib, small_recon = sample_calibration(make_synthetic(4, 400, 8, seed=0))
    assert len(small_recon) == 100
    a, b = sample_calibration(data, 10, 20, seed=1)
    a2, _ = sample_calibration(data, 10, 20, seed=1)
    np.testing.assert_array_equal(a.images, a2.images)
    flat = lambda d: {x.tobytes() for x in d.images}
    assert not flat(a) & flat(b)


def test_sampling_rejects_oversized_request():
    with pytest.raises(ValueError):
        sample_calibration(make_synthetic(4, 30, 8, seed=0), 20, 20)


# evaluation and training --------------------------------------------------------


def _constant_model(c: int):
    m = init_model(SMALL, seed=0)
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = 0
    m.params["head.b"].data[c] = 1.0
    return m


def test_top1_constant_class():
    data = make_synthetic(4, 40, 16, seed=0)
    data = Dataset(data.images, np.full(40, 2), 4)
    assert evaluate_top1(_constant_model(2), data) == 1.0


def test_top1_ties_go_to_lowest_index():
    m = init_model(SMALL, seed=0)
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = 0
    data = make_synthetic(4, 40, 16, seed=0)
    assert evaluate_top1(m, data) == pytest.approx(np.mean(data.labels == 0))


@pytest.mark.parametrize("factor", [0.01, 3.0, 1e4])
def test_top1_invariant_to_logit_rescaling(factor):
    m = init_model(SMALL, seed=1)
    data = make_synthetic(4, 60, 16, seed=0)
    base = evaluate_top1(m, data)
    for k in ("head.w", "head.b"):
        m.params[k].data = m.params[k].data * np.float32(factor)
    assert evaluate_top1(m, data) == base


def test_random_model_is_near_chance():
    cfg = ViTConfig(depth=2, embed_dim=16, heads=2, patch_size=8, image_size=16, num_classes=10)
    model, acc = train_baseline(cfg, make_synthetic(10, 20, 16, 0), make_synthetic(10, 1000, 16, 1), epochs=0)
    assert abs(acc - 0.10) <= 0.05


def test_baseline_training_is_deterministic_and_learns():
    train, ev = make_synthetic(4, 256, 16, 0, noise=0.05), make_synthetic(4, 100, 16, 1, noise=0.05)
    m1, a1 = train_baseline(SMALL, train, ev, epochs=2, seed=0)
    m2, a2 = train_baseline(SMALL, train, ev, epochs=2, seed=0)
    assert a1 == a2 and model_digest(m1) == model_digest(m2)
    assert a1 > 0.4


def test_baseline_training_reports_divergence():
    train = make_synthetic(4, 64, 16, 0)
    train.images[:] = np.nan
    with pytest.raises(NumericalError):
        train_baseline(SMALL, train, make_synthetic(4, 10, 16, 1), epochs=1)


# checkpoints and reports ---------------------------------------------------------


def _quantized_small():
    m = init_model(SMALL, seed=0)
    attach_quantizers(m, QuantTable(3, 3), make_synthetic(4, 8, 16, 0).images)
    m.weight_quant_enabled = m.act_quant_enabled = True
    return m


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = _quantized_small()
    path = save_checkpoint(m, tmp_path / "ckpt")
    assert path.name == "ckpt.manifest.json" and (tmp_path / "ckpt.weights.bin").exists()
    back = load_checkpoint(tmp_path / "ckpt")
    for k, t in m.params.items():
        np.testing.assert_array_equal(back.params[k].data, t.data)
    for k, q in m.quantizers.items():
        np.testing.assert_array_equal(back.quantizers[k].scale.data, q.scale.data)
        assert back.quantizers[k].spec == q.spec
        if q.params.zero_point is not None:
            np.testing.assert_array_equal(back.quantizers[k].params.zero_point, q.params.zero_point)
    assert back.weight_quant_enabled and back.act_quant_enabled
    assert model_digest(back) == model_digest(m)


def test_manifest_lists_quantizer_state(tmp_path):
    m = _quantized_small()
    manifest = json.loads(save_checkpoint(m, tmp_path / "c").read_text())
    entries = {q["name"]: q for q in manifest["quantizers"]}
    assert set(entries) == set(m.quantizers)
    for q in entries.values():
        assert {"scale", "zero_point", "bits"} <= set(q)
    assert entries["blocks.0.attn.probs"]["zero_point"] is None
    offsets = [t["offset"] for t in manifest["tensors"]]
    assert offsets == sorted(offsets)


def test_corrupted_blob_fails_checksum(tmp_path):
    save_checkpoint(_quantized_small(), tmp_path / "c")
    blob = bytearray((tmp_path / "c.weights.bin").read_bytes())
    blob[17] ^= 0xFF
    (tmp_path / "c.weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c")


def test_bad_magic_and_version(tmp_path):
    path = save_checkpoint(init_model(SMALL), tmp_path / "c")
    manifest = json.loads(path.read_text())
    path.write_text(json.dumps({**manifest, "version": 99}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_text(json.dumps({**manifest, "magic": "nope"}))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_report_and_curves_round_trip(tmp_path):
    fp = init_model(SMALL, seed=0)
    imgs = make_synthetic(4, 16, 16, 0).images
    res = run_pos(fp, imgs[:8], imgs[8:], POSConfig(bits=4, lr_0=1e-3, iter_0=2, batch_size=8))
    report = RunReport(config={"a": 1}, seed=3, baseline_accuracy=0.5, quantized_accuracy=0.25,
                       stages=res.stages, block_losses=[0.1, 0.2])
    report.save(tmp_path / "report.json")
    back = RunReport.load(tmp_path / "report.json")
    assert back.to_dict() == report.to_dict()
    write_curves_csv(report, tmp_path / "curves.csv")
    rows = read_curves_csv(tmp_path / "curves.csv")
    assert rows == [tuple(r[:4]) + (float(r[4]),) for r in report.curve_rows()]
    assert rows[-1] == ("eval", 1, 1, 0, 0.2)


def test_config_round_trip_and_errors(tmp_path):
    cfg = _small_run_config()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text(json.dumps({"pos": {"bitz": 3}}))
    with pytest.raises(ConfigError, match="bitz"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "arms.json").write_text(json.dumps({"arms": ["magic"]}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "arms.json")
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")


# ablation ----------------------------------------------------------------------


def test_arm_configs_differ_only_in_plan_flags():
    cfg = _small_run_config()
    a = pipeline.arm_pos_config(cfg, "pfcr_pos", 0).to_dict()
    b = pipeline.arm_pos_config(cfg, "blockwise", 0).to_dict()
    assert {k for k in a if a[k] != b[k]} == {"granularity", "stage1_enabled"}


@pytest.fixture(scope="module")
def small_baseline():
    cfg = _small_run_config()
    train, ev = pipeline.load_datasets(cfg.data, SMALL.image_size, SMALL.in_chans)
    return pipeline.obtain_baseline(cfg, train, ev)


def test_ablation_rows_and_outputs(tmp_path, small_baseline):
    cfg = _small_run_config(arms=["blockwise", "pfcr_pos", "fp_baseline"])
    result = run_ablation_suite(cfg, out_dir=tmp_path, baseline=small_baseline)
    assert len(result.rows) == 3 * 2 and len(result.summary) == 3
    rows = read_ablation_csv(tmp_path / "ablation.csv")
    assert len(rows) == 3 * 2 + 3
    assert [r["seed"] for r in rows[-3:]] == ["median"] * 3
    assert (tmp_path / "pfcr_pos" / "seed_1" / "curves.csv").exists()
    reports = [RunReport.load(tmp_path / a / "seed_0" / "report.json") for a in ("blockwise", "pfcr_pos")]
    assert reports[0].baseline_digest == reports[1].baseline_digest == result.baseline_digest
    assert result.median("fp_baseline") == small_baseline[1]


def test_ablation_emits_partial_results_on_failure(tmp_path, small_baseline, monkeypatch):
    real = pipeline.run_pos

    def flaky(model, calib, recon, cfg, points=None):
        if cfg.granularity == "blockwise" and cfg.seed == 1:
            raise NumericalError("injected", stage="stage2")
        return real(model, calib, recon, cfg, points)

    monkeypatch.setattr(pipeline, "run_pos", flaky)
    cfg = _small_run_config(arms=["blockwise", "pfcr_only"])
    result = run_ablation_suite(cfg, out_dir=tmp_path, baseline=small_baseline)
    status = {(r.arm, r.seed): r.status for r in result.rows}
    assert status[("blockwise", 1)] == "numerical:stage2"
    assert status[("pfcr_only", 1)] == "ok"
    assert [s.status for s in result.summary] == ["partial:1/2", "ok"]
    assert RunReport.load(tmp_path / "blockwise" / "seed_1" / "report.json").failed_stage == "stage2"


def test_ablation_parallel_matches_serial(tmp_path, small_baseline):
    cfg = _small_run_config(arms=["blockwise", "pfcr_pos"], seeds=[0])
    serial = run_ablation_suite(cfg, baseline=small_baseline)
    parallel = run_ablation_suite(cfg, jobs=2, baseline=small_baseline)
    assert [r.top1 for r in serial.rows] == [r.top1 for r in parallel.rows]
    assert [r.last_block_loss for r in serial.rows] == [r.last_block_loss for r in parallel.rows]


def test_ablation_rejects_unknown_arm(small_baseline):
    with pytest.raises(ValueError):
        run_ablation_suite(_small_run_config(), arms=["nope"], baseline=small_baseline)


def test_missing_baseline_checkpoint_is_config_error(tmp_path):
    cfg = replace(_small_run_config(), baseline_checkpoint=str(tmp_path / "nothing"))
    with pytest.raises(ConfigError, match="nothing"):
        pipeline.obtain_baseline(cfg, None, None)
