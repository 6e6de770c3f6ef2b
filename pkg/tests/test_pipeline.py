import json
import math

import numpy as np
import pytest
import torch

from lltext.container import CheckpointVersionError
from lltext.data import DatasetManifest, ManifestEntry
from lltext.domain import load_image, save_image
from lltext.pipeline import (TrainConfig, enhance_command, evaluate_command,
                             load_checkpoint, psnr, save_checkpoint, train)
from lltext.region import PooledLumaProvider, build_region_scorer


class TestPsnr:
    def test_identical_capped(self, rng):
        img = rng.random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_ones_vs_zeros(self):
        assert psnr(np.ones((4, 4, 3)), np.zeros((4, 4, 3))) == 0.0

    def test_quarter_mse(self):
        pred = np.full((4, 4, 3), 0.5)
        target = np.full((4, 4, 3), 0.0)
        assert psnr(pred, target) == pytest.approx(10 * math.log10(4), abs=1e-9)

    def test_uniform_offset(self):
        base = np.full((8, 8, 3), 0.4)
        assert psnr(base + 0.1, base) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def toy_config(**overrides):
    base = dict(
        epochs=2,
        learning_rate=1e-3,
        decayed_learning_rate=1e-4,
        decay_epoch=1,
        crop=32,
        seed=0,
        enhancer_widths=(4, 8, 12, 16),
        enhancer_bottleneck=24,
        edge_width=4,
        edge_pretrain_steps=10,
        ms_ssim_scales=1,
        checkpoint_interval=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_manifest(tmp_path, rng):
    entries = []
    for i in range(3):
        gt = rng.random((32, 32, 3)).astype(np.float32)
        low = (gt * 0.08).astype(np.float32)
        save_image(low, tmp_path / f"s{i}_low.png")
        save_image(gt, tmp_path / f"s{i}_gt.png")
        entries.append(ManifestEntry(id=f"s{i}", low=f"s{i}_low.png",
                                     gt=f"s{i}_gt.png"))
    manifest = DatasetManifest(entries=entries, root=tmp_path)
    manifest.save(tmp_path / "manifest.json")
    return tmp_path / "manifest.json"


class TestTrainConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = toy_config(text_loss=False)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        loaded = TrainConfig.from_json(path)
        assert loaded == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict({"epochz": 3})

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(crop=100)


class TestTrainLoop:
    def test_loss_mostly_descends(self, tiny_manifest, rng):
        config = toy_config(epochs=17, augment=False)
        result = train(config, tiny_manifest, PooledLumaProvider())
        totals = [entry["total"] for entry in result.log]
        assert len(totals) == 17 * 3
        increases = sum(1 for a, b in zip(totals, totals[1:]) if b > a)
        assert increases < 50
        assert totals[-1] < totals[0]

    def test_l1_only_breakdown(self, tiny_manifest):
        config = toy_config(epochs=1, ms_ssim=False, text_loss=False)
        result = train(config, tiny_manifest, PooledLumaProvider())
        for entry in result.log:
            assert entry["ms_ssim"] == 0.0
            assert entry["text"] == 0.0
            assert entry["total"] == pytest.approx(0.85 * entry["l1"], abs=1e-9)

    def test_learning_rate_schedule(self, tiny_manifest):
        config = toy_config(epochs=4, decay_epoch=2)
        result = train(config, tiny_manifest, PooledLumaProvider())
        for entry in result.log:
            expected = 1e-3 if entry["epoch"] < 2 else 1e-4
            assert entry["lr"] == expected

    def test_frozen_modules_untouched(self, tiny_manifest):
        detector = build_region_scorer(seed=3)
        det_before = {k: v.clone() for k, v in detector.state_dict().items()}
        config = toy_config(epochs=2)
        result = train(config, tiny_manifest, detector)
        for k, v in detector.state_dict().items():
            assert torch.equal(v, det_before[k])
        edge_after = {k: v.clone()
                      for k, v in result.edge_net.state_dict().items()}
        result2 = train(config, tiny_manifest, detector,
                        edge_net=result.edge_net)
        for k, v in result2.edge_net.state_dict().items():
            assert torch.equal(v, edge_after[k])

    def test_empty_split_rejected(self, tiny_manifest):
        with pytest.raises(ValueError, match="empty"):
            train(toy_config(), tiny_manifest, PooledLumaProvider(),
                  split="missing")

    def test_nan_loss_aborts_with_sample_id(self, tiny_manifest):
        def nan_detector(images):
            h, w = images.shape[-2:]
            return torch.full((images.shape[0], 1, h // 2, w // 2),
                              float("nan")) * images[:, :1, ::2, ::2]

        with pytest.raises(RuntimeError, match="non-finite loss.*s[0-2]"):
            train(toy_config(epochs=1), tiny_manifest, nan_detector)

    def test_attention_toggle_changes_training(self, tiny_manifest):
        on = train(toy_config(epochs=1), tiny_manifest, PooledLumaProvider())
        off = train(toy_config(epochs=1, attention=False), tiny_manifest,
                    PooledLumaProvider())
        assert on.log[0]["total"] != off.log[0]["total"]

    def test_edge_toggle_off_skips_pretraining(self, tiny_manifest):
        result = train(toy_config(epochs=1, edge=False), tiny_manifest,
                       PooledLumaProvider())
        assert result.edge_net is None
        assert len(result.log) == 3

    def test_batched_steps(self, tiny_manifest):
        result = train(toy_config(epochs=2, batch_size=2), tiny_manifest,
                       PooledLumaProvider())
        # 3 samples in chunks of 2 -> 2 steps per epoch
        assert len(result.log) == 4
        assert len(result.log[0]["ids"]) == 2
        assert len(result.log[1]["ids"]) == 1


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tiny_manifest, tmp_path):
        config = toy_config(epochs=1)
        result = train(config, tiny_manifest, PooledLumaProvider(),
                       out_dir=tmp_path / "run")
        p1 = result.checkpoint_path
        state = load_checkpoint(p1)
        p2 = tmp_path / "resaved.ckpt"
        optimizer = torch.optim.Adam(state["enhancer"].parameters())
        from lltext.pipeline import _restore_optimizer
        _restore_optimizer(optimizer, state["enhancer"], state["adam"])
        save_checkpoint(p2, state["enhancer"], state["edge_net"], optimizer,
                        state["epoch"], state["config"], state["rng_state"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_gate(self, tiny_manifest, tmp_path):
        config = toy_config(epochs=1)
        result = train(config, tiny_manifest, PooledLumaProvider(),
                       out_dir=tmp_path / "run")
        raw = bytearray(result.checkpoint_path.read_bytes())
        # bump format_version inside the JSON header
        idx = raw.find(b'"format_version":1')
        raw[idx:idx + len(b'"format_version":1')] = b'"format_version":9'
        bad = tmp_path / "future.ckpt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError, match="version"):
            load_checkpoint(bad)

    def test_resume_reproduces_uninterrupted_losses(self, tiny_manifest,
                                                    tmp_path):
        detector = PooledLumaProvider()
        full_cfg = toy_config(epochs=8, checkpoint_interval=4)
        full = train(full_cfg, tiny_manifest, detector,
                     out_dir=tmp_path / "full")
        mid_ckpt = tmp_path / "full" / "ckpt_epoch000004.ckpt"
        assert mid_ckpt.exists()
        resumed = train(full_cfg, tiny_manifest, detector,
                        resume_from=mid_ckpt)
        tail = [e["total"] for e in full.log if e["epoch"] >= 4]
        resumed_totals = [e["total"] for e in resumed.log]
        assert len(tail) >= 10
        assert resumed_totals == tail


class TestEnhanceCommand:
    @pytest.fixture
    def trained_ckpt(self, tiny_manifest, tmp_path):
        result = train(toy_config(epochs=1), tiny_manifest,
                       PooledLumaProvider(), out_dir=tmp_path / "run")
        return result.checkpoint_path

    def test_shapes_and_determinism(self, trained_ckpt, tmp_path, rng):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        save_image(rng.random((100, 100, 3)).astype(np.float32),
                   in_dir / "odd.png")
        save_image(rng.random((32, 48, 3)).astype(np.float32),
                   in_dir / "even.png")
        out1, out2 = tmp_path / "out1", tmp_path / "out2"
        enhance_command(in_dir, trained_ckpt, out1)
        enhance_command(in_dir, trained_ckpt, out2)
        a = load_image(out1 / "odd.png")
        assert a.shape == (100, 100, 3)
        assert load_image(out1 / "even.png").shape == (32, 48, 3)
        np.testing.assert_array_equal(a, load_image(out2 / "odd.png"))
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_empty_input_dir(self, trained_ckpt, tmp_path):
        in_dir = tmp_path / "empty"
        in_dir.mkdir()
        written = enhance_command(in_dir, trained_ckpt, tmp_path / "out")
        assert written == []

    def test_attention_dump(self, trained_ckpt, tmp_path, rng):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        save_image(rng.random((32, 32, 3)).astype(np.float32),
                   in_dir / "x.png")
        dump = tmp_path / "attn"
        enhance_command(in_dir, trained_ckpt, tmp_path / "out",
                        dump_attention=dump)
        s = load_image(dump / "x.png")
        assert s.shape == (32, 32, 3)


class TestEvaluateCommand:
    def test_psnr_ssim_only(self, tmp_path, rng):
        pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        offset = 51 / 255  # quantization-exact uniform error of 0.2
        for i in range(2):
            gt = np.rint(rng.random((24, 24, 3)) * 100 + 50) / 255
            gt = gt.astype(np.float32)
            save_image(gt, gt_dir / f"im{i}.png")
            save_image(gt + offset, pred_dir / f"im{i}.png")
        report = evaluate_command(pred_dir, gt_dir)
        assert report["images"] == 2
        assert report["psnr"] == pytest.approx(10 * math.log10(1 / offset ** 2),
                                               abs=1e-6)
        assert 0.0 < report["ssim"] < 1.0
        assert "precision" not in report

    def test_identical_images(self, tmp_path, rng):
        pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        img = np.rint(rng.random((24, 24, 3)) * 255) / 255
        img = img.astype(np.float32)
        save_image(img, gt_dir / "a.png")
        save_image(img, pred_dir / "a.png")
        report = evaluate_command(pred_dir, gt_dir)
        assert report["psnr"] == 99.0
        assert report["ssim"] == pytest.approx(1.0, abs=1e-6)

    def test_orphan_files_rejected(self, tmp_path, rng):
        pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        img = rng.random((16, 16, 3)).astype(np.float32)
        save_image(img, pred_dir / "only_pred.png")
        save_image(img, gt_dir / "only_gt.png")
        with pytest.raises(ValueError, match="only_pred"):
            evaluate_command(pred_dir, gt_dir)

    def test_detection_and_spotting_metrics(self, tmp_path):
        pred_dir, gt_dir, ann_dir = (tmp_path / "pred", tmp_path / "gt",
                                     tmp_path / "ann")
        for d in (pred_dir, gt_dir, ann_dir):
            d.mkdir()
        img = np.zeros((32, 32, 3), np.float32)
        img[8:16, 4:20] = 1.0  # bright text-like block
        save_image(img, pred_dir / "a.png")
        save_image(img, gt_dir / "a.png")
        (ann_dir / "a.txt").write_text("4,8,20,8,20,16,4,16,WORD\n")
        report = evaluate_command(pred_dir, gt_dir, ann_dir=ann_dir,
                                  recognizer=lambda crop: "word",
                                  report_path=tmp_path / "report.json")
        assert report["precision"] == 1.0
        assert report["recall"] == 1.0
        assert report["hmean"] == 1.0
        assert report["accuracy"] == 1.0
        saved = json.loads((tmp_path / "report.json").read_text())
        assert saved == pytest.approx(report)
