import json

import numpy as np
import pytest

from cxrvgg.augment import AugmentConfig
from cxrvgg.data import ClassLabel, load_dataset
from cxrvgg.errors import ConfigError, DatasetError
from cxrvgg.layers import Mode
from cxrvgg.tensor import Rng
from cxrvgg.trainer import (
    RunConfig,
    cross_validate,
    evaluate_model,
    load_model,
    model_for,
    read_summary,
    save_model,
    synth_dataset,
    train_one_fold,
)

TINY = """\
input 16x16x3
c1 Conv2D(3, 4)
p1 MaxPool(2, 2)
f Flatten
d1 Dense(16)
bn BatchNorm
d2 Dense(8)
drop Dropout(0.3)
out SoftmaxOutput(3)
"""


@pytest.fixture(scope="module")
def tiny_arch(tmp_path_factory):
    path = tmp_path_factory.mktemp("arch") / "tiny.spec"
    path.write_text(TINY)
    return str(path)


def _cfg(arch, **kw):
    base = dict(arch=arch, epochs=3, batch_size=6, image_size=16, seed=11)
    base.update(kw)
    return RunConfig(**base)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.dropout, cfg.folds) == (200, 32, 1e-4, 0.3, 5)
        assert cfg.aug == AugmentConfig()

    def test_text_round_trip(self):
        cfg = RunConfig(arch="mini-vgg", epochs=7, seed=3, aug=AugmentConfig(rotation_deg=10, seed=3))
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_overrides_and_aug_seed(self):
        cfg = RunConfig.from_text("epochs = 4\nseed = 9\naug.hflip = false\n", batch_size=8)
        assert (cfg.epochs, cfg.batch_size, cfg.aug.hflip, cfg.aug.seed) == (4, 8, False, 9)

    @pytest.mark.parametrize("text", ["epochs = 0", "batch_size = 1", "bogus = 1", "aug.bogus = 1",
                                      "epochs = many", "no equals sign", "aug.zoom_frac = 2"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)


class TestTraining:
    def test_zero_epochs_is_initialisation(self, small_root, tiny_arch):
        ds = load_dataset(small_root)
        cfg = _cfg(tiny_arch)
        trained = train_one_fold(ds, cfg, fold=2, epochs=0)
        fresh = model_for(cfg, Rng(cfg.seed, "fold2").child("init"))
        assert trained.losses == []
        assert trained.model.digest() == fresh.digest()

    def test_deterministic(self, small_root, tiny_arch):
        ds = load_dataset(small_root)
        cfg = _cfg(tiny_arch)
        a = train_one_fold(ds, cfg)
        b = train_one_fold(ds, cfg)
        assert a.model.digest() == b.model.digest()
        assert a.losses == b.losses
        c = train_one_fold(ds, _cfg(tiny_arch, seed=12))
        assert c.model.digest() != a.model.digest()

    def test_tail_batch_dropped(self, small_root, tiny_arch):
        # 30 images in batches of 7 gives 4 full batches; the last 2 images are skipped
        ds = load_dataset(small_root)
        trained = train_one_fold(ds, _cfg(tiny_arch, batch_size=7, epochs=1))
        assert len(trained.losses) == 1 and np.isfinite(trained.losses[0])

    def test_loss_falls(self, small_root, tiny_arch):
        ds = load_dataset(small_root)
        cfg = _cfg(tiny_arch, epochs=20, lr=1e-3, augment=False)
        losses = train_one_fold(ds, cfg).losses
        assert np.mean(losses[-2:]) < np.mean(losses[:2])

    def test_evaluation_does_not_mutate(self, small_root, tiny_arch):
        ds = load_dataset(small_root)
        trained = train_one_fold(ds, _cfg(tiny_arch, epochs=1))
        before = trained.model.digest()
        evaluate_model(trained.model, ds.load_images(16), ds.one_hot(), trained.stats)
        assert trained.model.digest() == before

    def test_missing_class(self, small_root, tiny_arch):
        ds = load_dataset(small_root)
        two = ds.subset(np.flatnonzero(ds.labels != int(ClassLabel.OTHER_PNEUMONIA)))
        with pytest.raises(DatasetError, match="Other Pneumonia"):
            train_one_fold(two, _cfg(tiny_arch))

    def test_batch_larger_than_set(self, small_root, tiny_arch):
        with pytest.raises(ConfigError):
            train_one_fold(load_dataset(small_root), _cfg(tiny_arch, batch_size=64))

    def test_checkpoint_round_trip(self, small_root, tiny_arch, tmp_path):
        ds = load_dataset(small_root)
        cfg = _cfg(tiny_arch, epochs=1)
        trained = train_one_fold(ds, cfg)
        save_model(tmp_path / "ck", trained)
        model, stats = load_model(tmp_path / "ck", cfg)
        assert model.digest() == trained.model.digest()
        assert stats == trained.stats
        x = np.random.default_rng(0).random((2, 16, 16, 3))
        assert model.forward(x, Mode.INFER).tobytes() == trained.model.forward(x, Mode.INFER).tobytes()


class TestCrossValidate:
    def test_harness(self, small_root, tiny_arch, tmp_path):
        ds = load_dataset(small_root)
        cfg = _cfg(tiny_arch, epochs=1)
        summary = cross_validate(ds, cfg, run_dir=tmp_path / "run")
        assert len(summary.folds) == 5
        ext = [f[1].accuracy for f in summary.folds]
        assert summary.get("external", "Accuracy").mean == pytest.approx(sum(ext) / 5, abs=1e-12)
        assert sum(f[1].n for f in summary.folds) == len(ds)
        assert all(f[0].n == 24 for f in summary.folds)
        run = tmp_path / "run"
        for i in range(5):
            assert (run / f"fold{i}" / "checkpoint").is_file()
            assert (run / f"fold{i}" / "losses.csv").read_text().startswith("epoch,loss\n")
        assert RunConfig.from_text((run / "config.snapshot").read_text()) == cfg
        assert json.loads((run / "summary.json").read_text())["meta"]["batch_size"] == 6
        assert read_summary(run).to_csv() == summary.to_csv()
        assert (run / "summary.csv").read_text() == summary.to_csv()

    def test_missing_summary(self, tmp_path):
        with pytest.raises(DatasetError):
            read_summary(tmp_path)


class TestSynth:
    def test_layout_and_determinism(self, tmp_path):
        a = synth_dataset(tmp_path / "a", 10, 32, seed=4)
        b = synth_dataset(tmp_path / "b", 10, 32, seed=4)
        assert len(a) == 30
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["covid19", "no_finding", "other_pneumonia"]
        assert np.array_equal(a.load_images(32), b.load_images(32))

    def test_small_request_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            synth_dataset(tmp_path, 4, 32)
