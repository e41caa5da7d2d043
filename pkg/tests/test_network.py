"""Network assembly, pre-training, and checkpoint round-trip tests."""
import numpy as np
import pytest

from hebbseg.data import BlobSpec, gen_synthetic
from hebbseg.network import (
    CheckpointError,
    NetworkSpec,
    build_network,
    forward,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from hebbseg.rules import HebbianConfig

SMALL = NetworkSpec(in_channels=1, widths=(4, 8), num_classes=2)


class TestForward:
    def test_shape_restoration(self):
        net = build_network(SMALL, seed=0)
        x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
        logits, cache = forward(net, x)
        assert logits.shape == (2, 2, 16, 16)
        assert cache["head_in"].shape[2:] == (16, 16)

    def test_zero_weights_zero_logits(self):
        net = build_network(SMALL, seed=0)
        for name, lw in net.layers.items():
            lw.weights[:] = 0
        x = np.random.default_rng(1).random((1, 1, 16, 16)).astype(np.float32)
        logits, _ = forward(net, x)
        np.testing.assert_array_equal(logits, np.zeros_like(logits))

    def test_batch_independence(self):
        net = build_network(SMALL, seed=2)
        rng = np.random.default_rng(3)
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        both, _ = forward(net, x)
        one, _ = forward(net, x[:1])
        two, _ = forward(net, x[1:])
        np.testing.assert_allclose(both, np.concatenate([one, two]), atol=1e-6)

    def test_divisibility_enforced(self):
        net = build_network(SMALL, seed=0)
        with pytest.raises(ValueError, match="divisible"):
            forward(net, np.zeros((1, 1, 18, 16), np.float32))

    def test_channel_mismatch(self):
        net = build_network(SMALL, seed=0)
        with pytest.raises(ValueError, match="channels"):
            forward(net, np.zeros((1, 3, 16, 16), np.float32))


class TestPretrain:
    @staticmethod
    def blob_images(count=12, size=16, seed=0):
        return gen_synthetic(BlobSpec(size=size, count=count, seed=seed)).images

    def test_zero_epochs_rejected(self):
        net = build_network(SMALL, seed=0)
        with pytest.raises(ValueError, match="epochs"):
            pretrain(net, self.blob_images(), HebbianConfig(), epochs=0, seed=0)

    def test_empty_set_rejected(self):
        net = build_network(SMALL, seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            pretrain(net, np.zeros((0, 1, 16, 16), np.float32), HebbianConfig(),
                     epochs=1, seed=0)

    def test_fixed_seed_is_bitwise_reproducible(self):
        imgs = self.blob_images()
        cfg = HebbianConfig(rule="swta", tconv_variant="tsa", eta=0.02,
                            temperature=0.5)
        net_a = build_network(SMALL, seed=5)
        net_b = build_network(SMALL, seed=5)
        tel_a = pretrain(net_a, imgs, cfg, epochs=3, seed=7, batch_size=4)
        tel_b = pretrain(net_b, imgs, cfg, epochs=3, seed=7, batch_size=4)
        for name in net_a.layers:
            np.testing.assert_array_equal(
                net_a.layer(name).weights, net_b.layer(name).weights
            )
        assert tel_a == tel_b

    def test_head_untouched(self):
        imgs = self.blob_images()
        net = build_network(SMALL, seed=6)
        head_before = net.layer("head").weights.copy()
        pretrain(net, imgs, HebbianConfig(eta=0.05, temperature=0.5),
                 epochs=2, seed=1, batch_size=4)
        np.testing.assert_array_equal(net.layer("head").weights, head_before)

    def test_both_tconv_variants_run(self):
        imgs = self.blob_images(count=6)
        for variant in ("s", "tsa"):
            for rule in ("swta", "hpca"):
                net = build_network(SMALL, seed=8)
                cfg = HebbianConfig(rule=rule, tconv_variant=variant,
                                    eta=0.01, temperature=0.5)
                telemetry = pretrain(net, imgs, cfg, epochs=1, seed=0,
                                     batch_size=3)
                layers_seen = {row[1] for row in telemetry}
                assert layers_seen == set(net.hebbian_layer_names())

    def test_update_norms_shrink_on_stationary_data(self):
        # full-batch steps on a fixed image set: each layer contracts toward
        # its equilibrium once its upstream input stabilizes
        imgs = gen_synthetic(
            BlobSpec(size=32, count=16, contrast=0.5, noise_sigma=0.2,
                     background=0.0, clip=False, seed=3)
        ).images
        spec = NetworkSpec(in_channels=1, widths=(8,), num_classes=2)
        hits = 0
        for seed in range(5):
            net = build_network(spec, seed=30 + seed)
            cfg = HebbianConfig(rule="swta", tconv_variant="tsa", eta=0.3,
                                temperature=0.3)
            telemetry = pretrain(net, imgs, cfg, epochs=24, seed=seed,
                                 batch_size=len(imgs))
            ok = True
            for name in net.hebbian_layer_names():
                norms = [row[2] for row in telemetry if row[1] == name]
                early = float(np.median(norms[:10]))
                late = float(np.median(norms[-10:]))
                if not late < early:
                    ok = False
            hits += ok
        assert hits >= 4


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        net = build_network(SMALL, seed=11)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(net, p1)
        loaded = load_checkpoint(p1, SMALL)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for name in net.layers:
            np.testing.assert_array_equal(
                loaded.layer(name).weights, net.layer(name).weights
            )

    def test_property_round_trip_random_specs(self, tmp_path):
        rng = np.random.default_rng(12)
        for trial in range(10):
            widths = tuple(int(v) for v in rng.integers(1, 9, rng.integers(1, 4)))
            spec = NetworkSpec(
                in_channels=int(rng.integers(1, 4)),
                widths=widths,
                num_classes=int(rng.integers(2, 5)),
            )
            net = build_network(spec, seed=trial)
            path = tmp_path / f"t{trial}.ckpt"
            save_checkpoint(net, path)
            loaded = load_checkpoint(path, spec)
            for name in net.layers:
                np.testing.assert_array_equal(
                    loaded.layer(name).weights, net.layer(name).weights
                )

    def test_truncated_file(self, tmp_path):
        net = build_network(SMALL, seed=13)
        path = tmp_path / "c.ckpt"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path, SMALL)
        assert exc.value.code in ("crc", "truncated")

    def test_bad_magic(self, tmp_path):
        net = build_network(SMALL, seed=14)
        path = tmp_path / "d.ckpt"
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        import struct
        import zlib
        body = bytes(blob[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path, SMALL)
        assert exc.value.code == "magic"

    def test_corrupted_byte_fails_crc(self, tmp_path):
        net = build_network(SMALL, seed=15)
        path = tmp_path / "e.ckpt"
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path, SMALL)
        assert exc.value.code == "crc"

    def test_wrong_architecture_names_offending_layer(self, tmp_path):
        net = build_network(SMALL, seed=16)
        path = tmp_path / "f.ckpt"
        save_checkpoint(net, path)
        other = NetworkSpec(in_channels=1, widths=(4, 16), num_classes=2)
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path, other)
        assert exc.value.code == "shape"
        assert "enc2.conv" in str(exc.value)
