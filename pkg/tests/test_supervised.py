"""Supervised-stage tests: finite-difference gradient checks, schedule, probe."""
import numpy as np
import pytest

from hebbseg.data import BlobSpec, gen_synthetic
from hebbseg.network import NetworkSpec, build_network, forward
from hebbseg.ops import (
    ConvGeometry,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    tconv2d_forward,
    tconv2d_input_grad,
    tconv2d_weight_grad,
)
from hebbseg.supervised import (
    SGDConfig,
    backward,
    evaluate_dc,
    finetune,
    linear_probe,
    softmax_ce_loss,
)

TOY = NetworkSpec(in_channels=1, widths=(3, 5), num_classes=2)


def numeric_weight_grad(loss_fn, weights, step=1e-3):
    """Central finite differences on float32 parameters, float64 loss."""
    grad = np.zeros(weights.shape, np.float64)
    flat = weights.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


class TestCELoss:
    def test_uniform_logits_max_entropy(self):
        logits = np.zeros((2, 2, 3, 3), np.float32)
        target = np.zeros((2, 3, 3), np.int64)
        loss, _ = softmax_ce_loss(logits, target)
        assert loss == pytest.approx(np.log(2), abs=1e-6)

    def test_confident_correct_is_near_zero(self):
        target = np.ones((1, 4, 4), np.int64)
        logits = np.zeros((1, 2, 4, 4), np.float32)
        logits[:, 1] = 20.0
        loss, _ = softmax_ce_loss(logits, target)
        assert loss < 1e-3

    def test_out_of_range_class_rejected(self):
        logits = np.zeros((1, 2, 2, 2), np.float32)
        with pytest.raises(ValueError, match="classes"):
            softmax_ce_loss(logits, np.full((1, 2, 2), 2, np.int64))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
        target = rng.integers(0, 2, (1, 2, 2))
        _, dlogits = softmax_ce_loss(logits, target)

        def loss_at():
            return softmax_ce_loss(logits, target)[0]

        num = numeric_weight_grad(loss_at, logits)
        assert rel_err(dlogits.astype(np.float64), num) <= 1e-3

    def test_zero_upstream_grad_is_zero_everywhere(self):
        net = build_network(TOY, seed=0)
        x = np.random.default_rng(1).random((1, 1, 8, 8)).astype(np.float32)
        logits, cache = forward(net, x)
        grads = backward(net, cache, np.zeros_like(logits))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))


class TestKernelGradients:
    def test_conv_weight_grad_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        geom = ConvGeometry(2, 3, 2, 2, stride=1, padding=1)
        x = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
        dy_shape = conv2d_forward(x, np.zeros((3, 2, 2, 2), np.float32), geom).shape
        dy = rng.standard_normal(dy_shape).astype(np.float32)
        got = conv2d_weight_grad(x, dy, geom)
        # correlation of input with the output gradient, by explicit loops
        expected = np.zeros((3, 2, 2, 2))
        xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for c in range(2):
                for u in range(2):
                    for v in range(2):
                        acc = 0.0
                        for b in range(2):
                            for i in range(dy_shape[2]):
                                for j in range(dy_shape[3]):
                                    acc += dy[b, o, i, j] * xp[b, c, i + u, j + v]
                        expected[o, c, u, v] = acc
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_conv_grads_match_finite_differences(self):
        rng = np.random.default_rng(3)
        geom = ConvGeometry(2, 2, 3, 3, stride=2, padding=1)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = (rng.standard_normal((2, 2, 3, 3)) * 0.5).astype(np.float32)
        ref = rng.standard_normal(conv2d_forward(x, w, geom).shape)

        def loss():
            return float((conv2d_forward(x, w, geom).astype(np.float64) * ref).sum())

        dy = ref.astype(np.float32)
        assert rel_err(
            conv2d_weight_grad(x, dy, geom).astype(np.float64),
            numeric_weight_grad(loss, w),
        ) <= 1e-3
        assert rel_err(
            conv2d_input_grad(dy, w, geom, (5, 5)).astype(np.float64),
            numeric_weight_grad(loss, x),
        ) <= 1e-3

    def test_tconv_grads_match_finite_differences(self):
        rng = np.random.default_rng(4)
        geom = ConvGeometry(2, 3, 2, 2, stride=2, padding=0)
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        w = (rng.standard_normal((2, 3, 2, 2)) * 0.5).astype(np.float32)
        ref = rng.standard_normal(tconv2d_forward(x, w, geom).shape)

        def loss():
            return float((tconv2d_forward(x, w, geom).astype(np.float64) * ref).sum())

        dy = ref.astype(np.float32)
        assert rel_err(
            tconv2d_weight_grad(x, dy, geom).astype(np.float64),
            numeric_weight_grad(loss, w),
        ) <= 1e-3
        assert rel_err(
            tconv2d_input_grad(dy, w, geom).astype(np.float64),
            numeric_weight_grad(loss, x),
        ) <= 1e-3


class TestNetworkBackward:
    def test_every_layer_matches_finite_differences(self):
        # finite differences are only valid away from ReLU/argmax kinks; this
        # seed pair keeps every activation margin clear of the 1e-3 step
        rng = np.random.default_rng(2)
        net = build_network(TOY, seed=3, init_std=0.3)
        x = (rng.random((1, 1, 8, 8)) + 0.2).astype(np.float32)
        target = rng.integers(0, 2, (1, 8, 8))
        logits, cache = forward(net, x)
        _, dlogits = softmax_ce_loss(logits, target)
        grads = backward(net, cache, dlogits)

        def loss():
            lg, _ = forward(net, x)
            return softmax_ce_loss(lg, target)[0]

        for name in net.layers:
            w = net.layer(name).weights
            num = numeric_weight_grad(loss, w)
            err = rel_err(grads[name].astype(np.float64), num)
            assert err <= 1e-3, f"layer {name}: rel err {err:.2e}"

        num_bias = numeric_weight_grad(loss, net.head_bias)
        assert rel_err(grads["head.bias"].astype(np.float64), num_bias) <= 1e-3

    def test_stale_cache_rejected(self):
        net = build_network(TOY, seed=7)
        x = np.random.default_rng(8).random((1, 1, 8, 8)).astype(np.float32)
        logits, cache = forward(net, x)
        with pytest.raises(ValueError, match="stale"):
            backward(net, cache, np.zeros((1, 2, 4, 4), np.float32))


class TestSGD:
    @staticmethod
    def blob_items(count, size=16, seed=0):
        data = gen_synthetic(BlobSpec(size=size, count=count, seed=seed))
        return list(zip(data.images, data.masks))

    def test_lr_schedule(self):
        cfg = SGDConfig(lr0=0.5, decay_every=50, decay_factor=0.1, epochs=200)
        assert cfg.lr_at(0) == 0.5
        assert cfg.lr_at(49) == 0.5
        assert cfg.lr_at(50) == pytest.approx(0.05)
        assert cfg.lr_at(150) == pytest.approx(0.0005)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            SGDConfig(lr0=0.0)
        with pytest.raises(ValueError):
            SGDConfig(decay_factor=0.0)
        with pytest.raises(ValueError):
            SGDConfig(momentum=1.0)

    def test_schedule_recorded_in_history(self):
        items = self.blob_items(6)
        net = build_network(TOY, seed=9)
        cfg = SGDConfig(lr0=0.2, decay_every=2, decay_factor=0.5, epochs=5,
                        batch_size=3)
        _, history = finetune(net, items[:4], items[4:], cfg, augment_on=False,
                              seed=0)
        for epoch, lr, _, _ in history:
            assert lr == pytest.approx(cfg.lr_at(epoch))

    def test_deterministic_under_seed(self):
        items = self.blob_items(6)
        cfg = SGDConfig(lr0=0.1, decay_every=10, decay_factor=0.1, epochs=3,
                        batch_size=2)
        outs = []
        for _ in range(2):
            net = build_network(TOY, seed=10)
            best, hist = finetune(net, items[:4], items[4:], cfg,
                                  augment_on=True, seed=3)
            outs.append((best, hist))
        assert outs[0][1] == outs[1][1]
        for name in outs[0][0].layers:
            np.testing.assert_array_equal(
                outs[0][0].layer(name).weights, outs[1][0].layer(name).weights
            )

    def test_empty_train_set_rejected(self):
        net = build_network(TOY, seed=11)
        with pytest.raises(ValueError, match="non-empty"):
            finetune(net, [], self.blob_items(2), SGDConfig(), False, 0)

    def test_fully_supervised_blob_run_reaches_high_dice(self):
        data = gen_synthetic(BlobSpec(size=32, count=26, contrast=0.5,
                                      noise_sigma=0.15, background=0.0,
                                      clip=False, seed=9))
        items = list(zip(data.images, data.masks))
        spec = NetworkSpec(in_channels=1, widths=(6, 12), num_classes=2)
        from hebbseg.network import build_network as build

        net = build(spec, seed=1)
        cfg = SGDConfig(lr0=0.3, decay_every=60, decay_factor=0.3, epochs=80,
                        batch_size=10)
        _, hist = finetune(net, items[:20], items[20:], cfg, augment_on=False,
                           seed=2)
        assert hist[-1][2] < hist[0][2]
        assert max(h[3] for h in hist) > 0.9

    def test_loss_decreases_on_learnable_task(self):
        items = self.blob_items(12, seed=4)
        net = build_network(TOY, seed=12)
        cfg = SGDConfig(lr0=0.2, decay_every=20, decay_factor=0.1, epochs=40,
                        batch_size=6)
        best, hist = finetune(net, items[:8], items[8:], cfg, augment_on=False,
                              seed=1)
        assert min(h[2] for h in hist[-5:]) < hist[0][2]


class TestLinearProbe:
    @staticmethod
    def blob_items(count, seed=0):
        data = gen_synthetic(BlobSpec(size=16, count=count, seed=seed))
        return list(zip(data.images, data.masks))

    def test_backbone_bitwise_frozen(self):
        items = self.blob_items(8)
        net = build_network(TOY, seed=13)
        before = {n: net.layer(n).weights.copy() for n in net.layers}
        cfg = SGDConfig(lr0=0.2, decay_every=10, decay_factor=0.5, epochs=4,
                        batch_size=4)
        linear_probe(net, items[:6], items[6:], cfg, seed=0)
        for name, w in before.items():
            np.testing.assert_array_equal(net.layer(name).weights, w)

    def test_pretrained_features_probe_at_least_as_well_as_random(self):
        from hebbseg.network import NetworkSpec, build_network, pretrain
        from hebbseg.rules import HebbianConfig

        spec = NetworkSpec(in_channels=1, widths=(8, 16), num_classes=2)
        task = gen_synthetic(BlobSpec(size=32, count=40, contrast=0.5,
                                      noise_sigma=0.25, background=0.0,
                                      clip=False, seed=11))
        val = gen_synthetic(BlobSpec(size=32, count=10, contrast=0.5,
                                     noise_sigma=0.25, background=0.0,
                                     clip=False, seed=22))
        train_items = [(task.images[i], task.masks[i]) for i in range(12)]
        val_items = list(zip(val.images, val.masks))
        unlabeled = task.images[12:]
        pc = SGDConfig(lr0=1.0, decay_every=60, decay_factor=0.3, epochs=150,
                       batch_size=12)
        pre_scores, rand_scores = [], []
        for seed in range(5):
            rnet = build_network(spec, seed=seed)
            _, rdc, _ = linear_probe(rnet, train_items, val_items, pc,
                                     seed=seed + 40)
            pnet = build_network(spec, seed=seed)
            cfg = HebbianConfig(rule="swta", tconv_variant="tsa", eta=0.1,
                                temperature=0.3)
            pretrain(pnet, unlabeled, cfg, epochs=4, seed=seed, batch_size=14)
            _, pdc, _ = linear_probe(pnet, train_items, val_items, pc,
                                     seed=seed + 40)
            pre_scores.append(pdc)
            rand_scores.append(rdc)
        assert np.mean(pre_scores) >= np.mean(rand_scores)

    def test_zero_epochs_returns_initialization_score(self):
        items = self.blob_items(8, seed=5)
        net = build_network(TOY, seed=14)
        cfg = SGDConfig(lr0=0.2, decay_every=10, decay_factor=0.5, epochs=0,
                        batch_size=4)
        head, dc, history = linear_probe(net, items[:6], items[6:], cfg, seed=7)
        assert history == []
        cfg1 = SGDConfig(lr0=1e-12, decay_every=10, decay_factor=1.0, epochs=1,
                         batch_size=4)
        _, dc_tiny, _ = linear_probe(net, items[:6], items[6:], cfg1, seed=7)
        assert dc == pytest.approx(dc_tiny, abs=1e-6)


def test_evaluate_dc_perfect_predictor():
    items = TestSGD.blob_items(4, seed=6)
    images = np.stack([img for img, _ in items])
    masks = np.stack([m for _, m in items])
    net = build_network(TOY, seed=15)
    # force logits to favour the true class by large margins via the head is
    # hard; instead check evaluate_dc against a direct recomputation
    from hebbseg.supervised import mean_foreground_dice, predict_classes

    preds = predict_classes(net, images)
    expected = mean_foreground_dice(preds, masks, 2)
    assert evaluate_dc(net, images, masks) == pytest.approx(expected)
