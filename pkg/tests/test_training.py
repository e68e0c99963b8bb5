import math

import numpy as np
import pytest

from daffnet.data import ImageSet, SplitSpec, split_622
from daffnet.pipeline import build_daffnet
from daffnet.models import MAP, BackboneConfig, DAFFNet, DaffnetConfig, MapConfig, map_predict
from daffnet.schema import AttributeSchema
from daffnet.synth import SynthConfig, synth_generate
from daffnet.tensor import ShapeError, Tensor, backward, softmax
from daffnet.training import (
    Adam,
    EarlyStopping,
    LabelBatch,
    LossWeights,
    NonFiniteGradient,
    TrainConfig,
    cross_entropy,
    daffnet_validation,
    deep_supervision_loss,
    map_outputs,
    map_validation,
    pseudo_label,
    train_daffnet,
    train_map_dsl,
    train_map_ssl,
)

SMALL = dict(widths=(8, 16), blocks=(1, 1), input_size=24, d_sem=12, stem_width=8)


def direct_loss(attr_probs, attr_idx, class_probs, labels, lam_ap, lam_cls):
    """Loop evaluation of the weighted base-2 log-loss, averaged over samples."""
    n, a = len(labels), len(attr_probs)
    total = 0.0
    for i in range(n):
        s_attr = sum(math.log2(max(attr_probs[m][i][attr_idx[i][m]], 1e-12)) for m in range(a))
        s_cls = math.log2(max(class_probs[i][labels[i]], 1e-12))
        total += lam_ap * s_attr / a + lam_cls * s_cls
    return -total / n


def random_batch(r, n, sizes, k):
    attr = [r.dirichlet(np.ones(p), n) for p in sizes]
    cls = r.dirichlet(np.ones(k), n)
    idx = np.stack([r.integers(0, p, n) for p in sizes], axis=1)
    labels = r.integers(0, k, n)
    return attr, cls, idx, labels


def labels_for(idx, labels, sizes, k):
    schema = AttributeSchema([(f"a{m}", tuple(f"c{j}" for j in range(p))) for m, p in enumerate(sizes)])
    return LabelBatch.from_indices(idx, labels, schema, k)


class TestDeepSupervisionLoss:
    def test_perfect_predictions(self):
        idx, lab = np.array([[0, 1], [1, 0]]), np.array([1, 0])
        attr = [Tensor(np.eye(2)[idx[:, m]]) for m in range(2)]
        loss = deep_supervision_loss((attr, Tensor(np.eye(2)[lab])), labels_for(idx, lab, (2, 2), 2))
        assert float(loss.data) == 0.0

    def test_uniform_two_by_two(self):
        idx, lab = np.array([[0, 1], [1, 1], [0, 0]]), np.array([1, 0, 1])
        attr = [Tensor(np.full((3, 2), 0.5)) for _ in range(2)]
        loss = deep_supervision_loss((attr, Tensor(np.full((3, 2), 0.5))), labels_for(idx, lab, (2, 2), 2))
        assert float(loss.data) == 1.0

    def test_class_only_is_base2_cross_entropy(self, rng):
        attr, cls, idx, lab = random_batch(rng, 7, (2, 3), 4)
        loss = deep_supervision_loss(([Tensor(a) for a in attr], Tensor(cls)), labels_for(idx, lab, (2, 3), 4),
                        LossWeights(0.0, 1.0))
        ce = -np.mean(np.log2(cls[np.arange(7), lab]))
        assert float(loss.data) == pytest.approx(ce, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_formula(self, seed):
        r = np.random.default_rng(seed)
        for _ in range(40):
            n, k = int(r.integers(1, 9)), int(r.integers(2, 6))
            sizes = tuple(int(s) for s in r.integers(2, 5, int(r.integers(1, 6))))
            attr, cls, idx, lab = random_batch(r, n, sizes, k)
            w = LossWeights(float(r.uniform(0, 1)), float(r.uniform(0, 1)))
            got = deep_supervision_loss(([Tensor(a) for a in attr], Tensor(cls)), labels_for(idx, lab, sizes, k), w)
            assert abs(float(got.data) - direct_loss(attr, idx, cls, lab, w.lambda_ap, w.lambda_cls)) < 1e-9

    def test_clamps_zero_probability(self):
        idx, lab = np.array([[0]]), np.array([0])
        loss = deep_supervision_loss(([Tensor(np.array([[0.0, 1.0]]))], Tensor(np.array([[1.0, 0.0]]))),
                        labels_for(idx, lab, (2,), 2))
        assert float(loss.data) == pytest.approx(0.8 * -math.log2(1e-12))

    def test_weight_scaling(self, rng):
        attr, cls, idx, lab = random_batch(rng, 5, (2, 3, 4), 3)
        lb = labels_for(idx, lab, (2, 3, 4), 3)
        grads = []
        for c in (1.0, 3.0):
            logits = [Tensor(np.log(a), requires_grad=True) for a in attr]
            probs = [softmax(z, axis=1) for z in logits]
            loss = deep_supervision_loss((probs, Tensor(cls)), lb, LossWeights(0.8 * c, 0.2 * c))
            backward(loss)
            grads.append((float(loss.data), np.concatenate([z.grad.ravel() for z in logits])))
        assert grads[1][0] == pytest.approx(3 * grads[0][0], rel=1e-12)
        np.testing.assert_allclose(grads[1][1], 3 * grads[0][1], rtol=1e-10, atol=1e-15)

    def test_non_negative(self, rng):
        for _ in range(50):
            attr, cls, idx, lab = random_batch(rng, 4, (2, 2), 3)
            loss = deep_supervision_loss(([Tensor(a) for a in attr], Tensor(cls)), labels_for(idx, lab, (2, 2), 3))
            assert float(loss.data) >= 0

    def test_arity_mismatch(self, rng):
        attr, cls, idx, lab = random_batch(rng, 3, (2, 2), 2)
        with pytest.raises(ShapeError):
            deep_supervision_loss(([Tensor(attr[0])], Tensor(cls)), labels_for(idx, lab, (2, 2), 2))

    def test_label_batch_rejects_non_one_hot(self):
        with pytest.raises(ShapeError):
            LabelBatch([np.array([[1.0, 1.0]])], np.array([[1.0, 0.0]]))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.2)


class TestCrossEntropy:
    def test_perfect(self):
        assert float(cross_entropy(Tensor(np.eye(3)), np.eye(3)).data) == 0.0

    def test_uniform_five(self):
        loss = cross_entropy(Tensor(np.full((4, 5), 0.2)), np.eye(5)[[0, 1, 2, 3]])
        assert float(loss.data) == pytest.approx(math.log(5), rel=1e-12)

    def test_softmax_gradient(self, rng):
        z = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        y = np.eye(5)[rng.integers(0, 5, 6)]
        p = softmax(z, axis=1)
        backward(cross_entropy(p, y))
        np.testing.assert_allclose(z.grad, (p.data - y) / 6, atol=1e-12)

    def test_unnormalized_rows(self):
        with pytest.raises(ValueError, match="sum to 1"):
            cross_entropy(Tensor(np.array([[0.5, 0.6]])), np.array([[1, 0]]))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        for _ in range(3):
            p.grad = np.zeros(2)
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)

    def test_deterministic_trajectory(self):
        def run():
            r = np.random.default_rng(5)
            p = Tensor(r.standard_normal(4), requires_grad=True)
            opt = Adam([("p", p)], lr=0.01)
            for _ in range(20):
                p.grad = r.standard_normal(4)
                opt.step()
            return p.data

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_aborts_whole_step(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([("first", a), ("second.weight", b)], lr=0.1)
        a.grad, b.grad = np.array([1.0]), np.array([np.nan])
        with pytest.raises(NonFiniteGradient, match="second.weight"):
            opt.step()
        assert a.data[0] == 1.0 and b.data[0] == 2.0 and opt.t == 0


class TestEarlyStopping:
    def test_patience_zero_stops_at_first_plateau(self):
        stop = EarlyStopping(0, "min")
        assert [stop.update(e, v) for e, v in enumerate([3.0, 2.0, 2.5])] == [False, False, True]
        assert stop.best == 2.0 and stop.best_epoch == 1

    def test_patience_counts_non_improving_epochs(self):
        stop = EarlyStopping(2, "max")
        flags = [stop.update(e, v) for e, v in enumerate([0.5, 0.6, 0.6, 0.7, 0.65, 0.69])]
        assert flags == [False, False, False, False, False, True]
        assert stop.best_epoch == 3

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            EarlyStopping(1, "median")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=3, patience=4)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


# training loops on a small synthetic set -----------------------------------------
@pytest.fixture(scope="module")
def small_splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("train200")
    manifest = synth_generate(SynthConfig(per_class=40, seed=11), root)
    return [ImageSet.load(m, 28) for m in split_622(manifest, SplitSpec(seed=0))]


def small_map(seed=0):
    return MAP(MapConfig(backbone=BackboneConfig(**SMALL, epsa=False, sa=False)), AttributeSchema.default(),
               np.random.default_rng(seed))


def small_cfg(**kw):
    base = dict(epochs=4, patience=4, batch_size=16, lr=3e-3, seed=0, crop_size=24)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def trained_map(small_splits):
    train, val, _ = small_splits
    return train_map_dsl(small_map(), train, val, small_cfg())


class TestMapTraining:
    def test_loss_decreases(self, trained_map):
        _, hist = trained_map
        losses = [e["val_loss"] for e in hist["epochs"]]
        assert losses[hist["best_epoch"]] < losses[0]
        assert hist["epochs"][-1]["train_loss"] < hist["epochs"][0]["train_loss"]

    def test_returned_model_is_history_argmin(self, trained_map, small_splits):
        model, hist = trained_map
        losses = [e["val_loss"] for e in hist["epochs"]]
        assert hist["best_epoch"] == int(np.argmin(losses))
        replay = map_validation(model, small_splits[1], small_cfg(), LossWeights())
        assert replay["val_loss"] == pytest.approx(min(losses), rel=1e-9)

    def test_history_layout(self, trained_map):
        _, hist = trained_map
        assert hist["monitor"] == "val_loss" and hist["mode"] == "min"
        assert hist["epochs_run"] == len(hist["epochs"]) == 4
        assert {"train_loss", "val_loss", "val_subset_accuracy", "seconds"} <= set(hist["epochs"][0])

    def test_patience_zero(self, small_splits):
        train, val, _ = small_splits
        _, hist = train_map_dsl(small_map(), train, val, small_cfg(epochs=6, patience=0, lr=0.05))
        losses = [e["val_loss"] for e in hist["epochs"]]
        best = np.minimum.accumulate(losses)
        first_plateau = next((i for i in range(1, len(losses)) if losses[i] >= best[i - 1]), None)
        expected = 6 if first_plateau is None else first_plateau + 1
        assert hist["epochs_run"] == expected

    def test_missing_attributes_rejected(self, small_splits):
        train, val, _ = small_splits
        with pytest.raises(ValueError, match="without attribute labels"):
            train_map_dsl(small_map(), strip(train), val, small_cfg())

    def test_deterministic(self, small_splits, trained_map):
        train, val, _ = small_splits
        again, _ = train_map_dsl(small_map(), train, val, small_cfg())
        a, b = trained_map[0].state_dict(), again.state_dict()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def strip(data: ImageSet) -> ImageSet:
    recs = [r.__class__(r.path, r.label) for r in data.manifest.records]
    return ImageSet(data.manifest.subset(recs), data.images)


class TestPseudoLabel:
    def test_matches_independent_prediction(self, trained_map, small_splits):
        model, _ = trained_map
        test = small_splits[2]
        out = pseudo_label(model, strip(test), small_cfg())
        attr, _ = map_outputs(model, test, small_cfg())
        np.testing.assert_array_equal(out.attributes, map_predict(attr))
        assert len(out) == len(test)
        assert {r.provenance for r in out.manifest.records} == {"pseudo"}
        np.testing.assert_array_equal(out.labels, test.labels)

    def test_true_labels_never_overwritten(self, trained_map, small_splits):
        model, _ = trained_map
        test = small_splits[2]
        recs = list(test.manifest.records)
        half = len(recs) // 2
        mixed = ImageSet(test.manifest.subset(recs[:half] + strip(test).manifest.records[half:]), test.images)
        out = pseudo_label(model, mixed, small_cfg())
        assert out.manifest.records[:half] == recs[:half]
        assert all(r.provenance == "pseudo" for r in out.manifest.records[half:])


class TestSsl:
    def test_no_pseudo_sets_equals_dsl(self, small_splits, trained_map):
        train, val, _ = small_splits
        ssl, hist = train_map_ssl(small_map(), train, [], val, small_cfg())
        assert hist["union_size"] == len(train)
        for k, v in trained_map[0].state_dict().items():
            np.testing.assert_array_equal(ssl.state_dict()[k], v)

    def test_union_size(self, small_splits, trained_map):
        train, val, test = small_splits
        pseudo = pseudo_label(trained_map[0], strip(test), small_cfg())
        _, hist = train_map_ssl(small_map(), train, [pseudo, pseudo], val, small_cfg(epochs=1, patience=1))
        assert hist["union_size"] == len(train) + 2 * len(test)


@pytest.fixture(scope="module")
def daffnet_run(trained_map, small_splits):
    map_model = trained_map[0]
    before = {k: v.copy() for k, v in map_model.state_dict().items()}
    cfg = DaffnetConfig(backbone=BackboneConfig(**SMALL), map=map_model.cfg)
    net = DAFFNet(cfg, map_model.schema, np.random.default_rng(4), map_model=map_model)
    train, val, _ = small_splits
    net, hist = train_daffnet(net, train, val, small_cfg(epochs=3, patience=3, freeze=("map.",)))
    return net, hist, before


class TestDaffnetTraining:
    def test_map_bitwise_unchanged(self, daffnet_run):
        net, _, before = daffnet_run
        after = net.map.state_dict()
        for k, v in before.items():
            np.testing.assert_array_equal(after[k], v)

    def test_history_selects_checkpoint(self, daffnet_run, small_splits):
        net, hist, _ = daffnet_run
        accs = [e["val_accuracy"] for e in hist["epochs"]]
        assert hist["monitor"] == "val_accuracy" and hist["best_epoch"] == int(np.argmax(accs))
        replay = daffnet_validation(net, small_splits[1], small_cfg())
        assert replay["val_accuracy"] == max(accs)

    def test_missing_map_rejected(self):
        with pytest.raises(ValueError, match="MAP"):
            build_daffnet(AttributeSchema.default(), 0, None, mfe="full")
