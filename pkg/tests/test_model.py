import numpy as np
import pytest

from label2label import tensor as T
from label2label.aqn import AttributeQueryNetwork, readout
from label2label.backbone import Backbone, add_positional, positional_table_2d
from label2label.errors import BadImageShape, ShapeMismatch, StrategyMismatch
from label2label.icmlm import ICMLM, MASK, WordVocab, embed_words, infer, mask_sentence, mlm_no_image_forward
from label2label.model import MODES, Label2Label, ModelConfig
from label2label.tensor import Tensor

from tests.conftest import autodiff_vs_fd


def small_config(**kw):
    base = dict(n_attributes=3, d=8, heads=2, ffn_hidden=8, aqn_layers=1, mlm_layers=1)
    base.update(kw)
    return ModelConfig(**base)


class TestBackbone:
    def test_shapes(self, rng):
        bb = Backbone(rng, d=8)
        f = bb(rng.normal(size=(2, 16, 16, 1)))
        assert f.x_spatial.shape == (2, 4, 4, 8)
        assert f.x_flat.shape == (2, 16, 8) and f.x_pos_added.shape == (2, 16, 8)
        assert (f.height, f.width, f.batch) == (4, 4, 2)

    def test_unbatched_image(self, rng):
        assert Backbone(rng, d=8)(rng.normal(size=(8, 8, 1))).batch == 1

    def test_bad_shapes(self, rng):
        bb = Backbone(rng, d=8)
        with pytest.raises(BadImageShape):
            bb(np.zeros((1, 10, 12, 1)))
        with pytest.raises(BadImageShape):
            bb(np.zeros((1, 8, 8, 3)))

    def test_positional_table(self):
        tab = positional_table_2d(2, 3, 8)
        assert tab.shape == (6, 8)
        # first half depends on the row only, second half on the column only
        np.testing.assert_array_equal(tab[0, :4], tab[2, :4])
        np.testing.assert_array_equal(tab[0, 4:], tab[3, 4:])
        assert tab[0, 0] == 0.0 and tab[0, 1] == 1.0
        assert tab[3, 0] == pytest.approx(np.sin(1.0))
        with pytest.raises(ShapeMismatch):
            positional_table_2d(2, 2, 6)

    def test_pos_disabled(self, rng):
        f = Backbone(rng, d=8, pos_embedding=False)(rng.normal(size=(1, 8, 8, 1)))
        assert f.x_pos_added is f.x_flat
        x = Tensor(np.zeros((1, 4, 8)))
        assert add_positional(x, None) is x

    def test_gradient(self, rng):
        bb = Backbone(rng, d=4, channels=(2, 3))
        img = rng.normal(size=(1, 8, 8, 1))
        w = Tensor(rng.normal(size=(1, 4, 4)))
        assert autodiff_vs_fd(lambda: T.reduce_sum(bb(img).x_pos_added * w), bb.parameters()) < 1e-5


class TestAqn:
    def test_readout_is_strict(self):
        assert readout(Tensor([[0.5, 0.5000001, 0.2]])).tolist() == [[0, 1, 0]]

    def test_output_shapes(self, rng):
        bb = Backbone(rng, d=8)
        aqn = AttributeQueryNetwork(5, 8, 2, 16, 2, rng)
        out = aqn(bb(rng.normal(size=(3, 8, 8, 1))))
        assert out.probs.shape == (3, 5) and out.responses.shape == (3, 5, 8)
        assert out.pseudo_sentence.dtype == np.int64
        maps = aqn.cross_attention_maps()
        assert len(maps) == 2 and maps[0].shape == (3, 2, 5, 4)

    def test_pooled_head(self, rng):
        bb = Backbone(rng, d=8)
        aqn = AttributeQueryNetwork(5, 8, 2, 16, 0, rng)
        f = bb(rng.normal(size=(2, 8, 8, 1)))
        out = aqn(f)
        pooled = f.x_flat.data.mean(axis=1)
        want = 1 / (1 + np.exp(-(pooled @ aqn.cls_w.data.T + aqn.cls_b.data)))
        np.testing.assert_allclose(out.probs.data, want, rtol=1e-12)
        assert out.responses is None

    def test_width_mismatch(self, rng):
        f = Backbone(rng, d=8)(rng.normal(size=(1, 8, 8, 1)))
        with pytest.raises(ShapeMismatch):
            AttributeQueryNetwork(2, 4, 1, 4, 1, rng)(f)


class TestIcmlm:
    def test_mask_extremes(self, rng):
        s = np.array([[0, 1, 1]])
        w0, m0 = mask_sentence(s, 0.0, rng)
        assert w0.tolist() == s.tolist() and not m0.any()
        w1, m1 = mask_sentence(s, 1.0, rng)
        assert (w1 == MASK).all() and m1.all()
        with pytest.raises(ValueError):
            mask_sentence(s, 1.5, rng)

    def test_token_ids(self, rng):
        v = WordVocab(3, 4, "specific", rng)
        ids, masked = v.token_ids([[0, 1, MASK]])
        assert ids.tolist() == [[0, 3, 8]] and masked.tolist() == [[False, False, True]]
        assert WordVocab(3, 4, "agnostic", rng).token_ids([[MASK, 1, MASK]])[0].tolist() == [[6, 3, 6]]
        assert WordVocab(3, 4, "zero", rng).size == 6

    def test_zero_strategy_masks_to_zero(self, rng):
        v = WordVocab(3, 4, "zero", rng)
        e = embed_words([[1, MASK, 0]], v).data
        assert (e[0, 1] == 0).all() and (e[0, 0] == v.table.data[1]).all()

    def test_strategy_mismatch(self, rng):
        v = WordVocab(3, 4, "specific", rng)
        with pytest.raises(StrategyMismatch):
            embed_words([[0, 1, 0]], v, "zero")
        with pytest.raises(StrategyMismatch):
            WordVocab(3, 4, "random", rng)

    def test_same_word_different_attribute_differs(self, rng):
        v = WordVocab(2, 4, "specific", rng)
        e = embed_words([[1, 1]], v).data
        assert not np.array_equal(e[0, 0], e[0, 1])

    def test_no_image_variant(self, rng):
        mlm = ICMLM(3, 8, 2, 8, 1, rng, image_conditioned=False)
        out = mlm_no_image_forward(mlm.embed([[0, 1, MASK]]), mlm)
        assert out.probs.shape == (1, 3) and mlm.cross_attention_maps() == []
        with pytest.raises(ValueError):
            mlm_no_image_forward(None, ICMLM(3, 8, 2, 8, 1, rng))

    def test_infer_is_deterministic(self, rng):
        model = Label2Label(small_config(), rng)
        img = rng.normal(size=(2, 8, 8, 1))
        f = model.backbone(img)
        a = infer(model.aqn(f), f, model.mlm).probs.data
        b = infer(model.aqn(f), f, model.mlm).probs.data
        assert a.tobytes() == b.tobytes()


class TestLabel2Label:
    @pytest.mark.parametrize("mode", [m for m in MODES if m != "two_stage"])
    def test_modes_forward(self, mode, rng):
        model = Label2Label(small_config(mode=mode), rng)
        img = rng.normal(size=(2, 8, 8, 1))
        total, la, lm, res = model.loss(img, np.array([[1, 0, 1], [0, 0, 1]]), 1.0, 0.1, rng)
        assert np.isfinite(total.item())
        assert (lm is None) == (mode in ("fc_head", "aqn_only"))
        assert res.final_probs.shape == (2, 3)
        T.backward(total)
        assert all(p.grad is not None for p in model.parameters())

    def test_frozen_prefixes(self, rng):
        model = Label2Label(small_config(mode="two_stage"), rng)
        names = {id(t): n for n, t in model.named_parameters()}
        assert all(names[id(t)].startswith("mlm.") for t in model.trainable_parameters())

    def test_pseudo_sentence_blocks_gradient(self, rng):
        """The IC-MLM loss sends no gradient into the AQN classifier (readout is a hard threshold)."""
        model = Label2Label(small_config(), rng)
        img = rng.normal(size=(2, 8, 8, 1))
        res = model.forward(img)
        from label2label.objectives import bce_loss

        T.backward(bce_loss(res.mlm.probs, np.array([[1, 0, 1], [0, 0, 1]])))
        assert model.aqn.cls_w.grad is None and model.aqn.queries.grad is None
        assert model.mlm.cls_w.grad is not None

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            small_config(mode="nope")
        with pytest.raises(ValueError):
            small_config(aqn_layers=0)
        small_config(mode="fc_head", aqn_layers=0)


def test_group_attention_contrast_hand_maps():
    from types import SimpleNamespace

    from label2label.train import group_attention_contrast

    # attributes 0,2 share a factor, as do 1,3; layer 0 favours siblings, layer 1 is uniform
    fav = np.array([[0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7], [0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1]])
    maps = [fav[None, None], np.full((1, 1, 4, 4), 0.25)]
    fake = SimpleNamespace(forward=lambda images: None,
                           mlm=SimpleNamespace(self_attention_maps=lambda: maps))
    same, cross = group_attention_contrast(fake, None, [0, 1, 0, 1], layer=0)
    assert (same, cross) == pytest.approx((0.7, 0.1))
    same, cross = group_attention_contrast(fake, None, [0, 1, 0, 1])
    assert (same, cross) == pytest.approx((0.475, 0.175))
