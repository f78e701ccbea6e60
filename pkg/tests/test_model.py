"""Scoring-network tests: configuration, parameter layout, forward shapes,
attention semantics, loss terms, persistence, and the composed
finite-difference gradient verification."""

from __future__ import annotations

import numpy as np
import pytest

from xcryonet import diffcore as dc
from xcryonet.errors import OddChannelCount, ShapeMismatch
from xcryonet.model import (
    ATTENTION_ATTRIBUTES,
    ATTRIBUTES,
    HEAD_BIAS,
    SCORE_NAMES,
    ModelConfig,
    XCryoNet,
)
from gradcheck import composed_loss, dither_params, model_param_gradcheck

SMALL = ModelConfig(input_size=16, feature_channels=4,
                    classifier_hidden=8, overall_hidden=4)


@pytest.fixture
def small_model():
    return XCryoNet.create(SMALL, seed=11, dtype=np.float64)


@pytest.fixture
def batch(rng):
    return dc.Tensor(rng.random((3, 1, 16, 16)))


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.input_size == 640
        assert cfg.feature_channels == 32
        assert cfg.upsample == "bilinear"

    def test_rejects_indivisible_input_size(self):
        with pytest.raises(ShapeMismatch):
            ModelConfig(input_size=30)

    def test_rejects_odd_channels(self):
        with pytest.raises(OddChannelCount):
            ModelConfig(feature_channels=5)

    def test_rejects_unknown_upsample(self):
        with pytest.raises(ValueError):
            ModelConfig(upsample="bicubic")

    def test_dict_round_trip(self):
        cfg = ModelConfig(input_size=64, feature_channels=8,
                          classifier_hidden=16, overall_hidden=4,
                          upsample="nearest")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterLayout:
    def test_score_name_order(self):
        assert ATTRIBUTES == ("brightness", "squareness", "cracking",
                              "contamination")
        assert SCORE_NAMES == ATTRIBUTES + ("overall",)
        assert ATTENTION_ATTRIBUTES == ("cracking", "contamination")

    def test_every_branch_has_its_partition(self, small_model):
        parts = {small_model.params.partition_of(n)
                 for n in small_model.params.names()}
        assert parts == {"primary", "cracking", "contamination", "fusion"}
        for name, _, part in small_model.params.items():
            assert name.startswith(part + "."), (name, part)

    def test_attention_branches_have_classifier_and_decoder(self, small_model):
        names = set(small_model.params.names())
        for branch in ATTENTION_ATTRIBUTES:
            assert f"{branch}.feature.conv0.w" in names
            assert f"{branch}.classifier.fc2.w" in names
            assert f"{branch}.decoder.tconv1.w" in names

    def test_fusion_classifier_width(self, small_model):
        w = small_model.params.tensor("fusion.classifier.fc1.w")
        assert w.shape[0] == 3 * SMALL.feature_channels

    def test_creation_is_deterministic(self):
        a = XCryoNet.create(SMALL, seed=3, dtype=np.float32)
        b = XCryoNet.create(SMALL, seed=3, dtype=np.float32)
        for name, t, _ in a.params.items():
            np.testing.assert_array_equal(t.data, b.params.tensor(name).data)
        c = XCryoNet.create(SMALL, seed=4, dtype=np.float32)
        assert any(not np.array_equal(t.data, c.params.tensor(n).data)
                   for n, t, _ in a.params.items())

    def test_head_biases_start_mid_range(self, small_model):
        fc2 = small_model.params.tensor("primary.classifier.fc2.b")
        np.testing.assert_array_equal(fc2.data, HEAD_BIAS)


class TestForward:
    def test_primary_shapes(self, small_model, batch):
        feat, attrs, overall, recon = small_model.forward_primary(batch)
        assert feat.shape == (3, 4, 4, 4)
        assert attrs.shape == (3, 4)
        assert overall.shape == (3, 1)
        assert recon.shape == (3, 1, 16, 16)

    def test_full_shapes(self, small_model, batch):
        out = small_model.forward_full(batch)
        assert out.fusion_attrs.shape == (3, 4)
        assert out.fusion_overall.shape == (3, 1)
        assert out.attention_cr.shape == (3, 1, 16, 16)
        assert out.attr_pred_cr.shape == (3, 1)
        assert out.attr_recon_co.shape == (3, 1, 16, 16)

    def test_rejects_multi_channel_input(self, small_model, rng):
        bad = dc.Tensor(rng.random((2, 3, 16, 16)))
        with pytest.raises(ShapeMismatch):
            small_model.forward_primary(bad)

    def test_rejects_indivisible_spatial_size(self, small_model, rng):
        bad = dc.Tensor(rng.random((2, 1, 18, 18)))
        with pytest.raises(ShapeMismatch):
            small_model.forward_primary(bad)

    def test_attention_maps_are_open_unit_interval(self, small_model, batch):
        out = small_model.forward_full(batch)
        for att in (out.attention_cr.data, out.attention_co.data):
            assert np.all(att > 0.0) and np.all(att < 1.0)

    def test_attention_weighted_input_is_product(self, small_model, batch):
        out = small_model.forward_full(batch)
        np.testing.assert_allclose(
            out.attn_input_cr.data, batch.data * out.attention_cr.data,
            rtol=1e-12)

    def test_attention_halves_differ(self, small_model, batch):
        out = small_model.forward_full(batch)
        assert not np.allclose(out.attention_cr.data, out.attention_co.data)

    def test_attention_weight_shape_check(self, small_model, batch, rng):
        attn = dc.Tensor(rng.random((3, 1, 8, 8)))
        with pytest.raises(ShapeMismatch):
            small_model.attention_weight(batch, attn)

    def test_reconstructions_in_unit_interval(self, small_model, batch):
        out = small_model.forward_full(batch)
        for rec in (out.primary_recon.data, out.attr_recon_cr.data,
                    out.attr_recon_co.data):
            assert np.all(rec >= 0.0) and np.all(rec <= 1.0)

    def test_nearest_upsample_config(self, batch):
        cfg = ModelConfig(input_size=16, feature_channels=4,
                          classifier_hidden=8, overall_hidden=4,
                          upsample="nearest")
        model = XCryoNet.create(cfg, seed=11, dtype=np.float64)
        out = model.forward_full(batch)
        assert out.attention_cr.shape == (3, 1, 16, 16)
        # nearest-neighbour attention is piecewise constant over 4x4 cells
        att = out.attention_cr.data
        cell = att[:, :, 0:4, 0:4]
        assert np.allclose(cell, cell[:, :, :1, :1])

    def test_odd_channel_split_rejected(self, small_model, rng):
        feat = dc.Tensor(rng.random((1, 3, 4, 4)))
        with pytest.raises(OddChannelCount):
            small_model.make_attention(feat, "cracking", 16)


class TestLosses:
    def _scores(self):
        scores = np.array([[4.0, 3.0, 0.0, 1.0, 3.0],
                           [np.nan] * 5,
                           [2.0, 2.0, 2.0, 2.0, 2.0]])
        return scores, np.isfinite(scores)

    def test_loss_keys_and_nonnegativity(self, small_model, batch):
        scores, mask = self._scores()
        out = small_model.forward_full(batch)
        terms = small_model.losses(out, scores, mask, batch)
        assert set(terms) == {"L_S_p", "L_U_p", "L_p", "L_S_cr", "L_U_cr",
                              "L_cr", "L_S_co", "L_U_co", "L_co", "L_f"}
        for key, term in terms.items():
            assert term.item() >= 0.0, key

    def test_primary_loss_decomposition(self, small_model, batch):
        scores, mask = self._scores()
        out = small_model.forward_full(batch)
        terms = small_model.losses(out, scores, mask, batch)
        total = terms["L_S_p"].item() + terms["L_U_p"].item()
        assert terms["L_p"].item() == pytest.approx(total, rel=1e-6)

    def test_fully_masked_supervised_terms_vanish(self, small_model, batch):
        scores = np.full((3, 5), np.nan)
        mask = np.zeros((3, 5), dtype=bool)
        out = small_model.forward_full(batch)
        terms = small_model.losses(out, scores, mask, batch)
        assert terms["L_S_p"].item() == 0.0
        assert terms["L_f"].item() == 0.0
        assert terms["L_U_p"].item() > 0.0

    def test_branch_losses_stay_in_their_branch(self, small_model, batch):
        scores, mask = self._scores()
        out = small_model.forward_full(batch)
        terms = small_model.losses(out, scores, mask, batch)
        dc.backward(terms["L_U_cr"])
        # the cracking reconstruction reaches its own decoder (and, through
        # the attention-weighted input, the primary trunk), but never the
        # contamination branch or the fusion head
        assert small_model.params.tensor("cracking.decoder.conv.w").grad is not None
        assert small_model.params.tensor("contamination.decoder.conv.w").grad is None
        assert small_model.params.tensor("fusion.classifier.fc1.w").grad is None
        small_model.params.zero_grad()

    def test_reconstruction_target_is_constant(self, small_model, batch):
        """The unsupervised primary loss compares against the raw input; its
        gradient must flow only through the decoder side."""
        out = small_model.forward_full(batch)
        scores = np.full((3, 5), np.nan)
        terms = small_model.losses(out, scores, np.zeros((3, 5), bool), batch)
        dc.backward(terms["L_U_p"])
        assert small_model.params.tensor("primary.decoder.conv.w").grad is not None
        # classifier heads are not on the reconstruction path
        assert small_model.params.tensor("primary.classifier.fc1.w").grad is None
        small_model.params.zero_grad()


class TestInference:
    def test_predict_scores_shapes_and_archs(self, small_model, rng):
        images = rng.random((4, 1, 16, 16))
        full = small_model.predict_scores(images, arch="full_xcryonet")
        prim = small_model.predict_scores(images, arch="primary_only")
        assert full.shape == (4, 5) and prim.shape == (4, 5)
        assert np.all(np.isfinite(full)) and np.all(np.isfinite(prim))
        assert not np.allclose(full, prim)

    def test_predict_scores_builds_no_graph(self, small_model, rng):
        small_model.params.zero_grad()
        small_model.predict_scores(rng.random((2, 1, 16, 16)))
        assert all(t.grad is None for _, t, _ in small_model.params.items())

    def test_unknown_arch_rejected(self, small_model, rng):
        with pytest.raises(ValueError):
            small_model.predict_scores(rng.random((1, 1, 16, 16)), arch="hybrid")

    def test_attention_maps_keys_and_shapes(self, small_model, rng):
        maps = small_model.attention_maps(rng.random((2, 1, 16, 16)))
        assert set(maps) == set(ATTENTION_ATTRIBUTES)
        for arr in maps.values():
            assert arr.shape == (2, 1, 16, 16)
            assert np.all((arr > 0) & (arr < 1))


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, rng):
        model = XCryoNet.create(SMALL, seed=21, dtype=np.float32)
        images = rng.random((2, 1, 16, 16)).astype(np.float32)
        before = model.predict_scores(images)
        path = tmp_path / "model.xcn"
        model.save(path, extra_meta={"note": "check"})
        loaded, meta = XCryoNet.load(path)
        assert meta["note"] == "check"
        assert loaded.config == SMALL
        after = loaded.predict_scores(images)
        np.testing.assert_array_equal(before, after)

    def test_load_as_float64(self, tmp_path):
        model = XCryoNet.create(SMALL, seed=21, dtype=np.float32)
        path = tmp_path / "model.xcn"
        model.save(path)
        loaded, _ = XCryoNet.load(path, dtype=np.float64)
        assert loaded.params.tensor("primary.feature.conv0.w").dtype == np.float64


class TestComposedGradients:
    def test_full_network_loss_matches_finite_differences(self, rng):
        """Reverse-mode gradients of a loss touching every branch agree with
        central finite differences for every single parameter (64-bit)."""
        model = XCryoNet.create(SMALL, seed=42, dtype=np.float64)
        dither_params(model, scale=0.05, seed=99)
        img = dc.Tensor(rng.random((2, 1, 16, 16)))
        scores = np.array([[3.0, 2.0, 1.0, 0.0, 2.0], [np.nan] * 5])
        mask = np.isfinite(scores)
        worst, checked = model_param_gradcheck(
            model, lambda: composed_loss(model, img, scores, mask),
            h=1e-5, rel=1e-4)
        assert checked == sum(t.data.size for _, t, _ in model.params.items())
        assert worst <= 1e-4
