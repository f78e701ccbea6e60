"""Multi-branch attention-guided quality scoring network.

One shared topology serves three branches. The primary branch encodes the
input square, predicts the four attribute scores and, from those alone, the
overall score; it also reconstructs its input through a decoder. The first
half of the primary feature channels drives a cracking attention map, the
second half a contamination attention map; each map multiplies the input
square to feed an attribute branch with its own encoder, single-score
classifier and decoder. The fusion branch concatenates all three feature
maps and re-predicts every score.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore.params import ParamStore
from .errors import OddChannelCount, ShapeMismatch

ATTRIBUTES = ("brightness", "squareness", "cracking", "contamination")
ATTENTION_ATTRIBUTES = ("cracking", "contamination")
SCORE_NAMES = ATTRIBUTES + ("overall",)

# Column indices in a 5-wide score array.
IDX = {name: i for i, name in enumerate(SCORE_NAMES)}

HEAD_BIAS = 2.0  # center of the 0..4 score range


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 640
    feature_channels: int = 32
    classifier_hidden: int = 64
    overall_hidden: int = 16
    upsample: str = "bilinear"   # attention map resize; "nearest" for ablation

    def __post_init__(self):
        if self.input_size < 4 or self.input_size % 4 != 0:
            raise ShapeMismatch(f"input_size {self.input_size} must be a positive multiple of 4")
        if self.feature_channels % 2 != 0 or self.feature_channels < 2:
            raise OddChannelCount(
                f"feature_channels {self.feature_channels} must be even and >= 2"
            )
        if self.classifier_hidden < 1 or self.overall_hidden < 1:
            raise ShapeMismatch("hidden sizes must be positive")
        if self.upsample not in ("bilinear", "nearest"):
            raise ValueError(f"upsample must be 'bilinear' or 'nearest', got {self.upsample!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class ForwardOutputs:
    """Everything one full forward pass produces (all entries are Tensors)."""

    primary_feat: object
    primary_attrs: object      # (N, 4)
    primary_overall: object    # (N, 1)
    primary_recon: object      # (N, 1, H, W)
    attention_cr: object       # (N, 1, H, W), open interval (0, 1)
    attention_co: object
    attn_input_cr: object      # attention-weighted input squares
    attn_input_co: object
    attr_feat_cr: object
    attr_feat_co: object
    attr_pred_cr: object       # (N, 1)
    attr_pred_co: object
    attr_recon_cr: object
    attr_recon_co: object
    fusion_attrs: object       # (N, 4)
    fusion_overall: object     # (N, 1)


def _conv_w(rng, fan_out, fan_in, k, dtype):
    scale = np.sqrt(2.0 / (fan_in * k * k))
    return dc.Tensor((rng.standard_normal((fan_out, fan_in, k, k)) * scale).astype(dtype))


def _tconv_w(rng, c_in, c_out, k, dtype):
    scale = np.sqrt(2.0 / (c_in * k * k))
    return dc.Tensor((rng.standard_normal((c_in, c_out, k, k)) * scale).astype(dtype))


def _fc_w(rng, d_in, d_out, dtype):
    scale = np.sqrt(2.0 / d_in)
    return dc.Tensor((rng.standard_normal((d_in, d_out)) * scale).astype(dtype))


def _zeros(shape, dtype):
    return dc.Tensor(np.zeros(shape, dtype=dtype))


def _bias(shape, dtype, value=0.0):
    return dc.Tensor(np.full(shape, value, dtype=dtype))


class XCryoNet:
    """Parameter container plus forward composition rules."""

    def __init__(self, config: ModelConfig, params: ParamStore, dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)

    # ----- construction -------------------------------------------------

    @classmethod
    def create(cls, config: ModelConfig, seed=0, dtype=np.float32) -> "XCryoNet":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dtype = np.dtype(dtype)
        store = ParamStore()
        c = config.feature_channels
        d1 = max(1, c // 2)
        d2 = max(1, c // 4)

        def feature(branch, partition):
            store.add(f"{branch}.feature.conv0.w", _conv_w(rng, c, 1, 3, dtype), partition)
            store.add(f"{branch}.feature.conv0.b", _zeros((c,), dtype), partition)
            for block, first_stride in (("res1", 2), ("res2", 1)):
                store.add(f"{branch}.feature.{block}.conv1.w", _conv_w(rng, c, c, 3, dtype), partition)
                store.add(f"{branch}.feature.{block}.conv1.b", _zeros((c,), dtype), partition)
                store.add(f"{branch}.feature.{block}.conv2.w", _conv_w(rng, c, c, 3, dtype), partition)
                store.add(f"{branch}.feature.{block}.conv2.b", _zeros((c,), dtype), partition)
            store.add("%s.feature.res1.proj.w" % branch, _conv_w(rng, c, c, 1, dtype), partition)
            store.add("%s.feature.res1.proj.b" % branch, _zeros((c,), dtype), partition)

        def decoder(branch, partition):
            store.add(f"{branch}.decoder.tconv1.w", _tconv_w(rng, c, d1, 4, dtype), partition)
            store.add(f"{branch}.decoder.tconv1.b", _zeros((d1,), dtype), partition)
            store.add(f"{branch}.decoder.tconv2.w", _tconv_w(rng, d1, d2, 4, dtype), partition)
            store.add(f"{branch}.decoder.tconv2.b", _zeros((d2,), dtype), partition)
            store.add(f"{branch}.decoder.conv.w", _conv_w(rng, 1, d2, 3, dtype), partition)
            store.add(f"{branch}.decoder.conv.b", _zeros((1,), dtype), partition)

        hidden = config.classifier_hidden
        over_h = config.overall_hidden

        feature("primary", "primary")
        store.add("primary.classifier.fc1.w", _fc_w(rng, c, hidden, dtype), "primary")
        store.add("primary.classifier.fc1.b", _zeros((hidden,), dtype), "primary")
        store.add("primary.classifier.fc2.w", _fc_w(rng, hidden, 4, dtype), "primary")
        store.add("primary.classifier.fc2.b", _bias((4,), dtype, HEAD_BIAS), "primary")
        store.add("primary.overall.fc1.w", _fc_w(rng, 4, over_h, dtype), "primary")
        store.add("primary.overall.fc1.b", _zeros((over_h,), dtype), "primary")
        store.add("primary.overall.fc2.w", _fc_w(rng, over_h, 1, dtype), "primary")
        store.add("primary.overall.fc2.b", _bias((1,), dtype, HEAD_BIAS), "primary")
        decoder("primary", "primary")

        for branch in ATTENTION_ATTRIBUTES:
            feature(branch, branch)
            store.add(f"{branch}.classifier.fc1.w", _fc_w(rng, c, hidden, dtype), branch)
            store.add(f"{branch}.classifier.fc1.b", _zeros((hidden,), dtype), branch)
            store.add(f"{branch}.classifier.fc2.w", _fc_w(rng, hidden, 1, dtype), branch)
            store.add(f"{branch}.classifier.fc2.b", _bias((1,), dtype, HEAD_BIAS), branch)
            decoder(branch, branch)

        store.add("fusion.classifier.fc1.w", _fc_w(rng, 3 * c, hidden, dtype), "fusion")
        store.add("fusion.classifier.fc1.b", _zeros((hidden,), dtype), "fusion")
        store.add("fusion.classifier.fc2.w", _fc_w(rng, hidden, 4, dtype), "fusion")
        store.add("fusion.classifier.fc2.b", _bias((4,), dtype, HEAD_BIAS), "fusion")
        store.add("fusion.overall.fc1.w", _fc_w(rng, 4, over_h, dtype), "fusion")
        store.add("fusion.overall.fc1.b", _zeros((over_h,), dtype), "fusion")
        store.add("fusion.overall.fc2.w", _fc_w(rng, over_h, 1, dtype), "fusion")
        store.add("fusion.overall.fc2.b", _bias((1,), dtype, HEAD_BIAS), "fusion")

        return cls(config, store, dtype)

    def _p(self, name):
        return self.params.tensor(name)

    # ----- forward pieces -----------------------------------------------

    def feature_network(self, img, branch: str = "primary"):
        """(N,1,H,W) -> (N,C,H/4,W/4): strided conv then two residual blocks."""
        if img.ndim != 4 or img.shape[1] != 1:
            raise ShapeMismatch(f"feature_network expects (N,1,H,W), got {img.shape}")
        if img.shape[2] % 4 != 0 or img.shape[3] % 4 != 0:
            raise ShapeMismatch(f"spatial size {img.shape[2:]} must be divisible by 4")
        p = f"{branch}.feature"
        x = dc.conv2d(img, self._p(f"{p}.conv0.w"), stride=2, pad=1)
        x = dc.relu(dc.add(x, self._bias4(f"{p}.conv0.b")))

        # res1 halves the spatial size; the skip is a strided 1x1 projection
        y = dc.conv2d(x, self._p(f"{p}.res1.conv1.w"), stride=2, pad=1)
        y = dc.relu(dc.add(y, self._bias4(f"{p}.res1.conv1.b")))
        y = dc.conv2d(y, self._p(f"{p}.res1.conv2.w"), stride=1, pad=1)
        y = dc.add(y, self._bias4(f"{p}.res1.conv2.b"))
        skip = dc.conv2d(x, self._p(f"{p}.res1.proj.w"), stride=2, pad=0)
        skip = dc.add(skip, self._bias4(f"{p}.res1.proj.b"))
        x = dc.relu(dc.add(y, skip))

        # res2 keeps the size and uses an identity skip
        y = dc.conv2d(x, self._p(f"{p}.res2.conv1.w"), stride=1, pad=1)
        y = dc.relu(dc.add(y, self._bias4(f"{p}.res2.conv1.b")))
        y = dc.conv2d(y, self._p(f"{p}.res2.conv2.w"), stride=1, pad=1)
        y = dc.add(y, self._bias4(f"{p}.res2.conv2.b"))
        return dc.relu(dc.add(y, x))

    def _bias4(self, name):
        t = self._p(name)
        return dc.reshape(t, (1, t.data.shape[0], 1, 1))

    def make_attention(self, feat, attribute: str, out_size: int | None = None):
        """Attention map from one half of the feature channels.

        Cracking reads channels [0, C/2), contamination [C/2, C); the map is
        max-pooled over those channels, bilinearly upsampled to the input
        size and squashed through a sigmoid, so values sit strictly in (0,1).
        """
        c = feat.shape[1]
        if c % 2 != 0:
            raise OddChannelCount(f"feature channels {c} cannot be split in half")
        if attribute not in ATTENTION_ATTRIBUTES:
            raise ValueError(f"no attention branch for {attribute!r}")
        half = c // 2
        crange = (0, half) if attribute == "cracking" else (half, c)
        size = out_size if out_size is not None else feat.shape[2] * 4
        pooled = dc.channel_max_pool(feat, crange)
        resize = dc.upsample_nearest if self.config.upsample == "nearest" else dc.upsample_bilinear
        return dc.sigmoid(resize(pooled, size, size))

    @staticmethod
    def attention_weight(img, attention):
        """Elementwise product of the input square and an attention map."""
        if img.shape != attention.shape:
            raise ShapeMismatch(f"shapes differ: {img.shape} vs {attention.shape}")
        return dc.mul(img, attention)

    def primary_classifier(self, feat):
        """Feature map -> (attrs (N,4), overall (N,1)).

        The overall head sees only the four predicted attribute scores.
        """
        pooled = dc.global_avg_pool(feat)
        h = dc.relu(dc.fully_connected(pooled, self._p("primary.classifier.fc1.w"),
                                       self._p("primary.classifier.fc1.b")))
        attrs = dc.fully_connected(h, self._p("primary.classifier.fc2.w"),
                                   self._p("primary.classifier.fc2.b"))
        overall = self._overall_head(attrs, "primary")
        return attrs, overall

    def _overall_head(self, attrs, branch):
        h = dc.relu(dc.fully_connected(attrs, self._p(f"{branch}.overall.fc1.w"),
                                       self._p(f"{branch}.overall.fc1.b")))
        return dc.fully_connected(h, self._p(f"{branch}.overall.fc2.w"),
                                  self._p(f"{branch}.overall.fc2.b"))

    def attribute_classifier(self, feat, attribute: str):
        pooled = dc.global_avg_pool(feat)
        h = dc.relu(dc.fully_connected(pooled, self._p(f"{attribute}.classifier.fc1.w"),
                                       self._p(f"{attribute}.classifier.fc1.b")))
        return dc.fully_connected(h, self._p(f"{attribute}.classifier.fc2.w"),
                                  self._p(f"{attribute}.classifier.fc2.b"))

    def decode(self, feat, branch: str):
        """Feature map back to a (N,1,H,W) reconstruction in (0,1)."""
        p = f"{branch}.decoder"
        x = dc.transpose_conv2d(feat, self._p(f"{p}.tconv1.w"), stride=2, pad=1)
        x = dc.relu(dc.add(x, self._bias4(f"{p}.tconv1.b")))
        x = dc.transpose_conv2d(x, self._p(f"{p}.tconv2.w"), stride=2, pad=1)
        x = dc.relu(dc.add(x, self._bias4(f"{p}.tconv2.b")))
        x = dc.conv2d(x, self._p(f"{p}.conv.w"), stride=1, pad=1)
        x = dc.add(x, self._bias4(f"{p}.conv.b"))
        return dc.sigmoid(x)

    def attribute_branch(self, attn_img, attribute: str, with_decoder: bool = True):
        """Attention-weighted square -> (pred (N,1), recon, feat)."""
        feat = self.feature_network(attn_img, attribute)
        pred = self.attribute_classifier(feat, attribute)
        recon = self.decode(feat, attribute) if with_decoder else None
        return pred, recon, feat

    def fusion_branch(self, primary_feat, cr_feat, co_feat):
        """Concatenated feature maps -> (attrs (N,4), overall (N,1))."""
        stacked = dc.concat_channels([primary_feat, cr_feat, co_feat])
        pooled = dc.global_avg_pool(stacked)
        h = dc.relu(dc.fully_connected(pooled, self._p("fusion.classifier.fc1.w"),
                                       self._p("fusion.classifier.fc1.b")))
        attrs = dc.fully_connected(h, self._p("fusion.classifier.fc2.w"),
                                   self._p("fusion.classifier.fc2.b"))
        overall = self._overall_head(attrs, "fusion")
        return attrs, overall

    # ----- full passes ----------------------------------------------------

    def forward_primary(self, img):
        feat = self.feature_network(img, "primary")
        attrs, overall = self.primary_classifier(feat)
        recon = self.decode(feat, "primary")
        return feat, attrs, overall, recon

    def forward_full(self, img) -> ForwardOutputs:
        feat, attrs, overall, recon = self.forward_primary(img)
        size = img.shape[2]
        branch = {}
        for attribute in ATTENTION_ATTRIBUTES:
            attn = self.make_attention(feat, attribute, size)
            weighted = self.attention_weight(img, attn)
            pred, arecon, afeat = self.attribute_branch(weighted, attribute)
            branch[attribute] = (attn, weighted, pred, arecon, afeat)
        fusion_attrs, fusion_overall = self.fusion_branch(
            feat, branch["cracking"][4], branch["contamination"][4]
        )
        return ForwardOutputs(
            primary_feat=feat,
            primary_attrs=attrs,
            primary_overall=overall,
            primary_recon=recon,
            attention_cr=branch["cracking"][0],
            attention_co=branch["contamination"][0],
            attn_input_cr=branch["cracking"][1],
            attn_input_co=branch["contamination"][1],
            attr_feat_cr=branch["cracking"][4],
            attr_feat_co=branch["contamination"][4],
            attr_pred_cr=branch["cracking"][2],
            attr_pred_co=branch["contamination"][2],
            attr_recon_cr=branch["cracking"][3],
            attr_recon_co=branch["contamination"][3],
            fusion_attrs=fusion_attrs,
            fusion_overall=fusion_overall,
        )

    # ----- losses ---------------------------------------------------------

    def losses(self, outputs: ForwardOutputs, scores, mask, img) -> dict:
        """All loss terms as scalar tensors.

        scores is (N,5) float, mask (N,5) bool; supervised terms average
        only over present labels and vanish when a column is fully absent.
        Reconstruction targets are constants (no gradient flows into them).
        """
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        y4, m4 = scores[:, :4], mask[:, :4]
        yo, mo = scores[:, 4:5], mask[:, 4:5]

        terms = {}
        terms["L_S_p"] = dc.add(
            dc.masked_mse(outputs.primary_attrs, y4, m4),
            dc.masked_mse(outputs.primary_overall, yo, mo),
        )
        terms["L_U_p"] = dc.mse(outputs.primary_recon, img.detach())
        terms["L_p"] = dc.add(terms["L_S_p"], terms["L_U_p"])

        for attribute, short in (("cracking", "cr"), ("contamination", "co")):
            col = IDX[attribute]
            sup = dc.masked_mse(
                getattr(outputs, f"attr_pred_{short}"),
                scores[:, col : col + 1],
                mask[:, col : col + 1],
            )
            unsup = dc.mse(
                getattr(outputs, f"attr_recon_{short}"),
                getattr(outputs, f"attn_input_{short}").detach(),
            )
            terms[f"L_S_{short}"] = sup
            terms[f"L_U_{short}"] = unsup
            terms[f"L_{short}"] = dc.add(sup, unsup)

        terms["L_f"] = dc.add(
            dc.masked_mse(outputs.fusion_attrs, y4, m4),
            dc.masked_mse(outputs.fusion_overall, yo, mo),
        )
        return terms

    # ----- inference and persistence ---------------------------------------

    def predict_scores(self, images: np.ndarray, arch: str = "full_xcryonet") -> np.ndarray:
        """(N,1,H,W) array -> raw (N,5) score predictions, no clamping."""
        if arch not in ("full_xcryonet", "primary_only"):
            raise ValueError(f"unknown architecture {arch!r}")
        img = dc.Tensor(np.asarray(images, dtype=self.dtype))
        with dc.no_grad():
            if arch == "primary_only":
                _, attrs, overall, _ = self.forward_primary(img)
            else:
                out = self.forward_full(img)
                attrs, overall = out.fusion_attrs, out.fusion_overall
        return np.concatenate([attrs.data, overall.data], axis=1).astype(np.float64)

    def attention_maps(self, images: np.ndarray) -> dict:
        """(N,1,H,W) -> {attribute: (N,1,H,W) attention arrays}."""
        img = dc.Tensor(np.asarray(images, dtype=self.dtype))
        with dc.no_grad():
            feat = self.feature_network(img, "primary")
            return {
                attr: self.make_attention(feat, attr, img.shape[2]).data
                for attr in ATTENTION_ATTRIBUTES
            }

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        self.params.save(path, meta=meta)

    @classmethod
    def load(cls, path, dtype=np.float32) -> tuple:
        """Returns (model, meta) from a checkpoint written by save()."""
        store, meta = ParamStore.load(path, dtype=dtype)
        config = ModelConfig.from_dict(meta.get("model_config", {}))
        return cls(config, store, dtype), meta
