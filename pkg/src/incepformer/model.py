"""IncepFormer model: patch embedding, inception-attention transformer
blocks, the four-stage pyramid encoder and the upsample-concat decoder.

Layout conventions: images are [N, C, H, W]; token sequences are [N, L, C]
with row-major token order.  Blocks take and return sequences; the
normalization layers inside a block run on the image layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .modules import BatchNorm2d, Conv2d, InitCtx, LayerNorm, Module
from .tensor import Tensor, resolve_dtype


class PatchEmbed(Module):
    """Strided projection between stages (x4 into stage 1, x2 afterwards)."""

    def __init__(self, stage_index: int, cin: int, cout: int, mode: str, init: InitCtx, eps: float):
        super().__init__()
        first = stage_index == 1
        if mode == "nonoverlap":
            k, s, p = (4, 4, 0) if first else (2, 2, 0)
        else:
            k, s, p = (7, 4, 3) if first else (3, 2, 1)
        self.stride_factor = s
        self.proj = Conv2d(cin, cout, k, stride=s, padding=p, init=init)
        self.norm = BatchNorm2d(cout, init, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        s = self.stride_factor
        if h % s or w % s:
            raise ShapeError(f"patch embed needs dims divisible by {s}, got {h}x{w}")
        return self.norm(self.proj(x))

    __call__ = forward


class IncepReduce(Module):
    """Three-branch spatial reduction producing the key/value token sequence.

    Branch 1: strip convolutions 1xR then Rx1 (stride R along the strip);
    branch 2: 3x3 depthwise with stride R; branch 3: RxR average pooling
    followed by a 3x3 depthwise.  Outputs are flattened, concatenated along
    the token axis and LayerNormed.  Inputs whose extent is not a multiple
    of R are zero-padded on the bottom/right so every branch yields
    ceil(H/R) x ceil(W/R) positions.
    """

    def __init__(self, channels: int, reduction: int, init: InitCtx, eps: float, bypass: bool = False):
        super().__init__()
        if reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {reduction}")
        self.reduction = reduction
        self.bypass = bypass
        if not bypass:
            r = reduction
            self.dw_1xr = Conv2d(channels, channels, (1, r), stride=(1, r), groups=channels, init=init)
            self.dw_rx1 = Conv2d(channels, channels, (r, 1), stride=(r, 1), groups=channels, init=init)
            self.dw_3x3_b2 = Conv2d(channels, channels, 3, stride=(r, r), padding=1, groups=channels, init=init)
            self.dw_3x3_b3 = Conv2d(channels, channels, 3, stride=1, padding=1, groups=channels, init=init)
        self.ln = LayerNorm(channels, init, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        r = self.reduction
        if h < r or w < r:
            raise ShapeError(f"input {h}x{w} smaller than reduction ratio {r}")
        if self.bypass:
            return self.ln(T.img2seq(x))
        ch, cw = -(-h // r), -(-w // r)
        xpad = x
        if ch * r != h or cw * r != w:
            xpad = T.pad2d(x, (0, ch * r - h, 0, cw * r - w))
        b1 = self.dw_rx1(self.dw_1xr(xpad))
        b2 = self.dw_3x3_b2(x)
        b3 = self.dw_3x3_b3(T.avg_pool2d(xpad, r, r))
        o = T.concat([T.img2seq(b1), T.img2seq(b2), T.img2seq(b3)], axis=1)
        return self.ln(o)

    __call__ = forward


class IncepMHSA(Module):
    """Multi-head attention with queries from the input tokens and keys/values
    from the reduced token sequence."""

    def __init__(self, channels: int, heads: int, reduction: int, init: InitCtx,
                 eps: float, bypass_r1: bool = False):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels ({channels}) not divisible by heads ({heads})")
        self.heads = heads
        self.head_dim = channels // heads
        self.channels = channels
        self.reduce = IncepReduce(channels, reduction, init, eps,
                                  bypass=bypass_r1 and reduction == 1)
        bias = init.with_bias
        self.wq = init.linear_weight(channels, channels)
        self.wk = init.linear_weight(channels, channels)
        self.wv = init.linear_weight(channels, channels)
        self.wo = init.linear_weight(channels, channels)
        for nm in ("bq", "bk", "bv", "bo"):
            if bias:
                setattr(self, nm, init.zeros(channels))
            else:
                object.__setattr__(self, nm, None)

    def attend(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        """Scaled dot-product attention from query tokens onto key/value
        tokens, including the head split and output projection."""
        n, l, c = q_tokens.shape
        q = T.linear(q_tokens, self.wq, self.bq)
        k = T.linear(kv_tokens, self.wk, self.bk)
        v = T.linear(kv_tokens, self.wv, self.bv)
        lk = k.shape[1]
        hd, dk = self.heads, self.head_dim
        qh = T.transpose(T.reshape(q, (n, l, hd, dk)), (0, 2, 1, 3))
        kt = T.transpose(T.reshape(k, (n, lk, hd, dk)), (0, 2, 3, 1))
        vh = T.transpose(T.reshape(v, (n, lk, hd, dk)), (0, 2, 1, 3))
        scores = T.scale(T.matmul_batched(qh, kt), 1.0 / math.sqrt(dk))
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul_batched(weights, vh)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, l, c))
        return T.linear(merged, self.wo, self.bo)

    def forward(self, x_seq: Tensor, h: int, w: int) -> Tensor:
        if x_seq.shape[1] != h * w:
            raise ShapeError(f"token count {x_seq.shape[1]} != {h}x{w}")
        o = self.reduce(T.seq2img(x_seq, h, w))
        return self.attend(x_seq, o)

    __call__ = forward


class EFFN(Module):
    """Feed-forward block on the image layout:
    BN -> 1x1 conv (C -> ratio*C) -> 3x3 depthwise -> GELU -> 1x1 conv -> + input."""

    def __init__(self, channels: int, ratio: int, init: InitCtx, eps: float):
        super().__init__()
        hidden = channels * ratio
        self.bn = BatchNorm2d(channels, init, eps=eps)
        self.fc1 = Conv2d(channels, hidden, 1, init=init)
        self.dw = Conv2d(hidden, hidden, 3, stride=1, padding=1, groups=hidden, init=init)
        self.fc2 = Conv2d(hidden, channels, 1, init=init)

    def forward(self, x_seq: Tensor, h: int, w: int) -> Tensor:
        xin = T.seq2img(x_seq, h, w)
        y = self.fc2(T.gelu(self.dw(self.fc1(self.bn(xin)))))
        return T.img2seq(T.add(y, xin))

    __call__ = forward


class IPTBlock(Module):
    """Inception transformer block: BN -> attention -> residual, then the
    E-FFN sub-block (which owns the second BN and residual)."""

    def __init__(self, channels: int, heads: int, reduction: int, ratio: int,
                 init: InitCtx, eps: float, bypass_r1: bool = False):
        super().__init__()
        self.bn1 = BatchNorm2d(channels, init, eps=eps)
        self.attn = IncepMHSA(channels, heads, reduction, init, eps, bypass_r1)
        self.ffn = EFFN(channels, ratio, init, eps)

    def forward(self, x_seq: Tensor, h: int, w: int) -> Tensor:
        xn = T.img2seq(self.bn1(T.seq2img(x_seq, h, w)))
        x_att = T.add(x_seq, self.attn(xn, h, w))
        return self.ffn(x_att, h, w)

    __call__ = forward


class Stage(Module):
    def __init__(self, index: int, cin: int, cfg: ModelConfig, init: InitCtx):
        super().__init__()
        sc = cfg.stages[index - 1]
        self.patch = PatchEmbed(index, cin, sc.channels, cfg.patch_mode, init, cfg.norm_eps)
        self.depth = sc.depth
        for j in range(sc.depth):
            setattr(self, f"block{j}",
                    IPTBlock(sc.channels, sc.heads, sc.reduction, sc.ffn_ratio,
                             init, cfg.norm_eps, cfg.bypass_reduce_r1))

    def forward(self, x_img: Tensor) -> Tensor:
        x = self.patch(x_img)
        _, _, h, w = x.shape
        seq = T.img2seq(x)
        for j in range(self.depth):
            seq = getattr(self, f"block{j}")(seq, h, w)
        return T.seq2img(seq, h, w)

    __call__ = forward


@dataclass
class FeaturePyramid:
    """Encoder outputs at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


class Decoder(Module):
    """Upsample every pyramid level to 1/4 resolution, concatenate along
    channels, then two 1x1 convolutions down to class logits."""

    def __init__(self, cfg: ModelConfig, init: InitCtx):
        super().__init__()
        self.fuse = Conv2d(cfg.concat_channels, cfg.decoder_channels, 1, init=init)
        self.classify = Conv2d(cfg.decoder_channels, cfg.num_classes, 1, init=init)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        feats = pyr.as_list()
        h4, w4 = feats[0].shape[2], feats[0].shape[3]
        for i, f in enumerate(feats[1:], start=2):
            expect = (h4 // 2 ** (i - 1), w4 // 2 ** (i - 1))
            if (f.shape[2], f.shape[3]) != expect:
                raise ShapeError(
                    f"pyramid level {i} has spatial {f.shape[2:]}, expected {expect}"
                )
        ups = [T.bilinear_upsample(f, h4, w4, align_corners=False) for f in feats]
        fused = self.fuse(T.concat(ups, axis=1))
        return self.classify(fused)

    __call__ = forward


class IncepFormer(Module):
    """Four-stage pyramid encoder plus the upsample-concat decoder."""

    def __init__(self, cfg: ModelConfig, init: InitCtx):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        cin = 3
        for i in range(1, 5):
            setattr(self, f"stage{i}", Stage(i, cin, cfg, init))
            cin = cfg.stages[i - 1].channels
        self.decoder = Decoder(cfg, init)

    def encode(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, H, W] image, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 32 or w % 32:
            raise ShapeError(f"input dims must be divisible by 32, got {h}x{w}")
        feats = []
        x = image
        for i in range(1, 5):
            x = getattr(self, f"stage{i}")(x)
            feats.append(x)
        return FeaturePyramid(*feats)

    def forward(self, image: Tensor) -> Tensor:
        return self.decoder(self.encode(image))

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0, dtype="f32") -> IncepFormer:
    """Construct a model with deterministic, seed-derived initialization."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A2B]))
    init = InitCtx(rng=rng, dtype=resolve_dtype(dtype), with_bias=cfg.with_bias)
    return IncepFormer(cfg, init)


def freeze_batchnorm_stats(model: Module):
    """Stop BatchNorm layers from updating running statistics.

    Used by gradient checking so repeated forward passes stay pure.
    """
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            object.__setattr__(m, "track_running", False)
