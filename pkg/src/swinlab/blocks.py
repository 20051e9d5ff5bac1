"""Transformer blocks with pluggable normalization placement, patch embedding
and merging, and full hierarchical model assembly.

Four normalization placements are implemented around the same two residual
branches (windowed attention, then a GELU MLP):

* ``pre``      x = x + Attn(LN(x));          x = x + MLP(LN(x))
* ``post``     x = LN(x + Attn(x));          x = LN(x + MLP(x))
* ``sandwich`` x = x + LN(Attn(LN(x)));      x = x + LN(MLP(LN(x)))
* ``res_post`` x = x + LN(Attn(x));          x = x + LN(MLP(x))

``res_post`` normalizes each branch output before it merges back into the
main path, which keeps per-block amplitudes flat as depth grows; the
``signal_propagation`` helper measures exactly that.

Parameter bookkeeping is manifest-driven: ``parameter_manifest`` yields every
(name, shape, init) the model owns, ``build_model`` allocates precisely that
list, and ``count_params`` sums it, so the analytic count equals the
allocated count by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, AttentionWeights, attend_cosine,
                        attend_dot, attend_sequential)
from .bias import CPBNet, ParamTable, cpb_bias, param_bias
from .errors import ConfigError, GeometryError, NumericsError, ShapeError, UsageError
from .geometry import (cyclic_shift, relative_index, shift_attention_mask,
                       window_partition, window_reverse)
from .tensor import Tensor, checkpoint_segment

NORM_VARIANTS = ("pre", "post", "sandwich", "res_post")
BIAS_KINDS = ("table", "lin_cpb", "log_cpb")
INIT_SCHEMES = ("trunc02", "fan")


# ---------------------------------------------------------------------------
# Configs

@dataclass(frozen=True)
class BlockConfig:
    norm_variant: str
    attn: AttentionConfig
    window: int
    shift: int = 0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"unknown norm variant '{self.norm_variant}'")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift {self.shift} outside [0, {self.window})")


@dataclass(frozen=True)
class ModelConfig:
    C: int
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    window: int
    num_classes: int
    img_size: int
    in_chans: int = 3
    patch: int = 4
    mlp_ratio: float = 4.0
    norm_variant: str = "res_post"
    attn_variant: str = "cosine"
    bias_kind: str = "log_cpb"
    cpb_hidden: int = 64
    cpb_normalize: str = "train_window"
    extra_ln_period: int | None = None
    extra_ln_scope: str = "global"
    tau_init: float = 1.0
    tau_min: float = 0.01
    init_scheme: str = "trunc02"
    init_std: float = 0.02
    init_gain: float = 1.0
    # Per-stage window sizes the bias providers were trained at.  None means
    # "this model's own effective windows" (fresh training); a transferred
    # model keeps its source anchors so CPB coordinates stay normalized by
    # the original training range.
    bias_anchor: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("exactly 4 stages are required")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"unknown norm variant '{self.norm_variant}'")
        if self.bias_kind not in BIAS_KINDS:
            raise ConfigError(f"unknown bias kind '{self.bias_kind}'")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme '{self.init_scheme}'")
        if self.extra_ln_period is not None and self.extra_ln_period != 6:
            raise ConfigError("extra_ln_period, when set, must equal 6")
        if self.extra_ln_scope not in ("global", "stage"):
            raise ConfigError(f"unknown extra_ln_scope '{self.extra_ln_scope}'")
        if self.img_size % self.patch:
            raise ConfigError(
                f"img_size {self.img_size} not divisible by patch {self.patch}"
            )
        r = self.img_size // self.patch
        for s in range(4):
            D = self.C * (2 ** s)
            if D % self.heads[s]:
                raise ConfigError(
                    f"stage {s} dim {D} not divisible by heads {self.heads[s]}"
                )
            if s < 3 and r % 2:
                raise ConfigError(f"stage {s} feature size {r} must be even to merge")
            r //= 2
        if self.bias_kind != "table" and self.cpb_normalize == "train_window":
            for s in range(4):
                if self.stage_anchor(s) < 2:
                    raise ConfigError(
                        f"stage {s} window {self.stage_anchor(s)} is too small to "
                        "normalize relative coordinates; use a larger image, "
                        "table bias, or cpb_normalize='none'"
                    )

    # -- derived geometry ---------------------------------------------------
    def stage_dim(self, s: int) -> int:
        return self.C * (2 ** s)

    def stage_feature(self, s: int) -> int:
        return (self.img_size // self.patch) // (2 ** s)

    def stage_window(self, s: int) -> int:
        # A window larger than the feature map collapses to one full-map window.
        return min(self.window, self.stage_feature(s))

    def stage_shift(self, s: int) -> int:
        f, M = self.stage_feature(s), self.stage_window(s)
        return M // 2 if f > M else 0

    def stage_anchor(self, s: int) -> int:
        if self.bias_anchor is not None:
            return self.bias_anchor[s]
        return self.stage_window(s)

    def total_blocks(self) -> int:
        return sum(self.depths)

    def spacing(self) -> str:
        return "linear" if self.bias_kind == "lin_cpb" else "log"


MODEL_PRESETS: dict[str, dict] = {
    # Desk-scale config; everything in the test suite runs on this.
    "desk-T": dict(C=32, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8), window=4,
                   num_classes=8, img_size=64, cpb_hidden=64),
    "T": dict(C=96, depths=(2, 2, 6, 2), heads=(3, 6, 12, 24), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512),
    "S": dict(C=96, depths=(2, 2, 18, 2), heads=(3, 6, 12, 24), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512),
    "B": dict(C=128, depths=(2, 2, 18, 2), heads=(4, 8, 16, 32), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512),
    "L": dict(C=192, depths=(2, 2, 18, 2), heads=(6, 12, 24, 48), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512),
    "H": dict(C=352, depths=(2, 2, 18, 2), heads=(11, 22, 44, 88), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512,
              extra_ln_period=6),
    "G": dict(C=512, depths=(2, 2, 42, 4), heads=(16, 32, 64, 128), window=8,
              num_classes=1000, img_size=256, cpb_hidden=512,
              extra_ln_period=6),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset '{name}'")
    kw = dict(MODEL_PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# Parameter manifest

def _norm_names(variant: str) -> tuple[str, ...]:
    if variant == "sandwich":
        return ("norm1a", "norm1b", "norm2a", "norm2b")
    return ("norm1", "norm2")


def parameter_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], tuple]]:
    """Every parameter the model owns: (name, shape, init spec), in order.

    Init specs: ("proj", fan_in) projection matrices resolved by the config's
    init scheme; ("trunc", std); ("kaiming", fan_in); ("zeros",); ("ones",);
    ("const", v).
    """
    out: list[tuple[str, tuple[int, ...], tuple]] = []

    def w(name, shape, init):
        out.append((name, tuple(int(x) for x in shape), init))

    pp = cfg.patch * cfg.patch * cfg.in_chans
    w("embed.proj.w", (pp, cfg.C), ("proj", pp))
    w("embed.proj.b", (cfg.C,), ("zeros",))
    w("embed.norm.g", (cfg.C,), ("ones",))
    w("embed.norm.b", (cfg.C,), ("zeros",))

    g = 0
    for s in range(4):
        D = cfg.stage_dim(s)
        H = cfg.heads[s]
        d = D // H
        Ms = cfg.stage_window(s)
        hid = int(D * cfg.mlp_ratio)
        for b in range(cfg.depths[s]):
            p = f"stage{s}.block{b}."
            for nn in _norm_names(cfg.norm_variant):
                w(p + nn + ".g", (D,), ("ones",))
                w(p + nn + ".b", (D,), ("zeros",))
            w(p + "attn.qkv.w", (D, 3 * H * d), ("proj", D))
            w(p + "attn.qkv.b", (3 * H * d,), ("zeros",))
            w(p + "attn.proj.w", (H * d, D), ("proj", H * d))
            w(p + "attn.proj.b", (D,), ("zeros",))
            if cfg.attn_variant == "cosine":
                w(p + "attn.tau", (H,), ("const", cfg.tau_init))
            if cfg.bias_kind == "table":
                w(p + "bias.table", ((2 * Ms - 1) ** 2, H), ("trunc", 0.02))
            else:
                w(p + "bias.w1", (2, cfg.cpb_hidden), ("kaiming", 2))
                w(p + "bias.b1", (cfg.cpb_hidden,), ("zeros",))
                w(p + "bias.w2", (cfg.cpb_hidden, H), ("kaiming", cfg.cpb_hidden))
                w(p + "bias.b2", (H,), ("zeros",))
            w(p + "mlp.fc1.w", (D, hid), ("proj", D))
            w(p + "mlp.fc1.b", (hid,), ("zeros",))
            w(p + "mlp.fc2.w", (hid, D), ("proj", hid))
            w(p + "mlp.fc2.b", (D,), ("zeros",))
            g += 1
            if cfg.extra_ln_period:
                count = g if cfg.extra_ln_scope == "global" else b + 1
                if count % cfg.extra_ln_period == 0:
                    w(f"stage{s}.extra_ln{b}.g", (D,), ("ones",))
                    w(f"stage{s}.extra_ln{b}.b", (D,), ("zeros",))
        if s < 3:
            w(f"merge{s}.norm.g", (4 * D,), ("ones",))
            w(f"merge{s}.norm.b", (4 * D,), ("zeros",))
            w(f"merge{s}.reduce.w", (4 * D, 2 * D), ("proj", 4 * D))

    Cl = cfg.stage_dim(3)
    w("head.norm.g", (Cl,), ("ones",))
    w("head.norm.b", (Cl,), ("zeros",))
    w("head.fc.w", (Cl, cfg.num_classes), ("proj", Cl))
    w("head.fc.b", (cfg.num_classes,), ("zeros",))
    return out


def count_params(cfg: ModelConfig) -> int:
    """Analytic parameter count from shapes alone; no allocation."""
    return sum(math.prod(shape) for _, shape, _ in parameter_manifest(cfg))


def _materialize(init: tuple, shape: tuple[int, ...], cfg: ModelConfig,
                 rng: np.random.Generator) -> np.ndarray:
    kind = init[0]
    if kind == "proj":
        fan = init[1]
        if cfg.init_scheme == "trunc02":
            return T.trunc_normal(rng, shape, std=cfg.init_std)
        return T.trunc_normal(rng, shape, std=cfg.init_gain * math.sqrt(2.0 / fan))
    if kind == "trunc":
        return T.trunc_normal(rng, shape, std=init[1])
    if kind == "kaiming":
        return T.kaiming_uniform(rng, shape, fan_in=init[1])
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "const":
        return np.full(shape, float(init[1]))
    raise ConfigError(f"unknown init spec {init!r}")


# ---------------------------------------------------------------------------
# Patch ops

def patch_embed(img: Tensor, proj_w: Tensor, proj_b: Tensor, norm_g: Tensor,
                norm_b: Tensor, patch: int = 4) -> Tensor:
    """[B, h, w, Cin] -> [B, (h/p)(w/p), C]: 4x4 patch projection + LN.

    Pixels inside a patch flatten row-major as (row, col, channel).
    """
    if img.ndim != 4:
        raise GeometryError(f"patch_embed expects [B,h,w,C], got {img.shape}")
    B, h, w, Cin = img.shape
    if h % patch or w % patch:
        raise GeometryError(f"image {h}x{w} not divisible by patch {patch}")
    x = T.reshape(img, (B, h // patch, patch, w // patch, patch, Cin))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, (h // patch) * (w // patch), patch * patch * Cin))
    x = T.add(T.matmul(x, proj_w), proj_b)
    return T.layer_norm(x, norm_g, norm_b)


def patch_merge(x: Tensor, H: int, W: int, norm_g: Tensor, norm_b: Tensor,
                reduce_w: Tensor) -> Tensor:
    """[B, H*W, C] -> [B, (H/2)(W/2), 2C]: concat 2x2 neighbors, LN, project.

    Neighbor concat order is row-major: (0,0), (0,1), (1,0), (1,1).
    """
    if x.ndim != 3 or x.shape[1] != H * W:
        raise GeometryError(f"patch_merge expects [B, {H * W}, C], got {x.shape}")
    if H % 2 or W % 2:
        raise GeometryError(f"patch_merge needs even H, W; got {H}x{W}")
    B, _, C = x.shape
    x = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, (H // 2) * (W // 2), 4 * C))
    x = T.layer_norm(x, norm_g, norm_b)
    return T.matmul(x, reduce_w)


# ---------------------------------------------------------------------------
# Block weights and forward

@dataclass
class BlockWeights:
    attn: AttentionWeights
    mlp_fc1_w: Tensor
    mlp_fc1_b: Tensor
    mlp_fc2_w: Tensor
    mlp_fc2_b: Tensor
    norms: dict[str, tuple[Tensor, Tensor]]
    provider: ParamTable | CPBNet
    anchor: int  # window size the provider's coordinates are normalized by


def _bias_matrix(bw: BlockWeights, M: int) -> Tensor:
    if isinstance(bw.provider, ParamTable):
        return param_bias(bw.provider, relative_index(M))
    return cpb_bias(bw.provider, bw.anchor, M, bw.provider.heads)


def _mlp(x: Tensor, bw: BlockWeights) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, bw.mlp_fc1_w), bw.mlp_fc1_b))
    return T.add(T.matmul(h, bw.mlp_fc2_w), bw.mlp_fc2_b)


def _attn_spatial(x: Tensor, H: int, W: int, cfg: BlockConfig, bw: BlockWeights,
                  mask: Tensor | None, sequential: bool) -> Tensor:
    """Windowed attention over a [B, H*W, C] token grid."""
    B, L, C = x.shape
    M, s = cfg.window, cfg.shift
    x = T.reshape(x, (B, H, W, C))
    Hp = -(-H // M) * M
    Wp = -(-W // M) * M
    if (Hp, Wp) != (H, W):
        x = T.pad_hw(x, Hp - H, Wp - W)
    if s:
        x = cyclic_shift(x, s)
    xw = window_partition(x, M)  # [B*nW, M^2, C]
    Bmat = _bias_matrix(bw, M)
    if mask is not None and B > 1:
        mask = Tensor(np.tile(mask.data, (B, 1, 1)), _checked=True)
    if sequential:
        out = attend_sequential(xw, bw.attn, Bmat, mask, variant=cfg.attn.variant,
                                tau_min=cfg.attn.tau_min)
    elif cfg.attn.variant == "cosine":
        out = attend_cosine(xw, bw.attn, Bmat, mask, tau_min=cfg.attn.tau_min)
    else:
        out = attend_dot(xw, bw.attn, Bmat, mask)
    x = window_reverse(out, M, Hp, Wp)
    if s:
        x = cyclic_shift(x, -s)
    if (Hp, Wp) != (H, W):
        x = T.crop_hw(x, H, W)
    return T.reshape(x, (B, L, C))


def block_forward(x: Tensor, H: int, W: int, cfg: BlockConfig, bw: BlockWeights,
                  mask: Tensor | None = None, sequential: bool = False,
                  label: str = "") -> Tensor:
    """One transformer block under the configured normalization placement."""

    def ln(t: Tensor, name: str) -> Tensor:
        g, b = bw.norms[name]
        return T.layer_norm(t, g, b)

    def attn(t: Tensor) -> Tensor:
        return _attn_spatial(t, H, W, cfg, bw, mask, sequential)

    try:
        v = cfg.norm_variant
        if v == "pre":
            x = T.add(x, attn(ln(x, "norm1")))
            x = T.add(x, _mlp(ln(x, "norm2"), bw))
        elif v == "res_post":
            x = T.add(x, ln(attn(x), "norm1"))
            x = T.add(x, ln(_mlp(x, bw), "norm2"))
        elif v == "post":
            x = ln(T.add(x, attn(x)), "norm1")
            x = ln(T.add(x, _mlp(x, bw)), "norm2")
        elif v == "sandwich":
            x = T.add(x, ln(attn(ln(x, "norm1a")), "norm1b"))
            x = T.add(x, ln(_mlp(ln(x, "norm2a"), bw), "norm2b"))
        else:  # pragma: no cover - validated in BlockConfig
            raise ConfigError(f"unknown norm variant '{v}'")
        return x
    except NumericsError as e:
        raise NumericsError(e.op, f"in block {label or '?'}") from e


# ---------------------------------------------------------------------------
# Signal propagation records

@dataclass
class SPPRecord:
    block: int
    mean_amp: float
    max_amp: float
    flagged: bool = False


# ---------------------------------------------------------------------------
# Model

class Model:
    """A built hierarchical windowed-attention classifier.

    ``params`` is the flat, ordered registry of every weight tensor; the
    structured views used by the forward pass reference the same objects, so
    optimizer updates through ``params`` are visible everywhere.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], seed: int):
        self.cfg = cfg
        self.params = params
        self.seed = seed
        self._mask_cache: dict[tuple, Tensor | None] = {}
        self._assemble()

    # -- assembly -----------------------------------------------------------
    def _pair(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self.params[prefix + ".g"], self.params[prefix + ".b"]

    def _assemble(self) -> None:
        cfg = self.cfg
        P = self.params
        self.block_weights: dict[tuple[int, int], BlockWeights] = {}
        self.block_configs: dict[tuple[int, int], BlockConfig] = {}
        for s in range(4):
            D = cfg.stage_dim(s)
            H = cfg.heads[s]
            d = D // H
            Ms = cfg.stage_window(s)
            for b in range(cfg.depths[s]):
                p = f"stage{s}.block{b}."
                tau = P.get(p + "attn.tau")
                aw = AttentionWeights(
                    heads=H, head_dim=d,
                    qkv_w=P[p + "attn.qkv.w"], qkv_b=P[p + "attn.qkv.b"],
                    proj_w=P[p + "attn.proj.w"], proj_b=P[p + "attn.proj.b"],
                    tau=tau,
                )
                if cfg.bias_kind == "table":
                    provider: ParamTable | CPBNet = ParamTable(
                        table=P[p + "bias.table"], M=Ms)
                else:
                    provider = CPBNet(
                        w1=P[p + "bias.w1"], b1=P[p + "bias.b1"],
                        w2=P[p + "bias.w2"], b2=P[p + "bias.b2"],
                        spacing=cfg.spacing(), normalize=cfg.cpb_normalize)
                norms = {nn: self._pair(p + nn) for nn in _norm_names(cfg.norm_variant)}
                self.block_weights[(s, b)] = BlockWeights(
                    attn=aw,
                    mlp_fc1_w=P[p + "mlp.fc1.w"], mlp_fc1_b=P[p + "mlp.fc1.b"],
                    mlp_fc2_w=P[p + "mlp.fc2.w"], mlp_fc2_b=P[p + "mlp.fc2.b"],
                    norms=norms, provider=provider, anchor=cfg.stage_anchor(s),
                )
                shift = 0 if b % 2 == 0 else cfg.stage_shift(s)
                self.block_configs[(s, b)] = BlockConfig(
                    norm_variant=cfg.norm_variant,
                    attn=AttentionConfig(heads=H, head_dim=d,
                                         variant=cfg.attn_variant,
                                         tau_init=cfg.tau_init,
                                         tau_min=cfg.tau_min),
                    window=Ms, shift=shift, mlp_ratio=cfg.mlp_ratio,
                )

    # -- helpers ------------------------------------------------------------
    def _mask_for(self, s: int, b: int) -> Tensor | None:
        cfg = self.block_configs[(s, b)]
        if cfg.shift == 0:
            return None
        f = self.cfg.stage_feature(s)
        M = cfg.window
        Hp = -(-f // M) * M
        key = (Hp, M, cfg.shift)
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_attention_mask(Hp, Hp, M, cfg.shift)
        return self._mask_cache[key]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise ConfigError(f"checkpoint missing parameter '{k}'")
            if state[k].shape != v.data.shape:
                raise ShapeError(
                    f"parameter '{k}': checkpoint shape {state[k].shape} != model {v.data.shape}"
                )
            v.data[...] = state[k]
        extra = set(state) - set(self.params)
        if extra:
            raise ConfigError(f"checkpoint has unknown parameters: {sorted(extra)[:4]}")

    # -- forward ------------------------------------------------------------
    def _run_block(self, x: Tensor, s: int, b: int, gb: int, sequential: bool,
                   spp: list[SPPRecord] | None) -> Tensor:
        cfg = self.cfg
        f = cfg.stage_feature(s)
        x = block_forward(x, f, f, self.block_configs[(s, b)],
                          self.block_weights[(s, b)], mask=self._mask_for(s, b),
                          sequential=sequential, label=f"stage{s}.block{b}")
        extra = f"stage{s}.extra_ln{b}"
        if extra + ".g" in self.params:
            g, bb = self._pair(extra)
            x = T.layer_norm(x, g, bb)
        if spp is not None:
            a = np.abs(x.data)
            spp.append(SPPRecord(block=gb, mean_amp=float(a.mean()),
                                 max_amp=float(a.max())))
        return x

    def forward(self, img: Tensor, *, segment_size: int | None = None,
                sequential: bool = False,
                spp: list[SPPRecord] | None = None) -> Tensor:
        """Image batch [B, h, w, Cin] -> logits [B, num_classes].

        ``segment_size`` enables activation checkpointing: blocks are grouped
        into segments of that many, each recomputed during backward.  A value
        of None, or one covering the whole depth, runs the plain path with
        identical op counts to no checkpointing at all.
        """
        cfg = self.cfg
        if segment_size is not None and segment_size < 1:
            raise ConfigError(f"segment_size must be >= 1, got {segment_size}")
        use_ckpt = segment_size is not None and segment_size < cfg.total_blocks()
        if use_ckpt and spp is not None:
            raise UsageError("signal propagation capture and checkpointing are exclusive")
        x = patch_embed(img, self.params["embed.proj.w"], self.params["embed.proj.b"],
                        self.params["embed.norm.g"], self.params["embed.norm.b"],
                        patch=cfg.patch)
        gb = 0
        for s in range(4):
            depth = cfg.depths[s]
            if not use_ckpt:
                for b in range(depth):
                    x = self._run_block(x, s, b, gb, sequential, spp)
                    gb += 1
            else:
                b = 0
                while b < depth:
                    seg = list(range(b, min(b + segment_size, depth)))
                    gb0 = gb

                    def seg_fn(t: Tensor, s=s, seg=tuple(seg), gb0=gb0) -> Tensor:
                        for j, bb in enumerate(seg):
                            t = self._run_block(t, s, bb, gb0 + j, sequential, None)
                        return t

                    x = checkpoint_segment(seg_fn, x)
                    b += len(seg)
                    gb += len(seg)
            if s < 3:
                f = cfg.stage_feature(s)
                x = patch_merge(x, f, f, *self._pair(f"merge{s}.norm"),
                                self.params[f"merge{s}.reduce.w"])
        x = T.layer_norm(x, *self._pair("head.norm"))
        pooled = T.reduce_mean(x, axis=1)
        return T.add(T.matmul(pooled, self.params["head.fc.w"]),
                     self.params["head.fc.b"])

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Allocate and initialize every parameter in manifest order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in parameter_manifest(cfg):
        params[name] = Tensor(_materialize(init, shape, cfg, rng), requires_grad=True)
    return Model(cfg, params, seed)


def signal_propagation(model: Model, batch: Tensor) -> list[SPPRecord]:
    """Per-block main-branch amplitude profile; divergence flags, not crashes."""
    records: list[SPPRecord] = []
    total = model.cfg.total_blocks()
    try:
        with T.no_tape():
            model.forward(batch, spp=records)
    except NumericsError:
        for gb in range(len(records), total):
            records.append(SPPRecord(block=gb, mean_amp=float("inf"),
                                     max_amp=float("inf"), flagged=True))
    return records
