"""Command-line interface.

Subcommands::

    train        fit a model on the synthetic task, write report + checkpoint
    transfer     move a trained model to a new window size, report accuracy
    spp          per-block activation-amplitude profile for norm variants
    bias-export  dump learned position-bias tables as CSV
    check        run the built-in property suites

Exit codes: 0 success, 1 configuration/usage error, 2 training divergence,
3 property-check failure.  Every artifact directory receives a ``meta.cfg``
echo of the fully-resolved configuration that produced it.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Any, Sequence

import numpy as np

from . import attention, config as C, data as data_mod, tensor as T
from .bias import ParamTable, extrapolation_ratio, precompute_bias
from .blocks import (
    MODEL_PRESETS,
    Model,
    ModelConfig,
    build_model,
    count_params,
    preset_config,
    signal_propagation,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError, SwinlabError
from .geometry import relative_index
from .train import TrainConfig, accuracy, train, transfer_window

__all__ = ["main"]

# Parameter-count targets for the three largest published configurations,
# checked by `swinlab check --only param-count`.
PARAM_TARGETS = (("B", 88_000_000, 0.03), ("L", 197_000_000, 0.03), ("G", 3_000_000_000, 0.05))


# ---------------------------------------------------------------------------
# Argument handling

class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1).

    The default argparse behaviour exits with status 2, which this tool
    reserves for training divergence.
    """

    def error(self, message: str):  # noqa: D401 - argparse signature
        raise ConfigError(f"{self.prog}: {message}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--model", choices=["desk-T", "T", "S", "B", "L", "H", "G"])
    p.add_argument("--norm", help="normalization placement(s); spp accepts a comma list")
    p.add_argument("--attn", choices=["dot", "cosine"])
    p.add_argument("--bias", choices=["table", "lin_cpb", "log_cpb"])
    p.add_argument("--window", type=int)
    p.add_argument("--depth", type=int, help="total block count; extra blocks go to stage 2")
    p.add_argument("--img-size", type=int, dest="img_size")
    p.add_argument("--seed", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--warmup-frac", type=float, dest="warmup_frac")
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--train-n", type=int, dest="train_n")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--init", choices=["trunc02", "fan"])
    p.add_argument("--init-gain", type=float, dest="init_gain")
    p.add_argument("--segment-size", type=int, dest="segment_size")
    p.add_argument("--sequential", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="swinlab", description=__doc__,
                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the synthetic blob-position task")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="artifact directory")

    p = sub.add_parser("transfer", help="evaluate a checkpoint at a new window size")
    p.add_argument("--ckpt", required=True, help="checkpoint file from `train`")
    p.add_argument("--target-window", type=int, required=True, dest="target_window")
    p.add_argument("--finetune-steps", type=int, dest="finetune_steps")
    p.add_argument("--eval-n", type=int, dest="eval_n",
                   help="held-out set size per resolution; 0 skips accuracy")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="artifact directory (metrics CSV)")

    p = sub.add_parser("spp", help="signal-propagation profile per block")
    _add_model_flags(p)
    p.add_argument("--ckpt", help="profile a trained model instead of a fresh one")
    p.add_argument("--init", choices=["random"],
                   help="profile freshly-initialized weights (default when no --ckpt)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bias-export", help="dump position-bias tables as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--block", type=int, help="global block index; default all")
    p.add_argument("--head", type=int, help="head index; default all")
    p.add_argument("--out", required=True)

    p = sub.add_parser("check", help="run built-in property suites")
    p.add_argument("--only", help="run a single named suite")
    p.add_argument("--inject-fault", choices=["tau-floor"], dest="inject_fault",
                   help="negative control: deliberately break an invariant")
    p.add_argument("--seed", type=int)
    return top


def _resolved_from_args(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    """Merge config file (if given) with the subset of flags in ``keys``."""
    file_cfg = C.load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k, None) for k in keys}
    return C.resolve(file_cfg, overrides)


# ---------------------------------------------------------------------------
# Model construction from resolved configuration

_MODEL_KEYS = ("model", "norm", "attn", "bias", "window", "depth", "img_size",
               "cpb_hidden", "cpb_normalize", "init", "init_gain", "tau_init",
               "tau_min", "extra_ln_period", "extra_ln_scope", "seed")
_TRAIN_KEYS = ("steps", "batch_size", "lr", "weight_decay", "warmup_frac",
               "clip_norm", "train_n", "noise_std", "segment_size", "sequential")


def config_to_model(resolved: dict[str, Any]) -> ModelConfig:
    """Build a ModelConfig from resolved keys, starting from the named preset."""
    name = resolved.get("model", "desk-T")
    over: dict[str, Any] = {}
    mapping = {"norm": "norm_variant", "attn": "attn_variant", "bias": "bias_kind",
               "window": "window", "img_size": "img_size", "cpb_hidden": "cpb_hidden",
               "cpb_normalize": "cpb_normalize", "init": "init_scheme",
               "init_gain": "init_gain", "tau_init": "tau_init", "tau_min": "tau_min",
               "extra_ln_period": "extra_ln_period", "extra_ln_scope": "extra_ln_scope"}
    for key, attr in mapping.items():
        if key in resolved:
            over[attr] = resolved[key]
    if "depth" in resolved:
        n = resolved["depth"]
        if n < 1:
            raise ConfigError(f"depth must be >= 1, got {n}")
        base = MODEL_PRESETS[name]["depths"]
        rest = base[0] + base[1] + base[3]
        if n >= rest + 1:
            over["depths"] = (base[0], base[1], n - rest, base[3])
        else:
            # Degenerate shallow model: one block per stage from the front,
            # later stages empty (merges still run, so the head dim is fixed).
            over["depths"] = tuple(1 if s < n else 0 for s in range(4))
    try:
        return preset_config(name, **over)
    except SwinlabError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _effective_config(resolved: dict[str, Any], cfg: ModelConfig,
                      tc: TrainConfig | None, extra: dict[str, Any] | None = None,
                      ) -> dict[str, Any]:
    """The complete configuration a run actually used, defaults filled in."""
    out: dict[str, Any] = {
        "model": resolved.get("model", "desk-T"),
        "norm": cfg.norm_variant,
        "attn": cfg.attn_variant,
        "bias": cfg.bias_kind,
        "window": cfg.window,
        "img_size": cfg.img_size,
        "cpb_hidden": cfg.cpb_hidden,
        "cpb_normalize": cfg.cpb_normalize,
        "init": cfg.init_scheme,
        "init_gain": cfg.init_gain,
        "tau_init": cfg.tau_init,
        "tau_min": cfg.tau_min,
        "seed": resolved.get("seed", 0),
    }
    if "depth" in resolved:
        out["depth"] = resolved["depth"]
    if cfg.extra_ln_period is not None:
        out["extra_ln_period"] = cfg.extra_ln_period
        out["extra_ln_scope"] = cfg.extra_ln_scope
    if tc is not None:
        out.update({
            "steps": tc.steps, "batch_size": tc.batch_size, "lr": tc.lr,
            "weight_decay": tc.weight_decay, "warmup_frac": tc.warmup_frac,
            "clip_norm": tc.clip_norm, "segment_size": tc.segment_size,
            "sequential": tc.sequential,
            "train_n": resolved.get("train_n", 512),
            "noise_std": resolved.get("noise_std", 0.25),
        })
    if extra:
        out.update(extra)
    return out


def _train_config(resolved: dict[str, Any]) -> TrainConfig:
    kw = {}
    for key in ("steps", "batch_size", "lr", "weight_decay", "warmup_frac",
                "clip_norm", "seed", "segment_size", "sequential"):
        if key in resolved:
            kw[key] = resolved[key]
    return TrainConfig(**kw)


def _write_artifacts(out_dir: str, files: dict[str, str], meta: dict[str, Any]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text)
    with open(os.path.join(out_dir, "meta.cfg"), "w", encoding="utf-8") as fh:
        fh.write(C.render_config(meta))


def model_from_ckpt(ckpt_path: str) -> tuple[Model, dict[str, Any]]:
    """Rebuild a model from a checkpoint file plus its sibling meta.cfg."""
    if not os.path.isfile(ckpt_path):
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    meta_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "meta.cfg")
    if not os.path.isfile(meta_path):
        raise ConfigError(f"no meta.cfg next to checkpoint: {meta_path}")
    resolved = C.resolve(C.load_config_file(meta_path), {})
    cfg = config_to_model(resolved)
    model = build_model(cfg, seed=resolved.get("seed", 0))
    model.load_state_arrays(load_checkpoint(ckpt_path))
    return model, resolved


# ---------------------------------------------------------------------------
# Commands

def cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolved_from_args(args, _MODEL_KEYS + _TRAIN_KEYS)
    cfg = config_to_model(resolved)
    tc = _train_config(resolved)
    seed = resolved.get("seed", 0)
    model = build_model(cfg, seed=seed)
    images, labels = data_mod.make_dataset(
        resolved.get("train_n", 512), cfg.img_size, seed=1000 + seed,
        noise_std=resolved.get("noise_std", 0.25))
    report, _ = train(model, images, labels, tc)
    meta = _effective_config(resolved, cfg, tc)
    _write_artifacts(args.out, {"report.csv": report.to_csv()}, meta)
    save_checkpoint(os.path.join(args.out, "model.swl2"), model.state_arrays())
    sys.stdout.write(C.render_config(meta))
    if report.diverged:
        print("training diverged; partial report written")
        return 2
    report.final_train_acc = accuracy(model, images, labels)
    print(f"final_train_acc = {report.final_train_acc!r}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    model, resolved = model_from_ckpt(args.ckpt)
    cfg = model.cfg
    m_old, m_new = cfg.window, args.target_window
    lin = extrapolation_ratio(m_old, m_new, "linear")
    log = extrapolation_ratio(m_old, m_new, "log")
    print(f"extrapolation {m_old}->{m_new}: linear={lin:.6f} log={log:.6f}")

    eval_n = args.eval_n if args.eval_n is not None else 192
    seed = args.seed if args.seed is not None else resolved.get("seed", 0)
    lines = ["which,window,img_size,n,accuracy"]
    metrics: dict[str, float] = {}
    if eval_n > 0:
        noise = resolved.get("noise_std", 0.25)
        moved = transfer_window(model, m_new)
        src_x, src_y = data_mod.make_dataset(eval_n, cfg.img_size, seed=10_000 + seed,
                                             noise_std=noise)
        tgt_x, tgt_y = data_mod.make_dataset(eval_n, moved.cfg.img_size, seed=10_000 + seed,
                                             noise_std=noise)
        metrics["source"] = accuracy(model, src_x, src_y)
        metrics["target"] = accuracy(moved, tgt_x, tgt_y)
        lines.append(f"source,{cfg.window},{cfg.img_size},{eval_n},{metrics['source']!r}")
        lines.append(f"target,{moved.cfg.window},{moved.cfg.img_size},{eval_n},{metrics['target']!r}")
        ft = args.finetune_steps or resolved.get("finetune_steps", 0) or 0
        if ft > 0:
            ft_x, ft_y = data_mod.make_dataset(resolved.get("train_n", 512),
                                               moved.cfg.img_size, seed=2000 + seed,
                                               noise_std=noise)
            tc = TrainConfig(steps=ft, batch_size=resolved.get("batch_size", 16),
                             lr=resolved.get("lr", 1e-3) * 0.1, seed=seed)
            train(moved, ft_x, ft_y, tc)
            metrics["target_ft"] = accuracy(moved, tgt_x, tgt_y)
            lines.append(f"target_ft,{moved.cfg.window},{moved.cfg.img_size},"
                         f"{eval_n},{metrics['target_ft']!r}")
        for which, acc in metrics.items():
            print(f"accuracy[{which}] = {acc!r}")
    if args.out:
        meta = dict(resolved)
        meta.update({"target_window": m_new, "eval_n": eval_n, "seed": seed})
        _write_artifacts(args.out, {"transfer.csv": "\n".join(lines) + "\n"}, meta)
    return 0


def cmd_spp(args: argparse.Namespace) -> int:
    if args.ckpt and args.init:
        raise ConfigError("--ckpt and --init random are mutually exclusive")
    variants = (args.norm or "res_post").split(",")
    for v in variants:
        if v not in ("pre", "post", "sandwich", "res_post"):
            raise ConfigError(f"unknown norm variant {v!r}")
    batch = args.batch_size or 8
    lines = ["block,mean_amp,max_amp,variant"]
    meta: dict[str, Any] | None = None
    for variant in variants:
        if args.ckpt:
            model, resolved = model_from_ckpt(args.ckpt)
            if variant != model.cfg.norm_variant:
                raise ConfigError(
                    f"checkpoint was trained with norm={model.cfg.norm_variant}; "
                    f"cannot profile it as {variant}")
        else:
            keys = tuple(k for k in _MODEL_KEYS if k != "norm")
            resolved = _resolved_from_args(args, keys)
            # A freshly-initialized profile needs enough signal at init for
            # amplitude growth to be visible; default to fan-scaled init.
            resolved.setdefault("init", "fan")
            resolved.setdefault("init_gain", 1.5)
            resolved["norm"] = variant
            model = build_model(config_to_model(resolved), seed=resolved.get("seed", 0))
        imgs, _ = data_mod.make_dataset(batch, model.cfg.img_size,
                                        seed=resolved.get("seed", 0))
        records = signal_propagation(model, T.Tensor(imgs))
        for r in records:
            mean = "inf" if r.flagged else repr(r.mean_amp)
            mx = "inf" if r.flagged else repr(r.max_amp)
            lines.append(f"{r.block},{mean},{mx},{variant}")
        if meta is None:
            meta = _effective_config(resolved, model.cfg, None)
            # The variant is recorded per-row in the CSV; a multi-variant run
            # has no single value for the meta echo.
            del meta["norm"]
    assert meta is not None
    _write_artifacts(args.out, {"spp.csv": "\n".join(lines) + "\n"}, meta)
    print(f"wrote {len(lines) - 1} rows for {len(variants)} variant(s)")
    return 0


def _iter_blocks(cfg: ModelConfig):
    g = 0
    for s in range(4):
        for b in range(cfg.depths[s]):
            yield g, s, b
            g += 1


def cmd_bias_export(args: argparse.Namespace) -> int:
    model, resolved = model_from_ckpt(args.ckpt)
    cfg = model.cfg
    total = cfg.total_blocks()
    wanted = list(_iter_blocks(cfg))
    if args.block is not None:
        if not 0 <= args.block < total:
            raise ConfigError(f"block index {args.block} out of range [0, {total})")
        wanted = [t for t in wanted if t[0] == args.block]
    written = []
    for g, s, b in wanted:
        heads = cfg.heads[s]
        if args.head is not None and not 0 <= args.head < heads:
            raise ConfigError(f"head index {args.head} out of range [0, {heads}) "
                              f"at block {g}")
        provider = model.block_weights[(s, b)].provider
        M = cfg.stage_window(s)
        if isinstance(provider, ParamTable):
            table = provider.table.data
        else:
            table = precompute_bias(provider, M,
                                    model.block_weights[(s, b)].anchor).table.data
        span = np.arange(-(M - 1), M)
        head_list = [args.head] if args.head is not None else list(range(heads))
        for h in head_list:
            lines = ["head,dx,dy,value"]
            i = 0
            for dy in span:
                for dx in span:
                    lines.append(f"{h},{dx},{dy},{table[i, h].item()!r}")
                    i += 1
            name = f"bias_block{g}_head{h}.csv"
            written.append((name, "\n".join(lines) + "\n"))
    _write_artifacts(args.out, dict(written), dict(resolved))
    print(f"wrote {len(written)} table file(s)")
    return 0


# ---------------------------------------------------------------------------
# Property suites for `swinlab check`

class ContractFailure(Exception):
    """A property suite failed; message names the violated property."""


def _suite_param_count() -> None:
    for name, target, tol in PARAM_TARGETS:
        got = count_params(preset_config(name))
        rel = abs(got - target) / target
        if rel > tol:
            raise ContractFailure(
                f"{name}: {got:,} params is {rel:.2%} from {target:,} (tol {tol:.0%})")
    cfg = preset_config("desk-T")
    model = build_model(cfg, seed=0)
    allocated = sum(int(np.prod(p.data.shape)) for p in model.params.values())
    if allocated != count_params(cfg):
        raise ContractFailure(
            f"desk-T: allocated {allocated} != counted {count_params(cfg)}")


def _suite_seq_batch(seed: int) -> None:
    from .attention import AttentionWeights, attend_cosine, attend_dot, attend_sequential
    rng = np.random.default_rng(seed)
    for trial in range(6):
        heads = int(rng.integers(1, 4))
        d = int(rng.integers(2, 8))
        m2 = int(rng.integers(2, 6)) ** 2
        nW = int(rng.integers(1, 5))
        C_ = heads * d
        w = AttentionWeights(
            heads=heads, head_dim=d,
            qkv_w=T.Tensor(rng.normal(0, 0.2, (C_, 3 * C_))),
            qkv_b=T.Tensor(rng.normal(0, 0.1, (3 * C_,))),
            proj_w=T.Tensor(rng.normal(0, 0.2, (C_, C_))),
            proj_b=T.Tensor(rng.normal(0, 0.1, (C_,))),
            tau=T.Tensor(np.full(heads, 0.7)),
        )
        x = T.Tensor(rng.normal(0, 1, (nW, m2, C_)))
        B = T.Tensor(rng.normal(0, 0.5, (heads, m2, m2)))
        mask = T.Tensor(np.where(rng.random((nW, m2, m2)) < 0.2, -1e9, 0.0))
        variant = ("cosine", "dot")[trial % 2]
        with T.no_tape():
            batched = (attend_cosine if variant == "cosine" else attend_dot)(
                x, w, B, mask)
            seq = attend_sequential(x, w, B, mask, variant=variant)
        diff = float(np.max(np.abs(batched.data - seq.data)))
        if diff > 1e-9:
            raise ContractFailure(f"trial {trial} ({variant}): max diff {diff:.3e} > 1e-9")


def _suite_checkpoint_equiv(seed: int) -> None:
    cfg = preset_config("desk-T")
    images, labels = data_mod.make_dataset(64, cfg.img_size, seed=seed)
    states = []
    for segment in (None, 2):
        model = build_model(cfg, seed=seed)
        tc = TrainConfig(steps=8, batch_size=8, seed=seed, segment_size=segment)
        train(model, images, labels, tc)
        states.append(model.state_arrays())
    for key in states[0]:
        if not np.array_equal(states[0][key], states[1][key]):
            raise ContractFailure(f"weights differ at {key} after 8 steps")


def _suite_gradient(seed: int) -> None:
    rng = np.random.default_rng(seed)

    def fd_check(fn, arrays, label, tol=1e-4, probes=4):
        tens = [T.Tensor(a, requires_grad=True) for a in arrays]
        with T.Tape() as tape:
            out = fn(*tens)
            tape.backward(out)
        for t, a in zip(tens, arrays):
            flat = a.reshape(-1)
            for _ in range(probes):
                i = int(rng.integers(flat.size))
                h = 1e-6 * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + h
                with T.no_tape():
                    up = fn(*[T.Tensor(x) for x in arrays]).item()
                flat[i] = orig - h
                with T.no_tape():
                    dn = fn(*[T.Tensor(x) for x in arrays]).item()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                ad = t.grad.reshape(-1)[i]
                if abs(fd - ad) > tol * max(1.0, abs(fd)):
                    raise ContractFailure(
                        f"{label}: grad {ad:.8f} vs fd {fd:.8f} at index {i}")

    a = rng.normal(0, 1, (3, 4))
    b = rng.normal(0, 1, (4, 5))
    r = rng.normal(0, 1, (3, 5))
    fd_check(lambda x, y: T.reduce_sum(T.mul(T.matmul(x, y), T.Tensor(r))),
             [a.copy(), b.copy()], "matmul")
    v = rng.normal(0, 1, (6, 7))
    rv = rng.normal(0, 1, (6, 7))
    fd_check(lambda x: T.reduce_sum(T.mul(T.gelu(x), T.Tensor(rv))), [v.copy()], "gelu")
    fd_check(lambda x: T.reduce_sum(T.mul(T.softmax_lastdim(x), T.Tensor(rv))),
             [v.copy()], "softmax")
    g = np.ones(7)
    bb = np.zeros(7)
    fd_check(lambda x: T.reduce_sum(T.mul(T.layer_norm(x, T.Tensor(g), T.Tensor(bb)),
                                          T.Tensor(rv))), [v.copy()], "layer_norm")


def _suite_cosine_bound(seed: int, forwards: int = 20) -> None:
    from .attention import AttentionConfig, AttentionWeights, _logits, _split_heads, attend_cosine
    rng = np.random.default_rng(seed)
    acfg = AttentionConfig(heads=2, head_dim=4, variant="cosine")
    C_ = acfg.heads * acfg.head_dim
    for trial in range(forwards):
        if trial == 0:
            tau_raw = np.array([0.002, 0.5])  # below the floor: clamp must bite
        else:
            tau_raw = np.exp(rng.uniform(np.log(1e-3), np.log(2.0), 2))
        w = AttentionWeights(
            heads=2, head_dim=4,
            qkv_w=T.Tensor(rng.normal(0, 0.5, (C_, 3 * C_))),
            qkv_b=T.Tensor(np.zeros(3 * C_)),
            proj_w=T.Tensor(np.eye(C_)), proj_b=T.Tensor(np.zeros(C_)),
            tau=T.Tensor(tau_raw),
        )
        m2 = 9
        x = T.Tensor(rng.normal(0, rng.uniform(0.1, 10), (2, m2, C_)))
        with T.no_tape():
            qkv = T.add(T.matmul(x, w.qkv_w), w.qkv_b)
            q, k, _v = _split_heads(qkv, 2, m2, 2, 4)
            logits = _logits(q, k, w, "cosine", acfg.tau_min)
        limit = 1.0 / max(float(tau_raw.min()), acfg.tau_min) + 1e-9
        worst = float(np.max(np.abs(logits.data)))
        if worst > limit:
            raise ContractFailure(
                f"pre-bias logit {worst:.4f} exceeds 1/max(tau, {acfg.tau_min}) = {limit:.4f}")
    # scale invariance: q,k projections x10 leave probabilities unchanged
    w0 = rng.normal(0, 0.3, (C_, 3 * C_))
    w10 = w0.copy()
    w10[:, :2 * C_] *= 10.0
    x_arr = rng.normal(0, 1, (1, 9, C_))
    probs = []
    for mat in (w0, w10):
        w = AttentionWeights(
            heads=2, head_dim=4, qkv_w=T.Tensor(mat), qkv_b=T.Tensor(np.zeros(3 * C_)),
            proj_w=T.Tensor(np.eye(C_)), proj_b=T.Tensor(np.zeros(C_)),
            tau=T.Tensor(np.full(2, 0.8)))
        with T.no_tape():
            _out, p = attend_cosine(T.Tensor(x_arr), w, None, None, return_probs=True)
        probs.append(p.data)
    diff = float(np.max(np.abs(probs[0] - probs[1])))
    if diff > 1e-9:
        raise ContractFailure(f"scale invariance violated: prob diff {diff:.3e}")


def _suite_cpb_precompute(seed: int) -> None:
    rng = np.random.default_rng(seed)
    from .bias import cpb_bias, make_cpb_net, param_bias
    for M in (2, 7, 8):
        net = make_cpb_net(rng, hidden=16, heads=3, spacing="log")
        with T.no_tape():
            live = cpb_bias(net, M, M, 3)
            table = precompute_bias(net, M)
            stored = param_bias(table, relative_index(M))
        if not np.array_equal(live.data, stored.data):
            raise ContractFailure(f"M={M}: precomputed table is not bit-exact")


def _suite_extrapolation() -> None:
    lin = extrapolation_ratio(8, 16, "linear")
    log = extrapolation_ratio(8, 16, "log")
    if abs(lin - 8.0 / 7.0) > 1e-12:
        raise ContractFailure(f"linear ratio {lin!r} != 8/7")
    if abs(log - (np.log(16) - np.log(8)) / np.log(8)) > 1e-12:
        raise ContractFailure(f"log ratio {log!r} != log(2)/log(8)")


SUITES = {
    "param-count": lambda seed: _suite_param_count(),
    "seq-batch": _suite_seq_batch,
    "checkpoint-equiv": _suite_checkpoint_equiv,
    "gradient": _suite_gradient,
    "cosine-bound": _suite_cosine_bound,
    "cpb-precompute": _suite_cpb_precompute,
    "extrapolation": lambda seed: _suite_extrapolation(),
}


def cmd_check(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    names = list(SUITES)
    if args.only:
        if args.only not in SUITES:
            raise ConfigError(
                f"unknown suite {args.only!r}; available: {', '.join(names)}")
        names = [args.only]
    if args.inject_fault == "tau-floor":
        attention._TEST_BYPASS_TAU_CLAMP = True
    failed = 0
    try:
        for name in names:
            try:
                SUITES[name](seed)
            except ContractFailure as e:
                print(f"FAIL {name}: {e}")
                failed += 1
            else:
                print(f"PASS {name}")
    finally:
        attention._TEST_BYPASS_TAU_CLAMP = False
    print(f"{len(names) - failed}/{len(names)} suites passed")
    return 3 if failed else 0


# ---------------------------------------------------------------------------

def _apply_thread_cap() -> None:
    raw = os.environ.get("SWINLAB_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SWINLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SWINLAB_THREADS must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=n)


_COMMANDS = {
    "train": cmd_train,
    "transfer": cmd_transfer,
    "spp": cmd_spp,
    "bias-export": cmd_bias_export,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except NumericsError as e:
        print(f"error: numerical failure in {e.op}: {e}", file=sys.stderr)
        return 1
    except SwinlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
