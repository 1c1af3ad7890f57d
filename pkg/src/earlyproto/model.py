"""Causal decoder head over per-segment encoder features, with a prototype bank.

The forward pass follows the layout: linear projection of encoder features,
learnable absolute positional embeddings, a stack of pre-norm decoder blocks
with causal attention, a linear classification head on every token, and two
similarity read-outs against the prototype bank (one for learning the
prototypes, one for regularising the decoder through a feature predictor).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, Tensor


class CapacityError(RuntimeError):
    """Sequence longer than the positional table."""


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 16
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    t_max: int = 10
    k_classes: int = 6
    predictor_hidden: int = 64
    seed: int = 0

    def validate(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self

    @classmethod
    def full_scale(cls, d_enc=768, k_classes=174, **kw):
        """Six blocks at width 768, ten segments per video."""
        return cls(d_enc=d_enc, d=768, n_blocks=6, n_heads=12, t_max=10,
                   k_classes=k_classes, predictor_hidden=768, **kw)


@dataclass
class PrototypeBank:
    p: Tensor
    frozen: bool = False

    @property
    def k(self):
        return self.p.shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    frozen: set[str] = field(default_factory=set)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def prototypes(self) -> PrototypeBank:
        return PrototypeBank(self.tensors["prototypes"], "prototypes" in self.frozen)

    def trainable(self):
        return {n: t for n, t in self.tensors.items() if n not in self.frozen}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return ModelParams(self.config,
                           {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                            for n, t in self.tensors.items()},
                           set(self.frozen))

    def astype(self, dtype):
        """Inference copy in another float precision (e.g. ``np.float32``)."""
        out = self.copy()
        for t in out.tensors.values():
            t.data = t.data.astype(dtype)
            t.requires_grad = False
        return out

    def block(self, i):
        pre = f"blocks.{i}."
        return {n[len(pre):]: t for n, t in self.tensors.items() if n.startswith(pre)}


def param_group(name: str) -> str:
    """Coarse ownership used by gradient-flow audits."""
    if name == "prototypes":
        return "prototypes"
    if name.startswith("pred."):
        return "predictor"
    return "encoder"


def init_params(cfg: ModelConfig) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, h = cfg.d, cfg.predictor_hidden
    t: dict[str, Tensor] = {}

    def normal(name, *shape):
        t[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def const(name, value, n):
        t[name] = Tensor(np.full(n, value, dtype=np.float64), requires_grad=True, name=name)

    normal("proj.w", cfg.d_enc, d)
    const("proj.b", 0.0, d)
    normal("pos_emb", cfg.t_max, d)
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        const(pre + "ln1.g", 1.0, d)
        const(pre + "ln1.b", 0.0, d)
        for m in ("q", "k", "v", "o"):
            normal(pre + "attn.w" + m, d, d)
            const(pre + "attn.b" + m, 0.0, d)
        const(pre + "ln2.g", 1.0, d)
        const(pre + "ln2.b", 0.0, d)
        normal(pre + "mlp.w1", d, 4 * d)
        const(pre + "mlp.b1", 0.0, 4 * d)
        normal(pre + "mlp.w2", 4 * d, d)
        const(pre + "mlp.b2", 0.0, d)
    const("ln_f.g", 1.0, d)
    const("ln_f.b", 0.0, d)
    normal("head.w", d, cfg.k_classes)
    const("head.b", 0.0, cfg.k_classes)
    normal("prototypes", cfg.k_classes, d)
    normal("pred.w1", d, h)
    const("pred.b1", 0.0, h)
    normal("pred.w2", h, d)
    const("pred.b2", 0.0, d)
    return ModelParams(cfg, t)


@dataclass
class ForwardOutputs:
    z_enc: Tensor      # [..., T, d]
    z: Tensor          # [..., T, d]
    logits: Tensor     # [..., T, K]
    s_proto: Tensor    # [..., K]   from sg(z(T)) against P
    s_reg: Tensor      # [..., T, K] from f(z(t)) against sg(P)
    z_pred: Tensor     # [..., T, d] f(z(t))

    @property
    def T(self):
        return self.logits.shape[-2]


def _block(p, x, n_heads):
    attn = {k[len("attn."):]: v for k, v in p.items() if k.startswith("attn.")}
    x = x + dc.causal_mhsa(dc.layer_norm(x, p["ln1.g"], p["ln1.b"]), attn, n_heads)
    hdn = dc.gelu(dc.linear(dc.layer_norm(x, p["ln2.g"], p["ln2.b"]), p["mlp.w1"], p["mlp.b1"]))
    return x + dc.linear(hdn, p["mlp.w2"], p["mlp.b2"])


def decode(params: ModelParams, h: Tensor) -> Tensor:
    """Decoder stack over already position-embedded tokens ``h[..., T, d]``."""
    for i in range(params.config.n_blocks):
        h = _block(params.block(i), h, params.config.n_heads)
    return dc.layer_norm(h, params["ln_f.g"], params["ln_f.b"])


def predictor(params: ModelParams, z: Tensor) -> Tensor:
    hdn = dc.gelu(dc.linear(z, params["pred.w1"], params["pred.b1"]))
    return dc.linear(hdn, params["pred.w2"], params["pred.b2"])


def _as_features(params, features):
    x = features if isinstance(features, Tensor) else Tensor(features)
    cfg = params.config
    if x.ndim < 2 or x.shape[-1] != cfg.d_enc:
        raise dc.ShapeError(f"features shape {x.shape} does not end in d_enc={cfg.d_enc}")
    if x.shape[-2] < 1:
        raise dc.ShapeError("need at least one segment")
    if x.shape[-2] > cfg.t_max:
        raise CapacityError(f"{x.shape[-2]} segments exceed t_max={cfg.t_max}")
    if x.dtype != params["proj.w"].dtype:
        x = Tensor(x.data.astype(params["proj.w"].dtype))
    return x


def forward_full(params: ModelParams, features) -> ForwardOutputs:
    """All segments at once under the causal mask.

    ``features`` is ``[T, d_enc]`` or batched ``[B, T, d_enc]``.
    """
    x = _as_features(params, features)
    T = x.shape[-2]
    z_enc = dc.linear(x, params["proj.w"], params["proj.b"])
    z = decode(params, z_enc + params["pos_emb"][:T])
    logits = dc.linear(z, params["head.w"], params["head.b"])
    P = params["prototypes"]
    s_proto = dc.neg_l2_scores(dc.stop_grad(z[..., T - 1, :]), P)
    z_pred = predictor(params, z)
    s_reg = dc.neg_l2_scores(z_pred, dc.stop_grad(P))
    return ForwardOutputs(z_enc, z, logits, s_proto, s_reg, z_pred)


# ------------------------------------------------------------------ streaming


@dataclass
class IncrementalState:
    """Projected, position-embedded rows seen so far in one stream."""
    rows: list[np.ndarray] = field(default_factory=list)

    @property
    def t(self):
        return len(self.rows)


def forward_step(params: ModelParams, state: IncrementalState, feature):
    """Consume one segment feature; return (class probabilities, state).

    Earlier raw features are never needed: only their projections are kept.
    The decoder is re-run over the stored prefix.
    """
    cfg = params.config
    feat = np.asarray(feature, dtype=params["proj.w"].dtype)
    if feat.shape != (cfg.d_enc,):
        raise dc.ShapeError(f"segment shape {feat.shape} != ({cfg.d_enc},)")
    t = state.t
    if t >= cfg.t_max:
        raise CapacityError(f"stream already holds t_max={cfg.t_max} segments")
    with dc.no_grad():
        # one-row matmul mirrors forward_full on a T=1 input
        zt = dc.linear(Tensor(feat[None, :]), params["proj.w"], params["proj.b"])
        row = (zt + params["pos_emb"][t:t + 1]).data[0]
        rows = state.rows + [row]
        z = decode(params, Tensor(np.stack(rows)))
        logits = dc.linear(z[t:t + 1], params["head.w"], params["head.b"])
        probs = dc.softmax(logits, axis=-1).data[0]
    return probs, IncrementalState(rows)


def stream(params: ModelParams, features):
    """Feed a whole ``[T, d_enc]`` sequence one segment at a time; yield probs."""
    state = IncrementalState()
    for f in np.asarray(features):
        probs, state = forward_step(params, state, f)
        yield probs


# ------------------------------------------------------------------ exports


def final_features(params: ModelParams, features) -> np.ndarray:
    with dc.no_grad():
        out = forward_full(params, features)
    return out.z.data[..., -1, :]


def export_embeddings(params: ModelParams, dataset, path=None):
    """Prototype rows then one z(T) row per sample: ``(kind, class, vector)``."""
    rows = [("prototype", k, v.copy()) for k, v in enumerate(params["prototypes"].data)]
    for s in dataset:
        rows.append(("final_feature", int(s.label), final_features(params, s.features)))
    if path is not None:
        write_embeddings_csv(rows, path, params.config.d)
    return rows


def write_embeddings_csv(rows, path, d):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "class"] + [f"dim{i}" for i in range(d)])
        for kind, cls, vec in rows:
            w.writerow([kind, cls] + [format(float(x), ".17g") for x in vec])


def read_embeddings_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(row[0], int(row[1]), np.array([float(x) for x in row[2:]])) for row in r]


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"EVPC"
CKPT_VERSION = 1
_CFG_FIELDS = ("d_enc", "d", "n_blocks", "n_heads", "t_max", "k_classes", "predictor_hidden")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path):
    """Magic, version u32, config (seven u32 then seed u64), float64 tensors."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<7I", *(getattr(cfg, f) for f in _CFG_FIELDS)))
        fh.write(struct.pack("<Q", cfg.seed))
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    vals = struct.unpack_from("<7I", buf, 8)
    (seed,) = struct.unpack_from("<Q", buf, 36)
    cfg = ModelConfig(**dict(zip(_CFG_FIELDS, vals)), seed=seed)
    params = init_params(cfg)
    off = 44
    for name, t in params.tensors.items():
        nbytes = t.data.size * 8
        if off + nbytes > len(buf):
            raise CheckpointError(f"checkpoint truncated in tensor {name!r} at offset {off}")
        t.data = np.frombuffer(buf, dtype="<f8", count=t.data.size, offset=off) \
            .reshape(t.shape).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes at offset {off}")
    return params
