"""The vessel-aware selective-scan classifier.

Patch tokens (plus a class token at position 0) pass through ``depth``
blocks, each a bidirectional selective scan along a per-sample patch order
followed by cross-attention onto encoded morphology descriptions. The class
token, concatenated with normalised age and gender, feeds a linear head with
one logit per label.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import CheckpointError, ConfigError, DimensionError, PreconditionError, VocabularyError
from .tensorcore import Parameter, Tensor

DEFAULT_DESCRIPTIONS = (
    "sparse capillary network with reduced vessel density",
    "thin straight vessels with little branching",
    "enlarged avascular zone with capillary dropout",
    "moderate vessel density with a regular branching pattern",
    "mildly tortuous vessels of uniform caliber",
    "dense capillary plexus with frequent bifurcations",
    "dilated tortuous vessels with irregular caliber",
    "high vessel density with many crossing branches",
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    d_state: int = 8
    heads: int = 4
    expand: int = 1
    text_dim: int = 32
    prompt_len: int = 4
    n_labels: int = 5
    use_iem: bool = True
    encoder_seed: int = 1234
    descriptions: tuple[str, ...] = DEFAULT_DESCRIPTIONS
    density_cutoffs: tuple[float, float] = (0.1, 0.18)

    def validate(self) -> "ModelConfig":
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("dim", "depth", "d_state", "heads", "expand", "text_dim", "n_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.prompt_len < 0:
            raise ConfigError(f"prompt_len must be >= 0, got {self.prompt_len}")
        if self.use_iem and not self.descriptions and not self.prompt_len:
            raise ConfigError("descriptions: text bank is empty")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelConfig field(s): {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv).validate()


def load_descriptions(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines if line.strip())


def write_descriptions(path: str | Path, descriptions: Sequence[str]) -> Path:
    path = Path(path)
    path.write_text("".join(d + "\n" for d in descriptions), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data[...] = state[name]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = Parameter(tc.trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.weight, self.bias)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# frozen text side
# ---------------------------------------------------------------------------

class TextBank:
    """Fixed descriptions and the frozen encoder that turns them into rows.

    The encoder is a seeded token table followed by two frozen tanh layers;
    the second layer mixes each row with the mean of its own group (the
    prompt block, or one description), never across groups. Description rows
    are computed once; prompt rows are recomputed so gradients reach them.
    """

    def __init__(self, descriptions: Sequence[str], text_dim: int, prompt_len: int,
                 encoder_seed: int, density_cutoffs: tuple[float, float] = (0.1, 0.18)):
        self.descriptions = tuple(descriptions)
        self.text_dim = text_dim
        self.prompt_len = prompt_len
        self.encoder_seed = encoder_seed
        self.density_cutoffs = tuple(density_cutoffs)
        words = sorted({w for d in self.descriptions for w in d.lower().split()})
        self.vocab = {w: i for i, w in enumerate(words)}
        self.token_ids = [self.tokenize(d) for d in self.descriptions]
        # a word's embedding depends only on the word, so editing one description
        # leaves every other description's rows untouched
        table = [np.random.default_rng([encoder_seed, zlib.crc32(w.encode("utf-8"))]).normal(size=text_dim)
                 for w in words]
        self.table = Tensor(np.array(table) if table else np.zeros((1, text_dim)))
        rng = np.random.default_rng(encoder_seed)
        scale = 1.0 / math.sqrt(text_dim)
        self.w1 = Tensor(rng.normal(0.0, scale, size=(text_dim, text_dim)))
        self.b1 = Tensor(rng.normal(0.0, 0.1, size=text_dim))
        self.w2 = Tensor(rng.normal(0.0, scale, size=(text_dim, text_dim)))
        self.b2 = Tensor(rng.normal(0.0, 0.1, size=text_dim))
        self._desc_rows = self._encode_descriptions()

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self.vocab[w] for w in text.lower().split()]
        except KeyError as exc:
            raise VocabularyError(f"word {exc.args[0]!r} not in vocabulary") from None

    @property
    def n_rows(self) -> int:
        return self.prompt_len + sum(len(t) for t in self.token_ids)

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        bad = [i for i in ids if not 0 <= i < len(self.vocab)]
        if bad:
            raise VocabularyError(f"unknown token id(s) {bad}")
        return tc.getitem(self.table, np.asarray(ids, dtype=np.int64))

    def encode_group(self, rows: Tensor) -> Tensor:
        h = tc.tanh(rows @ self.w1 + self.b1)
        h = h + tc.expand(h.mean(axis=0, keepdims=True), h.shape)
        return tc.tanh(h @ self.w2 + self.b2)

    def _encode_descriptions(self) -> np.ndarray:
        parts = [self.encode_group(self.embed_tokens(ids)).data for ids in self.token_ids if ids]
        return np.concatenate(parts) if parts else np.zeros((0, self.text_dim))

    def encode(self, prompt: Tensor | None) -> Tensor:
        desc = Tensor(self._desc_rows)
        if prompt is None or self.prompt_len == 0:
            return desc
        return tc.concat([self.encode_group(prompt), desc], axis=0)

    def select(self, density: float) -> list[int]:
        """Description indices for a vessel density (low / medium / high windows)."""
        n = len(self.descriptions)
        width = (n + 1) // 2
        lo, hi = self.density_cutoffs
        level = 0 if density < lo else 1 if density < hi else 2
        start = [0, (n - width) // 2, n - width][level]
        return list(range(start, start + width))

    def row_mask(self, density: float) -> np.ndarray:
        mask = np.zeros(self.n_rows, dtype=bool)
        mask[:self.prompt_len] = True
        pos = self.prompt_len
        chosen = set(self.select(density))
        for i, ids in enumerate(self.token_ids):
            if i in chosen:
                mask[pos:pos + len(ids)] = True
            pos += len(ids)
        return mask


def encode_text(bank: TextBank, prompt: Tensor | None = None) -> Tensor:
    return bank.encode(prompt)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class ScanDirection(Module):
    def __init__(self, inner: int, d_state: int, rng: np.random.Generator):
        fan_in = inner ** -0.5
        self.dt_proj = Linear(inner, inner, rng, std=fan_in)
        dt = np.exp(rng.uniform(math.log(1e-2), math.log(1.0), size=inner))
        self.dt_proj.bias.data[...] = _inv_softplus(dt)
        # input-dependent projections start at unit gain so the state is not starved
        self.b_proj = Linear(inner, d_state, rng, bias=False, std=fan_in)
        self.c_proj = Linear(inner, d_state, rng, bias=False, std=fan_in)
        # A = -softplus(a_raw) < 0, initialised to -(1..d_state) per channel
        self.a_raw = Parameter(np.tile(_inv_softplus(np.arange(1.0, d_state + 1)), (inner, 1)))
        self.skip = Parameter(np.ones(inner))

    def state_matrix(self) -> Tensor:
        return -tc.softplus(self.a_raw)

    def __call__(self, u: Tensor, use_scan: bool = True) -> Tensor:
        if not use_scan:
            return u
        delta = tc.softplus(self.dt_proj(u))
        return tc.selective_scan(u, delta, self.state_matrix(), self.b_proj(u), self.c_proj(u), self.skip)

    def discretised_decay(self, u: Tensor) -> np.ndarray:
        """exp(delta * A) for every token and channel; must lie in (0, 1)."""
        delta = tc.softplus(self.dt_proj(u)).data
        return np.exp(delta[..., None] * self.state_matrix().data)


def sequence_orders(patch_orders: np.ndarray) -> np.ndarray:
    """Prefix the class token (index 0) and shift patch indices by one."""
    patch_orders = np.atleast_2d(np.asarray(patch_orders, dtype=np.int64))
    n = patch_orders.shape[1]
    if not (np.sort(patch_orders, axis=1) == np.arange(n)).all():
        raise PreconditionError("scan order is not a permutation of the patch indices")
    return np.concatenate([np.zeros((len(patch_orders), 1), dtype=np.int64), patch_orders + 1], axis=1)


class MBDBlock(Module):
    """Pre-norm residual bidirectional selective scan along a given token order.

    The forward direction walks [cls, patches in scan order]; the backward
    direction walks that exact sequence reversed, so the class token sits
    first in one and last in the other.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        inner = cfg.dim * cfg.expand
        self.inner = inner
        self.norm = LayerNorm(cfg.dim)
        # fan-in scale: at std 0.02 the class token barely varies between images (scripts/token_signal.py)
        self.in_proj = Linear(cfg.dim, 2 * inner, rng, std=cfg.dim ** -0.5)
        self.fwd = ScanDirection(inner, cfg.d_state, rng)
        self.bwd = ScanDirection(inner, cfg.d_state, rng)
        self.out_proj = Linear(inner, cfg.dim, rng)

    def __call__(self, x: Tensor, seq_order: np.ndarray, use_scan: bool = True) -> Tensor:
        xz = self.in_proj(self.norm(x))
        u = tc.silu(xz[..., :self.inner])
        gate = tc.silu(xz[..., self.inner:])
        y = None
        for direction, order in ((self.fwd, seq_order), (self.bwd, seq_order[:, ::-1])):
            yd = tc.scatter(direction(tc.gather(u, order), use_scan), order)
            y = yd if y is None else y + yd
        return x + self.out_proj(y * gate)


class IEMBlock(Module):
    """Pre-norm residual multi-head cross-attention from tokens onto text rows."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.heads = cfg.heads
        self.norm = LayerNorm(cfg.dim)
        self.q = Linear(cfg.dim, cfg.dim, rng)
        self.k = Linear(cfg.text_dim, cfg.dim, rng)
        self.v = Linear(cfg.text_dim, cfg.dim, rng)
        self.out = Linear(cfg.dim, cfg.dim, rng)

    def attention(self, x: Tensor, text: Tensor, row_mask: np.ndarray | None = None) -> Tensor:
        """Attention weights, shape (batch, heads, tokens, text rows)."""
        b, L, D = x.shape
        h, dh = self.heads, D // self.heads
        q = self.q(self.norm(x)).reshape(b, L, h, dh).transpose(0, 2, 1, 3)
        k = self.k(text).reshape(-1, h, dh).transpose(1, 2, 0)
        scores = tc.matmul(q, k) * (1.0 / math.sqrt(dh))
        mask = None if row_mask is None else np.asarray(row_mask, dtype=bool)[:, None, None, :]
        return tc.softmax(scores, axis=-1, mask=mask)

    def __call__(self, x: Tensor, text: Tensor, row_mask: np.ndarray | None = None) -> Tensor:
        if text.shape[0] == 0:
            raise ConfigError("cross-attention needs at least one text row")
        b, L, D = x.shape
        h, dh = self.heads, D // self.heads
        attn = self.attention(x, text, row_mask)
        v = self.v(text).reshape(-1, h, dh).transpose(1, 0, 2)
        ctx = tc.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, L, D)
        return x + self.out(ctx)


class VampireBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mbd = MBDBlock(cfg, rng)
        self.iem = IEMBlock(cfg, rng) if cfg.use_iem else None

    def __call__(self, x, seq_order, text, row_mask, use_scan=True):
        x = self.mbd(x, seq_order, use_scan)
        if self.iem is not None:
            x = self.iem(x, text, row_mask)
        return x


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(batch, 3, H, W) -> (batch, N, 3 * p * p), patches in row-major order."""
    images = np.asarray(images, dtype=float)
    b, ch, H, W = images.shape
    if H != W or H % patch_size:
        raise DimensionError(f"image {H}x{W} does not tile into {patch_size}-pixel patches")
    g = H // patch_size
    x = images.reshape(b, ch, g, patch_size, g, patch_size).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, ch * patch_size * patch_size)


def demographics(age, gender) -> np.ndarray:
    return np.stack([np.asarray(age, dtype=float) / 100.0, np.asarray(gender, dtype=float)], axis=-1)


class Vampire(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D = cfg.dim
        self.patch_proj = Linear(3 * cfg.patch_size ** 2, D, rng)
        self.pos_embed = Parameter(tc.trunc_normal(rng, (cfg.n_patches, D)))
        self.cls_token = Parameter(tc.trunc_normal(rng, (1, 1, D)))
        self.prompt = Parameter(tc.trunc_normal(rng, (cfg.prompt_len, cfg.text_dim))) \
            if cfg.use_iem and cfg.prompt_len else None
        self.blocks = [VampireBlock(cfg, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(D)
        self.head = Linear(D + 2, cfg.n_labels, rng)
        self.bank = TextBank(cfg.descriptions, cfg.text_dim, cfg.prompt_len if cfg.use_iem else 0,
                             cfg.encoder_seed, cfg.density_cutoffs) if cfg.use_iem else None

    def embed(self, images: np.ndarray) -> Tensor:
        patches = patchify(images, self.cfg.patch_size)
        if patches.shape[1] != self.cfg.n_patches:
            raise DimensionError(f"expected {self.cfg.n_patches} patches, got {patches.shape[1]}")
        x = self.patch_proj(Tensor(patches)) + self.pos_embed
        cls = tc.expand(self.cls_token, (x.shape[0], 1, self.cfg.dim))
        return tc.concat([cls, x], axis=1)

    def text_rows(self) -> Tensor | None:
        return None if self.bank is None else self.bank.encode(self.prompt)

    def features(self, images, patch_orders, row_mask=None, use_scan=True) -> Tensor:
        x = self.embed(images)
        seq = sequence_orders(patch_orders)
        if seq.shape != x.shape[:2]:
            raise DimensionError(f"scan orders {seq.shape} do not match token layout {x.shape[:2]}")
        text = self.text_rows()
        if text is not None and row_mask is None:
            row_mask = np.ones((x.shape[0], text.shape[0]), dtype=bool)
        for block in self.blocks:
            x = block(x, seq, text, row_mask, use_scan)
        return self.norm(x)

    def classify(self, feats: Tensor, demo: np.ndarray) -> Tensor:
        cls = feats[:, 0, :]
        return self.head(tc.concat([cls, Tensor(np.atleast_2d(demo))], axis=1))

    def __call__(self, images, patch_orders, demo, row_mask=None, use_scan=True) -> Tensor:
        return self.classify(self.features(images, patch_orders, row_mask, use_scan), demo)

    def row_masks(self, densities: Sequence[float]) -> np.ndarray | None:
        if self.bank is None:
            return None
        return np.stack([self.bank.row_mask(d) for d in densities])


def bce_loss(logits: Tensor, labels) -> Tensor:
    return tc.bce_with_logits(logits, labels)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def tiny_config() -> ModelConfig:
    """32x32 input, patch 8, width 16, two blocks, four states, three text rows."""
    return ModelConfig(image_size=32, patch_size=8, dim=16, depth=2, d_state=4, heads=2,
                       text_dim=8, prompt_len=1, descriptions=("thin vessels",))


def model_gradient_check(cfg: ModelConfig, seed: int = 0, per_tensor: int | None = None,
                         batch: int = 2, eps: float = 1e-5) -> tuple[float, int]:
    """Compare backprop against central differences for every parameter tensor.

    Parameters are jittered first so no gradient is trivially zero. With
    ``per_tensor`` set, only that many seeded coordinates per tensor are
    probed. Returns (max relative error, coordinates checked).
    """
    model = Vampire(cfg, seed=seed)
    rng = np.random.default_rng([seed, 99])
    n = cfg.n_patches
    images = rng.uniform(size=(batch, 3, cfg.image_size, cfg.image_size))
    orders = np.stack([rng.permutation(n) for _ in range(batch)])
    demo = demographics(rng.integers(20, 90, batch), rng.integers(0, 2, batch))
    labels = rng.integers(0, 2, (batch, cfg.n_labels))
    row_mask = None
    if model.bank is not None:
        row_mask = rng.uniform(size=(batch, model.bank.n_rows)) < 0.7
        row_mask[:, 0] = True
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.05, p.shape)

    def loss() -> Tensor:
        return bce_loss(model(images, orders, demo, row_mask), labels)

    model.zero_grad()
    loss().backward()
    worst, checked = 0.0, 0
    for _, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = range(flat.size) if per_tensor is None or per_tensor >= flat.size \
            else rng.choice(flat.size, per_tensor, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss().item()
            flat[i] = orig - eps
            lo = loss().item()
            flat[i] = orig
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - (hi - lo) / (2 * eps)) / max(1.0, abs(a)))
            checked += 1
    return worst, checked
