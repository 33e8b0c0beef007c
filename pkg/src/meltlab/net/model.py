"""Point-cloud conditioned patch transformer denoiser with hookable write sites.

Each block computes

    Z'     = Z + SA(AdaLN(Z))                 SA write
    Y      = CA(AdaLN(Z'), C)                 CA write
    R      = Z' + Y                           residual
    Z_next = R + MLP(AdaLN(R))                MLP write

and the four writes can be recorded, replaced or spectrally remapped per
``(kind, block, timestep)`` site.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from meltlab.linalg import power_remap
from meltlab.net import autodiff as ad
from meltlab.net.autodiff import Tensor
from meltlab.schedule import cosine_schedule


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 4
    field_size: int = 32
    patch: int = 4
    token_dim: int = 64
    heads: int = 4
    cond_tokens: int = 16
    cond_dim: int = 32
    timesteps: int = 8
    point_dim: int = 2
    mlp_ratio: int = 4
    enc_hidden: int = 64
    enc_pool_tokens: int = 8
    # "v": the network regresses sqrt(ab) eps - sqrt(1 - ab) x0 and forward converts it to eps.
    parametrization: str = "v"

    def __post_init__(self):
        if self.parametrization not in ("eps", "v"):
            raise ModelError(f"parametrization must be 'eps' or 'v', got {self.parametrization!r}")
        for name, value in asdict(self).items():
            if isinstance(value, int) and value < 1:
                raise ModelError(f"{name} must be >= 1, got {value}")
        if self.token_dim % self.heads:
            raise ModelError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.field_size % self.patch:
            raise ModelError(f"field_size {self.field_size} not divisible by patch {self.patch}")
        if self.point_dim not in (2, 3):
            raise ModelError("point_dim must be 2 or 3")

    @property
    def grid(self) -> int:
        return self.field_size // self.patch

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SiteKind(enum.Enum):
    SA_WRITE = "sa"
    CA_WRITE = "ca"
    RESIDUAL = "residual"
    MLP_WRITE = "mlp"


SITE_ORDER = (SiteKind.SA_WRITE, SiteKind.CA_WRITE, SiteKind.RESIDUAL, SiteKind.MLP_WRITE)


@dataclass(frozen=True)
class ActivationSite:
    kind: SiteKind
    block: int
    timestep: int

    def check(self, cfg: DenoiserConfig) -> None:
        if not 0 <= self.block < cfg.blocks:
            raise ModelError(f"block {self.block} outside [0, {cfg.blocks})")
        if not 1 <= self.timestep <= cfg.timesteps:
            raise ModelError(f"timestep {self.timestep} outside [1, {cfg.timesteps}]")


class HookMode(enum.Enum):
    RECORD = "record"
    REPLACE = "replace"
    TRANSFORM = "transform"


@dataclass(frozen=True)
class HookAction:
    mode: HookMode
    matrix: np.ndarray | None = None
    gamma: float | None = None

    @classmethod
    def record(cls) -> "HookAction":
        return cls(HookMode.RECORD)

    @classmethod
    def replace(cls, matrix) -> "HookAction":
        return cls(HookMode.REPLACE, matrix=np.asarray(matrix, dtype=np.float64))

    @classmethod
    def transform(cls, gamma: float) -> "HookAction":
        if not gamma > 0:
            raise ModelError(f"gamma must be > 0, got {gamma}")
        return cls(HookMode.TRANSFORM, gamma=float(gamma))


Hooks = Mapping[ActivationSite, HookAction]


def to_float32_grid(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def canonical_clouds(pts: np.ndarray) -> np.ndarray:
    """Sorted distinct rows per cloud, cyclically padded to a common length.

    Max-pooling is order and multiplicity blind, but BLAS rounding depends on
    row layout; feeding a canonical layout makes the encoder invariance exact.
    """
    uniq = [np.unique(cloud, axis=0) for cloud in pts]
    n = max(len(u) for u in uniq)
    return np.stack([np.resize(u, (n, u.shape[1])) for u in uniq])


class Denoiser:
    """Parameters live in ``self.params`` (insertion-ordered name -> Tensor)."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        self.alpha_bar = cosine_schedule(cfg.timesteps).alpha_bar
        self.params: dict[str, Tensor] = {}
        self._init(np.random.Generator(np.random.Philox(key=seed)))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(to_float32_grid(value), requires_grad=True, name=name)

    def _uniform(self, rng, name: str, fan_in: int, shape) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, size=shape))

    def _zeros(self, name: str, shape) -> None:
        self._add(name, np.zeros(shape))

    def _init(self, rng) -> None:
        c = self.cfg
        d, f, pp = c.token_dim, c.cond_dim, c.patch * c.patch
        self._uniform(rng, "enc.w1", c.point_dim, (c.point_dim, c.enc_hidden))
        self._zeros("enc.b1", (c.enc_hidden,))
        self._uniform(rng, "enc.w2", c.enc_hidden, (c.enc_hidden, c.enc_pool_tokens * f))
        self._zeros("enc.b2", (c.enc_pool_tokens * f,))
        self._uniform(rng, "enc.queries", 1, (c.cond_tokens, f))
        for n in ("wq", "wk", "wv", "wo"):
            self._uniform(rng, f"enc.{n}", f, (f, f))
        self._uniform(rng, "null_cond", 1, (f,))

        self._uniform(rng, "embed.w", pp, (pp, d))
        self._zeros("embed.b", (d,))
        self._uniform(rng, "embed.pos", 1, (c.token_count, d))
        self._uniform(rng, "cond.wc", f, (f, d))
        self._zeros("cond.bc", (d,))
        self._uniform(rng, "cond.wt", d, (d, d))
        self._zeros("cond.bt", (d,))

        for k in range(c.blocks):
            p = f"block{k}"
            for site in ("ln1", "ln2", "ln3"):
                self._uniform(rng, f"{p}.{site}.scale_w", d, (d, d))
                self._zeros(f"{p}.{site}.scale_b", (d,))
                self._uniform(rng, f"{p}.{site}.shift_w", d, (d, d))
                self._zeros(f"{p}.{site}.shift_b", (d,))
            for n in ("wq", "wk", "wv", "wo"):
                self._uniform(rng, f"{p}.sa.{n}", d, (d, d))
            self._zeros(f"{p}.sa.bo", (d,))
            self._uniform(rng, f"{p}.ca.wq", d, (d, d))
            self._uniform(rng, f"{p}.ca.wk", f, (f, d))
            self._uniform(rng, f"{p}.ca.wv", f, (f, d))
            self._uniform(rng, f"{p}.ca.wo", d, (d, d))
            self._zeros(f"{p}.ca.bo", (d,))
            h = c.mlp_ratio * d
            self._uniform(rng, f"{p}.mlp.w1", d, (d, h))
            self._zeros(f"{p}.mlp.b1", (h,))
            self._uniform(rng, f"{p}.mlp.w2", h, (h, d))
            self._zeros(f"{p}.mlp.b2", (d,))

        # Zero un-embed: the untrained model predicts eps_hat = 0.
        self._zeros("out.w", (d, pp))
        self._zeros("out.b", (pp,))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ModelError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ModelError(f"{k}: shape {v.shape} != {self.params[k].shape}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # -- condition encoder --------------------------------------------------

    def encode_condition(self, clouds) -> Tensor:
        """Condition tokens ``(B, M, cond_dim)`` from clouds shaped ``(B, N, d)`` or ``(N, d)``.

        A shared per-point MLP is max-pooled over points, so the result is
        exactly invariant to point order and to repeated points.
        """
        pts = np.asarray(clouds, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        if pts.ndim != 3 or pts.shape[2] != self.cfg.point_dim:
            raise ModelError(f"clouds must be (B, N, {self.cfg.point_dim}), got {pts.shape}")
        if pts.shape[1] == 0:
            raise ModelError("empty point cloud")
        p = self.params
        c = self.cfg
        b = pts.shape[0]
        pts = canonical_clouds(pts)
        h = ad.gelu(ad.linear(pts, p["enc.w1"], p["enc.b1"]))
        feats = ad.linear(h, p["enc.w2"], p["enc.b2"])
        pooled = ad.reshape(ad.max_(feats, axis=1), (b, c.enc_pool_tokens, c.cond_dim))
        q = ad.matmul(p["enc.queries"], p["enc.wq"])
        k = ad.matmul(pooled, p["enc.wk"])
        v = ad.matmul(pooled, p["enc.wv"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c.cond_dim))
        att = ad.softmax(scores, axis=-1)
        return ad.add(p["enc.queries"], ad.matmul(ad.matmul(att, v), p["enc.wo"]))

    def null_condition(self, batch: int = 1) -> Tensor:
        ones = np.ones((batch, self.cfg.cond_tokens, 1))
        return ad.mul(ones, self.params["null_cond"])

    def drop_condition(self, cond: Tensor, drop: np.ndarray) -> Tensor:
        """Swap the condition for the null token on rows where ``drop`` is true."""
        m = np.asarray(drop, dtype=np.float64)[:, None, None]
        return ad.add(ad.mul(cond, 1.0 - m), ad.mul(self.null_condition(len(m)), m))

    # -- transformer --------------------------------------------------------

    def _attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, n, d = q.shape
        m = k.shape[1]
        h = self.cfg.heads
        dh = d // h
        qh = ad.transpose(ad.reshape(q, (b, n, h, dh)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (b, m, h, dh)), (0, 2, 3, 1))
        vh = ad.transpose(ad.reshape(v, (b, m, h, dh)), (0, 2, 1, 3))
        att = ad.softmax(ad.mul(ad.matmul(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
        return ad.reshape(ad.transpose(ad.matmul(att, vh), (0, 2, 1, 3)), (b, n, d))

    def _adaln(self, z: Tensor, cvec: Tensor, prefix: str) -> Tensor:
        p = self.params
        b, _, d = z.shape
        scale = ad.reshape(ad.linear(cvec, p[f"{prefix}.scale_w"], p[f"{prefix}.scale_b"]), (b, 1, d))
        shift = ad.reshape(ad.linear(cvec, p[f"{prefix}.shift_w"], p[f"{prefix}.shift_b"]), (b, 1, d))
        return ad.add(ad.mul(ad.layer_norm(z), ad.add(scale, 1.0)), shift)

    def conditioning_vector(self, cond: Tensor, t: np.ndarray) -> Tensor:
        p = self.params
        temb = timestep_embedding(t, self.cfg.token_dim)
        pooled = ad.mean(cond, axis=1)
        c = ad.add(ad.linear(pooled, p["cond.wc"], p["cond.bc"]), ad.linear(temb, p["cond.wt"], p["cond.bt"]))
        return ad.gelu(c)

    def _site(self, kind, k, t, y, hooks, records, on_site) -> Tensor:
        site = ActivationSite(kind, k, t)
        if on_site is not None:
            on_site(site)
        action = hooks.get(site) if hooks else None
        if action is not None and action.mode is not HookMode.RECORD:
            live = y.data[0]
            if action.mode is HookMode.REPLACE:
                if action.matrix.shape != live.shape:
                    raise ModelError(f"replacement for {site} has shape {action.matrix.shape}, expected {live.shape}")
                new = action.matrix
            else:
                new = power_remap(live, action.gamma)
            y = Tensor(np.array(new, dtype=np.float64)[None])
        explicit = action is not None and action.mode is HookMode.RECORD
        if explicit and records is None:
            raise ModelError(f"RECORD hook at {site} needs a Recorder")
        if records is not None and (explicit or records.wants(site)):
            if site in records:
                raise ModelError(f"site {site} fired twice")
            records[site] = y.data[0].copy()
        return y

    def block(self, z, cond, cvec, k, t, hooks=None, records=None, on_site=None) -> Tensor:
        p = self.params
        pre = f"block{k}"
        site = lambda kind, y: self._site(kind, k, t, y, hooks, records, on_site)  # noqa: E731

        x = self._adaln(z, cvec, f"{pre}.ln1")
        sa = self._attention(ad.matmul(x, p[f"{pre}.sa.wq"]), ad.matmul(x, p[f"{pre}.sa.wk"]), ad.matmul(x, p[f"{pre}.sa.wv"]))
        sa_write = site(SiteKind.SA_WRITE, ad.linear(sa, p[f"{pre}.sa.wo"], p[f"{pre}.sa.bo"]))
        z1 = ad.add(z, sa_write)

        x = self._adaln(z1, cvec, f"{pre}.ln2")
        ca = self._attention(
            ad.matmul(x, p[f"{pre}.ca.wq"]), ad.matmul(cond, p[f"{pre}.ca.wk"]), ad.matmul(cond, p[f"{pre}.ca.wv"])
        )
        ca_write = site(SiteKind.CA_WRITE, ad.linear(ca, p[f"{pre}.ca.wo"], p[f"{pre}.ca.bo"]))
        resid = site(SiteKind.RESIDUAL, ad.add(z1, ca_write))

        x = self._adaln(resid, cvec, f"{pre}.ln3")
        hidden = ad.gelu(ad.linear(x, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]))
        mlp_write = site(SiteKind.MLP_WRITE, ad.linear(hidden, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"]))
        return ad.add(resid, mlp_write)

    def patchify(self, x: np.ndarray) -> np.ndarray:
        c = self.cfg
        b = x.shape[0]
        g, pt = c.grid, c.patch
        return x.reshape(b, g, pt, g, pt).transpose(0, 1, 3, 2, 4).reshape(b, g * g, pt * pt)

    def unpatchify(self, tokens: Tensor) -> Tensor:
        c = self.cfg
        b = tokens.shape[0]
        g, pt = c.grid, c.patch
        t5 = ad.transpose(ad.reshape(tokens, (b, g, g, pt, pt)), (0, 1, 3, 2, 4))
        return ad.reshape(t5, (b, c.field_size, c.field_size))

    def forward(self, x_t, t, cond: Tensor, hooks: Hooks | None = None, records=None, on_site=None) -> Tensor:
        """Predicted noise for fields ``x_t`` of shape ``(B, S, S)`` at integer timesteps ``t``.

        ``hooks`` and ``records`` (a :class:`Recorder`) need ``B == 1``.
        """
        c = self.cfg
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (c.field_size, c.field_size):
            raise ModelError(f"field must be {c.field_size}x{c.field_size}, got {x.shape[1:]}")
        b = x.shape[0]
        ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if np.any(ts < 1) or np.any(ts > c.timesteps):
            raise ModelError(f"timestep outside [1, {c.timesteps}]: {ts}")
        if cond.shape != (b, c.cond_tokens, c.cond_dim):
            raise ModelError(f"condition must be {(b, c.cond_tokens, c.cond_dim)}, got {cond.shape}")
        if (hooks or records is not None) and b != 1:
            raise ModelError("hooks need batch size 1")
        step = int(ts[0])
        p = self.params
        z = ad.add(ad.linear(self.patchify(x), p["embed.w"], p["embed.b"]), p["embed.pos"])
        cvec = self.conditioning_vector(cond, ts)
        for k in range(c.blocks):
            z = self.block(z, cond, cvec, k, step, hooks, records, on_site)
        out = self.unpatchify(ad.linear(ad.layer_norm(z), p["out.w"], p["out.b"]))
        if c.parametrization == "eps":
            return out
        ab = self.alpha_bar[ts - 1][:, None, None]
        return ad.add(ad.mul(out, np.sqrt(ab)), np.sqrt(1.0 - ab) * x)

    def predict(self, x_t, t, cond: Tensor, hooks=None, records=None, on_site=None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x_t, t, cond, hooks, records, on_site).data

    def block_forward(self, z, cond, k: int, t: int, hooks: Hooks | None = None, records=None) -> np.ndarray:
        """One block on a single ``token_count x token_dim`` matrix with ``M x cond_dim`` condition."""
        c = self.cfg
        z = np.asarray(z, dtype=np.float64)
        cm = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=np.float64)
        if z.shape != (c.token_count, c.token_dim):
            raise ModelError(f"Z must be {(c.token_count, c.token_dim)}, got {z.shape}")
        if cm.shape != (c.cond_tokens, c.cond_dim):
            raise ModelError(f"C must be {(c.cond_tokens, c.cond_dim)}, got {cm.shape}")
        if not 0 <= k < c.blocks:
            raise ModelError(f"block {k} outside [0, {c.blocks})")
        with ad.no_grad():
            ct = Tensor(cm[None])
            cvec = self.conditioning_vector(ct, np.array([t]))
            return self.block(Tensor(z[None]), ct, cvec, k, t, hooks, records).data[0]


class Recorder(dict):
    """Site -> matrix store filled during a forward pass.

    ``sites=None`` records every site that fires; otherwise only the listed
    ones. Sites with an explicit RECORD hook are always stored.
    """

    def __init__(self, sites=None):
        super().__init__()
        self.sites = None if sites is None else frozenset(sites)

    def wants(self, site: ActivationSite) -> bool:
        return self.sites is None or site in self.sites


def all_sites(cfg: DenoiserConfig, kinds=SITE_ORDER) -> list[ActivationSite]:
    """Every site of the given kinds, timestep outer (T..1) and block inner."""
    return [ActivationSite(kind, k, t) for t in range(cfg.timesteps, 0, -1) for k in range(cfg.blocks) for kind in kinds]


SiteCallback = Callable[[ActivationSite], None]
