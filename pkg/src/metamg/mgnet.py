"""Learned smoothers: trainable convolution kernels and hypernetwork-generated smoothers.

Three models share the \\-cycle of :mod:`metamg.multigrid`:

``PdeMgNet``
    one trainable kernel per (level, smoothing step), ``e = B * r``.
``MetaMgNetSC``
    a fully connected net maps the fine operator stencil to the weights of a
    linear dense block; the block turns ``r`` into a subspace basis (with ``r``
    itself as the first channel) used for subspace correction.
``MetaMgNetDirect``
    a fully connected net maps stencil features and a pooled summary of the
    normalized residual to a 7x7 smoothing kernel.

Forward passes take an ops backend and a name -> array (or ``Var``) mapping,
so the same code runs plain or under a :class:`~metamg.autodiff.Tape`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ArrayOps
from .grid import ContractError
from .multigrid import Hierarchy, MgConfig, iterate, slash_cycle
from .smoothers import subspace_correction


def _glorot(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def stencil_features(stencils):
    """Flattened stencils scaled by their max-abs entry, shape ``(batch, taps)``."""
    rows = []
    for K in stencils:
        taps = K.taps_array.ravel()
        peak = np.abs(taps).max()
        rows.append(taps / peak if peak > 0 else taps)
    return np.stack(rows)


def _check_finite(ops, x, what):
    if not np.all(np.isfinite(ops.value(x))):
        raise FloatingPointError(f"non-finite {what}")


@dataclass
class PdeMgNet:
    """Per-level, per-step convolution smoothers."""

    levels: int = 4
    nu: tuple = (2, 1, 1, 1)
    taps: int = 7
    ndim: int = 2
    params: dict = field(default_factory=dict)

    kind = "pde_mgnet"

    def __post_init__(self):
        self.nu = tuple(int(v) for v in self.nu)
        if len(self.nu) == self.levels - 1:
            self.nu = self.nu + (1,)
        if len(self.nu) != self.levels:
            raise ValueError("need one smoothing count per level")
        if self.taps % 2 == 0:
            raise ValueError("kernel taps must be odd")

    @staticmethod
    def kernel_name(level, step):
        return f"kernel_l{level}_s{step}"

    def param_shapes(self):
        shape = (1, 1) + (self.taps,) * self.ndim
        return {self.kernel_name(l, i): shape
                for l in range(self.levels - 1) for i in range(self.nu[l])}

    def init_params(self, centers, rng=None):
        """Jacobi-like start: ``(2/3) / center`` on the middle tap.

        ``centers[l]`` is the (typical) center tap of the level-``l`` operator.
        """
        params = {}
        for name, shape in self.param_shapes().items():
            level = int(name.split("_")[1][1:])
            k = np.zeros(shape)
            k[(0, 0) + (self.taps // 2,) * self.ndim] = (2.0 / 3.0) / centers[level]
            params[name] = k
        self.params = params
        return self

    def metadata(self):
        return {"kind": self.kind, "levels": self.levels, "nu": ",".join(map(str, self.nu)),
                "taps": self.taps, "ndim": self.ndim}

    def smoother(self, ops, params, hier):
        def smooth(ops_, level, step, r):
            return ops.conv(params[self.kernel_name(level, step)], r)
        return smooth


@dataclass
class MetaMgNetSC:
    """Hypernetwork subspace generator.

    The dense block has ``layers`` linear convolutions; layer ``k`` maps the
    ``1 + k * growth`` channels gathered so far to ``growth`` new ones. The
    basis is all gathered channels, so ``L = 1 + layers * growth``.
    """

    ndim: int = 2
    layers: int = 3
    growth: int = 3
    taps: int = 7
    hidden: int = 100
    params: dict = field(default_factory=dict)

    kind = "meta_sc"

    @classmethod
    def default_3d(cls):
        return cls(ndim=3, layers=1, growth=3, taps=7)

    @property
    def stencil_size(self):
        return 3 ** self.ndim

    @property
    def basis_size(self):
        return 1 + self.layers * self.growth

    def block_shapes(self):
        return [(self.growth, 1 + k * self.growth) + (self.taps,) * self.ndim
                for k in range(self.layers)]

    @property
    def gamma_size(self):
        return sum(int(np.prod(s)) for s in self.block_shapes())

    def param_shapes(self):
        return {"fc1_w": (self.stencil_size, self.hidden), "fc1_b": (self.hidden,),
                "fc2_w": (self.hidden, self.gamma_size), "fc2_b": (self.gamma_size,)}

    def init_params(self, rng):
        rng = np.random.default_rng(rng)
        self.params = {
            "fc1_w": _glorot(rng, self.stencil_size, self.hidden),
            "fc1_b": np.zeros(self.hidden),
            "fc2_w": _glorot(rng, self.hidden, self.gamma_size),
            "fc2_b": np.zeros(self.gamma_size),
        }
        return self

    def zero_params(self):
        self.params = {k: np.zeros(s) for k, s in self.param_shapes().items()}
        return self

    def metadata(self):
        return {"kind": self.kind, "ndim": self.ndim, "layers": self.layers,
                "growth": self.growth, "taps": self.taps, "hidden": self.hidden}

    def block_weights(self, ops, params, stencils):
        """Per-sample dense-block kernels, one ``(batch, out, in, *taps)`` per layer."""
        x = ops.const(stencil_features(stencils))
        h = ops.relu(ops.dense(x, params["fc1_w"], params["fc1_b"]))
        gamma = ops.dense(h, params["fc2_w"], params["fc2_b"])
        _check_finite(ops, gamma, "hypernetwork output")
        batch = len(stencils)
        weights, start = [], 0
        for shape in self.block_shapes():
            size = int(np.prod(shape))
            part = ops.take(gamma, (slice(None), slice(start, start + size)))
            weights.append(ops.reshape(part, (batch,) + shape))
            start += size
        return weights

    def basis(self, ops, weights, r):
        """Dense-block output ``(batch, L, *extent)``; channel 0 is ``r`` itself."""
        feats = [r]
        for w in weights:
            x = feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)
            feats.append(ops.conv(w, x, per_sample=True))
        return ops.concat(feats, axis=1)

    def smoother(self, ops, params, hier):
        weights = self.block_weights(ops, params, hier.fine_stencils())

        def smooth(ops_, level, step, r):
            G = self.basis(ops, weights, r)
            _check_finite(ops, G, "subspace basis")
            return subspace_correction(ops, hier.coefs[level], G, r)
        return smooth


def adaptive_pool_matrix(n, bins):
    """Row ``p`` averages nodes ``floor(p n / bins) .. ceil((p + 1) n / bins) - 1``."""
    M = np.zeros((bins, n))
    for p in range(bins):
        lo = (p * n) // bins
        hi = -(-((p + 1) * n) // bins)
        M[p, lo:hi] = 1.0 / (hi - lo)
    return M


@dataclass
class MetaMgNetDirect:
    """Fully connected net emitting a smoothing kernel from (stencil, residual)."""

    taps: int = 7
    hidden: int = 100
    pool: int = 8
    params: dict = field(default_factory=dict)

    kind = "meta_direct"
    ndim = 2

    @property
    def feature_size(self):
        return 9 + self.pool * self.pool

    def param_shapes(self):
        k = self.taps * self.taps
        return {"fc1_w": (self.feature_size, self.hidden), "fc1_b": (self.hidden,),
                "fc2_w": (self.hidden, self.hidden), "fc2_b": (self.hidden,),
                "fc3_w": (self.hidden, k), "fc3_b": (k,)}

    def init_params(self, rng, center=None):
        """Random hidden layers; output bias starts as a damped Jacobi kernel."""
        rng = np.random.default_rng(rng)
        k = self.taps * self.taps
        self.params = {
            "fc1_w": _glorot(rng, self.feature_size, self.hidden), "fc1_b": np.zeros(self.hidden),
            "fc2_w": _glorot(rng, self.hidden, self.hidden), "fc2_b": np.zeros(self.hidden),
            "fc3_w": _glorot(rng, self.hidden, k) * 1e-2, "fc3_b": np.zeros(k),
        }
        if center is not None:
            self.params["fc3_b"][k // 2] = (2.0 / 3.0) / center
        return self

    def zero_params(self):
        self.params = {k: np.zeros(s) for k, s in self.param_shapes().items()}
        return self

    def metadata(self):
        return {"kind": self.kind, "taps": self.taps, "hidden": self.hidden, "pool": self.pool}

    def kernel(self, ops, params, stencil_feats, r):
        """Per-sample kernels ``(batch, 1, 1, taps, taps)`` for residual ``r``."""
        shape = ops.value(r).shape
        if len(shape) != 4:
            raise ContractError("the direct meta-smoother is two-dimensional")
        batch, _, ny, nx = shape
        z = ops.reshape(ops.rms_normalize(r), (batch, ny, nx))
        z = ops.einsum("pj,bji->bpi", adaptive_pool_matrix(ny, self.pool), z)
        z = ops.einsum("bpi,qi->bpq", z, adaptive_pool_matrix(nx, self.pool))
        x = ops.concat([stencil_feats, ops.reshape(z, (batch, self.pool * self.pool))], axis=1)
        h = ops.relu(ops.dense(x, params["fc1_w"], params["fc1_b"]))
        h = ops.relu(ops.dense(h, params["fc2_w"], params["fc2_b"]))
        k = ops.dense(h, params["fc3_w"], params["fc3_b"])
        _check_finite(ops, k, "smoothing kernel")
        return ops.reshape(k, (batch, 1, 1, self.taps, self.taps))

    def smoother(self, ops, params, hier):
        feats = ops.const(stencil_features(hier.fine_stencils()))

        def smooth(ops_, level, step, r):
            return ops.conv(self.kernel(ops, params, feats, r), r, per_sample=True)
        return smooth


MODELS = {cls.kind: cls for cls in (PdeMgNet, MetaMgNetSC, MetaMgNetDirect)}


def model_cycle(ops, model, params, hier: Hierarchy, f, nu):
    """One \\-cycle with the model's smoother."""
    return slash_cycle(ops, hier, f, nu, model.smoother(ops, params, hier))


def _cycle_nu(model, config):
    if isinstance(model, PdeMgNet):
        if config is not None and config.levels != model.levels:
            raise ContractError(f"model has {model.levels} levels, config asks for {config.levels}")
        return model.nu
    return config.nu


def pde_mgnet_forward(f, model: PdeMgNet, hier: Hierarchy, ops=None, params=None):
    """One PDE-MgNet cycle applied to ``f`` (field or batch)."""
    ops = ops or ArrayOps()
    params = model.params if params is None else params
    if hier.depth != model.levels:
        raise ContractError(f"model has {model.levels} levels, hierarchy has {hier.depth}")
    for name, shape in model.param_shapes().items():
        if np.shape(ops.value(params[name])) != shape:
            raise ContractError(f"parameter {name} should have shape {shape}")
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == hier.ndim + 1
    fb = f[None] if single else f
    u = model_cycle(ops, model, params, hier, fb, model.nu)
    return u[0] if single else u


def meta_nn_sc(r, stencil, model: MetaMgNetSC, params=None):
    """Subspace basis ``(L, *extent)`` for a single residual field ``(1, *extent)``."""
    ops = ArrayOps()
    params = model.params if params is None else params
    r = np.asarray(r, dtype=np.float64)
    if r.shape[0] != 1:
        raise ContractError("the meta subspace generator takes a single-channel residual")
    weights = model.block_weights(ops, params, [stencil])
    G = model.basis(ops, weights, r[None])[0]
    _check_finite(ops, G, "subspace basis")
    return G


def meta_sc_smoother(stencil, r, model: MetaMgNetSC, params=None):
    ops = ArrayOps()
    G = meta_nn_sc(r, stencil, model, params)
    coef = np.asarray(stencil.coef)[None]
    return subspace_correction(ops, coef, G[None], np.asarray(r, dtype=np.float64)[None])[0]


def meta_direct_smoother(stencil, r, model: MetaMgNetDirect, params=None):
    """Returns the generated kernel ``(taps, taps)`` and the correction ``B * r``."""
    ops = ArrayOps()
    params = model.params if params is None else params
    r = np.asarray(r, dtype=np.float64)[None]
    feats = stencil_features([stencil])
    K = model.kernel(ops, params, feats, r)
    e = ops.conv(K, r, per_sample=True)
    return K[0, 0, 0], e[0]


def learned_solve(model, hier: Hierarchy, f, config: MgConfig, callback=None):
    """Outer iteration ``u <- u + cycle(f - A u)`` with a learned smoother."""
    ops = ArrayOps()
    nu = _cycle_nu(model, config)
    if hier.depth != len(nu):
        raise ContractError(f"hierarchy has {hier.depth} levels, smoothing counts cover {len(nu)}")
    smooth = model.smoother(ops, model.params, hier)
    return iterate(hier, f, lambda r: slash_cycle(ops, hier, r, nu, smooth),
                   config.tol, config.max_iters, config.divergence, callback)


def meta_mgnet_iterate(f, hier: Hierarchy, model, config: MgConfig, callback=None):
    return learned_solve(model, hier, f, config, callback)


# Checkpoint layout (all integers little-endian):
#   magic b"METAMGCK", u32 version
#   u32 metadata length, utf-8 "key=value" lines
#   u32 parameter count, then per parameter (sorted by name):
#     u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, float64 values (C order)

CHECKPOINT_MAGIC = b"METAMGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, extra=None):
    meta = dict(model.metadata())
    for key, value in (extra or {}).items():
        if key in meta or "=" in str(key) or "\n" in f"{key}{value}":
            raise ValueError(f"invalid extra metadata entry {key!r}")
        meta[key] = value
    text = "\n".join(f"{k}={v}" for k, v in meta.items()).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(text)), text, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        value = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _parse_meta(text):
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def load_checkpoint(path):
    """Rebuild a model (with parameters) and return ``(model, metadata)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = 8
    try:
        version, size = struct.unpack_from("<II", data, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += 8
        meta = _parse_meta(data[pos:pos + size].decode("utf-8"))
        pos += size
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            if pos + 8 * n > len(data):
                raise struct.error("parameter values cut short")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as err:
        raise CheckpointError(f"truncated checkpoint {path}") from err
    if pos != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    model = _model_from_meta(meta)
    expected = model.param_shapes()
    if set(expected) != set(params) or any(params[k].shape != tuple(expected[k]) for k in params):
        raise CheckpointError("checkpoint parameters do not match the model description")
    model.params = params
    return model, meta


def _model_from_meta(meta):
    kind = meta.get("kind")
    if kind == "pde_mgnet":
        return PdeMgNet(levels=int(meta["levels"]), nu=tuple(int(v) for v in meta["nu"].split(",")),
                        taps=int(meta["taps"]), ndim=int(meta["ndim"]))
    if kind == "meta_sc":
        return MetaMgNetSC(ndim=int(meta["ndim"]), layers=int(meta["layers"]),
                           growth=int(meta["growth"]), taps=int(meta["taps"]), hidden=int(meta["hidden"]))
    if kind == "meta_direct":
        return MetaMgNetDirect(taps=int(meta["taps"]), hidden=int(meta["hidden"]), pool=int(meta["pool"]))
    raise CheckpointError(f"unknown model kind {kind!r}")
