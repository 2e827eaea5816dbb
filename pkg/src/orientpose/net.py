"""Toy multi-stage three-branch FCNN and the pose-complementation MLP.

Parameters live in plain ``dict[str, Tensor]`` containers so they can be
checkpointed by name with :func:`orientpose.grad.save_checkpoint`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .extract import InitialEstimate, normalize_orientation
from .mapcodec import N_LIMBS
from .skeleton import LimbTopology, default_lengths, fk_integrate_tensor

PC_INPUT = N_LIMBS + 3 * N_LIMBS + N_LIMBS * (N_LIMBS + 1) // 2
PC_HIDDEN = 512
_TRIU = np.triu_indices(N_LIMBS)
TRIU_FLAT = _TRIU[0] * N_LIMBS + _TRIU[1]

BRANCHES = (("conf", N_LIMBS), ("o2d", 2 * N_LIMBS), ("o3d", 3 * N_LIMBS))


@dataclass(frozen=True)
class FcnnConfig:
    stages: int = 2
    backbone: tuple[int, ...] = (16, 32, 32, 32)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    head: int = 16
    image_size: int = 64
    map_size: int = 16

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if len(self.backbone) != len(self.strides):
            raise ValueError("one stride per backbone layer")
        if self.image_size // int(np.prod(self.strides)) != self.map_size:
            raise ValueError("backbone strides must take image_size to map_size")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FcnnConfig":
        d = dict(d)
        for k in ("backbone", "strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _he(rng, shape, fan_in, dtype):
    return G.Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype),
                    requires_grad=True)


def _zeros(shape, dtype):
    return G.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _branch_inputs(cfg: FcnnConfig, stage: int, branch: str) -> int:
    feat = cfg.backbone[-1]
    if stage == 0:
        return feat
    # the 3D branch may look at everything; the others only at conf + 2D maps
    return feat + (6 * N_LIMBS if branch == "o3d" else 3 * N_LIMBS)


def init_fcnn(cfg: FcnnConfig, seed: int = 0, dtype=np.float32) -> dict[str, G.Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, G.Tensor] = {}
    cin = 3
    for i, cout in enumerate(cfg.backbone):
        params[f"backbone.{i}.w"] = _he(rng, (cout, cin, 3, 3), cin * 9, dtype)
        params[f"backbone.{i}.b"] = _zeros((cout,), dtype)
        cin = cout
    for t in range(cfg.stages):
        for name, cout in BRANCHES:
            cin = _branch_inputs(cfg, t, name)
            params[f"stage{t}.{name}.0.w"] = _he(rng, (cfg.head, cin, 3, 3), cin * 9, dtype)
            params[f"stage{t}.{name}.0.b"] = _zeros((cfg.head,), dtype)
            # zero output layer: random initial orientation outputs against mostly-zero
            # targets otherwise drive the head relus dead within a few steps
            params[f"stage{t}.{name}.1.w"] = _zeros((cout, cfg.head, 1, 1), dtype)
            params[f"stage{t}.{name}.1.b"] = _zeros((cout,), dtype)
    return params


def zero_like_params(params: dict[str, G.Tensor]) -> dict[str, G.Tensor]:
    return {k: G.Tensor(np.zeros_like(p.data), requires_grad=True) for k, p in params.items()}


def branch_params(params: dict, branch: str) -> dict:
    return {k: p for k, p in params.items() if f".{branch}." in k}


def fcnn_forward(image, params: dict[str, G.Tensor], cfg: FcnnConfig) -> list[G.Tensor]:
    """``(N, 3, H, W)`` image -> one ``(N, 96, h, w)`` map tensor per stage.

    Confidence channels pass through a sigmoid; orientation channels are linear.
    """
    x = image if isinstance(image, G.Tensor) else G.Tensor(image)
    if x.ndim != 4 or x.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"fcnn_forward: expected (N, 3, {cfg.image_size}, {cfg.image_size}), "
                         f"got {x.shape}")
    for i, s in enumerate(cfg.strides):
        x = G.leaky_relu(G.conv2d(x, params[f"backbone.{i}.w"], params[f"backbone.{i}.b"], stride=s, pad=1))
    feats = x
    outs: list[G.Tensor] = []
    prev = None
    for t in range(cfg.stages):
        heads = []
        for name, _ in BRANCHES:
            if prev is None:
                inp = feats
            elif name == "o3d":
                inp = G.concat([feats, prev], axis=1)
            else:
                inp = G.concat([feats, prev[:, :3 * N_LIMBS]], axis=1)
            h = G.leaky_relu(G.conv2d(inp, params[f"stage{t}.{name}.0.w"], params[f"stage{t}.{name}.0.b"],
                                pad=1))
            h = G.conv2d(h, params[f"stage{t}.{name}.1.w"], params[f"stage{t}.{name}.1.b"])
            heads.append(G.sigmoid(h) if name == "conf" else h)
        prev = G.concat(heads, axis=1)
        outs.append(prev)
    return outs


def init_pc(seed: int = 0, dtype=np.float64, zero_output: bool = True) -> dict[str, G.Tensor]:
    """PC weights; a zero output layer makes the untrained network an identity update."""
    rng = np.random.default_rng(seed)
    p = {
        "pc.in.w": _he(rng, (PC_INPUT, PC_HIDDEN), PC_INPUT, dtype),
        "pc.in.b": _zeros((PC_HIDDEN,), dtype),
        "pc.h1.w": _he(rng, (PC_HIDDEN, PC_HIDDEN), PC_HIDDEN, dtype),
        "pc.h1.b": _zeros((PC_HIDDEN,), dtype),
        "pc.h2.w": _he(rng, (PC_HIDDEN, PC_HIDDEN), PC_HIDDEN, dtype),
        "pc.h2.b": _zeros((PC_HIDDEN,), dtype),
        "pc.out.w": _he(rng, (PC_HIDDEN, 3 * N_LIMBS), PC_HIDDEN, dtype),
        "pc.out.b": _zeros((3 * N_LIMBS,), dtype),
    }
    if zero_output:
        p["pc.out.w"].data[...] = 0
    return p


def pc_features(est: InitialEstimate) -> G.Tensor:
    """``(N, 200)``: scores, flattened orientations, score-masked orientation correlations.

    The correlation block is the upper triangle (diagonal included, row-major)
    of ``(v_i . v_j) * s_i * s_j``.
    """
    v = est.orients if isinstance(est.orients, G.Tensor) else G.Tensor(est.orients)
    s = est.scores if isinstance(est.scores, G.Tensor) else G.Tensor(est.scores)
    if v.ndim == 2:
        v, s = v.reshape(1, N_LIMBS, 3), s.reshape(1, N_LIMBS)
    n = v.shape[0]
    gram = G.matmul(v, G.transpose(v, (0, 2, 1)))
    outer = G.matmul(s.reshape(n, N_LIMBS, 1), s.reshape(n, 1, N_LIMBS))
    corr = G.take((gram * outer).reshape(n, N_LIMBS * N_LIMBS), TRIU_FLAT, axis=1)
    return G.concat([s, v.reshape(n, 3 * N_LIMBS), corr], axis=1)


def _linear(x: G.Tensor, params: dict, name: str) -> G.Tensor:
    y = G.matmul(x, params[f"{name}.w"])
    return y + G.broadcast(params[f"{name}.b"], y.shape)


def pc_forward(x, params: dict[str, G.Tensor]) -> G.Tensor:
    """``(N, 200)`` features -> ``(N, 16, 3)`` orientation corrections."""
    x = x if isinstance(x, G.Tensor) else G.Tensor(x)
    if x.shape[-1] != PC_INPUT:
        raise ValueError(f"pc_forward: expected {PC_INPUT} features, got {x.shape[-1]}")
    h1 = G.relu(_linear(_linear(x, params, "pc.in"), params, "pc.h1"))
    h2 = G.relu(_linear(h1, params, "pc.h2")) + h1
    out = _linear(h2, params, "pc.out")
    return out.reshape(x.shape[0], N_LIMBS, 3)


def pc_apply(v, dv) -> G.Tensor:
    """``(v + dv) / |v + dv|``, or zero when the sum is shorter than 1e-6."""
    v = v if isinstance(v, G.Tensor) else G.Tensor(v)
    dv = dv if isinstance(dv, G.Tensor) else G.Tensor(dv)
    return normalize_orientation(v + dv, 1e-6)


@dataclass
class Complemented:
    orients: G.Tensor
    delta: G.Tensor
    pose: G.Tensor


def pc_complement(est: InitialEstimate, params: dict[str, G.Tensor], lengths=None,
                  topo: LimbTopology | None = None) -> Complemented:
    """Complement an initial estimate; the estimate is detached from its producer."""
    lengths = default_lengths() if lengths is None else lengths
    dtype = params["pc.in.w"].dtype
    v = G.Tensor(np.asarray(_data(est.orients), dtype=dtype))
    s = G.Tensor(np.asarray(_data(est.scores), dtype=dtype))
    if v.ndim == 2:
        v, s = v.reshape(1, N_LIMBS, 3), s.reshape(1, N_LIMBS)
    dv = pc_forward(pc_features(InitialEstimate(v, None, s, None)), params)
    vc = pc_apply(v, dv)
    return Complemented(vc, dv, fk_integrate_tensor(vc, lengths, topo))


def _data(x):
    return x.data if isinstance(x, G.Tensor) else x


def n_params(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class Model:
    cfg: FcnnConfig
    fcnn: dict = field(default_factory=dict)
    pc: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: FcnnConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_fcnn(cfg, seed), init_pc(seed + 1, dtype=np.float32))

    def all_params(self) -> dict:
        return {**{f"fcnn.{k}": v for k, v in self.fcnn.items()}, **self.pc}
