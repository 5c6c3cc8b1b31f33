"""Tiny RGB encoder with a detachable low-capacity depth validator.

The encoder (patch embedding plus a learned additive positional table, a
token-wise hidden layer, one 3x3 neighbor mixing step, a linear token-wise
output layer) produces the single unified token representation. Training-
only attachments: a validator predicting dense depth + uncertainty from
tokens, a per-token semantic head, and a global projection head whose
output is aligned to a frozen teacher descriptor.
The validator must never influence the encoder/head path: constructing a
model with or without it yields bit-identical encoder parameters (separate
seed streams) and the inference path performs zero validator operations.

All forward/backward passes are hand-written numpy; training runs in
float64 so finite-difference gradient checks stay tight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, EmptySupportError
from .geometry import DepthMap, backproject

SIGMA_FLOOR = 1e-4
DEPTH_FLOOR = 1e-6  # keeps positivity through float underflow of softplus
VALIDATOR_BUDGET = 0.20  # validator params <= 20% of encoder params
CHECKPOINT_MAGIC = b"GEOE"
CHECKPOINT_VERSION = 1
DEFAULT_TEACHER_SEED = 1234
TEACHER_GRID = 4  # occupancy histogram is TEACHER_GRID**3 bins


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    patch: int = 8
    channels: int = 64
    validator_hidden: int = 24
    n_classes: int = 6
    global_dim: int = 32
    seed: int = 0
    dtype: str = "float64"  # "float32" exists for speed; acceptance uses 64

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ContractViolation("raster must be divisible by patch size")
        if self.n_classes < 2:
            raise ContractViolation("need at least two semantic classes")
        if self.dtype not in ("float64", "float32"):
            raise ContractViolation(f"unsupported dtype {self.dtype}")

    @property
    def tokens_shape(self):
        return (self.height // self.patch, self.width // self.patch)


@dataclass
class TokenGrid:
    """Per-frame grid of patch tokens."""

    tokens: np.ndarray  # (Ht, Wt, C)
    frame_index: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 3:
            raise ContractViolation(f"tokens must be (Ht, Wt, C), got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ContractViolation("tokens must be finite")


@dataclass
class ValidatorOutput:
    depth: DepthMap        # full raster, positive by construction
    sigma: np.ndarray      # full raster, >= SIGMA_FLOOR by construction


def _encoder_param_shapes(cfg: ModelConfig):
    c = cfg.channels
    ht, wt = cfg.tokens_shape
    return [
        ("enc_embed_w", (cfg.patch * cfg.patch * 3, c)),
        ("enc_embed_b", (c,)),
        ("enc_pos", (ht, wt, c)),
        ("enc_w1", (c, c)),
        ("enc_b1", (c,)),
        ("enc_mix", (3, 3, c)),
        ("enc_w2", (c, c)),
        ("enc_b2", (c,)),
    ]


def _head_param_shapes(cfg: ModelConfig):
    c = cfg.channels
    return [
        ("sem_w", (c, cfg.n_classes)),
        ("sem_b", (cfg.n_classes,)),
        ("glob_w", (c, cfg.global_dim)),
        ("glob_b", (cfg.global_dim,)),
    ]


def _validator_param_shapes(cfg: ModelConfig):
    c, v = cfg.channels, cfg.validator_hidden
    return [
        ("val_w1", (c, v)),
        ("val_b1", (v,)),
        ("val_w2", (v, v)),
        ("val_b2", (v,)),
        ("val_depth_w", (v,)),
        ("val_depth_b", ()),
        ("val_sigma_w", (v,)),
        ("val_sigma_b", ()),
    ]


_FAN_IN_OVERRIDES = {"enc_mix": 9}
# learned positional table starts at zero (an additive offset needs no
# symmetry breaking, and the untrained encoder stays a pure linear map of
# the pixels)
_ZERO_INIT = {"enc_pos"}
# the depth head starts at an indoor depth scale (softplus(2) ~ 2.1 m);
# starting near zero puts the initial residuals far outside the range the
# uncertainty regularizer is tuned for, and sigma collapses instead of the
# depth fitting. Trainers re-anchor this bias at the training set's mean
# depth (see calibrate_depth_head).
_CONST_INIT = {"val_depth_b": 2.0}


def inverse_softplus(y: float) -> float:
    if not y > 0:
        raise ContractViolation("inverse softplus needs a positive value")
    return float(np.log(np.expm1(y)))


def calibrate_depth_head(model: "Model", mean_depth: float):
    """Re-anchor the depth head bias so the untrained validator predicts the
    given mean depth. Scale-aware initialization keeps the initial residuals
    inside the range the uncertainty regularizer is designed for; without it
    sigma collapses and the depth anchor dies before fitting starts."""
    if not model.with_validator:
        return
    model.params["val_depth_b"] = np.asarray(
        inverse_softplus(max(mean_depth - DEPTH_FLOOR, 1e-3)), dtype=model.dtype)


def _init_params(shapes, rng, dtype):
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases inherit their layer's
    fan_in; draw order follows declaration order."""
    params = {}
    fan_in = 1
    for name, shape in shapes:
        if name in _ZERO_INIT:
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name in _CONST_INIT:
            params[name] = np.full(shape, _CONST_INIT[name], dtype=dtype)
            continue
        if name in _FAN_IN_OVERRIDES:
            fan_in = _FAN_IN_OVERRIDES[name]
        elif len(shape) >= 2:
            fan_in = shape[0]
        elif name.endswith("_w") and len(shape) == 1:
            fan_in = shape[0]
        # biases reuse the last seen fan_in
        limit = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


class Model:
    """Parameter container plus construction-time invariants."""

    def __init__(self, cfg: ModelConfig, with_validator: bool = True):
        self.cfg = cfg
        self.with_validator = with_validator
        self.dtype = np.float64 if cfg.dtype == "float64" else np.float32
        # Independent streams per component so attaching/detaching the
        # validator cannot perturb the encoder or head initialization.
        streams = {
            "encoder": np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,))),
            "heads": np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,))),
            "validator": np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,))),
        }
        self.params = {}
        self.params.update(_init_params(_encoder_param_shapes(cfg), streams["encoder"], self.dtype))
        self.params.update(_init_params(_head_param_shapes(cfg), streams["heads"], self.dtype))
        if with_validator:
            self.params.update(_init_params(_validator_param_shapes(cfg), streams["validator"], self.dtype))
            budget = VALIDATOR_BUDGET * self.encoder_param_count
            if self.validator_param_count > budget:
                raise ContractViolation(
                    f"validator has {self.validator_param_count} params, exceeding "
                    f"{VALIDATOR_BUDGET:.0%} of the encoder's {self.encoder_param_count}")
        self.validator_op_count = 0

    @property
    def param_names(self):
        names = [n for n, _ in _encoder_param_shapes(self.cfg) + _head_param_shapes(self.cfg)]
        if self.with_validator:
            names += [n for n, _ in _validator_param_shapes(self.cfg)]
        return names

    @property
    def encoder_param_count(self) -> int:
        return sum(int(np.prod(s, dtype=np.int64)) if s else 1
                   for _, s in _encoder_param_shapes(self.cfg))

    @property
    def validator_param_count(self) -> int:
        if not self.with_validator:
            return 0
        return sum(int(np.prod(s, dtype=np.int64)) if s else 1
                   for _, s in _validator_param_shapes(self.cfg))

    def zero_grads(self):
        return {n: np.zeros_like(self.params[n]) for n in self.param_names}

    def detached_copy(self) -> "Model":
        """Encoder + heads only; shares no state with the validator."""
        other = Model(self.cfg, with_validator=False)
        for name in other.param_names:
            other.params[name] = self.params[name].copy()
        return other


def get_flat_params(model: Model) -> np.ndarray:
    return np.concatenate([model.params[n].reshape(-1) for n in model.param_names])


def set_flat_params(model: Model, vec: np.ndarray):
    vec = np.asarray(vec, dtype=model.dtype)
    i = 0
    for name in model.param_names:
        p = model.params[name]
        n = p.size
        model.params[name] = vec[i:i + n].reshape(p.shape).copy()
        i += n
    if i != vec.size:
        raise ContractViolation(f"parameter vector has {vec.size} entries, expected {i}")


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _extract_patches(cfg: ModelConfig, rgb: np.ndarray) -> np.ndarray:
    if rgb.shape != (cfg.height, cfg.width, 3):
        raise ContractViolation(f"rgb must be {(cfg.height, cfg.width, 3)}, got {rgb.shape}")
    p = cfg.patch
    ht, wt = cfg.tokens_shape
    return (rgb.reshape(ht, p, wt, p, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(ht, wt, p * p * 3))


def encoder_forward_cached(model: Model, rgb: np.ndarray):
    """Tokens plus the cache needed for the backward pass.

    Each token sees its own patch and one ring of neighboring patches (the
    single 3x3 mixing step fixes the receptive field).
    """
    cfg = model.cfg
    patches = _extract_patches(cfg, np.asarray(rgb, dtype=model.dtype))
    p = model.params
    x0 = patches @ p["enc_embed_w"] + p["enc_embed_b"] + p["enc_pos"]
    z1 = x0 @ p["enc_w1"] + p["enc_b1"]
    h1 = np.tanh(z1)
    ht, wt, c = h1.shape
    hp = np.zeros((ht + 2, wt + 2, c), dtype=model.dtype)
    hp[1:-1, 1:-1] = h1
    m = np.zeros_like(h1)
    mix = p["enc_mix"]
    for a in range(3):
        for b in range(3):
            m += mix[a, b] * hp[a:a + ht, b:b + wt]
    # linear output layer: a saturating output would let the semantic task
    # freeze the tokens against the geometric gradients
    t2 = m @ p["enc_w2"] + p["enc_b2"]
    cache = {"patches": patches, "x0": x0, "h1": h1, "hp": hp, "m": m}
    return t2, cache


def encoder_forward(model: Model, rgb: np.ndarray, frame_index: int = 0) -> TokenGrid:
    tokens, _ = encoder_forward_cached(model, rgb)
    return TokenGrid(tokens, frame_index)


def encoder_backward(model: Model, cache, d_tokens: np.ndarray, grads: dict):
    p = model.params
    ht, wt, c = cache["h1"].shape
    dz2 = d_tokens
    flat_m = cache["m"].reshape(-1, c)
    flat_dz2 = dz2.reshape(-1, c)
    grads["enc_w2"] += flat_m.T @ flat_dz2
    grads["enc_b2"] += flat_dz2.sum(axis=0)
    dm = dz2 @ p["enc_w2"].T

    mix = p["enc_mix"]
    dhp = np.zeros_like(cache["hp"])
    for a in range(3):
        for b in range(3):
            grads["enc_mix"][a, b] += (cache["hp"][a:a + ht, b:b + wt] * dm).sum(axis=(0, 1))
            dhp[a:a + ht, b:b + wt] += mix[a, b] * dm
    dh1 = dhp[1:-1, 1:-1]

    dz1 = dh1 * (1.0 - cache["h1"] ** 2)
    flat_x0 = cache["x0"].reshape(-1, c)
    flat_dz1 = dz1.reshape(-1, c)
    grads["enc_w1"] += flat_x0.T @ flat_dz1
    grads["enc_b1"] += flat_dz1.sum(axis=0)
    dx0 = dz1 @ p["enc_w1"].T

    flat_patches = cache["patches"].reshape(-1, cache["patches"].shape[-1])
    flat_dx0 = dx0.reshape(-1, c)
    grads["enc_embed_w"] += flat_patches.T @ flat_dx0
    grads["enc_embed_b"] += flat_dx0.sum(axis=0)
    grads["enc_pos"] += dx0


# ---------------------------------------------------------------------------
# validator (training-only)
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@lru_cache(maxsize=16)
def _upsample_matrix(n_out: int, n_in: int, patch: int) -> np.ndarray:
    """Dense bilinear interpolation matrix from token axis to pixel axis.

    Token i is centered at pixel (i + 0.5) * patch - 0.5; border pixels
    clamp (edge extension), so rows sum to 1 and outputs stay inside the
    convex hull of the inputs.
    """
    a = np.zeros((n_out, n_in))
    for r in range(n_out):
        f = (r + 0.5) / patch - 0.5
        f = min(max(f, 0.0), n_in - 1.0)
        i0 = int(np.floor(f))
        i1 = min(i0 + 1, n_in - 1)
        w1 = f - i0
        a[r, i0] += 1.0 - w1
        a[r, i1] += w1
    a.setflags(write=False)
    return a


def validator_forward_cached(model: Model, tokens: np.ndarray):
    """Two linear token-wise layers (a rank bottleneck) into depth/sigma
    logits, then softplus positivity and bilinear upsampling to the raster.

    Keeping the readout linear is the weakest possible validator: it cannot
    absorb any 3D reasoning itself, so minimizing the geometric losses
    forces the depth code into the tokens in linearly-decodable form.
    """
    if not model.with_validator:
        raise ContractViolation("model was built without a validator")
    model.validator_op_count += 1
    cfg = model.cfg
    p = model.params
    g1 = tokens @ p["val_w1"] + p["val_b1"]
    g2 = g1 @ p["val_w2"] + p["val_b2"]
    raw_d = g2 @ p["val_depth_w"] + p["val_depth_b"]
    raw_s = g2 @ p["val_sigma_w"] + p["val_sigma_b"]
    tok_depth = _softplus(raw_d) + DEPTH_FLOOR
    tok_sigma = _softplus(raw_s) + SIGMA_FLOOR
    ay = _upsample_matrix(cfg.height, cfg.tokens_shape[0], cfg.patch)
    ax = _upsample_matrix(cfg.width, cfg.tokens_shape[1], cfg.patch)
    depth = ay @ tok_depth @ ax.T
    sigma = ay @ tok_sigma @ ax.T
    out = ValidatorOutput(DepthMap(depth, np.ones(depth.shape, dtype=bool)), sigma)
    cache = {"tokens": tokens, "g1": g1, "g2": g2, "raw_d": raw_d, "raw_s": raw_s,
             "ay": ay, "ax": ax}
    return out, cache


def validator_forward(model: Model, tokens) -> ValidatorOutput:
    arr = tokens.tokens if isinstance(tokens, TokenGrid) else np.asarray(tokens)
    out, _ = validator_forward_cached(model, arr)
    return out


def validator_backward(model: Model, cache, d_depth: np.ndarray, d_sigma: np.ndarray,
                       grads: dict):
    """Returns d_tokens; accumulates validator parameter grads in place."""
    p = model.params
    ay, ax = cache["ay"], cache["ax"]
    d_tok_depth = ay.T @ d_depth @ ax
    d_tok_sigma = ay.T @ d_sigma @ ax
    draw_d = d_tok_depth * _sigmoid(cache["raw_d"])
    draw_s = d_tok_sigma * _sigmoid(cache["raw_s"])

    g2 = cache["g2"]
    grads["val_depth_w"] += (g2 * draw_d[..., None]).sum(axis=(0, 1))
    grads["val_depth_b"] += draw_d.sum()
    grads["val_sigma_w"] += (g2 * draw_s[..., None]).sum(axis=(0, 1))
    grads["val_sigma_b"] += draw_s.sum()
    dg2 = draw_d[..., None] * p["val_depth_w"] + draw_s[..., None] * p["val_sigma_w"]

    g1 = cache["g1"]
    v = g1.shape[-1]
    grads["val_w2"] += g1.reshape(-1, v).T @ dg2.reshape(-1, v)
    grads["val_b2"] += dg2.reshape(-1, v).sum(axis=0)
    dg1 = dg2 @ p["val_w2"].T

    tokens = cache["tokens"]
    c = tokens.shape[-1]
    grads["val_w1"] += tokens.reshape(-1, c).T @ dg1.reshape(-1, v)
    grads["val_b1"] += dg1.reshape(-1, v).sum(axis=0)
    return dg1 @ p["val_w1"].T


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def heads_forward_cached(model: Model, tokens_list):
    """Per-frame semantic logits and the pooled global descriptor fb.

    fb is a linear projection of the mean token over the whole frame list,
    so it is invariant to frame order.
    """
    if len(tokens_list) == 0 or any(t.size == 0 for t in tokens_list):
        raise ContractViolation("heads need at least one token")
    p = model.params
    logits = [t @ p["sem_w"] + p["sem_b"] for t in tokens_list]
    stacked = np.stack(tokens_list)
    mu = stacked.mean(axis=(0, 1, 2))
    fb = mu @ p["glob_w"] + p["glob_b"]
    cache = {"tokens_list": tokens_list, "mu": mu,
             "n_tokens": stacked.shape[0] * stacked.shape[1] * stacked.shape[2]}
    return (logits, fb), cache


def heads_forward(model: Model, tokens_list):
    (logits, fb), _ = heads_forward_cached(
        model, [t.tokens if isinstance(t, TokenGrid) else np.asarray(t) for t in tokens_list])
    return logits, fb


def heads_backward(model: Model, cache, d_logits_list, d_fb, grads: dict):
    """Returns d_tokens per frame; accumulates head grads in place."""
    p = model.params
    tokens_list = cache["tokens_list"]
    c = tokens_list[0].shape[-1]
    d_tokens = [np.zeros_like(t) for t in tokens_list]

    if d_logits_list is not None:
        for t, dl, dt in zip(tokens_list, d_logits_list, d_tokens):
            k = dl.shape[-1]
            grads["sem_w"] += t.reshape(-1, c).T @ dl.reshape(-1, k)
            grads["sem_b"] += dl.reshape(-1, k).sum(axis=0)
            dt += dl @ p["sem_w"].T

    if d_fb is not None:
        grads["glob_w"] += np.outer(cache["mu"], d_fb)
        grads["glob_b"] += d_fb
        dmu = p["glob_w"] @ d_fb
        share = dmu / cache["n_tokens"]
        for dt in d_tokens:
            dt += share
    return d_tokens


# ---------------------------------------------------------------------------
# frozen teacher stand-in
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _teacher_projection(teacher_seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(teacher_seed))
    p = rng.standard_normal((dim, TEACHER_GRID ** 3))
    p.setflags(write=False)
    return p


def occupancy_histogram(frames, room_min, room_max) -> np.ndarray:
    """Normalized occupancy of gt back-projected points over a fixed
    TEACHER_GRID^3 partition of the room box."""
    room_min = np.asarray(room_min, dtype=np.float64)
    room_max = np.asarray(room_max, dtype=np.float64)
    extent = room_max - room_min
    counts = np.zeros(TEACHER_GRID ** 3)
    total = 0
    for frame in frames:
        if not frame.depth.valid.any():
            continue
        k, pose = frame.camera
        pm = backproject(frame.depth, k, pose)
        pts = pm.points[pm.valid]
        idx = np.floor((pts - room_min) / extent * TEACHER_GRID).astype(np.int64)
        idx = np.clip(idx, 0, TEACHER_GRID - 1)
        flat = (idx[:, 0] * TEACHER_GRID + idx[:, 1]) * TEACHER_GRID + idx[:, 2]
        counts += np.bincount(flat, minlength=TEACHER_GRID ** 3)
        total += pts.shape[0]
    if total == 0:
        raise EmptySupportError("no frame carries valid depth for the teacher")
    return counts / total


def teacher_descriptor(frames, room_min, room_max,
                       teacher_seed: int = DEFAULT_TEACHER_SEED,
                       dim: int = 32) -> np.ndarray:
    """Frozen scene descriptor: a fixed random projection of the ground-truth
    occupancy histogram. Deterministic per (scene, teacher_seed)."""
    hist = occupancy_histogram(frames, room_min, room_max)
    return _teacher_projection(teacher_seed, dim) @ hist


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class TrainingNanError(RuntimeError):
    """Raised on the first non-finite gradient, naming the parameter."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter '{param_name}'")
        self.param_name = param_name


class Adam:
    """Standard Adam; updates walk parameters in declaration order."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, model: Model, grads: dict):
        for name in model.param_names:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingNanError(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in model.param_names:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            model.params[name] = model.params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def backward_and_step(model: Model, grads: dict, optimizer: Adam):
    """Apply one Adam update; aborts with a diagnostic on non-finite grads."""
    optimizer.step(model, grads)
    return model


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path):
    """Versioned binary container: magic, version, JSON header (config,
    shape record, seeds), then little-endian float64 blobs in declaration
    order."""
    shapes = [[n, list(model.params[n].shape)] for n in model.param_names]
    header = {
        "config": asdict(model.cfg),
        "with_validator": model.with_validator,
        "param_shapes": shapes,
        "seeds": {"init_seed": model.cfg.seed},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in model.param_names:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path, with_validator: bool | None = None) -> Model:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", f.read(4))[0]
        header = json.loads(f.read(header_len).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        saved_with_validator = header["with_validator"]
        model = Model(cfg, with_validator=saved_with_validator)
        for name, shape in header["param_shapes"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(model.dtype)
            model.params[name] = arr.copy()
    if with_validator is False and saved_with_validator:
        return model.detached_copy()
    if with_validator is True and not saved_with_validator:
        raise ContractViolation("checkpoint has no validator parameters")
    return model
