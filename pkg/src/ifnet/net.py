"""L2-Net style convolutional descriptor network and its checkpoint format."""
import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .errors import CheckpointMismatch, InvalidConfig, WrongPatchSize
from .tensor import Tensor, format_tensor, parse_tensors

FULL_PLAN = (32, 32, 64, 64, 128, 128)
TOY_PLAN = tuple(c // 8 for c in FULL_PLAN)
DEFAULT_STRIDES = (1, 1, 2, 1, 2, 1)
CHECKPOINT_MAGIC = "IFNETCKPT1"
NORM_FLOOR = 1e-12


@dataclass
class NetConfig:
    input_side: int = 32
    channel_plan: tuple = FULL_PLAN
    strides: tuple = DEFAULT_STRIDES
    descriptor_dim: int = 128
    batchnorm_enabled: bool = True
    rng_seed: int = 0
    dtype: str = "float32"
    bn_momentum: float = 0.1

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("channel_plan", TOY_PLAN)
        return cls(**kw)

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.strides = tuple(int(s) for s in self.strides)

    @property
    def downsampling(self):
        return int(np.prod(self.strides))

    def validate(self):
        if self.descriptor_dim < 2:
            raise InvalidConfig(f"descriptor_dim must be >= 2, got {self.descriptor_dim}")
        if len(self.channel_plan) != len(self.strides) or not self.channel_plan:
            raise InvalidConfig("channel_plan and strides must be non-empty and equally long")
        if any(c < 1 for c in self.channel_plan) or any(s < 1 for s in self.strides):
            raise InvalidConfig("channel counts and strides must be positive")
        if self.input_side < 1 or self.input_side % self.downsampling:
            raise InvalidConfig(
                f"input_side {self.input_side} not divisible by total stride {self.downsampling}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"unsupported dtype {self.dtype!r}")

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return lines

    @classmethod
    def from_text(cls, pairs):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in pairs.items():
            if key not in types:
                continue
            if key in ("channel_plan", "strides"):
                kw[key] = tuple(int(v) for v in value.split(",") if v)
            elif key == "batchnorm_enabled":
                kw[key] = value.strip().lower() in ("1", "true", "yes")
            elif key in ("input_side", "descriptor_dim", "rng_seed"):
                kw[key] = int(value)
            elif key == "bn_momentum":
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)


@dataclass
class Network:
    config: NetConfig
    weights: list = field(default_factory=list)
    running: list = field(default_factory=list)

    @property
    def parameters(self):
        return self.weights

    def buffers(self):
        return [b for pair in self.running for b in pair]

    def n_parameters(self):
        return sum(w.size for w in self.weights)

    def zero_grad(self):
        for w in self.weights:
            w.zero_grad()

    def digest(self):
        h = hashlib.sha256()
        for w in self.weights:
            h.update(w.values.tobytes())
        return h.hexdigest()

    def copy(self):
        clone = Network(self.config)
        clone.weights = [Tensor(w.values.copy(), requires_grad=True) for w in self.weights]
        clone.running = [(m.copy(), v.copy()) for m, v in self.running]
        return clone

    def astype(self, dtype):
        cfg = NetConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        clone = Network(cfg)
        clone.weights = [Tensor(w.values.astype(dtype), requires_grad=True) for w in self.weights]
        clone.running = [(m.astype(np.float64), v.astype(np.float64)) for m, v in self.running]
        return clone


def init(config):
    """Build a network with weights drawn U(-b, b), b = sqrt(6 / fan_in), from config.rng_seed."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    dtype = np.dtype(config.dtype)
    net = Network(config)
    in_ch = 1
    for out_ch in config.channel_plan:
        net.weights.append(_uniform(rng, (out_ch, in_ch, 3, 3), dtype))
        in_ch = out_ch
    side = config.input_side // config.downsampling
    net.weights.append(_uniform(rng, (config.descriptor_dim, in_ch, side, side), dtype))
    if config.batchnorm_enabled:
        for ch in list(config.channel_plan) + [config.descriptor_dim]:
            net.running.append((np.zeros(ch), np.ones(ch)))
    return net


def _uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def prepare_patches(patches, input_side=32):
    """64x64 patches (uint8 or [0, 1] floats) -> normalised (B, 1, side, side) float32.

    Downsampling by an integer factor uses box averaging, which coincides with
    bilinear resampling at half-pixel centres for a factor of 2.
    """
    arr = np.asarray(patches)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4:
        arr = arr[:, 0]
    arr = arr.astype(np.float32)
    if np.issubdtype(np.asarray(patches).dtype, np.integer):
        arr /= 255.0
    side = arr.shape[-1]
    if arr.shape[-2] != side:
        raise WrongPatchSize(f"patches must be square, got {arr.shape[1:]}")
    if side != input_side:
        if side % input_side:
            raise WrongPatchSize(f"cannot resample {side}px patches to {input_side}px")
        f = side // input_side
        arr = arr.reshape(arr.shape[0], input_side, f, input_side, f).mean(axis=(2, 4))
    mu = arr.mean(axis=(1, 2), keepdims=True)
    sd = np.maximum(arr.std(axis=(1, 2), keepdims=True), 1e-6)
    return ((arr - mu) / sd)[:, None].astype(np.float32)


def describe(net, patches, train_mode=False):
    """Map prepared patches (B, 1, side, side) to unit-norm descriptor rows (B, dim).

    In train mode batch-norm uses batch statistics and updates its running
    buffers; otherwise the running statistics are used.
    """
    cfg = net.config
    x = patches if isinstance(patches, Tensor) else Tensor(
        np.asarray(patches, dtype=cfg.dtype), dtype=np.dtype(cfg.dtype))
    if x.values.ndim == 3:
        x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.values.ndim != 4 or x.shape[1:] != (1, cfg.input_side, cfg.input_side):
        raise WrongPatchSize(
            f"expected patches of shape (B, 1, {cfg.input_side}, {cfg.input_side}), got {x.shape}")
    h = x
    n_stages = len(cfg.channel_plan)
    for k, stride in enumerate(cfg.strides):
        h = ops.conv2d(h, net.weights[k], stride=stride, padding=1)
        if cfg.batchnorm_enabled:
            rm, rv = net.running[k]
            h = ops.batch_norm(h, rm, rv, train_mode, cfg.bn_momentum)
        h = ops.relu(h)
    h = ops.conv2d(h, net.weights[n_stages])
    h = ops.reshape(h, (h.shape[0], cfg.descriptor_dim))
    if cfg.batchnorm_enabled:
        rm, rv = net.running[n_stages]
        h = ops.batch_norm(h, rm, rv, train_mode, cfg.bn_momentum)
    dead = np.linalg.norm(h.values, axis=1) <= NORM_FLOOR
    if dead.any():
        # all-zero features (e.g. a flat patch through fresh weights) still get a unit descriptor
        fill = np.zeros(h.shape, dtype=h.values.dtype)
        fill[dead] = 1.0 / np.sqrt(cfg.descriptor_dim)
        h = ops.add(h, Tensor(fill))
    return ops.l2_normalize(h, NORM_FLOOR)


def describe_array(net, patches, batch=256):
    """Eval-mode descriptors for raw patches, as a float64 array."""
    prepared = prepare_patches(patches, net.config.input_side)
    out = []
    for start in range(0, len(prepared), batch):
        out.append(describe(net, prepared[start:start + batch]).values.astype(np.float64))
    if not out:
        return np.zeros((0, net.config.descriptor_dim))
    return np.concatenate(out, axis=0)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(net, path):
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        for line in net.config.to_text():
            fh.write(line + "\n")
        for w in net.weights:
            fh.write(format_tensor(w.values))
        for m, v in net.running:
            fh.write(format_tensor(m))
            fh.write(format_tensor(v))


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: missing {CHECKPOINT_MAGIC} header")
    pairs = {}
    body_start = len(lines)
    for i, line in enumerate(lines[1:], start=1):
        if line.startswith("shape:"):
            body_start = i
            break
        if "=" in line:
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
    config = NetConfig.from_text(pairs)
    try:
        config.validate()
    except InvalidConfig as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    template = init(config)
    arrays = parse_tensors(lines[body_start:])
    expected = len(template.weights) + 2 * len(template.running)
    if len(arrays) != expected:
        raise CheckpointMismatch(f"{path}: expected {expected} tensors, found {len(arrays)}")
    dtype = np.dtype(config.dtype)
    for w, arr in zip(template.weights, arrays):
        if arr.shape != w.shape:
            raise CheckpointMismatch(f"{path}: tensor shape {arr.shape} != {w.shape}")
        w.values[...] = arr.astype(dtype)
    rest = arrays[len(template.weights):]
    template.running = [(rest[2 * i].copy(), rest[2 * i + 1].copy())
                        for i in range(len(template.running))]
    return template
