"""Region-classification baseline and end-to-end region-to-pixel networks.

Both share one pipeline up to the region scores::

    image -> conv3x3(16) -> relu -> maxpool2 -> conv3x3(32) -> relu
          -> ROI pooling (free-form and/or box) -> fc(64) -> relu -> fc(C)

The end-to-end network then applies the region-to-pixel layer and a pixel
loss; the baseline trains on region labels and predicts with softmax before
the max over regions.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import core
from .core import DTYPE, Param
from .region_to_pixel import PixelScoreMap, predict_baseline, predict_endtoend, r2p_backward, r2p_forward
from .regions import RegionSet
from .roi_pooling import ConvRegionMask, PoolPlan, build_plan, pool_backward, pool_forward, rasterize_mask

FUSIONS = ("box-only", "region-only", "tied", "separate")
SOFTMAX_ORDERS = ("max-then-softmax", "softmax-then-max")
KINDS = ("endtoend", "baseline")
BACKBONE_STRIDE = 2

CHECKPOINT_MAGIC = b"RSEGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 8
    kind: str = "endtoend"
    fusion: str = "separate"
    loss: str = "balanced"
    softmax_order: str = "max-then-softmax"
    conv_channels: tuple[int, int] = (16, 32)
    pooled_size: tuple[int, int] = (6, 6)
    head_width: int = 64
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.softmax_order not in SOFTMAX_ORDERS:
            raise ValueError(f"softmax_order must be one of {SOFTMAX_ORDERS}")
        if self.loss not in ("balanced", "unbalanced"):
            raise ValueError("loss must be 'balanced' or 'unbalanced'")
        if self.kind == "baseline" and self.fusion != "box-only":
            raise ValueError("the baseline network pools bounding boxes only")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "pooled_size", tuple(self.pooled_size))

    @property
    def uses_region(self) -> bool:
        return self.fusion != "box-only"

    @property
    def uses_box(self) -> bool:
        return self.fusion != "region-only"

    @property
    def pooled_features(self) -> int:
        return self.pooled_size[0] * self.pooled_size[1] * self.conv_channels[1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CheckpointError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class PreparedRegions:
    """A region set with its feature-map masks and pooling plans for one image size."""

    regions: RegionSet
    region_plan: PoolPlan | None
    box_plan: PoolPlan | None

    def __len__(self):
        return len(self.regions)


def prepare_regions(regions: RegionSet, cfg: ModelConfig) -> PreparedRegions:
    image_size = (regions.height, regions.width)
    fm_size = (regions.height // BACKBONE_STRIDE, regions.width // BACKBONE_STRIDE)
    masks = [rasterize_mask(r, image_size, fm_size) for r in regions]
    region_plan = build_plan(masks, cfg.pooled_size, fm_size) if cfg.uses_region else None
    box_plan = None
    if cfg.uses_box:
        boxes = [ConvRegionMask.full_box(m.bbox_fm, fm_size) for m in masks]
        box_plan = build_plan(boxes, cfg.pooled_size, fm_size)
    return PreparedRegions(regions, region_plan, box_plan)


def init_params(cfg: ModelConfig, image_channels: int = 3) -> dict[str, Param]:
    rng = np.random.default_rng(cfg.init_seed)
    c1, c2 = cfg.conv_channels
    fc_in = cfg.pooled_features * (2 if cfg.fusion == "separate" else 1)
    shapes = {
        "conv1.w": ((3, 3, image_channels, c1), 9 * image_channels, 9 * c1),
        "conv2.w": ((3, 3, c1, c2), 9 * c1, 9 * c2),
        "fc1.w": ((fc_in, cfg.head_width), fc_in, cfg.head_width),
        "cls.w": ((cfg.head_width, cfg.num_classes), cfg.head_width, cfg.num_classes),
    }
    params = {}
    for name, (shape, fan_in, fan_out) in shapes.items():
        params[name] = Param(core.glorot_uniform(rng, shape, fan_in, fan_out))
        params[name.replace(".w", ".b")] = Param(np.zeros(shape[-1]))
    return params


@dataclass
class ForwardCache:
    prepared: PreparedRegions
    backbone: tuple
    fm_shape: tuple
    region_arg: np.ndarray | None = None
    box_arg: np.ndarray | None = None
    heads: list = field(default_factory=list)
    logp: np.ndarray | None = None
    pixels: PixelScoreMap | None = None


class Model:
    """Parameters plus forward/backward for either architecture."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Param] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = init_params(cfg, self.params["conv1.w"].shape[2]) if params is not None else self.params
        for name, p in expected.items():
            if name not in self.params or self.params[name].shape != p.shape:
                raise CheckpointError(f"parameter {name} missing or mis-shaped for this config")

    def prepare(self, regions: RegionSet) -> PreparedRegions:
        return prepare_regions(regions, self.cfg)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- pieces -----------------------------------------------------------
    def _backbone(self, image):
        p = self.params
        x = np.asarray(image, dtype=DTYPE) - 0.5
        h1, c1 = core.conv2d_forward(x, p["conv1.w"].value, p["conv1.b"].value, 1, 1)
        a1, m1 = core.relu_forward(h1)
        q1, cq = core.maxpool2_forward(a1)
        h2, c2 = core.conv2d_forward(q1, p["conv2.w"].value, p["conv2.b"].value, 1, 1)
        a2, m2 = core.relu_forward(h2)
        return a2, (c1, m1, cq, c2, m2)

    def _backbone_backward(self, dout, cache):
        c1, m1, cq, c2, m2 = cache
        p = self.params
        d = core.relu_backward(dout, m2)
        d, dw, db = core.conv2d_backward(d, c2)
        p["conv2.w"].grad += dw
        p["conv2.b"].grad += db
        d = core.maxpool2_backward(d, cq)
        d = core.relu_backward(d, m1)
        _, dw, db = core.conv2d_backward(d, c1)
        p["conv1.w"].grad += dw
        p["conv1.b"].grad += db

    def _head(self, x):
        p = self.params
        h, c_fc = core.linear_forward(x, p["fc1.w"].value, p["fc1.b"].value)
        a, m = core.relu_forward(h)
        s, c_cls = core.linear_forward(a, p["cls.w"].value, p["cls.b"].value)
        return s, (c_fc, m, c_cls)

    def _head_backward(self, ds, cache):
        c_fc, m, c_cls = cache
        p = self.params
        da, dw, db = core.linear_backward(ds, c_cls)
        p["cls.w"].grad += dw
        p["cls.b"].grad += db
        dh = core.relu_backward(da, m)
        dx, dw, db = core.linear_backward(dh, c_fc)
        p["fc1.w"].grad += dw
        p["fc1.b"].grad += db
        return dx

    # -- public API -------------------------------------------------------
    def region_scores(self, image, prepared: PreparedRegions):
        """Classification-layer activations ``(R, C)`` for every region."""
        cfg = self.cfg
        img_hw = np.shape(image)[:2]
        if img_hw != (prepared.regions.height, prepared.regions.width):
            raise ValueError(f"regions were prepared for {prepared.regions.height}x{prepared.regions.width}, image is {img_hw}")
        fmap, bcache = self._backbone(image)
        cache = ForwardCache(prepared, bcache, fmap.shape)
        n = len(prepared)
        feats = {}
        if cfg.uses_region:
            v, cache.region_arg = pool_forward(fmap, prepared.region_plan)
            feats["region"] = v.reshape(n, -1)
        if cfg.uses_box:
            v, cache.box_arg = pool_forward(fmap, prepared.box_plan)
            feats["box"] = v.reshape(n, -1)

        if cfg.fusion == "box-only":
            scores, hc = self._head(feats["box"])
            cache.heads = [hc]
        elif cfg.fusion == "region-only":
            scores, hc = self._head(feats["region"])
            cache.heads = [hc]
        elif cfg.fusion == "tied":
            s_r, hr = self._head(feats["region"])
            s_b, hb = self._head(feats["box"])
            scores = s_r + s_b
            cache.heads = [hr, hb]
        else:
            scores, hc = self._head(np.concatenate([feats["region"], feats["box"]], axis=1))
            cache.heads = [hc]
        return scores, cache

    def backward_scores(self, dscores, cache: ForwardCache):
        """Accumulate parameter gradients from a gradient on the region scores."""
        cfg = self.cfg
        dscores = np.asarray(dscores, dtype=DTYPE)
        n = len(cache.prepared)
        oh, ow = cfg.pooled_size
        depth = cache.fm_shape[2]
        d_region = d_box = None
        if cfg.fusion == "tied":
            d_region = self._head_backward(dscores, cache.heads[0])
            d_box = self._head_backward(dscores, cache.heads[1])
        else:
            dx = self._head_backward(dscores, cache.heads[0])
            if cfg.fusion == "box-only":
                d_box = dx
            elif cfg.fusion == "region-only":
                d_region = dx
            else:
                half = cfg.pooled_features
                d_region, d_box = dx[:, :half], dx[:, half:]
        dfmap = np.zeros(cache.fm_shape, dtype=DTYPE)
        if d_region is not None:
            dfmap += pool_backward(d_region.reshape(n, oh, ow, depth), cache.region_arg, cache.fm_shape)
        if d_box is not None:
            dfmap += pool_backward(d_box.reshape(n, oh, ow, depth), cache.box_arg, cache.fm_shape)
        self._backbone_backward(dfmap, cache.backbone)

    def pixel_inputs(self, scores, cache: ForwardCache | None = None):
        """Scores handed to the region-to-pixel layer under the configured softmax order."""
        if self.cfg.softmax_order == "max-then-softmax":
            return scores
        logp = core.log_softmax(scores)
        if cache is not None:
            cache.logp = logp
        return logp

    def pixel_inputs_backward(self, dinputs, cache: ForwardCache):
        if self.cfg.softmax_order == "max-then-softmax":
            return dinputs
        return core.log_softmax_backward(dinputs, cache.logp)

    def forward_endtoend(self, image, prepared: PreparedRegions):
        scores, cache = self.region_scores(image, prepared)
        pix = r2p_forward(self.pixel_inputs(scores, cache), prepared.regions)
        cache.pixels = pix
        return pix, cache

    def forward_baseline(self, image, prepared: PreparedRegions):
        return self.region_scores(image, prepared)

    def backward(self, cache: ForwardCache, grad, wrt: str = "pixels"):
        """Backpropagate a loss gradient given on pixel scores ``(P, C)`` or region scores ``(R, C)``.

        ``wrt="inputs"`` means the gradient is on the region-to-pixel inputs
        (after the optional per-region log-softmax).
        """
        if wrt == "pixels":
            if cache.pixels is None:
                raise ValueError("cache has no pixel scores; run forward_endtoend first")
            if grad.shape != cache.pixels.scores.shape:
                raise ValueError(f"pixel gradient {grad.shape} does not match forward {cache.pixels.scores.shape}")
            grad = r2p_backward(grad, cache.pixels.winner, len(cache.prepared))
            grad = self.pixel_inputs_backward(grad, cache)
        elif wrt == "inputs":
            grad = self.pixel_inputs_backward(grad, cache)
        elif wrt != "scores":
            raise ValueError("wrt must be 'pixels', 'inputs' or 'scores'")
        self.backward_scores(grad, cache)

    def predict(self, image, prepared: PreparedRegions, return_fallback: bool = False):
        scores, _ = self.region_scores(image, prepared)
        if self.cfg.kind == "baseline":
            return predict_baseline(scores, prepared.regions, return_fallback)
        pix = r2p_forward(self.pixel_inputs(scores), prepared.regions)
        return predict_endtoend(pix, return_fallback)

    def copy(self) -> "Model":
        return Model(self.cfg, {k: Param(v.value.copy()) for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Little-endian binary: magic, version, JSON config, then named float64 blobs."""
    buf = io.BytesIO()
    cfg = model.cfg.to_json().encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = model.params[name].value
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a regionseg checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_json(take(cfg_len).decode())
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(DTYPE)
        params[name] = Param(arr)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after parameters")
    return Model(cfg, params)
