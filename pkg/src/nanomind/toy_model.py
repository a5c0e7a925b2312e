"""Desk-scale stand-ins for the modular stages of a multimodal model.

Each stage (speech-to-text, vision encoder, projector, token embedding,
decoder, text-to-speech) is an independent unit: it can be built from a seed,
saved, loaded and run with no other stage present. Weights are seeded-random
at toy dimensions, but every matmul runs through the real quantized kernels.

A stage carries two cost descriptions. ``StageSpec.param_bytes`` and
``flops_per_call`` describe the toy numerics actually executed. ``StageSpec.cost``
describes the model the simulator should charge for, derived from the same
architecture formulas at ``cost_dims`` (which default to the toy dims).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import quant
from .errors import ConfigError, ShapeError, StaticShapeViolation
from .linear_attention import MultiHeadState
from .quant import DenseMatrix, QuantizedMatrix

STAGE_NAMES = ("audio_stt", "vision_encoder", "projector", "embedding", "decoder", "tts")
STAGE_PRECISIONS = ("r16", "q8", "q4", "q2")
_BITS = {"q8": 8, "q4": 4, "q2": 2}

DEFAULT_DIMS = {
    "vision_encoder": {"image": [64, 64, 3], "patch": 16, "dim": 64, "ffn": 256, "blocks": 2},
    "projector": {"tokens": 16, "in_dim": 64, "out_dim": 128},
    "embedding": {"vocab": 256, "dim": 128},
    "decoder": {"dim": 128, "layers": 4, "heads": 2, "ffn": 512, "vocab": 256, "head_precision": "q8"},
    "audio_stt": {"frames": 32, "frame_len": 50, "vocab": 256},
    "tts": {"frames": 32, "frame_len": 50, "vocab": 256},
}
DEFAULT_PRECISION = {
    "vision_encoder": "q8",
    "projector": "r16",
    "embedding": "r16",
    "decoder": "q4",
    "audio_stt": "r16",
    "tts": "r16",
}
# salt per stage so each draws an independent weight stream from one seed
_STAGE_SALT = {name: i for i, name in enumerate(STAGE_NAMES)}
_EMBED_SALT = 99


# --------------------------------------------------------------------------
# specs and cost formulas
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageCost:
    """What the simulator charges per call of a stage.

    ``weight_bytes`` is the resident footprint; ``stream_bytes`` the weight
    traffic per call (the embedding table is resident but only one row is
    read). Decoder costs also expose per-layer terms for layer splitting.
    """

    weight_bytes: int
    stream_bytes: int
    act_bytes: int
    flops: int
    layers: int = 0
    layer_weight_bytes: int = 0
    layer_flops: int = 0

    def bytes_moved(self, calls: int = 1) -> int:
        return self.stream_bytes + self.act_bytes * calls

    def subset(self, n_layers: int, shared: bool) -> "StageCost":
        """Cost of running ``n_layers`` decoder layers, plus the head if ``shared``."""
        base_w = self.weight_bytes - self.layers * self.layer_weight_bytes
        base_s = self.stream_bytes - self.layers * self.layer_weight_bytes
        base_f = self.flops - self.layers * self.layer_flops
        lw = n_layers * self.layer_weight_bytes
        return StageCost(
            weight_bytes=lw + (base_w if shared else 0),
            stream_bytes=lw + (base_s if shared else 0),
            act_bytes=self.act_bytes if (n_layers or shared) else 0,
            flops=n_layers * self.layer_flops + (base_f if shared else 0),
            layers=n_layers,
            layer_weight_bytes=self.layer_weight_bytes,
            layer_flops=self.layer_flops,
        )


@dataclass(frozen=True)
class StageSpec:
    name: str
    input_shape: tuple
    output_shape: tuple
    param_bytes: int
    precision: str
    flops_per_call: int
    cost: StageCost
    group_size: int = quant.DEFAULT_GROUP_SIZE
    dims: dict = field(default_factory=dict, compare=False)
    cost_dims: Optional[dict] = field(default=None, compare=False)
    declared_cost: Optional[dict] = field(default=None, compare=False)

    @property
    def dynamic_shape(self) -> bool:
        return any(d is None for d in self.input_shape)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "precision": self.precision,
            "group_size": self.group_size,
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "param_bytes": self.param_bytes,
            "flops_per_call": self.flops_per_call,
            "dims": self.dims,
            "cost": {
                "weight_bytes": self.cost.weight_bytes,
                "stream_bytes": self.cost.stream_bytes,
                "act_bytes": self.cost.act_bytes,
                "flops": self.cost.flops,
                "layers": self.cost.layers,
            },
        }


def matrix_bytes(k: int, n: int, precision: str, group_size: int) -> int:
    if precision == "r16":
        return 2 * k * n
    bits = _BITS[precision]
    return k * n * bits // 8 + 5 * (k * n // group_size)


_PRECISION_RANK = {p: i for i, p in enumerate(("q2", "q4", "q8", "r16"))}


def head_precision(precision: str, dims: dict) -> str:
    """The output head never runs below ``dims['head_precision']``."""
    floor = dims.get("head_precision", precision)
    return max(precision, floor, key=_PRECISION_RANK.__getitem__)


def _layer_shapes(name: str, d: dict) -> tuple[list, list, list]:
    """(matrices at stage precision, dense r16 matrices, bias lengths)."""
    if name == "vision_encoder":
        h, w, c = d["image"]
        pd = d["patch"] * d["patch"] * c
        mats = [(pd, d["dim"])] + [(d["dim"], d["ffn"]), (d["ffn"], d["dim"])] * d["blocks"]
        biases = [d["dim"]] + [d["ffn"], d["dim"]] * d["blocks"]
        return mats, [], biases
    if name == "projector":
        return [(d["in_dim"], d["out_dim"])], [], [d["out_dim"]]
    if name == "embedding":
        return [], [(d["vocab"], d["dim"])], []
    if name == "decoder":
        dim, ffn = d["dim"], d["ffn"]
        per_layer = [(dim, 3 * dim), (dim, dim), (dim, ffn), (ffn, dim)]
        mats = per_layer * d["layers"]
        biases = [3 * dim, dim, ffn, dim] * d["layers"]
        return mats, [(d["vocab"], dim)], biases
    return [], [], []


def analytic_cost(name: str, dims: dict, precision: str, group_size: int,
                  declared: Optional[dict] = None) -> StageCost:
    """Roofline inputs for a stage at the given dims."""
    if name in ("audio_stt", "tts"):
        declared = declared or {}
        n = dims["frames"] * dims["frame_len"]
        wb = int(declared.get("weight_bytes", 0))
        return StageCost(
            weight_bytes=wb,
            stream_bytes=wb,
            act_bytes=int(declared.get("act_bytes", 2 * n)),
            flops=int(declared.get("flops_per_call", 0)),
        )
    mats, dense, biases = _layer_shapes(name, dims)
    mat_bytes = [matrix_bytes(k, n, precision, group_size) for k, n in mats]
    other_bytes = 4 * sum(biases)
    dense_bytes = sum(2 * k * n for k, n in dense)
    if name == "decoder":
        head = head_precision(precision, dims)
        other_bytes += matrix_bytes(dims["dim"], dims["vocab"], head, group_size) + 4 * dims["vocab"]
    weight_bytes = sum(mat_bytes) + other_bytes + dense_bytes
    if name == "vision_encoder":
        h, w, c = dims["image"]
        p = (h // dims["patch"]) * (w // dims["patch"])
        flops = 2 * p * sum(k * n for k, n in mats)
        return StageCost(weight_bytes, weight_bytes, h * w * c + 2 * p * dims["dim"], flops)
    if name == "projector":
        t = dims["tokens"]
        flops = 2 * t * dims["in_dim"] * dims["out_dim"]
        return StageCost(weight_bytes, weight_bytes, 2 * t * (dims["in_dim"] + dims["out_dim"]), flops)
    if name == "embedding":
        # one table row read per token
        return StageCost(weight_bytes, 2 * dims["dim"], 2 * dims["dim"], 0)
    if name == "decoder":
        dim, L = dims["dim"], dims["layers"]
        layer_w = sum(mat_bytes[:4]) + 4 * (5 * dim + dims["ffn"])
        # projections plus the per-head state update and query
        layer_f = 2 * sum(k * n for k, n in mats[:4]) + 4 * dim * dim // dims["heads"]
        flops = L * layer_f + 2 * dim * dims["vocab"]
        stream = weight_bytes - dense_bytes
        return StageCost(weight_bytes, stream, 2 * dim + 4 * dims["vocab"], flops,
                         layers=L, layer_weight_bytes=layer_w, layer_flops=layer_f)
    raise ConfigError(f"unknown stage {name!r}")


def _shapes(name: str, d: dict) -> tuple[tuple, tuple]:
    if name == "vision_encoder":
        h, w, c = d["image"]
        p = (h // d["patch"]) * (w // d["patch"])
        return (h, w, c), (p, d["dim"])
    if name == "projector":
        return (d["tokens"], d["in_dim"]), (d["tokens"], d["out_dim"])
    if name == "embedding":
        return (None,), (None, d["dim"])
    if name == "decoder":
        return (None, d["dim"]), (None,)
    if name == "audio_stt":
        return (d["frames"] * d["frame_len"],), (None,)
    if name == "tts":
        return (None,), (d["frames"] * d["frame_len"],)
    raise ConfigError(f"unknown stage {name!r}")


def make_spec(name: str, dims: Optional[dict] = None, precision: Optional[str] = None,
              group_size: int = quant.DEFAULT_GROUP_SIZE, cost_dims: Optional[dict] = None,
              declared_cost: Optional[dict] = None) -> StageSpec:
    if name not in STAGE_NAMES:
        raise ConfigError(f"unknown stage {name!r}; expected one of {STAGE_NAMES}")
    dims = {**DEFAULT_DIMS[name], **(dims or {})}
    precision = precision or DEFAULT_PRECISION[name]
    if precision not in STAGE_PRECISIONS:
        raise ConfigError(f"unknown precision {precision!r}")
    if name == "vision_encoder":
        h, w, _ = dims["image"]
        if h % dims["patch"] or w % dims["patch"]:
            raise ConfigError("image dims must be multiples of the patch size")
    if name == "decoder" and dims["dim"] % dims["heads"]:
        raise ConfigError("decoder dim must divide evenly across heads")
    toy = analytic_cost(name, dims, precision, group_size, declared_cost)
    cost = toy
    if cost_dims:
        cost = analytic_cost(name, {**dims, **cost_dims}, precision, group_size, declared_cost)
    inp, out = _shapes(name, dims)
    stub = name in ("audio_stt", "tts")
    return StageSpec(name, inp, out, 0 if stub else toy.weight_bytes, precision,
                     0 if stub else toy.flops, cost, group_size, dims,
                     dict(cost_dims) if cost_dims else None,
                     dict(declared_cost) if declared_cost else None)


def shapes_compatible(produced: tuple, consumed: tuple) -> bool:
    if len(produced) != len(consumed):
        return False
    return all(a is None or b is None or a == b for a, b in zip(produced, consumed))


def check_chain(specs: Sequence[StageSpec]) -> None:
    for a, b in zip(specs, specs[1:]):
        if not shapes_compatible(a.output_shape, b.input_shape):
            raise ShapeError(f"{a.name} produces {a.output_shape} but {b.name} expects {b.input_shape}")


# --------------------------------------------------------------------------
# data carried between stages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchHeader:
    tokens: int
    dim: int
    sequence_id: int
    source_stage: str

    @property
    def nbytes(self) -> int:
        return 2 * self.tokens * self.dim


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    tokens: int
    dim: int
    payload: np.ndarray  # float16, (tokens, dim)
    source_stage: str
    sequence_id: int

    def __post_init__(self):
        if self.payload.shape != (self.tokens, self.dim):
            raise ShapeError(f"payload {self.payload.shape} != ({self.tokens}, {self.dim})")

    @property
    def header(self) -> BatchHeader:
        return BatchHeader(self.tokens, self.dim, self.sequence_id, self.source_stage)

    def as_dense(self) -> DenseMatrix:
        return DenseMatrix(self.payload.astype(np.float32), "r16")


def _rms_norm(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float32)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.float32(1e-6))


def _r16(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float16).astype(np.float32)


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------


class Linear:
    """One weight matrix plus bias at a stage precision."""

    def __init__(self, weight: Union[DenseMatrix, QuantizedMatrix], bias: np.ndarray):
        self.weight = weight
        self.bias = np.asarray(bias, dtype=np.float32).reshape(-1)
        if self.bias.size != weight.cols:
            raise ShapeError("bias length does not match weight columns")

    @classmethod
    def from_float(cls, w: np.ndarray, b: np.ndarray, precision: str, group_size: int) -> "Linear":
        if precision == "r16":
            return cls(DenseMatrix(w, "r16"), b)
        return cls(quant.quantize_blockwise(w, _BITS[precision], group_size), b)

    @property
    def rows(self) -> int:
        return self.weight.rows

    @property
    def cols(self) -> int:
        return self.weight.cols

    @property
    def nbytes(self) -> int:
        w = self.weight
        wb = w.nbytes if isinstance(w, QuantizedMatrix) else 2 * w.rows * w.cols
        return wb + 4 * self.bias.size

    def __call__(self, x: np.ndarray, activation: str = "none") -> np.ndarray:
        xd = DenseMatrix(x, "r16")
        if isinstance(self.weight, QuantizedMatrix):
            out = quant.gemm_fused_dequant(xd, self.weight, self.bias, activation)
        else:
            out = quant.gemm_dense(xd, self.weight, self.bias, activation)
        return out.data

    def save(self, directory: Path, stem: str) -> dict:
        if isinstance(self.weight, QuantizedMatrix):
            wfile = f"{stem}.nmq"
            self.weight.save(directory / wfile)
        else:
            wfile = f"{stem}.f16"
            (directory / wfile).write_bytes(
                self.weight.data.astype("<f2").tobytes()
            )
        bfile = f"{stem}.bias.f32"
        (directory / bfile).write_bytes(self.bias.astype("<f4").tobytes())
        return {"weight": wfile, "bias": bfile, "shape": [self.rows, self.cols]}

    @classmethod
    def load(cls, directory: Path, entry: dict) -> "Linear":
        wfile = directory / entry["weight"]
        if wfile.suffix == ".nmq":
            w = QuantizedMatrix.load(wfile)
        else:
            rows, cols = entry["shape"]
            raw = np.frombuffer(wfile.read_bytes(), dtype="<f2")
            if raw.size != rows * cols:
                raise ShapeError(f"{wfile.name}: expected {rows * cols} halfs, got {raw.size}")
            w = DenseMatrix(raw.astype(np.float32).reshape(rows, cols), "r16")
        b = np.frombuffer((directory / entry["bias"]).read_bytes(), dtype="<f4").astype(np.float32)
        return cls(w, b)


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(salt)])


def _draw(rng: np.random.Generator, k: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    w = rng.standard_normal((k, n)).astype(np.float32) / np.float32(np.sqrt(k))
    b = (0.02 * rng.standard_normal(n)).astype(np.float32)
    return w, b


def embedding_table(seed: int, vocab: int, dim: int) -> np.ndarray:
    """Token table shared by the embedding stage and the decoder's feedback path."""
    t = _rng(seed, _EMBED_SALT).standard_normal((vocab, dim)).astype(np.float32)
    return _r16(t)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


class Stage:
    """Base class: a spec, a set of named tensors, and save/load."""

    name = ""

    def __init__(self, spec: StageSpec, linears: dict[str, Linear], seed: int = 0):
        self.spec = spec
        self.linears = linears
        self.seed = seed
        self._seq = itertools.count()

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "Stage":
        raise NotImplementedError

    @property
    def param_bytes(self) -> int:
        return sum(l.nbytes for l in self.linears.values()) + self._extra_bytes()

    def _extra_bytes(self) -> int:
        return 0

    def _next_seq(self) -> int:
        return next(self._seq)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {k: l.save(d, k) for k, l in self.linears.items()}
        files.update(self._save_extra(d))
        manifest = {
            "name": self.spec.name,
            "precision": self.spec.precision,
            "group_size": self.spec.group_size,
            "dims": self.spec.dims,
            "seed": self.seed,
            "param_bytes": self.param_bytes,
            "files": files,
        }
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    def _save_extra(self, d: Path) -> dict:
        return {}


class VisionEncoder(Stage):
    name = "vision_encoder"

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "VisionEncoder":
        d = spec.dims
        rng = _rng(seed, _STAGE_SALT[cls.name])
        h, w, c = d["image"]
        pd = d["patch"] * d["patch"] * c
        linears = {"patch_embed": Linear.from_float(*_draw(rng, pd, d["dim"]), spec.precision, spec.group_size)}
        for i in range(d["blocks"]):
            linears[f"block{i}.fc1"] = Linear.from_float(*_draw(rng, d["dim"], d["ffn"]), spec.precision, spec.group_size)
            linears[f"block{i}.fc2"] = Linear.from_float(*_draw(rng, d["ffn"], d["dim"]), spec.precision, spec.group_size)
        return cls(spec, linears, seed)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        p = self.spec.dims["patch"]
        h, w, c = image.shape
        x = image.astype(np.float32) / np.float32(255.0)
        x = x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
        return x.reshape((h // p) * (w // p), p * p * c)

    def run(self, image: np.ndarray) -> EmbeddingBatch:
        image = np.asarray(image)
        if tuple(image.shape) != tuple(self.spec.input_shape):
            raise StaticShapeViolation(
                f"vision encoder compiled for {self.spec.input_shape}, got {image.shape}",
                expected=self.spec.input_shape, got=tuple(image.shape),
            )
        h = _r16(self.linears["patch_embed"](self.patchify(image)))
        for i in range(self.spec.dims["blocks"]):
            u = self.linears[f"block{i}.fc1"](h, "gelu")
            h = _r16(h + self.linears[f"block{i}.fc2"](u))
        p, dim = h.shape
        return EmbeddingBatch(p, dim, h.astype(np.float16), self.name, self._next_seq())


class Projector(Stage):
    name = "projector"

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "Projector":
        d = spec.dims
        rng = _rng(seed, _STAGE_SALT[cls.name])
        lin = Linear.from_float(*_draw(rng, d["in_dim"], d["out_dim"]), spec.precision, spec.group_size)
        return cls(spec, {"proj": lin}, seed)

    def run(self, e: EmbeddingBatch) -> EmbeddingBatch:
        lin = self.linears["proj"]
        if e.dim != lin.rows:
            raise ShapeError(f"projector expects dim {lin.rows}, got {e.dim}")
        out = lin(e.payload.astype(np.float32))
        return EmbeddingBatch(e.tokens, lin.cols, out.astype(np.float16), self.name, self._next_seq())


class TokenEmbedding(Stage):
    name = "embedding"

    def __init__(self, spec, table: np.ndarray, seed: int = 0):
        super().__init__(spec, {}, seed)
        self.table = table

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "TokenEmbedding":
        return cls(spec, embedding_table(seed, spec.dims["vocab"], spec.dims["dim"]), seed)

    def _extra_bytes(self) -> int:
        return 2 * self.table.size

    def _save_extra(self, d: Path) -> dict:
        (d / "table.f16").write_bytes(self.table.astype("<f2").tobytes())
        return {"table": "table.f16"}

    def run(self, tokens: Sequence[int]) -> EmbeddingBatch:
        ids = np.asarray(list(tokens), dtype=np.int64)
        vocab = self.spec.dims["vocab"]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ShapeError(f"token id outside vocabulary of {vocab}")
        rows = self.table[ids] if ids.size else np.zeros((0, self.table.shape[1]), np.float32)
        return EmbeddingBatch(ids.size, self.table.shape[1], rows.astype(np.float16), self.name, self._next_seq())


class DecoderState:
    def __init__(self, layers: int, heads: int, d_head: int):
        self.attn = [MultiHeadState(heads, d_head) for _ in range(layers)]
        self.last_logits: Optional[np.ndarray] = None

    @property
    def tokens_seen(self) -> int:
        return self.attn[0].t


class Decoder(Stage):
    name = "decoder"

    def __init__(self, spec, linears, table: np.ndarray, seed: int = 0):
        super().__init__(spec, linears, seed)
        self.table = table

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "Decoder":
        d = spec.dims
        rng = _rng(seed, _STAGE_SALT[cls.name])
        dim, ffn = d["dim"], d["ffn"]
        # residual-branch outputs scaled by 1/sqrt(2L), as in GPT-2 init
        branch = np.float32(1.0 / np.sqrt(2 * d["layers"]))
        linears = {}
        for i in range(d["layers"]):
            for key, (k, n) in (("qkv", (dim, 3 * dim)), ("out", (dim, dim)),
                                ("fc1", (dim, ffn)), ("fc2", (ffn, dim))):
                w, b = _draw(rng, k, n)
                if key in ("out", "fc2"):
                    w = w * branch
                linears[f"layer{i}.{key}"] = Linear.from_float(w, b, spec.precision, spec.group_size)
        w, _ = _draw(rng, dim, d["vocab"])
        linears["head"] = Linear.from_float(
            w, np.zeros(d["vocab"], np.float32), head_precision(spec.precision, d), spec.group_size
        )
        return cls(spec, linears, embedding_table(seed, d["vocab"], dim), seed)

    def _extra_bytes(self) -> int:
        return 2 * self.table.size

    def _save_extra(self, d: Path) -> dict:
        (d / "table.f16").write_bytes(self.table.astype("<f2").tobytes())
        return {"table": "table.f16"}

    def new_state(self) -> DecoderState:
        d = self.spec.dims
        return DecoderState(d["layers"], d["heads"], d["dim"] // d["heads"])

    def embed(self, token: int) -> np.ndarray:
        if not 0 <= token < self.table.shape[0]:
            raise ShapeError(f"token {token} outside vocabulary")
        return self.table[token]

    def forward(self, state: DecoderState, x: np.ndarray) -> np.ndarray:
        """Absorb T input embeddings causally; returns logits for the last one.

        Linear layers act row-wise, so feeding a sequence in one call or in
        several chunks gives bit-identical results.
        """
        if state is None:
            raise RuntimeError("decoder state is not initialized")
        x = _r16(np.atleast_2d(np.asarray(x, dtype=np.float32)))
        dim = self.spec.dims["dim"]
        if x.shape[1] != dim:
            raise ShapeError(f"decoder expects dim {dim}, got {x.shape[1]}")
        if x.shape[0] == 0:
            return state.last_logits
        for i, heads in enumerate(state.attn):
            qkv = self.linears[f"layer{i}.qkv"](_rms_norm(x))
            a = np.empty_like(x)
            for t in range(x.shape[0]):
                q, k, v = qkv[t, :dim], qkv[t, dim:2 * dim], qkv[t, 2 * dim:]
                a[t] = heads.step(q, k, v)
            x = _r16(x + self.linears[f"layer{i}.out"](_r16(a)))
            u = self.linears[f"layer{i}.fc1"](_rms_norm(x), "silu")
            x = _r16(x + self.linears[f"layer{i}.fc2"](u))
        logits = self.linears["head"](_rms_norm(x[-1:]))[0]
        state.last_logits = logits
        return logits

    def step(self, state: DecoderState, token_or_embedding) -> np.ndarray:
        if isinstance(token_or_embedding, (int, np.integer)):
            x = self.embed(int(token_or_embedding))
        else:
            x = np.asarray(token_or_embedding, dtype=np.float32).reshape(-1)
        return self.forward(state, x[None, :])

    def generate(self, state: DecoderState, n: int) -> list[int]:
        """Greedy decode ``n`` tokens after whatever the state has absorbed."""
        if state.last_logits is None:
            raise RuntimeError("generate() needs at least one absorbed input")
        out = []
        logits = state.last_logits
        for _ in range(n):
            tok = int(np.argmax(logits))
            out.append(tok)
            logits = self.step(state, tok)
        return out


def _audio_len(spec: StageSpec) -> int:
    return spec.dims["frames"] * spec.dims["frame_len"]


AUDIO_LEVEL = 64


class SpeechToText(Stage):
    """Deterministic stand-in: each non-silent frame encodes one token by its level."""

    name = "audio_stt"

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "SpeechToText":
        return cls(spec, {}, seed)

    def run(self, audio: np.ndarray) -> list[int]:
        audio = np.asarray(audio)
        n = _audio_len(self.spec)
        if audio.shape != (n,):
            raise StaticShapeViolation(
                f"stt expects a ({n},) buffer, got {audio.shape}", expected=(n,), got=audio.shape
            )
        frames = audio.astype(np.int64).reshape(self.spec.dims["frames"], -1)
        levels = np.rint(np.abs(frames).mean(axis=1) / AUDIO_LEVEL).astype(np.int64)
        vocab = self.spec.dims["vocab"]
        return [int((lv - 1) % vocab) for lv in levels if lv > 0]


class TextToSpeech(Stage):
    name = "tts"

    @classmethod
    def build(cls, spec: StageSpec, seed: int) -> "TextToSpeech":
        return cls(spec, {}, seed)

    def run(self, tokens: Sequence[int]) -> np.ndarray:
        d = self.spec.dims
        tokens = list(tokens)
        if len(tokens) > d["frames"]:
            raise ShapeError(f"{len(tokens)} tokens exceed the {d['frames']}-frame buffer")
        audio = np.zeros((d["frames"], d["frame_len"]), dtype=np.int16)
        for i, t in enumerate(tokens):
            if not 0 <= t < d["vocab"]:
                raise ShapeError(f"token {t} outside vocabulary")
            audio[i] = (t + 1) * AUDIO_LEVEL
        return audio.reshape(-1)


STAGE_CLASSES = {
    cls.name: cls
    for cls in (SpeechToText, VisionEncoder, Projector, TokenEmbedding, Decoder, TextToSpeech)
}


def build_stage(spec: StageSpec, seed: int) -> Stage:
    return STAGE_CLASSES[spec.name].build(spec, seed)


def load_stage(directory) -> Stage:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    spec = make_spec(m["name"], m["dims"], m["precision"], m["group_size"])
    cls = STAGE_CLASSES[m["name"]]
    files = dict(m["files"])
    table = None
    if "table" in files:
        vocab, dim = (spec.dims["vocab"], spec.dims["dim"])
        raw = np.frombuffer((d / files.pop("table")).read_bytes(), dtype="<f2")
        table = raw.astype(np.float32).reshape(vocab, dim)
    linears = {k: Linear.load(d, v) for k, v in files.items()}
    if cls is TokenEmbedding:
        return cls(spec, table, m["seed"])
    if cls is Decoder:
        return cls(spec, linears, table, m["seed"])
    return cls(spec, linears, m["seed"])


# module-level operation names used throughout the docs and tests

def run_vision_encoder(image, encoder: VisionEncoder) -> EmbeddingBatch:
    return encoder.run(image)


def run_projector(e: EmbeddingBatch, projector: Projector) -> EmbeddingBatch:
    return projector.run(e)


def run_decoder_step(state: DecoderState, token_or_embedding, decoder: Decoder) -> np.ndarray:
    return decoder.step(state, token_or_embedding)


def run_stt_stub(audio, stt: SpeechToText) -> list[int]:
    return stt.run(audio)


def run_tts_stub(tokens, tts: TextToSpeech) -> np.ndarray:
    return tts.run(tokens)


def with_precision(spec: StageSpec, precision: str) -> StageSpec:
    return make_spec(spec.name, spec.dims, precision, spec.group_size,
                     spec.cost_dims, spec.declared_cost)


__all__ = [
    "StageSpec", "StageCost", "EmbeddingBatch", "BatchHeader", "Linear",
    "VisionEncoder", "Projector", "TokenEmbedding", "Decoder", "DecoderState",
    "SpeechToText", "TextToSpeech", "make_spec", "build_stage", "load_stage",
    "check_chain", "run_vision_encoder", "run_projector", "run_decoder_step",
    "run_stt_stub", "run_tts_stub", "with_precision",
]
