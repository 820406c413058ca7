"""The four coordinate-network architectures and their structural surgery.

Each model maps coordinates in [-1, 1]^d to signal values: a positional
encoding with a ReLU MLP, scaled-sine and variable-frequency-sine MLPs,
and a lookup-table network whose learned per-coordinate latent feeds a
small ReLU MLP.  Models can grow while training continues: the output
head gains zero-initialized channels, and the lookup table gains rows for
newly seen coordinates.  Both operations leave every pre-existing
parameter value bit-unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datagen import GridSpec, make_grid
from .errors import ConfigError, FormatError, ShapeError, UnknownCoordinateError


class Arch(Enum):
    PE_RELU = "pe-relu"
    SIREN = "siren"
    FINER = "finer"
    DINER = "diner"


class Head(Enum):
    LINEAR = "linear"
    SOFTMAX = "softmax"
    MIXED = "mixed"


DEFAULT_OMEGA0 = {Arch.SIREN: 15.0, Arch.FINER: 5.0}

# Fresh lookup tables start near zero so the table and MLP can organize from
# scratch at the table model's high learning rate; a U(-1, 1) start is
# untrainable there.  Rows appended later (expansion) do start in U(-1, 1),
# the range a trained table occupies.
TABLE_INIT_SCALE = 0.01


@dataclass
class ModelConfig:
    arch: Arch
    in_dim: int
    out_channels: int
    hidden_layers: int = 3
    hidden_width: int = 256
    head: Head = Head.LINEAR
    pe_levels: int = 10
    omega0: float | None = None
    latent_dim: int = 1
    seed: int = 0
    linear_channels: int | None = None  # leading linear block of a MIXED head

    def __post_init__(self):
        if self.hidden_width < 1 or self.out_channels < 1:
            raise ConfigError("hidden_width and out_channels must be >= 1")
        if self.omega0 is None:
            self.omega0 = DEFAULT_OMEGA0.get(self.arch)
        if self.omega0 is not None and self.omega0 <= 0:
            raise ConfigError(f"omega0 must be positive, got {self.omega0}")
        if self.linear_channels is None:
            if self.head is Head.LINEAR:
                self.linear_channels = self.out_channels
            elif self.head is Head.SOFTMAX:
                self.linear_channels = 0
            else:
                raise ConfigError("MIXED head requires explicit linear_channels")


def encode_pe(x: np.ndarray, levels: int) -> np.ndarray:
    """Sinusoidal lifting of each coordinate component.

    Per component the output is [sin(2^0 pi x), cos(2^0 pi x), ...,
    sin(2^{L-1} pi x), cos(2^{L-1} pi x)]; raw coordinates are not
    included.  Output width is in_dim * 2 * levels.
    """
    x = np.asarray(x)
    n, d = x.shape
    out = np.empty((n, d * 2 * levels), dtype=x.dtype)
    for c in range(d):
        for lvl in range(levels):
            arg = (2.0**lvl) * np.pi * x[:, c]
            base = (c * levels + lvl) * 2
            out[:, base] = np.sin(arg)
            out[:, base + 1] = np.cos(arg)
    return out


class CoordMap:
    """Injective map from grid coordinates to lookup-table rows.

    Spatial axes are quantized back to their integer grid index; the time
    value (when present) selects a frame slot.  Rows are assigned in
    insertion order, so appending new coordinates never disturbs old rows.
    """

    _TIME_ATOL = 1e-6
    _SPATIAL_ATOL = 1e-4

    def __init__(self, dims: tuple[int, int, int], timed: bool):
        self.dims = tuple(dims)
        self.timed = timed
        self.times: list[float] = []
        self._slot_rows: dict[int, np.ndarray] = {}
        self.n_entries = 0

    def _spatial_linear(self, coords: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        lin = np.zeros(coords.shape[0], dtype=np.int64)
        for axis, n in enumerate((nx, ny, nz)):
            vals = coords[:, axis]
            idx = np.rint((vals + 1.0) * 0.5 * (n - 1)).astype(np.int64)
            if idx.size:
                bad = (idx < 0) | (idx >= n)
                if not bad.any():
                    grid_vals = -1.0 + 2.0 * idx / (n - 1)
                    bad = np.abs(vals - grid_vals) > self._SPATIAL_ATOL
                if bad.any():
                    j = int(np.argmax(bad))
                    raise UnknownCoordinateError(
                        f"coordinate {coords[j].tolist()} is not on the model's grid"
                    )
            lin = lin * n + idx
        return lin

    def _time_slot(self, t: float, create: bool) -> int:
        for k, known in enumerate(self.times):
            if abs(known - t) <= self._TIME_ATOL:
                return k
        if not create:
            raise UnknownCoordinateError(f"time value {t} has no table entries")
        self.times.append(float(t))
        return len(self.times) - 1

    def _slot_ids(self, coords: np.ndarray, create: bool) -> np.ndarray:
        if not self.timed:
            return np.zeros(coords.shape[0], dtype=np.int64)
        tvals = coords[:, 3]
        slots = np.empty(coords.shape[0], dtype=np.int64)
        for t in np.unique(tvals):
            slots[tvals == t] = self._time_slot(float(t), create)
        return slots

    def lookup_rows(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        lin = self._spatial_linear(coords)
        slots = self._slot_ids(coords, create=False)
        rows = np.empty(coords.shape[0], dtype=np.int64)
        for k in np.unique(slots):
            table = self._slot_rows.get(int(k))
            sel = slots == k
            if table is None:
                raise UnknownCoordinateError(f"no table entries for time slot {k}")
            rows[sel] = table[lin[sel]]
        if (rows < 0).any():
            j = int(np.argmax(rows < 0))
            raise UnknownCoordinateError(
                f"coordinate {coords[j].tolist()} has no table entry"
            )
        return rows

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Boolean membership per row, without raising."""
        coords = np.asarray(coords, dtype=np.float64)
        out = np.zeros(coords.shape[0], dtype=bool)
        try:
            lin = self._spatial_linear(coords)
        except UnknownCoordinateError:
            return out
        if self.timed:
            tvals = coords[:, 3]
            for t in np.unique(tvals):
                sel = tvals == t
                k = next(
                    (i for i, known in enumerate(self.times) if abs(known - t) <= self._TIME_ATOL),
                    None,
                )
                if k is not None and k in self._slot_rows:
                    out[sel] = self._slot_rows[k][lin[sel]] >= 0
        else:
            table = self._slot_rows.get(0)
            if table is not None:
                out = table[lin] >= 0
        return out

    def add_points(self, coords: np.ndarray) -> int:
        """Register coordinates, assigning consecutive new rows; returns count added."""
        coords = np.asarray(coords, dtype=np.float64)
        lin = self._spatial_linear(coords)
        slots = self._slot_ids(coords, create=True)
        n_spatial = int(np.prod(self.dims))
        added = 0
        for k, li in zip(slots, lin):
            table = self._slot_rows.get(int(k))
            if table is None:
                table = np.full(n_spatial, -1, dtype=np.int64)
                self._slot_rows[int(k)] = table
            if table[li] >= 0:
                raise ConfigError("duplicate coordinate in lookup-table expansion")
            table[li] = self.n_entries
            self.n_entries += 1
            added += 1
        return added

    def copy(self) -> "CoordMap":
        other = CoordMap(self.dims, self.timed)
        other.times = list(self.times)
        other._slot_rows = {k: v.copy() for k, v in self._slot_rows.items()}
        other.n_entries = self.n_entries
        return other

    def entries(self) -> list[list[int]]:
        """Sorted (ix, iy, iz, slot, row) tuples; the checkpoint payload."""
        nx, ny, nz = self.dims
        out = []
        for k, table in self._slot_rows.items():
            present = np.nonzero(table >= 0)[0]
            for li in present:
                ix, rem = divmod(int(li), ny * nz)
                iy, iz = divmod(rem, nz)
                out.append([ix, iy, iz, int(k), int(table[li])])
        out.sort()
        return out

    @classmethod
    def from_entries(
        cls, dims, timed: bool, times: list[float], entries: list[list[int]]
    ) -> "CoordMap":
        cm = cls(tuple(dims), timed)
        cm.times = [float(t) for t in times]
        nx, ny, nz = cm.dims
        n_spatial = nx * ny * nz
        max_row = -1
        for ix, iy, iz, k, row in entries:
            table = cm._slot_rows.get(k)
            if table is None:
                table = np.full(n_spatial, -1, dtype=np.int64)
                cm._slot_rows[k] = table
            table[(ix * ny + iy) * nz + iz] = row
            max_row = max(max_row, row)
        cm.n_entries = max_row + 1
        return cm


@dataclass
class FieldModel:
    config: ModelConfig
    params: dc.ParamSet
    coord_map: CoordMap | None = None

    def copy(self) -> "FieldModel":
        return FieldModel(
            config=replace(self.config),
            params=self.params.copy(),
            coord_map=self.coord_map.copy() if self.coord_map is not None else None,
        )


def _encoder_width(config: ModelConfig) -> int:
    if config.arch is Arch.PE_RELU:
        return config.in_dim * 2 * config.pe_levels
    if config.arch is Arch.DINER:
        return config.latent_dim
    return config.in_dim


def build_model(config: ModelConfig, grid: GridSpec | None = None) -> FieldModel:
    """Initialize a model deterministically from its seed.

    Weight schemes: He-uniform for the ReLU networks (the positional-encoding
    MLP and the lookup-table model's MLP); the sine networks use U(-1/n, 1/n)
    on the first layer and U(-sqrt(6/n)/omega0, +) elsewhere, with the
    variable-frequency variant additionally drawing its sine-layer biases
    from U(-1, 1) to spread pre-activation magnitudes.  The lookup table
    starts near zero with one row per grid coordinate.
    """
    rng = np.random.default_rng(config.seed)
    params = dc.ParamSet()
    coord_map = None

    if config.arch is Arch.DINER:
        if grid is None:
            raise ConfigError("a lookup-table model needs a grid to enumerate entries")
        coord_map = CoordMap(grid.dims, timed=grid.t is not None)
        coords = make_grid(grid)
        coord_map.add_points(coords)
        params.add(
            "H",
            rng.uniform(
                -TABLE_INIT_SCALE, TABLE_INIT_SCALE, (coord_map.n_entries, config.latent_dim)
            ),
        )

    widths = (
        [_encoder_width(config)]
        + [config.hidden_width] * config.hidden_layers
        + [config.out_channels]
    )
    sine_arch = config.arch in (Arch.SIREN, Arch.FINER)
    for i in range(config.hidden_layers + 1):
        fan_in = widths[i]
        fan_out = widths[i + 1]
        if not sine_arch:
            bound = np.sqrt(6.0 / fan_in)
        elif i == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / config.omega0
        W = rng.uniform(-bound, bound, (fan_out, fan_in))
        is_sine_layer = sine_arch and i < config.hidden_layers
        if config.arch is Arch.FINER and is_sine_layer:
            b = rng.uniform(-1.0, 1.0, fan_out)
        else:
            b = np.zeros(fan_out)
        params.add(f"W{i + 1}", W)
        params.add(f"b{i + 1}", b)

    return FieldModel(config=config, params=params, coord_map=coord_map)


def _apply_head(config: ModelConfig, y: dc.Tensor) -> dc.Tensor:
    if config.head is Head.LINEAR:
        return y
    if config.head is Head.SOFTMAX:
        return dc.softmax(y)
    k = config.linear_channels
    linear_part = dc.slice_cols(y, 0, k)
    class_part = dc.softmax(dc.slice_cols(y, k, config.out_channels))
    return dc.concat_cols(linear_part, class_part)


@dataclass
class PreparedInputs:
    """Per-grid precomputation reused across training iterations.

    Encoding coordinates (or resolving lookup-table rows) is identical for
    every batch drawn from the same grid, so it happens once up front;
    batches just gather rows.
    """

    features: np.ndarray | None = None
    rows: np.ndarray | None = None

    def take(self, idx) -> "PreparedInputs":
        if idx is None:
            return self
        return PreparedInputs(
            features=self.features[idx] if self.features is not None else None,
            rows=self.rows[idx] if self.rows is not None else None,
        )

    @property
    def count(self) -> int:
        return len(self.features) if self.features is not None else len(self.rows)

    @staticmethod
    def concat(a: "PreparedInputs", b: "PreparedInputs") -> "PreparedInputs":
        """Stack two batches so one forward/backward pass covers both."""
        if (a.features is None) != (b.features is None):
            raise ShapeError("cannot concatenate feature and row batches")
        if a.features is not None:
            return PreparedInputs(features=np.vstack([a.features, b.features]))
        return PreparedInputs(rows=np.concatenate([a.rows, b.rows]))


def prepare_inputs(model: FieldModel, coords: np.ndarray) -> PreparedInputs:
    cfg = model.config
    dtype = dc.get_default_dtype()
    if cfg.arch is Arch.PE_RELU:
        return PreparedInputs(features=encode_pe(coords, cfg.pe_levels).astype(dtype))
    if cfg.arch is Arch.DINER:
        return PreparedInputs(rows=model.coord_map.lookup_rows(coords))
    return PreparedInputs(features=np.asarray(coords, dtype=dtype))


def forward_prepared(model: FieldModel, prepared: PreparedInputs) -> dc.Tensor:
    cfg = model.config
    if cfg.arch is Arch.DINER:
        h = dc.table_lookup(model.params["H"], prepared.rows)
    else:
        h = dc.constant(prepared.features)

    for i in range(cfg.hidden_layers):
        z = dc.affine_forward(model.params[f"W{i + 1}"], model.params[f"b{i + 1}"], h)
        if cfg.arch is Arch.SIREN:
            h = dc.sine_act(z, cfg.omega0)
        elif cfg.arch is Arch.FINER:
            h = dc.finer_act(z, cfg.omega0)
        else:
            h = dc.relu(z)

    last = cfg.hidden_layers + 1
    y = dc.affine_forward(model.params[f"W{last}"], model.params[f"b{last}"], h)
    return _apply_head(cfg, y)


def forward(model: FieldModel, coords: np.ndarray) -> dc.Tensor:
    """Evaluate the field at coordinates in [-1, 1]^d.

    Returns the graph node so training can backpropagate through it; use
    ``.data`` for plain evaluation (or ``predict``).  Linear head channels
    are raw outputs, softmax channels are class probabilities.
    """
    return forward_prepared(model, prepare_inputs(model, coords))


def predict(model: FieldModel, coords: np.ndarray) -> np.ndarray:
    """Plain evaluation: (N, out_channels) array, no graph retained."""
    return forward(model, coords).data


def expand_output_head(
    model: FieldModel, extra_channels: int, head_kind: Head = Head.SOFTMAX
) -> FieldModel:
    """Append zero-initialized output channels; existing rows stay bit-identical.

    Adding softmax channels to a linear head turns it MIXED: the original
    channels keep their linear activation, the new block is softmaxed (and
    starts uniform, since all its logits are zero).
    """
    if extra_channels < 1:
        raise ConfigError("extra_channels must be >= 1")
    cfg = model.config
    last = cfg.hidden_layers + 1
    W = model.params[f"W{last}"].data
    b = model.params[f"b{last}"].data
    model.params.replace(
        f"W{last}", np.vstack([W, np.zeros((extra_channels, W.shape[1]), dtype=W.dtype)])
    )
    model.params.replace(
        f"b{last}", np.concatenate([b, np.zeros(extra_channels, dtype=b.dtype)])
    )

    if head_kind is Head.SOFTMAX:
        if cfg.head is Head.SOFTMAX:
            pass  # class block simply grows
        else:
            if cfg.head is Head.LINEAR:
                cfg.linear_channels = cfg.out_channels
            cfg.head = Head.MIXED
    elif head_kind is Head.LINEAR and cfg.head is Head.LINEAR:
        cfg.linear_channels = cfg.out_channels + extra_channels
    else:
        raise ConfigError(
            f"cannot extend a {cfg.head.value} head with {head_kind.value} channels"
        )
    cfg.out_channels += extra_channels
    return model


def expand_hash_table(model: FieldModel, new_coords: np.ndarray, rng) -> FieldModel:
    """Append U(-1, 1) table rows for unseen coordinates; old rows untouched."""
    if model.config.arch is not Arch.DINER:
        raise ConfigError("only lookup-table models can expand their table")
    new_coords = np.asarray(new_coords, dtype=np.float64)
    if model.coord_map.contains(new_coords).any():
        raise ConfigError("duplicate coordinate in lookup-table expansion")
    added = model.coord_map.add_points(new_coords)
    H = model.params["H"].data
    fresh = rng.uniform(-1.0, 1.0, (added, model.config.latent_dim)).astype(H.dtype)
    model.params.replace("H", np.vstack([H, fresh]))
    return model


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic   8 bytes  "NFCKPT1\0"
#   hdrlen  u32 LE
#   header  JSON: config, parameter manifest (name, shape), coord map
#   payload parameters in manifest order, little-endian f32, C-order

CKPT_MAGIC = b"NFCKPT1\x00"


def _config_to_json(cfg: ModelConfig) -> dict:
    return {
        "arch": cfg.arch.value,
        "in_dim": cfg.in_dim,
        "out_channels": cfg.out_channels,
        "hidden_layers": cfg.hidden_layers,
        "hidden_width": cfg.hidden_width,
        "head": cfg.head.value,
        "pe_levels": cfg.pe_levels,
        "omega0": cfg.omega0,
        "latent_dim": cfg.latent_dim,
        "seed": cfg.seed,
        "linear_channels": cfg.linear_channels,
    }


def _config_from_json(d: dict) -> ModelConfig:
    return ModelConfig(
        arch=Arch(d["arch"]),
        in_dim=d["in_dim"],
        out_channels=d["out_channels"],
        hidden_layers=d["hidden_layers"],
        hidden_width=d["hidden_width"],
        head=Head(d["head"]),
        pe_levels=d["pe_levels"],
        omega0=d["omega0"],
        latent_dim=d["latent_dim"],
        seed=d["seed"],
        linear_channels=d["linear_channels"],
    )


def save_checkpoint(model: FieldModel, path) -> None:
    header = {
        "config": _config_to_json(model.config),
        "params": [[name, list(t.data.shape)] for name, t in model.params.items()],
        "coord_map": None,
    }
    if model.coord_map is not None:
        header["coord_map"] = {
            "dims": list(model.coord_map.dims),
            "timed": model.coord_map.timed,
            "times": model.coord_map.times,
            "entries": model.coord_map.entries(),
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in model.params.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> FieldModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(CKPT_MAGIC) or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected {CKPT_MAGIC!r})")
    off = len(CKPT_MAGIC)
    if len(blob) < off + 4:
        raise FormatError(f"{path}: truncated header length at byte {off}")
    (hdr_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hdr_len:
        raise FormatError(f"{path}: truncated header at byte {off}")
    try:
        header = json.loads(blob[off : off + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header at byte {off}: {e}") from e
    off += hdr_len

    config = _config_from_json(header["config"])
    params = dc.ParamSet()
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        expected = count * 4
        if len(blob) < off + expected:
            raise FormatError(
                f"{path}: parameter {name!r} at byte {off} has "
                f"{len(blob) - off} bytes, expected {expected}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        params.add(name, arr.copy())
        off += expected
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")

    coord_map = None
    if header["coord_map"] is not None:
        cm = header["coord_map"]
        coord_map = CoordMap.from_entries(cm["dims"], cm["timed"], cm["times"], cm["entries"])
    return FieldModel(config=config, params=params, coord_map=coord_map)
