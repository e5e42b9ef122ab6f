"""Optimisation loop, seed streams, metrics log and binary checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .autodiff import Tensor
from .cayley import TimeGrid
from .errors import CheckpointError, ConfigError, IntegrationError, NonFiniteGradientError
from .function_space import Domain, sample_quadrature, uniform_grid

log = logging.getLogger(__name__)

# -- optimiser -------------------------------------------------------------------------


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, threshold):
    """Scale every gradient by ``min(1, threshold / norm)``."""
    norm = global_norm(grads)
    if norm <= threshold or norm == 0.0:
        return list(grads), norm
    factor = threshold / norm
    return [g * factor for g in grads], norm


class Adam:
    """Adam with bias correction and global-norm clipping over its own parameters."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip=1.0):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.count = 0

    def step(self):
        names = list(self.params)
        grads = []
        for name in names:
            p = self.params[name]
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            grads.append(g)
        if self.clip is not None:
            grads, _ = clip_by_global_norm(grads, self.clip)
        self.count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.count
        c2 = 1.0 - b2**self.count
        for name, g in zip(names, grads):
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p = self.params[name]
            p.data = p.data - (self.lr / c1) * m / denom

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix):
        out = {f"{prefix}.count": np.array([self.count], dtype=np.int64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays, prefix):
        self.count = int(arrays[f"{prefix}.count"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"{prefix}.v.{k}"], dtype=np.float64)


# -- seed streams ------------------------------------------------------------------------

STREAMS = {"quadrature": 1, "grid": 2, "index": 3, "data": 4, "retry": 5, "eval": 6, "init": 7, "task": 8}


def stream_rng(master, stream, step=0):
    """Counter-based generator for ``(master, stream, step)``.

    Philox is keyed by the master seed; the stream id and step occupy the
    upper counter words, so every (stream, step) owns a disjoint block of
    2**128 draws and any step can be reproduced without replaying earlier ones.
    """
    key = np.array([master & 0xFFFFFFFFFFFFFFFF, 0x6F7274686F666C6F], dtype=np.uint64)
    counter = np.array([0, 0, step, STREAMS[stream]], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


# -- configuration -------------------------------------------------------------------------

TRAIN_DEFAULTS = dict(
    rank=10,
    steps_L=20,
    D=256,
    tau=1e-3,
    n_tail=16,
    budget=1000,
    seed=0,
    lr=1e-3,
    mean_lr=1e-3,
    clip=1.0,
    width=256,
    depth=4,
    bandwidth=0,  # 0 selects the per-dimension default
    alpha=0.0,  # 0 selects the per-dimension default
    eval_every=100,
    eval_multiplier=4,
    checkpoint_every=0,
)


@dataclass
class TrainConfig:
    objective: str
    dim: int = 1
    channels: int = 1
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def as_dict(self):
        return dict(objective=self.objective, dim=self.dim, channels=self.channels, **self.values)

    def dumps(self):
        return cfgmod.dumps(self.as_dict(), section="training")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        objective = d.pop("objective")
        dim = int(d.pop("dim", 1))
        channels = int(d.pop("channels", 1))
        return cls(objective, dim, channels, d)


# -- checkpoints ----------------------------------------------------------------------------

MAGIC = b"ORTHOFLW"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f8"): 1, np.dtype("<i8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config_text: str
    step: int
    arrays: dict  # name -> ndarray, insertion-ordered

    def to_bytes(self):
        buf = io.BytesIO()
        text = self.config_text.encode("utf-8")
        buf.write(struct.pack("<8sIQQ", MAGIC, VERSION, self.step, len(text)))
        buf.write(text)
        buf.write(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            arr = np.asarray(arr)
            dtype = np.dtype("<i8") if np.issubdtype(arr.dtype, np.integer) else np.dtype("<f8")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", DTYPE_TAGS[dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob, source="<bytes>"):
        def take(fmt, off):
            size = struct.calcsize(fmt)
            if off + size > len(blob):
                raise CheckpointError(f"{source}: truncated at byte {off}")
            return struct.unpack_from(fmt, blob, off), off + size

        (magic, version, step, text_len), off = take("<8sIQQ", 0)
        if magic != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
        if off + text_len > len(blob):
            raise CheckpointError(f"{source}: config length {text_len} runs past end of file")
        text = blob[off : off + text_len].decode("utf-8")
        off += text_len
        (count,), off = take("<I", off)
        arrays = {}
        for _ in range(count):
            (name_len,), off = take("<H", off)
            if off + name_len > len(blob):
                raise CheckpointError(f"{source}: truncated record name")
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (tag, rank), off = take("<BB", off)
            if tag not in TAG_DTYPES:
                raise CheckpointError(f"{source}: unknown dtype tag {tag} for {name!r}")
            dims, off = take(f"<{rank}Q", off)
            nbytes = int(np.prod(dims, dtype=np.int64)) * 8
            if off + nbytes > len(blob):
                raise CheckpointError(f"{source}: payload of {name!r} is truncated")
            arrays[name] = np.frombuffer(blob, TAG_DTYPES[tag], int(np.prod(dims, dtype=np.int64)), off).reshape(dims).copy()
            off += nbytes
        if off != len(blob):
            raise CheckpointError(f"{source}: {len(blob) - off} trailing bytes")
        return cls(text, int(step), arrays)

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), source=str(path))

    def config(self):
        import tomli

        return TrainConfig.from_dict(cfgmod.flatten(tomli.loads(self.config_text)))


# -- tasks ----------------------------------------------------------------------------------


class Task:
    """One objective bound to its models.

    Subclasses set ``modules`` (name -> Module), ``optimizers`` (name ->
    Adam) and implement ``step_loss``/``evaluate``.  ``step_loss`` returns
    the scalar to *minimise* and a dict of per-step metrics that includes
    ``objective`` and ``norm-drift``.
    """

    metric_names: tuple = ()
    eval_names: tuple = ()

    def __init__(self, config: TrainConfig):
        self.config = config
        self.domain = Domain(config.dim, config.channels)
        self.modules = {}
        self.optimizers = {}

    def step_loss(self, points, grid, index_rng, data_rng):
        raise NotImplementedError

    def evaluate(self, points, grid):
        return {}

    def arrays(self):
        out = {}
        for mname, module in self.modules.items():
            for k, v in module.arrays().items():
                out[f"{mname}.{k}"] = v
        for oname, opt in self.optimizers.items():
            out.update(opt.state_arrays(f"adam.{oname}"))
        return out

    def load_arrays(self, arrays):
        for mname, module in self.modules.items():
            prefix = mname + "."
            module.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        for oname, opt in self.optimizers.items():
            opt.load_state(arrays, f"adam.{oname}")


TASKS = {}


def register(name):
    def wrap(cls):
        TASKS[name] = cls
        return cls

    return wrap


def build_task(config):
    from . import experiments  # noqa: F401 - registers the experiment tasks

    if config.objective not in TASKS:
        raise ConfigError(f"unknown objective {config.objective!r}; known: {sorted(TASKS)}")
    return TASKS[config.objective](config)


# -- loop -------------------------------------------------------------------------------------


def norm_drift(evolved, initial):
    """Max change of discrete squared norms between two ``(n, D, C)`` stacks."""
    a = evolved.data if isinstance(evolved, Tensor) else np.asarray(evolved)
    b = initial.data if isinstance(initial, Tensor) else np.asarray(initial)
    if a.size == 0:
        return 0.0
    na = np.sum(a * a, axis=(-2, -1)) / a.shape[-2]
    nb = np.sum(b * b, axis=(-2, -1)) / b.shape[-2]
    return float(np.abs(na - nb).max())


@dataclass
class TrainResult:
    task: Task
    checkpoint: Checkpoint
    rows: list


def _format_number(x):
    if x is None or x == "":
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class MetricsWriter:
    """Append-only CSV with a fixed header; timings go to a separate file."""

    def __init__(self, path, columns, timing_path=None):
        self.columns = list(columns)
        self.path = path
        self.timing_path = timing_path
        if path is not None:
            new = not os.path.exists(path)
            self._fh = open(path, "a", newline="", encoding="utf-8")
            self._csv = csv.writer(self._fh, lineterminator="\n")
            if new:
                self._csv.writerow(self.columns)
        if timing_path is not None:
            new = not os.path.exists(timing_path)
            self._tfh = open(timing_path, "a", newline="", encoding="utf-8")
            if new:
                self._tfh.write("step,wall-ms\n")

    def write(self, row, wall_ms=None):
        if self.path is not None:
            self._csv.writerow([_format_number(row.get(c)) for c in self.columns])
        if self.timing_path is not None and wall_ms is not None:
            self._tfh.write(f"{row['step']},{wall_ms:.3f}\n")

    def close(self):
        if self.path is not None:
            self._fh.close()
        if self.timing_path is not None:
            self._tfh.close()


def train(config: TrainConfig, out_dir=None, resume=None, task=None, quiet=True, budget=None):
    """Run the step budget; returns the task, a final checkpoint and the metric rows.

    ``resume`` is a :class:`Checkpoint`; training continues from its step
    with identical random streams.
    """
    task = task or build_task(config)
    start = 0
    if resume is not None:
        task.load_arrays(resume.arrays)
        start = resume.step
    total = config["budget"] if budget is None else budget
    master = int(config["seed"])
    D, L = config["D"], config["steps_L"]
    eval_points = uniform_grid(task.domain, _eval_side(D * config["eval_multiplier"], config.dim))
    eval_grid = TimeGrid.uniform(L)
    columns = ["step", "objective", "norm-drift"] + list(task.metric_names) + ["eval-" + n for n in task.eval_names]
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = MetricsWriter(
            os.path.join(out_dir, "metrics.csv"), columns, timing_path=os.path.join(out_dir, "timing.csv")
        )
    rows = []
    try:
        for step in range(start, total):
            t0 = time.perf_counter()
            loss, metrics = _attempt(task, config, master, step)
            loss.backward()
            for opt in task.optimizers.values():
                opt.step()
            for opt in task.optimizers.values():
                opt.zero_grad()
            row = {"step": step}
            row.update(metrics)
            every = config["eval_every"]
            if every and ((step + 1) % every == 0 or step + 1 == total):
                for k, v in task.evaluate(eval_points, eval_grid).items():
                    row["eval-" + k] = v
            wall = 1e3 * (time.perf_counter() - t0)
            rows.append(row)
            if writer is not None:
                writer.write(row, wall)
            if not quiet and (step % 50 == 0 or step + 1 == total):
                log.info("step %d objective %.6g drift %.2e", step, row["objective"], row["norm-drift"])
            ck_every = config["checkpoint_every"]
            if out_dir is not None and ck_every and (step + 1) % ck_every == 0:
                snapshot(task, step + 1).save(os.path.join(out_dir, "checkpoint.bin"))
    finally:
        if writer is not None:
            writer.close()
    final = snapshot(task, max(total, start))
    if out_dir is not None:
        final.save(os.path.join(out_dir, "checkpoint.bin"))
    return TrainResult(task, final, rows)


def _eval_side(count, dim):
    return max(1, int(round(count ** (1.0 / dim))))


def _attempt(task, config, master, step):
    points = sample_quadrature(task.domain, config["D"], stream_rng(master, "quadrature", step))
    index_rng = stream_rng(master, "index", step)
    data_rng = stream_rng(master, "data", step)
    grid = TimeGrid.random(config["steps_L"], stream_rng(master, "grid", step))
    try:
        return task.step_loss(points, grid, index_rng, data_rng)
    except IntegrationError as exc:
        log.warning("step %d: %s; retrying with a resampled time grid", step, exc)
        for module in task.modules.values():
            module.zero_grad()
        grid = TimeGrid.random(config["steps_L"], stream_rng(master, "retry", step))
        index_rng = stream_rng(master, "index", step)
        data_rng = stream_rng(master, "data", step)
        return task.step_loss(points, grid, index_rng, data_rng)


def snapshot(task, step):
    return Checkpoint(task.config.dumps(), int(step), task.arrays())


def restore(checkpoint):
    """Rebuild the task stored in a checkpoint."""
    config = checkpoint.config()
    task = build_task(config)
    task.load_arrays(checkpoint.arrays)
    return task
