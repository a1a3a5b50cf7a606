"""Optimization loop: network + criterion, SGD, checkpoints, evaluation.

Data parallelism is in-process and synchronous: each batch is split into K
shards, K threads compute gradients against fresh Variable views of the
shared parameter tensors, and the coordinator averages the shard sums into
one SGD update at the barrier. With K=1 this degenerates to plain SGD, and
the whole loop is bit-reproducible from (seed, config, corpus).
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, Variable
from .criterion import make_criterion
from .data import load_manifest, prefetch_stream, shuffle_batches, sort_and_batch
from .errors import (
    ArchError,
    AsrkitError,
    CheckpointError,
    ConfigError,
    DimensionError,
    PipelineError,
    UsageError,
)
from .features import FeatureConfig
from .lexicon import TokenTable, load_lexicon, load_tokens, split_on_silence

STAGES = ("data_load", "network_fwd", "criterion_fwd", "backward", "optimizer")
logger = logging.getLogger(__name__)


# --- architecture DSL ---------------------------------------------------------

@dataclass
class Layer:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass
class ArchSpec:
    layers: list
    text: str
    input_dim: int
    output_dim: int


def parse_arch(text: str) -> ArchSpec:
    """Parse layer lines: `C in out kernel stride pad`, `L in out`, `R`, `LSM`.

    `#` starts a comment. Widths must chain: each C/L layer's input equals
    the previous C/L layer's output.
    """
    layers = []
    current = None
    input_dim = None
    for raw in text.splitlines():
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        idx = len(layers)
        kind = tokens[0]
        if kind == "C":
            if len(tokens) != 6:
                raise ArchError(f"layer {idx}: C takes 5 integers, got {tokens[1:]}")
            try:
                in_dim, out_dim, kernel, stride, padding = map(int, tokens[1:])
            except ValueError:
                raise ArchError(f"layer {idx}: C takes 5 integers, got {tokens[1:]}") from None
            if in_dim < 1 or out_dim < 1 or kernel < 1 or stride < 1 or padding < 0:
                raise ArchError(f"layer {idx}: bad conv geometry {tokens[1:]}")
            layer = Layer("C", in_dim, out_dim, kernel, stride, padding)
        elif kind == "L":
            if len(tokens) != 3:
                raise ArchError(f"layer {idx}: L takes 2 integers, got {tokens[1:]}")
            try:
                in_dim, out_dim = int(tokens[1]), int(tokens[2])
            except ValueError:
                raise ArchError(f"layer {idx}: L takes 2 integers, got {tokens[1:]}") from None
            if in_dim < 1 or out_dim < 1:
                raise ArchError(f"layer {idx}: bad linear widths {tokens[1:]}")
            layer = Layer("L", in_dim, out_dim)
        elif kind in ("R", "LSM"):
            if len(tokens) != 1:
                raise ArchError(f"layer {idx}: {kind} takes no arguments")
            layer = Layer(kind)
        else:
            raise ArchError(f"layer {idx}: unknown layer kind {kind!r}")
        if layer.kind in ("C", "L"):
            if current is not None and layer.in_dim != current:
                raise ArchError(
                    f"layer {idx}: expects input width {layer.in_dim}, "
                    f"previous layer produces {current}"
                )
            if input_dim is None:
                input_dim = layer.in_dim
            current = layer.out_dim
        layers.append(layer)
    if input_dim is None:
        raise ArchError("architecture needs at least one C or L layer")
    return ArchSpec(layers=layers, text=text, input_dim=input_dim, output_dim=current)


def _pname(i: int) -> str:
    return f"layer{i}.weight"


class Network:
    """Stack of temporal convolutions and per-frame linear maps.

    Layers hold no biases; widths come entirely from the arch text. forward
    maps one utterance's T-by-D features to T'-by-N emission scores.
    """

    def __init__(self, arch: ArchSpec, params: dict):
        self.arch = arch
        self.params = params

    def forward(self, x, params: Optional[dict] = None) -> Variable:
        p = self.params if params is None else params
        h = x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=np.float32))
        if h.shape[-1] != self.arch.input_dim:
            raise DimensionError(
                f"network expects {self.arch.input_dim}-dim features, got {h.shape[-1]}"
            )
        for i, layer in enumerate(self.arch.layers):
            if layer.kind == "C":
                h = ad.conv1d(h, p[_pname(i)], stride=layer.stride, padding=layer.padding)
            elif layer.kind == "L":
                h = ad.matmul(h, p[_pname(i)])
            elif layer.kind == "R":
                h = ad.relu(h)
            else:
                h = ad.log_softmax(h)
        return h

    def output_frames(self, t: int) -> int:
        for layer in self.arch.layers:
            if layer.kind == "C":
                t = (t + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return t


def build_network(arch, seed: int) -> Network:
    """Deterministic uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    if isinstance(arch, str):
        arch = parse_arch(arch)
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(arch.layers):
        if layer.kind == "C":
            fan_in = layer.kernel * layer.in_dim
            shape = (layer.kernel, layer.in_dim, layer.out_dim)
        elif layer.kind == "L":
            fan_in = layer.in_dim
            shape = (layer.in_dim, layer.out_dim)
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[_pname(i)] = Variable(weights, requires_grad=True)
    return Network(arch, params)


def named_parameters(network: Network, criterion) -> list:
    """Canonical (name, Variable) ordering shared by optimizer and checkpoints."""
    named = [(name, network.params[name]) for name in network.params]
    named.extend(sorted(criterion.params().items()))
    return named


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"W2LC"
CHECKPOINT_VERSION = 1


@dataclass
class CheckpointState:
    arch_text: str
    epoch: int
    step: int
    config: dict
    tensors: dict


def save_checkpoint(path, arch_text: str, epoch: int, step: int, config: dict, tensors: dict):
    """Binary layout: magic, version, arch text, counters, config JSON,
    tensor table (name, rank, extents, float32 payload), trailing CRC32."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = arch_text.encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<QQ", epoch, step))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointError("file too short to be a checkpoint")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    cur = _Cursor(raw[:-4])
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch_text = cur.take(cur.u32()).decode("utf-8")
    epoch = cur.u64()
    step = cur.u64()
    config = json.loads(cur.take(cur.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        shape = tuple(cur.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(shape).copy()
        tensors[name] = arr
    if cur.pos != len(cur.raw):
        raise CheckpointError(f"{len(cur.raw) - cur.pos} trailing bytes after tensor table")
    return CheckpointState(arch_text=arch_text, epoch=epoch, step=step,
                           config=config, tensors=tensors)


def restore_parameters(state: CheckpointState, network: Network, criterion,
                       optimizer: SGD, mode: str) -> tuple:
    """Copy checkpoint tensors into live Variables.

    continue: parameters, optimizer velocities, and counters all restored.
    fork: parameters only; velocities and counters reset (transfer setup).
    Returns (epoch, step) to resume from.
    """
    named = named_parameters(network, criterion)
    for name, var in named:
        arr = state.tensors.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tuple(arr.shape) != var.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, "
                f"architecture expects {var.value.shape}"
            )
        var.value = Tensor(arr)
    if mode == "fork":
        return 0, 0
    if mode != "continue":
        raise ConfigError(f"unknown restore mode {mode!r}")
    for (name, _), vel in zip(named, optimizer.velocity):
        arr = state.tensors.get(f"velocity/{name}")
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor {'velocity/' + name!r}")
        if tuple(arr.shape) != vel.shape:
            raise CheckpointError(f"velocity for {name!r} has shape {tuple(arr.shape)}")
        vel[:] = arr
    return state.epoch, state.step


# --- the training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    train_manifest: str
    tokens: str
    rundir: str
    arch: Optional[str] = None            # path to an arch file (train mode)
    valid_manifest: Optional[str] = None
    lexicon: Optional[str] = None
    checkpoint: Optional[str] = None      # source for continue/fork
    mode: str = "train"
    criterion: str = "ctc"
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 4
    epochs: int = 1
    workers: int = 1
    seed: int = 0
    prefetch_workers: int = 2
    prefetch_queue: int = 2
    shuffle: bool = True
    overwrite: bool = False
    feature: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.mode not in ("train", "continue", "fork"):
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.workers < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("workers, batch_size and epochs must be >= 1")
        if self.mode == "train" and not self.arch:
            raise UsageError("mode train needs --arch")
        if self.mode in ("continue", "fork") and not self.checkpoint:
            raise UsageError(f"mode {self.mode} needs --checkpoint")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: Optional[float]
    valid_ler: Optional[float]
    valid_wer: Optional[float]
    stage_ms: dict
    utterances: int
    steps: int


def format_epoch_line(stats: EpochStats) -> str:
    def fmt(x):
        return "-" if x is None else f"{x:.6f}"

    return (f"epoch {stats.epoch} loss {stats.train_loss:.6f} "
            f"valid-loss {fmt(stats.valid_loss)} valid-LER {fmt(stats.valid_ler)} "
            f"valid-WER {fmt(stats.valid_wer)}")


def train_epoch(stream, network: Network, criterion, optimizer: SGD,
                workers: int = 1) -> dict:
    """One pass over the batch stream; returns loss and per-stage timings.

    Per batch: K shard gradients are computed in parallel against fresh
    Variable views of the shared parameter tensors, summed, divided by the
    batch size, and applied in a single SGD step. Worker stage times are
    reported as the maximum across workers so stage sums stay comparable to
    wall-clock time.
    """
    master = named_parameters(network, criterion)
    net_names = set(network.params)
    totals = {s: 0.0 for s in STAGES}
    loss_sum = 0.0
    utterances = 0
    steps = 0

    def work(batch, indices):
        wparams = {name: Variable(var.value, requires_grad=True)
                   for name, var in master if name in net_names}
        extra = {name: np.zeros(var.value.shape)
                 for name, var in master if name not in net_names}
        times = {"network_fwd": 0.0, "criterion_fwd": 0.0, "backward": 0.0}
        lsum = 0.0
        for i in indices:
            uid = batch.utt_ids[i]
            try:
                target = criterion.prepare_target(batch.utterance_target(i))
                t0 = time.perf_counter()
                emissions = network.forward(batch.utterance_features(i), wparams)
                t1 = time.perf_counter()
                out = criterion.loss_grad(emissions.value.data, target)
                t2 = time.perf_counter()
                ad.backward(emissions, out.grad_emissions)
                t3 = time.perf_counter()
            except AsrkitError as exc:
                raise PipelineError(f"utterance {uid!r}: {exc}") from exc
            times["network_fwd"] += t1 - t0
            times["criterion_fwd"] += t2 - t1
            times["backward"] += t3 - t2
            lsum += out.loss
            if out.grad_transitions is not None:
                extra["criterion.transitions"] += out.grad_transitions
        grads = {name: np.asarray(v.grad.data, dtype=np.float64)
                 for name, v in wparams.items()}
        grads.update(extra)
        return lsum, grads, times

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        it = iter(stream)
        while True:
            t0 = time.perf_counter()
            batch = next(it, None)
            totals["data_load"] += time.perf_counter() - t0
            if batch is None:
                break
            shards = [s for s in np.array_split(np.arange(batch.size), workers) if s.size]
            if pool is None or len(shards) == 1:
                results = [work(batch, s) for s in shards]
            else:
                results = list(pool.map(lambda s: work(batch, s), shards))

            for stage in ("network_fwd", "criterion_fwd", "backward"):
                totals[stage] += max(r[2][stage] for r in results)
            t0 = time.perf_counter()
            for name, var in master:
                total = np.zeros(var.value.shape)
                for _, grads, _ in results:
                    total += grads[name]
                var.zero_grad()
                var.accumulate_grad((total / batch.size).astype(np.float32))
            optimizer.step()
            optimizer.zero_grad()
            totals["optimizer"] += time.perf_counter() - t0

            loss_sum += sum(r[0] for r in results)
            utterances += batch.size
            steps += 1
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    if utterances == 0:
        raise PipelineError("training stream produced no utterances")
    stage_ms = {s: 1000.0 * totals[s] / steps for s in STAGES}
    return {"loss": loss_sum / utterances, "stage_ms": stage_ms,
            "steps": steps, "utterances": utterances}


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        return len(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def evaluate(stream, network: Network, criterion, table: TokenTable) -> tuple:
    """Greedy metrics: mean loss, corpus LER, corpus WER.

    The hypothesis is the collapsed Viterbi path. Token errors compare raw
    token sequences; word errors compare silence-delimited token groups
    (the whole utterance is one group when the table has no separator).
    """
    losses = []
    tok_dist = tok_len = 0
    word_dist = word_len = 0
    sil = table.silence_id
    for batch in stream:
        for i in range(batch.size):
            ref = batch.utterance_target(i)
            if not ref:
                logger.warning("skipping utterance %r: empty reference", batch.utt_ids[i])
                continue
            emissions = network.forward(batch.utterance_features(i))
            e = emissions.value.data
            target = criterion.prepare_target(ref)
            losses.append(criterion.loss_grad(e, target).loss)
            hyp = criterion.collapse(criterion.viterbi_path(e))
            tok_dist += edit_distance(ref, hyp)
            tok_len += len(ref)
            if sil is not None:
                ref_words = [tuple(g) for g in split_on_silence(ref, sil)]
                hyp_words = [tuple(g) for g in split_on_silence(hyp, sil)]
            else:
                ref_words, hyp_words = [tuple(ref)], [tuple(hyp)]
            word_dist += edit_distance(ref_words, hyp_words)
            word_len += len(ref_words)
    if not losses:
        raise PipelineError("evaluation stream produced no scorable utterances")
    return (sum(losses) / len(losses),
            tok_dist / tok_len if tok_len else 0.0,
            word_dist / word_len if word_len else 0.0)


def _config_snapshot(config: TrainConfig) -> dict:
    return {
        "criterion": config.criterion,
        "lr": config.lr,
        "momentum": config.momentum,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "feature": asdict(config.feature),
    }


def run_training(config: TrainConfig, on_epoch=None) -> list:
    """Full training per the config; returns per-epoch stats.

    Writes epoch_<e>.ckpt and last.ckpt into the run directory after each
    epoch. on_epoch(stats) fires as each epoch completes.
    """
    table = load_tokens(config.tokens)
    lexicon = load_lexicon(config.lexicon, table) if config.lexicon else None
    criterion = make_criterion(config.criterion, table)

    if config.mode == "train":
        with open(config.arch, "r", encoding="utf-8") as f:
            arch_text = f.read()
        network = build_network(parse_arch(arch_text), config.seed)
        state = None
    else:
        state = load_checkpoint(config.checkpoint)
        arch_text = state.arch_text
        network = build_network(parse_arch(arch_text), config.seed)
    if network.arch.output_dim != criterion.n_outputs:
        raise ConfigError(
            f"network emits {network.arch.output_dim} scores per frame but the "
            f"{config.criterion} criterion over {len(table)} tokens needs "
            f"{criterion.n_outputs}"
        )

    named = named_parameters(network, criterion)
    optimizer = SGD([var for _, var in named], lr=config.lr, momentum=config.momentum)
    start_epoch = 0
    step = 0
    if state is not None:
        start_epoch, step = restore_parameters(state, network, criterion,
                                               optimizer, config.mode)
    if start_epoch >= config.epochs:
        raise UsageError(
            f"checkpoint is already at epoch {start_epoch}; raise --epochs ({config.epochs})"
        )

    if os.path.isdir(config.rundir):
        has_ckpt = any(name.endswith(".ckpt") for name in os.listdir(config.rundir))
        if has_ckpt and config.mode != "continue" and not config.overwrite:
            raise UsageError(
                f"run directory {config.rundir!r} already holds checkpoints; "
                "pass --overwrite to reuse it"
            )
    os.makedirs(config.rundir, exist_ok=True)

    train_entries = load_manifest(config.train_manifest)
    batches = sort_and_batch(train_entries, config.batch_size)
    valid_batches = None
    if config.valid_manifest:
        valid_batches = sort_and_batch(load_manifest(config.valid_manifest),
                                       config.batch_size)

    history = []
    for epoch in range(start_epoch, config.epochs):
        order = shuffle_batches(batches, config.seed, epoch) if config.shuffle else batches
        stream = prefetch_stream(order, config.feature, table, lexicon,
                                 parallelism=config.prefetch_workers,
                                 queue_capacity=config.prefetch_queue)
        result = train_epoch(stream, network, criterion, optimizer, config.workers)
        step += result["steps"]

        valid_loss = valid_ler = valid_wer = None
        if valid_batches is not None:
            vstream = prefetch_stream(valid_batches, config.feature, table, lexicon,
                                      parallelism=config.prefetch_workers,
                                      queue_capacity=config.prefetch_queue)
            valid_loss, valid_ler, valid_wer = evaluate(vstream, network, criterion, table)

        stats = EpochStats(epoch=epoch + 1, train_loss=result["loss"],
                           valid_loss=valid_loss, valid_ler=valid_ler,
                           valid_wer=valid_wer, stage_ms=result["stage_ms"],
                           utterances=result["utterances"], steps=result["steps"])
        history.append(stats)

        tensors = {name: var.value.data for name, var in named}
        for (name, _), vel in zip(named, optimizer.velocity):
            tensors[f"velocity/{name}"] = vel
        snapshot = _config_snapshot(config)
        path = os.path.join(config.rundir, f"epoch_{epoch + 1}.ckpt")
        save_checkpoint(path, arch_text, epoch + 1, step, snapshot, tensors)
        save_checkpoint(os.path.join(config.rundir, "last.ckpt"),
                        arch_text, epoch + 1, step, snapshot, tensors)
        if on_epoch is not None:
            on_epoch(stats)
    return history
