"""Masking process and unmasking policies.

Holds the chain state (token ids + mask flags on a block grid), the
training-time corruption, confidence computation over masked positions,
static top-r / dynamic threshold selection, the baseline one-forward-per-
step denoising loop, and trace recording.

Threshold comparisons are on max softmax probability. Tie-breaks are fixed
everywhere (lowest position index, lowest token id) so decoding is fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import checkpoint
from .corpus import EOS_ID, MASK_ID, PAD_ID
from .errors import ContractViolationError, InvalidConfigError
from .numerics.tensor import Tensor, no_grad


@dataclass
class SequenceState:
    ids: np.ndarray        # int64, length L
    masked: np.ndarray     # bool, length L; masked[i] <=> ids[i] == MASK
    prompt_len: int
    block_size: int
    finished: bool = False  # EOS committed; later blocks get PAD backfill

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=bool)

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def n_blocks(self) -> int:
        return (self.length - self.prompt_len) // self.block_size

    @property
    def current_block(self) -> int:
        """First response block containing a mask (n_blocks when clean)."""
        masked_pos = np.flatnonzero(self.masked)
        if len(masked_pos) == 0:
            return self.n_blocks
        return int((masked_pos[0] - self.prompt_len) // self.block_size)

    def block_bounds(self, block: int) -> tuple[int, int]:
        start = self.prompt_len + block * self.block_size
        return start, start + self.block_size

    def window_end(self, block: int | None = None) -> int:
        """End of the computation window: everything up to and including
        the given (default: current) block."""
        if block is None:
            block = min(self.current_block, self.n_blocks - 1)
        return self.prompt_len + (block + 1) * self.block_size

    def masked_in_block(self, block: int) -> np.ndarray:
        lo, hi = self.block_bounds(block)
        return lo + np.flatnonzero(self.masked[lo:hi])

    def mask_count(self) -> int:
        return int(self.masked.sum())

    def clone(self) -> "SequenceState":
        return SequenceState(
            ids=self.ids.copy(),
            masked=self.masked.copy(),
            prompt_len=self.prompt_len,
            block_size=self.block_size,
            finished=self.finished,
        )

    def validate(self) -> None:
        if (self.length - self.prompt_len) % self.block_size:
            raise InvalidConfigError("response region is not a whole number of blocks")
        if not np.array_equal(self.masked, self.ids == MASK_ID):
            raise ContractViolationError("mask flags inconsistent with MASK ids")
        if self.masked[: self.prompt_len].any():
            raise ContractViolationError("prompt positions must never be masked")


def state_from_example(ex, block_size: int, all_masked: bool = True) -> SequenceState:
    """Decode-ready state (response fully masked) or the clean x0."""
    prompt = np.asarray(ex.prompt_ids, dtype=np.int64)
    resp = np.asarray(ex.response_ids, dtype=np.int64)
    ids = np.concatenate([prompt, np.full_like(resp, MASK_ID) if all_masked else resp])
    masked = np.zeros(len(ids), dtype=bool)
    if all_masked:
        masked[len(prompt):] = True
    return SequenceState(ids=ids, masked=masked, prompt_len=len(prompt),
                         block_size=block_size)


def initial_state(prompt_ids, n_blocks: int, block_size: int) -> SequenceState:
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    total = len(prompt) + n_blocks * block_size
    ids = np.concatenate([prompt, np.full(n_blocks * block_size, MASK_ID, dtype=np.int64)])
    masked = np.zeros(total, dtype=bool)
    masked[len(prompt):] = True
    return SequenceState(ids=ids, masked=masked, prompt_len=len(prompt), block_size=block_size)


# ---------------------------------------------------------------------------
# corruption (training-time forward process)
# ---------------------------------------------------------------------------


def corrupt(x0: SequenceState, rng: np.random.Generator, rate: float | None = None) -> SequenceState:
    """Mask response tokens independently with one shared rate u ~ U(0,1)
    per sequence (rate can be forced for tests). Prompt and PAD positions
    are never masked."""
    if x0.masked.any():
        raise ContractViolationError("corrupt expects a fully clean sequence")
    u = float(rng.random()) if rate is None else float(rate)
    out = x0.clone()
    eligible = np.zeros(out.length, dtype=bool)
    eligible[out.prompt_len:] = out.ids[out.prompt_len:] != PAD_ID
    draw = rng.random(out.length) < u
    hit = eligible & draw
    out.ids[hit] = MASK_ID
    out.masked[hit] = True
    return out


# ---------------------------------------------------------------------------
# confidence and selection
# ---------------------------------------------------------------------------


@dataclass
class Confidence:
    positions: np.ndarray  # masked positions of the current block
    probs: np.ndarray      # max softmax probability per position
    tokens: np.ndarray     # argmax token id (ties -> lowest id)

    def __len__(self) -> int:
        return len(self.positions)


def _logits_data(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def confidence_of(logits, x: SequenceState) -> Confidence:
    """Max softmax probability and argmax token for each masked position of
    the current block. Empty when the block is clean."""
    data = _logits_data(logits)
    block = x.current_block
    if block >= x.n_blocks:
        return Confidence(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64))
    positions = x.masked_in_block(block)
    if len(positions) == 0 or len(data) <= positions[-1]:
        raise ContractViolationError("logits rows do not cover the current block")
    rows = data[positions]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    np.maximum(shifted, -700.0, out=shifted)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    tokens = p.argmax(axis=-1)
    probs = p[np.arange(len(positions)), tokens]
    return Confidence(positions=positions, probs=probs, tokens=tokens.astype(np.int64))


def select_static(conf: Confidence, r: int) -> np.ndarray:
    """Positions of the min(r, #masked) highest-confidence entries; ties
    broken by lowest position index."""
    if r < 1:
        raise InvalidConfigError("static policy requires r >= 1")
    if len(conf) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((conf.positions, -conf.probs))
    return np.sort(conf.positions[order[: min(r, len(conf))]])


def select_dynamic(conf: Confidence, tau: float) -> np.ndarray:
    """All positions with confidence strictly above tau; if none, the single
    highest-confidence position, so every step makes progress."""
    if not 0.0 < tau <= 1.0:
        raise InvalidConfigError("dynamic policy requires tau in (0, 1]")
    if len(conf) == 0:
        return np.empty(0, dtype=np.int64)
    above = conf.probs > tau
    if above.any():
        return np.sort(conf.positions[above])
    order = np.lexsort((conf.positions, -conf.probs))
    return conf.positions[order[:1]]


@dataclass
class Policy:
    kind: str = "static"   # "static" | "dynamic"
    r: int = 1
    tau: float = 1.0

    def select(self, conf: Confidence) -> np.ndarray:
        if self.kind == "static":
            return select_static(conf, self.r)
        if self.kind == "dynamic":
            return select_dynamic(conf, self.tau)
        raise InvalidConfigError(f"unknown policy kind {self.kind!r}")

    @property
    def param(self) -> float:
        return float(self.r) if self.kind == "static" else float(self.tau)


def reveal(x: SequenceState, positions, tokens) -> SequenceState:
    """Set ids and clear mask flags at `positions` (all currently masked)."""
    positions = np.asarray(positions, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(positions) == 0:
        return x
    if not x.masked[positions].all():
        raise ContractViolationError("reveal of a position that is not masked")
    x.ids[positions] = tokens
    x.masked[positions] = False
    return x


def remask(x: SequenceState, positions) -> SequenceState:
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) == 0:
        return x
    if x.masked[positions].any():
        raise ContractViolationError("remask of a position that is already masked")
    x.ids[positions] = MASK_ID
    x.masked[positions] = True
    return x


def finalize_block(x: SequenceState) -> int:
    """After a block completes: if an EOS is committed in the response, mark
    the sequence finished and backfill all remaining masked positions with
    PAD (no further forwards). Returns the number of backfilled positions."""
    resp = x.ids[x.prompt_len:]
    resp_masked = x.masked[x.prompt_len:]
    if not np.any((resp == EOS_ID) & ~resp_masked):
        return 0
    x.finished = True
    rest = np.flatnonzero(x.masked)
    x.ids[rest] = PAD_ID
    x.masked[rest] = False
    return len(rest)


# ---------------------------------------------------------------------------
# trace recording
# ---------------------------------------------------------------------------


@dataclass
class DraftRecord:
    position: int
    token: int
    mrp_step: int      # 1-based index of the drafting MRP round
    confidence: float  # accumulated-logits confidence at draft time


@dataclass
class StepRecord:
    """Snapshot of one forward pass during decoding.

    kind "backbone": h/logits are the model outputs over the window
    (verify=True when this forward verified drafts). kind "mrp": h/logits
    hold the correction head's hidden and logit residuals.
    """

    kind: str
    block: int
    window: int
    ids: np.ndarray
    masked: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    revealed_positions: np.ndarray
    revealed_tokens: np.ndarray
    verify: bool = False
    drafts: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    rejected: list = field(default_factory=list)


@dataclass
class DecodeTrace:
    block_size: int
    prompt_len: int
    records: list = field(default_factory=list)

    def backbone_records(self) -> list:
        return [r for r in self.records if r.kind == "backbone"]


def save_trace(path: str, trace: DecodeTrace) -> None:
    named = [("trace.meta", np.asarray([len(trace.records), trace.block_size, trace.prompt_len]))]
    for i, r in enumerate(trace.records):
        p = f"step.{i:05d}"
        drafts = np.asarray(
            [[d.position, d.token, d.mrp_step, d.confidence] for d in r.drafts]
        ).reshape(-1, 4)
        named += [
            (f"{p}.meta", np.asarray([
                0.0 if r.kind == "backbone" else 1.0,
                float(r.block), float(r.window), 1.0 if r.verify else 0.0,
            ])),
            (f"{p}.ids", r.ids.astype(np.float64)),
            (f"{p}.masked", r.masked.astype(np.float64)),
            (f"{p}.h", r.h),
            (f"{p}.logits", r.logits),
            (f"{p}.revealed_positions", r.revealed_positions.astype(np.float64)),
            (f"{p}.revealed_tokens", r.revealed_tokens.astype(np.float64)),
            (f"{p}.drafts", drafts.astype(np.float64)),
            (f"{p}.accepted", np.asarray(r.accepted, dtype=np.float64)),
            (f"{p}.rejected", np.asarray(r.rejected, dtype=np.float64)),
        ]
    checkpoint.save_tensors(path, named)


def load_trace(path: str) -> DecodeTrace:
    blob = checkpoint.load_tensors(path)
    n, block_size, prompt_len = (int(v) for v in blob["trace.meta"])
    trace = DecodeTrace(block_size=block_size, prompt_len=prompt_len)
    for i in range(n):
        p = f"step.{i:05d}"
        kind_code, block, window, verify = blob[f"{p}.meta"]
        drafts = [
            DraftRecord(int(row[0]), int(row[1]), int(row[2]), float(row[3]))
            for row in blob[f"{p}.drafts"].reshape(-1, 4)
        ]
        trace.records.append(
            StepRecord(
                kind="backbone" if kind_code == 0.0 else "mrp",
                block=int(block),
                window=int(window),
                ids=blob[f"{p}.ids"].astype(np.int64),
                masked=blob[f"{p}.masked"].astype(bool),
                h=blob[f"{p}.h"],
                logits=blob[f"{p}.logits"],
                revealed_positions=blob[f"{p}.revealed_positions"].astype(np.int64),
                revealed_tokens=blob[f"{p}.revealed_tokens"].astype(np.int64),
                verify=bool(verify),
                drafts=drafts,
                accepted=[int(v) for v in blob[f"{p}.accepted"]],
                rejected=[int(v) for v in blob[f"{p}.rejected"]],
            )
        )
    return trace


# ---------------------------------------------------------------------------
# baseline denoising loop
# ---------------------------------------------------------------------------


def denoise_block_baseline(
    params,
    x: SequenceState,
    policy: Policy,
    trace: DecodeTrace | None = None,
    stats=None,
) -> SequenceState:
    """Denoise the current block with backbone forwards only: forward ->
    confidence -> select -> reveal until the block is clean. Each step
    reveals at least one position, so a block finishes in <= block_size
    forwards."""
    block = x.current_block
    lo, hi = x.block_bounds(block)
    if not x.masked[lo:hi].all():
        raise ContractViolationError("baseline denoise expects a fully masked block")
    window = x.window_end(block)
    while x.masked[lo:hi].any():
        with no_grad():
            h, logits = bb.forward(x, params, window=window)
        conf = confidence_of(logits, x)
        positions = policy.select(conf)
        tokens = conf.tokens[np.searchsorted(conf.positions, positions)]
        if trace is not None:
            trace.records.append(
                StepRecord(
                    kind="backbone", block=block, window=window,
                    ids=x.ids.copy(), masked=x.masked.copy(),
                    h=h.data, logits=logits.data,
                    revealed_positions=positions.copy(),
                    revealed_tokens=np.asarray(tokens, dtype=np.int64),
                )
            )
        if stats is not None:
            stats.backbone_forwards += 1
            stats.block_steps[block] = stats.block_steps.get(block, 0) + 1
        reveal(x, positions, tokens)
        if stats is not None:
            stats.tokens_generated += len(positions)
    return x
