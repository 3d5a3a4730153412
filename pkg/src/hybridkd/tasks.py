"""Deterministic synthetic task generators and evaluators.

Token id layout within the model vocabulary:
    0        FILL (never supervised)
    1        SEP
    2..      task alphabets: keys start at 2, values right after the key
             alphabet; the generic / copy alphabets also start at 2.

Every generator is a pure function of (spec, seed, partition, batch index);
train and held-out partitions draw from disjoint seed namespaces. Each
generator has a brute-force oracle used by the tests to confirm label
consistency.

Generic-text proxy: a copy-lag Markov source over a Zipf-weighted alphabet —
token t repeats token t-lag with probability copy_prob, otherwise draws fresh
from the Zipf marginal. The stationary unigram law stays exactly Zipf, and
both the marginal and conditional entropies have closed forms used as test
oracles.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng

FILL = 0
SEP = 1
ALPHABET_BASE = 2

KINDS = ("generic", "kv", "multihop", "localcopy")
KV_LAYOUTS = ("packed", "spread", "geometric")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int
    vocab: int
    # kv / multihop
    num_pairs: int = 8
    key_alphabet: int = 16
    value_alphabet: int = 16
    hops: int = 2
    layout: str = "packed"
    # localcopy
    copy_window: int = 4
    copy_alphabet: int = 16
    # generic
    alphabet: int = 64
    zipf_a: float = 1.2
    copy_prob: float = 0.25
    copy_lag: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        t = self.seq_len
        if self.kind in ("kv", "multihop"):
            if self.layout not in KV_LAYOUTS:
                raise ValueError(f"unknown layout {self.layout!r}")
            links = self.num_pairs * (self.hops if self.kind == "multihop" else 1)
            if self.num_pairs < 1:
                raise ValueError("need at least one pair")
            if 2 * links + 2 > t:
                raise ValueError(f"{links} links do not fit in {t} tokens")
            if links > self.key_alphabet:
                raise ValueError("key alphabet too small for distinct keys")
            if self.vocab < ALPHABET_BASE + self.key_alphabet + self.value_alphabet:
                raise ValueError("vocab too small for key+value alphabets")
            if self.kind == "kv" and self.layout == "geometric":
                if 2 ** self.num_pairs + 1 > t:
                    raise ValueError("geometric layout needs seq_len > 2^num_pairs")
        elif self.kind == "localcopy":
            if not 1 <= self.copy_window < t:
                raise ValueError("copy_window must lie in [1, seq_len)")
            if self.vocab < ALPHABET_BASE + self.copy_alphabet:
                raise ValueError("vocab too small for copy alphabet")
        elif self.kind == "generic":
            if not 1 <= self.copy_lag < t:
                raise ValueError("copy_lag must lie in [1, seq_len)")
            if not 0.0 <= self.copy_prob < 1.0:
                raise ValueError("copy_prob must lie in [0, 1)")
            if self.vocab < ALPHABET_BASE + self.alphabet:
                raise ValueError("vocab too small for generic alphabet")

    def key_token(self, k):
        return ALPHABET_BASE + k

    def value_token(self, v):
        return ALPHABET_BASE + self.key_alphabet + v

    @property
    def key_range(self):
        return range(ALPHABET_BASE, ALPHABET_BASE + self.key_alphabet)

    @property
    def value_range(self):
        lo = ALPHABET_BASE + self.key_alphabet
        return range(lo, lo + self.value_alphabet)


@dataclass
class TaskBatch:
    tokens: np.ndarray  # (B, T) int64
    targets: np.ndarray  # (B, T) int64, -1 where unsupervised
    query_mask: np.ndarray  # (B, T) bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.query_mask = np.asarray(self.query_mask, dtype=bool)
        if not (self.tokens.shape == self.targets.shape == self.query_mask.shape):
            raise ValueError("tokens/targets/query_mask shapes differ")
        if not (self.targets[self.query_mask] >= 0).all():
            raise ValueError("supervised positions need nonnegative targets")
        if (self.targets[~self.query_mask] != -1).any():
            raise ValueError("unsupervised positions must carry target -1")

    def to_jsonl(self) -> str:
        lines = []
        for i in range(self.tokens.shape[0]):
            lines.append(
                json.dumps(
                    {
                        "tokens": self.tokens[i].tolist(),
                        "targets": self.targets[i].tolist(),
                        "query_mask": self.query_mask[i].astype(int).tolist(),
                    }
                )
            )
        return "\n".join(lines) + "\n"


# -- generators -------------------------------------------------------------------


def _kv_positions(spec: TaskSpec, n_links: int) -> list[int]:
    """Key positions for each link; value sits at key position + 1."""
    t = spec.seq_len
    if spec.layout == "packed":
        start = t - 2 - 2 * n_links
        return [start + 2 * i for i in range(n_links)]
    if spec.layout == "spread":
        gap = (t - 2) // n_links
        if gap < 2:
            raise ValueError("spread layout needs (seq_len-2)//links >= 2")
        return [i * gap for i in range(n_links)]
    # geometric: value of pair i at distance 2^i+... (2^(i+1) - 1) from the
    # query, so pair i becomes fully visible exactly at window 2^(i+1)
    qpos = t - 1
    return [qpos - 2 ** (i + 1) for i in range(n_links)]


def gen_kv_batch(spec: TaskSpec, batch_size: int, *, seed, index=0, partition="train") -> TaskBatch:
    """Key-value recall: distinct keys paired with values, one queried key."""
    gen = rng("task", "kv", partition, seed, index)
    t = spec.seq_len
    n = spec.num_pairs
    tokens = np.full((batch_size, t), FILL, dtype=np.int64)
    targets = np.full((batch_size, t), -1, dtype=np.int64)
    mask = np.zeros((batch_size, t), dtype=bool)
    positions = _kv_positions(spec, n)
    use_sep = spec.layout != "geometric"
    for b in range(batch_size):
        keys = gen.choice(spec.key_alphabet, size=n, replace=False)
        vals = gen.integers(spec.value_alphabet, size=n)
        qi = int(gen.integers(n))
        for i in range(n):
            tokens[b, positions[i]] = spec.key_token(keys[i])
            tokens[b, positions[i] + 1] = spec.value_token(vals[i])
        if use_sep:
            tokens[b, t - 2] = SEP
        tokens[b, t - 1] = spec.key_token(keys[qi])
        targets[b, t - 1] = spec.value_token(vals[qi])
        mask[b, t - 1] = True
    return TaskBatch(tokens, targets, mask)


def gen_multihop_batch(spec: TaskSpec, batch_size: int, *, seed, index=0, partition="train") -> TaskBatch:
    """Alias chains: follow num_pairs chains of `hops` links; query a head,
    answer the chain's terminal value. hops=1 reduces to kv recall."""
    gen = rng("task", "multihop", partition, seed, index)
    t = spec.seq_len
    chains, hops = spec.num_pairs, spec.hops
    n_links = chains * hops
    tokens = np.full((batch_size, t), FILL, dtype=np.int64)
    targets = np.full((batch_size, t), -1, dtype=np.int64)
    mask = np.zeros((batch_size, t), dtype=bool)
    start = t - 2 - 2 * n_links
    for b in range(batch_size):
        nodes = gen.choice(spec.key_alphabet, size=n_links, replace=False).reshape(chains, hops)
        terminals = gen.integers(spec.value_alphabet, size=chains)
        links = []
        for c in range(chains):
            for j in range(hops):
                src = spec.key_token(nodes[c, j])
                dst = (
                    spec.key_token(nodes[c, j + 1])
                    if j + 1 < hops
                    else spec.value_token(terminals[c])
                )
                links.append((src, dst))
        order = gen.permutation(len(links))
        for slot, li in enumerate(order):
            tokens[b, start + 2 * slot] = links[li][0]
            tokens[b, start + 2 * slot + 1] = links[li][1]
        qc = int(gen.integers(chains))
        tokens[b, t - 2] = SEP
        tokens[b, t - 1] = spec.key_token(nodes[qc, 0])
        targets[b, t - 1] = spec.value_token(terminals[qc])
        mask[b, t - 1] = True
    return TaskBatch(tokens, targets, mask)


def gen_localcopy_batch(spec: TaskSpec, batch_size: int, *, seed, index=0, partition="train") -> TaskBatch:
    """Emit the token seen copy_window positions ago; supervised from there on."""
    gen = rng("task", "localcopy", partition, seed, index)
    t, w = spec.seq_len, spec.copy_window
    toks = ALPHABET_BASE + gen.integers(spec.copy_alphabet, size=(batch_size, t))
    targets = np.full((batch_size, t), -1, dtype=np.int64)
    targets[:, w:] = toks[:, :-w]
    mask = np.zeros((batch_size, t), dtype=bool)
    mask[:, w:] = True
    return TaskBatch(toks, targets, mask)


def zipf_probs(spec: TaskSpec) -> np.ndarray:
    w = (np.arange(spec.alphabet) + 1.0) ** (-spec.zipf_a)
    return w / w.sum()


def gen_generic_batch(spec: TaskSpec, batch_size: int, *, seed, index=0, partition="train") -> TaskBatch:
    """Copy-lag Markov stream over a Zipf alphabet, next-token supervised."""
    gen = rng("task", "generic", partition, seed, index)
    t, lag = spec.seq_len, spec.copy_lag
    p = zipf_probs(spec)
    fresh = gen.choice(spec.alphabet, size=(batch_size, t), p=p)
    copy = gen.random(size=(batch_size, t)) < spec.copy_prob
    sym = fresh.copy()
    for i in range(lag, t):
        sym[:, i] = np.where(copy[:, i], sym[:, i - lag], fresh[:, i])
    tokens = ALPHABET_BASE + sym
    targets = np.full((batch_size, t), -1, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros((batch_size, t), dtype=bool)
    mask[:, :-1] = True
    return TaskBatch(tokens.astype(np.int64), targets, mask)


_GENERATORS = {
    "kv": gen_kv_batch,
    "multihop": gen_multihop_batch,
    "localcopy": gen_localcopy_batch,
    "generic": gen_generic_batch,
}


def gen_batch(spec: TaskSpec, batch_size: int, *, seed, index=0, partition="train") -> TaskBatch:
    return _GENERATORS[spec.kind](spec, batch_size, seed=seed, index=index, partition=partition)


def stream(spec: TaskSpec, batch_size: int, *, seed, partition="train", start=0):
    """Endless deterministic batch stream; batch i depends only on (spec, seed,
    partition, i)."""
    i = start
    while True:
        yield gen_batch(spec, batch_size, seed=seed, index=i, partition=partition)
        i += 1


def mixture_stream(weighted_specs, batch_size: int, *, seed, partition="train", start=0):
    """Interleave several task specs; batch i's source is a weighted draw
    keyed by (seed, partition, i)."""
    specs = [s for s, _ in weighted_specs]
    w = np.array([float(x) for _, x in weighted_specs])
    w = w / w.sum()
    i = start
    while True:
        pick = int(rng("mixture", partition, seed, i).choice(len(specs), p=w))
        yield gen_batch(specs[pick], batch_size, seed=seed, index=i, partition=partition)
        i += 1


def heldout_batches(spec: TaskSpec, batch_size: int, n_batches: int, *, seed) -> list[TaskBatch]:
    return [
        gen_batch(spec, batch_size, seed=seed, index=i, partition="heldout")
        for i in range(n_batches)
    ]


@dataclass(frozen=True)
class DataSource:
    """A task spec or weighted mixture, streamable per partition."""

    weighted_specs: tuple  # ((TaskSpec, weight), ...)

    @classmethod
    def of(cls, *specs) -> "DataSource":
        """Build from TaskSpecs (equal weights) or (spec, weight) pairs."""
        pairs = []
        for s in specs:
            if isinstance(s, tuple):
                pairs.append((s[0], float(s[1])))
            else:
                pairs.append((s, 1.0))
        return cls(tuple(pairs))

    @property
    def seq_len(self) -> int:
        lens = {s.seq_len for s, _ in self.weighted_specs}
        if len(lens) != 1:
            raise ValueError(f"mixture specs disagree on seq_len: {sorted(lens)}")
        return lens.pop()

    def stream(self, batch_size: int, *, seed, partition="train", start=0):
        if len(self.weighted_specs) == 1:
            return stream(
                self.weighted_specs[0][0], batch_size, seed=seed, partition=partition, start=start
            )
        return mixture_stream(
            self.weighted_specs, batch_size, seed=seed, partition=partition, start=start
        )


# -- oracles --------------------------------------------------------------------------


def recall_oracle_predictions(batch: TaskBatch, spec: TaskSpec) -> np.ndarray:
    """Brute-force reader for kv / multihop batches: collect the (key, next)
    pairs from their slots, follow aliases, answer the query."""
    b, t = batch.tokens.shape
    out = np.full(b, -1, dtype=np.int64)
    vals = set(spec.value_range)
    if spec.kind == "multihop":
        n_links = spec.num_pairs * spec.hops
        start = t - 2 - 2 * n_links
        positions = [start + 2 * i for i in range(n_links)]
        max_hops = spec.hops
    else:
        positions = _kv_positions(spec, spec.num_pairs)
        max_hops = 1
    for i in range(b):
        row = batch.tokens[i]
        lookup = {int(row[p]): int(row[p + 1]) for p in positions}
        cur = int(row[t - 1])
        for _ in range(max_hops):
            if cur not in lookup:
                break
            cur = lookup[cur]
        out[i] = cur if cur in vals else -1
    return out


def marginal_entropy(spec: TaskSpec) -> float:
    p = zipf_probs(spec)
    return float(-(p * np.log(p)).sum())


def conditional_entropy(spec: TaskSpec) -> float:
    """Entropy of the next token given the lagged token (positions past the lag)."""
    p = zipf_probs(spec)
    rho = spec.copy_prob
    h = 0.0
    for c in range(spec.alphabet):
        q = (1.0 - rho) * p
        q[c] += rho
        h += p[c] * float(-(q * np.log(q)).sum())
    return h


def expected_nll(spec: TaskSpec) -> float:
    """Per-supervised-position NLL of the true generic source."""
    lag, t = spec.copy_lag, spec.seq_len
    hm, hc = marginal_entropy(spec), conditional_entropy(spec)
    return ((lag - 1) * hm + (t - lag) * hc) / (t - 1)


def true_model_nll(batch: TaskBatch, spec: TaskSpec) -> float:
    """Score a generic batch under the true generating law."""
    p = zipf_probs(spec)
    rho = spec.copy_prob
    toks = batch.tokens - ALPHABET_BASE
    b, t = toks.shape
    lag = spec.copy_lag
    total, count = 0.0, 0
    for i in range(b):
        for pos in range(t - 1):
            nxt = toks[i, pos + 1]
            if pos + 1 < lag:
                prob = p[nxt]
            else:
                prob = (1.0 - rho) * p[nxt] + (rho if nxt == toks[i, pos + 1 - lag] else 0.0)
            total -= np.log(prob)
            count += 1
    return total / count


# -- evaluation --------------------------------------------------------------------------


def eval_accuracy(model, batches) -> float:
    """Fraction of query positions where argmax logits equals the target."""
    hit, total = 0, 0
    for batch in batches:
        if not batch.query_mask.any():
            raise ValueError("batch has no query positions")
        logits = model.logits(batch.tokens)
        pred = logits.argmax(axis=-1)
        m = batch.query_mask
        hit += int((pred[m] == batch.targets[m]).sum())
        total += int(m.sum())
    if total == 0:
        raise ValueError("no query positions to score")
    return hit / total


def eval_perplexity(model, batches) -> float:
    """exp(mean next-token cross entropy) over supervised positions."""
    total, count = 0.0, 0
    for batch in batches:
        logits = model.logits(batch.tokens)
        flat = logits.reshape(-1, logits.shape[-1])
        z = flat - flat.max(axis=-1, keepdims=True)
        ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        tgt = batch.targets.reshape(-1)
        keep = tgt >= 0
        if keep.any():
            total -= ls[np.nonzero(keep)[0], tgt[keep]].sum()
            count += int(keep.sum())
    if count == 0:
        raise ValueError("no supervised positions to score")
    return float(np.exp(total / count))


# -- byte-level text ingestion ----------------------------------------------------------


def byte_blocks(path, seq_len: int, *, partition="train", heldout_mod=10):
    """Split a UTF-8/binary file into (seq_len+1)-byte blocks and partition
    them by hash: a block is held out iff sha256(block) % heldout_mod == 0."""
    data = Path(path).read_bytes()
    span = seq_len + 1
    blocks = []
    for off in range(0, len(data) - span + 1, span):
        chunk = data[off : off + span]
        digest = int.from_bytes(hashlib.sha256(chunk).digest()[:8], "little")
        held = digest % heldout_mod == 0
        if held == (partition == "heldout"):
            blocks.append(np.frombuffer(chunk, dtype=np.uint8).astype(np.int64))
    return blocks


def byte_stream(path, seq_len: int, batch_size: int, *, partition="train", heldout_mod=10):
    """Endless next-token batches over the hashed block partition of a file."""
    blocks = byte_blocks(path, seq_len, partition=partition, heldout_mod=heldout_mod)
    if not blocks:
        raise ValueError(f"no {partition} blocks in {path}")
    i = 0
    while True:
        rows = [blocks[(i * batch_size + j) % len(blocks)] for j in range(batch_size)]
        arr = np.stack(rows)
        tokens = arr[:, :-1]
        targets = arr[:, 1:].copy()
        mask = np.ones_like(tokens, dtype=bool)
        yield TaskBatch(tokens, targets, mask)
        i += 1
