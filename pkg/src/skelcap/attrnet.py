"""Attribute decoder: plain LSTM conditioned on a fused first input.

The step -1 input fuses three sources through a single tanh layer: the
attended image context for the skeletal word, the skeletal word embedding,
and the skeleton decoder's hidden state. The LSTM then runs from BOS until
EOS, emitting the attribute phrase for that skeletal word (possibly empty).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nm
from .corpus import BOS, EOS, Vocabulary
from .numerics import ParameterStore, Tensor

log = logging.getLogger(__name__)

HIDDEN_TAPS = ("current", "previous", "final")


class AttrConfigError(ValueError):
    pass


@dataclass
class AttrState:
    h: np.ndarray
    c: np.ndarray
    t: int = 0


@dataclass
class AttrTrainingItem:
    """One conditioning context plus its gold attribute target sequence."""

    z: np.ndarray          # (D,) attended image context at the skeletal word
    skel_embed: np.ndarray  # (m_s,) skeleton word embedding
    skel_hidden: np.ndarray  # (n_s,) skeleton hidden state
    targets: List[int]     # attribute indices, EOS excluded


class AttributeGenerator:
    """Estimator-style attribute decoder."""

    def __init__(self, vocab: Vocabulary, feature_dim: int, skel_embed_size: int,
                 skel_hidden_size: int, hidden_size: int = 128, embed_size: int = 64,
                 hidden_tap: str = "current", use_post_word_alpha: bool = False,
                 invoke_on_all_tokens: bool = True, seed: int = 0, dtype=np.float32):
        if hidden_tap not in HIDDEN_TAPS:
            raise AttrConfigError(f"hidden_tap must be one of {HIDDEN_TAPS}")
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.skel_embed_size = skel_embed_size
        self.skel_hidden_size = skel_hidden_size
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.hidden_tap = hidden_tap
        self.use_post_word_alpha = use_post_word_alpha
        self.invoke_on_all_tokens = invoke_on_all_tokens
        self.seed = seed
        self.dtype = dtype
        self.store = ParameterStore()
        self._build(np.random.default_rng(seed))

    def get_params(self, deep: bool = True) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "skel_embed_size": self.skel_embed_size,
            "skel_hidden_size": self.skel_hidden_size,
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
            "hidden_tap": self.hidden_tap,
            "use_post_word_alpha": self.use_post_word_alpha,
            "invoke_on_all_tokens": self.invoke_on_all_tokens,
            "seed": self.seed,
        }

    def _build(self, rng):
        D, ms, ns = self.feature_dim, self.skel_embed_size, self.skel_hidden_size
        n, m = self.hidden_size, self.embed_size
        Q = len(self.vocab)
        dt = self.dtype
        add = self.store.add
        add("embed", nm.glorot_uniform(rng, Q, m, dtype=dt))
        add("W_I", nm.glorot_uniform(rng, D, m, dtype=dt))
        add("W_t", nm.glorot_uniform(rng, ms, m, dtype=dt))
        add("W_h", nm.glorot_uniform(rng, ns, m, dtype=dt))
        add("fuse_W", nm.glorot_uniform(rng, m, m, dtype=dt))
        add("fuse_b", np.zeros(m, dtype=dt))
        add("lstm_W", nm.glorot_uniform(rng, m + n, 4 * n, dtype=dt))
        lstm_b = np.zeros(4 * n, dtype=dt)
        lstm_b[n:2 * n] = 1.0
        add("lstm_b", lstm_b)
        add("out_W", nm.glorot_uniform(rng, n, Q, dtype=dt))
        add("out_b", np.zeros(Q, dtype=dt))

    def _lstm_t(self, x, h, c):
        n = self.hidden_size
        z = nm.add(nm.matmul(nm.concat([x, h], axis=-1), self.store["lstm_W"]),
                   self.store["lstm_b"])
        i = nm.sigmoid(nm.narrow(z, -1, 0, n))
        f = nm.sigmoid(nm.narrow(z, -1, n, n))
        g = nm.tanh(nm.narrow(z, -1, 2 * n, n))
        o = nm.sigmoid(nm.narrow(z, -1, 3 * n, n))
        c_new = nm.add(nm.mul(f, c), nm.mul(i, g))
        h_new = nm.mul(o, nm.tanh(c_new))
        return h_new, c_new

    def _init_input_t(self, z, s_skel, h_skel):
        fused = nm.add(nm.add(nm.matmul(z, self.store["W_I"]),
                              nm.matmul(s_skel, self.store["W_t"])),
                       nm.matmul(h_skel, self.store["W_h"]))
        return nm.tanh(nm.add(nm.matmul(fused, self.store["fuse_W"]), self.store["fuse_b"]))

    def _logits_t(self, h):
        return nm.add(nm.matmul(h, self.store["out_W"]), self.store["out_b"])

    def init_input(self, z: np.ndarray, s_skel: np.ndarray,
                   h_skel: np.ndarray) -> np.ndarray:
        """Fused step -1 input x_{-1} for one skeletal word."""
        for name, vec, dim in (("z", z, self.feature_dim),
                               ("s_skel", s_skel, self.skel_embed_size),
                               ("h_skel", h_skel, self.skel_hidden_size)):
            if np.asarray(vec).shape != (dim,):
                raise AttrConfigError(
                    f"{name} has shape {np.asarray(vec).shape}, expected ({dim},)")
        with nm.no_grad():
            out = self._init_input_t(Tensor(np.asarray(z, dtype=self.dtype)),
                                     Tensor(np.asarray(s_skel, dtype=self.dtype)),
                                     Tensor(np.asarray(h_skel, dtype=self.dtype)))
        return out.data

    def _run_init(self, x_init: np.ndarray) -> AttrState:
        n = self.hidden_size
        with nm.no_grad():
            h = Tensor(np.zeros((1, n), dtype=self.dtype))
            c = Tensor(np.zeros((1, n), dtype=self.dtype))
            h, c = self._lstm_t(Tensor(x_init[None].astype(self.dtype)), h, c)
        return AttrState(h=h.data[0], c=c.data[0], t=0)

    def make_step_fn(self, x_init: np.ndarray):
        """Beam-search step function seeded with the fused step -1 input."""

        def step_fn(state: AttrState, token: int):
            with nm.no_grad():
                x = Tensor(self.store["embed"].data[token][None])
                h, c = self._lstm_t(x, Tensor(state.h[None]), Tensor(state.c[None]))
                logp = nm.log_softmax(self._logits_t(h), axis=-1)
            return AttrState(h=h.data[0], c=c.data[0], t=state.t + 1), logp.data[0]

        return step_fn

    def initial_state(self, x_init: np.ndarray) -> AttrState:
        return self._run_init(x_init)

    def generate_attributes(self, x_init: np.ndarray, max_len: int = 4,
                            beam_size: int = 1, gamma: float = 0.0) -> List[str]:
        """Decode the attribute phrase for one skeletal word (may be empty)."""
        from .decode import BeamConfig, beam_search
        if max_len <= 0:
            return []
        config = BeamConfig(beam_size=beam_size, gamma=gamma, max_len=max_len)
        hyps = beam_search(self.make_step_fn(x_init), self.initial_state(x_init),
                           config, bos=BOS, eos=EOS, vocab_size=len(self.vocab))
        best = hyps[0]
        return [self.vocab.decode(i) for i in best.tokens]

    # -- training ------------------------------------------------------------

    def batch_loss(self, z, s_skel, h_skel, seqs):
        """Teacher-forced loss over a batch of items with equal target length.

        ``seqs`` is (B, S) whose last column is EOS. The fused init is
        consumed at step -1, then BOS, then the gold attribute words.
        """
        z = Tensor(np.ascontiguousarray(z, dtype=self.dtype))
        s_skel = Tensor(np.ascontiguousarray(s_skel, dtype=self.dtype))
        h_skel = Tensor(np.ascontiguousarray(h_skel, dtype=self.dtype))
        seqs = np.asarray(seqs)
        B, S = seqs.shape
        n = self.hidden_size
        x_init = self._init_input_t(z, s_skel, h_skel)
        h = Tensor(np.zeros((B, n), dtype=self.dtype))
        c = Tensor(np.zeros((B, n), dtype=self.dtype))
        h, c = self._lstm_t(x_init, h, c)
        loss = None
        prev = np.full(B, BOS, dtype=np.int64)
        for t in range(S):
            x = nm.lookup(self.store["embed"], prev)
            h, c = self._lstm_t(x, h, c)
            step_loss = nm.cross_entropy(self._logits_t(h), seqs[:, t])
            loss = step_loss if loss is None else nm.add(loss, step_loss)
            prev = seqs[:, t]
        return loss

    def teacher_forced_loss(self, gold_attributes: Sequence[str], z, s_skel, h_skel):
        """Loss for one skeletal word; gold attribute words, EOS appended."""
        idxs = [self.vocab.encode(w) for w in gold_attributes]
        seq = np.asarray([idxs + [EOS]])
        return self.batch_loss(np.asarray(z)[None], np.asarray(s_skel)[None],
                               np.asarray(h_skel)[None], seq)

    def evaluate_loss(self, items: Sequence[AttrTrainingItem], batch_size=256) -> float:
        total, count = 0.0, 0
        with nm.no_grad():
            for z, s, h, seqs in _item_batches(items, batch_size, shuffle_rng=None):
                loss = self.batch_loss(z, s, h, seqs)
                total += loss.item() * seqs.shape[0]
                count += seqs.shape[0]
        return total / max(count, 1)

    def fit(self, train_items: Sequence[AttrTrainingItem],
            val_items: Optional[Sequence[AttrTrainingItem]] = None,
            epochs: int = 10, learning_rate: float = 0.1, batch_size: int = 128,
            epsilon: float = 1e-8, clip_norm: float = 5.0,
            halve_lr_on_plateau: bool = True, shuffle_seed: int = 0,
            progress=None):
        """Adagrad training over precomputed conditioning items."""
        history = {"train_curve": [], "val_loss": [], "learning_rate": []}
        lr = learning_rate
        best_val = float("inf")
        halved = False
        for epoch in range(epochs):
            rng = np.random.default_rng([shuffle_seed, epoch])
            for z, s, h, seqs in _item_batches(train_items, batch_size, shuffle_rng=rng):
                self.store.zero_grad()
                loss = self.batch_loss(z, s, h, seqs)
                nm.backward(loss)
                self.store.adagrad_step(lr, epsilon=epsilon, clip_norm=clip_norm)
                history["train_curve"].append((self.store.step_count, loss.item()))
            history["learning_rate"].append(lr)
            if val_items is not None:
                val_loss = self.evaluate_loss(val_items, batch_size)
                history["val_loss"].append(val_loss)
                if val_loss < best_val - 1e-6:
                    best_val = val_loss
                elif halve_lr_on_plateau and not halved:
                    lr *= 0.5
                    halved = True
                    log.info("validation loss plateaued; halving learning rate to %g", lr)
            if progress is not None:
                progress(epoch, history)
        return history

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        self.store.save(path, meta={"model": "attribute", "config": self.get_params()},
                        vocab_hashes={"attr_vocab": self.vocab.content_hash()})

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "AttributeGenerator":
        store = ParameterStore.load(
            path, expect_vocab_hashes={"attr_vocab": vocab.content_hash()})
        config = store.meta["config"]
        model = cls(vocab, **config)
        for name in model.store.names():
            model.store[name].data[...] = store[name].data
            model.store.accumulators[name][...] = store.accumulators[name]
        model.store.step_count = store.step_count
        return model


def build_training_items(records, skel_model, attr_vocab,
                         use_post_word_alpha: bool = False,
                         full_rerun: bool = False,
                         hidden_tap: str = "current",
                         batch_size: int = 128) -> List[AttrTrainingItem]:
    """Precompute conditioning items from a frozen skeleton model.

    Runs one teacher-forced skeleton pass per record, then emits one item per
    skeleton token: its context vector (pre-word alpha, optionally refined
    post-word), the gold skeletal word embedding, and the chosen hidden tap.
    Non-head tokens get an empty target so "no attributes" is learned.
    """
    from .skelnet import SkelState, refine_attention

    if hidden_tap not in HIDDEN_TAPS:
        raise AttrConfigError(f"hidden_tap must be one of {HIDDEN_TAPS}")
    traces = skel_model.teacher_trace(records, batch_size=batch_size)
    items: List[AttrTrainingItem] = []
    for record, trace in zip(records, traces):
        toks = record.decomposition.skeleton
        flat = record.features.flat()
        for T, tok in enumerate(toks):
            word_idx = skel_model.vocab.encode(tok.surface)
            alpha = trace["alpha"][T]
            if use_post_word_alpha:
                state = SkelState(h=trace["h_prev"][T], c=trace["c_prev"][T], t=T)
                prev_word = BOS if T == 0 else int(trace["words"][T - 1])
                if full_rerun:
                    prefix = [BOS] + [int(w) for w in trace["words"][:T]]
                    p_grid = skel_model.per_location_distributions_full(
                        prefix, record.features)
                else:
                    p_grid = skel_model.per_location_distributions(
                        state, prev_word, record.features)
                _, p_attend, _ = skel_model.step(state, prev_word, record.features)
                alpha = refine_attention(p_attend, p_grid, fallback=alpha).reshape(-1)
            z = (alpha[:, None] * flat).sum(axis=0)
            h = _tap_hidden(trace, T, hidden_tap)
            items.append(AttrTrainingItem(
                z=z.astype(np.float32),
                skel_embed=skel_model.embedding_of(word_idx).copy(),
                skel_hidden=h,
                targets=[attr_vocab.encode(w) for w in tok.attributes]))
    return items


def _tap_hidden(trace, T, tap):
    if tap == "previous":
        return trace["h_prev"][T].copy()
    if tap == "final":
        return trace["h"][-1].copy()
    return trace["h"][T].copy()


def _item_batches(items, batch_size, shuffle_rng=None):
    order = list(range(len(items)))
    if shuffle_rng is not None:
        shuffle_rng.shuffle(order)
    groups = {}
    for i in order:
        groups.setdefault(len(items[i].targets), []).append(i)
    chunks = []
    for length in sorted(groups):
        idxs = groups[length]
        for lo in range(0, len(idxs), batch_size):
            chunks.append(idxs[lo:lo + batch_size])
    if shuffle_rng is not None:
        shuffle_rng.shuffle(chunks)
    for chunk in chunks:
        z = np.stack([items[i].z for i in chunk])
        s = np.stack([items[i].skel_embed for i in chunk])
        h = np.stack([items[i].skel_hidden for i in chunk])
        seqs = np.asarray([items[i].targets + [EOS] for i in chunk])
        yield z, s, h, seqs
