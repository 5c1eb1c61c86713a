"""Skeleton decoder: soft-attention LSTM over a feature grid.

At every step an attention MLP scores each grid cell from its feature vector
and the previous hidden state; the softmax-normalized map produces a context
vector that is concatenated with the previous word embedding as LSTM input.
After a word is predicted, the map can be refined from the similarity between
the emitted word distribution and per-location word distributions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import numerics as nm
from .corpus import BOS, EOS, FeatureGrid, Vocabulary
from .numerics import ParameterStore, Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class SkelState:
    """Recurrent state: hidden and cell vectors plus the time step."""

    h: np.ndarray
    c: np.ndarray
    t: int = 0


@dataclass
class DecodeState:
    """Beam-search state snapshot; keeps the attention trace for reuse."""

    h: np.ndarray
    c: np.ndarray
    alpha: Optional[np.ndarray]  # flat (L*L,), map used at this step
    z: Optional[np.ndarray]      # context vector used at this step
    prev_word: int
    t: int = 0


def refine_attention(p_attend: np.ndarray, p_grid: np.ndarray,
                     fallback: Optional[np.ndarray] = None) -> np.ndarray:
    """Post-word attention: weights proportional to <p_attend, p_ij>.

    ``p_attend`` is (Q,), ``p_grid`` is (L, L, Q) or (P, Q). Returns a map
    with the same leading shape as ``p_grid``. Falls back to the pre-word map
    when every dot product is zero.
    """
    grid = np.asarray(p_grid, dtype=np.float64)
    lead = grid.shape[:-1]
    flat = grid.reshape(-1, grid.shape[-1])
    scores = flat @ np.asarray(p_attend, dtype=np.float64)
    total = scores.sum()
    if total <= 0.0:
        if fallback is None:
            raise ValueError("all similarities zero and no fallback map given")
        log.warning("refine_attention: all similarities zero, keeping pre-word map")
        return np.asarray(fallback, dtype=np.float64).reshape(lead)
    return (scores / total).reshape(lead)


class SkeletonGenerator:
    """Estimator-style skeleton decoder (``fit`` / ``predict_step_fn``)."""

    def __init__(self, vocab: Vocabulary, feature_dim: int, grid_size: int,
                 hidden_size: int = 128, embed_size: int = 64,
                 attention_hidden: int = 128, use_attention: bool = True,
                 seed: int = 0, dtype=np.float32):
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.grid_size = grid_size
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.attention_hidden = attention_hidden
        self.use_attention = use_attention
        self.seed = seed
        self.dtype = dtype
        self.store = ParameterStore()
        self._build(np.random.default_rng(seed))

    # -- sklearn-style surface --------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "grid_size": self.grid_size,
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
            "attention_hidden": self.attention_hidden,
            "use_attention": self.use_attention,
            "seed": self.seed,
        }

    def _build(self, rng):
        D, n, m, A = self.feature_dim, self.hidden_size, self.embed_size, self.attention_hidden
        Q = len(self.vocab)
        dt = self.dtype
        add = self.store.add
        add("embed", nm.glorot_uniform(rng, Q, m, dtype=dt))
        if self.use_attention:
            add("att_U", nm.glorot_uniform(rng, D, A, dtype=dt))
            add("att_V", nm.glorot_uniform(rng, n, A, dtype=dt))
            add("att_b", np.zeros(A, dtype=dt))
            add("att_w", nm.glorot_uniform(rng, A, 1, dtype=dt))
        add("init_Wh", nm.glorot_uniform(rng, D, n, dtype=dt))
        add("init_bh", np.zeros(n, dtype=dt))
        add("init_Wc", nm.glorot_uniform(rng, D, n, dtype=dt))
        add("init_bc", np.zeros(n, dtype=dt))
        lstm_in = m + D
        add("lstm_W", nm.glorot_uniform(rng, lstm_in + n, 4 * n, dtype=dt))
        lstm_b = np.zeros(4 * n, dtype=dt)
        lstm_b[n:2 * n] = 1.0  # forget-gate bias
        add("lstm_b", lstm_b)
        add("out_W", nm.glorot_uniform(rng, n, Q, dtype=dt))
        add("out_b", np.zeros(Q, dtype=dt))

    # -- graph building blocks (batched, Tensor-valued) --------------------

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

    def _init_state_t(self, feats):
        mean_v = nm.mean(feats, axis=1)
        h = nm.tanh(nm.add(nm.matmul(mean_v, self.store["init_Wh"]), self.store["init_bh"]))
        c = nm.tanh(nm.add(nm.matmul(mean_v, self.store["init_Wc"]), self.store["init_bc"]))
        return h, c

    def _attend_t(self, feats, h):
        if not self.use_attention:
            B, P = feats.data.shape[0], feats.data.shape[1]
            return Tensor(np.full((B, P), 1.0 / P, dtype=feats.data.dtype))
        u = nm.matmul(feats, self.store["att_U"])
        vh = nm.reshape(nm.matmul(h, self.store["att_V"]), (h.data.shape[0], 1, -1))
        scores = nm.matmul(nm.tanh(nm.add(nm.add(u, vh), self.store["att_b"])),
                           self.store["att_w"])
        scores = nm.reshape(scores, scores.data.shape[:-1])
        return nm.softmax(scores, axis=-1)

    def _context_t(self, feats, alpha):
        if not self.use_attention:
            return nm.mean(feats, axis=1)
        B, P = alpha.data.shape
        return nm.sum_(nm.mul(nm.reshape(alpha, (B, P, 1)), feats), axis=1)

    def _logits_t(self, h):
        return nm.add(nm.matmul(h, self.store["out_W"]), self.store["out_b"])

    def _step_t(self, feats, h, c, prev_idx):
        alpha = self._attend_t(feats, h)
        z = self._context_t(feats, alpha)
        x = nm.concat([nm.lookup(self.store["embed"], prev_idx), z], axis=-1)
        h_new, c_new = self._lstm_t(x, h, c)
        return h_new, c_new, self._logits_t(h_new), alpha, z

    def sequence_loss(self, feats_np: np.ndarray, seqs: np.ndarray):
        """Teacher-forced loss on a batch.

        ``feats_np`` is (B, P, D); ``seqs`` is (B, S) of targets whose last
        column is EOS. Returns the scalar loss Tensor (sum over steps of
        batch-mean cross-entropy).
        """
        feats = Tensor(np.ascontiguousarray(feats_np, dtype=self.dtype))
        seqs = np.asarray(seqs)
        B, S = seqs.shape
        h, c = self._init_state_t(feats)
        loss = None
        prev = np.full(B, BOS, dtype=np.int64)
        for t in range(S):
            h, c, logits, _, _ = self._step_t(feats, h, c, prev)
            step_loss = nm.cross_entropy(logits, seqs[:, t])
            loss = step_loss if loss is None else nm.add(loss, step_loss)
            prev = seqs[:, t]
        return loss

    # -- single-sample inference API ---------------------------------------

    def _flat(self, features: FeatureGrid) -> np.ndarray:
        if features.feature_dim != self.feature_dim or features.grid_size != self.grid_size:
            raise ConfigError(
                f"feature grid {features.grid_size}x{features.grid_size}x{features.feature_dim} "
                f"does not match model {self.grid_size}x{self.grid_size}x{self.feature_dim}")
        return features.flat()[None, :, :]

    def init_state(self, features: FeatureGrid) -> SkelState:
        with nm.no_grad():
            h, c = self._init_state_t(Tensor(self._flat(features)))
        return SkelState(h=h.data[0], c=c.data[0], t=0)

    def attend(self, features: FeatureGrid, state: SkelState) -> np.ndarray:
        """Pre-word attention map, shape (L, L)."""
        with nm.no_grad():
            alpha = self._attend_t(Tensor(self._flat(features)), Tensor(state.h[None]))
        L = self.grid_size
        return alpha.data[0].reshape(L, L)

    def context(self, features: FeatureGrid, alpha: np.ndarray) -> np.ndarray:
        """Context vector z = sum_ij alpha_ij v_ij."""
        flat = features.flat()
        a = np.asarray(alpha).reshape(-1)
        if a.shape[0] != flat.shape[0]:
            raise ConfigError(f"attention map has {a.shape[0]} cells, grid has {flat.shape[0]}")
        return (a[:, None] * flat).sum(axis=0)

    def step(self, state: SkelState, prev_word_index: int, features: FeatureGrid):
        """One decode step: returns (new state, word distribution, alpha as (L, L))."""
        Q = len(self.vocab)
        if not 0 <= prev_word_index < Q:
            raise ConfigError(f"word index {prev_word_index} out of range for vocab of {Q}")
        with nm.no_grad():
            feats = Tensor(self._flat(features))
            h, c, logits, alpha, _ = self._step_t(
                feats, Tensor(state.h[None]), Tensor(state.c[None]),
                np.asarray([prev_word_index]))
            probs = nm.softmax(logits, axis=-1)
        L = self.grid_size
        new_state = SkelState(h=h.data[0], c=c.data[0], t=state.t + 1)
        return new_state, probs.data[0], alpha.data[0].reshape(L, L)

    def per_location_distributions(self, state: SkelState, prev_word_index: int,
                                   features: FeatureGrid) -> np.ndarray:
        """Word distribution per location, context replaced by v_ij; (L, L, Q).

        The recurrent state is held fixed: the LSTM transition is recomputed
        with the same (h, c) and previous word, only the context differs.
        """
        if not self.use_attention:
            raise ConfigError("per-location distributions are disabled without attention")
        flat = features.flat().astype(self.dtype)  # (P, D)
        P = flat.shape[0]
        with nm.no_grad():
            emb = self.store["embed"].data[prev_word_index]
            x = Tensor(np.concatenate([np.broadcast_to(emb, (P, emb.shape[0])), flat], axis=-1))
            h = Tensor(np.broadcast_to(state.h, (P, state.h.shape[0])).copy())
            c = Tensor(np.broadcast_to(state.c, (P, state.c.shape[0])).copy())
            h_new, _ = self._lstm_t(x, h, c)
            probs = nm.softmax(self._logits_t(h_new), axis=-1)
        L = self.grid_size
        return probs.data.reshape(L, L, -1)

    def per_location_distributions_full(self, gold_prefix: Sequence[int],
                                        features: FeatureGrid) -> np.ndarray:
        """Full re-run variant: per location, replay the whole sequence with the
        context pinned to v_ij at every step. ``gold_prefix`` are the words
        consumed so far (BOS-first)."""
        if not self.use_attention:
            raise ConfigError("per-location distributions are disabled without attention")
        flat = features.flat().astype(self.dtype)
        P = flat.shape[0]
        with nm.no_grad():
            v = Tensor(flat)
            mean_v = Tensor(np.broadcast_to(flat.mean(axis=0), (P, flat.shape[1])).copy())
            h = nm.tanh(nm.add(nm.matmul(mean_v, self.store["init_Wh"]), self.store["init_bh"]))
            c = nm.tanh(nm.add(nm.matmul(mean_v, self.store["init_Wc"]), self.store["init_bc"]))
            for word in gold_prefix:
                emb = self.store["embed"].data[word]
                x = nm.concat([Tensor(np.broadcast_to(emb, (P, emb.shape[0])).copy()), v],
                              axis=-1)
                h, c = self._lstm_t(x, h, c)
            probs = nm.softmax(self._logits_t(h), axis=-1)
        L = self.grid_size
        return probs.data.reshape(L, L, -1)

    # -- beam-search integration -------------------------------------------

    def initial_decode_state(self, features: FeatureGrid) -> DecodeState:
        s = self.init_state(features)
        return DecodeState(h=s.h, c=s.c, alpha=None, z=None, prev_word=BOS, t=0)

    def make_step_fn(self, features: FeatureGrid):
        """(DecodeState, token) -> (DecodeState, log-probabilities)."""
        flat = Tensor(self._flat(features))

        def step_fn(state: DecodeState, token: int):
            with nm.no_grad():
                h, c, logits, alpha, z = self._step_t(
                    flat, Tensor(state.h[None]), Tensor(state.c[None]),
                    np.asarray([token]))
                logp = nm.log_softmax(logits, axis=-1)
            new_state = DecodeState(h=h.data[0], c=c.data[0], alpha=alpha.data[0],
                                    z=z.data[0], prev_word=token, t=state.t + 1)
            return new_state, logp.data[0]

        return step_fn

    # -- training -----------------------------------------------------------

    def _encode_skeleton(self, record) -> List[int]:
        idxs = [self.vocab.encode(t.surface) for t in record.decomposition.skeleton]
        idxs.append(EOS)
        return idxs

    def evaluate_loss(self, records, batch_size: int = 128) -> float:
        """Mean per-sequence teacher-forced loss, no gradients."""
        total, count = 0.0, 0
        with nm.no_grad():
            for feats, seqs in _batches(records, self._encode_skeleton, batch_size,
                                        shuffle_rng=None):
                loss = self.sequence_loss(feats, seqs)
                total += loss.item() * seqs.shape[0]
                count += seqs.shape[0]
        return total / max(count, 1)

    def fit(self, train_records, val_records=None, epochs: int = 10,
            learning_rate: float = 0.1, batch_size: int = 64,
            epsilon: float = 1e-8, clip_norm: float = 5.0,
            halve_lr_on_plateau: bool = True, shuffle_seed: int = 0,
            progress=None):
        """Adagrad training with teacher forcing.

        The learning rate is halved once, the first time the validation loss
        fails to improve for a full epoch. Returns a history dict with the
        loss curve as (step, loss) pairs.
        """
        history = {"train_curve": [], "val_loss": [], "learning_rate": []}
        lr = learning_rate
        best_val = float("inf")
        halved = False
        for epoch in range(epochs):
            rng = np.random.default_rng([shuffle_seed, epoch])
            for feats, seqs in _batches(train_records, self._encode_skeleton,
                                        batch_size, shuffle_rng=rng):
                self.store.zero_grad()
                loss = self.sequence_loss(feats, seqs)
                nm.backward(loss)
                self.store.adagrad_step(lr, epsilon=epsilon, clip_norm=clip_norm)
                history["train_curve"].append((self.store.step_count, loss.item()))
            history["learning_rate"].append(lr)
            if val_records is not None:
                val_loss = self.evaluate_loss(val_records, batch_size)
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

    # -- traces for attribute conditioning ----------------------------------

    def teacher_trace(self, records, batch_size: int = 128):
        """Teacher-forced pass per record; returns per-record step traces.

        Each trace is a dict with arrays over steps t = 0..S-1 (one per gold
        skeleton word, EOS step excluded): ``alpha`` (S, P), ``z`` (S, D),
        ``h`` (S, n) post-step hidden states, ``h_prev``/``c_prev`` (S, n)
        states entering each step, and ``words`` (S,) gold indices. Used to
        condition the attribute decoder.
        """
        traces = [None] * len(records)
        order = list(range(len(records)))
        groups = {}
        for i in order:
            groups.setdefault(len(self._encode_skeleton(records[i])), []).append(i)
        with nm.no_grad():
            for length, idxs in sorted(groups.items()):
                for lo in range(0, len(idxs), batch_size):
                    chunk = idxs[lo:lo + batch_size]
                    feats = np.stack([records[i].features.flat() for i in chunk])
                    seqs = np.asarray([self._encode_skeleton(records[i]) for i in chunk])
                    B, S = seqs.shape
                    ft = Tensor(feats.astype(self.dtype))
                    h, c = self._init_state_t(ft)
                    alphas, zs, hs, h_prevs, c_prevs = [], [], [], [], []
                    prev = np.full(B, BOS, dtype=np.int64)
                    for t in range(S - 1):  # exclude the EOS step
                        h_prevs.append(h.data)
                        c_prevs.append(c.data)
                        h, c, _, alpha, z = self._step_t(ft, h, c, prev)
                        alphas.append(alpha.data)
                        zs.append(z.data)
                        hs.append(h.data)
                        prev = seqs[:, t]
                    for b, i in enumerate(chunk):
                        traces[i] = {
                            "alpha": np.stack([a[b] for a in alphas]),
                            "z": np.stack([z[b] for z in zs]),
                            "h": np.stack([hh[b] for hh in hs]),
                            "h_prev": np.stack([hh[b] for hh in h_prevs]),
                            "c_prev": np.stack([cc[b] for cc in c_prevs]),
                            "words": seqs[b, :-1],
                        }
        return traces

    def embedding_of(self, word_index: int) -> np.ndarray:
        return self.store["embed"].data[word_index]

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        self.store.save(path, meta={"model": "skeleton", "config": self.get_params()},
                        vocab_hashes={"skel_vocab": self.vocab.content_hash()})

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "SkeletonGenerator":
        store = ParameterStore.load(
            path, expect_vocab_hashes={"skel_vocab": vocab.content_hash()})
        config = store.meta["config"]
        model = cls(vocab, **config)
        for name in model.store.names():
            model.store[name].data[...] = store[name].data
            model.store.accumulators[name][...] = store.accumulators[name]
        model.store.step_count = store.step_count
        return model


def _batches(records, encode, batch_size, shuffle_rng=None):
    """Yield (features (B, P, D), seqs (B, S)) batches bucketed by length.

    Batches from different length buckets are interleaved when shuffling so
    one optimizer pass never sees a long run of a single sequence length.
    """
    order = list(range(len(records)))
    if shuffle_rng is not None:
        shuffle_rng.shuffle(order)
    groups = {}
    for i in order:
        groups.setdefault(len(encode(records[i])), []).append(i)
    chunks = []
    for length in sorted(groups):
        idxs = groups[length]
        for lo in range(0, len(idxs), batch_size):
            chunks.append(idxs[lo:lo + batch_size])
    if shuffle_rng is not None:
        shuffle_rng.shuffle(chunks)
    for chunk in chunks:
        feats = np.stack([records[i].features.flat() for i in chunk])
        seqs = np.asarray([encode(records[i]) for i in chunk])
        yield feats, seqs
