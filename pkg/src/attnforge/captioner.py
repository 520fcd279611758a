"""Attention-based caption generator.

A small trainable encoder (two stride-2 convolutions) produces a GxG
grid of annotation vectors; an LSTM decoder with additive spatial
attention generates tokens. Training minimizes cross-entropy plus the
doubly-stochastic attention penalty

    loss = -log P(y|x) + lambda * sum_i (1 - sum_t alpha_it)^2

with teacher forcing, dropout on the hidden state before the output
projection, and Adam. Generation is greedy and exposes a per-step
attention override hook used by the forcing methods.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn, ppm, scenegen
from .attmaps import check_attention
from .rng import named_rng

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]  # includes the specials at ids 0-3

    @classmethod
    def from_tokens(cls, tokens, max_size: int | None = None) -> "Vocabulary":
        extra = sorted(set(tokens) - set(SPECIALS))
        if max_size is not None:
            extra = extra[:max_size - len(SPECIALS)]
        return cls(tokens=list(SPECIALS) + extra)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0-3")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class HyperParams:
    grid: int = 14             # G; feature grid side
    feat_dim: int = 64         # D; annotation vector size
    hidden: int = 128          # H; LSTM state size
    embed: int = 64            # E; token embedding size
    conv1: int = 32            # channels of the first encoder layer
    kernel1: int = 5           # first encoder kernel side (odd)
    kernel2: int = 5           # second encoder kernel side (odd)
    att_dim: int = 32          # attention MLP width
    canvas: int = 56           # square input side; must be 4 * grid
    lam: float = 0.005         # alpha-regularizer weight
    max_len: int = 16          # C_max, in tokens
    dropout: float = 0.5
    lr: float = 1e-3

    def __post_init__(self):
        if self.canvas != 4 * self.grid:
            raise ValueError("canvas must be 4 * grid (two stride-2 layers)")
        if self.lam < 0 or self.max_len < 1:
            raise ValueError("invalid loss config")
        if self.kernel1 % 2 == 0 or self.kernel2 % 2 == 0 \
                or self.kernel1 < 1 or self.kernel2 < 1:
            raise ValueError("encoder kernels must be odd and positive")


@dataclass
class DecoderState:
    hidden: np.ndarray
    cell: np.ndarray
    step: int = 0


@dataclass
class CaptionRecord:
    tokens: list[str]
    attention_history: list[np.ndarray]
    policy: str = "self"

    def __post_init__(self):
        if len(self.tokens) != len(self.attention_history):
            raise ValueError("attention history length must match token count")


def _init_value(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class CaptionModel:
    def __init__(self, vocab: Vocabulary, hp: HyperParams | None = None, seed: int = 0):
        self.vocab = vocab
        self.hp = hp or HyperParams()
        self.seed = seed
        self.store = nn.ParamStore()
        self._register_params()

    # ------------------------------------------------------------ parameters

    def _register_params(self):
        hp, V = self.hp, len(self.vocab)
        rng = named_rng(self.seed, "param-init")
        add = self.store.add
        fan1 = hp.kernel1 * hp.kernel1 * 3
        fan2 = hp.kernel2 * hp.kernel2 * hp.conv1
        add("enc1_W", _init_value(rng, (fan1, hp.conv1), fan1))
        add("enc1_b", np.zeros(hp.conv1))
        add("enc2_W", _init_value(rng, (fan2, hp.feat_dim), fan2))
        add("enc2_b", np.zeros(hp.feat_dim))
        add("init_h_W", _init_value(rng, (hp.feat_dim, hp.hidden), hp.feat_dim))
        add("init_h_b", np.zeros(hp.hidden))
        add("init_c_W", _init_value(rng, (hp.feat_dim, hp.hidden), hp.feat_dim))
        add("init_c_b", np.zeros(hp.hidden))
        add("att_Wh", _init_value(rng, (hp.hidden, hp.att_dim), hp.hidden))
        add("att_Wa", _init_value(rng, (hp.feat_dim, hp.att_dim), hp.feat_dim))
        add("att_v", _init_value(rng, (hp.att_dim,), hp.att_dim))
        add("embed", _init_value(rng, (V, hp.embed), hp.embed))
        din = hp.embed + hp.feat_dim + hp.hidden
        add("lstm_W", _init_value(rng, (din, 4 * hp.hidden), din))
        lstm_b = np.zeros(4 * hp.hidden)
        lstm_b[hp.hidden:2 * hp.hidden] = 1.0  # open forget gates at init
        add("lstm_b", lstm_b)
        add("out_W", _init_value(rng, (hp.hidden + hp.feat_dim, V), hp.hidden + hp.feat_dim))
        add("out_b", np.zeros(V))

    def _p(self, name):
        return self.store[name].value

    # --------------------------------------------------------------- encoder

    def encode(self, image: np.ndarray, with_cache: bool = False):
        """Image (canvas, canvas, 3) -> FeatureGrid as (L, D) array."""
        hp = self.hp
        if image.shape[:2] != (hp.canvas, hp.canvas):
            raise ValueError(f"expected {hp.canvas}x{hp.canvas} image, got {image.shape}")
        x = image.astype(np.float64) / 255.0 - 0.5
        a1, c1 = nn.convs2_forward(x, self._p("enc1_W"), self._p("enc1_b"), hp.kernel1)
        r1 = nn.relu(a1)
        a2, c2 = nn.convs2_forward(r1, self._p("enc2_W"), self._p("enc2_b"), hp.kernel2)
        r2 = nn.relu(a2)
        feats = r2.reshape(hp.grid * hp.grid, hp.feat_dim)
        if with_cache:
            return feats, (c1, a1, c2, a2)
        return feats

    def _encode_backward(self, dfeats: np.ndarray, cache):
        hp = self.hp
        c1, a1, c2, a2 = cache
        dr2 = dfeats.reshape(hp.grid, hp.grid, hp.feat_dim)
        da2 = nn.relu_backward(dr2, a2)
        dr1, dW2, db2 = nn.convs2_backward(da2, c2)
        da1 = nn.relu_backward(dr1, a1)
        _, dW1, db1 = nn.convs2_backward(da1, c1)
        self.store["enc2_W"].grad += dW2
        self.store["enc2_b"].grad += db2
        self.store["enc1_W"].grad += dW1
        self.store["enc1_b"].grad += db1

    # --------------------------------------------------------------- decoder

    def init_state(self, features: np.ndarray) -> DecoderState:
        mean = features.mean(axis=0)
        h0 = mean @ self._p("init_h_W") + self._p("init_h_b")
        c0 = mean @ self._p("init_c_W") + self._p("init_c_b")
        return DecoderState(hidden=h0, cell=c0, step=0)

    def attend(self, state: DecoderState, features: np.ndarray) -> np.ndarray:
        alpha, _ = self._attend_fwd(state.hidden, features, features @ self._p("att_Wa"))
        return alpha

    def _attend_fwd(self, h: np.ndarray, features: np.ndarray, proj_a: np.ndarray):
        m = proj_a + h @ self._p("att_Wh")
        np.tanh(m, out=m)
        e = m @ self._p("att_v")
        alpha = nn.softmax(e)
        return alpha, (h, m, alpha)

    def decode_step(self, state: DecoderState, features: np.ndarray, prev_token: int,
                    override=None, proj_a=None, dropout_seed=None, with_cache: bool = False):
        """One decoding step. Returns (logits, new_state, used_alpha[, cache]).

        override, when given, is called as override(t, alpha_model) with t
        starting at 1 and must return a valid attention vector.
        """
        hp = self.hp
        if not 0 <= prev_token < len(self.vocab):
            raise ValueError(f"token id {prev_token} outside vocabulary")
        if proj_a is None:
            proj_a = features @ self._p("att_Wa")
        t = state.step + 1
        alpha_m, att_cache = self._attend_fwd(state.hidden, features, proj_a)
        if override is not None:
            alpha = np.asarray(override(t, alpha_m), dtype=np.float64)
            check_attention(alpha, atol=1e-6, what=f"override attention at step {t}")
        else:
            alpha = alpha_m
        z = alpha @ features
        emb = self._p("embed")[prev_token]
        x = np.concatenate([emb, z])
        h_new, c_new, lstm_cache = nn.lstm_step(x, state.hidden, state.cell,
                                                self._p("lstm_W"), self._p("lstm_b"))
        if dropout_seed is not None and hp.dropout > 0.0:
            mask = nn.dropout_mask(hp.hidden, hp.dropout, dropout_seed)
        else:
            mask = None
        h_out = h_new if mask is None else h_new * mask
        hz = np.concatenate([h_out, z])
        logits = hz @ self._p("out_W") + self._p("out_b")
        new_state = DecoderState(hidden=h_new, cell=c_new, step=t)
        if with_cache:
            cache = (att_cache, alpha, prev_token, lstm_cache, mask, hz, override is not None)
            return logits, new_state, alpha, cache
        return logits, new_state, alpha

    # ------------------------------------------------------------------ loss

    def compute_loss(self, image: np.ndarray, caption_ids, dropout_seed=None,
                     lam: float | None = None):
        """Teacher-forced loss + gradients accumulated into the store.

        caption_ids excludes <start>/<end>; targets are caption + <end>.
        dropout_seed None disables dropout (used for evaluation and
        gradient checks). Returns the scalar loss.
        """
        hp = self.hp
        lam = hp.lam if lam is None else lam
        if len(caption_ids) == 0:
            raise ValueError("empty caption")
        if len(caption_ids) > hp.max_len:
            raise ValueError(f"caption longer than max length {hp.max_len}")
        feats, enc_cache = self.encode(image, with_cache=True)
        L = feats.shape[0]
        proj_a = feats @ self._p("att_Wa")
        state = self.init_state(feats)
        h0, c0 = state.hidden, state.cell
        inputs = [START] + list(caption_ids)
        targets = list(caption_ids) + [END]
        C = len(targets)
        caches, logits_rows, states = [], [], [state]
        for t in range(C):
            dseed = None if dropout_seed is None else (dropout_seed * 8191 + t)
            logits, state, alpha, cache = self.decode_step(
                state, feats, inputs[t], proj_a=proj_a, dropout_seed=dseed, with_cache=True)
            caches.append(cache)
            logits_rows.append(logits)
            states.append(state)
        logits_mat = np.stack(logits_rows)
        ce, dlogits = nn.cross_entropy_loss(logits_mat, targets)
        alpha_sum = np.sum([c[1] for c in caches], axis=0)
        reg = lam * float(np.sum((1.0 - alpha_sum) ** 2))
        dalpha_reg = -2.0 * lam * (1.0 - alpha_sum)

        # backward through time; weight gradients that sum over steps are
        # deferred to single matrix products after the loop
        dh_next = np.zeros(hp.hidden)
        dc_next = np.zeros(hp.hidden)
        hz_rows = np.stack([c[5] for c in caches])
        self.store["out_W"].grad += hz_rows.T @ dlogits
        self.store["out_b"].grad += dlogits.sum(axis=0)
        out_W = self._p("out_W")
        att_v, att_Wh, att_Wa = self._p("att_v"), self._p("att_Wh"), self._p("att_Wa")
        xh_rows, dgate_rows, alpha_rows, dz_rows, hprev_rows, dsum_rows = [], [], [], [], [], []
        dpre_total = np.zeros((L, hp.att_dim))
        dv_total = np.zeros(hp.att_dim)
        for t in reversed(range(C)):
            att_cache, alpha, prev_token, lstm_cache, mask, hz, _ = caches[t]
            dhz = out_W @ dlogits[t]
            dh_out = dhz[:hp.hidden]
            dz = dhz[hp.hidden:].copy()
            dh = dh_next + (dh_out if mask is None else dh_out * mask)
            dx, dh_prev, dc_prev, dgates = nn.lstm_step_backward_gates(dh, dc_next, lstm_cache)
            xh_rows.append(lstm_cache[0])
            dgate_rows.append(dgates)
            self.store["embed"].grad[prev_token] += dx[:hp.embed]
            dz += dx[hp.embed:]
            dalpha = feats @ dz + dalpha_reg
            alpha_rows.append(alpha)
            dz_rows.append(dz)
            # attention backward (dWa/dWh/dfeats contributions deferred)
            h_att, m, alpha_soft = att_cache
            de = nn.softmax_backward(alpha_soft, dalpha)
            dv_total += m.T @ de
            m *= m
            np.subtract(1.0, m, out=m)  # cache row is dead after this step
            dpre = np.outer(de, att_v)
            dpre *= m
            dpre_total += dpre
            dsum = dpre.sum(axis=0)
            hprev_rows.append(h_att)
            dsum_rows.append(dsum)
            dh_next, dc_next = dh_prev + att_Wh @ dsum, dc_prev
        self.store["lstm_W"].grad += np.stack(xh_rows).T @ np.stack(dgate_rows)
        self.store["lstm_b"].grad += np.sum(dgate_rows, axis=0)
        self.store["att_v"].grad += dv_total
        self.store["att_Wa"].grad += feats.T @ dpre_total
        self.store["att_Wh"].grad += np.stack(hprev_rows).T @ np.stack(dsum_rows)
        dfeats = np.stack(alpha_rows).T @ np.stack(dz_rows)
        dfeats += dpre_total @ att_Wa.T
        # initial state
        mean = feats.mean(axis=0)
        self.store["init_h_W"].grad += np.outer(mean, dh_next)
        self.store["init_h_b"].grad += dh_next
        self.store["init_c_W"].grad += np.outer(mean, dc_next)
        self.store["init_c_b"].grad += dc_next
        dmean = self._p("init_h_W") @ dh_next + self._p("init_c_W") @ dc_next
        dfeats += dmean[None, :] / L
        self._encode_backward(dfeats, enc_cache)
        return ce + reg

    # ------------------------------------------------------------ generation

    def generate(self, features: np.ndarray, override=None, max_len: int | None = None,
                 policy_tag: str = "self") -> CaptionRecord:
        """Greedy decoding from <start> until <end> or max_len tokens."""
        max_len = self.hp.max_len if max_len is None else max_len
        proj_a = features @ self._p("att_Wa")
        state = self.init_state(features)
        tokens, history = [], []
        prev = START
        for _ in range(max_len):
            logits, state, alpha = self.decode_step(state, features, prev,
                                                    override=override, proj_a=proj_a)
            tok = int(np.argmax(logits))
            tokens.append(tok)
            history.append(alpha)
            if tok == END:
                break
            prev = tok
        return CaptionRecord(tokens=self.vocab.decode(tokens),
                             attention_history=history, policy=policy_tag)

    def caption_image(self, image: np.ndarray, override=None, max_len=None,
                      policy_tag: str = "self") -> CaptionRecord:
        return self.generate(self.encode(image), override=override,
                             max_len=max_len, policy_tag=policy_tag)

    # ---------------------------------------------------------- checkpointing

    def save_checkpoint(self, path):
        header = {
            "version": CHECKPOINT_VERSION,
            "G": self.hp.grid, "D": self.hp.feat_dim, "H": self.hp.hidden,
            "E": self.hp.embed, "V": len(self.vocab),
            "lambda": self.hp.lam, "seed": self.seed,
            "param_order": self.store.names(),
            "C1": self.hp.conv1, "A": self.hp.att_dim,
            "K1": self.hp.kernel1, "K2": self.hp.kernel2,
            "canvas": self.hp.canvas, "max_len": self.hp.max_len,
            "vocab": self.vocab.tokens,
        }
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("utf-8"))
            for name in self.store.names():
                arr = np.ascontiguousarray(self.store[name].value, dtype="<f8")
                f.write(arr.tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> "CaptionModel":
        with open(path, "rb") as f:
            header_line = f.readline()
            blob = f.read()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint header: {e}") from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        vocab = Vocabulary(tokens=list(header["vocab"]))
        if len(vocab) != header["V"]:
            raise CheckpointError("vocabulary size does not match header V")
        hp = HyperParams(grid=header["G"], feat_dim=header["D"], hidden=header["H"],
                         embed=header["E"], conv1=header["C1"], att_dim=header["A"],
                         kernel1=header.get("K1", 3), kernel2=header.get("K2", 3),
                         canvas=header["canvas"], lam=header["lambda"],
                         max_len=header.get("max_len", 16))
        model = cls(vocab, hp, seed=header["seed"])
        if header["param_order"] != model.store.names():
            raise CheckpointError("parameter order mismatch")
        expected = 8 * model.store.total_size()
        if len(blob) != expected:
            raise CheckpointError(f"blob length {len(blob)} != expected {expected}")
        offset = 0
        for name in model.store.names():
            p = model.store[name]
            n = p.value.size
            vals = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            p.value[...] = vals.reshape(p.value.shape)
            offset += 8 * n
        return model


# -------------------------------------------------------------------- training

def build_vocabulary(max_size: int | None = None) -> Vocabulary:
    return Vocabulary.from_tokens(scenegen.generator_tokens(), max_size=max_size)


@dataclass
class TrainResult:
    model: CaptionModel
    epoch_losses: list[float]
    n_pairs: int


def training_pairs(manifest: scenegen.DatasetManifest, vocab: Vocabulary, max_len: int):
    """(image, caption ids, margins) triples; drops captions that are too
    long or contain out-of-vocabulary tokens. Margins (left, right, up,
    down) are the largest translations keeping every box on-canvas."""
    pairs = []
    for rec in manifest.records:
        image = ppm.read_ppm(manifest.root / rec.image)
        h, w = image.shape[:2]
        if rec.boxes:
            margins = (min(b["x"] for b in rec.boxes),
                       w - max(b["x"] + b["w"] for b in rec.boxes),
                       min(b["y"] for b in rec.boxes),
                       h - max(b["y"] + b["h"] for b in rec.boxes))
        else:
            margins = (0, 0, 0, 0)
        for cap in rec.captions:
            if len(cap) > max_len or any(t not in vocab for t in cap):
                continue
            pairs.append((image, vocab.encode(cap), margins))
    return pairs


def train(manifest: scenegen.DatasetManifest, hp: HyperParams | None = None,
          seed: int = 0, epochs: int = 10, log_fn=None,
          augment: bool = True) -> TrainResult:
    """Train a fresh model on the manifest. With ``augment`` each image is
    translated per presentation, uniformly within the margins that keep
    every object on-canvas; captions describe relative layout only, so
    they stay exact under translation."""
    hp = hp or HyperParams()
    vocab = build_vocabulary()
    pairs = training_pairs(manifest, vocab, hp.max_len)
    if not pairs:
        raise ValueError("no training pairs left after filtering")
    model = CaptionModel(vocab, hp, seed=seed)
    model.store.consolidate()
    adam = nn.AdamConfig(lr=hp.lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        # step decay: drop the learning rate for the last 40% of epochs
        adam.lr = hp.lr * (0.3 if epoch >= 0.6 * epochs else 1.0)
        order = named_rng(seed, "shuffle", epoch).permutation(len(pairs))
        arng = named_rng(seed, "augment", epoch)
        total = 0.0
        for idx in order:
            image, cap, (left, right, up, down) = pairs[idx]
            if augment:
                dx = int(arng.integers(-left, right + 1))
                dy = int(arng.integers(-up, down + 1))
                if dx or dy:
                    # shifts stay within the background margins, so a
                    # wrap-around roll is an exact translation
                    image = np.roll(image, (dy, dx), axis=(0, 1))
            total += model.compute_loss(image, cap, dropout_seed=seed * 1_000_003 + step)
            nn.adam_update(model.store, adam)
            step += 1
        mean_loss = total / len(pairs)
        losses.append(mean_loss)
        if log_fn:
            log_fn(epoch, mean_loss)
    return TrainResult(model=model, epoch_losses=losses, n_pairs=len(pairs))
