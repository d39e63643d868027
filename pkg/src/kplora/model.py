"""Miniature decoder-only causal LM with LoRA-adapted projections.

Pre-norm transformer blocks, fixed sinusoidal positions, tied input/output
embeddings, no biases on the linear maps. The base weights are frozen
after construction; the only trainable parameters are the low-rank adapter
factors attached to the attention projections (and optionally the
feed-forward maps). Forward, loss, and backward are written directly in
float64 numpy; gradients reach the adapters by hand-derived backprop,
verified against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lora
from .errors import ContractError
from .lora import LoraConfig, LoraLinear
from .vocab import BOS, EOS, PAD, SEP

# Cosine attention kernel for the echo circuit: eight frequencies searched
# for a maximal gap between the peak at lag 0 (8.0) and the worst integer
# sidelobe (3.2) over lags -140..140, so softmax concentrates on one key.
ECHO_KERNEL_FREQS = (
    0.08127, 0.28517, 0.5254, 1.16396, 1.42507, 1.83201, 2.43325, 2.47478,
)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    vocab_size: int = 34

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def sinusoidal_positions(max_len: int, d_model: int, scale: float = 0.5) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * dim / d_model)
    enc = np.zeros((max_len, d_model))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return scale * enc


class ToyModel:
    """Frozen random base weights plus (optionally) trainable adapters."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, dff = config.d_model, config.d_ff
        emb_std = 0.25
        proj_std = 1.0 / np.sqrt(d)
        self.tok_emb = rng.normal(0.0, emb_std, size=(config.vocab_size, d))
        self.pos_emb = sinusoidal_positions(config.max_seq_len, d)
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": rng.normal(0.0, proj_std, size=(d, d)),
                    "wk": rng.normal(0.0, proj_std, size=(d, d)),
                    "wv": rng.normal(0.0, proj_std, size=(d, d)),
                    "wo": rng.normal(0.0, proj_std, size=(d, d)),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w_up": rng.normal(0.0, proj_std, size=(d, dff)),
                    "w_down": rng.normal(0.0, 1.0 / np.sqrt(dff), size=(dff, d)),
                }
            )
        self.lnf_g = np.ones(d)
        self.lnf_b = np.zeros(d)
        self.adapters: dict[str, LoraLinear] = {}
        self.lora_config: LoraConfig | None = None

    # -- adapters ---------------------------------------------------------

    _TARGET_WEIGHTS = {
        "query": ("wq",),
        "key": ("wk",),
        "value": ("wv",),
        "output": ("wo",),
        "feed_forward": ("w_up", "w_down"),
    }

    def attach_adapters(self, cfg: LoraConfig, seed: int) -> None:
        """Create zero-update adapters for every configured target."""
        rng = np.random.default_rng(seed)
        self.adapters = {}
        self.lora_config = cfg
        for li, layer in enumerate(self.layers):
            for target in cfg.targets:
                for wname in self._TARGET_WEIGHTS[target]:
                    name = f"layers.{li}.{target}" if len(
                        self._TARGET_WEIGHTS[target]
                    ) == 1 else f"layers.{li}.{target}.{wname}"
                    self.adapters[name] = lora.attach_adapter(layer[wname], cfg, rng)

    def _proj(self, li: int, target: str, wname: str) -> LoraLinear | np.ndarray:
        names = self._TARGET_WEIGHTS[target]
        key = f"layers.{li}.{target}" if len(names) == 1 else f"layers.{li}.{target}.{wname}"
        adapter = self.adapters.get(key)
        return adapter if adapter is not None else self.layers[li][wname]

    def base_parameters(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "lnf_g": self.lnf_g, "lnf_b": self.lnf_b}
        for li, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layers.{li}.{k}"] = v
        return out

    def trainable_parameter_count(self) -> int:
        return sum(a.trainable_parameters for a in self.adapters.values())

    def base_parameter_count(self) -> int:
        return sum(v.size for v in self.base_parameters().values())

    # -- forward / backward ----------------------------------------------

    def forward(
        self,
        ids: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        want_cache: bool = False,
    ):
        """Per-position vocabulary logits; causal by construction."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if T == 0:
            raise ContractError("empty input")
        H, dh = self.config.n_heads, self.config.head_dim
        x = self.tok_emb[ids] + self.pos_emb[:T]
        causal = np.triu(np.full((T, T), -np.inf), k=1)
        caches = []
        for li in range(self.config.n_layers):
            lp = self.layers[li]
            a, ln1c = _layernorm(x, lp["ln1_g"], lp["ln1_b"])
            q, qc = _apply(self._proj(li, "query", "wq"), a, training, rng)
            k, kc = _apply(self._proj(li, "key", "wk"), a, training, rng)
            v, vc = _apply(self._proj(li, "value", "wv"), a, training, rng)
            qh = _split_heads(q, H)  # (B,H,T,dh)
            kh = _split_heads(k, H)
            vh = _split_heads(v, H)
            scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh) + causal
            P = _softmax(scores)
            ctx = _merge_heads(P @ vh)
            o, oc = _apply(self._proj(li, "output", "wo"), ctx, training, rng)
            x_attn = x + o
            b, ln2c = _layernorm(x_attn, lp["ln2_g"], lp["ln2_b"])
            u, upc = _apply(self._proj(li, "feed_forward", "w_up"), b, training, rng)
            r = np.maximum(u, 0.0)
            m, downc = _apply(self._proj(li, "feed_forward", "w_down"), r, training, rng)
            x = x_attn + m
            if want_cache:
                caches.append(
                    {
                        "ln1": ln1c, "q": qc, "k": kc, "v": vc,
                        "P": P, "qh": qh, "kh": kh, "vh": vh,
                        "o": oc, "ln2": ln2c, "up": upc,
                        "relu": u > 0.0, "down": downc,
                    }
                )
        hf, lnfc = _layernorm(x, self.lnf_g, self.lnf_b)
        logits = hf @ self.tok_emb.T
        if want_cache:
            return logits, {"layers": caches, "lnf": lnfc}
        return logits

    def backward(self, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Adapter gradients for the cached forward pass.

        Returns a dict keyed "adapter_name.A" / "adapter_name.B"; the
        gradient flows through all frozen weights but none is stored for
        them.
        """
        H, dh = self.config.n_heads, self.config.head_dim
        grads: dict[str, np.ndarray] = {}

        def apply_backward(li, target, wname, cached, grad_out):
            layer = self._proj(li, target, wname)
            names = self._TARGET_WEIGHTS[target]
            key = f"layers.{li}.{target}" if len(names) == 1 else f"layers.{li}.{target}.{wname}"
            if isinstance(layer, LoraLinear):
                dx, dA, dB = lora.backward_from_cache(layer, cached, grad_out)
                grads[f"{key}.A"] = dA
                grads[f"{key}.B"] = dB
                return dx
            return grad_out @ layer.T

        dx = _layernorm_backward(cache["lnf"], dlogits @ self.tok_emb)
        for li in reversed(range(self.config.n_layers)):
            c = cache["layers"][li]
            # feed-forward block
            dm = dx
            dr = apply_backward(li, "feed_forward", "w_down", c["down"], dm)
            du = dr * c["relu"]
            db = apply_backward(li, "feed_forward", "w_up", c["up"], du)
            dx_attn = dx + _layernorm_backward(c["ln2"], db)
            # attention block
            do = dx_attn
            dctx = apply_backward(li, "output", "wo", c["o"], do)
            dctx_h = _split_heads(dctx, H)
            dP = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
            dvh = c["P"].transpose(0, 1, 3, 2) @ dctx_h
            dscores = _softmax_backward(c["P"], dP) / np.sqrt(dh)
            dqh = dscores @ c["kh"]
            dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
            dq = _merge_heads(dqh)
            dk = _merge_heads(dkh)
            dv = _merge_heads(dvh)
            da = apply_backward(li, "query", "wq", c["q"], dq)
            da += apply_backward(li, "key", "wk", c["k"], dk)
            da += apply_backward(li, "value", "wv", c["v"], dv)
            dx = dx_attn + _layernorm_backward(c["ln1"], da)
        return grads


def _apply(layer, x, training, rng):
    """Project through a LoraLinear or a plain frozen matrix."""
    if isinstance(layer, LoraLinear):
        return lora.forward_with_cache(layer, x, training=training, rng=rng)
    return x @ layer, None


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - np.sum(dP * P, axis=-1, keepdims=True))


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_backward(cache, dy: np.ndarray) -> np.ndarray:
    xhat, inv, g = cache
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def forward_logits(model: ToyModel, ids) -> np.ndarray:
    """Eval-mode logits: deterministic, no dropout."""
    return model.forward(np.asarray(ids), training=False)


def clm_loss(
    logits: np.ndarray, targets: np.ndarray, answer_mask: np.ndarray
) -> float:
    """Mean negative log-likelihood over masked target positions."""
    loss, _ = clm_loss_and_grad(logits, targets, answer_mask, want_grad=False)
    return loss


def clm_loss_and_grad(
    logits: np.ndarray,
    targets: np.ndarray,
    answer_mask: np.ndarray,
    want_grad: bool = True,
):
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    mask = np.asarray(answer_mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ContractError("logits, targets and mask shapes disagree")
    total = mask.sum()
    if total == 0:
        raise ContractError("answer mask selects no positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / total)
    if not want_grad:
        return loss, None
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (mask / total)[..., None]
    return loss, dlogits


def build_echo_base(
    config: ModelConfig,
    offset: int,
    seed: int,
    gain: float = 1.6,
    copy_logit: float = 4.0,
    texture: float = 0.15,
) -> ToyModel:
    """Base model with built-in span-echo competence.

    Stands in for a pretrained model: greedy decoding reproduces the token
    seen ``offset`` positions back, emitting EOS when the echo source is
    SEP. Layer 0 is constructed (sinusoidal position features in the
    first half of the embedding, token features in the second half, an
    attention kernel peaked at lag ``offset``, and an exact value-path map
    on the token subspace) while the rest of the network is small random
    texture that leaves the circuit intact. The construction is what LoRA
    fine-tuning then bends toward a task.
    """
    d, H, dh = config.d_model, config.n_heads, config.head_dim
    d2 = d // 2
    n_pairs = min(d2 // 2, dh // 2, len(ECHO_KERNEL_FREQS))
    if n_pairs < 4:
        raise ContractError("echo base needs d_model >= 32 and head_dim >= 8")
    if not 0 < offset < config.max_seq_len:
        raise ContractError("echo offset must fall inside the context window")
    m = ToyModel(config, seed)
    rng = np.random.default_rng(seed + 1)
    freqs = np.array(ECHO_KERNEL_FREQS[:n_pairs])

    pos = np.arange(config.max_seq_len, dtype=np.float64)
    pe = np.zeros((config.max_seq_len, d))
    pe[:, 0 : 2 * n_pairs : 2] = np.sin(pos[:, None] * freqs[None, :])
    pe[:, 1 : 2 * n_pairs + 1 : 2] = np.cos(pos[:, None] * freqs[None, :])
    m.pos_emb = pe

    te = np.zeros((config.vocab_size, d))
    te[:, d2:] = rng.normal(0.0, np.sqrt(0.5), size=(config.vocab_size, d2))
    m.tok_emb = te

    # Exact token map on the echo path: identity except SEP -> EOS. PAD,
    # BOS and EOS never occur as echo sources, which keeps the system
    # solvable (vocab_size - 3 <= d2 constraints in d2 dimensions).
    tau = {t: t for t in range(config.vocab_size)}
    tau[SEP] = EOS
    sources = [t for t in range(config.vocab_size) if t not in (PAD, BOS, EOS)]
    if len(sources) > d2:
        raise ContractError("token half-space too small for the echo map")
    src = te[sources, d2:]
    tgt = te[[tau[t] for t in sources], d2:]
    token_map, *_ = np.linalg.lstsq(src, tgt, rcond=None)

    lp0 = m.layers[0]
    for w in ("wq", "wk", "wv", "wo"):
        lp0[w] = np.zeros((d, d))
    for h in range(H):
        cols = h * dh
        for j in range(n_pairs):
            c, s = np.cos(freqs[j] * offset), np.sin(freqs[j] * offset)
            # per-pair rotation by freq*offset so q.k sums to
            # sum_j cos(freq_j * (q_pos - k_pos - offset))
            lp0["wq"][2 * j, cols + 2 * j] = gain * c
            lp0["wq"][2 * j + 1, cols + 2 * j] = -gain * s
            lp0["wq"][2 * j, cols + 2 * j + 1] = gain * s
            lp0["wq"][2 * j + 1, cols + 2 * j + 1] = gain * c
            lp0["wk"][2 * j, cols + 2 * j] = gain
            lp0["wk"][2 * j + 1, cols + 2 * j + 1] = gain
    n_carrier = (d2 + dh - 1) // dh
    for h in range(n_carrier):
        lo = h * dh
        width = min(dh, d2 - lo)
        lp0["wv"][d2:, h * dh : h * dh + width] = token_map[:, lo : lo + width]
        lp0["wo"][h * dh : h * dh + width, d2 + lo : d2 + lo + width] = (
            copy_logit * np.eye(width)
        )

    lp0["w_up"] = rng.normal(0, texture / np.sqrt(d), size=(d, config.d_ff))
    lp0["w_down"] = rng.normal(0, texture / np.sqrt(config.d_ff), size=(config.d_ff, d))
    for li in range(1, config.n_layers):
        lp = m.layers[li]
        for w in ("wq", "wk", "wv", "wo"):
            lp[w] = rng.normal(0, texture / np.sqrt(d), size=(d, d))
        lp["w_up"] = rng.normal(0, texture / np.sqrt(d), size=(d, config.d_ff))
        lp["w_down"] = rng.normal(
            0, texture / np.sqrt(config.d_ff), size=(config.d_ff, d)
        )
    return m


def generate(model: ToyModel, prompt_ids, max_new: int, eos_id: int) -> list[list[int]]:
    """Greedy continuation of each prompt row; stops per row at EOS.

    Returns only the generated ids (without the prompt), truncated at and
    excluding EOS.
    """
    prompt = np.asarray(prompt_ids)
    if prompt.ndim == 1:
        prompt = prompt[None, :]
    B, Tp = prompt.shape
    if Tp + max_new > model.config.max_seq_len:
        raise ContractError("prompt plus max_new exceeds max_seq_len")
    if max_new == 0:
        return [[] for _ in range(B)]
    H, dh = model.config.n_heads, model.config.head_dim
    L = model.config.n_layers
    kcache = [np.zeros((B, H, 0, dh)) for _ in range(L)]
    vcache = [np.zeros((B, H, 0, dh)) for _ in range(L)]

    def step(tok_ids: np.ndarray, pos: int) -> np.ndarray:
        x = model.tok_emb[tok_ids][:, None, :] + model.pos_emb[pos]
        for li in range(L):
            lp = model.layers[li]
            a, _ = _layernorm(x, lp["ln1_g"], lp["ln1_b"])
            q, _ = _apply(model._proj(li, "query", "wq"), a, False, None)
            k, _ = _apply(model._proj(li, "key", "wk"), a, False, None)
            v, _ = _apply(model._proj(li, "value", "wv"), a, False, None)
            kcache[li] = np.concatenate([kcache[li], _split_heads(k, H)], axis=2)
            vcache[li] = np.concatenate([vcache[li], _split_heads(v, H)], axis=2)
            qh = _split_heads(q, H)
            scores = qh @ kcache[li].transpose(0, 1, 3, 2) / np.sqrt(dh)
            ctx = _merge_heads(_softmax(scores) @ vcache[li])
            o, _ = _apply(model._proj(li, "output", "wo"), ctx, False, None)
            x = x + o
            b, _ = _layernorm(x, lp["ln2_g"], lp["ln2_b"])
            u, _ = _apply(model._proj(li, "feed_forward", "w_up"), b, False, None)
            m, _ = _apply(
                model._proj(li, "feed_forward", "w_down"), np.maximum(u, 0.0), False, None
            )
            x = x + m
        hf, _ = _layernorm(x, model.lnf_g, model.lnf_b)
        return (hf @ model.tok_emb.T)[:, 0, :]

    logits = None
    for t in range(Tp):
        logits = step(prompt[:, t], t)
    out = np.zeros((B, max_new), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    last = None
    for j in range(max_new):
        nxt = np.argmax(logits, axis=-1).astype(np.int64)
        if last is not None:
            nxt = np.where(done, eos_id, nxt)
        done = done | (nxt == eos_id)
        out[:, j] = nxt
        if done.all():
            out = out[:, : j + 1]
            break
        last = nxt
        logits = step(nxt, Tp + j)
    results = []
    for b in range(B):
        row = out[b].tolist()
        if eos_id in row:
            row = row[: row.index(eos_id)]
        results.append(row)
    return results
