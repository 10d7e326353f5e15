"""The three forecasting networks, built on the autodiff engine.

Each architecture exposes `init_params` (shapes derived from the config
and panel vocabularies) and a pure `forward` over a SampleBatch. The
BiLSTM encoder of the date-window features and the categorical embedding
lookups are shared plumbing.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ShapeError
from ..optim import ParamStore, glorot_uniform
from .base import N_DENSE, NeuralConfig, SampleBatch

NEG_MASK = -1e9
N_MONTHS = 12
N_WEEKDAYS = 7


def _add_lstm(params: ParamStore, prefix: str, in_dim: int, hidden: int, rng) -> None:
    params.add(f"{prefix}.wx", glorot_uniform(rng, in_dim, 4 * hidden))
    params.add(f"{prefix}.wh", glorot_uniform(rng, hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate opens at init
    params.add(f"{prefix}.b", bias)


def _add_linear(params: ParamStore, prefix: str, in_dim: int, out_dim: int, rng) -> None:
    params.add(f"{prefix}.w", glorot_uniform(rng, in_dim, out_dim))
    params.add(f"{prefix}.b", np.zeros(out_dim))


def _linear(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _lstm_scan(params: ParamStore, prefix: str, xs: Tensor, hidden: int, reverse: bool = False):
    """Run an LSTM over axis 1 of xs [B, T, D].

    Returns (list of per-step hidden Tensors [B, hidden] in scan order,
    final hidden, final cell).
    """
    batch, steps, _ = xs.shape
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outputs = []
    for t in order:
        x_t = ad.reshape(ad.slice_axis(xs, 1, t, t + 1), (batch, xs.shape[2]))
        h, c = ad.lstm_cell(
            x_t, h, c, params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
        )
        outputs.append(h)
    return outputs, h, c


def _lstm_scan_from(params: ParamStore, prefix: str, xs: Tensor, hidden: int, h: Tensor, c: Tensor):
    batch, steps, _ = xs.shape
    outputs = []
    for t in range(steps):
        x_t = ad.reshape(ad.slice_axis(xs, 1, t, t + 1), (batch, xs.shape[2]))
        h, c = ad.lstm_cell(
            x_t, h, c, params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
        )
        outputs.append(h)
    return outputs, h, c


def _stack_steps(steps: list[Tensor]) -> Tensor:
    """[B, H] tensors -> [B, T, H]."""
    batch, hidden = steps[0].shape
    return ad.concat([ad.reshape(s, (batch, 1, hidden)) for s in steps], axis=1)


def _bilstm_encoding(params: ParamStore, prefix: str, seq: Tensor, hidden: int) -> Tensor:
    """Concatenated final hidden states of a forward and a backward pass."""
    _, h_fwd, _ = _lstm_scan(params, f"{prefix}.fwd", seq, hidden)
    _, h_bwd, _ = _lstm_scan(params, f"{prefix}.bwd", seq, hidden, reverse=True)
    return ad.concat([h_fwd, h_bwd], axis=1)


def _add_embeddings(params: ParamStore, n_stations: int, embed_dim: int, rng) -> None:
    params.add("emb.origin", glorot_uniform(rng, n_stations, embed_dim))
    params.add("emb.destination", glorot_uniform(rng, n_stations, embed_dim))
    params.add("emb.month", glorot_uniform(rng, N_MONTHS, embed_dim))
    params.add("emb.weekday", glorot_uniform(rng, N_WEEKDAYS, embed_dim))


def _gather_embeddings(params: ParamStore, cats: np.ndarray) -> Tensor:
    columns = []
    for i, table in enumerate(("emb.origin", "emb.destination", "emb.month", "emb.weekday")):
        columns.append(ad.embedding_gather(params[table], cats[:, i]))
    return ad.concat(columns, axis=1)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def _causal_mask(total: int) -> np.ndarray:
    mask = np.zeros((total, total))
    mask[np.triu_indices(total, k=1)] = NEG_MASK
    return mask


def _multi_head_attention(params: ParamStore, prefix: str, seq: Tensor, n_heads: int) -> Tensor:
    """Masked multi-head self-attention over [B, T, hidden]."""
    _, total, hidden = seq.shape
    if hidden % n_heads != 0:
        raise ShapeError(f"attention: {n_heads} heads do not divide width {hidden}")
    d_k = hidden // n_heads
    q = ad.matmul(seq, params[f"{prefix}.wq"])
    k = ad.matmul(seq, params[f"{prefix}.wk"])
    v = ad.matmul(seq, params[f"{prefix}.wv"])
    mask = _causal_mask(total)
    heads = []
    for i in range(n_heads):
        lo, hi = i * d_k, (i + 1) * d_k
        heads.append(
            ad.scaled_dot_attention(
                ad.slice_axis(q, 2, lo, hi),
                ad.slice_axis(k, 2, lo, hi),
                ad.slice_axis(v, 2, lo, hi),
                mask=mask,
            )
        )
    return ad.matmul(ad.concat(heads, axis=2), params[f"{prefix}.wo"])


# ---------------------------------------------------------------------------
# DNN-LADD: per-date regression from calendar context, no target history.
# ---------------------------------------------------------------------------


def dnn_ladd_init(cfg: NeuralConfig, n_features: int, n_stations: int, rng) -> ParamStore:
    params = ParamStore()
    eh = cfg.embed_dim  # BiLSTM width tied to the embedding width
    _add_lstm(params, "ladd.fwd", n_features, eh, rng)
    _add_lstm(params, "ladd.bwd", n_features, eh, rng)
    _add_embeddings(params, n_stations, cfg.embed_dim, rng)
    trunk_in = 2 * eh + 4 * cfg.embed_dim + N_DENSE
    _add_linear(params, "fc1", trunk_in, cfg.hidden_dim, rng)
    _add_linear(params, "fc2", cfg.hidden_dim, cfg.hidden_dim, rng)
    _add_linear(params, "head", cfg.hidden_dim, 1, rng)
    return params


def dnn_ladd_forward(
    params: ParamStore, batch: SampleBatch, cfg: NeuralConfig, dropout_rng=None
) -> Tensor:
    """[B, 1] predictions; every sample independent of the others."""
    encoding = _bilstm_encoding(params, "ladd", Tensor(batch.ladd), cfg.embed_dim)
    embeds = _gather_embeddings(params, batch.cats)
    x = ad.concat([encoding, embeds, Tensor(batch.dense)], axis=1)
    h = _dropout(ad.relu(_linear(params, "fc1", x)), cfg.dropout, dropout_rng)
    h = _dropout(ad.relu(_linear(params, "fc2", h)), cfg.dropout, dropout_rng)
    return _linear(params, "head", h)


# ---------------------------------------------------------------------------
# NBEATS with context conditioning: residual fully-connected blocks over
# the scaled history, context vector appended to every block input.
# ---------------------------------------------------------------------------


def nbeats_init(cfg: NeuralConfig, n_features: int, n_stations: int, horizon: int, rng) -> ParamStore:
    params = ParamStore()
    eh = cfg.embed_dim
    _add_lstm(params, "ladd.fwd", n_features, eh, rng)
    _add_lstm(params, "ladd.bwd", n_features, eh, rng)
    _add_embeddings(params, n_stations, cfg.embed_dim, rng)
    # dense-feature attention pooling: one token per dense statistic
    params.add("dtok.w", glorot_uniform(rng, N_DENSE, cfg.embed_dim))
    params.add("dtok.b", np.zeros((N_DENSE, cfg.embed_dim)))
    for nm in ("wq", "wk", "wv"):
        params.add(f"dattn.{nm}", glorot_uniform(rng, cfg.embed_dim, cfg.embed_dim))
    context_dim = 2 * eh + 4 * cfg.embed_dim + cfg.embed_dim
    block_in = cfg.lookback + context_dim
    for b in range(cfg.n_stacks * cfg.n_blocks):
        _add_linear(params, f"block{b}.fc1", block_in, cfg.hidden_dim, rng)
        _add_linear(params, f"block{b}.fc2", cfg.hidden_dim, cfg.hidden_dim, rng)
        _add_linear(params, f"block{b}.backcast", cfg.hidden_dim, cfg.lookback, rng)
        _add_linear(params, f"block{b}.forecast", cfg.hidden_dim, horizon, rng)
    return params


def _dense_attention_pool(params: ParamStore, dense: np.ndarray) -> Tensor:
    batch = dense.shape[0]
    raw = ad.reshape(Tensor(dense), (batch, N_DENSE, 1))
    tokens = ad.add(ad.mul(raw, params["dtok.w"]), params["dtok.b"])  # [B, D, E]
    pooled = ad.scaled_dot_attention(
        ad.matmul(tokens, params["dattn.wq"]),
        ad.matmul(tokens, params["dattn.wk"]),
        ad.matmul(tokens, params["dattn.wv"]),
    )
    return ad.tensor_mean(pooled, axis=1)


def nbeats_forward(
    params: ParamStore, batch: SampleBatch, cfg: NeuralConfig, dropout_rng=None
) -> tuple[Tensor, list[Tensor]]:
    """Returns (total forecast [B, H], per-block forecasts).

    The total is literally the sum of the block forecasts; each block
    subtracts its backcast from the running history residual while the
    context positions pass through unchanged.
    """
    if batch.history is None:
        raise ShapeError("nbeats: batch lacks history windows")
    encoding = _bilstm_encoding(params, "ladd", Tensor(batch.ladd), cfg.embed_dim)
    embeds = _gather_embeddings(params, batch.cats)
    pooled = _dense_attention_pool(params, batch.dense)
    context = ad.concat([encoding, embeds, pooled], axis=1)
    residual = Tensor(batch.history)
    block_forecasts: list[Tensor] = []
    total: Tensor | None = None
    for b in range(cfg.n_stacks * cfg.n_blocks):
        x = ad.concat([residual, context], axis=1)
        h = _dropout(ad.relu(_linear(params, f"block{b}.fc1", x)), cfg.dropout, dropout_rng)
        h = _dropout(ad.relu(_linear(params, f"block{b}.fc2", h)), cfg.dropout, dropout_rng)
        backcast = _linear(params, f"block{b}.backcast", h)
        forecast = _linear(params, f"block{b}.forecast", h)
        residual = ad.sub(residual, backcast)
        block_forecasts.append(forecast)
        total = forecast if total is None else ad.add(total, forecast)
    return total, block_forecasts


# ---------------------------------------------------------------------------
# Simplified TFT: LSTM encoder over the past, LSTM decoder over known
# future features, causal multi-head self-attention, gated residual.
# ---------------------------------------------------------------------------


def tft_init(cfg: NeuralConfig, n_features: int, n_stations: int, rng) -> ParamStore:
    params = ParamStore()
    _add_embeddings(params, n_stations, cfg.embed_dim, rng)
    _add_linear(params, "static", 2 * cfg.embed_dim, cfg.hidden_dim, rng)
    _add_linear(params, "past_in", n_features + 1, cfg.hidden_dim, rng)
    _add_linear(params, "future_in", n_features, cfg.hidden_dim, rng)
    _add_lstm(params, "encoder", cfg.hidden_dim, cfg.hidden_dim, rng)
    _add_lstm(params, "decoder", cfg.hidden_dim, cfg.hidden_dim, rng)
    for nm in ("wq", "wk", "wv", "wo"):
        params.add(f"attn.{nm}", glorot_uniform(rng, cfg.hidden_dim, cfg.hidden_dim))
    params.add("gate", np.zeros(cfg.hidden_dim))
    _add_linear(params, "head", cfg.hidden_dim, 1, rng)
    return params


def tft_forward(
    params: ParamStore, batch: SampleBatch, cfg: NeuralConfig, dropout_rng=None
) -> Tensor:
    """[B, H] one-shot forecast over the decoder horizon."""
    if batch.history is None or batch.past_feats is None or batch.future_feats is None:
        raise ShapeError("tft: batch lacks history/past/future features")
    b, lookback = batch.history.shape
    horizon = batch.future_feats.shape[1]

    static_src = ad.concat(
        [
            ad.embedding_gather(params["emb.origin"], batch.cats[:, 0]),
            ad.embedding_gather(params["emb.destination"], batch.cats[:, 1]),
        ],
        axis=1,
    )
    static = ad.reshape(_linear(params, "static", static_src), (b, 1, cfg.hidden_dim))

    past = ad.concat([ad.reshape(Tensor(batch.history), (b, lookback, 1)), Tensor(batch.past_feats)], axis=2)
    past = ad.add(_linear(params, "past_in", past), static)
    enc_steps, h, c = _lstm_scan(params, "encoder", past, cfg.hidden_dim)

    future = ad.add(_linear(params, "future_in", Tensor(batch.future_feats)), static)
    dec_steps, _, _ = _lstm_scan_from(params, "decoder", future, cfg.hidden_dim, h, c)

    seq = _stack_steps(enc_steps + dec_steps)
    attended = _multi_head_attention(params, "attn", seq, cfg.n_heads)
    attn_dec = ad.slice_axis(attended, 1, lookback, lookback + horizon)
    dec_seq = _stack_steps(dec_steps)
    gate = ad.sigmoid(params["gate"])
    mixed = ad.add(ad.mul(gate, attn_dec), ad.mul(ad.sub(1.0, gate), dec_seq))
    mixed = _dropout(mixed, cfg.dropout, dropout_rng)
    out = _linear(params, "head", mixed)  # [B, H, 1]
    return ad.reshape(out, (b, horizon))
