"""Instance-query decoder with scatter/gather, plus a point-query baseline.

The instance-query ("sgq") decoder keeps one content vector per map element.
Each layer runs self-attention over the N instance queries, replicates every
result into n positional copies, adds positional embeddings generated from
that instance's reference points, cross-attends into the BEV features, and
fuses the copies back into one instance query with an MLP.  Class logits are
predicted once per instance, so points of one element can never disagree
about their label.

The baseline decoder drives N*n independent point queries through the same
cross-attention machinery; its self-attention runs over all N*n queries and
its class logits come from the mean of each instance's point queries.  It
exists for cost and quality comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import (Linear, LayerNorm, MLP, MultiHeadAttention, ParamStore,
                 sinusoidal_embed, split_heads, merge_heads)
from .tensor import ALLOC, Tensor

NUM_FOREGROUND = 3
NUM_LOGITS = NUM_FOREGROUND + 1      # foreground classes + background

INSTANCE_PE_MODES = ("none", "bbox", "center", "learnable")


@dataclass
class DecoderConfig:
    num_instances: int = 100         # queries per group
    num_points: int = 20             # positional copies per instance
    dim: int = 256
    layers: int = 6
    heads: int = 8
    ffn_dim: int = 0                 # 0 -> 2*dim
    cross_window: int = -1           # -1 dense attention, >=0 window radius
    instance_pe: str = "none"
    mode: str = "sgq"                # "sgq" | "point_query"
    pe_temperature: float = 20.0
    bev_rows: int = 64
    bev_cols: int = 32
    aux_queries: int = 0             # extra one-to-many group size (0 = off)

    def validate(self):
        if self.dim % 4 != 0:
            raise ValueError(f"dim must be divisible by 4, got {self.dim}")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.instance_pe not in INSTANCE_PE_MODES:
            raise ValueError(f"instance_pe must be one of {INSTANCE_PE_MODES}")
        if self.mode not in ("sgq", "point_query"):
            raise ValueError(f"unknown decoder mode {self.mode!r}")
        if self.layers < 1:
            raise ValueError("need at least one decoder layer")

    @property
    def hidden(self) -> int:
        return self.ffn_dim if self.ffn_dim else 2 * self.dim


@dataclass
class DecoderState:
    queries: Tensor                  # (Q, dim) content vectors
    refs: Tensor                     # (Q_inst, n, 2) normalized reference points
    layer_index: int = 0


@dataclass
class LayerPrediction:
    logits: Tensor                   # (Q_inst, NUM_LOGITS)
    points: Tensor                   # (Q_inst, n, 2) normalized


def _lattice(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Initial reference points: instance centers on a uniform lattice over
    [0.1, 0.9]^2, each instance's n points spread on a short horizontal run."""
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    xs = np.linspace(0.1, 0.9, cols)
    ys = np.linspace(0.1, 0.9, rows)
    centers = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)[:count]
    spread = np.linspace(-0.04, 0.04, n)
    refs = np.zeros((count, n, 2))
    refs[:, :, 0] = centers[:, None, 0] + spread
    refs[:, :, 1] = centers[:, None, 1]
    _ = rng
    return np.clip(refs, 0.1, 0.9)


class SetDecoder:
    """Weights and forward passes for both decoder modes."""

    def __init__(self, cfg: DecoderConfig, store: ParamStore,
                 name: str = "decoder"):
        cfg.validate()
        self.cfg = cfg
        self.store = store
        n, d = cfg.num_points, cfg.dim
        per_point = cfg.mode == "point_query"
        q_rows = cfg.num_instances * (n if per_point else 1)
        self.query_table = store.normal(f"{name}.queries", (q_rows, d), std=0.02)
        self.ref_table = store.add(f"{name}.refs",
                                   _lattice(cfg.num_instances, n, store.rng))
        if cfg.aux_queries:
            aux_rows = cfg.aux_queries * (n if per_point else 1)
            self.aux_query_table = store.normal(f"{name}.aux_queries",
                                                (aux_rows, d), std=0.02)
            self.aux_ref_table = store.add(f"{name}.aux_refs",
                                           _lattice(cfg.aux_queries, n, store.rng))
        if cfg.instance_pe == "learnable":
            self.instance_pe_table = store.normal(f"{name}.instance_pe",
                                                  (q_rows, d), std=0.02)
        self.key_pe = Tensor(self._cell_coords().astype(np.float32))
        self.layers = []
        for i in range(cfg.layers):
            ln = f"{name}.{i}"
            layer = {
                "sa": MultiHeadAttention(store, f"{ln}.sa", d, cfg.heads),
                "sa_norm": LayerNorm(store, f"{ln}.sa_norm", d),
                "pe_lp": Linear(store, f"{ln}.pe_lp", d, d),
                "ca_q": Linear(store, f"{ln}.ca_q", d, d),
                "ca_k": Linear(store, f"{ln}.ca_k", d, d),
                "ca_v": Linear(store, f"{ln}.ca_v", d, d),
                "ca_o": Linear(store, f"{ln}.ca_o", d, d),
                "ca_norm": LayerNorm(store, f"{ln}.ca_norm", d),
                "ffn1": Linear(store, f"{ln}.ffn1", d, cfg.hidden),
                "ffn2": Linear(store, f"{ln}.ffn2", cfg.hidden, d),
                "ffn_norm": LayerNorm(store, f"{ln}.ffn_norm", d),
                "cls": MLP(store, f"{ln}.cls", [d, d, NUM_LOGITS]),
                "norm_out": LayerNorm(store, f"{ln}.norm_out", d),
            }
            if per_point:
                layer["pts"] = MLP(store, f"{ln}.pts", [d, d, 2])
            else:
                layer["gather"] = MLP(store, f"{ln}.gather", [n * d, d, d])
                layer["pts"] = MLP(store, f"{ln}.pts", [d, d, n * 2])
            if cfg.instance_pe in ("bbox", "center"):
                coords = 4 if cfg.instance_pe == "bbox" else 2
                layer["ipe_lp"] = Linear(store, f"{ln}.ipe_lp", d, d)
                layer["ipe_coords"] = coords
            self.layers.append(layer)

    # ------------------------------------------------------------------
    def _cell_coords(self) -> np.ndarray:
        """Normalized (cells, 2) BEV cell centers, row-major like F_bev."""
        cfg = self.cfg
        xs = (np.arange(cfg.bev_cols) + 0.5) / cfg.bev_cols
        ys = (np.arange(cfg.bev_rows) + 0.5) / cfg.bev_rows
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1).reshape(-1, 2)

    def init_state(self, group: str = "main") -> DecoderState:
        if group == "main":
            return DecoderState(self.query_table, self.ref_table, 0)
        if group == "aux":
            if not self.cfg.aux_queries:
                raise ValueError("decoder built without an aux query group")
            return DecoderState(self.aux_query_table, self.aux_ref_table, 0)
        raise ValueError(f"unknown query group {group!r}")

    def positional_embed(self, refs: Tensor) -> Tensor:
        """(Q, n, 2) reference points -> (Q, n, dim) sinusoidal embedding.

        First half of the output encodes x, second half y; the learnable
        projection is applied per decoder layer, not here.
        """
        cfg = self.cfg
        return sinusoidal_embed(refs, cfg.dim // 2, cfg.pe_temperature)

    def _instance_pe(self, layer: dict, refs: Tensor) -> Tensor | None:
        mode = self.cfg.instance_pe
        if mode == "none":
            return None
        if mode == "learnable":
            return self.instance_pe_table
        centers = T.reduce_mean(refs, axis=1)          # (Q, 2)
        if mode == "center":
            coords = centers
        else:
            lo = Tensor(refs.data.min(axis=1))         # bbox from current refs;
            hi = Tensor(refs.data.max(axis=1))         # treated as constants
            size = T.sub(hi, lo)
            coords = T.concat([centers, size], axis=-1)
        dim_per = self.cfg.dim // coords.shape[-1]
        emb = sinusoidal_embed(coords, dim_per, self.cfg.pe_temperature)
        return layer["ipe_lp"](emb)

    # ------------------------------------------------------------------
    def _cross_attention(self, layer: dict, queries: Tensor, refs_flat: Tensor,
                         fbev: Tensor) -> Tensor:
        """Multi-head cross-attention of (M, dim) queries into BEV features.

        Dense mode scores every query against every BEV cell.  Window mode
        bilinearly samples key/value maps at a (2r+1)^2 tap grid around each
        query's reference point, the locality emulation used for benchmarks.
        """
        cfg = self.cfg
        h, d = cfg.heads, cfg.dim
        dh = d // h
        key_in = T.add(fbev, layer["ca_kpe"]) if "ca_kpe" in layer else fbev
        q = layer["ca_q"](queries)
        if cfg.cross_window < 0:
            k = split_heads(layer["ca_k"](key_in), h)
            v = split_heads(layer["ca_v"](fbev), h)
            attended = T.scaled_dot_attention(split_heads(q, h), k, v)
            return layer["ca_o"](merge_heads(attended))
        # window mode
        r = cfg.cross_window
        taps = [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1)]
        taps = np.asarray(taps, dtype=np.float32)
        k_grid = T.reshape(layer["ca_k"](key_in),
                           (cfg.bev_rows, cfg.bev_cols, d))
        v_grid = T.reshape(layer["ca_v"](fbev),
                           (cfg.bev_rows, cfg.bev_cols, d))
        m = refs_flat.shape[0]
        cell_rc = T.concat([
            T.sub(T.mul(refs_flat[:, 1:2], Tensor(np.float32(cfg.bev_rows))),
                  Tensor(np.float32(0.5))),
            T.sub(T.mul(refs_flat[:, 0:1], Tensor(np.float32(cfg.bev_cols))),
                  Tensor(np.float32(0.5))),
        ], axis=1)
        tap_coords = T.reshape(T.add(T.replicate_rows(cell_rc, len(taps)),
                                     Tensor(taps)), (m * len(taps), 2))
        k_taps = T.reshape(T.bilinear_sample(k_grid, tap_coords),
                           (m, len(taps), h, dh))
        v_taps = T.reshape(T.bilinear_sample(v_grid, tap_coords),
                           (m, len(taps), h, dh))
        k_taps = T.transpose(k_taps, (0, 2, 1, 3))      # (M, h, taps, dh)
        v_taps = T.transpose(v_taps, (0, 2, 1, 3))
        q_heads = T.reshape(q, (m, 1, h, dh))
        q_heads = T.transpose(q_heads, (0, 2, 1, 3))    # (M, h, 1, dh)
        scores = T.mul(T.matmul(q_heads, T.transpose(k_taps, (0, 1, 3, 2))),
                       Tensor(np.float32(1.0 / np.sqrt(dh))))
        weights = T.softmax(scores, axis=-1)
        attended = T.matmul(weights, v_taps)            # (M, h, 1, dh)
        attended = T.reshape(T.transpose(attended, (0, 2, 1, 3)), (m, d))
        return layer["ca_o"](attended)

    def _attach_key_pe(self, layer: dict):
        """Key positional embedding, recomputed per layer so keys carry
        location information through each projection."""
        emb = sinusoidal_embed(self.key_pe, self.cfg.dim // 2,
                               self.cfg.pe_temperature)
        layer["ca_kpe"] = emb

    # ------------------------------------------------------------------
    def decoder_layer(self, layer: dict, state: DecoderState, fbev: Tensor,
                      trace: list | None = None):
        if self.cfg.mode == "sgq":
            return self._sgq_layer(layer, state, fbev, trace)
        return self._point_query_layer(layer, state, fbev, trace)

    def _sgq_layer(self, layer: dict, state: DecoderState, fbev: Tensor,
                   trace: list | None):
        cfg = self.cfg
        n, d = cfg.num_points, cfg.dim
        count = state.queries.shape[0]
        q = state.queries
        ipe = self._instance_pe(layer, state.refs)
        sa_q = T.add(q, ipe) if ipe is not None else q
        attended = layer["sa"](sa_q, sa_q, q, self_attention=True)
        x = layer["sa_norm"](T.add(q, attended))
        scattered = T.replicate_rows(x, n)                  # (Q, n, d)
        if trace is not None:
            trace.append({"scattered_pre_pe": scattered.data.copy()})
        pe = layer["pe_lp"](self.positional_embed(state.refs))
        s_in = T.reshape(T.add(scattered, pe), (count * n, d))
        self._attach_key_pe(layer)
        ca = self._cross_attention(layer, s_in,
                                   T.reshape(state.refs, (count * n, 2)), fbev)
        y = layer["ca_norm"](T.add(s_in, ca))
        f = layer["ffn_norm"](T.add(y, layer["ffn2"](T.relu(layer["ffn1"](y)))))
        gathered = layer["norm_out"](layer["gather"](
            T.reshape(f, (count, n * d))))
        logits = layer["cls"](gathered)
        offsets = T.reshape(layer["pts"](gathered), (count, n, 2))
        new_refs = T.sigmoid(T.add(T.inverse_sigmoid(state.refs), offsets))
        new_state = DecoderState(gathered, new_refs, state.layer_index + 1)
        return new_state, LayerPrediction(logits, new_refs)

    def _point_query_layer(self, layer: dict, state: DecoderState,
                           fbev: Tensor, trace: list | None):
        cfg = self.cfg
        n, d = cfg.num_points, cfg.dim
        count = state.refs.shape[0]                         # instances
        q = state.queries                                   # (count*n, d)
        pe = T.reshape(layer["pe_lp"](self.positional_embed(state.refs)),
                       (count * n, d))
        sa_q = T.add(q, pe)
        attended = layer["sa"](sa_q, sa_q, q, self_attention=True)
        x = layer["sa_norm"](T.add(q, attended))
        if trace is not None:
            trace.append({"point_queries": x.data.copy()})
        s_in = T.add(x, pe)
        self._attach_key_pe(layer)
        ca = self._cross_attention(layer, s_in,
                                   T.reshape(state.refs, (count * n, 2)), fbev)
        y = layer["ca_norm"](T.add(s_in, ca))
        f = layer["ffn_norm"](T.add(y, layer["ffn2"](T.relu(layer["ffn1"](y)))))
        f = layer["norm_out"](f)
        instance_feat = T.reduce_mean(T.reshape(f, (count, n, d)), axis=1)
        logits = layer["cls"](instance_feat)
        offsets = T.reshape(layer["pts"](f), (count, n, 2))
        new_refs = T.sigmoid(T.add(T.inverse_sigmoid(state.refs), offsets))
        new_state = DecoderState(f, new_refs, state.layer_index + 1)
        return new_state, LayerPrediction(logits, new_refs)

    def decode(self, state: DecoderState, fbev: Tensor,
               trace: list | None = None) -> list[LayerPrediction]:
        """Run all layers, threading refined reference points; returns one
        prediction set per layer (last is the final output)."""
        preds = []
        for layer in self.layers:
            state, pred = self.decoder_layer(layer, state, fbev, trace)
            preds.append(pred)
        return preds


def predictions_to_numpy(pred: LayerPrediction):
    """Final-layer tensors -> (class ids, confidences, points, probs)."""
    probs = _softmax_np(pred.logits.data)
    fg = probs[:, :NUM_FOREGROUND]
    class_ids = fg.argmax(axis=1)
    confidence = fg.max(axis=1)
    return class_ids, confidence, pred.points.data.copy(), probs


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
