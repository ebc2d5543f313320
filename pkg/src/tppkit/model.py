"""An encoder, a decoder and (except for CP) a mixed-in Poisson base rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ad
from .decoders import DECODER_CLASSES, BaseIntensity, DecoderOutput, McIntegrator
from .encoders import EventEncoder
from .errors import ValidationError
from .likelihood import IntervalOutputs

ENCODERS = ("gru", "sa")
QUERY_TIMES = ("absolute", "relative")


@dataclass
class ModelConfig:
    num_marks: int
    encoder: str = "gru"
    decoder: str = "mlp-mc"
    hidden: int = 8
    layers: int = 1
    heads: int = 1
    beta_hat: float = 1.0
    multilabel: bool = False
    mc_samples: int = 50
    eval_mc_samples: int = 1000
    lnm_components: int = 4
    pooling: str = "mean"
    query_time: str = "absolute"
    seed: int = 0

    def validate(self):
        if self.encoder not in ENCODERS:
            raise ValidationError(f"encoder: expected one of {ENCODERS}, got {self.encoder!r}")
        if self.decoder not in DECODER_CLASSES:
            raise ValidationError(
                f"decoder: expected one of {tuple(DECODER_CLASSES)}, got {self.decoder!r}")
        if self.query_time not in QUERY_TIMES:
            raise ValidationError(f"query_time: expected one of {QUERY_TIMES}")
        for key in ("num_marks", "hidden", "layers", "heads", "mc_samples",
                    "eval_mc_samples", "lnm_components"):
            if int(getattr(self, key)) < 1:
                raise ValidationError(f"{key}: must be a positive integer")
        if self.hidden % 2:
            raise ValidationError("hidden: must be even for the temporal encoding")
        if self.hidden % self.heads:
            raise ValidationError("hidden: must be divisible by heads")
        if not self.beta_hat > 0 or not np.isfinite(self.beta_hat):
            raise ValidationError("beta_hat: must be positive and finite")
        return self

    def to_dict(self):
        return asdict(self)


class TPPModel:
    def __init__(self, cfg):
        self.cfg = cfg.validate()
        self.num_marks = cfg.num_marks
        self.multilabel = cfg.multilabel
        self.store = ad.ParamStore(cfg.seed)
        d = cfg.hidden
        self.encoder = EventEncoder(self.store, cfg.encoder, cfg.num_marks, d, cfg.beta_hat,
                                    heads=cfg.heads, layers=cfg.layers, pooling=cfg.pooling)
        self.decoder = DECODER_CLASSES[cfg.decoder](
            self.store, cfg.num_marks, d, beta_hat=cfg.beta_hat, heads=cfg.heads,
            multilabel=cfg.multilabel, components=cfg.lnm_components,
            query_time=cfg.query_time)
        self.base = None
        if cfg.decoder != "cp":
            self.base = BaseIntensity(self.store, cfg.num_marks,
                                      rate=1.0 / (cfg.beta_hat * cfg.num_marks))

    @property
    def params(self):
        return self.store

    def _layer_norms(self):
        return self.decoder.layer_norms() if hasattr(self.decoder, "layer_norms") else []

    def query(self, batch, t, train=False, rng=None, samples=None, with_big=True):
        """Decoder output at query times ``t`` (B, J, Q), interval j by interval j."""
        z, enc_attention = self.encoder(batch)
        n = samples or (self.cfg.mc_samples if train else self.cfg.eval_mc_samples)
        out = self.decoder(z, t, batch.starts, integ=McIntegrator(n), rng=rng, train=train,
                           with_big=with_big)
        if self.base is not None:
            out = self.base.mix(out, np.asarray(t) - batch.starts[..., None])
        return out, enc_attention

    def interval_outputs(self, batch, train=False, rng=None, samples=None):
        out, enc_attention = self.query(batch, batch.ends[..., None], train, rng, samples)
        B, J = batch.ends.shape
        M = self.num_marks

        def squeeze(x):
            return None if x is None else ad.reshape(x, (B, J, M))

        attention = {"encoder": enc_attention}
        if out.attention is not None:
            attention["decoder"] = out.attention
        return IntervalOutputs(squeeze(out.lam), squeeze(out.big_lam), squeeze(out.log_lam),
                               attention)

    def intensity_on_grid(self, seq, grid):
        """Per-mark intensity at each grid time inside the window, shape (len(grid), M)."""
        from .likelihood import Batch

        grid = np.asarray(grid, dtype=np.float64)
        batch = Batch.from_sequences([seq], self.num_marks)
        # interval j holds the grid times in (t_j, t_{j+1}]; the first interval also owns w-
        owner = np.searchsorted(seq.times, grid, side="left")
        J = batch.num_intervals
        width = max(1, int(np.bincount(owner, minlength=J).max()))
        t = np.repeat(batch.starts[..., None], width, axis=-1)
        slots = np.zeros(len(grid), dtype=int)
        for j in range(J):
            idx = np.nonzero(owner == j)[0]
            t[0, j, :len(idx)] = grid[idx]
            slots[idx] = np.arange(len(idx))
        out, _ = self.query(batch, t, samples=1, with_big=self.decoder.cumulative)
        return out.lam.value[0, owner, slots, :]

    def state(self):
        return {"params": {k: v.tolist() for k, v in self.store.state_dict().items()},
                "layer_norms": [ln.state() for ln in self._layer_norms()]}

    def load_state(self, state):
        self.store.load_state_dict({k: np.asarray(v) for k, v in state["params"].items()})
        for ln, st in zip(self._layer_norms(), state.get("layer_norms", [])):
            ln.load_state(st)


def build_model(num_marks, **kwargs):
    return TPPModel(ModelConfig(num_marks=num_marks, **kwargs))


__all__ = ["ModelConfig", "TPPModel", "build_model", "DecoderOutput"]
