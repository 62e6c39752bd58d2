"""Scikit-learn style wrapper around model, training and chunked inference."""

from __future__ import annotations

from ..base import BaseReconstructor, check_dataset, check_is_fitted, check_snapshot_split
from ..data import Dataset
from .checkpoint import Checkpoint
from .inference import reconstruct_chunked
from .model import ModelConfig, RFormer
from .training import TrainConfig, train


class RFormerReconstructor(BaseReconstructor):
    """Transformer reconstruction operator.

    Parameters
    ----------
    num_layers, num_heads, d_token, ffn_hidden, head_hidden, max_seq_len : int
        Architecture, see :class:`~fieldrecon.rformer.model.ModelConfig`.
    epochs, batch_size, m_b, n_b, lr, obs_fraction, seed, strict
        Training, see :class:`~fieldrecon.rformer.training.TrainConfig`.
    chunk_budget : int or None
        Queries per forward pass at prediction time.
    max_context : int or None
        Cap on the observations fed to the model at prediction time.
    """

    requires_fit = True

    def __init__(self, num_layers=4, num_heads=8, d_token=128, ffn_hidden=128, head_hidden=128,
                 max_seq_len=1024, epochs=100, batch_size=16, m_b=256, n_b=256, lr=1e-3,
                 obs_fraction=0.02, samples_per_snapshot=None, noise_scale=0.0, seed=0,
                 strict=False, chunk_budget=None, max_context=None):
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.d_token = d_token
        self.ffn_hidden = ffn_hidden
        self.head_hidden = head_hidden
        self.max_seq_len = max_seq_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.m_b = m_b
        self.n_b = n_b
        self.lr = lr
        self.obs_fraction = obs_fraction
        self.samples_per_snapshot = samples_per_snapshot
        self.noise_scale = noise_scale
        self.seed = seed
        self.strict = strict
        self.chunk_budget = chunk_budget
        self.max_context = max_context

    def fit(self, train_set: Dataset | None = None, checkpoint_path=None):
        check_dataset(train_set)
        cfg = ModelConfig(self.num_layers, self.num_heads, self.d_token, self.ffn_hidden,
                          self.head_hidden, self.max_seq_len, train_set.d_x, train_set.d_v)
        self.model_ = RFormer(cfg, seed=self.seed)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, obs_fraction=self.obs_fraction,
                           m_b=self.m_b, n_b=self.n_b, lr=self.lr, seed=self.seed,
                           samples_per_snapshot=self.samples_per_snapshot,
                           noise_scale=self.noise_scale, strict=self.strict)
        self.checkpoint_ = train(self.model_, train_set, tcfg, checkpoint_path=checkpoint_path)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **kw) -> "RFormerReconstructor":
        c = ckpt.config
        est = cls(num_layers=c.num_layers, num_heads=c.num_heads, d_token=c.d_token,
                  ffn_hidden=c.ffn_hidden, head_hidden=c.head_hidden, max_seq_len=c.max_seq_len, **kw)
        est.model_ = RFormer(c, params=ckpt.params)
        est.checkpoint_ = ckpt
        return est

    def reconstruct(self, snap, split):
        check_is_fitted(self, "model_")
        check_snapshot_split(snap, split)
        return reconstruct_chunked(self.model_, snap, split, self.checkpoint_.stats,
                                   chunk_budget=self.chunk_budget, max_context=self.max_context)

    def predict(self, snap, split):
        return self.reconstruct(snap, split)[split.query]
