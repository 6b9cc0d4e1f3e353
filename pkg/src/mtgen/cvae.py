"""Conditional VAE stages and the two-stage generator built from them.

Stage 1 maps images ``x`` to latent codes ``z``; stage 2 is trained on the
stage-1 posterior means and maps them to ``u``. New images come from
``decode_1(decode_2(u, c), c)``.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import diffnum as dn
from ._validation import check_images, check_labels, check_random_state
from .datasets import BatchIterator
from .errors import NonFiniteError, ParameterError, TrainingDivergedError, UsageError

LOGVAR_LIMIT = 10.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EncoderOutput:
    mu: dn.Tensor
    logvar: dn.Tensor


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    stage: int
    condition: int


class CvaeStage(dn.Module):
    """One conditional VAE: dense encoder/decoder, one-hot condition, trainable gamma.

    The condition is concatenated to the encoder input and to the decoder's
    latent input. Stage-1 decoders end in a sigmoid (pixels in [0, 1]); stage-2
    decoders are linear.
    """

    def __init__(self, input_dim, latent_dim, num_classes, hidden=(256, 256), stage=1, rng=None):
        if stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {stage}")
        if latent_dim < 1 or input_dim < 1 or num_classes < 1:
            raise ParameterError("input_dim, latent_dim and num_classes must be positive")
        rng = check_random_state(rng)
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.num_classes = int(num_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.stage = stage
        self.trunk = dn.MLP([input_dim + num_classes, *self.hidden], rng, output_activation="relu")
        self.mu_head = dn.Dense(self.hidden[-1], latent_dim, rng)
        self.logvar_head = dn.Dense(self.hidden[-1], latent_dim, rng)
        self.decoder = dn.MLP([latent_dim + num_classes, *self.hidden[::-1], input_dim], rng,
                              output_activation="sigmoid" if stage == 1 else "linear")
        self.log_gamma = dn.parameter(np.zeros(()))

    @property
    def gamma(self):
        return float(np.exp(self.log_gamma.data))

    def _condition(self, c, n):
        c = check_labels(c, n, self.num_classes)
        return dn.one_hot(c, self.num_classes)

    def encode(self, x, c):
        x = dn.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise dn.DimensionError(f"encoder expects [batch, {self.input_dim}], got {x.shape}")
        h = self.trunk(dn.concat([x, self._condition(c, x.shape[0])], axis=1))
        logvar = dn.clamp(self.logvar_head(h), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        return EncoderOutput(self.mu_head(h), logvar)

    def decode(self, z, c):
        z = dn.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise dn.DimensionError(f"decoder expects [batch, {self.latent_dim}], got {z.shape}")
        return self.decoder(dn.concat([z, self._condition(c, z.shape[0])], axis=1))

    def metadata(self):
        return {
            "kind": "cvae_stage",
            "stage": self.stage,
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "gamma": self.gamma,
        }

    def save(self, path, **extra):
        dn.checkpoint.save(path, self.state_dict(), {**self.metadata(), **extra})

    def to_bytes(self, **extra):
        return dn.checkpoint.dumps(self.state_dict(), {**self.metadata(), **extra})

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        if meta.get("kind") != "cvae_stage":
            raise UsageError(f"checkpoint holds {meta.get('kind')!r}, not a cvae stage")
        stage = cls(meta["input_dim"], meta["latent_dim"], meta["num_classes"],
                    hidden=meta["hidden"], stage=meta["stage"], rng=0)
        stage.load_state_dict(tensors)
        return stage

    @classmethod
    def load(cls, path):
        return cls.from_checkpoint(*dn.checkpoint.load(path))


def encode(x, c, stage):
    with dn.no_grad():
        return stage.encode(x, c)


def reparameterize(enc, eps):
    """``mu + exp(logvar / 2) * eps``; ``eps`` is a constant."""
    eps = np.asarray(eps)
    if eps.shape != enc.mu.shape:
        raise dn.DimensionError(f"eps shape {eps.shape} != mu shape {enc.mu.shape}")
    return enc.mu + dn.exp(enc.logvar * 0.5) * dn.Tensor(eps)


def decode(code, c, stage):
    """Decode a single :class:`LatentCode`, checking it belongs to ``stage``."""
    if code.stage != stage.stage:
        raise UsageError(f"stage-{code.stage} code given to a stage-{stage.stage} decoder")
    values = np.asarray(code.values, dtype=dn.get_dtype()).reshape(1, -1)
    if values.shape[1] != stage.latent_dim:
        raise dn.DimensionError(f"code length {values.shape[1]} != latent_dim {stage.latent_dim}")
    with dn.no_grad():
        return stage.decode(values, [c]).data[0]


def kl_gaussian(enc):
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = enc.mu, enc.logvar
    per_dim = dn.square(mu) + dn.exp(logvar) - 1.0 - logvar
    return per_dim.sum(axis=1).mean() * 0.5


def gaussian_nll(x, x_hat, log_gamma):
    """Batch mean of ``-log N(x | x_hat, gamma I)`` with ``gamma = exp(log_gamma)``."""
    x = dn.as_tensor(x)
    d = x.shape[1]
    sq = dn.square(x - x_hat).sum(axis=1).mean()
    return (log_gamma + _LOG_2PI) * (d / 2.0) + sq * 0.5 / dn.exp(log_gamma)


def vae_loss(x, c, stage, rng=None, eps=None):
    """Return ``(total, recon_term, kl_term)`` as scalar tensors.

    Noise for the reparameterisation comes from ``eps`` when given, else from
    ``rng``.
    """
    x = dn.as_tensor(x)
    if x.shape[0] == 0:
        raise UsageError("vae_loss needs a nonempty batch")
    enc = stage.encode(x, c)
    if eps is None:
        eps = check_random_state(rng).standard_normal(enc.mu.shape)
    z = reparameterize(enc, eps)
    recon = gaussian_nll(x, stage.decode(z, c), stage.log_gamma)
    kl = kl_gaussian(enc)
    return recon + kl, recon, kl


@dataclass
class StageConfig:
    latent_dim: int = 8
    hidden: tuple = (256, 256)
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiplicative, applied after each epoch


@dataclass
class TrainingHistory:
    initial_loss: float = float("nan")
    total: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    gamma: list = field(default_factory=list)

    def rows(self):
        for i, values in enumerate(zip(self.total, self.recon, self.kl, self.gamma)):
            yield (i, *values)


def train_stage(inputs, labels, num_classes, config=None, rng=None, stage=1, checkpoint_path=None):
    """Fit a :class:`CvaeStage` to ``inputs`` ``[n, D]`` conditioned on ``labels``.

    Returns ``(stage, history)``. Raises :class:`TrainingDivergedError` if a
    loss or gradient becomes non-finite.
    """
    config = config or StageConfig()
    rng = check_random_state(rng)
    inputs = np.asarray(inputs, dtype=dn.get_dtype())
    labels = check_labels(labels, inputs.shape[0], num_classes)
    if inputs.shape[0] == 0:
        raise UsageError("cannot train on an empty set")
    init_rng, batch_seed, noise_rng = rng.spawn(3)
    model = CvaeStage(inputs.shape[1], config.latent_dim, num_classes, config.hidden, stage, init_rng)
    params = model.parameters()
    opt = dn.Adam(params, lr=config.lr)
    batches = BatchIterator(inputs.shape[0], config.batch_size, seed=batch_seed.integers(2**63))
    history = TrainingHistory()
    with dn.no_grad():
        history.initial_loss = float(vae_loss(inputs, labels, model, noise_rng)[0].data)
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for b, idx in enumerate(batches.epoch()):
            try:
                total, recon, kl = vae_loss(inputs[idx], labels[idx], model, noise_rng)
                dn.backward(total, params)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"stage {stage}: non-finite loss at epoch {epoch}, batch {b} "
                    f"(gamma={model.gamma:.3g}): {exc}") from exc
            opt.step()
            sums += np.array([total.item(), recon.item(), kl.item()]) * len(idx)
        sums /= inputs.shape[0]
        history.total.append(float(sums[0]))
        history.recon.append(float(sums[1]))
        history.kl.append(float(sums[2]))
        history.gamma.append(model.gamma)
        opt.state.lr *= config.lr_decay
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return model, history


def sample_pipeline(u, c, stage1, stage2):
    """Decode second-stage codes ``u`` under condition(s) ``c`` to flat images."""
    if stage1.stage != 1 or stage2.stage != 2:
        raise UsageError("sample_pipeline needs (stage-1, stage-2) models")
    u = np.asarray(u, dtype=dn.get_dtype())
    single = u.ndim == 1
    u = u.reshape(1, -1) if single else u
    if u.shape[1] != stage2.latent_dim:
        raise dn.DimensionError(f"u has length {u.shape[1]}, stage 2 expects {stage2.latent_dim}")
    c = check_labels(c, u.shape[0], stage2.num_classes)
    with dn.no_grad():
        z_hat = stage2.decode(u, c)
        x_hat = stage1.decode(z_hat, c).data
    return x_hat[0] if single else x_hat


def smoothed(values, window=5):
    """Trailing moving average (the first ``window - 1`` points average what exists)."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.cumsum(values)
    out = np.empty_like(values)
    for i in range(values.size):
        lo = max(0, i - window + 1)
        out[i] = (csum[i] - (csum[lo - 1] if lo else 0.0)) / (i - lo + 1)
    return out


class TwoStageCVAE(TransformerMixin, BaseEstimator):
    """Two nested conditional VAEs with a sklearn-style interface.

    ``fit(X, y)`` trains stage 1 on the images, then stage 2 on the stage-1
    posterior means (or one posterior draw per example when
    ``stage2_inputs="sample"``). ``transform(X, y)`` returns second-stage
    means; ``sample(u, c)`` decodes second-stage codes to images.
    """

    def __init__(self, latent_dim=8, latent_dim2=None, hidden=(256, 256), hidden2=(128, 128),
                 epochs=50, epochs2=50, batch_size=64, lr=1e-3, lr_decay=1.0,
                 stage2_inputs="mean", num_classes=None, random_state=0):
        self.latent_dim = latent_dim
        self.latent_dim2 = latent_dim2
        self.hidden = hidden
        self.hidden2 = hidden2
        self.epochs = epochs
        self.epochs2 = epochs2
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.stage2_inputs = stage2_inputs
        self.num_classes = num_classes
        self.random_state = random_state

    def _stage_configs(self):
        first = StageConfig(self.latent_dim, tuple(self.hidden), self.epochs, self.batch_size,
                            self.lr, self.lr_decay)
        second = StageConfig(self.latent_dim2 or self.latent_dim, tuple(self.hidden2), self.epochs2,
                             self.batch_size, self.lr, self.lr_decay)
        return first, second

    def fit(self, X, y):
        if self.stage2_inputs not in ("mean", "sample"):
            raise ParameterError(f"stage2_inputs must be 'mean' or 'sample', got {self.stage2_inputs!r}")
        flat, self.image_shape_ = check_images(X)
        n_classes = self.num_classes or int(np.max(y)) + 1
        y = check_labels(y, flat.shape[0], n_classes)
        rng1, rng2, rng_draw = np.random.default_rng(self.random_state).spawn(3)
        first_cfg, second_cfg = self._stage_configs()
        self.stage1_, self.history1_ = train_stage(flat, y, n_classes, first_cfg, rng1, stage=1)
        codes = self.encode_stage1(flat, y, draw_rng=rng_draw if self.stage2_inputs == "sample" else None)
        self.stage2_, self.history2_ = train_stage(codes, y, n_classes, second_cfg, rng2, stage=2)
        self.num_classes_ = n_classes
        return self

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X, y)

    def encode_stage1(self, X, y, draw_rng=None):
        """Stage-1 posterior means of ``X`` (or one draw each when ``draw_rng`` is given)."""
        flat, _ = check_images(X)
        enc = encode(flat, y, self.stage1_)
        if draw_rng is None:
            return enc.mu.data
        with dn.no_grad():
            return reparameterize(enc, draw_rng.standard_normal(enc.mu.shape)).data

    def transform(self, X, y):
        check_is_fitted(self, "stage2_")
        return encode(self.encode_stage1(X, y), y, self.stage2_).mu.data

    def reconstruct(self, X, y):
        """Stage-1 encode-mean then decode, as flat images."""
        check_is_fitted(self, "stage1_")
        flat, _ = check_images(X)
        with dn.no_grad():
            return self.stage1_.decode(self.stage1_.encode(flat, y).mu, y).data

    def sample(self, u, c):
        check_is_fitted(self, "stage2_")
        return sample_pipeline(u, c, self.stage1_, self.stage2_)

    def sample_random(self, n, c, rng=None):
        rng = check_random_state(rng)
        u = rng.standard_normal((n, self.stage2_.latent_dim))
        return u, self.sample(u, c)

    @classmethod
    def from_stages(cls, stage1, stage2, image_shape=None):
        if stage1.num_classes != stage2.num_classes:
            raise ParameterError("stages disagree on num_classes")
        if stage2.input_dim != stage1.latent_dim:
            raise ParameterError("stage-2 input width must equal stage-1 latent width")
        model = cls(latent_dim=stage1.latent_dim, latent_dim2=stage2.latent_dim,
                    hidden=stage1.hidden, hidden2=stage2.hidden, num_classes=stage1.num_classes)
        model.stage1_, model.stage2_ = stage1, stage2
        model.num_classes_ = stage1.num_classes
        model.image_shape_ = tuple(image_shape) if image_shape else (stage1.input_dim,)
        return model
