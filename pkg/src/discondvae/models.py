"""Encoder/decoder stacks and the three latent-variable model variants.

All variants share one conv trunk (stride-2 4x4 convs down to a 4x4 map,
then a 256-wide feature layer) and a mirrored deconv decoder. They differ
in how the private variable w is inferred and how latents are assembled
for decoding:

  exact  -- the private head runs d times, pass i reading concat(features,
            e_i) and contributing its i-th width-Pr block; sampling picks
            the most likely mode j and the decoder sees w zero-padded into
            block j next to one-hot(j).
  approx -- the private head runs once on concat(features, alpha) and
            yields all d modes; w is the pi-weighted combination of
            per-mode samples with pi from a Gumbel-Softmax; the decoder
            sees concat(z, w, pi).
  joint  -- no private variable; the decoder sees concat(z, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from discondvae import tensor as T
from discondvae.rng import RandomSource
from discondvae.tensor import Tensor

VARIANTS = ("exact", "approx", "joint")

_FEATURES = 256
_FLAT = 64 * 4 * 4  # conv trunk output: 64 channels on a 4x4 map


@dataclass
class ModelConfig:
    variant: str
    public_dim: int
    private_dim: int
    num_classes: int
    image_extent: int = 32
    channels: int = 1
    temperature: float = 0.67

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.public_dim < 0 or self.private_dim < 0:
            raise ValueError("latent dims must be non-negative")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.variant == "joint" and self.private_dim != 0:
            raise ValueError("joint variant carries no private variable (private_dim must be 0)")
        if self.variant != "joint" and self.private_dim == 0:
            raise ValueError(f"{self.variant} variant needs private_dim > 0")
        if self.image_extent not in (32, 64):
            raise ValueError(f"image_extent must be 32 or 64, got {self.image_extent}")
        if self.channels != 1:
            raise ValueError("only single-channel images are supported")


@dataclass
class EncoderOutput:
    z_mu: Tensor          # [B, Pb]
    z_logvar: Tensor      # [B, Pb]
    logits: Tensor        # [B, d]
    alpha: Tensor         # [B, d], rows on the simplex
    w_mu: Tensor | None       # [B, d, Pr]
    w_logvar: Tensor | None   # [B, d, Pr]


@dataclass
class LatentSample:
    z: Tensor                      # [B, Pb]
    w: Tensor | None               # [B, Pr]
    discrete_repr: Tensor | None   # [B, d]: pi, alpha, or a one-hot
    mode_index: np.ndarray | None = None   # [B] ints, exact-style samples only


def one_hot(indices, d: int, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], d), dtype=dtype)
    out[np.arange(idx.shape[0]), idx] = 1
    return out


def _kaiming_uniform(rng: RandomSource, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    u = rng.uniform(shape, dtype=np.float64)
    return ((u * 2.0 - 1.0) * bound).astype(dtype)


class DiscondVAE:
    """Parameter container plus the encode/reparam/decode paths.

    Parameters live in an ordered dict of leaf tensors; construction order
    fixes both the init RNG stream and the optimizer update order. The
    mixture prior means are a plain array (they are set in closed form, not
    by gradient descent).
    """

    def __init__(self, config: ModelConfig, rng: RandomSource, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        c = config

        def lin(name: str, n_in: int, n_out: int) -> None:
            self._add(f"{name}.w", _kaiming_uniform(rng, (n_in, n_out), n_in, dtype))
            self._add(f"{name}.b", np.zeros(n_out, dtype=dtype))

        def conv(name: str, cin: int, cout: int, transpose: bool = False) -> None:
            shape = (cin, cout, 4, 4) if transpose else (cout, cin, 4, 4)
            self._add(f"{name}.w", _kaiming_uniform(rng, shape, cin * 16, dtype))
            self._add(f"{name}.b", np.zeros(cout, dtype=dtype))

        conv("enc.conv1", 1, 32)
        if c.image_extent == 64:
            conv("enc.conv1b", 32, 32)
        conv("enc.conv2", 32, 64)
        conv("enc.conv3", 64, 64)
        lin("enc.fc", _FLAT, _FEATURES)
        lin("head.z_mu", _FEATURES, c.public_dim)
        lin("head.z_logvar", _FEATURES, c.public_dim)
        lin("head.logits", _FEATURES, c.num_classes)
        if c.variant != "joint":
            lin("head.w_mu", _FEATURES + c.num_classes, c.num_classes * c.private_dim)
            lin("head.w_logvar", _FEATURES + c.num_classes, c.num_classes * c.private_dim)
        if c.variant == "exact":
            lin("dec.pub", c.public_dim, 128)
            lin("dec.priv", c.num_classes * c.private_dim + c.num_classes, 128)
        elif c.variant == "approx":
            lin("dec.inp", c.public_dim + c.private_dim + c.num_classes, _FEATURES)
        else:
            lin("dec.inp", c.public_dim + c.num_classes, _FEATURES)
        lin("dec.fc", _FEATURES, _FLAT)
        if c.image_extent == 64:
            conv("dec.deconv0", 64, 64, transpose=True)
        conv("dec.deconv1", 64, 32, transpose=True)
        conv("dec.deconv2", 32, 32, transpose=True)
        conv("dec.deconv3", 32, 1, transpose=True)

        if c.variant == "joint":
            self.prior_mu = np.zeros((0, 0), dtype=dtype)
        else:
            self.prior_mu = np.zeros((c.num_classes, c.private_dim), dtype=dtype)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, dtype=self.dtype)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return T.conv2d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), stride=2, padding=1)

    def _deconv(self, name: str, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), stride=2, padding=1)

    # -- encoding -------------------------------------------------------
    def features(self, x: Tensor) -> Tensor:
        c = self.config
        if x.shape[1:] != (c.channels, c.image_extent, c.image_extent):
            raise ValueError(
                f"expected images [B, {c.channels}, {c.image_extent}, {c.image_extent}], got {x.shape}"
            )
        h = T.relu(self._conv("enc.conv1", x))
        if c.image_extent == 64:
            h = T.relu(self._conv("enc.conv1b", h))
        h = T.relu(self._conv("enc.conv2", h))
        h = T.relu(self._conv("enc.conv3", h))
        h = T.reshape(h, (x.shape[0], _FLAT))
        return T.relu(self._lin("enc.fc", h))

    def _private_params(self, feats: Tensor, alpha: Tensor) -> tuple[Tensor, Tensor]:
        c = self.config
        b = feats.shape[0]
        if c.variant == "approx":
            inp = T.concat([feats, alpha], axis=1)
            mu = T.reshape(self._lin("head.w_mu", inp), (b, c.num_classes, c.private_dim))
            logvar = T.reshape(self._lin("head.w_logvar", inp), (b, c.num_classes, c.private_dim))
            return mu, logvar
        # exact: pass i reads e_i and contributes its own block
        mu_blocks, logvar_blocks = [], []
        for i in range(c.num_classes):
            e_i = np.zeros((b, c.num_classes), dtype=self.dtype)
            e_i[:, i] = 1
            inp = T.concat([feats, Tensor(e_i, dtype=self.dtype)], axis=1)
            mu_i = T.narrow(self._lin("head.w_mu", inp), 1, i * c.private_dim, c.private_dim)
            lv_i = T.narrow(self._lin("head.w_logvar", inp), 1, i * c.private_dim, c.private_dim)
            mu_blocks.append(T.reshape(mu_i, (b, 1, c.private_dim)))
            logvar_blocks.append(T.reshape(lv_i, (b, 1, c.private_dim)))
        return T.concat(mu_blocks, axis=1), T.concat(logvar_blocks, axis=1)

    def encode(self, x: Tensor) -> EncoderOutput:
        feats = self.features(x)
        z_mu = self._lin("head.z_mu", feats)
        z_logvar = self._lin("head.z_logvar", feats)
        logits = self._lin("head.logits", feats)
        alpha = T.softmax(logits, axis=-1)
        if self.config.variant == "joint":
            return EncoderOutput(z_mu, z_logvar, logits, alpha, None, None)
        w_mu, w_logvar = self._private_params(feats, alpha)
        return EncoderOutput(z_mu, z_logvar, logits, alpha, w_mu, w_logvar)

    # -- sampling -------------------------------------------------------
    def draw_noise(self, batch: int, rng: RandomSource) -> dict[str, np.ndarray]:
        """One step's noise, drawn in a fixed order for reproducibility."""
        c = self.config
        noise = {"z": rng.normal((batch, c.public_dim), dtype=self.dtype)}
        if c.variant == "exact":
            noise["w"] = rng.normal((batch, c.private_dim), dtype=self.dtype)
        elif c.variant == "approx":
            noise["w"] = rng.normal((batch, c.num_classes, c.private_dim), dtype=self.dtype)
        if c.variant in ("approx", "joint"):
            noise["gumbel"] = rng.gumbel((batch, c.num_classes), dtype=self.dtype)
        return noise

    @staticmethod
    def selected_mode(alpha: Tensor) -> np.ndarray:
        # np.argmax resolves ties toward the lowest index
        return np.argmax(alpha.data, axis=1)

    def reparam_exact(self, out: EncoderOutput, noise: dict[str, np.ndarray]) -> LatentSample:
        from discondvae.distributions import gaussian_reparam

        c = self.config
        if c.variant == "joint":
            raise ValueError("joint variant has no private variable to sample")
        j = self.selected_mode(out.alpha)
        mu_j = T.select_modes(out.w_mu, j)
        logvar_j = T.select_modes(out.w_logvar, j)
        eps = noise["w"]
        if eps.ndim == 3:  # per-mode noise: use the selected mode's slice
            eps = eps[np.arange(eps.shape[0]), j]
        z = gaussian_reparam(out.z_mu, out.z_logvar, noise["z"])
        w = gaussian_reparam(mu_j, logvar_j, eps)
        onehot = Tensor(one_hot(j, c.num_classes, dtype=self.dtype))
        return LatentSample(z=z, w=w, discrete_repr=onehot, mode_index=j)

    def reparam_approx(self, out: EncoderOutput, noise: dict[str, np.ndarray],
                       pi_override: np.ndarray | None = None) -> LatentSample:
        from discondvae.distributions import gaussian_reparam, gumbel_softmax_sample

        c = self.config
        if c.variant == "joint":
            raise ValueError("joint variant has no private variable to sample")
        z = gaussian_reparam(out.z_mu, out.z_logvar, noise["z"])
        w_all = gaussian_reparam(out.w_mu, out.w_logvar, noise["w"])  # [B, d, Pr]
        if pi_override is not None:
            pi = Tensor(pi_override, dtype=self.dtype)
        else:
            pi = gumbel_softmax_sample(out.logits, noise["gumbel"], c.temperature)
        b = z.shape[0]
        w = T.sum_(T.mul(T.reshape(pi, (b, c.num_classes, 1)), w_all), axis=1)
        return LatentSample(z=z, w=w, discrete_repr=pi)

    def reparam_joint(self, out: EncoderOutput, noise: dict[str, np.ndarray],
                      pi_override: np.ndarray | None = None) -> LatentSample:
        from discondvae.distributions import gaussian_reparam, gumbel_softmax_sample

        z = gaussian_reparam(out.z_mu, out.z_logvar, noise["z"])
        if pi_override is not None:
            pi = Tensor(pi_override, dtype=self.dtype)
        else:
            pi = gumbel_softmax_sample(out.logits, noise["gumbel"], self.config.temperature)
        return LatentSample(z=z, w=None, discrete_repr=pi)

    def reparam(self, out: EncoderOutput, noise: dict[str, np.ndarray]) -> LatentSample:
        v = self.config.variant
        if v == "exact":
            return self.reparam_exact(out, noise)
        if v == "approx":
            return self.reparam_approx(out, noise)
        return self.reparam_joint(out, noise)

    # -- decoding -------------------------------------------------------
    def decode(self, sample: LatentSample) -> Tensor:
        c = self.config
        if c.variant == "exact":
            if sample.mode_index is None:
                raise ValueError("exact decode needs the selected mode index")
            b = sample.z.shape[0]
            blocks = T.reshape(
                T.expand_modes(sample.w, sample.mode_index, c.num_classes),
                (b, c.num_classes * c.private_dim),
            )
            priv_in = T.concat([blocks, sample.discrete_repr], axis=1)
            h = T.concat([
                T.relu(self._lin("dec.pub", sample.z)),
                T.relu(self._lin("dec.priv", priv_in)),
            ], axis=1)
        elif c.variant == "approx":
            inp = T.concat([sample.z, sample.w, sample.discrete_repr], axis=1)
            h = T.relu(self._lin("dec.inp", inp))
        else:
            inp = T.concat([sample.z, sample.discrete_repr], axis=1)
            h = T.relu(self._lin("dec.inp", inp))
        h = T.relu(self._lin("dec.fc", h))
        h = T.reshape(h, (h.shape[0], 64, 4, 4))
        if c.image_extent == 64:
            h = T.relu(self._deconv("dec.deconv0", h))
        h = T.relu(self._deconv("dec.deconv1", h))
        h = T.relu(self._deconv("dec.deconv2", h))
        return self._deconv("dec.deconv3", h)

    def forward(self, x: Tensor, rng: RandomSource) -> tuple[EncoderOutput, LatentSample, Tensor]:
        out = self.encode(x)
        sample = self.reparam(out, self.draw_noise(x.shape[0], rng))
        return out, sample, self.decode(sample)

    # -- inference helpers ------------------------------------------------
    def classify(self, x: Tensor) -> np.ndarray:
        return self.selected_mode(self.encode(x).alpha)

    def continuous_means(self, out: EncoderOutput) -> np.ndarray:
        """Mean continuous representation [B, Pb(+Pr)] used by the metrics.

        Private part: selected-mode mean (exact) or alpha-weighted mean of
        mode means (approx); absent for joint.
        """
        z = out.z_mu.data
        if self.config.variant == "joint":
            return z.copy()
        if self.config.variant == "exact":
            j = self.selected_mode(out.alpha)
            wm = out.w_mu.data[np.arange(z.shape[0]), j]
        else:
            wm = (out.alpha.data[:, :, None] * out.w_mu.data).sum(axis=1)
        return np.concatenate([z, wm], axis=1)

    def traverse(self, x: Tensor, kind: str, axis: int = 0,
                 span: float = 3.0, steps: int = 8) -> np.ndarray:
        """Decode a sweep of one latent while the others sit at their means.

        Continuous sweeps add `steps` offsets spaced evenly over [-span,
        span] to the chosen axis (steps=1 means offset 0, i.e. the plain
        reconstruction); the discrete sweep decodes every one-hot class.
        Returns sigmoid probabilities [B, steps, H, W].
        """
        c = self.config
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        out = self.encode(x)
        b = x.shape[0]
        z0 = out.z_mu.data.copy()
        j = self.selected_mode(out.alpha)
        rows = np.arange(b)

        def decode_arrays(z, w, disc, mode_idx):
            sample = LatentSample(
                z=Tensor(z, dtype=self.dtype),
                w=None if w is None else Tensor(w, dtype=self.dtype),
                discrete_repr=Tensor(disc, dtype=self.dtype),
                mode_index=mode_idx,
            )
            logits = self.decode(sample).data
            return 1.0 / (1.0 + np.exp(-logits))

        if c.variant == "joint":
            w0, disc0 = None, out.alpha.data.copy()
        elif c.variant == "exact":
            w0 = out.w_mu.data[rows, j]
            disc0 = one_hot(j, c.num_classes, dtype=self.dtype)
        else:
            w0 = (out.alpha.data[:, :, None] * out.w_mu.data).sum(axis=1)
            disc0 = out.alpha.data.copy()

        offsets = np.linspace(-span, span, steps) if steps > 1 else np.zeros(1)
        frames = []
        if kind == "public":
            if not 0 <= axis < c.public_dim:
                raise ValueError(f"public axis {axis} out of range [0, {c.public_dim})")
            for off in offsets:
                z = z0.copy()
                z[:, axis] += off
                frames.append(decode_arrays(z, w0, disc0, j if c.variant == "exact" else None))
        elif kind == "private":
            if c.variant == "joint":
                raise ValueError("joint variant has no private axes")
            if not 0 <= axis < c.private_dim:
                raise ValueError(f"private axis {axis} out of range [0, {c.private_dim})")
            for off in offsets:
                w = w0.copy()
                w[:, axis] += off
                frames.append(decode_arrays(z0, w, disc0, j if c.variant == "exact" else None))
        elif kind == "discrete":
            for i in range(c.num_classes):
                disc = one_hot(np.full(b, i), c.num_classes, dtype=self.dtype)
                if c.variant == "joint":
                    frames.append(decode_arrays(z0, None, disc, None))
                elif c.variant == "exact":
                    # each class decoded at its own mode means, placed in block i
                    frames.append(decode_arrays(z0, out.w_mu.data[:, i], disc, np.full(b, i)))
                else:
                    frames.append(decode_arrays(z0, w0, disc, None))
        else:
            raise ValueError(f"kind must be public/private/discrete, got {kind!r}")
        grid = np.stack(frames, axis=1)  # [B, steps, 1, H, W]
        return grid[:, :, 0]

    # -- checkpoint interop ----------------------------------------------
    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {f"param.{k}": p.data for k, p in self.params.items()}
        entries["prior.mu"] = self.prior_mu
        return entries

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            key = f"param.{k}"
            if key not in entries:
                raise KeyError(f"checkpoint is missing {key}")
            arr = entries[key]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"{key}: expected shape {tuple(p.data.shape)}, found {tuple(arr.shape)}"
                )
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)
        pm = entries.get("prior.mu")
        if pm is None:
            raise KeyError("checkpoint is missing prior.mu")
        if tuple(pm.shape) != tuple(self.prior_mu.shape):
            raise ValueError(
                f"prior.mu: expected shape {tuple(self.prior_mu.shape)}, found {tuple(pm.shape)}"
            )
        self.prior_mu = np.ascontiguousarray(pm, dtype=self.dtype)
