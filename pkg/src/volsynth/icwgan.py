"""Improved conditional Wasserstein GAN over labeled 3D volumes.

Generator: dense([z;y]) seed volume, then a stack of transposed convolutions
with batchnorm + ReLU in between and a sigmoid head. Discriminator mirrors it
with strided convolutions, leaky ReLU, and a linear score; no normalization,
so the gradient penalty stays well-posed. Both condition on labels at the
input and at every hidden layer via dense+tanh projections to single-channel
volumes.

Critic objective:
    E[D(G(z|y))] - E[D(x|y)] + lambda * E[(||grad_xhat D(xhat|y)||_2 - 1)^2]
with xhat = eps*x + (1-eps)*G(z), eps ~ U[0,1] per sample. The generator
minimizes -E[D(G(z|y))]. The penalty gradient is built as an explicit
second-pass graph: the backward sweep through the critic is composed from
transposed convolutions and constant activation masks, so the penalty itself
is differentiable with respect to the critic parameters.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .datasets import one_hot
from .volumes import Volume


@dataclass
class GANConfig:
    z_dim: int = 128
    lambda_gp: float = 10.0
    critic_iters: int = 5
    batch_size: int = 50
    learning_rate: float = 1e-4
    epochs: int = 10
    seed: int = 0
    gen_channels: tuple = (64, 32, 16, 8)
    disc_channels: tuple = (8, 16, 32, 64)
    beta1: float = 0.5
    beta2: float = 0.9
    leaky_alpha: float = 0.2
    checkpoint_every: int = 0      # generator steps between checkpoints; 0 disables
    dtype: str = "float32"

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.critic_iters < 1:
            raise ValueError("critic_iters must be >= 1")
        if self.z_dim < 1 or self.batch_size < 1:
            raise ValueError("z_dim and batch_size must be positive")


def conv_schedule(dims, layers):
    """Spatial sizes through a stride-2 conv stack; all must stay >= 1."""
    sizes = [tuple(dims)]
    for _ in range(layers):
        nxt = tuple(max(s // 2, 0) for s in sizes[-1])
        if any(s < 1 for s in nxt):
            raise ValueError(
                f"dims {tuple(dims)} collapse below 1 within {layers} conv layers")
        sizes.append(nxt)
    return sizes


def deconv_schedule(dims, layers):
    """Spatial sizes for the mirrored transposed stack, seed first."""
    sizes = [tuple(dims)]
    for _ in range(layers):
        sizes.append(tuple(max(1, math.ceil(s / 2)) for s in sizes[-1]))
    return list(reversed(sizes))


class Generator(nn.Module):
    def __init__(self, dims, num_classes, config, rng, dtype=np.float64, name="gen"):
        channels = list(config.gen_channels)
        layers = len(channels)
        self.sizes = deconv_schedule(dims, layers)
        self.dims = tuple(dims)
        self.num_classes = num_classes
        self.z_dim = config.z_dim
        seed_spatial = self.sizes[0]
        seed_elems = channels[0] * int(np.prod(seed_spatial))
        self.seed_channels = channels[0]
        self.seed_spatial = seed_spatial
        self.input_dense = nn.Dense(config.z_dim + num_classes, seed_elems, rng,
                                    f"{name}.input", dtype=dtype)
        self.seed_bn = nn.BatchNorm3d(channels[0], f"{name}.bn0", dtype=dtype)
        widths = channels + [1]
        self.deconvs = [
            nn.ConvTranspose3d(widths[i] + 1, widths[i + 1], rng, f"{name}.deconv{i}",
                               dtype=dtype)
            for i in range(layers)
        ]
        self.bns = [
            nn.BatchNorm3d(widths[i + 1], f"{name}.bn{i + 1}", dtype=dtype)
            for i in range(layers - 1)
        ]
        self.projections = [
            nn.LabelProjection(num_classes, self.sizes[i], rng, f"{name}.proj{i}",
                               dtype=dtype)
            for i in range(layers)
        ]

    def project_label(self, y, layer):
        """Label volume for the given layer's spatial size; values in (-1,1)."""
        if not 0 <= layer < len(self.projections):
            raise KeyError(
                f"no label projection for layer {layer}; configured spatial sizes "
                f"{self.sizes[:-1]}")
        return self.projections[layer](_as_label_tensor(y, self.num_classes))

    def forward(self, z, y, training):
        z = z if isinstance(z, Tensor) else Tensor(z)
        y = _as_label_tensor(y, self.num_classes)
        n = z.data.shape[0]
        if z.data.shape[1] != self.z_dim:
            raise ad.DimensionError(
                f"latent dim {z.data.shape[1]} does not match configured {self.z_dim}")
        h = self.input_dense(ad.concat([z, y], axis=1))
        h = ad.reshape(h, (n, self.seed_channels) + self.seed_spatial)
        h = ad.relu(self.seed_bn(h, training))
        last = len(self.deconvs) - 1
        for i, deconv in enumerate(self.deconvs):
            h = ad.concat_channels(h, self.projections[i](y))
            h = ad.conv3d_transpose(h, deconv.kernel, deconv.bias, stride=deconv.stride,
                                    pad=deconv.pad, output_dims=self.sizes[i + 1])
            if i < last:
                h = ad.relu(self.bns[i](h, training))
            else:
                h = ad.sigmoid(h)
        return h


class Discriminator(nn.Module):
    def __init__(self, dims, num_classes, config, rng, dtype=np.float64, name="disc"):
        channels = list(config.disc_channels)
        layers = len(channels)
        self.sizes = conv_schedule(dims, layers)
        self.num_classes = num_classes
        self.alpha = config.leaky_alpha
        widths = [1] + channels
        self.convs = [
            nn.Conv3d(widths[i] + 1, widths[i + 1], rng, f"{name}.conv{i}", dtype=dtype)
            for i in range(layers)
        ]
        self.projections = [
            nn.LabelProjection(num_classes, self.sizes[i], rng, f"{name}.proj{i}",
                               dtype=dtype)
            for i in range(layers)
        ]
        flat = channels[-1] * int(np.prod(self.sizes[-1]))
        self.head = nn.Dense(flat, 1, rng, f"{name}.head", dtype=dtype)

    def forward(self, x, y):
        score, _, _ = self._forward_parts(x, y)
        return score

    def _forward_parts(self, x, y):
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = _as_label_tensor(y, self.num_classes)
        h = x
        pres = []
        for i, conv in enumerate(self.convs):
            h = ad.concat_channels(h, self.projections[i](y))
            pre = ad.conv3d(h, conv.kernel, conv.bias, stride=conv.stride, pad=conv.pad)
            pres.append(pre)
            h = ad.leaky_relu(pre, self.alpha)
        flat_shape = h.data.shape
        score = self.head(ad.flatten(h))
        return score, pres, flat_shape

    def score_and_input_grad(self, x, y):
        """Critic scores plus the per-sample gradient of the score w.r.t. x.

        The gradient is an explicit graph over the critic parameters: the
        backward sweep is composed from transposed convolutions and the
        (piecewise-constant) leaky-ReLU slope masks, so downstream losses can
        differentiate through it.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        score, pres, flat_shape = self._forward_parts(x, y)
        n = x.data.shape[0]
        ones = Tensor(np.ones((n, 1), dtype=x.data.dtype))
        delta = ad.matmul(ones, ad.transpose2d(self.head.weight))
        delta = ad.reshape(delta, flat_shape)
        for i in reversed(range(len(self.convs))):
            conv = self.convs[i]
            dt = pres[i].data.dtype.type
            slope = np.where(pres[i].data > 0, dt(1.0), dt(self.alpha))
            delta = ad.mul(delta, Tensor(slope))
            delta = ad.conv3d_transpose(delta, conv.kernel, None, stride=conv.stride,
                                        pad=conv.pad, output_dims=self.sizes[i])
            # drop the label channel: xhat never feeds the projections
            delta = ad.narrow(delta, 1, 0, conv.kernel.data.shape[1] - 1)
        return score, delta


def _as_label_tensor(y, num_classes):
    if isinstance(y, Tensor):
        return y
    y = np.asarray(y)
    if y.ndim == 1:
        y = one_hot(y, num_classes)
    return Tensor(y)


def interpolate(x_real, x_fake, eps):
    """Per-sample convex combination eps*x_real + (1-eps)*x_fake."""
    xr = x_real.data if isinstance(x_real, Tensor) else np.asarray(x_real)
    xf = x_fake.data if isinstance(x_fake, Tensor) else np.asarray(x_fake)
    if xr.shape != xf.shape:
        raise ad.DimensionError(f"interpolate shapes differ: {xr.shape} vs {xf.shape}")
    eps = np.asarray(eps, dtype=xr.dtype).reshape(-1, *([1] * (xr.ndim - 1)))
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("interpolation draws must lie in [0,1]")
    return Tensor(eps * xr + (1.0 - eps) * xf)


def gradient_penalty(disc, x_hat, y):
    """Mean of (||grad_xhat D(xhat|y)||_2 - 1)^2 over the batch."""
    _, grad = disc.score_and_input_grad(x_hat, y)
    sq = ad.tsum(ad.mul(grad, grad), axis=(1, 2, 3, 4))
    norms = ad.tsqrt(sq)
    return ad.tmean(ad.power(norms - 1.0, 2.0))


def critic_loss(disc, gen, x_real, y, z, eps, lambda_gp, training=True):
    """Critic objective on one batch; fake samples reuse the real labels."""
    fake = gen.forward(z, y, training=training).detach()
    x_hat = interpolate(x_real, fake, eps)
    loss = ad.tmean(disc.forward(fake, y)) - ad.tmean(disc.forward(x_real, y))
    penalty = gradient_penalty(disc, x_hat, y)
    return ad.add(loss, ad.mul(penalty, lambda_gp)), penalty


def generator_loss(disc, gen, y, z, training=True):
    fake = gen.forward(z, y, training=training)
    return ad.neg(ad.tmean(disc.forward(fake, y)))


@dataclass
class GANTrainLog:
    entries: list = field(default_factory=list)  # (step, role, loss, penalty)

    def append(self, step, role, loss, penalty):
        self.entries.append((step, role, float(loss), float(penalty)))

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("step,role,loss,penalty_term\n")
            for step, role, loss, penalty in self.entries:
                fh.write(f"{step},{role},{loss!r},{penalty!r}\n")


def train_icwgan(dataset, config, out_dir=None):
    """Alternate critic_iters critic steps with one generator step."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.batch_size > n:
        raise ValueError(
            f"batch size {config.batch_size} exceeds dataset size {n}")
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng(config.seed)
    dims = dataset.dims
    num_classes = dataset.num_classes
    gen = Generator(dims, num_classes, config, rng, dtype=dtype)
    disc = Discriminator(dims, num_classes, config, rng, dtype=dtype)
    gen_params = gen.parameters()
    disc_params = disc.parameters()
    opt_g = nn.Adam(gen_params, config.learning_rate, config.beta1, config.beta2)
    opt_d = nn.Adam(disc_params, config.learning_rate, config.beta1, config.beta2)

    volumes = dataset.stack(dtype=dtype)
    labels = one_hot(dataset.labels, num_classes, dtype=dtype)
    log = GANTrainLog()
    step = 0
    gen_steps = 0
    critic_since_gen = 0
    last_y = None
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]
            x_real = Tensor(volumes[idx])
            y = Tensor(labels[idx])
            z = Tensor(rng.standard_normal((idx.size, config.z_dim)).astype(dtype))
            eps = rng.uniform(0.0, 1.0, size=idx.size)
            loss, penalty = critic_loss(disc, gen, x_real, y, z, eps, config.lambda_gp)
            grads = ad.backward(loss, disc_params)
            opt_d.step(grads)
            step += 1
            log.append(step, "critic", loss.item(), penalty.item())
            critic_since_gen += 1
            last_y = y
            if critic_since_gen == config.critic_iters:
                z = Tensor(rng.standard_normal((last_y.data.shape[0], config.z_dim)).astype(dtype))
                gloss = generator_loss(disc, gen, last_y, z)
                grads = ad.backward(gloss, gen_params)
                opt_g.step(grads)
                step += 1
                gen_steps += 1
                log.append(step, "gen", gloss.item(), 0.0)
                critic_since_gen = 0
                if out_dir and config.checkpoint_every and gen_steps % config.checkpoint_every == 0:
                    save_gan(gen, disc, os.path.join(out_dir, f"gan_step{gen_steps:06d}.ckpt"),
                             dims, num_classes, config)
    return gen, disc, log


def sample_gan(gen, class_index, count, seed):
    """Class-conditional volumes from the frozen generator (inference mode)."""
    if not 0 <= class_index < gen.num_classes:
        raise KeyError(
            f"unknown class {class_index}; generator covers 0..{gen.num_classes - 1}")
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    dtype = gen.input_dense.weight.data.dtype
    z = Tensor(rng.standard_normal((count, gen.z_dim)).astype(dtype))
    y = Tensor(one_hot(np.full(count, class_index), gen.num_classes, dtype=dtype))
    out = gen.forward(z, y, training=False)
    return [Volume(out.data[i, 0]) for i in range(count)]


def save_gan(gen, disc, path, dims, num_classes, config):
    arrays = {}
    arrays.update(gen.state_arrays())
    arrays.update(disc.state_arrays())
    for i, bn in enumerate([gen.seed_bn] + gen.bns):
        arrays[f"gen.bnstate{i}.mean"] = bn.state.running_mean
        arrays[f"gen.bnstate{i}.var"] = bn.state.running_var
    extra = {
        "kind": "icwgan",
        "dims": list(dims),
        "num_classes": num_classes,
        "z_dim": config.z_dim,
        "gen_channels": list(config.gen_channels),
        "disc_channels": list(config.disc_channels),
        "leaky_alpha": config.leaky_alpha,
        "dtype": config.dtype,
    }
    nn.save_checkpoint(path, arrays, precision=config.dtype, extra=extra)


def load_gan(path):
    arrays, extra = nn.load_checkpoint(path)
    if not extra or extra.get("kind") != "icwgan":
        raise nn.CheckpointError(f"{path} is not an ICW-GAN checkpoint")
    config = GANConfig(z_dim=extra["z_dim"], gen_channels=tuple(extra["gen_channels"]),
                       disc_channels=tuple(extra["disc_channels"]),
                       leaky_alpha=extra["leaky_alpha"], dtype=extra["dtype"])
    rng = np.random.default_rng(0)
    dtype = np.dtype(config.dtype).type
    gen = Generator(extra["dims"], extra["num_classes"], config, rng, dtype=dtype)
    disc = Discriminator(extra["dims"], extra["num_classes"], config, rng, dtype=dtype)
    gen.load_state(arrays)
    disc.load_state(arrays)
    for i, bn in enumerate([gen.seed_bn] + gen.bns):
        bn.state.running_mean = arrays[f"gen.bnstate{i}.mean"].astype(bn.state.running_mean.dtype)
        bn.state.running_var = arrays[f"gen.bnstate{i}.var"].astype(bn.state.running_var.dtype)
    return gen, disc, config
