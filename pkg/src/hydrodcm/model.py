"""Model components: temporal encoder, pseudo-domain projector, adversarial
discriminator, metadata-conditioned FiLM adapter, and the forecast head.

All components live in a `ModelBundle`, which owns the stable parameter
enumeration used by the optimizer and the checkpoint format.  Backbone-only
configurations (plain source-trained or target-trained baselines) carry just
the encoder and head; the hard-domain-classifier baseline adds a linear
domain head; the full method carries everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor


@dataclass
class ModelArch:
    """Layer dimensions.  Defaults give the production configuration."""

    n_features: int = 3        # precip, temp, inflow
    n_meta: int = 3            # lat, lon, elevation
    t_window: int = 30
    horizon: int = 7
    enc_hidden: int = 64
    enc_layers: int = 2
    disc_hidden: int = 32
    adapter_hidden: int = 64
    head_hidden: int = 64
    embed_dim: int = 32        # pseudo-domain embedding width
    dropout: float = 0.1


def _uniform_init(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform_range(-bound, bound, shape)


class Affine:
    """x @ w + b with w of shape (d_in, d_out)."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: Rng) -> "Affine":
        return cls(_uniform_init(rng, d_in, (d_in, d_out)), np.zeros(d_out))

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "Affine":
        return cls(np.zeros((d_in, d_out)), np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def parameters(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


# ---------------------------------------------------------------------------
# fused LSTM layer
# ---------------------------------------------------------------------------

def lstm_layer(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Run one LSTM layer over a (batch, time, d_in) tensor.

    Returns the full hidden sequence (batch, time, hidden).  Gates are laid
    out as [input, forget, output, cell] blocks of the fused weight
    matrices; initial hidden and cell states are zero.  The whole unrolled
    layer is a single graph node with a hand-derived backward pass.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"lstm_layer: expected (B, T, D) input, got {x.data.shape}")
    bsz, steps, d_in = x.data.shape
    hid = wh.data.shape[0]
    if wx.data.shape != (d_in, 4 * hid) or wh.data.shape != (hid, 4 * hid):
        raise ShapeError(
            f"lstm_layer: weights {wx.data.shape}/{wh.data.shape} do not match "
            f"input {x.data.shape}"
        )
    h3 = 3 * hid

    x_tm = np.ascontiguousarray(x.data.transpose(1, 0, 2))      # (T, B, D)
    zx = x_tm.reshape(steps * bsz, d_in) @ wx.data + b.data
    zx = zx.reshape(steps, bsz, 4 * hid)

    # saved activations, written in place inside the step loop
    gates_sig = np.empty((steps, bsz, h3))    # i, f, o after sigmoid
    gates_g = np.empty((steps, bsz, hid))     # cell candidate after tanh
    cells = np.empty((steps, bsz, hid))
    tanh_c = np.empty((steps, bsz, hid))
    h_seq = np.empty((steps, bsz, hid))

    zbuf = np.empty((bsz, 4 * hid))
    tmp = np.empty((bsz, hid))
    wh_d = wh.data
    for t in range(steps):
        if t == 0:
            zbuf[:] = zx[0]
        else:
            np.dot(h_seq[t - 1], wh_d, out=zbuf)
            zbuf += zx[t]
        sig = gates_sig[t]
        np.negative(zbuf[:, :h3], out=sig)
        np.exp(sig, out=sig)
        sig += 1.0
        np.reciprocal(sig, out=sig)
        g = gates_g[t]
        np.tanh(zbuf[:, h3:], out=g)
        c = cells[t]
        if t == 0:
            np.multiply(sig[:, :hid], g, out=c)             # i*g (c_prev = 0)
        else:
            np.multiply(sig[:, hid:2 * hid], cells[t - 1], out=c)
            np.multiply(sig[:, :hid], g, out=tmp)
            c += tmp
        tc = tanh_c[t]
        np.tanh(c, out=tc)
        np.multiply(sig[:, 2 * hid:], tc, out=h_seq[t])

    out = np.ascontiguousarray(h_seq.transpose(1, 0, 2))        # (B, T, H)

    def bwd(g_out):
        go = np.ascontiguousarray(g_out.transpose(1, 0, 2))
        dz = np.empty((steps, bsz, 4 * hid))
        dh = np.empty((bsz, hid))
        dc = np.empty((bsz, hid))
        dc_next = np.zeros((bsz, hid))
        buf = np.empty((bsz, hid))
        buf3 = np.empty((bsz, h3))
        wh_t = np.ascontiguousarray(wh_d.T)
        for t in range(steps - 1, -1, -1):
            sig = gates_sig[t]
            g_g = gates_g[t]
            tc = tanh_c[t]
            if t == steps - 1:
                dh[:] = go[t]
            else:
                np.add(go[t], dh, out=dh)
            dz_t = dz[t]
            # output gate: do = dh * tanh(c)
            np.multiply(dh, tc, out=dz_t[:, 2 * hid:h3])
            # dc = dc_next + dh * o * (1 - tanh(c)^2)
            np.multiply(tc, tc, out=buf)
            np.subtract(1.0, buf, out=buf)
            buf *= sig[:, 2 * hid:]
            buf *= dh
            np.add(dc_next, buf, out=dc)
            np.multiply(dc, g_g, out=dz_t[:, :hid])             # di
            if t > 0:
                np.multiply(dc, cells[t - 1], out=dz_t[:, hid:2 * hid])  # df
            else:
                dz_t[:, hid:2 * hid] = 0.0
            np.multiply(dc, sig[:, :hid], out=dz_t[:, h3:])     # dg
            np.multiply(dc, sig[:, hid:2 * hid], out=dc_next)
            # pre-activation: sigmoid' on [i f o], tanh' on g
            np.subtract(1.0, sig, out=buf3)
            buf3 *= sig
            dz_t[:, :h3] *= buf3
            np.multiply(g_g, g_g, out=buf)
            np.subtract(1.0, buf, out=buf)
            dz_t[:, h3:] *= buf
            np.dot(dz_t, wh_t, out=dh)
        dz_flat = dz.reshape(steps * bsz, 4 * hid)
        d_wh = h_seq[:-1].reshape((steps - 1) * bsz, hid).T @ dz_flat[bsz:]
        d_wx = x_tm.reshape(steps * bsz, d_in).T @ dz_flat
        d_b = dz_flat.sum(axis=0)
        d_x = (dz_flat @ wx.data.T).reshape(steps, bsz, d_in).transpose(1, 0, 2)
        return (d_x, d_wx, d_wh, d_b)

    return T._make(out, "lstm_layer", (x, wx, wh, b), bwd)


class LstmLayerParams:
    def __init__(self, wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
        self.wx = Tensor(wx, requires_grad=True)
        self.wh = Tensor(wh, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    @classmethod
    def init(cls, d_in: int, hid: int, rng: Rng) -> "LstmLayerParams":
        wx = _uniform_init(rng, d_in, (d_in, 4 * hid))
        wh = _uniform_init(rng, hid, (hid, 4 * hid))
        b = np.zeros(4 * hid)
        b[hid:2 * hid] = 1.0  # forget-gate bias: keeps early memory open
        return cls(wx, wh, b)

    @classmethod
    def zeros(cls, d_in: int, hid: int) -> "LstmLayerParams":
        return cls(np.zeros((d_in, 4 * hid)), np.zeros((hid, 4 * hid)),
                   np.zeros(4 * hid))

    def parameters(self, prefix: str):
        return [(prefix + ".wx", self.wx), (prefix + ".wh", self.wh),
                (prefix + ".b", self.b)]


class Encoder:
    """Stacked LSTM over the input window; emits the final hidden state.

    The multi-horizon decoder role is played by the forecast head, which
    maps this single state to all lead times at once.
    """

    def __init__(self, layers, dropout: float):
        self.layers = layers
        self.dropout = dropout

    @classmethod
    def init(cls, arch: ModelArch, rng: Rng) -> "Encoder":
        layers = []
        d_in = arch.n_features
        for k in range(arch.enc_layers):
            layers.append(LstmLayerParams.init(d_in, arch.enc_hidden, rng.spawn(f"layer{k}")))
            d_in = arch.enc_hidden
        return cls(layers, arch.dropout)

    def __call__(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[2] != self.layers[0].wx.data.shape[0]:
            raise ShapeError(
                f"encode: expected (B, T, {self.layers[0].wx.data.shape[0]}) window, "
                f"got {x.data.shape}"
            )
        seq = x
        for k, layer in enumerate(self.layers):
            seq = lstm_layer(seq, layer.wx, layer.wh, layer.b)
            if k < len(self.layers) - 1:
                seq = T.dropout(seq, self.dropout, training, rng)
        steps = seq.data.shape[1]
        last = T.slice_(seq, 1, steps - 1, steps)
        return T.reshape(last, (seq.data.shape[0], seq.data.shape[2]))

    def parameters(self, prefix: str = "encoder"):
        out = []
        for k, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}.layer{k}"))
        return out


class Projector:
    """Linear map from [metadata : flattened window] to the embedding space."""

    def __init__(self, fc: Affine):
        self.fc = fc

    @classmethod
    def init(cls, arch: ModelArch, rng: Rng) -> "Projector":
        d_in = arch.n_meta + arch.t_window * arch.n_features
        return cls(Affine.init(d_in, arch.embed_dim, rng))

    def __call__(self, s: Tensor, x: Tensor) -> Tensor:
        bsz = x.data.shape[0]
        flat = T.reshape(x, (bsz, x.data.shape[1] * x.data.shape[2]))
        joined = T.concat(s, flat, axis=1)
        if joined.data.shape[1] != self.fc.w.data.shape[0]:
            raise ShapeError(
                f"project: input width {joined.data.shape[1]} does not match "
                f"projector {self.fc.w.data.shape}"
            )
        return self.fc(joined)

    def parameters(self, prefix: str = "projector"):
        return self.fc.parameters(prefix + ".fc")


class Discriminator:
    """Two-layer MLP that tries to recover pseudo-domain embeddings from h."""

    def __init__(self, fc1: Affine, fc2: Affine, dropout: float):
        self.fc1 = fc1
        self.fc2 = fc2
        self.dropout = dropout

    @classmethod
    def init(cls, arch: ModelArch, rng: Rng) -> "Discriminator":
        return cls(Affine.init(arch.enc_hidden, arch.disc_hidden, rng.spawn("fc1")),
                   Affine.init(arch.disc_hidden, arch.embed_dim, rng.spawn("fc2")),
                   arch.dropout)

    def __call__(self, h: Tensor, lam: float, training: bool = False,
                 rng: Rng | None = None) -> Tensor:
        rev = T.grad_reverse(h, lam)
        hid = T.relu(self.fc1(rev))
        hid = T.dropout(hid, self.dropout, training, rng)
        return self.fc2(hid)

    def parameters(self, prefix: str = "discriminator"):
        return self.fc1.parameters(prefix + ".fc1") + self.fc2.parameters(prefix + ".fc2")


class FilmAdapter:
    """Produces feature-wise scale and shift from reservoir metadata.

    Initialized to the exact identity (scale 1, shift 0) so a freshly built
    model is indistinguishable from one without the adapter.
    """

    def __init__(self, hidden: Affine, gamma: Affine, delta: Affine):
        self.hidden = hidden
        self.gamma = gamma
        self.delta = delta

    @classmethod
    def init(cls, arch: ModelArch, rng: Rng) -> "FilmAdapter":
        hidden = Affine.init(arch.n_meta, arch.adapter_hidden, rng)
        gamma = Affine.zeros(arch.adapter_hidden, arch.enc_hidden)
        gamma.b.data[:] = 1.0
        delta = Affine.zeros(arch.adapter_hidden, arch.enc_hidden)
        return cls(hidden, gamma, delta)

    def coefficients(self, s: Tensor):
        hid = T.relu(self.hidden(s))
        return self.gamma(hid), self.delta(hid)

    def __call__(self, z: Tensor, s: Tensor) -> Tensor:
        gamma, delta = self.coefficients(s)
        return T.add(T.mul(gamma, z), delta)

    def parameters(self, prefix: str = "adapter"):
        return (self.hidden.parameters(prefix + ".hidden")
                + self.gamma.parameters(prefix + ".gamma")
                + self.delta.parameters(prefix + ".delta"))


class Head:
    """Two-layer MLP mapping the modulated state to all forecast leads."""

    def __init__(self, fc1: Affine, fc2: Affine, dropout: float):
        self.fc1 = fc1
        self.fc2 = fc2
        self.dropout = dropout

    @classmethod
    def init(cls, arch: ModelArch, rng: Rng) -> "Head":
        return cls(Affine.init(arch.enc_hidden, arch.head_hidden, rng.spawn("fc1")),
                   Affine.init(arch.head_hidden, arch.horizon, rng.spawn("fc2")),
                   arch.dropout)

    def __call__(self, z: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        hid = T.relu(self.fc1(z))
        hid = T.dropout(hid, self.dropout, training, rng)
        return self.fc2(hid)

    def parameters(self, prefix: str = "head"):
        return self.fc1.parameters(prefix + ".fc1") + self.fc2.parameters(prefix + ".fc2")


class DomainClassifier:
    """Linear head over hard reservoir identities (adversarial baseline)."""

    def __init__(self, fc: Affine):
        self.fc = fc

    @classmethod
    def init(cls, enc_hidden: int, n_domains: int, rng: Rng) -> "DomainClassifier":
        return cls(Affine.init(enc_hidden, n_domains, rng))

    def __call__(self, h: Tensor, lam: float) -> Tensor:
        return self.fc(T.grad_reverse(h, lam))

    def parameters(self, prefix: str = "domain_head"):
        return self.fc.parameters(prefix + ".fc")


class ModelBundle:
    """The trainable components of one experiment plus normalization stats."""

    def __init__(self, arch: ModelArch, encoder: Encoder, head: Head,
                 projector: Projector | None = None,
                 discriminator: Discriminator | None = None,
                 adapter: FilmAdapter | None = None,
                 domain_head: DomainClassifier | None = None,
                 norm_stats=None):
        self.arch = arch
        self.encoder = encoder
        self.head = head
        self.projector = projector
        self.discriminator = discriminator
        self.adapter = adapter
        self.domain_head = domain_head
        self.norm_stats = norm_stats

    def parameters(self):
        """Stable (name, tensor) enumeration; every trainable tensor once."""
        out = self.encoder.parameters()
        if self.projector is not None:
            out += self.projector.parameters()
        if self.discriminator is not None:
            out += self.discriminator.parameters()
        if self.adapter is not None:
            out += self.adapter.parameters()
        out += self.head.parameters()
        if self.domain_head is not None:
            out += self.domain_head.parameters()
        return out

    def param_tensors(self):
        return [t for _, t in self.parameters()]

    def encode(self, x, training=False, rng=None):
        return self.encoder(x, training, rng)

    def project_pseudo_domain(self, s, x):
        return self.projector(s, x)

    def discriminate(self, h, lam, training=False, rng=None):
        return self.discriminator(h, lam, training, rng)

    def modulate(self, z, s):
        return self.adapter(z, s)

    def predict(self, z, training=False, rng=None):
        return self.head(z, training, rng)

    def infer(self, x: Tensor, s: Tensor | None = None) -> Tensor:
        """Inference path: encoder, adapter (when present), head.

        Never evaluates the projector or either domain head.
        """
        h = self.encode(x, training=False)
        if self.adapter is not None:
            if s is None:
                raise ValueError("bundle with adapter requires metadata at inference")
            h = self.modulate(h, s)
        return self.predict(h, training=False)

    def snapshot(self) -> list:
        return [t.data.copy() for t in self.param_tensors()]

    def restore(self, snap: list) -> None:
        for t, arr in zip(self.param_tensors(), snap):
            t.data = arr.copy()


def build_bundle(arch: ModelArch, rng: Rng, with_dg_components: bool = True,
                 n_domains: int | None = None, norm_stats=None) -> ModelBundle:
    """Initialize a bundle; each component draws from its own substream so
    shared components are bitwise identical across model variants."""
    encoder = Encoder.init(arch, rng.spawn("encoder"))
    head = Head.init(arch, rng.spawn("head"))
    projector = discriminator = adapter = domain_head = None
    if with_dg_components:
        projector = Projector.init(arch, rng.spawn("projector"))
        discriminator = Discriminator.init(arch, rng.spawn("discriminator"))
        adapter = FilmAdapter.init(arch, rng.spawn("adapter"))
    if n_domains is not None:
        domain_head = DomainClassifier.init(arch.enc_hidden, n_domains,
                                            rng.spawn("domain_head"))
    return ModelBundle(arch, encoder, head, projector, discriminator, adapter,
                       domain_head, norm_stats)
