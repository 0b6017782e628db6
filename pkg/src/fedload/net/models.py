"""Forecasting architectures on flat parameter vectors.

Three architectures are provided:

* ``stacked_lstm``    -- two stacked LSTM layers and a final dense layer.
* ``encoder_decoder`` -- LSTM encoder, a small dense latent bottleneck that is
  repeated for every output step, an LSTM decoder and two dense head layers.
* ``conv_seq2seq``    -- two 1-D convolutions, a two-layer LSTM encoder, a
  two-layer LSTM decoder and two dense head layers.

Each model knows its parameter layout, initializes deterministically from a
seed, and computes exact gradients of the batch-mean squared error.
"""

from dataclasses import dataclass

import numpy as np

from ..seeding import rng_for
from .layers import (
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    lstm_backward,
    lstm_forward,
    repeat_backward,
    repeat_forward,
)
from .params import ParamLayout, ParamVector

ARCHITECTURES = ("stacked_lstm", "encoder_decoder", "conv_seq2seq")


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector plus layer sizes and input/output lengths."""

    architecture: str
    input_len: int = 24
    output_len: int = 1
    lstm_hidden: tuple[int, ...] = (50, 50)
    encoder_units: int = 50
    latent_units: int = 12
    decoder_units: int = 50
    dense_units: int = 100
    conv_filters: tuple[int, ...] = (16, 16)
    conv_kernel: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        sizes = [self.input_len, self.output_len, self.encoder_units, self.latent_units,
                 self.decoder_units, self.dense_units, self.conv_kernel,
                 *self.lstm_hidden, *self.conv_filters]
        if any(int(s) < 1 for s in sizes):
            raise ValueError("all layer sizes and lengths must be >= 1")
        if self.architecture == "conv_seq2seq":
            shrink = len(self.conv_filters) * (self.conv_kernel - 1)
            if self.input_len - shrink < 1:
                raise ValueError(
                    f"input_len={self.input_len} too short for {len(self.conv_filters)} "
                    f"convolutions of width {self.conv_kernel}"
                )

    @classmethod
    def stacked_lstm(cls, input_len: int = 24, output_len: int = 1, hidden=(50, 50)) -> "ModelSpec":
        return cls("stacked_lstm", input_len, output_len, lstm_hidden=tuple(hidden))

    @classmethod
    def encoder_decoder(
        cls, input_len: int = 24, output_len: int = 1,
        encoder: int = 50, latent: int = 12, decoder: int = 50, dense: int = 100,
    ) -> "ModelSpec":
        return cls(
            "encoder_decoder", input_len, output_len,
            encoder_units=encoder, latent_units=latent, decoder_units=decoder, dense_units=dense,
        )

    @classmethod
    def conv_seq2seq(
        cls, input_len: int = 24, output_len: int = 1,
        conv_filters=(16, 16), kernel: int = 3, lstm_hidden=(50, 50), dense: int = 100,
    ) -> "ModelSpec":
        return cls(
            "conv_seq2seq", input_len, output_len,
            lstm_hidden=tuple(lstm_hidden), dense_units=dense,
            conv_filters=tuple(conv_filters), conv_kernel=kernel,
        )


def glorot_init(layout: ParamLayout, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    Matrices (in, out) use fan_in=in, fan_out=out; convolution kernels
    (k, in, out) use fan_in=k*in, fan_out=k*out. Draws happen in layout
    order from a single generator.
    """
    rng = rng_for(seed, "glorot")
    flat = np.empty(layout.size)
    off = 0
    for _, shape in layout.entries:
        n = int(np.prod(shape))
        if len(shape) == 1:
            flat[off : off + n] = 0.0
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                k = shape[0]
                fan_in, fan_out = k * shape[1], k * shape[2]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            flat[off : off + n] = rng.uniform(-limit, limit, size=n)
        off += n
    return ParamVector(flat, layout)


def _lstm_entries(name: str, c_in: int, hidden: int):
    return [
        (f"{name}.Wx", (c_in, 4 * hidden)),
        (f"{name}.Wh", (hidden, 4 * hidden)),
        (f"{name}.b", (4 * hidden,)),
    ]


def _dense_entries(name: str, d_in: int, d_out: int):
    return [(f"{name}.W", (d_in, d_out)), (f"{name}.b", (d_out,))]


class _Model:
    """Shared plumbing: layout handling, init, prediction, loss/gradient."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layout = ParamLayout(tuple(self._entries()))

    def _entries(self):
        raise NotImplementedError

    def init_params(self, seed: int) -> ParamVector:
        return glorot_init(self.layout, seed)

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_len:
            raise ShapeError(f"expected input of length {self.spec.input_len}, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ShapeError("non-finite values in model input")
        return x

    def forward(self, params: ParamVector, x) -> np.ndarray:
        """Predict output_len values for each input sequence."""
        xb = self._as_batch(x)
        y, _ = self._forward_cached(params, xb)
        return y[0] if np.asarray(x).ndim == 1 else y

    def loss_and_gradient(self, params: ParamVector, inputs, targets) -> tuple[float, ParamVector]:
        """Batch-mean MSE and its exact gradient in the params' layout."""
        xb = self._as_batch(inputs)
        yb = np.asarray(targets, dtype=np.float64).reshape(xb.shape[0], self.spec.output_len)
        if xb.shape[0] == 0:
            raise ShapeError("empty batch")
        pred, cache = self._forward_cached(params, xb)
        resid = pred - yb
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss}")
        dpred = 2.0 * resid / resid.size
        grads = self._backward(params, cache, dpred)
        return loss, ParamVector(grads, self.layout)

    def _forward_cached(self, params, xb):
        raise NotImplementedError

    def _backward(self, params, cache, dpred):
        raise NotImplementedError

    def _grad_writer(self):
        flat = np.zeros(self.layout.size)
        offsets = self.layout.offsets()

        def write(name, value):
            off, shape = offsets[name]
            flat[off : off + int(np.prod(shape))] = np.asarray(value).ravel()

        return flat, write


class StackedLstmModel(_Model):
    def _entries(self):
        h1, h2 = self.spec.lstm_hidden[0], self.spec.lstm_hidden[-1]
        if len(self.spec.lstm_hidden) != 2:
            raise ValueError("stacked_lstm expects exactly two hidden sizes")
        return (
            _lstm_entries("lstm1", 1, h1)
            + _lstm_entries("lstm2", h1, h2)
            + _dense_entries("out", h2, self.spec.output_len)
        )

    def _forward_cached(self, params, xb):
        p = params.unpack()
        x = xb[:, :, None]
        h1, c1 = lstm_forward(x, p["lstm1.Wx"], p["lstm1.Wh"], p["lstm1.b"])
        h2, c2 = lstm_forward(h1, p["lstm2.Wx"], p["lstm2.Wh"], p["lstm2.b"])
        y, cd = dense_forward(h2[:, -1, :], p["out.W"], p["out.b"], "linear")
        return y, (c1, c2, cd, h2.shape)

    def _backward(self, params, cache, dpred):
        p = params.unpack()
        c1, c2, cd, h2_shape = cache
        flat, write = self._grad_writer()
        dh2_last, dW, db = dense_backward(dpred, cd, p["out.W"])
        write("out.W", dW)
        write("out.b", db)
        dh2_seq = np.zeros(h2_shape)
        dh2_seq[:, -1, :] = dh2_last
        dh1_seq, dWx2, dWh2, db2 = lstm_backward(dh2_seq, c2)
        write("lstm2.Wx", dWx2)
        write("lstm2.Wh", dWh2)
        write("lstm2.b", db2)
        _, dWx1, dWh1, db1 = lstm_backward(dh1_seq, c1)
        write("lstm1.Wx", dWx1)
        write("lstm1.Wh", dWh1)
        write("lstm1.b", db1)
        return flat


class EncoderDecoderModel(_Model):
    """Sequence autoencoder head: the latent vector is repeated for each
    output step and decoded by a second LSTM."""

    def _entries(self):
        s = self.spec
        return (
            _lstm_entries("enc", 1, s.encoder_units)
            + _dense_entries("latent", s.encoder_units, s.latent_units)
            + _lstm_entries("dec", s.latent_units, s.decoder_units)
            + _dense_entries("head", s.decoder_units, s.dense_units)
            + _dense_entries("out", s.dense_units, 1)
        )

    def _forward_cached(self, params, xb):
        p = params.unpack()
        s = self.spec
        B = xb.shape[0]
        h_enc, c_enc = lstm_forward(xb[:, :, None], p["enc.Wx"], p["enc.Wh"], p["enc.b"])
        latent, c_lat = dense_forward(h_enc[:, -1, :], p["latent.W"], p["latent.b"], "linear")
        rep, _ = repeat_forward(latent, s.output_len)
        h_dec, c_dec = lstm_forward(rep, p["dec.Wx"], p["dec.Wh"], p["dec.b"])
        flat_dec = h_dec.reshape(B * s.output_len, s.decoder_units)
        hid, c_head = dense_forward(flat_dec, p["head.W"], p["head.b"], "relu")
        out, c_out = dense_forward(hid, p["out.W"], p["out.b"], "linear")
        y = out.reshape(B, s.output_len)
        return y, (c_enc, c_lat, c_dec, c_head, c_out, h_enc.shape, h_dec.shape)

    def _backward(self, params, cache, dpred):
        p = params.unpack()
        s = self.spec
        c_enc, c_lat, c_dec, c_head, c_out, enc_shape, dec_shape = cache
        flat, write = self._grad_writer()
        dout = dpred.reshape(-1, 1)
        dhid, dW, db = dense_backward(dout, c_out, p["out.W"])
        write("out.W", dW)
        write("out.b", db)
        dflat_dec, dW, db = dense_backward(dhid, c_head, p["head.W"])
        write("head.W", dW)
        write("head.b", db)
        dh_dec = dflat_dec.reshape(dec_shape)
        drep, dWx, dWh, db = lstm_backward(dh_dec, c_dec)
        write("dec.Wx", dWx)
        write("dec.Wh", dWh)
        write("dec.b", db)
        dlatent = repeat_backward(drep)
        dh_enc_last, dW, db = dense_backward(dlatent, c_lat, p["latent.W"])
        write("latent.W", dW)
        write("latent.b", db)
        dh_enc = np.zeros(enc_shape)
        dh_enc[:, -1, :] = dh_enc_last
        _, dWx, dWh, db = lstm_backward(dh_enc, c_enc)
        write("enc.Wx", dWx)
        write("enc.Wh", dWh)
        write("enc.b", db)
        return flat


class ConvSeq2SeqModel(_Model):
    """Convolutional front end feeding a stacked LSTM encoder/decoder."""

    def _entries(self):
        s = self.spec
        if len(s.conv_filters) != 2 or len(s.lstm_hidden) != 2:
            raise ValueError("conv_seq2seq expects two conv layers and two LSTM sizes")
        f1, f2 = s.conv_filters
        h1, h2 = s.lstm_hidden
        return (
            [("conv1.K", (s.conv_kernel, 1, f1)), ("conv1.b", (f1,))]
            + [("conv2.K", (s.conv_kernel, f1, f2)), ("conv2.b", (f2,))]
            + _lstm_entries("enc1", f2, h1)
            + _lstm_entries("enc2", h1, h2)
            + _lstm_entries("dec1", h2, h1)
            + _lstm_entries("dec2", h1, h2)
            + _dense_entries("head", h2, s.dense_units)
            + _dense_entries("out", s.dense_units, 1)
        )

    def _forward_cached(self, params, xb):
        p = params.unpack()
        s = self.spec
        B = xb.shape[0]
        a1, cc1 = conv1d_forward(xb[:, :, None], p["conv1.K"], p["conv1.b"], "relu")
        a2, cc2 = conv1d_forward(a1, p["conv2.K"], p["conv2.b"], "relu")
        he1, ce1 = lstm_forward(a2, p["enc1.Wx"], p["enc1.Wh"], p["enc1.b"])
        he2, ce2 = lstm_forward(he1, p["enc2.Wx"], p["enc2.Wh"], p["enc2.b"])
        rep, _ = repeat_forward(he2[:, -1, :], s.output_len)
        hd1, cd1 = lstm_forward(rep, p["dec1.Wx"], p["dec1.Wh"], p["dec1.b"])
        hd2, cd2 = lstm_forward(hd1, p["dec2.Wx"], p["dec2.Wh"], p["dec2.b"])
        flat_dec = hd2.reshape(B * s.output_len, s.lstm_hidden[1])
        hid, ch = dense_forward(flat_dec, p["head.W"], p["head.b"], "relu")
        out, co = dense_forward(hid, p["out.W"], p["out.b"], "linear")
        y = out.reshape(B, s.output_len)
        return y, (cc1, cc2, ce1, ce2, cd1, cd2, ch, co, he2.shape, hd2.shape)

    def _backward(self, params, cache, dpred):
        p = params.unpack()
        cc1, cc2, ce1, ce2, cd1, cd2, ch, co, enc2_shape, dec2_shape = cache
        flat, write = self._grad_writer()
        dout = dpred.reshape(-1, 1)
        dhid, dW, db = dense_backward(dout, co, p["out.W"])
        write("out.W", dW)
        write("out.b", db)
        dflat, dW, db = dense_backward(dhid, ch, p["head.W"])
        write("head.W", dW)
        write("head.b", db)
        dhd2 = dflat.reshape(dec2_shape)
        dhd1, dWx, dWh, db = lstm_backward(dhd2, cd2)
        write("dec2.Wx", dWx)
        write("dec2.Wh", dWh)
        write("dec2.b", db)
        drep, dWx, dWh, db = lstm_backward(dhd1, cd1)
        write("dec1.Wx", dWx)
        write("dec1.Wh", dWh)
        write("dec1.b", db)
        dhe2_last = repeat_backward(drep)
        dhe2 = np.zeros(enc2_shape)
        dhe2[:, -1, :] = dhe2_last
        dhe1, dWx, dWh, db = lstm_backward(dhe2, ce2)
        write("enc2.Wx", dWx)
        write("enc2.Wh", dWh)
        write("enc2.b", db)
        da2, dWx, dWh, db = lstm_backward(dhe1, ce1)
        write("enc1.Wx", dWx)
        write("enc1.Wh", dWh)
        write("enc1.b", db)
        da1, dK, db = conv1d_backward(da2, cc2)
        write("conv2.K", dK)
        write("conv2.b", db)
        _, dK, db = conv1d_backward(da1, cc1)
        write("conv1.K", dK)
        write("conv1.b", db)
        return flat


_MODEL_CLASSES = {
    "stacked_lstm": StackedLstmModel,
    "encoder_decoder": EncoderDecoderModel,
    "conv_seq2seq": ConvSeq2SeqModel,
}


def build_model(spec: ModelSpec) -> _Model:
    return _MODEL_CLASSES[spec.architecture](spec)
