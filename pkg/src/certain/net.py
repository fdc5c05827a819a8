"""Bimodal fusion classifier with exact reverse-mode gradients.

Sequence encoder: single GRU cell unrolled over the time axis, hidden states
mean-pooled. Image encoder: two 3x3 stride-2 convolutions with tanh, then a
tanh-affine layer. The two embeddings are concatenated and fed to a linear
logit head.

All parameters live in one flat vector ``theta`` whose layout is fixed at
construction; encoder parameters come first (``theta_h``) and the head last
(``theta_L``). Functions take ``theta`` explicitly so that sampled parameter
vectors can be pushed through the same code.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError

CHECKPOINT_FORMAT = "certain-ckpt/1"
_MAGIC = b"CERTAINCKPT\n"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _conv_out(n):
    return (n + 1) // 2


@dataclass
class ForwardOutput:
    logit: np.ndarray
    prob: np.ndarray
    embedding_ehr: np.ndarray
    embedding_cxr: np.ndarray


class FusionNet:
    """Parameter layout plus forward/backward for the fusion classifier.

    Args:
        dims: ``(T, F, H, W)`` input dimensions.
        d_embed: shared embedding width of both encoders.
        channels: output channels of the two convolution blocks.
    """

    def __init__(self, dims, d_embed=32, channels=(4, 8), seed=0, zero_head=False,
                 dtype=np.float64):
        self.dims = tuple(int(d) for d in dims)
        T, F, H, W = self.dims
        self.d_embed = d = int(d_embed)
        self.channels = c1, c2 = tuple(int(c) for c in channels)
        self.dtype = np.dtype(dtype)
        h1, w1 = _conv_out(H), _conv_out(W)
        h2, w2 = _conv_out(h1), _conv_out(w1)
        self._spatial = ((h1, w1), (h2, w2))
        shapes = [
            ("gru.wx", (F, 3 * d), F),
            ("gru.wh", (d, 3 * d), d),
            ("gru.b", (3 * d,), d),
            ("conv1.w", (c1, 1, 3, 3), 9),
            ("conv1.b", (c1,), 9),
            ("conv2.w", (c2, c1, 3, 3), 9 * c1),
            ("conv2.b", (c2,), 9 * c1),
            ("fc.w", (c2 * h2 * w2, d), c2 * h2 * w2),
            ("fc.b", (d,), c2 * h2 * w2),
            ("head.w", (2 * d,), 2 * d),
            ("head.b", (1,), 2 * d),
        ]
        self.layout = []
        offset = 0
        for name, shape, fan_in in shapes:
            size = int(np.prod(shape))
            self.layout.append((name, offset, shape, fan_in))
            offset += size
        self.n_params = offset
        self.n_head = 2 * d + 1
        self.n_encoder = offset - self.n_head
        self.params = self.init_params(seed, zero_head=zero_head)

    @property
    def partition(self):
        """Index slices of the encoder (``theta_h``) and head (``theta_L``) parameters."""
        return slice(0, self.n_encoder), slice(self.n_encoder, self.n_params)

    def init_params(self, seed, zero_head=False):
        rng = np.random.default_rng(seed)
        theta = np.empty(self.n_params, dtype=self.dtype)
        for name, offset, shape, fan_in in self.layout:
            size = int(np.prod(shape))
            bound = 1.0 / np.sqrt(fan_in)
            theta[offset:offset + size] = rng.uniform(-bound, bound, size=size)
        if zero_head:
            theta[self.partition[1]] = 0.0
        return theta

    def unpack(self, theta):
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        return {name: theta[off:off + int(np.prod(shape))].reshape(shape)
                for name, off, shape, _ in self.layout}

    def _check_inputs(self, seq, img):
        T, F, H, W = self.dims
        if seq.ndim != 3 or seq.shape[1:] != (T, F):
            raise ShapeError(f"seq batch must have shape (N, {T}, {F}), got {seq.shape}")
        if img.ndim != 3 or img.shape[1:] != (H, W):
            raise ShapeError(f"img batch must have shape (N, {H}, {W}), got {img.shape}")
        if seq.shape[0] != img.shape[0]:
            raise ShapeError("seq and img batches differ in size")

    # --- forward ----------------------------------------------------------

    def forward_batch(self, seq, img, theta=None, keep_cache=False):
        """Run a batch; returns ``ForwardOutput`` (and the backward cache)."""
        theta = self.params if theta is None else theta
        p = self.unpack(theta)
        seq = np.asarray(seq, dtype=self.dtype)
        img = np.asarray(img, dtype=self.dtype)
        self._check_inputs(seq, img)
        e_ehr, gru_cache = self._gru_forward(p, seq)
        e_cxr, cnn_cache = self._cnn_forward(p, img)
        feats = np.concatenate([e_ehr, e_cxr], axis=1)
        logit = feats @ p["head.w"] + p["head.b"][0]
        out = ForwardOutput(logit, sigmoid(logit), e_ehr, e_cxr)
        if keep_cache:
            return out, (p, feats, gru_cache, cnn_cache)
        return out

    def forward(self, sample, theta=None):
        """Single-sample forward; accepts anything with ``seq`` and ``img``."""
        out = self.forward_batch(sample.seq[None], sample.img[None], theta)
        return ForwardOutput(out.logit[0], out.prob[0], out.embedding_ehr[0],
                             out.embedding_cxr[0])

    def features(self, seq, img, theta=None):
        """Penultimate activations ``h(x)``: concatenated embeddings, width 2*d."""
        out = self.forward_batch(seq, img, theta)
        return np.concatenate([out.embedding_ehr, out.embedding_cxr], axis=1)

    def _gru_forward(self, p, seq):
        n, T, _ = seq.shape
        d = self.d_embed
        wx, wh, b = p["gru.wx"], p["gru.wh"], p["gru.b"]
        # input projections for all steps at once
        ax = seq @ wx + b
        h = np.zeros((n, d), dtype=self.dtype)
        total = np.zeros((n, d), dtype=self.dtype)
        cache = []
        for t in range(T):
            a = ax[:, t]
            hzr = h @ wh[:, :2 * d]
            z = sigmoid(a[:, :d] + hzr[:, :d])
            r = sigmoid(a[:, d:2 * d] + hzr[:, d:])
            rh = r * h
            cand = np.tanh(a[:, 2 * d:] + rh @ wh[:, 2 * d:])
            cache.append((h, z, r, rh, cand))
            h = (1.0 - z) * cand + z * h
            total += h
        return total / T, (seq, cache)

    def _cnn_forward(self, p, img):
        x0 = img[:, None]
        a1, patches1 = _conv_forward(x0, p["conv1.w"], p["conv1.b"])
        x1 = np.tanh(a1)
        a2, patches2 = _conv_forward(x1, p["conv2.w"], p["conv2.b"])
        x2 = np.tanh(a2)
        flat = x2.reshape(x2.shape[0], -1)
        e = np.tanh(flat @ p["fc.w"] + p["fc.b"])
        return e, (x0.shape, patches1, x1, patches2, x2, flat, e)

    # --- backward ---------------------------------------------------------

    def backward(self, cache, d_logit, d_ehr=None, d_cxr=None):
        """Gradient of ``sum_i d_logit[i]*logit[i] + <d_ehr[i], e_ehr[i]> + ...``.

        ``d_logit`` is the upstream gradient at each logit; ``d_ehr`` and
        ``d_cxr`` (optional) are upstream gradients at the embeddings. Returns
        a flat vector aligned with ``theta``.
        """
        p, feats, gru_cache, cnn_cache = cache
        g = np.zeros(self.n_params, dtype=self.dtype)
        gp = self.unpack(g)
        d_logit = np.asarray(d_logit, dtype=self.dtype)
        d = self.d_embed
        gp["head.w"][:] = feats.T @ d_logit
        gp["head.b"][:] = d_logit.sum()
        dfeats = d_logit[:, None] * p["head.w"][None, :]
        de_ehr = dfeats[:, :d]
        de_cxr = dfeats[:, d:]
        if d_ehr is not None:
            de_ehr = de_ehr + d_ehr
        if d_cxr is not None:
            de_cxr = de_cxr + d_cxr
        self._gru_backward(p, gp, gru_cache, de_ehr)
        self._cnn_backward(p, gp, cnn_cache, de_cxr)
        return g

    def _gru_backward(self, p, gp, gru_cache, de):
        seq, steps = gru_cache
        T = len(steps)
        d = self.d_embed
        wh = p["gru.wh"]
        wh_zr, wh_n = wh[:, :2 * d], wh[:, 2 * d:]
        dpool = de / T
        dh = np.zeros_like(dpool)
        dax = np.empty(seq.shape[:2] + (3 * d,), dtype=self.dtype)
        dwh = np.zeros_like(wh)
        for t in range(T - 1, -1, -1):
            h, z, r, rh, cand = steps[t]
            dh = dh + dpool
            dcand = dh * (1.0 - z)
            dz = dh * (h - cand)
            dh_prev = dh * z
            dan = dcand * (1.0 - cand * cand)
            dwh[:, 2 * d:] += rh.T @ dan
            drh = dan @ wh_n.T
            dr = drh * h
            dh_prev += drh * r
            dpz = dz * z * (1.0 - z)
            dpr = dr * r * (1.0 - r)
            dzr = np.concatenate([dpz, dpr], axis=1)
            dwh[:, :2 * d] += h.T @ dzr
            dh_prev += dzr @ wh_zr.T
            dax[:, t, :2 * d] = dzr
            dax[:, t, 2 * d:] = dan
            dh = dh_prev
        n, _, F = seq.shape
        gp["gru.wx"][:] = seq.reshape(-1, F).T @ dax.reshape(-1, 3 * d)
        gp["gru.wh"][:] = dwh
        gp["gru.b"][:] = dax.sum(axis=(0, 1))

    def _cnn_backward(self, p, gp, cnn_cache, de):
        x0_shape, patches1, x1, patches2, x2, flat, e = cnn_cache
        dpre = de * (1.0 - e * e)
        gp["fc.w"][:] = flat.T @ dpre
        gp["fc.b"][:] = dpre.sum(axis=0)
        dx2 = (dpre @ p["fc.w"].T).reshape(x2.shape)
        da2 = dx2 * (1.0 - x2 * x2)
        dx1 = _conv_backward(da2, patches2, p["conv2.w"], x1.shape,
                             gp["conv2.w"], gp["conv2.b"], need_input=True)
        da1 = dx1 * (1.0 - x1 * x1)
        _conv_backward(da1, patches1, p["conv1.w"], x0_shape,
                       gp["conv1.w"], gp["conv1.b"], need_input=False)

    # --- checkpoints ------------------------------------------------------

    def header(self):
        return {
            "dims": list(self.dims),
            "d_embed": self.d_embed,
            "channels": list(self.channels),
            "tensors": [{"name": name, "offset": off, "shape": list(shape)}
                        for name, off, shape, _ in self.layout],
            "partition": {"theta_h": [0, self.n_encoder],
                          "theta_L": [self.n_encoder, self.n_params]},
        }

    @classmethod
    def from_header(cls, header):
        return cls(header["dims"], header["d_embed"], header["channels"])


def _conv_forward(x, w, b):
    """3x3, stride 2, zero padding 1. ``x`` is (N, C, H, W)."""
    n, c, h, wd = x.shape
    ho, wo = _conv_out(h), _conv_out(wd)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.empty((n, ho, wo, c, 3, 3), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            patches[..., ki, kj] = xp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2].transpose(0, 2, 3, 1)
    cols = patches.reshape(n * ho * wo, c * 9)
    cout = w.shape[0]
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape, gw, gb, need_input):
    n, c, h, wd = x_shape
    cout = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw[:] = (dflat.T @ cols).reshape(w.shape)
    gb[:] = dflat.sum(axis=0)
    if not need_input:
        return None
    dcols = (dflat @ w.reshape(cout, -1)).reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:h + 1, 1:wd + 1]


# --- checkpoint files --------------------------------------------------------

def write_checkpoint(path, header, blocks):
    """Write named flat float64 blocks after a one-line JSON header.

    ``blocks`` maps block name to a 1-D array; offsets in the header are in
    elements from the start of the data section.
    """
    header = dict(header)
    header["format"] = CHECKPOINT_FORMAT
    offset = 0
    index = []
    for name, arr in blocks.items():
        index.append({"block": name, "offset": offset, "size": int(arr.size)})
        offset += int(arr.size)
    header["blocks"] = index
    payload = np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in blocks.values()])
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload.tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ParseError(f"{path} is not a checkpoint file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {header.get('format')!r}")
    data = np.frombuffer(raw[end + 1:], dtype="<f8")
    blocks = {}
    for entry in header["blocks"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["size"]]
        if chunk.size != entry["size"]:
            raise ParseError(f"checkpoint {path} is truncated")
        blocks[entry["block"]] = chunk.astype(np.float64)
    return header, blocks


def save_net(net, path, extra=None):
    header = net.header()
    header.update(extra or {})
    write_checkpoint(path, header, {"params": net.params})


def load_net(path):
    header, blocks = read_checkpoint(path)
    net = FusionNet.from_header(header)
    net.params = blocks["params"]
    return net, header
