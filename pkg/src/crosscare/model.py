"""GRU sequence model: recurrent featuriser plus feed-forward classifier.

Gate convention (fixed here since reasonable variants exist):

    r_t = sigmoid(x_t Wxr + h_{t-1} Whr + b_r)        reset
    z_t = sigmoid(x_t Wxz + h_{t-1} Whz + b_z)        update
    c_t = tanh(x_t Wxn + (r_t * h_{t-1}) Whn + b_n)   candidate
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

with h_0 = 0 per layer. Hidden states stay in [-1, 1] elementwise: h_t is a
convex combination of h_{t-1} and a tanh output.

The classifier applies tanh(z W1 + b1) then a linear map to one logit per
hour. Dropout (inverted, train mode only) is applied to the inputs of every
stacked GRU layer after the first and to the classifier input, so the
hyperparameter is live even for single-layer models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad


@dataclass
class ForwardPass:
    """Per-hour graph nodes from one forward call; each list has length T."""

    reprs: list  # GRU output fed to the classifier, (n, d) nodes
    hiddens: list  # classifier penultimate activations, (n, d) nodes
    logits: list  # (n, 1) nodes

    @property
    def n_steps(self) -> int:
        return len(self.logits)

    def logit_matrix(self) -> np.ndarray:
        """Detached (n, T) array of logit values."""
        return np.concatenate([n.value for n in self.logits], axis=1)


class GruNetwork:
    """The trainable model; parameters live as autodiff leaves."""

    def __init__(
        self,
        input_width: int,
        hidden_dim: int,
        n_layers: int = 1,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        if input_width < 1 or hidden_dim < 1:
            raise ValueError("input_width and hidden_dim must be >= 1")
        if not 1 <= n_layers <= 10:
            raise ValueError(f"n_layers must be in [1, 10], got {n_layers}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.input_width = input_width
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.dropout = dropout
        self.seed = seed

        rng = np.random.default_rng(seed)
        k = 1.0 / np.sqrt(hidden_dim)

        def weight(rows: int, cols: int) -> ad.Node:
            return ad.leaf(rng.uniform(-k, k, size=(rows, cols)))

        def bias(cols: int) -> ad.Node:
            return ad.leaf(np.zeros((1, cols)))

        self.params: dict[str, ad.Node] = {}
        d = hidden_dim
        for layer in range(n_layers):
            p = input_width if layer == 0 else d
            for gate in ("r", "z", "n"):
                self.params[f"gru{layer}.wx{gate}"] = weight(p, d)
                self.params[f"gru{layer}.wh{gate}"] = weight(d, d)
                self.params[f"gru{layer}.b{gate}"] = bias(d)
        self.params["cls.w1"] = weight(d, d)
        self.params["cls.b1"] = bias(d)
        self.params["cls.w2"] = weight(d, 1)
        self.params["cls.b2"] = bias(1)

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def parameters(self) -> list[ad.Node]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def get_values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for k, node in self.params.items():
            arr = np.asarray(values[k], dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {node.value.shape}")
            node.value = arr.copy()

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> ForwardPass:
        """Run the full model over a padded batch x of shape (n, T, P)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.input_width:
            raise ValueError(f"forward: expected (n, T, {self.input_width}) input, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("forward: non-finite input")
        n, T, _ = x.shape
        if T < 1:
            raise ValueError("forward: empty time axis")
        use_dropout = train and self.dropout > 0.0
        if use_dropout and dropout_rng is None:
            raise ValueError("forward: train-mode dropout needs a dropout_rng")

        def dropped(steps: list) -> list:
            if not use_dropout:
                return steps
            keep = 1.0 - self.dropout
            out = []
            for node in steps:
                mask = (dropout_rng.random(node.shape) < keep) / keep
                out.append(ad.mul(node, ad.constant(mask)))
            return out

        steps = [ad.constant(x[:, t, :]) for t in range(T)]
        d = self.hidden_dim
        for layer in range(self.n_layers):
            if layer > 0:
                steps = dropped(steps)
            wxr = self.params[f"gru{layer}.wxr"]
            whr = self.params[f"gru{layer}.whr"]
            br = self.params[f"gru{layer}.br"]
            wxz = self.params[f"gru{layer}.wxz"]
            whz = self.params[f"gru{layer}.whz"]
            bz = self.params[f"gru{layer}.bz"]
            wxn = self.params[f"gru{layer}.wxn"]
            whn = self.params[f"gru{layer}.whn"]
            bn = self.params[f"gru{layer}.bn"]
            h = ad.constant(np.zeros((n, d)))
            outputs = []
            for x_t in steps:
                r = ad.sigmoid(ad.add(ad.add(ad.matmul(x_t, wxr), ad.matmul(h, whr)), br))
                z = ad.sigmoid(ad.add(ad.add(ad.matmul(x_t, wxz), ad.matmul(h, whz)), bz))
                c = ad.tanh(ad.add(ad.add(ad.matmul(x_t, wxn), ad.matmul(ad.mul(r, h), whn)), bn))
                one_minus_z = ad.add(ad.scale(z, -1.0), ad.constant(1.0))
                h = ad.add(ad.mul(one_minus_z, h), ad.mul(z, c))
                outputs.append(h)
            steps = outputs

        reprs = dropped(steps)
        w1, b1 = self.params["cls.w1"], self.params["cls.b1"]
        w2, b2 = self.params["cls.w2"], self.params["cls.b2"]
        hiddens = [ad.tanh(ad.add(ad.matmul(z, w1), b1)) for z in reprs]
        logits = [ad.add(ad.matmul(hid, w2), b2) for hid in hiddens]
        return ForwardPass(reprs=reprs, hiddens=hiddens, logits=logits)


LOGIT_CLAMP = 30.0


def predict_probabilities(logits: np.ndarray, task_kind: str) -> np.ndarray:
    """Sigmoid probabilities from a detached (n, T) logit array.

    `task_kind` "single_at_24h" reduces to the final-hour column; "hourly"
    keeps one probability per hour. Logits are clamped to +-30 first so the
    exponential cannot overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"predict: expected (n, T) logits, got {logits.shape}")
    if task_kind == "single_at_24h":
        logits = logits[:, -1:]
    elif task_kind != "hourly":
        raise ValueError(f"predict: unknown task kind {task_kind!r}")
    s = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-s))


_CHECKPOINT_MAGIC = "crosscare-checkpoint-v1"


def save_checkpoint(model: GruNetwork, path: str, extra: Optional[dict] = None) -> None:
    """JSON header line + little-endian float64 parameter blob."""
    header = {
        "format": _CHECKPOINT_MAGIC,
        "input_width": model.input_width,
        "hidden_dim": model.hidden_dim,
        "n_layers": model.n_layers,
        "dropout": model.dropout,
        "seed": model.seed,
        "param_order": model.parameter_names(),
        "shapes": {k: list(v.value.shape) for k, v in model.params.items()},
        "extra": extra or {},
    }
    blob = b"".join(
        model.params[k].value.astype("<f8").tobytes() for k in model.parameter_names()
    )
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path: str) -> tuple[GruNetwork, dict]:
    with open(path, "rb") as fh:
        (head_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format") != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        model = GruNetwork(
            input_width=header["input_width"],
            hidden_dim=header["hidden_dim"],
            n_layers=header["n_layers"],
            dropout=header["dropout"],
            seed=header["seed"],
        )
        values = {}
        for name in header["param_order"]:
            shape = tuple(header["shapes"][name])
            count = shape[0] * shape[1]
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            values[name] = data.reshape(shape)
        model.set_values(values)
    return model, header.get("extra", {})
