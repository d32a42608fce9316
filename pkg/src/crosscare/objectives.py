"""Training objectives over per-domain minibatches.

Six objectives share one contract: given the model and one batch per training
domain, produce an update direction for the optimizer. ERM averages the
per-domain losses. CORAL, VREx and Fishr add a differentiable penalty scaled
by a weight. GroupDRO reweights the per-domain losses through exponential
ascent on a simplex. MLDG builds its first-order meta direction from two
backward passes and never materialises a single loss node.

Penalty terms are only built when active: a disabled penalty (weight 0,
warm-up, frozen state) leaves the ERM graph untouched, so its gradients are
the ERM gradients, not merely close to them.

Conventions fixed here because the source material leaves them open:
  - the per-domain loss averages BCE over valid (stay, hour) cells, either
    pooled or stay-then-domain (`stay_averaged`);
  - CORAL's mean term uses the plain Euclidean norm (switchable to squared),
    its covariance term the squared Frobenius norm, covariances the unbiased
    1/(m-1) scaling;
  - VREx variance across domains is the population variance;
  - Fishr variance across samples is the unbiased sample variance, the
    penalty is the squared Euclidean distance to the cross-domain mean, and
    its EMA state starts at the first computed variance;
  - warm-up counters count optimizer steps, not epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import ForwardPass, GruNetwork

OBJECTIVES = ("erm", "coral", "vrex", "fishr", "mldg", "groupdro")


@dataclass
class DomainBatch:
    """One training domain's padded minibatch."""

    domain_id: str
    inputs: np.ndarray  # (n, T, P) float
    labels: np.ndarray  # (n, T) float 0/1; ignored where mask is False
    mask: np.ndarray  # (n, T) bool, True on labelled hours

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        n, t, _ = self.inputs.shape
        if self.labels.shape != (n, t) or self.mask.shape != (n, t):
            raise ValueError(
                f"batch {self.domain_id}: labels {self.labels.shape} / mask {self.mask.shape}"
                f" do not match inputs {self.inputs.shape}"
            )
        if n == 0:
            raise ValueError(f"batch {self.domain_id}: empty")
        if not self.mask.any(axis=1).all():
            raise ValueError(f"batch {self.domain_id}: a stay has no labelled hours")

    @property
    def n_stays(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class PenaltyConfig:
    """Per-objective hyperparameters, at their reference defaults."""

    coral_gamma: float = 1000.0
    coral_squared_mean_term: bool = False
    vrex_lambda: float = 1000.0
    vrex_warmup: int = 100
    fishr_lambda: float = 1000.0
    fishr_warmup: int = 100
    fishr_ema: float = 0.95
    mldg_beta: float = 1.0
    mldg_n_meta_test: int = 2
    groupdro_eta: float = 0.01

    def __post_init__(self) -> None:
        for name in ("coral_gamma", "vrex_lambda", "fishr_lambda", "mldg_beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.vrex_warmup < 0 or self.fishr_warmup < 0:
            raise ValueError("warm-up step counts must be >= 0")
        if not 0.0 <= self.fishr_ema <= 1.0:
            raise ValueError("fishr_ema must be in [0, 1]")
        if self.groupdro_eta <= 0:
            raise ValueError("groupdro_eta must be > 0")
        if self.mldg_n_meta_test < 0:
            raise ValueError("mldg_n_meta_test must be >= 0")


@dataclass
class GroupDroState:
    """Simplex weights over training domains, in a fixed domain order."""

    domain_ids: list[str]
    q: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.q is None:
            k = len(self.domain_ids)
            self.q = np.full(k, 1.0 / k)


@dataclass
class FishrState:
    """Per-domain EMA of the classifier-gradient variance."""

    smoothed: dict[str, np.ndarray] = field(default_factory=dict)


def domain_bce_loss(
    fp: ForwardPass, labels: np.ndarray, mask: np.ndarray, stay_averaged: bool = False
) -> ad.Node:
    """Scalar BCE over the labelled cells of one domain's forward pass.

    Pooled mode averages over all valid (stay, hour) cells; stay-averaged
    mode averages within each stay first, then across stays.
    """
    logit_mat = ad.concat_cols(fp.logits)  # (n, T)
    losses = ad.bce_with_logits(logit_mat, labels)
    mask_f = mask.astype(np.float64)
    masked = ad.mul(losses, ad.constant(mask_f))
    if stay_averaged:
        counts = mask_f.sum(axis=1, keepdims=True)
        per_stay = ad.mul(ad.sum_(masked, axis=1), ad.constant(1.0 / counts))
        return ad.mean(per_stay)
    return ad.scale(ad.sum_(masked), 1.0 / mask_f.sum())


def erm_loss(domain_losses: list[ad.Node]) -> ad.Node:
    """Uniform average of per-domain losses."""
    if not domain_losses:
        raise ValueError("erm_loss: no domains")
    return ad.mean(ad.concat_rows(domain_losses))


def flatten_valid_reprs(fp: ForwardPass, mask: np.ndarray) -> ad.Node:
    """Stack the representation rows of every valid (stay, hour) cell.

    Returns an (m, d) node where m counts valid cells; each time step is an
    independent observation.
    """
    pieces = []
    for t, node in enumerate(fp.reprs):
        idx = np.flatnonzero(mask[:, t])
        if idx.size:
            pieces.append(ad.gather_rows(node, idx))
    if not pieces:
        raise ValueError("flatten_valid_reprs: mask selects nothing")
    return ad.concat_rows(pieces)


def _column_mean_and_cov(z: ad.Node) -> tuple[ad.Node, ad.Node]:
    m = z.shape[0]
    if m < 2:
        raise ValueError(f"covariance needs >= 2 samples, got {m}")
    mu = ad.mean(z, axis=0)  # (1, d)
    colsum = ad.sum_(z, axis=0)  # (1, d)
    gram = ad.matmul(ad.transpose(z), z)  # (d, d)
    outer = ad.scale(ad.matmul(ad.transpose(colsum), colsum), 1.0 / m)
    cov = ad.scale(ad.sub(gram, outer), 1.0 / (m - 1))
    return mu, cov


def coral_penalty(domain_reprs: list[ad.Node], squared_mean_term: bool = False) -> ad.Node:
    """Mean/covariance alignment over all unordered domain pairs."""
    if len(domain_reprs) < 2:
        raise ValueError("coral_penalty: needs >= 2 domains")
    stats = [_column_mean_and_cov(z) for z in domain_reprs]
    mean_norm = ad.frob_sq if squared_mean_term else ad.euclid_norm
    terms = []
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            mu_i, cov_i = stats[i]
            mu_j, cov_j = stats[j]
            terms.append(mean_norm(ad.sub(mu_i, mu_j)))
            terms.append(ad.frob_sq(ad.sub(cov_i, cov_j)))
    return ad.sum_(ad.concat_rows(terms))


def vrex_penalty(domain_losses: list[ad.Node]) -> ad.Node:
    """Population variance of the per-domain losses."""
    if len(domain_losses) < 2:
        raise ValueError("vrex_penalty: needs >= 2 domains")
    return ad.var_rows(ad.concat_rows(domain_losses), ddof=0)


def per_sample_classifier_gradients(
    hiddens: ad.Node, logits: ad.Node, targets: np.ndarray
) -> ad.Node:
    """Closed-form per-sample BCE gradient w.r.t. the output layer.

    Row i is (sigma(logit_i) - y_i) * [h_i, 1], the exact gradient for the
    output weights and bias, expressed in graph ops so penalties built on it
    stay differentiable without double-backward.
    """
    m = hiddens.shape[0]
    y = np.asarray(targets, dtype=np.float64).reshape(m, 1)
    diff = ad.sub(ad.sigmoid(logits), ad.constant(y))  # (m, 1)
    basis = ad.concat_cols([hiddens, ad.constant(np.ones((m, 1)))])  # (m, d+1)
    return ad.mul(basis, diff)


def flatten_valid_pairs(
    nodes: list[ad.Node], mask: np.ndarray
) -> tuple[ad.Node, np.ndarray]:
    """Like flatten_valid_reprs but also returns the matching flat row order.

    The second result maps each output row to its (stay, hour) so labels can
    be flattened identically.
    """
    pieces = []
    order = []
    for t, node in enumerate(nodes):
        idx = np.flatnonzero(mask[:, t])
        if idx.size:
            pieces.append(ad.gather_rows(node, idx))
            order.extend((i, t) for i in idx)
    if not pieces:
        raise ValueError("flatten_valid_pairs: mask selects nothing")
    return ad.concat_rows(pieces), np.asarray(order, dtype=np.intp)


def fishr_domain_variance(
    fp: ForwardPass, labels: np.ndarray, mask: np.ndarray
) -> ad.Node:
    """Unbiased per-coordinate variance of the per-sample classifier gradients."""
    hid, order = flatten_valid_pairs(fp.hiddens, mask)
    logit, _ = flatten_valid_pairs(fp.logits, mask)
    y = labels[order[:, 0], order[:, 1]]
    grads = per_sample_classifier_gradients(hid, logit, y)
    return ad.var_rows(grads, ddof=1)


def fishr_penalty(
    domain_ids: list[str],
    domain_variances: list[ad.Node],
    state: FishrState,
    ema: float,
) -> ad.Node:
    """Squared distance of each (smoothed) domain variance to their mean.

    Mutates `state` with the new smoothed values. EMA initialises at the
    first computed variance; ema=1 freezes the state there, which also stops
    gradient flow through the penalty.
    """
    smoothed_nodes = []
    for domain_id, v_node in zip(domain_ids, domain_variances):
        prev = state.smoothed.get(domain_id)
        if prev is None:
            sm = v_node
        else:
            sm = ad.add(ad.scale(v_node, 1.0 - ema), ad.constant(ema * prev))
        state.smoothed[domain_id] = sm.value.copy()
        smoothed_nodes.append(sm)
    stacked = ad.concat_rows(smoothed_nodes)  # (k, d+1)
    vbar = ad.mean(stacked, axis=0)  # (1, d+1)
    sq = ad.square(ad.sub(stacked, vbar))
    return ad.mean(ad.sum_(sq, axis=1))


def groupdro_step(
    domain_losses: list[ad.Node], state: GroupDroState, eta: float
) -> tuple[ad.Node, np.ndarray]:
    """Exponential ascent on the loss weights, then the reweighted loss.

    Returns the loss node built with the UPDATED weights (as constants, so
    only model parameters receive gradients) and the new q. Mutates state.
    """
    if len(domain_losses) != len(state.q):
        raise ValueError("groupdro_step: loss count does not match state")
    values = np.array([l.value.item() for l in domain_losses])
    q = state.q * np.exp(eta * values)
    q = q / q.sum()
    state.q = q
    weighted = [ad.scale(l, q[e]) for e, l in enumerate(domain_losses)]
    total = weighted[0]
    for node in weighted[1:]:
        total = ad.add(total, node)
    return total, q


def mldg_split(
    domain_ids: list[str], n_meta_test: int, rng: np.random.Generator
) -> tuple[list[str], list[str]]:
    """Uniform random split into meta-train S and meta-test V.

    n_meta_test=0 is the degenerate full-domain mode (S = all, V = empty)
    used by the ERM-reduction contract.
    """
    if n_meta_test == 0:
        return list(domain_ids), []
    if len(domain_ids) < 2:
        raise ValueError("mldg_split: need >= 2 domains to split")
    if n_meta_test >= len(domain_ids):
        raise ValueError(
            f"mldg_split: n_meta_test={n_meta_test} leaves no meta-train domain"
            f" out of {len(domain_ids)}"
        )
    order = rng.permutation(len(domain_ids))
    test_idx = set(order[:n_meta_test].tolist())
    meta_test = [domain_ids[i] for i in sorted(test_idx)]
    meta_train = [d for i, d in enumerate(domain_ids) if i not in test_idx]
    return meta_train, meta_test


def _forward_losses(
    model: GruNetwork,
    batches: list[DomainBatch],
    train: bool,
    dropout_rng: Optional[np.random.Generator],
    stay_averaged: bool,
) -> tuple[list[ForwardPass], list[ad.Node]]:
    passes = []
    losses = []
    for batch in batches:
        fp = model.forward(batch.inputs, train=train, dropout_rng=dropout_rng)
        passes.append(fp)
        losses.append(domain_bce_loss(fp, batch.labels, batch.mask, stay_averaged))
    return passes, losses


def _grads_of(model: GruNetwork, loss: ad.Node) -> dict[str, np.ndarray]:
    ad.zero_grads(model.parameters())
    ad.backward(loss)
    return {name: node.grad.copy() for name, node in model.params.items()}


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    loss_value: float
    domain_loss_values: dict[str, float]
    penalty_value: float = 0.0


def compute_update(
    model: GruNetwork,
    batches: list[DomainBatch],
    objective: str,
    cfg: PenaltyConfig,
    step: int,
    groupdro_state: Optional[GroupDroState] = None,
    fishr_state: Optional[FishrState] = None,
    split_rng: Optional[np.random.Generator] = None,
    dropout_rng: Optional[np.random.Generator] = None,
    train: bool = True,
    stay_averaged: bool = False,
    mldg_inner_lr: float = 1e-3,
) -> StepResult:
    """One objective evaluation: parameter gradients plus loss diagnostics.

    `mldg_inner_lr` is the learning rate of MLDG's virtual inner step; the
    training loop passes its own optimizer rate.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "mldg":
        return _mldg_update(
            model, batches, cfg, split_rng, dropout_rng, train, stay_averaged, mldg_inner_lr
        )

    passes, losses = _forward_losses(model, batches, train, dropout_rng, stay_averaged)
    base = erm_loss(losses)
    penalty_value = 0.0
    total = base

    if objective == "coral" and cfg.coral_gamma > 0:
        reprs = [flatten_valid_reprs(fp, b.mask) for fp, b in zip(passes, batches)]
        pen = coral_penalty(reprs, cfg.coral_squared_mean_term)
        penalty_value = pen.value.item()
        total = ad.add(base, ad.scale(pen, cfg.coral_gamma))
    elif objective == "vrex" and cfg.vrex_lambda > 0 and step >= cfg.vrex_warmup:
        pen = vrex_penalty(losses)
        penalty_value = pen.value.item()
        total = ad.add(base, ad.scale(pen, cfg.vrex_lambda))
    elif objective == "fishr" and cfg.fishr_lambda > 0 and step >= cfg.fishr_warmup:
        if fishr_state is None:
            raise ValueError("fishr objective needs a FishrState")
        variances = [
            fishr_domain_variance(fp, b.labels, b.mask) for fp, b in zip(passes, batches)
        ]
        pen = fishr_penalty([b.domain_id for b in batches], variances, fishr_state, cfg.fishr_ema)
        penalty_value = pen.value.item()
        total = ad.add(base, ad.scale(pen, cfg.fishr_lambda))
    elif objective == "groupdro":
        if groupdro_state is None:
            raise ValueError("groupdro objective needs a GroupDroState")
        total, _ = groupdro_step(losses, state=groupdro_state, eta=cfg.groupdro_eta)

    grads = _grads_of(model, total)
    return StepResult(
        grads=grads,
        loss_value=total.value.item(),
        domain_loss_values={b.domain_id: l.value.item() for b, l in zip(batches, losses)},
        penalty_value=penalty_value,
    )


def _mldg_update(
    model: GruNetwork,
    batches: list[DomainBatch],
    cfg: PenaltyConfig,
    split_rng: Optional[np.random.Generator],
    dropout_rng: Optional[np.random.Generator],
    train: bool,
    stay_averaged: bool,
    inner_lr: float,
) -> StepResult:
    """First-order meta step: g_S at theta, beta * g_V at theta - inner_lr * g_S."""
    if split_rng is None:
        raise ValueError("mldg objective needs a split_rng")
    by_id = {b.domain_id: b for b in batches}
    s_ids, v_ids = mldg_split(list(by_id.keys()), cfg.mldg_n_meta_test, split_rng)
    s_batches = [by_id[d] for d in s_ids]

    _, s_losses = _forward_losses(model, s_batches, train, dropout_rng, stay_averaged)
    loss_s = erm_loss(s_losses)
    g_s = _grads_of(model, loss_s)
    domain_loss_values = {d: l.value.item() for d, l in zip(s_ids, s_losses)}

    if not v_ids or cfg.mldg_beta == 0:
        return StepResult(grads=g_s, loss_value=loss_s.value.item(), domain_loss_values=domain_loss_values)

    snapshot = model.get_values()
    model.set_values({k: snapshot[k] - inner_lr * g_s[k] for k in snapshot})
    v_batches = [by_id[d] for d in v_ids]
    _, v_losses = _forward_losses(model, v_batches, train, dropout_rng, stay_averaged)
    loss_v = erm_loss(v_losses)
    g_v = _grads_of(model, loss_v)
    model.set_values(snapshot)
    for d, l in zip(v_ids, v_losses):
        domain_loss_values[d] = l.value.item()

    grads = {k: g_s[k] + cfg.mldg_beta * g_v[k] for k in g_s}
    total = loss_s.value.item() + cfg.mldg_beta * loss_v.value.item()
    return StepResult(grads=grads, loss_value=total, domain_loss_values=domain_loss_values)
