"""Paired-layer construction showing that feedback + Hebb/Oja plasticity can
store a whole training set in a network's pre-readout activity.

Sizes, with J input bins and d target bins::

    phi(x) = [0, onehot_J(x), 0 (J*J*d), onehot_J(x)]      (dimension D = 1 + 2J + J*J*d)

There are N = J*J plastic layers, indexed 1..N with layer N next to the
input, and each is followed by a frozen identity "shield" layer. Layer i
corresponds to the bin pair (j, l) with ``i - 1 = J*j + l`` (0-based bins)
and to feedback slot ``J*j + l`` of the J*J*d block. Matrices ``G_i`` give
the map from phi to the input of layer i: ``G_{j,l}`` has ones at row 0,
columns of bins j and l, an identity on the last J coordinates, and
``eps * I`` everywhere. ``G_0`` keeps only the identity block and
``eps * I``. The forward weights are ``W_i = G_{i-1} G_i^{-1}``, preceded
by a frozen input layer ``G_N``.

Training on (x_k, y_k) sets every plastic layer's output to
``B_i onehot_d(y_k)`` (feedback strength 1) and applies the rule with the
feedforward input as presynaptic activity. To first order in alpha, the
test input's pre-readout vector z* then holds, in slot (j, l),

    sum_k onehot(y_k) * [g(x_k) g(x*) + (1 + 2 eps + 2 eps^2) [x_k == x*]]

where g(x) = 1 if x's bin is j or l. The Oja decay contributes nothing at
first order. :func:`decode` inverts this exactly.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

RULES = {"hebb": 0, "oja": 1}


class DecodeError(ValueError):
    """z* is not consistent with any multiset of training pairs."""


@dataclass(frozen=True)
class ConstructionConfig:
    J: int = 3
    d: int = 2
    K: int = 3
    alpha: float = 1e-4
    rule: str = "oja"
    eps: float = 1e-6
    x_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.J < 1 or self.d < 1 or self.K < 0:
            raise ValueError("J and d must be positive and K nonnegative")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {sorted(RULES)}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def N(self) -> int:
        return self.J * self.J

    @property
    def dim(self) -> int:
        return 1 + 2 * self.J + self.N * self.d

    @property
    def oja(self) -> int:
        return RULES[self.rule]


def discretize(v: float, lo: float, hi: float, bins: int) -> int:
    if not lo <= v <= hi:
        raise ValueError(f"value {v} outside discretizer range [{lo}, {hi}]")
    return min(int((v - lo) / (hi - lo) * bins), bins - 1)


def one_hot(i: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[i] = 1.0
    return out


@dataclass
class ConstructedNet:
    cfg: ConstructionConfig
    G: list[np.ndarray]  # G[0] .. G[N]
    B: list[np.ndarray]  # B[i] for i = 1..N; B[0] unused
    W: list[np.ndarray]  # W[i] for i = 1..N; W[0] unused
    inlet: np.ndarray  # frozen first layer, equal to G[N]
    shields: list[np.ndarray] = field(default_factory=list)

    def phi(self, x: float) -> np.ndarray:
        cfg = self.cfg
        bin_ = discretize(x, *cfg.x_range, cfg.J)
        v = np.zeros(cfg.dim)
        v[1 + bin_] = 1.0
        v[cfg.dim - cfg.J + bin_] = 1.0
        return v

    def varphi(self, y: float) -> np.ndarray:
        return one_hot(discretize(y, *self.cfg.y_range, self.cfg.d), self.cfg.d)


def layer_pair(i: int, J: int) -> tuple[int, int]:
    """0-based bin pair (j, l) of plastic layer i (1-based)."""
    return divmod(i - 1, J)


def slot_of(j: int, l: int, J: int) -> int:
    return J * j + l


def g_matrix(cfg: ConstructionConfig, pair: tuple[int, int] | None) -> np.ndarray:
    D, J = cfg.dim, cfg.J
    G = cfg.eps * np.eye(D)
    G[D - J :, D - J :] += np.eye(J)
    if pair is not None:
        j, l = pair
        G[0, 1 + j] += 1.0
        if l != j:
            G[0, 1 + l] += 1.0
    return G


def feedback_matrix(cfg: ConstructionConfig, pair: tuple[int, int]) -> np.ndarray:
    """D x d map writing onehot(y) into the pair's slot of the J*J*d block."""
    B = np.zeros((cfg.dim, cfg.d))
    start = 1 + cfg.J + slot_of(*pair, cfg.J) * cfg.d
    B[start : start + cfg.d, :] = np.eye(cfg.d)
    return B


def build_construction(cfg: ConstructionConfig) -> ConstructedNet:
    N, J = cfg.N, cfg.J
    G = [g_matrix(cfg, None)] + [g_matrix(cfg, layer_pair(i, J)) for i in range(1, N + 1)]
    B = [np.zeros((cfg.dim, cfg.d))] + [feedback_matrix(cfg, layer_pair(i, J)) for i in range(1, N + 1)]
    W = [np.zeros((cfg.dim, cfg.dim))]
    for i in range(1, N + 1):
        W.append(G[i - 1] @ np.linalg.inv(G[i]))
    shields = [np.eye(cfg.dim) for _ in range(N + 1)]
    return ConstructedNet(cfg, G, B, W, G[N].copy(), shields)


class NegativeActivation(AssertionError):
    pass


def _relu_checked(v: np.ndarray, tol: float) -> np.ndarray:
    if v.min(initial=0.0) < -tol:
        raise NegativeActivation(f"activation {v.min():.3g} below zero")
    return np.maximum(v, 0.0)


def _forward(net: ConstructedNet, W: list[np.ndarray], x: float, tol: float):
    """Returns the presynaptic input of every plastic layer and the output z."""
    a = _relu_checked(net.inlet @ net.phi(x), tol)
    pre = [None] * (net.cfg.N + 1)
    for i in range(net.cfg.N, 0, -1):
        pre[i] = a
        u = _relu_checked(W[i] @ a, tol)
        a = _relu_checked(net.shields[i] @ u, tol)
    return pre, a


def run_construction(
    net: ConstructedNet,
    pairs: list[tuple[float, float]],
    x_star: float,
    tol: float = 1e-8,
    return_weights: bool = False,
):
    """Simulate the learning procedure on ``pairs`` and return z* for ``x_star``.

    Every ReLU input is checked to be nonnegative up to ``tol``. The shield
    layers go through the same rule with plasticity 0 and must come out
    unchanged.
    """
    cfg = net.cfg
    W = [w.copy() for w in net.W]
    for x, y in pairs:
        pre, _ = _forward(net, W, x, tol)
        target = net.varphi(y)
        for i in range(1, cfg.N + 1):
            post = _relu_checked(net.B[i] @ target, tol)  # feedback strength 1
            delta = np.outer(post, pre[i])
            if cfg.oja:
                delta -= (post**2)[:, None] * W[i]
            W[i] = W[i] + cfg.alpha * delta
            shield_post = net.shields[i] @ W[i] @ pre[i]  # feedback strength 0
            net.shields[i] = net.shields[i] + 0.0 * (
                np.outer(shield_post, W[i] @ pre[i]) - cfg.oja * (shield_post**2)[:, None] * net.shields[i]
            )
    eye = np.eye(cfg.dim)
    if any(not np.array_equal(s, eye) for s in net.shields):
        raise AssertionError("a shield layer drifted from the identity")
    _, z = _forward(net, W, x_star, tol)
    return (z, W) if return_weights else z


def closed_form_z(net: ConstructedNet, pairs: list[tuple[float, float]], x_star: float) -> np.ndarray:
    """First-order expansion of z* in alpha, written with the G matrices."""
    cfg, G, B = net.cfg, net.G, net.B
    ps = net.phi(x_star)
    z = G[0] @ ps
    inv = [np.linalg.inv(g) for g in G]
    for x, y in pairs:
        pk, vy = net.phi(x), net.varphi(y)
        for i in range(1, cfg.N + 1):
            left = G[0] @ inv[i - 1]
            fb = B[i] @ vy
            z = z + cfg.alpha * (left @ fb) * float((G[i] @ pk) @ (G[i] @ ps))
            if cfg.oja:
                z = z - cfg.alpha * left @ ((fb**2) * (G[i - 1] @ ps))
    return z


@dataclass
class Decoded:
    x_star_bin: int
    pairs: Counter  # (x_bin, y_bin) -> count


def decode(z: np.ndarray, net: ConstructedNet, count_tol: float = 0.25) -> Decoded:
    """Recover the multiset of (x bin, y bin) pairs and the test bin from z*.

    Steps: read the test bin from the last J coordinates; subtract G_0 phi(x*)
    and divide by alpha; take the diagonal slot (a, a) of the test bin a as c;
    subtract c from every slot (a, i) and (i, a). Slot (a, l) then holds the
    target counts for input bin l != a. The counts for bin a are c divided by
    (2 + 2 eps + 2 eps^2), and every slot not involving a must hold the same
    counts times (1 + 2 eps + 2 eps^2). Values within 10*eps of zero count as
    zero. Any non-integer count or disagreement raises DecodeError.
    """
    cfg = net.cfg
    J, d, eps = cfg.J, cfg.d, cfg.eps
    a = int(np.argmax(z[cfg.dim - J :]))
    ps = np.zeros(cfg.dim)
    ps[1 + a] = ps[cfg.dim - J + a] = 1.0
    r = (z - net.G[0] @ ps) / cfg.alpha
    slots = r[1 + J : 1 + J + cfg.N * d].reshape(cfg.N, d).copy()
    slots[np.abs(slots) < 10 * eps] = 0.0

    self_term = 1.0 + 2 * eps + 2 * eps**2
    c = slots[slot_of(a, a, J)].copy()
    touched = {slot_of(a, i, J) for i in range(J)} | {slot_of(i, a, J) for i in range(J)}
    for s in touched:
        slots[s] -= c

    def as_counts(v: np.ndarray, what: str) -> np.ndarray:
        rounded = np.rint(v)
        if np.abs(v - rounded).max() > count_tol or (rounded < 0).any():
            raise DecodeError(f"{what} is not a count vector: {v}")
        return rounded.astype(int)

    counts = {a: as_counts(c / (1.0 + self_term), f"bin {a} counts")}
    for l in range(J):
        if l == a:
            continue
        fwd = as_counts(slots[slot_of(a, l, J)], f"slot ({a},{l})")
        back = as_counts(slots[slot_of(l, a, J)], f"slot ({l},{a})")
        if not np.array_equal(fwd, back):
            raise DecodeError(f"slots ({a},{l}) and ({l},{a}) disagree")
        counts[l] = fwd
    for j in range(J):
        for l in range(J):
            if a in (j, l):
                continue
            got = as_counts(slots[slot_of(j, l, J)] / self_term, f"slot ({j},{l})")
            if not np.array_equal(got, counts[a]):
                raise DecodeError(f"slot ({j},{l}) disagrees with the test-bin counts")

    pairs = Counter()
    for xb, vec in counts.items():
        for yb, n in enumerate(vec):
            if n:
                pairs[(xb, yb)] = int(n)
    return Decoded(a, pairs)


def ground_truth(net: ConstructedNet, pairs, x_star) -> Decoded:
    cfg = net.cfg
    return Decoded(
        discretize(x_star, *cfg.x_range, cfg.J),
        Counter(
            (discretize(x, *cfg.x_range, cfg.J), discretize(y, *cfg.y_range, cfg.d)) for x, y in pairs
        ),
    )


def verify(cfg: ConstructionConfig, n_trials: int = 100, seed: int = 0, net: ConstructedNet | None = None) -> dict:
    """Randomized build -> run -> decode round trips; failures are reported, not raised."""
    rng = np.random.default_rng(seed)
    net = net or build_construction(cfg)
    failures = []
    for trial in range(n_trials):
        xs = rng.uniform(*cfg.x_range, size=cfg.K)
        ys = rng.uniform(*cfg.y_range, size=cfg.K)
        x_star = float(rng.uniform(*cfg.x_range))
        pairs = list(zip(xs.tolist(), ys.tolist()))
        truth = ground_truth(net, pairs, x_star)
        try:
            got = decode(run_construction(net, pairs, x_star), net)
        except (DecodeError, NegativeActivation, FloatingPointError) as exc:
            failures.append({"trial": trial, "reason": str(exc)})
            continue
        if got.x_star_bin != truth.x_star_bin or got.pairs != truth.pairs:
            failures.append(
                {
                    "trial": trial,
                    "reason": "decoded multiset differs from ground truth",
                    "expected": _pairs_json(truth),
                    "decoded": _pairs_json(got),
                }
            )
    config = asdict(cfg)
    config["x_range"], config["y_range"] = list(cfg.x_range), list(cfg.y_range)
    return {
        "config": config,
        "trials": n_trials,
        "recovery_rate": (n_trials - len(failures)) / n_trials if n_trials else 1.0,
        "failures": failures,
    }


def _pairs_json(dec: Decoded) -> dict:
    return {
        "x_star_bin": dec.x_star_bin,
        "pairs": [[xb, yb, n] for (xb, yb), n in sorted(dec.pairs.items())],
    }
