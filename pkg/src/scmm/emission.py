"""Per-sentence emission construction from sparse reliability scores.

An LF's emission matrix is mostly determined by its diagonal (how often it
observes the right label), so the model predicts one reliability score per
LF and label, then expands the scores into a full row-stochastic base
prior.  Cross-LF disagreement statistics (weighted-XOR counts) refine the
off-diagonal entries, and the final emission is drawn from a Dirichlet
whose concentration is an affine blend of both priors.

Row layout everywhere: index [k, i, j] is the probability of LF k
observing label j when the latent label is i.  O sits at index 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, as_tensor, concat, maximum, where
from .nn import DenseLayer, dense_apply

RELIABILITY_LEVELS = ("label", "entity")


@dataclass(frozen=True)
class EmissionHyper:
    """Shape parameters of the reliability calibration and expansion.

    h_r defaults to 1/K and the g split points to fractions of 1/L; the
    None fields are resolved once K and L are known.  g keeps separate
    split points because training narrows it after the first stage.
    """

    h_n: float = 1.2
    h_s: float = 1.5
    h_r: float | None = None          # None -> 1/K
    g_n: float = 4.0
    g_r_s1: float | None = None       # None -> 1/(2L)
    g_r_s23: float | None = None      # None -> 1/(20L)
    nu_base: float = 2.0
    nu_expan: float = 1000.0
    reliability_level: str = "entity"

    def __post_init__(self):
        if self.h_n <= 0 or self.h_s <= 0:
            raise ValueError("h exponents must be positive")
        if self.g_n <= 1:
            raise ValueError("g exponent must exceed 1")
        if self.nu_base <= 0 or self.nu_expan <= 0:
            raise ValueError("concentration scales must be positive")
        if self.reliability_level not in RELIABILITY_LEVELS:
            raise ValueError(f"reliability_level must be one of {RELIABILITY_LEVELS}")
        for name in ("h_r", "g_r_s1", "g_r_s23"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0,1)")

    def resolved(self, n_lfs: int, n_labels: int) -> "EmissionHyper":
        return replace(
            self,
            h_r=self.h_r if self.h_r is not None else 1.0 / n_lfs,
            g_r_s1=self.g_r_s1 if self.g_r_s1 is not None else 1.0 / (2 * n_labels),
            g_r_s23=self.g_r_s23 if self.g_r_s23 is not None else 1.0 / (20 * n_labels),
        )

    def g_r_for_stage(self, stage: int) -> float:
        return self.g_r_s1 if stage == 1 else self.g_r_s23


@dataclass
class ReliabilityBundle:
    """Reliability head outputs per sentence batch, all (B, K, L)."""

    logits: Tensor
    normalized: Tensor
    scaled: Tensor


@dataclass
class WxorTable:
    """Corpus-aggregated disagreement statistics, fixed after stage 1."""

    w_hat: np.ndarray    # (K, L, L) mean per-token score given LF k observed q
    w_tilde: np.ndarray  # (K, L, L) column-normalized over valid queries
    counts: np.ndarray   # (K, L)   times LF k observed each label


@dataclass
class EmissionBundle:
    base_prior: Tensor      # (B, K, L, L)
    scale: Tensor | None    # (B, K, L)
    addon_prior: Tensor | None
    concentration: Tensor   # (B, K, L, L)
    emission: Tensor        # (B, K, L, L)


# -- scaling function h --------------------------------------------------------

def scale_h(a, n: float, s: float, r: float):
    """Piecewise recalibration of a score in [0,1], fixing h(0)=0 and h(1)=1.

    With u = a^(1/s): u^n / r^(n-1) below the split u < r, and
    1 - (1-u)^n / (1-r)^(n-1) above it.  Both branches meet at h = r.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("h input must lie in [0,1]")
    if not 0.0 < r < 1.0:
        raise ValueError("h split point must lie in (0,1)")
    if n <= 0 or s <= 0:
        raise ValueError("h exponents must be positive")
    u = a ** (1.0 / s)
    lo = u ** n / r ** (n - 1.0)
    hi = 1.0 - (1.0 - u) ** n / (1.0 - r) ** (n - 1.0)
    out = np.where(u < r, lo, hi)
    return float(out) if out.ndim == 0 else out


def h_apply(a: Tensor, n: float, s: float, r: float) -> Tensor:
    u = a ** (1.0 / s)
    lo = u ** n * (r ** -(n - 1.0))
    hi = 1.0 - ((1.0 - u) ** n) * ((1.0 - r) ** -(n - 1.0))
    return where(u.data < r, lo, hi)


# -- expansion function g ------------------------------------------------------

def _g_coeff(n: float, r: float, n_labels: int) -> float:
    # chosen so the polynomial and linear branches meet smoothly at r
    return (2.0 - n_labels) / ((n - 1.0) * r ** n - n * r ** (n - 1.0))


def expand_g(a, n: float, r: float, n_labels: int):
    """Emit-to-O curve: 1 at score 0, 0 at score 1, polynomial below the
    split and linear above it.

    Floored at 0: with a split point beyond ~1/(L-1) the polynomial branch
    dips negative, which would push expanded rows off the simplex.  The
    published split points never reach the floor.
    """
    a = np.asarray(a, dtype=np.float64)
    c = _g_coeff(n, r, n_labels)
    g_r = c * r ** n + (1.0 - n_labels) * r + 1.0
    lo = c * a ** n + (1.0 - n_labels) * a + 1.0
    hi = g_r * (a - 1.0) / (r - 1.0)
    out = np.maximum(np.where(a <= r, lo, hi), 0.0)
    return float(out) if out.ndim == 0 else out


def g_apply(a: Tensor, n: float, r: float, n_labels: int) -> Tensor:
    c = _g_coeff(n, r, n_labels)
    g_r = c * r ** n + (1.0 - n_labels) * r + 1.0
    lo = a ** n * c + a * (1.0 - n_labels) + 1.0
    hi = (a - 1.0) * (g_r / (r - 1.0))
    return maximum(where(a.data <= r, lo, hi), 0.0)


# -- reliability head ----------------------------------------------------------

def predict_reliability(e0: Tensor | np.ndarray, layer: DenseLayer,
                        hyper: EmissionHyper, n_lfs: int,
                        entity_map: np.ndarray | None = None) -> ReliabilityBundle:
    """Predict per-LF reliability scores from sentence embeddings.

    e0 is (B, d).  The head emits K scores per label (or per entity slot,
    broadcast to B/I via entity_map before any normalization).  Column 0
    (the O score) goes through a sigmoid; every other column is softmaxed
    across LFs so at least one LF stays confident per label.  The piecewise
    h then de-correlates the softmax pool.
    """
    e0 = as_tensor(e0)
    if e0.ndim == 1:
        e0 = e0.reshape(1, -1)
    out = dense_apply(layer, e0)
    batch = out.shape[0]
    if hyper.reliability_level == "entity":
        if entity_map is None:
            raise ValueError("entity-level reliability needs an entity_map")
        n_slots = int(entity_map.max()) + 1
        logits = out.reshape(batch, n_lfs, n_slots).take(entity_map, axis=2)
    else:
        logits = out.reshape(batch, n_lfs, -1)
    o_score = logits[:, :, :1].sigmoid()
    rest = logits[:, :, 1:].softmax(axis=1)
    normalized = concat([o_score, rest], axis=2)
    safe = normalized.clip(1e-12, 1.0 - 1e-12)
    scaled = h_apply(safe, hyper.h_n, hyper.h_s, hyper.h_r)
    return ReliabilityBundle(logits=logits, normalized=normalized, scaled=scaled)


# -- base prior expansion ------------------------------------------------------

def expand_base_prior(atilde: Tensor, hyper: EmissionHyper, n_labels: int,
                      stage: int = 1) -> Tensor:
    """Expand (B, K, L) reliability scores into (B, K, L, L) stochastic rows.

    Row i places the score on the diagonal; the O row spreads the rest
    uniformly; entity rows emit to O along g and split the remainder
    evenly over the other entity labels.
    """
    if n_labels < 3:
        raise ValueError("label set without entities is unsupported")
    eye = np.eye(n_labels)
    m_orow = np.zeros((n_labels, n_labels))
    m_orow[0, 1:] = 1.0
    m_col0 = np.zeros((n_labels, n_labels))
    m_col0[1:, 0] = 1.0
    m_off = 1.0 - eye
    m_off[0, :] = 0.0
    m_off[:, 0] = 0.0

    a = atilde.reshape(*atilde.shape, 1)
    g = g_apply(atilde, hyper.g_n, hyper.g_r_for_stage(stage), n_labels)
    g = g.reshape(*g.shape, 1)
    lam = (a * eye
           + (1.0 - a) * (1.0 / (n_labels - 1)) * m_orow
           + g * m_col0
           + (1.0 - a - g) * (1.0 / (n_labels - 2)) * m_off)
    return maximum(lam, 0.0)


# -- weighted-XOR statistics ---------------------------------------------------

def wxor_token(obs_t: np.ndarray, atilde: np.ndarray) -> np.ndarray:
    """Disagreement scores for one token.

    W[k, q, g] couples LF k's uncertainty about its own observation q with
    the summed confidence of LFs observing g.  The O row/column and the
    diagonal stay exactly zero.
    """
    n_lfs, n_labels = atilde.shape
    w = np.zeros((n_lfs, n_labels, n_labels))
    support = np.zeros(n_labels)
    for k in range(n_lfs):
        o = obs_t[k]
        if o >= 1:
            support[o] += atilde[k, o]
    for k in range(n_lfs):
        q = obs_t[k]
        if q >= 1:
            w[k, q, :] = (1.0 - atilde[k, q]) * support
            w[k, q, q] = 0.0
    return w


def wxor_aggregate(sentences, n_labels: int) -> WxorTable:
    """Accumulate per-token scores over a corpus and normalize.

    `sentences` yields (obs, atilde) pairs: the (K, T) observation grid
    and that sentence's (K, L) reliability scores.  The aggregate divides
    by how often each LF observed each query label (0/0 -> 0), then
    normalizes each (k, target) column by softmax over the structurally
    valid queries, leaving columns with no mass at zero.
    """
    first = True
    num = den = None
    n_lfs = 0
    for obs, atilde in sentences:
        if first:
            n_lfs = obs.shape[0]
            num = np.zeros((n_lfs, n_labels, n_labels))
            den = np.zeros((n_lfs, n_labels))
            first = False
        n_tok = obs.shape[1]
        k_grid = np.repeat(np.arange(n_lfs), n_tok)
        o_flat = obs.reshape(-1)
        np.add.at(den, (k_grid, o_flat), 1.0)

        rel = atilde[np.arange(n_lfs)[:, None], obs]      # (K, T)
        active = obs >= 1
        support = np.zeros((n_tok, n_labels))
        t_grid = np.tile(np.arange(n_tok), n_lfs)
        np.add.at(support, (t_grid[active.reshape(-1)], o_flat[active.reshape(-1)]),
                  rel.reshape(-1)[active.reshape(-1)])

        uncert = (1.0 - rel) * active                      # (K, T)
        sel = active.reshape(-1)
        contrib = uncert.reshape(-1)[sel, None] * support[t_grid[sel]]
        np.add.at(num, (k_grid[sel], o_flat[sel]), contrib)
    if first:
        raise ValueError("empty corpus")
    # the q == g accumulation above is structural noise: zero it exactly,
    # along with the O row/column
    diag = np.arange(n_labels)
    num[:, diag, diag] = 0.0

    w_hat = np.divide(num, den[:, :, None],
                      out=np.zeros_like(num), where=den[:, :, None] > 0)
    w_hat[:, 0, :] = 0.0
    w_hat[:, :, 0] = 0.0

    valid = np.ones((n_labels, n_labels), dtype=bool)
    valid[0, :] = False
    valid[:, 0] = False
    np.fill_diagonal(valid, False)

    w_tilde = np.zeros_like(w_hat)
    for k in range(n_lfs):
        for g in range(1, n_labels):
            col = w_hat[k, :, g]
            mask = valid[:, g]
            if col[mask].max(initial=0.0) > 0.0:
                e = np.exp(col[mask] - col[mask].max())
                w_tilde[k, mask, g] = e / e.sum()
    return WxorTable(w_hat=w_hat, w_tilde=w_tilde, counts=den)


# -- addon prior ---------------------------------------------------------------

def build_addon(e0: Tensor | np.ndarray, scale_layer: DenseLayer,
                w_tilde: np.ndarray) -> tuple[Tensor, Tensor]:
    """Scale the fixed disagreement table into the addon prior.

    The scale C is per (LF, query label); the addon transposes the table so
    the target label sits on the latent-state axis:
    addon[b, k, g, q] = C[b, k, q] * w_tilde[k, q, g].
    """
    e0 = as_tensor(e0)
    if e0.ndim == 1:
        e0 = e0.reshape(1, -1)
    n_lfs, n_labels, _ = w_tilde.shape
    out = dense_apply(scale_layer, e0)
    scale = out.reshape(out.shape[0], n_lfs, n_labels).sigmoid()
    table_t = np.ascontiguousarray(np.swapaxes(w_tilde, 1, 2))   # [k, g, q]
    addon = scale.reshape(scale.shape[0], n_lfs, 1, n_labels) * Tensor(table_t)
    return scale, addon


def build_concentration(base_prior: Tensor, addon_prior: Tensor | None,
                        hyper: EmissionHyper) -> Tensor:
    total = base_prior if addon_prior is None else base_prior + addon_prior
    return total * hyper.nu_expan + hyper.nu_base


# -- Dirichlet sampling --------------------------------------------------------

def sample_emission(omega: Tensor, mode: str, rng: np.random.Generator | None = None,
                    grad_mode: str = "mean-path") -> Tensor:
    """Turn concentrations into emission rows.

    mean mode divides each row by its sum (exact gradient); sample mode
    draws normalized Gammas.  Sample gradients either follow the mean's
    Jacobian (mean-path) or implicitly differentiate the Gamma CDF in the
    shape parameter (implicit).
    """
    if not np.isfinite(omega.data).all():
        raise ValueError("non-finite concentration")
    if np.any(omega.data <= 0):
        raise ValueError("concentration must be strictly positive")
    if mode == "mean":
        return omega / omega.sum(axis=-1, keepdims=True)
    if mode != "sample":
        raise ValueError(f"unknown emission mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    draws = rng.standard_gamma(omega.data)
    draws = np.maximum(draws, 1e-300)
    total = draws.sum(axis=-1, keepdims=True)
    phi = draws / total

    if grad_mode == "mean-path":
        def bwd(g):
            s = omega.data.sum(axis=-1, keepdims=True)
            m = omega.data / s
            return ((g - (g * m).sum(axis=-1, keepdims=True)) / s,)
    elif grad_mode == "implicit":
        def bwd(g):
            from scipy import special
            g_y = (g - (g * phi).sum(axis=-1, keepdims=True)) / total
            alpha = omega.data
            step = 1e-5 * np.maximum(alpha, 1.0)
            dF_da = (special.gammainc(alpha + step, draws)
                     - special.gammainc(alpha - step, draws)) / (2 * step)
            logpdf = ((alpha - 1) * np.log(draws) - draws - special.gammaln(alpha))
            dy_da = -dF_da / np.exp(logpdf)
            return (g_y * dy_da,)
    else:
        raise ValueError(f"unknown dirichlet gradient mode {grad_mode!r}")
    return Tensor._make(phi, (omega,), bwd)
