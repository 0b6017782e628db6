"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Each communication round that adds Gaussian noise to a q-subsampled average
is one mechanism event. Events compose additively in Renyi space per order
alpha; the final (epsilon, delta) guarantee is the minimum conversion over
an order grid.

For integer orders the subsampled-Gaussian Renyi divergence is computed
exactly via the binomial expansion in log space; fractional orders use the
standard series upper bound, and orders where that series fails to converge
are excluded from the minimisation.
"""

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

from scipy import special


class AccountingError(ValueError):
    pass


# Dense fractional orders near 1 matter in the low-noise regime, where the
# optimal conversion order sits well below 2.
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [1.0 + k / 100.0 for k in range(1, 100)] + list(range(2, 65)) + [128.0, 256.0]
)


@dataclass(frozen=True)
class MechanismEvent:
    """One noised, subsampled aggregation round."""

    round_index: int
    q: float
    noise_multiplier: float

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise AccountingError(f"sampling ratio must be in (0,1], got {self.q}")
        if not self.noise_multiplier > 0:
            raise AccountingError(f"noise multiplier must be > 0, got {self.noise_multiplier}")


@dataclass(frozen=True)
class PrivacyLedger:
    """Append-only log of mechanism events plus the order grid."""

    events: tuple[MechanismEvent, ...] = ()
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        if any(a <= 1.0 for a in self.orders):
            raise AccountingError("all Renyi orders must exceed 1")
        rounds = [e.round_index for e in self.events]
        if rounds != sorted(rounds):
            raise AccountingError("events must be appended in round order")

    def append(self, event: MechanismEvent) -> "PrivacyLedger":
        if self.events and event.round_index < self.events[-1].round_index:
            raise AccountingError("event round index must not decrease")
        return PrivacyLedger(events=self.events + (event,), orders=self.orders)


def rdp_gaussian(alpha: float, noise_multiplier: float) -> float:
    """Renyi divergence of the unsubsampled Gaussian mechanism, sensitivity 1."""
    if alpha <= 1:
        raise AccountingError(f"order must exceed 1, got {alpha}")
    if noise_multiplier <= 0:
        raise AccountingError("noise multiplier must be > 0")
    return alpha / (2.0 * noise_multiplier**2)


def _log_add(logx: float, logy: float) -> float:
    a, b = min(logx, logy), max(logx, logy)
    if a == -math.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_comb(n: float, k: float) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """Exact log E[(P/Q)^alpha] for integer alpha via binomial expansion."""
    log_a = -math.inf
    log1mq = math.log1p(-q)
    logq = math.log(q)
    for i in range(alpha + 1):
        term = _log_comb(alpha, i) + i * logq + (alpha - i) * log1mq + (i * i - i) / (2.0 * sigma**2)
        log_a = _log_add(log_a, term)
    return log_a


_MAX_FRAC_TERMS = 1000


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """Series upper bound for fractional alpha; inf when it fails to converge."""
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    log1mq = math.log1p(-q)
    logq = math.log(q)
    last_s0 = last_s1 = -math.inf
    for i in range(_MAX_FRAC_TERMS):
        log_coef = _log_comb(alpha, i)
        j = alpha - i
        log_t0 = log_coef + i * logq + j * log1mq
        log_t1 = log_coef + j * logq + i * log1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma**2) + log_e1
        log_a0 = _log_add(log_a0, log_s0)
        log_a1 = _log_add(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if log_s0 < last_s0 and log_s1 < last_s1 and max(log_s0, log_s1) < total - 30.0:
            return total
        last_s0, last_s1 = log_s0, log_s1
    return math.inf


@lru_cache(maxsize=None)
def rdp_subsampled_gaussian(alpha: float, q: float, noise_multiplier: float) -> float:
    """Renyi divergence of the q-subsampled Gaussian mechanism at one order.

    Returns inf for orders whose fractional series does not converge; the
    composition simply skips those orders.
    """
    if not 0.0 < q <= 1.0:
        raise AccountingError(f"sampling ratio must be in (0,1], got {q}")
    if alpha <= 1:
        raise AccountingError(f"order must exceed 1, got {alpha}")
    if noise_multiplier <= 0:
        raise AccountingError("noise multiplier must be > 0")
    if q == 1.0:
        return rdp_gaussian(alpha, noise_multiplier)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, noise_multiplier, int(alpha))
    else:
        log_a = _log_a_frac(q, noise_multiplier, float(alpha))
    return log_a / (alpha - 1.0)


def total_rdp(ledger: PrivacyLedger, alpha: float) -> float:
    """Sum of per-event Renyi divergences at one order."""
    out = 0.0
    for (q, z), count in Counter((e.q, e.noise_multiplier) for e in ledger.events).items():
        out += count * rdp_subsampled_gaussian(alpha, q, z)
    return out


def compose_and_convert(ledger: PrivacyLedger, delta: float) -> tuple[float, float]:
    """(epsilon, best order) for the composed ledger at failure probability delta."""
    if not 0.0 < delta < 1.0:
        raise AccountingError(f"delta must be in (0,1), got {delta}")
    if not ledger.events:
        raise AccountingError("cannot convert an empty ledger")
    log_inv_delta = math.log(1.0 / delta)
    best = (math.inf, None)
    for alpha in ledger.orders:
        rdp = total_rdp(ledger, alpha)
        if not math.isfinite(rdp):
            continue
        eps = rdp + log_inv_delta / (alpha - 1.0)
        if eps < best[0]:
            best = (eps, alpha)
    if best[1] is None:
        raise AccountingError("no order produced a finite guarantee")
    return best


def epsilon_for_uniform_rounds(
    rounds: int, q: float, noise_multiplier: float, delta: float,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Convenience: epsilon after `rounds` identical subsampled-Gaussian rounds."""
    if rounds < 1:
        raise AccountingError("rounds must be >= 1")
    events = tuple(MechanismEvent(i, q, noise_multiplier) for i in range(rounds))
    return compose_and_convert(PrivacyLedger(events=events, orders=orders), delta)


def per_order_breakdown(ledger: PrivacyLedger, delta: float) -> list[tuple[float, float, float]]:
    """(alpha, total rdp, epsilon-at-alpha) rows for every convergent order."""
    rows = []
    log_inv_delta = math.log(1.0 / delta)
    for alpha in ledger.orders:
        rdp = total_rdp(ledger, alpha)
        if math.isfinite(rdp):
            rows.append((alpha, rdp, rdp + log_inv_delta / (alpha - 1.0)))
    return rows
