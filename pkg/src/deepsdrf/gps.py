"""Generalized propensity score by orthonormal-basis conditional density
estimation.

Doses are rescaled to ``z in [0, 1]`` and the conditional density is expanded
as ``f(z | x) = sum_j beta_j(x) phi_j(z)``. A network maps the covariate
history to the coefficients and is trained on the CDE loss

    mean_i [ integral f(z | x_i)^2 dz - 2 f(z_i | x_i) ]

whose first term is ``sum_j beta_j^2`` by orthonormality. Each member keeps
only its first ``n_active`` terms, chosen by the CDE loss on a held-out split
(the usual series-truncation tuning). Each member density is clipped at zero
and renormalized; the ensemble averages members.
"""
from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dgp import PatientPanel
from .windows import flatten_steps, history_windows

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
_NORM_GRID = 2048


@dataclass(frozen=True)
class BasisSpec:
    kind: str = "cosine"
    num_basis_j: int = 45
    rescale_lo: float = 0.0
    rescale_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cosine", "haar"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.num_basis_j < 1:
            raise ValueError("num_basis_j must be >= 1")
        if not self.rescale_lo < self.rescale_hi:
            raise ValueError("rescale_lo must be < rescale_hi")

    @property
    def width(self) -> float:
        return self.rescale_hi - self.rescale_lo

    def to_unit(self, a):
        """Rescale doses to [0, 1]; returns ``(z, n_clipped)``."""
        z = (np.asarray(a, dtype=float) - self.rescale_lo) / self.width
        n_clipped = int(np.count_nonzero((z < 0) | (z > 1)))
        return np.clip(z, 0.0, 1.0), n_clipped


def _haar(z, J):
    z = np.minimum(z, np.nextafter(1.0, 0.0))
    out = np.empty(z.shape + (J,))
    out[..., 0] = 1.0
    j, level = 1, 0
    while j < J:
        scale = 2.0**level
        for k in range(int(scale)):
            if j >= J:
                break
            y = scale * z - k
            out[..., j] = np.sqrt(scale) * (((y >= 0) & (y < 0.5)) * 1.0 - ((y >= 0.5) & (y < 1)) * 1.0)
            j += 1
        level += 1
    return out


def basis_unit(kind: str, z, J: int) -> np.ndarray:
    """Orthonormal basis on [0, 1] evaluated at ``z``: ``[..., J]``."""
    z = np.asarray(z, dtype=float)
    if kind == "cosine":
        j = np.arange(J)
        out = np.sqrt(2.0) * np.cos(np.pi * j * z[..., None])
        out[..., 0] = 1.0
        return out
    if kind == "haar":
        return _haar(z, J)
    raise ValueError(f"unknown basis kind {kind!r}")


def eval_basis(spec: BasisSpec, a, return_clipped: bool = False):
    z, n_clipped = spec.to_unit(a)
    out = basis_unit(spec.kind, z, spec.num_basis_j)
    return (out, n_clipped) if return_clipped else out


@dataclass
class GpsEnsemble:
    members: list
    basis: BasisSpec
    history_u: int = 1
    meta: dict = field(default_factory=dict)
    n_active: tuple = ()  # per-member truncation; empty means all J terms

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if not self.n_active:
            object.__setattr__(self, "n_active", (self.basis.num_basis_j,) * len(self.members))
        object.__setattr__(self, "n_active", tuple(int(k) for k in self.n_active))
        if len(self.n_active) != len(self.members) or not all(
            1 <= k <= self.basis.num_basis_j for k in self.n_active
        ):
            raise ValueError("n_active needs one count in [1, J] per member")

    @property
    def ensemble_m(self) -> int:
        return len(self.members)

    def evaluator(self, windows, mask=None) -> "GpsEvaluator":
        """Precompute coefficients and normalizers for a batch of windows ``[n, u, D]``."""
        coefs = np.stack([net.predict(windows, mask) for net in self.members])
        for k, n in enumerate(self.n_active):
            coefs[k, :, n:] = 0.0
        return GpsEvaluator(self.basis, coefs)

    def member_density(self, a, windows, mask=None) -> np.ndarray:
        return self.evaluator(windows, mask).member_density(a)

    def density(self, a, windows, mask=None) -> np.ndarray:
        return self.member_density(a, windows, mask).mean(axis=0)

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        manifest = {
            "version": BUNDLE_VERSION,
            "kind": "gps",
            "basis": asdict(self.basis),
            "history_u": self.history_u,
            "members": [f"member_{k:03d}.json" for k in range(self.ensemble_m)],
            "n_active": list(self.n_active),
            "meta": self.meta,
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for name, net in zip(manifest["members"], self.members):
                zf.writestr(name, json.dumps(net.to_dict()))

    @classmethod
    def load(cls, path) -> "GpsEnsemble":
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != BUNDLE_VERSION or manifest.get("kind") != "gps":
                raise ValueError(f"{path} is not a GPS bundle of version {BUNDLE_VERSION}")
            members = [nn.Network.from_dict(json.loads(zf.read(n))) for n in manifest["members"]]
        return cls(members, BasisSpec(**manifest["basis"]), manifest["history_u"],
                   manifest.get("meta", {}), tuple(manifest.get("n_active", ())))


class GpsEvaluator:
    """Member densities for a fixed batch of covariate windows."""

    def __init__(self, basis: BasisSpec, coefs: np.ndarray):
        self.basis = basis
        self.coefs = coefs  # [m, n, J]
        zg = (np.arange(_NORM_GRID) + 0.5) / _NORM_GRID
        phi = basis_unit(basis.kind, zg, basis.num_basis_j)  # [G, J]
        mass = np.zeros(coefs.shape[:2])
        # chunk over windows to bound the [m, chunk, G] intermediate
        step = max(1, 2_000_000 // (_NORM_GRID * coefs.shape[0]))
        for i in range(0, coefs.shape[1], step):
            raw = coefs[:, i : i + step] @ phi.T
            mass[:, i : i + step] = np.maximum(raw, 0.0).mean(axis=2)
        self.degenerate = mass <= 1e-12
        self.mass = np.where(self.degenerate, 1.0, mass)
        self.n_clipped = 0

    def member_density(self, a) -> np.ndarray:
        """``[m, n]`` densities in dose units; ``a`` is scalar or ``[n]``."""
        phi, n_clipped = eval_basis(self.basis, a, return_clipped=True)
        self.n_clipped += n_clipped
        if phi.ndim == 1:
            raw = self.coefs @ phi
        else:
            raw = np.einsum("mnj,nj->mn", self.coefs, phi)
        dens = np.maximum(raw, 0.0) / self.mass
        dens = np.where(self.degenerate, 1.0, dens)
        return dens / self.basis.width

    def density(self, a) -> np.ndarray:
        return self.member_density(a).mean(axis=0)


def gps_training_rows(panel: PatientPanel, u: int):
    """Covariate windows and doses for every observed patient-step."""
    windows, mask = history_windows(panel.covariates, u)
    w, m = flatten_steps(windows, mask)
    steps = np.arange(panel.n_steps)[None, :]
    observed = (steps <= panel.observed_time[:, None]).ravel()
    return w[observed], m[observed], panel.treatment.ravel()[observed]


def default_gps_config(dim_d: int, num_basis_j: int, u: int = 1, **overrides) -> nn.NetConfig:
    base = dict(
        n_features=dim_d,
        n_outputs=num_basis_j,
        history_u=u,
        dense_layers=2,
        dense_units=max(4, dim_d),
        recurrent_units=8,
        output_head="vector",
    )
    base.update(overrides)
    return nn.NetConfig(**base)


def fit_gps(
    panel: PatientPanel,
    spec: BasisSpec | None = None,
    net_cfg: nn.NetConfig | None = None,
    m: int = 25,
    u: int = 1,
) -> GpsEnsemble:
    """Train ``m`` coefficient networks with seeds ``net_cfg.seed + k``."""
    if panel.n_patients == 0:
        raise ValueError("empty panel")
    windows, mask, doses = gps_training_rows(panel, u)
    return fit_gps_arrays(windows, mask, doses, spec, net_cfg, m)


def truncation_losses(coefs: np.ndarray, phi: np.ndarray):
    """Held-out CDE loss (unit scale) of the expansion truncated after 1..J terms.

    Returns the mean loss per truncation and its standard error.
    """
    rows = np.cumsum(coefs**2, axis=1) - 2.0 * np.cumsum(coefs * phi, axis=1)  # [n, J]
    se = rows.std(axis=0, ddof=1) / np.sqrt(rows.shape[0]) if rows.shape[0] > 1 else np.zeros(rows.shape[1])
    return rows.mean(axis=0), se


def choose_truncation(coefs: np.ndarray, phi: np.ndarray) -> int:
    """Smallest number of terms whose held-out loss is within one SE of the best."""
    loss, se = truncation_losses(coefs, phi)
    best = int(np.argmin(loss))
    return int(np.flatnonzero(loss <= loss[best] + se[best])[0]) + 1


def fit_gps_arrays(windows, mask, doses, spec: BasisSpec | None = None,
                   net_cfg: nn.NetConfig | None = None, m: int = 25,
                   val_fraction: float = 0.2) -> GpsEnsemble:
    """Fit on explicit rows: windows ``[n, u, D]``, mask ``[n, u]``, doses ``[n]``.

    A seeded ``val_fraction`` of rows is held out to pick each member's number
    of active terms (one-standard-error rule); with fewer than 20 held-out rows
    all J terms are kept.
    """
    windows = np.asarray(windows, dtype=float)
    doses = np.asarray(doses, dtype=float)
    if doses.size == 0:
        raise ValueError("no training rows")
    u = windows.shape[1]
    if spec is None:
        lo, hi = float(doses.min()), float(doses.max())
        if hi <= lo:
            hi = lo + 1.0
        J = net_cfg.n_outputs if net_cfg is not None else BasisSpec.num_basis_j
        spec = BasisSpec(num_basis_j=J, rescale_lo=lo, rescale_hi=hi)
    if net_cfg is None:
        net_cfg = default_gps_config(windows.shape[2], spec.num_basis_j, u)
    if net_cfg.n_outputs != spec.num_basis_j or net_cfg.history_u != u:
        raise ValueError("net_cfg must output num_basis_j coefficients over windows of length u")
    mask = np.ones(windows.shape[:2]) if mask is None else np.asarray(mask, dtype=float)
    targets = eval_basis(spec, doses)
    n_val = int(val_fraction * len(doses))
    if n_val < 20:
        fit_idx, val_idx = np.arange(len(doses)), None
    else:
        perm = np.random.default_rng([net_cfg.seed, 2]).permutation(len(doses))
        fit_idx, val_idx = np.sort(perm[n_val:]), np.sort(perm[:n_val])
    members, n_active = [], []
    for k in range(m):
        net = nn.Network(net_cfg.replace(seed=net_cfg.seed + k))
        nn.train(net, windows[fit_idx], targets[fit_idx], mask=mask[fit_idx], loss_kind="cde",
                 scale=1.0 / spec.width)
        members.append(net)
        if val_idx is None:
            n_active.append(spec.num_basis_j)
        else:
            n_active.append(choose_truncation(net.predict(windows[val_idx], mask[val_idx]), targets[val_idx]))
    logger.debug("gps truncation per member: %s", n_active)
    return GpsEnsemble(members, spec, u, {"n_rows": int(len(doses)), "n_val": n_val if val_idx is not None else 0},
                       tuple(n_active))


def estimate_gps(ens: GpsEnsemble, a, x, mask=None):
    """``g_hat(a, x)`` for one window ``[u, D]`` or a batch ``[n, u, D]``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
        mask = None if mask is None else np.asarray(mask)[None]
    out = ens.density(a, x, mask)
    return float(out[0]) if single else out


def commencement_windows(panel: PatientPanel, u: int):
    windows, mask = history_windows(panel.covariates, u)
    return windows[:, 0], mask[:, 0]


def overlap_report(ens: GpsEnsemble, panel: PatientPanel, n_tertiles: int = 3,
                   threshold: float = 0.01) -> dict:
    """Share of patients whose GPS at each dose-tertile median is below ``threshold``.

    Uses commencement doses and covariate windows.
    """
    doses = panel.treatment[:, 0]
    if np.unique(doses).size < 2:
        return {
            "degenerate": True,
            "threshold": threshold,
            "tertiles": [{"lo": float(doses.min()), "hi": float(doses.max()),
                          "median": float(np.median(doses)), "n": int(doses.size),
                          "frac_below": float("nan")}],
            "lack_of_overlap": float("nan"),
        }
    edges = np.quantile(doses, np.linspace(0, 1, n_tertiles + 1))
    which = np.clip(np.searchsorted(edges, doses, side="right") - 1, 0, n_tertiles - 1)
    ev = ens.evaluator(*commencement_windows(panel, ens.history_u))
    rows = []
    for k in range(n_tertiles):
        sel = doses[which == k]
        med = float(np.median(sel))
        g = ev.density(med)
        rows.append({
            "lo": float(edges[k]), "hi": float(edges[k + 1]), "median": med,
            "n": int(sel.size), "frac_below": float(np.mean(g < threshold)),
        })
    return {
        "degenerate": False,
        "threshold": threshold,
        "tertiles": rows,
        "lack_of_overlap": float(np.mean([r["frac_below"] for r in rows])),
    }


def balance_diagnostic(gps_values: np.ndarray, covariate_summary: np.ndarray,
                       doses: np.ndarray, n_strata: int = 5) -> dict:
    """Correlation between a covariate summary and dose, raw and within GPS strata.

    ``gps_values`` is the GPS at one fixed dose for each patient. The
    stratified figure is the size-weighted mean of within-stratum |corr|.
    """
    def _corr(u, v):
        if u.size < 3 or u.std() == 0 or v.std() == 0:
            return 0.0
        return float(abs(np.corrcoef(u, v)[0, 1]))

    edges = np.quantile(gps_values, np.linspace(0, 1, n_strata + 1))
    which = np.clip(np.searchsorted(edges, gps_values, side="right") - 1, 0, n_strata - 1)
    within, sizes = [], []
    for k in range(n_strata):
        sel = which == k
        within.append(_corr(covariate_summary[sel], doses[sel]))
        sizes.append(int(sel.sum()))
    sizes = np.asarray(sizes, dtype=float)
    return {
        "unconditional": _corr(covariate_summary, doses),
        "stratified": float(np.dot(within, sizes) / max(sizes.sum(), 1.0)),
        "within": within,
    }
