"""C1-conforming Hermite-cubic finite elements for the fourth-order operator.

Shared by the outer (limit) solver and the direct oracle.  Unknowns are
value/slope pairs per node, so clamped and interface data are imposed
strongly.  Element integrals use fixed 8-point Gauss rules, exact for the
polynomial coefficient degrees this package admits.

Element matrices are accumulated in extended precision: the 1/h^3
stiffness scaling otherwise pollutes eigenvalues near the 1e-9 relative
targets whenever h is not exactly representable.  Factorizations stay in
double precision; converged eigenpairs are polished by inverse iteration
and a Rayleigh quotient evaluated against the extended-precision element
data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import eval_coefficient

N_GAUSS = 8
_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(N_GAUSS)
_GS = 0.5 * (_GAUSS_X + 1.0)      # reference coordinates on [0, 1]
_GW = 0.5 * _GAUSS_W


def _reference_basis(s):
    """Hermite shape functions and s-derivatives on the reference element."""
    s = np.asarray(s)
    phi = np.stack([
        1.0 - 3.0 * s**2 + 2.0 * s**3,
        s - 2.0 * s**2 + s**3,
        3.0 * s**2 - 2.0 * s**3,
        -(s**2) + s**3,
    ])
    dphi = np.stack([
        -6.0 * s + 6.0 * s**2,
        1.0 - 4.0 * s + 3.0 * s**2,
        6.0 * s - 6.0 * s**2,
        -2.0 * s + 3.0 * s**2,
    ])
    ddphi = np.stack([
        -6.0 + 12.0 * s,
        -4.0 + 6.0 * s,
        6.0 - 12.0 * s,
        -2.0 + 6.0 * s,
    ])
    dddphi = np.stack([
        12.0 * np.ones_like(s),
        6.0 * np.ones_like(s),
        -12.0 * np.ones_like(s),
        6.0 * np.ones_like(s),
    ])
    return phi, dphi, ddphi, dddphi


_PHI, _DPHI, _DDPHI, _DDDPHI = _reference_basis(_GS)


def gauss_points(nodes):
    """All element Gauss points (n_elem, N_GAUSS) and weights scaled by h."""
    nodes = np.asarray(nodes, dtype=float)
    h = np.diff(nodes)
    xg = nodes[:-1, None] + h[:, None] * _GS[None, :]
    wg = h[:, None] * _GW[None, :]
    return xg, wg


def _basis_blocks(h):
    """Per-element basis derivative arrays (n_elem, 4, N_GAUSS) in x-space."""
    n = h.size
    ones = np.ones(n, dtype=h.dtype)
    scale0 = np.stack([ones, h, ones, h], axis=1)
    B0 = scale0[:, :, None] * _PHI.astype(h.dtype)[None, :, :]
    scale1 = np.stack([1.0 / h, ones, 1.0 / h, ones], axis=1)
    B1 = scale1[:, :, None] * _DPHI.astype(h.dtype)[None, :, :]
    scale2 = np.stack([1.0 / h**2, 1.0 / h, 1.0 / h**2, 1.0 / h], axis=1)
    B2 = scale2[:, :, None] * _DDPHI.astype(h.dtype)[None, :, :]
    return B0, B1, B2


@dataclass
class Assembly:
    """Assembled bilinear forms plus extended-precision element data."""

    nodes: np.ndarray
    K: sp.csr_matrix
    M: sp.csr_matrix
    Ke: np.ndarray            # (n_elem, 4, 4) longdouble
    Me: np.ndarray            # (n_elem, 4, 4) longdouble

    @property
    def ndof(self):
        return 2 * self.nodes.size

    def edof(self):
        return 2 * np.arange(self.nodes.size - 1)[:, None] + np.arange(4)[None, :]

    def _quad_form(self, elem_mats, v, w):
        vl = np.asarray(v, dtype=np.longdouble)
        wl = np.asarray(w, dtype=np.longdouble)
        ed = self.edof()
        ve = vl[ed]
        we = wl[ed]
        return np.einsum("ei,eij,ej->", ve, elem_mats, we)

    def energy(self, v, w=None):
        """v^T K w accumulated in extended precision."""
        return float(self._quad_form(self.Ke, v, v if w is None else w))

    def mass(self, v, w=None):
        """v^T M w accumulated in extended precision."""
        return float(self._quad_form(self.Me, v, v if w is None else w))

    def rayleigh(self, v):
        return float(self._quad_form(self.Ke, v, v) / self._quad_form(self.Me, v, v))

    def pencil_apply(self, v, lam, mass_vec=None, load=None):
        """K v - lam M v (- load) over all dofs, accumulated in extended precision.

        ``mass_vec`` optionally subtracts M @ mass_vec as well (inhomogeneous
        eigen-corrections): the result is K v - lam M v - M mass_vec - load.
        """
        vl = np.asarray(v, dtype=np.longdouble)
        ed = self.edof()
        re = np.einsum("eij,ej->ei", self.Ke, vl[ed]) - \
            np.longdouble(lam) * np.einsum("eij,ej->ei", self.Me, vl[ed])
        if mass_vec is not None:
            ml = np.asarray(mass_vec, dtype=np.longdouble)
            re = re - np.einsum("eij,ej->ei", self.Me, ml[ed])
        out = np.zeros(self.ndof, dtype=np.longdouble)
        np.add.at(out, ed.ravel(), re.ravel())
        if load is not None:
            out = out - np.asarray(load, dtype=np.longdouble)
        return out

    def residual_rows(self, v, lam, rows, load=None):
        """Entries of K v - lam M v (- load) at the given dof rows.

        Used for reaction/flux extraction at constrained dofs; accumulated
        in extended precision.
        """
        out = self.pencil_apply(v, lam, load=load)
        return np.asarray(out[np.asarray(rows, dtype=int)], dtype=float)


def assemble(nodes, k0_fn, k1_fn, k2_fn, weight_fn):
    """Assemble stiffness and mass forms on the given node vector.

    Coefficient callables must accept arrays; ``k1_fn``/``k2_fn`` may be
    None when the corresponding term vanishes.
    """
    nodes = np.asarray(nodes, dtype=float)
    h = np.diff(nodes).astype(np.longdouble)
    if np.any(h <= 0):
        raise ValueError("nodes must be strictly increasing")
    xg, _ = gauss_points(nodes)
    wg = h[:, None] * _GW.astype(np.longdouble)[None, :]
    B0, B1, B2 = _basis_blocks(h)

    k0g = k0_fn(xg).astype(np.longdouble) * wg
    Ke = np.einsum("eg,eig,ejg->eij", k0g, B2, B2)
    if k1_fn is not None:
        k1g = k1_fn(xg).astype(np.longdouble) * wg
        Ke += np.einsum("eg,eig,ejg->eij", k1g, B1, B1)
    if k2_fn is not None:
        k2g = k2_fn(xg).astype(np.longdouble) * wg
        Ke += np.einsum("eg,eig,ejg->eij", k2g, B0, B0)
    wgt = weight_fn(xg).astype(np.longdouble) * wg
    Me = np.einsum("eg,eig,ejg->eij", wgt, B0, B0)

    n_elem = h.size
    ndof = 2 * nodes.size
    edof = 2 * np.arange(n_elem)[:, None] + np.arange(4)[None, :]
    rows = np.repeat(edof, 4, axis=1).ravel()
    cols = np.tile(edof, (1, 4)).ravel()
    K = sp.coo_matrix((Ke.astype(float).ravel(), (rows, cols)),
                      shape=(ndof, ndof)).tocsr()
    M = sp.coo_matrix((Me.astype(float).ravel(), (rows, cols)),
                      shape=(ndof, ndof)).tocsr()
    return Assembly(nodes=nodes, K=K, M=M, Ke=Ke, Me=Me)


def poly_fn(coeff, deriv=0):
    if len(coeff) == 0:
        return None
    return lambda x: eval_coefficient(coeff, x, deriv) * np.ones_like(np.asarray(x, float))


@dataclass
class HermiteFunction:
    """Piecewise-cubic function given by nodal values and slopes."""

    nodes: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    @classmethod
    def from_dofs(cls, nodes, dofs):
        dofs = np.asarray(dofs, dtype=float)
        return cls(np.asarray(nodes, float), dofs[0::2].copy(), dofs[1::2].copy())

    @classmethod
    def zero(cls, nodes):
        nodes = np.asarray(nodes, float)
        return cls(nodes, np.zeros(nodes.size), np.zeros(nodes.size))

    def dofs(self):
        out = np.empty(2 * self.nodes.size)
        out[0::2] = self.values
        out[1::2] = self.slopes
        return out

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.nodes, x, side="right") - 1,
                      0, self.nodes.size - 2)
        h = self.nodes[idx + 1] - self.nodes[idx]
        s = (x - self.nodes[idx]) / h
        return idx, h, s

    def __call__(self, x, deriv: int = 0):
        if not 0 <= deriv <= 3:
            raise ValueError("piecewise cubics support derivatives 0..3")
        idx, h, s = self._locate(x)
        phi = _reference_basis(s)[deriv]
        fac = np.stack([np.ones_like(h), h, np.ones_like(h), h])
        pow_h = h ** float(-deriv)
        coef = np.stack([self.values[idx], self.slopes[idx],
                         self.values[idx + 1], self.slopes[idx + 1]]) * fac
        out = np.sum(coef * phi, axis=0) * pow_h
        return out[()] if np.ndim(x) == 0 else out

    def scaled(self, factor):
        return HermiteFunction(self.nodes, self.values * factor, self.slopes * factor)


def inner_product(nodes, f, g, weight_fn=None, lo=None, hi=None):
    """Integral of f * g (optionally weighted) over [lo, hi] via element Gauss rules."""
    nodes = np.asarray(nodes, float)
    xg, wg = gauss_points(nodes)
    if lo is not None or hi is not None:
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        mask = np.ones(mids.size, dtype=bool)
        if lo is not None:
            mask &= mids > lo
        if hi is not None:
            mask &= mids < hi
        xg, wg = xg[mask], wg[mask]
    vals = f(xg) * g(xg)
    if weight_fn is not None:
        vals = vals * weight_fn(xg)
    return float(np.sum(vals * wg))


def load_vector(nodes, rhs_fn):
    """Consistent load vector for a vectorized right-hand side density."""
    nodes = np.asarray(nodes, float)
    h = np.diff(nodes)
    xg, wg = gauss_points(nodes)
    B0, _, _ = _basis_blocks(h)
    fe = np.einsum("eg,eig->ei", rhs_fn(xg) * wg, B0)
    F = np.zeros(2 * nodes.size)
    edof = 2 * np.arange(h.size)[:, None] + np.arange(4)[None, :]
    np.add.at(F, edof.ravel(), fe.ravel())
    return F


def constrain(K, M, fixed_idx, fixed_vals=None):
    """Eliminate constrained dofs.

    Returns (K_ff, M_ff, lift_rhs, free_idx) where ``lift_rhs`` carries
    -K_fc @ fixed_vals for nonzero constraint data.
    """
    n = K.shape[0]
    fixed_idx = np.asarray(fixed_idx, dtype=int)
    mask = np.ones(n, dtype=bool)
    mask[fixed_idx] = False
    free_idx = np.nonzero(mask)[0]
    K_ff = sp.csr_matrix(K[np.ix_(free_idx, free_idx)])
    M_ff = sp.csr_matrix(M[np.ix_(free_idx, free_idx)])
    rhs = np.zeros(free_idx.size)
    if fixed_vals is not None and np.any(np.asarray(fixed_vals) != 0.0):
        fixed_vals = np.asarray(fixed_vals, dtype=float)
        rhs -= K[np.ix_(free_idx, fixed_idx)] @ fixed_vals
    return K_ff, M_ff, rhs, free_idx


class EigenConvergenceError(RuntimeError):
    """Shift-invert iteration failed to converge near the requested target."""


def eigs_near(asm_or_mats, sigma, k=6, fixed_idx=None, polish=2):
    """Eigenpairs of the (constrained) pencil nearest to sigma.

    ARPACK shift-invert with a deterministic all-ones start vector, then
    per-pair inverse-iteration polish and an extended-precision Rayleigh
    quotient when an Assembly is supplied.

    Returns (values ascending, vectors as columns in full dof numbering).
    """
    if isinstance(asm_or_mats, Assembly):
        asm = asm_or_mats
        K, M = asm.K, asm.M
    else:
        asm = None
        K, M = asm_or_mats
    if fixed_idx is not None:
        Kff, Mff, _, free_idx = constrain(K, M, fixed_idx)
    else:
        Kff, Mff, free_idx = K, M, np.arange(K.shape[0])
    n = Kff.shape[0]
    v0 = np.ones(n) / np.sqrt(n)
    try:
        vals, vecs = spla.eigsh(Kff.tocsc(), k=min(k, n - 2), M=Mff.tocsc(),
                                sigma=sigma, which="LM", v0=v0)
    except spla.ArpackNoConvergence as exc:
        raise EigenConvergenceError(
            f"shift-invert failed to converge at sigma={sigma!r}") from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]

    out_vals = np.empty_like(vals)
    out_vecs = np.zeros((K.shape[0], vals.size))
    for i in range(vals.size):
        lam, v = vals[i], vecs[:, i]
        for _ in range(polish):
            shift = lam
            try:
                lu = spla.splu((Kff - shift * Mff).tocsc())
            except RuntimeError:
                lu = spla.splu((Kff - shift * (1.0 + 1e-11) * Mff).tocsc())
            w = lu.solve(Mff @ v)
            nrm = np.sqrt(abs(w @ (Mff @ w)))
            if not np.isfinite(nrm) or nrm == 0.0:
                break
            v = w / nrm
            full = np.zeros(K.shape[0])
            full[free_idx] = v
            lam = asm.rayleigh(full) if asm is not None else float(
                (v @ (Kff @ v)) / (v @ (Mff @ v)))
        out_vals[i] = lam
        out_vecs[free_idx, i] = v
    order = np.argsort(out_vals)
    return out_vals[order], out_vecs[:, order]
