"""Incremental square-root information smoother on a Bayes tree.

The tree stores, per clique, the dense conditional ``R x_F + S x_S = d`` for
its frontal variables given its separator, plus the cached marginal factor
on the separator that the clique passes to its parent.  An update removes
the cliques touched by new or marked variables together with their
ancestors, relinearizes the nonlinear factors that live entirely inside the
removed top, re-eliminates that top together with the cached factors of
the orphaned subtrees and hangs the orphans back in.

Internally variables are addressed by their graph slot, and all tangent
quantities live in one flat vector (``slot * dim`` offsets).
"""

from __future__ import annotations

import functools
import heapq

import numpy as np
from scipy import sparse
from scipy.linalg import lapack

from .factors import FactorGraph
from .geometry import pose_type


class DisconnectedFactorError(ValueError):
    """A factor references a variable with no estimate and no prior chain."""


class IndeterminateSystemError(np.linalg.LinAlgError):
    pass


class Clique:
    __slots__ = ("frontals", "separator", "sepset", "R", "S", "d", "marg_A", "marg_b",
                 "Rinv", "coo", "parent", "children", "fidx", "sidx")

    def __init__(self, frontals, separator, parent=None):
        self.frontals = frontals
        self.separator = separator
        self.parent = parent
        self.children = []
        self.sepset = None
        self.R = self.S = self.d = self.marg_A = self.marg_b = self.Rinv = self.coo = None
        self.fidx = self.sidx = None

    def __repr__(self):
        return f"Clique({self.frontals} | {self.separator})"


MERGE_LIMIT = 6


@functools.lru_cache(maxsize=None)
def _upper(m, n):
    return np.triu(np.ones((m, n)))


@functools.lru_cache(maxsize=None)
def _row_index(nf, width):
    return np.repeat(np.arange(nf), width)


def _flat_index(slots, dim):
    s = np.asarray(slots, dtype=np.int64)
    return (s[:, None] * dim + np.arange(dim)).ravel()


def min_degree_ordering(variables, keysets, last=(), tie_key=None):
    """Constrained minimum-degree elimination.

    Returns ``(order, separators)`` where ``separators[v]`` is the set of
    neighbours of ``v`` at the time it is eliminated, i.e. the symbolic
    factorization.  Variables in ``last`` are eliminated after all others;
    ties break on ``tie_key(v)`` (ascending).
    """
    tie_key = tie_key or (lambda v: v)
    adj = {v: set() for v in variables}
    for ks in keysets:
        for a in ks:
            adj[a].update(ks)
    for v, nb in adj.items():
        nb.discard(v)
    last = set(last)
    group = {v: (1 if v in last else 0) for v in variables}
    heap = [(group[v], len(adj[v]), tie_key(v), v) for v in variables]
    heapq.heapify(heap)
    done = set()
    order = []
    seps = {}
    while heap:
        _, deg, _, v = heapq.heappop(heap)
        if v in done or deg != len(adj[v]):
            continue
        nb = adj.pop(v)
        done.add(v)
        order.append(v)
        seps[v] = nb
        for u in nb:
            au = adj[u]
            au.discard(v)
            au.update(nb)
            au.discard(u)
            heapq.heappush(heap, (group[u], len(au), tie_key(u), u))
    return order, seps


class BayesTree:
    def __init__(self, graph: FactorGraph | None = None, group=None, merge_limit=None):
        # cliques absorb children until they hold ``merge_limit`` frontals;
        # 1 keeps only the exact (fill-free) merges
        self.merge_limit = MERGE_LIMIT if merge_limit is None else int(merge_limit)
        self.graph = graph if graph is not None else FactorGraph(group)
        self.dim = None
        self.theta = None
        self.delta = None
        self.clique_of = []
        self.roots = []
        self.pos = []
        self._counter = 0
        self.key_factors = []
        self.lin_mu = np.zeros(0)
        self.n_factors = 0
        self.n_vars = 0
        self._cache = None
        self._arange = None

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def group(self):
        return self.graph.group

    def _ensure(self, nvars, nfactors):
        G = self.group
        if self.dim is None:
            self.dim = G.dim
            self._arange = np.arange(G.dim)
            self.theta = G.identity((0,))
            self.delta = np.zeros(0)
        cap = self.theta.shape[0]
        if nvars > cap:
            new = max(nvars, 2 * cap, 16)
            th = G.identity((new,))
            th[:cap] = self.theta
            self.theta = th
            de = np.zeros(new * self.dim)
            de[: cap * self.dim] = self.delta
            self.delta = de
        while len(self.clique_of) < nvars:
            self.clique_of.append(None)
            self.pos.append(-1)
            self.key_factors.append([])
        if nfactors > len(self.lin_mu):
            lm = np.full(max(nfactors, 2 * len(self.lin_mu), 16), np.nan)
            lm[: len(self.lin_mu)] = self.lin_mu
            self.lin_mu = lm

    def slots_of(self, keys):
        return [self.graph.slot[k] for k in keys]

    def keys_of(self, slots):
        keys = self.graph.keys
        return {keys[s] for s in slots}

    def cliques(self):
        out = []
        stack = list(self.roots)
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(c.children)
        return out

    def delta_of(self, key):
        s = self.graph.slot[key]
        return self.delta[s * self.dim:(s + 1) * self.dim].copy()

    def estimate_of(self, key):
        s = self.graph.slot[key]
        d = self.dim
        arr = self.group.retract(self.theta[s], self.delta[s * d:(s + 1) * d])
        return pose_type(self.group).from_array(arr)

    def linearization_point(self):
        return self.graph.array_to_values(self.theta[: self.n_vars])

    def estimate_array(self, delta=None):
        delta = self.delta if delta is None else delta
        n = self.n_vars
        return self.group.retract(self.theta[:n], delta[: n * self.dim].reshape(n, self.dim))

    def estimate(self, delta=None):
        return self.graph.array_to_values(self.estimate_array(delta))

    # ------------------------------------------------------------------
    # update

    def _involved_cliques(self, s):
        """Cliques with slot ``s`` as frontal or separator variable."""
        c = self.clique_of[s]
        if c is None:
            return []
        out = []
        stack = [c]
        while stack:
            c = stack.pop()
            out.append(c)
            for ch in c.children:
                if s in ch.sepset:
                    stack.append(ch)
        return out

    def update(self, new_factor_indices=(), new_values=None, affected=(), relin=(),
               mu=1.0, mu_final=1.0):
        """Graduated incremental update.

        ``new_factor_indices`` refer to factors already added to ``graph``;
        ``new_values`` maps new keys to initial poses; ``affected`` keys have
        their cliques and ancestors re-eliminated; ``relin`` keys are
        relinearized (linearization point moved by the current delta).

        Returns the convex set: keys of factors relinearized with an
        effective control parameter different from ``mu_final``.
        """
        g = self.graph
        new_values = new_values or {}
        new_factor_indices = list(new_factor_indices)
        for key in new_values:
            g.add_variable(key)
        self._ensure(len(g.keys), len(g.factors))
        G = self.group
        dim = self.dim

        new_slots = []
        for key, pose in new_values.items():
            s = g.slot[key]
            if s < self.n_vars:
                continue
            self.theta[s] = pose.to_array()
            self.delta[s * dim:(s + 1) * dim] = 0.0
            new_slots.append(s)
        known = self.n_vars
        have = set(new_slots)
        table = g.table
        marked = set()
        for fi in new_factor_indices:
            for s in table.slots(fi):
                if s >= known and s not in have:
                    raise DisconnectedFactorError(
                        f"factor {fi} references key {g.keys[s]} without an initial estimate")
                marked.add(s)
        self.n_vars = max(self.n_vars, (max(new_slots) + 1) if new_slots else 0)
        for fi in new_factor_indices:
            for s in table.slots(fi):
                self.key_factors[s].append(fi)
        self.n_factors = max(self.n_factors, max(new_factor_indices, default=-1) + 1)

        removed = set()
        rs = np.array(sorted(g.slot[k] for k in relin), dtype=np.int64)
        if len(rs):
            D = self.delta[: self.n_vars * dim].reshape(-1, dim)
            self.theta[rs] = G.retract(self.theta[rs], D[rs])
            D[rs] = 0.0
        for s in rs.tolist():
            for c in self._involved_cliques(s):
                marked.update(c.frontals)
        for key in affected:
            marked.add(g.slot[key])

        for s in marked:
            c = self.clique_of[s]
            while c is not None and c not in removed:
                removed.add(c)
                c = c.parent
        top = set(new_slots)
        orphans = []
        for c in removed:
            top.update(c.frontals)
            for ch in c.children:
                if ch not in removed:
                    orphans.append(ch)
        if not top:
            return set()
        # clique sets iterate in address order; fix the order of the marginals
        orphans.sort(key=lambda o: self.pos[o.frontals[0]])
        self._cache = None
        self.roots = [c for c in self.roots if c not in removed]
        for o in orphans:
            o.parent = None

        # factors living entirely inside the top
        fset = set()
        for s in top:
            for fi in self.key_factors[s]:
                if fi in fset:
                    continue
                if all(t in top for t in table.slots(fi)):
                    fset.add(fi)
        fl = np.array(sorted(fset), dtype=np.int64)
        convex = set()
        lin = []
        if len(fl):
            mu_eff = table.effective_mu(fl, mu)
            Ja, Jb, rhs = table.linearize(self.theta, fl, mu_eff)
            sig = table.is_sig(fl)
            self.lin_mu[fl] = np.where(sig, mu_eff, np.nan)
            J = np.concatenate([Ja, Jb], axis=2)
            ka = table.ka[fl].tolist()
            kb = table.kb[fl].tolist()
            stale = (sig & (mu_eff != mu_final)).tolist()
            for n in range(len(fl)):
                if ka[n] < 0:
                    sl = (kb[n],)
                    lin.append((sl, Jb[n], rhs[n]))
                else:
                    sl = (ka[n], kb[n])
                    lin.append((sl, J[n], rhs[n]))
                if stale[n]:
                    convex.update(sl)
        for o in orphans:
            lin.append((tuple(o.separator), o.marg_A, o.marg_b))

        constrained = set()
        for fi in new_factor_indices:
            constrained.update(table.slots(fi))
        keys = g.keys
        order, seps = min_degree_ordering(top, [f[0] for f in lin], last=constrained & top,
                                          tie_key=lambda v: keys[v])
        for v in order:
            self.pos[v] = self._counter
            self._counter += 1
        self._build(order, seps, lin)

        pos = self.pos
        for o in orphans:
            p = min(o.separator, key=pos.__getitem__)
            parent = self.clique_of[p]
            o.parent = parent
            parent.children.append(o)
        return self.keys_of(convex)

    def _build(self, order, seps, lin):
        pos = self.pos
        dim = self.dim
        created = []
        for v in reversed(order):
            sep = seps[v]
            if not sep:
                c = Clique([v], [])
                self.roots.append(c)
                created.append(c)
            else:
                p = min(sep, key=pos.__getitem__)
                cp = self.clique_of[p]
                if len(cp.frontals) < self.merge_limit or (
                        len(sep) == len(cp.frontals) + len(cp.separator) and
                        sep.issuperset(cp.frontals) and sep.issuperset(cp.separator)):
                    cp.frontals.insert(0, v)
                    self.clique_of[v] = cp
                    continue
                c = Clique([v], sorted(sep, key=pos.__getitem__), parent=cp)
                cp.children.append(c)
                created.append(c)
            self.clique_of[v] = c
        assigned = {id(c): [] for c in created}
        for f in lin:
            first = min(f[0], key=pos.__getitem__)
            assigned[id(self.clique_of[first])].append(f)
        for c in reversed(created):
            c.sepset = frozenset(c.separator)
            c.fidx = _flat_index(c.frontals, dim)
            c.sidx = _flat_index(c.separator, dim)
            self._eliminate(c, assigned[id(c)])

    def _eliminate(self, c, factors):
        dim = self.dim
        col = {}
        for i, v in enumerate(c.frontals):
            col[v] = i * dim
        nf = len(c.frontals) * dim
        for i, v in enumerate(c.separator):
            col[v] = nf + i * dim
        ns = len(c.separator) * dim
        parts = list(factors)
        for ch in c.children:
            parts.append((ch.separator, ch.marg_A, ch.marg_b))
        m = sum(len(p[2]) for p in parts)
        M = np.zeros((m, nf + ns + 1))
        ar = self._arange
        row = 0
        for keys, A, b in parts:
            k = len(b)
            if len(keys) == 1:
                o = col[keys[0]]
                M[row:row + k, o:o + dim] = A
            else:
                cols = (np.array([col[v] for v in keys])[:, None] + ar).ravel()
                M[row:row + k, cols] = A
            M[row:row + k, -1] = b
            row += k
        if m < nf:
            raise IndeterminateSystemError(
                f"clique {c.frontals} is under-determined ({m} rows for {nf} unknowns)")
        qr = lapack.dgeqrf(M)[0]
        R = qr[:nf, :nf] * _upper(nf, nf)
        diag = np.abs(R.diagonal())
        if diag.min() <= 1e-12 * max(1.0, diag.max()):
            raise IndeterminateSystemError(f"singular conditional for clique {c.frontals}")
        c.R = R
        c.Rinv = lapack.dtrtri(R)[0]
        c.S = qr[:nf, nf:nf + ns]
        c.d = qr[:nf, -1]
        rest = qr[nf:min(m, nf + ns), nf:]
        rest = rest * _upper(*rest.shape)
        c.marg_A = rest[:, :ns]
        c.marg_b = rest[:, -1]
        idx = np.concatenate([c.fidx, c.sidx])
        vals = np.concatenate([R, c.S], axis=1).ravel()
        c.coo = (_row_index(nf, len(idx)), np.tile(idx, nf), vals)

    # ------------------------------------------------------------------
    # linear solves

    def _top_down(self):
        stack = list(reversed(self.roots))
        while stack:
            c = stack.pop()
            yield c
            stack.extend(reversed(c.children))

    def _system(self):
        """Cached top-down clique list and the stacked sparse ``[R S]`` rows with rhs."""
        if self._cache is None:
            order = list(self._top_down())
            n = self.n_vars * self.dim
            rows, cols, vals, d, offs, sizes = [], [], [], [], [], []
            r0 = 0
            for c in order:
                lr, lc, lv = c.coo
                rows.append(lr)
                cols.append(lc)
                vals.append(lv)
                d.append(c.d)
                offs.append(r0)
                sizes.append(len(lv))
                r0 += len(c.d)
            if order:
                rows = np.concatenate(rows) + np.repeat(offs, sizes)
                mat = sparse.csr_matrix((np.concatenate(vals), (rows, np.concatenate(cols))),
                                        shape=(r0, n))
                dv = np.concatenate(d)
            else:
                mat = sparse.csr_matrix((0, n))
                dv = np.zeros(0)
            self._cache = (order, mat, dv)
        return self._cache

    def solve_gn(self):
        """Full back-substitution of the stored square-root system."""
        order = self._system()[0]
        x = np.zeros(self.n_vars * self.dim)
        for c in order:
            rhs = c.d - c.S @ x[c.sidx] if len(c.sidx) else c.d
            x[c.fidx] = c.Rinv @ rhs
        return x

    def gradient(self):
        """``R^T d``: the steepest-descent direction of ``0.5 |R x - d|^2`` at 0."""
        _, mat, d = self._system()
        return mat.T @ d

    def apply_r(self, x):
        """Stacked per-clique ``R x_F + S x_S`` (ordering is internal)."""
        return self._system()[1] @ np.asarray(x)[: self.n_vars * self.dim]

    def rhs(self):
        return self._system()[2]

    def solve_gradient(self):
        """Cauchy point of the linearized problem along steepest descent."""
        g = self.gradient()
        gg = g @ g
        if gg == 0.0:
            return g
        Rg = self.apply_r(g)
        return (gg / (Rg @ Rg)) * g

    def mark_fluid(self, delta, threshold):
        n = self.n_vars
        norms = np.linalg.norm(np.asarray(delta)[: n * self.dim].reshape(n, self.dim), axis=1)
        return self.keys_of(np.flatnonzero(norms > threshold))

    # ------------------------------------------------------------------
    # diagnostics

    def check_invariants(self):
        seen = {}
        for c in self.cliques():
            for v in c.frontals:
                if v in seen:
                    raise AssertionError(f"variable {v} is frontal in two cliques")
                seen[v] = c
                if self.clique_of[v] is not c:
                    raise AssertionError(f"clique index out of date for {v}")
            if c.parent is not None:
                vars_p = set(c.parent.frontals) | set(c.parent.separator)
                if not set(c.separator) <= vars_p:
                    raise AssertionError(f"separator of {c} not contained in parent {c.parent}")
                if c not in c.parent.children:
                    raise AssertionError("parent/child links disagree")
            elif c.separator:
                raise AssertionError(f"root {c} has a separator")
        if len(seen) != self.n_vars:
            raise AssertionError("frontal sets do not cover all variables")

    def dump(self):
        """Text outline, one clique per line: ``frontals | separator``."""
        keys = self.graph.keys
        lines = []
        stack = [(c, 0) for c in reversed(self.roots)]
        while stack:
            c, depth = stack.pop()
            f = " ".join(str(keys[v]) for v in c.frontals)
            s = " ".join(str(keys[v]) for v in c.separator)
            lines.append("  " * depth + f"{f} | {s}")
            stack.extend((ch, depth + 1) for ch in reversed(c.children))
        return "\n".join(lines)


def update_tree(tree: BayesTree, new_factors=(), affected=(), mu=1.0, new_values=None,
                relin=(), mu_final=1.0):
    """Add ``new_factors`` to the tree's graph and run the graduated update.

    Returns ``(tree, convex_keys)``.
    """
    idx = tree.graph.extend(new_factors)
    convex = tree.update(idx, new_values=new_values, affected=affected, relin=relin,
                         mu=mu, mu_final=mu_final)
    return tree, convex


def solve_gn(tree):
    return tree.solve_gn()


def solve_gradient(tree):
    return tree.solve_gradient()


def mark_fluid(tree, delta, threshold=0.1):
    return tree.mark_fluid(delta, threshold)
