"""Independent oracles and the registered invariant suite.

The oracles here re-derive every quantity with explicit Python loops and
share no computational code with the modules under test: projections are
hand-rolled mat-vecs, window partitioning / cyclic shifting / cross-window
masking are redone with index arithmetic, softmax and layernorm are written
out longhand. Keep it that way; the whole point is an independent route to
the same numbers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .cross import CrossAttentionParams, CrossBlockStack, cross_attend
from .encoder import (EncoderConfig, FeatureMap, PatchEmbed, PatchMerge,
                      SwinBlock, SwinEncoder, WindowAttentionParams,
                      window_self_attention)
from .errors import NumericError
from .models import (ClassifierOutput, IOV8Model, ModelConfig, OutputModel,
                     SiameseIOModel, build_model, desk_encoder_config,
                     micro_encoder_config)
from .nn import Linear, Module
from .tensor import Tensor
from .training import AdamW, TrainConfig, lr_at

COSINE_EPS = 1e-6
LN_EPS = 1e-5
ORACLE_MASK_NEG = -1.0e9


# ---------------------------------------------------------------------------
# flat-token oracles (explicit loops, f64, n <= 64)


@dataclass
class OracleAttentionParams:
    """Plain-array view of one attention block's weights."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    tau: np.ndarray          # [heads]
    bias: np.ndarray         # [heads, n, n] additive logit bias
    gamma: Optional[np.ndarray] = None   # post-norm affine (cross only)
    beta: Optional[np.ndarray] = None


def _oracle_bias_matrix(table: np.ndarray, w: int,
                        heads: int) -> np.ndarray:
    """Realize the per-pair bias matrix from the table through an
    independently recomputed offset-index map."""
    n = w * w
    bias = np.zeros((heads, n, n))
    for h in range(heads):
        for a in range(n):
            for b in range(n):
                dy = (a // w) - (b // w)
                dx = (a % w) - (b % w)
                idx = (dy + w - 1) * (2 * w - 1) + (dx + w - 1)
                bias[h, a, b] = float(table[idx, h])
    return bias


def params_from_cross(p: CrossAttentionParams, n: int) -> OracleAttentionParams:
    w = p.window_size
    assert n == w * w
    return OracleAttentionParams(
        wq=np.asarray(p.q.w.data, dtype=np.float64),
        bq=np.asarray(p.q.b.data, dtype=np.float64),
        wk=np.asarray(p.k.w.data, dtype=np.float64),
        bk=np.asarray(p.k.b.data, dtype=np.float64),
        wv=np.asarray(p.v.w.data, dtype=np.float64),
        bv=np.asarray(p.v.b.data, dtype=np.float64),
        wo=np.asarray(p.proj.w.data, dtype=np.float64),
        bo=np.asarray(p.proj.b.data, dtype=np.float64),
        tau=np.asarray(p.tau.data, dtype=np.float64),
        bias=_oracle_bias_matrix(p.bias_table.data, w, p.heads),
        gamma=np.asarray(p.norm.gamma.data, dtype=np.float64),
        beta=np.asarray(p.norm.beta.data, dtype=np.float64),
    )


def params_from_window_attention(p: WindowAttentionParams,
                                 n: int) -> OracleAttentionParams:
    w = p.window_size
    assert n == w * w
    return OracleAttentionParams(
        wq=np.asarray(p.q.w.data, dtype=np.float64),
        bq=np.asarray(p.q.b.data, dtype=np.float64),
        wk=np.asarray(p.k.w.data, dtype=np.float64),
        bk=np.asarray(p.k.b.data, dtype=np.float64),
        wv=np.asarray(p.v.w.data, dtype=np.float64),
        bv=np.asarray(p.v.b.data, dtype=np.float64),
        wo=np.asarray(p.proj.w.data, dtype=np.float64),
        bo=np.asarray(p.proj.b.data, dtype=np.float64),
        tau=np.asarray(p.tau.data, dtype=np.float64),
        bias=_oracle_bias_matrix(p.bias_table.data, w, p.heads),
    )


def _matvec(w: np.ndarray, b: Optional[np.ndarray],
            x: np.ndarray) -> np.ndarray:
    d_in, d_out = w.shape
    out = np.zeros(d_out)
    for c in range(d_out):
        s = 0.0 if b is None else float(b[c])
        for a in range(d_in):
            s += float(x[a]) * float(w[a, c])
        out[c] = s
    return out


def _attention_core(i_tokens: np.ndarray, o_tokens: np.ndarray,
                    p: OracleAttentionParams,
                    mask: Optional[np.ndarray]) -> np.ndarray:
    """softmax(cos(Q(o), K(i)) / tau + bias [+ mask]) V(i), heads
    concatenated, output projection. Returns [n, d]."""
    n, d = i_tokens.shape
    heads = len(p.tau)
    dh = d // heads
    q = np.stack([_matvec(p.wq, p.bq, o_tokens[j]) for j in range(n)])
    k = np.stack([_matvec(p.wk, p.bk, i_tokens[j]) for j in range(n)])
    v = np.stack([_matvec(p.wv, p.bv, i_tokens[j]) for j in range(n)])
    ctx = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = np.zeros((n, n))
        for a in range(n):
            qa = q[a, sl]
            nq = max(math.sqrt(sum(float(x) * float(x) for x in qa)),
                     COSINE_EPS)
            for b in range(n):
                kb = k[b, sl]
                nk = max(math.sqrt(sum(float(x) * float(x) for x in kb)),
                         COSINE_EPS)
                dot = sum(float(qa[c]) * float(kb[c]) for c in range(dh))
                logits[a, b] = dot / (nq * nk) / float(p.tau[h]) + \
                    float(p.bias[h, a, b])
                if mask is not None:
                    logits[a, b] += float(mask[a, b])
        for a in range(n):
            row_max = max(logits[a])
            exps = [math.exp(logits[a, b] - row_max) for b in range(n)]
            z = sum(exps)
            weights = [e / z for e in exps]
            for c in range(dh):
                s = 0.0
                for b in range(n):
                    s += weights[b] * float(v[b, sl][c])
                ctx[a, h * dh + c] = s
    return np.stack([_matvec(p.wo, p.bo, ctx[j]) for j in range(n)])


def oracle_window_attention(tokens: np.ndarray, p: OracleAttentionParams,
                            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Window self-attention reference (no residual, no norm)."""
    return _attention_core(tokens, tokens, p, mask)


def oracle_cross_attention(i_tokens: np.ndarray, o_tokens: np.ndarray,
                           p: OracleAttentionParams,
                           mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Cross-attention block reference: attention from output-side queries
    onto input-side keys/values, output projection, residual from the
    output tokens, then layernorm."""
    n, d = i_tokens.shape
    attn = _attention_core(i_tokens, o_tokens, p, mask)
    out = np.zeros((n, d))
    for j in range(n):
        r = [float(o_tokens[j, c]) + float(attn[j, c]) for c in range(d)]
        mu = sum(r) / d
        var = sum((x - mu) ** 2 for x in r) / d
        inv = 1.0 / math.sqrt(var + LN_EPS)
        for c in range(d):
            g = 1.0 if p.gamma is None else float(p.gamma[c])
            bt = 0.0 if p.beta is None else float(p.beta[c])
            out[j, c] = (r[c] - mu) * inv * g + bt
    return out


# ---------------------------------------------------------------------------
# grid-level oracle (independent shift / window / mask arithmetic)


def _oracle_region_id(y: int, x: int, extent_y: int, extent_x: int,
                      w: int, s: int) -> int:
    def band(v, extent):
        if v < extent - w:
            return 0
        if v < extent - s:
            return 1
        return 2
    return band(y, extent_y) * 3 + band(x, extent_x)


def oracle_cross_attention_grid(i_map: np.ndarray, o_map: np.ndarray,
                                p: OracleAttentionParams, w: int,
                                shifted: bool,
                                self_attention: bool = False) -> np.ndarray:
    """Full-grid reference for windowed (cross-)attention with optional
    cyclic shift and cross-window masking; [H, W, C] in, [H, W, C] out."""
    hh, ww, c = i_map.shape
    s = w // 2 if shifted else 0
    ish = np.zeros_like(i_map)
    osh = np.zeros_like(o_map)
    for y in range(hh):
        for x in range(ww):
            ish[y, x] = i_map[(y + s) % hh, (x + s) % ww]
            osh[y, x] = o_map[(y + s) % hh, (x + s) % ww]
    result = np.zeros((hh, ww, c))
    n = w * w
    for wy in range(hh // w):
        for wx in range(ww // w):
            itok = np.zeros((n, c))
            otok = np.zeros((n, c))
            coords = []
            for a in range(n):
                y = wy * w + a // w
                x = wx * w + a % w
                itok[a] = ish[y, x]
                otok[a] = osh[y, x]
                coords.append((y, x))
            mask = None
            if s > 0:
                mask = np.zeros((n, n))
                for a in range(n):
                    ra = _oracle_region_id(*coords[a], hh, ww, w, s)
                    for b in range(n):
                        rb = _oracle_region_id(*coords[b], hh, ww, w, s)
                        if ra != rb:
                            mask[a, b] = ORACLE_MASK_NEG
            if self_attention:
                out = oracle_window_attention(itok, p, mask)
            else:
                out = oracle_cross_attention(itok, otok, p, mask)
            for a in range(n):
                result[coords[a]] = out[a]
    final = np.zeros_like(result)
    for y in range(hh):
        for x in range(ww):
            final[y, x] = result[(y - s) % hh, (x - s) % ww]
    return final


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDiffResult:
    name: str
    max_rel_err: float
    checked_coords: int
    passed: bool


def finite_diff_check(f: Callable[[], Tensor], params: Dict[str, Tensor],
                      h: float = 1e-6, rtol: float = 1e-4,
                      max_coords: int = 64,
                      seed: int = 0) -> Dict[str, FiniteDiffResult]:
    """Central finite differences vs autodiff gradients.

    ``f`` rebuilds its graph on every call and returns the scalar loss.
    Per sampled coordinate the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-5); the floor
    keeps near-zero gradients from amplifying f64 rounding noise.
    """
    rng = np.random.default_rng(seed)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: non-finite loss")
    for p in params.values():
        p.grad = None
    T.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None
                    else np.zeros_like(p.data))
                for k, p in params.items()}
    results = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            with T.no_grad():
                fp = float(f().data.reshape(()))
            flat[ci] = orig - h
            with T.no_grad():
                fm = float(f().data.reshape(()))
            flat[ci] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[ci])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            worst = max(worst, rel)
        results[name] = FiniteDiffResult(name, worst, len(coords),
                                         worst < rtol)
    return results


# ---------------------------------------------------------------------------
# check registry


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seed: int
    volatile: bool = False   # wall-clock measurement; value varies per run

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status:4s}  {self.name:42s} measured={self.measured:.3e} "
                f"tol={self.tolerance:.3e} seed={self.seed}")


@dataclass
class VerificationReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [r.line() for r in self.results]
        n_fail = sum(1 for r in self.results if not r.passed)
        lines.append(f"{len(self.results)} checks, {n_fail} failed")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["name,status,measured,tolerance,seed,volatile"]
        for r in self.results:
            rows.append(f"{r.name},{'pass' if r.passed else 'fail'},"
                        f"{r.measured!r},{r.tolerance!r},{r.seed},"
                        f"{int(r.volatile)}")
        return "\n".join(rows) + "\n"


def _rand_cross_params(dim, heads, window, seed, cyclic, dtype=np.float64):
    rng = np.random.default_rng(seed)
    p = CrossAttentionParams(dim, heads, window, rng,
                             cyclic_shift_enabled=cyclic, dtype=dtype)
    # Randomize everything the constructor leaves at zero/one so the
    # equivalence check exercises bias, temperature and norm paths.
    p.bias_table.data = rng.normal(0, 0.5, p.bias_table.shape).astype(dtype)
    p.tau.data = rng.uniform(0.2, 1.5, p.tau.shape).astype(dtype)
    p.norm.gamma.data = rng.uniform(0.5, 1.5,
                                    p.norm.gamma.shape).astype(dtype)
    p.norm.beta.data = rng.normal(0, 0.2, p.norm.beta.shape).astype(dtype)
    return p


def cross_oracle_max_diff(n_instances: int = 20, dim: int = 8,
                          grid: int = 4, window: int = 4,
                          dtype=np.float64, seed: int = 101,
                          perturb: Optional[Callable] = None) -> float:
    """Max |cross_attend - grid oracle| over instances x heads x shift.

    ``perturb`` mutates the implementation's parameters after the oracle
    has captured them (the hook for mutation testing).
    """
    worst = 0.0
    for heads in (1, 2):
        for cyclic in (False, True):
            for inst in range(n_instances):
                s = seed + 1000 * heads + 100 * int(cyclic) + inst
                p = _rand_cross_params(dim, heads, window, s, cyclic,
                                       dtype=dtype)
                oracle_params = params_from_cross(p, window * window)
                if perturb is not None:
                    perturb(p)
                rng = np.random.default_rng(s + 7)
                i_map = rng.normal(0, 1, (grid, grid, dim))
                o_map = rng.normal(0, 1, (grid, grid, dim))
                i_fm = FeatureMap(Tensor(i_map.astype(dtype))
                                  .reshape((1, grid, grid, dim)))
                o_fm = FeatureMap(Tensor(o_map.astype(dtype))
                                  .reshape((1, grid, grid, dim)))
                with T.no_grad():
                    got = cross_attend(i_fm, o_fm, p).data.data[0]
                want = oracle_cross_attention_grid(
                    i_map, o_map, oracle_params, window, cyclic)
                worst = max(worst, float(np.abs(got - want).max()))
    return worst


def check_cross_oracle_equivalence() -> CheckResult:
    worst64 = cross_oracle_max_diff(n_instances=20, dtype=np.float64)
    worst32 = cross_oracle_max_diff(n_instances=3, dtype=np.float32,
                                    seed=301)
    passed = worst64 < 1e-10 and worst32 < 1e-5
    return CheckResult("cross_attend vs loop oracle (f64/f32)", passed,
                       worst64, 1e-10, 101)


def check_window_attention_oracle() -> CheckResult:
    rng = np.random.default_rng(11)
    dim, grid, w = 8, 4, 4
    p = WindowAttentionParams(dim, 2, w, rng, dtype=np.float64)
    p.bias_table.data = rng.normal(0, 0.5, p.bias_table.shape)
    p.tau.data = rng.uniform(0.3, 1.4, p.tau.shape)
    worst = 0.0
    for shifted in (False, True):
        x = rng.normal(0, 1, (grid, grid, dim))
        fm = FeatureMap(Tensor(x).reshape((1, grid, grid, dim)))
        with T.no_grad():
            got = window_self_attention(fm, p, shifted).data.data[0]
        want = oracle_cross_attention_grid(
            x, x, params_from_window_attention(p, w * w), w, shifted,
            self_attention=True)
        worst = max(worst, float(np.abs(got - want).max()))
    return CheckResult("window self-attention vs loop oracle", worst < 1e-10,
                       worst, 1e-10, 11)


def check_matmul_oracle() -> CheckResult:
    rng = np.random.default_rng(3)
    a = rng.normal(0, 1, (3, 4))
    b = rng.normal(0, 1, (4, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            want[i, j] = acc
    diff = float(np.abs(got - want).max())
    return CheckResult("matmul vs triple-loop oracle", diff < 1e-12, diff,
                       1e-12, 3)


def check_softmax_rows() -> CheckResult:
    rng = np.random.default_rng(4)
    m = rng.normal(0, 3, (4, 5))
    got = T.softmax_rows(Tensor(m)).data
    want = np.exp(m) / np.exp(m).sum(axis=-1, keepdims=True)
    diff = float(np.abs(got - want).max())
    row_err = float(np.abs(got.sum(axis=-1) - 1.0).max())
    passed = diff < 1e-12 and row_err < 1e-6
    return CheckResult("softmax_rows vs exp/sum oracle", passed,
                       max(diff, row_err), 1e-6, 4)


def check_cosine_matrix() -> CheckResult:
    rng = np.random.default_rng(5)
    a = rng.normal(0, 1, (3, 4))
    b = rng.normal(0, 1, (2, 4))
    got = T.cosine_similarity_matrix(Tensor(a), Tensor(b)).data
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-6)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-6)
    diff = float(np.abs(got - an @ bn.T).max())
    return CheckResult("cosine matrix vs normalize-then-dot", diff < 1e-10,
                       diff, 1e-10, 5)


def check_cyclic_shift() -> CheckResult:
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (4, 4, 2))
    got = T.cyclic_shift(Tensor(x), 1, 3).data
    want = np.zeros_like(x)
    for y in range(4):
        for xx in range(4):
            want[(y + 1) % 4, (xx + 3) % 4] = x[y, xx]
    diff = float(np.abs(got - want).max())
    back = T.cyclic_shift(T.cyclic_shift(Tensor(x), 1, 3), -1, -3).data
    exact = diff == 0.0 and np.array_equal(back, x)
    return CheckResult("cyclic_shift vs modular-index oracle", exact, diff,
                       0.0, 6)


def check_window_roundtrip() -> CheckResult:
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, (2, 8, 8, 3))
    wins = T.window_partition(Tensor(x), 4)
    back = T.window_reverse(wins, 4, 8, 8, batch=2).data
    ok = np.array_equal(back, x)
    return CheckResult("window partition/reverse identity", ok,
                       0.0 if ok else 1.0, 0.0, 7)


def check_kernel_gradients() -> CheckResult:
    """Finite-difference audit over every tensor-core kernel at f64."""
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(0, 1, (4, 6)), requires_grad=True)
    w = Tensor(rng.normal(0, 0.5, (6, 6)), requires_grad=True)
    b = Tensor(rng.normal(0, 0.1, 6), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    beta = Tensor(rng.normal(0, 0.1, 6), requires_grad=True)
    other = Tensor(rng.normal(0, 1, (3, 6)), requires_grad=True)
    targets = Tensor(np.array([[0.3, 0.7], [1.0, 0.0], [0.5, 0.5],
                               [0.0, 1.0]]))
    head = Tensor(rng.normal(0, 0.5, (6, 2)), requires_grad=True)

    def f():
        y = T.linear(x, w, b)
        y = T.gelu(y)
        y = T.layernorm(y, gamma, beta)
        sims = T.cosine_similarity_matrix(y, other)
        attn = T.softmax_rows(sims)
        mixedv = T.matmul(attn, other)
        logits = T.matmul(mixedv, head)
        return T.cross_entropy_soft(logits, targets)

    res = finite_diff_check(f, {"x": x, "w": w, "b": b, "gamma": gamma,
                                "beta": beta, "other": other, "head": head},
                            h=1e-6, rtol=1e-5, max_coords=64, seed=8)
    worst = max(r.max_rel_err for r in res.values())
    return CheckResult("kernel finite-difference audit", worst < 1e-5,
                       worst, 1e-5, 8)


def check_softmax_grad_conservation() -> CheckResult:
    rng = np.random.default_rng(9)
    v = Tensor(rng.normal(0, 1, (3, 5)), requires_grad=True)
    loss = T.tsum(T.softmax_rows(v))
    T.backward(loss)
    worst = float(np.abs(v.grad).max())
    return CheckResult("sum(softmax) has zero gradient", worst < 1e-12,
                       worst, 1e-12, 9)


def check_patch_embed_linear_map() -> CheckResult:
    rng = np.random.default_rng(12)
    pe = PatchEmbed(3, 4, 8, rng, dtype=np.float64)
    flat_dim = 4 * 4 * 3
    unit = rng.integers(flat_dim)
    grid = np.zeros((1, 4, 4, 3))
    grid.reshape(-1)[unit] = 1.0
    # flatten order is (patch_row, patch_col, channel)
    got = pe.project_grid(Tensor(grid)).data[0, 0, 0]
    want = pe.proj.w.data[unit] + pe.proj.b.data
    diff = float(np.abs(got - want).max())
    return CheckResult("patch embed vs direct linear map", diff < 1e-10,
                       diff, 1e-10, 12)


def check_patch_merge_oracle() -> CheckResult:
    rng = np.random.default_rng(13)
    pm = PatchMerge(8, rng, dtype=np.float64)
    x = rng.normal(0, 1, (1, 4, 4, 8))
    got = pm(Tensor(x)).data[0]
    w = pm.reduction.w.data
    want = np.zeros((2, 2, 16))
    for y in range(2):
        for xx in range(2):
            gathered = np.concatenate([x[0, 2 * y + dy, 2 * xx + dx]
                                       for dy in range(2)
                                       for dx in range(2)])
            want[y, xx] = gathered @ w
    diff = float(np.abs(got - want).max())
    return CheckResult("patch merge vs gather-concat-project", diff < 1e-10,
                       diff, 1e-10, 13)


def expected_tap_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    """Shape-propagation oracle, independent of the encoder code path."""
    g = cfg.image_size // cfg.patch_size
    d = cfg.embed_dim
    return {"S1": (g, g, d), "S2": (g, g, d), "S3": (g // 2, g // 2, 2 * d),
            "S4": (g // 4, g // 4, 4 * d), "S5": (g // 4, g // 4, 4 * d)}


def check_encode_tap_shapes() -> CheckResult:
    cfg = desk_encoder_config()
    enc = SwinEncoder(cfg, seed=1)
    img = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
    with T.no_grad():
        taps = enc.encode(img)
    want = expected_tap_shapes(cfg)
    ok = all(taps[k].data.shape[1:] == want[k] for k in want)
    return CheckResult("encoder tap shape propagation", ok,
                       0.0 if ok else 1.0, 0.0, 1)


def collect_labels(t: Tensor) -> Dict[str, List[Tensor]]:
    """Walk the recorded graph from ``t`` and bucket tensors by label."""
    out: Dict[str, List[Tensor]] = {}
    seen = set()
    stack = [t]
    while stack:
        cur = stack.pop()
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        if cur.label:
            out.setdefault(cur.label, []).append(cur)
        stack.extend(cur._parents)
    return out


def _reaches(src: Tensor, dst: Tensor) -> bool:
    seen = set()
    stack = [src]
    while stack:
        cur = stack.pop()
        if cur is dst:
            return True
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        stack.extend(cur._parents)
    return False


def check_postnorm_structure() -> CheckResult:
    """Residual adds must sit between the sublayer output and the layernorm
    that feeds the next sublayer (structural graph inspection)."""
    rng = np.random.default_rng(14)
    blk = SwinBlock(8, 2, 2, shift=False, rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(0, 1, (1, 4, 4, 8)), requires_grad=True)
    out = blk(x)
    labels = collect_labels(out)
    ok = True
    for need in ("attn_out", "residual_add_attn", "post_norm_attn",
                 "mlp_out", "residual_add_mlp", "post_norm_mlp"):
        ok = ok and need in labels
    if ok:
        r1 = labels["residual_add_attn"][0]
        n1 = labels["post_norm_attn"][0]
        m = labels["mlp_out"][0]
        r2 = labels["residual_add_mlp"][0]
        n2 = labels["post_norm_mlp"][0]
        a = labels["attn_out"][0]
        # add consumes the raw input and the attention branch, the norm
        # consumes the add, the MLP consumes the norm, and so on.
        ok = (x in r1._parents or _reaches(r1, x)) and a in r1._parents
        ok = ok and _reaches(n1, r1) and n1 is not r1
        ok = ok and _reaches(m, n1)
        ok = ok and m in r2._parents and _reaches(r2, n1)
        ok = ok and _reaches(n2, r2) and out is n2
    return CheckResult("post-norm block order (graph inspection)", ok,
                       0.0 if ok else 1.0, 0.0, 14)


def check_encoder_seed_decoupling() -> CheckResult:
    cfg = micro_encoder_config()
    e1 = SwinEncoder(cfg, seed=1)
    e2 = SwinEncoder(cfg, seed=2)
    img = Tensor(np.random.default_rng(0).random((1, 3, 8, 8),
                                                 dtype=np.float32))
    with T.no_grad():
        d = float(np.abs(e1(img).data.data - e2(img).data.data).max())
    return CheckResult("different seeds give different encoders", d > 1e-4,
                       d, 1e-4, 1)


def check_constant_field_preservation() -> CheckResult:
    # Fresh-init bias table (zeros) keeps the uniform attention weights at
    # exact powers of two, so shifted and plain paths agree bit for bit.
    rng = np.random.default_rng(15)
    p = WindowAttentionParams(8, 2, 4, rng, dtype=np.float64)
    p.tau.data = rng.uniform(0.3, 1.4, p.tau.shape)
    const = np.ones((1, 8, 8, 8)) * 0.37
    fm = FeatureMap(Tensor(const))
    with T.no_grad():
        plain = window_self_attention(fm, p, shifted=False).data.data
        shifted = window_self_attention(fm, p, shifted=True).data.data
    spread = float(plain.std(axis=(1, 2)).max())
    diff = float(np.abs(plain - shifted).max())
    return CheckResult("constant field preserved, shift-invariant",
                       spread < 1e-12 and diff < 1e-12,
                       max(spread, diff), 1e-12, 15)


def window_attention_timing(dim: int = 16, heads: int = 2, w: int = 4,
                            grids: Sequence[int] = (8, 16, 32),
                            reps: int = 9) -> Tuple[float, List[float]]:
    """Median wall time of window self-attention per grid, plus the R^2 of
    a straight-line fit of time against token count."""
    rng = np.random.default_rng(16)
    p = WindowAttentionParams(dim, heads, w, rng)
    times = []
    for g in grids:
        x = FeatureMap(Tensor(rng.random((1, g, g, dim),
                                         dtype=np.float32)))
        with T.no_grad():
            window_self_attention(x, p, shifted=False)   # warm up
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                window_self_attention(x, p, shifted=False)
                samples.append(time.perf_counter() - t0)
        times.append(sorted(samples)[len(samples) // 2])
    n = np.array([g * g for g in grids], dtype=np.float64)
    y = np.array(times)
    a = np.stack([n, np.ones_like(n)], axis=1)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return r2, times


def check_timing_linear() -> CheckResult:
    r2, _ = window_attention_timing()
    return CheckResult("attention wall time linear in tokens (R^2)",
                       r2 > 0.95, r2, 0.95, 16, volatile=True)


def check_cross_sidedness() -> CheckResult:
    rng = np.random.default_rng(17)
    p = _rand_cross_params(8, 2, 4, 17, False)
    i_fm = FeatureMap(Tensor(rng.normal(0, 1, (1, 4, 4, 8)),
                             requires_grad=True))
    o_fm = FeatureMap(Tensor(rng.normal(0, 1, (1, 4, 4, 8)),
                             requires_grad=True))
    stats: dict = {}
    cross_attend(i_fm, o_fm, p, stats=stats)
    # Gradients of Q's pre-attention output flow only from o; K/V only from i.
    T.backward(T.tsum(T.mul(stats["q"], stats["q"])))
    q_from_i = 0.0 if i_fm.data.grad is None else float(
        np.abs(i_fm.data.grad).max())
    q_from_o = float(np.abs(o_fm.data.grad).max())
    i_fm.data.grad = None
    o_fm.data.grad = None
    stats2: dict = {}
    cross_attend(i_fm, o_fm, p, stats=stats2)
    T.backward(T.tsum(T.add(T.mul(stats2["k"], stats2["k"]),
                            T.mul(stats2["v"], stats2["v"]))))
    kv_from_o = 0.0 if o_fm.data.grad is None else float(
        np.abs(o_fm.data.grad).max())
    kv_from_i = float(np.abs(i_fm.data.grad).max())
    ok = q_from_i == 0.0 and q_from_o > 0 and kv_from_o == 0.0 and \
        kv_from_i > 0
    return CheckResult("Q reads o-side only, K/V read i-side only", ok,
                       max(q_from_i, kv_from_o), 0.0, 17)


def check_cross_scale_invariance() -> CheckResult:
    rng = np.random.default_rng(18)
    p = _rand_cross_params(8, 2, 4, 18, False)
    p.q.b.data[:] = 0.0
    i_map = rng.normal(0, 1, (1, 4, 4, 8))
    o_map = rng.normal(0, 1, (1, 4, 4, 8))
    s1: dict = {}
    s2: dict = {}
    with T.no_grad():
        cross_attend(FeatureMap(Tensor(i_map)), FeatureMap(Tensor(o_map)),
                     p, stats=s1)
        cross_attend(FeatureMap(Tensor(i_map)),
                     FeatureMap(Tensor(3.7 * o_map)), p, stats=s2)
    diff = float(np.abs(s1["attn_weights"] - s2["attn_weights"]).max())
    return CheckResult("attention weights scale-invariant in o (zero Q "
                       "bias)", diff < 1e-6, diff, 1e-6, 18)


def check_cross_shift_toggle_constant() -> CheckResult:
    """On constant inputs the masked-shifted and plain paths compute the
    same weighted mean; identical up to the last-ulp difference of the
    two summation groupings (16 uniform terms vs 4 + 12 masked zeros)."""
    rng = np.random.default_rng(19)
    p_off = _rand_cross_params(8, 1, 4, 19, False)
    p_on = _rand_cross_params(8, 1, 4, 19, True)
    # freshly initialized bias tables are zero in real blocks; replicate
    for p in (p_off, p_on):
        p.bias_table.data[:] = 0.0
    const_i = FeatureMap(Tensor(np.full((1, 4, 4, 8), 0.21)))
    const_o = FeatureMap(Tensor(np.full((1, 4, 4, 8), -0.43)))
    with T.no_grad():
        off = cross_attend(const_i, const_o, p_off).data.data
        on = cross_attend(const_i, const_o, p_on).data.data
    diff = float(np.abs(off - on).max())
    return CheckResult("shift toggle is no-op on constant input",
                       diff < 1e-12, diff, 1e-12, 19)


def check_cross_row_stochastic() -> CheckResult:
    rng = np.random.default_rng(20)
    p = _rand_cross_params(8, 2, 4, 20, True)
    i_fm = FeatureMap(Tensor(rng.normal(0, 1, (2, 8, 8, 8))))
    o_fm = FeatureMap(Tensor(rng.normal(0, 1, (2, 8, 8, 8))))
    stats: dict = {}
    with T.no_grad():
        cross_attend(i_fm, o_fm, p, stats=stats)
    err = float(np.abs(stats["attn_weights"].sum(axis=-1) - 1.0).max())
    return CheckResult("attention rows sum to 1", err < 1e-6, err, 1e-6, 20)


def check_cross_stack_limit() -> CheckResult:
    """Second block made value-free: stack(2) must reproduce block 1's
    output up to the idempotent layernorm (documented tolerance 1e-3)."""
    rng = np.random.default_rng(21)
    stack = CrossBlockStack(8, 1, 4, 2, np.random.default_rng(21),
                            dtype=np.float64)
    blk2 = stack.blocks[1]
    blk2.v.w.data[:] = 0.0
    blk2.v.b.data[:] = 0.0
    blk2.proj.b.data[:] = 0.0
    i_fm = FeatureMap(Tensor(rng.normal(0, 1, (1, 4, 4, 8))))
    o_fm = FeatureMap(Tensor(rng.normal(0, 1, (1, 4, 4, 8))))
    with T.no_grad():
        one = cross_attend(i_fm, o_fm, stack.blocks[0]).data.data
        two = stack(i_fm, o_fm).data.data
    diff = float(np.abs(one - two).max())
    return CheckResult("stack(2) with value-free 2nd block ~ block 1",
                       diff < 1e-3, diff, 1e-3, 21)


def check_variant_contracts() -> CheckResult:
    from .models import ModelConfig
    rng = np.random.default_rng(22)
    x = rng.random((2, 3, 8, 8), dtype=np.float32)
    worst = 0.0
    ok = True
    for variant, kw in [("io-v8", {}), ("io-w12", {}),
                        ("output-base", {}),
                        ("output-nlayers", {"output_extra_layers": 1}),
                        ("siamese-io", {}),
                        ("concat-baseline",
                         {"encoder": micro_encoder_config(in_channels=6)})]:
        kw.setdefault("encoder", micro_encoder_config())
        m = build_model(ModelConfig(variant=variant, seed=22, **kw))
        with T.no_grad():
            out = m.forward(x, x) if m.arity == "pair" else m.forward(x)
        ok = ok and out.logits.shape == (2, 2)
        worst = max(worst, float(
            np.abs(out.probabilities.sum(axis=-1) - 1.0).max()))
    return CheckResult("variant forward contracts", ok and worst < 1e-6,
                       worst, 1e-6, 22)


def check_decoupling_audit() -> CheckResult:
    from .models import ModelConfig
    enc = micro_encoder_config()
    v8 = build_model(ModelConfig(variant="io-v8", encoder=enc, seed=5))
    si = build_model(ModelConfig(variant="siamese-io", encoder=enc, seed=5))
    ids_in = v8.input_encoder.param_ids()
    ids_out = v8.output_encoder.param_ids()
    disjoint = not (ids_in & ids_out)
    identity = v8.param_count() - v8.input_encoder.param_count() == \
        si.param_count()
    ok = disjoint and identity
    return CheckResult("encoder decoupling & parameter-count identity", ok,
                       0.0 if ok else 1.0, 0.0, 5)


def check_w12_tap_audit() -> CheckResult:
    from .models import ModelConfig
    cfg = ModelConfig(variant="io-w12", encoder=desk_encoder_config(),
                      seed=23)
    m = build_model(cfg)
    x = np.zeros((1, 3, 32, 32), dtype=np.float32)
    with T.no_grad():
        out = m.forward(x, x)
    d = cfg.encoder.embed_dim
    want = [(1, d), (2, d), (3, 2 * d), (4, 4 * d), (5, 4 * d)]
    ok = m.tap_log == want and np.isfinite(out.logits.data).all()
    return CheckResult("io-w12 tap projection audit", ok,
                       0.0 if ok else 1.0, 0.0, 23)


def model_loss_fn(model, x_in, x_out, targets):
    def f():
        out = (model.forward(x_in, x_out) if model.arity == "pair"
               else model.forward(x_out))
        return T.cross_entropy_soft(out.logits, targets)
    return f


def check_model_gradient_audit(max_coords: int = 8,
                               rtol: float = 1e-4) -> CheckResult:
    """f64 finite-difference audit of a full micro io-v8 model."""
    from .models import ModelConfig
    m = build_model(ModelConfig(variant="io-v8",
                                encoder=micro_encoder_config(), seed=24),
                    dtype=np.float64)
    rng = np.random.default_rng(24)
    x_in = Tensor(rng.random((1, 3, 8, 8)))
    x_out = Tensor(rng.random((1, 3, 8, 8)))
    targets = Tensor(np.array([[0.3, 0.7]]))
    res = finite_diff_check(model_loss_fn(m, x_in, x_out, targets),
                            m.named_parameters(), h=1e-6, rtol=rtol,
                            max_coords=max_coords, seed=24)
    worst = max(r.max_rel_err for r in res.values())
    return CheckResult("io-v8 model finite-difference audit", worst < rtol,
                       worst, rtol, 24)


def check_output_blindness() -> CheckResult:
    from .models import ModelConfig
    m = build_model(ModelConfig(variant="output-base",
                                encoder=micro_encoder_config(), seed=25))
    rng = np.random.default_rng(25)
    x_out = rng.random((1, 3, 8, 8), dtype=np.float32)
    with T.no_grad():
        a = m.forward(x_out).logits.data
        b = m.forward(x_out).logits.data
    ok = m.arity == "single" and np.array_equal(a, b)
    return CheckResult("output models take the output alone", ok,
                       0.0 if ok else 1.0, 0.0, 25)


def check_param_monotonicity() -> CheckResult:
    from .models import ModelConfig
    enc = micro_encoder_config()
    base = build_model(ModelConfig(variant="output-base", encoder=enc))
    n1 = build_model(ModelConfig(variant="output-nlayers", encoder=enc,
                                 output_extra_layers=1))
    n2 = build_model(ModelConfig(variant="output-nlayers", encoder=enc,
                                 output_extra_layers=2))
    ok = n2.param_count() > n1.param_count() > base.param_count()
    return CheckResult("output-nlayers parameter monotonicity", ok,
                       0.0 if ok else 1.0, 0.0, 0)


def check_lr_conformance() -> CheckResult:
    cfg = TrainConfig(total_epochs=10, warmup_epochs=2, seed=0)
    spe = 50
    total = cfg.total_epochs * spe
    warm = cfg.warmup_epochs * spe
    endpoint_err = max(
        abs(lr_at(0, cfg, spe) - cfg.warmup_lr),
        abs(lr_at(warm, cfg, spe) - cfg.base_lr),
        abs(lr_at(total, cfg, spe) - cfg.min_lr),
        abs(lr_at((warm + total) // 2, cfg, spe) -
            (cfg.base_lr + cfg.min_lr) / 2),
    )
    boundary_jump = abs(lr_at(warm - 1, cfg, spe) - lr_at(warm, cfg, spe))
    continuous = boundary_jump < cfg.base_lr * 0.05
    return CheckResult("lr schedule endpoint/boundary conformance",
                       endpoint_err == 0.0 and continuous, endpoint_err,
                       0.0, 0)


def check_adamw_hand_trace() -> CheckResult:
    p = Tensor(np.array([0.5], dtype=np.float64), requires_grad=True)
    opt = AdamW({"p": p}, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.04)
    g = np.array([0.3], dtype=np.float64)
    # independent manual replication
    theta, m, v = 0.5, 0.0, 0.0
    lr = 0.01
    for t in range(1, 4):
        m = 0.9 * m + 0.1 * 0.3
        v = 0.999 * v + 0.001 * 0.3 * 0.3
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        theta = theta - lr * (mh / (math.sqrt(vh) + 1e-8) + 0.04 * theta)
        p.grad = g.copy()
        opt.step(lr)
    diff = abs(float(p.data[0]) - theta)
    return CheckResult("adamw vs hand-computed trace", diff < 1e-12, diff,
                       1e-12, 0)


def check_adamw_decay_fixed_point() -> CheckResult:
    p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.1)
    p.grad = np.zeros(2, dtype=p.data.dtype)
    opt.step(0.01)
    scaled = float(np.abs(p.data - np.array([2.0, -3.0]) * (1 - 0.001)).max())
    q = Tensor(np.array([1.5]), requires_grad=True)
    opt2 = AdamW({"q": q}, weight_decay=0.0)
    q.grad = np.zeros(1, dtype=q.data.dtype)
    opt2.step(0.01)
    fixed = float(np.abs(q.data - 1.5).max())
    worst = max(scaled, fixed)
    return CheckResult("decoupled decay scale & zero-update fixed point",
                       worst == 0.0, worst, 0.0, 0)


def check_tau_clamp() -> CheckResult:
    rng = np.random.default_rng(26)
    p = WindowAttentionParams(8, 2, 4, rng)
    opt = AdamW(p.named_parameters(), weight_decay=0.0)
    for _ in range(50):
        for t in p.named_parameters().values():
            t.grad = np.ones_like(t.data)   # push everything down hard
        opt.step(0.5)
    low = float(p.tau.data.min())
    floor = float(p.tau.data.dtype.type(0.01))   # clamp lives at f32
    return CheckResult("tau re-clamped to >= 0.01 after steps", low >= floor,
                       low, floor, 26)


SCOPES = ("tensor", "encoder", "cross", "models", "schedule")

_CHECKS: Dict[str, List[Callable[[], CheckResult]]] = {
    "tensor": [check_matmul_oracle, check_softmax_rows, check_cosine_matrix,
               check_cyclic_shift, check_window_roundtrip,
               check_kernel_gradients, check_softmax_grad_conservation],
    "encoder": [check_patch_embed_linear_map, check_patch_merge_oracle,
                check_window_attention_oracle, check_encode_tap_shapes,
                check_postnorm_structure, check_encoder_seed_decoupling,
                check_constant_field_preservation, check_timing_linear],
    "cross": [check_cross_oracle_equivalence, check_cross_sidedness,
              check_cross_scale_invariance,
              check_cross_shift_toggle_constant, check_cross_row_stochastic,
              check_cross_stack_limit],
    "models": [check_variant_contracts, check_decoupling_audit,
               check_w12_tap_audit, check_model_gradient_audit,
               check_output_blindness, check_param_monotonicity],
    "schedule": [check_lr_conformance, check_adamw_hand_trace,
                 check_adamw_decay_fixed_point, check_tau_clamp],
}


def run_suite(scopes: Optional[Sequence[str]] = None) -> VerificationReport:
    """Execute every registered invariant for the requested scopes with
    fixed seeds. One entry per registered check, always."""
    if scopes is None:
        scopes = SCOPES
    report = VerificationReport()
    for scope in scopes:
        if scope not in _CHECKS:
            raise NumericError(f"unknown scope {scope!r}")
        for fn in _CHECKS[scope]:
            report.results.append(fn())
    return report
