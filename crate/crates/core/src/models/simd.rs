//! AVX-512 kernels for single-precision attention heads.
//!
//! Sixteen queries are processed at once with one query per vector lane,
//! so the softmax over keys is plain elementwise arithmetic. The kernels
//! check buffer sizes once and then index unchecked.

use std::arch::x86_64::*;

/// Queries per block (one per lane).
const LANES: usize = 16;
/// Keys scored together; each gets its own accumulator.
const KEYS: usize = 8;

pub(crate) fn available() -> bool {
    std::is_x86_feature_detected!("avx512f")
}

/// Operands of one head, each row-major with its own row stride so a head
/// can be read in place from the fused projections: `q` is `nq × dh` and
/// already scaled, `k` and `v` are `n × dh`, `kf` and `vf` are `n_f × dh`.
pub(crate) struct Head<'a> {
    pub q: &'a [f32],
    pub ld_q: usize,
    pub nq: usize,
    pub k: &'a [f32],
    pub v: &'a [f32],
    pub ld_kv: usize,
    pub n: usize,
    pub kf: &'a [f32],
    pub vf: &'a [f32],
    pub ld_f: usize,
    pub n_f: usize,
    pub dh: usize,
    /// One softmax over token and feature keys instead of two.
    pub joint: bool,
}

/// Reusable buffers for [`attend`].
#[derive(Default)]
pub(crate) struct Scratch {
    kp: Vec<f32>,
    kfp: Vec<f32>,
    qt: Vec<f32>,
    st: Vec<f32>,
}

/// Whether `rows` rows of `dh` values with stride `ld` fit in `len`.
fn fits(len: usize, rows: usize, ld: usize, dh: usize) -> bool {
    ld >= dh && (rows == 0 || len >= (rows - 1) * ld + dh)
}

/// Writes the head output (`nq × dh`, row stride `ld_out`) into `out`.
pub(crate) fn attend(h: &Head<'_>, out: &mut [f32], ld_out: usize, scratch: &mut Scratch) {
    assert!(available(), "AVX-512 not available");
    let (dh, nq) = (h.dh, h.nq);
    assert!(dh % LANES == 0 && h.n > 0);
    assert!(fits(h.q.len(), nq, h.ld_q, dh) && fits(out.len(), nq, ld_out, dh));
    assert!(fits(h.k.len(), h.n, h.ld_kv, dh) && fits(h.v.len(), h.n, h.ld_kv, dh));
    assert!(fits(h.kf.len(), h.n_f, h.ld_f, dh) && fits(h.vf.len(), h.n_f, h.ld_f, dh));
    pack_keys(h.k, h.n, h.ld_kv, dh, &mut scratch.kp);
    pack_keys(h.kf, h.n_f, h.ld_f, dh, &mut scratch.kfp);
    let (n8, nf8) = (h.n.div_ceil(KEYS) * KEYS, h.n_f.div_ceil(KEYS) * KEYS);
    scratch.qt.clear();
    scratch.qt.resize(dh * LANES, 0.0);
    scratch.st.clear();
    scratch.st.resize((n8 + nf8) * LANES, 0.0);
    let mut r0 = 0;
    while r0 < nq {
        let rows = (nq - r0).min(LANES);
        for r in 0..rows {
            let src = &h.q[(r0 + r) * h.ld_q..(r0 + r) * h.ld_q + dh];
            for (d, &x) in src.iter().enumerate() {
                scratch.qt[d * LANES + r] = x;
            }
        }
        for r in rows..LANES {
            for d in 0..dh {
                scratch.qt[d * LANES + r] = 0.0;
            }
        }
        // SAFETY: AVX-512F was detected above; the packed buffers have the
        // sizes the kernel indexes with and `fits` covered the strided reads
        // and writes.
        unsafe { attend_block(h, scratch, n8, &mut out[r0 * ld_out..], ld_out, rows) };
        r0 += rows;
    }
}

/// Keys in blocks of `KEYS`: key `j`, component `d` at
/// `(j / KEYS) * KEYS * dh + d * KEYS + j % KEYS`, zero padded.
fn pack_keys(k: &[f32], n: usize, ld: usize, dh: usize, dst: &mut Vec<f32>) {
    dst.clear();
    dst.resize(n.div_ceil(KEYS) * KEYS * dh, 0.0);
    for (b, panel) in dst.chunks_exact_mut(KEYS * dh).enumerate() {
        for kk in 0..KEYS.min(n - b * KEYS) {
            let row = &k[(b * KEYS + kk) * ld..(b * KEYS + kk) * ld + dh];
            for (d, &x) in row.iter().enumerate() {
                panel[d * KEYS + kk] = x;
            }
        }
    }
}

#[target_feature(enable = "avx512f")]
unsafe fn attend_block(h: &Head<'_>, s: &mut Scratch, n8: usize, out: &mut [f32], ld_out: usize, rows: usize) {
    let dh = h.dh;
    let st = s.st.as_mut_ptr();
    let sf = st.add(n8 * LANES);
    scores(s.qt.as_ptr(), s.kp.as_ptr(), h.n, dh, st);
    scores(s.qt.as_ptr(), s.kfp.as_ptr(), h.n_f, dh, sf);
    let neg = _mm512_set1_ps(f32::NEG_INFINITY);
    let mut mt = column_max(st, h.n, neg);
    let mut mf = column_max(sf, h.n_f, neg);
    if h.joint {
        mt = _mm512_max_ps(mt, mf);
        mf = mt;
    }
    let one = _mm512_set1_ps(1.0);
    let sum_t = exp_rows(st, h.n, mt);
    let sum_f = exp_rows(sf, h.n_f, mf);
    let (inv_t, inv_f) = if h.joint {
        let inv = _mm512_div_ps(one, _mm512_add_ps(sum_t, sum_f));
        (inv, inv)
    } else {
        (_mm512_div_ps(one, sum_t), _mm512_div_ps(one, sum_f))
    };
    let mut tile = [0.0f32; LANES * LANES];
    for cc in (0..dh).step_by(LANES) {
        let mut acc = weighted_sum(st, h.v.as_ptr().add(cc), h.n, h.ld_kv);
        if h.n_f > 0 {
            let accf = weighted_sum(sf, h.vf.as_ptr().add(cc), h.n_f, h.ld_f);
            for (a, f) in acc.iter_mut().zip(accf) {
                *a = _mm512_fmadd_ps(f, inv_f, _mm512_mul_ps(*a, inv_t));
            }
        } else {
            for a in acc.iter_mut() {
                *a = _mm512_mul_ps(*a, inv_t);
            }
        }
        for (c, a) in acc.iter().enumerate() {
            _mm512_storeu_ps(tile.as_mut_ptr().add(c * LANES), *a);
        }
        for r in 0..rows {
            for c in 0..LANES {
                out[r * ld_out + cc + c] = tile[c * LANES + r];
            }
        }
    }
}

/// `s[j] = Σ_d qt[d] · k[j, d]` for `n` packed keys; row `j` of `s` holds
/// the scores of key `j` for every query lane.
#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn scores(qt: *const f32, kp: *const f32, n: usize, dh: usize, s: *mut f32) {
    if dh == LANES {
        return scores_resident(qt, kp, n, s);
    }
    for jb in (0..n).step_by(KEYS) {
        let panel = kp.add(jb * dh);
        let mut acc = [_mm512_setzero_ps(); KEYS];
        for d in 0..dh {
            let q = _mm512_loadu_ps(qt.add(d * LANES));
            let kd = panel.add(d * KEYS);
            for (kk, acc) in acc.iter_mut().enumerate() {
                *acc = _mm512_fmadd_ps(q, _mm512_set1_ps(*kd.add(kk)), *acc);
            }
        }
        for (kk, acc) in acc.iter().enumerate() {
            _mm512_storeu_ps(s.add((jb + kk) * LANES), *acc);
        }
    }
}

/// [`scores`] for `dh = 16` with the query block held in registers.
#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn scores_resident(qt: *const f32, kp: *const f32, n: usize, s: *mut f32) {
    let mut q = [_mm512_setzero_ps(); LANES];
    for (d, q) in q.iter_mut().enumerate() {
        *q = _mm512_loadu_ps(qt.add(d * LANES));
    }
    for jb in (0..n).step_by(KEYS) {
        let panel = kp.add(jb * LANES);
        let mut acc = [_mm512_setzero_ps(); KEYS];
        for (d, q) in q.iter().enumerate() {
            let kd = panel.add(d * KEYS);
            for (kk, acc) in acc.iter_mut().enumerate() {
                *acc = _mm512_fmadd_ps(*q, _mm512_set1_ps(*kd.add(kk)), *acc);
            }
        }
        for (kk, acc) in acc.iter().enumerate() {
            _mm512_storeu_ps(s.add((jb + kk) * LANES), *acc);
        }
    }
}

#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn column_max(s: *const f32, n: usize, init: __m512) -> __m512 {
    let mut m = init;
    for j in 0..n {
        m = _mm512_max_ps(m, _mm512_loadu_ps(s.add(j * LANES)));
    }
    m
}

/// Weights below `exp(FLUSH)` relative to the largest are set to zero;
/// they are far below single precision and would otherwise turn into
/// slow subnormal products.
const FLUSH: f32 = -60.0;

/// `s[j] ← exp(s[j] - m)` for every row; returns the column sums.
#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn exp_rows(s: *mut f32, n: usize, m: __m512) -> __m512 {
    let mut sum = _mm512_setzero_ps();
    let floor = _mm512_set1_ps(FLUSH);
    for j in 0..n {
        let p = s.add(j * LANES);
        let x = _mm512_sub_ps(_mm512_loadu_ps(p), m);
        let e = _mm512_maskz_mov_ps(_mm512_cmp_ps_mask::<_CMP_GE_OQ>(x, floor), exp16(x));
        _mm512_storeu_ps(p, e);
        sum = _mm512_add_ps(sum, e);
    }
    sum
}

/// `acc[c] = Σ_j s[j] · v[j, c]` for the 16 columns starting at `v`, rows
/// `ld` apart.
#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn weighted_sum(s: *const f32, v: *const f32, n: usize, ld: usize) -> [__m512; LANES] {
    let mut acc = [_mm512_setzero_ps(); LANES];
    for j in 0..n {
        let p = _mm512_loadu_ps(s.add(j * LANES));
        let vj = v.add(j * ld);
        for (c, acc) in acc.iter_mut().enumerate() {
            *acc = _mm512_fmadd_ps(_mm512_set1_ps(*vj.add(c)), p, *acc);
        }
    }
    acc
}

/// Tanh-form GELU in place, as `x / (1 + exp(-k (x + a x³)))`.
pub(crate) fn gelu_in_place(xs: &mut [f32]) {
    assert!(available(), "AVX-512 not available");
    // SAFETY: AVX-512F was detected above; loads and stores stay in `xs`.
    unsafe { gelu_kernel(xs) }
}

#[target_feature(enable = "avx512f")]
unsafe fn gelu_kernel(xs: &mut [f32]) {
    use super::tape::{GELU_A, GELU_K};
    let (k, a, one) = (_mm512_set1_ps(-GELU_K as f32), _mm512_set1_ps(GELU_A as f32), _mm512_set1_ps(1.0));
    let f = |x: __m512| {
        let x2 = _mm512_mul_ps(x, x);
        let inner = _mm512_mul_ps(x, _mm512_fmadd_ps(a, x2, one));
        _mm512_div_ps(x, _mm512_add_ps(one, exp16(_mm512_mul_ps(k, inner))))
    };
    let chunks = xs.len() / LANES;
    let p = xs.as_mut_ptr();
    for i in 0..chunks {
        _mm512_storeu_ps(p.add(i * LANES), f(_mm512_loadu_ps(p.add(i * LANES))));
    }
    let rest = xs.len() - chunks * LANES;
    if rest > 0 {
        let mask = ((1u32 << rest) - 1) as __mmask16;
        let x = _mm512_maskz_loadu_ps(mask, p.add(chunks * LANES));
        _mm512_mask_storeu_ps(p.add(chunks * LANES), mask, f(x));
    }
}

/// Rows of `a` per GEMM panel.
const PANEL: usize = 6;

/// `out = a · w + bias` with `a` `n × k` (row stride `lda`), `w` `k × m`
/// row-major and `m` a multiple of 16.
pub(crate) fn gemm_bias(a: &[f32], lda: usize, n: usize, k: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    assert!(available(), "AVX-512 not available");
    let m = bias.len();
    assert!(m % LANES == 0 && w.len() == k * m && out.len() == n * m);
    assert!(n == 0 || (lda >= k && a.len() >= (n - 1) * lda + k));
    let mut panel = vec![0.0f32; k * PANEL];
    for r0 in (0..n).step_by(PANEL) {
        let rows = (n - r0).min(PANEL);
        for kk in 0..k {
            for r in 0..PANEL {
                panel[kk * PANEL + r] = if r < rows { a[(r0 + r) * lda + kk] } else { 0.0 };
            }
        }
        // SAFETY: AVX-512F was detected above and the shapes were checked.
        unsafe {
            let mut cb = 0;
            while cb + 4 * LANES <= m {
                gemm_tile::<4>(&panel, k, w, bias, cb, &mut out[r0 * m..], rows);
                cb += 4 * LANES;
            }
            while cb < m {
                gemm_tile::<1>(&panel, k, w, bias, cb, &mut out[r0 * m..], rows);
                cb += LANES;
            }
        }
    }
}

/// One `PANEL × 16C` block of output columns starting at `cb`.
#[inline]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_tile<const C: usize>(panel: &[f32], k: usize, w: &[f32], bias: &[f32], cb: usize, out: &mut [f32], rows: usize) {
    let m = bias.len();
    let mut acc = [[_mm512_setzero_ps(); C]; PANEL];
    for row in acc.iter_mut() {
        for (c, acc) in row.iter_mut().enumerate() {
            *acc = _mm512_loadu_ps(bias.as_ptr().add(cb + c * LANES));
        }
    }
    let (p, mut wk) = (panel.as_ptr(), w.as_ptr().add(cb));
    for kk in 0..k {
        let mut b = [_mm512_setzero_ps(); C];
        for (c, b) in b.iter_mut().enumerate() {
            *b = _mm512_loadu_ps(wk.add(c * LANES));
        }
        let pk = p.add(kk * PANEL);
        for (r, row) in acc.iter_mut().enumerate() {
            let x = _mm512_set1_ps(*pk.add(r));
            for (acc, b) in row.iter_mut().zip(&b) {
                *acc = _mm512_fmadd_ps(x, *b, *acc);
            }
        }
        wk = wk.add(m);
    }
    for (r, row) in acc.iter().enumerate().take(rows) {
        for (c, acc) in row.iter().enumerate() {
            _mm512_storeu_ps(out.as_mut_ptr().add(r * m + cb + c * LANES), *acc);
        }
    }
}

/// Vector form of [`super::scalar::fast_exp`]; the power of two is applied
/// with `vscalefps`.
#[inline]
#[target_feature(enable = "avx512f")]
pub(crate) unsafe fn exp16(x: __m512) -> __m512 {
    use super::scalar::{LN2_HI, LN2_LO};
    let x = _mm512_min_ps(_mm512_max_ps(x, _mm512_set1_ps(-87.0)), _mm512_set1_ps(88.0));
    let n = _mm512_roundscale_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(_mm512_mul_ps(
        x,
        _mm512_set1_ps(std::f32::consts::LOG2_E),
    ));
    let r = _mm512_fnmadd_ps(n, _mm512_set1_ps(LN2_HI), x);
    let r = _mm512_fnmadd_ps(n, _mm512_set1_ps(LN2_LO), r);
    let mut p = _mm512_set1_ps(1.0 / 720.0);
    for c in [1.0 / 120.0, 1.0 / 24.0, 1.0 / 6.0, 0.5, 1.0, 1.0] {
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(c));
    }
    _mm512_scalef_ps(p, n)
}
