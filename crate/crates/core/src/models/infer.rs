//! Tape-free forward pass used for serving.
//!
//! Unlike the tape it keeps no intermediate values, fuses projections that
//! share an input and skips everything the first-token output does not
//! need. The pass is compiled for the build target and for AVX2 and
//! AVX-512, picked at runtime.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};

use super::encoder::EncoderClassifier;
use super::scalar::Scalar;
use super::{FeatureMixing, ModelConfig};

const LANES: usize = 8;
/// Width of the dot-product accumulator; several vector registers so the
/// loop is not bound by add latency.
const DOT_LANES: usize = 32;

/// Dot product with independent accumulators so it vectorizes.
#[inline(always)]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); DOT_LANES];
    let ca = a.chunks_exact(DOT_LANES);
    let cb = b.chunks_exact(DOT_LANES);
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..DOT_LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut folded = [T::zero(); LANES];
    for (l, v) in acc.iter().enumerate() {
        folded[l % LANES] += *v;
    }
    reduce(folded) + tail
}

#[inline(always)]
fn reduce<T: Scalar>(acc: [T; LANES]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline(always)]
pub(crate) fn sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let c = xs.chunks_exact(LANES);
    let tail: T = c.remainder().iter().copied().fold(T::zero(), |a, b| a + b);
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    reduce(acc) + tail
}

#[inline(always)]
pub(crate) fn max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let c = xs.chunks_exact(LANES);
    let mut m = T::neg_infinity();
    for &x in c.remainder() {
        if x > m {
            m = x;
        }
    }
    for x in c {
        for l in 0..LANES {
            if x[l] > acc[l] {
                acc[l] = x[l];
            }
        }
    }
    acc.iter().fold(m, |a, &b| if b > a { b } else { a })
}

/// Softmax with max subtraction over an unmasked row.
#[inline(always)]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = max(row);
    row.iter_mut().for_each(|v| *v = *v - m);
    T::exp_in_place(row);
    let inv = T::one() / sum(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline(always)]
fn layer_norm<T: Scalar>(x: &mut Array2<T>, affine: Option<(&[T], &[T])>) {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(super::tape::LN_EPS);
    for mut row in x.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        let mean = sum(row) / n;
        row.iter_mut().for_each(|v| *v = *v - mean);
        let var = dot(row, row) / n;
        let r = T::one() / (var + eps).sqrt();
        match affine {
            Some((g, b)) => {
                for ((v, &g), &b) in row.iter_mut().zip(g).zip(b) {
                    *v = *v * r * g + b;
                }
            }
            None => row.iter_mut().for_each(|v| *v = *v * r),
        }
    }
}

#[inline(always)]
fn gelu<T: Scalar>(x: &mut Array2<T>, scratch: &mut Vec<T>) {
    let xs = x.as_slice_mut().expect("standard layout");
    #[cfg(target_arch = "x86_64")]
    {
        if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && super::simd::available() {
            // SAFETY: T is f32.
            let xs = unsafe { std::slice::from_raw_parts_mut(xs.as_mut_ptr() as *mut f32, xs.len()) };
            return super::simd::gelu_in_place(xs);
        }
    }
    let (k, a) = (T::of(super::tape::GELU_K), T::of(super::tape::GELU_A));
    scratch.clear();
    scratch.extend(xs.iter().map(|&v| -(k * (v + a * v * v * v))));
    T::exp_in_place(scratch);
    for (v, &e) in xs.iter_mut().zip(scratch.iter()) {
        *v = *v / (T::one() + e);
    }
}

/// `x · w + b`
#[inline(always)]
fn linear<T: Scalar>(x: ArrayView2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    #[cfg(target_arch = "x86_64")]
    {
        if let Some(y) = linear_avx512(x, w, b) {
            return y;
        }
    }
    let mut y = x.dot(w);
    let b = b.as_slice().expect("standard layout");
    for mut row in y.rows_mut() {
        row.as_slice_mut()
            .expect("standard layout")
            .iter_mut()
            .zip(b)
            .for_each(|(v, &b)| *v += b);
    }
    y
}

#[cfg(target_arch = "x86_64")]
fn linear_avx512<T: Scalar>(x: ArrayView2<T>, w: &Array2<T>, b: &Array2<T>) -> Option<Array2<T>> {
    use super::simd;
    if w.ncols() % 16 != 0 || !simd::available() {
        return None;
    }
    let (a, lda) = f32_rows(&x)?;
    let (wf, _) = f32_rows(&w.view()).filter(|_| w.is_standard_layout())?;
    let (bf, _) = f32_rows(&b.view()).filter(|_| b.is_standard_layout())?;
    let mut y = pool::zeros::<T>(x.nrows(), w.ncols());
    let out = y.as_slice_mut().expect("standard layout");
    // SAFETY: T is f32, checked by `f32_rows`.
    let out = unsafe { std::slice::from_raw_parts_mut(out.as_mut_ptr() as *mut f32, out.len()) };
    simd::gemm_bias(a, lda, x.nrows(), x.ncols(), wf, bf, out);
    Some(y)
}

/// Per-thread free list of activation buffers. Large blocks handed back to
/// the allocator tend to be returned to the OS and faulted back in on the
/// next pass, which costs more than the arithmetic at serving sizes.
mod pool {
    use std::any::{Any, TypeId};
    use std::cell::RefCell;
    use std::collections::HashMap;

    use ndarray::Array2;

    use super::Scalar;

    /// Buffers kept per element type.
    const KEEP: usize = 16;

    thread_local! {
        static FREE: RefCell<HashMap<TypeId, Box<dyn Any>>> = RefCell::new(HashMap::new());
    }

    fn with_list<T: Scalar, R>(f: impl FnOnce(&mut Vec<Vec<T>>) -> R) -> R {
        FREE.with(|free| {
            let mut free = free.borrow_mut();
            let list = free
                .entry(TypeId::of::<T>())
                .or_insert_with(|| Box::new(Vec::<Vec<T>>::new()))
                .downcast_mut::<Vec<Vec<T>>>()
                .expect("keyed by element type");
            f(list)
        })
    }

    /// A zeroed `rows × cols` matrix, in the smallest free buffer that fits.
    pub(super) fn zeros<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
        let n = rows * cols;
        let mut buf = with_list::<T, _>(|list| {
            let best = (0..list.len()).filter(|&i| list[i].capacity() >= n).min_by_key(|&i| list[i].capacity());
            best.map(|i| list.swap_remove(i))
        })
        .unwrap_or_default();
        buf.clear();
        buf.resize(n, T::zero());
        Array2::from_shape_vec((rows, cols), buf).expect("length matches shape")
    }

    pub(super) fn give<T: Scalar>(a: Array2<T>) {
        let (buf, _) = a.into_raw_vec_and_offset();
        with_list::<T, _>(|list| {
            if list.len() < KEEP {
                list.push(buf);
            }
        });
    }
}

struct Weights<'a, T: Scalar> {
    model: &'a EncoderClassifier<T>,
}

impl<'a, T: Scalar> Weights<'a, T> {
    #[inline(always)]
    fn get(&self, name: &str) -> &'a Array2<T> {
        self.model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    #[inline(always)]
    fn layer(&self, l: usize, rest: &str) -> &'a Array2<T> {
        self.get(&format!("layer.{l}.{rest}"))
    }

    #[inline(always)]
    fn row(&self, name: &str) -> &'a [T] {
        self.get(name).as_slice().expect("standard layout")
    }
}

/// Positive and negative logits for one unpadded context.
pub(crate) fn forward<T: Scalar>(model: &EncoderClassifier<T>, ids: &[u32], feats: Option<&[T]>) -> [T; 2] {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the features the function is compiled for were detected.
            return unsafe { forward_avx512(model, ids, feats) };
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the features the function is compiled for were detected.
            return unsafe { forward_avx2(model, ids, feats) };
        }
    }
    forward_impl(model, ids, feats)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_avx2<T: Scalar>(model: &EncoderClassifier<T>, ids: &[u32], feats: Option<&[T]>) -> [T; 2] {
    forward_impl(model, ids, feats)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn forward_avx512<T: Scalar>(model: &EncoderClassifier<T>, ids: &[u32], feats: Option<&[T]>) -> [T; 2] {
    forward_impl(model, ids, feats)
}

#[inline(always)]
fn forward_impl<T: Scalar>(model: &EncoderClassifier<T>, ids: &[u32], feats: Option<&[T]>) -> [T; 2] {
    let cfg = &model.config;
    let w = Weights { model };
    let c = cfg.hidden;
    let word = w.get("embeddings.word");
    let pos = w.get("embeddings.position");
    let mut x = pool::zeros::<T>(ids.len(), c);
    for (i, &id) in ids.iter().enumerate() {
        let dst = x.row_mut(i).into_slice().expect("standard layout");
        let (e, p) = (word.row(id as usize), pos.row(i));
        for ((d, &e), &p) in dst.iter_mut().zip(e).zip(p) {
            *d = e + p;
        }
    }
    layer_norm(&mut x, Some((w.row("embeddings.ln.gamma"), w.row("embeddings.ln.beta"))));
    let mut scratch = Vec::new();
    for l in 0..cfg.layers {
        let fkv = match feats {
            Some(fv) if cfg.attn_extended() && cfg.attn_layers.contains(&l) => Some(feature_kv(&w, cfg, l, fv)),
            _ => None,
        };
        let last = l + 1 == cfg.layers;
        x = layer(&w, cfg, l, x, fkv.as_ref(), last, &mut scratch);
    }
    let out = head(&w, cfg, x.row(0).as_slice().expect("standard layout"), feats);
    pool::give(x);
    out
}

#[inline(always)]
fn feature_kv<T: Scalar>(w: &Weights<'_, T>, cfg: &ModelConfig, l: usize, fv: &[T]) -> (Array2<T>, Array2<T>) {
    let (slope, intercept) = if cfg.share_feature_embeddings {
        (w.get("feature.slope"), w.get("feature.intercept"))
    } else {
        (w.layer(l, "feature.slope"), w.layer(l, "feature.intercept"))
    };
    let mut e = slope.clone();
    for ((mut row, b), &v) in e.rows_mut().into_iter().zip(intercept.rows()).zip(fv) {
        row.zip_mut_with(&b, |r, &b| *r = *r * v + b);
    }
    layer_norm(&mut e, None);
    let k = linear(e.view(), w.layer(l, "feature.k.weight"), w.layer(l, "feature.k.bias"));
    let v = linear(e.view(), w.layer(l, "feature.v.weight"), w.layer(l, "feature.v.bias"));
    (k, v)
}

#[inline(always)]
fn layer<T: Scalar>(
    w: &Weights<'_, T>,
    cfg: &ModelConfig,
    l: usize,
    x: Array2<T>,
    fkv: Option<&(Array2<T>, Array2<T>)>,
    cls_only: bool,
    scratch: &mut Vec<T>,
) -> Array2<T> {
    let n = x.nrows();
    let nq = if cls_only { 1 } else { n };
    let xq = x.slice(s![..nq, ..]);
    // One product for all projections that share an input. Built row-major
    // (`concatenate` along columns is column-major, which the fast path skips).
    let fused = |names: &[&str]| {
        let c = cfg.hidden;
        let mut wf = Array2::<T>::zeros((c, c * names.len()));
        let mut bf = Array2::<T>::zeros((1, c * names.len()));
        for (i, m) in names.iter().enumerate() {
            wf.slice_mut(s![.., i * c..(i + 1) * c]).assign(w.layer(l, &format!("attn.{m}.weight")));
            bf.slice_mut(s![.., i * c..(i + 1) * c]).assign(w.layer(l, &format!("attn.{m}.bias")));
        }
        (wf, bf)
    };
    let c = cfg.hidden;
    // `kv` holds keys and values from column `off` on
    let (q, kv, off) = if cls_only {
        let q = linear(xq, w.layer(l, "attn.q.weight"), w.layer(l, "attn.q.bias"));
        let (wkv, bkv) = fused(&["k", "v"]);
        (q, linear(x.view(), &wkv, &bkv), 0)
    } else {
        let (wqkv, bqkv) = fused(&["q", "k", "v"]);
        let qkv = linear(x.view(), &wqkv, &bqkv);
        let mut q = pool::zeros(n, c);
        q.assign(&qkv.slice(s![.., ..c]));
        (q, qkv, c)
    };
    let (k, v) = (kv.slice(s![.., off..off + c]), kv.slice(s![.., off + c..off + 2 * c]));
    let ctx = attention(cfg, q, k, v, fkv);
    pool::give(kv);
    let mut x1 = linear(ctx.view(), w.layer(l, "attn.out.weight"), w.layer(l, "attn.out.bias"));
    pool::give(ctx);
    x1.zip_mut_with(&xq, |a, &r| *a = r + *a);
    pool::give(x);
    layer_norm(&mut x1, Some((w.row(&format!("layer.{l}.attn.ln.gamma")), w.row(&format!("layer.{l}.attn.ln.beta")))));
    let mut f = linear(x1.view(), w.layer(l, "ffn.in.weight"), w.layer(l, "ffn.in.bias"));
    gelu(&mut f, scratch);
    let mut x2 = linear(f.view(), w.layer(l, "ffn.out.weight"), w.layer(l, "ffn.out.bias"));
    pool::give(f);
    x2.zip_mut_with(&x1, |a, &r| *a = r + *a);
    pool::give(x1);
    layer_norm(&mut x2, Some((w.row(&format!("layer.{l}.ffn.ln.gamma")), w.row(&format!("layer.{l}.ffn.ln.beta")))));
    x2
}

#[inline(always)]
fn attention<T: Scalar>(
    cfg: &ModelConfig,
    mut q: Array2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    fkv: Option<&(Array2<T>, Array2<T>)>,
) -> Array2<T> {
    let (nq, n, c) = (q.nrows(), k.nrows(), cfg.hidden);
    let dh = cfg.head_dim();
    let n_f = fkv.map_or(0, |(kf, _)| kf.nrows());
    q *= T::of(1.0 / (dh as f64).sqrt());
    #[cfg(target_arch = "x86_64")]
    {
        if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && dh % 16 == 0 && super::simd::available() {
            if let Some(out) = attention_avx512(cfg, &q, k, v, fkv) {
                pool::give(q);
                return out;
            }
        }
    }
    let mut out = Array2::<T>::zeros((nq, c));
    // Token scores in the first `n` columns, feature scores after them.
    let mut scores = Array2::<T>::zeros((nq, n + n_f));
    for head in 0..cfg.heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let qh = q.slice(cols);
        general_mat_mul(T::one(), &qh, &k.slice(cols).t(), T::zero(), &mut scores.slice_mut(s![.., ..n]));
        if let Some((kf, _)) = fkv {
            general_mat_mul(T::one(), &qh, &kf.slice(cols).t(), T::zero(), &mut scores.slice_mut(s![.., n..]));
        }
        for mut row in scores.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            match cfg.feature_mixing {
                FeatureMixing::Additive => {
                    let (tok, feat) = row.split_at_mut(n);
                    softmax_in_place(tok);
                    if n_f > 0 {
                        softmax_in_place(feat);
                    }
                }
                FeatureMixing::Joint => softmax_in_place(row),
            }
        }
        let mut oh = out.slice_mut(cols);
        general_mat_mul(T::one(), &scores.slice(s![.., ..n]), &v.slice(cols), T::zero(), &mut oh);
        if let Some((_, vf)) = fkv {
            general_mat_mul(T::one(), &scores.slice(s![.., n..]), &vf.slice(cols), T::one(), &mut oh);
        }
    }
    out
}

/// Borrows an f32 matrix with unit column stride as a flat slice plus
/// its row stride.
#[cfg(target_arch = "x86_64")]
fn f32_rows<'a, T: Scalar>(a: &ArrayView2<'a, T>) -> Option<(&'a [f32], usize)> {
    if std::any::TypeId::of::<T>() != std::any::TypeId::of::<f32>() || (a.ncols() > 1 && a.strides()[1] != 1) {
        return None;
    }
    if a.is_empty() {
        return Some((&[], a.ncols()));
    }
    // A single row may report any stride.
    let stride = if a.nrows() == 1 { a.ncols() } else { a.strides()[0] as usize };
    let len = (a.nrows() - 1) * stride + a.ncols();
    // SAFETY: T is f32, and a view with unit column stride covers `len`
    // elements from its first one for as long as it lives.
    Some((unsafe { std::slice::from_raw_parts(a.as_ptr() as *const f32, len) }, stride))
}

/// `src` from value `off` on; empty stays empty.
#[cfg(target_arch = "x86_64")]
fn at((src, _): (&[f32], usize), off: usize) -> &[f32] {
    if src.is_empty() {
        src
    } else {
        &src[off..]
    }
}

/// Runs the AVX-512 kernel on each head in place in the projections.
/// `None` unless `T` is `f32`.
#[cfg(target_arch = "x86_64")]
fn attention_avx512<T: Scalar>(
    cfg: &ModelConfig,
    q: &Array2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    fkv: Option<&(Array2<T>, Array2<T>)>,
) -> Option<Array2<T>> {
    use super::simd;
    let (nq, n, dh) = (q.nrows(), k.nrows(), cfg.head_dim());
    let n_f = fkv.map_or(0, |(kf, _)| kf.nrows());
    let (qa, ka, va) = (f32_rows(&q.view())?, f32_rows(&k)?, f32_rows(&v)?);
    let (kfa, vfa) = match fkv {
        Some((kf, vf)) => (f32_rows(&kf.view())?, f32_rows(&vf.view())?),
        None => ((&[][..], 0), (&[][..], 0)),
    };
    let mut out = pool::zeros::<T>(nq, cfg.hidden);
    let dst = out.as_slice_mut().expect("standard layout");
    // SAFETY: T is f32, checked by `f32_rows` above.
    let out32 = unsafe { std::slice::from_raw_parts_mut(dst.as_mut_ptr() as *mut f32, dst.len()) };
    let mut scratch = simd::Scratch::default();
    for head in 0..cfg.heads {
        let off = head * dh;
        let h = simd::Head {
            q: at(qa, off),
            ld_q: qa.1,
            nq,
            k: at(ka, off),
            v: at(va, off),
            ld_kv: ka.1,
            n,
            kf: at(kfa, off),
            vf: at(vfa, off),
            ld_f: kfa.1.max(dh),
            n_f,
            dh,
            joint: cfg.feature_mixing == FeatureMixing::Joint,
        };
        simd::attend(&h, &mut out32[off..], cfg.hidden, &mut scratch);
    }
    Some(out)
}

#[inline(always)]
fn head<T: Scalar>(w: &Weights<'_, T>, cfg: &ModelConfig, pooled: &[T], feats: Option<&[T]>) -> [T; 2] {
    let variant = if cfg.head_extended() { cfg.head_variant } else { None };
    let fv = variant.and(feats);
    let pooled = ArrayView2::from_shape((1, pooled.len()), pooled).expect("row");
    let mut d = linear(pooled, w.get("head.dense.weight"), w.get("head.dense.bias"));
    if let (Some(v), Some(f)) = (variant, fv) {
        if v.widens_dense() {
            let fr = ArrayView2::from_shape((1, f.len()), f).expect("row");
            let extra = fr.dot(w.get("head.dense.feature_weight"));
            d += &extra;
        }
    }
    d.mapv_inplace(T::tanh);
    let mut out = linear(d.view(), w.get("head.out.weight"), w.get("head.out.bias"));
    if let (Some(v), Some(f)) = (variant, fv) {
        if v.widens_proj() {
            let fr = ArrayView2::from_shape((1, f.len()), f).expect("row");
            let extra = fr.dot(w.get("head.out.feature_weight"));
            out += &extra;
        }
    }
    [out[[0, 0]], out[[0, 1]]]
}
