//! Layers with explicit forward and backward passes over a flat `f64`
//! parameter vector.
//!
//! Every layer only stores offsets into the parameter vector. `forward`
//! returns the activation plus whatever the backward pass needs; `backward`
//! accumulates into the matching slice of a gradient vector and returns the
//! gradient with respect to its input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// A named, shaped slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Default)]
pub(crate) struct ParamBuilder {
    pub blocks: Vec<ParamBlock>,
    pub len: usize,
}

impl ParamBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let offset = self.len;
        let block = ParamBlock {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            init,
        };
        self.len += block.len();
        self.blocks.push(block);
        offset
    }
}

pub(crate) fn init_values(blocks: &[ParamBlock], total: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut values = vec![0.0; total];
    for b in blocks {
        let dst = &mut values[b.range()];
        match b.init {
            Init::Zeros => dst.fill(0.0),
            Init::Ones => dst.fill(1.0),
            Init::Uniform(bound) => dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound)),
        }
    }
    values
}

fn view(p: &[f64], off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("parameter block shape")
}

fn view_mut(g: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut g[off..off + r * c]).expect("parameter block shape")
}

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let t = (K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine map applied to each row: `y = x W^T + b`, `W` stored `out x in`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = pb.add(format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(bound));
        let b = bias.then(|| pb.add(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self { in_dim, out_dim, w, b }
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let w = view(p, self.w, self.out_dim, self.in_dim);
        let mut y = x.dot(&w.t());
        if let Some(b) = self.b {
            let bias = ndarray::ArrayView1::from(&p[b..b + self.out_dim]);
            y += &bias;
        }
        y
    }

    pub fn backward(&self, p: &[f64], x: &Array2<f64>, gy: &Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        {
            let mut gw = view_mut(g, self.w, self.out_dim, self.in_dim);
            general_mat_mul(1.0, &gy.t(), x, 1.0, &mut gw);
        }
        if let Some(b) = self.b {
            for (gb, s) in g[b..b + self.out_dim].iter_mut().zip(gy.sum_axis(Axis(0))) {
                *gb += s;
            }
        }
        gy.dot(&view(p, self.w, self.out_dim, self.in_dim))
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    dim: usize,
    gamma: usize,
    beta: usize,
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: pb.add(format!("{name}.gamma"), &[dim], Init::Ones),
            beta: pb.add(format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = self.dim as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mu) * is);
            inv_std.push(is);
        }
        let gamma = &p[self.gamma..self.gamma + self.dim];
        let beta = &p[self.beta..self.beta + self.dim];
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &LnCache, gy: &Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        let d = self.dim as f64;
        let gamma = &p[self.gamma..self.gamma + self.dim];
        let mut gx = Array2::zeros(gy.raw_dim());
        for (r, (gy_row, xh_row)) in gy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let mut gxh = vec![0.0; self.dim];
            for j in 0..self.dim {
                g[self.gamma + j] += gy_row[j] * xh_row[j];
                g[self.beta + j] += gy_row[j];
                gxh[j] = gy_row[j] * gamma[j];
            }
            let mean_g = gxh.iter().sum::<f64>() / d;
            let mean_gx = gxh.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = cache.inv_std[r];
            for j in 0..self.dim {
                gx[[r, j]] = is * (gxh[j] - mean_g - xh_row[j] * mean_gx);
            }
        }
        gx
    }
}

/// Multi-head scaled dot-product self-attention over the rows (tokens).
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    dim: usize,
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

pub(crate) struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the token width");
        Self {
            dim,
            heads,
            q: Linear::new(pb, &format!("{name}.q"), dim, dim, true),
            // a key bias shifts every score of a query equally and cancels in the softmax
            k: Linear::new(pb, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(pb, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(pb, &format!("{name}.o"), dim, dim, true),
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Array2::zeros((x.nrows(), self.dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let y = self.o.forward(p, &concat);
        (
            y,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(&self, p: &[f64], c: &AttnCache, gy: &Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        let gconcat = self.o.backward(p, &c.concat, gy, g);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = Array2::zeros(c.q.raw_dim());
        let mut gk = Array2::zeros(c.k.raw_dim());
        let mut gv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let go = gconcat.slice(cols);
            let ga = go.dot(&c.v.slice(cols).t());
            gv.slice_mut(cols).assign(&a.t().dot(&go));
            // softmax backward, row by row
            let mut gs = a * &ga;
            for (mut gs_row, a_row) in gs.rows_mut().into_iter().zip(a.rows()) {
                let dot = gs_row.sum();
                gs_row.zip_mut_with(&a_row, |x, &ai| *x -= ai * dot);
            }
            gs *= scale;
            gq.slice_mut(cols).assign(&gs.dot(&c.k.slice(cols)));
            gk.slice_mut(cols).assign(&gs.t().dot(&c.q.slice(cols)));
        }
        let mut gx = self.q.backward(p, &c.x, &gq, g);
        gx += &self.k.backward(p, &c.x, &gk, g);
        gx += &self.v.backward(p, &c.x, &gv, g);
        gx
    }
}

/// Pre-norm attention-feedforward block:
/// `h = x + MHA(LN1(x))`, `y = h + W2 gelu(W1 LN2(h))`.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    f_in: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl AttnBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, ffn_width: usize) -> Self {
        Self {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), dim),
            attn: Attention::new(pb, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), dim),
            ff1: Linear::new(pb, &format!("{name}.ff1"), dim, ffn_width, true),
            ff2: Linear::new(pb, &format!("{name}.ff2"), ffn_width, dim, true),
        }
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a_in, ln1) = self.ln1.forward(p, x);
        let (a_out, attn) = self.attn.forward(p, &a_in);
        let h = x + &a_out;
        let (f_in, ln2) = self.ln2.forward(p, &h);
        let pre = self.ff1.forward(p, &f_in);
        let act = pre.mapv(gelu);
        let y = &h + &self.ff2.forward(p, &act);
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                f_in,
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f64], c: &BlockCache, gy: &Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        let gact = self.ff2.backward(p, &c.act, gy, g);
        let mut gpre = gact;
        gpre.zip_mut_with(&c.pre, |gv, &x| *gv *= gelu_grad(x));
        let gf_in = self.ff1.backward(p, &c.f_in, &gpre, g);
        let gh = gy + &self.ln2.backward(p, &c.ln2, &gf_in, g);
        let ga_in = self.attn.backward(p, &c.attn, &gh, g);
        &gh + &self.ln1.backward(p, &c.ln1, &ga_in, g)
    }
}

/// 2D convolution over `(channels, rows, cols)` maps with zero "same" padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = cin * k * k;
        let bound = (6.0 / (fan_in + cout * k * k) as f64).sqrt();
        Self {
            cin,
            cout,
            k,
            w: pb.add(format!("{name}.weight"), &[cout, cin, k, k], Init::Uniform(bound)),
            b: pb.add(format!("{name}.bias"), &[cout], Init::Zeros),
        }
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (_, h, w) = x.dim();
        let pad = (self.k / 2) as isize;
        let mut cols = Array2::zeros((self.cin * self.k * self.k, h * w));
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad;
                            if sx >= 0 && sx < w as isize {
                                cols[[r, y * w + xx]] = x[[c, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let pad = (self.k / 2) as isize;
        let mut x = Array3::zeros((self.cin, h, w));
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad;
                            if sx >= 0 && sx < w as isize {
                                x[[c, sy as usize, sx as usize]] += cols[[r, y * w + xx]];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output maps and the im2col matrix for the backward pass.
    pub fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = self.im2col(x);
        let kk = self.cin * self.k * self.k;
        let mut y = view(p, self.w, self.cout, kk).dot(&cols);
        for (mut row, b) in y.rows_mut().into_iter().zip(&p[self.b..self.b + self.cout]) {
            row += *b;
        }
        (y.into_shape_with_order((self.cout, h, w)).expect("conv output shape"), cols)
    }

    pub fn backward(&self, p: &[f64], cols: &Array2<f64>, gy: &Array3<f64>, g: &mut [f64]) -> Array3<f64> {
        let (_, h, w) = gy.dim();
        let kk = self.cin * self.k * self.k;
        let gy2 = gy.to_shape((self.cout, h * w)).expect("conv grad shape");
        {
            let mut gw = view_mut(g, self.w, self.cout, kk);
            general_mat_mul(1.0, &gy2, &cols.t(), 1.0, &mut gw);
        }
        for (gb, s) in g[self.b..self.b + self.cout].iter_mut().zip(gy2.sum_axis(Axis(1))) {
            *gb += s;
        }
        let gcols = view(p, self.w, self.cout, kk).t().dot(&gy2);
        self.col2im(&gcols, h, w)
    }

    /// Index of weight `(o, i, ky, kx)` within the parameter vector.
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.w + ((o * self.cin + i) * self.k + ky) * self.k + kx
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d(sum(y * probe))/d(params, input)`.
    fn check<F>(n_params: usize, p: &mut [f64], f: F)
    where
        F: Fn(&[f64], &mut Vec<f64>) -> f64,
    {
        let mut g = vec![0.0; n_params];
        f(p, &mut g);
        let h = 1e-6;
        for i in 0..n_params {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(p, &mut vec![0.0; n_params]);
            p[i] = orig - h;
            let dn = f(p, &mut vec![0.0; n_params]);
            p[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    fn rand_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pb = ParamBuilder::default();
        let block = AttnBlock::new(&mut pb, "b", 4, 2, 6);
        let mut p = init_values(&pb.blocks, pb.len, &mut rng);
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let x = rand_array(&mut rng, 5, 4);
        let probe = rand_array(&mut rng, 5, 4);
        let n = pb.len;
        check(n, &mut p, |p, g| {
            let (y, cache) = block.forward(p, &x);
            block.backward(p, &cache, &probe, g);
            (&y * &probe).sum()
        });
        // input gradient
        let (_, cache) = block.forward(&p, &x);
        let gx = block.backward(&p, &cache, &probe, &mut vec![0.0; n]);
        let mut xp = x.clone();
        xp[[2, 1]] += 1e-6;
        let mut xm = x.clone();
        xm[[2, 1]] -= 1e-6;
        let fd = ((&block.forward(&p, &xp).0 * &probe).sum() - (&block.forward(&p, &xm).0 * &probe).sum()) / 2e-6;
        assert!((fd - gx[[2, 1]]).abs() < 1e-6);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pb = ParamBuilder::default();
        let conv = Conv2d::new(&mut pb, "c", 2, 3, 3);
        let mut p = init_values(&pb.blocks, pb.len, &mut rng);
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let x = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(-1.0..1.0));
        let probe = Array3::from_shape_fn((3, 3, 4), |_| rng.random_range(-1.0..1.0));
        let n = pb.len;
        check(n, &mut p, |p, g| {
            let (y, cols) = conv.forward(p, &x);
            conv.backward(p, &cols, &probe, g);
            (&y * &probe).sum()
        });
        let (_, cols) = conv.forward(&p, &x);
        let gx = conv.backward(&p, &cols, &probe, &mut vec![0.0; n]);
        for idx in [[0, 0, 0], [1, 2, 3], [0, 1, 2]] {
            let mut xp = x.clone();
            xp[idx] += 1e-6;
            let mut xm = x.clone();
            xm[idx] -= 1e-6;
            let fd = ((&conv.forward(&p, &xp).0 * &probe).sum() - (&conv.forward(&p, &xm).0 * &probe).sum()) / 2e-6;
            assert!((fd - gx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut pb = ParamBuilder::default();
        let conv = Conv2d::new(&mut pb, "c", 1, 1, 3);
        let mut p = vec![0.0; pb.len];
        p[conv.weight_index(0, 0, 1, 1)] = 1.0;
        let x = Array3::from_shape_fn((1, 2, 3), |(_, i, j)| (i * 3 + j) as f64);
        assert_eq!(conv.forward(&p, &x).0, x);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
