//! Uplink-assisted autoencoder for aligned eigenvector matrices.
//!
//! Encoder: real/imaginary planes stacked along the subband axis, attention
//! blocks over the resulting `2 N_s` tokens, a fully connected layer to `M`
//! units and a sigmoid that fixes the quantizer domain to `[0, 1]`.
//!
//! Decoder: fully connected layer back to `2 N_s N_Tx`, reshaped to two maps,
//! fused with the uplink magnitude map, five residual conv blocks, a 3-to-2
//! channel reduction, attention blocks, and a split back into real and
//! imaginary parts.

mod checkpoint;
pub(crate) mod nn;
mod train;

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifa::{apply_control, restore, ShiftControl};
use crate::types::{ComplexMatrix, SystemConfig};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use nn::{Init, ParamBlock};
pub use train::{train, train_from, Adam, Schedule, TrainReport};

use nn::{gelu, gelu_grad, init_values, sigmoid, AttnBlock, BlockCache, Conv2d, Linear, ParamBuilder};

/// Integer feedback payload: `M` levels of `B` bits each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codeword {
    levels: Vec<u32>,
    bits: u32,
}

impl Codeword {
    pub fn new(levels: Vec<u32>, bits: u32) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::InvalidConfig(format!("{bits} bits per level")));
        }
        if levels.is_empty() {
            return Err(Error::Empty);
        }
        let max = (1u32 << bits) - 1;
        if let Some((i, &l)) = levels.iter().enumerate().find(|(_, &l)| l > max) {
            return Err(Error::RangeViolation {
                index: i,
                value: l as f64,
            });
        }
        Ok(Self { levels, bits })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn m(&self) -> usize {
        self.levels.len()
    }

    pub fn b(&self) -> u32 {
        self.bits
    }

    pub fn total_bits(&self) -> usize {
        self.m() * self.bits as usize
    }

    /// Big-endian bit packing, MSB of level 0 first, zero-padded to a byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.total_bits().div_ceil(8)];
        let mut pos = 0usize;
        for &l in &self.levels {
            for k in (0..self.bits).rev() {
                if (l >> k) & 1 == 1 {
                    out[pos / 8] |= 0x80 >> (pos % 8);
                }
                pos += 1;
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], m: usize, bits: u32) -> Result<Self> {
        let need = (m * bits as usize).div_ceil(8);
        if bytes.len() != need {
            return Err(Error::CorruptRecord(format!(
                "codeword of {m}x{bits} bits needs {need} bytes, got {}",
                bytes.len()
            )));
        }
        let mut pos = 0usize;
        let levels = (0..m)
            .map(|_| {
                let mut l = 0u32;
                for _ in 0..bits {
                    l = (l << 1) | u32::from((bytes[pos / 8] >> (7 - pos % 8)) & 1);
                    pos += 1;
                }
                l
            })
            .collect();
        Codeword::new(levels, bits)
    }
}

/// Uniform scalar quantizer: `level = round(z (2^B - 1))`.
pub fn quantize(z: &[f64], bits: u32) -> Result<Codeword> {
    if bits == 0 || bits > 16 {
        return Err(Error::InvalidConfig(format!("{bits} bits per level")));
    }
    let max = ((1u32 << bits) - 1) as f64;
    let levels = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if (0.0..=1.0).contains(&v) {
                Ok((v * max).round() as u32)
            } else {
                Err(Error::RangeViolation { index: i, value: v })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Codeword::new(levels, bits)
}

pub fn dequantize(c: &Codeword) -> Vec<f64> {
    let max = ((1u32 << c.bits) - 1) as f64;
    c.levels.iter().map(|&l| l as f64 / max).collect()
}

/// Quantize-dequantize; the training surrogate passes gradients straight through.
fn quantize_roundtrip(z: &[f64], bits: u32) -> Vec<f64> {
    let max = ((1u32 << bits) - 1) as f64;
    z.iter().map(|v| (v.clamp(0.0, 1.0) * max).round() / max).collect()
}

/// Architecture description; the parameter layout is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub n_sub: usize,
    pub n_tx: usize,
    pub m: usize,
    pub k_enc: usize,
    pub k_dec: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub kernel: usize,
    pub conv_width: usize,
    pub n_res_blocks: usize,
    /// When false the uplink magnitude map is replaced by zeros.
    pub ul_assist: bool,
}

impl LayerSpec {
    pub fn for_config(cfg: &SystemConfig, ul_assist: bool) -> Self {
        let heads = [4, 2, 1]
            .into_iter()
            .find(|h| cfg.n_tx % h == 0 && cfg.n_tx / h >= 4)
            .unwrap_or(1);
        Self {
            n_sub: cfg.n_sub,
            n_tx: cfg.n_tx,
            m: cfg.m_bottleneck,
            k_enc: 2,
            k_dec: 2,
            heads,
            ffn_width: 4 * cfg.n_tx,
            kernel: 3,
            conv_width: 32,
            n_res_blocks: 5,
            ul_assist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_sub > 0
            && self.n_tx > 0
            && self.m > 0
            && self.heads > 0
            && self.n_tx % self.heads == 0
            && self.ffn_width > 0
            && self.kernel % 2 == 1
            && self.conv_width > 0
            && self.n_res_blocks > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid layer spec {self:?}")))
        }
    }

    fn map_len(&self) -> usize {
        self.n_sub * self.n_tx
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    cols1: Array2<f64>,
    pre: Array3<f64>,
    cols2: Array2<f64>,
    skip_cols: Option<Array2<f64>>,
}

impl ResBlock {
    fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, ResCache) {
        let (pre, cols1) = self.conv1.forward(p, x);
        let act = pre.mapv(gelu);
        let (mut y, cols2) = self.conv2.forward(p, &act);
        let skip_cols = match &self.skip {
            Some(conv) => {
                let (sk, cols) = conv.forward(p, x);
                y += &sk;
                Some(cols)
            }
            None => {
                y += x;
                None
            }
        };
        (
            y,
            ResCache {
                cols1,
                pre,
                cols2,
                skip_cols,
            },
        )
    }

    fn backward(&self, p: &[f64], c: &ResCache, gy: &Array3<f64>, g: &mut [f64]) -> Array3<f64> {
        let mut gact = self.conv2.backward(p, &c.cols2, gy, g);
        gact.zip_mut_with(&c.pre, |gv, &x| *gv *= gelu_grad(x));
        let mut gx = self.conv1.backward(p, &c.cols1, &gact, g);
        match (&self.skip, &c.skip_cols) {
            (Some(conv), Some(cols)) => gx += &conv.backward(p, cols, gy, g),
            _ => gx += gy,
        }
        gx
    }
}

/// Layer graph with offsets into [`ModelParams::values`].
pub(crate) struct Network {
    spec: LayerSpec,
    enc_blocks: Vec<AttnBlock>,
    enc_fc: Linear,
    dec_fc: Linear,
    res: Vec<ResBlock>,
    reduce: Conv2d,
    dec_blocks: Vec<AttnBlock>,
}

struct EncCache {
    blocks: Vec<BlockCache>,
    flat: Array2<f64>,
    z: Vec<f64>,
}

struct DecCache {
    z_in: Array2<f64>,
    res: Vec<ResCache>,
    reduce_cols: Array2<f64>,
    blocks: Vec<BlockCache>,
}

impl Network {
    fn build(spec: &LayerSpec) -> (Self, ParamBuilder) {
        let mut pb = ParamBuilder::default();
        let d = spec.n_tx;
        let enc_blocks = (0..spec.k_enc)
            .map(|i| AttnBlock::new(&mut pb, &format!("enc.block{i}"), d, spec.heads, spec.ffn_width))
            .collect();
        let enc_fc = Linear::new(&mut pb, "enc.fc", 2 * spec.map_len(), spec.m, true);
        let dec_fc = Linear::new(&mut pb, "dec.fc", spec.m, 2 * spec.map_len(), true);
        let res = (0..spec.n_res_blocks)
            .map(|i| {
                let cin = if i == 0 { 3 } else { 2 };
                ResBlock {
                    conv1: Conv2d::new(&mut pb, &format!("dec.res{i}.conv1"), cin, spec.conv_width, spec.kernel),
                    conv2: Conv2d::new(&mut pb, &format!("dec.res{i}.conv2"), spec.conv_width, 2, spec.kernel),
                    skip: (i == 0).then(|| Conv2d::new(&mut pb, &format!("dec.res{i}.skip"), 3, 2, 1)),
                }
            })
            .collect();
        let reduce = Conv2d::new(&mut pb, "dec.reduce", 3, 2, spec.kernel);
        let dec_blocks = (0..spec.k_dec)
            .map(|i| AttnBlock::new(&mut pb, &format!("dec.block{i}"), d, spec.heads, spec.ffn_width))
            .collect();
        (
            Self {
                spec: spec.clone(),
                enc_blocks,
                enc_fc,
                dec_fc,
                res,
                reduce,
                dec_blocks,
            },
            pb,
        )
    }

    fn tokens(&self, w: &ComplexMatrix) -> Array2<f64> {
        let (r, c) = (self.spec.n_sub, self.spec.n_tx);
        Array2::from_shape_fn((2 * r, c), |(i, j)| if i < r { w[(i, j)].re } else { w[(i - r, j)].im })
    }

    fn from_tokens(&self, t: &Array2<f64>) -> ComplexMatrix {
        let r = self.spec.n_sub;
        ComplexMatrix::from_fn(r, self.spec.n_tx, |i, j| Complex64::new(t[[i, j]], t[[i + r, j]]))
    }

    fn encode_fwd(&self, p: &[f64], w: &ComplexMatrix) -> (Vec<f64>, EncCache) {
        let mut x = self.tokens(w);
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            let (y, c) = b.forward(p, &x);
            blocks.push(c);
            x = y;
        }
        let flat = x.into_shape_with_order((1, 2 * self.spec.map_len())).expect("flatten");
        let pre = self.enc_fc.forward(p, &flat);
        let z: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
        (z.clone(), EncCache { blocks, flat, z })
    }

    fn encode_bwd(&self, p: &[f64], c: &EncCache, gz: &[f64], g: &mut [f64]) {
        let gpre = Array2::from_shape_fn((1, gz.len()), |(_, i)| gz[i] * c.z[i] * (1.0 - c.z[i]));
        let gflat = self.enc_fc.backward(p, &c.flat, &gpre, g);
        let mut gx = gflat
            .into_shape_with_order((2 * self.spec.n_sub, self.spec.n_tx))
            .expect("unflatten");
        for (b, bc) in self.enc_blocks.iter().zip(&c.blocks).rev() {
            gx = b.backward(p, bc, &gx, g);
        }
    }

    fn ul_map(&self, ul_mag: &Array2<f64>) -> Array2<f64> {
        if self.spec.ul_assist {
            ul_mag.clone()
        } else {
            Array2::zeros(ul_mag.raw_dim())
        }
    }

    fn with_ul(&self, maps: &Array3<f64>, ul: &Array2<f64>) -> Array3<f64> {
        let (r, c) = (self.spec.n_sub, self.spec.n_tx);
        let mut fused = Array3::zeros((3, r, c));
        fused.slice_mut(s![0..2, .., ..]).assign(maps);
        fused.slice_mut(s![2, .., ..]).assign(ul);
        fused
    }

    fn decode_fwd(&self, p: &[f64], z: &[f64], ul_mag: &Array2<f64>) -> (ComplexMatrix, DecCache) {
        let (r, c) = (self.spec.n_sub, self.spec.n_tx);
        let ul = self.ul_map(ul_mag);
        let z_in = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("codeword row");
        let maps = self
            .dec_fc
            .forward(p, &z_in)
            .into_shape_with_order((2, r, c))
            .expect("dimension recovery");
        let mut x = self.with_ul(&maps, &ul);
        let mut res = Vec::with_capacity(self.res.len());
        for b in &self.res {
            let (y, rc) = b.forward(p, &x);
            res.push(rc);
            x = y;
        }
        let (reduced, reduce_cols) = self.reduce.forward(p, &self.with_ul(&x, &ul));
        let mut t = reduced.into_shape_with_order((2 * r, c)).expect("token view");
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            let (y, bc) = b.forward(p, &t);
            blocks.push(bc);
            t = y;
        }
        (
            self.from_tokens(&t),
            DecCache {
                z_in,
                res,
                reduce_cols,
                blocks,
            },
        )
    }

    /// Returns the gradient with respect to the (dequantized) codeword.
    fn decode_bwd(&self, p: &[f64], c: &DecCache, gout: &ComplexMatrix, g: &mut [f64]) -> Vec<f64> {
        let (r, cols) = (self.spec.n_sub, self.spec.n_tx);
        let mut gt = self.tokens(gout);
        for (b, bc) in self.dec_blocks.iter().zip(&c.blocks).rev() {
            gt = b.backward(p, bc, &gt, g);
        }
        let gred = gt.into_shape_with_order((2, r, cols)).expect("maps");
        let gcat = self.reduce.backward(p, &c.reduce_cols, &gred, g);
        let mut gx = gcat.slice(s![0..2, .., ..]).to_owned();
        for (b, rc) in self.res.iter().zip(&c.res).rev() {
            gx = b.backward(p, rc, &gx, g);
        }
        let gmaps = gx
            .slice(s![0..2, .., ..])
            .to_owned()
            .into_shape_with_order((1, 2 * r * cols))
            .expect("flat");
        let gz = self.dec_fc.backward(p, &c.z_in, &gmaps, g);
        gz.index_axis(Axis(0), 0).to_vec()
    }
}

/// Flat parameter vector plus its named layout (`enc.*` blocks first, then `dec.*`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: LayerSpec,
    pub blocks: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn init(spec: &LayerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (_, pb) = Network::build(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = init_values(&pb.blocks, pb.len, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            blocks: pb.blocks,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn split(&self) -> usize {
        self.blocks
            .iter()
            .find(|b| b.name.starts_with("dec."))
            .map_or(self.values.len(), |b| b.offset)
    }

    /// Encoder parameters (UE side).
    pub fn encoder_params(&self) -> &[f64] {
        &self.values[..self.split()]
    }

    /// Decoder parameters (BS side).
    pub fn decoder_params(&self) -> &[f64] {
        &self.values[self.split()..]
    }

    /// Zeroes every weight that reads the uplink magnitude map, disconnecting
    /// the fusion branch.
    pub fn zero_ul_fusion(&mut self) {
        let (net, _) = Network::build(&self.spec);
        let mut convs = vec![&net.res[0].conv1, &net.reduce];
        if let Some(skip) = &net.res[0].skip {
            convs.push(skip);
        }
        for conv in convs {
            for o in 0..conv.cout {
                for ky in 0..conv.k {
                    for kx in 0..conv.k {
                        self.values[conv.weight_index(o, 2, ky, kx)] = 0.0;
                    }
                }
            }
        }
    }

    fn network(&self, expect_rows: usize, expect_cols: usize) -> Result<Network> {
        if (expect_rows, expect_cols) != (self.spec.n_sub, self.spec.n_tx) {
            return Err(Error::dims(
                format!("{}x{}", self.spec.n_sub, self.spec.n_tx),
                format!("{expect_rows}x{expect_cols}"),
            ));
        }
        Ok(Network::build(&self.spec).0)
    }
}

/// Encoder forward pass; outputs lie in `[0, 1]^M`.
pub fn encode(w_ifa_dl: &ComplexMatrix, params: &ModelParams) -> Result<Vec<f64>> {
    let net = params.network(w_ifa_dl.rows(), w_ifa_dl.cols())?;
    Ok(net.encode_fwd(&params.values, w_ifa_dl).0)
}

/// Decoder forward pass from a real-valued (dequantized) codeword.
pub fn decode(z: &[f64], ul_mag: &Array2<f64>, params: &ModelParams) -> Result<ComplexMatrix> {
    let (r, c) = ul_mag.dim();
    let net = params.network(r, c)?;
    if z.len() != params.spec.m {
        return Err(Error::dims(format!("codeword length {}", params.spec.m), z.len().to_string()));
    }
    if ul_mag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidConfig("uplink magnitudes must be finite and nonnegative".into()));
    }
    Ok(net.decode_fwd(&params.values, z, ul_mag).0)
}

/// Magnitude map of a complex matrix as a real `rows x cols` array.
pub fn magnitude_map(w: &ComplexMatrix) -> Array2<f64> {
    Array2::from_shape_vec(w.shape(), w.magnitudes()).expect("shape matches")
}

/// How the decoder output maps back to the frequency-domain eigenvector matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Aligned angular-delay domain; restored with the given (uplink) shifts.
    Aligned(ShiftControl),
    /// Alignment disabled: the network works on frequency-domain matrices.
    Identity,
}

impl Frame {
    pub fn restore(&self, w: &ComplexMatrix) -> ComplexMatrix {
        match self {
            Frame::Aligned(ctl) => restore(w, *ctl),
            Frame::Identity => w.clone(),
        }
    }

    /// Adjoint of [`Frame::restore`] (which is unitary).
    pub fn restore_adjoint(&self, g: &ComplexMatrix) -> ComplexMatrix {
        match self {
            Frame::Aligned(ctl) => apply_control(g, *ctl),
            Frame::Identity => g.clone(),
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Encoder input (aligned DL matrix, or the enhanced DL matrix when alignment is off).
    pub input: ComplexMatrix,
    /// Uplink side information in the same frame as `input`.
    pub ul_mag: Array2<f64>,
    /// Frequency-domain DL eigenvector matrix the reconstruction is scored against.
    pub target: ComplexMatrix,
    pub frame: Frame,
}

/// `1 - mean SGCS` over a batch of (true, reconstructed) frequency-domain matrices.
pub fn loss(batch: &[(ComplexMatrix, ComplexMatrix)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for (w, w_hat) in batch {
        total += crate::metrics::sgcs(w, w_hat)?;
    }
    Ok(1.0 - total / batch.len() as f64)
}

/// Mean row SGCS and its gradient with respect to `w_hat`, using the
/// `d/dRe + i d/dIm` convention.
pub(crate) fn sgcs_with_grad(w: &ComplexMatrix, w_hat: &ComplexMatrix) -> (f64, ComplexMatrix) {
    let rows = w.rows() as f64;
    let mut grad = ComplexMatrix::zeros(w.rows(), w.cols());
    let mut total = 0.0;
    for s in 0..w.rows() {
        let (a, b) = (w.row(s), w_hat.row(s));
        let ip: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
        let na: f64 = a.iter().map(Complex64::norm_sqr).sum();
        let nb: f64 = b.iter().map(Complex64::norm_sqr).sum();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let rho = ip.norm_sqr() / (na * nb);
        total += rho;
        let g = grad.row_mut(s);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (2.0 * ip * a[k] * nb - 2.0 * ip.norm_sqr() * b[k]) / (na * nb * nb * rows);
        }
    }
    (total / rows, grad)
}

/// Per-sample loss after restore, accumulating the parameter gradient into `grad`.
/// With `quant_bits` set the codeword is quantized and gradients pass straight
/// through the rounding.
pub(crate) fn sample_loss_grad(
    net: &Network,
    p: &[f64],
    sample: &TrainSample,
    quant_bits: Option<u32>,
    grad: &mut [f64],
) -> f64 {
    let (z, enc) = net.encode_fwd(p, &sample.input);
    let zq = match quant_bits {
        Some(b) => quantize_roundtrip(&z, b),
        None => z,
    };
    let (out, dec) = net.decode_fwd(p, &zq, &sample.ul_mag);
    let (rho, g_rho) = sgcs_with_grad(&sample.target, &sample.frame.restore(&out));
    let g_out = sample.frame.restore_adjoint(&g_rho.scale(Complex64::new(-1.0, 0.0)));
    let gz = net.decode_bwd(p, &dec, &g_out, grad);
    net.encode_bwd(p, &enc, &gz, grad);
    1.0 - rho
}

/// Forward-only reconstruction of a sample's frequency-domain matrix.
pub fn reconstruct(sample: &TrainSample, params: &ModelParams, quant_bits: Option<u32>) -> Result<ComplexMatrix> {
    let z = encode(&sample.input, params)?;
    let zq = match quant_bits {
        Some(b) => dequantize(&quantize(&z, b)?),
        None => z,
    };
    Ok(sample.frame.restore(&decode(&zq, &sample.ul_mag, params)?))
}

/// Mean SGCS of a model over samples.
pub fn evaluate(
    samples: &[TrainSample],
    params: &ModelParams,
    quant_bits: Option<u32>,
    exec: crate::Exec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let scores = exec.try_map(samples, |s| crate::metrics::sgcs(&s.target, &reconstruct(s, params, quant_bits)?))?;
    Ok(crate::metrics::mean(&scores))
}

/// Loss and full gradient of the mean per-sample loss over `samples`.
pub fn loss_and_gradient(samples: &[TrainSample], params: &ModelParams, quant_bits: Option<u32>) -> (f64, Vec<f64>) {
    let (net, _) = Network::build(&params.spec);
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for s in samples {
        total += sample_loss_grad(&net, &params.values, s, quant_bits, &mut grad);
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}
