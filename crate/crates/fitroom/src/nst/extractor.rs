//! A small pluggable convolutional feature extractor with exact
//! reverse-mode gradients, plus its binary weight-file format.
//!
//! Convolution uses the cross-correlation convention (no kernel flip).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NSTW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        /// Weights with shape `(out_ch, in_ch, kh, kw)`.
        weights: Array4<f64>,
        bias: Array1<f64>,
        stride: usize,
        pad: usize,
    },
    Relu,
    AvgPool { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Layer>,
}

/// Activations of one layer, kept in `(C, H, W)` form. The flattened
/// `C×M` view used by the Gram matrix is row-major over `(H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer_index: usize,
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial_size(&self) -> usize {
        let (_, h, w) = self.values.dim();
        h * w
    }
}

fn conv_forward(
    input: &Array3<f64>,
    weights: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Result<Array3<f64>> {
    let (in_c, in_h, in_w) = input.dim();
    let (out_c, w_in_c, kh, kw) = weights.dim();
    if in_c != w_in_c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {w_in_c} input channels, got {in_c}"
        )));
    }
    let ph = in_h + 2 * pad;
    let pw = in_w + 2 * pad;
    if ph < kh || pw < kw {
        return Err(Error::domain("conv input smaller than kernel"));
    }
    let out_h = (ph - kh) / stride + 1;
    let out_w = (pw - kw) / stride + 1;
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain("conv output collapsed below 1x1"));
    }
    let mut out = Array3::zeros((out_c, out_h, out_w));
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            acc += input[(ic, iy as usize, ix as usize)]
                                * weights[(oc, ic, ky, kx)];
                        }
                    }
                }
                out[(oc, oy, ox)] = acc;
            }
        }
    }
    Ok(out)
}

fn conv_backward(
    input_dim: (usize, usize, usize),
    weights: &Array4<f64>,
    stride: usize,
    pad: usize,
    grad_out: &Array3<f64>,
) -> Array3<f64> {
    let (in_c, in_h, in_w) = input_dim;
    let (out_c, _, kh, kw) = weights.dim();
    let (_, out_h, out_w) = grad_out.dim();
    let mut grad_in = Array3::zeros((in_c, in_h, in_w));
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = grad_out[(oc, oy, ox)];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..in_c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            grad_in[(ic, iy as usize, ix as usize)] +=
                                g * weights[(oc, ic, ky, kx)];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn avgpool_forward(input: &Array3<f64>, window: usize, stride: usize) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    if h < window || w < window {
        return Err(Error::domain("avgpool input smaller than window"));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let norm = (window * window) as f64;
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += input[(ch, oy * stride + ky, ox * stride + kx)];
                    }
                }
                out[(ch, oy, ox)] = acc / norm;
            }
        }
    }
    Ok(out)
}

fn avgpool_backward(
    input_dim: (usize, usize, usize),
    window: usize,
    stride: usize,
    grad_out: &Array3<f64>,
) -> Array3<f64> {
    let (c, out_h, out_w) = grad_out.dim();
    let mut grad_in = Array3::zeros(input_dim);
    let norm = (window * window) as f64;
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = grad_out[(ch, oy, ox)] / norm;
                for ky in 0..window {
                    for kx in 0..window {
                        grad_in[(ch, oy * stride + ky, ox * stride + kx)] += g;
                    }
                }
            }
        }
    }
    grad_in
}

impl FeatureExtractor {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("extractor needs at least one layer"));
        }
        Ok(FeatureExtractor { layers })
    }

    /// The fixture extractor: 3→8→16→16-channel 3×3 convs (stride 1,
    /// pad 1), each followed by relu, with a 2×2 avgpool after the second
    /// block. Weights come from a seeded generator, scaled by 1/√fan_in.
    pub fn reference(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |out_c: usize, in_c: usize| {
            let scale = 1.0 / ((in_c * 9) as f64).sqrt();
            let weights =
                Array4::from_shape_fn((out_c, in_c, 3, 3), |_| rng.gen_range(-1.0..1.0) * scale);
            let bias = Array1::from_shape_fn(out_c, |_| rng.gen_range(-0.1..0.1));
            Layer::Conv { weights, bias, stride: 1, pad: 1 }
        };
        FeatureExtractor {
            layers: vec![
                conv(8, 3),
                Layer::Relu,
                conv(16, 8),
                Layer::Relu,
                Layer::AvgPool { window: 2, stride: 2 },
                conv(16, 16),
                Layer::Relu,
            ],
        }
    }

    /// Indices of the conv layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Forward pass retaining every intermediate activation. Entry 0 is
    /// the input; entry `i + 1` is the output of layer `i`.
    pub fn forward_full(&self, input: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let prev = acts.last().unwrap();
            let next = match layer {
                Layer::Conv { weights, bias, stride, pad } => {
                    conv_forward(prev, weights, bias, *stride, *pad)?
                }
                Layer::Relu => prev.mapv(|v| v.max(0.0)),
                Layer::AvgPool { window, stride } => avgpool_forward(prev, *window, *stride)?,
            };
            acts.push(next);
        }
        Ok(acts)
    }

    /// Forward pass returning one [`FeatureMap`] per layer.
    pub fn forward(&self, input: &Array3<f64>) -> Result<Vec<FeatureMap>> {
        let acts = self.forward_full(input)?;
        Ok(acts
            .into_iter()
            .skip(1)
            .enumerate()
            .map(|(layer_index, values)| FeatureMap { layer_index, values })
            .collect())
    }

    /// Reverse-mode pass: given per-layer output gradients (indexed like
    /// [`FeatureExtractor::forward`]'s result, `None` where unused),
    /// accumulate the gradient with respect to the input.
    pub fn backward(
        &self,
        activations: &[Array3<f64>],
        mut layer_grads: Vec<Option<Array3<f64>>>,
    ) -> Result<Array3<f64>> {
        if activations.len() != self.layers.len() + 1 || layer_grads.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("backward pass length mismatch".into()));
        }
        let mut grad: Array3<f64> = Array3::zeros(activations[self.layers.len()].raw_dim());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(seed) = layer_grads[i].take() {
                if seed.raw_dim() != grad.raw_dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient seed at layer {i} has wrong shape"
                    )));
                }
                grad += &seed;
            }
            let input = &activations[i];
            grad = match layer {
                Layer::Conv { weights, stride, pad, .. } => {
                    conv_backward(input.dim(), weights, *stride, *pad, &grad)
                }
                Layer::Relu => {
                    let mut g = grad;
                    g.zip_mut_with(input, |gv, iv| {
                        if *iv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    g
                }
                Layer::AvgPool { window, stride } => {
                    avgpool_backward(input.dim(), *window, *stride, &grad)
                }
            };
        }
        Ok(grad)
    }
}

// ---- weight file io --------------------------------------------------
//
// Little-endian layout: magic "NSTW", version u32, layer count u32, then
// per layer a type tag u32 (0 conv, 1 relu, 2 avgpool) and its payload:
//   conv:    out_ch, in_ch, kh, kw, stride, pad (u32 each), then
//            out*in*kh*kw weight f64s, then out bias f64s
//   relu:    no payload
//   avgpool: window, stride (u32 each)
// A CRC32 of everything before it closes the file.

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::WeightFile("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_extractor(ex: &FeatureExtractor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(ex.layers.len() as u32);
    for layer in &ex.layers {
        match layer {
            Layer::Conv { weights, bias, stride, pad } => {
                let (oc, ic, kh, kw) = weights.dim();
                w.u32(0);
                for v in [oc, ic, kh, kw, *stride, *pad] {
                    w.u32(v as u32);
                }
                for v in weights.iter() {
                    w.f64(*v);
                }
                for v in bias.iter() {
                    w.f64(*v);
                }
            }
            Layer::Relu => w.u32(1),
            Layer::AvgPool { window, stride } => {
                w.u32(2);
                w.u32(*window as u32);
                w.u32(*stride as u32);
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&w.buf).map_err(|e| Error::io(path, e))
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::WeightFile("truncated file".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::WeightFile("checksum mismatch".into()));
    }
    let mut r = ByteReader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::WeightFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut chain_channels: Option<usize> = None;
    for i in 0..count {
        let tag = r.u32()?;
        let layer = match tag {
            0 => {
                let oc = r.u32()? as usize;
                let ic = r.u32()? as usize;
                let kh = r.u32()? as usize;
                let kw = r.u32()? as usize;
                let stride = r.u32()? as usize;
                let pad = r.u32()? as usize;
                if oc == 0 || ic == 0 || kh == 0 || kw == 0 || stride == 0 {
                    return Err(Error::WeightFile(format!("layer {i}: bad conv dims")));
                }
                if let Some(prev) = chain_channels {
                    if prev != ic {
                        return Err(Error::WeightFile(format!(
                            "layer {i}: expects {ic} input channels but chain provides {prev}"
                        )));
                    }
                }
                chain_channels = Some(oc);
                let mut weights = Array4::zeros((oc, ic, kh, kw));
                for v in weights.iter_mut() {
                    *v = r.f64()?;
                }
                let mut bias = Array1::zeros(oc);
                for v in bias.iter_mut() {
                    *v = r.f64()?;
                }
                Layer::Conv { weights, bias, stride, pad }
            }
            1 => Layer::Relu,
            2 => {
                let window = r.u32()? as usize;
                let stride = r.u32()? as usize;
                if window == 0 || stride == 0 {
                    return Err(Error::WeightFile(format!("layer {i}: bad avgpool dims")));
                }
                Layer::AvgPool { window, stride }
            }
            other => return Err(Error::WeightFile(format!("layer {i}: unknown tag {other}"))),
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::WeightFile("trailing bytes after last layer".into()));
    }
    FeatureExtractor::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_conv_passes_input_through() {
        // single 1x1 conv, weight 1, bias 0, one channel
        let ex = FeatureExtractor::new(vec![Layer::Conv {
            weights: Array4::from_elem((1, 1, 1, 1), 1.0),
            bias: Array1::zeros(1),
            stride: 1,
            pad: 0,
        }])
        .unwrap();
        let input = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        let maps = ex.forward(&input).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].values, input);
    }

    #[test]
    fn relu_zeroes_negative_input() {
        let ex = FeatureExtractor::new(vec![Layer::Relu]).unwrap();
        let input = Array3::from_elem((2, 3, 3), -1.5);
        let maps = ex.forward(&input).unwrap();
        assert!(maps[0].values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let weights = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, ky, kx)| {
            (ky * 3 + kx) as f64 * 0.1 - 0.4
        });
        let bias = array![0.25];
        let input = Array3::from_shape_fn((1, 5, 5), |(_, i, j)| ((i * 5 + j) % 7) as f64);
        let ex = FeatureExtractor::new(vec![Layer::Conv {
            weights: weights.clone(),
            bias: bias.clone(),
            stride: 1,
            pad: 0,
        }])
        .unwrap();
        let out = &ex.forward(&input).unwrap()[0].values;
        assert_eq!(out.dim(), (1, 3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                // direct sliding-window cross-correlation
                let mut acc = bias[0];
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc += input[(0, oy + ky, ox + kx)] * weights[(0, 0, ky, kx)];
                    }
                }
                assert!((out[(0, oy, ox)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let ex = FeatureExtractor::reference(0);
        let input = Array3::from_shape_fn((3, 16, 16), |(c, i, j)| {
            ((c * 31 + i * 7 + j) % 13) as f64 / 13.0
        });
        let a = ex.forward_full(&input).unwrap();
        let b = ex.forward_full(&input).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn shrinking_below_one_errors() {
        let ex = FeatureExtractor::new(vec![Layer::AvgPool { window: 8, stride: 8 }]).unwrap();
        let input = Array3::zeros((1, 4, 4));
        assert!(ex.forward(&input).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nstw");
        let ex = FeatureExtractor::reference(42);
        save_extractor(&ex, &path).unwrap();
        let back = load_extractor(&path).unwrap();
        assert_eq!(ex, back);
        assert_eq!(back.layers.len(), 7);
        assert_eq!(back.conv_indices(), vec![0, 2, 5]);
    }

    #[test]
    fn truncated_and_corrupted_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nstw");
        let ex = FeatureExtractor::reference(0);
        save_extractor(&ex, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let trunc = dir.path().join("t.nstw");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_extractor(&trunc).is_err());

        let mut corrupt = bytes.clone();
        corrupt[20] ^= 0xff;
        let cpath = dir.path().join("c.nstw");
        std::fs::write(&cpath, &corrupt).unwrap();
        assert!(matches!(load_extractor(&cpath), Err(Error::WeightFile(msg)) if msg.contains("checksum")));
    }

    #[test]
    fn shape_chain_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nstw");
        let bad = FeatureExtractor {
            layers: vec![
                Layer::Conv {
                    weights: Array4::zeros((4, 3, 3, 3)),
                    bias: Array1::zeros(4),
                    stride: 1,
                    pad: 1,
                },
                Layer::Conv {
                    weights: Array4::zeros((4, 7, 3, 3)), // expects 7, gets 4
                    bias: Array1::zeros(4),
                    stride: 1,
                    pad: 1,
                },
            ],
        };
        save_extractor(&bad, &path).unwrap();
        assert!(matches!(load_extractor(&path), Err(Error::WeightFile(_))));
    }

    #[test]
    fn backward_matches_finite_differences_through_stack() {
        use rand::{Rng, SeedableRng};
        let ex = FeatureExtractor::reference(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.05..0.95));
        // scalar objective: sum of squares of the last layer
        let acts = ex.forward_full(&input).unwrap();
        let last = acts.last().unwrap();
        let mut seeds: Vec<Option<Array3<f64>>> = vec![None; ex.layers.len()];
        seeds[ex.layers.len() - 1] = Some(last.mapv(|v| 2.0 * v));
        let grad = ex.backward(&acts, seeds).unwrap();

        let objective = |img: &Array3<f64>| -> f64 {
            let acts = ex.forward_full(img).unwrap();
            acts.last().unwrap().iter().map(|v| v * v).sum()
        };
        let h = 1e-5;
        let mut probe = input.clone();
        for &(c, y, x) in &[(0usize, 1usize, 1usize), (1, 4, 3), (2, 6, 7), (0, 0, 0)] {
            let orig = probe[(c, y, x)];
            probe[(c, y, x)] = orig + h;
            let up = objective(&probe);
            probe[(c, y, x)] = orig - h;
            let dn = objective(&probe);
            probe[(c, y, x)] = orig;
            let fd = (up - dn) / (2.0 * h);
            let g = grad[(c, y, x)];
            assert!(
                (fd - g).abs() / g.abs().max(1e-6) < 1e-5,
                "pixel ({c},{y},{x}): fd {fd} vs analytic {g}"
            );
        }
    }
}
