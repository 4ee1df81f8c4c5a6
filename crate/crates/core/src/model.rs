//! Small feed-forward embedding encoders and a linear classifier head.
//!
//! Weights are stored as `out × in` matrices so a layer computes
//! `H W^T + b` on a batch `H` of row vectors.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_HIDDEN_LAYERS: usize = 4;
const MAGIC: &[u8; 4] = b"CRNK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative from the pre-activation; relu'(0) = 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("encoder dimensions must be ≥ 1".into()));
        }
        if self.hidden_dims.len() > MAX_HIDDEN_LAYERS {
            return Err(Error::InvalidSpec(format!(
                "at most {MAX_HIDDEN_LAYERS} hidden layers, got {}",
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Layer sizes from input to embedding.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.embed_dim);
        w
    }

    /// Same layer shapes (seed and activation may differ).
    pub fn same_shape(&self, other: &EncoderSpec) -> bool {
        self.widths() == other.widths()
    }
}

/// Affine layer, or the gradient of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    layers: Vec<Layer>,
}

/// Gradients of every encoder layer, same shapes as [`Encoder::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub layers: Vec<Layer>,
}

pub fn init_encoder(spec: &EncoderSpec) -> Result<Encoder> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let widths = spec.widths();
    let layers = widths
        .windows(2)
        .map(|w| Layer {
            weight: glorot(&mut rng, w[1], w[0]),
            bias: Array1::zeros(w[1]),
        })
        .collect();
    Ok(Encoder {
        spec: spec.clone(),
        layers,
    })
}

impl Encoder {
    /// Builds an encoder from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: EncoderSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "spec needs {} layers, got {}",
                widths.len() - 1,
                layers.len()
            )));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.dim() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(Error::ShapeMismatch {
                    expected: (w[1], w[0]),
                    got: l.weight.dim(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("non-finite weight".into()));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                expected: (x.nrows(), self.spec.input_dim),
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// Returns the pre-activations of every hidden layer and the output.
    fn forward_cached(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let act = self.spec.activation;
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = h.dot(&layer.weight.t()) + &layer.bias;
            h = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        let last = self.layers.last().expect("at least one layer");
        let out = h.dot(&last.weight.t()) + &last.bias;
        (pre, out)
    }

    /// Maps an `N × input_dim` batch to `N × embed_dim` embeddings.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).1)
    }

    /// Reverse-mode gradients of `Σ upstream ⊙ encode(x)`.
    pub fn encode_backward(
        &self,
        x: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> Result<(EncoderGrad, Array2<f64>)> {
        self.check_input(x)?;
        if upstream.dim() != (x.nrows(), self.spec.embed_dim) {
            return Err(Error::ShapeMismatch {
                expected: (x.nrows(), self.spec.embed_dim),
                got: upstream.dim(),
            });
        }
        let act = self.spec.activation;
        let (pre, _) = self.forward_cached(x);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 {
                x.clone()
            } else {
                pre[l - 1].mapv(|v| act.apply(v))
            };
            grads.push(Layer {
                weight: g.t().dot(&input),
                bias: g.sum_axis(Axis(0)),
            });
            let gh = g.dot(&self.layers[l].weight);
            g = if l == 0 {
                gh
            } else {
                gh * &pre[l - 1].mapv(|v| act.derivative(v))
            };
        }
        grads.reverse();
        Ok((EncoderGrad { layers: grads }, g))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl EncoderGrad {
    pub fn zeros_like(e: &Encoder) -> Self {
        Self {
            layers: e.layers.iter().map(Layer::zeros_like).collect(),
        }
    }
}

/// Linear classifier over embeddings, producing per-class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `C × embed_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn init(num_classes: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_parts(
            glorot(&mut rng, num_classes, embed_dim),
            Array1::zeros(num_classes),
        )
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "classifier needs ≥ 2 classes, got {}",
                weight.nrows()
            )));
        }
        if bias.len() != weight.nrows() || weight.ncols() == 0 {
            return Err(Error::ShapeMismatch {
                expected: (weight.nrows(), weight.ncols()),
                got: (bias.len(), weight.ncols()),
            });
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite classifier weight".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: (features.nrows(), self.input_dim()),
                got: features.dim(),
            });
        }
        Ok(features.dot(&self.weight.t()) + &self.bias)
    }

    /// Gradient with respect to the input features given logit gradients.
    pub fn backward_input(&self, grad_logits: &Array2<f64>) -> Array2<f64> {
        grad_logits.dot(&self.weight)
    }

    /// Gradient with respect to weight and bias given inputs and logit gradients.
    pub fn backward_params(&self, features: &Array2<f64>, grad_logits: &Array2<f64>) -> Layer {
        Layer {
            weight: grad_logits.t().dot(features),
            bias: grad_logits.sum_axis(Axis(0)),
        }
    }
}

// ---------------------------------------------------------------------------
// Binary model files
//
// magic "CRNK" | u32 version | u32 input_dim | u32 n_hidden | u32 × n_hidden
// | u32 embed_dim | u8 activation | u64 seed | f64 weight, bias per layer
// | u8 has_head [| u32 classes | f64 weight | f64 bias]
// All little-endian, matrices row-major.
// ---------------------------------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn model_to_bytes(encoder: &Encoder, head: Option<&ClassifierHead>) -> Result<Vec<u8>> {
    let spec = &encoder.spec;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, spec.input_dim)?;
    put_u32(&mut buf, spec.hidden_dims.len())?;
    for &h in &spec.hidden_dims {
        put_u32(&mut buf, h)?;
    }
    put_u32(&mut buf, spec.embed_dim)?;
    buf.push(spec.activation.tag());
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    for layer in &encoder.layers {
        put_f64s(&mut buf, layer.weight.iter());
        put_f64s(&mut buf, layer.bias.iter());
    }
    match head {
        None => buf.push(0),
        Some(h) => {
            buf.push(1);
            put_u32(&mut buf, h.num_classes())?;
            put_f64s(&mut buf, h.weight.iter());
            put_f64s(&mut buf, h.bias.iter());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.f64s(rows * cols)?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(Encoder, Option<ClassifierHead>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let input_dim = r.u32()?;
    let n_hidden = r.u32()?;
    if n_hidden > MAX_HIDDEN_LAYERS {
        return Err(Error::Format(format!("{n_hidden} hidden layers")));
    }
    let hidden_dims = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let embed_dim = r.u32()?;
    let activation = Activation::from_tag(r.u8()?)?;
    let seed = r.u64()?;
    let spec = EncoderSpec {
        input_dim,
        hidden_dims,
        embed_dim,
        activation,
        seed,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let layers = spec
        .widths()
        .windows(2)
        .map(|w| {
            Ok(Layer {
                weight: r.matrix(w[1], w[0])?,
                bias: Array1::from(r.f64s(w[1])?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let encoder = Encoder::from_layers(spec, layers).map_err(|e| Error::Format(e.to_string()))?;
    let head = match r.u8()? {
        0 => None,
        1 => {
            let c = r.u32()?;
            let weight = r.matrix(c, embed_dim)?;
            let bias = Array1::from(r.f64s(c)?);
            Some(
                ClassifierHead::from_parts(weight, bias)
                    .map_err(|e| Error::Format(e.to_string()))?,
            )
        }
        t => return Err(Error::Format(format!("bad head flag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((encoder, head))
}

pub fn save_model(path: &Path, encoder: &Encoder, head: Option<&ClassifierHead>) -> Result<()> {
    fs::write(path, model_to_bytes(encoder, head)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Encoder, Option<ClassifierHead>)> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(hidden: &[usize], act: Activation, seed: u64) -> EncoderSpec {
        EncoderSpec {
            input_dim: 5,
            hidden_dims: hidden.to_vec(),
            embed_dim: 3,
            activation: act,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let s = spec(&[7, 4], Activation::Relu, 11);
        let a = init_encoder(&s).unwrap();
        let b = init_encoder(&s).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(
            a,
            init_encoder(&spec(&[7, 4], Activation::Relu, 12)).unwrap()
        );
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let s = EncoderSpec {
            input_dim: 40,
            hidden_dims: vec![30],
            embed_dim: 10,
            activation: Activation::Tanh,
            seed: 5,
        };
        let e = init_encoder(&s).unwrap();
        let mut checked = 0;
        for l in e.layers() {
            let (fan_out, fan_in) = l.weight.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for &w in l.weight.iter() {
                assert!(w.abs() <= bound);
                checked += 1;
            }
        }
        assert!(checked >= 1000);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(init_encoder(&spec(&[1, 1, 1, 1, 1], Activation::Relu, 0)).is_err());
        assert!(init_encoder(&spec(&[0], Activation::Relu, 0)).is_err());
    }

    #[test]
    fn identity_and_zero_maps() {
        let s = EncoderSpec {
            input_dim: 3,
            hidden_dims: vec![],
            embed_dim: 3,
            activation: Activation::Relu,
            seed: 0,
        };
        let e = Encoder::from_layers(
            s,
            vec![Layer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        )
        .unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 0.25, -1.0]];
        assert_eq!(e.encode(&x).unwrap(), x);

        let r = init_encoder(&spec(&[6], Activation::Relu, 3)).unwrap();
        assert!(r
            .encode(&Array2::zeros((2, 5)))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            r.encode(&Array2::zeros((2, 4))),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_matches_layer_by_layer_oracle() {
        let e = init_encoder(&spec(&[6, 4], Activation::Tanh, 9)).unwrap();
        let x = array![[0.3, -1.0, 2.0, 0.5, 0.0]];
        let mut h: Vec<f64> = x.row(0).to_vec();
        for (li, l) in e.layers().iter().enumerate() {
            let mut next = vec![0.0; l.weight.nrows()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, hv) in h.iter().enumerate() {
                    s += l.weight[[o, i]] * hv;
                }
                *slot = if li + 1 < e.layers().len() {
                    s.tanh()
                } else {
                    s
                };
            }
            h = next;
        }
        let out = e.encode(&x).unwrap();
        for (a, b) in out.row(0).iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_base_cases() {
        let e = init_encoder(&spec(&[4], Activation::Relu, 1)).unwrap();
        let x = array![[1.0, 2.0, 3.0, 4.0, 5.0]];
        let (g, gx) = e.encode_backward(&x, &Array2::zeros((1, 3))).unwrap();
        assert!(g
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0)));
        assert!(gx.iter().all(|&v| v == 0.0));

        // scalar linear model y = w x + b
        let s = EncoderSpec {
            input_dim: 1,
            hidden_dims: vec![],
            embed_dim: 1,
            activation: Activation::Relu,
            seed: 0,
        };
        let lin = Encoder::from_layers(
            s,
            vec![Layer {
                weight: array![[1.5]],
                bias: array![0.2],
            }],
        )
        .unwrap();
        let (g, gx) = lin.encode_backward(&array![[2.0]], &array![[0.7]]).unwrap();
        assert!((g.layers[0].weight[[0, 0]] - 2.0 * 0.7).abs() < 1e-15);
        assert!((g.layers[0].bias[0] - 0.7).abs() < 1e-15);
        assert!((gx[[0, 0]] - 1.5 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let e = init_encoder(&spec(&[6, 4], Activation::Tanh, 21)).unwrap();
        let head = ClassifierHead::init(4, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &e, Some(&head)).unwrap();
        let (e2, h2) = load_model(&path).unwrap();
        assert_eq!(e, e2);
        assert_eq!(Some(head), h2);

        let bytes = model_to_bytes(&e, None).unwrap();
        assert_eq!(&bytes[..4], b"CRNK");
        assert_eq!(model_from_bytes(&bytes).unwrap(), (e.clone(), None));
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(model_from_bytes(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn classifier_needs_two_classes() {
        assert!(ClassifierHead::init(1, 3, 0).is_err());
        let h = ClassifierHead::init(3, 2, 0).unwrap();
        assert_eq!(
            h.logits(&array![[0.0, 0.0]]).unwrap(),
            Array2::<f64>::zeros((1, 3))
        );
    }
}
