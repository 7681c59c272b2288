//! Named-parameter layer helpers: creation with an initializer, and evaluation
//! on a [`Graph`]. Every layer stores `{name}.weight` and optionally `{name}.bias`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::FeatureMap;

pub type ModelRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weight initializers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal for leaky-rectified layers.
    Kaiming,
    /// He-normal scaled down by the given factor.
    ScaledKaiming(f64),
    Zeros,
    /// Identity mapping (requires matching in/out widths and a 1x1 kernel).
    Identity,
    /// Per-channel bilinear x2 upsampling kernel, for transposed convolutions.
    Bilinear,
}

fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / (1.01 * fan_in.max(1) as f64)).sqrt()
}

fn init_weight<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Kaiming => Tensor::normal(shape, kaiming_std(fan_in), rng),
        Init::ScaledKaiming(s) => Tensor::normal(shape, kaiming_std(fan_in) * s, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => {
            assert_eq!(shape[0], shape[1], "identity init needs a square transform");
            Tensor::from_fn(shape, |i| if i[0] == i[1] { T::one() } else { T::zero() })
        }
        Init::Bilinear => {
            let k = shape[2];
            let factor = k.div_ceil(2);
            let center = if k % 2 == 1 {
                (factor - 1) as f64
            } else {
                factor as f64 - 0.5
            };
            Tensor::from_fn(shape, |i| {
                if i[0] != i[1] {
                    return T::zero();
                }
                let fy = 1.0 - (i[2] as f64 - center).abs() / factor as f64;
                let fx = 1.0 - (i[3] as f64 - center).abs() / factor as f64;
                T::lit(fy * fx)
            })
        }
    }
}

/// Registers a `k x k` convolution `[cout, cin, k, k]`. Biases start at zero.
#[allow(clippy::too_many_arguments)]
pub fn add_conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    init: Init,
    rng: &mut R,
) {
    store.insert(
        format!("{name}.weight"),
        init_weight(&[cout, cin, k, k], cin * k * k, init, rng),
    );
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

/// Registers a transposed convolution `[cin, cout, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn add_deconv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
    init: Init,
    rng: &mut R,
) {
    store.insert(
        format!("{name}.weight"),
        init_weight(&[cin, cout, k, k], cin * k * k / 4, init, rng),
    );
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

pub fn add_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c, 1, 1], T::one()));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c, 1, 1]));
}

fn optional<T: Scalar>(g: &mut Graph<'_, T>, name: &str) -> Result<Option<Var>> {
    if g.store().contains(name) {
        g.param(name).map(Some)
    } else {
        Ok(None)
    }
}

fn check_input<T: Scalar>(tape: &Tape<T>, name: &str, x: Var, weight_in: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[0] != weight_in {
        return Err(Error::Shape(format!(
            "layer `{name}` expects {weight_in} input channels, got {shape:?}"
        )));
    }
    Ok(())
}

/// Zero-padded convolution using `{name}.weight` and optional `{name}.bias`.
pub fn conv<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    check_input(g, name, x, g.shape(w)[1])?;
    let b = optional(g, &format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, b, stride, pad))
}

/// 1x1 convolution.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    conv(g, name, x, 1, 0)
}

/// 4x4 stride-2 transposed convolution: exact x2 spatial upsampling.
pub fn deconv_x2<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    check_input(g, name, x, g.shape(w)[0])?;
    let b = optional(g, &format!("{name}.bias"))?;
    Ok(g.conv_transpose2d(x, w, b, 2, 1))
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"))?;
    let beta = g.param(&format!("{name}.beta"))?;
    if g.shape(gamma) != g.shape(x) {
        return Err(Error::Shape(format!(
            "layer norm `{name}` expects {:?}, got {:?}",
            g.shape(gamma),
            g.shape(x)
        )));
    }
    Ok(g.layer_norm(x, gamma, beta))
}

/// A learned linear map `[C_out, C_in]` with optional bias, applied per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTransform<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearTransform<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!("weight must be rank 2, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.len() != weight.shape()[0] {
                return Err(Error::Shape("bias length must equal output width".into()));
            }
        }
        if !weight.all_finite() || bias.as_ref().is_some_and(|b| !b.all_finite()) {
            return Err(Error::NonFinite("linear transform parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `[C_in, H, W] -> [C_out, H, W]`.
    pub fn apply(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (c, h, w) = x.dims3();
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "transform expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let mut out = Tensor::zeros(&[self.out_channels(), h, w]);
        crate::linalg::gemm(
            self.out_channels(),
            c,
            h * w,
            T::one(),
            self.weight.data(),
            false,
            x.data(),
            false,
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = &self.bias {
            for (co, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                plane.iter_mut().for_each(|v| *v += b.data()[co]);
            }
        }
        Ok(out)
    }

    /// Stores the transform as a 1x1 convolution under `name`.
    pub fn insert_into(&self, store: &mut ParamStore<T>, name: &str) {
        let (co, ci) = (self.out_channels(), self.in_channels());
        store.insert(
            format!("{name}.weight"),
            self.weight.clone().reshape(&[co, ci, 1, 1]).expect("1x1 reshape"),
        );
        if let Some(b) = &self.bias {
            store.insert(format!("{name}.bias"), b.clone());
        }
    }

    /// Reads a 1x1 convolution stored under `name`.
    pub fn from_store(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let w = store.get(&format!("{name}.weight"))?;
        let s = w.shape();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(Error::Shape(format!("`{name}` is not a 1x1 transform: {s:?}")));
        }
        let weight = w.clone().reshape(&[s[0], s[1]])?;
        let bias = store.get(&format!("{name}.bias")).ok().cloned();
        Self::new(weight, bias)
    }
}
