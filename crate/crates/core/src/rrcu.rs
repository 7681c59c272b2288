//! Recurrent residual contextual upsampling of flow fields.
//!
//! The residual between a stage's prediction and the flow that was upsampled
//! into that stage drives content-aware reassembly kernels (CARAFE style):
//!
//! ```text
//! R   = enc(Y) - enc(Y~prev)                          shared 1x1 encoder
//! A_U = softmax_kappa( ps_2( W_r R ) )                [kappa^2, 2H, 2W]
//! R~  = A_U * bilinear_x2(R)                          kappa x kappa reassembly
//! Y~  = 2 deconv(Y) + W_z R~
//! ```
//!
//! Blocks are named after the stage they feed: `rrcu.stage{k}` upsamples the
//! flow of stage `k + 1` to the resolution of stage `k`.

use rand::Rng;

use crate::autodiff::{pixel_shuffle_values, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::layers::{self, Init};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::FeatureMap;

/// Upsampling factor; the only one supported.
pub const SIGMA: usize = 2;
/// Default reassembly kernel size.
pub const KERNEL: usize = 3;
/// Width of the shared residual encoder.
pub const ENCODER_WIDTH: usize = 16;

/// `[r^2 C, H, W] -> [C, rH, rW]` with `out(c, r y + dy, r x + dx) = X(c r^2 + dy r + dx, y, x)`.
pub fn pixel_shuffle<T: Scalar>(x: &FeatureMap<T>, r: usize) -> Result<FeatureMap<T>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("pixel shuffle needs [C,H,W], got {:?}", x.shape())));
    }
    if r == 0 || x.shape()[0] % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "{} channels are not divisible by r^2 = {}",
            x.shape()[0],
            r * r
        )));
    }
    Ok(pixel_shuffle_values(x, r))
}

/// Kernel logits before pixel shuffle, `[sigma^2 kappa^2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleKernelField<T> {
    pub data: Tensor<T>,
    pub sigma: usize,
    pub kernel: usize,
}

impl<T: Scalar> UpsampleKernelField<T> {
    pub fn new(data: Tensor<T>, sigma: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument("reassembly kernel size must be odd".into()));
        }
        if data.rank() != 3 || data.shape()[0] != sigma * sigma * kernel * kernel {
            return Err(Error::Shape(format!(
                "kernel field must have {} channels, got {:?}",
                sigma * sigma * kernel * kernel,
                data.shape()
            )));
        }
        Ok(Self { data, sigma, kernel })
    }

    /// Per-position normalized kernels `[kappa^2, sigma H, sigma W]`.
    pub fn normalized(&self) -> Result<FeatureMap<T>> {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let v = g.constant(self.data.clone());
        let shuffled = g.pixel_shuffle(v, self.sigma);
        let k = g.softmax(shuffled, 0);
        Ok(g.value(k).clone())
    }
}

/// One RRCU stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RrcuBlock {
    pub stage: usize,
    pub kernel: usize,
}

pub fn prefix(stage: usize) -> String {
    format!("rrcu.stage{stage}")
}

impl RrcuBlock {
    pub fn new(stage: usize) -> Self {
        Self { stage, kernel: KERNEL }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = prefix(self.stage);
        let kk = SIGMA * SIGMA * self.kernel * self.kernel;
        layers::add_conv(store, &format!("{p}.enc"), ENCODER_WIDTH, 2, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wr"), kk, ENCODER_WIDTH, 3, true, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wz"), 2, ENCODER_WIDTH, 1, true, Init::Zeros, rng);
        layers::add_deconv(store, &format!("{p}.deconv"), 2, 2, 4, true, Init::Bilinear, rng);
    }

    /// Residual `enc(Y) - enc(Y~prev)`.
    pub fn residual<T: Scalar>(&self, g: &mut Graph<'_, T>, y: Var, y_prev: Var) -> Result<Var> {
        let (a, b) = (g.shape(y), g.shape(y_prev));
        if a != b || a.len() != 3 || a[0] != 2 {
            return Err(Error::Shape(format!("rrcu needs two [2,H,W] flows, got {a:?} and {b:?}")));
        }
        let enc = format!("{}.enc", prefix(self.stage));
        let ey = layers::linear(g, &enc, y)?;
        let ep = layers::linear(g, &enc, y_prev)?;
        Ok(g.sub(ey, ep))
    }

    /// Normalized reassembly kernels `[kappa^2, 2H, 2W]` predicted from a residual.
    pub fn kernels<T: Scalar>(&self, g: &mut Graph<'_, T>, r: Var) -> Result<Var> {
        let logits = layers::conv(g, &format!("{}.wr", prefix(self.stage)), r, 1, 1)?;
        let shuffled = g.pixel_shuffle(logits, SIGMA);
        Ok(g.softmax(shuffled, 0))
    }

    /// `[2,H,W] x [2,H,W] -> [2,2H,2W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, y: Var, y_prev: Var) -> Result<Var> {
        let p = prefix(self.stage);
        let r = self.residual(g, y, y_prev)?;
        let (_, h, w) = g.value(r).dims3();
        let kernels = self.kernels(g, r)?;
        let values = g.resize_bilinear(r, SIGMA * h, SIGMA * w);
        let refined = g.reassemble(kernels, values, self.kernel);
        let detail = layers::linear(g, &format!("{p}.wz"), refined)?;
        let base = transposed_upsample(g, &format!("{p}.deconv"), y)?;
        Ok(g.add(base, detail))
    }
}

/// Learned x2 flow upsampling by transposed convolution, with vectors doubled.
pub fn transposed_upsample<T: Scalar>(g: &mut Graph<'_, T>, name: &str, flow: Var) -> Result<Var> {
    let up = layers::deconv_x2(g, name, flow)?;
    Ok(g.scale(up, T::lit(SIGMA as f64)))
}

/// Evaluates a block on plain flows.
pub fn rrcu_forward<T: Scalar>(
    block: &RrcuBlock,
    store: &ParamStore<T>,
    y: &FlowField<T>,
    y_prev: &FlowField<T>,
) -> Result<FlowField<T>> {
    let mut g = Graph::new(store, false);
    let a = g.constant(y.tensor().clone());
    let b = g.constant(y_prev.tensor().clone());
    let out = block.forward(&mut g, a, b)?;
    FlowField::new(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded_rng;

    #[test]
    fn four_values_shuffle_to_a_two_by_two_block() {
        let x = Tensor::<f64>::from_vec(&[4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(&[6, 1, 1]), 2).is_err());
    }

    #[test]
    fn kernel_field_validates_its_shape() {
        assert!(UpsampleKernelField::new(Tensor::<f64>::zeros(&[36, 2, 2]), 2, 3).is_ok());
        assert!(UpsampleKernelField::new(Tensor::<f64>::zeros(&[35, 2, 2]), 2, 3).is_err());
        assert!(UpsampleKernelField::new(Tensor::<f64>::zeros(&[16, 2, 2]), 2, 2).is_err());
    }

    #[test]
    fn zero_residual_leaves_the_deconv_path() {
        let block = RrcuBlock::new(4);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut seeded_rng(1));
        // make the detail path live so only the zero residual can silence it
        *store.get_mut("rrcu.stage4.wz.weight").unwrap() = Tensor::full(&[2, 16, 1, 1], 0.3);
        let y = FlowField::new(Tensor::normal(&[2, 3, 3], 1.0, &mut seeded_rng(2))).unwrap();
        let out = rrcu_forward(&block, &store, &y, &y).unwrap();
        let mut g = Graph::new(&store, false);
        let yv = g.constant(y.tensor().clone());
        let base = transposed_upsample(&mut g, "rrcu.stage4.deconv", yv).unwrap();
        assert!(out.tensor().max_abs_diff(g.value(base)) < 1e-12);
    }
}
