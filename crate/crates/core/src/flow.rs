//! Flow fields, frame pairs, `.flo` interchange and color-wheel rendering.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magic float that opens every `.flo` file.
pub const FLO_SENTINEL: f32 = 202021.25;
const FLO_HEADER_BYTES: usize = 12;

/// Dense `[2, H, W]` displacement field in pixels; channel 0 is `u`, channel 1 is `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    data: Tensor<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "flow must be [2,H,W], got {:?}",
                data.shape()
            )));
        }
        if data.shape()[1] == 0 || data.shape()[2] == 0 {
            return Err(Error::Shape("flow must be at least 1x1".into()));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("flow contains NaN or Inf".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    /// Field with the same `(u, v)` at every pixel.
    pub fn constant(h: usize, w: usize, u: T, v: T) -> Self {
        Self {
            data: Tensor::from_fn(&[2, h, w], |i| if i[0] == 0 { u } else { v }),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self, y: usize, x: usize) -> T {
        self.data.at3(0, y, x)
    }

    pub fn v(&self, y: usize, x: usize) -> T {
        self.data.at3(1, y, x)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            data: self.data.cast(),
        }
    }

    /// Largest vector length in the field.
    pub fn max_magnitude(&self) -> T {
        let (h, w) = (self.height(), self.width());
        let mut best = T::zero();
        for y in 0..h {
            for x in 0..w {
                best = best.max(self.u(y, x).hypot(self.v(y, x)));
            }
        }
        best
    }
}

/// Two RGB frames `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair<T> {
    pub frame1: Tensor<T>,
    pub frame2: Tensor<T>,
}

impl<T: Scalar> FramePair<T> {
    pub fn new(frame1: Tensor<T>, frame2: Tensor<T>) -> Result<Self> {
        if frame1.shape() != frame2.shape() {
            return Err(Error::Shape(format!(
                "frames differ in shape: {:?} vs {:?}",
                frame1.shape(),
                frame2.shape()
            )));
        }
        if frame1.rank() != 3 || frame1.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "frames must be [3,H,W], got {:?}",
                frame1.shape()
            )));
        }
        Ok(Self { frame1, frame2 })
    }

    pub fn height(&self) -> usize {
        self.frame1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frame1.shape()[2]
    }
}

/// Serializes a flow in Middlebury `.flo` layout (little-endian, interleaved `u,v`).
pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let t = flow.tensor();
    if !t.all_finite() {
        return Err(Error::NonFinite("refusing to write non-finite flow".into()));
    }
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(FLO_HEADER_BYTES + 8 * h * w);
    out.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let u = flow.u(y, x).to_f32().unwrap_or(f32::NAN);
            let v = flow.v(y, x).to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `.flo` bytes.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField<f32>> {
    if bytes.len() < FLO_HEADER_BYTES {
        return Err(Error::Length {
            expected: FLO_HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let tag = f32::from_le_bytes(word(0));
    if tag != FLO_SENTINEL {
        return Err(Error::Format(format!("bad .flo sentinel {tag}")));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = FLO_HEADER_BYTES + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let mut data = vec![0f32; 2 * h * w];
    let plane = h * w;
    for i in 0..plane {
        let at = FLO_HEADER_BYTES + 8 * i;
        data[i] = f32::from_le_bytes(word(at));
        data[plane + i] = f32::from_le_bytes(word(at + 4));
    }
    // payload floats are kept verbatim, even non-finite ones from foreign writers
    let data = Tensor::from_vec(&[2, h, w], data)?;
    Ok(FlowField { data })
}

pub fn write_flo<T: Scalar>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_flo(flow)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    decode_flo(&fs::read(path)?)
}

const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// Middlebury color wheel, RGB in `[0, 1]`.
fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let mut wheel = Vec::with_capacity(WHEEL_SEGMENTS.iter().sum());
    for i in 0..ry {
        wheel.push([1.0, i as f64 / ry as f64, 0.0]);
    }
    for i in 0..yg {
        wheel.push([1.0 - i as f64 / yg as f64, 1.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 1.0, i as f64 / gc as f64]);
    }
    for i in 0..cb {
        wheel.push([0.0, 1.0 - i as f64 / cb as f64, 1.0]);
    }
    for i in 0..bm {
        wheel.push([i as f64 / bm as f64, 0.0, 1.0]);
    }
    for i in 0..mr {
        wheel.push([1.0, 0.0, 1.0 - i as f64 / mr as f64]);
    }
    wheel
}

/// Renders a flow as a `[3, H, W]` RGB image in `[0, 1]`.
///
/// Direction picks the wheel hue, magnitude (relative to `max_magnitude`, or the
/// field maximum floored at `1e-6`) blends from white to the saturated hue.
/// Vectors longer than the scale are darkened.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>, max_magnitude: Option<f64>) -> Tensor<f64> {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let scale = max_magnitude
        .unwrap_or_else(|| flow.max_magnitude().to_f64_lossy())
        .max(1e-6);
    let (h, w) = (flow.height(), flow.width());
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let u = flow.u(y, x).to_f64_lossy() / scale;
            let v = flow.v(y, x).to_f64_lossy() / scale;
            let rad = u.hypot(v);
            let a = (-v).atan2(-u) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let f = fk - k0 as f64;
            for c in 0..3 {
                let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
                let col = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                };
                out.set3(c, y, x, col.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit PNG.
pub fn save_rgb_png<T: Scalar>(rgb: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = rgb.dims3();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                (rgb.at3(ch, y, x).to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads a PNG/PPM as `[3, H, W]` in `[0, 1]`.
pub fn load_rgb<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        T::lit(img.get_pixel(i[2] as u32, i[1] as u32)[i[0]] as f64 / 255.0)
    }))
}
