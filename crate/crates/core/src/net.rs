//! The de-raining network: a U-Net style encoder/decoder that trades
//! resolution for channels with desubpixel/subpixel, runs a residual trunk with
//! optional channel attention at quarter resolution, and predicts the rain
//! layer `R̂`. The restored image is `clamp(O − R̂, 0, 1)`.
//!
//! Layout, with `c = base_channels` and `t = trunk_channels`:
//!
//! ```text
//! O ─ head 3→c ─┬─ desubpixel ─ enc1 4c→2c ─┬─ desubpixel ─ enc2 8c→t ─ blocks ─┐
//!               │                           │                                  │
//!               │                           └─(+)─ subpixel ─ dec1 t→8c ───────┘
//!               │                               │
//!               └────(+)─ subpixel ─ dec2 2c→4c ┘
//!                     │
//!                     └─ tail c→3 ─ R̂
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial ratio of each desubpixel stage.
pub const STAGE_RATIO: usize = 2;
/// Input extents must be multiples of this (two stages of [`STAGE_RATIO`]).
pub const SPATIAL_MULTIPLE: usize = STAGE_RATIO * STAGE_RATIO;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub trunk_channels: usize,
    pub num_residual_blocks: usize,
    pub use_channel_attention: bool,
    pub ca_reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            trunk_channels: 64,
            num_residual_blocks: 8,
            use_channel_attention: true,
            ca_reduction: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 16-block variant.
    pub fn deep() -> Self {
        Self {
            num_residual_blocks: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_residual_blocks == 0 {
            return Err(Error::Config(
                "num_residual_blocks must be at least 1".into(),
            ));
        }
        if self.base_channels == 0 || self.trunk_channels == 0 || self.ca_reduction == 0 {
            return Err(Error::Config(
                "channel counts and ca_reduction must be at least 1".into(),
            ));
        }
        if self.trunk_channels % self.ca_reduction != 0 {
            return Err(Error::Config(format!(
                "trunk_channels {} is not divisible by ca_reduction {}",
                self.trunk_channels, self.ca_reduction
            )));
        }
        Ok(())
    }

    /// Name of the kernel used as the shared reference layer for
    /// gradient-balanced weighting: the last convolution of the trunk.
    pub fn reference_layer(&self) -> String {
        format!("trunk.block{}.conv2.kernel", self.num_residual_blocks - 1)
    }

    /// `(name, shape)` of every parameter in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.base_channels;
        let t = self.trunk_channels;
        let r2 = STAGE_RATIO * STAGE_RATIO;
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.kernel"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("head".into(), 3, c, 3);
        conv("enc1".into(), r2 * c, 2 * c, 3);
        conv("enc2".into(), r2 * 2 * c, t, 3);
        for b in 0..self.num_residual_blocks {
            conv(format!("trunk.block{b}.conv1"), t, t, 3);
            conv(format!("trunk.block{b}.conv2"), t, t, 3);
            if self.use_channel_attention {
                conv(
                    format!("trunk.block{b}.ca.down"),
                    t,
                    t / self.ca_reduction,
                    1,
                );
                conv(format!("trunk.block{b}.ca.up"), t / self.ca_reduction, t, 1);
            }
        }
        conv("dec1".into(), t, r2 * 2 * c, 3);
        conv("dec2".into(), 2 * c, r2 * c, 3);
        conv("tail".into(), c, 3, 3);
        out
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Tape handles of a registered [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another node, e.g. a probe leaf in a gradient check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        *slot = var;
        Ok(())
    }
}

/// Gain of the output convolution's initial kernel relative to the usual
/// `N(0, 2/fan_in)` draw.
pub const TAIL_INIT_GAIN: f64 = 1e-3;

/// Multiplier on the standard deviation of a kernel's initial draw. The last
/// convolution of every residual branch starts at zero, so each block begins
/// as the identity, and the output convolution starts small, so the untrained
/// network predicts `R̂ ≈ 0`.
pub fn init_gain(name: &str) -> f64 {
    if name == "tail.kernel" {
        TAIL_INIT_GAIN
    } else if name.starts_with("trunk.") && name.ends_with(".conv2.kernel") {
        0.0
    } else {
        1.0
    }
}

/// Creates every parameter: kernels drawn from `N(0, 2/fan_in)` scaled by
/// [`init_gain`], biases zero.
pub fn build_model(cfg: &ModelConfig) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::default();
    for (name, shape) in cfg.parameter_shapes() {
        let gain = init_gain(&name);
        let tensor = if name.ends_with(".kernel") && gain > 0.0 {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0f64, gain * (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let len: usize = shape.iter().product();
            let values: Vec<f32> = (0..len).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::from_vec(&shape, values)?
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, tensor)?;
    }
    Ok(store)
}

/// A parameter store with every tensor zero (the network then predicts `R̂ = 0`).
pub fn zero_model<T: Scalar>(cfg: &ModelConfig) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut store = ParameterStore::default();
    for (name, shape) in cfg.parameter_shapes() {
        store.insert(name, Tensor::zeros(&shape))?;
    }
    Ok(store)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, params: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let kernel = params.get(&format!("{name}.kernel"))?;
    let bias = params.get(&format!("{name}.bias"))?;
    let pad = tape.value(kernel).shape()[2] / 2;
    tape.conv2d(x, kernel, Some(bias), pad)
}

fn channels<T: Scalar>(tape: &Tape<T>, x: Var) -> usize {
    tape.value(x).shape().get(1).copied().unwrap_or(0)
}

/// `x + x ⊙ σ(up(relu(down(pool(x)))))`, with the mask shared across each channel.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let pooled = tape.reduce(x, Reduction::GlobalAvgPool)?;
    let down = conv(tape, params, &format!("{prefix}.down"), pooled)?;
    let down = tape.relu(down)?;
    let up = conv(tape, params, &format!("{prefix}.up"), down)?;
    let mask = tape.sigmoid(up)?;
    let gated = tape.scale_channels(x, mask)?;
    tape.add(x, gated)
}

/// `x + CA(conv2(relu(conv1(x))))`, or without the attention stage when `use_ca` is off.
pub fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    prefix: &str,
    x: Var,
    use_ca: bool,
) -> Result<Var> {
    let expected = tape
        .value(params.get(&format!("{prefix}.conv1.kernel"))?)
        .shape()[1];
    if channels(tape, x) != expected {
        return Err(Error::ShapeMismatch {
            op: "residual_block",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![expected],
        });
    }
    let h = conv(tape, params, &format!("{prefix}.conv1"), x)?;
    let h = tape.relu(h)?;
    let mut h = conv(tape, params, &format!("{prefix}.conv2"), h)?;
    if use_ca {
        h = channel_attention(tape, params, &format!("{prefix}.ca"), h)?;
    }
    tape.add(x, h)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `b = clamp(O − R̂, 0, 1)`
    pub restored: Var,
    /// `R̂`
    pub residual: Var,
}

/// Runs the network on `input: [N, 3, H, W]` with `H` and `W` multiples of 4.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    cfg: &ModelConfig,
    input: Var,
) -> Result<ForwardOutput> {
    let value = tape.value(input);
    let (_, c, h, w) = value.dims4("forward")?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "forward",
            shape: value.shape().to_vec(),
            reason: "expected 3 input channels".into(),
        });
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "forward input",
        });
    }
    for extent in [h, w] {
        if extent % SPATIAL_MULTIPLE != 0 {
            return Err(Error::NotDivisible {
                op: "forward",
                extent,
                divisor: SPATIAL_MULTIPLE,
            });
        }
    }

    let skip_full = conv(tape, params, "head", input)?;
    let x = tape.desubpixel(skip_full, STAGE_RATIO)?;
    let skip_half = conv(tape, params, "enc1", x)?;
    let x = tape.desubpixel(skip_half, STAGE_RATIO)?;
    let mut x = conv(tape, params, "enc2", x)?;
    for b in 0..cfg.num_residual_blocks {
        x = residual_block(
            tape,
            params,
            &format!("trunk.block{b}"),
            x,
            cfg.use_channel_attention,
        )?;
    }
    let x = conv(tape, params, "dec1", x)?;
    let x = tape.subpixel(x, STAGE_RATIO)?;
    let x = tape.add(x, skip_half)?;
    let x = conv(tape, params, "dec2", x)?;
    let x = tape.subpixel(x, STAGE_RATIO)?;
    let x = tape.add(x, skip_full)?;
    let residual = conv(tape, params, "tail", x)?;
    let diff = tape.sub(input, residual)?;
    let restored = tape.clamp(diff, 0.0, 1.0)?;
    Ok(ForwardOutput { restored, residual })
}

/// Forward pass without gradient tracking; returns `(b, R̂)`.
pub fn predict<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let out = forward(&mut tape, &vars, cfg, x)?;
    Ok((
        tape.value(out.restored).clone(),
        tape.value(out.residual).clone(),
    ))
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Pads `[C, H, W]` on the bottom/right by reflection so both extents become multiples of `multiple`.
pub fn reflect_pad<T: Scalar>(image: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "reflect_pad",
                shape: image.shape().to_vec(),
                reason: "expected [C, H, W]".into(),
            })
        }
    };
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let src = image.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        for y in 0..ph {
            let sy = mirror(y as isize, h);
            for x in 0..pw {
                out.push(src[(ci * h + sy) * w + mirror(x as isize, w)]);
            }
        }
    }
    Tensor::from_vec(&[c, ph, pw], out)
}

/// Top-left `[C, h, w]` window of a `[C, H, W]` image.
pub fn crop<T: Scalar>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, ih, iw) = match *image.shape() {
        [c, ih, iw] if ih >= h && iw >= w => (c, ih, iw),
        _ => {
            return Err(Error::InvalidShape {
                op: "crop",
                shape: image.shape().to_vec(),
                reason: format!("cannot crop to {h}x{w}"),
            })
        }
    };
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            let row = (ci * ih + y) * iw;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// De-rains one `[3, H, W]` image of any size by reflect-padding to a multiple
/// of 4, running the network, and cropping back. Returns `(b, R̂)`.
pub fn restore_image<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "restore_image",
                shape: image.shape().to_vec(),
                reason: "expected [3, H, W]".into(),
            })
        }
    };
    let padded = reflect_pad(image, SPATIAL_MULTIPLE)?;
    let batch = Tensor::stack(std::slice::from_ref(&padded))?;
    let (b, r) = predict(params, cfg, &batch)?;
    let b = b.unstack().remove(0);
    let r = r.unstack().remove(0);
    Ok((crop(&b, h, w)?, crop(&r, h, w)?))
}
