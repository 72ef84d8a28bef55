//! The three task losses and their weighted total.
//!
//! All losses take the clean target `B` and the restoration `b` as tape
//! variables and return a scalar variable; batches are averaged.

use crate::autograd::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::weighting::TaskWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Reconstruction (per-pixel MSE).
    Pixel,
    /// Sobel feature distance.
    Edge,
    /// Patch Gram-matrix distance.
    Texture,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Pixel, Task::Edge, Task::Texture];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Task::Pixel => "p",
            Task::Edge => "e",
            Task::Texture => "t",
        }
    }
}

/// One value per enabled task; the reconstruction task is always present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLosses<V> {
    pub pixel: V,
    pub edge: Option<V>,
    pub texture: Option<V>,
}

impl<V: Copy> TaskLosses<V> {
    pub fn get(&self, task: Task) -> Option<V> {
        match task {
            Task::Pixel => Some(self.pixel),
            Task::Edge => self.edge,
            Task::Texture => self.texture,
        }
    }

    /// Enabled tasks in `p, e, t` order.
    pub fn iter(&self) -> impl Iterator<Item = (Task, V)> + '_ {
        Task::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|v| (t, v)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(Task, V) -> Result<U, E>,
    ) -> Result<TaskLosses<U>, E> {
        Ok(TaskLosses {
            pixel: f(Task::Pixel, self.pixel)?,
            edge: self.edge.map(|v| f(Task::Edge, v)).transpose()?,
            texture: self.texture.map(|v| f(Task::Texture, v)).transpose()?,
        })
    }
}

impl TaskLosses<f64> {
    pub fn from_values(pixel: f64, edge: Option<f64>, texture: Option<f64>) -> Self {
        Self {
            pixel,
            edge,
            texture,
        }
    }
}

/// Fixed Sobel loss network: per input channel, a horizontal and a vertical
/// 3×3 Sobel response with zero padding 1, no bias and no nonlinearity.
#[derive(Clone, Debug)]
pub struct EdgeLossNetwork<T: Scalar = f32> {
    kernel: Tensor<T>,
}

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

impl<T: Scalar> EdgeLossNetwork<T> {
    pub fn new(channels: usize) -> Self {
        // depthwise filters embedded in a dense [2C, C, 3, 3] kernel
        let mut data = vec![T::zero(); 2 * channels * channels * 9];
        for c in 0..channels {
            for (o, filter) in [SOBEL_X, SOBEL_Y].iter().enumerate() {
                let out = 2 * c + o;
                let base = (out * channels + c) * 9;
                for (i, v) in filter.iter().flatten().enumerate() {
                    data[base + i] = T::of(*v);
                }
            }
        }
        Self {
            kernel: Tensor::from_vec(&[2 * channels, channels, 3, 3], data)
                .expect("sobel kernel shape"),
        }
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// `[N, C, H, W] -> [N, 2C, H, W]`, channel `2c` the x-gradient of input channel `c`.
    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.constant(self.kernel.clone());
        tape.conv2d(x, k, None, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextureLossConfig {
    pub patch: usize,
}

impl Default for TextureLossConfig {
    fn default() -> Self {
        Self { patch: 4 }
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

fn mean_squared_distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let count = tape.value(a).numel() as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.reduce(diff, Reduction::FrobeniusSq)?;
    tape.scale(sq, 1.0 / count)
}

/// `‖B − b‖²_F / (C·H·W)`, averaged over the batch.
pub fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, target: Var, restored: Var) -> Result<Var> {
    same_shape(tape, "pixel_loss", target, restored)?;
    mean_squared_distance(tape, target, restored)
}

/// `‖φ(B) − φ(b)‖²_F` divided by the element count of `φ`'s output, averaged over the batch.
pub fn edge_aware_loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    restored: Var,
    phi: &EdgeLossNetwork<T>,
) -> Result<Var> {
    same_shape(tape, "edge_aware_loss", target, restored)?;
    let ft = phi.apply(tape, target)?;
    let fr = phi.apply(tape, restored)?;
    mean_squared_distance(tape, ft, fr)
}

/// Gram matrix `F·Fᵀ / M` of one unrolled image `F: [C·K², M]`.
fn gram<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let m = tape.value(features).shape()[1] as f64;
    let ft = tape.transpose(features)?;
    let g = tape.matmul(features, ft)?;
    tape.scale(g, 1.0 / m)
}

/// `‖G(B_p) − G(b_p)‖²_F / (C·K²)²` over the non-overlapping `K×K` patch unroll,
/// averaged over the batch.
pub fn texture_matching_loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    restored: Var,
    cfg: &TextureLossConfig,
) -> Result<Var> {
    same_shape(tape, "texture_matching_loss", target, restored)?;
    let (n, c, _, _) = tape.value(target).dims4("texture_matching_loss")?;
    let ft = tape.patch_unroll(target, cfg.patch)?;
    let fr = tape.patch_unroll(restored, cfg.patch)?;
    let rows = (c * cfg.patch * cfg.patch) as f64;
    let mut total: Option<Var> = None;
    for i in 0..n {
        let a = tape.select(ft, i)?;
        let b = tape.select(fr, i)?;
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        let diff = tape.sub(ga, gb)?;
        let sq = tape.reduce(diff, Reduction::FrobeniusSq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let total = total.expect("batch has at least one image");
    tape.scale(total, 1.0 / (rows * rows * n as f64))
}

/// Weighted total, with its parts, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_p: f64,
    pub l_e: f64,
    pub l_t: f64,
    pub w_p: f64,
    pub w_e: f64,
    pub w_t: f64,
    pub total: f64,
}

/// `Σ w_i·L_i` over the enabled tasks; disabled tasks report zero.
pub fn total_loss(losses: &TaskLosses<f64>, weights: &TaskWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut total = 0.0;
    for (task, l) in losses.iter() {
        total += weights.weight(task) * l;
    }
    let l = |t: Task| losses.get(t).unwrap_or(0.0);
    let w = |t: Task| {
        if losses.get(t).is_some() {
            weights.weight(t)
        } else {
            0.0
        }
    };
    Ok(LossReport {
        l_p: l(Task::Pixel),
        l_e: l(Task::Edge),
        l_t: l(Task::Texture),
        w_p: w(Task::Pixel),
        w_e: w(Task::Edge),
        w_t: w(Task::Texture),
        total,
    })
}

/// Records `Σ w_i·L_i` on the tape; the weights enter as constants.
///
/// Terms with weight exactly zero are left off the tape, so a zero-weighted
/// task contributes nothing to any gradient, not even a signed zero.
pub fn weighted_total<T: Scalar>(
    tape: &mut Tape<T>,
    losses: &TaskLosses<Var>,
    weights: &TaskWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    for (task, l) in losses.iter() {
        let w = weights.weight(task);
        if w == 0.0 {
            continue;
        }
        let term = tape.scale(l, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.scale(losses.pixel, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighting::fixed_weights;

    fn vars(tape: &mut Tape<f64>, a: Tensor<f64>, b: Tensor<f64>) -> (Var, Var) {
        (tape.constant(a), tape.constant(b))
    }

    #[test]
    fn pixel_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let (a, b) = vars(
            &mut tape,
            Tensor::full(&[1, 3, 4, 4], 0.3),
            Tensor::full(&[1, 3, 4, 4], 0.3),
        );
        let l = pixel_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let (a, b) = vars(
            &mut tape,
            Tensor::ones(&[2, 3, 4, 4]),
            Tensor::zeros(&[2, 3, 4, 4]),
        );
        let l = pixel_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let (a, b) = vars(
            &mut tape,
            Tensor::full(&[1, 3, 2, 2], 0.5),
            Tensor::full(&[1, 3, 2, 2], 0.25),
        );
        let l = pixel_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0625);

        let (a, b) = vars(
            &mut tape,
            Tensor::zeros(&[1, 3, 2, 2]),
            Tensor::zeros(&[1, 3, 2, 3]),
        );
        assert!(matches!(
            pixel_loss(&mut tape, a, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    /// Sobel responses of a single-channel image with explicit zero padding.
    fn sobel_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let px = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                img[y as usize * w + x as usize]
            }
        };
        let mut out = Vec::new();
        for filter in [SOBEL_X, SOBEL_Y] {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            acc +=
                                filter[(dy + 1) as usize][(dx + 1) as usize] * px(y + dy, x + dx);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn edge_loss_constant_images_respond_only_at_padded_borders() {
        let (h, w) = (4, 5);
        let (cb, cr) = (0.2, 0.7);
        let fb = sobel_oracle(&vec![cb; h * w], h, w);
        let fr = sobel_oracle(&vec![cr; h * w], h, w);
        // interior of a constant image has no response
        assert_eq!(fb[w + 1], 0.0);
        let expected: f64 = fb
            .iter()
            .zip(&fr)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / fb.len() as f64;
        assert!(expected > 0.0);

        let mut tape = Tape::<f64>::new();
        let phi = EdgeLossNetwork::new(1);
        let (a, b) = vars(
            &mut tape,
            Tensor::full(&[1, 1, h, w], cb),
            Tensor::full(&[1, 1, h, w], cr),
        );
        let l = edge_aware_loss(&mut tape, a, b, &phi).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_on_ramp_is_quadratic_in_a_perturbation() {
        let (h, w) = (6, 6);
        let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 / w as f64).collect();
        let phi = EdgeLossNetwork::new(1);
        let eval = |delta: f64| {
            let mut tape = Tape::<f64>::new();
            let mut pert = ramp.clone();
            pert[2 * w + 3] += delta;
            let a = tape.constant(Tensor::from_vec(&[1, 1, h, w], ramp.clone()).unwrap());
            let b = tape.constant(Tensor::from_vec(&[1, 1, h, w], pert).unwrap());
            let l = edge_aware_loss(&mut tape, a, b, &phi).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(0.0), 0.0);
        let r1 = eval(1e-2) / 1e-4;
        let r2 = eval(1e-3) / 1e-6;
        assert!(r1 > 0.0);
        assert!((r1 / r2 - 1.0).abs() < 1e-6, "{r1} vs {r2}");
    }

    #[test]
    fn sobel_network_matches_oracle_per_channel() {
        let (h, w) = (3, 4);
        let img: Vec<f64> = (0..2 * h * w)
            .map(|i| ((i * 13) % 7) as f64 / 7.0)
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2, h, w], img.clone()).unwrap());
        let phi = EdgeLossNetwork::new(2);
        let y = phi.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, h, w]);
        for c in 0..2 {
            let oracle = sobel_oracle(&img[c * h * w..(c + 1) * h * w], h, w);
            let got = &tape.value(y).data()[2 * c * h * w..(2 * c + 2) * h * w];
            for (a, b) in oracle.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn texture_loss_hand_case() {
        let mut tape = Tape::<f64>::new();
        let (a, b) = vars(
            &mut tape,
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::ones(&[1, 1, 2, 2]),
        );
        let l = texture_matching_loss(&mut tape, a, b, &TextureLossConfig { patch: 2 }).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let (a, b) = vars(
            &mut tape,
            Tensor::zeros(&[1, 1, 6, 8]),
            Tensor::zeros(&[1, 1, 6, 8]),
        );
        assert!(texture_matching_loss(&mut tape, a, b, &TextureLossConfig::default()).is_err());
    }

    #[test]
    fn texture_loss_ignores_patch_order() {
        // swap the two 2×2 patches of a 2×4 image
        let b: Vec<f64> = vec![0.1, 0.2, 0.7, 0.3, 0.4, 0.9, 0.5, 0.6];
        let swapped: Vec<f64> = vec![0.7, 0.3, 0.1, 0.2, 0.5, 0.6, 0.4, 0.9];
        let target = vec![0.3; 8];
        let cfg = TextureLossConfig { patch: 2 };
        let eval = |img: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let (a, b) = vars(
                &mut tape,
                Tensor::from_vec(&[1, 1, 2, 4], target.clone()).unwrap(),
                Tensor::from_vec(&[1, 1, 2, 4], img.to_vec()).unwrap(),
            );
            let l = texture_matching_loss(&mut tape, a, b, &cfg).unwrap();
            tape.value(l).item()
        };
        assert!(eval(&b) > 0.0);
        assert!((eval(&b) - eval(&swapped)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let ones = TaskLosses::from_values(1.0, Some(1.0), Some(1.0));
        let r = total_loss(&ones, &fixed_weights([1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(r.total, 3.0);

        let l = TaskLosses::from_values(0.5, Some(0.2), Some(0.1));
        let r = total_loss(&l, &fixed_weights([1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(r.total, 0.5);
        let r = total_loss(&l, &fixed_weights([1.0, 1e-2, 1.0]).unwrap()).unwrap();
        assert!((r.total - 0.602).abs() < 1e-15);
        assert_eq!((r.w_p, r.w_e, r.w_t), (1.0, 1e-2, 1.0));

        let pixel_only = TaskLosses::from_values(0.5, None, None);
        let r = total_loss(&pixel_only, &fixed_weights([1.0, 1e-2, 1.0]).unwrap()).unwrap();
        assert_eq!((r.total, r.w_e, r.l_e), (0.5, 0.0, 0.0));
    }

    #[test]
    fn zero_weighted_tasks_leave_no_gradient_trace() {
        let x = Tensor::<f64>::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let grad = |weights: [f64; 3], with_aux: bool| {
            let mut tape = Tape::new();
            let b = tape.param(x.clone());
            let target = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
            let pixel = pixel_loss(&mut tape, target, b).unwrap();
            let aux = if with_aux {
                let phi = EdgeLossNetwork::new(1);
                Some(edge_aware_loss(&mut tape, target, b, &phi).unwrap())
            } else {
                None
            };
            let losses = TaskLosses {
                pixel,
                edge: aux,
                texture: None,
            };
            let total =
                weighted_total(&mut tape, &losses, &fixed_weights(weights).unwrap()).unwrap();
            (
                tape.value(total).item(),
                tape.backward(total).unwrap().take(b).unwrap(),
            )
        };
        let (plain_value, plain) = grad([1.0, 0.0, 0.0], false);
        let (value, with_edge) = grad([1.0, 0.0, 0.0], true);
        assert_eq!(plain_value.to_bits(), value.to_bits());
        assert!(plain.bit_eq(&with_edge));
        let (zero, _) = grad([0.0, 0.0, 0.0], true);
        assert_eq!(zero, 0.0);
    }
}
