//! ResNet generator with encoder feature taps, and the PatchGAN discriminator.
//!
//! All activations are single images laid out `C×H×W`.

use qsattn_tensor::{conv_output_size, Scalar, Tape, Upsample, Var};
use rand::Rng;

use crate::error::{QsError, Result};
use crate::params::{Bound, ParamId, ParamStore};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// Number of encoder feature taps.
pub const TAP_COUNT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Channel width of the first convolution; doubled by each down-sampling block.
    pub ngf: usize,
    pub n_res_blocks: usize,
    /// Residual blocks that belong to the encoder (taps end at the last one).
    pub encoder_res_blocks: usize,
    pub upsample: Upsample,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            ngf: 64,
            n_res_blocks: 9,
            encoder_res_blocks: 5,
            upsample: Upsample::TransposedConv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub ndf: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { ndf: 64 }
    }
}

/// Encoder activations used by the contrastive loss: the input image, both
/// down-sampling outputs, and the outputs of residual blocks 1 and 5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapSet {
    pub taps: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: ParamId,
    conv2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct UpBlock {
    weight: ParamId,
    upsample: Upsample,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    stem: ParamId,
    down: [ParamId; 2],
    res: Vec<ResBlock>,
    up: [UpBlock; 2],
    head_w: ParamId,
    head_b: ParamId,
}

impl Generator {
    /// Registers the generator's parameters (prefixed `G.`) in `store`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        if cfg.ngf == 0 || cfg.n_res_blocks == 0 {
            return Err(QsError::config("generator needs ngf > 0 and at least one residual block"));
        }
        if cfg.encoder_res_blocks == 0 || cfg.encoder_res_blocks > cfg.n_res_blocks {
            return Err(QsError::config(format!(
                "encoder must end inside the residual stack (1..={}), got {}",
                cfg.n_res_blocks, cfg.encoder_res_blocks
            )));
        }
        let n = cfg.ngf;
        let stem = store.add_normal("G.stem.w", vec![n, 3, 7, 7], INIT_STD, rng);
        let down = [
            store.add_normal("G.down1.w", vec![2 * n, n, 3, 3], INIT_STD, rng),
            store.add_normal("G.down2.w", vec![4 * n, 2 * n, 3, 3], INIT_STD, rng),
        ];
        let res = (0..cfg.n_res_blocks)
            .map(|i| ResBlock {
                conv1: store.add_normal(format!("G.res{}.conv1.w", i + 1), vec![4 * n, 4 * n, 3, 3], INIT_STD, rng),
                conv2: store.add_normal(format!("G.res{}.conv2.w", i + 1), vec![4 * n, 4 * n, 3, 3], INIT_STD, rng),
            })
            .collect();
        let up_shape = |cin: usize, cout: usize| match cfg.upsample {
            Upsample::TransposedConv => vec![cin, cout, 3, 3],
            Upsample::NearestConv => vec![cout, cin, 3, 3],
        };
        let up = [
            UpBlock {
                weight: store.add_normal("G.up1.w", up_shape(4 * n, 2 * n), INIT_STD, rng),
                upsample: cfg.upsample,
            },
            UpBlock {
                weight: store.add_normal("G.up2.w", up_shape(2 * n, n), INIT_STD, rng),
                upsample: cfg.upsample,
            },
        ];
        let head_w = store.add_normal("G.out.w", vec![3, n, 7, 7], INIT_STD, rng);
        let head_b = store.add_zeros("G.out.b", vec![3]);
        Ok(Generator {
            cfg,
            stem,
            down,
            res,
            up,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.cfg
    }

    /// Ids of the output convolution (weight, bias).
    pub fn output_conv(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Number of scalar parameters owned by the generator in `store`.
    pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
        prefixed_count(store, "G.")
    }

    pub fn check_input<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<()> {
        match *tape.shape(x) {
            [3, h, w] if h % 4 == 0 && w % 4 == 0 && h >= 8 && w >= 8 => Ok(()),
            [3, h, w] => Err(QsError::config(format!(
                "generator input {h}×{w} must have sides divisible by 4 and at least 8"
            ))),
            ref s => Err(QsError::config(format!("generator expects a 3×H×W image, got {s:?}"))),
        }
    }

    fn conv_norm_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, w, None, stride, 1)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        Ok(tape.relu(y))
    }

    fn res_block<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, block: ResBlock, x: Var) -> Result<Var> {
        let y = Self::conv_norm_relu(tape, x, bound.var(block.conv1), 1)?;
        let y = tape.conv2d(y, bound.var(block.conv2), None, 1, 1)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        Ok(tape.add(x, y)?)
    }

    /// Runs the encoder prefix, returning the five taps and the last activation.
    fn encode_inner<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<(TapSet, Var)> {
        Self::check_input(tape, x)?;
        let mut taps = vec![x];
        let y = tape.pad_reflect(x, 3)?;
        let y = tape.conv2d(y, bound.var(self.stem), None, 1, 0)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        let mut y = tape.relu(y);
        for &d in &self.down {
            y = Self::conv_norm_relu(tape, y, bound.var(d), 2)?;
            taps.push(y);
        }
        for (i, &block) in self.res[..self.cfg.encoder_res_blocks].iter().enumerate() {
            y = Self::res_block(tape, bound, block, y)?;
            if i == 0 || i + 1 == self.cfg.encoder_res_blocks {
                taps.push(y);
            }
        }
        if self.cfg.encoder_res_blocks == 1 {
            taps.push(y);
        }
        debug_assert_eq!(taps.len(), TAP_COUNT);
        Ok((TapSet { taps }, y))
    }

    /// Encoder-only pass.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<TapSet> {
        Ok(self.encode_inner(tape, bound, x)?.0)
    }

    /// Full translation pass: output image in `[-1, 1]` plus the encoder taps.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<(Var, TapSet)> {
        let (taps, mut y) = self.encode_inner(tape, bound, x)?;
        for &block in &self.res[self.cfg.encoder_res_blocks..] {
            y = Self::res_block(tape, bound, block, y)?;
        }
        for up in &self.up {
            y = match up.upsample {
                Upsample::TransposedConv => tape.conv_transpose2d(y, bound.var(up.weight), None, 2, 1, 1)?,
                Upsample::NearestConv => {
                    let u = tape.upsample_nearest2x(y)?;
                    tape.conv2d(u, bound.var(up.weight), None, 1, 1)?
                }
            };
            y = tape.instance_norm(y, NORM_EPS)?;
            y = tape.relu(y);
        }
        let y = tape.pad_reflect(y, 3)?;
        let y = tape.conv2d(y, bound.var(self.head_w), Some(bound.var(self.head_b)), 1, 0)?;
        Ok((tape.tanh(y), taps))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    convs: [ParamId; 5],
    first_b: ParamId,
    last_b: ParamId,
}

/// Kernel size shared by every discriminator convolution.
const D_KERNEL: usize = 4;
const D_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

impl Discriminator {
    /// Registers the discriminator's parameters (prefixed `D.`) in `store`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if cfg.ndf == 0 {
            return Err(QsError::config("discriminator needs ndf > 0"));
        }
        let n = cfg.ndf;
        let widths = [3, n, 2 * n, 4 * n, 8 * n, 1];
        let convs = std::array::from_fn(|i| {
            store.add_normal(
                format!("D.conv{}.w", i + 1),
                vec![widths[i + 1], widths[i], D_KERNEL, D_KERNEL],
                INIT_STD,
                rng,
            )
        });
        let first_b = store.add_zeros("D.conv1.b", vec![n]);
        let last_b = store.add_zeros("D.conv5.b", vec![1]);
        Ok(Discriminator {
            cfg,
            convs,
            first_b,
            last_b,
        })
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.cfg
    }

    pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
        prefixed_count(store, "D.")
    }

    /// Logit-map side length for an input side, or `None` if the input is too small.
    pub fn output_side(input: usize) -> Option<usize> {
        D_STRIDES.iter().try_fold(input, |s, &stride| match conv_output_size(s, D_KERNEL, stride, 1) {
            Some(o) if o >= 1 => Some(o),
            _ => None,
        })
    }

    /// One-channel map of patch logits.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (h, w) = match *tape.shape(x) {
            [3, h, w] => (h, w),
            ref s => return Err(QsError::config(format!("discriminator expects a 3×H×W image, got {s:?}"))),
        };
        if Self::output_side(h).is_none() || Self::output_side(w).is_none() {
            return Err(QsError::config(format!(
                "discriminator input {h}×{w} is smaller than its receptive field"
            )));
        }
        let mut y = x;
        for (i, (&conv, &stride)) in self.convs.iter().zip(&D_STRIDES).enumerate() {
            let bias = match i {
                0 => Some(bound.var(self.first_b)),
                4 => Some(bound.var(self.last_b)),
                _ => None,
            };
            y = tape.conv2d(y, bound.var(conv), bias, stride, 1)?;
            if i == 4 {
                break;
            }
            if i > 0 {
                y = tape.instance_norm(y, NORM_EPS)?;
            }
            y = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(y)
    }
}

fn prefixed_count<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(_, t)| t.numel())
        .sum()
}
