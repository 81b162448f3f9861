//! Visual and binaural audio encoders.
//!
//! Both encoders use the same three-layer convolution plan (kernels 8, 4, 3;
//! strides 4, 2, 1). The audio path splits the spectrogram into ears, runs
//! each through one shared stack, and fuses the two maps with the binaural
//! difference attention (BDA) block before the linear projection:
//!
//! ```text
//! diff = |f_ar - f_al|
//! w    = sigmoid(conv1x1([f_al; f_ar]))          2C -> C
//! f_a  = f_al * (1 - w) * diff + f_ar * w * diff
//! ```
//!
//! The concat baseline feeds both ears to a single stack as two input
//! channels instead.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, ParamId, ParamSet, Scalar, Tape, Var};

pub const KERNELS: [usize; 3] = [8, 4, 3];
pub const STRIDES: [usize; 3] = [4, 2, 1];
pub const DEFAULT_CHANNELS: [usize; 3] = [32, 64, 32];
pub const DEFAULT_FEATURE_DIM: usize = 512;
/// Half-width of the uniform init of the BDA gate weights.
pub const GATE_INIT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_output_size(n: usize, spec: &ConvSpec) -> Option<usize> {
    let padded = n + 2 * spec.padding;
    (padded >= spec.kernel).then(|| (padded - spec.kernel) / spec.stride + 1)
}

/// Spatial output of a plan, or `None` if some layer collapses.
pub fn plan_output(plan: &[ConvSpec], hw: (usize, usize)) -> Option<(usize, usize)> {
    plan.iter().try_fold(hw, |(h, w), s| Some((conv_output_size(h, s)?, conv_output_size(w, s)?)))
}

fn make_plan(channels: [usize; 3], first_padding: usize) -> [ConvSpec; 3] {
    std::array::from_fn(|i| ConvSpec {
        out_channels: channels[i],
        kernel: KERNELS[i],
        stride: STRIDES[i],
        padding: if i == 0 { first_padding } else { 0 },
    })
}

/// Smallest zero padding of the first layer that keeps every layer's output
/// at least 1x1.
pub fn minimal_first_padding(hw: (usize, usize)) -> usize {
    (0..)
        .find(|&p| plan_output(&make_plan([1; 3], p), hw).is_some())
        .expect("large enough padding always fits")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub depth_hw: (usize, usize),
    pub audio_hw: (usize, usize),
    pub visual_plan: [ConvSpec; 3],
    pub audio_plan: [ConvSpec; 3],
}

impl EncoderConfig {
    pub fn new(channels: [usize; 3], feature_dim: usize, depth_hw: (usize, usize), audio_hw: (usize, usize)) -> Result<Self> {
        if channels.contains(&0) || feature_dim == 0 {
            return Err(Error::Config(format!(
                "encoder channels {channels:?} and feature_dim {feature_dim} must be positive"
            )));
        }
        if depth_hw.0 == 0 || depth_hw.1 == 0 || audio_hw.0 == 0 || audio_hw.1 == 0 {
            return Err(Error::Config(format!("empty encoder input: depth {depth_hw:?}, audio {audio_hw:?}")));
        }
        Ok(EncoderConfig {
            channels,
            feature_dim,
            depth_hw,
            audio_hw,
            visual_plan: make_plan(channels, minimal_first_padding(depth_hw)),
            audio_plan: make_plan(channels, minimal_first_padding(audio_hw)),
        })
    }

    /// `(C, h, w)` of the last visual conv layer.
    pub fn visual_map(&self) -> (usize, usize, usize) {
        let (h, w) = plan_output(&self.visual_plan, self.depth_hw).expect("checked at construction");
        (self.channels[2], h, w)
    }

    /// `(C, h, w)` of the last audio conv layer.
    pub fn audio_map(&self) -> (usize, usize, usize) {
        let (h, w) = plan_output(&self.audio_plan, self.audio_hw).expect("checked at construction");
        (self.channels[2], h, w)
    }
}

/// Uniform `[-bound, bound]` entries drawn in 64-bit, so both precisions start
/// from the same values.
pub fn uniform_array<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Array<T> {
    Array::from_fn(shape, |_| T::from_f64_lossy(if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 }))
}

/// Fan-in scaled bound for ReLU layers.
pub fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

/// Three convolutions, ReLU after each.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        plan: &[ConvSpec],
        rng: &mut R,
    ) -> Self {
        let mut cin = in_channels;
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fan_in = cin * s.kernel * s.kernel;
                let w = params.add(
                    format!("{prefix}.conv{i}.w"),
                    uniform_array(&[s.out_channels, cin, s.kernel, s.kernel], relu_bound(fan_in), rng),
                );
                let b = params.add(format!("{prefix}.conv{i}.b"), Array::zeros(&[s.out_channels]));
                cin = s.out_channels;
                ConvLayer { w, b, stride: s.stride, padding: s.padding }
            })
            .collect();
        ConvStack { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let (w, b) = (tape.param(l.w), tape.param(l.b));
            let c = tape.conv2d(h, w, b, l.stride, l.padding)?;
            h = tape.relu(c);
        }
        Ok(h)
    }
}

/// Fully connected layer `x W^T + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), uniform_array(&[outputs, inputs], bound, rng));
        let b = params.add(format!("{name}.b"), Array::zeros(&[outputs]));
        Dense { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, b)
    }

    pub fn forward_relu<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub stack: ConvStack,
    pub fc: Dense,
}

impl VisualEncoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let stack = ConvStack::init(params, "visual", 1, &cfg.visual_plan, rng);
        let (c, h, w) = cfg.visual_map();
        let fc = Dense::init(params, "visual.fc", c * h * w, cfg.feature_dim, relu_bound(c * h * w), rng);
        VisualEncoder { stack, fc }
    }

    /// `[B,1,H,W] -> [B,D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, depth: Var) -> Result<Var> {
        let maps = self.stack.forward(tape, depth)?;
        let flat = tape.flatten(maps)?;
        self.fc.forward_relu(tape, flat)
    }
}

/// 1x1 convolution `2C -> C` followed by a sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct BdaGate {
    pub w: ParamId,
    pub b: ParamId,
}

impl BdaGate {
    pub fn init<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let w = params.add(format!("{prefix}.gate.w"), uniform_array(&[channels, 2 * channels, 1, 1], GATE_INIT, rng));
        let b = params.add(format!("{prefix}.gate.b"), Array::zeros(&[channels]));
        BdaGate { w, b }
    }
}

/// Tape handles of every BDA intermediate.
#[derive(Clone, Copy, Debug)]
pub struct BdaVars {
    pub diff: Var,
    pub concat: Var,
    pub w: Var,
    pub w_l: Var,
    pub w_r: Var,
    pub f_a_map: Var,
}

/// `(w ⊙ diff, (1 - w) ⊙ diff)`. The larger share is a product and the
/// smaller one its exact remainder, so the two shares sum to `diff` bitwise.
fn split_difference<T: Scalar>(tape: &mut Tape<'_, T>, w: Var, diff: Var) -> Result<(Var, Var)> {
    let half = T::from_f64_lossy(0.5);
    let right_major = tape.value(w).map(|v| if v >= half { T::one() } else { T::zero() });
    let left_major = right_major.map(|m| T::one() - m);
    let (rm, lm) = (tape.constant(right_major), tape.constant(left_major));
    let one_minus = tape.affine(w, -T::one(), T::one());
    let prod_r = tape.mul(w, diff)?;
    let prod_l = tape.mul(one_minus, diff)?;
    let rest_r = tape.sub(diff, prod_l)?;
    let rest_l = tape.sub(diff, prod_r)?;
    let pick = |tape: &mut Tape<'_, T>, a: Var, b: Var| -> Result<Var> {
        let x = tape.mul(rm, a)?;
        let y = tape.mul(lm, b)?;
        tape.add(x, y)
    };
    let w_r = pick(tape, prod_r, rest_r)?;
    let w_l = pick(tape, rest_l, prod_l)?;
    Ok((w_r, w_l))
}

/// Fuse left/right maps `[B,C,h,w]` on the tape.
pub fn bda_fuse_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, gate: &BdaGate, f_al: Var, f_ar: Var) -> Result<BdaVars> {
    if tape.shape(f_al) != tape.shape(f_ar) || tape.shape(f_al).len() != 4 {
        return Err(shape_err(
            "bda_fuse",
            format!("left {:?} and right {:?} maps must be equal 4-D shapes", tape.shape(f_al), tape.shape(f_ar)),
        ));
    }
    let delta = tape.sub(f_ar, f_al)?;
    let diff = tape.abs(delta);
    let concat = tape.concat(&[f_al, f_ar], 1)?;
    let (gw, gb) = (tape.param(gate.w), tape.param(gate.b));
    let logits = tape.conv2d(concat, gw, gb, 1, 0)?;
    let w = tape.sigmoid(logits);
    let (w_r, w_l) = split_difference(tape, w, diff)?;
    let left = tape.mul(f_al, w_l)?;
    let right = tape.mul(f_ar, w_r)?;
    let f_a_map = tape.add(left, right)?;
    Ok(BdaVars { diff, concat, w, w_l, w_r, f_a_map })
}

#[derive(Clone, Debug)]
pub enum AudioEncoder {
    Bda { stack: ConvStack, gate: BdaGate, fc: Dense },
    Concat { stack: ConvStack, fc: Dense },
}

impl AudioEncoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, cfg: &EncoderConfig, bda: bool, rng: &mut R) -> Self {
        let (c, h, w) = cfg.audio_map();
        let flat = c * h * w;
        if bda {
            let stack = ConvStack::init(params, "audio", 1, &cfg.audio_plan, rng);
            let gate = BdaGate::init(params, "audio", c, rng);
            let fc = Dense::init(params, "audio.fc", flat, cfg.feature_dim, relu_bound(flat), rng);
            AudioEncoder::Bda { stack, gate, fc }
        } else {
            let stack = ConvStack::init(params, "audio", 2, &cfg.audio_plan, rng);
            let fc = Dense::init(params, "audio.fc", flat, cfg.feature_dim, relu_bound(flat), rng);
            AudioEncoder::Concat { stack, fc }
        }
    }

    pub fn is_bda(&self) -> bool {
        matches!(self, AudioEncoder::Bda { .. })
    }

    pub fn stack(&self) -> &ConvStack {
        match self {
            AudioEncoder::Bda { stack, .. } | AudioEncoder::Concat { stack, .. } => stack,
        }
    }

    /// Per-ear maps from the shared stack: `[B,2,F,T] -> ([B,C,h,w], [B,C,h,w])`.
    pub fn channels<T: Scalar>(&self, tape: &mut Tape<'_, T>, spec: Var) -> Result<(Var, Var)> {
        encode_channels_on_tape(tape, self.stack(), spec)
    }

    /// `[B,2,F,T] -> [B,D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, spec: Var) -> Result<Var> {
        check_two_channels(tape.shape(spec))?;
        match self {
            AudioEncoder::Bda { stack, gate, fc } => {
                let (f_al, f_ar) = encode_channels_on_tape(tape, stack, spec)?;
                let fused = bda_fuse_on_tape(tape, gate, f_al, f_ar)?;
                let flat = tape.flatten(fused.f_a_map)?;
                fc.forward_relu(tape, flat)
            }
            AudioEncoder::Concat { stack, fc } => {
                let maps = stack.forward(tape, spec)?;
                let flat = tape.flatten(maps)?;
                fc.forward_relu(tape, flat)
            }
        }
    }
}

fn check_two_channels(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 2 {
        return Err(shape_err("encode_audio", format!("expected [B,2,F,T] spectrogram, got {shape:?}")));
    }
    Ok(())
}

pub fn encode_channels_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, stack: &ConvStack, spec: Var) -> Result<(Var, Var)> {
    let s = tape.shape(spec).to_vec();
    check_two_channels(&s)?;
    let b = s[0];
    let split = tape.reshape(spec, &[2 * b, 1, s[2], s[3]])?;
    let maps = stack.forward(tape, split)?;
    let left: Vec<usize> = (0..b).map(|i| 2 * i).collect();
    let right: Vec<usize> = (0..b).map(|i| 2 * i + 1).collect();
    Ok((tape.select_rows(maps, &left)?, tape.select_rows(maps, &right)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFeatureMaps<T> {
    pub f_al: Array<T>,
    pub f_ar: Array<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdaIntermediates<T> {
    pub diff: Array<T>,
    pub f_concat: Array<T>,
    pub w: Array<T>,
    pub w_l: Array<T>,
    pub w_r: Array<T>,
    pub f_a_map: Array<T>,
}

pub fn encode_visual<T: Scalar>(params: &ParamSet<T>, enc: &VisualEncoder, depth: &Array<T>) -> Result<Array<T>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(depth.clone());
    let y = enc.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

pub fn encode_audio_channels<T: Scalar>(
    params: &ParamSet<T>,
    stack: &ConvStack,
    spec: &Array<T>,
) -> Result<ChannelFeatureMaps<T>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(spec.clone());
    let (l, r) = encode_channels_on_tape(&mut tape, stack, x)?;
    Ok(ChannelFeatureMaps { f_al: tape.value(l).clone(), f_ar: tape.value(r).clone() })
}

pub fn bda_fuse<T: Scalar>(
    params: &ParamSet<T>,
    gate: &BdaGate,
    maps: &ChannelFeatureMaps<T>,
) -> Result<(Array<T>, BdaIntermediates<T>)> {
    let mut tape = Tape::new(params);
    let l = tape.constant(maps.f_al.clone());
    let r = tape.constant(maps.f_ar.clone());
    let v = bda_fuse_on_tape(&mut tape, gate, l, r)?;
    let inter = BdaIntermediates {
        diff: tape.value(v.diff).clone(),
        f_concat: tape.value(v.concat).clone(),
        w: tape.value(v.w).clone(),
        w_l: tape.value(v.w_l).clone(),
        w_r: tape.value(v.w_r).clone(),
        f_a_map: tape.value(v.f_a_map).clone(),
    };
    Ok((inter.f_a_map.clone(), inter))
}

/// Flatten, project, ReLU.
pub fn project_audio<T: Scalar>(params: &ParamSet<T>, fc: &Dense, f_a_map: &Array<T>) -> Result<Array<T>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(f_a_map.clone());
    let flat = tape.flatten(x)?;
    let y = fc.forward_relu(&mut tape, flat)?;
    Ok(tape.value(y).clone())
}

pub fn encode_audio<T: Scalar>(params: &ParamSet<T>, enc: &AudioEncoder, spec: &Array<T>) -> Result<Array<T>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(spec.clone());
    let y = enc.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// `(mean f_al, mean f_ar)` per batch row.
pub fn channel_means<T: Scalar>(maps: &ChannelFeatureMaps<T>) -> Vec<(f64, f64)> {
    let b = maps.f_al.dim(0);
    let per = maps.f_al.len() / b;
    (0..b)
        .map(|i| {
            let m = |a: &Array<T>| a.data()[i * per..(i + 1) * per].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / per as f64;
            (m(&maps.f_al), m(&maps.f_ar))
        })
        .collect()
}
