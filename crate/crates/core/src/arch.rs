//! The segmentation network: four residual-interconnection encoder levels
//! plus bottleneck, residual-block skip paths, and attention-refined
//! decoders, each behind an independent ablation toggle. With all toggles
//! off the model is a plain U-Net.

use crate::error::{Error, Result};
use crate::tensor::{Axis, ParamSet, ReduceKind, Scalar, Shape, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEPTH: usize = 4;

/// Architecture hyperparameters and the three ablation toggles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_one")]
    pub in_channels: usize,
    #[serde(default = "default_one")]
    pub out_channels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_skip_counts")]
    pub skip_block_counts: Vec<usize>,
    #[serde(default)]
    pub use_residual_encoders: bool,
    #[serde(default)]
    pub use_residual_skips: bool,
    #[serde(default)]
    pub use_attention_decoders: bool,
}

fn default_one() -> usize {
    1
}
fn default_base() -> usize {
    32
}
fn default_skip_counts() -> Vec<usize> {
    vec![4, 3, 2, 1]
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 32,
            skip_block_counts: default_skip_counts(),
            use_residual_encoders: false,
            use_residual_skips: false,
            use_attention_decoders: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "channel counts must be at least 1".into(),
            ));
        }
        if self.skip_block_counts.len() != DEPTH {
            return Err(Error::InvalidConfig(format!(
                "skip_block_counts must have exactly {DEPTH} entries, got {}",
                self.skip_block_counts.len()
            )));
        }
        if self.skip_block_counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig(
                "every skip path needs at least one block".into(),
            ));
        }
        Ok(())
    }

    pub fn with_toggles(mut self, enc: bool, skips: bool, attention: bool) -> Self {
        self.use_residual_encoders = enc;
        self.use_residual_skips = skips;
        self.use_attention_decoders = attention;
        self
    }
}

/// Channel widths derived from the config.
///
/// `level` holds the nominal widths `base * 2^i` for the four levels plus
/// bottleneck. `enc_out` holds actual encoder block output widths: level 1
/// is a plain stem; the four blocks that consume downsampled input (levels
/// 2-4 and the bottleneck) concatenate their input onto the second
/// convolution's output when residual encoders are enabled, widening their
/// output to input + nominal.
#[derive(Debug, Clone, Copy)]
pub struct Widths {
    pub level: [usize; 5],
    pub enc_out: [usize; 5],
}

pub fn widths(config: &ArchConfig) -> Widths {
    let mut level = [0usize; 5];
    for (i, l) in level.iter_mut().enumerate() {
        *l = config.base_channels << i;
    }
    let mut enc_out = [0usize; 5];
    enc_out[0] = level[0];
    for i in 1..5 {
        enc_out[i] = if config.use_residual_encoders {
            enc_out[i - 1] + level[i]
        } else {
            level[i]
        };
    }
    Widths { level, enc_out }
}

fn attention_hidden(c: usize) -> usize {
    (c / 8).max(1)
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Shape,
    fan_in: usize,
    zero: bool,
}

fn conv_spec(name: &str, out_c: usize, in_c: usize, k: usize, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: Shape {
            n: out_c,
            c: in_c,
            h: k,
            w: k,
        },
        fan_in: in_c * k * k,
        zero: false,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: Shape {
            n: 1,
            c: out_c,
            h: 1,
            w: 1,
        },
        fan_in: 0,
        zero: true,
    });
}

/// Every trainable parameter of the wired graph, in declaration order.
fn param_specs(config: &ArchConfig) -> Vec<ParamSpec> {
    let w = widths(config);
    let mut specs = Vec::new();

    // Encoder stem + four downsampled blocks (enc2..enc4, bottleneck).
    conv_spec("enc1.conv1", w.level[0], config.in_channels, 3, &mut specs);
    conv_spec("enc1.conv2", w.level[0], w.level[0], 3, &mut specs);
    for i in 1..5 {
        let name = if i == 4 {
            "bottleneck".to_string()
        } else {
            format!("enc{}", i + 1)
        };
        conv_spec(&format!("{name}.conv1"), w.level[i], w.enc_out[i - 1], 3, &mut specs);
        conv_spec(&format!("{name}.conv2"), w.level[i], w.level[i], 3, &mut specs);
    }

    // Residual skip paths: skip_block_counts[i] blocks at the encoder output
    // width of level i+1 (shallowest level carries the most blocks).
    if config.use_residual_skips {
        for i in 0..DEPTH {
            let c = w.enc_out[i];
            for b in 0..config.skip_block_counts[i] {
                conv_spec(&format!("skip{}.block{}.conv", i + 1, b + 1), c, c, 3, &mut specs);
            }
        }
    }

    // Decoder levels, deepest first at build time; names carry the level.
    let mut below = w.enc_out[4];
    for i in (0..DEPTH).rev() {
        let name = format!("dec{}", i + 1);
        let c = w.level[i];
        specs.push(ParamSpec {
            name: format!("{name}.up.weight"),
            shape: Shape {
                n: below,
                c,
                h: 2,
                w: 2,
            },
            fan_in: below * 4,
            zero: false,
        });
        specs.push(ParamSpec {
            name: format!("{name}.up.bias"),
            shape: Shape {
                n: 1,
                c,
                h: 1,
                w: 1,
            },
            fan_in: 0,
            zero: true,
        });
        conv_spec(&format!("{name}.conv1"), c, w.enc_out[i] + c, 3, &mut specs);
        conv_spec(&format!("{name}.conv2"), c, c, 3, &mut specs);
        if config.use_attention_decoders {
            let h = attention_hidden(c);
            conv_spec(&format!("{name}.att.mlp1"), h, c, 1, &mut specs);
            conv_spec(&format!("{name}.att.mlp2"), c, h, 1, &mut specs);
            specs.push(ParamSpec {
                name: format!("{name}.att.spatial.weight"),
                shape: Shape {
                    n: 1,
                    c: 2,
                    h: 7,
                    w: 7,
                },
                fan_in: 2 * 49,
                zero: false,
            });
        }
        below = c;
    }

    conv_spec("head", config.out_channels, w.level[0], 1, &mut specs);
    specs
}

/// The assembled network: config plus named parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ArchConfig,
    pub params: ParamSet<T>,
}

use crate::util::derive_seed;

/// Builds a model with fan-in-scaled uniform weights (bound
/// `sqrt(6 / fan_in)`) and zero biases. Each parameter draws from its own
/// generator keyed on `(seed, name)`, so initialization is deterministic and
/// independent of which toggles are enabled.
pub fn build_model<T: Scalar>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamSet::new();
    for spec in param_specs(config) {
        let data = if spec.zero {
            vec![T::ZERO; spec.shape.numel()]
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
            (0..spec.shape.numel())
                .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                .collect()
        };
        params.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Total number of trainable scalar values.
pub fn param_count<T: Scalar>(model: &Model<T>) -> usize {
    model.params.count_values()
}

// ── building blocks ─────────────────────────────────────────────────────

pub fn conv_relu<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let y = tape.conv2d(x, w, Some(b), 1, 1)?;
    Ok(tape.relu(y))
}

/// Encoder feature extraction. With the residual toggle the input is
/// concatenated onto the second convolution's output (the input occupies
/// the leading channels); without it this is a plain double convolution.
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    conv1: (TensorId, TensorId),
    conv2: (TensorId, TensorId),
    residual: bool,
) -> Result<TensorId> {
    let a = conv_relu(tape, x, conv1.0, conv1.1)?;
    let b = conv_relu(tape, a, conv2.0, conv2.1)?;
    if residual {
        tape.concat_channels(x, b)
    } else {
        Ok(b)
    }
}

/// One residual unit `y = relu(relu(conv(x)) + x)`; the shortcut is the
/// identity because the path preserves its channel count.
pub fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let f = conv_relu(tape, x, w, b)?;
    let s = tape.add(f, x)?;
    Ok(tape.relu(s))
}

/// Chain of residual units applied to a skip feature before concatenation.
pub fn residual_block_path<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    blocks: &[(TensorId, TensorId)],
) -> Result<TensorId> {
    if blocks.is_empty() {
        return Err(Error::NoBlocks(0));
    }
    let mut cur = x;
    for (w, b) in blocks {
        cur = residual_block(tape, cur, *w, *b)?;
    }
    Ok(cur)
}

/// Spatial attention weights `sigmoid(channel_mean + channel_max)`, one
/// value per pixel location, in (0, 1).
pub fn spatial_attention<T: Scalar>(tape: &mut Tape<T>, f: TensorId) -> Result<TensorId> {
    let avg = tape.reduce(f, Axis::Channel, ReduceKind::Mean);
    let max = tape.reduce(f, Axis::Channel, ReduceKind::Max);
    let s = tape.add(avg, max)?;
    Ok(tape.sigmoid(s))
}

/// Channel attention weights `sigmoid(spatial_mean + spatial_max)`, one
/// value per channel, in (0, 1).
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, f: TensorId) -> Result<TensorId> {
    let avg = tape.reduce(f, Axis::Spatial, ReduceKind::Mean);
    let max = tape.reduce(f, Axis::Spatial, ReduceKind::Max);
    let s = tape.add(avg, max)?;
    Ok(tape.sigmoid(s))
}

/// Pooling-only refinement: spatial gate, then channel gate on the spatially
/// gated feature. Both gate families lie in (0, 1), so no element grows in
/// magnitude or flips sign.
pub fn attention_refine<T: Scalar>(tape: &mut Tape<T>, f: TensorId) -> Result<TensorId> {
    let w_spa = spatial_attention(tape, f)?;
    let f1 = tape.mul(f, w_spa)?;
    let w_ch = channel_attention(tape, f1)?;
    tape.mul(f1, w_ch)
}

/// Learned attention parameters for one decoder level: a shared
/// channel-descriptor projection (two 1x1 convolutions around a ReLU) and a
/// 7x7 convolution over the two pooled spatial maps.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub mlp1: (TensorId, TensorId),
    pub mlp2: (TensorId, TensorId),
    pub spatial_w: TensorId,
}

/// Learned refinement with the same spatial-then-channel structure as
/// [`attention_refine`]: pooled descriptors pass through learned projections
/// before the sigmoid, all gates stay in (0, 1).
pub fn attention_gate<T: Scalar>(
    tape: &mut Tape<T>,
    f: TensorId,
    p: &AttentionParams,
) -> Result<TensorId> {
    let avg_s = tape.reduce(f, Axis::Channel, ReduceKind::Mean);
    let max_s = tape.reduce(f, Axis::Channel, ReduceKind::Max);
    let cat = tape.concat_channels(avg_s, max_s)?;
    let sp = tape.conv2d(cat, p.spatial_w, None, 1, 3)?;
    let w_spa = tape.sigmoid(sp);
    let f1 = tape.mul(f, w_spa)?;

    let mlp = |tape: &mut Tape<T>, x: TensorId| -> Result<TensorId> {
        let h = tape.conv2d(x, p.mlp1.0, Some(p.mlp1.1), 1, 0)?;
        let h = tape.relu(h);
        tape.conv2d(h, p.mlp2.0, Some(p.mlp2.1), 1, 0)
    };
    let avg_c = tape.reduce(f1, Axis::Spatial, ReduceKind::Mean);
    let max_c = tape.reduce(f1, Axis::Spatial, ReduceKind::Max);
    let pa = mlp(tape, avg_c)?;
    let pm = mlp(tape, max_c)?;
    let s = tape.add(pa, pm)?;
    let w_ch = tape.sigmoid(s);
    tape.mul(f1, w_ch)
}

/// Decoder level: upsample the feature from below, process the skip through
/// its residual path when enabled, concatenate, refine with two
/// convolutions, and optionally apply the attention gate.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    skip: TensorId,
    below: TensorId,
    up: (TensorId, TensorId),
    conv1: (TensorId, TensorId),
    conv2: (TensorId, TensorId),
    skip_path: Option<&[(TensorId, TensorId)]>,
    attention: Option<&AttentionParams>,
) -> Result<TensorId> {
    let s_skip = tape.shape(skip);
    let s_below = tape.shape(below);
    if s_skip.h != 2 * s_below.h || s_skip.w != 2 * s_below.w {
        return Err(Error::ShapeMismatch {
            op: "decoder_block",
            dim: "spatial",
            expected: 2 * s_below.h,
            got: s_skip.h,
        });
    }
    let u = tape.conv_transpose2d(below, up.0, Some(up.1))?;
    let processed = match skip_path {
        Some(blocks) => residual_block_path(tape, skip, blocks)?,
        None => skip,
    };
    let g = tape.concat_channels(processed, u)?;
    let d = conv_relu(tape, g, conv1.0, conv1.1)?;
    let d = conv_relu(tape, d, conv2.0, conv2.1)?;
    match attention {
        Some(p) => attention_gate(tape, d, p),
        None => Ok(d),
    }
}

impl<T: Scalar> Model<T> {
    fn conv_ids(&self, tape: &mut Tape<T>, name: &str) -> Result<(TensorId, TensorId)> {
        let w = tape.param(&format!("{name}.weight"), &self.params)?;
        let b = tape.param(&format!("{name}.bias"), &self.params)?;
        Ok((w, b))
    }

    fn attention_ids(&self, tape: &mut Tape<T>, level: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            mlp1: self.conv_ids(tape, &format!("dec{level}.att.mlp1"))?,
            mlp2: self.conv_ids(tape, &format!("dec{level}.att.mlp2"))?,
            spatial_w: tape.param(&format!("dec{level}.att.spatial.weight"), &self.params)?,
        })
    }

    /// Full forward pass on an already-registered input node. Output holds
    /// per-pixel foreground probabilities in (0, 1).
    pub fn forward(&self, tape: &mut Tape<T>, input: TensorId) -> Result<TensorId> {
        let s = tape.shape(input);
        if s.c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "channels",
                expected: self.config.in_channels,
                got: s.c,
            });
        }
        if s.h % 16 != 0 || s.w % 16 != 0 {
            return Err(Error::NotMultipleOf16 {
                op: "forward",
                h: s.h,
                w: s.w,
            });
        }
        let enc = self.config.use_residual_encoders;

        // Stem level is a plain double convolution; the residual toggle
        // applies to the four blocks that consume downsampled features.
        let c1 = self.conv_ids(tape, "enc1.conv1")?;
        let c2 = self.conv_ids(tape, "enc1.conv2")?;
        let mut skips = Vec::with_capacity(DEPTH);
        let mut cur = encoder_block(tape, input, c1, c2, false)?;
        skips.push(cur);
        for i in 1..5 {
            let name = if i == 4 {
                "bottleneck".to_string()
            } else {
                format!("enc{}", i + 1)
            };
            let pooled = tape.maxpool2(cur)?;
            let c1 = self.conv_ids(tape, &format!("{name}.conv1"))?;
            let c2 = self.conv_ids(tape, &format!("{name}.conv2"))?;
            cur = encoder_block(tape, pooled, c1, c2, enc)?;
            if i < 4 {
                skips.push(cur);
            }
        }

        for i in (0..DEPTH).rev() {
            let level = i + 1;
            let up = self.conv_ids(tape, &format!("dec{level}.up"))?;
            let conv1 = self.conv_ids(tape, &format!("dec{level}.conv1"))?;
            let conv2 = self.conv_ids(tape, &format!("dec{level}.conv2"))?;
            let skip_blocks = if self.config.use_residual_skips {
                let mut blocks = Vec::with_capacity(self.config.skip_block_counts[i]);
                for b in 0..self.config.skip_block_counts[i] {
                    blocks.push(self.conv_ids(tape, &format!("skip{}.block{}.conv", level, b + 1))?);
                }
                Some(blocks)
            } else {
                None
            };
            let attention = if self.config.use_attention_decoders {
                Some(self.attention_ids(tape, level)?)
            } else {
                None
            };
            cur = decoder_block(
                tape,
                skips[i],
                cur,
                up,
                conv1,
                conv2,
                skip_blocks.as_deref(),
                attention.as_ref(),
            )?;
        }

        let head = self.conv_ids(tape, "head")?;
        let logits = tape.conv2d(cur, head.0, Some(head.1), 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Convenience single-tensor inference.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let y = self.forward(&mut tape, x)?;
        Tensor::new(tape.shape(y), tape.value(y).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(Shape::new(n, c, h, w).unwrap(), data).unwrap()
    }

    fn toy_config(enc: bool, skips: bool, att: bool) -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            ..ArchConfig::default()
        }
        .with_toggles(enc, skips, att)
    }

    #[test]
    fn encoder_block_off_zero_weights_gives_zeros() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&rand_tensor(1, 3, 8, 8, 1));
        let w1 = tape.leaf(&Tensor::zeros(Shape::new(6, 3, 3, 3).unwrap()));
        let b1 = tape.leaf(&Tensor::zeros(Shape::new(1, 6, 1, 1).unwrap()));
        let w2 = tape.leaf(&Tensor::zeros(Shape::new(6, 6, 3, 3).unwrap()));
        let b2 = tape.leaf(&Tensor::zeros(Shape::new(1, 6, 1, 1).unwrap()));
        let y = encoder_block(&mut tape, x, (w1, b1), (w2, b2), false).unwrap();
        let s = tape.shape(y);
        assert_eq!((s.c, s.h, s.w), (6, 8, 8));
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_block_residual_keeps_input_in_leading_channels() {
        let mut tape: Tape<f64> = Tape::new();
        let xt = rand_tensor(1, 4, 8, 8, 2);
        let x = tape.leaf(&xt);
        let w1 = tape.leaf(&rand_tensor(8, 4, 3, 3, 3));
        let b1 = tape.leaf(&Tensor::zeros(Shape::new(1, 8, 1, 1).unwrap()));
        let w2 = tape.leaf(&rand_tensor(8, 8, 3, 3, 4));
        let b2 = tape.leaf(&Tensor::zeros(Shape::new(1, 8, 1, 1).unwrap()));
        let y = encoder_block(&mut tape, x, (w1, b1), (w2, b2), true).unwrap();
        assert_eq!(tape.shape(y).c, 12);
        assert_eq!(&tape.value(y)[..4 * 64], tape.value(x));

        // Compositional oracle: conv -> relu -> conv -> relu -> concat.
        let a = tape.conv2d(x, w1, Some(b1), 1, 1).unwrap();
        let a = tape.relu(a);
        let b = tape.conv2d(a, w2, Some(b2), 1, 1).unwrap();
        let b = tape.relu(b);
        let expect = tape.concat_channels(x, b).unwrap();
        assert_eq!(tape.value(y), tape.value(expect));
    }

    #[test]
    fn residual_block_zero_weights_is_relu() {
        let mut tape: Tape<f64> = Tape::new();
        let xt = rand_tensor(1, 2, 4, 4, 5);
        let x = tape.leaf(&xt);
        let w = tape.leaf(&Tensor::zeros(Shape::new(2, 2, 3, 3).unwrap()));
        let b = tape.leaf(&Tensor::zeros(Shape::new(1, 2, 1, 1).unwrap()));
        let y = residual_block(&mut tape, x, w, b).unwrap();
        let expect: Vec<f64> = xt.data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y), &expect);

        // Non-negative input passes through any number of zero-weight blocks.
        let mut pos = xt.clone();
        for v in pos.data.iter_mut() {
            *v = v.abs();
        }
        let xp = tape.leaf(&pos);
        let y = residual_block_path(&mut tape, xp, &[(w, b), (w, b), (w, b)]).unwrap();
        assert_eq!(tape.value(y), &pos.data[..]);
    }

    #[test]
    fn residual_block_matches_hand_composition() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&rand_tensor(1, 2, 4, 4, 6));
        let w = tape.leaf(&rand_tensor(2, 2, 3, 3, 7));
        let b = tape.leaf(&rand_tensor(1, 2, 1, 1, 8));
        let y = residual_block(&mut tape, x, w, b).unwrap();
        let c = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        let r = tape.relu(c);
        let s = tape.add(r, x).unwrap();
        let expect = tape.relu(s);
        assert_eq!(tape.value(y), tape.value(expect));
    }

    #[test]
    fn residual_path_requires_blocks() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&rand_tensor(1, 2, 4, 4, 9));
        assert!(matches!(
            residual_block_path(&mut tape, x, &[]),
            Err(Error::NoBlocks(0))
        ));
    }

    #[test]
    fn spatial_attention_cases() {
        // All zeros -> sigmoid(0) = 0.5 everywhere.
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(&Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap()));
        let w = spatial_attention(&mut tape, z).unwrap();
        assert!(tape.value(w).iter().all(|v| *v == 0.5));

        // Single channel: mean = max = F, so the gate is sigmoid(2F).
        let f = rand_tensor(1, 1, 4, 4, 10);
        let x = tape.leaf(&f);
        let w = spatial_attention(&mut tape, x).unwrap();
        for (got, v) in tape.value(w).iter().zip(&f.data) {
            let expect = 1.0 / (1.0 + (-2.0 * v).exp());
            assert!((got - expect).abs() < 1e-12);
        }

        // Random tensor vs explicit per-pixel loop.
        let f = rand_tensor(1, 3, 4, 4, 11);
        let x = tape.leaf(&f);
        let w = spatial_attention(&mut tape, x).unwrap();
        for i in 0..16 {
            let vals: Vec<f64> = (0..3).map(|c| f.data[c * 16 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = 1.0 / (1.0 + (-(mean + max)).exp());
            assert!((tape.value(w)[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(&Tensor::zeros(Shape::new(1, 4, 3, 3).unwrap()));
        let w = channel_attention(&mut tape, z).unwrap();
        assert!(tape.value(w).iter().all(|v| *v == 0.5));

        // 1x1 spatial extent: mean = max = F.
        let f = rand_tensor(1, 4, 1, 1, 12);
        let x = tape.leaf(&f);
        let w = channel_attention(&mut tape, x).unwrap();
        for (got, v) in tape.value(w).iter().zip(&f.data) {
            let expect = 1.0 / (1.0 + (-2.0 * v).exp());
            assert!((got - expect).abs() < 1e-12);
        }

        let f = rand_tensor(1, 4, 3, 3, 13);
        let x = tape.leaf(&f);
        let w = channel_attention(&mut tape, x).unwrap();
        for c in 0..4 {
            let plane = &f.data[c * 9..(c + 1) * 9];
            let mean = plane.iter().sum::<f64>() / 9.0;
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = 1.0 / (1.0 + (-(mean + max)).exp());
            assert!((tape.value(w)[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_refine_contracts_magnitude_and_keeps_sign() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(&Tensor::zeros(Shape::new(1, 2, 4, 4).unwrap()));
        let out = attention_refine(&mut tape, z).unwrap();
        assert!(tape.value(out).iter().all(|v| *v == 0.0));

        let f = rand_tensor(2, 3, 4, 4, 14);
        let x = tape.leaf(&f);
        let out = attention_refine(&mut tape, x).unwrap();
        for (o, v) in tape.value(out).iter().zip(&f.data) {
            assert!(o.abs() <= v.abs() + 1e-15);
            if *v != 0.0 {
                assert!(o.signum() == v.signum() || *o == 0.0);
            }
        }

        // Large uniform positive value contracts strictly.
        let v = 3.0;
        let big = Tensor::filled(Shape::new(1, 2, 4, 4).unwrap(), v);
        let x = tape.leaf(&big);
        let out = attention_refine(&mut tape, x).unwrap();
        assert!(tape.value(out).iter().all(|o| *o < v && *o > 0.0));
    }

    #[test]
    fn attention_refine_matches_straightline_composition() {
        let mut tape: Tape<f64> = Tape::new();
        let f = rand_tensor(1, 2, 4, 4, 15);
        let x = tape.leaf(&f);
        let got = attention_refine(&mut tape, x).unwrap();
        let ws = spatial_attention(&mut tape, x).unwrap();
        let f1 = tape.mul(x, ws).unwrap();
        let wc = channel_attention(&mut tape, f1).unwrap();
        let expect = tape.mul(f1, wc).unwrap();
        assert_eq!(tape.value(got), tape.value(expect));
    }

    #[test]
    fn decoder_block_zero_weights_outputs_zeros() {
        let mut tape: Tape<f64> = Tape::new();
        let skip = tape.leaf(&rand_tensor(1, 2, 8, 8, 16));
        let below = tape.leaf(&rand_tensor(1, 4, 4, 4, 17));
        let zero = |tape: &mut Tape<f64>, n, c, h, w| {
            tape.leaf(&Tensor::zeros(Shape::new(n, c, h, w).unwrap()))
        };
        let up_w = zero(&mut tape, 4, 2, 2, 2);
        let up_b = zero(&mut tape, 1, 2, 1, 1);
        let c1w = zero(&mut tape, 2, 4, 3, 3);
        let c1b = zero(&mut tape, 1, 2, 1, 1);
        let c2w = zero(&mut tape, 2, 2, 3, 3);
        let c2b = zero(&mut tape, 1, 2, 1, 1);
        let y = decoder_block(
            &mut tape,
            skip,
            below,
            (up_w, up_b),
            (c1w, c1b),
            (c2w, c2b),
            None,
            None,
        )
        .unwrap();
        let s = tape.shape(y);
        assert_eq!((s.c, s.h, s.w), (2, 8, 8));
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_block_rejects_wrong_spatial_ratio() {
        let mut tape: Tape<f64> = Tape::new();
        let skip = tape.leaf(&rand_tensor(1, 2, 8, 8, 18));
        let below = tape.leaf(&rand_tensor(1, 4, 3, 3, 19));
        let w = tape.leaf(&rand_tensor(4, 2, 2, 2, 20));
        let b = tape.leaf(&Tensor::zeros(Shape::new(1, 2, 1, 1).unwrap()));
        let err = decoder_block(&mut tape, skip, below, (w, b), (w, b), (w, b), None, None);
        assert!(err.is_err());
    }

    #[test]
    fn build_is_deterministic_and_forward_shape_preserving() {
        let config = toy_config(true, true, true);
        let m1: Model<f32> = build_model(&config, 99).unwrap();
        let m2: Model<f32> = build_model(&config, 99).unwrap();
        for ((n1, t1), (n2, t2)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data, "parameter {n1} differs across builds");
        }
        let m3: Model<f32> = build_model(&config, 100).unwrap();
        let differs = m1
            .params
            .iter()
            .zip(m3.params.iter())
            .any(|((_, a), (_, b))| a.data != b.data);
        assert!(differs, "different seeds must give different weights");

        let x = rand_tensor(2, 1, 16, 16, 21).cast::<f32>();
        let y = m1.infer(&x).unwrap();
        assert_eq!(
            (y.shape.n, y.shape.c, y.shape.h, y.shape.w),
            (2, 1, 16, 16)
        );
        assert!(y.data.iter().all(|v| *v > 0.0 && *v < 1.0));
        let y2 = m1.infer(&x).unwrap();
        assert_eq!(y.data, y2.data, "forward must be deterministic");
    }

    #[test]
    fn forward_rejects_bad_spatial_size() {
        let m: Model<f32> = build_model(&toy_config(false, false, false), 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 1, 24, 24).unwrap());
        assert!(matches!(
            m.infer(&x),
            Err(Error::NotMultipleOf16 { .. })
        ));
    }

    #[test]
    fn param_count_toy_closed_form() {
        // Hand count at base 1, toggles off (3x3 convs with bias, 2x2
        // up-convolutions with bias, 1x1 head):
        //   enc1: (9+1) + (9+1)                 = 20
        //   enc2: (1*2*9+2) + (2*2*9+2)         = 58
        //   enc3: (2*4*9+4) + (4*4*9+4)         = 224
        //   enc4: (4*8*9+8) + (8*8*9+8)         = 880
        //   bottleneck: (8*16*9+16)+(16*16*9+16)= 3488
        //   dec4: up (16*8*4+8) + (16*8*9+8) + (8*8*9+8)   = 2264
        //   dec3: up (8*4*4+4) + (8*4*9+4) + (4*4*9+4)     = 572
        //   dec2: up (4*2*4+2) + (4*2*9+2) + (2*2*9+2)     = 146
        //   dec1: up (2*1*4+1) + (2*1*9+1) + (1*1*9+1)     = 38
        //   head: 1*1+1                                     = 2
        let config = ArchConfig {
            base_channels: 1,
            ..ArchConfig::default()
        };
        let m: Model<f32> = build_model(&config, 0).unwrap();
        assert_eq!(param_count(&m), 7692);
    }

    #[test]
    fn param_count_toggle_monotonicity() {
        let base = ArchConfig {
            base_channels: 4,
            ..ArchConfig::default()
        };
        let count = |e, s, a| {
            let m: Model<f32> = build_model(&base.clone().with_toggles(e, s, a), 0).unwrap();
            param_count(&m)
        };
        let off = count(false, false, false);
        for (e, s, a) in [(true, false, false), (false, true, false), (false, false, true)] {
            assert!(count(e, s, a) > off, "toggle ({e},{s},{a}) must add parameters");
        }
        // Each single-toggle increment is positive; the all-on increment is
        // the sum of the three plus non-negative interaction terms.
        let inc_e = count(true, false, false) - off;
        let inc_s = count(false, true, false) - off;
        let inc_a = count(false, false, true) - off;
        let inc_all = count(true, true, true) - off;
        assert!(inc_all >= inc_e + inc_s + inc_a);
    }

    #[test]
    fn forward_graph_uses_every_parameter() {
        for (e, s, a) in [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, true),
        ] {
            let m: Model<f64> = build_model(&toy_config(e, s, a), 3).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(&rand_tensor(1, 1, 16, 16, 4));
            let y = m.forward(&mut tape, x).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
            let mut grads = ParamSet::<f64>::new();
            for (name, t) in m.params.iter() {
                grads.insert(name, Tensor::zeros(t.shape));
            }
            tape.grads_into(&mut grads).unwrap();
            for (name, t) in grads.iter() {
                assert!(
                    t.grad.is_some(),
                    "parameter {name} is orphaned under toggles ({e},{s},{a})"
                );
            }
        }
    }

    #[test]
    fn attention_gate_keeps_contraction_invariant() {
        let config = toy_config(false, false, true);
        let m: Model<f64> = build_model(&config, 5).unwrap();
        let mut tape = Tape::new();
        let f = rand_tensor(1, 2, 8, 8, 6);
        let x = tape.leaf(&f);
        let p = m.attention_ids(&mut tape, 1).unwrap();
        let out = attention_gate(&mut tape, x, &p).unwrap();
        for (o, v) in tape.value(out).iter().zip(&f.data) {
            assert!(o.abs() <= v.abs() + 1e-15);
            if *v != 0.0 {
                assert!(o.signum() == v.signum() || *o == 0.0);
            }
        }
    }

    #[test]
    fn small_block_gradients_match_finite_differences() {
        let x = rand_tensor(1, 2, 4, 4, 30);
        let w = rand_tensor(2, 2, 3, 3, 31);
        let b = rand_tensor(1, 2, 1, 1, 32);
        let err = grad_check(
            |tape, ids| residual_block(tape, ids[0], ids[1], ids[2]),
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "residual block gradient error {err}");

        let f = rand_tensor(1, 3, 4, 4, 33);
        let err = grad_check(|tape, ids| attention_refine(tape, ids[0]), &[f], 1e-5).unwrap();
        assert!(err < 1e-4, "attention refine gradient error {err}");
    }
}
