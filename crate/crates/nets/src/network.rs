//! IntrinsicNet (one encoder, two decoders) and the RetiNet stage-2 chain.

use intrinsic_autodiff::{Graph, Mode, Var};
use intrinsic_core::rng::stream;

use crate::config::{IntrinsicNetConfig, SkipMode, Stage2Config};
use crate::layers::{Bn, Builder, Conv, Deconv, Init, ParamStore, Pass};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    convs: Vec<(Conv, Bn)>,
    down: (Conv, Bn),
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    up: (Deconv, Bn),
    /// Encoder block whose activation is merged after upsampling.
    skip_from: Option<usize>,
    convs: Vec<(Conv, Bn)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    stages: Vec<DecoderStage>,
    out: Conv,
}

/// Shared encoder with two decoders. For each encoder block the activation
/// before the stride-2 downsampling conv feeds the decoder stage of the same
/// resolution, except for the deepest block.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicNet {
    pub config: IntrinsicNetConfig,
    pub store: ParamStore,
    encoder: Vec<EncoderBlock>,
    decoders: [Decoder; 2],
}

pub const DECODER_NAMES: [&str; 2] = ["reflectance", "shading"];

impl IntrinsicNet {
    /// Builds the network with weights drawn from the `init` stream of `seed`
    /// (`stream_index` separates networks sharing a seed).
    pub fn new(config: IntrinsicNetConfig, seed: u64, stream_index: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = stream(seed, "init", &[stream_index]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let widths = &config.block_widths;
        let depth = widths.len();
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = config.input_channels;
        for (i, &w) in widths.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..config.convs_per_block {
                let name = format!("enc.{i}.conv{j}");
                convs.push((b.conv(&name, cin, w, 1), b.bn(&format!("{name}.bn"), w)));
                cin = w;
            }
            let name = format!("enc.{i}.down");
            let down = (b.conv(&name, w, w, 2), b.bn(&format!("{name}.bn"), w));
            encoder.push(EncoderBlock { convs, down });
        }
        let deconv_init = if config.paper_faithful_init {
            Init::StandardNormal
        } else {
            Init::He
        };
        let build_decoder = |tag: &str, b: &mut Builder| {
            let mut stages = Vec::with_capacity(depth);
            let mut cin = widths[depth - 1];
            for i in (0..depth).rev() {
                let w = widths[i];
                let name = format!("dec.{tag}.{i}");
                let up = (
                    b.deconv(&format!("{name}.up"), cin, w, deconv_init),
                    b.bn(&format!("{name}.up.bn"), w),
                );
                let skip_from = (i != depth - 1).then_some(i);
                let mut c = match (skip_from, config.skip) {
                    (Some(_), SkipMode::Concat) => 2 * w,
                    _ => w,
                };
                let mut convs = Vec::new();
                for j in 0..config.convs_per_block {
                    let cname = format!("{name}.conv{j}");
                    convs.push((b.conv(&cname, c, w, 1), b.bn(&format!("{cname}.bn"), w)));
                    c = w;
                }
                stages.push(DecoderStage { up, skip_from, convs });
                cin = w;
            }
            let out = b.conv(&format!("dec.{tag}.out"), widths[0], config.output_channels, 1);
            Decoder { stages, out }
        };
        let decoders = [build_decoder("r", &mut b), build_decoder("s", &mut b)];
        Ok(IntrinsicNet {
            config,
            store,
            encoder,
            decoders,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Runs both decoders on `x` (`N × input_channels × H × W`, extents
    /// divisible by `2^depth`).
    pub fn forward(&mut self, g: &mut Graph<f32>, bound: &crate::layers::Bound, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = g.shape(x);
        let m = self.config.size_multiple();
        if s.c() != self.config.input_channels {
            return Err(Error::Config(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels,
                s.c()
            )));
        }
        if s.h() % m != 0 || s.w() % m != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not a multiple of {m}; pad it first",
                s.h(),
                s.w()
            )));
        }
        let mut pass = Pass {
            g,
            bound,
            bn: &mut self.store.bn,
            mode,
        };
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            for &(c, b) in &block.convs {
                h = pass.conv_bn_relu(c, b, h)?;
            }
            skips.push(h);
            h = pass.conv_bn_relu(block.down.0, block.down.1, h)?;
        }
        let bottleneck = h;
        let mut outs = [bottleneck; 2];
        for (d, dec) in self.decoders.iter().enumerate() {
            let mut h = bottleneck;
            for stage in &dec.stages {
                h = pass.deconv(stage.up.0, h)?;
                h = pass.bn(stage.up.1, h)?;
                h = pass.g.relu(h);
                if let Some(i) = stage.skip_from {
                    h = match self.config.skip {
                        SkipMode::Concat => pass.g.concat_c(&[h, skips[i]])?,
                        SkipMode::Add => pass.g.add(h, skips[i])?,
                    };
                }
                for &(c, b) in &stage.convs {
                    h = pass.conv_bn_relu(c, b, h)?;
                }
            }
            outs[d] = pass.conv(dec.out, h)?;
        }
        Ok((outs[0], outs[1]))
    }
}

/// Stride-1 chain of 3×3 convolutions with ReLU, mapping image plus
/// intrinsic gradients to reflectance and shading.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Net {
    pub config: Stage2Config,
    pub store: ParamStore,
    layers: Vec<(Conv, Option<Bn>)>,
    out: Conv,
}

impl Stage2Net {
    pub fn new(config: Stage2Config, seed: u64, stream_index: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = stream(seed, "init", &[stream_index]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let mut cin = config.input_channels;
        let mut layers = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let name = format!("s2.{i}");
            let conv = b.conv(&name, cin, w, 1);
            let bn = config.batch_norm.then(|| b.bn(&format!("{name}.bn"), w));
            layers.push((conv, bn));
            cin = w;
        }
        let out = b.conv("s2.out", cin, config.output_channels, 1);
        Ok(Stage2Net {
            config,
            store,
            layers,
            out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Returns `(reflectance, shading)`, three channels each.
    pub fn forward(&mut self, g: &mut Graph<f32>, bound: &crate::layers::Bound, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let c = g.shape(x).c();
        if c != self.config.input_channels {
            return Err(Error::Config(format!(
                "stage 2 expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let mut pass = Pass {
            g,
            bound,
            bn: &mut self.store.bn,
            mode,
        };
        let mut h = x;
        for &(conv, bn) in &self.layers {
            h = pass.conv(conv, h)?;
            if let Some(bn) = bn {
                h = pass.bn(bn, h)?;
            }
            h = pass.g.relu(h);
        }
        let y = pass.conv(self.out, h)?;
        let r = pass.g.slice_c(y, 0, 3)?;
        let s = pass.g.slice_c(y, 3, 3)?;
        Ok((r, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use intrinsic_autodiff::{Shape, Tensor};

    #[test]
    fn desk_shapes() {
        let mut net = IntrinsicNet::new(IntrinsicNetConfig::desk(), 1, 0).unwrap();
        let mut g = Graph::new();
        let bound = net.store.bind(&mut g, false);
        let x = g.input(Tensor::zeros(Shape::new(2, 3, 32, 32)));
        let (r, s) = net.forward(&mut g, &bound, x, Mode::Train).unwrap();
        assert_eq!(g.shape(r), Shape::new(2, 3, 32, 32));
        assert_eq!(g.shape(s), Shape::new(2, 3, 32, 32));
        assert!(g.value(r).is_finite() && g.value(s).is_finite());
    }

    #[test]
    fn rejects_unpadded_input() {
        let mut net = IntrinsicNet::new(IntrinsicNetConfig::desk(), 1, 0).unwrap();
        let mut g = Graph::new();
        let bound = net.store.bind(&mut g, false);
        let x = g.input(Tensor::zeros(Shape::new(1, 3, 30, 32)));
        assert!(matches!(net.forward(&mut g, &bound, x, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn full_size_stage2_parameter_count() {
        let net = Stage2Net::new(Stage2Config::paper(), 0, 0).unwrap();
        let weights = 9 * (9 * 64 + 64 * 128 + 128 * 128 + 128 * 64 + 64 * 6);
        let biases = 64 + 128 + 128 + 64 + 6;
        assert_eq!(weights, 303_552);
        assert_eq!(biases, 390);
        assert_eq!(net.param_count(), 303_942);
    }

    #[test]
    fn additive_skips_build_and_run() {
        let mut cfg = IntrinsicNetConfig::desk();
        cfg.skip = SkipMode::Add;
        let mut net = IntrinsicNet::new(cfg, 3, 0).unwrap();
        let mut g = Graph::new();
        let bound = net.store.bind(&mut g, false);
        let x = g.input(Tensor::filled(Shape::new(1, 3, 16, 16), 0.5));
        let (r, _) = net.forward(&mut g, &bound, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(r), Shape::new(1, 3, 16, 16));
    }
}
