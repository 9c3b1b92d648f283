use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Mode, ParamId, ParamSet, RngStreams, Scalar, Tape, Tensor, Var};

use super::config::{ModelConfig, TapPoint, TapSite, Variant};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

/// One row of the forward shape trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub layer: String,
    pub shape: Vec<usize>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// GAP vectors of each tap, `(N, tap_channels)`, in tap order.
    pub taps: Vec<Var>,
    /// Head input.
    pub features: Var,
    /// Output of the last block of each stage.
    pub stage_outputs: Vec<Var>,
    pub trace: Vec<TraceRow>,
}

/// ResNet-18 style 1-D network with optional multi-scale taps.
pub struct ModelGraph<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    stem: (Conv, Bn),
    blocks: Vec<Block>,
    taps: Vec<(TapSite, Conv)>,
    head_w: ParamId,
    head_b: ParamId,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    streams: &'a RngStreams,
}

impl<T: Scalar> Builder<'_, T> {
    /// Uniform in +-gain*sqrt(3/fan_in), from a stream keyed by the name.
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let mut rng = self.streams.stream(&format!("init/{name}"), 0);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.params.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, gain: f64) -> Result<Conv> {
        let w = self.uniform(&format!("{name}.weight"), &[cout, cin, k], cin * k, gain)?;
        let b = match bias {
            true => Some(self.params.add(&format!("{name}.bias"), Tensor::zeros(&[cout]), true)?),
            false => None,
        };
        Ok(Conv { w, b, stride, pad: k / 2 })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self.params.add(&format!("{name}.gamma"), Tensor::full(&[c], T::one()), true)?,
            beta: self.params.add(&format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
            mean: self.params.add(&format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?,
            var: self.params.add(&format!("{name}.running_var"), Tensor::full(&[c], T::one()), false)?,
        })
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl<T: Scalar> ModelGraph<T> {
    /// Deterministic construction; every tensor draws from its own named
    /// stream, so both variants share identical backbone weights per seed.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let streams = RngStreams::new(seed);
        let mut b = Builder { params: ParamSet::new(), streams: &streams };

        let stem_conv = b.conv("stem.conv", cfg.in_leads, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, false, RELU_GAIN)?;
        let stem_bn = b.bn("stem.bn", cfg.stem_channels)?;

        let k = cfg.block_kernel;
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &nblocks)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for j in 0..nblocks {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                let name = format!("s{}.b{}", s + 1, j);
                let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, k, stride, false, RELU_GAIN)?;
                let bn1 = b.bn(&format!("{name}.bn1"), cout)?;
                let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, k, 1, false, RELU_GAIN)?;
                let bn2 = b.bn(&format!("{name}.bn2"), cout)?;
                let down = if stride != 1 || cin != cout {
                    let c = b.conv(&format!("{name}.down.conv"), cin, cout, 1, stride, false, RELU_GAIN)?;
                    Some((c, b.bn(&format!("{name}.down.bn"), cout)?))
                } else {
                    None
                };
                blocks.push(Block { name, conv1, bn1, conv2, bn2, down });
                cin = cout;
            }
        }

        let widths = block_widths(cfg);
        let mut taps = Vec::new();
        for (i, site) in cfg.tap_sites().into_iter().enumerate() {
            let conv = b.conv(&format!("tap{i}.conv"), widths[site.block], cfg.tap_channels, 1, 1, true, 1.0)?;
            taps.push((site, conv));
        }

        let fin = cfg.head_inputs();
        let head_w = b.uniform("head.weight", &[cfg.num_classes, fin], fin, 1.0)?;
        let head_b = b.params.add("head.bias", Tensor::zeros(&[cfg.num_classes]), true)?;

        let model = Self {
            cfg: cfg.clone(),
            params: b.params,
            stem: (stem_conv, stem_bn),
            blocks,
            taps,
            head_w,
            head_b,
        };
        log::debug!(
            "built {} model: {} trainable parameters, {} taps",
            cfg.variant,
            model.num_parameters(),
            model.taps.len()
        );
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Trainable scalar count.
    pub fn num_parameters(&self) -> usize {
        self.params.entries().iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, c: Conv) -> Result<Var> {
        let w = tape.param(&self.params, c.w);
        let b = c.b.map(|b| tape.param(&self.params, b));
        tape.conv1d(x, w, b, c.stride, c.pad)
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, bn: Bn, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.params, bn.gamma);
        let b = tape.param(&self.params, bn.beta);
        let (mean, var) = self.params.pair_mut(bn.mean, bn.var);
        tape.batchnorm1d(x, g, b, BnStats { mean, var }, mode)
    }

    /// Runs the network on `x: (N, in_leads, L)`.
    ///
    /// In train mode with `N == 1` batch norm falls back to running
    /// statistics; dropout stays active.
    pub fn forward<R: Rng>(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.in_leads {
            return Err(Error::ShapeMismatch(format!(
                "model expects (N, {}, L), got {shape:?}",
                self.cfg.in_leads
            )));
        }
        let bn_mode = if mode == Mode::Train && shape[0] == 1 { Mode::Eval } else { mode };
        let mut trace = Vec::new();
        let mut record = |tape: &Tape<T>, name: &str, v: Var| {
            trace.push(TraceRow { layer: name.to_string(), shape: tape.value(v).shape().to_vec() });
        };

        let (sc, sb) = self.stem;
        let h = self.conv(tape, x, sc)?;
        record(tape, "stem.conv", h);
        let h = self.bn(tape, h, sb, bn_mode)?;
        let h = tape.relu(h)?;
        let mut h = tape.maxpool1d(h, 3, 2, 1)?;
        record(tape, "stem.pool", h);

        let mut tapped: Vec<Option<Var>> = vec![None; self.taps.len()];
        let mut stage_outputs = Vec::new();
        let mut block_index = 0;
        for nblocks in self.cfg.blocks_per_stage.clone() {
            for _ in 0..nblocks {
                let blk = self.blocks[block_index].clone();
                let a = self.conv(tape, h, blk.conv1)?;
                let a = self.bn(tape, a, blk.bn1, bn_mode)?;
                let a = tape.relu(a)?;
                record(tape, &format!("{}.conv1", blk.name), a);
                self.run_taps(tape, block_index, TapPoint::Conv1, a, mode, rng, &mut tapped)?;

                let o = self.conv(tape, a, blk.conv2)?;
                let o = self.bn(tape, o, blk.bn2, bn_mode)?;
                let short = match blk.down {
                    Some((c, b)) => {
                        let s = self.conv(tape, h, c)?;
                        self.bn(tape, s, b, bn_mode)?
                    }
                    None => h,
                };
                let o = tape.add(o, short)?;
                h = tape.relu(o)?;
                record(tape, &format!("{}.conv2", blk.name), h);
                self.run_taps(tape, block_index, TapPoint::Conv2, h, mode, rng, &mut tapped)?;
                block_index += 1;
            }
            stage_outputs.push(h);
        }

        let taps: Vec<Var> = tapped.into_iter().map(|t| t.expect("every tap site visited")).collect();
        for (i, &t) in taps.iter().enumerate() {
            record(tape, &format!("tap{i}"), t);
        }
        let features = match self.cfg.variant {
            Variant::MultiScale => tape.concat(&taps)?,
            Variant::Baseline => tape.global_avg_pool(h)?,
        };
        record(tape, "features", features);
        let w = tape.param(&self.params, self.head_w);
        let b = tape.param(&self.params, self.head_b);
        let logits = tape.dense(features, w, b)?;
        record(tape, "head", logits);
        Ok(ForwardOutput { logits, taps, features, stage_outputs, trace })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_taps<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        block: usize,
        point: TapPoint,
        h: Var,
        mode: Mode,
        rng: &mut R,
        out: &mut [Option<Var>],
    ) -> Result<()> {
        for (i, &(site, conv)) in self.taps.iter().enumerate() {
            if site.block == block && site.point == point {
                let p = self.conv(tape, h, conv)?;
                let p = tape.spatial_dropout(p, self.cfg.dropout_rate, mode, rng)?;
                out[i] = Some(tape.global_avg_pool(p)?);
            }
        }
        Ok(())
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // eval mode draws nothing from the generator
        let mut rng = RngStreams::new(0).stream("unused", 0);
        let out = self.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Output width of every block in forward order.
fn block_widths(cfg: &ModelConfig) -> Vec<usize> {
    cfg.stage_channels
        .iter()
        .zip(&cfg.blocks_per_stage)
        .flat_map(|(&c, &n)| std::iter::repeat_n(c, n))
        .collect()
}
