//! Dilated residual TCN encoder with squeeze-and-excitation gating, global
//! average pooling, and the MLP projection head.
//!
//! ```text
//! x[2,T] -> conv(K_stem) -> BN -> ReLU
//!        -> 6 x [ conv(K, d) -> BN -> ReLU -> conv(K, d) -> BN -> SE ] + skip -> ReLU
//!        -> GAP -> h[d_h]
//! h -> Linear -> ReLU -> Linear -> z[d_z]
//! ```
//!
//! The skip path is the identity when widths agree and a 1x1 convolution
//! otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{BatchNormMode, BatchStats, ExecMode, Graph, NumError, Scalar, Tensor, Var};
use crate::rng::{substream, Domain};

pub const NUM_BLOCKS: usize = 6;
/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("non-finite input signal at element {0}")]
    NonFiniteInput(usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub channel_plan: Vec<usize>,
    pub kernel_size: usize,
    pub dilation_plan: Vec<usize>,
    pub se_reduction: usize,
    /// Representation width; equals the last entry of `channel_plan`.
    pub d_h: usize,
    pub proj_hidden: usize,
    pub d_z: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_width: 64,
            stem_kernel: 7,
            channel_plan: vec![64, 64, 128, 128, 256, 512],
            kernel_size: 3,
            dilation_plan: vec![1, 2, 4, 8, 16, 32],
            se_reduction: 16,
            d_h: 512,
            proj_hidden: 512,
            d_z: 128,
        }
    }
}

impl EncoderConfig {
    /// Uniform width `w` everywhere; used for small experiments and tests.
    pub fn uniform(width: usize) -> Self {
        Self {
            stem_width: width,
            stem_kernel: 3,
            channel_plan: vec![width; NUM_BLOCKS],
            kernel_size: 3,
            dilation_plan: vec![1, 2, 4, 8, 16, 32],
            se_reduction: 4,
            d_h: width,
            proj_hidden: width,
            d_z: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.channel_plan.len() != NUM_BLOCKS || self.dilation_plan.len() != NUM_BLOCKS {
            return err(format!(
                "channel_plan and dilation_plan need {NUM_BLOCKS} entries, got {} and {}",
                self.channel_plan.len(),
                self.dilation_plan.len()
            ));
        }
        if self.kernel_size % 2 == 0 || self.stem_kernel % 2 == 0 {
            return err("kernel sizes must be odd".into());
        }
        if self.channel_plan.iter().chain([&self.stem_width]).any(|c| *c == 0)
            || self.dilation_plan.contains(&0)
            || self.se_reduction == 0
            || self.proj_hidden == 0
            || self.d_z == 0
        {
            return err("widths, dilations and se_reduction must be positive".into());
        }
        if self.channel_plan[NUM_BLOCKS - 1] != self.d_h {
            return err(format!(
                "d_h = {} must equal the last channel width {}",
                self.d_h,
                self.channel_plan[NUM_BLOCKS - 1]
            ));
        }
        Ok(())
    }

    pub fn se_width(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }

    /// Input widths of the six blocks.
    fn block_inputs(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.stem_width).chain(self.channel_plan.iter().copied().take(NUM_BLOCKS - 1))
    }

    /// Samples seen by one output position (stem plus two convs per block).
    pub fn receptive_field(&self) -> usize {
        let k = self.kernel_size - 1;
        1 + (self.stem_kernel - 1) + self.dilation_plan.iter().map(|d| 2 * k * d).sum::<usize>()
    }

    /// Key-value text used in checkpoint headers.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        vec![
            ("stem_width".into(), self.stem_width.to_string()),
            ("stem_kernel".into(), self.stem_kernel.to_string()),
            ("channel_plan".into(), list(&self.channel_plan)),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("dilation_plan".into(), list(&self.dilation_plan)),
            ("se_reduction".into(), self.se_reduction.to_string()),
            ("d_h".into(), self.d_h.to_string()),
            ("proj_hidden".into(), self.proj_hidden.to_string()),
            ("d_z".into(), self.d_z.to_string()),
        ]
    }

    pub fn from_kv<'a>(lookup: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        let get = |k: &str| lookup(k).ok_or_else(|| EncoderError::Config(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .trim()
                .parse()
                .map_err(|_| EncoderError::Config(format!("`{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| EncoderError::Config(format!("bad entry in `{k}`"))))
                .collect()
        };
        let cfg = Self {
            stem_width: num("stem_width")?,
            stem_kernel: num("stem_kernel")?,
            channel_plan: list("channel_plan")?,
            kernel_size: num("kernel_size")?,
            dilation_plan: list("dilation_plan")?,
            se_reduction: num("se_reduction")?,
            d_h: num("d_h")?,
            proj_hidden: num("proj_hidden")?,
            d_z: num("d_z")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact number of learnable scalars for `config`.
pub fn param_count(config: &EncoderConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k + cout;
    let k = config.kernel_size;
    let mut total = conv(2, config.stem_width, config.stem_kernel) + 2 * config.stem_width;
    for (cin, &cout) in config.block_inputs().zip(&config.channel_plan) {
        total += conv(cin, cout, k) + conv(cout, cout, k) + 4 * cout;
        total += 2 * cout * config.se_width(cout);
        if cin != cout {
            total += conv(cin, cout, 1);
        }
    }
    total += config.d_h * config.proj_hidden + config.proj_hidden;
    total += config.proj_hidden * config.d_z + config.d_z;
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: ConvLayer<T>,
    pub norm1: NormLayer<T>,
    pub conv2: ConvLayer<T>,
    pub norm2: NormLayer<T>,
    /// `[C/r, C]`
    pub se_squeeze: T,
    /// `[C, C/r]`
    pub se_excite: T,
    pub skip: Option<ConvLayer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub hidden: ConvLayer<T>,
    pub output: ConvLayer<T>,
}

/// The learnable tree; `T` is a tensor for stored weights or a graph
/// variable once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers<T> {
    pub stem: ConvLayer<T>,
    pub stem_norm: NormLayer<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub head: ProjectionHead<T>,
}

impl<T> Layers<T> {
    /// Visits every learnable in a fixed order with a dotted name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        let conv = |f: &mut dyn FnMut(String, &'a T), p: &str, c: &'a ConvLayer<T>| {
            f(format!("{p}.weight"), &c.weight);
            f(format!("{p}.bias"), &c.bias);
        };
        let norm = |f: &mut dyn FnMut(String, &'a T), p: &str, n: &'a NormLayer<T>| {
            f(format!("{p}.gamma"), &n.gamma);
            f(format!("{p}.beta"), &n.beta);
        };
        conv(&mut f, "stem.conv", &self.stem);
        norm(&mut f, "stem.norm", &self.stem_norm);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            conv(&mut f, &format!("{p}.conv1"), &b.conv1);
            norm(&mut f, &format!("{p}.norm1"), &b.norm1);
            conv(&mut f, &format!("{p}.conv2"), &b.conv2);
            norm(&mut f, &format!("{p}.norm2"), &b.norm2);
            f(format!("{p}.se.squeeze"), &b.se_squeeze);
            f(format!("{p}.se.excite"), &b.se_excite);
            if let Some(s) = &b.skip {
                conv(&mut f, &format!("{p}.skip"), s);
            }
        }
        conv(&mut f, "head.hidden", &self.head.hidden);
        conv(&mut f, "head.output", &self.head.output);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    /// Mutable references in [`Layers::visit`] order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        let Layers {
            stem,
            stem_norm,
            blocks,
            head,
        } = self;
        out.extend([&mut stem.weight, &mut stem.bias, &mut stem_norm.gamma, &mut stem_norm.beta]);
        for b in blocks {
            out.extend([
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.norm1.gamma,
                &mut b.norm1.beta,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
                &mut b.norm2.gamma,
                &mut b.norm2.beta,
                &mut b.se_squeeze,
                &mut b.se_excite,
            ]);
            if let Some(s) = &mut b.skip {
                out.extend([&mut s.weight, &mut s.bias]);
            }
        }
        out.extend([
            &mut head.hidden.weight,
            &mut head.hidden.bias,
            &mut head.output.weight,
            &mut head.output.bias,
        ]);
        out
    }

    /// Same tree with every leaf transformed, in [`Layers::visit`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Layers<U> {
        let stem = map_conv(&self.stem, &mut f);
        let stem_norm = map_norm(&self.stem_norm, &mut f);
        let blocks = self
            .blocks
            .iter()
            .map(|b| ResBlock {
                conv1: map_conv(&b.conv1, &mut f),
                norm1: map_norm(&b.norm1, &mut f),
                conv2: map_conv(&b.conv2, &mut f),
                norm2: map_norm(&b.norm2, &mut f),
                se_squeeze: f(&b.se_squeeze),
                se_excite: f(&b.se_excite),
                skip: b.skip.as_ref().map(|s| map_conv(s, &mut f)),
            })
            .collect();
        let head = ProjectionHead {
            hidden: map_conv(&self.head.hidden, &mut f),
            output: map_conv(&self.head.output, &mut f),
        };
        Layers {
            stem,
            stem_norm,
            blocks,
            head,
        }
    }
}

fn map_conv<T, U>(c: &ConvLayer<T>, f: &mut impl FnMut(&T) -> U) -> ConvLayer<U> {
    ConvLayer {
        weight: f(&c.weight),
        bias: f(&c.bias),
    }
}

fn map_norm<T, U>(n: &NormLayer<T>, f: &mut impl FnMut(&T) -> U) -> NormLayer<U> {
    NormLayer {
        gamma: f(&n.gamma),
        beta: f(&n.beta),
    }
}

/// Running mean and unbiased variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> RunningStats<S> {
    fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], S::one()),
        }
    }

    fn update(&mut self, batch: &BatchStats<S>) {
        let m = S::from_f64_lossy(NORM_MOMENTUM);
        let keep = S::one() - m;
        for (r, b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = keep * *r + m * *b;
        }
    }
}

/// Whether normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights of the encoder and projection head plus normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub config: EncoderConfig,
    pub layers: Layers<Tensor<S>>,
    /// Stem first, then `norm1`, `norm2` of each block.
    pub running: Vec<RunningStats<S>>,
}

fn uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl<S: Scalar> EncoderParams<S> {
    /// Fan-in scaled uniform weights, zero biases, unit normalization gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, Domain::Init, 0, 0);
        let conv = |cin: usize, cout: usize, k: usize, rng: &mut crate::rng::StreamRng| ConvLayer {
            weight: uniform::<S>(&[cout, cin, k], cin * k, rng),
            bias: Tensor::zeros(&[cout]),
        };
        let norm = |c: usize| NormLayer {
            gamma: Tensor::full(&[c], S::one()),
            beta: Tensor::zeros(&[c]),
        };
        let stem = conv(2, config.stem_width, config.stem_kernel, &mut rng);
        let mut running = vec![RunningStats::new(config.stem_width)];
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for (cin, &cout) in config.block_inputs().zip(&config.channel_plan) {
            let r = config.se_width(cout);
            blocks.push(ResBlock {
                conv1: conv(cin, cout, config.kernel_size, &mut rng),
                norm1: norm(cout),
                conv2: conv(cout, cout, config.kernel_size, &mut rng),
                norm2: norm(cout),
                se_squeeze: uniform(&[r, cout], cout, &mut rng),
                se_excite: uniform(&[cout, r], r, &mut rng),
                skip: (cin != cout).then(|| conv(cin, cout, 1, &mut rng)),
            });
            running.push(RunningStats::new(cout));
            running.push(RunningStats::new(cout));
        }
        let linear = |fan_in: usize, fan_out: usize, rng: &mut crate::rng::StreamRng| ConvLayer {
            weight: uniform::<S>(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
        };
        let head = ProjectionHead {
            hidden: linear(config.d_h, config.proj_hidden, &mut rng),
            output: linear(config.proj_hidden, config.d_z, &mut rng),
        };
        Ok(Self {
            config: config.clone(),
            layers: Layers {
                stem,
                stem_norm: norm(config.stem_width),
                blocks,
                head,
            },
            running,
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.layers.visit(|_, t| n += t.len());
        n
    }

    /// Registers every learnable as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> Layers<Var> {
        self.layers.map(|t| graph.param(t.clone()))
    }

    /// Registers every learnable as a constant of `graph`.
    pub fn bind_frozen(&self, graph: &mut Graph<S>) -> Layers<Var> {
        self.layers.map(|t| graph.constant(t.clone()))
    }

    /// Runs `f` on the representation `h` of a `[B,2,T]` (or `[2,T]`)
    /// input. In train mode the batch statistics of every normalization
    /// layer are returned in `running` order.
    pub fn forward(
        &self,
        graph: &mut Graph<S>,
        vars: &Layers<Var>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<S>>)> {
        let mut stats = Vec::new();
        let mut norm_idx = 0;
        let mut normalize = |g: &mut Graph<S>, v: Var, n: &NormLayer<Var>| -> Result<Var> {
            let r = &self.running[norm_idx];
            norm_idx += 1;
            let bn_mode = match mode {
                Mode::Train => BatchNormMode::Train,
                Mode::Eval => BatchNormMode::Eval {
                    running_mean: r.mean.data(),
                    running_var: r.var.data(),
                },
            };
            let (out, s) = g.batchnorm1d(v, n.gamma, n.beta, bn_mode)?;
            stats.extend(s);
            Ok(out)
        };

        let mut h = graph.conv1d_same(x, vars.stem.weight, vars.stem.bias, 1)?;
        h = normalize(graph, h, &vars.stem_norm)?;
        h = graph.relu(h);
        for (block, &dilation) in vars.blocks.iter().zip(&self.config.dilation_plan) {
            let mut y = graph.conv1d_same(h, block.conv1.weight, block.conv1.bias, dilation)?;
            y = normalize(graph, y, &block.norm1)?;
            y = graph.relu(y);
            y = graph.conv1d_same(y, block.conv2.weight, block.conv2.bias, dilation)?;
            y = normalize(graph, y, &block.norm2)?;
            y = se_gate_on_graph(graph, y, block.se_squeeze, block.se_excite)?;
            let skip = match &block.skip {
                Some(s) => graph.conv1d_same(h, s.weight, s.bias, 1)?,
                None => h,
            };
            let sum = graph.add(y, skip)?;
            h = graph.relu(sum);
        }
        let rep = graph.global_avg_pool(h)?;
        Ok((rep, stats))
    }

    /// `z = W2 relu(W1 h + b1) + b2` on `[d_h]` or `[B,d_h]`.
    pub fn project_on_graph(&self, graph: &mut Graph<S>, vars: &Layers<Var>, h: Var) -> Result<Var> {
        let head = &vars.head;
        let hidden = graph.linear(h, head.hidden.weight, Some(head.hidden.bias))?;
        let hidden = graph.relu(hidden);
        Ok(graph.linear(hidden, head.output.weight, Some(head.output.bias))?)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<S>]) {
        assert_eq!(stats.len(), self.running.len(), "one statistic per normalization layer");
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Representation of one `[2,T]` signal in eval mode.
    pub fn encode(&self, signal: &Tensor<S>) -> Result<Tensor<S>> {
        if let [2, t] = signal.shape() {
            if *t == 0 {
                return Err(NumError::Empty("signal has T = 0".into()).into());
            }
        } else {
            return Err(NumError::Shape(format!("encode expects [2,T], got {:?}", signal.shape())).into());
        }
        if let Some(pos) = signal.data().iter().position(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteInput(pos));
        }
        let mut graph = Graph::new(ExecMode::Sequential);
        let vars = self.bind_frozen(&mut graph);
        let x = graph.constant(signal.clone());
        let (h, _) = self.forward(&mut graph, &vars, x, Mode::Eval)?;
        Ok(graph.value(h).clone())
    }

    pub fn project(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let mut graph = Graph::new(ExecMode::Sequential);
        let vars = self.bind_frozen(&mut graph);
        let hv = graph.constant(h.clone());
        let z = self.project_on_graph(&mut graph, &vars, hv)?;
        Ok(graph.value(z).clone())
    }
}

/// `gated[c,t] = sigmoid(W_b relu(W_a GAP(x)))[c] * x[c,t]` for `[C,T]` or
/// `[B,C,T]` features.
pub fn se_gate_on_graph<S: Scalar>(graph: &mut Graph<S>, x: Var, squeeze: Var, excite: Var) -> Result<Var> {
    let pooled = graph.global_avg_pool(x)?;
    let a = graph.linear(pooled, squeeze, None)?;
    let a = graph.relu(a);
    let b = graph.linear(a, excite, None)?;
    let s = graph.sigmoid(b);
    Ok(graph.channel_scale(x, s)?)
}

/// Standalone squeeze-and-excitation gate.
pub fn se_gate<S: Scalar>(features: &Tensor<S>, squeeze: &Tensor<S>, excite: &Tensor<S>) -> Result<Tensor<S>> {
    let mut graph = Graph::new(ExecMode::Sequential);
    let x = graph.constant(features.clone());
    let a = graph.constant(squeeze.clone());
    let b = graph.constant(excite.clone());
    let out = se_gate_on_graph(&mut graph, x, a, b)?;
    Ok(graph.value(out).clone())
}
