//! Wengert-list style reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; `backward` replays the
//! list in reverse. Leaves created with [`Graph::param`] are the ones that
//! gradients are requested for.

use super::kernels::{self, ConvDims, BN_EPS};
use super::{ExecMode, NumError, Result, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<S> = Box<dyn Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + Send + Sync>;

enum Op<S> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Gap {
        x: Var,
        len: usize,
    },
    ChannelScale {
        x: Var,
        s: Var,
        len: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Normalization mode for [`Graph::batchnorm1d`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, S> {
    Train,
    Eval {
        running_mean: &'a [S],
        running_var: &'a [S],
    },
}

/// Statistics of one train-mode normalization, for running-average updates.
/// `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    mode: ExecMode,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new(ExecMode::Sequential)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NumError::Shape(msg))
}

/// Splits a `[.., C, T]` shape into `(batch, C, T)`.
fn bct(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, t] => Ok((1, *c, *t)),
        [b, c, t] => Ok((*b, *c, *t)),
        _ => shape_err(format!("{what} expects [C,T] or [B,C,T], got {shape:?}")),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: ExecMode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// 1-D "same" convolution over `[C_in,T]` or `[B,C_in,T]` with kernels
    /// `[C_out,C_in,K]` (K odd) and symmetric zero padding.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, cin, len) = bct(&xs, "conv1d_same input")?;
        let (cout, wcin, kernel) = match self.value(w).shape() {
            [a, b, c] => (*a, *b, *c),
            s => return shape_err(format!("conv1d_same kernels must be [C_out,C_in,K], got {s:?}")),
        };
        if wcin != cin {
            return shape_err(format!(
                "conv1d_same: input has {cin} channels, kernels expect {wcin}"
            ));
        }
        if kernel % 2 == 0 {
            return Err(NumError::Contract(format!("kernel size {kernel} must be odd")));
        }
        if dilation == 0 {
            return Err(NumError::Contract("dilation must be positive".into()));
        }
        if len == 0 {
            return Err(NumError::Empty("conv1d_same input has T = 0".into()));
        }
        if self.value(b).shape() != [cout] {
            return shape_err(format!(
                "conv1d_same bias must be [{cout}], got {:?}",
                self.value(b).shape()
            ));
        }
        let dims = ConvDims {
            batch,
            cin,
            cout,
            len,
            kernel,
            dilation,
        };
        let out = kernels::conv1d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            self.mode,
        );
        let shape = if xs.len() == 2 {
            vec![cout, len]
        } else {
            vec![batch, cout, len]
        };
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, b, dims }, rg))
    }

    /// Per-channel normalization over batch and time of `[B,C,T]` (or `[C,T]`).
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let xs = self.value(x).shape().to_vec();
        let dims @ (batch, channels, len) = bct(&xs, "batchnorm1d input")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [channels] {
                return shape_err(format!(
                    "batchnorm1d {name} must be [{channels}], got {:?}",
                    self.value(v).shape()
                ));
            }
        }
        let eps = S::from_f64_lossy(BN_EPS);
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if batch * len < 2 {
                    return Err(NumError::Contract(
                        "batchnorm1d train mode needs B*T >= 2".into(),
                    ));
                }
                let (mean, var) = kernels::channel_moments(self.value(x).data(), batch, channels, len);
                let m = S::from_usize(batch * len).expect("count");
                let unbiased = var.iter().map(|v| *v * m / (m - S::one())).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return shape_err("batchnorm1d running statistics width mismatch".into());
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x).data(),
            dims,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.needs(&[x, gamma, beta]);
        let out = self.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
                batch_stats: stats.is_some(),
            },
            rg,
        );
        Ok((out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.max(S::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|a| S::one() / (S::one() + (-*a).exp()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Mean over the last (time) axis: `[C,T] -> [C]`, `[B,C,T] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (_, _, len) = bct(&xs, "global_avg_pool input")?;
        if len == 0 {
            return Err(NumError::Empty("global_avg_pool over T = 0".into()));
        }
        let n = S::from_usize(len).expect("len");
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|row| row.iter().copied().sum::<S>() / n)
            .collect();
        let out = Tensor::new(xs[..xs.len() - 1].to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Gap { x, len }, rg))
    }

    /// `y[b,c,t] = x[b,c,t] * s[b,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (_, _, len) = bct(&xs, "channel_scale input")?;
        if self.value(s).shape() != &xs[..xs.len() - 1] {
            return shape_err(format!(
                "channel_scale gate {:?} does not match features {xs:?}",
                self.value(s).shape()
            ));
        }
        let gate = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, g) in data.chunks_mut(len).zip(gate) {
            row.iter_mut().for_each(|v| *v = *v * *g);
        }
        let rg = self.needs(&[x, s]);
        Ok(self.push(Tensor::new(xs, data)?, Op::ChannelScale { x, s, len }, rg))
    }

    /// Affine map `y = x W^T + b` for `x` of shape `[in]` or `[B,in]`,
    /// `W` of shape `[out,in]`; without `b` the map is linear.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (rows, fan_in) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            s => return shape_err(format!("linear input must be [in] or [B,in], got {s:?}")),
        };
        let fan_out = match self.value(w).shape() {
            [o, i] if *i == fan_in => *o,
            s => return shape_err(format!("linear weight {s:?} incompatible with input width {fan_in}")),
        };
        let mut out = match b {
            Some(b) => {
                if self.value(b).shape() != [fan_out] {
                    return shape_err(format!("linear bias must be [{fan_out}]"));
                }
                self.value(b).data().repeat(rows)
            }
            None => vec![S::zero(); rows * fan_out],
        };
        S::gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            S::one(),
            &mut out,
        );
        let shape = if xs.len() == 1 {
            vec![fan_out]
        } else {
            vec![rows, fan_out]
        };
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Registers an op whose value was computed outside the tape. `backward`
    /// receives the output gradient and the input values and must return one
    /// gradient per input, shaped like that input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<S>, backward: F) -> Var
    where
        F: Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + Send + Sync + 'static,
    {
        let rg = self.needs(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Propagates d`output`/d(node) to every node that requires a gradient.
    /// `output` must be a scalar (shape `[]` or `[1]`).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.value(output).shape();
        if !(shape.is_empty() || shape == [1]) {
            return Err(NumError::Contract(format!(
                "backward needs a scalar output, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![S::one()]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &dy);
            grads[idx] = Some(dy);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` output w.r.t. `v`; zeros when `v` did
    /// not influence it.
    pub fn grad(&self, v: Var) -> Tensor<S> {
        let shape = self.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn local_grads(&self, idx: usize, dy: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(*dims, val(*x), val(*w), dy, self.mode);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
                batch_stats,
            } => {
                let (dx, dg, db) =
                    kernels::batchnorm_backward(dy, xhat, *dims, inv_std, val(*gamma), *batch_stats);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(x) => {
                let g = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > S::zero() { *d } else { S::zero() })
                    .collect();
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(s, d)| *d * *s * (S::one() - *s))
                    .collect();
                vec![(*x, g)]
            }
            Op::Gap { x, len } => {
                let n = S::from_usize(*len).expect("len");
                let mut g = Vec::with_capacity(dy.len() * len);
                for d in dy {
                    g.resize(g.len() + len, *d / n);
                }
                vec![(*x, g)]
            }
            Op::ChannelScale { x, s, len } => {
                let xv = val(*x);
                let sv = val(*s);
                let mut dx = dy.to_vec();
                for (row, g) in dx.chunks_mut(*len).zip(sv) {
                    row.iter_mut().for_each(|v| *v = *v * *g);
                }
                let ds = dy
                    .chunks(*len)
                    .zip(xv.chunks(*len))
                    .map(|(d, xr)| d.iter().zip(xr).map(|(a, b)| *a * *b).sum())
                    .collect();
                vec![(*x, dx), (*s, ds)]
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let mut dx = vec![S::zero(); rows * fan_in];
                S::gemm(*rows, *fan_out, *fan_in, dy, false, val(*w), false, S::zero(), &mut dx);
                let mut dw = vec![S::zero(); fan_out * fan_in];
                S::gemm(*fan_out, *rows, *fan_in, dy, true, val(*x), false, S::zero(), &mut dw);
                let mut grads = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let mut db = vec![S::zero(); *fan_out];
                    for row in dy.chunks(*fan_out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                    }
                    grads.push((*b, db));
                }
                grads
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul(a, b) => {
                let da = dy.iter().zip(val(*b)).map(|(d, v)| *d * *v).collect();
                let db = dy.iter().zip(val(*a)).map(|(d, v)| *d * *v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; self.nodes[x.0].value.len()])],
            Op::Custom { inputs, backward } => {
                let dy_t = Tensor::new(node.value.shape().to_vec(), dy.to_vec()).expect("dy shape");
                let ins: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = backward(&dy_t, &ins);
                assert_eq!(gs.len(), inputs.len(), "custom backward arity");
                inputs
                    .iter()
                    .zip(gs)
                    .map(|(v, g)| {
                        assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "custom grad shape");
                        (*v, g.into_data())
                    })
                    .collect()
            }
        }
    }
}
