use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2x2 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    MaxUnpool2 {
        input: Var,
        pool: Var,
    },
    UpsampleNearest2 {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SoftmaxChannels {
        input: Var,
    },
    Log {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    ChannelScale {
        input: Var,
        factors: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    SumSpatial {
        input: Var,
    },
    Clip {
        input: Var,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape: every op evaluates eagerly and records what the
/// backward pass needs. Nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    names: HashMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }

    /// Gradients of every named leaf that requires grad.
    pub fn by_name(&self) -> HashMap<String, Tensor> {
        self.names
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn check_finite(value: &Tensor, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects C×H×W, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.names.insert(name.to_string(), v);
        v
    }

    /// Named leaf without gradient (network input, target, frozen weight).
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, false);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Evaluates `build` on a fresh graph with the named inputs bound as
    /// gradient-carrying leaves and returns the graph with its output.
    pub fn eval(
        inputs: &[(&str, Tensor)],
        build: impl FnOnce(&mut Graph, &HashMap<String, Var>) -> Result<Var>,
    ) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let mut bound = HashMap::new();
        for (name, t) in inputs {
            if t.is_empty() {
                return Err(Error::EmptyTensor);
            }
            bound.insert(name.to_string(), g.param(name, t.clone()));
        }
        let out = build(&mut g, &bound)?;
        Ok((g, out))
    }

    // ---- convolutional ops -------------------------------------------------

    /// 2D convolution, zero padding. `weight` is `[Cout, Cin, k, k]`, `bias` `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, w) = chw(self.shape(input), "conv2d")?;
        let ws = self.shape(weight).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::Shape(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin || k != k2 || self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weight {:?} bias {:?}",
                self.shape(input),
                ws,
                self.shape(bias)
            )));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d kernel {k} too large for {h}×{w}")));
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: w,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let p = oh * ow;
        let x = self.value(input).data();
        let cols = if k == 1 && stride == 1 && pad == 0 {
            x.to_vec()
        } else {
            im2col(x, geom)
        };
        let mut out = vec![0.0; cout * p];
        let b = self.value(bias).data();
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b[co]);
        }
        gemm(cout, geom.col_rows(), p, self.value(weight).data(), false, &cols, false, 1.0, &mut out);
        let value = Tensor::new(&[cout, oh, ow], out)?;
        check_finite(&value, "conv2d")?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2 (doubles H and W).
    /// `weight` is `[Cin, Cout, 2, 2]`, `bias` `[Cout]`.
    pub fn conv_transpose2x2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = chw(self.shape(input), "conv_transpose2x2")?;
        let ws = self.shape(weight).to_vec();
        let [wcin, cout, 2, 2] = ws[..] else {
            return Err(Error::Shape(format!("transposed conv weight {ws:?}")));
        };
        if wcin != cin || self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "transposed conv input {:?} weight {:?}",
                self.shape(input),
                ws
            )));
        }
        let hw = h * w;
        let mut y = vec![0.0; cout * 4 * hw];
        gemm(cout * 4, cin, hw, self.value(weight).data(), true, self.value(input).data(), false, 0.0, &mut y);
        let b = self.value(bias).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &y[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let orow = &mut out[co * oh * ow + (2 * i + a) * ow..];
                        for j in 0..w {
                            orow[2 * j + bb] = src[i * w + j] + b[co];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        check_finite(&value, "conv_transpose2x2")?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::ConvTranspose2x2 { input, weight, bias }, rg))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::NotPoolable(format!("{h}×{w} is not divisible by 2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * i + a) * w + 2 * j + b;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = ch * oh * ow + i * ow + j;
                    out[o] = x[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Places each value at the location its paired [`Graph::max_pool2`] selected.
    pub fn max_unpool2(&mut self, input: Var, pool: Var) -> Result<Var> {
        let Op::MaxPool2 { input: pin, argmax } = &self.nodes[pool.0].op else {
            return Err(Error::Shape("max_unpool2 needs a max_pool2 node".into()));
        };
        let out_shape = self.shape(*pin).to_vec();
        if self.shape(input) != self.shape(pool) {
            return Err(Error::Shape(format!(
                "unpool input {:?} vs pool output {:?}",
                self.shape(input),
                self.shape(pool)
            )));
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &idx) in self.value(input).data().iter().zip(argmax) {
            out[idx as usize] = v;
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MaxUnpool2 { input, pool }, rg))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "upsample_nearest2")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[ch * oh * ow + i * ow + j] = x[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::UpsampleNearest2 { input }, rg))
    }

    // ---- pointwise and normalization ---------------------------------------

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, rg))
    }

    /// Per-channel normalization over the spatial extent, no affine terms.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "instance_norm")?;
        let n = h * w;
        if n == 0 {
            return Err(Error::EmptyTensor);
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[ch] = inv;
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        check_finite(&value, "instance_norm")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::InstanceNorm { input, inv_std }, rg))
    }

    /// Concatenation along the channel (first) axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyTensor)?;
        let (_, h, w) = chw(self.shape(*first), "concat")?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let (c, vh, vw) = chw(self.shape(v), "concat")?;
            if (vh, vw) != (h, w) {
                return Err(Error::Shape(format!("concat {h}×{w} with {vh}×{vw}")));
            }
            c_total += c;
            data.extend_from_slice(self.value(v).data());
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&[c_total, h, w], data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the channel axis of a `C×H×W` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "softmax_channels")?;
        let mut out = self.value(input).data().to_vec();
        softmax_channels_inplace(&mut out, c, h * w);
        let value = Tensor::new(&[c, h, w], out)?;
        check_finite(&value, "softmax")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SoftmaxChannels { input }, rg))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(f64::ln);
        check_finite(&value, "log")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Log { input }, rg))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(f64::exp);
        check_finite(&value, "exp")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Exp { input }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        check_finite(&value, what)?;
        Ok(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        check_finite(&value, "scale")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v + c);
        check_finite(&value, "add_scalar")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::AddScalar { input }, rg))
    }

    /// Multiplies every channel plane of a `C×H×W` tensor by its own factor
    /// (channel dropout masks).
    pub fn channel_scale(&mut self, input: Var, factors: Vec<f64>) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "channel_scale")?;
        if factors.len() != c {
            return Err(Error::Shape(format!("{} factors for {c} channels", factors.len())));
        }
        let n = h * w;
        let mut data = self.value(input).data().to_vec();
        for (plane, f) in data.chunks_exact_mut(n).zip(&factors) {
            plane.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&[c, h, w], data)?, Op::ChannelScale { input, factors }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        check_finite(&value, "sum")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        if n == 0 {
            return Err(Error::EmptyTensor);
        }
        let value = Tensor::scalar(self.value(input).data().iter().sum::<f64>() / n as f64);
        check_finite(&value, "mean")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Mean { input }, rg))
    }

    /// Sum over H and W of a `C×H×W` tensor, producing `[C]`.
    pub fn sum_spatial(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(input), "sum_spatial")?;
        let n = h * w;
        let data = self
            .value(input)
            .data()
            .chunks_exact(n.max(1))
            .map(|p| p.iter().sum())
            .collect::<Vec<f64>>();
        let value = Tensor::new(&[c], if n == 0 { vec![0.0; c] } else { data })?;
        check_finite(&value, "sum_spatial")?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SumSpatial { input }, rg))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clip(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Clip { input, lo, hi }, rg))
    }

    /// Smallest distance of any recorded input from a point where an op is
    /// not differentiable: leaky-ReLU inputs from 0, clip inputs from their
    /// bounds, and the gap between the two largest entries of a pooling
    /// window. Finite differences with a step below this margin are valid.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    for &v in self.value(*input).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clip { input, lo, hi } => {
                    for &v in self.value(*input).data() {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let x = self.value(*input).data();
                    let w = self.shape(*input)[2];
                    for &best in argmax {
                        let best = best as usize;
                        // top-left corner of the window holding `best`
                        let (row, col) = (best / w, best % w);
                        let base = (row & !1) * w + (col & !1);
                        for idx in [base, base + 1, base + w, base + w + 1] {
                            if idx != best {
                                margin = margin.min(x[best] - x[idx]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `output`. `seed` defaults to ones (a scalar output
    /// therefore yields plain derivatives).
    pub fn backward(&self, output: Var, seed: Option<&Tensor>) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        let out_shape = self.shape(output);
        let seed = match seed {
            Some(s) if s.shape() != out_shape => {
                return Err(Error::Shape(format!(
                    "seed {:?} for output {:?}",
                    s.shape(),
                    out_shape
                )))
            }
            Some(s) => s.data().to_vec(),
            None => vec![1.0; self.value(output).len()],
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {id}")));
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            names: self.names.clone(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cout = self.shape(*weight)[0];
                let p = geom.col_cols();
                let k = geom.col_rows();
                if let Some(db) = self.acc(grads, *bias) {
                    for (co, row) in dy.chunks_exact(p).enumerate() {
                        db[co] += row.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = self.acc(grads, *weight) {
                    gemm(cout, p, k, dy, false, cols, true, 1.0, dw);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; k * p];
                    gemm(k, cout, p, self.value(*weight).data(), true, dy, false, 0.0, &mut dcols);
                    let dx = self.acc(grads, *input).expect("input requires grad");
                    if geom.kernel == 1 && geom.stride == 1 && geom.pad == 0 {
                        dx.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
                    } else {
                        col2im(&dcols, *geom, dx);
                    }
                }
            }
            Op::ConvTranspose2x2 {
                input,
                weight,
                bias,
            } => {
                let (cin, h, w) = chw(self.shape(*input), "").expect("shape");
                let cout = self.shape(*bias)[0];
                let hw = h * w;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dy4 = vec![0.0; cout * 4 * hw];
                for co in 0..cout {
                    for a in 0..2 {
                        for b in 0..2 {
                            let dst = &mut dy4[(co * 4 + a * 2 + b) * hw..];
                            for i in 0..h {
                                let drow = &dy[co * oh * ow + (2 * i + a) * ow..];
                                for j in 0..w {
                                    dst[i * w + j] = drow[2 * j + b];
                                }
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for (co, plane) in dy.chunks_exact(oh * ow).enumerate() {
                        db[co] += plane.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = self.acc(grads, *weight) {
                    gemm(cin, hw, cout * 4, self.value(*input).data(), false, &dy4, true, 1.0, dw);
                }
                if let Some(dx) = self.acc(grads, *input) {
                    gemm(cin, cout * 4, hw, self.value(*weight).data(), false, &dy4, false, 1.0, dx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = self.acc(grads, *input) {
                    for (&g, &idx) in dy.iter().zip(argmax) {
                        dx[idx as usize] += g;
                    }
                }
            }
            Op::MaxUnpool2 { input, pool } => {
                let Op::MaxPool2 { argmax, .. } = &self.nodes[pool.0].op else {
                    unreachable!("validated in forward")
                };
                if let Some(dx) = self.acc(grads, *input) {
                    for (d, &idx) in dx.iter_mut().zip(argmax) {
                        *d += dy[idx as usize];
                    }
                }
            }
            Op::UpsampleNearest2 { input } => {
                let (c, h, w) = chw(self.shape(*input), "").expect("shape");
                if let Some(dx) = self.acc(grads, *input) {
                    let ow = 2 * w;
                    for ch in 0..c {
                        for i in 0..2 * h {
                            for j in 0..ow {
                                dx[ch * h * w + (i / 2) * w + j / 2] += dy[ch * 4 * h * w + i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.acc(grads, *input) {
                    for ((d, &g), &xv) in dx.iter_mut().zip(dy).zip(x) {
                        *d += if xv > 0.0 { g } else { slope * g };
                    }
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                if let Some(dx) = self.acc(grads, *input) {
                    let c = inv_std.len();
                    let n = y.len() / c;
                    for ch in 0..c {
                        let ys = &y[ch * n..(ch + 1) * n];
                        let gs = &dy[ch * n..(ch + 1) * n];
                        let mean_g = gs.iter().sum::<f64>() / n as f64;
                        let mean_gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((d, &g), &yv) in dx[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(ys) {
                            *d += inv_std[ch] * (g - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).len();
                    if let Some(dx) = self.acc(grads, v) {
                        dx.iter_mut().zip(&dy[offset..offset + n]).for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::SoftmaxChannels { input } => {
                let c = node.value.shape()[0];
                let p = y.len() / c;
                if let Some(dx) = self.acc(grads, *input) {
                    for px in 0..p {
                        let dot: f64 = (0..c).map(|k| y[k * p + px] * dy[k * p + px]).sum();
                        for k in 0..c {
                            dx[k * p + px] += y[k * p + px] * (dy[k * p + px] - dot);
                        }
                    }
                }
            }
            Op::Log { input } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.acc(grads, *input) {
                    for ((d, g), xv) in dx.iter_mut().zip(dy).zip(x) {
                        *d += g / xv;
                    }
                }
            }
            Op::Exp { input } => {
                if let Some(dx) = self.acc(grads, *input) {
                    for ((d, g), yv) in dx.iter_mut().zip(dy).zip(y) {
                        *d += g * yv;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.acc(grads, v) {
                        dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(dx) = self.acc(grads, *a) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(dx) = self.acc(grads, *b) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(dx) = self.acc(grads, *a) {
                    for ((d, g), o) in dx.iter_mut().zip(dy).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(dx) = self.acc(grads, *b) {
                    for ((d, g), o) in dx.iter_mut().zip(dy).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if let Some(dx) = self.acc(grads, *a) {
                    for ((d, g), o) in dx.iter_mut().zip(dy).zip(bv) {
                        *d += g / o;
                    }
                }
                if let Some(dx) = self.acc(grads, *b) {
                    for (((d, g), o), q) in dx.iter_mut().zip(dy).zip(bv).zip(y) {
                        *d -= g * q / o;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.acc(grads, *input) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g * factor);
                }
            }
            Op::AddScalar { input } => {
                if let Some(dx) = self.acc(grads, *input) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
            }
            Op::ChannelScale { input, factors } => {
                if let Some(dx) = self.acc(grads, *input) {
                    let n = dx.len() / factors.len();
                    for ((dp, gp), f) in dx.chunks_exact_mut(n).zip(dy.chunks_exact(n)).zip(factors) {
                        dp.iter_mut().zip(gp).for_each(|(d, g)| *d += g * f);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.acc(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::Mean { input } => {
                if let Some(dx) = self.acc(grads, *input) {
                    let g = dy[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::SumSpatial { input } => {
                if let Some(dx) = self.acc(grads, *input) {
                    let n = dx.len() / dy.len();
                    for (plane, g) in dx.chunks_exact_mut(n.max(1)).zip(dy) {
                        plane.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::Clip { input, lo, hi } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.acc(grads, *input) {
                    for ((d, g), xv) in dx.iter_mut().zip(dy).zip(x) {
                        if xv >= lo && xv <= hi {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over `c` channel planes of `p` pixels each.
pub fn softmax_channels_inplace(data: &mut [f64], c: usize, p: usize) {
    for px in 0..p {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(data[k * p + px]);
        }
        let mut s = 0.0;
        for k in 0..c {
            let e = (data[k * p + px] - m).exp();
            data[k * p + px] = e;
            s += e;
        }
        for k in 0..c {
            data[k * p + px] /= s;
        }
    }
}
