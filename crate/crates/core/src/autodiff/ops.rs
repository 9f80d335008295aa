use rayon::prelude::*;

use super::array::strides;
use super::{AdError, NdArray, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Gelu,
    Negate,
    Sqrt,
    Tanh,
    Abs,
    Relu,
    Square,
    Silu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 12] = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Gelu,
        UnaryOp::Negate,
        UnaryOp::Sqrt,
        UnaryOp::Tanh,
        UnaryOp::Abs,
        UnaryOp::Relu,
        UnaryOp::Square,
        UnaryOp::Silu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Negate => "negate",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Abs => "abs",
            UnaryOp::Relu => "relu",
            UnaryOp::Square => "square",
            UnaryOp::Silu => "silu",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            UnaryOp::Negate => -x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Square => x * x,
            UnaryOp::Silu => x * sigmoid(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            UnaryOp::Negate => -1.0,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    fn requires_positive(self) -> bool {
        matches!(self, UnaryOp::Log | UnaryOp::Sqrt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "reduce_sum",
            ReduceOp::Mean => "reduce_mean",
            ReduceOp::Max => "reduce_max",
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, AdError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AdError::Shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index into `src` (None when shapes match).
fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let rank = out.len();
    let mut padded = vec![1; rank - src.len()];
    padded.extend_from_slice(src);
    let src_strides = strides(&padded);
    let eff: Vec<usize> =
        (0..rank).map(|i| if padded[i] == 1 { 0 } else { src_strides[i] }).collect();
    Some(broadcast_free_map(out, &eff))
}

fn reduce_to(grad: Vec<f64>, map: &Option<Vec<usize>>, shape: &[usize]) -> NdArray {
    match map {
        None => NdArray::new(shape.to_vec(), grad).expect("same shape"),
        Some(m) => {
            let mut out = NdArray::zeros(shape);
            let d = out.data_mut();
            for (g, &i) in grad.iter().zip(m) {
                d[i] += g;
            }
            out
        }
    }
}

/// `c = a · b` for row-major `c` of shape `m×n`; `a` and `b` are addressed through
/// (row, col) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    const CHUNK: usize = 64;
    let kernel = |row0: usize, rows: usize, c: &mut [f64]| {
        // SAFETY: the slices cover every addressed element: `a` holds rows
        // row0..row0+rows under `a_strides`, `b` is k×n under `b_strides`, and `c`
        // is a contiguous rows×n block.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * a_strides.0),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < 1 << 18 || m <= CHUNK {
        kernel(0, m, c);
    } else {
        // Fixed chunking keeps results independent of the thread count.
        c.par_chunks_mut(CHUNK * n).enumerate().for_each(|(ci, block)| {
            kernel(ci * CHUNK, block.len() / n, block);
        });
    }
}

/// Returns (outer, len, inner) extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn apply_unary(&mut self, op: UnaryOp, x: Var) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if op.requires_positive() {
            if let Some(index) = xv.data().iter().position(|&v| v <= 0.0) {
                return Err(AdError::Domain { op: op.name(), index });
            }
        }
        let y = xv.map(|v| op.eval(v));
        self.record(
            op.name(),
            &[x],
            y,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let gx: Vec<f64> =
                    (0..x.len()).map(|i| g[i] * op.deriv(x[i], y[i])).collect();
                vec![Some(NdArray::new(ctx.output.shape().to_vec(), gx).unwrap())]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Log, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Softplus, x)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Gelu, x)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Silu, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Tanh, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Abs, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Relu, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var, AdError> {
        self.apply_unary(UnaryOp::Square, x)
    }

    pub fn apply_binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, AdError> {
        let av = self.try_value(a)?;
        let bv = self.try_value(b)?;
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let amap = broadcast_map(av.shape(), &out_shape);
        let bmap = broadcast_map(bv.shape(), &out_shape);
        if op == BinaryOp::Div {
            if let Some(index) = bv.data().iter().position(|&v| v == 0.0) {
                return Err(AdError::DivisionByZero { index });
            }
        }
        let total: usize = out_shape.iter().product();
        let ai = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
        let bi = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = (0..total)
            .map(|i| {
                let (x, y) = (ad[ai(i)], bd[bi(i)]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let out = NdArray::new(out_shape, data)?;
        let (ashape, bshape) = (av.shape().to_vec(), bv.shape().to_vec());
        self.record(
            op.name(),
            &[a, b],
            out,
            Box::new(move |ctx| {
                let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad.data();
                let ai = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..g.len())
                    .map(|i| {
                        let (x, y) = (ad[ai(i)], bd[bi(i)]);
                        match op {
                            BinaryOp::Add => (g[i], g[i]),
                            BinaryOp::Sub => (g[i], -g[i]),
                            BinaryOp::Mul => (g[i] * y, g[i] * x),
                            BinaryOp::Div => (g[i] / y, -g[i] * x / (y * y)),
                        }
                    })
                    .unzip();
                vec![Some(reduce_to(ga, &amap, &ashape)), Some(reduce_to(gb, &bmap, &bshape))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply_binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply_binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply_binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.apply_binary(BinaryOp::Div, a, b)
    }

    /// `c · x` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        let y = self.try_value(x)?.map(|v| v * c);
        self.record(
            "scale",
            &[x],
            y,
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    /// `x + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        let y = self.try_value(x)?.map(|v| v + c);
        self.record("add_scalar", &[x], y, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Matrix product; batched over leading extents when `a` has rank > 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let av = self.try_value(a)?;
        let bv = self.try_value(b)?;
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(AdError::Shape(format!("matmul needs rank >= 2, got {ash:?} and {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(AdError::Shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let shared_b = bsh.len() == 2;
        if !shared_b && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
            return Err(AdError::Shape(format!("matmul batch extents {ash:?} vs {bsh:?}")));
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut c);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[bi * m * k..],
                    (k, 1),
                    &bv.data()[bi * k * n..],
                    (n, 1),
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let out = NdArray::new(out_shape, c)?;
        self.record(
            "matmul",
            &[a, b],
            out,
            Box::new(move |ctx| {
                let (ad, bd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                if shared_b {
                    // ga = g·bᵀ, gb = aᵀ·g over the flattened batch
                    gemm(batch * m, n, k, g, (n, 1), bd, (1, n), &mut ga);
                    gemm(k, batch * m, n, ad, (1, k), g, (n, 1), &mut gb);
                } else {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..];
                        gemm(m, n, k, gs, (n, 1), &bd[bi * k * n..], (1, n), &mut ga[bi * m * k..(bi + 1) * m * k]);
                        gemm(k, m, n, &ad[bi * m * k..], (1, k), gs, (n, 1), &mut gb[bi * k * n..(bi + 1) * k * n]);
                    }
                }
                vec![
                    Some(NdArray::new(ctx.inputs[0].shape().to_vec(), ga).unwrap()),
                    Some(NdArray::new(ctx.inputs[1].shape().to_vec(), gb).unwrap()),
                ]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if axis >= xv.ndim() {
            return Err(AdError::Shape(format!("softmax axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let xd = xv.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(xd[base + l * inner]);
                }
                let mut s = 0.0;
                for l in 0..len {
                    let e = (xd[base + l * inner] - mx).exp();
                    y[base + l * inner] = e;
                    s += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= s;
                }
            }
        }
        let out = NdArray::new(xv.shape().to_vec(), y)?;
        self.record(
            "softmax",
            &[x],
            out,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let j = base + l * inner;
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(NdArray::new(ctx.output.shape().to_vec(), gx).unwrap())]
            }),
        )
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        let c = xv.cols();
        let (gv, bv) = (self.try_value(gain)?, self.try_value(bias)?);
        if gv.len() != c || bv.len() != c {
            return Err(AdError::Shape(format!(
                "layer_norm gain/bias need {c} entries, got {} and {}",
                gv.len(),
                bv.len()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = NdArray::new(xv.shape().to_vec(), y)?;
        self.record(
            "layer_norm",
            &[x, gain, bias],
            out,
            Box::new(move |ctx| {
                let gain = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for r in 0..rows {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let i = r * c + j;
                        let dh = g[i] * gain[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i];
                        ggain[j] += g[i] * xhat[i];
                        gbias[j] += g[i];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let i = r * c + j;
                        gx[i] = inv_std[r] * (g[i] * gain[j] - mean_dh - xhat[i] * mean_dh_h);
                    }
                }
                vec![
                    Some(NdArray::new(ctx.inputs[0].shape().to_vec(), gx).unwrap()),
                    Some(NdArray::new(ctx.inputs[1].shape().to_vec(), ggain).unwrap()),
                    Some(NdArray::new(ctx.inputs[2].shape().to_vec(), gbias).unwrap()),
                ]
            }),
        )
    }

    /// `x·weight + bias` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        let wv = self.try_value(weight)?;
        let bv = self.try_value(bias)?;
        if wv.ndim() != 2 || xv.cols() != wv.shape()[0] || bv.len() != wv.shape()[1] {
            return Err(AdError::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (rows, fin, fout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut y = vec![0.0; rows * fout];
        gemm(rows, fin, fout, xv.data(), (fin, 1), wv.data(), (fout, 1), &mut y);
        for r in 0..rows {
            for (o, b) in y[r * fout..(r + 1) * fout].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let out = NdArray::new(shape, y)?;
        self.record(
            "linear",
            &[x, weight, bias],
            out,
            Box::new(move |ctx| {
                let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = vec![0.0; rows * fin];
                let mut gw = vec![0.0; fin * fout];
                let mut gb = vec![0.0; fout];
                gemm(rows, fout, fin, g, (fout, 1), wd, (1, fout), &mut gx);
                gemm(fin, rows, fout, xd, (1, fin), g, (fout, 1), &mut gw);
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                        *acc += v;
                    }
                }
                vec![
                    Some(NdArray::new(ctx.inputs[0].shape().to_vec(), gx).unwrap()),
                    Some(NdArray::new(ctx.inputs[1].shape().to_vec(), gw).unwrap()),
                    Some(NdArray::new(ctx.inputs[2].shape().to_vec(), gb).unwrap()),
                ]
            }),
        )
    }

    /// Reduction along `axis`; the axis is removed from the shape (rank-0 results become `[1]`).
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if axis >= xv.ndim() {
            return Err(AdError::Shape(format!("reduce axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        if len == 0 {
            return Err(AdError::EmptyReduction);
        }
        let xd = xv.data();
        let mut y = vec![0.0; outer * inner];
        let mut argmax = if op == ReduceOp::Max { vec![0usize; outer * inner] } else { Vec::new() };
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = 0.0;
                        for l in 0..len {
                            s += xd[base + l * inner];
                        }
                        y[slot] = if op == ReduceOp::Mean { s / len as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            // strict comparison keeps the lowest index on ties
                            if xd[base + l * inner] > xd[base + best * inner] {
                                best = l;
                            }
                        }
                        argmax[slot] = best;
                        y[slot] = xd[base + best * inner];
                    }
                }
            }
        }
        let mut shape: Vec<usize> =
            xv.shape().iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &e)| e).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let in_shape = xv.shape().to_vec();
        let out = NdArray::new(shape, y)?;
        let name = op.name();
        self.record(
            name,
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = NdArray::zeros(&in_shape);
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let slot = o * inner + i;
                        match op {
                            ReduceOp::Sum => (0..len).for_each(|l| d[base + l * inner] = g[slot]),
                            ReduceOp::Mean => {
                                (0..len).for_each(|l| d[base + l * inner] = g[slot] / len as f64)
                            }
                            ReduceOp::Max => d[base + argmax[slot] * inner] = g[slot],
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements as a `[1]` array.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        let shape = xv.shape().to_vec();
        let s = xv.data().iter().sum();
        self.record(
            "sum_all",
            &[x],
            NdArray::scalar(s),
            Box::new(move |ctx| vec![Some(NdArray::full(&shape, ctx.grad.item()))]),
        )
    }

    /// Mean of all elements as a `[1]` array.
    pub fn mean_all(&mut self, x: Var) -> Result<Var, AdError> {
        let n = self.try_value(x)?.len();
        if n == 0 {
            return Err(AdError::EmptyReduction);
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        let in_shape = xv.shape().to_vec();
        let y = xv.clone().reshaped(shape)?;
        self.record(
            "reshape",
            &[x],
            y,
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshaped(&in_shape).unwrap())]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        let rank = xv.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(AdError::Shape(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let in_strides = strides(xv.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = broadcast_free_map(&out_shape, &src_strides);
        let y: Vec<f64> = map.iter().map(|&i| xv.data()[i]).collect();
        let in_shape = xv.shape().to_vec();
        let out = NdArray::new(out_shape, y)?;
        self.record(
            "permute",
            &[x],
            out,
            Box::new(move |ctx| {
                let mut gx = NdArray::zeros(&in_shape);
                let d = gx.data_mut();
                for (g, &i) in ctx.grad.data().iter().zip(&map) {
                    d[i] = *g;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(AdError::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, full, inner) = split_axis(xv.shape(), axis);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            y.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let in_shape = xv.shape().to_vec();
        let out = NdArray::new(shape, y)?;
        self.record(
            "narrow",
            &[x],
            out,
            Box::new(move |ctx| {
                let mut gx = NdArray::zeros(&in_shape);
                let d = gx.data_mut();
                let g = ctx.grad.data();
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AdError> {
        if xs.is_empty() {
            return Err(AdError::Shape("concat of zero arrays".into()));
        }
        let first = self.try_value(xs[0])?.shape().to_vec();
        if axis >= first.len() {
            return Err(AdError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.try_value(v)?.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AdError::Shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_len: usize = lens.iter().sum();
        let mut y = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                y.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_len;
        let out = NdArray::new(shape, y)?;
        let in_shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
        self.record(
            "concat",
            xs,
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        gi.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&in_shapes)
                    .map(|(d, s)| Some(NdArray::new(s.clone(), d).unwrap()))
                    .collect()
            }),
        )
    }

    /// Selects entries of the leading axis, in the given order (repeats allowed).
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if xv.ndim() == 0 {
            return Err(AdError::Shape("index_rows on rank-0 array".into()));
        }
        let n = xv.shape()[0];
        let inner = if n == 0 { 0 } else { xv.len() / n };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AdError::Shape(format!("row index {bad} out of range for {n} rows")));
        }
        let mut y = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            y.extend_from_slice(&xv.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        let in_shape = xv.shape().to_vec();
        let rows = rows.to_vec();
        let out = NdArray::new(shape, y)?;
        self.record(
            "index_rows",
            &[x],
            out,
            Box::new(move |ctx| {
                let mut gx = NdArray::zeros(&in_shape);
                let d = gx.data_mut();
                let g = ctx.grad.data();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..inner {
                        d[r * inner + j] += g[k * inner + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Flat gather: `out[i] = x[indices[i]]`, reshaped to `out_shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, out_shape: &[usize]) -> Result<Var, AdError> {
        let xv = self.try_value(x)?;
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(AdError::Shape(format!("gather: {} indices for shape {out_shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(AdError::Shape(format!("gather index {bad} out of range for {}", xv.len())));
        }
        let y: Vec<f64> = indices.iter().map(|&i| xv.data()[i]).collect();
        let in_shape = xv.shape().to_vec();
        let out = NdArray::new(out_shape.to_vec(), y)?;
        self.record(
            "gather",
            &[x],
            out,
            Box::new(move |ctx| {
                let mut gx = NdArray::zeros(&in_shape);
                let d = gx.data_mut();
                for (g, &i) in ctx.grad.data().iter().zip(&indices) {
                    d[i] += g;
                }
                vec![Some(gx)]
            }),
        )
    }
}

fn broadcast_free_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}
