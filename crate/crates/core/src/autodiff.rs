//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Image activations use a
//! channels-last layout with one row per (sample, y, x) position, so
//! convolutions reduce to im2col followed by a matrix product.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape bookkeeping for a 2-D convolution over channels-last rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Leaky rectifier; slope 0 is the plain ReLU.
    Relu(Var, f64),
    Mask(Var, Matrix),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Matrix,
    },
    AvgPoolRows {
        input: Var,
        group: usize,
    },
    Conv1dSame {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    /// Column standardization; keeps the normalized values and per-column
    /// inverse standard deviations for the backward pass.
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
    },
    /// Scalar output whose local gradients were computed eagerly.
    ScalarFn(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation so it can be differentiated afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Matrix) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(i, _)| *i == index) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.push((index, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1×m` row vector to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        self.push(value, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `max(x, 0) + slope·min(x, 0)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::Relu(x, slope))
    }

    /// Element-wise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Matrix) -> Var {
        let value = self.value(x) * &mask;
        self.push(value, Op::Mask(x, mask))
    }

    /// `x·w + b` with `w: in×out` and `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// 2-D convolution. `input` is `(batch·h·w) × in_channels`, `weight`
    /// is `(k·k·in_channels) × out_channels`, `bias` is `1 × out_channels`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Var {
        let cols = im2col(self.value(input).view(), &geom);
        let mut value = cols.dot(self.value(weight));
        value += self.value(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    /// Averages each consecutive block of `group` rows: `(n·group)×c → n×c`.
    pub fn avg_pool_rows(&mut self, input: Var, group: usize) -> Var {
        let x = self.value(input);
        let n = x.nrows() / group;
        let mut value = Matrix::zeros((n, x.ncols()));
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            row.assign(&block.mean_axis(Axis(0)).expect("nonempty block"));
        }
        self.push(value, Op::AvgPoolRows { input, group })
    }

    /// Single-channel 1-D convolution along each row with a `1×3` kernel,
    /// zero "same" padding and a `1×1` bias.
    pub fn conv1d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias)[[0, 0]];
        let (k0, k1, k2) = (k[[0, 0]], k[[0, 1]], k[[0, 2]]);
        let width = x.ncols();
        let mut value = Matrix::zeros(x.raw_dim());
        for (xr, mut out) in x.rows().into_iter().zip(value.rows_mut()) {
            for j in 0..width {
                let left = if j > 0 { xr[j - 1] } else { 0.0 };
                let right = if j + 1 < width { xr[j + 1] } else { 0.0 };
                out[j] = k0 * left + k1 * xr[j] + k2 * right + b;
            }
        }
        self.push(value, Op::Conv1dSame { input, kernel, bias })
    }

    /// Standardizes each column with the batch mean and variance:
    /// `(x − mean) / sqrt(var + eps)`.
    pub fn standardize_columns(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let centered = x - &mean.insert_axis(Axis(0));
        let var = centered.map_axis(Axis(0), |c| c.dot(&c) / c.len() as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = centered;
        for (mut col, &s) in value.columns_mut().into_iter().zip(&inv_std) {
            col *= s;
        }
        self.push(value, Op::Standardize { input, inv_std })
    }

    /// Registers a scalar computed outside the tape together with its
    /// gradient with respect to each input node.
    pub fn scalar_fn(&mut self, value: f64, local_grads: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local_grads {
            assert_eq!(
                self.value(*v).dim(),
                g.dim(),
                "local gradient shape must match its input"
            );
        }
        self.push(Matrix::from_elem((1, 1), value), Op::ScalarFn(local_grads))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, &g * *f),
                Op::Relu(x, slope) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= *slope;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mask(x, mask) => accumulate(&mut grads, *x, &g * mask),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let gw = cols.t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gcols = g.dot(&self.value(*weight).t());
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *input, col2im(&gcols, geom));
                }
                Op::AvgPoolRows { input, group } => {
                    let rows = self.value(*input).nrows();
                    let mut gx = Matrix::zeros((rows, g.ncols()));
                    let inv = 1.0 / *group as f64;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        row.scaled_add(inv, &g.row(r / *group));
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Standardize { input, inv_std } => {
                    let y = &node.value;
                    let n = y.nrows() as f64;
                    let mut gx = Matrix::zeros(y.raw_dim());
                    for (j, &s) in inv_std.iter().enumerate() {
                        let (yc, gc) = (y.column(j), g.column(j));
                        let g_mean = gc.sum() / n;
                        let gy_mean = gc.dot(&yc) / n;
                        for (r, out) in gx.column_mut(j).iter_mut().enumerate() {
                            *out = s * (gc[r] - g_mean - yc[r] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Conv1dSame {
                    input,
                    kernel,
                    bias,
                } => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let (k0, k1, k2) = (k[[0, 0]], k[[0, 1]], k[[0, 2]]);
                    let width = x.ncols();
                    let mut gx = Matrix::zeros(x.raw_dim());
                    let mut gk = [0.0f64; 3];
                    let mut gb = 0.0;
                    for ((xr, gr), mut gxr) in x.rows().into_iter().zip(g.rows()).zip(gx.rows_mut())
                    {
                        for j in 0..width {
                            let go = gr[j];
                            gb += go;
                            gk[1] += go * xr[j];
                            gxr[j] += go * k1;
                            if j > 0 {
                                gk[0] += go * xr[j - 1];
                                gxr[j - 1] += go * k0;
                            }
                            if j + 1 < width {
                                gk[2] += go * xr[j + 1];
                                gxr[j + 1] += go * k2;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                    accumulate(
                        &mut grads,
                        *kernel,
                        Matrix::from_shape_vec((1, 3), gk.to_vec()).expect("1x3"),
                    );
                    accumulate(&mut grads, *bias, Matrix::from_elem((1, 1), gb));
                }
                Op::ScalarFn(locals) => {
                    let upstream = g[[0, 0]];
                    for (v, lg) in locals {
                        accumulate(&mut grads, *v, lg * upstream);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for parameter `index`, if it took part in the computation.
    pub fn param(&self, index: usize) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(i, _)| *i == index)
            .and_then(|(_, v)| self.of(*v))
    }
}

fn im2col(input: ArrayView2<f64>, geom: &ConvGeometry) -> Matrix {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let c = geom.in_channels;
    let k = geom.kernel;
    let mut cols = Matrix::zeros((geom.batch * oh * ow, geom.patch_len()));
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let patch = geom.patch_len();
    for b in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let out = &mut dst[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let pix = (b * geom.height + iy as usize) * geom.width + ix as usize;
                        let at = (ky * k + kx) * c;
                        out[at..at + c].copy_from_slice(&src[pix * c..(pix + 1) * c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Matrix, geom: &ConvGeometry) -> Matrix {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let c = geom.in_channels;
    let k = geom.kernel;
    let mut gx = Matrix::zeros((geom.batch * geom.height * geom.width, c));
    let src = gcols.as_slice().expect("standard layout");
    let dst = gx.as_slice_mut().expect("standard layout");
    let patch = geom.patch_len();
    for b in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let g = &src[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let pix = (b * geom.height + iy as usize) * geom.width + ix as usize;
                        let at = (ky * k + kx) * c;
                        for ch in 0..c {
                            dst[pix * c + ch] += g[at + ch];
                        }
                    }
                }
            }
        }
    }
    gx
}
