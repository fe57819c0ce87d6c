//! Parameterized layers built on [`Graph`] primitives.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

type Res<T> = Result<T, TensorError>;

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)`, scaled by `gain`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Res<Self> {
        let bound = gain / (fan_in as f64).sqrt();
        let w = uniform(rng, vec![fan_in, fan_out], bound);
        let b = uniform(rng, vec![fan_out], bound);
        Self::from_tensors(store, name, w, b)
    }

    pub fn from_tensors<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        w: Tensor<T>,
        b: Tensor<T>,
    ) -> Res<Self> {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        Ok(Self {
            w: store.add(&format!("{name}.w"), w)?,
            b: store.add(&format!("{name}.b"), b)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Res<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Res<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect::<Res<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Res<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Res<Self> {
        let fan_in = cin * kernel * kernel;
        // He-uniform for ReLU stacks.
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = store.add(
            &format!("{name}.w"),
            uniform(rng, vec![cout, cin, kernel, kernel], bound),
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(Self {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Res<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Res<Self> {
        let table = store.add(name, uniform(rng, vec![count, dim], 1.0))?;
        Ok(Self { table, count, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Res<Var> {
        let t = g.param(self.table);
        g.gather(t, idx)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Res<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            wi: store.add(
                &format!("{name}.wi"),
                uniform(rng, vec![input, 3 * hidden], bound),
            )?,
            wh: store.add(
                &format!("{name}.wh"),
                uniform(rng, vec![hidden, 3 * hidden], bound),
            )?,
            bi: store.add(&format!("{name}.bi"), uniform(rng, vec![3 * hidden], bound))?,
            bh: store.add(&format!("{name}.bh"), uniform(rng, vec![3 * hidden], bound))?,
            input,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Res<Var> {
        let (wi, wh, bi, bh) = (
            g.param(self.wi),
            g.param(self.wh),
            g.param(self.bi),
            g.param(self.bh),
        );
        g.gru_cell(x, h, wi, wh, bi, bh)
    }
}
