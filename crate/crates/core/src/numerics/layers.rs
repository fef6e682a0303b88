use super::graph::{Graph, Var};
use super::params::{InitScheme, ParamId, ParamStore};
use super::{Mat, NumError};

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), fan_in, fan_out, InitScheme::UniformFanIn),
            b: store.add(&format!("{name}.b"), 1, fan_out, InitScheme::Zeros),
            fan_in,
            fan_out,
        }
    }

    /// `x·W + b`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Two linear layers with tanh after each.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            l1: Dense::new(store, &format!("{name}.0"), fan_in, hidden),
            l2: Dense::new(store, &format!("{name}.1"), hidden, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.tanh(h);
        let y = self.l2.forward(g, store, h)?;
        Ok(g.tanh(y))
    }
}

/// Gated recurrent unit with gate order (r, z, n) in the stacked weights:
/// r = σ(x·Wr + h·Ur + b), z = σ(x·Wz + h·Uz + b),
/// n = tanh(x·Wn + b_in + r ⊙ (h·Un + b_hn)), h' = (1 − z) ⊙ n + z ⊙ h.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize) -> Self {
        Self {
            w_in: store.add(&format!("{name}.w_in"), d_in, 3 * d, InitScheme::UniformFanIn),
            b_in: store.add(&format!("{name}.b_in"), 1, 3 * d, InitScheme::Zeros),
            w_h: store.add(&format!("{name}.w_h"), d, 3 * d, InitScheme::Orthogonal),
            b_h: store.add(&format!("{name}.b_h"), 1, 3 * d, InitScheme::Zeros),
            d_in,
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var, NumError> {
        let d = self.d;
        let (w_in, b_in, w_h, b_h) = (
            g.param(store, self.w_in),
            g.param(store, self.b_in),
            g.param(store, self.w_h),
            g.param(store, self.b_h),
        );
        let gx = g.matmul(x, w_in)?;
        let gx = g.add_bias(gx, b_in)?;
        let gh = g.matmul(h, w_h)?;
        let gh = g.add_bias(gh, b_h)?;
        let xr = g.slice_cols(gx, 0, d)?;
        let xz = g.slice_cols(gx, d, d)?;
        let xn = g.slice_cols(gx, 2 * d, d)?;
        let hr = g.slice_cols(gh, 0, d)?;
        let hz = g.slice_cols(gh, d, d)?;
        let hn = g.slice_cols(gh, 2 * d, d)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparam_sample(g: &mut Graph, mu: Var, logvar: Var, noise: &Mat) -> Result<Var, NumError> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let e = g.mul_const(sd, noise)?;
    g.add(mu, e)
}
