use serde::{Deserialize, Serialize};

use crate::numerics::{reparam_sample, Dense, Graph, Mat, NumError, ParamId, ParamStore, Var};

/// Which parts of the teacher-student module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// student latents to the policy, aligned to the teacher
    #[default]
    Full,
    /// student VAE alone, no teacher and no alignment
    NoT,
    /// teacher latents straight to the policy
    NoS,
    /// zeros in place of latents
    NoTs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoT, Variant::NoS, Variant::NoTs];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoT => "no_t",
            Variant::NoS => "no_s",
            Variant::NoTs => "no_ts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn has_student(self) -> bool {
        matches!(self, Variant::Full | Variant::NoT)
    }

    pub fn has_teacher(self) -> bool {
        matches!(self, Variant::Full | Variant::NoS)
    }
}

/// Diagonal Gaussian as mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], logvar: vec![0.0; dim] }
    }
}

/// Closed-form KL(a‖b), summed over dimensions.
pub fn gaussian_kl(a: &LatentGaussian, b: &LatentGaussian) -> f64 {
    assert_eq!(a.mu.len(), b.mu.len(), "latent widths differ");
    let mut kl = 0.0;
    for i in 0..a.mu.len() {
        let d = a.mu[i] - b.mu[i];
        let (la, lb) = (a.logvar[i], b.logvar[i]);
        kl += 0.5 * (lb - la) + 0.5 * ((la - lb).exp() + d * d * (-lb).exp()) - 0.5;
    }
    kl
}

/// Per-row KL(a‖b) as an `r×1` column.
pub fn kl_graph(g: &mut Graph, a_mu: Var, a_lv: Var, b_mu: Var, b_lv: Var) -> Result<Var, NumError> {
    let lv_diff = g.sub(b_lv, a_lv)?;
    let t1 = g.scale(lv_diff, 0.5);
    // σa²/σb² as one exponential so that equal inputs cancel exactly
    let neg_diff = g.scale(lv_diff, -1.0);
    let ratio = g.exp(neg_diff);
    let d = g.sub(a_mu, b_mu)?;
    let d2 = g.square(d);
    let neg = g.scale(b_lv, -1.0);
    let inv_var_b = g.exp(neg);
    let q = g.mul(d2, inv_var_b)?;
    let q = g.add(ratio, q)?;
    let t2 = g.scale(q, 0.5);
    let t = g.add(t1, t2)?;
    let t = g.add_scalar(t, -0.5);
    Ok(g.sum_cols(t))
}

/// Per-row KL(q‖N(0, I)) as an `r×1` column.
pub fn kl_std_normal_graph(g: &mut Graph, mu: Var, lv: Var) -> Result<Var, NumError> {
    let var = g.exp(lv);
    let mu2 = g.square(mu);
    let s = g.add(var, mu2)?;
    let s = g.sub(s, lv)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    Ok(g.sum_cols(s))
}

const LOGVAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Two-layer Gaussian encoder and two-layer decoder.
#[derive(Debug, Clone, Copy)]
pub struct Vae {
    enc_h: Dense,
    enc_out: Dense,
    dec_h: Dense,
    dec_out: Dense,
    pub input: usize,
    pub latent: usize,
}

impl Vae {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, latent: usize) -> Self {
        Self {
            enc_h: Dense::new(store, &format!("{name}.enc.0"), input, hidden),
            enc_out: Dense::new(store, &format!("{name}.enc.1"), hidden, 2 * latent),
            dec_h: Dense::new(store, &format!("{name}.dec.0"), latent, hidden),
            dec_out: Dense::new(store, &format!("{name}.dec.1"), hidden, input),
            input,
            latent,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.enc_h, self.enc_out, self.dec_h, self.dec_out]
            .iter()
            .flat_map(|d| [d.w, d.b])
            .collect()
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LatentVars, NumError> {
        let h = self.enc_h.forward(g, store, x)?;
        let h = g.tanh(h);
        let out = self.enc_out.forward(g, store, h)?;
        let mu = g.slice_cols(out, 0, self.latent)?;
        let lv = g.slice_cols(out, self.latent, self.latent)?;
        let logvar = g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        Ok(LatentVars { mu, logvar })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, NumError> {
        let h = self.dec_h.forward(g, store, z)?;
        let h = g.tanh(h);
        self.dec_out.forward(g, store, h)
    }

    /// Encoder output for each row of `x`, outside any training graph.
    pub fn encode_rows(&self, store: &ParamStore, x: Mat) -> Result<Vec<LatentGaussian>, NumError> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let lat = self.encode(&mut g, store, xv)?;
        let mu = g.value(lat.mu);
        let lv = g.value(lat.logvar);
        Ok((0..mu.rows)
            .map(|r| LatentGaussian { mu: mu.row(r).to_vec(), logvar: lv.row(r).to_vec() })
            .collect())
    }

    /// Latent means only; the student path used at decision time.
    pub fn encode_mean(&self, store: &ParamStore, x: Mat) -> Result<Mat, NumError> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let lat = self.encode(&mut g, store, xv)?;
        Ok(g.value(lat.mu).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsWeights {
    pub recon_s: f64,
    pub recon_c: f64,
    pub kl_s: f64,
    pub kl_c: f64,
    pub align: f64,
}

impl Default for TsWeights {
    fn default() -> Self {
        Self { recon_s: 1.0, recon_c: 1.0, kl_s: 1.0, kl_c: 1.0, align: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsDims {
    /// width of `x_p`
    pub x: usize,
    /// teacher embedding width
    pub e: usize,
    pub hidden: usize,
    pub latent: usize,
}

/// Graph handles for one teacher-student pass. Scalar terms are weighted
/// means over real rows; absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct TsLossVars {
    /// latents handed to the policy, one row per input row
    pub z_policy: Var,
    pub recon_s: Option<Var>,
    pub recon_c: Option<Var>,
    pub kl_s: Option<Var>,
    pub kl_c: Option<Var>,
    pub align: Option<Var>,
    pub total: Option<Var>,
}

/// The twin VAEs for one variant. Parameters live in the caller's store
/// under `ts.student.*` and `ts.teacher.*`.
#[derive(Debug, Clone, Copy)]
pub struct TeacherStudent {
    pub variant: Variant,
    pub dims: TsDims,
    pub weights: TsWeights,
    pub student: Option<Vae>,
    pub teacher: Option<Vae>,
}

impl TeacherStudent {
    pub fn new(store: &mut ParamStore, variant: Variant, dims: TsDims, weights: TsWeights) -> Self {
        let student = variant
            .has_student()
            .then(|| Vae::new(store, "ts.student", dims.x, dims.hidden, dims.latent));
        let teacher = variant
            .has_teacher()
            .then(|| Vae::new(store, "ts.teacher", dims.e, dims.hidden, dims.latent));
        Self { variant, dims, weights, student, teacher }
    }

    pub fn needs_teacher_inputs(&self) -> bool {
        self.teacher.is_some()
    }

    /// Latent means for the policy at decision time. `x` holds `x_p` rows,
    /// `e` the matching teacher embeddings (used only by `no_s`).
    pub fn policy_latents(&self, store: &ParamStore, x: Mat, e: Option<Mat>) -> Result<Mat, super::TsError> {
        match self.variant {
            Variant::Full | Variant::NoT => Ok(self.student.expect("student").encode_mean(store, x)?),
            Variant::NoS => {
                let e = e.ok_or(super::TsError::MissingProvider("no_s"))?;
                Ok(self.teacher.expect("teacher").encode_mean(store, e)?)
            }
            Variant::NoTs => Ok(Mat::zeros(x.rows, self.dims.latent)),
        }
    }

    /// Builds the loss terms. `row_w` weights each row (zero for padded
    /// phases) and should sum to one; `noise_*` are standard normal draws
    /// for the reparameterized decoder inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        e: Option<Var>,
        row_w: &[f64],
        noise_s: &Mat,
        noise_c: &Mat,
    ) -> Result<TsLossVars, NumError> {
        let (rows, _) = g.shape(x);
        let w = self.weights;
        let weighted_mean = |g: &mut Graph, col: Var, k: f64| -> Result<Var, NumError> {
            let c = g.row_scale(col, row_w)?;
            let s = g.sum(c);
            Ok(g.scale(s, k))
        };
        // unit-variance Gaussian decoder: ½‖x̂ − x‖² per row, constants dropped
        let nll_rows = |g: &mut Graph, pred: Var, target: Var| -> Result<Var, NumError> {
            let d = g.sub(pred, target)?;
            let d2 = g.square(d);
            let s = g.sum_cols(d2);
            Ok(g.scale(s, 0.5))
        };

        let mut out = TsLossVars {
            z_policy: x,
            recon_s: None,
            recon_c: None,
            kl_s: None,
            kl_c: None,
            align: None,
            total: None,
        };
        let mut terms: Vec<Var> = Vec::new();

        let student_lat = match self.student {
            Some(vae) => {
                let lat = vae.encode(g, store, x)?;
                let z = reparam_sample(g, lat.mu, lat.logvar, noise_s)?;
                let x_hat = vae.decode(g, store, z)?;
                let rec = nll_rows(g, x_hat, x)?;
                let rec = weighted_mean(g, rec, 1.0)?;
                let kl = kl_std_normal_graph(g, lat.mu, lat.logvar)?;
                let kl = weighted_mean(g, kl, 1.0)?;
                out.recon_s = Some(rec);
                out.kl_s = Some(kl);
                terms.push(g.scale(rec, w.recon_s));
                terms.push(g.scale(kl, w.kl_s));
                Some(lat)
            }
            None => None,
        };

        let teacher_lat = match (self.teacher, e) {
            (Some(vae), Some(e)) => {
                let lat = vae.encode(g, store, e)?;
                let z = reparam_sample(g, lat.mu, lat.logvar, noise_c)?;
                let e_hat = vae.decode(g, store, z)?;
                let rec = nll_rows(g, e_hat, e)?;
                let rec = weighted_mean(g, rec, 1.0)?;
                let kl = kl_std_normal_graph(g, lat.mu, lat.logvar)?;
                let kl = weighted_mean(g, kl, 1.0)?;
                out.recon_c = Some(rec);
                out.kl_c = Some(kl);
                terms.push(g.scale(rec, w.recon_c));
                terms.push(g.scale(kl, w.kl_c));
                Some(lat)
            }
            (Some(_), None) => return crate::numerics::shape_err("teacher VAE needs embedding rows"),
            _ => None,
        };

        if let (Some(s), Some(t)) = (student_lat, teacher_lat) {
            // the student moves toward the teacher, never the reverse
            let t_mu = g.detach(t.mu);
            let t_lv = g.detach(t.logvar);
            let kl = kl_graph(g, t_mu, t_lv, s.mu, s.logvar)?;
            let kl = weighted_mean(g, kl, 1.0)?;
            out.align = Some(kl);
            terms.push(g.scale(kl, w.align));
        }

        out.z_policy = match (self.variant, student_lat, teacher_lat) {
            (Variant::Full | Variant::NoT, Some(s), _) => s.mu,
            (Variant::NoS, _, Some(t)) => t.mu,
            _ => g.input(Mat::zeros(rows, self.dims.latent)),
        };

        if let Some((&first, rest)) = terms.split_first() {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            out.total = Some(acc);
        }
        Ok(out)
    }
}
