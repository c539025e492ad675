//! Dual-time-conditioned denoiser `F(x_t, y, t, s)`, the trajectory jump
//! `G(x_t, y, t, s) = (s/t) x_t + (1 - s/t) F(x_t, y, t, s)`, and the EMA shadow.
//!
//! The network is a three-level convolutional encoder/decoder over
//! `(frames x bins)` with skip connections. `x_t` and `y` enter as four input
//! channels; the `t` and `s` embeddings are summed and injected as a per-channel
//! bias into every residual block. The final projection of the `s` branch starts
//! at zero, so a freshly built model ignores `s`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, CheckpointError, Gradients, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid jump t={t}, s={s}: {reason}")]
    InvalidTime { t: f64, s: f64, reason: &'static str },
    #[error("x_t {x:?} and y {y:?} must share a [B, 2, frames, bins] shape")]
    Shape { x: Vec<usize>, y: Vec<usize> },
    #[error("parameter set mismatch: {0}")]
    Params(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the three resolution levels.
    pub channels: [usize; 3],
    /// Number of sinusoid frequencies per time embedding (features = 2x).
    pub fourier_features: usize,
    pub embed_dim: usize,
    /// Smallest time at which the network may be evaluated.
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            fourier_features: 16,
            embed_dim: 64,
            t_min: 0.03,
            t_max: 1.0,
            seed: 0,
        }
    }
}

/// Ordered named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<R: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<R: Real> ParamSet<R> {
    pub fn insert(&mut self, name: &str, t: Tensor<R>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn set_index(&mut self, i: usize, t: Tensor<R>) {
        debug_assert_eq!(self.tensors[i].shape(), t.shape());
        self.tensors[i] = t;
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Parameters registered on one graph.
pub struct BoundParams<'g, R: Real> {
    vars: Vec<Var<'g, R>>,
    index: HashMap<String, usize>,
}

impl<'g, R: Real> BoundParams<'g, R> {
    pub fn get(&self, name: &str) -> Var<'g, R> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var<'g, R>] {
        &self.vars
    }

    /// Gradients aligned with the parameter order.
    pub fn grads(&self, g: &Gradients<R>) -> Vec<Option<Tensor<R>>> {
        self.vars.iter().map(|&v| g.get(v)).collect()
    }
}

/// Name prefix of the `s` embedding branch.
pub const S_EMBED_PREFIX: &str = "s_embed.";
/// Name of the zero-initialised output projection of the `s` branch.
pub const S_PROJECTION: &str = "s_embed.out";
/// Parameters of the final output convolution.
pub const LAST_LAYER: [&str; 2] = ["out.w", "out.b"];

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<R: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<R>,
}

impl<R: Real> DenoiserModel<R> {
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::default();
        let [c0, c1, c2] = config.channels;
        let e = config.embed_dim;
        let feats = 2 * config.fourier_features;

        let mut conv = |p: &mut ParamSet<R>, name: &str, cin: usize, cout: usize, gain: f64| {
            let fan_in = (cin * 9) as f64;
            let bound = gain * (6.0 / fan_in).sqrt();
            let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| R::lit(rng.gen_range(-bound..bound)));
            p.insert(&format!("{name}.w"), w);
            p.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        conv(&mut p, "in", 4, c0, 1.0);
        res_params(&mut conv, &mut p, "enc0", c0);
        conv(&mut p, "down1", c0, c1, 1.0);
        res_params(&mut conv, &mut p, "enc1", c1);
        conv(&mut p, "down2", c1, c2, 1.0);
        res_params(&mut conv, &mut p, "mid", c2);
        conv(&mut p, "up1", c2, c1, 1.0);
        conv(&mut p, "merge1", 2 * c1, c1, 1.0);
        res_params(&mut conv, &mut p, "dec1", c1);
        conv(&mut p, "up0", c1, c0, 1.0);
        conv(&mut p, "merge0", 2 * c0, c0, 1.0);
        res_params(&mut conv, &mut p, "dec0", c0);
        conv(&mut p, "out", c0, 2, 0.1);

        let mut linear = |p: &mut ParamSet<R>, name: &str, fin: usize, fout: usize, gain: f64| {
            let bound = gain * (6.0 / fin as f64).sqrt();
            let w = if bound > 0.0 {
                Tensor::from_fn(&[fin, fout], |_| R::lit(rng.gen_range(-bound..bound)))
            } else {
                Tensor::zeros(&[fin, fout])
            };
            p.insert(&format!("{name}.w"), w);
            p.insert(&format!("{name}.b"), Tensor::zeros(&[fout]));
        };
        linear(&mut p, "t_embed.hidden", feats, e, 1.0);
        linear(&mut p, "t_embed.out", e, e, 1.0);
        linear(&mut p, "s_embed.hidden", feats, e, 1.0);
        linear(&mut p, S_PROJECTION, e, e, 0.0);
        for (block, c) in [("enc0", c0), ("enc1", c1), ("mid", c2), ("dec1", c1), ("dec0", c0)] {
            linear(&mut p, &format!("{block}.emb"), e, c, 0.5);
        }
        Self { config, params: p }
    }

    /// Registers the parameters on `g`; those for which `trainable` returns
    /// true receive gradients.
    pub fn bind<'g>(&self, g: &'g Graph<R>, trainable: impl Fn(&str) -> bool) -> Result<BoundParams<'g, R>, ModelError> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            vars.push(if trainable(name) {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            });
        }
        Ok(BoundParams {
            vars,
            index: self.params.index.clone(),
        })
    }

    /// All parameters as constants (EMA / teacher / inference use).
    pub fn bind_frozen<'g>(&self, g: &'g Graph<R>) -> Result<BoundParams<'g, R>, ModelError> {
        self.bind(g, |_| false)
    }

    /// Sets the `s`-embedding output projection to zero.
    pub fn zero_s_projection(&mut self) {
        for name in [format!("{S_PROJECTION}.w"), format!("{S_PROJECTION}.b")] {
            let shape = self.params.get(&name).expect("s projection exists").shape().to_vec();
            self.params.insert(&name, Tensor::zeros(&shape));
        }
    }

    pub fn is_s_param(name: &str) -> bool {
        name.starts_with(S_EMBED_PREFIX)
    }

    fn check_pair(&self, x: &Var<'_, R>, y: &Var<'_, R>) -> Result<(), ModelError> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs != ys || xs.len() != 4 || xs[1] != 2 {
            return Err(ModelError::Shape { x: xs, y: ys });
        }
        Ok(())
    }

    /// Network estimate `F(x_t, y, t, s)` for a batch; `t` and `s` hold one
    /// time per batch element.
    pub fn f_theta<'g>(
        &self,
        p: &BoundParams<'g, R>,
        x_t: Var<'g, R>,
        y: Var<'g, R>,
        t: &[f64],
        s: &[f64],
    ) -> Result<Var<'g, R>, ModelError> {
        self.check_pair(&x_t, &y)?;
        let shape = x_t.shape();
        let batch = shape[0];
        if t.len() != batch || s.len() != batch {
            return Err(ModelError::Params(format!(
                "{} t values and {} s values for batch {batch}",
                t.len(),
                s.len()
            )));
        }
        for (&tb, &sb) in t.iter().zip(s) {
            self.check_time(tb, sb)?;
        }
        let g = x_t.graph();
        let emb = self.embedding(p, g, t, s)?;
        let (frames, bins) = (shape[2], shape[3]);
        let (pf, pb) = ((4 - frames % 4) % 4, (4 - bins % 4) % 4);

        let h = Var::concat(&[x_t, y], 1)?.pad_end_2d(pf, pb)?;
        let h0 = conv(p, "in", h, 1)?;
        let h0 = self.res_block(p, "enc0", h0, emb)?;
        let h1 = conv(p, "down1", h0.silu()?, 2)?;
        let h1 = self.res_block(p, "enc1", h1, emb)?;
        let h2 = conv(p, "down2", h1.silu()?, 2)?;
        let h2 = self.res_block(p, "mid", h2, emb)?;

        let u1 = conv(p, "up1", h2.upsample2x()?, 1)?;
        let u1 = conv(p, "merge1", Var::concat(&[u1, h1], 1)?.silu()?, 1)?;
        let u1 = self.res_block(p, "dec1", u1, emb)?;
        let u0 = conv(p, "up0", u1.upsample2x()?, 1)?;
        let u0 = conv(p, "merge0", Var::concat(&[u0, h0], 1)?.silu()?, 1)?;
        let u0 = self.res_block(p, "dec0", u0, emb)?;
        let out = conv(p, "out", u0.silu()?, 1)?;
        let out = out.slice(2, 0, frames)?.slice(3, 0, bins)?;
        Ok(x_t.add(out)?)
    }

    fn check_time(&self, t: f64, s: f64) -> Result<(), ModelError> {
        let eps = 1e-12;
        if !(t >= self.config.t_min - eps && t <= self.config.t_max + eps) {
            return Err(ModelError::InvalidTime {
                t,
                s,
                reason: "t outside [t_min, T]",
            });
        }
        if !(s >= 0.0 && s <= t) {
            return Err(ModelError::InvalidTime {
                t,
                s,
                reason: "s outside [0, t]",
            });
        }
        Ok(())
    }

    fn embedding<'g>(&self, p: &BoundParams<'g, R>, g: &'g Graph<R>, t: &[f64], s: &[f64]) -> Result<Var<'g, R>, ModelError> {
        let ft = g.constant(fourier_features(t, self.config.fourier_features))?;
        let fs = g.constant(fourier_features(s, self.config.fourier_features))?;
        let te = linear(p, "t_embed.out", linear(p, "t_embed.hidden", ft)?.silu()?)?;
        let se = linear(p, S_PROJECTION, linear(p, "s_embed.hidden", fs)?.silu()?)?;
        Ok(te.add(se)?.silu()?)
    }

    fn res_block<'g>(&self, p: &BoundParams<'g, R>, name: &str, h: Var<'g, R>, emb: Var<'g, R>) -> Result<Var<'g, R>, ModelError> {
        let bias = linear(p, &format!("{name}.emb"), emb)?;
        let bs = bias.shape();
        let bias = bias.reshape(&[bs[0], bs[1], 1, 1])?;
        let r = conv(p, &format!("{name}.conv1"), h.silu()?, 1)?.add(bias)?;
        let r = conv(p, &format!("{name}.conv2"), r.silu()?, 1)?;
        Ok(h.add(r)?)
    }

    /// `G(x_t, y, t, s)`. Exact anchors: `s == t` returns `x_t` (including the
    /// `t = s = 0` case) and `s == 0` returns `F` unchanged.
    pub fn g_theta<'g>(
        &self,
        p: &BoundParams<'g, R>,
        x_t: Var<'g, R>,
        y: Var<'g, R>,
        t: &[f64],
        s: &[f64],
    ) -> Result<Var<'g, R>, ModelError> {
        self.check_pair(&x_t, &y)?;
        let batch = x_t.shape()[0];
        if t.len() != batch || s.len() != batch {
            return Err(ModelError::Params(format!("time vectors do not match batch {batch}")));
        }
        for (&tb, &sb) in t.iter().zip(s) {
            if sb > tb || sb < 0.0 {
                return Err(ModelError::InvalidTime {
                    t: tb,
                    s: sb,
                    reason: "s outside [0, t]",
                });
            }
        }
        let needs_net: Vec<usize> = (0..batch).filter(|&b| s[b] != t[b]).collect();
        if needs_net.is_empty() {
            return Ok(x_t);
        }
        let f = if needs_net.len() == batch {
            self.f_theta(p, x_t, y, t, s)?
        } else {
            let xs = gather(x_t, &needs_net)?;
            let ys = gather(y, &needs_net)?;
            let ts: Vec<f64> = needs_net.iter().map(|&b| t[b]).collect();
            let ss: Vec<f64> = needs_net.iter().map(|&b| s[b]).collect();
            self.f_theta(p, xs, ys, &ts, &ss)?
        };
        if needs_net.len() == batch && s.iter().all(|&v| v == 0.0) {
            return Ok(f);
        }
        let mut rows = Vec::with_capacity(batch);
        let mut k = 0;
        for b in 0..batch {
            let xb = x_t.slice(0, b, 1)?;
            if s[b] == t[b] {
                rows.push(xb);
                continue;
            }
            let fb = if needs_net.len() == batch { f.slice(0, b, 1)? } else { f.slice(0, k, 1)? };
            k += 1;
            if s[b] == 0.0 {
                rows.push(fb);
            } else {
                let ratio = s[b] / t[b];
                rows.push(xb.scale(R::lit(ratio))?.add(fb.scale(R::lit(1.0 - ratio))?)?);
            }
        }
        if batch == 1 {
            return Ok(rows[0]);
        }
        Ok(Var::concat(&rows, 0)?)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut meta = metadata;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("model".into(), serde_json::to_value(&self.config).expect("config serialises"));
        }
        let mut ck = Checkpoint::new(meta);
        for (name, t) in self.params.iter() {
            ck.push(name, t);
        }
        ck
    }

    /// Rebuilds a model from a checkpoint whose metadata carries a `model` block.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("model")
                .cloned()
                .ok_or_else(|| ModelError::Params("checkpoint metadata lacks a model block".into()))?,
        )
        .map_err(|e| ModelError::Params(e.to_string()))?;
        let mut model = Self::new(config);
        model.load_params(ck)?;
        Ok(model)
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<(), ModelError> {
        for i in 0..self.params.len() {
            let name = self.params.names[i].clone();
            let t = ck.get(&name)?;
            if t.shape() != self.params.tensors[i].shape() {
                return Err(ModelError::Params(format!(
                    "{name}: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    self.params.tensors[i].shape()
                )));
            }
            self.params.set_index(i, t.cast());
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> DenoiserModel<S> {
        let mut params = ParamSet::default();
        for (n, t) in self.params.iter() {
            params.insert(n, t.cast());
        }
        DenoiserModel {
            config: self.config.clone(),
            params,
        }
    }
}

fn res_params<R: Real>(
    conv: &mut impl FnMut(&mut ParamSet<R>, &str, usize, usize, f64),
    p: &mut ParamSet<R>,
    name: &str,
    c: usize,
) {
    conv(p, &format!("{name}.conv1"), c, c, 1.0);
    conv(p, &format!("{name}.conv2"), c, c, 0.2);
}

fn conv<'g, R: Real>(p: &BoundParams<'g, R>, name: &str, x: Var<'g, R>, stride: usize) -> Result<Var<'g, R>, TensorError> {
    x.conv2d(p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), stride, 1)
}

fn linear<'g, R: Real>(p: &BoundParams<'g, R>, name: &str, x: Var<'g, R>) -> Result<Var<'g, R>, TensorError> {
    x.matmul(p.get(&format!("{name}.w")))?.add(p.get(&format!("{name}.b")))
}

fn gather<'g, R: Real>(x: Var<'g, R>, rows: &[usize]) -> Result<Var<'g, R>, TensorError> {
    let parts: Vec<_> = rows.iter().map(|&b| x.slice(0, b, 1)).collect::<Result<_, _>>()?;
    Var::concat(&parts, 0)
}

/// `[sin(w_j t), cos(w_j t)]` with `w_j` log-spaced over `[1, 1000]`.
pub fn fourier_features<R: Real>(times: &[f64], n: usize) -> Tensor<R> {
    let mut out = Vec::with_capacity(times.len() * 2 * n);
    for &t in times {
        for j in 0..n {
            let w = if n > 1 {
                (j as f64 / (n - 1) as f64 * 1000f64.ln()).exp()
            } else {
                1.0
            };
            out.push(R::lit((w * t).sin()));
        }
        for j in 0..n {
            let w = if n > 1 {
                (j as f64 / (n - 1) as f64 * 1000f64.ln()).exp()
            } else {
                1.0
            };
            out.push(R::lit((w * t).cos()));
        }
    }
    Tensor::new(&[times.len(), 2 * n], out).expect("sized")
}

/// Exponential moving average of parameters, `sg(theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow<R: Real> {
    pub params: ParamSet<R>,
    pub decay: f64,
}

impl<R: Real> EmaShadow<R> {
    pub fn new(params: &ParamSet<R>, decay: f64) -> Self {
        Self {
            params: params.clone(),
            decay,
        }
    }

    /// `shadow <- mu * shadow + (1 - mu) * theta`.
    pub fn update(&mut self, params: &ParamSet<R>) -> Result<(), ModelError> {
        self.update_with(params, self.decay)
    }

    pub fn update_with(&mut self, params: &ParamSet<R>, mu: f64) -> Result<(), ModelError> {
        if !self.params.same_layout(params) {
            return Err(ModelError::Params("EMA shadow and parameters differ in layout".into()));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(ModelError::Params(format!("EMA decay {mu} outside [0, 1]")));
        }
        if mu == 1.0 {
            return Ok(());
        }
        for i in 0..params.len() {
            let next = if mu == 0.0 {
                params.tensors[i].clone()
            } else {
                let (a, b) = (R::lit(mu), R::lit(1.0 - mu));
                self.params.tensors[i].zip_map(&params.tensors[i], |s, p| a * s + b * p)?
            };
            self.params.set_index(i, next);
        }
        Ok(())
    }

    /// A model carrying the shadow weights.
    pub fn model(&self, config: &ModelConfig) -> DenoiserModel<R> {
        DenoiserModel {
            config: config.clone(),
            params: self.params.clone(),
        }
    }
}
