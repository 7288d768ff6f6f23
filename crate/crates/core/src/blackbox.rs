use ctxmod_autodiff::{ConvGeometry, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Mlp;
use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Arch {
    Mlp { hidden: usize },
    Conv3,
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Mlp { hidden: 512 }
    }
}

const CONV_CHANNELS: [usize; 3] = [32, 64, 128];
const GEOM: ConvGeometry = ConvGeometry::new(2, 1);

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Body {
    Mlp {
        enc: Mlp,
        dec: Mlp,
    },
    Conv {
        enc: Vec<ConvLayer>,
        dec_in: (ParamId, ParamId),
        dec: Vec<ConvLayer>,
    },
}

/// Context-blind encoder and Bernoulli decoder over images flattened as `[B, 3·n·n]`
/// in channel-major order.
#[derive(Debug, Clone)]
pub struct BlackBox {
    pub arch: Arch,
    pub n: usize,
    pub dim_z: usize,
    pub dim_e: usize,
    body: Body,
    mu: (ParamId, ParamId),
    logvar: (ParamId, ParamId),
}

fn gauss<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)?)
}

fn linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    inp: usize,
    out: usize,
    std: f64,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add(format!("{name}.W"), Tensor::randn(&[out, inp], std, rng)?),
        store.add(format!("{name}.b"), Tensor::zeros(&[out])?),
    ))
}

impl BlackBox {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        arch: Arch,
        n: usize,
        dim_z: usize,
        dim_e: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pixels = 3 * n * n;
        let (body, feat) = match arch {
            Arch::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(CoreError::Config("hidden width must be positive".into()));
                }
                let enc = Mlp::init(store, "bb.enc", &[pixels, hidden, hidden], rng)?;
                let dec = Mlp::init(store, "bb.dec", &[dim_e, hidden, hidden, pixels], rng)?;
                (Body::Mlp { enc, dec }, hidden)
            }
            Arch::Conv3 => {
                if n % 8 != 0 {
                    return Err(CoreError::Config(format!("conv3 needs n divisible by 8, got {n}")));
                }
                let mut enc = Vec::new();
                let mut cin = 3;
                for (l, &c) in CONV_CHANNELS.iter().enumerate() {
                    enc.push(ConvLayer {
                        w: store.add(format!("bb.enc.{l}.W"), gauss(&[c, cin, 4, 4], cin * 16, rng)?),
                        b: store.add(format!("bb.enc.{l}.b"), Tensor::zeros(&[c, 1, 1])?),
                    });
                    cin = c;
                }
                let s = n / 8;
                let feat = CONV_CHANNELS[2] * s * s;
                let dec_in = linear(store, "bb.dec.in", dim_e, feat, (2.0 / dim_e as f64).sqrt(), rng)?;
                let mut dec = Vec::new();
                let outs = [CONV_CHANNELS[1], CONV_CHANNELS[0], 3];
                let mut cin = CONV_CHANNELS[2];
                for (l, &c) in outs.iter().enumerate() {
                    dec.push(ConvLayer {
                        w: store.add(format!("bb.dec.{l}.W"), gauss(&[cin, c, 4, 4], cin * 4, rng)?),
                        b: store.add(format!("bb.dec.{l}.b"), Tensor::zeros(&[c, 1, 1])?),
                    });
                    cin = c;
                }
                (Body::Conv { enc, dec_in, dec }, feat)
            }
        };
        let head_std = (1.0 / feat as f64).sqrt();
        let mu = linear(store, "bb.mu", feat, dim_z, head_std, rng)?;
        let logvar = linear(store, "bb.logvar", feat, dim_z, head_std * 0.1, rng)?;
        Ok(Self {
            arch,
            n,
            dim_z,
            dim_e,
            body,
            mu,
            logvar,
        })
    }

    /// Posterior parameters `(mu, logvar)`, each `[B, dim_z]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let b = x.shape()[0];
        let h = match &self.body {
            Body::Mlp { enc, .. } => enc.forward(p, x, false)?.relu()?,
            Body::Conv { enc, .. } => {
                let mut h = x.reshape(&[b, 3, self.n, self.n])?;
                for layer in enc {
                    h = h.conv2d(p.var(layer.w), GEOM)?.add(p.var(layer.b))?.relu()?;
                }
                let feat = h.shape()[1..].iter().product();
                h.reshape(&[b, feat])?
            }
        };
        let mu = h.linear(p.var(self.mu.0), p.var(self.mu.1))?;
        let logvar = h.linear(p.var(self.logvar.0), p.var(self.logvar.1))?;
        Ok((mu, logvar))
    }

    /// Bernoulli logits `[B, 3·n·n]`.
    pub fn decode<'t>(&self, p: &Bound<'t>, e: Var<'t>) -> Result<Var<'t>> {
        let b = e.shape()[0];
        match &self.body {
            Body::Mlp { dec, .. } => dec.forward(p, e, false),
            Body::Conv { dec_in, dec, .. } => {
                let s = self.n / 8;
                let mut h = e
                    .linear(p.var(dec_in.0), p.var(dec_in.1))?
                    .relu()?
                    .reshape(&[b, CONV_CHANNELS[2], s, s])?;
                for (i, layer) in dec.iter().enumerate() {
                    h = h.conv_transpose2d(p.var(layer.w), GEOM)?.add(p.var(layer.b))?;
                    if i + 1 < dec.len() {
                        h = h.relu()?;
                    }
                }
                Ok(h.reshape(&[b, 3 * self.n * self.n])?)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.mu.0, self.mu.1, self.logvar.0, self.logvar.1];
        match &self.body {
            Body::Mlp { enc, dec } => {
                for (w, b) in enc.layers.iter().chain(&dec.layers) {
                    ids.extend([*w, *b]);
                }
            }
            Body::Conv { enc, dec_in, dec } => {
                ids.extend([dec_in.0, dec_in.1]);
                for l in enc.iter().chain(dec) {
                    ids.extend([l.w, l.b]);
                }
            }
        }
        ids
    }
}
