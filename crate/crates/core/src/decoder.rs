use ctxmod_autodiff::{Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::sem::{ConceptSpec, InterventionSet, SemTensor, SemVars};

/// Fully connected stack; ReLU between layers unless `linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// He-scaled Gaussian weights stored `[out, in]`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, w) in widths.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            let wid = store.add(format!("{prefix}.{l}.W"), Tensor::randn(&[w[1], w[0]], std, rng)?);
            let bid = store.add(format!("{prefix}.{l}.b"), Tensor::zeros(&[w[1]])?);
            layers.push((wid, bid));
        }
        Ok(Self { layers })
    }

    /// Registers a copy of `src` under `prefix`.
    pub fn copy_of(store: &mut ParamStore, prefix: &str, src: &Mlp) -> Self {
        let layers = src
            .layers
            .iter()
            .enumerate()
            .map(|(l, (w, b))| {
                let (wv, bv) = (store.get(*w).clone(), store.get(*b).clone());
                (store.add(format!("{prefix}.{l}.W"), wv), store.add(format!("{prefix}.{l}.b"), bv))
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, linear: bool) -> Result<Var<'t>> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.linear(p.var(*w), p.var(*b))?;
            if !linear && i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Expressive layer, intervention layer and representation layer.
#[derive(Debug, Clone)]
pub struct ContextModule {
    pub spec: ConceptSpec,
    pub dim_e: usize,
    /// ReLU replaced by the identity in the expressive MLPs.
    pub linear: bool,
    pub exp_obs: Vec<Mlp>,
    pub exp_ivn: Vec<Mlp>,
    pub a0: ParamId,
    pub beta_row: Vec<ParamId>,
    pub diag: Vec<ParamId>,
    pub rep_w: ParamId,
    pub rep_b: ParamId,
}

impl ContextModule {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: ConceptSpec,
        dim_e: usize,
        linear: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.expressive_widths();
        let mut exp_obs = Vec::with_capacity(spec.m);
        for j in 0..spec.m {
            exp_obs.push(Mlp::init(store, &format!("exp.obs.{j}"), &widths, rng)?);
        }
        let exp_ivn = (0..spec.m)
            .map(|j| Mlp::copy_of(store, &format!("exp.ivn.{j}"), &exp_obs[j]))
            .collect();
        let sem = SemTensor::init(&spec, rng)?;
        let a0 = store.add("sem.A0", sem.a0);
        let beta_row = sem
            .beta_row
            .into_iter()
            .enumerate()
            .map(|(j, t)| store.add(format!("sem.beta_row.{j}"), t))
            .collect();
        let diag = sem
            .diag
            .into_iter()
            .enumerate()
            .map(|(j, t)| store.add(format!("sem.diag.{j}"), t))
            .collect();
        let std = (1.0 / spec.dim_c() as f64).sqrt();
        let rep_w = store.add("rep.W", Tensor::randn(&[dim_e, spec.dim_c()], std, rng)?);
        let rep_b = store.add("rep.b", Tensor::zeros(&[dim_e])?);
        Ok(Self {
            spec,
            dim_e,
            linear,
            exp_obs,
            exp_ivn,
            a0,
            beta_row,
            diag,
            rep_w,
            rep_b,
        })
    }

    /// Position of A0 in the parameter store.
    pub fn a0_index(&self) -> usize {
        self.a0.index()
    }

    /// Snapshot of the SEM parameters.
    pub fn sem(&self, store: &ParamStore) -> SemTensor {
        SemTensor {
            m: self.spec.m,
            w_eps: self.spec.w_eps,
            w_c: self.spec.w_c,
            a0: store.get(self.a0).clone(),
            beta_row: self.beta_row.iter().map(|&i| store.get(i).clone()).collect(),
            diag: self.diag.iter().map(|&i| store.get(i).clone()).collect(),
        }
    }

    pub fn sem_vars<'t>(&self, p: &Bound<'t>) -> SemVars<'t> {
        SemVars {
            m: self.spec.m,
            w_eps: self.spec.w_eps,
            w_c: self.spec.w_c,
            a0: p.var(self.a0),
            beta_row: self.beta_row.iter().map(|&i| p.var(i)).collect(),
            diag: self.diag.iter().map(|&i| p.var(i)).collect(),
        }
    }

    /// `ε` for a batch `z` of shape `[B, m·w_exp]`.
    pub fn expressive<'t>(&self, p: &Bound<'t>, z: Var<'t>, targets: &InterventionSet) -> Result<Var<'t>> {
        targets.check(self.spec.m)?;
        let w = self.spec.w_exp;
        let parts = (0..self.spec.m)
            .map(|j| {
                let branch = if targets.contains(j) { &self.exp_ivn[j] } else { &self.exp_obs[j] };
                branch.forward(p, z.slice(1, j * w, w)?, self.linear)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat(&parts, 1)?)
    }

    /// `c` for a batch `z`.
    pub fn concepts<'t>(&self, p: &Bound<'t>, z: Var<'t>, targets: &InterventionSet) -> Result<Var<'t>> {
        let eps = self.expressive(p, z, targets)?;
        let a = self.sem_vars(p).context_matrix(targets)?;
        Ok(eps.matmul(a)?)
    }

    /// `e = W_rep c + b_rep` for a batch `z`; any target set, including ones never trained on.
    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>, targets: &InterventionSet) -> Result<Var<'t>> {
        let c = self.concepts(p, z, targets)?;
        Ok(c.linear(p.var(self.rep_w), p.var(self.rep_b))?)
    }

    pub fn group_lasso<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        self.sem_vars(p).group_lasso()
    }

    pub fn l2<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        self.sem_vars(p).l2()
    }
}
