//! Virtual-node encoder: a molecule of any size becomes `N_Z` latent nodes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::egnn::{Backbone, BackboneConfig, Role};
use crate::error::{Error, Result};
use crate::moldata::{one_hot_types, Molecule};
use crate::params::{Ctx, Init, Linear, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const VAR_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-8;
/// Posterior variance at initialisation, before any training.
const INIT_VARIANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_z: usize,
    pub d_z: usize,
    pub num_types: usize,
    pub backbone: BackboneConfig,
}

/// Learnable features of the virtual nodes; positions always start at the origin.
#[derive(Clone, Copy, Debug)]
pub struct VirtualNodeBank {
    pub embeddings: ParamId,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z_x: Tensor,
    pub z_h: Tensor,
}

impl LatentCode {
    pub fn n_z(&self) -> usize {
        self.z_x.rows
    }

    pub fn d_z(&self) -> usize {
        self.z_h.cols
    }

    /// `(1 - lambda) * self + lambda * other` on both halves.
    pub fn lerp(&self, other: &LatentCode, lambda: f64) -> Result<LatentCode> {
        if self.z_x.shape() != other.z_x.shape() || self.z_h.shape() != other.z_h.shape() {
            return Err(Error::shape(
                format!("{:?}/{:?}", self.z_x.shape(), self.z_h.shape()),
                format!("{:?}/{:?}", other.z_x.shape(), other.z_h.shape()),
            ));
        }
        let f = |a: f64, b: f64| (1.0 - lambda) * a + lambda * b;
        Ok(LatentCode {
            z_x: self.z_x.zip_map(&other.z_x, f),
            z_h: self.z_h.zip_map(&other.z_h, f),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.z_x.is_finite() && self.z_h.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu_x: Tensor,
    /// One isotropic variance per latent node.
    pub sigma2_x: Vec<f64>,
    pub mu_h: Tensor,
    pub sigma2_h: Tensor,
}

impl LatentPosterior {
    pub fn mean(&self) -> LatentCode {
        LatentCode {
            z_x: self.mu_x.clone(),
            z_h: self.mu_h.clone(),
        }
    }
}

/// Posterior quantities as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu_x: Var,
    pub sigma2_x: Var,
    pub mu_h: Var,
    pub sigma2_h: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    atom_embed: Linear,
    pub bank: VirtualNodeBank,
    backbone: Backbone,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: EncoderConfig) -> Result<Self> {
        if config.n_z < 4 {
            return Err(Error::Config(format!("N_Z must be at least 4, got {}", config.n_z)));
        }
        if config.d_z == 0 || config.num_types == 0 {
            return Err(Error::Config("D_Z and the vocabulary size must be positive".into()));
        }
        let d = config.backbone.hidden;
        let atom_embed = Linear::new(init, "enc.atom_embed", config.num_types, d, true, 1.0);
        let embeddings = init.normal("enc.virtual", config.n_z, d, 1.0);
        let backbone = Backbone::new(init, "enc.backbone", config.backbone)?;
        let head = Linear::new(init, "enc.head", 1 + d, 1 + 2 * config.d_z, true, 1.0);
        let b = init.store.get_mut(head.b.expect("head has a bias"));
        let raw = INIT_VARIANCE.exp_m1().ln();
        b.data[0] = raw;
        b.data[1 + config.d_z..].iter_mut().for_each(|v| *v = raw);
        Ok(Encoder {
            config,
            atom_embed,
            bank: VirtualNodeBank {
                embeddings,
                count: config.n_z,
            },
            backbone,
            head,
        })
    }

    /// Encodes centred coordinates on the tape.
    pub fn forward(&self, ctx: &Ctx<'_>, coords: &Tensor, types: &[usize]) -> Result<PosteriorVars> {
        let t = ctx.tape;
        let n_z = self.config.n_z;
        let n_m = types.len();
        let d_z = self.config.d_z;
        if types.iter().any(|&v| v >= self.config.num_types) {
            return Err(Error::InvalidArgument("atom type outside vocabulary".into()));
        }
        if coords.rows != n_m {
            return Err(Error::shape(format!("{n_m}x3"), format!("{}x{}", coords.rows, coords.cols)));
        }
        let onehot = one_hot_types(types, self.config.num_types);
        let h_atoms = self.atom_embed.forward(ctx, t.constant(onehot));
        let h = t.concat_rows(&[ctx.p(self.bank.embeddings), h_atoms]);
        let mut xs = Tensor::zeros(n_z + n_m, 3);
        xs.data[n_z * 3..].copy_from_slice(&coords.data);
        let mut role = vec![Role::Update; n_z];
        role.extend(std::iter::repeat_n(Role::Condition, n_m));
        let (x, h) = self.backbone.forward(ctx, t.constant(xs), h, &role, None)?;
        let z_x = t.slice_rows(x, 0, n_z);
        let z_h = t.slice_rows(h, 0, n_z);
        let norm = t.sqrt(t.add_scalar(t.row_sum(t.square(z_x)), NORM_EPS));
        let out = self.head.forward(ctx, t.concat_cols(&[norm, z_h]));
        let pos = |v: Var| t.add_scalar(t.softplus(v), VAR_FLOOR);
        Ok(PosteriorVars {
            mu_x: z_x,
            sigma2_x: pos(t.slice_cols(out, 0, 1)),
            mu_h: t.slice_cols(out, 1, d_z),
            sigma2_h: pos(t.slice_cols(out, 1 + d_z, d_z)),
        })
    }
}

fn check_centred(mol: &Molecule) -> Result<()> {
    let c = mol.centroid();
    let off = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if off > 1e-6 {
        return Err(Error::Uncentered(off));
    }
    Ok(())
}

/// Posterior of a centred molecule.
pub fn encode(mol: &Molecule, encoder: &Encoder, store: &ParamStore) -> Result<LatentPosterior> {
    check_centred(mol)?;
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store);
    let p = encoder.forward(&ctx, &mol.coords_tensor(), &mol.types)?;
    let post = LatentPosterior {
        mu_x: tape.value(p.mu_x).clone(),
        sigma2_x: tape.value(p.sigma2_x).data.clone(),
        mu_h: tape.value(p.mu_h).clone(),
        sigma2_h: tape.value(p.sigma2_h).clone(),
    };
    if !post.mu_x.is_finite() || !post.mu_h.is_finite() || !post.sigma2_h.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(post)
}

/// Regulariser `sum 1/2 ((mu^2 + s2)/var - ln s2 - 1)` over coordinates and features.
/// Each node's coordinate variance counts once per axis.
pub fn kl_loss(post: &LatentPosterior, var_x: f64, var_h: f64) -> Result<f64> {
    if !(var_x > 0.0 && var_h > 0.0) {
        return Err(Error::InvalidArgument("prior variances must be positive".into()));
    }
    if post.sigma2_x.iter().chain(&post.sigma2_h.data).any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("posterior variances must be positive".into()));
    }
    let term = |mu: f64, s2: f64, var: f64| 0.5 * ((mu * mu + s2) / var - s2.ln() - 1.0);
    let mut total = 0.0;
    for (i, &s2) in post.sigma2_x.iter().enumerate() {
        for c in 0..3 {
            total += term(post.mu_x.at(i, c), s2, var_x);
        }
    }
    for (&mu, &s2) in post.mu_h.data.iter().zip(&post.sigma2_h.data) {
        total += term(mu, s2, var_h);
    }
    Ok(total)
}

/// Tape version of [`kl_loss`].
pub fn kl_loss_var(t: &Tape, p: &PosteriorVars, var_x: f64, var_h: f64) -> Var {
    let kx = {
        let mu2 = t.row_sum(t.square(p.mu_x));
        let s2 = t.scale(p.sigma2_x, 3.0);
        let a = t.scale(t.add(mu2, s2), 1.0 / var_x);
        t.sub(a, t.scale(t.ln(p.sigma2_x), 3.0))
    };
    let kh = {
        let a = t.scale(t.add(t.square(p.mu_h), p.sigma2_h), 1.0 / var_h);
        t.sub(a, t.ln(p.sigma2_h))
    };
    let n = (3 * t.shape(p.mu_x).0 + t.value(p.mu_h).len()) as f64;
    t.scale(t.add_scalar(t.add(t.sum_all(kx), t.sum_all(kh)), -n), 0.5)
}

/// Reparameterised draw `mu + sigma * eps`.
pub fn sample_latent<R: Rng + ?Sized>(post: &LatentPosterior, rng: &mut R) -> LatentCode {
    let mut z_x = post.mu_x.clone();
    for (i, s2) in post.sigma2_x.iter().enumerate() {
        let s = s2.sqrt();
        for v in z_x.row_mut(i) {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut z_h = post.mu_h.clone();
    for (v, s2) in z_h.data.iter_mut().zip(&post.sigma2_h.data) {
        *v += s2.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    LatentCode { z_x, z_h }
}

/// Tape version of [`sample_latent`]; gradients reach the means and variances.
pub fn sample_latent_var<R: Rng + ?Sized>(t: &Tape, p: &PosteriorVars, rng: &mut R) -> (Var, Var) {
    let (nz, dz) = t.shape(p.mu_h);
    let mut draw = |r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let ex = t.constant(draw(nz, 3));
    let eh = t.constant(draw(nz, dz));
    let z_x = t.add(p.mu_x, t.mul_col(ex, t.sqrt(p.sigma2_x)));
    let z_h = t.add(p.mu_h, t.mul(eh, t.sqrt(p.sigma2_h)));
    (z_x, z_h)
}
