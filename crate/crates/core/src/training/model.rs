//! The full autoencoder: parameters, encoder, decoder and the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfn::{flow_sample_discrete, loss_v_var, Decoder, NoiseSchedule};
use crate::encoder::{kl_loss_var, sample_latent_var, Encoder};
use crate::error::{Error, Result};
use crate::moldata::{center, one_hot_types, AtomCountPrior, AtomVocabulary, Molecule};
use crate::params::{Ctx, Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::config::TrainConfig;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: AtomVocabulary,
    pub prior: AtomCountPrior,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig, vocab: AtomVocabulary, prior: AtomCountPrior) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = vocab.size();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = Encoder::new(&mut init, config.encoder(k))?;
        let decoder = Decoder::new(&mut init, config.decoder(k))?;
        Ok(Model {
            config,
            vocab,
            prior,
            store,
            encoder,
            decoder,
        })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.config.schedule()
    }

    pub fn num_types(&self) -> usize {
        self.vocab.size()
    }
}

/// Loss terms of one molecule (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon_x: f64,
    pub recon_v: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon_x, self.recon_v, self.reg].iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            total: self.total * s,
            recon_x: self.recon_x * s,
            recon_v: self.recon_v * s,
            reg: self.reg * s,
        }
    }

    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.recon_x += o.recon_x;
        self.recon_v += o.recon_v;
        self.reg += o.reg;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon_x: Var,
    pub recon_v: Var,
    pub reg: Var,
}

/// Builds the per-molecule objective on the tape: encode, sample a latent,
/// draw a training time and belief from the flow, and score the decoder.
pub fn forward_loss_on<R: Rng + ?Sized>(ctx: &Ctx<'_>, model: &Model, mol: &Molecule, rng: &mut R) -> Result<LossVars> {
    let t = ctx.tape;
    let cfg = &model.config;
    let sched = model.schedule();
    let k = model.num_types();
    let mol = center(mol);
    let x = mol.coords_tensor();
    let post = model.encoder.forward(ctx, &x, &mol.types)?;
    let reg = kl_loss_var(t, &post, cfg.var_x, cfg.var_h);
    let (z_x, z_h) = sample_latent_var(t, &post, rng);

    let i = rng.random_range(1..=sched.n_steps);
    let time = (i - 1) as f64 / sched.n_steps as f64;
    let offset = Decoder::latent_offset(t, z_x);
    let target = t.add_row(t.constant(x), t.scale(offset, -1.0));
    let g = sched.gamma(time);
    let eps = Tensor::from_vec(
        mol.num_atoms(),
        3,
        (0..mol.num_atoms() * 3)
            .map(|_| (g * (1.0 - g)).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    );
    let mu = t.add(t.scale(target, g), t.constant(eps));
    let theta = flow_sample_discrete(&one_hot_types(&mol.types, k), time, &sched, rng)?;
    let out = model.decoder.forward(ctx, mu, t.constant(theta), z_x, z_h, time)?;

    let recon_x = t.scale(t.sum_all(t.square(t.sub(target, out.x_hat))), 0.5 * sched.alpha(i));
    let recon_v = loss_v_var(t, out.logits, &mol.types, sched.alpha_discrete(i), rng);
    let recon = t.scale(t.add(recon_x, recon_v), cfg.recon_weight);
    let total = if cfg.reg_weight == 0.0 {
        recon
    } else {
        t.add(recon, t.scale(reg, cfg.reg_weight))
    };
    Ok(LossVars {
        total,
        recon_x,
        recon_v,
        reg,
    })
}

fn read_parts(t: &Tape, v: &LossVars) -> LossParts {
    LossParts {
        total: t.scalar_value(v.total),
        recon_x: t.scalar_value(v.recon_x),
        recon_v: t.scalar_value(v.recon_v),
        reg: t.scalar_value(v.reg),
    }
}

/// Loss of one molecule without gradients.
pub fn forward_loss<R: Rng + ?Sized>(model: &Model, mol: &Molecule, rng: &mut R) -> Result<LossParts> {
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &model.store);
    let v = forward_loss_on(&ctx, model, mol, rng)?;
    let parts = read_parts(&tape, &v);
    if !parts.is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    Ok(parts)
}

/// Loss and parameter gradients of one molecule.
pub fn loss_and_grads<R: Rng + ?Sized>(model: &Model, mol: &Molecule, rng: &mut R) -> Result<(LossParts, Vec<Tensor>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let v = forward_loss_on(&ctx, model, mol, rng)?;
    let parts = read_parts(&tape, &v);
    if !parts.is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    let grads = tape.backward(v.total);
    Ok((parts, ctx.param_grads(&grads)))
}
