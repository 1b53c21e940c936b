//! Bayesian flow decoder: senders, Bayesian updates, flow distributions,
//! discrete-time losses and the parameter-space sampling loop.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::egnn::{Backbone, BackboneConfig, Role};
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::moldata::Molecule;
use crate::params::{Ctx, Init, Linear, ParamStore};
use crate::tape::{logsumexp, Tape, Var};
use crate::tensor::Tensor;

/// Accuracy schedules for coordinates (`sigma1`) and types (`beta1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma1: f64,
    pub beta1: f64,
    pub n_steps: usize,
}

impl NoiseSchedule {
    pub fn new(sigma1: f64, beta1: f64, n_steps: usize) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma1 < 1.0) {
            return Err(Error::Config(format!("sigma1 must lie in (0, 1), got {sigma1}")));
        }
        if !(beta1 > 0.0 && beta1.is_finite()) {
            return Err(Error::Config(format!("beta1 must be positive, got {beta1}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(NoiseSchedule { sigma1, beta1, n_steps })
    }

    /// `1 - sigma1^(2t)`.
    pub fn gamma(&self, t: f64) -> f64 {
        -(2.0 * t * self.sigma1.ln()).exp_m1()
    }

    /// Accumulated coordinate accuracy `sigma1^(-2t) - 1`.
    pub fn beta(&self, t: f64) -> f64 {
        (-2.0 * t * self.sigma1.ln()).exp_m1()
    }

    /// Coordinate accuracy of step `i` in `1..=n`.
    pub fn alpha(&self, i: usize) -> f64 {
        let n = self.n_steps as f64;
        self.beta(i as f64 / n) - self.beta((i - 1) as f64 / n)
    }

    /// Accumulated type accuracy `beta1 t^2`.
    pub fn beta_discrete(&self, t: f64) -> f64 {
        self.beta1 * t * t
    }

    pub fn alpha_discrete(&self, i: usize) -> f64 {
        let n = self.n_steps as f64;
        self.beta_discrete(i as f64 / n) - self.beta_discrete((i - 1) as f64 / n)
    }
}

/// Receiver belief over one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct BFNState {
    pub mu: Tensor,
    pub rho: f64,
    pub theta: Tensor,
}

impl BFNState {
    /// Standard normal coordinates and uniform types.
    pub fn prior(n_atoms: usize, k: usize) -> Self {
        BFNState {
            mu: Tensor::zeros(n_atoms, 3),
            rho: 1.0,
            theta: Tensor::filled(n_atoms, k, 1.0 / k as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub x_hat: Tensor,
    pub v_logits: Tensor,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn check_one_hot(e: &Tensor) -> Result<()> {
    for r in 0..e.rows {
        let row = e.row(r);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        if ones != 1 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument(format!("row {r} is not one-hot")));
        }
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1)")));
    }
    Ok(())
}

pub fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let l = logsumexp(x.row(r));
        out.row_mut(r).iter_mut().for_each(|v| *v = (*v - l).exp());
    }
    out
}

/// `y ~ N(x, 1/alpha)` elementwise.
pub fn sender_continuous<R: Rng + ?Sized>(x: &Tensor, alpha: f64, rng: &mut R) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy must be positive, got {alpha}")));
    }
    let s = alpha.recip().sqrt();
    let eps = normal_tensor(rng, x.rows, x.cols);
    Ok(x.zip_map(&eps, |m, e| m + s * e))
}

/// `y ~ N(alpha (K e - 1), alpha K)` for one-hot rows `e`.
pub fn sender_discrete<R: Rng + ?Sized>(e_v: &Tensor, alpha: f64, rng: &mut R) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy must be positive, got {alpha}")));
    }
    check_one_hot(e_v)?;
    Ok(discrete_draw(e_v, alpha, rng))
}

/// Shared by the sender and the flow: `mean = beta (K p - 1)`, `var = beta K`.
fn discrete_draw<R: Rng + ?Sized>(p: &Tensor, beta: f64, rng: &mut R) -> Tensor {
    let k = p.cols as f64;
    let s = (beta * k).sqrt();
    let eps = normal_tensor(rng, p.rows, p.cols);
    p.zip_map(&eps, |pv, e| beta * (k * pv - 1.0) + s * e)
}

pub fn bayes_update_continuous(mu: &Tensor, rho: f64, y: &Tensor, alpha: f64) -> Result<(Tensor, f64)> {
    if !(rho > 0.0) || !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("need rho > 0 and alpha >= 0, got {rho}, {alpha}")));
    }
    if mu.shape() != y.shape() {
        return Err(Error::shape(format!("{:?}", mu.shape()), format!("{:?}", y.shape())));
    }
    let rho2 = rho + alpha;
    Ok((mu.zip_map(y, |m, v| (rho * m + alpha * v) / rho2), rho2))
}

/// `theta' ∝ exp(y) * theta` per row, evaluated in log space.
pub fn bayes_update_discrete(theta: &Tensor, y: &Tensor) -> Result<Tensor> {
    if theta.shape() != y.shape() {
        return Err(Error::shape(format!("{:?}", theta.shape()), format!("{:?}", y.shape())));
    }
    let mut out = Tensor::zeros(theta.rows, theta.cols);
    let mut logs = vec![0.0; theta.cols];
    for r in 0..theta.rows {
        for (l, (t, v)) in logs.iter_mut().zip(theta.row(r).iter().zip(y.row(r))) {
            *l = t.ln() + v;
        }
        let z = logsumexp(&logs);
        if !z.is_finite() {
            return Err(Error::Degenerate(format!("zero normaliser in row {r}")));
        }
        for (o, l) in out.row_mut(r).iter_mut().zip(&logs) {
            *o = (l - z).exp();
        }
    }
    Ok(out)
}

/// Draws the coordinate belief after absorbing accuracy `beta(t)` from the prior.
pub fn flow_sample_continuous<R: Rng + ?Sized>(
    x: &Tensor,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, f64)> {
    check_time(t)?;
    let g = schedule.gamma(t);
    let s = (g * (1.0 - g)).sqrt();
    let eps = normal_tensor(rng, x.rows, x.cols);
    Ok((x.zip_map(&eps, |m, e| g * m + s * e), 1.0 / (1.0 - g)))
}

/// Single-sample type belief `softmax(y)`, `y ~ N(beta'(t)(K e - 1), beta'(t) K)`.
pub fn flow_sample_discrete<R: Rng + ?Sized>(
    e_v: &Tensor,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    check_time(t)?;
    check_one_hot(e_v)?;
    let y = discrete_draw(e_v, schedule.beta_discrete(t), rng);
    Ok(row_softmax(&y))
}

/// `alpha/2 * ||x - x_hat||^2`.
pub fn loss_x_n(x: &Tensor, x_hat: &Tensor, alpha: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", x_hat.shape())));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy must be positive, got {alpha}")));
    }
    Ok(0.5 * alpha * x.zip_map(x_hat, |a, b| a - b).sq_norm())
}

/// `-||y_d - alpha (K e_k - 1)||^2 / (2 alpha K)` for every atom `d` and type `k`.
/// The Gaussian normalisers are omitted because they cancel in the loss.
fn sender_log_kernel(y: &Tensor, alpha: f64) -> Tensor {
    let k = y.cols;
    let kf = k as f64;
    let mut out = Tensor::zeros(y.rows, k);
    for d in 0..y.rows {
        let row = y.row(d);
        let base: f64 = row.iter().map(|v| (v + alpha) * (v + alpha)).sum();
        for c in 0..k {
            let on = row[c] - alpha * (kf - 1.0);
            let off = row[c] + alpha;
            let sq = base - off * off + on * on;
            *out.at_mut(d, c) = -sq / (2.0 * alpha * kf);
        }
    }
    out
}

/// Single-sample estimate of the discrete-time type loss for output probabilities `p_out`.
pub fn loss_v_n<R: Rng + ?Sized>(e_v: &Tensor, p_out: &Tensor, alpha: f64, rng: &mut R) -> Result<f64> {
    if e_v.shape() != p_out.shape() {
        return Err(Error::shape(format!("{:?}", e_v.shape()), format!("{:?}", p_out.shape())));
    }
    let y = sender_discrete(e_v, alpha, rng)?;
    let ker = sender_log_kernel(&y, alpha);
    let mut total = 0.0;
    let mut terms = vec![0.0; e_v.cols];
    for d in 0..e_v.rows {
        let truth = e_v.row(d).iter().position(|v| *v == 1.0).unwrap_or(0);
        for (c, term) in terms.iter_mut().enumerate() {
            *term = p_out.at(d, c).ln() + ker.at(d, c);
        }
        let mix = logsumexp(&terms);
        if !mix.is_finite() {
            return Err(Error::NonFinite(format!("mixture log-density underflow in row {d}")));
        }
        total += ker.at(d, truth) - mix;
    }
    Ok(total)
}

/// Tape version of [`loss_v_n`] taking logits; `y` is drawn outside the tape.
pub fn loss_v_var<R: Rng + ?Sized>(t: &Tape, logits: Var, types: &[usize], alpha: f64, rng: &mut R) -> Var {
    let k = t.shape(logits).1;
    let e = crate::moldata::one_hot_types(types, k);
    let y = discrete_draw(&e, alpha, rng);
    let ker = sender_log_kernel(&y, alpha);
    let truth: f64 = types.iter().enumerate().map(|(d, &c)| ker.at(d, c)).sum();
    let mix = t.logsumexp_rows(t.add(t.log_softmax(logits), t.constant(ker)));
    t.add_scalar(t.scale(t.sum_all(mix), -1.0), truth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_z: usize,
    pub num_types: usize,
    pub backbone: BackboneConfig,
}

/// Network mapping a belief state and a latent code to output parameters.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    type_embed: Linear,
    latent_embed: Linear,
    backbone: Backbone,
    type_out: Linear,
}

/// Decoder outputs on the tape, in the frame of the centred latent.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub x_hat: Var,
    pub logits: Var,
    /// Mean of the latent coordinates, `1x3`.
    pub offset: Var,
}

impl Decoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: DecoderConfig) -> Result<Self> {
        let mut bb = config.backbone;
        bb.time_conditioned = true;
        let d = bb.hidden;
        Ok(Decoder {
            config: DecoderConfig { backbone: bb, ..config },
            type_embed: Linear::new(init, "dec.type_embed", config.num_types, d, true, 1.0),
            latent_embed: Linear::new(init, "dec.latent_embed", config.d_z, d, true, 1.0),
            backbone: Backbone::new(init, "dec.backbone", bb)?,
            type_out: Linear::new(init, "dec.type_out", d, config.num_types, true, 1.0),
        })
    }

    /// Mean of the rows of `z_x` as a `1x3` variable.
    pub fn latent_offset(t: &Tape, z_x: Var) -> Var {
        let n = t.shape(z_x).0;
        t.matmul(t.constant(Tensor::filled(1, n, 1.0 / n as f64)), z_x)
    }

    /// `mu` and the outputs are expressed relative to the latent centroid.
    pub fn forward(&self, ctx: &Ctx<'_>, mu: Var, theta: Var, z_x: Var, z_h: Var, time: f64) -> Result<DecoderVars> {
        let t = ctx.tape;
        let (n_m, k) = t.shape(theta);
        let (n_z, d_z) = t.shape(z_h);
        if k != self.config.num_types || d_z != self.config.d_z || t.shape(mu) != (n_m, 3) || t.shape(z_x) != (n_z, 3) {
            return Err(Error::shape(
                format!("N×3 / N×{} / Z×3 / Z×{}", self.config.num_types, self.config.d_z),
                format!("{:?} / {:?} / {:?} / {:?}", t.shape(mu), (n_m, k), t.shape(z_x), (n_z, d_z)),
            ));
        }
        let offset = Self::latent_offset(t, z_x);
        let zc = t.add_row(z_x, t.scale(offset, -1.0));
        let h = t.concat_rows(&[self.type_embed.forward(ctx, theta), self.latent_embed.forward(ctx, z_h)]);
        let x = t.concat_rows(&[mu, zc]);
        let mut role = vec![Role::Update; n_m];
        role.extend(std::iter::repeat_n(Role::Condition, n_z));
        let (x, h) = self.backbone.forward(ctx, x, h, &role, Some(time))?;
        let x_hat = t.slice_rows(x, 0, n_m);
        let logits = self.type_out.forward(ctx, t.slice_rows(h, 0, n_m));
        Ok(DecoderVars { x_hat, logits, offset })
    }
}

/// Network output for a belief state given in the centred latent frame.
pub fn output_distribution(
    state: &BFNState,
    z: &LatentCode,
    t: f64,
    decoder: &Decoder,
    store: &ParamStore,
) -> Result<NetworkOutput> {
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store);
    let out = decoder.forward(
        &ctx,
        tape.constant(state.mu.clone()),
        tape.constant(state.theta.clone()),
        tape.constant(z.z_x.clone()),
        tape.constant(z.z_h.clone()),
        t,
    )?;
    let o = NetworkOutput {
        x_hat: tape.value(out.x_hat).clone(),
        v_logits: tape.value(out.logits).clone(),
    };
    if !o.x_hat.is_finite() || !o.v_logits.is_finite() {
        return Err(Error::NonFinite("decoder output".into()));
    }
    Ok(o)
}

/// Parameter-space sampling of an `n_atoms` molecule in the latent's frame.
pub fn decode<R: Rng + ?Sized>(
    z: &LatentCode,
    n_atoms: usize,
    steps: usize,
    schedule: &NoiseSchedule,
    decoder: &Decoder,
    store: &ParamStore,
    rng: &mut R,
) -> Result<Molecule> {
    if n_atoms == 0 {
        return Err(Error::InvalidArgument("molecule needs at least one atom".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one sampling step is required".into()));
    }
    let k = decoder.config.num_types;
    let mut state = BFNState::prior(n_atoms, k);
    for i in 1..=steps {
        let t = (i - 1) as f64 / steps as f64;
        let out = output_distribution(&state, z, t, decoder, store)
            .map_err(|e| Error::NonFinite(format!("sampling step {i}: {e}")))?;
        let g = schedule.gamma(t);
        let s = (g * (1.0 - g)).sqrt();
        let eps = normal_tensor(rng, n_atoms, 3);
        state.mu = out.x_hat.zip_map(&eps, |x, e| g * x + s * e);
        state.rho = 1.0 / (1.0 - g);
        let p = row_softmax(&out.v_logits);
        state.theta = row_softmax(&discrete_draw(&p, schedule.beta_discrete(t), rng));
        if !state.mu.is_finite() || !state.theta.is_finite() {
            return Err(Error::NonFinite(format!("sampling step {i}")));
        }
    }
    let out = output_distribution(&state, z, 1.0, decoder, store)?;
    let c = z.z_x.column_means();
    let coords = out
        .x_hat
        .to_rows3()
        .into_iter()
        .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
        .collect();
    let types = (0..n_atoms)
        .map(|r| {
            let row = out.v_logits.row(r);
            (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect();
    Molecule::new(coords, types, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(0.001, 1.0, 1000).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        assert_eq!(s.gamma(0.0), 0.0);
        assert_eq!(s.beta(0.0), 0.0);
        let mut prev = -1.0;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let g = s.gamma(t);
            assert!((0.0..1.0).contains(&g) && g > prev);
            prev = g;
            assert!((s.beta(t) - g / (1.0 - g)).abs() <= 1e-9 * s.beta(t).max(1.0));
        }
        let total: f64 = (1..=1000).map(|i| s.alpha(i)).sum();
        assert!((total - s.beta(1.0)).abs() < 1e-6 * s.beta(1.0));
        assert!((1..=1000).all(|i| s.alpha(i) > 0.0 && s.alpha_discrete(i) > 0.0));
        assert!(NoiseSchedule::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn sender_limits_and_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let y = sender_continuous(&x, 1e12, &mut rng).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
        assert!(sender_continuous(&x, 0.0, &mut rng).is_err());
        let e = Tensor::from_vec(1, 2, vec![1.0, 0.0]);
        let n = 20_000;
        let mut m = [0.0; 2];
        for _ in 0..n {
            let y = sender_discrete(&e, 1.0, &mut rng).unwrap();
            m[0] += y.data[0] / n as f64;
            m[1] += y.data[1] / n as f64;
        }
        assert!((m[0] - 1.0).abs() < 0.05 && (m[1] + 1.0).abs() < 0.05);
        assert!(sender_discrete(&e, 0.0, &mut rng).is_err());
        assert!(sender_discrete(&Tensor::from_vec(1, 2, vec![0.5, 0.5]), 1.0, &mut rng).is_err());
    }

    #[test]
    fn bayes_update_arithmetic() {
        let mu = Tensor::scalar(0.0);
        let (m, r) = bayes_update_continuous(&mu, 1.0, &Tensor::scalar(2.0), 3.0).unwrap();
        assert_eq!((m.item(), r), (1.5, 4.0));
        let (m, r) = bayes_update_continuous(&mu, 1.0, &Tensor::scalar(2.0), 0.0).unwrap();
        assert_eq!((m.item(), r), (0.0, 1.0));
        let theta = Tensor::filled(1, 3, 1.0 / 3.0);
        let same = bayes_update_discrete(&theta, &Tensor::zeros(1, 3)).unwrap();
        assert!(same.max_abs_diff(&theta) < 1e-15);
        let y = Tensor::from_vec(1, 3, vec![2f64.ln(), 0.0, 0.0]);
        let upd = bayes_update_discrete(&theta, &y).unwrap();
        assert!(upd.max_abs_diff(&Tensor::from_vec(1, 3, vec![0.5, 0.25, 0.25])) < 1e-15);
        let neg = Tensor::filled(1, 3, f64::NEG_INFINITY);
        assert!(bayes_update_discrete(&theta, &neg).is_err());
    }

    #[test]
    fn flow_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(2, 3, vec![1.0; 6]);
        let (mu, rho) = flow_sample_continuous(&x, 0.0, &sched(), &mut rng).unwrap();
        assert_eq!(mu, Tensor::zeros(2, 3));
        assert_eq!(rho, 1.0);
        assert!(flow_sample_continuous(&x, 1.0, &sched(), &mut rng).is_err());
        let e = crate::moldata::one_hot_types(&[0, 2], 3);
        let th = flow_sample_discrete(&e, 0.0, &sched(), &mut rng).unwrap();
        assert!(th.max_abs_diff(&Tensor::filled(2, 3, 1.0 / 3.0)) < 1e-15);
        let th = flow_sample_discrete(&e, 0.7, &sched(), &mut rng).unwrap();
        for r in 0..2 {
            assert!((th.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_x_arithmetic() {
        let x = Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        assert_eq!(loss_x_n(&x, &x, 2.0).unwrap(), 0.0);
        assert_eq!(loss_x_n(&x, &Tensor::zeros(1, 3), 2.0).unwrap(), 1.0);
        assert!(loss_x_n(&x, &Tensor::zeros(2, 3), 2.0).is_err());
    }

    #[test]
    fn loss_v_tape_matches_direct() {
        let logits = Tensor::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]);
        let types = [2usize, 0];
        let t = Tape::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let v = t.scalar_value(loss_v_var(&t, t.constant(logits.clone()), &types, 0.7, &mut r1));
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let e = crate::moldata::one_hot_types(&types, 3);
        let d = loss_v_n(&e, &row_softmax(&logits), 0.7, &mut r2).unwrap();
        assert!((v - d).abs() < 1e-12, "{v} vs {d}");
    }

    fn decoder() -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DecoderConfig {
            d_z: 4,
            num_types: 3,
            backbone: BackboneConfig {
                hidden: 8,
                layers: 2,
                heads: 2,
                k: 32,
                attention: true,
                time_conditioned: true,
                coord_gain: 0.001,
            },
        };
        let d = Decoder::new(&mut Init { store: &mut store, rng: &mut rng }, cfg).unwrap();
        (store, d)
    }

    fn latent(rng: &mut ChaCha8Rng) -> LatentCode {
        LatentCode {
            z_x: normal_tensor(rng, 5, 3),
            z_h: normal_tensor(rng, 5, 4),
        }
    }

    #[test]
    fn output_shapes_and_equivariance() {
        let (store, dec) = decoder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut z = latent(&mut rng);
        let c = z.z_x.column_means();
        for r in 0..5 {
            for k in 0..3 {
                *z.z_x.at_mut(r, k) -= c[k];
            }
        }
        for n in [1, 4, 7] {
            let mut st = BFNState::prior(n, 3);
            st.mu = normal_tensor(&mut rng, n, 3);
            let o = output_distribution(&st, &z, 0.4, &dec, &store).unwrap();
            assert_eq!(o.x_hat.shape(), (n, 3));
            assert_eq!(o.v_logits.shape(), (n, 3));
            assert_eq!(output_distribution(&st, &z, 0.4, &dec, &store).unwrap(), o);
            let r = random_rotation(&mut rng);
            let rot = |t: &Tensor| Tensor::from_rows(&t.to_rows3().iter().map(|p| r.apply_point(*p)).collect::<Vec<_>>());
            let st2 = BFNState { mu: rot(&st.mu), ..st.clone() };
            let z2 = LatentCode { z_x: rot(&z.z_x), z_h: z.z_h.clone() };
            let o2 = output_distribution(&st2, &z2, 0.4, &dec, &store).unwrap();
            assert!(rot(&o.x_hat).max_abs_diff(&o2.x_hat) < 1e-10);
            assert!(o.v_logits.max_abs_diff(&o2.v_logits) < 1e-10);
        }
    }

    #[test]
    fn decode_determinism_and_one_step() {
        let (store, dec) = decoder();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = latent(&mut rng);
        let s = sched();
        let a = decode(&z, 6, 5, &s, &dec, &store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = decode(&z, 6, 5, &s, &dec, &store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_atoms(), 6);
        assert!(decode(&z, 0, 5, &s, &dec, &store, &mut rng).is_err());
        let one = decode(&z, 3, 1, &s, &dec, &store, &mut rng).unwrap();
        let direct = output_distribution(&BFNState::prior(3, 3), &z, 1.0, &dec, &store).unwrap();
        let c = z.z_x.column_means();
        for (a, p) in one.coords.iter().zip(direct.x_hat.to_rows3()) {
            for k in 0..3 {
                assert!((a[k] - p[k] - c[k]).abs() < 1e-12);
            }
        }
    }
}
