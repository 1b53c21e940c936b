//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//! Failures make the process exit non-zero only when `MOLFLAE_ACCEPTANCE_STRICT=1`.

use std::path::PathBuf;
use std::time::Instant;

use molflae::bfn::{
    bayes_update_continuous, bayes_update_discrete, loss_v_n, loss_x_n, output_distribution, sender_discrete,
    BFNState,
};
use molflae::encoder::{encode, kl_loss, LatentPosterior};
use molflae::geom::{random_rotation, RigidTransform};
use molflae::manipulate::{
    analog, encode_mean, generate, interpolate, interpolation_latents, latent_align, swap,
};
use molflae::metrics::{atom_stability, mol_stability, pearson_trend, recovery, shape_similarity};
use molflae::moldata::{center, load_xyz, one_hot_types, AtomCountPrior, AtomVocabulary, Molecule};
use molflae::tensor::Tensor;
use molflae::training::{forward_loss, loss_and_grads, Checkpoint, Model, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Desk configuration for the overfit run (16 molecules, 2000 steps).
const OVERFIT_CONFIG: &str = "
d_f=32
layers=4
heads=4
n_z=10
d_z=16
coord_gain=1.0
reg_weight=0
sigma1=0.3
beta1=5
n_steps=50
lr=0.002
adam_beta1=0.9
adam_beta2=0.999
plateau_patience=100000
batch_size=4
epochs=100000
max_steps=2000
seed=0
";

const DECODE_STEPS: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn transform_mol(m: &Molecule, t: &RigidTransform) -> Molecule {
    Molecule {
        coords: m.coords.iter().map(|p| t.apply_point(*p)).collect(),
        ..m.clone()
    }
}

fn transform_rows(x: &Tensor, t: &RigidTransform) -> Tensor {
    Tensor::from_rows(&x.to_rows3().into_iter().map(|p| t.apply_point(p)).collect::<Vec<_>>())
}

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn small_config(extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!("d_f=16\nlayers=2\nheads=2\nn_z=5\nd_z=4\nk=8\ncoord_gain=0.5\n{extra}")).unwrap()
}

fn criterion_1() -> Outcome {
    let vocab = AtomVocabulary::qm9();
    let mols = load_xyz(data("qm9_test_2000.xyz"), &vocab).unwrap();
    let (mut stable_atoms, mut atoms, mut stable_mols) = (0.0, 0usize, 0usize);
    for m in &mols {
        stable_atoms += atom_stability(m, &vocab) * m.num_atoms() as f64;
        atoms += m.num_atoms();
        stable_mols += mol_stability(m, &vocab) as usize;
    }
    let atom_pct = 100.0 * stable_atoms / atoms as f64;
    let mol_pct = 100.0 * stable_mols as f64 / mols.len() as f64;
    let pass = mols.len() >= 1000 && (atom_pct - 99.0).abs() <= 1.0 && (mol_pct - 95.2).abs() <= 1.5;
    outcome(pass, format!("{} molecules, atom stability {atom_pct:.2}%, molecule stability {mol_pct:.2}%", mols.len()))
}

fn criterion_2() -> Outcome {
    let vocab = AtomVocabulary::qm9();
    let mols = load_xyz(data("qm9_test_2000.xyz"), &vocab).unwrap();
    let model = Model::new(small_config(""), vocab, AtomCountPrior::fit(&mols).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut enc_err, mut dec_err) = (0.0f64, 0.0f64);
    for mol in mols.iter().step_by(mols.len() / 100).take(100) {
        let base = center(mol);
        let post = encode(&base, &model.encoder, &model.store).unwrap();
        let z = post.mean();
        let n = mol.num_atoms();
        let state = BFNState {
            mu: random_tensor(&mut rng, n, 3, 1.0),
            rho: 2.0,
            theta: molflae::bfn::row_softmax(&random_tensor(&mut rng, n, model.num_types(), 1.0)),
        };
        let time: f64 = rng.random();
        let out = output_distribution(&state, &z, time, &model.decoder, &model.store).unwrap();
        let c = z.z_x.column_means();
        let abs = |x: &Tensor| x.to_rows3().into_iter().map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect::<Vec<_>>();
        let (mu_abs, xhat_abs) = (abs(&state.mu), abs(&out.x_hat));
        for _ in 0..10 {
            let tr = random_rotation(&mut rng).with_translation(std::array::from_fn(|_| rng.random_range(-5.0..5.0)));
            let moved = encode_mean(&model, &transform_mol(mol, &tr)).unwrap();
            let moved_post = encode(&center(&transform_mol(mol, &tr)), &model.encoder, &model.store).unwrap();
            let rot = RigidTransform { translation: [0.0; 3], ..tr };
            enc_err = enc_err
                .max(moved.z_x.max_abs_diff(&transform_rows(&post.mu_x, &rot)))
                .max(moved.z_h.max_abs_diff(&post.mu_h))
                .max(moved_post.sigma2_h.max_abs_diff(&post.sigma2_h))
                .max(
                    moved_post
                        .sigma2_x
                        .iter()
                        .zip(&post.sigma2_x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );

            let z_moved = molflae::encoder::LatentCode {
                z_x: transform_rows(&z.z_x, &tr),
                z_h: z.z_h.clone(),
            };
            let c2 = z_moved.z_x.column_means();
            let mu2: Vec<[f64; 3]> = mu_abs
                .iter()
                .map(|p| {
                    let q = tr.apply_point(*p);
                    [q[0] - c2[0], q[1] - c2[1], q[2] - c2[2]]
                })
                .collect();
            let st2 = BFNState {
                mu: Tensor::from_rows(&mu2),
                ..state.clone()
            };
            let out2 = output_distribution(&st2, &z_moved, time, &model.decoder, &model.store).unwrap();
            let want: Vec<[f64; 3]> = xhat_abs
                .iter()
                .map(|p| {
                    let q = tr.apply_point(*p);
                    [q[0] - c2[0], q[1] - c2[1], q[2] - c2[2]]
                })
                .collect();
            dec_err = dec_err
                .max(out2.x_hat.max_abs_diff(&Tensor::from_rows(&want)))
                .max(out2.v_logits.max_abs_diff(&out.v_logits));
        }
    }
    let pass = enc_err <= 1e-10 && dec_err <= 1e-10;
    outcome(pass, format!("100 molecules x 10 motions, encoder max err {enc_err:.2e}, decoder max err {dec_err:.2e}"))
}

/// Posterior mean and precision of a Gaussian prior times a Gaussian likelihood, by quadrature.
fn grid_posterior(mu: f64, rho: f64, y: f64, alpha: f64) -> (f64, f64) {
    let sd = (rho.min(alpha)).recip().sqrt();
    let lo = mu.min(y) - 14.0 * sd;
    let hi = mu.max(y) + 14.0 * sd;
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let logp = |x: f64| -0.5 * rho * (x - mu).powi(2) - 0.5 * alpha * (y - x).powi(2);
    let peak = (0..=n).map(|i| logp(lo + i as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (logp(x) - peak).exp();
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let mean = m1 / z;
    (mean, 1.0 / (m2 / z - mean * mean))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cont_err = 0.0f64;
    for _ in 0..1000 {
        let rho = rng.random_range(0.2..20.0);
        let alpha = rng.random_range(0.05..50.0);
        let mu = rng.random_range(-3.0..3.0);
        let y = rng.random_range(-3.0..3.0);
        let (m2, r2) = bayes_update_continuous(&Tensor::scalar(mu), rho, &Tensor::scalar(y), alpha).unwrap();
        let (gm, gr) = grid_posterior(mu, rho, y, alpha);
        cont_err = cont_err.max((m2.item() - gm).abs()).max((r2 - gr).abs() / gr);
    }

    let mut disc_err = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6usize);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let theta = Tensor::from_vec(1, k, raw.iter().map(|v| v / s).collect());
        let alpha = rng.random_range(0.05..5.0);
        let truth = rng.random_range(0..k);
        let y = sender_discrete(&one_hot_types(&[truth], k), alpha, &mut rng).unwrap();
        let post = bayes_update_discrete(&theta, &y).unwrap();
        let kf = k as f64;
        let log_lik: Vec<f64> = (0..k)
            .map(|c| {
                (0..k)
                    .map(|d| {
                        let m = alpha * (kf * (c == d) as u8 as f64 - 1.0);
                        -(y.at(0, d) - m).powi(2) / (2.0 * alpha * kf)
                    })
                    .sum::<f64>()
                    + theta.at(0, c).ln()
            })
            .collect();
        let top = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = log_lik.iter().map(|l| (l - top).exp()).sum();
        for c in 0..k {
            disc_err = disc_err.max((post.at(0, c) - (log_lik[c] - top).exp() / norm).abs());
        }
    }

    let mut additive = true;
    let mut mean_err = 0.0f64;
    for _ in 0..1000 {
        let rho = rng.random_range(1..=256) as f64 / 64.0;
        let a1 = rng.random_range(1..=256) as f64 / 64.0;
        let a2 = rng.random_range(1..=256) as f64 / 64.0;
        let mu = random_tensor(&mut rng, 2, 3, 1.0);
        let y1 = random_tensor(&mut rng, 2, 3, 1.0);
        let y2 = random_tensor(&mut rng, 2, 3, 1.0);
        let (m1, r1) = bayes_update_continuous(&mu, rho, &y1, a1).unwrap();
        let (m12, r12) = bayes_update_continuous(&m1, r1, &y2, a2).unwrap();
        let pooled = y1.zip_map(&y2, |u, v| (a1 * u + a2 * v) / (a1 + a2));
        let (m, r) = bayes_update_continuous(&mu, rho, &pooled, a1 + a2).unwrap();
        additive &= r12 == r;
        mean_err = mean_err.max(m12.max_abs_diff(&m));
    }
    let pass = cont_err <= 1e-6 && disc_err <= 1e-9 && additive && mean_err <= 1e-12;
    outcome(
        pass,
        format!(
            "continuous vs grid {cont_err:.2e}, discrete vs explicit Bayes {disc_err:.2e}, precision additive {additive} (mean diff {mean_err:.1e})"
        ),
    )
}

/// Monte-Carlo estimate of KL(q || N(0, var)) with its standard error.
fn mc_kl<R: Rng>(post: &LatentPosterior, var_x: f64, var_h: f64, samples: usize, rng: &mut R) -> (f64, f64) {
    let mut dims: Vec<(f64, f64, f64)> = Vec::new();
    for (i, &s2) in post.sigma2_x.iter().enumerate() {
        for c in 0..3 {
            dims.push((post.mu_x.at(i, c), s2, var_x));
        }
    }
    for (&m, &s2) in post.mu_h.data.iter().zip(&post.sigma2_h.data) {
        dims.push((m, s2, var_h));
    }
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = 0.0;
        for &(m, s2, var) in &dims {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + s2.sqrt() * e;
            v += -0.5 * e * e - 0.5 * s2.ln() + 0.5 * z * z / var + 0.5 * var.ln();
        }
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    (mean, ((sq / n - mean * mean) / n).sqrt())
}

/// `E_s[-ln(p0 + p1 e^{-s})]`, `s ~ N(2a, 4a)`: the K=2 type loss with truth 0.
fn k2_loss_quadrature(p0: f64, alpha: f64) -> f64 {
    let (m, sd) = (2.0 * alpha, (4.0 * alpha).sqrt());
    let n = 40_000;
    let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let s = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let dens = (-0.5 * ((s - m) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let f = if s > 0.0 {
            -(p0 + (1.0 - p0) * (-s).exp()).ln()
        } else {
            s - ((1.0 - p0) + p0 * s.exp()).ln()
        };
        acc += w * dens * f;
    }
    acc * h / 3.0
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let post = LatentPosterior {
        mu_x: random_tensor(&mut rng, 3, 3, 0.8),
        sigma2_x: (0..3).map(|_| rng.random_range(0.2..2.0)).collect(),
        mu_h: random_tensor(&mut rng, 3, 2, 0.8),
        sigma2_h: Tensor::from_vec(3, 2, (0..6).map(|_| rng.random_range(0.2..2.0)).collect()),
    };
    let closed = kl_loss(&post, 1.0, 1.0).unwrap();
    let (mc, se) = mc_kl(&post, 1.0, 1.0, 1_000_000, &mut rng);
    let kl_ok = (closed - mc).abs() <= 3.0 * se;

    let mut lx_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..10usize);
        let x = random_tensor(&mut rng, n, 3, 2.0);
        let xh = random_tensor(&mut rng, n, 3, 2.0);
        let alpha = rng.random_range(0.01..100.0);
        let got = loss_x_n(&x, &xh, alpha).unwrap();
        let sd = alpha.recip().sqrt();
        let gauss_kl = |m1: f64, s1: f64, m2: f64, s2: f64| (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
        let want: f64 = x.data.iter().zip(&xh.data).map(|(a, b)| gauss_kl(*a, sd, *b, sd)).sum();
        lx_err = lx_err.max((got - want).abs() / want.abs().max(1.0));
    }

    let mut lv_err = 0.0f64;
    for &(p0, alpha) in &[(0.5, 0.5), (0.5, 1.0), (0.5, 3.0), (0.2, 1.0), (0.8, 2.0)] {
        let e = one_hot_types(&[0], 2);
        let p = Tensor::from_vec(1, 2, vec![p0, 1.0 - p0]);
        let trials = 400_000;
        let mc: f64 = (0..trials).map(|_| loss_v_n(&e, &p, alpha, &mut rng).unwrap()).sum::<f64>() / trials as f64;
        let quad = k2_loss_quadrature(p0, alpha);
        lv_err = lv_err.max((mc - quad).abs() / quad.abs());
    }
    let pass = kl_ok && lx_err <= 1e-9 && lv_err <= 0.01;
    outcome(
        pass,
        format!(
            "KL closed {closed:.4} vs MC {mc:.4} (SE {se:.4}), loss_x rel err {lx_err:.1e}, loss_v vs quadrature rel err {:.3}%",
            100.0 * lv_err
        ),
    )
}

fn criterion_5() -> Outcome {
    let vocab = AtomVocabulary::qm9();
    let mols = load_xyz(data("toy16.xyz"), &vocab).unwrap();
    let mol = mols.iter().find(|m| m.num_atoms() == 5).unwrap().clone();
    let cfg = TrainConfig::parse("d_f=8\nlayers=2\nheads=2\nn_z=4\nd_z=4\ncoord_gain=0.5\nreg_weight=0.1").unwrap();
    let mut model = Model::new(cfg, vocab, AtomCountPrior::fit(&mols).unwrap()).unwrap();
    let seed = 5;
    let (_, grads) = loss_and_grads(&model, &mol, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for _ in 0..100 {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..model.store.get(id).len());
        let orig = model.store.get(id).data[j];
        model.store.get_mut(id).data[j] = orig + eps;
        let lp = forward_loss(&model, &mol, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().total;
        model.store.get_mut(id).data[j] = orig - eps;
        let lm = forward_loss(&model, &mol, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().total;
        model.store.get_mut(id).data[j] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let an = grads[id.index()].data[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_name = format!("{}[{j}]", model.store.name(id));
        }
    }
    outcome(worst <= 1e-3, format!("100 parameters, eps 1e-4, worst relative error {worst:.2e} at {worst_name}"))
}

struct Overfit {
    model: Model,
    mols: Vec<Molecule>,
    seconds: f64,
}

fn train_overfit() -> Overfit {
    let vocab = AtomVocabulary::qm9();
    let mols = load_xyz(data("toy16.xyz"), &vocab).unwrap();
    let cfg = TrainConfig::parse(OVERFIT_CONFIG).unwrap();
    let model = Model::new(cfg, vocab, AtomCountPrior::fit(&mols).unwrap()).unwrap();
    let start = Instant::now();
    let mut tr = Trainer::new(model);
    while !tr.finished() {
        if tr.run_epoch(&mols, &[], |_| {}).unwrap().is_none() {
            break;
        }
    }
    Overfit {
        model: tr.model,
        mols,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_6(o: &Overfit) -> Outcome {
    let m = &o.model;
    let (mut acc, mut dist, mut shape) = (0.0, 0.0, 0.0);
    for (i, mol) in o.mols.iter().enumerate() {
        let out = analog(m, mol, 0, DECODE_STEPS, &mut ChaCha8Rng::seed_from_u64(600 + i as u64)).unwrap();
        let r = recovery(mol, &out).unwrap();
        acc += r.type_accuracy;
        dist += r.mean_distance;
        shape += shape_similarity(mol, &out, &m.vocab).unwrap();
    }
    let n = o.mols.len() as f64;
    let (acc, dist, shape) = (acc / n, dist / n, shape / n);
    let pass = o.mols.len() == 16 && m.config.max_steps <= 2000 && o.seconds <= 1800.0 && acc >= 0.95 && dist <= 0.3 && shape >= 0.8;
    outcome(
        pass,
        format!(
            "{} steps in {:.0}s, type recovery {:.3}, mean assigned distance {dist:.3} A, delta=0 shape similarity {shape:.3}",
            m.config.max_steps, o.seconds, acc
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut exact = true;
    for &(slope, icpt, n) in &[(2.0, 1.0, 10usize), (-0.5, 3.0, 25), (1e-3, -7.0, 4)] {
        let v: Vec<f64> = (0..n).map(|i| icpt + slope * i as f64).collect();
        let r = pearson_trend(&v, 1.0, 300.0).unwrap().pearson_r;
        exact &= (r - slope.signum()).abs() <= 1e-12;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut r_err, mut p_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(3..40usize);
        let drift = rng.random_range(-1.0..1.0);
        let v: Vec<f64> = (0..n).map(|i| drift * i as f64 + rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let rep = pearson_trend(&v, sign, 300.0).unwrap();
        let nf = n as f64;
        let xs: Vec<f64> = (0..n).map(|i| sign * i as f64).collect();
        let (sx, sy): (f64, f64) = (xs.iter().sum(), v.iter().sum());
        let sxy: f64 = xs.iter().zip(&v).map(|(a, b)| a * b).sum();
        let sxx: f64 = xs.iter().map(|a| a * a).sum();
        let syy: f64 = v.iter().map(|a| a * a).sum();
        let r = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        r_err = r_err.max((rep.pearson_r - r).abs());
        let p = null_r_tail(r.abs(), n - 2);
        p_err = p_err.max((10f64.powf(-rep.neg_log_p) - p).abs());
    }
    let pass = exact && r_err <= 1e-9 && p_err <= 1e-6;
    outcome(pass, format!("exact lines give r = +-1: {exact}; 1000 random cases, r err {r_err:.1e}, p err {p_err:.1e}"))
}

/// Two-sided null tail of a correlation with `df` degrees of freedom: the density of r is
/// proportional to (1 - r^2)^((df - 2) / 2); with r = sin(phi) it is cos(phi)^(df - 1).
fn null_r_tail(r: f64, df: usize) -> f64 {
    let f = |phi: f64| phi.cos().powi(df as i32 - 1);
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    simpson(r.asin(), half) / simpson(0.0, half)
}

fn criterion_8(o: &Overfit) -> Outcome {
    let m = &o.model;
    let mols = &o.mols;
    let mut failures: Vec<&str> = Vec::new();
    let rng = |s: u64| ChaCha8Rng::seed_from_u64(s);

    let a = &mols[1];
    let b = &mols[3];
    let z_a = encode_mean(m, a).unwrap();
    let direct = molflae::bfn::decode(&z_a, a.num_atoms(), DECODE_STEPS, &m.schedule(), &m.decoder, &m.store, &mut rng(1))
        .unwrap()
        .translated(a.centroid());
    if analog(m, a, 0, DECODE_STEPS, &mut rng(1)).unwrap() != direct {
        failures.push("analog delta 0 is not the reconstruction pathway");
    }
    let water = Molecule::new(
        vec![[0.0, 0.0, 0.117], [0.0, 0.757, -0.469], [0.0, -0.757, -0.469]],
        vec![3, 0, 0],
        m.num_types(),
    )
    .unwrap();
    let shrunk = analog(m, &water, -2, DECODE_STEPS, &mut rng(2)).unwrap();
    if shrunk.num_atoms() != 1 || analog(m, &water, -3, DECODE_STEPS, &mut rng(2)).is_ok() {
        failures.push("analog count contract");
    }

    let (s1, s2) = swap(m, a, a, DECODE_STEPS, &mut rng(3)).unwrap();
    let mut r = rng(3);
    let d1 = molflae::bfn::decode(&z_a, a.num_atoms(), DECODE_STEPS, &m.schedule(), &m.decoder, &m.store, &mut r).unwrap();
    let d2 = molflae::bfn::decode(&z_a, a.num_atoms(), DECODE_STEPS, &m.schedule(), &m.decoder, &m.store, &mut r).unwrap();
    if s1 != d1.translated(a.centroid()) || s2 != d2.translated(a.centroid()) {
        failures.push("self swap does not decode the molecule's own latent");
    }
    let (x_a, x_b) = swap(m, a, b, DECODE_STEPS, &mut rng(4)).unwrap();
    if x_a.num_atoms() != b.num_atoms() || x_b.num_atoms() != a.num_atoms() {
        failures.push("swap outputs do not follow the z_h donor's atom count");
    }

    let ends = interpolate(m, a, b, 2, DECODE_STEPS, &mut rng(5)).unwrap();
    if ends.len() != 2 || ends[0].num_atoms() != a.num_atoms() || ends[1].num_atoms() != b.num_atoms() {
        failures.push("two-point interpolation is not the endpoints");
    }
    let path = interpolate(m, a, b, 5, DECODE_STEPS, &mut rng(6)).unwrap();
    if path[0] != analog(m, a, 0, DECODE_STEPS, &mut rng(6)).unwrap() {
        failures.push("interpolation start differs from analog(A, 0)");
    }
    let z_b = encode_mean(m, b).unwrap();
    let fw = interpolation_latents(&z_a, &z_b, 7).unwrap();
    let bw = interpolation_latents(&z_b, &z_a, 7).unwrap();
    if (0..7).any(|j| fw[j].1.z_x.max_abs_diff(&bw[6 - j].1.z_x) > 1e-12 || fw[j].1.z_h.max_abs_diff(&bw[6 - j].1.z_h) > 1e-12) {
        failures.push("interpolation latents not symmetric");
    }

    let self_align = latent_align(m, a, a).unwrap();
    if self_align.geodesic_distance(&RigidTransform::identity()) > 1e-6
        || self_align.translation.iter().any(|v| v.abs() > 1e-6)
    {
        failures.push("self alignment is not the identity");
    }
    if !generate(m, 0, DECODE_STEPS, &mut rng(7)).unwrap().is_empty()
        || generate(m, 3, DECODE_STEPS, &mut rng(8)).unwrap() != generate(m, 3, DECODE_STEPS, &mut rng(8)).unwrap()
    {
        failures.push("generate count or seed contract");
    }

    let mut wins = 0;
    let mut pairs = 0;
    let mut undefined = 0;
    'outer: for i in 0..mols.len() {
        for j in i + 1..mols.len() {
            if pairs == 100 {
                break 'outer;
            }
            let (keep_x, keep_h) = swap(m, &mols[i], &mols[j], DECODE_STEPS, &mut rng(800 + pairs as u64)).unwrap();
            let sx = shape_similarity(&keep_x, &mols[i], &m.vocab);
            let sh = shape_similarity(&keep_h, &mols[i], &m.vocab);
            match (sx, sh) {
                (Ok(sx), Ok(sh)) => wins += (sx > sh) as usize,
                _ => undefined += 1,
            }
            pairs += 1;
        }
    }
    let frac = wins as f64 / pairs as f64;
    let pass = failures.is_empty() && frac >= 0.7;
    let contracts = if failures.is_empty() { "all contracts hold".to_string() } else { failures.join("; ") };
    outcome(pass, format!("{contracts}; preserve-z_x beats preserve-z_h on {wins}/{pairs} pairs ({undefined} without heavy atoms, counted as losses)"))
}

fn criterion_9() -> Outcome {
    let vocab = AtomVocabulary::qm9();
    let mols = load_xyz(data("toy16.xyz"), &vocab).unwrap();
    let cfg = small_config("batch_size=4\nmax_steps=12\nepochs=100\nplateau_patience=1");
    let model = Model::new(cfg, vocab, AtomCountPrior::fit(&mols).unwrap()).unwrap();

    let mut full = Trainer::new(model.clone());
    let mut losses = Vec::new();
    while !full.finished() {
        if full.run_epoch(&mols, &mols[..4], |s| losses.push(s.loss.total)).unwrap().is_none() {
            break;
        }
    }

    let mut first = Trainer::new(model);
    first.model.config.max_steps = 6;
    let mut resumed_losses = Vec::new();
    while !first.finished() {
        if first.run_epoch(&mols, &mols[..4], |s| resumed_losses.push(s.loss.total)).unwrap().is_none() {
            break;
        }
    }
    let mut ck = first.checkpoint();
    ck.model.config.max_steps = 12;
    let bytes = ck.to_bytes();
    let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
    let identical = reloaded.to_bytes() == bytes;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    reloaded.save(&path).unwrap();
    let mut second = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap());
    while !second.finished() {
        if second.run_epoch(&mols, &mols[..4], |s| resumed_losses.push(s.loss.total)).unwrap().is_none() {
            break;
        }
    }
    let diff = losses
        .iter()
        .zip(&resumed_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass = identical && losses.len() == 12 && resumed_losses.len() == 12 && diff <= 1e-6;
    outcome(pass, format!("save-load-save byte identical: {identical}; resumed run max loss diff over 12 steps {diff:.1e}"))
}

fn main() {
    let total = Instant::now();
    let mut passed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        passed += o.pass as usize;
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    };
    report(1, "qm9 reference stability", &criterion_1);
    report(2, "equivariance", &criterion_2);
    report(3, "bayesian updates", &criterion_3);
    report(4, "closed-form losses", &criterion_4);
    report(5, "gradient check", &criterion_5);
    let overfit = train_overfit();
    report(6, "overfit reconstruction", &|| criterion_6(&overfit));
    report(7, "trend statistics", &criterion_7);
    report(8, "latent manipulation", &|| criterion_8(&overfit));
    report(9, "checkpoint round trip", &criterion_9);
    println!("acceptance: {passed}/9 criteria pass in {:.0}s", total.elapsed().as_secs_f64());
    let strict = std::env::var("MOLFLAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if passed < 9 && strict {
        std::process::exit(1);
    }
}
