//! Central finite-difference checks of every analytic gradient. Each
//! function draws one random instance and returns the worst relative error.

use ids_confidence::numcore::{
    clamp_logvar, gaussian_kl, mse_loss, relu, relu_backward, reparameterize_backward,
    reparameterize_with_noise, Linear, Matrix, RngStream,
};
use ids_confidence::vae::{Vae, VaeConfig};

use super::{central_diff, rel_err};

pub const H: f64 = 1e-5;

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

fn worst(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs
        .into_iter()
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn linear(rng: &mut RngStream) -> f64 {
    let (batch, din, dout) = (3, 5, 4);
    let mut layer = Linear::new(din, dout, rng);
    for b in layer.bias_mut() {
        *b = rng.normal() * 0.1;
    }
    let mut x = rng.normal_matrix(batch, din);
    let g = rng.normal_matrix(batch, dout);
    layer.zero_grad();
    layer.forward(&x).unwrap();
    let grad_x = layer.backward(&g).unwrap();
    let grad_w = layer.grad_weight().clone();
    let grad_b = layer.grad_bias().to_vec();

    let mut pairs = Vec::new();
    for i in 0..x.as_slice().len() {
        let l = layer.clone();
        let n = central_diff(x.as_mut_slice(), i, H, |v| {
            dot(
                &l.apply(&Matrix::from_vec(batch, din, v.to_vec()).unwrap())
                    .unwrap(),
                &g,
            )
        });
        pairs.push((grad_x.as_slice()[i], n));
    }
    for i in 0..grad_w.as_slice().len() {
        let mut w = layer.weight().as_slice().to_vec();
        let n = central_diff(&mut w, i, H, |v| {
            let l = Linear::from_parts(
                Matrix::from_vec(dout, din, v.to_vec()).unwrap(),
                layer.bias().to_vec(),
            )
            .unwrap();
            dot(&l.apply(&x).unwrap(), &g)
        });
        pairs.push((grad_w.as_slice()[i], n));
    }
    for i in 0..dout {
        let mut b = layer.bias().to_vec();
        let n = central_diff(&mut b, i, H, |v| {
            let l = Linear::from_parts(layer.weight().clone(), v.to_vec()).unwrap();
            dot(&l.apply(&x).unwrap(), &g)
        });
        pairs.push((grad_b[i], n));
    }
    worst(pairs)
}

/// Inputs are kept at least 0.1 away from the kink.
pub fn relu_off_boundary(rng: &mut RngStream) -> f64 {
    let (r, c) = (4, 6);
    let data: Vec<f64> = (0..r * c)
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() > 0.1 {
                break v;
            }
        })
        .collect();
    let mut x = Matrix::from_vec(r, c, data).unwrap();
    let g = rng.normal_matrix(r, c);
    let analytic = relu_backward(&x, &g).unwrap();
    let mut pairs = Vec::new();
    for i in 0..r * c {
        let n = central_diff(x.as_mut_slice(), i, H, |v| {
            dot(&relu(&Matrix::from_vec(r, c, v.to_vec()).unwrap()), &g)
        });
        pairs.push((analytic.as_slice()[i], n));
    }
    worst(pairs)
}

pub fn mse(rng: &mut RngStream) -> f64 {
    let (r, c) = (3, 7);
    let x = rng.normal_matrix(r, c);
    let mut x_hat = rng.normal_matrix(r, c);
    let (_, grad) = mse_loss(&x, &x_hat).unwrap();
    let mut pairs = Vec::new();
    for i in 0..r * c {
        let n = central_diff(x_hat.as_mut_slice(), i, H, |v| {
            mse_loss(&x, &Matrix::from_vec(r, c, v.to_vec()).unwrap())
                .unwrap()
                .0
        });
        pairs.push((grad.as_slice()[i], n));
    }
    worst(pairs)
}

pub fn kl(rng: &mut RngStream) -> f64 {
    let (r, c) = (4, 3);
    let mut mu = rng.normal_matrix(r, c);
    let mut lv = rng.normal_matrix(r, c);
    let term = gaussian_kl(&mu, &lv).unwrap();
    let mut pairs = Vec::new();
    for i in 0..r * c {
        let n = central_diff(mu.as_mut_slice(), i, H, |v| {
            gaussian_kl(&Matrix::from_vec(r, c, v.to_vec()).unwrap(), &lv)
                .unwrap()
                .value
        });
        pairs.push((term.grad_mu.as_slice()[i], n));
    }
    for i in 0..r * c {
        let n = central_diff(lv.as_mut_slice(), i, H, |v| {
            gaussian_kl(&mu, &Matrix::from_vec(r, c, v.to_vec()).unwrap())
                .unwrap()
                .value
        });
        pairs.push((term.grad_logvar.as_slice()[i], n));
    }
    worst(pairs)
}

pub fn reparameterization(rng: &mut RngStream) -> f64 {
    let (r, c) = (3, 4);
    let mut mu = rng.normal_matrix(r, c);
    let mut lv = rng.normal_matrix(r, c);
    let eps = rng.normal_matrix(r, c);
    let g = rng.normal_matrix(r, c);
    let (g_mu, g_lv) = reparameterize_backward(&g, &lv, &eps).unwrap();
    let objective = |mu: &Matrix, lv: &Matrix| {
        dot(
            &reparameterize_with_noise(mu, lv, eps.clone()).unwrap().z,
            &g,
        )
    };
    let mut pairs = Vec::new();
    for i in 0..r * c {
        let n = central_diff(mu.as_mut_slice(), i, H, |v| {
            objective(&Matrix::from_vec(r, c, v.to_vec()).unwrap(), &lv)
        });
        pairs.push((g_mu.as_slice()[i], n));
    }
    for i in 0..r * c {
        let n = central_diff(lv.as_mut_slice(), i, H, |v| {
            objective(&mu, &Matrix::from_vec(r, c, v.to_vec()).unwrap())
        });
        pairs.push((g_lv.as_slice()[i], n));
    }
    worst(pairs)
}

pub fn toy_vae_config(seed: u64, beta: f64) -> VaeConfig {
    VaeConfig {
        input_dim: 6,
        latent_dim: 3,
        hidden_dims: vec![7, 6, 5, 4],
        beta,
        seed,
        ..VaeConfig::default()
    }
}

/// Smallest |pre-activation| feeding a ReLU anywhere in the network.
fn min_abs_preact(vae: &Vae, x: &Matrix, eps: &Matrix) -> f64 {
    let layers: Vec<&Linear> = vae.layers().collect();
    let enc = vae.encoder_layers().len();
    let mut closest = f64::INFINITY;
    let mut run = |stack: &[&Linear], input: Matrix| -> Matrix {
        let mut h = stack[0].apply(&input).unwrap();
        for l in &stack[1..] {
            closest = h.as_slice().iter().fold(closest, |m, v| m.min(v.abs()));
            h = l.apply(&relu(&h)).unwrap();
        }
        h
    };
    let head = run(&layers[..enc], x.clone());
    let (mu, raw_lv) = head.split_cols(vae.latent_dim());
    let lv = clamp_logvar(&raw_lv);
    let z = reparameterize_with_noise(&mu, &lv, eps.clone()).unwrap().z;
    run(&layers[enc..], z);
    closest
}

/// Every parameter of a small VAE against the full loss with fixed noise.
/// Biases are randomized and instances with a pre-activation within 1e-3 of
/// the ReLU kink are redrawn.
pub fn full_vae(rng: &mut RngStream, seed: u64) -> f64 {
    let beta = rng.uniform(0.1, 2.0);
    let cfg = toy_vae_config(seed, beta);
    let (vae, x, eps) = loop {
        let mut vae = Vae::build(&cfg).unwrap();
        for l in vae.layers_mut() {
            for b in l.bias_mut() {
                *b = 0.2 * rng.normal();
            }
        }
        let x = Matrix::from_vec(4, 6, (0..24).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let eps = rng.normal_matrix(4, 3);
        if min_abs_preact(&vae, &x, &eps) > 1e-3 {
            break (vae, x, eps);
        }
    };
    let mut vae = vae;
    vae.zero_grad();
    vae.loss_and_gradients(&x, eps.clone(), beta).unwrap();
    let analytic: Vec<(Vec<f64>, Vec<f64>)> = vae
        .layers()
        .map(|l| (l.grad_weight().as_slice().to_vec(), l.grad_bias().to_vec()))
        .collect();

    let loss_with = |model: &Vae| {
        model
            .clone()
            .loss_and_gradients(&x, eps.clone(), beta)
            .unwrap()
            .total
    };
    let mut pairs = Vec::new();
    for (li, (gw, gb)) in analytic.iter().enumerate() {
        for i in 0..gw.len() {
            let mut w = vae.layers().nth(li).unwrap().weight().as_slice().to_vec();
            let n = central_diff(&mut w, i, H, |v| {
                let mut m = vae.clone();
                m.layers_mut()
                    .nth(li)
                    .unwrap()
                    .weight_mut()
                    .as_mut_slice()
                    .copy_from_slice(v);
                loss_with(&m)
            });
            pairs.push((gw[i], n));
        }
        for i in 0..gb.len() {
            let mut b = vae.layers().nth(li).unwrap().bias().to_vec();
            let n = central_diff(&mut b, i, H, |v| {
                let mut m = vae.clone();
                m.layers_mut()
                    .nth(li)
                    .unwrap()
                    .bias_mut()
                    .copy_from_slice(v);
                loss_with(&m)
            });
            pairs.push((gb[i], n));
        }
    }
    worst(pairs)
}

/// Runs every suite on `instances` random draws; returns `(name, worst error)`.
pub fn run_all(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = RngStream::new(seed);
    let suites: [(&'static str, fn(&mut RngStream, u64) -> f64); 6] = [
        ("linear", |r, _| linear(r)),
        ("relu", |r, _| relu_off_boundary(r)),
        ("mse", |r, _| mse(r)),
        ("kl", |r, _| kl(r)),
        ("reparameterization", |r, _| reparameterization(r)),
        ("vae_loss", full_vae),
    ];
    suites
        .iter()
        .map(|(name, f)| {
            let w = (0..instances)
                .map(|k| f(&mut rng, k as u64))
                .fold(0.0, f64::max);
            (*name, w)
        })
        .collect()
}
