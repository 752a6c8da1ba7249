//! Finite-difference checks of every differentiable op at 64-bit precision.

use compil_core::losses::{self, DDConfig};
use compil_core::prompts::{gem_fuse, inject_object, GemParam};
use compil_core::tensor::{check_gradients, Tape, Tensor, TensorError, Var};
use compil_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|x| 0.5 + x.abs())
}

fn probe<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
    // a random linear functional keeps every output entry in play
    let w = tape.constant(random(&out.shape(), seed + 1000));
    Ok(out.mul(&w)?.sum())
}

fn check<F>(name: &str, leaves: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let report = check_gradients::<_, TensorError, _>(leaves, f, STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "{name}: leaves {:?} fail, max rel error {:.3e}",
        report.failing(),
        report.max_rel_error()
    );
}

fn check_crate<F>(name: &str, leaves: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, Error>,
{
    let report = check_gradients::<_, Error, _>(leaves, f, STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "{name}: leaves {:?} fail, max rel error {:.3e}",
        report.failing(),
        report.max_rel_error()
    );
}

#[test]
fn elementwise_binary_ops() {
    let a = random(&[3, 4], 1);
    let b = random(&[4], 2);
    let c = random(&[3, 4], 3);
    check("add broadcast", &[a.clone(), b.clone()], |t, v| probe(t, v[0].add(&v[1])?, 1));
    check("sub", &[a.clone(), c.clone()], |t, v| probe(t, v[0].sub(&v[1])?, 2));
    check("mul broadcast", &[a.clone(), b.clone()], |t, v| probe(t, v[0].mul(&v[1])?, 3));
    check("div", &[a.clone(), positive(&[3, 4], 4)], |t, v| probe(t, v[0].div(&v[1])?, 4));
    check("scalar broadcast", &[a, Tensor::scalar(0.7)], |t, v| probe(t, v[0].mul(&v[1])?, 5));
}

#[test]
fn elementwise_unary_ops() {
    let a = random(&[2, 5], 10);
    let p = positive(&[2, 5], 11);
    check("neg", &[a.clone()], |t, v| probe(t, v[0].neg(), 1));
    check("scale", &[a.clone()], |t, v| probe(t, v[0].scale(-2.5), 2));
    check("add_scalar", &[a.clone()], |t, v| probe(t, v[0].add_scalar(0.3), 3));
    check("exp", &[a.clone()], |t, v| probe(t, v[0].exp(), 4));
    check("ln", &[p.clone()], |t, v| probe(t, v[0].ln(), 5));
    check("sqrt", &[p.clone()], |t, v| probe(t, v[0].sqrt(), 6));
    check("abs", &[p.clone()], |t, v| probe(t, v[0].neg().abs(), 7));
    check("relu", &[a.clone()], |t, v| probe(t, v[0].relu(), 8));
    check("gelu", &[a.clone()], |t, v| probe(t, v[0].gelu(), 9));
    check("softplus", &[a.clone()], |t, v| probe(t, v[0].softplus(), 10));
    check("acos", &[a.map(|x| 0.9 * x)], |t, v| probe(t, v[0].acos(), 11));
    check("clamp", &[a], |t, v| probe(t, v[0].clamp(-0.5, 0.5), 12));
}

#[test]
fn signed_pow_in_both_arguments() {
    let a = random(&[6], 20).map(|x| if x.abs() < 0.1 { 0.3 } else { x });
    check("signed_pow", &[a, Tensor::scalar(2.3)], |t, v| probe(t, v[0].signed_pow(&v[1])?, 1));
}

#[test]
fn matmul_variants() {
    check("matrix", &[random(&[3, 4], 30), random(&[4, 2], 31)], |t, v| {
        probe(t, v[0].matmul(&v[1])?, 1)
    });
    check("vector", &[random(&[4], 32), random(&[4, 3], 33)], |t, v| {
        probe(t, v[0].matmul(&v[1])?, 2)
    });
    check("batched", &[random(&[2, 3, 4], 34), random(&[2, 4, 5], 35)], |t, v| {
        probe(t, v[0].matmul(&v[1])?, 3)
    });
    check("shared rhs", &[random(&[2, 3, 4], 36), random(&[4, 5], 37)], |t, v| {
        probe(t, v[0].matmul(&v[1])?, 4)
    });
}

#[test]
fn shape_ops() {
    let a = random(&[2, 3, 4], 40);
    check("transpose", &[a.clone()], |t, v| probe(t, v[0].transpose()?, 1));
    check("reshape", &[a.clone()], |t, v| probe(t, v[0].reshape(&[6, 4])?, 2));
    check("permute", &[a.clone()], |t, v| probe(t, v[0].permute(&[2, 0, 1])?, 3));
    check("select_rows", &[a.clone()], |t, v| probe(t, v[0].select_rows(&[1, 0, 1])?, 4));
    check("slice_rows", &[random(&[5, 3], 41)], |t, v| probe(t, v[0].slice_rows(1, 4)?, 5));
    check("index", &[random(&[5], 42)], |t, v| probe(t, v[0].index(3)?, 6));
    check("concat_rows", &[random(&[2, 3], 43), random(&[1, 3], 44)], |t, v| {
        probe(t, t.concat_rows(&[v[0], v[1]])?, 7)
    });
}

#[test]
fn reductions_and_normalizers() {
    let a = random(&[3, 5], 50);
    check("sum", &[a.clone()], |_, v| Ok(v[0].sum().scale(1.3)));
    check("mean", &[a.clone()], |_, v| Ok(v[0].mean().scale(1.3)));
    check("sum_axis0", &[a.clone()], |t, v| probe(t, v[0].sum_axis0()?, 1));
    check("mean_axis0", &[a.clone()], |t, v| probe(t, v[0].mean_axis0()?, 2));
    check("max_axis0", &[a.clone()], |t, v| probe(t, v[0].max_axis0()?, 3));
    check("norm", &[random(&[7], 51)], |_, v| v[0].norm());
    check("softmax", &[a.clone()], |t, v| probe(t, v[0].softmax()?, 4));
    check("log_softmax", &[a.clone()], |t, v| probe(t, v[0].log_softmax()?, 5));
    check("layer_norm", &[a.clone()], |t, v| probe(t, v[0].layer_norm(1e-6)?, 6));
    check("mask_fill", &[random(&[4], 52)], |_, v| {
        Ok(v[0].mask_fill(&[true, false, true, true])?.log_softmax()?.index(2)?)
    });
}

#[test]
fn prompt_ops() {
    let sel = random(&[3, 2, 4], 60).map(|x| if x.abs() < 0.1 { 0.4 } else { x });
    check_crate("gem_fuse", &[sel, Tensor::scalar(2.7)], |t, v| {
        Ok(probe(t, gem_fuse(v[0], v[1])?, 1)?)
    });
    check_crate("gem exponent map", &[Tensor::scalar(0.4)], |_, v| Ok(GemParam::eta_var(v[0]).scale(1.1)));
    let leaves = [
        random(&[4], 61),
        random(&[3, 4], 62),
        random(&[4, 4], 63),
        random(&[4, 4], 64),
        random(&[4, 4], 65),
    ];
    check_crate("inject_object", &leaves, |t, v| {
        Ok(probe(t, inject_object(v[0], v[1], v[2], v[3], v[4])?, 2)?)
    });
}

#[test]
fn loss_ops() {
    check_crate("pairwise_angles", &[random(&[3, 5], 70), random(&[4, 5], 71)], |t, v| {
        Ok(probe(t, losses::pairwise_angles(v[0], v[1], 1e-6)?, 1)?)
    });
    let cfg = DDConfig {
        theta_thre: std::f64::consts::PI,
        ..DDConfig::default()
    };
    check_crate("dd between pools", &[random(&[3, 2, 4], 72), random(&[3, 2, 4], 73)], |_, v| {
        losses::dd_loss(v[0], v[1], &cfg, false)
    });
    check_crate("sce", &[random(&[5], 74)], |_, v| {
        losses::sce_terms(v[0], 2, Some(&[true, true, true, false, true]), 1.0, 0.3, -4.0)
    });
}
