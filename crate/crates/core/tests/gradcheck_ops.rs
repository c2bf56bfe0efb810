//! Finite-difference sweep over the op catalog: every op with smooth
//! regions must pass a central-difference gradient check at random points
//! chosen away from kinks, in f64.

use textlift_core::rng::RngStream;
use textlift_core::tensor::{check_gradients, Tensor};

const POINTS: usize = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut RngStream, away_from: Option<f64>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-2.0, 2.0);
            match away_from {
                Some(kink) if (v - kink).abs() < 0.15 => continue,
                _ => break v,
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), values).unwrap()
}

fn positive_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform(0.2, 3.0)).collect();
    Tensor::from_vec(shape.to_vec(), values).unwrap()
}

fn check<FN>(name: &str, rng: &mut RngStream, point_fn: impl Fn(&mut RngStream) -> Tensor<f64>, f: FN)
where
    FN: Fn(&Tensor<f64>) -> Result<Tensor<f64>, textlift_core::tensor::TensorError>,
{
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let point = point_fn(rng);
        let report = check_gradients(&f, &point, EPS).unwrap();
        worst = worst.max(report.max_rel_err);
        assert!(
            report.max_rel_err < TOL,
            "{name}: point {i} failed with rel err {}",
            report.max_rel_err
        );
    }
    eprintln!("{name}: worst rel err {worst:.2e} over {POINTS} points");
}

#[test]
fn elementwise_unary_ops_pass_gradcheck() {
    let mut rng = RngStream::new(101);
    check("sigmoid", &mut rng, |r| random_tensor(&[6], r, None), |x| {
        Ok(x.sigmoid().sum(None, false)?)
    });
    let mut rng = RngStream::new(102);
    check("tanh", &mut rng, |r| random_tensor(&[6], r, None), |x| {
        Ok(x.tanh().sum(None, false)?)
    });
    let mut rng = RngStream::new(103);
    check("exp", &mut rng, |r| random_tensor(&[6], r, None), |x| {
        Ok(x.exp().sum(None, false)?)
    });
    let mut rng = RngStream::new(104);
    check("log", &mut rng, |r| positive_tensor(&[6], r), |x| {
        Ok(x.log().sum(None, false)?)
    });
    let mut rng = RngStream::new(105);
    check("abs", &mut rng, |r| random_tensor(&[6], r, Some(0.0)), |x| {
        Ok(x.abs().sum(None, false)?)
    });
    let mut rng = RngStream::new(106);
    check("relu", &mut rng, |r| random_tensor(&[6], r, Some(0.0)), |x| {
        Ok(x.relu().sum(None, false)?)
    });
    let mut rng = RngStream::new(107);
    check("scale", &mut rng, |r| random_tensor(&[6], r, None), |x| {
        Ok(x.scale(-1.7).sum(None, false)?)
    });
}

#[test]
fn binary_ops_with_broadcasting_pass_gradcheck() {
    let mut rng = RngStream::new(201);
    let other = random_tensor(&[3], &mut rng, None);
    check("add broadcast", &mut rng, |r| random_tensor(&[2, 3], r, None), |x| {
        Ok(x.add(&other)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(202);
    let other = random_tensor(&[2, 1], &mut rng, None);
    check("sub broadcast", &mut rng, |r| random_tensor(&[2, 3], r, None), |x| {
        Ok(x.sub(&other)?.mul(x)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(203);
    let other = random_tensor(&[3], &mut rng, None);
    check("mul broadcast", &mut rng, |r| random_tensor(&[2, 3], r, None), |x| {
        Ok(x.mul(&other)?.sum(None, false)?)
    });
}

#[test]
fn matmul_and_reductions_pass_gradcheck() {
    let mut rng = RngStream::new(301);
    let w = random_tensor(&[3, 4], &mut rng, None);
    check("matmul", &mut rng, |r| random_tensor(&[2, 3], r, None), |x| {
        Ok(x.matmul(&w)?.tanh().sum(None, false)?)
    });
    let mut rng = RngStream::new(302);
    let rhs = random_tensor(&[2, 4, 2], &mut rng, None);
    check("batched matmul", &mut rng, |r| random_tensor(&[2, 3, 4], r, None), |x| {
        Ok(x.matmul(&rhs)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(303);
    check("sum axis", &mut rng, |r| random_tensor(&[3, 4], r, None), |x| {
        Ok(x.sum(Some(0), false)?.tanh().sum(None, false)?)
    });
    let mut rng = RngStream::new(304);
    check("mean axis keepdims", &mut rng, |r| random_tensor(&[3, 4], r, None), |x| {
        Ok(x.mean(Some(1), true)?.sigmoid().sum(None, false)?)
    });
}

#[test]
fn softmax_and_layer_norm_pass_gradcheck() {
    let mut rng = RngStream::new(401);
    check("softmax", &mut rng, |r| random_tensor(&[3, 5], r, None), |x| {
        // Weighted sum keeps the function sensitive to every coordinate.
        let weights = Tensor::from_vec(vec![5], vec![0.9, -0.3, 0.5, 1.4, -1.1]).unwrap();
        Ok(x.softmax(1)?.mul(&weights)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(402);
    check("log_softmax", &mut rng, |r| random_tensor(&[3, 5], r, None), |x| {
        let weights = Tensor::from_vec(vec![5], vec![0.2, -0.7, 1.1, 0.4, -0.5]).unwrap();
        Ok(x.log_softmax(1)?.mul(&weights)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(403);
    let gamma = positive_tensor(&[5], &mut rng);
    let beta = random_tensor(&[5], &mut rng, None);
    check("layer_norm input", &mut rng, |r| random_tensor(&[3, 5], r, None), |x| {
        Ok(x.layer_norm(&gamma, &beta, 1e-5)?.tanh().sum(None, false)?)
    });
    // Gradients w.r.t. the affine parameters.
    let mut rng = RngStream::new(404);
    let x = random_tensor(&[4, 5], &mut rng, None);
    check("layer_norm gamma", &mut rng, |r| random_tensor(&[5], r, None), |g| {
        let beta = Tensor::zeros(&[5]);
        Ok(x.layer_norm(g, &beta, 1e-5)?.sigmoid().sum(None, false)?)
    });
}

#[test]
fn shape_ops_pass_gradcheck() {
    let mut rng = RngStream::new(501);
    check("reshape+transpose", &mut rng, |r| random_tensor(&[2, 6], r, None), |x| {
        Ok(x.reshape(&[3, 4])?.transpose(0, 1)?.tanh().sum(None, false)?)
    });
    let mut rng = RngStream::new(502);
    let weights = random_tensor(&[3, 3], &mut rng, None);
    check("slice", &mut rng, |r| random_tensor(&[3, 6], r, None), |x| {
        Ok(x.slice(1, 1, 4)?.mul(&weights)?.sum(None, false)?)
    });
    let mut rng = RngStream::new(503);
    let other = random_tensor(&[2, 3], &mut rng, None);
    check("concat", &mut rng, |r| random_tensor(&[2, 3], r, None), |x| {
        Ok(Tensor::concat(&[x.clone(), other.clone()], 1)?.tanh().sum(None, false)?)
    });
}

#[test]
fn embedding_and_dropout_pass_gradcheck() {
    let mut rng = RngStream::new(601);
    check("embedding_lookup", &mut rng, |r| random_tensor(&[5, 3], r, None), |table| {
        Ok(table
            .embedding_lookup(&[0, 2, 4, 2], &[4])?
            .tanh()
            .sum(None, false)?)
    });
    // Dropout with a fixed seed is a fixed linear map, so it gradchecks.
    let mut rng = RngStream::new(602);
    check("dropout fixed mask", &mut rng, |r| random_tensor(&[8], r, None), |x| {
        let mut mask_rng = RngStream::new(77);
        Ok(x.dropout(0.4, &mut mask_rng)?.sum(None, false)?)
    });
}

