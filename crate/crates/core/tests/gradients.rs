use candle_core::{DType, Device, Tensor, Var};

use spectraleaf::model::transformer::TransformerEncoder;
use spectraleaf::model::ParamStore;

/// Relative error, or 0 when both sides are within rounding noise of zero.
/// The key bias, for one, has an exactly zero gradient.
fn rel_err(a: f64, b: f64) -> f64 {
    if (a - b).abs() < 1e-7 {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Input gradient of `sum(encoder(x) * r)` against central differences.
#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let dev = Device::Cpu;
    let store = ParamStore::new(8);
    let enc = TransformerEncoder::new(2, 8, 2, store.var_builder(DType::F64, &dev)).unwrap();
    let pos = Tensor::randn(0f64, 0.5, (1, 4, 8), &dev).unwrap();
    let r = Tensor::randn(0f64, 1.0, (1, 4, 8), &dev).unwrap();
    let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 4, 8), &dev).unwrap()).unwrap();
    let objective = |t: &Tensor| -> Tensor { (enc.forward(t, Some(&pos)).unwrap() * &r).unwrap().sum_all().unwrap() };

    let grads = objective(x.as_tensor()).backward().unwrap();
    let analytic = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    for i in 0..base.len() {
        let at = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            let t = Tensor::from_vec(v, (1, 4, 8), &dev).unwrap();
            objective(&t).to_scalar::<f64>().unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        assert!(rel_err(analytic[i], numeric) < 1e-5, "x[{i}]: {} vs {numeric}", analytic[i]);
    }
}

#[test]
fn encoder_weight_gradients_match_finite_differences() {
    let dev = Device::Cpu;
    let store = ParamStore::new(2);
    let enc = TransformerEncoder::new(1, 8, 4, store.var_builder(DType::F64, &dev)).unwrap();
    let x = Tensor::randn(0f64, 1.0, (2, 4, 8), &dev).unwrap();
    let r = Tensor::randn(0f64, 1.0, (2, 4, 8), &dev).unwrap();
    let objective = || (enc.forward(&x, None).unwrap() * &r).unwrap().sum_all().unwrap();
    let grads = objective().backward().unwrap();
    let h = 1e-6;
    for (name, var) in store.named_vars() {
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in [0, base.len() / 2, base.len() - 1] {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, var.shape(), &dev).unwrap()).unwrap();
                objective().to_scalar::<f64>().unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            at(0.0);
            assert!(rel_err(g[i], numeric) < 1e-5, "{name}[{i}]: {} vs {numeric}", g[i]);
        }
    }
}
