//! Central finite-difference checks against reverse-mode gradients.

use super::{DiffArray, Tape, TensorError, Var};

/// Step used by the checks unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient norms below this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-6;

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub value: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`, for every element of every input.
///
/// `build` must record the function on the provided tape; each evaluation uses
/// a fresh tape seeded with `seed`, so dropout masks are replayed exactly.
pub fn check<F>(inputs: &[DiffArray], seed: u64, h: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[DiffArray]| -> Result<f64, TensorError> {
        let mut tape = Tape::new(seed);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.detached())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new(seed);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.detached())).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.item(out);
    tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probe: Vec<DiffArray> = inputs.iter().map(DiffArray::detached).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport { per_input, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_zero_for_equal() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 1.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // Forward is x², but the stop-gradient makes the tape report only x.
        let x = DiffArray::vector(vec![1.5, -0.3]).unwrap();
        let report = check(&[x], 0, DEFAULT_STEP, |t, v| {
            let d = t.detach(v[0]);
            let p = t.mul(v[0], d)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(report.max_error() > 0.3);
    }
}

/// Random input generation for the op suite.
mod inputs {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::DiffArray;

    /// Uniform in ±[0.05, 1.5): keeps kinks (relu, abs) out of reach of the step.
    pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        DiffArray::new(shape.to_vec(), data).expect("consistent shape")
    }

    pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        DiffArray::new(shape.to_vec(), data).expect("consistent shape")
    }

    /// Second operand for min/max: differs from `a` by at least 0.05 everywhere.
    pub fn separated(rng: &mut ChaCha8Rng, a: &DiffArray) -> DiffArray {
        let data = a
            .data()
            .iter()
            .map(|&x| {
                let d = rng.gen_range(0.05..0.8);
                if rng.gen_bool(0.5) {
                    x + d
                } else {
                    x - d
                }
            })
            .collect();
        DiffArray::new(a.shape().to_vec(), data).expect("consistent shape")
    }
}

/// Names of every op covered by [`op_suite`], in report order.
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "exp",
    "log",
    "relu",
    "softplus",
    "sigmoid",
    "abs",
    "square",
    "minimum",
    "maximum",
    "softmax_axis0",
    "softmax_axis1",
    "log_softmax",
    "layer_norm",
    "linear",
    "cross_entropy",
    "sum",
    "mean",
    "sum_axis",
    "concat",
    "slice",
    "reshape",
    "select_rows",
    "dropout",
    "im2col",
];

/// Gradient-checks every differentiable op on random inputs drawn from `seed`.
///
/// Each op is reduced to a scalar through a fixed random weighting so that
/// every output element contributes a distinct sensitivity.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;

    // Weighted sum Σ wᵢ·yᵢ with fixed weights from the outer generator.
    fn weigh(t: &mut Tape, y: Var, w: &[f64]) -> Result<Var, TensorError> {
        let shape = t.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let wv = t.constant(DiffArray::new(shape, w[..n].to_vec())?);
        let p = t.mul(y, wv)?;
        Ok(t.sum(p))
    }

    let w: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = &w;
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    let mut record = |name: &'static str, r: GradCheckReport| out.push((name, r.max_error()));

    let a = inputs::away_from_zero(&mut rng, &[3, 4]);
    let b = inputs::away_from_zero(&mut rng, &[4, 2]);
    record("matmul", check(&[a.clone(), b], seed, h, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    record("transpose", check(&[a.clone()], seed, h, |t, v| {
        let y = t.transpose(v[0])?;
        weigh(t, y, w)
    })?);

    let c = inputs::away_from_zero(&mut rng, &[3, 4]);
    let pos = inputs::positive(&mut rng, &[3, 4]);
    record("add", check(&[a.clone(), c.clone()], seed, h, |t, v| {
        let y = t.add(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    record("sub", check(&[a.clone(), c.clone()], seed, h, |t, v| {
        let y = t.sub(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    record("mul", check(&[a.clone(), c.clone()], seed, h, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    record("div", check(&[a.clone(), pos.clone()], seed, h, |t, v| {
        let y = t.div(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    let bias = inputs::away_from_zero(&mut rng, &[4]);
    record("add_row", check(&[a.clone(), bias.clone()], seed, h, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    let factor = rng.gen_range(-2.0..2.0);
    record("scale", check(&[a.clone()], seed, h, |t, v| {
        let y = t.scale(v[0], factor);
        weigh(t, y, w)
    })?);

    type Unary = fn(&mut Tape, Var) -> Var;
    let unaries: [(&'static str, Unary, bool); 7] = [
        ("exp", |t, x| t.exp(x), false),
        ("log", |t, x| t.log(x), true),
        ("relu", |t, x| t.relu(x), false),
        ("softplus", |t, x| t.softplus(x), false),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("abs", |t, x| t.abs(x), false),
        ("square", |t, x| t.square(x), false),
    ];
    for (name, f, needs_positive) in unaries {
        let x = if needs_positive { pos.clone() } else { a.clone() };
        record(name, check(&[x], seed, h, |t, v| {
            let y = f(t, v[0]);
            weigh(t, y, w)
        })?);
    }

    let sep = inputs::separated(&mut rng, &a);
    record("minimum", check(&[a.clone(), sep.clone()], seed, h, |t, v| {
        let y = t.minimum(v[0], v[1])?;
        weigh(t, y, w)
    })?);
    record("maximum", check(&[a.clone(), sep], seed, h, |t, v| {
        let y = t.maximum(v[0], v[1])?;
        weigh(t, y, w)
    })?);

    let cube = inputs::away_from_zero(&mut rng, &[2, 3, 4]);
    record("softmax_axis0", check(&[cube.clone()], seed, h, |t, v| {
        let y = t.softmax(v[0], 0)?;
        weigh(t, y, w)
    })?);
    record("softmax_axis1", check(&[cube.clone()], seed, h, |t, v| {
        let y = t.softmax(v[0], 1)?;
        weigh(t, y, w)
    })?);
    record("log_softmax", check(&[a.clone()], seed, h, |t, v| {
        let y = t.log_softmax(v[0], 1)?;
        weigh(t, y, w)
    })?);

    let gamma = inputs::away_from_zero(&mut rng, &[4]);
    let beta = inputs::away_from_zero(&mut rng, &[4]);
    record("layer_norm", check(&[a.clone(), gamma, beta], seed, h, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weigh(t, y, w)
    })?);
    let wmat = inputs::away_from_zero(&mut rng, &[4, 5]);
    let wb = inputs::away_from_zero(&mut rng, &[5]);
    record("linear", check(&[a.clone(), wmat, wb], seed, h, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weigh(t, y, w)
    })?);
    let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    record("cross_entropy", check(&[a.clone()], seed, h, |t, v| {
        let y = t.cross_entropy(v[0], &targets)?;
        weigh(t, y, w)
    })?);
    record("sum", check(&[a.clone()], seed, h, |t, v| {
        let y = t.sum(v[0]);
        let y = t.square(y);
        Ok(t.sum(y))
    })?);
    record("mean", check(&[a.clone()], seed, h, |t, v| {
        let y = t.mean(v[0]);
        let y = t.square(y);
        Ok(t.sum(y))
    })?);
    record("sum_axis", check(&[cube.clone()], seed, h, |t, v| {
        let y = t.sum_axis(v[0], 1)?;
        weigh(t, y, w)
    })?);
    let other = inputs::away_from_zero(&mut rng, &[3, 2]);
    record("concat", check(&[a.clone(), other], seed, h, |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weigh(t, y, w)
    })?);
    record("slice", check(&[cube.clone()], seed, h, |t, v| {
        let y = t.slice(v[0], 2, 1, 3)?;
        weigh(t, y, w)
    })?);
    record("reshape", check(&[cube], seed, h, |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        weigh(t, y, w)
    })?);
    let rows: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    record("select_rows", check(&[a.clone()], seed, h, |t, v| {
        let y = t.select_rows(v[0], &rows)?;
        weigh(t, y, w)
    })?);
    record("dropout", check(&[a], seed, h, |t, v| {
        let y = t.dropout(v[0], 0.3, true)?;
        weigh(t, y, w)
    })?);
    let img = inputs::away_from_zero(&mut rng, &[5, 5, 2]);
    let geom = super::ConvGeom {
        height: 5,
        width: 5,
        channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    record("im2col", check(&[img], seed, h, |t, v| {
        let y = t.im2col(v[0], geom)?;
        weigh(t, y, w)
    })?);

    Ok(out)
}
