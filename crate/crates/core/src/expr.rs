//! Scalar expressions over a joint variable vector, with exact values,
//! gradients, and Hessians. Nodes cover the analytic algebra the problem
//! formulations need plus two heavy leaves: composition with a trained
//! network and Mahalanobis-style quadratic forms.
//!
//! `grad`/`hess` are numeric (chain rule evaluated at a point);
//! `derivative` is symbolic and returns another expression, which is how
//! stationarity rows are built. Symbolic differentiation of a network
//! composition yields a [`Expr::SurrogateDeriv`] node whose own numeric
//! derivatives come from the net's second and third input derivatives.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::surrogate::TrainedModel;

#[derive(Debug, Clone)]
pub enum Expr {
    Const(f64),
    /// Index into the joint variable vector.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// Integer power of a subexpression.
    Pow(Box<Expr>, i32),
    Sqrt(Box<Expr>),
    /// Prediction of a trained model; `inputs[i]` feeds model input i.
    /// `inputs_scaled` marks inputs already living in the model's [0,1]
    /// space; the output is always in physical target units.
    Surrogate {
        model: Arc<TrainedModel>,
        inputs: Vec<Expr>,
        inputs_scaled: bool,
    },
    /// Component `wrt` of the model's prediction gradient. Input expressions
    /// must be affine in the variables (their Hessians vanish); that is all
    /// stationarity rows ever need.
    SurrogateDeriv {
        model: Arc<TrainedModel>,
        inputs: Vec<Expr>,
        inputs_scaled: bool,
        wrt: usize,
    },
    /// (v - mean)^T M (v - mean) over the listed variables, M symmetric.
    QuadForm {
        mean: DVector<f64>,
        matrix: Arc<DMatrix<f64>>,
        inputs: Vec<usize>,
    },
}

impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, k: i32) -> Expr {
        Expr::Pow(Box::new(a), k)
    }

    pub fn sqrt(a: Expr) -> Expr {
        Expr::Sqrt(Box::new(a))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::sub(Expr::Const(0.0), a)
    }

    /// c0 + sum_i c_i * v_{idx_i}
    pub fn affine(c0: f64, terms: &[(f64, usize)]) -> Expr {
        let mut e = Expr::Const(c0);
        for &(c, i) in terms {
            if c == 0.0 {
                continue;
            }
            e = simplify_add(e, simplify_mul(Expr::Const(c), Expr::Var(i)));
        }
        e
    }

    pub fn surrogate(model: Arc<TrainedModel>, inputs: Vec<Expr>, inputs_scaled: bool) -> Expr {
        Expr::Surrogate { model, inputs, inputs_scaled }
    }

    pub fn quad_form(mean: DVector<f64>, matrix: Arc<DMatrix<f64>>, inputs: Vec<usize>) -> Expr {
        Expr::QuadForm { mean, matrix, inputs }
    }

    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => v[*i],
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Pow(a, k) => a.eval(v).powi(*k),
            Expr::Sqrt(a) => a.eval(v).sqrt(),
            Expr::Surrogate { model, inputs, inputs_scaled } => {
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                model.eval(&u, *inputs_scaled).unwrap_or(f64::NAN)
            }
            Expr::SurrogateDeriv { model, inputs, inputs_scaled, wrt } => {
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                match model.gradient(&u, *inputs_scaled) {
                    Ok(g) => g[*wrt],
                    Err(_) => f64::NAN,
                }
            }
            Expr::QuadForm { mean, matrix, inputs } => {
                let d = DVector::from_fn(inputs.len(), |i, _| v[inputs[i]] - mean[i]);
                (d.transpose() * matrix.as_ref() * &d)[(0, 0)]
            }
        }
    }

    /// Evaluation that rejects non-finite intermediates.
    pub fn eval_checked(&self, v: &DVector<f64>) -> Result<f64> {
        let out = self.eval(v);
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::Numerical("non-finite value in expression evaluation".into()))
        }
    }

    /// Gradient with respect to the full joint vector of length `n`.
    pub fn grad(&self, v: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        self.grad_into(v, &mut out, 1.0);
        out
    }

    fn grad_into(&self, v: &DVector<f64>, out: &mut DVector<f64>, scale: f64) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(i) => out[*i] += scale,
            Expr::Add(a, b) => {
                a.grad_into(v, out, scale);
                b.grad_into(v, out, scale);
            }
            Expr::Sub(a, b) => {
                a.grad_into(v, out, scale);
                b.grad_into(v, out, -scale);
            }
            Expr::Mul(a, b) => {
                let av = a.eval(v);
                let bv = b.eval(v);
                a.grad_into(v, out, scale * bv);
                b.grad_into(v, out, scale * av);
            }
            Expr::Pow(a, k) => {
                if *k != 0 {
                    let av = a.eval(v);
                    a.grad_into(v, out, scale * (*k as f64) * av.powi(k - 1));
                }
            }
            Expr::Sqrt(a) => {
                let av = a.eval(v);
                a.grad_into(v, out, scale * 0.5 / av.sqrt());
            }
            Expr::Surrogate { model, inputs, inputs_scaled } => {
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                if let Ok(g) = model.gradient(&u, *inputs_scaled) {
                    for (i, input) in inputs.iter().enumerate() {
                        input.grad_into(v, out, scale * g[i]);
                    }
                }
            }
            Expr::SurrogateDeriv { model, inputs, inputs_scaled, wrt } => {
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                if let Ok(h) = model.hessian(&u, *inputs_scaled) {
                    for (i, input) in inputs.iter().enumerate() {
                        input.grad_into(v, out, scale * h[(*wrt, i)]);
                    }
                }
            }
            Expr::QuadForm { mean, matrix, inputs } => {
                let d = DVector::from_fn(inputs.len(), |i, _| v[inputs[i]] - mean[i]);
                let g = matrix.as_ref() * d * 2.0;
                for (i, &idx) in inputs.iter().enumerate() {
                    out[idx] += scale * g[i];
                }
            }
        }
    }

    /// Hessian with respect to the full joint vector of length `n`.
    pub fn hess(&self, v: &DVector<f64>, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        self.hess_into(v, &mut out, 1.0, n);
        out
    }

    fn hess_into(&self, v: &DVector<f64>, out: &mut DMatrix<f64>, scale: f64, n: usize) {
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Add(a, b) => {
                a.hess_into(v, out, scale, n);
                b.hess_into(v, out, scale, n);
            }
            Expr::Sub(a, b) => {
                a.hess_into(v, out, scale, n);
                b.hess_into(v, out, -scale, n);
            }
            Expr::Mul(a, b) => {
                let av = a.eval(v);
                let bv = b.eval(v);
                a.hess_into(v, out, scale * bv, n);
                b.hess_into(v, out, scale * av, n);
                let ga = a.grad(v, n);
                let gb = b.grad(v, n);
                outer_update(out, &ga, &gb, scale);
                outer_update(out, &gb, &ga, scale);
            }
            Expr::Pow(a, k) => {
                let k = *k;
                if k == 0 {
                    return;
                }
                let av = a.eval(v);
                a.hess_into(v, out, scale * k as f64 * av.powi(k - 1), n);
                if k != 1 {
                    let ga = a.grad(v, n);
                    let c = scale * (k * (k - 1)) as f64 * av.powi(k - 2);
                    outer_update(out, &ga, &ga, c);
                }
            }
            Expr::Sqrt(a) => {
                let av = a.eval(v);
                let root = av.sqrt();
                a.hess_into(v, out, scale * 0.5 / root, n);
                let ga = a.grad(v, n);
                outer_update(out, &ga, &ga, -scale * 0.25 / (root * av));
            }
            Expr::Surrogate { model, inputs, inputs_scaled } => {
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                let (g, h) =
                    match (model.gradient(&u, *inputs_scaled), model.hessian(&u, *inputs_scaled)) {
                        (Ok(g), Ok(h)) => (g, h),
                        _ => return,
                    };
                let grads: Vec<DVector<f64>> = inputs.iter().map(|e| e.grad(v, n)).collect();
                for (i, input) in inputs.iter().enumerate() {
                    input.hess_into(v, out, scale * g[i], n);
                }
                for i in 0..inputs.len() {
                    for j in 0..inputs.len() {
                        outer_update(out, &grads[i], &grads[j], scale * h[(i, j)]);
                    }
                }
            }
            Expr::SurrogateDeriv { model, inputs, inputs_scaled, wrt } => {
                // inputs are affine (their own Hessians vanish), so only the
                // model's third-derivative tensor contributes
                let u = DVector::from_fn(inputs.len(), |i, _| inputs[i].eval(v));
                let t = match model.gradient_component_hessian(&u, *wrt, *inputs_scaled) {
                    Ok(t) => t,
                    Err(_) => return,
                };
                let grads: Vec<DVector<f64>> = inputs.iter().map(|e| e.grad(v, n)).collect();
                for i in 0..inputs.len() {
                    for j in 0..inputs.len() {
                        outer_update(out, &grads[i], &grads[j], scale * t[(i, j)]);
                    }
                }
            }
            Expr::QuadForm { matrix, inputs, .. } => {
                for (i, &vi) in inputs.iter().enumerate() {
                    for (j, &vj) in inputs.iter().enumerate() {
                        out[(vi, vj)] += scale * 2.0 * matrix[(i, j)];
                    }
                }
            }
        }
    }

    /// Symbolic partial derivative with respect to variable `wrt`.
    pub fn derivative(&self, wrt: usize) -> Result<Expr> {
        Ok(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == wrt { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => simplify_add(a.derivative(wrt)?, b.derivative(wrt)?),
            Expr::Sub(a, b) => simplify_sub(a.derivative(wrt)?, b.derivative(wrt)?),
            Expr::Mul(a, b) => simplify_add(
                simplify_mul(a.derivative(wrt)?, (**b).clone()),
                simplify_mul((**a).clone(), b.derivative(wrt)?),
            ),
            Expr::Pow(a, k) => {
                if *k == 0 {
                    Expr::Const(0.0)
                } else {
                    simplify_mul(
                        simplify_mul(Expr::Const(*k as f64), Expr::pow((**a).clone(), k - 1)),
                        a.derivative(wrt)?,
                    )
                }
            }
            Expr::Sqrt(a) => simplify_mul(
                simplify_mul(Expr::Const(0.5), Expr::pow(Expr::sqrt((**a).clone()), -1)),
                a.derivative(wrt)?,
            ),
            Expr::Surrogate { model, inputs, inputs_scaled } => {
                let mut acc = Expr::Const(0.0);
                for (i, input) in inputs.iter().enumerate() {
                    let di = input.derivative(wrt)?;
                    if is_zero(&di) {
                        continue;
                    }
                    let node = Expr::SurrogateDeriv {
                        model: model.clone(),
                        inputs: inputs.clone(),
                        inputs_scaled: *inputs_scaled,
                        wrt: i,
                    };
                    acc = simplify_add(acc, simplify_mul(node, di));
                }
                acc
            }
            Expr::SurrogateDeriv { .. } => {
                return Err(Error::InvalidInput(
                    "symbolic derivative of a surrogate-gradient node is not supported".into(),
                ))
            }
            Expr::QuadForm { mean, matrix, inputs } => {
                match inputs.iter().position(|&i| i == wrt) {
                    None => Expr::Const(0.0),
                    Some(pos) => {
                        // 2 * sum_j M[pos, j] (v_j - mean_j)
                        let mut acc = Expr::Const(0.0);
                        for (j, &vj) in inputs.iter().enumerate() {
                            let c = 2.0 * matrix[(pos, j)];
                            if c == 0.0 {
                                continue;
                            }
                            acc = simplify_add(
                                acc,
                                simplify_mul(
                                    Expr::Const(c),
                                    Expr::sub(Expr::Var(vj), Expr::Const(mean[j])),
                                ),
                            );
                        }
                        acc
                    }
                }
            }
        })
    }
}

fn outer_update(out: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, c: f64) {
    if c == 0.0 {
        return;
    }
    for i in 0..a.len() {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..b.len() {
            out[(i, j)] += c * a[i] * b[j];
        }
    }
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 1.0)
}

fn simplify_add(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        b
    } else if is_zero(&b) {
        a
    } else {
        Expr::add(a, b)
    }
}

fn simplify_sub(a: Expr, b: Expr) -> Expr {
    if is_zero(&b) {
        a
    } else {
        Expr::sub(a, b)
    }
}

fn simplify_mul(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) || is_zero(&b) {
        Expr::Const(0.0)
    } else if is_one(&a) {
        b
    } else if is_one(&b) {
        a
    } else {
        Expr::mul(a, b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "v{i}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Pow(a, k) => write!(f, "{a}^{k}"),
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
            Expr::Surrogate { model, inputs, .. } => {
                write!(f, "ann<{}>(", model.target_name())?;
                fmt_list(f, inputs)?;
                write!(f, ")")
            }
            Expr::SurrogateDeriv { model, inputs, wrt, .. } => {
                write!(f, "d{wrt}.ann<{}>(", model.target_name())?;
                fmt_list(f, inputs)?;
                write!(f, ")")
            }
            Expr::QuadForm { inputs, .. } => {
                write!(f, "quadform(")?;
                for (i, idx) in inputs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "v{idx}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn fmt_list(f: &mut fmt::Formatter<'_>, items: &[Expr]) -> fmt::Result {
    for (i, e) in items.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{e}")?;
    }
    Ok(())
}

/// Parse a prefix-notation expression, e.g.
/// `(+ (^ (- x 3) 2) (^ (- y 2) 2))` or `(model thr x y)`.
///
/// Operators: `+ - *` (n-ary, unary `-` negates), `^` (integer exponent),
/// `sqrt`, and `(model NAME arg...)` for surrogate composition with inputs
/// in physical units.
pub fn parse_prefix(
    text: &str,
    var_names: &[String],
    models: &HashMap<String, Arc<TrainedModel>>,
) -> Result<Expr> {
    let tokens = tokenize(text)?;
    let mut pos = 0;
    let expr = parse_tokens(&tokens, &mut pos, var_names, models)?;
    if pos != tokens.len() {
        return Err(Error::Parse(format!("unexpected trailing tokens in `{text}`")));
    }
    Ok(expr)
}

fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if tokens.is_empty() {
        return Err(Error::Parse("empty expression".into()));
    }
    Ok(tokens)
}

fn parse_tokens(
    tokens: &[String],
    pos: &mut usize,
    var_names: &[String],
    models: &HashMap<String, Arc<TrainedModel>>,
) -> Result<Expr> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse("unexpected end of expression".into()))?;
    *pos += 1;
    if tok != "(" {
        return parse_atom(tok, var_names);
    }
    let op = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse("missing operator after `(`".into()))?
        .clone();
    *pos += 1;

    if op == "model" {
        let name = tokens
            .get(*pos)
            .ok_or_else(|| Error::Parse("`model` needs a name".into()))?
            .clone();
        *pos += 1;
        let model = models
            .get(&name)
            .ok_or_else(|| Error::Parse(format!("unknown model `{name}`")))?
            .clone();
        let args = parse_until_close(tokens, pos, var_names, models)?;
        if args.len() != model.input_dim() {
            return Err(Error::Parse(format!(
                "model `{name}` takes {} inputs, got {}",
                model.input_dim(),
                args.len()
            )));
        }
        return Ok(Expr::surrogate(model, args, false));
    }

    let args = parse_until_close(tokens, pos, var_names, models)?;
    match op.as_str() {
        "+" => fold_args(args, Expr::add, "`+` needs at least 1 argument"),
        "*" => fold_args(args, Expr::mul, "`*` needs at least 1 argument"),
        "-" => match args.len() {
            0 => Err(Error::Parse("`-` needs arguments".into())),
            1 => Ok(Expr::neg(args.into_iter().next().unwrap())),
            _ => {
                let mut it = args.into_iter();
                let first = it.next().unwrap();
                Ok(it.fold(first, Expr::sub))
            }
        },
        "^" => {
            if args.len() != 2 {
                return Err(Error::Parse("`^` needs exactly 2 arguments".into()));
            }
            let mut it = args.into_iter();
            let base = it.next().unwrap();
            match it.next().unwrap() {
                Expr::Const(c) if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 => {
                    Ok(Expr::pow(base, c as i32))
                }
                _ => Err(Error::Parse("`^` exponent must be an integer literal".into())),
            }
        }
        "sqrt" => {
            if args.len() != 1 {
                return Err(Error::Parse("`sqrt` needs exactly 1 argument".into()));
            }
            Ok(Expr::sqrt(args.into_iter().next().unwrap()))
        }
        _ => Err(Error::Parse(format!("unknown operator `{op}`"))),
    }
}

fn parse_until_close(
    tokens: &[String],
    pos: &mut usize,
    var_names: &[String],
    models: &HashMap<String, Arc<TrainedModel>>,
) -> Result<Vec<Expr>> {
    let mut args = Vec::new();
    loop {
        match tokens.get(*pos).map(String::as_str) {
            Some(")") => {
                *pos += 1;
                return Ok(args);
            }
            Some(_) => args.push(parse_tokens(tokens, pos, var_names, models)?),
            None => return Err(Error::Parse("missing closing `)`".into())),
        }
    }
}

fn parse_atom(tok: &str, var_names: &[String]) -> Result<Expr> {
    if tok == ")" {
        return Err(Error::Parse("unexpected `)`".into()));
    }
    if let Ok(v) = tok.parse::<f64>() {
        return Ok(Expr::Const(v));
    }
    var_names
        .iter()
        .position(|n| n == tok)
        .map(Expr::Var)
        .ok_or_else(|| Error::Parse(format!("unknown identifier `{tok}`")))
}

fn fold_args(args: Vec<Expr>, op: fn(Expr, Expr) -> Expr, err: &str) -> Result<Expr> {
    let mut it = args.into_iter();
    let first = it.next().ok_or_else(|| Error::Parse(err.into()))?;
    Ok(it.fold(first, op))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{ColumnScale, MetricsReport, ScalingSpec};
    use crate::surrogate::{ShallowNet, SplitMetrics, TrainConfig, TrainingHistory};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn vnames(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    pub(crate) fn toy_model(input_dim: usize, seed: u64) -> Arc<TrainedModel> {
        let net = ShallowNet::init(input_dim, 4, seed).unwrap();
        let input_scaling = ScalingSpec {
            columns: (0..input_dim)
                .map(|i| ColumnScale { name: format!("u{i}"), min: -1.0, max: 3.0 })
                .collect(),
        };
        let output_scaling = ScalingSpec {
            columns: vec![ColumnScale { name: "t".into(), min: 0.0, max: 2.0 }],
        };
        let m = MetricsReport { r_squared: 1.0, rmse: 0.0 };
        Arc::new(
            TrainedModel::new(
                net,
                input_scaling,
                output_scaling,
                SplitMetrics { train: m, validation: m, test: m },
                TrainConfig::default(),
                TrainingHistory { epochs: vec![], best_epoch: 0, best_val_rmse: 0.0 },
            )
            .unwrap(),
        )
    }

    fn fd_grad(e: &Expr, v: &DVector<f64>, n: usize) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(n, |i, _| {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += h;
            vm[i] -= h;
            (e.eval(&vp) - e.eval(&vm)) / (2.0 * h)
        })
    }

    #[test]
    fn grad_of_shifted_squares_vanishes_at_center() {
        // (x-3)^2 + (y-2)^2 at (3,2)
        let e = Expr::add(
            Expr::pow(Expr::sub(Expr::var(0), Expr::Const(3.0)), 2),
            Expr::pow(Expr::sub(Expr::var(1), Expr::Const(2.0)), 2),
        );
        let g = e.grad(&DVector::from_vec(vec![3.0, 2.0]), 2);
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn hess_of_square_is_two() {
        let e = Expr::pow(Expr::var(0), 2);
        for &x in &[-5.0, 0.0, 1.7] {
            let h = e.hess(&DVector::from_vec(vec![x]), 1);
            assert_abs_diff_eq!(h[(0, 0)], 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_across_node_types() {
        let model = toy_model(2, 77);
        let cases: Vec<(Expr, usize)> = vec![
            (
                Expr::add(
                    Expr::mul(Expr::var(0), Expr::var(1)),
                    Expr::pow(Expr::sub(Expr::var(2), Expr::Const(0.5)), 3),
                ),
                3,
            ),
            (
                Expr::sqrt(Expr::add(
                    Expr::Const(1.0),
                    Expr::add(Expr::pow(Expr::var(0), 2), Expr::pow(Expr::var(1), 2)),
                )),
                2,
            ),
            (Expr::surrogate(model.clone(), vec![Expr::var(0), Expr::var(2)], false), 3),
            (
                Expr::mul(
                    Expr::var(1),
                    Expr::surrogate(
                        model.clone(),
                        vec![Expr::add(Expr::var(0), Expr::var(2)), Expr::var(1)],
                        false,
                    ),
                ),
                3,
            ),
            (
                Expr::quad_form(
                    DVector::from_vec(vec![0.5, -0.5]),
                    Arc::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])),
                    vec![0, 2],
                ),
                3,
            ),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for (e, n) in &cases {
            for _ in 0..20 {
                let v = DVector::from_fn(*n, |_, _| rng.gen_range(-1.5..1.5));
                let g = e.grad(&v, *n);
                let fd = fd_grad(e, &v, *n);
                for i in 0..*n {
                    let rel = (g[i] - fd[i]).abs() / (1.0 + g[i].abs());
                    assert!(rel < 1e-6, "node {e}: grad[{i}] = {} vs fd {}", g[i], fd[i]);
                }
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences_of_gradients() {
        let model = toy_model(2, 78);
        let cases: Vec<(Expr, usize)> = vec![
            (Expr::mul(Expr::var(0), Expr::mul(Expr::var(1), Expr::pow(Expr::var(0), 2))), 2),
            (Expr::sqrt(Expr::add(Expr::Const(0.5), Expr::pow(Expr::var(0), 2))), 1),
            (
                Expr::surrogate(
                    model.clone(),
                    vec![Expr::add(Expr::var(0), Expr::var(1)), Expr::var(1)],
                    false,
                ),
                2,
            ),
            (
                Expr::quad_form(
                    DVector::from_vec(vec![0.0, 0.0]),
                    Arc::new(DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.9])),
                    vec![0, 1],
                ),
                2,
            ),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let step = 1e-5;
        for (e, n) in &cases {
            for _ in 0..10 {
                let v = DVector::from_fn(*n, |_, _| rng.gen_range(-1.0..1.0));
                let h = e.hess(&v, *n);
                for k in 0..*n {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[k] += step;
                    vm[k] -= step;
                    let fd = (e.grad(&vp, *n) - e.grad(&vm, *n)) / (2.0 * step);
                    for l in 0..*n {
                        let rel = (h[(k, l)] - fd[l]).abs() / (1.0 + h[(k, l)].abs());
                        assert!(rel < 1e-5, "node {e}: hess[{k},{l}]");
                    }
                }
            }
        }
    }

    #[test]
    fn symbolic_derivative_agrees_with_numeric_gradient() {
        let model = toy_model(2, 79);
        let e = Expr::add(
            Expr::surrogate(model, vec![Expr::var(0), Expr::var(1)], false),
            Expr::mul(Expr::var(0), Expr::pow(Expr::var(1), 2)),
        );
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let g = e.grad(&v, 2);
            for k in 0..2 {
                let dk = e.derivative(k).unwrap();
                assert_abs_diff_eq!(dk.eval(&v), g[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn surrogate_deriv_node_hessian_uses_third_derivatives() {
        // grad/hess of a stationarity-style term must match finite differences
        let model = toy_model(2, 80);
        let e = Expr::surrogate(
            model,
            vec![Expr::add(Expr::var(0), Expr::var(2)), Expr::var(1)],
            false,
        )
        .derivative(0)
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let step = 1e-5;
        for _ in 0..10 {
            let v = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let g = e.grad(&v, 3);
            let fd = fd_grad(&e, &v, 3);
            for i in 0..3 {
                assert_abs_diff_eq!(g[i], fd[i], epsilon = 1e-6);
            }
            let h = e.hess(&v, 3);
            for k in 0..3 {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[k] += step;
                vm[k] -= step;
                let fdh = (e.grad(&vp, 3) - e.grad(&vm, 3)) / (2.0 * step);
                for l in 0..3 {
                    assert_abs_diff_eq!(h[(k, l)], fdh[l], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn eval_checked_rejects_nan() {
        let e = Expr::sqrt(Expr::Const(-1.0));
        assert!(e.eval_checked(&DVector::zeros(1)).is_err());
    }

    #[test]
    fn parse_prefix_handles_nested_arithmetic() {
        let vars = vnames(&["x", "y"]);
        let e = parse_prefix("(+ (^ (- x 3) 2) (^ (- y 2) 2))", &vars, &HashMap::new()).unwrap();
        let v = DVector::from_vec(vec![1.0, 3.0]);
        assert_abs_diff_eq!(e.eval(&v), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn parse_prefix_unary_minus_and_nary() {
        let vars = vnames(&["x", "y"]);
        let e = parse_prefix("(+ (- y) (* x y 2))", &vars, &HashMap::new()).unwrap();
        let v = DVector::from_vec(vec![1.5, 2.0]);
        assert_abs_diff_eq!(e.eval(&v), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn parse_prefix_model_call() {
        let model = toy_model(2, 81);
        let mut models = HashMap::new();
        models.insert("f".to_string(), model.clone());
        let vars = vnames(&["x", "y"]);
        let e = parse_prefix("(model f x y)", &vars, &models).unwrap();
        let v = DVector::from_vec(vec![0.4, 0.9]);
        let expect = model.eval(&DVector::from_vec(vec![0.4, 0.9]), false).unwrap();
        assert_abs_diff_eq!(e.eval(&v), expect, epsilon = 1e-15);
    }

    #[test]
    fn parse_prefix_rejects_garbage() {
        let vars = vnames(&["x"]);
        assert!(parse_prefix("(? x 1)", &vars, &HashMap::new()).is_err());
        assert!(parse_prefix("(+ x z)", &vars, &HashMap::new()).is_err());
        assert!(parse_prefix("(+ x 1", &vars, &HashMap::new()).is_err());
        assert!(parse_prefix("(^ x 0.5)", &vars, &HashMap::new()).is_err());
    }
}
