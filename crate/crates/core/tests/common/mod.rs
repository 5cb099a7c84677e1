//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use mgmo::data::TokenId;
use mgmo::model::{ModelConfig, NatModel, Session};
use mgmo::Tensor;

/// All order-`n` windows, collected by index arithmetic.
pub fn ngrams<T: Clone>(seq: &[T], n: usize) -> Vec<Vec<T>> {
    if n == 0 || seq.len() < n {
        return Vec::new();
    }
    (0..=seq.len() - n).map(|i| seq[i..i + n].to_vec()).collect()
}

fn occurrences<T: PartialEq>(grams: &[Vec<T>], g: &[T]) -> usize {
    grams.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped matches by linear scans over distinct hypothesis grams.
pub fn clipped<T: Clone + PartialEq>(hyp: &[T], reference: &[T], n: usize) -> usize {
    let (h, r) = (ngrams(hyp, n), ngrams(reference, n));
    let mut distinct: Vec<Vec<T>> = Vec::new();
    for g in &h {
        if !distinct.contains(g) {
            distinct.push(g.clone());
        }
    }
    distinct
        .iter()
        .map(|g| occurrences(&h, g).min(occurrences(&r, g)))
        .sum()
}

pub fn gleu_oracle<T: Clone + PartialEq>(hyp: &[T], reference: &[T], n_max: usize) -> f64 {
    let (mut m, mut ht, mut rt) = (0, 0, 0);
    for n in 1..=n_max {
        m += clipped(hyp, reference, n);
        ht += ngrams(hyp, n).len();
        rt += ngrams(reference, n).len();
    }
    let p = if ht == 0 { 0.0 } else { m as f64 / ht as f64 };
    let r = if rt == 0 { 0.0 } else { m as f64 / rt as f64 };
    p.min(r)
}

pub fn bleu_oracle<T: Clone + PartialEq>(hyp: &[T], reference: &[T], n_max: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=n_max {
        let smooth = if n >= 2 { 1.0 } else { 0.0 };
        let m = clipped(hyp, reference, n) as f64;
        let t = ngrams(hyp, n).len() as f64;
        product *= (m + smooth) / (t + smooth);
    }
    let bp = if hyp.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    };
    product.powf(1.0 / n_max as f64) * bp
}

pub fn rouge2_oracle<T: Clone + PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    let (ht, rt) = (ngrams(hyp, 2).len(), ngrams(reference, 2).len());
    if ht == 0 || rt == 0 {
        return 0.0;
    }
    let m = clipped(hyp, reference, 2) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let (p, r) = (m / ht as f64, m / rt as f64);
    2.0 * p * r / (p + r)
}

/// Minimum edit count by exhaustive recursion over every edit script
/// (no memoization): each step matches/substitutes, deletes or inserts.
pub fn edit_search<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_search(ra, rb) + usize::from(x != y);
            let del = edit_search(ra, b) + 1;
            let ins = edit_search(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Every sequence of length `0..=max_len` over `0..alphabet`.
pub fn all_sequences(alphabet: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u32> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Vocabulary 8 (5 content tokens), `d = 4`, two heads, one layer.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        max_len: 6,
    }
}

/// Under 500 parameters.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 3,
        n_heads: 1,
        n_layers: 1,
        max_len: 4,
    }
}

pub fn with_params(model: &NatModel, params: &[Tensor]) -> NatModel {
    let mut m = model.clone();
    m.params_mut().clone_from_slice(params);
    m
}

/// Loss value and, on request, the gradient of every parameter.
pub fn loss_and_grads<F>(model: &NatModel, build: &F, want_grad: bool) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Session<'_>) -> mgmo::tape::Var,
{
    let mut s = Session::new(model, want_grad);
    let loss = build(&mut s);
    let value = s.tape.value(loss).item().unwrap();
    if !want_grad {
        return (value, Vec::new());
    }
    let g = s.tape.backward(loss).unwrap();
    (value, s.param_grads(&g))
}

/// Largest relative error of the model gradient against central finite
/// differences with step `h`.
///
/// Central differences of a loss near 10 carry roundoff of about
/// `1e-16 * 10 / h = 1e-10` at `h = 1e-5`; the denominator floor `1e-4`
/// maps that noise to a relative error of `1e-6`.
pub fn model_gradcheck<F>(model: &NatModel, build: F, h: f64) -> f64
where
    F: Fn(&mut Session<'_>) -> mgmo::tape::Var,
{
    let (_, analytic) = loss_and_grads(model, &build, true);
    let report = mgmo::gradcheck::finite_difference_check(
        |ps| loss_and_grads(&with_params(model, ps), &build, false).0,
        model.params(),
        &analytic,
        h,
        1e-4,
    );
    report.max_rel_error
}

pub fn seq(ids: &[u32]) -> Vec<TokenId> {
    ids.to_vec()
}
