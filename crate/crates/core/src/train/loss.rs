use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<'t, T: Element>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {d:?} for {} labels", labels.len())));
    }
    let (b, k) = (d[0], d[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
    }
    let mut onehot = vec![T::zero(); b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let oh = logits.tape().constant(Tensor::from_parts(vec![b, k], onehot));
    logits.log_softmax()?.mul(oh)?.sum_all()?.scale(-1.0 / b as f64)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn closed_forms() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::zeros([2, 4]));
        let l = cross_entropy(u, &[0, 3]).unwrap().value().data()[0];
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let x = tape.constant(Tensor::from_f64([1, 2], &[3f64.ln(), 0.0]).unwrap());
        let l = cross_entropy(x, &[0]).unwrap().value().data()[0];
        assert!((l - 0.28768207245178).abs() < 1e-10);
        let big = tape.constant(Tensor::from_f64([1, 3], &[200.0, 0.0, -5.0]).unwrap());
        assert!(cross_entropy(big, &[0]).unwrap().value().data()[0] < 1e-60);
        assert!(matches!(cross_entropy(u, &[0, 4]), Err(Error::Usage(_))));
    }

    #[test]
    fn accuracy_counts() {
        let t = Tensor::<f64>::from_f64([3, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap();
        assert!((accuracy(&t, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
