use super::{NodeId, NumericsError, Tape, Tensor};

/// Compares tape gradients with central finite differences.
///
/// `f` builds a scalar-valued graph from the leaves it is handed (one per
/// entry of `inputs`, same order). Returns the maximum over every input
/// element of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let eval = |point: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.data()[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut point = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for j in 0..point[i].len() {
            let original = point[i].data()[j];
            point[i].data_mut()[j] = original + step;
            let plus = eval(&point)?;
            point[i].data_mut()[j] = original - step;
            let minus = eval(&point)?;
            point[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let s = tape.scale(ids[0], 2.5)?;
                tape.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|tape, ids| tape.scale(ids[0], 1.0), &[x], 1e-5);
        assert!(matches!(res, Err(NumericsError::NonScalarLoss(_))));
    }
}
