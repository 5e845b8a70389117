use super::{GradBuffer, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn scalar_of(tape: &Tape, v: Var, coord: &str) -> Result<f64> {
    let t = tape.value(v);
    let x = t.item().ok_or_else(|| {
        Error::Contract(format!(
            "function is not scalar-valued (shape {:?})",
            t.shape()
        ))
    })?;
    if !x.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite function value {x} at {coord}"
        )));
    }
    Ok(x)
}

fn eval_at(f: &impl Fn(&mut Tape, Var) -> Result<Var>, point: Tensor, coord: &str) -> Result<f64> {
    let mut tape = Tape::detached();
    let x = tape.constant(point);
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y, coord)
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of `f` w.r.t. its single tensor argument at `point`.
pub fn check_gradients(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let mut tape = Tape::detached();
    let x = tape.variable(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y, "the base point")?;
    let (grads, _) = tape.backward(y)?;
    let ad = grads
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let coord = format!("coordinate {i}");
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval_at(&f, plus, &coord)? - eval_at(&f, minus, &coord)?) / (2.0 * eps);
        if !ad[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at {coord}")));
        }
        worst = worst.max(rel_err(ad[i], fd));
    }
    Ok(worst)
}

/// Same check for a function of a parameter set, restricted to the listed
/// parameters. At most `max_coords` evenly strided coordinates are probed per
/// parameter (`None` probes all of them).
pub fn check_param_gradients(
    params: &ParamSet,
    ids: &[ParamId],
    f: impl Fn(&mut Tape<'_>) -> Result<Var>,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    check_eps(eps)?;
    let mut buf = GradBuffer::zeros_like(params);
    {
        let mut tape = Tape::new(params);
        let y = f(&mut tape)?;
        scalar_of(&tape, y, "the base point")?;
        tape.backward_into(y, &mut buf)?;
    }
    let eval = |p: &ParamSet, coord: &str| -> Result<f64> {
        let mut tape = Tape::new(p);
        let y = f(&mut tape)?;
        scalar_of(&tape, y, coord)
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = params.get(id).len();
        let stride = match max_coords {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let coord = format!("{}[{i}]", params.name(id));
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work, &coord)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work, &coord)?;
            work.get_mut(id).data_mut()[i] = orig;
            let ad = buf.get(id)[i];
            if !ad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {coord}")));
            }
            worst = worst.max(rel_err(ad, (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
