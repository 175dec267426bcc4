use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ±step evaluations straddle a leaky-ReLU kink.
    pub excluded: Vec<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(DiffError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Checks the reverse-mode gradient of the scalar function `f` at `inputs`
/// against central finite differences with the given `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tolerance,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (c, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + step;
            let (tp, _, op) = evaluate(&f, &probe, false)?;
            probe[i].data_mut()[c] = orig - step;
            let (tm, _, om) = evaluate(&f, &probe, false)?;
            probe[i].data_mut()[c] = orig;
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.excluded.push((i, c));
                continue;
            }
            let fp = tp.value(op).data()[0];
            let fm = tm.value(om).data()[0];
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, c));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
