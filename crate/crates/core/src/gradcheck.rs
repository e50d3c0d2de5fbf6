//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences at f64 are trustworthy to roughly 1e-10 relative for
//! smooth functions at the default step, which leaves a comfortable margin
//! against the 1e-4 acceptance threshold. f32 rounding noise would swamp
//! that margin, so checks run at f64 regardless of the precision the model
//! trains in.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerances for comparing analytic and numeric derivatives.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    /// Central-difference half step.
    pub epsilon: f64,
    /// Relative error bound: |a - n| <= rel_tolerance * max(|a|, |n|).
    pub rel_tolerance: f64,
    /// Absolute slack for derivatives that are themselves ~0.
    pub abs_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            epsilon: 1e-5,
            rel_tolerance: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// One disagreement between the tape and the finite-difference probe.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub elements_checked: usize,
    pub max_abs_diff: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compare the tape's gradients of `build`'s scalar output against central
/// finite differences, for every element of every input.
///
/// `build` must be a pure function of the tape and the leaf variables it is
/// handed: it is re-run twice per element, so any internal randomness would
/// corrupt the probe.
pub fn check<B>(
    inputs: &[Tensor<f64>],
    settings: GradCheckSettings,
    build: B,
) -> Result<GradReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf grads are zero-filled").data().to_vec())
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport {
        elements_checked: 0,
        max_abs_diff: 0.0,
        mismatches: Vec::new(),
    };
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + settings.epsilon;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - settings.epsilon;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * settings.epsilon);
            let a = analytic[ti][ei];
            let diff = (a - numeric).abs();
            report.elements_checked += 1;
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
            }
            let scale = a.abs().max(numeric.abs());
            if diff > settings.rel_tolerance * scale && diff > settings.abs_floor {
                report.mismatches.push(GradMismatch {
                    input: ti,
                    element: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Panic with a readable digest unless the check passes. Test helper.
pub fn assert_grads_match<B>(inputs: &[Tensor<f64>], build: B)
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check(inputs, GradCheckSettings::default(), build).expect("gradcheck build failed");
    if !report.passed() {
        let mut msg = format!(
            "{} of {} gradient elements disagree (worst |diff| {:.3e}):\n",
            report.mismatches.len(),
            report.elements_checked,
            report.max_abs_diff
        );
        for m in report.mismatches.iter().take(10) {
            msg.push_str(&format!(
                "  input {} elem {}: analytic {:.9e} vs numeric {:.9e}\n",
                m.input, m.element, m.analytic, m.numeric
            ));
        }
        panic!("{msg}");
    }
}
