//! Tri-modal contrastive objective.
//!
//! Logits are `E_Q · E_Kᵀ · e^τ`; each modality pair contributes a row-wise
//! and a column-wise diagonal cross-entropy, and the audio–text and
//! spectrum–text pairs are averaged into one loss.

use crate::error::{MuserError, Result};
use crate::numerics::matrix::{log_sum_exp, matmul_bt_unchecked};
use crate::numerics::{cross_entropy_diag, Axis, GradTape, Matrix, Var};

/// How per-example losses combine into the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(MuserError::invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    pub aggregation: Aggregation,
    /// Caps `e^τ` when set; the cap blocks the temperature gradient.
    pub logit_scale_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Matrix,
    pub tau_used: f64,
}

fn check_pair(op: &'static str, eq: &Matrix, ek: &Matrix) -> Result<()> {
    if eq.shape() != ek.shape() {
        return Err(MuserError::Shape {
            op,
            left: eq.shape_str(),
            right: ek.shape_str(),
        });
    }
    if eq.rows() == 0 {
        return Err(MuserError::invalid(format!("{op} on an empty batch")));
    }
    Ok(())
}

/// `eq · ekᵀ · e^τ`.
pub fn logits(eq: &Matrix, ek: &Matrix, tau: f64) -> Result<LogitMatrix> {
    check_pair("logits", eq, ek)?;
    let scale = tau.exp();
    let values = matmul_bt_unchecked(eq, ek).map(|v| v * scale);
    values.check_finite("logits")?;
    Ok(LogitMatrix {
        values,
        tau_used: tau,
    })
}

/// (row-wise, column-wise) diagonal cross-entropy.
pub fn pair_loss(lm: &LogitMatrix) -> Result<(f64, f64)> {
    Ok((
        cross_entropy_diag(&lm.values, Axis::Rows)?,
        cross_entropy_diag(&lm.values, Axis::Cols)?,
    ))
}

/// Mean per-example loss: `(ℓ_AT + ℓ_TA + ℓ_ST + ℓ_TS)/4`, or
/// `(ℓ_AT + ℓ_TA)/2` when `spectrum` is `None`.
pub fn muser_loss(audio: &Matrix, text: &Matrix, spectrum: Option<&Matrix>, tau: f64) -> Result<f64> {
    let (at, ta) = pair_loss(&logits(audio, text, tau)?)?;
    match spectrum {
        Some(spec) => {
            let (st, ts) = pair_loss(&logits(spec, text, tau)?)?;
            Ok((at + ta + st + ts) / 4.0)
        }
        None => Ok((at + ta) / 2.0),
    }
}

/// Contrastive loss variant with the positive excluded from the denominator
/// and similarities divided by `τ`. Diagnostic only; can be negative.
pub fn one_way_loss(eq: &Matrix, ek: &Matrix, tau: f64) -> Result<f64> {
    check_pair("one_way_loss", eq, ek)?;
    let n = eq.rows();
    if n < 2 {
        return Err(MuserError::invalid(
            "one_way_loss needs at least 2 examples (empty denominator)",
        ));
    }
    if tau == 0.0 {
        return Err(MuserError::invalid("one_way_loss needs tau != 0"));
    }
    let sims = matmul_bt_unchecked(eq, ek);
    let mut total = 0.0;
    for i in 0..n {
        let lse = log_sum_exp((0..n).filter(|&j| j != i).map(|j| sims.get(i, j) / tau));
        total += lse - sims.get(i, i) / tau;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(MuserError::NonFinite("one_way_loss".into()));
    }
    Ok(loss)
}

fn pair_on_tape(tape: &mut GradTape, q: Var, k: Var, scale: Var) -> Result<(Var, Var)> {
    let sims = tape.matmul_bt(q, k)?;
    let lm = tape.mul_scalar(sims, scale)?;
    Ok((
        tape.cross_entropy_diag(lm, Axis::Rows)?,
        tape.cross_entropy_diag(lm, Axis::Cols)?,
    ))
}

/// [`muser_loss`] recorded on a tape so gradients reach the embeddings and
/// the temperature node `tau` (`1×1`).
pub fn muser_loss_on_tape(
    tape: &mut GradTape,
    audio: Var,
    text: Var,
    spectrum: Option<Var>,
    tau: Var,
    options: &LossOptions,
) -> Result<Var> {
    let n = tape.value(audio).rows();
    if tape.value(audio).shape() != tape.value(text).shape() {
        return Err(MuserError::Shape {
            op: "muser_loss",
            left: tape.value(audio).shape_str(),
            right: tape.value(text).shape_str(),
        });
    }
    let mut scale = tape.exp(tau);
    if let Some(max) = options.logit_scale_max {
        if tape.value(scale).get(0, 0) > max {
            scale = tape.leaf(Matrix::scalar(max));
        }
    }
    let (at, ta) = pair_on_tape(tape, audio, text, scale)?;
    let mut total = tape.add(at, ta)?;
    let terms = match spectrum {
        Some(s) => {
            let (st, ts) = pair_on_tape(tape, s, text, scale)?;
            total = tape.add(total, st)?;
            total = tape.add(total, ts)?;
            4.0
        }
        None => 2.0,
    };
    let factor = match options.aggregation {
        Aggregation::Mean => 1.0 / terms,
        Aggregation::Sum => n as f64 / terms,
    };
    Ok(tape.scale(total, factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CLOSED_2X2: f64 = 0.313261687518223;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        l2_normalize_rows(
            &Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
            1e-12,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_constant_matches_hand_evaluation() {
        let e = std::f64::consts::E;
        assert!((CLOSED_2X2 + (e / (e + 1.0)).ln()).abs() < 1e-15);
    }

    #[test]
    fn logits_cases() {
        let id = Matrix::identity(3);
        assert_eq!(logits(&id, &id, 0.0).unwrap().values, Matrix::identity(3));
        let same = Matrix::from_fn(4, 3, |_, c| if c == 1 { 1.0 } else { 0.0 });
        assert_eq!(logits(&same, &same, 0.0).unwrap().values, Matrix::filled(4, 4, 1.0));

        let a = unit_rows(6, 5, 1);
        let b = unit_rows(6, 5, 2);
        let tau = 1.3;
        let lm = logits(&a, &b, tau).unwrap();
        assert_eq!(lm.tau_used, tau);
        for v in lm.values.data() {
            let cos = v / tau.exp();
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&cos));
        }
        assert!(logits(&a, &unit_rows(5, 5, 3), 0.0).is_err());
    }

    #[test]
    fn pair_loss_cases() {
        let one = LogitMatrix {
            values: Matrix::scalar(3.0),
            tau_used: 0.0,
        };
        assert_eq!(pair_loss(&one).unwrap(), (0.0, 0.0));

        let sym = Matrix::new(3, 3, vec![1.0, 0.2, -0.4, 0.2, 0.7, 0.1, -0.4, 0.1, 0.3]).unwrap();
        let (r, c) = pair_loss(&LogitMatrix {
            values: sym,
            tau_used: 0.0,
        })
        .unwrap();
        assert!((r - c).abs() < 1e-12);

        let (r, c) = pair_loss(&LogitMatrix {
            values: Matrix::identity(2),
            tau_used: 0.0,
        })
        .unwrap();
        assert!((r - CLOSED_2X2).abs() < 1e-6 && (c - CLOSED_2X2).abs() < 1e-6);
    }

    #[test]
    fn muser_loss_closed_forms() {
        let single = unit_rows(1, 4, 1);
        assert_eq!(muser_loss(&single, &single, Some(&single), 2.0).unwrap(), 0.0);

        let id = Matrix::identity(2);
        let l = muser_loss(&id, &id, Some(&id), 0.0).unwrap();
        assert!((l - CLOSED_2X2).abs() < 1e-6);

        for n in [2usize, 4, 8] {
            let row = unit_rows(1, 5, 9);
            let same = Matrix::from_fn(n, 5, |_, c| row.get(0, c));
            let l = muser_loss(&same, &same, Some(&same), 2.659).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn without_spectrum_is_half_of_audio_pair() {
        let a = unit_rows(5, 4, 1);
        let t = unit_rows(5, 4, 2);
        let tau = 0.8;
        let l = muser_loss(&a, &t, None, tau).unwrap();
        // Recompute directly from the definition.
        let scale = tau.exp();
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..5 {
            let s: Vec<f64> = (0..5)
                .map(|j| scale * crate::numerics::matrix::dot(a.row(i), t.row(j)))
                .collect();
            rows += -(s[i].exp() / s.iter().map(|v| v.exp()).sum::<f64>()).ln();
            let c: Vec<f64> = (0..5)
                .map(|j| scale * crate::numerics::matrix::dot(a.row(j), t.row(i)))
                .collect();
            cols += -(c[i].exp() / c.iter().map(|v| v.exp()).sum::<f64>()).ln();
        }
        assert!((l - (rows / 5.0 + cols / 5.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_way_cases() {
        let id = Matrix::identity(2);
        assert!((one_way_loss(&id, &id, 1.0).unwrap() + 1.0).abs() < 1e-12);
        let row = unit_rows(1, 3, 4);
        for n in [2usize, 3, 7] {
            let same = Matrix::from_fn(n, 3, |_, c| row.get(0, c));
            let l = one_way_loss(&same, &same, 0.5).unwrap();
            assert!((l - ((n - 1) as f64).ln()).abs() < 1e-12);
        }
        assert!(one_way_loss(&row, &row, 1.0).is_err());
        assert!(one_way_loss(&id, &id, 0.0).is_err());
    }

    #[test]
    fn tape_matches_direct_and_sum_scales() {
        let a = unit_rows(4, 6, 1);
        let t = unit_rows(4, 6, 2);
        let s = unit_rows(4, 6, 3);
        let direct = muser_loss(&a, &t, Some(&s), 1.1).unwrap();
        for (agg, factor) in [(Aggregation::Mean, 1.0), (Aggregation::Sum, 4.0)] {
            let mut tape = GradTape::new();
            let (va, vt, vs) = (tape.leaf(a.clone()), tape.leaf(t.clone()), tape.leaf(s.clone()));
            let tau = tape.leaf(Matrix::scalar(1.1));
            let opts = LossOptions {
                aggregation: agg,
                logit_scale_max: None,
            };
            let l = muser_loss_on_tape(&mut tape, va, vt, Some(vs), tau, &opts).unwrap();
            assert!((tape.value(l).get(0, 0) - factor * direct).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_scale_cap_applies() {
        let a = unit_rows(3, 4, 1);
        let t = unit_rows(3, 4, 2);
        let mut tape = GradTape::new();
        let (va, vt) = (tape.leaf(a.clone()), tape.leaf(t.clone()));
        let tau = tape.leaf(Matrix::scalar(10.0));
        let opts = LossOptions {
            aggregation: Aggregation::Mean,
            logit_scale_max: Some(100.0),
        };
        let l = muser_loss_on_tape(&mut tape, va, vt, None, tau, &opts).unwrap();
        let capped = muser_loss(&a, &t, None, 100f64.ln()).unwrap();
        assert!((tape.value(l).get(0, 0) - capped).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(tau).get(0, 0), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn permutation_equivariance(seed in any::<u64>(), n in 2usize..7) {
                let a = unit_rows(n, 5, seed);
                let t = unit_rows(n, 5, seed ^ 1);
                let s = unit_rows(n, 5, seed ^ 2);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let p = |m: &Matrix| Matrix::from_fn(n, 5, |r, c| m.get(perm[r], c));
                let base = muser_loss(&a, &t, Some(&s), 0.7).unwrap();
                let moved = muser_loss(&p(&a), &p(&t), Some(&p(&s)), 0.7).unwrap();
                prop_assert_eq!(base.to_bits(), moved.to_bits());
            }

            #[test]
            fn loss_bounds(seed in any::<u64>(), n in 1usize..9) {
                let tau0 = crate::encoders::initial_temperature();
                let a = unit_rows(n, 4, seed);
                let t = unit_rows(n, 4, seed ^ 5);
                let s = unit_rows(n, 4, seed ^ 6);
                let l = muser_loss(&a, &t, Some(&s), tau0).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert!(l <= (n as f64).ln() + 2.0 * tau0.exp());
            }
        }
    }
}
