//! Clipped surrogate with KL penalty, and the SFT loss, over supplied
//! per-token log-probabilities.

use std::io::{BufRead, Write};

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

fn lit<F: Float>(x: f64) -> F {
    F::from(x).expect("literal representable in scalar type")
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy)]
pub struct CompensatedSum<F> {
    sum: F,
    comp: F,
}

impl<F: Float> Default for CompensatedSum<F> {
    fn default() -> Self {
        Self {
            sum: F::zero(),
            comp: F::zero(),
        }
    }
}

impl<F: Float> CompensatedSum<F> {
    pub fn add(&mut self, x: F) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    /// Fold another partial sum in, for sharded reductions.
    pub fn merge(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> F {
        self.sum + self.comp
    }
}

impl<F: Float> FromIterator<F> for CompensatedSum<F> {
    fn from_iter<I: IntoIterator<Item = F>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// One token of one step of one group member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord<F> {
    pub i: usize,
    pub t: usize,
    pub k: usize,
    pub logp_current: F,
    pub logp_old: F,
    pub logp_ref: F,
    #[serde(rename = "A")]
    pub advantage: F,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenBatch<F> {
    pub tokens: Vec<TokenRecord<F>>,
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("token {index}: {field} is not finite")]
    NonFinite { index: usize, field: &'static str },
    #[error("token {index}: {field} is a positive log-probability")]
    PositiveLogp { index: usize, field: &'static str },
    #[error("empty batch")]
    Empty,
    #[error("clip_eps must lie in (0, 1), got {0}")]
    BadEps(f64),
    #[error("kl_beta must be >= 0, got {0}")]
    BadBeta(f64),
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl<F: Float + Serialize + for<'de> Deserialize<'de>> TokenBatch<F> {
    pub fn new(tokens: Vec<TokenRecord<F>>) -> Self {
        Self { tokens }
    }

    /// Total token count `K`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Build from per-step log-prob sequences; `A` is broadcast over the
    /// step's tokens. Each step is `(i, t, advantage, current, old, ref)`.
    pub fn from_steps<'a>(
        steps: impl IntoIterator<Item = (usize, usize, F, &'a [F], &'a [F], &'a [F])>,
    ) -> Self
    where
        F: 'a,
    {
        let mut tokens = Vec::new();
        for (i, t, a, cur, old, rf) in steps {
            assert!(cur.len() == old.len() && cur.len() == rf.len(), "ragged step");
            for k in 0..cur.len() {
                tokens.push(TokenRecord {
                    i,
                    t,
                    k,
                    logp_current: cur[k],
                    logp_old: old[k],
                    logp_ref: rf[k],
                    advantage: a,
                });
            }
        }
        Self { tokens }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (index, r) in self.tokens.iter().enumerate() {
            for (field, v) in [
                ("logp_current", r.logp_current),
                ("logp_old", r.logp_old),
                ("logp_ref", r.logp_ref),
                ("A", r.advantage),
            ] {
                if !v.is_finite() {
                    return Err(ObjectiveError::NonFinite { index, field });
                }
                if field != "A" && v > F::zero() {
                    return Err(ObjectiveError::PositiveLogp { index, field });
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, ObjectiveError> {
        let mut tokens = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|source| ObjectiveError::Decode { line: n + 1, source })?;
            tokens.push(rec);
        }
        Ok(Self { tokens })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ObjectiveError> {
        for r in &self.tokens {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig<F> {
    pub clip_eps: F,
    pub kl_beta: F,
}

impl<F: Float> Default for ObjectiveConfig<F> {
    fn default() -> Self {
        Self {
            clip_eps: lit(0.2),
            kl_beta: lit(0.01),
        }
    }
}

impl<F: Float> ObjectiveConfig<F> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.clip_eps > F::zero() && self.clip_eps < F::one()) {
            return Err(ObjectiveError::BadEps(self.clip_eps.to_f64().unwrap_or(f64::NAN)));
        }
        if !(self.kl_beta >= F::zero()) || !self.kl_beta.is_finite() {
            return Err(ObjectiveError::BadBeta(self.kl_beta.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue<F> {
    pub surrogate: F,
    pub kl: F,
    pub total: F,
    pub tokens: usize,
}

/// `e^x - x - 1`.
pub fn k3<F: Float>(x: F) -> F {
    x.exp_m1() - x
}

/// Per-token clipped term `min(rho A, clip(rho) A)`.
pub fn clipped_term<F: Float>(r: &TokenRecord<F>, eps: F) -> F {
    let rho = (r.logp_current - r.logp_old).exp();
    let clipped = rho.max(F::one() - eps).min(F::one() + eps);
    (rho * r.advantage).min(clipped * r.advantage)
}

/// Mean clipped surrogate minus `kl_beta` times the mean k3 KL to the reference.
pub fn clipped_objective<F: Float + Serialize + for<'de> Deserialize<'de>>(
    batch: &TokenBatch<F>,
    cfg: &ObjectiveConfig<F>,
) -> Result<ObjectiveValue<F>, ObjectiveError> {
    cfg.validate()?;
    batch.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let k = F::from(batch.len()).unwrap();
    let surr: CompensatedSum<F> = batch
        .tokens
        .iter()
        .map(|r| clipped_term(r, cfg.clip_eps))
        .collect();
    let kl: CompensatedSum<F> = batch
        .tokens
        .iter()
        .map(|r| k3(r.logp_ref - r.logp_current))
        .collect();
    let surrogate = surr.value() / k;
    let kl = kl.value() / k;
    Ok(ObjectiveValue {
        surrogate,
        kl,
        total: surrogate - cfg.kl_beta * kl,
        tokens: batch.len(),
    })
}

/// Mean negative log-likelihood of expert tokens.
pub fn sft_loss<F: Float>(token_logps: &[F]) -> Result<F, ObjectiveError> {
    if token_logps.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    for (index, v) in token_logps.iter().enumerate() {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite {
                index,
                field: "logp",
            });
        }
    }
    let s: CompensatedSum<F> = token_logps.iter().map(|&x| -x).collect();
    Ok(s.value() / F::from(token_logps.len()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tok(cur: f64, old: f64, rf: f64, a: f64) -> TokenRecord<f64> {
        TokenRecord {
            i: 0,
            t: 0,
            k: 0,
            logp_current: cur,
            logp_old: old,
            logp_ref: rf,
            advantage: a,
        }
    }

    fn eval(tokens: Vec<TokenRecord<f64>>) -> ObjectiveValue<f64> {
        clipped_objective(&TokenBatch::new(tokens), &ObjectiveConfig::default()).unwrap()
    }

    #[test]
    fn single_token_examples() {
        let lo = -1.0;
        let lc = lo + 2f64.ln();
        assert_abs_diff_eq!(eval(vec![tok(lc, lo, lc, 1.0)]).surrogate, 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(eval(vec![tok(lc, lo, lc, -1.0)]).surrogate, -2.0, epsilon = 1e-12);
        let v = eval(vec![tok(-0.3, -0.5, -0.3, 0.7), tok(-2.0, -1.0, -2.0, -0.1)]);
        assert_eq!(v.kl, 0.0);
        assert_eq!(v.total, v.surrogate);
    }

    #[test]
    fn kl_nonnegative() {
        let v = eval(vec![tok(-0.1, -0.1, -3.0, 0.0), tok(-3.0, -3.0, -0.1, 0.0)]);
        assert!(v.kl > 0.0);
        assert!(v.total < 0.0);
    }

    #[test]
    fn rejects_bad_tokens() {
        let cfg = ObjectiveConfig::default();
        let b = TokenBatch::new(vec![tok(-0.1, -0.1, -0.1, 1.0), tok(f64::NAN, -0.1, -0.1, 1.0)]);
        assert!(matches!(
            clipped_objective(&b, &cfg),
            Err(ObjectiveError::NonFinite { index: 1, field: "logp_current" })
        ));
        let b = TokenBatch::new(vec![tok(0.5, -0.1, -0.1, 1.0)]);
        assert!(matches!(
            clipped_objective(&b, &cfg),
            Err(ObjectiveError::PositiveLogp { index: 0, .. })
        ));
        assert!(matches!(
            clipped_objective(&TokenBatch::<f64>::default(), &cfg),
            Err(ObjectiveError::Empty)
        ));
        let bad = ObjectiveConfig { clip_eps: 1.0, kl_beta: 0.01 };
        assert!(matches!(
            clipped_objective(&TokenBatch::new(vec![tok(-0.1, -0.1, -0.1, 1.0)]), &bad),
            Err(ObjectiveError::BadEps(_))
        ));
    }

    #[test]
    fn sft_examples() {
        assert_abs_diff_eq!(sft_loss(&[-0.5, -1.5]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(sft_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sft_loss(&[-2.0]).unwrap(), 2.0);
        assert!(sft_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let b = TokenBatch::new(vec![tok(-0.1, -0.2, -0.3, 0.5), tok(-1.0, -1.0, -1.0, -0.5)]);
        let mut buf = Vec::new();
        b.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"A\":0.5"));
        let back = TokenBatch::<f64>::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, b);
        assert!(matches!(
            TokenBatch::<f64>::read_jsonl(&b"{\"i\":0}\n"[..]),
            Err(ObjectiveError::Decode { line: 1, .. })
        ));
    }

    #[test]
    fn compensated_merge_matches_serial() {
        let xs: Vec<f64> = (0..1000).map(|i| 1e-3 * ((i * 7919) % 101) as f64 - 0.05).collect();
        let serial: CompensatedSum<f64> = xs.iter().copied().collect();
        let mut sharded = CompensatedSum::default();
        for chunk in xs.chunks(37).rev() {
            sharded.merge(&chunk.iter().copied().collect());
        }
        assert!((serial.value() - sharded.value()).abs() <= 1e-12);
    }

    #[test]
    fn generic_f32() {
        let b = TokenBatch::<f32>::new(vec![TokenRecord {
            i: 0,
            t: 0,
            k: 0,
            logp_current: -0.5,
            logp_old: -0.5,
            logp_ref: -0.5,
            advantage: 0.25,
        }]);
        let v = clipped_objective(&b, &ObjectiveConfig::default()).unwrap();
        assert_eq!(v.surrogate, 0.25f32);
    }
}
