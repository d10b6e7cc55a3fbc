//! Connectionist temporal classification in log space.
//!
//! A head emits a [`LogProbSequence`]: `T` rows of `K + 1` normalized
//! log-probabilities, blank at index `K`. [`CtcLattice::compute`] runs the
//! forward and backward recursions over the blank-interleaved label sequence
//! of length `2L + 1`; the loss is `-log p(l | x)` and the gradient is taken
//! with respect to the pre-softmax scores that produced the row.
//!
//! [`brute_force_likelihood`] enumerates every path and is only meant as an
//! oracle for small problems.

use thiserror::Error;

/// Errors from CTC evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("label sequence of length {labels} needs at least {required} steps, got {steps}")]
    Infeasible {
        steps: usize,
        labels: usize,
        required: usize,
    },
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("label sequence contains the blank index {0}")]
    BlankInLabels(usize),
    #[error("heads disagree on sequence length: char head {char_steps}, row head {row_steps}")]
    StepMismatch {
        char_steps: usize,
        row_steps: usize,
    },
    #[error("brute-force enumeration of {paths} paths exceeds the limit of {limit}")]
    EnumerationTooLarge { paths: f64, limit: u64 },
    #[error("row {step} is not a log-distribution (logsumexp = {lse})")]
    NotNormalized { step: usize, lse: f64 },
    #[error("expected {expected} values for a {steps}×{width} matrix, got {got}")]
    Shape {
        steps: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("sequence must have at least one step")]
    Empty,
}

/// Paths beyond this count are refused by [`brute_force_likelihood`].
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

const NORMALIZATION_TOL: f64 = 1e-6;

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice. Returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row {
        *v -= lse;
    }
}

/// `T × (K + 1)` per-step log-probabilities, blank at index `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbSequence {
    steps: usize,
    labels: usize,
    values: Vec<f64>,
}

impl LogProbSequence {
    /// Wraps already normalized log-probabilities. Every row must
    /// log-sum-exp to zero within 1e-6.
    pub fn new(steps: usize, labels: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        let seq = Self::from_parts(steps, labels, values)?;
        for t in 0..steps {
            let lse = log_sum_exp(seq.row(t));
            if !(lse.abs() <= NORMALIZATION_TOL) {
                return Err(CtcError::NotNormalized { step: t, lse });
            }
        }
        Ok(seq)
    }

    /// Applies a log-softmax to each row of raw scores.
    pub fn from_scores(steps: usize, labels: usize, mut scores: Vec<f64>) -> Result<Self, CtcError> {
        let width = labels + 1;
        if steps > 0 && scores.len() == steps * width {
            for row in scores.chunks_mut(width) {
                log_softmax_in_place(row);
            }
        }
        Self::from_parts(steps, labels, scores)
    }

    fn from_parts(steps: usize, labels: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        if steps == 0 {
            return Err(CtcError::Empty);
        }
        let width = labels + 1;
        if values.len() != steps * width {
            return Err(CtcError::Shape {
                steps,
                width,
                expected: steps * width,
                got: values.len(),
            });
        }
        Ok(Self {
            steps,
            labels,
            values,
        })
    }

    /// Number of time steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of non-blank labels `K`.
    pub fn num_labels(&self) -> usize {
        self.labels
    }

    pub fn blank(&self) -> usize {
        self.labels
    }

    /// Row width, `K + 1`.
    pub fn width(&self) -> usize {
        self.labels + 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.values[t * w..(t + 1) * w]
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.width() + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Applies the collapse map: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `[∅, l1, ∅, l2, ∅, …, lL, ∅]`.
pub fn extend_labels(labels: &[usize], blank: usize) -> Result<Vec<usize>, CtcError> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        if l == blank {
            return Err(CtcError::BlankInLabels(blank));
        }
        ext.push(l);
        ext.push(blank);
    }
    Ok(ext)
}

/// Fewest steps that can emit `labels`: one per label plus a separating
/// blank between each adjacent equal pair.
pub fn min_steps(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Shortest path that collapses to `labels`.
pub fn canonical_path(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(min_steps(labels));
    for (i, &l) in labels.iter().enumerate() {
        if i > 0 && labels[i - 1] == l {
            path.push(blank);
        }
        path.push(l);
    }
    path
}

fn check_labels(lp: &LogProbSequence, labels: &[usize]) -> Result<(), CtcError> {
    for &l in labels {
        if l == lp.blank() {
            return Err(CtcError::BlankInLabels(l));
        }
        if l > lp.blank() {
            return Err(CtcError::LabelOutOfRange {
                label: l,
                num_labels: lp.num_labels(),
            });
        }
    }
    let required = min_steps(labels);
    if lp.steps() < required {
        return Err(CtcError::Infeasible {
            steps: lp.steps(),
            labels: labels.len(),
            required,
        });
    }
    Ok(())
}

/// Forward/backward tables for one (sequence, labels) pair.
///
/// `alpha[t][s]` is the log-probability of all path prefixes ending in state
/// `s` at step `t`, emissions up to and including `t`. `beta[t][s]` covers the
/// suffix after `t`, so `alpha[t][s] + beta[t][s]` is the log-mass of paths
/// through `(t, s)` and sums (in log space) to the likelihood at every `t`.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    extended: Vec<usize>,
    steps: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl CtcLattice {
    pub fn compute(lp: &LogProbSequence, labels: &[usize]) -> Result<Self, CtcError> {
        check_labels(lp, labels)?;
        let blank = lp.blank();
        let ext = extend_labels(labels, blank)?;
        let s_len = ext.len();
        let steps = lp.steps();
        // skip[s]: the transition s-2 → s is allowed.
        let skip: Vec<bool> = (0..s_len)
            .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
            .collect();

        let mut alpha = vec![f64::NEG_INFINITY; steps * s_len];
        alpha[0] = lp.get(0, blank);
        if s_len > 1 {
            alpha[1] = lp.get(0, ext[1]);
        }
        for t in 1..steps {
            let (prev, cur) = alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            let cur = &mut cur[..s_len];
            for s in 0..s_len {
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if skip[s] {
                    acc = log_add(acc, prev[s - 2]);
                }
                if acc != f64::NEG_INFINITY {
                    cur[s] = acc + lp.get(t, ext[s]);
                }
            }
        }

        let mut beta = vec![f64::NEG_INFINITY; steps * s_len];
        let last = (steps - 1) * s_len;
        beta[last + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[last + s_len - 2] = 0.0;
        }
        for t in (0..steps - 1).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * s_len);
            let cur = &mut cur[t * s_len..];
            let next = &next[..s_len];
            for s in 0..s_len {
                let mut acc = next[s] + lp.get(t + 1, ext[s]);
                if s + 1 < s_len {
                    acc = log_add(acc, next[s + 1] + lp.get(t + 1, ext[s + 1]));
                }
                if s + 2 < s_len && skip[s + 2] {
                    acc = log_add(acc, next[s + 2] + lp.get(t + 1, ext[s + 2]));
                }
                cur[s] = acc;
            }
        }

        let mut log_likelihood = alpha[last + s_len - 1];
        if s_len > 1 {
            log_likelihood = log_add(log_likelihood, alpha[last + s_len - 2]);
        }
        Ok(Self {
            extended: ext,
            steps,
            alpha,
            beta,
            log_likelihood,
        })
    }

    pub fn extended(&self) -> &[usize] {
        &self.extended
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.extended.len() + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.extended.len() + s]
    }

    /// `log p(l | x)`.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// `-log p(l | x)`.
    pub fn loss(&self) -> f64 {
        -self.log_likelihood
    }

    /// Gradient of the loss with respect to the pre-softmax scores of every
    /// step: `softmax(z)[t][k] - occupancy[t][k] / p(l | x)`.
    pub fn score_gradient(&self, lp: &LogProbSequence) -> Vec<f64> {
        let width = lp.width();
        let s_len = self.extended.len();
        let mut grad = vec![0.0; self.steps * width];
        let mut occupancy = vec![f64::NEG_INFINITY; width];
        for t in 0..self.steps {
            occupancy.fill(f64::NEG_INFINITY);
            for s in 0..s_len {
                let k = self.extended[s];
                occupancy[k] = log_add(
                    occupancy[k],
                    self.alpha[t * s_len + s] + self.beta[t * s_len + s],
                );
            }
            let row = &mut grad[t * width..(t + 1) * width];
            for k in 0..width {
                let posterior = if occupancy[k] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (occupancy[k] - self.log_likelihood).exp()
                };
                row[k] = lp.get(t, k).exp() - posterior;
            }
        }
        grad
    }
}

/// `-log p(labels | x)`.
pub fn ctc_loss(lp: &LogProbSequence, labels: &[usize]) -> Result<f64, CtcError> {
    Ok(CtcLattice::compute(lp, labels)?.loss())
}

/// Gradient of [`ctc_loss`] with respect to the pre-softmax scores, `T × (K + 1)`.
pub fn ctc_grad(lp: &LogProbSequence, labels: &[usize]) -> Result<Vec<f64>, CtcError> {
    Ok(CtcLattice::compute(lp, labels)?.score_gradient(lp))
}

/// Loss and score gradient of one head.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl HeadLoss {
    pub fn compute(lp: &LogProbSequence, labels: &[usize]) -> Result<Self, CtcError> {
        let lattice = CtcLattice::compute(lp, labels)?;
        Ok(Self {
            loss: lattice.loss(),
            grad: lattice.score_gradient(lp),
        })
    }
}

/// Multi-task objective: character loss plus (weighted) row loss.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub char: HeadLoss,
    pub row: Option<HeadLoss>,
}

/// Sums the character-head loss and, when present, the row-head loss scaled
/// by `row_weight` (1.0 gives the plain sum). Gradients of the row head are
/// scaled by the same weight.
pub fn total_loss(
    char_head: (&LogProbSequence, &[usize]),
    row_head: Option<(&LogProbSequence, &[usize])>,
    row_weight: f64,
) -> Result<TotalLoss, CtcError> {
    let char = HeadLoss::compute(char_head.0, char_head.1)?;
    let row = match row_head {
        Some((lp, labels)) => {
            if lp.steps() != char_head.0.steps() {
                return Err(CtcError::StepMismatch {
                    char_steps: char_head.0.steps(),
                    row_steps: lp.steps(),
                });
            }
            let mut head = HeadLoss::compute(lp, labels)?;
            if row_weight != 1.0 {
                head.grad.iter_mut().for_each(|g| *g *= row_weight);
            }
            Some(head)
        }
        None => None,
    };
    let total = match &row {
        Some(r) => char.loss + row_weight * r.loss,
        None => char.loss,
    };
    Ok(TotalLoss { total, char, row })
}

/// `p(labels | x)` by enumerating all `(K + 1)^T` paths.
pub fn brute_force_likelihood(lp: &LogProbSequence, labels: &[usize]) -> Result<f64, CtcError> {
    let width = lp.width();
    let paths = (width as f64).powi(lp.steps() as i32);
    if paths > ENUMERATION_LIMIT as f64 {
        return Err(CtcError::EnumerationTooLarge {
            paths,
            limit: ENUMERATION_LIMIT,
        });
    }
    let blank = lp.blank();
    let mut path = vec![0usize; lp.steps()];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == labels {
            let log_p: f64 = path.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum();
            total += log_p.exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == path.len() {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}
