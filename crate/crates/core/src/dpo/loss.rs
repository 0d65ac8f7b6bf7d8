//! Masked action scores, the masked preference loss, the masked SFT variant,
//! and their analytic gradients.
//!
//! Scores sum per-token log-probabilities weighted by a binary mask, walking
//! the response left to right from the last context token. The preference
//! loss per pair is `-log sigmoid(beta * ((s_theta+ - s_theta-) - (s_ref+ -
//! s_ref-)))`, averaged over the batch, with the mask instantiated per
//! response. Batch members are evaluated in parallel and reduced in input
//! order, so results are identical in sequential builds.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::par;
use crate::prefs::MaskVector;

use super::{ToyPolicy, TokenSeq};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mask length {mask} does not match response length {response}")]
    LengthMismatch { mask: usize, response: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty context (needs at least a begin token)")]
    EmptyContext,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
}

/// Loss value with per-pair diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// The beta-scaled inner difference, one entry per pair.
    pub per_pair_margin: Vec<f64>,
    /// Frobenius norm over all returned gradient blocks; 0 when the loss was
    /// computed without gradients.
    pub grad_norm: f64,
    pub beta: f64,
}

/// One tokenized preference example with response-wise masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    pub context: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub chosen_mask: MaskVector,
    pub rejected_mask: MaskVector,
}

/// Gradients with respect to the base logit table and, when an adapter is
/// attached, its two low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradients {
    pub base: Array2<f64>,
    /// `(dA, dB)` when the policy carries an adapter.
    pub adapter: Option<(Array2<f64>, Array2<f64>)>,
}

impl PolicyGradients {
    fn zeros_like(policy: &ToyPolicy) -> Self {
        let v = policy.vocab_size();
        let adapter = policy
            .adapter
            .as_ref()
            .map(|d| (Array2::zeros((v, d.rank)), Array2::zeros((d.rank, v))));
        PolicyGradients { base: Array2::zeros((v, v)), adapter }
    }

    pub fn norm(&self) -> f64 {
        let mut total: f64 = self.base.iter().map(|g| g * g).sum();
        if let Some((da, db)) = &self.adapter {
            total += da.iter().map(|g| g * g).sum::<f64>();
            total += db.iter().map(|g| g * g).sum::<f64>();
        }
        total.sqrt()
    }
}

/// Numerically stable `-log sigmoid(x) = softplus(-x)`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_ids(seq: &TokenSeq, vocab: usize) -> Result<(), LossError> {
    for &id in &seq.ids {
        if id as usize >= vocab {
            return Err(LossError::TokenOutOfRange { id, vocab });
        }
    }
    Ok(())
}

/// Masked action score: the mask-weighted sum of response token
/// log-probabilities under the policy, conditioned on the context prefix.
/// Exact left-to-right sum; an all-zero mask yields exactly 0.
pub fn masked_score(
    policy: &ToyPolicy,
    context: &TokenSeq,
    response: &TokenSeq,
    mask: &MaskVector,
) -> Result<f64, LossError> {
    if mask.len() != response.len() {
        return Err(LossError::LengthMismatch { mask: mask.len(), response: response.len() });
    }
    if context.is_empty() {
        return Err(LossError::EmptyContext);
    }
    check_ids(context, policy.vocab_size())?;
    check_ids(response, policy.vocab_size())?;

    let mut prev = *context.ids.last().expect("non-empty context");
    let mut total = 0.0;
    for (j, &next) in response.ids.iter().enumerate() {
        if mask.weights[j] != 0 {
            total += policy.log_prob(prev, next);
        }
        prev = next;
    }
    Ok(total)
}

/// One masked-token scoring event: the transition it scores and the policy's
/// full next-token distribution at that point (needed for the gradient).
struct Event {
    prev: u32,
    next: u32,
    probs: Array1<f64>,
}

fn score_with_events(
    policy: &ToyPolicy,
    context: &TokenSeq,
    response: &TokenSeq,
    mask: &MaskVector,
) -> (f64, Vec<Event>) {
    let mut prev = *context.ids.last().expect("non-empty context");
    let mut total = 0.0;
    let mut events = Vec::new();
    for (j, &next) in response.ids.iter().enumerate() {
        if mask.weights[j] != 0 {
            let log_probs = policy.log_probs(prev);
            total += log_probs[next as usize];
            events.push(Event { prev, next, probs: log_probs.mapv(f64::exp) });
        }
        prev = next;
    }
    (total, events)
}

fn validate_pair(pair: &TokenizedPair, vocab: usize) -> Result<(), LossError> {
    if pair.chosen_mask.len() != pair.chosen.len() {
        return Err(LossError::LengthMismatch {
            mask: pair.chosen_mask.len(),
            response: pair.chosen.len(),
        });
    }
    if pair.rejected_mask.len() != pair.rejected.len() {
        return Err(LossError::LengthMismatch {
            mask: pair.rejected_mask.len(),
            response: pair.rejected.len(),
        });
    }
    if pair.context.is_empty() {
        return Err(LossError::EmptyContext);
    }
    check_ids(&pair.context, vocab)?;
    check_ids(&pair.chosen, vocab)?;
    check_ids(&pair.rejected, vocab)
}

/// Masked preference loss over a batch (mean of per-pair `-log sigmoid`).
pub fn dpo_loss(
    batch: &[TokenizedPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    beta: f64,
) -> Result<LossReport, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    assert!(beta > 0.0, "beta must be positive");
    for pair in batch {
        validate_pair(pair, policy.vocab_size())?;
    }
    let margins: Vec<f64> = par::map_collect(batch, |pair| pair_margin(pair, policy, reference, beta));
    let loss = margins.iter().map(|m| neg_log_sigmoid(*m)).sum::<f64>() / margins.len() as f64;
    Ok(LossReport { loss, per_pair_margin: margins, grad_norm: 0.0, beta })
}

fn pair_margin(pair: &TokenizedPair, policy: &ToyPolicy, reference: &ToyPolicy, beta: f64) -> f64 {
    let s_pos = masked_score(policy, &pair.context, &pair.chosen, &pair.chosen_mask)
        .expect("pair validated");
    let s_neg = masked_score(policy, &pair.context, &pair.rejected, &pair.rejected_mask)
        .expect("pair validated");
    let r_pos = masked_score(reference, &pair.context, &pair.chosen, &pair.chosen_mask)
        .expect("pair validated");
    let r_neg = masked_score(reference, &pair.context, &pair.rejected, &pair.rejected_mask)
        .expect("pair validated");
    beta * ((s_pos - s_neg) - (r_pos - r_neg))
}

struct PairWork {
    margin: f64,
    chosen_events: Vec<Event>,
    rejected_events: Vec<Event>,
}

/// Preference loss plus analytic gradients for the trainable policy's base
/// table and adapter factors. Per-pair work fans out; accumulation runs in
/// fixed batch order.
pub fn dpo_loss_grad(
    batch: &[TokenizedPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    beta: f64,
) -> Result<(LossReport, PolicyGradients), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    assert!(beta > 0.0, "beta must be positive");
    for pair in batch {
        validate_pair(pair, policy.vocab_size())?;
    }

    let work: Vec<PairWork> = par::map_collect(batch, |pair| {
        let (s_pos, chosen_events) =
            score_with_events(policy, &pair.context, &pair.chosen, &pair.chosen_mask);
        let (s_neg, rejected_events) =
            score_with_events(policy, &pair.context, &pair.rejected, &pair.rejected_mask);
        let r_pos = masked_score(reference, &pair.context, &pair.chosen, &pair.chosen_mask)
            .expect("pair validated");
        let r_neg = masked_score(reference, &pair.context, &pair.rejected, &pair.rejected_mask)
            .expect("pair validated");
        let margin = beta * ((s_pos - s_neg) - (r_pos - r_neg));
        PairWork { margin, chosen_events, rejected_events }
    });

    let n = batch.len() as f64;
    let mut grads = PolicyGradients::zeros_like(policy);
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(batch.len());
    for item in &work {
        loss += neg_log_sigmoid(item.margin) / n;
        margins.push(item.margin);
        // d/dmargin of -log sigmoid(margin) is -sigmoid(-margin).
        let sig = 1.0 / (1.0 + item.margin.exp());
        let coeff_chosen = -sig * beta / n;
        let coeff_rejected = sig * beta / n;
        accumulate(&mut grads, policy, &item.chosen_events, coeff_chosen);
        accumulate(&mut grads, policy, &item.rejected_events, coeff_rejected);
    }
    let grad_norm = grads.norm();
    Ok((LossReport { loss, per_pair_margin: margins, grad_norm, beta }, grads))
}

/// Mask-normalized negative log-likelihood of chosen responses:
/// mean over examples of `-(masked score)/max(1, mask weight sum)`.
pub fn sft_loss(
    batch: &[(TokenSeq, TokenSeq, MaskVector)],
    policy: &ToyPolicy,
) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for (context, response, mask) in batch {
        if mask.len() != response.len() {
            return Err(LossError::LengthMismatch { mask: mask.len(), response: response.len() });
        }
        if context.is_empty() {
            return Err(LossError::EmptyContext);
        }
    }
    let terms: Vec<f64> = par::map_collect(batch, |(context, response, mask)| {
        let score = masked_score(policy, context, response, mask).expect("validated");
        -score / mask.weight_sum().max(1) as f64
    });
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// SFT loss plus analytic gradients.
pub fn sft_loss_grad(
    batch: &[(TokenSeq, TokenSeq, MaskVector)],
    policy: &ToyPolicy,
) -> Result<(f64, PolicyGradients), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for (context, response, mask) in batch {
        if mask.len() != response.len() {
            return Err(LossError::LengthMismatch { mask: mask.len(), response: response.len() });
        }
        if context.is_empty() {
            return Err(LossError::EmptyContext);
        }
        check_ids(context, policy.vocab_size())?;
        check_ids(response, policy.vocab_size())?;
    }
    let work: Vec<(f64, Vec<Event>, u64)> = par::map_collect(batch, |(context, response, mask)| {
        let (score, events) = score_with_events(policy, context, response, mask);
        (score, events, mask.weight_sum().max(1))
    });
    let n = batch.len() as f64;
    let mut grads = PolicyGradients::zeros_like(policy);
    let mut loss = 0.0;
    for (score, events, denom) in &work {
        loss += -score / *denom as f64 / n;
        let coeff = -1.0 / (*denom as f64 * n);
        accumulate(&mut grads, policy, events, coeff);
    }
    Ok((loss, grads))
}

/// Add `coeff * (onehot(next) - p(.|prev))` into the logit-row gradient for
/// each event, and chain through the adapter factors.
fn accumulate(grads: &mut PolicyGradients, policy: &ToyPolicy, events: &[Event], coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    for event in events {
        let x = event.prev as usize;
        let mut row_grad = event.probs.mapv(|p| -coeff * p);
        row_grad[event.next as usize] += coeff;

        {
            let mut base_row = grads.base.row_mut(x);
            base_row += &row_grad;
        }
        if let (Some((da, db)), Some(delta)) = (&mut grads.adapter, &policy.adapter) {
            // z(x) = base[x] + A[x]·B, so dA[x] += dz·Bᵀ and dB += A[x]ᵀ⊗dz.
            let a_row = delta.a.row(x);
            let mut da_row = da.row_mut(x);
            da_row += &delta.b.dot(&row_grad);
            for s in 0..delta.rank {
                let scale = a_row[s];
                if scale != 0.0 {
                    let mut db_row = db.row_mut(s);
                    db_row.scaled_add(scale, &row_grad);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpo::{SpanTag, VOCAB_SIZE};
    use crate::prefs::MaskVector;

    fn seq(ids: Vec<u32>) -> TokenSeq {
        let tags = vec![SpanTag::Execution; ids.len()];
        TokenSeq::new(ids, tags)
    }

    fn mask(bits: &[u8]) -> MaskVector {
        MaskVector { weights: bits.to_vec() }
    }

    fn ctx() -> TokenSeq {
        seq(vec![0])
    }

    #[test]
    fn all_zero_mask_scores_exactly_zero() {
        let p = ToyPolicy::random(VOCAB_SIZE, 1, 1.0);
        let r = seq(vec![10, 20, 30]);
        let s = masked_score(&p, &ctx(), &r, &mask(&[0, 0, 0])).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn uniform_single_token_scores_ln_vocab() {
        let p = ToyPolicy::uniform(VOCAB_SIZE);
        let r = seq(vec![42]);
        let s = masked_score(&p, &ctx(), &r, &mask(&[1])).unwrap();
        assert!((s - (1.0 / 258.0f64).ln()).abs() < 1e-12);
        assert!((s + 5.5530).abs() < 1e-3);
    }

    #[test]
    fn partial_mask_equals_per_token_sum() {
        // Brute-force oracle: score each position alone, sum the masked ones.
        let p = ToyPolicy::random(40, 5, 1.5);
        let r = seq(vec![3, 17, 9]);
        let full = masked_score(&p, &ctx(), &r, &mask(&[1, 0, 1])).unwrap();
        let mut oracle = 0.0;
        let mut prev = 0u32;
        for (j, &next) in r.ids.iter().enumerate() {
            if j == 0 || j == 2 {
                oracle += p.log_prob(prev, next);
            }
            prev = next;
        }
        assert!((full - oracle).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = ToyPolicy::uniform(12);
        let r = seq(vec![1, 2]);
        assert!(matches!(
            masked_score(&p, &ctx(), &r, &mask(&[1])),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    fn tiny_pair(seed: u64) -> TokenizedPair {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len_c = rng.gen_range(2..5usize);
        let len_r = rng.gen_range(2..6usize);
        let gen_seq = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            seq((0..n).map(|_| rng.gen_range(0..12u32)).collect())
        };
        let gen_mask = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| MaskVector {
            weights: (0..n).map(|_| rng.gen_range(0..2u8)).collect(),
        };
        let context = gen_seq(&mut rng, 3);
        let chosen = gen_seq(&mut rng, len_c);
        let rejected = gen_seq(&mut rng, len_r);
        let chosen_mask = gen_mask(&mut rng, len_c);
        let rejected_mask = gen_mask(&mut rng, len_r);
        TokenizedPair { context, chosen, rejected, chosen_mask, rejected_mask }
    }

    #[test]
    fn identity_law_loss_is_ln_two() {
        let policy = ToyPolicy::random(12, 7, 1.0);
        let reference = policy.clone();
        let batch: Vec<TokenizedPair> = (0..100).map(tiny_pair).collect();
        let report = dpo_loss(&batch, &policy, &reference, 0.1).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((report.loss - ln2).abs() < 1e-12);
        for &m in &report.per_pair_margin {
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn raising_chosen_logit_lowers_loss() {
        let reference = ToyPolicy::uniform(12);
        let mut policy = reference.clone();
        let pair = TokenizedPair {
            context: ctx(),
            chosen: seq(vec![5]),
            rejected: seq(vec![7]),
            chosen_mask: mask(&[1]),
            rejected_mask: mask(&[1]),
        };
        policy.base_logits[[0, 5]] = 2.0;
        let report = dpo_loss(&[pair], &policy, &reference, 0.1).unwrap();
        assert!(report.loss < std::f64::consts::LN_2);
    }

    #[test]
    fn margin_is_linear_in_beta() {
        let policy = ToyPolicy::random(12, 9, 1.0);
        let reference = ToyPolicy::random(12, 10, 1.0);
        let batch = vec![tiny_pair(1), tiny_pair(2)];
        let r1 = dpo_loss(&batch, &policy, &reference, 0.1).unwrap();
        let r2 = dpo_loss(&batch, &policy, &reference, 0.2).unwrap();
        for (a, b) in r1.per_pair_margin.iter().zip(&r2.per_pair_margin) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_loss_matches_examples() {
        let p = ToyPolicy::uniform(VOCAB_SIZE);
        // All-zero masks: loss 0.
        let batch = vec![(ctx(), seq(vec![1, 2]), mask(&[0, 0]))];
        assert_eq!(sft_loss(&batch, &p).unwrap(), 0.0);
        // Single masked token under the uniform policy: ln 258.
        let batch = vec![(ctx(), seq(vec![1]), mask(&[1]))];
        let loss = sft_loss(&batch, &p).unwrap();
        assert!((loss - 258.0f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5530).abs() < 1e-3);
    }

    #[test]
    fn sft_equals_brute_force_masked_nll() {
        let p = ToyPolicy::random(30, 11, 1.2);
        let response = seq(vec![4, 9, 2, 15]);
        let m = mask(&[1, 0, 1, 1]);
        let loss = sft_loss(&[(ctx(), response.clone(), m.clone())], &p).unwrap();
        let mut oracle = 0.0;
        let mut prev = 0u32;
        for (j, &next) in response.ids.iter().enumerate() {
            if m.weights[j] == 1 {
                oracle -= p.log_prob(prev, next);
            }
            prev = next;
        }
        oracle /= 3.0;
        assert!((loss - oracle).abs() < 1e-14);
    }

    #[test]
    fn zero_mask_batch_has_zero_gradient() {
        let policy = ToyPolicy::random(12, 3, 1.0).with_adapter(
            crate::dpo::AdapterDelta::init("d", 12, 2, 4),
        );
        let reference = ToyPolicy::random(12, 3, 1.0);
        let pair = TokenizedPair {
            context: ctx(),
            chosen: seq(vec![1, 2]),
            rejected: seq(vec![3, 4]),
            chosen_mask: mask(&[0, 0]),
            rejected_mask: mask(&[0, 0]),
        };
        let (report, grads) = dpo_loss_grad(&[pair], &policy, &reference, 0.1).unwrap();
        assert_eq!(grads.norm(), 0.0);
        assert!((report.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn chosen_token_logit_gradient_is_non_positive_at_identity() {
        // Disjoint chosen/rejected transitions so signs do not cancel.
        let reference = ToyPolicy::uniform(12);
        let policy = reference.clone();
        let pair = TokenizedPair {
            context: seq(vec![0]),
            chosen: seq(vec![5]),
            rejected: seq(vec![7]),
            chosen_mask: mask(&[1]),
            rejected_mask: mask(&[1]),
        };
        let (_, grads) = dpo_loss_grad(&[pair], &policy, &reference, 0.1).unwrap();
        // Gradient descent subtracts the gradient, so a negative entry pushes
        // the chosen token's own logit up.
        assert!(grads.base[[0, 5]] < 0.0);
        assert!(grads.base[[0, 7]] > 0.0);
    }

    #[test]
    fn mask_locality_is_exact() {
        // Perturb a logit row that is never the previous token of any masked
        // position; the masked score must not move at all.
        let mut policy = ToyPolicy::random(12, 13, 1.0);
        let response = seq(vec![2, 9, 4]);
        let m = mask(&[1, 0, 0]);
        // Masked position 0 conditions on the context's last token (0). Rows
        // 2 and 9 only affect unmasked positions.
        let before = masked_score(&policy, &ctx(), &response, &m).unwrap();
        policy.base_logits[[2, 7]] += 3.0;
        policy.base_logits[[9, 1]] -= 5.0;
        let after = masked_score(&policy, &ctx(), &response, &m).unwrap();
        assert_eq!(before, after);
    }
}
