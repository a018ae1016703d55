//! Linear-chain CRF: path scoring, log-partition, Viterbi, and the
//! negative log-likelihood with its exact gradient.
//!
//! The transition matrix carries two virtual states, START and STOP, at
//! indices `K` and `K+1`. Structurally impossible moves (into START, out
//! of STOP) are pinned at a large negative constant instead of −∞ so
//! every arithmetic path stays finite.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Score assigned to transitions no path can take.
pub const TRANSITION_MASK: f64 = -1e4;

/// Transition scores over `tag_count + 2` states, indexed `[from, to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub transitions: Array2<f64>,
    tag_count: usize,
}

impl CrfParams {
    /// Zero-initialized transitions with the impossible moves masked.
    pub fn new(tag_count: usize) -> Self {
        assert!(tag_count > 0, "CRF needs at least one tag");
        let states = tag_count + 2;
        let mut transitions = Array2::zeros((states, states));
        let mut params = CrfParams { transitions: Array2::zeros((0, 0)), tag_count };
        let (start, stop) = (params.start(), params.stop());
        for s in 0..states {
            transitions[[s, start]] = TRANSITION_MASK;
            transitions[[stop, s]] = TRANSITION_MASK;
        }
        transitions[[start, stop]] = TRANSITION_MASK;
        params.transitions = transitions;
        params
    }

    pub fn tag_count(&self) -> usize {
        self.tag_count
    }

    pub fn start(&self) -> usize {
        self.tag_count
    }

    pub fn stop(&self) -> usize {
        self.tag_count + 1
    }

    /// Reapply the structural mask (used after optimizer steps or loads).
    pub fn remask(&mut self) {
        let (start, stop) = (self.start(), self.stop());
        for s in 0..self.tag_count + 2 {
            self.transitions[[s, start]] = TRANSITION_MASK;
            self.transitions[[stop, s]] = TRANSITION_MASK;
        }
        self.transitions[[start, stop]] = TRANSITION_MASK;
    }

    /// True at entries no valid path can use; gradients there are zero.
    pub fn is_masked(&self, from: usize, to: usize) -> bool {
        to == self.start() || from == self.stop()
    }
}

/// A decoded tag sequence and its path score.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub tags: Vec<usize>,
    pub score: f64,
}

fn check_shape(emissions: &ArrayView2<f64>, params: &CrfParams) {
    assert!(emissions.nrows() > 0, "CRF input must have at least one position");
    assert_eq!(
        emissions.ncols(),
        params.tag_count(),
        "emission width must equal the tag count"
    );
}

/// Score of one tag path: start transition, emissions, interior
/// transitions, stop transition.
pub fn sequence_score(
    emissions: ArrayView2<f64>,
    params: &CrfParams,
    tags: &[usize],
) -> Result<f64> {
    check_shape(&emissions, params);
    let n = emissions.nrows();
    let k = params.tag_count();
    if tags.len() != n {
        return Err(Error::data(format!(
            "tag path length {} does not match sentence length {n}",
            tags.len()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(Error::data(format!("tag index {bad} out of range (tag count {k})")));
    }
    let t = &params.transitions;
    let mut score = t[[params.start(), tags[0]]];
    for i in 0..n {
        score += emissions[[i, tags[i]]];
        if i + 1 < n {
            score += t[[tags[i], tags[i + 1]]];
        }
    }
    score += t[[tags[n - 1], params.stop()]];
    Ok(score)
}

fn log_sum_exp(scores: &Array1<f64>) -> f64 {
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + scores.mapv(|v| (v - max).exp()).sum().ln()
}

/// Run the forward recursion, returning the per-position log-alpha table
/// and the log-partition.
fn forward_table(emissions: ArrayView2<f64>, params: &CrfParams) -> (Array2<f64>, f64) {
    let n = emissions.nrows();
    let k = params.tag_count();
    let t = &params.transitions;
    let mut alpha = Array2::zeros((n, k));
    for tag in 0..k {
        alpha[[0, tag]] = t[[params.start(), tag]] + emissions[[0, tag]];
    }
    let mut incoming = Array1::zeros(k);
    for i in 1..n {
        for to in 0..k {
            for from in 0..k {
                incoming[from] = alpha[[i - 1, from]] + t[[from, to]];
            }
            alpha[[i, to]] = emissions[[i, to]] + log_sum_exp(&incoming);
        }
    }
    let mut finals = Array1::zeros(k);
    for tag in 0..k {
        finals[tag] = alpha[[n - 1, tag]] + t[[tag, params.stop()]];
    }
    let log_z = log_sum_exp(&finals);
    (alpha, log_z)
}

/// Log of the summed exponentiated scores of all `K^n` paths, computed by
/// the forward algorithm with log-sum-exp stabilization.
pub fn log_partition(emissions: ArrayView2<f64>, params: &CrfParams) -> f64 {
    check_shape(&emissions, params);
    forward_table(emissions, params).1
}

/// Highest-scoring path; ties resolve to the lowest tag index at every
/// backtracking step.
pub fn viterbi_decode(emissions: ArrayView2<f64>, params: &CrfParams) -> DecodedPath {
    check_shape(&emissions, params);
    let n = emissions.nrows();
    let k = params.tag_count();
    let t = &params.transitions;
    let mut delta = Array2::zeros((n, k));
    let mut back = Array2::<usize>::zeros((n, k));
    for tag in 0..k {
        delta[[0, tag]] = t[[params.start(), tag]] + emissions[[0, tag]];
    }
    for i in 1..n {
        for to in 0..k {
            let mut best_from = 0;
            let mut best = delta[[i - 1, 0]] + t[[0, to]];
            for from in 1..k {
                let cand = delta[[i - 1, from]] + t[[from, to]];
                if cand > best {
                    best = cand;
                    best_from = from;
                }
            }
            delta[[i, to]] = best + emissions[[i, to]];
            back[[i, to]] = best_from;
        }
    }
    let mut last = 0;
    let mut score = delta[[n - 1, 0]] + t[[0, params.stop()]];
    for tag in 1..k {
        let cand = delta[[n - 1, tag]] + t[[tag, params.stop()]];
        if cand > score {
            score = cand;
            last = tag;
        }
    }
    let mut tags = vec![0usize; n];
    tags[n - 1] = last;
    for i in (1..n).rev() {
        tags[i - 1] = back[[i, tags[i]]];
    }
    DecodedPath { tags, score }
}

/// Negative log-likelihood of the gold path: `log_partition − sequence_score`.
pub fn crf_nll(emissions: ArrayView2<f64>, params: &CrfParams, gold: &[usize]) -> Result<f64> {
    let gold_score = sequence_score(emissions, params, gold)?;
    Ok(log_partition(emissions, params) - gold_score)
}

/// Gradient of `scale · crf_nll` with respect to the emissions and the
/// transition matrix, via reverse-mode differentiation of the forward
/// recursion. Masked transition entries receive zero gradient.
pub fn crf_nll_backward(
    emissions: ArrayView2<f64>,
    params: &CrfParams,
    gold: &[usize],
    scale: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    // Validate indices the same way the forward pass does.
    sequence_score(emissions, params, gold)?;
    let n = emissions.nrows();
    let k = params.tag_count();
    let states = k + 2;
    let t = &params.transitions;
    let (alpha, _) = forward_table(emissions, params);

    let mut d_em = Array2::zeros((n, k));
    let mut d_t = Array2::zeros((states, states));
    let mut d_alpha = Array2::zeros((n, k));

    // log Z = lse over final scores: its gradient is their softmax.
    let mut finals = Array1::zeros(k);
    for tag in 0..k {
        finals[tag] = alpha[[n - 1, tag]] + t[[tag, params.stop()]];
    }
    let max = finals.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Array1<f64> = finals.mapv(|v| (v - max).exp());
    let total = exp.sum();
    for tag in 0..k {
        let w = exp[tag] / total;
        d_alpha[[n - 1, tag]] = w;
        d_t[[tag, params.stop()]] += w;
    }

    // Each alpha[i, to] is emissions[i, to] + lse over incoming scores;
    // push its adjoint back through the softmax of those scores.
    let mut incoming = Array1::zeros(k);
    for i in (1..n).rev() {
        for to in 0..k {
            let upstream = d_alpha[[i, to]];
            if upstream == 0.0 {
                continue;
            }
            d_em[[i, to]] += upstream;
            for from in 0..k {
                incoming[from] = alpha[[i - 1, from]] + t[[from, to]];
            }
            let max = incoming.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exp: Array1<f64> = incoming.mapv(|v| (v - max).exp());
            let total = exp.sum();
            for from in 0..k {
                let w = upstream * exp[from] / total;
                d_alpha[[i - 1, from]] += w;
                d_t[[from, to]] += w;
            }
        }
    }
    for tag in 0..k {
        let upstream = d_alpha[[0, tag]];
        d_em[[0, tag]] += upstream;
        d_t[[params.start(), tag]] += upstream;
    }

    // Subtract the gold-path indicator counts.
    d_t[[params.start(), gold[0]]] -= 1.0;
    for i in 0..n {
        d_em[[i, gold[i]]] -= 1.0;
        if i + 1 < n {
            d_t[[gold[i], gold[i + 1]]] -= 1.0;
        }
    }
    d_t[[gold[n - 1], params.stop()]] -= 1.0;

    if scale != 1.0 {
        d_em *= scale;
        d_t *= scale;
    }
    Ok((d_em, d_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Score every one of the K^n paths directly from the definition.
    fn enumerate_scores(emissions: &Array2<f64>, params: &CrfParams) -> Vec<(Vec<usize>, f64)> {
        let n = emissions.nrows();
        let k = params.tag_count();
        let mut out = Vec::new();
        let mut tags = vec![0usize; n];
        loop {
            let score = sequence_score(emissions.view(), params, &tags).unwrap();
            out.push((tags.clone(), score));
            let mut pos = n;
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                tags[pos] += 1;
                if tags[pos] < k {
                    break;
                }
                tags[pos] = 0;
            }
        }
    }

    fn lse(values: impl IntoIterator<Item = f64>) -> f64 {
        let values: Vec<f64> = values.into_iter().collect();
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// Parameters with zero boundary transitions (masks removed) so the
    /// hand examples stay simple.
    fn open_params(k: usize) -> CrfParams {
        let mut p = CrfParams::new(k);
        p.transitions.fill(0.0);
        p
    }

    fn two_step_example() -> (Array2<f64>, CrfParams) {
        let emissions = array![[1.0, 0.0], [0.0, 1.0]];
        let mut params = open_params(2);
        params.transitions[[0, 0]] = 2.0;
        (emissions, params)
    }

    #[test]
    fn score_single_token_is_emission() {
        let params = open_params(1);
        let emissions = array![[4.5]];
        assert_eq!(sequence_score(emissions.view(), &params, &[0]).unwrap(), 4.5);
    }

    #[test]
    fn score_two_step_hand_sum() {
        let (emissions, params) = two_step_example();
        assert_eq!(sequence_score(emissions.view(), &params, &[0, 0]).unwrap(), 3.0);
        assert_eq!(sequence_score(emissions.view(), &params, &[0, 1]).unwrap(), 2.0);
        assert_eq!(sequence_score(emissions.view(), &params, &[1, 0]).unwrap(), 0.0);
        assert_eq!(sequence_score(emissions.view(), &params, &[1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn score_all_zero_inputs() {
        let params = open_params(3);
        let emissions = Array2::zeros((4, 3));
        assert_eq!(sequence_score(emissions.view(), &params, &[2, 0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn score_rejects_bad_paths() {
        let params = open_params(2);
        let emissions = Array2::zeros((2, 2));
        assert!(sequence_score(emissions.view(), &params, &[0]).is_err());
        assert!(sequence_score(emissions.view(), &params, &[0, 2]).is_err());
    }

    #[test]
    fn log_partition_single_position_closed_form() {
        let params = open_params(2);
        let emissions = Array2::zeros((1, 2));
        let lz = log_partition(emissions.view(), &params);
        assert!((lz - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_partition_two_step_matches_enumeration() {
        let (emissions, params) = two_step_example();
        let expected = lse([3.0, 2.0, 0.0, 1.0]);
        let lz = log_partition(emissions.view(), &params);
        assert!((lz - expected).abs() < 1e-12);
    }

    #[test]
    fn log_partition_dominates_sampled_paths() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut params = CrfParams::new(3);
        params.transitions.mapv_inplace(|v| {
            if v == TRANSITION_MASK { v } else { 0.0 }
        });
        for t in params.transitions.iter_mut() {
            if *t != TRANSITION_MASK {
                *t = rng.gen_range(-1.0..1.0);
            }
        }
        let emissions = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
        let lz = log_partition(emissions.view(), &params);
        for _ in 0..50 {
            let tags: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let s = sequence_score(emissions.view(), &params, &tags).unwrap();
            assert!(lz >= s);
        }
    }

    #[test]
    fn viterbi_two_step_picks_best() {
        let (emissions, params) = two_step_example();
        let path = viterbi_decode(emissions.view(), &params);
        assert_eq!(path.tags, vec![0, 0]);
        assert_eq!(path.score, 3.0);
    }

    #[test]
    fn viterbi_single_tag_only_path() {
        let params = open_params(1);
        let emissions = array![[0.3], [0.4], [-0.1]];
        let path = viterbi_decode(emissions.view(), &params);
        assert_eq!(path.tags, vec![0, 0, 0]);
        assert!((path.score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn viterbi_ties_pick_lowest_index() {
        let params = open_params(3);
        let emissions = Array2::from_elem((4, 3), 0.7);
        let path = viterbi_decode(emissions.view(), &params);
        assert_eq!(path.tags, vec![0, 0, 0, 0]);
    }

    #[test]
    fn nll_symmetric_single_position() {
        let params = open_params(2);
        let emissions = Array2::zeros((1, 2));
        for gold in [0usize, 1] {
            let loss = crf_nll(emissions.view(), &params, &[gold]).unwrap();
            assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_small_when_gold_dominates() {
        let mut params = open_params(2);
        params.transitions[[0, 0]] = 10.0;
        let emissions = array![[20.0, 0.0], [20.0, 0.0]];
        let loss = crf_nll(emissions.view(), &params, &[0, 0]).unwrap();
        assert!(loss > 0.0 && loss < 1e-6);
    }

    #[test]
    fn nll_matches_enumeration_probability() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=4);
            let mut params = CrfParams::new(k);
            for t in params.transitions.iter_mut() {
                if *t != TRANSITION_MASK {
                    *t = rng.gen_range(-1.5..1.5);
                }
            }
            let emissions = Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0));
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

            let all = enumerate_scores(&emissions, &params);
            let brute_lz = lse(all.iter().map(|(_, s)| *s));
            let gold_score = sequence_score(emissions.view(), &params, &gold).unwrap();
            let expected = brute_lz - gold_score;
            let loss = crf_nll(emissions.view(), &params, &gold).unwrap();
            assert!((loss - expected).abs() < 1e-8);
            assert!(loss >= 0.0);

            // Paths normalize.
            let lz = log_partition(emissions.view(), &params);
            let mass: f64 = all.iter().map(|(_, s)| (s - lz).exp()).sum();
            assert!((mass - 1.0).abs() < 1e-6);

            // Viterbi agrees with the enumeration argmax.
            let best = all
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let path = viterbi_decode(emissions.view(), &params);
            assert!((path.score - best.1).abs() < 1e-9);
            let decoded = sequence_score(emissions.view(), &params, &path.tags).unwrap();
            assert!((decoded - path.score).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_invariance_of_nll_and_argmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = rng.gen_range(2..=5);
            let k = rng.gen_range(2..=4);
            let mut params = CrfParams::new(k);
            for t in params.transitions.iter_mut() {
                if *t != TRANSITION_MASK {
                    *t = rng.gen_range(-1.0..1.0);
                }
            }
            let emissions = Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0));
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let column = rng.gen_range(0..n);
            let shift = rng.gen_range(-3.0..3.0);
            let mut shifted = emissions.clone();
            for tag in 0..k {
                shifted[[column, tag]] += shift;
            }

            let lz_a = log_partition(emissions.view(), &params);
            let lz_b = log_partition(shifted.view(), &params);
            assert!((lz_b - (lz_a + shift)).abs() < 1e-9);

            let loss_a = crf_nll(emissions.view(), &params, &gold).unwrap();
            let loss_b = crf_nll(shifted.view(), &params, &gold).unwrap();
            assert!((loss_a - loss_b).abs() < 1e-9);

            let path_a = viterbi_decode(emissions.view(), &params);
            let path_b = viterbi_decode(shifted.view(), &params);
            assert_eq!(path_a.tags, path_b.tags);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let (n, k) = (4, 3);
        let mut params = CrfParams::new(k);
        for t in params.transitions.iter_mut() {
            if *t != TRANSITION_MASK {
                *t = rng.gen_range(-1.0..1.0);
            }
        }
        let emissions = Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0));
        let gold = vec![0, 2, 1, 0];
        let (d_em, d_t) = crf_nll_backward(emissions.view(), &params, &gold, 1.0).unwrap();

        let h = 1e-6;
        for i in 0..n {
            for j in 0..k {
                let mut plus = emissions.clone();
                plus[[i, j]] += h;
                let mut minus = emissions.clone();
                minus[[i, j]] -= h;
                let fd = (crf_nll(plus.view(), &params, &gold).unwrap()
                    - crf_nll(minus.view(), &params, &gold).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - d_em[[i, j]]).abs() < 1e-6,
                    "emission grad mismatch at ({i},{j}): fd={fd} analytic={}",
                    d_em[[i, j]]
                );
            }
        }
        for from in 0..k + 2 {
            for to in 0..k + 2 {
                if params.is_masked(from, to) || (from == params.start() && to == params.stop()) {
                    assert_eq!(d_t[[from, to]], 0.0);
                    continue;
                }
                let mut plus = params.clone();
                plus.transitions[[from, to]] += h;
                let mut minus = params.clone();
                minus.transitions[[from, to]] -= h;
                let fd = (crf_nll(emissions.view(), &plus, &gold).unwrap()
                    - crf_nll(emissions.view(), &minus, &gold).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - d_t[[from, to]]).abs() < 1e-6,
                    "transition grad mismatch at ({from},{to}): fd={fd} analytic={}",
                    d_t[[from, to]]
                );
            }
        }
    }

    #[test]
    fn backward_scale_multiplies_gradients() {
        let (emissions, params) = two_step_example();
        let (a_em, a_t) = crf_nll_backward(emissions.view(), &params, &[0, 0], 1.0).unwrap();
        let (b_em, b_t) = crf_nll_backward(emissions.view(), &params, &[0, 0], 0.5).unwrap();
        for (a, b) in a_em.iter().zip(b_em.iter()) {
            assert!((a * 0.5 - b).abs() < 1e-12);
        }
        for (a, b) in a_t.iter().zip(b_t.iter()) {
            assert!((a * 0.5 - b).abs() < 1e-12);
        }
    }
}
