//! Brute-force reference implementations, written without reference to the
//! library's dynamic programs.

use rand::Rng;
use vidseq::dtw::EmbeddingSequence;

fn local(a: &EmbeddingSequence, i: usize, b: &EmbeddingSequence, j: usize) -> f64 {
    a.get(i).iter().zip(b.get(j)).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Cost of every monotone, continuous warping path from `(0, 0)` to
/// `(n-1, m-1)`, enumerated one by one.
pub fn all_path_costs(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Vec<f64> {
    fn walk(a: &EmbeddingSequence, b: &EmbeddingSequence, i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
        let acc = acc + local(a, i, b, j);
        let (n, m) = (a.len(), b.len());
        if i + 1 == n && j + 1 == m {
            out.push(acc);
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(a, b, i + 1, j + 1, acc, out);
        }
        if i + 1 < n {
            walk(a, b, i + 1, j, acc, out);
        }
        if j + 1 < m {
            walk(a, b, i, j + 1, acc, out);
        }
    }
    let mut out = Vec::new();
    walk(a, b, 0, 0, 0.0, &mut out);
    out
}

pub fn dtw_exhaustive(a: &EmbeddingSequence, b: &EmbeddingSequence) -> f64 {
    all_path_costs(a, b).into_iter().fold(f64::INFINITY, f64::min)
}

/// Best full alignment of `query` against any contiguous window of
/// `candidate`.
pub fn subsequence_exhaustive(query: &EmbeddingSequence, candidate: &EmbeddingSequence) -> f64 {
    let m = candidate.len();
    let mut best = f64::INFINITY;
    for start in 0..m {
        for len in 1..=m - start {
            best = best.min(dtw_exhaustive(query, &candidate.window(start, len)));
        }
    }
    best
}

/// Sum of local costs along `path`, or `None` if it is not a valid
/// warping path between rows `0..n` and columns `col_lo..=col_hi`.
pub fn path_cost(
    a: &EmbeddingSequence,
    b: &EmbeddingSequence,
    path: &[(usize, usize)],
    open_columns: bool,
) -> Option<f64> {
    let (first, last) = (path.first()?, path.last()?);
    if first.0 != 0 || last.0 + 1 != a.len() {
        return None;
    }
    if !open_columns && (first.1 != 0 || last.1 + 1 != b.len()) {
        return None;
    }
    for w in path.windows(2) {
        let (di, dj) = (w[1].0.checked_sub(w[0].0)?, w[1].1.checked_sub(w[0].1)?);
        if di > 1 || dj > 1 || di + dj == 0 {
            return None;
        }
    }
    Some(path.iter().map(|&(i, j)| local(a, i, b, j)).sum())
}

/// Precision at each relevant hit, walking the ranked list position by
/// position, averaged over all `n` relevant items.
pub fn ap_by_walking(ranks: &[usize], n: usize) -> f64 {
    let last = ranks.last().copied().unwrap_or(0);
    let mut hits = 0usize;
    let mut total = 0.0;
    for pos in 1..=last {
        if ranks.contains(&pos) {
            hits += 1;
            total += hits as f64 / pos as f64;
        }
    }
    total / n as f64
}

pub fn random_sequence(rng: &mut impl Rng, id: &str, len: usize, dim: usize) -> EmbeddingSequence {
    let data = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EmbeddingSequence::from_flat(id, dim, data).unwrap()
}

/// `count` strictly increasing ranks drawn from `1..=max`.
pub fn random_ranks(rng: &mut impl Rng, count: usize, max: usize) -> Vec<usize> {
    let mut r: Vec<usize> = rand::seq::index::sample(rng, max, count).into_iter().map(|i| i + 1).collect();
    r.sort_unstable();
    r
}
