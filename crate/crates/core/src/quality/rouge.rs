/// Case-folded tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(min) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            row[j + 1] = if x == y { prev[j] + 1 } else { row[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[short.len()]
}

/// ROUGE-L F1 (β = 1) between two token sequences.
///
/// With P = L/|cand| and R = L/|ref|, 2PR/(P+R) reduces to 2L/(|cand|+|ref|),
/// which is what is computed here.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    2.0 * lcs as f64 / (candidate.len() + reference.len()) as f64
}

pub fn rouge_l_text(candidate: &str, reference: &str) -> f64 {
    rouge_l(&tokenize(candidate), &tokenize(reference))
}
