//! Small shared helpers: digests, subsequence search, stable softmax.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// True when `needle` occurs in `haystack` as a contiguous subsequence.
/// An empty needle never matches.
pub fn contains_subsequence<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Numerically stable softmax. The maximum score is subtracted before
/// exponentiation, so the result is invariant under a constant shift of all
/// scores. An empty slice yields an empty vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy (nats) of a probability vector. Zero entries contribute 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_hex_known_vector() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn subsequence_basic() {
        let hay = ["a", "b", "c", "d"];
        assert!(contains_subsequence(&hay, &["b", "c"]));
        assert!(contains_subsequence(&hay, &["a"]));
        assert!(contains_subsequence(&hay, &["a", "b", "c", "d"]));
        assert!(!contains_subsequence(&hay, &["c", "b"]));
        assert!(!contains_subsequence(&hay, &["d", "a"]));
        assert!(!contains_subsequence::<&str>(&hay, &[]));
        assert!(!contains_subsequence(&["a"], &["a", "b"]));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.3, -2.0, 5.0, 0.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn softmax_shift_invariant_bitwise() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let scores = [0.5f64, 1.5, -0.25];
        let direct: Vec<f64> = {
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            scores.iter().map(|s| s.exp() / z).collect()
        };
        let stable = softmax(&scores);
        for (d, s) in direct.iter().zip(&stable) {
            assert!((d - s).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_uniform_is_ln_n() {
        let p = [0.25; 4];
        assert!((entropy(&p) - (4.0f64).ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
