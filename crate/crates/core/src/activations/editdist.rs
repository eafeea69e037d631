use crate::activations::profile::BinaryPattern;
use crate::error::{Error, Result};

/// Patterns at or below this length use the quadratic table.
pub const DP_LIMIT: usize = 1024;

/// Classical two-row Levenshtein table (unit costs).
pub fn levenshtein_dp<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut cur = vec![0; a.len() + 1];
    for (j, cb) in b.iter().enumerate() {
        cur[0] = j + 1;
        for (i, ca) in a.iter().enumerate() {
            let sub = prev[i] + usize::from(ca != cb);
            cur[i + 1] = sub.min(prev[i + 1] + 1).min(cur[i] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[a.len()]
}

/// One 64-row block of the bit-vector recurrence; returns the horizontal
/// delta leaving the block at row `high`.
#[inline]
fn advance_block(pv: &mut u64, mv: &mut u64, eq: u64, hin: i32, high: u64) -> i32 {
    let (p, m) = (*pv, *mv);
    let neg = u64::from(hin < 0);
    let xv = eq | m;
    let eq = eq | neg;
    let xh = ((eq & p).wrapping_add(p) ^ p) | eq;
    let mut ph = m | !(xh | p);
    let mut mh = p & xh;
    let hout = if ph & high != 0 {
        1
    } else if mh & high != 0 {
        -1
    } else {
        0
    };
    ph <<= 1;
    mh <<= 1;
    mh |= neg;
    ph |= u64::from(hin > 0);
    *pv = mh | !(xv | ph);
    *mv = ph & xv;
    hout
}

/// Word-sliced bit-parallel Levenshtein distance over a binary alphabet
/// (Myers' recurrence, blocked over 64-bit words).
pub fn levenshtein_bitparallel(a: &[bool], b: &[bool]) -> usize {
    let m = a.len();
    if m == 0 {
        return b.len();
    }
    if b.is_empty() {
        return m;
    }
    let words = m.div_ceil(64);
    let mut peq = [vec![0u64; words], vec![0u64; words]];
    for (i, &bit) in a.iter().enumerate() {
        peq[usize::from(bit)][i / 64] |= 1 << (i % 64);
    }
    let mut pv = vec![!0u64; words];
    let mut mv = vec![0u64; words];
    let last_high = 1u64 << ((m - 1) % 64);
    let mut score = m as i64;
    for &c in b {
        let eq = &peq[usize::from(c)];
        // Top row of the table grows by one per column.
        let mut carry = 1;
        for w in 0..words {
            let high = if w + 1 == words { last_high } else { 1 << 63 };
            carry = advance_block(&mut pv[w], &mut mv[w], eq[w], carry, high);
        }
        score += i64::from(carry);
    }
    score as usize
}

/// Levenshtein distance of two bit vectors, choosing the algorithm by length.
pub fn levenshtein_bits(a: &[bool], b: &[bool]) -> usize {
    if a.len().max(b.len()) <= DP_LIMIT {
        levenshtein_dp(a, b)
    } else {
        levenshtein_bitparallel(a, b)
    }
}

/// Per-layer `EditDist(z_a, z_b) / d_m`.
pub fn edit_distance(za: &BinaryPattern, zb: &BinaryPattern) -> Result<Vec<f64>> {
    if za.layers.len() != zb.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "patterns have {} and {} layers",
            za.layers.len(),
            zb.layers.len()
        )));
    }
    za.layers
        .iter()
        .zip(&zb.layers)
        .enumerate()
        .map(|(l, (a, b))| {
            if a.len() != b.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: pattern lengths {} and {} differ",
                    a.len(),
                    b.len()
                )));
            }
            if a.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {l}: empty pattern")));
            }
            Ok(levenshtein_bits(a, b) as f64 / a.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn dp_hand_cases() {
        assert_eq!(levenshtein_dp(&bits("0011"), &bits("0101")), 2);
        assert_eq!(levenshtein_dp(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein_dp::<u8>(&[], b"abc"), 3);
    }

    #[test]
    fn bitparallel_hand_cases() {
        assert_eq!(levenshtein_bitparallel(&bits("0011"), &bits("0101")), 2);
        assert_eq!(levenshtein_bitparallel(&bits("0000"), &bits("1111")), 4);
        assert_eq!(levenshtein_bitparallel(&bits(""), &bits("11")), 2);
        assert_eq!(levenshtein_bitparallel(&bits("101"), &bits("")), 3);
        let a: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let b: Vec<bool> = (0..130).map(|i| i % 5 == 0).collect();
        assert_eq!(levenshtein_bitparallel(&a, &b), levenshtein_dp(&a, &b));
        assert_eq!(levenshtein_bitparallel(&b, &a), levenshtein_dp(&b, &a));
    }

    #[test]
    fn normalized() {
        let za = BinaryPattern {
            layers: vec![bits("0011"), bits("1111")],
        };
        let zb = BinaryPattern {
            layers: vec![bits("0101"), bits("0000")],
        };
        assert_eq!(edit_distance(&za, &zb).unwrap(), vec![0.5, 1.0]);
        assert_eq!(edit_distance(&za, &za).unwrap(), vec![0.0, 0.0]);
        let zc = BinaryPattern {
            layers: vec![bits("01")],
        };
        assert!(edit_distance(&za, &zc).is_err());
        let zd = BinaryPattern {
            layers: vec![bits("01"), bits("0")],
        };
        assert!(edit_distance(&za, &zd).is_err());
    }
}
