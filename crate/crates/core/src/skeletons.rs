//! Exact counting of distinct skeletons by operator count under the
//! generator's grammar (3 binary ops, 10 unary ops, variables as leaves).

use num_bigint::BigUint;

/// Number of distinct skeletons with exactly `n_ops` operators over `dim`
/// variables. Leaves are the variables x_1..x_dim; constants only enter via
/// the affine wrapping, which is excluded from the count.
pub fn count_skeletons(n_ops: usize, dim: usize, n_binary: usize, n_unary: usize) -> BigUint {
    // s[n] = #skeletons with n operators.
    let mut s: Vec<BigUint> = Vec::with_capacity(n_ops + 1);
    s.push(BigUint::from(dim));
    for n in 1..=n_ops {
        let mut total = BigUint::from(n_unary) * &s[n - 1];
        let mut pairs = BigUint::from(0u32);
        for i in 0..n {
            pairs += &s[i] * &s[n - 1 - i];
        }
        total += BigUint::from(n_binary) * pairs;
        s.push(total);
    }
    s.pop().unwrap()
}

/// Counting with the default Table-3 operator pools.
pub fn count_skeletons_default(n_ops: usize, dim: usize) -> BigUint {
    count_skeletons(n_ops, dim, 3, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Brute-force oracle: enumerate every distinct labeled tree with exactly
    /// `n_ops` operators as a canonical string.
    fn enumerate(n_ops: usize, dim: usize) -> HashSet<String> {
        if n_ops == 0 {
            return (1..=dim).map(|d| format!("x{d}")).collect();
        }
        let mut out = HashSet::new();
        for t in enumerate(n_ops - 1, dim) {
            for u in ["inv", "abs", "sqr", "sqrt", "sin", "cos", "tan", "atan", "log", "exp"] {
                out.insert(format!("{u}({t})"));
            }
        }
        for i in 0..n_ops {
            for l in enumerate(i, dim) {
                for r in enumerate(n_ops - 1 - i, dim) {
                    for b in ["add", "sub", "mul"] {
                        out.insert(format!("{b}({l},{r})"));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_leaf() {
        assert_eq!(count_skeletons_default(0, 1), BigUint::from(1u32));
    }

    #[test]
    fn one_operator_d1() {
        // 3 binary * 1 leaf pair + 10 unary = 13
        assert_eq!(count_skeletons_default(1, 1), BigUint::from(13u32));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        for dim in 1..=2 {
            for n_ops in 0..=3 {
                let counted = count_skeletons_default(n_ops, dim);
                let enumerated = enumerate(n_ops, dim).len();
                assert_eq!(
                    counted,
                    BigUint::from(enumerated),
                    "mismatch at n_ops={n_ops} dim={dim}"
                );
            }
        }
    }

    #[test]
    fn grows_without_overflow() {
        // Far beyond u128; just exercise the big-integer path.
        let big = count_skeletons_default(40, 10);
        assert!(big.to_string().len() > 40);
    }
}
