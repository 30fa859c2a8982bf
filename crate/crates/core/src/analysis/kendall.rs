//! Kendall's τ-a between two orderings of the same index set.

use crate::error::{Error, Result};

fn check_same_set(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: a.len(),
        });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidPermutation(format!(
            "{a:?} has repeated entries"
        )));
    }
    if sa != sb {
        return Err(Error::InvalidPermutation(format!(
            "{a:?} and {b:?} are not orderings of the same set"
        )));
    }
    Ok(())
}

/// Counts inversions with a bottom-up merge sort.
fn inversions(mut xs: Vec<usize>) -> u64 {
    let n = xs.len();
    let mut buf = vec![0usize; n];
    let mut count = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if xs[i] <= xs[j] {
                    buf[k] = xs[i];
                    i += 1;
                } else {
                    buf[k] = xs[j];
                    count += (mid - i) as u64;
                    j += 1;
                }
                k += 1;
            }
            buf[k..k + mid - i].copy_from_slice(&xs[i..mid]);
            k += mid - i;
            buf[k..k + hi - j].copy_from_slice(&xs[j..hi]);
            lo = hi;
        }
        std::mem::swap(&mut xs, &mut buf);
        width *= 2;
    }
    count
}

/// `(concordant − discordant) / (n(n−1)/2)` over position pairs, where pair
/// `(i, j)` is concordant when `a` and `b` order it the same way.
///
/// Runs in `O(n log n)`: sorting positions by `a` turns discordant pairs into
/// inversions of the matching `b` sequence.
pub fn kendall_tau(a: &[usize], b: &[usize]) -> Result<f64> {
    check_same_set(a, b)?;
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by_key(|&i| a[i]);
    let discordant = inversions(order.iter().map(|&i| b[i]).collect());
    let pairs = (n * (n - 1) / 2) as u64;
    Ok((pairs as f64 - 2.0 * discordant as f64) / pairs as f64)
}
