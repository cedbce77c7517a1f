/// Largest-remainder apportionment of `n` units over `weights`.
///
/// Weights are normalized internally; an all-zero weight vector apportions
/// nothing. Floors first, then the leftover units go to the largest
/// fractional parts, ties to the lower index.
pub(crate) fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total.is_nan() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    if assigned >= n {
        // only reachable through rounding noise on huge n
        let mut excess = assigned - n;
        for q in out.iter_mut().rev() {
            let take = excess.min(*q);
            *q -= take;
            excess -= take;
        }
        return out;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n - assigned;
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(apportion(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 2), vec![1, 1, 0]);
    }

    #[test]
    fn zero_weights() {
        assert_eq!(apportion(&[0.0, 0.0], 5), vec![0, 0]);
    }
}
