//! Exhaustive alignment search: every monotone pairing of reference and
//! hypothesis positions is scored; unpaired items are deletions/insertions.

/// Minimum unit cost over all alignments.
pub fn brute_force_cost<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut best = n + m;
    for rmask in 0u32..(1 << n) {
        let rs: Vec<usize> = (0..n).filter(|i| rmask & (1 << i) != 0).collect();
        for hmask in 0u32..(1 << m) {
            if hmask.count_ones() as usize != rs.len() {
                continue;
            }
            let hs: Vec<usize> = (0..m).filter(|j| hmask & (1 << j) != 0).collect();
            let p = rs.len();
            let mismatches = rs.iter().zip(&hs).filter(|(&i, &j)| reference[i] != hypothesis[j]).count();
            best = best.min((n - p) + (m - p) + mismatches);
        }
    }
    best
}

/// All sequences over `0..symbols` of length `0..=max_len`.
pub fn all_sequences(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 0..symbols {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
