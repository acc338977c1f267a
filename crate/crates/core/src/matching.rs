//! Hopcroft-Karp maximum matching on a bipartite graph given as adjacency
//! lists from left to right vertices.

use std::collections::VecDeque;

const FREE: usize = usize::MAX;

/// Returns `mate[l]`, the right vertex matched to left vertex `l`.
///
/// `initial` seeds the search with a partial matching; entries whose edge no
/// longer exists in `adj`, or that collide on a right vertex, are dropped.
pub fn hopcroft_karp(
    n_right: usize,
    adj: &[Vec<usize>],
    initial: Option<&[Option<usize>]>,
) -> Vec<Option<usize>> {
    let n_left = adj.len();
    let mut mate_l = vec![FREE; n_left];
    let mut mate_r = vec![FREE; n_right];
    if let Some(init) = initial {
        for (l, m) in init.iter().enumerate().take(n_left) {
            if let Some(r) = *m {
                if r < n_right && mate_r[r] == FREE && adj[l].contains(&r) {
                    mate_l[l] = r;
                    mate_r[r] = l;
                }
            }
        }
    }

    let mut dist = vec![0usize; n_left];
    let mut queue = VecDeque::with_capacity(n_left);
    let mut next = vec![0usize; n_left];
    loop {
        // Layer the free left vertices and everything reachable by
        // alternating paths.
        queue.clear();
        for l in 0..n_left {
            if mate_l[l] == FREE {
                dist[l] = 0;
                queue.push_back(l);
            } else {
                dist[l] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(l) = queue.pop_front() {
            for &r in &adj[l] {
                let m = mate_r[r];
                if m == FREE {
                    found = true;
                } else if dist[m] == usize::MAX {
                    dist[m] = dist[l] + 1;
                    queue.push_back(m);
                }
            }
        }
        if !found {
            break;
        }
        next.iter_mut().for_each(|x| *x = 0);
        for l in 0..n_left {
            if mate_l[l] == FREE {
                augment(l, adj, &mut mate_l, &mut mate_r, &mut dist, &mut next);
            }
        }
    }
    mate_l
        .into_iter()
        .map(|r| (r != FREE).then_some(r))
        .collect()
}

fn augment(
    l: usize,
    adj: &[Vec<usize>],
    mate_l: &mut [usize],
    mate_r: &mut [usize],
    dist: &mut [usize],
    next: &mut [usize],
) -> bool {
    while next[l] < adj[l].len() {
        let r = adj[l][next[l]];
        next[l] += 1;
        let m = mate_r[r];
        if m == FREE || (dist[m] == dist[l] + 1 && augment(m, adj, mate_l, mate_r, dist, next)) {
            mate_l[l] = r;
            mate_r[r] = l;
            return true;
        }
    }
    dist[l] = usize::MAX;
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn size(m: &[Option<usize>]) -> usize {
        m.iter().filter(|x| x.is_some()).count()
    }

    #[test]
    fn perfect_on_cycle() {
        let adj = vec![vec![0, 1], vec![1, 2], vec![2, 0]];
        let m = hopcroft_karp(3, &adj, None);
        assert_eq!(size(&m), 3);
    }

    #[test]
    fn needs_augmenting_path() {
        // Greedy 0->0 blocks 1 unless rerouted.
        let adj = vec![vec![0, 1], vec![0]];
        let m = hopcroft_karp(2, &adj, Some(&[Some(0), None]));
        assert_eq!(m, vec![Some(1), Some(0)]);
    }

    #[test]
    fn maximum_not_perfect() {
        let adj = vec![vec![0], vec![0], vec![1]];
        assert_eq!(size(&hopcroft_karp(2, &adj, None)), 2);
    }

    #[test]
    fn stale_initial_entries_ignored() {
        let adj = vec![vec![1], vec![0]];
        let m = hopcroft_karp(2, &adj, Some(&[Some(0), Some(0)]));
        assert_eq!(m, vec![Some(1), Some(0)]);
    }
}
