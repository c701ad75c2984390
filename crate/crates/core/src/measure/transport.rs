//! Balanced transport with cost `min(|x - y|, 2)` by successive shortest paths.
//!
//! This is the dual of the BL linear program: a constraint `f_k ≤ 1` or
//! `-f_k ≤ 1` becomes an arc to a ground node of cost 1, so the cheapest
//! route between two support points costs `min(|x_k - x_l|, 2)`.

const MASS_TOL: f64 = 1e-15;

/// Minimum cost of moving `supply` (at sources) onto `demand` (at sinks).
///
/// `cost[i * sinks + j]` is the unit cost from source `i` to sink `j`.
/// Arcs are uncapacitated; Dijkstra runs on reduced costs with dense scans.
pub(crate) fn min_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let ns = supply.len();
    let nt = demand.len();
    if ns == 0 || nt == 0 {
        return 0.0;
    }
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let mut flow = vec![0.0; ns * nt];
    // potentials: sources 0..ns, sinks ns..ns+nt
    let mut pot = vec![0.0; ns + nt];
    let v = ns + nt;
    let mut dist = vec![f64::INFINITY; v];
    let mut prev = vec![usize::MAX; v];
    let mut done = vec![false; v];

    loop {
        if supply.iter().all(|&s| s <= MASS_TOL) || demand.iter().all(|&d| d <= MASS_TOL) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        for i in 0..ns {
            if supply[i] > MASS_TOL {
                dist[i] = 0.0;
            }
        }
        let mut target = None;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for w in 0..v {
                if !done[w] && dist[w] < best {
                    best = dist[w];
                    u = w;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= ns && demand[u - ns] > MASS_TOL {
                target = Some(u);
                break;
            }
            if u < ns {
                for j in 0..nt {
                    let w = ns + j;
                    if done[w] {
                        continue;
                    }
                    let reduced = (cost[u * nt + j] + pot[u] - pot[w]).max(0.0);
                    if dist[u] + reduced < dist[w] {
                        dist[w] = dist[u] + reduced;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - ns;
                for i in 0..ns {
                    if done[i] || flow[i * nt + j] <= MASS_TOL {
                        continue;
                    }
                    let reduced = (-cost[i * nt + j] + pot[u] - pot[i]).max(0.0);
                    if dist[u] + reduced < dist[i] {
                        dist[i] = dist[u] + reduced;
                        prev[i] = u;
                    }
                }
            }
        }
        let Some(t) = target else { break };
        let reach = dist[t];
        for w in 0..v {
            pot[w] += dist[w].min(reach);
        }

        // bottleneck along the path
        let mut amount = demand[t - ns];
        let mut w = t;
        loop {
            let p = prev[w];
            if p == usize::MAX {
                amount = amount.min(supply[w]);
                break;
            }
            if p >= ns {
                // backward arc: sink p cancels flow on (w, p)
                amount = amount.min(flow[w * nt + (p - ns)]);
            }
            w = p;
        }
        let mut w = t;
        loop {
            let p = prev[w];
            if p == usize::MAX {
                supply[w] -= amount;
                break;
            }
            if p < ns {
                flow[p * nt + (w - ns)] += amount;
            } else {
                flow[w * nt + (p - ns)] -= amount;
            }
            w = p;
        }
        demand[t - ns] -= amount;
    }

    flow.iter().zip(cost).map(|(x, c)| x * c).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_pair() {
        assert_abs_diff_eq!(min_cost(&[1.0], &[1.0], &[0.7]), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn needs_rerouting() {
        // Greedy would send source 0 to sink 0; the optimum crosses.
        let cost = [1.0, 2.0, 1.0, 10.0];
        let v = min_cost(&[1.0, 1.0], &[1.0, 1.0], &cost);
        assert_abs_diff_eq!(v, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn split_masses() {
        // 0.5 at each source, sink 0 takes 0.7, sink 1 takes 0.3
        let cost = [0.0, 1.0, 1.0, 0.0];
        let v = min_cost(&[0.5, 0.5], &[0.7, 0.3], &cost);
        assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
    }
}
