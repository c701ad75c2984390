//! Reference computations shared by the integration tests. Nothing here calls
//! into the solvers under test.

#![allow(dead_code)]

/// Exact BL distance between `Σ w_k δ_{x_k}` and `Σ v_k δ_{y_k}` by vertex
/// enumeration of the polytope `{|f_k| ≤ 1, |f_k - f_l| ≤ |x_k - x_l|}`.
///
/// A vertex fixes every `f_k` through `n` independent tight constraints.
/// Treating the bound `f_k = ±1` as an edge to a ground node, such a set is
/// a spanning tree on `{ground} ∪ support`, so enumerating labelled trees
/// (Prüfer codes) with a sign per edge visits every vertex.
pub fn bl_oracle(mu: &[(Vec<f64>, f64)], eta: &[(Vec<f64>, f64)]) -> f64 {
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut charge: Vec<f64> = Vec::new();
    for (x, w) in mu
        .iter()
        .map(|(x, w)| (x, *w))
        .chain(eta.iter().map(|(x, w)| (x, -*w)))
    {
        match points.iter().position(|p| p == x) {
            Some(k) => charge[k] += w,
            None => {
                points.push(x.clone());
                charge.push(w);
            }
        }
    }
    let n = points.len();
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| euclid(a, b)).collect())
        .collect();

    // node 0 is ground, node k+1 is support point k
    let nodes = n + 1;
    let mut best = f64::NEG_INFINITY;
    let mut code = vec![0usize; nodes.saturating_sub(2)];
    let mut f = vec![0.0; n];
    loop {
        let edges = prufer_decode(&code, nodes);
        let parent = orient(&edges, nodes);
        let order = bfs_order(&parent, nodes);
        for signs in 0u32..(1 << n) {
            for &v in &order {
                let k = v - 1;
                let s = if signs >> k & 1 == 1 { 1.0 } else { -1.0 };
                let p = parent[v];
                f[k] = if p == 0 { s } else { f[p - 1] + s * dist[k][p - 1] };
            }
            if feasible(&f, &dist) {
                let value: f64 = f.iter().zip(&charge).map(|(a, b)| a * b).sum();
                best = best.max(value);
            }
        }
        if !next_code(&mut code, nodes) {
            break;
        }
    }
    best
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn feasible(f: &[f64], dist: &[Vec<f64>]) -> bool {
    const SLACK: f64 = 1e-12;
    for k in 0..f.len() {
        if f[k].abs() > 1.0 + SLACK {
            return false;
        }
        for l in 0..k {
            if (f[k] - f[l]).abs() > dist[k][l] + SLACK {
                return false;
            }
        }
    }
    true
}

fn next_code(code: &mut [usize], nodes: usize) -> bool {
    for c in code.iter_mut() {
        *c += 1;
        if *c < nodes {
            return true;
        }
        *c = 0;
    }
    false
}

fn prufer_decode(code: &[usize], nodes: usize) -> Vec<(usize, usize)> {
    if nodes == 1 {
        return Vec::new();
    }
    let mut degree = vec![1usize; nodes];
    for &c in code {
        degree[c] += 1;
    }
    let mut edges = Vec::with_capacity(nodes - 1);
    for &c in code {
        let leaf = (0..nodes).find(|&v| degree[v] == 1).unwrap();
        edges.push((leaf, c));
        degree[leaf] -= 1;
        degree[c] -= 1;
    }
    let rest: Vec<usize> = (0..nodes).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

fn orient(edges: &[(usize, usize)], nodes: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); nodes];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![usize::MAX; nodes];
    parent[0] = 0;
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if parent[w] == usize::MAX {
                parent[w] = v;
                stack.push(w);
            }
        }
    }
    parent
}

fn bfs_order(parent: &[usize], nodes: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(nodes - 1);
    let mut frontier = vec![0];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for v in (1..nodes).filter(|&v| frontier.contains(&parent[v])) {
            order.push(v);
            next.push(v);
        }
        frontier = next;
    }
    order
}

/// `W_1` on the line by the north-west corner rule on sorted atoms.
pub fn w1_northwest(mu: &[(f64, f64)], eta: &[(f64, f64)]) -> f64 {
    let mut a: Vec<(f64, f64)> = mu.to_vec();
    let mut b: Vec<(f64, f64)> = eta.to_vec();
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j) = (0, 0);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let m = a[i].1.min(b[j].1);
        cost += m * (a[i].0 - b[j].0).abs();
        a[i].1 -= m;
        b[j].1 -= m;
        if a[i].1 <= 1e-15 {
            i += 1;
        }
        if j < b.len() && b[j].1 <= 1e-15 {
            j += 1;
        }
    }
    cost
}

/// Two-sided one-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let c = cdf(x);
            f64::max(c - k as f64 / n, (k + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of `√n D_n`.
pub const KS_CRITICAL_1PCT: f64 = 1.6276;

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    mean_and_se(xs).1.powi(2) * xs.len() as f64
}

/// Closed form of `exp(Qt)` for a two-state chain with rates `a` (0→1), `b` (1→0).
pub fn two_state_transition(a: f64, b: f64, t: f64) -> [[f64; 2]; 2] {
    let s = a + b;
    let e = (-s * t).exp();
    [
        [(b + a * e) / s, a * (1.0 - e) / s],
        [b * (1.0 - e) / s, (a + b * e) / s],
    ]
}
