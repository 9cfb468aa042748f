//! Exact earth mover's distance (1-Wasserstein) between rasterized densities
//! via a transportation-problem network simplex: basis kept as a spanning
//! tree, MODI potentials, Dantzig entering rule, supplies epsilon-perturbed
//! against degeneracy.

use super::grid::DensityGrid;
use crate::error::{Error, Result};

/// Exact EMD between two grids of identical geometry under the Euclidean
/// distance between cell centers.
pub fn emd(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::ShapeMismatch {
            context: "emd grids".into(),
            expected: format!("{:?}", a.spec),
            got: format!("{:?}", b.spec),
        });
    }
    if (a.total() - b.total()).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "emd mass mismatch: {} vs {}",
            a.total(),
            b.total()
        )));
    }

    // Keep only cells carrying mass; the rest cannot participate.
    const DROP: f64 = 1e-14;
    let gather = |g: &DensityGrid| -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::new();
        let mut mass = Vec::new();
        for (i, &m) in g.mass().iter().enumerate() {
            if m > DROP {
                idx.push(i);
                mass.push(m);
            }
        }
        let total: f64 = mass.iter().sum();
        for m in &mut mass {
            *m /= total;
        }
        (idx, mass)
    };
    let (ia, supply) = gather(a);
    let (ib, demand) = gather(b);

    let spec = a.spec;
    let center = |flat: usize| spec.cell_center(flat % spec.nx, flat / spec.nx);
    let ca: Vec<_> = ia.iter().map(|&i| center(i)).collect();
    let cb: Vec<_> = ib.iter().map(|&i| center(i)).collect();
    Ok(transport(&supply, &demand, |i, j| ca[i].dist(cb[j])))
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    src: usize,
    snk: usize,
    flow: f64,
}

/// Solves the balanced transportation problem
/// `min sum f_ij c_ij  s.t.  sum_j f_ij = supply_i, sum_i f_ij = demand_j`
/// and returns the optimal cost. Supplies and demands must balance.
pub fn transport(supply: &[f64], demand: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let (m, n) = (supply.len(), demand.len());
    assert!(m > 0 && n > 0);
    if m == 1 {
        return (0..n).map(|j| demand[j] * cost(0, j)).sum();
    }
    if n == 1 {
        return (0..m).map(|i| supply[i] * cost(i, 0)).sum();
    }

    // Epsilon perturbation keeps every basis flow strictly positive, which
    // rules out cycling without a Bland rule.
    let eps = 1e-12;
    let mut a: Vec<f64> = supply.iter().map(|&s| s + eps).collect();
    let mut b: Vec<f64> = demand.to_vec();
    b[n - 1] += m as f64 * eps;

    // Northwest-corner initial basis.
    let mut arcs: Vec<Arc> = Vec::with_capacity(m + n - 1);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
    let push_arc = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, i: usize, j: usize, f: f64| {
        let id = arcs.len();
        arcs.push(Arc { src: i, snk: j, flow: f });
        adj[i].push(id);
        adj[m + j].push(id);
    };
    {
        let (mut i, mut j) = (0usize, 0usize);
        while i < m && j < n {
            let f = a[i].min(b[j]);
            push_arc(&mut arcs, &mut adj, i, j, f);
            a[i] -= f;
            b[j] -= f;
            if a[i] <= b[j] && i + 1 < m {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(arcs.len(), m + n - 1, "northwest corner basis size");
    }

    let max_cost = {
        let mut mc: f64 = 0.0;
        for i in 0..m {
            mc = mc.max(cost(i, 0));
        }
        for j in 0..n {
            mc = mc.max(cost(0, j));
        }
        mc.max(1.0)
    };
    let tol = 1e-12 * max_cost;

    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n];
    let mut seen = vec![false; m + n];
    let mut stack: Vec<usize> = Vec::with_capacity(m + n);
    let mut parent_arc: Vec<usize> = vec![usize::MAX; m + n];

    let max_iters = 50 * (m + n) * 10;
    for _iter in 0..max_iters {
        // Potentials from the basis tree (u[0] = 0).
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(0);
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &aid in &adj[node] {
                let arc = arcs[aid];
                let (s, t) = (arc.src, m + arc.snk);
                let next = if node == s { t } else { s };
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                if next == t {
                    v[arc.snk] = cost(arc.src, arc.snk) - u[arc.src];
                } else {
                    u[arc.src] = cost(arc.src, arc.snk) - v[arc.snk];
                }
                stack.push(next);
            }
        }

        // Entering arc: most negative reduced cost (basis arcs reduce to 0).
        let (mut best, mut enter) = (-tol, None);
        for i in 0..m {
            for j in 0..n {
                let r = cost(i, j) - u[i] - v[j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                }
            }
        }
        let (ei, ej) = match enter {
            Some(e) => e,
            None => break,
        };

        // Tree path from the entering source to the entering sink.
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(ei);
        seen[ei] = true;
        parent_arc[ei] = usize::MAX;
        while let Some(node) = stack.pop() {
            if node == m + ej {
                break;
            }
            for &aid in &adj[node] {
                let arc = arcs[aid];
                let (s, t) = (arc.src, m + arc.snk);
                let next = if node == s { t } else { s };
                if !seen[next] {
                    seen[next] = true;
                    parent_arc[next] = aid;
                    stack.push(next);
                }
            }
        }
        debug_assert!(seen[m + ej], "basis tree disconnected");

        // Walk back collecting the cycle; arcs alternate -,+ starting from
        // the sink side (the arc entering the sink node loses flow).
        let mut minus_arcs: Vec<usize> = Vec::new();
        let mut plus_arcs: Vec<usize> = Vec::new();
        let mut node = m + ej;
        let mut sign_minus = true;
        while node != ei {
            let aid = parent_arc[node];
            let arc = arcs[aid];
            if sign_minus {
                minus_arcs.push(aid);
            } else {
                plus_arcs.push(aid);
            }
            sign_minus = !sign_minus;
            node = if node == m + arc.snk { arc.src } else { m + arc.snk };
        }

        let (theta, leave) = minus_arcs
            .iter()
            .map(|&aid| (arcs[aid].flow, aid))
            .fold((f64::INFINITY, usize::MAX), |acc, x| if x.0 < acc.0 { x } else { acc });

        for &aid in &minus_arcs {
            arcs[aid].flow -= theta;
        }
        for &aid in &plus_arcs {
            arcs[aid].flow += theta;
        }
        // Replace the leaving arc with the entering one in place.
        let old = arcs[leave];
        adj[old.src].retain(|&x| x != leave);
        adj[m + old.snk].retain(|&x| x != leave);
        arcs[leave] = Arc { src: ei, snk: ej, flow: theta };
        adj[ei].push(leave);
        adj[m + ej].push(leave);
    }

    arcs.iter().map(|arc| arc.flow * cost(arc.src, arc.snk)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point2;
    use crate::metrics::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, nx: usize, ny: usize) -> DensityGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::from_bounds(Point2::ZERO, Point2::new(nx as f64, ny as f64), nx, ny);
        let pts: Vec<Point2> = (0..50)
            .map(|_| Point2::new(rng.gen_range(0.0..nx as f64), rng.gen_range(0.0..ny as f64)))
            .collect();
        let w: Vec<f64> = (0..50).map(|_| rng.gen_range(0.1..1.0)).collect();
        DensityGrid::from_samples(spec, &pts, Some(&w)).unwrap()
    }

    #[test]
    fn identical_grids_have_zero_distance() {
        let g = random_grid(0, 6, 6);
        assert!(emd(&g, &g).unwrap() < 1e-8);
    }

    #[test]
    fn two_point_masses_cost_their_distance() {
        let spec = GridSpec::from_bounds(Point2::ZERO, Point2::new(8.0, 1.0), 8, 1);
        let a = DensityGrid::from_samples(spec, &[spec.cell_center(1, 0)], None).unwrap();
        let b = DensityGrid::from_samples(spec, &[spec.cell_center(6, 0)], None).unwrap();
        let d = emd(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-9, "emd {d}");
    }

    #[test]
    fn mismatched_geometry_errors() {
        let a = random_grid(1, 6, 6);
        let b = random_grid(2, 5, 6);
        assert!(emd(&a, &b).is_err());
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        for seed in 0..6u64 {
            let a = random_grid(seed * 3, 6, 6);
            let b = random_grid(seed * 3 + 1, 6, 6);
            let c = random_grid(seed * 3 + 2, 6, 6);
            let ab = emd(&a, &b).unwrap();
            let ba = emd(&b, &a).unwrap();
            let ac = emd(&a, &c).unwrap();
            let cb = emd(&c, &b).unwrap();
            assert!((ab - ba).abs() < 1e-6, "symmetry: {ab} vs {ba}");
            assert!(ab <= ac + cb + 1e-6, "triangle: {ab} > {ac} + {cb}");
        }
    }

    #[test]
    fn split_mass_transport_cost_is_exact() {
        // One unit at x=0 split to 0.25 at x=2 and 0.75 at x=6:
        // cost = 0.25*2 + 0.75*6 = 5.0.
        let spec = GridSpec::from_bounds(Point2::new(-0.5, -0.5), Point2::new(7.5, 0.5), 8, 1);
        let a = DensityGrid::from_samples(spec, &[Point2::new(0.0, 0.0)], None).unwrap();
        let b = DensityGrid::from_samples(
            spec,
            &[Point2::new(2.0, 0.0), Point2::new(6.0, 0.0)],
            Some(&[0.25, 0.75]),
        )
        .unwrap();
        let d = emd(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-9, "emd {d}");
    }
}
