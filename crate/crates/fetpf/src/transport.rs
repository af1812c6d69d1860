//! Discrete optimal transport between empirical measures: squared-Euclidean
//! costs, an exact transportation-simplex solver for the Monge-Kantorovich
//! LP (rectangular marginals included), plan application, and the
//! second-order transform correction.

use crate::ensembles::{anomalies, weighted_covariance_of};
use crate::error::{Error, Result};
use crate::linalg::symmetric_sqrt;
use nalgebra::{DMatrix, DVector, SVD};

/// Tolerance on marginal feasibility of returned plans.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Tolerance when checking that plan columns sum to one before application.
const APPLY_COL_TOL: f64 = 1e-8;

/// A nonnegative coupling matrix with prescribed row and column marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    matrix: DMatrix<f64>,
    row_marginals: DVector<f64>,
    col_marginals: DVector<f64>,
}

impl TransportPlan {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row_marginals(&self) -> &DVector<f64> {
        &self.row_marginals
    }

    pub fn col_marginals(&self) -> &DVector<f64> {
        &self.col_marginals
    }

    /// Transport objective sum_ij T_ij C_ij.
    pub fn objective(&self, cost: &DMatrix<f64>) -> f64 {
        self.matrix.zip_fold(cost, 0.0, |acc, t, c| acc + t * c)
    }

    /// Largest violation of either marginal constraint.
    pub fn marginal_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.matrix.nrows() {
            worst = worst.max((self.matrix.row(i).sum() - self.row_marginals[i]).abs());
        }
        for j in 0..self.matrix.ncols() {
            worst = worst.max((self.matrix.column(j).sum() - self.col_marginals[j]).abs());
        }
        worst
    }
}

/// C[j][k] = squared Euclidean distance between source column j and
/// destination column k.
pub fn cost_matrix(src_states: &DMatrix<f64>, dst_states: &DMatrix<f64>) -> DMatrix<f64> {
    let n = src_states.nrows();
    debug_assert_eq!(n, dst_states.nrows());
    DMatrix::from_fn(src_states.ncols(), dst_states.ncols(), |j, k| {
        let mut d = 0.0;
        for row in 0..n {
            let diff = src_states[(row, j)] - dst_states[(row, k)];
            d += diff * diff;
        }
        d
    })
}

/// Solves the transportation LP
/// min sum T_ij C_ij  s.t.  T 1 = row_marginals, T^T 1 = col_marginals, T >= 0
/// to an optimal basic solution with the transportation simplex.
///
/// Degeneracy is removed internally by the classic lexicographic
/// perturbation (every supply gains one epsilon unit, the last demand
/// absorbs them), which guarantees strict objective decrease and hence
/// termination regardless of the pricing rule. Entering arcs are chosen by
/// cyclic block pricing: the most negative reduced cost within a rotating
/// block of candidates.
pub fn solve_transport(
    cost: &DMatrix<f64>,
    row_marginals: &DVector<f64>,
    col_marginals: &DVector<f64>,
) -> Result<TransportPlan> {
    let rows = row_marginals.len();
    let cols = col_marginals.len();
    if cost.nrows() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: cost.nrows(),
        });
    }
    if cost.ncols() != cols {
        return Err(Error::DimensionMismatch {
            expected: cols,
            actual: cost.ncols(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    if row_marginals.iter().any(|m| !m.is_finite()) || col_marginals.iter().any(|m| !m.is_finite())
    {
        return Err(Error::NonFiniteState);
    }

    let supply_total: f64 = row_marginals.sum();
    let demand_total: f64 = col_marginals.sum();
    let mass_scale = supply_total.abs().max(1.0);
    let neg_tol = 1e-12 * mass_scale;
    for (index, &value) in row_marginals.iter().enumerate() {
        if value < -neg_tol {
            return Err(Error::NegativeMarginal { index, value });
        }
    }
    for (index, &value) in col_marginals.iter().enumerate() {
        if value < -neg_tol {
            return Err(Error::NegativeMarginal { index, value });
        }
    }
    if (supply_total - demand_total).abs() > MARGINAL_TOL {
        return Err(Error::UnbalancedMarginals {
            supply: supply_total,
            demand: demand_total,
        });
    }

    let supplies: Vec<f64> = row_marginals.iter().map(|m| m.max(0.0)).collect();
    // rescale demands so the problem balances to machine precision
    let sup_sum: f64 = supplies.iter().sum();
    let mut demands: Vec<f64> = col_marginals.iter().map(|m| m.max(0.0)).collect();
    let dem_sum: f64 = demands.iter().sum();
    if dem_sum > 0.0 {
        let ratio = sup_sum / dem_sum;
        for d in &mut demands {
            *d *= ratio;
        }
    }

    let matrix = if sup_sum <= 0.0 {
        DMatrix::zeros(rows, cols)
    } else {
        let mut simplex = Simplex::new(cost, &supplies, &demands, mass_scale);
        simplex.run()?;
        simplex.extract(&supplies, &demands)?
    };

    Ok(TransportPlan {
        matrix,
        row_marginals: row_marginals.clone(),
        col_marginals: col_marginals.clone(),
    })
}

/// Analysis ensemble X^a = X T for a plan whose columns each sum to one,
/// so every analysis member is a convex combination of source members.
pub fn apply_transport(src_states: &DMatrix<f64>, plan: &TransportPlan) -> Result<DMatrix<f64>> {
    if src_states.ncols() != plan.matrix.nrows() {
        return Err(Error::DimensionMismatch {
            expected: plan.matrix.nrows(),
            actual: src_states.ncols(),
        });
    }
    for j in 0..plan.matrix.ncols() {
        let sum = plan.matrix.column(j).sum();
        if (sum - 1.0).abs() > APPLY_COL_TOL {
            return Err(Error::ColumnMarginal {
                index: j,
                value: sum,
            });
        }
    }
    Ok(src_states * &plan.matrix)
}

/// Second-order correction D for the square transform X^a = X (T* + D):
/// the columns of T* + D still sum to one, the analysis mean stays X w^a,
/// and the unweighted analysis covariance matches the importance-sampling
/// covariance estimate built from `posterior_weights`.
///
/// Construction: map the transported anomalies A_Z through
/// S = Sigma_a^{1/2} cov(Z)^{-1/2} (symmetric roots), then pull the
/// correction back into ensemble space by solving [X; 1^T] D = [(S-I)A_Z; 0]
/// in least squares. Optimal basic plans are sparse, so cov(Z) loses rank
/// whenever the posterior concentrates and several analysis columns become
/// copies; the inverse root is therefore taken on the well-conditioned
/// eigendirections only and the missing directions are rebuilt from
/// anomalies orthogonal to the transported ones (and to the ones vector),
/// which keeps the covariance identity exact. Instances without room for
/// that completion (K <= n + 1 collapses) report as rank-deficient.
pub fn second_order_correction(
    src_states: &DMatrix<f64>,
    plan: &TransportPlan,
    posterior_weights: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = src_states.nrows();
    let k = src_states.ncols();
    if plan.matrix.nrows() != k || plan.matrix.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: plan.matrix.nrows().max(plan.matrix.ncols()),
        });
    }
    if posterior_weights.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: posterior_weights.len(),
        });
    }
    if k < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: k,
        });
    }

    let transported = src_states * &plan.matrix;
    let a_z = anomalies(&transported).into_inner();
    let cov_z = &a_z * a_z.transpose() / (k as f64 - 1.0);
    let sigma_a = weighted_covariance_of(src_states, posterior_weights)?;
    let sqrt_sigma = symmetric_sqrt(&sigma_a);

    let eig = cov_z.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = lam_max * 1e-10;
    let regular: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let deficient: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= floor).collect();

    // pseudo-inverse root on the resolved directions
    let mut pinv_sqrt = DMatrix::zeros(n, n);
    for &i in &regular {
        let u = eig.eigenvectors.column(i);
        pinv_sqrt.syger(
            1.0 / eig.eigenvalues[i].sqrt(),
            &u.into_owned(),
            &u.into_owned(),
            1.0,
        );
    }
    pinv_sqrt.fill_upper_triangle_with_lower_triangle();
    let mut analysis_anomalies = &sqrt_sigma * pinv_sqrt * &a_z;

    if !deficient.is_empty() {
        // complete the rank: scaled orthonormal rows orthogonal to the ones
        // vector and to every transported anomaly row, so the cross terms
        // vanish and each missing eigendirection regains full weight
        let completion = orthogonal_completion(&a_z, deficient.len()).ok_or_else(|| {
            Error::Correction("ensemble too small to restore the missing covariance rank".into())
        })?;
        let mut carrier = DMatrix::zeros(n, deficient.len());
        for (slot, &i) in deficient.iter().enumerate() {
            carrier.set_column(slot, &eig.eigenvectors.column(i).into_owned());
        }
        analysis_anomalies += &sqrt_sigma * carrier * completion * (k as f64 - 1.0).sqrt();
    }
    let target_shift = analysis_anomalies - &a_z;

    // the extra scaled row of ones pins the column sums of D to zero
    let ones_scale = (src_states.amax()).max(1.0);
    let mut lhs = DMatrix::zeros(n + 1, k);
    lhs.view_mut((0, 0), (n, k)).copy_from(src_states);
    lhs.row_mut(n).fill(ones_scale);
    let mut rhs = DMatrix::zeros(n + 1, k);
    rhs.view_mut((0, 0), (n, k)).copy_from(&target_shift);

    let svd = SVD::new(lhs.clone(), true, true);
    let sv_max = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let correction = svd
        .solve(&rhs, sv_max * 1e-13)
        .map_err(|message| Error::Correction(message.into()))?;

    let residual = (&lhs * &correction - &rhs).norm();
    let scale = 1.0 + target_shift.norm();
    if residual > 1e-9 * scale {
        return Err(Error::Correction(format!(
            "covariance matching is infeasible for this ensemble (residual {residual:.3e})"
        )));
    }
    Ok(correction)
}

/// `count` orthonormal rows (as a count x K matrix) orthogonal to the ones
/// vector and to every row of `a_z`, built by projecting canonical basis
/// vectors; None when the span runs out.
fn orthogonal_completion(a_z: &DMatrix<f64>, count: usize) -> Option<DMatrix<f64>> {
    let k = a_z.ncols();
    let mut exclusion: Vec<DVector<f64>> = Vec::with_capacity(a_z.nrows() + 1 + count);
    exclusion.push(DVector::from_element(k, 1.0 / (k as f64).sqrt()));
    for row in 0..a_z.nrows() {
        let mut v = a_z.row(row).transpose();
        for basis in &exclusion {
            let proj = basis.dot(&v);
            v -= basis * proj;
        }
        let norm = v.norm();
        if norm > 1e-12 * (1.0 + a_z.amax()) {
            exclusion.push(v / norm);
        }
    }
    let mut rows = DMatrix::zeros(count, k);
    let mut found = 0;
    for candidate in 0..k {
        if found == count {
            break;
        }
        let mut v = DVector::zeros(k);
        v[candidate] = 1.0;
        for basis in &exclusion {
            let proj = basis.dot(&v);
            v -= basis * proj;
        }
        // re-orthogonalize for numerical hygiene
        for basis in &exclusion {
            let proj = basis.dot(&v);
            v -= basis * proj;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            let unit = v / norm;
            rows.row_mut(found).copy_from(&unit.transpose());
            exclusion.push(unit);
            found += 1;
        }
    }
    (found == count).then_some(rows)
}

/// Flow value with an exact integer epsilon component; the perturbation
/// keeps every basic solution nondegenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Flow {
    re: f64,
    eps: f64,
}

impl Flow {
    const ZERO: Flow = Flow { re: 0.0, eps: 0.0 };

    fn sub(self, other: Flow) -> Flow {
        Flow {
            re: self.re - other.re,
            eps: self.eps - other.eps,
        }
    }

    fn add(self, other: Flow) -> Flow {
        Flow {
            re: self.re + other.re,
            eps: self.eps + other.eps,
        }
    }
}

struct Simplex {
    rows: usize,
    cols: usize,
    /// Row-major cost copy; the scans are the hot path.
    cost: Vec<f64>,
    flow: Vec<Flow>,
    in_basis: Vec<bool>,
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    parent_node: Vec<usize>,
    parent_arc: Vec<usize>,
    visited: Vec<bool>,
    node_stack: Vec<usize>,
    plus_arcs: Vec<usize>,
    minus_arcs: Vec<usize>,
    pricing_cursor: usize,
    pricing_block: usize,
    entering_tol: f64,
    tie_tol: f64,
    supplies: Vec<f64>,
    demands: Vec<f64>,
}

impl Simplex {
    fn new(cost: &DMatrix<f64>, supplies: &[f64], demands: &[f64], mass_scale: f64) -> Self {
        let rows = supplies.len();
        let cols = demands.len();
        let nodes = rows + cols;
        let arcs = rows * cols;
        let max_cost = cost.amax();
        let mut cost_flat = vec![0.0; arcs];
        for i in 0..rows {
            for j in 0..cols {
                cost_flat[i * cols + j] = cost[(i, j)];
            }
        }
        Simplex {
            rows,
            cols,
            cost: cost_flat,
            flow: vec![Flow::ZERO; arcs],
            in_basis: vec![false; arcs],
            adj: vec![Vec::new(); nodes],
            u: vec![0.0; rows],
            v: vec![0.0; cols],
            parent_node: vec![usize::MAX; nodes],
            parent_arc: vec![usize::MAX; nodes],
            visited: vec![false; nodes],
            node_stack: Vec::with_capacity(nodes),
            plus_arcs: Vec::with_capacity(nodes),
            minus_arcs: Vec::with_capacity(nodes),
            pricing_cursor: 0,
            pricing_block: (arcs as f64).sqrt().ceil() as usize + 1,
            entering_tol: 1e-12 * (1.0 + max_cost),
            tie_tol: 1e-11 * mass_scale,
            supplies: supplies.to_vec(),
            demands: demands.to_vec(),
        }
    }

    fn arc_row(&self, arc: usize) -> usize {
        arc / self.cols
    }

    fn arc_col(&self, arc: usize) -> usize {
        arc % self.cols
    }

    /// Lexicographic comparison with a small tolerance on the real part;
    /// exact integer epsilon parts break the ties.
    fn flow_le(&self, a: Flow, b: Flow) -> bool {
        if (a.re - b.re).abs() <= self.tie_tol {
            a.eps <= b.eps
        } else {
            a.re < b.re
        }
    }

    fn add_basic(&mut self, arc: usize, value: Flow) {
        self.flow[arc] = value;
        self.in_basis[arc] = true;
        let (i, j) = (self.arc_row(arc), self.arc_col(arc));
        self.adj[i].push(arc);
        self.adj[self.rows + j].push(arc);
    }

    fn remove_basic(&mut self, arc: usize) {
        self.in_basis[arc] = false;
        self.flow[arc] = Flow::ZERO;
        let (i, j) = (self.arc_row(arc), self.arc_col(arc));
        self.adj[i].retain(|&a| a != arc);
        self.adj[self.rows + j].retain(|&a| a != arc);
    }

    /// Northwest-corner start on the perturbed marginals. The perturbation
    /// guarantees no intermediate tie, so exactly rows+cols-1 arcs enter.
    fn northwest_corner(&mut self) {
        let mut sup: Vec<Flow> = self
            .supplies
            .iter()
            .map(|&s| Flow { re: s, eps: 1.0 })
            .collect();
        let mut dem: Vec<Flow> = self
            .demands
            .iter()
            .map(|&d| Flow { re: d, eps: 0.0 })
            .collect();
        dem[self.cols - 1].eps = self.rows as f64;

        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let arc = i * self.cols + j;
            if i == self.rows - 1 && j == self.cols - 1 {
                self.add_basic(arc, sup[i]);
                break;
            }
            let take_supply = if i == self.rows - 1 {
                false
            } else if j == self.cols - 1 {
                true
            } else {
                self.flow_le(sup[i], dem[j])
            };
            if take_supply {
                self.add_basic(arc, sup[i]);
                dem[j] = dem[j].sub(sup[i]);
                sup[i] = Flow::ZERO;
                i += 1;
            } else {
                self.add_basic(arc, dem[j]);
                sup[i] = sup[i].sub(dem[j]);
                dem[j] = Flow::ZERO;
                j += 1;
            }
        }
    }

    /// Recomputes the dual potentials by walking the basis tree from row 0.
    fn compute_duals(&mut self) {
        let nodes = self.rows + self.cols;
        self.visited[..nodes].fill(false);
        self.u[0] = 0.0;
        self.visited[0] = true;
        self.node_stack.clear();
        self.node_stack.push(0);
        while let Some(node) = self.node_stack.pop() {
            for idx in 0..self.adj[node].len() {
                let arc = self.adj[node][idx];
                let (i, j) = (self.arc_row(arc), self.arc_col(arc));
                let other = if node < self.rows { self.rows + j } else { i };
                if self.visited[other] {
                    continue;
                }
                if node < self.rows {
                    self.v[j] = self.cost[arc] - self.u[i];
                } else {
                    self.u[i] = self.cost[arc] - self.v[j];
                }
                self.visited[other] = true;
                self.node_stack.push(other);
            }
        }
    }

    /// Cyclic block pricing: scan candidate arcs in rotating blocks and
    /// return the most negative reduced cost seen in the first block that
    /// contains any violation.
    fn find_entering(&mut self) -> Option<usize> {
        let arcs = self.rows * self.cols;
        let mut best: Option<usize> = None;
        let mut best_rc = -self.entering_tol;
        let mut arc = self.pricing_cursor.min(arcs - 1);
        let mut i = arc / self.cols;
        let mut j = arc % self.cols;
        let mut scanned = 0;
        let mut block_left = self.pricing_block;
        while scanned < arcs {
            if !self.in_basis[arc] {
                let rc = self.cost[arc] - self.u[i] - self.v[j];
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(arc);
                }
            }
            scanned += 1;
            arc += 1;
            j += 1;
            if j == self.cols {
                j = 0;
                i += 1;
            }
            if arc == arcs {
                arc = 0;
                i = 0;
                j = 0;
            }
            block_left -= 1;
            if block_left == 0 {
                if best.is_some() {
                    break;
                }
                block_left = self.pricing_block;
            }
        }
        self.pricing_cursor = arc;
        best
    }

    /// Unique tree path between the endpoints of the entering arc.
    fn tree_path(&mut self, from: usize, to: usize) {
        let nodes = self.rows + self.cols;
        self.visited[..nodes].fill(false);
        self.visited[from] = true;
        self.parent_node[from] = from;
        self.node_stack.clear();
        self.node_stack.push(from);
        while let Some(node) = self.node_stack.pop() {
            if node == to {
                return;
            }
            for idx in 0..self.adj[node].len() {
                let arc = self.adj[node][idx];
                let (i, j) = (self.arc_row(arc), self.arc_col(arc));
                let other = if node < self.rows { self.rows + j } else { i };
                if self.visited[other] {
                    continue;
                }
                self.visited[other] = true;
                self.parent_node[other] = node;
                self.parent_arc[other] = arc;
                self.node_stack.push(other);
            }
        }
    }

    fn pivot(&mut self, entering: usize) {
        let from = self.arc_row(entering);
        let to = self.rows + self.arc_col(entering);
        self.tree_path(from, to);

        // walk the cycle back from the entering arc's head; signs alternate
        // starting with minus because the entering arc itself carries plus
        self.plus_arcs.clear();
        self.minus_arcs.clear();
        let mut node = to;
        let mut negative = true;
        while node != from {
            let arc = self.parent_arc[node];
            if negative {
                self.minus_arcs.push(arc);
            } else {
                self.plus_arcs.push(arc);
            }
            negative = !negative;
            node = self.parent_node[node];
        }

        let mut leaving = self.minus_arcs[0];
        let mut theta = self.flow[leaving];
        for &arc in &self.minus_arcs[1..] {
            let f = self.flow[arc];
            let le = self.flow_le(f, theta);
            let ge = self.flow_le(theta, f);
            // strict improvement, or an exact tie resolved by smallest index
            if (le && !ge) || (le && ge && arc < leaving) {
                theta = f;
                leaving = arc;
            }
        }

        for idx in 0..self.plus_arcs.len() {
            let arc = self.plus_arcs[idx];
            self.flow[arc] = self.flow[arc].add(theta);
        }
        for idx in 0..self.minus_arcs.len() {
            let arc = self.minus_arcs[idx];
            self.flow[arc] = self.flow[arc].sub(theta);
        }
        self.remove_basic(leaving);
        self.add_basic(entering, theta);
    }

    fn run(&mut self) -> Result<()> {
        self.northwest_corner();
        let max_pivots = 1000 + 20 * self.rows * self.cols;
        for _ in 0..max_pivots {
            self.compute_duals();
            match self.find_entering() {
                Some(arc) => self.pivot(arc),
                None => return Ok(()),
            }
        }
        Err(Error::TransportNoConvergence)
    }

    /// Re-solves the final basis tree against the unperturbed marginals by
    /// leaf stripping, which drops the epsilon components exactly and keeps
    /// the marginal constraints at machine precision.
    fn extract(&self, supplies: &[f64], demands: &[f64]) -> Result<DMatrix<f64>> {
        let nodes = self.rows + self.cols;
        let mut residual = vec![0.0; nodes];
        residual[..self.rows].copy_from_slice(supplies);
        residual[self.rows..].copy_from_slice(demands);

        let mut live: Vec<Vec<usize>> = self.adj.clone();
        let mut queue: Vec<usize> = (0..nodes).filter(|&n| live[n].len() == 1).collect();
        let mut matrix = DMatrix::zeros(self.rows, self.cols);
        let clamp_tol = 1e-10 * (1.0 + residual.iter().map(|r| r.abs()).sum::<f64>());

        let mut assigned = 0usize;
        while let Some(node) = queue.pop() {
            if live[node].len() != 1 {
                continue;
            }
            let arc = live[node][0];
            let (i, j) = (self.arc_row(arc), self.arc_col(arc));
            let other = if node < self.rows { self.rows + j } else { i };
            let value = residual[node];
            if value < -clamp_tol {
                return Err(Error::TransportNoConvergence);
            }
            matrix[(i, j)] = value.max(0.0);
            residual[other] -= value;
            residual[node] = 0.0;
            live[node].clear();
            live[other].retain(|&a| a != arc);
            if live[other].len() == 1 {
                queue.push(other);
            }
            assigned += 1;
        }
        if assigned != self.rows + self.cols - 1 {
            return Err(Error::TransportNoConvergence);
        }
        Ok(matrix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dvec(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    /// Brute-force transportation optimum by enumerating all spanning-tree
    /// bases of the bipartite graph and keeping the cheapest feasible one.
    fn brute_force_optimum(cost: &DMatrix<f64>, rows: &DVector<f64>, cols: &DVector<f64>) -> f64 {
        let r = rows.len();
        let c = cols.len();
        let arcs = r * c;
        let basis_size = r + c - 1;
        let mut combo: Vec<usize> = (0..basis_size).collect();
        let mut best = f64::INFINITY;
        loop {
            if let Some(value) = tree_cost(cost, rows, cols, &combo) {
                best = best.min(value);
            }
            // next combination
            let mut idx = basis_size;
            loop {
                if idx == 0 {
                    return best;
                }
                idx -= 1;
                if combo[idx] != idx + arcs - basis_size {
                    combo[idx] += 1;
                    for later in idx + 1..basis_size {
                        combo[later] = combo[later - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    /// Solves the flows on a candidate arc set if it forms a feasible
    /// spanning tree; returns the transport cost.
    fn tree_cost(
        cost: &DMatrix<f64>,
        rows: &DVector<f64>,
        cols: &DVector<f64>,
        arcs: &[usize],
    ) -> Option<f64> {
        let r = rows.len();
        let c = cols.len();
        let nodes = r + c;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for &a in arcs {
            let (i, j) = (a / c, a % c);
            adj[i].push(a);
            adj[r + j].push(a);
        }
        let mut residual: Vec<f64> = rows.iter().chain(cols.iter()).cloned().collect();
        let mut total = 0.0;
        for _ in 0..arcs.len() {
            // not a tree if no leaf remains while arcs are unprocessed
            let leaf = (0..nodes).find(|&n| adj[n].len() == 1)?;
            let arc = adj[leaf][0];
            let (i, j) = (arc / c, arc % c);
            let other = if leaf < r { r + j } else { i };
            let flow = residual[leaf];
            if flow < -1e-9 {
                return None;
            }
            total += flow.max(0.0) * cost[(i, j)];
            residual[other] -= flow;
            residual[leaf] = 0.0;
            adj[leaf].clear();
            adj[other].retain(|&a| a != arc);
        }
        if residual.iter().all(|x| x.abs() < 1e-9) {
            Some(total)
        } else {
            None
        }
    }

    #[test]
    fn cost_matrix_examples() {
        let pts = DMatrix::from_row_slice(1, 2, &[0.0, 3.0]);
        let c = cost_matrix(&pts, &pts);
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(1, 1)], 0.0);
        assert_eq!(c[(0, 1)], 9.0);
        assert_eq!(c[(1, 0)], 9.0);
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn single_cell_plan() {
        let cost = DMatrix::from_element(1, 1, 4.2);
        let plan = solve_transport(&cost, &dvec(&[2.5]), &dvec(&[2.5])).unwrap();
        assert!((plan.matrix()[(0, 0)] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn identity_plan_for_matching_points() {
        let pts = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 5.0]);
        let cost = cost_matrix(&pts, &pts);
        let ones = dvec(&[1.0, 1.0, 1.0]);
        let plan = solve_transport(&cost, &ones, &ones).unwrap();
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((plan.matrix() - eye).amax() < 1e-12);
    }

    #[test]
    fn known_two_by_two_instance() {
        // src = dst = (0, 1); posterior weights (0.75, 0.25) so row
        // marginals are (1.5, 0.5); enumeration gives [[1, 0.5], [0, 0.5]]
        // at cost 0.5
        let pts = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let cost = cost_matrix(&pts, &pts);
        let plan = solve_transport(&cost, &dvec(&[1.5, 0.5]), &dvec(&[1.0, 1.0])).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        assert!((plan.matrix() - &expected).amax() < 1e-12);
        assert!((plan.objective(&cost) - 0.5).abs() < 1e-12);
        let brute = brute_force_optimum(&cost, &dvec(&[1.5, 0.5]), &dvec(&[1.0, 1.0]));
        assert!((brute - 0.5).abs() < 1e-12);

        let analysis = apply_transport(&pts, &plan).unwrap();
        assert!((analysis[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((analysis[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cost = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            solve_transport(&cost, &dvec(&[1.0, 1.0]), &dvec(&[1.0, 0.5])),
            Err(Error::UnbalancedMarginals { .. })
        ));
        assert!(matches!(
            solve_transport(&cost, &dvec(&[-1.0, 3.0]), &dvec(&[1.0, 1.0])),
            Err(Error::NegativeMarginal { .. })
        ));
        let bad_cost = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(
            solve_transport(&bad_cost, &dvec(&[1.0, 1.0]), &dvec(&[1.0, 1.0])),
            Err(Error::NonFiniteCost)
        ));
    }

    #[test]
    fn zero_mass_gives_zero_plan() {
        let cost = DMatrix::from_element(2, 3, 1.0);
        let plan = solve_transport(&cost, &dvec(&[0.0, 0.0]), &dvec(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(plan.matrix().amax(), 0.0);
    }

    #[test]
    fn zero_supply_rows_stay_empty() {
        let mut rng = StdRng::seed_from_u64(11);
        let cost = DMatrix::from_fn(4, 3, |_, _| rng.gen::<f64>());
        let plan =
            solve_transport(&cost, &dvec(&[0.0, 2.0, 0.0, 1.0]), &dvec(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(plan.matrix().row(0).amax(), 0.0);
        assert_eq!(plan.matrix().row(2).amax(), 0.0);
        assert!(plan.marginal_error() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_small_random_instances() {
        let mut rng = StdRng::seed_from_u64(23);
        for trial in 0..60 {
            let r = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=4);
            let cost = DMatrix::from_fn(r, c, |_, _| rng.gen::<f64>() * 3.0);
            let mut rows: Vec<f64> = (0..r).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = rows.iter().sum();
            for x in &mut rows {
                *x /= total;
            }
            let mut cols: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
            let ctotal: f64 = cols.iter().sum();
            for x in &mut cols {
                *x /= ctotal;
            }
            let rows = dvec(&rows);
            let cols = dvec(&cols);
            let plan = solve_transport(&cost, &rows, &cols).unwrap();
            assert!(plan.marginal_error() < 1e-9, "trial {trial}");
            assert!(plan.matrix().min() > -1e-12, "trial {trial}");
            let brute = brute_force_optimum(&cost, &rows, &cols);
            assert!(
                (plan.objective(&cost) - brute).abs() < 1e-9,
                "trial {trial}: simplex {} vs brute force {brute}",
                plan.objective(&cost)
            );
        }
    }

    #[test]
    fn feasible_on_large_rectangular_instances() {
        let mut rng = StdRng::seed_from_u64(5);
        let (r, c) = (200, 100);
        let src = DMatrix::from_fn(3, r, |_, _| rng.gen::<f64>() * 10.0 - 5.0);
        let dst = DMatrix::from_fn(3, c, |_, _| rng.gen::<f64>() * 10.0 - 5.0);
        let cost = cost_matrix(&src, &dst);
        let mut weights: Vec<f64> = (0..r).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w *= c as f64 / total;
        }
        let rows = dvec(&weights);
        let cols = DVector::from_element(c, 1.0);
        let plan = solve_transport(&cost, &rows, &cols).unwrap();
        assert!(plan.marginal_error() < 1e-9);
        assert!(plan.matrix().min() > -1e-12);
    }

    #[test]
    fn plan_scales_homogeneously() {
        let mut rng = StdRng::seed_from_u64(31);
        let cost = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>());
        let rows = dvec(&[0.2, 0.5, 0.3]);
        let cols = dvec(&[0.4, 0.4, 0.2]);
        let base = solve_transport(&cost, &rows, &cols).unwrap();
        let scaled = solve_transport(&cost, &(&rows * 7.0), &(&cols * 7.0)).unwrap();
        assert!((scaled.matrix() - base.matrix() * 7.0).amax() < 1e-9);
    }

    #[test]
    fn apply_preserves_weighted_mean() {
        let mut rng = StdRng::seed_from_u64(77);
        let k = 6;
        let src = DMatrix::from_fn(3, k, |_, _| rng.gen::<f64>() * 4.0);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        let weights = dvec(&w);
        let cost = cost_matrix(&src, &src);
        let plan = solve_transport(
            &cost,
            &(&weights * k as f64),
            &DVector::from_element(k, 1.0),
        )
        .unwrap();
        let analysis = apply_transport(&src, &plan).unwrap();
        let mean_out = analysis.column_sum() / k as f64;
        let mean_target = &src * &weights;
        assert!((mean_out - mean_target).amax() < 1e-10);
    }

    #[test]
    fn apply_rejects_bad_columns() {
        let src = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let plan = TransportPlan {
            matrix: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.2]),
            row_marginals: dvec(&[1.0, 1.0]),
            col_marginals: dvec(&[1.0, 1.0]),
        };
        assert!(matches!(
            apply_transport(&src, &plan),
            Err(Error::ColumnMarginal { .. })
        ));
    }

    #[test]
    fn correction_is_zero_at_fixed_point() {
        // uniform posterior weights on distinct members: T* is the identity,
        // the transported covariance already matches and D must vanish
        let mut rng = StdRng::seed_from_u64(3);
        let k = 6;
        let src = DMatrix::from_fn(3, k, |_, _| rng.gen::<f64>() * 2.0);
        let cost = cost_matrix(&src, &src);
        let uniform = DVector::from_element(k, 1.0 / k as f64);
        let plan = solve_transport(
            &cost,
            &(&uniform * k as f64),
            &DVector::from_element(k, 1.0),
        )
        .unwrap();
        let d = second_order_correction(&src, &plan, &uniform).unwrap();
        assert!(d.amax() < 1e-9, "D should vanish, got max {}", d.amax());
    }

    #[test]
    fn correction_restores_posterior_covariance() {
        let mut rng = StdRng::seed_from_u64(4);
        for trial in 0..20 {
            let k = 6;
            let src = DMatrix::from_fn(3, k, |_, _| rng.gen::<f64>() * 3.0 - 1.5);
            let mut w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            let weights = dvec(&w);
            let cost = cost_matrix(&src, &src);
            let plan = solve_transport(
                &cost,
                &(&weights * k as f64),
                &DVector::from_element(k, 1.0),
            )
            .unwrap();
            let d = second_order_correction(&src, &plan, &weights).unwrap();

            let analysis = &src * (plan.matrix() + &d);
            // column sums of T*+D stay one -> mean X w^a
            let mean = analysis.column_sum() / k as f64;
            let target_mean = &src * &weights;
            assert!((mean - target_mean).amax() < 1e-10, "trial {trial}");
            // unweighted covariance matches the importance estimate
            let a = anomalies(&analysis).into_inner();
            let cov = &a * a.transpose() / (k as f64 - 1.0);
            let sigma_a = weighted_covariance_of(&src, &weights).unwrap();
            assert!(
                (cov - sigma_a).norm() < 1e-8,
                "trial {trial}: covariance mismatch"
            );
        }
    }

    #[test]
    fn correction_handles_rank_deficient_transport() {
        // concentrated posterior weights make the basic plan copy one
        // member into several analysis columns; cov(Z) loses rank but the
        // correction must still restore the full posterior covariance
        let mut rng = StdRng::seed_from_u64(59);
        let src = DMatrix::from_fn(3, 6, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
        let w = dvec(&[0.02, 0.75, 0.17, 0.03, 0.02, 0.01]);
        let cost = cost_matrix(&src, &src);
        let plan = solve_transport(&cost, &(&w * 6.0), &DVector::from_element(6, 1.0)).unwrap();
        let d = second_order_correction(&src, &plan, &w).unwrap();
        let analysis = &src * (plan.matrix() + &d);
        let a = anomalies(&analysis).into_inner();
        let cov = &a * a.transpose() / 5.0;
        let sigma_a = weighted_covariance_of(&src, &w).unwrap();
        assert!((cov - sigma_a).norm() < 1e-8);

        // total collapse onto one member leaves a zero covariance on both
        // sides; the zero correction satisfies the contract
        let line = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
        let matrix = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let collapsed = TransportPlan {
            matrix,
            row_marginals: dvec(&[3.0, 0.0, 0.0]),
            col_marginals: dvec(&[1.0, 1.0, 1.0]),
        };
        let w0 = dvec(&[1.0, 0.0, 0.0]);
        let d0 = second_order_correction(&line, &collapsed, &w0).unwrap();
        assert!(d0.amax() < 1e-12);
    }

    #[test]
    fn correction_reports_impossible_instances() {
        // K = n = 2: no direction is left for the rank completion
        let src = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let w = dvec(&[0.75, 0.25]);
        let cost = cost_matrix(&src, &src);
        let plan = solve_transport(&cost, &(&w * 2.0), &DVector::from_element(2, 1.0)).unwrap();
        assert!(matches!(
            second_order_correction(&src, &plan, &w),
            Err(Error::Correction(_))
        ));
    }
}
