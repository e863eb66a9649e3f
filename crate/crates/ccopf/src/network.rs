//! Sparse linear algebra for the DC power-flow model.
//!
//! The grid's weighted Laplacian `B` (susceptance matrix) has one zero
//! eigenvalue; grounding the slack bus removes it. Everything downstream —
//! mean bus angles, wind shift factors, the participation response — is a
//! solve against the reduced matrix `B̂`, which is symmetric positive
//! definite whenever the grid is connected.
//!
//! [`NetworkFactors`] performs a one-time sparse Cholesky factorization of
//! `B̂` (reverse Cuthill–McKee ordering, envelope storage) and answers every
//! later solve by substitution plus iterative refinement. Solutions are
//! guaranteed to a 1e-10 relative residual or the solve reports failure.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::case::GridCase;

/// Relative backward-error bound every solve must meet.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Refinement target; a few digits tighter than the guarantee.
const REFINE_TARGET: f64 = 1e-13;
const REFINE_MAX_STEPS: usize = 6;

#[derive(Debug, Error)]
pub enum NetworkError {
    /// The reduced matrix lost positive definiteness during factorization.
    /// Cannot happen for a connected grid; guards engineered inputs.
    #[error("susceptance matrix is numerically singular at pivot {pivot} (grid disconnected from slack?)")]
    Singular { pivot: usize },
    #[error("linear solve stalled at relative residual {residual:.3e} after {steps} refinement steps")]
    RefinementStalled { residual: f64, steps: usize },
    #[error("injections sum to {net:.6e} MW, beyond the balance tolerance {tol:.3e} MW")]
    Unbalanced { net: f64, tol: f64 },
    #[error("bad participation vector: {msg}")]
    BadParticipation { msg: String },
    #[error("expected a per-bus vector of length {expected}, got {got}")]
    BadDimension { expected: usize, got: usize },
}

/// Weighted graph Laplacian in sorted sparse rows: `B[i][i] = sum of incident
/// susceptances`, `B[i][j] = -susceptance(i,j)`.
#[derive(Debug, Clone)]
pub struct Laplacian {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Laplacian {
    #[allow(clippy::needless_range_loop)] // index math mirrors the algebra
    pub fn from_case(case: &GridCase) -> Laplacian {
        let n = case.n_buses();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for line in &case.lines {
            let (i, j, b) = (line.from_bus, line.to_bus, line.susceptance);
            *maps[i].entry(j).or_insert(0.0) -= b;
            *maps[j].entry(i).or_insert(0.0) -= b;
        }
        for i in 0..n {
            let degree: f64 = maps[i].values().sum();
            maps[i].insert(i, -degree);
        }
        Laplacian {
            n,
            rows: maps
                .into_iter()
                .map(|m| m.into_iter().collect())
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|(col, _)| *col == j)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|(_, v)| v).sum()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[i][j] = v;
            }
        }
        out
    }

    /// Drop one bus's row and column. With the slack placed last, the
    /// remaining indices coincide with internal bus ids.
    fn reduce(&self, drop: usize) -> Vec<Vec<(usize, f64)>> {
        let shift = |k: usize| if k > drop { k - 1 } else { k };
        self.rows
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, row)| {
                row.iter()
                    .filter(|(j, _)| *j != drop)
                    .map(|&(j, v)| (shift(j), v))
                    .collect()
            })
            .collect()
    }
}

/// Reverse Cuthill–McKee ordering of an undirected graph given as adjacency
/// lists. Returns `perm` with `perm[position] = node`. Handles several
/// components (removing the slack bus can split a connected grid).
fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree = |v: usize| adj[v].len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    // BFS returning (levels, last frontier sorted by degree).
    let bfs = |start: usize, visited: &mut [bool], emit: Option<&mut Vec<usize>>| -> usize {
        let mut frontier = vec![start];
        visited[start] = true;
        let mut collected = Vec::new();
        let mut last = start;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &v in &frontier {
                collected.push(v);
                let mut nbrs: Vec<usize> =
                    adj[v].iter().copied().filter(|&u| !visited[u]).collect();
                nbrs.sort_by_key(|&u| (degree(u), u));
                for u in nbrs {
                    if !visited[u] {
                        visited[u] = true;
                        next.push(u);
                    }
                }
            }
            last = *frontier.last().unwrap();
            frontier = next;
        }
        if let Some(out) = emit {
            out.extend(collected);
        }
        last
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start: min-degree seed, then a BFS double sweep.
        let mut component = Vec::new();
        {
            let mut probe = visited.clone();
            bfs(seed, &mut probe, Some(&mut component));
        }
        let &start0 = component
            .iter()
            .min_by_key(|&&v| (degree(v), v))
            .unwrap();
        let far = {
            let mut probe = visited.clone();
            bfs(start0, &mut probe, None)
        };
        let start = {
            let mut probe = visited.clone();
            bfs(far, &mut probe, None)
        };
        let _ = start; // double sweep done; `far` is our peripheral node
        bfs(far, &mut visited, Some(&mut order));
    }
    order.reverse();
    order
}

/// Envelope (skyline) Cholesky factor: row `i` of `L` is stored densely from
/// its first nonzero column to the diagonal.
#[derive(Debug, Clone)]
struct Envelope {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl Envelope {
    /// Factor a symmetric positive definite matrix given in sparse rows.
    fn cholesky(rows: &[Vec<(usize, f64)>]) -> Result<Envelope, NetworkError> {
        let m = rows.len();
        let mut first = vec![0usize; m];
        for (i, row) in rows.iter().enumerate() {
            first[i] = row
                .iter()
                .map(|&(j, _)| j)
                .filter(|&j| j <= i)
                .min()
                .unwrap_or(i);
        }
        // Fill-in stays within the envelope, but the envelope must be
        // monotone in the sense used by the solve loops; enforce by widening
        // child rows over their parents is unnecessary for the standard
        // row-Cholesky below, which only reads finished rows.
        let mut env: Vec<Vec<f64>> = (0..m).map(|i| vec![0.0; i - first[i]]).collect();
        let mut diag = vec![0.0; m];
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                match j.cmp(&i) {
                    std::cmp::Ordering::Less => env[i][j - first[i]] = v,
                    std::cmp::Ordering::Equal => diag[i] = v,
                    std::cmp::Ordering::Greater => {}
                }
            }
        }
        let scale: f64 = diag.iter().fold(0.0f64, |a, &d| a.max(d.abs())).max(1.0);
        let tol = 1e-12 * scale;

        for i in 0..m {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut sum = env[i][j - fi];
                for k in lo..j {
                    sum -= env[i][k - fi] * env[j][k - fj];
                }
                env[i][j - fi] = sum / diag[j];
            }
            let mut d = diag[i];
            for k in fi..i {
                d -= env[i][k - fi] * env[i][k - fi];
            }
            if d <= tol {
                return Err(NetworkError::Singular { pivot: i });
            }
            diag[i] = d.sqrt();
        }
        Ok(Envelope {
            first,
            rows: env,
            diag,
        })
    }

    /// Solve `L Lᵀ x = b` in place.
    #[allow(clippy::needless_range_loop)] // envelope offsets read clearer indexed
    fn solve_in_place(&self, x: &mut [f64]) {
        let m = self.diag.len();
        for i in 0..m {
            let fi = self.first[i];
            let mut sum = x[i];
            for k in fi..i {
                sum -= self.rows[i][k - fi] * x[k];
            }
            x[i] = sum / self.diag[i];
        }
        for i in (0..m).rev() {
            x[i] /= self.diag[i];
            let fi = self.first[i];
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.rows[i][k - fi] * xi;
            }
        }
    }
}

/// Factorized reduced susceptance matrix plus the per-farm shift columns.
///
/// Built once per case; every mean-angle, participation-response, and wind
/// shift computation reuses the same factorization.
#[derive(Debug, Clone)]
pub struct NetworkFactors {
    case: GridCase,
    n: usize,
    slack: usize,
    /// `B̂` in reduced indexing (== internal bus ids, slack excluded).
    reduced: Vec<Vec<(usize, f64)>>,
    /// Infinity norm of `B̂`, for backward-error scaling.
    norm: f64,
    /// `perm[position] = reduced index` for the factor's ordering.
    perm: Vec<usize>,
    chol: Envelope,
    /// `wind_columns[k][bus]` solves `B̂ x = e_{bus(k)}`, padded with a zero
    /// at the slack: the angle response to one MW injected at farm `k`.
    wind_columns: Vec<Vec<f64>>,
}

impl NetworkFactors {
    pub fn build(case: &GridCase) -> Result<NetworkFactors, NetworkError> {
        let n = case.n_buses();
        let slack = case.slack_bus;
        let lap = Laplacian::from_case(case);
        let reduced = lap.reduce(slack);
        let m = reduced.len();

        let norm = reduced
            .iter()
            .map(|row| row.iter().map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
            .max(1.0);

        let adj: Vec<Vec<usize>> = reduced
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&(j, _)| j).filter(|&j| j != i).collect())
            .collect();
        let perm = rcm_order(&adj);
        let mut inv_perm = vec![0usize; m];
        for (pos, &old) in perm.iter().enumerate() {
            inv_perm[old] = pos;
        }
        let permuted: Vec<Vec<(usize, f64)>> = perm
            .iter()
            .map(|&old| {
                let mut row: Vec<(usize, f64)> = reduced[old]
                    .iter()
                    .map(|&(j, v)| (inv_perm[j], v))
                    .collect();
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        let chol = Envelope::cholesky(&permuted)?;

        let mut factors = NetworkFactors {
            case: case.clone(),
            n,
            slack,
            reduced,
            norm,
            perm,
            chol,
            wind_columns: Vec::new(),
        };
        let mut columns = Vec::with_capacity(case.wind_farms.len());
        for farm in &case.wind_farms {
            let mut rhs = vec![0.0; m];
            rhs[farm.bus] = 1.0; // farm.bus < slack by construction
            columns.push(factors.solve_reduced_padded(&rhs)?);
        }
        factors.wind_columns = columns;
        Ok(factors)
    }

    pub fn case(&self) -> &GridCase {
        &self.case
    }

    pub fn n_buses(&self) -> usize {
        self.n
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    /// `B̂` rows in reduced indexing, for assembling flow-balance equalities.
    pub fn reduced_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.reduced
    }

    /// Angle response to one MW at wind farm `k` (full bus length, slack 0).
    pub fn wind_column(&self, k: usize) -> &[f64] {
        &self.wind_columns[k]
    }

    pub fn n_farms(&self) -> usize {
        self.wind_columns.len()
    }

    fn multiply_reduced(&self, x: &[f64]) -> Vec<f64> {
        self.reduced
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    /// Solve `B̂ y = rhs` (reduced indexing) with iterative refinement,
    /// then pad a zero at the slack position.
    fn solve_reduced_padded(&self, rhs: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let m = rhs.len();
        let solve_once = |b: &[f64]| -> Vec<f64> {
            let mut work: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
            self.chol.solve_in_place(&mut work);
            let mut out = vec![0.0; m];
            for (pos, &old) in self.perm.iter().enumerate() {
                out[old] = work[pos];
            }
            out
        };

        let rhs_norm = rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let mut x = solve_once(rhs);
        let mut residual = f64::INFINITY;
        let mut steps = 0;
        for step in 0..=REFINE_MAX_STEPS {
            let ax = self.multiply_reduced(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let r_norm = r.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let x_norm = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let scale = (self.norm * x_norm + rhs_norm).max(f64::MIN_POSITIVE);
            residual = r_norm / scale;
            steps = step;
            if residual <= REFINE_TARGET {
                break;
            }
            if step == REFINE_MAX_STEPS {
                break;
            }
            let dx = solve_once(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        if residual > SOLVE_TOLERANCE {
            return Err(NetworkError::RefinementStalled { residual, steps });
        }
        let mut padded = x;
        padded.insert(self.slack, 0.0);
        Ok(padded)
    }

    /// Bus angles for a balanced per-bus injection (full length `n`).
    /// The net injection must vanish: the slack absorbs nothing at the mean.
    pub fn mean_angles(&self, injection: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if injection.len() != self.n {
            return Err(NetworkError::BadDimension {
                expected: self.n,
                got: injection.len(),
            });
        }
        let net: f64 = injection.iter().sum();
        let tol = 1e-8 * self.case.total_load().max(1.0);
        if net.abs() > tol {
            return Err(NetworkError::Unbalanced { net, tol });
        }
        let reduced: Vec<f64> = injection
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.slack)
            .map(|(_, &v)| v)
            .collect();
        self.solve_reduced_padded(&reduced)
    }

    /// Angle response `δ` to the per-bus participation vector `α`
    /// (full length `n`; entries must be nonnegative and sum to one, and the
    /// slack bus — which hosts no generator — must carry none).
    pub fn delta_from_alpha(&self, alpha_bus: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if alpha_bus.len() != self.n {
            return Err(NetworkError::BadDimension {
                expected: self.n,
                got: alpha_bus.len(),
            });
        }
        let total: f64 = alpha_bus.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(NetworkError::BadParticipation {
                msg: format!("entries sum to {total}, expected 1"),
            });
        }
        if let Some(bad) = alpha_bus.iter().find(|&&a| a < -1e-12) {
            return Err(NetworkError::BadParticipation {
                msg: format!("negative entry {bad}"),
            });
        }
        if alpha_bus[self.slack].abs() > 1e-12 {
            return Err(NetworkError::BadParticipation {
                msg: format!(
                    "slack bus carries participation {}",
                    alpha_bus[self.slack]
                ),
            });
        }
        let reduced: Vec<f64> = alpha_bus
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.slack)
            .map(|(_, &v)| v)
            .collect();
        self.solve_reduced_padded(&reduced)
    }
}
