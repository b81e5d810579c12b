//! Transport error, distributional scores, theorem diagnostics and
//! per-component centroid audits.

use std::fmt::Write as _;

use crate::data::{ComponentMap, ToyDataset};
use crate::field::{NodeVelocities, Time, Velocity};
use crate::flow::{forward_rollout, synthesize, Direction, TimeGrid};
use crate::losses::{mmd_squared, paired_match_loss, KernelSpec, PairwiseMetric};
use crate::numcore::{Eager, Ops, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("error sample"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(ErrorStats { mean, std: var.sqrt() })
    }
}

/// Row-wise `‖a_i − b_i‖₂`.
pub fn row_distances(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::RowMismatch {
            left: a.rows(),
            right: b.rows(),
        });
    }
    Ok((0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Distance between each synthesized point and its true partner. Forward
/// pushes `x` and compares with `z`; backward pulls `z` and compares with
/// `x`.
pub fn transport_error<F: Velocity>(
    field: &F,
    x: &Tensor,
    z: &Tensor,
    grid: &TimeGrid,
    direction: Direction,
) -> Result<ErrorStats> {
    if x.rows() == 0 {
        return Err(Error::Empty("paired test set"));
    }
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    let (input, truth) = match direction {
        Direction::Forward => (x, z),
        Direction::Backward => (z, x),
    };
    let out = synthesize(field, input, grid, direction)?;
    ErrorStats::of(&row_distances(&out, truth)?)
}

/// For each component present in `labels`, the distance between the
/// centroid of its synthesized rows and `means[map(k)]`. Components with no
/// rows are reported as `None`.
pub fn centroid_audit(
    synthesized: &Tensor,
    labels: &[usize],
    map: &ComponentMap,
    means: &Tensor,
) -> Result<Vec<Option<f64>>> {
    if labels.len() != synthesized.rows() {
        return Err(Error::Invalid(format!(
            "{} labels for {} synthesized rows",
            labels.len(),
            synthesized.rows()
        )));
    }
    let k = map.len();
    if means.rows() != k || means.cols() != synthesized.cols() {
        return Err(Error::Invalid("target means do not match the component map".into()));
    }
    let d = synthesized.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Invalid(format!("label {l} outside {k} components")));
        }
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(synthesized.row(i)) {
            *s += v;
        }
    }
    Ok((0..k)
        .map(|c| {
            (counts[c] > 0).then(|| {
                let m = means.row(map.apply(c));
                sums[c]
                    .iter()
                    .zip(m)
                    .map(|(s, mu)| (s / counts[c] as f64 - mu).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect())
}

/// `[K, 2]` ring means.
pub fn means_tensor(means: &[[f64; 2]]) -> Tensor {
    Tensor::matrix(means.len(), 2, means.iter().flatten().copied().collect()).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremDiagnostics {
    /// `max_{i,n} ‖u(X_n, t_n) − (X_N − X_0)‖` along the forward rollout.
    pub max_deviation: f64,
    /// `max_i ‖u(x_i, 0) − u(z_i, 1)‖`.
    pub endpoint_gap: f64,
    /// Paired process-matching loss on the same rows and grid.
    pub residual_loss: f64,
}

/// Rolls `x` forward and measures how far the field is from the constant
/// displacement `X_N − X_0` at every node. Requires a uniform grid.
pub fn check_theorem1<F: Velocity>(field: &F, x: &Tensor, z: &Tensor, grid: &TimeGrid) -> Result<TheoremDiagnostics> {
    if !grid.is_uniform() {
        return Err(Error::Grid("theorem check needs a uniform grid".into()));
    }
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::Empty("pair set"));
    }
    let mut ops = Eager;
    let states = forward_rollout(&mut ops, field, x, grid)?;
    let disp = states[grid.steps()].sub(x)?;
    let mut max_deviation: f64 = 0.0;
    for (n, &t) in grid.points().iter().enumerate() {
        let u = field.velocity(&mut ops, &states[n], Time::Uniform(t))?;
        for d in row_distances(&u, &disp)? {
            max_deviation = max_deviation.max(d);
        }
    }
    let u0 = field.velocity(&mut ops, x, Time::Uniform(0.0))?;
    let u1 = field.velocity(&mut ops, z, Time::Uniform(1.0))?;
    let endpoint_gap = row_distances(&u0, &u1)?.into_iter().fold(0.0, f64::max);
    let (loss, _) = paired_match_loss(&mut ops, field, x, z, grid, PairwiseMetric::SquaredL2Mean)?;
    Ok(TheoremDiagnostics {
        max_deviation,
        endpoint_gap,
        residual_loss: loss.item(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposition1Report {
    /// `(N, mean_i ‖u(x_i, 0) − (z_i − x_i)‖)`
    pub gaps: Vec<(usize, f64)>,
    /// Least-squares fit `gap ≈ c/N + r`.
    pub c: f64,
    pub r: f64,
}

impl Proposition1Report {
    /// Whether every gap lies under `max(c, 0)/N + max(r, 0) + slack`.
    pub fn within_bound(&self, slack: f64) -> bool {
        self.gaps
            .iter()
            .all(|&(n, g)| g <= self.c.max(0.0) / n as f64 + self.r.max(0.0) + slack)
    }

    /// Whether the gaps never grow with `N` by more than `slack`.
    pub fn shrinking(&self, slack: f64) -> bool {
        self.gaps.windows(2).all(|w| w[1].1 <= w[0].1 + slack)
    }
}

/// Initial-velocity gap of fields trained at several grid sizes.
pub fn check_proposition1<F: Velocity>(fields: &[(usize, &F)], x: &Tensor, z: &Tensor) -> Result<Proposition1Report> {
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    if fields.is_empty() || x.rows() == 0 {
        return Err(Error::Empty("proposition check input"));
    }
    let target = z.sub(x)?;
    let mut gaps = Vec::with_capacity(fields.len());
    for &(n, f) in fields {
        if n == 0 {
            return Err(Error::Grid("N must be >= 1".into()));
        }
        let u = f.velocity(&mut Eager, x, Time::Uniform(0.0))?;
        gaps.push((n, ErrorStats::of(&row_distances(&u, &target)?)?.mean));
    }
    let (c, r) = fit_inverse(&gaps);
    Ok(Proposition1Report { gaps, c, r })
}

/// Least squares for `y ≈ c·(1/N) + r`.
fn fit_inverse(points: &[(usize, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.0 as f64).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my);
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mx) * (p.1 - my)).sum();
    let c = sxy / sxx;
    (c, my - c * mx)
}

/// Minimizes the paired process-matching loss over one free velocity per
/// grid node (no network), by gradient descent with backtracking. Returns
/// the optimized velocities and the final loss.
pub fn fit_node_velocities(
    x: &Tensor,
    z: &Tensor,
    grid: &TimeGrid,
    tolerance: f64,
    max_iters: usize,
) -> Result<(NodeVelocities, f64)> {
    let mut field = NodeVelocities::zeros(grid.points(), x.cols());
    let ids: Vec<_> = (0..grid.points().len()).map(crate::numcore::ParamId).collect();
    let eval = |f: &NodeVelocities| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (loss, _) = paired_match_loss(&mut tape, f, x, z, grid, PairwiseMetric::SquaredL2Mean)?;
        let value = tape.scalar_value(&loss);
        let grads = tape.backward(loss, &ids)?;
        Ok((value, grads.into_values().collect()))
    };
    let (mut loss, mut grads) = eval(&field)?;
    let mut step = 0.1;
    for _ in 0..max_iters {
        if loss < tolerance {
            break;
        }
        let g2: f64 = grads.iter().map(|g| g.mean_square() * g.len() as f64).sum();
        loop {
            let mut trial = field.clone();
            for (v, g) in trial.velocities.iter_mut().zip(&grads) {
                *v = v.sub(&g.scale(step))?;
            }
            let (l, g) = eval(&trial)?;
            if l <= loss - 0.5 * step * g2 || step < 1e-12 {
                field = trial;
                loss = l;
                grads = g;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
    }
    Ok((field, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Euler steps used for sampling.
    pub steps: usize,
    pub rho: f64,
    pub forward: ErrorStats,
    pub backward: ErrorStats,
    /// MMD² between forward-synthesized and true targets.
    pub mmd_forward: f64,
    /// MMD² between backward-synthesized and true sources.
    pub mmd_backward: f64,
    /// Distance from each source component's forward-synthesized centroid to
    /// its mapped target mean.
    pub centroid_forward: Vec<f64>,
    /// Distance from each target component's backward-synthesized centroid to
    /// its preimage source mean.
    pub centroid_backward: Vec<f64>,
    pub theorem: TheoremDiagnostics,
}

pub const REPORT_HEADER: [&str; 16] = [
    "method",
    "steps",
    "rho",
    "forward_mean",
    "forward_std",
    "backward_mean",
    "backward_std",
    "mmd_forward",
    "mmd_backward",
    "centroid_forward_max",
    "centroid_backward_max",
    "theorem_max_deviation",
    "theorem_endpoint_gap",
    "theorem_residual_loss",
    "centroid_forward",
    "centroid_backward",
];

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl EvalReport {
    pub fn centroid_forward_max(&self) -> f64 {
        max_of(&self.centroid_forward)
    }

    pub fn centroid_backward_max(&self) -> f64 {
        max_of(&self.centroid_backward)
    }

    pub fn csv_record(&self) -> Vec<String> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        vec![
            self.method.clone(),
            self.steps.to_string(),
            self.rho.to_string(),
            self.forward.mean.to_string(),
            self.forward.std.to_string(),
            self.backward.mean.to_string(),
            self.backward.std.to_string(),
            self.mmd_forward.to_string(),
            self.mmd_backward.to_string(),
            self.centroid_forward_max().to_string(),
            self.centroid_backward_max().to_string(),
            self.theorem.max_deviation.to_string(),
            self.theorem.endpoint_gap.to_string(),
            self.theorem.residual_loss.to_string(),
            join(&self.centroid_forward),
            join(&self.centroid_backward),
        ]
    }

    pub fn from_csv_record(rec: &[String]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "eval report",
            detail,
        };
        if rec.len() != REPORT_HEADER.len() {
            return Err(bad(format!("{} cells, expected {}", rec.len(), REPORT_HEADER.len())));
        }
        let f = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("{}: {:?}", REPORT_HEADER[i], rec[i])))
        };
        let list = |i: usize| -> Result<Vec<f64>> {
            if rec[i].is_empty() {
                return Ok(Vec::new());
            }
            rec[i]
                .split(';')
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("{}: {s:?}", REPORT_HEADER[i])))
                })
                .collect()
        };
        Ok(EvalReport {
            method: rec[0].clone(),
            steps: rec[1].parse().map_err(|_| bad(format!("steps: {:?}", rec[1])))?,
            rho: f(2)?,
            forward: ErrorStats {
                mean: f(3)?,
                std: f(4)?,
            },
            backward: ErrorStats {
                mean: f(5)?,
                std: f(6)?,
            },
            mmd_forward: f(7)?,
            mmd_backward: f(8)?,
            theorem: TheoremDiagnostics {
                max_deviation: f(11)?,
                endpoint_gap: f(12)?,
                residual_loss: f(13)?,
            },
            centroid_forward: list(14)?,
            centroid_backward: list(15)?,
        })
    }

    /// CSV text with header, one row per report.
    pub fn to_csv(reports: &[EvalReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).map_err(csv_err)?;
        for r in reports {
            w.write_record(r.csv_record()).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn parse_csv(text: &str) -> Result<Vec<EvalReport>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header != REPORT_HEADER {
            return Err(Error::Format {
                what: "eval report",
                detail: format!("unexpected header {header:?}"),
            });
        }
        r.records()
            .map(|rec| {
                let rec: Vec<String> = rec.map_err(csv_err)?.iter().map(String::from).collect();
                EvalReport::from_csv_record(&rec)
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method {}  steps {}  rho {}", self.method, self.steps, self.rho).unwrap();
        writeln!(
            s,
            "  transport error  forward {:.5} ± {:.5}  backward {:.5} ± {:.5}",
            self.forward.mean, self.forward.std, self.backward.mean, self.backward.std
        )
        .unwrap();
        writeln!(
            s,
            "  mmd²             forward {:.3e}  backward {:.3e}",
            self.mmd_forward, self.mmd_backward
        )
        .unwrap();
        writeln!(
            s,
            "  centroid max     forward {:.5}  backward {:.5}",
            self.centroid_forward_max(),
            self.centroid_backward_max()
        )
        .unwrap();
        write!(
            s,
            "  straightness     deviation {:.3e}  endpoint gap {:.3e}  residual {:.3e}",
            self.theorem.max_deviation, self.theorem.endpoint_gap, self.theorem.residual_loss
        )
        .unwrap();
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        detail: e.to_string(),
    }
}

/// Evaluates `field` on the paired rows of `test`, sampling with `steps`
/// uniform Euler steps.
pub fn evaluate<F: Velocity>(field: &F, test: &ToyDataset, steps: usize, method: &str, rho: f64) -> Result<EvalReport> {
    let grid = TimeGrid::uniform(steps)?;
    let x = test.paired_source();
    let z = test.paired_target();
    if x.rows() == 0 {
        return Err(Error::Empty("paired test set"));
    }
    let fwd = synthesize(field, &x, &grid, Direction::Forward)?;
    let bwd = synthesize(field, &z, &grid, Direction::Backward)?;
    let kernel = KernelSpec::default();
    let mmd = |a: &Tensor, b: &Tensor| -> Result<f64> { Ok(mmd_squared(&mut Eager, a, b, &kernel)?.item()) };
    let src_labels = test.paired_source_labels();
    let tgt_labels: Vec<usize> = test.pairing.pairs.iter().map(|p| test.target_labels[p.1]).collect();
    let map = &test.pairing.map;
    let flatten = |v: Vec<Option<f64>>| v.into_iter().flatten().collect::<Vec<_>>();
    Ok(EvalReport {
        method: method.to_string(),
        steps,
        rho,
        forward: ErrorStats::of(&row_distances(&fwd, &z)?)?,
        backward: ErrorStats::of(&row_distances(&bwd, &x)?)?,
        mmd_forward: mmd(&fwd, &z)?,
        mmd_backward: mmd(&bwd, &x)?,
        centroid_forward: flatten(centroid_audit(
            &fwd,
            &src_labels,
            map,
            &means_tensor(&test.target_ring.means()),
        )?),
        centroid_backward: flatten(centroid_audit(
            &bwd,
            &tgt_labels,
            &map.inverse(),
            &means_tensor(&test.source_ring.means()),
        )?),
        theorem: check_theorem1(field, &x, &z, &grid)?,
    })
}
