use std::io::Write;

use super::AdjointSolution;
use crate::error::{Error, Result};
use crate::forward::PathEnsemble;

/// Writes `path,step,t,p_1..p_n,q1_1..qd_n`; the `q` columns are empty on
/// the terminal step. Only the first `max_paths` paths are written.
pub fn write_pathwise_csv<W: Write>(sol: &AdjointSolution, ens: &PathEnsemble, max_paths: usize, mut out: W) -> Result<()> {
    if ens.grid != sol.grid || ens.paths != sol.paths || ens.seed != sol.seed {
        return Err(Error::EnsembleMismatch("solution was not computed on this ensemble".into()));
    }
    let (n, d) = (sol.n, sol.d);
    write!(out, "path,step,t")?;
    for r in 1..=n {
        write!(out, ",p_{r}")?;
    }
    for i in 1..=d {
        for r in 1..=n {
            write!(out, ",q{i}_{r}")?;
        }
    }
    writeln!(out)?;
    let mut ev = sol.evaluator();
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n * d]);
    for j in 0..sol.paths.min(max_paths) {
        for k in 0..=sol.grid.steps {
            let x = ens.state(j, k);
            ev.p(j, k, x, &mut p);
            write!(out, "{j},{k},{}", sol.grid.time(k))?;
            for v in &p {
                write!(out, ",{v}")?;
            }
            if k < sol.grid.steps {
                ev.q(k, x, &mut q);
                for v in &q {
                    write!(out, ",{v}")?;
                }
            } else {
                for _ in 0..n * d {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
