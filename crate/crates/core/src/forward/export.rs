//! Ensemble persistence.
//!
//! Binary layout, all little-endian: the 8-byte magic `ESMPENS1`, then
//! `u64` paths, steps, n, d, seed, then `f64` dt, then the state array
//! (`paths × (steps+1) × n`) and the increment array (`paths × steps × d`).
//! The generating control id is not stored.

use std::io::{Read, Write};

use super::{PathEnsemble, PathValues, TimeGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ESMPENS1";

/// Writes `path,step,t,x_1..x_n` rows for the first `max_paths` paths.
pub fn write_csv<E: PathValues, W: Write>(ens: &E, max_paths: usize, mut out: W) -> Result<()> {
    let n = ens.dim();
    let grid = ens.grid();
    write!(out, "path,step,t")?;
    for i in 1..=n {
        write!(out, ",x_{i}")?;
    }
    writeln!(out)?;
    for j in 0..ens.path_count().min(max_paths) {
        for k in ens.first_step()..=grid.steps {
            write!(out, "{j},{k},{}", grid.time(k))?;
            for v in ens.value(j, k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn write_binary<W: Write>(ens: &PathEnsemble, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    for v in [ens.paths, ens.grid.steps, ens.n, ens.d] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&ens.seed.to_le_bytes())?;
    out.write_all(&ens.grid.dt.to_le_bytes())?;
    for v in ens.states.iter().chain(&ens.increments) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a binary dump; the control id comes back as `"unknown"`.
pub fn read_binary<R: Read>(mut input: R) -> Result<PathEnsemble> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not an ensemble dump".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |input: &mut R| -> Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        *h = u64::from_le_bytes(next(&mut input)?) as usize;
    }
    let seed = u64::from_le_bytes(next(&mut input)?);
    let dt = f64::from_le_bytes(next(&mut input)?);
    let [paths, steps, n, d] = header;
    let mut floats = |count: usize, input: &mut R| -> Result<Vec<f64>> {
        (0..count).map(|_| Ok(f64::from_le_bytes(next(input)?))).collect()
    };
    let states = floats(paths * (steps + 1) * n, &mut input)?;
    let increments = floats(paths * steps * d, &mut input)?;
    Ok(PathEnsemble {
        grid: TimeGrid::new(dt, steps)?,
        paths,
        n,
        d,
        seed,
        control_id: "unknown".into(),
        states,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_state;
    use crate::model::{ControlLaw, ModelSpec};

    #[test]
    fn binary_round_trip() {
        let model = ModelSpec::cubic1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let grid = TimeGrid::new(0.05, 7).unwrap();
        let ens = simulate_state(&model, &u, &[0.5], grid, 3, 42).unwrap();
        let mut buf = Vec::new();
        write_binary(&ens, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 6 * 8 + 8 * (3 * 8 + 3 * 7));
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.states, ens.states);
        assert_eq!(back.increments, ens.increments);
        assert_eq!((back.grid, back.seed), (ens.grid, ens.seed));
    }

    #[test]
    fn csv_has_one_row_per_path_and_step() {
        let model = ModelSpec::lq1();
        let u = ControlLaw::zero(model.control_set(), 1);
        let ens = simulate_state(&model, &u, &[0.5], TimeGrid::new(0.1, 4).unwrap(), 2, 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&ens, usize::MAX, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x_1");
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[1].starts_with("0,0,0,0.5"));
    }
}
