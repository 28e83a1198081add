//! Columnar text serialization for drivers, trajectories and value grids.
//!
//! All floats are written with 17 significant digits, which round-trips f64
//! exactly through `str::parse`.

use std::io::{BufRead, Write};

use crate::control::ValueGrid;
use crate::error::{Error, Result};
use crate::rough_path::{GridRoughPath, TimeGrid};

/// 17 significant digits; exact f64 round-trip.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad float {s:?}: {e}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("bad integer {s:?}: {e}")))
}

/// Header `d,n,T`, then one row per elementary interval:
/// `t_k, δη_k (d entries), A_k (d² entries, row-major)`.
pub fn write_rough_path<W: Write>(w: &mut W, p: &GridRoughPath) -> Result<()> {
    let d = p.dim();
    let n = p.n_intervals();
    writeln!(w, "{},{},{}", d, n, fmt17(p.grid().horizon()))?;
    for k in 0..n {
        let mut row = Vec::with_capacity(1 + d + d * d);
        row.push(fmt17(p.grid().t(k)));
        row.extend(p.inc(k).iter().map(|&v| fmt17(v)));
        row.extend(p.area(k).iter().map(|&v| fmt17(v)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_rough_path<R: BufRead>(r: &mut R) -> Result<GridRoughPath> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty rough path file".into()))??;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Parse("rough path header must be d,n,T".into()));
    }
    let d = parse_usize(parts[0])?;
    let n = parse_usize(parts[1])?;
    let horizon = parse_f64(parts[2])?;

    let mut times = Vec::with_capacity(n + 1);
    let mut inc = Vec::with_capacity(n * d);
    let mut area = Vec::with_capacity(n * d * d);
    for _ in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("truncated rough path file".into()))??;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 1 + d + d * d {
            return Err(Error::Parse(format!(
                "expected {} columns, got {}",
                1 + d + d * d,
                cols.len()
            )));
        }
        times.push(parse_f64(cols[0])?);
        for c in &cols[1..1 + d] {
            inc.push(parse_f64(c)?);
        }
        for c in &cols[1 + d..] {
            area.push(parse_f64(c)?);
        }
    }
    times.push(horizon);
    let grid = TimeGrid::new(times)?;
    GridRoughPath::from_raw(grid, d, inc, area)
}

/// Header `e,n,T`, then one row per grid time: `t_k, Y_k (e entries)`.
pub fn write_states<W: Write>(w: &mut W, grid: &TimeGrid, states: &[Vec<f64>]) -> Result<()> {
    if states.is_empty() {
        return Err(Error::invalid("no states to write"));
    }
    let e = states[0].len();
    writeln!(w, "{},{},{}", e, states.len() - 1, fmt17(grid.horizon()))?;
    let offset = grid.times().len() - states.len();
    for (i, st) in states.iter().enumerate() {
        let mut row = Vec::with_capacity(1 + e);
        row.push(fmt17(grid.t(offset + i)));
        row.extend(st.iter().map(|&v| fmt17(v)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_states<R: BufRead>(r: &mut R) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty states file".into()))??;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Parse("states header must be e,n,T".into()));
    }
    let e = parse_usize(parts[0])?;
    let n = parse_usize(parts[1])?;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("truncated states file".into()))??;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 1 + e {
            return Err(Error::Parse(format!(
                "expected {} columns, got {}",
                1 + e,
                cols.len()
            )));
        }
        times.push(parse_f64(cols[0])?);
        let mut st = Vec::with_capacity(e);
        for c in &cols[1..] {
            st.push(parse_f64(c)?);
        }
        states.push(st);
    }
    Ok((times, states))
}

/// Header `dim,n_times,nodes_per_axis...`, then one row per (time, node):
/// `t_k, node coordinates, value`.
pub fn write_value_grid<W: Write>(w: &mut W, vg: &ValueGrid) -> Result<()> {
    let dim = vg.mesh.dim();
    let nodes: Vec<String> = vg
        .mesh
        .axes()
        .iter()
        .map(|a| a.nodes.to_string())
        .collect();
    writeln!(w, "{},{},{}", dim, vg.times.len(), nodes.join(","))?;
    let mut coords = vec![0.0; dim];
    for (si, &t) in vg.times.iter().enumerate() {
        for flat in 0..vg.mesh.len() {
            vg.mesh.node(flat, &mut coords);
            let mut row = Vec::with_capacity(2 + dim);
            row.push(fmt17(t));
            row.extend(coords.iter().map(|&c| fmt17(c)));
            row.push(fmt17(vg.values[si][flat]));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::{make_uniform_grid, sample_brownian_lift};
    use proptest::prelude::*;

    #[test]
    fn rough_path_roundtrip_is_exact() {
        let g = make_uniform_grid(1.5, 12).unwrap();
        let p = sample_brownian_lift(99, &g, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_rough_path(&mut buf, &p).unwrap();
        let q = read_rough_path(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn states_roundtrip_is_exact() {
        let g = make_uniform_grid(2.0, 3).unwrap();
        let states = vec![
            vec![1.0, -2.0],
            vec![0.125, 3.5e-17],
            vec![-0.7, 1.0 / 3.0],
            vec![f64::MIN_POSITIVE, 1e300],
        ];
        let mut buf = Vec::new();
        write_states(&mut buf, &g, &states).unwrap();
        let (times, back) = read_states(&mut buf.as_slice()).unwrap();
        assert_eq!(times, g.times());
        assert_eq!(states, back);
    }

    #[test]
    fn value_grid_columnar_output() {
        use crate::control::Mesh;
        let mesh = Mesh::uniform_1d(-1.0, 1.0, 3).unwrap();
        let vg = ValueGrid {
            times: vec![0.0, 1.0],
            mesh,
            values: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            argmax: None,
        };
        let mut buf = Vec::new();
        write_value_grid(&mut buf, &vg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[0], "1,2,3");
        assert!(lines[1].starts_with("0.")); // t = 0 row
        let last: Vec<&str> = lines[6].split(',').collect();
        assert_eq!(last.len(), 3);
        assert_eq!(last[2].parse::<f64>().unwrap(), 6.0);
    }

    proptest! {
        #[test]
        fn fmt17_roundtrips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt17(x);
            let y: f64 = s.parse().unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
