//! Trajectory CSV. Floats use the shortest representation that parses back
//! to the same value. Complex plants get `_re` and `_im` columns.

use anyhow::{anyhow, bail, Context, Result};
use num_complex::Complex64;
use std::io::{Read, Write};

use specpred_core::sim_engine::Trajectory;

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn names(prefix: &str, count: usize, complex: bool, out: &mut Vec<String>) {
    for i in 1..=count {
        if complex {
            out.push(format!("{prefix}_{i}_re"));
            out.push(format!("{prefix}_{i}_im"));
        } else {
            out.push(format!("{prefix}_{i}"));
        }
    }
}

fn header(tr: &Trajectory, complex: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    names("c", tr.n_modes, complex, &mut h);
    names("Y", tr.n0, complex, &mut h);
    names("Z", tr.n0, complex, &mut h);
    names("u", tr.m, complex, &mut h);
    names("v", tr.m, complex, &mut h);
    h.push("norm_lower".into());
    h.push("norm_upper".into());
    names("d1", tr.m, false, &mut h);
    names("d2", tr.m, false, &mut h);
    h.push("delay".into());
    h
}

pub fn write_trajectory<W: Write>(tr: &Trajectory, complex: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(tr, complex))?;
    let mut row: Vec<String> = Vec::new();
    let push = |row: &mut Vec<String>, vals: &[Complex64]| {
        for z in vals {
            row.push(fmt(z.re));
            if complex {
                row.push(fmt(z.im));
            }
        }
    };
    for j in 0..tr.len() {
        row.clear();
        row.push(fmt(tr.t[j]));
        push(&mut row, tr.c(j));
        push(&mut row, tr.y(j));
        push(&mut row, tr.z(j));
        push(&mut row, tr.u(j));
        push(&mut row, tr.v(j));
        row.push(fmt(tr.norm_lower[j]));
        row.push(fmt(tr.norm_upper[j]));
        row.extend(tr.d1(j).iter().map(|&x| fmt(x)));
        row.extend(tr.d2(j).iter().map(|&x| fmt(x)));
        row.push(fmt(tr.delay[j]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn count(h: &csv::StringRecord, prefix: &str) -> usize {
    let lead = format!("{prefix}_");
    let mut n = 0;
    while h.iter().any(|c| c == format!("{lead}{}", n + 1) || c == format!("{lead}{}_re", n + 1)) {
        n += 1;
    }
    n
}

/// Reads a CSV written by [`write_trajectory`].
pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory> {
    let mut rd = csv::Reader::from_reader(input);
    let h = rd.headers()?.clone();
    let complex = h.iter().any(|c| c == "c_1_re");
    let (n_modes, n0, m) = (count(&h, "c"), count(&h, "Y"), count(&h, "u"));
    if n_modes == 0 || n0 == 0 || m == 0 {
        bail!("trajectory header lacks c_*, Y_* or u_* columns");
    }
    let tmp = Trajectory {
        dt: 0.0,
        t: vec![],
        n_modes,
        n0,
        m,
        coeffs: vec![],
        z: vec![],
        u: vec![],
        v: vec![],
        d1: vec![],
        d2: vec![],
        delay: vec![],
        norm_lower: vec![],
        norm_upper: vec![],
        max_iters: 0,
        max_residual: 0.0,
    };
    let want = header(&tmp, complex);
    if h.iter().ne(want.iter().map(String::as_str)) {
        bail!("unexpected trajectory header; expected {}", want.join(","));
    }
    let mut tr = tmp;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let mut it = rec.iter().enumerate().map(|(i, s)| {
            s.trim().parse::<f64>().with_context(|| format!("row {}, column {}: not a number: {s:?}", line + 2, want[i]))
        });
        let mut next = || it.next().ok_or_else(|| anyhow!("row {} is short", line + 2))?;
        let cplx = |count: usize, dst: &mut Vec<Complex64>, next: &mut dyn FnMut() -> Result<f64>| -> Result<()> {
            for _ in 0..count {
                let re = next()?;
                let im = if complex { next()? } else { 0.0 };
                dst.push(Complex64::new(re, im));
            }
            Ok(())
        };
        tr.t.push(next()?);
        cplx(n_modes, &mut tr.coeffs, &mut next)?;
        let mut y = Vec::new();
        cplx(n0, &mut y, &mut next)?;
        cplx(n0, &mut tr.z, &mut next)?;
        cplx(m, &mut tr.u, &mut next)?;
        cplx(m, &mut tr.v, &mut next)?;
        tr.norm_lower.push(next()?);
        tr.norm_upper.push(next()?);
        for _ in 0..m {
            tr.d1.push(next()?);
        }
        for _ in 0..m {
            tr.d2.push(next()?);
        }
        tr.delay.push(next()?);
    }
    if tr.t.len() < 2 {
        bail!("trajectory needs at least two samples");
    }
    tr.dt = tr.t[1] - tr.t[0];
    Ok(tr)
}
