//! Snapshot CSV files: header `t,x1,...,xd`, one row per sample, snapshots
//! told apart by their `t` value.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fm::Snapshot;

/// Format used for every float written to disk (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn expected_header(d: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=d).map(|k| format!("x{k}")))
        .collect()
}

/// Parse snapshot CSV. Rows keep their file order within a snapshot; snapshots
/// are returned in increasing `t`.
pub fn read_snapshots<R: Read>(reader: R) -> Result<Vec<Snapshot>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let d = header.len().saturating_sub(1);
    let want = expected_header(d.max(1));
    let missing: Vec<&String> = want.iter().filter(|c| !header.contains(c)).collect();
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(Error::Data(format!("missing columns: {}", names.join(", "))));
    }
    if header != want {
        return Err(Error::Data(format!(
            "header must be `{}` in that order, found `{}`",
            want.join(","),
            header.join(",")
        )));
    }
    let mut groups: Vec<Snapshot> = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        // line 1 is the header
        let line = k + 2;
        let record = record.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        if record.len() != d + 1 {
            return Err(Error::Data(format!(
                "row {line}: expected {} fields, found {}",
                d + 1,
                record.len()
            )));
        }
        let mut values = Vec::with_capacity(d + 1);
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("row {line}, column {} (`{}`): `{cell}` is not a number", c + 1, header[c]))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {line}, column {} (`{}`): value is not finite", c + 1, header[c])));
            }
            values.push(v);
        }
        let t = values[0];
        let x = DVector::from_vec(values[1..].to_vec());
        match groups.iter_mut().find(|g| g.t == t) {
            Some(g) => g.points.push(x),
            None => groups.push(Snapshot { t, points: vec![x] }),
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    groups.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(groups)
}

pub fn read_snapshots_file(path: &std::path::Path) -> Result<Vec<Snapshot>> {
    let file = std::fs::File::open(path)?;
    read_snapshots(std::io::BufReader::new(file))
}

pub fn write_snapshots<W: Write>(writer: W, snapshots: &[Snapshot]) -> Result<()> {
    let d = snapshots
        .iter()
        .flat_map(|s| s.points.first())
        .map(|p| p.len())
        .next()
        .ok_or_else(|| Error::invalid("nothing to write"))?;
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(expected_header(d)).map_err(io)?;
    for s in snapshots {
        for p in &s.points {
            if p.len() != d {
                return Err(Error::invalid("points differ in dimension"));
            }
            let row = std::iter::once(fmt_f64(s.t)).chain(p.iter().map(|v| fmt_f64(*v)));
            w.write_record(row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Merge snapshot lists from several files; clouds at equal `t` are
/// concatenated in input order.
pub fn merge_snapshots(parts: Vec<Vec<Snapshot>>) -> Vec<Snapshot> {
    let mut all: Vec<Snapshot> = Vec::new();
    for s in parts.into_iter().flatten() {
        match all.iter_mut().find(|o| o.t == s.t) {
            Some(o) => o.points.extend(s.points),
            None => all.push(s),
        }
    }
    all.sort_by(|a, b| a.t.total_cmp(&b.t));
    all
}

/// Paths as rows `particle,t,x1,...,xd`; `clouds[k][i]` is particle `i` at
/// `times[k]`.
pub fn write_trajectories<W: Write>(writer: W, times: &[f64], clouds: &[Vec<DVector<f64>>]) -> Result<()> {
    if times.len() != clouds.len() || clouds.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::invalid("every time needs the same particles"));
    }
    let d = clouds
        .iter()
        .flat_map(|c| c.first())
        .map(|p| p.len())
        .next()
        .ok_or_else(|| Error::invalid("nothing to write"))?;
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let header = std::iter::once("particle".to_string()).chain(expected_header(d));
    w.write_record(header).map_err(io)?;
    for i in 0..clouds[0].len() {
        for (t, c) in times.iter().zip(clouds) {
            let row = [i.to_string(), fmt_f64(*t)]
                .into_iter()
                .chain(c[i].iter().map(|v| fmt_f64(*v)));
            w.write_record(row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Coupling entries above `threshold` as rows `i,j,mass` (0-based indices).
pub fn write_plan_triplets<W: Write>(writer: W, plan: &nalgebra::DMatrix<f64>, threshold: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["i", "j", "mass"]).map_err(io)?;
    for i in 0..plan.nrows() {
        for j in 0..plan.ncols() {
            let m = plan[(i, j)];
            if m > threshold {
                w.write_record([i.to_string(), j.to_string(), fmt_f64(m)]).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Write a numeric table with the given header.
pub fn write_table<W: Write>(writer: W, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::invalid("row length differs from header"));
        }
        w.write_record(r.iter().map(|v| fmt_f64(*v))).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Snapshot>> {
        read_snapshots(text.as_bytes())
    }

    #[test]
    fn merges_files_by_time() {
        let a = parse("t,x1\n0,1\n2,3\n").unwrap();
        let b = parse("t,x1\n1,5\n0,7\n").unwrap();
        let m = merge_snapshots(vec![a, b]);
        assert_eq!(m.iter().map(|s| s.t).collect::<Vec<_>>(), [0.0, 1.0, 2.0]);
        assert_eq!(m[0].points, [DVector::from_vec(vec![1.0]), DVector::from_vec(vec![7.0])]);
    }

    #[test]
    fn sparse_plan_drops_tiny_entries() {
        let plan = nalgebra::DMatrix::from_row_slice(2, 2, &[0.5, 1e-13, 0.0, 0.5]);
        let mut buf = Vec::new();
        write_plan_triplets(&mut buf, &plan, 1e-12).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().collect::<Vec<_>>(), ["i,j,mass", "0,0,5.0000000000000000e-1", "1,1,5.0000000000000000e-1"]);
    }

    #[test]
    fn trajectories_are_grouped_by_particle() {
        let v = |x: f64| DVector::from_vec(vec![x]);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[0.0, 1.0], &[vec![v(1.0), v(2.0)], vec![v(3.0), v(4.0)]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<_> = text.lines().map(|l| l.split(',').next().unwrap().to_string()).collect();
        assert_eq!(rows, ["particle", "0", "0", "1", "1"]);
        assert!(write_trajectories(&mut Vec::new(), &[0.0], &[vec![v(1.0)], vec![v(2.0)]]).is_err());
    }

    #[test]
    fn groups_by_time() {
        let s = parse("t,x1,x2\n1,0,1\n0,2,3\n1,4,5\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].t, 0.0);
        assert_eq!(s[1].points, vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![4.0, 5.0])]);
    }

    #[test]
    fn round_trip_is_exact() {
        let snaps = vec![
            Snapshot {
                t: 0.1,
                points: vec![DVector::from_vec(vec![1.0 / 3.0, -2e-300]), DVector::from_vec(vec![f64::MAX, 0.0])],
            },
            Snapshot {
                t: 0.7,
                points: vec![DVector::from_vec(vec![std::f64::consts::PI, -0.0])],
            },
        ];
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &snaps).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), snaps);
    }

    #[test]
    fn reports_row_and_column() {
        let e = parse("t,x1,x2\n0,1,2\n0,abc,2\n").unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("column 2") && e.contains("x1"), "{e}");
        let e = parse("t,x1,x2\n0,1,2\n0,1\n").unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("expected 3 fields"), "{e}");
        let e = parse("t,x2\n0,1\n").unwrap_err().to_string();
        assert!(e.contains("missing columns: x1"), "{e}");
        let e = parse("x1,x2\n0,1\n").unwrap_err().to_string();
        assert!(e.contains("missing columns: t"), "{e}");
        assert!(parse("t,x1\n").is_err());
        assert!(parse("t,x1\n0,inf\n").is_err());
    }
}
